use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::model::Seq2SeqModel;
use super::tokenizer::{byte_tokenize, encode_units_target, PAD_ID};
use super::{PredictorError, Result};
use crate::nn::{adam_step, clip_grad_norm, cross_entropy_sum, AdamState, Tensor};
use crate::rng::SplitMix64;
use crate::units::{dedup, Unit};

/// A tokenized training pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainExample {
    pub id: String,
    pub src: Vec<u32>,
    pub tgt_in: Vec<u32>,
    pub tgt_out: Vec<u32>,
}

/// Tokenizes `(id, text, units)` triples. Targets are deduplicated first.
pub fn prepare_dataset<S: AsRef<str>>(
    model: &Seq2SeqModel<f32>,
    pairs: &[(S, S, Vec<Unit>)],
) -> Result<Vec<TrainExample>> {
    let c = model.config();
    pairs
        .iter()
        .map(|(id, text, units)| {
            let id = id.as_ref();
            let src = byte_tokenize(text.as_ref().as_bytes(), c.max_src_len)
                .map_err(|e| e.for_utterance(id))?;
            let tgt = encode_units_target(&dedup(units), c.k(), c.max_tgt_len)
                .map_err(|e| e.for_utterance(id))?;
            Ok(TrainExample {
                id: id.to_string(),
                src,
                tgt_in: tgt.input,
                tgt_out: tgt.output,
            })
        })
        .collect()
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub wall_ms: u64,
}

/// Per-step mean token loss, measured before each update.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub losses: Vec<f64>,
}

impl LossCurve {
    pub fn final_loss(&self) -> Option<f64> {
        self.losses.last().copied()
    }
}

impl StepLog {
    /// One JSON-lines record, newline included.
    pub fn to_json_line(&self) -> String {
        let mut line = serde_json::to_string(self).expect("step log serializes");
        line.push('\n');
        line
    }
}

/// Mini-batch Adam training. Each epoch visits the examples in an order
/// shuffled by SplitMix64 seeded from `shuffle_seed`; the final batch of an
/// epoch may be short. `on_step` sees every step's log entry.
pub fn train(
    model: &mut Seq2SeqModel<f32>,
    data: &[TrainExample],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepLog),
) -> Result<LossCurve> {
    if data.is_empty() {
        return Err(PredictorError::EmptyDataset);
    }
    cfg.validate()?;
    let start = Instant::now();
    let mut rng = SplitMix64::new(cfg.shuffle_seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = order.len();
    let mut adam = AdamState::new(model.params());
    let mut grads: Vec<Tensor<f32>> = model.grad_buffers();
    let mut curve = LossCurve::default();

    for step in 0..cfg.max_steps {
        if cursor >= order.len() {
            rng.shuffle(&mut order);
            cursor = 0;
        }
        let end = (cursor + cfg.batch_size).min(order.len());
        let batch = &order[cursor..end];
        cursor = end;

        let tokens: usize = batch
            .iter()
            .map(|&i| data[i].tgt_out.iter().filter(|&&t| t != PAD_ID).count())
            .sum();
        let scale = 1.0 / tokens.max(1) as f64;
        for g in &mut grads {
            g.fill_zero();
        }
        let mut loss_sum = 0.0;
        for &i in batch {
            let ex = &data[i];
            let (logits, cache) = model
                .forward_cached(&ex.src, &ex.tgt_in)
                .map_err(|e| e.for_utterance(&ex.id))?;
            let (loss, dlogits, _) = cross_entropy_sum(&logits, &ex.tgt_out, PAD_ID, scale)?;
            loss_sum += loss;
            model.backward(&cache, &dlogits, &mut grads)?;
        }
        for (p, g) in model.params_mut().iter_mut().zip(&mut grads) {
            std::mem::swap(&mut p.grad, g);
        }
        clip_grad_norm(model.params_mut(), cfg.clip_norm);
        adam_step(model.params_mut(), &mut adam, cfg.lr)?;
        for (p, g) in model.params_mut().iter_mut().zip(&mut grads) {
            std::mem::swap(&mut p.grad, g);
        }

        let entry = StepLog {
            step,
            loss: loss_sum * scale,
            wall_ms: start.elapsed().as_millis() as u64,
        };
        on_step(&entry);
        curve.losses.push(entry.loss);
    }
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predictor::{greedy_decode, ModelConfig};

    fn small_config(k: usize) -> ModelConfig {
        ModelConfig {
            d_model: 32,
            n_heads: 4,
            d_ff: 64,
            max_src_len: 64,
            max_tgt_len: 64,
            ..ModelConfig::for_units(k)
        }
    }

    #[test]
    fn empty_dataset_rejected() {
        let mut m = Seq2SeqModel::new(small_config(10)).unwrap();
        let r = train(&mut m, &[], &TrainConfig::default(), |_| {});
        assert!(matches!(r, Err(PredictorError::EmptyDataset)));
    }

    #[test]
    fn tokenization_errors_name_the_utterance() {
        let m = Seq2SeqModel::new(small_config(10)).unwrap();
        let pairs = vec![("ok", "abc", vec![1, 2]), ("bad", "abc", vec![10])];
        let err = prepare_dataset(&m, &pairs).unwrap_err();
        assert!(err.to_string().contains("\"bad\""), "{err}");
    }

    #[test]
    fn initial_loss_near_uniform() {
        // default architecture, 500-unit codebook, one full batch
        let mut m = Seq2SeqModel::new(ModelConfig::default()).unwrap();
        let mut rng = crate::rng::SplitMix64::new(11);
        let texts = [
            "こんにちは world",
            "unit test",
            "音声合成",
            "abc def ghi",
            "x",
            "かきくけこ",
            "hello",
            "終わり",
        ];
        let pairs: Vec<(String, String, Vec<u32>)> = texts
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let units = (0..20).map(|_| rng.below(500) as u32).collect();
                (format!("u{i}"), t.to_string(), units)
            })
            .collect();
        let data = prepare_dataset(&m, &pairs).unwrap();
        let cfg = TrainConfig {
            max_steps: 1,
            ..Default::default()
        };
        let curve = train(&mut m, &data, &cfg, |_| {}).unwrap();
        let ln_v = (503f64).ln();
        let l0 = curve.losses[0];
        assert!((l0 - ln_v).abs() <= 0.1 * ln_v, "{l0} vs {ln_v}");
    }

    #[test]
    fn overfits_single_pair_deterministically() {
        let pairs = vec![("only", "abc", vec![7, 7, 3, 9, 9, 9])];
        let run = || {
            let mut m = Seq2SeqModel::new(small_config(10)).unwrap();
            let data = prepare_dataset(&m, &pairs).unwrap();
            let cfg = TrainConfig {
                max_steps: 200,
                lr: 3e-3,
                ..Default::default()
            };
            let curve = train(&mut m, &data, &cfg, |_| {}).unwrap();
            (m, curve, data)
        };
        let (m, curve, data) = run();
        assert!(
            curve.final_loss().unwrap() < 0.01,
            "{:?}",
            curve.final_loss()
        );
        let tail = &curve.losses[curve.losses.len() / 2..];
        let rises = tail.windows(2).filter(|w| w[1] > w[0]).count();
        assert!(rises <= 5, "{rises} increases in the second half: {tail:?}");
        assert_eq!(greedy_decode(&m, &data[0].src, 64).unwrap(), vec![7, 3, 9]);
        let (_, again, _) = run();
        assert_eq!(curve, again);
    }
}
