use super::config::ModelConfig;
use super::model::Seq2SeqModel;
use super::tokenizer::{byte_tokenize, encode_units_target, PAD_ID};
use super::Result;
use crate::nn::{cross_entropy, grad_check, GradCheckReport, Probe};

/// A single-example gradient check of the full model in `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckSetup {
    pub config: ModelConfig,
    pub text: String,
    pub units: Vec<u32>,
    pub eps: f64,
}

impl Default for GradCheckSetup {
    /// One encoder and one decoder layer, width 8, two heads; the text and
    /// units fill a source of 4 tokens and a target of 5.
    fn default() -> Self {
        Self {
            config: ModelConfig {
                d_model: 8,
                n_heads: 2,
                n_layers_enc: 1,
                n_layers_dec: 1,
                d_ff: 32,
                unit_vocab: 13,
                max_src_len: 4,
                max_tgt_len: 5,
                seed: 42,
                ..ModelConfig::default()
            },
            text: "abc".into(),
            units: vec![3, 7, 1, 9],
            eps: 1e-5,
        }
    }
}

/// Runs the check. With `corrupt_backward` the analytic gradient of the
/// first attention projection is halved, which must make the check fail.
pub fn model_grad_check(setup: &GradCheckSetup, corrupt_backward: bool) -> Result<GradCheckReport> {
    let model = Seq2SeqModel::<f32>::new(setup.config.clone())?.cast::<f64>();
    let c = model.config();
    let src = byte_tokenize(setup.text.as_bytes(), c.max_src_len)?;
    let tgt = encode_units_target(&setup.units, c.k(), c.max_tgt_len)?;
    let (logits, cache) = model.forward_cached(&src, &tgt.input)?;
    let (_, dlogits) = cross_entropy(&logits, &tgt.output, PAD_ID)?;
    let mut grads = model.grad_buffers();
    model.backward(&cache, &dlogits, &mut grads)?;
    if corrupt_backward {
        let i = model
            .params()
            .iter()
            .position(|p| p.name.ends_with("attn.q"))
            .expect("model has attention");
        grads[i].scale(0.5);
    }
    let analytic: Vec<f64> = grads.iter().flat_map(|g| g.to_f64_vec()).collect();
    let theta = model.flat_values();
    let mut probe = model.clone();
    let f = |t: &[f64]| {
        probe.set_flat_values(t);
        match probe.forward_cached(&src, &tgt.input) {
            Ok((logits, cache)) => Probe {
                loss: cross_entropy(&logits, &tgt.output, PAD_ID).map_or(f64::NAN, |r| r.0),
                branch: cache.relu_pattern(),
            },
            Err(_) => Probe::smooth(f64::NAN),
        }
    };
    Ok(grad_check(f, &theta, &analytic, setup.eps)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn micro_model_passes() {
        let r = model_grad_check(&GradCheckSetup::default(), false).unwrap();
        assert!(r.max_rel_error <= 1e-4, "{r:?}");
        assert!(r.checked > 1000);
        let again = model_grad_check(&GradCheckSetup::default(), false).unwrap();
        assert_eq!(r.max_rel_error.to_bits(), again.max_rel_error.to_bits());
    }

    #[test]
    fn corrupted_backward_fails() {
        let r = model_grad_check(&GradCheckSetup::default(), true).unwrap();
        assert!(r.max_rel_error > 1e-2, "{r:?}");
    }
}
