use super::model::Seq2SeqModel;
use super::tokenizer::{decode_unit_tokens, BOS_ID, EOS_ID};
use super::Result;
use crate::nn::Scalar;
use crate::units::{dedup, Unit};

/// Greedy decoding from BOS until EOS or `max_len` generated tokens.
///
/// The argmax breaks ties toward the lowest token ID. Special tokens are
/// stripped and adjacent repeats removed before returning, so the output
/// follows the same convention as the training targets.
pub fn greedy_decode<T: Scalar>(
    model: &Seq2SeqModel<T>,
    src: &[u32],
    max_len: usize,
) -> Result<Vec<Unit>> {
    let max_len = max_len.min(model.config().max_tgt_len);
    if max_len == 0 {
        return Ok(Vec::new());
    }
    let enc = model.encode(src)?;
    let mut tokens = vec![BOS_ID];
    while tokens.len() <= max_len {
        let (logits, _) = model.decode_with(enc.clone(), &tokens)?;
        let last = logits.row(logits.rows() - 1);
        let mut best = 0;
        for (j, v) in last.iter().enumerate() {
            if v.to_f64() > last[best].to_f64() {
                best = j;
            }
        }
        let next = best as u32;
        if next == EOS_ID {
            break;
        }
        tokens.push(next);
    }
    Ok(dedup(&decode_unit_tokens(&tokens[1..])))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predictor::ModelConfig;

    fn tiny() -> Seq2SeqModel<f32> {
        Seq2SeqModel::new(ModelConfig {
            d_model: 8,
            n_heads: 2,
            n_layers_enc: 1,
            n_layers_dec: 1,
            d_ff: 16,
            unit_vocab: 13,
            max_src_len: 16,
            max_tgt_len: 12,
            seed: 3,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn zero_max_len_is_empty() {
        assert!(greedy_decode(&tiny(), &[50, 1], 0).unwrap().is_empty());
    }

    #[test]
    fn outputs_are_units_and_deterministic() {
        let m = tiny();
        for text in ["abc", "かな漢字", ""] {
            let src = crate::predictor::byte_tokenize(text.as_bytes(), 16).unwrap();
            let a = greedy_decode(&m, &src, 50).unwrap();
            assert_eq!(a, greedy_decode(&m, &src, 50).unwrap());
            assert!(a.iter().all(|&u| (u as usize) < 10));
            assert!(a.len() <= 12);
            assert!(a.windows(2).all(|w| w[0] != w[1]));
        }
    }
}
