use super::{PredictorError, Result};
use crate::units::Unit;

pub const PAD_ID: u32 = 0;
pub const EOS_ID: u32 = 1;
pub const BOS_ID: u32 = 2;
/// First non-special token ID on both vocabularies.
pub const BYTE_OFFSET: u32 = 3;
/// Text vocabulary: three specials plus one token per byte value.
pub const TEXT_VOCAB: usize = 3 + 256;

/// Token ID conventions shared by source and target vocabularies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenizerSpec {
    pub pad_id: u32,
    pub eos_id: u32,
    pub bos_id: u32,
    pub byte_offset: u32,
    pub text_vocab: usize,
}

impl Default for TokenizerSpec {
    fn default() -> Self {
        Self {
            pad_id: PAD_ID,
            eos_id: EOS_ID,
            bos_id: BOS_ID,
            byte_offset: BYTE_OFFSET,
            text_vocab: TEXT_VOCAB,
        }
    }
}

/// Maps each UTF-8 byte `b` to `3 + b` and appends EOS.
pub fn byte_tokenize(text: &[u8], max_src_len: usize) -> Result<Vec<u32>> {
    if std::str::from_utf8(text).is_err() {
        return Err(PredictorError::InvalidUtf8);
    }
    let len = text.len() + 1;
    if len > max_src_len {
        return Err(PredictorError::SourceTooLong {
            len,
            max: max_src_len,
        });
    }
    let mut ids: Vec<u32> = text.iter().map(|&b| BYTE_OFFSET + u32::from(b)).collect();
    ids.push(EOS_ID);
    Ok(ids)
}

/// Teacher-forcing pair for one target: decoder input `[BOS, t...]` and
/// expected output `[t..., EOS]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TargetTokens {
    pub input: Vec<u32>,
    pub output: Vec<u32>,
}

/// Maps unit `u` to `3 + u` and appends EOS.
pub fn encode_units_target(units: &[Unit], k: usize, max_tgt_len: usize) -> Result<TargetTokens> {
    if let Some(&unit) = units.iter().find(|&&u| u as usize >= k) {
        return Err(PredictorError::UnitOutOfRange { unit, k });
    }
    let len = units.len() + 1;
    if len > max_tgt_len {
        return Err(PredictorError::TargetTooLong {
            len,
            max: max_tgt_len,
        });
    }
    let mut output: Vec<u32> = units.iter().map(|&u| BYTE_OFFSET + u).collect();
    output.push(EOS_ID);
    let mut input = Vec::with_capacity(len);
    input.push(BOS_ID);
    input.extend_from_slice(&output[..output.len() - 1]);
    Ok(TargetTokens { input, output })
}

/// Drops special tokens and removes the unit offset.
pub fn decode_unit_tokens(tokens: &[u32]) -> Vec<Unit> {
    tokens
        .iter()
        .filter(|&&t| t >= BYTE_OFFSET)
        .map(|&t| t - BYTE_OFFSET)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn byte_examples() {
        assert_eq!(byte_tokenize(b"a", 512).unwrap(), vec![100, 1]);
        assert_eq!(
            byte_tokenize("あ".as_bytes(), 512).unwrap(),
            vec![230, 132, 133, 1]
        );
        assert_eq!(byte_tokenize(b"", 512).unwrap(), vec![1]);
        assert!(matches!(
            byte_tokenize(&[0xff, 0xfe], 512),
            Err(PredictorError::InvalidUtf8)
        ));
        assert!(matches!(
            byte_tokenize(b"abcd", 4),
            Err(PredictorError::SourceTooLong { len: 5, max: 4 })
        ));
    }

    #[test]
    fn target_examples() {
        let t = encode_units_target(&[0, 499], 500, 1024).unwrap();
        assert_eq!(t.output, vec![3, 502, 1]);
        assert_eq!(t.input, vec![2, 3, 502]);
        assert_eq!(encode_units_target(&[], 500, 1024).unwrap().output, vec![1]);
        assert!(matches!(
            encode_units_target(&[500], 500, 1024),
            Err(PredictorError::UnitOutOfRange { unit: 500, k: 500 })
        ));
        assert!(matches!(
            encode_units_target(&[1, 2, 3], 500, 3),
            Err(PredictorError::TargetTooLong { .. })
        ));
        assert_eq!(decode_unit_tokens(&[2, 3, 0, 502, 1]), vec![0, 499]);
    }

    proptest! {
        #[test]
        fn tokenization_round_trip(s in "\\PC{0,40}") {
            let ids = byte_tokenize(s.as_bytes(), 1 << 20).unwrap();
            prop_assert_eq!(ids.len(), s.len() + 1);
            prop_assert_eq!(*ids.last().unwrap(), EOS_ID);
            let bytes: Vec<u8> = ids[..ids.len() - 1].iter().map(|&i| (i - BYTE_OFFSET) as u8).collect();
            prop_assert_eq!(String::from_utf8(bytes).unwrap(), s);
        }
    }
}
