//! Binary checkpoint: `SQ2S`, version, config block, then named tensors.

use std::path::Path;

use super::config::ModelConfig;
use super::model::Seq2SeqModel;
use super::{PredictorError, Result};
use crate::corpus;
use crate::nn::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SQ2S";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_u32(b: &mut Vec<u8>, v: usize) {
    b.extend_from_slice(&(v as u32).to_le_bytes());
}

pub fn checkpoint_bytes(m: &Seq2SeqModel<f32>) -> Vec<u8> {
    let c = m.config();
    let mut b = Vec::with_capacity(64 + 4 * m.num_parameters());
    b.extend_from_slice(CHECKPOINT_MAGIC);
    b.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for v in [
        c.d_model,
        c.n_heads,
        c.n_layers_enc,
        c.n_layers_dec,
        c.d_ff,
        c.text_vocab,
        c.unit_vocab,
        c.max_src_len,
        c.max_tgt_len,
    ] {
        put_u32(&mut b, v);
    }
    b.extend_from_slice(&c.seed.to_le_bytes());
    put_u32(&mut b, m.params().len());
    for p in m.params() {
        b.extend_from_slice(&(p.name.len() as u16).to_le_bytes());
        b.extend_from_slice(p.name.as_bytes());
        b.push(p.value.shape().len() as u8);
        for &d in p.value.shape() {
            put_u32(&mut b, d);
        }
        for v in p.value.data() {
            b.extend_from_slice(&v.to_le_bytes());
        }
    }
    b
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| PredictorError::TruncatedFile {
            path: self.path.into(),
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn parse_checkpoint(bytes: &[u8], path: &str) -> Result<Seq2SeqModel<f32>> {
    if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(PredictorError::BadMagic { path: path.into() });
    }
    let mut r = Reader {
        bytes,
        pos: 4,
        path,
    };
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(PredictorError::UnknownVersion {
            path: path.into(),
            version,
        });
    }
    let mut counts = [0usize; 9];
    for c in &mut counts {
        *c = r.u32()? as usize;
    }
    let config = ModelConfig {
        d_model: counts[0],
        n_heads: counts[1],
        n_layers_enc: counts[2],
        n_layers_dec: counts[3],
        d_ff: counts[4],
        text_vocab: counts[5],
        unit_vocab: counts[6],
        max_src_len: counts[7],
        max_tgt_len: counts[8],
        seed: r.u64()?,
    };
    let n = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(n.min(4096));
    for _ in 0..n {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| PredictorError::ShapeMismatchOnLoad {
                path: path.into(),
                reason: "tensor name is not UTF-8".into(),
            })?
            .to_string();
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let count: usize = shape.iter().product();
        let raw = r.take(count.saturating_mul(4))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| PredictorError::ShapeMismatchOnLoad {
            path: path.into(),
            reason: format!("{name}: {e}"),
        })?;
        tensors.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(PredictorError::ShapeMismatchOnLoad {
            path: path.into(),
            reason: format!("{} trailing bytes", bytes.len() - r.pos),
        });
    }
    Seq2SeqModel::from_tensors(config, tensors).map_err(|e| match e {
        PredictorError::ShapeMismatchOnLoad { reason, .. } => PredictorError::ShapeMismatchOnLoad {
            path: path.into(),
            reason,
        },
        other => other,
    })
}

pub fn save_checkpoint(m: &Seq2SeqModel<f32>, path: &Path) -> Result<()> {
    corpus::write_atomic(path, &checkpoint_bytes(m)).map_err(|e| PredictorError::Io {
        path: path.display().to_string(),
        source: std::io::Error::other(e.to_string()),
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Seq2SeqModel<f32>> {
    let bytes = std::fs::read(path).map_err(|source| PredictorError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_checkpoint(&bytes, &path.display().to_string())
}

/// Loads a checkpoint and checks that it was built for `expected`
/// (seed excluded).
pub fn load_checkpoint_expecting(path: &Path, expected: &ModelConfig) -> Result<Seq2SeqModel<f32>> {
    let m = load_checkpoint(path)?;
    let got = ModelConfig {
        seed: expected.seed,
        ..m.config().clone()
    };
    if &got != expected {
        return Err(PredictorError::ShapeMismatchOnLoad {
            path: path.display().to_string(),
            reason: format!(
                "checkpoint config {:?} differs from expected {expected:?}",
                m.config()
            ),
        });
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro(k: usize) -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_heads: 2,
            n_layers_enc: 1,
            n_layers_dec: 1,
            d_ff: 16,
            max_src_len: 8,
            max_tgt_len: 8,
            seed: 9,
            ..ModelConfig::for_units(k)
        }
    }

    #[test]
    fn round_trip_preserves_logits() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.sq2s");
        let m = Seq2SeqModel::new(micro(10)).unwrap();
        save_checkpoint(&m, &p).unwrap();
        let back = load_checkpoint(&p).unwrap();
        assert_eq!(back.config(), m.config());
        let src = [60, 70, 1];
        let tgt = [2, 4, 9];
        assert_eq!(
            back.forward(&src, &tgt).unwrap(),
            m.forward(&src, &tgt).unwrap()
        );
        assert_eq!(checkpoint_bytes(&back), checkpoint_bytes(&m));
    }

    #[test]
    fn rejects_damaged_files() {
        let m = Seq2SeqModel::new(micro(10)).unwrap();
        let b = checkpoint_bytes(&m);
        assert!(matches!(
            parse_checkpoint(&b[..b.len() - 10], "x"),
            Err(PredictorError::TruncatedFile { .. })
        ));
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(matches!(
            parse_checkpoint(&bad, "x"),
            Err(PredictorError::BadMagic { .. })
        ));
        let mut ver = b.clone();
        ver[4] = 7;
        assert!(matches!(
            parse_checkpoint(&ver, "x"),
            Err(PredictorError::UnknownVersion { version: 7, .. })
        ));
        // header claims a 4-unit codebook bigger than the stored tensors
        let mut cfg = b;
        cfg[8 + 6 * 4] += 1;
        assert!(matches!(
            parse_checkpoint(&cfg, "x"),
            Err(PredictorError::ShapeMismatchOnLoad { .. })
        ));
    }

    #[test]
    fn expected_config_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.sq2s");
        save_checkpoint(&Seq2SeqModel::new(micro(500)).unwrap(), &p).unwrap();
        assert!(load_checkpoint_expecting(&p, &micro(500)).is_ok());
        assert!(matches!(
            load_checkpoint_expecting(&p, &micro(100)),
            Err(PredictorError::ShapeMismatchOnLoad { .. })
        ));
    }
}
