//! K-means codebook training and nearest-centroid quantization.
//!
//! Centroids are stored as `f32`; every distance and mean is accumulated in
//! `f64` in frame-index order so a given seed yields bit-identical codebooks.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{self, CorpusError, FeatureMatrix};
use crate::rng::SplitMix64;
use crate::units::Unit;

pub const CODEBOOK_MAGIC: &[u8; 4] = b"KMCB";
pub const CODEBOOK_VERSION: u32 = 1;
const CODEBOOK_HEADER_LEN: usize = 32;

#[derive(Debug, Error)]
pub enum QuantError {
    #[error("need at least {k} frames, got {n_frames}")]
    TooFewFrames { n_frames: usize, k: usize },
    #[error("need at least {k} distinct frames, got {distinct}")]
    TooFewDistinctPoints { distinct: usize, k: usize },
    #[error("feature dim {features} does not match codebook dim {codebook}")]
    DimMismatch { features: usize, codebook: usize },
    #[error("non-finite value at index {index}")]
    NonFiniteValue { index: usize },
    #[error("invalid k-means config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Format(#[from] CorpusError),
}

pub type Result<T, E = QuantError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct KmeansConfig {
    pub k: usize,
    pub max_iters: usize,
    pub tol: f64,
    pub seed: u64,
    pub restarts: usize,
}

impl Default for KmeansConfig {
    fn default() -> Self {
        Self {
            k: 500,
            max_iters: 100,
            tol: 1e-6,
            seed: 0,
            restarts: 1,
        }
    }
}

impl KmeansConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(QuantError::InvalidConfig("k must be >= 1".into()));
        }
        if self.max_iters == 0 {
            return Err(QuantError::InvalidConfig("max_iters must be >= 1".into()));
        }
        if self.tol.is_nan() || self.tol < 0.0 {
            return Err(QuantError::InvalidConfig("tol must be >= 0".into()));
        }
        if self.restarts == 0 {
            return Err(QuantError::InvalidConfig("restarts must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitStats {
    pub iterations_run: usize,
    pub inertia_per_iter: Vec<f64>,
    pub converged: bool,
}

/// The learned unit inventory: `k` centroids of width `dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    k: usize,
    dim: usize,
    centroids: Vec<f32>,
    pub trained_inertia: f64,
    pub seed: u64,
}

#[inline]
fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum()
}

impl Codebook {
    pub fn new(k: usize, dim: usize, centroids: Vec<f32>) -> Result<Self> {
        if k == 0 || dim == 0 {
            return Err(QuantError::InvalidConfig(format!("k={k}, dim={dim}")));
        }
        if centroids.len() != k * dim {
            return Err(QuantError::InvalidConfig(format!(
                "{} centroid values for k={k}, dim={dim}",
                centroids.len()
            )));
        }
        if let Some(index) = centroids.iter().position(|v| !v.is_finite()) {
            return Err(QuantError::NonFiniteValue { index });
        }
        Ok(Self {
            k,
            dim,
            centroids,
            trained_inertia: 0.0,
            seed: 0,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn centroids(&self) -> &[f32] {
        &self.centroids
    }

    pub fn centroid(&self, i: usize) -> &[f32] {
        &self.centroids[i * self.dim..(i + 1) * self.dim]
    }

    /// Nearest centroid and its squared distance; ties go to the lowest index.
    pub fn nearest(&self, x: &[f32]) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for (j, c) in self.centroids.chunks_exact(self.dim).enumerate() {
            let d = sq_dist(x, c);
            if d < best.1 {
                best = (j, d);
            }
        }
        best
    }

    fn check_dim(&self, features: &FeatureMatrix) -> Result<()> {
        if features.dim() != self.dim {
            return Err(QuantError::DimMismatch {
                features: features.dim(),
                codebook: self.dim,
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(CODEBOOK_HEADER_LEN + 4 * self.centroids.len());
        b.extend_from_slice(CODEBOOK_MAGIC);
        b.extend_from_slice(&CODEBOOK_VERSION.to_le_bytes());
        b.extend_from_slice(&(self.k as u32).to_le_bytes());
        b.extend_from_slice(&(self.dim as u32).to_le_bytes());
        b.extend_from_slice(&self.seed.to_le_bytes());
        b.extend_from_slice(&self.trained_inertia.to_le_bytes());
        for v in &self.centroids {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b
    }

    pub fn from_bytes(bytes: &[u8], path: &str) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != CODEBOOK_MAGIC {
            return Err(CorpusError::BadMagic { path: path.into() }.into());
        }
        if bytes.len() < CODEBOOK_HEADER_LEN {
            return Err(CorpusError::TruncatedFile {
                path: path.into(),
                expected: CODEBOOK_HEADER_LEN,
                found: bytes.len(),
            }
            .into());
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let version = word(4);
        if version != CODEBOOK_VERSION {
            return Err(CorpusError::UnknownVersion {
                path: path.into(),
                version,
            }
            .into());
        }
        let k = word(8) as usize;
        let dim = word(12) as usize;
        if k == 0 || dim == 0 {
            return Err(CorpusError::DimZero {
                path: path.into(),
                n_frames: k,
                dim,
            }
            .into());
        }
        let seed = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
        let trained_inertia = f64::from_le_bytes(bytes[24..32].try_into().unwrap());
        let expected = CODEBOOK_HEADER_LEN + 4 * k * dim;
        if bytes.len() < expected {
            return Err(CorpusError::TruncatedFile {
                path: path.into(),
                expected,
                found: bytes.len(),
            }
            .into());
        }
        if bytes.len() > expected {
            return Err(CorpusError::TrailingBytes {
                path: path.into(),
                extra: bytes.len() - expected,
            }
            .into());
        }
        let centroids = bytes[CODEBOOK_HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mut cb = Self::new(k, dim, centroids)?;
        cb.seed = seed;
        cb.trained_inertia = trained_inertia;
        Ok(cb)
    }
}

pub fn read_codebook(path: &Path) -> Result<Codebook> {
    let bytes = std::fs::read(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Codebook::from_bytes(&bytes, &path.display().to_string())
}

pub fn write_codebook(path: &Path, cb: &Codebook) -> Result<()> {
    corpus::write_atomic(path, &cb.to_bytes())?;
    Ok(())
}

fn count_distinct_rows(data: &FeatureMatrix, stop_at: usize) -> usize {
    let mut seen: HashSet<Vec<u32>> = HashSet::new();
    for row in data.rows() {
        // +0.0 and -0.0 are the same point
        let key = row.iter().map(|v| (v + 0.0).to_bits()).collect();
        seen.insert(key);
        if seen.len() >= stop_at {
            break;
        }
    }
    seen.len()
}

fn check_trainable(data: &FeatureMatrix, k: usize) -> Result<()> {
    if data.n_frames() < k {
        return Err(QuantError::TooFewFrames {
            n_frames: data.n_frames(),
            k,
        });
    }
    if let Some(index) = data.data().iter().position(|v| !v.is_finite()) {
        return Err(QuantError::NonFiniteValue { index });
    }
    let distinct = count_distinct_rows(data, k);
    if distinct < k {
        return Err(QuantError::TooFewDistinctPoints { distinct, k });
    }
    Ok(())
}

/// k-means++ seeding: first centroid uniform, the rest by D² sampling.
pub fn kmeans_pp_init(data: &FeatureMatrix, k: usize, rng: &mut SplitMix64) -> Result<Codebook> {
    if k == 0 {
        return Err(QuantError::InvalidConfig("k must be >= 1".into()));
    }
    check_trainable(data, k)?;
    let n = data.n_frames();
    let dim = data.dim();
    let mut centroids = Vec::with_capacity(k * dim);
    let first = rng.below(n);
    centroids.extend_from_slice(data.row(first));
    let mut d2: Vec<f64> = data.rows().map(|r| sq_dist(r, data.row(first))).collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let target = rng.next_f64() * total;
        let mut acc = 0.0;
        let mut pick = None;
        for (i, &d) in d2.iter().enumerate() {
            if d <= 0.0 {
                continue;
            }
            acc += d;
            pick = Some(i);
            if acc > target {
                break;
            }
        }
        // at least k distinct rows guarantees some positive distance
        let pick = pick.expect("a frame with positive distance exists");
        let row = data.row(pick);
        centroids.extend_from_slice(row);
        for (i, r) in data.rows().enumerate() {
            let d = sq_dist(r, row);
            if d < d2[i] {
                d2[i] = d;
            }
        }
    }
    Codebook::new(k, dim, centroids)
}

/// Quantizes every frame to its nearest centroid.
pub fn assign(cb: &Codebook, features: &FeatureMatrix) -> Result<Vec<Unit>> {
    cb.check_dim(features)?;
    Ok(features.rows().map(|r| cb.nearest(r).0 as Unit).collect())
}

/// Sum over frames of the squared distance to the nearest centroid.
pub fn inertia(cb: &Codebook, data: &FeatureMatrix) -> Result<f64> {
    cb.check_dim(data)?;
    Ok(data.rows().map(|r| cb.nearest(r).1).sum())
}

struct Assignment {
    labels: Vec<usize>,
    dists: Vec<f64>,
    inertia: f64,
}

fn assign_all(cb: &Codebook, data: &FeatureMatrix) -> Assignment {
    let mut labels = Vec::with_capacity(data.n_frames());
    let mut dists = Vec::with_capacity(data.n_frames());
    let mut inertia = 0.0;
    for r in data.rows() {
        let (j, d) = cb.nearest(r);
        labels.push(j);
        dists.push(d);
        inertia += d;
    }
    Assignment {
        labels,
        dists,
        inertia,
    }
}

/// Recomputes centroids as cluster means. Empty clusters are reseeded to
/// the frame farthest from its current centroid (lowest index on ties);
/// a reseeded frame is not reused.
fn update_centroids(cb: &mut Codebook, data: &FeatureMatrix, a: &Assignment) {
    let dim = cb.dim;
    let mut sums = vec![0.0f64; cb.k * dim];
    let mut counts = vec![0usize; cb.k];
    for (r, &j) in data.rows().zip(&a.labels) {
        counts[j] += 1;
        for (s, &v) in sums[j * dim..(j + 1) * dim].iter_mut().zip(r) {
            *s += f64::from(v);
        }
    }
    let mut dists = a.dists.clone();
    for j in 0..cb.k {
        let c = &mut cb.centroids[j * dim..(j + 1) * dim];
        if counts[j] > 0 {
            let n = counts[j] as f64;
            for (cv, &s) in c.iter_mut().zip(&sums[j * dim..(j + 1) * dim]) {
                *cv = (s / n) as f32;
            }
        } else {
            let mut far = 0;
            for (i, &d) in dists.iter().enumerate() {
                if d > dists[far] {
                    far = i;
                }
            }
            c.copy_from_slice(data.row(far));
            dists[far] = f64::NEG_INFINITY;
        }
    }
}

fn lloyd(data: &FeatureMatrix, cfg: &KmeansConfig, mut cb: Codebook) -> (Codebook, FitStats) {
    let mut current = assign_all(&cb, data);
    let mut history = Vec::new();
    let mut converged = false;
    for _ in 0..cfg.max_iters {
        let prev = current.inertia;
        update_centroids(&mut cb, data, &current);
        let next = assign_all(&cb, data);
        history.push(next.inertia);
        let stable = next.labels == current.labels;
        current = next;
        if prev == 0.0 || stable || (prev - current.inertia) / prev < cfg.tol {
            converged = true;
            break;
        }
    }
    cb.trained_inertia = current.inertia;
    let stats = FitStats {
        iterations_run: history.len(),
        inertia_per_iter: history,
        converged,
    };
    (cb, stats)
}

/// Lloyd's algorithm from k-means++ seeds; with several restarts the run
/// with the lowest final inertia wins (earliest on ties).
pub fn kmeans_fit(data: &FeatureMatrix, cfg: &KmeansConfig) -> Result<(Codebook, FitStats)> {
    cfg.validate()?;
    check_trainable(data, cfg.k)?;
    let mut rng = SplitMix64::new(cfg.seed);
    let mut best: Option<(Codebook, FitStats)> = None;
    for _ in 0..cfg.restarts {
        let init = kmeans_pp_init(data, cfg.k, &mut rng)?;
        let (mut cb, stats) = lloyd(data, cfg, init);
        cb.seed = cfg.seed;
        let better = best
            .as_ref()
            .is_none_or(|(b, _)| cb.trained_inertia < b.trained_inertia);
        if better {
            best = Some((cb, stats));
        }
    }
    Ok(best.expect("restarts >= 1"))
}
