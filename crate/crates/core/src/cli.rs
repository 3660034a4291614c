//! Pipeline stages behind the `unitkit` command line. Stages talk to each
//! other only through files, so each one can be rerun on its own.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{self, CorpusError, FeatureMatrix, Utterance};
use crate::metrics::{self, EvalOptions, EvalReport, EvalSet, MetricsError};
use crate::nn::GradCheckReport;
use crate::predictor::{
    self, byte_tokenize, greedy_decode, model_grad_check, GradCheckSetup, LossCurve, ModelConfig,
    PredictorError, Seq2SeqModel, TrainConfig,
};
use crate::quantizer::{self, Codebook, FitStats, KmeansConfig, QuantError};
use crate::units::{dedup, rle_encode, Unit};

/// Largest relative gradient error `grad-check` accepts.
pub const GRAD_CHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{path}: {reason}")]
    ConfigFile { path: String, reason: String },
    #[error("utterance {id:?}: {source}")]
    Utterance {
        id: String,
        #[source]
        source: Box<CliError>,
    },
    #[error("utterance {id:?} has no {field}")]
    MissingField { id: String, field: &'static str },
    #[error("utterance {id:?} has no counterpart in {other}")]
    MissingPair { id: String, other: String },
    #[error("utterance {id:?} has feature dim {dim}, expected {expected}")]
    InconsistentDim {
        id: String,
        dim: usize,
        expected: usize,
    },
    #[error("empty dataset: no utterances with {0}")]
    EmptyDataset(&'static str),
    #[error(
        "gradient check failed: max relative error {max_rel_error:.3e} exceeds {tolerance:.0e}"
    )]
    GradCheckFailed { max_rel_error: f64, tolerance: f64 },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Predictor(#[from] PredictorError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

impl CliError {
    fn for_utterance(self, id: &str) -> Self {
        Self::Utterance {
            id: id.into(),
            source: Box::new(self),
        }
    }

    /// 1 for usage or config problems, 2 for data errors, 3 for a failed
    /// gradient check.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::ConfigFile { .. } => 1,
            Self::GradCheckFailed { .. } => 3,
            Self::Utterance { source, .. } => source.exit_code(),
            _ => 2,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

fn in_utt<E: Into<CliError>>(id: &str) -> impl FnOnce(E) -> CliError + '_ {
    move |e| e.into().for_utterance(id)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Directory for default output names.
    pub workdir: PathBuf,
    /// Named manifests, e.g. `features` and `text`.
    pub manifests: BTreeMap<String, PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            workdir: PathBuf::from("."),
            manifests: BTreeMap::new(),
        }
    }
}

/// The whole experiment in one strict JSON file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub kmeans: KmeansConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub paths: PathsConfig,
}

impl PipelineConfig {
    /// Parses and validates a config file. Relative paths inside it are
    /// taken relative to the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::ConfigFile {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        let mut cfg: Self = serde_json::from_str(&text).map_err(|e| CliError::ConfigFile {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.paths.workdir = base.join(&cfg.paths.workdir);
        for p in cfg.paths.manifests.values_mut() {
            *p = base.join(&*p);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.kmeans
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        self.model
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        self.train
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        if self.model.unit_vocab != self.kmeans.k + 3 {
            return Err(CliError::Config(format!(
                "model.unit_vocab {} must be kmeans.k + 3 = {}",
                self.model.unit_vocab,
                self.kmeans.k + 3
            )));
        }
        Ok(())
    }

    /// Replaces every seed with `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.kmeans.seed = seed;
        self.model.seed = seed;
        self.train.shuffle_seed = seed;
        self
    }

    pub fn manifest(&self, name: &str) -> Option<&Path> {
        self.paths.manifests.get(name).map(PathBuf::as_path)
    }

    /// `name` inside the work directory, which is created if needed.
    pub fn output(&self, name: &str) -> Result<PathBuf> {
        fs::create_dir_all(&self.paths.workdir).map_err(|source| CliError::Io {
            path: self.paths.workdir.display().to_string(),
            source,
        })?;
        Ok(self.paths.workdir.join(name))
    }
}

/// Where fit statistics go for a codebook written to `codebook`.
pub fn stats_path(codebook: &Path) -> PathBuf {
    codebook.with_extension("stats.json")
}

/// Where the training log goes for a checkpoint written to `checkpoint`.
pub fn loss_log_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("loss.jsonl")
}

fn feature_utts(utts: &[Utterance]) -> Result<Vec<(&str, &Path)>> {
    if utts.iter().all(|u| u.feature_path.is_none()) {
        return Err(CliError::EmptyDataset("feature_path"));
    }
    utts.iter()
        .map(|u| match &u.feature_path {
            Some(p) => Ok((u.id.as_str(), p.as_path())),
            None => Err(CliError::MissingField {
                id: u.id.clone(),
                field: "feature_path",
            }),
        })
        .collect()
}

fn utt_text(u: &Utterance) -> Result<&str> {
    u.text.as_deref().ok_or_else(|| CliError::MissingField {
        id: u.id.clone(),
        field: "text",
    })
}

/// Fits a codebook on the frames of every utterance in the manifest and
/// writes it to `out`, with fit statistics beside it.
pub fn quantize_train(
    cfg: &PipelineConfig,
    manifest: &Path,
    out: &Path,
) -> Result<(Codebook, FitStats)> {
    let utts = corpus::read_manifest(manifest)?;
    let mut parts = Vec::new();
    for (id, path) in feature_utts(&utts)? {
        let m =
            corpus::read_feature_file(&corpus::resolve_path(manifest, path)).map_err(in_utt(id))?;
        if let Some(first) = parts.first().map(FeatureMatrix::dim) {
            if m.dim() != first {
                return Err(CliError::InconsistentDim {
                    id: id.into(),
                    dim: m.dim(),
                    expected: first,
                });
            }
        }
        parts.push(m);
    }
    let data = FeatureMatrix::concat(&parts).ok_or(CliError::EmptyDataset("feature_path"))?;
    let (codebook, stats) = quantizer::kmeans_fit(&data, &cfg.kmeans)?;
    quantizer::write_codebook(out, &codebook)?;
    let mut json = serde_json::to_string_pretty(&stats).expect("fit stats serialize");
    json.push('\n');
    corpus::write_atomic(&stats_path(out), json.as_bytes())?;
    Ok((codebook, stats))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EncodeMode {
    /// One unit per frame.
    #[default]
    Frames,
    /// Adjacent repeats removed.
    Dedup,
    /// `unit:count` runs.
    Durations,
}

/// Quantizes every utterance and writes one row per utterance. Returns the
/// frame-level sequences regardless of `mode`.
pub fn encode(
    codebook: &Path,
    manifest: &Path,
    mode: EncodeMode,
    out: &Path,
) -> Result<Vec<(String, Vec<Unit>)>> {
    let cb = quantizer::read_codebook(codebook)?;
    let utts = corpus::read_manifest(manifest)?;
    let mut rows = Vec::with_capacity(utts.len());
    for (id, path) in feature_utts(&utts)? {
        let m =
            corpus::read_feature_file(&corpus::resolve_path(manifest, path)).map_err(in_utt(id))?;
        let units = quantizer::assign(&cb, &m).map_err(in_utt(id))?;
        rows.push((id.to_string(), units));
    }
    match mode {
        EncodeMode::Frames => corpus::write_units_file(out, &rows)?,
        EncodeMode::Dedup => {
            let d: Vec<(&str, Vec<Unit>)> =
                rows.iter().map(|(id, u)| (id.as_str(), dedup(u))).collect();
            corpus::write_units_file(out, &d)?
        }
        EncodeMode::Durations => {
            let d: Vec<(&str, _)> = rows
                .iter()
                .map(|(id, u)| (id.as_str(), rle_encode(u)))
                .collect();
            corpus::write_durations_file(out, &d)?
        }
    }
    Ok(rows)
}

/// Pairs manifest texts with unit rows by id. Every text needs units and
/// every unit row needs a text; the first offender in file order is named.
pub fn pair_texts_units(
    utts: &[Utterance],
    units: &corpus::UnitsFile,
    units_name: &str,
    manifest_name: &str,
) -> Result<Vec<(String, String, Vec<Unit>)>> {
    let by_id: HashMap<&str, &[Unit]> = units
        .rows
        .iter()
        .map(|(id, u)| (id.as_str(), u.as_slice()))
        .collect();
    let mut pairs = Vec::with_capacity(utts.len());
    for u in utts {
        let text = utt_text(u)?;
        let seq = by_id
            .get(u.id.as_str())
            .ok_or_else(|| CliError::MissingPair {
                id: u.id.clone(),
                other: units_name.into(),
            })?;
        if seq.is_empty() {
            return Err(CorpusError::EmptyUnits { id: u.id.clone() }.into());
        }
        pairs.push((u.id.clone(), text.to_string(), seq.to_vec()));
    }
    let known: HashSet<&str> = utts.iter().map(|u| u.id.as_str()).collect();
    if let Some((id, _)) = units
        .rows
        .iter()
        .find(|(id, _)| !known.contains(id.as_str()))
    {
        return Err(CliError::MissingPair {
            id: id.clone(),
            other: manifest_name.into(),
        });
    }
    Ok(pairs)
}

/// Trains a fresh predictor on text/unit pairs, writing the checkpoint to
/// `out` and the JSON-lines training log beside it. `progress` sees every
/// log line.
pub fn predictor_train(
    cfg: &PipelineConfig,
    manifest: &Path,
    units: &Path,
    out: &Path,
    mut progress: impl FnMut(&predictor::StepLog),
) -> Result<LossCurve> {
    let utts = corpus::read_manifest(manifest)?;
    let unit_rows = corpus::read_units_file(units)?;
    let pairs = pair_texts_units(
        &utts,
        &unit_rows,
        &units.display().to_string(),
        &manifest.display().to_string(),
    )?;
    let mut model = Seq2SeqModel::new(cfg.model.clone())?;
    let data = predictor::prepare_dataset(&model, &pairs)?;
    let mut log = String::new();
    let curve = predictor::train(&mut model, &data, &cfg.train, |s| {
        log.push_str(&s.to_json_line());
        progress(s);
    })?;
    predictor::save_checkpoint(&model, out)?;
    corpus::write_atomic(&loss_log_path(out), log.as_bytes())?;
    Ok(curve)
}

/// Predicted units per utterance, plus the ids whose prediction was empty.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Predictions {
    pub rows: Vec<(String, Vec<Unit>)>,
    pub empty_ids: Vec<String>,
}

/// Greedy-decodes each manifest text. Empty predictions are kept as empty
/// rows and listed in `empty_ids`.
pub fn predict(
    checkpoint: &Path,
    manifest: &Path,
    max_len: Option<usize>,
    out: &Path,
) -> Result<Predictions> {
    let model = predictor::load_checkpoint(checkpoint)?;
    let utts = corpus::read_manifest(manifest)?;
    let max_len = max_len.unwrap_or(model.config().max_tgt_len);
    let mut rows = Vec::with_capacity(utts.len());
    let mut empty_ids = Vec::new();
    for u in &utts {
        let text = utt_text(u)?;
        let src =
            byte_tokenize(text.as_bytes(), model.config().max_src_len).map_err(in_utt(&u.id))?;
        let units = greedy_decode(&model, &src, max_len).map_err(in_utt(&u.id))?;
        if units.is_empty() {
            empty_ids.push(u.id.clone());
        }
        rows.push((u.id.clone(), units));
    }
    corpus::write_predictions_file(out, &rows)?;
    Ok(Predictions { rows, empty_ids })
}

/// One side of an evaluation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EvalSource {
    Units(PathBuf),
    Manifest(PathBuf),
}

impl EvalSource {
    pub fn load(&self) -> Result<EvalSet> {
        Ok(match self {
            Self::Units(p) => metrics::eval_set_from_units(&corpus::read_units_file(p)?),
            Self::Manifest(p) => metrics::eval_set_from_manifest(&corpus::read_manifest(p)?, p),
        })
    }
}

/// Scores `hyp` against `reference` and writes the canonical report.
pub fn evaluate(reference: &EvalSource, hyp: &EvalSource, out: &Path) -> Result<EvalReport> {
    let report = metrics::evaluate(&reference.load()?, &hyp.load()?, EvalOptions::default())?;
    metrics::write_report(out, &report)?;
    Ok(report)
}

/// Gradient check of the micro model; fails above [`GRAD_CHECK_TOLERANCE`].
/// `corrupt_backward` deliberately breaks the analytic gradient.
pub fn grad_check(seed: Option<u64>, corrupt_backward: bool) -> Result<GradCheckReport> {
    let mut setup = GradCheckSetup::default();
    if let Some(s) = seed {
        setup.config.seed = s;
    }
    let report = model_grad_check(&setup, corrupt_backward)?;
    if report.max_rel_error.is_nan() || report.max_rel_error > GRAD_CHECK_TOLERANCE {
        return Err(CliError::GradCheckFailed {
            max_rel_error: report.max_rel_error,
            tolerance: GRAD_CHECK_TOLERANCE,
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_rejects_unknown_keys_and_mismatched_vocab() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, r#"{"kmeans": {"k": 4, "seeed": 1}}"#).unwrap();
        let e = PipelineConfig::load(&p).unwrap_err();
        assert_eq!(e.exit_code(), 1);
        assert!(e.to_string().contains("seeed"), "{e}");

        fs::write(&p, r#"{"kmeans": {"k": 4}}"#).unwrap();
        let e = PipelineConfig::load(&p).unwrap_err();
        assert!(e.to_string().contains("unit_vocab"), "{e}");

        fs::write(
            &p,
            r#"{"kmeans": {"k": 4}, "model": {"unit_vocab": 7}, "paths": {"workdir": "w"}}"#,
        )
        .unwrap();
        let c = PipelineConfig::load(&p).unwrap();
        assert_eq!(c.paths.workdir, dir.path().join("w"));
        let c = c.with_seed(9);
        assert_eq!(
            (c.kmeans.seed, c.model.seed, c.train.shuffle_seed),
            (9, 9, 9)
        );
    }

    #[test]
    fn default_config_is_consistent() {
        PipelineConfig::default().validate().unwrap();
    }

    #[test]
    fn pairing_names_first_offender() {
        let utts = vec![
            Utterance::with_text("a", "x"),
            Utterance::with_text("b", "y"),
        ];
        let units = corpus::parse_units("a\t1 2\nc\t3\n", "u").unwrap();
        match pair_texts_units(&utts, &units, "u.tsv", "m.jsonl") {
            Err(CliError::MissingPair { id, other }) => {
                assert_eq!((id.as_str(), other.as_str()), ("b", "u.tsv"))
            }
            other => panic!("{other:?}"),
        }
        let units = corpus::parse_units("a\t1 2\nb\t3\nc\t3\n", "u").unwrap();
        match pair_texts_units(&utts, &units, "u.tsv", "m.jsonl") {
            Err(CliError::MissingPair { id, other }) => {
                assert_eq!((id.as_str(), other.as_str()), ("c", "m.jsonl"))
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn exit_codes() {
        let e = CliError::MissingField {
            id: "a".into(),
            field: "text",
        };
        assert_eq!(e.exit_code(), 2);
        assert_eq!(
            CliError::Config("x".into()).for_utterance("a").exit_code(),
            1
        );
        let g = CliError::GradCheckFailed {
            max_rel_error: 1.0,
            tolerance: 1e-4,
        };
        assert_eq!(g.exit_code(), 3);
    }
}
