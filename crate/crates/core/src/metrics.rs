//! Corpus evaluation: UER over unit sequences, CER over transcripts and SDR
//! over aligned waveform pairs, plus a canonical JSON report.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

use crate::corpus::{self, CorpusError, UnitsFile, Utterance, Waveform};
use crate::units::{dedup, levenshtein, ErrorCounts, Unit};

/// SDR reported when the estimate matches the reference exactly.
pub const SDR_CAP_DB: f64 = 140.0;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("reference is empty")]
    EmptyReference,
    #[error("waveform lengths differ: reference {reference}, estimate {estimate}")]
    LengthMismatch { reference: usize, estimate: usize },
    #[error("sample rates differ: reference {reference} Hz, estimate {estimate} Hz")]
    SampleRateMismatch { reference: u32, estimate: u32 },
    #[error("reference waveform has zero energy")]
    SilentReference,
    #[error("reference and hypothesis share no utterance ids")]
    NoOverlappingIds,
    #[error("{path}: malformed report: {reason}")]
    MalformedReport { path: String, reason: String },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

impl MetricsError {
    /// Short code used for skipped utterances in reports.
    pub fn reason_code(&self) -> &'static str {
        match self {
            Self::EmptyReference => "empty_reference",
            Self::LengthMismatch { .. } => "length_mismatch",
            Self::SampleRateMismatch { .. } => "sample_rate_mismatch",
            Self::SilentReference => "silent_reference",
            Self::NoOverlappingIds => "no_overlapping_ids",
            Self::MalformedReport { .. } => "malformed_report",
            Self::Corpus(_) => "audio_unreadable",
        }
    }
}

pub type Result<T, E = MetricsError> = std::result::Result<T, E>;

fn nfc_chars(s: &str) -> Vec<char> {
    s.nfc().collect()
}

/// Character edit distance after NFC normalization, with the reference
/// length in characters.
pub fn char_edits(hyp: &str, reference: &str) -> Result<(usize, usize)> {
    let r = nfc_chars(reference);
    if r.is_empty() {
        return Err(MetricsError::EmptyReference);
    }
    Ok((levenshtein(&nfc_chars(hyp), &r), r.len()))
}

/// Character error rate in percent over NFC-normalized Unicode scalars.
pub fn cer(hyp: &str, reference: &str) -> Result<f64> {
    let (d, n) = char_edits(hyp, reference)?;
    Ok(100.0 * d as f64 / n as f64)
}

/// Signal-to-distortion ratio in dB for equal-length, equal-rate signals.
pub fn sdr(reference: &Waveform, estimate: &Waveform) -> Result<f64> {
    if reference.sample_rate != estimate.sample_rate {
        return Err(MetricsError::SampleRateMismatch {
            reference: reference.sample_rate,
            estimate: estimate.sample_rate,
        });
    }
    if reference.len() != estimate.len() {
        return Err(MetricsError::LengthMismatch {
            reference: reference.len(),
            estimate: estimate.len(),
        });
    }
    let mut signal = 0.0;
    let mut noise = 0.0;
    for (&r, &e) in reference.samples.iter().zip(&estimate.samples) {
        signal += r * r;
        noise += (r - e) * (r - e);
    }
    if signal == 0.0 {
        return Err(MetricsError::SilentReference);
    }
    if noise == 0.0 {
        return Ok(SDR_CAP_DB);
    }
    Ok(10.0 * (signal / noise).log10())
}

/// The fields one side of an evaluation may provide for an utterance.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalItem {
    pub units: Option<Vec<Unit>>,
    pub text: Option<String>,
    pub audio: Option<PathBuf>,
}

pub type EvalSet = BTreeMap<String, EvalItem>;

/// Collects units, text and audio from a manifest. Audio paths are
/// resolved relative to the manifest.
pub fn eval_set_from_manifest(utts: &[Utterance], manifest_path: &Path) -> EvalSet {
    utts.iter()
        .map(|u| {
            let item = EvalItem {
                units: u.units.clone(),
                text: u.text.clone(),
                audio: u
                    .audio_path
                    .as_ref()
                    .map(|p| corpus::resolve_path(manifest_path, p)),
            };
            (u.id.clone(), item)
        })
        .collect()
}

pub fn eval_set_from_units(file: &UnitsFile) -> EvalSet {
    file.rows
        .iter()
        .map(|(id, units)| {
            let item = EvalItem {
                units: Some(units.clone()),
                ..EvalItem::default()
            };
            (id.clone(), item)
        })
        .collect()
}

/// Which metrics to compute where both sides allow it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalOptions {
    pub uer: bool,
    pub cer: bool,
    pub sdr: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            uer: true,
            cer: true,
            sdr: true,
        }
    }
}

/// Scores for one utterance. Edit counts are kept so corpus rates can be
/// recomputed from the report alone.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtteranceScores {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub uer: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unit_edits: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hyp_len: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ref_len: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cer: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub char_edits: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ref_chars: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sdr_db: Option<f64>,
    /// Metrics that were attempted but failed, keyed by metric name.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub failures: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusScores {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub uer_micro: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cer_micro: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sdr_mean_db: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalCounts {
    pub total: usize,
    pub evaluated: usize,
    pub skipped: usize,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub skip_reasons: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub corpus: CorpusScores,
    pub counts: EvalCounts,
    pub per_utterance: BTreeMap<String, UtteranceScores>,
    /// Utterance id to skip reason code.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub skipped: BTreeMap<String, String>,
}

impl EvalReport {
    /// Corpus scores recomputed from the per-utterance entries.
    pub fn recompute_corpus(&self) -> CorpusScores {
        let mut units = ErrorCounts::default();
        let mut chars = ErrorCounts::default();
        let mut sdr_sum = 0.0;
        let mut sdr_n = 0usize;
        for s in self.per_utterance.values() {
            if let (Some(e), Some(n)) = (s.unit_edits, s.ref_len) {
                units.add(e, n);
            }
            if let (Some(e), Some(n)) = (s.char_edits, s.ref_chars) {
                chars.add(e, n);
            }
            if let Some(v) = s.sdr_db {
                sdr_sum += v;
                sdr_n += 1;
            }
        }
        CorpusScores {
            uer_micro: units.rate(),
            cer_micro: chars.rate(),
            sdr_mean_db: (sdr_n > 0).then(|| sdr_sum / sdr_n as f64),
        }
    }
}

fn score_pair(
    r: &EvalItem,
    h: &EvalItem,
    opts: EvalOptions,
) -> (UtteranceScores, Vec<&'static str>) {
    let mut s = UtteranceScores::default();
    let mut failed = Vec::new();
    let mut fail = |s: &mut UtteranceScores, metric: &str, e: MetricsError| {
        failed.push(e.reason_code());
        s.failures.insert(metric.into(), e.reason_code().into());
    };
    if let (true, Some(ru), Some(hu)) = (opts.uer, &r.units, &h.units) {
        let (ru, hu) = (dedup(ru), dedup(hu));
        if ru.is_empty() {
            fail(&mut s, "uer", MetricsError::EmptyReference);
        } else {
            let d = levenshtein(&hu, &ru);
            s.uer = Some(100.0 * d as f64 / ru.len() as f64);
            s.unit_edits = Some(d);
            s.hyp_len = Some(hu.len());
            s.ref_len = Some(ru.len());
        }
    }
    if let (true, Some(rt), Some(ht)) = (opts.cer, &r.text, &h.text) {
        match char_edits(ht, rt) {
            Ok((d, n)) => {
                s.cer = Some(100.0 * d as f64 / n as f64);
                s.char_edits = Some(d);
                s.ref_chars = Some(n);
            }
            Err(e) => fail(&mut s, "cer", e),
        }
    }
    if let (true, Some(ra), Some(ha)) = (opts.sdr, &r.audio, &h.audio) {
        let score = corpus::read_wav(ra)
            .and_then(|rw| Ok((rw, corpus::read_wav(ha)?)))
            .map_err(MetricsError::from)
            .and_then(|(rw, hw)| sdr(&rw, &hw));
        match score {
            Ok(v) => s.sdr_db = Some(v),
            Err(e) => fail(&mut s, "sdr", e),
        }
    }
    (s, failed)
}

/// Scores every utterance present on both sides. Ids present on only one
/// side, or with nothing comparable, are skipped with a reason code.
pub fn evaluate(refs: &EvalSet, hyps: &EvalSet, opts: EvalOptions) -> Result<EvalReport> {
    if !refs.keys().any(|id| hyps.contains_key(id)) {
        return Err(MetricsError::NoOverlappingIds);
    }
    let mut report = EvalReport::default();
    let mut ids: Vec<&String> = refs.keys().chain(hyps.keys()).collect();
    ids.sort();
    ids.dedup();
    for id in ids {
        let outcome = match (refs.get(id), hyps.get(id)) {
            (Some(_), None) => Err("missing_hypothesis"),
            (None, Some(_)) => Err("missing_reference"),
            (Some(r), Some(h)) => {
                let (scores, failed) = score_pair(r, h, opts);
                let any = scores.uer.is_some() || scores.cer.is_some() || scores.sdr_db.is_some();
                match (any, failed.first()) {
                    (true, _) => Ok(scores),
                    (false, Some(code)) => Err(*code),
                    (false, None) => Err("no_comparable_fields"),
                }
            }
            (None, None) => unreachable!("id came from one of the sets"),
        };
        match outcome {
            Ok(scores) => {
                report.per_utterance.insert(id.clone(), scores);
            }
            Err(code) => {
                report.skipped.insert(id.clone(), code.into());
                *report.counts.skip_reasons.entry(code.into()).or_default() += 1;
            }
        }
    }
    report.counts.evaluated = report.per_utterance.len();
    report.counts.skipped = report.skipped.len();
    report.counts.total = report.counts.evaluated + report.counts.skipped;
    report.corpus = report.recompute_corpus();
    Ok(report)
}

fn write_canonical(v: &Value, indent: usize, out: &mut String) {
    let pad = |n: usize| "  ".repeat(n);
    match v {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => match (n.as_u64(), n.as_i64()) {
            (Some(u), _) => write!(out, "{u}").unwrap(),
            (None, Some(i)) => write!(out, "{i}").unwrap(),
            _ => write!(out, "{:.6}", n.as_f64().unwrap_or(0.0)).unwrap(),
        },
        Value::String(s) => out.push_str(&serde_json::to_string(s).expect("string serializes")),
        Value::Array(items) => {
            if items.is_empty() {
                out.push_str("[]");
                return;
            }
            out.push_str("[\n");
            for (i, item) in items.iter().enumerate() {
                out.push_str(&pad(indent + 1));
                write_canonical(item, indent + 1, out);
                out.push_str(if i + 1 < items.len() { ",\n" } else { "\n" });
            }
            out.push_str(&pad(indent));
            out.push(']');
        }
        Value::Object(map) => {
            if map.is_empty() {
                out.push_str("{}");
                return;
            }
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push_str("{\n");
            for (i, k) in keys.iter().enumerate() {
                out.push_str(&pad(indent + 1));
                out.push_str(&serde_json::to_string(k).expect("key serializes"));
                out.push_str(": ");
                write_canonical(&map[*k], indent + 1, out);
                out.push_str(if i + 1 < keys.len() { ",\n" } else { "\n" });
            }
            out.push_str(&pad(indent));
            out.push('}');
        }
    }
}

/// Canonical JSON: sorted keys, two-space indent, reals with six decimals,
/// absent values omitted.
pub fn report_to_json(report: &EvalReport) -> String {
    let v = serde_json::to_value(report).expect("report serializes");
    let mut out = String::new();
    write_canonical(&v, 0, &mut out);
    out.push('\n');
    out
}

pub fn parse_report(text: &str, path: &str) -> Result<EvalReport> {
    serde_json::from_str(text).map_err(|e| MetricsError::MalformedReport {
        path: path.into(),
        reason: e.to_string(),
    })
}

pub fn write_report(path: &Path, report: &EvalReport) -> Result<()> {
    Ok(corpus::write_atomic(
        path,
        report_to_json(report).as_bytes(),
    )?)
}

pub fn read_report(path: &Path) -> Result<EvalReport> {
    let text = std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_report(&text, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;
    use proptest::prelude::*;

    fn wave(samples: Vec<f64>) -> Waveform {
        Waveform::new(16000, samples)
    }

    fn oracle_db(r: &[f64], e: &[f64]) -> f64 {
        let s: f64 = r.iter().map(|x| x * x).sum();
        let n: f64 = r.iter().zip(e).map(|(a, b)| (a - b) * (a - b)).sum();
        10.0 * (s / n).log10()
    }

    #[test]
    fn cer_examples() {
        assert_eq!(cer("abc", "abc").unwrap(), 0.0);
        assert!((cer("abd", "abc").unwrap() - 100.0 / 3.0).abs() < 1e-12);
        assert_eq!(cer("", "abc").unwrap(), 100.0);
        assert!(matches!(cer("abc", ""), Err(MetricsError::EmptyReference)));
        // precomposed vs combining acute accent
        assert_eq!(cer("caf\u{e9}", "cafe\u{301}").unwrap(), 0.0);
        assert_eq!(char_edits("音声", "音楽").unwrap(), (1, 2));
    }

    #[test]
    fn sdr_analytic_cases() {
        let mut rng = SplitMix64::new(3);
        let r: Vec<f64> = (0..800).map(|_| rng.uniform(-0.5, 0.5)).collect();
        assert_eq!(sdr(&wave(r.clone()), &wave(r.clone())).unwrap(), SDR_CAP_DB);
        let zeros = vec![0.0; r.len()];
        assert!(sdr(&wave(r.clone()), &wave(zeros)).unwrap().abs() < 1e-9);

        let noise: Vec<f64> = (0..800).map(|_| rng.normal()).collect();
        let es: f64 = r.iter().map(|x| x * x).sum();
        let ns: f64 = noise.iter().map(|x| x * x).sum();
        let c = (es / (100.0 * ns)).sqrt();
        let est: Vec<f64> = r.iter().zip(&noise).map(|(a, n)| a + c * n).collect();
        let got = sdr(&wave(r.clone()), &wave(est.clone())).unwrap();
        assert!((got - 20.0).abs() < 1e-9, "{got}");
        assert_eq!(got, oracle_db(&r, &est));
    }

    #[test]
    fn sdr_errors() {
        let a = wave(vec![0.1, 0.2]);
        assert!(matches!(
            sdr(&a, &wave(vec![0.1])),
            Err(MetricsError::LengthMismatch { .. })
        ));
        let b = Waveform::new(8000, vec![0.1, 0.2]);
        assert!(matches!(
            sdr(&a, &b),
            Err(MetricsError::SampleRateMismatch { .. })
        ));
        assert!(matches!(
            sdr(&wave(vec![0.0, 0.0]), &a),
            Err(MetricsError::SilentReference)
        ));
    }

    proptest! {
        #[test]
        fn cer_self_is_zero(s in "\\PC{1,30}") {
            prop_assert_eq!(cer(&s, &s).unwrap(), 0.0);
        }

        #[test]
        fn sdr_scale_invariant(
            pairs in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 4..64),
            c in prop_oneof![-8.0f64..-0.125, 0.125f64..8.0],
        ) {
            let r: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let e: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            prop_assume!(r.iter().any(|&x| x != 0.0) && r != e);
            let base = sdr(&wave(r.clone()), &wave(e.clone())).unwrap();
            let rs: Vec<f64> = r.iter().map(|x| x * c).collect();
            let es: Vec<f64> = e.iter().map(|x| x * c).collect();
            let scaled = sdr(&wave(rs), &wave(es)).unwrap();
            prop_assert!((base - scaled).abs() <= 1e-9, "{} vs {}", base, scaled);
        }
    }

    fn units_set(rows: &[(&str, Vec<u32>)]) -> EvalSet {
        rows.iter()
            .map(|(id, u)| {
                let item = EvalItem {
                    units: Some(u.clone()),
                    ..Default::default()
                };
                (id.to_string(), item)
            })
            .collect()
    }

    #[test]
    fn identical_sets_score_zero() {
        let s = units_set(&[("a", vec![1, 1, 2]), ("b", vec![3])]);
        let r = evaluate(&s, &s, EvalOptions::default()).unwrap();
        assert_eq!(r.corpus.uer_micro, Some(0.0));
        assert_eq!(r.counts.evaluated, 2);
        assert_eq!(r.counts.skipped, 0);
    }

    #[test]
    fn missing_hypothesis_is_skipped() {
        let refs = units_set(&[("a", vec![1]), ("b", vec![2])]);
        let hyps = units_set(&[("a", vec![1])]);
        let r = evaluate(&refs, &hyps, EvalOptions::default()).unwrap();
        assert_eq!(r.counts.skipped, 1);
        assert_eq!(r.skipped["b"], "missing_hypothesis");
        assert_eq!(r.counts.skip_reasons["missing_hypothesis"], 1);
        assert_eq!(r.counts.total, 2);
    }

    #[test]
    fn micro_average() {
        let refs = units_set(&[("a", vec![1, 2]), ("b", vec![4, 5, 6])]);
        let hyps = units_set(&[("a", vec![1, 3]), ("b", vec![4, 5, 6])]);
        let r = evaluate(&refs, &hyps, EvalOptions::default()).unwrap();
        assert_eq!(r.corpus.uer_micro, Some(20.0));
        assert_eq!(r.per_utterance["a"].uer, Some(50.0));
        assert_eq!(r.recompute_corpus(), r.corpus);
    }

    #[test]
    fn uer_uses_deduplicated_sequences() {
        let refs = units_set(&[("a", vec![1, 1, 1, 2])]);
        let hyps = units_set(&[("a", vec![1, 2, 2])]);
        let r = evaluate(&refs, &hyps, EvalOptions::default()).unwrap();
        assert_eq!(r.per_utterance["a"].uer, Some(0.0));
        assert_eq!(r.per_utterance["a"].ref_len, Some(2));
    }

    #[test]
    fn disjoint_ids_rejected() {
        let r = evaluate(
            &units_set(&[("a", vec![1])]),
            &units_set(&[("b", vec![1])]),
            EvalOptions::default(),
        );
        assert!(matches!(r, Err(MetricsError::NoOverlappingIds)));
    }

    #[test]
    fn empty_reference_units_skip() {
        let refs = units_set(&[("a", vec![]), ("b", vec![1])]);
        let r = evaluate(&refs, &refs, EvalOptions::default()).unwrap();
        assert_eq!(r.skipped["a"], "empty_reference");
        assert_eq!(r.counts.evaluated, 1);
    }

    #[test]
    fn text_and_audio_metrics() {
        let dir = tempfile::tempdir().unwrap();
        let ra = dir.path().join("r.wav");
        let ha = dir.path().join("h.wav");
        corpus::write_wav(&ra, &Waveform::new(16000, vec![0.5, -0.25, 0.125])).unwrap();
        corpus::write_wav(&ha, &Waveform::new(16000, vec![0.0; 3])).unwrap();
        let mk = |text: &str, audio: &Path| EvalItem {
            units: None,
            text: Some(text.into()),
            audio: Some(audio.into()),
        };
        let refs: EvalSet = [("u".to_string(), mk("abcd", &ra))].into();
        let hyps: EvalSet = [("u".to_string(), mk("abxd", &ha))].into();
        let r = evaluate(&refs, &hyps, EvalOptions::default()).unwrap();
        let s = &r.per_utterance["u"];
        assert_eq!(s.cer, Some(25.0));
        assert!(s.sdr_db.unwrap().abs() < 1e-12);
        assert!(s.uer.is_none());
        assert_eq!(r.corpus.cer_micro, Some(25.0));

        let missing: EvalSet = [("u".to_string(), mk("abcd", &dir.path().join("nope.wav")))].into();
        let r = evaluate(&refs, &missing, EvalOptions::default()).unwrap();
        assert_eq!(r.per_utterance["u"].failures["sdr"], "audio_unreadable");
    }

    #[test]
    fn report_is_canonical() {
        let refs = units_set(&[("b", vec![1, 2, 3]), ("a", vec![1, 2])]);
        let hyps = units_set(&[("a", vec![2]), ("b", vec![1, 2, 3])]);
        let r = evaluate(&refs, &hyps, EvalOptions::default()).unwrap();
        let text = report_to_json(&r);
        assert!(!text.contains("sdr"));
        assert!(!text.contains("null"));
        assert!(text.contains("\"uer_micro\": 20.000000"), "{text}");
        assert!(text.find("\"a\"").unwrap() < text.find("\"b\"").unwrap());

        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("1.json"), dir.path().join("2.json"));
        write_report(&p1, &r).unwrap();
        write_report(&p2, &r).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        let back = read_report(&p1).unwrap();
        assert_eq!(back, r);
        assert_eq!(report_to_json(&back), text);
    }
}
