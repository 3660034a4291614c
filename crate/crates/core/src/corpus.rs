//! On-disk formats: feature matrices, PCM16 WAV, JSON-lines manifests and
//! TSV unit files.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::units::Run;

pub const FEATURE_MAGIC: &[u8; 4] = b"FEAT";
pub const FEATURE_VERSION: u32 = 1;
const FEATURE_HEADER_LEN: usize = 16;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: bad magic bytes")]
    BadMagic { path: String },
    #[error("{path}: unknown format version {version}")]
    UnknownVersion { path: String, version: u32 },
    #[error("{path}: truncated file (expected {expected} bytes, found {found})")]
    TruncatedFile {
        path: String,
        expected: usize,
        found: usize,
    },
    #[error("{path}: {extra} trailing bytes after payload")]
    TrailingBytes { path: String, extra: usize },
    #[error("{path}: non-finite value at index {index}")]
    NonFiniteValue { path: String, index: usize },
    #[error("{path}: zero dimension (frames={n_frames}, dim={dim})")]
    DimZero {
        path: String,
        n_frames: usize,
        dim: usize,
    },
    #[error("{path}: unsupported audio format: {reason}")]
    UnsupportedFormat { path: String, reason: String },
    #[error("{path}: waveform has no samples")]
    EmptyWaveform { path: String },
    #[error("{path}:{line}: duplicate id {id:?}")]
    DuplicateId {
        path: String,
        line: usize,
        id: String,
    },
    #[error("{path}:{line}: missing \"id\" field")]
    MissingId { path: String, line: usize },
    #[error("{path}:{line}: malformed line: {reason}")]
    MalformedLine {
        path: String,
        line: usize,
        reason: String,
    },
    #[error("{path}:{line}: negative unit {value}")]
    NegativeUnit {
        path: String,
        line: usize,
        value: i64,
    },
    #[error("cannot write empty unit sequence for {id:?}")]
    EmptyUnits { id: String },
    #[error("invalid id {id:?}: ids must be non-empty and free of tabs and newlines")]
    InvalidId { id: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = CorpusError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(io_err(path))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(io_err(path))
}

/// Frame-major matrix of SSL features for one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    n_frames: usize,
    dim: usize,
    data: Vec<f32>,
}

impl FeatureMatrix {
    /// Builds a matrix, checking the shape and that every value is finite.
    pub fn new(n_frames: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        Self::validate(n_frames, dim, &data, "<memory>")?;
        Ok(Self {
            n_frames,
            dim,
            data,
        })
    }

    /// Stacks rows of equal width.
    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self> {
        let dim = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            let r = r.as_ref();
            if r.len() != dim {
                return Err(CorpusError::MalformedLine {
                    path: "<memory>".into(),
                    line: 0,
                    reason: format!("row width {} differs from {}", r.len(), dim),
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), dim, data)
    }

    fn validate(n_frames: usize, dim: usize, data: &[f32], path: &str) -> Result<()> {
        if n_frames == 0 || dim == 0 {
            return Err(CorpusError::DimZero {
                path: path.into(),
                n_frames,
                dim,
            });
        }
        if data.len() != n_frames * dim {
            return Err(CorpusError::TruncatedFile {
                path: path.into(),
                expected: n_frames * dim,
                found: data.len(),
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(CorpusError::NonFiniteValue {
                path: path.into(),
                index,
            });
        }
        Ok(())
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f32]> + '_ {
        self.data.chunks_exact(self.dim)
    }

    /// Concatenates frames from several matrices of the same width.
    pub fn concat<'a, I>(parts: I) -> Option<Self>
    where
        I: IntoIterator<Item = &'a FeatureMatrix>,
    {
        let mut it = parts.into_iter();
        let first = it.next()?;
        let mut out = first.clone();
        for m in it {
            if m.dim != out.dim {
                return None;
            }
            out.data.extend_from_slice(&m.data);
            out.n_frames += m.n_frames;
        }
        Some(out)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(FEATURE_HEADER_LEN + 4 * self.data.len());
        buf.extend_from_slice(FEATURE_MAGIC);
        buf.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.n_frames as u32).to_le_bytes());
        buf.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8], path: &str) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != FEATURE_MAGIC {
            return Err(CorpusError::BadMagic { path: path.into() });
        }
        if bytes.len() < FEATURE_HEADER_LEN {
            return Err(CorpusError::TruncatedFile {
                path: path.into(),
                expected: FEATURE_HEADER_LEN,
                found: bytes.len(),
            });
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let version = word(4);
        if version != FEATURE_VERSION {
            return Err(CorpusError::UnknownVersion {
                path: path.into(),
                version,
            });
        }
        let n_frames = word(8) as usize;
        let dim = word(12) as usize;
        if n_frames == 0 || dim == 0 {
            return Err(CorpusError::DimZero {
                path: path.into(),
                n_frames,
                dim,
            });
        }
        let expected = n_frames
            .checked_mul(dim)
            .and_then(|n| n.checked_mul(4))
            .and_then(|n| n.checked_add(FEATURE_HEADER_LEN))
            .unwrap_or(usize::MAX);
        if bytes.len() < expected {
            return Err(CorpusError::TruncatedFile {
                path: path.into(),
                expected,
                found: bytes.len(),
            });
        }
        if bytes.len() > expected {
            return Err(CorpusError::TrailingBytes {
                path: path.into(),
                extra: bytes.len() - expected,
            });
        }
        let data: Vec<f32> = bytes[FEATURE_HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::validate(n_frames, dim, &data, path)?;
        Ok(Self {
            n_frames,
            dim,
            data,
        })
    }
}

pub fn read_feature_file(path: &Path) -> Result<FeatureMatrix> {
    let bytes = read_bytes(path)?;
    FeatureMatrix::from_bytes(&bytes, &path.display().to_string())
}

pub fn write_feature_file(path: &Path, m: &FeatureMatrix) -> Result<()> {
    // Matrices built through the public constructors are already valid, but
    // re-checking keeps a hand-mutated clone from reaching disk.
    FeatureMatrix::validate(m.n_frames, m.dim, &m.data, &path.display().to_string())?;
    write_bytes(path, &m.to_bytes())
}

/// Mono waveform with samples in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub sample_rate: u32,
    pub samples: Vec<f64>,
}

impl Waveform {
    pub fn new(sample_rate: u32, samples: Vec<f64>) -> Self {
        Self {
            sample_rate,
            samples,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

fn wav_unsupported(path: &str, reason: impl Into<String>) -> CorpusError {
    CorpusError::UnsupportedFormat {
        path: path.into(),
        reason: reason.into(),
    }
}

/// Decodes a RIFF/WAVE PCM16 mono file held in memory.
pub fn decode_wav(bytes: &[u8], path: &str) -> Result<Waveform> {
    let truncated = |expected: usize| CorpusError::TruncatedFile {
        path: path.into(),
        expected,
        found: bytes.len(),
    };
    if bytes.len() < 12 {
        return Err(truncated(12));
    }
    if &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(wav_unsupported(path, "not a RIFF/WAVE file"));
    }
    let mut pos = 12;
    let mut fmt: Option<(u16, u16, u32, u16)> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        let body = pos + 8;
        let end = body
            .checked_add(size)
            .ok_or_else(|| truncated(usize::MAX))?;
        match id {
            b"fmt " => {
                if size < 16 || end > bytes.len() {
                    return Err(truncated(end.max(body + 16)));
                }
                let u16_at = |i: usize| u16::from_le_bytes(bytes[i..i + 2].try_into().unwrap());
                let format = u16_at(body);
                let channels = u16_at(body + 2);
                let rate = u32::from_le_bytes(bytes[body + 4..body + 8].try_into().unwrap());
                let bits = u16_at(body + 14);
                fmt = Some((format, channels, rate, bits));
            }
            b"data" => {
                let (format, channels, rate, bits) =
                    fmt.ok_or_else(|| wav_unsupported(path, "data chunk before fmt chunk"))?;
                if format != 1 {
                    return Err(wav_unsupported(
                        path,
                        format!("format tag {format} is not PCM"),
                    ));
                }
                if channels != 1 {
                    return Err(wav_unsupported(
                        path,
                        format!("{channels} channels, expected mono"),
                    ));
                }
                if bits != 16 {
                    return Err(wav_unsupported(
                        path,
                        format!("{bits}-bit samples, expected 16"),
                    ));
                }
                if rate == 0 {
                    return Err(wav_unsupported(path, "sample rate 0"));
                }
                if end > bytes.len() || !size.is_multiple_of(2) {
                    return Err(truncated(end));
                }
                if size == 0 {
                    return Err(CorpusError::EmptyWaveform { path: path.into() });
                }
                let samples = bytes[body..end]
                    .chunks_exact(2)
                    .map(|c| f64::from(i16::from_le_bytes([c[0], c[1]])) / 32768.0)
                    .collect();
                return Ok(Waveform::new(rate, samples));
            }
            _ => {}
        }
        // chunks are word aligned
        pos = end + (size & 1);
    }
    if fmt.is_none() {
        Err(wav_unsupported(path, "missing fmt chunk"))
    } else {
        Err(truncated(pos + 8))
    }
}

pub fn read_wav(path: &Path) -> Result<Waveform> {
    let bytes = read_bytes(path)?;
    decode_wav(&bytes, &path.display().to_string())
}

/// Encodes as PCM16 mono; samples are clamped to `[-1, 32767/32768]`.
pub fn encode_wav(w: &Waveform) -> Vec<u8> {
    let data_len = 2 * w.samples.len();
    let mut b = Vec::with_capacity(44 + data_len);
    b.extend_from_slice(b"RIFF");
    b.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    b.extend_from_slice(b"WAVEfmt ");
    b.extend_from_slice(&16u32.to_le_bytes());
    b.extend_from_slice(&1u16.to_le_bytes());
    b.extend_from_slice(&1u16.to_le_bytes());
    b.extend_from_slice(&w.sample_rate.to_le_bytes());
    b.extend_from_slice(&(w.sample_rate * 2).to_le_bytes());
    b.extend_from_slice(&2u16.to_le_bytes());
    b.extend_from_slice(&16u16.to_le_bytes());
    b.extend_from_slice(b"data");
    b.extend_from_slice(&(data_len as u32).to_le_bytes());
    for &s in &w.samples {
        let q = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        b.extend_from_slice(&q.to_le_bytes());
    }
    b
}

pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    write_bytes(path, &encode_wav(w))
}

/// One manifest entry.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audio_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub units: Option<Vec<u32>>,
}

impl Utterance {
    pub fn with_text(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            text: Some(text.into()),
            feature_path: None,
            audio_path: None,
            units: None,
        }
    }

    fn has_payload(&self) -> bool {
        self.text.is_some()
            || self.feature_path.is_some()
            || self.audio_path.is_some()
            || self.units.is_some()
    }
}

pub fn valid_id(id: &str) -> bool {
    !id.is_empty() && !id.contains(['\t', '\n', '\r'])
}

/// Parses JSON-lines manifest text. Line numbers in errors are 1-based.
pub fn parse_manifest(text: &str, path: &str) -> Result<Vec<Utterance>> {
    let malformed = |line: usize, reason: String| CorpusError::MalformedLine {
        path: path.into(),
        line,
        reason,
    };
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    let body = text.strip_suffix('\n').unwrap_or(text);
    if body.is_empty() {
        return Ok(out);
    }
    for (i, raw) in body.split('\n').enumerate() {
        let line = i + 1;
        let raw = raw.strip_suffix('\r').unwrap_or(raw);
        let value: serde_json::Value =
            serde_json::from_str(raw).map_err(|e| malformed(line, e.to_string()))?;
        let obj = value
            .as_object()
            .ok_or_else(|| malformed(line, "expected a JSON object".into()))?;
        if !obj.contains_key("id") {
            return Err(CorpusError::MissingId {
                path: path.into(),
                line,
            });
        }
        let utt: Utterance =
            serde_json::from_value(value).map_err(|e| malformed(line, e.to_string()))?;
        if !valid_id(&utt.id) {
            return Err(malformed(line, format!("invalid id {:?}", utt.id)));
        }
        if !utt.has_payload() {
            return Err(malformed(
                line,
                "one of text, feature_path, audio_path or units is required".into(),
            ));
        }
        if !seen.insert(utt.id.clone()) {
            return Err(CorpusError::DuplicateId {
                path: path.into(),
                line,
                id: utt.id,
            });
        }
        out.push(utt);
    }
    Ok(out)
}

pub fn read_manifest(path: &Path) -> Result<Vec<Utterance>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_manifest(&text, &path.display().to_string())
}

pub fn write_manifest(path: &Path, utts: &[Utterance]) -> Result<()> {
    let mut out = Vec::new();
    for u in utts {
        if !valid_id(&u.id) {
            return Err(CorpusError::InvalidId { id: u.id.clone() });
        }
        serde_json::to_writer(&mut out, u).expect("utterance serializes");
        out.push(b'\n');
    }
    write_bytes(path, &out)
}

/// Resolves a manifest-relative path against the manifest's directory.
pub fn resolve_path(manifest: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest.parent().unwrap_or(Path::new("")).join(p)
    }
}

/// Rows of a units file. `empty_ids` lists rows whose unit list was empty.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct UnitsFile {
    pub rows: Vec<(String, Vec<u32>)>,
    pub empty_ids: Vec<String>,
}

impl UnitsFile {
    pub fn get(&self, id: &str) -> Option<&[u32]> {
        self.rows
            .iter()
            .find(|(k, _)| k == id)
            .map(|(_, v)| v.as_slice())
    }
}

fn parse_unit(tok: &str, path: &str, line: usize) -> Result<u32> {
    tok.parse::<u32>().map_err(|_| match tok.parse::<i64>() {
        Ok(v) if v < 0 => CorpusError::NegativeUnit {
            path: path.into(),
            line,
            value: v,
        },
        _ => CorpusError::MalformedLine {
            path: path.into(),
            line,
            reason: format!("bad unit token {tok:?}"),
        },
    })
}

fn split_tsv_lines<'a>(
    text: &'a str,
    path: &'a str,
) -> impl Iterator<Item = Result<(usize, &'a str, &'a str)>> + 'a {
    let body = text.strip_suffix('\n').unwrap_or(text);
    body.split('\n')
        .enumerate()
        .filter(move |_| !body.is_empty())
        .map(move |(i, raw)| {
            let line = i + 1;
            let (id, rest) = raw
                .split_once('\t')
                .ok_or_else(|| CorpusError::MalformedLine {
                    path: path.into(),
                    line,
                    reason: "missing tab separator".into(),
                })?;
            if !valid_id(id) {
                return Err(CorpusError::MalformedLine {
                    path: path.into(),
                    line,
                    reason: format!("invalid id {id:?}"),
                });
            }
            Ok((line, id, rest))
        })
}

pub fn parse_units(text: &str, path: &str) -> Result<UnitsFile> {
    let mut out = UnitsFile::default();
    let mut seen = HashSet::new();
    for item in split_tsv_lines(text, path) {
        let (line, id, rest) = item?;
        let units = rest
            .split(' ')
            .filter(|t| !t.is_empty())
            .map(|t| parse_unit(t, path, line))
            .collect::<Result<Vec<_>>>()?;
        if !seen.insert(id.to_string()) {
            return Err(CorpusError::DuplicateId {
                path: path.into(),
                line,
                id: id.into(),
            });
        }
        if units.is_empty() {
            out.empty_ids.push(id.to_string());
        }
        out.rows.push((id.to_string(), units));
    }
    Ok(out)
}

pub fn read_units_file(path: &Path) -> Result<UnitsFile> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_units(&text, &path.display().to_string())
}

pub fn format_units<S: AsRef<str>, U: AsRef<[u32]>>(rows: &[(S, U)]) -> Result<String> {
    format_rows(rows, false)
}

fn format_rows<S: AsRef<str>, U: AsRef<[u32]>>(
    rows: &[(S, U)],
    allow_empty: bool,
) -> Result<String> {
    let mut out = String::new();
    for (id, units) in rows {
        let (id, units) = (id.as_ref(), units.as_ref());
        if !valid_id(id) {
            return Err(CorpusError::InvalidId { id: id.into() });
        }
        if units.is_empty() && !allow_empty {
            return Err(CorpusError::EmptyUnits { id: id.into() });
        }
        out.push_str(id);
        out.push('\t');
        let toks: Vec<String> = units.iter().map(u32::to_string).collect();
        out.push_str(&toks.join(" "));
        out.push('\n');
    }
    Ok(out)
}

pub fn write_units_file<S: AsRef<str>, U: AsRef<[u32]>>(
    path: &Path,
    rows: &[(S, U)],
) -> Result<()> {
    let text = format_units(rows)?;
    write_bytes(path, text.as_bytes())
}

/// Like [`write_units_file`] but keeps empty rows as `id<TAB>`, which
/// readers report in [`UnitsFile::empty_ids`]. Used for model output, where
/// an empty prediction is a result rather than a mistake.
pub fn write_predictions_file<S: AsRef<str>, U: AsRef<[u32]>>(
    path: &Path,
    rows: &[(S, U)],
) -> Result<()> {
    let text = format_rows(rows, true)?;
    write_bytes(path, text.as_bytes())
}

/// Parses `id<TAB>u1:c1 u2:c2 ...` rows.
pub fn parse_durations(text: &str, path: &str) -> Result<Vec<(String, Vec<Run>)>> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for item in split_tsv_lines(text, path) {
        let (line, id, rest) = item?;
        let mut runs = Vec::new();
        for tok in rest.split(' ').filter(|t| !t.is_empty()) {
            let (u, c) = tok
                .split_once(':')
                .ok_or_else(|| CorpusError::MalformedLine {
                    path: path.into(),
                    line,
                    reason: format!("expected unit:count, got {tok:?}"),
                })?;
            let unit = parse_unit(u, path, line)?;
            let count = c.parse::<u32>().ok().filter(|&c| c > 0).ok_or_else(|| {
                CorpusError::MalformedLine {
                    path: path.into(),
                    line,
                    reason: format!("bad run count {c:?}"),
                }
            })?;
            runs.push(Run { unit, count });
        }
        if !seen.insert(id.to_string()) {
            return Err(CorpusError::DuplicateId {
                path: path.into(),
                line,
                id: id.into(),
            });
        }
        out.push((id.to_string(), runs));
    }
    Ok(out)
}

pub fn read_durations_file(path: &Path) -> Result<Vec<(String, Vec<Run>)>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_durations(&text, &path.display().to_string())
}

pub fn format_durations<S: AsRef<str>>(rows: &[(S, Vec<Run>)]) -> Result<String> {
    let mut out = String::new();
    for (id, runs) in rows {
        let id = id.as_ref();
        if !valid_id(id) {
            return Err(CorpusError::InvalidId { id: id.into() });
        }
        if runs.is_empty() {
            return Err(CorpusError::EmptyUnits { id: id.into() });
        }
        let toks: Vec<String> = runs
            .iter()
            .map(|r| format!("{}:{}", r.unit, r.count))
            .collect();
        out.push_str(id);
        out.push('\t');
        out.push_str(&toks.join(" "));
        out.push('\n');
    }
    Ok(out)
}

pub fn write_durations_file<S: AsRef<str>>(path: &Path, rows: &[(S, Vec<Run>)]) -> Result<()> {
    let text = format_durations(rows)?;
    write_bytes(path, text.as_bytes())
}

/// Writes `bytes` through a temp file in the same directory, then renames.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("partial");
    let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
    f.write_all(bytes).map_err(io_err(&tmp))?;
    f.sync_all().map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn feat_bytes(n: u32, d: u32, vals: &[f32]) -> Vec<u8> {
        let mut b = b"FEAT".to_vec();
        for w in [1, n, d] {
            b.extend_from_slice(&w.to_le_bytes());
        }
        for v in vals {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b
    }

    #[test]
    fn decodes_hand_built_feature_file() {
        let m = FeatureMatrix::from_bytes(&feat_bytes(1, 2, &[0.5, -0.5]), "x").unwrap();
        assert_eq!((m.n_frames(), m.dim()), (1, 2));
        assert_eq!(m.data(), &[0.5, -0.5]);
    }

    #[test]
    fn feature_file_errors() {
        let mut b = feat_bytes(1, 2, &[0.5, -0.5]);
        b[..4].copy_from_slice(b"FEET");
        assert!(matches!(
            FeatureMatrix::from_bytes(&b, "x"),
            Err(CorpusError::BadMagic { .. })
        ));

        let b = feat_bytes(3, 1, &[1.0, 2.0]);
        assert!(matches!(
            FeatureMatrix::from_bytes(&b, "x"),
            Err(CorpusError::TruncatedFile { .. })
        ));

        let b = feat_bytes(1, 1, &[1.0, 2.0]);
        assert!(matches!(
            FeatureMatrix::from_bytes(&b, "x"),
            Err(CorpusError::TrailingBytes { .. })
        ));

        let b = feat_bytes(0, 4, &[]);
        assert!(matches!(
            FeatureMatrix::from_bytes(&b, "x"),
            Err(CorpusError::DimZero { .. })
        ));

        let b = feat_bytes(1, 2, &[1.0, f32::INFINITY]);
        assert!(matches!(
            FeatureMatrix::from_bytes(&b, "x"),
            Err(CorpusError::NonFiniteValue { index: 1, .. })
        ));

        let mut b = feat_bytes(1, 1, &[1.0]);
        b[4] = 2;
        assert!(matches!(
            FeatureMatrix::from_bytes(&b, "x"),
            Err(CorpusError::UnknownVersion { version: 2, .. })
        ));
    }

    #[test]
    fn nan_rejected_before_write() {
        let dir = tempfile::tempdir().unwrap();
        let m = FeatureMatrix {
            n_frames: 1,
            dim: 2,
            data: vec![0.0, f32::NAN],
        };
        let err = write_feature_file(&dir.path().join("a.feat"), &m).unwrap_err();
        assert!(matches!(err, CorpusError::NonFiniteValue { .. }));
        assert!(FeatureMatrix::new(1, 1, vec![f32::NAN]).is_err());
    }

    #[test]
    fn minimal_feature_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.feat");
        let m = FeatureMatrix::new(1, 1, vec![0.0]).unwrap();
        write_feature_file(&p, &m).unwrap();
        assert_eq!(read_feature_file(&p).unwrap(), m);
    }

    fn wav_bytes(channels: u16, bits: u16, format: u16, data: &[u8]) -> Vec<u8> {
        let mut b = b"RIFF".to_vec();
        b.extend_from_slice(&(36 + data.len() as u32).to_le_bytes());
        b.extend_from_slice(b"WAVEfmt ");
        b.extend_from_slice(&16u32.to_le_bytes());
        b.extend_from_slice(&format.to_le_bytes());
        b.extend_from_slice(&channels.to_le_bytes());
        b.extend_from_slice(&16000u32.to_le_bytes());
        b.extend_from_slice(&(16000u32 * u32::from(channels * bits / 8)).to_le_bytes());
        b.extend_from_slice(&(channels * bits / 8).to_le_bytes());
        b.extend_from_slice(&bits.to_le_bytes());
        b.extend_from_slice(b"data");
        b.extend_from_slice(&(data.len() as u32).to_le_bytes());
        b.extend_from_slice(data);
        b
    }

    #[test]
    fn wav_scaling() {
        let mut data = Vec::new();
        for s in [0i16, 16384, -32768] {
            data.extend_from_slice(&s.to_le_bytes());
        }
        let w = decode_wav(&wav_bytes(1, 16, 1, &data), "x").unwrap();
        assert_eq!(w.sample_rate, 16000);
        assert_eq!(w.samples, vec![0.0, 0.5, -1.0]);
    }

    #[test]
    fn wav_rejections() {
        let data = [0u8; 8];
        for (ch, bits, fmt) in [(2, 16, 1), (1, 8, 1), (1, 24, 1), (1, 16, 3)] {
            let r = decode_wav(&wav_bytes(ch, bits, fmt, &data), "x");
            assert!(
                matches!(r, Err(CorpusError::UnsupportedFormat { .. })),
                "{ch} {bits} {fmt}"
            );
        }
        let mut b = wav_bytes(1, 16, 1, &data);
        b.truncate(b.len() - 2);
        assert!(matches!(
            decode_wav(&b, "x"),
            Err(CorpusError::TruncatedFile { .. })
        ));
        assert!(matches!(
            decode_wav(b"RIFF", "x"),
            Err(CorpusError::TruncatedFile { .. })
        ));
    }

    #[test]
    fn wav_skips_unknown_chunks() {
        let mut w = Waveform::new(8000, vec![0.25, -0.25]);
        let mut b = encode_wav(&w);
        // splice an odd-sized LIST chunk before fmt
        let list = [b"LIST".as_slice(), &3u32.to_le_bytes(), b"abc\0"].concat();
        b.splice(12..12, list);
        let got = decode_wav(&b, "x").unwrap();
        w.samples = vec![0.25, -0.25];
        assert_eq!(got, w);
    }

    #[test]
    fn manifest_parsing() {
        let text = "{\"id\":\"u1\",\"text\":\"a\"}\n{\"id\":\"u2\",\"units\":[1,2]}\n";
        let utts = parse_manifest(text, "m").unwrap();
        assert_eq!(utts.len(), 2);
        assert_eq!(utts[0].id, "u1");
        assert_eq!(utts[1].units.as_deref(), Some(&[1, 2][..]));

        let dup = "{\"id\":\"u1\",\"text\":\"a\"}\n{\"id\":\"u1\",\"text\":\"b\"}\n";
        assert!(matches!(
            parse_manifest(dup, "m"),
            Err(CorpusError::DuplicateId { line: 2, .. })
        ));

        let missing = "{\"id\":\"u1\",\"text\":\"a\"}\n{\"text\":\"b\"}\n";
        assert!(matches!(
            parse_manifest(missing, "m"),
            Err(CorpusError::MissingId { line: 2, .. })
        ));

        let bad = "{\"id\":\"u1\",\"text\":\"a\"}\nnot json\n";
        assert!(matches!(
            parse_manifest(bad, "m"),
            Err(CorpusError::MalformedLine { line: 2, .. })
        ));

        let empty_payload = "{\"id\":\"u1\"}\n";
        assert!(matches!(
            parse_manifest(empty_payload, "m"),
            Err(CorpusError::MalformedLine { line: 1, .. })
        ));

        let tab_id = "{\"id\":\"a\\tb\",\"text\":\"x\"}\n";
        assert!(parse_manifest(tab_id, "m").is_err());
    }

    #[test]
    fn units_file_cases() {
        let f = parse_units("a\t5 5 2\n", "u").unwrap();
        assert_eq!(f.rows, vec![("a".to_string(), vec![5, 5, 2])]);
        assert!(f.empty_ids.is_empty());

        assert!(matches!(
            parse_units("a\t5 -1\n", "u"),
            Err(CorpusError::NegativeUnit {
                value: -1,
                line: 1,
                ..
            })
        ));
        assert!(matches!(
            parse_units("a 5\n", "u"),
            Err(CorpusError::MalformedLine { .. })
        ));
        assert!(matches!(
            parse_units("a\tx\n", "u"),
            Err(CorpusError::MalformedLine { .. })
        ));

        let f = parse_units("a\t\n", "u").unwrap();
        assert_eq!(f.empty_ids, vec!["a".to_string()]);

        let text = format_units(&[("x", vec![0u32, 499])]).unwrap();
        assert_eq!(text, "x\t0 499\n");
        assert_eq!(
            parse_units(&text, "u").unwrap().rows,
            vec![("x".to_string(), vec![0, 499])]
        );

        assert!(matches!(
            format_units(&[("x", Vec::<u32>::new())]),
            Err(CorpusError::EmptyUnits { .. })
        ));
    }

    #[test]
    fn duration_rows() {
        let rows = parse_durations("id\t7:3 2:1\n", "d").unwrap();
        assert_eq!(
            rows[0].1,
            vec![Run { unit: 7, count: 3 }, Run { unit: 2, count: 1 }]
        );
        assert_eq!(format_durations(&rows).unwrap(), "id\t7:3 2:1\n");
        assert!(parse_durations("id\t7:0\n", "d").is_err());
        assert!(parse_durations("id\t7\n", "d").is_err());
    }
}
