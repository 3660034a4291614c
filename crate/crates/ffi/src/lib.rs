//! C ABI over `unitkit`.
//!
//! Objects cross the boundary as opaque handles created by `*_load`/`*_fit`
//! and released with the matching `*_free`. Every fallible call returns a
//! [`UkStatus`]; the message for the most recent failure on the calling
//! thread is available from [`uk_last_error_message`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;
use std::slice;

use unitkit::corpus::{CorpusError, FeatureMatrix, Waveform};
use unitkit::metrics::{self, MetricsError};
use unitkit::predictor::{self, PredictorError, Seq2SeqModel};
use unitkit::quantizer::{self, Codebook, KmeansConfig, QuantError};
use unitkit::units;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UkStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Data = 5,
    BufferTooSmall = 6,
    Panic = 7,
}

/// A trained k-means codebook.
pub struct UkCodebook {
    inner: Codebook,
}

/// A loaded text-to-unit predictor.
pub struct UkPredictor {
    inner: Seq2SeqModel<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl std::fmt::Display) {
    let s = CString::new(msg.to_string().replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = s);
}

struct Failure(UkStatus, String);

impl Failure {
    fn new(status: UkStatus, msg: impl std::fmt::Display) -> Self {
        Self(status, msg.to_string())
    }
}

impl From<CorpusError> for Failure {
    fn from(e: CorpusError) -> Self {
        let status = match e {
            CorpusError::Io { .. } => UkStatus::Io,
            CorpusError::BadMagic { .. }
            | CorpusError::UnknownVersion { .. }
            | CorpusError::TruncatedFile { .. }
            | CorpusError::TrailingBytes { .. }
            | CorpusError::UnsupportedFormat { .. } => UkStatus::Format,
            _ => UkStatus::Data,
        };
        Self::new(status, e)
    }
}

impl From<QuantError> for Failure {
    fn from(e: QuantError) -> Self {
        match e {
            QuantError::Format(c) => c.into(),
            QuantError::InvalidConfig(_) => Self::new(UkStatus::InvalidArgument, e),
            _ => Self::new(UkStatus::Data, e),
        }
    }
}

impl From<PredictorError> for Failure {
    fn from(e: PredictorError) -> Self {
        let status = match e {
            PredictorError::Io { .. } => UkStatus::Io,
            PredictorError::BadMagic { .. }
            | PredictorError::UnknownVersion { .. }
            | PredictorError::TruncatedFile { .. }
            | PredictorError::ShapeMismatchOnLoad { .. } => UkStatus::Format,
            PredictorError::InvalidConfig(_) => UkStatus::InvalidArgument,
            _ => UkStatus::Data,
        };
        Self::new(status, e)
    }
}

impl From<MetricsError> for Failure {
    fn from(e: MetricsError) -> Self {
        Self::new(UkStatus::Data, e)
    }
}

impl From<units::UnitsError> for Failure {
    fn from(e: units::UnitsError) -> Self {
        Self::new(UkStatus::Data, e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> UkStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => UkStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            UkStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure::new(UkStatus::NullPointer, format!("{what} is null"))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::new(UkStatus::InvalidArgument, "path is not UTF-8"))?;
    Ok(PathBuf::from(s))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

/// Copies `src` into `dst[..cap]` and stores the full length in `out_len`.
/// Fails with `BufferTooSmall` (length still reported) when it does not fit.
unsafe fn write_units(
    src: &[u32],
    dst: *mut u32,
    cap: usize,
    out_len: *mut usize,
) -> Result<(), Failure> {
    *out_arg(out_len, "out_len")? = src.len();
    if src.len() > cap {
        return Err(Failure::new(
            UkStatus::BufferTooSmall,
            format!("need room for {} units, got {cap}", src.len()),
        ));
    }
    if !src.is_empty() {
        if dst.is_null() {
            return Err(null("out_units"));
        }
        ptr::copy_nonoverlapping(src.as_ptr(), dst, src.len());
    }
    Ok(())
}

/// Message for the last failed call on this thread, or an empty string.
/// The pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn uk_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn uk_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Reads a codebook file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn uk_codebook_load(
    path: *const c_char,
    out: *mut *mut UkCodebook,
) -> UkStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let cb = quantizer::read_codebook(&path_arg(path)?)?;
        *out = Box::into_raw(Box::new(UkCodebook { inner: cb }));
        Ok(())
    })
}

/// Fits a codebook on `n_frames × dim` row-major features.
///
/// # Safety
/// `data` must hold `n_frames * dim` floats; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn uk_codebook_fit(
    data: *const f32,
    n_frames: usize,
    dim: usize,
    k: usize,
    max_iters: usize,
    seed: u64,
    out: *mut *mut UkCodebook,
) -> UkStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let len = n_frames
            .checked_mul(dim)
            .ok_or_else(|| Failure::new(UkStatus::InvalidArgument, "n_frames * dim overflows"))?;
        let m = FeatureMatrix::new(n_frames, dim, slice_arg(data, len, "data")?.to_vec())?;
        let cfg = KmeansConfig {
            k,
            max_iters,
            seed,
            ..KmeansConfig::default()
        };
        cfg.validate()?;
        let (cb, _) = quantizer::kmeans_fit(&m, &cfg)?;
        *out = Box::into_raw(Box::new(UkCodebook { inner: cb }));
        Ok(())
    })
}

/// Writes the codebook to `path`.
///
/// # Safety
/// `cb` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn uk_codebook_save(cb: *const UkCodebook, path: *const c_char) -> UkStatus {
    guard(|| {
        let cb = cb.as_ref().ok_or_else(|| null("codebook"))?;
        quantizer::write_codebook(&path_arg(path)?, &cb.inner)?;
        Ok(())
    })
}

/// Number of centroids, or 0 for a null handle.
///
/// # Safety
/// `cb` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn uk_codebook_k(cb: *const UkCodebook) -> usize {
    cb.as_ref().map_or(0, |c| c.inner.k())
}

/// Feature dimension, or 0 for a null handle.
///
/// # Safety
/// `cb` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn uk_codebook_dim(cb: *const UkCodebook) -> usize {
    cb.as_ref().map_or(0, |c| c.inner.dim())
}

/// Nearest-centroid unit for each of `n_frames` rows; writes `n_frames`
/// values to `out_units`.
///
/// # Safety
/// `cb` must be a live handle, `data` must hold `n_frames * dim` floats and
/// `out_units` must have room for `n_frames` values.
#[no_mangle]
pub unsafe extern "C" fn uk_codebook_assign(
    cb: *const UkCodebook,
    data: *const f32,
    n_frames: usize,
    dim: usize,
    out_units: *mut u32,
) -> UkStatus {
    guard(|| {
        let cb = cb.as_ref().ok_or_else(|| null("codebook"))?;
        let len = n_frames
            .checked_mul(dim)
            .ok_or_else(|| Failure::new(UkStatus::InvalidArgument, "n_frames * dim overflows"))?;
        let m = FeatureMatrix::new(n_frames, dim, slice_arg(data, len, "data")?.to_vec())?;
        let units = quantizer::assign(&cb.inner, &m)?;
        if out_units.is_null() {
            return Err(null("out_units"));
        }
        ptr::copy_nonoverlapping(units.as_ptr(), out_units, units.len());
        Ok(())
    })
}

/// Releases a codebook. Null is ignored.
///
/// # Safety
/// `cb` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn uk_codebook_free(cb: *mut UkCodebook) {
    if !cb.is_null() {
        drop(Box::from_raw(cb));
    }
}

/// Loads a predictor checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn uk_predictor_load(
    path: *const c_char,
    out: *mut *mut UkPredictor,
) -> UkStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let m = predictor::load_checkpoint(&path_arg(path)?)?;
        *out = Box::into_raw(Box::new(UkPredictor { inner: m }));
        Ok(())
    })
}

/// Codebook size the predictor was trained for, or 0 for a null handle.
///
/// # Safety
/// `p` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn uk_predictor_num_units(p: *const UkPredictor) -> usize {
    p.as_ref().map_or(0, |p| p.inner.config().k())
}

/// Greedy-decodes `text_len` bytes of UTF-8 text into deduplicated units.
/// `max_len` of 0 means the model's own target limit. The unit count is
/// always stored in `out_len`; if it exceeds `cap` nothing is copied and
/// `BufferTooSmall` is returned.
///
/// # Safety
/// `p` must be a live handle, `text` must hold `text_len` bytes,
/// `out_units` must have room for `cap` values and `out_len` be writable.
#[no_mangle]
pub unsafe extern "C" fn uk_predictor_predict(
    p: *const UkPredictor,
    text: *const u8,
    text_len: usize,
    max_len: usize,
    out_units: *mut u32,
    cap: usize,
    out_len: *mut usize,
) -> UkStatus {
    guard(|| {
        let p = p.as_ref().ok_or_else(|| null("predictor"))?;
        let bytes = slice_arg(text, text_len, "text")?;
        let c = p.inner.config();
        let src = predictor::byte_tokenize(bytes, c.max_src_len)?;
        let limit = if max_len == 0 { c.max_tgt_len } else { max_len };
        let units = predictor::greedy_decode(&p.inner, &src, limit)?;
        write_units(&units, out_units, cap, out_len)
    })
}

/// Releases a predictor. Null is ignored.
///
/// # Safety
/// `p` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn uk_predictor_free(p: *mut UkPredictor) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Edit distance between two unit sequences.
///
/// # Safety
/// `a` and `b` must hold `a_len` and `b_len` values (either may be null
/// when its length is 0).
#[no_mangle]
pub unsafe extern "C" fn uk_levenshtein(
    a: *const u32,
    a_len: usize,
    b: *const u32,
    b_len: usize,
    out: *mut usize,
) -> UkStatus {
    guard(|| {
        let d = units::levenshtein(slice_arg(a, a_len, "a")?, slice_arg(b, b_len, "b")?);
        *out_arg(out, "out")? = d;
        Ok(())
    })
}

/// Unit error rate in percent.
///
/// # Safety
/// As [`uk_levenshtein`]; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn uk_uer(
    hyp: *const u32,
    hyp_len: usize,
    reference: *const u32,
    ref_len: usize,
    out: *mut f64,
) -> UkStatus {
    guard(|| {
        let v = units::uer(
            slice_arg(hyp, hyp_len, "hyp")?,
            slice_arg(reference, ref_len, "reference")?,
        )?;
        *out_arg(out, "out")? = v;
        Ok(())
    })
}

/// Removes adjacent repeats; `out_units` needs room for `len` values and
/// `out_len` receives the new length.
///
/// # Safety
/// `units_in` must hold `len` values, `out_units` room for `len`.
#[no_mangle]
pub unsafe extern "C" fn uk_dedup(
    units_in: *const u32,
    len: usize,
    out_units: *mut u32,
    out_len: *mut usize,
) -> UkStatus {
    guard(|| {
        let d = units::dedup(slice_arg(units_in, len, "units")?);
        write_units(&d, out_units, len, out_len)
    })
}

/// Signal-to-distortion ratio in dB of `estimate` against `reference`,
/// both `len` samples at the same rate.
///
/// # Safety
/// Both buffers must hold `len` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn uk_sdr(
    reference: *const f64,
    estimate: *const f64,
    len: usize,
    out: *mut f64,
) -> UkStatus {
    guard(|| {
        let r = Waveform::new(1, slice_arg(reference, len, "reference")?.to_vec());
        let e = Waveform::new(1, slice_arg(estimate, len, "estimate")?.to_vec());
        *out_arg(out, "out")? = metrics::sdr(&r, &e)?;
        Ok(())
    })
}
