//! C interface to sifu checkpoints.
//!
//! Every function returns a [`SifuStatus`]; on failure a description is
//! available from [`sifu_last_error`] on the same thread until the next call.
//! Models are opaque handles owned by the caller and released with
//! [`sifu_model_free`]. Strings returned through out-parameters are released
//! with [`sifu_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use sifu_core::checkpoint::{load_checkpoint, Checkpoint};
use sifu_core::corpus::windows;
use sifu_core::generate::{generate, Decoding, GenerateOptions, PredictionCache};
use sifu_core::train::evaluate;
use sifu_core::Error;

/// Result of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SifuStatus {
    Ok = 0,
    /// A required pointer was null.
    NullPointer = 1,
    /// An argument was out of range or not valid UTF-8.
    InvalidArgument = 2,
    /// The file could not be read.
    Io = 3,
    /// The file is not a valid checkpoint (bad magic, version, checksum or layout).
    Checkpoint = 4,
    /// Input text or token ids do not fit the model.
    Data = 5,
    /// The caller's buffer is too small.
    BufferTooSmall = 6,
    /// An internal error; the handle should be considered unusable.
    Internal = 7,
}

/// Opaque model handle.
pub struct SifuModel {
    inner: Checkpoint,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).unwrap_or_default());
}

struct Failure(SifuStatus, String);

impl From<Error> for Failure {
    fn from(err: Error) -> Self {
        let status = match err {
            Error::Io(_) => SifuStatus::Io,
            Error::BadMagic(_)
            | Error::Version { .. }
            | Error::Checksum { .. }
            | Error::Truncated(_)
            | Error::Format(_)
            | Error::Vocab(_) => SifuStatus::Checkpoint,
            Error::Config(_) | Error::Temperature(_) => SifuStatus::InvalidArgument,
            Error::StaleRecord { .. } | Error::Shape(_) | Error::Diverged { .. } => SifuStatus::Internal,
            _ => SifuStatus::Data,
        };
        Failure(status, err.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SifuStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            SifuStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            SifuStatus::Internal
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(SifuStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Failure(SifuStatus::InvalidArgument, format!("{what} is not valid UTF-8")))
}

unsafe fn model_arg<'a>(p: *const SifuModel) -> Result<&'a Checkpoint, Failure> {
    p.as_ref().map(|m| &m.inner).ok_or_else(|| null("model"))
}

/// Message for the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn sifu_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sifu_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint file into a new handle written to `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sifu_model_load(path: *const c_char, out: *mut *mut SifuModel) -> SifuStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let path = str_arg(path, "path")?;
        let inner = load_checkpoint(Path::new(path)).map_err(|e| {
            let Failure(status, msg) = e.into();
            Failure(status, format!("{path}: {msg}"))
        })?;
        *out = Box::into_raw(Box::new(SifuModel { inner }));
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must come from [`sifu_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sifu_model_free(model: *mut SifuModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Vocabulary size, node dimension and maximum training sequence length.
///
/// # Safety
/// `model` must be a live handle; each out pointer may be null to skip it.
#[no_mangle]
pub unsafe extern "C" fn sifu_model_shape(
    model: *const SifuModel,
    vocab_size: *mut usize,
    node_dim: *mut usize,
    max_seq_len: *mut usize,
) -> SifuStatus {
    guard(|| {
        let c = model_arg(model)?.model.config();
        for (p, v) in [(vocab_size, c.vocab_size), (node_dim, c.node_dim), (max_seq_len, c.max_seq_len)] {
            if let Some(p) = p.as_mut() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// Total trainable parameter count.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sifu_model_param_count(model: *const SifuModel, out: *mut u64) -> SifuStatus {
    guard(|| {
        let m = model_arg(model)?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = m.model.count_params().total();
        Ok(())
    })
}

/// Encodes `text` into token ids. Writes the id count to `*len` and, when it
/// fits in `capacity`, the ids to `ids`; otherwise returns `BufferTooSmall`.
///
/// # Safety
/// `text` must be NUL-terminated; `ids` must hold `capacity` elements (may be
/// null when `capacity` is 0); `len` must be valid.
#[no_mangle]
pub unsafe extern "C" fn sifu_encode(
    model: *const SifuModel,
    text: *const c_char,
    ids: *mut u32,
    capacity: usize,
    len: *mut usize,
) -> SifuStatus {
    guard(|| {
        let m = model_arg(model)?;
        let text = str_arg(text, "text")?;
        let len = len.as_mut().ok_or_else(|| null("len"))?;
        let encoded = m.vocab.encode(text);
        *len = encoded.len();
        copy_out(&encoded, ids, capacity)
    })
}

unsafe fn copy_out<T: Copy>(src: &[T], dst: *mut T, capacity: usize) -> Result<(), Failure> {
    if src.len() > capacity {
        return Err(Failure(SifuStatus::BufferTooSmall, format!("need room for {} values, got {capacity}", src.len())));
    }
    if !src.is_empty() {
        if dst.is_null() {
            return Err(null("output buffer"));
        }
        ptr::copy_nonoverlapping(src.as_ptr(), dst, src.len());
    }
    Ok(())
}

/// Energy of every candidate next token after the context `ids[0..len]`.
/// `energies` must hold the vocabulary size.
///
/// # Safety
/// `ids` must hold `len` elements and `energies` `capacity` elements.
#[no_mangle]
pub unsafe extern "C" fn sifu_candidate_energies(
    model: *const SifuModel,
    ids: *const u32,
    len: usize,
    energies: *mut f32,
    capacity: usize,
) -> SifuStatus {
    guard(|| {
        let m = &model_arg(model)?.model;
        if len == 0 {
            return Err(Failure(SifuStatus::InvalidArgument, "context is empty".into()));
        }
        if ids.is_null() {
            return Err(null("ids"));
        }
        let context = std::slice::from_raw_parts(ids, len);
        let mut cache = PredictionCache::new(m);
        for &id in context {
            cache.push(m, id)?;
        }
        copy_out(&cache.energies(), energies, capacity)
    })
}

/// Continues `prompt` by up to `max_new` tokens and writes the full text
/// (prompt included) to `*out`, to be released with [`sifu_string_free`].
/// A `temperature` of 0 decodes greedily; positive values sample with `seed`.
///
/// # Safety
/// `prompt` must be NUL-terminated and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sifu_generate(
    model: *const SifuModel,
    prompt: *const c_char,
    max_new: usize,
    temperature: f64,
    seed: u64,
    out: *mut *mut c_char,
) -> SifuStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let ck = model_arg(model)?;
        let prompt = str_arg(prompt, "prompt")?;
        let decoding = if temperature == 0.0 { Decoding::Greedy } else { Decoding::Sample { temperature, seed } };
        let ids = ck.vocab.encode(prompt);
        let options = GenerateOptions { decoding, trace: false, ..GenerateOptions::default() };
        let (tokens, _) = generate(&ck.model, &ids, max_new, options)?;
        let text = format!("{prompt}{}", ck.vocab.decode(&tokens[ids.len()..])?);
        *out =
            CString::new(text).map_err(|_| Failure(SifuStatus::Data, "generated text contains NUL".into()))?.into_raw();
        Ok(())
    })
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sifu_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Perplexity of `text`, cut into windows of the model's sequence length.
///
/// # Safety
/// `text` must be NUL-terminated and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sifu_eval_perplexity(
    model: *const SifuModel,
    text: *const c_char,
    out: *mut f64,
) -> SifuStatus {
    guard(|| {
        let ck = model_arg(model)?;
        let text = str_arg(text, "text")?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let ids = ck.vocab.encode(text);
        let max = ck.model.config().max_seq_len;
        let data: Vec<Vec<u32>> = windows(&ids, max, max).map(<[u32]>::to_vec).collect();
        *out = evaluate(&ck.model, &data)?.ppl;
        Ok(())
    })
}
