//! C ABI for the regeneration lab: opaque checkpoint handles, status
//! codes, and a thread-local last-error message. All strings are UTF-8,
//! NUL-terminated; strings returned by this library must be released with
//! [`rsr_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::Path;
use std::ptr;

use rsr_core::metrics::{lexical_profile, LexicalConfig};
use rsr_core::model::checkpoint::load_checkpoint;
use rsr_core::model::{generate, perplexity, Checkpoint, Sampler};
use rsr_core::regeneration::{generate_perturbed, PerturbationConfig};

/// Status codes returned by every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RsrStatus {
    Ok = 0,
    /// A pointer argument was null or a string was not valid UTF-8.
    InvalidArgument = 1,
    /// Checkpoint file missing, corrupt, or version-mismatched.
    CheckpointError = 2,
    /// Bad perturbation/sampler configuration.
    ConfigError = 3,
    /// Model or metric evaluation failed.
    ModelError = 4,
}

/// Opaque handle to a loaded checkpoint.
pub struct RsrCheckpoint {
    inner: Checkpoint,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let sanitized = msg.replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(sanitized).unwrap());
}

/// Copies the last error message of the current thread into `buf`
/// (truncating to `len - 1` bytes) and returns the full message length.
/// Safe to call with a null buffer to query the length.
#[no_mangle]
pub unsafe extern "C" fn rsr_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes_with_nul();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr() as *const c_char, buf, n);
            *buf.add(n) = 0;
        }
        bytes.len() - 1
    })
}

unsafe fn cstr<'a>(ptr: *const c_char) -> Option<&'a str> {
    if ptr.is_null() {
        return None;
    }
    CStr::from_ptr(ptr).to_str().ok()
}

/// Loads a checkpoint from a file. On success stores a handle in `out`;
/// release it with [`rsr_checkpoint_free`].
#[no_mangle]
pub unsafe extern "C" fn rsr_checkpoint_load(
    path: *const c_char,
    out: *mut *mut RsrCheckpoint,
) -> RsrStatus {
    let Some(path) = cstr(path) else {
        set_error("path is null or not UTF-8");
        return RsrStatus::InvalidArgument;
    };
    if out.is_null() {
        set_error("out pointer is null");
        return RsrStatus::InvalidArgument;
    }
    match load_checkpoint(Path::new(path)) {
        Ok(ckpt) => {
            *out = Box::into_raw(Box::new(RsrCheckpoint { inner: ckpt }));
            RsrStatus::Ok
        }
        Err(e) => {
            set_error(&e.to_string());
            RsrStatus::CheckpointError
        }
    }
}

#[no_mangle]
pub unsafe extern "C" fn rsr_checkpoint_free(ckpt: *mut RsrCheckpoint) {
    if !ckpt.is_null() {
        drop(Box::from_raw(ckpt));
    }
}

/// Vocabulary size of a loaded checkpoint; 0 on null handle.
#[no_mangle]
pub unsafe extern "C" fn rsr_vocab_size(ckpt: *const RsrCheckpoint) -> usize {
    ckpt.as_ref().map(|c| c.inner.vocab.len()).unwrap_or(0)
}

fn parse_perturbation(json: Option<&str>) -> Result<Option<PerturbationConfig>, String> {
    match json {
        None => Ok(None),
        Some(s) => serde_json::from_str(s)
            .map(Some)
            .map_err(|e| format!("bad perturbation json: {}", e)),
    }
}

/// Generates text. `temperature <= 0` means greedy decoding;
/// `perturb_json` may be null for clean generation. On success `out`
/// receives a heap string (free with [`rsr_string_free`]).
#[no_mangle]
pub unsafe extern "C" fn rsr_generate(
    ckpt: *const RsrCheckpoint,
    prompt: *const c_char,
    steps: usize,
    temperature: f64,
    seed: u64,
    perturb_json: *const c_char,
    out: *mut *mut c_char,
) -> RsrStatus {
    let Some(handle) = ckpt.as_ref() else {
        set_error("checkpoint handle is null");
        return RsrStatus::InvalidArgument;
    };
    let Some(prompt) = cstr(prompt) else {
        set_error("prompt is null or not UTF-8");
        return RsrStatus::InvalidArgument;
    };
    if out.is_null() {
        set_error("out pointer is null");
        return RsrStatus::InvalidArgument;
    }
    let sampler = if temperature > 0.0 {
        Sampler::Temperature {
            tau: temperature,
            seed,
        }
    } else {
        Sampler::Greedy
    };
    let pcfg = match parse_perturbation(cstr(perturb_json)) {
        Ok(p) => p,
        Err(e) => {
            set_error(&e);
            return RsrStatus::ConfigError;
        }
    };
    let model = &handle.inner;
    let seq = model.vocab.encode(prompt);
    let result = match pcfg {
        None => generate(model, &seq, steps, sampler),
        Some(cfg) => generate_perturbed(model, &seq, steps, sampler, &cfg).map(|(s, _)| s),
    };
    match result.and_then(|ids| model.vocab.decode(&ids)) {
        Ok(text) => {
            *out = CString::new(text.replace('\0', " ")).unwrap().into_raw();
            RsrStatus::Ok
        }
        Err(e) => {
            set_error(&e.to_string());
            RsrStatus::ModelError
        }
    }
}

/// Perplexity of a text under the model, optionally through the
/// perturbation described by `perturb_json`.
#[no_mangle]
pub unsafe extern "C" fn rsr_perplexity(
    ckpt: *const RsrCheckpoint,
    text: *const c_char,
    perturb_json: *const c_char,
    out: *mut f64,
) -> RsrStatus {
    let Some(handle) = ckpt.as_ref() else {
        set_error("checkpoint handle is null");
        return RsrStatus::InvalidArgument;
    };
    let Some(text) = cstr(text) else {
        set_error("text is null or not UTF-8");
        return RsrStatus::InvalidArgument;
    };
    if out.is_null() {
        set_error("out pointer is null");
        return RsrStatus::InvalidArgument;
    }
    let pcfg = match parse_perturbation(cstr(perturb_json)) {
        Ok(p) => p,
        Err(e) => {
            set_error(&e);
            return RsrStatus::ConfigError;
        }
    };
    match perplexity(&handle.inner, text, pcfg.as_ref()) {
        Ok(v) => {
            *out = v;
            RsrStatus::Ok
        }
        Err(e) => {
            set_error(&e.to_string());
            RsrStatus::ModelError
        }
    }
}

/// Lexical profile of a text as a JSON object string.
#[no_mangle]
pub unsafe extern "C" fn rsr_lexical_profile_json(
    ckpt: *const RsrCheckpoint,
    text: *const c_char,
    out: *mut *mut c_char,
) -> RsrStatus {
    let Some(handle) = ckpt.as_ref() else {
        set_error("checkpoint handle is null");
        return RsrStatus::InvalidArgument;
    };
    let Some(text) = cstr(text) else {
        set_error("text is null or not UTF-8");
        return RsrStatus::InvalidArgument;
    };
    if out.is_null() {
        set_error("out pointer is null");
        return RsrStatus::InvalidArgument;
    }
    match lexical_profile(text, &handle.inner.vocab, &LexicalConfig::default())
        .map_err(|e| e.to_string())
        .and_then(|p| serde_json::to_string(&p).map_err(|e| e.to_string()))
    {
        Ok(json) => {
            *out = CString::new(json).unwrap().into_raw();
            RsrStatus::Ok
        }
        Err(e) => {
            set_error(&e);
            RsrStatus::ModelError
        }
    }
}

/// Frees a string returned by this library.
#[no_mangle]
pub unsafe extern "C" fn rsr_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
