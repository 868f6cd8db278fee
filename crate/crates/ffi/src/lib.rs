//! C ABI over the editing library: opaque handles, status codes, and a
//! thread-local last-error message. JSON strings carry the structured
//! payloads (edit requests, audits, reports) across the boundary.
//!
//! Ownership rules: every `*mut` handle returned through an out-pointer is
//! owned by the caller and must be released with the matching `_free`
//! function; strings returned through out-pointers are released with
//! `fe_string_free`. Handles are not thread-safe for concurrent mutation;
//! concurrent reads of one model are fine.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::PathBuf;

use factedit::datasets;
use factedit::editor::{edit, estimate_covariance_with, CovarianceStats, EditRequest};
use factedit::encoder::EncoderWeights;
use factedit::error::Error;
use factedit::harness::proxy_records;
use factedit::metrics::aggregate;
use factedit::value_opt::OptimizerConfig;
use factedit::vocab::{tokenize, Vocabulary};

/// Status of an API call; mirrors the CLI exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeStatus {
    Ok = 0,
    /// Invalid arguments: null pointers, malformed JSON, missing fields.
    Usage = 1,
    /// Files or data that exist but violate the documented formats.
    Data = 2,
    /// Numerical failure inside the editing math.
    Numeric = 3,
}

/// Opaque handle: an encoder plus the vocabulary it was built against.
pub struct FeModel {
    weights: EncoderWeights,
    vocab: Vocabulary,
}

/// Opaque handle: cached key second moments for one layer.
pub struct FeCovariance {
    stats: CovarianceStats,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(message: &str) {
    let sanitized = message.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn status_of(error: &Error) -> FeStatus {
    match error.exit_code() {
        1 => FeStatus::Usage,
        2 => FeStatus::Data,
        _ => FeStatus::Numeric,
    }
}

fn fail(error: Error) -> FeStatus {
    let status = status_of(&error);
    set_error(&error.to_string());
    status
}

fn usage(message: &str) -> FeStatus {
    set_error(message);
    FeStatus::Usage
}

/// # Safety
/// `ptr` must be null or a valid NUL-terminated UTF-8 string.
unsafe fn read_str<'a>(ptr: *const c_char, name: &str) -> Result<&'a str, FeStatus> {
    if ptr.is_null() {
        return Err(usage(&format!("{name} must not be null")));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| usage(&format!("{name} is not valid UTF-8")))
}

fn emit_string(out: *mut *mut c_char, text: String) -> FeStatus {
    let sanitized = text.replace('\0', " ");
    match CString::new(sanitized) {
        Ok(cstring) => {
            unsafe { *out = cstring.into_raw() };
            FeStatus::Ok
        }
        Err(_) => usage("output string contained interior NUL"),
    }
}

/// Message describing the most recent failure on this thread. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn fe_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn fe_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Release a string produced by this library.
///
/// # Safety
/// `s` must be null or a pointer previously returned through one of the
/// `out_*_json` parameters, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fe_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Load a weight container and its vocabulary file into a model handle.
///
/// # Safety
/// `weights_path` and `vocab_path` must be valid NUL-terminated strings;
/// `out` must point to writable storage for one pointer.
#[no_mangle]
pub unsafe extern "C" fn fe_model_load(
    weights_path: *const c_char,
    vocab_path: *const c_char,
    out: *mut *mut FeModel,
) -> FeStatus {
    if out.is_null() {
        return usage("out must not be null");
    }
    let weights_path = match read_str(weights_path, "weights_path") {
        Ok(s) => PathBuf::from(s),
        Err(status) => return status,
    };
    let vocab_path = match read_str(vocab_path, "vocab_path") {
        Ok(s) => PathBuf::from(s),
        Err(status) => return status,
    };
    let weights = match EncoderWeights::load(&weights_path) {
        Ok(w) => w,
        Err(e) => return fail(e),
    };
    let vocab = match Vocabulary::load(&vocab_path) {
        Ok(v) => v,
        Err(e) => return fail(e),
    };
    if let Some(digest) = &weights.vocab_digest {
        if digest != &vocab.digest() {
            return fail(Error::Validation(
                "weights and vocabulary digests do not match".into(),
            ));
        }
    }
    *out = Box::into_raw(Box::new(FeModel { weights, vocab }));
    FeStatus::Ok
}

/// # Safety
/// `model` must be null or an unfreed handle from `fe_model_load`.
#[no_mangle]
pub unsafe extern "C" fn fe_model_free(model: *mut FeModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Save the model's weight container.
///
/// # Safety
/// `model` must be a live handle; `path` a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn fe_model_save(model: *const FeModel, path: *const c_char) -> FeStatus {
    let Some(model) = model.as_ref() else {
        return usage("model must not be null");
    };
    let path = match read_str(path, "path") {
        Ok(s) => PathBuf::from(s),
        Err(status) => return status,
    };
    match model.weights.save(&path) {
        Ok(()) => FeStatus::Ok,
        Err(e) => fail(e),
    }
}

/// Embedding dimension of the model, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fe_model_embed_dim(model: *const FeModel) -> usize {
    model.as_ref().map_or(0, |m| m.weights.config.d_model)
}

/// Encode `text` and write its EOS embedding into `out_embedding`, which
/// must hold `fe_model_embed_dim` doubles.
///
/// # Safety
/// `model` must be a live handle, `text` a valid NUL-terminated string, and
/// `out_embedding` writable for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn fe_model_encode(
    model: *const FeModel,
    text: *const c_char,
    out_embedding: *mut f64,
    len: usize,
) -> FeStatus {
    let Some(model) = model.as_ref() else {
        return usage("model must not be null");
    };
    let text = match read_str(text, "text") {
        Ok(s) => s,
        Err(status) => return status,
    };
    if out_embedding.is_null() {
        return usage("out_embedding must not be null");
    }
    if len != model.weights.config.d_model {
        return usage("out_embedding length does not match the embedding dimension");
    }
    let seq = match tokenize(text, &model.vocab, model.weights.config.max_seq_len) {
        Ok(seq) => seq,
        Err(e) => return fail(e),
    };
    match model.weights.encode_embedding(&seq) {
        Ok(embedding) => {
            std::ptr::copy_nonoverlapping(embedding.as_ptr(), out_embedding, len);
            FeStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Estimate key second moments for `layer` from a text corpus file.
///
/// # Safety
/// `model` must be a live handle, `corpus_path` a valid NUL-terminated
/// string, `out` writable for one pointer.
#[no_mangle]
pub unsafe extern "C" fn fe_covariance_estimate(
    model: *const FeModel,
    corpus_path: *const c_char,
    layer: usize,
    epsilon_scale: f64,
    include_special_positions: bool,
    out: *mut *mut FeCovariance,
) -> FeStatus {
    let Some(model) = model.as_ref() else {
        return usage("model must not be null");
    };
    if out.is_null() {
        return usage("out must not be null");
    }
    let corpus_path = match read_str(corpus_path, "corpus_path") {
        Ok(s) => PathBuf::from(s),
        Err(status) => return status,
    };
    let corpus = match std::fs::read_to_string(&corpus_path) {
        Ok(text) => text,
        Err(e) => return fail(Error::io(corpus_path, e)),
    };
    match estimate_covariance_with(
        &model.weights,
        &model.vocab,
        &corpus,
        layer,
        epsilon_scale,
        include_special_positions,
    ) {
        Ok(stats) => {
            *out = Box::into_raw(Box::new(FeCovariance { stats }));
            FeStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Load a cached covariance container.
///
/// # Safety
/// `path` must be a valid NUL-terminated string; `out` writable for one
/// pointer.
#[no_mangle]
pub unsafe extern "C" fn fe_covariance_load(
    path: *const c_char,
    out: *mut *mut FeCovariance,
) -> FeStatus {
    if out.is_null() {
        return usage("out must not be null");
    }
    let path = match read_str(path, "path") {
        Ok(s) => PathBuf::from(s),
        Err(status) => return status,
    };
    match CovarianceStats::load(&path) {
        Ok(stats) => {
            *out = Box::into_raw(Box::new(FeCovariance { stats }));
            FeStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Save a covariance container.
///
/// # Safety
/// `cov` must be a live handle; `path` a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn fe_covariance_save(
    cov: *const FeCovariance,
    path: *const c_char,
) -> FeStatus {
    let Some(cov) = cov.as_ref() else {
        return usage("cov must not be null");
    };
    let path = match read_str(path, "path") {
        Ok(s) => PathBuf::from(s),
        Err(status) => return status,
    };
    match cov.stats.save(&path) {
        Ok(()) => FeStatus::Ok,
        Err(e) => fail(e),
    }
}

/// # Safety
/// `cov` must be null or an unfreed covariance handle.
#[no_mangle]
pub unsafe extern "C" fn fe_covariance_free(cov: *mut FeCovariance) {
    if !cov.is_null() {
        drop(Box::from_raw(cov));
    }
}

/// Apply one rank-one edit in place. `request_json` is an edit request:
/// `{"edit_prompt", "subject", "source_text",
///   "target": {"text": ...} | {"embedding": [...]},
///   "layer", "key_templates": [...], "contrastive_texts": [...]}`.
/// `optimizer_json` may be null for defaults. On success the audit record
/// is returned through `out_audit_json`.
///
/// # Safety
/// `model` must be a live handle with exclusive access, `cov` a live
/// covariance handle, `request_json` (and `optimizer_json` when non-null)
/// valid NUL-terminated strings, `out_audit_json` writable for one pointer.
#[no_mangle]
pub unsafe extern "C" fn fe_model_edit(
    model: *mut FeModel,
    cov: *const FeCovariance,
    request_json: *const c_char,
    optimizer_json: *const c_char,
    out_audit_json: *mut *mut c_char,
) -> FeStatus {
    let Some(model) = model.as_mut() else {
        return usage("model must not be null");
    };
    let Some(cov) = cov.as_ref() else {
        return usage("cov must not be null");
    };
    if out_audit_json.is_null() {
        return usage("out_audit_json must not be null");
    }
    let request_json = match read_str(request_json, "request_json") {
        Ok(s) => s,
        Err(status) => return status,
    };
    let request: EditRequest = match serde_json::from_str(request_json) {
        Ok(req) => req,
        Err(e) => return usage(&format!("bad request JSON: {e}")),
    };
    let optimizer = if optimizer_json.is_null() {
        OptimizerConfig::default()
    } else {
        let text = match read_str(optimizer_json, "optimizer_json") {
            Ok(s) => s,
            Err(status) => return status,
        };
        match serde_json::from_str(text) {
            Ok(cfg) => cfg,
            Err(e) => return usage(&format!("bad optimizer JSON: {e}")),
        }
    };
    let frozen = model.weights.clone();
    match edit(
        &model.weights,
        &model.vocab,
        &request,
        &cov.stats,
        &optimizer,
        &frozen,
    ) {
        Ok((edited, audit)) => {
            model.weights = edited;
            match serde_json::to_string_pretty(&audit) {
                Ok(text) => emit_string(out_audit_json, text),
                Err(e) => {
                    set_error(&format!("audit serialization failed: {e}"));
                    FeStatus::Data
                }
            }
        }
        Err(e) => fail(e),
    }
}

/// Evaluate `edited` against `frozen` over a dataset file with the text
/// proxy scorer. `seeds`/`seed_count` may be null/0 for the default 0..24.
/// The metric report is returned through `out_report_json`.
///
/// # Safety
/// `edited` and `frozen` must be live handles, `dataset_path` a valid
/// NUL-terminated string, `seeds` null or readable for `seed_count` values,
/// `out_report_json` writable for one pointer.
#[no_mangle]
pub unsafe extern "C" fn fe_model_eval(
    edited: *const FeModel,
    frozen: *const FeModel,
    dataset_path: *const c_char,
    seeds: *const u64,
    seed_count: usize,
    out_report_json: *mut *mut c_char,
) -> FeStatus {
    let Some(edited) = edited.as_ref() else {
        return usage("edited must not be null");
    };
    let Some(frozen) = frozen.as_ref() else {
        return usage("frozen must not be null");
    };
    if out_report_json.is_null() {
        return usage("out_report_json must not be null");
    }
    let dataset_path = match read_str(dataset_path, "dataset_path") {
        Ok(s) => PathBuf::from(s),
        Err(status) => return status,
    };
    let seed_list: Vec<u64> = if seeds.is_null() || seed_count == 0 {
        (0..25).collect()
    } else {
        std::slice::from_raw_parts(seeds, seed_count).to_vec()
    };
    let cases = match datasets::load_road(&dataset_path) {
        Ok(file) => file.entries.iter().map(datasets::EvalCase::from).collect::<Vec<_>>(),
        Err(road_err) => match datasets::load_time(&dataset_path) {
            Ok(file) => file.entries.iter().map(datasets::EvalCase::from).collect(),
            Err(_) => return fail(road_err),
        },
    };
    let records = match proxy_records(
        &edited.weights,
        &frozen.weights,
        &edited.vocab,
        &cases,
        &seed_list,
    ) {
        Ok(records) => records,
        Err(e) => return fail(e),
    };
    match aggregate(&records) {
        Ok(report) => match serde_json::to_string_pretty(&report) {
            Ok(text) => emit_string(out_report_json, text),
            Err(e) => {
                set_error(&format!("report serialization failed: {e}"));
                FeStatus::Data
            }
        },
        Err(e) => fail(e),
    }
}
