//! C ABI over `sidiff-core`.
//!
//! Handles are opaque pointers released with their `*_free` function.
//! Every fallible call returns a [`SidiffStatus`]; on failure the calling
//! thread's last error is set and can be read with
//! [`sidiff_last_error_kind`] and [`sidiff_last_error_message`]. Strings
//! returned through `out_json` parameters are owned by the caller and must be
//! released with [`sidiff_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use serde_json::{json, Value};
use sidiff_core::backends::{validate_schema, EmbeddingVector, SchemaId};
use sidiff_core::config::{CliConfig, FileConfig};
use sidiff_core::engine::{default_run_id, write_run_manifest, Engine};
use sidiff_core::evaluator::{needs_edit, summarize, EvaluationReport};
use sidiff_core::memory::{KnowledgeBase, SharedKb, StoreId};
use sidiff_core::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SidiffStatus {
    Ok = 0,
    /// Null pointer, invalid UTF-8 or malformed JSON argument.
    InvalidArgument = 1,
    /// A Rust panic was caught at the boundary.
    Panic = 2,
    Transport = 10,
    Protocol = 11,
    EmptyCompletion = 12,
    SchemaViolation = 13,
    DimensionMismatch = 14,
    GenerationRejected = 15,
    Decode = 16,
    MissingBaseImage = 17,
    Precondition = 18,
    MissingSlot = 19,
    UnknownTemplate = 20,
    UnknownNode = 21,
    Io = 22,
    CorruptStore = 23,
    InvariantViolation = 24,
    UnknownId = 25,
    Config = 26,
    EmptyPrompt = 27,
    NeedsTrajectories = 28,
    DuplicateId = 29,
}

impl From<&Error> for SidiffStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Transport(_) => Self::Transport,
            Error::Protocol(_) => Self::Protocol,
            Error::EmptyCompletion => Self::EmptyCompletion,
            Error::SchemaViolation { .. } => Self::SchemaViolation,
            Error::DimensionMismatch { .. } => Self::DimensionMismatch,
            Error::GenerationRejected(_) => Self::GenerationRejected,
            Error::Decode(_) => Self::Decode,
            Error::MissingBaseImage => Self::MissingBaseImage,
            Error::Precondition(_) => Self::Precondition,
            Error::MissingSlot(_) => Self::MissingSlot,
            Error::UnknownTemplate(_) => Self::UnknownTemplate,
            Error::UnknownNode(_) => Self::UnknownNode,
            Error::Io(_) | Error::Sqlite(_) => Self::Io,
            Error::CorruptStore(_) => Self::CorruptStore,
            Error::InvariantViolation(_) => Self::InvariantViolation,
            Error::UnknownId(_) => Self::UnknownId,
            Error::Config(_) => Self::Config,
            Error::EmptyPrompt => Self::EmptyPrompt,
            Error::NeedsTrajectories => Self::NeedsTrajectories,
            Error::DuplicateId(_) => Self::DuplicateId,
        }
    }
}

/// Opaque knowledge-base handle.
pub struct SidiffKb {
    kb: SharedKb,
}

/// Opaque engine handle: effective configuration plus an open knowledge
/// base. Each run gets fresh backends.
pub struct SidiffEngine {
    cfg: CliConfig,
    kb: SharedKb,
}

struct LastError {
    kind: CString,
    message: CString,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<LastError>> = const { RefCell::new(None) };
}

fn set_last_error(kind: &str, message: &str) {
    let clean = |s: &str| CString::new(s.replace('\0', " ")).expect("NULs removed");
    LAST_ERROR.with(|e| {
        *e.borrow_mut() = Some(LastError {
            kind: clean(kind),
            message: clean(message),
        })
    });
}

fn clear_last_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

enum Failure {
    Arg(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

type FfiResult<T> = Result<T, Failure>;

/// Runs `f` behind the panic boundary and records any failure.
fn guard(f: impl FnOnce() -> FfiResult<()>) -> SidiffStatus {
    clear_last_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SidiffStatus::Ok,
        Ok(Err(Failure::Arg(m))) => {
            set_last_error("InvalidArgument", &m);
            SidiffStatus::InvalidArgument
        }
        Ok(Err(Failure::Core(e))) => {
            set_last_error(e.kind(), &e.to_string());
            SidiffStatus::from(&e)
        }
        Err(_) => {
            set_last_error("Panic", "panic caught at the C boundary");
            SidiffStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> FfiResult<&'a str> {
    if p.is_null() {
        return Err(Failure::Arg(format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::Arg(format!("{name} is not valid UTF-8")))
}

unsafe fn opt_str_arg<'a>(p: *const c_char, name: &str) -> FfiResult<Option<&'a str>> {
    if p.is_null() {
        Ok(None)
    } else {
        str_arg(p, name).map(Some)
    }
}

unsafe fn store_arg(p: *const c_char) -> FfiResult<StoreId> {
    Ok(str_arg(p, "store")?.parse()?)
}

unsafe fn out_arg<'a, T>(p: *mut T, name: &str) -> FfiResult<&'a mut T> {
    p.as_mut().ok_or_else(|| Failure::Arg(format!("{name} is null")))
}

unsafe fn handle<'a, T>(p: *const T, name: &str) -> FfiResult<&'a T> {
    p.as_ref().ok_or_else(|| Failure::Arg(format!("{name} is null")))
}

fn into_c_string(v: &Value) -> *mut c_char {
    CString::new(v.to_string()).expect("JSON has no NUL bytes").into_raw()
}

fn parse_report(text: &str) -> FfiResult<EvaluationReport> {
    let v: Value = serde_json::from_str(text).map_err(|e| Failure::Arg(format!("report_json: {e}")))?;
    validate_schema(SchemaId::Evaluation, &v).map_err(|m| Failure::Arg(format!("report_json: {m}")))?;
    serde_json::from_value(v).map_err(|e| Failure::Arg(format!("report_json: {e}")))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sidiff_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Kind of the calling thread's last error (for example `"EmptyPrompt"`),
/// or NULL. Valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn sidiff_last_error_kind() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |e| e.kind.as_ptr()))
}

/// Human-readable message of the calling thread's last error, or NULL.
#[no_mangle]
pub extern "C" fn sidiff_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |e| e.message.as_ptr()))
}

/// Releases a string returned by this library. NULL is ignored.
///
/// # Safety
/// `s` must come from an `out_json` parameter of this library and must not
/// be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sidiff_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Opens (creating if needed) the knowledge base in directory `dir`. With
/// `dim == 0` an existing knowledge base is opened at its stored dimension.
///
/// # Safety
/// `dir` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sidiff_kb_open(dir: *const c_char, dim: usize, out: *mut *mut SidiffKb) -> SidiffStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let path = PathBuf::from(str_arg(dir, "dir")?);
        let kb = if dim == 0 {
            KnowledgeBase::open_existing(&path)?
        } else {
            KnowledgeBase::open(&path, dim)?
        };
        *out = Box::into_raw(Box::new(SidiffKb { kb: kb.into_shared() }));
        Ok(())
    })
}

/// Closes a knowledge base. NULL is ignored.
///
/// # Safety
/// `kb` must come from [`sidiff_kb_open`] and must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sidiff_kb_free(kb: *mut SidiffKb) {
    if !kb.is_null() {
        drop(Box::from_raw(kb));
    }
}

/// Number of trajectories in `store` (`"gen"` or `"edit"`).
///
/// # Safety
/// Pointers must be valid; `store` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn sidiff_kb_count(kb: *const SidiffKb, store: *const c_char, out: *mut usize) -> SidiffStatus {
    guard(|| {
        let kb = handle(kb, "kb")?;
        let store = store_arg(store)?;
        let out = out_arg(out, "out")?;
        *out = kb.kb.lock().unwrap().trajectory_count(store)?;
        Ok(())
    })
}

/// Writes `store` to `path` as JSONL ordered by id.
///
/// # Safety
/// Pointers must be valid; strings NUL-terminated. `out_count` may be NULL.
#[no_mangle]
pub unsafe extern "C" fn sidiff_kb_export(
    kb: *const SidiffKb,
    store: *const c_char,
    path: *const c_char,
    out_count: *mut usize,
) -> SidiffStatus {
    guard(|| {
        let kb = handle(kb, "kb")?;
        let store = store_arg(store)?;
        let n = kb.kb.lock().unwrap().export_trajectories(store, PathBuf::from(str_arg(path, "path")?).as_path())?;
        if let Some(out) = out_count.as_mut() {
            *out = n;
        }
        Ok(())
    })
}

/// Imports a JSONL export into `store`, all or nothing.
///
/// # Safety
/// Pointers must be valid; strings NUL-terminated. `out_count` may be NULL.
#[no_mangle]
pub unsafe extern "C" fn sidiff_kb_import(
    kb: *const SidiffKb,
    store: *const c_char,
    path: *const c_char,
    out_count: *mut usize,
) -> SidiffStatus {
    guard(|| {
        let kb = handle(kb, "kb")?;
        let store = store_arg(store)?;
        let n = kb.kb.lock().unwrap().import_trajectories(store, PathBuf::from(str_arg(path, "path")?).as_path())?;
        if let Some(out) = out_count.as_mut() {
            *out = n;
        }
        Ok(())
    })
}

/// Top-`k` records of `store` by inner product with `vector` (normalized
/// first). Writes a JSON array of `{id, similarity, original_prompt}`.
///
/// # Safety
/// `vector` must point to `len` floats; other pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn sidiff_kb_retrieve(
    kb: *const SidiffKb,
    store: *const c_char,
    vector: *const f32,
    len: usize,
    k: usize,
    out_json: *mut *mut c_char,
) -> SidiffStatus {
    guard(|| {
        let kb = handle(kb, "kb")?;
        let store = store_arg(store)?;
        let out = out_arg(out_json, "out_json")?;
        *out = ptr::null_mut();
        if vector.is_null() {
            return Err(Failure::Arg("vector is null".into()));
        }
        let q = EmbeddingVector::normalized(std::slice::from_raw_parts(vector, len).to_vec())?;
        let hits = kb.kb.lock().unwrap().retrieve_similar(store, &q, k)?;
        let v: Vec<Value> = hits
            .iter()
            .map(|h| json!({"id": h.id(), "similarity": h.similarity, "original_prompt": h.record.original_prompt}))
            .collect();
        *out = into_c_string(&Value::Array(v));
        Ok(())
    })
}

/// Summarizes an evaluator report (JSON) into
/// `{aesthetic_mean, alignment_mean, overall}`.
///
/// # Safety
/// `report_json` NUL-terminated; `out_json` valid.
#[no_mangle]
pub unsafe extern "C" fn sidiff_summarize(report_json: *const c_char, out_json: *mut *mut c_char) -> SidiffStatus {
    guard(|| {
        let out = out_arg(out_json, "out_json")?;
        *out = ptr::null_mut();
        let report = parse_report(str_arg(report_json, "report_json")?)?;
        let s = summarize(&report);
        *out = into_c_string(&serde_json::to_value(s).expect("summary serializes"));
        Ok(())
    })
}

/// Whether the report's overall score is strictly below `tau`.
///
/// # Safety
/// `report_json` NUL-terminated; `out` valid.
#[no_mangle]
pub unsafe extern "C" fn sidiff_needs_edit(report_json: *const c_char, tau: f64, out: *mut bool) -> SidiffStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let report = parse_report(str_arg(report_json, "report_json")?)?;
        *out = needs_edit(&summarize(&report), tau);
        Ok(())
    })
}

/// Creates an engine from flat TOML configuration text (NULL or empty for
/// defaults). The same keys as the CLI config file are accepted; the
/// environment is not consulted. Opens the configured knowledge base.
///
/// # Safety
/// `config_toml` NULL or NUL-terminated; `out` valid.
#[no_mangle]
pub unsafe extern "C" fn sidiff_engine_new(config_toml: *const c_char, out: *mut *mut SidiffEngine) -> SidiffStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let mut cfg = CliConfig::default();
        if let Some(text) = opt_str_arg(config_toml, "config_toml")? {
            cfg.apply_file(FileConfig::parse(text)?);
        }
        cfg.validate()?;
        cfg.backends()?;
        let kb = KnowledgeBase::open(&cfg.kb, cfg.embed_dim())?.into_shared();
        *out = Box::into_raw(Box::new(SidiffEngine { cfg, kb }));
        Ok(())
    })
}

/// Releases an engine. NULL is ignored.
///
/// # Safety
/// `engine` must come from [`sidiff_engine_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sidiff_engine_free(engine: *mut SidiffEngine) {
    if !engine.is_null() {
        drop(Box::from_raw(engine));
    }
}

/// Runs one prompt, writes the run manifest under the configured `out`
/// directory and returns `{run_id, score, edits_used, trajectory_id_gen,
/// trajectory_id_edit, guidance_active, manifest}` as JSON. `run_id` may be
/// NULL for an id derived from prompt and seed.
///
/// # Safety
/// `engine` valid; strings NULL (where allowed) or NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn sidiff_engine_run(
    engine: *const SidiffEngine,
    prompt: *const c_char,
    run_id: *const c_char,
    out_json: *mut *mut c_char,
) -> SidiffStatus {
    guard(|| {
        let e = handle(engine, "engine")?;
        let out = out_arg(out_json, "out_json")?;
        *out = ptr::null_mut();
        let prompt = str_arg(prompt, "prompt")?;
        let run_id = opt_str_arg(run_id, "run_id")?
            .map_or_else(|| default_run_id(prompt, e.cfg.workflow.seed), str::to_string);
        let engine = Engine::new(e.cfg.backends()?, e.kb.clone(), e.cfg.workflow.clone())?
            .with_quarantine_dir(e.cfg.quarantine_dir());
        let r = engine.run(prompt, &run_id)?;
        let manifest = write_run_manifest(&e.cfg.out, &r)?;
        *out = into_c_string(&json!({
            "run_id": r.run_id,
            "score": r.final_score(),
            "edits_used": r.edits_used,
            "trajectory_id_gen": r.trajectory_id_gen,
            "trajectory_id_edit": r.trajectory_id_edit,
            "guidance_active": r.guidance_active,
            "manifest": manifest.display().to_string(),
        }));
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use sidiff_core::backends::SchemaId;

    #[test]
    fn every_error_kind_has_its_own_status() {
        let errors = [
            Error::Transport(String::new()),
            Error::Protocol(String::new()),
            Error::EmptyCompletion,
            Error::SchemaViolation {
                schema: SchemaId::Judge,
                attempts: 3,
                message: String::new(),
            },
            Error::DimensionMismatch { expected: 1, actual: 2 },
            Error::GenerationRejected(String::new()),
            Error::Decode(String::new()),
            Error::MissingBaseImage,
            Error::Precondition(String::new()),
            Error::MissingSlot(String::new()),
            Error::UnknownTemplate(String::new()),
            Error::UnknownNode(String::new()),
            Error::Io(std::io::Error::other("x")),
            Error::CorruptStore(String::new()),
            Error::InvariantViolation(String::new()),
            Error::UnknownId(1),
            Error::Config(String::new()),
            Error::EmptyPrompt,
            Error::NeedsTrajectories,
            Error::DuplicateId(String::new()),
        ];
        let mut seen = std::collections::HashSet::new();
        for e in &errors {
            let s = SidiffStatus::from(e);
            assert!(s as i32 >= 10, "{e:?}");
            assert!(seen.insert(s as i32), "{e:?} shares a status");
        }
    }

    #[test]
    fn panics_become_status() {
        assert_eq!(guard(|| panic!("boom")), SidiffStatus::Panic);
        assert_eq!(unsafe { CStr::from_ptr(sidiff_last_error_kind()) }.to_str().unwrap(), "Panic");
    }
}
