//! C ABI over the knowted engine.
//!
//! Handles are opaque pointers owned by the caller and released with the
//! matching `_free` function. Results cross the boundary as NUL-terminated
//! JSON strings that the caller releases with [`knowted_string_free`].
//! Every fallible call returns a [`KnowtedStatus`]; on failure the message
//! is available from [`knowted_last_error`] on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use chrono::{DateTime, Utc};
use knowted::autocomplete::AutocompleteError;
use knowted::cards::CardError;
use knowted::engine::EngineError;
use knowted::ontology::OntologyError;
use knowted::record::{ingest_file, ingest_str, parse_timestamp, PatientRecord, RecordError};
use knowted::{ConceptId, ConceptType, Engine};
use serde::Serialize;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KnowtedStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// A file could not be read.
    Io = 3,
    /// Malformed lexicon, patient file, timestamp or filter.
    InvalidInput = 4,
    UnknownConcept = 5,
    /// The concept exists but the operation does not apply to its type.
    Unsupported = 6,
    /// A lab frame or statistic has no data.
    NoData = 7,
    Internal = 8,
    /// The engine panicked; the handle should be discarded.
    Panic = 9,
}

/// A loaded lexicon with its recognizer, negation rules and prefix index.
pub struct KnowtedEngine(Engine);

/// An ingested patient record.
pub struct KnowtedRecord(PatientRecord);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(KnowtedStatus, String);

type FfiResult<T> = Result<T, Failure>;

impl From<EngineError> for Failure {
    fn from(e: EngineError) -> Self {
        let status = match e {
            EngineError::Io { .. } | EngineError::Ontology(OntologyError::Io { .. }) => KnowtedStatus::Io,
            _ => KnowtedStatus::InvalidInput,
        };
        Failure(status, e.to_string())
    }
}

impl From<RecordError> for Failure {
    fn from(e: RecordError) -> Self {
        let status = match e {
            RecordError::Io(_) => KnowtedStatus::Io,
            _ => KnowtedStatus::InvalidInput,
        };
        Failure(status, e.to_string())
    }
}

impl From<CardError> for Failure {
    fn from(e: CardError) -> Self {
        let status = match e {
            CardError::UnknownConcept(_) => KnowtedStatus::UnknownConcept,
            CardError::UnsupportedType(_) => KnowtedStatus::Unsupported,
            _ => KnowtedStatus::InvalidInput,
        };
        Failure(status, e.to_string())
    }
}

impl From<AutocompleteError> for Failure {
    fn from(e: AutocompleteError) -> Self {
        let status = match e {
            AutocompleteError::UnknownConcept(_) => KnowtedStatus::UnknownConcept,
            AutocompleteError::NotALab(_) => KnowtedStatus::Unsupported,
            AutocompleteError::EmptyFrame(_) | AutocompleteError::MissingStat { .. } => KnowtedStatus::NoData,
            AutocompleteError::CueParse { .. } => KnowtedStatus::InvalidInput,
        };
        Failure(status, e.to_string())
    }
}

fn set_error(message: &str) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

/// Run `f`, translating errors and panics into a status.
fn guard(f: impl FnOnce() -> FfiResult<()>) -> KnowtedStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => KnowtedStatus::Ok,
        Ok(Err(Failure(status, message))) => {
            set_error(&message);
            status
        }
        Err(payload) => {
            let message = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".to_string());
            set_error(&format!("panic: {message}"));
            KnowtedStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(KnowtedStatus::NullArgument, format!("{what} is null"))
}

unsafe fn string_arg<'a>(p: *const c_char, what: &str) -> FfiResult<&'a str> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(KnowtedStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

unsafe fn optional_string<'a>(p: *const c_char, what: &str) -> FfiResult<Option<&'a str>> {
    if p.is_null() {
        Ok(None)
    } else {
        string_arg(p, what).map(Some)
    }
}

unsafe fn engine_arg<'a>(p: *const KnowtedEngine) -> FfiResult<&'a Engine> {
    p.as_ref().map(|e| &e.0).ok_or_else(|| null("engine"))
}

unsafe fn record_arg<'a>(p: *const KnowtedRecord) -> FfiResult<&'a PatientRecord> {
    p.as_ref().map(|r| &r.0).ok_or_else(|| null("record"))
}

fn as_of_arg(raw: Option<&str>) -> FfiResult<DateTime<Utc>> {
    match raw {
        Some(s) => parse_timestamp("as_of", s).map_err(Failure::from),
        None => Ok(Utc::now()),
    }
}

unsafe fn write_json(out: *mut *mut c_char, value: &impl Serialize) -> FfiResult<()> {
    if out.is_null() {
        return Err(null("out"));
    }
    let json = serde_json::to_string(value).map_err(|e| Failure(KnowtedStatus::Internal, e.to_string()))?;
    let c = CString::new(json).map_err(|e| Failure(KnowtedStatus::Internal, e.to_string()))?;
    *out = c.into_raw();
    Ok(())
}

unsafe fn write_handle<T>(out: *mut *mut T, value: T) -> FfiResult<()> {
    if out.is_null() {
        return Err(null("out"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// Library version as a static string. Never null; do not free.
#[no_mangle]
pub extern "C" fn knowted_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the last failed call on this thread, or null after a
/// success. Valid until the next call on this thread; do not free.
#[no_mangle]
pub extern "C" fn knowted_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Release a string returned through an `out` argument. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn knowted_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Load a lexicon directory.
///
/// # Safety
/// `dir` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn knowted_engine_load(dir: *const c_char, out: *mut *mut KnowtedEngine) -> KnowtedStatus {
    guard(|| {
        let dir = string_arg(dir, "dir")?;
        let engine = Engine::load(Path::new(dir))?;
        write_handle(out, KnowtedEngine(engine))
    })
}

/// # Safety
/// `engine` must come from [`knowted_engine_load`] and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn knowted_engine_free(engine: *mut KnowtedEngine) {
    if !engine.is_null() {
        drop(Box::from_raw(engine));
    }
}

/// Ingest a patient fixture file, validating it against the engine's lexicon.
///
/// # Safety
/// Pointers must be valid; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn knowted_record_load(
    engine: *const KnowtedEngine,
    path: *const c_char,
    out: *mut *mut KnowtedRecord,
) -> KnowtedStatus {
    guard(|| {
        let engine = engine_arg(engine)?;
        let path = string_arg(path, "path")?;
        let record = ingest_file(Path::new(path), engine.lexicon(), engine.automaton())?;
        write_handle(out, KnowtedRecord(record))
    })
}

/// Ingest a patient fixture given as a JSON string.
///
/// # Safety
/// Pointers must be valid; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn knowted_record_from_json(
    engine: *const KnowtedEngine,
    json: *const c_char,
    out: *mut *mut KnowtedRecord,
) -> KnowtedStatus {
    guard(|| {
        let engine = engine_arg(engine)?;
        let json = string_arg(json, "json")?;
        let record = ingest_str(json, engine.lexicon(), engine.automaton())?;
        write_handle(out, KnowtedRecord(record))
    })
}

/// # Safety
/// `record` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn knowted_record_free(record: *mut KnowtedRecord) {
    if !record.is_null() {
        drop(Box::from_raw(record));
    }
}

/// Recognize concepts in `text`. Writes a JSON array of annotated spans
/// with character offsets, negation and modifiers.
///
/// # Safety
/// Pointers must be valid; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn knowted_scan(
    engine: *const KnowtedEngine,
    text: *const c_char,
    out: *mut *mut c_char,
) -> KnowtedStatus {
    guard(|| {
        let engine = engine_arg(engine)?;
        let text = string_arg(text, "text")?;
        let spans = engine.scan(text, &[]);
        write_json(out, &engine.annotate(text, &spans))
    })
}

/// Completion response for the text before a caret: trigger decision,
/// type prior, parsed query and ranked suggestions. `record` may be null.
///
/// # Safety
/// Pointers must be valid; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn knowted_complete(
    engine: *const KnowtedEngine,
    text_before_caret: *const c_char,
    record: *const KnowtedRecord,
    out: *mut *mut c_char,
) -> KnowtedStatus {
    guard(|| {
        let engine = engine_arg(engine)?;
        let text = string_arg(text_before_caret, "text_before_caret")?;
        let record = record.as_ref().map(|r| &r.0);
        write_json(out, &engine.complete(text, record))
    })
}

/// Ranked concepts for free text. `filter` is a type name such as
/// `"medication"` or null; `record` may be null.
///
/// # Safety
/// Pointers must be valid; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn knowted_search(
    engine: *const KnowtedEngine,
    text: *const c_char,
    filter: *const c_char,
    record: *const KnowtedRecord,
    out: *mut *mut c_char,
) -> KnowtedStatus {
    guard(|| {
        let engine = engine_arg(engine)?;
        let text = string_arg(text, "text")?;
        let filter = optional_string(filter, "filter")?
            .map(|f| f.parse::<ConceptType>())
            .transpose()
            .map_err(|e| Failure(KnowtedStatus::InvalidInput, e.to_string()))?;
        let record = record.as_ref().map(|r| &r.0);
        write_json(out, &engine.search(text, filter, record))
    })
}

/// Concepts a surface form maps to, as a JSON array.
///
/// # Safety
/// Pointers must be valid; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn knowted_lookup(
    engine: *const KnowtedEngine,
    form: *const c_char,
    out: *mut *mut c_char,
) -> KnowtedStatus {
    guard(|| {
        let engine = engine_arg(engine)?;
        let form = string_arg(form, "form")?;
        write_json(out, &engine.lexicon().lookup(form))
    })
}

/// Assemble the card for `concept`. `as_of` is an RFC 3339 timestamp, or
/// null for the current time.
///
/// # Safety
/// Pointers must be valid; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn knowted_card(
    engine: *const KnowtedEngine,
    record: *const KnowtedRecord,
    concept: *const c_char,
    as_of: *const c_char,
    out: *mut *mut c_char,
) -> KnowtedStatus {
    guard(|| {
        let engine = engine_arg(engine)?;
        let record = record_arg(record)?;
        let concept = ConceptId::new(string_arg(concept, "concept")?);
        let as_of = as_of_arg(optional_string(as_of, "as_of")?)?;
        write_json(out, &engine.card(&concept, record, as_of)?)
    })
}

/// Lab tree menu for a lab or vital-sign concept.
///
/// # Safety
/// Pointers must be valid; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn knowted_lab_tree(
    engine: *const KnowtedEngine,
    record: *const KnowtedRecord,
    concept: *const c_char,
    as_of: *const c_char,
    out: *mut *mut c_char,
) -> KnowtedStatus {
    guard(|| {
        let engine = engine_arg(engine)?;
        let record = record_arg(record)?;
        let concept = ConceptId::new(string_arg(concept, "concept")?);
        let as_of = as_of_arg(optional_string(as_of, "as_of")?)?;
        write_json(out, &engine.lab_tree(&concept, record, as_of)?)
    })
}
