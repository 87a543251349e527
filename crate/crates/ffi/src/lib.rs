//! C ABI over the engine. Every object crosses the boundary as an opaque
//! handle freed by its own `*_free`; every call returns an [`FfStatus`] and
//! leaves a message for [`ff_last_error`] on failure. Strings returned
//! through out-parameters are owned by the caller and released with
//! [`ff_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use foamflow::agents::{parse_errors, ExecutionLogs, LogEntry};
use foamflow::case::{parse_dictionary, serialize_dictionary, DictNode};
use foamflow::cli::{services, CliConfig, CliError, FileConfig, FlagConfig};
use foamflow::kb::{IndexKind, KnowledgeBase};
use foamflow::mcp::{handle_message, McpError, McpService, ServiceConfig};

/// Result of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FfStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    ParseError = 3,
    NotFound = 4,
    Io = 5,
    Config = 6,
    Locked = 7,
    Internal = 8,
    Panic = 9,
}

/// The four knowledge-base indices.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FfIndexKind {
    TutorialStructure = 0,
    TutorialDetails = 1,
    ExecutionScripts = 2,
    CommandDocumentation = 3,
}

impl From<FfIndexKind> for IndexKind {
    fn from(kind: FfIndexKind) -> Self {
        match kind {
            FfIndexKind::TutorialStructure => IndexKind::TutorialStructure,
            FfIndexKind::TutorialDetails => IndexKind::TutorialDetails,
            FfIndexKind::ExecutionScripts => IndexKind::ExecutionScripts,
            FfIndexKind::CommandDocumentation => IndexKind::CommandDocumentation,
        }
    }
}

/// A parsed OpenFOAM dictionary file.
pub struct FfDict(DictNode);

/// A loaded knowledge base.
pub struct FfKnowledgeBase(KnowledgeBase);

/// A running tool server answering JSON-RPC lines.
pub struct FfServer(McpService);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: impl Into<String>) {
    let text = message.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).ok());
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

struct Failure(FfStatus, String);

type Outcome = Result<(), Failure>;

fn fail(status: FfStatus, message: impl std::fmt::Display) -> Failure {
    Failure(status, message.to_string())
}

/// Runs `body`, converting panics and recording the error message.
fn guard(body: impl FnOnce() -> Outcome) -> FfStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => FfStatus::Ok,
        Ok(Err(Failure(status, message))) => {
            set_error(message);
            status
        }
        Err(payload) => {
            let message = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("panic: {message}"));
            FfStatus::Panic
        }
    }
}

/// # Safety
/// `ptr` is null or a NUL-terminated string valid for the call.
unsafe fn read_str<'a>(ptr: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if ptr.is_null() {
        return Err(fail(FfStatus::NullArgument, format!("{name} is null")));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map_err(|e| fail(FfStatus::InvalidUtf8, format!("{name}: {e}")))
}

fn out_ptr<T>(out: *mut T, name: &str) -> Result<(), Failure> {
    if out.is_null() {
        Err(fail(FfStatus::NullArgument, format!("{name} is null")))
    } else {
        Ok(())
    }
}

fn into_c_string(text: String) -> Result<*mut c_char, Failure> {
    CString::new(text)
        .map(CString::into_raw)
        .map_err(|e| fail(FfStatus::Internal, format!("string contains NUL: {e}")))
}

/// Library version, a static string.
#[no_mangle]
pub extern "C" fn ff_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call on the same thread.
#[no_mangle]
pub extern "C" fn ff_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Frees a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` is null or was returned through an out-parameter of this library and
/// not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ff_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Parses dictionary text.
///
/// # Safety
/// `text` is a NUL-terminated string; `out` is a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn ff_dict_parse(text: *const c_char, out: *mut *mut FfDict) -> FfStatus {
    guard(|| {
        out_ptr(out, "out")?;
        let text = read_str(text, "text")?;
        let node = parse_dictionary(text).map_err(|e| fail(FfStatus::ParseError, e))?;
        *out = Box::into_raw(Box::new(FfDict(node)));
        Ok(())
    })
}

/// Canonical text of a dictionary.
///
/// # Safety
/// `dict` is a live handle; `out` is a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn ff_dict_serialize(dict: *const FfDict, out: *mut *mut c_char) -> FfStatus {
    guard(|| {
        out_ptr(out, "out")?;
        let dict = dict
            .as_ref()
            .ok_or_else(|| fail(FfStatus::NullArgument, "dict is null"))?;
        *out = into_c_string(serialize_dictionary(&dict.0))?;
        Ok(())
    })
}

/// Value at a `/`-separated keyword path: the word for a scalar, the
/// canonical text otherwise. `FF_STATUS_NOT_FOUND` when absent.
///
/// # Safety
/// `dict` is a live handle; `path` is a NUL-terminated string; `out` is a
/// writable pointer.
#[no_mangle]
pub unsafe extern "C" fn ff_dict_lookup(
    dict: *const FfDict,
    path: *const c_char,
    out: *mut *mut c_char,
) -> FfStatus {
    guard(|| {
        out_ptr(out, "out")?;
        let dict = dict
            .as_ref()
            .ok_or_else(|| fail(FfStatus::NullArgument, "dict is null"))?;
        let path = read_str(path, "path")?;
        let node = dict
            .0
            .lookup(path)
            .ok_or_else(|| fail(FfStatus::NotFound, format!("no entry at {path:?}")))?;
        let text = match node.as_word() {
            Some(word) => word.to_string(),
            None => serialize_dictionary(node),
        };
        *out = into_c_string(text)?;
        Ok(())
    })
}

/// # Safety
/// `dict` is null or a handle from [`ff_dict_parse`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ff_dict_free(dict: *mut FfDict) {
    if !dict.is_null() {
        drop(Box::from_raw(dict));
    }
}

/// Classifies the output of one command into error records, returned as a
/// JSON array of `{severity, message, location}`.
/// A timed-out command has no exit code and `exit_code` is ignored.
///
/// # Safety
/// `log_text` and `command` are NUL-terminated strings; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn ff_parse_errors(
    log_text: *const c_char,
    command: *const c_char,
    exit_code: i32,
    timed_out: bool,
    out: *mut *mut c_char,
) -> FfStatus {
    guard(|| {
        out_ptr(out, "out")?;
        let text = read_str(log_text, "log_text")?;
        let command = read_str(command, "command")?;
        let logs = ExecutionLogs {
            entries: vec![LogEntry {
                command: command.to_string(),
                log_file: format!("log.{command}"),
                text: text.to_string(),
                exit_code: (!timed_out).then_some(exit_code),
                timed_out,
            }],
            wall_time_ms: 0,
        };
        let records = parse_errors(&logs);
        let json = serde_json::to_string(&records).map_err(|e| fail(FfStatus::Internal, e))?;
        *out = into_c_string(json)?;
        Ok(())
    })
}

/// Loads a knowledge base written by `foamflow build-kb`.
///
/// # Safety
/// `dir` is a NUL-terminated path; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn ff_kb_load(
    dir: *const c_char,
    out: *mut *mut FfKnowledgeBase,
) -> FfStatus {
    guard(|| {
        out_ptr(out, "out")?;
        let dir = read_str(dir, "dir")?;
        let kb = KnowledgeBase::load(std::path::Path::new(dir)).map_err(|e| match e {
            foamflow::kb::KbError::Io { .. } => fail(FfStatus::Io, e),
            foamflow::kb::KbError::MissingIndex(_) => fail(FfStatus::NotFound, e),
            other => fail(FfStatus::ParseError, other),
        })?;
        *out = Box::into_raw(Box::new(FfKnowledgeBase(kb)));
        Ok(())
    })
}

/// Number of records in one index; 0 for an index that was never built.
///
/// # Safety
/// `kb` is a live handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn ff_kb_count(
    kb: *const FfKnowledgeBase,
    kind: FfIndexKind,
    out: *mut usize,
) -> FfStatus {
    guard(|| {
        out_ptr(out, "out")?;
        let kb = kb
            .as_ref()
            .ok_or_else(|| fail(FfStatus::NullArgument, "kb is null"))?;
        *out =
            kb.0.counts()
                .get(&IndexKind::from(kind))
                .copied()
                .unwrap_or(0);
        Ok(())
    })
}

/// # Safety
/// `kb` is null or a handle from [`ff_kb_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ff_kb_free(kb: *mut FfKnowledgeBase) {
    if !kb.is_null() {
        drop(Box::from_raw(kb));
    }
}

fn server_failure(e: CliError) -> Failure {
    let status = match &e {
        CliError::MissingKb { .. } => FfStatus::NotFound,
        CliError::Server(McpError::StoreLocked(_) | McpError::AddressInUse(_)) => FfStatus::Locked,
        CliError::Server(McpError::Io { .. }) => FfStatus::Io,
        CliError::Runtime(_) | CliError::Server(_) => FfStatus::Internal,
        _ => FfStatus::Config,
    };
    fail(status, e)
}

/// Starts a tool server configured by TOML text in the `--config` file
/// format; null means defaults. The environment applies as for the CLI.
///
/// # Safety
/// `config_toml` is null or a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn ff_server_start(
    config_toml: *const c_char,
    out: *mut *mut FfServer,
) -> FfStatus {
    guard(|| {
        out_ptr(out, "out")?;
        let file = if config_toml.is_null() {
            FileConfig::default()
        } else {
            let text = read_str(config_toml, "config_toml")?;
            FileConfig::from_toml(text).map_err(|e| fail(FfStatus::Config, e))?
        };
        let env = |name: &str| std::env::var(name).ok();
        let config = CliConfig::resolve(FlagConfig::default(), &env, file)
            .map_err(|e| server_failure(e.into()))?;
        let services = services(&config).map_err(server_failure)?;
        let service_config = ServiceConfig {
            data_dir: config.data_dir.clone(),
            workers: config.workers,
            orchestrator: foamflow::cli::orchestrator_config(&config),
        };
        let service = McpService::start(service_config, services)
            .map_err(|e| server_failure(CliError::Server(e)))?;
        *out = Box::into_raw(Box::new(FfServer(service)));
        Ok(())
    })
}

/// Answers one JSON-RPC message. `*out` is null for a notification.
///
/// # Safety
/// `server` is a live handle; `message` is a NUL-terminated string; `out`
/// is writable.
#[no_mangle]
pub unsafe extern "C" fn ff_server_handle(
    server: *const FfServer,
    message: *const c_char,
    out: *mut *mut c_char,
) -> FfStatus {
    guard(|| {
        out_ptr(out, "out")?;
        *out = ptr::null_mut();
        let server = server
            .as_ref()
            .ok_or_else(|| fail(FfStatus::NullArgument, "server is null"))?;
        let message = read_str(message, "message")?;
        if let Some(reply) = handle_message(&server.0, message) {
            *out = into_c_string(reply)?;
        }
        Ok(())
    })
}

/// Stops the server after its running jobs finish and releases the store.
///
/// # Safety
/// `server` is null or a handle from [`ff_server_start`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ff_server_free(server: *mut FfServer) {
    if !server.is_null() {
        drop(Box::from_raw(server));
    }
}
