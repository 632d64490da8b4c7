//! C ABI over the opaqueflow runtime.
//!
//! Conventions:
//! - Every function returns an [`OfStatus`]; on failure a message is
//!   available from [`of_last_error_message`] on the same thread.
//! - Strings passed in are NUL-terminated UTF-8. Strings handed out are
//!   owned by the caller and released with [`of_string_free`].
//! - `OfRuntime` and `OfHandle` objects are released with their `_free`
//!   function. `OfContext` pointers are only valid inside the QM callback
//!   that received them; any later use fails with
//!   `OF_STATUS_CONTEXT_ESCAPED`.
//! - Panics never cross the boundary; they surface as `OF_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, c_void, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::sync::atomic::{AtomicUsize, Ordering};

use opaqueflow::cli::{self, TransportChoice};
use opaqueflow::policy::ManifestError;
use opaqueflow::{
    disclosure_report, parse_manifest, Error, OpaqueHandle, QmArg, Runtime, SandboxContext,
    TaintLabel,
};
use serde_json::Value;

/// Result codes shared by every exported function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidJson = 3,
    InvalidManifest = 4,
    UnknownHandle = 5,
    UnknownQm = 6,
    DuplicateQm = 7,
    QmPanicked = 8,
    QmFailed = 9,
    ContextEscaped = 10,
    DuplicateField = 11,
    UnknownField = 12,
    UndeclaredLabel = 13,
    InvalidUrl = 14,
    InvalidDestination = 15,
    PolicyViolation = 16,
    Io = 17,
    ScenarioFailed = 18,
    Panic = 19,
}

/// A runtime: manifest, QM registry, sensitive fields, handle table and
/// attempt log.
pub struct OfRuntime {
    rt: Runtime,
}

/// Opaque reference to a QM result. Its payload is only readable through
/// `of_context_declassify`.
pub struct OfHandle {
    handle: OpaqueHandle,
}

/// Sandbox context of a running QM callback.
pub struct OfContext {
    _private: [u8; 0],
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OfArgKind {
    /// `json` holds a JSON document.
    Json = 0,
    /// `handle` refers to an `OfHandle`.
    Handle = 1,
}

/// One QM argument or sink payload element.
#[repr(C)]
pub struct OfArg {
    pub kind: OfArgKind,
    pub json: *const c_char,
    pub handle: *const OfHandle,
}

/// QM body. `args_json` is a JSON array of the plain argument values
/// (handle arguments appear as their payloads). Set the result with
/// `of_context_set_result`; returning anything but `OF_STATUS_OK` fails the
/// call. May be invoked from any thread that calls into the runtime.
pub type OfQmCallback = Option<
    unsafe extern "C" fn(ctx: *mut OfContext, args_json: *const c_char, user_data: *mut c_void) -> OfStatus,
>;

struct FfiError {
    status: OfStatus,
    message: String,
}

impl FfiError {
    fn new(status: OfStatus, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }
}

fn status_of(e: &Error) -> OfStatus {
    match e {
        Error::HandleUnknown(_) => OfStatus::UnknownHandle,
        Error::UnknownQm(_) => OfStatus::UnknownQm,
        Error::DuplicateQm(_) => OfStatus::DuplicateQm,
        Error::QmPanicked { .. } => OfStatus::QmPanicked,
        Error::QmFailed(_) => OfStatus::QmFailed,
        Error::ContextEscaped => OfStatus::ContextEscaped,
        Error::DuplicateField(_) => OfStatus::DuplicateField,
        Error::UnknownField(_) => OfStatus::UnknownField,
        Error::UndeclaredLabel(_) => OfStatus::UndeclaredLabel,
        Error::Url(_) => OfStatus::InvalidUrl,
        Error::InvalidDestination(_) => OfStatus::InvalidDestination,
        Error::PolicyViolation { .. } => OfStatus::PolicyViolation,
    }
}

impl From<Error> for FfiError {
    fn from(e: Error) -> Self {
        Self::new(status_of(&e), e.to_string())
    }
}

impl From<ManifestError> for FfiError {
    fn from(e: ManifestError) -> Self {
        Self::new(OfStatus::InvalidManifest, e.to_string())
    }
}

type FfiResult<T> = Result<T, FfiError>;

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
    /// Contexts of QM callbacks currently running on this thread, keyed by
    /// the token handed to C.
    static LIVE: RefCell<Vec<(usize, LiveContext)>> = const { RefCell::new(Vec::new()) };
}

struct LiveContext {
    ctx: SandboxContext,
    result: Option<Value>,
    error: Option<Error>,
}

static NEXT_TOKEN: AtomicUsize = AtomicUsize::new(1);

fn set_last_error(message: &str) {
    let c = CString::new(message.replace('\0', "\\0")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> FfiResult<()>) -> OfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            OfStatus::Ok
        }
        Ok(Err(e)) => {
            set_last_error(&e.message);
            e.status
        }
        Err(_) => {
            set_last_error("panic inside opaqueflow");
            OfStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> FfiResult<&'a str> {
    if p.is_null() {
        return Err(FfiError::new(OfStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| FfiError::new(OfStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> FfiResult<&'a T> {
    p.as_ref()
        .ok_or_else(|| FfiError::new(OfStatus::NullPointer, format!("{what} is null")))
}

fn out_ptr<T>(out: *mut T) -> FfiResult<()> {
    if out.is_null() {
        Err(FfiError::new(OfStatus::NullPointer, "output pointer is null"))
    } else {
        Ok(())
    }
}

unsafe fn write_string(out: *mut *mut c_char, s: &str) -> FfiResult<()> {
    out_ptr(out)?;
    let c = CString::new(s).map_err(|_| FfiError::new(OfStatus::InvalidUtf8, "string contains NUL"))?;
    *out = c.into_raw();
    Ok(())
}

unsafe fn write_handle(out: *mut *mut OfHandle, handle: OpaqueHandle) {
    *out = Box::into_raw(Box::new(OfHandle { handle }));
}

fn parse_json(text: &str) -> FfiResult<Value> {
    serde_json::from_str(text).map_err(|e| FfiError::new(OfStatus::InvalidJson, e.to_string()))
}

unsafe fn qm_args(args: *const OfArg, len: usize) -> FfiResult<Vec<QmArg>> {
    if len == 0 {
        return Ok(Vec::new());
    }
    if args.is_null() {
        return Err(FfiError::new(OfStatus::NullPointer, "argument array is null"));
    }
    std::slice::from_raw_parts(args, len)
        .iter()
        .enumerate()
        .map(|(i, a)| match a.kind {
            OfArgKind::Json => Ok(QmArg::Plain(parse_json(str_arg(a.json, &format!("argument {i}"))?)?)),
            OfArgKind::Handle => Ok(QmArg::Handle(ref_arg(a.handle, &format!("argument {i}"))?.handle.clone())),
        })
        .collect()
}

fn with_context<T>(token: *mut OfContext, f: impl FnOnce(&mut LiveContext) -> opaqueflow::Result<T>) -> FfiResult<T> {
    let token = token as usize;
    LIVE.with(|live| {
        let mut live = live.borrow_mut();
        let Some((_, slot)) = live.iter_mut().find(|(t, _)| *t == token) else {
            return Err(Error::ContextEscaped.into());
        };
        f(slot).map_err(|e| {
            slot.error = Some(e.clone());
            e.into()
        })
    })
}

/// Message for the most recent failure on this thread, or null. Valid until
/// the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn of_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// # Safety
/// `s` must be null or a string returned by this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn of_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Validates manifest text.
///
/// # Safety
/// `text` must be a valid C string.
#[no_mangle]
pub unsafe extern "C" fn of_manifest_check(text: *const c_char) -> OfStatus {
    guard(|| {
        parse_manifest(str_arg(text, "manifest")?)?;
        Ok(())
    })
}

/// Renders the disclosure report of a manifest into `*out`.
///
/// # Safety
/// `text` must be a valid C string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn of_manifest_disclose(text: *const c_char, out: *mut *mut c_char) -> OfStatus {
    guard(|| {
        let m = parse_manifest(str_arg(text, "manifest")?)?;
        write_string(out, &disclosure_report(&m))
    })
}

/// Creates a runtime for the given manifest with a recording transport.
///
/// # Safety
/// `manifest` must be a valid C string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn of_runtime_new(manifest: *const c_char, out: *mut *mut OfRuntime) -> OfStatus {
    guard(|| {
        out_ptr(out)?;
        let m = parse_manifest(str_arg(manifest, "manifest")?)?;
        *out = Box::into_raw(Box::new(OfRuntime { rt: Runtime::new(m) }));
        Ok(())
    })
}

/// # Safety
/// `rt` must be null or a runtime from `of_runtime_new`, freed once.
#[no_mangle]
pub unsafe extern "C" fn of_runtime_free(rt: *mut OfRuntime) {
    if !rt.is_null() {
        drop(Box::from_raw(rt));
    }
}

/// Registers a sensitive field. `label` is a declared label name, either
/// bare (`Taint_UI`) or qualified (`com.example.app/Taint_UI`).
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn of_runtime_register_field(
    rt: *const OfRuntime,
    field_id: *const c_char,
    label: *const c_char,
) -> OfStatus {
    guard(|| {
        let rt = &ref_arg(rt, "runtime")?.rt;
        let field = str_arg(field_id, "field id")?;
        let label = str_arg(label, "label")?;
        let resolved = if label.contains('/') {
            label
                .parse::<TaintLabel>()
                .map_err(|e| FfiError::new(OfStatus::UndeclaredLabel, e.to_string()))?
        } else {
            rt.manifest().label(label).cloned().ok_or_else(|| {
                FfiError::new(OfStatus::UndeclaredLabel, format!("label {label:?} is not declared"))
            })?
        };
        rt.store().register_field(field, resolved)?;
        Ok(())
    })
}

/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn of_runtime_set_value(
    rt: *const OfRuntime,
    field_id: *const c_char,
    value: *const c_char,
) -> OfStatus {
    guard(|| {
        let rt = &ref_arg(rt, "runtime")?.rt;
        rt.store()
            .set_value(str_arg(field_id, "field id")?, str_arg(value, "value")?)?;
        Ok(())
    })
}

/// Read from outside any QM; always yields an empty string.
///
/// # Safety
/// Pointers must be valid and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn of_runtime_get_text_untrusted(
    rt: *const OfRuntime,
    field_id: *const c_char,
    out: *mut *mut c_char,
) -> OfStatus {
    guard(|| {
        let rt = &ref_arg(rt, "runtime")?.rt;
        let text = rt.store().get_text_untrusted(str_arg(field_id, "field id")?)?;
        write_string(out, &text)
    })
}

struct UserData(*mut c_void);

// The caller promises the callback and its user data tolerate use from
// whichever threads drive the runtime.
unsafe impl Send for UserData {}
unsafe impl Sync for UserData {}

/// Registers a QM implemented by `callback`.
///
/// # Safety
/// Pointers must be valid; `user_data` must outlive the runtime.
#[no_mangle]
pub unsafe extern "C" fn of_runtime_register_qm(
    rt: *const OfRuntime,
    name: *const c_char,
    callback: OfQmCallback,
    user_data: *mut c_void,
) -> OfStatus {
    guard(|| {
        let rt = &ref_arg(rt, "runtime")?.rt;
        let name = str_arg(name, "QM name")?;
        let cb = callback.ok_or_else(|| FfiError::new(OfStatus::NullPointer, "callback is null"))?;
        let data = UserData(user_data);
        rt.register_qm(name, move |ctx, args| {
            let data = &data;
            let args_json = CString::new(Value::Array(args.to_vec()).to_string())
                .expect("serialized JSON has no NUL");
            let token = NEXT_TOKEN.fetch_add(1, Ordering::Relaxed);
            LIVE.with(|l| {
                l.borrow_mut().push((
                    token,
                    LiveContext {
                        ctx: ctx.clone(),
                        result: None,
                        error: None,
                    },
                ))
            });
            let status = cb(token as *mut OfContext, args_json.as_ptr(), data.0);
            let slot = LIVE.with(|l| {
                let mut l = l.borrow_mut();
                let idx = l.iter().rposition(|(t, _)| *t == token).expect("context slot present");
                l.remove(idx).1
            });
            match (status, slot.error) {
                (OfStatus::Ok, _) => Ok(slot.result.unwrap_or(Value::Null)),
                (status, Some(e)) if status_of(&e) == status => Err(e),
                (status, _) => Err(Error::QmFailed(format!("callback returned {status:?}"))),
            }
        })?;
        Ok(())
    })
}

/// Registers the demo QMs used by the built-in scenarios.
///
/// # Safety
/// `rt` must be valid.
#[no_mangle]
pub unsafe extern "C" fn of_runtime_register_builtin_qms(rt: *const OfRuntime) -> OfStatus {
    guard(|| {
        opaqueflow::scenario::register_builtin_qms(&ref_arg(rt, "runtime")?.rt)?;
        Ok(())
    })
}

/// Runs QM `name` with `args`; on success `*out` receives the result handle.
///
/// # Safety
/// Pointers must be valid; `args` must hold `len` elements.
#[no_mangle]
pub unsafe extern "C" fn of_qm_call(
    rt: *const OfRuntime,
    name: *const c_char,
    args: *const OfArg,
    len: usize,
    out: *mut *mut OfHandle,
) -> OfStatus {
    guard(|| {
        out_ptr(out)?;
        let rt = &ref_arg(rt, "runtime")?.rt;
        let h = rt.qm_call(str_arg(name, "QM name")?, &qm_args(args, len)?)?;
        write_handle(out, h);
        Ok(())
    })
}

/// Comma-separated taint labels of a handle.
///
/// # Safety
/// Pointers must be valid and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn of_handle_taints(
    rt: *const OfRuntime,
    handle: *const OfHandle,
    out: *mut *mut c_char,
) -> OfStatus {
    guard(|| {
        let rt = &ref_arg(rt, "runtime")?.rt;
        let taints = rt.handle_taints(&ref_arg(handle, "handle")?.handle)?;
        write_string(out, &taints.to_comma_list())
    })
}

/// Hex id of a handle.
///
/// # Safety
/// Pointers must be valid and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn of_handle_id(handle: *const OfHandle, out: *mut *mut c_char) -> OfStatus {
    guard(|| write_string(out, &ref_arg(handle, "handle")?.handle.id().to_hex()))
}

/// # Safety
/// `handle` must be null or a handle from this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn of_handle_free(handle: *mut OfHandle) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Sets the JSON result of the running QM.
///
/// # Safety
/// `json` must be a valid C string.
#[no_mangle]
pub unsafe extern "C" fn of_context_set_result(ctx: *mut OfContext, json: *const c_char) -> OfStatus {
    guard(|| {
        let value = parse_json(str_arg(json, "result")?)?;
        with_context(ctx, |slot| {
            slot.ctx.acquired_taints()?;
            slot.result = Some(value);
            Ok(())
        })
    })
}

/// Taints acquired so far by the running QM, comma-separated.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn of_context_taints(ctx: *mut OfContext, out: *mut *mut c_char) -> OfStatus {
    guard(|| {
        out_ptr(out)?;
        let t = with_context(ctx, |slot| slot.ctx.acquired_taints())?;
        write_string(out, &t.to_comma_list())
    })
}

/// Opens a handle inside the QM; `*out` receives its payload as JSON.
///
/// # Safety
/// Pointers must be valid and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn of_context_declassify(
    ctx: *mut OfContext,
    handle: *const OfHandle,
    out: *mut *mut c_char,
) -> OfStatus {
    guard(|| {
        out_ptr(out)?;
        let h = ref_arg(handle, "handle")?.handle.clone();
        let v = with_context(ctx, |slot| slot.ctx.declassify(&h))?;
        write_string(out, &v.to_string())
    })
}

/// Trusted read of a sensitive field.
///
/// # Safety
/// Pointers must be valid and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn of_context_get_text(
    ctx: *mut OfContext,
    field_id: *const c_char,
    out: *mut *mut c_char,
) -> OfStatus {
    guard(|| {
        out_ptr(out)?;
        let field = str_arg(field_id, "field id")?;
        let text = with_context(ctx, |slot| slot.ctx.get_text(field))?;
        write_string(out, &text)
    })
}

/// Mediated NETWORK post of `payload` to `url`.
///
/// # Safety
/// Pointers must be valid; `payload` must hold `len` elements.
#[no_mangle]
pub unsafe extern "C" fn of_context_network_post(
    ctx: *mut OfContext,
    payload: *const OfArg,
    len: usize,
    url: *const c_char,
) -> OfStatus {
    guard(|| {
        let args = qm_args(payload, len)?;
        let url = str_arg(url, "url")?;
        with_context(ctx, |slot| slot.ctx.network_post(&args, url))?;
        Ok(())
    })
}

/// Mediated SMS send of `payload` to `number`.
///
/// # Safety
/// Pointers must be valid; `payload` must hold `len` elements.
#[no_mangle]
pub unsafe extern "C" fn of_context_sms_send(
    ctx: *mut OfContext,
    payload: *const OfArg,
    len: usize,
    number: *const c_char,
) -> OfStatus {
    guard(|| {
        let args = qm_args(payload, len)?;
        let number = str_arg(number, "number")?;
        with_context(ctx, |slot| slot.ctx.sms_send(&args, number))?;
        Ok(())
    })
}

/// Nested QM call from inside a QM.
///
/// # Safety
/// Pointers must be valid; `args` must hold `len` elements.
#[no_mangle]
pub unsafe extern "C" fn of_context_call(
    ctx: *mut OfContext,
    name: *const c_char,
    args: *const OfArg,
    len: usize,
    out: *mut *mut OfHandle,
) -> OfStatus {
    guard(|| {
        out_ptr(out)?;
        let name = str_arg(name, "QM name")?;
        let args = qm_args(args, len)?;
        // The slot borrow must be released before the nested callback runs.
        let inner = with_context(ctx, |slot| Ok(slot.ctx.clone()))?;
        let h = inner.call(name, &args).map_err(|e| {
            let _ = with_context(ctx, |_| Err::<(), _>(e.clone()));
            FfiError::from(e)
        })?;
        write_handle(out, h);
        Ok(())
    })
}

/// Attempt log export, one `ALLOW|DENY <SINK> <dest> taints=<labels>` line
/// per attempt.
///
/// # Safety
/// Pointers must be valid and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn of_runtime_export_log(rt: *const OfRuntime, out: *mut *mut c_char) -> OfStatus {
    guard(|| write_string(out, &ref_arg(rt, "runtime")?.rt.export_log()))
}

/// Runs a built-in scenario with the recording transport. `*out` receives
/// the report. Returns `OF_STATUS_SCENARIO_FAILED` if an expectation fails.
///
/// # Safety
/// Pointers must be valid and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn of_scenario_run_builtin(name: *const c_char, out: *mut *mut c_char) -> OfStatus {
    guard(|| {
        out_ptr(out)?;
        let name = str_arg(name, "scenario name")?;
        if opaqueflow::scenario::builtin_text(name).is_none() {
            return Err(FfiError::new(OfStatus::Io, format!("no built-in scenario {name:?}")));
        }
        let (mut report, mut errors) = (Vec::new(), Vec::new());
        let code = cli::cmd_run(name, None, TransportChoice::Fake, &mut report, &mut errors);
        write_string(out, &String::from_utf8_lossy(&report))?;
        match code {
            cli::EXIT_OK => Ok(()),
            cli::EXIT_EXPECTATION => Err(FfiError::new(OfStatus::ScenarioFailed, "scenario expectations failed")),
            _ => Err(FfiError::new(OfStatus::Io, String::from_utf8_lossy(&errors).trim().to_string())),
        }
    })
}
