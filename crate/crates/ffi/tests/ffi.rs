use std::ffi::{c_char, c_void, CStr, CString};
use std::ptr;
use std::sync::Mutex;

use opaqueflow_ffi::*;

const LOGIN: &str = "app com.example.smartapp\nlabel Taint_UI\nallow Taint_UI -> NETWORK url http://appcloudserver.com\n";

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

unsafe fn take(p: *mut c_char) -> String {
    assert!(!p.is_null());
    let s = CStr::from_ptr(p).to_str().unwrap().to_string();
    of_string_free(p);
    s
}

fn last_error() -> String {
    let p = of_last_error_message();
    if p.is_null() {
        String::new()
    } else {
        unsafe { CStr::from_ptr(p).to_string_lossy().into_owned() }
    }
}

fn json_arg(s: &CString) -> OfArg {
    OfArg { kind: OfArgKind::Json, json: s.as_ptr(), handle: ptr::null() }
}

fn handle_arg(h: *const OfHandle) -> OfArg {
    OfArg { kind: OfArgKind::Handle, json: ptr::null(), handle: h }
}

unsafe fn runtime(manifest: &str) -> *mut OfRuntime {
    let mut rt = ptr::null_mut();
    assert_eq!(of_runtime_new(c(manifest).as_ptr(), &mut rt), OfStatus::Ok);
    rt
}

unsafe extern "C" fn read_field(ctx: *mut OfContext, args: *const c_char, _: *mut c_void) -> OfStatus {
    let args: serde_json::Value = serde_json::from_str(CStr::from_ptr(args).to_str().unwrap()).unwrap();
    let field = c(args[0].as_str().unwrap());
    let mut text = ptr::null_mut();
    let st = of_context_get_text(ctx, field.as_ptr(), &mut text);
    if st != OfStatus::Ok {
        return st;
    }
    let value = serde_json::Value::String(take(text)).to_string();
    of_context_set_result(ctx, c(&value).as_ptr())
}

/// Posts a plain body to `args[0]`; taints come from the handle argument.
unsafe extern "C" fn post_to(ctx: *mut OfContext, args: *const c_char, _: *mut c_void) -> OfStatus {
    let args: serde_json::Value = serde_json::from_str(CStr::from_ptr(args).to_str().unwrap()).unwrap();
    let url = c(args[0].as_str().unwrap());
    let body = c(&args[1].to_string());
    let payload = [json_arg(&body)];
    let mut taints = ptr::null_mut();
    assert_eq!(of_context_taints(ctx, &mut taints), OfStatus::Ok);
    take(taints);
    of_context_network_post(ctx, payload.as_ptr(), 1, url.as_ptr())
}

#[test]
fn manifest_check_and_disclose() {
    unsafe {
        assert_eq!(of_manifest_check(c(LOGIN).as_ptr()), OfStatus::Ok);
        assert_eq!(of_manifest_check(c("app a.b\nallow X -> SMS").as_ptr()), OfStatus::InvalidManifest);
        assert!(last_error().contains("X"));
        assert_eq!(of_manifest_check(ptr::null()), OfStatus::NullPointer);

        let mut out = ptr::null_mut();
        assert_eq!(of_manifest_disclose(c(LOGIN).as_ptr(), &mut out), OfStatus::Ok);
        assert_eq!(
            take(out),
            "flows for com.example.smartapp:\ncom.example.smartapp/Taint_UI -> NETWORK url http://appcloudserver.com:80/\n"
        );
    }
}

#[test]
fn fields_are_opaque_outside_qms() {
    unsafe {
        let rt = runtime(LOGIN);
        assert_eq!(of_runtime_register_field(rt, c("pw").as_ptr(), c("Taint_UI").as_ptr()), OfStatus::Ok);
        assert_eq!(
            of_runtime_register_field(rt, c("x").as_ptr(), c("Nope").as_ptr()),
            OfStatus::UndeclaredLabel
        );
        assert_eq!(
            of_runtime_register_field(rt, c("pw").as_ptr(), c("com.example.smartapp/Taint_UI").as_ptr()),
            OfStatus::DuplicateField
        );
        assert_eq!(of_runtime_set_value(rt, c("pw").as_ptr(), c("hunter2").as_ptr()), OfStatus::Ok);
        let mut out = ptr::null_mut();
        assert_eq!(of_runtime_get_text_untrusted(rt, c("pw").as_ptr(), &mut out), OfStatus::Ok);
        assert_eq!(take(out), "");
        assert_eq!(
            of_runtime_get_text_untrusted(rt, c("ghost").as_ptr(), &mut out),
            OfStatus::UnknownField
        );
        of_runtime_free(rt);
    }
}

#[test]
fn login_flow_through_callbacks() {
    unsafe {
        let rt = runtime(LOGIN);
        of_runtime_register_field(rt, c("pw").as_ptr(), c("Taint_UI").as_ptr());
        of_runtime_set_value(rt, c("pw").as_ptr(), c("hunter2").as_ptr());
        assert_eq!(of_runtime_register_qm(rt, c("read").as_ptr(), Some(read_field), ptr::null_mut()), OfStatus::Ok);
        assert_eq!(of_runtime_register_qm(rt, c("read").as_ptr(), Some(read_field), ptr::null_mut()), OfStatus::DuplicateQm);
        assert_eq!(of_runtime_register_qm(rt, c("post").as_ptr(), Some(post_to), ptr::null_mut()), OfStatus::Ok);

        let field = c("\"pw\"");
        let mut h = ptr::null_mut();
        assert_eq!(of_qm_call(rt, c("read").as_ptr(), [json_arg(&field)].as_ptr(), 1, &mut h), OfStatus::Ok);
        let mut taints = ptr::null_mut();
        assert_eq!(of_handle_taints(rt, h, &mut taints), OfStatus::Ok);
        assert_eq!(take(taints), "com.example.smartapp/Taint_UI");
        let mut id = ptr::null_mut();
        assert_eq!(of_handle_id(h, &mut id), OfStatus::Ok);
        assert_eq!(take(id).len(), 32);

        let good = c("\"http://appcloudserver.com/login\"");
        let bad = c("\"http://untrustedserver.com/\"");
        let mut out = ptr::null_mut();
        let args = [json_arg(&good), handle_arg(h)];
        assert_eq!(of_qm_call(rt, c("post").as_ptr(), args.as_ptr(), 2, &mut out), OfStatus::Ok);
        of_handle_free(out);
        let args = [json_arg(&bad), handle_arg(h)];
        assert_eq!(of_qm_call(rt, c("post").as_ptr(), args.as_ptr(), 2, &mut out), OfStatus::PolicyViolation);
        assert!(last_error().contains("untrustedserver.com"));

        let mut log = ptr::null_mut();
        assert_eq!(of_runtime_export_log(rt, &mut log), OfStatus::Ok);
        assert_eq!(
            take(log),
            "ALLOW NETWORK http://appcloudserver.com:80/login taints=com.example.smartapp/Taint_UI\n\
             DENY NETWORK http://untrustedserver.com:80/ taints=com.example.smartapp/Taint_UI\n"
        );
        of_handle_free(h);
        of_runtime_free(rt);
    }
}

static ESCAPED: Mutex<usize> = Mutex::new(0);

unsafe extern "C" fn stash(ctx: *mut OfContext, _: *const c_char, _: *mut c_void) -> OfStatus {
    *ESCAPED.lock().unwrap() = ctx as usize;
    OfStatus::Ok
}

#[test]
fn escaped_context_is_refused() {
    unsafe {
        let rt = runtime(LOGIN);
        of_runtime_register_field(rt, c("pw").as_ptr(), c("Taint_UI").as_ptr());
        of_runtime_register_qm(rt, c("stash").as_ptr(), Some(stash), ptr::null_mut());
        let mut h = ptr::null_mut();
        assert_eq!(of_qm_call(rt, c("stash").as_ptr(), ptr::null(), 0, &mut h), OfStatus::Ok);
        let ctx = *ESCAPED.lock().unwrap() as *mut OfContext;
        let mut out = ptr::null_mut();
        assert_eq!(of_context_get_text(ctx, c("pw").as_ptr(), &mut out), OfStatus::ContextEscaped);
        assert_eq!(of_context_declassify(ctx, h, &mut out), OfStatus::ContextEscaped);
        let body = c("1");
        assert_eq!(
            of_context_network_post(ctx, [json_arg(&body)].as_ptr(), 1, c("http://appcloudserver.com").as_ptr()),
            OfStatus::ContextEscaped
        );
        let mut log = ptr::null_mut();
        of_runtime_export_log(rt, &mut log);
        assert_eq!(take(log), "");
        of_handle_free(h);
        of_runtime_free(rt);
    }
}

unsafe extern "C" fn nested(ctx: *mut OfContext, _: *const c_char, user_data: *mut c_void) -> OfStatus {
    let field = c("\"pw\"");
    let mut inner = ptr::null_mut();
    let st = of_context_call(ctx, c("read").as_ptr(), [json_arg(&field)].as_ptr(), 1, &mut inner);
    if st != OfStatus::Ok {
        return st;
    }
    if !user_data.is_null() {
        let mut v = ptr::null_mut();
        let st = of_context_declassify(ctx, inner, &mut v);
        if st != OfStatus::Ok {
            return st;
        }
        take(v);
    }
    of_handle_free(inner);
    OfStatus::Ok
}

#[test]
fn nested_calls_taint_only_when_declassified() {
    unsafe {
        let rt = runtime(LOGIN);
        of_runtime_register_field(rt, c("pw").as_ptr(), c("Taint_UI").as_ptr());
        of_runtime_register_qm(rt, c("read").as_ptr(), Some(read_field), ptr::null_mut());
        of_runtime_register_qm(rt, c("hold").as_ptr(), Some(nested), ptr::null_mut());
        let mut marker = 1u8;
        of_runtime_register_qm(rt, c("open").as_ptr(), Some(nested), (&mut marker as *mut u8).cast());

        for (qm, expected) in [("hold", ""), ("open", "com.example.smartapp/Taint_UI")] {
            let mut h = ptr::null_mut();
            assert_eq!(of_qm_call(rt, c(qm).as_ptr(), ptr::null(), 0, &mut h), OfStatus::Ok, "{}", last_error());
            let mut t = ptr::null_mut();
            of_handle_taints(rt, h, &mut t);
            assert_eq!(take(t), expected, "{qm}");
            of_handle_free(h);
        }
        of_runtime_free(rt);
    }
}

unsafe extern "C" fn failing(_: *mut OfContext, _: *const c_char, _: *mut c_void) -> OfStatus {
    OfStatus::InvalidJson
}

#[test]
fn callback_failures_map_to_status() {
    unsafe {
        let rt = runtime(LOGIN);
        of_runtime_register_qm(rt, c("fail").as_ptr(), Some(failing), ptr::null_mut());
        let mut h = ptr::null_mut();
        assert_eq!(of_qm_call(rt, c("fail").as_ptr(), ptr::null(), 0, &mut h), OfStatus::QmFailed);
        assert_eq!(of_qm_call(rt, c("missing").as_ptr(), ptr::null(), 0, &mut h), OfStatus::UnknownQm);
        let bad = c("{not json");
        assert_eq!(of_qm_call(rt, c("fail").as_ptr(), [json_arg(&bad)].as_ptr(), 1, &mut h), OfStatus::InvalidJson);
        assert_eq!(of_runtime_register_qm(rt, c("x").as_ptr(), None, ptr::null_mut()), OfStatus::NullPointer);
        of_runtime_free(rt);
    }
}

#[test]
fn builtin_scenarios_run() {
    unsafe {
        for name in ["login-ok", "login-exfiltration", "malicious-library"] {
            let mut out = ptr::null_mut();
            assert_eq!(of_scenario_run_builtin(c(name).as_ptr(), &mut out), OfStatus::Ok, "{name}");
            assert!(take(out).ends_with("result: pass\n"));
        }
        let mut out = ptr::null_mut();
        assert_eq!(of_scenario_run_builtin(c("nope").as_ptr(), &mut out), OfStatus::Io);
    }
}

#[test]
fn builtin_qms_are_available() {
    unsafe {
        let rt = runtime(LOGIN);
        assert_eq!(of_runtime_register_builtin_qms(rt), OfStatus::Ok);
        of_runtime_register_field(rt, c("email").as_ptr(), c("Taint_UI").as_ptr());
        let field = c("\"email\"");
        let mut h = ptr::null_mut();
        assert_eq!(
            of_qm_call(rt, c("QM_getUIValue").as_ptr(), [json_arg(&field)].as_ptr(), 1, &mut h),
            OfStatus::Ok
        );
        of_handle_free(h);
        of_runtime_free(rt);
    }
}
