//! Quarantine modules and the sandbox contexts they run in.
//!
//! A quarantine module (QM) is a plain Rust closure registered by name. It
//! only ever runs through [`Runtime::qm_call`](crate::Runtime::qm_call),
//! which hands it a fresh [`SandboxContext`]. The context is the capability
//! for everything privileged: declassifying handles, reading sensitive
//! fields, and reaching sinks. It is live only while its QM runs, on the
//! calling thread, and only while no nested QM call is in progress.
//!
//! Sink deliveries requested inside a QM are staged on the context and
//! handed to the transport when the outermost QM call returns successfully.
//! A QM that fails or panics therefore leaves the transport untouched.

use std::cell::RefCell;
use std::collections::HashMap;
use std::panic::{self, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use serde_json::Value;

use crate::error::{Error, Result};
use crate::labels::{HandleId, OpaqueHandle, TaintSet};
use crate::runtime::Shared;
use crate::trusted_api::{self, DeliveryStatus, SinkAttempt};

/// Body of a quarantine module. Receives the declassified arguments in
/// call order and returns the value to be wrapped in a fresh handle.
pub type QmFn = Arc<dyn Fn(&SandboxContext, &[Value]) -> Result<Value> + Send + Sync>;

/// Positional QM argument.
#[derive(Debug, Clone, PartialEq)]
pub enum QmArg {
    Plain(Value),
    Handle(OpaqueHandle),
}

impl QmArg {
    pub fn plain(v: impl Into<Value>) -> Self {
        Self::Plain(v.into())
    }
}

impl From<OpaqueHandle> for QmArg {
    fn from(h: OpaqueHandle) -> Self {
        Self::Handle(h)
    }
}

impl From<&OpaqueHandle> for QmArg {
    fn from(h: &OpaqueHandle) -> Self {
        Self::Handle(h.clone())
    }
}

/// Append-only name -> QM table.
#[derive(Default)]
pub struct QmRegistry {
    entries: RwLock<HashMap<String, QmFn>>,
}

impl QmRegistry {
    pub fn register(&self, name: &str, f: QmFn) -> Result<()> {
        let mut entries = self.entries.write().expect("qm registry poisoned");
        if entries.contains_key(name) {
            return Err(Error::DuplicateQm(name.to_string()));
        }
        entries.insert(name.to_string(), f);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<QmFn> {
        self.entries
            .read()
            .expect("qm registry poisoned")
            .get(name)
            .cloned()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries
            .read()
            .expect("qm registry poisoned")
            .contains_key(name)
    }

    pub fn names(&self) -> Vec<String> {
        let mut names: Vec<_> = self
            .entries
            .read()
            .expect("qm registry poisoned")
            .keys()
            .cloned()
            .collect();
        names.sort();
        names
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("qm registry poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub(crate) struct StagedAttempt {
    pub attempt: SinkAttempt,
    pub payload: Option<Vec<u8>>,
}

pub(crate) struct ContextState {
    id: HandleId,
    qm: String,
    pub(crate) runtime: Arc<Shared>,
    live: AtomicBool,
    acquired: Mutex<TaintSet>,
    staged: Mutex<Vec<StagedAttempt>>,
}

thread_local! {
    static ACTIVE: RefCell<Vec<Arc<ContextState>>> = const { RefCell::new(Vec::new()) };
}

/// Execution capability of one QM call.
///
/// Cloning is allowed, but a clone that outlives the call (or is used from
/// another thread, or from inside a nested QM call) fails every operation
/// with [`Error::ContextEscaped`].
#[derive(Clone)]
pub struct SandboxContext {
    pub(crate) state: Arc<ContextState>,
}

impl std::fmt::Debug for SandboxContext {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SandboxContext")
            .field("id", &self.state.id)
            .field("qm", &self.state.qm)
            .field("live", &self.state.live.load(Ordering::SeqCst))
            .finish()
    }
}

impl SandboxContext {
    pub fn id(&self) -> HandleId {
        self.state.id
    }

    pub fn qm_name(&self) -> &str {
        &self.state.qm
    }

    /// True while this is the innermost running QM context on this thread.
    pub fn is_live(&self) -> bool {
        self.state.live.load(Ordering::SeqCst)
            && ACTIVE.with(|a| {
                a.borrow()
                    .last()
                    .is_some_and(|top| Arc::ptr_eq(top, &self.state))
            })
    }

    pub(crate) fn ensure_live(&self) -> Result<()> {
        if self.is_live() {
            Ok(())
        } else {
            Err(Error::ContextEscaped)
        }
    }

    pub(crate) fn runtime(&self) -> &Arc<Shared> {
        &self.state.runtime
    }

    pub(crate) fn acquire(&self, taints: &TaintSet) {
        self.state
            .acquired
            .lock()
            .expect("context poisoned")
            .extend_from(taints);
    }

    pub(crate) fn stage(&self, staged: StagedAttempt) {
        self.state
            .staged
            .lock()
            .expect("context poisoned")
            .push(staged);
    }

    /// Taints acquired so far by this call.
    pub fn acquired_taints(&self) -> Result<TaintSet> {
        self.ensure_live()?;
        Ok(self.snapshot_taints())
    }

    pub(crate) fn snapshot_taints(&self) -> TaintSet {
        self.state.acquired.lock().expect("context poisoned").clone()
    }

    /// Returns the handle's payload and adds its taints to this context.
    pub fn declassify(&self, handle: &OpaqueHandle) -> Result<Value> {
        self.ensure_live()?;
        let (taints, value) = self.state.runtime.lookup_handle(handle.id())?;
        self.acquire(&taints);
        Ok(value)
    }

    /// Trusted read of a sensitive field; taints this context with the
    /// field's label.
    pub fn get_text(&self, field_id: &str) -> Result<String> {
        self.state.runtime.store.trusted_get_text(self, field_id)
    }

    pub fn network_post(&self, payload: &[QmArg], url: &str) -> Result<SinkAttempt> {
        trusted_api::network_post(self, payload, url)
    }

    pub fn sms_send(&self, payload: &[QmArg], number: &str) -> Result<SinkAttempt> {
        trusted_api::sms_send(self, payload, number)
    }

    /// Nested QM call. The result contributes taints to this context only
    /// once it is declassified here.
    pub fn call(&self, name: &str, args: &[QmArg]) -> Result<OpaqueHandle> {
        self.ensure_live()?;
        qm_call(&self.state.runtime, name, args)
    }
}

fn panic_message(payload: &(dyn std::any::Any + Send)) -> String {
    if let Some(s) = payload.downcast_ref::<&str>() {
        (*s).to_string()
    } else if let Some(s) = payload.downcast_ref::<String>() {
        s.clone()
    } else {
        "non-string panic payload".to_string()
    }
}

pub(crate) fn qm_call(shared: &Arc<Shared>, name: &str, args: &[QmArg]) -> Result<OpaqueHandle> {
    let body = shared
        .registry
        .get(name)
        .ok_or_else(|| Error::UnknownQm(name.to_string()))?;

    let mut seed = TaintSet::new();
    let mut values = Vec::with_capacity(args.len());
    for arg in args {
        match arg {
            QmArg::Plain(v) => values.push(v.clone()),
            QmArg::Handle(h) => {
                let (taints, value) = shared.lookup_handle(h.id())?;
                seed.extend_from(&taints);
                values.push(value);
            }
        }
    }

    let state = Arc::new(ContextState {
        id: HandleId::random(),
        qm: name.to_string(),
        runtime: Arc::clone(shared),
        live: AtomicBool::new(true),
        acquired: Mutex::new(seed),
        staged: Mutex::new(Vec::new()),
    });
    ACTIVE.with(|a| a.borrow_mut().push(Arc::clone(&state)));
    let ctx = SandboxContext {
        state: Arc::clone(&state),
    };

    let outcome = panic::catch_unwind(AssertUnwindSafe(|| body(&ctx, &values)));
    drop(values);

    let parent = ACTIVE.with(|a| {
        let mut a = a.borrow_mut();
        let popped = a.pop();
        debug_assert!(popped.is_some_and(|p| Arc::ptr_eq(&p, &state)));
        a.last()
            .filter(|p| Arc::ptr_eq(&p.runtime, shared))
            .cloned()
    });
    state.live.store(false, Ordering::SeqCst);
    let staged = std::mem::take(&mut *state.staged.lock().expect("context poisoned"));

    let result = match outcome {
        Ok(Ok(value)) => {
            let taints = state.acquired.lock().expect("context poisoned").clone();
            Ok(shared.insert_handle(taints, value))
        }
        Ok(Err(e)) => Err(e),
        Err(payload) => Err(Error::QmPanicked {
            qm: name.to_string(),
            message: panic_message(payload.as_ref()),
        }),
    };

    let mut staged = staged;
    if result.is_err() {
        for s in &mut staged {
            if s.attempt.status == DeliveryStatus::Pending {
                s.attempt.status = DeliveryStatus::Aborted;
                s.payload = None;
            }
        }
    }
    match parent {
        Some(parent) => parent
            .staged
            .lock()
            .expect("context poisoned")
            .extend(staged),
        None => shared.commit(staged),
    }

    result
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels::TaintLabel;
    use crate::policy::parse_manifest;
    use crate::Runtime;
    use serde_json::json;

    fn runtime() -> Runtime {
        let m = parse_manifest("app a.b\nlabel X\nlabel Y\nallow X -> SMS").unwrap();
        let rt = Runtime::new(m);
        let x = TaintLabel::new("a.b", "X").unwrap();
        let y = TaintLabel::new("a.b", "Y").unwrap();
        rt.store().register_field("fx", x).unwrap();
        rt.store().register_field("fy", y).unwrap();
        rt.register_qm("read", |ctx, args| {
            Ok(ctx.get_text(args[0].as_str().unwrap_or_default())?.into())
        })
        .unwrap();
        rt.register_qm("concat", |_ctx, args| {
            Ok(args
                .iter()
                .map(|v| v.as_str().unwrap_or_default())
                .collect::<String>()
                .into())
        })
        .unwrap();
        rt
    }

    fn x() -> TaintLabel {
        TaintLabel::new("a.b", "X").unwrap()
    }

    fn y() -> TaintLabel {
        TaintLabel::new("a.b", "Y").unwrap()
    }

    #[test]
    fn duplicate_registration() {
        let rt = runtime();
        assert_eq!(
            rt.register_qm("read", |_, _| Ok(Value::Null)),
            Err(Error::DuplicateQm("read".into()))
        );
    }

    #[test]
    fn bulk_registration_dispatches() {
        let rt = runtime();
        for i in 0..100 {
            rt.register_qm(&format!("qm{i}"), move |_, _| Ok(json!(i))).unwrap();
        }
        assert_eq!(rt.registry().len(), 102);
        for i in 0..100 {
            let h = rt.qm_call(&format!("qm{i}"), &[]).unwrap();
            assert_eq!(rt.peek_payload_for_tests(&h), Some(json!(i)));
        }
    }

    #[test]
    fn unknown_qm_and_handle() {
        let rt = runtime();
        assert_eq!(rt.qm_call("nope", &[]), Err(Error::UnknownQm("nope".into())));
        let other = runtime();
        let foreign = other.qm_call("concat", &[]).unwrap();
        assert_eq!(
            rt.qm_call("concat", &[QmArg::Handle(foreign.clone())]),
            Err(Error::HandleUnknown(foreign.id()))
        );
        assert_eq!(
            rt.handle_taints(&foreign),
            Err(Error::HandleUnknown(foreign.id()))
        );
    }

    #[test]
    fn untainted_call() {
        let rt = runtime();
        let h = rt.qm_call("concat", &[QmArg::plain("a")]).unwrap();
        assert!(rt.handle_taints(&h).unwrap().is_empty());
    }

    #[test]
    fn handle_args_union() {
        let rt = runtime();
        let hx = rt.qm_call("read", &[QmArg::plain("fx")]).unwrap();
        let hy = rt.qm_call("read", &[QmArg::plain("fy")]).unwrap();
        let both = rt.qm_call("concat", &[hx.into(), hy.into()]).unwrap();
        let expected: TaintSet = [x(), y()].into_iter().collect();
        assert_eq!(rt.handle_taints(&both).unwrap(), expected);
        assert_eq!(both.taints(), &expected);
    }

    #[test]
    fn declassify_inside_and_twice() {
        let rt = runtime();
        rt.store().set_value("fx", "secret").unwrap();
        let hx = rt.qm_call("read", &[QmArg::plain("fx")]).unwrap();
        let captured = hx.clone();
        rt.register_qm("twice", move |ctx, _| {
            let a = ctx.declassify(&captured)?;
            let after_first = ctx.acquired_taints()?;
            let b = ctx.declassify(&captured)?;
            assert_eq!(a, b);
            assert_eq!(ctx.acquired_taints()?, after_first);
            Ok(a)
        })
        .unwrap();
        let h = rt.qm_call("twice", &[]).unwrap();
        assert_eq!(rt.handle_taints(&h).unwrap(), TaintSet::singleton(x()));
    }

    #[test]
    fn escaped_context_fails_everything() {
        let rt = runtime();
        let hx = rt.qm_call("read", &[QmArg::plain("fx")]).unwrap();
        let slot: Arc<Mutex<Option<SandboxContext>>> = Arc::default();
        let leak = Arc::clone(&slot);
        rt.register_qm("leak", move |ctx, _| {
            *leak.lock().unwrap() = Some(ctx.clone());
            Ok(Value::Null)
        })
        .unwrap();
        rt.qm_call("leak", &[]).unwrap();
        let ctx = slot.lock().unwrap().take().unwrap();
        assert!(!ctx.is_live());
        assert_eq!(ctx.declassify(&hx), Err(Error::ContextEscaped));
        assert_eq!(ctx.get_text("fx"), Err(Error::ContextEscaped));
        assert_eq!(ctx.acquired_taints(), Err(Error::ContextEscaped));
        assert_eq!(ctx.call("concat", &[]), Err(Error::ContextEscaped));
        assert_eq!(
            ctx.sms_send(&[QmArg::plain("x")], "555"),
            Err(Error::ContextEscaped)
        );
        assert!(rt.attempt_log().is_empty());
    }

    #[test]
    fn outer_context_is_not_live_inside_nested_call() {
        let rt = runtime();
        let slot: Arc<Mutex<Option<SandboxContext>>> = Arc::default();
        let outer_slot = Arc::clone(&slot);
        let inner_slot = Arc::clone(&slot);
        rt.register_qm("inner", move |_ctx, _| {
            let outer = inner_slot.lock().unwrap().clone().unwrap();
            Ok(json!(outer.get_text("fx") == Err(Error::ContextEscaped)))
        })
        .unwrap();
        rt.register_qm("outer", move |ctx, _| {
            *outer_slot.lock().unwrap() = Some(ctx.clone());
            let h = ctx.call("inner", &[])?;
            ctx.declassify(&h)
        })
        .unwrap();
        let h = rt.qm_call("outer", &[]).unwrap();
        assert_eq!(rt.peek_payload_for_tests(&h), Some(json!(true)));
    }

    #[test]
    fn context_not_usable_from_other_thread() {
        let rt = runtime();
        rt.register_qm("spawn", |ctx, _| {
            let c = ctx.clone();
            let r = std::thread::spawn(move || c.get_text("fx")).join().unwrap();
            Ok(json!(r == Err(Error::ContextEscaped)))
        })
        .unwrap();
        let h = rt.qm_call("spawn", &[]).unwrap();
        assert_eq!(rt.peek_payload_for_tests(&h), Some(json!(true)));
    }

    #[test]
    fn nested_result_needs_declassify_to_taint() {
        let rt = runtime();
        rt.register_qm("ignore_inner", |ctx, _| {
            ctx.call("read", &[QmArg::plain("fx")])?;
            Ok(Value::Null)
        })
        .unwrap();
        rt.register_qm("use_inner", |ctx, _| {
            let h = ctx.call("read", &[QmArg::plain("fx")])?;
            ctx.declassify(&h)
        })
        .unwrap();
        let a = rt.qm_call("ignore_inner", &[]).unwrap();
        let b = rt.qm_call("use_inner", &[]).unwrap();
        assert!(rt.handle_taints(&a).unwrap().is_empty());
        assert_eq!(rt.handle_taints(&b).unwrap(), TaintSet::singleton(x()));
    }

    #[test]
    fn panic_is_contained() {
        let rt = runtime();
        rt.register_qm("boom", |ctx, _| {
            ctx.sms_send(&[QmArg::plain("hi")], "555")?;
            panic!("kaboom");
        })
        .unwrap();
        let before = rt.handle_count();
        match rt.qm_call("boom", &[]) {
            Err(Error::QmPanicked { qm, message }) => {
                assert_eq!(qm, "boom");
                assert_eq!(message, "kaboom");
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(rt.handle_count(), before);
        let log = rt.attempt_log();
        assert_eq!(log.len(), 1);
        assert_eq!(log[0].status, DeliveryStatus::Aborted);
        // The runtime stays usable.
        assert!(rt.qm_call("concat", &[]).is_ok());
    }
}
