use std::collections::HashMap;
use std::sync::{Arc, Mutex, RwLock};

use serde_json::Value;

use crate::error::{Error, Result};
use crate::labels::{HandleId, OpaqueHandle, TaintSet};
use crate::policy::Manifest;
use crate::sandbox::{self, QmArg, QmRegistry, SandboxContext, StagedAttempt};
use crate::sensitive_store::SensitiveStore;
use crate::trusted_api::{self, DeliveryStatus, RecordingFake, SinkAttempt, Transport};

struct StoredValue {
    taints: TaintSet,
    value: Value,
}

pub(crate) struct Shared {
    manifest: Manifest,
    pub(crate) registry: QmRegistry,
    pub(crate) store: SensitiveStore,
    handles: RwLock<HashMap<HandleId, StoredValue>>,
    transport: RwLock<Arc<dyn Transport>>,
    attempts: Mutex<Vec<SinkAttempt>>,
    commit_lock: Mutex<()>,
}

impl Shared {
    pub(crate) fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub(crate) fn lookup_handle(&self, id: HandleId) -> Result<(TaintSet, Value)> {
        self.handles
            .read()
            .expect("handle table poisoned")
            .get(&id)
            .map(|s| (s.taints.clone(), s.value.clone()))
            .ok_or(Error::HandleUnknown(id))
    }

    pub(crate) fn insert_handle(&self, taints: TaintSet, value: Value) -> OpaqueHandle {
        let mut table = self.handles.write().expect("handle table poisoned");
        let mut id = HandleId::random();
        while table.contains_key(&id) {
            id = HandleId::random();
        }
        table.insert(
            id,
            StoredValue {
                taints: taints.clone(),
                value,
            },
        );
        OpaqueHandle::new(id, taints)
    }

    /// Deliver pending attempts and append everything to the audit log.
    pub(crate) fn commit(&self, staged: Vec<StagedAttempt>) {
        if staged.is_empty() {
            return;
        }
        let _serial = self.commit_lock.lock().expect("commit lock poisoned");
        let transport = Arc::clone(&self.transport.read().expect("transport slot poisoned"));
        let mut done = Vec::with_capacity(staged.len());
        for StagedAttempt {
            mut attempt,
            payload,
        } in staged
        {
            if attempt.status == DeliveryStatus::Pending {
                debug_assert!(attempt.decision.allowed);
                let bytes = payload.unwrap_or_default();
                attempt.status = match transport.deliver(&attempt.sink, &attempt.destination, &bytes)
                {
                    Ok(()) => DeliveryStatus::Delivered,
                    Err(e) => {
                        log::warn!("delivery to {} failed: {e}", attempt.destination);
                        DeliveryStatus::Failed(e)
                    }
                };
            }
            done.push(attempt);
        }
        self.attempts
            .lock()
            .expect("attempt log poisoned")
            .extend(done);
    }
}

/// One app's runtime: manifest snapshot, QM registry, handle table,
/// sensitive field store, transport slot, and attempt log.
///
/// Cloning yields another reference to the same runtime.
#[derive(Clone)]
pub struct Runtime {
    shared: Arc<Shared>,
}

impl std::fmt::Debug for Runtime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Runtime")
            .field("app_id", &self.shared.manifest.app_id())
            .finish_non_exhaustive()
    }
}

impl Runtime {
    /// Fresh runtime with a [`RecordingFake`] transport installed.
    pub fn new(manifest: Manifest) -> Self {
        let store = SensitiveStore::new(manifest.declared_labels().iter().cloned());
        Self {
            shared: Arc::new(Shared {
                manifest,
                registry: QmRegistry::default(),
                store,
                handles: RwLock::default(),
                transport: RwLock::new(Arc::new(RecordingFake::new())),
                attempts: Mutex::default(),
                commit_lock: Mutex::default(),
            }),
        }
    }

    pub fn manifest(&self) -> &Manifest {
        &self.shared.manifest
    }

    pub fn store(&self) -> &SensitiveStore {
        &self.shared.store
    }

    pub fn registry(&self) -> &QmRegistry {
        &self.shared.registry
    }

    pub fn register_qm<F>(&self, name: &str, f: F) -> Result<()>
    where
        F: Fn(&SandboxContext, &[Value]) -> Result<Value> + Send + Sync + 'static,
    {
        self.shared.registry.register(name, Arc::new(f))
    }

    /// Run a registered QM in a fresh sandbox and wrap its result in a new
    /// handle tainted with everything the call acquired.
    pub fn qm_call(&self, name: &str, args: &[QmArg]) -> Result<OpaqueHandle> {
        sandbox::qm_call(&self.shared, name, args)
    }

    /// Current taints of a live handle of this runtime.
    pub fn handle_taints(&self, handle: &OpaqueHandle) -> Result<TaintSet> {
        self.shared.lookup_handle(handle.id()).map(|(t, _)| t)
    }

    pub fn handle_count(&self) -> usize {
        self.shared.handles.read().expect("handle table poisoned").len()
    }

    pub fn set_transport(&self, transport: Arc<dyn Transport>) {
        *self.shared.transport.write().expect("transport slot poisoned") = transport;
    }

    /// Chronological copy of every finished sink attempt.
    pub fn attempt_log(&self) -> Vec<SinkAttempt> {
        self.shared.attempts.lock().expect("attempt log poisoned").clone()
    }

    /// Attempts logged after the first `start`.
    pub fn attempts_since(&self, start: usize) -> Vec<SinkAttempt> {
        let log = self.shared.attempts.lock().expect("attempt log poisoned");
        log.get(start..).map(<[_]>::to_vec).unwrap_or_default()
    }

    pub fn attempt_count(&self) -> usize {
        self.shared.attempts.lock().expect("attempt log poisoned").len()
    }

    pub fn export_log(&self) -> String {
        trusted_api::export_log(&self.attempt_log())
    }

    #[cfg(test)]
    pub(crate) fn peek_payload_for_tests(&self, handle: &OpaqueHandle) -> Option<Value> {
        self.shared.lookup_handle(handle.id()).ok().map(|(_, v)| v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::parse_manifest;

    #[test]
    fn fresh_runtime_has_empty_log() {
        let rt = Runtime::new(parse_manifest("app a.b").unwrap());
        assert!(rt.attempt_log().is_empty());
        assert_eq!(rt.export_log(), "");
        assert_eq!(rt.handle_count(), 0);
    }

    #[test]
    fn handle_ids_unique() {
        let rt = Runtime::new(parse_manifest("app a.b").unwrap());
        rt.register_qm("unit", |_, _| Ok(Value::Null)).unwrap();
        let ids: std::collections::HashSet<_> = (0..500)
            .map(|_| rt.qm_call("unit", &[]).unwrap().id())
            .collect();
        assert_eq!(ids.len(), 500);
    }

    #[test]
    fn concurrent_calls() {
        let m = parse_manifest("app a.b\nlabel X\nallow X -> SMS").unwrap();
        let rt = Runtime::new(m.clone());
        let fake = RecordingFake::new();
        rt.set_transport(Arc::new(fake.clone()));
        rt.store()
            .register_field("f", m.declared_labels()[0].clone())
            .unwrap();
        rt.register_qm("send", |ctx, _| {
            let v = ctx.get_text("f")?;
            ctx.sms_send(&[QmArg::plain(v)], "555")?;
            Ok(Value::Null)
        })
        .unwrap();
        std::thread::scope(|s| {
            for _ in 0..8 {
                s.spawn(|| {
                    for _ in 0..25 {
                        rt.qm_call("send", &[]).unwrap();
                    }
                });
            }
        });
        assert_eq!(fake.len(), 200);
        assert!(rt.attempt_log().iter().all(|a| a.delivered()));
    }
}
