//! The sink gateway. Every NETWORK or SMS effect goes through
//! [`network_post`] or [`sms_send`], which require a live sandbox context,
//! consult the manifest, and only then stage a delivery for the transport.

use std::fmt;
use std::sync::{Arc, Mutex};

use serde_json::Value;
use thiserror::Error;

use crate::error::{Error, Result};
use crate::labels::TaintSet;
use crate::policy::{check_flow, normalize_url, Decision, SinkKind, SinkRequest};
use crate::sandbox::{QmArg, SandboxContext, StagedAttempt};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("transport error: {0}")]
pub struct TransportError(pub String);

/// Delivery backend for allowed sink requests.
pub trait Transport: Send + Sync {
    fn deliver(&self, sink: &SinkKind, destination: &str, payload: &[u8])
        -> Result<(), TransportError>;
}

/// One payload handed to a transport.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Delivery {
    pub sink: SinkKind,
    pub destination: String,
    pub payload: Vec<u8>,
}

/// In-memory transport that records every delivery. Clones share the log.
#[derive(Debug, Clone, Default)]
pub struct RecordingFake {
    log: Arc<Mutex<Vec<Delivery>>>,
}

impl RecordingFake {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn deliveries(&self) -> Vec<Delivery> {
        self.log.lock().expect("fake transport poisoned").clone()
    }

    pub fn len(&self) -> usize {
        self.log.lock().expect("fake transport poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Transport for RecordingFake {
    fn deliver(
        &self,
        sink: &SinkKind,
        destination: &str,
        payload: &[u8],
    ) -> Result<(), TransportError> {
        self.log
            .lock()
            .expect("fake transport poisoned")
            .push(Delivery {
                sink: sink.clone(),
                destination: destination.to_string(),
                payload: payload.to_vec(),
            });
        Ok(())
    }
}

/// Real HTTP transport: NETWORK payloads are POSTed as JSON. Other sinks
/// are refused.
#[cfg(feature = "http")]
#[derive(Debug)]
pub struct HttpTransport {
    agent: ureq::Agent,
}

#[cfg(feature = "http")]
impl HttpTransport {
    pub fn new() -> Self {
        Self {
            agent: ureq::Agent::new_with_defaults(),
        }
    }
}

#[cfg(feature = "http")]
impl Default for HttpTransport {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(feature = "http")]
impl Transport for HttpTransport {
    fn deliver(
        &self,
        sink: &SinkKind,
        destination: &str,
        payload: &[u8],
    ) -> Result<(), TransportError> {
        if !sink.is_network() {
            return Err(TransportError(format!(
                "http transport cannot deliver to {sink}"
            )));
        }
        self.agent
            .post(destination)
            .header("Content-Type", "application/json")
            .send(payload)
            .map(|_| ())
            .map_err(|e| TransportError(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DeliveryStatus {
    /// Allowed; waiting for the outermost QM call to finish.
    Pending,
    Delivered,
    Failed(TransportError),
    /// Allowed, but the QM call failed before delivery.
    Aborted,
    Denied,
}

/// Audit record of one sink request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SinkAttempt {
    pub sink: SinkKind,
    /// Normalized URL for NETWORK, phone number for SMS.
    pub destination: String,
    pub taints: TaintSet,
    pub decision: Decision,
    pub status: DeliveryStatus,
}

impl SinkAttempt {
    pub fn delivered(&self) -> bool {
        self.status == DeliveryStatus::Delivered
    }

    pub fn transport_error(&self) -> Option<&TransportError> {
        match &self.status {
            DeliveryStatus::Failed(e) => Some(e),
            _ => None,
        }
    }

    /// `ALLOW|DENY <SINK> <destination> taints=<labels>`
    pub fn export_line(&self) -> String {
        format!(
            "{} {} {} taints={}",
            if self.decision.allowed { "ALLOW" } else { "DENY" },
            self.sink,
            self.destination,
            self.taints.to_comma_list()
        )
    }
}

impl fmt::Display for SinkAttempt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.export_line())
    }
}

/// One line per attempt, each newline-terminated.
pub fn export_log(attempts: &[SinkAttempt]) -> String {
    attempts
        .iter()
        .map(|a| format!("{}\n", a.export_line()))
        .collect()
}

fn mediate(
    ctx: &SandboxContext,
    request: SinkRequest,
    destination: String,
    payload: &[QmArg],
) -> Result<SinkAttempt> {
    let shared = ctx.runtime();
    let decision = check_flow(shared.manifest(), &request);
    let sink = request.sink().clone();
    let taints = request.taints().clone();

    if !decision.allowed {
        let attempt = SinkAttempt {
            sink: sink.clone(),
            destination: destination.clone(),
            taints,
            decision: decision.clone(),
            status: DeliveryStatus::Denied,
        };
        ctx.stage(StagedAttempt {
            attempt,
            payload: None,
        });
        return Err(Error::PolicyViolation {
            sink,
            destination,
            decision,
        });
    }

    // Handle payloads are only opened once the flow is allowed.
    let mut record = Vec::with_capacity(payload.len());
    for arg in payload {
        match arg {
            QmArg::Plain(v) => record.push(v.clone()),
            QmArg::Handle(h) => record.push(shared.lookup_handle(h.id())?.1),
        }
    }
    let bytes = serde_json::to_vec(&Value::Array(record)).expect("json values always serialize");

    let attempt = SinkAttempt {
        sink,
        destination,
        taints,
        decision,
        status: DeliveryStatus::Pending,
    };
    ctx.stage(StagedAttempt {
        attempt: attempt.clone(),
        payload: Some(bytes),
    });
    Ok(attempt)
}

fn request_taints(ctx: &SandboxContext, payload: &[QmArg]) -> Result<TaintSet> {
    let mut taints = ctx.snapshot_taints();
    for arg in payload {
        if let QmArg::Handle(h) = arg {
            taints.extend_from(&ctx.runtime().lookup_handle(h.id())?.0);
        }
    }
    Ok(taints)
}

/// POST `payload` to `url`. Taints are the context's acquired taints plus
/// those of any handle in the payload. Allowed requests are delivered when
/// the outermost QM call returns; denied ones are logged and returned as
/// [`Error::PolicyViolation`].
pub fn network_post(ctx: &SandboxContext, payload: &[QmArg], url: &str) -> Result<SinkAttempt> {
    ctx.ensure_live()?;
    let url = normalize_url(url)?;
    let taints = request_taints(ctx, payload)?;
    let destination = url.to_string();
    mediate(ctx, SinkRequest::network(url, taints), destination, payload)
}

pub fn sms_send(ctx: &SandboxContext, payload: &[QmArg], number: &str) -> Result<SinkAttempt> {
    ctx.ensure_live()?;
    let number = number.trim();
    if number.is_empty() || number.chars().any(char::is_whitespace) {
        return Err(Error::InvalidDestination(number.to_string()));
    }
    let taints = request_taints(ctx, payload)?;
    let request = SinkRequest::other(SinkKind::sms(), taints).expect("SMS is not NETWORK");
    mediate(ctx, request, number.to_string(), payload)
}
