//! Opacified computation with taint-labeled opaque handles.
//!
//! Sensitive values live in a [`SensitiveStore`] or behind
//! [`OpaqueHandle`]s. They can only be read by quarantine modules running
//! inside a [`SandboxContext`], and they can only leave through the trusted
//! sink API, which checks every request against the app [`Manifest`]'s
//! `label -> SINK [url <filter>]` rules.

pub mod cli;
mod error;
pub mod labels;
pub mod policy;
mod runtime;
pub mod sandbox;
pub mod scenario;
pub mod sensitive_store;
pub mod trusted_api;

pub use error::{Error, Result};
pub use labels::{taint_union, HandleId, OpaqueHandle, TaintLabel, TaintSet};
pub use policy::{
    check_flow, disclosure_report, filter_matches, normalize_url, parse_manifest, Decision,
    FlowRule, Manifest, NormalizedUrl, SinkKind, SinkRequest, UrlFilter,
};
pub use runtime::Runtime;
pub use sandbox::{QmArg, SandboxContext};
pub use sensitive_store::SensitiveStore;
pub use trusted_api::{
    network_post, sms_send, DeliveryStatus, RecordingFake, SinkAttempt, Transport,
    TransportError,
};
