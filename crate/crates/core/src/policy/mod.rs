//! Manifest parsing, URL filters, and sink-time flow decisions.

mod check;
mod manifest;
mod url;

pub use check::{check_flow, Decision, DenialReason, LabelVerdict, SinkRequest};
pub use manifest::{
    disclosure_report, parse_manifest, parse_manifest_with_sinks, FlowRule, Manifest,
    ManifestBuilder, ManifestError, ManifestErrorKind, SinkKind, SinkRegistry,
};
pub use url::{filter_matches, normalize_url, NormalizedUrl, UrlError, UrlFilter};
