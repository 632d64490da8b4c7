use std::collections::BTreeMap;
use std::fmt;

use super::manifest::{FlowRule, Manifest, SinkKind};
use super::url::{filter_matches, NormalizedUrl};
use crate::labels::{TaintLabel, TaintSet};

/// A sink access attempt as seen by the checker.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SinkRequest {
    sink: SinkKind,
    url: Option<NormalizedUrl>,
    taints: TaintSet,
}

impl SinkRequest {
    pub fn network(url: NormalizedUrl, taints: TaintSet) -> Self {
        Self {
            sink: SinkKind::network(),
            url: Some(url),
            taints,
        }
    }

    /// Request for a sink other than NETWORK; `None` if `sink` is NETWORK.
    pub fn other(sink: SinkKind, taints: TaintSet) -> Option<Self> {
        (!sink.is_network()).then_some(Self {
            sink,
            url: None,
            taints,
        })
    }

    pub fn sink(&self) -> &SinkKind {
        &self.sink
    }

    pub fn url(&self) -> Option<&NormalizedUrl> {
        self.url.as_ref()
    }

    pub fn taints(&self) -> &TaintSet {
        &self.taints
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DenialReason {
    /// No rule names this label and sink.
    NoRuleForSink,
    /// NETWORK rules exist for the label but none of their filters match.
    UrlFilterMismatch,
}

impl fmt::Display for DenialReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::NoRuleForSink => "no rule for sink",
            Self::UrlFilterMismatch => "url filter mismatch",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LabelVerdict {
    Allowed(FlowRule),
    Denied(DenialReason),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decision {
    pub allowed: bool,
    pub per_label: BTreeMap<TaintLabel, LabelVerdict>,
}

impl Decision {
    pub fn denials(&self) -> impl Iterator<Item = (&TaintLabel, DenialReason)> {
        self.per_label.iter().filter_map(|(l, v)| match v {
            LabelVerdict::Denied(r) => Some((l, *r)),
            LabelVerdict::Allowed(_) => None,
        })
    }
}

impl fmt::Display for Decision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.allowed {
            return f.write_str("allowed");
        }
        f.write_str("denied:")?;
        for (label, reason) in self.denials() {
            write!(f, " {label} ({reason})")?;
        }
        Ok(())
    }
}

fn verdict_for(manifest: &Manifest, label: &TaintLabel, request: &SinkRequest) -> LabelVerdict {
    let mut saw_sink_rule = false;
    for rule in manifest.rules() {
        if &rule.label != label || rule.sink != request.sink {
            continue;
        }
        saw_sink_rule = true;
        let matched = match (&rule.filter, &request.url) {
            (None, _) => true,
            (Some(filter), Some(url)) => filter_matches(filter, url),
            (Some(_), None) => false,
        };
        if matched {
            return LabelVerdict::Allowed(rule.clone());
        }
    }
    LabelVerdict::Denied(if saw_sink_rule {
        DenialReason::UrlFilterMismatch
    } else {
        DenialReason::NoRuleForSink
    })
}

/// Deny-by-default check: allowed iff every label in the request's taint
/// set is covered by some rule for the requested sink (and URL).
pub fn check_flow(manifest: &Manifest, request: &SinkRequest) -> Decision {
    let per_label: BTreeMap<_, _> = request
        .taints
        .iter()
        .map(|label| (label.clone(), verdict_for(manifest, label, request)))
        .collect();
    let allowed = per_label
        .values()
        .all(|v| matches!(v, LabelVerdict::Allowed(_)));
    Decision { allowed, per_label }
}
