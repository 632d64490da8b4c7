//! Taint identities, taint sets, and opaque handles.
//!
//! A [`TaintLabel`] is a fully qualified `(app_id, name)` pair, rendered as
//! `appId/name`. A [`TaintSet`] is a plain set of labels that only ever grows
//! by union. An [`OpaqueHandle`] names a value owned by a
//! [`Runtime`](crate::Runtime); the value itself never lives in the handle.

use std::collections::btree_set;
use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

/// Malformed label text.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LabelError {
    #[error("invalid app id {0:?}: expected dotted identifier such as com.example.app")]
    InvalidAppId(String),
    #[error("invalid label name {0:?}: expected identifier")]
    InvalidName(String),
    #[error("invalid label {0:?}: expected appId/name")]
    MissingSeparator(String),
}

pub(crate) fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// `segment ("." segment)+`, at least two segments.
pub fn is_valid_app_id(s: &str) -> bool {
    let mut count = 0;
    for seg in s.split('.') {
        if !is_identifier(seg) {
            return false;
        }
        count += 1;
    }
    count >= 2
}

pub fn is_valid_label_name(s: &str) -> bool {
    is_identifier(s)
}

/// Identity of a piece of sensitive data. Comparison is exact and
/// case-sensitive on both parts.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TaintLabel {
    app_id: String,
    name: String,
}

impl TaintLabel {
    pub fn new(app_id: impl Into<String>, name: impl Into<String>) -> Result<Self, LabelError> {
        let app_id = app_id.into();
        let name = name.into();
        if !is_valid_app_id(&app_id) {
            return Err(LabelError::InvalidAppId(app_id));
        }
        if !is_valid_label_name(&name) {
            return Err(LabelError::InvalidName(name));
        }
        Ok(Self { app_id, name })
    }

    pub fn app_id(&self) -> &str {
        &self.app_id
    }

    pub fn name(&self) -> &str {
        &self.name
    }
}

impl fmt::Display for TaintLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.app_id, self.name)
    }
}

impl FromStr for TaintLabel {
    type Err = LabelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (app_id, name) = s
            .split_once('/')
            .ok_or_else(|| LabelError::MissingSeparator(s.to_string()))?;
        Self::new(app_id, name)
    }
}

/// Set of labels attached to a value or accumulated by a computation.
///
/// Iteration order is the label ordering (app id, then name), which keeps
/// every rendering of a set deterministic.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct TaintSet {
    labels: BTreeSet<TaintLabel>,
}

impl TaintSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn singleton(label: TaintLabel) -> Self {
        let mut set = Self::new();
        set.insert(label);
        set
    }

    pub fn insert(&mut self, label: TaintLabel) -> bool {
        self.labels.insert(label)
    }

    pub fn contains(&self, label: &TaintLabel) -> bool {
        self.labels.contains(label)
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn iter(&self) -> btree_set::Iter<'_, TaintLabel> {
        self.labels.iter()
    }

    pub fn is_subset(&self, other: &TaintSet) -> bool {
        self.labels.is_subset(&other.labels)
    }

    /// In-place union.
    pub fn extend_from(&mut self, other: &TaintSet) {
        self.labels.extend(other.labels.iter().cloned());
    }

    /// Comma-joined `appId/name` list, empty string for the empty set.
    pub fn to_comma_list(&self) -> String {
        self.labels
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join(",")
    }
}

/// Union of two taint sets.
pub fn taint_union(a: &TaintSet, b: &TaintSet) -> TaintSet {
    let mut out = a.clone();
    out.extend_from(b);
    out
}

impl fmt::Display for TaintSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{{}}}", self.to_comma_list())
    }
}

impl FromIterator<TaintLabel> for TaintSet {
    fn from_iter<I: IntoIterator<Item = TaintLabel>>(iter: I) -> Self {
        Self {
            labels: iter.into_iter().collect(),
        }
    }
}

impl Extend<TaintLabel> for TaintSet {
    fn extend<I: IntoIterator<Item = TaintLabel>>(&mut self, iter: I) {
        self.labels.extend(iter);
    }
}

impl IntoIterator for TaintSet {
    type Item = TaintLabel;
    type IntoIter = btree_set::IntoIter<TaintLabel>;

    fn into_iter(self) -> Self::IntoIter {
        self.labels.into_iter()
    }
}

impl<'a> IntoIterator for &'a TaintSet {
    type Item = &'a TaintLabel;
    type IntoIter = btree_set::Iter<'a, TaintLabel>;

    fn into_iter(self) -> Self::IntoIter {
        self.labels.iter()
    }
}

/// 128-bit random token, rendered as 32 lowercase hex digits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct HandleId([u8; 16]);

impl HandleId {
    pub(crate) fn random() -> Self {
        Self(rand::random())
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        let mut buf = [0u8; 16];
        hex::decode_to_slice(s, &mut buf).ok()?;
        Some(Self(buf))
    }
}

impl fmt::Display for HandleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

/// Reference to the result of a quarantined computation.
///
/// The payload stays in the owning runtime's handle table. Only a live
/// [`SandboxContext`](crate::SandboxContext) can turn a handle back into
/// its value.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct OpaqueHandle {
    id: HandleId,
    taints: TaintSet,
}

impl OpaqueHandle {
    pub(crate) fn new(id: HandleId, taints: TaintSet) -> Self {
        Self { id, taints }
    }

    pub fn id(&self) -> HandleId {
        self.id
    }

    pub fn taints(&self) -> &TaintSet {
        &self.taints
    }
}

impl fmt::Display for OpaqueHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "handle:{} {}", self.id, self.taints)
    }
}
