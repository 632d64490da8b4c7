//! Line-oriented app manifest: labels plus allow-rules.
//!
//! ```text
//! app com.example.smartapp
//! label Taint_UI
//! allow Taint_UI -> NETWORK url http://appcloudserver.com
//! allow Taint_UI -> SMS
//! ```
//!
//! `#` at the start of a line or after whitespace begins a comment.

use std::collections::BTreeSet;
use std::fmt;

use thiserror::Error;

use super::url::{UrlError, UrlFilter};
use crate::labels::{is_valid_app_id, is_valid_label_name, TaintLabel};

/// Name of a side-effecting destination.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SinkKind(String);

impl SinkKind {
    pub const NETWORK: &'static str = "NETWORK";
    pub const SMS: &'static str = "SMS";

    pub fn network() -> Self {
        Self(Self::NETWORK.to_string())
    }

    pub fn sms() -> Self {
        Self(Self::SMS.to_string())
    }

    /// Uppercase identifier (`[A-Z][A-Z0-9_]*`); does not check registration.
    pub fn new(name: &str) -> Option<Self> {
        let mut chars = name.chars();
        let head_ok = chars.next().is_some_and(|c| c.is_ascii_uppercase());
        let tail_ok = chars.all(|c| c.is_ascii_uppercase() || c.is_ascii_digit() || c == '_');
        (head_ok && tail_ok).then(|| Self(name.to_string()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn is_network(&self) -> bool {
        self.0 == Self::NETWORK
    }
}

impl fmt::Display for SinkKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Sinks a manifest may name. NETWORK and SMS are always present.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SinkRegistry {
    sinks: BTreeSet<SinkKind>,
}

impl Default for SinkRegistry {
    fn default() -> Self {
        Self {
            sinks: [SinkKind::network(), SinkKind::sms()].into_iter().collect(),
        }
    }
}

impl SinkRegistry {
    pub fn register(&mut self, sink: SinkKind) {
        self.sinks.insert(sink);
    }

    pub fn contains(&self, sink: &SinkKind) -> bool {
        self.sinks.contains(sink)
    }

    pub fn lookup(&self, name: &str) -> Option<SinkKind> {
        SinkKind::new(name).filter(|s| self.contains(s))
    }
}

/// `label -> sink`, optionally restricted to one endpoint for NETWORK.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct FlowRule {
    pub label: TaintLabel,
    pub sink: SinkKind,
    pub filter: Option<UrlFilter>,
}

impl FlowRule {
    pub fn unfiltered(label: TaintLabel, sink: SinkKind) -> Self {
        Self {
            label,
            sink,
            filter: None,
        }
    }

    pub fn network_to(label: TaintLabel, filter: UrlFilter) -> Self {
        Self {
            label,
            sink: SinkKind::network(),
            filter: Some(filter),
        }
    }

    /// Disclosure form: `appId/label -> SINK [url <filter>]`.
    pub fn disclosure_line(&self) -> String {
        match &self.filter {
            Some(f) => format!("{} -> {} url {}", self.label, self.sink, f),
            None => format!("{} -> {}", self.label, self.sink),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ManifestErrorKind {
    #[error("{0}")]
    Syntax(String),
    #[error("missing `app` directive")]
    MissingApp,
    #[error("`app` must appear exactly once, as the first directive")]
    MisplacedApp,
    #[error("invalid app id {0:?}")]
    InvalidAppId(String),
    #[error("invalid label name {0:?}")]
    InvalidLabelName(String),
    #[error("duplicate label declaration {0:?}")]
    DuplicateLabel(String),
    #[error("undeclared label {0:?}")]
    UndeclaredLabel(String),
    #[error("unknown sink {0:?}")]
    UnknownSink(String),
    #[error("url filter is only allowed on NETWORK rules, not {0}")]
    FilterOnNonNetwork(String),
    #[error("bad url filter: {0}")]
    BadFilter(#[from] UrlError),
    #[error("duplicate rule {0:?}")]
    DuplicateRule(String),
}

/// Parse or validation failure, with 1-based line and column.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}, column {column}: {kind}")]
pub struct ManifestError {
    pub line: usize,
    pub column: usize,
    pub kind: ManifestErrorKind,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    app_id: String,
    labels: Vec<TaintLabel>,
    rules: Vec<FlowRule>,
}

impl Manifest {
    pub fn app_id(&self) -> &str {
        &self.app_id
    }

    /// Declared labels in declaration order.
    pub fn declared_labels(&self) -> &[TaintLabel] {
        &self.labels
    }

    pub fn declares(&self, label: &TaintLabel) -> bool {
        self.labels.contains(label)
    }

    /// Label of this app with the given name, if declared.
    pub fn label(&self, name: &str) -> Option<&TaintLabel> {
        self.labels.iter().find(|l| l.name() == name)
    }

    pub fn rules(&self) -> &[FlowRule] {
        &self.rules
    }

    /// Canonical manifest text; `parse_manifest` of the result yields `self`.
    pub fn render(&self) -> String {
        let mut out = format!("app {}\n", self.app_id);
        for label in &self.labels {
            out.push_str(&format!("label {}\n", label.name()));
        }
        for rule in &self.rules {
            match &rule.filter {
                Some(f) => out.push_str(&format!(
                    "allow {} -> {} url {}\n",
                    rule.label.name(),
                    rule.sink,
                    f
                )),
                None => out.push_str(&format!("allow {} -> {}\n", rule.label.name(), rule.sink)),
            }
        }
        out
    }
}

/// Incremental construction with the same validation as the parser.
#[derive(Debug, Clone)]
pub struct ManifestBuilder {
    manifest: Manifest,
    sinks: SinkRegistry,
}

impl ManifestBuilder {
    pub fn new(app_id: &str) -> Result<Self, ManifestErrorKind> {
        if !is_valid_app_id(app_id) {
            return Err(ManifestErrorKind::InvalidAppId(app_id.to_string()));
        }
        Ok(Self {
            manifest: Manifest {
                app_id: app_id.to_string(),
                labels: Vec::new(),
                rules: Vec::new(),
            },
            sinks: SinkRegistry::default(),
        })
    }

    pub fn with_sinks(mut self, sinks: SinkRegistry) -> Self {
        self.sinks = sinks;
        self
    }

    pub fn label(&mut self, name: &str) -> Result<&mut Self, ManifestErrorKind> {
        if !is_valid_label_name(name) {
            return Err(ManifestErrorKind::InvalidLabelName(name.to_string()));
        }
        if self.manifest.label(name).is_some() {
            return Err(ManifestErrorKind::DuplicateLabel(name.to_string()));
        }
        let label = TaintLabel::new(self.manifest.app_id.clone(), name)
            .map_err(|_| ManifestErrorKind::InvalidLabelName(name.to_string()))?;
        self.manifest.labels.push(label);
        Ok(self)
    }

    pub fn allow(
        &mut self,
        label: &str,
        sink: &str,
        filter: Option<&str>,
    ) -> Result<&mut Self, ManifestErrorKind> {
        let label = self
            .manifest
            .label(label)
            .cloned()
            .ok_or_else(|| ManifestErrorKind::UndeclaredLabel(label.to_string()))?;
        let sink = self
            .sinks
            .lookup(sink)
            .ok_or_else(|| ManifestErrorKind::UnknownSink(sink.to_string()))?;
        let filter = match filter {
            None => None,
            Some(_) if !sink.is_network() => {
                return Err(ManifestErrorKind::FilterOnNonNetwork(sink.to_string()))
            }
            Some(raw) => Some(UrlFilter::parse(raw)?),
        };
        let rule = FlowRule {
            label,
            sink,
            filter,
        };
        if self.manifest.rules.contains(&rule) {
            return Err(ManifestErrorKind::DuplicateRule(rule.disclosure_line()));
        }
        self.manifest.rules.push(rule);
        Ok(self)
    }

    pub fn build(self) -> Manifest {
        self.manifest
    }
}

fn strip_comment(line: &str) -> &str {
    let bytes = line.as_bytes();
    for (i, &b) in bytes.iter().enumerate() {
        if b == b'#' && (i == 0 || bytes[i - 1].is_ascii_whitespace()) {
            return &line[..i];
        }
    }
    line
}

/// Whitespace-separated tokens with their 1-based char columns.
fn tokens(line: &str) -> Vec<(usize, &str)> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, c) in line.char_indices() {
        if c.is_whitespace() {
            if let Some(s) = start.take() {
                out.push((s, &line[s..i]));
            }
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(s) = start {
        out.push((s, &line[s..]));
    }
    out.into_iter()
        .map(|(byte, tok)| (line[..byte].chars().count() + 1, tok))
        .collect()
}

pub fn parse_manifest(text: &str) -> Result<Manifest, ManifestError> {
    parse_manifest_with_sinks(text, &SinkRegistry::default())
}

pub fn parse_manifest_with_sinks(
    text: &str,
    sinks: &SinkRegistry,
) -> Result<Manifest, ManifestError> {
    let mut builder: Option<ManifestBuilder> = None;
    let mut last_line = 0;

    for (idx, raw_line) in text.lines().enumerate() {
        let line_no = idx + 1;
        last_line = line_no;
        let toks = tokens(strip_comment(raw_line));
        let Some(&(col, directive)) = toks.first() else {
            continue;
        };
        let err = |column: usize, kind: ManifestErrorKind| ManifestError {
            line: line_no,
            column,
            kind,
        };
        let arity = |n: usize, usage: &str| {
            if toks.len() == n {
                Ok(())
            } else {
                let column = toks.get(n).map_or(col, |t| t.0);
                Err(err(column, ManifestErrorKind::Syntax(format!("expected `{usage}`"))))
            }
        };

        if directive == "app" {
            if builder.is_some() {
                return Err(err(col, ManifestErrorKind::MisplacedApp));
            }
            arity(2, "app <app-id>")?;
            let (id_col, id) = toks[1];
            builder = Some(
                ManifestBuilder::new(id)
                    .map_err(|k| err(id_col, k))?
                    .with_sinks(sinks.clone()),
            );
            continue;
        }

        let Some(b) = builder.as_mut() else {
            return Err(err(col, ManifestErrorKind::MissingApp));
        };

        match directive {
            "label" => {
                arity(2, "label <name>")?;
                let (name_col, name) = toks[1];
                b.label(name).map_err(|k| err(name_col, k))?;
            }
            "allow" => {
                if toks.len() != 4 && toks.len() != 6 {
                    return Err(err(
                        col,
                        ManifestErrorKind::Syntax(
                            "expected `allow <name> -> <SINK> [url <url>]`".into(),
                        ),
                    ));
                }
                if toks[2].1 != "->" {
                    return Err(err(toks[2].0, ManifestErrorKind::Syntax("expected `->`".into())));
                }
                let filter = if toks.len() == 6 {
                    if toks[4].1 != "url" {
                        return Err(err(
                            toks[4].0,
                            ManifestErrorKind::Syntax("expected `url`".into()),
                        ));
                    }
                    Some(toks[5])
                } else {
                    None
                };
                let (label_col, label) = toks[1];
                let (sink_col, sink) = toks[3];
                b.allow(label, sink, filter.map(|f| f.1)).map_err(|k| {
                    let column = match &k {
                        ManifestErrorKind::UndeclaredLabel(_) => label_col,
                        ManifestErrorKind::BadFilter(_) => filter.map_or(sink_col, |f| f.0),
                        ManifestErrorKind::DuplicateRule(_) => col,
                        _ => sink_col,
                    };
                    err(column, k)
                })?;
            }
            other => {
                return Err(err(
                    col,
                    ManifestErrorKind::Syntax(format!("unknown directive {other:?}")),
                ))
            }
        }
    }

    builder.map(ManifestBuilder::build).ok_or(ManifestError {
        line: last_line.max(1),
        column: 1,
        kind: ManifestErrorKind::MissingApp,
    })
}

/// Install-time listing of every declared flow.
pub fn disclosure_report(manifest: &Manifest) -> String {
    let mut out = format!("flows for {}:\n", manifest.app_id);
    for rule in &manifest.rules {
        out.push_str(&rule.disclosure_line());
        out.push('\n');
    }
    out
}
