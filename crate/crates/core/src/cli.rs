//! Subcommand bodies for the `opaqueflow` binary.
//!
//! Exit codes: 0 expectations met, 1 security expectation violated,
//! 2 invalid input, 3 I/O failure.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use crate::policy::{disclosure_report, parse_manifest, Manifest};
use crate::scenario::{self, ScenarioError, StepOutcome};
use crate::trusted_api::{export_log, RecordingFake, Transport};

pub const EXIT_OK: i32 = 0;
pub const EXIT_EXPECTATION: i32 = 1;
pub const EXIT_INVALID: i32 = 2;
pub const EXIT_IO: i32 = 3;

pub const TRANSPORT_ENV: &str = "OPAQUEFLOW_TRANSPORT";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransportChoice {
    Fake,
    Http,
}

impl TransportChoice {
    /// Parses the value of [`TRANSPORT_ENV`]; unset means `fake`.
    pub fn from_env_value(value: Option<&str>) -> Result<Self, String> {
        match value.map(str::trim) {
            None | Some("") | Some("fake") => Ok(Self::Fake),
            Some("http") => Ok(Self::Http),
            Some(other) => Err(format!(
                "{TRANSPORT_ENV}={other:?}: expected `fake` or `http`"
            )),
        }
    }

    pub fn from_env() -> Result<Self, String> {
        Self::from_env_value(std::env::var(TRANSPORT_ENV).ok().as_deref())
    }

    pub fn build(self) -> Result<Arc<dyn Transport>, String> {
        match self {
            Self::Fake => Ok(Arc::new(RecordingFake::new())),
            #[cfg(feature = "http")]
            Self::Http => Ok(Arc::new(crate::trusted_api::HttpTransport::new())),
            #[cfg(not(feature = "http"))]
            Self::Http => Err("this build has no http transport (enable the `http` feature)".into()),
        }
    }
}

fn load_manifest(path: &Path, err: &mut dyn Write) -> Result<Manifest, i32> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) => {
            let _ = writeln!(err, "error: {}: {e}", path.display());
            return Err(EXIT_IO);
        }
    };
    parse_manifest(&text).map_err(|e| {
        let _ = writeln!(err, "error: {}: {e}", path.display());
        EXIT_INVALID
    })
}

pub fn cmd_check(path: &Path, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    match load_manifest(path, err) {
        Ok(m) => {
            let _ = writeln!(
                out,
                "ok: {} ({} labels, {} rules)",
                m.app_id(),
                m.declared_labels().len(),
                m.rules().len()
            );
            EXIT_OK
        }
        Err(code) => code,
    }
}

pub fn cmd_disclose(path: &Path, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    match load_manifest(path, err) {
        Ok(m) => {
            let _ = write!(out, "{}", disclosure_report(&m));
            EXIT_OK
        }
        Err(code) => code,
    }
}

fn scenario_exit(e: &ScenarioError) -> i32 {
    match e {
        ScenarioError::Io { .. } => EXIT_IO,
        _ => EXIT_INVALID,
    }
}

pub fn cmd_run(
    target: &str,
    log_path: Option<&Path>,
    transport: TransportChoice,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> i32 {
    let transport = match transport.build() {
        Ok(t) => t,
        Err(msg) => {
            let _ = writeln!(err, "error: {msg}");
            return EXIT_INVALID;
        }
    };
    let report = match scenario::load(target)
        .and_then(|(s, base)| scenario::run(&s, &base, transport))
    {
        Ok(r) => r,
        Err(e) => {
            let _ = writeln!(err, "error: {target}: {e}");
            return scenario_exit(&e);
        }
    };

    let exported = export_log(&report.attempts);
    if let Some(path) = log_path {
        if let Err(e) = std::fs::write(path, &exported) {
            let _ = writeln!(err, "error: {}: {e}", path.display());
            return EXIT_IO;
        }
    }

    let _ = writeln!(out, "scenario {}", report.scenario);
    let _ = write!(out, "{exported}");
    for (line, outcome) in &report.outcomes {
        match outcome {
            StepOutcome::Ok => {}
            StepOutcome::Denied(msg) => {
                let _ = writeln!(out, "line {line}: denied: {msg}");
            }
            StepOutcome::Blocked(msg) => {
                let _ = writeln!(out, "line {line}: blocked: {msg}");
            }
            StepOutcome::Failed(msg) => {
                let _ = writeln!(out, "line {line}: FAILED: {msg}");
            }
        }
    }
    for e in &report.expectations {
        let _ = writeln!(
            out,
            "line {}: {} {}",
            e.line,
            if e.held { "ok" } else { "FAILED" },
            e.description
        );
    }
    if report.passed() {
        let _ = writeln!(out, "result: pass");
        EXIT_OK
    } else {
        let _ = writeln!(out, "result: FAIL");
        EXIT_EXPECTATION
    }
}
