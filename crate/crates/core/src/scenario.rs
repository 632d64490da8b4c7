//! Executable scenario scripts.
//!
//! Same line-oriented style as manifests, one step per line:
//!
//! ```text
//! scenario <name>
//! manifest <path>
//! field <field_id> <Label>
//! set <field_id> <value>
//! call [<var> =] <QM> <arg>...
//! post <arg>... -> <url>
//! sms <arg>... -> <number>
//! untrusted-read <field_id> -> <var>
//! leak-post <arg>... -> <url>
//! expect-delivered <n>
//! expect-denied <n>
//! expect-escaped <n>
//! expect-untrusted <field_id> <value>
//! ```
//!
//! Arguments are `$var` references or literals; double-quoted literals use
//! JSON string escapes. `manifest` paths are relative to the scenario file.
//!
//! Available QMs: `QM_getUIValue(id)`, `QM_login(email, password, url)`,
//! `QM_concat(values...)`, `QM_post(values..., url)`,
//! `QM_sms(values..., number)`. `post` and `sms` run `QM_post` / `QM_sms`.
//! `leak-post` replays a sandbox context that escaped an earlier QM call;
//! every such attempt must be refused.

use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde_json::Value;
use thiserror::Error;

use crate::error::Error;
use crate::labels::{OpaqueHandle, TaintLabel};
use crate::policy::{parse_manifest, ManifestError};
use crate::sandbox::{QmArg, SandboxContext};
use crate::trusted_api::{network_post, DeliveryStatus, SinkAttempt, Transport};
use crate::Runtime;

pub const LOGIN_APP_MANIFEST: &str = include_str!("../scenarios/login-app.manifest");

const BUILTINS: &[(&str, &str)] = &[
    ("login-ok", include_str!("../scenarios/login-ok.scenario")),
    (
        "login-exfiltration",
        include_str!("../scenarios/login-exfiltration.scenario"),
    ),
    (
        "malicious-library",
        include_str!("../scenarios/malicious-library.scenario"),
    ),
];

const EMBEDDED_FILES: &[(&str, &str)] = &[("login-app.manifest", LOGIN_APP_MANIFEST)];

pub const BUILTIN_QMS: &[&str] = &[
    "QM_getUIValue",
    "QM_login",
    "QM_concat",
    "QM_post",
    "QM_sms",
];

pub fn builtin_names() -> impl Iterator<Item = &'static str> {
    BUILTINS.iter().map(|(n, _)| *n)
}

pub fn builtin_text(name: &str) -> Option<&'static str> {
    BUILTINS.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("manifest {path}: {source}")]
    Manifest {
        path: String,
        #[source]
        source: ManifestError,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {source}")]
    Setup {
        line: usize,
        #[source]
        source: Error,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Arg {
    Var(String),
    Literal(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Step {
    RegisterField { field_id: String, label: String },
    SetValue { field_id: String, value: String },
    CallQm { bind: Option<String>, qm: String, args: Vec<Arg> },
    NetworkPost { payload: Vec<Arg>, url: String },
    SmsSend { payload: Vec<Arg>, number: String },
    UntrustedRead { field_id: String, bind: String },
    LeakPost { payload: Vec<Arg>, url: String },
    ExpectDelivered(usize),
    ExpectDenied(usize),
    ExpectEscaped(usize),
    ExpectUntrustedRead { field_id: String, expected: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub manifest_path: String,
    /// Steps with their 1-based source lines.
    pub steps: Vec<(usize, Step)>,
}

/// Where relative `manifest` paths resolve.
#[derive(Debug, Clone)]
pub enum ScenarioBase {
    Embedded,
    Dir(PathBuf),
}

fn tokenize(line: &str) -> Result<Vec<String>, String> {
    let mut out = Vec::new();
    let mut chars = line.char_indices().peekable();
    while let Some(&(i, c)) = chars.peek() {
        if c.is_whitespace() {
            chars.next();
            continue;
        }
        if c == '#' {
            break;
        }
        if c == '"' {
            let mut end = None;
            let mut escaped = false;
            chars.next();
            for (j, d) in chars.by_ref() {
                if escaped {
                    escaped = false;
                } else if d == '\\' {
                    escaped = true;
                } else if d == '"' {
                    end = Some(j);
                    break;
                }
            }
            let end = end.ok_or("unterminated string")?;
            let s: String = serde_json::from_str(&line[i..=end]).map_err(|e| e.to_string())?;
            out.push(format!("\"{}", s));
            continue;
        }
        let start = i;
        let mut end = line.len();
        while let Some(&(j, d)) = chars.peek() {
            if d.is_whitespace() {
                end = j;
                break;
            }
            chars.next();
        }
        out.push(format!("'{}", &line[start..end]));
    }
    Ok(out)
}

/// Token text without its quoting marker.
fn text(tok: &str) -> &str {
    &tok[1..]
}

fn is_bare(tok: &str, word: &str) -> bool {
    tok.starts_with('\'') && text(tok) == word
}

fn parse_arg(tok: &str) -> Arg {
    match tok.strip_prefix("'$") {
        Some(var) if !var.is_empty() => Arg::Var(var.to_string()),
        _ => Arg::Literal(text(tok).to_string()),
    }
}

fn split_arrow<'a>(toks: &'a [String], usage: &str) -> Result<(&'a [String], &'a str), String> {
    match toks.iter().position(|t| is_bare(t, "->")) {
        Some(i) if i + 2 == toks.len() => Ok((&toks[..i], text(&toks[i + 1]))),
        _ => Err(format!("expected `{usage}`")),
    }
}

fn count(toks: &[String], usage: &str) -> Result<usize, String> {
    if toks.len() != 2 {
        return Err(format!("expected `{usage}`"));
    }
    text(&toks[1])
        .parse()
        .map_err(|_| format!("expected a count, found {:?}", text(&toks[1])))
}

fn parse_step(toks: &[String]) -> Result<Step, String> {
    let directive = text(&toks[0]);
    let one = |usage: &str| -> Result<(), String> {
        if toks.len() == 3 {
            Ok(())
        } else {
            Err(format!("expected `{usage}`"))
        }
    };
    Ok(match directive {
        "field" => {
            one("field <field_id> <Label>")?;
            Step::RegisterField {
                field_id: text(&toks[1]).to_string(),
                label: text(&toks[2]).to_string(),
            }
        }
        "set" => {
            one("set <field_id> <value>")?;
            Step::SetValue {
                field_id: text(&toks[1]).to_string(),
                value: text(&toks[2]).to_string(),
            }
        }
        "call" => {
            let (bind, rest) = if toks.len() >= 4 && is_bare(&toks[2], "=") {
                (Some(text(&toks[1]).to_string()), &toks[3..])
            } else {
                (None, &toks[1..])
            };
            let Some((qm, args)) = rest.split_first() else {
                return Err("expected `call [<var> =] <QM> <arg>...`".into());
            };
            Step::CallQm {
                bind,
                qm: text(qm).to_string(),
                args: args.iter().map(|t| parse_arg(t)).collect(),
            }
        }
        "post" | "leak-post" => {
            let (payload, url) = split_arrow(&toks[1..], &format!("{directive} <arg>... -> <url>"))?;
            let payload = payload.iter().map(|t| parse_arg(t)).collect();
            let url = url.to_string();
            if directive == "post" {
                Step::NetworkPost { payload, url }
            } else {
                Step::LeakPost { payload, url }
            }
        }
        "sms" => {
            let (payload, number) = split_arrow(&toks[1..], "sms <arg>... -> <number>")?;
            Step::SmsSend {
                payload: payload.iter().map(|t| parse_arg(t)).collect(),
                number: number.to_string(),
            }
        }
        "untrusted-read" => {
            let (field, var) = split_arrow(&toks[1..], "untrusted-read <field_id> -> <var>")?;
            if field.len() != 1 {
                return Err("expected `untrusted-read <field_id> -> <var>`".into());
            }
            Step::UntrustedRead {
                field_id: text(&field[0]).to_string(),
                bind: var.to_string(),
            }
        }
        "expect-delivered" => Step::ExpectDelivered(count(toks, "expect-delivered <n>")?),
        "expect-denied" => Step::ExpectDenied(count(toks, "expect-denied <n>")?),
        "expect-escaped" => Step::ExpectEscaped(count(toks, "expect-escaped <n>")?),
        "expect-untrusted" => {
            one("expect-untrusted <field_id> <value>")?;
            Step::ExpectUntrustedRead {
                field_id: text(&toks[1]).to_string(),
                expected: text(&toks[2]).to_string(),
            }
        }
        other => return Err(format!("unknown step {other:?}")),
    })
}

fn step_vars(step: &Step) -> Vec<&str> {
    let args = match step {
        Step::CallQm { args, .. } => args,
        Step::NetworkPost { payload, .. }
        | Step::SmsSend { payload, .. }
        | Step::LeakPost { payload, .. } => payload,
        _ => return Vec::new(),
    };
    args.iter()
        .filter_map(|a| match a {
            Arg::Var(v) => Some(v.as_str()),
            Arg::Literal(_) => None,
        })
        .collect()
}

pub fn parse_scenario(text_in: &str) -> Result<Scenario, ScenarioError> {
    let mut name = None;
    let mut manifest_path = None;
    let mut steps = Vec::new();
    let mut bound: HashSet<String> = HashSet::new();
    let mut fields: HashSet<String> = HashSet::new();

    for (idx, line) in text_in.lines().enumerate() {
        let line_no = idx + 1;
        let perr = |message: String| ScenarioError::Parse {
            line: line_no,
            message,
        };
        let toks = tokenize(line).map_err(perr)?;
        if toks.is_empty() {
            continue;
        }
        match text(&toks[0]) {
            "scenario" => {
                if name.is_some() || manifest_path.is_some() || !steps.is_empty() {
                    return Err(perr("`scenario` must be the first directive".into()));
                }
                if toks.len() != 2 {
                    return Err(perr("expected `scenario <name>`".into()));
                }
                name = Some(text(&toks[1]).to_string());
            }
            "manifest" => {
                if manifest_path.is_some() || !steps.is_empty() {
                    return Err(perr("`manifest` must appear once, before any step".into()));
                }
                if toks.len() != 2 {
                    return Err(perr("expected `manifest <path>`".into()));
                }
                manifest_path = Some(text(&toks[1]).to_string());
            }
            _ => {
                if manifest_path.is_none() {
                    return Err(perr("missing `manifest` before first step".into()));
                }
                let step = parse_step(&toks).map_err(perr)?;
                for var in step_vars(&step) {
                    if !bound.contains(var) {
                        return Err(perr(format!("variable ${var} used before it is bound")));
                    }
                }
                match &step {
                    Step::RegisterField { field_id, .. } => {
                        if !fields.insert(field_id.clone()) {
                            return Err(perr(format!("field {field_id:?} registered twice")));
                        }
                    }
                    Step::SetValue { field_id, .. }
                    | Step::UntrustedRead { field_id, .. }
                    | Step::ExpectUntrustedRead { field_id, .. } => {
                        if !fields.contains(field_id) {
                            return Err(perr(format!("field {field_id:?} is not registered")));
                        }
                    }
                    Step::CallQm { qm, .. } if !BUILTIN_QMS.contains(&qm.as_str()) => {
                        return Err(perr(format!("unknown QM {qm:?}")));
                    }
                    _ => {}
                }
                match &step {
                    Step::CallQm { bind: Some(v), .. } | Step::UntrustedRead { bind: v, .. } => {
                        bound.insert(v.clone());
                    }
                    _ => {}
                }
                steps.push((line_no, step));
            }
        }
    }

    let manifest_path = manifest_path.ok_or(ScenarioError::Parse {
        line: text_in.lines().count().max(1),
        message: "missing `manifest`".into(),
    })?;
    Ok(Scenario {
        name: name.unwrap_or_else(|| "unnamed".into()),
        manifest_path,
        steps,
    })
}

/// Built-in name or path to a scenario file.
pub fn load(target: &str) -> Result<(Scenario, ScenarioBase), ScenarioError> {
    if let Some(text) = builtin_text(target) {
        return Ok((parse_scenario(text)?, ScenarioBase::Embedded));
    }
    let path = Path::new(target);
    let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
        path: target.to_string(),
        source,
    })?;
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((parse_scenario(&text)?, ScenarioBase::Dir(dir)))
}

fn read_manifest_text(base: &ScenarioBase, rel: &str) -> Result<String, ScenarioError> {
    match base {
        ScenarioBase::Embedded => EMBEDDED_FILES
            .iter()
            .find(|(n, _)| *n == rel)
            .map(|(_, t)| t.to_string())
            .ok_or_else(|| ScenarioError::Io {
                path: rel.to_string(),
                source: std::io::Error::new(std::io::ErrorKind::NotFound, "no embedded file"),
            }),
        ScenarioBase::Dir(dir) => {
            let path = dir.join(rel);
            std::fs::read_to_string(&path).map_err(|source| ScenarioError::Io {
                path: path.display().to_string(),
                source,
            })
        }
    }
}

fn qm_string(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Null => String::new(),
        other => other.to_string(),
    }
}

fn split_destination(args: &[Value]) -> crate::Result<(&[Value], String)> {
    let (dest, values) = args
        .split_last()
        .ok_or_else(|| Error::QmFailed("missing destination argument".into()))?;
    Ok((values, qm_string(dest)))
}

fn plain_args(values: &[Value]) -> Vec<QmArg> {
    values.iter().cloned().map(QmArg::Plain).collect()
}

/// Registers the scenario QM library on `rt`.
pub fn register_builtin_qms(rt: &Runtime) -> crate::Result<()> {
    rt.register_qm("QM_getUIValue", |ctx, args| {
        let id = args.first().map(qm_string).unwrap_or_default();
        Ok(ctx.get_text(&id)?.into())
    })?;
    rt.register_qm("QM_login", |ctx, args| {
        if args.len() != 3 {
            return Err(Error::QmFailed("QM_login(email, password, url)".into()));
        }
        ctx.network_post(&plain_args(&args[..2]), &qm_string(&args[2]))?;
        Ok(Value::Null)
    })?;
    rt.register_qm("QM_concat", |_ctx, args| {
        Ok(args.iter().map(qm_string).collect::<String>().into())
    })?;
    rt.register_qm("QM_post", |ctx, args| {
        let (values, url) = split_destination(args)?;
        ctx.network_post(&plain_args(values), &url)?;
        Ok(Value::Null)
    })?;
    rt.register_qm("QM_sms", |ctx, args| {
        let (values, number) = split_destination(args)?;
        ctx.sms_send(&plain_args(values), &number)?;
        Ok(Value::Null)
    })?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Expectation {
    pub line: usize,
    pub description: String,
    pub held: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum StepOutcome {
    Ok,
    Denied(String),
    Blocked(String),
    Failed(String),
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub scenario: String,
    pub attempts: Vec<SinkAttempt>,
    pub escaped: usize,
    pub outcomes: Vec<(usize, StepOutcome)>,
    pub expectations: Vec<Expectation>,
}

impl RunReport {
    pub fn delivered(&self) -> usize {
        self.attempts.iter().filter(|a| a.delivered()).count()
    }

    pub fn denied(&self) -> usize {
        self.attempts
            .iter()
            .filter(|a| a.status == DeliveryStatus::Denied)
            .count()
    }

    /// All expectations held and no step failed unexpectedly.
    pub fn passed(&self) -> bool {
        self.expectations.iter().all(|e| e.held)
            && !self
                .outcomes
                .iter()
                .any(|(_, o)| matches!(o, StepOutcome::Failed(_)))
    }
}

#[derive(Clone)]
enum Binding {
    Handle(OpaqueHandle),
    Plain(Value),
}

struct Runner {
    rt: Runtime,
    vars: HashMap<String, Binding>,
    stash: Arc<Mutex<Option<SandboxContext>>>,
    escaped: usize,
}

impl Runner {
    fn resolve(&self, args: &[Arg]) -> Result<Vec<QmArg>, String> {
        args.iter()
            .map(|a| match a {
                Arg::Literal(s) => Ok(QmArg::Plain(Value::String(s.clone()))),
                Arg::Var(v) => match self.vars.get(v) {
                    Some(Binding::Handle(h)) => Ok(QmArg::Handle(h.clone())),
                    Some(Binding::Plain(p)) => Ok(QmArg::Plain(p.clone())),
                    None => Err(format!("${v} is unbound (its producing step failed)")),
                },
            })
            .collect()
    }

    fn call(&mut self, bind: Option<&str>, qm: &str, args: Vec<QmArg>) -> StepOutcome {
        match self.rt.qm_call(qm, &args) {
            Ok(h) => {
                if let Some(v) = bind {
                    self.vars.insert(v.to_string(), Binding::Handle(h));
                }
                StepOutcome::Ok
            }
            Err(e @ Error::PolicyViolation { .. }) => StepOutcome::Denied(e.to_string()),
            Err(e) => StepOutcome::Failed(e.to_string()),
        }
    }

    /// Obtains a context that has already escaped its QM call.
    fn escaped_context(&mut self) -> SandboxContext {
        let stash = Arc::clone(&self.stash);
        let slot = Arc::clone(&stash);
        let probe = format!("__stash{}", self.rt.registry().len());
        self.rt
            .register_qm(&probe, move |ctx, _| {
                *slot.lock().expect("stash poisoned") = Some(ctx.clone());
                Ok(Value::Null)
            })
            .expect("fresh probe name");
        self.rt.qm_call(&probe, &[]).expect("probe QM cannot fail");
        let ctx = stash.lock().expect("stash poisoned").take();
        ctx.expect("probe stashed its context")
    }

    fn leak_post(&mut self, payload: Vec<QmArg>, url: &str) -> StepOutcome {
        let ctx = self.escaped_context();
        let mut leaked = Vec::new();
        for arg in &payload {
            if let QmArg::Handle(h) = arg {
                if ctx.declassify(h) != Err(Error::ContextEscaped) {
                    leaked.push(format!("declassified {}", h.id()));
                }
            }
        }
        match network_post(&ctx, &payload, url) {
            Err(Error::ContextEscaped) => {}
            other => leaked.push(format!("post returned {other:?}")),
        }
        if leaked.is_empty() {
            self.escaped += 1;
            StepOutcome::Blocked("escaped context refused".into())
        } else {
            StepOutcome::Failed(leaked.join("; "))
        }
    }
}

/// Execute against a fresh runtime. Manifest, label, and field problems
/// are reported as errors; security outcomes land in the report.
pub fn run(
    scenario: &Scenario,
    base: &ScenarioBase,
    transport: Arc<dyn Transport>,
) -> Result<RunReport, ScenarioError> {
    let manifest_text = read_manifest_text(base, &scenario.manifest_path)?;
    let manifest = parse_manifest(&manifest_text).map_err(|source| ScenarioError::Manifest {
        path: scenario.manifest_path.clone(),
        source,
    })?;
    let rt = Runtime::new(manifest);
    rt.set_transport(transport);
    register_builtin_qms(&rt).expect("fresh registry");

    let mut runner = Runner {
        rt,
        vars: HashMap::new(),
        stash: Arc::default(),
        escaped: 0,
    };
    let mut outcomes = Vec::new();
    let mut expectations = Vec::new();

    for (line, step) in &scenario.steps {
        let line = *line;
        let setup = |source: Error| ScenarioError::Setup { line, source };
        let outcome = match step {
            Step::RegisterField { field_id, label } => {
                let label = TaintLabel::new(runner.rt.manifest().app_id(), label.as_str())
                    .map_err(|e| ScenarioError::Parse {
                        line,
                        message: e.to_string(),
                    })?;
                runner.rt.store().register_field(field_id, label).map_err(setup)?;
                StepOutcome::Ok
            }
            Step::SetValue { field_id, value } => {
                runner.rt.store().set_value(field_id, value).map_err(setup)?;
                StepOutcome::Ok
            }
            Step::UntrustedRead { field_id, bind } => {
                let v = runner.rt.store().get_text_untrusted(field_id).map_err(setup)?;
                runner.vars.insert(bind.clone(), Binding::Plain(v.into()));
                StepOutcome::Ok
            }
            Step::CallQm { bind, qm, args } => match runner.resolve(args) {
                Ok(args) => runner.call(bind.as_deref(), qm, args),
                Err(e) => StepOutcome::Failed(e),
            },
            Step::NetworkPost { payload, url } | Step::SmsSend { payload, number: url } => {
                let qm = if matches!(step, Step::NetworkPost { .. }) {
                    "QM_post"
                } else {
                    "QM_sms"
                };
                match runner.resolve(payload) {
                    Ok(mut args) => {
                        args.push(QmArg::plain(url.as_str()));
                        runner.call(None, qm, args)
                    }
                    Err(e) => StepOutcome::Failed(e),
                }
            }
            Step::LeakPost { payload, url } => match runner.resolve(payload) {
                Ok(args) => runner.leak_post(args, url),
                Err(e) => StepOutcome::Failed(e),
            },
            Step::ExpectDelivered(n) | Step::ExpectDenied(n) | Step::ExpectEscaped(n) => {
                let log = runner.rt.attempt_log();
                let (what, actual) = match step {
                    Step::ExpectDelivered(_) => {
                        ("delivered", log.iter().filter(|a| a.delivered()).count())
                    }
                    Step::ExpectDenied(_) => (
                        "denied",
                        log.iter()
                            .filter(|a| a.status == DeliveryStatus::Denied)
                            .count(),
                    ),
                    _ => ("escaped", runner.escaped),
                };
                expectations.push(Expectation {
                    line,
                    description: format!("{what} == {n} (actual {actual})"),
                    held: actual == *n,
                });
                StepOutcome::Ok
            }
            Step::ExpectUntrustedRead { field_id, expected } => {
                let actual = runner.rt.store().get_text_untrusted(field_id).map_err(setup)?;
                expectations.push(Expectation {
                    line,
                    description: format!(
                        "untrusted read of {field_id} == {expected:?} (actual {actual:?})"
                    ),
                    held: &actual == expected,
                });
                StepOutcome::Ok
            }
        };
        outcomes.push((line, outcome));
    }

    Ok(RunReport {
        scenario: scenario.name.clone(),
        attempts: runner.rt.attempt_log(),
        escaped: runner.escaped,
        outcomes,
        expectations,
    })
}
