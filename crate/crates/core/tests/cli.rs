use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_opaqueflow");

fn run(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env_remove("OPAQUEFLOW_TRANSPORT")
        .output()
        .expect("binary runs")
}

fn write(dir: &TempDir, name: &str, text: &str) -> String {
    let path = dir.path().join(name);
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const LOGIN: &str = "app com.example.smartapp\nlabel Taint_UI\nallow Taint_UI -> NETWORK url http://appcloudserver.com\n";

#[test]
fn check_accepts_login_manifest() {
    let dir = TempDir::new().unwrap();
    let m = write(&dir, "login.manifest", LOGIN);
    let o = run(&["check", &m]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("com.example.smartapp"));
}

#[test]
fn check_rejects_undeclared_label() {
    let dir = TempDir::new().unwrap();
    let m = write(&dir, "bad.manifest", "app a.b\nlabel X\nallow Ghost -> SMS\n");
    let o = run(&["check", &m]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("Ghost"), "{err}");
    assert!(err.contains("line 3, column 7"), "position missing: {err}");
}

#[test]
fn check_missing_file_is_io_error() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("nope.manifest");
    let o = run(&["check", missing.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn disclose_lists_every_rule() {
    let dir = TempDir::new().unwrap();
    let m = write(&dir, "login.manifest", LOGIN);
    let o = run(&["disclose", &m]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(
        stdout(&o),
        "flows for com.example.smartapp:\ncom.example.smartapp/Taint_UI -> NETWORK url http://appcloudserver.com:80/\n"
    );

    let empty = write(&dir, "empty.manifest", "app a.b\nlabel X\n");
    let o = run(&["disclose", &empty]);
    assert_eq!(stdout(&o), "flows for a.b:\n");

    let three = write(
        &dir,
        "three.manifest",
        "app a.b\nlabel X\nlabel Y\nallow X -> SMS\nallow Y -> NETWORK\nallow X -> NETWORK url https://h.example/p\n",
    );
    let o = run(&["disclose", &three]);
    assert_eq!(stdout(&o).lines().count(), 4);
}

#[test]
fn builtin_scenarios_pass() {
    for name in ["login-ok", "login-exfiltration", "malicious-library"] {
        let o = run(&["run", name]);
        assert_eq!(o.status.code(), Some(0), "{name}: {}{}", stdout(&o), stderr(&o));
        assert!(stdout(&o).ends_with("result: pass\n"), "{name}");
    }
}

#[test]
fn exfiltration_is_logged_as_deny() {
    let o = run(&["run", "login-exfiltration"]);
    let out = stdout(&o);
    assert!(out.lines().any(|l| l.starts_with("DENY NETWORK ")), "{out}");
    assert!(!out.lines().any(|l| l.starts_with("ALLOW ")), "{out}");
}

#[test]
fn log_flag_writes_export() {
    let dir = TempDir::new().unwrap();
    let log = dir.path().join("attempts.log");
    let o = run(&["run", "login-ok", "--log", log.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(
        std::fs::read_to_string(&log).unwrap(),
        "ALLOW NETWORK http://appcloudserver.com:80/ taints=com.example.smartapp/Taint_UI\n"
    );
}

#[test]
fn failed_expectation_exits_one() {
    let dir = TempDir::new().unwrap();
    write(&dir, "app.manifest", LOGIN);
    let s = write(
        &dir,
        "wrong.scenario",
        "scenario wrong\nmanifest app.manifest\nfield e Taint_UI\nset e x\n\
         call v = QM_getUIValue e\npost $v -> http://elsewhere.example/\nexpect-delivered 1\n",
    );
    let o = run(&["run", &s]);
    assert_eq!(o.status.code(), Some(1), "{}{}", stdout(&o), stderr(&o));
    assert!(stdout(&o).contains("result: FAIL"));
}

#[test]
fn malformed_scenario_exits_two() {
    let dir = TempDir::new().unwrap();
    write(&dir, "app.manifest", LOGIN);
    let s = write(&dir, "bad.scenario", "scenario bad\nmanifest app.manifest\npost $nothing -> http://x.example/\n");
    assert_eq!(run(&["run", &s]).status.code(), Some(2));
    assert_eq!(run(&["run", "no-such-builtin"]).status.code(), Some(3));
}

#[test]
fn unknown_transport_is_rejected() {
    let o = Command::new(BIN)
        .args(["run", "login-ok"])
        .env("OPAQUEFLOW_TRANSPORT", "pigeon")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("OPAQUEFLOW_TRANSPORT"));
}

#[test]
fn scenario_manifest_is_resolved_relative_to_file() {
    let dir = TempDir::new().unwrap();
    std::fs::create_dir(dir.path().join("sub")).unwrap();
    std::fs::write(dir.path().join("sub/app.manifest"), LOGIN).unwrap();
    let s = write(
        &dir,
        "rel.scenario",
        "scenario rel\nmanifest sub/app.manifest\nexpect-delivered 0\n",
    );
    assert!(Path::new(&s).exists());
    let o = run(&["run", &s]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
}
