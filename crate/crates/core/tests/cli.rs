use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use zwsim::report::RunReport;

const SHORT: &str = "[scenario]
name = short_drain
seed = 7
duration = 2min

[controller]
home_id = 0xC0FFEE01

[device]
node_id = 0x05
profile = contact
position = 10, 0

[attacker]
strategy = drain_wakeup
target = 0x05
pps = 10
position = 50, 0

[stimulus]
at = 20s
target = 0x05
kind = door_open
";

fn zwsim(args: &[&str], out_env: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_zwsim"));
    cmd.args(args).env_remove("ZWSIM_OUT_DIR");
    if let Some(dir) = out_env {
        cmd.env("ZWSIM_OUT_DIR", dir);
    }
    cmd.output().unwrap()
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

#[test]
fn validate_reports_ok_and_line_numbers() {
    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("good.scn");
    let bad = dir.path().join("bad.scn");
    fs::write(&good, SHORT).unwrap();
    fs::write(&bad, SHORT.replace("pps = 10", "pps = ten")).unwrap();

    let ok = zwsim(&["validate", good.to_str().unwrap()], None);
    assert_eq!(ok.status.code(), Some(0));
    assert!(text(&ok.stdout).contains("short_drain"));

    let err = zwsim(&["validate", bad.to_str().unwrap()], None);
    assert_eq!(err.status.code(), Some(1));
    assert!(text(&err.stderr).contains("line 17: pps"), "{}", text(&err.stderr));
}

#[test]
fn missing_file_is_an_io_error() {
    let out = zwsim(&["validate", "/nonexistent/x.scn"], None);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn bad_arguments_exit_as_validation_errors() {
    assert_eq!(zwsim(&["frobnicate"], None).status.code(), Some(1));
    assert_eq!(zwsim(&["--help"], None).status.code(), Some(0));
}

#[test]
fn run_writes_outputs_under_env_dir_and_report_reads_them() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.scn");
    let b = dir.path().join("b.scn");
    fs::write(&a, SHORT).unwrap();
    fs::write(&b, SHORT.replace("short_drain", "other").replace("seed = 7", "seed = 8")).unwrap();
    let out_root = dir.path().join("out");

    let run = zwsim(&["run", a.to_str().unwrap(), b.to_str().unwrap()], Some(&out_root));
    assert_eq!(run.status.code(), Some(0), "{}", text(&run.stderr));
    for name in ["short_drain", "other"] {
        let d = out_root.join(name);
        let report: RunReport =
            serde_json::from_str(&fs::read_to_string(d.join("report.json")).unwrap()).unwrap();
        assert_eq!(report.scenario, name);
        let header = fs::read_to_string(d.join("metrics.csv")).unwrap();
        assert!(header.starts_with(
            "time_s,node,role,avg_power_mw,voltage_v,state,responses_last_min\n"
        ));
        let log = fs::read_to_string(d.join("events.log")).unwrap();
        assert!(log.lines().all(|l| l.split('\t').count() == 4));
    }

    let rep = zwsim(&["report", out_root.join("short_drain").to_str().unwrap()], None);
    assert_eq!(rep.status.code(), Some(0));
    let s = text(&rep.stdout);
    assert!(s.contains("suppressed alarms"));
    assert!(s.contains("metrics check dev05"));
}

#[test]
fn out_flag_beats_env() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("s.scn");
    fs::write(&f, SHORT).unwrap();
    let flag = dir.path().join("flag");
    let env = dir.path().join("env");
    let out = zwsim(
        &["run", f.to_str().unwrap(), "--out", flag.to_str().unwrap()],
        Some(&env),
    );
    assert_eq!(out.status.code(), Some(0));
    assert!(flag.join("short_drain/report.json").exists());
    assert!(!env.exists());
}

#[test]
fn report_on_empty_dir_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(zwsim(&["report", dir.path().to_str().unwrap()], None).status.code(), Some(3));
}

#[test]
fn presets_list_print_and_unknown() {
    let list = zwsim(&["preset", "--list"], None);
    assert_eq!(list.status.code(), Some(0));
    assert!(text(&list.stdout).contains("dos_controller_101m"));

    let printed = zwsim(&["preset", "fig8", "--print"], None);
    assert_eq!(printed.status.code(), Some(0));
    assert_eq!(text(&printed.stdout).matches("[scenario]").count(), 4);

    assert_eq!(zwsim(&["preset", "nope"], None).status.code(), Some(1));
}

#[test]
fn printed_preset_runs_identically_from_a_file() {
    let dir = tempfile::tempdir().unwrap();
    let printed = zwsim(&["preset", "dos_motion", "--print"], None);
    let f = dir.path().join("dm.scn");
    fs::write(&f, &printed.stdout).unwrap();
    let a = zwsim(&["run", f.to_str().unwrap()], Some(&dir.path().join("file")));
    let b = zwsim(&["preset", "dos_motion", "--out", dir.path().join("preset").to_str().unwrap()], None);
    assert_eq!(a.status.code(), Some(0));
    assert_eq!(b.status.code(), Some(0));
    let hash = |s: String| s.split("hash ").nth(1).unwrap().split(' ').next().unwrap().to_string();
    assert_eq!(hash(text(&a.stdout)), hash(text(&b.stdout)));
}
