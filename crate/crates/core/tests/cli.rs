use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn acktr(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_acktr")).args(args).current_dir(cwd).output().unwrap()
}

fn write_config(dir: &Path, body: &str) {
    fs::write(dir.join("run.ini"), body).unwrap();
}

const SMALL: &str = "[run]\nenv = cartpole\ntotal_timesteps = 160\nrecord_timing = false\noutput_dir = out\n\n[model]\nhidden = 4\n";

#[test]
fn train_with_zero_timesteps() {
    let tmp = tempfile::tempdir().unwrap();
    write_config(tmp.path(), SMALL);
    let out = acktr(&["train", "run.ini", "--set", "run.total_timesteps=0"], tmp.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(tmp.path().join("out/metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1);
    assert!(tmp.path().join("out/checkpoints/initial.ckpt").is_file());
}

#[test]
fn validation_errors_name_the_key() {
    let tmp = tempfile::tempdir().unwrap();
    write_config(tmp.path(), SMALL);
    let out = acktr(&["train", "run.ini", "--set", "kfac.dleta=0.1"], tmp.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("kfac.dleta"));

    write_config(tmp.path(), "[trainer]\ngamma = 2\n");
    let out = acktr(&["train", "run.ini"], tmp.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("trainer.gamma"));
}

#[test]
fn usage_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(acktr(&["train"], tmp.path()).status.code(), Some(2));
    assert_eq!(acktr(&["frobnicate"], tmp.path()).status.code(), Some(2));
    assert_eq!(acktr(&["sweep", "run.ini"], tmp.path()).status.code(), Some(2));
}

#[test]
fn sweep_report_and_plot_data() {
    let tmp = tempfile::tempdir().unwrap();
    write_config(tmp.path(), SMALL);
    let out = acktr(&["sweep", "run.ini", "--grid", "kfac.eta_max=0.7,0.2,0.07,0.02"], tmp.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let dirs: Vec<_> = fs::read_dir(tmp.path().join("out")).unwrap().collect();
    assert_eq!(dirs.len(), 4);
    assert!(tmp.path().join("out/kfac.eta_max=0.07/metrics.csv").is_file());

    let out = acktr(&["report", "out"], tmp.path());
    assert_eq!(out.status.code(), Some(0));
    let table = String::from_utf8(out.stdout).unwrap();
    assert_eq!(table.lines().count(), 5);
    assert!(table.lines().skip(1).all(|l| l.ends_with(",complete")));

    let out = acktr(&["sweep", "run.ini", "--grid", "run.seed=0,1,2", "--set", "run.output_dir=seeds", "--jobs", "2"], tmp.path());
    assert_eq!(out.status.code(), Some(0));
    let out = acktr(
        &["plot-data", "seeds/run.seed=0", "seeds/run.seed=1", "seeds/run.seed=2", "--out", "curve.csv"],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let curve = fs::read_to_string(tmp.path().join("curve.csv")).unwrap();
    assert!(curve.starts_with("update_index,runs,"));
    assert!(curve.lines().skip(1).all(|l| l.split(',').nth(1) == Some("3")));
}

#[test]
fn oracle_check_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = acktr(&["oracle-check"], tmp.path());
    let text = String::from_utf8_lossy(&out.stdout);
    assert_eq!(out.status.code(), Some(0), "{text}");
    assert!(text.lines().count() >= 9);
    assert!(text.lines().all(|l| l.starts_with("PASS")));
}
