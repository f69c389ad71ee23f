use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn uql(args: &[&str], threads: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_uql"));
    cmd.args(args).env_remove("UQL_THREADS");
    if let Some(t) = threads {
        cmd.env("UQL_THREADS", t);
    }
    cmd.output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

const TINY: &str = "\
# small enough for a test
n_per_class = 10
generators = DF, NT
epochs = 1
bayes_epochs = 1
batch_size = 8
n = 3
learning_rate = 0.001
";

fn write_config(dir: &Path) -> String {
    let path = dir.join("tiny.cfg");
    fs::write(&path, TINY).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn help_and_usage_errors() {
    assert_eq!(code(&uql(&["--help"], None)), 0);
    assert_eq!(code(&uql(&["train", "--help"], None)), 0);
    assert_eq!(code(&uql(&["no-such-command"], None)), 1);
    assert_eq!(code(&uql(&["train", "--seed", "minus one"], None)), 1);
}

#[test]
fn invalid_input_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.cfg");
    fs::write(&bad, "n = 0\n").unwrap();
    let out = dir.path().join("out");
    let out = out.to_str().unwrap();
    let o = uql(&["train", "--config", bad.to_str().unwrap(), "--out", out], None);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("n, epochs"));
    let missing = dir.path().join("missing.cfg");
    assert_eq!(code(&uql(&["train", "--config", missing.to_str().unwrap()], None)), 1);
    assert_eq!(code(&uql(&["train", "--set", "nokey", "--out", out], None)), 1);
    assert_eq!(code(&uql(&["loo", "--set", "generators=DF", "--out", out], None)), 1);
    assert_eq!(code(&uql(&["train", "--out", out, "--set", "n=0"], Some("4"))), 1);
    assert_eq!(code(&uql(&["train", "--out", out], Some("zero"))), 1);
}

#[test]
fn runtime_failure_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("empty");
    let o = uql(&["convert", "--config", &cfg, "--out", out.to_str().unwrap()], None);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn staged_commands_produce_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("run");
    let out_s = out.to_str().unwrap();
    for cmd in ["gen-data", "train", "convert", "eval", "retention"] {
        let o = uql(&[cmd, "--config", &cfg, "--out", out_s, "--seed", "3"], Some("2"));
        assert_eq!(code(&o), 0, "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
        assert!(out.join(format!("manifest_{}.json", cmd.replace('-', "_"))).exists());
    }
    assert_eq!(fs::read_dir(out.join("data/images")).unwrap().count(), 30);
    for f in ["G-DF/det.uql", "G-NT/bnn.uqb", "G-NT/report_bnn.csv", "G-DF/retention_bnn.csv", "summary.csv"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 5);
    assert!(summary.lines().skip(1).all(|l| l.starts_with("binary_per_generator,G-")));

    let single = dir.path().join("single");
    let single_s = single.to_str().unwrap();
    for cmd in ["train", "convert", "eval"] {
        assert_eq!(code(&uql(&[cmd, "--config", &cfg, "--out", single_s, "--seed", "3"], Some("1"))), 0);
    }
    assert_eq!(fs::read(single.join("summary.csv")).unwrap(), summary.as_bytes());
}

#[test]
fn maps_command_takes_sample_ids() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("maps");
    let out_s = out.to_str().unwrap();
    let o = uql(&["maps", "--config", &cfg, "--out", out_s, "--ids", "1,12"], None);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let pgm = fs::read_dir(out.join("maps"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "pgm"))
        .count();
    assert_eq!(pgm, 6);
    assert_eq!(code(&uql(&["maps", "--config", &cfg, "--out", out_s, "--ids", "999"], None)), 1);
}
