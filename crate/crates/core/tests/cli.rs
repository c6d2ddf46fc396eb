//! End-to-end runs of the command-line tool on a tiny configuration.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use vit_inversion::format::load_sparse_image;
use vit_inversion::report::REPORT_SCHEMA;

const TINY: &str = "\
[model]
height = 16
width = 16
patch = 4
dim = 16
layers = 1
heads = 2
classes = 2

[dataset]
train_per_class = 12
val_per_class = 6

[train]
epochs = 1

[inversion]
iterations = 8
v = 4
schedule = 1:0.3,2:0.3,4:0.3,6:0.3
select_at = 2

[distill]
batch_size = 4

[experiment]
images = 8
seeds = 1
";

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_vit-inversion"))
}

fn run(args: &[&str]) -> Output {
    let out = bin().args(args).output().unwrap();
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.cfg");
    std::fs::write(&path, TINY).unwrap();
    path
}

fn report(dir: &Path) -> Value {
    let text = std::fs::read_to_string(dir.join("report.json")).unwrap();
    let value: Value = serde_json::from_str(&text).unwrap();
    let schema: Value = serde_json::from_str(REPORT_SCHEMA).unwrap();
    let validator = jsonschema::validator_for(&schema).unwrap();
    let errors: Vec<String> = validator.iter_errors(&value).map(|e| e.to_string()).collect();
    assert!(errors.is_empty(), "schema violations: {errors:?}");
    value
}

fn error_of(out: &Output) -> Value {
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().unwrap();
    serde_json::from_str(line).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn pipeline_produces_schema_valid_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let cfg = s(&cfg);
    let teacher_dir = tmp.path().join("teacher");
    run(&["train-teacher", "--config", cfg, "--out", s(&teacher_dir)]);
    let ckpt = teacher_dir.join("teacher.ckpt");
    assert!(ckpt.is_file());
    assert_eq!(report(&teacher_dir)["command"], "train-teacher");

    let inv = tmp.path().join("inv");
    run(&["invert", "--config", cfg, "--teacher", s(&ckpt), "--label", "1", "--jobs", "2", "--out", s(&inv)]);
    let r = report(&inv);
    assert_eq!(r["results"]["images"].as_array().unwrap().len(), 8);
    let img = load_sparse_image(inv.join("images/pri-y1-s1-k3.pri")).unwrap();
    assert_eq!((img.k, img.v, img.label, img.seed, img.patches.len()), (3, 4, 1, 1, 4));
    let measured = &r["cost"]["measured"][0];
    assert_eq!(measured["method"], "pri");

    let dump = tmp.path().join("dump");
    run(&["dump", "--config", cfg, "--input", s(&inv.join("images")), "--out", s(&dump)]);
    let ppm = std::fs::read(dump.join("pri-y1-s0-k1.ppm")).unwrap();
    assert!(ppm.starts_with(b"P6\n16 16\n255\n"));

    let analyze = tmp.path().join("analyze");
    run(&["analyze", "--config", cfg, "--teacher", s(&ckpt), "--input", s(&inv.join("images")), "--out", s(&analyze)]);
    let names: Vec<String> =
        report(&analyze)["confidence"].as_array().unwrap().iter().map(|c| c["name"].as_str().unwrap().to_string()).collect();
    assert_eq!(names, ["pri-k1", "pri-k2", "pri-k3", "pri-k4"]);

    let distill = tmp.path().join("distill");
    run(&["distill", "--config", cfg, "--teacher", s(&ckpt), "--out", s(&distill)]);
    let csv = std::fs::read_to_string(distill.join("accuracies.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.starts_with("method,seed,val_accuracy\n"));
    report(&distill);

    let one = tmp.path().join("one");
    run(&["one-class", "--config", cfg, "--teacher", s(&ckpt), "--target", "1", "--set", "experiment.methods=pri,smi", "--out", s(&one)]);
    assert!(one.join("confusion-pri-s0.csv").is_file());
    assert!(one.join("confusion-smi-s0.csv").is_file());
    report(&one);

    let sel = tmp.path().join("sel");
    run(&["selection-study", "--config", cfg, "--teacher", s(&ckpt), "--out", s(&sel)]);
    let csv = std::fs::read_to_string(sel.join("selection.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    report(&sel);
}

#[test]
fn cost_command_reports_exact_values() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["cost", "--set", "inversion.iterations=400", "--set", "inversion.v=2", "--out", s(tmp.path())]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("PRI/SMI* FFN ratio  3/4"), "{stdout}");
    let r = report(tmp.path());
    assert_eq!(r["cost"]["ratios"]["pri_over_smi_star_ffn"]["exact"], "3/4");
    assert!(r["cost"]["ordering"]["ffn_ordering"].as_bool().unwrap());
    assert!(tmp.path().join("cost.txt").is_file());
    assert!(!tmp.path().join("timing.json").exists());
}

#[test]
fn timing_is_opt_in() {
    let tmp = tempfile::tempdir().unwrap();
    run(&["cost", "--timing", "--out", s(tmp.path())]);
    let timing: Value = serde_json::from_str(&std::fs::read_to_string(tmp.path().join("timing.json")).unwrap()).unwrap();
    assert!(timing["wall_clock_seconds"].as_f64().unwrap() >= 0.0);
    let text = std::fs::read_to_string(tmp.path().join("report.json")).unwrap();
    assert!(!text.contains("wall_clock"));
}

#[test]
fn effective_config_reloads() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let first = tmp.path().join("a");
    run(&["cost", "--config", s(&cfg), "--seed", "17", "--out", s(&first)]);
    let effective = first.join("effective.cfg");
    let text = std::fs::read_to_string(&effective).unwrap();
    assert!(text.contains("seed = 17"));
    run(&["cost", "--config", s(&effective)]);
    assert_eq!(std::fs::read_to_string(first.join("effective.cfg")).unwrap(), text);
}

#[test]
fn errors_are_json_lines() {
    let tmp = tempfile::tempdir().unwrap();
    let err = error_of(&bin().args(["cost", "--set", "inversion.v=1", "--out", s(tmp.path())]).output().unwrap());
    assert_eq!(err["error"]["kind"], "config");
    let err = error_of(&bin().args(["cost", "--set", "nonsense.key=1", "--out", s(tmp.path())]).output().unwrap());
    assert_eq!(err["error"]["kind"], "config");
    let err = error_of(&bin().args(["cost", "--config", "/nonexistent/x.cfg"]).output().unwrap());
    assert_eq!(err["error"]["kind"], "io");

    let bad = tmp.path().join("bad.cfg");
    std::fs::write(&bad, "[model]\ndim = 16\nheads = three\n").unwrap();
    let err = error_of(&bin().args(["cost", "--config", s(&bad)]).output().unwrap());
    assert!(err["error"]["message"].as_str().unwrap().contains("line 3"), "{err}");

    let junk = tmp.path().join("junk.pri");
    std::fs::write(&junk, b"PRI1 not really").unwrap();
    let err = error_of(&bin().args(["dump", "--input", s(&junk), "--out", s(tmp.path())]).output().unwrap());
    assert_eq!(err["error"]["kind"], "format");

    let err = error_of(&bin().args(["invert", "--teacher", s(&junk), "--out", s(tmp.path())]).output().unwrap());
    assert_eq!(err["error"]["kind"], "format");
}
