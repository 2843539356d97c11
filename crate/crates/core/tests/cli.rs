//! End-to-end runs of the `ted` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tedkit::diffusion::WeightTrajectory;
use tedkit::stats::CorrelationResult;

fn ted(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ted"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("ted runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn run_dir(o: &Output) -> PathBuf {
    let out = stdout(o);
    let line = out
        .lines()
        .find_map(|l| l.strip_prefix("run directory: "))
        .unwrap_or_else(|| panic!("no run directory in {out:?} / {}", stderr(o)));
    PathBuf::from(line)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Generates the toy corpus and keeps the first `n` pairs so training is quick.
fn toy_inputs(root: &Path, n: usize) -> (PathBuf, PathBuf) {
    let o = ted(&["toygen", "--out", s(&root.join("gen"))]);
    assert!(o.status.success(), "{}", stderr(&o));
    let dir = run_dir(&o);
    let pairs: String = fs::read_to_string(dir.join("pairs.jsonl"))
        .unwrap()
        .lines()
        .take(n)
        .map(|l| format!("{l}\n"))
        .collect();
    let small = root.join("pairs.jsonl");
    fs::write(&small, pairs).unwrap();
    (small, dir.join("bench.jsonl"))
}

fn trained_checkpoint(root: &Path, pairs: &Path) -> PathBuf {
    let o = ted(&[
        "train", "--pairs", s(pairs), "--encoder", "toy:seed=7", "--fusion", "norm_avg", "--lr", "1e-3", "--out",
        s(&root.join("train")), "--threads", "1",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let dir = run_dir(&o);
    for f in ["agg.bin", "history.tsv", "config.toml", "fingerprint.txt"] {
        assert!(dir.join(f).is_file(), "missing {f}");
    }
    dir.join("agg.bin")
}

#[test]
fn eval_writes_reports_and_reruns_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let (pairs, bench) = toy_inputs(tmp.path(), 64);
    let ckpt = trained_checkpoint(tmp.path(), &pairs);
    let out = tmp.path().join("eval");
    let args = [
        "eval", "--bench", s(&bench), "--encoder", "toy:seed=7", "--fusion", "norm_avg", "--ckpt", s(&ckpt), "--out",
        s(&out),
    ];
    let first = ted(&args);
    assert_eq!(first.status.code(), Some(0), "{}", stderr(&first));
    let dir = run_dir(&first);
    let read = |d: &Path| {
        ["report.txt", "report.tsv", "report.json", "config.toml", "fingerprint.txt"]
            .map(|f| fs::read(d.join(f)).unwrap_or_else(|_| panic!("missing {f}")))
    };
    let before = read(&dir);
    let second = ted(&args);
    assert_eq!(second.status.code(), Some(0));
    assert_eq!(run_dir(&second), dir);
    assert_eq!(read(&dir), before);

    let fp = String::from_utf8(before[4].clone()).unwrap();
    assert!(dir.ends_with(&fp.trim()[..16]));
    let json: serde_json::Value = serde_json::from_slice(&before[2]).unwrap();
    assert_eq!(json["n_instances"], 400);
}

#[test]
fn shuffle_and_stability_commands() {
    let tmp = tempfile::tempdir().unwrap();
    let (pairs, bench) = toy_inputs(tmp.path(), 64);
    let ckpt = trained_checkpoint(tmp.path(), &pairs);
    let o = ted(&["shuffle", "--bench", s(&bench), "--ckpt", s(&ckpt), "--encoder", "toy:seed=7", "--out", s(tmp.path())]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(run_dir(&o).join("report.json").is_file());

    let o = ted(&[
        "stability", "--pairs", s(&pairs), "--bench", s(&bench), "--lr", "1e-3", "--n-seeds", "2", "--compare", "last",
        "--out", s(tmp.path()),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let dir = run_dir(&o);
    let tsv = fs::read_to_string(dir.join("stability.tsv")).unwrap();
    assert_eq!(tsv.lines().count(), 5);
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("stability.json")).unwrap()).unwrap();
    assert!(json["compare"]["ranking_stable"].is_boolean());
}

#[test]
fn missing_checkpoint_is_an_input_error_naming_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let (_, bench) = toy_inputs(tmp.path(), 4);
    let missing = tmp.path().join("nowhere").join("agg.bin");
    let o = ted(&["eval", "--bench", s(&bench), "--ckpt", s(&missing), "--out", s(tmp.path())]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    let line = err.lines().find(|l| l.starts_with("error\t")).expect("error line");
    assert!(line.contains("code=2"), "{line}");
    assert!(line.contains(s(&missing)), "{line}");
}

#[test]
fn usage_and_validation_errors_exit_one() {
    let o = ted(&["eval", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("error\tcode=1\tkind=usage"));

    let o = ted(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(1));

    let tmp = tempfile::tempdir().unwrap();
    let (pairs, _) = toy_inputs(tmp.path(), 4);
    let o = ted(&["train", "--pairs", s(&pairs), "--lr", "-1", "--out", s(tmp.path())]);
    assert_eq!(o.status.code(), Some(1));
    let o = ted(&["train", "--pairs", s(&pairs), "--fusion", "median", "--out", s(tmp.path())]);
    assert_eq!(o.status.code(), Some(1));
    let o = ted(&["train", "--out", s(tmp.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--pairs"));

    assert_eq!(ted(&["--help"]).status.code(), Some(0));
    assert_eq!(ted(&["--version"]).status.code(), Some(0));
}

#[test]
fn malformed_records_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("pairs.jsonl");
    fs::write(&bad, "{\"id\": \"p0\", \"caption_a\": \"x\"}\n").unwrap();
    let o = ted(&["train", "--pairs", s(&bad), "--out", s(tmp.path())]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn correlate_reads_a_two_column_table() {
    let tmp = tempfile::tempdir().unwrap();
    let table = tmp.path().join("scores.tsv");
    fs::write(&table, "benchmark\tdownstream\n53.62\t65.13\n55.37\t70.59\n55.31\t68.70\n56.81\t77.94\n").unwrap();
    let o = ted(&["correlate", "--input", s(&table), "--out", s(tmp.path())]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let rec = fs::read_to_string(run_dir(&o).join("correlation.tsv")).unwrap();
    let c = CorrelationResult::parse_record(&rec).unwrap();
    assert_eq!(c.n, 4);
    assert!((c.r - 0.9587).abs() < 5e-4);

    fs::write(&table, "1 2\n3\n").unwrap();
    let o = ted(&["correlate", "--input", s(&table), "--out", s(tmp.path())]);
    assert_eq!(o.status.code(), Some(2));
    let o = ted(&["correlate", "--input", s(&tmp.path().join("absent.tsv")), "--out", s(tmp.path())]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn config_file_supplies_defaults_and_flags_win() {
    let tmp = tempfile::tempdir().unwrap();
    let table = tmp.path().join("xy.tsv");
    fs::write(&table, "1 1\n2 3\n3 2\n4 5\n").unwrap();
    let cfg = tmp.path().join("ted.toml");
    fs::write(&cfg, format!("input = {:?}\nseed = 5\n", s(&table))).unwrap();

    let o = ted(&["correlate", "--config", s(&cfg), "--seed", "6", "--out", s(tmp.path())]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let echoed = fs::read_to_string(run_dir(&o).join("config.toml")).unwrap();
    assert!(echoed.contains("seed = 6"), "{echoed}");
    assert!(echoed.contains("xy.tsv"), "{echoed}");

    fs::write(&cfg, "unknown-key = 1\n").unwrap();
    let o = ted(&["correlate", "--config", s(&cfg), "--out", s(tmp.path())]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn toydiff_writes_a_freezing_trajectory() {
    let tmp = tempfile::tempdir().unwrap();
    let o = ted(&[
        "toydiff", "--steps", "60", "--freeze-step", "25", "--captions", "16", "--batch", "8", "--out", s(tmp.path()),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let dir = run_dir(&o);
    let traj = WeightTrajectory::parse_tsv(&fs::read_to_string(dir.join("trajectory.tsv")).unwrap()).unwrap();
    assert_eq!(traj.rows.len(), 60);
    let frozen: Vec<_> = traj.rows.iter().filter(|r| r.step >= 25).collect();
    assert!(frozen.iter().all(|r| r.frozen && r.alphas == frozen[0].alphas));
    assert!(traj.rows.iter().filter(|r| r.step < 25).all(|r| !r.frozen));
    for f in ["denoiser.bin", "fusion_weights.txt", "loss.tsv", "summary.json"] {
        assert!(dir.join(f).is_file(), "missing {f}");
    }
    let blob = fs::read(dir.join("denoiser.bin")).unwrap();
    assert!(tedkit::diffusion::decode_denoiser(&blob).is_ok());
}
