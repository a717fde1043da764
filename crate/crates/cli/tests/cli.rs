use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn swifter(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_swifter"))
        .current_dir(dir)
        .env_remove("SWIFTER_SEED")
        .args(args)
        .output()
        .expect("spawn swifter")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = swifter(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn without_wall_time(csv: &str) -> Vec<String> {
    csv.lines()
        .map(|l| {
            let mut f: Vec<&str> = l.split(',').collect();
            f.remove(4);
            f.join(",")
        })
        .collect()
}

#[test]
fn bench_writes_eight_rows() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["bench", "--mode", "both", "--lens", "8,16,32,64", "--batch", "1", "--out", "report.csv"]);
    let text = fs::read_to_string(dir.path().join("report.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "mode,seq_len,batch,flops,wall_ns,peak_state_bytes");
    assert_eq!(lines.len(), 9);
    assert!(dir.path().join("report.csv.meta.json").exists());

    ok(dir.path(), &["report", "--csv", "report.csv", "--out", "fig.svg"]);
    let svg = fs::read_to_string(dir.path().join("fig.svg")).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 2);
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        &["frobnicate"][..],
        &["bench", "--out", "r.csv", "--bogus"],
        &["bench"],
        &["caption", "--ckpt", "m.swft"],
        &["bench", "--out", "r.csv", "--mode", "sideways"],
    ] {
        let out = swifter(dir.path(), args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        assert!(!out.stderr.is_empty());
    }
    assert_eq!(swifter(dir.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = swifter(dir.path(), &["caption", "--ckpt", "missing.swft", "--sample", "0"]);
    assert_eq!(out.status.code(), Some(1));
    let out = swifter(dir.path(), &["bench", "--lens", "8", "--budget", "10", "--out", "r.csv"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!dir.path().join("r.csv").exists());
}

#[test]
fn train_then_caption() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen-data", "--out", "data", "--count", "8"]);
    let train = ["train", "--data", "data", "--steps", "4", "--batch", "4", "--optimizer", "adam", "--lr", "1e-3"];
    ok(d, &[&train[..], &["--out", "a.swft", "--log", "a.csv"]].concat());
    ok(d, &[&train[..], &["--out", "b.swft", "--log", "b.csv"]].concat());
    assert_eq!(fs::read(d.join("a.swft")).unwrap(), fs::read(d.join("b.swft")).unwrap());
    assert_eq!(fs::read(d.join("a.csv")).unwrap(), fs::read(d.join("b.csv")).unwrap());

    let line = ok(d, &["caption", "--ckpt", "a.swft", "--sample", "3"]);
    assert_eq!(line.lines().count(), 1);
    assert!(!line.trim().is_empty());
    // regenerated from the data seed in the checkpoint
    assert_eq!(line, ok(d, &["caption", "--ckpt", "a.swft", "--sample", "3", "--data", "data"]));

    ok(d, &["train", "--data", "data", "--mode", "scst", "--init", "a.swft", "--steps", "2", "--batch", "2", "--out", "s.swft", "--log", "s.csv"]);
    let log = fs::read_to_string(d.join("s.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);
    assert!(log.lines().skip(1).all(|l| !l.ends_with(',')));
}

#[test]
fn seed_env_controls_data_and_bench() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let run = |seed: &str, out: &str| {
        let o = Command::new(env!("CARGO_BIN_EXE_swifter"))
            .current_dir(d)
            .env("SWIFTER_SEED", seed)
            .args(["gen-data", "--out", out, "--count", "4"])
            .output()
            .unwrap();
        assert!(o.status.success());
        fs::read(d.join(out).join("samples.bin")).unwrap()
    };
    assert_eq!(run("7", "a"), run("7", "b"));
    assert_ne!(run("7", "a"), run("8", "c"));
    let default = {
        ok(d, &["gen-data", "--out", "e", "--count", "4"]);
        fs::read(d.join("e/samples.bin")).unwrap()
    };
    assert_eq!(default, run("42", "f"));

    ok(d, &["bench", "--lens", "4,8", "--out", "r1.csv"]);
    ok(d, &["bench", "--lens", "4,8", "--out", "r2.csv"]);
    let a = fs::read_to_string(d.join("r1.csv")).unwrap();
    let b = fs::read_to_string(d.join("r2.csv")).unwrap();
    assert_eq!(without_wall_time(&a), without_wall_time(&b));
}
