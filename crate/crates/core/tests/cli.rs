use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use mlora::checkpoint;
use mlora::train::Method;

fn mlora(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mlora"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn mlora_stdin(args: &[&str], input: &str) -> Output {
    use std::io::Write;
    use std::process::Stdio;
    let mut child = Command::new(env!("CARGO_BIN_EXE_mlora"))
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(input.as_bytes()).unwrap();
    child.wait_with_output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn small_train(dir: &Path, name: &str, extra: &[&str]) -> Output {
    let out = dir.join(name);
    let mut args = vec![
        "train",
        "--task-spec",
        "train=96,test=64",
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    mlora(&args)
}

#[test]
fn export_p_prints_vectors() {
    let o = mlora(&["export-p", "--ranks", "1,2,4,8", "--max-rank", "8", "--scaling", "unit"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o), "4,3,2,2,1,1,1,1\n");
    assert_eq!(
        stdout(&mlora(&[
            "export-p",
            "--recover",
            "lora",
            "--max-rank",
            "4",
            "--scaling",
            "inverse"
        ])),
        "0.25,0.25,0.25,0.25\n"
    );
    assert_eq!(
        stdout(&mlora(&[
            "export-p",
            "--recover",
            "dylora:2",
            "--max-rank",
            "4",
            "--scaling",
            "inverse"
        ])),
        "0.5,0.5,0,0\n"
    );
    assert_eq!(
        stdout(&mlora(&[
            "export-p",
            "--ranks",
            "1,2,4,8",
            "--max-rank",
            "8",
            "--scaling",
            "inverse"
        ])),
        "1.875,0.875,0.375,0.375,0.125,0.125,0.125,0.125\n"
    );
    assert_eq!(mlora(&["export-p", "--ranks", "0,1"]).status.code(), Some(2));
}

#[test]
fn aurac_command() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("c.csv");
    fs::write(&csv, "rank,score\n1,32.4\n2,33.6\n").unwrap();
    let o = mlora(&["aurac", "--csv", csv.to_str().unwrap()]);
    assert_eq!((o.status.code(), stdout(&o)), (Some(0), "33.0000\n".to_string()));

    fs::write(&csv, "rank,score\n1,32.4\n").unwrap();
    assert_eq!(stdout(&mlora(&["aurac", "--csv", csv.to_str().unwrap()])), "32.4000\n");

    let o = mlora_stdin(
        &["aurac", "--csv", "-", "--log"],
        "rank,score\n1,33.5\n2,34.8\n4,34.3\n",
    );
    let lines: Vec<f64> = stdout(&o).lines().map(|l| l.parse().unwrap()).collect();
    assert!((lines[0] - 34.4).abs() <= 0.05);
    // log₂ spacing: intervals [0,1] and [1,2] weigh equally
    assert!((lines[1] - (0.5 * (33.5 + 34.8) + 0.5 * (34.8 + 34.3)) / 2.0).abs() < 1e-4);

    fs::write(&csv, "rank,score\n2,1\n1,2\n").unwrap();
    let o = mlora(&["aurac", "--csv", csv.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    fs::write(&csv, "rank,score\n1,2\n2,x\n").unwrap();
    let o = mlora(&["aurac", "--csv", csv.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));
    assert_eq!(mlora(&["aurac", "--csv", "/no/such/file.csv"]).status.code(), Some(2));
}

#[test]
fn verify_command() {
    let o = mlora(&["verify"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let report = stdout(&o);
    let eq = report.lines().find(|l| l.contains("forward-equivalence")).unwrap();
    assert!(eq.starts_with("PASS"));
    let err: f64 = eq
        .split("max_error=")
        .nth(1)
        .unwrap()
        .split_whitespace()
        .next()
        .unwrap()
        .parse()
        .unwrap();
    assert!(err < 1e-10);

    let o = mlora(&["verify", "--tolerance", "0"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("failed suites:"));
}

#[test]
fn train_writes_checkpoint_and_log() {
    let dir = tempfile::tempdir().unwrap();
    let o = small_train(
        dir.path(),
        "m.mlora",
        &[
            "--method",
            "matryoshka",
            "--max-rank",
            "8",
            "--ranks",
            "1,2,4,8",
            "--scaling",
            "unit",
        ],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let ckpt = checkpoint::load(&dir.path().join("m.mlora")).unwrap();
    assert_eq!(ckpt.config.method, Method::Matryoshka);
    assert_eq!(
        ckpt.training_weights().unwrap().as_slice(),
        &[4.0, 3.0, 2.0, 2.0, 1.0, 1.0, 1.0, 1.0]
    );
    let log = fs::read_to_string(dir.path().join("m.mlora.log.csv")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], "epoch,train_loss");
    assert_eq!(lines.len(), 4);
    assert!(lines[3].starts_with("3,"));
}

#[test]
fn zero_epochs_gives_initial_model() {
    let dir = tempfile::tempdir().unwrap();
    let o = small_train(dir.path(), "z.mlora", &["--epochs", "0"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let ckpt = checkpoint::load(&dir.path().join("z.mlora")).unwrap();
    for k in 1..=8 {
        assert_eq!(ckpt.merged(k).unwrap(), *ckpt.base.weight());
    }
    let o = mlora(&["sweep", "--ckpt", dir.path().join("z.mlora").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(
        stdout(&o),
        "rank,score\n1,0\n2,0\n4,0\n8,0\naurac 0.0000\nlog_aurac 0.0000\n"
    );
}

#[test]
fn train_rejects_bad_flags() {
    let dir = tempfile::tempdir().unwrap();
    let o = small_train(dir.path(), "x.mlora", &["--ranks", "1,16", "--max-rank", "8"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("16"), "{}", stderr(&o));
    assert!(!dir.path().join("x.mlora").exists());
    assert_eq!(
        small_train(dir.path(), "x.mlora", &["--lr", "-1"]).status.code(),
        Some(2)
    );
    assert_eq!(
        small_train(dir.path(), "x.mlora", &["--method", "full"]).status.code(),
        Some(2)
    );
    assert_eq!(
        small_train(dir.path(), "x.mlora", &["--task-spec", "spectrum=1:oops"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        small_train(dir.path(), "x.mlora", &["--batch", "0"]).status.code(),
        Some(2)
    );
    assert_eq!(mlora(&["train"]).status.code(), Some(2));
}

#[test]
fn divergence_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d.mlora");
    let o = mlora(&[
        "train",
        "--lr",
        "1000",
        "--task-spec",
        "spectrum=1e200,train=64,test=8",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("learning rate 1000"));
    assert!(!out.exists());
}

#[test]
fn sweep_outputs_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    small_train(dir.path(), "s.mlora", &["--epochs", "1"]);
    let ckpt = dir.path().join("s.mlora");
    let csv = dir.path().join("curve.csv");
    let o = mlora(&[
        "sweep",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--eval-ranks",
        "1,2,4",
        "--out-csv",
        csv.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0));
    let text = fs::read_to_string(&csv).unwrap();
    let ranks: Vec<&str> = text.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(ranks, ["1", "2", "4"]);
    assert!(stdout(&o).contains("aurac ") && stdout(&o).contains("log_aurac "));

    // the curve file feeds straight into the aurac command
    let again = mlora(&["aurac", "--csv", csv.to_str().unwrap()]);
    let printed = stdout(&o)
        .lines()
        .find(|l| l.starts_with("aurac "))
        .unwrap()
        .trim_start_matches("aurac ")
        .to_string();
    assert_eq!(stdout(&again).trim(), printed);

    assert_eq!(
        mlora(&["sweep", "--ckpt", ckpt.to_str().unwrap(), "--eval-ranks", "1,9"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(mlora(&["sweep", "--ckpt", "/missing.mlora"]).status.code(), Some(2));
    let junk = dir.path().join("junk.mlora");
    fs::write(&junk, b"not a checkpoint").unwrap();
    assert_eq!(
        mlora(&["sweep", "--ckpt", junk.to_str().unwrap()]).status.code(),
        Some(2)
    );
}

#[test]
fn identical_invocations_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["a.mlora", "b.mlora"] {
        let o = small_train(
            dir.path(),
            name,
            &["--method", "dylora", "--seed", "2408", "--epochs", "2"],
        );
        assert_eq!(o.status.code(), Some(0));
    }
    let read = |n: &str| fs::read(dir.path().join(n)).unwrap();
    assert_eq!(read("a.mlora"), read("b.mlora"));
    assert_eq!(read("a.mlora.log.csv"), read("b.mlora.log.csv"));

    let o = small_train(
        dir.path(),
        "c.mlora",
        &["--method", "dylora", "--seed", "2409", "--epochs", "2"],
    );
    assert_eq!(o.status.code(), Some(0));
    assert_ne!(read("a.mlora"), read("c.mlora"));
}
