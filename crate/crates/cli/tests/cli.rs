use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::path::Path;
use std::process::{Command, Output, Stdio};

fn dlow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dlow")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = dlow(args);
    assert!(
        out.status.success(),
        "dlow {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn exit_codes() {
    assert_eq!(dlow(&["--help"]).status.code(), Some(0));
    assert_eq!(dlow(&["train", "--bogus"]).status.code(), Some(2));
    let out = dlow(&["measure", "/definitely/not/here"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error["));
}

#[test]
fn end_to_end_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = root.join("data");
    ok(&[
        "gen-synthetic",
        "--theta-source",
        "0",
        "--theta-target",
        "120",
        "--out",
        s(&data),
        "--count",
        "6",
        "--size",
        "16",
        "--seed",
        "1",
    ]);
    let hue: f64 = ok(&["measure", "--kind", "mean-hue", s(&data.join("target"))])
        .trim()
        .parse()
        .unwrap();
    assert!((hue - 120.0).abs() < 5.0, "target hue {hue}");

    let config = root.join("train.toml");
    std::fs::write(
        &config,
        "total_iterations = 4\nimage_size = 16\ncrop_size = 16\ngen_base_channels = 4\ngen_downsample = 1\n\
         gen_residual_blocks = 1\ndisc_base_channels = 4\ndisc_downsample = 1\nsave_every = 2\nsample_every = 2\n",
    )
    .unwrap();
    let runs = root.join("runs");
    let (src, tgt) = (data.join("source"), data.join("target"));
    let args = [
        "train",
        "--config",
        s(&config),
        "--source",
        s(&src),
        "--target",
        s(&tgt),
        "--output-dir",
        s(&runs),
        "--name",
        "tiny",
        "--seed",
        "5",
    ];
    ok(&args);
    let run = runs.join("tiny");
    for f in [
        "config.toml",
        "metrics.csv",
        "latest.ckpt",
        "checkpoints/iter_000002.ckpt",
        "checkpoints/iter_000004.ckpt",
        "samples/iter_000004.png",
    ] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let snapshot = std::fs::read_to_string(run.join("config.toml")).unwrap();
    assert!(snapshot.contains("seed = 5"), "{snapshot}");
    assert!(
        snapshot.contains("domain_names = [\"source\", \"target\"]"),
        "{snapshot}"
    );
    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 5);

    // the snapshot alone reproduces the run
    let snap = run.join("config.toml");
    ok(&["train", "--config", s(&snap), "--name", "rerun"]);
    let rerun = std::fs::read_to_string(runs.join("rerun/metrics.csv")).unwrap();
    assert_eq!(rerun, metrics);

    // resuming with a changed configuration is refused
    let mut changed = args.to_vec();
    let mid = run.join("checkpoints/iter_000002.ckpt");
    changed.extend(["--resume", s(&mid), "--learning-rate", "0.1"]);
    assert_eq!(dlow(&changed).status.code(), Some(1));

    let out = root.join("translated");
    ok(&[
        "translate",
        "--ckpt",
        s(&run.join("latest.ckpt")),
        "--input",
        s(&data.join("source")),
        "--out",
        s(&out),
        "--z-mode",
        "uniform",
    ]);
    let index = out.join("index.csv");
    assert_eq!(std::fs::read_to_string(&index).unwrap().lines().count(), 7);

    let seg = root.join("seg.model");
    ok(&[
        "boost-train",
        "--source-index",
        s(&index),
        "--target",
        s(&data.join("target")),
        "--out",
        s(&seg),
        "--alignment",
        "weighted",
        "--iterations",
        "3",
        "--size",
        "32",
    ]);
    let report: serde_json::Value = serde_json::from_str(&ok(&[
        "eval-seg",
        "--ckpt",
        s(&seg),
        "--data",
        s(&data.join("target")),
        "--size",
        "32",
    ]))
    .unwrap();
    let miou = report["miou"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&miou));
}

#[test]
fn serve_answers_health() {
    let dir = tempfile::tempdir().unwrap();
    let paths = dlow_core::repro::service_fixture(dir.path()).unwrap();
    let mut child = Command::new(env!("CARGO_BIN_EXE_dlow"))
        .args(["serve", "--ckpt", s(&paths[0]), "--port", "0"])
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap())
        .read_line(&mut line)
        .unwrap();
    let addr = line
        .trim()
        .strip_prefix("listening on http://")
        .expect("listen line")
        .to_string();
    let mut stream = TcpStream::connect(&addr).unwrap();
    write!(
        stream,
        "GET /health HTTP/1.1\r\nHost: {addr}\r\nConnection: close\r\n\r\n"
    )
    .unwrap();
    let mut resp = String::new();
    stream.read_to_string(&mut resp).unwrap();
    child.kill().unwrap();
    child.wait().unwrap();
    assert!(resp.starts_with("HTTP/1.1 200"), "{resp}");
    assert!(resp.contains("\"status\":\"ok\""), "{resp}");
}
