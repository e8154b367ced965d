//! End-to-end smoke tests driving the compiled binary through the
//! exact command sequences shown in the README (paths swapped for a
//! per-test temporary directory).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_stfd")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .output()
        .expect("binary runs")
}

fn run_ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "stfd {:?} failed: {}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).expect("utf-8 stdout")
}

fn run_with_stdin(args: &[&str], stdin_path: &Path) -> Output {
    let file = fs::File::open(stdin_path).expect("stdin file");
    Command::new(bin())
        .args(args)
        .stdin(Stdio::from(file))
        .output()
        .expect("binary runs")
}

fn value_of(output: &str, key: &str) -> String {
    output
        .lines()
        .find_map(|l| l.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("no `{key}=` line in:\n{output}"))
        .to_string()
}

struct Demo {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Demo {
    fn new() -> Demo {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        // README: printf '%s\n' 'synth.duration_s=120' 'synth.n_traces=6'
        //         'train.epochs=4' > demo.cfg
        fs::write(
            root.join("demo.cfg"),
            "synth.duration_s=120\nsynth.n_traces=6\ntrain.epochs=4\n",
        )
        .unwrap();
        Demo { _dir: dir, root }
    }

    fn path(&self, name: &str) -> String {
        self.root.join(name).to_string_lossy().into_owned()
    }
}

#[test]
fn readme_demo_sequence_runs_end_to_end() {
    let d = Demo::new();
    let (cfg, corpus) = (d.path("demo.cfg"), d.path("corpus"));

    let out = run_ok(&["synth", "--config", &cfg, "--out", &corpus, "--seed", "7"]);
    assert_eq!(value_of(&out, "traces"), "6");
    let n_segments: usize = value_of(&out, "segments").parse().unwrap();
    assert!(n_segments > 0);
    for name in ["manifest.txt", "trace_000.csv", "events_000.csv", "seg_000_000.csv"] {
        assert!(d.root.join("corpus").join(name).exists(), "missing {name}");
    }

    let (seg_ckpt, seg_log) = (d.path("seg.ckpt"), d.path("seg.log"));
    let out = run_ok(&[
        "train-seg", "--config", &cfg, "--corpus", &corpus,
        "--checkpoint", &seg_ckpt, "--log", &seg_log,
    ]);
    let best_metric: f64 = value_of(&out, "best_val_metric").parse().unwrap();
    assert!((0.0..=1.0).contains(&best_metric));
    let log = fs::read_to_string(&seg_log).unwrap();
    assert_eq!(log.lines().count(), 4, "one line per epoch:\n{log}");
    for (i, line) in log.lines().enumerate() {
        assert!(line.starts_with(&format!("{},", i + 1)), "bad log line `{line}`");
        assert_eq!(line.split(',').count(), 4);
    }

    let out = run_ok(&["eval-seg", "--config", &cfg, "--corpus", &corpus, "--checkpoint", &seg_ckpt]);
    let acc: f64 = value_of(&out, "segment_accuracy").parse().unwrap();
    assert!((0.0..=1.0).contains(&acc));

    let stream_ckpt = d.path("stream.ckpt");
    run_ok(&[
        "train-stream", "--config", &cfg, "--corpus", &corpus, "--checkpoint", &stream_ckpt,
    ]);
    let out = run_ok(&[
        "eval-stream", "--config", &cfg, "--corpus", &corpus, "--checkpoint", &stream_ckpt,
    ]);
    let composite: f64 = value_of(&out, "composite").parse().unwrap();
    assert!((0.0..=100.0).contains(&composite));

    // README: stream ... < corpus/trace_000.csv > pred.csv
    let trace = d.root.join("corpus").join("trace_000.csv");
    let streamed = run_with_stdin(
        &["stream", "--config", &cfg, "--checkpoint", &stream_ckpt],
        &trace,
    );
    assert!(streamed.status.success(), "{}", String::from_utf8_lossy(&streamed.stderr));
    let pred = d.path("pred.csv");
    fs::write(&pred, &streamed.stdout).unwrap();
    let rows = streamed.stdout.split(|b| *b == b'\n').filter(|l| !l.is_empty()).count();
    // 120 s at 250 Hz with the default 256/128 framing
    assert_eq!(rows, 1 + (120 * 250 - 256) / 128);

    let truth = d.root.join("corpus").join("events_000.csv");
    let out = run_ok(&[
        "score", "--config", &cfg, "--pred", &pred, "--truth", &truth.to_string_lossy(),
    ]);
    let frame_acc: f64 = value_of(&out, "frame_accuracy").parse().unwrap();
    assert!((0.0..=1.0).contains(&frame_acc));

    // an impossible gate flips only the exit code, not the report
    let gated = run(&[
        "score", "--config", &cfg, "--pred", &pred,
        "--truth", &truth.to_string_lossy(), "--min-score", "101",
    ]);
    assert_eq!(gated.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&gated.stdout).contains("composite="));
}

#[test]
fn streamed_predictions_are_incremental() {
    // `stream` must emit rows before stdin is exhausted: feed a trace
    // slowly and observe output before closing the pipe.
    use std::io::{BufRead, BufReader, Write};

    let d = Demo::new();
    let (cfg, corpus) = (d.path("demo.cfg"), d.path("corpus"));
    run_ok(&["synth", "--config", &cfg, "--out", &corpus, "--seed", "8", "--n-traces", "2"]);
    let ckpt = d.path("stream.ckpt");
    run_ok(&["train-stream", "--config", &cfg, "--corpus", &corpus, "--checkpoint", &ckpt]);

    let trace = fs::read_to_string(d.root.join("corpus").join("trace_000.csv")).unwrap();
    let mut child = Command::new(bin())
        .args(["stream", "--config", &cfg, "--checkpoint", &ckpt])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut stdin = child.stdin.take().unwrap();
    let mut stdout = BufReader::new(child.stdout.take().unwrap());

    // push enough samples for frame 0's full lookahead context
    let mut lines = trace.lines();
    let header = lines.next().unwrap();
    writeln!(stdin, "{header}").unwrap();
    for line in lines.by_ref().take(256 + 10 * 128) {
        writeln!(stdin, "{line}").unwrap();
    }
    stdin.flush().unwrap();
    let mut first = String::new();
    stdout.read_line(&mut first).unwrap();
    assert!(first.starts_with("0,"), "first emitted row: `{first}`");

    drop(stdin); // close the pipe; the tail flushes
    let status = child.wait().unwrap();
    assert!(status.success());
}

#[test]
fn bad_usage_exits_with_code_2() {
    // unknown subcommand (clap) and unknown config key (our parser)
    let out = run(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));

    let d = Demo::new();
    let bad_cfg = d.path("bad.cfg");
    fs::write(&bad_cfg, "train.epcohs=5\n").unwrap();
    let out = run(&["synth", "--config", &bad_cfg, "--out", &d.path("x")]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown config key"));

    // checkpoint/architecture mismatch also reports cleanly
    let missing = run(&["eval-seg", "--corpus", &d.path("nope"), "--checkpoint", &d.path("no.ckpt")]);
    assert_eq!(missing.status.code(), Some(2));
}
