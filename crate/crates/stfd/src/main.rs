//! Command-line entry point: one binary covering corpus synthesis,
//! both training tracks, offline evaluation, the streaming runtime and
//! the scorer.
//!
//! Exit codes: 0 success, 2 config/format/data errors (including
//! argument parse failures), 3 training divergence, 4 failed
//! `--min-score` gate.

use std::fs;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use stfd::config::AppConfig;
use stfd::io::{self, FramePrediction};
use stfd::models::{Head, Model};
use stfd::scoring;
use stfd::streaming::{extract_events, StreamState};
use stfd::synthgen;
use stfd::training::{self, EpochStats, TrainOutcome, ACC_THRESHOLD};
use stfd::{Error, Result};

const EXIT_GATE: u8 = 4;

#[derive(Parser)]
#[command(name = "stfd", version, about = "Spectral-temporal person-in-bed detection pipeline")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args)]
struct ConfigArg {
    /// Flat key=value config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> Result<AppConfig> {
        match &self.config {
            Some(path) => AppConfig::load(path),
            None => Ok(AppConfig::default()),
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a labeled synthetic corpus.
    Synth {
        #[command(flatten)]
        config: ConfigArg,
        /// Output directory for traces, events, segments and manifest.
        #[arg(long)]
        out: PathBuf,
        /// Override the corpus base seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the number of traces.
        #[arg(long)]
        n_traces: Option<usize>,
    },
    /// Train the segmented (Track-1) detector.
    TrainSeg {
        #[command(flatten)]
        config: ConfigArg,
        /// Corpus directory produced by `synth`.
        #[arg(long)]
        corpus: PathBuf,
        /// Where to write the best checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Also append per-epoch log lines to this file.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Train the streaming (Track-2) detector.
    TrainStream {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Evaluate a segmented checkpoint on a corpus.
    EvalSeg {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Evaluate a streaming checkpoint on a corpus.
    EvalStream {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        threshold_on: Option<f64>,
        #[arg(long)]
        threshold_off: Option<f64>,
        /// Exit 4 when the composite score falls below this gate.
        #[arg(long)]
        min_score: Option<f64>,
    },
    /// Stream a trace from stdin, writing prediction rows to stdout.
    Stream {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Score a prediction CSV against ground-truth events.
    Score {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        threshold_on: Option<f64>,
        #[arg(long)]
        threshold_off: Option<f64>,
        /// Exit 4 when the composite score falls below this gate.
        #[arg(long)]
        min_score: Option<f64>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn load_model(cfg: &AppConfig, head: Head, checkpoint: &Path) -> Result<Model<f32>> {
    let store = io::load_checkpoint::<f32>(checkpoint)?;
    Model::from_store(cfg.model_config(), head, &store)
}

fn epoch_logger(log_path: Option<PathBuf>) -> Result<impl FnMut(&EpochStats)> {
    let mut file = match &log_path {
        Some(path) => Some(
            fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?,
        ),
        None => None,
    };
    Ok(move |stats: &EpochStats| {
        println!("{}", stats.line());
        if let Some(f) = &mut file {
            let _ = writeln!(f, "{}", stats.line());
        }
    })
}

fn finish_training(outcome: &TrainOutcome, checkpoint: &Path) -> Result<()> {
    io::save_checkpoint(&outcome.model.params, checkpoint)?;
    println!("best_epoch={}", outcome.best_epoch);
    println!("best_val_metric={}", outcome.best_val_metric);
    println!("checkpoint={}", checkpoint.display());
    Ok(())
}

fn run(cmd: Cmd) -> Result<ExitCode> {
    match cmd {
        Cmd::Synth { config, out, seed, n_traces } => {
            let mut cfg = config.load()?;
            if let Some(s) = seed {
                cfg.synth.seed = s;
            }
            if let Some(n) = n_traces {
                cfg.n_traces = n;
            }
            let manifest = synthgen::synth_corpus(&cfg.synth, cfg.n_traces, &out)?;
            println!("traces={}", manifest.entries.len());
            println!(
                "segments={}",
                manifest.entries.iter().map(|e| e.segments.len()).sum::<usize>()
            );
            println!("out={}", out.display());
            Ok(ExitCode::SUCCESS)
        }
        Cmd::TrainSeg { config, corpus, checkpoint, seed, log } => {
            let mut cfg = config.load()?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            let data = training::load_segmented_corpus(&corpus)?;
            let mut logger = epoch_logger(log)?;
            let outcome =
                training::train_segmented(&data, &cfg.model_config(), &cfg.train, &mut logger)?;
            finish_training(&outcome, &checkpoint)?;
            Ok(ExitCode::SUCCESS)
        }
        Cmd::TrainStream { config, corpus, checkpoint, seed, log } => {
            let mut cfg = config.load()?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            let data = training::load_streaming_corpus(&corpus)?;
            let mut logger = epoch_logger(log)?;
            let outcome =
                training::train_streaming(&data, &cfg.model_config(), &cfg.train, &mut logger)?;
            finish_training(&outcome, &checkpoint)?;
            Ok(ExitCode::SUCCESS)
        }
        Cmd::EvalSeg { config, corpus, checkpoint } => {
            let cfg = config.load()?;
            let model = load_model(&cfg, Head::Segment, &checkpoint)?;
            let data = training::load_segmented_corpus(&corpus)?;
            let report = training::evaluate_segmented(&model, &data)?;
            print!("{}", report.emit());
            Ok(ExitCode::SUCCESS)
        }
        Cmd::EvalStream { config, corpus, checkpoint, threshold_on, threshold_off, min_score } => {
            let mut cfg = config.load()?;
            if let Some(t) = threshold_on {
                cfg.extract.theta_on = t;
            }
            if let Some(t) = threshold_off {
                cfg.extract.theta_off = t;
            }
            let model = load_model(&cfg, Head::Streaming, &checkpoint)?;
            let data = training::load_streaming_corpus(&corpus)?;
            let report = training::evaluate_streaming(&model, &data, &cfg.extract)?;
            print!("{}", report.emit());
            Ok(gate(report.composite, min_score))
        }
        Cmd::Stream { config, checkpoint } => {
            let cfg = config.load()?;
            let model = load_model(&cfg, Head::Streaming, &checkpoint)?;
            stream_stdin(&model)
        }
        Cmd::Score { config, pred, truth, threshold_on, threshold_off, min_score } => {
            let mut cfg = config.load()?;
            if let Some(t) = threshold_on {
                cfg.extract.theta_on = t;
            }
            if let Some(t) = threshold_off {
                cfg.extract.theta_off = t;
            }
            let pred_file =
                fs::File::open(&pred).map_err(|e| Error::io(pred.display().to_string(), e))?;
            let preds = io::parse_predictions(pred_file)?;
            if preds.is_empty() {
                return Err(Error::Data("prediction file has no rows".into()));
            }
            let truth_file =
                fs::File::open(&truth).map_err(|e| Error::io(truth.display().to_string(), e))?;
            let events = io::parse_events(truth_file)?;
            let hop_s = if preds.len() >= 2 {
                preds[1].time_s - preds[0].time_s
            } else {
                cfg.dsp.hop as f64 / cfg.sample_rate_hz as f64
            };
            let labels = io::events_to_frames(&events, hop_s, preds.len())?;
            let probs: Vec<f64> = preds.iter().map(|p| f64::from(p.prob)).collect();
            let correct = probs
                .iter()
                .zip(&labels.labels)
                .filter(|(p, y)| u8::from(**p > ACC_THRESHOLD) == **y)
                .count();
            let frame_accuracy = correct as f64 / probs.len() as f64;
            let pred_events = extract_events(&probs, hop_s, &cfg.extract)?;
            let report = scoring::score_streaming(&pred_events, &events, frame_accuracy);
            print!("{}", report.emit());
            Ok(gate(report.composite, min_score))
        }
    }
}

fn gate(composite: f64, min_score: Option<f64>) -> ExitCode {
    match min_score {
        Some(gate) if composite < gate => ExitCode::from(EXIT_GATE),
        _ => ExitCode::SUCCESS,
    }
}

/// Incrementally read trace CSV rows from stdin and write prediction
/// rows as soon as their frames are finalized.
fn stream_stdin(model: &Model<f32>) -> Result<ExitCode> {
    let stdin = std::io::stdin();
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    let mut state = StreamState::new(model);
    let mut header_seen = false;
    for line in stdin.lock().lines() {
        let line = line.map_err(|e| Error::Format(format!("stdin read failure: {e}")))?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if !header_seen {
            let rate: u32 = line
                .strip_prefix("sample_rate_hz=")
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| {
                    Error::Format(format!("expected `sample_rate_hz=<int>` header, got `{line}`"))
                })?;
            if rate != model.cfg.sample_rate_hz {
                return Err(Error::Config(format!(
                    "stream sample rate {rate} does not match model rate {}",
                    model.cfg.sample_rate_hz
                )));
            }
            header_seen = true;
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(Error::Data(format!("expected 3 fields, got `{line}`")));
        }
        let mut sample = [0.0f32; 3];
        for (a, f) in fields.iter().enumerate() {
            let v: f64 = f
                .trim()
                .parse()
                .map_err(|_| Error::Data(format!("non-numeric sample `{f}`")))?;
            if !v.is_finite() {
                return Err(Error::Data(format!("non-finite sample `{f}`")));
            }
            sample[a] = v as f32;
        }
        emit(&mut out, &state.push_samples(&[sample])?)?;
    }
    if !header_seen {
        return Err(Error::Format("empty stream: missing sample-rate header".into()));
    }
    emit(&mut out, &state.close()?)?;
    Ok(ExitCode::SUCCESS)
}

fn emit(out: &mut impl Write, emissions: &[stfd::streaming::Emission]) -> Result<()> {
    for e in emissions {
        let pred = FramePrediction {
            frame_index: e.frame_index,
            time_s: e.time_s,
            prob: e.prob.clamp(0.0, 1.0),
            label: u8::from(f64::from(e.prob) > ACC_THRESHOLD),
        };
        io::emit_predictions(std::slice::from_ref(&pred), &mut *out)?;
        out.flush()
            .map_err(|e| Error::Format(format!("stdout write failure: {e}")))?;
    }
    Ok(())
}
