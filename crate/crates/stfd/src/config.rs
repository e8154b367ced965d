//! Flat `key=value` configuration files.
//!
//! One file configures the whole pipeline with dotted keys (`synth.*`,
//! `dsp.*`, `train.*`, `loss.beta`, `mixup.*`, `stream.*`). Unknown
//! keys are an error so typos surface immediately; `#` starts a
//! comment line and blank lines are ignored.

use crate::dsp::DspConfig;
use crate::error::{Error, Result};
use crate::models::ModelConfig;
use crate::streaming::ExtractConfig;
use crate::synthgen::SynthConfig;
use crate::training::TrainConfig;

/// Every tunable in one place, pre-filled with defaults.
#[derive(Debug, Clone)]
pub struct AppConfig {
    pub synth: SynthConfig,
    /// Traces generated by the `synth` command.
    pub n_traces: usize,
    pub dsp: DspConfig,
    pub sample_rate_hz: u32,
    pub train: TrainConfig,
    pub extract: ExtractConfig,
}

impl Default for AppConfig {
    fn default() -> Self {
        AppConfig {
            synth: SynthConfig::default(),
            n_traces: 20,
            dsp: DspConfig::default(),
            sample_rate_hz: 250,
            train: TrainConfig::default(),
            extract: ExtractConfig::default(),
        }
    }
}

impl AppConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig { sample_rate_hz: self.sample_rate_hz, dsp: self.dsp.clone() }
    }

    /// Apply one dotted `key` with a raw string `value`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value.trim().parse().map_err(|_| {
                Error::Config(format!("config key `{key}`: cannot parse value `{value}`"))
            })
        }
        fn flag(key: &str, value: &str) -> Result<bool> {
            match value.trim() {
                "true" | "1" => Ok(true),
                "false" | "0" => Ok(false),
                other => Err(Error::Config(format!(
                    "config key `{key}`: expected true/false, got `{other}`"
                ))),
            }
        }
        match key {
            "synth.duration_s" => self.synth.duration_s = num(key, value)?,
            "synth.sample_rate_hz" => {
                self.synth.sample_rate_hz = num(key, value)?;
                self.sample_rate_hz = self.synth.sample_rate_hz;
            }
            "synth.seed" => self.synth.seed = num(key, value)?,
            "synth.n_traces" => self.n_traces = num(key, value)?,
            "synth.resp_hz" => self.synth.resp_hz = num(key, value)?,
            "synth.resp_amp" => self.synth.resp_amp = num(key, value)?,
            "synth.cardiac_hz" => self.synth.cardiac_hz = num(key, value)?,
            "synth.cardiac_amp" => self.synth.cardiac_amp = num(key, value)?,
            "synth.posture_shift_rate" => self.synth.posture_shift_rate = num(key, value)?,
            "synth.noise_std" => self.synth.noise_std = num(key, value)?,
            "synth.foot_traffic_rate" => self.synth.foot_traffic_rate = num(key, value)?,
            "synth.foot_traffic_amp" => self.synth.foot_traffic_amp = num(key, value)?,
            "synth.mean_in_bed_s" => self.synth.mean_in_bed_s = num(key, value)?,
            "synth.mean_out_bed_s" => self.synth.mean_out_bed_s = num(key, value)?,
            "dsp.n_fft" => self.dsp.n_fft = num(key, value)?,
            "dsp.hop" => self.dsp.hop = num(key, value)?,
            "dsp.n_mels" => self.dsp.n_mels = num(key, value)?,
            "dsp.fmin_hz" => self.dsp.fmin_hz = num(key, value)?,
            "dsp.fmax_hz" => self.dsp.fmax_hz = num(key, value)?,
            "dsp.floor_eps" => self.dsp.floor_eps = num(key, value)?,
            "train.epochs" => self.train.epochs = num(key, value)?,
            "train.batch_size" => self.train.batch_size = num(key, value)?,
            "train.lr" => self.train.lr = num(key, value)?,
            "train.seed" => self.train.seed = num(key, value)?,
            "train.val_fraction" => self.train.val_fraction = num(key, value)?,
            "train.window_s" => self.train.window_s = num(key, value)?,
            "train.windows_per_trace" => self.train.windows_per_trace = num(key, value)?,
            "loss.beta" => self.train.beta = num(key, value)?,
            "mixup.alpha" => self.train.mixup.alpha = num(key, value)?,
            "mixup.enabled" => self.train.mixup.enabled = flag(key, value)?,
            "stream.theta_on" => self.extract.theta_on = num(key, value)?,
            "stream.theta_off" => self.extract.theta_off = num(key, value)?,
            "stream.min_dur_s" => self.extract.min_dur_s = num(key, value)?,
            "stream.min_gap_s" => self.extract.min_gap_s = num(key, value)?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Parse a whole config file body on top of the defaults.
    pub fn parse(text: &str) -> Result<AppConfig> {
        let mut cfg = AppConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("config line {}: `{line}` is not key=value", i + 1))
            })?;
            cfg.set(key.trim(), value)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<AppConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        AppConfig::parse(&text)
    }
}
