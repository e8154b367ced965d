//! Synthetic labeled accelerometer corpora.
//!
//! A trace alternates between "in bed" and "out of bed" stretches drawn
//! from exponential dwell times. In-bed samples carry a respiration
//! sinusoid (plus a weak second harmonic), a cardiac wavelet pulse
//! train and occasional repositioning bursts, all projected onto a
//! random fixed orientation; out-of-bed samples carry Poisson foot
//! traffic (damped 5-20 Hz oscillations). Everything sits on baseline
//! Gaussian noise, and occupant components ramp linearly over 0.5 s at
//! occupancy changes. A trace is fully determined by its seed.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::io::{self, AccelTrace, EventList};
use crate::rng::SplitMix64;

/// Linear ramp length at occupancy changes, seconds.
pub const RAMP_S: f64 = 0.5;
/// Repositioning burst amplitude relative to `resp_amp`.
const BURST_AMP_FACTOR: f64 = 6.0;
/// Foot-traffic decay constant, seconds.
const FOOT_TAU_S: f64 = 0.15;
/// Cardiac wavelet Gaussian half-width, seconds.
const CARDIAC_SIGMA_S: f64 = 0.05;
/// Cardiac wavelet carrier frequency, Hz.
const CARDIAC_CARRIER_HZ: f64 = 8.0;

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub duration_s: f64,
    pub sample_rate_hz: u32,
    pub seed: u64,
    pub resp_hz: f64,
    pub resp_amp: f64,
    pub cardiac_hz: f64,
    pub cardiac_amp: f64,
    /// Repositioning bursts per minute while in bed.
    pub posture_shift_rate: f64,
    pub noise_std: f64,
    /// Foot-traffic transients per minute while out of bed.
    pub foot_traffic_rate: f64,
    pub foot_traffic_amp: f64,
    pub mean_in_bed_s: f64,
    pub mean_out_bed_s: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            duration_s: 300.0,
            sample_rate_hz: 250,
            seed: 0,
            resp_hz: 0.3,
            resp_amp: 1.0,
            cardiac_hz: 1.2,
            cardiac_amp: 0.6,
            posture_shift_rate: 0.5,
            noise_std: 0.1,
            foot_traffic_rate: 2.0,
            foot_traffic_amp: 0.8,
            mean_in_bed_s: 60.0,
            mean_out_bed_s: 30.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.duration_s >= 10.0) {
            return Err(Error::Config(format!(
                "duration_s must be at least 10, got {}",
                self.duration_s
            )));
        }
        if self.sample_rate_hz == 0 {
            return Err(Error::Config("sample_rate_hz must be positive".into()));
        }
        let nonneg = [
            ("resp_hz", self.resp_hz),
            ("resp_amp", self.resp_amp),
            ("cardiac_hz", self.cardiac_hz),
            ("cardiac_amp", self.cardiac_amp),
            ("posture_shift_rate", self.posture_shift_rate),
            ("noise_std", self.noise_std),
            ("foot_traffic_rate", self.foot_traffic_rate),
            ("foot_traffic_amp", self.foot_traffic_amp),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0) {
                return Err(Error::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        if !(self.mean_in_bed_s > 0.0) || !(self.mean_out_bed_s > 0.0) {
            return Err(Error::Config(format!(
                "mean dwell times must be positive, got in={} out={}",
                self.mean_in_bed_s, self.mean_out_bed_s
            )));
        }
        Ok(())
    }
}

fn exp_dwell(rng: &mut SplitMix64, mean: f64) -> f64 {
    -mean * (1.0 - rng.uniform()).ln()
}

fn gaussian(rng: &mut SplitMix64) -> f64 {
    StandardNormal.sample(rng)
}

fn unit_vector(rng: &mut SplitMix64) -> [f64; 3] {
    let v = [gaussian(rng), gaussian(rng), gaussian(rng)];
    let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    if norm < 1e-12 {
        [1.0, 0.0, 0.0]
    } else {
        [v[0] / norm, v[1] / norm, v[2] / norm]
    }
}

struct Burst {
    start_s: f64,
    dur_s: f64,
    freq_hz: f64,
    phase: f64,
    dir: [f64; 3],
}

struct FootStep {
    start_s: f64,
    freq_hz: f64,
    amp: f64,
    dir: [f64; 3],
}

/// Occupant-signal envelope: 0 out of bed, 1 in bed, with linear
/// `RAMP_S` ramps just inside each event boundary.
fn occupancy_envelope(events: &EventList, t: f64) -> f64 {
    for &(on, off) in events.events() {
        if t < on {
            return 0.0;
        }
        if t <= off {
            let ramp = RAMP_S.min((off - on) / 2.0);
            let rise = if ramp > 0.0 { ((t - on) / ramp).min(1.0) } else { 1.0 };
            let fall = if ramp > 0.0 { ((off - t) / ramp).min(1.0) } else { 1.0 };
            return rise.min(fall).max(0.0);
        }
    }
    0.0
}

/// One deterministic labeled trace.
pub fn synth_trace(cfg: &SynthConfig) -> Result<(AccelTrace, EventList)> {
    cfg.validate()?;
    let mut rng = SplitMix64::new(cfg.seed);
    let sr = cfg.sample_rate_hz as f64;
    let n = (cfg.duration_s * sr).round() as usize;

    // 1. occupancy timeline: start out of bed, alternate exponential dwells
    let mut events = Vec::new();
    let mut t = 0.0;
    let mut in_bed = false;
    while t < cfg.duration_s {
        let dwell = if in_bed {
            exp_dwell(&mut rng, cfg.mean_in_bed_s)
        } else {
            exp_dwell(&mut rng, cfg.mean_out_bed_s)
        };
        let end = (t + dwell).min(cfg.duration_s);
        if in_bed && end > t {
            events.push((t, end));
        }
        t = end;
        in_bed = !in_bed;
    }
    let events = EventList::new(events)?;

    // 2. orientation and phases
    let occupant_dir = unit_vector(&mut rng);
    let resp_phase = rng.uniform() * 2.0 * PI;
    let cardiac_phase = rng.uniform() / cfg.cardiac_hz.max(1e-9);

    // 3. repositioning bursts, Poisson within each in-bed event
    let burst_rate = cfg.posture_shift_rate / 60.0;
    let mut bursts = Vec::new();
    for &(on, off) in events.events() {
        let mut bt = on;
        loop {
            bt += if burst_rate > 0.0 {
                exp_dwell(&mut rng, 1.0 / burst_rate)
            } else {
                break;
            };
            if bt >= off {
                break;
            }
            bursts.push(Burst {
                start_s: bt,
                dur_s: rng.uniform_range(1.0, 3.0),
                freq_hz: rng.uniform_range(1.0, 4.0),
                phase: rng.uniform() * 2.0 * PI,
                dir: unit_vector(&mut rng),
            });
        }
    }

    // 4. foot traffic, Poisson within each out-of-bed gap
    let foot_rate = cfg.foot_traffic_rate / 60.0;
    let mut steps = Vec::new();
    let mut gaps = Vec::new();
    let mut prev = 0.0;
    for &(on, off) in events.events() {
        if on > prev {
            gaps.push((prev, on));
        }
        prev = off;
    }
    if cfg.duration_s > prev {
        gaps.push((prev, cfg.duration_s));
    }
    for (gap_on, gap_off) in gaps {
        let mut st = gap_on;
        loop {
            st += if foot_rate > 0.0 {
                exp_dwell(&mut rng, 1.0 / foot_rate)
            } else {
                break;
            };
            if st >= gap_off {
                break;
            }
            steps.push(FootStep {
                start_s: st,
                freq_hz: rng.uniform_range(5.0, 20.0),
                amp: cfg.foot_traffic_amp * rng.uniform_range(0.5, 1.5),
                dir: unit_vector(&mut rng),
            });
        }
    }

    // 5. per-sample synthesis; baseline noise drawn last, per sample
    let burst_amp = BURST_AMP_FACTOR * cfg.resp_amp;
    let foot_span_s = 5.0 * FOOT_TAU_S;
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let ts = i as f64 / sr;
        let env = occupancy_envelope(&events, ts);
        let mut occupant = 0.0;
        if env > 0.0 {
            let w = 2.0 * PI * cfg.resp_hz;
            occupant += cfg.resp_amp
                * ((w * ts + resp_phase).sin() + 0.3 * (2.0 * w * ts + 2.0 * resp_phase).sin());
            if cfg.cardiac_amp > 0.0 && cfg.cardiac_hz > 0.0 {
                let period = 1.0 / cfg.cardiac_hz;
                let k = ((ts - cardiac_phase) / period).round();
                for kk in [k - 1.0, k, k + 1.0] {
                    let dt = ts - (cardiac_phase + kk * period);
                    let g = (-(dt / CARDIAC_SIGMA_S).powi(2)).exp();
                    occupant += cfg.cardiac_amp * g * (2.0 * PI * CARDIAC_CARRIER_HZ * dt).sin();
                }
            }
        }
        let mut v = [
            env * occupant * occupant_dir[0],
            env * occupant * occupant_dir[1],
            env * occupant * occupant_dir[2],
        ];
        if env > 0.0 && burst_amp > 0.0 {
            for b in &bursts {
                let dt = ts - b.start_s;
                if dt >= 0.0 && dt < b.dur_s {
                    // Hann envelope over the burst
                    let window = 0.5 * (1.0 - (2.0 * PI * dt / b.dur_s).cos());
                    let s =
                        env * burst_amp * window * (2.0 * PI * b.freq_hz * dt + b.phase).sin();
                    for a in 0..3 {
                        v[a] += s * b.dir[a];
                    }
                }
            }
        }
        for step in &steps {
            let dt = ts - step.start_s;
            if dt >= 0.0 && dt < foot_span_s {
                let s = step.amp * (-dt / FOOT_TAU_S).exp() * (2.0 * PI * step.freq_hz * dt).sin();
                for a in 0..3 {
                    v[a] += s * step.dir[a];
                }
            }
        }
        let mut out = [0.0f32; 3];
        for a in 0..3 {
            let noise = if cfg.noise_std > 0.0 {
                cfg.noise_std * gaussian(&mut rng)
            } else {
                0.0
            };
            out[a] = (v[a] + noise) as f32;
        }
        samples.push(out);
    }

    Ok((AccelTrace::new(cfg.sample_rate_hz, samples)?, events))
}

/// One Track-1 segment emitted by `synth_corpus`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentEntry {
    pub file: String,
    pub label: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub trace_file: String,
    pub events_file: String,
    pub seed: u64,
    pub occupancy_fraction: f64,
    pub segments: Vec<SegmentEntry>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CorpusManifest {
    pub entries: Vec<ManifestEntry>,
}

impl CorpusManifest {
    pub fn emit(&self) -> String {
        let mut out = String::new();
        for (i, e) in self.entries.iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            out.push_str(&format!("trace={}\n", e.trace_file));
            out.push_str(&format!("events={}\n", e.events_file));
            out.push_str(&format!("seed={}\n", e.seed));
            out.push_str(&format!("occupancy_fraction={}\n", e.occupancy_fraction));
            let segs: Vec<String> = e
                .segments
                .iter()
                .map(|s| format!("{}:{}", s.file, s.label))
                .collect();
            out.push_str(&format!("segments={}\n", segs.join(",")));
        }
        out
    }

    pub fn parse(text: &str) -> Result<CorpusManifest> {
        let mut entries = Vec::new();
        for block in text.split("\n\n") {
            let block = block.trim();
            if block.is_empty() {
                continue;
            }
            let mut trace_file = None;
            let mut events_file = None;
            let mut seed = None;
            let mut occupancy_fraction = None;
            let mut segments = Vec::new();
            for line in block.lines() {
                let (key, value) = line
                    .split_once('=')
                    .ok_or_else(|| Error::Format(format!("manifest line `{line}` has no `=`")))?;
                match key {
                    "trace" => trace_file = Some(value.to_string()),
                    "events" => events_file = Some(value.to_string()),
                    "seed" => {
                        seed = Some(value.parse::<u64>().map_err(|_| {
                            Error::Format(format!("manifest seed `{value}` is not an integer"))
                        })?)
                    }
                    "occupancy_fraction" => {
                        occupancy_fraction = Some(value.parse::<f64>().map_err(|_| {
                            Error::Format(format!(
                                "manifest occupancy_fraction `{value}` is not a number"
                            ))
                        })?)
                    }
                    "segments" => {
                        for part in value.split(',').filter(|p| !p.is_empty()) {
                            let (file, label) = part.split_once(':').ok_or_else(|| {
                                Error::Format(format!("manifest segment `{part}` has no label"))
                            })?;
                            let label = match label {
                                "0" => 0,
                                "1" => 1,
                                other => {
                                    return Err(Error::Format(format!(
                                        "manifest segment label `{other}` is not 0/1"
                                    )))
                                }
                            };
                            segments.push(SegmentEntry { file: file.to_string(), label });
                        }
                    }
                    other => {
                        return Err(Error::Format(format!("unknown manifest key `{other}`")))
                    }
                }
            }
            let missing = |what: &str| Error::Format(format!("manifest block missing `{what}`"));
            entries.push(ManifestEntry {
                trace_file: trace_file.ok_or_else(|| missing("trace"))?,
                events_file: events_file.ok_or_else(|| missing("events"))?,
                seed: seed.ok_or_else(|| missing("seed"))?,
                occupancy_fraction: occupancy_fraction
                    .ok_or_else(|| missing("occupancy_fraction"))?,
                segments,
            });
        }
        Ok(CorpusManifest { entries })
    }
}

pub const SEGMENT_LEN_S: f64 = 30.0;

/// Non-overlapping fixed-length windows lying wholly inside a single
/// occupancy state, as (start_sample, len, label).
pub fn segment_windows(
    events: &EventList,
    n_samples: usize,
    sample_rate_hz: u32,
    segment_s: f64,
) -> Vec<(usize, usize, u8)> {
    let sr = sample_rate_hz as f64;
    let seg = (segment_s * sr).round() as usize;
    let mut regions: Vec<(usize, usize, u8)> = Vec::new();
    let mut prev = 0usize;
    for &(on, off) in events.events() {
        let on_i = (on * sr).ceil() as usize;
        let off_i = ((off * sr).floor() as usize).min(n_samples);
        if on_i > prev {
            regions.push((prev, on_i, 0));
        }
        if off_i > on_i {
            regions.push((on_i, off_i, 1));
        }
        prev = off_i.max(prev);
    }
    if n_samples > prev {
        regions.push((prev, n_samples, 0));
    }
    let mut out = Vec::new();
    for (start, end, label) in regions {
        let mut s = start;
        while s + seg <= end {
            out.push((s, seg, label));
            s += seg;
        }
    }
    out
}

/// Write `n_traces` labeled traces plus Track-1 segments under
/// `out_dir` and return the manifest (also written as `manifest.txt`).
/// Trace `i` uses seed `cfg.seed + i`.
pub fn synth_corpus(cfg: &SynthConfig, n_traces: usize, out_dir: &Path) -> Result<CorpusManifest> {
    if n_traces == 0 {
        return Err(Error::Config("n_traces must be at least 1".into()));
    }
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let mut manifest = CorpusManifest::default();
    for i in 0..n_traces {
        let trace_cfg = SynthConfig { seed: cfg.seed + i as u64, ..cfg.clone() };
        let (trace, events) = synth_trace(&trace_cfg)?;
        let trace_file = format!("trace_{i:03}.csv");
        let events_file = format!("events_{i:03}.csv");
        write(out_dir, &trace_file, &io::trace_to_string(&trace))?;
        write(out_dir, &events_file, &io::events_to_string(&events))?;
        let mut segments = Vec::new();
        for (j, (start, len, label)) in
            segment_windows(&events, trace.len(), cfg.sample_rate_hz, SEGMENT_LEN_S)
                .into_iter()
                .enumerate()
        {
            let seg_file = format!("seg_{i:03}_{j:03}.csv");
            let seg = trace.slice(start, len)?;
            write(out_dir, &seg_file, &io::trace_to_string(&seg))?;
            segments.push(SegmentEntry { file: seg_file, label });
        }
        manifest.entries.push(ManifestEntry {
            trace_file,
            events_file,
            seed: trace_cfg.seed,
            occupancy_fraction: events.total_duration() / cfg.duration_s,
            segments,
        });
    }
    write(out_dir, "manifest.txt", &manifest.emit())?;
    Ok(manifest)
}

fn write(dir: &Path, name: &str, text: &str) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, text).map_err(|e| Error::io(path.display().to_string(), e))
}
