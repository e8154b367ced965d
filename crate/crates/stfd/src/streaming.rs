//! Push-based streaming runtime and event-boundary extraction.
//!
//! Frame t is emitted as soon as its full ±R-frame context is buffered,
//! where R is the model's structural lookahead. Each emission reruns
//! the offline pipeline on exactly the gram frames [t−R, t+R] (clipped
//! at the true stream boundaries), so the convolution zero-padding a
//! window sees coincides with what the offline run sees and streamed
//! probabilities match offline ones bitwise. Emitted frames are final.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::io::{AccelTrace, EventList};
use crate::models::{receptive_field_frames, Model};

/// One finalized streamed frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Emission {
    pub frame_index: usize,
    pub time_s: f64,
    pub prob: f32,
}

/// Streaming state machine around read-only model parameters.
pub struct StreamState<'a> {
    model: &'a Model<f32>,
    buf: VecDeque<[f32; 3]>,
    /// Absolute sample index of `buf[0]`.
    base: usize,
    total_samples: usize,
    next_frame: usize,
    closed: bool,
}

impl<'a> StreamState<'a> {
    pub fn new(model: &'a Model<f32>) -> StreamState<'a> {
        StreamState {
            model,
            buf: VecDeque::new(),
            base: 0,
            total_samples: 0,
            next_frame: 0,
            closed: false,
        }
    }

    pub fn emitted_frames(&self) -> usize {
        self.next_frame
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    /// Gram frames the stream holds so far (frame t needs samples
    /// [t·hop, t·hop + n_fft)).
    fn frames_buffered(&self) -> usize {
        let d = &self.model.cfg.dsp;
        if self.total_samples < d.n_fft {
            0
        } else {
            1 + (self.total_samples - d.n_fft) / d.hop
        }
    }

    fn emit_frame(&self, t: usize, last_frame: usize) -> Result<Emission> {
        let d = &self.model.cfg.dsp;
        let r = receptive_field_frames();
        let a = t.saturating_sub(r);
        let b = (t + r).min(last_frame);
        let start = a * d.hop;
        let len = (b - a) * d.hop + d.n_fft;
        let samples: Vec<[f32; 3]> = (start - self.base..start - self.base + len)
            .map(|i| self.buf[i])
            .collect();
        let window = AccelTrace::new(self.model.cfg.sample_rate_hz, samples)?;
        let probs = self.model.forward_streaming(&window, false)?.to_vec();
        Ok(Emission {
            frame_index: t,
            time_s: t as f64 * self.model.cfg.hop_s(),
            prob: probs[t - a],
        })
    }

    /// Trim samples no future frame window can need.
    fn trim(&mut self) {
        let d = &self.model.cfg.dsp;
        let r = receptive_field_frames();
        let keep_from = self.next_frame.saturating_sub(r) * d.hop;
        while self.base < keep_from {
            self.buf.pop_front();
            self.base += 1;
        }
    }

    /// Append a chunk (possibly empty) and emit every frame whose full
    /// lookahead context is now buffered.
    pub fn push_samples(&mut self, chunk: &[[f32; 3]]) -> Result<Vec<Emission>> {
        if self.closed {
            return Err(Error::Usage("push_samples on a closed stream".into()));
        }
        self.buf.extend(chunk.iter().copied());
        self.total_samples += chunk.len();
        let r = receptive_field_frames();
        let frames = self.frames_buffered();
        let mut out = Vec::new();
        while self.next_frame + r < frames {
            // context [t−R, t+R] is complete; the final frame index is
            // unknown mid-stream but t + R exists, which is enough
            let e = self.emit_frame(self.next_frame, self.next_frame + r)?;
            out.push(e);
            self.next_frame += 1;
            self.trim();
        }
        Ok(out)
    }

    /// Flush the trailing frames, whose right context is the true end
    /// of the stream, and mark the state closed.
    pub fn close(&mut self) -> Result<Vec<Emission>> {
        if self.closed {
            return Err(Error::Usage("close on a closed stream".into()));
        }
        self.closed = true;
        let frames = self.frames_buffered();
        let mut out = Vec::new();
        while self.next_frame < frames {
            let e = self.emit_frame(self.next_frame, frames - 1)?;
            out.push(e);
            self.next_frame += 1;
            self.trim();
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ExtractConfig {
    pub theta_on: f64,
    pub theta_off: f64,
    pub min_dur_s: f64,
    pub min_gap_s: f64,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        ExtractConfig { theta_on: 0.6, theta_off: 0.4, min_dur_s: 5.0, min_gap_s: 3.0 }
    }
}

impl ExtractConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.theta_off > 0.0 && self.theta_off <= self.theta_on && self.theta_on < 1.0) {
            return Err(Error::Config(format!(
                "thresholds must satisfy 0 < theta_off <= theta_on < 1, got on={} off={}",
                self.theta_on, self.theta_off
            )));
        }
        if self.min_dur_s < 0.0 || self.min_gap_s < 0.0 {
            return Err(Error::Config(format!(
                "min_dur_s and min_gap_s must be >= 0, got {} and {}",
                self.min_dur_s, self.min_gap_s
            )));
        }
        Ok(())
    }
}

/// Hysteresis event extraction over frame probabilities: enter at
/// prob >= theta_on, leave at prob < theta_off. Boundaries sit at frame
/// centers; gaps shorter than min_gap_s are merged, then events shorter
/// than min_dur_s (and empty single-frame events) are dropped.
pub fn extract_events(probs: &[f64], hop_s: f64, cfg: &ExtractConfig) -> Result<EventList> {
    cfg.validate()?;
    if !(hop_s > 0.0) {
        return Err(Error::Config(format!("hop_s must be positive, got {hop_s}")));
    }
    let center = |i: usize| (i as f64 + 0.5) * hop_s;
    let mut raw: Vec<(f64, f64)> = Vec::new();
    let mut onset: Option<f64> = None;
    let mut last_in = 0.0;
    for (i, p) in probs.iter().enumerate() {
        match onset {
            None => {
                if *p >= cfg.theta_on {
                    onset = Some(center(i));
                    last_in = center(i);
                }
            }
            Some(on) => {
                if *p < cfg.theta_off {
                    raw.push((on, last_in));
                    onset = None;
                } else {
                    last_in = center(i);
                }
            }
        }
    }
    if let Some(on) = onset {
        raw.push((on, last_in));
    }
    let mut merged: Vec<(f64, f64)> = Vec::new();
    for (on, off) in raw {
        match merged.last_mut() {
            Some(prev) if on - prev.1 < cfg.min_gap_s => prev.1 = off,
            _ => merged.push((on, off)),
        }
    }
    merged.retain(|(on, off)| off - on >= cfg.min_dur_s && off > on);
    EventList::new(merged)
}
