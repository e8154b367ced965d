//! Detection metrics: segment accuracy, frame accuracy, event matching
//! with boundary latencies, and the composite Track-2 score.
//!
//! All functions are pure — every number here can be replayed from a
//! prediction CSV plus a truth CSV alone.

use crate::error::{Error, Result};
use crate::io::EventList;

/// Summary of a list of signed latencies, seconds.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LatencyStats {
    pub mean_s: f64,
    pub mean_abs_s: f64,
    pub max_abs_s: f64,
}

impl LatencyStats {
    pub fn from_latencies(latencies: &[f64]) -> LatencyStats {
        if latencies.is_empty() {
            return LatencyStats::default();
        }
        let n = latencies.len() as f64;
        LatencyStats {
            mean_s: latencies.iter().sum::<f64>() / n,
            mean_abs_s: latencies.iter().map(|l| l.abs()).sum::<f64>() / n,
            max_abs_s: latencies.iter().fold(0.0, |m, l| m.max(l.abs())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScoreReport {
    pub segment_accuracy: f64,
    pub frame_accuracy: f64,
    /// Signed pred − true onset latency per matched event.
    pub onset_latencies_s: Vec<f64>,
    pub offset_latencies_s: Vec<f64>,
    pub unmatched_true: usize,
    pub unmatched_pred: usize,
    pub composite: f64,
}

impl ScoreReport {
    /// `key=value` lines, one metric per line.
    pub fn emit(&self) -> String {
        let on = LatencyStats::from_latencies(&self.onset_latencies_s);
        let off = LatencyStats::from_latencies(&self.offset_latencies_s);
        let mut out = String::new();
        out.push_str(&format!("segment_accuracy={}\n", self.segment_accuracy));
        out.push_str(&format!("frame_accuracy={}\n", self.frame_accuracy));
        out.push_str(&format!("matched_events={}\n", self.onset_latencies_s.len()));
        out.push_str(&format!("unmatched_true={}\n", self.unmatched_true));
        out.push_str(&format!("unmatched_pred={}\n", self.unmatched_pred));
        out.push_str(&format!("onset_latency_mean_s={}\n", on.mean_s));
        out.push_str(&format!("onset_latency_mean_abs_s={}\n", on.mean_abs_s));
        out.push_str(&format!("onset_latency_max_abs_s={}\n", on.max_abs_s));
        out.push_str(&format!("offset_latency_mean_s={}\n", off.mean_s));
        out.push_str(&format!("offset_latency_mean_abs_s={}\n", off.mean_abs_s));
        out.push_str(&format!("offset_latency_max_abs_s={}\n", off.max_abs_s));
        out.push_str(&format!("composite={}\n", self.composite));
        out
    }
}

/// Mean of [(p > threshold) == label]; a tie `p == threshold` predicts 0.
pub fn segment_accuracy(preds: &[f64], labels: &[u8], threshold: f64) -> Result<f64> {
    if preds.len() != labels.len() || preds.is_empty() {
        return Err(Error::Shape(format!(
            "segment_accuracy: {} predictions vs {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let correct = preds
        .iter()
        .zip(labels)
        .filter(|(p, y)| u8::from(**p > threshold) == **y)
        .count();
    Ok(correct as f64 / preds.len() as f64)
}

/// Result of greedy one-to-one event matching.
#[derive(Debug, Clone, PartialEq)]
pub struct EventMatches {
    /// (pred index, truth index, overlap seconds), in match order.
    pub pairs: Vec<(usize, usize, f64)>,
    pub unmatched_pred: Vec<usize>,
    pub unmatched_true: Vec<usize>,
}

impl EventMatches {
    pub fn total_overlap(&self) -> f64 {
        self.pairs.iter().map(|(_, _, o)| o).sum()
    }
}

fn overlap(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.1.min(b.1) - a.0.max(b.0)).max(0.0)
}

/// Greedy one-to-one matching by descending temporal overlap; zero
/// overlap never matches. Ties break on earlier predicted event, then
/// earlier truth event.
pub fn match_events(pred: &EventList, truth: &EventList) -> EventMatches {
    let mut candidates = Vec::new();
    for (pi, p) in pred.events().iter().enumerate() {
        for (ti, t) in truth.events().iter().enumerate() {
            let o = overlap(*p, *t);
            if o > 0.0 {
                candidates.push((pi, ti, o));
            }
        }
    }
    candidates.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
    let mut pred_used = vec![false; pred.len()];
    let mut truth_used = vec![false; truth.len()];
    let mut pairs = Vec::new();
    for (pi, ti, o) in candidates {
        if !pred_used[pi] && !truth_used[ti] {
            pred_used[pi] = true;
            truth_used[ti] = true;
            pairs.push((pi, ti, o));
        }
    }
    EventMatches {
        pairs,
        unmatched_pred: (0..pred.len()).filter(|i| !pred_used[*i]).collect(),
        unmatched_true: (0..truth.len()).filter(|i| !truth_used[*i]).collect(),
    }
}

/// Signed boundary latencies for the matched pairs: pred − true, so
/// positive means the prediction was late.
pub fn latency_stats(
    matches: &EventMatches,
    pred: &EventList,
    truth: &EventList,
) -> (Vec<f64>, Vec<f64>) {
    let mut onset = Vec::with_capacity(matches.pairs.len());
    let mut offset = Vec::with_capacity(matches.pairs.len());
    for &(pi, ti, _) in &matches.pairs {
        let p = pred.events()[pi];
        let t = truth.events()[ti];
        onset.push(p.0 - t.0);
        offset.push(p.1 - t.1);
    }
    (onset, offset)
}

/// points = 100·fa − (mao + maf)/2 − 5·(unmatched_true + unmatched_pred)
/// / max(1, n_true), clamped to [0, 100].
pub fn composite_score(
    frame_accuracy: f64,
    mean_abs_onset_s: f64,
    mean_abs_offset_s: f64,
    unmatched_true: usize,
    unmatched_pred: usize,
    n_true_events: usize,
) -> f64 {
    let points = 100.0 * frame_accuracy
        - (mean_abs_onset_s + mean_abs_offset_s) / 2.0
        - 5.0 * (unmatched_true + unmatched_pred) as f64 / n_true_events.max(1) as f64;
    points.clamp(0.0, 100.0)
}

/// Full Track-2 report from extracted events plus frame accuracy.
pub fn score_streaming(pred: &EventList, truth: &EventList, frame_accuracy: f64) -> ScoreReport {
    let matches = match_events(pred, truth);
    let (onset, offset) = latency_stats(&matches, pred, truth);
    let composite = composite_score(
        frame_accuracy,
        LatencyStats::from_latencies(&onset).mean_abs_s,
        LatencyStats::from_latencies(&offset).mean_abs_s,
        matches.unmatched_true.len(),
        matches.unmatched_pred.len(),
        truth.len(),
    );
    ScoreReport {
        segment_accuracy: 0.0,
        frame_accuracy,
        onset_latencies_s: onset,
        offset_latencies_s: offset,
        unmatched_true: matches.unmatched_true.len(),
        unmatched_pred: matches.unmatched_pred.len(),
        composite,
    }
}
