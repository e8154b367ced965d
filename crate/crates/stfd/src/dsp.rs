//! Deterministic spectral front-end: Hann-windowed STFT power spectra
//! and the per-axis log-Mel gram. Computed in f64 throughout; narrowed
//! once when fed to the model.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::io::AccelTrace;

/// Row-major f64 matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// Spectral front-end parameters.
#[derive(Debug, Clone)]
pub struct DspConfig {
    pub n_fft: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub fmin_hz: f64,
    pub fmax_hz: f64,
    pub floor_eps: f64,
}

impl Default for DspConfig {
    fn default() -> Self {
        // 1.024 s windows at 250 Hz: long enough for respiration and
        // cardiac energy to register; 32 mels below the 125 Hz Nyquist.
        DspConfig {
            n_fft: 256,
            hop: 128,
            n_mels: 32,
            fmin_hz: 0.0,
            fmax_hz: 125.0,
            floor_eps: 1e-10,
        }
    }
}

/// Log-Mel power gram, one channel per accelerometer axis.
/// Shape (3, n_mels, n_frames), flattened row-major.
#[derive(Debug, Clone)]
pub struct SpectralGram {
    pub data: Vec<f64>,
    pub n_mels: usize,
    pub n_frames: usize,
    pub n_fft: usize,
    pub hop: usize,
    pub sample_rate_hz: u32,
}

impl SpectralGram {
    pub fn shape(&self) -> [usize; 3] {
        [3, self.n_mels, self.n_frames]
    }
}

/// Number of analysis frames for a signal of `n_samples`: frames start
/// at sample 0, no centering or padding.
pub fn n_frames(n_samples: usize, n_fft: usize, hop: usize) -> usize {
    if n_samples < n_fft {
        0
    } else {
        1 + (n_samples - n_fft) / hop
    }
}

/// w[k] = 0.5 * (1 - cos(2 pi k / (n - 1))), symmetric.
pub fn hann_window(n: usize) -> Result<Vec<f64>> {
    if n < 2 {
        return Err(Error::Config(format!("hann_window: n must be >= 2, got {n}")));
    }
    Ok((0..n)
        .map(|k| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * k as f64 / (n - 1) as f64).cos()))
        .collect())
}

/// Hann-windowed squared-magnitude STFT: rows are frequency bins
/// 0..n_fft/2, columns are frames covering [f*hop, f*hop + n_fft).
pub fn stft_power(signal: &[f64], n_fft: usize, hop: usize) -> Result<Matrix> {
    if !n_fft.is_power_of_two() || n_fft < 2 {
        return Err(Error::Config(format!("n_fft must be a power of two, got {n_fft}")));
    }
    if hop == 0 {
        return Err(Error::Config("hop must be >= 1".into()));
    }
    if signal.len() < n_fft {
        return Err(Error::Data(format!(
            "signal of {} samples shorter than n_fft {}",
            signal.len(),
            n_fft
        )));
    }
    let frames = n_frames(signal.len(), n_fft, hop);
    let bins = n_fft / 2 + 1;
    let window = hann_window(n_fft)?;
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);
    let mut out = Matrix::zeros(bins, frames);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    for f in 0..frames {
        let start = f * hop;
        for (i, (s, w)) in signal[start..start + n_fft].iter().zip(&window).enumerate() {
            buf[i] = Complex::new(s * w, 0.0);
        }
        fft.process(&mut buf);
        for (b, v) in buf.iter().take(bins).enumerate() {
            out.data[b * frames + f] = v.norm_sqr();
        }
    }
    Ok(out)
}

/// Triangular Mel filterbank.
#[derive(Debug, Clone)]
pub struct MelBank {
    /// (n_mels, n_fft/2 + 1), each row normalized to sum 1.
    pub weights: Matrix,
    pub fmin_hz: f64,
    pub fmax_hz: f64,
}

/// HTK mel scale.
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters with peaks equally spaced on the mel scale over
/// [fmin, fmax], evaluated at the FFT bin frequencies and row-sum
/// normalized.
pub fn mel_bank(
    sample_rate_hz: u32,
    n_fft: usize,
    n_mels: usize,
    fmin_hz: f64,
    fmax_hz: f64,
) -> Result<MelBank> {
    let nyquist = sample_rate_hz as f64 / 2.0;
    if !(0.0 <= fmin_hz && fmin_hz < fmax_hz && fmax_hz <= nyquist) {
        return Err(Error::Config(format!(
            "mel band edges [{fmin_hz}, {fmax_hz}] invalid for nyquist {nyquist}"
        )));
    }
    if n_mels < 2 {
        return Err(Error::Config(format!("n_mels must be >= 2, got {n_mels}")));
    }
    let bins = n_fft / 2 + 1;
    let mel_lo = hz_to_mel(fmin_hz);
    let mel_hi = hz_to_mel(fmax_hz);
    // n_mels + 2 edge points; peak of filter m sits at point m + 1
    let hz_points: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (n_mels + 1) as f64))
        .collect();
    let bin_hz: Vec<f64> = (0..bins)
        .map(|b| b as f64 * sample_rate_hz as f64 / n_fft as f64)
        .collect();
    let mut weights = Matrix::zeros(n_mels, bins);
    for m in 0..n_mels {
        let (lo, peak, hi) = (hz_points[m], hz_points[m + 1], hz_points[m + 2]);
        let mut row_sum = 0.0;
        for b in 0..bins {
            let f = bin_hz[b];
            let w = if f >= lo && f <= peak {
                (f - lo) / (peak - lo)
            } else if f > peak && f <= hi {
                (hi - f) / (hi - peak)
            } else {
                0.0
            };
            weights.data[m * bins + b] = w;
            row_sum += w;
        }
        if row_sum <= 0.0 {
            return Err(Error::Config(format!(
                "mel filter {m} covers no FFT bin (band [{lo}, {hi}] Hz too narrow)"
            )));
        }
        for b in 0..bins {
            weights.data[m * bins + b] /= row_sum;
        }
    }
    Ok(MelBank {
        weights,
        fmin_hz,
        fmax_hz,
    })
}

/// Per axis: ln(MelBank . stft_power + floor_eps). Shape (3, n_mels, T).
pub fn log_mel_gram(trace: &AccelTrace, cfg: &DspConfig) -> Result<SpectralGram> {
    let bank = mel_bank(
        trace.sample_rate_hz,
        cfg.n_fft,
        cfg.n_mels,
        cfg.fmin_hz,
        cfg.fmax_hz,
    )?;
    if cfg.floor_eps <= 0.0 {
        return Err(Error::Config("floor_eps must be positive".into()));
    }
    let frames = n_frames(trace.len(), cfg.n_fft, cfg.hop);
    if frames == 0 {
        return Err(Error::Data(format!(
            "trace of {} samples shorter than n_fft {}",
            trace.len(),
            cfg.n_fft
        )));
    }
    let bins = cfg.n_fft / 2 + 1;
    let mut data = vec![0.0; 3 * cfg.n_mels * frames];
    for axis in 0..3 {
        let power = stft_power(&trace.axis(axis), cfg.n_fft, cfg.hop)?;
        for m in 0..cfg.n_mels {
            let wrow = bank.weights.row(m);
            for f in 0..frames {
                let mut acc = 0.0;
                for b in 0..bins {
                    acc += wrow[b] * power.data[b * frames + f];
                }
                data[(axis * cfg.n_mels + m) * frames + f] = (acc + cfg.floor_eps).ln();
            }
        }
    }
    Ok(SpectralGram {
        data,
        n_mels: cfg.n_mels,
        n_frames: frames,
        n_fft: cfg.n_fft,
        hop: cfg.hop,
        sample_rate_hz: trace.sample_rate_hz,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    /// Direct O(n^2) DFT power oracle, independent of rustfft.
    fn dft_power_oracle(frame: &[f64]) -> Vec<f64> {
        let n = frame.len();
        let bins = n / 2 + 1;
        (0..bins)
            .map(|k| {
                let mut re = 0.0;
                let mut im = 0.0;
                for (t, x) in frame.iter().enumerate() {
                    let ang = -2.0 * std::f64::consts::PI * (k * t) as f64 / n as f64;
                    re += x * ang.cos();
                    im += x * ang.sin();
                }
                re * re + im * im
            })
            .collect()
    }

    fn stft_oracle(signal: &[f64], n_fft: usize, hop: usize) -> Matrix {
        let window = hann_window(n_fft).unwrap();
        let frames = n_frames(signal.len(), n_fft, hop);
        let bins = n_fft / 2 + 1;
        let mut out = Matrix::zeros(bins, frames);
        for f in 0..frames {
            let frame: Vec<f64> = signal[f * hop..f * hop + n_fft]
                .iter()
                .zip(&window)
                .map(|(s, w)| s * w)
                .collect();
            for (b, p) in dft_power_oracle(&frame).into_iter().enumerate() {
                out.data[b * frames + f] = p;
            }
        }
        out
    }

    #[test]
    fn hann_closed_form() {
        let w = hann_window(4).unwrap();
        for (a, b) in w.iter().zip(&[0.0, 0.75, 0.75, 0.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(hann_window(1).is_err());
    }

    #[test]
    fn hann_endpoints_and_symmetry() {
        let w = hann_window(129).unwrap();
        assert_eq!(w[0], 0.0);
        assert!(w[128].abs() < 1e-12);
        for k in 0..129 {
            assert!((w[k] - w[128 - k]).abs() < 1e-12);
        }
    }

    #[test]
    fn stft_zero_signal() {
        let m = stft_power(&vec![0.0; 1024], 256, 128).unwrap();
        assert!(m.data.iter().all(|v| *v == 0.0));
        assert_eq!(m.rows, 129);
        assert_eq!(m.cols, 7);
    }

    #[test]
    fn stft_pure_cosine_peaks_at_bin16() {
        let n_fft = 256;
        let sr = 250.0;
        let f = 16.0 * sr / n_fft as f64;
        let signal: Vec<f64> = (0..1024)
            .map(|t| (2.0 * std::f64::consts::PI * f * t as f64 / sr).cos())
            .collect();
        let m = stft_power(&signal, n_fft, 128).unwrap();
        for frame in 0..m.cols {
            let argmax = (0..m.rows)
                .max_by(|a, b| m.at(*a, frame).total_cmp(&m.at(*b, frame)))
                .unwrap();
            assert_eq!(argmax, 16);
        }
    }

    #[test]
    fn stft_matches_direct_dft_oracle() {
        let mut rng = SplitMix64::new(21);
        for _ in 0..5 {
            let signal: Vec<f64> = (0..1024).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
            let fast = stft_power(&signal, 256, 128).unwrap();
            let slow = stft_oracle(&signal, 256, 128);
            let scale = slow.data.iter().cloned().fold(0.0f64, f64::max);
            for (a, b) in fast.data.iter().zip(&slow.data) {
                assert!(
                    (a - b).abs() <= 1e-6 * b.abs().max(scale * 1e-9),
                    "stft mismatch: {a} vs {b}"
                );
            }
        }
    }

    #[test]
    fn stft_rejects_short_signal() {
        assert!(matches!(
            stft_power(&vec![0.0; 100], 256, 128),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn mel_rows_normalized_and_ordered() {
        let bank = mel_bank(250, 256, 32, 0.0, 125.0).unwrap();
        let mut prev_peak = 0.0;
        for m in 0..32 {
            let row = bank.weights.row(m);
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6, "row {m} sums to {sum}");
            let peak_bin = (0..row.len())
                .max_by(|a, b| row[*a].total_cmp(&row[*b]))
                .unwrap();
            let peak_hz = peak_bin as f64 * 250.0 / 256.0;
            assert!(peak_hz >= prev_peak);
            prev_peak = peak_hz;
        }
    }

    #[test]
    fn mel_columns_bounded() {
        let bank = mel_bank(250, 256, 32, 0.0, 125.0).unwrap();
        let bins = bank.weights.cols;
        for b in 0..bins {
            let col: f64 = (0..32).map(|m| bank.weights.at(m, b)).sum();
            assert!(col <= 1.0 + 1e-9, "column {b} sums to {col}");
        }
    }

    #[test]
    fn mel_bank_matches_formula_oracle() {
        // independently coded straight-from-formula construction
        let (sr, n_fft, n_mels, fmin, fmax) = (250u32, 256usize, 8usize, 0.0, 125.0);
        let bank = mel_bank(sr, n_fft, n_mels, fmin, fmax).unwrap();
        let bins = n_fft / 2 + 1;
        let mel = |hz: f64| 2595.0 * (1.0 + hz / 700.0).log10();
        let inv_mel = |m: f64| 700.0 * (10f64.powf(m / 2595.0) - 1.0);
        let m_lo = mel(fmin);
        let m_hi = mel(fmax);
        for m in 0..n_mels {
            let lo = inv_mel(m_lo + (m_hi - m_lo) * m as f64 / (n_mels + 1) as f64);
            let peak = inv_mel(m_lo + (m_hi - m_lo) * (m + 1) as f64 / (n_mels + 1) as f64);
            let hi = inv_mel(m_lo + (m_hi - m_lo) * (m + 2) as f64 / (n_mels + 1) as f64);
            let mut raw: Vec<f64> = (0..bins)
                .map(|b| {
                    let f = b as f64 * sr as f64 / n_fft as f64;
                    if f >= lo && f <= peak {
                        (f - lo) / (peak - lo)
                    } else if f > peak && f <= hi {
                        (hi - f) / (hi - peak)
                    } else {
                        0.0
                    }
                })
                .collect();
            let s: f64 = raw.iter().sum();
            for v in raw.iter_mut() {
                *v /= s;
            }
            for (b, expect) in raw.iter().enumerate() {
                assert!(
                    (bank.weights.at(m, b) - expect).abs() < 1e-9,
                    "filter {m} bin {b}"
                );
            }
        }
    }

    #[test]
    fn mel_bank_rejects_bad_edges() {
        assert!(mel_bank(250, 256, 32, 100.0, 50.0).is_err());
        assert!(mel_bank(250, 256, 32, 0.0, 200.0).is_err());
        assert!(mel_bank(250, 256, 1, 0.0, 125.0).is_err());
    }

    #[test]
    fn log_mel_zero_trace_is_log_floor() {
        let trace = AccelTrace::new(250, vec![[0.0, 0.0, 0.0]; 512]).unwrap();
        let cfg = DspConfig::default();
        let g = log_mel_gram(&trace, &cfg).unwrap();
        let expect = cfg.floor_eps.ln();
        for v in &g.data {
            assert!((v - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn log_mel_shape_arithmetic() {
        let trace = AccelTrace::new(250, vec![[0.1, 0.2, 0.3]; 15000]).unwrap();
        let g = log_mel_gram(&trace, &DspConfig::default()).unwrap();
        assert_eq!(g.shape(), [3, 32, 116]);
    }

    #[test]
    fn log_mel_locates_low_frequency_tone() {
        let sr = 250.0;
        let tone_hz = 1.2;
        let samples: Vec<[f32; 3]> = (0..15000)
            .map(|t| {
                let v = (2.0 * std::f64::consts::PI * tone_hz * t as f64 / sr).sin();
                [0.0, 0.0, v as f32]
            })
            .collect();
        let trace = AccelTrace::new(250, samples).unwrap();
        let cfg = DspConfig::default();
        let g = log_mel_gram(&trace, &cfg).unwrap();
        // locate the mel band whose filter weights the 1.2 Hz region most
        let bank = mel_bank(250, cfg.n_fft, cfg.n_mels, cfg.fmin_hz, cfg.fmax_hz).unwrap();
        let bin = (tone_hz * cfg.n_fft as f64 / sr).round() as usize;
        let expected_band = (0..cfg.n_mels)
            .max_by(|a, b| bank.weights.at(*a, bin).total_cmp(&bank.weights.at(*b, bin)))
            .unwrap();
        // z axis is channel 2
        for f in 0..g.n_frames {
            let argmax = (0..cfg.n_mels)
                .max_by(|a, b| {
                    let va = g.data[(2 * cfg.n_mels + a) * g.n_frames + f];
                    let vb = g.data[(2 * cfg.n_mels + b) * g.n_frames + f];
                    va.total_cmp(&vb)
                })
                .unwrap();
            assert_eq!(argmax, expected_band, "frame {f}");
        }
    }

    #[test]
    fn log_mel_shift_covariance() {
        let mut rng = SplitMix64::new(31);
        let cfg = DspConfig::default();
        let base: Vec<[f32; 3]> = (0..4096)
            .map(|_| {
                [
                    rng.uniform_range(-1.0, 1.0) as f32,
                    rng.uniform_range(-1.0, 1.0) as f32,
                    rng.uniform_range(-1.0, 1.0) as f32,
                ]
            })
            .collect();
        let shifted: Vec<[f32; 3]> = std::iter::repeat_n([0.0f32; 3], cfg.hop)
            .chain(base.iter().cloned())
            .collect();
        let g0 = log_mel_gram(&AccelTrace::new(250, base).unwrap(), &cfg).unwrap();
        let g1 = log_mel_gram(&AccelTrace::new(250, shifted).unwrap(), &cfg).unwrap();
        // frame f of the original appears as frame f+1 of the delayed input
        for c in 0..3 {
            for m in 0..cfg.n_mels {
                for f in 0..g0.n_frames {
                    let a = g0.data[(c * cfg.n_mels + m) * g0.n_frames + f];
                    let b = g1.data[(c * cfg.n_mels + m) * g1.n_frames + f + 1];
                    assert!(
                        (a - b).abs() <= 1e-6 * a.abs().max(1.0),
                        "axis {c} mel {m} frame {f}: {a} vs {b}"
                    );
                }
            }
        }
    }
}
