//! STFT analysis/synthesis with sqrt-Hann windows and the iSTFT-STFT
//! consistency projection.
//!
//! Conventions:
//! - `fft_size == win_len`, one-sided spectra with `win_len / 2 + 1` bins.
//! - The signal is zero-padded by `win_len - hop` samples on both ends so that
//!   every original sample is covered by the full set of overlapping frames.
//!   Synthesis divides by the constant overlap-add gain, which makes
//!   `istft(stft(x)) == x` up to rounding.
//! - Spectrogram data is stored frame-major: `data[t * bins + f]`.

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{first_non_finite, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Window {
    SqrtHann,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StftConfig {
    pub sample_rate_hz: u32,
    pub win_len: usize,
    pub hop: usize,
    pub window: Window,
    pub fft_size: usize,
}

impl StftConfig {
    pub fn new(sample_rate_hz: u32, win_len: usize, hop: usize) -> Result<Self> {
        let cfg = Self {
            sample_rate_hz,
            win_len,
            hop,
            window: Window::SqrtHann,
            fft_size: win_len,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Window and hop given in milliseconds.
    pub fn from_millis(sample_rate_hz: u32, win_ms: f64, hop_ms: f64) -> Result<Self> {
        let to_samples = |ms: f64| (ms * sample_rate_hz as f64 / 1000.0).round() as usize;
        Self::new(sample_rate_hz, to_samples(win_ms), to_samples(hop_ms))
    }

    /// 16 kHz, 32 ms window, 8 ms hop.
    pub fn wideband() -> Self {
        Self::from_millis(16_000, 32.0, 8.0).expect("static config is valid")
    }

    /// 8 kHz, 32 ms window, 8 ms hop. Used for the desk-scale toy scenes.
    pub fn narrowband() -> Self {
        Self::from_millis(8_000, 32.0, 8.0).expect("static config is valid")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidStftConfig(m.to_string()));
        if self.sample_rate_hz == 0 || self.win_len == 0 || self.hop == 0 {
            return bad("sample rate, window and hop must be positive");
        }
        if self.hop > self.win_len {
            return bad("hop exceeds window length");
        }
        if self.win_len % self.hop != 0 {
            return bad("hop must divide the window length");
        }
        // sqrt-Hann analysis + synthesis is COLA only with at least 2x overlap
        if self.win_len / self.hop < 2 {
            return bad("sqrt-Hann needs win_len / hop >= 2");
        }
        if self.win_len % 2 != 0 {
            return bad("window length must be even");
        }
        if self.fft_size != self.win_len {
            return bad("fft_size must equal win_len");
        }
        Ok(())
    }

    pub fn num_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Zero padding applied to each end of the signal.
    pub fn pad(&self) -> usize {
        self.win_len - self.hop
    }

    pub fn num_frames(&self, num_samples: usize) -> usize {
        (self.win_len - self.hop + num_samples - 1) / self.hop + 1
    }

    /// Longest signal that maps to exactly `frames` frames.
    pub fn max_samples_for(&self, frames: usize) -> usize {
        ((frames + 1) * self.hop).saturating_sub(self.win_len)
    }

    pub fn window_samples(&self) -> Vec<f64> {
        let n = self.win_len as f64;
        (0..self.win_len)
            .map(|i| (0.5 - 0.5 * (2.0 * PI * i as f64 / n).cos()).sqrt())
            .collect()
    }

    /// Sum of squared windows over all overlapping frames (constant by COLA).
    pub fn overlap_gain(&self) -> f64 {
        ola_gain(self)
    }

    /// Frequency of bin `k` in Hz.
    pub fn bin_hz(&self, k: usize) -> f64 {
        k as f64 * self.sample_rate_hz as f64 / self.fft_size as f64
    }

    pub fn frames_per_second(&self) -> f64 {
        self.sample_rate_hz as f64 / self.hop as f64
    }
}

/// A `T x F` complex spectrogram.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrogram {
    frames: usize,
    bins: usize,
    data: Vec<Complex64>,
    config: StftConfig,
    /// Length of the time-domain signal this spectrogram synthesizes to.
    num_samples: usize,
}

impl ComplexSpectrogram {
    pub fn zeros(frames: usize, config: StftConfig) -> Self {
        let bins = config.num_bins();
        Self {
            frames,
            bins,
            data: vec![Complex64::new(0.0, 0.0); frames * bins],
            config,
            num_samples: config.max_samples_for(frames),
        }
    }

    pub fn from_data(
        frames: usize,
        config: StftConfig,
        data: Vec<Complex64>,
        num_samples: usize,
    ) -> Result<Self> {
        let bins = config.num_bins();
        if data.len() != frames * bins {
            return Err(Error::ShapeMismatch(format!(
                "{} values for {} x {} spectrogram",
                data.len(),
                frames,
                bins
            )));
        }
        if config.num_frames(num_samples.max(1)) != frames {
            return Err(Error::ShapeMismatch(format!(
                "{num_samples} samples do not map to {frames} frames"
            )));
        }
        if let Some(i) = first_non_finite(data.iter().flat_map(|c| [&c.re, &c.im])) {
            return Err(Error::NonFinite {
                what: "spectrogram",
                index: i / 2,
            });
        }
        Ok(Self {
            frames,
            bins,
            data,
            config,
            num_samples,
        })
    }

    /// A spectrogram with the same shape and metadata but new values.
    pub fn with_data(&self, data: Vec<Complex64>) -> Self {
        assert_eq!(data.len(), self.data.len(), "shape mismatch");
        Self {
            data,
            ..self.clone()
        }
    }

    pub fn zeros_like(&self) -> Self {
        self.with_data(vec![Complex64::new(0.0, 0.0); self.data.len()])
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn config(&self) -> &StftConfig {
        &self.config
    }

    pub fn num_samples(&self) -> usize {
        self.num_samples
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Complex64> {
        self.data
    }

    #[inline]
    pub fn get(&self, t: usize, f: usize) -> Complex64 {
        self.data[t * self.bins + f]
    }

    #[inline]
    pub fn set(&mut self, t: usize, f: usize, v: Complex64) {
        self.data[t * self.bins + f] = v;
    }

    /// Values of frequency bin `f` across all frames.
    pub fn bin_series(&self, f: usize) -> Vec<Complex64> {
        (0..self.frames).map(|t| self.get(t, f)).collect()
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.frames == other.frames && self.bins == other.bins
    }

    pub fn check_same_shape(&self, other: &Self, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!(
                "{what}: {}x{} vs {}x{}",
                self.frames, self.bins, other.frames, other.bins
            )))
        }
    }

    pub fn check_finite(&self, what: &'static str) -> Result<()> {
        match first_non_finite(self.data.iter().flat_map(|c| [&c.re, &c.im])) {
            Some(i) => Err(Error::NonFinite { what, index: i / 2 }),
            None => Ok(()),
        }
    }

    /// Sum of `|X(t,f)|^2`.
    pub fn energy(&self) -> f64 {
        self.data.iter().map(|c| c.norm_sqr()).sum()
    }

    /// Sum of `|X(t,f)|`.
    pub fn l1_magnitude(&self) -> f64 {
        self.data.iter().map(|c| c.norm()).sum()
    }

    pub fn max_power(&self) -> f64 {
        self.data.iter().map(|c| c.norm_sqr()).fold(0.0, f64::max)
    }

    pub fn scaled(&self, gain: f64) -> Self {
        self.with_data(self.data.iter().map(|c| c * gain).collect())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other, "add")?;
        Ok(self.with_data(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
        ))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other, "sub")?;
        Ok(self.with_data(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a - b)
                .collect(),
        ))
    }

    /// Frames `start..start + len`, re-labelled as a standalone spectrogram.
    pub fn crop_frames(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.frames || len == 0 {
            return Err(Error::ShapeMismatch(format!(
                "crop {start}+{len} out of {} frames",
                self.frames
            )));
        }
        let data = self.data[start * self.bins..(start + len) * self.bins].to_vec();
        Ok(Self {
            frames: len,
            bins: self.bins,
            data,
            config: self.config,
            num_samples: if len == self.frames {
                self.num_samples
            } else {
                self.config.max_samples_for(len)
            },
        })
    }

    /// Largest absolute difference between corresponding values.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }
}

struct Plans {
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

fn plans(n: usize) -> Plans {
    let mut planner = FftPlanner::new();
    Plans {
        forward: planner.plan_fft_forward(n),
        inverse: planner.plan_fft_inverse(n),
    }
}

pub fn stft(signal: &[f64], cfg: &StftConfig) -> Result<ComplexSpectrogram> {
    cfg.validate()?;
    if signal.is_empty() {
        return Err(Error::EmptySignal);
    }
    if let Some(i) = first_non_finite(signal) {
        return Err(Error::NonFinite {
            what: "signal",
            index: i,
        });
    }
    let n = cfg.win_len;
    let hop = cfg.hop;
    let pad = cfg.pad();
    let frames = cfg.num_frames(signal.len());
    let bins = cfg.num_bins();
    let mut padded = vec![0.0; (frames - 1) * hop + n];
    padded[pad..pad + signal.len()].copy_from_slice(signal);

    let window = cfg.window_samples();
    let plans = plans(n);
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    let mut scratch = vec![Complex64::new(0.0, 0.0); plans.forward.get_inplace_scratch_len()];
    let mut data = Vec::with_capacity(frames * bins);
    for t in 0..frames {
        let frame = &padded[t * hop..t * hop + n];
        for ((b, &x), &w) in buf.iter_mut().zip(frame).zip(&window) {
            *b = Complex64::new(x * w, 0.0);
        }
        plans.forward.process_with_scratch(&mut buf, &mut scratch);
        data.extend_from_slice(&buf[..bins]);
    }
    Ok(ComplexSpectrogram {
        frames,
        bins,
        data,
        config: *cfg,
        num_samples: signal.len(),
    })
}

pub fn istft(spec: &ComplexSpectrogram) -> Result<Vec<f64>> {
    let cfg = spec.config;
    cfg.validate()?;
    if spec.bins != cfg.num_bins() || cfg.num_frames(spec.num_samples.max(1)) != spec.frames {
        return Err(Error::InvalidStftConfig(
            "spectrogram shape inconsistent with its config".into(),
        ));
    }
    spec.check_finite("spectrogram")?;
    let n = cfg.win_len;
    let hop = cfg.hop;
    let bins = spec.bins;
    let window = cfg.window_samples();
    let gain = ola_gain(&cfg);
    let plans = plans(n);
    let mut out = vec![0.0; (spec.frames - 1) * hop + n];
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    let mut scratch = vec![Complex64::new(0.0, 0.0); plans.inverse.get_inplace_scratch_len()];
    let scale = 1.0 / (n as f64 * gain);
    for t in 0..spec.frames {
        let row = &spec.data[t * bins..(t + 1) * bins];
        buf[..bins].copy_from_slice(row);
        for k in bins..n {
            buf[k] = row[n - k].conj();
        }
        plans.inverse.process_with_scratch(&mut buf, &mut scratch);
        let seg = &mut out[t * hop..t * hop + n];
        for ((o, b), &w) in seg.iter_mut().zip(&buf).zip(&window) {
            *o += b.re * w * scale;
        }
    }
    let pad = cfg.pad();
    Ok(out[pad..pad + spec.num_samples].to_vec())
}

/// Constant overlap-add gain `sum_k w^2(n - k hop)` of the squared window.
fn ola_gain(cfg: &StftConfig) -> f64 {
    let w = cfg.window_samples();
    let offset = cfg.hop / 2;
    (0..cfg.win_len / cfg.hop)
        .map(|k| w[offset + k * cfg.hop].powi(2))
        .sum()
}

/// `stft(istft(spec))`: the nearest consistent spectrogram.
pub fn consistency_project(spec: &ComplexSpectrogram) -> Result<ComplexSpectrogram> {
    let signal = istft(spec)?;
    stft(&signal, &spec.config)
}

/// Vector-Jacobian product of [`consistency_project`].
///
/// The projection is self-adjoint under the inner product that weights
/// interior bins twice (they stand for their negative-frequency mirror), so
/// with `W = diag(1, 2, ..., 2, 1)` the pullback is `W P W^-1`.
pub fn consistency_project_vjp(grad: &ComplexSpectrogram) -> Result<ComplexSpectrogram> {
    let bins = grad.bins;
    let weight = |f: usize| if f == 0 || f == bins - 1 { 1.0 } else { 2.0 };
    let mut scaled = grad.clone();
    for (i, v) in scaled.data.iter_mut().enumerate() {
        *v /= weight(i % bins);
    }
    let mut projected = consistency_project(&scaled)?;
    for (i, v) in projected.data.iter_mut().enumerate() {
        *v *= weight(i % bins);
    }
    Ok(projected)
}
