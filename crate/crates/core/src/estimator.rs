//! Trainable estimators producing the speech and noise spectrograms.
//!
//! Two modes share one flat parameter vector interface so the optimizer does
//! not care which is in use:
//!
//! - `FreeVariable`: the two output spectrograms are the parameters.
//! - `MaskNet`: a per-frame `affine -> tanh -> affine` map from the stacked
//!   RI features of all input mics to complex masks, which multiply the
//!   reference input to give the RI components of both estimates.

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{first_non_finite, Error, Result};
use crate::loss::EstimatePair;
use crate::spectral::{ComplexSpectrogram, StftConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EstimatorMode {
    FreeVariable,
    MaskNet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FreeVariable {
    frames: usize,
    num_samples: usize,
    stft: StftConfig,
    /// Interleaved RI of the speech estimate, then of the noise estimate.
    params: Vec<f64>,
}

impl FreeVariable {
    pub fn new(estimates: &EstimatePair) -> Self {
        let params = estimates
            .speech
            .data()
            .iter()
            .chain(estimates.noise.data())
            .flat_map(|c| [c.re, c.im])
            .collect();
        Self {
            frames: estimates.speech.frames(),
            num_samples: estimates.speech.num_samples(),
            stft: *estimates.speech.config(),
            params,
        }
    }

    pub fn from_params(
        frames: usize,
        num_samples: usize,
        stft: StftConfig,
        params: Vec<f64>,
    ) -> Result<Self> {
        if params.len() != 4 * frames * stft.num_bins() {
            return Err(Error::ShapeMismatch("free-variable parameter count".into()));
        }
        Ok(Self {
            frames,
            num_samples,
            stft,
            params,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn num_samples(&self) -> usize {
        self.num_samples
    }

    pub fn stft(&self) -> &StftConfig {
        &self.stft
    }

    fn spectrogram(&self, values: &[f64]) -> ComplexSpectrogram {
        let data = values
            .chunks_exact(2)
            .map(|c| Complex64::new(c[0], c[1]))
            .collect();
        ComplexSpectrogram::from_data(self.frames, self.stft, data, self.num_samples)
            .expect("parameters hold a finite spectrogram of the stored shape")
    }

    fn estimates(&self) -> EstimatePair {
        let half = self.params.len() / 2;
        EstimatePair {
            speech: self.spectrogram(&self.params[..half]),
            noise: self.spectrogram(&self.params[half..]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskNet {
    input_mics: usize,
    /// Index (among the inputs) of the microphone whose signal is masked.
    reference_input: usize,
    bins: usize,
    hidden: usize,
    /// `[w1 (hidden x in), b1 (hidden), w2 (out x hidden), b2 (out)]`.
    params: Vec<f64>,
}

/// Initial real part of both masks.
const INITIAL_MASK: f64 = 0.5;

impl MaskNet {
    pub fn new<R: Rng + ?Sized>(
        input_mics: usize,
        reference_input: usize,
        bins: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if input_mics == 0 || bins == 0 || hidden == 0 {
            return Err(Error::InvalidConfig("mask net dimensions must be positive".into()));
        }
        if reference_input >= input_mics {
            return Err(Error::InvalidConfig("reference input out of range".into()));
        }
        let mut net = Self {
            input_mics,
            reference_input,
            bins,
            hidden,
            params: Vec::new(),
        };
        let (d_in, d_out) = (net.input_dim(), net.output_dim());
        let mut params = Vec::with_capacity(net.num_params());
        let s1 = (1.0 / d_in as f64).sqrt();
        params.extend((0..hidden * d_in).map(|_| s1 * rng.sample::<f64, _>(StandardNormal)));
        params.extend(std::iter::repeat(0.0).take(hidden));
        let s2 = 0.1 * (1.0 / hidden as f64).sqrt();
        params.extend((0..d_out * hidden).map(|_| s2 * rng.sample::<f64, _>(StandardNormal)));
        params.extend((0..d_out).map(|o| if o % 2 == 0 { INITIAL_MASK } else { 0.0 }));
        net.params = params;
        Ok(net)
    }

    pub fn from_params(
        input_mics: usize,
        reference_input: usize,
        bins: usize,
        hidden: usize,
        params: Vec<f64>,
    ) -> Result<Self> {
        let net = Self {
            input_mics,
            reference_input,
            bins,
            hidden,
            params,
        };
        if reference_input >= input_mics || net.params.len() != net.num_params() {
            return Err(Error::ShapeMismatch("mask net parameter layout".into()));
        }
        Ok(net)
    }

    pub fn input_mics(&self) -> usize {
        self.input_mics
    }

    pub fn reference_input(&self) -> usize {
        self.reference_input
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn input_dim(&self) -> usize {
        2 * self.input_mics * self.bins
    }

    pub fn output_dim(&self) -> usize {
        4 * self.bins
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn num_params(&self) -> usize {
        let (d_in, d_out, h) = (self.input_dim(), self.output_dim(), self.hidden);
        h * d_in + h + d_out * h + d_out
    }

    fn split(&self) -> (&[f64], &[f64], &[f64], &[f64]) {
        let (d_in, h) = (self.input_dim(), self.hidden);
        let (w1, rest) = self.params.split_at(h * d_in);
        let (b1, rest) = rest.split_at(h);
        let (w2, b2) = rest.split_at(self.output_dim() * h);
        (w1, b1, w2, b2)
    }

    fn check_inputs(&self, inputs: &[ComplexSpectrogram]) -> Result<f64> {
        if inputs.len() != self.input_mics {
            return Err(Error::ShapeMismatch(format!(
                "expected {} input mics, got {}",
                self.input_mics,
                inputs.len()
            )));
        }
        for x in inputs {
            inputs[0].check_same_shape(x, "input mics")?;
        }
        if inputs[0].bins() != self.bins {
            return Err(Error::ShapeMismatch(format!(
                "net expects {} bins, input has {}",
                self.bins,
                inputs[0].bins()
            )));
        }
        let reference = &inputs[self.reference_input];
        let n = (reference.frames() * reference.bins()) as f64;
        let rms = (reference.energy() / n).sqrt();
        if rms > 0.0 {
            Ok(1.0 / rms)
        } else {
            Err(Error::ZeroEnergy("reference input"))
        }
    }

    fn features(&self, inputs: &[ComplexSpectrogram], t: usize, scale: f64, out: &mut [f64]) {
        let mut i = 0;
        for x in inputs {
            for f in 0..self.bins {
                let v = x.get(t, f);
                out[i] = v.re * scale;
                out[i + 1] = v.im * scale;
                i += 2;
            }
        }
    }

    /// Hidden activations and raw outputs for one frame.
    fn frame_forward(&self, x: &[f64], hidden: &mut [f64], out: &mut [f64]) {
        let (w1, b1, w2, b2) = self.split();
        let d_in = x.len();
        for (j, hj) in hidden.iter_mut().enumerate() {
            let row = &w1[j * d_in..(j + 1) * d_in];
            let a: f64 = row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b1[j];
            *hj = a.tanh();
        }
        let h = hidden.len();
        for (o, ov) in out.iter_mut().enumerate() {
            let row = &w2[o * h..(o + 1) * h];
            *ov = row.iter().zip(hidden.iter()).map(|(w, v)| w * v).sum::<f64>() + b2[o];
        }
    }

    fn forward(&self, inputs: &[ComplexSpectrogram]) -> Result<EstimatePair> {
        let scale = self.check_inputs(inputs)?;
        let reference = &inputs[self.reference_input];
        let mut speech = reference.zeros_like();
        let mut noise = reference.zeros_like();
        let mut x = vec![0.0; self.input_dim()];
        let mut hidden = vec![0.0; self.hidden];
        let mut out = vec![0.0; self.output_dim()];
        let bins = self.bins;
        for t in 0..reference.frames() {
            self.features(inputs, t, scale, &mut x);
            self.frame_forward(&x, &mut hidden, &mut out);
            for f in 0..bins {
                let y = reference.get(t, f);
                speech.set(t, f, Complex64::new(out[2 * f], out[2 * f + 1]) * y);
                noise.set(
                    t,
                    f,
                    Complex64::new(out[2 * bins + 2 * f], out[2 * bins + 2 * f + 1]) * y,
                );
            }
        }
        EstimatePair::new(speech, noise)
    }

    fn backward(
        &self,
        inputs: &[ComplexSpectrogram],
        grad_speech: &ComplexSpectrogram,
        grad_noise: &ComplexSpectrogram,
    ) -> Result<Vec<f64>> {
        let scale = self.check_inputs(inputs)?;
        let reference = &inputs[self.reference_input];
        reference.check_same_shape(grad_speech, "upstream speech gradient")?;
        reference.check_same_shape(grad_noise, "upstream noise gradient")?;
        let (d_in, d_out, h) = (self.input_dim(), self.output_dim(), self.hidden);
        let (_, _, w2, _) = self.split();
        let mut grad = vec![0.0; self.num_params()];
        let (gw1, rest) = grad.split_at_mut(h * d_in);
        let (gb1, rest) = rest.split_at_mut(h);
        let (gw2, gb2) = rest.split_at_mut(d_out * h);

        let bins = self.bins;
        let mut x = vec![0.0; d_in];
        let mut hidden = vec![0.0; h];
        let mut out = vec![0.0; d_out];
        let mut g_out = vec![0.0; d_out];
        let mut g_hidden = vec![0.0; h];
        for t in 0..reference.frames() {
            self.features(inputs, t, scale, &mut x);
            self.frame_forward(&x, &mut hidden, &mut out);
            // S = m Y  =>  dL/dm = conj(Y) dL/dS
            for f in 0..bins {
                let y = reference.get(t, f).conj();
                let gs = y * grad_speech.get(t, f);
                let gv = y * grad_noise.get(t, f);
                g_out[2 * f] = gs.re;
                g_out[2 * f + 1] = gs.im;
                g_out[2 * bins + 2 * f] = gv.re;
                g_out[2 * bins + 2 * f + 1] = gv.im;
            }
            g_hidden.iter_mut().for_each(|g| *g = 0.0);
            for o in 0..d_out {
                let go = g_out[o];
                if go == 0.0 {
                    continue;
                }
                gb2[o] += go;
                let row = &mut gw2[o * h..(o + 1) * h];
                let wrow = &w2[o * h..(o + 1) * h];
                for j in 0..h {
                    row[j] += go * hidden[j];
                    g_hidden[j] += go * wrow[j];
                }
            }
            for j in 0..h {
                let ga = g_hidden[j] * (1.0 - hidden[j] * hidden[j]);
                if ga == 0.0 {
                    continue;
                }
                gb1[j] += ga;
                let row = &mut gw1[j * d_in..(j + 1) * d_in];
                for (g, v) in row.iter_mut().zip(&x) {
                    *g += ga * v;
                }
            }
        }
        Ok(grad)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Estimator {
    FreeVariable(FreeVariable),
    MaskNet(MaskNet),
}

impl Estimator {
    pub fn mode(&self) -> EstimatorMode {
        match self {
            Self::FreeVariable(_) => EstimatorMode::FreeVariable,
            Self::MaskNet(_) => EstimatorMode::MaskNet,
        }
    }

    pub fn params(&self) -> &[f64] {
        match self {
            Self::FreeVariable(m) => &m.params,
            Self::MaskNet(m) => &m.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        match self {
            Self::FreeVariable(m) => &mut m.params,
            Self::MaskNet(m) => &mut m.params,
        }
    }

    /// Number of input microphones expected, `None` for free variables
    /// (which ignore their input).
    pub fn input_mics(&self) -> Option<usize> {
        match self {
            Self::FreeVariable(_) => None,
            Self::MaskNet(m) => Some(m.input_mics),
        }
    }

    pub fn forward(&self, inputs: &[ComplexSpectrogram]) -> Result<EstimatePair> {
        match self {
            Self::FreeVariable(m) => Ok(m.estimates()),
            Self::MaskNet(m) => m.forward(inputs),
        }
    }

    /// Parameter gradient given the loss gradients w.r.t. both estimates.
    pub fn backward(
        &self,
        inputs: &[ComplexSpectrogram],
        grad_speech: &ComplexSpectrogram,
        grad_noise: &ComplexSpectrogram,
    ) -> Result<Vec<f64>> {
        let grad = match self {
            Self::FreeVariable(m) => {
                let expected = m.params.len() / 2;
                if 2 * grad_speech.data().len() != expected || 2 * grad_noise.data().len() != expected {
                    return Err(Error::ShapeMismatch("upstream gradient shape".into()));
                }
                grad_speech
                    .data()
                    .iter()
                    .chain(grad_noise.data())
                    .flat_map(|c| [c.re, c.im])
                    .collect()
            }
            Self::MaskNet(m) => m.backward(inputs, grad_speech, grad_noise)?,
        };
        if let Some(index) = first_non_finite(&grad) {
            return Err(Error::NonFinite {
                what: "parameter gradient",
                index,
            });
        }
        Ok(grad)
    }
}
