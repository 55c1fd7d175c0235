//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use m2m_core::fcp::CloseTalkTaps;
use m2m_core::simulate::{generate_scene, toy_scene_spec, SceneTruth, ToySceneConfig};
use m2m_core::{
    Complex64, ComplexSpectrogram, FutureTaps, RealExample, SimulatedExample, StftConfig,
    TapConfig, TapWindow,
};
use rand::Rng;

/// Taps matched to the default toy scenes.
pub fn toy_taps() -> TapConfig {
    TapConfig {
        farfield_speech_past: 2,
        farfield_speech_future: 1,
        farfield_noise_past: 2,
        farfield_noise_future: 1,
        closetalk: Some(CloseTalkTaps {
            speech_past: 3,
            noise_past: 2,
            future: FutureTaps::Estimate,
        }),
        ..TapConfig::default()
    }
}

pub fn toy_scenes(seeds: impl IntoIterator<Item = u64>) -> Vec<SceneTruth> {
    let cfg = ToySceneConfig::default();
    seeds
        .into_iter()
        .map(|s| generate_scene(&toy_scene_spec(&cfg, s)).unwrap())
        .collect()
}

pub fn real_example(t: &SceneTruth, closetalk: bool) -> RealExample {
    RealExample {
        id: format!("real-{}", t.spec.filter_seed),
        farfield: t.farfield.clone(),
        ref_mic: t.spec.ref_mic,
        closetalk: closetalk.then(|| t.closetalk.clone()),
    }
}

pub fn simulated_example(t: &SceneTruth) -> SimulatedExample {
    SimulatedExample {
        id: format!("simu-{}", t.spec.filter_seed),
        farfield: t.farfield.clone(),
        ref_mic: t.spec.ref_mic,
        speech: t.speech.clone(),
        noise: t.noise_images.clone(),
    }
}

pub fn random_spectrogram<R: Rng>(rng: &mut R, frames: usize, cfg: StftConfig) -> ComplexSpectrogram {
    let mut s = ComplexSpectrogram::zeros(frames, cfg);
    for v in s.data_mut() {
        *v = Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
    }
    s
}

/// Stacked regressor value, zero off the edges.
fn tap(source: &ComplexSpectrogram, t: usize, f: usize, offset: isize) -> Complex64 {
    let s = t as isize + offset;
    if s < 0 || s >= source.frames() as isize {
        Complex64::new(0.0, 0.0)
    } else {
        source.get(s as usize, f)
    }
}

/// Weighted least squares at one bin, solved by modified Gram-Schmidt QR on
/// the row-scaled design matrix. Returns `h` with `ŷ = Σ conj(h_k) x_k`.
pub fn dense_wls(
    target: &ComplexSpectrogram,
    regressors: &[(&ComplexSpectrogram, TapWindow)],
    weights: &[f64],
    f: usize,
) -> Vec<Complex64> {
    let frames = target.frames();
    let offsets: Vec<(usize, isize)> = regressors
        .iter()
        .enumerate()
        .flat_map(|(i, (_, w))| w.offsets().map(move |o| (i, o)))
        .collect();
    let n = offsets.len();
    // columns of sqrt(w) X, and sqrt(w) y
    let mut cols: Vec<Vec<Complex64>> = offsets
        .iter()
        .map(|&(i, o)| {
            (0..frames)
                .map(|t| tap(regressors[i].0, t, f, o) * weights[t * target.bins() + f].sqrt())
                .collect()
        })
        .collect();
    let mut y: Vec<Complex64> = (0..frames)
        .map(|t| target.get(t, f) * weights[t * target.bins() + f].sqrt())
        .collect();
    let dot = |a: &[Complex64], b: &[Complex64]| a.iter().zip(b).map(|(x, y)| x.conj() * y).sum::<Complex64>();
    let mut r = vec![vec![Complex64::new(0.0, 0.0); n]; n];
    for j in 0..n {
        for i in 0..j {
            let rij = dot(&cols[i], &cols[j]);
            r[i][j] = rij;
            let qi = cols[i].clone();
            for (c, q) in cols[j].iter_mut().zip(&qi) {
                *c -= q * rij;
            }
        }
        let norm = dot(&cols[j], &cols[j]).re.sqrt();
        r[j][j] = Complex64::new(norm, 0.0);
        for c in cols[j].iter_mut() {
            *c /= norm;
        }
    }
    // Q^H y, then back substitution for g in X g = y
    let mut qty = vec![Complex64::new(0.0, 0.0); n];
    for j in 0..n {
        qty[j] = dot(&cols[j], &y);
        for (yy, q) in y.iter_mut().zip(&cols[j]) {
            *yy -= q * qty[j];
        }
    }
    let mut g = vec![Complex64::new(0.0, 0.0); n];
    for i in (0..n).rev() {
        let mut acc = qty[i];
        for k in i + 1..n {
            acc -= r[i][k] * g[k];
        }
        g[i] = acc / r[i][i];
    }
    g.into_iter().map(|v| v.conj()).collect()
}

/// Relative error `‖a - b‖ / ‖b‖`.
pub fn rel_err(a: &[Complex64], b: &[Complex64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).norm_sqr()).sum();
    let den: f64 = b.iter().map(|y| y.norm_sqr()).sum();
    (num / den.max(1e-300)).sqrt()
}

pub fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
