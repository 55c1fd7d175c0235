//! Mixture-constraint and supervised losses with exact gradients with respect
//! to the two source estimates.
//!
//! Gradients of a real loss `L` with respect to a complex value `z = a + ib`
//! are reported as `dL/da + i dL/db`, so that a first-order change is
//! `dL = Re(conj(grad) dz)`.

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{first_non_finite, Error, Result};
use crate::fcp::{
    compute_lambda, estimate_future_taps, joint_len, FilterBank, solve_bin, stack_into, FutureTaps,
    LambdaWeight, Regressor, TapConfig, TapWindow,
};
use crate::spectral::ComplexSpectrogram;

/// `|Re y - Re ŷ| + |Im y - Im ŷ| + ||y| - |ŷ||`.
#[inline]
pub fn distance_g(y: Complex64, y_hat: Complex64) -> f64 {
    (y.re - y_hat.re).abs() + (y.im - y_hat.im).abs() + (y.norm() - y_hat.norm()).abs()
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Gradient of [`distance_g`] with respect to `ŷ`. Every `|.|` has
/// subgradient 0 at 0.
#[inline]
pub fn distance_g_grad(y: Complex64, y_hat: Complex64) -> Complex64 {
    let mag_hat = y_hat.norm();
    let dm = sign(y.norm() - mag_hat);
    let (mre, mim) = if mag_hat > 0.0 {
        (y_hat.re / mag_hat, y_hat.im / mag_hat)
    } else {
        (0.0, 0.0)
    };
    Complex64::new(
        -sign(y.re - y_hat.re) - dm * mre,
        -sign(y.im - y_hat.im) - dm * mim,
    )
}

fn normalizer(y: &ComplexSpectrogram, what: &'static str) -> Result<f64> {
    let n = y.l1_magnitude();
    if n > 0.0 && n.is_finite() {
        Ok(n)
    } else {
        Err(Error::ZeroEnergy(what))
    }
}

/// `sum G(Y, Ŷ) / sum |Y|` over all T-F units.
pub fn mc_term(y: &ComplexSpectrogram, y_hat: &ComplexSpectrogram) -> Result<f64> {
    y.check_same_shape(y_hat, "mc_term")?;
    let norm = normalizer(y, "mixture")?;
    let total: f64 = y
        .data()
        .iter()
        .zip(y_hat.data())
        .map(|(&a, &b)| distance_g(a, b))
        .sum();
    Ok(total / norm)
}

/// Speech and noise estimates at the reference microphone.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatePair {
    pub speech: ComplexSpectrogram,
    pub noise: ComplexSpectrogram,
}

impl EstimatePair {
    pub fn new(speech: ComplexSpectrogram, noise: ComplexSpectrogram) -> Result<Self> {
        speech.check_same_shape(&noise, "estimate pair")?;
        speech.check_finite("speech estimate")?;
        noise.check_finite("noise estimate")?;
        Ok(Self { speech, noise })
    }

    pub fn swapped(&self) -> Self {
        Self {
            speech: self.noise.clone(),
            noise: self.speech.clone(),
        }
    }
}

/// Observed mixtures used by the mixture-constraint loss.
#[derive(Debug, Clone, Copy)]
pub struct Mixtures<'a> {
    pub farfield: &'a [ComplexSpectrogram],
    pub reference: usize,
    pub closetalk: Option<&'a ComplexSpectrogram>,
}

/// How gradients flow through the closed-form filter solves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum GradientMode {
    /// Differentiate through the normal equations.
    #[default]
    ThroughSolve,
    /// Treat the estimated filters as constants.
    Detached,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McTerms {
    pub reference: f64,
    /// One entry per non-reference far-field microphone, in microphone order.
    pub nonreference: Vec<f64>,
    pub closetalk: Option<f64>,
    /// Future taps used for the close-talk filters (searched or fixed).
    pub closetalk_future: Option<(usize, usize)>,
}

impl McTerms {
    pub fn nonreference_sum(&self) -> f64 {
        self.nonreference.iter().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SupervisedTerms {
    pub target: f64,
    pub non_target: f64,
}

/// Filters estimated inside [`mc_loss`], for inspection or for evaluating
/// the loss with the filters held fixed.
#[derive(Debug, Clone, PartialEq)]
pub struct SolvedFilters {
    /// Reverberation filter of the reference microphone, if configured.
    pub reference: Option<FilterBank>,
    /// `(speech, noise)` filters per far-field microphone; `None` at the
    /// reference microphone.
    pub farfield: Vec<Option<(FilterBank, FilterBank)>>,
    pub closetalk: Option<(FilterBank, FilterBank)>,
}

#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub mc: Option<McTerms>,
    pub filters: Option<SolvedFilters>,
    pub supervised: Option<SupervisedTerms>,
    pub total: f64,
    pub grad_speech: ComplexSpectrogram,
    pub grad_noise: ComplexSpectrogram,
}

impl LossBreakdown {
    fn check_gradients(&self) -> Result<()> {
        for (what, g) in [
            ("speech gradient", &self.grad_speech),
            ("noise gradient", &self.grad_noise),
        ] {
            if let Some(i) = first_non_finite(g.data().iter().flat_map(|c| [&c.re, &c.im])) {
                return Err(Error::NonFinite {
                    what,
                    index: i / 2,
                });
            }
        }
        if !self.total.is_finite() {
            return Err(Error::NonFinite {
                what: "loss",
                index: 0,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Source {
    Speech,
    Noise,
}

/// One microphone's term: `Ŷ = d + h^H x`, where `d` is `Ŝ + V̂` for the
/// reference microphone (else zero) and `h` solves the weighted projection of
/// `Y - d` onto the stacked regressors.
struct MicTerm<'a> {
    mixture: &'a ComplexSpectrogram,
    direct: bool,
    regs: Vec<(Source, TapWindow)>,
}

struct MicResult {
    value: f64,
    grad_speech: Vec<Complex64>,
    grad_noise: Vec<Complex64>,
    /// One bank per regressor, in regressor order.
    banks: Vec<FilterBank>,
}

fn eval_mic(
    term: &MicTerm,
    est: &EstimatePair,
    lambda: Option<&LambdaWeight>,
    mode: GradientMode,
) -> Result<MicResult> {
    let y = term.mixture;
    y.check_same_shape(&est.speech, "mixture vs estimates")?;
    let norm = normalizer(y, "mixture")?;
    let frames = y.frames();
    let bins = y.bins();
    let regs: Vec<Regressor> = term
        .regs
        .iter()
        .map(|&(src, window)| {
            let source = match src {
                Source::Speech => &est.speech,
                Source::Noise => &est.noise,
            };
            Regressor::new(source, window)
        })
        .collect();
    let n = joint_len(&regs);
    if n > 0 && n >= frames {
        return Err(Error::TooShort {
            frames,
            required: n,
        });
    }
    // source id of every stacked element, and its frame offset
    let layout: Vec<(Source, isize)> = term
        .regs
        .iter()
        .flat_map(|&(src, w)| w.offsets().map(move |o| (src, o)).collect::<Vec<_>>())
        .collect();

    let per_bin: Vec<(f64, Vec<Complex64>, Vec<Complex64>, Vec<Complex64>)> = (0..bins)
        .into_par_iter()
        .map(|f| -> Result<_> {
            let mut gs = vec![Complex64::new(0.0, 0.0); frames];
            let mut gv = vec![Complex64::new(0.0, 0.0); frames];
            let direct: Vec<Complex64> = (0..frames)
                .map(|t| {
                    if term.direct {
                        est.speech.get(t, f) + est.noise.get(t, f)
                    } else {
                        Complex64::new(0.0, 0.0)
                    }
                })
                .collect();
            let target: Vec<Complex64> = (0..frames).map(|t| y.get(t, f) - direct[t]).collect();

            if n == 0 {
                let mut value = 0.0;
                for t in 0..frames {
                    let yv = y.get(t, f);
                    value += distance_g(yv, direct[t]);
                    let g = distance_g_grad(yv, direct[t]) / norm;
                    gs[t] += g;
                    gv[t] += g;
                }
                return Ok((value, gs, gv, Vec::new()));
            }

            let lambda = lambda.expect("lambda required when filters are solved");
            let sol = solve_bin(&target, &regs, f, lambda)?;
            let h = &sol.filter;
            let mut xs = vec![Complex64::new(0.0, 0.0); n * frames];
            let mut z = vec![Complex64::new(0.0, 0.0); frames];
            for t in 0..frames {
                let x = &mut xs[t * n..(t + 1) * n];
                stack_into(&regs, t, f, x);
                z[t] = h.iter().zip(x.iter()).map(|(hk, xk)| hk.conj() * xk).sum();
            }
            let mut value = 0.0;
            let mut g_hat = vec![Complex64::new(0.0, 0.0); frames];
            for t in 0..frames {
                let yv = y.get(t, f);
                let pred = direct[t] + z[t];
                value += distance_g(yv, pred);
                g_hat[t] = distance_g_grad(yv, pred) / norm;
            }

            // gradients w.r.t. the stacked regressors and the direct term
            let mut g_x = vec![Complex64::new(0.0, 0.0); n * frames];
            let mut g_d = g_hat.clone();
            for t in 0..frames {
                for k in 0..n {
                    g_x[t * n + k] = h[k] * g_hat[t];
                }
            }
            if mode == GradientMode::ThroughSolve {
                let mut g_h = vec![Complex64::new(0.0, 0.0); n];
                for t in 0..frames {
                    let gc = g_hat[t].conj();
                    for k in 0..n {
                        g_h[k] += gc * xs[t * n + k];
                    }
                }
                let u = sol.chol.solve(&g_h);
                for t in 0..frames {
                    let x = &xs[t * n..(t + 1) * n];
                    let inv_lambda = 1.0 / lambda.get(t, f);
                    let e = target[t] - z[t];
                    let b: Complex64 = u.iter().zip(x).map(|(uk, xk)| uk.conj() * xk).sum();
                    for k in 0..n {
                        g_x[t * n + k] += (e * u[k] - b * h[k]) * inv_lambda;
                    }
                    g_d[t] -= b * inv_lambda;
                }
            }

            for t in 0..frames {
                for (k, &(src, off)) in layout.iter().enumerate() {
                    let s = t as isize + off;
                    if s < 0 || s >= frames as isize {
                        continue;
                    }
                    let g = g_x[t * n + k];
                    match src {
                        Source::Speech => gs[s as usize] += g,
                        Source::Noise => gv[s as usize] += g,
                    }
                }
                if term.direct {
                    gs[t] += g_d[t];
                    gv[t] += g_d[t];
                }
            }
            Ok((value, gs, gv, sol.filter))
        })
        .collect::<Result<_>>()?;

    let mut value = 0.0;
    let mut grad_speech = vec![Complex64::new(0.0, 0.0); frames * bins];
    let mut grad_noise = vec![Complex64::new(0.0, 0.0); frames * bins];
    let mut bank_taps: Vec<Vec<Complex64>> = term.regs.iter().map(|(_, w)| Vec::with_capacity(bins * w.len())).collect();
    for (f, (v, gs, gv, filter)) in per_bin.into_iter().enumerate() {
        value += v;
        for t in 0..frames {
            grad_speech[t * bins + f] = gs[t];
            grad_noise[t * bins + f] = gv[t];
        }
        let mut rest = filter.as_slice();
        for (taps, (_, w)) in bank_taps.iter_mut().zip(&term.regs) {
            let (head, tail) = rest.split_at(w.len());
            taps.extend_from_slice(head);
            rest = tail;
        }
    }
    let banks = bank_taps
        .into_iter()
        .zip(&term.regs)
        .map(|(taps, &(_, w))| FilterBank::new(w, bins, taps))
        .collect::<Result<_>>()?;
    Ok(MicResult {
        value: value / norm,
        grad_speech,
        grad_noise,
        banks,
    })
}

/// Mixture-constraint loss
/// `α L_q + β Σ_{p≠q} L_p + L_0` over the far-field and close-talk mixtures.
///
/// Every filter is re-estimated inside the call from the current estimates.
/// With searched close-talk future taps, the search runs first on the
/// estimates as given; the chosen tap count is treated as a constant.
pub fn mc_loss(
    estimates: &EstimatePair,
    mixtures: Mixtures,
    cfg: &TapConfig,
    mode: GradientMode,
) -> Result<LossBreakdown> {
    cfg.validate()?;
    if mixtures.farfield.is_empty() {
        return Err(Error::InvalidConfig("no far-field mixtures".into()));
    }
    if mixtures.reference >= mixtures.farfield.len() {
        return Err(Error::InvalidConfig(format!(
            "reference microphone {} out of {}",
            mixtures.reference,
            mixtures.farfield.len()
        )));
    }
    estimates.speech.check_same_shape(&estimates.noise, "estimate pair")?;
    for y in mixtures.farfield {
        y.check_same_shape(&estimates.speech, "far-field mixture vs estimates")?;
    }
    let closetalk = match (cfg.closetalk, mixtures.closetalk) {
        (Some(ct), Some(y0)) => {
            y0.check_same_shape(&estimates.speech, "close-talk mixture vs estimates")?;
            Some((ct, y0))
        }
        (Some(_), None) => return Err(Error::MissingCloseTalk),
        (None, _) => None,
    };

    let (speech_ff, noise_ff) = cfg.farfield_windows();
    let frames = estimates.speech.frames();
    let bins = estimates.speech.bins();
    let mut grad_speech = vec![Complex64::new(0.0, 0.0); frames * bins];
    let mut grad_noise = vec![Complex64::new(0.0, 0.0); frames * bins];
    let mut accumulate = |r: &MicResult, weight: f64| {
        for (acc, g) in grad_speech.iter_mut().zip(&r.grad_speech) {
            *acc += g * weight;
        }
        for (acc, g) in grad_noise.iter_mut().zip(&r.grad_noise) {
            *acc += g * weight;
        }
    };

    let mut reference = 0.0;
    let mut nonreference = Vec::with_capacity(mixtures.farfield.len() - 1);
    let mut filters = SolvedFilters {
        reference: None,
        farfield: Vec::with_capacity(mixtures.farfield.len()),
        closetalk: None,
    };
    for (p, y) in mixtures.farfield.iter().enumerate() {
        let (term, weight) = if p == mixtures.reference {
            let regs = cfg
                .reference
                .map(|r| vec![(Source::Speech, r.window())])
                .unwrap_or_default();
            (
                MicTerm {
                    mixture: y,
                    direct: true,
                    regs,
                },
                cfg.alpha,
            )
        } else {
            (
                MicTerm {
                    mixture: y,
                    direct: false,
                    regs: vec![(Source::Speech, speech_ff), (Source::Noise, noise_ff)],
                },
                cfg.beta,
            )
        };
        let lambda = if term.regs.is_empty() {
            None
        } else {
            Some(compute_lambda(y, cfg.xi)?)
        };
        let r = eval_mic(&term, estimates, lambda.as_ref(), mode)?;
        accumulate(&r, weight);
        let mut banks = r.banks.into_iter();
        if p == mixtures.reference {
            reference = r.value;
            filters.reference = banks.next();
            filters.farfield.push(None);
        } else {
            nonreference.push(r.value);
            filters.farfield.push(banks.next().zip(banks.next()));
        }
    }

    let mut closetalk_value = None;
    let mut closetalk_future = None;
    if let Some((ct, y0)) = closetalk {
        let future = match ct.future {
            FutureTaps::Fixed { speech, noise } => (speech, noise),
            FutureTaps::Estimate => {
                let z = estimate_future_taps(y0, &estimates.speech, &estimates.noise, cfg)?;
                (z, z)
            }
        };
        let (ws, wn) = cfg.closetalk_windows(future).expect("close-talk configured");
        let term = MicTerm {
            mixture: y0,
            direct: false,
            regs: vec![(Source::Speech, ws), (Source::Noise, wn)],
        };
        let lambda = compute_lambda(y0, cfg.xi)?;
        let r = eval_mic(&term, estimates, Some(&lambda), mode)?;
        accumulate(&r, 1.0);
        let mut banks = r.banks.into_iter();
        filters.closetalk = banks.next().zip(banks.next());
        closetalk_value = Some(r.value);
        closetalk_future = Some(future);
    }

    let mc = McTerms {
        reference,
        nonreference,
        closetalk: closetalk_value,
        closetalk_future,
    };
    let total = cfg.alpha * mc.reference + cfg.beta * mc.nonreference_sum() + mc.closetalk.unwrap_or(0.0);
    let out = LossBreakdown {
        mc: Some(mc),
        filters: Some(filters),
        supervised: None,
        total,
        grad_speech: estimates.speech.with_data(grad_speech),
        grad_noise: estimates.noise.with_data(grad_noise),
    };
    out.check_gradients()?;
    Ok(out)
}

/// Supervised loss on simulated data: distances of each estimate to its
/// ground truth, both normalized by `sum |Y_q|`.
pub fn supervised_loss(
    estimates: &EstimatePair,
    speech: &ComplexSpectrogram,
    noise: &ComplexSpectrogram,
    reference_mixture: &ComplexSpectrogram,
) -> Result<LossBreakdown> {
    estimates.speech.check_same_shape(speech, "speech estimate vs truth")?;
    estimates.noise.check_same_shape(noise, "noise estimate vs truth")?;
    estimates
        .speech
        .check_same_shape(reference_mixture, "estimates vs mixture")?;
    let norm = normalizer(reference_mixture, "reference mixture")?;
    let term = |truth: &ComplexSpectrogram, est: &ComplexSpectrogram| {
        let mut value = 0.0;
        let grad: Vec<Complex64> = truth
            .data()
            .iter()
            .zip(est.data())
            .map(|(&y, &y_hat)| {
                value += distance_g(y, y_hat);
                distance_g_grad(y, y_hat) / norm
            })
            .collect();
        (value / norm, est.with_data(grad))
    };
    let (target, grad_speech) = term(speech, &estimates.speech);
    let (non_target, grad_noise) = term(noise, &estimates.noise);
    let out = LossBreakdown {
        mc: None,
        filters: None,
        supervised: Some(SupervisedTerms { target, non_target }),
        total: target + non_target,
        grad_speech,
        grad_noise,
    };
    out.check_gradients()?;
    Ok(out)
}
