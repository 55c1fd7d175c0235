//! Forward convolutive prediction: per-frequency weighted least-squares
//! estimation of multi-frame filters that project a source estimate onto an
//! observed mixture.

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Cholesky;
use crate::spectral::ComplexSpectrogram;

/// Frame window of a multi-frame filter.
///
/// The stacked regressor at frame `t` is
/// `[x(t - past + 1 - delay), ..., x(t + future - delay)]`, so a window has
/// `past + future` taps. A positive `delay` skips the most recent frames (the
/// prediction delay of a reverberation filter); a negative one shifts the
/// window into the future.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TapWindow {
    pub past: usize,
    pub future: usize,
    pub delay: isize,
}

impl TapWindow {
    pub const fn new(past: usize, future: usize, delay: isize) -> Self {
        Self {
            past,
            future,
            delay,
        }
    }

    /// The single current-frame tap.
    pub const fn identity() -> Self {
        Self::new(1, 0, 0)
    }

    pub fn len(&self) -> usize {
        self.past + self.future
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Frame offset of tap `k`.
    #[inline]
    pub fn offset(&self, k: usize) -> isize {
        k as isize - (self.past as isize - 1) - self.delay
    }

    pub fn offsets(&self) -> impl Iterator<Item = isize> + '_ {
        (0..self.len()).map(|k| self.offset(k))
    }
}

/// Reference-microphone reverberation filter taps `K` and prediction delay `Δ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReverbTaps {
    pub k: usize,
    pub delta: usize,
}

impl ReverbTaps {
    pub fn window(&self) -> TapWindow {
        TapWindow::new(self.k - self.delta, 0, self.delta as isize)
    }
}

/// Close-talk future taps, fixed or searched per utterance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FutureTaps {
    Fixed { speech: usize, noise: usize },
    Estimate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CloseTalkTaps {
    pub speech_past: usize,
    pub noise_past: usize,
    pub future: FutureTaps,
}

/// Filter-tap hyper-parameters of the mixture-constraint loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TapConfig {
    /// `None` reconstructs the reference mixture as `S + V` with no
    /// reverberation filter.
    pub reference: Option<ReverbTaps>,
    pub farfield_speech_past: usize,
    pub farfield_speech_future: usize,
    pub farfield_noise_past: usize,
    pub farfield_noise_future: usize,
    /// `None` drops the close-talk term entirely.
    pub closetalk: Option<CloseTalkTaps>,
    /// Weight flooring factor.
    pub xi: f64,
    /// Largest future tap tried by the close-talk search.
    pub search_max: usize,
    /// Length of the short filters used by the close-talk search.
    pub search_len: usize,
    /// Reference-microphone weight.
    pub alpha: f64,
    /// Weight of each non-reference far-field microphone.
    pub beta: f64,
}

impl Default for TapConfig {
    /// `K` unused, 20 past / 1 future taps for far-field filters, 20 past
    /// taps and searched future taps for close-talk filters, `ξ = 1e-2`,
    /// `R = 8`, `O = 3`, `α = 1`, `β = 1/5`.
    fn default() -> Self {
        Self {
            reference: None,
            farfield_speech_past: 20,
            farfield_speech_future: 1,
            farfield_noise_past: 20,
            farfield_noise_future: 1,
            closetalk: Some(CloseTalkTaps {
                speech_past: 20,
                noise_past: 20,
                future: FutureTaps::Estimate,
            }),
            xi: 1e-2,
            search_max: 8,
            search_len: 3,
            alpha: 1.0,
            beta: 0.2,
        }
    }
}

impl TapConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if let Some(r) = self.reference {
            if r.delta < 1 {
                return bad("prediction delay must be at least 1");
            }
            if r.k <= r.delta {
                return bad("K must exceed the prediction delay");
            }
        }
        if !(self.xi > 0.0) {
            return bad("xi must be positive");
        }
        if self.search_len < 1 {
            return bad("search filter length must be at least 1");
        }
        if self.farfield_speech_past + self.farfield_speech_future == 0
            || self.farfield_noise_past + self.farfield_noise_future == 0
        {
            return bad("far-field filters need at least one tap");
        }
        if let Some(ct) = self.closetalk {
            let (fs, fnz) = match ct.future {
                FutureTaps::Fixed { speech, noise } => (speech, noise),
                FutureTaps::Estimate => (0, 0),
            };
            if ct.speech_past + fs == 0 || ct.noise_past + fnz == 0 {
                return bad("close-talk filters need at least one tap");
            }
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return bad("microphone weights must be non-negative");
        }
        Ok(())
    }

    pub fn farfield_windows(&self) -> (TapWindow, TapWindow) {
        (
            TapWindow::new(self.farfield_speech_past, self.farfield_speech_future, 0),
            TapWindow::new(self.farfield_noise_past, self.farfield_noise_future, 0),
        )
    }

    /// Close-talk windows for a given future-tap count (speech, noise).
    pub fn closetalk_windows(&self, future: (usize, usize)) -> Option<(TapWindow, TapWindow)> {
        self.closetalk.map(|ct| {
            (
                TapWindow::new(ct.speech_past, future.0, 0),
                TapWindow::new(ct.noise_past, future.1, 0),
            )
        })
    }
}

/// Per-frequency filters with a shared tap window.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterBank {
    window: TapWindow,
    bins: usize,
    /// `bins x window.len()`, frequency-major.
    taps: Vec<Complex64>,
}

impl FilterBank {
    pub fn new(window: TapWindow, bins: usize, taps: Vec<Complex64>) -> Result<Self> {
        if taps.len() != bins * window.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} taps for {bins} bins x {} window",
                taps.len(),
                window.len()
            )));
        }
        if taps.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
            return Err(Error::NonFinite {
                what: "filter bank",
                index: taps
                    .iter()
                    .position(|c| !c.re.is_finite() || !c.im.is_finite())
                    .unwrap_or(0),
            });
        }
        Ok(Self {
            window,
            bins,
            taps,
        })
    }

    /// Unit current-frame tap at every frequency.
    pub fn identity(bins: usize) -> Self {
        Self {
            window: TapWindow::identity(),
            bins,
            taps: vec![Complex64::new(1.0, 0.0); bins],
        }
    }

    pub fn window(&self) -> TapWindow {
        self.window
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn taps(&self) -> &[Complex64] {
        &self.taps
    }

    pub fn bin_taps(&self, f: usize) -> &[Complex64] {
        let n = self.window.len();
        &self.taps[f * n..(f + 1) * n]
    }
}

/// Per-(t,f) FCP weights of one microphone.
#[derive(Debug, Clone, PartialEq)]
pub struct LambdaWeight {
    frames: usize,
    bins: usize,
    values: Vec<f64>,
}

impl LambdaWeight {
    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    #[inline]
    pub fn get(&self, t: usize, f: usize) -> f64 {
        self.values[t * self.bins + f]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Uniform unit weights (plain least squares).
    pub fn uniform(frames: usize, bins: usize) -> Self {
        Self {
            frames,
            bins,
            values: vec![1.0; frames * bins],
        }
    }
}

/// `λ(t,f) = ξ max|Y|² + |Y(t,f)|²`, with the max over the whole spectrogram.
pub fn compute_lambda(mixture: &ComplexSpectrogram, xi: f64) -> Result<LambdaWeight> {
    if !(xi > 0.0) || !xi.is_finite() {
        return Err(Error::InvalidConfig("xi must be positive".into()));
    }
    mixture.check_finite("mixture")?;
    let floor = xi * mixture.max_power();
    if floor <= 0.0 {
        return Err(Error::ZeroEnergy("mixture"));
    }
    Ok(LambdaWeight {
        frames: mixture.frames(),
        bins: mixture.bins(),
        values: mixture.data().iter().map(|c| floor + c.norm_sqr()).collect(),
    })
}

/// A source spectrogram together with the tap window it is stacked with.
#[derive(Clone, Copy)]
pub struct Regressor<'a> {
    pub source: &'a ComplexSpectrogram,
    pub window: TapWindow,
}

impl<'a> Regressor<'a> {
    pub fn new(source: &'a ComplexSpectrogram, window: TapWindow) -> Self {
        Self { source, window }
    }
}

pub(crate) fn joint_len(regs: &[Regressor]) -> usize {
    regs.iter().map(|r| r.window.len()).sum()
}

/// Fills `out` with the stacked regressor at `(t, f)`; frames off either edge
/// are zero.
#[inline]
pub(crate) fn stack_into(regs: &[Regressor], t: usize, f: usize, out: &mut [Complex64]) {
    let mut i = 0;
    for r in regs {
        let frames = r.source.frames() as isize;
        for off in r.window.offsets() {
            let s = t as isize + off;
            out[i] = if (0..frames).contains(&s) {
                r.source.get(s as usize, f)
            } else {
                Complex64::new(0.0, 0.0)
            };
            i += 1;
        }
    }
}

/// Solution of the normal equations at one frequency.
#[derive(Debug, Clone)]
pub(crate) struct BinSolution {
    /// Joint filter, regressors concatenated in order.
    pub filter: Vec<Complex64>,
    pub chol: Cholesky,
}

/// Minimizes `sum_t |target(t) - h^H x(t)|² / λ(t)` at bin `f`.
pub(crate) fn solve_bin(
    target: &[Complex64],
    regs: &[Regressor],
    f: usize,
    lambda: &LambdaWeight,
) -> Result<BinSolution> {
    let n = joint_len(regs);
    let frames = target.len();
    let mut r = vec![Complex64::new(0.0, 0.0); n * n];
    let mut rhs = vec![Complex64::new(0.0, 0.0); n];
    let mut x = vec![Complex64::new(0.0, 0.0); n];
    for t in 0..frames {
        stack_into(regs, t, f, &mut x);
        let w = 1.0 / lambda.get(t, f);
        let y = target[t].conj() * w;
        for i in 0..n {
            let xi = x[i];
            if xi.re == 0.0 && xi.im == 0.0 {
                continue;
            }
            rhs[i] += xi * y;
            let xiw = xi * w;
            let row = &mut r[i * n..(i + 1) * n];
            for (rij, xj) in row.iter_mut().zip(&x) {
                *rij += xiw * xj.conj();
            }
        }
    }
    let chol = Cholesky::factor(&r, n).ok_or(Error::Singular { bin: f })?;
    let filter = chol.solve(&rhs);
    Ok(BinSolution { filter, chol })
}

fn check_solve_inputs(
    target: &ComplexSpectrogram,
    regs: &[Regressor],
    lambda: &LambdaWeight,
) -> Result<()> {
    if regs.is_empty() {
        return Err(Error::InvalidConfig("no regressors".into()));
    }
    for r in regs {
        target.check_same_shape(r.source, "fcp regressor")?;
    }
    if lambda.frames != target.frames() || lambda.bins != target.bins() {
        return Err(Error::ShapeMismatch("lambda shape".into()));
    }
    if lambda.values.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::InvalidConfig("lambda must be strictly positive".into()));
    }
    let n = joint_len(regs);
    if n == 0 {
        return Err(Error::InvalidConfig("empty tap window".into()));
    }
    if n >= target.frames() {
        return Err(Error::TooShort {
            frames: target.frames(),
            required: n,
        });
    }
    Ok(())
}

/// Jointly estimates one filter per regressor so that the sum of filtered
/// regressors best predicts `target` in the λ-weighted least-squares sense.
pub fn fcp_solve_joint(
    target: &ComplexSpectrogram,
    regs: &[Regressor],
    lambda: &LambdaWeight,
) -> Result<Vec<FilterBank>> {
    check_solve_inputs(target, regs, lambda)?;
    let bins = target.bins();
    let solutions: Vec<Vec<Complex64>> = (0..bins)
        .into_par_iter()
        .map(|f| solve_bin(&target.bin_series(f), regs, f, lambda).map(|s| s.filter))
        .collect::<Result<_>>()?;
    let mut banks = Vec::with_capacity(regs.len());
    let mut start = 0;
    for r in regs {
        let len = r.window.len();
        let mut taps = Vec::with_capacity(bins * len);
        for sol in &solutions {
            taps.extend_from_slice(&sol[start..start + len]);
        }
        banks.push(FilterBank::new(r.window, bins, taps)?);
        start += len;
    }
    Ok(banks)
}

/// Single-regressor FCP solve.
pub fn fcp_solve(
    target: &ComplexSpectrogram,
    regressor: &ComplexSpectrogram,
    window: TapWindow,
    lambda: &LambdaWeight,
) -> Result<FilterBank> {
    let mut banks = fcp_solve_joint(target, &[Regressor::new(regressor, window)], lambda)?;
    Ok(banks.remove(0))
}

/// `out(t,f) = h(f)^H [source(t + offset_k, f)]_k`, zero outside the frames.
pub fn apply_filter(bank: &FilterBank, source: &ComplexSpectrogram) -> Result<ComplexSpectrogram> {
    if bank.bins != source.bins() {
        return Err(Error::ShapeMismatch(format!(
            "filter has {} bins, source {}",
            bank.bins,
            source.bins()
        )));
    }
    let frames = source.frames() as isize;
    let mut out = source.zeros_like();
    for f in 0..bank.bins {
        let h = bank.bin_taps(f);
        for t in 0..source.frames() {
            let mut acc = Complex64::new(0.0, 0.0);
            for (k, hk) in h.iter().enumerate() {
                let s = t as isize + bank.window.offset(k);
                if (0..frames).contains(&s) {
                    acc += hk.conj() * source.get(s as usize, f);
                }
            }
            out.set(t, f, acc);
        }
    }
    Ok(out)
}

/// Per-utterance search for the close-talk future tap count.
///
/// For each `Z` in `0..=R`, short speech and noise filters of length `O`
/// ending at future tap `Z` are solved jointly against the close-talk mixture,
/// and the `Z` with the smallest normalized mixture-constraint distance wins.
/// Ties within 1e-12 go to the smaller `Z`.
pub fn estimate_future_taps(
    closetalk: &ComplexSpectrogram,
    speech: &ComplexSpectrogram,
    noise: &ComplexSpectrogram,
    cfg: &TapConfig,
) -> Result<usize> {
    Ok(future_tap_objectives(closetalk, speech, noise, cfg)?.0)
}

/// Like [`estimate_future_taps`], also returning the objective for every `Z`.
pub fn future_tap_objectives(
    closetalk: &ComplexSpectrogram,
    speech: &ComplexSpectrogram,
    noise: &ComplexSpectrogram,
    cfg: &TapConfig,
) -> Result<(usize, Vec<f64>)> {
    if cfg.search_len < 1 {
        return Err(Error::InvalidConfig("search filter length must be at least 1".into()));
    }
    closetalk.check_same_shape(speech, "close-talk vs speech estimate")?;
    closetalk.check_same_shape(noise, "close-talk vs noise estimate")?;
    if 2 * cfg.search_len + cfg.search_max >= closetalk.frames() {
        return Err(Error::TooShort {
            frames: closetalk.frames(),
            required: 2 * cfg.search_len + cfg.search_max,
        });
    }
    let lambda = compute_lambda(closetalk, cfg.xi)?;
    let mut objectives = Vec::with_capacity(cfg.search_max + 1);
    for z in 0..=cfg.search_max {
        let window = TapWindow::new(cfg.search_len, 0, -(z as isize));
        let regs = [Regressor::new(speech, window), Regressor::new(noise, window)];
        let banks = fcp_solve_joint(closetalk, &regs, &lambda)?;
        let estimate = apply_filter(&banks[0], speech)?.add(&apply_filter(&banks[1], noise)?)?;
        objectives.push(crate::loss::mc_term(closetalk, &estimate)?);
    }
    let mut best = 0;
    for (z, &obj) in objectives.iter().enumerate().skip(1) {
        if obj < objectives[best] - 1e-12 {
            best = z;
        }
    }
    Ok((best, objectives))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::StftConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spec(frames: usize, cfg: StftConfig, rng: &mut ChaCha8Rng) -> ComplexSpectrogram {
        let mut s = ComplexSpectrogram::zeros(frames, cfg);
        for v in s.data_mut() {
            *v = Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        }
        s
    }

    fn small_cfg() -> StftConfig {
        // 4 bins
        StftConfig::new(8000, 6, 3).unwrap()
    }

    #[test]
    fn window_offsets() {
        let g = ReverbTaps { k: 5, delta: 2 }.window();
        assert_eq!(g.offsets().collect::<Vec<_>>(), vec![-4, -3, -2]);
        let h = TapWindow::new(3, 1, 0);
        assert_eq!(h.offsets().collect::<Vec<_>>(), vec![-2, -1, 0, 1]);
        let search = TapWindow::new(3, 0, -4);
        assert_eq!(search.offsets().collect::<Vec<_>>(), vec![2, 3, 4]);
    }

    #[test]
    fn lambda_hand_values() {
        let cfg = small_cfg();
        let mut y = ComplexSpectrogram::zeros(5, cfg);
        y.set(2, 1, Complex64::new(0.0, 2.0));
        let lam = compute_lambda(&y, 1e-2).unwrap();
        assert!((lam.get(2, 1) - 4.04).abs() < 1e-12);
        assert!((lam.get(0, 0) - 0.04).abs() < 1e-12);
        let lam3 = compute_lambda(&y.scaled(3.0), 1e-2).unwrap();
        for (a, b) in lam.values().iter().zip(lam3.values()) {
            assert!((b - 9.0 * a).abs() < 1e-12);
        }
    }

    #[test]
    fn lambda_rejects_zero_mixture() {
        let y = ComplexSpectrogram::zeros(5, small_cfg());
        assert!(matches!(compute_lambda(&y, 1e-2), Err(Error::ZeroEnergy(_))));
    }

    #[test]
    fn identity_regression() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_spec(32, small_cfg(), &mut rng);
        let lam = compute_lambda(&x, 1e-2).unwrap();
        let bank = fcp_solve(&x, &x, TapWindow::identity(), &lam).unwrap();
        for h in bank.taps() {
            assert!((h - Complex64::new(1.0, 0.0)).norm() < 1e-8);
        }
    }

    #[test]
    fn apply_identity_and_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_spec(10, small_cfg(), &mut rng);
        let id = FilterBank::identity(x.bins());
        assert_eq!(apply_filter(&id, &x).unwrap(), x);
        let shift = FilterBank::new(
            TapWindow::new(1, 0, 1),
            x.bins(),
            vec![Complex64::new(1.0, 0.0); x.bins()],
        )
        .unwrap();
        let y = apply_filter(&shift, &x).unwrap();
        for f in 0..x.bins() {
            assert_eq!(y.get(0, f), Complex64::new(0.0, 0.0));
            for t in 1..10 {
                assert_eq!(y.get(t, f), x.get(t - 1, f));
            }
        }
    }

    #[test]
    fn known_filter_is_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = small_cfg();
        let x = random_spec(40, cfg, &mut rng);
        let window = TapWindow::new(3, 1, 0);
        let taps: Vec<Complex64> = (0..x.bins() * window.len())
            .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        let truth = FilterBank::new(window, x.bins(), taps).unwrap();
        let y = apply_filter(&truth, &x).unwrap();
        let lam = compute_lambda(&y, 1e-2).unwrap();
        let est = fcp_solve(&y, &x, window, &lam).unwrap();
        for (a, b) in est.taps().iter().zip(truth.taps()) {
            assert!((a - b).norm() < 1e-8);
        }
    }

    #[test]
    fn too_short_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_spec(4, small_cfg(), &mut rng);
        let lam = compute_lambda(&x, 1e-2).unwrap();
        assert!(matches!(
            fcp_solve(&x, &x, TapWindow::new(4, 0, 0), &lam),
            Err(Error::TooShort { .. })
        ));
    }

    #[test]
    fn scale_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = small_cfg();
        let x = random_spec(30, cfg, &mut rng);
        let y = random_spec(30, cfg, &mut rng);
        let lam = compute_lambda(&y, 1e-2).unwrap();
        let window = TapWindow::new(2, 1, 0);
        let h = fcp_solve(&y, &x, window, &lam).unwrap();
        let c = Complex64::new(0.3, -1.7);
        let xc = x.with_data(x.data().iter().map(|v| v * c).collect());
        let hc = fcp_solve(&y, &xc, window, &lam).unwrap();
        for (a, b) in hc.taps().iter().zip(h.taps()) {
            assert!((a - b / c.conj()).norm() < 1e-8);
        }
    }

    #[test]
    fn config_validation() {
        assert!(TapConfig::default().validate().is_ok());
        let mut c = TapConfig::default();
        c.reference = Some(ReverbTaps { k: 3, delta: 0 });
        assert!(c.validate().is_err());
        let mut c = TapConfig::default();
        c.xi = 0.0;
        assert!(c.validate().is_err());
        let mut c = TapConfig::default();
        c.search_len = 0;
        assert!(c.validate().is_err());
    }
}
