//! Acceptance suite. Each criterion prints one PASS/FAIL line; the process
//! exits non-zero if any criterion fails.

mod common;

use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::{dense_wls, random_spectrogram, real_example, rel_err, simulated_example, toy_scenes, toy_taps};
use m2m_core::fcp::{estimate_future_taps, CloseTalkTaps, Regressor, ReverbTaps};
use m2m_core::loss::mc_term;
use m2m_core::pipeline::{cmd_enhance_manifest, cmd_evaluate, cmd_simulate, cmd_train};
use m2m_core::simulate::{SceneTruth, TrueTaps};
use m2m_core::trainer::TrainingData;
use m2m_core::{
    apply_filter, compute_lambda, consistency_project, fcp_solve_joint, generate_scene, istft, mc_loss,
    si_sdr, speaker_reinforce, stft, supervised_loss, Adam, Complex64, ComplexSpectrogram,
    EstimatePair, Estimator, FreeVariable, FutureTaps, GradientMode, Mixtures, SimulateConfig, StftConfig,
    TapConfig, TapWindow, ToySceneConfig, TrainConfig, TrainSettings, Trainer, toy_scene_spec,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into() }
    }
}

fn timed(limit: Option<Duration>, run: impl FnOnce() -> Verdict) -> Verdict {
    let start = Instant::now();
    let mut v = run();
    let elapsed = start.elapsed();
    v.detail = format!("{}; {:.1} s", v.detail, elapsed.as_secs_f64());
    if let Some(limit) = limit {
        if elapsed > limit {
            v.pass = false;
            v.detail = format!("{} (limit {} s)", v.detail, limit.as_secs());
        }
    }
    v
}

// ---------------------------------------------------------------------------

const FCP_TOL: f64 = 1e-6;

fn fcp_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let frames = rng.gen_range(24..=64);
        // 3..=8 bins
        let bins_half = rng.gen_range(2..=7);
        let cfg = StftConfig::new(8000, 2 * bins_half, bins_half).unwrap();
        let y = random_spectrogram(&mut rng, frames, cfg);
        let s = random_spectrogram(&mut rng, frames, cfg);
        let v = random_spectrogram(&mut rng, frames, cfg);
        let speech_len = rng.gen_range(1..=5);
        let noise_len = rng.gen_range(1..=8 - speech_len);
        let ws = TapWindow::new(speech_len, rng.gen_range(0..speech_len), rng.gen_range(-2..=2));
        let wv = TapWindow::new(noise_len, 0, rng.gen_range(0..=1));
        let lambda = compute_lambda(&y, 1e-2).unwrap();
        let weights: Vec<f64> = lambda.values().iter().map(|l| 1.0 / l).collect();
        let banks = fcp_solve_joint(&y, &[Regressor::new(&s, ws), Regressor::new(&v, wv)], &lambda).unwrap();
        for f in 0..y.bins() {
            let oracle = dense_wls(&y, &[(&s, ws), (&v, wv)], &weights, f);
            let got: Vec<Complex64> = banks[0].bin_taps(f).iter().chain(banks[1].bin_taps(f)).copied().collect();
            worst = worst.max(rel_err(&got, &oracle));
        }
    }
    Verdict::new(worst <= FCP_TOL, format!("max relative filter error {worst:.2e} (tol {FCP_TOL:.0e})"))
}

// ---------------------------------------------------------------------------

const FD_STEP: f64 = 1e-6;
const FD_TOL: f64 = 1e-4;

fn fd_rel(fd: f64, analytic: f64) -> f64 {
    (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-8)
}

/// Loss of the pair with every filter frozen at `filters`.
fn frozen_mc(
    s: &ComplexSpectrogram,
    v: &ComplexSpectrogram,
    farfield: &[ComplexSpectrogram],
    closetalk: &ComplexSpectrogram,
    reference: usize,
    taps: &TapConfig,
    filters: &m2m_core::loss::SolvedFilters,
) -> f64 {
    let mut total = 0.0;
    for (p, y) in farfield.iter().enumerate() {
        if p == reference {
            let mut y_hat = s.add(v).unwrap();
            if let Some(g) = &filters.reference {
                y_hat = y_hat.add(&apply_filter(g, s).unwrap()).unwrap();
            }
            total += taps.alpha * mc_term(y, &y_hat).unwrap();
        } else {
            let (h, r) = filters.farfield[p].as_ref().unwrap();
            let y_hat = apply_filter(h, s).unwrap().add(&apply_filter(r, v).unwrap()).unwrap();
            total += taps.beta * mc_term(y, &y_hat).unwrap();
        }
    }
    let (h, r) = filters.closetalk.as_ref().unwrap();
    total + mc_term(closetalk, &apply_filter(h, s).unwrap().add(&apply_filter(r, v).unwrap()).unwrap()).unwrap()
}

fn gradient_suite() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cfg = StftConfig::new(8000, 8, 4).unwrap();
    let frames = 24;
    let mut worst = [0.0f64; 3];
    for _ in 0..10 {
        let farfield: Vec<_> = (0..3).map(|_| random_spectrogram(&mut rng, frames, cfg)).collect();
        let closetalk = random_spectrogram(&mut rng, frames, cfg);
        let reference = rng.gen_range(0..3);
        let s = random_spectrogram(&mut rng, frames, cfg);
        let v = random_spectrogram(&mut rng, frames, cfg);
        let mut taps = toy_taps();
        taps.reference = Some(ReverbTaps { k: 3, delta: 1 });
        taps.search_max = 2;
        taps.search_len = 2;
        let mix = Mixtures {
            farfield: &farfield,
            reference,
            closetalk: Some(&closetalk),
        };
        let probes: Vec<(bool, usize, bool)> = (0..20)
            .map(|_| (rng.gen_bool(0.5), rng.gen_range(0..s.data().len()), rng.gen_bool(0.5)))
            .collect();
        let perturb = |speech: bool, i: usize, imag: bool, d: f64| {
            let (mut a, mut b) = (s.clone(), v.clone());
            let x = &mut (if speech { &mut a } else { &mut b }).data_mut()[i];
            if imag {
                x.im += d;
            } else {
                x.re += d;
            }
            (a, b)
        };
        let pick = |lb: &m2m_core::LossBreakdown, speech: bool, i: usize, imag: bool| {
            let g = if speech { lb.grad_speech.data()[i] } else { lb.grad_noise.data()[i] };
            if imag { g.im } else { g.re }
        };

        for (slot, mode) in [GradientMode::ThroughSolve, GradientMode::Detached].into_iter().enumerate() {
            let lb = mc_loss(&EstimatePair::new(s.clone(), v.clone()).unwrap(), mix, &taps, mode).unwrap();
            let (zs, zn) = lb.mc.as_ref().unwrap().closetalk_future.unwrap();
            let mut fixed = taps;
            fixed.closetalk = Some(CloseTalkTaps {
                future: FutureTaps::Fixed { speech: zs, noise: zn },
                ..taps.closetalk.unwrap()
            });
            let filters = lb.filters.clone().unwrap();
            let eval = |a: ComplexSpectrogram, b: ComplexSpectrogram| match mode {
                GradientMode::ThroughSolve => mc_loss(&EstimatePair::new(a, b).unwrap(), mix, &fixed, mode).unwrap().total,
                GradientMode::Detached => frozen_mc(&a, &b, &farfield, &closetalk, reference, &taps, &filters),
            };
            for &(speech, i, imag) in &probes {
                let (a, b) = perturb(speech, i, imag, FD_STEP);
                let up = eval(a, b);
                let (a, b) = perturb(speech, i, imag, -FD_STEP);
                let down = eval(a, b);
                let fd = (up - down) / (2.0 * FD_STEP);
                worst[slot] = worst[slot].max(fd_rel(fd, pick(&lb, speech, i, imag)));
            }
        }

        let truth_s = random_spectrogram(&mut rng, frames, cfg);
        let truth_v = farfield[reference].sub(&truth_s).unwrap();
        let sup = |a: ComplexSpectrogram, b: ComplexSpectrogram| {
            supervised_loss(&EstimatePair::new(a, b).unwrap(), &truth_s, &truth_v, &farfield[reference]).unwrap()
        };
        let lb = sup(s.clone(), v.clone());
        for &(speech, i, imag) in &probes {
            let (a, b) = perturb(speech, i, imag, FD_STEP);
            let up = sup(a, b).total;
            let (a, b) = perturb(speech, i, imag, -FD_STEP);
            let down = sup(a, b).total;
            let fd = (up - down) / (2.0 * FD_STEP);
            worst[2] = worst[2].max(fd_rel(fd, pick(&lb, speech, i, imag)));
        }
    }
    let pass = worst.iter().all(|&w| w <= FD_TOL);
    Verdict::new(
        pass,
        format!(
            "max relative FD error: mixture/through-solve {:.1e}, mixture/detached {:.1e}, supervised {:.1e} (tol {FD_TOL:.0e})",
            worst[0], worst[1], worst[2]
        ),
    )
}

// ---------------------------------------------------------------------------

const EXACT_TOL: f64 = 1e-6;
const MISFIT_FLOOR: f64 = 1e-3;

fn reverberant_scenes() -> Vec<SceneTruth> {
    let toy = ToySceneConfig {
        true_taps: TrueTaps {
            reverb_span: 4,
            reverb_delay: 1,
            ..ToySceneConfig::default().true_taps
        },
        ..ToySceneConfig::default()
    };
    (0..20).map(|s| generate_scene(&toy_scene_spec(&toy, 600 + s)).unwrap()).collect()
}

fn oracle_loss(truth: &SceneTruth, reverb: ReverbTaps) -> f64 {
    let mut taps = toy_taps();
    taps.reference = Some(reverb);
    taps.closetalk = Some(CloseTalkTaps {
        future: FutureTaps::Fixed {
            speech: truth.spec.closetalk_advance_frames,
            noise: 0,
        },
        ..taps.closetalk.unwrap()
    });
    let pair = EstimatePair::new(truth.speech.clone(), truth.noise.clone()).unwrap();
    let mix = Mixtures {
        farfield: &truth.farfield,
        reference: truth.spec.ref_mic,
        closetalk: Some(&truth.closetalk),
    };
    mc_loss(&pair, mix, &taps, GradientMode::ThroughSolve).unwrap().total
}

fn exact_model() -> Verdict {
    let scenes = reverberant_scenes();
    // three true reverberation taps
    let matched = ReverbTaps { k: 4, delta: 1 };
    let short = ReverbTaps { k: 3, delta: 1 };
    let worst_fit = scenes.iter().map(|t| oracle_loss(t, matched)).fold(0.0, f64::max);
    let least_misfit = scenes.iter().map(|t| oracle_loss(t, short)).fold(f64::INFINITY, f64::min);
    Verdict::new(
        worst_fit <= EXACT_TOL && least_misfit > MISFIT_FLOOR,
        format!(
            "max loss with matched taps {worst_fit:.2e} (tol {EXACT_TOL:.0e}); min loss with short taps {least_misfit:.2e} (floor {MISFIT_FLOOR:.0e})"
        ),
    )
}

// ---------------------------------------------------------------------------

const RECOVERY_MIN: usize = 95;

fn future_tap_recovery() -> Verdict {
    let taps = TapConfig {
        search_max: 8,
        search_len: 3,
        ..TapConfig::default()
    };
    let toy = ToySceneConfig::default();
    let mut counts = Vec::new();
    for z in 0..=8usize {
        let hits = (0..100u64)
            .filter(|&seed| {
                let mut spec = toy_scene_spec(&toy, 1000 * z as u64 + seed);
                spec.closetalk_advance_frames = z;
                let t = generate_scene(&spec).unwrap();
                estimate_future_taps(&t.closetalk, &t.speech, &t.noise, &taps).unwrap() == z
            })
            .count();
        counts.push(hits);
    }
    let pass = counts.iter().all(|&c| c >= RECOVERY_MIN);
    Verdict::new(pass, format!("hits per advance 0..=8: {counts:?} (need >= {RECOVERY_MIN}/100)"))
}

// ---------------------------------------------------------------------------

const DESCENT_STEPS: usize = 500;
const DESCENT_FACTOR: f64 = 100.0;
/// Peak step size, relative to the RMS of the reference mixture.
const DESCENT_LR: f64 = 0.3;

fn free_variable_descent() -> Verdict {
    let truth = &toy_scenes([7])[0];
    let y = truth.reference_mixture();
    let rms = (y.energy() / y.data().len() as f64).sqrt();
    let mix = Mixtures {
        farfield: &truth.farfield,
        reference: truth.spec.ref_mic,
        closetalk: Some(&truth.closetalk),
    };
    let taps = toy_taps();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut noise_like = || {
        let mut s = y.zeros_like();
        for v in s.data_mut() {
            *v = Complex64::new(rng.sample(StandardNormal), rng.sample(StandardNormal)) * (rms * FRAC_1_SQRT_2);
        }
        s
    };
    let init = EstimatePair::new(noise_like(), noise_like()).unwrap();
    let mut est = Estimator::FreeVariable(FreeVariable::new(&init));
    let mut adam = Adam::new(est.params().len());
    let loss = |est: &Estimator| mc_loss(&est.forward(&[]).unwrap(), mix, &taps, GradientMode::ThroughSolve).unwrap();
    let first = loss(&est).total;
    for step in 0..DESCENT_STEPS {
        let lb = loss(&est);
        let grad = est.backward(&[], &lb.grad_speech, &lb.grad_noise).unwrap();
        // cosine annealing
        let lr = DESCENT_LR * rms * 0.5 * (1.0 + (PI * step as f64 / DESCENT_STEPS as f64).cos());
        adam.step(est.params_mut(), &grad, lr);
    }
    let last = loss(&est).total;
    let factor = first / last;
    Verdict::new(
        factor >= DESCENT_FACTOR,
        format!("loss {first:.3e} -> {last:.3e}, reduction {factor:.1}x (need >= {DESCENT_FACTOR}x)"),
    )
}

// ---------------------------------------------------------------------------

const ORDERED_MIN: usize = 7;
const COLEARN_SEEDS: [u64; 3] = [0, 1, 2];
const COLEARN_BUDGET: Duration = Duration::from_secs(600);

struct ColearnRun {
    ordered: usize,
    gain_db: f64,
    elapsed: Duration,
}

fn colearn_run(closetalk: bool, seed: u64, held_out: &[SceneTruth]) -> ColearnRun {
    let reals = toy_scenes(100..108);
    let sims = toy_scenes(200..208);
    let data = TrainingData {
        real: reals.iter().map(|t| real_example(t, closetalk)).collect(),
        simulated: sims.iter().map(simulated_example).collect(),
        validation_real: toy_scenes(400..404).iter().map(|t| real_example(t, closetalk)).collect(),
        validation_simulated: toy_scenes(500..504).iter().map(simulated_example).collect(),
    };
    let cfg = TrainConfig {
        taps: toy_taps(),
        hidden: 32,
        lr0: 3e-3,
        max_steps: Some(4000),
        steps_per_epoch: 200,
        seed,
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let mut trainer = Trainer::new(cfg, &data).unwrap();
    trainer.run(|_, _| Ok(())).unwrap();
    let elapsed = start.elapsed();

    let est = trainer.estimator();
    let (mut ordered, mut gain) = (0, 0.0);
    for t in held_out {
        let s_hat = istft(&est.forward(&t.farfield).unwrap().speech).unwrap();
        let vs_speech = si_sdr(&t.speech_signal, &s_hat).unwrap();
        let vs_noise = si_sdr(&t.noise_signal, &s_hat).unwrap();
        let baseline = si_sdr(&t.speech_signal, &istft(t.reference_mixture()).unwrap()).unwrap();
        ordered += usize::from(vs_speech > vs_noise);
        gain += (vs_speech - baseline) / held_out.len() as f64;
    }
    ColearnRun { ordered, gain_db: gain, elapsed }
}

fn colearning(closetalk: bool, min_gain_db: f64, check_order: bool) -> Verdict {
    let held_out = toy_scenes(300..308);
    let mut passing = 0;
    let mut parts = Vec::new();
    for seed in COLEARN_SEEDS {
        let run = colearn_run(closetalk, seed, &held_out);
        let ok = (!check_order || run.ordered >= ORDERED_MIN) && run.gain_db >= min_gain_db && run.elapsed <= COLEARN_BUDGET;
        passing += usize::from(ok);
        parts.push(format!(
            "seed {seed}: ordered {}/8, gain {:+.2} dB, {:.0} s",
            run.ordered,
            run.gain_db,
            run.elapsed.as_secs_f64()
        ));
    }
    Verdict::new(
        passing >= 2,
        format!("{}; {passing}/3 seeds pass (need >= 2, gain >= {min_gain_db} dB)", parts.join(", ")),
    )
}

// ---------------------------------------------------------------------------

const STFT_TOL: f64 = 1e-6;

fn stft_suite() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (mut cola, mut idem, mut lin): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for cfg in [StftConfig::narrowband(), StftConfig::wideband()] {
        let n = cfg.sample_rate_hz as usize;
        let x: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let z: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let back = istft(&stft(&x, &cfg).unwrap()).unwrap();
        let edge = cfg.win_len;
        let interior = &x[edge..n - edge];
        let err: f64 = interior.iter().zip(&back[edge..n - edge]).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        cola = cola.max((err / interior.len() as f64).sqrt());

        let frames = cfg.num_frames(n);
        let spec = random_spectrogram(&mut rng, frames, cfg);
        let once = consistency_project(&spec).unwrap();
        idem = idem.max(consistency_project(&once).unwrap().max_abs_diff(&once));

        let (a, b) = (0.7, -1.3);
        let mixed: Vec<f64> = x.iter().zip(&z).map(|(p, q)| a * p + b * q).collect();
        let lhs = stft(&mixed, &cfg).unwrap();
        let rhs = stft(&x, &cfg).unwrap().scaled(a).add(&stft(&z, &cfg).unwrap().scaled(b)).unwrap();
        lin = lin.max(lhs.max_abs_diff(&rhs));
    }
    Verdict::new(
        cola <= STFT_TOL && idem <= STFT_TOL && lin <= STFT_TOL,
        format!("reconstruction RMS {cola:.1e}, idempotence {idem:.1e}, linearity {lin:.1e} (tol {STFT_TOL:.0e})"),
    )
}

// ---------------------------------------------------------------------------

const METRIC_TOL_DB: f64 = 1e-9;

fn metrics_suite() -> Verdict {
    let truth = &toy_scenes([9])[0];
    let reference = &truth.speech_signal;
    let mixture = istft(truth.reference_mixture()).unwrap();
    let base = si_sdr(reference, &mixture).unwrap();
    let mut scale_err: f64 = 0.0;
    for c in [1e-3, 0.5, -2.0, 37.0] {
        let scaled: Vec<f64> = mixture.iter().map(|v| v * c).collect();
        scale_err = scale_err.max((si_sdr(reference, &scaled).unwrap() - base).abs());
    }
    let enhanced: Vec<f64> = reference.iter().zip(&mixture).map(|(s, y)| 0.9 * s + 0.05 * y).collect();
    let mut gamma_err: f64 = 0.0;
    for gamma in [10.0, 15.0, 20.0] {
        let out = speaker_reinforce(&enhanced, &mixture, gamma).unwrap();
        let added: f64 = out.iter().zip(&enhanced).map(|(o, s)| (o - s).powi(2)).sum();
        let kept: f64 = enhanced.iter().map(|s| s * s).sum();
        gamma_err = gamma_err.max((10.0 * (kept / added).log10() - gamma).abs());
    }
    Verdict::new(
        scale_err <= METRIC_TOL_DB && gamma_err <= METRIC_TOL_DB,
        format!("scale invariance {scale_err:.1e} dB, reinforcement ratio {gamma_err:.1e} dB (tol {METRIC_TOL_DB:.0e})"),
    )
}

// ---------------------------------------------------------------------------

fn pipeline_run(root: &Path) -> (Vec<u8>, Vec<u8>) {
    let sim = SimulateConfig {
        seed: 11,
        num_real: 4,
        num_simulated: 4,
        num_validation_real: 1,
        num_validation_simulated: 1,
        num_test: 3,
        ..SimulateConfig::default()
    };
    let data = root.join("data");
    let summary = cmd_simulate(&sim, &data).unwrap();
    let settings = TrainSettings {
        train: TrainConfig {
            taps: toy_taps(),
            hidden: 16,
            lr0: 3e-3,
            max_steps: Some(200),
            steps_per_epoch: 50,
            ..TrainConfig::default()
        },
        ..TrainSettings::default()
    };
    let run = root.join("run");
    let trained = cmd_train(&summary.manifest, &settings, &run, Some(5)).unwrap();
    let ckpt = m2m_core::io::read_checkpoint(&trained.final_checkpoint).unwrap();
    let enhanced = root.join("enhanced");
    cmd_enhance_manifest(&ckpt, &summary.test_manifest, &enhanced, None).unwrap();
    let report = root.join("report");
    cmd_evaluate(&summary.test_manifest, &enhanced, &report).unwrap();
    (fs::read(trained.train_log).unwrap(), fs::read(report.join("report.tsv")).unwrap())
}

fn determinism() -> Verdict {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (log_a, report_a) = pipeline_run(a.path());
    let (log_b, report_b) = pipeline_run(b.path());
    let rows = String::from_utf8_lossy(&report_a).lines().count();
    Verdict::new(
        log_a == log_b && report_a == report_b && rows > 1,
        format!(
            "train log identical: {}, metric report identical: {} ({} bytes, {rows} lines)",
            log_a == log_b,
            report_a == report_b,
            report_a.len()
        ),
    )
}

// ---------------------------------------------------------------------------

fn main() -> ExitCode {
    let secs = |s| Some(Duration::from_secs(s));
    let criteria: Vec<(&str, Box<dyn FnOnce() -> Verdict>)> = vec![
        ("fcp matches dense least squares", Box::new(move || timed(secs(10), fcp_oracle))),
        ("loss gradients match finite differences", Box::new(move || timed(secs(60), gradient_suite))),
        ("exact model gives zero loss at the oracle", Box::new(move || timed(secs(30), exact_model))),
        ("close-talk future taps are recovered", Box::new(move || timed(secs(60), future_tap_recovery))),
        ("free-variable descent", Box::new(move || timed(secs(60), free_variable_descent))),
        ("co-learning with close-talk", Box::new(|| timed(None, || colearning(true, 3.0, true)))),
        ("far-field only co-learning", Box::new(|| timed(None, || colearning(false, 4.0, false)))),
        ("stft reconstruction, projection, linearity", Box::new(move || timed(secs(5), stft_suite))),
        ("si-sdr and reinforcement", Box::new(|| timed(None, metrics_suite))),
        ("pipeline is deterministic", Box::new(|| timed(None, determinism))),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.into_iter().enumerate() {
        let v = run();
        failed += usize::from(!v.pass);
        println!("criterion {:>2} {}: {name}: {}", i + 1, if v.pass { "PASS" } else { "FAIL" }, v.detail);
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    }
}
