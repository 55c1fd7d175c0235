//! Co-learning loop: mixture-constraint steps on real-style scenes and
//! supervised steps on simulated scenes, optimized with Adam under a
//! validation-driven learning-rate schedule.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{Estimator, EstimatorMode, FreeVariable, MaskNet};
use crate::fcp::TapConfig;
use crate::loss::{
    mc_loss, supervised_loss, EstimatePair, GradientMode, LossBreakdown, McTerms, Mixtures,
    SupervisedTerms,
};
use crate::simulate::{db_to_amplitude, sample_u};
use crate::spectral::{consistency_project, consistency_project_vjp, ComplexSpectrogram};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Origin {
    Real,
    Simulated,
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Real => "real",
            Self::Simulated => "simu",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Scheduling {
    /// Real and simulated steps take turns, starting with real.
    #[default]
    StrictAlternate,
    /// Each step picks its pool with probability proportional to pool size.
    ProportionalSample,
}

/// Real-style recording: mixtures only.
#[derive(Debug, Clone, PartialEq)]
pub struct RealExample {
    pub id: String,
    pub farfield: Vec<ComplexSpectrogram>,
    pub ref_mic: usize,
    pub closetalk: Option<ComplexSpectrogram>,
}

/// Simulated recording with ground truth at the reference microphone.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedExample {
    pub id: String,
    pub farfield: Vec<ComplexSpectrogram>,
    pub ref_mic: usize,
    /// Target speech at the reference microphone.
    pub speech: ComplexSpectrogram,
    /// Noise image of every far-field microphone, or only of the reference
    /// microphone. Per-microphone images let SNR augmentation rescale every
    /// input channel consistently.
    pub noise: Vec<ComplexSpectrogram>,
}

impl SimulatedExample {
    pub fn reference_noise(&self) -> &ComplexSpectrogram {
        if self.noise.len() == 1 {
            &self.noise[0]
        } else {
            &self.noise[self.ref_mic]
        }
    }

    fn frames(&self) -> usize {
        self.speech.frames()
    }
}

impl RealExample {
    fn frames(&self) -> usize {
        self.farfield[0].frames()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingData {
    pub real: Vec<RealExample>,
    pub simulated: Vec<SimulatedExample>,
    pub validation_real: Vec<RealExample>,
    pub validation_simulated: Vec<SimulatedExample>,
}

/// Layout shared by every example of a data set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DataLayout {
    pub num_far_mics: usize,
    pub ref_mic: usize,
    pub bins: usize,
}

impl TrainingData {
    /// Checks that every example has the same microphone layout and
    /// internally consistent shapes.
    pub fn layout(&self) -> Result<DataLayout> {
        let mut layout: Option<DataLayout> = None;
        let mut check = |id: &str, farfield: &[ComplexSpectrogram], ref_mic: usize| -> Result<()> {
            let bad = |reason: String| Err(Error::ShapeMismatch(format!("{id}: {reason}")));
            let Some(first) = farfield.first() else {
                return bad("no far-field channels".into());
            };
            for y in farfield {
                first.check_same_shape(y, id)?;
            }
            let this = DataLayout {
                num_far_mics: farfield.len(),
                ref_mic,
                bins: first.bins(),
            };
            if ref_mic >= farfield.len() {
                return bad("reference mic out of range".into());
            }
            match layout {
                Some(l) if l != this => bad(format!("layout {this:?} differs from {l:?}")),
                _ => {
                    layout = Some(this);
                    Ok(())
                }
            }
        };
        for ex in self.real.iter().chain(&self.validation_real) {
            check(&ex.id, &ex.farfield, ex.ref_mic)?;
            if let Some(c) = &ex.closetalk {
                ex.farfield[0].check_same_shape(c, &ex.id)?;
            }
        }
        for ex in self.simulated.iter().chain(&self.validation_simulated) {
            check(&ex.id, &ex.farfield, ex.ref_mic)?;
            ex.farfield[0].check_same_shape(&ex.speech, &ex.id)?;
            if ex.noise.len() != 1 && ex.noise.len() != ex.farfield.len() {
                return Err(Error::ShapeMismatch(format!(
                    "{}: noise truth must have 1 or {} channels",
                    ex.id,
                    ex.farfield.len()
                )));
            }
            for v in &ex.noise {
                ex.farfield[0].check_same_shape(v, &ex.id)?;
            }
        }
        layout.ok_or(Error::EmptyPool("training data"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr0: f64,
    pub lr_halving_patience_epochs: usize,
    pub batch_size: usize,
    pub segment_seconds: f64,
    pub scheduling: Scheduling,
    pub max_epochs: usize,
    /// Steps per epoch; 0 means one pass over both training pools.
    pub steps_per_epoch: usize,
    /// Hard cap on the total number of steps.
    pub max_steps: Option<u64>,
    pub seed: u64,
    /// SNR augmentation of simulated examples.
    pub snr_augment: bool,
    pub gradient_mode: GradientMode,
    /// Project estimates onto consistent spectrograms before the loss.
    pub consistency: bool,
    pub taps: TapConfig,
    /// Include the close-talk term when a real example has a close-talk
    /// mixture.
    pub use_closetalk: bool,
    pub estimator: EstimatorMode,
    pub hidden: usize,
    /// Far-field microphones fed to the estimator, in a fixed order; empty
    /// means all of them. Must include the reference microphone.
    pub input_mics: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-3,
            lr_halving_patience_epochs: 2,
            batch_size: 1,
            segment_seconds: 8.0,
            scheduling: Scheduling::StrictAlternate,
            max_epochs: 100,
            steps_per_epoch: 0,
            max_steps: None,
            seed: 0,
            snr_augment: true,
            gradient_mode: GradientMode::ThroughSolve,
            consistency: false,
            taps: TapConfig::default(),
            use_closetalk: true,
            estimator: EstimatorMode::MaskNet,
            hidden: 32,
            input_mics: Vec::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad("lr0 must be positive");
        }
        if self.lr_halving_patience_epochs < 1 {
            return bad("patience must be at least 1");
        }
        if self.batch_size < 1 {
            return bad("batch size must be at least 1");
        }
        if !(self.segment_seconds > 0.0) {
            return bad("segment length must be positive");
        }
        if self.hidden < 1 {
            return bad("hidden width must be at least 1");
        }
        self.taps.validate()
    }

    /// Resolved input microphone list for a layout.
    pub fn resolved_inputs(&self, layout: &DataLayout) -> Result<Vec<usize>> {
        let inputs: Vec<usize> = if self.input_mics.is_empty() {
            (0..layout.num_far_mics).collect()
        } else {
            self.input_mics.clone()
        };
        if inputs.iter().any(|&m| m >= layout.num_far_mics) {
            return Err(Error::InvalidConfig("input mic out of range".into()));
        }
        if !inputs.contains(&layout.ref_mic) {
            return Err(Error::InvalidConfig(
                "input mics must include the reference mic".into(),
            ));
        }
        Ok(inputs)
    }
}

/// One cropped example within a batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneSlice {
    pub scene: usize,
    pub offset: usize,
    pub frames: usize,
    /// SNR augmentation offset in dB (simulated examples only).
    pub snr_offset_db: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchDescriptor {
    pub origin: Origin,
    pub items: Vec<SceneSlice>,
}

/// Draws batches from the two pools.
#[derive(Debug, Clone)]
pub struct BatchScheduler {
    scheduling: Scheduling,
    real_frames: Vec<usize>,
    simulated_frames: Vec<usize>,
    segment_frames: usize,
    batch_size: usize,
    augment: bool,
    drawn: u64,
}

impl BatchScheduler {
    /// Pools are given as the frame count of each example.
    pub fn new(
        scheduling: Scheduling,
        real_frames: Vec<usize>,
        simulated_frames: Vec<usize>,
        segment_frames: usize,
        batch_size: usize,
        augment: bool,
    ) -> Self {
        Self {
            scheduling,
            real_frames,
            simulated_frames,
            segment_frames: segment_frames.max(1),
            batch_size: batch_size.max(1),
            augment,
            drawn: 0,
        }
    }

    pub fn next_batch<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<BatchDescriptor> {
        let (nr, ns) = (self.real_frames.len(), self.simulated_frames.len());
        let origin = match (nr, ns) {
            (0, 0) => return Err(Error::EmptyPool("both training pools are empty")),
            (_, 0) => Origin::Real,
            (0, _) => Origin::Simulated,
            _ => match self.scheduling {
                Scheduling::StrictAlternate if self.drawn % 2 == 0 => Origin::Real,
                Scheduling::StrictAlternate => Origin::Simulated,
                Scheduling::ProportionalSample => {
                    if rng.gen_bool(nr as f64 / (nr + ns) as f64) {
                        Origin::Real
                    } else {
                        Origin::Simulated
                    }
                }
            },
        };
        self.drawn += 1;
        let pool = match origin {
            Origin::Real => &self.real_frames,
            Origin::Simulated => &self.simulated_frames,
        };
        let items = (0..self.batch_size)
            .map(|_| {
                let scene = rng.gen_range(0..pool.len());
                let total = pool[scene];
                let frames = total.min(self.segment_frames);
                let offset = rng.gen_range(0..=total - frames);
                let snr_offset_db =
                    (origin == Origin::Simulated && self.augment).then(|| sample_u(rng));
                SceneSlice {
                    scene,
                    offset,
                    frames,
                    snr_offset_db,
                }
            })
            .collect();
        Ok(BatchDescriptor { origin, items })
    }
}

/// Adam with `β1 = 0.9`, `β2 = 0.999`, `ε = 1e-8`.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(num_params: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        assert_eq!(params.len(), self.m.len(), "optimizer sized for another model");
        assert_eq!(grad.len(), self.m.len(), "gradient length");
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Learning rate after replaying a validation-loss history: halve whenever
/// the best loss (or the last drop, whichever is later) is `patience`
/// epochs old.
pub fn adjust_lr(history: &[f64], lr0: f64, patience: usize) -> f64 {
    let patience = patience.max(1);
    let mut lr = lr0;
    let mut best = f64::INFINITY;
    let mut anchor = 0;
    for (epoch, &loss) in history.iter().enumerate() {
        if loss < best {
            best = loss;
            anchor = epoch;
        }
        if epoch - anchor >= patience {
            lr *= 0.5;
            anchor = epoch;
        }
    }
    lr
}

fn crop_all(specs: &[ComplexSpectrogram], slice: &SceneSlice) -> Result<Vec<ComplexSpectrogram>> {
    specs
        .iter()
        .map(|s| s.crop_frames(slice.offset, slice.frames))
        .collect()
}

/// Everything needed to evaluate one example.
struct Prepared {
    id: String,
    inputs: Vec<ComplexSpectrogram>,
    target: Target,
}

enum Target {
    Mixture {
        farfield: Vec<ComplexSpectrogram>,
        ref_mic: usize,
        closetalk: Option<ComplexSpectrogram>,
    },
    Truth {
        speech: ComplexSpectrogram,
        noise: ComplexSpectrogram,
        reference: ComplexSpectrogram,
    },
}

fn prepare_real(ex: &RealExample, slice: &SceneSlice, inputs: &[usize], cfg: &TrainConfig) -> Result<Prepared> {
    let farfield = crop_all(&ex.farfield, slice)?;
    let closetalk = match (&ex.closetalk, cfg.use_closetalk) {
        (Some(c), true) => Some(c.crop_frames(slice.offset, slice.frames)?),
        _ => None,
    };
    Ok(Prepared {
        id: ex.id.clone(),
        inputs: inputs.iter().map(|&m| farfield[m].clone()).collect(),
        target: Target::Mixture {
            farfield,
            ref_mic: ex.ref_mic,
            closetalk,
        },
    })
}

fn prepare_simulated(ex: &SimulatedExample, slice: &SceneSlice, inputs: &[usize]) -> Result<Prepared> {
    let mut farfield = crop_all(&ex.farfield, slice)?;
    let mut speech = ex.speech.crop_frames(slice.offset, slice.frames)?;
    let noise = ex.reference_noise().crop_frames(slice.offset, slice.frames)?;
    if let Some(u) = slice.snr_offset_db.filter(|&u| u != 0.0) {
        let gain = db_to_amplitude(u);
        if ex.noise.len() != ex.farfield.len() && (farfield.len() > 1 || inputs.len() > 1) {
            return Err(Error::InvalidConfig(format!(
                "{}: SNR augmentation of several channels needs per-channel noise truth",
                ex.id
            )));
        }
        // speech part of each channel is the mixture minus its noise image
        for (p, y) in farfield.iter_mut().enumerate() {
            let v = ex.noise[p.min(ex.noise.len() - 1)].crop_frames(slice.offset, slice.frames)?;
            *y = y.sub(&v)?.scaled(gain).add(&v)?;
        }
        speech = speech.scaled(gain);
    }
    let reference = farfield[ex.ref_mic].clone();
    Ok(Prepared {
        id: ex.id.clone(),
        inputs: inputs.iter().map(|&m| farfield[m].clone()).collect(),
        target: Target::Truth {
            speech,
            noise,
            reference,
        },
    })
}

/// Loss of the estimator on a prepared example, with gradients w.r.t. the
/// (possibly projected) estimator outputs pulled back to the raw outputs.
fn evaluate(estimator: &Estimator, prep: &Prepared, cfg: &TrainConfig) -> Result<LossBreakdown> {
    let raw = estimator.forward(&prep.inputs)?;
    let estimates = if cfg.consistency {
        EstimatePair::new(
            consistency_project(&raw.speech)?,
            consistency_project(&raw.noise)?,
        )?
    } else {
        raw
    };
    let mut breakdown = match &prep.target {
        Target::Mixture {
            farfield,
            ref_mic,
            closetalk,
        } => {
            let mut taps = cfg.taps;
            if closetalk.is_none() {
                taps.closetalk = None;
            }
            let mixtures = Mixtures {
                farfield,
                reference: *ref_mic,
                closetalk: closetalk.as_ref(),
            };
            mc_loss(&estimates, mixtures, &taps, cfg.gradient_mode)?
        }
        Target::Truth {
            speech,
            noise,
            reference,
        } => supervised_loss(&estimates, speech, noise, reference)?,
    };
    if cfg.consistency {
        breakdown.grad_speech = consistency_project_vjp(&breakdown.grad_speech)?;
        breakdown.grad_noise = consistency_project_vjp(&breakdown.grad_noise)?;
    }
    Ok(breakdown)
}

fn prepare(
    data_real: &[RealExample],
    data_sim: &[SimulatedExample],
    origin: Origin,
    slice: &SceneSlice,
    inputs: &[usize],
    cfg: &TrainConfig,
) -> Result<Prepared> {
    match origin {
        Origin::Real => prepare_real(&data_real[slice.scene], slice, inputs, cfg),
        Origin::Simulated => prepare_simulated(&data_sim[slice.scene], slice, inputs),
    }
}

/// Losses of one optimizer step, one breakdown per batch item.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub origin: Origin,
    pub breakdowns: Vec<LossBreakdown>,
    /// Mean total over the batch.
    pub total: f64,
}

/// One Adam update on a batch. Real batches use the mixture-constraint
/// loss, simulated batches the supervised loss; gradients are averaged over
/// the batch.
pub fn train_step(
    estimator: &mut Estimator,
    adam: &mut Adam,
    lr: f64,
    batch: &BatchDescriptor,
    data: &TrainingData,
    inputs: &[usize],
    cfg: &TrainConfig,
    step: u64,
) -> Result<StepOutcome> {
    let mut grad = vec![0.0; estimator.params().len()];
    let mut breakdowns = Vec::with_capacity(batch.items.len());
    let n = batch.items.len() as f64;
    for slice in &batch.items {
        let prep = prepare(&data.real, &data.simulated, batch.origin, slice, inputs, cfg)?;
        let wrap = |e: Error| Error::Step {
            step,
            scene: prep.id.clone(),
            source: Box::new(e),
        };
        let b = evaluate(estimator, &prep, cfg).map_err(wrap)?;
        let g = estimator
            .backward(&prep.inputs, &b.grad_speech, &b.grad_noise)
            .map_err(wrap)?;
        for (acc, v) in grad.iter_mut().zip(&g) {
            *acc += v / n;
        }
        breakdowns.push(b);
    }
    adam.step(estimator.params_mut(), &grad, lr);
    let total = breakdowns.iter().map(|b| b.total).sum::<f64>() / n;
    Ok(StepOutcome {
        origin: batch.origin,
        breakdowns,
        total,
    })
}

/// Mean supervised loss on the held-out simulated split plus mean
/// mixture-constraint loss on the held-out real split (full length, no
/// augmentation). A missing split contributes nothing.
pub fn validation_loss(
    estimator: &Estimator,
    data: &TrainingData,
    inputs: &[usize],
    cfg: &TrainConfig,
) -> Result<Option<f64>> {
    let full = |frames: usize, scene: usize| SceneSlice {
        scene,
        offset: 0,
        frames,
        snr_offset_db: None,
    };
    let mut parts = Vec::new();
    if !data.validation_real.is_empty() {
        let mut sum = 0.0;
        for (i, ex) in data.validation_real.iter().enumerate() {
            let prep = prepare_real(ex, &full(ex.frames(), i), inputs, cfg)?;
            sum += evaluate(estimator, &prep, cfg)?.total;
        }
        parts.push(sum / data.validation_real.len() as f64);
    }
    if !data.validation_simulated.is_empty() {
        let mut sum = 0.0;
        for (i, ex) in data.validation_simulated.iter().enumerate() {
            let prep = prepare_simulated(ex, &full(ex.frames(), i), inputs)?;
            sum += evaluate(estimator, &prep, cfg)?.total;
        }
        parts.push(sum / data.validation_simulated.len() as f64);
    }
    Ok((!parts.is_empty()).then(|| parts.iter().sum()))
}

fn mean_mc(terms: &[&McTerms]) -> McTerms {
    let n = terms.len() as f64;
    let mics = terms[0].nonreference.len();
    McTerms {
        reference: terms.iter().map(|t| t.reference).sum::<f64>() / n,
        nonreference: (0..mics)
            .map(|i| terms.iter().map(|t| t.nonreference[i]).sum::<f64>() / n)
            .collect(),
        closetalk: terms
            .iter()
            .map(|t| t.closetalk)
            .sum::<Option<f64>>()
            .map(|s| s / n),
        closetalk_future: terms[0].closetalk_future,
    }
}

/// One row of the per-step metric log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub origin: Origin,
    pub mc: Option<McTerms>,
    pub supervised: Option<SupervisedTerms>,
    pub total: f64,
    pub lr: f64,
}

impl StepRecord {
    fn from_outcome(step: u64, epoch: usize, lr: f64, out: &StepOutcome) -> Self {
        let n = out.breakdowns.len() as f64;
        let mcs: Vec<&McTerms> = out.breakdowns.iter().filter_map(|b| b.mc.as_ref()).collect();
        let sups: Vec<&SupervisedTerms> =
            out.breakdowns.iter().filter_map(|b| b.supervised.as_ref()).collect();
        Self {
            step,
            epoch,
            origin: out.origin,
            mc: (!mcs.is_empty()).then(|| mean_mc(&mcs)),
            supervised: (!sups.is_empty()).then(|| SupervisedTerms {
                target: sups.iter().map(|s| s.target).sum::<f64>() / n,
                non_target: sups.iter().map(|s| s.non_target).sum::<f64>() / n,
            }),
            total: out.total,
            lr,
        }
    }

    pub const TSV_HEADER: &'static str =
        "step\tepoch\tsource\tmc_ref\tmc_nonref\tmc_closetalk\tsup_target\tsup_nontarget\ttotal\tlr";

    pub fn to_tsv(&self) -> String {
        let num = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.10e}"));
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.step,
            self.epoch,
            self.origin,
            num(self.mc.as_ref().map(|m| m.reference)),
            num(self.mc.as_ref().map(|m| m.nonreference_sum())),
            num(self.mc.as_ref().and_then(|m| m.closetalk)),
            num(self.supervised.map(|s| s.target)),
            num(self.supervised.map(|s| s.non_target)),
            num(Some(self.total)),
            num(Some(self.lr)),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub validation_loss: f64,
    /// Learning rate for the next epoch.
    pub lr: f64,
}

impl EpochRecord {
    pub const TSV_HEADER: &'static str = "epoch\tvalidation_loss\tlr";

    pub fn to_tsv(&self) -> String {
        format!("{}\t{:.10e}\t{:.10e}", self.epoch, self.validation_loss, self.lr)
    }
}

/// Events reported while training.
#[derive(Debug, Clone)]
pub enum TrainEvent<'a> {
    Step(&'a StepRecord),
    Epoch(&'a EpochRecord),
}

/// Owns the estimator and optimizer state for one training run.
#[derive(Debug)]
pub struct Trainer<'a> {
    cfg: TrainConfig,
    data: &'a TrainingData,
    inputs: Vec<usize>,
    estimator: Estimator,
    adam: Adam,
    scheduler: BatchScheduler,
    rng: ChaCha8Rng,
    step: u64,
    epoch: usize,
    lr: f64,
    history: Vec<f64>,
}

/// Initial free-variable estimates: a random per-bin split of the
/// reference mixture.
fn free_variable_init(reference: &ComplexSpectrogram, rng: &mut ChaCha8Rng) -> Result<Estimator> {
    let mut speech = reference.clone();
    let mut noise = reference.clone();
    for (s, v) in speech.data_mut().iter_mut().zip(noise.data_mut()) {
        let m: f64 = rng.gen_range(0.0..1.0);
        *s *= m;
        *v *= 1.0 - m;
    }
    Ok(Estimator::FreeVariable(FreeVariable::new(&EstimatePair::new(
        speech, noise,
    )?)))
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: TrainConfig, data: &'a TrainingData) -> Result<Self> {
        cfg.validate()?;
        let layout = data.layout()?;
        let inputs = cfg.resolved_inputs(&layout)?;
        let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let estimator = match cfg.estimator {
            EstimatorMode::MaskNet => {
                let reference_input = inputs.iter().position(|&m| m == layout.ref_mic).unwrap_or(0);
                Estimator::MaskNet(MaskNet::new(
                    inputs.len(),
                    reference_input,
                    layout.bins,
                    cfg.hidden,
                    &mut init_rng,
                )?)
            }
            EstimatorMode::FreeVariable => {
                let reference = match (data.real.as_slice(), data.simulated.as_slice()) {
                    ([r], []) => &r.farfield[r.ref_mic],
                    ([], [s]) => &s.farfield[s.ref_mic],
                    _ => {
                        return Err(Error::InvalidConfig(
                            "free-variable training needs exactly one training example".into(),
                        ))
                    }
                };
                free_variable_init(reference, &mut init_rng)?
            }
        };
        Self::with_estimator(cfg, data, estimator)
    }

    /// Continues from an existing estimator (fresh optimizer state).
    pub fn with_estimator(cfg: TrainConfig, data: &'a TrainingData, estimator: Estimator) -> Result<Self> {
        cfg.validate()?;
        let layout = data.layout()?;
        let inputs = cfg.resolved_inputs(&layout)?;
        if let Some(n) = estimator.input_mics() {
            if n != inputs.len() {
                return Err(Error::InvalidConfig(format!(
                    "estimator takes {n} input mics, config selects {}",
                    inputs.len()
                )));
            }
        }
        let stft = data
            .real
            .first()
            .map(|r| *r.farfield[0].config())
            .or_else(|| data.simulated.first().map(|s| *s.farfield[0].config()))
            .ok_or(Error::EmptyPool("no training examples"))?;
        let segment_samples = (cfg.segment_seconds * stft.sample_rate_hz as f64).round() as usize;
        let mut segment_frames = stft.num_frames(segment_samples.max(1));
        if estimator.mode() == EstimatorMode::FreeVariable {
            segment_frames = usize::MAX;
        }
        let scheduler = BatchScheduler::new(
            cfg.scheduling,
            data.real.iter().map(RealExample::frames).collect(),
            data.simulated.iter().map(SimulatedExample::frames).collect(),
            segment_frames,
            cfg.batch_size,
            cfg.snr_augment,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        Ok(Self {
            adam: Adam::new(estimator.params().len()),
            lr: cfg.lr0,
            cfg,
            data,
            inputs,
            estimator,
            scheduler,
            rng,
            step: 0,
            epoch: 0,
            history: Vec::new(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn estimator(&self) -> &Estimator {
        &self.estimator
    }

    pub fn into_estimator(self) -> Estimator {
        self.estimator
    }

    pub fn input_mics(&self) -> &[usize] {
        &self.inputs
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn validation_history(&self) -> &[f64] {
        &self.history
    }

    fn steps_per_epoch(&self) -> usize {
        match self.cfg.steps_per_epoch {
            0 => (self.data.real.len() + self.data.simulated.len()).max(1),
            n => n,
        }
    }

    /// Draws the next batch and applies one update.
    pub fn step(&mut self) -> Result<(StepRecord, StepOutcome)> {
        let batch = self.scheduler.next_batch(&mut self.rng)?;
        let outcome = train_step(
            &mut self.estimator,
            &mut self.adam,
            self.lr,
            &batch,
            self.data,
            &self.inputs,
            &self.cfg,
            self.step,
        )?;
        let record = StepRecord::from_outcome(self.step, self.epoch, self.lr, &outcome);
        self.step += 1;
        Ok((record, outcome))
    }

    pub fn validation_loss(&self) -> Result<Option<f64>> {
        validation_loss(&self.estimator, self.data, &self.inputs, &self.cfg)
    }

    /// Runs until `max_epochs` or `max_steps`, whichever comes first. The
    /// callback sees each event together with the updated estimator.
    pub fn run(&mut self, mut on_event: impl FnMut(TrainEvent, &Estimator) -> Result<()>) -> Result<()> {
        let per_epoch = self.steps_per_epoch();
        while self.epoch < self.cfg.max_epochs {
            let mut epoch_total = 0.0;
            let mut taken = 0;
            for _ in 0..per_epoch {
                if self.cfg.max_steps.is_some_and(|m| self.step >= m) {
                    break;
                }
                let (record, _) = self.step()?;
                epoch_total += record.total;
                taken += 1;
                on_event(TrainEvent::Step(&record), &self.estimator)?;
            }
            if taken == 0 {
                break;
            }
            let validation = match self.validation_loss()? {
                Some(v) => v,
                None => epoch_total / taken as f64,
            };
            self.history.push(validation);
            self.lr = adjust_lr(
                &self.history,
                self.cfg.lr0,
                self.cfg.lr_halving_patience_epochs,
            );
            let record = EpochRecord {
                epoch: self.epoch,
                validation_loss: validation,
                lr: self.lr,
            };
            on_event(TrainEvent::Epoch(&record), &self.estimator)?;
            self.epoch += 1;
            if taken < per_epoch {
                break;
            }
        }
        Ok(())
    }
}
