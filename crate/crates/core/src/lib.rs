//! Mixture-to-mixture (M2M) training and supervised co-learning for
//! far-field speech enhancement.
//!
//! The crate is organized bottom-up:
//!
//! - [`spectral`]: STFT / iSTFT with sqrt-Hann windows and the consistency
//!   projection.
//! - [`simulate`]: exact narrowband-model scenes with known sources and
//!   filters.
//! - [`fcp`]: per-frequency weighted least-squares filter estimation.
//! - [`loss`]: mixture-constraint and supervised losses with gradients.
//! - [`estimator`]: the trainable spectral estimator.
//! - [`trainer`]: co-learning loop, Adam, learning-rate schedule.
//! - [`metrics`]: SI-SDR, SDR, speaker reinforcement.
//! - [`io`] and [`pipeline`]: file formats and the end-to-end commands.

pub mod error;
pub mod estimator;
pub mod fcp;
pub mod io;
pub mod linalg;
pub mod loss;
pub mod metrics;
pub mod pipeline;
pub mod simulate;
pub mod spectral;
pub mod trainer;

pub use error::{Error, Result};
pub use estimator::{Estimator, EstimatorMode, FreeVariable, MaskNet};
pub use io::{Checkpoint, ManifestRecord, SimulateConfig, TrainSettings};
pub use metrics::{si_sdr, sdr, speaker_reinforce, MetricReport};
pub use fcp::{
    apply_filter, compute_lambda, estimate_future_taps, fcp_solve, fcp_solve_joint, FilterBank,
    FutureTaps, LambdaWeight, TapConfig, TapWindow,
};
pub use loss::{
    mc_loss, supervised_loss, EstimatePair, GradientMode, LossBreakdown, McTerms, Mixtures,
    SolvedFilters, SupervisedTerms,
};
pub use simulate::{generate_scene, toy_scene_spec, SceneSpec, SceneTruth, ToySceneConfig, TrueTaps};
pub use trainer::{
    adjust_lr, train_step, validation_loss, Adam, BatchDescriptor, BatchScheduler, Origin,
    RealExample, Scheduling, SimulatedExample, StepRecord, TrainConfig, Trainer, TrainingData,
};
pub use spectral::{consistency_project, istft, stft, ComplexSpectrogram, StftConfig};

pub use num_complex::Complex64;
