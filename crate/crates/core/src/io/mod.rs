//! File formats: WAV audio, JSON-lines manifests, flat key=value configs and
//! the versioned binary dumps for scenes, filters and checkpoints.

pub mod binary;
pub mod config;
pub mod manifest;
pub mod wav;

pub use binary::{
    read_checkpoint, read_filters, read_spectrograms, write_checkpoint, write_filters,
    write_spectrograms, Checkpoint,
};
pub use config::{KeyValues, SimulateConfig, TrainSettings};
pub use manifest::{read_manifest, write_manifest, ManifestRecord, Role, Split, TruthPaths};
pub use wav::{read_wav, write_wav, Audio};
