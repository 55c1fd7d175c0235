//! JSON-lines manifest: one utterance per line.
//!
//! ```text
//! {"id":"r0","role":"real","farfield":["r0/farfield.wav"],"ref_mic":0,"closetalk":"r0/closetalk.wav"}
//! {"id":"s0","role":"simulated","farfield":["s0/farfield.wav"],"ref_mic":0,"truth":{"speech":"s0/speech.wav","noise":"s0/noise.wav"}}
//! ```
//!
//! Relative paths resolve against the manifest's directory.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Real,
    Simulated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Validation,
    Test,
}

impl Split {
    fn is_train(&self) -> bool {
        *self == Split::Train
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthPaths {
    /// Target speech at the reference microphone (one channel).
    pub speech: PathBuf,
    /// Noise image at the reference microphone, or one channel per
    /// far-field microphone.
    pub noise: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    pub role: Role,
    #[serde(default, skip_serializing_if = "Split::is_train")]
    pub split: Split,
    /// Far-field WAV files; their channels are concatenated in order.
    pub farfield: Vec<PathBuf>,
    /// Reference microphone among the concatenated far-field channels.
    pub ref_mic: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub closetalk: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<TruthPaths>,
}

impl ManifestRecord {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.id.is_empty() {
            return Err("empty id".into());
        }
        if self.farfield.is_empty() {
            return Err(format!("{}: no far-field channels", self.id));
        }
        match (self.role, &self.truth) {
            (Role::Real, Some(_)) => Err(format!("{}: real records must not carry truth", self.id)),
            (Role::Simulated, None) => Err(format!("{}: simulated records need truth", self.id)),
            _ => Ok(()),
        }
    }

    /// Copy with every relative path joined onto `base`.
    pub fn resolved(&self, base: &Path) -> Self {
        let join = |p: &PathBuf| if p.is_absolute() { p.clone() } else { base.join(p) };
        Self {
            farfield: self.farfield.iter().map(join).collect(),
            closetalk: self.closetalk.as_ref().map(join),
            truth: self.truth.as_ref().map(|t| TruthPaths {
                speech: join(&t.speech),
                noise: join(&t.noise),
            }),
            ..self.clone()
        }
    }
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestRecord>> {
    let mut records = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let bad = |reason: String| Error::Manifest {
            line: line_no,
            reason,
        };
        let record: ManifestRecord = serde_json::from_str(trimmed).map_err(|e| bad(e.to_string()))?;
        record.validate().map_err(bad)?;
        if !ids.insert(record.id.clone()) {
            return Err(bad(format!("duplicate id {}", record.id)));
        }
        records.push(record);
    }
    Ok(records)
}

pub fn to_jsonl(records: &[ManifestRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

/// Reads and validates a manifest; paths are resolved against its directory.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    Ok(parse_manifest(&text)?
        .iter()
        .map(|r| r.resolved(base))
        .collect())
}

pub fn write_manifest(path: impl AsRef<Path>, records: &[ManifestRecord]) -> Result<()> {
    for r in records {
        r.validate().map_err(|reason| Error::Manifest { line: 0, reason })?;
    }
    fs::write(path, to_jsonl(records)?)?;
    Ok(())
}
