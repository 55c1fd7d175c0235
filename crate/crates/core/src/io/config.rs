//! Flat `key = value` configuration files.
//!
//! One assignment per line, `#` starts a comment, blank lines are ignored.
//! Keys are unique; unknown keys are rejected so typos surface immediately.
//! Lists are comma separated. Every key is optional and falls back to the
//! defaults of [`TrainSettings`] or [`SimulateConfig`].

use std::collections::BTreeMap;
use std::fmt::{Display, Write as _};
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::estimator::EstimatorMode;
use crate::fcp::{CloseTalkTaps, FutureTaps, ReverbTaps};
use crate::loss::GradientMode;
use crate::simulate::ToySceneConfig;
use crate::spectral::StftConfig;
use crate::trainer::{Scheduling, TrainConfig};

/// Parsed assignments, consumed key by key.
#[derive(Debug, Clone, Default)]
pub struct KeyValues {
    entries: BTreeMap<String, (usize, String)>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::InvalidConfig(format!("line {line_no}: expected key = value")));
            };
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::InvalidConfig(format!("line {line_no}: empty key")));
            }
            if entries
                .insert(key.to_string(), (line_no, value.trim().to_string()))
                .is_some()
            {
                return Err(Error::InvalidConfig(format!("line {line_no}: duplicate key {key}")));
            }
        }
        Ok(Self { entries })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Removes `key` and parses its value.
    pub fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        let Some((line, value)) = self.entries.remove(key) else {
            return Ok(None);
        };
        value
            .parse()
            .map(Some)
            .map_err(|_| Error::InvalidConfig(format!("line {line}: bad value for {key}: {value:?}")))
    }

    fn take_into<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<()> {
        if let Some(v) = self.take(key)? {
            *slot = v;
        }
        Ok(())
    }

    fn take_with<T>(&mut self, key: &str, parse: impl Fn(&str) -> Option<T>) -> Result<Option<T>> {
        let Some((line, value)) = self.entries.remove(key) else {
            return Ok(None);
        };
        parse(&value)
            .map(Some)
            .ok_or_else(|| Error::InvalidConfig(format!("line {line}: bad value for {key}: {value:?}")))
    }

    /// Fails if any key was never consumed.
    pub fn finish(self) -> Result<()> {
        match self.entries.iter().next() {
            None => Ok(()),
            Some((key, (line, _))) => Err(Error::InvalidConfig(format!("line {line}: unknown key {key}"))),
        }
    }
}

fn parse_list(s: &str) -> Option<Vec<usize>> {
    if s.is_empty() {
        return Some(Vec::new());
    }
    s.split(',').map(|x| x.trim().parse().ok()).collect()
}

fn parse_pair(s: &str) -> Option<(usize, usize)> {
    let v = parse_list(s)?;
    (v.len() == 2).then(|| (v[0], v[1]))
}

fn scheduling_name(s: Scheduling) -> &'static str {
    match s {
        Scheduling::StrictAlternate => "alternate",
        Scheduling::ProportionalSample => "proportional",
    }
}

fn gradient_name(g: GradientMode) -> &'static str {
    match g {
        GradientMode::ThroughSolve => "through_solve",
        GradientMode::Detached => "detached",
    }
}

fn estimator_name(e: EstimatorMode) -> &'static str {
    match e {
        EstimatorMode::MaskNet => "mask_net",
        EstimatorMode::FreeVariable => "free_variable",
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

struct Emitter(String);

impl Emitter {
    fn put(&mut self, key: &str, value: impl Display) {
        let _ = writeln!(self.0, "{key} = {value}");
    }
}

/// STFT override: all three keys or none.
fn take_stft(kv: &mut KeyValues, prefix: &str) -> Result<Option<StftConfig>> {
    let rate: Option<u32> = kv.take(&format!("{prefix}sample_rate_hz"))?;
    let win: Option<usize> = kv.take(&format!("{prefix}win_len"))?;
    let hop: Option<usize> = kv.take(&format!("{prefix}hop"))?;
    match (rate, win, hop) {
        (None, None, None) => Ok(None),
        (Some(r), Some(w), Some(h)) => StftConfig::new(r, w, h).map(Some),
        _ => Err(Error::InvalidConfig(format!(
            "{prefix}sample_rate_hz, {prefix}win_len and {prefix}hop must be given together"
        ))),
    }
}

fn put_stft(e: &mut Emitter, prefix: &str, s: &StftConfig) {
    e.put(&format!("{prefix}sample_rate_hz"), s.sample_rate_hz);
    e.put(&format!("{prefix}win_len"), s.win_len);
    e.put(&format!("{prefix}hop"), s.hop);
}

/// Everything `m2m train` reads from its config file.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    pub train: TrainConfig,
    /// `None` uses a 32 ms window with 8 ms hop at the data's sample rate.
    pub stft: Option<StftConfig>,
    /// Write an intermediate checkpoint every this many steps; 0 disables.
    pub checkpoint_every: u64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            stft: None,
            checkpoint_every: 0,
        }
    }
}

impl TrainSettings {
    pub fn from_text(text: &str) -> Result<Self> {
        let mut kv = KeyValues::parse(text)?;
        let s = Self::from_kv(&mut kv)?;
        kv.finish()?;
        Ok(s)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    pub fn from_kv(kv: &mut KeyValues) -> Result<Self> {
        let mut s = Self::default();
        let t = &mut s.train;
        kv.take_into("lr0", &mut t.lr0)?;
        kv.take_into("lr_halving_patience_epochs", &mut t.lr_halving_patience_epochs)?;
        kv.take_into("batch_size", &mut t.batch_size)?;
        kv.take_into("segment_seconds", &mut t.segment_seconds)?;
        if let Some(v) = kv.take_with("scheduling", |v| match v {
            "alternate" => Some(Scheduling::StrictAlternate),
            "proportional" => Some(Scheduling::ProportionalSample),
            _ => None,
        })? {
            t.scheduling = v;
        }
        kv.take_into("max_epochs", &mut t.max_epochs)?;
        kv.take_into("steps_per_epoch", &mut t.steps_per_epoch)?;
        if let Some(v) = kv.take::<u64>("max_steps")? {
            t.max_steps = (v > 0).then_some(v);
        }
        kv.take_into("seed", &mut t.seed)?;
        kv.take_into("snr_augment", &mut t.snr_augment)?;
        if let Some(v) = kv.take_with("gradient_mode", |v| match v {
            "through_solve" => Some(GradientMode::ThroughSolve),
            "detached" => Some(GradientMode::Detached),
            _ => None,
        })? {
            t.gradient_mode = v;
        }
        kv.take_into("consistency", &mut t.consistency)?;
        kv.take_into("use_closetalk", &mut t.use_closetalk)?;
        if let Some(v) = kv.take_with("estimator", |v| match v {
            "mask_net" => Some(EstimatorMode::MaskNet),
            "free_variable" => Some(EstimatorMode::FreeVariable),
            _ => None,
        })? {
            t.estimator = v;
        }
        kv.take_into("hidden", &mut t.hidden)?;
        if let Some(v) = kv.take_with("input_mics", parse_list)? {
            t.input_mics = v;
        }

        let taps = &mut t.taps;
        let k: Option<usize> = kv.take("taps.reference_taps")?;
        let delta: Option<usize> = kv.take("taps.reference_delay")?;
        match (k, delta) {
            (None, None) => {}
            (Some(0), _) => taps.reference = None,
            (Some(k), d) => taps.reference = Some(ReverbTaps { k, delta: d.unwrap_or(1) }),
            (None, Some(_)) => {
                return Err(Error::InvalidConfig("taps.reference_delay needs taps.reference_taps".into()))
            }
        }
        kv.take_into("taps.farfield_speech_past", &mut taps.farfield_speech_past)?;
        kv.take_into("taps.farfield_speech_future", &mut taps.farfield_speech_future)?;
        kv.take_into("taps.farfield_noise_past", &mut taps.farfield_noise_past)?;
        kv.take_into("taps.farfield_noise_future", &mut taps.farfield_noise_future)?;
        let closetalk_on: Option<bool> = kv.take("taps.closetalk")?;
        let mut ct = taps.closetalk.unwrap_or(CloseTalkTaps {
            speech_past: 20,
            noise_past: 20,
            future: FutureTaps::Estimate,
        });
        kv.take_into("taps.closetalk_speech_past", &mut ct.speech_past)?;
        kv.take_into("taps.closetalk_noise_past", &mut ct.noise_past)?;
        if let Some(f) = kv.take_with("taps.closetalk_future", |v| match v {
            "estimate" => Some(FutureTaps::Estimate),
            _ => parse_pair(v).map(|(speech, noise)| FutureTaps::Fixed { speech, noise }),
        })? {
            ct.future = f;
        }
        taps.closetalk = match closetalk_on {
            Some(false) => None,
            _ => Some(ct),
        };
        kv.take_into("taps.xi", &mut taps.xi)?;
        kv.take_into("taps.search_max", &mut taps.search_max)?;
        kv.take_into("taps.search_len", &mut taps.search_len)?;
        kv.take_into("taps.alpha", &mut taps.alpha)?;
        kv.take_into("taps.beta", &mut taps.beta)?;

        s.stft = take_stft(kv, "stft.")?;
        kv.take_into("checkpoint_every", &mut s.checkpoint_every)?;
        s.train.validate()?;
        Ok(s)
    }

    /// Renders every key; parsing the result gives back `self`.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let mut e = Emitter(String::new());
        e.put("lr0", t.lr0);
        e.put("lr_halving_patience_epochs", t.lr_halving_patience_epochs);
        e.put("batch_size", t.batch_size);
        e.put("segment_seconds", t.segment_seconds);
        e.put("scheduling", scheduling_name(t.scheduling));
        e.put("max_epochs", t.max_epochs);
        e.put("steps_per_epoch", t.steps_per_epoch);
        e.put("max_steps", t.max_steps.unwrap_or(0));
        e.put("seed", t.seed);
        e.put("snr_augment", t.snr_augment);
        e.put("gradient_mode", gradient_name(t.gradient_mode));
        e.put("consistency", t.consistency);
        e.put("use_closetalk", t.use_closetalk);
        e.put("estimator", estimator_name(t.estimator));
        e.put("hidden", t.hidden);
        e.put("input_mics", join(&t.input_mics));
        let taps = &t.taps;
        match taps.reference {
            None => e.put("taps.reference_taps", 0),
            Some(r) => {
                e.put("taps.reference_taps", r.k);
                e.put("taps.reference_delay", r.delta);
            }
        }
        e.put("taps.farfield_speech_past", taps.farfield_speech_past);
        e.put("taps.farfield_speech_future", taps.farfield_speech_future);
        e.put("taps.farfield_noise_past", taps.farfield_noise_past);
        e.put("taps.farfield_noise_future", taps.farfield_noise_future);
        e.put("taps.closetalk", taps.closetalk.is_some());
        if let Some(ct) = taps.closetalk {
            e.put("taps.closetalk_speech_past", ct.speech_past);
            e.put("taps.closetalk_noise_past", ct.noise_past);
            match ct.future {
                FutureTaps::Estimate => e.put("taps.closetalk_future", "estimate"),
                FutureTaps::Fixed { speech, noise } => e.put("taps.closetalk_future", format!("{speech},{noise}")),
            }
        }
        e.put("taps.xi", taps.xi);
        e.put("taps.search_max", taps.search_max);
        e.put("taps.search_len", taps.search_len);
        e.put("taps.alpha", taps.alpha);
        e.put("taps.beta", taps.beta);
        if let Some(stft) = &self.stft {
            put_stft(&mut e, "stft.", stft);
        }
        e.put("checkpoint_every", self.checkpoint_every);
        e.0
    }
}

/// Everything `m2m simulate` reads from its config file.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulateConfig {
    pub seed: u64,
    pub scene: ToySceneConfig,
    pub num_real: usize,
    pub num_simulated: usize,
    pub num_validation_real: usize,
    pub num_validation_simulated: usize,
    pub num_test: usize,
    /// Write close-talk mixtures for real-style records.
    pub closetalk: bool,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            scene: ToySceneConfig::default(),
            num_real: 8,
            num_simulated: 8,
            num_validation_real: 2,
            num_validation_simulated: 2,
            num_test: 8,
            closetalk: true,
        }
    }
}

impl SimulateConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        let mut kv = KeyValues::parse(text)?;
        let s = Self::from_kv(&mut kv)?;
        kv.finish()?;
        Ok(s)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    pub fn from_kv(kv: &mut KeyValues) -> Result<Self> {
        let mut s = Self::default();
        kv.take_into("seed", &mut s.seed)?;
        kv.take_into("num_real", &mut s.num_real)?;
        kv.take_into("num_simulated", &mut s.num_simulated)?;
        kv.take_into("num_validation_real", &mut s.num_validation_real)?;
        kv.take_into("num_validation_simulated", &mut s.num_validation_simulated)?;
        kv.take_into("num_test", &mut s.num_test)?;
        kv.take_into("closetalk", &mut s.closetalk)?;
        let sc = &mut s.scene;
        if let Some(stft) = take_stft(kv, "stft.")? {
            sc.stft = stft;
        }
        kv.take_into("seconds", &mut sc.seconds)?;
        kv.take_into("num_far_mics", &mut sc.num_far_mics)?;
        kv.take_into("ref_mic", &mut sc.ref_mic)?;
        kv.take_into("snr_min_db", &mut sc.snr_range_db.0)?;
        kv.take_into("snr_max_db", &mut sc.snr_range_db.1)?;
        kv.take_into("max_closetalk_advance", &mut sc.max_closetalk_advance)?;
        kv.take_into("closetalk_noise_gain", &mut sc.closetalk_noise_gain)?;
        let tt = &mut sc.true_taps;
        kv.take_into("true.reverb_span", &mut tt.reverb_span)?;
        kv.take_into("true.reverb_delay", &mut tt.reverb_delay)?;
        kv.take_into("true.farfield_speech_past", &mut tt.farfield_speech_past)?;
        kv.take_into("true.farfield_speech_future", &mut tt.farfield_speech_future)?;
        kv.take_into("true.farfield_noise_past", &mut tt.farfield_noise_past)?;
        kv.take_into("true.farfield_noise_future", &mut tt.farfield_noise_future)?;
        kv.take_into("true.closetalk_speech_past", &mut tt.closetalk_speech_past)?;
        kv.take_into("true.closetalk_speech_future", &mut tt.closetalk_speech_future)?;
        kv.take_into("true.closetalk_noise_past", &mut tt.closetalk_noise_past)?;
        kv.take_into("true.closetalk_noise_future", &mut tt.closetalk_noise_future)?;
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let sc = &self.scene;
        if sc.num_far_mics < 1 || sc.ref_mic >= sc.num_far_mics {
            return Err(Error::InvalidConfig("ref_mic must index one of num_far_mics".into()));
        }
        if !(sc.seconds > 0.0) {
            return Err(Error::InvalidConfig("seconds must be positive".into()));
        }
        if sc.snr_range_db.0 > sc.snr_range_db.1 {
            return Err(Error::InvalidConfig("snr_min_db exceeds snr_max_db".into()));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut e = Emitter(String::new());
        e.put("seed", self.seed);
        e.put("num_real", self.num_real);
        e.put("num_simulated", self.num_simulated);
        e.put("num_validation_real", self.num_validation_real);
        e.put("num_validation_simulated", self.num_validation_simulated);
        e.put("num_test", self.num_test);
        e.put("closetalk", self.closetalk);
        let sc = &self.scene;
        put_stft(&mut e, "stft.", &sc.stft);
        e.put("seconds", sc.seconds);
        e.put("num_far_mics", sc.num_far_mics);
        e.put("ref_mic", sc.ref_mic);
        e.put("snr_min_db", sc.snr_range_db.0);
        e.put("snr_max_db", sc.snr_range_db.1);
        e.put("max_closetalk_advance", sc.max_closetalk_advance);
        e.put("closetalk_noise_gain", sc.closetalk_noise_gain);
        let tt = &sc.true_taps;
        e.put("true.reverb_span", tt.reverb_span);
        e.put("true.reverb_delay", tt.reverb_delay);
        e.put("true.farfield_speech_past", tt.farfield_speech_past);
        e.put("true.farfield_speech_future", tt.farfield_speech_future);
        e.put("true.farfield_noise_past", tt.farfield_noise_past);
        e.put("true.farfield_noise_future", tt.farfield_noise_future);
        e.put("true.closetalk_speech_past", tt.closetalk_speech_past);
        e.put("true.closetalk_speech_future", tt.closetalk_speech_future);
        e.put("true.closetalk_noise_past", tt.closetalk_noise_past);
        e.put("true.closetalk_noise_future", tt.closetalk_noise_future);
        e.0
    }
}
