//! Synthetic multi-microphone scenes that follow the narrowband mixture
//! model exactly, so every mixture is a known filtering of two known sources.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fcp::{apply_filter, FilterBank, TapWindow};
use crate::spectral::{stft, ComplexSpectrogram, StftConfig};

/// Geometric per-tap amplitude decay of the random filters.
pub const FILTER_DECAY: f64 = 0.7;

/// Lower and upper bound of the SNR augmentation offset, in dB.
pub const SNR_AUGMENT_RANGE_DB: (f64, f64) = (-10.0, 5.0);

/// Tap counts of the ground-truth filters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrueTaps {
    /// `A`: the reverberation filter covers frames `t-A+1 ..= t-Δ`.
    pub reverb_span: usize,
    /// `Δ`: prediction delay of the reverberation filter.
    pub reverb_delay: usize,
    pub farfield_speech_past: usize,
    pub farfield_speech_future: usize,
    pub farfield_noise_past: usize,
    pub farfield_noise_future: usize,
    pub closetalk_speech_past: usize,
    pub closetalk_speech_future: usize,
    pub closetalk_noise_past: usize,
    pub closetalk_noise_future: usize,
}

impl TrueTaps {
    /// No reverberation and single-tap identity filters everywhere.
    pub fn degenerate() -> Self {
        Self {
            reverb_span: 1,
            reverb_delay: 1,
            farfield_speech_past: 1,
            farfield_speech_future: 0,
            farfield_noise_past: 1,
            farfield_noise_future: 0,
            closetalk_speech_past: 1,
            closetalk_speech_future: 0,
            closetalk_noise_past: 1,
            closetalk_noise_future: 0,
        }
    }

    pub fn reverb_taps(&self) -> usize {
        self.reverb_span.saturating_sub(self.reverb_delay)
    }

    pub fn reverb_window(&self) -> TapWindow {
        TapWindow::new(self.reverb_taps(), 0, self.reverb_delay as isize)
    }

    fn validate(&self) -> Result<()> {
        if self.reverb_taps() > 0 && self.reverb_delay < 1 {
            return Err(Error::InvalidConfig("reverb delay must be >= 1".into()));
        }
        if self.farfield_speech_past < 1
            || self.farfield_noise_past < 1
            || self.closetalk_speech_past < 1
            || self.closetalk_noise_past < 1
        {
            return Err(Error::InvalidConfig(
                "speech/noise filters need the current-frame tap".into(),
            ));
        }
        Ok(())
    }

    /// Largest absolute frame offset any filter reaches, given the close-talk
    /// advance.
    fn max_span(&self, advance: usize) -> usize {
        [
            self.reverb_span,
            self.farfield_speech_past + self.farfield_speech_future,
            self.farfield_noise_past + self.farfield_noise_future,
            self.closetalk_speech_past + self.closetalk_speech_future + advance,
            self.closetalk_noise_past + self.closetalk_noise_future,
        ]
        .into_iter()
        .max()
        .unwrap_or(1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub stft: StftConfig,
    pub num_far_mics: usize,
    /// Reference far-field microphone, 0-based.
    pub ref_mic: usize,
    pub speech_source: Vec<f64>,
    pub noise_source: Vec<f64>,
    pub true_taps: TrueTaps,
    pub filter_seed: u64,
    /// Far-field reference-microphone SNR (reverberant speech vs noise).
    pub snr_db: f64,
    /// Frames by which the close-talk speech leads the reference microphone.
    pub closetalk_advance_frames: usize,
    /// Amplitude gain on the close-talk noise filter.
    pub closetalk_noise_gain: f64,
}

impl SceneSpec {
    fn validate(&self) -> Result<()> {
        self.stft.validate()?;
        if self.num_far_mics < 1 {
            return Err(Error::InvalidConfig("need at least one far-field mic".into()));
        }
        if self.ref_mic >= self.num_far_mics {
            return Err(Error::InvalidConfig("reference mic out of range".into()));
        }
        if !self.snr_db.is_finite() {
            return Err(Error::InvalidConfig("snr_db must be finite".into()));
        }
        if !self.closetalk_noise_gain.is_finite() || self.closetalk_noise_gain < 0.0 {
            return Err(Error::InvalidConfig("invalid close-talk noise gain".into()));
        }
        if self.speech_source.len() != self.noise_source.len() {
            return Err(Error::ShapeMismatch("speech and noise lengths differ".into()));
        }
        self.true_taps.validate()
    }
}

/// Ground truth of a generated scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneTruth {
    pub spec: SceneSpec,
    /// Direct-path speech at the reference microphone.
    pub speech: ComplexSpectrogram,
    /// Noise at the reference microphone, scaled to the requested SNR.
    pub noise: ComplexSpectrogram,
    pub speech_signal: Vec<f64>,
    pub noise_signal: Vec<f64>,
    /// Reference-microphone reverberation filter (`None` without reverb).
    pub reverb_filter: Option<FilterBank>,
    /// Speech filters of the far-field mics (`None` at the reference).
    pub speech_filters: Vec<Option<FilterBank>>,
    /// Noise filters of the far-field mics (`None` at the reference).
    pub noise_filters: Vec<Option<FilterBank>>,
    pub closetalk_speech_filter: FilterBank,
    pub closetalk_noise_filter: FilterBank,
    /// Speech component of every far-field mixture.
    pub speech_images: Vec<ComplexSpectrogram>,
    /// Noise component of every far-field mixture.
    pub noise_images: Vec<ComplexSpectrogram>,
    pub farfield: Vec<ComplexSpectrogram>,
    pub closetalk_speech_image: ComplexSpectrogram,
    pub closetalk_noise_image: ComplexSpectrogram,
    pub closetalk: ComplexSpectrogram,
}

impl SceneTruth {
    pub fn reference_mixture(&self) -> &ComplexSpectrogram {
        &self.farfield[self.spec.ref_mic]
    }

    /// Re-renders every mixture from the stored sources and filters and
    /// returns the largest absolute deviation from the stored mixtures.
    pub fn model_residual(&self) -> Result<f64> {
        let q = self.spec.ref_mic;
        let mut worst: f64 = 0.0;
        for (p, y) in self.farfield.iter().enumerate() {
            let rendered = if p == q {
                let mut x = self.speech.clone();
                if let Some(g) = &self.reverb_filter {
                    x = x.add(&apply_filter(g, &self.speech)?)?;
                }
                x.add(&self.noise)?
            } else {
                let h = self.speech_filters[p].as_ref().expect("non-reference filter");
                let r = self.noise_filters[p].as_ref().expect("non-reference filter");
                apply_filter(h, &self.speech)?.add(&apply_filter(r, &self.noise)?)?
            };
            worst = worst.max(rendered.max_abs_diff(y));
        }
        let y0 = apply_filter(&self.closetalk_speech_filter, &self.speech)?
            .add(&apply_filter(&self.closetalk_noise_filter, &self.noise)?)?;
        Ok(worst.max(y0.max_abs_diff(&self.closetalk)))
    }
}

fn complex_normal(rng: &mut ChaCha8Rng) -> Complex64 {
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

/// Random filter with a unit tap at pre-shift offset 0 and complex Gaussian
/// taps elsewhere, decaying geometrically with distance from that tap.
fn direct_filter(rng: &mut ChaCha8Rng, window: TapWindow, bins: usize, gain: f64) -> FilterBank {
    let mut taps = Vec::with_capacity(bins * window.len());
    for _ in 0..bins {
        for k in 0..window.len() {
            // distance from the unshifted current-frame tap
            let d = (window.offset(k) + window.delay).unsigned_abs();
            let tap = if d == 0 {
                Complex64::new(1.0, 0.0)
            } else {
                complex_normal(rng) * FILTER_DECAY.powi(d as i32)
            };
            taps.push(tap * gain);
        }
    }
    FilterBank::new(window, bins, taps).expect("finite taps")
}

/// Random reverberation filter; the first tap after the delay has decay 0.7.
fn reverb_filter(rng: &mut ChaCha8Rng, window: TapWindow, bins: usize) -> FilterBank {
    let n = window.len();
    let mut taps = Vec::with_capacity(bins * n);
    for _ in 0..bins {
        for k in 0..n {
            // k = n - 1 is the tap closest to the current frame
            let d = (n - k) as i32;
            taps.push(complex_normal(rng) * FILTER_DECAY.powi(d));
        }
    }
    FilterBank::new(window, bins, taps).expect("finite taps")
}

pub fn generate_scene(spec: &SceneSpec) -> Result<SceneTruth> {
    spec.validate()?;
    if spec.speech_source.is_empty() {
        return Err(Error::EmptySignal);
    }
    if spec.speech_source.iter().all(|&x| x == 0.0) {
        return Err(Error::ZeroEnergy("speech source"));
    }
    if spec.noise_source.iter().all(|&x| x == 0.0) {
        return Err(Error::ZeroEnergy("noise source"));
    }
    let cfg = spec.stft;
    let frames = cfg.num_frames(spec.speech_source.len());
    let span = spec.true_taps.max_span(spec.closetalk_advance_frames);
    if frames <= span {
        return Err(Error::TooShort {
            frames,
            required: span,
        });
    }

    let speech = stft(&spec.speech_source, &cfg)?;
    let raw_noise = stft(&spec.noise_source, &cfg)?;
    let bins = speech.bins();
    let taps = spec.true_taps;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.filter_seed);

    let reverb = (taps.reverb_taps() > 0).then(|| reverb_filter(&mut rng, taps.reverb_window(), bins));
    let ff_speech_window = TapWindow::new(taps.farfield_speech_past, taps.farfield_speech_future, 0);
    let ff_noise_window = TapWindow::new(taps.farfield_noise_past, taps.farfield_noise_future, 0);
    let speech_filters: Vec<Option<FilterBank>> = (0..spec.num_far_mics)
        .map(|p| (p != spec.ref_mic).then(|| direct_filter(&mut rng, ff_speech_window, bins, 1.0)))
        .collect();
    let noise_filters: Vec<Option<FilterBank>> = (0..spec.num_far_mics)
        .map(|p| (p != spec.ref_mic).then(|| direct_filter(&mut rng, ff_noise_window, bins, 1.0)))
        .collect();
    let ct_speech_window = TapWindow::new(
        taps.closetalk_speech_past,
        taps.closetalk_speech_future,
        -(spec.closetalk_advance_frames as isize),
    );
    let ct_noise_window = TapWindow::new(taps.closetalk_noise_past, taps.closetalk_noise_future, 0);
    let closetalk_speech_filter = direct_filter(&mut rng, ct_speech_window, bins, 1.0);
    let closetalk_noise_filter =
        direct_filter(&mut rng, ct_noise_window, bins, spec.closetalk_noise_gain);

    let mut reverberant = speech.clone();
    if let Some(g) = &reverb {
        reverberant = reverberant.add(&apply_filter(g, &speech)?)?;
    }
    let raw_energy = raw_noise.energy();
    if raw_energy <= 0.0 {
        return Err(Error::ZeroEnergy("noise spectrogram"));
    }
    let gain = (reverberant.energy() / (raw_energy * 10f64.powf(spec.snr_db / 10.0))).sqrt();
    let noise = raw_noise.scaled(gain);
    let noise_signal: Vec<f64> = spec.noise_source.iter().map(|x| x * gain).collect();

    let mut speech_images = Vec::with_capacity(spec.num_far_mics);
    let mut noise_images = Vec::with_capacity(spec.num_far_mics);
    for p in 0..spec.num_far_mics {
        if p == spec.ref_mic {
            speech_images.push(reverberant.clone());
            noise_images.push(noise.clone());
        } else {
            let h = speech_filters[p].as_ref().expect("non-reference filter");
            let r = noise_filters[p].as_ref().expect("non-reference filter");
            speech_images.push(apply_filter(h, &speech)?);
            noise_images.push(apply_filter(r, &noise)?);
        }
    }
    let farfield = speech_images
        .iter()
        .zip(&noise_images)
        .map(|(x, v)| x.add(v))
        .collect::<Result<Vec<_>>>()?;
    let closetalk_speech_image = apply_filter(&closetalk_speech_filter, &speech)?;
    let closetalk_noise_image = apply_filter(&closetalk_noise_filter, &noise)?;
    let closetalk = closetalk_speech_image.add(&closetalk_noise_image)?;

    Ok(SceneTruth {
        spec: spec.clone(),
        speech,
        noise,
        speech_signal: spec.speech_source.clone(),
        noise_signal,
        reverb_filter: reverb,
        speech_filters,
        noise_filters,
        closetalk_speech_filter,
        closetalk_noise_filter,
        speech_images,
        noise_images,
        farfield,
        closetalk_speech_image,
        closetalk_noise_image,
        closetalk,
    })
}

/// `speech * 10^(u/20) + noise`.
pub fn snr_augment(
    speech: &ComplexSpectrogram,
    noise: &ComplexSpectrogram,
    u_db: f64,
) -> Result<ComplexSpectrogram> {
    if !u_db.is_finite() {
        return Err(Error::InvalidConfig("SNR offset must be finite".into()));
    }
    speech.check_same_shape(noise, "snr_augment")?;
    if u_db == 0.0 {
        return speech.add(noise);
    }
    speech.scaled(db_to_amplitude(u_db)).add(noise)
}

pub fn db_to_amplitude(db: f64) -> f64 {
    10f64.powf(db / 20.0)
}

/// Draws an SNR augmentation offset uniformly from [-10, +5] dB.
pub fn sample_u<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.gen_range(SNR_AUGMENT_RANGE_DB.0..=SNR_AUGMENT_RANGE_DB.1)
}

/// Speech-like test signal: a jittered harmonic voice with syllable-rate
/// on/off envelope and a little aspiration noise.
pub fn synth_speech<R: Rng + ?Sized>(rng: &mut R, len: usize, sample_rate_hz: u32) -> Vec<f64> {
    let fs = sample_rate_hz as f64;
    let nyquist = fs / 2.0;
    let mut f0 = rng.gen_range(100.0..220.0);
    let base_f0 = f0;
    let mut phase = 0.0;
    // syllable envelope: alternating voiced segments and pauses
    let mut envelope = vec![0.0; len];
    let mut pos = (rng.gen_range(0.0..0.05) * fs) as usize;
    while pos < len {
        let voiced = (rng.gen_range(0.08..0.25) * fs) as usize;
        let amp = rng.gen_range(0.5..1.0);
        for i in 0..voiced.min(len - pos) {
            let x = i as f64 / voiced as f64;
            envelope[pos + i] = amp * (PI * x).sin().powf(0.5);
        }
        pos += voiced + (rng.gen_range(0.03..0.12) * fs) as usize;
    }
    // per-harmonic amplitudes with a random formant-like bump
    let formant = rng.gen_range(400.0..1200.0);
    let num_harmonics = (nyquist * 0.9 / base_f0) as usize;
    let amps: Vec<f64> = (1..=num_harmonics)
        .map(|h| {
            let fh = h as f64 * base_f0;
            let bump = (-((fh - formant) / 500.0).powi(2)).exp();
            (1.0 / h as f64 + 0.8 * bump) * rng.gen_range(0.6..1.0)
        })
        .collect();
    let mut out = Vec::with_capacity(len);
    for env in envelope.iter().take(len) {
        f0 += rng.gen_range(-0.5..0.5) + 0.002 * (base_f0 - f0);
        phase += 2.0 * PI * f0 / fs;
        if phase > 2.0 * PI * 1e3 {
            phase -= 2.0 * PI * 1e3;
        }
        let mut v = 0.0;
        for (h, a) in amps.iter().enumerate() {
            if (h + 1) as f64 * f0 < nyquist {
                v += a * ((h + 1) as f64 * phase).sin();
            }
        }
        let breath: f64 = rng.sample::<f64, _>(StandardNormal) * 0.05;
        out.push(env * (0.3 * v + breath));
    }
    out
}

/// Stationary noise with a rising (first-difference) spectral tilt.
pub fn synth_noise<R: Rng + ?Sized>(rng: &mut R, len: usize) -> Vec<f64> {
    let mut prev = 0.0;
    (0..len)
        .map(|_| {
            let w: f64 = rng.sample(StandardNormal);
            let v = w - 0.6 * prev;
            prev = w;
            v
        })
        .collect()
}

/// Knobs for [`toy_scene_spec`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToySceneConfig {
    pub stft: StftConfig,
    pub seconds: f64,
    pub num_far_mics: usize,
    pub ref_mic: usize,
    pub true_taps: TrueTaps,
    /// SNR is drawn uniformly from this range (dB).
    pub snr_range_db: (f64, f64),
    /// Close-talk advance is drawn uniformly from `0..=max`.
    pub max_closetalk_advance: usize,
    pub closetalk_noise_gain: f64,
}

impl Default for ToySceneConfig {
    fn default() -> Self {
        Self {
            stft: StftConfig::narrowband(),
            seconds: 0.75,
            num_far_mics: 4,
            ref_mic: 0,
            true_taps: TrueTaps {
                reverb_span: 1,
                reverb_delay: 1,
                farfield_speech_past: 2,
                farfield_speech_future: 1,
                farfield_noise_past: 2,
                farfield_noise_future: 1,
                closetalk_speech_past: 3,
                closetalk_speech_future: 0,
                closetalk_noise_past: 2,
                closetalk_noise_future: 0,
            },
            snr_range_db: (-5.0, 5.0),
            max_closetalk_advance: 2,
            closetalk_noise_gain: 0.1,
        }
    }
}

/// A seeded scene spec with synthetic speech-like and noise sources.
pub fn toy_scene_spec(cfg: &ToySceneConfig, seed: u64) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = (cfg.seconds * cfg.stft.sample_rate_hz as f64).round() as usize;
    let speech_source = synth_speech(&mut rng, len, cfg.stft.sample_rate_hz);
    let noise_source = synth_noise(&mut rng, len);
    let snr_db = if cfg.snr_range_db.0 < cfg.snr_range_db.1 {
        rng.gen_range(cfg.snr_range_db.0..cfg.snr_range_db.1)
    } else {
        cfg.snr_range_db.0
    };
    let closetalk_advance_frames = rng.gen_range(0..=cfg.max_closetalk_advance);
    SceneSpec {
        stft: cfg.stft,
        num_far_mics: cfg.num_far_mics,
        ref_mic: cfg.ref_mic,
        speech_source,
        noise_source,
        true_taps: cfg.true_taps,
        filter_seed: rng.gen(),
        snr_db,
        closetalk_advance_frames,
        closetalk_noise_gain: cfg.closetalk_noise_gain,
    }
}
