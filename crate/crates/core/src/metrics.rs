//! SI-SDR / SDR evaluation and speaker reinforcement.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::ComplexSpectrogram;

/// Metric values are clamped to `±METRIC_CAP_DB`.
pub const METRIC_CAP_DB: f64 = 60.0;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn ratio_db(num: f64, den: f64) -> f64 {
    if den <= 0.0 {
        return METRIC_CAP_DB;
    }
    if num <= 0.0 {
        return -METRIC_CAP_DB;
    }
    (10.0 * (num / den).log10()).clamp(-METRIC_CAP_DB, METRIC_CAP_DB)
}

fn check_pair(reference: &[f64], estimate: &[f64]) -> Result<()> {
    if reference.len() != estimate.len() {
        return Err(Error::ShapeMismatch(format!(
            "reference has {} samples, estimate {}",
            reference.len(),
            estimate.len()
        )));
    }
    if reference.iter().all(|&x| x == 0.0) {
        return Err(Error::ZeroEnergy("reference"));
    }
    Ok(())
}

/// Scale-invariant SDR in dB, capped at ±60.
pub fn si_sdr(reference: &[f64], estimate: &[f64]) -> Result<f64> {
    check_pair(reference, estimate)?;
    let alpha = dot(estimate, reference) / dot(reference, reference);
    let target: f64 = reference.iter().map(|s| (alpha * s).powi(2)).sum();
    let distortion: f64 = reference
        .iter()
        .zip(estimate)
        .map(|(s, e)| (alpha * s - e).powi(2))
        .sum();
    Ok(ratio_db(target, distortion))
}

/// Plain energy-ratio SDR in dB, capped at ±60.
pub fn sdr(reference: &[f64], estimate: &[f64]) -> Result<f64> {
    check_pair(reference, estimate)?;
    let distortion: f64 = reference
        .iter()
        .zip(estimate)
        .map(|(s, e)| (s - e).powi(2))
        .sum();
    Ok(ratio_db(dot(reference, reference), distortion))
}

/// Mixing gain `η > 0` with `10 log10(|ŝ|² / |η y|²) = γ`.
pub fn reinforcement_gain(enhanced: &[f64], mixture: &[f64], gamma_db: f64) -> Result<f64> {
    let es = dot(enhanced, enhanced);
    let ey = dot(mixture, mixture);
    if es <= 0.0 {
        return Err(Error::ZeroEnergy("enhanced signal"));
    }
    if ey <= 0.0 {
        return Err(Error::ZeroEnergy("mixture signal"));
    }
    Ok((es / (ey * 10f64.powf(gamma_db / 10.0))).sqrt())
}

/// `ŝ + η y` at energy ratio `γ` dB. `γ = +∞` disables reinforcement.
pub fn speaker_reinforce(enhanced: &[f64], mixture: &[f64], gamma_db: f64) -> Result<Vec<f64>> {
    if enhanced.len() != mixture.len() {
        return Err(Error::ShapeMismatch("enhanced and mixture lengths differ".into()));
    }
    if gamma_db == f64::INFINITY {
        return Ok(enhanced.to_vec());
    }
    if gamma_db.is_nan() {
        return Err(Error::InvalidConfig("gamma must not be NaN".into()));
    }
    let eta = reinforcement_gain(enhanced, mixture, gamma_db)?;
    Ok(enhanced.iter().zip(mixture).map(|(s, y)| s + eta * y).collect())
}

/// Per-bin permutation flags: `true` where the speech estimate is more
/// correlated with the true noise than with the true speech.
///
/// Instrumentation only; it is not part of any loss.
pub fn frequency_permutation_map(
    speech_estimate: &ComplexSpectrogram,
    speech: &ComplexSpectrogram,
    noise: &ComplexSpectrogram,
) -> Result<Vec<bool>> {
    speech_estimate.check_same_shape(speech, "permutation map")?;
    speech_estimate.check_same_shape(noise, "permutation map")?;
    let corr = |a: &ComplexSpectrogram, b: &ComplexSpectrogram, f: usize| {
        let mut num = num_complex::Complex64::new(0.0, 0.0);
        let (mut ea, mut eb) = (0.0, 0.0);
        for t in 0..a.frames() {
            num += a.get(t, f) * b.get(t, f).conj();
            ea += a.get(t, f).norm_sqr();
            eb += b.get(t, f).norm_sqr();
        }
        if ea > 0.0 && eb > 0.0 {
            num.norm() / (ea * eb).sqrt()
        } else {
            0.0
        }
    };
    Ok((0..speech.bins())
        .map(|f| corr(speech_estimate, noise, f) > corr(speech_estimate, speech, f))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceMetrics {
    pub id: String,
    pub si_sdr_db: f64,
    pub sdr_db: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub utterances: Vec<UtteranceMetrics>,
    pub mean_si_sdr_db: f64,
    pub mean_sdr_db: f64,
}

impl MetricReport {
    pub fn from_utterances(utterances: Vec<UtteranceMetrics>) -> Result<Self> {
        if utterances.is_empty() {
            return Err(Error::EmptyPool("metric report has no utterances"));
        }
        let n = utterances.len() as f64;
        let mean_si_sdr_db = utterances.iter().map(|u| u.si_sdr_db).sum::<f64>() / n;
        let mean_sdr_db = utterances.iter().map(|u| u.sdr_db).sum::<f64>() / n;
        Ok(Self {
            utterances,
            mean_si_sdr_db,
            mean_sdr_db,
        })
    }

    pub fn evaluate(id: impl Into<String>, reference: &[f64], estimate: &[f64]) -> Result<UtteranceMetrics> {
        Ok(UtteranceMetrics {
            id: id.into(),
            si_sdr_db: si_sdr(reference, estimate)?,
            sdr_db: sdr(reference, estimate)?,
        })
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("id\tsi_sdr_db\tsdr_db\n");
        for u in &self.utterances {
            out.push_str(&format!("{}\t{:.6}\t{:.6}\n", u.id, u.si_sdr_db, u.sdr_db));
        }
        out.push_str(&format!(
            "mean\t{:.6}\t{:.6}\n",
            self.mean_si_sdr_db, self.mean_sdr_db
        ));
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}
