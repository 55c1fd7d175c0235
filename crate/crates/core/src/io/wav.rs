//! Multichannel WAV read/write. Output is always 32-bit float; input may be
//! float or integer PCM.

use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use crate::error::{Error, Result};

/// Deinterleaved audio.
#[derive(Debug, Clone, PartialEq)]
pub struct Audio {
    pub sample_rate_hz: u32,
    pub channels: Vec<Vec<f64>>,
}

impl Audio {
    pub fn num_samples(&self) -> usize {
        self.channels.first().map_or(0, Vec::len)
    }
}

fn wav_err(path: &Path) -> impl FnOnce(hound::Error) -> Error + '_ {
    move |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    }
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<Audio> {
    let path = path.as_ref();
    let mut reader = WavReader::open(path).map_err(wav_err(path))?;
    let spec = reader.spec();
    let n_ch = spec.channels as usize;
    let interleaved: Vec<f64> = match spec.sample_format {
        SampleFormat::Float => reader
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<Result<_, _>>()
            .map_err(wav_err(path))?,
        SampleFormat::Int => {
            let scale = 1.0 / (1u64 << (spec.bits_per_sample - 1)) as f64;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f64 * scale))
                .collect::<Result<_, _>>()
                .map_err(wav_err(path))?
        }
    };
    if n_ch == 0 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: "zero channels".into(),
        });
    }
    let frames = interleaved.len() / n_ch;
    let channels = (0..n_ch)
        .map(|c| (0..frames).map(|i| interleaved[i * n_ch + c]).collect())
        .collect();
    Ok(Audio {
        sample_rate_hz: spec.sample_rate,
        channels,
    })
}

/// Writes `channels` (all the same length) as 32-bit float WAV.
pub fn write_wav(path: impl AsRef<Path>, channels: &[Vec<f64>], sample_rate_hz: u32) -> Result<()> {
    let path = path.as_ref();
    let len = channels.first().map_or(0, Vec::len);
    if channels.is_empty() || channels.iter().any(|c| c.len() != len) {
        return Err(Error::ShapeMismatch(format!(
            "{}: channels must be non-empty and equally long",
            path.display()
        )));
    }
    let spec = WavSpec {
        channels: channels.len() as u16,
        sample_rate: sample_rate_hz,
        bits_per_sample: 32,
        sample_format: SampleFormat::Float,
    };
    let mut writer = WavWriter::create(path, spec).map_err(wav_err(path))?;
    for i in 0..len {
        for ch in channels {
            writer.write_sample(ch[i] as f32).map_err(wav_err(path))?;
        }
    }
    writer.finalize().map_err(wav_err(path))
}
