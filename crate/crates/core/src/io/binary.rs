//! Versioned little-endian binary formats.
//!
//! Every file starts with a 7-byte magic that doubles as the version tag:
//!
//! - `M2MSCN1`: named bundle of complex spectrograms sharing one STFT config,
//!   values as f64 pairs.
//! - `M2MFLT1`: named filter banks, values as interleaved f32 pairs.
//! - `M2MCKP1`: estimator checkpoint with mode tag, microphone layout, shape
//!   header and f64 parameters. Round trips are bit-exact.
//!
//! Truncated files, trailing bytes and impossible headers are reported as
//! [`Error::Format`].

use std::fs;
use std::path::Path;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::estimator::{Estimator, EstimatorMode, FreeVariable, MaskNet};
use crate::fcp::{FilterBank, TapWindow};
use crate::spectral::{ComplexSpectrogram, StftConfig, Window};

const SCENE_MAGIC: &[u8; 7] = b"M2MSCN1";
const FILTER_MAGIC: &[u8; 7] = b"M2MFLT1";
const CHECKPOINT_MAGIC: &[u8; 7] = b"M2MCKP1";

/// Upper bound on any single element count read from a header, to fail
/// fast on garbage instead of attempting a huge allocation.
const MAX_COUNT: u64 = 1 << 32;

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn bytes(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b);
    }
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }
    fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }
    fn i64(&mut self, v: i64) {
        self.bytes(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.bytes(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes(s.as_bytes());
    }
    fn stft(&mut self, cfg: &StftConfig) {
        self.u32(cfg.sample_rate_hz);
        self.usize(cfg.win_len);
        self.usize(cfg.hop);
        self.usize(cfg.fft_size);
        self.u8(match cfg.window {
            Window::SqrtHann => 0,
        });
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], path: &'a Path, magic: &[u8; 7]) -> Result<Self> {
        let mut r = Self { buf, pos: 0, path };
        if r.take(7)? != magic {
            return Err(r.fail(format!(
                "expected magic {}",
                String::from_utf8_lossy(magic)
            )));
        }
        Ok(r)
    }

    fn fail(&self, reason: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| self.fail(format!("truncated at byte {}", self.pos)))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        self.array().map(u32::from_le_bytes)
    }
    fn u64(&mut self) -> Result<u64> {
        self.array().map(u64::from_le_bytes)
    }
    fn count(&mut self) -> Result<usize> {
        let v = self.u64()?;
        if v > MAX_COUNT {
            return Err(self.fail(format!("implausible count {v}")));
        }
        Ok(v as usize)
    }
    fn i64(&mut self) -> Result<i64> {
        self.array().map(i64::from_le_bytes)
    }
    fn f64(&mut self) -> Result<f64> {
        self.array().map(f64::from_le_bytes)
    }
    fn f32(&mut self) -> Result<f32> {
        self.array().map(f32::from_le_bytes)
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| self.fail("name is not UTF-8"))
    }
    fn stft(&mut self) -> Result<StftConfig> {
        let sample_rate_hz = self.u32()?;
        let win_len = self.count()?;
        let hop = self.count()?;
        let fft_size = self.count()?;
        let window = match self.u8()? {
            0 => Window::SqrtHann,
            t => return Err(self.fail(format!("unknown window tag {t}"))),
        };
        let cfg = StftConfig {
            sample_rate_hz,
            win_len,
            hop,
            window,
            fft_size,
        };
        cfg.validate().map_err(|e| self.fail(e.to_string()))?;
        Ok(cfg)
    }
    fn finish(self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(self.fail(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

/// Writes named spectrograms that share one STFT configuration.
pub fn write_spectrograms(path: impl AsRef<Path>, named: &[(&str, &ComplexSpectrogram)]) -> Result<()> {
    let Some((_, first)) = named.first() else {
        return Err(Error::InvalidConfig("nothing to write".into()));
    };
    let cfg = *first.config();
    let mut w = Writer::default();
    w.bytes(SCENE_MAGIC);
    w.stft(&cfg);
    w.u32(named.len() as u32);
    for (name, spec) in named {
        if *spec.config() != cfg {
            return Err(Error::ShapeMismatch(format!("{name}: STFT config differs")));
        }
        w.str(name);
        w.usize(spec.frames());
        w.usize(spec.num_samples());
        for c in spec.data() {
            w.f64(c.re);
            w.f64(c.im);
        }
    }
    fs::write(path, w.0)?;
    Ok(())
}

pub fn read_spectrograms(path: impl AsRef<Path>) -> Result<Vec<(String, ComplexSpectrogram)>> {
    let path = path.as_ref();
    let buf = fs::read(path)?;
    let mut r = Reader::new(&buf, path, SCENE_MAGIC)?;
    let cfg = r.stft()?;
    let n = r.u32()?;
    let mut out = Vec::with_capacity(n.min(1024) as usize);
    for _ in 0..n {
        let name = r.str()?;
        let frames = r.count()?;
        let num_samples = r.count()?;
        let len = frames * cfg.num_bins();
        if len * 16 > buf.len() {
            return Err(r.fail(format!("{name}: shape exceeds file size")));
        }
        let data = (0..len)
            .map(|_| Ok(Complex64::new(r.f64()?, r.f64()?)))
            .collect::<Result<Vec<_>>>()?;
        let spec = ComplexSpectrogram::from_data(frames, cfg, data, num_samples)
            .map_err(|e| r.fail(format!("{name}: {e}")))?;
        out.push((name, spec));
    }
    r.finish()?;
    Ok(out)
}

/// Writes named filter banks with single-precision taps.
pub fn write_filters(path: impl AsRef<Path>, named: &[(&str, &FilterBank)]) -> Result<()> {
    let mut w = Writer::default();
    w.bytes(FILTER_MAGIC);
    w.u32(named.len() as u32);
    for (name, bank) in named {
        let win = bank.window();
        w.str(name);
        w.usize(win.past);
        w.usize(win.future);
        w.i64(win.delay as i64);
        w.usize(bank.bins());
        for c in bank.taps() {
            w.f32(c.re as f32);
            w.f32(c.im as f32);
        }
    }
    fs::write(path, w.0)?;
    Ok(())
}

pub fn read_filters(path: impl AsRef<Path>) -> Result<Vec<(String, FilterBank)>> {
    let path = path.as_ref();
    let buf = fs::read(path)?;
    let mut r = Reader::new(&buf, path, FILTER_MAGIC)?;
    let n = r.u32()?;
    let mut out = Vec::with_capacity(n.min(1024) as usize);
    for _ in 0..n {
        let name = r.str()?;
        let past = r.count()?;
        let future = r.count()?;
        let delay = r.i64()? as isize;
        let bins = r.count()?;
        let window = TapWindow::new(past, future, delay);
        let len = bins * window.len();
        if len * 8 > buf.len() {
            return Err(r.fail(format!("{name}: shape exceeds file size")));
        }
        let taps = (0..len)
            .map(|_| Ok(Complex64::new(r.f32()? as f64, r.f32()? as f64)))
            .collect::<Result<Vec<_>>>()?;
        let bank = FilterBank::new(window, bins, taps).map_err(|e| r.fail(format!("{name}: {e}")))?;
        out.push((name, bank));
    }
    r.finish()?;
    Ok(out)
}

/// A trained estimator plus the microphone layout it was trained on.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub estimator: Estimator,
    pub stft: StftConfig,
    pub num_far_mics: usize,
    pub ref_mic: usize,
    /// Far-field channels fed to the estimator, in order.
    pub input_mics: Vec<usize>,
}

impl Checkpoint {
    fn validate(&self) -> std::result::Result<(), String> {
        if self.ref_mic >= self.num_far_mics {
            return Err("reference mic out of range".into());
        }
        if self.input_mics.iter().any(|&m| m >= self.num_far_mics) {
            return Err("input mic out of range".into());
        }
        match &self.estimator {
            Estimator::MaskNet(net) => {
                if net.input_mics() != self.input_mics.len() {
                    return Err("mask net input count differs from input mic list".into());
                }
                if net.bins() != self.stft.num_bins() {
                    return Err("mask net bins differ from STFT".into());
                }
            }
            Estimator::FreeVariable(fv) => {
                if *fv.stft() != self.stft {
                    return Err("free-variable STFT differs".into());
                }
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate().map_err(Error::InvalidConfig)?;
        let mut w = Writer::default();
        w.bytes(CHECKPOINT_MAGIC);
        w.u8(match self.estimator.mode() {
            EstimatorMode::FreeVariable => 0,
            EstimatorMode::MaskNet => 1,
        });
        w.stft(&self.stft);
        w.usize(self.num_far_mics);
        w.usize(self.ref_mic);
        w.usize(self.input_mics.len());
        for &m in &self.input_mics {
            w.usize(m);
        }
        match &self.estimator {
            Estimator::FreeVariable(fv) => {
                w.usize(fv.frames());
                w.usize(fv.num_samples());
            }
            Estimator::MaskNet(net) => {
                w.usize(net.input_mics());
                w.usize(net.reference_input());
                w.usize(net.bins());
                w.usize(net.hidden());
            }
        }
        let params = self.estimator.params();
        w.usize(params.len());
        for &p in params {
            w.f64(p);
        }
        Ok(w.0)
    }

    pub fn from_bytes(buf: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader::new(buf, path, CHECKPOINT_MAGIC)?;
        let tag = r.u8()?;
        let stft = r.stft()?;
        let num_far_mics = r.count()?;
        let ref_mic = r.count()?;
        let n_inputs = r.count()?;
        if n_inputs * 8 > buf.len() {
            return Err(r.fail("input mic list exceeds file size"));
        }
        let input_mics = (0..n_inputs).map(|_| r.count()).collect::<Result<Vec<_>>>()?;
        enum Shape {
            Free { frames: usize, num_samples: usize },
            Net { inputs: usize, reference: usize, bins: usize, hidden: usize },
        }
        let shape = match tag {
            0 => Shape::Free {
                frames: r.count()?,
                num_samples: r.count()?,
            },
            1 => Shape::Net {
                inputs: r.count()?,
                reference: r.count()?,
                bins: r.count()?,
                hidden: r.count()?,
            },
            t => return Err(r.fail(format!("unknown estimator tag {t}"))),
        };
        let n = r.count()?;
        if n * 8 > buf.len() {
            return Err(r.fail("parameter count exceeds file size"));
        }
        let params = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let estimator = match shape {
            Shape::Free { frames, num_samples } => {
                FreeVariable::from_params(frames, num_samples, stft, params).map(Estimator::FreeVariable)
            }
            Shape::Net {
                inputs,
                reference,
                bins,
                hidden,
            } => MaskNet::from_params(inputs, reference, bins, hidden, params).map(Estimator::MaskNet),
        }
        .map_err(|e| r.fail(e.to_string()))?;
        let ckpt = Self {
            estimator,
            stft,
            num_far_mics,
            ref_mic,
            input_mics,
        };
        ckpt.validate().map_err(|e| r.fail(e))?;
        r.finish()?;
        Ok(ckpt)
    }
}

pub fn write_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    fs::write(path, ckpt.to_bytes()?)?;
    Ok(())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    Checkpoint::from_bytes(&fs::read(path)?, path)
}
