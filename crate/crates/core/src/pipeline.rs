//! End-to-end commands behind the `m2m` binary.
//!
//! Each command is a plain function over paths so it can be driven from
//! tests as well as from the CLI.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::Estimator;
use crate::io::binary::{write_checkpoint, write_filters, write_spectrograms, Checkpoint};
use crate::io::config::{SimulateConfig, TrainSettings};
use crate::io::manifest::{read_manifest, write_manifest, ManifestRecord, Role, Split, TruthPaths};
use crate::io::wav::{read_wav, write_wav, Audio};
use crate::metrics::{speaker_reinforce, MetricReport};
use crate::simulate::{generate_scene, toy_scene_spec, SceneSpec, SceneTruth};
use crate::spectral::{istft, stft, ComplexSpectrogram, StftConfig};
use crate::trainer::{
    EpochRecord, RealExample, SimulatedExample, StepRecord, TrainEvent, Trainer, TrainingData,
};

/// JSON sidecar stored next to every simulated scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSidecar {
    pub id: String,
    pub role: Role,
    pub split: Split,
    pub spec: SceneSpec,
}

/// What `simulate` produced.
#[derive(Debug, Clone)]
pub struct SimulateSummary {
    pub manifest: PathBuf,
    pub test_manifest: PathBuf,
    pub records: Vec<ManifestRecord>,
    pub test_records: Vec<ManifestRecord>,
}

fn signals(specs: &[ComplexSpectrogram]) -> Result<Vec<Vec<f64>>> {
    specs.iter().map(istft).collect()
}

fn write_scene(
    out: &Path,
    id: &str,
    role: Role,
    split: Split,
    truth: &SceneTruth,
    closetalk: bool,
) -> Result<ManifestRecord> {
    let rel = PathBuf::from("scenes").join(id);
    let dir = out.join(&rel);
    fs::create_dir_all(&dir)?;
    let rate = truth.spec.stft.sample_rate_hz;

    write_wav(dir.join("farfield.wav"), &signals(&truth.farfield)?, rate)?;
    if closetalk {
        write_wav(dir.join("closetalk.wav"), &[istft(&truth.closetalk)?], rate)?;
    }
    let with_truth = role == Role::Simulated;
    if with_truth {
        write_wav(dir.join("speech.wav"), &[istft(&truth.speech)?], rate)?;
        write_wav(dir.join("noise.wav"), &signals(&truth.noise_images)?, rate)?;
    }

    let mut named: Vec<(String, &ComplexSpectrogram)> = vec![
        ("speech".into(), &truth.speech),
        ("noise".into(), &truth.noise),
        ("closetalk".into(), &truth.closetalk),
    ];
    named.extend(truth.farfield.iter().enumerate().map(|(p, y)| (format!("farfield{p}"), y)));
    let refs: Vec<(&str, &ComplexSpectrogram)> = named.iter().map(|(n, s)| (n.as_str(), *s)).collect();
    write_spectrograms(dir.join("scene.m2mscn"), &refs)?;

    let mut filters = Vec::new();
    if let Some(g) = &truth.reverb_filter {
        filters.push(("reverb".to_string(), g));
    }
    for (p, (h, r)) in truth.speech_filters.iter().zip(&truth.noise_filters).enumerate() {
        if let (Some(h), Some(r)) = (h, r) {
            filters.push((format!("speech{p}"), h));
            filters.push((format!("noise{p}"), r));
        }
    }
    filters.push(("closetalk_speech".into(), &truth.closetalk_speech_filter));
    filters.push(("closetalk_noise".into(), &truth.closetalk_noise_filter));
    let refs: Vec<_> = filters.iter().map(|(n, f)| (n.as_str(), *f)).collect();
    write_filters(dir.join("filters.m2mflt"), &refs)?;

    let sidecar = SceneSidecar {
        id: id.to_string(),
        role,
        split,
        spec: truth.spec.clone(),
    };
    fs::write(dir.join("scene.json"), serde_json::to_string(&sidecar)?)?;

    Ok(ManifestRecord {
        id: id.to_string(),
        role,
        split,
        farfield: vec![rel.join("farfield.wav")],
        ref_mic: truth.spec.ref_mic,
        closetalk: closetalk.then(|| rel.join("closetalk.wav")),
        truth: with_truth.then(|| TruthPaths {
            speech: rel.join("speech.wav"),
            noise: rel.join("noise.wav"),
        }),
    })
}

/// Generates seeded toy scenes under `out/scenes/` and writes
/// `manifest.jsonl` (training and validation) and `test.jsonl` (held-out
/// scenes with truth).
pub fn cmd_simulate(cfg: &SimulateConfig, out: &Path) -> Result<SimulateSummary> {
    cfg.validate()?;
    fs::create_dir_all(out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let groups = [
        ("real", Role::Real, Split::Train, cfg.num_real),
        ("simu", Role::Simulated, Split::Train, cfg.num_simulated),
        ("vreal", Role::Real, Split::Validation, cfg.num_validation_real),
        ("vsimu", Role::Simulated, Split::Validation, cfg.num_validation_simulated),
        ("test", Role::Simulated, Split::Test, cfg.num_test),
    ];
    let mut records = Vec::new();
    let mut test_records = Vec::new();
    for (prefix, role, split, count) in groups {
        for i in 0..count {
            let scene_seed: u64 = rng.gen();
            let truth = generate_scene(&toy_scene_spec(&cfg.scene, scene_seed))?;
            let id = format!("{prefix}-{i:03}");
            let closetalk = (cfg.closetalk && role == Role::Real) || split == Split::Test;
            let record = write_scene(out, &id, role, split, &truth, closetalk)?;
            if split == Split::Test {
                test_records.push(record);
            } else {
                records.push(record);
            }
        }
    }
    let manifest = out.join("manifest.jsonl");
    let test_manifest = out.join("test.jsonl");
    write_manifest(&manifest, &records)?;
    write_manifest(&test_manifest, &test_records)?;
    Ok(SimulateSummary {
        manifest,
        test_manifest,
        records,
        test_records,
    })
}

/// Reads every far-field file of a record and concatenates the channels.
fn read_farfield(record: &ManifestRecord) -> Result<Audio> {
    let mut channels = Vec::new();
    let mut rate = None;
    for path in &record.farfield {
        let audio = read_wav(path)?;
        match rate {
            Some(r) if r != audio.sample_rate_hz => {
                return Err(Error::SampleRate {
                    expected: r,
                    found: audio.sample_rate_hz,
                })
            }
            _ => rate = Some(audio.sample_rate_hz),
        }
        channels.extend(audio.channels);
    }
    let n = channels.first().map_or(0, Vec::len);
    if channels.iter().any(|c| c.len() != n) {
        return Err(Error::ShapeMismatch(format!("{}: far-field files differ in length", record.id)));
    }
    if record.ref_mic >= channels.len() {
        return Err(Error::InvalidConfig(format!(
            "{}: ref_mic {} but only {} channels",
            record.id,
            record.ref_mic,
            channels.len()
        )));
    }
    Ok(Audio {
        sample_rate_hz: rate.unwrap_or(0),
        channels,
    })
}

fn read_aligned(path: &Path, cfg: &StftConfig, samples: usize) -> Result<Vec<ComplexSpectrogram>> {
    let audio = read_wav(path)?;
    if audio.sample_rate_hz != cfg.sample_rate_hz {
        return Err(Error::SampleRate {
            expected: cfg.sample_rate_hz,
            found: audio.sample_rate_hz,
        });
    }
    if audio.num_samples() != samples {
        return Err(Error::ShapeMismatch(format!(
            "{}: {} samples, expected {samples}",
            path.display(),
            audio.num_samples()
        )));
    }
    audio.channels.iter().map(|c| stft(c, cfg)).collect()
}

/// 32 ms window with 8 ms hop at the given rate.
pub fn default_stft(sample_rate_hz: u32) -> Result<StftConfig> {
    StftConfig::from_millis(sample_rate_hz, 32.0, 8.0)
}

/// Loads the training and validation records of a manifest. Test records
/// are skipped.
pub fn load_training_data(
    records: &[ManifestRecord],
    stft_cfg: Option<StftConfig>,
) -> Result<(TrainingData, StftConfig)> {
    let mut data = TrainingData::default();
    let mut cfg = stft_cfg;
    for record in records.iter().filter(|r| r.split != Split::Test) {
        let audio = read_farfield(record)?;
        let cfg = match cfg {
            Some(c) => c,
            None => *cfg.insert(default_stft(audio.sample_rate_hz)?),
        };
        if audio.sample_rate_hz != cfg.sample_rate_hz {
            return Err(Error::SampleRate {
                expected: cfg.sample_rate_hz,
                found: audio.sample_rate_hz,
            });
        }
        let samples = audio.num_samples();
        let farfield = audio
            .channels
            .iter()
            .map(|c| stft(c, &cfg))
            .collect::<Result<Vec<_>>>()?;
        let validation = record.split == Split::Validation;
        match (&record.role, &record.truth) {
            (Role::Real, _) => {
                let closetalk = match &record.closetalk {
                    Some(p) => Some(read_aligned(p, &cfg, samples)?.swap_remove(0)),
                    None => None,
                };
                let ex = RealExample {
                    id: record.id.clone(),
                    farfield,
                    ref_mic: record.ref_mic,
                    closetalk,
                };
                if validation { &mut data.validation_real } else { &mut data.real }.push(ex);
            }
            (Role::Simulated, Some(truth)) => {
                let speech = read_aligned(&truth.speech, &cfg, samples)?.swap_remove(0);
                let noise = read_aligned(&truth.noise, &cfg, samples)?;
                if noise.len() != 1 && noise.len() != farfield.len() {
                    return Err(Error::ChannelMismatch {
                        expected: farfield.len(),
                        found: noise.len(),
                    });
                }
                let ex = SimulatedExample {
                    id: record.id.clone(),
                    farfield,
                    ref_mic: record.ref_mic,
                    speech,
                    noise,
                };
                if validation { &mut data.validation_simulated } else { &mut data.simulated }.push(ex);
            }
            (Role::Simulated, None) => {
                return Err(Error::Manifest {
                    line: 0,
                    reason: format!("{}: simulated record without truth", record.id),
                })
            }
        }
    }
    let cfg = cfg.ok_or(Error::EmptyPool("manifest has no training records"))?;
    Ok((data, cfg))
}

/// What `train` produced.
#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub steps: u64,
    pub final_checkpoint: PathBuf,
    pub train_log: PathBuf,
    pub validation_log: PathBuf,
}

/// Trains on a manifest and writes `train_log.tsv`, `validation_log.tsv`,
/// `train_config.txt`, periodic `checkpoint-<step>.m2mckp` files and
/// `final.m2mckp` under `out`.
pub fn cmd_train(
    manifest: &Path,
    settings: &TrainSettings,
    out: &Path,
    seed: Option<u64>,
) -> Result<TrainSummary> {
    let mut settings = settings.clone();
    if let Some(s) = seed {
        settings.train.seed = s;
    }
    let records = read_manifest(manifest)?;
    let (data, stft_cfg) = load_training_data(&records, settings.stft)?;
    settings.stft = Some(stft_cfg);
    let layout = data.layout()?;

    fs::create_dir_all(out)?;
    fs::write(out.join("train_config.txt"), settings.to_text())?;
    let train_log = out.join("train_log.tsv");
    let validation_log = out.join("validation_log.tsv");
    let mut steps_out = BufWriter::new(File::create(&train_log)?);
    let mut epochs_out = BufWriter::new(File::create(&validation_log)?);
    writeln!(steps_out, "{}", StepRecord::TSV_HEADER)?;
    writeln!(epochs_out, "{}", EpochRecord::TSV_HEADER)?;

    let mut trainer = Trainer::new(settings.train.clone(), &data)?;
    let input_mics = trainer.input_mics().to_vec();
    let checkpoint_for = |estimator: &Estimator| Checkpoint {
        estimator: estimator.clone(),
        stft: stft_cfg,
        num_far_mics: layout.num_far_mics,
        ref_mic: layout.ref_mic,
        input_mics: input_mics.clone(),
    };
    let every = settings.checkpoint_every;
    trainer.run(|event, estimator| {
        match event {
            TrainEvent::Step(record) => {
                writeln!(steps_out, "{}", record.to_tsv())?;
                let done = record.step + 1;
                if every > 0 && done % every == 0 {
                    write_checkpoint(out.join(format!("checkpoint-{done:06}.m2mckp")), &checkpoint_for(estimator))?;
                }
            }
            TrainEvent::Epoch(record) => writeln!(epochs_out, "{}", record.to_tsv())?,
        }
        Ok(())
    })?;
    steps_out.flush()?;
    epochs_out.flush()?;

    let final_checkpoint = out.join("final.m2mckp");
    write_checkpoint(&final_checkpoint, &checkpoint_for(trainer.estimator()))?;
    Ok(TrainSummary {
        steps: trainer.steps_taken(),
        final_checkpoint,
        train_log,
        validation_log,
    })
}

/// Enhanced reference-microphone signal for one far-field recording.
///
/// `channels` holds either the full far-field array the checkpoint was
/// trained on or exactly its input microphones in checkpoint order.
/// `reinforce_db` remixes the reference mixture at that speech-to-mixture
/// energy ratio.
pub fn enhance_channels(
    ckpt: &Checkpoint,
    channels: &[Vec<f64>],
    sample_rate_hz: u32,
    reinforce_db: Option<f64>,
) -> Result<Vec<f64>> {
    if sample_rate_hz != ckpt.stft.sample_rate_hz {
        return Err(Error::SampleRate {
            expected: ckpt.stft.sample_rate_hz,
            found: sample_rate_hz,
        });
    }
    let (inputs, reference): (Vec<&Vec<f64>>, &Vec<f64>) = if channels.len() == ckpt.num_far_mics {
        (ckpt.input_mics.iter().map(|&m| &channels[m]).collect(), &channels[ckpt.ref_mic])
    } else if channels.len() == ckpt.input_mics.len() {
        let pos = ckpt
            .input_mics
            .iter()
            .position(|&m| m == ckpt.ref_mic)
            .ok_or_else(|| Error::InvalidConfig("checkpoint inputs omit the reference mic".into()))?;
        (channels.iter().collect(), &channels[pos])
    } else {
        return Err(Error::ChannelMismatch {
            expected: ckpt.input_mics.len(),
            found: channels.len(),
        });
    };
    let specs = inputs
        .iter()
        .map(|c| stft(c, &ckpt.stft))
        .collect::<Result<Vec<_>>>()?;
    if let Estimator::FreeVariable(fv) = &ckpt.estimator {
        if fv.frames() != specs[0].frames() {
            return Err(Error::ShapeMismatch(format!(
                "free-variable checkpoint holds {} frames, input has {}",
                fv.frames(),
                specs[0].frames()
            )));
        }
    }
    let estimate = ckpt.estimator.forward(&specs)?;
    let mut speech = istft(&estimate.speech)?;
    speech.resize(reference.len(), 0.0);
    match reinforce_db {
        Some(gamma) => speaker_reinforce(&speech, reference, gamma),
        None => Ok(speech),
    }
}

/// Enhances one recording given as one or more WAV files whose channels are
/// concatenated; writes a single-channel WAV with the same sample count.
pub fn cmd_enhance(ckpt: &Checkpoint, inputs: &[PathBuf], out: &Path, reinforce_db: Option<f64>) -> Result<()> {
    let mut channels = Vec::new();
    let mut rate = ckpt.stft.sample_rate_hz;
    for path in inputs {
        let audio = read_wav(path)?;
        rate = audio.sample_rate_hz;
        channels.extend(audio.channels);
    }
    let enhanced = enhance_channels(ckpt, &channels, rate, reinforce_db)?;
    if let Some(dir) = out.parent() {
        fs::create_dir_all(dir)?;
    }
    write_wav(out, &[enhanced], rate)
}

/// Enhances every record of a manifest into `out_dir/<id>.wav`.
pub fn cmd_enhance_manifest(
    ckpt: &Checkpoint,
    manifest: &Path,
    out_dir: &Path,
    reinforce_db: Option<f64>,
) -> Result<Vec<PathBuf>> {
    let records = read_manifest(manifest)?;
    if records.is_empty() {
        return Err(Error::EmptyPool("manifest has no records"));
    }
    fs::create_dir_all(out_dir)?;
    records
        .iter()
        .map(|r| {
            let out = out_dir.join(format!("{}.wav", r.id));
            cmd_enhance(ckpt, &r.farfield, &out, reinforce_db)?;
            Ok(out)
        })
        .collect()
}

/// Scores `enhanced_dir/<id>.wav` against the truth speech of every record
/// that has one; writes `report.tsv` and `report.json` under `out`.
pub fn cmd_evaluate(manifest: &Path, enhanced_dir: &Path, out: &Path) -> Result<MetricReport> {
    let records = read_manifest(manifest)?;
    let mut rows = Vec::new();
    for record in &records {
        let Some(truth) = &record.truth else { continue };
        let reference = read_wav(&truth.speech)?.channels.swap_remove(0);
        let audio = read_wav(enhanced_dir.join(format!("{}.wav", record.id)))?;
        if audio.channels.len() != 1 {
            return Err(Error::ChannelMismatch {
                expected: 1,
                found: audio.channels.len(),
            });
        }
        rows.push(MetricReport::evaluate(&record.id, &reference, &audio.channels[0])?);
    }
    if rows.is_empty() {
        return Err(Error::EmptyPool("manifest has no records with truth"));
    }
    let report = MetricReport::from_utterances(rows)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("report.tsv"), report.to_tsv())?;
    fs::write(out.join("report.json"), report.to_json()?)?;
    Ok(report)
}
