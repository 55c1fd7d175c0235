use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use m2m_core::io::{read_checkpoint, read_manifest, read_wav};
use m2m_core::pipeline::enhance_channels;
use m2m_core::{si_sdr, speaker_reinforce};

const SIM: &str = "\
# four training scenes, two held out
num_real = 2
num_simulated = 2
num_validation_real = 0
num_validation_simulated = 0
num_test = 2
seconds = 0.5
";

const TRAIN: &str = "\
max_steps = 4
steps_per_epoch = 2
hidden = 8
lr0 = 3e-3
taps.farfield_speech_past = 2
taps.farfield_noise_past = 2
taps.closetalk_speech_past = 3
taps.closetalk_noise_past = 2
checkpoint_every = 2
";

fn m2m(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_m2m"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = m2m(args);
    assert!(
        out.status.success(),
        "m2m {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails(args: &[&str]) -> String {
    let out = m2m(args);
    assert!(!out.status.success(), "m2m {args:?} should fail");
    String::from_utf8(out.stderr).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

fn simulate(dir: &Path, seed: &str) -> PathBuf {
    let cfg = write(dir, "sim.cfg", SIM);
    let out = dir.join(format!("data-{seed}"));
    ok(&["simulate", "--config", s(&cfg), "--out", s(&out), "--seed", seed]);
    out
}

/// Writes a manifest holding only the records that pass `keep`.
fn filtered_manifest(data: &Path, name: &str, keep: impl Fn(&str) -> bool) -> PathBuf {
    let text: String = fs::read_to_string(data.join("manifest.jsonl"))
        .unwrap()
        .lines()
        .filter(|l| keep(l))
        .map(|l| format!("{l}\n"))
        .collect();
    write(data, name, &text)
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn log_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split('\t').map(str::to_string).collect())
        .collect()
}

#[test]
fn simulate_is_byte_identical_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let a = simulate(dir.path(), "3");
    let b_dir = dir.path().join("again");
    fs::create_dir(&b_dir).unwrap();
    let b = simulate(&b_dir, "3");
    let c = simulate(dir.path(), "4");
    assert_eq!(tree(&a), tree(&b));
    assert_ne!(tree(&a), tree(&c));
    let records = read_manifest(a.join("manifest.jsonl")).unwrap();
    assert_eq!(records.len(), 4);
    assert!(records.iter().all(|r| r.farfield[0].exists()));
}

#[test]
fn real_only_without_closetalk_trains_far_field_terms_only() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate(dir.path(), "1");
    let manifest = filtered_manifest(&data, "real.jsonl", |l| l.contains("\"role\":\"real\""));
    let text = fs::read_to_string(&manifest)
        .unwrap()
        .lines()
        .map(|l| l.split(",\"closetalk\"").next().unwrap().to_string() + "}\n")
        .collect::<String>();
    fs::write(&manifest, text).unwrap();
    let cfg = write(dir.path(), "train.cfg", TRAIN);
    let out = dir.path().join("run");
    ok(&["train", "--manifest", s(&manifest), "--config", s(&cfg), "--out", s(&out)]);
    let rows = log_rows(&out.join("train_log.tsv"));
    assert_eq!(rows.len(), 4);
    for row in &rows {
        assert_eq!(row[2], "real");
        assert_ne!(row[3], "-");
        assert_eq!(row[5], "-", "close-talk term must be absent");
        assert_eq!(row[6], "-");
    }
    assert!(out.join("checkpoint-000002.m2mckp").exists());
    assert!(out.join("checkpoint-000004.m2mckp").exists());
    assert_eq!(log_rows(&out.join("validation_log.tsv")).len(), 2);
}

#[test]
fn simulated_only_trains_supervised_every_step() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate(dir.path(), "2");
    let manifest = filtered_manifest(&data, "simu.jsonl", |l| l.contains("\"role\":\"simulated\""));
    let cfg = write(dir.path(), "train.cfg", TRAIN);
    let out = dir.path().join("run");
    ok(&["train", "--manifest", s(&manifest), "--config", s(&cfg), "--out", s(&out)]);
    for row in log_rows(&out.join("train_log.tsv")) {
        assert_eq!(row[2], "simu");
        assert_eq!(row[3], "-");
        assert_ne!(row[6], "-");
    }
}

#[test]
fn enhance_evaluate_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate(dir.path(), "5");
    let cfg = write(dir.path(), "train.cfg", TRAIN);
    let run = dir.path().join("run");
    ok(&[
        "train",
        "--manifest",
        s(&data.join("manifest.jsonl")),
        "--config",
        s(&cfg),
        "--out",
        s(&run),
    ]);
    let ckpt_path = run.join("final.m2mckp");
    let ckpt = read_checkpoint(&ckpt_path).unwrap();
    let test = data.join("test.jsonl");
    let record = &read_manifest(&test).unwrap()[0];
    let input = s(&record.farfield[0]);

    let plain = dir.path().join("plain.wav");
    let mixed = dir.path().join("mixed.wav");
    ok(&["enhance", "--checkpoint", s(&ckpt_path), "--input", input, "--out", s(&plain)]);
    ok(&[
        "enhance",
        "--checkpoint",
        s(&ckpt_path),
        "--input",
        input,
        "--out",
        s(&mixed),
        "--reinforce-db",
        "10",
    ]);
    let y = read_wav(&record.farfield[0]).unwrap();
    let plain = read_wav(&plain).unwrap();
    let mixed = read_wav(&mixed).unwrap();
    assert_eq!(plain.num_samples(), y.num_samples());
    assert_eq!(mixed.num_samples(), y.num_samples());

    // reinforcement of the in-memory estimate is exact; the file adds f32 rounding
    let est = enhance_channels(&ckpt, &y.channels, y.sample_rate_hz, None).unwrap();
    let expected = speaker_reinforce(&est, &y.channels[ckpt.ref_mic], 10.0).unwrap();
    let direct = enhance_channels(&ckpt, &y.channels, y.sample_rate_hz, Some(10.0)).unwrap();
    assert_eq!(direct, expected);
    for (a, b) in mixed.channels[0].iter().zip(&expected) {
        assert!((a - b).abs() <= 1e-6 * (1.0 + b.abs()));
    }

    let enhanced = dir.path().join("enhanced");
    ok(&[
        "enhance",
        "--checkpoint",
        s(&ckpt_path),
        "--manifest",
        s(&test),
        "--out",
        s(&enhanced),
    ]);
    let report_dir = dir.path().join("report");
    let stdout = ok(&[
        "evaluate",
        "--manifest",
        s(&test),
        "--enhanced",
        s(&enhanced),
        "--out",
        s(&report_dir),
    ]);
    assert!(stdout.contains("2 utterances"));
    let tsv = fs::read_to_string(report_dir.join("report.tsv")).unwrap();
    assert_eq!(tsv.lines().count(), 4);
    assert!(report_dir.join("report.json").exists());
}

#[test]
fn evaluate_against_mixtures_matches_direct_metric() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate(dir.path(), "6");
    let test = data.join("test.jsonl");
    let records = read_manifest(&test).unwrap();
    let mixtures = dir.path().join("mix");
    let copies = dir.path().join("copies");
    fs::create_dir_all(&mixtures).unwrap();
    fs::create_dir_all(&copies).unwrap();
    let mut expected = Vec::new();
    for r in &records {
        let y = read_wav(&r.farfield[0]).unwrap();
        let truth = r.truth.as_ref().unwrap();
        let reference = read_wav(&truth.speech).unwrap().channels.remove(0);
        let reference_mix = y.channels[r.ref_mic].clone();
        expected.push(si_sdr(&reference, &reference_mix).unwrap());
        m2m_core::io::write_wav(mixtures.join(format!("{}.wav", r.id)), &[reference_mix], y.sample_rate_hz)
            .unwrap();
        fs::copy(&truth.speech, copies.join(format!("{}.wav", r.id))).unwrap();
    }
    let out = dir.path().join("r1");
    ok(&["evaluate", "--manifest", s(&test), "--enhanced", s(&mixtures), "--out", s(&out)]);
    let json = fs::read_to_string(out.join("report.json")).unwrap();
    let report = m2m_core::MetricReport::from_json(&json).unwrap();
    for (u, e) in report.utterances.iter().zip(&expected) {
        assert_eq!(u.si_sdr_db, *e);
    }

    let out = dir.path().join("r2");
    ok(&["evaluate", "--manifest", s(&test), "--enhanced", s(&copies), "--out", s(&out)]);
    let report = m2m_core::MetricReport::from_json(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert!(report.utterances.iter().all(|u| u.si_sdr_db == 60.0 && u.sdr_db == 60.0));
}

#[test]
fn errors_exit_nonzero_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let empty = write(dir.path(), "empty.jsonl", "");
    let err = fails(&["evaluate", "--manifest", s(&empty), "--enhanced", s(dir.path()), "--out", s(dir.path())]);
    assert!(err.contains("empty pool"), "{err}");

    let bad_cfg = write(dir.path(), "bad.cfg", "learning_rate = 1\n");
    let err = fails(&["simulate", "--config", s(&bad_cfg), "--out", s(dir.path())]);
    assert!(err.contains("unknown key learning_rate"), "{err}");

    let corrupt = write(dir.path(), "corrupt.m2mckp", "M2MCKP1garbage");
    let err = fails(&["enhance", "--checkpoint", s(&corrupt), "--input", "x.wav", "--out", "y.wav"]);
    assert!(err.contains("bad file format"), "{err}");

    let bad_manifest = write(
        dir.path(),
        "bad.jsonl",
        "{\"id\":\"a\",\"role\":\"real\",\"farfield\":[\"a.wav\"],\"ref_mic\":0,\"truth\":{\"speech\":\"s.wav\",\"noise\":\"n.wav\"}}\n",
    );
    let err = fails(&["train", "--manifest", s(&bad_manifest), "--out", s(&dir.path().join("run"))]);
    assert!(err.contains("line 1"), "{err}");
}

#[test]
fn enhance_rejects_channel_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate(dir.path(), "8");
    let cfg = write(dir.path(), "train.cfg", &TRAIN.replace("max_steps = 4", "max_steps = 1"));
    let run = dir.path().join("run");
    ok(&["train", "--manifest", s(&data.join("manifest.jsonl")), "--config", s(&cfg), "--out", s(&run)]);
    let record = &read_manifest(data.join("test.jsonl")).unwrap()[0];
    let speech = record.truth.as_ref().unwrap().speech.clone();
    let err = fails(&[
        "enhance",
        "--checkpoint",
        s(&run.join("final.m2mckp")),
        "--input",
        s(&speech),
        "--out",
        s(&dir.path().join("o.wav")),
    ]);
    assert!(err.contains("expected 4 input channels, found 1"), "{err}");
}
