use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use petbench::dataio::{gen_dataset, load_dataset, load_manifest, split_subjects, Split};
use petbench::eval::{evaluate, EvalOptions};
use petbench::net::{write_checkpoint, ModelKind};
use petbench::polarization::Modality;
use petbench::synthgen::{gen_session, sample_subject, GazeSampler, GenConfig};
use petbench::train::{train, write_log, TrainConfig};

fn small_config() -> GenConfig {
    GenConfig {
        n_subjects: 5,
        frames_per_subject: 40,
        calib_frames: 18,
        master_seed: 99,
        ..GenConfig::default()
    }
}

fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn generation_is_byte_identical_across_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = GenConfig {
        n_subjects: 3,
        frames_per_subject: 12,
        calib_frames: 9,
        ..small_config()
    };
    gen_dataset(&cfg, &tmp.path().join("a"), false).unwrap();
    gen_dataset(&cfg, &tmp.path().join("b"), false).unwrap();
    let a = tree(&tmp.path().join("a"));
    let b = tree(&tmp.path().join("b"));
    assert_eq!(a.len(), 1 + 3 * (12 + 9) * 2);
    assert!(a == b);
}

#[test]
fn manifest_labels_round_trip_exactly() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = GenConfig {
        n_subjects: 2,
        frames_per_subject: 25,
        calib_frames: 9,
        ..small_config()
    };
    gen_dataset(&cfg, tmp.path(), false).unwrap();
    let manifest = load_manifest(tmp.path()).unwrap();
    assert_eq!(manifest.config, cfg);
    for entry in &manifest.subjects {
        let subject = sample_subject(cfg.master_seed, entry.subject_id);
        let main = gen_session(&subject, cfg.frames_per_subject, GazeSampler::Uniform, &cfg).unwrap();
        for (record, frame) in entry.main.iter().zip(&main) {
            for (x, y) in record.label.0.iter().zip(frame.label.0.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }
}

fn toy_setup(dir: &Path) -> (petbench::dataio::Dataset, Split) {
    let manifest = gen_dataset(&small_config(), dir, false).unwrap();
    let split = split_subjects(&manifest, 0.6, 5).unwrap();
    let dataset = load_dataset(dir, &manifest, Modality::Polarization, None).unwrap();
    (dataset, split)
}

fn toy_train_config() -> TrainConfig {
    TrainConfig {
        steps: 200,
        batch_size: 16,
        eval_interval: 50,
        eval_subjects: 0,
        average_tail: 50,
        seed: 3,
        ..TrainConfig::default()
    }
}

#[test]
fn toy_training_reduces_loss_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (dataset, split) = toy_setup(tmp.path());
    let cfg = toy_train_config();
    let first = train(&cfg, &dataset, &split).unwrap();
    let steps: Vec<usize> = first.log.iter().map(|e| e.step).collect();
    assert_eq!(steps, vec![1, 50, 100, 150, 200]);
    let start = first.log[0].loss;
    let end = first.log.last().unwrap().loss;
    assert!(end < 0.8 * start, "loss {start} -> {end}");

    let second = train(&cfg, &dataset, &split).unwrap();
    assert_eq!(write_checkpoint(&first.params), write_checkpoint(&second.params));
    let la = tmp.path().join("a.jsonl");
    let lb = tmp.path().join("b.jsonl");
    write_log(&first.log, &la).unwrap();
    write_log(&second.log, &lb).unwrap();
    assert_eq!(fs::read(la).unwrap(), fs::read(lb).unwrap());
}

#[test]
fn trained_siamese_beats_untrained_on_test_subjects() {
    let tmp = tempfile::tempdir().unwrap();
    let (dataset, split) = toy_setup(tmp.path());
    let trained = train(&toy_train_config(), &dataset, &split).unwrap();
    let untrained = train(
        &TrainConfig {
            steps: 1,
            learning_rate: 1e-12,
            ..toy_train_config()
        },
        &dataset,
        &split,
    )
    .unwrap();
    let options = EvalOptions {
        model: ModelKind::Siamese,
        anchors: Some(9),
        linear_calib: false,
        modality: Modality::Polarization,
        seed: 1,
    };
    let a = evaluate(&trained.params, &dataset, &split.test, &options).unwrap();
    let b = evaluate(&untrained.params, &dataset, &split.test, &options).unwrap();
    assert!(a.p50 < b.p50, "trained {} untrained {}", a.p50, b.p50);
}

#[test]
fn oracle_differential_model_has_zero_error() {
    use petbench::eval::evaluate_differential;
    use petbench::personalize::OracleDifferential;
    let tmp = tempfile::tempdir().unwrap();
    let cfg = GenConfig {
        n_subjects: 3,
        frames_per_subject: 20,
        calib_frames: 12,
        ..small_config()
    };
    let manifest = gen_dataset(&cfg, tmp.path(), false).unwrap();
    let dataset = load_dataset(tmp.path(), &manifest, Modality::Intensity1, None).unwrap();
    let ids = dataset.ids();
    for c in [1, 3, 9] {
        for lc in [false, true] {
            let r = evaluate_differential(&OracleDifferential, &dataset, &ids, c, lc, 8).unwrap();
            assert!(r.p95 <= 1e-9, "C={c} lc={lc}: {}", r.p95);
            assert_eq!(r.n, 60);
        }
    }
}
