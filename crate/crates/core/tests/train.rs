use std::fs;

use fpthd::checkpoint::{Checkpoint, OCR_MAGIC};
use fpthd::ocrnet::{Charset, ConvSpec, OcrConfig, OcrModel};
use fpthd::raster::Raster;
use fpthd::train::{resume_training, train_loop, LineSample, OptimizerKind, RunFiles, TrainConfig, TrainError, LOG_HEADER};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_model() -> OcrModel {
    let config = OcrConfig {
        input_height: 8,
        input_width: 64,
        projection: 8,
        token_dim: 8,
        blocks: 1,
        heads: 2,
        ff_mult: 2,
        extractor: vec![ConvSpec::new(4, (3, 5), (2, 4), (1, 2)), ConvSpec::new(8, (4, 3), (1, 2), (0, 1))],
    };
    OcrModel::new(config, Charset::new(vec!['a', 'b', 'c']).unwrap(), 7).unwrap()
}

fn tiny_config(optimizer: OptimizerKind) -> TrainConfig {
    TrainConfig {
        max_lr: 1e-2,
        train_batch: 3,
        image_width: 64,
        image_height: 8,
        total_iterations: 250,
        optimizer,
        seed: 42,
        ..TrainConfig::default()
    }
}

fn samples(n: usize, seed: u64) -> Vec<LineSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let w = rng.gen_range(24..64);
            let text: String = (0..rng.gen_range(1..4)).map(|_| ['a', 'b', 'c'][rng.gen_range(0..3)]).collect();
            let image = Raster::from_vec(w, 8, (0..w * 8).map(|_| rng.gen_range(0.0f32..1.0)).collect());
            LineSample { id: format!("line{i}.png"), image, background: 1.0, text }
        })
        .collect()
}

fn files(dir: &tempfile::TempDir, name: &str) -> RunFiles {
    RunFiles { checkpoint: dir.path().join(format!("{name}.ckpt")), log: dir.path().join(format!("{name}.csv")) }
}

#[test]
fn zero_iterations_returns_initial_model() {
    let dir = tempfile::tempdir().unwrap();
    let f = files(&dir, "zero");
    let model = tiny_model();
    let cfg = TrainConfig { total_iterations: 0, ..tiny_config(OptimizerKind::Sgd) };
    let out = train_loop(model.clone(), &samples(6, 1), &samples(2, 2), &cfg, Some(&f)).unwrap();
    assert_eq!(out.model, model);
    assert!(out.log.is_empty());
    assert_eq!(fs::read_to_string(&f.log).unwrap(), format!("{LOG_HEADER}\n"));
    let saved = OcrModel::from_checkpoint(&Checkpoint::load(&f.checkpoint, OCR_MAGIC).unwrap()).unwrap();
    assert_eq!(saved, model);
}

#[test]
fn log_has_one_row_per_validation_event() {
    let dir = tempfile::tempdir().unwrap();
    let f = files(&dir, "run");
    let out = train_loop(tiny_model(), &samples(6, 1), &samples(2, 2), &tiny_config(OptimizerKind::Sgd), Some(&f)).unwrap();
    let iterations: Vec<u64> = out.log.iter().map(|r| r.iteration).collect();
    assert_eq!(iterations, vec![100, 200, 250]);
    let csv = fs::read_to_string(&f.log).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], LOG_HEADER);
    assert_eq!(lines.len(), 4);
    assert_eq!(lines[3], out.log[2].to_csv());
    assert_eq!(out.log[2].lr, 1e-2 / 100.0);
    assert_ne!(out.model, tiny_model());
    assert!(out.best_cer.is_finite());
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    for optimizer in [OptimizerKind::Sgd, OptimizerKind::Adam] {
        let dir = tempfile::tempdir().unwrap();
        let (train, val) = (samples(6, 3), samples(2, 4));
        let cfg = tiny_config(optimizer);

        let whole = files(&dir, "whole");
        let a = train_loop(tiny_model(), &train, &val, &cfg, Some(&whole)).unwrap();

        let split = files(&dir, "split");
        let first = train_loop(tiny_model(), &train, &val, &TrainConfig { stop_at: Some(150), ..cfg.clone() }, Some(&split)).unwrap();
        assert_eq!(first.iteration, 150);
        let b = resume_training(&train, &val, &cfg, &split).unwrap();

        assert_eq!(b.iteration, 250);
        assert_eq!(a.model.params().checksum(), b.model.params().checksum());
        assert_eq!(fs::read(&whole.log).unwrap(), fs::read(&split.log).unwrap());
        assert_eq!(fs::read(&whole.checkpoint).unwrap(), fs::read(&split.checkpoint).unwrap());
    }
}

#[test]
fn identical_seeds_give_identical_logs() {
    let (train, val) = (samples(6, 5), samples(2, 6));
    let cfg = TrainConfig { total_iterations: 100, ..tiny_config(OptimizerKind::Adam) };
    let a = train_loop(tiny_model(), &train, &val, &cfg, None).unwrap();
    let b = train_loop(tiny_model(), &train, &val, &cfg, None).unwrap();
    assert_eq!(a.log, b.log);
    let c = train_loop(tiny_model(), &train, &val, &TrainConfig { seed: 43, ..cfg }, None).unwrap();
    assert_ne!(a.log, c.log);
}

#[test]
fn unseen_characters_are_reported_with_their_lines() {
    let mut val = samples(2, 2);
    val[1].text = "abz".into();
    val[1].id = "odd.png".into();
    let err = train_loop(tiny_model(), &samples(4, 1), &val, &tiny_config(OptimizerKind::Sgd), None).unwrap_err();
    match &err {
        TrainError::UnseenChars(items) => assert_eq!(items, &vec![('z', vec!["odd.png".to_string()])]),
        other => panic!("{other}"),
    }
    assert!(err.to_string().contains("'z' (in odd.png)"));
}

#[test]
fn divergence_halts_and_saves_state() {
    let dir = tempfile::tempdir().unwrap();
    let f = files(&dir, "nan");
    let mut model = tiny_model();
    let i = model.params().index_of("head.bias").unwrap();
    model.params_mut().get_mut(i).value.data_mut()[1] = f32::NAN;
    let err = train_loop(model, &samples(4, 1), &samples(2, 2), &tiny_config(OptimizerKind::Sgd), Some(&f)).unwrap_err();
    assert!(matches!(err, TrainError::DivergedAt { iteration: 0, .. }), "{err}");
    assert!(f.state().exists());
}

#[test]
fn empty_sets_and_mismatched_geometry_are_rejected() {
    let cfg = tiny_config(OptimizerKind::Sgd);
    assert!(matches!(train_loop(tiny_model(), &[], &samples(1, 1), &cfg, None), Err(TrainError::EmptySet(_))));
    let wide = TrainConfig { image_width: 512, ..cfg };
    assert!(matches!(train_loop(tiny_model(), &samples(2, 1), &samples(1, 1), &wide, None), Err(TrainError::Config(_))));
}
