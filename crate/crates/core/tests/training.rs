use std::cell::RefCell;

use lbgan_core::dataset::{generate_synthetic_dataset, LoadedDataset, Split};
use lbgan_core::networks::EncoderConfig;
use lbgan_core::training::*;
use lbgan_core::Error;
use tempfile::TempDir;

fn tiny_config(s1: u64, s2: u64) -> TrainConfig {
    TrainConfig {
        stage1_iters: s1,
        stage2_iters: s2,
        batch_size: 4,
        network: EncoderConfig { image_size: 16, base_channels: 4, n_blocks: 2, bottleneck_dim: 8 },
        ..TrainConfig::desk()
    }
}

fn tiny_data() -> (TempDir, LoadedDataset<f64>) {
    let dir = TempDir::new().unwrap();
    generate_synthetic_dataset(3, 1, 16, Split::Train, dir.path()).unwrap();
    let data = LoadedDataset::load(dir.path()).unwrap();
    (dir, data)
}

/// Digests after every iteration, keyed by position.
fn trace(config: &TrainConfig, data: &LoadedDataset<f64>) -> (ModelBundle<f64>, Vec<(StepRecord, ParamDigests)>) {
    let seen = RefCell::new(Vec::new());
    let mut obs = |r: &StepRecord, b: &ModelBundle<f64>| seen.borrow_mut().push((r.clone(), b.digests()));
    let mut hooks = TrainHooks { observer: Some(&mut obs), ..TrainHooks::default() };
    let b = run_variant(config, data, &mut hooks).unwrap();
    drop(hooks);
    (b, seen.into_inner())
}

#[test]
fn stage_one_never_touches_the_editor_pair() {
    let (_d, data) = tiny_data();
    let cfg = tiny_config(6, 0);
    let start = ModelBundle::<f64>::new(cfg.clone(), 3).unwrap().digests();
    let (_, steps) = trace(&cfg, &data);
    let mut prev = start.clone();
    for (rec, dg) in steps.iter().filter(|(r, _)| r.stage == 1) {
        assert_eq!(dg.g_e, start.g_e, "iteration {}", rec.iteration);
        assert_eq!(dg.d_e, start.d_e, "iteration {}", rec.iteration);
        assert_ne!(dg.g_n, prev.g_n);
        assert_ne!(dg.d_n, prev.d_n);
        assert_eq!(rec.lr.g_n, Some(cfg.lr));
        assert_eq!(rec.lr.g_e, None);
        prev = dg.clone();
    }
}

#[test]
fn stage_two_follows_the_four_to_one_cycle() {
    let (_d, data) = tiny_data();
    let cfg = tiny_config(2, 15);
    let (_, steps) = trace(&cfg, &data);
    let mut prev = steps.iter().find(|(r, _)| r.stage == 1 && r.iteration == 2).unwrap().1.clone();
    for (rec, dg) in steps.iter().filter(|(r, _)| r.stage == 2) {
        let d_step = rec.iteration % 5 == 0;
        assert_eq!(dg.g_n != prev.g_n, !d_step, "g_n at {}", rec.iteration);
        assert_eq!(dg.g_e != prev.g_e, !d_step, "g_e at {}", rec.iteration);
        assert_eq!(dg.d_n != prev.d_n, d_step, "d_n at {}", rec.iteration);
        assert_eq!(dg.d_e != prev.d_e, d_step, "d_e at {}", rec.iteration);
        if d_step {
            assert_eq!(rec.lr.d_n, Some(5e-5));
            assert_eq!(rec.lr.d_e, Some(2e-4));
            assert_eq!(rec.lr.g_n, None);
        } else {
            assert_eq!(rec.lr.g_n, Some(5e-5));
            assert_eq!(rec.lr.g_e, Some(2e-4));
            assert_eq!(rec.lr.d_n, None);
        }
        prev = dg.clone();
    }
}

#[test]
fn full_scale_profile_quarters_the_normalizer_rate() {
    let c = TrainConfig::paper();
    assert_eq!((c.lr, c.adam_beta1, c.batch_size, c.g_steps_per_d_step), (2e-4, 0.5, 24, 4));
    assert_eq!(c.lr * c.stage2_factor(), 5e-5);
    let d = TrainConfig::desk();
    assert_eq!((d.stage1_iters, d.stage2_iters, d.network.image_size), (2000, 4000, 32));
}

#[test]
fn optimizer_counters_match_the_schedule_and_budgets_match() {
    let (_d, data) = tiny_data();
    let full = tiny_config(3, 12);
    let single = TrainConfig { variant: Variant::SingleStage, ..full.clone() };
    let (bf, _) = trace(&full, &data);
    let (bs, _) = trace(&single, &data);
    // 12 stage-2 iterations: 10 generator and 2 discriminator iterations.
    assert_eq!(bf.step_counts(), StepCounts { g_n: 13, g_e: 10, d_n: 5, d_e: 2 });
    assert_eq!(bf.step_counts(), full.expected_steps());
    // 15 cycle iterations: 12 generator and 3 discriminator iterations.
    assert_eq!(bs.step_counts(), StepCounts { g_n: 12, g_e: 12, d_n: 3, d_e: 3 });
    assert_eq!(bs.step_counts(), single.expected_steps());
    assert_eq!(bf.step_counts().total(), bs.step_counts().total());
}

#[test]
fn zero_stage_one_only_moves_the_stage_marker() {
    let (_d, data) = tiny_data();
    let cfg = tiny_config(0, 0);
    let fresh = ModelBundle::<f64>::new(cfg.clone(), 3).unwrap();
    let b = train_stage_one(fresh.clone(), &data, &mut TrainHooks::default()).unwrap();
    assert_eq!(b.position, Position { stage: 1, iteration: 0 });
    assert_eq!(b.digests(), fresh.digests());
    assert_eq!(b.step_counts(), fresh.step_counts());
}

#[test]
fn identical_seeds_give_identical_bundles() {
    let (_d, data) = tiny_data();
    let cfg = tiny_config(3, 6);
    let (a, _) = trace(&cfg, &data);
    let (b, _) = trace(&cfg, &data);
    assert_eq!(a, b);
    let (c, _) = trace(&TrainConfig { seed: 2, ..cfg }, &data);
    assert_ne!(a.digests(), c.digests());
}

#[test]
fn variants_give_distinct_checkpoints() {
    let (_d, data) = tiny_data();
    let base = tiny_config(2, 5);
    let digests: Vec<ParamDigests> =
        Variant::ALL.iter().map(|&v| trace(&TrainConfig { variant: v, ..base.clone() }, &data).0.digests()).collect();
    assert_ne!(digests[0], digests[1]);
    assert_ne!(digests[0], digests[2]);
    assert_ne!(digests[1], digests[2]);
}

#[test]
fn no_regularizers_reports_no_self_cycle_term() {
    let (_d, data) = tiny_data();
    let cfg = TrainConfig { variant: Variant::NoRegularizers, ..tiny_config(1, 10) };
    let (_, steps) = trace(&cfg, &data);
    for (rec, _) in steps.iter().filter(|(r, _)| r.stage == 2) {
        assert_eq!(rec.report.csc, 0.0);
        if rec.iteration % 5 != 0 {
            assert!(rec.report.rec > 0.0);
        }
    }
    let (_, full) = trace(&TrainConfig { variant: Variant::Full, ..cfg }, &data);
    let g_iters = full.iter().filter(|(r, _)| r.stage == 2 && r.iteration % 5 != 0);
    assert!(g_iters.clone().all(|(r, _)| r.report.rec > 0.0 && r.report.csc >= 0.0));
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let (_d, data) = tiny_data();
    let (b, _) = trace(&tiny_config(2, 7), &data);
    let dir = TempDir::new().unwrap();
    let manifest = save_checkpoint(&b, dir.path()).unwrap();
    let text = std::fs::read_to_string(manifest).unwrap();
    for key in ["\"stage\"", "\"iteration\"", "\"config_hash\"", "\"files\""] {
        assert!(text.contains(key), "{key}");
    }
    let back = load_checkpoint::<f64>(dir.path()).unwrap();
    assert_eq!(back, b);
    assert!(matches!(load_checkpoint::<f32>(dir.path()), Err(Error::Checkpoint(_))));
}

#[test]
fn corrupt_or_foreign_checkpoints_are_rejected() {
    let (_d, data) = tiny_data();
    let (b, _) = trace(&tiny_config(1, 0), &data);
    let dir = TempDir::new().unwrap();
    save_checkpoint(&b, dir.path()).unwrap();

    let other = EncoderConfig { image_size: 32, n_blocks: 3, ..b.config.network };
    assert!(matches!(load_checkpoint_for::<f64>(dir.path(), &other, 3), Err(Error::Config(_))));
    assert!(matches!(load_checkpoint_for::<f64>(dir.path(), &b.config.network, 4), Err(Error::Config(_))));
    assert!(load_checkpoint_for::<f64>(dir.path(), &b.config.network, 3).is_ok());

    let man = dir.path().join(CHECKPOINT_MANIFEST);
    let text = std::fs::read_to_string(&man).unwrap();
    std::fs::write(&man, text.replacen("\"version\": 1", "\"version\": 99", 1)).unwrap();
    assert!(matches!(load_checkpoint::<f64>(dir.path()), Err(Error::Checkpoint(m)) if m.contains("version")));
    std::fs::write(&man, &text).unwrap();

    let blob = dir.path().join("g_e.params");
    let mut bytes = std::fs::read(&blob).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    std::fs::write(&blob, bytes).unwrap();
    assert!(matches!(load_checkpoint::<f64>(dir.path()), Err(Error::Checkpoint(m)) if m.contains("corrupt")));
}

#[test]
fn training_refuses_a_dataset_of_another_size() {
    let (_d, data) = tiny_data();
    let cfg = TrainConfig { network: EncoderConfig { image_size: 32, n_blocks: 3, ..tiny_config(1, 1).network }, ..tiny_config(1, 1) };
    assert!(matches!(run_variant(&cfg, &data, &mut TrainHooks::default()), Err(Error::Config(_))));
}

#[test]
fn resume_from_disk_matches_an_uninterrupted_run() {
    let (_d, data) = tiny_data();
    let cfg = tiny_config(3, 10);
    let straight_dir = TempDir::new().unwrap();
    let straight = run_variant(&cfg, &data, &mut TrainHooks::with_out_dir(straight_dir.path())).unwrap();

    let out = TempDir::new().unwrap();
    let mut hooks = TrainHooks::with_out_dir(out.path());
    hooks.stop_at = Some(Position { stage: 2, iteration: 6 });
    hooks.checkpoint_every = 3;
    let partial = run_variant(&cfg, &data, &mut hooks).unwrap();
    assert!(hooks.stopped);
    assert_eq!(partial.position, Position { stage: 2, iteration: 6 });
    let latest = out.path().join("checkpoints").join("latest");
    let loaded = load_checkpoint::<f64>(&latest).unwrap();
    assert_eq!(loaded, partial);

    let resumed = continue_training(loaded, &data, &mut TrainHooks::with_out_dir(out.path())).unwrap();
    assert_eq!(resumed, straight);
    let a = read_log(&log_path(straight_dir.path())).unwrap();
    let b = read_log(&log_path(out.path())).unwrap();
    assert_eq!(a.len(), 13);
    assert_eq!(a, b);
}

#[test]
fn resuming_from_an_older_checkpoint_rewrites_the_log_once() {
    let (_d, data) = tiny_data();
    let cfg = tiny_config(2, 5);
    let out = TempDir::new().unwrap();
    let mut hooks = TrainHooks::with_out_dir(out.path());
    hooks.checkpoint_every = 2;
    run_variant(&cfg, &data, &mut hooks).unwrap();
    // `latest` was last written at stage-2 iteration 4; the log already
    // holds iteration 5.
    let latest = load_checkpoint::<f64>(&out.path().join("checkpoints").join("latest")).unwrap();
    assert_eq!(latest.position, Position { stage: 2, iteration: 4 });
    continue_training(latest, &data, &mut TrainHooks::with_out_dir(out.path())).unwrap();
    let log = read_log(&log_path(out.path())).unwrap();
    let positions: Vec<Position> = log.iter().map(|r| r.position()).collect();
    let mut expected: Vec<Position> = (1..=2).map(|i| Position { stage: 1, iteration: i }).collect();
    expected.extend((1..=5).map(|i| Position { stage: 2, iteration: i }));
    assert_eq!(positions, expected);
}

#[test]
fn non_finite_losses_abort_with_a_diagnostic_checkpoint() {
    let (_d, data) = tiny_data();
    let cfg = tiny_config(3, 0);
    let mut bundle = ModelBundle::<f64>::new(cfg, 3).unwrap();
    for t in bundle.dn.params.tensors_mut() {
        t.data_mut().fill(f64::NAN);
    }
    let out = TempDir::new().unwrap();
    let err = train_stage_one(bundle, &data, &mut TrainHooks::with_out_dir(out.path())).unwrap_err();
    assert!(matches!(err, Error::NonFinite { iteration: 1, .. }), "{err}");
    let diag = load_checkpoint::<f64>(&out.path().join("checkpoints").join("diagnostic")).unwrap();
    assert_eq!(diag.position, Position { stage: 1, iteration: 0 });
}

#[test]
fn invalid_configs_are_configuration_errors() {
    for bad in [
        TrainConfig { lr: 0.0, ..TrainConfig::desk() },
        TrainConfig { stage2_gn_lr_factor: 1.5, ..TrainConfig::desk() },
        TrainConfig { batch_size: 0, ..TrainConfig::desk() },
        TrainConfig { g_steps_per_d_step: 0, ..TrainConfig::desk() },
    ] {
        assert!(matches!(bad.validate(), Err(Error::Config(_))), "{bad:?}");
    }
    assert!(matches!("hinge".parse::<Variant>(), Err(Error::Config(_))));
    assert_eq!("single-stage".parse::<Variant>().unwrap(), Variant::SingleStage);
}
