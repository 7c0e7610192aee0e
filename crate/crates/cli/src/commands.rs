use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use lbgan_core::dataset::{
    code_for_degrees, generate_synthetic_dataset, preprocess, FaceImage, LandmarkSet, RgbImage, Split,
    POSE_GRID,
};
use lbgan_core::evaluation::{ablation_compare, check_disjoint, evaluate, EvalConfig, EvalModels, EvalReport};
use lbgan_core::inference::{identity_morph_grid, pose_sweep_grid, rotate, rotation_filename, RotationRequest};
use lbgan_core::networks::EncoderConfig;
use lbgan_core::training::{
    continue_training, load_checkpoint, run_variant, Profile, TrainConfig, TrainHooks, Variant,
};
use lbgan_core::losses::LossWeights;
use lbgan_core::{Bundle32, Dataset32, Face32};
use sha2::{Digest, Sha256};

use crate::args::{
    AblateArgs, Command, EvalArgs, EvalOverrides, GridArgs, InputArgs, MorphArgs, RotateArgs, SynthArgs, TrainArgs,
    TrainOverrides,
};
use crate::resolve::{merge, require, seed_override, write_resolved};
use crate::UsageError;

const DEFAULT_CHECKPOINT_EVERY: u64 = 500;

pub fn run(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::SynthData(a) => synth_data(a),
        Command::Train(a) => train(a),
        Command::Rotate(a) => rotate_cmd(a),
        Command::Grid(a) => grid(a),
        Command::Morph(a) => morph(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
    }
}

fn synth_data(args: SynthArgs) -> anyhow::Result<()> {
    let mut a: SynthArgs = merge(&args, args.config.as_deref())?;
    if let Some(s) = seed_override()? {
        a.seed = Some(s);
    }
    a.identities.get_or_insert(30);
    a.seed.get_or_insert(1);
    a.size.get_or_insert(32);
    a.split.get_or_insert_with(|| "train".into());
    let out = require(a.out.clone(), "out")?;
    let split: Split = a.split.as_deref().unwrap_or_default().parse()?;
    let manifest = generate_synthetic_dataset(a.identities.unwrap(), a.seed.unwrap(), a.size.unwrap(), split, &out)?;
    let mut h = Sha256::new();
    let manifest_file = out.join("manifest.json");
    h.update(fs::read(&manifest_file)?);
    for r in &manifest.records {
        h.update(fs::read(out.join(&r.path))?);
    }
    write_resolved(&out, "synth-data", &a)?;
    println!("manifest: {}", manifest_file.display());
    println!("records: {}", manifest.records.len());
    let digest: String = h.finalize().iter().map(|b| format!("{b:02x}")).collect();
    println!("sha256: {digest}");
    Ok(())
}

/// Profile defaults, then file and flag overrides, then `LBGAN_SEED`.
fn train_config(hp: &TrainOverrides) -> anyhow::Result<TrainConfig> {
    let profile: Profile = hp.profile.as_deref().unwrap_or("desk").parse()?;
    let mut c = TrainConfig::for_profile(profile);
    if let Some(v) = &hp.variant {
        c.variant = v.parse()?;
    }
    macro_rules! set {
        ($($src:ident => $($dst:ident).+),* $(,)?) => {
            $(if let Some(v) = hp.$src { c.$($dst).+ = v; })*
        };
    }
    set!(
        seed => seed, lr => lr, beta1 => adam_beta1, beta2 => adam_beta2, batch => batch_size,
        g_steps => g_steps_per_d_step, stage1_iters => stage1_iters, stage2_iters => stage2_iters,
        gn_lr_factor => stage2_gn_lr_factor, lambda_rec => weights.lambda_rec, lambda_csc => weights.lambda_csc,
        image_size => network.image_size, base_channels => network.base_channels, n_blocks => network.n_blocks,
        bottleneck_dim => network.bottleneck_dim,
    );
    if let Some(s) = seed_override()? {
        c.seed = s;
    }
    c.validate()?;
    Ok(c)
}

fn overrides_of(c: &TrainConfig, profile: Option<&str>) -> TrainOverrides {
    let LossWeights { lambda_rec, lambda_csc } = c.weights;
    let EncoderConfig { image_size, base_channels, n_blocks, bottleneck_dim } = c.network;
    TrainOverrides {
        profile: Some(profile.unwrap_or("desk").to_string()),
        variant: Some(c.variant.to_string()),
        seed: Some(c.seed),
        lr: Some(c.lr),
        beta1: Some(c.adam_beta1),
        beta2: Some(c.adam_beta2),
        batch: Some(c.batch_size),
        g_steps: Some(c.g_steps_per_d_step),
        stage1_iters: Some(c.stage1_iters),
        stage2_iters: Some(c.stage2_iters),
        gn_lr_factor: Some(c.stage2_gn_lr_factor),
        lambda_rec: Some(lambda_rec),
        lambda_csc: Some(lambda_csc),
        image_size: Some(image_size),
        base_channels: Some(base_channels),
        n_blocks: Some(n_blocks),
        bottleneck_dim: Some(bottleneck_dim),
    }
}

fn load_data(dir: &Path) -> anyhow::Result<Dataset32> {
    Dataset32::load(dir).with_context(|| format!("loading dataset {}", dir.display()))
}

/// The most advanced of `latest`, `final` and `stage1` under `out/checkpoints`.
fn newest_checkpoint(out: &Path) -> anyhow::Result<Option<Bundle32>> {
    let mut best: Option<Bundle32> = None;
    for name in ["stage1", "latest", "final"] {
        let dir = out.join("checkpoints").join(name);
        if !dir.join("manifest.json").exists() {
            continue;
        }
        let b = load_checkpoint::<f32>(&dir).with_context(|| format!("loading {}", dir.display()))?;
        if best.as_ref().is_none_or(|x| b.position > x.position) {
            best = Some(b);
        }
    }
    Ok(best)
}

fn print_summary(bundle: &Bundle32, out: &Path) {
    let s = bundle.step_counts();
    println!(
        "variant {} at stage {} iteration {}; optimizer steps g_n {} g_e {} d_n {} d_e {}",
        bundle.config.variant, bundle.position.stage, bundle.position.iteration, s.g_n, s.g_e, s.d_n, s.d_e
    );
    println!("checkpoints: {}", out.join("checkpoints").display());
    println!("log: {}", lbgan_core::training::log_path(out).display());
}

/// The newest checkpoint under `out`, checked against `config` and `data`.
fn resume_point(config: &TrainConfig, data: &Dataset32, out: &Path) -> anyhow::Result<Bundle32> {
    let Some(b) = newest_checkpoint(out)? else {
        bail!("no checkpoint to resume under {}", out.join("checkpoints").display());
    };
    if b.config != *config {
        return Err(UsageError(format!(
            "checkpoint config (hash {}) differs from the requested one (hash {}); pass --config {}",
            b.config.hash(),
            config.hash(),
            out.join("train.resolved.toml").display()
        ))
        .into());
    }
    if b.n_id != data.manifest.n_id || config.network.image_size != data.manifest.image_size {
        return Err(UsageError("dataset does not match the checkpoint".into()).into());
    }
    Ok(b)
}

fn train_into(
    config: &TrainConfig,
    data: &Dataset32,
    out: &Path,
    checkpoint_every: u64,
    resume: Option<Bundle32>,
) -> anyhow::Result<Bundle32> {
    let mut hooks = TrainHooks::with_out_dir(out);
    hooks.checkpoint_every = checkpoint_every;
    Ok(match resume {
        Some(b) => {
            eprintln!("resuming from stage {} iteration {}", b.position.stage, b.position.iteration);
            continue_training(b, data, &mut hooks)?
        }
        None => run_variant(config, data, &mut hooks)?,
    })
}

fn train(args: TrainArgs) -> anyhow::Result<()> {
    let merged: TrainArgs = merge(&args, args.config.as_deref())?;
    let config = train_config(&merged.hp)?;
    let data_dir = require(merged.data.clone(), "data")?;
    let out = require(merged.out.clone(), "out")?;
    let checkpoint_every = merged.checkpoint_every.unwrap_or(DEFAULT_CHECKPOINT_EVERY);
    let data = load_data(&data_dir)?;
    if data.manifest.split != Split::Train {
        return Err(UsageError(format!("{} is not a train split", data_dir.display())).into());
    }
    let resolved = TrainArgs {
        config: None,
        data: Some(data_dir),
        out: Some(out.clone()),
        checkpoint_every: Some(checkpoint_every),
        resume: false,
        hp: overrides_of(&config, merged.hp.profile.as_deref()),
    };
    let resume = if args.resume { Some(resume_point(&config, &data, &out)?) } else { None };
    write_resolved(&out, "train", &resolved)?;
    let bundle = train_into(&config, &data, &out, checkpoint_every, resume)?;
    print_summary(&bundle, &out);
    Ok(())
}

fn load_bundle(dir: &Path) -> anyhow::Result<Bundle32> {
    load_checkpoint(dir).with_context(|| format!("loading checkpoint {}", dir.display()))
}

fn read_landmarks(path: &Path) -> anyhow::Result<LandmarkSet> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| UsageError(format!("{}: {e}", path.display())).into())
}

/// A face from a PNG (aligned first when landmarks are given) or from a
/// dataset record.
fn load_face(
    input: Option<&Path>,
    landmarks: Option<&Path>,
    data: Option<&Path>,
    record: Option<usize>,
    size: usize,
    which: &str,
) -> anyhow::Result<Face32> {
    let face = match (input, data, record) {
        (Some(p), _, None) => {
            let raw = RgbImage::read_png(p)?;
            match landmarks {
                Some(l) => preprocess(&raw, &read_landmarks(l)?, size)?.0,
                None => FaceImage::from_rgb(&raw)?,
            }
        }
        (None, Some(d), Some(i)) => {
            let ds = load_data(d)?;
            if i >= ds.len() {
                return Err(UsageError(format!("record {i} out of range ({} records)", ds.len())).into());
            }
            ds.images[i].clone()
        }
        _ => {
            return Err(UsageError(format!("give either --{which} or --data with --record")).into());
        }
    };
    if face.size() != size {
        return Err(UsageError(format!(
            "input is {0}x{0} but the model expects {size}x{size}; pass landmarks to align it",
            face.size()
        ))
        .into());
    }
    Ok(face)
}

fn first_face(i: &InputArgs, size: usize) -> anyhow::Result<Face32> {
    load_face(i.input.as_deref(), i.landmarks.as_deref(), i.data.as_deref(), i.record, size, "input")
}

fn write_image(out: &Path, name: &str, img: &RgbImage) -> anyhow::Result<PathBuf> {
    let dir = out.join("images");
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    img.write_png(&path)?;
    println!("{}", path.display());
    Ok(path)
}

fn rotate_cmd(args: RotateArgs) -> anyhow::Result<()> {
    let a: RotateArgs = merge(&args, args.config.as_deref())?;
    let deg = require(a.deg, "deg")?;
    code_for_degrees(deg)?;
    let out = require(a.input.out.clone(), "out")?;
    let bundle = load_bundle(&require(a.input.checkpoint.clone(), "checkpoint")?)?;
    let x = first_face(&a.input, bundle.config.network.image_size)?;
    let y = rotate(&bundle, &RotationRequest::new(x, deg)?)?;
    write_resolved(&out, "rotate", &a)?;
    write_image(&out, &rotation_filename(a.prefix.as_deref().unwrap_or("out"), deg), &y.to_rgb())?;
    Ok(())
}

fn parse_degs(s: &str) -> anyhow::Result<Vec<f64>> {
    if s.trim() == "all" {
        return Ok(POSE_GRID.iter().map(|&d| d as f64).collect());
    }
    let degs = s
        .split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|_| UsageError(format!("bad degree value {t:?}"))))
        .collect::<Result<Vec<_>, _>>()?;
    for &d in &degs {
        code_for_degrees(d)?;
    }
    Ok(degs)
}

fn grid(args: GridArgs) -> anyhow::Result<()> {
    let a: GridArgs = merge(&args, args.config.as_deref())?;
    let degs = parse_degs(a.degs.as_deref().unwrap_or("all"))?;
    let out = require(a.input.out.clone(), "out")?;
    let bundle = load_bundle(&require(a.input.checkpoint.clone(), "checkpoint")?)?;
    let x = first_face(&a.input, bundle.config.network.image_size)?;
    let img = pose_sweep_grid(&bundle, &x, &degs)?;
    write_resolved(&out, "grid", &a)?;
    write_image(&out, &format!("{}.png", a.name.as_deref().unwrap_or("grid")), &img)?;
    Ok(())
}

fn morph(args: MorphArgs) -> anyhow::Result<()> {
    let a: MorphArgs = merge(&args, args.config.as_deref())?;
    let steps = a.steps.unwrap_or(5);
    let code = code_for_degrees(a.deg.unwrap_or(0.0))?;
    let out = require(a.input.out.clone(), "out")?;
    let bundle = load_bundle(&require(a.input.checkpoint.clone(), "checkpoint")?)?;
    let size = bundle.config.network.image_size;
    let x1 = first_face(&a.input, size)?;
    let x2 = load_face(a.input2.as_deref(), a.landmarks2.as_deref(), a.input.data.as_deref(), a.record2, size, "input2")?;
    let img = identity_morph_grid(&bundle, &x1, &x2, steps, Some(&code))?;
    write_resolved(&out, "morph", &a)?;
    write_image(&out, &format!("{}.png", a.name.as_deref().unwrap_or("morph")), &img)?;
    Ok(())
}

fn eval_config(e: &EvalOverrides, image_size: usize) -> EvalConfig {
    let mut cfg = EvalConfig::for_image_size(image_size);
    if let Some(n) = e.eval_iters {
        cfg.iterations = n;
    }
    if let Some(s) = e.eval_seed {
        cfg.seed = s;
    }
    cfg
}

/// Loads both splits and trains the auxiliary models on the train split.
fn eval_setup(e: &EvalOverrides) -> anyhow::Result<(Dataset32, EvalModels<f32>)> {
    let train = load_data(&require(e.train_data.clone(), "train-data")?)?;
    let test = load_data(&require(e.test_data.clone(), "test-data")?)?;
    check_disjoint(&train, &test)?;
    if train.image_size() != test.image_size() {
        return Err(UsageError("train and test splits have different image sizes".into()).into());
    }
    let cfg = eval_config(e, train.image_size());
    eprintln!("training auxiliary models ({} iterations each)", cfg.iterations);
    let models = EvalModels::train(&cfg, &train)?;
    Ok((test, models))
}

fn write_report(dir: &Path, name: &str, contents: &str) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))
}

/// `<stem>.json`, `<stem>.txt` and `<matches>.csv`.
fn write_eval(dir: &Path, stem: &str, matches: &str, report: &EvalReport) -> anyhow::Result<()> {
    write_report(dir, &format!("{stem}.json"), &report.to_json())?;
    write_report(dir, &format!("{stem}.txt"), &report.to_text())?;
    write_report(dir, &format!("{matches}.csv"), &report.matches_csv())
}

fn eval(args: EvalArgs) -> anyhow::Result<()> {
    let a: EvalArgs = merge(&args, args.config.as_deref())?;
    let out = require(a.out.clone(), "out")?;
    let bundle = load_bundle(&require(a.checkpoint.clone(), "checkpoint")?)?;
    let (test, models) = eval_setup(&a.eval)?;
    if test.image_size() != bundle.config.network.image_size {
        return Err(UsageError("test split image size does not match the checkpoint".into()).into());
    }
    let report = evaluate(&bundle, &models, &test)?;
    write_resolved(&out, "eval", &a)?;
    write_eval(&out.join("reports"), "eval", "matches", &report)?;
    print!("{}", report.to_text());
    Ok(())
}

fn ablate(args: AblateArgs) -> anyhow::Result<()> {
    let a: AblateArgs = merge(&args, args.config.as_deref())?;
    let out = require(a.out.clone(), "out")?;
    let base = train_config(&a.hp)?;
    let train_missing = a.train_missing.unwrap_or(false);
    let mut bundles = Vec::new();
    for v in Variant::ALL {
        let run_dir = out.join(v.as_str());
        let ckpt = run_dir.join("checkpoints").join("final");
        if ckpt.join("manifest.json").exists() {
            let b = load_bundle(&ckpt)?;
            if b.config.variant != v {
                bail!("{} holds a {} checkpoint", ckpt.display(), b.config.variant);
            }
            bundles.push(b);
        } else if train_missing {
            let config = TrainConfig { variant: v, ..base.clone() };
            let data_dir = require(a.eval.train_data.clone(), "train-data")?;
            let data = load_data(&data_dir)?;
            let resolved = TrainArgs {
                config: None,
                data: Some(data_dir),
                out: Some(run_dir.clone()),
                checkpoint_every: Some(DEFAULT_CHECKPOINT_EVERY),
                resume: false,
                hp: overrides_of(&config, a.hp.profile.as_deref()),
            };
            let resume = match newest_checkpoint(&run_dir)? {
                Some(_) => Some(resume_point(&config, &data, &run_dir)?),
                None => None,
            };
            write_resolved(&run_dir, "train", &resolved)?;
            eprintln!("training {v}");
            bundles.push(train_into(&config, &data, &run_dir, DEFAULT_CHECKPOINT_EVERY, resume)?);
        } else {
            bail!("missing {}; train it first or pass --train-missing", ckpt.display());
        }
    }
    let (test, models) = eval_setup(&a.eval)?;
    let reports_dir = out.join("reports");
    let mut reports = Vec::new();
    for b in &bundles {
        let r = evaluate(b, &models, &test)?;
        let v = b.config.variant;
        write_eval(&reports_dir, &format!("eval_{v}"), &format!("matches_{v}"), &r)?;
        reports.push(r);
    }
    let table = ablation_compare(&reports)?;
    write_resolved(&out, "ablate", &a)?;
    write_report(&reports_dir, "ablation.json", &serde_json::to_string_pretty(&table)?)?;
    write_report(&reports_dir, "ablation.txt", &table.to_text())?;
    print!("{}", table.to_text());
    Ok(())
}
