use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use lbgan_nn::{Graph, Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::bundle::{save_checkpoint, ModelBundle, Position};
use super::config::{TrainConfig, Variant};
use crate::dataset::synth::mix_seed;
use crate::dataset::{stack_masks, AttentionMask, Batch, LoadedDataset, N_POSES};
use crate::error::{Error, Result};
use crate::losses::{d_e_terms, d_n_term, g_n_term, total_generator_loss, GeneratorLossInputs, LossReport};
use crate::networks::code_tensor;

pub const LOG_FILE: &str = "train.jsonl";

/// Learning rates applied at one iteration; `None` for networks that were
/// not updated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AppliedRates {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub g_n: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub g_e: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d_n: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d_e: Option<f64>,
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub stage: u8,
    pub iteration: u64,
    pub lr: AppliedRates,
    #[serde(flatten)]
    pub report: LossReport,
}

impl StepRecord {
    pub fn position(&self) -> Position {
        Position { stage: self.stage, iteration: self.iteration }
    }
}

/// Called after every iteration with its log record and the updated bundle.
pub type StepObserver<'a, T> = &'a mut dyn FnMut(&StepRecord, &ModelBundle<T>);

/// Optional side effects of a training run.
pub struct TrainHooks<'a, T> {
    /// Root for `logs/train.jsonl` and `checkpoints/{stage1,latest,final,diagnostic}`.
    pub out_dir: Option<PathBuf>,
    /// Save `checkpoints/latest` every this many iterations (0 disables).
    pub checkpoint_every: u64,
    /// Stop once this position has been completed.
    pub stop_at: Option<Position>,
    pub observer: Option<StepObserver<'a, T>>,
    /// Set when `stop_at` ended the run early.
    pub stopped: bool,
}

impl<T> Default for TrainHooks<'_, T> {
    fn default() -> Self {
        Self { out_dir: None, checkpoint_every: 0, stop_at: None, observer: None, stopped: false }
    }
}

impl<T> TrainHooks<'_, T> {
    pub fn with_out_dir(dir: impl Into<PathBuf>) -> Self {
        Self { out_dir: Some(dir.into()), ..Self::default() }
    }

    fn checkpoint_dir(&self, name: &str) -> Option<PathBuf> {
        self.out_dir.as_ref().map(|d| d.join("checkpoints").join(name))
    }
}

/// Reads every record of a training log.
pub fn read_log(path: &Path) -> Result<Vec<StepRecord>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    BufReader::new(f)
        .lines()
        .enumerate()
        .map(|(i, line)| {
            let line = line.map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&line).map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))
        })
        .collect()
}

pub fn log_path(out_dir: &Path) -> PathBuf {
    out_dir.join("logs").join(LOG_FILE)
}

/// Drop log records past `pos` so that re-executed iterations appear once.
fn trim_log(path: &Path, pos: Position) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let kept: Vec<StepRecord> = read_log(path)?.into_iter().filter(|r| r.position() <= pos).collect();
    let mut text = String::new();
    for r in &kept {
        text.push_str(&serde_json::to_string(r).expect("record serializes"));
        text.push('\n');
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Runner<'h, 'a, T> {
    hooks: &'h mut TrainHooks<'a, T>,
    log: Option<(PathBuf, fs::File)>,
}

impl<'h, 'a, T: Scalar> Runner<'h, 'a, T> {
    fn new(hooks: &'h mut TrainHooks<'a, T>, pos: Position) -> Result<Self> {
        let log = match &hooks.out_dir {
            Some(dir) => {
                let path = log_path(dir);
                let parent = path.parent().expect("log dir");
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
                trim_log(&path, pos)?;
                let f = OpenOptions::new().create(true).append(true).open(&path).map_err(|e| Error::io(&path, e))?;
                Some((path, f))
            }
            None => None,
        };
        Ok(Self { hooks, log })
    }

    fn record(&mut self, rec: &StepRecord, bundle: &ModelBundle<T>) -> Result<()> {
        if let Some((path, f)) = &mut self.log {
            let mut line = serde_json::to_string(rec).expect("record serializes");
            line.push('\n');
            f.write_all(line.as_bytes()).map_err(|e| Error::io(&*path, e))?;
        }
        if let Some(obs) = self.hooks.observer.as_mut() {
            obs(rec, bundle);
        }
        let every = self.hooks.checkpoint_every;
        if every > 0 && rec.iteration.is_multiple_of(every) {
            if let Some(dir) = self.hooks.checkpoint_dir("latest") {
                save_checkpoint(bundle, &dir)?;
            }
        }
        Ok(())
    }

    /// True when the run should halt after the current position.
    fn should_stop(&mut self, pos: Position) -> bool {
        if self.hooks.stop_at == Some(pos) {
            self.hooks.stopped = true;
        }
        self.hooks.stopped
    }

    fn save(&self, name: &str, bundle: &ModelBundle<T>) -> Result<()> {
        if let Some(dir) = self.hooks.checkpoint_dir(name) {
            save_checkpoint(bundle, &dir)?;
        }
        Ok(())
    }

    /// Saves a diagnostic checkpoint of the pre-step state and builds the
    /// error.
    fn non_finite(&self, bundle: &ModelBundle<T>, iteration: u64, what: &str) -> Error {
        if let Err(e) = self.save("diagnostic", bundle) {
            return e;
        }
        Error::NonFinite { iteration, what: what.to_string() }
    }
}

fn iteration_rng(seed: u64, stage: u8, iteration: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(mix_seed(seed, stage as u64), iteration))
}

fn ids<T>(b: &Batch<T>) -> Vec<usize> {
    b.ids.iter().map(|i| i.0).collect()
}

fn pose_indices<T>(b: &Batch<T>) -> Vec<usize> {
    b.poses.iter().map(|p| p.index()).collect()
}

fn random_codes<R: Rng>(n: usize, rng: &mut R) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..N_POSES)).collect()
}

fn one_hot<T: Scalar>(idx: &[usize]) -> Tensor<T> {
    let codes: Vec<_> = idx.iter().map(|&i| crate::dataset::make_remote_code(i).expect("pose index")).collect();
    code_tensor(&codes.iter().collect::<Vec<_>>())
}

fn check_dataset<T: Scalar>(bundle: &ModelBundle<T>, data: &LoadedDataset<T>) -> Result<()> {
    if data.image_size() != bundle.config.network.image_size {
        return Err(Error::Config(format!(
            "dataset image size {} does not match the network's {}",
            data.image_size(),
            bundle.config.network.image_size
        )));
    }
    if data.n_id() != bundle.n_id {
        return Err(Error::Config(format!("dataset has {} identities, model has {}", data.n_id(), bundle.n_id)));
    }
    Ok(())
}

fn stage_one_iteration<T: Scalar>(
    b: &mut ModelBundle<T>,
    data: &LoadedDataset<T>,
    rng: &mut ChaCha8Rng,
) -> Result<(StepRecord, Option<&'static str>)> {
    let cfg = b.config.clone();
    let bs = cfg.batch_size;
    let mut report = LossReport::default();

    // Discriminator: frontal reals against normalized inputs of any pose.
    let real = data.sample_batch(bs, true, rng)?;
    let src = data.sample_batch(bs, false, rng)?;
    let mut g = Graph::new();
    let pgn = b.gn.bind(&mut g, false);
    let pdn = b.dn.bind(&mut g, true);
    let x = g.input(src.images);
    let xf = b.gn.normalize(&mut g, &pgn, x)?;
    let xr = g.input(real.images.clone());
    let pr = b.dn.forward(&mut g, &pdn, xr)?.identity;
    let pf = b.dn.forward(&mut g, &pdn, xf)?.identity;
    let loss = d_n_term(&mut g, pr, &ids(&real), pf)?;
    report.d_n = g.item(loss).to_f64_lossy();
    if !report.d_n.is_finite() {
        return Ok((step(1, 0, AppliedRates::default(), report), Some("d_n")));
    }
    let grads = b.dn.params.collect_grads(&pdn, &mut g.backward(loss));
    b.opt_dn.apply(&mut b.dn.params, &grads, cfg.lr)?;

    // Generator: normalized inputs should be classified as their identity.
    let src = data.sample_batch(bs, false, rng)?;
    let mut g = Graph::new();
    let pgn = b.gn.bind(&mut g, true);
    let pdn = b.dn.bind(&mut g, false);
    let x = g.input(src.images.clone());
    let xf = b.gn.normalize(&mut g, &pgn, x)?;
    let pf = b.dn.forward(&mut g, &pdn, xf)?.identity;
    let loss = g_n_term(&mut g, pf, &ids(&src))?;
    report.g_n = g.item(loss).to_f64_lossy();
    report.total_g = report.g_n;
    report.total_d = report.d_n;
    let rates = AppliedRates { g_n: Some(cfg.lr), d_n: Some(cfg.lr), ..Default::default() };
    if !report.g_n.is_finite() {
        return Ok((step(1, 0, rates, report), Some("g_n")));
    }
    let grads = b.gn.params.collect_grads(&pgn, &mut g.backward(loss));
    b.opt_gn.apply(&mut b.gn.params, &grads, cfg.lr)?;
    Ok((step(1, 0, rates, report), None))
}

fn step(stage: u8, iteration: u64, lr: AppliedRates, report: LossReport) -> StepRecord {
    StepRecord { stage, iteration, lr, report }
}

fn masks_of<T: Scalar>(data: &LoadedDataset<T>, idx: &[usize], plain: bool) -> Tensor<T> {
    if plain {
        let ones = AttentionMask::ones(data.image_size());
        stack_masks(&vec![&ones; idx.len()])
    } else {
        stack_masks(&idx.iter().map(|&i| &data.masks[i]).collect::<Vec<_>>())
    }
}

fn generator_iteration<T: Scalar>(
    b: &mut ModelBundle<T>,
    data: &LoadedDataset<T>,
    rng: &mut ChaCha8Rng,
) -> Result<(StepRecord, Option<&'static str>)> {
    let cfg = b.config.clone();
    let plain = cfg.variant == Variant::NoRegularizers;
    let weights = cfg.effective_weights();
    let src = data.sample_batch(cfg.batch_size, false, rng)?;
    let c_star = random_codes(cfg.batch_size, rng);
    let (src_ids, src_poses) = (ids(&src), pose_indices(&src));
    // Ground-truth views at the requested poses, when every one exists.
    let targets: Option<Vec<usize>> =
        src.ids.iter().zip(&c_star).map(|(&id, &c)| data.find(id, c)).collect();

    let mut g = Graph::new();
    let pgn = b.gn.bind(&mut g, true);
    let pge = b.ge.bind(&mut g, true);
    let pdn = b.dn.bind(&mut g, false);
    let pde = b.de.bind(&mut g, false);
    let x = g.input(src.images.clone());
    let codes = g.input(one_hot(&c_star));
    let xf = b.gn.normalize(&mut g, &pgn, x)?;
    let x_hat = b.ge.edit(&mut g, &pge, x, xf, codes)?;
    let dn_out = b.dn.forward(&mut g, &pdn, xf)?;
    let de_out = b.de.forward(&mut g, &pde, x_hat)?;
    let paired_target = match &targets {
        Some(t) => {
            let tb = data.batch(t)?;
            Some((g.input(tb.images), masks_of(data, t, plain)))
        }
        None => None,
    };
    let inputs = GeneratorLossInputs {
        dn_probs_fake: dn_out.identity,
        de_id_fake: de_out.identity,
        de_pose_fake: de_out.pose.expect("editor discriminator has a pose head"),
        ids: &src_ids,
        poses: &src_poses,
        c_star: &c_star,
        x,
        x_hat,
        input_masks: if plain { None } else { Some(masks_of(data, &src.indices, false)) },
        paired_target,
    };
    let (loss, report) = total_generator_loss(&mut g, inputs, &weights)?;
    let lr_n = cfg.lr * cfg.stage2_factor();
    let rates = AppliedRates { g_n: Some(lr_n), g_e: Some(cfg.lr), ..Default::default() };
    if let Some(bad) = report.non_finite() {
        return Ok((step(2, 0, rates, report), Some(bad)));
    }
    let mut grads = g.backward(loss);
    let gn_grads = b.gn.params.collect_grads(&pgn, &mut grads);
    let ge_grads = b.ge.params.collect_grads(&pge, &mut grads);
    b.opt_gn.apply(&mut b.gn.params, &gn_grads, lr_n)?;
    b.opt_ge.apply(&mut b.ge.params, &ge_grads, cfg.lr)?;
    Ok((step(2, 0, rates, report), None))
}

fn discriminator_iteration<T: Scalar>(
    b: &mut ModelBundle<T>,
    data: &LoadedDataset<T>,
    rng: &mut ChaCha8Rng,
) -> Result<(StepRecord, Option<&'static str>)> {
    let cfg = b.config.clone();
    let bs = cfg.batch_size;
    let frontal = data.sample_batch(bs, true, rng)?;
    let real = data.sample_batch(bs, false, rng)?;
    let src = data.sample_batch(bs, false, rng)?;
    let c_star = random_codes(bs, rng);

    let mut g = Graph::new();
    let pgn = b.gn.bind(&mut g, false);
    let pge = b.ge.bind(&mut g, false);
    let pdn = b.dn.bind(&mut g, true);
    let pde = b.de.bind(&mut g, true);
    let x = g.input(src.images);
    let codes = g.input(one_hot(&c_star));
    let xf = b.gn.normalize(&mut g, &pgn, x)?;
    let x_hat = b.ge.edit(&mut g, &pge, x, xf, codes)?;

    let xr = g.input(frontal.images.clone());
    let pr = b.dn.forward(&mut g, &pdn, xr)?.identity;
    let pf = b.dn.forward(&mut g, &pdn, xf)?.identity;
    let dn_loss = d_n_term(&mut g, pr, &ids(&frontal), pf)?;

    let xr = g.input(real.images.clone());
    let real_out = b.de.forward(&mut g, &pde, xr)?;
    let fake_id = b.de.forward(&mut g, &pde, x_hat)?.identity;
    let (e_id, e_pose, e_fake) = d_e_terms(
        &mut g,
        real_out.identity,
        &ids(&real),
        real_out.pose.expect("editor discriminator has a pose head"),
        &pose_indices(&real),
        fake_id,
    )?;
    let mut total = g.add(dn_loss, e_id)?;
    total = g.add(total, e_pose)?;
    total = g.add(total, e_fake)?;
    let v = |g: &Graph<T>, x| g.item(x).to_f64_lossy();
    let report = LossReport {
        d_n: v(&g, dn_loss),
        d_e_id: v(&g, e_id),
        d_e_pose: v(&g, e_pose),
        d_e_fake: v(&g, e_fake),
        total_d: v(&g, total),
        ..Default::default()
    };
    let lr_n = cfg.lr * cfg.stage2_factor();
    let rates = AppliedRates { d_n: Some(lr_n), d_e: Some(cfg.lr), ..Default::default() };
    if let Some(bad) = report.non_finite() {
        return Ok((step(2, 0, rates, report), Some(bad)));
    }
    let mut grads = g.backward(total);
    let dn_grads = b.dn.params.collect_grads(&pdn, &mut grads);
    let de_grads = b.de.params.collect_grads(&pde, &mut grads);
    b.opt_dn.apply(&mut b.dn.params, &dn_grads, lr_n)?;
    b.opt_de.apply(&mut b.de.params, &de_grads, cfg.lr)?;
    Ok((step(2, 0, rates, report), None))
}

/// Stage 1: alternate one normalizer-discriminator step and one normalizer
/// step per iteration until `stage1_iters`. Resumes from the bundle's
/// position.
pub fn train_stage_one<T: Scalar>(
    mut bundle: ModelBundle<T>,
    data: &LoadedDataset<T>,
    hooks: &mut TrainHooks<'_, T>,
) -> Result<ModelBundle<T>> {
    check_dataset(&bundle, data)?;
    match bundle.position.stage {
        0 => bundle.position = Position { stage: 1, iteration: 0 },
        1 => {}
        s => return Err(Error::Config(format!("bundle is in stage {s}, cannot run stage 1"))),
    }
    if bundle.config.variant == Variant::SingleStage {
        return Err(Error::Config("the single_stage variant has no separate first stage".into()));
    }
    let mut runner = Runner::new(hooks, bundle.position)?;
    let seed = bundle.config.seed;
    while bundle.position.iteration < bundle.config.stage1_iters {
        let it = bundle.position.iteration + 1;
        let before = bundle.clone();
        let mut rng = iteration_rng(seed, 1, it);
        let (mut rec, bad) = stage_one_iteration(&mut bundle, data, &mut rng)?;
        if let Some(what) = bad {
            return Err(runner.non_finite(&before, it, what));
        }
        rec.iteration = it;
        bundle.position.iteration = it;
        runner.record(&rec, &bundle)?;
        if runner.should_stop(bundle.position) {
            return Ok(bundle);
        }
    }
    runner.save("stage1", &bundle)?;
    Ok(bundle)
}

/// Stage 2: cycles of `g_steps_per_d_step` joint generator iterations
/// followed by one joint discriminator iteration, each on a fresh batch.
pub fn train_stage_two<T: Scalar>(
    mut bundle: ModelBundle<T>,
    data: &LoadedDataset<T>,
    hooks: &mut TrainHooks<'_, T>,
) -> Result<ModelBundle<T>> {
    check_dataset(&bundle, data)?;
    let cfg = bundle.config.clone();
    match (bundle.position.stage, cfg.variant) {
        (0, Variant::SingleStage) => bundle.position = Position { stage: 2, iteration: 0 },
        (1, v) if v != Variant::SingleStage && bundle.position.iteration == cfg.stage1_iters => {
            bundle.position = Position { stage: 2, iteration: 0 }
        }
        (2, _) => {}
        (s, _) => {
            return Err(Error::Config(format!(
                "stage 2 needs a completed stage 1 (bundle at stage {s}, iteration {})",
                bundle.position.iteration
            )))
        }
    }
    let mut runner = Runner::new(hooks, bundle.position)?;
    let total = cfg.stage2_total();
    while bundle.position.iteration < total {
        let it = bundle.position.iteration + 1;
        let before = bundle.clone();
        let mut rng = iteration_rng(cfg.seed, 2, it);
        let (mut rec, bad) = if cfg.is_discriminator_iteration(it) {
            discriminator_iteration(&mut bundle, data, &mut rng)?
        } else {
            generator_iteration(&mut bundle, data, &mut rng)?
        };
        if let Some(what) = bad {
            return Err(runner.non_finite(&before, it, what));
        }
        rec.iteration = it;
        bundle.position.iteration = it;
        runner.record(&rec, &bundle)?;
        if runner.should_stop(bundle.position) {
            return Ok(bundle);
        }
    }
    runner.save("final", &bundle)?;
    Ok(bundle)
}

/// Continue a bundle from wherever it stands to the end of its variant's
/// schedule.
pub fn continue_training<T: Scalar>(
    bundle: ModelBundle<T>,
    data: &LoadedDataset<T>,
    hooks: &mut TrainHooks<'_, T>,
) -> Result<ModelBundle<T>> {
    let mut bundle = bundle;
    if bundle.config.variant != Variant::SingleStage && bundle.position.stage < 2 {
        bundle = train_stage_one(bundle, data, hooks)?;
        if hooks.stopped {
            return Ok(bundle);
        }
    }
    train_stage_two(bundle, data, hooks)
}

/// Train one variant from scratch: `full` runs both stages,
/// `single_stage` runs the cycle loop for the combined budget at full
/// learning rates, `no_regularizers` runs both stages with the self-cycle
/// term removed and reconstruction over the whole image.
pub fn run_variant<T: Scalar>(
    config: &TrainConfig,
    data: &LoadedDataset<T>,
    hooks: &mut TrainHooks<'_, T>,
) -> Result<ModelBundle<T>> {
    let bundle = ModelBundle::new(config.clone(), data.n_id())?;
    check_dataset(&bundle, data)?;
    continue_training(bundle, data, hooks)
}
