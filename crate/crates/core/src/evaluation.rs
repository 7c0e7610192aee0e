//! Measurement harness: a locally trained identity embedder and pose
//! models stand in for external recognizers; rank-1 identification across
//! yaw, pose-error tables and the variant comparison are built on them.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use lbgan_nn::{Adam, AdamConfig, Graph, Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::manifest::{identity_seed, Split};
use crate::dataset::{code_for_degrees, make_remote_code, FaceImage, LoadedDataset, N_POSES, POSE_GRID};
use crate::error::{Error, Result};
use crate::inference::{frontalize_batch, rotate_batch};
use crate::losses::per_pixel_masked_l2;
use crate::networks::{DiscriminatorHeadConfig, DiscriminatorParams, EncoderConfig};
use crate::training::{ModelBundle, Variant};

/// Training setup shared by the three auxiliary models.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub network: EncoderConfig,
    pub iterations: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Largest |yaw| the embedder and pose regressor are trained on.
    pub estimator_range_degrees: f64,
    pub embedder_accuracy_target: f64,
}

impl EvalConfig {
    pub fn for_image_size(image_size: usize) -> Self {
        let n_blocks = (image_size.trailing_zeros() as usize).saturating_sub(2).clamp(1, 5);
        Self {
            network: EncoderConfig { image_size, base_channels: 16, n_blocks, bottleneck_dim: 64 },
            iterations: 1500,
            batch_size: 32,
            lr: 1e-3,
            seed: 7,
            estimator_range_degrees: 30.0,
            embedder_accuracy_target: 0.95,
        }
    }
}

/// An encoder trunk with one linear head, trained with either a softmax
/// classification or a squared-error regression objective.
#[derive(Clone, Debug)]
pub struct AuxModel<T> {
    pub net: DiscriminatorParams<T>,
}

enum Target<'a> {
    Classes(&'a [usize]),
    Values(&'a [f64]),
}

impl<T: Scalar> AuxModel<T> {
    fn new(network: EncoderConfig, outputs: usize, seed: u64) -> Result<Self> {
        let heads = DiscriminatorHeadConfig { n_identity_classes: outputs, n_pose_classes: None };
        Ok(Self { net: DiscriminatorParams::new(network, heads, seed)? })
    }

    fn fit(
        &mut self,
        cfg: &EvalConfig,
        images: &[&FaceImage<T>],
        target: Target<'_>,
        seed: u64,
    ) -> Result<()> {
        if images.is_empty() {
            return Err(Error::Protocol("no training images for an auxiliary model".into()));
        }
        // Standard Adam momentum for a supervised objective.
        let mut opt = Adam::new(&self.net.params, AdamConfig { beta1: 0.9, ..AdamConfig::default() });
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..cfg.iterations {
            let idx: Vec<usize> = (0..cfg.batch_size).map(|_| rng.random_range(0..images.len())).collect();
            let batch = Tensor::stack(&idx.iter().map(|&i| images[i].tensor()).collect::<Vec<_>>())?;
            let mut g = Graph::new();
            let p = self.net.bind(&mut g, true);
            let x = g.input(batch);
            let out = self.net.logits(&mut g, &p, x)?.identity;
            let loss = match &target {
                Target::Classes(c) => {
                    let probs = g.softmax(out)?;
                    let y: Vec<usize> = idx.iter().map(|&i| c[i]).collect();
                    let l = g.pick_neg_log(probs, &y, 1e-12)?;
                    g.mean(l)
                }
                Target::Values(v) => {
                    let y: Vec<f64> = idx.iter().map(|&i| v[i]).collect();
                    let y = g.input(Tensor::from_f64(&[idx.len(), 1], &y)?);
                    let d = g.sub(out, y)?;
                    let sq = g.square(d);
                    g.mean(sq)
                }
            };
            let grads = self.net.params.collect_grads(&p, &mut g.backward(loss));
            opt.apply(&mut self.net.params, &grads, cfg.lr)?;
        }
        Ok(())
    }

    /// Head outputs and trunk features for every image.
    fn run(&self, images: &[&FaceImage<T>]) -> Result<(Rows, Rows)> {
        let mut outs = Vec::new();
        let mut feats = Vec::new();
        for chunk in images.chunks(64) {
            let mut g = Graph::new();
            let p = self.net.bind(&mut g, false);
            let x = g.input(Tensor::stack(&chunk.iter().map(|x| x.tensor()).collect::<Vec<_>>())?);
            let f = self.net.features(&mut g, &p, x)?;
            let o = self.net.logits(&mut g, &p, x)?.identity;
            let rows = |t: &Tensor<T>| t.unstack().iter().map(|r| r.to_f64_vec()).collect::<Vec<_>>();
            outs.extend(rows(g.value(o)));
            feats.extend(rows(g.value(f)));
        }
        Ok((outs, feats))
    }

    pub fn classify(&self, images: &[&FaceImage<T>]) -> Result<Vec<usize>> {
        Ok(self.run(images)?.0.iter().map(|r| argmax(r)).collect())
    }
}

type Rows = Vec<Vec<f64>>;

fn argmax(v: &[f64]) -> usize {
    v.iter().enumerate().fold(0, |best, (i, &x)| if x > v[best] { i } else { best })
}

/// Identity embedder: penultimate features of an identity classifier.
#[derive(Clone, Debug)]
pub struct EmbedderModel<T> {
    pub model: AuxModel<T>,
    pub embedding_dim: usize,
    /// Accuracy on the frontal training images.
    pub train_accuracy: f64,
    pub converged: bool,
}

impl<T: Scalar> EmbedderModel<T> {
    pub fn embed(&self, images: &[&FaceImage<T>]) -> Result<Vec<Vec<f64>>> {
        Ok(self.model.run(images)?.1)
    }
}

/// Yaw classifier over the 13 grid bins.
#[derive(Clone, Debug)]
pub struct PoseClassifierModel<T> {
    pub model: AuxModel<T>,
    pub train_accuracy: f64,
}

/// Continuous yaw regressor.
#[derive(Clone, Debug)]
pub struct PoseEstimatorModel<T> {
    pub model: AuxModel<T>,
    pub range_degrees: f64,
    pub train_mae_degrees: f64,
}

impl<T: Scalar> PoseEstimatorModel<T> {
    pub fn predict(&self, images: &[&FaceImage<T>]) -> Result<Vec<f64>> {
        Ok(self.model.run(images)?.0.iter().map(|r| r[0] * 90.0).collect())
    }
}

fn train_split_check<T>(data: &LoadedDataset<T>) -> Result<()> {
    if data.manifest.split != Split::Train {
        return Err(Error::Protocol("auxiliary models must be trained on the training split".into()));
    }
    if data.manifest.n_id < 2 {
        return Err(Error::Protocol("need at least 2 training identities".into()));
    }
    Ok(())
}

pub fn train_embedder<T: Scalar>(cfg: &EvalConfig, train: &LoadedDataset<T>) -> Result<EmbedderModel<T>> {
    train_split_check(train)?;
    let pick: Vec<usize> = (0..train.len())
        .filter(|&i| train.record(i).pose_degrees.degrees().abs() as f64 <= cfg.estimator_range_degrees)
        .collect();
    let images: Vec<&FaceImage<T>> = pick.iter().map(|&i| &train.images[i]).collect();
    let labels: Vec<usize> = pick.iter().map(|&i| train.record(i).id.0).collect();
    let mut model = AuxModel::new(cfg.network, train.n_id(), cfg.seed)?;
    model.fit(cfg, &images, Target::Classes(&labels), cfg.seed ^ 0xE)?;
    let frontal: Vec<usize> = (0..train.len()).filter(|&i| train.record(i).pose_degrees.is_frontal()).collect();
    let pred = model.classify(&frontal.iter().map(|&i| &train.images[i]).collect::<Vec<_>>())?;
    let hits = frontal.iter().zip(&pred).filter(|(&i, &p)| train.record(i).id.0 == p).count();
    let train_accuracy = hits as f64 / frontal.len().max(1) as f64;
    Ok(EmbedderModel {
        model,
        embedding_dim: cfg.network.bottleneck_dim,
        train_accuracy,
        converged: train_accuracy >= cfg.embedder_accuracy_target,
    })
}

pub fn train_pose_classifier<T: Scalar>(cfg: &EvalConfig, train: &LoadedDataset<T>) -> Result<PoseClassifierModel<T>> {
    train_split_check(train)?;
    let images: Vec<&FaceImage<T>> = train.images.iter().collect();
    let labels: Vec<usize> = (0..train.len()).map(|i| train.record(i).pose_degrees.index()).collect();
    let mut model = AuxModel::new(cfg.network, N_POSES, cfg.seed.wrapping_add(1))?;
    model.fit(cfg, &images, Target::Classes(&labels), cfg.seed ^ 0xC)?;
    let pred = model.classify(&images)?;
    let hits = pred.iter().zip(&labels).filter(|(a, b)| a == b).count();
    Ok(PoseClassifierModel { model, train_accuracy: hits as f64 / labels.len() as f64 })
}

pub fn train_pose_estimator<T: Scalar>(cfg: &EvalConfig, train: &LoadedDataset<T>) -> Result<PoseEstimatorModel<T>> {
    train_split_check(train)?;
    let pick: Vec<usize> = (0..train.len())
        .filter(|&i| train.record(i).pose_degrees.degrees().abs() as f64 <= cfg.estimator_range_degrees)
        .collect();
    let images: Vec<&FaceImage<T>> = pick.iter().map(|&i| &train.images[i]).collect();
    let yaw: Vec<f64> = pick.iter().map(|&i| train.record(i).pose_degrees.degrees() as f64).collect();
    let scaled: Vec<f64> = yaw.iter().map(|d| d / 90.0).collect();
    let mut model = AuxModel::new(cfg.network, 1, cfg.seed.wrapping_add(2))?;
    model.fit(cfg, &images, Target::Values(&scaled), cfg.seed ^ 0x9)?;
    let est = PoseEstimatorModel { model, range_degrees: cfg.estimator_range_degrees, train_mae_degrees: 0.0 };
    let pred = est.predict(&images)?;
    let mae = pred.iter().zip(&yaw).map(|(p, y)| (p - y).abs()).sum::<f64>() / yaw.len() as f64;
    Ok(PoseEstimatorModel { train_mae_degrees: mae, ..est })
}

/// The three auxiliary models, trained once on the training split.
#[derive(Clone, Debug)]
pub struct EvalModels<T> {
    pub embedder: EmbedderModel<T>,
    pub pose_classifier: PoseClassifierModel<T>,
    pub pose_estimator: PoseEstimatorModel<T>,
}

impl<T: Scalar> EvalModels<T> {
    pub fn train(cfg: &EvalConfig, train: &LoadedDataset<T>) -> Result<Self> {
        Ok(Self {
            embedder: train_embedder(cfg, train)?,
            pose_classifier: train_pose_classifier(cfg, train)?,
            pose_estimator: train_pose_estimator(cfg, train)?,
        })
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Nearest gallery identity by cosine similarity for each probe, with the
/// similarity. Ties go to the earliest gallery entry.
pub fn rank1_match(gallery: &[(usize, Vec<f64>)], probes: &[(usize, Vec<f64>)]) -> Result<Vec<(usize, f64)>> {
    for (id, _) in probes {
        if !gallery.iter().any(|(g, _)| g == id) {
            return Err(Error::Protocol(format!("probe identity {id} has no gallery image")));
        }
    }
    Ok(probes
        .iter()
        .map(|(_, e)| {
            gallery.iter().fold((usize::MAX, f64::NEG_INFINITY), |best, (gid, ge)| {
                let s = cosine(e, ge);
                if s > best.1 {
                    (*gid, s)
                } else {
                    best
                }
            })
        })
        .collect())
}

/// One probe for identification.
pub struct Probe<'a, T> {
    pub id: usize,
    pub yaw_degrees: f64,
    pub image: &'a FaceImage<T>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchRecord {
    pub probe_kind: String,
    pub id: usize,
    pub yaw_degrees: f64,
    pub predicted_id: usize,
    pub similarity: f64,
    pub correct: bool,
}

/// Rate for one |yaw| column.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateRow {
    pub abs_degrees: f64,
    pub rate: f64,
    pub n: usize,
}

fn abs_key(d: f64) -> u64 {
    (d.abs() * 10.0).round() as u64
}

fn rows_by_abs_yaw(items: impl IntoIterator<Item = (f64, f64)>) -> Vec<RateRow> {
    let mut acc: BTreeMap<u64, (f64, usize)> = BTreeMap::new();
    for (deg, v) in items {
        let e = acc.entry(abs_key(deg)).or_insert((0.0, 0));
        e.0 += v;
        e.1 += 1;
    }
    acc.into_iter().map(|(k, (s, n))| RateRow { abs_degrees: k as f64 / 10.0, rate: s / n as f64, n }).collect()
}

/// Rank-1 rate per |yaw| column plus the per-probe audit trail.
pub fn rank1_identification<T: Scalar>(
    embedder: &EmbedderModel<T>,
    gallery: &[(usize, &FaceImage<T>)],
    probes: &[Probe<'_, T>],
    probe_kind: &str,
) -> Result<(Vec<RateRow>, Vec<MatchRecord>)> {
    let ge = embedder.embed(&gallery.iter().map(|g| g.1).collect::<Vec<_>>())?;
    let pe = embedder.embed(&probes.iter().map(|p| p.image).collect::<Vec<_>>())?;
    let gallery_e: Vec<(usize, Vec<f64>)> = gallery.iter().map(|g| g.0).zip(ge).collect();
    let probe_e: Vec<(usize, Vec<f64>)> = probes.iter().map(|p| p.id).zip(pe).collect();
    let matches = rank1_match(&gallery_e, &probe_e)?;
    let records: Vec<MatchRecord> = probes
        .iter()
        .zip(&matches)
        .map(|(p, &(pred, sim))| MatchRecord {
            probe_kind: probe_kind.to_string(),
            id: p.id,
            yaw_degrees: p.yaw_degrees,
            predicted_id: pred,
            similarity: sim,
            correct: pred == p.id,
        })
        .collect();
    let rows = rows_by_abs_yaw(records.iter().map(|r| (r.yaw_degrees, if r.correct { 1.0 } else { 0.0 })));
    Ok((rows, records))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseErrorRow {
    pub abs_degrees: f64,
    /// Reached only through code interpolation.
    pub interpolated: bool,
    pub genuine: Option<f64>,
    pub synthesized: Option<f64>,
    pub n_genuine: usize,
    pub n_synthesized: usize,
}

/// Mean |predicted - target| per |yaw| column, separately for genuine and
/// synthesized images, restricted to the estimator's range. Columns with
/// no images of either kind are omitted.
pub fn pose_error_table<T: Scalar>(
    estimator: &PoseEstimatorModel<T>,
    genuine: &[(f64, &FaceImage<T>)],
    synthesized: &[(f64, &FaceImage<T>)],
) -> Result<Vec<PoseErrorRow>> {
    let in_range = |d: f64| d.abs() <= estimator.range_degrees + 1e-9;
    let errors = |set: &[(f64, &FaceImage<T>)]| -> Result<Vec<(f64, f64)>> {
        let kept: Vec<&(f64, &FaceImage<T>)> = set.iter().filter(|(d, _)| in_range(*d)).collect();
        let pred = estimator.predict(&kept.iter().map(|(_, x)| *x).collect::<Vec<_>>())?;
        Ok(kept.iter().zip(pred).map(|((d, _), p)| (*d, (p - d).abs())).collect())
    };
    Ok(pose_error_rows(&errors(genuine)?, &errors(synthesized)?))
}

/// Table assembly from `(target degrees, absolute error)` pairs.
pub fn pose_error_rows(genuine: &[(f64, f64)], synthesized: &[(f64, f64)]) -> Vec<PoseErrorRow> {
    let g = rows_by_abs_yaw(genuine.iter().copied());
    let s = rows_by_abs_yaw(synthesized.iter().copied());
    let mut keys: Vec<u64> = g.iter().chain(&s).map(|r| abs_key(r.abs_degrees)).collect();
    keys.sort_unstable();
    keys.dedup();
    keys.into_iter()
        .map(|k| {
            let find = |rows: &[RateRow]| rows.iter().find(|r| abs_key(r.abs_degrees) == k).cloned();
            let (gr, sr) = (find(&g), find(&s));
            PoseErrorRow {
                abs_degrees: k as f64 / 10.0,
                interpolated: k % 150 != 0,
                genuine: gr.as_ref().map(|r| r.rate),
                synthesized: sr.as_ref().map(|r| r.rate),
                n_genuine: gr.map_or(0, |r| r.n),
                n_synthesized: sr.map_or(0, |r| r.n),
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuxSummary {
    pub embedder_train_accuracy: f64,
    pub embedder_converged: bool,
    pub embedding_dim: usize,
    pub pose_classifier_train_accuracy: f64,
    pub pose_estimator_train_mae_degrees: f64,
    pub pose_estimator_range_degrees: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: Variant,
    pub stage: u8,
    pub iteration: u64,
    pub n_test_identities: usize,
    pub chance_rate: f64,
    pub aux: AuxSummary,
    /// Rank-1 of unmodified probes per |yaw| column.
    pub rank1_raw: Vec<RateRow>,
    /// Rank-1 of normalizer-frontalized probes per |yaw| column.
    pub rank1_frontalized: Vec<RateRow>,
    /// Mean over the non-frontal columns.
    pub mean_rank1_raw: f64,
    pub mean_rank1_frontalized: f64,
    /// Mean per-pixel masked L2 of every test image rotated to its own pose.
    pub identity_matched_l2: f64,
    /// Same statistic between frontal images of distinct identities, as a
    /// reference scale.
    pub distinct_identity_l2: f64,
    /// Fraction of rotations to each grid pose that the pose classifier
    /// assigns to the requested bin.
    pub pose_accuracy: f64,
    pub pose_accuracy_by_target: Vec<RateRow>,
    pub pose_errors: Vec<PoseErrorRow>,
    pub warnings: Vec<String>,
    #[serde(skip)]
    pub matches: Vec<MatchRecord>,
}

pub const POSE_TABLE_TARGETS: [f64; 9] = [-30.0, -22.5, -15.0, -7.5, 0.0, 7.5, 15.0, 22.5, 30.0];

/// Checks that the two splits come from disjoint identity streams.
pub fn check_disjoint<T>(train: &LoadedDataset<T>, test: &LoadedDataset<T>) -> Result<()> {
    let (a, b) = (&train.manifest, &test.manifest);
    if a.split != Split::Train || b.split != Split::Test {
        return Err(Error::Protocol(format!("expected train/test splits, got {:?}/{:?}", a.split, b.split)));
    }
    if let (Some(sa), Some(sb)) = (a.seed, b.seed) {
        let ta: Vec<u64> = (0..a.n_id).map(|i| identity_seed(sa, Split::Train, i)).collect();
        if (0..b.n_id).any(|i| ta.contains(&identity_seed(sb, Split::Test, i))) {
            return Err(Error::Protocol("train and test identities overlap".into()));
        }
    }
    Ok(())
}

/// Runs every protocol on the test split.
pub fn evaluate<T: Scalar>(bundle: &ModelBundle<T>, models: &EvalModels<T>, test: &LoadedDataset<T>) -> Result<EvalReport> {
    if test.manifest.split != Split::Test {
        return Err(Error::Protocol("evaluation needs the test split".into()));
    }
    let mut warnings = Vec::new();
    if !models.embedder.converged {
        warnings.push(format!(
            "embedder reached only {:.1}% frontal training accuracy",
            100.0 * models.embedder.train_accuracy
        ));
    }
    if bundle.position.stage == 0 {
        warnings.push("model is untrained".into());
    }
    let n = test.len();
    let deg = |i: usize| test.record(i).pose_degrees.degrees() as f64;
    let id = |i: usize| test.record(i).id.0;
    let frontal: Vec<usize> = (0..n).filter(|&i| test.record(i).pose_degrees.is_frontal()).collect();
    let gallery: Vec<(usize, &FaceImage<T>)> = frontal.iter().map(|&i| (id(i), &test.images[i])).collect();

    let raw: Vec<Probe<'_, T>> = (0..n).map(|i| Probe { id: id(i), yaw_degrees: deg(i), image: &test.images[i] }).collect();
    let (rank1_raw, mut matches) = rank1_identification(&models.embedder, &gallery, &raw, "raw")?;
    let fronts = frontalize_batch(bundle, &test.images)?;
    let fp: Vec<Probe<'_, T>> = (0..n).map(|i| Probe { id: id(i), yaw_degrees: deg(i), image: &fronts[i] }).collect();
    let (rank1_frontalized, m2) = rank1_identification(&models.embedder, &gallery, &fp, "frontalized")?;
    matches.extend(m2);
    let profile_mean = |rows: &[RateRow]| {
        let r: Vec<f64> = rows.iter().filter(|r| r.abs_degrees > 0.0).map(|r| r.rate).collect();
        r.iter().sum::<f64>() / r.len().max(1) as f64
    };

    // Identity-matched rotation.
    let own: Vec<_> = (0..n).map(|i| make_remote_code(test.record(i).pose_degrees.index())).collect::<Result<_>>()?;
    let same = rotate_batch(bundle, &test.images, &own)?;
    let l2s = (0..n)
        .map(|i| per_pixel_masked_l2(&test.images[i], &same[i], &test.masks[i]))
        .collect::<Result<Vec<_>>>()?;
    let identity_matched_l2 = l2s.iter().sum::<f64>() / n as f64;
    let mut d = Vec::new();
    for (a, &i) in frontal.iter().enumerate() {
        for &j in &frontal[a + 1..] {
            d.push(per_pixel_masked_l2(&test.images[i], &test.images[j], &test.masks[i])?);
        }
    }
    let distinct_identity_l2 = d.iter().sum::<f64>() / d.len().max(1) as f64;

    // Pose control on the grid.
    let mut inputs = Vec::with_capacity(n * N_POSES);
    let mut codes = Vec::with_capacity(n * N_POSES);
    let mut targets = Vec::with_capacity(n * N_POSES);
    for k in 0..N_POSES {
        for x in &test.images {
            inputs.push(x.clone());
            codes.push(make_remote_code(k)?);
            targets.push(k);
        }
    }
    let generated = rotate_batch(bundle, &inputs, &codes)?;
    let pred = models.pose_classifier.model.classify(&generated.iter().collect::<Vec<_>>())?;
    let hits: Vec<(f64, f64)> = pred
        .iter()
        .zip(&targets)
        .map(|(p, &t)| (POSE_GRID[t] as f64, if *p == t { 1.0 } else { 0.0 }))
        .collect();
    let pose_accuracy = hits.iter().map(|h| h.1).sum::<f64>() / hits.len() as f64;
    let mut by_target: BTreeMap<i64, (f64, usize)> = BTreeMap::new();
    for (d, h) in &hits {
        let e = by_target.entry(*d as i64).or_insert((0.0, 0));
        e.0 += h;
        e.1 += 1;
    }
    let pose_accuracy_by_target =
        by_target.into_iter().map(|(d, (s, c))| RateRow { abs_degrees: d as f64, rate: s / c as f64, n: c }).collect();

    // Pose-estimation errors inside the estimator's range.
    let mut synth_inputs = Vec::new();
    let mut synth_codes = Vec::new();
    let mut synth_deg = Vec::new();
    for &t in &POSE_TABLE_TARGETS {
        for x in &test.images {
            synth_inputs.push(x.clone());
            synth_codes.push(code_for_degrees(t)?);
            synth_deg.push(t);
        }
    }
    let synth = rotate_batch(bundle, &synth_inputs, &synth_codes)?;
    let genuine: Vec<(f64, &FaceImage<T>)> = (0..n).map(|i| (deg(i), &test.images[i])).collect();
    let synthesized: Vec<(f64, &FaceImage<T>)> = synth_deg.iter().copied().zip(synth.iter()).collect();
    let pose_errors = pose_error_table(&models.pose_estimator, &genuine, &synthesized)?;

    let report = EvalReport {
        variant: bundle.config.variant,
        stage: bundle.position.stage,
        iteration: bundle.position.iteration,
        n_test_identities: test.n_id(),
        chance_rate: 1.0 / test.n_id() as f64,
        aux: AuxSummary {
            embedder_train_accuracy: models.embedder.train_accuracy,
            embedder_converged: models.embedder.converged,
            embedding_dim: models.embedder.embedding_dim,
            pose_classifier_train_accuracy: models.pose_classifier.train_accuracy,
            pose_estimator_train_mae_degrees: models.pose_estimator.train_mae_degrees,
            pose_estimator_range_degrees: models.pose_estimator.range_degrees,
        },
        mean_rank1_raw: profile_mean(&rank1_raw),
        mean_rank1_frontalized: profile_mean(&rank1_frontalized),
        rank1_raw,
        rank1_frontalized,
        identity_matched_l2,
        distinct_identity_l2,
        pose_accuracy,
        pose_accuracy_by_target,
        pose_errors,
        warnings,
        matches,
    };
    Ok(report)
}

fn pct(v: f64) -> String {
    format!("{:.1}", 100.0 * v)
}

fn opt(v: Option<f64>) -> String {
    v.map_or("-".into(), |v| format!("{v:.2}"))
}

/// Left-aligned first column, right-aligned others.
fn aligned(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(|r| r.len()).max().unwrap_or(0);
    let widths: Vec<usize> =
        (0..cols).map(|c| rows.iter().filter_map(|r| r.get(c)).map(|s| s.len()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for r in rows {
        let line: Vec<String> = r
            .iter()
            .enumerate()
            .map(|(c, s)| if c == 0 { format!("{s:<w$}", w = widths[c]) } else { format!("{s:>w$}", w = widths[c]) })
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out
}

fn deg_label(d: f64) -> String {
    if d == 0.0 {
        "0".into()
    } else if d.fract() == 0.0 {
        format!("±{d:.0}")
    } else {
        format!("±{d:.1}")
    }
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "variant {} (stage {}, iteration {})", self.variant, self.stage, self.iteration);
        let _ = writeln!(
            s,
            "test identities {}  chance {}%  embedder acc {}% (dim {})",
            self.n_test_identities,
            pct(self.chance_rate),
            pct(self.aux.embedder_train_accuracy),
            self.aux.embedding_dim
        );
        let _ = writeln!(s, "\nrank-1 identification (%)");
        let mut rows = vec![std::iter::once("probe".to_string())
            .chain(self.rank1_raw.iter().map(|r| deg_label(r.abs_degrees)))
            .chain(std::iter::once("mean".into()))
            .collect::<Vec<_>>()];
        for (name, r, m) in [
            ("raw", &self.rank1_raw, self.mean_rank1_raw),
            ("frontalized", &self.rank1_frontalized, self.mean_rank1_frontalized),
        ] {
            rows.push(
                std::iter::once(name.to_string())
                    .chain(r.iter().map(|x| pct(x.rate)))
                    .chain(std::iter::once(pct(m)))
                    .collect(),
            );
        }
        s.push_str(&aligned(&rows));
        let _ = writeln!(s, "\nmean pose estimation error (degrees)");
        let mut rows = vec![std::iter::once("data".to_string())
            .chain(self.pose_errors.iter().map(|r| deg_label(r.abs_degrees)))
            .collect::<Vec<_>>()];
        rows.push(std::iter::once("genuine".into()).chain(self.pose_errors.iter().map(|r| opt(r.genuine))).collect());
        rows.push(
            std::iter::once("synthesized".into()).chain(self.pose_errors.iter().map(|r| opt(r.synthesized))).collect(),
        );
        s.push_str(&aligned(&rows));
        let _ = writeln!(s, "\npose classifier agreement with requested bin: {}%", pct(self.pose_accuracy));
        let _ = writeln!(
            s,
            "identity-matched rotation masked L2: {:.4} (distinct identities {:.4})",
            self.identity_matched_l2, self.distinct_identity_l2
        );
        for w in &self.warnings {
            let _ = writeln!(s, "warning: {w}");
        }
        s
    }

    /// One line per identification probe.
    pub fn matches_csv(&self) -> String {
        let mut s = String::from("probe_kind,id,yaw_degrees,predicted_id,similarity,correct\n");
        for m in &self.matches {
            let _ = writeln!(s, "{},{},{},{},{:.6},{}", m.probe_kind, m.id, m.yaw_degrees, m.predicted_id, m.similarity, m.correct);
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub rank1: Vec<RateRow>,
    pub mean_rank1: f64,
    /// `full - this` per column (zero for the full row).
    pub delta_vs_full: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    /// Whether the full variant's mean is at least each ablation's.
    pub full_at_least: BTreeMap<String, bool>,
    /// Columns where an ablation beats the full variant.
    pub violations: Vec<String>,
}

/// Compares frontalized-probe rank-1 of each variant against `full` over the
/// non-frontal columns.
pub fn ablation_compare(reports: &[EvalReport]) -> Result<AblationTable> {
    let full = reports
        .iter()
        .find(|r| r.variant == Variant::Full)
        .ok_or_else(|| Error::Protocol("ablation needs a full-variant report".into()))?;
    let cols = |r: &EvalReport| r.rank1_frontalized.iter().filter(|x| x.abs_degrees > 0.0).cloned().collect::<Vec<_>>();
    let full_cols = cols(full);
    let mut rows = Vec::new();
    let mut full_at_least = BTreeMap::new();
    let mut violations = Vec::new();
    for r in reports {
        let c = cols(r);
        if c.len() != full_cols.len() || c.iter().zip(&full_cols).any(|(a, b)| a.abs_degrees != b.abs_degrees) {
            return Err(Error::Protocol(format!("{} report has different pose columns", r.variant)));
        }
        let delta: Vec<f64> = full_cols.iter().zip(&c).map(|(f, x)| f.rate - x.rate).collect();
        if r.variant != Variant::Full {
            full_at_least.insert(r.variant.to_string(), full.mean_rank1_frontalized >= r.mean_rank1_frontalized);
            for (col, d) in c.iter().zip(&delta) {
                if *d < 0.0 {
                    violations.push(format!("{} beats full at {}", r.variant, deg_label(col.abs_degrees)));
                }
            }
        }
        rows.push(AblationRow { variant: r.variant, mean_rank1: r.mean_rank1_frontalized, rank1: c, delta_vs_full: delta });
    }
    Ok(AblationTable { rows, full_at_least, violations })
}

impl AblationTable {
    pub fn to_text(&self) -> String {
        let mut rows = Vec::new();
        if let Some(first) = self.rows.first() {
            rows.push(
                std::iter::once("variant".to_string())
                    .chain(first.rank1.iter().map(|r| deg_label(r.abs_degrees)))
                    .chain(std::iter::once("mean".into()))
                    .collect::<Vec<_>>(),
            );
        }
        for r in &self.rows {
            rows.push(
                std::iter::once(r.variant.to_string())
                    .chain(r.rank1.iter().map(|x| pct(x.rate)))
                    .chain(std::iter::once(pct(r.mean_rank1)))
                    .collect(),
            );
        }
        let mut s = String::from("frontalized rank-1 (%) by variant\n");
        s.push_str(&aligned(&rows));
        for (v, ok) in &self.full_at_least {
            let _ = writeln!(s, "full >= {v}: {ok}");
        }
        for v in &self.violations {
            let _ = writeln!(s, "note: {v}");
        }
        s
    }
}
