//! Training objectives. Adversarial terms are negated log-likelihoods (so
//! every loss is minimized), averaged over the batch, with probabilities
//! clamped at [`PROB_EPS`] before the logarithm.
//!
//! The batched `*_term` functions build onto a [`Graph`] and are what the
//! training loop uses; the plain functions evaluate one sample in f64 through
//! the same code.

use lbgan_nn::{BoundParams, Graph, ParamSet, Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::dataset::{AttentionMask, FaceImage};
use crate::error::{Error, Result};

pub const PROB_EPS: f64 = 1e-12;
const PROB_SUM_TOL: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_rec: f64,
    pub lambda_csc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_rec: 10.0, lambda_csc: 10.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.lambda_rec) || !ok(self.lambda_csc) {
            return Err(Error::Config(format!("loss weights must be finite and >= 0, got {self:?}")));
        }
        Ok(())
    }
}

/// Named scalars for one optimizer step. Terms not computed by that step
/// are zero. `d_n` is the full normalizer-discriminator loss; the editor
/// discriminator loss is split into its three summands.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub d_n: f64,
    pub g_n: f64,
    pub d_e_id: f64,
    pub d_e_pose: f64,
    pub d_e_fake: f64,
    pub g_e_pose: f64,
    pub g_e_id: f64,
    pub rec: f64,
    pub csc: f64,
    pub total_g: f64,
    pub total_d: f64,
}

impl LossReport {
    pub fn named(&self) -> [(&'static str, f64); 11] {
        [
            ("d_n", self.d_n),
            ("g_n", self.g_n),
            ("d_e_id", self.d_e_id),
            ("d_e_pose", self.d_e_pose),
            ("d_e_fake", self.d_e_fake),
            ("g_e_pose", self.g_e_pose),
            ("g_e_id", self.g_e_id),
            ("rec", self.rec),
            ("csc", self.csc),
            ("total_g", self.total_g),
            ("total_d", self.total_d),
        ]
    }

    /// First non-finite entry, if any.
    pub fn non_finite(&self) -> Option<&'static str> {
        self.named().into_iter().find(|(_, v)| !v.is_finite()).map(|(k, _)| k)
    }

    pub fn generator_sum(&self, w: &LossWeights) -> f64 {
        self.g_n + self.g_e_pose + self.g_e_id + w.lambda_rec * self.rec + w.lambda_csc * self.csc
    }

    pub fn discriminator_sum(&self) -> f64 {
        self.d_n + self.d_e_id + self.d_e_pose + self.d_e_fake
    }
}

fn f<T: Scalar>(g: &Graph<T>, v: Var) -> f64 {
    g.item(v).to_f64_lossy()
}

/// Batch mean of `-ln p[i, idx[i]]`.
pub fn nll_term<T: Scalar>(g: &mut Graph<T>, probs: Var, idx: &[usize]) -> Result<Var> {
    let per = g.pick_neg_log(probs, idx, PROB_EPS)?;
    Ok(g.mean(per))
}

/// Normalizer discriminator: real frontal samples toward their identity,
/// generated samples toward the fake class.
pub fn d_n_term<T: Scalar>(g: &mut Graph<T>, probs_real: Var, ids: &[usize], probs_fake: Var) -> Result<Var> {
    let fake = fake_indices(g, probs_fake)?;
    let a = nll_term(g, probs_real, ids)?;
    let b = nll_term(g, probs_fake, &fake)?;
    Ok(g.add(a, b)?)
}

/// Normalizer: generated samples toward the input's identity.
pub fn g_n_term<T: Scalar>(g: &mut Graph<T>, probs_fake: Var, ids: &[usize]) -> Result<Var> {
    nll_term(g, probs_fake, ids)
}

/// Editor discriminator terms `(identity, pose, fake)`.
pub fn d_e_terms<T: Scalar>(
    g: &mut Graph<T>,
    id_real: Var,
    ids: &[usize],
    pose_real: Var,
    poses: &[usize],
    id_fake: Var,
) -> Result<(Var, Var, Var)> {
    let fake = fake_indices(g, id_fake)?;
    Ok((nll_term(g, id_real, ids)?, nll_term(g, pose_real, poses)?, nll_term(g, id_fake, &fake)?))
}

/// Editor terms `(pose toward c*, identity toward y_id)`.
pub fn g_e_terms<T: Scalar>(
    g: &mut Graph<T>,
    pose_fake: Var,
    c_star: &[usize],
    id_fake: Var,
    ids: &[usize],
) -> Result<(Var, Var)> {
    Ok((nll_term(g, pose_fake, c_star)?, nll_term(g, id_fake, ids)?))
}

fn fake_indices<T: Scalar>(g: &Graph<T>, probs: Var) -> Result<Vec<usize>> {
    let s = g.shape(probs);
    if s.len() != 2 || s[1] < 2 {
        return Err(Error::InvalidInput(format!("identity probabilities must be [n, n_id + 1], got {s:?}")));
    }
    Ok(vec![s[1] - 1; s[0]])
}

/// Per-sample `||(x - x_hat) * M||_2` as an `[n]` node. `masks` is
/// `[n, 1, h, w]` (broadcast across channels) or exactly `x`'s shape.
pub fn attention_l2_per_sample<T: Scalar>(g: &mut Graph<T>, x: Var, x_hat: Var, masks: Tensor<T>) -> Result<Var> {
    if g.shape(x) != g.shape(x_hat) {
        return Err(Error::InvalidInput(format!("shape mismatch {:?} vs {:?}", g.shape(x), g.shape(x_hat))));
    }
    let d = g.sub(x, x_hat)?;
    let m = g.mul_const(d, masks).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let sq = g.square(m);
    let s = g.sum_per_sample(sq);
    Ok(g.sqrt(s))
}

pub fn attention_l2_term<T: Scalar>(g: &mut Graph<T>, x: Var, x_hat: Var, masks: Tensor<T>) -> Result<Var> {
    let per = attention_l2_per_sample(g, x, x_hat, masks)?;
    Ok(g.mean(per))
}

/// Batch mean of the masked norm over samples whose requested pose equals
/// their own pose; other samples contribute exactly zero.
pub fn csc_term<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    x_hat: Var,
    masks: Tensor<T>,
    poses: &[usize],
    c_star: &[usize],
) -> Result<Var> {
    if poses.len() != c_star.len() || g.shape(x).first() != Some(&poses.len()) {
        return Err(Error::InvalidInput("csc: batch size mismatch".into()));
    }
    let per = attention_l2_per_sample(g, x, x_hat, masks)?;
    let sel: Vec<T> = poses.iter().zip(c_star).map(|(p, c)| if p == c { T::one() } else { T::zero() }).collect();
    let sel = Tensor::new(vec![poses.len()], sel)?;
    let gated = g.mul_const(per, sel)?;
    Ok(g.mean(gated))
}

/// Everything the generator objective needs from one forward pass.
pub struct GeneratorLossInputs<'a, T> {
    /// D_N identity probabilities on G_N(x).
    pub dn_probs_fake: Var,
    /// D_E identity and pose probabilities on the editor output.
    pub de_id_fake: Var,
    pub de_pose_fake: Var,
    pub ids: &'a [usize],
    pub poses: &'a [usize],
    pub c_star: &'a [usize],
    /// Editor input and output.
    pub x: Var,
    pub x_hat: Var,
    /// Attention masks of the inputs, `[n, 1, s, s]`. `None` drops the
    /// conditional self-cycle term entirely.
    pub input_masks: Option<Tensor<T>>,
    /// Ground-truth images at pose c* and their masks.
    pub paired_target: Option<(Var, Tensor<T>)>,
}

/// `g_n + g_e + lambda_rec * rec + lambda_csc * csc`; zero-weight
/// regularizers are left out of the graph but still reported.
pub fn total_generator_loss<T: Scalar>(
    g: &mut Graph<T>,
    inp: GeneratorLossInputs<'_, T>,
    w: &LossWeights,
) -> Result<(Var, LossReport)> {
    let gn = g_n_term(g, inp.dn_probs_fake, inp.ids)?;
    let (ge_pose, ge_id) = g_e_terms(g, inp.de_pose_fake, inp.c_star, inp.de_id_fake, inp.ids)?;
    let mut total = g.add(gn, ge_pose)?;
    total = g.add(total, ge_id)?;
    let mut report = LossReport { g_n: f(g, gn), g_e_pose: f(g, ge_pose), g_e_id: f(g, ge_id), ..Default::default() };
    if let Some((target, masks)) = inp.paired_target {
        let rec = attention_l2_term(g, target, inp.x_hat, masks)?;
        report.rec = f(g, rec);
        if w.lambda_rec != 0.0 {
            let r = g.scale(rec, w.lambda_rec);
            total = g.add(total, r)?;
        }
    }
    if let Some(masks) = inp.input_masks {
        let csc = csc_term(g, inp.x, inp.x_hat, masks, inp.poses, inp.c_star)?;
        report.csc = f(g, csc);
        if w.lambda_csc != 0.0 {
            let c = g.scale(csc, w.lambda_csc);
            total = g.add(total, c)?;
        }
    }
    report.total_g = f(g, total);
    Ok((total, report))
}

fn check_probs(p: &[f64]) -> Result<()> {
    let s: f64 = p.iter().sum();
    if p.is_empty() || p.iter().any(|v| !(0.0..=1.0).contains(v)) || (s - 1.0).abs() > PROB_SUM_TOL {
        return Err(Error::InvalidInput(format!("not a probability vector: {p:?}")));
    }
    Ok(())
}

fn row(g: &mut Graph<f64>, p: &[f64]) -> Result<Var> {
    check_probs(p)?;
    Ok(g.input(Tensor::new(vec![1, p.len()], p.to_vec())?))
}

fn check_index(i: usize, len: usize) -> Result<()> {
    if i >= len {
        return Err(Error::InvalidIndex(i));
    }
    Ok(())
}

/// `-[ln p_real[y_id] + ln p_fake[n_id]]` for one sample.
pub fn d_n_loss(probs_real: &[f64], y_id: usize, probs_fake: &[f64]) -> Result<f64> {
    check_index(y_id, probs_real.len().saturating_sub(1))?;
    if probs_real.len() != probs_fake.len() {
        return Err(Error::InvalidInput("probability vectors differ in length".into()));
    }
    let mut g = Graph::new();
    let (r, fk) = (row(&mut g, probs_real)?, row(&mut g, probs_fake)?);
    let v = d_n_term(&mut g, r, &[y_id], fk)?;
    Ok(g.item(v))
}

/// `-ln p[y_id]` for one sample.
pub fn g_n_loss(probs_fake: &[f64], y_id: usize) -> Result<f64> {
    check_index(y_id, probs_fake.len().saturating_sub(1))?;
    let mut g = Graph::new();
    let p = row(&mut g, probs_fake)?;
    let v = g_n_term(&mut g, p, &[y_id])?;
    Ok(g.item(v))
}

pub fn d_e_loss(id_real: &[f64], y_id: usize, pose_real: &[f64], y_p_index: usize, id_fake: &[f64]) -> Result<f64> {
    check_index(y_id, id_real.len().saturating_sub(1))?;
    check_index(y_p_index, pose_real.len())?;
    let mut g = Graph::new();
    let (ir, pr, ifk) = (row(&mut g, id_real)?, row(&mut g, pose_real)?, row(&mut g, id_fake)?);
    let (a, b, c) = d_e_terms(&mut g, ir, &[y_id], pr, &[y_p_index], ifk)?;
    Ok(g.item(a) + g.item(b) + g.item(c))
}

pub fn g_e_loss(pose_fake: &[f64], c_star_index: usize, id_fake: &[f64], y_id: usize) -> Result<f64> {
    check_index(c_star_index, pose_fake.len())?;
    check_index(y_id, id_fake.len().saturating_sub(1))?;
    let mut g = Graph::new();
    let (pf, ifk) = (row(&mut g, pose_fake)?, row(&mut g, id_fake)?);
    let (a, b) = g_e_terms(&mut g, pf, &[c_star_index], ifk, &[y_id])?;
    Ok(g.item(a) + g.item(b))
}

/// Masked norm of `[c, h, w]` tensors with an `h x w` mask.
pub fn attention_l2_tensor<T: Scalar>(x: &Tensor<T>, x_hat: &Tensor<T>, m: &AttentionMask) -> Result<f64> {
    let s = x.shape();
    if s != x_hat.shape() || s.len() != 3 || s[1] != m.size() || s[2] != m.size() {
        return Err(Error::InvalidInput(format!(
            "attention_l2: {:?} vs {:?} with a {}x{} mask",
            s,
            x_hat.shape(),
            m.size(),
            m.size()
        )));
    }
    let mut g = Graph::new();
    let batched = |t: &Tensor<T>| t.clone().reshape(&[1, s[0], s[1], s[2]]);
    let (a, b) = (g.input(batched(x)?), g.input(batched(x_hat)?));
    let v = attention_l2_term(&mut g, a, b, m.to_tensor())?;
    Ok(f(&g, v))
}

pub fn attention_l2<T: Scalar>(x: &FaceImage<T>, x_hat: &FaceImage<T>, m: &AttentionMask) -> Result<f64> {
    attention_l2_tensor(x.tensor(), x_hat.tensor(), m)
}

pub fn csc_loss<T: Scalar>(
    x: &FaceImage<T>,
    x_hat: &FaceImage<T>,
    m: &AttentionMask,
    y_p_index: usize,
    c_star_index: usize,
) -> Result<f64> {
    let v = attention_l2(x, x_hat, m)?;
    Ok(if y_p_index == c_star_index { v } else { 0.0 })
}

/// Root mean square over masked entries: the masked norm divided by the
/// square root of `channels * |M|`. Zero for an empty mask.
pub fn per_pixel_masked_l2<T: Scalar>(x: &FaceImage<T>, x_hat: &FaceImage<T>, m: &AttentionMask) -> Result<f64> {
    let n = 3 * m.count();
    if n == 0 {
        return Ok(0.0);
    }
    Ok(attention_l2(x, x_hat, m)? / (n as f64).sqrt())
}

/// Compares the analytic gradient of `loss` with respect to every tensor in
/// `params` against central differences with step `epsilon`, on at most
/// `max_coords` evenly spaced coordinates per tensor. Returns the largest
/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn finite_difference_check<F>(params: &ParamSet<f64>, epsilon: f64, max_coords: usize, loss: F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &BoundParams) -> Result<Var>,
{
    let eval = |p: &ParamSet<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let b = p.bind(&mut g, false);
        let v = loss(&mut g, &b)?;
        let out = g.item(v);
        if !out.is_finite() {
            return Err(Error::InvalidInput("finite-difference check: non-finite loss".into()));
        }
        Ok(out)
    };
    let mut g = Graph::new();
    let b = params.bind(&mut g, true);
    let root = loss(&mut g, &b)?;
    if !g.item(root).is_finite() {
        return Err(Error::InvalidInput("finite-difference check: non-finite loss".into()));
    }
    let mut grads = g.backward(root);
    let analytic = params.collect_grads(&b, &mut grads);
    let mut worst: f64 = 0.0;
    let mut probe = params.clone();
    for (ti, t) in params.tensors().iter().enumerate() {
        let step = t.len().div_ceil(max_coords.max(1)).max(1);
        for j in (0..t.len()).step_by(step) {
            let orig = t.data()[j];
            probe.tensors_mut()[ti].data_mut()[j] = orig + epsilon;
            let plus = eval(&probe)?;
            probe.tensors_mut()[ti].data_mut()[j] = orig - epsilon;
            let minus = eval(&probe)?;
            probe.tensors_mut()[ti].data_mut()[j] = orig;
            let n = (plus - minus) / (2.0 * epsilon);
            let a = analytic[ti].data()[j];
            worst = worst.max((a - n).abs() / a.abs().max(n.abs()).max(1e-8));
        }
    }
    Ok(worst)
}
