//! Normalizer and editor generators (encoder-decoder) and the two
//! discriminators (encoder-classifier).
//!
//! Layer schedule for `n_blocks = B`: block `i` is a 4x4 stride-2 convolution
//! to `base_channels * 2^min(i, 3)` channels followed by LeakyReLU(0.2); the
//! `image_size / 2^B` feature map is flattened and mapped linearly to the
//! bottleneck. The decoder mirrors it: a linear layer and ReLU back to the
//! last feature map, then 4x4 stride-2 transposed convolutions (ReLU between,
//! tanh at the output). The editor concatenates its remote code onto the
//! bottleneck vector before the decoder's linear layer.
//!
//! Weights start He-normal and biases at zero.

use lbgan_nn::{BoundParams, Graph, Initializer, ParamSet, Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::dataset::{FaceImage, RemoteCode, N_POSES};
use crate::error::{Error, Result};

pub const KERNEL: usize = 4;
pub const LEAKY_SLOPE: f64 = 0.2;
const MAX_CHANNEL_DOUBLINGS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub base_channels: usize,
    pub n_blocks: usize,
    pub bottleneck_dim: usize,
}

impl EncoderConfig {
    /// 96 pixels, five blocks down to 3x3, 256-wide bottleneck.
    pub fn paper() -> Self {
        Self { image_size: 96, base_channels: 32, n_blocks: 5, bottleneck_dim: 256 }
    }

    /// 32 pixels, three blocks down to 4x4. Narrower trunks generalize
    /// noticeably worse to unseen identities at this budget.
    pub fn desk() -> Self {
        Self { image_size: 32, base_channels: 48, n_blocks: 3, bottleneck_dim: 128 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bottleneck_dim == 0 || self.base_channels == 0 || self.n_blocks == 0 {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        let div = 1usize.checked_shl(self.n_blocks as u32).unwrap_or(0);
        if div == 0 || !self.image_size.is_multiple_of(div) || self.image_size / div == 0 {
            return Err(Error::Config(format!(
                "image_size {} cannot be halved {} times",
                self.image_size, self.n_blocks
            )));
        }
        Ok(())
    }

    pub fn channels(&self, block: usize) -> usize {
        self.base_channels << block.min(MAX_CHANNEL_DOUBLINGS)
    }

    pub fn final_spatial(&self) -> usize {
        self.image_size >> self.n_blocks
    }

    pub fn flat_dim(&self) -> usize {
        let s = self.final_spatial();
        self.channels(self.n_blocks - 1) * s * s
    }
}

/// He-normal std for a layer whose outputs each sum `fan_in` inputs.
fn he_std(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}

fn push_conv<T: Scalar>(p: &mut ParamSet<T>, init: &mut Initializer, name: &str, shape: [usize; 4], bias: usize) {
    p.push(format!("{name}.w"), init.normal(&shape, he_std(shape[1] * KERNEL * KERNEL)));
    p.push(format!("{name}.b"), Tensor::zeros(&[bias]));
}

/// Transposed-convolution weights are `[c_in, c_out, k, k]`; at stride 2
/// each output pixel receives `c_in * (k / 2)^2` contributions.
fn push_deconv<T: Scalar>(p: &mut ParamSet<T>, init: &mut Initializer, name: &str, shape: [usize; 4], bias: usize) {
    p.push(format!("{name}.w"), init.normal(&shape, he_std(shape[0] * (KERNEL / 2) * (KERNEL / 2))));
    p.push(format!("{name}.b"), Tensor::zeros(&[bias]));
}

fn push_linear<T: Scalar>(p: &mut ParamSet<T>, init: &mut Initializer, name: &str, out: usize, inp: usize) {
    p.push(format!("{name}.w"), init.normal(&[out, inp], he_std(inp)));
    p.push(format!("{name}.b"), Tensor::zeros(&[out]));
}

fn push_encoder<T: Scalar>(p: &mut ParamSet<T>, init: &mut Initializer, cfg: &EncoderConfig, in_channels: usize) {
    let mut c_in = in_channels;
    for i in 0..cfg.n_blocks {
        let c_out = cfg.channels(i);
        push_conv(p, init, &format!("enc.conv{i}"), [c_out, c_in, KERNEL, KERNEL], c_out);
        c_in = c_out;
    }
    push_linear(p, init, "enc.fc", cfg.bottleneck_dim, cfg.flat_dim());
}

/// Runs the encoder layers stored at `slots[0..]`; returns the bottleneck
/// and the next unused slot.
fn run_encoder<T: Scalar>(g: &mut Graph<T>, cfg: &EncoderConfig, b: &BoundParams, x: Var) -> Result<(Var, usize)> {
    let mut h = x;
    let mut slot = 0;
    for _ in 0..cfg.n_blocks {
        h = g.conv2d(h, b.var(slot), b.var(slot + 1), 2, 1)?;
        h = g.leaky_relu(h, LEAKY_SLOPE);
        slot += 2;
    }
    let flat = g.flatten(h)?;
    let z = g.linear(flat, b.var(slot), b.var(slot + 1))?;
    Ok((z, slot + 2))
}

/// Which generator: the normalizer sees the input alone; the editor sees the
/// input stacked with its frontalized version and takes a remote code.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeneratorRole {
    Normalizer,
    Editor,
}

impl GeneratorRole {
    pub fn in_channels(self) -> usize {
        match self {
            GeneratorRole::Normalizer => 3,
            GeneratorRole::Editor => 6,
        }
    }

    pub fn code_dim(self) -> usize {
        match self {
            GeneratorRole::Normalizer => 0,
            GeneratorRole::Editor => N_POSES,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorParams<T> {
    pub role: GeneratorRole,
    pub config: EncoderConfig,
    pub params: ParamSet<T>,
    decoder_start: usize,
}

impl<T: Scalar> GeneratorParams<T> {
    pub fn new(role: GeneratorRole, config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = Initializer::new(seed);
        let mut p = ParamSet::new();
        push_encoder(&mut p, &mut init, &config, role.in_channels());
        let decoder_start = p.len();
        push_linear(&mut p, &mut init, "dec.fc", config.flat_dim(), config.bottleneck_dim + role.code_dim());
        for i in (0..config.n_blocks).rev() {
            let c_out = if i == 0 { 3 } else { config.channels(i - 1) };
            push_deconv(&mut p, &mut init, &format!("dec.deconv{i}"), [config.channels(i), c_out, KERNEL, KERNEL], c_out);
        }
        Ok(Self { role, config, params: p, decoder_start })
    }

    /// Rebuild around loaded parameter values; fails if the layout differs
    /// from what `role` and `config` produce.
    pub fn with_params(role: GeneratorRole, config: EncoderConfig, params: ParamSet<T>) -> Result<Self> {
        let mut fresh = Self::new(role, config, 0)?;
        if !fresh.params.same_layout(&params) {
            return Err(Error::Config(format!("{role:?} parameters do not match the configured architecture")));
        }
        fresh.params = params;
        Ok(fresh)
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> BoundParams {
        self.params.bind(g, trainable)
    }

    /// Bottleneck `[n, bottleneck_dim]` of `input: [n, in_channels, s, s]`.
    pub fn encode(&self, g: &mut Graph<T>, b: &BoundParams, input: Var) -> Result<Var> {
        let s = g.shape(input).to_vec();
        let want = [self.role.in_channels(), self.config.image_size, self.config.image_size];
        if s.len() != 4 || s[1..] != want {
            return Err(Error::Config(format!("{:?} expects [n, {want:?}] input, got {s:?}", self.role)));
        }
        Ok(run_encoder(g, &self.config, b, input)?.0)
    }

    /// Image `[n, 3, s, s]` from a bottleneck (with the code appended for the
    /// editor).
    pub fn decode(&self, g: &mut Graph<T>, b: &BoundParams, z: Var) -> Result<Var> {
        let want = self.config.bottleneck_dim + self.role.code_dim();
        if g.shape(z).len() != 2 || g.shape(z)[1] != want {
            return Err(Error::Config(format!("decoder expects width {want}, got {:?}", g.shape(z))));
        }
        let cfg = &self.config;
        let mut slot = self.decoder_start;
        let h = g.linear(z, b.var(slot), b.var(slot + 1))?;
        let h = g.relu(h);
        let s = cfg.final_spatial();
        let n = g.shape(h)[0];
        let mut h = g.reshape(h, &[n, cfg.channels(cfg.n_blocks - 1), s, s])?;
        slot += 2;
        for i in (0..cfg.n_blocks).rev() {
            h = g.conv_t2d(h, b.var(slot), b.var(slot + 1), 2, 1)?;
            h = if i == 0 { g.tanh(h) } else { g.relu(h) };
            slot += 2;
        }
        Ok(h)
    }

    /// Normalizer forward pass on a batch `[n, 3, s, s]`.
    pub fn normalize(&self, g: &mut Graph<T>, b: &BoundParams, x: Var) -> Result<Var> {
        self.expect_role(GeneratorRole::Normalizer)?;
        let z = self.encode(g, b, x)?;
        self.decode(g, b, z)
    }

    /// Editor bottleneck of `(x, x_frontal)`, before code injection.
    pub fn editor_representation(&self, g: &mut Graph<T>, b: &BoundParams, x: Var, x_frontal: Var) -> Result<Var> {
        self.expect_role(GeneratorRole::Editor)?;
        if g.shape(x) != g.shape(x_frontal) {
            return Err(Error::Config(format!(
                "editor inputs differ in shape: {:?} vs {:?}",
                g.shape(x),
                g.shape(x_frontal)
            )));
        }
        let stacked = g.concat(x, x_frontal)?;
        self.encode(g, b, stacked)
    }

    /// Decode a representation `[n, bottleneck]` with codes `[n, 13]`.
    pub fn editor_decode(&self, g: &mut Graph<T>, b: &BoundParams, rep: Var, codes: Var) -> Result<Var> {
        self.expect_role(GeneratorRole::Editor)?;
        let z = g.concat(rep, codes)?;
        self.decode(g, b, z)
    }

    pub fn edit(&self, g: &mut Graph<T>, b: &BoundParams, x: Var, x_frontal: Var, codes: Var) -> Result<Var> {
        let rep = self.editor_representation(g, b, x, x_frontal)?;
        self.editor_decode(g, b, rep, codes)
    }

    fn expect_role(&self, role: GeneratorRole) -> Result<()> {
        if self.role != role {
            return Err(Error::Config(format!("expected the {role:?}, got the {:?}", self.role)));
        }
        Ok(())
    }
}

/// Discriminator heads: identity over `n_id` real classes plus one fake
/// class at index `n_id`, and (editor discriminator only) pose over the 13
/// yaw bins.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscriminatorHeadConfig {
    pub n_identity_classes: usize,
    pub n_pose_classes: Option<usize>,
}

impl DiscriminatorHeadConfig {
    pub fn normalizer(n_id: usize) -> Self {
        Self { n_identity_classes: n_id + 1, n_pose_classes: None }
    }

    pub fn editor(n_id: usize) -> Self {
        Self { n_identity_classes: n_id + 1, n_pose_classes: Some(N_POSES) }
    }

    /// Reserved index of the fake identity class.
    pub fn fake_class(&self) -> usize {
        self.n_identity_classes - 1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorParams<T> {
    pub config: EncoderConfig,
    pub heads: DiscriminatorHeadConfig,
    pub params: ParamSet<T>,
    head_start: usize,
}

/// Probability vectors produced by a discriminator for a batch.
pub struct DiscriminatorOutput {
    /// `[n, n_id + 1]`.
    pub identity: Var,
    /// `[n, 13]` when the discriminator has a pose head.
    pub pose: Option<Var>,
}

impl<T: Scalar> DiscriminatorParams<T> {
    pub fn new(config: EncoderConfig, heads: DiscriminatorHeadConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if heads.n_identity_classes == 0 || heads.n_pose_classes == Some(0) {
            return Err(Error::Config("discriminator heads need at least one output".into()));
        }
        let mut init = Initializer::new(seed);
        let mut p = ParamSet::new();
        push_encoder(&mut p, &mut init, &config, 3);
        let head_start = p.len();
        push_linear(&mut p, &mut init, "head.id", heads.n_identity_classes, config.bottleneck_dim);
        if let Some(np) = heads.n_pose_classes {
            push_linear(&mut p, &mut init, "head.pose", np, config.bottleneck_dim);
        }
        Ok(Self { config, heads, params: p, head_start })
    }

    pub fn with_params(config: EncoderConfig, heads: DiscriminatorHeadConfig, params: ParamSet<T>) -> Result<Self> {
        let mut fresh = Self::new(config, heads, 0)?;
        if !fresh.params.same_layout(&params) {
            return Err(Error::Config("discriminator parameters do not match the configured architecture".into()));
        }
        fresh.params = params;
        Ok(fresh)
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> BoundParams {
        self.params.bind(g, trainable)
    }

    /// Shared trunk features `[n, bottleneck_dim]` (after LeakyReLU).
    pub fn features(&self, g: &mut Graph<T>, b: &BoundParams, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let want = [3, self.config.image_size, self.config.image_size];
        if s.len() != 4 || s[1..] != want {
            return Err(Error::Config(format!("discriminator expects [n, {want:?}] input, got {s:?}")));
        }
        let (z, _) = run_encoder(g, &self.config, b, x)?;
        Ok(g.leaky_relu(z, LEAKY_SLOPE))
    }

    /// Pre-softmax head outputs.
    pub fn logits(&self, g: &mut Graph<T>, b: &BoundParams, x: Var) -> Result<DiscriminatorOutput> {
        let f = self.features(g, b, x)?;
        let s = self.head_start;
        let identity = g.linear(f, b.var(s), b.var(s + 1))?;
        let pose = match self.heads.n_pose_classes {
            Some(_) => Some(g.linear(f, b.var(s + 2), b.var(s + 3))?),
            None => None,
        };
        Ok(DiscriminatorOutput { identity, pose })
    }

    pub fn forward(&self, g: &mut Graph<T>, b: &BoundParams, x: Var) -> Result<DiscriminatorOutput> {
        let out = self.logits(g, b, x)?;
        let identity = g.softmax(out.identity)?;
        let pose = match out.pose {
            Some(p) => Some(g.softmax(p)?),
            None => None,
        };
        Ok(DiscriminatorOutput { identity, pose })
    }
}

/// Editor bottleneck vector of one input pair.
#[derive(Clone, Debug, PartialEq)]
pub struct IdentityRepresentation {
    pub vector: Vec<f64>,
}

fn single<T: Scalar>(g: &mut Graph<T>, x: &FaceImage<T>) -> Result<Var> {
    let s = x.size();
    Ok(g.input(x.tensor().clone().reshape(&[1, 3, s, s])?))
}

fn to_face<T: Scalar>(g: &Graph<T>, v: Var) -> Result<FaceImage<T>> {
    let t = g.value(v);
    let s = t.shape()[2];
    FaceImage::from_tensor(t.clone().reshape(&[3, s, s])?)
}

pub fn code_tensor<T: Scalar>(codes: &[&RemoteCode]) -> Tensor<T> {
    let data = codes.iter().flat_map(|c| c.weights().iter().map(|&w| T::lit(w))).collect();
    Tensor::new(vec![codes.len(), N_POSES], data).expect("code batch")
}

fn check_size<T: Scalar>(cfg: &EncoderConfig, x: &FaceImage<T>) -> Result<()> {
    if x.size() != cfg.image_size {
        return Err(Error::Config(format!("image size {} does not match configured {}", x.size(), cfg.image_size)));
    }
    Ok(())
}

/// Frontalize a single image with the normalizer.
pub fn normalizer_forward<T: Scalar>(gn: &GeneratorParams<T>, x: &FaceImage<T>) -> Result<FaceImage<T>> {
    check_size(&gn.config, x)?;
    let mut g = Graph::new();
    let b = gn.bind(&mut g, false);
    let xv = single(&mut g, x)?;
    let y = gn.normalize(&mut g, &b, xv)?;
    to_face(&g, y)
}

/// Rotate a single image with the editor given its frontalized version.
pub fn editor_forward<T: Scalar>(
    ge: &GeneratorParams<T>,
    x: &FaceImage<T>,
    x_frontal: &FaceImage<T>,
    c: &RemoteCode,
) -> Result<FaceImage<T>> {
    check_size(&ge.config, x)?;
    check_size(&ge.config, x_frontal)?;
    let mut g = Graph::new();
    let b = ge.bind(&mut g, false);
    let (xv, fv) = (single(&mut g, x)?, single(&mut g, x_frontal)?);
    let cv = g.input(code_tensor(&[c]));
    let y = ge.edit(&mut g, &b, xv, fv, cv)?;
    to_face(&g, y)
}

fn probs<T: Scalar>(g: &Graph<T>, v: Var) -> Vec<f64> {
    g.value(v).to_f64_vec()
}

/// Identity probabilities (length `n_id + 1`) from the normalizer's
/// discriminator.
pub fn disc_n_forward<T: Scalar>(dn: &DiscriminatorParams<T>, x: &FaceImage<T>) -> Result<Vec<f64>> {
    check_size(&dn.config, x)?;
    let mut g = Graph::new();
    let b = dn.bind(&mut g, false);
    let xv = single(&mut g, x)?;
    let out = dn.forward(&mut g, &b, xv)?;
    Ok(probs(&g, out.identity))
}

/// Identity and pose probabilities from the editor's discriminator.
pub fn disc_e_forward<T: Scalar>(de: &DiscriminatorParams<T>, x: &FaceImage<T>) -> Result<(Vec<f64>, Vec<f64>)> {
    check_size(&de.config, x)?;
    let mut g = Graph::new();
    let b = de.bind(&mut g, false);
    let xv = single(&mut g, x)?;
    let out = de.forward(&mut g, &b, xv)?;
    let pose = out.pose.ok_or_else(|| Error::Config("discriminator has no pose head".into()))?;
    Ok((probs(&g, out.identity), probs(&g, pose)))
}

pub fn extract_identity_representation<T: Scalar>(
    ge: &GeneratorParams<T>,
    x: &FaceImage<T>,
    x_frontal: &FaceImage<T>,
) -> Result<IdentityRepresentation> {
    check_size(&ge.config, x)?;
    check_size(&ge.config, x_frontal)?;
    let mut g = Graph::new();
    let b = ge.bind(&mut g, false);
    let (xv, fv) = (single(&mut g, x)?, single(&mut g, x_frontal)?);
    let rep = ge.editor_representation(&mut g, &b, xv, fv)?;
    Ok(IdentityRepresentation { vector: g.value(rep).to_f64_vec() })
}

/// Decode an identity representation with a remote code.
pub fn decode_representation<T: Scalar>(
    ge: &GeneratorParams<T>,
    rep: &IdentityRepresentation,
    c: &RemoteCode,
) -> Result<FaceImage<T>> {
    if rep.vector.len() != ge.config.bottleneck_dim {
        return Err(Error::InvalidInput(format!(
            "representation has length {}, expected {}",
            rep.vector.len(),
            ge.config.bottleneck_dim
        )));
    }
    let mut g = Graph::new();
    let b = ge.bind(&mut g, false);
    let r = g.input(Tensor::from_f64(&[1, rep.vector.len()], &rep.vector)?);
    let cv = g.input(code_tensor(&[c]));
    let y = ge.editor_decode(&mut g, &b, r, cv)?;
    to_face(&g, y)
}

/// Elementwise `(1 - alpha) * r1 + alpha * r2`.
pub fn interpolate_identities(
    r1: &IdentityRepresentation,
    r2: &IdentityRepresentation,
    alpha: f64,
) -> Result<IdentityRepresentation> {
    if r1.vector.len() != r2.vector.len() {
        return Err(Error::InvalidInput(format!(
            "representation lengths differ: {} vs {}",
            r1.vector.len(),
            r2.vector.len()
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidParameter(format!("alpha {alpha} outside [0, 1]")));
    }
    let vector = if alpha == 0.0 {
        r1.vector.clone()
    } else if alpha == 1.0 {
        r2.vector.clone()
    } else {
        r1.vector.iter().zip(&r2.vector).map(|(a, b)| (1.0 - alpha) * a + alpha * b).collect()
    };
    Ok(IdentityRepresentation { vector })
}
