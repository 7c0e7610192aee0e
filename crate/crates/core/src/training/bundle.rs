use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use lbgan_nn::{Adam, AdamConfig, DType, ParamSet, Scalar};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{hex, StepCounts, TrainConfig};
use crate::dataset::synth::mix_seed;
use crate::error::{Error, Result};
use crate::networks::{DiscriminatorHeadConfig, DiscriminatorParams, GeneratorParams, GeneratorRole};

pub const CHECKPOINT_VERSION: u32 = 1;
pub const CHECKPOINT_MANIFEST: &str = "manifest.json";

/// Where a bundle is in the schedule: `stage` 0 is untrained, and
/// `iteration` counts completed iterations of the current stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Position {
    pub stage: u8,
    pub iteration: u64,
}

/// All four networks with their optimizers, the configuration they were
/// built from, and the schedule position.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle<T> {
    pub config: TrainConfig,
    pub n_id: usize,
    pub position: Position,
    pub gn: GeneratorParams<T>,
    pub ge: GeneratorParams<T>,
    pub dn: DiscriminatorParams<T>,
    pub de: DiscriminatorParams<T>,
    pub opt_gn: Adam<T>,
    pub opt_ge: Adam<T>,
    pub opt_dn: Adam<T>,
    pub opt_de: Adam<T>,
}

/// Hex SHA-256 of a parameter blob.
pub fn param_digest<T: Scalar>(p: &ParamSet<T>) -> String {
    hex(&Sha256::digest(p.to_bytes()))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamDigests {
    pub g_n: String,
    pub g_e: String,
    pub d_n: String,
    pub d_e: String,
}

impl<T: Scalar> ModelBundle<T> {
    pub fn new(config: TrainConfig, n_id: usize) -> Result<Self> {
        config.validate()?;
        if n_id < 2 {
            return Err(Error::Config(format!("need at least 2 identities, got {n_id}")));
        }
        let net = config.network;
        let s = config.seed;
        let gn = GeneratorParams::new(GeneratorRole::Normalizer, net, mix_seed(s, 1))?;
        let ge = GeneratorParams::new(GeneratorRole::Editor, net, mix_seed(s, 2))?;
        let dn = DiscriminatorParams::new(net, DiscriminatorHeadConfig::normalizer(n_id), mix_seed(s, 3))?;
        let de = DiscriminatorParams::new(net, DiscriminatorHeadConfig::editor(n_id), mix_seed(s, 4))?;
        let ac = adam_config(&config);
        Ok(Self {
            opt_gn: Adam::new(&gn.params, ac),
            opt_ge: Adam::new(&ge.params, ac),
            opt_dn: Adam::new(&dn.params, ac),
            opt_de: Adam::new(&de.params, ac),
            config,
            n_id,
            position: Position { stage: 0, iteration: 0 },
            gn,
            ge,
            dn,
            de,
        })
    }

    pub fn step_counts(&self) -> StepCounts {
        StepCounts { g_n: self.opt_gn.step, g_e: self.opt_ge.step, d_n: self.opt_dn.step, d_e: self.opt_de.step }
    }

    pub fn digests(&self) -> ParamDigests {
        ParamDigests {
            g_n: param_digest(&self.gn.params),
            g_e: param_digest(&self.ge.params),
            d_n: param_digest(&self.dn.params),
            d_e: param_digest(&self.de.params),
        }
    }

    /// Whether the schedule for the configured variant has run to the end.
    pub fn is_complete(&self) -> bool {
        self.position == Position { stage: 2, iteration: self.config.stage2_total() }
    }
}

fn adam_config(c: &TrainConfig) -> AdamConfig {
    AdamConfig { beta1: c.adam_beta1, beta2: c.adam_beta2, ..AdamConfig::default() }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    version: u32,
    dtype: String,
    stage: u8,
    iteration: u64,
    n_id: usize,
    config_hash: String,
    config: TrainConfig,
    optimizer_steps: StepCounts,
    /// File name to hex SHA-256.
    files: BTreeMap<String, String>,
}

const NETS: [&str; 4] = ["g_n", "g_e", "d_n", "d_e"];

fn dtype_name(d: DType) -> &'static str {
    match d {
        DType::F32 => "f32",
        DType::F64 => "f64",
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Writes one parameter blob and one optimizer-moment blob per network, then
/// the manifest listing their digests. Each file is replaced atomically and
/// the manifest goes last, so an interrupted save leaves either the old
/// checkpoint or a digest mismatch.
pub fn save_checkpoint<T: Scalar>(bundle: &ModelBundle<T>, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let params = [&bundle.gn.params, &bundle.ge.params, &bundle.dn.params, &bundle.de.params];
    let opts = [&bundle.opt_gn, &bundle.opt_ge, &bundle.opt_dn, &bundle.opt_de];
    let mut files = BTreeMap::new();
    for ((name, p), opt) in NETS.iter().zip(params).zip(opts) {
        let (m, v) = opt.moments();
        let mut moments = ParamSet::new();
        for (prefix, set) in [("m", m), ("v", v)] {
            for (n, t) in set.names().iter().zip(set.tensors()) {
                moments.push(format!("{prefix}.{n}"), t.clone());
            }
        }
        for (file, bytes) in [(format!("{name}.params"), p.to_bytes()), (format!("{name}.adam"), moments.to_bytes())] {
            write_atomic(&dir.join(&file), &bytes)?;
            files.insert(file, hex(&Sha256::digest(&bytes)));
        }
    }
    let manifest = CheckpointManifest {
        version: CHECKPOINT_VERSION,
        dtype: dtype_name(T::DTYPE).into(),
        stage: bundle.position.stage,
        iteration: bundle.position.iteration,
        n_id: bundle.n_id,
        config_hash: bundle.config.hash(),
        config: bundle.config.clone(),
        optimizer_steps: bundle.step_counts(),
        files,
    };
    let path = dir.join(CHECKPOINT_MANIFEST);
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    write_atomic(&path, &json)?;
    Ok(path)
}

pub fn load_checkpoint<T: Scalar>(dir: &Path) -> Result<ModelBundle<T>> {
    let path = dir.join(CHECKPOINT_MANIFEST);
    let text = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let man: CheckpointManifest =
        serde_json::from_slice(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    if man.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
            man.version
        )));
    }
    if man.dtype != dtype_name(T::DTYPE) {
        return Err(Error::Checkpoint(format!("checkpoint holds {} parameters, requested {}", man.dtype, dtype_name(T::DTYPE))));
    }
    if man.config.hash() != man.config_hash {
        return Err(Error::Checkpoint("config hash does not match the stored config".into()));
    }
    let read = |file: &str| -> Result<ParamSet<T>> {
        let p = dir.join(file);
        let want = man.files.get(file).ok_or_else(|| Error::Checkpoint(format!("manifest lists no {file}")))?;
        let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
        if &hex(&Sha256::digest(&bytes)) != want {
            return Err(Error::Checkpoint(format!("{} is corrupt (digest mismatch)", p.display())));
        }
        ParamSet::from_bytes(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", p.display())))
    };
    let config = man.config.clone();
    let net = config.network;
    let n_id = man.n_id;
    let wrap = |e: Error| Error::Checkpoint(e.to_string());
    let gn = GeneratorParams::with_params(GeneratorRole::Normalizer, net, read("g_n.params")?).map_err(wrap)?;
    let ge = GeneratorParams::with_params(GeneratorRole::Editor, net, read("g_e.params")?).map_err(wrap)?;
    let dn = DiscriminatorParams::with_params(net, DiscriminatorHeadConfig::normalizer(n_id), read("d_n.params")?)
        .map_err(wrap)?;
    let de =
        DiscriminatorParams::with_params(net, DiscriminatorHeadConfig::editor(n_id), read("d_e.params")?).map_err(wrap)?;
    let steps = man.optimizer_steps;
    let ac = adam_config(&config);
    let opt = |name: &str, params: &ParamSet<T>, step: u64| -> Result<Adam<T>> {
        let all = read(&format!("{name}.adam"))?;
        let n = params.len();
        if all.len() != 2 * n {
            return Err(Error::Checkpoint(format!("{name}.adam has {} tensors, expected {}", all.len(), 2 * n)));
        }
        let mut m = ParamSet::new();
        let mut v = ParamSet::new();
        for (i, (name, t)) in params.names().iter().zip(all.tensors()).enumerate().take(n) {
            m.push(name.clone(), t.clone());
            v.push(name.clone(), all.get(n + i).clone());
        }
        if !m.same_layout(params) || !v.same_layout(params) {
            return Err(Error::Checkpoint(format!("{name}.adam does not match the parameter layout")));
        }
        Ok(Adam::from_parts(ac, step, m, v)?)
    };
    Ok(ModelBundle {
        opt_gn: opt("g_n", &gn.params, steps.g_n)?,
        opt_ge: opt("g_e", &ge.params, steps.g_e)?,
        opt_dn: opt("d_n", &dn.params, steps.d_n)?,
        opt_de: opt("d_e", &de.params, steps.d_e)?,
        config,
        n_id,
        position: Position { stage: man.stage, iteration: man.iteration },
        gn,
        ge,
        dn,
        de,
    })
}

/// Loads a checkpoint and checks that its architecture and identity count
/// agree with what the caller is about to use it for.
pub fn load_checkpoint_for<T: Scalar>(dir: &Path, network: &crate::networks::EncoderConfig, n_id: usize) -> Result<ModelBundle<T>> {
    let b = load_checkpoint(dir)?;
    if b.config.network != *network {
        return Err(Error::Config(format!(
            "checkpoint network {:?} does not match the configured {:?}",
            b.config.network, network
        )));
    }
    if b.n_id != n_id {
        return Err(Error::Config(format!("checkpoint has {} identities, dataset has {n_id}", b.n_id)));
    }
    Ok(b)
}
