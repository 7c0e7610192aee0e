use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::networks::EncoderConfig;

/// Training variant: the two-stage schedule, a single joint stage with the
/// same budget, or two stages without the regularizers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    SingleStage,
    NoRegularizers,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Full, Variant::SingleStage, Variant::NoRegularizers];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::SingleStage => "single_stage",
            Variant::NoRegularizers => "no_regularizers",
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s.replace('-', "_"))
            .ok_or_else(|| Error::Config(format!("unknown variant '{s}' (full, single_stage, no_regularizers)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Desk,
    Paper,
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            _ => Err(Error::Config(format!("unknown profile '{s}' (desk, paper)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub stage1_iters: u64,
    pub stage2_iters: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub stage2_gn_lr_factor: f64,
    pub g_steps_per_d_step: u64,
    pub weights: LossWeights,
    pub seed: u64,
    pub variant: Variant,
    pub network: EncoderConfig,
}

impl TrainConfig {
    pub fn for_profile(profile: Profile) -> Self {
        match profile {
            Profile::Desk => Self::desk(),
            Profile::Paper => Self::paper(),
        }
    }

    /// 96-pixel networks, 20k stage-1 iterations; the stage-2 budget is set
    /// to the same count.
    pub fn paper() -> Self {
        Self {
            stage1_iters: 20_000,
            stage2_iters: 20_000,
            batch_size: 24,
            lr: 2e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            stage2_gn_lr_factor: 0.25,
            g_steps_per_d_step: 4,
            weights: LossWeights::default(),
            seed: 1,
            variant: Variant::Full,
            network: EncoderConfig::paper(),
        }
    }

    /// 32-pixel networks with 2000/4000 stage budgets.
    pub fn desk() -> Self {
        Self { stage1_iters: 2000, stage2_iters: 4000, network: EncoderConfig::desk(), ..Self::paper() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 || self.g_steps_per_d_step == 0 {
            return bad("batch_size and g_steps_per_d_step must be at least 1".into());
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.stage2_gn_lr_factor > 0.0 && self.stage2_gn_lr_factor <= 1.0) {
            return bad(format!("stage2_gn_lr_factor must be in (0, 1], got {}", self.stage2_gn_lr_factor));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must be in [0, 1), got {b}"));
            }
        }
        self.weights.validate()?;
        self.network.validate()
    }

    /// Weights in effect for the variant: no self-cycle term without
    /// regularizers.
    pub fn effective_weights(&self) -> LossWeights {
        match self.variant {
            Variant::NoRegularizers => LossWeights { lambda_csc: 0.0, ..self.weights },
            _ => self.weights,
        }
    }

    /// Iterations of the generator/discriminator cycle loop.
    pub fn stage2_total(&self) -> u64 {
        match self.variant {
            Variant::SingleStage => self.stage1_iters + self.stage2_iters,
            _ => self.stage2_iters,
        }
    }

    /// Normalizer-side learning-rate multiplier in the cycle loop.
    pub fn stage2_factor(&self) -> f64 {
        match self.variant {
            Variant::SingleStage => 1.0,
            _ => self.stage2_gn_lr_factor,
        }
    }

    /// Position `1..=g_steps + 1` within a cycle; the last updates the
    /// discriminators.
    pub fn is_discriminator_iteration(&self, iteration: u64) -> bool {
        iteration.is_multiple_of(self.g_steps_per_d_step + 1)
    }

    /// Adam steps each optimizer takes over a complete run.
    pub fn expected_steps(&self) -> StepCounts {
        let total = self.stage2_total();
        let d = total / (self.g_steps_per_d_step + 1);
        let g = total - d;
        let s1 = if self.variant == Variant::SingleStage { 0 } else { self.stage1_iters };
        StepCounts { g_n: s1 + g, d_n: s1 + d, g_e: g, d_e: d }
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(json))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepCounts {
    pub g_n: u64,
    pub g_e: u64,
    pub d_n: u64,
    pub d_e: u64,
}

impl StepCounts {
    pub fn total(&self) -> u64 {
        self.g_n + self.g_e + self.d_n + self.d_e
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
