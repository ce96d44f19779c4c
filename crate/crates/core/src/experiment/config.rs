use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::advantage::{AdvantageConfig, LossConfig};
use crate::critic::{CfMode, CriticConfig};
use crate::data::{RetrievalConfig, SyntheticConfig};
use crate::error::{Error, Result};
use crate::needs::NeedKind;
use crate::policy::FeatureConfig;
use crate::reward::RewardVariant;

/// Where interactions and embeddings come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic(SyntheticConfig),
    Files {
        interactions: PathBuf,
        embeddings: PathBuf,
        topics: Option<PathBuf>,
    },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic(SyntheticConfig::default())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub retrieval: RetrievalConfig,
    /// Train/validation/test user fractions.
    pub split: (f64, f64, f64),
    /// Caps on contexts per split; 0 keeps every user.
    pub max_val_contexts: usize,
    pub max_test_contexts: usize,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            retrieval: RetrievalConfig {
                n_candidates: 10,
                ..Default::default()
            },
            split: (0.8, 0.1, 0.1),
            max_val_contexts: 0,
            max_test_contexts: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub n_strategies: usize,
    pub temperature: f64,
    pub features: FeatureConfig,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            n_strategies: 3,
            temperature: 1.0,
            features: FeatureConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    #[default]
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    pub group_size: usize,
    /// Contexts sampled per update.
    pub contexts_per_step: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    /// Gradient passes over each batch of rollouts.
    pub inner_epochs: usize,
    /// Copy the current policy into the reference every this many steps; 0 never.
    pub ref_refresh_every: usize,
    pub eval_every: usize,
    pub clip_ratio: f64,
    pub kl_coeff: f64,
    pub entropy_coeff: f64,
}

impl TrainerConfig {
    pub fn loss(&self) -> LossConfig {
        LossConfig {
            clip_ratio: self.clip_ratio,
            kl_coeff: self.kl_coeff,
            entropy_coeff: self.entropy_coeff,
        }
    }
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            contexts_per_step: 2,
            steps: 500,
            learning_rate: 1e-2,
            optimizer: Optimizer::Adam,
            inner_epochs: 1,
            ref_refresh_every: 0,
            eval_every: 25,
            clip_ratio: LossConfig::default().clip_ratio,
            kl_coeff: LossConfig::default().kl_coeff,
            entropy_coeff: LossConfig::default().entropy_coeff,
        }
    }
}

/// Which rewards the trainer sees for a candidate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardSource {
    /// Noise-free engagement from the generating model.
    #[default]
    GroundTruth,
    /// Logged signals where present, critic estimates elsewhere.
    Critic,
    /// Logged signals where present, neighbourhood CF estimates elsewhere.
    Cf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    pub variant: RewardVariant,
    pub source: RewardSource,
    /// NDCG cutoff inside the training reward; 0 means the full list.
    pub cutoff: usize,
    pub cf_mode: CfMode,
    pub k_neighbors: usize,
    /// Pretrained critic; when absent one is trained on the training users.
    pub critic_checkpoint: Option<PathBuf>,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            variant: RewardVariant::CausalSwap,
            source: RewardSource::GroundTruth,
            cutoff: 0,
            cf_mode: CfMode::UserKnn,
            k_neighbors: 20,
            critic_checkpoint: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub seeds: Vec<u64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self { seeds: vec![0] }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataSource,
    pub env: EnvConfig,
    pub need: NeedKind,
    pub policy: PolicyConfig,
    pub trainer: TrainerConfig,
    pub reward: RewardConfig,
    pub advantage: AdvantageConfig,
    pub critic: CriticConfig,
    pub ablation: AblationConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string().replace('\n', " ")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let t = &self.trainer;
        if t.group_size < 2 {
            return bad(format!("trainer.group_size must be >= 2, got {}", t.group_size));
        }
        if t.contexts_per_step == 0 || t.inner_epochs == 0 {
            return bad("trainer.contexts_per_step and trainer.inner_epochs must be >= 1".into());
        }
        if !(t.learning_rate >= 0.0) || !t.learning_rate.is_finite() {
            return bad("trainer.learning_rate must be finite and >= 0".into());
        }
        if !(t.clip_ratio > 0.0) || t.kl_coeff < 0.0 || t.entropy_coeff < 0.0 {
            return bad("clip_ratio must be > 0 and kl/entropy coefficients >= 0".into());
        }
        if self.policy.n_strategies == 0 || !(self.policy.temperature > 0.0) {
            return bad("policy needs n_strategies >= 1 and temperature > 0".into());
        }
        if self.env.retrieval.n_candidates < 5 {
            return bad("env.retrieval.n_candidates must be >= 5 for the @5 metrics".into());
        }
        if self.reward.k_neighbors == 0 {
            return bad("reward.k_neighbors must be >= 1".into());
        }
        if self.advantage.per_item_uncertainty && !self.advantage.uncertainty {
            return bad("advantage.per_item_uncertainty requires advantage.uncertainty".into());
        }
        if self.advantage.uncertainty && self.reward.source != RewardSource::Critic {
            return bad("advantage.uncertainty needs reward.source = \"critic\"".into());
        }
        if self.ablation.seeds.is_empty() {
            return bad("ablation.seeds must not be empty".into());
        }
        self.need.validate()?;
        if let DataSource::Synthetic(s) = &self.data {
            s.validate()?;
        }
        Ok(())
    }

    /// A copy with the top-level seed replaced, also reseeding synthetic data.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.seed = seed;
        if let DataSource::Synthetic(s) = &mut c.data {
            s.seed = seed;
        }
        c.critic.seed = seed;
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_round_trip() {
        let c = ExperimentConfig::default();
        assert_eq!(c.trainer.kl_coeff, 0.01);
        assert_eq!(c.trainer.entropy_coeff, 0.005);
        assert_eq!(c.trainer.clip_ratio, 0.2);
        assert_eq!(c.trainer.learning_rate, 1e-2);
        assert_eq!(c.trainer.eval_every, 25);
        let text = c.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), c);
    }

    #[test]
    fn partial_config_fills_defaults() {
        let c = ExperimentConfig::from_toml(
            r#"
seed = 4
[data]
source = "synthetic"
n_users = 50
[trainer]
steps = 3
kl_coeff = 0.0
[need]
kind = "niche_discovery"
alpha_bonus = 0.25
"#,
        )
        .unwrap();
        assert_eq!(c.seed, 4);
        assert_eq!(c.trainer.steps, 3);
        assert_eq!(c.trainer.kl_coeff, 0.0);
        assert_eq!(c.need, NeedKind::NicheDiscovery { alpha_bonus: 0.25 });
        match c.data {
            DataSource::Synthetic(s) => assert_eq!((s.n_users, s.n_items), (50, 200)),
            _ => panic!("expected synthetic data"),
        }
    }

    #[test]
    fn unknown_keys_and_bad_values_are_errors() {
        assert!(matches!(ExperimentConfig::from_toml("sed = 1"), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::from_toml("[trainer]\nstep = 1"), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::from_toml("[trainer]\ngroup_size = 1"), Err(Error::Config(_))));
        assert!(ExperimentConfig::from_toml("[advantage]\nuncertainty = true").is_err());
    }
}
