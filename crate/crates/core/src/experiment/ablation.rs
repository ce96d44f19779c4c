//! Preset sweeps that compare training configurations under shared seeds.

use std::io::Write;

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, RewardSource};
use super::env::Environment;
use super::eval::run_eval;
use super::train::{precompute_rewards, train_env_critic, train_policy, RewardModel};
use crate::advantage::AdvantageMode;
use crate::critic::{CfMode, InteractionMatrix};
use crate::error::{Error, Result};
use crate::needs::format_f64_17;
use crate::reward::RewardVariant;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationPreset {
    /// Causal swap, non-causal swap and independent contribution.
    RewardVariant,
    /// User-KNN CF, item-KNN CF, raw critic and uncertainty-aware critic.
    Uncertainty,
    /// Item-level against sequence-level advantages.
    Granularity,
}

impl AblationPreset {
    pub fn name(self) -> &'static str {
        match self {
            AblationPreset::RewardVariant => "reward_variant",
            AblationPreset::Uncertainty => "uncertainty",
            AblationPreset::Granularity => "granularity",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "reward_variant" => Ok(AblationPreset::RewardVariant),
            "uncertainty" => Ok(AblationPreset::Uncertainty),
            "granularity" => Ok(AblationPreset::Granularity),
            other => Err(Error::Config(format!(
                "unknown ablation preset {other:?}; expected reward_variant, uncertainty or granularity"
            ))),
        }
    }

    /// Row names with the configuration each row trains.
    pub fn rows(self, base: &ExperimentConfig) -> Vec<(&'static str, ExperimentConfig)> {
        let with = |f: &dyn Fn(&mut ExperimentConfig)| {
            let mut c = base.clone();
            f(&mut c);
            c
        };
        match self {
            AblationPreset::RewardVariant => [RewardVariant::CausalSwap, RewardVariant::NonCausalSwap, RewardVariant::IndependentContribution]
                .into_iter()
                .map(|v| (v.name(), with(&|c| c.reward.variant = v)))
                .collect(),
            AblationPreset::Granularity => [AdvantageMode::ItemLevel, AdvantageMode::SequenceLevel]
                .into_iter()
                .map(|m| (m.name(), with(&|c| c.advantage.mode = m)))
                .collect(),
            AblationPreset::Uncertainty => {
                let cf = |mode: CfMode| {
                    with(&|c| {
                        c.reward.source = RewardSource::Cf;
                        c.reward.cf_mode = mode;
                        c.advantage.uncertainty = false;
                        c.advantage.per_item_uncertainty = false;
                    })
                };
                vec![
                    ("user_knn", cf(CfMode::UserKnn)),
                    ("item_knn", cf(CfMode::ItemKnn)),
                    (
                        "raw_critic",
                        with(&|c| {
                            c.reward.source = RewardSource::Critic;
                            c.advantage.uncertainty = false;
                            c.advantage.per_item_uncertainty = false;
                        }),
                    ),
                    (
                        "uncertainty_critic",
                        with(&|c| {
                            c.reward.source = RewardSource::Critic;
                            c.advantage.uncertainty = true;
                        }),
                    ),
                ]
            }
        }
    }
}

/// Final metrics of one configuration under one seed.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub preset: &'static str,
    pub row: &'static str,
    pub seed: u64,
    pub val_ndcg5: f64,
    pub val_ndcg10: f64,
    pub test_ndcg5: f64,
    pub test_ndcg10: f64,
    pub test_mrr5: f64,
    pub test_recall5: f64,
    /// Context ids of each step's batch, for the shared-seed check.
    pub batches: Vec<Vec<u64>>,
}

impl AblationRow {
    pub const CSV_HEADER: &'static str = "preset,row,seed,val_ndcg5,val_ndcg10,test_ndcg5,test_ndcg10,test_mrr5,test_recall5";

    pub fn write_csv<W: Write>(rows: &[AblationRow], mut w: W) -> Result<()> {
        writeln!(w, "{}", Self::CSV_HEADER)?;
        for r in rows {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{}",
                r.preset,
                r.row,
                r.seed,
                format_f64_17(r.val_ndcg5),
                format_f64_17(r.val_ndcg10),
                format_f64_17(r.test_ndcg5),
                format_f64_17(r.test_ndcg10),
                format_f64_17(r.test_mrr5),
                format_f64_17(r.test_recall5)
            )?;
        }
        Ok(())
    }
}

/// Every preset row for every seed in `base.ablation.seeds`. Rows of one seed
/// share the environment, the batch sequence and, where used, the critic
/// and the CF matrix.
pub fn run_ablation(base: &ExperimentConfig, preset: AblationPreset) -> Result<Vec<AblationRow>> {
    base.validate()?;
    let mut out = Vec::new();
    for &seed in &base.ablation.seeds {
        let seeded = base.with_seed(seed);
        let env = Environment::build(&seeded)?;
        let rows = preset.rows(&seeded);
        let critic = if rows.iter().any(|(_, c)| c.reward.source == RewardSource::Critic && c.reward.critic_checkpoint.is_none()) {
            Some(train_env_critic(&env, &seeded)?.params)
        } else {
            None
        };
        let matrix = InteractionMatrix::from_log(&env.log.filter_users(&env.split.train));
        for (name, cfg) in rows {
            cfg.validate()?;
            let model = match (cfg.reward.source, &critic) {
                (RewardSource::Critic, Some(p)) if cfg.reward.critic_checkpoint.is_none() => RewardModel::Critic(p.clone()),
                (RewardSource::Cf, _) => RewardModel::Cf(matrix.clone()),
                _ => RewardModel::from_config(&env, &cfg)?,
            };
            let rewards = precompute_rewards(&env, &model, &cfg)?;
            let run = train_policy(&env, &rewards, &cfg, None)?;
            let (val_ndcg5, val_ndcg10) = run.final_validation();
            let test = if env.test.is_empty() { None } else { Some(run_eval(&run.params, &env.test, seed)?) };
            let t = |m: &str| test.as_ref().and_then(|s| s.get("policy", m)).map_or(f64::NAN, |r| r.mean);
            out.push(AblationRow {
                preset: preset.name(),
                row: name,
                seed,
                val_ndcg5,
                val_ndcg10,
                test_ndcg5: t("ndcg5"),
                test_ndcg10: t("ndcg10"),
                test_mrr5: t("mrr5"),
                test_recall5: t("recall5"),
                batches: run.batches,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SyntheticConfig;
    use crate::experiment::config::DataSource;

    fn base() -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        c.data = DataSource::Synthetic(SyntheticConfig {
            n_users: 250,
            n_items: 60,
            ..Default::default()
        });
        c.trainer.steps = 4;
        c.trainer.eval_every = 2;
        c.trainer.contexts_per_step = 4;
        c.critic.epochs = 2;
        c.critic.hidden = 16;
        c.ablation.seeds = vec![3];
        c
    }

    #[test]
    fn preset_sizes() {
        let b = base();
        assert_eq!(AblationPreset::RewardVariant.rows(&b).len(), 3);
        assert_eq!(AblationPreset::Uncertainty.rows(&b).len(), 4);
        assert_eq!(AblationPreset::Granularity.rows(&b).len(), 2);
        assert!(AblationPreset::parse("nope").is_err());
        for p in [AblationPreset::RewardVariant, AblationPreset::Uncertainty, AblationPreset::Granularity] {
            assert_eq!(AblationPreset::parse(p.name()).unwrap(), p);
        }
    }

    #[test]
    fn rows_share_sampled_contexts() {
        let rows = run_ablation(&base(), AblationPreset::Uncertainty).unwrap();
        assert_eq!(rows.len(), 4);
        assert!(rows.iter().all(|r| r.batches == rows[0].batches && r.batches.len() == 4));
        let mut buf = Vec::new();
        AblationRow::write_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 5);
        assert!(text.lines().nth(1).unwrap().starts_with("uncertainty,user_knn,3,"));
    }
}
