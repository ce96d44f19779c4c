//! The policy training loop.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::config::{ExperimentConfig, Optimizer, RewardSource, TrainerConfig};
use super::env::{relevance_for, EnvContext, Environment};
use crate::advantage::{assign_token_advantages, grpo_loss, ndcg_sequence_variance, RolloutGroup, StepInputs};
use crate::critic::{critic_examples, train_critic, knn_cf_impute_many, CriticParams, InteractionMatrix, TrainedCritic};
use crate::data::SignalKind;
use crate::error::{Error, Result};
use crate::needs::{format_f64_17, NeedKind};
use crate::policy::{greedy_ranking, ranking_logprobs, sample_rollout, step_terms, PolicyParams, Rollout, StepTerms};
use crate::ranking::{ndcg, ndcg_of_gains, GainKind, ItemId, RelevanceTable};
use crate::reward::SwapEvaluator;

/// Mixes a run seed with stream coordinates into one RNG seed.
pub(crate) fn stream_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut x = seed ^ a.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ b.wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
    x ^= x >> 31;
    x = x.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x ^ (x >> 29)
}

const BATCH_STREAM: u64 = 1;
const ROLLOUT_STREAM: u64 = 2;

/// Where training rewards come from.
#[derive(Clone, Debug)]
pub enum RewardModel {
    GroundTruth,
    Critic(CriticParams),
    Cf(InteractionMatrix),
}

impl RewardModel {
    /// Builds the model `cfg.reward.source` asks for. A critic is loaded from
    /// `reward.critic_checkpoint` or trained on the training users.
    pub fn from_config(env: &Environment, cfg: &ExperimentConfig) -> Result<Self> {
        Ok(match cfg.reward.source {
            RewardSource::GroundTruth => RewardModel::GroundTruth,
            RewardSource::Critic => match &cfg.reward.critic_checkpoint {
                Some(path) => RewardModel::Critic(CriticParams::load(std::io::BufReader::new(std::fs::File::open(path)?))?),
                None => RewardModel::Critic(train_env_critic(env, cfg)?.params),
            },
            RewardSource::Cf => RewardModel::Cf(InteractionMatrix::from_log(&env.log.filter_users(&env.split.train))),
        })
    }
}

/// Trains the critic on training users, selecting on validation users.
pub fn train_env_critic(env: &Environment, cfg: &ExperimentConfig) -> Result<TrainedCritic> {
    let h = cfg.critic.history_len;
    let train = critic_examples(&env.log, &env.split.train, h);
    let val = critic_examples(&env.log, &env.split.val, h);
    train_critic(&train, &val, &env.embeddings, &cfg.critic)
}

/// Training-time gains of one context and, for imputed candidates, their variance.
#[derive(Clone, Debug)]
pub struct ContextRewards {
    pub relevance: RelevanceTable,
    pub variances: BTreeMap<ItemId, f64>,
}

/// Continuous rating gain `2^r - 1` on the clamped rating scale, with the
/// delta-method variance factor `(ln 2 * 2^r)^2`.
fn rating_gain(r: f64) -> (f64, f64) {
    let r = r.clamp(1.0, 5.0);
    let g = r.exp2();
    (g - 1.0, (std::f64::consts::LN_2 * g).powi(2))
}

fn training_rewards(env: &Environment, ectx: &EnvContext, model: &RewardModel, cfg: &ExperimentConfig, kind: SignalKind) -> Result<ContextRewards> {
    let ctx = &ectx.ctx;
    let mut estimates: BTreeMap<ItemId, (f64, f64)> = BTreeMap::new();
    match model {
        RewardModel::GroundTruth => {
            return Ok(ContextRewards {
                relevance: ectx.eval_relevance.clone(),
                variances: ctx.candidates.iter().map(|&c| (c, 0.0)).collect(),
            });
        }
        RewardModel::Critic(critic) => {
            let u = critic.encode(&ctx.history, &env.embeddings)?;
            for &c in &ctx.candidates {
                let est = match ectx.observed.get(&c) {
                    Some(&s) => (s, 0.0),
                    None => {
                        let p = critic.predict_from_user(&u, env.embeddings.get(c)?);
                        (p.mean.max(0.0), p.variance)
                    }
                };
                estimates.insert(c, est);
            }
        }
        RewardModel::Cf(matrix) => {
            let imputed = knn_cf_impute_many(matrix, ctx.user_id, &ctx.candidates, cfg.reward.cf_mode, cfg.reward.k_neighbors)?;
            for (&c, cf) in ctx.candidates.iter().zip(imputed) {
                let s = ectx.observed.get(&c).copied().unwrap_or(cf.max(0.0));
                estimates.insert(c, (s, 0.0));
            }
        }
    }
    // ratings go through the gain map here so the need sees plain gains
    let (signals, variances): (BTreeMap<_, _>, BTreeMap<_, _>) = estimates
        .iter()
        .map(|(&c, &(s, v))| match kind {
            SignalKind::WatchRatio => ((c, s), (c, v)),
            SignalKind::Rating => {
                let (g, d) = rating_gain(s);
                ((c, g), (c, v * d))
            }
        })
        .unzip();
    let relevance = relevance_for(ctx, &cfg.need, &signals, SignalKind::WatchRatio, &ectx.similarities, &env.topics, &env.trend)?;
    // only the interest need reads signals, so only it inherits their uncertainty
    let variances = if matches!(cfg.need, NeedKind::MaxInterest) {
        variances
    } else {
        ctx.candidates.iter().map(|&c| (c, 0.0)).collect()
    };
    Ok(ContextRewards { relevance, variances })
}

/// Training rewards for every training context, in context order.
pub fn precompute_rewards(env: &Environment, model: &RewardModel, cfg: &ExperimentConfig) -> Result<Vec<ContextRewards>> {
    let kind = env.signal_kind();
    env.train.par_iter().map(|e| training_rewards(env, e, model, cfg, kind)).collect()
}

/// Mean greedy NDCG@5 and NDCG@10 over `contexts`.
pub fn greedy_ndcg(params: &PolicyParams, contexts: &[EnvContext]) -> Result<(f64, f64)> {
    let scores: Vec<(f64, f64)> = contexts
        .par_iter()
        .map(|e| {
            let y = greedy_ranking(params, &e.features);
            Ok((ndcg(&y, &e.eval_relevance, 5, GainKind::Linear)?, ndcg(&y, &e.eval_relevance, 10, GainKind::Linear)?))
        })
        .collect::<Result<_>>()?;
    let n = scores.len() as f64;
    Ok((scores.iter().map(|s| s.0).sum::<f64>() / n, scores.iter().map(|s| s.1).sum::<f64>() / n))
}

/// One row of `train_log.csv`. Step 0 holds only the initial validation.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainLogRow {
    pub step: usize,
    pub loss: Option<f64>,
    pub surrogate: Option<f64>,
    pub kl: Option<f64>,
    pub entropy: Option<f64>,
    pub clip_fraction: Option<f64>,
    pub mean_seq_reward: Option<f64>,
    pub mean_weight: Option<f64>,
    pub val_ndcg5: Option<f64>,
    pub val_ndcg10: Option<f64>,
}

impl TrainLogRow {
    pub const CSV_HEADER: &'static str =
        "step,loss,surrogate,kl,entropy,clip_fraction,mean_seq_reward,mean_weight,val_ndcg5,val_ndcg10";

    fn blank(step: usize) -> Self {
        Self {
            step,
            loss: None,
            surrogate: None,
            kl: None,
            entropy: None,
            clip_fraction: None,
            mean_seq_reward: None,
            mean_weight: None,
            val_ndcg5: None,
            val_ndcg10: None,
        }
    }

    pub fn write_csv<W: Write>(rows: &[TrainLogRow], mut w: W) -> Result<()> {
        let f = |v: Option<f64>| v.map(format_f64_17).unwrap_or_default();
        writeln!(w, "{}", Self::CSV_HEADER)?;
        for r in rows {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{}",
                r.step,
                f(r.loss),
                f(r.surrogate),
                f(r.kl),
                f(r.entropy),
                f(r.clip_fraction),
                f(r.mean_seq_reward),
                f(r.mean_weight),
                f(r.val_ndcg5),
                f(r.val_ndcg10)
            )?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainRun {
    pub params: PolicyParams,
    pub reference: PolicyParams,
    pub log: Vec<TrainLogRow>,
    /// Context ids of each step's batch.
    pub batches: Vec<Vec<u64>>,
}

impl TrainRun {
    /// Last logged validation NDCG@5 and NDCG@10.
    pub fn final_validation(&self) -> (f64, f64) {
        self.log
            .iter()
            .rev()
            .find_map(|r| Some((r.val_ndcg5?, r.val_ndcg10?)))
            .unwrap_or((f64::NAN, f64::NAN))
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for ((p, g), (m, v)) in params.iter_mut().zip(grad).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            *m = Self::B1 * *m + (1.0 - Self::B1) * g;
            *v = Self::B2 * *v + (1.0 - Self::B2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
        }
    }
}

/// Per-rollout rewards from fixed context gains.
fn group_for(rollouts: &[Rollout], rewards: &ContextRewards, cfg: &ExperimentConfig, context_id: u64) -> Result<RolloutGroup> {
    let mut item_rewards = Vec::with_capacity(rollouts.len());
    let mut seq_rewards = Vec::with_capacity(rollouts.len());
    let mut seq_variances = Vec::with_capacity(rollouts.len());
    let mut item_variances = Vec::with_capacity(rollouts.len());
    for r in rollouts {
        let gains = rewards.relevance.gains_for(&r.ranking.items)?;
        let vars: Vec<f64> = r.ranking.items.iter().map(|i| rewards.variances.get(i).copied().unwrap_or(0.0)).collect();
        let cutoff = if cfg.reward.cutoff == 0 { gains.len() } else { cfg.reward.cutoff.min(gains.len()) };
        let eval = SwapEvaluator::new(&gains, cutoff)?;
        item_rewards.push(eval.rewards(cfg.reward.variant));
        seq_rewards.push(ndcg_of_gains(&gains, cutoff, GainKind::Linear));
        seq_variances.push(if eval.idcg() > 0.0 { ndcg_sequence_variance(&vars, eval.idcg(), cutoff)? } else { 0.0 });
        item_variances.push(vars);
    }
    Ok(RolloutGroup {
        context_id,
        item_rewards,
        seq_rewards,
        seq_variances: Some(seq_variances),
        item_variances: Some(item_variances),
    })
}

fn validate_now(step: usize, t: &TrainerConfig) -> bool {
    step == t.steps || (t.eval_every > 0 && step % t.eval_every == 0)
}

fn write_checkpoint(params: &PolicyParams, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    params.save(&mut f)?;
    f.flush()?;
    Ok(())
}

/// Runs `cfg.trainer.steps` updates on precomputed training rewards. On a
/// non-finite loss or update the last good parameters are written to
/// `last_good` (when given) and `Error::Diverged` is returned.
pub fn train_policy(env: &Environment, rewards: &[ContextRewards], cfg: &ExperimentConfig, last_good: Option<&Path>) -> Result<TrainRun> {
    let t = &cfg.trainer;
    if rewards.len() != env.train.len() {
        return Err(Error::Dimension("one reward table per training context".into()));
    }
    let mut params = PolicyParams::zeros(cfg.policy.n_strategies, env.feature_dim(), cfg.policy.temperature)?;
    let mut reference = params.clone();
    let loss_cfg = t.loss();
    let n_params = params.n_params();
    let mut adam = Adam::new(n_params);
    let mut log = Vec::with_capacity(t.steps + 1);
    let mut batches = Vec::with_capacity(t.steps);

    let mut first = TrainLogRow::blank(0);
    let (v5, v10) = greedy_ndcg(&params, &env.val)?;
    first.val_ndcg5 = Some(v5);
    first.val_ndcg10 = Some(v10);
    log.push(first);

    let n_batch = t.contexts_per_step.min(env.train.len());
    for step in 1..=t.steps {
        if t.ref_refresh_every > 0 && step > 1 && (step - 1) % t.ref_refresh_every == 0 {
            reference = params.clone();
        }
        let mut batch_rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, BATCH_STREAM, step as u64));
        let mut picked = sample(&mut batch_rng, env.train.len(), n_batch).into_vec();
        picked.sort_unstable();
        batches.push(picked.iter().map(|&i| env.train[i].ctx.id).collect());

        let slots: Vec<(usize, usize)> = picked.iter().flat_map(|&c| (0..t.group_size).map(move |g| (c, g))).collect();
        let rollouts: Vec<Rollout> = slots
            .par_iter()
            .enumerate()
            .map(|(slot, &(c, _))| {
                let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, ROLLOUT_STREAM, ((step as u64) << 32) | slot as u64));
                sample_rollout(&params, &env.train[c].features, &mut rng)
            })
            .collect::<Result<_>>()?;

        let groups: Vec<(RolloutGroup, Vec<Vec<f64>>, Vec<f64>)> = picked
            .par_iter()
            .enumerate()
            .map(|(b, &c)| {
                let rs = &rollouts[b * t.group_size..(b + 1) * t.group_size];
                let group = group_for(rs, &rewards[c], cfg, env.train[c].ctx.id)?;
                let a = assign_token_advantages(&group, &cfg.advantage)?;
                Ok((group, a.step_adv, a.weights))
            })
            .collect::<Result<_>>()?;
        let step_adv: Vec<Vec<f64>> = groups.iter().flat_map(|g| g.1.iter().cloned()).collect();
        let n_roll = rollouts.len() as f64;
        let mean_seq_reward = groups.iter().flat_map(|g| g.0.seq_rewards.iter()).sum::<f64>() / n_roll;
        let mean_weight = groups.iter().flat_map(|g| g.2.iter()).sum::<f64>() / n_roll;

        let ref_logprobs: Vec<Vec<f64>> = rollouts
            .par_iter()
            .zip(&slots)
            .map(|(r, &(c, _))| ranking_logprobs(&reference, r.strategy, &r.ranking, &env.train[c].features))
            .collect::<Result<_>>()?;

        let mut row = TrainLogRow::blank(step);
        for _ in 0..t.inner_epochs {
            let terms: Vec<StepTerms> = rollouts
                .par_iter()
                .zip(&slots)
                .map(|(r, &(c, _))| step_terms(&params, r, &env.train[c].features))
                .collect::<Result<_>>()?;
            let inputs: Vec<StepInputs<'_>> = terms
                .iter()
                .zip(&rollouts)
                .zip(&ref_logprobs)
                .map(|((s, r), rl)| StepInputs {
                    logprobs: &s.logprobs,
                    grad_logprobs: &s.grad_logprobs,
                    entropies: &s.entropies,
                    grad_entropies: &s.grad_entropies,
                    old_logprobs: &r.step_logprobs,
                    ref_logprobs: rl,
                })
                .collect();
            let parts = grpo_loss(&step_adv, &inputs, &loss_cfg, n_params)?;
            let diverged = |detail: String| -> Result<TrainRun> {
                if let Some(p) = last_good {
                    write_checkpoint(&params, p)?;
                }
                Err(Error::Diverged {
                    stage: "policy",
                    index: step,
                    detail,
                })
            };
            if !parts.loss.is_finite() || parts.gradient.iter().any(|g| !g.is_finite()) {
                return diverged(format!("loss {}", parts.loss));
            }
            let mut flat = params.to_flat();
            match t.optimizer {
                Optimizer::Adam => adam.step(&mut flat, &parts.gradient, t.learning_rate),
                Optimizer::Sgd => flat.iter_mut().zip(&parts.gradient).for_each(|(p, g)| *p -= t.learning_rate * g),
            }
            if flat.iter().any(|v| !v.is_finite()) {
                return diverged("parameters became non-finite".into());
            }
            params.set_flat(&flat)?;
            row.loss = Some(parts.loss);
            row.surrogate = Some(parts.surrogate);
            row.kl = Some(parts.kl);
            row.entropy = Some(parts.entropy);
            row.clip_fraction = Some(parts.clip_fraction);
        }
        row.mean_seq_reward = Some(mean_seq_reward);
        row.mean_weight = Some(mean_weight);
        if validate_now(step, t) {
            let (v5, v10) = greedy_ndcg(&params, &env.val)?;
            row.val_ndcg5 = Some(v5);
            row.val_ndcg10 = Some(v10);
        }
        log.push(row);
    }
    Ok(TrainRun {
        params,
        reference,
        log,
        batches,
    })
}

/// Builds the reward model for `cfg`, then trains.
pub fn run_train(env: &Environment, cfg: &ExperimentConfig, last_good: Option<&Path>) -> Result<TrainRun> {
    let model = RewardModel::from_config(env, cfg)?;
    let rewards = precompute_rewards(env, &model, cfg)?;
    train_policy(env, &rewards, cfg, last_good)
}
