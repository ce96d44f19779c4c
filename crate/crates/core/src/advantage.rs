//! Group-relative advantages and the clipped policy-gradient loss.
//!
//! Item-level advantages standardize every item reward of a group as one
//! pool, so an item is judged against all items of all rollouts for the
//! same context. Sequence-level advantages standardize the G sequence
//! rewards. Inverse-variance weights shrink sequence advantages whose
//! rewards came from uncertain imputations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ranking::discount;

/// Standardization guard.
pub const ADVANTAGE_EPS: f64 = 1e-8;
/// Guard inside `1 / (v + eps)`.
pub const WEIGHT_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvantageMode {
    #[default]
    ItemLevel,
    SequenceLevel,
}

impl AdvantageMode {
    pub fn name(self) -> &'static str {
        match self {
            AdvantageMode::ItemLevel => "item_level",
            AdvantageMode::SequenceLevel => "sequence_level",
        }
    }
}

/// Population mean and standard deviation.
pub fn moments(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn standardize(values: &[f64], eps: f64) -> Vec<f64> {
    if values.iter().all(|&v| v == values[0]) {
        return vec![0.0; values.len()];
    }
    let (mean, std) = moments(values);
    // the rounded mean can sit an ulp off, which a tiny spread would amplify;
    // recentring the deviations removes that residual
    let dev: Vec<f64> = values.iter().map(|v| v - mean).collect();
    let residual = dev.iter().sum::<f64>() / dev.len() as f64;
    dev.iter().map(|d| (d - residual) / (std + eps)).collect()
}

fn check_eps(eps: f64) -> Result<()> {
    if eps.is_finite() && eps >= 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument("eps must be finite and nonnegative".into()))
    }
}

/// `(r - mean) / (std + eps)` with the moments taken over all `G * K` entries.
///
/// A constant pool yields zeros, including with `eps = 0`.
pub fn item_advantages(rewards: &[Vec<f64>], eps: f64) -> Result<Vec<Vec<f64>>> {
    check_eps(eps)?;
    let width = rewards.first().map_or(0, Vec::len);
    if width == 0 {
        return Err(Error::Empty("item reward matrix"));
    }
    if rewards.iter().any(|r| r.len() != width) {
        return Err(Error::Dimension("item reward rows differ in length".into()));
    }
    let flat: Vec<f64> = rewards.concat();
    if flat.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("item rewards"));
    }
    let z = standardize(&flat, eps);
    Ok(z.chunks(width).map(<[f64]>::to_vec).collect())
}

pub fn seq_advantages(rewards: &[f64], eps: f64) -> Result<Vec<f64>> {
    check_eps(eps)?;
    if rewards.is_empty() {
        return Err(Error::Empty("sequence rewards"));
    }
    if rewards.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("sequence rewards"));
    }
    Ok(standardize(rewards, eps))
}

/// `c_i = 1 / (v_i + eps)`, then `min(c_i / mean(c), 1)`.
pub fn uncertainty_weights(variances: &[f64], eps: f64) -> Result<Vec<f64>> {
    check_eps(eps)?;
    if variances.is_empty() {
        return Err(Error::Empty("variances"));
    }
    if variances.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::InvalidArgument("variances must be finite and nonnegative".into()));
    }
    if variances.iter().any(|v| v + eps <= 0.0) {
        return Err(Error::InvalidArgument("zero variance needs eps > 0".into()));
    }
    // c_i / mean(c) written as n / sum_j (v_i + eps) / (v_j + eps), which is
    // exactly 1 when all variances agree
    let n = variances.len() as f64;
    Ok(variances
        .iter()
        .map(|vi| {
            let denom: f64 = variances.iter().map(|vj| (vi + eps) / (vj + eps)).sum();
            (n / denom).min(1.0)
        })
        .collect())
}

/// Sum of item variances, ignoring covariance between items. Uses
/// compensated summation.
pub fn aggregate_sequence_variance(item_vars: &[f64]) -> Result<f64> {
    if item_vars.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::InvalidArgument("item variances must be finite and nonnegative".into()));
    }
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for &v in item_vars {
        let t = sum + v;
        comp += if sum.abs() >= v.abs() { (sum - t) + v } else { (v - t) + sum };
        sum = t;
    }
    Ok(sum + comp)
}

/// Variance of a ranking's NDCG when each item's gain has variance
/// `var_by_rank[k]`: rank `k` enters with weight `discount(k) / idcg`, so its
/// variance is scaled by that weight squared. Ranks past `cutoff` do not
/// contribute.
pub fn ndcg_sequence_variance(var_by_rank: &[f64], idcg: f64, cutoff: usize) -> Result<f64> {
    if idcg <= 0.0 {
        return Ok(0.0);
    }
    let scaled: Vec<f64> = var_by_rank
        .iter()
        .enumerate()
        .map(|(k, v)| if k < cutoff { v * (discount(k + 1) / idcg).powi(2) } else { 0.0 })
        .collect();
    aggregate_sequence_variance(&scaled)
}

/// Rewards and reward uncertainty for the G rollouts of one context.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutGroup {
    pub context_id: u64,
    /// `[G x K]`, rank order.
    pub item_rewards: Vec<Vec<f64>>,
    pub seq_rewards: Vec<f64>,
    pub seq_variances: Option<Vec<f64>>,
    /// `[G x K]` variance of each ranked item's imputed reward.
    pub item_variances: Option<Vec<Vec<f64>>>,
}

impl RolloutGroup {
    pub fn size(&self) -> usize {
        self.seq_rewards.len()
    }

    fn validate(&self) -> Result<usize> {
        let g = self.size();
        if g < 2 {
            return Err(Error::InvalidArgument(format!("group {} has {g} rollouts, need at least 2", self.context_id)));
        }
        if self.item_rewards.len() != g {
            return Err(Error::Dimension("item reward rows must match the group size".into()));
        }
        let k = self.item_rewards[0].len();
        if self.item_rewards.iter().any(|r| r.len() != k) {
            return Err(Error::Dimension("item reward rows differ in length".into()));
        }
        if let Some(v) = &self.seq_variances {
            if v.len() != g {
                return Err(Error::Dimension("sequence variances must match the group size".into()));
            }
        }
        if let Some(v) = &self.item_variances {
            if v.len() != g || v.iter().any(|r| r.len() != k) {
                return Err(Error::Dimension("item variances must be [G x K]".into()));
            }
        }
        Ok(k)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdvantageConfig {
    pub mode: AdvantageMode,
    pub uncertainty: bool,
    /// Also reweight item advantages by per-item inverse variance.
    pub per_item_uncertainty: bool,
    pub advantage_eps: f64,
    pub weight_eps: f64,
}

impl Default for AdvantageConfig {
    fn default() -> Self {
        Self {
            mode: AdvantageMode::ItemLevel,
            uncertainty: false,
            per_item_uncertainty: false,
            advantage_eps: ADVANTAGE_EPS,
            weight_eps: WEIGHT_EPS,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdvantageAssignment {
    pub item_adv: Vec<Vec<f64>>,
    pub seq_adv: Vec<f64>,
    pub weights: Vec<f64>,
    pub weighted_seq_adv: Vec<f64>,
    /// Per rollout: the strategy step, then one entry per ranked item.
    pub step_adv: Vec<Vec<f64>>,
}

pub fn assign_token_advantages(group: &RolloutGroup, cfg: &AdvantageConfig) -> Result<AdvantageAssignment> {
    let k = group.validate()?;
    let mut item_adv = item_advantages(&group.item_rewards, cfg.advantage_eps)?;
    let seq_adv = seq_advantages(&group.seq_rewards, cfg.advantage_eps)?;
    let weights = if cfg.uncertainty {
        let v = group
            .seq_variances
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("uncertainty weighting needs sequence variances".into()))?;
        uncertainty_weights(v, cfg.weight_eps)?
    } else {
        vec![1.0; group.size()]
    };
    if cfg.uncertainty && cfg.per_item_uncertainty {
        let v = group
            .item_variances
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("per-item weighting needs item variances".into()))?;
        let w = uncertainty_weights(&v.concat(), cfg.weight_eps)?;
        for (row, wrow) in item_adv.iter_mut().zip(w.chunks(k)) {
            row.iter_mut().zip(wrow).for_each(|(a, w)| *a *= w);
        }
    }
    let weighted_seq_adv: Vec<f64> = seq_adv.iter().zip(&weights).map(|(a, c)| a * c).collect();
    let step_adv = weighted_seq_adv
        .iter()
        .zip(&item_adv)
        .map(|(&s, items)| {
            let mut steps = Vec::with_capacity(k + 1);
            steps.push(s);
            match cfg.mode {
                AdvantageMode::ItemLevel => steps.extend_from_slice(items),
                AdvantageMode::SequenceLevel => steps.extend(std::iter::repeat_n(s, k)),
            }
            steps
        })
        .collect();
    Ok(AdvantageAssignment {
        item_adv,
        seq_adv,
        weights,
        weighted_seq_adv,
        step_adv,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub clip_ratio: f64,
    pub kl_coeff: f64,
    pub entropy_coeff: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            clip_ratio: 0.2,
            kl_coeff: 0.01,
            entropy_coeff: 0.005,
        }
    }
}

/// Everything the loss needs about one rollout, step-aligned.
#[derive(Clone, Copy, Debug)]
pub struct StepInputs<'a> {
    pub logprobs: &'a [f64],
    pub grad_logprobs: &'a [Vec<f64>],
    pub entropies: &'a [f64],
    pub grad_entropies: &'a [Vec<f64>],
    pub old_logprobs: &'a [f64],
    pub ref_logprobs: &'a [f64],
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossParts {
    pub loss: f64,
    pub surrogate: f64,
    pub kl: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub gradient: Vec<f64>,
}

/// Token-mean of `-min(rho A, clip(rho) A) + kl_coeff * k3 - entropy_coeff * H`
/// over every step of every rollout, with its exact gradient. The KL term is
/// `exp(ref - cur) - (ref - cur) - 1`.
pub fn grpo_loss(step_adv: &[Vec<f64>], rollouts: &[StepInputs<'_>], cfg: &LossConfig, n_params: usize) -> Result<LossParts> {
    if !(cfg.clip_ratio > 0.0) || cfg.kl_coeff < 0.0 || cfg.entropy_coeff < 0.0 {
        return Err(Error::InvalidArgument("clip_ratio must be > 0 and coefficients >= 0".into()));
    }
    if step_adv.len() != rollouts.len() {
        return Err(Error::Dimension("one advantage row per rollout".into()));
    }
    let mut out = LossParts {
        gradient: vec![0.0; n_params],
        ..Default::default()
    };
    let mut n_steps = 0usize;
    let mut n_clipped = 0usize;
    for (adv, r) in step_adv.iter().zip(rollouts) {
        let n = adv.len();
        let aligned = [
            r.logprobs.len(),
            r.grad_logprobs.len(),
            r.entropies.len(),
            r.grad_entropies.len(),
            r.old_logprobs.len(),
            r.ref_logprobs.len(),
        ];
        if aligned.iter().any(|&l| l != n) {
            return Err(Error::Dimension("step lists are not aligned".into()));
        }
        for t in 0..n {
            let (lp, old, rf, a) = (r.logprobs[t], r.old_logprobs[t], r.ref_logprobs[t], adv[t]);
            if !(lp.is_finite() && old.is_finite() && rf.is_finite()) {
                return Err(Error::NonFinite("step logprobs"));
            }
            let rho = (lp - old).exp();
            let unclipped = rho * a;
            let clipped = rho.clamp(1.0 - cfg.clip_ratio, 1.0 + cfg.clip_ratio) * a;
            // d(-rho A)/d lp = -rho A; the clipped branch is flat
            let mut coeff = 0.0;
            if unclipped <= clipped {
                out.surrogate -= unclipped;
                coeff -= unclipped;
            } else {
                out.surrogate -= clipped;
                n_clipped += 1;
            }
            let x = rf - lp;
            out.kl += x.exp() - x - 1.0;
            coeff += cfg.kl_coeff * (1.0 - x.exp());
            out.entropy += r.entropies[t];

            let g = &r.grad_logprobs[t];
            let gh = &r.grad_entropies[t];
            if g.len() != n_params || gh.len() != n_params {
                return Err(Error::Dimension("gradient width differs from parameter count".into()));
            }
            for ((o, gl), ge) in out.gradient.iter_mut().zip(g).zip(gh) {
                *o += coeff * gl - cfg.entropy_coeff * ge;
            }
        }
        n_steps += n;
    }
    if n_steps == 0 {
        return Err(Error::Empty("rollout steps"));
    }
    let inv = 1.0 / n_steps as f64;
    out.surrogate *= inv;
    out.kl *= inv;
    out.entropy *= inv;
    out.loss = out.surrogate + cfg.kl_coeff * out.kl - cfg.entropy_coeff * out.entropy;
    out.clip_fraction = n_clipped as f64 * inv;
    out.gradient.iter_mut().for_each(|g| *g *= inv);
    Ok(out)
}
