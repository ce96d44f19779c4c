//! Featurized Plackett-Luce ranking policy with a discrete strategy step.
//!
//! A rollout first draws a strategy `s ~ softmax(strategy_logits)`, then
//! picks items one at a time from the remaining pool with probability
//! `softmax(w_s . f / temperature)` restricted to that pool. Step
//! log-probabilities, entropies and their gradients are exact.
//!
//! Flat parameter layout: `score_weights` row-major `[S x D]`, followed by
//! `strategy_logits` `[S]`. Gradients share this layout.

use std::io::{Read, Write};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{CheckpointKind, FlatCheckpoint};
use crate::data::{dot, history_query, EmbeddingTable, RetrievalConfig, TopicMap};
use crate::error::{Error, Result};
use crate::needs::{self, minmax_normalize, NeedKind, TrendIndex, ONE_DAY_SECONDS};
use crate::ranking::{Context, ItemId, Ranking};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    pub projection_dim: usize,
    pub projection_seed: u64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            projection_dim: 8,
            projection_seed: 17,
        }
    }
}

/// Builds the per-candidate input vector
/// `[cosine(query, item), trend_norm, niche, projected embedding, need one-hot]`.
pub struct FeatureBuilder<'a> {
    embeddings: &'a EmbeddingTable,
    topics: Option<&'a TopicMap>,
    trend: Option<&'a TrendIndex>,
    query_cfg: RetrievalConfig,
    /// `[projection_dim x embedding dim]`
    projection: Vec<Vec<f64>>,
}

impl<'a> FeatureBuilder<'a> {
    pub fn new(
        embeddings: &'a EmbeddingTable,
        topics: Option<&'a TopicMap>,
        trend: Option<&'a TrendIndex>,
        query_cfg: RetrievalConfig,
        cfg: &FeatureConfig,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.projection_seed);
        let projection = (0..cfg.projection_dim)
            .map(|_| (0..embeddings.dim).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        Self {
            embeddings,
            topics,
            trend,
            query_cfg,
            projection,
        }
    }

    pub fn dim(&self) -> usize {
        3 + self.projection.len() + NeedKind::COUNT
    }

    fn window(need: &NeedKind) -> i64 {
        match *need {
            NeedKind::TrendPromotion { window_seconds, .. } => window_seconds,
            _ => ONE_DAY_SECONDS,
        }
    }

    fn trend_counts(&self, ctx: &Context, need: &NeedKind) -> Vec<f64> {
        let (Some(trend), Some(last)) = (self.trend, ctx.history.last()) else {
            return vec![0.0; ctx.candidates.len()];
        };
        let window = Self::window(need);
        ctx.candidates
            .iter()
            .map(|&c| trend.count(c, last.timestamp, window) as f64)
            .collect()
    }

    fn row(&self, ctx: &Context, item: ItemId, need: &NeedKind, query: &[f64], trend_norm: f64, seen: &std::collections::BTreeSet<String>) -> Result<Vec<f64>> {
        let e = self.embeddings.get(item)?;
        let niche = self
            .topics
            .map_or(false, |t| needs::niche_label(t.topics_of(item), seen));
        let mut f = Vec::with_capacity(self.dim());
        f.push(dot(query, e));
        f.push(trend_norm);
        f.push(if niche { 1.0 } else { 0.0 });
        f.extend(self.projection.iter().map(|p| dot(p, e)));
        let mut onehot = [0.0; NeedKind::COUNT];
        onehot[need.index()] = 1.0;
        f.extend(onehot);
        debug_assert_eq!(ctx.candidates.contains(&item), true);
        Ok(f)
    }

    pub fn featurize(&self, ctx: &Context, item: ItemId, need: &NeedKind) -> Result<Vec<f64>> {
        let pos = ctx
            .position(item)
            .ok_or_else(|| Error::InvalidArgument(format!("item {item} is not a candidate")))?;
        let query = history_query(&ctx.history, self.embeddings, &self.query_cfg)?;
        let trend = minmax_normalize(&self.trend_counts(ctx, need));
        let seen = self.topics.map(|t| needs::history_topics(ctx, t)).unwrap_or_default();
        self.row(ctx, item, need, &query, trend[pos], &seen)
    }

    pub fn context_features(&self, ctx: &Context) -> Result<ContextFeatures> {
        let query = history_query(&ctx.history, self.embeddings, &self.query_cfg)?;
        let trend = minmax_normalize(&self.trend_counts(ctx, &ctx.need));
        let seen = self.topics.map(|t| needs::history_topics(ctx, t)).unwrap_or_default();
        let mut rows = Vec::with_capacity(ctx.candidates.len() * self.dim());
        for (pos, &c) in ctx.candidates.iter().enumerate() {
            rows.extend(self.row(ctx, c, &ctx.need, &query, trend[pos], &seen)?);
        }
        Ok(ContextFeatures {
            context_id: ctx.id,
            candidates: ctx.candidates.clone(),
            dim: self.dim(),
            rows,
        })
    }
}

/// Feature rows aligned with a context's candidate order.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextFeatures {
    pub context_id: u64,
    pub candidates: Vec<ItemId>,
    pub dim: usize,
    pub rows: Vec<f64>,
}

impl ContextFeatures {
    pub fn from_rows(context_id: u64, candidates: Vec<ItemId>, rows: Vec<Vec<f64>>) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.len() != candidates.len() || rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Dimension("feature rows must match candidates and share a width".into()));
        }
        Ok(Self {
            context_id,
            candidates,
            dim,
            rows: rows.concat(),
        })
    }

    pub fn row(&self, idx: usize) -> &[f64] {
        &self.rows[idx * self.dim..(idx + 1) * self.dim]
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    fn index_of(&self, item: ItemId) -> Option<usize> {
        self.candidates.iter().position(|&c| c == item)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyParams {
    pub n_strategies: usize,
    pub dim: usize,
    /// Row-major `[n_strategies x dim]`.
    pub score_weights: Vec<f64>,
    pub strategy_logits: Vec<f64>,
    pub temperature: f64,
}

impl PolicyParams {
    /// All-zero parameters: the uniform policy.
    pub fn zeros(n_strategies: usize, dim: usize, temperature: f64) -> Result<Self> {
        if n_strategies == 0 || dim == 0 {
            return Err(Error::InvalidArgument("policy needs at least one strategy and feature".into()));
        }
        if !(temperature > 0.0) {
            return Err(Error::InvalidArgument("temperature must be > 0".into()));
        }
        Ok(Self {
            n_strategies,
            dim,
            score_weights: vec![0.0; n_strategies * dim],
            strategy_logits: vec![0.0; n_strategies],
            temperature,
        })
    }

    pub fn n_params(&self) -> usize {
        self.score_weights.len() + self.strategy_logits.len()
    }

    pub fn weights(&self, strategy: usize) -> &[f64] {
        &self.score_weights[strategy * self.dim..(strategy + 1) * self.dim]
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.score_weights.clone();
        v.extend_from_slice(&self.strategy_logits);
        v
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_params() {
            return Err(Error::Dimension(format!("expected {} parameters, got {}", self.n_params(), flat.len())));
        }
        let split = self.score_weights.len();
        self.score_weights.copy_from_slice(&flat[..split]);
        self.strategy_logits.copy_from_slice(&flat[split..]);
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.score_weights.iter().chain(&self.strategy_logits).all(|x| x.is_finite())
    }

    /// Scaled logits `w_s . f / T` for every candidate.
    pub fn item_logits(&self, strategy: usize, feats: &ContextFeatures) -> Vec<f64> {
        let w = self.weights(strategy);
        (0..feats.len())
            .map(|i| dot(w, feats.row(i)) / self.temperature)
            .collect()
    }

    pub fn strategy_probs(&self) -> Vec<f64> {
        softmax(&self.strategy_logits)
    }

    pub fn to_checkpoint(&self) -> FlatCheckpoint {
        FlatCheckpoint {
            kind: CheckpointKind::Policy,
            header: vec![self.n_strategies as u64, self.dim as u64],
            scalars: vec![self.temperature],
            values: self.to_flat(),
        }
    }

    pub fn from_checkpoint(ck: &FlatCheckpoint) -> Result<Self> {
        if ck.kind != CheckpointKind::Policy || ck.header.len() != 2 || ck.scalars.len() != 1 {
            return Err(Error::Checkpoint("not a policy checkpoint".into()));
        }
        let mut p = Self::zeros(ck.header[0] as usize, ck.header[1] as usize, ck.scalars[0])?;
        p.set_flat(&ck.values).map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(p)
    }

    pub fn save<W: Write>(&self, w: W) -> Result<()> {
        self.to_checkpoint().write(w)
    }

    pub fn load<R: Read>(r: R) -> Result<Self> {
        Self::from_checkpoint(&FlatCheckpoint::read(r)?)
    }
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits.iter().copied());
    logits.iter().map(|&l| (l - lse).exp()).collect()
}

fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding left a sliver above the last cumulative mass
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    pub strategy: usize,
    pub ranking: Ranking,
    /// Strategy step first, then one entry per ranked item.
    pub step_logprobs: Vec<f64>,
}

impl Rollout {
    pub fn total_logprob(&self) -> f64 {
        self.step_logprobs.iter().sum()
    }
}

pub fn sample_rollout<R: Rng + ?Sized>(params: &PolicyParams, feats: &ContextFeatures, rng: &mut R) -> Result<Rollout> {
    if feats.is_empty() {
        return Err(Error::Empty("candidate pool"));
    }
    let sprobs = params.strategy_probs();
    let strategy = sample_index(&sprobs, rng);
    let logits = params.item_logits(strategy, feats);
    let mut pool: Vec<usize> = (0..feats.len()).collect();
    let mut items = Vec::with_capacity(pool.len());
    let mut step_logprobs = Vec::with_capacity(pool.len() + 1);
    step_logprobs.push(sprobs[strategy].ln());
    while !pool.is_empty() {
        let lse = log_sum_exp(pool.iter().map(|&i| logits[i]));
        let probs: Vec<f64> = pool.iter().map(|&i| (logits[i] - lse).exp()).collect();
        let pick = sample_index(&probs, rng);
        let chosen = pool.remove(pick);
        step_logprobs.push(logits[chosen] - lse);
        items.push(feats.candidates[chosen]);
    }
    Ok(Rollout {
        strategy,
        ranking: Ranking {
            items,
            source_context: feats.context_id,
        },
        step_logprobs,
    })
}

/// Most likely strategy, then candidates by descending score (ties keep
/// candidate order): the zero-temperature limit.
pub fn greedy_ranking(params: &PolicyParams, feats: &ContextFeatures) -> Ranking {
    let strategy = params
        .strategy_logits
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &l)| if l > best.1 { (i, l) } else { best })
        .0;
    let logits = params.item_logits(strategy, feats);
    let mut order: Vec<usize> = (0..feats.len()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    Ranking {
        items: order.into_iter().map(|i| feats.candidates[i]).collect(),
        source_context: feats.context_id,
    }
}

/// Exact per-step quantities for one rollout.
#[derive(Clone, Debug)]
pub struct StepTerms {
    pub logprobs: Vec<f64>,
    /// Entropy of the distribution each step sampled from.
    pub entropies: Vec<f64>,
    /// Flat gradients of each step log-probability.
    pub grad_logprobs: Vec<Vec<f64>>,
    pub grad_entropies: Vec<Vec<f64>>,
}

fn resolve_ranking(rollout: &Rollout, feats: &ContextFeatures) -> Result<Vec<usize>> {
    if rollout.ranking.source_context != feats.context_id {
        return Err(Error::ContextMismatch(feats.context_id.to_string()));
    }
    if rollout.ranking.len() != feats.len() {
        return Err(Error::IncompleteRanking {
            len: rollout.ranking.len(),
            expected: feats.len(),
        });
    }
    let mut seen = vec![false; feats.len()];
    rollout
        .ranking
        .items
        .iter()
        .map(|&item| {
            let idx = feats
                .index_of(item)
                .ok_or_else(|| Error::ContextMismatch(feats.context_id.to_string()))?;
            if std::mem::replace(&mut seen[idx], true) {
                return Err(Error::InvalidArgument("ranking repeats an item".into()));
            }
            Ok(idx)
        })
        .collect()
}

pub fn step_terms(params: &PolicyParams, rollout: &Rollout, feats: &ContextFeatures) -> Result<StepTerms> {
    if feats.dim != params.dim {
        return Err(Error::Dimension(format!("features have width {}, policy expects {}", feats.dim, params.dim)));
    }
    if rollout.strategy >= params.n_strategies {
        return Err(Error::InvalidArgument(format!("strategy {} out of range", rollout.strategy)));
    }
    let order = resolve_ranking(rollout, feats)?;
    let n_params = params.n_params();
    let logit_offset = params.score_weights.len();
    let s = rollout.strategy;
    let w_offset = s * params.dim;
    let inv_t = 1.0 / params.temperature;

    let mut out = StepTerms {
        logprobs: Vec::with_capacity(order.len() + 1),
        entropies: Vec::with_capacity(order.len() + 1),
        grad_logprobs: Vec::with_capacity(order.len() + 1),
        grad_entropies: Vec::with_capacity(order.len() + 1),
    };

    // strategy step
    let sp = params.strategy_probs();
    let s_entropy: f64 = -sp.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>();
    let mut g_lp = vec![0.0; n_params];
    let mut g_h = vec![0.0; n_params];
    for (t, &p) in sp.iter().enumerate() {
        g_lp[logit_offset + t] = if t == s { 1.0 } else { 0.0 } - p;
        let lp = if p > 0.0 { p.ln() } else { 0.0 };
        g_h[logit_offset + t] = -p * (lp + s_entropy);
    }
    out.logprobs.push(sp[s].ln());
    out.entropies.push(s_entropy);
    out.grad_logprobs.push(g_lp);
    out.grad_entropies.push(g_h);

    let logits = params.item_logits(s, feats);
    let mut pool: Vec<usize> = (0..feats.len()).collect();
    for &chosen in &order {
        let lse = log_sum_exp(pool.iter().map(|&i| logits[i]));
        let probs: Vec<f64> = pool.iter().map(|&i| (logits[i] - lse).exp()).collect();
        let logp: Vec<f64> = pool.iter().map(|&i| logits[i] - lse).collect();
        let entropy: f64 = -probs.iter().zip(&logp).map(|(p, l)| p * l).sum::<f64>();
        let mut g_lp = vec![0.0; n_params];
        let mut g_h = vec![0.0; n_params];
        let fc = feats.row(chosen);
        for d in 0..params.dim {
            g_lp[w_offset + d] = fc[d] * inv_t;
        }
        for ((&i, &p), &l) in pool.iter().zip(&probs).zip(&logp) {
            let f = feats.row(i);
            let dh = -p * (l + entropy);
            for d in 0..params.dim {
                g_lp[w_offset + d] -= p * f[d] * inv_t;
                g_h[w_offset + d] += dh * f[d] * inv_t;
            }
        }
        out.logprobs.push(logits[chosen] - lse);
        out.entropies.push(entropy);
        out.grad_logprobs.push(g_lp);
        out.grad_entropies.push(g_h);
        let at = pool.iter().position(|&i| i == chosen).expect("chosen index is in the pool");
        pool.remove(at);
    }
    Ok(out)
}

/// Recomputed step log-probabilities and their flat gradients.
pub fn rollout_logprob_and_grad(params: &PolicyParams, rollout: &Rollout, feats: &ContextFeatures) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let t = step_terms(params, rollout, feats)?;
    Ok((t.logprobs, t.grad_logprobs))
}

/// Step log-probabilities of a ranking under a given strategy.
pub fn ranking_logprobs(params: &PolicyParams, strategy: usize, ranking: &Ranking, feats: &ContextFeatures) -> Result<Vec<f64>> {
    let rollout = Rollout {
        strategy,
        ranking: ranking.clone(),
        step_logprobs: vec![],
    };
    let order = resolve_ranking(&rollout, feats)?;
    let sp = params.strategy_probs();
    let logits = params.item_logits(strategy, feats);
    let mut pool: Vec<usize> = (0..feats.len()).collect();
    let mut out = vec![sp[strategy].ln()];
    for chosen in order {
        let lse = log_sum_exp(pool.iter().map(|&i| logits[i]));
        out.push(logits[chosen] - lse);
        pool.retain(|&i| i != chosen);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ranking::{HistoryEntry, UserId};
    use std::collections::BTreeMap;

    fn toy_features(n: usize, dim: usize, seed: u64) -> ContextFeatures {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = (0..n)
            .map(|_| (0..dim).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect())
            .collect();
        ContextFeatures::from_rows(5, (0..n as u32).map(ItemId).collect(), rows).unwrap()
    }

    fn random_params(s: usize, d: usize, seed: u64) -> PolicyParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = PolicyParams::zeros(s, d, 0.7).unwrap();
        let flat: Vec<f64> = (0..p.n_params()).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        p.set_flat(&flat).unwrap();
        p
    }

    #[test]
    fn single_strategy_step_is_free() {
        let feats = toy_features(4, 3, 0);
        let p = random_params(1, 3, 1);
        let r = sample_rollout(&p, &feats, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(r.step_logprobs[0], 0.0);
        assert_eq!(r.step_logprobs.len(), 5);
    }

    #[test]
    fn uniform_policy_logprob_is_minus_log_pool() {
        let feats = toy_features(6, 3, 0);
        let p = PolicyParams::zeros(3, 3, 1.0).unwrap();
        let r = sample_rollout(&p, &feats, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        for (k, lp) in r.step_logprobs[1..].iter().enumerate() {
            assert!((lp + ((6 - k) as f64).ln()).abs() < 1e-12);
        }
        assert!((r.step_logprobs[0] + 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn strategy_step_gradient_ignores_score_weights() {
        let feats = toy_features(5, 4, 3);
        let p = random_params(3, 4, 4);
        let r = sample_rollout(&p, &feats, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let (_, grads) = rollout_logprob_and_grad(&p, &r, &feats).unwrap();
        assert!(grads[0][..p.score_weights.len()].iter().all(|&g| g == 0.0));
    }

    #[test]
    fn recomputed_logprobs_match_sampled() {
        let feats = toy_features(7, 4, 5);
        let p = random_params(3, 4, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let r = sample_rollout(&p, &feats, &mut rng).unwrap();
            let (lp, _) = rollout_logprob_and_grad(&p, &r, &feats).unwrap();
            for (a, b) in lp.iter().zip(&r.step_logprobs) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sampling_is_seed_deterministic_and_valid() {
        let feats = toy_features(9, 4, 5);
        let p = random_params(3, 4, 6);
        let a = sample_rollout(&p, &feats, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = sample_rollout(&p, &feats, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
        let mut sorted = a.ranking.items.clone();
        sorted.sort();
        assert_eq!(sorted, feats.candidates);
    }

    #[test]
    fn low_temperature_sampling_is_greedy() {
        let feats = toy_features(6, 3, 8);
        let mut p = random_params(1, 3, 9);
        p.temperature = 1e-9;
        let r = sample_rollout(&p, &feats, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(r.ranking, greedy_ranking(&p, &feats));
        let scores = p.item_logits(0, &feats);
        let mut idx: Vec<usize> = (0..6).collect();
        idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
        let want: Vec<ItemId> = idx.into_iter().map(|i| ItemId(i as u32)).collect();
        assert_eq!(r.ranking.items, want);
    }

    #[test]
    fn step_distributions_sum_to_one_and_shift_invariant() {
        let feats = toy_features(6, 3, 10);
        let p = random_params(2, 3, 11);
        let logits = p.item_logits(1, &feats);
        let total: f64 = softmax(&logits).iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
        let shifted: Vec<f64> = logits.iter().map(|l| l + 3.7).collect();
        for (a, b) in softmax(&logits).iter().zip(softmax(&shifted)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn first_item_frequency_matches_softmax() {
        let feats = toy_features(4, 3, 12);
        let p = random_params(1, 3, 13);
        let probs = softmax(&p.item_logits(0, &feats));
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut counts = [0usize; 4];
        for _ in 0..n {
            let r = sample_rollout(&p, &feats, &mut rng).unwrap();
            counts[r.ranking.items[0].0 as usize] += 1;
        }
        for (c, p) in counts.iter().zip(&probs) {
            let freq = *c as f64 / n as f64;
            let se = (p * (1.0 - p) / n as f64).sqrt();
            assert!((freq - p).abs() < 3.0 * se, "freq {freq} vs p {p}");
        }
    }

    #[test]
    fn context_mismatch_is_rejected() {
        let feats = toy_features(4, 3, 0);
        let p = random_params(1, 3, 1);
        let mut r = sample_rollout(&p, &feats, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        r.ranking.source_context = 99;
        assert!(matches!(step_terms(&p, &r, &feats), Err(Error::ContextMismatch(_))));
    }

    #[test]
    fn checkpoint_round_trip() {
        let p = random_params(3, 5, 21);
        let mut buf = Vec::new();
        p.save(&mut buf).unwrap();
        let back = PolicyParams::load(&buf[..]).unwrap();
        assert_eq!(back, p);
        let mut again = Vec::new();
        back.save(&mut again).unwrap();
        assert_eq!(again, buf);
    }

    fn feature_world() -> (EmbeddingTable, TopicMap) {
        let mut v = BTreeMap::new();
        v.insert(ItemId(0), vec![1.0, 0.0, 0.0]);
        v.insert(ItemId(1), vec![1.0, 0.0, 0.0]);
        v.insert(ItemId(2), vec![0.0, 1.0, 0.0]);
        v.insert(ItemId(3), vec![0.0, 0.0, 1.0]);
        let mut topics = TopicMap::default();
        topics.insert(ItemId(0), ["a".to_string()].into());
        topics.insert(ItemId(1), ["a".to_string()].into());
        topics.insert(ItemId(2), ["b".to_string()].into());
        (EmbeddingTable::new(3, v).unwrap(), topics)
    }

    #[test]
    fn featurize_examples() {
        let (emb, topics) = feature_world();
        let log = crate::data::InteractionLog {
            records: vec![crate::data::Interaction {
                user_id: UserId(1),
                item_id: ItemId(2),
                timestamp: 50,
                signal_kind: crate::data::SignalKind::WatchRatio,
                signal_value: 1.0,
            }],
        };
        let trend = TrendIndex::new(&log);
        let fb = FeatureBuilder::new(&emb, Some(&topics), Some(&trend), RetrievalConfig::default(), &FeatureConfig::default());
        let ctx = Context::new(
            1,
            UserId(0),
            vec![HistoryEntry {
                item: ItemId(0),
                signal: 1.0,
                timestamp: 100,
            }],
            vec![ItemId(1), ItemId(2), ItemId(3)],
            NeedKind::MaxInterest,
        )
        .unwrap();
        let f1 = fb.featurize(&ctx, ItemId(1), &ctx.need).unwrap();
        assert!((f1[0] - 1.0).abs() < 1e-12);
        // item 1 has no recent interactions, item 2 has one
        assert_eq!(f1[1], 0.0);
        assert_eq!(fb.featurize(&ctx, ItemId(2), &ctx.need).unwrap()[1], 1.0);
        // niche: item 1 shares topic a, item 2 is unseen topic b, item 3 has none
        assert_eq!(f1[2], 0.0);
        assert_eq!(fb.featurize(&ctx, ItemId(2), &ctx.need).unwrap()[2], 1.0);
        assert_eq!(fb.featurize(&ctx, ItemId(3), &ctx.need).unwrap()[2], 0.0);
        assert_eq!(f1.len(), fb.dim());
        assert_eq!(f1, fb.featurize(&ctx, ItemId(1), &ctx.need).unwrap());
        let all = fb.context_features(&ctx).unwrap();
        assert_eq!(all.row(0), &f1[..]);
        assert_eq!(&f1[fb.dim() - 4..], &[1.0, 0.0, 0.0, 0.0]);
        assert!(matches!(
            fb.featurize(&ctx, ItemId(0), &ctx.need),
            Err(Error::InvalidArgument(_))
        ));
    }

    fn all_permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for rest in all_permutations(n - 1) {
            for at in 0..=rest.len() {
                let mut p = rest.clone();
                p.insert(at, n - 1);
                out.push(p);
            }
        }
        out
    }

    #[test]
    fn permutation_probabilities_sum_to_one() {
        for k in 1..=5 {
            let feats = toy_features(k, 3, k as u64);
            let p = random_params(3, 3, 40 + k as u64);
            let mut marginal = 0.0;
            for s in 0..3 {
                let mut total = 0.0;
                for perm in all_permutations(k) {
                    let ranking = Ranking {
                        items: perm.iter().map(|&i| feats.candidates[i]).collect(),
                        source_context: feats.context_id,
                    };
                    let lp = ranking_logprobs(&p, s, &ranking, &feats).unwrap();
                    total += lp[1..].iter().sum::<f64>().exp();
                    marginal += lp.iter().sum::<f64>().exp();
                }
                assert!((total - 1.0).abs() < 1e-9);
            }
            assert!((marginal - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let feats = toy_features(5, 4, 30);
        let p = random_params(3, 4, 31);
        let r = sample_rollout(&p, &feats, &mut ChaCha8Rng::seed_from_u64(32)).unwrap();
        let terms = step_terms(&p, &r, &feats).unwrap();
        let flat = p.to_flat();
        let h = 1e-5;
        for i in 0..flat.len() {
            let mut f = flat.clone();
            f[i] += h;
            let mut plus = p.clone();
            plus.set_flat(&f).unwrap();
            f[i] -= 2.0 * h;
            let mut minus = p.clone();
            minus.set_flat(&f).unwrap();
            let tp = step_terms(&plus, &r, &feats).unwrap();
            let tm = step_terms(&minus, &r, &feats).unwrap();
            for t in 0..terms.logprobs.len() {
                let fd = (tp.logprobs[t] - tm.logprobs[t]) / (2.0 * h);
                let an = terms.grad_logprobs[t][i];
                assert!((fd - an).abs() <= 1e-4 * an.abs().max(1e-4), "logprob step {t} param {i}");
                let fd = (tp.entropies[t] - tm.entropies[t]) / (2.0 * h);
                let an = terms.grad_entropies[t][i];
                assert!((fd - an).abs() <= 1e-4 * an.abs().max(1e-4), "entropy step {t} param {i}");
            }
        }
    }
}
