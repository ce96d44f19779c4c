//! A small recommendation world with known ground truth.
//!
//! Users and items live on the unit sphere. True engagement is
//! `1 + tanh(scale * u.i)`, a watch-ratio-like value in (0, 2). Observed
//! signals add Gaussian noise whose standard deviation grows linearly with a
//! per-item volatility feature, so the noise is heteroscedastic by
//! construction and predictable from the item embedding.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{dot, EmbeddingTable, Interaction, InteractionLog, SignalKind, TopicMap};
use crate::error::{Error, Result};
use crate::ranking::{ItemId, UserId};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub latent_dim: usize,
    pub noise_base: f64,
    pub noise_hetero: f64,
    /// Fraction of (user, item) pairs observed.
    pub sparsity: f64,
    pub seed: u64,
    /// Multiplies `u.i` inside the squash.
    pub affinity_scale: f64,
    /// Spread of user tastes around a shared population direction; larger
    /// means more personal.
    pub taste_spread: f64,
    /// Standard deviation of the noise added to exported embeddings.
    pub embedding_noise: f64,
    pub n_topics: usize,
    pub time_span_seconds: i64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_users: 5000,
            n_items: 200,
            latent_dim: 8,
            noise_base: 0.1,
            noise_hetero: 0.6,
            sparsity: 0.1,
            seed: 0,
            affinity_scale: 2.0,
            taste_spread: 1.0,
            embedding_noise: 0.05,
            n_topics: 8,
            time_span_seconds: 14 * 86_400,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("synthetic config: {m}")));
        if self.n_users == 0 || self.n_items == 0 || self.latent_dim == 0 {
            return bad("n_users, n_items and latent_dim must be positive");
        }
        if !(self.sparsity > 0.0 && self.sparsity <= 1.0) {
            return bad("sparsity must be in (0, 1]");
        }
        if self.noise_base < 0.0 || self.noise_hetero < 0.0 || self.embedding_noise < 0.0 || self.taste_spread < 0.0 {
            return bad("noise and spread parameters must be nonnegative");
        }
        if self.n_topics == 0 || self.time_span_seconds <= 0 {
            return bad("n_topics and time_span_seconds must be positive");
        }
        Ok(())
    }
}

/// The generating model, kept for oracle evaluation.
#[derive(Clone, Debug)]
pub struct GroundTruth {
    pub user_latents: Vec<Vec<f64>>,
    pub item_latents: Vec<Vec<f64>>,
    /// Unit direction whose projection sets each item's volatility.
    pub volatility_axis: Vec<f64>,
    pub affinity_scale: f64,
    pub noise_base: f64,
    pub noise_hetero: f64,
}

impl GroundTruth {
    pub fn mean_engagement(&self, user: UserId, item: ItemId) -> f64 {
        let u = &self.user_latents[user.0 as usize];
        let i = &self.item_latents[item.0 as usize];
        1.0 + (self.affinity_scale * dot(u, i)).tanh()
    }

    /// Volatility in [0, 1].
    pub fn volatility(&self, item: ItemId) -> f64 {
        0.5 * (1.0 + dot(&self.item_latents[item.0 as usize], &self.volatility_axis))
    }

    pub fn noise_std(&self, item: ItemId) -> f64 {
        self.noise_base + self.noise_hetero * self.volatility(item)
    }

    /// Unclamped noisy draw around the true engagement.
    pub fn sample_raw<R: Rng + ?Sized>(&self, user: UserId, item: ItemId, rng: &mut R) -> f64 {
        let z: f64 = StandardNormal.sample(rng);
        self.mean_engagement(user, item) + self.noise_std(item) * z
    }

    /// Observed signal: the noisy draw clamped at zero.
    pub fn sample_signal<R: Rng + ?Sized>(&self, user: UserId, item: ItemId, rng: &mut R) -> f64 {
        self.sample_raw(user, item, rng).max(0.0)
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub log: InteractionLog,
    pub embeddings: EmbeddingTable,
    pub topics: TopicMap,
    pub truth: GroundTruth,
}

fn unit_gaussian<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = dot(&v, &v).sqrt();
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn normalize(v: Vec<f64>) -> Vec<f64> {
    let n = dot(&v, &v).sqrt();
    v.into_iter().map(|x| x / n).collect()
}

pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<SyntheticData> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = cfg.latent_dim;
    let population = unit_gaussian(d, &mut rng);
    let volatility_axis = unit_gaussian(d, &mut rng);
    let topic_centers: Vec<Vec<f64>> = (0..cfg.n_topics).map(|_| unit_gaussian(d, &mut rng)).collect();

    let scale = cfg.taste_spread / (d as f64).sqrt();
    let user_latents: Vec<Vec<f64>> = (0..cfg.n_users)
        .map(|_| {
            let v: Vec<f64> = population
                .iter()
                .map(|&p| p + scale * Distribution::<f64>::sample(&StandardNormal, &mut rng))
                .collect();
            normalize(v)
        })
        .collect();
    let item_latents: Vec<Vec<f64>> = (0..cfg.n_items).map(|_| unit_gaussian(d, &mut rng)).collect();

    let truth = GroundTruth {
        user_latents,
        item_latents,
        volatility_axis,
        affinity_scale: cfg.affinity_scale,
        noise_base: cfg.noise_base,
        noise_hetero: cfg.noise_hetero,
    };

    let noise_scale = cfg.embedding_noise / (d as f64).sqrt();
    let mut vectors = BTreeMap::new();
    let mut topics = TopicMap::default();
    for (idx, latent) in truth.item_latents.iter().enumerate() {
        let noisy: Vec<f64> = latent
            .iter()
            .map(|&x| x + noise_scale * Distribution::<f64>::sample(&StandardNormal, &mut rng))
            .collect();
        vectors.insert(ItemId(idx as u32), noisy);
        let best = topic_centers
            .iter()
            .enumerate()
            .max_by(|a, b| dot(latent, a.1).total_cmp(&dot(latent, b.1)))
            .map(|(t, _)| t)
            .unwrap_or(0);
        topics.insert(ItemId(idx as u32), BTreeSet::from([format!("topic{best}")]));
    }
    let embeddings = EmbeddingTable::new(d, vectors)?;

    let mut records = Vec::new();
    for u in 0..cfg.n_users {
        let user = UserId(u as u32);
        let mut mine = Vec::new();
        for i in 0..cfg.n_items {
            if cfg.sparsity >= 1.0 || rng.random::<f64>() < cfg.sparsity {
                let item = ItemId(i as u32);
                let signal = truth.sample_signal(user, item, &mut rng);
                let timestamp = rng.random_range(0..cfg.time_span_seconds);
                mine.push(Interaction {
                    user_id: user,
                    item_id: item,
                    timestamp,
                    signal_kind: SignalKind::WatchRatio,
                    signal_value: signal,
                });
            }
        }
        mine.sort_by_key(|r| (r.timestamp, r.item_id));
        records.extend(mine);
    }

    Ok(SyntheticData {
        log: InteractionLog { records },
        embeddings,
        topics,
        truth,
    })
}
