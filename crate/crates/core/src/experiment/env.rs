//! Turns a data source into ranking contexts with features and relevance.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::config::{DataSource, ExperimentConfig};
use crate::data::{generate_synthetic, retrieve_candidates, split_users, EmbeddingTable, GroundTruth, InteractionLog, SignalKind, TopicMap, UserSplit};
use crate::error::{Error, Result};
use crate::needs::{build_relevance, NeedInputs, NeedKind, TrendIndex};
use crate::policy::{ContextFeatures, FeatureBuilder};
use crate::ranking::{Context, HistoryEntry, ItemId, RelevanceTable, UserId};

/// Seed stream for the user split, independent of the data seed.
const SPLIT_STREAM: u64 = 0x5b11_7000;

/// One ranking instance with everything the trainer and evaluator need.
#[derive(Clone, Debug)]
pub struct EnvContext {
    pub ctx: Context,
    pub features: ContextFeatures,
    /// Retrieval cosine per candidate.
    pub similarities: BTreeMap<ItemId, f64>,
    /// Logged signal for candidates the user interacted with outside the
    /// history window.
    pub observed: BTreeMap<ItemId, f64>,
    /// Relevance used for evaluation: the generating model's engagement when
    /// available, otherwise logged signals with 0 for unlogged candidates.
    pub eval_relevance: RelevanceTable,
}

#[derive(Clone, Debug)]
pub struct Environment {
    pub log: InteractionLog,
    pub embeddings: EmbeddingTable,
    pub topics: TopicMap,
    pub trend: TrendIndex,
    pub truth: Option<GroundTruth>,
    pub split: UserSplit,
    pub train: Vec<EnvContext>,
    pub val: Vec<EnvContext>,
    pub test: Vec<EnvContext>,
}

/// Raw inputs before contexts are built.
pub struct WorldData {
    pub log: InteractionLog,
    pub embeddings: EmbeddingTable,
    pub topics: TopicMap,
    pub truth: Option<GroundTruth>,
}

pub fn load_world(source: &DataSource) -> Result<WorldData> {
    match source {
        DataSource::Synthetic(cfg) => {
            let d = generate_synthetic(cfg)?;
            Ok(WorldData {
                log: d.log,
                embeddings: d.embeddings,
                topics: d.topics,
                truth: Some(d.truth),
            })
        }
        DataSource::Files {
            interactions,
            embeddings,
            topics,
        } => Ok(WorldData {
            log: InteractionLog::load(interactions)?,
            embeddings: EmbeddingTable::load(embeddings)?,
            topics: match topics {
                Some(p) => TopicMap::load(p)?,
                None => TopicMap::default(),
            },
            truth: None,
        }),
    }
}

/// Relevance of a context's candidates under `need`, given per-item signals.
pub fn relevance_for(
    ctx: &Context,
    need: &NeedKind,
    signals: &BTreeMap<ItemId, f64>,
    signal_kind: SignalKind,
    similarities: &BTreeMap<ItemId, f64>,
    topics: &TopicMap,
    trend: &TrendIndex,
) -> Result<RelevanceTable> {
    let inputs = NeedInputs {
        signals: Some(signals),
        signal_kind,
        similarities: Some(similarities),
        topics: Some(topics),
        trend: Some(trend),
        query_time: None,
        esci: None,
    };
    build_relevance(ctx, need, &inputs)
}

fn cap<T>(mut v: Vec<T>, max: usize) -> Vec<T> {
    if max > 0 {
        v.truncate(max);
    }
    v
}

impl Environment {
    pub fn build(cfg: &ExperimentConfig) -> Result<Self> {
        Self::from_world(load_world(&cfg.data)?, cfg)
    }

    pub fn from_world(world: WorldData, cfg: &ExperimentConfig) -> Result<Self> {
        let WorldData {
            log,
            embeddings,
            topics,
            truth,
        } = world;
        let trend = TrendIndex::new(&log);
        let users = log.users();
        let split = split_users(&users, cfg.env.split, &mut ChaCha8Rng::seed_from_u64(cfg.seed ^ SPLIT_STREAM))?;
        let by_user = log.by_user();
        let retrieval = cfg.env.retrieval;
        let features = FeatureBuilder::new(&embeddings, Some(&topics), Some(&trend), retrieval, &cfg.policy.features);
        let signal_kind = if log.is_empty() { SignalKind::WatchRatio } else { log.signal_kind() };

        let build_one = |user: UserId| -> Result<Option<EnvContext>> {
            let Some(idxs) = by_user.get(&user) else {
                return Ok(None);
            };
            let mut recs: Vec<_> = idxs.iter().map(|&i| &log.records[i]).collect();
            recs.sort_by_key(|r| (r.timestamp, r.item_id));
            let start = recs.len().saturating_sub(retrieval.history_len);
            let history: Vec<HistoryEntry> = recs[start..]
                .iter()
                .map(|r| HistoryEntry {
                    item: r.item_id,
                    signal: r.signal_value,
                    timestamp: r.timestamp,
                })
                .collect();
            if history.is_empty() {
                return Ok(None);
            }
            let scored = retrieve_candidates(&history, &embeddings, &retrieval)?;
            let candidates: Vec<ItemId> = scored.iter().map(|s| s.item).collect();
            let similarities: BTreeMap<ItemId, f64> = scored.iter().map(|s| (s.item, s.cosine)).collect();
            let candidate_set: BTreeSet<ItemId> = candidates.iter().copied().collect();
            let observed: BTreeMap<ItemId, f64> = recs[..start]
                .iter()
                .filter(|r| candidate_set.contains(&r.item_id))
                .map(|r| (r.item_id, r.signal_value))
                .collect();
            let mut ctx = Context::new(user.0 as u64, user, history, candidates, cfg.need)?;
            ctx.metadata.insert("need".into(), cfg.need.name().into());
            ctx.metadata.insert("instruction".into(), cfg.need.instruction().into());
            let signals: BTreeMap<ItemId, f64> = match &truth {
                Some(t) => ctx.candidates.iter().map(|&c| (c, t.mean_engagement(user, c))).collect(),
                None => ctx.candidates.iter().map(|&c| (c, observed.get(&c).copied().unwrap_or(0.0))).collect(),
            };
            // generated engagement is continuous even when the log holds ratings
            let kind = if truth.is_some() { SignalKind::WatchRatio } else { signal_kind };
            let eval_relevance = relevance_for(&ctx, &cfg.need, &signals, kind, &similarities, &topics, &trend)?;
            let features = features.context_features(&ctx)?;
            Ok(Some(EnvContext {
                ctx,
                features,
                similarities,
                observed,
                eval_relevance,
            }))
        };
        let build_split = |set: &BTreeSet<UserId>| -> Result<Vec<EnvContext>> {
            let users: Vec<UserId> = set.iter().copied().collect();
            let built: Vec<Option<EnvContext>> = users.par_iter().map(|&u| build_one(u)).collect::<Result<_>>()?;
            Ok(built.into_iter().flatten().collect())
        };
        let train = build_split(&split.train)?;
        let val = cap(build_split(&split.val)?, cfg.env.max_val_contexts);
        let test = cap(build_split(&split.test)?, cfg.env.max_test_contexts);
        if train.is_empty() || val.is_empty() {
            return Err(Error::Empty("train or validation contexts"));
        }
        Ok(Self {
            log,
            embeddings,
            topics,
            trend,
            truth,
            split,
            train,
            val,
            test,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.train[0].features.dim
    }

    pub fn signal_kind(&self) -> SignalKind {
        if self.log.is_empty() { SignalKind::WatchRatio } else { self.log.signal_kind() }
    }
}
