//! Rankings over closed candidate sets, the swap operator, NDCG and the
//! evaluation metrics reported per context.
//!
//! Ranks are 1-based in every public function.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::needs::NeedKind;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ItemId(pub u32);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct UserId(pub u32);

impl fmt::Display for ItemId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Display for UserId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HistoryEntry {
    pub item: ItemId,
    pub signal: f64,
    pub timestamp: i64,
}

/// One ranking instance: who the user is, what they did, which items are on
/// the table and which need the ranking should serve.
#[derive(Clone, Debug)]
pub struct Context {
    pub id: u64,
    pub user_id: UserId,
    /// Ascending by timestamp.
    pub history: Vec<HistoryEntry>,
    pub candidates: Vec<ItemId>,
    pub need: NeedKind,
    pub metadata: BTreeMap<String, String>,
}

impl Context {
    pub fn new(
        id: u64,
        user_id: UserId,
        mut history: Vec<HistoryEntry>,
        candidates: Vec<ItemId>,
        need: NeedKind,
    ) -> Result<Self> {
        let distinct: BTreeSet<_> = candidates.iter().collect();
        if distinct.len() != candidates.len() {
            return Err(Error::InvalidArgument(format!(
                "context {id}: duplicate candidates"
            )));
        }
        if history.iter().any(|h| distinct.contains(&h.item)) {
            return Err(Error::InvalidArgument(format!(
                "context {id}: candidate also present in history"
            )));
        }
        history.sort_by_key(|h| h.timestamp);
        Ok(Self {
            id,
            user_id,
            history,
            candidates,
            need,
            metadata: BTreeMap::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn position(&self, item: ItemId) -> Option<usize> {
        self.candidates.iter().position(|&c| c == item)
    }
}

/// Need-specific gain for every candidate of one context.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RelevanceTable {
    gains: BTreeMap<ItemId, f64>,
}

impl RelevanceTable {
    pub fn new(gains: BTreeMap<ItemId, f64>) -> Result<Self> {
        for (&item, &g) in &gains {
            if !g.is_finite() {
                return Err(Error::NonFinite("relevance gain"));
            }
            if g < 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "negative gain {g} for item {item}"
                )));
            }
        }
        Ok(Self { gains })
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (ItemId, f64)>) -> Result<Self> {
        Self::new(pairs.into_iter().collect())
    }

    pub fn gain(&self, item: ItemId) -> Result<f64> {
        self.gains.get(&item).copied().ok_or(Error::MissingGain(item.0))
    }

    pub fn gains_for(&self, items: &[ItemId]) -> Result<Vec<f64>> {
        items.iter().map(|&i| self.gain(i)).collect()
    }

    pub fn covers(&self, ctx: &Context) -> bool {
        ctx.candidates.iter().all(|c| self.gains.contains_key(c))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ItemId, f64)> + '_ {
        self.gains.iter().map(|(&k, &v)| (k, v))
    }

    pub fn len(&self) -> usize {
        self.gains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gains.is_empty()
    }
}

/// An ordered list of distinct candidates of one context.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Ranking {
    pub items: Vec<ItemId>,
    pub source_context: u64,
}

impl Ranking {
    pub fn new(items: Vec<ItemId>, source_context: u64) -> Result<Self> {
        let distinct: BTreeSet<_> = items.iter().collect();
        if distinct.len() != items.len() {
            return Err(Error::InvalidArgument("ranking repeats an item".into()));
        }
        Ok(Self {
            items,
            source_context,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Complete means a permutation of every candidate of `ctx`.
    pub fn is_complete_for(&self, ctx: &Context) -> bool {
        self.items.len() == ctx.candidates.len()
            && self.items.iter().all(|i| ctx.candidates.contains(i))
    }

    pub fn ensure_complete_for(&self, ctx: &Context) -> Result<()> {
        if self.source_context != ctx.id {
            return Err(Error::ContextMismatch(ctx.id.to_string()));
        }
        if !self.is_complete_for(ctx) {
            return Err(Error::IncompleteRanking {
                len: self.items.len(),
                expected: ctx.candidates.len(),
            });
        }
        Ok(())
    }
}

fn check_swap(len: usize, k: usize, j: usize) -> Result<()> {
    for index in [k, j] {
        if index == 0 || index > len {
            return Err(Error::RankOutOfRange { index, len });
        }
    }
    if k >= j {
        return Err(Error::SwapOrder { k, j });
    }
    Ok(())
}

/// Exchanges the items at ranks `k < j`.
pub fn swap(y: &Ranking, k: usize, j: usize) -> Result<Ranking> {
    check_swap(y.len(), k, j)?;
    let mut items = y.items.clone();
    items.swap(k - 1, j - 1);
    Ok(Ranking {
        items,
        source_context: y.source_context,
    })
}

/// How a relevance gain enters DCG.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GainKind {
    /// `g / log2(k + 1)`
    #[default]
    Linear,
    /// `(2^g - 1) / log2(k + 1)`
    Exponential,
}

impl GainKind {
    #[inline]
    pub fn apply(self, g: f64) -> f64 {
        match self {
            GainKind::Linear => g,
            GainKind::Exponential => g.exp2() - 1.0,
        }
    }
}

/// Positional discount `1 / log2(rank + 1)` for a 1-based rank.
#[inline]
pub fn discount(rank: usize) -> f64 {
    1.0 / ((rank + 1) as f64).log2()
}

pub fn dcg(gains_by_rank: &[f64], cutoff: usize, kind: GainKind) -> f64 {
    gains_by_rank
        .iter()
        .take(cutoff)
        .enumerate()
        .map(|(idx, &g)| kind.apply(g) * discount(idx + 1))
        .sum()
}

pub fn ideal_dcg(gains: &[f64], cutoff: usize, kind: GainKind) -> f64 {
    let mut sorted = gains.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    dcg(&sorted, cutoff, kind)
}

/// NDCG@cutoff over a vector of gains listed in rank order. Cutoffs beyond
/// the list length are clamped; an all-zero list scores 1.
pub fn ndcg_of_gains(gains_by_rank: &[f64], cutoff: usize, kind: GainKind) -> f64 {
    let idcg = ideal_dcg(gains_by_rank, cutoff, kind);
    if idcg <= 0.0 {
        return 1.0;
    }
    dcg(gains_by_rank, cutoff, kind) / idcg
}

pub fn ndcg(y: &Ranking, rel: &RelevanceTable, cutoff: usize, kind: GainKind) -> Result<f64> {
    if y.is_empty() {
        return Err(Error::EmptyRanking);
    }
    if cutoff == 0 {
        return Err(Error::InvalidArgument("cutoff must be at least 1".into()));
    }
    let gains = rel.gains_for(&y.items)?;
    Ok(ndcg_of_gains(&gains, cutoff, kind))
}

/// The listwise objective: linear-gain NDCG@cutoff.
pub fn sequence_reward(y: &Ranking, rel: &RelevanceTable, cutoff: usize) -> Result<f64> {
    ndcg(y, rel, cutoff, GainKind::Linear)
}

/// Which items count as relevant for the binary metrics.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum RelevanceThreshold {
    /// Gain strictly above the median gain of the context's candidates.
    #[default]
    AboveMedian,
    /// Gain strictly above a fixed value.
    Above(f64),
}

impl RelevanceThreshold {
    pub fn resolve(self, gains: &[f64]) -> f64 {
        match self {
            RelevanceThreshold::Above(t) => t,
            RelevanceThreshold::AboveMedian => median(gains),
        }
    }
}

fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Per-context evaluation row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub context_id: u64,
    pub ndcg5: f64,
    pub ndcg10: f64,
    pub ndcg30: f64,
    pub recall5: f64,
    pub mrr5: f64,
    pub precision5: f64,
    pub n_invalid_items: usize,
}

impl MetricReport {
    pub const CSV_HEADER: [&'static str; 8] = [
        "context_id",
        "ndcg5",
        "ndcg10",
        "ndcg30",
        "recall5",
        "mrr5",
        "precision5",
        "n_invalid_items",
    ];

    pub fn write_csv<W: std::io::Write>(reports: &[MetricReport], out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
        w.write_record(Self::CSV_HEADER)?;
        for r in reports {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MetricOptions {
    pub threshold: RelevanceThreshold,
    pub gain_kind: GainKind,
}

impl Default for MetricOptions {
    fn default() -> Self {
        Self {
            threshold: RelevanceThreshold::AboveMedian,
            gain_kind: GainKind::Linear,
        }
    }
}

pub fn metrics(y: &Ranking, rel: &RelevanceTable) -> Result<MetricReport> {
    metrics_with(y, rel, MetricOptions::default(), 0)
}

/// NDCG@{5,10,30}, Recall@5, MRR@5 and Precision@5 for a complete ranking.
///
/// Recall is 0 when no candidate passes the relevance threshold.
pub fn metrics_with(
    y: &Ranking,
    rel: &RelevanceTable,
    opts: MetricOptions,
    n_invalid_items: usize,
) -> Result<MetricReport> {
    const TOP: usize = 5;
    if y.len() < TOP {
        return Err(Error::TooFewCandidates {
            needed: TOP,
            got: y.len(),
        });
    }
    let gains = rel.gains_for(&y.items)?;
    let threshold = opts.threshold.resolve(&gains);
    let relevant: Vec<bool> = gains.iter().map(|&g| g > threshold).collect();
    let total_relevant = relevant.iter().filter(|&&r| r).count();
    let hits = relevant[..TOP].iter().filter(|&&r| r).count();
    let mrr5 = relevant[..TOP]
        .iter()
        .position(|&r| r)
        .map_or(0.0, |p| 1.0 / (p + 1) as f64);
    let recall5 = if total_relevant == 0 {
        0.0
    } else {
        hits as f64 / total_relevant as f64
    };
    Ok(MetricReport {
        context_id: y.source_context,
        ndcg5: ndcg_of_gains(&gains, 5, opts.gain_kind),
        ndcg10: ndcg_of_gains(&gains, 10, opts.gain_kind),
        ndcg30: ndcg_of_gains(&gains, 30, opts.gain_kind),
        recall5,
        mrr5,
        precision5: hits as f64 / TOP as f64,
        n_invalid_items,
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PaddedRanking {
    pub ranking: Ranking,
    /// Entries dropped because they were not candidates or were repeats.
    pub n_invalid: usize,
}

/// Completes an externally produced list: invalid and repeated entries are
/// dropped, then the missing candidates are appended in uniformly shuffled
/// order.
pub fn pad_invalid<R: Rng + ?Sized>(partial: &[ItemId], ctx: &Context, rng: &mut R) -> PaddedRanking {
    let candidate_set: HashMap<ItemId, ()> = ctx.candidates.iter().map(|&c| (c, ())).collect();
    let mut seen = BTreeSet::new();
    let mut items = Vec::with_capacity(ctx.candidates.len());
    let mut n_invalid = 0;
    for &item in partial {
        if candidate_set.contains_key(&item) && seen.insert(item) {
            items.push(item);
        } else {
            n_invalid += 1;
        }
    }
    let mut rest: Vec<ItemId> = ctx
        .candidates
        .iter()
        .copied()
        .filter(|c| !seen.contains(c))
        .collect();
    rest.shuffle(rng);
    items.extend(rest);
    PaddedRanking {
        ranking: Ranking {
            items,
            source_context: ctx.id,
        },
        n_invalid,
    }
}
