//! Need-specific relevance: interest, niche discovery, trend promotion and
//! graded product-search labels.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{InteractionLog, SignalKind, TopicMap};
use crate::error::{Error, Result};
use crate::ranking::{Context, ItemId, RelevanceTable};

pub const DEFAULT_NICHE_BONUS: f64 = 0.5;
pub const DEFAULT_TREND_BLEND: f64 = 0.7;
pub const ONE_DAY_SECONDS: i64 = 86_400;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NeedKind {
    MaxInterest,
    NicheDiscovery {
        alpha_bonus: f64,
    },
    TrendPromotion {
        alpha_blend: f64,
        window_seconds: i64,
    },
    ProductSearch,
}

impl Default for NeedKind {
    fn default() -> Self {
        NeedKind::MaxInterest
    }
}

impl NeedKind {
    pub const COUNT: usize = 4;

    pub fn niche() -> Self {
        NeedKind::NicheDiscovery {
            alpha_bonus: DEFAULT_NICHE_BONUS,
        }
    }

    pub fn trend() -> Self {
        NeedKind::TrendPromotion {
            alpha_blend: DEFAULT_TREND_BLEND,
            window_seconds: ONE_DAY_SECONDS,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            NeedKind::MaxInterest => "max_interest",
            NeedKind::NicheDiscovery { .. } => "niche_discovery",
            NeedKind::TrendPromotion { .. } => "trend_promotion",
            NeedKind::ProductSearch => "product_search",
        }
    }

    pub fn index(&self) -> usize {
        match self {
            NeedKind::MaxInterest => 0,
            NeedKind::NicheDiscovery { .. } => 1,
            NeedKind::TrendPromotion { .. } => 2,
            NeedKind::ProductSearch => 3,
        }
    }

    /// Instruction text attached to contexts as metadata.
    pub fn instruction(&self) -> &'static str {
        match self {
            NeedKind::MaxInterest => {
                "Order the candidates so the items this user is most likely to engage with come first."
            }
            NeedKind::NicheDiscovery { .. } => {
                "Favor relevant candidates from topics absent from the user's history."
            }
            NeedKind::TrendPromotion { .. } => {
                "Favor relevant candidates that were popular during the last day."
            }
            NeedKind::ProductSearch => "Order the products by how well they match the query.",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            NeedKind::NicheDiscovery { alpha_bonus } if !(alpha_bonus > 0.0) => Err(
                Error::InvalidArgument(format!("alpha_bonus must be > 0, got {alpha_bonus}")),
            ),
            NeedKind::TrendPromotion {
                alpha_blend,
                window_seconds,
            } => {
                if !(alpha_blend > 0.0 && alpha_blend < 1.0) {
                    return Err(Error::InvalidArgument(format!(
                        "alpha_blend must be in (0, 1), got {alpha_blend}"
                    )));
                }
                if window_seconds <= 0 {
                    return Err(Error::InvalidArgument("window_seconds must be > 0".into()));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

pub fn interest_gain(kind: SignalKind, value: f64) -> Result<f64> {
    match kind {
        SignalKind::WatchRatio => {
            if !value.is_finite() || value < 0.0 {
                return Err(Error::InvalidArgument(format!("watch ratio {value}")));
            }
            Ok(value)
        }
        SignalKind::Rating => {
            if value.fract() != 0.0 || !(1.0..=5.0).contains(&value) {
                return Err(Error::InvalidArgument(format!(
                    "rating must be an integer in 1..=5, got {value}"
                )));
            }
            Ok(value.exp2() - 1.0)
        }
    }
}

/// Items without topics are never niche.
pub fn niche_label(item_topics: &BTreeSet<String>, history_topics: &BTreeSet<String>) -> bool {
    !item_topics.is_empty() && item_topics.is_disjoint(history_topics)
}

pub fn niche_gain(base_score: f64, is_niche: bool, alpha_bonus: f64) -> f64 {
    if is_niche {
        base_score * (1.0 + alpha_bonus)
    } else {
        base_score
    }
}

pub fn trend_gain(sim_norm: f64, trend_norm: f64, alpha_blend: f64) -> f64 {
    alpha_blend * sim_norm + (1.0 - alpha_blend) * trend_norm
}

/// Min-max scaling into [0, 1]. A constant list maps to zeros.
pub fn minmax_normalize(values: &[f64]) -> Vec<f64> {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = hi - lo;
    if !(span > 0.0) {
        return vec![0.0; values.len()];
    }
    values.iter().map(|&v| (v - lo) / span).collect()
}

/// Interactions with `item` in the half-open window `(query_time - window, query_time]`.
pub fn trend_count(log: &InteractionLog, item: ItemId, query_time: i64, window_seconds: i64) -> usize {
    let start = query_time - window_seconds;
    log.records
        .iter()
        .filter(|r| r.item_id == item && r.timestamp > start && r.timestamp <= query_time)
        .count()
}

/// Per-item sorted timestamps for repeated window counts.
#[derive(Clone, Debug, Default)]
pub struct TrendIndex {
    stamps: BTreeMap<ItemId, Vec<i64>>,
}

impl TrendIndex {
    pub fn new(log: &InteractionLog) -> Self {
        let mut stamps: BTreeMap<ItemId, Vec<i64>> = BTreeMap::new();
        for r in &log.records {
            stamps.entry(r.item_id).or_default().push(r.timestamp);
        }
        for v in stamps.values_mut() {
            v.sort_unstable();
        }
        Self { stamps }
    }

    pub fn count(&self, item: ItemId, query_time: i64, window_seconds: i64) -> usize {
        let Some(ts) = self.stamps.get(&item) else {
            return 0;
        };
        let start = query_time - window_seconds;
        let lo = ts.partition_point(|&t| t <= start);
        let hi = ts.partition_point(|&t| t <= query_time);
        hi.saturating_sub(lo)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EsciLabel {
    E,
    S,
    C,
    I,
}

impl FromStr for EsciLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "E" | "exact" => Ok(EsciLabel::E),
            "S" | "substitute" => Ok(EsciLabel::S),
            "C" | "complement" => Ok(EsciLabel::C),
            "I" | "irrelevant" => Ok(EsciLabel::I),
            other => Err(Error::InvalidArgument(format!("unknown ESCI label {other:?}"))),
        }
    }
}

pub fn esci_gain(label: EsciLabel) -> f64 {
    match label {
        EsciLabel::E => 1.0,
        EsciLabel::S => 0.1,
        EsciLabel::C => 0.01,
        EsciLabel::I => 0.0,
    }
}

/// Everything a need might draw on. Only the fields the need uses must be set.
#[derive(Clone, Copy, Debug, Default)]
pub struct NeedInputs<'a> {
    /// Raw interaction signal per candidate.
    pub signals: Option<&'a BTreeMap<ItemId, f64>>,
    pub signal_kind: SignalKind,
    /// Retrieval cosine similarity per candidate.
    pub similarities: Option<&'a BTreeMap<ItemId, f64>>,
    pub topics: Option<&'a TopicMap>,
    pub trend: Option<&'a TrendIndex>,
    /// Defaults to the timestamp of the latest history entry.
    pub query_time: Option<i64>,
    pub esci: Option<&'a BTreeMap<ItemId, EsciLabel>>,
}

fn lookup<T: Copy>(map: &BTreeMap<ItemId, T>, item: ItemId, need: &'static str, what: &'static str) -> Result<T> {
    map.get(&item)
        .copied()
        .ok_or(Error::MissingNeedInput { need, what })
}

pub fn history_topics(ctx: &Context, topics: &TopicMap) -> BTreeSet<String> {
    ctx.history
        .iter()
        .flat_map(|h| topics.topics_of(h.item).iter().cloned())
        .collect()
}

pub fn build_relevance(ctx: &Context, need: &NeedKind, inputs: &NeedInputs<'_>) -> Result<RelevanceTable> {
    need.validate()?;
    let name = need.name();
    let gains: Vec<f64> = match *need {
        NeedKind::MaxInterest => {
            let signals = inputs.signals.ok_or(Error::MissingNeedInput { need: name, what: "signals" })?;
            ctx.candidates
                .iter()
                .map(|&c| interest_gain(inputs.signal_kind, lookup(signals, c, name, "signal")?))
                .collect::<Result<_>>()?
        }
        NeedKind::NicheDiscovery { alpha_bonus } => {
            let sims = inputs
                .similarities
                .ok_or(Error::MissingNeedInput { need: name, what: "similarities" })?;
            let topics = inputs.topics.ok_or(Error::MissingNeedInput { need: name, what: "topics" })?;
            let seen = history_topics(ctx, topics);
            ctx.candidates
                .iter()
                .map(|&c| {
                    let base = lookup(sims, c, name, "similarity")?.max(0.0);
                    Ok(niche_gain(base, niche_label(topics.topics_of(c), &seen), alpha_bonus))
                })
                .collect::<Result<_>>()?
        }
        NeedKind::TrendPromotion {
            alpha_blend,
            window_seconds,
        } => {
            let sims = inputs
                .similarities
                .ok_or(Error::MissingNeedInput { need: name, what: "similarities" })?;
            let trend = inputs.trend.ok_or(Error::MissingNeedInput { need: name, what: "interactions" })?;
            let query_time = inputs
                .query_time
                .or_else(|| ctx.history.last().map(|h| h.timestamp))
                .ok_or(Error::MissingNeedInput { need: name, what: "query time" })?;
            let raw_sims: Vec<f64> = ctx
                .candidates
                .iter()
                .map(|&c| lookup(sims, c, name, "similarity"))
                .collect::<Result<_>>()?;
            let counts: Vec<f64> = ctx
                .candidates
                .iter()
                .map(|&c| trend.count(c, query_time, window_seconds) as f64)
                .collect();
            let s = minmax_normalize(&raw_sims);
            let t = minmax_normalize(&counts);
            s.iter().zip(&t).map(|(&s, &t)| trend_gain(s, t, alpha_blend)).collect()
        }
        NeedKind::ProductSearch => {
            let labels = inputs.esci.ok_or(Error::MissingNeedInput { need: name, what: "esci labels" })?;
            ctx.candidates
                .iter()
                .map(|&c| Ok(esci_gain(lookup(labels, c, name, "esci label")?)))
                .collect::<Result<_>>()?
        }
    };
    RelevanceTable::from_pairs(ctx.candidates.iter().copied().zip(gains))
}

/// 17 significant digits in scientific notation; round-trips any f64.
pub fn format_f64_17(v: f64) -> String {
    format!("{v:.16e}")
}

/// `item_id<TAB>gain` lines sorted by item id.
pub fn relevance_to_tsv(rel: &RelevanceTable) -> String {
    let mut out = String::new();
    for (item, g) in rel.iter() {
        let _ = writeln!(out, "{item}\t{}", format_f64_17(g));
    }
    out
}

pub fn relevance_from_tsv(text: &str) -> Result<RelevanceTable> {
    let mut pairs = BTreeMap::new();
    for (idx, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let bad = |message: String| Error::Parse {
            path: "<relevance>".into(),
            line: idx as u64 + 1,
            message,
        };
        let (item, gain) = line.split_once('\t').ok_or_else(|| bad("expected item<TAB>gain".into()))?;
        let item: u32 = item.parse().map_err(|e| bad(format!("item id: {e}")))?;
        let gain: f64 = gain.parse().map_err(|e| bad(format!("gain: {e}")))?;
        pairs.insert(ItemId(item), gain);
    }
    RelevanceTable::new(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Interaction;
    use crate::ranking::{HistoryEntry, UserId};
    use proptest::prelude::*;

    fn set(v: &[&str]) -> BTreeSet<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn interest_mapping() {
        assert_eq!(interest_gain(SignalKind::Rating, 5.0).unwrap(), 31.0);
        assert_eq!(interest_gain(SignalKind::Rating, 1.0).unwrap(), 1.0);
        assert_eq!(interest_gain(SignalKind::WatchRatio, 0.0).unwrap(), 0.0);
        assert_eq!(interest_gain(SignalKind::WatchRatio, 1.7).unwrap(), 1.7);
        assert!(interest_gain(SignalKind::Rating, 0.0).is_err());
        assert!(interest_gain(SignalKind::Rating, 6.0).is_err());
        assert!(interest_gain(SignalKind::Rating, 2.5).is_err());
        let g: Vec<f64> = (1..=5).map(|r| interest_gain(SignalKind::Rating, r as f64).unwrap()).collect();
        assert!(g.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn niche_labels() {
        assert!(!niche_label(&set(&[]), &set(&["a"])));
        assert!(niche_label(&set(&["b", "c"]), &set(&["a"])));
        assert!(!niche_label(&set(&["a", "c"]), &set(&["a"])));
    }

    #[test]
    fn niche_gain_cases() {
        assert_eq!(niche_gain(0.0, true, 0.5), 0.0);
        assert_eq!(niche_gain(0.0, false, 0.5), 0.0);
        assert_eq!(niche_gain(1.0, true, 0.5), 1.5);
        assert_eq!(niche_gain(1.0, false, 0.5), 1.0);
    }

    #[test]
    fn trend_gain_cases() {
        assert!((trend_gain(1.0, 0.0, 0.7) - 0.7).abs() < 1e-15);
        for a in [0.1, 0.3, 0.7, 0.99] {
            assert!((trend_gain(0.42, 0.42, a) - 0.42).abs() < 1e-15);
        }
    }

    #[test]
    fn minmax_cases() {
        assert_eq!(minmax_normalize(&[2.0, 4.0, 6.0]), vec![0.0, 0.5, 1.0]);
        assert_eq!(minmax_normalize(&[5.0, 5.0, 5.0]), vec![0.0; 3]);
        assert!(minmax_normalize(&[]).is_empty());
    }

    fn rec(item: u32, ts: i64) -> Interaction {
        Interaction {
            user_id: UserId(0),
            item_id: ItemId(item),
            timestamp: ts,
            signal_kind: SignalKind::WatchRatio,
            signal_value: 1.0,
        }
    }

    #[test]
    fn trend_window_counts() {
        let empty = InteractionLog::default();
        assert_eq!(trend_count(&empty, ItemId(1), 100, 10), 0);
        let log = InteractionLog {
            records: vec![rec(1, 95), rec(1, 99), rec(1, 100), rec(1, 50), rec(1, 101), rec(2, 99)],
        };
        assert_eq!(trend_count(&log, ItemId(1), 100, 10), 3);
        // boundary at query_time - window is excluded, query_time itself included
        let edge = InteractionLog {
            records: vec![rec(1, 90), rec(1, 91), rec(1, 100)],
        };
        assert_eq!(trend_count(&edge, ItemId(1), 100, 10), 2);
        let idx = TrendIndex::new(&log);
        assert_eq!(idx.count(ItemId(1), 100, 10), 3);
        assert_eq!(TrendIndex::new(&edge).count(ItemId(1), 100, 10), 2);
        assert_eq!(idx.count(ItemId(7), 100, 10), 0);
    }

    #[test]
    fn esci_values() {
        assert_eq!(esci_gain(EsciLabel::E), 1.0);
        assert_eq!(esci_gain(EsciLabel::S), 0.1);
        assert_eq!(esci_gain(EsciLabel::C), 0.01);
        assert_eq!(esci_gain(EsciLabel::I), 0.0);
        assert_eq!("S".parse::<EsciLabel>().unwrap(), EsciLabel::S);
    }

    fn toy_context(need: NeedKind) -> Context {
        Context::new(
            1,
            UserId(0),
            vec![HistoryEntry {
                item: ItemId(100),
                signal: 1.0,
                timestamp: 1000,
            }],
            vec![ItemId(1), ItemId(2), ItemId(3), ItemId(4)],
            need,
        )
        .unwrap()
    }

    #[test]
    fn max_interest_zeros() {
        let ctx = toy_context(NeedKind::MaxInterest);
        let signals: BTreeMap<_, _> = ctx.candidates.iter().map(|&c| (c, 0.0)).collect();
        let rel = build_relevance(
            &ctx,
            &NeedKind::MaxInterest,
            &NeedInputs {
                signals: Some(&signals),
                ..Default::default()
            },
        )
        .unwrap();
        assert!(rel.iter().all(|(_, g)| g == 0.0));
        assert!(matches!(
            build_relevance(&ctx, &NeedKind::MaxInterest, &NeedInputs::default()),
            Err(Error::MissingNeedInput { .. })
        ));
    }

    #[test]
    fn niche_toy_by_hand() {
        let need = NeedKind::NicheDiscovery { alpha_bonus: 0.5 };
        let ctx = toy_context(need);
        let mut topics = TopicMap::default();
        topics.insert(ItemId(100), set(&["cats"]));
        topics.insert(ItemId(1), set(&["cats"]));
        topics.insert(ItemId(2), set(&["dogs"]));
        topics.insert(ItemId(3), set(&["cats", "birds"]));
        // item 4 has no topics
        let sims: BTreeMap<_, _> = [(1, 0.9), (2, 0.6), (3, 0.8), (4, 0.7)]
            .into_iter()
            .map(|(i, s)| (ItemId(i), s))
            .collect();
        let rel = build_relevance(
            &ctx,
            &need,
            &NeedInputs {
                similarities: Some(&sims),
                topics: Some(&topics),
                ..Default::default()
            },
        )
        .unwrap();
        let want = [0.9, 0.6 * 1.5, 0.8, 0.7];
        for (i, w) in want.iter().enumerate() {
            assert!((rel.gain(ItemId(i as u32 + 1)).unwrap() - w).abs() < 1e-15);
        }
    }

    #[test]
    fn trend_alpha_one_endpoint() {
        // alpha = 1 lies outside the validated range; exercise the blend directly
        let sims = [0.2, 0.5, 0.9, 0.4];
        let counts = [10.0, 0.0, 3.0, 7.0];
        let s = minmax_normalize(&sims);
        let t = minmax_normalize(&counts);
        let g: Vec<f64> = s.iter().zip(&t).map(|(&a, &b)| trend_gain(a, b, 1.0)).collect();
        assert_eq!(g, s);
    }

    #[test]
    fn rejects_bad_need_parameters() {
        assert!(NeedKind::NicheDiscovery { alpha_bonus: 0.0 }.validate().is_err());
        assert!(NeedKind::TrendPromotion { alpha_blend: 1.0, window_seconds: 10 }.validate().is_err());
        assert!(NeedKind::trend().validate().is_ok());
    }

    #[test]
    fn tsv_round_trip() {
        let rel = RelevanceTable::from_pairs([(ItemId(3), 0.1), (ItemId(1), 1.0 / 3.0)]).unwrap();
        let text = relevance_to_tsv(&rel);
        assert!(text.starts_with("1\t3.3333333333333331e-1\n"));
        assert_eq!(relevance_from_tsv(&text).unwrap(), rel);
        assert!(matches!(relevance_from_tsv("1\tx\n"), Err(Error::Parse { line: 1, .. })));
    }

    proptest! {
        #[test]
        fn minmax_hits_unit_interval(v in prop::collection::vec(-100.0f64..100.0, 2..20)) {
            let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assume!(hi > lo);
            let n = minmax_normalize(&v);
            let nlo = n.iter().cloned().fold(f64::INFINITY, f64::min);
            let nhi = n.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert_eq!(nlo, 0.0);
            prop_assert!((nhi - 1.0).abs() < 1e-15);
        }

        #[test]
        fn trend_gain_monotone(s in 0.0f64..1.0, t in 0.0f64..1.0, ds in 0.0f64..1.0, a in 0.01f64..0.99) {
            let s2 = (s + ds).min(1.0);
            prop_assert!(trend_gain(s2, t, a) >= trend_gain(s, t, a));
            let t2 = (t + ds).min(1.0);
            prop_assert!(trend_gain(s, t2, a) >= trend_gain(s, t, a));
            let g = trend_gain(s, t, a);
            prop_assert!((0.0..=1.0).contains(&g));
        }

        #[test]
        fn niche_never_demotes_equal_base(base in 0.0f64..2.0, a in 0.01f64..3.0) {
            prop_assert!(niche_gain(base, true, a) >= niche_gain(base, false, a));
        }
    }
}
