//! Hand-built four-candidate fixtures shared by the golden-file tests.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use swaprank::data::{Interaction, InteractionLog, SignalKind, TopicMap};
use swaprank::needs::{build_relevance, relevance_to_tsv, EsciLabel, NeedInputs, NeedKind, TrendIndex, DEFAULT_NICHE_BONUS, ONE_DAY_SECONDS};
use swaprank::ranking::{Context, HistoryEntry, ItemId, UserId};

pub const QUERY_TIME: i64 = 200_000;
pub const CANDIDATES: [u32; 4] = [10, 11, 12, 13];

pub fn golden_path(name: &str) -> PathBuf {
    // resolves from both the core and the cli crate
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/golden").join(name)
}

fn context(need: NeedKind) -> Context {
    let history = vec![HistoryEntry {
        item: ItemId(1),
        signal: 1.0,
        timestamp: QUERY_TIME,
    }];
    Context::new(7, UserId(3), history, CANDIDATES.iter().map(|&i| ItemId(i)).collect(), need).unwrap()
}

fn per_candidate(values: [f64; 4]) -> BTreeMap<ItemId, f64> {
    CANDIDATES.iter().map(|&i| ItemId(i)).zip(values).collect()
}

fn trend_log() -> InteractionLog {
    let at = |item: u32, t: i64| Interaction {
        user_id: UserId(9),
        item_id: ItemId(item),
        timestamp: t,
        signal_kind: SignalKind::WatchRatio,
        signal_value: 1.0,
    };
    let day = ONE_DAY_SECONDS;
    InteractionLog::new(vec![
        // after the query time, so never counted
        at(10, QUERY_TIME + 5),
        at(11, QUERY_TIME - 100),
        at(11, QUERY_TIME - day + 1),
        // exactly one window back sits outside the half-open window
        at(11, QUERY_TIME - day),
        at(12, QUERY_TIME - 1),
        at(12, QUERY_TIME - 2),
        at(12, QUERY_TIME - 3),
        at(12, QUERY_TIME - 4),
        at(13, QUERY_TIME),
    ])
    .unwrap()
}

/// `(golden file name, produced TSV)` for each need construction.
pub fn golden_cases() -> Vec<(&'static str, String)> {
    let mut out = Vec::new();

    let esci: BTreeMap<ItemId, EsciLabel> = CANDIDATES
        .iter()
        .map(|&i| ItemId(i))
        .zip([EsciLabel::E, EsciLabel::S, EsciLabel::C, EsciLabel::I])
        .collect();
    let inputs = NeedInputs {
        esci: Some(&esci),
        ..Default::default()
    };
    let rel = build_relevance(&context(NeedKind::ProductSearch), &NeedKind::ProductSearch, &inputs).unwrap();
    out.push(("esci.tsv", relevance_to_tsv(&rel)));

    let ratings = per_candidate([1.0, 3.0, 4.0, 5.0]);
    let inputs = NeedInputs {
        signals: Some(&ratings),
        signal_kind: SignalKind::Rating,
        ..Default::default()
    };
    let rel = build_relevance(&context(NeedKind::MaxInterest), &NeedKind::MaxInterest, &inputs).unwrap();
    out.push(("rating.tsv", relevance_to_tsv(&rel)));

    let watch = per_candidate([0.2, 1.3, 0.0, 2.0]);
    let inputs = NeedInputs {
        signals: Some(&watch),
        signal_kind: SignalKind::WatchRatio,
        ..Default::default()
    };
    let rel = build_relevance(&context(NeedKind::MaxInterest), &NeedKind::MaxInterest, &inputs).unwrap();
    out.push(("watch_ratio.tsv", relevance_to_tsv(&rel)));

    let sims = per_candidate([0.9, 0.5, 0.1, 0.3]);
    let log = trend_log();
    let trend = TrendIndex::new(&log);
    let need = NeedKind::trend();
    let inputs = NeedInputs {
        similarities: Some(&sims),
        trend: Some(&trend),
        ..Default::default()
    };
    let rel = build_relevance(&context(need), &need, &inputs).unwrap();
    out.push(("trend.tsv", relevance_to_tsv(&rel)));

    let sims = per_candidate([0.8, 0.6, -0.2, 0.4]);
    let mut topics = TopicMap::default();
    topics.insert(ItemId(1), BTreeSet::from(["a".to_string()]));
    topics.insert(ItemId(10), BTreeSet::from(["a".to_string()]));
    topics.insert(ItemId(11), BTreeSet::from(["b".to_string()]));
    topics.insert(ItemId(12), BTreeSet::from(["c".to_string()]));
    let need = NeedKind::NicheDiscovery {
        alpha_bonus: DEFAULT_NICHE_BONUS,
    };
    let inputs = NeedInputs {
        similarities: Some(&sims),
        topics: Some(&topics),
        ..Default::default()
    };
    let rel = build_relevance(&context(need), &need, &inputs).unwrap();
    out.push(("niche.tsv", relevance_to_tsv(&rel)));

    out
}

/// Names of golden files whose content differs from what the code produces.
pub fn golden_mismatches() -> Vec<String> {
    golden_cases()
        .into_iter()
        .filter_map(|(name, produced)| {
            let expected = std::fs::read_to_string(golden_path(name)).unwrap_or_default();
            (expected != produced).then(|| format!("{name}: expected {expected:?}, produced {produced:?}"))
        })
        .collect()
}
