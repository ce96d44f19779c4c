mod common;

use swaprank::needs::{relevance_from_tsv, NeedKind, DEFAULT_TREND_BLEND};
use swaprank::ranking::ItemId;

#[test]
fn need_constructions_match_golden_files() {
    let bad = common::golden_mismatches();
    assert!(bad.is_empty(), "{bad:#?}");
}

#[test]
fn golden_files_hold_the_documented_values() {
    let load = |name: &str| relevance_from_tsv(&std::fs::read_to_string(common::golden_path(name)).unwrap()).unwrap();
    let gains = |name: &str| -> Vec<f64> { common::CANDIDATES.iter().map(|&i| load(name).gain(ItemId(i)).unwrap()).collect() };
    assert_eq!(gains("esci.tsv"), vec![1.0, 0.1, 0.01, 0.0]);
    assert_eq!(gains("rating.tsv"), vec![1.0, 7.0, 15.0, 31.0]);
    let t = gains("trend.tsv");
    assert_eq!(DEFAULT_TREND_BLEND, 0.7);
    for (got, want) in t.iter().zip([0.7, 0.5, 0.3, 0.25]) {
        assert!((got - want).abs() < 1e-15);
    }
    let n = gains("niche.tsv");
    for (got, want) in n.iter().zip([0.8, 0.9, 0.0, 0.4]) {
        assert!((got - want).abs() < 1e-15);
    }
    assert_eq!(NeedKind::niche(), NeedKind::NicheDiscovery { alpha_bonus: 0.5 });
}
