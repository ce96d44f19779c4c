use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{dot, EmbeddingTable};
use crate::error::{Error, Result};
use crate::ranking::{HistoryEntry, ItemId};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrievalConfig {
    /// Most recent history items that form the query.
    pub history_len: usize,
    pub n_candidates: usize,
    pub discount: f64,
    pub signal_weighting: bool,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            history_len: 10,
            n_candidates: 30,
            discount: 0.9,
            signal_weighting: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredItem {
    pub item: ItemId,
    pub cosine: f64,
}

fn query_embedding(recent: &[HistoryEntry], table: &EmbeddingTable, cfg: &RetrievalConfig, weighted: bool) -> Result<Option<Vec<f64>>> {
    let n = recent.len();
    let mut q = vec![0.0; table.dim];
    for (t, h) in recent.iter().enumerate() {
        let w = if weighted { h.signal } else { 1.0 };
        let coeff = cfg.discount.powi((n - 1 - t) as i32) * w;
        for (qi, ei) in q.iter_mut().zip(table.get(h.item)?) {
            *qi += coeff * ei;
        }
    }
    let norm = dot(&q, &q).sqrt();
    if !(norm > 1e-12) || !norm.is_finite() {
        return Ok(None);
    }
    q.iter_mut().for_each(|x| *x /= norm);
    Ok(Some(q))
}

/// Unit query vector built from the most recent `history_len` entries.
pub fn history_query(history: &[HistoryEntry], table: &EmbeddingTable, cfg: &RetrievalConfig) -> Result<Vec<f64>> {
    if history.is_empty() {
        return Err(Error::Empty("history"));
    }
    if !(cfg.discount > 0.0) {
        return Err(Error::InvalidArgument("retrieval discount must be > 0".into()));
    }
    let start = history.len().saturating_sub(cfg.history_len.max(1));
    let recent = &history[start..];
    if cfg.signal_weighting {
        if let Some(q) = query_embedding(recent, table, cfg, true)? {
            return Ok(q);
        }
    }
    query_embedding(recent, table, cfg, false)?
        .ok_or_else(|| Error::InvalidArgument("history embeddings cancel to a zero query".into()))
}

/// Top-`n_candidates` catalog items by cosine similarity to a temporally
/// discounted (optionally signal-weighted) mean of the most recent history
/// embeddings. History items are excluded; ties go to the smaller item id.
///
/// `history` must be ascending by timestamp. A weighted query with zero
/// total weight falls back to the unweighted query.
pub fn retrieve_candidates(history: &[HistoryEntry], table: &EmbeddingTable, cfg: &RetrievalConfig) -> Result<Vec<ScoredItem>> {
    let q = history_query(history, table, cfg)?;
    let excluded: BTreeSet<ItemId> = history.iter().map(|h| h.item).collect();
    let mut scored: Vec<ScoredItem> = table
        .vectors
        .iter()
        .filter(|(item, _)| !excluded.contains(item))
        .map(|(&item, e)| ScoredItem {
            item,
            cosine: dot(&q, e),
        })
        .collect();
    if scored.len() < cfg.n_candidates {
        return Err(Error::TooFewCandidates {
            needed: cfg.n_candidates,
            got: scored.len(),
        });
    }
    scored.sort_by(|a, b| b.cosine.total_cmp(&a.cosine).then(a.item.cmp(&b.item)));
    scored.truncate(cfg.n_candidates);
    Ok(scored)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    fn random_table(n: u32, dim: usize, seed: u64) -> EmbeddingTable {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vectors: BTreeMap<_, _> = (0..n)
            .map(|i| (ItemId(i), (0..dim).map(|_| rng.random::<f64>() - 0.5).collect()))
            .collect();
        EmbeddingTable::new(dim, vectors).unwrap()
    }

    fn hist(items: &[u32]) -> Vec<HistoryEntry> {
        items
            .iter()
            .enumerate()
            .map(|(t, &i)| HistoryEntry {
                item: ItemId(i),
                signal: 1.0 + t as f64 * 0.25,
                timestamp: t as i64,
            })
            .collect()
    }

    #[test]
    fn single_item_history_uses_its_neighbours() {
        let table = random_table(20, 5, 1);
        let cfg = RetrievalConfig {
            n_candidates: 6,
            signal_weighting: false,
            ..Default::default()
        };
        let got = retrieve_candidates(&hist(&[4]), &table, &cfg).unwrap();
        let anchor = table.get(ItemId(4)).unwrap();
        let mut brute: Vec<(f64, u32)> = (0..20)
            .filter(|&i| i != 4)
            .map(|i| (dot(anchor, table.get(ItemId(i)).unwrap()), i))
            .collect();
        brute.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let want: Vec<ItemId> = brute[..6].iter().map(|&(_, i)| ItemId(i)).collect();
        assert_eq!(got.iter().map(|s| s.item).collect::<Vec<_>>(), want);
    }

    #[test]
    fn undiscounted_unweighted_query_is_the_mean() {
        let table = random_table(20, 4, 2);
        let h = hist(&[1, 2, 3]);
        let cfg = RetrievalConfig {
            n_candidates: 17,
            discount: 1.0,
            signal_weighting: false,
            ..Default::default()
        };
        let got = retrieve_candidates(&h, &table, &cfg).unwrap();
        let mut mean = vec![0.0; 4];
        for i in [1, 2, 3] {
            for (m, e) in mean.iter_mut().zip(table.get(ItemId(i)).unwrap()) {
                *m += e / 3.0;
            }
        }
        let norm = dot(&mean, &mean).sqrt();
        for s in &got {
            let e = table.get(s.item).unwrap();
            assert!((s.cosine - dot(&mean, e) / norm).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_exhaustive_oracle_with_weights() {
        let table = random_table(20, 6, 3);
        let h = hist(&[0, 5, 9, 12]);
        let cfg = RetrievalConfig {
            history_len: 3,
            n_candidates: 10,
            discount: 0.8,
            signal_weighting: true,
        };
        let got = retrieve_candidates(&h, &table, &cfg).unwrap();
        // oracle: only the last three entries, newest weight 0.8^0
        let recent = &h[1..];
        let mut q = vec![0.0; 6];
        for (t, e) in recent.iter().enumerate() {
            let c = 0.8f64.powi((recent.len() - 1 - t) as i32) * e.signal;
            for (qi, ei) in q.iter_mut().zip(table.get(e.item).unwrap()) {
                *qi += c * ei;
            }
        }
        let mut brute: Vec<(f64, u32)> = (0..20)
            .filter(|i| ![0, 5, 9, 12].contains(i))
            .map(|i| (dot(&q, table.get(ItemId(i)).unwrap()), i))
            .collect();
        brute.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let want: Vec<ItemId> = brute[..10].iter().map(|&(_, i)| ItemId(i)).collect();
        let got_ids: Vec<ItemId> = got.iter().map(|s| s.item).collect();
        assert_eq!(got_ids, want);
        let distinct: BTreeSet<_> = got_ids.iter().collect();
        assert_eq!(distinct.len(), got_ids.len());
    }

    #[test]
    fn errors() {
        let table = random_table(5, 3, 4);
        assert!(matches!(
            retrieve_candidates(&[], &table, &RetrievalConfig::default()),
            Err(Error::Empty(_))
        ));
        assert!(matches!(
            retrieve_candidates(&hist(&[0]), &table, &RetrievalConfig::default()),
            Err(Error::TooFewCandidates { .. })
        ));
    }

    #[test]
    fn ties_break_by_item_id() {
        let mut vectors = BTreeMap::new();
        vectors.insert(ItemId(0), vec![1.0, 0.0]);
        vectors.insert(ItemId(3), vec![0.0, 1.0]);
        vectors.insert(ItemId(1), vec![0.0, 1.0]);
        vectors.insert(ItemId(2), vec![0.0, 1.0]);
        let table = EmbeddingTable::new(2, vectors).unwrap();
        let cfg = RetrievalConfig {
            n_candidates: 3,
            ..Default::default()
        };
        let got = retrieve_candidates(&hist(&[0]), &table, &cfg).unwrap();
        assert_eq!(got.iter().map(|s| s.item.0).collect::<Vec<_>>(), vec![1, 2, 3]);
    }
}
