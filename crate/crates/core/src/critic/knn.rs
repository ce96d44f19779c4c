//! Neighbourhood collaborative-filtering imputation baselines.

use std::collections::{BTreeMap, HashMap};
use std::sync::OnceLock;

use rayon::prelude::*;

use serde::{Deserialize, Serialize};

use crate::data::InteractionLog;
use crate::error::{Error, Result};
use crate::ranking::{ItemId, UserId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CfMode {
    UserKnn,
    ItemKnn,
}

impl CfMode {
    pub fn name(self) -> &'static str {
        match self {
            CfMode::UserKnn => "user_knn",
            CfMode::ItemKnn => "item_knn",
        }
    }
}

/// Sparse user-item signal matrix. Repeated pairs keep the latest record.
#[derive(Clone, Debug, Default)]
pub struct InteractionMatrix {
    by_user: BTreeMap<UserId, BTreeMap<ItemId, f64>>,
    by_item: BTreeMap<ItemId, BTreeMap<UserId, f64>>,
    user_norms: BTreeMap<UserId, f64>,
    item_norms: BTreeMap<ItemId, f64>,
    global_mean: f64,
    /// Dense item-item cosines, built on first item-KNN use.
    item_sims: OnceLock<(BTreeMap<ItemId, usize>, Vec<Vec<f64>>)>,
}

fn sparse_dot<K: Ord>(a: &BTreeMap<K, f64>, b: &BTreeMap<K, f64>) -> f64 {
    let (small, large) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    small.iter().filter_map(|(k, x)| large.get(k).map(|y| x * y)).sum()
}

fn norm<'a>(values: impl Iterator<Item = &'a f64>) -> f64 {
    values.map(|v| v * v).sum::<f64>().sqrt()
}

impl InteractionMatrix {
    pub fn from_log(log: &InteractionLog) -> Self {
        let mut records: Vec<_> = log.records.iter().collect();
        records.sort_by_key(|r| r.timestamp);
        let mut m = Self::default();
        for r in records {
            m.by_user.entry(r.user_id).or_default().insert(r.item_id, r.signal_value);
            m.by_item.entry(r.item_id).or_default().insert(r.user_id, r.signal_value);
        }
        m.user_norms = m.by_user.iter().map(|(u, row)| (*u, norm(row.values()))).collect();
        m.item_norms = m.by_item.iter().map(|(i, row)| (*i, norm(row.values()))).collect();
        let n: usize = m.by_user.values().map(BTreeMap::len).sum();
        m.global_mean = if n == 0 {
            0.0
        } else {
            m.by_user.values().flat_map(|r| r.values()).sum::<f64>() / n as f64
        };
        m
    }

    pub fn global_mean(&self) -> f64 {
        self.global_mean
    }

    pub fn signal(&self, user: UserId, item: ItemId) -> Option<f64> {
        self.by_user.get(&user)?.get(&item).copied()
    }

    /// Cosine between `user` and every user sharing at least one item.
    fn user_neighbours(&self, user: UserId) -> HashMap<UserId, f64> {
        let mut dots: HashMap<UserId, f64> = HashMap::new();
        let Some(row) = self.by_user.get(&user) else {
            return dots;
        };
        for (item, s) in row {
            for (v, t) in &self.by_item[item] {
                if *v != user {
                    *dots.entry(*v).or_default() += s * t;
                }
            }
        }
        let nu = self.user_norms[&user];
        for (v, d) in dots.iter_mut() {
            let denom = nu * self.user_norms[v];
            *d = if denom == 0.0 { 0.0 } else { *d / denom };
        }
        dots
    }

    fn item_cosine(&self, a: ItemId, b: ItemId) -> f64 {
        let (Some(ra), Some(rb)) = (self.by_item.get(&a), self.by_item.get(&b)) else {
            return 0.0;
        };
        let denom = self.item_norms[&a] * self.item_norms[&b];
        if denom == 0.0 { 0.0 } else { sparse_dot(ra, rb) / denom }
    }

    fn item_similarity_table(&self) -> &(BTreeMap<ItemId, usize>, Vec<Vec<f64>>) {
        self.item_sims.get_or_init(|| {
            let items: Vec<ItemId> = self.by_item.keys().copied().collect();
            let index = items.iter().enumerate().map(|(i, &it)| (it, i)).collect();
            let rows = items
                .par_iter()
                .map(|&a| items.iter().map(|&b| self.item_cosine(a, b)).collect())
                .collect();
            (index, rows)
        })
    }
}

fn weighted_top_k(mut scored: Vec<(f64, u32, f64)>, k: usize, fallback: f64) -> f64 {
    scored.retain(|(sim, _, _)| *sim > 0.0);
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    scored.truncate(k);
    let wsum: f64 = scored.iter().map(|s| s.0).sum();
    if wsum <= 0.0 {
        return fallback;
    }
    scored.iter().map(|(w, _, s)| w * s).sum::<f64>() / wsum
}

/// Cosine-weighted mean over the `k` most similar neighbours that carry an
/// observation: other users who saw `item` (UserKnn), or other items `user`
/// saw (ItemKnn). Neighbours with non-positive similarity are ignored; with
/// none left the global mean is returned. Ties go to the smaller id.
pub fn knn_cf_impute(matrix: &InteractionMatrix, user: UserId, item: ItemId, mode: CfMode, k: usize) -> Result<f64> {
    Ok(knn_cf_impute_many(matrix, user, &[item], mode, k)?[0])
}

/// [`knn_cf_impute`] for several items of one user, sharing the neighbour search.
pub fn knn_cf_impute_many(matrix: &InteractionMatrix, user: UserId, items: &[ItemId], mode: CfMode, k: usize) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(Error::InvalidArgument("k_neighbors must be at least 1".into()));
    }
    match mode {
        CfMode::UserKnn => {
            let sims = matrix.user_neighbours(user);
            Ok(items
                .iter()
                .map(|item| {
                    let scored = matrix
                        .by_item
                        .get(item)
                        .into_iter()
                        .flatten()
                        .filter(|(v, _)| **v != user)
                        .map(|(v, &s)| (sims.get(v).copied().unwrap_or(0.0), v.0, s))
                        .collect();
                    weighted_top_k(scored, k, matrix.global_mean)
                })
                .collect())
        }
        CfMode::ItemKnn => {
            let (index, table) = matrix.item_similarity_table();
            let no_row = BTreeMap::new();
            let row = matrix.by_user.get(&user).unwrap_or(&no_row);
            Ok(items
                .iter()
                .map(|item| {
                    let sims = index.get(item).map(|&i| &table[i]);
                    let scored = row
                        .iter()
                        .filter(|(j, _)| *j != item)
                        .map(|(j, &s)| (sims.map_or(0.0, |r| r[index[j]]), j.0, s))
                        .collect();
                    weighted_top_k(scored, k, matrix.global_mean)
                })
                .collect())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Interaction, SignalKind};

    fn log(rows: &[(u32, u32, f64)]) -> InteractionLog {
        InteractionLog::new(
            rows.iter()
                .enumerate()
                .map(|(t, &(u, i, s))| Interaction {
                    user_id: UserId(u),
                    item_id: ItemId(i),
                    timestamp: t as i64,
                    signal_kind: SignalKind::WatchRatio,
                    signal_value: s,
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn single_user_falls_back_to_global_mean() {
        let m = InteractionMatrix::from_log(&log(&[(0, 0, 1.0), (0, 1, 3.0)]));
        assert_eq!(knn_cf_impute(&m, UserId(0), ItemId(5), CfMode::UserKnn, 3).unwrap(), 2.0);
    }

    #[test]
    fn clone_user_predicts_its_signal() {
        let m = InteractionMatrix::from_log(&log(&[
            (0, 0, 1.0),
            (0, 1, 0.5),
            (1, 0, 1.0),
            (1, 1, 0.5),
            (1, 2, 1.7),
            (2, 3, 0.9),
            (2, 2, 0.1),
        ]));
        assert!((knn_cf_impute(&m, UserId(0), ItemId(2), CfMode::UserKnn, 1).unwrap() - 1.7).abs() < 1e-12);
    }

    #[test]
    fn five_user_toy_matches_hand_enumeration() {
        let rows = [
            (0, 0, 1.0),
            (0, 1, 2.0),
            (1, 0, 2.0),
            (1, 2, 1.0),
            (1, 3, 0.5),
            (2, 1, 1.0),
            (2, 3, 2.0),
            (3, 0, 1.0),
            (3, 1, 1.0),
            (3, 3, 1.0),
            (4, 2, 3.0),
        ];
        let m = InteractionMatrix::from_log(&log(&rows));
        // user 0 = (1, 2, 0, 0); raters of item 3: users 1, 2, 3
        let n0 = 5f64.sqrt();
        let s1 = 2.0 / (n0 * 5.25f64.sqrt());
        let s2 = 2.0 / (n0 * 5f64.sqrt());
        let s3 = 3.0 / (n0 * 3f64.sqrt());
        let mut sims = [(s1, 0.5), (s2, 2.0), (s3, 1.0)];
        sims.sort_by(|a, b| b.0.total_cmp(&a.0));
        let want = (sims[0].0 * sims[0].1 + sims[1].0 * sims[1].1) / (sims[0].0 + sims[1].0);
        let got = knn_cf_impute(&m, UserId(0), ItemId(3), CfMode::UserKnn, 2).unwrap();
        assert!((got - want).abs() < 1e-12);

        // item 3 column = (0, 0.5, 2, 1, 0); user 0 saw items 0 and 1
        let c3 = (0.25f64 + 4.0 + 1.0).sqrt();
        let i0 = 0.5 * 2.0 + 1.0;
        let i1 = 2.0 + 1.0;
        let w0 = i0 / (c3 * 6f64.sqrt());
        let w1 = i1 / (c3 * 6f64.sqrt());
        let want = (w0 * 1.0 + w1 * 2.0) / (w0 + w1);
        let got = knn_cf_impute(&m, UserId(0), ItemId(3), CfMode::ItemKnn, 5).unwrap();
        assert!((got - want).abs() < 1e-12);
    }
}
