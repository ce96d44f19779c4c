//! Item-level rewards for a ranked list.
//!
//! The causal swap reward credits the item at rank `k` with the negated mean
//! change in NDCG from exchanging it with each item ranked below it, i.e.
//! with every item of the pool it was chosen from. Two ablation variants
//! are provided: swapping with every other position, and the item's own
//! discounted-gain share of the ideal DCG.

use std::cell::Cell;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ranking::{discount, ideal_dcg, GainKind, Ranking, RelevanceTable};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardVariant {
    #[default]
    CausalSwap,
    NonCausalSwap,
    IndependentContribution,
}

impl RewardVariant {
    pub fn name(self) -> &'static str {
        match self {
            RewardVariant::CausalSwap => "causal_swap",
            RewardVariant::NonCausalSwap => "noncausal_swap",
            RewardVariant::IndependentContribution => "independent_contribution",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ItemRewardVector {
    pub per_rank: Vec<f64>,
    pub variant: RewardVariant,
}

/// Linear-gain NDCG swap deltas with two-term incremental updates against a
/// cached DCG and IDCG.
#[derive(Debug)]
pub struct SwapEvaluator {
    gains: Vec<f64>,
    /// Zero past the cutoff.
    discounts: Vec<f64>,
    idcg: f64,
    evaluations: Cell<usize>,
}

impl SwapEvaluator {
    pub fn new(gains_by_rank: &[f64], cutoff: usize) -> Result<Self> {
        if gains_by_rank.is_empty() {
            return Err(Error::EmptyRanking);
        }
        if cutoff == 0 {
            return Err(Error::InvalidArgument("cutoff must be at least 1".into()));
        }
        let discounts = (1..=gains_by_rank.len())
            .map(|r| if r <= cutoff { discount(r) } else { 0.0 })
            .collect();
        Ok(Self {
            gains: gains_by_rank.to_vec(),
            discounts,
            idcg: ideal_dcg(gains_by_rank, cutoff, GainKind::Linear),
            evaluations: Cell::new(0),
        })
    }

    pub fn from_ranking(y: &Ranking, rel: &RelevanceTable, cutoff: usize) -> Result<Self> {
        Self::new(&rel.gains_for(&y.items)?, cutoff)
    }

    pub fn len(&self) -> usize {
        self.gains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gains.is_empty()
    }

    pub fn idcg(&self) -> f64 {
        self.idcg
    }

    /// Counterfactual objective evaluations performed so far.
    pub fn evaluations(&self) -> usize {
        self.evaluations.get()
    }

    /// `NDCG(y with ranks k, j exchanged) - NDCG(y)`, 1-based ranks, `k != j`.
    #[inline]
    pub fn delta(&self, k: usize, j: usize) -> f64 {
        self.evaluations.set(self.evaluations.get() + 1);
        if self.idcg <= 0.0 {
            return 0.0;
        }
        let (a, b) = (k - 1, j - 1);
        (self.gains[b] - self.gains[a]) * (self.discounts[a] - self.discounts[b]) / self.idcg
    }

    pub fn checked_delta(&self, k: usize, j: usize) -> Result<f64> {
        let len = self.len();
        for index in [k, j] {
            if index == 0 || index > len {
                return Err(Error::RankOutOfRange { index, len });
            }
        }
        if k >= j {
            return Err(Error::SwapOrder { k, j });
        }
        Ok(self.delta(k, j))
    }

    pub fn causal(&self) -> Vec<f64> {
        let n = self.len();
        (1..=n)
            .map(|k| {
                if k == n {
                    return 0.0;
                }
                let total: f64 = (k + 1..=n).map(|j| self.delta(k, j)).sum();
                -total / (n - k) as f64
            })
            .collect()
    }

    pub fn noncausal(&self) -> Vec<f64> {
        let n = self.len();
        if n == 1 {
            return vec![0.0];
        }
        (1..=n)
            .map(|k| {
                let total: f64 = (1..=n).filter(|&j| j != k).map(|j| self.delta(k, j)).sum();
                -total / (n - 1) as f64
            })
            .collect()
    }

    pub fn independent(&self) -> Vec<f64> {
        if self.idcg <= 0.0 {
            return vec![0.0; self.len()];
        }
        self.gains
            .iter()
            .zip(&self.discounts)
            .map(|(g, d)| g * d / self.idcg)
            .collect()
    }

    pub fn rewards(&self, variant: RewardVariant) -> Vec<f64> {
        match variant {
            RewardVariant::CausalSwap => self.causal(),
            RewardVariant::NonCausalSwap => self.noncausal(),
            RewardVariant::IndependentContribution => self.independent(),
        }
    }
}

pub fn delta_swap(y: &Ranking, rel: &RelevanceTable, k: usize, j: usize, cutoff: usize) -> Result<f64> {
    SwapEvaluator::from_ranking(y, rel, cutoff)?.checked_delta(k, j)
}

/// `per_rank[k] = -(1/(K-k)) * sum_{j>k} delta_swap(y, k, j)`; the last rank
/// has no counterfactual and gets 0.
pub fn causal_swap_reward(y: &Ranking, rel: &RelevanceTable, cutoff: usize) -> Result<ItemRewardVector> {
    item_rewards(RewardVariant::CausalSwap, y, rel, cutoff)
}

pub fn noncausal_swap_reward(y: &Ranking, rel: &RelevanceTable, cutoff: usize) -> Result<ItemRewardVector> {
    item_rewards(RewardVariant::NonCausalSwap, y, rel, cutoff)
}

pub fn independent_contribution_reward(y: &Ranking, rel: &RelevanceTable, cutoff: usize) -> Result<ItemRewardVector> {
    item_rewards(RewardVariant::IndependentContribution, y, rel, cutoff)
}

pub fn item_rewards(variant: RewardVariant, y: &Ranking, rel: &RelevanceTable, cutoff: usize) -> Result<ItemRewardVector> {
    let eval = SwapEvaluator::from_ranking(y, rel, cutoff)?;
    Ok(ItemRewardVector {
        per_rank: eval.rewards(variant),
        variant,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ranking::{sequence_reward, swap, ItemId};

    fn setup(gains: &[f64]) -> (Ranking, RelevanceTable) {
        let items: Vec<ItemId> = (0..gains.len() as u32).map(ItemId).collect();
        let rel = RelevanceTable::from_pairs(items.iter().copied().zip(gains.iter().copied())).unwrap();
        (Ranking::new(items, 0).unwrap(), rel)
    }

    #[test]
    fn delta_examples() {
        let (y, rel) = setup(&[3.0, 2.0, 1.0]);
        let d12 = delta_swap(&y, &rel, 1, 2, 3).unwrap();
        let d13 = delta_swap(&y, &rel, 1, 3, 3).unwrap();
        assert!((d12 - (-0.0775053)).abs() < 1e-6);
        assert!((d13 - (-0.2100016)).abs() < 1e-6);
        // against recomputation from scratch
        let base = sequence_reward(&y, &rel, 3).unwrap();
        assert!((d12 - (sequence_reward(&swap(&y, 1, 2).unwrap(), &rel, 3).unwrap() - base)).abs() < 1e-15);
        assert!(matches!(delta_swap(&y, &rel, 2, 1, 3), Err(Error::SwapOrder { .. })));
        assert!(matches!(delta_swap(&y, &rel, 1, 4, 3), Err(Error::RankOutOfRange { .. })));
    }

    #[test]
    fn equal_gains_give_zero_everywhere() {
        let (y, rel) = setup(&[0.7; 5]);
        for k in 1..5 {
            for j in k + 1..=5 {
                assert_eq!(delta_swap(&y, &rel, k, j, 5).unwrap(), 0.0);
            }
        }
        for v in [RewardVariant::CausalSwap, RewardVariant::NonCausalSwap] {
            assert!(item_rewards(v, &y, &rel, 5).unwrap().per_rank.iter().all(|&r| r == 0.0));
        }
    }

    #[test]
    fn causal_example() {
        let (y, rel) = setup(&[3.0, 2.0, 1.0]);
        let r = causal_swap_reward(&y, &rel, 3).unwrap().per_rank;
        // rank 1: mean of the two deltas above, negated
        assert!((r[0] - 0.1437534).abs() < 1e-6);
        assert!((r[1] - 0.0274962).abs() < 1e-6);
        assert_eq!(r[2], 0.0);
    }

    #[test]
    fn causal_uses_exactly_k_choose_2_evaluations() {
        for n in 1..=12usize {
            let gains: Vec<f64> = (0..n).map(|i| (i * 7 % 5) as f64).collect();
            let eval = SwapEvaluator::new(&gains, n).unwrap();
            eval.causal();
            assert_eq!(eval.evaluations(), n * (n - 1) / 2);
        }
    }

    #[test]
    fn noncausal_cases() {
        let (y, rel) = setup(&[1.0, 4.0]);
        let r = noncausal_swap_reward(&y, &rel, 2).unwrap().per_rank;
        let d = delta_swap(&y, &rel, 1, 2, 2).unwrap();
        assert_eq!(r, vec![-d, -d]);

        let (y, rel) = setup(&[3.0, 2.0, 1.0]);
        let r = noncausal_swap_reward(&y, &rel, 3).unwrap().per_rank;
        assert!(r[2] > 0.0);

        let (y, rel) = setup(&[2.0]);
        assert_eq!(noncausal_swap_reward(&y, &rel, 1).unwrap().per_rank, vec![0.0]);
    }

    #[test]
    fn independent_cases() {
        let (y, rel) = setup(&[3.0, 2.0, 1.0]);
        let r = independent_contribution_reward(&y, &rel, 3).unwrap().per_rank;
        let idcg = 3.0 + 2.0 / 3f64.log2() + 0.5;
        assert!((idcg - 4.7618595).abs() < 1e-7);
        let want = [3.0 / idcg, 2.0 / 3f64.log2() / idcg, 0.5 / idcg];
        for (a, b) in r.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((r[0] - 0.6300).abs() < 1e-4 && (r[1] - 0.2650).abs() < 1e-4 && (r[2] - 0.1050).abs() < 1e-4);

        let (y, rel) = setup(&[0.0; 4]);
        assert_eq!(independent_contribution_reward(&y, &rel, 4).unwrap().per_rank, vec![0.0; 4]);

        let (y, rel) = setup(&[3.0, 2.0, 1.0, 5.0]);
        let r = independent_contribution_reward(&y, &rel, 2).unwrap().per_rank;
        assert_eq!(&r[2..], &[0.0, 0.0]);
    }
}
