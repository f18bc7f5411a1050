//! Negative-sample allocation for one-vs-rest training sets.
//!
//! A fixed fraction of the negatives is spread uniformly over the seven other
//! emotions; the rest follows the target's row of the AU correlation matrix.
//! Both tranches are rounded with the largest-remainder method, ties going to
//! the lower emotion index.

use serde::{Deserialize, Serialize};

use crate::error::SamplingError;
use crate::model::{AuCorrelationMatrix, Emotion};

pub const DEFAULT_UNIFORM_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Allocation {
    pub emotion: Emotion,
    pub uniform: usize,
    pub proportional: usize,
}

impl Allocation {
    pub fn count(&self) -> usize {
        self.uniform + self.proportional
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingPlan {
    pub target: Emotion,
    pub total_negatives: usize,
    pub uniform_fraction: f64,
    pub uniform_total: usize,
    pub proportional_total: usize,
    /// One entry per non-target emotion, ascending index.
    pub allocations: Vec<Allocation>,
}

impl SamplingPlan {
    pub fn count_for(&self, emotion: Emotion) -> usize {
        self.allocations
            .iter()
            .find(|a| a.emotion == emotion)
            .map_or(0, Allocation::count)
    }

    pub fn sum(&self) -> usize {
        self.allocations.iter().map(Allocation::count).sum()
    }
}

/// Splits `total` over integer `weights` by largest remainder. Ties on the
/// remainder go to the earlier slot. All-zero weights fall back to equal
/// weights.
pub fn largest_remainder(total: usize, weights: &[u64]) -> Vec<usize> {
    if weights.is_empty() {
        return Vec::new();
    }
    let equal;
    let weights = if weights.iter().all(|w| *w == 0) {
        equal = vec![1u64; weights.len()];
        &equal[..]
    } else {
        weights
    };
    let weight_sum: u128 = weights.iter().map(|w| *w as u128).sum();
    let total_wide = total as u128;

    let mut counts = Vec::with_capacity(weights.len());
    let mut remainders = Vec::with_capacity(weights.len());
    for (slot, w) in weights.iter().enumerate() {
        let scaled = total_wide * *w as u128;
        counts.push((scaled / weight_sum) as usize);
        remainders.push((scaled % weight_sum, slot));
    }
    let assigned: usize = counts.iter().sum();
    remainders.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for (_, slot) in remainders.into_iter().take(total - assigned) {
        counts[slot] += 1;
    }
    counts
}

/// Allocates `total_negatives` over the emotions other than `target`.
///
/// Neutral has no AU row, so a Neutral target gets an entirely uniform plan
/// and Neutral as a negative class only receives its uniform share.
pub fn plan_negatives(
    target: Emotion,
    total_negatives: usize,
    correlation: &AuCorrelationMatrix,
    uniform_fraction: f64,
) -> Result<SamplingPlan, SamplingError> {
    if !(0.0..=1.0).contains(&uniform_fraction) {
        return Err(SamplingError::InvalidFraction(uniform_fraction));
    }
    let others: Vec<Emotion> = target.others().collect();

    let uniform_total = ((uniform_fraction * total_negatives as f64).round() as usize).min(total_negatives);
    let proportional_total = total_negatives - uniform_total;

    let uniform = largest_remainder(uniform_total, &vec![1; others.len()]);
    let row = correlation.row(target);
    let weights: Vec<u64> = others.iter().map(|e| row[e.index()] as u64).collect();
    // An all-zero row (Neutral target) makes the whole plan uniform.
    let proportional = largest_remainder(proportional_total, &weights);

    let allocations = others
        .iter()
        .zip(uniform.iter().zip(&proportional))
        .map(|(emotion, (u, p))| Allocation {
            emotion: *emotion,
            uniform: *u,
            proportional: *p,
        })
        .collect();

    Ok(SamplingPlan {
        target,
        total_negatives,
        uniform_fraction,
        uniform_total,
        proportional_total,
        allocations,
    })
}

/// Same as [`plan_negatives`] but accepts a signed total, rejecting negatives.
pub fn plan_negatives_checked(
    target: Emotion,
    total_negatives: i64,
    correlation: &AuCorrelationMatrix,
    uniform_fraction: f64,
) -> Result<SamplingPlan, SamplingError> {
    let total = usize::try_from(total_negatives).map_err(|_| SamplingError::NegativeTotal(total_negatives))?;
    plan_negatives(target, total, correlation, uniform_fraction)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Brute-force oracle: hand out units one at a time to the slot whose
    /// current count lags its exact quota the most.
    fn greedy_quota(total: usize, weights: &[u64]) -> Vec<usize> {
        let sum: u64 = weights.iter().sum();
        let weights: Vec<u64> = if sum == 0 { vec![1; weights.len()] } else { weights.to_vec() };
        let sum: u64 = weights.iter().sum();
        let quota: Vec<f64> = weights.iter().map(|w| total as f64 * *w as f64 / sum as f64).collect();
        let mut counts: Vec<usize> = quota.iter().map(|q| q.floor() as usize).collect();
        while counts.iter().sum::<usize>() < total {
            let mut best = 0;
            let mut best_gap = f64::NEG_INFINITY;
            for i in 0..counts.len() {
                let gap = quota[i] - counts[i] as f64;
                if gap > best_gap + 1e-12 {
                    best = i;
                    best_gap = gap;
                }
            }
            counts[best] += 1;
        }
        counts
    }

    #[test]
    fn surprise_thousand() {
        let plan = plan_negatives(Emotion::Surprise, 1000, &AuCorrelationMatrix::published(), 0.2).unwrap();
        assert_eq!(plan.uniform_total, 200);
        assert_eq!(plan.proportional_total, 800);
        assert_eq!(plan.sum(), 1000);
        let prop = |e: Emotion| plan.allocations.iter().find(|a| a.emotion == e).unwrap().proportional;
        assert_eq!(prop(Emotion::Fear), 444);
        assert_eq!(prop(Emotion::Anger), 178);
        assert_eq!(prop(Emotion::Sad), 89);
        assert_eq!(prop(Emotion::Disgust), 89);
        assert_eq!(prop(Emotion::Happy), 0);
        assert_eq!(prop(Emotion::Contempt), 0);
        assert_eq!(prop(Emotion::Neutral), 0);
        // 200 = 7 * 28 + 4: the four lowest-index others get 29.
        let uni: Vec<usize> = plan.allocations.iter().map(|a| a.uniform).collect();
        assert_eq!(uni, vec![29, 29, 29, 29, 28, 28, 28]);
        assert_eq!(greedy_quota(800, &[0, 0, 1, 5, 1, 2, 0]), vec![0, 0, 89, 444, 89, 178, 0]);
    }

    #[test]
    fn empty_plan() {
        let plan = plan_negatives(Emotion::Happy, 0, &AuCorrelationMatrix::published(), 0.2).unwrap();
        assert!(plan.allocations.iter().all(|a| a.count() == 0));
        assert_eq!(plan.allocations.len(), 7);
    }

    #[test]
    fn neutral_target_is_uniform() {
        let plan = plan_negatives(Emotion::Neutral, 700, &AuCorrelationMatrix::published(), 0.2).unwrap();
        assert!(plan.allocations.iter().all(|a| a.count() == 100));
        assert_eq!(plan.sum(), 700);
    }

    #[test]
    fn no_allocation_to_target() {
        for target in Emotion::ALL {
            let plan = plan_negatives(target, 333, &AuCorrelationMatrix::published(), 0.2).unwrap();
            assert!(plan.allocations.iter().all(|a| a.emotion != target));
            assert_eq!(plan.count_for(target), 0);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let m = AuCorrelationMatrix::published();
        assert!(matches!(plan_negatives(Emotion::Sad, 10, &m, 1.5), Err(SamplingError::InvalidFraction(_))));
        assert!(matches!(plan_negatives(Emotion::Sad, 10, &m, f64::NAN), Err(SamplingError::InvalidFraction(_))));
        assert_eq!(
            plan_negatives_checked(Emotion::Sad, -1, &m, 0.2),
            Err(SamplingError::NegativeTotal(-1))
        );
    }

    proptest! {
        #[test]
        fn sum_invariant(target in 0usize..8, total in 0usize..200_000, frac in 0.0f64..=1.0) {
            let plan = plan_negatives(Emotion::from_index(target).unwrap(), total, &AuCorrelationMatrix::published(), frac).unwrap();
            prop_assert_eq!(plan.sum(), total);
            prop_assert_eq!(plan.uniform_total + plan.proportional_total, total);
        }

        #[test]
        fn matches_greedy_oracle(total in 0usize..5000, weights in proptest::collection::vec(0u64..7, 7)) {
            prop_assert_eq!(largest_remainder(total, &weights), greedy_quota(total, &weights));
        }

        #[test]
        fn fully_uniform_within_one(target in 0usize..8, total in 0usize..10_000) {
            let plan = plan_negatives(Emotion::from_index(target).unwrap(), total, &AuCorrelationMatrix::published(), 1.0).unwrap();
            let counts: Vec<usize> = plan.allocations.iter().map(Allocation::count).collect();
            let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
            prop_assert!(hi - lo <= 1);
        }

        #[test]
        fn raising_correlation_does_not_shrink_allocation(
            target in 1usize..8,
            other in 1usize..8,
            total in 0usize..10_000,
            bump in 1u32..4,
        ) {
            prop_assume!(target != other);
            let base = AuCorrelationMatrix::published();
            let mut counts = *base.counts();
            counts[target - 1][other - 1] += bump;
            counts[other - 1][target - 1] += bump;
            let raised = AuCorrelationMatrix::from_counts(counts).unwrap();
            let t = Emotion::from_index(target).unwrap();
            let o = Emotion::from_index(other).unwrap();
            let before = plan_negatives(t, total, &base, 0.2).unwrap().count_for(o);
            let after = plan_negatives(t, total, &raised, 0.2).unwrap().count_for(o);
            prop_assert!(after + 1 >= before, "before {} after {}", before, after);
        }
    }
}
