//! Random frame subsets with bounded gaps.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Constraint on which k-of-n frame selections are acceptable.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GapRule {
    pub n: usize,
    pub k: usize,
    /// Maximum number of consecutive omitted frames between kept frames.
    pub max_gap: usize,
    /// Also bound the omissions before the first and after the last kept frame.
    pub bound_edges: bool,
}

impl GapRule {
    pub fn new(n: usize, k: usize, max_gap: usize) -> Self {
        Self {
            n,
            k,
            max_gap,
            bound_edges: true,
        }
    }

    pub fn is_feasible(&self) -> bool {
        if self.k == 0 || self.k > self.n {
            return false;
        }
        // Unbounded edges can absorb any surplus.
        !self.bound_edges || self.k + self.max_gap * (self.k + 1) >= self.n
    }

    fn check(&self) -> Result<()> {
        if self.is_feasible() {
            Ok(())
        } else {
            Err(Error::InfeasibleSubsample {
                total: self.n,
                keep: self.k,
                max_gap: self.max_gap,
            })
        }
    }

    /// Whether a strictly increasing index list satisfies the rule.
    pub fn accepts(&self, indices: &[usize]) -> bool {
        if indices.len() != self.k || indices.iter().any(|&i| i >= self.n) {
            return false;
        }
        if indices.windows(2).any(|w| w[1] <= w[0] || w[1] - w[0] - 1 > self.max_gap) {
            return false;
        }
        if self.bound_edges {
            let before = indices[0];
            let after = self.n - 1 - indices[self.k - 1];
            if before > self.max_gap || after > self.max_gap {
                return false;
            }
        }
        true
    }

    /// Upper bound on each of the k + 1 gaps (before, between..., after).
    fn gap_limit(&self, slot: usize) -> usize {
        let edge = slot == 0 || slot == self.k;
        if edge && !self.bound_edges {
            self.n - self.k
        } else {
            self.max_gap
        }
    }

    /// `ways[slot][s]`: number of ways to fill gaps `slot..=k` with `s` omissions.
    fn count_table(&self) -> Vec<Vec<f64>> {
        let omit = self.n - self.k;
        let mut ways = vec![vec![0.0; omit + 1]; self.k + 2];
        ways[self.k + 1][0] = 1.0;
        for slot in (0..=self.k).rev() {
            let limit = self.gap_limit(slot);
            for s in 0..=omit {
                ways[slot][s] = (0..=limit.min(s)).map(|g| ways[slot + 1][s - g]).sum();
            }
        }
        ways
    }

    /// Number of valid selections (exact while it fits in an f64 mantissa).
    pub fn count_valid(&self) -> f64 {
        if !self.is_feasible() {
            return 0.0;
        }
        self.count_table()[0][self.n - self.k]
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sampler {
    /// Draws gap sizes sequentially from exact counts; uniform over valid sets.
    #[default]
    Exact,
    /// Uniform k-subsets, rejected until valid. Only practical when valid sets are common.
    Rejection,
}

/// Uniformly random valid selection, sorted ascending.
pub fn subsample_indices<R: Rng + ?Sized>(rule: &GapRule, sampler: Sampler, rng: &mut R) -> Result<Vec<usize>> {
    rule.check()?;
    match sampler {
        Sampler::Exact => Ok(sample_exact(rule, rng)),
        Sampler::Rejection => sample_rejection(rule, rng),
    }
}

fn sample_exact<R: Rng + ?Sized>(rule: &GapRule, rng: &mut R) -> Vec<usize> {
    let ways = rule.count_table();
    let mut remaining = rule.n - rule.k;
    let mut indices = Vec::with_capacity(rule.k);
    let mut pos = 0usize;
    for slot in 0..=rule.k {
        let limit = rule.gap_limit(slot).min(remaining);
        let total = ways[slot][remaining];
        let mut target = rng.gen::<f64>() * total;
        let mut gap = limit;
        for g in 0..=limit {
            let w = ways[slot + 1][remaining - g];
            if target < w {
                gap = g;
                break;
            }
            target -= w;
        }
        // Guard against rounding drift landing on a zero-weight gap.
        while ways[slot + 1][remaining - gap] == 0.0 {
            gap -= 1;
        }
        remaining -= gap;
        pos += gap;
        if slot < rule.k {
            indices.push(pos);
            pos += 1;
        }
    }
    indices
}

const MAX_REJECTIONS: usize = 10_000_000;

fn sample_rejection<R: Rng + ?Sized>(rule: &GapRule, rng: &mut R) -> Result<Vec<usize>> {
    for _ in 0..MAX_REJECTIONS {
        let mut idx = sample(rng, rule.n, rule.k).into_vec();
        idx.sort_unstable();
        if rule.accepts(&idx) {
            return Ok(idx);
        }
    }
    Err(Error::Invalid(format!(
        "rejection sampler found no valid selection for {rule:?} in {MAX_REJECTIONS} draws; use the exact sampler"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeSet;

    fn all_subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
        (0u32..1 << n)
            .filter(|m| m.count_ones() as usize == k)
            .map(|m| (0..n).filter(|i| m & (1 << i) != 0).collect())
            .collect()
    }

    #[test]
    fn full_selection_is_identity() {
        let rule = GapRule::new(5, 5, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(subsample_indices(&rule, Sampler::Exact, &mut rng).unwrap(), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn infeasible_is_an_error() {
        let rule = GapRule::new(20, 3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            subsample_indices(&rule, Sampler::Exact, &mut rng),
            Err(Error::InfeasibleSubsample { total: 20, keep: 3, max_gap: 2 })
        ));
    }

    #[test]
    fn count_matches_enumeration() {
        for (n, k, g) in [(6, 3, 2), (8, 5, 2), (10, 6, 1), (9, 4, 2)] {
            for edges in [true, false] {
                let rule = GapRule {
                    bound_edges: edges,
                    ..GapRule::new(n, k, g)
                };
                let brute = all_subsets(n, k).iter().filter(|s| rule.accepts(s)).count();
                assert_eq!(rule.count_valid(), brute as f64, "{rule:?}");
            }
        }
    }

    #[test]
    fn full_parameters_satisfy_gap_rule() {
        let rule = GapRule::new(150, 86, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(462019);
        for sampler in [Sampler::Exact, Sampler::Rejection] {
            for _ in 0..20 {
                let idx = subsample_indices(&rule, sampler, &mut rng).unwrap();
                assert_eq!(idx.len(), 86);
                assert!(idx[0] <= 2 && idx[85] >= 147);
                assert!(idx.windows(2).all(|w| w[1] > w[0] && w[1] - w[0] <= 3));
            }
        }
    }

    #[test]
    fn exact_sampler_is_roughly_uniform() {
        let rule = GapRule::new(6, 3, 2);
        let valid: BTreeSet<Vec<usize>> = all_subsets(6, 3).into_iter().filter(|s| rule.accepts(s)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut hits = std::collections::BTreeMap::new();
        let draws = 20_000;
        for _ in 0..draws {
            *hits.entry(subsample_indices(&rule, Sampler::Exact, &mut rng).unwrap()).or_insert(0usize) += 1;
        }
        assert_eq!(hits.keys().cloned().collect::<BTreeSet<_>>(), valid);
        let expected = draws as f64 / valid.len() as f64;
        for &c in hits.values() {
            assert!((c as f64 - expected).abs() < 5.0 * expected.sqrt());
        }
    }
}
