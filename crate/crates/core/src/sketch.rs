//! Mergeable log-bucketed quantile sketch with bounded relative error.
//!
//! Values are counted in geometric buckets `(γ^(i-1), γ^i]` with
//! `γ = (1 + α) / (1 − α)`, mirrored for negative values, plus an exact zero
//! bucket. Counts are integers, so merging shards is exactly associative and
//! commutative: any merge order yields the same answers as a single pass.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

const MIN_MAGNITUDE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileSketch {
    relative_accuracy: f64,
    gamma_ln: f64,
    positive: BTreeMap<i32, u64>,
    negative: BTreeMap<i32, u64>,
    zeros: u64,
    count: u64,
    min: f64,
    max: f64,
}

impl QuantileSketch {
    pub fn new(relative_accuracy: f64) -> Result<Self> {
        ensure(relative_accuracy > 0.0 && relative_accuracy < 1.0, || {
            format!("relative accuracy {relative_accuracy} outside (0, 1)")
        })?;
        let gamma = (1.0 + relative_accuracy) / (1.0 - relative_accuracy);
        Ok(Self {
            relative_accuracy,
            gamma_ln: gamma.ln(),
            positive: BTreeMap::new(),
            negative: BTreeMap::new(),
            zeros: 0,
            count: 0,
            min: f64::INFINITY,
            max: f64::NEG_INFINITY,
        })
    }

    pub fn relative_accuracy(&self) -> f64 {
        self.relative_accuracy
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn min(&self) -> f64 {
        self.min
    }

    pub fn max(&self) -> f64 {
        self.max
    }

    fn bucket(&self, magnitude: f64) -> i32 {
        (magnitude.ln() / self.gamma_ln).ceil() as i32
    }

    fn representative(&self, bucket: i32) -> f64 {
        let gamma = self.gamma_ln.exp();
        2.0 * (self.gamma_ln * bucket as f64).exp() / (gamma + 1.0)
    }

    pub fn insert(&mut self, value: f64) {
        if !value.is_finite() {
            return;
        }
        self.count += 1;
        self.min = self.min.min(value);
        self.max = self.max.max(value);
        if value.abs() < MIN_MAGNITUDE {
            self.zeros += 1;
        } else if value > 0.0 {
            *self.positive.entry(self.bucket(value)).or_default() += 1;
        } else {
            *self.negative.entry(self.bucket(-value)).or_default() += 1;
        }
    }

    pub fn merge(&mut self, other: &QuantileSketch) -> Result<()> {
        ensure(self.relative_accuracy == other.relative_accuracy, || {
            "cannot merge sketches with different accuracy".into()
        })?;
        for (k, c) in &other.positive {
            *self.positive.entry(*k).or_default() += c;
        }
        for (k, c) in &other.negative {
            *self.negative.entry(*k).or_default() += c;
        }
        self.zeros += other.zeros;
        self.count += other.count;
        self.min = self.min.min(other.min);
        self.max = self.max.max(other.max);
        Ok(())
    }

    /// Nearest-rank quantile: the value at 1-based rank `ceil(q · n)`,
    /// approximated by its bucket representative and clamped to `[min, max]`.
    pub fn quantile(&self, q: f64) -> Option<f64> {
        if self.count == 0 {
            return None;
        }
        let rank = nearest_rank(q, self.count as usize) as u64;
        let mut seen = 0u64;
        // Ascending value order: most negative first (largest negative bucket index).
        for (k, c) in self.negative.iter().rev() {
            seen += c;
            if seen >= rank {
                return Some((-self.representative(*k)).clamp(self.min, self.max));
            }
        }
        seen += self.zeros;
        if seen >= rank {
            return Some(0.0f64.clamp(self.min, self.max));
        }
        for (k, c) in &self.positive {
            seen += c;
            if seen >= rank {
                return Some(self.representative(*k).clamp(self.min, self.max));
            }
        }
        Some(self.max)
    }
}

/// 1-based nearest rank `ceil(q · n)`, clamped to `[1, n]`.
pub fn nearest_rank(q: f64, n: usize) -> usize {
    // Guard against q·n landing a hair above an integer through float error.
    let raw = q * n as f64;
    let rounded = raw.round();
    let r = if (raw - rounded).abs() < 1e-9 { rounded } else { raw.ceil() };
    (r as usize).clamp(1, n.max(1))
}

/// Exact nearest-rank quantile of a slice (selection, O(n)).
pub fn exact_quantile(values: &[f32], q: f64) -> Option<f32> {
    if values.is_empty() {
        return None;
    }
    let rank = nearest_rank(q, values.len());
    let mut buf = values.to_vec();
    let (_, v, _) = buf.select_nth_unstable_by(rank - 1, |a, b| a.total_cmp(b));
    Some(*v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn nearest_rank_hundred() {
        let v: Vec<f32> = (1..=100).map(|x| x as f32).collect();
        assert_eq!(exact_quantile(&v, 0.99), Some(99.0));
        assert_eq!(exact_quantile(&v, 0.5), Some(50.0));
        assert_eq!(exact_quantile(&v, 0.001), Some(1.0));
    }

    #[test]
    fn sketch_constant() {
        let mut s = QuantileSketch::new(0.01).unwrap();
        for _ in 0..50 {
            s.insert(3.5);
        }
        for q in [0.01, 0.5, 0.99] {
            assert_eq!(s.quantile(q), Some(3.5));
        }
    }

    #[test]
    fn sketch_relative_error_bound() {
        let mut s = QuantileSketch::new(0.01).unwrap();
        let values: Vec<f32> = (0..5000).map(|i| ((i * 7919) % 5000) as f32 * 0.37 - 300.0).collect();
        for v in &values {
            s.insert(*v as f64);
        }
        for q in [0.05, 0.25, 0.5, 0.9, 0.99] {
            let exact = exact_quantile(&values, q).unwrap() as f64;
            let approx = s.quantile(q).unwrap();
            assert!((approx - exact).abs() <= 0.01 * exact.abs() + 1e-9, "q={q}: {approx} vs {exact}");
        }
    }

    proptest! {
        #[test]
        fn shard_merge_matches_single_pass(values in prop::collection::vec(-1e3f64..1e3, 1..400), cut1 in 0usize..400, cut2 in 0usize..400) {
            let n = values.len();
            let (a, b) = (cut1.min(n), cut2.min(n));
            let (lo, hi) = (a.min(b), a.max(b));
            let build = |vals: &[f64]| {
                let mut s = QuantileSketch::new(0.02).unwrap();
                vals.iter().for_each(|v| s.insert(*v));
                s
            };
            let single = build(&values);
            let (s1, s2, s3) = (build(&values[..lo]), build(&values[lo..hi]), build(&values[hi..]));
            let mut left = s1.clone();
            left.merge(&s2).unwrap();
            left.merge(&s3).unwrap();
            let mut right = s2.clone();
            right.merge(&s3).unwrap();
            let mut right_total = s1.clone();
            right_total.merge(&right).unwrap();
            let mut reversed = s3.clone();
            reversed.merge(&s1).unwrap();
            reversed.merge(&s2).unwrap();
            for q in [0.01, 0.3, 0.5, 0.99] {
                let expect = single.quantile(q);
                prop_assert_eq!(left.quantile(q), expect);
                prop_assert_eq!(right_total.quantile(q), expect);
                prop_assert_eq!(reversed.quantile(q), expect);
            }
        }
    }
}
