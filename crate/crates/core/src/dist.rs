//! Finite-support probability distributions.
//!
//! Every function in L²(P) becomes a vector with one entry per support point,
//! so expectations and inner products are exact finite sums.

use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fingerprint of a distribution; score functions carry it to detect mixing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DistId(pub u64);

/// Probability mass function on a finite set of distinct points in R^d.
#[derive(Debug, Clone)]
pub struct DiscreteDistribution {
    support: Arc<Vec<Vec<f64>>>,
    probs: Vec<f64>,
    cdf: Vec<f64>,
    id: DistId,
}

/// JSON literal `{"support": [[...], ...], "probs": [...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistributionLiteral {
    pub support: Vec<Vec<f64>>,
    pub probs: Vec<f64>,
}

/// Builds a validated, normalized distribution.
pub fn make_distribution(support: Vec<Vec<f64>>, probs: Vec<f64>) -> Result<DiscreteDistribution> {
    DiscreteDistribution::new(support, probs)
}

impl DiscreteDistribution {
    pub fn new(support: Vec<Vec<f64>>, probs: Vec<f64>) -> Result<Self> {
        if support.len() != probs.len() {
            return Err(Error::LengthMismatch {
                expected: support.len(),
                got: probs.len(),
            });
        }
        if support.len() < 2 {
            return Err(Error::InvalidSupport(format!(
                "need at least 2 support points, got {}",
                support.len()
            )));
        }
        let dim = support[0].len();
        if dim == 0 {
            return Err(Error::InvalidSupport("points must have dimension >= 1".into()));
        }
        let mut seen = HashMap::with_capacity(support.len());
        for (i, point) in support.iter().enumerate() {
            if point.len() != dim {
                return Err(Error::LengthMismatch {
                    expected: dim,
                    got: point.len(),
                });
            }
            if point.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidSupport(format!("point {i} has a non-finite coordinate")));
            }
            if seen.insert(point_key(point), i).is_some() {
                return Err(Error::DuplicateSupportPoint { index: i });
            }
        }
        Self::from_checked_support(Arc::new(support), probs)
    }

    fn from_checked_support(support: Arc<Vec<Vec<f64>>>, probs: Vec<f64>) -> Result<Self> {
        for (i, &p) in probs.iter().enumerate() {
            if !(p.is_finite() && p > 0.0) {
                return Err(Error::ZeroOrNegativeProb { index: i, value: p });
            }
        }
        let total = compensated_sum(probs.iter().copied());
        let probs: Vec<f64> = probs.iter().map(|p| p / total).collect();
        if let Some(i) = probs.iter().position(|&p| p <= 0.0) {
            return Err(Error::ZeroOrNegativeProb {
                index: i,
                value: probs[i],
            });
        }
        let mut cdf = Vec::with_capacity(probs.len());
        let mut acc = Neumaier::default();
        for &p in &probs {
            acc.add(p);
            cdf.push(acc.value());
        }
        let id = fingerprint(&support, &probs);
        Ok(DiscreteDistribution {
            support,
            probs,
            cdf,
            id,
        })
    }

    /// Same support, new weights (validated and normalized).
    pub fn with_probs(&self, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != self.len() {
            return Err(Error::LengthMismatch {
                expected: self.len(),
                got: probs.len(),
            });
        }
        Self::from_checked_support(Arc::clone(&self.support), probs)
    }

    pub fn from_literal(lit: &DistributionLiteral) -> Result<Self> {
        Self::new(lit.support.clone(), lit.probs.clone())
    }

    pub fn to_literal(&self) -> DistributionLiteral {
        DistributionLiteral {
            support: self.support.as_ref().clone(),
            probs: self.probs.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.support[0].len()
    }

    pub fn support(&self) -> &[Vec<f64>] {
        &self.support
    }

    pub fn point(&self, s: usize) -> &[f64] {
        &self.support[s]
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn id(&self) -> DistId {
        self.id
    }

    /// Index of the support point equal to `x`, if any.
    pub fn index_of(&self, x: &[f64]) -> Option<usize> {
        self.support.iter().position(|p| p.as_slice() == x)
    }

    /// E[f] for a scalar function given by its values on the support.
    pub fn mean_of(&self, f: &[f64]) -> f64 {
        debug_assert_eq!(f.len(), self.len());
        compensated_dot(&self.probs, f)
    }

    /// E[f g] for two scalar functions.
    pub fn mean_of_product(&self, f: &[f64], g: &[f64]) -> f64 {
        let mut acc = Neumaier::default();
        for ((&p, &a), &b) in self.probs.iter().zip(f).zip(g) {
            let fg = a * b;
            let fg_err = a.mul_add(b, -fg);
            let prod = p * fg;
            acc.add(prod);
            acc.add(p.mul_add(fg, -prod));
            acc.add(p * fg_err);
        }
        acc.value()
    }

    /// Values of one coordinate of the support points.
    pub fn coordinate(&self, j: usize) -> Vec<f64> {
        self.support.iter().map(|x| x[j]).collect()
    }

    /// Evaluates `f` on every support point.
    pub fn map<F: FnMut(&[f64]) -> f64>(&self, mut f: F) -> Vec<f64> {
        self.support.iter().map(|x| f(x)).collect()
    }

    /// Index drawn by inverse CDF from a uniform `u` in [0, 1).
    fn index_for(&self, u: f64) -> usize {
        let k = self.cdf.partition_point(|&c| c <= u);
        k.min(self.len() - 1)
    }
}

/// E[f] for a vector-valued function: one value-vector per support point.
pub fn expectation(dist: &DiscreteDistribution, f: &[Vec<f64>]) -> Result<Vec<f64>> {
    if f.len() != dist.len() {
        return Err(Error::LengthMismatch {
            expected: dist.len(),
            got: f.len(),
        });
    }
    let width = f[0].len();
    if let Some(bad) = f.iter().find(|v| v.len() != width) {
        return Err(Error::LengthMismatch {
            expected: width,
            got: bad.len(),
        });
    }
    Ok((0..width)
        .map(|j| {
            let col: Vec<f64> = f.iter().map(|v| v[j]).collect();
            dist.mean_of(&col)
        })
        .collect())
}

/// A sample of `n` observations drawn from a finite support.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    dim: usize,
    rows: Vec<f64>,
}

impl Dataset {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map(|r| r.len()).unwrap_or(0);
        if dim == 0 {
            return Err(Error::InvalidArgument(
                "dataset needs at least one non-empty row".into(),
            ));
        }
        let mut flat = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            if r.len() != dim {
                return Err(Error::LengthMismatch {
                    expected: dim,
                    got: r.len(),
                });
            }
            flat.extend_from_slice(r);
        }
        Ok(Dataset { dim, rows: flat })
    }

    /// Support points repeated `counts[s]` times, in support order.
    pub fn replicate(dist: &DiscreteDistribution, counts: &[usize]) -> Result<Self> {
        if counts.len() != dist.len() {
            return Err(Error::LengthMismatch {
                expected: dist.len(),
                got: counts.len(),
            });
        }
        let mut rows = Vec::new();
        for (s, &c) in counts.iter().enumerate() {
            for _ in 0..c {
                rows.extend_from_slice(dist.point(s));
            }
        }
        if rows.is_empty() {
            return Err(Error::InvalidArgument("replication counts are all zero".into()));
        }
        Ok(Dataset { dim: dist.dim(), rows })
    }

    /// Rows `dist.point(i)` for each index, in order.
    pub fn from_indices(dist: &DiscreteDistribution, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::InvalidArgument("no indices".into()));
        }
        let mut rows = Vec::with_capacity(indices.len() * dist.dim());
        for &i in indices {
            if i >= dist.len() {
                return Err(Error::InvalidArgument(format!("index {i} outside the support")));
            }
            rows.extend_from_slice(dist.point(i));
        }
        Ok(Dataset { dim: dist.dim(), rows })
    }

    pub fn n(&self) -> usize {
        self.rows.len() / self.dim
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.rows.chunks_exact(self.dim)
    }

    /// Reorders rows by `perm` (a permutation of 0..n).
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut rows = Vec::with_capacity(self.rows.len());
        for &i in perm {
            rows.extend_from_slice(self.row(i));
        }
        Dataset { dim: self.dim, rows }
    }

    /// Distinct rows with their empirical frequencies, in order of first appearance.
    pub fn tabulate(&self) -> Vec<(Vec<f64>, f64)> {
        let mut slot: HashMap<Vec<u64>, usize> = HashMap::new();
        let mut out: Vec<(Vec<f64>, usize)> = Vec::new();
        for r in self.rows() {
            match slot.get(&point_key(r)) {
                Some(&k) => out[k].1 += 1,
                None => {
                    slot.insert(point_key(r), out.len());
                    out.push((r.to_vec(), 1));
                }
            }
        }
        let n = self.n() as f64;
        out.into_iter().map(|(x, c)| (x, c as f64 / n)).collect()
    }
}

/// `n` i.i.d. categorical draws by inverse CDF; deterministic in `seed`.
pub fn draw_sample(dist: &DiscreteDistribution, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::InvalidArgument("sample size must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(n * dist.dim());
    for _ in 0..n {
        let u: f64 = rng.random();
        rows.extend_from_slice(dist.point(dist.index_for(u)));
    }
    Ok(Dataset { dim: dist.dim(), rows })
}

/// Support indices of `n` draws, same stream as [`draw_sample`].
pub fn draw_indices(dist: &DiscreteDistribution, n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| dist.index_for(rng.random())).collect()
}

/// Counter-based seed for stream `counter` under `master` (SplitMix64 finalizer).
pub fn derive_seed(master: u64, counter: u64) -> u64 {
    splitmix64(splitmix64(master) ^ counter.wrapping_mul(0xD1B5_4A32_D192_ED03))
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn point_key(x: &[f64]) -> Vec<u64> {
    // -0.0 and 0.0 are the same point
    x.iter().map(|v| (v + 0.0).to_bits()).collect()
}

fn fingerprint(support: &[Vec<f64>], probs: &[f64]) -> DistId {
    let mut h = DefaultHasher::new();
    for x in support {
        point_key(x).hash(&mut h);
    }
    for p in probs {
        p.to_bits().hash(&mut h);
    }
    DistId(h.finish())
}

/// Neumaier's compensated accumulator.
#[derive(Debug, Default, Clone, Copy)]
pub struct Neumaier {
    sum: f64,
    comp: f64,
}

impl Neumaier {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

pub fn compensated_sum<I: IntoIterator<Item = f64>>(xs: I) -> f64 {
    let mut acc = Neumaier::default();
    for x in xs {
        acc.add(x);
    }
    acc.value()
}

/// Dot product with exact products (FMA residuals) and compensated accumulation.
pub fn compensated_dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = Neumaier::default();
    for (&x, &y) in a.iter().zip(b) {
        let p = x * y;
        acc.add(p);
        acc.add(x.mul_add(y, -p));
    }
    acc.value()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn five_point() -> DiscreteDistribution {
        make_distribution(
            vec![vec![-2.0], vec![-1.0], vec![0.0], vec![1.0], vec![2.0]],
            vec![0.1, 0.2, 0.4, 0.2, 0.1],
        )
        .unwrap()
    }

    #[test]
    fn symmetric_distribution_has_zero_mean() {
        let d = five_point();
        let f: Vec<Vec<f64>> = d.support().to_vec();
        assert_eq!(expectation(&d, &f).unwrap(), vec![0.0]);
    }

    #[test]
    fn rejects_zero_probability() {
        let err = make_distribution(vec![vec![0.0], vec![1.0], vec![2.0]], vec![0.5, 0.5, 0.0]).unwrap_err();
        assert!(matches!(err, Error::ZeroOrNegativeProb { index: 2, .. }));
    }

    #[test]
    fn rejects_duplicates_and_length_mismatch() {
        let err = make_distribution(vec![vec![1.0], vec![1.0]], vec![0.5, 0.5]).unwrap_err();
        assert_eq!(err, Error::DuplicateSupportPoint { index: 1 });
        let err = make_distribution(vec![vec![1.0], vec![2.0]], vec![1.0]).unwrap_err();
        assert!(matches!(err, Error::LengthMismatch { .. }));
        let err = make_distribution(vec![vec![1.0]], vec![1.0]).unwrap_err();
        assert!(matches!(err, Error::InvalidSupport(_)));
    }

    #[test]
    fn normalizes_weights() {
        let d = make_distribution(vec![vec![0.0], vec![1.0], vec![2.0]], vec![1.0, 2.0, 2.0]).unwrap();
        assert_eq!(d.probs(), &[0.2, 0.4, 0.4]);
    }

    #[test]
    fn even_moments_by_hand() {
        let d = five_point();
        let sq: Vec<Vec<f64>> = d.support().iter().map(|x| vec![x[0].powi(2), x[0].powi(4)]).collect();
        let m = expectation(&d, &sq).unwrap();
        assert!((m[0] - 1.2).abs() < 1e-15);
        assert!((m[1] - 3.6).abs() < 1e-15);
    }

    #[test]
    fn expectation_length_mismatch() {
        let d = five_point();
        assert!(matches!(
            expectation(&d, &[vec![1.0]]),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn near_degenerate_mass_draws_dominant_point() {
        let eps = 1e-9;
        let d = make_distribution(vec![vec![3.0], vec![4.0]], vec![1.0 - eps, eps]).unwrap();
        let s = draw_sample(&d, 1, 11).unwrap();
        assert_eq!(s.row(0), &[3.0]);
    }

    #[test]
    fn sampling_is_deterministic_and_seed_sensitive() {
        let d = five_point();
        assert_eq!(draw_sample(&d, 64, 3).unwrap(), draw_sample(&d, 64, 3).unwrap());
        assert_ne!(draw_sample(&d, 64, 3).unwrap(), draw_sample(&d, 64, 4).unwrap());
        assert!(draw_sample(&d, 0, 1).is_err());
    }

    #[test]
    fn empirical_frequencies_within_binomial_band() {
        let d = five_point();
        let n = 1_000_000;
        let idx = draw_indices(&d, n, 7);
        let mut counts = vec![0usize; d.len()];
        for i in idx {
            counts[i] += 1;
        }
        for (s, &c) in counts.iter().enumerate() {
            let p = d.probs()[s];
            let freq = c as f64 / n as f64;
            assert!(
                (freq - p).abs() < 4.0 * (p * (1.0 - p) / n as f64).sqrt(),
                "s={s} freq={freq}"
            );
        }
    }

    #[test]
    fn tabulate_counts_rows() {
        let d = five_point();
        let data = Dataset::replicate(&d, &[1, 2, 4, 2, 1]).unwrap();
        let tab = data.tabulate();
        assert_eq!(tab.len(), 5);
        for ((x, w), p) in tab.iter().zip(d.probs()) {
            assert!((w - p).abs() < 1e-15, "{x:?}");
        }
    }

    #[test]
    fn derived_seeds_differ() {
        let a: Vec<u64> = (0..100).map(|r| derive_seed(42, r)).collect();
        let mut b = a.clone();
        b.sort_unstable();
        b.dedup();
        assert_eq!(b.len(), 100);
        assert_ne!(derive_seed(1, 0), derive_seed(2, 0));
    }
}
