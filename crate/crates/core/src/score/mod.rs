//! The Hilbert space L²₀(P) of mean-zero scores on a finite support.
//!
//! Functions are stored as their values on the support; the inner product is
//! ⟨f, g⟩ = E_P[f g]. Subspaces are held as explicit orthonormal bases.

mod tangent;

use serde::{Deserialize, Serialize};

use crate::dist::{DiscreteDistribution, DistId};
use crate::error::{Error, Result};

pub(crate) use tangent::gmm_bases;
pub use tangent::{gmm_tangent_basis, iv_tangent_bases, null_space};

/// Relative residual norm below which Gram–Schmidt drops a direction.
pub const DROP_TOL: f64 = 1e-9;

/// Absolute tolerance on E[g] for a score to count as mean-zero.
pub const MEAN_TOL: f64 = 1e-10;

/// An element of L²₀(P): one value per support point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreFunction {
    values: Vec<f64>,
    dist_id: DistId,
}

impl ScoreFunction {
    /// Wraps values, checking length and E[g] = 0.
    pub fn new(dist: &DiscreteDistribution, values: Vec<f64>) -> Result<Self> {
        if values.len() != dist.len() {
            return Err(Error::LengthMismatch {
                expected: dist.len(),
                got: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("score has non-finite values".into()));
        }
        let mean = dist.mean_of(&values);
        let scale = values.iter().fold(1.0f64, |a, v| a.max(v.abs()));
        if mean.abs() > MEAN_TOL * scale {
            return Err(Error::NotMeanZero { mean });
        }
        Ok(ScoreFunction {
            values,
            dist_id: dist.id(),
        })
    }

    /// Subtracts the P-mean so the result lies in L²₀(P).
    pub fn centered(dist: &DiscreteDistribution, mut values: Vec<f64>) -> Result<Self> {
        if values.len() != dist.len() {
            return Err(Error::LengthMismatch {
                expected: dist.len(),
                got: values.len(),
            });
        }
        let mean = dist.mean_of(&values);
        values.iter_mut().for_each(|v| *v -= mean);
        // second pass picks up the rounding left by the first
        let mean = dist.mean_of(&values);
        values.iter_mut().for_each(|v| *v -= mean);
        Ok(ScoreFunction {
            values,
            dist_id: dist.id(),
        })
    }

    pub fn zero(dist: &DiscreteDistribution) -> Self {
        ScoreFunction {
            values: vec![0.0; dist.len()],
            dist_id: dist.id(),
        }
    }

    pub(crate) fn from_raw(dist_id: DistId, values: Vec<f64>) -> Self {
        ScoreFunction { values, dist_id }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn dist_id(&self) -> DistId {
        self.dist_id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn scaled(&self, c: f64) -> Self {
        ScoreFunction::from_raw(self.dist_id, self.values.iter().map(|v| c * v).collect())
    }

    /// `self + c * other`.
    pub fn axpy(&self, c: f64, other: &ScoreFunction) -> Result<Self> {
        if self.dist_id != other.dist_id {
            return Err(Error::DistributionMismatch);
        }
        Ok(ScoreFunction::from_raw(
            self.dist_id,
            self.values.iter().zip(&other.values).map(|(a, b)| a + c * b).collect(),
        ))
    }

    pub fn add(&self, other: &ScoreFunction) -> Result<Self> {
        self.axpy(1.0, other)
    }

    pub fn sub(&self, other: &ScoreFunction) -> Result<Self> {
        self.axpy(-1.0, other)
    }

    /// Σ c_k f_k over functions attached to `dist`.
    pub fn combination(dist: &DiscreteDistribution, terms: &[(f64, &ScoreFunction)]) -> Result<Self> {
        let mut out = ScoreFunction::zero(dist);
        for (c, f) in terms {
            out = out.axpy(*c, f)?;
        }
        Ok(out)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |a, v| a.max(v.abs()))
    }
}

/// Which subspace of L²₀(P) a basis spans.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SubspaceLabel {
    #[serde(rename = "T")]
    T,
    #[serde(rename = "T_perp_cap_M")]
    TPerpCapM,
    #[serde(rename = "M_perp")]
    MPerp,
    #[serde(rename = "M")]
    M,
    #[serde(rename = "full")]
    Full,
    #[serde(rename = "span")]
    Span,
}

impl std::fmt::Display for SubspaceLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            SubspaceLabel::T => "T",
            SubspaceLabel::TPerpCapM => "T_perp_cap_M",
            SubspaceLabel::MPerp => "M_perp",
            SubspaceLabel::M => "M",
            SubspaceLabel::Full => "full",
            SubspaceLabel::Span => "span",
        };
        f.write_str(s)
    }
}

/// Orthonormal basis (under E_P[f g]) of a subspace of L²₀(P). May be empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubspaceBasis {
    basis: Vec<ScoreFunction>,
    dist_id: DistId,
    support_len: usize,
    label: SubspaceLabel,
}

impl SubspaceBasis {
    pub fn empty(dist: &DiscreteDistribution, label: SubspaceLabel) -> Self {
        SubspaceBasis {
            basis: Vec::new(),
            dist_id: dist.id(),
            support_len: dist.len(),
            label,
        }
    }

    pub fn elements(&self) -> &[ScoreFunction] {
        &self.basis
    }

    pub fn dim(&self) -> usize {
        self.basis.len()
    }

    pub fn label(&self) -> SubspaceLabel {
        self.label
    }

    pub fn dist_id(&self) -> DistId {
        self.dist_id
    }

    pub fn with_label(mut self, label: SubspaceLabel) -> Self {
        self.label = label;
        self
    }

    /// Σ_j a_j f_j for coordinates `a` in this basis.
    pub fn combine(&self, coords: &[f64]) -> Result<ScoreFunction> {
        if coords.len() > self.basis.len() {
            return Err(Error::LengthMismatch {
                expected: self.basis.len(),
                got: coords.len(),
            });
        }
        let mut out = vec![0.0; self.support_len];
        for (c, f) in coords.iter().zip(&self.basis) {
            for (o, v) in out.iter_mut().zip(f.values()) {
                *o += c * v;
            }
        }
        Ok(ScoreFunction::from_raw(self.dist_id, out))
    }
}

pub(crate) fn check_attached(dist: &DiscreteDistribution, f: &ScoreFunction) -> Result<()> {
    if f.dist_id != dist.id() || f.len() != dist.len() {
        return Err(Error::DistributionMismatch);
    }
    Ok(())
}

/// ⟨f, g⟩ = E_P[f g].
pub fn inner_product(dist: &DiscreteDistribution, f: &ScoreFunction, g: &ScoreFunction) -> Result<f64> {
    check_attached(dist, f)?;
    check_attached(dist, g)?;
    Ok(dist.mean_of_product(&f.values, &g.values))
}

pub fn norm(dist: &DiscreteDistribution, f: &ScoreFunction) -> Result<f64> {
    Ok(inner_product(dist, f, f)?.max(0.0).sqrt())
}

/// Var[g] under P (E[g²] for a mean-zero g, recomputed with its mean removed).
pub fn variance(dist: &DiscreteDistribution, g: &ScoreFunction) -> Result<f64> {
    check_attached(dist, g)?;
    let m = dist.mean_of(&g.values);
    let c: Vec<f64> = g.values.iter().map(|v| v - m).collect();
    Ok(dist.mean_of_product(&c, &c))
}

fn apply_sign_convention(v: &mut [f64]) {
    let max = v.iter().fold(0.0f64, |a, x| a.max(x.abs()));
    if let Some(first) = v.iter().find(|x| x.abs() > 1e-10 * max) {
        if *first < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
    }
}

/// Gram–Schmidt continuation: orthonormalizes `candidates` against `start`
/// (already orthonormal) and appends the survivors. `scale` is the reference
/// norm for the drop tolerance.
fn extend_orthonormal(
    dist: &DiscreteDistribution,
    start: &mut Vec<Vec<f64>>,
    candidates: impl IntoIterator<Item = Vec<f64>>,
    scale: f64,
) {
    let dot = |a: &[f64], b: &[f64]| dist.mean_of_product(a, b);
    for mut w in candidates {
        // two sweeps of modified Gram–Schmidt
        for _ in 0..2 {
            for q in start.iter() {
                let c = dot(&w, q);
                for (wi, qi) in w.iter_mut().zip(q) {
                    *wi -= c * qi;
                }
            }
        }
        let nrm = dot(&w, &w).max(0.0).sqrt();
        if nrm <= DROP_TOL * scale || nrm == 0.0 {
            continue;
        }
        w.iter_mut().for_each(|x| *x /= nrm);
        apply_sign_convention(&mut w);
        start.push(w);
    }
}

fn weighted_norm(dist: &DiscreteDistribution, v: &[f64]) -> f64 {
    dist.mean_of_product(v, v).max(0.0).sqrt()
}

/// Orthonormal basis of span(spanning), possibly empty.
pub(crate) fn orthonormalize(
    dist: &DiscreteDistribution,
    spanning: &[ScoreFunction],
    label: SubspaceLabel,
) -> Result<SubspaceBasis> {
    for f in spanning {
        check_attached(dist, f)?;
    }
    let scale = spanning
        .iter()
        .map(|f| weighted_norm(dist, &f.values))
        .fold(0.0, f64::max);
    let mut basis = Vec::new();
    if scale > 0.0 {
        extend_orthonormal(dist, &mut basis, spanning.iter().map(|f| f.values.clone()), scale);
    }
    Ok(SubspaceBasis {
        basis: basis
            .into_iter()
            .map(|v| ScoreFunction::from_raw(dist.id(), v))
            .collect(),
        dist_id: dist.id(),
        support_len: dist.len(),
        label,
    })
}

/// Modified Gram–Schmidt with re-orthogonalization; drops directions whose
/// residual norm falls below 1e-9 of the largest input norm.
pub fn orthonormal_basis(dist: &DiscreteDistribution, spanning: &[ScoreFunction]) -> Result<SubspaceBasis> {
    let b = orthonormalize(dist, spanning, SubspaceLabel::Span)?;
    if b.dim() == 0 {
        return Err(Error::EmptySpan);
    }
    Ok(b)
}

/// Σ_j ⟨g, f_j⟩ f_j.
pub fn project(dist: &DiscreteDistribution, g: &ScoreFunction, onto: &SubspaceBasis) -> Result<ScoreFunction> {
    check_attached(dist, g)?;
    if onto.dist_id != dist.id() {
        return Err(Error::DistributionMismatch);
    }
    let mut out = vec![0.0; g.len()];
    for f in &onto.basis {
        let c = dist.mean_of_product(&g.values, &f.values);
        for (o, v) in out.iter_mut().zip(&f.values) {
            *o += c * v;
        }
    }
    Ok(ScoreFunction::from_raw(dist.id(), out))
}

/// g − Π(g).
pub fn residual(dist: &DiscreteDistribution, g: &ScoreFunction, onto: &SubspaceBasis) -> Result<ScoreFunction> {
    g.sub(&project(dist, g, onto)?)
}

/// Orthonormal basis of the orthocomplement of `basis` in L²₀(P).
pub fn complement(dist: &DiscreteDistribution, basis: &SubspaceBasis, label: SubspaceLabel) -> Result<SubspaceBasis> {
    if basis.dist_id != dist.id() {
        return Err(Error::DistributionMismatch);
    }
    let p = dist.probs();
    let candidates: Vec<Vec<f64>> = (0..dist.len())
        .map(|s| {
            (0..dist.len())
                .map(|r| if r == s { 1.0 - p[s] } else { -p[s] })
                .collect()
        })
        .collect();
    let scale = candidates.iter().map(|c| weighted_norm(dist, c)).fold(0.0, f64::max);
    let mut all: Vec<Vec<f64>> = basis.basis.iter().map(|f| f.values.clone()).collect();
    let k = all.len();
    extend_orthonormal(dist, &mut all, candidates, scale);
    Ok(SubspaceBasis {
        basis: all
            .into_iter()
            .skip(k)
            .map(|v| ScoreFunction::from_raw(dist.id(), v))
            .collect(),
        dist_id: dist.id(),
        support_len: dist.len(),
        label,
    })
}

/// Orthonormal basis of (span `outer`) ⊖ (span `inner`), for `inner` ⊆ `outer`.
pub fn relative_complement(
    dist: &DiscreteDistribution,
    outer: &SubspaceBasis,
    inner: &SubspaceBasis,
    label: SubspaceLabel,
) -> Result<SubspaceBasis> {
    let residuals = outer
        .basis
        .iter()
        .map(|f| residual(dist, f, inner))
        .collect::<Result<Vec<_>>>()?;
    let mut all: Vec<Vec<f64>> = inner.basis.iter().map(|f| f.values.clone()).collect();
    let k = all.len();
    extend_orthonormal(dist, &mut all, residuals.into_iter().map(|f| f.values), 1.0);
    Ok(SubspaceBasis {
        basis: all
            .into_iter()
            .skip(k)
            .map(|v| ScoreFunction::from_raw(dist.id(), v))
            .collect(),
        dist_id: dist.id(),
        support_len: dist.len(),
        label,
    })
}

/// The three-way split L²₀ = T̄ ⊕ (T̄⊥ ∩ M̄) ⊕ M̄⊥. For a model without a
/// maintained hypothesis M̄ = L²₀ and `m_perp` is empty.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TangentBases {
    pub t: SubspaceBasis,
    pub t_perp_cap_m: SubspaceBasis,
    pub m_perp: SubspaceBasis,
}

impl TangentBases {
    /// g = Σ a_T f_T + Σ a_⊥ f_⊥ + Σ a_M⊥ f_M⊥ from coordinates in each basis.
    pub fn combine(&self, t: &[f64], t_perp_cap_m: &[f64], m_perp: &[f64]) -> Result<ScoreFunction> {
        let a = self.t.combine(t)?;
        let b = self.t_perp_cap_m.combine(t_perp_cap_m)?;
        let c = self.m_perp.combine(m_perp)?;
        a.add(&b)?.add(&c)
    }
}

/// Projections of g onto the three orthogonal pieces, with their variances.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecompositionReport {
    pub pi_t: ScoreFunction,
    pub pi_tperp_m: ScoreFunction,
    pub pi_mperp: ScoreFunction,
    /// Var[Π_T g], Var[Π_{T⊥∩M} g], Var[Π_{M⊥} g].
    pub variances: [f64; 3],
}

pub fn decompose_score(
    dist: &DiscreteDistribution,
    g: &ScoreFunction,
    bases: &TangentBases,
) -> Result<DecompositionReport> {
    let pi_t = project(dist, g, &bases.t)?;
    let pi_tperp_m = project(dist, g, &bases.t_perp_cap_m)?;
    let pi_mperp = project(dist, g, &bases.m_perp)?;
    let variances = [
        variance(dist, &pi_t)?,
        variance(dist, &pi_tperp_m)?,
        variance(dist, &pi_mperp)?,
    ];
    Ok(DecompositionReport {
        pi_t,
        pi_tperp_m,
        pi_mperp,
        variances,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::make_distribution;
    use proptest::prelude::*;

    fn five_point() -> DiscreteDistribution {
        make_distribution(
            vec![vec![-2.0], vec![-1.0], vec![0.0], vec![1.0], vec![2.0]],
            vec![0.1, 0.2, 0.4, 0.2, 0.1],
        )
        .unwrap()
    }

    fn x(d: &DiscreteDistribution) -> ScoreFunction {
        ScoreFunction::new(d, d.coordinate(0)).unwrap()
    }

    fn x2c(d: &DiscreteDistribution) -> ScoreFunction {
        ScoreFunction::new(d, d.map(|p| p[0] * p[0] - 1.2)).unwrap()
    }

    #[test]
    fn inner_products_by_hand() {
        let d = five_point();
        assert!((inner_product(&d, &x(&d), &x(&d)).unwrap() - 1.2).abs() < 1e-15);
        assert_eq!(inner_product(&d, &x(&d), &ScoreFunction::zero(&d)).unwrap(), 0.0);
        assert!(inner_product(&d, &x(&d), &x2c(&d)).unwrap().abs() < 1e-15);
    }

    #[test]
    fn mismatched_distribution_is_rejected() {
        let d = five_point();
        let other = d.with_probs(vec![1.0, 1.0, 1.0, 1.0, 1.0]).unwrap();
        let g = ScoreFunction::new(&other, other.coordinate(0)).unwrap();
        assert_eq!(inner_product(&d, &x(&d), &g), Err(Error::DistributionMismatch));
    }

    #[test]
    fn non_centered_values_are_rejected() {
        let d = five_point();
        assert!(matches!(
            ScoreFunction::new(&d, vec![1.0; 5]),
            Err(Error::NotMeanZero { .. })
        ));
    }

    #[test]
    fn rank_one_span() {
        let d = five_point();
        let b = orthonormal_basis(&d, &[x(&d), x(&d).scaled(2.0)]).unwrap();
        assert_eq!(b.dim(), 1);
        let expect = x(&d).scaled(1.0 / 1.2f64.sqrt());
        // sign convention: first coordinate (x = -2) positive
        for (a, e) in b.elements()[0].values().iter().zip(expect.values()) {
            assert!((a + e).abs() < 1e-14);
        }
    }

    #[test]
    fn two_dimensional_span_and_empty_span() {
        let d = five_point();
        let b = orthonormal_basis(&d, &[x(&d), x2c(&d)]).unwrap();
        assert_eq!(b.dim(), 2);
        assert_eq!(
            orthonormal_basis(&d, &[ScoreFunction::zero(&d)]).unwrap_err(),
            Error::EmptySpan
        );
    }

    #[test]
    fn projections_by_hand() {
        let d = five_point();
        let span_x = orthonormal_basis(&d, &[x(&d)]).unwrap();
        let p = project(&d, &x(&d), &span_x).unwrap();
        assert!(p
            .values()
            .iter()
            .zip(x(&d).values())
            .all(|(a, b)| (a - b).abs() < 1e-12));
        let p = project(&d, &x2c(&d), &span_x).unwrap();
        assert!(p.max_abs() < 1e-15);
        let sum = x(&d).add(&x2c(&d)).unwrap();
        let p = project(&d, &sum, &span_x).unwrap();
        assert!(p
            .values()
            .iter()
            .zip(x(&d).values())
            .all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn complement_fills_the_space() {
        let d = five_point();
        let span_x = orthonormal_basis(&d, &[x(&d)]).unwrap();
        let c = complement(&d, &span_x, SubspaceLabel::Full).unwrap();
        assert_eq!(c.dim(), 3);
        for f in c.elements() {
            assert!(inner_product(&d, f, &x(&d)).unwrap().abs() < 1e-12);
            assert!(d.mean_of(f.values()).abs() < 1e-12);
        }
    }

    fn random_score(d: &DiscreteDistribution, raw: &[f64]) -> ScoreFunction {
        ScoreFunction::centered(d, raw.to_vec()).unwrap()
    }

    proptest! {
        #[test]
        fn projection_is_idempotent_and_self_adjoint(
            a in proptest::collection::vec(-3.0f64..3.0, 5),
            b in proptest::collection::vec(-3.0f64..3.0, 5),
            c in proptest::collection::vec(-3.0f64..3.0, 5),
        ) {
            let d = five_point();
            let basis = orthonormalize(&d, &[random_score(&d, &c), x(&d)], SubspaceLabel::Span).unwrap();
            let f = random_score(&d, &a);
            let g = random_score(&d, &b);
            let pf = project(&d, &f, &basis).unwrap();
            let ppf = project(&d, &pf, &basis).unwrap();
            for (u, v) in pf.values().iter().zip(ppf.values()) {
                prop_assert!((u - v).abs() < 1e-10);
            }
            let pg = project(&d, &g, &basis).unwrap();
            let lhs = inner_product(&d, &pf, &g).unwrap();
            let rhs = inner_product(&d, &f, &pg).unwrap();
            prop_assert!((lhs - rhs).abs() < 1e-10);
        }
    }
}
