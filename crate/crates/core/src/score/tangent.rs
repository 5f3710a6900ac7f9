//! Tangent spaces of moment-restriction models on a finite support.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, SymmetricEigen};

use super::{
    complement, norm, orthonormalize, relative_complement, residual, ScoreFunction, SubspaceBasis, SubspaceLabel,
    TangentBases, DROP_TOL,
};
use crate::dist::DiscreteDistribution;
use crate::error::{Error, Result};
use crate::gmm::{population_moments, MomentModel};
use crate::iv::{IVModel, IvPopulation};

/// Residual norm above which T̄ ⊄ M̄ is reported.
const NESTING_TOL: f64 = 1e-9;

/// Orthonormal basis of {l ∈ L²₀(P) : E[c_k l] = 0 for every constraint c_k}.
///
/// Works in the coordinates u = √p ∘ l, where the P-inner product is the
/// Euclidean one, and reads the null space off the eigendecomposition of
/// the constraint Gram matrix C'C.
pub fn null_space(dist: &DiscreteDistribution, constraints: &[Vec<f64>]) -> Result<SubspaceBasis> {
    let s = dist.len();
    let root: Vec<f64> = dist.probs().iter().map(|p| p.sqrt()).collect();
    let mut rows: Vec<Vec<f64>> = vec![root.clone()];
    for c in constraints {
        if c.len() != s {
            return Err(Error::LengthMismatch {
                expected: s,
                got: c.len(),
            });
        }
        rows.push(c.iter().zip(&root).map(|(v, r)| v * r).collect());
    }
    let cmat = DMatrix::from_fn(rows.len(), s, |i, j| rows[i][j]);
    let gram = cmat.transpose() * &cmat;
    let eig = SymmetricEigen::new(gram);
    let max = eig.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    let mut funcs = Vec::new();
    // ascending eigenvalue order for a reproducible sweep
    let mut order: Vec<usize> = (0..s).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    for k in order {
        if eig.eigenvalues[k] <= DROP_TOL * max {
            let u = eig.eigenvectors.column(k);
            let vals: Vec<f64> = u.iter().zip(&root).map(|(ui, r)| ui / r).collect();
            funcs.push(ScoreFunction::centered(dist, vals)?);
        }
    }
    orthonormalize(dist, &funcs, SubspaceLabel::Span)
}

fn max_residual(dist: &DiscreteDistribution, of: &SubspaceBasis, onto: &SubspaceBasis) -> Result<f64> {
    let mut worst = 0.0f64;
    for f in of.elements() {
        worst = worst.max(norm(dist, &residual(dist, f, onto)?)?);
    }
    Ok(worst)
}

/// T̄(P) = lin ℓ̇ + {l̇ : E[m_θ0 l̇] = 0} and its orthocomplement in L²₀(P).
pub fn gmm_tangent_basis(
    dist: &DiscreteDistribution,
    model: &dyn MomentModel,
    theta0: &[f64],
) -> Result<(SubspaceBasis, SubspaceBasis)> {
    let pm = population_moments(dist, model, theta0)?;
    let l = model.n_moments();
    let moments: Vec<Vec<f64>> = (0..l).map(|j| pm.moment_values(j)).collect();
    let nuisance = null_space(dist, &moments)?;
    let loading = -(pm.mean_jacobian.transpose() * &pm.sigma_inv);
    let mut spanning = Vec::with_capacity(model.n_params() + nuisance.dim());
    for k in 0..model.n_params() {
        let vals = pm.m.iter().map(|ms| (loading.row(k) * ms)[0]).collect();
        spanning.push(ScoreFunction::centered(dist, vals)?);
    }
    spanning.extend(nuisance.elements().iter().cloned());
    let t = orthonormalize(dist, &spanning, SubspaceLabel::T)?;
    let t_perp = complement(dist, &t, SubspaceLabel::TPerpCapM)?;
    Ok((t, t_perp))
}

/// Bases of T̄, T̄⊥ ∩ M̄ and M̄⊥ for the linear IV model, where the null model
/// restricts E[e | X1, Z] and the maintained model only E[Z e].
pub fn iv_tangent_bases(dist: &DiscreteDistribution, model: &IVModel) -> Result<TangentBases> {
    let pop = IvPopulation::new(dist, model)?;
    let (ell_p, ell_m) = crate::iv::iv_efficient_scores(dist, model)?;
    let layout = model.layout;

    // one constraint 1{(x1, z) = c}·e per distinct conditioning value c
    let mut cells: BTreeMap<Vec<u64>, Vec<f64>> = BTreeMap::new();
    for (s, r) in dist.support().iter().enumerate() {
        cells
            .entry(layout.conditioning_key(r))
            .or_insert_with(|| vec![0.0; dist.len()])[s] = pop.e[s];
    }
    let cond: Vec<Vec<f64>> = cells.into_values().collect();
    let p_eta = null_space(dist, &cond)?;
    let mut spanning = ell_p.clone();
    spanning.extend(p_eta.elements().iter().cloned());
    let t = orthonormalize(dist, &spanning, SubspaceLabel::T)?;

    let ze: Vec<Vec<f64>> = (0..layout.n_instruments())
        .map(|j| pop.z.iter().zip(&pop.e).map(|(z, e)| z[j] * e).collect())
        .collect();
    let m_eta = null_space(dist, &ze)?;
    let mut spanning = ell_m.clone();
    spanning.extend(m_eta.elements().iter().cloned());
    let m = orthonormalize(dist, &spanning, SubspaceLabel::M)?;

    let nesting = max_residual(dist, &t, &m)?;
    if nesting > NESTING_TOL {
        return Err(Error::NestingViolated { residual: nesting });
    }
    let t_perp_cap_m = relative_complement(dist, &m, &t, SubspaceLabel::TPerpCapM)?;
    let m_perp = complement(dist, &m, SubspaceLabel::MPerp)?;
    Ok(TangentBases {
        t,
        t_perp_cap_m,
        m_perp,
    })
}

/// T̄, T̄⊥ and an empty M̄⊥ for a moment model without a maintained hypothesis.
pub(crate) fn gmm_bases(dist: &DiscreteDistribution, model: &dyn MomentModel, theta0: &[f64]) -> Result<TangentBases> {
    let (t, t_perp) = gmm_tangent_basis(dist, model, theta0)?;
    Ok(TangentBases {
        t,
        t_perp_cap_m: t_perp,
        m_perp: SubspaceBasis::empty(dist, SubspaceLabel::MPerp),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::make_distribution;
    use crate::gmm::FnMomentModel;
    use crate::instances;
    use crate::score::{inner_product, project};
    use nalgebra::DVector;
    use std::sync::Arc;

    #[test]
    fn g1_dimensions_and_perp_direction() {
        let (d, model, theta0) = instances::g1();
        let (t, t_perp) = gmm_tangent_basis(&d, &model, &theta0).unwrap();
        assert_eq!((t.dim(), t_perp.dim()), (3, 1));
        let expect: Vec<f64> = d.map(|x| (x[0] * x[0] - 1.2) / 2.16f64.sqrt());
        for (a, b) in t_perp.elements()[0].values().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn just_identified_tangent_is_everything() {
        let d = make_distribution(
            vec![vec![-1.0], vec![0.0], vec![2.0], vec![5.0]],
            vec![0.3, 0.3, 0.3, 0.1],
        )
        .unwrap();
        let mu = d.mean_of(&d.coordinate(0));
        let model = FnMomentModel {
            p: 1,
            l: 1,
            m: Arc::new(|t: &[f64], x: &[f64]| DVector::from_vec(vec![x[0] - t[0]])),
            jac: Arc::new(|_: &[f64], _: &[f64]| DMatrix::from_element(1, 1, -1.0)),
            bounds: None,
        };
        let (t, t_perp) = gmm_tangent_basis(&d, &model, &[mu]).unwrap();
        assert_eq!((t.dim(), t_perp.dim()), (3, 0));
    }

    #[test]
    fn g1_rejects_wrong_theta() {
        let (d, model, _) = instances::g1();
        assert!(matches!(
            gmm_tangent_basis(&d, &model, &[0.5]),
            Err(Error::MomentNotSatisfied { .. })
        ));
    }

    #[test]
    fn efficient_score_is_orthogonal_to_nuisance_scores() {
        let (d, model, theta0) = instances::g1();
        let pm = population_moments(&d, &model, &theta0).unwrap();
        let nuisance = null_space(&d, &[pm.moment_values(0), pm.moment_values(1)]).unwrap();
        let ell = ScoreFunction::new(&d, d.map(|x| x[0] / 1.2)).unwrap();
        for f in nuisance.elements() {
            assert!(inner_product(&d, &ell, f).unwrap().abs() < 1e-10);
        }
    }

    #[test]
    fn iv1_subspaces() {
        let (d, model) = instances::iv1();
        let b = iv_tangent_bases(&d, &model).unwrap();
        assert_eq!(b.m_perp.dim(), 0);
        assert_eq!(b.t.dim() + b.t_perp_cap_m.dim(), 7);
        assert_eq!(b.t_perp_cap_m.dim(), 2);

        let c = 0.7;
        let in_t = ScoreFunction::new(&d, d.map(|r| c * r[1] * (r[0] - r[1]))).unwrap();
        let res = residual(&d, &in_t, &b.t).unwrap();
        assert!(norm(&d, &res).unwrap() < 1e-10);

        let in_perp = ScoreFunction::new(&d, d.map(|r| c * (r[3] - r[1] / 2.0) * (r[0] - r[1]))).unwrap();
        assert!(norm(&d, &project(&d, &in_perp, &b.t).unwrap()).unwrap() < 1e-10);
    }

    #[test]
    fn iv_null_model_violation_is_reported() {
        let (d, model) = instances::iv1();
        let skewed = d.with_probs(vec![1.0, 2.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0]).unwrap();
        assert!(matches!(
            iv_tangent_bases(&skewed, &model),
            Err(Error::NullModelViolated(_))
        ));
    }
}
