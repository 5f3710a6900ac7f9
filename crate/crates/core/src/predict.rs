//! Closed-form local-asymptotic predictions under P_{1/√n,g}.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::chisq::local_power;
use crate::dist::DiscreteDistribution;
use crate::error::{Error, Result};
use crate::gmm::{population_moments, MomentModel};
use crate::instances::{Estimator, Instance, TestKind};
use crate::iv::{iv_influence, IVModel};
use crate::score::{
    check_attached, decompose_score, gmm_tangent_basis, inner_product, norm, orthonormalize, project, residual,
    ScoreFunction, SubspaceBasis, SubspaceLabel,
};

/// Membership tolerance for the contrast basis inside T̄⊥ ∩ M̄.
const MEMBERSHIP_TOL: f64 = 1e-9;

/// E[ν_j g] for each coordinate j of an influence function.
pub fn predicted_bias(dist: &DiscreteDistribution, influence: &[ScoreFunction], g: &ScoreFunction) -> Result<Vec<f64>> {
    check_attached(dist, g)?;
    influence.iter().map(|nu| inner_product(dist, nu, g)).collect()
}

/// δ = Σ^{-1/2} E[m_θ0 f] together with P(θ0).
fn scaled_drift(
    dist: &DiscreteDistribution,
    model: &dyn MomentModel,
    theta0: &[f64],
    f: &ScoreFunction,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    check_attached(dist, f)?;
    let pm = population_moments(dist, model, theta0)?;
    let (root, p) = pm.projection_matrix()?;
    let delta = root * pm.moment_covariance_with(dist, f.values());
    Ok((delta, p))
}

/// Noncentrality of the J statistic, δ'(I − P(θ0))δ with δ = Σ^{-1/2}E[m Π_{T⊥}g].
pub fn j_noncentrality(
    dist: &DiscreteDistribution,
    model: &dyn MomentModel,
    theta0: &[f64],
    g: &ScoreFunction,
) -> Result<f64> {
    check_attached(dist, g)?;
    let (_, t_perp) = gmm_tangent_basis(dist, model, theta0)?;
    let g_perp = project(dist, g, &t_perp)?;
    let (delta, p) = scaled_drift(dist, model, theta0, &g_perp)?;
    let l = delta.len();
    let over = (DMatrix::identity(l, l) - p) * &delta;
    Ok(delta.dot(&over).max(0.0))
}

/// Hausman noncentrality Σ_j ⟨f_j, g⟩² and degrees of freedom |f|.
pub fn hausman_noncentrality(
    dist: &DiscreteDistribution,
    f_basis: &SubspaceBasis,
    g: &ScoreFunction,
) -> Result<(f64, usize)> {
    if f_basis.label() != SubspaceLabel::TPerpCapM {
        return Err(Error::WrongSubspaceLabel {
            expected: SubspaceLabel::TPerpCapM.to_string(),
            got: f_basis.label().to_string(),
        });
    }
    if f_basis.dist_id() != dist.id() {
        return Err(Error::DistributionMismatch);
    }
    let mut ncp = 0.0;
    for f in f_basis.elements() {
        let c = inner_product(dist, f, g)?;
        ncp += c * c;
    }
    Ok((ncp, f_basis.dim()))
}

/// Orthonormal basis of span{τ_j − ν_j}, the directions the DWH contrast
/// responds to, checked to lie in T̄⊥ ∩ M̄.
pub fn dwh_contrast_basis(dist: &DiscreteDistribution, model: &IVModel) -> Result<SubspaceBasis> {
    let (nu, tau) = iv_influence(dist, model)?;
    let diffs = tau.iter().zip(&nu).map(|(t, n)| t.sub(n)).collect::<Result<Vec<_>>>()?;
    let basis = orthonormalize(dist, &diffs, SubspaceLabel::TPerpCapM)?;
    let bases = crate::score::iv_tangent_bases(dist, model)?;
    for f in basis.elements() {
        let off = norm(dist, &residual(dist, f, &bases.t_perp_cap_m)?)?;
        if off > MEMBERSHIP_TOL {
            return Err(Error::WrongSubspaceLabel {
                expected: SubspaceLabel::TPerpCapM.to_string(),
                got: format!("direction with residual {off:e} outside T_perp_cap_M"),
            });
        }
    }
    Ok(basis)
}

/// Hall's split of the scaled moment drift δ = Σ^{-1/2}E[m g].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HallSplit {
    /// P(θ0)δ, which moves the estimator.
    pub identifying: Vec<f64>,
    /// (I − P(θ0))δ, which moves the J statistic.
    pub overidentifying: Vec<f64>,
}

pub fn hall_split(
    dist: &DiscreteDistribution,
    model: &dyn MomentModel,
    theta0: &[f64],
    g: &ScoreFunction,
) -> Result<HallSplit> {
    let (delta, p) = scaled_drift(dist, model, theta0, g)?;
    let ident = &p * &delta;
    let over = &delta - &ident;
    Ok(HallSplit {
        identifying: ident.iter().copied().collect(),
        overidentifying: over.iter().copied().collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorBias {
    pub estimator: Estimator,
    /// Limit mean of √n(θ̂ − θ0).
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestPrediction {
    pub name: TestKind,
    pub dof: usize,
    pub ncp: f64,
    pub power: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Decomposition {
    #[serde(rename = "var_T")]
    pub var_t: f64,
    #[serde(rename = "var_TperpM")]
    pub var_tperp_m: f64,
    #[serde(rename = "var_Mperp")]
    pub var_mperp: f64,
}

/// Limit bias of each estimator and limit power of each test along g.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Prediction {
    pub alpha: f64,
    pub bias: Vec<EstimatorBias>,
    pub tests: Vec<TestPrediction>,
    pub decomposition: Decomposition,
}

impl Prediction {
    pub fn bias_of(&self, e: Estimator) -> Option<&[f64]> {
        self.bias.iter().find(|b| b.estimator == e).map(|b| b.values.as_slice())
    }

    pub fn test(&self, t: TestKind) -> Option<&TestPrediction> {
        self.tests.iter().find(|p| p.name == t)
    }
}

/// Population-level predictions for an instance and score direction.
pub fn predict(
    instance: &Instance,
    g: &ScoreFunction,
    estimators: &[Estimator],
    tests: &[TestKind],
    alpha: f64,
) -> Result<Prediction> {
    let dist = instance.dist();
    check_attached(dist, g)?;
    let mut bias = Vec::with_capacity(estimators.len());
    for &e in estimators {
        let values = predicted_bias(dist, &instance.influence(e)?, g)?;
        bias.push(EstimatorBias { estimator: e, values });
    }
    let mut out = Vec::with_capacity(tests.len());
    for &t in tests {
        let (ncp, dof) = match (t, instance) {
            (TestKind::J, _) => {
                let model = instance.moment_model();
                let dof = model.n_moments().saturating_sub(model.n_params());
                if dof == 0 {
                    return Err(Error::DegenerateDof);
                }
                (j_noncentrality(dist, model.as_ref(), instance.theta0(), g)?, dof)
            }
            (TestKind::Dwh, Instance::LinearIv { model, .. }) => {
                hausman_noncentrality(dist, &dwh_contrast_basis(dist, model)?, g)?
            }
            (TestKind::Dwh, Instance::Moments { .. }) => {
                return Err(Error::ConfigInvalid("the dwh test needs a linear IV instance".into()))
            }
        };
        let power = if dof == 0 { 0.0 } else { local_power(dof, ncp, alpha)? };
        out.push(TestPrediction {
            name: t,
            dof,
            ncp,
            power,
        });
    }
    let rep = decompose_score(dist, g, &instance.tangent_bases()?)?;
    Ok(Prediction {
        alpha,
        bias,
        tests: out,
        decomposition: Decomposition {
            var_t: rep.variances[0],
            var_tperp_m: rep.variances[1],
            var_mperp: rep.variances[2],
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instances;

    fn g1_score(f: impl Fn(f64) -> f64) -> (DiscreteDistribution, ScoreFunction) {
        let (d, _, _) = instances::g1();
        let g = ScoreFunction::centered(&d, d.map(|x| f(x[0]))).unwrap();
        (d, g)
    }

    #[test]
    fn g1_bias_examples() {
        let (d, perp) = g1_score(|x| (x * x - 1.2) / 2.16f64.sqrt());
        let nu = vec![ScoreFunction::new(&d, d.coordinate(0)).unwrap()];
        assert!(predicted_bias(&d, &nu, &perp).unwrap()[0].abs() < 1e-15);
        let along = ScoreFunction::new(&d, d.map(|x| 0.8 * x[0] / 1.2)).unwrap();
        assert!((predicted_bias(&d, &nu, &along).unwrap()[0] - 0.8).abs() < 1e-14);
        assert_eq!(predicted_bias(&d, &nu, &ScoreFunction::zero(&d)).unwrap(), vec![0.0]);
    }

    #[test]
    fn g1_j_noncentrality_closed_form() {
        let (d, model, theta0) = instances::g1();
        for c in [0.5, 1.0, 2.0] {
            let g = ScoreFunction::new(&d, d.map(|x| c * (x[0] * x[0] - 1.2))).unwrap();
            let ncp = j_noncentrality(&d, &model, &theta0, &g).unwrap();
            assert!((ncp - c * c * 2.16).abs() < 1e-12, "{ncp}");
        }
        let tangent = ScoreFunction::new(&d, d.coordinate(0)).unwrap();
        assert!(j_noncentrality(&d, &model, &theta0, &tangent).unwrap() < 1e-12);
    }

    #[test]
    fn mismatched_distribution_rejected() {
        let (d, model, theta0) = instances::g1();
        let other = d.with_probs(vec![0.1, 0.25, 0.3, 0.25, 0.1]).unwrap();
        let g = ScoreFunction::new(&other, other.coordinate(0)).unwrap();
        assert_eq!(
            j_noncentrality(&d, &model, &theta0, &g),
            Err(Error::DistributionMismatch)
        );
        let nu = vec![ScoreFunction::new(&d, d.coordinate(0)).unwrap()];
        assert_eq!(predicted_bias(&d, &nu, &g), Err(Error::DistributionMismatch));
    }

    #[test]
    fn hausman_label_and_unit_basis() {
        let (d, model) = instances::iv1();
        let f = dwh_contrast_basis(&d, &model).unwrap();
        assert_eq!(f.dim(), 1);
        let (ncp, dof) = hausman_noncentrality(&d, &f, &f.elements()[0]).unwrap();
        assert!((ncp - 1.0).abs() < 1e-12);
        assert_eq!(dof, 1);
        let bases = crate::score::iv_tangent_bases(&d, &model).unwrap();
        assert!(matches!(
            hausman_noncentrality(&d, &bases.t, &f.elements()[0]),
            Err(Error::WrongSubspaceLabel { .. })
        ));
    }

    #[test]
    fn hausman_ncp_matches_projection_variance() {
        let (d, model) = instances::iv1();
        let c = 2.0;
        let g = ScoreFunction::new(&d, d.map(|r| c * (r[3] - r[1] / 2.0) * (r[0] - r[1]))).unwrap();
        let (ncp, _) = hausman_noncentrality(&d, &dwh_contrast_basis(&d, &model).unwrap(), &g).unwrap();
        let bases = crate::score::iv_tangent_bases(&d, &model).unwrap();
        let rep = decompose_score(&d, &g, &bases).unwrap();
        // g itself is the single contrast direction scaled by c/√2 · √2
        assert!((ncp - c * c / 2.0).abs() < 1e-12);
        assert!((ncp - rep.variances[1]).abs() < 1e-12);
    }

    #[test]
    fn hall_split_examples() {
        let (d, model, theta0) = instances::g1();
        let (_, perp) = g1_score(|x| x * x - 1.2);
        let s = hall_split(&d, &model, &theta0, &perp).unwrap();
        assert!(s.identifying.iter().all(|v| v.abs() < 1e-12));
        let (_, along) = g1_score(|x| x);
        let s = hall_split(&d, &model, &theta0, &along).unwrap();
        assert!(s.overidentifying.iter().all(|v| v.abs() < 1e-12));
        let s = hall_split(&d, &model, &theta0, &ScoreFunction::zero(&d)).unwrap();
        assert!(s.identifying.iter().chain(&s.overidentifying).all(|&v| v == 0.0));
    }

    #[test]
    fn iv1_predictions() {
        let inst = Instance::iv1();
        let d = inst.dist().clone();
        let g = ScoreFunction::new(&d, d.map(|r| 2.0 * (r[3] - r[1] / 2.0) * (r[0] - r[1]))).unwrap();
        let p = predict(&inst, &g, &[Estimator::Ols, Estimator::Tsls], &[TestKind::Dwh], 0.05).unwrap();
        let ols = p.bias_of(Estimator::Ols).unwrap();
        let tsls = p.bias_of(Estimator::Tsls).unwrap();
        assert!(ols.iter().all(|v| v.abs() < 1e-12));
        assert!((tsls[0] - 1.0).abs() < 1e-12 && tsls[1].abs() < 1e-12);
        let dwh = p.test(TestKind::Dwh).unwrap();
        assert_eq!(dwh.dof, 1);
        assert!((dwh.ncp - 2.0).abs() < 1e-12);
        assert!((p.decomposition.var_tperp_m - 2.0).abs() < 1e-12);
        assert!(p.decomposition.var_t.abs() < 1e-12);
    }

    #[test]
    fn prediction_json_round_trip() {
        let inst = Instance::g1();
        let d = inst.dist().clone();
        let g = ScoreFunction::new(&d, d.map(|x| x[0] * x[0] - 1.2 + 0.3 * x[0])).unwrap();
        let p = predict(&inst, &g, &[Estimator::Gmm], &[TestKind::J], 0.05).unwrap();
        let back: Prediction = serde_json::from_str(&serde_json::to_string(&p).unwrap()).unwrap();
        assert_eq!(back, p);
    }
}
