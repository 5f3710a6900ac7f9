//! Structural invariants checked over randomly generated finite-support instances.

use nalgebra::DMatrix;
use orthotest::gmm::{efficient_influence, kl_projection, population_moments, OveridentifiedMean};
use orthotest::iv::{iv_efficient_scores, population_dwh_variance, IVModel, IvLayout};
use orthotest::path::{numerical_score, path_distribution};
use orthotest::predict::{hall_split, j_noncentrality, predicted_bias};
use orthotest::score::{
    decompose_score, gmm_tangent_basis, inner_product, null_space, orthonormal_basis, project, variance,
};
use orthotest::{DiscreteDistribution, Estimator, Instance, LocalPath, ScoreFunction, SubspaceBasis, Tilt};
use proptest::prelude::*;

/// Distinct support points with positive weights; θ0 and v are the mean and variance.
fn moment_instance() -> impl Strategy<Value = (DiscreteDistribution, OveridentifiedMean, Vec<f64>)> {
    prop::collection::btree_set(-8i32..=8, 3..8).prop_flat_map(|pts| {
        let s = pts.len();
        let pts: Vec<f64> = pts.into_iter().map(|v| v as f64 / 2.0).collect();
        prop::collection::vec(0.05f64..1.0, s).prop_map(move |w| {
            let d = DiscreteDistribution::new(pts.iter().map(|&x| vec![x]).collect(), w).unwrap();
            let x = d.coordinate(0);
            let mean = d.mean_of(&x);
            let var = d.mean_of(&d.map(|p| (p[0] - mean) * (p[0] - mean)));
            (d, OveridentifiedMean { v: var }, vec![mean])
        })
    })
}

/// Two binary instruments, one endogenous regressor, random cell weights for (z1, z2, w),
/// and a symmetric ±1 error. Points are (y, x1, 1, z1, z2).
fn iv_instance() -> impl Strategy<Value = (DiscreteDistribution, IVModel)> {
    prop::collection::vec(0.05f64..1.0, 8).prop_map(|w| {
        let mut support = Vec::new();
        let mut probs = Vec::new();
        let mut cell = 0;
        for z1 in [-1.0, 1.0] {
            for z2 in [-1.0, 1.0] {
                for v in [-1.0, 1.0] {
                    for e in [-1.0, 1.0] {
                        let x1 = z1 + 0.5 * z2 + v;
                        support.push(vec![x1 + e, x1, 1.0, z1, z2]);
                        probs.push(w[cell] / 2.0);
                    }
                    cell += 1;
                }
            }
        }
        let d = DiscreteDistribution::new(support, probs).unwrap();
        let model = IVModel::new(vec![1.0, 0.0], 1.0, IvLayout { k1: 1, k2: 1, q: 2 }).unwrap();
        (d, model)
    })
}

fn score_on(d: &DiscreteDistribution, raw: &[f64]) -> ScoreFunction {
    ScoreFunction::centered(d, raw[..d.len()].to_vec()).unwrap()
}

fn in_basis(b: &SubspaceBasis, raw: &[f64]) -> ScoreFunction {
    b.combine(&raw[..b.dim()]).unwrap()
}

fn raw() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, 16)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn expectation_is_normalized_and_linear((d, _, _) in moment_instance(), a in -3.0f64..3.0, b in -3.0f64..3.0, f in raw(), g in raw()) {
        let one = vec![1.0; d.len()];
        prop_assert!((d.mean_of(&one) - 1.0).abs() < 1e-12);
        let (f, g) = (&f[..d.len()], &g[..d.len()]);
        let combo: Vec<f64> = f.iter().zip(g).map(|(x, y)| a * x + b * y).collect();
        prop_assert!((d.mean_of(&combo) - a * d.mean_of(f) - b * d.mean_of(g)).abs() < 1e-12);
    }

    #[test]
    fn tangent_dimensions_and_nuisance_orthogonality((d, model, theta0) in moment_instance()) {
        let (t, t_perp) = gmm_tangent_basis(&d, &model, &theta0).unwrap();
        prop_assert_eq!(t.dim() + t_perp.dim(), d.len() - 1);
        prop_assert_eq!(t_perp.dim(), 1);
        let pm = population_moments(&d, &model, &theta0).unwrap();
        let nuisance = null_space(&d, &[pm.moment_values(0), pm.moment_values(1)]).unwrap();
        let inf = efficient_influence(&d, &model, &theta0).unwrap();
        for f in nuisance.elements() {
            prop_assert!(inner_product(&d, &inf.ell_dot[0], f).unwrap().abs() < 1e-10);
        }
        prop_assert!(inf.tangent_residual < 1e-8);
    }

    #[test]
    fn projections_are_idempotent_and_self_adjoint((d, _, _) in moment_instance(), a in raw(), b in raw(), f in raw(), g in raw()) {
        let basis = orthonormal_basis(&d, &[score_on(&d, &a), score_on(&d, &b)]).unwrap();
        let (f, g) = (score_on(&d, &f), score_on(&d, &g));
        let pf = project(&d, &f, &basis).unwrap();
        let ppf = project(&d, &pf, &basis).unwrap();
        prop_assert!(pf.values().iter().zip(ppf.values()).all(|(x, y)| (x - y).abs() < 1e-10));
        let pg = project(&d, &g, &basis).unwrap();
        let lhs = inner_product(&d, &pf, &g).unwrap();
        let rhs = inner_product(&d, &f, &pg).unwrap();
        prop_assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn bias_and_j_channels_are_separated((d, model, theta0) in moment_instance(), g in raw()) {
        let (t, t_perp) = gmm_tangent_basis(&d, &model, &theta0).unwrap();
        let nu = efficient_influence(&d, &model, &theta0).unwrap().nu;
        let g = score_on(&d, &g);
        let (gt, gp) = (project(&d, &g, &t).unwrap(), project(&d, &g, &t_perp).unwrap());
        prop_assert!(predicted_bias(&d, &nu, &gp).unwrap()[0].abs() < 1e-10);
        prop_assert!(j_noncentrality(&d, &model, &theta0, &gt).unwrap() < 1e-10);
        let bias = predicted_bias(&d, &nu, &g).unwrap()[0];
        let ncp = j_noncentrality(&d, &model, &theta0, &g).unwrap();
        if bias.abs() > 1e-12 {
            prop_assert!(variance(&d, &gt).unwrap() > 1e-12);
        }
        if ncp > 1e-12 {
            prop_assert!(variance(&d, &gp).unwrap() > 1e-12);
        }
    }

    #[test]
    fn decomposition_variances_add_up((d, model, theta0) in moment_instance(), g in raw()) {
        let inst = Instance::Moments { dist: d.clone(), model: std::sync::Arc::new(model), theta0 };
        let g = score_on(&d, &g);
        let rep = decompose_score(&d, &g, &inst.tangent_bases().unwrap()).unwrap();
        let total: f64 = rep.variances.iter().sum();
        prop_assert!((total - variance(&d, &g).unwrap()).abs() < 1e-10);
        prop_assert!(rep.variances[2].abs() < 1e-15);
    }

    #[test]
    fn hall_parts_are_orthogonal_and_complete((d, model, theta0) in moment_instance(), g in raw()) {
        let g = score_on(&d, &g);
        let s = hall_split(&d, &model, &theta0, &g).unwrap();
        let pm = population_moments(&d, &model, &theta0).unwrap();
        let (root, p) = pm.projection_matrix().unwrap();
        prop_assert!((&p * &p - &p).abs().max() < 1e-10);
        prop_assert!((&p - p.transpose()).abs().max() < 1e-10);
        let delta = root * pm.moment_covariance_with(&d, g.values());
        let dot: f64 = s.identifying.iter().zip(&s.overidentifying).map(|(a, b)| a * b).sum();
        let sq = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
        prop_assert!(dot.abs() < 1e-12);
        prop_assert!((sq(&s.identifying) + sq(&s.overidentifying) - delta.norm_squared()).abs() < 1e-12);
    }

    #[test]
    fn tangent_scores_do_not_move_j((d, model, theta0) in moment_instance(), c in raw()) {
        let (t, _) = gmm_tangent_basis(&d, &model, &theta0).unwrap();
        let g = in_basis(&t, &c);
        let s = hall_split(&d, &model, &theta0, &g).unwrap();
        prop_assert!(s.overidentifying.iter().map(|x| x * x).sum::<f64>().sqrt() < 1e-10);
    }

    #[test]
    fn kl_multiplier_vanishes_at_the_truth((d, model, theta0) in moment_instance()) {
        let proj = kl_projection(&d, &model, &theta0).unwrap();
        prop_assert!(proj.lambda.norm() < 1e-10);
    }

    #[test]
    fn path_probabilities_and_scores((d, _, _) in moment_instance(), g in raw(), t in 0.0f64..3.0) {
        let g = score_on(&d, &g);
        for tilt in [Tilt::Exponential, Tilt::Linear] {
            let path = LocalPath::new(d.clone(), g.clone(), tilt).unwrap();
            let t = t.min(0.9 * path.max_t());
            let total: f64 = path_distribution(&path, t).unwrap().probs().iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            let num = numerical_score(&path, 1e-5).unwrap();
            prop_assert!(num.iter().zip(g.values()).all(|(a, b)| (a - b).abs() < 1e-6));
        }
    }

    #[test]
    fn iv_subspaces_nest_and_fill((d, model) in iv_instance(), g in raw()) {
        let inst = Instance::LinearIv { dist: d.clone(), model: model.clone() };
        let b = inst.tangent_bases().unwrap();
        prop_assert_eq!(b.t.dim() + b.t_perp_cap_m.dim() + b.m_perp.dim(), d.len() - 1);
        prop_assert!(b.m_perp.dim() > 0);
        for f in b.t.elements() {
            let leak = project(&d, f, &b.m_perp).unwrap();
            prop_assert!(leak.max_abs() < 1e-10);
        }
        let g = score_on(&d, &g);
        let rep = decompose_score(&d, &g, &b).unwrap();
        prop_assert!((rep.variances.iter().sum::<f64>() - variance(&d, &g).unwrap()).abs() < 1e-10);
    }

    #[test]
    fn iv_bias_channels((d, model) in iv_instance(), c in raw(), h in prop::collection::vec(-2.0f64..2.0, 2)) {
        let inst = Instance::LinearIv { dist: d.clone(), model: model.clone() };
        let b = inst.tangent_bases().unwrap();
        let nu = inst.influence(Estimator::Ols).unwrap();
        let tau = inst.influence(Estimator::Tsls).unwrap();

        // on T̄ the two estimators share one bias
        let g = in_basis(&b.t, &c);
        let (bo, bt) = (predicted_bias(&d, &nu, &g).unwrap(), predicted_bias(&d, &tau, &g).unwrap());
        prop_assert!(bo.iter().zip(&bt).all(|(x, y)| (x - y).abs() < 1e-10));

        // h'ℓ̇^M moves 2SLS by exactly h; its T̄⊥∩M̄ part leaves OLS alone
        let ell_m = iv_efficient_scores(&d, &model).unwrap().1;
        let g = ScoreFunction::combination(&d, &[(h[0], &ell_m[0]), (h[1], &ell_m[1])]).unwrap();
        let bt = predicted_bias(&d, &tau, &g).unwrap();
        prop_assert!(bt.iter().zip(&h).all(|(x, y)| (x - y).abs() < 1e-10));
        let gp = project(&d, &g, &b.t_perp_cap_m).unwrap();
        let bo_perp = predicted_bias(&d, &nu, &gp).unwrap();
        prop_assert!(bo_perp.iter().all(|x| x.abs() < 1e-10));
        let bo = predicted_bias(&d, &nu, &g).unwrap();
        let bt_perp = predicted_bias(&d, &tau, &gp).unwrap();
        for j in 0..2 {
            prop_assert!((bt_perp[j] - (h[j] - bo[j])).abs() < 1e-10);
        }
    }

    #[test]
    fn iv_variance_contrast_is_psd((d, model) in iv_instance()) {
        let (v, rank) = population_dwh_variance(&d, &model).unwrap();
        let sym: DMatrix<f64> = (&v + v.transpose()) * 0.5;
        let min = sym.symmetric_eigenvalues().min();
        prop_assert!(min > -1e-10);
        prop_assert_eq!(rank, 1);
    }
}
