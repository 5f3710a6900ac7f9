//! Overidentified moment-restriction models: efficient two-step GMM, the J
//! statistic, the efficient score and influence function, and the
//! Kullback–Leibler projection onto a moment-constrained set.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dist::{compensated_dot, Dataset, DiscreteDistribution};
use crate::error::{Error, Result};
use crate::iv::{IvLayout, TestStatistic};
use crate::linalg::{inv_sqrt_spd, numerical_rank, spd_cholesky, spd_inverse, spd_solve};
use crate::score::{gmm_tangent_basis, norm, residual, ScoreFunction};

/// Tolerance on ‖E[m_θ0]‖ for θ0 to count as the truth under a distribution.
pub const MOMENT_TOL: f64 = 1e-8;

/// A moment function m_θ(x) ∈ R^l with Jacobian ∂m/∂θ' (l × p).
pub trait MomentModel: Send + Sync {
    fn n_params(&self) -> usize;
    fn n_moments(&self) -> usize;
    fn moments(&self, theta: &[f64], x: &[f64]) -> DVector<f64>;
    fn jacobian(&self, theta: &[f64], x: &[f64]) -> DMatrix<f64>;

    /// Optional box constraint (lower, upper) on θ.
    fn theta_bounds(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        None
    }

    fn name(&self) -> &str {
        "custom"
    }
}

/// m_θ(x) = (x − θ, (x − θ)² − v): mean with a known second central moment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OveridentifiedMean {
    pub v: f64,
}

impl MomentModel for OveridentifiedMean {
    fn n_params(&self) -> usize {
        1
    }

    fn n_moments(&self) -> usize {
        2
    }

    fn moments(&self, theta: &[f64], x: &[f64]) -> DVector<f64> {
        let u = x[0] - theta[0];
        DVector::from_vec(vec![u, u * u - self.v])
    }

    fn jacobian(&self, theta: &[f64], x: &[f64]) -> DMatrix<f64> {
        let u = x[0] - theta[0];
        DMatrix::from_column_slice(2, 1, &[-1.0, -2.0 * u])
    }

    fn name(&self) -> &str {
        "overidentified_mean"
    }
}

/// m_β(y, x, z) = z (y − x'β) on points laid out as (y, x1, x2, z1).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearIvMoments {
    pub layout: IvLayout,
}

impl MomentModel for LinearIvMoments {
    fn n_params(&self) -> usize {
        self.layout.n_regressors()
    }

    fn n_moments(&self) -> usize {
        self.layout.n_instruments()
    }

    fn moments(&self, theta: &[f64], x: &[f64]) -> DVector<f64> {
        let (y, xs, zs) = self.layout.split(x);
        let e = y - xs.iter().zip(theta).map(|(a, b)| a * b).sum::<f64>();
        DVector::from_iterator(zs.len(), zs.iter().map(|z| z * e))
    }

    fn jacobian(&self, _theta: &[f64], x: &[f64]) -> DMatrix<f64> {
        let (_, xs, zs) = self.layout.split(x);
        DMatrix::from_fn(zs.len(), xs.len(), |i, j| -zs[i] * xs[j])
    }

    fn name(&self) -> &str {
        "linear_iv_moments"
    }
}

type MomentFn = dyn Fn(&[f64], &[f64]) -> DVector<f64> + Send + Sync;
type JacobianFn = dyn Fn(&[f64], &[f64]) -> DMatrix<f64> + Send + Sync;

/// A moment model assembled from closures.
#[derive(Clone)]
pub struct FnMomentModel {
    pub p: usize,
    pub l: usize,
    pub m: Arc<MomentFn>,
    pub jac: Arc<JacobianFn>,
    pub bounds: Option<(Vec<f64>, Vec<f64>)>,
}

impl MomentModel for FnMomentModel {
    fn n_params(&self) -> usize {
        self.p
    }

    fn n_moments(&self) -> usize {
        self.l
    }

    fn moments(&self, theta: &[f64], x: &[f64]) -> DVector<f64> {
        (self.m)(theta, x)
    }

    fn jacobian(&self, theta: &[f64], x: &[f64]) -> DMatrix<f64> {
        (self.jac)(theta, x)
    }

    fn theta_bounds(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        self.bounds.clone()
    }
}

/// Largest absolute gap between the analytic Jacobian and central differences
/// over the support at θ.
pub fn jacobian_check(dist: &DiscreteDistribution, model: &dyn MomentModel, theta: &[f64]) -> f64 {
    let mut worst = 0.0f64;
    for x in dist.support() {
        let jac = model.jacobian(theta, x);
        for k in 0..model.n_params() {
            let h = 1e-6 * theta[k].abs().max(1.0);
            let mut up = theta.to_vec();
            let mut dn = theta.to_vec();
            up[k] += h;
            dn[k] -= h;
            let fd = (model.moments(&up, x) - model.moments(&dn, x)) / (2.0 * h);
            for i in 0..model.n_moments() {
                worst = worst.max((fd[i] - jac[(i, k)]).abs());
            }
        }
    }
    worst
}

/// Population moment objects at θ0: m on the support, E[∇m], Σ = E[m m'].
#[derive(Debug, Clone)]
pub struct PopulationMoments {
    pub m: Vec<DVector<f64>>,
    pub mean_jacobian: DMatrix<f64>,
    pub sigma: DMatrix<f64>,
    pub sigma_inv: DMatrix<f64>,
    pub info: DMatrix<f64>,
}

impl PopulationMoments {
    /// Values of coordinate `j` of m_θ0 on the support.
    pub fn moment_values(&self, j: usize) -> Vec<f64> {
        self.m.iter().map(|v| v[j]).collect()
    }

    /// E[m_θ0 g].
    pub fn moment_covariance_with(&self, dist: &DiscreteDistribution, g: &[f64]) -> DVector<f64> {
        let l = self.sigma.nrows();
        DVector::from_iterator(l, (0..l).map(|j| dist.mean_of_product(&self.moment_values(j), g)))
    }

    /// Σ^{-1/2} and P(θ0) = Σ^{-1/2} G (G'Σ⁻¹G)⁻¹ G' Σ^{-1/2}.
    pub fn projection_matrix(&self) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let root = inv_sqrt_spd(&self.sigma, Error::SingularSigma)?;
        let a = &root * &self.mean_jacobian;
        let inner = spd_inverse(&(a.transpose() * &a), Error::RankDeficientJacobian)?;
        let p = &a * inner * a.transpose();
        Ok((root, (&p + p.transpose()) * 0.5))
    }
}

pub fn population_moments(
    dist: &DiscreteDistribution,
    model: &dyn MomentModel,
    theta0: &[f64],
) -> Result<PopulationMoments> {
    let (p, l) = (model.n_params(), model.n_moments());
    if theta0.len() != p {
        return Err(Error::LengthMismatch {
            expected: p,
            got: theta0.len(),
        });
    }
    let m: Vec<DVector<f64>> = dist.support().iter().map(|x| model.moments(theta0, x)).collect();
    let jac: Vec<DMatrix<f64>> = dist.support().iter().map(|x| model.jacobian(theta0, x)).collect();
    let probs = dist.probs();
    let col = |f: &dyn Fn(usize) -> f64| -> f64 {
        let vals: Vec<f64> = (0..dist.len()).map(f).collect();
        compensated_dot(probs, &vals)
    };
    let mean_m = DVector::from_iterator(l, (0..l).map(|j| col(&|s| m[s][j])));
    let gap = mean_m.norm();
    if gap > MOMENT_TOL {
        return Err(Error::MomentNotSatisfied { norm: gap });
    }
    let sigma = DMatrix::from_fn(l, l, |i, j| col(&|s| m[s][i] * m[s][j]));
    let sigma_inv = spd_inverse(&sigma, Error::SingularSigma)?;
    let mean_jacobian = DMatrix::from_fn(l, p, |i, k| col(&|s| jac[s][(i, k)]));
    if numerical_rank(&mean_jacobian, 1e-10) < p {
        return Err(Error::RankDeficientJacobian);
    }
    let info = mean_jacobian.transpose() * &sigma_inv * &mean_jacobian;
    spd_cholesky(&info, Error::RankDeficientJacobian)?;
    Ok(PopulationMoments {
        m,
        mean_jacobian,
        sigma,
        sigma_inv,
        info,
    })
}

/// Efficient score ℓ̇ = −E[∇m]'Σ⁻¹m, information I, and influence ν = I⁻¹ℓ̇.
#[derive(Debug, Clone)]
pub struct EfficientInfluence {
    pub nu: Vec<ScoreFunction>,
    pub info: DMatrix<f64>,
    pub ell_dot: Vec<ScoreFunction>,
    /// max_j ‖ν_j − Π_T ν_j‖; the influence function should lie in T̄(P).
    pub tangent_residual: f64,
}

/// Efficient score and influence function of θ at θ0.
pub fn efficient_influence(
    dist: &DiscreteDistribution,
    model: &dyn MomentModel,
    theta0: &[f64],
) -> Result<EfficientInfluence> {
    let pm = population_moments(dist, model, theta0)?;
    let p = model.n_params();
    let loading = -(pm.mean_jacobian.transpose() * &pm.sigma_inv); // p × l
    let ell: Vec<DVector<f64>> = pm.m.iter().map(|ms| &loading * ms).collect();
    let info_inv = spd_inverse(&pm.info, Error::RankDeficientJacobian)?;
    let ell_dot = (0..p)
        .map(|k| ScoreFunction::centered(dist, ell.iter().map(|v| v[k]).collect()))
        .collect::<Result<Vec<_>>>()?;
    let nu = (0..p)
        .map(|k| ScoreFunction::centered(dist, ell.iter().map(|v| (info_inv.row(k) * v)[0]).collect()))
        .collect::<Result<Vec<_>>>()?;
    let (t, _) = gmm_tangent_basis(dist, model, theta0)?;
    let mut tangent_residual = 0.0f64;
    for f in &nu {
        tangent_residual = tangent_residual.max(norm(dist, &residual(dist, f, &t)?)?);
    }
    Ok(EfficientInfluence {
        nu,
        info: pm.info,
        ell_dot,
        tangent_residual,
    })
}

/// Result of two-step efficient GMM.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GmmEstimate {
    pub theta_hat: Vec<f64>,
    /// First-step (identity-weighted) estimate at which Σ̂ is evaluated.
    pub theta_first_step: Vec<f64>,
    pub sigma_hat: Vec<Vec<f64>>,
    pub info_hat: Vec<Vec<f64>>,
    pub j_stat: f64,
    pub converged: bool,
    pub iterations: usize,
    pub gradient_norm: f64,
    pub n: usize,
}

const MAX_ITER: usize = 200;
const MAX_HALVINGS: usize = 40;
const GRAD_TOL: f64 = 1e-10;
const STEP_TOL: f64 = 1e-12;

/// Sample moments over weighted distinct points.
struct SampleMoments<'a> {
    points: &'a [(Vec<f64>, f64)],
    model: &'a dyn MomentModel,
}

impl SampleMoments<'_> {
    fn mean(&self, theta: &[f64]) -> DVector<f64> {
        let mut acc = DVector::zeros(self.model.n_moments());
        for (x, w) in self.points {
            acc += self.model.moments(theta, x) * *w;
        }
        acc
    }

    fn mean_jacobian(&self, theta: &[f64]) -> DMatrix<f64> {
        let mut acc = DMatrix::zeros(self.model.n_moments(), self.model.n_params());
        for (x, w) in self.points {
            acc += self.model.jacobian(theta, x) * *w;
        }
        acc
    }

    fn outer(&self, theta: &[f64]) -> DMatrix<f64> {
        let l = self.model.n_moments();
        let mut acc = DMatrix::zeros(l, l);
        for (x, w) in self.points {
            let m = self.model.moments(theta, x);
            acc += &m * m.transpose() * *w;
        }
        acc
    }

    fn objective(&self, theta: &[f64], weight: &DMatrix<f64>) -> f64 {
        let m = self.mean(theta);
        (m.transpose() * weight * &m)[0]
    }
}

struct Minimum {
    theta: Vec<f64>,
    converged: bool,
    iterations: usize,
    gradient_norm: f64,
}

fn clamp_to(theta: &mut [f64], bounds: &Option<(Vec<f64>, Vec<f64>)>) {
    if let Some((lo, hi)) = bounds {
        for ((t, a), b) in theta.iter_mut().zip(lo).zip(hi) {
            *t = t.clamp(*a, *b);
        }
    }
}

/// Gauss–Newton with step halving on m̄(θ)'W m̄(θ).
fn gauss_newton(sm: &SampleMoments<'_>, weight: &DMatrix<f64>, start: &[f64]) -> Minimum {
    let bounds = sm.model.theta_bounds();
    let mut theta = start.to_vec();
    let mut value = sm.objective(&theta, weight);
    let mut gradient_norm = f64::INFINITY;
    for iter in 0..MAX_ITER {
        let m = sm.mean(&theta);
        let g = sm.mean_jacobian(&theta);
        let grad = g.transpose() * weight * &m;
        gradient_norm = grad.norm();
        if gradient_norm < GRAD_TOL {
            return Minimum {
                theta,
                converged: true,
                iterations: iter,
                gradient_norm,
            };
        }
        let h = g.transpose() * weight * &g;
        let step = match spd_solve(&h, &(-grad), Error::RankDeficientJacobian) {
            Ok(s) => s,
            Err(_) => {
                return Minimum {
                    theta,
                    converged: false,
                    iterations: iter,
                    gradient_norm,
                }
            }
        };
        if step.norm() < STEP_TOL {
            return Minimum {
                theta,
                converged: true,
                iterations: iter,
                gradient_norm,
            };
        }
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let mut cand: Vec<f64> = theta.iter().zip(step.iter()).map(|(t, s)| t + alpha * s).collect();
            clamp_to(&mut cand, &bounds);
            let v = sm.objective(&cand, weight);
            if v < value {
                accepted = Some((cand, v));
                break;
            }
            alpha *= 0.5;
        }
        match accepted {
            Some((cand, v)) => {
                let moved = cand
                    .iter()
                    .zip(&theta)
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    .sqrt();
                theta = cand;
                value = v;
                if moved < STEP_TOL {
                    return Minimum {
                        theta,
                        converged: true,
                        iterations: iter + 1,
                        gradient_norm,
                    };
                }
            }
            None => {
                // no decrease along the Gauss–Newton direction: we are at the
                // floor of floating-point resolution of the objective
                let converged = gradient_norm < 1e3 * GRAD_TOL * (1.0 + value.sqrt());
                return Minimum {
                    theta,
                    converged,
                    iterations: iter + 1,
                    gradient_norm,
                };
            }
        }
    }
    Minimum {
        theta,
        converged: false,
        iterations: MAX_ITER,
        gradient_norm,
    }
}

fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn from_rows(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let r = rows.len();
    let c = rows.first().map(|x| x.len()).unwrap_or(0);
    DMatrix::from_fn(r, c, |i, j| rows[i][j])
}

/// Two-step efficient GMM: identity weight, then Σ̂⁻¹ with Σ̂ at the first step.
pub fn estimate_gmm(data: &Dataset, model: &dyn MomentModel, theta_init: &[f64]) -> Result<GmmEstimate> {
    let (p, l) = (model.n_params(), model.n_moments());
    if theta_init.len() != p {
        return Err(Error::LengthMismatch {
            expected: p,
            got: theta_init.len(),
        });
    }
    if data.n() <= l {
        return Err(Error::InvalidArgument(format!(
            "GMM needs n > l (n = {}, l = {l})",
            data.n()
        )));
    }
    if let Some((lo, hi)) = model.theta_bounds() {
        if theta_init
            .iter()
            .zip(lo.iter().zip(&hi))
            .any(|(t, (a, b))| t < a || t > b)
        {
            return Err(Error::InvalidArgument("initial value outside parameter bounds".into()));
        }
    }
    let points = data.tabulate();
    let sm = SampleMoments { points: &points, model };

    let first = gauss_newton(&sm, &DMatrix::identity(l, l), theta_init);
    let sigma_hat = sm.outer(&first.theta);
    let weight = spd_inverse(&sigma_hat, Error::SingularSigmaHat)?;
    let second = gauss_newton(&sm, &weight, &first.theta);

    let n = data.n();
    let mbar = sm.mean(&second.theta);
    let j_stat = (n as f64 * (mbar.transpose() * &weight * &mbar)[0]).max(0.0);
    let g = sm.mean_jacobian(&second.theta);
    let info_hat = g.transpose() * &weight * &g;
    Ok(GmmEstimate {
        theta_hat: second.theta,
        theta_first_step: first.theta,
        sigma_hat: to_rows(&sigma_hat),
        info_hat: to_rows(&info_hat),
        j_stat,
        converged: first.converged && second.converged,
        iterations: first.iterations + second.iterations,
        gradient_norm: second.gradient_norm,
        n,
    })
}

/// Hansen's J statistic for `est`, with l − p degrees of freedom.
pub fn j_statistic(data: &Dataset, model: &dyn MomentModel, est: &GmmEstimate) -> Result<TestStatistic> {
    let (p, l) = (model.n_params(), model.n_moments());
    if l == p {
        return Err(Error::DegenerateDof);
    }
    if est.n != data.n() {
        return Err(Error::ShapeMismatch(
            "estimate was computed from a different sample".into(),
        ));
    }
    let points = data.tabulate();
    let sm = SampleMoments { points: &points, model };
    let weight = spd_inverse(&from_rows(&est.sigma_hat), Error::SingularSigmaHat)?;
    let mbar = sm.mean(&est.theta_hat);
    let value = (data.n() as f64 * (mbar.transpose() * weight * &mbar)[0]).max(0.0);
    Ok(TestStatistic::new(value, l - p))
}

/// I-projection of η onto {Q : ∫ m_θ dQ = 0} and its dual multiplier λ.
#[derive(Debug, Clone)]
pub struct KlProjection {
    pub dist: DiscreteDistribution,
    pub lambda: DVector<f64>,
    pub iterations: usize,
}

/// Largest exponent λ'm we accept before declaring the hull condition failed.
const MAX_TILT_EXPONENT: f64 = 700.0;

/// Minimizes log ∫ exp(λ'm_θ) dη by damped Newton; the minimizer tilts η onto
/// the moment-constrained set.
pub fn kl_projection(eta: &DiscreteDistribution, model: &dyn MomentModel, theta: &[f64]) -> Result<KlProjection> {
    let l = model.n_moments();
    if theta.len() != model.n_params() {
        return Err(Error::LengthMismatch {
            expected: model.n_params(),
            got: theta.len(),
        });
    }
    let m: Vec<DVector<f64>> = eta.support().iter().map(|x| model.moments(theta, x)).collect();
    let scale = m.iter().map(|v| v.amax()).fold(0.0, f64::max);
    if scale == 0.0 {
        return Ok(KlProjection {
            dist: eta.clone(),
            lambda: DVector::zeros(l),
            iterations: 0,
        });
    }
    let log_eta: Vec<f64> = eta.probs().iter().map(|p| p.ln()).collect();

    // tilted weights, log normalizer, mean and covariance of m under the tilt
    let tilt = |lambda: &DVector<f64>| -> (Vec<f64>, f64, DVector<f64>, DMatrix<f64>) {
        let a: Vec<f64> = m.iter().zip(&log_eta).map(|(v, le)| le + lambda.dot(v)).collect();
        let amax = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = a.iter().map(|ai| (ai - amax).exp()).sum();
        let log_norm = amax + z.ln();
        let q: Vec<f64> = a.iter().map(|ai| (ai - log_norm).exp()).collect();
        let mut mean = DVector::zeros(l);
        for (qs, v) in q.iter().zip(&m) {
            mean += v * *qs;
        }
        let mut cov = DMatrix::zeros(l, l);
        for (qs, v) in q.iter().zip(&m) {
            let c = v - &mean;
            cov += &c * c.transpose() * *qs;
        }
        (q, log_norm, mean, cov)
    };

    let mut lambda = DVector::zeros(l);
    let (_, _, _, cov0) = tilt(&lambda);
    if spd_cholesky(&cov0, Error::Infeasible).is_err() {
        // moment vectors lie in a proper affine subspace: the hull has no interior
        return Err(Error::Infeasible);
    }
    let (mut q, mut value, mut grad, mut hess) = tilt(&lambda);
    let tol = 1e-14 * scale.max(1.0);
    let mut iterations = 0;
    while grad.norm() > tol {
        if iterations >= 200 {
            return Err(Error::NoConvergence(format!(
                "KL projection stalled with ‖E_Q m‖ = {:e}",
                grad.norm()
            )));
        }
        iterations += 1;
        let step = spd_solve(&hess, &(-&grad), Error::Infeasible)?;
        let slope = grad.dot(&step);
        let mut alpha = 1.0;
        let mut moved = false;
        for _ in 0..60 {
            let cand = &lambda + &step * alpha;
            let (cq, cv, cg, ch) = tilt(&cand);
            // near the optimum the objective is flat to rounding, so a drop in
            // ‖∇‖ also counts as progress
            if cv <= value + 1e-4 * alpha * slope || cg.norm() < grad.norm() {
                lambda = cand;
                q = cq;
                value = cv;
                grad = cg;
                hess = ch;
                moved = true;
                break;
            }
            alpha *= 0.5;
        }
        if lambda.norm() * scale > MAX_TILT_EXPONENT {
            return Err(Error::Infeasible);
        }
        if !moved {
            break;
        }
    }
    if lambda.norm() * scale > MAX_TILT_EXPONENT {
        return Err(Error::Infeasible);
    }
    let dist = eta.with_probs(q).map_err(|_| Error::Infeasible)?;
    let residual = DVector::from_iterator(
        l,
        (0..l).map(|j| dist.mean_of(&m.iter().map(|v| v[j]).collect::<Vec<_>>())),
    );
    if residual.norm() > 1e-10 * scale.max(1.0) {
        return Err(Error::NoConvergence(format!(
            "KL projection residual ‖E_Q m‖ = {:e}",
            residual.norm()
        )));
    }
    Ok(KlProjection {
        dist,
        lambda,
        iterations,
    })
}
