//! Local deviation paths t ↦ P_{t,g} through a finite-support distribution.

use serde::{Deserialize, Serialize};

use crate::dist::{compensated_sum, draw_indices, draw_sample, Dataset, DiscreteDistribution};
use crate::error::{Error, Result};
use crate::score::ScoreFunction;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tilt {
    /// dP_t ∝ exp(t g) dP; defined for every t.
    #[default]
    Exponential,
    /// dP_t = (1 + t g) dP; requires t·max|g| < 1.
    Linear,
}

#[derive(Debug, Clone)]
pub struct LocalPath {
    base: DiscreteDistribution,
    score: ScoreFunction,
    tilt: Tilt,
}

impl LocalPath {
    pub fn new(base: DiscreteDistribution, score: ScoreFunction, tilt: Tilt) -> Result<Self> {
        if score.dist_id() != base.id() {
            return Err(Error::DistributionMismatch);
        }
        Ok(LocalPath { base, score, tilt })
    }

    pub fn exponential(base: DiscreteDistribution, score: ScoreFunction) -> Result<Self> {
        Self::new(base, score, Tilt::Exponential)
    }

    pub fn base(&self) -> &DiscreteDistribution {
        &self.base
    }

    pub fn score(&self) -> &ScoreFunction {
        &self.score
    }

    pub fn tilt(&self) -> Tilt {
        self.tilt
    }

    /// The same path run backwards: P_{t,−g} = P_{−t,g}.
    pub fn reversed(&self) -> Self {
        LocalPath {
            base: self.base.clone(),
            score: self.score.scaled(-1.0),
            tilt: self.tilt,
        }
    }

    /// Largest t for which the path is defined (infinite for exponential tilt).
    pub fn max_t(&self) -> f64 {
        match self.tilt {
            Tilt::Exponential => f64::INFINITY,
            Tilt::Linear => {
                let m = self.score.max_abs();
                if m == 0.0 {
                    f64::INFINITY
                } else {
                    1.0 / m
                }
            }
        }
    }

    fn check(&self, t: f64) -> Result<()> {
        if !(t >= 0.0) || !t.is_finite() {
            return Err(Error::DomainError(format!(
                "path parameter t = {t} must be finite and nonnegative"
            )));
        }
        if t >= self.max_t() {
            return Err(Error::PositivityViolated { t });
        }
        Ok(())
    }

    /// log(dP_t/dP) at every support point.
    pub fn log_ratio(&self, t: f64) -> Result<Vec<f64>> {
        self.check(t)?;
        let g = self.score.values();
        Ok(match self.tilt {
            Tilt::Exponential => {
                let a = log_mgf(&self.base, g, t);
                g.iter().map(|gs| t * gs - a).collect()
            }
            Tilt::Linear => g.iter().map(|gs| (t * gs).ln_1p()).collect(),
        })
    }

    /// (dP_t − dP)/dP at every support point, without cancellation for small t.
    fn relative_change(&self, t: f64) -> Result<Vec<f64>> {
        self.check(t)?;
        let g = self.score.values();
        Ok(match self.tilt {
            Tilt::Exponential => {
                let a = log_mgf(&self.base, g, t);
                g.iter().map(|gs| (t * gs - a).exp_m1()).collect()
            }
            Tilt::Linear => g.iter().map(|gs| t * gs).collect(),
        })
    }
}

/// ln E_P[exp(t g)], accurate for small t.
fn log_mgf(base: &DiscreteDistribution, g: &[f64], t: f64) -> f64 {
    let gmax = g.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    if t * gmax < 1.0 {
        compensated_sum(base.probs().iter().zip(g).map(|(p, gs)| p * (t * gs).exp_m1())).ln_1p()
    } else {
        let s = compensated_sum(base.probs().iter().zip(g).map(|(p, gs)| p * (t * (gs - gmax)).exp()));
        t * gmax + s.ln()
    }
}

/// P_{t,g}.
pub fn path_distribution(path: &LocalPath, t: f64) -> Result<DiscreteDistribution> {
    if t == 0.0 {
        path.check(t)?;
        return Ok(path.base.clone());
    }
    let lr = path.log_ratio(t)?;
    let probs: Vec<f64> = path.base.probs().iter().zip(&lr).map(|(p, l)| p * l.exp()).collect();
    if probs.iter().any(|&q| !(q > 0.0)) {
        return Err(Error::PositivityViolated { t });
    }
    path.base.with_probs(probs)
}

/// Σ_s ((√q_s − √p_s)/t − ½ g_s √p_s)², the finite-support integrand of
/// quadratic-mean differentiability.
pub fn hellinger_residual(path: &LocalPath, t: f64) -> Result<f64> {
    if !(t > 0.0) {
        return Err(Error::DomainError(format!("t = {t} must be positive")));
    }
    let rel = path.relative_change(t)?;
    let g = path.score.values();
    let terms = path.base.probs().iter().zip(&rel).zip(g).map(|((&p, &r), &gs)| {
        // √q − √p = √p · r / (√(1 + r) + 1)
        let d = r / ((1.0 + r).sqrt() + 1.0) / t - 0.5 * gs;
        p * d * d
    });
    Ok(compensated_sum(terms))
}

/// n draws from P_{1/√n,g}.
pub fn sample_local(path: &LocalPath, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::InvalidArgument("sample size must be at least 1".into()));
    }
    let q = path_distribution(path, 1.0 / (n as f64).sqrt())?;
    draw_sample(&q, n, seed)
}

/// Support indices of n draws from P_{1/√n,g}.
pub fn sample_local_indices(path: &LocalPath, n: usize, seed: u64) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::InvalidArgument("sample size must be at least 1".into()));
    }
    let q = path_distribution(path, 1.0 / (n as f64).sqrt())?;
    Ok(draw_indices(&q, n, seed))
}

/// ½ Σ |p_s − q_s| for two distributions on the same support.
pub fn total_variation(p: &DiscreteDistribution, q: &DiscreteDistribution) -> Result<f64> {
    if p.support() != q.support() {
        return Err(Error::DistributionMismatch);
    }
    Ok(0.5 * compensated_sum(p.probs().iter().zip(q.probs()).map(|(a, b)| (a - b).abs())))
}

/// d/dt log dP_t at t = 0 by central difference with step h, using the reversed path for −h.
pub fn numerical_score(path: &LocalPath, h: f64) -> Result<Vec<f64>> {
    let fwd = path.log_ratio(h)?;
    let bwd = path.reversed().log_ratio(h)?;
    Ok(fwd.iter().zip(&bwd).map(|(a, b)| (a - b) / (2.0 * h)).collect())
}

/// D_n = log ∏ dP_{1/√n,g}/dP(X_i) − [(1/√n) Σ g(X_i) − ½ E g²] for X_1..X_n drawn from the base.
pub fn lecam_remainder(path: &LocalPath, n: usize, seed: u64) -> Result<f64> {
    if n == 0 {
        return Err(Error::InvalidArgument("sample size must be at least 1".into()));
    }
    let t = 1.0 / (n as f64).sqrt();
    let lr = path.log_ratio(t)?;
    let mut counts = vec![0usize; path.base.len()];
    for i in draw_indices(&path.base, n, seed) {
        counts[i] += 1;
    }
    let g = path.score.values();
    let per_point = lr.iter().zip(g).map(|(l, gs)| l - t * gs);
    let sum = compensated_sum(per_point.zip(&counts).map(|(d, &c)| d * c as f64));
    let half_var = 0.5 * path.base.mean_of_product(g, g);
    Ok(sum + half_var)
}
