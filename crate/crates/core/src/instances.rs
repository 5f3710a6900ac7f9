//! Built-in reference instances.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dist::DiscreteDistribution;
use crate::error::{Error, Result};
use crate::gmm::{efficient_influence, LinearIvMoments, MomentModel, OveridentifiedMean};
use crate::iv::{iv_influence, IVModel, IvLayout};
use crate::score::{gmm_bases, iv_tangent_bases, ScoreFunction, TangentBases};

/// Five-point symmetric distribution on {−2, …, 2} with the overidentified
/// mean model m_θ(x) = (x − θ, (x − θ)² − 1.2) and θ0 = 0.
pub fn g1() -> (DiscreteDistribution, OveridentifiedMean, Vec<f64>) {
    let dist = DiscreteDistribution::new(
        (-2..=2).map(|x| vec![x as f64]).collect(),
        vec![0.1, 0.2, 0.4, 0.2, 0.1],
    )
    .expect("G1 support is valid");
    (dist, OveridentifiedMean { v: 1.2 }, vec![0.0])
}

/// Eight-point IV design with z1, w, e independent uniform on {−1, 1},
/// x1 = z1 + w, x2 = 1, y = x1 + e; β0 = (1, 0), σ0² = 1.
///
/// Points are laid out as (y, x1, x2, z1).
pub fn iv1() -> (DiscreteDistribution, IVModel) {
    let mut support = Vec::with_capacity(8);
    for z1 in [-1.0, 1.0] {
        for w in [-1.0, 1.0] {
            for e in [-1.0, 1.0] {
                let x1 = z1 + w;
                support.push(vec![x1 + e, x1, 1.0, z1]);
            }
        }
    }
    let dist = DiscreteDistribution::new(support, vec![0.125; 8]).expect("IV1 support is valid");
    let layout = IvLayout { k1: 1, k2: 1, q: 1 };
    let model = IVModel::new(vec![1.0, 0.0], 1.0, layout).expect("IV1 model is valid");
    (dist, model)
}

/// A population model together with its base distribution.
#[derive(Clone)]
pub enum Instance {
    /// Unconditional moment model with true parameter θ0.
    Moments {
        dist: DiscreteDistribution,
        model: Arc<dyn MomentModel>,
        theta0: Vec<f64>,
    },
    /// Linear IV model: the null restricts E[e | X1, Z], the maintained model E[Z e].
    LinearIv { dist: DiscreteDistribution, model: IVModel },
}

impl fmt::Debug for Instance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Instance::Moments { model, theta0, .. } => f
                .debug_struct("Moments")
                .field("model", &model.name())
                .field("theta0", theta0)
                .finish_non_exhaustive(),
            Instance::LinearIv { model, .. } => {
                f.debug_struct("LinearIv").field("model", model).finish_non_exhaustive()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimator {
    Gmm,
    Ols,
    Tsls,
}

impl Estimator {
    pub fn name(self) -> &'static str {
        match self {
            Estimator::Gmm => "gmm",
            Estimator::Ols => "ols",
            Estimator::Tsls => "tsls",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TestKind {
    J,
    Dwh,
}

impl TestKind {
    pub fn name(self) -> &'static str {
        match self {
            TestKind::J => "j",
            TestKind::Dwh => "dwh",
        }
    }
}

impl Instance {
    pub fn g1() -> Self {
        let (dist, model, theta0) = g1();
        Instance::Moments {
            dist,
            model: Arc::new(model),
            theta0,
        }
    }

    pub fn iv1() -> Self {
        let (dist, model) = iv1();
        Instance::LinearIv { dist, model }
    }

    /// "G1" or "IV1".
    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "G1" => Some(Self::g1()),
            "IV1" => Some(Self::iv1()),
            _ => None,
        }
    }

    pub fn dist(&self) -> &DiscreteDistribution {
        match self {
            Instance::Moments { dist, .. } | Instance::LinearIv { dist, .. } => dist,
        }
    }

    /// True parameter: θ0 or β0.
    pub fn theta0(&self) -> &[f64] {
        match self {
            Instance::Moments { theta0, .. } => theta0,
            Instance::LinearIv { model, .. } => &model.beta0,
        }
    }

    /// The moment model used by the GMM estimator and the J test.
    pub fn moment_model(&self) -> Arc<dyn MomentModel> {
        match self {
            Instance::Moments { model, .. } => Arc::clone(model),
            Instance::LinearIv { model, .. } => Arc::new(LinearIvMoments { layout: model.layout }),
        }
    }

    pub fn supports_estimator(&self, e: Estimator) -> bool {
        matches!(
            (self, e),
            (_, Estimator::Gmm) | (Instance::LinearIv { .. }, Estimator::Ols | Estimator::Tsls)
        )
    }

    pub fn supports_test(&self, t: TestKind) -> bool {
        match t {
            TestKind::J => {
                let m = self.moment_model();
                m.n_moments() > m.n_params()
            }
            TestKind::Dwh => matches!(self, Instance::LinearIv { .. }),
        }
    }

    /// Bases of T̄, T̄⊥ ∩ M̄ and M̄⊥. Without a maintained model M̄ = L²₀(P).
    pub fn tangent_bases(&self) -> Result<TangentBases> {
        match self {
            Instance::Moments { dist, model, theta0 } => gmm_bases(dist, model.as_ref(), theta0),
            Instance::LinearIv { dist, model } => iv_tangent_bases(dist, model),
        }
    }

    /// Influence function of an estimator at the base distribution.
    pub fn influence(&self, e: Estimator) -> Result<Vec<ScoreFunction>> {
        match (self, e) {
            (_, Estimator::Gmm) => {
                let model = self.moment_model();
                Ok(efficient_influence(self.dist(), model.as_ref(), self.theta0())?.nu)
            }
            (Instance::LinearIv { dist, model }, Estimator::Ols) => Ok(iv_influence(dist, model)?.0),
            (Instance::LinearIv { dist, model }, Estimator::Tsls) => Ok(iv_influence(dist, model)?.1),
            _ => Err(Error::ConfigInvalid(format!(
                "estimator {} needs a linear IV instance",
                e.name()
            ))),
        }
    }
}
