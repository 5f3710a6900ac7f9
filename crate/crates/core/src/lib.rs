//! Local-asymptotic bias and power of efficient estimators and specification
//! tests, computed exactly on finite-support distributions and checked by
//! Monte Carlo.

// `!(x > 0.0)` also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod chisq;
pub mod dist;
pub mod error;
pub mod gmm;
pub mod instances;
pub mod iv;
pub mod linalg;
pub mod mc;
pub mod path;
pub mod predict;
pub mod score;

pub use dist::{derive_seed, draw_sample, make_distribution, Dataset, DiscreteDistribution};
pub use error::{Error, Result};
pub use instances::{Estimator, Instance, TestKind};
pub use path::{LocalPath, Tilt};
pub use score::{ScoreFunction, SubspaceBasis, SubspaceLabel, TangentBases};
