//! Experiment configuration files: JSON, schema version 1.

use std::path::Path;
use std::sync::Arc;

use orthotest::dist::{DiscreteDistribution, DistributionLiteral};
use orthotest::gmm::{LinearIvMoments, OveridentifiedMean};
use orthotest::iv::{IVModel, IvLayout};
use orthotest::mc::{ExperimentConfig, ScoreSpec};
use orthotest::{Error, Estimator, Instance, Result, TestKind, Tilt};
use serde::Deserialize;
use serde_json::Value;

pub const SCHEMA_VERSION: u64 = 1;

/// Built-in configurations, addressable with `--preset`.
pub const PRESETS: [(&str, &str); 5] = [
    ("g1_null", include_str!("../../../configs/g1_null.json")),
    ("g1_perp", include_str!("../../../configs/g1_perp.json")),
    ("g1_bias", include_str!("../../../configs/g1_bias.json")),
    ("iv1_tangent", include_str!("../../../configs/iv1_tangent.json")),
    ("iv1_power", include_str!("../../../configs/iv1_power.json")),
];

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    schema: u64,
    instance: Value,
    #[serde(default)]
    score: ScoreSpec,
    #[serde(default)]
    tilt: Tilt,
    #[serde(default = "default_n")]
    n: usize,
    #[serde(default = "default_reps")]
    reps: usize,
    #[serde(default = "default_alpha")]
    alpha: f64,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    estimators: Option<Vec<Estimator>>,
    #[serde(default)]
    tests: Option<Vec<TestKind>>,
    #[serde(default)]
    path_grid: Option<PathGrid>,
}

fn default_n() -> usize {
    1000
}

fn default_reps() -> usize {
    10_000
}

fn default_alpha() -> f64 {
    0.05
}

/// Geometric grid t_max, t_max·ratio, … used by `check-path`.
#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathGrid {
    pub t_max: f64,
    pub ratio: f64,
    pub points: usize,
}

impl Default for PathGrid {
    fn default() -> Self {
        PathGrid {
            t_max: 0.2,
            ratio: 0.5,
            points: 8,
        }
    }
}

impl PathGrid {
    pub fn values(&self) -> Result<Vec<f64>> {
        if !(self.t_max > 0.0 && self.t_max.is_finite()) || !(self.ratio > 0.0 && self.ratio < 1.0) || self.points == 0
        {
            return Err(Error::ConfigInvalid(
                "path_grid needs t_max > 0, 0 < ratio < 1 and points >= 1".into(),
            ));
        }
        Ok((0..self.points)
            .map(|i| self.t_max * self.ratio.powi(i as i32))
            .collect())
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case", deny_unknown_fields)]
enum ModelSpec {
    /// m_θ(x) = (x − θ, (x − θ)² − v) on scalar data.
    OveridentifiedMean {
        v: f64,
        theta0: Vec<f64>,
        distribution: DistributionLiteral,
    },
    /// Linear IV with the conditional null and unconditional maintained model.
    LinearIv {
        layout: IvLayout,
        beta0: Vec<f64>,
        sigma0_sq: f64,
        distribution: DistributionLiteral,
    },
    /// m_β = Z(Y − X'β) as an unconditional moment model.
    LinearIvMoments {
        layout: IvLayout,
        beta0: Vec<f64>,
        distribution: DistributionLiteral,
    },
}

fn resolve_instance(v: &Value) -> Result<Instance> {
    if let Some(name) = v.as_str() {
        return Instance::by_name(name)
            .ok_or_else(|| Error::ConfigInvalid(format!("unknown instance {name:?} (built in: G1, IV1)")));
    }
    let spec: ModelSpec =
        serde_json::from_value(v.clone()).map_err(|e| Error::ConfigInvalid(format!("instance: {e}")))?;
    Ok(match spec {
        ModelSpec::OveridentifiedMean {
            v,
            theta0,
            distribution,
        } => {
            let dist = DiscreteDistribution::from_literal(&distribution)?;
            if dist.dim() != 1 {
                return Err(Error::ConfigInvalid(
                    "overidentified_mean needs scalar support points".into(),
                ));
            }
            if theta0.len() != 1 {
                return Err(Error::ConfigInvalid("overidentified_mean has one parameter".into()));
            }
            Instance::Moments {
                dist,
                model: Arc::new(OveridentifiedMean { v }),
                theta0,
            }
        }
        ModelSpec::LinearIv {
            layout,
            beta0,
            sigma0_sq,
            distribution,
        } => {
            let dist = DiscreteDistribution::from_literal(&distribution)?;
            check_width(&dist, layout)?;
            Instance::LinearIv {
                dist,
                model: IVModel::new(beta0, sigma0_sq, layout)?,
            }
        }
        ModelSpec::LinearIvMoments {
            layout,
            beta0,
            distribution,
        } => {
            let dist = DiscreteDistribution::from_literal(&distribution)?;
            check_width(&dist, layout)?;
            if beta0.len() != layout.n_regressors() {
                return Err(Error::ConfigInvalid(format!(
                    "beta0 needs {} entries",
                    layout.n_regressors()
                )));
            }
            Instance::Moments {
                dist,
                model: Arc::new(LinearIvMoments { layout }),
                theta0: beta0,
            }
        }
    })
}

fn check_width(dist: &DiscreteDistribution, layout: IvLayout) -> Result<()> {
    if dist.dim() != layout.width() {
        return Err(Error::ConfigInvalid(format!(
            "support points have {} columns but the layout needs {}",
            dist.dim(),
            layout.width()
        )));
    }
    Ok(())
}

/// A validated experiment plus the `check-path` grid.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub experiment: ExperimentConfig,
    pub path_grid: PathGrid,
}

/// Sets `value` at a dot-separated path; numeric segments index arrays.
pub fn apply_override(doc: &mut Value, key: &str, value: &str) -> Result<()> {
    if key.is_empty() {
        return Err(Error::ConfigInvalid("empty override key".into()));
    }
    let parsed = serde_json::from_str::<Value>(value).unwrap_or_else(|_| Value::String(value.to_string()));
    let mut cur = doc;
    let segments: Vec<&str> = key.split('.').collect();
    for (i, seg) in segments.iter().enumerate() {
        let last = i + 1 == segments.len();
        cur = match cur {
            Value::Object(map) => {
                if last {
                    map.insert(seg.to_string(), parsed);
                    return Ok(());
                }
                map.entry(seg.to_string())
                    .or_insert_with(|| Value::Object(Default::default()))
            }
            Value::Array(items) => {
                let idx: usize = seg
                    .parse()
                    .map_err(|_| Error::ConfigInvalid(format!("override {key}: {seg:?} is not an array index")))?;
                let len = items.len();
                let slot = items
                    .get_mut(idx)
                    .ok_or_else(|| Error::ConfigInvalid(format!("override {key}: index {idx} out of range ({len})")))?;
                if last {
                    *slot = parsed;
                    return Ok(());
                }
                slot
            }
            _ => {
                return Err(Error::ConfigInvalid(format!(
                    "override {key}: cannot descend into a scalar at {seg:?}"
                )))
            }
        };
    }
    unreachable!("loop returns on the last segment")
}

/// Parses `key=value`.
pub fn split_override(s: &str) -> Result<(&str, &str)> {
    s.split_once('=')
        .ok_or_else(|| Error::ConfigInvalid(format!("override {s:?} is not of the form key=value")))
}

pub fn parse_document(text: &str) -> Result<Value> {
    serde_json::from_str(text).map_err(|e| Error::ConfigInvalid(format!("config is not valid JSON: {e}")))
}

pub fn read_document(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::ConfigInvalid(format!("cannot read {}: {e}", path.display())))?;
    parse_document(&text)
}

pub fn preset(name: &str) -> Result<Value> {
    let (_, text) = PRESETS.iter().find(|(n, _)| *n == name).ok_or_else(|| {
        let names: Vec<&str> = PRESETS.iter().map(|(n, _)| *n).collect();
        Error::ConfigInvalid(format!("unknown preset {name:?}; available: {}", names.join(", ")))
    })?;
    parse_document(text)
}

/// Applies overrides, then checks the schema and builds the experiment.
pub fn load(mut doc: Value, overrides: &[String]) -> Result<LoadedConfig> {
    for o in overrides {
        let (k, v) = split_override(o)?;
        apply_override(&mut doc, k, v)?;
    }
    let raw: RawConfig = serde_json::from_value(doc).map_err(|e| Error::ConfigInvalid(e.to_string()))?;
    if raw.schema != SCHEMA_VERSION {
        return Err(Error::ConfigInvalid(format!(
            "unsupported schema {} (expected {SCHEMA_VERSION})",
            raw.schema
        )));
    }
    let instance = resolve_instance(&raw.instance)?;
    let (default_est, default_tests) = match &instance {
        Instance::Moments { .. } => (vec![Estimator::Gmm], vec![TestKind::J]),
        Instance::LinearIv { .. } => (vec![Estimator::Ols, Estimator::Tsls], vec![TestKind::Dwh]),
    };
    let experiment = ExperimentConfig {
        instance,
        score: raw.score,
        tilt: raw.tilt,
        n: raw.n,
        reps: raw.reps,
        alpha: raw.alpha,
        master_seed: raw.seed,
        estimators: raw.estimators.unwrap_or(default_est),
        tests: raw.tests.unwrap_or(default_tests),
    };
    experiment.validate()?;
    // rejects instances whose base distribution violates the model
    experiment.instance.tangent_bases()?;
    experiment.score_function()?;
    let path_grid = raw.path_grid.unwrap_or_default();
    path_grid.values()?;
    Ok(LoadedConfig { experiment, path_grid })
}
