//! Monte Carlo replication of estimators and tests under P_{1/√n,g}.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chisq::critical_value;
use crate::dist::{compensated_sum, derive_seed, draw_indices, Dataset};
use crate::error::{Error, Result};
use crate::gmm::{efficient_influence, estimate_gmm, j_statistic};
use crate::instances::{Estimator, Instance, TestKind};
use crate::iv::{dwh_statistic, estimate_2sls, estimate_ols, iv_efficient_scores, IVDataset};
use crate::path::{path_distribution, LocalPath, Tilt};
use crate::predict::Prediction;
use crate::score::{ScoreFunction, SubspaceBasis};

/// |z| above which a comparison fails.
pub const Z_THRESHOLD: f64 = 4.0;

/// Share of failed replications above which a run is abandoned.
const MAX_FAILURE_SHARE: f64 = 0.01;

/// A score direction g, given as a sum of the parts that are present.
///
/// Basis coordinates refer to the orthonormal bases of T̄, T̄⊥ ∩ M̄ and M̄⊥;
/// `efficient` is h in h'ℓ̇ for the null model's efficient score and
/// `maintained` is h in h'ℓ̇^M for the maintained IV model.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub values: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub t: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub t_perp_cap_m: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub m_perp: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub efficient: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub maintained: Vec<f64>,
}

fn coords_in(basis: &SubspaceBasis, coords: &[f64], what: &str) -> Result<ScoreFunction> {
    if coords.len() > basis.dim() {
        return Err(Error::ConfigInvalid(format!(
            "{what} has {} coordinates but the subspace has dimension {}",
            coords.len(),
            basis.dim()
        )));
    }
    let mut padded = coords.to_vec();
    padded.resize(basis.dim(), 0.0);
    basis.combine(&padded)
}

fn loaded(scores: &[ScoreFunction], h: &[f64], what: &str) -> Result<Vec<(f64, ScoreFunction)>> {
    if h.len() != scores.len() {
        return Err(Error::ConfigInvalid(format!(
            "{what} needs {} coefficients, got {}",
            scores.len(),
            h.len()
        )));
    }
    Ok(h.iter().copied().zip(scores.iter().cloned()).collect())
}

impl ScoreSpec {
    /// g ≡ 0.
    pub fn zero() -> Self {
        ScoreSpec::default()
    }

    pub fn values(values: Vec<f64>) -> Self {
        ScoreSpec {
            values: Some(values),
            ..Default::default()
        }
    }

    pub fn build(&self, instance: &Instance) -> Result<ScoreFunction> {
        let dist = instance.dist();
        let mut g = match &self.values {
            Some(v) => ScoreFunction::new(dist, v.clone())?,
            None => ScoreFunction::zero(dist),
        };
        if !(self.t.is_empty() && self.t_perp_cap_m.is_empty() && self.m_perp.is_empty()) {
            let b = instance.tangent_bases()?;
            g = g.add(&coords_in(&b.t, &self.t, "t")?)?;
            g = g.add(&coords_in(&b.t_perp_cap_m, &self.t_perp_cap_m, "t_perp_cap_m")?)?;
            g = g.add(&coords_in(&b.m_perp, &self.m_perp, "m_perp")?)?;
        }
        let mut terms = Vec::new();
        if !self.efficient.is_empty() {
            let scores = match instance {
                Instance::Moments { dist, model, theta0 } => efficient_influence(dist, model.as_ref(), theta0)?.ell_dot,
                Instance::LinearIv { dist, model } => iv_efficient_scores(dist, model)?.0,
            };
            terms.extend(loaded(&scores, &self.efficient, "efficient")?);
        }
        if !self.maintained.is_empty() {
            let Instance::LinearIv { dist, model } = instance else {
                return Err(Error::ConfigInvalid(
                    "maintained scores need a linear IV instance".into(),
                ));
            };
            terms.extend(loaded(
                &iv_efficient_scores(dist, model)?.1,
                &self.maintained,
                "maintained",
            )?);
        }
        for (c, f) in &terms {
            g = g.axpy(*c, f)?;
        }
        Ok(g)
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub instance: Instance,
    pub score: ScoreSpec,
    pub tilt: Tilt,
    pub n: usize,
    pub reps: usize,
    pub alpha: f64,
    pub master_seed: u64,
    pub estimators: Vec<Estimator>,
    pub tests: Vec<TestKind>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 50 {
            return Err(Error::ConfigInvalid(format!("n = {} must be at least 50", self.n)));
        }
        if self.reps < 100 {
            return Err(Error::ConfigInvalid(format!(
                "reps = {} must be at least 100",
                self.reps
            )));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::ConfigInvalid(format!(
                "alpha = {} must be in (0, 1)",
                self.alpha
            )));
        }
        if self.estimators.is_empty() && self.tests.is_empty() {
            return Err(Error::ConfigInvalid(
                "nothing to run: no estimators and no tests".into(),
            ));
        }
        for &e in &self.estimators {
            if !self.instance.supports_estimator(e) {
                return Err(Error::ConfigInvalid(format!(
                    "estimator {} is not available here",
                    e.name()
                )));
            }
        }
        for &t in &self.tests {
            if !self.instance.supports_test(t) {
                return Err(Error::ConfigInvalid(format!("test {} is not available here", t.name())));
            }
        }
        let mut seen = Vec::new();
        for name in self
            .estimators
            .iter()
            .map(|e| e.name())
            .chain(self.tests.iter().map(|t| t.name()))
        {
            if seen.contains(&name) {
                return Err(Error::ConfigInvalid(format!("{name} listed twice")));
            }
            seen.push(name);
        }
        Ok(())
    }

    pub fn score_function(&self) -> Result<ScoreFunction> {
        self.score.build(&self.instance)
    }
}

/// Outcome of a single replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepRecord {
    pub rep: usize,
    pub seed: u64,
    /// Reason the replication was excluded, if it was.
    pub failure: Option<String>,
    /// √n(θ̂ − θ0) per configured estimator.
    pub estimates: Vec<Vec<f64>>,
    /// (statistic, dof, reject) per configured test.
    pub tests: Vec<(f64, usize, bool)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSummary {
    pub estimator: Estimator,
    /// Empirical mean of √n(θ̂ − θ0).
    pub mean: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
    /// Monte Carlo standard error of each mean coordinate.
    pub mean_se: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestSummary {
    pub name: TestKind,
    pub rejection_rate: f64,
    /// Binomial standard error of the rejection rate.
    pub rejection_se: f64,
    pub mean_statistic: f64,
    /// Degrees of freedom of the first successful replication.
    pub dof: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub n: usize,
    pub reps: usize,
    pub reps_failed: usize,
    pub alpha: f64,
    pub master_seed: u64,
    pub estimators: Vec<EstimatorSummary>,
    pub tests: Vec<TestSummary>,
}

impl ExperimentSummary {
    pub fn estimator(&self, e: Estimator) -> Option<&EstimatorSummary> {
        self.estimators.iter().find(|s| s.estimator == e)
    }

    pub fn test(&self, t: TestKind) -> Option<&TestSummary> {
        self.tests.iter().find(|s| s.name == t)
    }
}

/// Everything needed to run one replication, computed once per experiment.
struct Plan<'a> {
    config: &'a ExperimentConfig,
    sampling: crate::dist::DiscreteDistribution,
    critical: Vec<f64>,
    root_n: f64,
}

impl Plan<'_> {
    fn critical_for(&self, dof: usize) -> Result<f64> {
        match self.critical.get(dof) {
            Some(&c) => Ok(c),
            None => critical_value(dof, self.config.alpha),
        }
    }

    fn run(&self, rep: usize) -> RepRecord {
        let seed = derive_seed(self.config.master_seed, rep as u64);
        match self.run_inner(seed) {
            Ok((estimates, tests)) => RepRecord {
                rep,
                seed,
                failure: None,
                estimates,
                tests,
            },
            Err(e) => RepRecord {
                rep,
                seed,
                failure: Some(e.to_string()),
                estimates: Vec::new(),
                tests: Vec::new(),
            },
        }
    }

    #[allow(clippy::type_complexity)]
    fn run_inner(&self, seed: u64) -> Result<(Vec<Vec<f64>>, Vec<(f64, usize, bool)>)> {
        let cfg = self.config;
        let idx = draw_indices(&self.sampling, cfg.n, seed);
        let data = Dataset::from_indices(&self.sampling, &idx)?;
        let theta0 = cfg.instance.theta0();
        let scaled =
            |theta: &[f64]| -> Vec<f64> { theta.iter().zip(theta0).map(|(a, b)| self.root_n * (a - b)).collect() };

        let need_gmm = cfg.estimators.contains(&Estimator::Gmm) || cfg.tests.contains(&TestKind::J);
        let need_linear = cfg
            .estimators
            .iter()
            .any(|e| matches!(e, Estimator::Ols | Estimator::Tsls))
            || cfg.tests.contains(&TestKind::Dwh);

        let model = cfg.instance.moment_model();
        let gmm = if need_gmm {
            let est = estimate_gmm(&data, model.as_ref(), theta0)?;
            if !est.converged {
                return Err(Error::NoConvergence(format!(
                    "GMM stopped after {} iterations with gradient norm {:e}",
                    est.iterations, est.gradient_norm
                )));
            }
            Some(est)
        } else {
            None
        };
        let linear = if need_linear {
            let Instance::LinearIv { model: iv, .. } = &cfg.instance else {
                return Err(Error::ConfigInvalid(
                    "linear estimators need a linear IV instance".into(),
                ));
            };
            let ivd = IVDataset::from_dataset(&data, iv.layout)?;
            let ols = estimate_ols(&ivd)?;
            let tsls = estimate_2sls(&ivd)?;
            Some((ivd, ols, tsls))
        } else {
            None
        };

        let mut estimates = Vec::with_capacity(cfg.estimators.len());
        for e in &cfg.estimators {
            let theta = match e {
                Estimator::Gmm => &gmm.as_ref().expect("computed above").theta_hat,
                Estimator::Ols => &linear.as_ref().expect("computed above").1.beta,
                Estimator::Tsls => &linear.as_ref().expect("computed above").2.beta,
            };
            estimates.push(scaled(theta));
        }
        let mut tests = Vec::with_capacity(cfg.tests.len());
        for t in &cfg.tests {
            let stat = match t {
                TestKind::J => j_statistic(&data, model.as_ref(), gmm.as_ref().expect("computed above"))?,
                TestKind::Dwh => {
                    let (ivd, ols, tsls) = linear.as_ref().expect("computed above");
                    dwh_statistic(ivd, ols, tsls)?
                }
            };
            let reject = stat.dof > 0 && stat.value > self.critical_for(stat.dof)?;
            tests.push((stat.value, stat.dof, reject));
        }
        Ok((estimates, tests))
    }
}

fn mean_and_covariance(rows: &[&Vec<f64>], k: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let r = rows.len() as f64;
    let mean: Vec<f64> = (0..k).map(|j| compensated_sum(rows.iter().map(|v| v[j])) / r).collect();
    let denom = (r - 1.0).max(1.0);
    let mut cov = vec![vec![0.0; k]; k];
    for a in 0..k {
        for b in a..k {
            let c = compensated_sum(rows.iter().map(|v| (v[a] - mean[a]) * (v[b] - mean[b]))) / denom;
            cov[a][b] = c;
            cov[b][a] = c;
        }
    }
    (mean, cov)
}

fn summarize(config: &ExperimentConfig, records: &[RepRecord]) -> Result<ExperimentSummary> {
    let ok: Vec<&RepRecord> = records.iter().filter(|r| r.failure.is_none()).collect();
    let reps_failed = records.len() - ok.len();
    if reps_failed as f64 > MAX_FAILURE_SHARE * config.reps as f64 || ok.len() < 2 {
        return Err(Error::TooManyFailures {
            failed: reps_failed,
            reps: config.reps,
        });
    }
    let r = ok.len() as f64;
    let estimators = config
        .estimators
        .iter()
        .enumerate()
        .map(|(i, &e)| {
            let rows: Vec<&Vec<f64>> = ok.iter().map(|rec| &rec.estimates[i]).collect();
            let k = rows[0].len();
            let (mean, covariance) = mean_and_covariance(&rows, k);
            let mean_se = (0..k).map(|j| (covariance[j][j] / r).sqrt()).collect();
            EstimatorSummary {
                estimator: e,
                mean,
                covariance,
                mean_se,
            }
        })
        .collect();
    let tests = config
        .tests
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let rejections = ok.iter().filter(|rec| rec.tests[i].2).count() as f64;
            let rate = rejections / r;
            TestSummary {
                name: t,
                rejection_rate: rate,
                rejection_se: (rate * (1.0 - rate) / r).sqrt(),
                mean_statistic: compensated_sum(ok.iter().map(|rec| rec.tests[i].0)) / r,
                dof: ok[0].tests[i].1,
            }
        })
        .collect();
    Ok(ExperimentSummary {
        n: config.n,
        reps: config.reps,
        reps_failed,
        alpha: config.alpha,
        master_seed: config.master_seed,
        estimators,
        tests,
    })
}

/// Runs all replications and keeps the per-replication records.
///
/// Replications run in parallel but are collected in replication order and
/// reduced sequentially, so the result does not depend on the thread count.
pub fn run_experiment_with_records(config: &ExperimentConfig) -> Result<(ExperimentSummary, Vec<RepRecord>)> {
    config.validate()?;
    let g = config.score_function()?;
    let path = LocalPath::new(config.instance.dist().clone(), g, config.tilt)?;
    let root_n = (config.n as f64).sqrt();
    let sampling = path_distribution(&path, 1.0 / root_n)?;
    let max_dof = config
        .instance
        .moment_model()
        .n_moments()
        .max(config.instance.theta0().len());
    let critical = (0..=max_dof)
        .map(|k| {
            if k == 0 {
                Ok(f64::INFINITY)
            } else {
                critical_value(k, config.alpha)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let plan = Plan {
        config,
        sampling,
        critical,
        root_n,
    };
    let records: Vec<RepRecord> = (0..config.reps).into_par_iter().map(|r| plan.run(r)).collect();
    let summary = summarize(config, &records)?;
    Ok((summary, records))
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentSummary> {
    Ok(run_experiment_with_records(config)?.0)
}

/// Per-replication rows: rep, seed, failed, estimator coordinates, then
/// statistic, dof and reject flag for each test.
pub fn write_records_csv<W: Write>(config: &ExperimentConfig, records: &[RepRecord], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["rep".to_string(), "seed".to_string(), "failed".to_string()];
    let p = config.instance.theta0().len();
    for e in &config.estimators {
        header.extend((0..p).map(|j| format!("{}_{j}", e.name())));
    }
    for t in &config.tests {
        header.extend(["stat", "dof", "reject"].iter().map(|s| format!("{}_{s}", t.name())));
    }
    let csv_err = |e: csv::Error| Error::Io(e.to_string());
    w.write_record(&header).map_err(csv_err)?;
    for rec in records {
        let mut row = vec![
            rec.rep.to_string(),
            rec.seed.to_string(),
            u8::from(rec.failure.is_some()).to_string(),
        ];
        if rec.failure.is_some() {
            row.resize(header.len(), String::new());
        } else {
            for est in &rec.estimates {
                row.extend(est.iter().map(|v| v.to_string()));
            }
            for (stat, dof, reject) in &rec.tests {
                row.extend([stat.to_string(), dof.to_string(), u8::from(*reject).to_string()]);
            }
        }
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonEntry {
    pub quantity: String,
    pub predicted: f64,
    pub empirical: f64,
    pub se: f64,
    pub z: f64,
    pub pass: bool,
}

impl ComparisonEntry {
    fn new(quantity: String, predicted: f64, empirical: f64, se: f64) -> Self {
        let diff = empirical - predicted;
        let z = if se > 0.0 {
            diff / se
        } else if diff == 0.0 {
            0.0
        } else {
            diff.signum() * f64::INFINITY
        };
        ComparisonEntry {
            quantity,
            predicted,
            empirical,
            se,
            z,
            pass: z.abs() <= Z_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub entries: Vec<ComparisonEntry>,
    pub all_pass: bool,
}

/// z-scores of the empirical bias and rejection rates against the prediction.
///
/// Bias uses the Monte Carlo standard error of the mean; rejection rates use
/// the binomial standard error at the predicted power.
pub fn compare_to_theory(summary: &ExperimentSummary, pred: &Prediction) -> Result<ComparisonReport> {
    let mut entries = Vec::new();
    for s in &summary.estimators {
        let want = pred
            .bias_of(s.estimator)
            .ok_or_else(|| Error::ShapeMismatch(format!("no predicted bias for {}", s.estimator.name())))?;
        if want.len() != s.mean.len() {
            return Err(Error::ShapeMismatch(format!(
                "{}: predicted bias has {} coordinates, summary has {}",
                s.estimator.name(),
                want.len(),
                s.mean.len()
            )));
        }
        for (j, &w) in want.iter().enumerate() {
            entries.push(ComparisonEntry::new(
                format!("bias.{}[{j}]", s.estimator.name()),
                w,
                s.mean[j],
                s.mean_se[j],
            ));
        }
    }
    let r = (summary.reps - summary.reps_failed) as f64;
    for t in &summary.tests {
        let want = pred
            .test(t.name)
            .ok_or_else(|| Error::ShapeMismatch(format!("no predicted power for {}", t.name.name())))?;
        let se = (want.power * (1.0 - want.power) / r).sqrt();
        entries.push(ComparisonEntry::new(
            format!("rejection.{}", t.name.name()),
            want.power,
            t.rejection_rate,
            se,
        ));
    }
    let all_pass = entries.iter().all(|e| e.pass);
    Ok(ComparisonReport { entries, all_pass })
}
