//! Linear IV model: OLS and 2SLS with homoskedastic variances, the
//! Durbin-Wu-Hausman contrast, and the efficient scores of the null
//! (exogenous) and maintained (IV) models.

use std::collections::HashMap;
use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::chisq;
use crate::dist::{Dataset, DiscreteDistribution};
use crate::error::{Error, Result};
use crate::linalg::{numerical_rank, pinv_symmetric, spd_cholesky, spd_inverse};
use crate::score::ScoreFunction;

/// Relative eigenvalue cutoff for the generalized inverse in the DWH statistic.
pub const DWH_RANK_TOL: f64 = 1e-8;

/// Column layout of an observation: (y, x1[k1], x2[k2], z1[q]).
///
/// X = (x1, x2) are the regressors and Z = (z1, x2) the instruments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IvLayout {
    pub k1: usize,
    pub k2: usize,
    pub q: usize,
}

impl IvLayout {
    pub fn width(&self) -> usize {
        1 + self.k1 + self.k2 + self.q
    }

    pub fn n_regressors(&self) -> usize {
        self.k1 + self.k2
    }

    pub fn n_instruments(&self) -> usize {
        self.q + self.k2
    }

    /// (y, X, Z) of one observation.
    pub fn split(&self, row: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
        let y = row[0];
        let x1 = &row[1..1 + self.k1];
        let x2 = &row[1 + self.k1..1 + self.k1 + self.k2];
        let z1 = &row[1 + self.k1 + self.k2..self.width()];
        let x = x1.iter().chain(x2).copied().collect();
        let z = z1.iter().chain(x2).copied().collect();
        (y, x, z)
    }

    /// The conditioning variables (x1, z1, x2) of the null model.
    pub(crate) fn conditioning_key(&self, row: &[f64]) -> Vec<u64> {
        row[1..self.width()].iter().map(|v| (v + 0.0).to_bits()).collect()
    }

    pub fn header(&self) -> Vec<String> {
        let mut h = vec!["y".to_string()];
        h.extend((1..=self.k1).map(|i| format!("x1_{i}")));
        h.extend((1..=self.k2).map(|i| format!("x2_{i}")));
        h.extend((1..=self.q).map(|i| format!("z1_{i}")));
        h
    }

    /// Recovers the layout from a CSV header `y,x1_1..,x2_1..,z1_1..`.
    pub fn from_header(cols: &[String]) -> Result<Self> {
        if cols.first().map(String::as_str) != Some("y") {
            return Err(Error::InvalidArgument("first column must be `y`".into()));
        }
        let count = |prefix: &str| cols.iter().filter(|c| c.starts_with(prefix)).count();
        let layout = IvLayout {
            k1: count("x1_"),
            k2: count("x2_"),
            q: count("z1_"),
        };
        if layout.header() != cols {
            return Err(Error::InvalidArgument(format!(
                "unexpected header {cols:?}; expected {:?}",
                layout.header()
            )));
        }
        Ok(layout)
    }
}

/// Structural parameters: Y = X'β0 + e with E[e | X1, Z] = 0, E[e² | X1, Z] = σ0².
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IVModel {
    pub beta0: Vec<f64>,
    pub sigma0_sq: f64,
    pub layout: IvLayout,
}

impl IVModel {
    pub fn new(beta0: Vec<f64>, sigma0_sq: f64, layout: IvLayout) -> Result<Self> {
        if layout.q < layout.k1 {
            return Err(Error::InvalidArgument(format!(
                "order condition fails: {} instruments for {} endogenous regressors",
                layout.q, layout.k1
            )));
        }
        if beta0.len() != layout.n_regressors() {
            return Err(Error::LengthMismatch {
                expected: layout.n_regressors(),
                got: beta0.len(),
            });
        }
        if !(sigma0_sq > 0.0) {
            return Err(Error::InvalidArgument("sigma0_sq must be positive".into()));
        }
        Ok(IVModel {
            beta0,
            sigma0_sq,
            layout,
        })
    }

    pub fn residual(&self, row: &[f64]) -> f64 {
        let (y, x, _) = self.layout.split(row);
        y - x.iter().zip(&self.beta0).map(|(a, b)| a * b).sum::<f64>()
    }
}

/// Observations split into y, X = (x1, x2) and Z = (z1, x2).
#[derive(Debug, Clone, PartialEq)]
pub struct IVDataset {
    pub y: DVector<f64>,
    pub x: DMatrix<f64>,
    pub z: DMatrix<f64>,
    pub layout: IvLayout,
}

impl IVDataset {
    pub fn from_dataset(data: &Dataset, layout: IvLayout) -> Result<Self> {
        if data.dim() != layout.width() {
            return Err(Error::LengthMismatch {
                expected: layout.width(),
                got: data.dim(),
            });
        }
        let n = data.n();
        let (k, l) = (layout.n_regressors(), layout.n_instruments());
        if n <= layout.k1 + layout.k2 + layout.q {
            return Err(Error::InvalidArgument(format!("too few observations ({n})")));
        }
        let mut y = DVector::zeros(n);
        let mut x = DMatrix::zeros(n, k);
        let mut z = DMatrix::zeros(n, l);
        for (i, row) in data.rows().enumerate() {
            let (yi, xi, zi) = layout.split(row);
            y[i] = yi;
            for (j, v) in xi.into_iter().enumerate() {
                x[(i, j)] = v;
            }
            for (j, v) in zi.into_iter().enumerate() {
                z[(i, j)] = v;
            }
        }
        Ok(IVDataset { y, x, z, layout })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    /// Rows in the (y, x1, x2, z1) layout.
    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        let (k1, k2, q) = (self.layout.k1, self.layout.k2, self.layout.q);
        (0..self.n())
            .map(|i| {
                let mut r = vec![self.y[i]];
                r.extend((0..k1 + k2).map(|j| self.x[(i, j)]));
                r.extend((0..q).map(|j| self.z[(i, j)]));
                r
            })
            .collect()
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let header: Vec<String> = rdr
            .headers()
            .map_err(|e| Error::Io(e.to_string()))?
            .iter()
            .map(str::to_string)
            .collect();
        let layout = IvLayout::from_header(&header)?;
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| Error::Io(e.to_string()))?;
            let row = rec
                .iter()
                .map(|f| {
                    f.parse::<f64>()
                        .map_err(|_| Error::InvalidArgument(format!("not a number: {f:?}")))
                })
                .collect::<Result<Vec<f64>>>()?;
            rows.push(row);
        }
        Self::from_dataset(&Dataset::from_rows(&rows)?, layout)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let io = |e: csv::Error| Error::Io(e.to_string());
        w.write_record(self.layout.header()).map_err(io)?;
        for row in self.to_rows() {
            w.write_record(row.iter().map(|v| format!("{v}"))).map_err(io)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Coefficients with the homoskedastic variance of √n(β̂ − β).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearEstimate {
    pub beta: Vec<f64>,
    /// σ̂² · bread.
    pub vcov: Vec<Vec<f64>>,
    pub sigma_sq_hat: f64,
    /// (X'X/n)⁻¹ for OLS, (X'P_Z X/n)⁻¹ for 2SLS.
    pub bread: Vec<Vec<f64>>,
    pub n: usize,
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn matrix_of(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let c = rows.first().map(|r| r.len()).unwrap_or(0);
    DMatrix::from_fn(rows.len(), c, |i, j| rows[i][j])
}

fn finish(data: &IVDataset, beta: DVector<f64>, bread: DMatrix<f64>) -> LinearEstimate {
    let n = data.n() as f64;
    let resid = &data.y - &data.x * &beta;
    let sigma_sq_hat = resid.norm_squared() / n;
    LinearEstimate {
        beta: beta.iter().copied().collect(),
        vcov: rows_of(&(&bread * sigma_sq_hat)),
        sigma_sq_hat,
        bread: rows_of(&bread),
        n: data.n(),
    }
}

/// β̂ = (X'X)⁻¹X'Y, σ̂² = RSS/n.
pub fn estimate_ols(data: &IVDataset) -> Result<LinearEstimate> {
    let n = data.n() as f64;
    let xtx = data.x.transpose() * &data.x;
    let chol = spd_cholesky(&xtx, Error::SingularDesign)?;
    let beta = chol.solve(&(data.x.transpose() * &data.y));
    let bread = chol.inverse() * n;
    Ok(finish(data, beta, bread))
}

/// β̃ = (X'P_Z X)⁻¹X'P_Z Y, σ̃² = RSS(β̃)/n.
pub fn estimate_2sls(data: &IVDataset) -> Result<LinearEstimate> {
    let n = data.n() as f64;
    let ztz = data.z.transpose() * &data.z;
    let ztz_chol = spd_cholesky(&ztz, Error::SingularInstrumentGram)?;
    let ztx = data.z.transpose() * &data.x;
    if numerical_rank(&ztx, 1e-10) < data.x.ncols() {
        return Err(Error::RankDeficientFirstStage);
    }
    let a = ztx.transpose() * ztz_chol.solve(&ztx);
    let a_chol = spd_cholesky(&a, Error::RankDeficientFirstStage)?;
    let zty = data.z.transpose() * &data.y;
    let beta = a_chol.solve(&(ztx.transpose() * ztz_chol.solve(&zty)));
    let bread = a_chol.inverse() * n;
    Ok(finish(data, beta, bread))
}

/// Value, degrees of freedom, and an optional predicted noncentrality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestStatistic {
    pub value: f64,
    pub dof: usize,
    pub noncentrality_hint: Option<f64>,
    /// Set when the variance contrast had eigenvalues below −tolerance.
    pub negative_spectrum_warning: bool,
}

impl TestStatistic {
    pub fn new(value: f64, dof: usize) -> Self {
        TestStatistic {
            value,
            dof,
            noncentrality_hint: None,
            negative_spectrum_warning: false,
        }
    }

    /// value > upper-α quantile of the central χ²_dof. Never rejects with dof 0.
    pub fn reject(&self, alpha: f64) -> Result<bool> {
        if self.dof == 0 {
            return Ok(false);
        }
        Ok(self.value > chisq::critical_value(self.dof, alpha)?)
    }
}

/// n (β̂_ols − β̃_2sls)' V̂⁻ (β̂_ols − β̃_2sls) with V̂ = σ̂²_ols (bread_2sls − bread_ols).
///
/// V̂⁻ is the Moore–Penrose inverse on eigenvalues above 1e-8 of the largest;
/// the retained rank is the degrees of freedom.
pub fn dwh_statistic(data: &IVDataset, ols: &LinearEstimate, tsls: &LinearEstimate) -> Result<TestStatistic> {
    if ols.n != data.n() || tsls.n != data.n() || ols.beta.len() != tsls.beta.len() {
        return Err(Error::ShapeMismatch("estimates do not come from this sample".into()));
    }
    let v = (matrix_of(&tsls.bread) - matrix_of(&ols.bread)) * ols.sigma_sq_hat;
    let pinv = pinv_symmetric(&v, DWH_RANK_TOL);
    let delta = DVector::from_iterator(ols.beta.len(), ols.beta.iter().zip(&tsls.beta).map(|(a, b)| a - b));
    let value = (data.n() as f64 * (delta.transpose() * &pinv.pinv * &delta)[0]).max(0.0);
    let mut stat = TestStatistic::new(value, pinv.rank);
    stat.negative_spectrum_warning = pinv.min_eigenvalue < -DWH_RANK_TOL * pinv.max_abs_eigenvalue;
    Ok(stat)
}

/// Population quantities of the IV model on a finite support.
#[derive(Debug, Clone)]
pub struct IvPopulation {
    pub e: Vec<f64>,
    pub x: Vec<DVector<f64>>,
    pub z: Vec<DVector<f64>>,
    pub exx: DMatrix<f64>,
    pub ezz: DMatrix<f64>,
    /// E[Z X'].
    pub ezx: DMatrix<f64>,
}

impl IvPopulation {
    /// Checks the null model on every (x1, z) cell and collects moments.
    pub fn new(dist: &DiscreteDistribution, model: &IVModel) -> Result<Self> {
        let layout = model.layout;
        if dist.dim() != layout.width() {
            return Err(Error::LengthMismatch {
                expected: layout.width(),
                got: dist.dim(),
            });
        }
        let e: Vec<f64> = dist.support().iter().map(|r| model.residual(r)).collect();
        let mut cells: HashMap<Vec<u64>, (f64, f64, f64)> = HashMap::new();
        for (s, r) in dist.support().iter().enumerate() {
            let p = dist.probs()[s];
            let c = cells.entry(layout.conditioning_key(r)).or_insert((0.0, 0.0, 0.0));
            c.0 += p;
            c.1 += p * e[s];
            c.2 += p * e[s] * e[s];
        }
        let sig = model.sigma0_sq;
        for (mass, first, second) in cells.values() {
            let mean = first / mass;
            let var = second / mass;
            if mean.abs() > 1e-9 * sig.sqrt().max(1.0) {
                return Err(Error::NullModelViolated(format!("E[e | x1, z] = {mean:e} on a cell")));
            }
            if (var - sig).abs() > 1e-9 * sig.max(1.0) {
                return Err(Error::NullModelViolated(format!(
                    "E[e² | x1, z] = {var} differs from sigma0_sq = {sig}"
                )));
            }
        }
        let (x, z): (Vec<_>, Vec<_>) = dist
            .support()
            .iter()
            .map(|r| {
                let (_, x, z) = layout.split(r);
                (DVector::from_vec(x), DVector::from_vec(z))
            })
            .unzip();
        let outer = |a: &[DVector<f64>], b: &[DVector<f64>]| {
            let mut acc = DMatrix::zeros(a[0].len(), b[0].len());
            for ((u, v), p) in a.iter().zip(b).zip(dist.probs()) {
                acc += u * v.transpose() * *p;
            }
            acc
        };
        let exx = outer(&x, &x);
        let ezz = outer(&z, &z);
        let ezx = outer(&z, &x);
        if numerical_rank(&ezx, 1e-10) < layout.n_regressors() {
            return Err(Error::RankDeficientFirstStage);
        }
        Ok(IvPopulation { e, x, z, exx, ezz, ezx })
    }

    /// E[XZ'] E[ZZ']⁻¹, the map from z e to the maintained-model score.
    pub fn first_stage(&self) -> Result<DMatrix<f64>> {
        Ok(self.ezx.transpose() * spd_inverse(&self.ezz, Error::SingularInstrumentGram)?)
    }
}

fn scores_from(
    dist: &DiscreteDistribution,
    coef: &DMatrix<f64>,
    v: &[DVector<f64>],
    e: &[f64],
) -> Result<Vec<ScoreFunction>> {
    (0..coef.nrows())
        .map(|k| {
            let vals = v.iter().zip(e).map(|(vs, es)| (coef.row(k) * vs)[0] * es).collect();
            ScoreFunction::centered(dist, vals)
        })
        .collect()
}

/// ℓ̇^P = x e / σ0² (null model) and ℓ̇^M = E[XZ']E[ZZ']⁻¹ z e / σ0² (maintained model).
pub fn iv_efficient_scores(
    dist: &DiscreteDistribution,
    model: &IVModel,
) -> Result<(Vec<ScoreFunction>, Vec<ScoreFunction>)> {
    let pop = IvPopulation::new(dist, model)?;
    let k = model.layout.n_regressors();
    let ell_p = scores_from(dist, &(DMatrix::identity(k, k) / model.sigma0_sq), &pop.x, &pop.e)?;
    let ell_m = scores_from(dist, &(pop.first_stage()? / model.sigma0_sq), &pop.z, &pop.e)?;
    Ok((ell_p, ell_m))
}

/// Influence functions of OLS, E[XX']⁻¹ x e, and 2SLS,
/// (E[XZ']E[ZZ']⁻¹E[ZX'])⁻¹ E[XZ']E[ZZ']⁻¹ z e.
pub fn iv_influence(dist: &DiscreteDistribution, model: &IVModel) -> Result<(Vec<ScoreFunction>, Vec<ScoreFunction>)> {
    let pop = IvPopulation::new(dist, model)?;
    let ols = spd_inverse(&pop.exx, Error::SingularDesign)?;
    let fs = pop.first_stage()?;
    let a = spd_inverse(&(&fs * &pop.ezx), Error::RankDeficientFirstStage)?;
    let nu = scores_from(dist, &ols, &pop.x, &pop.e)?;
    let tau = scores_from(dist, &(a * fs), &pop.z, &pop.e)?;
    Ok((nu, tau))
}

/// Population variance contrast σ0²[(E[XZ']E[ZZ']⁻¹E[ZX'])⁻¹ − E[XX']⁻¹] and its rank.
pub fn population_dwh_variance(dist: &DiscreteDistribution, model: &IVModel) -> Result<(DMatrix<f64>, usize)> {
    let pop = IvPopulation::new(dist, model)?;
    let fs = pop.first_stage()?;
    let v = (spd_inverse(&(&fs * &pop.ezx), Error::RankDeficientFirstStage)?
        - spd_inverse(&pop.exx, Error::SingularDesign)?)
        * model.sigma0_sq;
    let rank = pinv_symmetric(&v, DWH_RANK_TOL).rank;
    Ok((v, rank))
}
