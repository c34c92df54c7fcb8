//! Unit fixed-effects regression of the outcome on the treatment indicator,
//! covariates, an annual compute series and the treatment × compute
//! interaction.
//!
//! Unit effects are absorbed by demeaning within unit. There are no period
//! effects because compute varies only over time.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Read;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::linalg::least_squares;
use crate::panel::PanelDataset;

pub const TREATMENT_TERM: &str = "ImageNet2012";
pub const COMPUTE_TERM: &str = "Compute";
pub const INTERACTION_TERM: &str = "ImageNetXCompute";

/// Annual compute in petaflop/s-days, keyed by period.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComputeSeries {
    values: BTreeMap<i64, f64>,
}

impl ComputeSeries {
    pub fn new(values: BTreeMap<i64, f64>) -> Result<Self> {
        if let Some((p, v)) = values.iter().find(|(_, v)| !(v.is_finite() && **v > 0.0)) {
            return Err(Error::InvalidArgument(format!("compute for period {p} must be positive, got {v}")));
        }
        Ok(Self { values })
    }

    /// Reads CSV `period,compute`.
    pub fn from_csv<R: Read>(source: R) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            period: i64,
            compute: f64,
        }
        let mut values = BTreeMap::new();
        for (k, row) in csv::Reader::from_reader(source).deserialize::<Row>().enumerate() {
            let line = k + 2;
            let row = row.map_err(|e| Error::Parse { row: line, message: e.to_string() })?;
            if values.insert(row.period, row.compute).is_some() {
                return Err(Error::Parse { row: line, message: format!("duplicate period {}", row.period) });
            }
        }
        if values.is_empty() {
            return Err(Error::NoRows);
        }
        Self::new(values)
    }

    pub fn get(&self, period: i64) -> Option<f64> {
        self.values.get(&period).copied()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TwfeOptions {
    /// Enter compute as its natural log instead of in levels.
    pub log_compute: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Term {
    pub name: String,
    pub estimate: f64,
    pub std_error: f64,
    pub t_value: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionFit {
    pub terms: Vec<Term>,
    /// Within-unit R².
    pub r_squared: f64,
    pub n: usize,
    pub n_units: usize,
    pub df_resid: usize,
    pub sigma2: f64,
    pub log_compute: bool,
}

impl RegressionFit {
    pub fn term(&self, name: &str) -> Option<&Term> {
        self.terms.iter().find(|t| t.name == name)
    }

    pub fn coefficient(&self, name: &str) -> Option<f64> {
        self.term(name).map(|t| t.estimate)
    }

    /// Coefficients in the layout of a published regression table:
    /// estimate with significance stars over the standard error.
    pub fn to_table(&self, title: &str) -> String {
        let stars = |p: f64| match p {
            p if p < 0.01 => "***",
            p if p < 0.05 => "**",
            p if p < 0.1 => "*",
            _ => "",
        };
        let rows: Vec<(String, String)> = self
            .terms
            .iter()
            .map(|t| (t.name.clone(), format!("{:.4}{} ({:.4})", t.estimate, stars(t.p_value), t.std_error)))
            .chain([
                ("Unit FE".to_string(), "Yes".to_string()),
                ("Observations".to_string(), self.n.to_string()),
                ("R²".to_string(), format!("{:.3}", self.r_squared)),
            ])
            .collect();
        let left = rows.iter().map(|(n, _)| n.chars().count()).max().unwrap_or(0).max(8);
        let right = rows.iter().map(|(_, v)| v.chars().count()).max().unwrap_or(0).max(title.chars().count());
        let rule = "-".repeat(left + 2 + right);
        let mut out = String::new();
        let _ = writeln!(out, "{rule}");
        let _ = writeln!(out, "{:left$}  {title:>right$}", "");
        let _ = writeln!(out, "{rule}");
        for (k, (name, value)) in rows.iter().enumerate() {
            if k == self.terms.len() {
                let _ = writeln!(out, "{rule}");
            }
            let pad = left - name.chars().count();
            let _ = writeln!(out, "{name}{}  {value:>right$}", " ".repeat(pad));
        }
        let _ = writeln!(out, "{rule}");
        let _ = writeln!(out, "Note: *, ** and *** denote significance at the 10%, 5% and 1% level.");
        out
    }
}

/// Change in the outcome implied by the interaction coefficient for a
/// `delta_compute` change in compute.
pub fn marginal_effect(fit: &RegressionFit, delta_compute: f64) -> Result<f64> {
    fit.coefficient(INTERACTION_TERM)
        .map(|b| b * delta_compute)
        .ok_or_else(|| Error::InvalidArgument(format!("fit has no `{INTERACTION_TERM}` term")))
}

/// Raw design: rows are observed cells, grouped by unit.
struct Design {
    names: Vec<String>,
    x: DMatrix<f64>,
    y: DVector<f64>,
    unit_of_row: Vec<usize>,
    n_units: usize,
}

fn build_design(
    panel: &PanelDataset,
    compute: &ComputeSeries,
    covariates: &[String],
    opts: &TwfeOptions,
) -> Result<Design> {
    let covs = panel.covariate_matrices(covariates)?;
    let mut names = vec![TREATMENT_TERM.to_string()];
    names.extend(covariates.iter().cloned());
    names.push(COMPUTE_TERM.to_string());
    names.push(INTERACTION_TERM.to_string());
    let k = names.len();

    let mut rows: Vec<f64> = Vec::new();
    let mut y = Vec::new();
    let mut unit_of_row = Vec::new();
    let mut n_units = 0;
    for i in 0..panel.n_units() {
        let cells: Vec<usize> = (0..panel.n_periods()).filter(|&j| panel.is_observed(i, j)).collect();
        if cells.len() < 2 {
            return Err(Error::InvalidPanel(format!(
                "unit `{}` has {} observed periods; the within estimator needs at least 2",
                panel.units()[i],
                cells.len()
            )));
        }
        for &j in &cells {
            let period = panel.periods()[j];
            let c = compute.get(period).ok_or(Error::MissingCompute(period))?;
            let c = if opts.log_compute { c.ln() } else { c };
            let d = if panel.is_post(i, j) { 1.0 } else { 0.0 };
            rows.push(d);
            rows.extend(covs.iter().map(|m| m[(i, j)]));
            rows.push(c);
            rows.push(d * c);
            y.push(panel.outcome()[(i, j)]);
            unit_of_row.push(n_units);
        }
        n_units += 1;
    }
    let n = y.len();
    Ok(Design { names, x: DMatrix::from_row_slice(n, k, &rows), y: DVector::from_vec(y), unit_of_row, n_units })
}

fn demean(m: &mut DMatrix<f64>, unit_of_row: &[usize], n_units: usize) {
    for c in 0..m.ncols() {
        let mut sum = vec![0.0; n_units];
        let mut count = vec![0usize; n_units];
        for (r, &u) in unit_of_row.iter().enumerate() {
            sum[u] += m[(r, c)];
            count[u] += 1;
        }
        for (r, &u) in unit_of_row.iter().enumerate() {
            m[(r, c)] -= sum[u] / count[u] as f64;
        }
    }
}

/// Columns that are (numerically) linear combinations of earlier columns.
fn collinear_columns(x: &DMatrix<f64>, names: &[String]) -> Vec<String> {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut bad = Vec::new();
    for (c, name) in names.iter().enumerate() {
        let col = x.column(c).into_owned();
        let norm = col.norm();
        let mut v = col;
        for q in &basis {
            let proj = q.dot(&v);
            v -= q * proj;
        }
        if norm == 0.0 || v.norm() <= 1e-10 * norm {
            bad.push(name.clone());
        } else {
            let len = v.norm();
            basis.push(v / len);
        }
    }
    bad
}

pub fn within_ols(panel: &PanelDataset, compute: &ComputeSeries, covariates: &[String]) -> Result<RegressionFit> {
    within_ols_with(panel, compute, covariates, &TwfeOptions::default())
}

pub fn within_ols_with(
    panel: &PanelDataset,
    compute: &ComputeSeries,
    covariates: &[String],
    opts: &TwfeOptions,
) -> Result<RegressionFit> {
    let Design { names, mut x, y, unit_of_row, n_units } = build_design(panel, compute, covariates, opts)?;
    let mut y = DMatrix::from_column_slice(y.len(), 1, y.as_slice());
    demean(&mut x, &unit_of_row, n_units);
    demean(&mut y, &unit_of_row, n_units);
    let y = y.column(0).into_owned();

    let bad = collinear_columns(&x, &names);
    if !bad.is_empty() {
        return Err(Error::Collinear(bad));
    }
    let (n, k) = x.shape();
    let beta = least_squares(&x, &y).ok_or_else(|| Error::Collinear(names.clone()))?;
    let df = n
        .checked_sub(k + n_units)
        .filter(|&d| d > 0)
        .ok_or_else(|| Error::InvalidPanel(format!("{n} observations leave no residual degrees of freedom")))?;
    let resid = &y - &x * &beta;
    let ssr = resid.norm_squared();
    let tss = y.norm_squared();
    let sigma2 = ssr / df as f64;
    let xtx_inv = (x.transpose() * &x)
        .try_inverse()
        .ok_or_else(|| Error::Collinear(names.clone()))?;
    let t_dist = StudentsT::new(0.0, 1.0, df as f64).expect("positive degrees of freedom");
    let terms = names
        .into_iter()
        .enumerate()
        .map(|(c, name)| {
            let std_error = (sigma2 * xtx_inv[(c, c)]).sqrt();
            let t_value = beta[c] / std_error;
            let p_value = if t_value.is_finite() { 2.0 * t_dist.sf(t_value.abs()) } else { 0.0 };
            Term { name, estimate: beta[c], std_error, t_value, p_value }
        })
        .collect();
    let r_squared = if tss > 0.0 { (1.0 - ssr / tss).clamp(0.0, 1.0) } else { 1.0 };
    Ok(RegressionFit { terms, r_squared, n, n_units, df_resid: df, sigma2, log_compute: opts.log_compute })
}
