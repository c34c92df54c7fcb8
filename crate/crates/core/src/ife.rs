//! Interactive-fixed-effects counterfactual estimation.
//!
//! The outcome model is
//!
//! ```text
//! Y_it = δ_it θ_it + x_it'β + λ_i'f_t + α_i + η_t + ε_it
//! ```
//!
//! Estimation runs in two steps. Step 1 fits `(β, F, Λ, α, η)` on control
//! units only, alternating between the additive/factor block (a double
//! centring followed by principal components of the partial residuals) and a
//! least-squares update of `β`. Unobserved control cells are filled with the
//! current fitted values before each principal-components step, which makes
//! every sweep a majorize-minimize step on the observed-cell objective.
//! Step 2 projects each treated unit's pre-onset residuals on `[1, f_t]` to
//! recover its intercept and loadings; post-onset counterfactuals follow
//! from the fitted model.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::att::{AttResult, CellGap};
use crate::error::{Error, Result};
use crate::linalg::{leading_components, least_squares, least_squares_min_norm};
use crate::panel::PanelDataset;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    /// Relative change in the step-1 objective that counts as converged.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { tol: 1e-8, max_iter: 2000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorModelFit {
    pub units: Vec<String>,
    pub periods: Vec<i64>,
    pub covariates: Vec<String>,
    pub beta: Vec<f64>,
    pub r: usize,
    /// One row `f_t` per period.
    pub factors: Vec<Vec<f64>>,
    /// One row `λ_i` per unit, controls and treated.
    pub loadings: Vec<Vec<f64>>,
    pub unit_effects: Vec<f64>,
    /// Time effects, including the grand mean.
    pub time_effects: Vec<f64>,
    /// Periods with at least one observed control cell; only these carry an
    /// identified time effect.
    pub time_identified: Vec<bool>,
    pub sigma2: f64,
    /// Sum of squared control residuals at the final iterate.
    pub objective: f64,
    pub n_control_obs: usize,
    pub n_params: usize,
    pub iterations: usize,
    pub converged: bool,
    /// Treated units whose loading regression had exactly `r + 1` points.
    pub exactly_identified: Vec<String>,
    pub objective_trace: Vec<f64>,
}

impl FactorModelFit {
    /// Untreated prediction `x'β + λ_i'f_t + α_i + η_t` for a panel cell.
    pub fn predict(&self, panel: &PanelDataset, unit: usize, period: usize) -> f64 {
        let xb: f64 = self
            .covariates
            .iter()
            .zip(&self.beta)
            .map(|(name, b)| b * panel.covariate(name).map_or(0.0, |m| m[(unit, period)]))
            .sum();
        let lf: f64 = self.loadings[unit].iter().zip(&self.factors[period]).map(|(l, f)| l * f).sum();
        xb + lf + self.unit_effects[unit] + self.time_effects[period]
    }

    fn check_panel(&self, panel: &PanelDataset) -> Result<()> {
        if self.units != panel.units() || self.periods != panel.periods() {
            return Err(Error::FitMismatch("units or periods differ".into()));
        }
        for name in &self.covariates {
            if panel.covariate(name).is_none() {
                return Err(Error::UnknownCovariate(name.clone()));
            }
        }
        Ok(())
    }
}

/// Result of the factor-count cross-validation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    /// `(r, mspe)` for `r = 0..=r_max`.
    pub mspe_by_r: Vec<(usize, f64)>,
    pub chosen_r: usize,
}

/// Step-1 estimates on the control units.
struct ControlFit {
    beta: DVector<f64>,
    alpha: Vec<f64>,
    eta: Vec<f64>,
    lambda: DMatrix<f64>,
    factors: DMatrix<f64>,
    identified: Vec<bool>,
    objective: f64,
    n_obs: usize,
    iterations: usize,
    converged: bool,
    trace: Vec<f64>,
}

fn check_r(panel: &PanelDataset, r: usize) -> Result<()> {
    let n_controls = panel.control_indices().len();
    let bound = n_controls.min(panel.n_periods()).saturating_sub(1);
    if r > bound {
        return Err(Error::TooManyFactors {
            r,
            bound,
            reason: format!("{n_controls} control units and {} periods", panel.n_periods()),
        });
    }
    Ok(())
}

fn fit_controls(
    panel: &PanelDataset,
    r: usize,
    covariates: &[String],
    opts: &FitOptions,
    warm: Option<&FactorModelFit>,
) -> Result<ControlFit> {
    let controls = panel.control_indices();
    let (nc, t) = (controls.len(), panel.n_periods());
    let y = DMatrix::from_fn(nc, t, |a, j| panel.outcome()[(controls[a], j)]);
    let mask = DMatrix::from_fn(nc, t, |a, j| panel.is_observed(controls[a], j));
    let xs: Vec<DMatrix<f64>> = panel
        .covariate_matrices(covariates)?
        .into_iter()
        .map(|m| DMatrix::from_fn(nc, t, |a, j| m[(controls[a], j)]))
        .collect();
    let p = xs.len();
    let n_obs = mask.iter().filter(|&&m| m).count();
    let identified: Vec<bool> = (0..t).map(|j| (0..nc).any(|a| mask[(a, j)])).collect();

    // X'X over observed control cells is fixed across sweeps
    let xtx = DMatrix::from_fn(p, p, |k, l| {
        let mut s = 0.0;
        for a in 0..nc {
            for j in 0..t {
                if mask[(a, j)] {
                    s += xs[k][(a, j)] * xs[l][(a, j)];
                }
            }
        }
        s
    });
    let xtx_chol = if p > 0 {
        Some(xtx.clone().cholesky().ok_or_else(|| Error::Collinear(covariates.to_vec()))?)
    } else {
        None
    };

    let tss: f64 = y.iter().zip(mask.iter()).filter(|(_, &m)| m).map(|(v, _)| v * v).sum();
    let floor = tss * 1e-16;

    let mut beta = DVector::zeros(p);
    // current untreated fit A + L, used to fill unobserved cells
    let mut fitted = DMatrix::zeros(nc, t);
    match warm {
        Some(w) if w.covariates == covariates && w.units == panel.units() && w.periods == panel.periods() => {
            beta = DVector::from_column_slice(&w.beta);
            for (a, &i) in controls.iter().enumerate() {
                for j in 0..t {
                    let lf: f64 = w.loadings[i].iter().zip(&w.factors[j]).map(|(l, f)| l * f).sum();
                    fitted[(a, j)] = w.unit_effects[i] + w.time_effects[j] + lf;
                }
            }
        }
        _ => {
            // pooled OLS for β, then additive means of the remainder
            if p > 0 {
                let cells: Vec<(usize, usize)> =
                    (0..nc).flat_map(|a| (0..t).map(move |j| (a, j))).filter(|&c| mask[c]).collect();
                let design = DMatrix::from_fn(cells.len(), p + 1, |row, c| {
                    if c == 0 {
                        1.0
                    } else {
                        xs[c - 1][cells[row]]
                    }
                });
                let target = DVector::from_fn(cells.len(), |row, _| y[cells[row]]);
                if let Some(coef) = least_squares(&design, &target) {
                    beta = coef.rows(1, p).into_owned();
                }
            }
            let rem = DMatrix::from_fn(nc, t, |a, j| y[(a, j)] - (0..p).map(|k| beta[k] * xs[k][(a, j)]).sum::<f64>());
            let grand = mean_where(rem.iter().zip(mask.iter()), 0.0);
            let rows: Vec<f64> =
                (0..nc).map(|a| mean_where(rem.row(a).iter().zip(mask.row(a).iter()), grand)).collect();
            let cols: Vec<f64> =
                (0..t).map(|j| mean_where(rem.column(j).iter().zip(mask.column(j).iter()), grand)).collect();
            for a in 0..nc {
                for j in 0..t {
                    fitted[(a, j)] = rows[a] + cols[j] - grand;
                }
            }
        }
    }

    let mut u = DMatrix::zeros(nc, t);
    let mut alpha = vec![0.0; nc];
    let mut eta = vec![0.0; t];
    let mut lambda = DMatrix::zeros(nc, r);
    let mut factors = DMatrix::zeros(t, r);
    let mut trace = Vec::new();
    let mut prev = f64::INFINITY;
    let mut converged = false;
    let mut iterations = 0;
    let mut objective = f64::INFINITY;

    while iterations < opts.max_iter {
        iterations += 1;
        for a in 0..nc {
            for j in 0..t {
                u[(a, j)] = if mask[(a, j)] {
                    let xb: f64 = (0..p).map(|k| beta[k] * xs[k][(a, j)]).sum();
                    y[(a, j)] - xb
                } else {
                    fitted[(a, j)]
                };
            }
        }
        // additive block and factor block jointly on the completed matrix
        let grand = u.mean();
        let row_means: Vec<f64> = (0..nc).map(|a| u.row(a).mean()).collect();
        let col_means: Vec<f64> = (0..t).map(|j| u.column(j).mean()).collect();
        let low_rank = if r > 0 {
            let centred = DMatrix::from_fn(nc, t, |a, j| u[(a, j)] - row_means[a] - col_means[j] + grand);
            let (l, f) = leading_components(&centred, r);
            lambda = l;
            factors = f;
            &lambda * factors.transpose()
        } else {
            DMatrix::zeros(nc, t)
        };
        let resid = &u - &low_rank;
        let grand = resid.mean();
        for (a, al) in alpha.iter_mut().enumerate() {
            *al = resid.row(a).mean() - grand;
        }
        for (j, et) in eta.iter_mut().enumerate() {
            *et = resid.column(j).mean();
        }
        for a in 0..nc {
            for j in 0..t {
                fitted[(a, j)] = alpha[a] + eta[j] + low_rank[(a, j)];
            }
        }
        if let Some(chol) = &xtx_chol {
            let xty = DVector::from_fn(p, |k, _| {
                let mut s = 0.0;
                for a in 0..nc {
                    for j in 0..t {
                        if mask[(a, j)] {
                            s += xs[k][(a, j)] * (y[(a, j)] - fitted[(a, j)]);
                        }
                    }
                }
                s
            });
            beta = chol.solve(&xty);
        }
        objective = 0.0;
        for a in 0..nc {
            for j in 0..t {
                if mask[(a, j)] {
                    let xb: f64 = (0..p).map(|k| beta[k] * xs[k][(a, j)]).sum();
                    let e = y[(a, j)] - xb - fitted[(a, j)];
                    objective += e * e;
                }
            }
        }
        trace.push(objective);
        if prev.is_finite() && (prev - objective).abs() <= opts.tol * prev.max(floor) {
            converged = true;
            break;
        }
        prev = objective;
    }

    Ok(ControlFit {
        beta,
        alpha,
        eta,
        lambda,
        factors,
        identified,
        objective,
        n_obs,
        iterations,
        converged,
        trace,
    })
}

fn mean_where<'a>(it: impl Iterator<Item = (&'a f64, &'a bool)>, fallback: f64) -> f64 {
    let (s, n) = it.filter(|(_, &m)| m).fold((0.0, 0usize), |(s, n), (v, _)| (s + v, n + 1));
    if n == 0 {
        fallback
    } else {
        s / n as f64
    }
}

impl ControlFit {
    /// `Y_it − x_it'β − η_t` for a panel cell.
    fn partial_residual(&self, panel: &PanelDataset, xs: &[&DMatrix<f64>], unit: usize, period: usize) -> f64 {
        let xb: f64 = xs.iter().zip(self.beta.iter()).map(|(m, b)| b * m[(unit, period)]).sum();
        panel.outcome()[(unit, period)] - xb - self.eta[period]
    }

    /// Regresses a treated unit's partial residuals on `[1, f_t]` over
    /// `cells`, returning `(α_i, λ_i)`.
    fn loading_regression(
        &self,
        panel: &PanelDataset,
        xs: &[&DMatrix<f64>],
        unit: usize,
        cells: &[usize],
    ) -> Result<(f64, Vec<f64>)> {
        let r = self.factors.ncols();
        let design = DMatrix::from_fn(cells.len(), r + 1, |row, c| {
            if c == 0 {
                1.0
            } else {
                self.factors[(cells[row], c - 1)]
            }
        });
        let z = DVector::from_fn(cells.len(), |row, _| self.partial_residual(panel, xs, unit, cells[row]));
        if cells.len() < r + 1 {
            return Err(Error::InsufficientPrePeriods {
                unit: panel.units()[unit].clone(),
                have: cells.len(),
                need: r + 1,
            });
        }
        // factors that are flat over the pre-period make the design singular;
        // the minimum-norm solution still yields well-defined predictions
        let coef = least_squares(&design, &z).unwrap_or_else(|| least_squares_min_norm(&design, &z));
        Ok((coef[0], coef.iter().skip(1).copied().collect()))
    }

    fn usable_pre(&self, panel: &PanelDataset, unit: usize) -> Vec<usize> {
        panel.pre_periods(unit).into_iter().filter(|&j| self.identified[j]).collect()
    }
}

/// Fits the interactive-fixed-effects model with `r` factors.
pub fn fit_ife(panel: &PanelDataset, r: usize, covariates: &[String]) -> Result<FactorModelFit> {
    fit_ife_with(panel, r, covariates, &FitOptions::default(), None)
}

/// [`fit_ife`] with explicit tolerances and an optional warm start from a
/// previous fit on a panel with the same units and periods.
pub fn fit_ife_with(
    panel: &PanelDataset,
    r: usize,
    covariates: &[String],
    opts: &FitOptions,
    warm: Option<&FactorModelFit>,
) -> Result<FactorModelFit> {
    check_r(panel, r)?;
    let xs = panel.covariate_matrices(covariates)?;
    let cf = fit_controls(panel, r, covariates, opts, warm)?;
    let n = panel.n_units();
    let t = panel.n_periods();
    let mut unit_effects = vec![0.0; n];
    let mut loadings = vec![vec![0.0; r]; n];
    for (a, &i) in panel.control_indices().iter().enumerate() {
        unit_effects[i] = cf.alpha[a];
        loadings[i] = cf.lambda.row(a).iter().copied().collect();
    }
    let mut exactly_identified = Vec::new();
    for i in panel.treated_indices() {
        let cells = cf.usable_pre(panel, i);
        if cells.len() < r + 1 {
            return Err(Error::InsufficientPrePeriods {
                unit: panel.units()[i].clone(),
                have: cells.len(),
                need: r + 1,
            });
        }
        if cells.len() == r + 1 {
            exactly_identified.push(panel.units()[i].clone());
        }
        let (alpha, lambda) = cf.loading_regression(panel, &xs, i, &cells)?;
        unit_effects[i] = alpha;
        loadings[i] = lambda;
    }
    let n_controls = panel.control_indices().len();
    let t_ident = cf.identified.iter().filter(|&&b| b).count();
    let n_params = (n_controls + t_ident).saturating_sub(1) + covariates.len() + r * (n_controls + t_ident - r);
    let dof = cf.n_obs.saturating_sub(n_params);
    let sigma2 = cf.objective / if dof > 0 { dof } else { cf.n_obs.max(1) } as f64;
    Ok(FactorModelFit {
        units: panel.units().to_vec(),
        periods: panel.periods().to_vec(),
        covariates: covariates.to_vec(),
        beta: cf.beta.iter().copied().collect(),
        r,
        factors: (0..t).map(|j| cf.factors.row(j).iter().copied().collect()).collect(),
        loadings,
        unit_effects,
        time_effects: cf.eta.clone(),
        time_identified: cf.identified.clone(),
        sigma2,
        objective: cf.objective,
        n_control_obs: cf.n_obs,
        n_params,
        iterations: cf.iterations,
        converged: cf.converged,
        exactly_identified,
        objective_trace: cf.trace,
    })
}

/// Imputes untreated outcomes for every observed treated post-onset cell and
/// averages the gaps.
pub fn impute_and_att(fit: &FactorModelFit, panel: &PanelDataset) -> Result<AttResult> {
    fit.check_panel(panel)?;
    let mut gaps = Vec::new();
    for i in panel.treated_indices() {
        for j in 0..panel.n_periods() {
            if !(panel.is_observed(i, j) && panel.is_post(i, j)) {
                continue;
            }
            if !fit.time_identified[j] {
                return Err(Error::NoTimeEffect { unit: panel.units()[i].clone(), period: panel.periods()[j] });
            }
            let observed = panel.outcome()[(i, j)];
            let counterfactual = fit.predict(panel, i, j);
            gaps.push(CellGap {
                unit: panel.units()[i].clone(),
                period: panel.periods()[j],
                observed,
                counterfactual,
                gap: observed - counterfactual,
            });
        }
    }
    AttResult::from_gaps(gaps)
}

/// Largest factor count [`choose_r`] can evaluate on this panel.
pub fn cv_bound(panel: &PanelDataset) -> usize {
    let control_bound = panel.control_indices().len().min(panel.n_periods()).saturating_sub(1);
    let pre_bound = panel
        .treated_indices()
        .iter()
        .map(|&i| panel.pre_periods(i).len())
        .min()
        .unwrap_or(0)
        .saturating_sub(2);
    control_bound.min(pre_bound)
}

/// Chooses the factor count by leave-one-out prediction of treated
/// pre-onset cells.
///
/// For each candidate `r`, step 1 is fitted once on the controls; then each
/// observed pre-onset cell of each treated unit is withheld from that unit's
/// loading regression and predicted. The smallest `r` attaining the minimum
/// mean squared prediction error wins.
pub fn choose_r(panel: &PanelDataset, r_max: usize, covariates: &[String]) -> Result<CvResult> {
    choose_r_with(panel, r_max, covariates, &FitOptions::default())
}

pub fn choose_r_with(
    panel: &PanelDataset,
    r_max: usize,
    covariates: &[String],
    opts: &FitOptions,
) -> Result<CvResult> {
    let treated = panel.treated_indices();
    if treated.is_empty() {
        return Err(Error::InvalidArgument("cross-validation needs treated units".into()));
    }
    for &i in &treated {
        let have = panel.pre_periods(i).len();
        if have < 2 {
            return Err(Error::InsufficientPrePeriods { unit: panel.units()[i].clone(), have, need: 2 });
        }
    }
    let bound = cv_bound(panel);
    if r_max > bound {
        return Err(Error::TooManyFactors {
            r: r_max,
            bound,
            reason: "each candidate needs r + 2 treated pre-periods and r < min(controls, periods)".into(),
        });
    }
    let xs = panel.covariate_matrices(covariates)?;
    let mspe: Vec<f64> = (0..=r_max)
        .into_par_iter()
        .map(|r| -> Result<f64> {
            let cf = fit_controls(panel, r, covariates, opts, None)?;
            let mut sse = 0.0;
            let mut count = 0usize;
            for &i in &treated {
                let cells = cf.usable_pre(panel, i);
                for (k, &held) in cells.iter().enumerate() {
                    let rest: Vec<usize> =
                        cells.iter().enumerate().filter(|&(m, _)| m != k).map(|(_, &c)| c).collect();
                    let (alpha, lambda) = cf.loading_regression(panel, &xs, i, &rest)?;
                    let lf: f64 = lambda.iter().enumerate().map(|(c, l)| l * cf.factors[(held, c)]).sum();
                    let pred = alpha + lf;
                    let e = cf.partial_residual(panel, &xs, i, held) - pred;
                    sse += e * e;
                    count += 1;
                }
            }
            Ok(sse / count.max(1) as f64)
        })
        .collect::<Result<Vec<f64>>>()?;

    // relative tie tolerance on the scale of the held-out outcomes
    let mut scale = 0.0;
    let mut n = 0usize;
    for &i in &treated {
        for j in panel.pre_periods(i) {
            scale += panel.outcome()[(i, j)].powi(2);
            n += 1;
        }
    }
    let tie = 1e-12 * scale / n.max(1) as f64;
    let best = mspe.iter().copied().fold(f64::INFINITY, f64::min);
    let chosen_r = mspe.iter().position(|&m| m <= best + tie).unwrap_or(0);
    Ok(CvResult { mspe_by_r: mspe.into_iter().enumerate().collect(), chosen_r })
}
