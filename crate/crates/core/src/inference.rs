//! Blocked parametric bootstrap for the interactive-fixed-effects ATT and
//! the placebo diagnostics built on it.
//!
//! Each replicate rebuilds every unit's outcome path from the original fit:
//! untreated fitted values, plus the estimated gaps on treated post-onset
//! cells, plus a whole-unit residual block drawn with replacement from the
//! control residuals. The model is then re-estimated with the same factor
//! count. Replicate `b` draws from its own ChaCha stream keyed by
//! `(seed, b)`, so results do not depend on the number of worker threads.

use std::io::Write;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::att::{AttResult, Interval};
use crate::error::{Error, Result};
use crate::fmt::float17;
use crate::ife::{fit_ife, fit_ife_with, impute_and_att, FactorModelFit, FitOptions};
use crate::panel::PanelDataset;

/// Smallest replicate count for which intervals are reported.
pub const MIN_REPLICATES: usize = 100;
/// Attempts per replicate before the bootstrap gives up.
const MAX_ATTEMPTS: u64 = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapSpec {
    pub replicates: usize,
    pub seed: u64,
    pub ci_level: f64,
}

impl Default for BootstrapSpec {
    fn default() -> Self {
        Self { replicates: 2000, seed: 0, ci_level: 0.95 }
    }
}

impl BootstrapSpec {
    fn validate(&self) -> Result<()> {
        if self.replicates < MIN_REPLICATES {
            return Err(Error::InvalidArgument(format!(
                "bootstrap needs at least {MIN_REPLICATES} replicates, got {}",
                self.replicates
            )));
        }
        if !(self.ci_level > 0.0 && self.ci_level < 1.0) {
            return Err(Error::InvalidArgument("ci_level must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Bootstrap output including the raw replicate draws.
#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapRun {
    pub result: AttResult,
    pub fit: FactorModelFit,
    /// Pooled ATT of each replicate, in replicate order.
    pub draws: Vec<f64>,
    /// Replicates that had to be redrawn at least once.
    pub redrawn: usize,
}

impl BootstrapRun {
    /// CSV `replicate,att`.
    pub fn write_draws_csv<W: Write>(&self, sink: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        w.write_record(["replicate", "att"])?;
        for (b, d) in self.draws.iter().enumerate() {
            w.write_record([b.to_string(), float17(*d)])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Two-sided share of centred replicates at least as far from zero as
    /// the observed estimate.
    pub fn p_value(&self) -> f64 {
        let obs = self.result.att.abs();
        let extreme = self.draws.iter().filter(|d| (*d - self.result.att).abs() >= obs).count();
        extreme as f64 / self.draws.len() as f64
    }
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn summarize(draws: &[f64], level: f64) -> (f64, Interval) {
    let n = draws.len() as f64;
    let mean = draws.iter().sum::<f64>() / n;
    let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let mut sorted = draws.to_vec();
    sorted.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    (var.sqrt(), Interval { level, lo: quantile(&sorted, tail), hi: quantile(&sorted, 1.0 - tail) })
}

struct Replicate {
    att: f64,
    by_period: Vec<f64>,
    redrawn: bool,
}

/// [`bootstrap_att`] returning the replicate draws as well.
pub fn bootstrap_run(
    panel: &PanelDataset,
    r: usize,
    covariates: &[String],
    spec: &BootstrapSpec,
) -> Result<BootstrapRun> {
    spec.validate()?;
    let fit = fit_ife(panel, r, covariates)?;
    let base = impute_and_att(&fit, panel)?;
    let (n, t) = (panel.n_units(), panel.n_periods());
    let controls = panel.control_indices();

    let mut untreated = DMatrix::zeros(n, t);
    let mut gap = DMatrix::zeros(n, t);
    let mut resid = DMatrix::zeros(n, t);
    // inflate residuals for the degrees of freedom spent on the fit
    let dof = fit.n_control_obs.saturating_sub(fit.n_params);
    let inflate = if dof > 0 { (fit.n_control_obs as f64 / dof as f64).sqrt() } else { 1.0 };
    for i in 0..n {
        for j in 0..t {
            if !panel.is_observed(i, j) {
                continue;
            }
            let yhat = fit.predict(panel, i, j);
            untreated[(i, j)] = yhat;
            if panel.is_post(i, j) {
                gap[(i, j)] = panel.outcome()[(i, j)] - yhat;
            } else if !panel.is_treated(i) {
                resid[(i, j)] = inflate * (panel.outcome()[(i, j)] - yhat);
            }
        }
    }
    // donors observed in each period, for filling cells a drawn block lacks
    let donors_at: Vec<Vec<usize>> =
        (0..t).map(|j| controls.iter().copied().filter(|&d| panel.is_observed(d, j)).collect()).collect();
    let periods = base.periods();
    let opts = FitOptions::default();

    let one = |b: usize, attempt: u64| -> Result<Option<(f64, Vec<f64>)>> {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(b as u64 + attempt * spec.replicates as u64);
        let mut y = DMatrix::zeros(n, t);
        for i in 0..n {
            let donor = controls[rng.random_range(0..controls.len())];
            for j in 0..t {
                if !panel.is_observed(i, j) {
                    continue;
                }
                let e = if panel.is_observed(donor, j) {
                    resid[(donor, j)]
                } else if donors_at[j].is_empty() {
                    0.0
                } else {
                    resid[(donors_at[j][rng.random_range(0..donors_at[j].len())], j)]
                };
                y[(i, j)] = untreated[(i, j)] + gap[(i, j)] + e;
            }
        }
        let boot = panel.with_outcome(y)?;
        let refit = match fit_ife_with(&boot, r, covariates, &opts, Some(&fit)) {
            Ok(f) if f.converged => f,
            Ok(_) | Err(Error::InsufficientPrePeriods { .. }) => return Ok(None),
            Err(e) => return Err(e),
        };
        let att = impute_and_att(&refit, &boot)?;
        let by_period = periods
            .iter()
            .map(|p| att.att_by_period.iter().find(|q| q.period == *p).map_or(f64::NAN, |q| q.att))
            .collect();
        Ok(Some((att.att, by_period)))
    };

    let reps: Vec<Replicate> = (0..spec.replicates)
        .into_par_iter()
        .map(|b| {
            for attempt in 0..MAX_ATTEMPTS {
                if let Some((att, by_period)) = one(b, attempt)? {
                    return Ok(Replicate { att, by_period, redrawn: attempt > 0 });
                }
            }
            Err(Error::Bootstrap(format!("replicate {b} failed to converge after {MAX_ATTEMPTS} draws")))
        })
        .collect::<Result<Vec<_>>>()?;

    let draws: Vec<f64> = reps.iter().map(|r| r.att).collect();
    let (se, ci) = summarize(&draws, spec.ci_level);
    let mut result = base;
    result.se = Some(se);
    result.ci = Some(ci);
    for (k, p) in result.att_by_period.iter_mut().enumerate() {
        let col: Vec<f64> = reps.iter().map(|r| r.by_period[k]).collect();
        let (se, ci) = summarize(&col, spec.ci_level);
        p.se = Some(se);
        p.ci = Some(ci);
    }
    Ok(BootstrapRun { result, fit, draws, redrawn: reps.iter().filter(|r| r.redrawn).count() })
}

/// ATT with bootstrap standard error and percentile interval.
pub fn bootstrap_att(
    panel: &PanelDataset,
    r: usize,
    covariates: &[String],
    spec: &BootstrapSpec,
) -> Result<AttResult> {
    bootstrap_run(panel, r, covariates, spec).map(|run| run.result)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlaceboKind {
    InSpace,
    InTime,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlaceboReport {
    pub kind: PlaceboKind,
    pub att_result: AttResult,
    pub p_value: f64,
    /// First and last period of the pseudo-treatment window.
    pub window: (i64, i64),
    pub pseudo_treated: Vec<String>,
    pub shift_years: Option<i64>,
}

/// Relabels never-treated units as treated at `onset` on a panel without
/// the genuinely treated units and bootstraps the pseudo-ATT.
pub fn placebo_in_space(
    panel: &PanelDataset,
    pseudo_treated: &[String],
    onset: i64,
    r: usize,
    covariates: &[String],
    spec: &BootstrapSpec,
) -> Result<(PlaceboReport, BootstrapRun)> {
    if pseudo_treated.is_empty() {
        return Err(Error::InvalidArgument("placebo-in-space needs at least one pseudo-treated unit".into()));
    }
    let mut chosen = Vec::with_capacity(pseudo_treated.len());
    for name in pseudo_treated {
        let i = panel
            .unit_index(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown unit `{name}`")))?;
        if panel.is_treated(i) {
            return Err(Error::InvalidArgument(format!("`{name}` is genuinely treated")));
        }
        chosen.push(i);
    }
    let keep = panel.control_indices();
    let relabelled: Vec<Option<i64>> =
        (0..panel.n_units()).map(|i| chosen.contains(&i).then_some(onset)).collect();
    let analysis = panel.with_onsets(relabelled)?.select_units(&keep)?;
    let run = bootstrap_run(&analysis, r, covariates, spec)?;
    let last = *analysis.periods().last().expect("non-empty panel");
    let report = PlaceboReport {
        kind: PlaceboKind::InSpace,
        p_value: run.p_value(),
        att_result: run.result.clone(),
        window: (onset, last),
        pseudo_treated: pseudo_treated.to_vec(),
        shift_years: None,
    };
    Ok((report, run))
}

/// Drops treated post-onset cells, moves each treated onset `shift_years`
/// earlier and bootstraps the pseudo-ATT over the artificial window.
pub fn placebo_in_time(
    panel: &PanelDataset,
    shift_years: i64,
    r: usize,
    covariates: &[String],
    spec: &BootstrapSpec,
    min_pre: usize,
) -> Result<(PlaceboReport, BootstrapRun)> {
    if !(2..=4).contains(&shift_years) {
        return Err(Error::InvalidArgument(format!("shift_years must be 2, 3 or 4, got {shift_years}")));
    }
    let treated = panel.treated_indices();
    if treated.is_empty() {
        return Err(Error::InvalidArgument("placebo-in-time needs treated units".into()));
    }
    let mut mask = panel.mask().clone();
    let mut onsets = panel.onsets().to_vec();
    let (mut start, mut end) = (i64::MAX, i64::MIN);
    for &i in &treated {
        let onset = panel.onset(i).expect("treated");
        let pseudo = onset - shift_years;
        let mut pre = 0;
        for (j, &p) in panel.periods().iter().enumerate() {
            if p >= onset {
                mask[(i, j)] = false;
            } else if p < pseudo && mask[(i, j)] {
                pre += 1;
            }
        }
        if pre < min_pre {
            return Err(Error::InsufficientPrePeriods { unit: panel.units()[i].clone(), have: pre, need: min_pre });
        }
        onsets[i] = Some(pseudo);
        start = start.min(pseudo);
        end = end.max(onset - 1);
    }
    let analysis = panel.with_mask(mask)?.with_onsets(onsets)?;
    let all: Vec<usize> = (0..analysis.n_units()).collect();
    let analysis = analysis.select_units(&all)?;
    let run = bootstrap_run(&analysis, r, covariates, spec)?;
    let report = PlaceboReport {
        kind: PlaceboKind::InTime,
        p_value: run.p_value(),
        att_result: run.result.clone(),
        window: (start, end),
        pseudo_treated: treated.iter().map(|&i| panel.units()[i].clone()).collect(),
        shift_years: Some(shift_years),
    };
    Ok((report, run))
}
