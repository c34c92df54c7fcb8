//! Nuclear-norm regularized matrix completion (soft-impute) and the
//! counterfactual estimator built on it.
//!
//! The model is purely low rank: unit and time effects are absorbed by the
//! leading singular directions rather than estimated separately.

use std::io::Write;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::att::{AttResult, CellGap};
use crate::error::{Error, Result};
use crate::fmt::float17;
use crate::linalg::{nuclear_norm, svd_sorted};
use crate::panel::PanelDataset;

/// Share of observed control cells held out in each CV fold.
const HOLDOUT_SHARE: f64 = 0.1;
/// Ratio between consecutive penalties on the warm-start path.
const PATH_RATIO: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct CompletionResult {
    pub completed: DMatrix<f64>,
    /// Singular values above `lambda` in the final iterate.
    pub rank: usize,
    pub lambda: f64,
    /// Held-out mean squared error per candidate penalty, if CV was run.
    pub cv_table: Option<Vec<(f64, f64)>>,
    pub iterations: usize,
    pub converged: bool,
    /// Objective `½‖P_Ω(Y − Z)‖² + λ‖Z‖_*` after every iteration of the
    /// final penalty.
    pub objective_trace: Vec<f64>,
}

impl CompletionResult {
    /// CSV `lambda,mse`; empty body when no CV was run.
    pub fn write_cv_csv<W: Write>(&self, sink: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        w.write_record(["lambda", "mse"])?;
        for (lambda, mse) in self.cv_table.iter().flatten() {
            w.write_record([float17(*lambda), float17(*mse)])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn threshold_with_rank(m: &DMatrix<f64>, lambda: f64) -> (DMatrix<f64>, usize) {
    let svd = svd_sorted(m);
    let shrunk: Vec<f64> = svd.singular_values.iter().map(|s| (s - lambda).max(0.0)).collect();
    let rank = shrunk.iter().take_while(|&&s| s > 0.0).count();
    let mut out = DMatrix::zeros(m.nrows(), m.ncols());
    for k in 0..rank {
        out += svd.u.column(k) * svd.v_t.row(k) * shrunk[k];
    }
    (out, rank)
}

/// Singular value soft-thresholding `U·max(Σ − λ, 0)·Vᵀ`.
pub fn soft_threshold(m: &DMatrix<f64>, lambda: f64) -> DMatrix<f64> {
    threshold_with_rank(m, lambda.max(0.0)).0
}

fn check_lines(mask: &DMatrix<bool>) -> Result<()> {
    for i in 0..mask.nrows() {
        if !mask.row(i).iter().any(|&b| b) {
            return Err(Error::EmptyLine { axis: "row", index: i });
        }
    }
    for j in 0..mask.ncols() {
        if !mask.column(j).iter().any(|&b| b) {
            return Err(Error::EmptyLine { axis: "column", index: j });
        }
    }
    Ok(())
}

fn objective(y: &DMatrix<f64>, mask: &DMatrix<bool>, z: &DMatrix<f64>, lambda: f64) -> f64 {
    let fit: f64 = y
        .iter()
        .zip(z.iter())
        .zip(mask.iter())
        .filter(|(_, &m)| m)
        .map(|((a, b), _)| (a - b).powi(2))
        .sum();
    0.5 * fit + lambda * nuclear_norm(z)
}

/// Soft-impute iterations at one penalty, starting from `start`.
pub fn soft_impute_from(
    y: &DMatrix<f64>,
    mask: &DMatrix<bool>,
    lambda: f64,
    tol: f64,
    max_iter: usize,
    start: &DMatrix<f64>,
) -> Result<CompletionResult> {
    if !(lambda >= 0.0) {
        return Err(Error::InvalidArgument("lambda must be non-negative".into()));
    }
    if y.shape() != mask.shape() || start.shape() != y.shape() {
        return Err(Error::InvalidArgument("outcome, mask and start shapes differ".into()));
    }
    check_lines(mask)?;
    let mut z = start.clone();
    let mut rank = 0;
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        let filled = DMatrix::from_fn(y.nrows(), y.ncols(), |i, j| if mask[(i, j)] { y[(i, j)] } else { z[(i, j)] });
        let (next, k) = threshold_with_rank(&filled, lambda);
        let change = (&next - &z).norm();
        let scale = z.norm();
        z = next;
        rank = k;
        trace.push(objective(y, mask, &z, lambda));
        if change == 0.0 || (scale > 0.0 && change < tol * scale) {
            converged = true;
            break;
        }
    }
    Ok(CompletionResult { completed: z, rank, lambda, cv_table: None, iterations, converged, objective_trace: trace })
}

fn largest_observed_singular_value(y: &DMatrix<f64>, mask: &DMatrix<bool>) -> f64 {
    let filled = DMatrix::from_fn(y.nrows(), y.ncols(), |i, j| if mask[(i, j)] { y[(i, j)] } else { 0.0 });
    svd_sorted(&filled).singular_values.iter().copied().next().unwrap_or(0.0)
}

/// Solves along the penalties in `lambdas` (non-increasing), warm-starting
/// each from the previous solution.
fn solve_path(
    y: &DMatrix<f64>,
    mask: &DMatrix<bool>,
    lambdas: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<Vec<CompletionResult>> {
    let mut z = DMatrix::zeros(y.nrows(), y.ncols());
    let mut out = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        let res = soft_impute_from(y, mask, lambda, tol, max_iter, &z)?;
        z = res.completed.clone();
        out.push(res);
    }
    Ok(out)
}

/// Completes `y` on the cells where `mask` is false.
///
/// The penalty is approached from the largest observed singular value by
/// halving, warm-starting each stage; small penalties are otherwise reached
/// only very slowly from a zero start.
pub fn soft_impute(
    y: &DMatrix<f64>,
    mask: &DMatrix<bool>,
    lambda: f64,
    tol: f64,
    max_iter: usize,
) -> Result<CompletionResult> {
    if !(lambda >= 0.0) {
        return Err(Error::InvalidArgument("lambda must be non-negative".into()));
    }
    if y.shape() != mask.shape() {
        return Err(Error::InvalidArgument("outcome and mask shapes differ".into()));
    }
    check_lines(mask)?;
    let mut lambdas = Vec::new();
    let mut l = largest_observed_singular_value(y, mask) * PATH_RATIO;
    while l > lambda {
        lambdas.push(l);
        l *= PATH_RATIO;
    }
    lambdas.push(lambda);
    Ok(solve_path(y, mask, &lambdas, tol, max_iter)?.pop().expect("non-empty path"))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompletionOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for CompletionOptions {
    fn default() -> Self {
        Self { tol: 1e-7, max_iter: 5000 }
    }
}

/// Untreated cells used for training: observed and not post-onset.
fn training_mask(panel: &PanelDataset) -> DMatrix<bool> {
    DMatrix::from_fn(panel.n_units(), panel.n_periods(), |i, j| panel.is_observed(i, j) && !panel.is_post(i, j))
}

/// Geometric grid of `n` penalties from the largest singular value of the
/// zero-filled training matrix down to 1e-4 of it.
pub fn default_lambda_grid(panel: &PanelDataset, n: usize) -> Vec<f64> {
    let top = largest_observed_singular_value(panel.outcome(), &training_mask(panel));
    if n <= 1 {
        return vec![top];
    }
    (0..n).map(|k| top * 1e-4_f64.powf(k as f64 / (n - 1) as f64)).collect()
}

/// Matrix-completion counterfactual for treated post-onset cells, with the
/// penalty chosen by held-out MSE on random subsets of control cells.
pub fn mc_att(panel: &PanelDataset, lambda_grid: &[f64], cv_folds: usize, seed: u64) -> Result<(AttResult, CompletionResult)> {
    mc_att_with(panel, lambda_grid, cv_folds, seed, &CompletionOptions::default())
}

pub fn mc_att_with(
    panel: &PanelDataset,
    lambda_grid: &[f64],
    cv_folds: usize,
    seed: u64,
    opts: &CompletionOptions,
) -> Result<(AttResult, CompletionResult)> {
    if lambda_grid.is_empty() {
        return Err(Error::InvalidArgument("lambda grid is empty".into()));
    }
    if lambda_grid.iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
        return Err(Error::InvalidArgument("lambda grid values must be finite and non-negative".into()));
    }
    if cv_folds < 2 {
        return Err(Error::InvalidArgument("cv_folds must be at least 2".into()));
    }
    let y = panel.outcome();
    let train = training_mask(panel);
    check_lines(&train)?;
    let mut grid = lambda_grid.to_vec();
    grid.sort_by(|a, b| b.total_cmp(a));
    grid.dedup();

    let control_cells: Vec<(usize, usize)> = panel
        .control_indices()
        .into_iter()
        .flat_map(|i| (0..panel.n_periods()).map(move |j| (i, j)))
        .filter(|&(i, j)| train[(i, j)])
        .collect();
    let n_hold = ((control_cells.len() as f64 * HOLDOUT_SHARE).round() as usize).max(1);

    let mut sse = vec![0.0; grid.len()];
    let mut n_held = 0usize;
    for fold in 0..cv_folds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(fold as u64);
        let mut cells = control_cells.clone();
        cells.shuffle(&mut rng);
        let mut fold_mask = train.clone();
        let mut row_left: Vec<usize> = (0..y.nrows()).map(|i| train.row(i).iter().filter(|&&b| b).count()).collect();
        let mut col_left: Vec<usize> = (0..y.ncols()).map(|j| train.column(j).iter().filter(|&&b| b).count()).collect();
        let mut held = Vec::with_capacity(n_hold);
        for &(i, j) in &cells {
            if held.len() == n_hold {
                break;
            }
            // never hold out the last training cell of a row or column
            if row_left[i] > 1 && col_left[j] > 1 {
                fold_mask[(i, j)] = false;
                row_left[i] -= 1;
                col_left[j] -= 1;
                held.push((i, j));
            }
        }
        let path = solve_path(y, &fold_mask, &grid, opts.tol, opts.max_iter)?;
        for (k, res) in path.iter().enumerate() {
            sse[k] += held.iter().map(|&(i, j)| (y[(i, j)] - res.completed[(i, j)]).powi(2)).sum::<f64>();
        }
        n_held += held.len();
    }
    let cv_table: Vec<(f64, f64)> = grid.iter().zip(&sse).map(|(l, s)| (*l, s / n_held.max(1) as f64)).collect();
    // ties go to the larger penalty
    let best = cv_table
        .iter()
        .enumerate()
        .fold(0, |b, (k, (_, mse))| if *mse < cv_table[b].1 { k } else { b });

    let mut fit = solve_path(y, &train, &grid[..=best], opts.tol, opts.max_iter)?.pop().expect("non-empty path");
    fit.cv_table = Some(cv_table);

    let mut gaps = Vec::new();
    for i in panel.treated_indices() {
        for j in 0..panel.n_periods() {
            if panel.is_observed(i, j) && panel.is_post(i, j) {
                let observed = y[(i, j)];
                let counterfactual = fit.completed[(i, j)];
                gaps.push(CellGap {
                    unit: panel.units()[i].clone(),
                    period: panel.periods()[j],
                    observed,
                    counterfactual,
                    gap: observed - counterfactual,
                });
            }
        }
    }
    Ok((AttResult::from_gaps(gaps)?, fit))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simgen::{gen_panel, DgpSpec};
    use rand::Rng;

    fn random_matrix(n: usize, m: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(n, m, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn threshold_diagonal() {
        let m = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![3.0, 1.0]));
        let out = soft_threshold(&m, 1.0);
        assert_eq!(out, DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![2.0, 0.0])));
    }

    #[test]
    fn threshold_zero_is_identity() {
        let m = random_matrix(5, 4, 1);
        assert!((soft_threshold(&m, 0.0) - &m).norm() < 1e-10);
    }

    #[test]
    fn threshold_at_top_singular_value_is_zero() {
        let m = random_matrix(5, 4, 2);
        // largest singular value from the Gram eigenvalues
        let top = nalgebra::SymmetricEigen::new(m.transpose() * &m).eigenvalues.max().sqrt();
        assert_eq!(soft_threshold(&m, top * (1.0 + 1e-12)).norm(), 0.0);
        assert!(soft_threshold(&m, top * 0.99).norm() > 0.0);
    }

    #[test]
    fn full_rank_one_reproduced() {
        let y = DMatrix::from_fn(6, 5, |i, j| (i + 1) as f64 * (j as f64 + 0.5));
        let mask = DMatrix::from_element(6, 5, true);
        let res = soft_impute(&y, &mask, 1e-12, 1e-12, 5000).unwrap();
        assert!((res.completed - &y).norm() < 1e-8);
        assert_eq!(res.rank, 1);
    }

    #[test]
    fn masked_rank_one_recovered() {
        let u: Vec<f64> = (0..10).map(|i| 1.0 + 0.3 * i as f64).collect();
        let v: Vec<f64> = (0..8).map(|j| 0.5 + 0.2 * j as f64).collect();
        let y = DMatrix::from_fn(10, 8, |i, j| u[i] * v[j]);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut cells: Vec<(usize, usize)> = (0..10).flat_map(|i| (0..8).map(move |j| (i, j))).collect();
        cells.shuffle(&mut rng);
        let mut mask = DMatrix::from_element(10, 8, true);
        for &(i, j) in &cells[..16] {
            mask[(i, j)] = false;
        }
        let res = soft_impute(&y, &mask, 1e-6, 1e-12, 20000).unwrap();
        for &(i, j) in &cells[..16] {
            let rel = (res.completed[(i, j)] - y[(i, j)]).abs() / y[(i, j)];
            assert!(rel < 1e-6, "cell ({i},{j}) rel err {rel}");
        }
    }

    #[test]
    fn objective_non_increasing() {
        let y = random_matrix(8, 6, 3);
        let mut mask = DMatrix::from_element(8, 6, true);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..12 {
            mask[(rng.random_range(0..8), rng.random_range(0..6))] = false;
        }
        let res = soft_impute_from(&y, &mask, 0.3, 1e-12, 500, &DMatrix::zeros(8, 6)).unwrap();
        for w in res.objective_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "{} > {}", w[1], w[0]);
        }
    }

    #[test]
    fn empty_line_rejected() {
        let y = DMatrix::zeros(3, 3);
        let mut mask = DMatrix::from_element(3, 3, true);
        for j in 0..3 {
            mask[(1, j)] = false;
        }
        assert!(matches!(soft_impute(&y, &mask, 1.0, 1e-8, 10), Err(Error::EmptyLine { axis: "row", index: 1 })));
    }

    #[test]
    fn noiseless_benchmark_recovers_effect() {
        let (p, _) = gen_panel(&DgpSpec { sigma: 0.0, ..DgpSpec::benchmark(11) }).unwrap();
        let grid = default_lambda_grid(&p, 20);
        let (att, fit) = mc_att(&p, &grid, 5, 1).unwrap();
        assert!((att.att - 5.0).abs() < 0.1, "att {}", att.att);
        assert_eq!(fit.cv_table.unwrap().len(), 20);
    }

    #[test]
    fn huge_penalty_imputes_zero() {
        let (p, _) = gen_panel(&DgpSpec::benchmark(3)).unwrap();
        let (att, fit) = mc_att(&p, &[1e12], 2, 0).unwrap();
        assert_eq!(fit.rank, 0);
        assert!(att.gaps.iter().all(|g| g.gap == g.observed));
    }

    #[test]
    fn grid_guards() {
        let (p, _) = gen_panel(&DgpSpec::benchmark(3)).unwrap();
        assert!(mc_att(&p, &[], 5, 0).is_err());
        assert!(mc_att(&p, &[1.0], 1, 0).is_err());
        assert!(mc_att(&p, &[-1.0], 5, 0).is_err());
    }
}
