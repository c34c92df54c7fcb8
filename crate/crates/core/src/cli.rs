//! Command-line front end. Every run writes its artifacts plus a
//! `manifest.json` (configuration, input digests, output digests, version)
//! into the output directory.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::att::AttResult;
use crate::biblio::{
    self, count_simple, count_total, count_weighted, default_keywords, filter_deep_learning, read_groups_json,
    read_records_jsonl, share_series, split_by_year, tfidf_group_scores, GroupDefinition, PaperRecord,
};
use crate::completion::{default_lambda_grid, mc_att};
use crate::error::{Error, Result};
use crate::ife::{choose_r, cv_bound, fit_ife, impute_and_att};
use crate::inference::{bootstrap_run, placebo_in_space, placebo_in_time, BootstrapSpec};
use crate::panel::{load_panel, validate_and_filter, write_panel, DropScope, PanelDataset, SizeFilter, DEFAULT_MIN_PRE};
use crate::simgen::{gen_panel, DgpSpec};
use crate::twfe::{within_ols_with, ComputeSeries, TwfeOptions};

/// Environment variable capping the worker-thread count.
pub const THREADS_ENV: &str = "GAPCAST_THREADS";
/// Covariate used by default when the panel has it.
pub const DEFAULT_COVARIATE: &str = "TotalNumOfPaper";

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "gapcast", version, about = "Counterfactual panel estimation and bibliometric tools")]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Apply the size and pre-period filters and write the retained panel.
    Validate(ValidateArgs),
    /// Estimate treatment effects (gsc, mc) or the compute interaction model (twfe).
    Estimate(EstimateArgs),
    /// Run a placebo-in-time or placebo-in-space diagnostic.
    Placebo(PlaceboArgs),
    /// Per-group paper counts by venue and year.
    Counts(CountsArgs),
    /// Per-group share of papers by venue and year.
    Shares(BiblioArgs),
    /// Keep records matching the deep-learning keyword list.
    FilterDl(FilterDlArgs),
    /// Normalized TF-IDF profiles per venue and group.
    Tfidf(TfidfArgs),
    /// Draw a synthetic panel from a DGP specification.
    Simulate(SimulateArgs),
    /// Rebuild the plot tables from an estimation run's att.json.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct OutArgs {
    /// Output directory, created if missing.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PanelArgs {
    /// Long-format panel CSV (unit, period, outcome, optional treated_since, covariates).
    #[arg(long)]
    panel: PathBuf,
    /// Minimum observed pre-onset periods for a treated unit to be kept.
    #[arg(long, default_value_t = DEFAULT_MIN_PRE)]
    min_pre: usize,
    /// Column checked by the size filter (`outcome` or a covariate).
    #[arg(long, requires = "min_size")]
    size_column: Option<String>,
    /// Cells (or units) with a smaller value in `--size-column` are dropped.
    #[arg(long, requires = "size_column")]
    min_size: Option<f64>,
    #[arg(long, value_enum, default_value_t = Scope::Cell)]
    size_scope: Scope,
}

#[derive(ValueEnum, Clone, Copy, Debug, Serialize)]
#[serde(rename_all = "lowercase")]
enum Scope {
    Cell,
    Unit,
}

#[derive(Args, Debug)]
struct CovariateArgs {
    /// Comma-separated covariates; defaults to TotalNumOfPaper when present, else all.
    #[arg(long, value_delimiter = ',', conflicts_with = "no_covariates")]
    covariates: Option<Vec<String>>,
    /// Fit without covariates.
    #[arg(long)]
    no_covariates: bool,
}

#[derive(Args, Debug)]
struct FactorArgs {
    /// Fixed factor count.
    #[arg(long, conflicts_with = "r_max")]
    r: Option<usize>,
    /// Largest factor count tried by cross-validation.
    #[arg(long, default_value_t = 5)]
    r_max: usize,
}

#[derive(Args, Debug)]
struct BootArgs {
    /// Bootstrap replicates (0 disables, otherwise at least 100).
    #[arg(long, default_value_t = 0)]
    bootstrap: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.95)]
    ci_level: f64,
}

#[derive(Args, Debug)]
struct ValidateArgs {
    #[command(flatten)]
    panel: PanelArgs,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
enum Method {
    Gsc,
    Mc,
    Twfe,
}

#[derive(Args, Debug)]
struct EstimateArgs {
    #[arg(long, value_enum, default_value_t = Method::Gsc)]
    method: Method,
    #[command(flatten)]
    panel: PanelArgs,
    #[command(flatten)]
    covariates: CovariateArgs,
    #[command(flatten)]
    factors: FactorArgs,
    #[command(flatten)]
    boot: BootArgs,
    /// Explicit comma-separated penalty grid for matrix completion.
    #[arg(long, value_delimiter = ',')]
    lambda_grid: Option<Vec<f64>>,
    /// Size of the default penalty grid.
    #[arg(long, default_value_t = 30)]
    lambda_count: usize,
    #[arg(long, default_value_t = 5)]
    cv_folds: usize,
    /// Compute series CSV (`period,compute`), required for twfe.
    #[arg(long, required_if_eq("method", "twfe"))]
    compute: Option<PathBuf>,
    /// Enter compute in logs (twfe).
    #[arg(long)]
    log_compute: bool,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
enum PlaceboKindArg {
    Time,
    Space,
}

#[derive(Args, Debug)]
struct PlaceboArgs {
    #[arg(long, value_enum)]
    kind: PlaceboKindArg,
    #[command(flatten)]
    panel: PanelArgs,
    #[command(flatten)]
    covariates: CovariateArgs,
    #[command(flatten)]
    factors: FactorArgs,
    /// Replicates for the placebo bootstrap.
    #[arg(long, default_value_t = 500)]
    bootstrap: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.95)]
    ci_level: f64,
    /// Years the onset is moved back (time placebo): 2, 3 or 4.
    #[arg(long, default_value_t = 3)]
    shift: i64,
    /// Comma-separated controls relabelled as treated (space placebo).
    #[arg(long, value_delimiter = ',')]
    pseudo_treated: Option<Vec<String>>,
    /// Number of controls drawn with `--seed` when no explicit list is given.
    #[arg(long, default_value_t = 5)]
    n_pseudo: usize,
    /// Pseudo onset (space placebo); defaults to the earliest real onset.
    #[arg(long)]
    onset: Option<i64>,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args, Debug)]
struct BiblioArgs {
    /// Paper records, one JSON object per line.
    #[arg(long)]
    records: PathBuf,
    /// Group definitions (JSON object or array).
    #[arg(long)]
    groups: PathBuf,
    /// Restrict to deep-learning papers first.
    #[arg(long)]
    deep_learning_only: bool,
    /// Keyword list, one phrase per line (default: bundled list).
    #[arg(long)]
    keywords: Option<PathBuf>,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args, Debug)]
struct CountsArgs {
    #[command(flatten)]
    common: BiblioArgs,
    /// Fractional author-affiliation weights instead of paper counts.
    #[arg(long)]
    weighted: bool,
}

#[derive(Args, Debug)]
struct FilterDlArgs {
    #[arg(long)]
    records: PathBuf,
    #[arg(long)]
    keywords: Option<PathBuf>,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args, Debug)]
struct TfidfArgs {
    #[command(flatten)]
    common: BiblioArgs,
    /// Separate profiles for papers before and from this year.
    #[arg(long)]
    split_year: Option<i64>,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// DGP specification JSON.
    #[arg(long)]
    spec: PathBuf,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Directory of an `estimate` or `placebo` run.
    #[arg(long)]
    run_dir: PathBuf,
    /// Where to write the tables (default: the run directory).
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Files of one run, in write order.
struct Run {
    dir: PathBuf,
    command: &'static str,
    config: Value,
    inputs: Vec<(String, String)>,
    outputs: Vec<(String, String)>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn file_label(path: &Path) -> String {
    path.file_name().map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned())
}

impl Run {
    fn new(dir: &Path, command: &'static str, config: Value) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self { dir: dir.to_path_buf(), command, config, inputs: Vec::new(), outputs: Vec::new() })
    }

    fn read_input(&mut self, path: &Path) -> Result<Vec<u8>> {
        let bytes = fs::read(path)
            .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
        self.inputs.push((file_label(path), sha256_hex(&bytes)));
        Ok(bytes)
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        fs::write(self.dir.join(name), bytes)?;
        self.outputs.push((name.to_string(), sha256_hex(bytes)));
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.write(name, &bytes)
    }

    fn write_with(&mut self, name: &str, f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<()> {
        let mut bytes = Vec::new();
        f(&mut bytes)?;
        self.write(name, &bytes)
    }

    fn finish(self) -> Result<()> {
        let entries = |v: &[(String, String)]| -> Vec<Value> {
            v.iter().map(|(name, digest)| json!({ "name": name, "sha256": digest })).collect()
        };
        let manifest = json!({
            "tool": "gapcast",
            "version": env!("CARGO_PKG_VERSION"),
            "command": self.command,
            "config": self.config,
            "inputs": entries(&self.inputs),
            "outputs": entries(&self.outputs),
        });
        let mut bytes = serde_json::to_vec_pretty(&manifest)?;
        bytes.push(b'\n');
        fs::write(self.dir.join("manifest.json"), bytes)?;
        Ok(())
    }
}

fn panel_config(a: &PanelArgs) -> Value {
    json!({
        "panel": file_label(&a.panel),
        "min_pre": a.min_pre,
        "size_column": a.size_column,
        "min_size": a.min_size,
        "size_scope": a.size_scope,
    })
}

fn load_filtered(run: &mut Run, a: &PanelArgs) -> Result<(PanelDataset, crate::panel::FilterReport)> {
    let bytes = run.read_input(&a.panel)?;
    let panel = load_panel(bytes.as_slice())?;
    let filter = match (&a.size_column, a.min_size) {
        (Some(column), Some(min_value)) => Some(SizeFilter {
            column: column.clone(),
            min_value,
            scope: match a.size_scope {
                Scope::Cell => DropScope::Cell,
                Scope::Unit => DropScope::Unit,
            },
        }),
        _ => None,
    };
    validate_and_filter(&panel, a.min_pre, filter.as_ref())
}

fn resolve_covariates(panel: &PanelDataset, a: &CovariateArgs) -> Vec<String> {
    if a.no_covariates {
        return Vec::new();
    }
    if let Some(list) = &a.covariates {
        return list.iter().map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
    }
    let names = panel.covariate_names();
    if names.contains(&DEFAULT_COVARIATE) {
        vec![DEFAULT_COVARIATE.to_string()]
    } else {
        names.into_iter().map(String::from).collect()
    }
}

/// Fixed `r`, or cross-validated over `0..=min(r_max, feasible bound)`.
fn select_r(run: &mut Run, panel: &PanelDataset, a: &FactorArgs, covs: &[String]) -> Result<usize> {
    if let Some(r) = a.r {
        return Ok(r);
    }
    let bound = cv_bound(panel);
    let r_max = a.r_max.min(bound);
    let cv = choose_r(panel, r_max, covs)?;
    run.write_json("cv.json", &json!({ "r_max_requested": a.r_max, "r_max_used": r_max, "cv": cv }))?;
    Ok(cv.chosen_r)
}

fn write_att_tables(run: &mut Run, att: &AttResult) -> Result<()> {
    run.write_json("att.json", att)?;
    run.write_with("att_by_period.csv", |b| att.write_period_csv(b))?;
    run.write_with("gaps.csv", |b| att.write_gaps_csv(b))?;
    write_report(run, att)
}

fn write_report(run: &mut Run, att: &AttResult) -> Result<()> {
    run.write_with("observed_vs_counterfactual.csv", |b| att.write_observed_vs_counterfactual_csv(b))?;
    run.write_with("gap.csv", |b| att.write_gap_csv(b))
}

fn cmd_validate(a: &ValidateArgs) -> Result<()> {
    let mut run = Run::new(&a.out.out, "validate", json!({ "panel": panel_config(&a.panel) }))?;
    let (panel, report) = load_filtered(&mut run, &a.panel)?;
    run.write_with("filtered_panel.csv", |b| write_panel(&panel, b))?;
    run.write_json("filter_report.json", &report)?;
    run.finish()
}

fn cmd_estimate(a: &EstimateArgs) -> Result<()> {
    let config = json!({
        "method": a.method,
        "panel": panel_config(&a.panel),
        "covariates": a.covariates.covariates,
        "no_covariates": a.covariates.no_covariates,
        "r": a.factors.r,
        "r_max": a.factors.r_max,
        "bootstrap": a.boot.bootstrap,
        "seed": a.boot.seed,
        "ci_level": a.boot.ci_level,
        "lambda_grid": a.lambda_grid,
        "lambda_count": a.lambda_count,
        "cv_folds": a.cv_folds,
        "compute": a.compute.as_deref().map(file_label),
        "log_compute": a.log_compute,
    });
    let mut run = Run::new(&a.out.out, "estimate", config)?;
    let (panel, report) = load_filtered(&mut run, &a.panel)?;
    run.write_json("filter_report.json", &report)?;
    let covs = resolve_covariates(&panel, &a.covariates);
    match a.method {
        Method::Gsc => {
            let r = select_r(&mut run, &panel, &a.factors, &covs)?;
            let (fit, att) = if a.boot.bootstrap > 0 {
                let spec = BootstrapSpec { replicates: a.boot.bootstrap, seed: a.boot.seed, ci_level: a.boot.ci_level };
                let boot = bootstrap_run(&panel, r, &covs, &spec)?;
                run.write_with("bootstrap_draws.csv", |b| boot.write_draws_csv(b))?;
                (boot.fit, boot.result)
            } else {
                let fit = fit_ife(&panel, r, &covs)?;
                let att = impute_and_att(&fit, &panel)?;
                (fit, att)
            };
            run.write_json("fit.json", &fit)?;
            write_att_tables(&mut run, &att)?;
        }
        Method::Mc => {
            let grid = match &a.lambda_grid {
                Some(g) => g.clone(),
                None => default_lambda_grid(&panel, a.lambda_count),
            };
            let (att, fit) = mc_att(&panel, &grid, a.cv_folds, a.boot.seed)?;
            run.write_with("mc_cv.csv", |b| fit.write_cv_csv(b))?;
            run.write_json(
                "mc_fit.json",
                &json!({
                    "lambda": fit.lambda,
                    "rank": fit.rank,
                    "iterations": fit.iterations,
                    "converged": fit.converged,
                }),
            )?;
            write_att_tables(&mut run, &att)?;
        }
        Method::Twfe => {
            let path = a.compute.as_ref().expect("clap requires --compute for twfe");
            let compute = ComputeSeries::from_csv(run.read_input(path)?.as_slice())?;
            let fit = within_ols_with(&panel, &compute, &covs, &TwfeOptions { log_compute: a.log_compute })?;
            run.write_json("twfe.json", &fit)?;
            run.write("twfe_table.txt", fit.to_table("Outcome").as_bytes())?;
        }
    }
    run.finish()
}

fn cmd_placebo(a: &PlaceboArgs) -> Result<()> {
    let config = json!({
        "kind": a.kind,
        "panel": panel_config(&a.panel),
        "covariates": a.covariates.covariates,
        "no_covariates": a.covariates.no_covariates,
        "r": a.factors.r,
        "r_max": a.factors.r_max,
        "bootstrap": a.bootstrap,
        "seed": a.seed,
        "ci_level": a.ci_level,
        "shift": a.shift,
        "pseudo_treated": a.pseudo_treated,
        "n_pseudo": a.n_pseudo,
        "onset": a.onset,
    });
    let mut run = Run::new(&a.out.out, "placebo", config)?;
    let (panel, _) = load_filtered(&mut run, &a.panel)?;
    let covs = resolve_covariates(&panel, &a.covariates);
    let r = select_r(&mut run, &panel, &a.factors, &covs)?;
    let spec = BootstrapSpec { replicates: a.bootstrap, seed: a.seed, ci_level: a.ci_level };
    let (report, boot) = match a.kind {
        PlaceboKindArg::Time => placebo_in_time(&panel, a.shift, r, &covs, &spec, a.panel.min_pre)?,
        PlaceboKindArg::Space => {
            let pseudo = match &a.pseudo_treated {
                Some(list) => list.clone(),
                None => draw_pseudo_treated(&panel, a.n_pseudo, a.seed)?,
            };
            let onset = match a.onset {
                Some(o) => o,
                None => panel
                    .onsets()
                    .iter()
                    .flatten()
                    .copied()
                    .min()
                    .ok_or_else(|| Error::InvalidArgument("no treated unit to take the onset from; pass --onset".into()))?,
            };
            placebo_in_space(&panel, &pseudo, onset, r, &covs, &spec)?
        }
    };
    run.write_json("placebo.json", &report)?;
    run.write_with("att_by_period.csv", |b| report.att_result.write_period_csv(b))?;
    run.write_with("bootstrap_draws.csv", |b| boot.write_draws_csv(b))?;
    run.write_json("att.json", &report.att_result)?;
    write_report(&mut run, &report.att_result)?;
    run.finish()
}

/// `n` control units in seeded random order, reported in panel order.
fn draw_pseudo_treated(panel: &PanelDataset, n: usize, seed: u64) -> Result<Vec<String>> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut controls = panel.control_indices();
    if n == 0 || n >= controls.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot draw {n} pseudo-treated units from {} controls",
            controls.len()
        )));
    }
    controls.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
    let mut chosen: Vec<usize> = controls[..n].to_vec();
    chosen.sort_unstable();
    Ok(chosen.into_iter().map(|i| panel.units()[i].clone()).collect())
}

fn biblio_config(a: &BiblioArgs) -> Value {
    json!({
        "records": file_label(&a.records),
        "groups": file_label(&a.groups),
        "deep_learning_only": a.deep_learning_only,
        "keywords": a.keywords.as_deref().map(file_label),
    })
}

fn load_keywords(run: &mut Run, path: Option<&Path>) -> Result<Vec<String>> {
    match path {
        Some(p) => {
            let bytes = run.read_input(p)?;
            let text = String::from_utf8(bytes)
                .map_err(|_| Error::InvalidArgument(format!("{} is not UTF-8", p.display())))?;
            let k = biblio::keywords::parse_keywords(&text);
            if k.is_empty() {
                return Err(Error::InvalidArgument("keyword list is empty".into()));
            }
            Ok(k)
        }
        None => Ok(default_keywords()),
    }
}

fn load_biblio(run: &mut Run, a: &BiblioArgs) -> Result<(Vec<PaperRecord>, Vec<GroupDefinition>)> {
    let records = read_records_jsonl(run.read_input(&a.records)?.as_slice())?;
    let groups = read_groups_json(run.read_input(&a.groups)?.as_slice())?;
    let records = if a.deep_learning_only {
        let k = load_keywords(run, a.keywords.as_deref())?;
        filter_deep_learning(&records, &k)
    } else {
        records
    };
    Ok((records, groups))
}

fn cmd_counts(a: &CountsArgs) -> Result<()> {
    let mut config = biblio_config(&a.common);
    config["weighted"] = json!(a.weighted);
    let mut run = Run::new(&a.common.out.out, "counts", config)?;
    let (records, groups) = load_biblio(&mut run, &a.common)?;
    if a.weighted {
        let tables: Vec<_> = count_weighted(&records, &groups).into_iter().collect();
        // groups in definition order, then the remainder bucket
        let mut ordered = Vec::with_capacity(tables.len());
        for name in groups.iter().map(|g| g.name.as_str()).chain([biblio::OTHER]) {
            if let Some(t) = tables.iter().find(|(n, _)| n == name) {
                ordered.push(t.clone());
            }
        }
        run.write_with("counts_weighted.csv", |b| biblio::counting::write_fractions_csv(&ordered, b))?;
    } else {
        let mut tables: Vec<_> = groups.iter().map(|g| (g.name.clone(), count_simple(&records, g))).collect();
        tables.push(("total".to_string(), count_total(&records)));
        run.write_with("counts.csv", |b| biblio::counting::write_counts_csv(&tables, b))?;
    }
    run.finish()
}

fn cmd_shares(a: &BiblioArgs) -> Result<()> {
    let mut run = Run::new(&a.out.out, "shares", biblio_config(a))?;
    let (records, groups) = load_biblio(&mut run, a)?;
    let tables: Vec<_> = groups.iter().map(|g| (g.name.clone(), share_series(&records, g))).collect();
    run.write_with("shares.csv", |b| biblio::counting::write_fractions_csv(&tables, b))?;
    run.finish()
}

fn cmd_filter_dl(a: &FilterDlArgs) -> Result<()> {
    let config = json!({
        "records": file_label(&a.records),
        "keywords": a.keywords.as_deref().map(file_label),
    });
    let mut run = Run::new(&a.out.out, "filter-dl", config)?;
    let records = read_records_jsonl(run.read_input(&a.records)?.as_slice())?;
    let k = load_keywords(&mut run, a.keywords.as_deref())?;
    let kept = filter_deep_learning(&records, &k);
    run.write_with("deep_learning.jsonl", |b| biblio::records::write_records_jsonl(&kept, b))?;
    run.write_json("filter_summary.json", &json!({ "n_records": records.len(), "n_kept": kept.len() }))?;
    run.finish()
}

fn cmd_tfidf(a: &TfidfArgs) -> Result<()> {
    let mut config = biblio_config(&a.common);
    config["split_year"] = json!(a.split_year);
    let mut run = Run::new(&a.common.out.out, "tfidf", config)?;
    let (records, groups) = load_biblio(&mut run, &a.common)?;
    let labelled: Vec<(Option<String>, biblio::TfidfProfile)> = match a.split_year {
        None => tfidf_group_scores(&records, &groups)?.into_iter().map(|p| (None, p)).collect(),
        Some(year) => {
            let (before, after) = split_by_year(&records, year);
            let mut out: Vec<_> =
                tfidf_group_scores(&before, &groups)?.into_iter().map(|p| (Some("before".to_string()), p)).collect();
            out.extend(tfidf_group_scores(&after, &groups)?.into_iter().map(|p| (Some("after".to_string()), p)));
            out
        }
    };
    run.write_with("tfidf.csv", |b| biblio::text::write_profiles_csv(&labelled, b))?;
    run.finish()
}

fn cmd_simulate(a: &SimulateArgs) -> Result<()> {
    let mut run = Run::new(&a.out.out, "simulate", json!({ "spec": file_label(&a.spec) }))?;
    let spec: DgpSpec = serde_json::from_slice(&run.read_input(&a.spec)?)?;
    let (panel, truth) = gen_panel(&spec)?;
    run.write_with("panel.csv", |b| write_panel(&panel, b))?;
    run.write_json("ground_truth.json", &truth)?;
    run.finish()
}

fn cmd_report(a: &ReportArgs) -> Result<()> {
    let out = a.out.clone().unwrap_or_else(|| a.run_dir.clone());
    let mut run = Run::new(&out, "report", json!({ "run_dir_input": "att.json" }))?;
    let bytes = run.read_input(&a.run_dir.join("att.json"))?;
    let att: AttResult = serde_json::from_slice(&bytes)?;
    write_report(&mut run, &att)?;
    // the report shares the run directory; keep the run's own manifest
    if out != a.run_dir {
        run.finish()?;
    }
    Ok(())
}

fn thread_count() -> std::result::Result<Option<usize>, String> {
    match std::env::var(THREADS_ENV) {
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(format!("{THREADS_ENV}: {e}")),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(format!("{THREADS_ENV} must be a positive integer, got `{v}`")),
        },
    }
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Validate(a) => cmd_validate(a),
        Command::Estimate(a) => cmd_estimate(a),
        Command::Placebo(a) => cmd_placebo(a),
        Command::Counts(a) => cmd_counts(a),
        Command::Shares(a) => cmd_shares(a),
        Command::FilterDl(a) => cmd_filter_dl(a),
        Command::Tfidf(a) => cmd_tfidf(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Report(a) => cmd_report(a),
    }
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code: 0 success, 1 usage error, 2 data or estimation error.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    let threads = match thread_count() {
        Ok(t) => t,
        Err(msg) => {
            eprintln!("error: {msg}");
            return EXIT_USAGE;
        }
    };
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n);
    }
    let pool = match builder.build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start worker threads: {e}");
            return EXIT_DATA;
        }
    };
    match pool.install(|| dispatch(&cli)) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_DATA
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_arguments_is_usage_error() {
        assert_eq!(run(["gapcast"]), EXIT_USAGE);
    }

    #[test]
    fn unknown_flag_is_usage_error() {
        assert_eq!(run(["gapcast", "simulate", "--bogus"]), EXIT_USAGE);
    }

    #[test]
    fn twfe_requires_compute() {
        assert_eq!(run(["gapcast", "estimate", "--method", "twfe", "--panel", "p.csv"]), EXIT_USAGE);
    }

    #[test]
    fn missing_input_is_data_error() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().to_str().unwrap();
        assert_eq!(run(["gapcast", "simulate", "--spec", "/nonexistent/spec.json", "--out", out]), EXIT_DATA);
        assert_eq!(run(["gapcast", "report", "--run-dir", out]), EXIT_DATA);
    }

    #[test]
    fn digest_is_hex() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
