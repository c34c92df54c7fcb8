//! Unbalanced unit-by-period panels with an observation mask and treatment
//! onsets.
//!
//! Panels are stored densely (`units × periods`); cells without a source row
//! are unobserved and carry `0.0` in every value matrix.

use std::collections::{BTreeSet, HashMap};
use std::io::{Read, Write};

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fmt::float17;

/// Default minimum number of observed pre-treatment periods per treated unit.
pub const DEFAULT_MIN_PRE: usize = 6;

#[derive(Debug, Clone, PartialEq)]
pub struct Covariate {
    pub name: String,
    pub values: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PanelDataset {
    units: Vec<String>,
    periods: Vec<i64>,
    outcome: DMatrix<f64>,
    mask: DMatrix<bool>,
    covariates: Vec<Covariate>,
    onsets: Vec<Option<i64>>,
}

impl PanelDataset {
    /// Builds a panel, checking every structural invariant.
    pub fn new(
        units: Vec<String>,
        periods: Vec<i64>,
        outcome: DMatrix<f64>,
        mask: DMatrix<bool>,
        covariates: Vec<Covariate>,
        onsets: Vec<Option<i64>>,
    ) -> Result<Self> {
        let (n, t) = (units.len(), periods.len());
        if n == 0 || t == 0 {
            return Err(Error::InvalidPanel("panel has no units or no periods".into()));
        }
        if outcome.shape() != (n, t) || mask.shape() != (n, t) {
            return Err(Error::InvalidPanel(format!(
                "outcome/mask shape does not match {n} units x {t} periods"
            )));
        }
        if onsets.len() != n {
            return Err(Error::InvalidPanel("one onset entry per unit required".into()));
        }
        if periods.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidPanel("periods must be strictly increasing".into()));
        }
        let mut seen = BTreeSet::new();
        for u in &units {
            if !seen.insert(u.as_str()) {
                return Err(Error::InvalidPanel(format!("duplicate unit `{u}`")));
            }
        }
        let mut names = BTreeSet::new();
        for c in &covariates {
            if c.values.shape() != (n, t) {
                return Err(Error::InvalidPanel(format!("covariate `{}` has the wrong shape", c.name)));
            }
            if !names.insert(c.name.as_str()) {
                return Err(Error::InvalidPanel(format!("duplicate covariate `{}`", c.name)));
            }
        }
        for i in 0..n {
            for j in 0..t {
                if !mask[(i, j)] {
                    continue;
                }
                let finite = outcome[(i, j)].is_finite()
                    && covariates.iter().all(|c| c.values[(i, j)].is_finite());
                if !finite {
                    return Err(Error::InvalidPanel(format!(
                        "non-finite value at unit `{}`, period {}",
                        units[i], periods[j]
                    )));
                }
            }
        }
        if onsets.iter().all(Option::is_some) {
            return Err(Error::NoControls);
        }
        let mut outcome = outcome;
        let mut covariates = covariates;
        // unobserved cells are zeroed so that equal panels compare equal
        for i in 0..n {
            for j in 0..t {
                if !mask[(i, j)] {
                    outcome[(i, j)] = 0.0;
                    for c in covariates.iter_mut() {
                        c.values[(i, j)] = 0.0;
                    }
                }
            }
        }
        Ok(Self { units, periods, outcome, mask, covariates, onsets })
    }

    pub fn units(&self) -> &[String] {
        &self.units
    }

    pub fn periods(&self) -> &[i64] {
        &self.periods
    }

    pub fn n_units(&self) -> usize {
        self.units.len()
    }

    pub fn n_periods(&self) -> usize {
        self.periods.len()
    }

    pub fn outcome(&self) -> &DMatrix<f64> {
        &self.outcome
    }

    pub fn mask(&self) -> &DMatrix<bool> {
        &self.mask
    }

    pub fn is_observed(&self, unit: usize, period: usize) -> bool {
        self.mask[(unit, period)]
    }

    pub fn covariates(&self) -> &[Covariate] {
        &self.covariates
    }

    pub fn covariate_names(&self) -> Vec<&str> {
        self.covariates.iter().map(|c| c.name.as_str()).collect()
    }

    pub fn covariate(&self, name: &str) -> Option<&DMatrix<f64>> {
        self.covariates.iter().find(|c| c.name == name).map(|c| &c.values)
    }

    /// Looks up each named covariate, failing on the first unknown name.
    pub fn covariate_matrices(&self, names: &[String]) -> Result<Vec<&DMatrix<f64>>> {
        names
            .iter()
            .map(|n| self.covariate(n).ok_or_else(|| Error::UnknownCovariate(n.clone())))
            .collect()
    }

    pub fn onsets(&self) -> &[Option<i64>] {
        &self.onsets
    }

    pub fn onset(&self, unit: usize) -> Option<i64> {
        self.onsets[unit]
    }

    pub fn is_treated(&self, unit: usize) -> bool {
        self.onsets[unit].is_some()
    }

    pub fn unit_index(&self, name: &str) -> Option<usize> {
        self.units.iter().position(|u| u == name)
    }

    pub fn period_index(&self, period: i64) -> Option<usize> {
        self.periods.binary_search(&period).ok()
    }

    pub fn control_indices(&self) -> Vec<usize> {
        (0..self.n_units()).filter(|&i| !self.is_treated(i)).collect()
    }

    pub fn treated_indices(&self) -> Vec<usize> {
        (0..self.n_units()).filter(|&i| self.is_treated(i)).collect()
    }

    pub fn n_observed(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Observed periods of `unit` strictly before its onset.
    pub fn pre_periods(&self, unit: usize) -> Vec<usize> {
        let onset = self.onsets[unit].unwrap_or(i64::MAX);
        (0..self.n_periods())
            .filter(|&j| self.mask[(unit, j)] && self.periods[j] < onset)
            .collect()
    }

    /// Whether cell `(unit, period)` is in the treated regime.
    pub fn is_post(&self, unit: usize, period: usize) -> bool {
        matches!(self.onsets[unit], Some(o) if self.periods[period] >= o)
    }

    /// Same panel with a different outcome matrix.
    pub fn with_outcome(&self, outcome: DMatrix<f64>) -> Result<Self> {
        Self::new(
            self.units.clone(),
            self.periods.clone(),
            outcome,
            self.mask.clone(),
            self.covariates.clone(),
            self.onsets.clone(),
        )
    }

    /// Same panel with different treatment onsets.
    pub fn with_onsets(&self, onsets: Vec<Option<i64>>) -> Result<Self> {
        Self::new(
            self.units.clone(),
            self.periods.clone(),
            self.outcome.clone(),
            self.mask.clone(),
            self.covariates.clone(),
            onsets,
        )
    }

    /// Same panel with a different observation mask. Newly observed cells
    /// must already hold values.
    pub fn with_mask(&self, mask: DMatrix<bool>) -> Result<Self> {
        Self::new(
            self.units.clone(),
            self.periods.clone(),
            self.outcome.clone(),
            mask,
            self.covariates.clone(),
            self.onsets.clone(),
        )
    }

    /// Restricts the panel to the given units (in the given order) and drops
    /// periods left without any observation.
    pub fn select_units(&self, keep: &[usize]) -> Result<Self> {
        let cols: Vec<usize> = (0..self.n_periods())
            .filter(|&j| keep.iter().any(|&i| self.mask[(i, j)]))
            .collect();
        let pick = |m: &DMatrix<f64>| DMatrix::from_fn(keep.len(), cols.len(), |a, b| m[(keep[a], cols[b])]);
        Self::new(
            keep.iter().map(|&i| self.units[i].clone()).collect(),
            cols.iter().map(|&j| self.periods[j]).collect(),
            pick(&self.outcome),
            DMatrix::from_fn(keep.len(), cols.len(), |a, b| self.mask[(keep[a], cols[b])]),
            self.covariates
                .iter()
                .map(|c| Covariate { name: c.name.clone(), values: pick(&c.values) })
                .collect(),
            keep.iter().map(|&i| self.onsets[i]).collect(),
        )
    }
}

/// Binary treatment indicator δ, one row per unit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TreatmentMatrix {
    pub values: DMatrix<u8>,
}

impl TreatmentMatrix {
    pub fn row(&self, unit: usize) -> Vec<u8> {
        self.values.row(unit).iter().copied().collect()
    }
}

/// δ_it = 1 iff the unit is treated and the period is at or after its onset.
pub fn treatment_matrix(panel: &PanelDataset) -> TreatmentMatrix {
    let values = DMatrix::from_fn(panel.n_units(), panel.n_periods(), |i, j| {
        u8::from(panel.is_post(i, j))
    });
    TreatmentMatrix { values }
}

const UNIT: &str = "unit";
const PERIOD: &str = "period";
const OUTCOME: &str = "outcome";
const TREATED_SINCE: &str = "treated_since";

/// Reads a long-format CSV panel: `unit,period,outcome[,covariate...]`
/// plus an optional `treated_since` column (empty for controls).
pub fn load_panel<R: Read>(source: R) -> Result<PanelDataset> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(source);
    let headers = reader.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let unit_col = col(UNIT).ok_or_else(|| Error::MissingColumn(UNIT.into()))?;
    let period_col = col(PERIOD).ok_or_else(|| Error::MissingColumn(PERIOD.into()))?;
    let outcome_col = col(OUTCOME).ok_or_else(|| Error::MissingColumn(OUTCOME.into()))?;
    let onset_col = col(TREATED_SINCE);
    let cov_cols: Vec<(usize, String)> = headers
        .iter()
        .enumerate()
        .filter(|(k, _)| ![Some(unit_col), Some(period_col), Some(outcome_col), onset_col].contains(&Some(*k)))
        .map(|(k, h)| (k, h.to_string()))
        .collect();

    struct Row {
        unit: usize,
        period: i64,
        outcome: f64,
        covariates: Vec<f64>,
    }

    let mut units: Vec<String> = Vec::new();
    let mut unit_ids: HashMap<String, usize> = HashMap::new();
    let mut onsets: Vec<Option<i64>> = Vec::new();
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        let field = |k: usize| record.get(k).unwrap_or("");
        let parse_f = |k: usize, what: &str| -> Result<f64> {
            let raw = field(k);
            raw.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| Error::Parse {
                row: line,
                message: format!("non-numeric {what} `{raw}`"),
            })
        };
        let name = field(unit_col).to_string();
        if name.is_empty() {
            return Err(Error::Parse { row: line, message: "empty unit".into() });
        }
        let period = field(period_col).parse::<i64>().map_err(|_| Error::Parse {
            row: line,
            message: format!("non-integer period `{}`", field(period_col)),
        })?;
        let outcome = parse_f(outcome_col, "outcome")?;
        let covariates = cov_cols
            .iter()
            .map(|(k, h)| parse_f(*k, &format!("covariate {h}")))
            .collect::<Result<Vec<_>>>()?;
        let onset = match onset_col.map(field) {
            None | Some("") => None,
            Some(raw) => Some(raw.parse::<i64>().map_err(|_| Error::Parse {
                row: line,
                message: format!("non-integer treated_since `{raw}`"),
            })?),
        };
        let id = match unit_ids.get(&name) {
            Some(&id) => {
                if onsets[id] != onset {
                    return Err(Error::Parse {
                        row: line,
                        message: format!("inconsistent treated_since for unit `{name}`"),
                    });
                }
                id
            }
            None => {
                units.push(name.clone());
                onsets.push(onset);
                unit_ids.insert(name, units.len() - 1);
                units.len() - 1
            }
        };
        rows.push(Row { unit: id, period, outcome, covariates });
    }
    if rows.is_empty() {
        return Err(Error::NoRows);
    }

    let periods: Vec<i64> = rows.iter().map(|r| r.period).collect::<BTreeSet<_>>().into_iter().collect();
    let (n, t) = (units.len(), periods.len());
    let mut outcome = DMatrix::zeros(n, t);
    let mut mask = DMatrix::from_element(n, t, false);
    let mut covs: Vec<DMatrix<f64>> = vec![DMatrix::zeros(n, t); cov_cols.len()];
    for row in rows {
        let j = periods.binary_search(&row.period).expect("period collected above");
        if mask[(row.unit, j)] {
            return Err(Error::DuplicateCell { unit: units[row.unit].clone(), period: row.period });
        }
        mask[(row.unit, j)] = true;
        outcome[(row.unit, j)] = row.outcome;
        for (m, v) in covs.iter_mut().zip(row.covariates) {
            m[(row.unit, j)] = v;
        }
    }
    let covariates = cov_cols
        .into_iter()
        .zip(covs)
        .map(|((_, name), values)| Covariate { name, values })
        .collect();
    PanelDataset::new(units, periods, outcome, mask, covariates, onsets)
}

/// Writes the panel in the long format [`load_panel`] reads, one row per
/// observed cell, units in panel order.
pub fn write_panel<W: Write>(panel: &PanelDataset, sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    let mut header = vec![UNIT.to_string(), PERIOD.to_string(), OUTCOME.to_string()];
    header.extend(panel.covariates.iter().map(|c| c.name.clone()));
    header.push(TREATED_SINCE.to_string());
    w.write_record(&header)?;
    for i in 0..panel.n_units() {
        for j in 0..panel.n_periods() {
            if !panel.mask[(i, j)] {
                continue;
            }
            let mut rec = vec![
                panel.units[i].clone(),
                panel.periods[j].to_string(),
                float17(panel.outcome[(i, j)]),
            ];
            rec.extend(panel.covariates.iter().map(|c| float17(c.values[(i, j)])));
            rec.push(panel.onsets[i].map(|o| o.to_string()).unwrap_or_default());
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Whether a size filter removes offending cells or whole units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DropScope {
    #[default]
    Cell,
    Unit,
}

/// Minimum-size rule applied before the pre-period check, e.g. dropping
/// venue-years with fewer than 25 papers.
#[derive(Debug, Clone, PartialEq)]
pub struct SizeFilter {
    /// `outcome` or a covariate name.
    pub column: String,
    pub min_value: f64,
    pub scope: DropScope,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FilterReport {
    pub dropped_units: Vec<String>,
    pub n_units: usize,
    pub n_treated: usize,
    pub n_periods: usize,
    pub n_observed_cells: usize,
}

/// Applies the optional size filter, then drops treated units with fewer
/// than `min_pre` observed periods before their onset.
pub fn validate_and_filter(
    panel: &PanelDataset,
    min_pre: usize,
    size_filter: Option<&SizeFilter>,
) -> Result<(PanelDataset, FilterReport)> {
    if min_pre < 1 {
        return Err(Error::InvalidArgument("min_pre must be at least 1".into()));
    }
    let mut mask = panel.mask.clone();
    let mut dropped = Vec::new();
    let mut keep_unit = vec![true; panel.n_units()];
    if let Some(f) = size_filter {
        let values = if f.column == OUTCOME {
            &panel.outcome
        } else {
            panel.covariate(&f.column).ok_or_else(|| Error::UnknownCovariate(f.column.clone()))?
        };
        for i in 0..panel.n_units() {
            let small: Vec<usize> = (0..panel.n_periods())
                .filter(|&j| mask[(i, j)] && values[(i, j)] < f.min_value)
                .collect();
            match f.scope {
                DropScope::Cell => small.iter().for_each(|&j| mask[(i, j)] = false),
                DropScope::Unit if !small.is_empty() => keep_unit[i] = false,
                DropScope::Unit => {}
            }
        }
    }
    for i in 0..panel.n_units() {
        if !keep_unit[i] {
            continue;
        }
        let observed = (0..panel.n_periods()).filter(|&j| mask[(i, j)]).count();
        let too_short = panel.onsets[i].is_some_and(|onset| {
            let pre = (0..panel.n_periods())
                .filter(|&j| mask[(i, j)] && panel.periods[j] < onset)
                .count();
            pre < min_pre
        });
        if observed == 0 || too_short {
            keep_unit[i] = false;
        }
    }
    for i in 0..panel.n_units() {
        if !keep_unit[i] {
            dropped.push(panel.units[i].clone());
        }
    }
    let keep: Vec<usize> = (0..panel.n_units()).filter(|&i| keep_unit[i]).collect();
    if !keep.iter().any(|&i| panel.onsets[i].is_none()) {
        return Err(Error::NoControls);
    }
    let out = panel.with_mask(mask)?.select_units(&keep)?;
    let report = FilterReport {
        dropped_units: dropped,
        n_units: out.n_units(),
        n_treated: out.treated_indices().len(),
        n_periods: out.n_periods(),
        n_observed_cells: out.n_observed(),
    };
    Ok((out, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn csv_panel(text: &str) -> Result<PanelDataset> {
        load_panel(text.as_bytes())
    }

    #[test]
    fn loads_all_control_panel_field_by_field() {
        let mut text = String::from("unit,period,outcome\n");
        for u in ["a", "b", "c"] {
            for p in 1..=4 {
                text.push_str(&format!("{u},{p},{}\n", p * 10));
            }
        }
        let panel = csv_panel(&text).unwrap();
        assert_eq!(panel.units(), &["a", "b", "c"]);
        assert_eq!(panel.periods(), &[1, 2, 3, 4]);
        assert!(panel.mask().iter().all(|&m| m));
        assert!(panel.onsets().iter().all(Option::is_none));
        assert!(panel.covariates().is_empty());
        assert_eq!(panel.outcome()[(1, 2)], 30.0);
        assert_eq!(panel.n_observed(), 12);
    }

    #[test]
    fn empty_stream_is_no_rows() {
        let err = csv_panel("unit,period,outcome\n").unwrap_err();
        assert_eq!(err.to_string(), "no rows");
        assert!(matches!(csv_panel(""), Err(Error::MissingColumn(_))));
    }

    #[test]
    fn duplicate_cell_is_named() {
        let err = csv_panel("unit,period,outcome\na,1,1\na,1,2\nb,1,1\n").unwrap_err();
        assert!(matches!(err, Error::DuplicateCell { ref unit, period: 1 } if unit == "a"), "{err}");
    }

    #[test]
    fn non_numeric_outcome_reports_row() {
        let err = csv_panel("unit,period,outcome\na,1,1\na,2,abc\n").unwrap_err();
        match err {
            Error::Parse { row, .. } => assert_eq!(row, 3),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn missing_rows_are_unobserved_and_covariates_share_mask() {
        let p = csv_panel(
            "unit,period,outcome,size,treated_since\na,2000,1,30,\na,2002,2,31,\nb,2000,5,40,2001\nb,2001,6,41,2001\n",
        )
        .unwrap();
        assert_eq!(p.periods(), &[2000, 2001, 2002]);
        assert!(!p.is_observed(0, 1));
        assert!(!p.is_observed(1, 2));
        assert_eq!(p.covariate("size").unwrap()[(1, 1)], 41.0);
        assert_eq!(p.onset(1), Some(2001));
    }

    #[test]
    fn inconsistent_onset_rejected() {
        assert!(csv_panel("unit,period,outcome,treated_since\na,1,1,\nb,1,1,2\nb,2,1,3\n").is_err());
    }

    #[test]
    fn all_treated_rejected() {
        assert!(matches!(
            csv_panel("unit,period,outcome,treated_since\nb,1,1,2\nb,2,1,2\n"),
            Err(Error::NoControls)
        ));
    }

    fn years_panel(onset: i64, first_obs: i64) -> PanelDataset {
        let mut text = String::from("unit,period,outcome,treated_since\n");
        for y in 2000..2020 {
            text.push_str(&format!("c,{y},1,\n"));
            if y >= first_obs {
                text.push_str(&format!("t,{y},2,{onset}\n"));
            }
        }
        csv_panel(&text).unwrap()
    }

    #[test]
    fn treatment_rows() {
        let p = years_panel(2012, 2000);
        let d = treatment_matrix(&p);
        assert_eq!(d.row(0), vec![0; 20]);
        let mut expected = vec![0u8; 12];
        expected.extend([1u8; 8]);
        assert_eq!(d.row(1), expected);
        let p = years_panel(2000, 2000);
        assert_eq!(treatment_matrix(&p).row(1), vec![1; 20]);
    }

    #[test]
    fn short_pre_period_unit_dropped() {
        // t observed from 2007: five periods before 2012
        let p = years_panel(2012, 2007);
        let (out, report) = validate_and_filter(&p, 6, None).unwrap();
        assert_eq!(report.dropped_units, vec!["t".to_string()]);
        assert_eq!(out.n_units(), 1);
        assert_eq!(report.n_treated, 0);
    }

    #[test]
    fn compliant_panel_unchanged() {
        let p = years_panel(2012, 2000);
        let (out, report) = validate_and_filter(&p, 6, None).unwrap();
        assert_eq!(out, p);
        assert!(report.dropped_units.is_empty());
        assert_eq!(report.n_observed_cells, 40);
    }

    #[test]
    fn exact_min_pre_retained() {
        let text = "unit,period,outcome,treated_since\n\
                    a,1,1,\na,2,1,\na,3,1,\na,4,1,\n\
                    b,1,1,\nb,2,1,\nb,3,1,\nb,4,1,\n\
                    c,1,1,\nc,2,1,\nc,3,1,\nc,4,1,\n\
                    d,1,1,3\nd,2,1,3\nd,3,1,3\nd,4,1,3\n";
        let p = csv_panel(text).unwrap();
        let (out, report) = validate_and_filter(&p, 2, None).unwrap();
        assert!(report.dropped_units.is_empty());
        assert_eq!(out.n_units(), 4);
    }

    #[test]
    fn size_filter_cell_and_unit_scope() {
        let text = "unit,period,outcome,papers\na,1,1,30\na,2,1,10\nb,1,1,40\nb,2,1,40\n";
        let p = csv_panel(text).unwrap();
        let f = SizeFilter { column: "papers".into(), min_value: 25.0, scope: DropScope::Cell };
        let (out, _) = validate_and_filter(&p, 6, Some(&f)).unwrap();
        assert_eq!(out.n_observed(), 3);
        let f = SizeFilter { scope: DropScope::Unit, ..f };
        let (out, report) = validate_and_filter(&p, 6, Some(&f)).unwrap();
        assert_eq!(out.units(), &["b"]);
        assert_eq!(report.dropped_units, vec!["a".to_string()]);
    }

    #[test]
    fn filtering_away_all_controls_is_an_error() {
        let text = "unit,period,outcome,treated_since\na,1,1,\nb,1,1,2\nb,2,1,2\n";
        let p = csv_panel(text).unwrap();
        let f = SizeFilter { column: "outcome".into(), min_value: 5.0, scope: DropScope::Unit };
        assert!(matches!(validate_and_filter(&p, 1, Some(&f)), Err(Error::NoControls)));
    }
}
