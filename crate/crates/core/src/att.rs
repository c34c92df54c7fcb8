//! Treatment-effect summaries shared by every counterfactual estimator.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fmt::{float17, opt_float17};

/// One treated, post-onset, observed cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellGap {
    pub unit: String,
    pub period: i64,
    pub observed: f64,
    pub counterfactual: f64,
    pub gap: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub level: f64,
    pub lo: f64,
    pub hi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodAtt {
    pub period: i64,
    pub att: f64,
    pub n_cells: usize,
    pub se: Option<f64>,
    pub ci: Option<Interval>,
}

/// Gaps between observed and imputed outcomes plus their averages. The
/// pooled `att` weights every treated post-onset cell equally.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttResult {
    pub gaps: Vec<CellGap>,
    pub att_by_period: Vec<PeriodAtt>,
    pub att: f64,
    pub n_cells: usize,
    pub se: Option<f64>,
    pub ci: Option<Interval>,
}

impl AttResult {
    pub fn from_gaps(gaps: Vec<CellGap>) -> Result<Self> {
        if gaps.is_empty() {
            return Err(Error::InvalidArgument("no observed treated post-onset cells".into()));
        }
        let mut by_period: BTreeMap<i64, (f64, usize)> = BTreeMap::new();
        for g in &gaps {
            let e = by_period.entry(g.period).or_insert((0.0, 0));
            e.0 += g.gap;
            e.1 += 1;
        }
        let att_by_period = by_period
            .into_iter()
            .map(|(period, (sum, n))| PeriodAtt { period, att: sum / n as f64, n_cells: n, se: None, ci: None })
            .collect();
        let att = gaps.iter().map(|g| g.gap).sum::<f64>() / gaps.len() as f64;
        Ok(Self { n_cells: gaps.len(), gaps, att_by_period, att, se: None, ci: None })
    }

    pub fn periods(&self) -> Vec<i64> {
        self.att_by_period.iter().map(|p| p.period).collect()
    }

    /// CSV `period,att,se,lo,hi`; uncertainty columns are empty when absent.
    pub fn write_period_csv<W: Write>(&self, sink: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        w.write_record(["period", "att", "se", "lo", "hi"])?;
        for p in &self.att_by_period {
            w.write_record([
                p.period.to_string(),
                float17(p.att),
                opt_float17(p.se),
                opt_float17(p.ci.map(|c| c.lo)),
                opt_float17(p.ci.map(|c| c.hi)),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// CSV `unit,period,observed,counterfactual,gap`.
    pub fn write_gaps_csv<W: Write>(&self, sink: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        w.write_record(["unit", "period", "observed", "counterfactual", "gap"])?;
        for g in &self.gaps {
            w.write_record([
                g.unit.clone(),
                g.period.to_string(),
                float17(g.observed),
                float17(g.counterfactual),
                float17(g.gap),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// CSV `period,mean_observed_treated,mean_counterfactual` averaged over
    /// the treated cells of each period.
    pub fn write_observed_vs_counterfactual_csv<W: Write>(&self, sink: W) -> Result<()> {
        let mut by_period: BTreeMap<i64, (f64, f64, usize)> = BTreeMap::new();
        for g in &self.gaps {
            let e = by_period.entry(g.period).or_insert((0.0, 0.0, 0));
            e.0 += g.observed;
            e.1 += g.counterfactual;
            e.2 += 1;
        }
        let mut w = csv::Writer::from_writer(sink);
        w.write_record(["period", "mean_observed_treated", "mean_counterfactual"])?;
        for (period, (obs, cf, n)) in by_period {
            w.write_record([period.to_string(), float17(obs / n as f64), float17(cf / n as f64)])?;
        }
        w.flush()?;
        Ok(())
    }

    /// CSV `period,att,lo,hi`; interval columns are empty when absent.
    pub fn write_gap_csv<W: Write>(&self, sink: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        w.write_record(["period", "att", "lo", "hi"])?;
        for p in &self.att_by_period {
            w.write_record([
                p.period.to_string(),
                float17(p.att),
                opt_float17(p.ci.map(|c| c.lo)),
                opt_float17(p.ci.map(|c| c.hi)),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}
