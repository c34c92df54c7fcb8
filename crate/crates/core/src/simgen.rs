//! Synthetic panels drawn from the interactive-fixed-effects model with known
//! parameters.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::{Covariate, PanelDataset, DEFAULT_MIN_PRE};

/// Treatment effect per effect period: one constant or an explicit path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Tau {
    Constant(f64),
    Path(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DgpSpec {
    pub seed: u64,
    pub n_units: usize,
    pub n_treated: usize,
    pub n_periods: usize,
    #[serde(default = "default_first_period")]
    pub first_period: i64,
    /// Labelled treatment onset of the treated units.
    pub onset_period: i64,
    pub r_true: usize,
    #[serde(default)]
    pub beta_true: Vec<f64>,
    pub tau: Tau,
    pub sigma: f64,
    /// Shift added to every treated loading; covariates load on the factor
    /// component with weight `confound / 2`.
    #[serde(default)]
    pub confound: f64,
    /// Standard deviation of the latent factors.
    #[serde(default = "default_factor_scale")]
    pub factor_scale: f64,
    /// Share of control units observed only every second period.
    #[serde(default)]
    pub biannual_fraction: f64,
    /// The effect starts this many periods before the labelled onset.
    #[serde(default)]
    pub effect_lead: usize,
}

fn default_first_period() -> i64 {
    1
}

fn default_factor_scale() -> f64 {
    1.0
}

impl DgpSpec {
    /// 57 units (10 treated), 20 periods, onset at period 12, two factors,
    /// one covariate, τ = 5, σ = 1, confound = 1.
    pub fn benchmark(seed: u64) -> Self {
        Self {
            seed,
            n_units: 57,
            n_treated: 10,
            n_periods: 20,
            first_period: 1,
            onset_period: 12,
            r_true: 2,
            beta_true: vec![1.0],
            tau: Tau::Constant(5.0),
            sigma: 1.0,
            confound: 1.0,
            factor_scale: 1.0,
            biannual_fraction: 0.0,
            effect_lead: 0,
        }
    }

    fn onset_index(&self) -> i64 {
        self.onset_period - self.first_period
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InfeasibleSpec(m));
        if self.n_treated >= self.n_units {
            return bad("n_treated must be below n_units".into());
        }
        let onset = self.onset_index();
        if onset < DEFAULT_MIN_PRE as i64 {
            return bad(format!("onset leaves {onset} pre-periods, at least {DEFAULT_MIN_PRE} required"));
        }
        if onset >= self.n_periods as i64 {
            return bad("onset must leave at least one post-onset period".into());
        }
        if self.effect_lead as i64 > onset {
            return bad("effect_lead reaches before the first period".into());
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return bad("sigma must be finite and non-negative".into());
        }
        if !(self.confound >= 0.0 && self.confound.is_finite()) {
            return bad("confound must be finite and non-negative".into());
        }
        if !(self.factor_scale >= 0.0 && self.factor_scale.is_finite()) {
            return bad("factor_scale must be finite and non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.biannual_fraction) {
            return bad("biannual_fraction must lie in [0, 1]".into());
        }
        if self.r_true > self.n_periods {
            return bad("r_true exceeds n_periods".into());
        }
        if let Tau::Path(p) = &self.tau {
            let need = self.n_periods - (onset as usize - self.effect_lead);
            if p.len() != need {
                return bad(format!("tau path has {} entries, {need} effect periods", p.len()));
            }
        }
        if self.beta_true.iter().any(|b| !b.is_finite()) {
            return bad("beta_true must be finite".into());
        }
        Ok(())
    }

    fn effect_start(&self) -> usize {
        self.onset_index() as usize - self.effect_lead
    }

    /// Effect at period index `j`, zero before the effect starts.
    fn tau_at(&self, j: usize) -> f64 {
        let start = self.effect_start();
        if j < start {
            return 0.0;
        }
        match &self.tau {
            Tau::Constant(v) => *v,
            Tau::Path(p) => p[j - start],
        }
    }
}

/// Parameters behind a generated panel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// `(period, τ_t)` for every period with a non-zero effect window entry.
    pub tau_by_period: Vec<(i64, f64)>,
    /// Mean effect over observed treated cells at or after the labelled onset.
    pub att: f64,
    pub beta_true: Vec<f64>,
    pub factors: Vec<Vec<f64>>,
    pub loadings: Vec<Vec<f64>>,
    pub unit_effects: Vec<f64>,
    pub time_effects: Vec<f64>,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample::<f64, _>(StandardNormal)
}

/// Draws a panel. Identical specs give bit-identical panels.
pub fn gen_panel(spec: &DgpSpec) -> Result<(PanelDataset, GroundTruth)> {
    spec.validate()?;
    let (n, t, r) = (spec.n_units, spec.n_periods, spec.r_true);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let factors = DMatrix::from_fn(t, r, |_, _| spec.factor_scale * normal(&mut rng));
    let mut loadings = DMatrix::from_fn(n, r, |_, _| normal(&mut rng));
    let alpha: Vec<f64> = (0..n).map(|_| normal(&mut rng)).collect();
    let eta: Vec<f64> = (0..t).map(|_| normal(&mut rng)).collect();
    let treated = |i: usize| i < spec.n_treated;
    for i in 0..spec.n_treated {
        for k in 0..r {
            loadings[(i, k)] += spec.confound;
        }
    }
    let common = &loadings * factors.transpose();
    let covariates: Vec<DMatrix<f64>> = spec
        .beta_true
        .iter()
        .map(|_| {
            DMatrix::from_fn(n, t, |_, _| normal(&mut rng))
                .zip_map(&common, |z, c| 1.0 + z + 0.5 * spec.confound * c)
        })
        .collect();
    let noise = DMatrix::from_fn(n, t, |_, _| spec.sigma * normal(&mut rng));

    let mut mask = DMatrix::from_element(n, t, true);
    let controls: Vec<usize> = (spec.n_treated..n).collect();
    let n_biannual = (spec.biannual_fraction * controls.len() as f64).round() as usize;
    let mut order = controls.clone();
    order.shuffle(&mut rng);
    for &i in order.iter().take(n_biannual) {
        let phase = rng.random_range(0..2usize);
        for j in 0..t {
            mask[(i, j)] = (j + phase) % 2 == 0;
        }
    }

    let onset_idx = spec.onset_index() as usize;
    let outcome = DMatrix::from_fn(n, t, |i, j| {
        let effect = if treated(i) { spec.tau_at(j) } else { 0.0 };
        let xb: f64 = spec.beta_true.iter().zip(&covariates).map(|(b, x)| b * x[(i, j)]).sum();
        effect + xb + common[(i, j)] + alpha[i] + eta[j] + noise[(i, j)]
    });

    let width = n.to_string().len().max(2);
    let units: Vec<String> = (0..n)
        .map(|i| if treated(i) { format!("tr{i:0width$}") } else { format!("co{i:0width$}") })
        .collect();
    let periods: Vec<i64> = (0..t).map(|j| spec.first_period + j as i64).collect();
    let onsets = (0..n).map(|i| treated(i).then_some(spec.onset_period)).collect();
    let covariates = covariates
        .into_iter()
        .enumerate()
        .map(|(k, values)| Covariate { name: format!("x{}", k + 1), values })
        .collect();
    let panel = PanelDataset::new(units, periods.clone(), outcome, mask.clone(), covariates, onsets)?;

    let mut att_sum = 0.0;
    let mut att_n = 0usize;
    for i in 0..spec.n_treated {
        for j in onset_idx..t {
            if mask[(i, j)] {
                att_sum += spec.tau_at(j);
                att_n += 1;
            }
        }
    }
    let truth = GroundTruth {
        tau_by_period: (spec.effect_start()..t).map(|j| (periods[j], spec.tau_at(j))).collect(),
        att: att_sum / att_n.max(1) as f64,
        beta_true: spec.beta_true.clone(),
        factors: (0..t).map(|j| factors.row(j).iter().copied().collect()).collect(),
        loadings: (0..n).map(|i| loadings.row(i).iter().copied().collect()).collect(),
        unit_effects: alpha,
        time_effects: eta,
    };
    Ok((panel, truth))
}
