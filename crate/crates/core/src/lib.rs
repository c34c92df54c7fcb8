//! Counterfactual estimation on unit-by-period panels.
//!
//! The crate bundles an interactive-fixed-effects (generalized synthetic
//! control) estimator, a nuclear-norm matrix-completion estimator, blocked
//! bootstrap inference with placebo diagnostics, a unit fixed-effects
//! regression with a compute interaction, bibliometric counting and TF-IDF
//! tools, and a synthetic panel generator with known ground truth.

pub mod att;
pub mod biblio;
pub mod cli;
pub mod completion;
pub mod error;
pub mod fmt;
pub mod ife;
pub mod inference;
pub mod linalg;
pub mod panel;
pub mod simgen;
pub mod twfe;

pub use att::{AttResult, CellGap, Interval, PeriodAtt};
pub use completion::{mc_att, soft_impute, soft_threshold, CompletionResult};
pub use error::{Error, Result};
pub use ife::{choose_r, fit_ife, impute_and_att, CvResult, FactorModelFit, FitOptions};
pub use inference::{bootstrap_att, placebo_in_space, placebo_in_time, BootstrapSpec, PlaceboReport};
pub use panel::{load_panel, treatment_matrix, validate_and_filter, PanelDataset, TreatmentMatrix};
pub use simgen::{gen_panel, DgpSpec, GroundTruth, Tau};
pub use twfe::{marginal_effect, within_ols, ComputeSeries, RegressionFit};
