//! Semiparametric relative-risk regression for infectious-disease
//! transmission data on the contact-interval time scale.
//!
//! Pairs of individuals are followed in infectiousness age, the time since
//! the potential infector became infectious. With who-infects-whom observed,
//! [`maximize`] fits a Cox-type partial likelihood and a Breslow baseline.
//! Without it, [`ecm_fit`] runs an ECM algorithm over the possible
//! transmission trees. [`simulate_epidemic`] generates data from the model
//! on a small-world network.

pub mod complete;
pub mod coverage;
pub mod data;
pub mod em;
pub mod error;
pub mod relrisk;
mod riskset;
pub mod sim;
pub mod stats;
pub mod stepfn;

pub use complete::{
    baseline_variance, breslow_baseline, expected_information, log_partial_likelihood, maximize,
    observed_information, score, FitOptions, FitReport, FitResult, InfoKind,
};
pub use data::{
    build_pair_rows, default_terms, exposure_diagnostic, load_line_list, AnalysisMode, ContactSet,
    InfectiousSets, LineList, LineListRecord, MissingPolicy, PairPolicy, PairRiskRow, PairTable, Term,
    TermSource,
};
pub use em::{
    ecm_fit, enumerate_trees, expected_log_partial_likelihood, infector_probabilities, louis_information,
    marginal_baseline_variance, marginal_breslow, marginal_nelson_aalen, smooth_hazard, BaselineHazard,
    EmFitResult, EmOptions, HazardCurve, InfectorWeights, SmoothOptions,
};
pub use error::{Error, Result};
pub use relrisk::{rr_log_grad, rr_log_hess, rr_value, RelRisk};
pub use riskset::Ties;
pub use sim::{simulate_epidemic, watts_strogatz, EpidemicConfig, SimOutput};
pub use stepfn::{baseline_ci, BaselinePoint, StepCumHaz};
