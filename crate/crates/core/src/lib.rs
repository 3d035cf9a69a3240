//! Sequential conformal prediction for black-box generative models.
//!
//! A prediction set is grown from i.i.d. generator samples until a running
//! non-conformity score exceeds a calibrated threshold, then pruned by greedy
//! filters (farthest-point diversity, max-quality), each with its own
//! threshold. Every stage is calibrated with split conformal prediction on a
//! disjoint fold, conditionally on the previous stage being admissible, so the
//! end-to-end admissibility factorizes into per-stage terms whose risk levels
//! multiply back to the requested level.
//!
//! The crate also carries the learn-then-test (CLM) comparison baseline, a
//! synthetic world with closed-form admissibility, and the admission oracles
//! (automated, replayed and human-in-the-loop) used during calibration.

pub mod calibrator;
pub mod clm;
pub mod conformal;
pub mod error;
pub mod extended;
pub mod filters;
pub mod human;
pub mod nonconformity;
pub mod oracle;
pub mod predictor;
pub mod seed;
pub mod world;

pub use calibrator::{calibrate, CalibrationConfig, CalibrationResult, GenerationBudget};
pub use conformal::{allocate_risk, conformal_quantile, ConformalThreshold, RiskLevels, RiskSplit};
pub use error::{CalibrationError, ContractError, GeneratorError, InvalidInput, OracleError};
pub use filters::{Candidate, FilterKind, FilterSpec, Metric, PredictionSet};
pub use nonconformity::{NonConformityState, UpdateRule};
pub use oracle::{AdmissionOracle, AdmissionRecord, Judge, Query, VerdictSource};
pub use predictor::{PredictPipeline, Prediction};
pub use world::{GenerativeModel, Instance, InstanceId};
