//! Differentially private training with group-fairness certificates.
//!
//! The main entry point is [`fairdp::train`], which runs group-partitioned
//! DP-SGD with last-layer norm control and returns the per-round quantities
//! that [`certify`] turns into fairness certificates. [`fairfm`] and
//! [`certify::SmoothClassifier`] provide the baselines, [`privacy`] the
//! accountant, and [`metrics`] the held-out evaluation.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod certify;
pub mod data;
pub mod error;
pub mod fairdp;
pub mod fairfm;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod privacy;

pub use certify::{CertContext, CertificateEvent, FairnessCertificate, SmoothClassifier};
pub use data::{CsvSchema, FairnessEvent, GroupPartition, TabularDataset};
pub use error::{Error, Result};
pub use fairdp::{RoundRecord, TrainConfig, TrainOutcome};
pub use fairfm::PolyObjective;
pub use linalg::{Mat, RngStream};
pub use metrics::{Evaluation, FairnessMetric, GroupOutcomeTable};
pub use model::{Classifier, ModelParams, OptimizerMode};
pub use privacy::{LedgerReport, PrivacyLedger};
