//! Differentially private federated M-estimation for generalized linear models.
//!
//! The crate provides the data model ([`model`]), Gaussian-DP accounting and
//! clipping ([`privacy`]), client shards and communication accounting
//! ([`federation`]), the estimators ([`algorithms`]), closed-form error rates
//! ([`theory`]) and an experiment harness ([`harness`]).

// `!(x > 0.0)` rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod algorithms;
pub mod error;
pub mod federation;
pub mod harness;
pub mod model;
pub mod privacy;
pub mod seed;
pub mod theory;

pub use algorithms::{run, Algorithm, RunConfig, Trajectory, WeightsMode};
pub use error::{FedError, Result};
pub use federation::{ClientShard, CommLedger, PartitionScheme, WeightVector};
pub use harness::{run_experiment, ExperimentSpec, HarnessOptions, ResultRow, SweepAxis};
pub use model::{Family, ModelSpec, Sample, TrueParameter};
pub use privacy::{ClipBound, ClipProvenance, NewtonConstants, NoisePlan, NoiseStage, PrivacyBudget};
