//! Instrumented gradient descent for logistic loss on deep networks with
//! smoothed ReLU activations.
//!
//! The crate evaluates the network and its exact gradient, computes the
//! closed-form step-size and smoothing constants of the convergence theory,
//! and monitors the theory's inequalities along a training trajectory.

pub mod activation;
pub mod bounds;
pub mod error;
pub mod harness;
pub mod init;
pub mod linalg;
pub mod network;
pub mod ntk;
pub mod oracles;
pub mod trajectory;

pub use activation::{certify_h_smooth, Activation, ActivationKind, GridSpec, SmoothnessReport};
pub use bounds::{
    monitor_transition, summarize, Check, InvariantVerdict, MonitorContext, MonitorTolerances, StepRecord, StepState,
    TheoryConstants, TheoryInputs, Verdict,
};
pub use error::{Error, Result};
pub use init::{gaussian_init, make_clustered_dataset, ClusteredDataSpec, InitSpec};
pub use linalg::{operator_norm, Matrix, ParamIndex, WeightStack};
pub use network::{evaluate, forward, gradient, total_loss, Dataset, Evaluation, ForwardTrace, LossValue};
pub use trajectory::{two_phase_train, PhasePlan, PlanConstants};
