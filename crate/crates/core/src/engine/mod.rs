//! The online adaptation loop.
//!
//! Per batch: draw one perturbation spec per sample, evaluate both symmetric sides,
//! predict from their average, fold the per-sample loss differences into an update,
//! then (optionally) balance it, relax toward the anchor, move the anchor, and
//! refresh the output center and target moments.

mod config;
mod run;
mod step;

pub use config::{AdaptConfig, AdaptedLayers, Estimator, Mode, Resolved};
pub use run::{
    gradient_alignment_probe, run_protocol, run_stream, write_report, AlignmentProbe, DomainResult, RunReport,
    TraceRow,
};
pub use step::{adapt_step, cosine, Objective, OnlineState, StepOutput, StepRecord};
