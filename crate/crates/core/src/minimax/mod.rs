//! Interleaved mask / sparsity-level / multiplier optimisation.

mod config;
mod optim;
mod trace;
mod train;

pub use config::{interval_schedule, RunConfig};
pub use optim::AdamW;
pub use trace::{
    multiplier_report, write_trace_csv, write_trace_json, MultiplierReport, StepRecord,
};
pub use train::{
    constraint_status, s_gradient, update_sparsity_vars, width_variance, ConstraintStatus,
    RunOutput, SGradient, TrainState, Trainer, WindowSampler,
};
