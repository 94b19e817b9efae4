//! Data, teacher pretraining, evaluation and experiment drivers.

pub mod baseline;
pub mod config;
pub mod corpus;
pub mod eval;
pub mod pretrain;
pub mod run;
pub mod stats;

pub use baseline::{magnitude_prune, magnitude_scores};
pub use config::{parse_value, DataConfig, ExperimentConfig};
pub use corpus::{eval_windows, synthetic_text, Corpus};
pub use eval::{eval_ppl, nll_sum, ModelRef};
pub use pretrain::{pretrain, pretrain_with, PretrainConfig, PretrainReport};
pub use run::{
    eval_cmd, fused_params, pretrain_cmd, prune_cmd, prune_experiment, stats_cmd,
    structure_variance, sweep, sweep_cmd, EvalReport, PruneResult, PruneSummary, SweepEntry,
    SweepParam, SweepReport,
};
pub use stats::{export_mask_stats, mask_stats, LayerStats, MaskStats};
