//! Evaluation protocol: KDE plausibility, validity, proximity, sparsity and
//! timing per method, the counterfactual-weight sweep, the loss-term
//! deconstruction and latent-space probes.

mod deconstruct;
mod kde;
mod metrics;
mod probe;
pub mod report;
mod sweep;

pub use deconstruct::{
    bounding_box, run_deconstruction, variant_stats, DeconstructionReport, LossVariant,
    VariantStats,
};
pub use kde::{KdeModel, BANDWIDTH_RULE};
pub use metrics::{
    compare_methods, proximity_mse, sparsity_stats, sparsity_stats_at, Comparison, EvalReport,
    MethodResults, CHANGED_FRACTION,
};
pub use probe::{latent_probe, LogisticProbe, Pca2, ProbeResult};
pub use sweep::{run_lambda_sweep, SweepResult, SweepRow};
