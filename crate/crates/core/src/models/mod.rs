//! The frozen black-box predictor, the VAE family and counterfactual
//! generation.

mod arch;
pub mod checkpoint;
mod generate;
mod predictor;
mod train;
mod vae;

pub use arch::{SeqSpec, SeqTrunk};
pub use checkpoint::{load_predictor, load_vae, save_predictor, save_vae, LoadedVae};
pub use generate::{generate_cf, CfResult};
pub use predictor::{
    label_of, train_predictor, BinaryPredictor, PredictorArch, PredictorMetrics, PredictorSpec,
};
pub use train::{epoch_rng, shuffled_batches, TrainConfig};
pub use vae::{
    cfvae_loss, cfvae_loss_graph, train_vae, vae_loss_graph, CfLossGraph, CfVae, EncoderArch,
    EpochTrace, LatentDistribution, LossBreakdown, LossTerms, OutputHead, SampleMode, TrainState,
    VaeOutput, VaeSpec, VaeTrainConfig,
};
