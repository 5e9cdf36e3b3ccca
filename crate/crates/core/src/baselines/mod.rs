//! Reference counterfactual methods: gradient search in feature space with
//! greedy sparsification, gradient search in a vanilla VAE's latent space,
//! and nearest-unlike-neighbour substitution. All of them use the
//! predictor only through its outputs and input gradients.

mod input_search;
mod latent_search;
mod nun;

pub use input_search::{cf_input_search, cf_input_search_from, sparsify_greedy, InputSearchConfig};
pub use latent_search::{cf_latent_search, LatentSearchConfig};
pub use nun::{cf_nun, nearest_unlike_neighbor, splice, NunConfig, SegmentMode};
