//! Diagonal Gaussian mixtures: EM fitting, evaluation, sampling and
//! Monte-Carlo KL divergence.

mod em;
mod gmm;
mod kl;

pub use em::{em_fit, select_k_bic, EmConfig, EmFit};
pub use gmm::{Gmm, GmmDocument, GMM_FORMAT_VERSION, VARIANCE_FLOOR};
pub use kl::{
    kl_closed_form_gaussian, kl_mc_paired, kl_mc_standard, kl_mc_standard_threaded, KlEstimate,
    KL_SHARD_SIZE,
};
