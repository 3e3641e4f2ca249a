//! Implicit features: a small feed-forward patch encoder pretrained with a
//! supervised contrastive loss, followed by a frozen PCA projection.

mod augment;
mod io;
mod network;
mod pca;
pub mod probe;
mod supcon;
mod train;

pub use augment::{augment_box, AugmentConfig};
pub use io::{ImplicitExtractor, ENCODER_FORMAT_VERSION};
pub use network::{encode, DenseLayer, EncoderConfig, EncoderParams, PatchPipeline, EMBEDDING_NORM_EPS};
pub use pca::{pca_fit, symmetric_eigen, PcaProjection, PCA_VARIANCE_TARGET};
pub use supcon::{supcon_grad, supcon_loss, SupConLoss};
pub use train::{
    annealed_augment_fraction, balanced_batch, train_encoder, EncoderTraining, PatchDataset,
    PatchSample, TrainConfig,
};
