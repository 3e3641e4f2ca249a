use std::path::Path;

use serde::{Deserialize, Serialize};

use super::network::{encode_input, EncoderParams, PatchPipeline};
use super::pca::{pca_fit, PcaProjection};
use super::train::PatchDataset;
use crate::data::{BoundingBox, GrayImage};
use crate::error::{Error, Result};

pub const ENCODER_FORMAT_VERSION: u32 = 1;

/// Frozen implicit-feature extractor: patch crop, encoder, PCA.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImplicitExtractor {
    pub format_version: u32,
    pub pipeline: PatchPipeline,
    pub encoder: EncoderParams,
    pub pca: PcaProjection,
}

impl ImplicitExtractor {
    /// Fit PCA on the embeddings of every gold patch in `dataset`.
    pub fn fit(
        encoder: EncoderParams,
        pipeline: PatchPipeline,
        dataset: &PatchDataset<'_>,
        variance_target: f64,
    ) -> Result<Self> {
        let embeddings = dataset
            .samples
            .iter()
            .map(|s| encode_input(&encoder, &pipeline.input(dataset.images[s.image], &s.bbox)?))
            .collect::<Result<Vec<_>>>()?;
        let pca = pca_fit(&embeddings, variance_target)?;
        Ok(ImplicitExtractor {
            format_version: ENCODER_FORMAT_VERSION,
            pipeline,
            encoder,
            pca,
        })
    }

    pub fn dim(&self) -> usize {
        self.pca.retained
    }

    pub fn embed(&self, image: &GrayImage, bbox: &BoundingBox) -> Result<Vec<f64>> {
        encode_input(&self.encoder, &self.pipeline.input(image, bbox)?)
    }

    /// PCA-reduced implicit feature vector of one box.
    pub fn features(&self, image: &GrayImage, bbox: &BoundingBox) -> Result<Vec<f64>> {
        self.pca.project(&self.embed(image, bbox)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != ENCODER_FORMAT_VERSION {
            return Err(Error::Validation(format!(
                "unsupported encoder format version {}",
                self.format_version
            )));
        }
        self.encoder.validate()?;
        if self.pca.input_dim() != self.encoder.embedding_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.encoder.embedding_dim(),
                actual: self.pca.input_dim(),
            });
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ex: ImplicitExtractor = serde_json::from_str(&text)?;
        ex.validate()?;
        Ok(ex)
    }
}
