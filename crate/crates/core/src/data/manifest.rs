use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::annotation::load_annotations;
use super::image::ImageRecord;
use super::pgm::read_pgm;
use crate::error::{Error, Result};

/// One image/annotation pair; paths are relative to the manifest file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub image: PathBuf,
    pub labels: PathBuf,
    /// Full-image identifier for tiles, used to recompose counts.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub class_names: Vec<String>,
    pub iou_threshold: f64,
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.class_names.is_empty() {
            return Err(Error::Validation("manifest has no class names".into()));
        }
        if !(self.iou_threshold > 0.0 && self.iou_threshold < 1.0) {
            return Err(Error::Validation(format!(
                "iou_threshold {} outside (0, 1)",
                self.iou_threshold
            )));
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// Read every image and annotation file, resolving paths against `base`.
    pub fn load_records(&self, base: impl AsRef<Path>) -> Result<Vec<ImageRecord>> {
        let base = base.as_ref();
        self.records
            .iter()
            .map(|r| {
                let image = read_pgm(base.join(&r.image))?;
                let gold = load_annotations(
                    base.join(&r.labels),
                    image.width(),
                    image.height(),
                    Some(self.num_classes()),
                )?;
                ImageRecord::new(image, gold)
            })
            .collect()
    }

    /// Source identifier per record (falls back to the image path).
    pub fn sources(&self) -> Vec<String> {
        self.records
            .iter()
            .map(|r| {
                r.source
                    .clone()
                    .unwrap_or_else(|| r.image.display().to_string())
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_unknown_keys_and_bad_threshold() {
        let bad = r#"{"class_names":["a"],"iou_threshold":0.5,"records":[],"extra":1}"#;
        assert!(serde_json::from_str::<DatasetManifest>(bad).is_err());
        let m: DatasetManifest =
            serde_json::from_str(r#"{"class_names":["a"],"iou_threshold":1.0,"records":[]}"#)
                .unwrap();
        assert!(m.validate().is_err());
        let m: DatasetManifest =
            serde_json::from_str(r#"{"class_names":[],"iou_threshold":0.3,"records":[]}"#).unwrap();
        assert!(m.validate().is_err());
    }
}
