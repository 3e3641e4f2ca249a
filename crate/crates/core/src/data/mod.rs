//! Geometric primitives, image container, annotation ingestion and the
//! dataset-preparation pipeline (masking, tiling, patch cropping).

mod annotation;
mod geometry;
mod image;
mod manifest;
mod pgm;
mod tiling;

pub use annotation::{format_annotations, load_annotations, parse_annotations, write_annotations};
pub use geometry::{iou, BoundingBox, Detection, GoldBox};
pub use image::{GrayImage, ImageRecord, Mask};
pub use manifest::{DatasetManifest, ManifestRecord};
pub use pgm::{decode_pnm, encode_pgm, read_pgm, write_pgm};
pub use tiling::{crop_patch, slice_image, SliceConfig, TileOrigin};
