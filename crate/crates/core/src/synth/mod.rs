//! Synthetic two-class cell scenes and a small grid detector trained with
//! or without the posterior regularizer.

mod detector;
mod scene;
mod train;

pub use detector::{
    accumulate_weight_grad, assign_targets, cell_features, cell_predictions, decode_box, detect,
    detect_with_features, detection_loss, detection_loss_outputs, encode_box, forward, nms,
    nms_indices, random_params, select_predictions, CellFeatures, CellPrediction, CellTarget,
    DetectionLoss, GridDetectorParams, CELL_FEATURE_DIM, DETECTOR_FORMAT_VERSION, FOREGROUND_DARKNESS,
};
pub use scene::{render_dataset, render_scene, scene_cells, Cell, ClassSpec, SceneSpec, MIN_RADIUS};
pub use train::{train_detector, DetectorConfig, DetectorTraining, Regularization};
