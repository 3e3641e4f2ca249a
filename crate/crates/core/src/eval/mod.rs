//! Detection metrics (greedy IoU matching, all-points AP, mAP at one IoU
//! threshold), counting errors on recomposed full images, and Q-ratio
//! classification.

mod ap;
mod counting;
mod matching;
mod qratio;
mod report;

pub use ap::{average_precision, detection_metrics, ClassDetectionMetrics, DetectionMetrics, ScoredPrediction};
pub use counting::{counting_report, CountReport, ImageCounts, SubimageCounts};
pub use matching::{confidence_order, match_detections, MatchResult};
pub use qratio::{classification_metrics, classify_celiac, q_ratio, ClassificationMetrics, Diagnosis, CELIAC_THRESHOLD};
pub use report::{evaluate, EvalReport, EvalSample};
