//! Synthetic sequences, detection noise and tracking metrics.

pub mod export;
pub mod metrics;
pub mod noise;
pub mod scene;
pub mod texture;

pub use export::{export_sequence, ExportError, ExportedSequence};
pub use metrics::{evaluate, EvalError, Metrics, MATCH_IOU};
pub use noise::{emit_detections, emit_sequence, NoiseError, NoiseModel};
pub use scene::{suite, two_lane_scene, ObjectScript, SceneError, SyntheticScene, Waypoint};
pub use texture::ValueNoise;
