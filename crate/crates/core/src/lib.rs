//! Tracking-by-detection engine.
//!
//! Each frame passes through five phases: preprocessing (Gaussian pyramid,
//! level selection, structure-texture decomposition), feature calculation
//! (dense TV-L1 flow against the previous frame, detection lookup), flow-based
//! prediction of every active scene object, Hungarian IOU matching, and the
//! lifecycle update. The [`pipeline`] module runs those phases sequentially or
//! with flow and detection overlapped and the next frame prefetched; all modes
//! produce identical tracks.

pub mod assoc;
pub mod detect;
pub mod formats;
pub mod geom;
pub mod harness;
pub mod imaging;
pub mod optflow;
pub mod pipeline;
pub mod records;
pub mod track;

pub use assoc::{hungarian, iou, match_detections, Assignment, CostMatrix};
pub use detect::{Detection, DetectionSource, ScriptedSource};
pub use geom::BBox;
pub use imaging::{Frame, Pyramid};
pub use optflow::{compute_flow, FlowParams, MotionField};
pub use pipeline::{Mode, PipelineConfig};
pub use track::{Scene, SceneObject, TrackState};


