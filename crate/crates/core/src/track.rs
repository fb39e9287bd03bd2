//! Scene objects and their lifecycle: flow-based prediction and the update
//! from match results.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assoc::Assignment;
use crate::detect::Detection;
use crate::geom::BBox;
use crate::optflow::MotionField;

#[derive(Debug, Error, PartialEq)]
pub enum TrackError {
    #[error("assignment refers to scene slot {index}, only {len} were matched")]
    SceneIndex { index: usize, len: usize },
    #[error("assignment refers to detection {index}, only {len} exist")]
    DetectionIndex { index: usize, len: usize },
    #[error("active index {index} does not name an active object")]
    NotActive { index: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrackState {
    Active,
    Lost,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub id: u64,
    pub class_id: u32,
    pub label: String,
    #[serde(rename = "box", with = "crate::detect::box_array")]
    pub bbox: BBox,
    pub state: TrackState,
    pub born_at: u64,
    pub last_seen: u64,
    pub score: f64,
    /// Consecutive frames without a matching detection.
    pub misses: u32,
    pub lost_at: Option<u64>,
}

impl SceneObject {
    pub fn is_active(&self) -> bool {
        self.state == TrackState::Active
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackerConfig {
    /// Frames an unmatched object keeps coasting on flow before it is marked
    /// lost; 0 marks it lost at the first miss.
    pub max_coast: u32,
    /// Weight of the predicted box when a match refreshes the box; 0 adopts
    /// the detection box as is.
    pub box_blend: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self { max_coast: 0, box_blend: 0.0 }
    }
}

/// Pixel columns/rows `[start, end)` covered by a box edge pair after
/// round-half-away-from-zero and clamping to `0..limit`.
fn support(lo: f64, hi: f64, limit: usize) -> (usize, usize) {
    let clamp = |v: f64| v.round().clamp(0.0, limit as f64) as usize;
    (clamp(lo), clamp(hi))
}

/// Mean flow over the pixels of `bbox` (original-frame coordinates) on a
/// field computed at pyramid `level`, in level pixels. `None` when the box
/// covers no field pixel.
pub fn mean_flow_in_box(field: &MotionField, bbox: &BBox, level: usize) -> Option<(f64, f64)> {
    let s = (1u64 << level) as f64;
    let (x0, x1) = support(bbox.x / s, bbox.right() / s, field.width());
    let (y0, y1) = support(bbox.y / s, bbox.bottom() / s, field.height());
    if x1 <= x0 || y1 <= y0 {
        return None;
    }
    let (mut sx, mut sy) = (0f64, 0f64);
    let w = field.width();
    for y in y0..y1 {
        let row = y * w;
        for x in x0..x1 {
            sx += field.dx()[row + x] as f64;
            sy += field.dy()[row + x] as f64;
        }
    }
    let n = ((x1 - x0) * (y1 - y0)) as f64;
    Some((sx / n, sy / n))
}

/// Shifts `bbox` by the mean flow inside it, scaled back to original-frame
/// pixels, then keeps it inside the frame. `None` on empty pixel support.
pub fn predict_box(
    bbox: &BBox,
    field: &MotionField,
    level: usize,
    frame_width: f64,
    frame_height: f64,
) -> Option<BBox> {
    let (dx, dy) = mean_flow_in_box(field, bbox, level)?;
    let s = (1u64 << level) as f64;
    Some(bbox.translate(dx * s, dy * s).clamp_position(frame_width, frame_height))
}

/// Predicted positions for `objects`, in order.
pub fn predict(
    objects: &[&SceneObject],
    field: &MotionField,
    level: usize,
    frame_width: f64,
    frame_height: f64,
) -> Vec<Option<BBox>> {
    objects.iter().map(|o| predict_box(&o.bbox, field, level, frame_width, frame_height)).collect()
}

/// Active objects only, order preserved.
pub fn active_set(objects: &[SceneObject]) -> Vec<&SceneObject> {
    objects.iter().filter(|o| o.is_active()).collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateReport {
    pub matched: Vec<u64>,
    pub coasting: Vec<u64>,
    pub lost: Vec<u64>,
    pub spawned: Vec<u64>,
}

/// Object whose box left the flow field during prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionDropout {
    pub id: u64,
    pub frame: u64,
    pub reason: String,
}

/// All scene objects of a run, active and lost, in creation order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    objects: Vec<SceneObject>,
    next_id: u64,
    config: TrackerConfig,
}

impl Default for Scene {
    fn default() -> Self {
        Self::new(TrackerConfig::default())
    }
}

impl Scene {
    pub fn new(config: TrackerConfig) -> Self {
        Self { objects: Vec::new(), next_id: 0, config }
    }

    pub fn objects(&self) -> &[SceneObject] {
        &self.objects
    }

    pub fn config(&self) -> &TrackerConfig {
        &self.config
    }

    /// Ids handed out so far.
    pub fn ids_created(&self) -> u64 {
        self.next_id
    }

    /// Positions in [`Scene::objects`] of the active objects.
    pub fn active_indices(&self) -> Vec<usize> {
        (0..self.objects.len()).filter(|&i| self.objects[i].is_active()).collect()
    }

    /// Moves every active object to its flow-predicted position. Objects
    /// without pixel support on the field are marked lost and reported.
    pub fn apply_prediction(
        &mut self,
        field: &MotionField,
        level: usize,
        frame: u64,
        frame_width: f64,
        frame_height: f64,
    ) -> Vec<PredictionDropout> {
        let mut dropped = Vec::new();
        for obj in self.objects.iter_mut().filter(|o| o.is_active()) {
            match predict_box(&obj.bbox, field, level, frame_width, frame_height) {
                Some(b) => obj.bbox = b,
                None => {
                    obj.state = TrackState::Lost;
                    obj.lost_at = Some(frame);
                    dropped.push(PredictionDropout {
                        id: obj.id,
                        frame,
                        reason: format!("box {:?} has no pixel support at level {level}", <[f64; 4]>::from(obj.bbox)),
                    });
                }
            }
        }
        dropped
    }

    /// Applies a match result. `active` lists the scene slots (indices into
    /// [`Scene::objects`]) in the order they were matched, so that
    /// `assignment` scene index `i` refers to `objects[active[i]]`.
    pub fn update(
        &mut self,
        active: &[usize],
        assignment: &Assignment,
        detections: &[Detection],
        frame: u64,
    ) -> Result<UpdateReport, TrackError> {
        for &i in active {
            if !self.objects.get(i).is_some_and(SceneObject::is_active) {
                return Err(TrackError::NotActive { index: i });
            }
        }
        let check_scene = |i: usize| {
            if i < active.len() {
                Ok(())
            } else {
                Err(TrackError::SceneIndex { index: i, len: active.len() })
            }
        };
        let check_det = |j: usize| {
            if j < detections.len() {
                Ok(())
            } else {
                Err(TrackError::DetectionIndex { index: j, len: detections.len() })
            }
        };
        for &(i, j, _) in &assignment.pairs {
            check_scene(i)?;
            check_det(j)?;
        }
        assignment.unmatched_scene.iter().try_for_each(|&i| check_scene(i))?;
        assignment.unmatched_detections.iter().try_for_each(|&j| check_det(j))?;

        let mut report = UpdateReport::default();
        let blend = self.config.box_blend.clamp(0.0, 1.0);
        for &(i, j, _) in &assignment.pairs {
            let obj = &mut self.objects[active[i]];
            let det = &detections[j];
            obj.bbox = if blend > 0.0 {
                BBox::new(
                    blend * obj.bbox.x + (1.0 - blend) * det.bbox.x,
                    blend * obj.bbox.y + (1.0 - blend) * det.bbox.y,
                    blend * obj.bbox.w + (1.0 - blend) * det.bbox.w,
                    blend * obj.bbox.h + (1.0 - blend) * det.bbox.h,
                )
            } else {
                det.bbox
            };
            obj.score = det.score;
            obj.last_seen = frame;
            obj.misses = 0;
            report.matched.push(obj.id);
        }
        for &i in &assignment.unmatched_scene {
            let obj = &mut self.objects[active[i]];
            obj.misses += 1;
            if obj.misses > self.config.max_coast {
                obj.state = TrackState::Lost;
                obj.lost_at = Some(frame);
                report.lost.push(obj.id);
            } else {
                report.coasting.push(obj.id);
            }
        }
        for &j in &assignment.unmatched_detections {
            let id = self.spawn(&detections[j], frame);
            report.spawned.push(id);
        }
        Ok(report)
    }

    fn spawn(&mut self, det: &Detection, frame: u64) -> u64 {
        let id = self.next_id;
        self.next_id += 1;
        self.objects.push(SceneObject {
            id,
            class_id: det.class_id,
            label: det.label.clone(),
            bbox: det.bbox,
            state: TrackState::Active,
            born_at: frame,
            last_seen: frame,
            score: det.score,
            misses: 0,
            lost_at: None,
        });
        id
    }
}
