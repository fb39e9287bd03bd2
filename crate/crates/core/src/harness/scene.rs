//! Scripted synthetic sequences with exact ground truth.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::texture::ValueNoise;
use crate::geom::BBox;
use crate::imaging::Frame;

#[derive(Debug, Error, PartialEq)]
pub enum SceneError {
    #[error("frame size {width}x{height} is too small")]
    FrameSize { width: usize, height: usize },
    #[error("scene has no frames")]
    NoFrames,
    #[error("object {object}: {message}")]
    Script { object: usize, message: String },
    #[error("object {object} is less than half inside the frame at t={t}")]
    OutOfFrame { object: usize, t: u64 },
    #[error("t={t} is outside the scene (length {len})")]
    TimeOutOfRange { t: u64, len: u64 },
}

/// Top-left corner of an object at a key frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub t: u64,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectScript {
    pub class_id: u32,
    pub label: String,
    pub width: f64,
    pub height: f64,
    /// Piecewise-linear trajectory; the position is held before the first
    /// and after the last waypoint.
    pub waypoints: Vec<Waypoint>,
    pub texture_seed: u64,
}

impl ObjectScript {
    pub fn position(&self, t: f64) -> (f64, f64) {
        let w = &self.waypoints;
        let first = w[0];
        if t <= first.t as f64 {
            return (first.x, first.y);
        }
        for pair in w.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            if t <= b.t as f64 {
                let s = (t - a.t as f64) / (b.t - a.t) as f64;
                return (a.x + s * (b.x - a.x), a.y + s * (b.y - a.y));
            }
        }
        let last = w[w.len() - 1];
        (last.x, last.y)
    }

    pub fn bbox_at(&self, t: u64) -> BBox {
        let (x, y) = self.position(t as f64);
        BBox::new(x, y, self.width, self.height)
    }

    fn texture(&self) -> ValueNoise {
        ValueNoise { seed: self.texture_seed, cell: 6.0, octaves: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub width: usize,
    pub height: usize,
    pub frames: u64,
    pub background_seed: u64,
    pub objects: Vec<ObjectScript>,
}

impl SyntheticScene {
    pub fn validate(&self) -> Result<(), SceneError> {
        if self.width < 2 || self.height < 2 {
            return Err(SceneError::FrameSize { width: self.width, height: self.height });
        }
        if self.frames == 0 {
            return Err(SceneError::NoFrames);
        }
        for (i, o) in self.objects.iter().enumerate() {
            let fail = |message: &str| Err(SceneError::Script { object: i, message: message.to_string() });
            if !(o.width.is_finite() && o.height.is_finite() && o.width > 0.0 && o.height > 0.0) {
                return fail("size must be positive");
            }
            if o.waypoints.is_empty() {
                return fail("needs at least one waypoint");
            }
            if o.waypoints.iter().any(|w| !w.x.is_finite() || !w.y.is_finite()) {
                return fail("waypoints must be finite");
            }
            if o.waypoints.windows(2).any(|p| p[1].t <= p[0].t) {
                return fail("waypoint times must increase");
            }
            for t in 0..self.frames {
                let b = o.bbox_at(t);
                let inside = b.clip(self.width as f64, self.height as f64).map_or(0.0, |c| c.area());
                if inside < 0.5 * b.area() {
                    return Err(SceneError::OutOfFrame { object: i, t });
                }
            }
        }
        Ok(())
    }

    /// Visible ground-truth boxes at `t`, as `(object index, box)`.
    pub fn truth_at(&self, t: u64) -> Vec<(usize, BBox)> {
        self.objects
            .iter()
            .enumerate()
            .filter_map(|(i, o)| o.bbox_at(t).clip(self.width as f64, self.height as f64).map(|b| (i, b)))
            .collect()
    }

    /// Textured rectangles over a static textured background. A pixel
    /// belongs to an object when its centre lies inside the object's box;
    /// later objects are drawn over earlier ones.
    pub fn render(&self, t: u64) -> Result<Frame, SceneError> {
        if t >= self.frames {
            return Err(SceneError::TimeOutOfRange { t, len: self.frames });
        }
        let background = ValueNoise::new(self.background_seed);
        let placed: Vec<(BBox, ValueNoise)> = self.objects.iter().map(|o| (o.bbox_at(t), o.texture())).collect();
        let frame = Frame::from_fn(self.width, self.height, t, |x, y| {
            let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
            for (b, tex) in placed.iter().rev() {
                if cx >= b.x && cx < b.right() && cy >= b.y && cy < b.bottom() {
                    // objects sit brighter than the background on average
                    return 0.3 + 0.7 * tex.sample(x as f64 - b.x, y as f64 - b.y);
                }
            }
            0.7 * background.sample(x as f64, y as f64)
        });
        Ok(frame.expect("scene dimensions were validated"))
    }
}

/// Two objects on parallel horizontal tracks that never cross.
pub fn two_lane_scene(frames: u64, seed: u64) -> SyntheticScene {
    let (w, h) = (160, 120);
    let last = frames.saturating_sub(1).max(1);
    let object = |i: u64, y: f64, x0: f64, x1: f64, label: &str| ObjectScript {
        class_id: i as u32,
        label: label.to_string(),
        width: 24.0,
        height: 20.0,
        waypoints: vec![Waypoint { t: 0, x: x0, y }, Waypoint { t: last, x: x1, y }],
        texture_seed: seed.wrapping_mul(31).wrapping_add(i + 1),
    };
    SyntheticScene {
        width: w,
        height: h,
        frames,
        background_seed: seed,
        objects: vec![object(0, 20.0, 10.0, 120.0, "person"), object(1, 75.0, 125.0, 15.0, "car")],
    }
}

/// Short scenes covering static, linear, turning and edge-hugging motion.
pub fn suite(frames: u64, seed: u64) -> Vec<SyntheticScene> {
    let last = frames.saturating_sub(1).max(1);
    let obj = |class_id: u32, size: (f64, f64), waypoints: Vec<Waypoint>, tex: u64| ObjectScript {
        class_id,
        label: if class_id == 0 { "person".into() } else { "car".into() },
        width: size.0,
        height: size.1,
        waypoints,
        texture_seed: seed.wrapping_add(tex),
    };
    let wp = |t: u64, x: f64, y: f64| Waypoint { t, x, y };
    let base = |objects: Vec<ObjectScript>, bg: u64| SyntheticScene {
        width: 96,
        height: 72,
        frames,
        background_seed: seed.wrapping_add(bg),
        objects,
    };
    vec![
        base(vec![obj(0, (18.0, 18.0), vec![wp(0, 30.0, 20.0)], 1)], 100),
        base(
            vec![
                obj(0, (16.0, 20.0), vec![wp(0, 5.0, 5.0), wp(last, 60.0, 10.0)], 2),
                obj(1, (20.0, 14.0), vec![wp(0, 70.0, 45.0), wp(last, 10.0, 50.0)], 3),
            ],
            200,
        ),
        base(
            vec![obj(0, (16.0, 16.0), vec![wp(0, 10.0, 40.0), wp(last / 2, 40.0, 10.0), wp(last, 70.0, 40.0)], 4)],
            300,
        ),
        base(vec![obj(1, (20.0, 16.0), vec![wp(0, -8.0, 30.0), wp(last, 80.0, 30.0)], 5)], 400),
    ]
}
