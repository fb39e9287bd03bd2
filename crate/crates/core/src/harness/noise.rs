//! Detection noise applied to scripted ground truth.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::scene::SyntheticScene;
use crate::detect::Detection;
use crate::geom::BBox;
use crate::records::TruthRecord;

#[derive(Debug, Error, PartialEq)]
pub enum NoiseError {
    #[error("{field} = {value} is out of range")]
    OutOfRange { field: &'static str, value: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseModel {
    /// Standard deviation of the box position jitter, in pixels.
    pub jitter_sigma: f64,
    /// Standard deviation of the box width and height jitter, in pixels.
    pub size_jitter_sigma: f64,
    pub dropout_prob: f64,
    /// Mean number of false positives per frame.
    pub false_positive_rate: f64,
    /// Scores are uniform in `[score_min, score_max]`.
    pub score_min: f64,
    pub score_max: f64,
    pub seed: u64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self::exact()
    }
}

impl NoiseModel {
    /// Detections equal to the ground truth, all with score 1.
    pub fn exact() -> Self {
        Self { jitter_sigma: 0.0, size_jitter_sigma: 0.0, dropout_prob: 0.0, false_positive_rate: 0.0, score_min: 1.0, score_max: 1.0, seed: 0 }
    }

    pub fn validate(&self) -> Result<(), NoiseError> {
        let check = |field, value: f64, ok: bool| if ok && value.is_finite() { Ok(()) } else { Err(NoiseError::OutOfRange { field, value }) };
        check("jitter_sigma", self.jitter_sigma, self.jitter_sigma >= 0.0)?;
        check("size_jitter_sigma", self.size_jitter_sigma, self.size_jitter_sigma >= 0.0)?;
        check("dropout_prob", self.dropout_prob, (0.0..=1.0).contains(&self.dropout_prob))?;
        check("false_positive_rate", self.false_positive_rate, self.false_positive_rate >= 0.0)?;
        check("score_min", self.score_min, (0.0..=1.0).contains(&self.score_min))?;
        check("score_max", self.score_max, (self.score_min..=1.0).contains(&self.score_max))?;
        Ok(())
    }

    fn rng_for(&self, t: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(t);
        rng
    }

    fn score(&self, rng: &mut ChaCha8Rng) -> f64 {
        if self.score_max > self.score_min {
            rng.random_range(self.score_min..=self.score_max)
        } else {
            self.score_min
        }
    }
}

/// Noisy detections for frame `t` together with the exact ground truth.
/// Each frame draws from its own random stream, so frames can be generated
/// in any order.
pub fn emit_detections(
    scene: &SyntheticScene,
    noise: &NoiseModel,
    t: u64,
) -> Result<(Vec<Detection>, Vec<TruthRecord>), NoiseError> {
    noise.validate()?;
    let (fw, fh) = (scene.width as f64, scene.height as f64);
    let mut rng = noise.rng_for(t);
    let jitter = Normal::new(0.0, noise.jitter_sigma).expect("sigma validated");
    let size_jitter = Normal::new(0.0, noise.size_jitter_sigma).expect("sigma validated");
    let mut detections = Vec::new();
    let mut truth = Vec::new();
    for (i, b) in scene.truth_at(t) {
        let script = &scene.objects[i];
        truth.push(TruthRecord { frame: t, id: i as u64, class_id: script.class_id, label: script.label.clone(), bbox: b });
        let dropped = rng.random_bool(noise.dropout_prob);
        let d = [jitter.sample(&mut rng), jitter.sample(&mut rng), size_jitter.sample(&mut rng), size_jitter.sample(&mut rng)];
        let score = noise.score(&mut rng);
        if dropped {
            continue;
        }
        let noisy = BBox::new(b.x + d[0], b.y + d[1], (b.w + d[2]).max(1.0), (b.h + d[3]).max(1.0));
        if let Some(clipped) = noisy.clip(fw, fh) {
            detections.push(Detection::new(script.class_id, script.label.clone(), score, clipped));
        }
    }
    if noise.false_positive_rate > 0.0 && !scene.objects.is_empty() {
        let count = Poisson::new(noise.false_positive_rate).expect("rate validated").sample(&mut rng) as usize;
        for _ in 0..count {
            let script = &scene.objects[rng.random_range(0..scene.objects.len())];
            let (w, h) = (script.width.min(fw), script.height.min(fh));
            let x = rng.random_range(0.0..=fw - w);
            let y = rng.random_range(0.0..=fh - h);
            let score = noise.score(&mut rng);
            detections.push(Detection::new(script.class_id, script.label.clone(), score, BBox::new(x, y, w, h)));
        }
    }
    Ok((detections, truth))
}

/// Detections and truth for every frame of the scene.
pub fn emit_sequence(
    scene: &SyntheticScene,
    noise: &NoiseModel,
) -> Result<(Vec<Vec<Detection>>, Vec<TruthRecord>), NoiseError> {
    let mut dets = Vec::with_capacity(scene.frames as usize);
    let mut truth = Vec::new();
    for t in 0..scene.frames {
        let (d, tr) = emit_detections(scene, noise, t)?;
        dets.push(d);
        truth.extend(tr);
    }
    Ok((dets, truth))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::scene::{two_lane_scene, ObjectScript, Waypoint};

    #[test]
    fn exact_model_reproduces_truth() {
        let scene = two_lane_scene(5, 2);
        for t in 0..5 {
            let (d, tr) = emit_detections(&scene, &NoiseModel::exact(), t).unwrap();
            assert_eq!(d.len(), tr.len());
            for (d, tr) in d.iter().zip(&tr) {
                assert_eq!(d.bbox, tr.bbox);
                assert_eq!(d.score, 1.0);
                assert_eq!(d.class_id, tr.class_id);
            }
        }
    }

    #[test]
    fn full_dropout_empties_frames() {
        let scene = two_lane_scene(10, 2);
        let noise = NoiseModel { dropout_prob: 1.0, jitter_sigma: 3.0, ..NoiseModel::exact() };
        for t in 0..10 {
            assert!(emit_detections(&scene, &noise, t).unwrap().0.is_empty());
        }
    }

    #[test]
    fn jitter_sigma_is_respected() {
        // one small object far from the borders so clipping never applies
        let scene = SyntheticScene {
            width: 200,
            height: 200,
            frames: 1000,
            background_seed: 0,
            objects: vec![ObjectScript {
                class_id: 0,
                label: "person".into(),
                width: 20.0,
                height: 20.0,
                waypoints: vec![Waypoint { t: 0, x: 90.0, y: 90.0 }],
                texture_seed: 0,
            }],
        };
        let noise = NoiseModel { jitter_sigma: 2.0, seed: 17, ..NoiseModel::exact() };
        let offsets: Vec<f64> = (0..1000).map(|t| emit_detections(&scene, &noise, t).unwrap().0[0].bbox.x - 90.0).collect();
        let mean = offsets.iter().sum::<f64>() / 1000.0;
        let var = offsets.iter().map(|o| (o - mean).powi(2)).sum::<f64>() / 999.0;
        assert!((var.sqrt() - 2.0).abs() <= 0.3, "sigma {}", var.sqrt());
    }

    #[test]
    fn deterministic_and_validated() {
        let scene = two_lane_scene(20, 4);
        let noise = NoiseModel { jitter_sigma: 2.0, size_jitter_sigma: 1.0, dropout_prob: 0.1, false_positive_rate: 1.5, score_min: 0.4, score_max: 0.9, seed: 8 };
        assert_eq!(emit_sequence(&scene, &noise).unwrap(), emit_sequence(&scene, &noise).unwrap());
        let bad = NoiseModel { dropout_prob: 1.5, ..noise };
        assert!(emit_detections(&scene, &bad, 0).is_err());
        let bad = NoiseModel { score_min: 0.9, score_max: 0.5, ..noise };
        assert!(bad.validate().is_err());
    }
}
