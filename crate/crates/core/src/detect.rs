//! Detections and where they come from, plus the detector-side geometry:
//! aspect-preserving receptive-field sizing, mapping detector boxes back to
//! frame coordinates, and anchor-box clustering.

use std::collections::BTreeMap;
use std::io::BufRead;
use std::path::Path;
use std::thread;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::BBox;

/// Classes `0..=79` are general objects; text and logo share one model and
/// follow directly after.
pub const TEXT_CLASS_ID: u32 = 80;
pub const LOGO_CLASS_ID: u32 = 81;

#[derive(Debug, Error)]
pub enum DetectError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: frame {frame} follows frame {previous}")]
    NonMonotonic { line: usize, frame: u64, previous: u64 },
    #[error("detection source exhausted at frame {frame}")]
    Exhausted { frame: u64 },
    #[error("box lies entirely outside the {width}x{height} frame")]
    OutsideFrame { width: u32, height: u32 },
    #[error("need at least {k} boxes for {k} clusters, got {count}")]
    TooFewBoxes { count: usize, k: usize },
    #[error("only {distinct} distinct box sizes for {k} clusters")]
    CollapsedClusters { distinct: usize, k: usize },
    #[error("invalid box size ({w}, {h})")]
    InvalidSize { w: f64, h: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class_id: u32,
    pub label: String,
    pub score: f64,
    #[serde(rename = "box", with = "box_array")]
    pub bbox: BBox,
}

impl Detection {
    pub fn new(class_id: u32, label: impl Into<String>, score: f64, bbox: BBox) -> Self {
        Self { class_id, label: label.into(), score, bbox }
    }
}

pub(crate) mod box_array {
    use super::BBox;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(b: &BBox, s: S) -> Result<S::Ok, S::Error> {
        <[f64; 4]>::from(*b).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BBox, D::Error> {
        <[f64; 4]>::deserialize(d).map(BBox::from)
    }
}

/// One line of a detection sidecar file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub frame: u64,
    #[serde(flatten)]
    pub detection: Detection,
}

/// A pull-based producer of detections, queried once per frame in
/// increasing frame order.
pub trait DetectionSource: Send {
    fn detections(&mut self, frame: u64) -> Result<Vec<Detection>, DetectError>;
}

impl<S: DetectionSource + ?Sized> DetectionSource for Box<S> {
    fn detections(&mut self, frame: u64) -> Result<Vec<Detection>, DetectError> {
        (**self).detections(frame)
    }
}

/// Detections recorded in a JSON Lines sidecar; frames without records are empty.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScriptedSource {
    frames: BTreeMap<u64, Vec<Detection>>,
}

impl ScriptedSource {
    pub fn from_path(path: impl AsRef<Path>) -> Result<Self, DetectError> {
        let path = path.as_ref();
        let file = std::fs::File::open(path)
            .map_err(|source| DetectError::Io { path: path.display().to_string(), source })?;
        Self::from_reader(std::io::BufReader::new(file))
            .map_err(|e| match e {
                DetectError::Io { source, .. } => DetectError::Io { path: path.display().to_string(), source },
                other => other,
            })
    }

    pub fn from_reader(reader: impl BufRead) -> Result<Self, DetectError> {
        let mut frames: BTreeMap<u64, Vec<Detection>> = BTreeMap::new();
        let mut previous: Option<u64> = None;
        for (i, line) in reader.lines().enumerate() {
            let line_no = i + 1;
            let line = line.map_err(|source| DetectError::Io { path: String::new(), source })?;
            if line.trim().is_empty() {
                continue;
            }
            let record: DetectionRecord = serde_json::from_str(&line)
                .map_err(|e| DetectError::Malformed { line: line_no, message: e.to_string() })?;
            validate(&record.detection).map_err(|message| DetectError::Malformed { line: line_no, message })?;
            if let Some(prev) = previous {
                if record.frame < prev {
                    return Err(DetectError::NonMonotonic { line: line_no, frame: record.frame, previous: prev });
                }
            }
            previous = Some(record.frame);
            frames.entry(record.frame).or_default().push(record.detection);
        }
        Ok(Self { frames })
    }

    pub fn from_records(records: impl IntoIterator<Item = DetectionRecord>) -> Self {
        let mut frames: BTreeMap<u64, Vec<Detection>> = BTreeMap::new();
        for r in records {
            frames.entry(r.frame).or_default().push(r.detection);
        }
        Self { frames }
    }

    pub fn get(&self, frame: u64) -> &[Detection] {
        self.frames.get(&frame).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn last_frame(&self) -> Option<u64> {
        self.frames.keys().next_back().copied()
    }
}

fn validate(d: &Detection) -> Result<(), String> {
    if !(d.score.is_finite() && (0.0..=1.0).contains(&d.score)) {
        return Err(format!("score {} outside [0, 1]", d.score));
    }
    if !d.bbox.is_valid() {
        return Err(format!("box {:?} needs finite coordinates and positive size", <[f64; 4]>::from(d.bbox)));
    }
    Ok(())
}

impl DetectionSource for ScriptedSource {
    fn detections(&mut self, frame: u64) -> Result<Vec<Detection>, DetectError> {
        Ok(self.get(frame).to_vec())
    }
}

/// Per-frame lists for frames `0..len`; asking past the end is an error.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct VecSource {
    pub frames: Vec<Vec<Detection>>,
}

impl DetectionSource for VecSource {
    fn detections(&mut self, frame: u64) -> Result<Vec<Detection>, DetectError> {
        self.frames
            .get(frame as usize)
            .cloned()
            .ok_or(DetectError::Exhausted { frame })
    }
}

/// Wraps a source and sleeps before every answer, standing in for the
/// inference time of a real detector.
pub struct LatencySource<S> {
    inner: S,
    latency: Duration,
}

impl<S> LatencySource<S> {
    pub fn new(inner: S, latency: Duration) -> Self {
        Self { inner, latency }
    }
}

impl<S: DetectionSource> DetectionSource for LatencySource<S> {
    fn detections(&mut self, frame: u64) -> Result<Vec<Detection>, DetectError> {
        thread::sleep(self.latency);
        self.inner.detections(frame)
    }
}

/// Keeps detections with `score >= min_score`, order preserved.
pub fn filter_detections(dets: Vec<Detection>, min_score: f64) -> Vec<Detection> {
    dets.into_iter().filter(|d| d.score >= min_score).collect()
}

/// Clips every box to the frame and drops those with no overlap.
pub fn clip_to_frame(dets: Vec<Detection>, width: f64, height: f64) -> Vec<Detection> {
    dets.into_iter()
        .filter_map(|mut d| {
            d.bbox = d.bbox.clip(width, height)?;
            Some(d)
        })
        .collect()
}

/// Detector input size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReceptiveField {
    pub width: u32,
    pub height: u32,
}

impl ReceptiveField {
    pub fn long_side(&self) -> u32 {
        self.width.max(self.height)
    }

    /// Rounds both sides to the nearest positive multiple of `multiple`
    /// (detector stride alignment).
    pub fn aligned_to(self, multiple: u32) -> Self {
        let round = |v: u32| (((v + multiple / 2) / multiple) * multiple).max(multiple);
        Self { width: round(self.width), height: round(self.height) }
    }
}

/// Receptive field with the image's aspect ratio: the longer side becomes
/// `base`, the shorter `floor(base * short / long)`.
pub fn adaptive_receptive_field(img_w: u32, img_h: u32, base: u32) -> ReceptiveField {
    let long = img_w.max(img_h) as u64;
    let short = img_w.min(img_h) as u64;
    let scaled = ((base as u64 * short) / long).max(1) as u32;
    if img_w >= img_h {
        ReceptiveField { width: base, height: scaled }
    } else {
        ReceptiveField { width: scaled, height: base }
    }
}

fn field_scale(field: ReceptiveField, img_w: u32, img_h: u32) -> f64 {
    img_w.max(img_h) as f64 / field.long_side() as f64
}

/// Maps a box from receptive-field coordinates back to the frame and clips it.
pub fn remap_detection(b: BBox, field: ReceptiveField, img_w: u32, img_h: u32) -> Result<BBox, DetectError> {
    b.scale(field_scale(field, img_w, img_h))
        .clip(img_w as f64, img_h as f64)
        .ok_or(DetectError::OutsideFrame { width: img_w, height: img_h })
}

/// The proportional resize from frame to receptive-field coordinates.
pub fn to_field_coords(b: BBox, field: ReceptiveField, img_w: u32, img_h: u32) -> BBox {
    b.scale(1.0 / field_scale(field, img_w, img_h))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnchorMetric {
    /// `1 - IOU` of boxes sharing a corner.
    Iou,
    /// Squared Euclidean distance on `(w, h)`.
    Euclidean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorSet {
    /// `(w, h)` pairs sorted by area ascending.
    pub anchors: Vec<(f64, f64)>,
}

impl AnchorSet {
    pub fn k(&self) -> usize {
        self.anchors.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansReport {
    pub anchors: AnchorSet,
    /// Total distortion of the initial centroids and after every iteration.
    pub distortion_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

pub const KMEANS_MAX_ITERATIONS: usize = 300;

/// IOU of two boxes sharing their top-left corner.
pub fn corner_iou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = a.0.min(b.0) * a.1.min(b.1);
    inter / (a.0 * a.1 + b.0 * b.1 - inter)
}

fn distance(metric: AnchorMetric, a: (f64, f64), b: (f64, f64)) -> f64 {
    match metric {
        AnchorMetric::Iou => 1.0 - corner_iou(a, b),
        AnchorMetric::Euclidean => (a.0 - b.0).powi(2) + (a.1 - b.1).powi(2),
    }
}

fn nearest(metric: AnchorMetric, b: (f64, f64), centroids: &[(f64, f64)]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, &c) in centroids.iter().enumerate() {
        let d = distance(metric, b, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

pub fn anchor_kmeans(boxes: &[(f64, f64)], k: usize, seed: u64) -> Result<AnchorSet, DetectError> {
    anchor_kmeans_with(boxes, k, seed, AnchorMetric::Iou).map(|r| r.anchors)
}

type Members = Vec<(f64, f64)>;

/// k-means++ seeding, centroids initialized to the means of the seeded
/// partition, then Lloyd iterations. During the iterations a cluster mean
/// replaces its centroid only when it does not raise that cluster's
/// distortion, so the recorded total distortion never increases.
pub fn anchor_kmeans_with(
    boxes: &[(f64, f64)],
    k: usize,
    seed: u64,
    metric: AnchorMetric,
) -> Result<KMeansReport, DetectError> {
    if k == 0 || boxes.len() < k {
        return Err(DetectError::TooFewBoxes { count: boxes.len(), k });
    }
    if let Some(&(w, h)) = boxes.iter().find(|(w, h)| !(w.is_finite() && h.is_finite() && *w > 0.0 && *h > 0.0)) {
        return Err(DetectError::InvalidSize { w, h });
    }
    let mut distinct: Vec<(f64, f64)> = boxes.to_vec();
    distinct.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    distinct.dedup();
    if distinct.len() < k {
        return Err(DetectError::CollapsedClusters { distinct: distinct.len(), k });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = vec![boxes[rng.random_range(0..boxes.len())]];
    while centroids.len() < k {
        let weights: Vec<f64> = boxes.iter().map(|&b| nearest(metric, b, &centroids).1.powi(2)).collect();
        let total: f64 = weights.iter().sum();
        let mut target = rng.random::<f64>() * total;
        let mut pick = None;
        for (i, w) in weights.iter().enumerate() {
            if *w > 0.0 {
                pick = Some(i);
                if target < *w {
                    break;
                }
                target -= w;
            }
        }
        centroids.push(boxes[pick.expect("a box differs from every centroid")]);
    }

    let assign = |centroids: &[(f64, f64)]| -> (Vec<usize>, f64) {
        let mut total = 0.0;
        let labels = boxes
            .iter()
            .map(|&b| {
                let (j, d) = nearest(metric, b, centroids);
                total += d;
                j
            })
            .collect();
        (labels, total)
    };

    let cluster_mean = |labels: &[usize], j: usize| -> Option<(Members, (f64, f64))> {
        let members: Vec<(f64, f64)> =
            boxes.iter().zip(labels).filter(|(_, &l)| l == j).map(|(&b, _)| b).collect();
        if members.is_empty() {
            return None;
        }
        let n = members.len() as f64;
        let mean = (members.iter().map(|m| m.0).sum::<f64>() / n, members.iter().map(|m| m.1).sum::<f64>() / n);
        Some((members, mean))
    };

    // Start from the means of the seeded partition.
    let (seed_labels, _) = assign(&centroids);
    for (j, centroid) in centroids.iter_mut().enumerate() {
        if let Some((_, mean)) = cluster_mean(&seed_labels, j) {
            *centroid = mean;
        }
    }
    let (mut labels, distortion) = assign(&centroids);
    let mut history = vec![distortion];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < KMEANS_MAX_ITERATIONS {
        iterations += 1;
        let mut next = centroids.clone();
        for (j, centroid) in next.iter_mut().enumerate() {
            let Some((members, mean)) = cluster_mean(&labels, j) else {
                continue;
            };
            let cost = |c: (f64, f64)| members.iter().map(|&m| distance(metric, m, c)).sum::<f64>();
            if cost(mean) <= cost(*centroid) {
                *centroid = mean;
            }
        }
        let (next_labels, distortion) = assign(&next);
        let stable = next_labels == labels && next == centroids;
        centroids = next;
        labels = next_labels;
        history.push(distortion);
        if stable {
            converged = true;
            break;
        }
    }

    centroids.sort_by(|a, b| (a.0 * a.1).total_cmp(&(b.0 * b.1)).then(a.0.total_cmp(&b.0)));
    Ok(KMeansReport { anchors: AnchorSet { anchors: centroids }, distortion_history: history, iterations, converged })
}
