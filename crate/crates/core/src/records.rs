//! Track output rows, ground-truth rows, and their JSONL / MOT CSV forms.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::BBox;
use crate::track::{Scene, SceneObject, TrackState};

#[derive(Debug, Error)]
pub enum RecordError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One output row per (frame, object) for objects active at the frame or
/// lost at it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackRecord {
    pub frame: u64,
    pub id: u64,
    pub class_id: u32,
    pub label: String,
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub score: f64,
    pub state: TrackState,
}

impl TrackRecord {
    pub fn from_object(frame: u64, o: &SceneObject) -> Self {
        Self {
            frame,
            id: o.id,
            class_id: o.class_id,
            label: o.label.clone(),
            x: o.bbox.x,
            y: o.bbox.y,
            w: o.bbox.w,
            h: o.bbox.h,
            score: o.score,
            state: o.state,
        }
    }

    pub fn bbox(&self) -> BBox {
        BBox::new(self.x, self.y, self.w, self.h)
    }
}

/// Rows emitted for `frame`: active objects plus those that became lost at it.
pub fn records_for_frame(frame: u64, objects: &[SceneObject]) -> Vec<TrackRecord> {
    objects
        .iter()
        .filter(|o| o.is_active() || o.lost_at == Some(frame))
        .map(|o| TrackRecord::from_object(frame, o))
        .collect()
}

pub fn scene_records(frame: u64, scene: &Scene) -> Vec<TrackRecord> {
    records_for_frame(frame, scene.objects())
}

pub fn write_jsonl(mut out: impl Write, records: &[TrackRecord]) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trailer {
    pub complete: bool,
    pub frames: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

pub fn write_jsonl_trailer(mut out: impl Write, trailer: &Trailer) -> std::io::Result<()> {
    #[derive(Serialize)]
    struct Wrap<'a> {
        trailer: &'a Trailer,
    }
    serde_json::to_writer(&mut out, &Wrap { trailer })?;
    out.write_all(b"\n")
}

/// Parses track JSONL, skipping blank lines and trailer records.
pub fn read_jsonl(reader: impl BufRead) -> Result<Vec<TrackRecord>, RecordError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() || line.trim_start().starts_with("{\"trailer\"") {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| RecordError::Parse { line: i + 1, message: e.to_string() })?);
    }
    Ok(out)
}

/// The fields MOTChallenge CSV carries: 1-based frame and id, box, score.
#[derive(Debug, Clone, PartialEq)]
pub struct MotRow {
    pub frame: u64,
    pub id: u64,
    pub bbox: BBox,
    pub score: f64,
}

impl From<&TrackRecord> for MotRow {
    fn from(r: &TrackRecord) -> Self {
        Self { frame: r.frame, id: r.id, bbox: r.bbox(), score: r.score }
    }
}

/// `frame+1,id+1,x,y,w,h,score,-1,-1,-1` per active row; lost rows are omitted.
pub fn write_mot(mut out: impl Write, records: &[TrackRecord]) -> std::io::Result<()> {
    for r in records.iter().filter(|r| r.state == TrackState::Active) {
        let m = MotRow::from(r);
        writeln!(out, "{}", format_mot(&m))?;
    }
    Ok(())
}

pub fn format_mot(m: &MotRow) -> String {
    format!(
        "{},{},{},{},{},{},{},-1,-1,-1",
        m.frame + 1,
        m.id + 1,
        m.bbox.x,
        m.bbox.y,
        m.bbox.w,
        m.bbox.h,
        m.score
    )
}

/// Parses MOT CSV rows back to 0-based indices; `#` lines are comments.
pub fn read_mot(reader: impl BufRead) -> Result<Vec<MotRow>, RecordError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let err = |message: String| RecordError::Parse { line: i + 1, message };
        let cols: Vec<&str> = t.split(',').map(str::trim).collect();
        if cols.len() < 7 {
            return Err(err(format!("expected at least 7 columns, found {}", cols.len())));
        }
        let int = |s: &str| s.parse::<u64>().map_err(|_| err(format!("bad integer {s:?}")));
        let real = |s: &str| s.parse::<f64>().map_err(|_| err(format!("bad number {s:?}")));
        let frame = int(cols[0])?;
        let id = int(cols[1])?;
        if frame == 0 || id == 0 {
            return Err(err("frame and id are 1-based".into()));
        }
        out.push(MotRow {
            frame: frame - 1,
            id: id - 1,
            bbox: BBox::new(real(cols[2])?, real(cols[3])?, real(cols[4])?, real(cols[5])?),
            score: real(cols[6])?,
        });
    }
    Ok(out)
}

/// Ground-truth row as exported by the synthetic harness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub frame: u64,
    pub id: u64,
    pub class_id: u32,
    pub label: String,
    #[serde(rename = "box", with = "crate::detect::box_array")]
    pub bbox: BBox,
}

pub fn read_truth_jsonl(reader: impl BufRead) -> Result<Vec<TruthRecord>, RecordError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| RecordError::Parse { line: i + 1, message: e.to_string() })?);
    }
    Ok(out)
}

/// `(id, box)` pairs grouped by frame.
pub type FrameBoxes = BTreeMap<u64, Vec<(u64, BBox)>>;

pub fn group_tracks(records: &[TrackRecord]) -> FrameBoxes {
    let mut out = FrameBoxes::new();
    for r in records.iter().filter(|r| r.state == TrackState::Active) {
        out.entry(r.frame).or_default().push((r.id, r.bbox()));
    }
    out
}

pub fn group_mot(rows: &[MotRow]) -> FrameBoxes {
    let mut out = FrameBoxes::new();
    for r in rows {
        out.entry(r.frame).or_default().push((r.id, r.bbox));
    }
    out
}

pub fn group_truth(records: &[TruthRecord]) -> FrameBoxes {
    let mut out = FrameBoxes::new();
    for r in records {
        out.entry(r.frame).or_default().push((r.id, r.bbox));
    }
    out
}
