//! Writes a synthetic sequence as the files a user would hand to the CLI.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use super::noise::{emit_sequence, NoiseError, NoiseModel};
use super::scene::{SceneError, SyntheticScene};
use crate::detect::DetectionRecord;
use crate::formats::{write_pgm, FormatError};

pub const FRAMES_DIR: &str = "frames";
pub const DETECTIONS_FILE: &str = "detections.jsonl";
pub const TRUTH_FILE: &str = "truth.jsonl";

#[derive(Debug, Error)]
pub enum ExportError {
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Noise(#[from] NoiseError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExportedSequence {
    pub frames_dir: PathBuf,
    pub detections: PathBuf,
    pub truth: PathBuf,
    pub frames: u64,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExportError + '_ {
    move |source| ExportError::Io { path: path.to_path_buf(), source }
}

fn write_lines<T: serde::Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<(), ExportError> {
    let mut out = BufWriter::new(File::create(path).map_err(io_err(path))?);
    for row in rows {
        let line = serde_json::to_string(&row).expect("records serialize");
        writeln!(out, "{line}").map_err(io_err(path))?;
    }
    out.flush().map_err(io_err(path))
}

/// Writes `frames/frame_00000.pgm ...`, `detections.jsonl` and `truth.jsonl`
/// under `dir`. Identical inputs give identical files.
pub fn export_sequence(scene: &SyntheticScene, noise: &NoiseModel, dir: &Path) -> Result<ExportedSequence, ExportError> {
    scene.validate()?;
    let (detections, truth) = emit_sequence(scene, noise)?;
    let frames_dir = dir.join(FRAMES_DIR);
    fs::create_dir_all(&frames_dir).map_err(io_err(&frames_dir))?;
    for t in 0..scene.frames {
        let frame = scene.render(t)?;
        write_pgm(frames_dir.join(format!("frame_{t:05}.pgm")), &frame)?;
    }
    let detections_path = dir.join(DETECTIONS_FILE);
    write_lines(
        &detections_path,
        detections.into_iter().enumerate().flat_map(|(t, dets)| {
            dets.into_iter().map(move |detection| DetectionRecord { frame: t as u64, detection })
        }),
    )?;
    let truth_path = dir.join(TRUTH_FILE);
    write_lines(&truth_path, truth)?;
    Ok(ExportedSequence { frames_dir, detections: detections_path, truth: truth_path, frames: scene.frames })
}
