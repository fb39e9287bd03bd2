//! Minimal tracking-quality metrics against ground truth.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assoc::{hungarian, iou, CostMatrix};
use crate::records::FrameBoxes;

/// Truth and track boxes pair up only at or above this IOU.
pub const MATCH_IOU: f64 = 0.5;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("tracks refer to frame {frame}, beyond the last ground-truth frame {last:?}")]
    FrameMismatch { frame: u64, last: Option<u64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub id_switches: u64,
    /// Times a truth object regains a match after losing it.
    pub fragmentation: u64,
    /// Mean IOU over matched pairs; 0 when nothing matched.
    pub mean_iou: f64,
    /// Matched truth boxes over all truth boxes; 0 when there is no truth.
    pub recall: f64,
    pub matched: u64,
    pub truth_boxes: u64,
}

/// Matches tracks to truth frame by frame (optimal assignment, IOU ≥ 0.5)
/// and counts identity events per truth object.
pub fn evaluate(tracks: &FrameBoxes, truth: &FrameBoxes) -> Result<Metrics, EvalError> {
    let last = truth.keys().next_back().copied();
    if let Some((&frame, _)) = tracks.iter().rfind(|(_, v)| !v.is_empty()) {
        if last.is_none_or(|l| frame > l) {
            return Err(EvalError::FrameMismatch { frame, last });
        }
    }
    struct History {
        last_track: Option<u64>,
        matched_before: bool,
        was_matched: bool,
    }
    let mut history: BTreeMap<u64, History> = BTreeMap::new();
    let (mut switches, mut fragments, mut matched, mut total, mut iou_sum) = (0, 0, 0, 0, 0.0);
    let empty = Vec::new();
    for (frame, truths) in truth {
        let outputs = tracks.get(frame).unwrap_or(&empty);
        let mut cost = CostMatrix::new(truths.len(), outputs.len());
        for (r, (_, tb)) in truths.iter().enumerate() {
            for (c, (_, ob)) in outputs.iter().enumerate() {
                let v = iou(tb, ob);
                if v >= MATCH_IOU {
                    cost.set(r, c, 1.0 - v).expect("IOU is finite");
                } else {
                    cost.forbid(r, c);
                }
            }
        }
        let mut partner = vec![None; truths.len()];
        for (r, c) in hungarian(&cost) {
            partner[r] = Some(c);
        }
        for (r, (truth_id, tb)) in truths.iter().enumerate() {
            total += 1;
            let h = history.entry(*truth_id).or_insert(History { last_track: None, matched_before: false, was_matched: false });
            match partner[r] {
                Some(c) => {
                    let (track_id, ob) = outputs[c];
                    matched += 1;
                    iou_sum += iou(tb, &ob);
                    if h.last_track.is_some_and(|prev| prev != track_id) {
                        switches += 1;
                    }
                    if h.matched_before && !h.was_matched {
                        fragments += 1;
                    }
                    h.last_track = Some(track_id);
                    h.matched_before = true;
                    h.was_matched = true;
                }
                None => h.was_matched = false,
            }
        }
    }
    Ok(Metrics {
        id_switches: switches,
        fragmentation: fragments,
        mean_iou: if matched > 0 { iou_sum / matched as f64 } else { 0.0 },
        recall: if total > 0 { matched as f64 / total as f64 } else { 0.0 },
        matched,
        truth_boxes: total,
    })
}
