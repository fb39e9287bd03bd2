//! IOU scoring and globally optimal assignment of predicted scene objects to
//! detections.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detect::Detection;
use crate::geom::BBox;

pub const DEFAULT_GATE: f64 = 0.3;

#[derive(Debug, Error, PartialEq)]
pub enum AssocError {
    #[error("row {row} has {len} entries, expected {cols}")]
    Ragged { row: usize, len: usize, cols: usize },
    #[error("cost at ({row}, {col}) is not finite")]
    NonFinite { row: usize, col: usize },
}

/// Intersection over union with continuous areas.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.right().min(b.right()) - a.x.max(b.x)).max(0.0);
    let ih = (a.bottom().min(b.bottom()) - a.y.max(b.y)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Dense cost matrix where `None` marks a forbidden pairing.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    cells: Vec<Option<f64>>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self { rows, cols, cells: vec![Some(0.0); rows * cols] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, AssocError> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut m = Self::new(rows.len(), cols);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != cols {
                return Err(AssocError::Ragged { row: i, len: row.len(), cols });
            }
            for (j, &c) in row.iter().enumerate() {
                m.set(i, j, c)?;
            }
        }
        Ok(m)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> Option<f64> {
        self.cells[row * self.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, cost: f64) -> Result<(), AssocError> {
        if !cost.is_finite() {
            return Err(AssocError::NonFinite { row, col });
        }
        self.cells[row * self.cols + col] = Some(cost);
        Ok(())
    }

    pub fn forbid(&mut self, row: usize, col: usize) {
        self.cells[row * self.cols + col] = None;
    }

    /// Sum of the costs of `pairs`, `None` if any pair is forbidden.
    pub fn total(&self, pairs: &[(usize, usize)]) -> Option<f64> {
        pairs.iter().map(|&(i, j)| self.get(i, j)).sum()
    }
}

/// Minimum-cost assignment of `min(rows, cols)` pairs.
///
/// Forbidden cells are replaced by a finite sentinel larger than any
/// difference in real cost, so the solver first maximizes the number of
/// allowed pairs and then minimizes their cost; pairs landing on a forbidden
/// cell are dropped from the result. Pairs are returned sorted by row.
pub fn hungarian(cost: &CostMatrix) -> Vec<(usize, usize)> {
    let (rows, cols) = (cost.rows, cost.cols);
    if rows == 0 || cols == 0 {
        return Vec::new();
    }
    let allowed: Vec<f64> = cost.cells.iter().flatten().copied().collect();
    if allowed.is_empty() {
        return Vec::new();
    }
    let max = allowed.iter().copied().fold(f64::MIN, f64::max);
    let min = allowed.iter().copied().fold(f64::MAX, f64::min);
    let pairs = rows.min(cols) as f64;
    let sentinel = max.abs() + pairs * (max - min) + 1.0;

    let transpose = rows > cols;
    let (n, m) = if transpose { (cols, rows) } else { (rows, cols) };
    let at = |i: usize, j: usize| -> f64 {
        let c = if transpose { cost.get(j, i) } else { cost.get(i, j) };
        c.unwrap_or(sentinel)
    };

    // Potentials-based shortest augmenting path, rows 1..=n onto columns 1..=m.
    let mut u = vec![0f64; n + 1];
    let mut v = vec![0f64; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::MAX; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::MAX;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = at(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut result: Vec<(usize, usize)> = (1..=m)
        .filter(|&j| p[j] != 0)
        .map(|j| if transpose { (j - 1, p[j] - 1) } else { (p[j] - 1, j - 1) })
        .filter(|&(i, j)| cost.get(i, j).is_some())
        .collect();
    result.sort_unstable();
    result
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    /// `(scene_index, detection_index, iou)`, sorted by scene index.
    pub pairs: Vec<(usize, usize, f64)>,
    pub unmatched_scene: Vec<usize>,
    pub unmatched_detections: Vec<usize>,
}

impl Assignment {
    /// Checks that pairs and unmatched lists partition `0..scene` and
    /// `0..detections`, each index used once.
    pub fn is_partition(&self, scene: usize, detections: usize) -> bool {
        let mut seen_s = vec![false; scene];
        let mut seen_d = vec![false; detections];
        let mark = |seen: &mut Vec<bool>, i: usize| -> bool {
            match seen.get_mut(i) {
                Some(s) if !*s => {
                    *s = true;
                    true
                }
                _ => false,
            }
        };
        for &(s, d, _) in &self.pairs {
            if !mark(&mut seen_s, s) || !mark(&mut seen_d, d) {
                return false;
            }
        }
        for &s in &self.unmatched_scene {
            if !mark(&mut seen_s, s) {
                return false;
            }
        }
        for &d in &self.unmatched_detections {
            if !mark(&mut seen_d, d) {
                return false;
            }
        }
        seen_s.into_iter().all(|s| s) && seen_d.into_iter().all(|d| d)
    }
}

/// Gated, class-constrained matching of predicted boxes against detections
/// with cost `1 - IOU`.
pub fn match_detections(predicted: &[(BBox, u32)], detections: &[Detection], gate: f64) -> Assignment {
    let mut cost = CostMatrix::new(predicted.len(), detections.len());
    let mut scores = vec![0f64; predicted.len() * detections.len()];
    for (i, (b, class)) in predicted.iter().enumerate() {
        for (j, d) in detections.iter().enumerate() {
            let s = iou(b, &d.bbox);
            scores[i * detections.len() + j] = s;
            if d.class_id != *class || s < gate {
                cost.forbid(i, j);
            } else {
                cost.set(i, j, 1.0 - s).expect("iou is finite");
            }
        }
    }
    let pairs: Vec<(usize, usize, f64)> = hungarian(&cost)
        .into_iter()
        .map(|(i, j)| (i, j, scores[i * detections.len() + j]))
        .collect();
    let mut scene_used = vec![false; predicted.len()];
    let mut det_used = vec![false; detections.len()];
    for &(i, j, _) in &pairs {
        scene_used[i] = true;
        det_used[j] = true;
    }
    Assignment {
        pairs,
        unmatched_scene: (0..predicted.len()).filter(|&i| !scene_used[i]).collect(),
        unmatched_detections: (0..detections.len()).filter(|&j| !det_used[j]).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(class_id: u32, b: BBox) -> Detection {
        Detection::new(class_id, "x", 0.9, b)
    }

    #[test]
    fn iou_examples() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &BBox::new(20.0, 0.0, 5.0, 5.0)), 0.0);
        assert_eq!(iou(&a, &BBox::new(10.0, 0.0, 5.0, 5.0)), 0.0);
        assert!((iou(&a, &BBox::new(5.0, 0.0, 10.0, 10.0)) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn hungarian_examples() {
        let m = CostMatrix::from_rows(&[vec![5.0]]).unwrap();
        assert_eq!(hungarian(&m), vec![(0, 0)]);

        let m = CostMatrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0]]).unwrap();
        let pairs = hungarian(&m);
        assert_eq!(pairs, vec![(0, 1), (1, 0)]);
        assert_eq!(m.total(&pairs), Some(4.0));

        let m = CostMatrix::from_rows(&[vec![3.0], vec![1.0]]).unwrap();
        assert_eq!(hungarian(&m), vec![(1, 0)]);

        assert!(hungarian(&CostMatrix::new(0, 0)).is_empty());
        assert!(hungarian(&CostMatrix::new(3, 0)).is_empty());
    }

    #[test]
    fn forbidden_cells_never_chosen() {
        let mut m = CostMatrix::from_rows(&[vec![0.0, 9.0], vec![0.0, 9.0]]).unwrap();
        m.forbid(0, 0);
        assert_eq!(hungarian(&m), vec![(0, 1), (1, 0)]);
        let mut all = CostMatrix::new(2, 2);
        for i in 0..2 {
            for j in 0..2 {
                all.forbid(i, j);
            }
        }
        assert!(hungarian(&all).is_empty());
        let mut m = CostMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        m.forbid(0, 0);
        m.forbid(1, 0);
        assert_eq!(hungarian(&m), vec![(0, 1)]);
    }

    #[test]
    fn non_finite_costs_rejected() {
        assert_eq!(CostMatrix::from_rows(&[vec![1.0, f64::NAN]]), Err(AssocError::NonFinite { row: 0, col: 1 }));
        assert!(matches!(CostMatrix::from_rows(&[vec![1.0, 2.0], vec![1.0]]), Err(AssocError::Ragged { .. })));
    }

    #[test]
    fn match_without_detections() {
        let a = match_detections(&[(BBox::new(0.0, 0.0, 5.0, 5.0), 0)], &[], 0.3);
        assert!(a.pairs.is_empty());
        assert_eq!(a.unmatched_scene, vec![0]);
        assert!(a.is_partition(1, 0));
    }

    #[test]
    fn match_pairs_same_class_above_gate() {
        // iou 0.8: overlap 8x10 over union 10x10
        let p = BBox::new(0.0, 0.0, 10.0, 10.0);
        let d = BBox::new(0.0, 0.0, 8.0, 10.0);
        assert!((iou(&p, &d) - 0.8).abs() < 1e-12);
        let a = match_detections(&[(p, 3)], &[det(3, d)], 0.3);
        assert_eq!(a.pairs.len(), 1);
        let a = match_detections(&[(p, 3)], &[det(4, d)], 0.3);
        assert!(a.pairs.is_empty());
        assert!(a.is_partition(1, 1));
    }

    #[test]
    fn global_pairing_beats_greedy() {
        // A overlaps both detections, best with d0; B overlaps only d0.
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        let b = BBox::new(4.0, 0.0, 10.0, 10.0);
        let d0 = BBox::new(2.0, 0.0, 10.0, 10.0);
        let d1 = BBox::new(-3.0, 0.0, 10.0, 10.0);
        assert!(iou(&a, &d0) > iou(&a, &d1));
        assert!(iou(&b, &d1) < 0.3);
        let out = match_detections(&[(a, 0), (b, 0)], &[det(0, d0), det(0, d1)], 0.3);
        let pairs: Vec<_> = out.pairs.iter().map(|&(i, j, _)| (i, j)).collect();
        assert_eq!(pairs, vec![(0, 1), (1, 0)]);
    }

    #[test]
    fn partition_check_detects_duplicates() {
        let a = Assignment { pairs: vec![(0, 0, 1.0)], unmatched_scene: vec![0], unmatched_detections: vec![] };
        assert!(!a.is_partition(1, 1));
        let a = Assignment { pairs: vec![], unmatched_scene: vec![0], unmatched_detections: vec![] };
        assert!(!a.is_partition(1, 1));
    }
}
