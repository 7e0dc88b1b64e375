//! Oriented 3D boxes, rotated bird's-eye-view and volumetric IoU, and
//! 11-point interpolated average precision with KITTI difficulty buckets.
//!
//! Boxes live in the camera frame: `y` points down and a box's `y` is its
//! bottom face, so it spans `[y - h, y]` vertically. The footprint lies in the
//! `x`–`z` plane with the length along `x` at zero yaw.

use std::cmp::Ordering;

use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DetevalError {
    #[error("invalid box: {0}")]
    InvalidBox(String),
    #[error("{preds} prediction frames but {gts} ground-truth frames")]
    FrameCountMismatch { preds: usize, gts: usize },
    #[error("prediction {index} in frame {frame} has a NaN score")]
    NanScore { frame: usize, index: usize },
    #[error("IoU threshold {0} outside (0, 1]")]
    InvalidThreshold(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Box3D {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub h: f64,
    pub w: f64,
    pub l: f64,
    /// Rotation about the camera's vertical axis, in `(-π, π]`.
    pub yaw: f64,
    /// Detection confidence; ground-truth boxes carry 1.
    pub score: f64,
    pub class: String,
    /// 0 (fully visible) to 3 (unknown).
    pub occlusion: u8,
    pub truncation: f64,
    /// Height of the 2D image box in pixels.
    pub bbox_height: f64,
}

impl Box3D {
    /// A box with neutral ground-truth metadata: score 1, fully visible, untruncated
    /// and tall enough for every difficulty level.
    pub fn new(
        class: &str,
        center: [f64; 3],
        size_hwl: [f64; 3],
        yaw: f64,
    ) -> Result<Self, DetevalError> {
        let b = Self {
            x: center[0],
            y: center[1],
            z: center[2],
            h: size_hwl[0],
            w: size_hwl[1],
            l: size_hwl[2],
            yaw,
            score: 1.0,
            class: class.to_string(),
            occlusion: 0,
            truncation: 0.0,
            bbox_height: 100.0,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.score = score;
        self
    }

    pub fn with_difficulty(mut self, bbox_height: f64, occlusion: u8, truncation: f64) -> Self {
        self.bbox_height = bbox_height;
        self.occlusion = occlusion;
        self.truncation = truncation;
        self
    }

    pub fn validate(&self) -> Result<(), DetevalError> {
        for (name, v) in [("h", self.h), ("w", self.w), ("l", self.l)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(DetevalError::InvalidBox(format!("{name} = {v} must be positive")));
            }
        }
        if ![self.x, self.y, self.z].iter().all(|v| v.is_finite()) {
            return Err(DetevalError::InvalidBox("non-finite center".into()));
        }
        let pi = std::f64::consts::PI;
        if !(self.yaw > -pi && self.yaw <= pi) {
            return Err(DetevalError::InvalidBox(format!("yaw {} outside (-pi, pi]", self.yaw)));
        }
        Ok(())
    }

    /// Footprint corners `(x, z)` in counter-clockwise order of the x–z plane.
    pub fn footprint(&self) -> [(f64, f64); 4] {
        let (s, c) = self.yaw.sin_cos();
        let (hl, hw) = (self.l / 2.0, self.w / 2.0);
        [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)].map(|(lx, lz)| {
            (self.x + c * lx + s * lz, self.z - s * lx + c * lz)
        })
    }

    pub fn volume(&self) -> f64 {
        self.h * self.w * self.l
    }

    pub fn bev_area(&self) -> f64 {
        self.w * self.l
    }
}

const DEGENERATE_AREA: f64 = 1e-12;

fn cross(o: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Signed shoelace area; positive for counter-clockwise vertices.
pub fn polygon_area(poly: &[(f64, f64)]) -> f64 {
    let n = poly.len();
    (0..n)
        .map(|i| {
            let (a, b) = (poly[i], poly[(i + 1) % n]);
            a.0 * b.1 - b.0 * a.1
        })
        .sum::<f64>()
        / 2.0
}

fn counter_clockwise(poly: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut p = poly.to_vec();
    if polygon_area(&p) < 0.0 {
        p.reverse();
    }
    p
}

/// Intersection of two convex polygons by clipping `subject` against each
/// edge of `clip` in turn.
pub fn clip_convex(subject: &[(f64, f64)], clip: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let clip = counter_clockwise(clip);
    let mut out = counter_clockwise(subject);
    for i in 0..clip.len() {
        if out.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % clip.len()]);
        let input = std::mem::take(&mut out);
        for j in 0..input.len() {
            let p = input[j];
            let q = input[(j + 1) % input.len()];
            let dp = cross(a, b, p);
            let dq = cross(a, b, q);
            if dp >= 0.0 {
                out.push(p);
            }
            if (dp >= 0.0) != (dq >= 0.0) {
                let t = dp / (dp - dq);
                out.push((p.0 + t * (q.0 - p.0), p.1 + t * (q.1 - p.1)));
            }
        }
    }
    out
}

/// Area of the overlap between the two footprints.
pub fn bev_intersection(a: &Box3D, b: &Box3D) -> f64 {
    let poly = clip_convex(&a.footprint(), &b.footprint());
    if poly.len() < 3 {
        return 0.0;
    }
    let area = polygon_area(&poly).abs();
    if area < DEGENERATE_AREA {
        0.0
    } else {
        area
    }
}

pub fn bev_iou(a: &Box3D, b: &Box3D) -> f64 {
    let inter = bev_intersection(a, b);
    if inter == 0.0 {
        return 0.0;
    }
    (inter / (a.bev_area() + b.bev_area() - inter)).clamp(0.0, 1.0)
}

fn vertical_overlap(a: &Box3D, b: &Box3D) -> f64 {
    let top = (a.y - a.h).max(b.y - b.h);
    let bottom = a.y.min(b.y);
    (bottom - top).max(0.0)
}

pub fn iou3d(a: &Box3D, b: &Box3D) -> f64 {
    let dy = vertical_overlap(a, b);
    if dy == 0.0 {
        return 0.0;
    }
    let inter = bev_intersection(a, b) * dy;
    if inter == 0.0 {
        return 0.0;
    }
    (inter / (a.volume() + b.volume() - inter)).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum IouMode {
    Bev,
    ThreeD,
}

impl IouMode {
    pub fn iou(self, a: &Box3D, b: &Box3D) -> f64 {
        match self {
            IouMode::Bev => bev_iou(a, b),
            IouMode::ThreeD => iou3d(a, b),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Difficulty {
    Easy,
    Moderate,
    Hard,
}

impl Difficulty {
    pub const ALL: [Difficulty; 3] = [Difficulty::Easy, Difficulty::Moderate, Difficulty::Hard];

    fn limits(self) -> (f64, u8, f64) {
        match self {
            Difficulty::Easy => (40.0, 0, 0.15),
            Difficulty::Moderate => (25.0, 1, 0.30),
            Difficulty::Hard => (25.0, 2, 0.50),
        }
    }
}

/// Whether a ground-truth box belongs to the given difficulty bucket.
pub fn difficulty_filter(gt: &Box3D, level: Difficulty) -> bool {
    let (min_height, max_occlusion, max_truncation) = level.limits();
    gt.bbox_height >= min_height && gt.occlusion <= max_occlusion && gt.truncation <= max_truncation
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApResult {
    /// Percentage in `[0, 100]`.
    pub ap: f64,
    /// One entry per distinct prediction score, highest score first.
    pub thresholds: Vec<f64>,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub true_positives: usize,
    pub false_positives: usize,
    /// Predictions that only matched out-of-level ground truth.
    pub ignored: usize,
    pub num_ground_truth: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Outcome {
    TruePositive,
    FalsePositive,
    Ignored,
}

/// Prediction indices sorted by descending score; equal scores keep input order.
fn score_order(preds: &[Box3D]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&i, &j| preds[j].score.partial_cmp(&preds[i].score).unwrap_or(Ordering::Equal));
    order
}

/// Greedy matching of one frame; returns `(score, outcome)` per prediction.
fn match_frame(
    preds: &[Box3D],
    gts: &[Box3D],
    threshold: f64,
    mode: IouMode,
    level: Difficulty,
) -> Vec<(f64, Outcome)> {
    let in_level: Vec<bool> = gts.iter().map(|g| difficulty_filter(g, level)).collect();
    let mut used = vec![false; gts.len()];
    let mut out = Vec::with_capacity(preds.len());
    for i in score_order(preds) {
        let p = &preds[i];
        let best = |want_in_level: bool, used: &[bool]| -> Option<usize> {
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gts.iter().enumerate() {
                if used[j] || in_level[j] != want_in_level {
                    continue;
                }
                let iou = mode.iou(p, g);
                if iou >= threshold && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((j, iou));
                }
            }
            best.map(|(j, _)| j)
        };
        let outcome = if let Some(j) = best(true, &used) {
            used[j] = true;
            Outcome::TruePositive
        } else if let Some(j) = best(false, &used) {
            used[j] = true;
            Outcome::Ignored
        } else {
            Outcome::FalsePositive
        };
        out.push((p.score, outcome));
    }
    out
}

/// 11-point interpolated AP (in percent) from a precision/recall curve given
/// as true-positive counts.
fn eleven_point(tp: &[usize], precision: &[f64], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let total: f64 = (0..=10)
        .map(|i| {
            tp.iter()
                .zip(precision)
                .filter(|(&t, _)| t * 10 >= i * num_gt)
                .map(|(_, &p)| p)
                .fold(0.0, f64::max)
        })
        .sum();
    100.0 * total / 11.0
}

/// Average precision over frames. Ground truth outside `level` is excluded
/// from the recall denominator, and predictions matching only such boxes
/// count as neither true nor false positives.
pub fn average_precision(
    preds: &[Vec<Box3D>],
    gts: &[Vec<Box3D>],
    iou_threshold: f64,
    mode: IouMode,
    level: Difficulty,
) -> Result<ApResult, DetevalError> {
    if preds.len() != gts.len() {
        return Err(DetevalError::FrameCountMismatch {
            preds: preds.len(),
            gts: gts.len(),
        });
    }
    if !(iou_threshold > 0.0 && iou_threshold <= 1.0) {
        return Err(DetevalError::InvalidThreshold(iou_threshold));
    }
    for (frame, boxes) in preds.iter().enumerate() {
        if let Some(index) = boxes.iter().position(|b| b.score.is_nan()) {
            return Err(DetevalError::NanScore { frame, index });
        }
    }

    let per_frame: Vec<Vec<(f64, Outcome)>> = preds
        .par_iter()
        .zip(gts.par_iter())
        .map(|(p, g)| match_frame(p, g, iou_threshold, mode, level))
        .collect();
    let mut scored: Vec<(f64, Outcome)> = per_frame
        .into_iter()
        .flatten()
        .filter(|(_, o)| *o != Outcome::Ignored)
        .collect();
    let ignored = preds.iter().map(Vec::len).sum::<usize>() - scored.len();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let num_ground_truth = gts
        .iter()
        .flatten()
        .filter(|g| difficulty_filter(g, level))
        .count();

    let mut thresholds = Vec::new();
    let mut tp_counts = Vec::new();
    let mut precision = Vec::new();
    let mut recall = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    for (i, &(score, outcome)) in scored.iter().enumerate() {
        match outcome {
            Outcome::TruePositive => tp += 1,
            _ => fp += 1,
        }
        // Close a curve point only after the last prediction sharing this score.
        if scored.get(i + 1).is_some_and(|n| n.0 == score) {
            continue;
        }
        thresholds.push(score);
        tp_counts.push(tp);
        precision.push(tp as f64 / (tp + fp) as f64);
        recall.push(if num_ground_truth == 0 {
            0.0
        } else {
            tp as f64 / num_ground_truth as f64
        });
    }
    Ok(ApResult {
        ap: eleven_point(&tp_counts, &precision, num_ground_truth),
        thresholds,
        precision,
        recall,
        true_positives: tp,
        false_positives: fp,
        ignored,
        num_ground_truth,
    })
}
