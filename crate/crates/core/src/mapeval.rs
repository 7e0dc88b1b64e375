//! Trajectory recovery from frame-to-frame poses and windowed absolute
//! trajectory error (ATE).
//!
//! Relative poses follow the point-transform convention of the rest of the
//! crate: `relatives[i]` maps points from camera `i` into camera `i + 1`.
//! Trajectories hold world-from-camera poses.

use std::fmt;

use nalgebra::Vector3;
use thiserror::Error;

use crate::geometry::Se3Pose;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MapevalError {
    #[error("trajectory is empty")]
    Empty,
    #[error("{poses} poses but {frames} frame indices")]
    FrameCount { poses: usize, frames: usize },
    #[error("trajectory lengths differ: predicted {pred}, ground truth {gt}")]
    LengthMismatch { pred: usize, gt: usize },
    #[error("snippet length {0} is below 2")]
    SnippetTooShort(usize),
    #[error("snippet length {snippet_len} exceeds trajectory length {len}")]
    SnippetTooLong { snippet_len: usize, len: usize },
}

/// Ordered world-from-camera poses with their frame indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    poses: Vec<Se3Pose>,
    frames: Vec<usize>,
}

impl Trajectory {
    /// Trajectory over frames `0..poses.len()`.
    pub fn new(poses: Vec<Se3Pose>) -> Result<Self, MapevalError> {
        let frames = (0..poses.len()).collect();
        Self::with_frames(poses, frames)
    }

    pub fn with_frames(poses: Vec<Se3Pose>, frames: Vec<usize>) -> Result<Self, MapevalError> {
        if poses.is_empty() {
            return Err(MapevalError::Empty);
        }
        if poses.len() != frames.len() {
            return Err(MapevalError::FrameCount {
                poses: poses.len(),
                frames: frames.len(),
            });
        }
        Ok(Self { poses, frames })
    }

    pub fn poses(&self) -> &[Se3Pose] {
        &self.poses
    }

    pub fn frames(&self) -> &[usize] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    /// Frame-to-frame poses; the inverse of [`accumulate`].
    pub fn relatives(&self) -> Vec<Se3Pose> {
        self.poses
            .windows(2)
            .map(|w| w[1].inverse().compose(&w[0]))
            .collect()
    }
}

/// Chains frame-to-frame poses into a trajectory starting at the identity.
pub fn accumulate(relatives: &[Se3Pose]) -> Trajectory {
    let mut poses = Vec::with_capacity(relatives.len() + 1);
    poses.push(Se3Pose::identity());
    for rel in relatives {
        let last = poses.last().expect("starts non-empty");
        poses.push(last.compose(&rel.inverse()));
    }
    let frames = (0..poses.len()).collect();
    Trajectory { poses, frames }
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AteReport {
    /// Meters.
    pub mean: f64,
    /// Meters, population standard deviation over windows.
    pub std: f64,
    pub per_snippet: Vec<f64>,
    pub snippet_len: usize,
}

impl fmt::Display for AteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.4} ± {:.4}", self.mean, self.std)
    }
}

/// Translations of `poses` relative to the first pose.
pub fn reorigined_translations(poses: &[Se3Pose]) -> Vec<Vector3<f64>> {
    let Some(first) = poses.first() else {
        return Vec::new();
    };
    let origin = first.inverse();
    poses.iter().map(|p| *origin.compose(p).translation()).collect()
}

/// Least-squares scale `s` minimizing `Σ |g - s·p|²`; 0 when every `p` is zero.
pub fn align_scale(pred: &[Vector3<f64>], gt: &[Vector3<f64>]) -> f64 {
    let num: f64 = pred.iter().zip(gt).map(|(p, g)| p.dot(g)).sum();
    let den: f64 = pred.iter().map(|p| p.norm_squared()).sum();
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

/// Scale-aligned RMS translation error of one window after re-origining both
/// sub-trajectories at their first pose.
pub fn window_error(pred: &[Se3Pose], gt: &[Se3Pose]) -> f64 {
    let tp = reorigined_translations(pred);
    let tg = reorigined_translations(gt);
    let scale = align_scale(&tp, &tg);
    let sq: f64 = tp
        .iter()
        .zip(&tg)
        .map(|(p, g)| (g - scale * p).norm_squared())
        .sum();
    (sq / tp.len() as f64).sqrt()
}

/// ATE over every window of `snippet_len` consecutive frames.
pub fn ate(pred: &Trajectory, gt: &Trajectory, snippet_len: usize) -> Result<AteReport, MapevalError> {
    if pred.len() != gt.len() {
        return Err(MapevalError::LengthMismatch {
            pred: pred.len(),
            gt: gt.len(),
        });
    }
    if snippet_len < 2 {
        return Err(MapevalError::SnippetTooShort(snippet_len));
    }
    if snippet_len > pred.len() {
        return Err(MapevalError::SnippetTooLong {
            snippet_len,
            len: pred.len(),
        });
    }
    let per_snippet: Vec<f64> = pred
        .poses
        .windows(snippet_len)
        .zip(gt.poses.windows(snippet_len))
        .map(|(p, g)| window_error(p, g))
        .collect();
    let (mean, std) = mean_std(&per_snippet);
    Ok(AteReport {
        mean,
        std,
        per_snippet,
        snippet_len,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Twist;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pose(rng: &mut ChaCha8Rng, rot: f64, trans: f64) -> Se3Pose {
        let mut xi = [0.0; 6];
        for (i, v) in xi.iter_mut().enumerate() {
            let bound = if i < 3 { trans } else { rot };
            *v = rng.random_range(-bound..bound);
        }
        Twist::from_slice(&xi).exp()
    }

    fn random_trajectory(rng: &mut ChaCha8Rng, n: usize) -> Trajectory {
        let rel: Vec<_> = (0..n - 1).map(|_| random_pose(rng, 0.1, 1.0)).collect();
        accumulate(&rel)
    }

    #[test]
    fn identity_relative_gives_two_identical_poses() {
        let t = accumulate(&[Se3Pose::identity()]);
        assert_eq!(t.len(), 2);
        assert_eq!(t.poses()[0], t.poses()[1]);
        assert!(t.poses()[0].is_identity());
    }

    #[test]
    fn forward_steps_are_collinear() {
        // Moving 1 m forward: points in the old camera sit 1 m closer in the new one.
        let step = Se3Pose::from_translation(0.0, 0.0, -1.0);
        let t = accumulate(&[step; 5]);
        for (i, p) in t.poses().iter().enumerate() {
            assert_eq!(*p.translation(), Vector3::new(0.0, 0.0, i as f64));
        }
    }

    #[test]
    fn relatives_invert_accumulate() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rel: Vec<_> = (0..30).map(|_| random_pose(&mut rng, 0.5, 2.0)).collect();
        let back = accumulate(&rel).relatives();
        for (a, b) in rel.iter().zip(&back) {
            assert!((a.to_matrix() - b.to_matrix()).abs().max() < 1e-10);
        }
    }

    #[test]
    fn ate_of_identical_trajectories_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let gt = random_trajectory(&mut rng, 12);
        let r = ate(&gt, &gt, 3).unwrap();
        assert_eq!(r.to_string(), "0.0000 ± 0.0000");
        assert_eq!(r.per_snippet.len(), 10);
    }

    #[test]
    fn ate_absorbs_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let gt = random_trajectory(&mut rng, 10);
        let scaled = Trajectory::new(
            gt.poses()
                .iter()
                .map(|p| Se3Pose::new(*p.rotation(), p.translation() * 2.0).unwrap())
                .collect(),
        )
        .unwrap();
        let r = ate(&scaled, &gt, 3).unwrap();
        assert!(r.mean < 1e-12, "{}", r.mean);
        assert_eq!(r.to_string(), "0.0000 ± 0.0000");
    }

    #[test]
    fn all_zero_predictions_use_zero_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let gt = random_trajectory(&mut rng, 4);
        let zero = Trajectory::new(vec![Se3Pose::identity(); 4]).unwrap();
        let r = ate(&zero, &gt, 4).unwrap();
        let origin = gt.poses()[0].inverse();
        let rms = (gt
            .poses()
            .iter()
            .map(|p| origin.compose(p).translation().norm_squared())
            .sum::<f64>()
            / 4.0)
            .sqrt();
        assert!((r.mean - rms).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_windows() {
        let t = Trajectory::new(vec![Se3Pose::identity(); 3]).unwrap();
        let u = Trajectory::new(vec![Se3Pose::identity(); 4]).unwrap();
        assert!(matches!(ate(&t, &u, 2), Err(MapevalError::LengthMismatch { .. })));
        assert!(matches!(ate(&t, &t, 1), Err(MapevalError::SnippetTooShort(1))));
        assert!(matches!(ate(&t, &t, 4), Err(MapevalError::SnippetTooLong { .. })));
        assert!(matches!(Trajectory::new(vec![]), Err(MapevalError::Empty)));
    }

    #[test]
    fn mean_std_match_report() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let gt = random_trajectory(&mut rng, 15);
        let pred = random_trajectory(&mut rng, 15);
        let r = ate(&pred, &gt, 3).unwrap();
        assert_eq!(mean_std(&r.per_snippet), (r.mean, r.std));
        assert!(r.std >= 0.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn ate_invariant_to_global_rigid_transform(seed in any::<u64>(), g_seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gt = random_trajectory(&mut rng, 8);
            let pred = random_trajectory(&mut rng, 8);
            let g = random_pose(&mut ChaCha8Rng::seed_from_u64(g_seed), 1.0, 5.0);
            let moved = |t: &Trajectory| Trajectory::new(t.poses().iter().map(|p| g.compose(p)).collect()).unwrap();
            let a = ate(&pred, &gt, 3).unwrap();
            let b = ate(&moved(&pred), &moved(&gt), 3).unwrap();
            prop_assert!((a.mean - b.mean).abs() < 1e-9);
            prop_assert!((a.std - b.std).abs() < 1e-9);
        }

        #[test]
        fn ate_invariant_to_prediction_scale(seed in any::<u64>(), s in 0.1f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gt = random_trajectory(&mut rng, 8);
            let pred = random_trajectory(&mut rng, 8);
            let scaled = Trajectory::new(
                pred.poses().iter().map(|p| Se3Pose::new(*p.rotation(), p.translation() * s).unwrap()).collect(),
            ).unwrap();
            let a = ate(&pred, &gt, 3).unwrap();
            let b = ate(&scaled, &gt, 3).unwrap();
            prop_assert!((a.mean - b.mean).abs() < 1e-9 * (1.0 + a.mean));
        }
    }
}
