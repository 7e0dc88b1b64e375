//! View synthesis by inverse warping and the losses built on it.

use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::{Intrinsics, Projector, Se3Pose};
use crate::raster::{check_dims, RasterError};
pub use crate::raster::{DepthMap, Image, ValidityMask};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PhotometricError {
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error("loss weight {name} = {value} must be finite and non-negative")]
    NegativeWeight { name: &'static str, value: f64 },
}

/// Bilinear lookup at continuous `(x, y)` (column, row).
///
/// Writes one value per channel into `out` and returns whether the sample is
/// valid. A sample is valid when every neighbour carrying non-zero weight lies
/// inside the image; invalid samples leave `out` zeroed.
#[inline]
pub fn bilinear_sample_into(img: &Image, x: f64, y: f64, out: &mut [f64]) -> bool {
    out.iter_mut().for_each(|o| *o = 0.0);
    let (w, h) = (img.width(), img.height());
    if !(x >= 0.0 && y >= 0.0 && x <= (w - 1) as f64 && y <= (h - 1) as f64) {
        return false;
    }
    // Non-negative here, so truncation is floor.
    let (x0, y0) = (x as usize, y as usize);
    let ax = x - x0 as f64;
    let ay = y - y0 as f64;
    // On the last row/column the far neighbour has zero weight.
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let c = img.channels();
    let data = img.data();
    let (i00, i10) = ((y0 * w + x0) * c, (y0 * w + x1) * c);
    let (i01, i11) = ((y1 * w + x0) * c, (y1 * w + x1) * c);
    let w00 = (1.0 - ax) * (1.0 - ay);
    let w10 = ax * (1.0 - ay);
    let w01 = (1.0 - ax) * ay;
    let w11 = ax * ay;
    for (ch, o) in out.iter_mut().enumerate().take(c) {
        *o = data[i00 + ch] * w00 + data[i10 + ch] * w10 + data[i01 + ch] * w01 + data[i11 + ch] * w11;
    }
    true
}

/// Single-channel specialization of [`bilinear_sample_into`] with identical
/// arithmetic.
#[inline(always)]
fn bilinear_gray(data: &[f64], w: usize, h: usize, x: f64, y: f64) -> Option<f64> {
    if !(x >= 0.0 && y >= 0.0 && x <= (w - 1) as f64 && y <= (h - 1) as f64) {
        return None;
    }
    let (x0, y0) = (x as usize, y as usize);
    let ax = x - x0 as f64;
    let ay = y - y0 as f64;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let (r0, r1) = (y0 * w, y1 * w);
    Some(
        data[r0 + x0] * ((1.0 - ax) * (1.0 - ay))
            + data[r0 + x1] * (ax * (1.0 - ay))
            + data[r1 + x0] * ((1.0 - ax) * ay)
            + data[r1 + x1] * (ax * ay),
    )
}

/// Bilinear lookup returning a freshly allocated per-channel colour.
pub fn bilinear_sample(img: &Image, x: f64, y: f64) -> (Vec<f64>, bool) {
    let mut out = vec![0.0; img.channels()];
    let valid = bilinear_sample_into(img, x, y, &mut out);
    (out, valid)
}

/// Reconstructs the target view by sampling `src` at the projection of every
/// target pixel through `depth_t` and `pose_t_to_s`.
///
/// Rows are processed in parallel; the result does not depend on the thread
/// count.
pub fn inverse_warp(
    src: &Image,
    depth_t: &DepthMap,
    pose_t_to_s: &Se3Pose,
    k: &Intrinsics,
) -> Result<(Image, ValidityMask), PhotometricError> {
    check_dims((k.width, k.height), src.dims())?;
    check_dims((k.width, k.height), depth_t.dims())?;
    let (w, h, c) = (k.width, k.height, src.channels());
    let mut recon = vec![0.0; w * h * c];
    let mut mask = vec![false; w * h];
    let projector = Projector::new(pose_t_to_s, k);
    recon
        .par_chunks_mut(w * c)
        .zip(mask.par_chunks_mut(w))
        .enumerate()
        .for_each(|(row, (recon_row, mask_row))| {
            let depth_row = &depth_t.data()[row * w..(row + 1) * w];
            for (col, &z) in depth_row.iter().enumerate() {
                if z.is_nan() {
                    continue;
                }
                let Ok((x, y)) = projector.project(col as f64, row as f64, z) else {
                    continue;
                };
                mask_row[col] =
                    bilinear_sample_into(src, x, y, &mut recon_row[col * c..(col + 1) * c]);
            }
        });
    Ok((
        Image::from_raw_unchecked(w, h, c, recon),
        ValidityMask::new(w, h, mask)?,
    ))
}

/// Mean absolute intensity difference over the masked pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskedLoss {
    /// Mean over valid pixels and channels; `0` when nothing is valid.
    pub loss: f64,
    pub valid_count: usize,
}

impl MaskedLoss {
    /// The un-normalized sum `Σ_p Σ_c |target - recon|`.
    pub fn raw_sum(&self, channels: usize) -> f64 {
        self.loss * (self.valid_count * channels) as f64
    }
}

pub fn photometric_loss(
    target: &Image,
    recon: &Image,
    mask: &ValidityMask,
) -> Result<MaskedLoss, PhotometricError> {
    check_dims(target.dims(), recon.dims())?;
    check_dims(target.dims(), mask.dims())?;
    if target.channels() != recon.channels() {
        return Err(RasterError::ChannelMismatch(target.channels(), recon.channels()).into());
    }
    let c = target.channels();
    let mut sum = 0.0;
    let mut valid_count = 0usize;
    for (i, &m) in mask.data().iter().enumerate() {
        if !m {
            continue;
        }
        valid_count += 1;
        let a = &target.data()[i * c..(i + 1) * c];
        let b = &recon.data()[i * c..(i + 1) * c];
        sum += a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>();
    }
    let loss = if valid_count == 0 {
        0.0
    } else {
        sum / (valid_count * c) as f64
    };
    Ok(MaskedLoss { loss, valid_count })
}

/// `photometric_loss(target, inverse_warp(src, depth_t, pose, k))` in one
/// pass, without materializing the reconstruction. Numerically identical to
/// the two-step form.
pub fn warp_loss(
    target: &Image,
    src: &Image,
    depth_t: &DepthMap,
    pose_t_to_s: &Se3Pose,
    k: &Intrinsics,
) -> Result<MaskedLoss, PhotometricError> {
    check_dims((k.width, k.height), target.dims())?;
    check_dims((k.width, k.height), src.dims())?;
    check_dims((k.width, k.height), depth_t.dims())?;
    if target.channels() != src.channels() {
        return Err(RasterError::ChannelMismatch(target.channels(), src.channels()).into());
    }
    let (w, c) = (k.width, src.channels());
    let mut sample = [0.0f64; 3];
    let sample = &mut sample[..c];
    let mut sum = 0.0;
    let mut valid_count = 0usize;
    let projector = Projector::new(pose_t_to_s, k);
    if c == 1 {
        let (h, src_data, tgt_data) = (k.height, src.data(), target.data());
        for (row, (depth_row, tgt_row)) in depth_t
            .data()
            .chunks_exact(w)
            .zip(tgt_data.chunks_exact(w))
            .enumerate()
        {
            for (col, (&z, &t)) in depth_row.iter().zip(tgt_row).enumerate() {
                if z.is_nan() {
                    continue;
                }
                let Ok((x, y)) = projector.project(col as f64, row as f64, z) else {
                    continue;
                };
                if let Some(v) = bilinear_gray(src_data, w, h, x, y) {
                    valid_count += 1;
                    sum += (t - v).abs();
                }
            }
        }
        let loss = if valid_count == 0 { 0.0 } else { sum / valid_count as f64 };
        return Ok(MaskedLoss { loss, valid_count });
    }
    for (row, depth_row) in depth_t.data().chunks_exact(w).enumerate() {
        for (col, &z) in depth_row.iter().enumerate() {
            if z.is_nan() {
                continue;
            }
            let Ok((x, y)) = projector.project(col as f64, row as f64, z) else {
                continue;
            };
            if !bilinear_sample_into(src, x, y, sample) {
                continue;
            }
            valid_count += 1;
            let i = row * w + col;
            let t = &target.data()[i * c..(i + 1) * c];
            sum += t.iter().zip(sample.iter()).map(|(x, y)| (x - y).abs()).sum::<f64>();
        }
    }
    let loss = if valid_count == 0 {
        0.0
    } else {
        sum / (valid_count * c) as f64
    };
    Ok(MaskedLoss { loss, valid_count })
}

/// Mean absolute depth error over pixels valid in both maps (meters).
pub fn depth_l1_loss(pred: &DepthMap, gt: &DepthMap) -> Result<MaskedLoss, PhotometricError> {
    check_dims(gt.dims(), pred.dims())?;
    let mut sum = 0.0;
    let mut valid_count = 0usize;
    for (p, g) in pred.data().iter().zip(gt.data()) {
        if p.is_nan() || g.is_nan() {
            continue;
        }
        sum += (p - g).abs();
        valid_count += 1;
    }
    let loss = if valid_count == 0 {
        0.0
    } else {
        sum / valid_count as f64
    };
    Ok(MaskedLoss { loss, valid_count })
}

/// Weighted sum of an externally supplied detection loss and the depth loss.
pub fn joint_loss(
    l_det: f64,
    l_depth: f64,
    lambda_det: f64,
    lambda_depth: f64,
) -> Result<f64, PhotometricError> {
    for (name, value) in [("lambda_det", lambda_det), ("lambda_depth", lambda_depth)] {
        if !(value.is_finite() && value >= 0.0) {
            return Err(PhotometricError::NegativeWeight { name, value });
        }
    }
    Ok(lambda_det * l_det + lambda_depth * l_depth)
}
