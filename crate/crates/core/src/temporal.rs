//! Plane-sweep construction of temporal feature and cost volumes.
//!
//! The current frame is lifted along the hypothesis axis by replication;
//! historical frames are resampled into the current view per hypothesis
//! plane with the homography warp. Feature volumes keep raw features
//! (current block then historical block on the channel axis); the cost
//! volume reduces the same correspondences to matching scores instead.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{relative_pose, warp_pixel, DepthHypothesisSet, Intrinsics, RigidPose};
use crate::lifting::ContextFeature;
use crate::numerics::{bilinear_sample, BorderPolicy, DenseArray};

/// One observed frame: features plus the camera that produced them.
#[derive(Debug, Clone)]
pub struct FrameObservation {
    pub feature: ContextFeature,
    pub intrinsics: Intrinsics,
    pub pose: RigidPose,
    /// Signed frame index relative to the current frame (0, -1, -2, ...).
    pub timestamp: i64,
}

/// Composite temporal volume `[2C, D, H, W]`: current block first, then
/// the aggregated historical block.
#[derive(Debug, Clone)]
pub struct TemporalFeatureVolume {
    values: DenseArray,
    block_channels: usize,
}

impl TemporalFeatureVolume {
    pub fn new(values: DenseArray, block_channels: usize) -> Result<Self> {
        if values.rank() != 4 || values.shape()[0] != 2 * block_channels {
            return Err(Error::Shape(format!(
                "temporal volume must be [2C, D, H, W] with C = {block_channels}, got {:?}",
                values.shape()
            )));
        }
        Ok(TemporalFeatureVolume {
            values,
            block_channels,
        })
    }

    pub fn values(&self) -> &DenseArray {
        &self.values
    }

    pub fn block_channels(&self) -> usize {
        self.block_channels
    }

    /// Copy of the current-frame block, `[C, D, H, W]`.
    pub fn current_block(&self) -> DenseArray {
        self.block(0)
    }

    /// Copy of the historical block, `[C, D, H, W]`.
    pub fn historical_block(&self) -> DenseArray {
        self.block(1)
    }

    fn block(&self, which: usize) -> DenseArray {
        let s = self.values.shape();
        let (c, rest) = (self.block_channels, s[1] * s[2] * s[3]);
        let start = which * c * rest;
        DenseArray::from_vec(
            &[c, s[1], s[2], s[3]],
            self.values.data()[start..start + c * rest].to_vec(),
        )
        .expect("block extents are consistent by construction")
    }
}

/// Replicate the current feature map across every hypothesis slice.
pub fn lift_current(frame: &FrameObservation, hyps: &DepthHypothesisSet) -> DenseArray {
    let (c, h, w) = (
        frame.feature.channels(),
        frame.feature.height(),
        frame.feature.width(),
    );
    let d = hyps.count();
    let plane = h * w;
    let mut out = DenseArray::zeros(&[c, d, h, w]);
    let src = frame.feature.values().data();
    let dst = out.data_mut();
    for ci in 0..c {
        for di in 0..d {
            dst[(ci * d + di) * plane..(ci * d + di + 1) * plane]
                .copy_from_slice(&src[ci * plane..(ci + 1) * plane]);
        }
    }
    out
}

/// Resample a historical frame into the current view once per hypothesis
/// plane. Warps that leave the image or land behind the historical camera
/// contribute zeros. A bitwise-identical pose and intrinsics short-circuit
/// to plain replication so the identity warp is exact.
pub fn warp_historical(
    hist: &FrameObservation,
    cur: &FrameObservation,
    hyps: &DepthHypothesisSet,
) -> Result<DenseArray> {
    let (c, h, w) = (
        cur.feature.channels(),
        cur.feature.height(),
        cur.feature.width(),
    );
    if hist.feature.channels() != c || hist.feature.height() != h || hist.feature.width() != w {
        return Err(Error::Shape(format!(
            "historical feature {:?} does not match current {:?}",
            hist.feature.values().shape(),
            cur.feature.values().shape()
        )));
    }
    if hist.pose == cur.pose && hist.intrinsics == cur.intrinsics {
        return Ok(lift_current(hist, hyps));
    }

    let rel = relative_pose(&cur.pose, &hist.pose);
    let d = hyps.count();
    let plane = h * w;
    let mut out = DenseArray::zeros(&[c, d, h, w]);

    // One hypothesis slice per task; each task owns its (d) plane across
    // all channels, copied back in slice order for determinism.
    let slices: Vec<Vec<f64>> = (0..d)
        .into_par_iter()
        .map(|di| {
            let depth = hyps.value(di);
            let mut slice = vec![0.0; c * plane];
            for y in 0..h {
                for x in 0..w {
                    let warped = warp_pixel(
                        &cur.intrinsics,
                        &hist.intrinsics,
                        &rel,
                        (x as f64, y as f64),
                        depth,
                    )
                    .expect("hypothesis depths are positive");
                    if let Some((u, v)) = warped {
                        let sample =
                            bilinear_sample(hist.feature.values(), u, v, BorderPolicy::Zero)
                                .expect("feature map rank is checked above");
                        for (ci, val) in sample.into_iter().enumerate() {
                            slice[ci * plane + y * w + x] = val;
                        }
                    }
                }
            }
            slice
        })
        .collect();
    let dst = out.data_mut();
    for (di, slice) in slices.into_iter().enumerate() {
        for ci in 0..c {
            dst[(ci * d + di) * plane..(ci * d + di + 1) * plane]
                .copy_from_slice(&slice[ci * plane..(ci + 1) * plane]);
        }
    }
    Ok(out)
}

fn check_sequence(frames: &[FrameObservation]) -> Result<()> {
    if frames.len() < 2 {
        return Err(Error::Argument(format!(
            "need the current frame plus at least one historical frame, got {}",
            frames.len()
        )));
    }
    let c = frames[0].feature.channels();
    if frames.iter().any(|f| f.feature.channels() != c) {
        return Err(Error::Shape(
            "feature channel count must be identical across the sequence".into(),
        ));
    }
    Ok(())
}

/// Build the composite temporal volume: the current block is the lifted
/// current frame (never resampled); the historical block is the
/// element-wise mean of all warped historical volumes. The two blocks are
/// concatenated on the channel axis.
pub fn build_temporal_volume(
    frames: &[FrameObservation],
    hyps: &DepthHypothesisSet,
) -> Result<TemporalFeatureVolume> {
    check_sequence(frames)?;
    let cur = &frames[0];
    let current = lift_current(cur, hyps);
    let historical = mean_warped(frames, hyps)?;
    concat_blocks(current, historical, cur.feature.channels())
}

fn mean_warped(frames: &[FrameObservation], hyps: &DepthHypothesisSet) -> Result<DenseArray> {
    let cur = &frames[0];
    let n = (frames.len() - 1) as f64;
    let mut acc: Option<DenseArray> = None;
    for hist in &frames[1..] {
        let warped = warp_historical(hist, cur, hyps)?;
        acc = Some(match acc {
            None => warped,
            Some(mut a) => {
                for (slot, v) in a.data_mut().iter_mut().zip(warped.data()) {
                    *slot += v;
                }
                a
            }
        });
    }
    let mut mean = acc.expect("at least one historical frame is checked above");
    for v in mean.data_mut() {
        *v /= n;
    }
    Ok(mean)
}

fn concat_blocks(
    current: DenseArray,
    historical: DenseArray,
    block_channels: usize,
) -> Result<TemporalFeatureVolume> {
    let s = current.shape().to_vec();
    let mut values = DenseArray::zeros(&[2 * block_channels, s[1], s[2], s[3]]);
    let half = current.len();
    values.data_mut()[..half].copy_from_slice(current.data());
    values.data_mut()[half..].copy_from_slice(historical.data());
    TemporalFeatureVolume::new(values, block_channels)
}

/// Matching rule for the cost-volume variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchMode {
    Hadamard,
    AbsDiff,
}

/// Matching-cost volume: per hypothesis slice, the mean over historical
/// frames of the element-wise match between the lifted reference features
/// and each warped frame.
pub fn build_cost_volume(
    frames: &[FrameObservation],
    hyps: &DepthHypothesisSet,
    mode: MatchMode,
) -> Result<DenseArray> {
    check_sequence(frames)?;
    let cur = &frames[0];
    let reference = lift_current(cur, hyps);
    let n = (frames.len() - 1) as f64;
    let mut acc = DenseArray::zeros(reference.shape());
    for hist in &frames[1..] {
        let warped = warp_historical(hist, cur, hyps)?;
        for ((slot, r), w) in acc
            .data_mut()
            .iter_mut()
            .zip(reference.data())
            .zip(warped.data())
        {
            *slot += match mode {
                MatchMode::Hadamard => r * w,
                MatchMode::AbsDiff => (r - w).abs(),
            };
        }
    }
    for v in acc.data_mut() {
        *v /= n;
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_hypotheses, Spacing};
    use nalgebra::{Matrix3, Vector3};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_feature(shape: &[usize], seed: u64) -> ContextFeature {
        let mut rng = StdRng::seed_from_u64(seed);
        let data = (0..shape.iter().product::<usize>())
            .map(|_| rng.gen_range(-2.0..2.0))
            .collect();
        ContextFeature::new(DenseArray::from_vec(shape, data).unwrap()).unwrap()
    }

    fn frame(seed: u64, pose: RigidPose) -> FrameObservation {
        FrameObservation {
            feature: random_feature(&[2, 4, 5], seed),
            intrinsics: Intrinsics::new(5.0, 5.0, 2.0, 1.5).unwrap(),
            pose,
            timestamp: 0,
        }
    }

    fn hyps() -> DepthHypothesisSet {
        build_hypotheses(2.0, 6.0, 3, Spacing::Linear).unwrap()
    }

    #[test]
    fn lift_current_replicates_every_slice() {
        let f = frame(1, RigidPose::identity());
        let lifted = lift_current(&f, &hyps());
        assert_eq!(lifted.shape(), &[2, 3, 4, 5]);
        for c in 0..2 {
            for d in 0..3 {
                for y in 0..4 {
                    for x in 0..5 {
                        assert_eq!(
                            lifted.get(&[c, d, y, x]),
                            f.feature.values().get(&[c, y, x])
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn lift_current_sum_over_depth_is_count_times_input() {
        let f = frame(2, RigidPose::identity());
        let lifted = lift_current(&f, &hyps());
        for c in 0..2 {
            for y in 0..4 {
                for x in 0..5 {
                    let sum: f64 = (0..3).map(|d| lifted.get(&[c, d, y, x])).sum();
                    let want = 3.0 * f.feature.values().get(&[c, y, x]);
                    assert!((sum - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn warp_identity_pose_is_bitwise_identity() {
        let cur = frame(3, RigidPose::identity());
        let hist = FrameObservation {
            feature: random_feature(&[2, 4, 5], 4),
            ..cur.clone()
        };
        let warped = warp_historical(&hist, &cur, &hyps()).unwrap();
        for d in 0..3 {
            for c in 0..2 {
                for y in 0..4 {
                    for x in 0..5 {
                        assert_eq!(
                            warped.get(&[c, d, y, x]),
                            hist.feature.values().get(&[c, y, x])
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn warp_pure_z_translation_keeps_constant_field_constant() {
        let cur = FrameObservation {
            feature: ContextFeature::new(DenseArray::filled(&[1, 6, 6], 3.25)).unwrap(),
            intrinsics: Intrinsics::new(6.0, 6.0, 2.5, 2.5).unwrap(),
            pose: RigidPose::identity(),
            timestamp: 0,
        };
        let hist = FrameObservation {
            pose: RigidPose::new(Matrix3::identity(), Vector3::new(0.0, 0.0, 0.4)).unwrap(),
            timestamp: -1,
            ..cur.clone()
        };
        let warped = warp_historical(&hist, &cur, &hyps()).unwrap();
        // interior pixels stay in bounds for every hypothesis here
        for d in 0..3 {
            for y in 2..4 {
                for x in 2..4 {
                    assert!((warped.get(&[0, d, y, x]) - 3.25).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn temporal_volume_duplicate_frame_blocks_match() {
        let cur = frame(5, RigidPose::identity());
        let hist = FrameObservation {
            timestamp: -1,
            ..cur.clone()
        };
        let vol = build_temporal_volume(&[cur, hist], &hyps()).unwrap();
        assert_eq!(vol.current_block().data(), vol.historical_block().data());
    }

    #[test]
    fn temporal_volume_channel_extent_is_twice_input() {
        let cur = frame(6, RigidPose::identity());
        let h1 = FrameObservation { timestamp: -1, ..cur.clone() };
        let h2 = FrameObservation { timestamp: -2, ..cur.clone() };
        let h3 = FrameObservation { timestamp: -3, ..cur.clone() };
        for historical in [1usize, 3] {
            let mut frames = vec![cur.clone()];
            frames.extend(
                [h1.clone(), h2.clone(), h3.clone()]
                    .into_iter()
                    .take(historical),
            );
            let vol = build_temporal_volume(&frames, &hyps()).unwrap();
            assert_eq!(vol.values().shape()[0], 4);
        }
    }

    #[test]
    fn temporal_volume_historical_block_is_mean_of_warps() {
        let cur = frame(7, RigidPose::identity());
        let mk = |seed: u64, tx: f64| FrameObservation {
            feature: random_feature(&[2, 4, 5], seed),
            pose: RigidPose::new(Matrix3::identity(), Vector3::new(tx, 0.0, 0.0)).unwrap(),
            timestamp: -1,
            ..cur.clone()
        };
        let frames = vec![cur.clone(), mk(8, 0.1), mk(9, -0.2), mk(10, 0.3)];
        let vol = build_temporal_volume(&frames, &hyps()).unwrap();
        // Oracle: mean the three warped volumes explicitly.
        let mut want = DenseArray::zeros(&[2, 3, 4, 5]);
        for hist in &frames[1..] {
            let warped = warp_historical(hist, &cur, &hyps()).unwrap();
            for (slot, v) in want.data_mut().iter_mut().zip(warped.data()) {
                *slot += v / 3.0;
            }
        }
        for (got, w) in vol.historical_block().data().iter().zip(want.data()) {
            assert!((got - w).abs() < 1e-12);
        }
    }

    #[test]
    fn single_frame_is_argument_error() {
        let cur = frame(11, RigidPose::identity());
        assert!(matches!(
            build_temporal_volume(&[cur], &hyps()),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn cost_volume_identical_frames_hadamard_squares_reference() {
        let cur = frame(12, RigidPose::identity());
        let hist = FrameObservation { timestamp: -1, ..cur.clone() };
        let cost = build_cost_volume(&[cur.clone(), hist], &hyps(), MatchMode::Hadamard).unwrap();
        for c in 0..2 {
            for d in 0..3 {
                for y in 0..4 {
                    for x in 0..5 {
                        let f = cur.feature.values().get(&[c, y, x]);
                        assert!((cost.get(&[c, d, y, x]) - f * f).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn cost_volume_identical_frames_absdiff_is_zero() {
        let cur = frame(13, RigidPose::identity());
        let hist = FrameObservation { timestamp: -1, ..cur.clone() };
        let cost = build_cost_volume(&[cur, hist], &hyps(), MatchMode::AbsDiff).unwrap();
        assert!(cost.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cost_volume_absdiff_is_nonnegative() {
        let cur = frame(14, RigidPose::identity());
        let hist = FrameObservation {
            feature: random_feature(&[2, 4, 5], 15),
            pose: RigidPose::new(Matrix3::identity(), Vector3::new(0.15, -0.05, 0.0)).unwrap(),
            timestamp: -1,
            ..cur.clone()
        };
        let cost = build_cost_volume(&[cur, hist], &hyps(), MatchMode::AbsDiff).unwrap();
        assert!(cost.data().iter().all(|&v| v >= 0.0));
    }
}
