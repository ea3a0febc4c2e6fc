//! Global composition: splat frustum volumes into a unified world grid,
//! blend the temporal and geometric branches through a zero-initialized
//! per-channel gate, decode semantics, and evaluate losses and metrics.
//!
//! Grid convention, stated once: a grid volume is `[C, Hg, Wg, Zg]` with
//! grid axis 0 along world x, axis 1 along world y and axis 2 along world
//! z; `origin` is the world position of the minimum corner and voxels are
//! cubes of edge `voxel_size`. Labels use `0` for empty space and
//! `1..=N` for the semantic classes.

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::geometry::{backproject, DepthHypothesisSet, Intrinsics, RigidPose};
use crate::numerics::{scatter_add, softmax, DenseArray};

/// Extents, resolution and placement of the unified voxel grid.
#[derive(Debug, Clone, PartialEq)]
pub struct UnifiedGridSpec {
    /// `[Hg, Wg, Zg]` voxel counts along world x, y, z.
    pub extents: [usize; 3],
    /// Cubic voxel edge in meters.
    pub voxel_size: f64,
    /// World position of the minimum grid corner.
    pub origin: [f64; 3],
}

impl UnifiedGridSpec {
    pub fn new(extents: [usize; 3], voxel_size: f64, origin: [f64; 3]) -> Result<Self> {
        if extents.iter().any(|&e| e == 0) {
            return Err(Error::Argument(format!(
                "grid extents must be positive, got {extents:?}"
            )));
        }
        if voxel_size <= 0.0 {
            return Err(Error::Argument(format!(
                "voxel size must be positive, got {voxel_size}"
            )));
        }
        Ok(UnifiedGridSpec {
            extents,
            voxel_size,
            origin,
        })
    }

    pub fn voxel_count(&self) -> usize {
        self.extents.iter().product()
    }

    /// Flat index of a world point's cell, or `None` when outside.
    pub fn cell_of(&self, p: Vector3<f64>) -> Option<usize> {
        let mut idx = [0usize; 3];
        for axis in 0..3 {
            let rel = (p[axis] - self.origin[axis]) / self.voxel_size;
            if rel < 0.0 {
                return None;
            }
            let i = rel.floor() as usize;
            if i >= self.extents[axis] {
                return None;
            }
            idx[axis] = i;
        }
        Some(self.flat_index(idx))
    }

    pub fn flat_index(&self, idx: [usize; 3]) -> usize {
        (idx[0] * self.extents[1] + idx[1]) * self.extents[2] + idx[2]
    }

    /// World position of a voxel center.
    pub fn cell_center(&self, idx: [usize; 3]) -> Vector3<f64> {
        Vector3::new(
            self.origin[0] + (idx[0] as f64 + 0.5) * self.voxel_size,
            self.origin[1] + (idx[1] as f64 + 0.5) * self.voxel_size,
            self.origin[2] + (idx[2] as f64 + 0.5) * self.voxel_size,
        )
    }
}

/// Splatted grid features plus the mass that fell outside.
#[derive(Debug, Clone)]
pub struct PoolOutcome {
    /// `[C, Hg, Wg, Zg]`.
    pub values: DenseArray,
    /// Number of (pixel, hypothesis) samples that left the grid.
    pub dropped_count: usize,
    /// Signed dropped feature mass per channel.
    pub dropped_mass: Vec<f64>,
}

/// Splat a frustum volume `[C, D, H, W]` into the unified grid: every
/// (pixel, hypothesis) cell backprojects through `k`, moves to world via
/// the inverse of the world-to-camera `pose`, and scatter-adds its channel
/// vector into its voxel. Accumulation order is pixel-major then
/// hypothesis, so results are bitwise deterministic.
pub fn voxel_pool(
    vol: &DenseArray,
    hyps: &DepthHypothesisSet,
    k: &Intrinsics,
    pose: &RigidPose,
    grid: &UnifiedGridSpec,
) -> Result<PoolOutcome> {
    if vol.rank() != 4 {
        return Err(Error::Shape(format!(
            "voxel_pool expects [C, D, H, W], got {:?}",
            vol.shape()
        )));
    }
    let (c_n, d_n, h, w) = (
        vol.shape()[0],
        vol.shape()[1],
        vol.shape()[2],
        vol.shape()[3],
    );
    if d_n != hyps.count() {
        return Err(Error::Shape(format!(
            "volume has {d_n} hypothesis slices but the set has {}",
            hyps.count()
        )));
    }

    // Cell index per sample in pixel-major-then-hypothesis order.
    let sample_count = h * w * d_n;
    let mut indices = Vec::with_capacity(sample_count);
    for y in 0..h {
        for x in 0..w {
            for j in 0..d_n {
                let cam = backproject(k, (x as f64, y as f64), hyps.value(j))
                    .expect("hypothesis depths are positive");
                let world = pose.camera_to_world(cam);
                indices.push(grid.cell_of(world).map_or(-1i64, |i| i as i64));
            }
        }
    }
    let dropped_count = indices.iter().filter(|&&i| i < 0).count();

    let cells = grid.voxel_count();
    let mut values = DenseArray::zeros(&[c_n, grid.extents[0], grid.extents[1], grid.extents[2]]);
    let mut dropped_mass = Vec::with_capacity(c_n);
    let mut sample_values = vec![0.0; sample_count];
    for c in 0..c_n {
        let mut s = 0;
        for y in 0..h {
            for x in 0..w {
                for j in 0..d_n {
                    sample_values[s] = vol.data()[((c * d_n + j) * h + y) * w + x];
                    s += 1;
                }
            }
        }
        let scattered = scatter_add(cells, &indices, &sample_values)?;
        values.data_mut()[c * cells..(c + 1) * cells].copy_from_slice(scattered.out.data());
        dropped_mass.push(scattered.dropped_mass);
        debug_assert_eq!(scattered.dropped_count, dropped_count);
    }
    Ok(PoolOutcome {
        values,
        dropped_count,
        dropped_mass,
    })
}

/// Composed grid volume `[C, Hg, Wg, Zg]`.
#[derive(Debug, Clone)]
pub struct ComposedVolume {
    values: DenseArray,
}

impl ComposedVolume {
    pub fn new(values: DenseArray) -> Result<Self> {
        if values.rank() != 4 {
            return Err(Error::Shape(format!(
                "composed volume must be [C, Hg, Wg, Zg], got {:?}",
                values.shape()
            )));
        }
        Ok(ComposedVolume { values })
    }

    pub fn values(&self) -> &DenseArray {
        &self.values
    }
}

/// Per-channel gated blend: `out[c] = gate[c] * pooled[c] + vvox[c]`.
/// With the gate at its zero initialization the output equals the
/// geometric branch bit for bit, so composition starts as an identity.
pub fn zero_gated_compose(
    pooled: &DenseArray,
    vvox_grid: &DenseArray,
    gate: &[f64],
) -> Result<ComposedVolume> {
    if pooled.shape() != vvox_grid.shape() || pooled.rank() != 4 {
        return Err(Error::Shape(format!(
            "pooled {:?} and geometric {:?} volumes must share a rank-4 shape",
            pooled.shape(),
            vvox_grid.shape()
        )));
    }
    let c_n = pooled.shape()[0];
    if gate.len() != c_n {
        return Err(Error::Shape(format!(
            "gate has {} entries for {} channels",
            gate.len(),
            c_n
        )));
    }
    let span = pooled.len() / c_n;
    let mut out = vvox_grid.clone();
    for c in 0..c_n {
        let g = gate[c];
        if g == 0.0 {
            continue;
        }
        let dst = &mut out.data_mut()[c * span..(c + 1) * span];
        let src = &pooled.data()[c * span..(c + 1) * span];
        for (slot, v) in dst.iter_mut().zip(src) {
            *slot += g * v;
        }
    }
    ComposedVolume::new(out)
}

/// Class-labeled voxel grid; label 0 is empty space.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticVoxelGrid {
    extents: [usize; 3],
    labels: Vec<u16>,
    num_classes: usize,
}

impl SemanticVoxelGrid {
    pub fn empty(extents: [usize; 3], num_classes: usize) -> Self {
        SemanticVoxelGrid {
            extents,
            labels: vec![0; extents.iter().product()],
            num_classes,
        }
    }

    pub fn from_labels(extents: [usize; 3], labels: Vec<u16>, num_classes: usize) -> Result<Self> {
        if labels.len() != extents.iter().product::<usize>() {
            return Err(Error::Shape(format!(
                "{} labels do not fill extents {extents:?}",
                labels.len()
            )));
        }
        if labels.iter().any(|&l| l as usize > num_classes) {
            return Err(Error::Argument(format!(
                "labels must lie in 0..={num_classes}"
            )));
        }
        Ok(SemanticVoxelGrid {
            extents,
            labels,
            num_classes,
        })
    }

    pub fn extents(&self) -> [usize; 3] {
        self.extents
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [u16] {
        &mut self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn voxel_count(&self) -> usize {
        self.labels.len()
    }
}

/// Linear semantic head: per voxel, `logits = W * features` with `W` of
/// shape `[N+1, C]`; labels take the argmax with the lowest class index
/// winning ties (all-zero features therefore decode to empty space).
pub fn semantic_head(
    vcom: &ComposedVolume,
    class_weights: &DenseArray,
) -> Result<(DenseArray, SemanticVoxelGrid)> {
    if class_weights.rank() != 2 {
        return Err(Error::Shape(format!(
            "class weights must be [N+1, C], got {:?}",
            class_weights.shape()
        )));
    }
    let s = vcom.values().shape().to_vec();
    let (c_n, cells) = (s[0], s[1] * s[2] * s[3]);
    let n_plus_1 = class_weights.shape()[0];
    if class_weights.shape()[1] != c_n {
        return Err(Error::Shape(format!(
            "head expects {} feature channels, volume has {}",
            class_weights.shape()[1],
            c_n
        )));
    }
    if n_plus_1 < 2 {
        return Err(Error::Argument(
            "head needs at least the empty class and one semantic class".into(),
        ));
    }
    let mut logits = DenseArray::zeros(&[n_plus_1, s[1], s[2], s[3]]);
    let feat = vcom.values().data();
    for n in 0..n_plus_1 {
        let dst = &mut logits.data_mut()[n * cells..(n + 1) * cells];
        for c in 0..c_n {
            let wv = class_weights.data()[n * c_n + c];
            if wv == 0.0 {
                continue;
            }
            for (p, slot) in dst.iter_mut().enumerate() {
                *slot += wv * feat[c * cells + p];
            }
        }
    }
    let mut labels = vec![0u16; cells];
    for (p, label) in labels.iter_mut().enumerate() {
        let mut best = 0usize;
        let mut best_v = logits.data()[p];
        for n in 1..n_plus_1 {
            let v = logits.data()[n * cells + p];
            if v > best_v {
                best_v = v;
                best = n;
            }
        }
        *label = best as u16;
    }
    let grid = SemanticVoxelGrid::from_labels([s[1], s[2], s[3]], labels, n_plus_1 - 1)?;
    Ok((logits, grid))
}

/// Balancing coefficients of the training objective.
#[derive(Debug, Clone)]
pub struct LossWeights {
    pub lambda_ce: f64,
    /// Per-class weights for the weighting loss, length `N+1`.
    pub class_weights: Vec<f64>,
}

impl LossWeights {
    pub fn uniform(num_classes: usize, lambda_ce: f64) -> Result<Self> {
        if lambda_ce < 0.0 {
            return Err(Error::Argument(format!(
                "lambda_ce must be nonnegative, got {lambda_ce}"
            )));
        }
        Ok(LossWeights {
            lambda_ce,
            class_weights: vec![1.0; num_classes + 1],
        })
    }
}

/// Loss components: `total = l_depth + lambda_ce * l_ce`.
#[derive(Debug, Clone, Copy)]
pub struct LossBreakdown {
    pub total: f64,
    pub l_depth: f64,
    pub l_ce: f64,
}

const LOG_EPS: f64 = 1e-12;

fn safe_ln(x: f64) -> f64 {
    x.max(LOG_EPS).ln()
}

/// Forward evaluation of the objective.
///
/// `l_ce` is the class-weighted cross-entropy of the semantic logits over
/// non-ignored voxels (normalized by the summed weights); `l_depth` is the
/// binary cross-entropy of each supervised pixel's depth distribution
/// against its one-hot ground-truth hypothesis bin, averaged over
/// supervised pixels. Logarithms are clamped at 1e-12.
pub fn total_loss(
    logits: &DenseArray,
    gt: &SemanticVoxelGrid,
    depth_dist: &DenseArray,
    gt_depth_bins: &[Option<usize>],
    weights: &LossWeights,
    ignore: Option<&[bool]>,
) -> Result<LossBreakdown> {
    // -- semantic term --
    let s = logits.shape().to_vec();
    if s.len() != 4 {
        return Err(Error::Shape(format!(
            "logits must be [N+1, Hg, Wg, Zg], got {s:?}"
        )));
    }
    let cells: usize = s[1] * s[2] * s[3];
    let n_plus_1 = s[0];
    if gt.extents() != [s[1], s[2], s[3]] {
        return Err(Error::Shape(format!(
            "ground truth extents {:?} do not match logits {:?}",
            gt.extents(),
            &s[1..]
        )));
    }
    if n_plus_1 != gt.num_classes() + 1 {
        return Err(Error::Shape(format!(
            "logits carry {} classes, ground truth {}",
            n_plus_1,
            gt.num_classes() + 1
        )));
    }
    if weights.class_weights.len() != n_plus_1 {
        return Err(Error::Shape(format!(
            "need {} class weights, got {}",
            n_plus_1,
            weights.class_weights.len()
        )));
    }
    if let Some(mask) = ignore {
        if mask.len() != cells {
            return Err(Error::Shape(format!(
                "ignore mask has {} entries for {} voxels",
                mask.len(),
                cells
            )));
        }
    }

    let probs = softmax(logits, 0)?;
    let mut ce_sum = 0.0;
    let mut weight_sum = 0.0;
    for p in 0..cells {
        if ignore.is_some_and(|m| m[p]) {
            continue;
        }
        let y = gt.labels()[p] as usize;
        let wy = weights.class_weights[y];
        ce_sum += wy * -safe_ln(probs.data()[y * cells + p]);
        weight_sum += wy;
    }
    if weight_sum <= 0.0 {
        return Err(Error::UndefinedLoss(
            "no supervised voxels for the semantic term".into(),
        ));
    }
    let l_ce = ce_sum / weight_sum;

    // -- depth term --
    if depth_dist.rank() != 3 {
        return Err(Error::Shape(format!(
            "depth distribution must be [D, H, W], got {:?}",
            depth_dist.shape()
        )));
    }
    let d_n = depth_dist.shape()[0];
    let pixels = depth_dist.shape()[1] * depth_dist.shape()[2];
    if gt_depth_bins.len() != pixels {
        return Err(Error::Shape(format!(
            "{} depth bins for {} pixels",
            gt_depth_bins.len(),
            pixels
        )));
    }
    let mut depth_sum = 0.0;
    let mut supervised = 0usize;
    for (p, bin) in gt_depth_bins.iter().enumerate() {
        let Some(bin) = *bin else { continue };
        if bin >= d_n {
            return Err(Error::Argument(format!(
                "ground-truth bin {bin} out of range 0..{d_n}"
            )));
        }
        supervised += 1;
        for d in 0..d_n {
            let prob = depth_dist.data()[d * pixels + p].clamp(LOG_EPS, 1.0 - LOG_EPS);
            depth_sum += if d == bin {
                -safe_ln(prob)
            } else {
                -safe_ln(1.0 - prob)
            };
        }
    }
    if supervised == 0 {
        return Err(Error::UndefinedLoss(
            "no supervised pixels for the depth term".into(),
        ));
    }
    let l_depth = depth_sum / supervised as f64;

    Ok(LossBreakdown {
        total: l_depth + weights.lambda_ce * l_ce,
        l_depth,
        l_ce,
    })
}

/// Occupancy IoU, per-class IoU and their mean.
#[derive(Debug, Clone)]
pub struct EvalResult {
    /// Class-agnostic IoU over occupied voxels.
    pub iou: f64,
    /// Per semantic class 1..=N; `None` when absent from both grids.
    pub per_class_iou: Vec<Option<f64>>,
    /// Mean IoU over classes present in ground truth or prediction.
    pub miou: f64,
}

/// Compare a predicted grid against ground truth. Ignored voxels are
/// excluded everywhere. Classes absent from both grids do not enter the
/// mean; when no class is present at all the mean is vacuously one.
pub fn evaluate(
    pred: &SemanticVoxelGrid,
    gt: &SemanticVoxelGrid,
    ignore: Option<&[bool]>,
) -> Result<EvalResult> {
    if pred.extents() != gt.extents() {
        return Err(Error::Shape(format!(
            "prediction extents {:?} do not match ground truth {:?}",
            pred.extents(),
            gt.extents()
        )));
    }
    if pred.num_classes() != gt.num_classes() {
        return Err(Error::Shape(format!(
            "class counts disagree: {} vs {}",
            pred.num_classes(),
            gt.num_classes()
        )));
    }
    if let Some(mask) = ignore {
        if mask.len() != gt.voxel_count() {
            return Err(Error::Shape(format!(
                "ignore mask has {} entries for {} voxels",
                mask.len(),
                gt.voxel_count()
            )));
        }
    }
    let n = gt.num_classes();
    let mut occ_inter = 0usize;
    let mut occ_union = 0usize;
    let mut inter = vec![0usize; n + 1];
    let mut pred_count = vec![0usize; n + 1];
    let mut gt_count = vec![0usize; n + 1];
    for p in 0..gt.voxel_count() {
        if ignore.is_some_and(|m| m[p]) {
            continue;
        }
        let (a, b) = (pred.labels()[p] as usize, gt.labels()[p] as usize);
        if a != 0 || b != 0 {
            occ_union += 1;
            if a != 0 && b != 0 {
                occ_inter += 1;
            }
        }
        pred_count[a] += 1;
        gt_count[b] += 1;
        if a == b {
            inter[a] += 1;
        }
    }
    let iou = if occ_union == 0 {
        1.0
    } else {
        occ_inter as f64 / occ_union as f64
    };
    let mut per_class_iou = Vec::with_capacity(n);
    let mut sum = 0.0;
    let mut present = 0usize;
    for c in 1..=n {
        let union = pred_count[c] + gt_count[c] - inter[c];
        if union == 0 {
            per_class_iou.push(None);
        } else {
            let v = inter[c] as f64 / union as f64;
            per_class_iou.push(Some(v));
            sum += v;
            present += 1;
        }
    }
    let miou = if present == 0 { 1.0 } else { sum / present as f64 };
    Ok(EvalResult {
        iou,
        per_class_iou,
        miou,
    })
}
