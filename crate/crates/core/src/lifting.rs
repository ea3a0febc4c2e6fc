//! Confidence-aware lifting of image features into a frustum voxel volume.
//!
//! The depth branch scores every hypothesis plane per pixel; the winning
//! softmax probability becomes a per-pixel confidence. Queries built from
//! the context interact with global context vectors through linear
//! cross-attention, gated by that confidence. The interacted result is
//! normalized over the depth axis and the context is spread along each
//! pixel's ray by an outer product, so summing the volume over depth
//! always recovers the context map exactly.

use crate::error::{Error, Result};
use crate::numerics::{softmax, DenseArray};

/// Per-hypothesis depth cost logits, `[D, H, W]`.
#[derive(Debug, Clone)]
pub struct DepthFeature {
    values: DenseArray,
}

impl DepthFeature {
    pub fn new(values: DenseArray) -> Result<Self> {
        if values.rank() != 3 {
            return Err(Error::Shape(format!(
                "depth feature must be [D, H, W], got {:?}",
                values.shape()
            )));
        }
        Ok(DepthFeature { values })
    }

    pub fn values(&self) -> &DenseArray {
        &self.values
    }

    pub fn hypothesis_count(&self) -> usize {
        self.values.shape()[0]
    }
}

/// Image-plane context features, `[C, H, W]`.
#[derive(Debug, Clone)]
pub struct ContextFeature {
    values: DenseArray,
}

impl ContextFeature {
    pub fn new(values: DenseArray) -> Result<Self> {
        if values.rank() != 3 {
            return Err(Error::Shape(format!(
                "context feature must be [C, H, W], got {:?}",
                values.shape()
            )));
        }
        Ok(ContextFeature { values })
    }

    pub fn values(&self) -> &DenseArray {
        &self.values
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[2]
    }
}

/// Winner-takes-all depth confidence per pixel, `[H, W]`, in `[1/D, 1]`.
#[derive(Debug, Clone)]
pub struct ConfidenceMap {
    values: DenseArray,
}

impl ConfidenceMap {
    pub fn new(values: DenseArray) -> Result<Self> {
        if values.rank() != 2 {
            return Err(Error::Shape(format!(
                "confidence map must be [H, W], got {:?}",
                values.shape()
            )));
        }
        if values.data().iter().any(|&v| v <= 0.0 || v > 1.0 + 1e-12) {
            return Err(Error::Argument(
                "confidence values must lie in (0, 1]".into(),
            ));
        }
        Ok(ConfidenceMap { values })
    }

    /// Neutral confidence of one everywhere.
    pub fn uniform_one(height: usize, width: usize) -> Self {
        ConfidenceMap {
            values: DenseArray::filled(&[height, width], 1.0),
        }
    }

    pub fn values(&self) -> &DenseArray {
        &self.values
    }
}

/// Frustum voxel features, `[C, D, H, W]`.
#[derive(Debug, Clone)]
pub struct VoxelFeatureVolume {
    values: DenseArray,
}

impl VoxelFeatureVolume {
    pub fn new(values: DenseArray) -> Result<Self> {
        if values.rank() != 4 {
            return Err(Error::Shape(format!(
                "voxel feature volume must be [C, D, H, W], got {:?}",
                values.shape()
            )));
        }
        Ok(VoxelFeatureVolume { values })
    }

    pub fn values(&self) -> &DenseArray {
        &self.values
    }

    pub fn into_values(self) -> DenseArray {
        self.values
    }
}

/// Softmax over the hypothesis axis followed by winner-takes-all: the
/// maximum probability per pixel. Output lies in `[1/D, 1]`, hitting the
/// lower bound exactly when a pixel's logits are uniform.
pub fn depth_confidence(fd: &DepthFeature) -> Result<ConfidenceMap> {
    let probs = softmax(fd.values(), 0)?;
    let (d, h, w) = (probs.shape()[0], probs.shape()[1], probs.shape()[2]);
    let mut out = DenseArray::zeros(&[h, w]);
    let plane = h * w;
    for p in 0..plane {
        let mut best = f64::NEG_INFINITY;
        for j in 0..d {
            best = best.max(probs.data()[j * plane + p]);
        }
        out.data_mut()[p] = best;
    }
    ConfidenceMap::new(out)
}

/// Linear cross-attention with confidence gating.
///
/// `out = conf ⊙ φ_q(Q) (φ_k(K)^T V)` where `φ_q` is a softmax over each
/// query row, `φ_k` a softmax over each key column (across tokens), and
/// the per-query confidence scales that query's output row. Cost is
/// linear in the token counts.
pub fn linear_cross_attention(
    qd: &DenseArray,
    kc: &DenseArray,
    vc: &DenseArray,
    conf: &[f64],
) -> Result<DenseArray> {
    if qd.rank() != 2 || kc.rank() != 2 || vc.rank() != 2 {
        return Err(Error::Shape("attention inputs must be rank 2".into()));
    }
    let (nq, c) = (qd.shape()[0], qd.shape()[1]);
    let (nk, ck) = (kc.shape()[0], kc.shape()[1]);
    if ck != c || vc.shape() != [nk, c] {
        return Err(Error::Shape(format!(
            "channel extents disagree: Q {:?}, K {:?}, V {:?}",
            qd.shape(),
            kc.shape(),
            vc.shape()
        )));
    }
    if conf.len() != nq {
        return Err(Error::Shape(format!(
            "confidence length {} does not match {} queries",
            conf.len(),
            nq
        )));
    }
    if conf.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
        return Err(Error::Argument(
            "confidence entries must be positive and finite".into(),
        ));
    }

    let key_sm = softmax(kc, 0)?; // per channel, across tokens
    let query_sm = softmax(qd, 1)?; // per query row, across channels

    // Global contextual vectors G[c1][c2] = sum_k key_sm[k][c1] * V[k][c2].
    let mut global = vec![0.0; c * c];
    for k in 0..nk {
        for c1 in 0..c {
            let kw = key_sm.data()[k * c + c1];
            if kw == 0.0 {
                continue;
            }
            for c2 in 0..c {
                global[c1 * c + c2] += kw * vc.data()[k * c + c2];
            }
        }
    }

    let mut out = DenseArray::zeros(&[nq, c]);
    let out_data = out.data_mut();
    for q in 0..nq {
        for c1 in 0..c {
            let qw = query_sm.data()[q * c + c1];
            if qw == 0.0 {
                continue;
            }
            for c2 in 0..c {
                out_data[q * c + c2] += qw * global[c1 * c + c2];
            }
        }
        for c2 in 0..c {
            out_data[q * c + c2] *= conf[q];
        }
    }
    Ok(out)
}

/// Result of lifting: the frustum volume plus the per-pixel depth
/// distribution it was built from (needed by the depth loss).
#[derive(Debug, Clone)]
pub struct LiftOutcome {
    pub volume: VoxelFeatureVolume,
    /// `[D, H, W]`; sums to one over the depth axis at every pixel.
    pub distribution: DenseArray,
}

/// Outer-product lifting from an explicit per-pixel depth distribution:
/// `V[c, d, h, w] = fc[c, h, w] * dist[d, h, w]`.
pub fn lift_distribution(fc: &ContextFeature, dist: &DenseArray) -> Result<VoxelFeatureVolume> {
    if dist.rank() != 3 {
        return Err(Error::Shape(format!(
            "distribution must be [D, H, W], got {:?}",
            dist.shape()
        )));
    }
    let (c_n, h, w) = (fc.channels(), fc.height(), fc.width());
    let d_n = dist.shape()[0];
    if dist.shape()[1] != h || dist.shape()[2] != w {
        return Err(Error::Shape(format!(
            "distribution extent {:?} does not match context {}x{}",
            dist.shape(),
            h,
            w
        )));
    }
    let plane = h * w;
    let mut out = DenseArray::zeros(&[c_n, d_n, h, w]);
    let out_data = out.data_mut();
    for c in 0..c_n {
        for d in 0..d_n {
            let base = (c * d_n + d) * plane;
            for p in 0..plane {
                out_data[base + p] =
                    fc.values().data()[c * plane + p] * dist.data()[d * plane + p];
            }
        }
    }
    VoxelFeatureVolume::new(out)
}

/// Plain lifting without confidence interaction: the depth logits are
/// normalized over the hypothesis axis and spread by outer product.
pub fn lift_plain(fc: &ContextFeature, fd: &DepthFeature) -> Result<LiftOutcome> {
    check_pixel_extents(fc, fd)?;
    let dist = softmax(fd.values(), 0)?;
    let volume = lift_distribution(fc, &dist)?;
    Ok(LiftOutcome {
        volume,
        distribution: dist,
    })
}

fn check_pixel_extents(fc: &ContextFeature, fd: &DepthFeature) -> Result<()> {
    if fd.values().shape()[1] != fc.height() || fd.values().shape()[2] != fc.width() {
        return Err(Error::Shape(format!(
            "depth feature {:?} and context {:?} disagree on image extents",
            fd.values().shape(),
            fc.values().shape()
        )));
    }
    Ok(())
}

/// Confidence-aware lifting.
///
/// Context tokens act as keys and values; each pixel contributes one query
/// per hypothesis plane, and its confidence gates all of that pixel's
/// query rows. The interacted feature fuses the confidence-scaled depth
/// logit of each (pixel, hypothesis) token with the channel mean of its
/// attention row, is normalized over the depth axis, and drives the outer
/// product with the context. Adding a constant to every depth logit
/// leaves the distribution unchanged; sharper confidence sharpens it.
pub fn lift_to_voxel_volume(
    fc: &ContextFeature,
    fd: &DepthFeature,
    conf: &ConfidenceMap,
) -> Result<LiftOutcome> {
    check_pixel_extents(fc, fd)?;
    let (c_n, h, w) = (fc.channels(), fc.height(), fc.width());
    let d_n = fd.hypothesis_count();
    let plane = h * w;
    if conf.values().shape() != [h, w] {
        return Err(Error::Shape(format!(
            "confidence extent {:?} does not match image {}x{}",
            conf.values().shape(),
            h,
            w
        )));
    }

    // Keys/values: one token per pixel, channels last.
    let mut kv = DenseArray::zeros(&[plane, c_n]);
    for p in 0..plane {
        for c in 0..c_n {
            kv.data_mut()[p * c_n + c] = fc.values().data()[c * plane + p];
        }
    }
    // Queries: one token per (hypothesis, pixel), carrying the pixel's
    // raw context row; confidence broadcasts over a pixel's D tokens.
    let nq = d_n * plane;
    let mut queries = DenseArray::zeros(&[nq, c_n]);
    let mut conf_per_query = vec![0.0; nq];
    for d in 0..d_n {
        for p in 0..plane {
            let row = d * plane + p;
            conf_per_query[row] = conf.values().data()[p];
            queries.data_mut()[row * c_n..(row + 1) * c_n]
                .copy_from_slice(&kv.data()[p * c_n..(p + 1) * c_n]);
        }
    }

    let interacted = linear_cross_attention(&queries, &kv, &kv, &conf_per_query)?;

    // Fuse with the confidence-scaled depth logits and normalize over D.
    let mut logits = DenseArray::zeros(&[d_n, h, w]);
    for d in 0..d_n {
        for p in 0..plane {
            let row = d * plane + p;
            let mean = interacted.data()[row * c_n..(row + 1) * c_n]
                .iter()
                .sum::<f64>()
                / c_n as f64;
            logits.data_mut()[d * plane + p] =
                conf.values().data()[p] * fd.values().data()[d * plane + p] + mean;
        }
    }
    let dist = softmax(&logits, 0)?;
    let volume = lift_distribution(fc, &dist)?;
    Ok(LiftOutcome {
        volume,
        distribution: dist,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_array(shape: &[usize], seed: u64, range: std::ops::Range<f64>) -> DenseArray {
        let mut rng = StdRng::seed_from_u64(seed);
        let data = (0..shape.iter().product::<usize>())
            .map(|_| rng.gen_range(range.clone()))
            .collect();
        DenseArray::from_vec(shape, data).unwrap()
    }

    #[test]
    fn confidence_uniform_logits_hit_lower_bound() {
        let fd = DepthFeature::new(DenseArray::filled(&[4, 2, 3], 1.7)).unwrap();
        let conf = depth_confidence(&fd).unwrap();
        for &v in conf.values().data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn confidence_analytic_softmax_case() {
        let fd = DepthFeature::new(
            DenseArray::from_vec(&[3, 1, 1], vec![2.0_f64.ln(), 0.0, 0.0]).unwrap(),
        )
        .unwrap();
        let conf = depth_confidence(&fd).unwrap();
        assert!((conf.values().data()[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn confidence_matches_naive_per_pixel_loop() {
        let fd = DepthFeature::new(random_array(&[5, 3, 4], 77, -4.0..4.0)).unwrap();
        let conf = depth_confidence(&fd).unwrap();
        let plane = 12;
        for p in 0..plane {
            let logits: Vec<f64> = (0..5).map(|d| fd.values().data()[d * plane + p]).collect();
            let sum: f64 = logits.iter().map(|x| x.exp()).sum();
            let want = logits.iter().map(|x| x.exp() / sum).fold(0.0, f64::max);
            assert!((conf.values().data()[p] - want).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn confidence_bounds_hold(seed in 0u64..200) {
            let d = 2 + (seed % 6) as usize;
            let fd = DepthFeature::new(random_array(&[d, 3, 3], seed, -6.0..6.0)).unwrap();
            let conf = depth_confidence(&fd).unwrap();
            for &v in conf.values().data() {
                prop_assert!(v >= 1.0 / d as f64 - 1e-12 && v <= 1.0 + 1e-12);
            }
        }

        #[test]
        fn confidence_shift_invariance(shift in -10.0..10.0f64) {
            let fd = DepthFeature::new(random_array(&[4, 2, 2], 5, -3.0..3.0)).unwrap();
            let shifted = DepthFeature::new(
                DenseArray::from_vec(
                    &[4, 2, 2],
                    fd.values().data().iter().map(|v| v + shift).collect(),
                )
                .unwrap(),
            )
            .unwrap();
            let a = depth_confidence(&fd).unwrap();
            let b = depth_confidence(&shifted).unwrap();
            for (x, y) in a.values().data().iter().zip(b.values().data()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }

    // Independent oracle: literal nested-loop evaluation of the attention
    // formula without any shared code.
    fn naive_attention(q: &DenseArray, k: &DenseArray, v: &DenseArray, conf: &[f64]) -> Vec<f64> {
        let (nq, c) = (q.shape()[0], q.shape()[1]);
        let nk = k.shape()[0];
        let mut out = vec![0.0; nq * c];
        // column softmax of K across tokens
        let mut ksm = vec![0.0; nk * c];
        for c1 in 0..c {
            let mut mx = f64::NEG_INFINITY;
            for t in 0..nk {
                mx = mx.max(k.get(&[t, c1]));
            }
            let mut sum = 0.0;
            for t in 0..nk {
                let e = (k.get(&[t, c1]) - mx).exp();
                ksm[t * c + c1] = e;
                sum += e;
            }
            for t in 0..nk {
                ksm[t * c + c1] /= sum;
            }
        }
        for qi in 0..nq {
            // row softmax of the query
            let mut mx = f64::NEG_INFINITY;
            for c1 in 0..c {
                mx = mx.max(q.get(&[qi, c1]));
            }
            let mut qsm = vec![0.0; c];
            let mut sum = 0.0;
            for c1 in 0..c {
                let e = (q.get(&[qi, c1]) - mx).exp();
                qsm[c1] = e;
                sum += e;
            }
            for w in qsm.iter_mut() {
                *w /= sum;
            }
            for c2 in 0..c {
                let mut acc = 0.0;
                for c1 in 0..c {
                    let mut g = 0.0;
                    for t in 0..nk {
                        g += ksm[t * c + c1] * v.get(&[t, c2]);
                    }
                    acc += qsm[c1] * g;
                }
                out[qi * c + c2] = conf[qi] * acc;
            }
        }
        out
    }

    #[test]
    fn attention_single_key_collapses_to_value_row() {
        let q = random_array(&[5, 3], 1, -2.0..2.0);
        let k = random_array(&[1, 3], 2, -2.0..2.0);
        let v = random_array(&[1, 3], 3, -2.0..2.0);
        let out = linear_cross_attention(&q, &k, &v, &[1.0; 5]).unwrap();
        for qi in 0..5 {
            for c in 0..3 {
                assert!((out.get(&[qi, c]) - v.get(&[0, c])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_confidence_scales_single_row() {
        let q = random_array(&[4, 3], 4, -2.0..2.0);
        let k = random_array(&[6, 3], 5, -2.0..2.0);
        let v = random_array(&[6, 3], 6, -2.0..2.0);
        let full = linear_cross_attention(&q, &k, &v, &[1.0; 4]).unwrap();
        let halved = linear_cross_attention(&q, &k, &v, &[1.0, 0.5, 1.0, 1.0]).unwrap();
        for c in 0..3 {
            assert!((halved.get(&[1, c]) - 0.5 * full.get(&[1, c])).abs() < 1e-15);
            assert_eq!(halved.get(&[0, c]), full.get(&[0, c]));
        }
    }

    #[test]
    fn attention_matches_naive_oracle() {
        let mut rng = StdRng::seed_from_u64(99);
        for case in 0..50 {
            let nq = rng.gen_range(1..=32);
            let nk = rng.gen_range(1..=32);
            let c = rng.gen_range(1..=8);
            let q = random_array(&[nq, c], 1000 + case, -3.0..3.0);
            let k = random_array(&[nk, c], 2000 + case, -3.0..3.0);
            let v = random_array(&[nk, c], 3000 + case, -3.0..3.0);
            let conf: Vec<f64> = (0..nq).map(|_| rng.gen_range(0.05..1.0)).collect();
            let got = linear_cross_attention(&q, &k, &v, &conf).unwrap();
            let want = naive_attention(&q, &k, &v, &conf);
            for (g, w) in got.data().iter().zip(&want) {
                assert!((g - w).abs() < 1e-9);
            }
        }
    }

    proptest! {
        #[test]
        fn attention_positively_homogeneous_in_confidence(scale in 0.05..1.0f64) {
            let q = random_array(&[6, 4], 11, -2.0..2.0);
            let k = random_array(&[5, 4], 12, -2.0..2.0);
            let v = random_array(&[5, 4], 13, -2.0..2.0);
            let conf = vec![1.0; 6];
            let scaled: Vec<f64> = conf.iter().map(|c| c * scale).collect();
            let a = linear_cross_attention(&q, &k, &v, &conf).unwrap();
            let b = linear_cross_attention(&q, &k, &v, &scaled).unwrap();
            for (x, y) in a.data().iter().zip(b.data()) {
                prop_assert!((x * scale - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_shape_mismatch_is_error() {
        let q = DenseArray::zeros(&[2, 3]);
        let k = DenseArray::zeros(&[2, 4]);
        let v = DenseArray::zeros(&[2, 4]);
        assert!(matches!(
            linear_cross_attention(&q, &k, &v, &[1.0, 1.0]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn one_hot_distribution_places_context_at_single_slice() {
        let fc = ContextFeature::new(random_array(&[3, 2, 2], 21, -2.0..2.0)).unwrap();
        let mut dist = DenseArray::zeros(&[4, 2, 2]);
        // every pixel fully committed to hypothesis 2
        for p in 0..4 {
            dist.data_mut()[2 * 4 + p] = 1.0;
        }
        let vol = lift_distribution(&fc, &dist).unwrap();
        for c in 0..3 {
            for p in 0..4 {
                let (h, w) = (p / 2, p % 2);
                for d in 0..4 {
                    let want = if d == 2 { fc.values().get(&[c, h, w]) } else { 0.0 };
                    assert_eq!(vol.values().get(&[c, d, h, w]), want);
                }
            }
        }
    }

    #[test]
    fn lifting_conserves_context_mass() {
        for seed in 0..10u64 {
            let fc = ContextFeature::new(random_array(&[4, 3, 5], seed, -3.0..3.0)).unwrap();
            let fd = DepthFeature::new(random_array(&[6, 3, 5], 50 + seed, -4.0..4.0)).unwrap();
            let conf = depth_confidence(&fd).unwrap();
            let lifted = lift_to_voxel_volume(&fc, &fd, &conf).unwrap();
            for c in 0..4 {
                for h in 0..3 {
                    for w in 0..5 {
                        let mut sum = 0.0;
                        for d in 0..6 {
                            sum += lifted.volume.values().get(&[c, d, h, w]);
                        }
                        let want = fc.values().get(&[c, h, w]);
                        assert!(
                            (sum - want).abs() < 1e-9,
                            "seed {seed} ({c},{h},{w}): {sum} vs {want}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn lifted_distribution_is_logit_shift_invariant() {
        let fc = ContextFeature::new(random_array(&[4, 3, 3], 61, -2.0..2.0)).unwrap();
        let fd = DepthFeature::new(random_array(&[5, 3, 3], 62, -3.0..3.0)).unwrap();
        let shifted = DepthFeature::new(
            DenseArray::from_vec(
                &[5, 3, 3],
                fd.values().data().iter().map(|v| v + 4.25).collect(),
            )
            .unwrap(),
        )
        .unwrap();
        let conf_a = depth_confidence(&fd).unwrap();
        let conf_b = depth_confidence(&shifted).unwrap();
        let a = lift_to_voxel_volume(&fc, &fd, &conf_a).unwrap();
        let b = lift_to_voxel_volume(&fc, &shifted, &conf_b).unwrap();
        for (x, y) in a.distribution.data().iter().zip(b.distribution.data()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn lifted_distribution_keeps_depth_argmax() {
        // Sharp synthetic logits: the winning hypothesis must survive the
        // confidence interaction at every pixel.
        let mut rng = StdRng::seed_from_u64(71);
        let (d_n, h, w) = (8, 4, 4);
        let mut fd = DenseArray::zeros(&[d_n, h, w]);
        let mut want = vec![0usize; h * w];
        for p in 0..h * w {
            let star = rng.gen_range(0..d_n);
            want[p] = star;
            for d in 0..d_n {
                let dist = (d as f64 - star as f64).abs();
                fd.data_mut()[d * h * w + p] = -dist * dist;
            }
        }
        let fd = DepthFeature::new(fd).unwrap();
        let fc = ContextFeature::new(random_array(&[4, h, w], 72, -2.0..2.0)).unwrap();
        let conf = depth_confidence(&fd).unwrap();
        let lifted = lift_to_voxel_volume(&fc, &fd, &conf).unwrap();
        for p in 0..h * w {
            let mut best = 0;
            let mut best_v = f64::NEG_INFINITY;
            for d in 0..d_n {
                let v = lifted.distribution.data()[d * h * w + p];
                if v > best_v {
                    best_v = v;
                    best = d;
                }
            }
            assert_eq!(best, want[p]);
        }
    }

    #[test]
    fn plain_lifting_matches_depth_softmax() {
        let fc = ContextFeature::new(random_array(&[2, 2, 2], 81, -1.0..1.0)).unwrap();
        let fd = DepthFeature::new(random_array(&[3, 2, 2], 82, -2.0..2.0)).unwrap();
        let plain = lift_plain(&fc, &fd).unwrap();
        let want = softmax(fd.values(), 0).unwrap();
        assert_eq!(plain.distribution.data(), want.data());
    }
}
