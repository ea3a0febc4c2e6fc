//! Cross-frame pattern affinity and affinity-based dynamic refinement.
//!
//! Current and historical temporal blocks are expanded into three context
//! groups by dilated 3D convolutions (dilations 1, 2, 4) followed by GELU
//! and group normalization. Per voxel and group, a mean-centered cosine
//! over the channel axis scores how well the two frames' patterns agree;
//! the scores gate a cascade of deformable sampling levels whose outputs
//! are concatenated and reduced back down by a 1x1x1 convolution.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::{dilated_conv3d, trilinear_sample, BorderPolicy, Conv3DKernel, DenseArray};
use crate::temporal::TemporalFeatureVolume;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

/// Dilation rates of the three context groups.
pub const GROUP_DILATIONS: [usize; 3] = [1, 2, 4];

/// Epsilon in the group-normalization variance denominator.
pub const GROUP_NORM_EPS: f64 = 1e-5;

/// Centered vectors with a norm below this carry no pattern evidence and
/// score zero affinity.
const AFFINITY_NORM_EPS: f64 = 1e-12;

/// Exact GELU, `0.5 x (1 + erf(x / sqrt(2)))`.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Number of normalization groups used for `channels`: 4 when divisible,
/// otherwise the largest divisor not exceeding 4.
pub fn group_norm_groups(channels: usize) -> usize {
    (1..=4.min(channels))
        .rev()
        .find(|g| channels % g == 0)
        .unwrap_or(1)
}

/// Group normalization over a `[C, D, H, W]` volume: per channel group,
/// subtract the mean and divide by `sqrt(var + eps)` computed over the
/// group's channels and all spatial positions. No affine parameters.
pub fn group_normalize(vol: &DenseArray, groups: usize, eps: f64) -> Result<DenseArray> {
    if vol.rank() != 4 {
        return Err(Error::Shape(format!(
            "group_normalize expects [C, D, H, W], got {:?}",
            vol.shape()
        )));
    }
    let c = vol.shape()[0];
    if groups == 0 || c % groups != 0 {
        return Err(Error::Argument(format!(
            "{groups} groups do not divide {c} channels"
        )));
    }
    let spatial = vol.len() / c;
    let per_group = (c / groups) * spatial;
    let mut out = vol.clone();
    let data = out.data_mut();
    for g in 0..groups {
        let span = &mut data[g * per_group..(g + 1) * per_group];
        let mean = span.iter().sum::<f64>() / per_group as f64;
        let var = span.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / per_group as f64;
        let denom = (var + eps).sqrt();
        for v in span.iter_mut() {
            *v = (*v - mean) / denom;
        }
    }
    Ok(out)
}

/// Seeded context kernels for the three dilation groups, shared between
/// the current and historical branches so matched content stays matched
/// after the transform. Never trained. Only the central depth plane of
/// each kernel carries weight: the depth axis enumerates hypotheses, and
/// mixing across hypotheses would smear the plane-sweep localization the
/// affinity is meant to resolve.
pub fn seeded_context_kernels(channels: usize, seed: u64) -> [Conv3DKernel; 3] {
    let mut rng = StdRng::seed_from_u64(seed);
    let scale = 1.0 / ((channels * 9) as f64).sqrt();
    let mut make = |dilation: usize| {
        let mut weights = DenseArray::zeros(&[channels, channels, 3, 3, 3]);
        for o in 0..channels {
            for i in 0..channels {
                for kh in 0..3 {
                    for kw in 0..3 {
                        weights.set(&[o, i, 1, kh, kw], rng.gen_range(-scale..scale));
                    }
                }
            }
        }
        Conv3DKernel::new(weights, dilation, None).expect("3x3x3 kernels are valid")
    };
    [make(1), make(2), make(4)]
}

/// Three context volumes of one frame block, one per dilation rate.
#[derive(Debug, Clone)]
pub struct GroupContext {
    groups: Vec<DenseArray>,
}

impl GroupContext {
    pub fn new(groups: Vec<DenseArray>) -> Result<Self> {
        if groups.len() != GROUP_DILATIONS.len() {
            return Err(Error::Shape(format!(
                "expected {} context groups, got {}",
                GROUP_DILATIONS.len(),
                groups.len()
            )));
        }
        Ok(GroupContext { groups })
    }

    pub fn group(&self, i: usize) -> &DenseArray {
        &self.groups[i]
    }

    pub fn groups(&self) -> &[DenseArray] {
        &self.groups
    }
}

/// Expand a `[C, D, H, W]` block into its three dilated context groups:
/// `GN(GELU(conv_i(vol)))` with dilation rates 1, 2 and 4. The three
/// groups all read the same input.
pub fn multigroup_context(vol: &DenseArray, kernels: &[Conv3DKernel; 3]) -> Result<GroupContext> {
    for (kernel, &want) in kernels.iter().zip(&GROUP_DILATIONS) {
        if kernel.dilation() != want {
            return Err(Error::Argument(format!(
                "context kernels must use dilations {GROUP_DILATIONS:?}, got {}",
                kernel.dilation()
            )));
        }
    }
    let mut groups = Vec::with_capacity(3);
    for kernel in kernels {
        let mut conv = dilated_conv3d(vol, kernel)?;
        for v in conv.data_mut() {
            *v = gelu(*v);
        }
        let gn = group_normalize(&conv, group_norm_groups(conv.shape()[0]), GROUP_NORM_EPS)?;
        groups.push(gn);
    }
    GroupContext::new(groups)
}

/// Per-group, per-voxel pattern relevance scores in `[-1, 1]`,
/// shape `[3, D, H, W]`.
#[derive(Debug, Clone)]
pub struct PatternAffinity {
    values: DenseArray,
}

impl PatternAffinity {
    pub fn new(values: DenseArray) -> Result<Self> {
        if values.rank() != 4 || values.shape()[0] != GROUP_DILATIONS.len() {
            return Err(Error::Shape(format!(
                "pattern affinity must be [3, D, H, W], got {:?}",
                values.shape()
            )));
        }
        if values
            .data()
            .iter()
            .any(|&v| v < -1.0 - 1e-9 || v > 1.0 + 1e-9)
        {
            return Err(Error::Argument(
                "affinity values must lie in [-1, 1] up to 1e-9".into(),
            ));
        }
        Ok(PatternAffinity { values })
    }

    /// Neutral affinity of one everywhere.
    pub fn uniform_one(d: usize, h: usize, w: usize) -> Self {
        PatternAffinity {
            values: DenseArray::filled(&[GROUP_DILATIONS.len(), d, h, w], 1.0),
        }
    }

    pub fn values(&self) -> &DenseArray {
        &self.values
    }

    /// One group's scores viewed as a single-channel volume `[1, D, H, W]`.
    pub fn group_volume(&self, group: usize) -> Result<DenseArray> {
        let s = self.values.shape();
        if group >= s[0] {
            return Err(Error::Argument(format!(
                "affinity group {group} out of range 0..{}",
                s[0]
            )));
        }
        let span = s[1] * s[2] * s[3];
        DenseArray::from_vec(
            &[1, s[1], s[2], s[3]],
            self.values.data()[group * span..(group + 1) * span].to_vec(),
        )
    }
}

/// Mean-centered cosine between the current and historical context of each
/// group, evaluated over the channel axis per voxel. Constant (zero
/// variance) vectors score zero. Groups stack on the leading axis.
pub fn pattern_affinity(cur: &GroupContext, his: &GroupContext) -> Result<PatternAffinity> {
    let s = cur.group(0).shape().to_vec();
    let (c, d, h, w) = (s[0], s[1], s[2], s[3]);
    for g in 0..GROUP_DILATIONS.len() {
        if cur.group(g).shape() != his.group(g).shape() || cur.group(g).shape() != s.as_slice() {
            return Err(Error::Shape(format!(
                "group {g} shapes disagree: {:?} vs {:?}",
                cur.group(g).shape(),
                his.group(g).shape()
            )));
        }
    }
    let span = d * h * w;
    let mut out = DenseArray::zeros(&[GROUP_DILATIONS.len(), d, h, w]);
    for g in 0..GROUP_DILATIONS.len() {
        let cg = cur.group(g).data();
        let hg = his.group(g).data();
        let dst = &mut out.data_mut()[g * span..(g + 1) * span];
        dst.par_iter_mut().enumerate().for_each(|(p, slot)| {
            let mut mean_c = 0.0;
            let mut mean_h = 0.0;
            for ci in 0..c {
                mean_c += cg[ci * span + p];
                mean_h += hg[ci * span + p];
            }
            mean_c /= c as f64;
            mean_h /= c as f64;
            let mut dot = 0.0;
            let mut nc = 0.0;
            let mut nh = 0.0;
            for ci in 0..c {
                let a = cg[ci * span + p] - mean_c;
                let b = hg[ci * span + p] - mean_h;
                dot += a * b;
                nc += a * a;
                nh += b * b;
            }
            let (nc, nh) = (nc.sqrt(), nh.sqrt());
            *slot = if nc < AFFINITY_NORM_EPS || nh < AFFINITY_NORM_EPS {
                0.0
            } else {
                dot / (nc * nh)
            };
        });
    }
    PatternAffinity::new(out)
}

/// One sampling tap of a deformable window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeformableTap {
    /// Integer window offset `[d, h, w]`.
    pub base: [i64; 3],
    /// Fractional offset `[d, h, w]`, at most one voxel per component.
    pub delta: [f64; 3],
    /// Spatial weight.
    pub weight: f64,
}

/// The tap window applied at every output voxel of one level.
#[derive(Debug, Clone, PartialEq)]
pub struct TapSet {
    taps: Vec<DeformableTap>,
}

impl TapSet {
    pub fn new(taps: Vec<DeformableTap>) -> Result<Self> {
        if taps.is_empty() {
            return Err(Error::Argument("tap set must not be empty".into()));
        }
        Ok(TapSet { taps })
    }

    /// Single central tap with weight one: sampling becomes the identity.
    pub fn identity() -> Self {
        TapSet {
            taps: vec![DeformableTap {
                base: [0, 0, 0],
                delta: [0.0, 0.0, 0.0],
                weight: 1.0,
            }],
        }
    }

    /// Full 3x3x3 window with zero-mean fractional offsets bounded by half
    /// a voxel per component and positive weights normalized to sum one.
    pub fn seeded(seed: u64) -> Self {
        let mut rng = StdRng::seed_from_u64(seed);
        let mut taps = Vec::with_capacity(27);
        for dz in -1i64..=1 {
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    taps.push(DeformableTap {
                        base: [dz, dy, dx],
                        delta: [
                            rng.gen_range(-0.5..0.5),
                            rng.gen_range(-0.5..0.5),
                            rng.gen_range(-0.5..0.5),
                        ],
                        weight: rng.gen_range(0.05..1.0),
                    });
                }
            }
        }
        let total: f64 = taps.iter().map(|t| t.weight).sum();
        for t in &mut taps {
            t.weight /= total;
        }
        TapSet { taps }
    }

    pub fn taps(&self) -> &[DeformableTap] {
        &self.taps
    }
}

/// The 1x1x1 convolution that reduces the concatenated level outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelReducer {
    /// `[out_ch, in_ch]`.
    weights: DenseArray,
}

impl ChannelReducer {
    pub fn new(weights: DenseArray) -> Result<Self> {
        if weights.rank() != 2 {
            return Err(Error::Shape(format!(
                "reducer weights must be [out, in], got {:?}",
                weights.shape()
            )));
        }
        Ok(ChannelReducer { weights })
    }

    /// Average the same channel across `levels` stacked blocks of
    /// `channels` each: with identity taps this reproduces the input.
    pub fn mean_over_levels(channels: usize, levels: usize) -> Self {
        let mut weights = DenseArray::zeros(&[channels, channels * levels]);
        for o in 0..channels {
            for l in 0..levels {
                weights.set(&[o, l * channels + o], 1.0 / levels as f64);
            }
        }
        ChannelReducer { weights }
    }

    /// Average over levels and over the two temporal blocks, mapping
    /// `levels * 2 * block_channels` inputs onto `block_channels` outputs
    /// while keeping channel semantics.
    pub fn block_mean(block_channels: usize, levels: usize) -> Self {
        let denom = (2 * levels) as f64;
        let mut weights = DenseArray::zeros(&[block_channels, levels * 2 * block_channels]);
        for o in 0..block_channels {
            for l in 0..levels {
                weights.set(&[o, l * 2 * block_channels + o], 1.0 / denom);
                weights.set(&[o, l * 2 * block_channels + block_channels + o], 1.0 / denom);
            }
        }
        ChannelReducer { weights }
    }

    pub fn seeded(out_ch: usize, in_ch: usize, seed: u64) -> Self {
        let mut rng = StdRng::seed_from_u64(seed);
        let scale = 1.0 / in_ch as f64;
        let data = (0..out_ch * in_ch)
            .map(|_| rng.gen_range(-scale..scale))
            .collect();
        ChannelReducer {
            weights: DenseArray::from_vec(&[out_ch, in_ch], data)
                .expect("generated weights are finite"),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn weights(&self) -> &DenseArray {
        &self.weights
    }

    /// Apply to a `[C_in, D, H, W]` volume.
    pub fn apply(&self, vol: &DenseArray) -> Result<DenseArray> {
        if vol.rank() != 4 || vol.shape()[0] != self.in_channels() {
            return Err(Error::Shape(format!(
                "reducer expects {} input channels, got {:?}",
                self.in_channels(),
                vol.shape()
            )));
        }
        let (ci, d, h, w) = (
            vol.shape()[0],
            vol.shape()[1],
            vol.shape()[2],
            vol.shape()[3],
        );
        let span = d * h * w;
        let co = self.out_channels();
        let mut out = DenseArray::zeros(&[co, d, h, w]);
        let wdat = self.weights.data();
        let vdat = vol.data();
        out.data_mut()
            .par_chunks_mut(span)
            .enumerate()
            .for_each(|(o, dst)| {
                for i in 0..ci {
                    let wv = wdat[o * ci + i];
                    if wv == 0.0 {
                        continue;
                    }
                    for (p, slot) in dst.iter_mut().enumerate() {
                        *slot += wv * vdat[i * span + p];
                    }
                }
            });
        Ok(out)
    }
}

/// Whether refinement levels chain or all read the raw temporal volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CascadeMode {
    /// Level i consumes level i-1's output (default).
    Cascade,
    /// Every level consumes the temporal volume directly.
    Parallel,
}

/// Parameters of the three-level refinement block.
#[derive(Debug, Clone)]
pub struct RefineConfig {
    pub mode: CascadeMode,
    pub tap_sets: [TapSet; 3],
    pub reducer: ChannelReducer,
}

impl RefineConfig {
    /// Identity cascade: single central taps and a level-mean reducer;
    /// with affinity one it reproduces its input.
    pub fn identity(channels: usize) -> Self {
        RefineConfig {
            mode: CascadeMode::Cascade,
            tap_sets: [TapSet::identity(), TapSet::identity(), TapSet::identity()],
            reducer: ChannelReducer::mean_over_levels(channels, 3),
        }
    }

    /// Seeded taps per level plus a block-mean reducer mapping the
    /// concatenated levels onto `block_channels` outputs.
    pub fn seeded(block_channels: usize, seed: u64) -> Self {
        RefineConfig {
            mode: CascadeMode::Cascade,
            tap_sets: [
                TapSet::seeded(seed),
                TapSet::seeded(seed.wrapping_add(1)),
                TapSet::seeded(seed.wrapping_add(2)),
            ],
            reducer: ChannelReducer::block_mean(block_channels, 3),
        }
    }
}

/// Refined temporal volume `[C', D, H, W]`.
#[derive(Debug, Clone)]
pub struct RefinedTemporalVolume {
    values: DenseArray,
}

impl RefinedTemporalVolume {
    pub fn new(values: DenseArray) -> Result<Self> {
        if values.rank() != 4 {
            return Err(Error::Shape(format!(
                "refined volume must be [C', D, H, W], got {:?}",
                values.shape()
            )));
        }
        Ok(RefinedTemporalVolume { values })
    }

    pub fn values(&self) -> &DenseArray {
        &self.values
    }

    pub fn into_values(self) -> DenseArray {
        self.values
    }
}

/// Affinity-gated deformable sampling of one level:
/// `out(p) = sum_k w_k * vol(p + p_k + dp_k) * a_k`, where `a_k` reads the
/// level's affinity group at the same displaced location. Out-of-bounds
/// taps contribute zero.
pub fn affinity_deformable_sample(
    vol: &DenseArray,
    taps: &TapSet,
    aff: &PatternAffinity,
    level: usize,
) -> Result<DenseArray> {
    if vol.rank() != 4 {
        return Err(Error::Shape(format!(
            "deformable sampling expects [C, D, H, W], got {:?}",
            vol.shape()
        )));
    }
    if !(1..=GROUP_DILATIONS.len()).contains(&level) {
        return Err(Error::Argument(format!(
            "level must be 1..={}, got {level}",
            GROUP_DILATIONS.len()
        )));
    }
    let (c, d, h, w) = (
        vol.shape()[0],
        vol.shape()[1],
        vol.shape()[2],
        vol.shape()[3],
    );
    if aff.values().shape()[1..] != vol.shape()[1..] {
        return Err(Error::Shape(format!(
            "affinity {:?} and volume {:?} disagree on D, H, W",
            aff.values().shape(),
            vol.shape()
        )));
    }
    let gslice = aff.group_volume(level - 1)?;
    let plane = h * w;
    let mut out = DenseArray::zeros(&[c, d, h, w]);

    let slices: Vec<Vec<f64>> = (0..d)
        .into_par_iter()
        .map(|zd| {
            let mut slice = vec![0.0; c * plane];
            for y in 0..h {
                for x in 0..w {
                    for tap in taps.taps() {
                        let sz = zd as f64 + tap.base[0] as f64 + tap.delta[0];
                        let sy = y as f64 + tap.base[1] as f64 + tap.delta[1];
                        let sx = x as f64 + tap.base[2] as f64 + tap.delta[2];
                        let gate = trilinear_sample(&gslice, sx, sy, sz, BorderPolicy::Zero)
                            .expect("affinity slice rank checked")[0];
                        if gate == 0.0 || tap.weight == 0.0 {
                            continue;
                        }
                        let sample = trilinear_sample(vol, sx, sy, sz, BorderPolicy::Zero)
                            .expect("volume rank checked");
                        let factor = tap.weight * gate;
                        for (ci, v) in sample.into_iter().enumerate() {
                            slice[ci * plane + y * w + x] += factor * v;
                        }
                    }
                }
            }
            slice
        })
        .collect();
    let dst = out.data_mut();
    for (zd, slice) in slices.into_iter().enumerate() {
        for ci in 0..c {
            dst[(ci * d + zd) * plane..(ci * d + zd + 1) * plane]
                .copy_from_slice(&slice[ci * plane..(ci + 1) * plane]);
        }
    }
    Ok(out)
}

/// Three-level refinement: level 1 samples the temporal volume, levels 2
/// and 3 chain on the previous output (or all read the input in parallel
/// mode); the concatenated level outputs are reduced by the 1x1x1
/// convolution.
pub fn multilevel_refine(
    vtem: &TemporalFeatureVolume,
    aff: &PatternAffinity,
    config: &RefineConfig,
) -> Result<RefinedTemporalVolume> {
    let input = vtem.values();
    let l1 = affinity_deformable_sample(input, &config.tap_sets[0], aff, 1)?;
    let l2_in = match config.mode {
        CascadeMode::Cascade => &l1,
        CascadeMode::Parallel => input,
    };
    let l2 = affinity_deformable_sample(l2_in, &config.tap_sets[1], aff, 2)?;
    let l3_in = match config.mode {
        CascadeMode::Cascade => &l2,
        CascadeMode::Parallel => input,
    };
    let l3 = affinity_deformable_sample(l3_in, &config.tap_sets[2], aff, 3)?;

    let s = input.shape();
    let (c, d, h, w) = (s[0], s[1], s[2], s[3]);
    let mut concat = DenseArray::zeros(&[3 * c, d, h, w]);
    let span = c * d * h * w;
    concat.data_mut()[..span].copy_from_slice(l1.data());
    concat.data_mut()[span..2 * span].copy_from_slice(l2.data());
    concat.data_mut()[2 * span..].copy_from_slice(l3.data());
    RefinedTemporalVolume::new(config.reducer.apply(&concat)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_volume(shape: &[usize], seed: u64) -> DenseArray {
        let mut rng = StdRng::seed_from_u64(seed);
        let data = (0..shape.iter().product::<usize>())
            .map(|_| rng.gen_range(-2.0..2.0))
            .collect();
        DenseArray::from_vec(shape, data).unwrap()
    }

    fn context_kernels(channels: usize, seed: u64) -> [Conv3DKernel; 3] {
        let mk = |dilation: usize, s: u64| {
            let w = random_volume(&[channels, channels, 3, 3, 3], s);
            Conv3DKernel::new(w, dilation, None).unwrap()
        };
        [mk(1, seed), mk(2, seed + 1), mk(4, seed + 2)]
    }

    #[test]
    fn multigroup_zero_volume_gives_zero_contexts() {
        let vol = DenseArray::zeros(&[4, 3, 4, 4]);
        let ctx = multigroup_context(&vol, &context_kernels(4, 5)).unwrap();
        for g in 0..3 {
            assert!(ctx.group(g).data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn multigroup_identity_kernels_normalize_constant_channels() {
        let mut vol = DenseArray::zeros(&[4, 2, 3, 3]);
        for c in 0..4 {
            let span = 2 * 3 * 3;
            for p in 0..span {
                vol.data_mut()[c * span + p] = (c as f64) - 1.0;
            }
        }
        let kernels = [
            Conv3DKernel::identity(4, 3),
            {
                let mut w = DenseArray::zeros(&[4, 4, 3, 3, 3]);
                for c in 0..4 {
                    w.set(&[c, c, 1, 1, 1], 1.0);
                }
                Conv3DKernel::new(w, 2, None).unwrap()
            },
            {
                let mut w = DenseArray::zeros(&[4, 4, 3, 3, 3]);
                for c in 0..4 {
                    w.set(&[c, c, 1, 1, 1], 1.0);
                }
                Conv3DKernel::new(w, 4, None).unwrap()
            },
        ];
        let ctx = multigroup_context(&vol, &kernels).unwrap();
        for g in 0..3 {
            let data = ctx.group(g).data();
            let groups = group_norm_groups(4);
            let per = data.len() / groups;
            for gi in 0..groups {
                let span = &data[gi * per..(gi + 1) * per];
                let mean: f64 = span.iter().sum::<f64>() / per as f64;
                let var: f64 =
                    span.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / per as f64;
                assert!(mean.abs() < 1e-12);
                assert!(var <= 1.0 + 1e-12);
            }
        }
    }

    #[test]
    fn multigroup_matches_staged_naive_oracle() {
        let vol = random_volume(&[4, 3, 4, 5], 9);
        let kernels = context_kernels(4, 11);
        let ctx = multigroup_context(&vol, &kernels).unwrap();
        for (g, kernel) in kernels.iter().enumerate() {
            // Stage 1: naive convolution loop.
            let k = kernel.ksize() as i64;
            let r = k / 2;
            let dil = kernel.dilation() as i64;
            let (c, d, h, w) = (4usize, 3usize, 4usize, 5usize);
            let mut staged = DenseArray::zeros(&[c, d, h, w]);
            for o in 0..c {
                for zd in 0..d as i64 {
                    for y in 0..h as i64 {
                        for x in 0..w as i64 {
                            let mut acc = 0.0;
                            for ci in 0..c {
                                for kd in 0..k {
                                    for kh in 0..k {
                                        for kw in 0..k {
                                            let (z, yy, xx) = (
                                                zd + (kd - r) * dil,
                                                y + (kh - r) * dil,
                                                x + (kw - r) * dil,
                                            );
                                            if z < 0
                                                || yy < 0
                                                || xx < 0
                                                || z >= d as i64
                                                || yy >= h as i64
                                                || xx >= w as i64
                                            {
                                                continue;
                                            }
                                            acc += kernel.weights().get(&[
                                                o,
                                                ci,
                                                kd as usize,
                                                kh as usize,
                                                kw as usize,
                                            ]) * vol.get(&[
                                                ci,
                                                z as usize,
                                                yy as usize,
                                                xx as usize,
                                            ]);
                                        }
                                    }
                                }
                            }
                            staged.set(&[o, zd as usize, y as usize, x as usize], acc);
                        }
                    }
                }
            }
            // Stage 2: GELU via the erf formula directly.
            for v in staged.data_mut() {
                *v = 0.5 * *v * (1.0 + libm::erf(*v / 2.0_f64.sqrt()));
            }
            // Stage 3: group-norm formula.
            let groups = group_norm_groups(c);
            let per = staged.len() / groups;
            for gi in 0..groups {
                let start = gi * per;
                let mean: f64 =
                    staged.data()[start..start + per].iter().sum::<f64>() / per as f64;
                let var: f64 = staged.data()[start..start + per]
                    .iter()
                    .map(|v| (v - mean) * (v - mean))
                    .sum::<f64>()
                    / per as f64;
                let denom = (var + GROUP_NORM_EPS).sqrt();
                for v in &mut staged.data_mut()[start..start + per] {
                    *v = (*v - mean) / denom;
                }
            }
            for (got, want) in ctx.group(g).data().iter().zip(staged.data()) {
                assert!((got - want).abs() < 1e-9);
            }
        }
    }

    fn contexts_from_vectors(cur: &[f64], his: &[f64]) -> (GroupContext, GroupContext) {
        let c = cur.len();
        let mk = |v: &[f64]| {
            let arr = DenseArray::from_vec(&[c, 1, 1, 1], v.to_vec()).unwrap();
            GroupContext::new(vec![arr.clone(), arr.clone(), arr]).unwrap()
        };
        (mk(cur), mk(his))
    }

    #[test]
    fn affinity_identical_vectors_score_one() {
        let (a, b) = contexts_from_vectors(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]);
        let aff = pattern_affinity(&a, &b).unwrap();
        for g in 0..3 {
            assert!((aff.values().get(&[g, 0, 0, 0]) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn affinity_affine_cases() {
        let x = [1.0, 2.0, 3.0];
        let pos: Vec<f64> = x.iter().map(|v| 3.0 * v + 7.0).collect();
        let neg: Vec<f64> = x.iter().map(|v| -2.0 * v + 1.0).collect();
        let (a, b) = contexts_from_vectors(&x, &pos);
        assert!((pattern_affinity(&a, &b).unwrap().values().get(&[0, 0, 0, 0]) - 1.0).abs() < 1e-12);
        let (a, b) = contexts_from_vectors(&x, &neg);
        assert!((pattern_affinity(&a, &b).unwrap().values().get(&[0, 0, 0, 0]) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn affinity_direct_evaluation_case() {
        // centered [-1,0,1] . [1,-1,0] = -1, norms sqrt(2) each -> -0.5
        let (a, b) = contexts_from_vectors(&[1.0, 2.0, 3.0], &[3.0, 1.0, 2.0]);
        let aff = pattern_affinity(&a, &b).unwrap();
        assert!((aff.values().get(&[0, 0, 0, 0]) + 0.5).abs() < 1e-12);
    }

    #[test]
    fn affinity_zero_variance_scores_zero() {
        let (a, b) = contexts_from_vectors(&[2.0, 2.0, 2.0], &[1.0, 5.0, 9.0]);
        let aff = pattern_affinity(&a, &b).unwrap();
        assert_eq!(aff.values().get(&[0, 0, 0, 0]), 0.0);
    }

    proptest! {
        #[test]
        fn affinity_bounded_and_affine_invariant(
            seed in 0u64..64, scale in 0.1..5.0f64, shift in -4.0..4.0f64
        ) {
            let cur = random_volume(&[4, 2, 3, 3], seed);
            let his = random_volume(&[4, 2, 3, 3], seed + 1000);
            let mk = |v: &DenseArray| {
                GroupContext::new(vec![v.clone(), v.clone(), v.clone()]).unwrap()
            };
            let aff = pattern_affinity(&mk(&cur), &mk(&his)).unwrap();
            for &v in aff.values().data() {
                prop_assert!((-1.0 - 1e-9..=1.0 + 1e-9).contains(&v));
            }
            // positive per-voxel affine transform of one side leaves scores fixed
            let transformed = DenseArray::from_vec(
                &[4, 2, 3, 3],
                his.data().iter().map(|v| scale * v + shift).collect(),
            )
            .unwrap();
            let aff2 = pattern_affinity(&mk(&cur), &mk(&transformed)).unwrap();
            for (x, y) in aff.values().data().iter().zip(aff2.values().data()) {
                prop_assert!((x - y).abs() < 1e-9);
            }
            // negative scaling flips the sign
            let negated = DenseArray::from_vec(
                &[4, 2, 3, 3],
                his.data().iter().map(|v| -scale * v + shift).collect(),
            )
            .unwrap();
            let aff3 = pattern_affinity(&mk(&cur), &mk(&negated)).unwrap();
            for (x, y) in aff.values().data().iter().zip(aff3.values().data()) {
                prop_assert!((x + y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn deformable_identity_tap_reproduces_volume() {
        let vol = random_volume(&[2, 3, 4, 4], 21);
        let aff = PatternAffinity::uniform_one(3, 4, 4);
        let out = affinity_deformable_sample(&vol, &TapSet::identity(), &aff, 1).unwrap();
        assert_eq!(out.data(), vol.data());
    }

    #[test]
    fn deformable_zero_affinity_gives_zero_output() {
        let vol = random_volume(&[2, 3, 4, 4], 22);
        let aff =
            PatternAffinity::new(DenseArray::zeros(&[3, 3, 4, 4])).unwrap();
        let out = affinity_deformable_sample(&vol, &TapSet::seeded(7), &aff, 2).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn deformable_matches_naive_tap_sum_oracle() {
        let vol = random_volume(&[4, 4, 6, 6], 23);
        let aff_raw = random_volume(&[3, 4, 6, 6], 24);
        let aff_scaled = DenseArray::from_vec(
            &[3, 4, 6, 6],
            aff_raw.data().iter().map(|v| v / 2.5).collect(),
        )
        .unwrap();
        let aff = PatternAffinity::new(aff_scaled).unwrap();
        let taps = TapSet::seeded(31);
        for level in 1..=3usize {
            let got = affinity_deformable_sample(&vol, &taps, &aff, level).unwrap();
            let gslice = aff.group_volume(level - 1).unwrap();
            for c in 0..4 {
                for zd in 0..4usize {
                    for y in 0..6usize {
                        for x in 0..6usize {
                            let mut want = 0.0;
                            for tap in taps.taps() {
                                let sz = zd as f64 + tap.base[0] as f64 + tap.delta[0];
                                let sy = y as f64 + tap.base[1] as f64 + tap.delta[1];
                                let sx = x as f64 + tap.base[2] as f64 + tap.delta[2];
                                let a = trilinear_sample(&gslice, sx, sy, sz, BorderPolicy::Zero)
                                    .unwrap()[0];
                                let v =
                                    trilinear_sample(&vol, sx, sy, sz, BorderPolicy::Zero).unwrap()
                                        [c];
                                want += tap.weight * v * a;
                            }
                            let got_v = got.get(&[c, zd, y, x]);
                            assert!((got_v - want).abs() < 1e-9);
                        }
                    }
                }
            }
        }
    }

    proptest! {
        #[test]
        fn deformable_is_linear_in_affinity(scale in 0.05..1.0f64) {
            let vol = random_volume(&[2, 3, 4, 4], 41);
            let base = random_volume(&[3, 3, 4, 4], 42);
            let unit = DenseArray::from_vec(
                &[3, 3, 4, 4],
                base.data().iter().map(|v| v / 2.5).collect(),
            )
            .unwrap();
            let scaled = DenseArray::from_vec(
                &[3, 3, 4, 4],
                unit.data().iter().map(|v| v * scale).collect(),
            )
            .unwrap();
            let taps = TapSet::seeded(43);
            let a = affinity_deformable_sample(
                &vol, &taps, &PatternAffinity::new(unit).unwrap(), 1).unwrap();
            let b = affinity_deformable_sample(
                &vol, &taps, &PatternAffinity::new(scaled).unwrap(), 1).unwrap();
            for (x, y) in a.data().iter().zip(b.data()) {
                prop_assert!((x * scale - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn refine_identity_cascade_reproduces_input() {
        let vol = random_volume(&[4, 3, 4, 4], 51);
        let vtem = TemporalFeatureVolume::new(vol.clone(), 2).unwrap();
        let aff = PatternAffinity::uniform_one(3, 4, 4);
        let refined = multilevel_refine(&vtem, &aff, &RefineConfig::identity(4)).unwrap();
        for (got, want) in refined.values().data().iter().zip(vol.data()) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn refine_zero_affinity_propagates_zero() {
        let vol = random_volume(&[4, 3, 4, 4], 52);
        let vtem = TemporalFeatureVolume::new(vol, 2).unwrap();
        let aff = PatternAffinity::new(DenseArray::zeros(&[3, 3, 4, 4])).unwrap();
        let refined = multilevel_refine(&vtem, &aff, &RefineConfig::seeded(2, 9)).unwrap();
        assert!(refined.values().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn refine_is_bitwise_reproducible_for_same_seed() {
        let vol = random_volume(&[4, 3, 4, 4], 53);
        let vtem = TemporalFeatureVolume::new(vol, 2).unwrap();
        let aff_src = random_volume(&[3, 3, 4, 4], 54);
        let aff = PatternAffinity::new(
            DenseArray::from_vec(
                &[3, 3, 4, 4],
                aff_src.data().iter().map(|v| v / 2.5).collect(),
            )
            .unwrap(),
        )
        .unwrap();
        let a = multilevel_refine(&vtem, &aff, &RefineConfig::seeded(2, 77)).unwrap();
        let b = multilevel_refine(&vtem, &aff, &RefineConfig::seeded(2, 77)).unwrap();
        assert_eq!(a.values().data(), b.values().data());
        let c = multilevel_refine(&vtem, &aff, &RefineConfig::seeded(2, 78)).unwrap();
        assert_ne!(a.values().data(), c.values().data());
    }

    #[test]
    fn refine_parallel_mode_differs_from_cascade() {
        let vol = random_volume(&[4, 3, 4, 4], 55);
        let vtem = TemporalFeatureVolume::new(vol, 2).unwrap();
        let aff_src = random_volume(&[3, 3, 4, 4], 56);
        let aff = PatternAffinity::new(
            DenseArray::from_vec(
                &[3, 3, 4, 4],
                aff_src.data().iter().map(|v| v / 2.5).collect(),
            )
            .unwrap(),
        )
        .unwrap();
        let cascade = multilevel_refine(&vtem, &aff, &RefineConfig::seeded(2, 91)).unwrap();
        let mut par_cfg = RefineConfig::seeded(2, 91);
        par_cfg.mode = CascadeMode::Parallel;
        let parallel = multilevel_refine(&vtem, &aff, &par_cfg).unwrap();
        assert_ne!(cascade.values().data(), parallel.values().data());
    }
}
