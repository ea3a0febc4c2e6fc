//! Dense-array substrate shared by every stage of the pipeline.
//!
//! Conventions, stated once and relied on everywhere:
//! - storage is row-major `f64`;
//! - feature maps are `[channel, height, width]`;
//! - feature volumes are `[channel, depth, height, width]`;
//! - image coordinates are `(u, v)` with `u` along width (column) and `v`
//!   along height (row); integer coordinates land exactly on stored samples;
//! - volume coordinates are `(x, y, z)` with `x` along width, `y` along
//!   height and `z` along the depth-hypothesis axis.
//!
//! All operations are pure functions of immutable inputs. Internal
//! parallelism only ever partitions work per output cell, so results are
//! bitwise identical at any thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Row-major N-dimensional container for 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseArray {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl DenseArray {
    /// Zero-filled array. Extents must all be positive.
    pub fn zeros(shape: &[usize]) -> Self {
        assert!(
            !shape.is_empty() && shape.iter().all(|&e| e > 0),
            "extents must be positive, got {shape:?}"
        );
        DenseArray {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    /// Wrap existing data. Fails if the length does not match the shape or
    /// any value is non-finite.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if shape.is_empty() || shape.iter().any(|&e| e == 0) {
            return Err(Error::Shape(format!("extents must be positive: {shape:?}")));
        }
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "data length {} does not match shape {:?} (= {})",
                data.len(),
                shape,
                expected
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Argument(format!("non-finite value {bad} in array")));
        }
        Ok(DenseArray {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Constant-filled array.
    pub fn filled(shape: &[usize], value: f64) -> Self {
        let mut a = Self::zeros(shape);
        a.data.fill(value);
        a
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Row-major strides of the current shape.
    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.shape.len()];
        for axis in (0..self.shape.len().saturating_sub(1)).rev() {
            strides[axis] = strides[axis + 1] * self.shape[axis + 1];
        }
        strides
    }

    /// Flat offset of a multi-index.
    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut off = 0;
        let mut stride = 1;
        for axis in (0..self.shape.len()).rev() {
            debug_assert!(index[axis] < self.shape[axis]);
            off += index[axis] * stride;
            stride *= self.shape[axis];
        }
        off
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let off = self.offset(index);
        self.data[off] = value;
    }

    /// Reinterpret the same data under a new shape of equal volume.
    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() || shape.iter().any(|&e| e == 0) {
            return Err(Error::Shape(format!(
                "cannot reshape volume {} to {:?}",
                self.data.len(),
                shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// How samplers treat coordinates outside the stored extent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BorderPolicy {
    /// Missing neighbours contribute zero.
    Zero,
    /// Missing neighbours are clamped to the nearest edge sample.
    Clamp,
}

/// Numerically stable softmax along one axis; every slice along `axis`
/// sums to one.
pub fn softmax(values: &DenseArray, axis: usize) -> Result<DenseArray> {
    if axis >= values.rank() {
        return Err(Error::Shape(format!(
            "softmax axis {axis} out of range for rank {}",
            values.rank()
        )));
    }
    let shape = values.shape();
    let axis_len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();

    let mut out = values.clone();
    let data = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * axis_len * inner + i;
            let mut max = f64::NEG_INFINITY;
            for a in 0..axis_len {
                max = max.max(data[base + a * inner]);
            }
            let mut sum = 0.0;
            for a in 0..axis_len {
                let e = (data[base + a * inner] - max).exp();
                data[base + a * inner] = e;
                sum += e;
            }
            for a in 0..axis_len {
                data[base + a * inner] /= sum;
            }
        }
    }
    debug_assert!(out.is_all_finite());
    Ok(out)
}

#[inline]
fn axis_taps(coord: f64, extent: usize, border: BorderPolicy) -> [(Option<usize>, f64); 2] {
    let floor = coord.floor();
    let frac = coord - floor;
    let lo = floor as i64;
    let hi = lo + 1;
    let resolve = |i: i64| -> Option<usize> {
        if i >= 0 && (i as usize) < extent {
            Some(i as usize)
        } else {
            match border {
                BorderPolicy::Zero => None,
                BorderPolicy::Clamp => Some(i.clamp(0, extent as i64 - 1) as usize),
            }
        }
    };
    [(resolve(lo), 1.0 - frac), (resolve(hi), frac)]
}

/// Bilinear lookup into a `[C, H, W]` map at continuous `(u, v)`.
/// Returns one value per channel. Exact at integer coordinates.
pub fn bilinear_sample(map: &DenseArray, u: f64, v: f64, border: BorderPolicy) -> Result<Vec<f64>> {
    if map.rank() != 3 {
        return Err(Error::Shape(format!(
            "bilinear_sample expects [C, H, W], got {:?}",
            map.shape()
        )));
    }
    let (c_n, h, w) = (map.shape()[0], map.shape()[1], map.shape()[2]);
    let xs = axis_taps(u, w, border);
    let ys = axis_taps(v, h, border);
    let data = map.data();
    let mut out = vec![0.0; c_n];
    for (yi, wy) in ys {
        if wy == 0.0 {
            continue;
        }
        let Some(yi) = yi else { continue };
        for (xi, wx) in xs {
            if wx == 0.0 {
                continue;
            }
            let Some(xi) = xi else { continue };
            let weight = wy * wx;
            for (c, slot) in out.iter_mut().enumerate() {
                *slot += weight * data[(c * h + yi) * w + xi];
            }
        }
    }
    Ok(out)
}

/// Trilinear lookup into a `[C, D, H, W]` volume at continuous `(x, y, z)`
/// where `x` runs along width, `y` along height and `z` along depth.
pub fn trilinear_sample(
    vol: &DenseArray,
    x: f64,
    y: f64,
    z: f64,
    border: BorderPolicy,
) -> Result<Vec<f64>> {
    if vol.rank() != 4 {
        return Err(Error::Shape(format!(
            "trilinear_sample expects [C, D, H, W], got {:?}",
            vol.shape()
        )));
    }
    let (c_n, d, h, w) = (
        vol.shape()[0],
        vol.shape()[1],
        vol.shape()[2],
        vol.shape()[3],
    );
    let xs = axis_taps(x, w, border);
    let ys = axis_taps(y, h, border);
    let zs = axis_taps(z, d, border);
    let data = vol.data();
    let mut out = vec![0.0; c_n];
    for (zi, wz) in zs {
        if wz == 0.0 {
            continue;
        }
        let Some(zi) = zi else { continue };
        for (yi, wy) in ys {
            if wy == 0.0 {
                continue;
            }
            let Some(yi) = yi else { continue };
            for (xi, wx) in xs {
                if wx == 0.0 {
                    continue;
                }
                let Some(xi) = xi else { continue };
                let weight = wz * wy * wx;
                for (c, slot) in out.iter_mut().enumerate() {
                    *slot += weight * data[((c * d + zi) * h + yi) * w + xi];
                }
            }
        }
    }
    Ok(out)
}

/// Outcome of a deterministic scatter-add reduction.
#[derive(Debug, Clone)]
pub struct ScatterOutcome {
    /// Accumulated cells, shape `[size]`.
    pub out: DenseArray,
    /// Number of entries whose index fell outside `[0, size)`.
    pub dropped_count: usize,
    /// Signed sum of the dropped values.
    pub dropped_mass: f64,
}

/// Accumulate `values[j]` into `out[indices[j]]` strictly in input order.
/// Out-of-range indices are dropped and accounted for, never an error.
pub fn scatter_add(size: usize, indices: &[i64], values: &[f64]) -> Result<ScatterOutcome> {
    if indices.len() != values.len() {
        return Err(Error::Shape(format!(
            "scatter_add got {} indices but {} values",
            indices.len(),
            values.len()
        )));
    }
    let mut out = DenseArray::zeros(&[size.max(1)]);
    if size == 0 {
        return Err(Error::Argument("scatter_add size must be positive".into()));
    }
    let slots = out.data_mut();
    let mut dropped_count = 0;
    let mut dropped_mass = 0.0;
    for (&i, &v) in indices.iter().zip(values) {
        if i >= 0 && (i as usize) < size {
            slots[i as usize] += v;
        } else {
            dropped_count += 1;
            dropped_mass += v;
        }
    }
    Ok(ScatterOutcome {
        out,
        dropped_count,
        dropped_mass,
    })
}

/// Weights and dilation of a cubic 3D convolution.
#[derive(Debug, Clone)]
pub struct Conv3DKernel {
    weights: DenseArray,
    dilation: usize,
    bias: Option<Vec<f64>>,
}

impl Conv3DKernel {
    /// Build from `[out_ch, in_ch, k, k, k]` weights. `k` must be odd.
    pub fn new(weights: DenseArray, dilation: usize, bias: Option<Vec<f64>>) -> Result<Self> {
        if weights.rank() != 5 {
            return Err(Error::Shape(format!(
                "kernel weights must be [out, in, k, k, k], got {:?}",
                weights.shape()
            )));
        }
        let s = weights.shape();
        if !(s[2] == s[3] && s[3] == s[4]) {
            return Err(Error::Shape(format!("kernel support must be cubic: {s:?}")));
        }
        if s[2] % 2 == 0 {
            return Err(Error::Argument(format!(
                "kernel size must be odd for centered support, got {}",
                s[2]
            )));
        }
        if dilation == 0 {
            return Err(Error::Argument("dilation must be positive".into()));
        }
        if let Some(b) = &bias {
            if b.len() != s[0] {
                return Err(Error::Shape(format!(
                    "bias length {} does not match {} output channels",
                    b.len(),
                    s[0]
                )));
            }
        }
        Ok(Conv3DKernel {
            weights,
            dilation,
            bias,
        })
    }

    /// Pass-through kernel: center weight one on the matching channel pair.
    pub fn identity(channels: usize, ksize: usize) -> Self {
        let mut weights = DenseArray::zeros(&[channels, channels, ksize, ksize, ksize]);
        let r = ksize / 2;
        for c in 0..channels {
            weights.set(&[c, c, r, r, r], 1.0);
        }
        Conv3DKernel {
            weights,
            dilation: 1,
            bias: None,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn ksize(&self) -> usize {
        self.weights.shape()[2]
    }

    pub fn dilation(&self) -> usize {
        self.dilation
    }

    pub fn weights(&self) -> &DenseArray {
        &self.weights
    }

    pub fn bias(&self) -> Option<&[f64]> {
        self.bias.as_deref()
    }
}

/// Same-padded dilated 3D convolution over a `[C, D, H, W]` volume.
/// Output spatial extents equal the input's; taps outside read zero.
pub fn dilated_conv3d(vol: &DenseArray, kernel: &Conv3DKernel) -> Result<DenseArray> {
    if vol.rank() != 4 {
        return Err(Error::Shape(format!(
            "dilated_conv3d expects [C, D, H, W], got {:?}",
            vol.shape()
        )));
    }
    let (c_in, d, h, w) = (
        vol.shape()[0],
        vol.shape()[1],
        vol.shape()[2],
        vol.shape()[3],
    );
    if kernel.in_channels() != c_in {
        return Err(Error::Shape(format!(
            "kernel expects {} input channels, volume has {}",
            kernel.in_channels(),
            c_in
        )));
    }
    let c_out = kernel.out_channels();
    let k = kernel.ksize();
    let r = (k / 2) as i64;
    let dil = kernel.dilation() as i64;
    let wdat = kernel.weights().data();
    let vdat = vol.data();

    let mut out = DenseArray::zeros(&[c_out, d, h, w]);
    let plane = h * w;
    // One (out_channel, depth) plane per task: disjoint writes, deterministic.
    out.data_mut()
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(task, slab)| {
            let o = task / d;
            let zd = (task % d) as i64;
            let bias = kernel.bias().map_or(0.0, |b| b[o]);
            for y in 0..h as i64 {
                for x in 0..w as i64 {
                    let mut acc = bias;
                    for ci in 0..c_in {
                        let wbase = ((o * c_in + ci) * k) * k * k;
                        for kd in 0..k as i64 {
                            let z = zd + (kd - r) * dil;
                            if z < 0 || z >= d as i64 {
                                continue;
                            }
                            for kh in 0..k as i64 {
                                let yy = y + (kh - r) * dil;
                                if yy < 0 || yy >= h as i64 {
                                    continue;
                                }
                                for kw in 0..k as i64 {
                                    let xx = x + (kw - r) * dil;
                                    if xx < 0 || xx >= w as i64 {
                                        continue;
                                    }
                                    let wv = wdat[wbase
                                        + (kd as usize * k + kh as usize) * k
                                        + kw as usize];
                                    let vv = vdat[((ci * d + z as usize) * h + yy as usize) * w
                                        + xx as usize];
                                    acc += wv * vv;
                                }
                            }
                        }
                    }
                    slab[(y as usize) * w + x as usize] = acc;
                }
            }
        });
    debug_assert!(out.is_all_finite());
    Ok(out)
}
