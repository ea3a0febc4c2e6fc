//! Binary artifact formats, documented byte-exactly in `docs/FORMATS.md`.
//!
//! Voxel grids (`HISOPVOX`): 8-byte ASCII magic, three little-endian u32
//! extents, one dtype byte (0 = u16 labels, 1 = f64 reals), then the
//! row-major payload in little endian.
//!
//! Parameter files (`HISOPPAR`): 8-byte ASCII magic, u32 version, the
//! context kernels, the deformable tap sets and the channel reducer, all
//! counts u32 and all reals f64, little endian throughout.
//!
//! Heatmaps are binary PGM (P5), 8-bit, mapping scores in [-1, 1] onto
//! [0, 255] linearly.

use std::io::Write as _;
use std::path::Path;

use crate::alignment::{ChannelReducer, DeformableTap, PatternAffinity, TapSet};
use crate::compose::SemanticVoxelGrid;
use crate::error::{Error, Result};
use crate::numerics::{Conv3DKernel, DenseArray};

pub const VOXEL_MAGIC: &[u8; 8] = b"HISOPVOX";
pub const PARAM_MAGIC: &[u8; 8] = b"HISOPPAR";
pub const PARAM_VERSION: u32 = 1;

const DTYPE_LABELS: u8 = 0;
const DTYPE_REALS: u8 = 1;

/// Decoded voxel-grid payload.
#[derive(Debug, Clone, PartialEq)]
pub enum VoxelPayload {
    Labels(Vec<u16>),
    Reals(Vec<f64>),
}

/// Encode a label grid to its byte form.
pub fn encode_voxel_labels(grid: &SemanticVoxelGrid) -> Vec<u8> {
    let e = grid.extents();
    let mut out = Vec::with_capacity(21 + 2 * grid.voxel_count());
    out.extend_from_slice(VOXEL_MAGIC);
    for a in 0..3 {
        out.extend_from_slice(&(e[a] as u32).to_le_bytes());
    }
    out.push(DTYPE_LABELS);
    for &l in grid.labels() {
        out.extend_from_slice(&l.to_le_bytes());
    }
    out
}

/// Encode a real-valued grid volume `[Hg, Wg, Zg]`.
pub fn encode_voxel_reals(extents: [usize; 3], data: &[f64]) -> Result<Vec<u8>> {
    if data.len() != extents.iter().product::<usize>() {
        return Err(Error::Shape(format!(
            "{} values do not fill extents {extents:?}",
            data.len()
        )));
    }
    let mut out = Vec::with_capacity(21 + 8 * data.len());
    out.extend_from_slice(VOXEL_MAGIC);
    for e in extents {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    out.push(DTYPE_REALS);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format(format!(
                "truncated while reading {what} at offset {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn i32(&mut self, what: &str) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn done(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after payload",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

/// Decode a voxel-grid file. Rejects bad magic, truncation and trailing
/// garbage without returning any partial grid.
pub fn decode_voxel_grid(bytes: &[u8]) -> Result<([usize; 3], VoxelPayload)> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(8, "magic")? != VOXEL_MAGIC {
        return Err(Error::Format("bad voxel-grid magic".into()));
    }
    let extents = [
        cur.u32("extent 0")? as usize,
        cur.u32("extent 1")? as usize,
        cur.u32("extent 2")? as usize,
    ];
    let count: usize = extents.iter().product();
    if count == 0 {
        return Err(Error::Format(format!("zero extents {extents:?}")));
    }
    let dtype = cur.u8("dtype")?;
    let payload = match dtype {
        DTYPE_LABELS => {
            let mut labels = Vec::with_capacity(count);
            for i in 0..count {
                let b = cur.take(2, "label")?;
                let _ = i;
                labels.push(u16::from_le_bytes(b.try_into().unwrap()));
            }
            VoxelPayload::Labels(labels)
        }
        DTYPE_REALS => {
            let mut reals = Vec::with_capacity(count);
            for _ in 0..count {
                reals.push(cur.f64("real")?);
            }
            VoxelPayload::Reals(reals)
        }
        other => return Err(Error::Format(format!("unknown dtype byte {other}"))),
    };
    cur.done()?;
    Ok((extents, payload))
}

/// Write a label grid to disk; returns the byte count.
pub fn export_voxel_grid(grid: &SemanticVoxelGrid, path: &Path) -> Result<u64> {
    let bytes = encode_voxel_labels(grid);
    std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(bytes.len() as u64)
}

/// Read a label grid back; the class count is the largest label present.
pub fn load_voxel_grid(path: &Path) -> Result<SemanticVoxelGrid> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (extents, payload) = decode_voxel_grid(&bytes)?;
    match payload {
        VoxelPayload::Labels(labels) => {
            let n = labels.iter().copied().max().unwrap_or(0) as usize;
            SemanticVoxelGrid::from_labels(extents, labels, n.max(1))
        }
        VoxelPayload::Reals(_) => Err(Error::Format(
            "expected a label grid, found a real-valued grid".into(),
        )),
    }
}

/// The seeded pipeline parameters that can be persisted and reloaded.
#[derive(Debug, Clone)]
pub struct PipelineParams {
    /// Context kernels (dilations 1, 2, 4).
    pub kernels: Vec<Conv3DKernel>,
    /// Deformable tap windows, one per refinement level.
    pub tap_sets: Vec<TapSet>,
    /// Channel reducer of the refinement block.
    pub reducer: ChannelReducer,
}

/// Encode parameters to the documented byte layout.
pub fn encode_params(params: &PipelineParams) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(PARAM_MAGIC);
    out.extend_from_slice(&PARAM_VERSION.to_le_bytes());
    out.extend_from_slice(&(params.kernels.len() as u32).to_le_bytes());
    for k in &params.kernels {
        out.extend_from_slice(&(k.out_channels() as u32).to_le_bytes());
        out.extend_from_slice(&(k.in_channels() as u32).to_le_bytes());
        out.extend_from_slice(&(k.ksize() as u32).to_le_bytes());
        out.extend_from_slice(&(k.dilation() as u32).to_le_bytes());
        out.push(u8::from(k.bias().is_some()));
        for v in k.weights().data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        if let Some(bias) = k.bias() {
            for v in bias {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out.extend_from_slice(&(params.tap_sets.len() as u32).to_le_bytes());
    for set in &params.tap_sets {
        out.extend_from_slice(&(set.taps().len() as u32).to_le_bytes());
        for tap in set.taps() {
            for a in 0..3 {
                out.extend_from_slice(&(tap.base[a] as i32).to_le_bytes());
            }
            for a in 0..3 {
                out.extend_from_slice(&tap.delta[a].to_le_bytes());
            }
            out.extend_from_slice(&tap.weight.to_le_bytes());
        }
    }
    out.extend_from_slice(&(params.reducer.out_channels() as u32).to_le_bytes());
    out.extend_from_slice(&(params.reducer.in_channels() as u32).to_le_bytes());
    for v in params.reducer.weights().data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Decode a parameter file; any inconsistency is a format error.
pub fn decode_params(bytes: &[u8]) -> Result<PipelineParams> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(8, "magic")? != PARAM_MAGIC {
        return Err(Error::Format("bad parameter-file magic".into()));
    }
    let version = cur.u32("version")?;
    if version != PARAM_VERSION {
        return Err(Error::Format(format!(
            "unsupported parameter version {version}"
        )));
    }
    let kernel_count = cur.u32("kernel count")? as usize;
    let mut kernels = Vec::with_capacity(kernel_count);
    for _ in 0..kernel_count {
        let out_ch = cur.u32("out channels")? as usize;
        let in_ch = cur.u32("in channels")? as usize;
        let ksize = cur.u32("kernel size")? as usize;
        let dilation = cur.u32("dilation")? as usize;
        let has_bias = cur.u8("bias flag")? != 0;
        let n = out_ch * in_ch * ksize * ksize * ksize;
        let mut weights = Vec::with_capacity(n);
        for _ in 0..n {
            weights.push(cur.f64("kernel weight")?);
        }
        let weights = DenseArray::from_vec(&[out_ch, in_ch, ksize, ksize, ksize], weights)
            .map_err(|e| Error::Format(format!("kernel weights: {e}")))?;
        let bias = if has_bias {
            let mut b = Vec::with_capacity(out_ch);
            for _ in 0..out_ch {
                b.push(cur.f64("bias")?);
            }
            Some(b)
        } else {
            None
        };
        kernels.push(
            Conv3DKernel::new(weights, dilation, bias)
                .map_err(|e| Error::Format(format!("kernel: {e}")))?,
        );
    }
    let level_count = cur.u32("level count")? as usize;
    let mut tap_sets = Vec::with_capacity(level_count);
    for _ in 0..level_count {
        let tap_count = cur.u32("tap count")? as usize;
        let mut taps = Vec::with_capacity(tap_count);
        for _ in 0..tap_count {
            let base = [
                cur.i32("base d")? as i64,
                cur.i32("base h")? as i64,
                cur.i32("base w")? as i64,
            ];
            let delta = [cur.f64("delta d")?, cur.f64("delta h")?, cur.f64("delta w")?];
            let weight = cur.f64("tap weight")?;
            taps.push(DeformableTap { base, delta, weight });
        }
        tap_sets.push(TapSet::new(taps).map_err(|e| Error::Format(format!("tap set: {e}")))?);
    }
    let out_ch = cur.u32("reducer out")? as usize;
    let in_ch = cur.u32("reducer in")? as usize;
    let mut weights = Vec::with_capacity(out_ch * in_ch);
    for _ in 0..out_ch * in_ch {
        weights.push(cur.f64("reducer weight")?);
    }
    let reducer = ChannelReducer::new(
        DenseArray::from_vec(&[out_ch, in_ch], weights)
            .map_err(|e| Error::Format(format!("reducer weights: {e}")))?,
    )?;
    cur.done()?;
    Ok(PipelineParams {
        kernels,
        tap_sets,
        reducer,
    })
}

pub fn save_params(params: &PipelineParams, path: &Path) -> Result<u64> {
    let bytes = encode_params(params);
    std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(bytes.len() as u64)
}

pub fn load_params(path: &Path) -> Result<PipelineParams> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_params(&bytes)
}

/// Render one affinity slice as a binary 8-bit PGM: -1 maps to 0, +1 to
/// 255, linearly in between.
pub fn encode_heatmap_pgm(
    aff: &PatternAffinity,
    group: usize,
    depth_slice: usize,
) -> Result<Vec<u8>> {
    let s = aff.values().shape();
    if group >= s[0] {
        return Err(Error::Argument(format!(
            "group {group} out of range 0..{}",
            s[0]
        )));
    }
    if depth_slice >= s[1] {
        return Err(Error::Argument(format!(
            "depth slice {depth_slice} out of range 0..{}",
            s[1]
        )));
    }
    let (h, w) = (s[2], s[3]);
    let mut out = Vec::with_capacity(32 + h * w);
    out.extend_from_slice(format!("P5\n{w} {h}\n255\n").as_bytes());
    for y in 0..h {
        for x in 0..w {
            let v = aff.values().get(&[group, depth_slice, y, x]);
            let px = ((v + 1.0) * 0.5 * 255.0).round().clamp(0.0, 255.0) as u8;
            out.push(px);
        }
    }
    Ok(out)
}

/// Write an affinity heatmap to disk.
pub fn export_heatmap(
    aff: &PatternAffinity,
    group: usize,
    depth_slice: usize,
    path: &Path,
) -> Result<()> {
    let bytes = encode_heatmap_pgm(aff, group, depth_slice)?;
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}
