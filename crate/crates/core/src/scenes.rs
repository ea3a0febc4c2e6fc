//! Procedural labeled scenes, a ray-cast renderer and ground-truth
//! voxelization: the stand-in for datasets and pretrained backbones.
//!
//! Scenes are boxes and rectangles placed by rigid poses (local-to-world).
//! Rendering casts one ray per pixel and records the z-depth of the
//! nearest hit (0 on miss). Features are a fixed sum of three sinusoids
//! of the hit point's world coordinates per channel, plus a strong
//! one-hot class embedding on the channel `(class - 1) mod C`, so a
//! selector head can decode classes and any two views of the same surface
//! point agree exactly.

use nalgebra::Vector3;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::compose::{SemanticVoxelGrid, UnifiedGridSpec};
use crate::error::{Error, Result};
use crate::geometry::{DepthHypothesisSet, Intrinsics, RigidPose};
use crate::lifting::{ContextFeature, DepthFeature};
use crate::numerics::DenseArray;

/// Amplitude of each of the three texture sinusoids.
const TEXTURE_AMPLITUDE: f64 = 0.5;
/// Amplitude of the class-embedding channel.
pub const CLASS_EMBED_AMPLITUDE: f64 = 4.0;
/// Frequency multipliers of the three sinusoids (deliberately
/// incommensurate so the texture never repeats along a sweep).
const FREQ_MULTIPLIERS: [f64; 3] = [1.0, 1.93, 3.17];
/// Rays must travel at least this far before a hit counts.
const RAY_EPS: f64 = 1e-9;

/// Primitive kind. A plane is a rectangle in its local xy-plane whose
/// third extent is an optional thickness (0 renders as a true rectangle).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrimitiveShape {
    Box,
    Plane,
}

/// One placed primitive. `pose` maps local to world coordinates;
/// containment and ray tests happen in the local frame against the
/// centered box `|x_a| <= extents_a / 2`.
#[derive(Debug, Clone)]
pub struct Primitive {
    pub shape: PrimitiveShape,
    pub pose: RigidPose,
    /// Full edge lengths in meters; for planes the third entry is the
    /// thickness.
    pub extents: [f64; 3],
    /// Semantic class in `1..=N`.
    pub class_label: u16,
}

impl Primitive {
    fn local_of(&self, world: Vector3<f64>) -> Vector3<f64> {
        self.pose.rotation.transpose() * (world - self.pose.translation)
    }

    /// Whether a world point lies inside (planes use their thickness).
    pub fn contains(&self, world: Vector3<f64>) -> bool {
        let l = self.local_of(world);
        (0..3).all(|a| l[a].abs() <= self.extents[a] * 0.5)
    }

    /// Smallest ray parameter `s > eps` where `origin + s * dir` meets the
    /// primitive, by the slab method (degenerate zero-thickness slabs are
    /// handled exactly).
    fn ray_hit(&self, origin: Vector3<f64>, dir: Vector3<f64>) -> Option<f64> {
        let o = self.local_of(origin);
        let d = self.pose.rotation.transpose() * dir;
        let mut t_enter = f64::NEG_INFINITY;
        let mut t_exit = f64::INFINITY;
        for a in 0..3 {
            let half = self.extents[a] * 0.5;
            if d[a].abs() < 1e-15 {
                if o[a].abs() > half {
                    return None;
                }
                continue;
            }
            let mut t0 = (-half - o[a]) / d[a];
            let mut t1 = (half - o[a]) / d[a];
            if t0 > t1 {
                std::mem::swap(&mut t0, &mut t1);
            }
            t_enter = t_enter.max(t0);
            t_exit = t_exit.min(t1);
            if t_enter > t_exit {
                return None;
            }
        }
        if t_enter > RAY_EPS {
            Some(t_enter)
        } else if t_exit > RAY_EPS {
            Some(t_exit)
        } else {
            None
        }
    }
}

/// Declarative scene description; everything downstream is a pure
/// function of it.
#[derive(Debug, Clone)]
pub struct SceneSpec {
    pub seed: u64,
    pub primitives: Vec<Primitive>,
    /// Base texture frequency in cycles per meter.
    pub texture_frequency: f64,
    /// Number of semantic classes N (labels run 1..=N).
    pub num_classes: usize,
    /// Feature channels rendered per pixel.
    pub channels: usize,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.num_classes == 0 {
            return Err(Error::Argument(
                "scene needs at least one channel and one class".into(),
            ));
        }
        if self.texture_frequency <= 0.0 {
            return Err(Error::Argument(format!(
                "texture frequency must be positive, got {}",
                self.texture_frequency
            )));
        }
        for (i, p) in self.primitives.iter().enumerate() {
            if p.class_label == 0 || p.class_label as usize > self.num_classes {
                return Err(Error::Argument(format!(
                    "primitive {i} has class {} outside 1..={}",
                    p.class_label, self.num_classes
                )));
            }
            if p.extents.iter().any(|&e| e < 0.0)
                || p.extents[0] <= 0.0
                || p.extents[1] <= 0.0
                || (p.shape == PrimitiveShape::Box && p.extents[2] <= 0.0)
            {
                return Err(Error::Argument(format!(
                    "primitive {i} has non-positive extents {:?}",
                    p.extents
                )));
            }
        }
        Ok(())
    }

    /// Seeded random panels (thin yaw-rotated boxes) inside
    /// `[bound_min, bound_max]`, with classes cycling through
    /// `1..=num_classes`. Panels rather than solid blocks: visible
    /// surfaces then carry nearly all of the occupied volume, which is
    /// what camera-driven pipelines can actually localize.
    pub fn random(
        seed: u64,
        num_primitives: usize,
        num_classes: usize,
        bound_min: [f64; 3],
        bound_max: [f64; 3],
        texture_frequency: f64,
        channels: usize,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut primitives = Vec::with_capacity(num_primitives);
        for i in 0..num_primitives {
            let extents: [f64; 3] = [
                rng.gen_range(0.3..0.5),
                rng.gen_range(1.0..2.4),
                rng.gen_range(1.0..2.4),
            ];
            // Keep the whole box inside the bounds regardless of yaw: the
            // rotated footprint never exceeds the diagonal.
            let radius = 0.5 * (extents[0] * extents[0] + extents[1] * extents[1]).sqrt();
            let mut center = Vector3::zeros();
            for a in 0..3 {
                let margin = if a < 2 { radius } else { extents[2] * 0.5 };
                let lo = bound_min[a] + margin;
                let hi = (bound_max[a] - margin).max(lo + 1e-9);
                center[a] = rng.gen_range(lo..hi);
            }
            let yaw = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
            let rotation = nalgebra::Rotation3::from_axis_angle(&Vector3::z_axis(), yaw);
            primitives.push(Primitive {
                shape: PrimitiveShape::Box,
                pose: RigidPose::new(rotation.into_inner(), center)
                    .expect("yaw rotations are orthonormal"),
                extents,
                class_label: (i % num_classes) as u16 + 1,
            });
        }
        SceneSpec {
            seed,
            primitives,
            texture_frequency,
            num_classes,
            channels,
        }
    }
}

/// A built scene: primitives plus the resolved texture parameters.
#[derive(Debug, Clone)]
pub struct Scene {
    spec: SceneSpec,
    /// Per channel, three unit direction vectors.
    tex_dirs: Vec<[Vector3<f64>; 3]>,
    /// Per channel, three phases.
    tex_phases: Vec<[f64; 3]>,
}

/// Resolve a spec into a scene. Texture directions and phases derive from
/// the seed alone, so identical seeds give bit-identical scenes.
pub fn build_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x7465_7874_7572_65); // "texture"
    let mut tex_dirs = Vec::with_capacity(spec.channels);
    let mut tex_phases = Vec::with_capacity(spec.channels);
    for _ in 0..spec.channels {
        let mut dirs = [Vector3::zeros(); 3];
        let mut phases = [0.0; 3];
        for k in 0..3 {
            let v = Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            dirs[k] = if v.norm() < 1e-6 {
                Vector3::x()
            } else {
                v.normalize()
            };
            phases[k] = rng.gen_range(0.0..std::f64::consts::TAU);
        }
        tex_dirs.push(dirs);
        tex_phases.push(phases);
    }
    Ok(Scene {
        spec: spec.clone(),
        tex_dirs,
        tex_phases,
    })
}

impl Scene {
    pub fn spec(&self) -> &SceneSpec {
        &self.spec
    }

    pub fn channels(&self) -> usize {
        self.spec.channels
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    /// Channel carrying the one-hot embedding of a class.
    pub fn class_channel(&self, class: u16) -> usize {
        (class as usize - 1) % self.spec.channels
    }

    /// Exact byte dump of every resolved parameter; equal seeds must give
    /// equal dumps.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.spec.seed.to_le_bytes());
        out.extend_from_slice(&(self.spec.channels as u64).to_le_bytes());
        out.extend_from_slice(&(self.spec.num_classes as u64).to_le_bytes());
        out.extend_from_slice(&self.spec.texture_frequency.to_bits().to_le_bytes());
        for p in &self.spec.primitives {
            out.push(match p.shape {
                PrimitiveShape::Box => 0,
                PrimitiveShape::Plane => 1,
            });
            out.extend_from_slice(&p.class_label.to_le_bytes());
            for a in 0..3 {
                out.extend_from_slice(&p.extents[a].to_bits().to_le_bytes());
                out.extend_from_slice(&p.pose.translation[a].to_bits().to_le_bytes());
                for b in 0..3 {
                    out.extend_from_slice(&p.pose.rotation[(a, b)].to_bits().to_le_bytes());
                }
            }
        }
        for (dirs, phases) in self.tex_dirs.iter().zip(&self.tex_phases) {
            for k in 0..3 {
                for a in 0..3 {
                    out.extend_from_slice(&dirs[k][a].to_bits().to_le_bytes());
                }
                out.extend_from_slice(&phases[k].to_bits().to_le_bytes());
            }
        }
        out
    }

    /// Texture value of one channel at a world point, before the class
    /// embedding.
    pub fn texture(&self, channel: usize, world: Vector3<f64>) -> f64 {
        let mut v = 0.0;
        for k in 0..3 {
            let freq = self.spec.texture_frequency * FREQ_MULTIPLIERS[k];
            let phase = std::f64::consts::TAU * freq * self.tex_dirs[channel][k].dot(&world)
                + self.tex_phases[channel][k];
            v += TEXTURE_AMPLITUDE * phase.sin();
        }
        v
    }

    /// Full feature vector of a surface point of class `class`.
    pub fn feature_at(&self, world: Vector3<f64>, class: u16) -> Vec<f64> {
        let embed = self.class_channel(class);
        (0..self.spec.channels)
            .map(|c| {
                let mut v = self.texture(c, world);
                if c == embed {
                    v += CLASS_EMBED_AMPLITUDE;
                }
                v
            })
            .collect()
    }

    /// Nearest hit of a world-space ray, returning the z-free ray
    /// parameter and the primitive index. First-listed wins exact ties.
    pub fn cast_ray(&self, origin: Vector3<f64>, dir: Vector3<f64>) -> Option<(f64, usize)> {
        let mut best: Option<(f64, usize)> = None;
        for (i, p) in self.spec.primitives.iter().enumerate() {
            if let Some(s) = p.ray_hit(origin, dir) {
                if best.map_or(true, |(bs, _)| s < bs) {
                    best = Some((s, i));
                }
            }
        }
        best
    }

    /// Depth and features seen along the ray of a continuous pixel.
    /// The returned depth is the z-depth in the camera frame.
    pub fn probe(
        &self,
        k: &Intrinsics,
        pose: &RigidPose,
        u: f64,
        v: f64,
    ) -> Option<(f64, Vec<f64>)> {
        let origin = pose.camera_center();
        let dir_cam = Vector3::new((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0);
        let dir_world = pose.rotation.transpose() * dir_cam;
        // With dir_cam.z = 1 the ray parameter equals the camera z-depth.
        let (s, idx) = self.cast_ray(origin, dir_world)?;
        let world = origin + s * dir_world;
        let class = self.spec.primitives[idx].class_label;
        Some((s, self.feature_at(world, class)))
    }
}

/// Ground-truth observations of one camera.
#[derive(Debug, Clone)]
pub struct RenderedFrame {
    /// `[H, W]` z-depth in meters, 0 where no primitive is hit.
    pub depth: DenseArray,
    pub feature: ContextFeature,
    pub intrinsics: Intrinsics,
    pub pose: RigidPose,
}

/// Per-pixel ray casting of a full frame. Misses give depth 0 and zero
/// features. Deterministic and pose-consistent by construction.
pub fn render_frame(
    scene: &Scene,
    k: &Intrinsics,
    pose: &RigidPose,
    height: usize,
    width: usize,
) -> Result<RenderedFrame> {
    if height == 0 || width == 0 {
        return Err(Error::Argument(format!(
            "image extents must be positive, got {height}x{width}"
        )));
    }
    let c_n = scene.channels();
    let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..height)
        .into_par_iter()
        .map(|y| {
            let mut depth_row = vec![0.0; width];
            let mut feat_row = vec![0.0; c_n * width];
            for x in 0..width {
                if let Some((depth, feats)) = scene.probe(k, pose, x as f64, y as f64) {
                    depth_row[x] = depth;
                    for (c, f) in feats.into_iter().enumerate() {
                        feat_row[c * width + x] = f;
                    }
                }
            }
            (depth_row, feat_row)
        })
        .collect();
    let mut depth = DenseArray::zeros(&[height, width]);
    let mut feature = DenseArray::zeros(&[c_n, height, width]);
    for (y, (depth_row, feat_row)) in rows.into_iter().enumerate() {
        depth.data_mut()[y * width..(y + 1) * width].copy_from_slice(&depth_row);
        for c in 0..c_n {
            feature.data_mut()[(c * height + y) * width..(c * height + y + 1) * width]
                .copy_from_slice(&feat_row[c * width..(c + 1) * width]);
        }
    }
    Ok(RenderedFrame {
        depth,
        feature: ContextFeature::new(feature)?,
        intrinsics: *k,
        pose: *pose,
    })
}

/// Label every voxel by the first-listed primitive containing its center.
pub fn voxelize_ground_truth(scene: &Scene, grid: &UnifiedGridSpec) -> SemanticVoxelGrid {
    let e = grid.extents;
    let mut labels = vec![0u16; grid.voxel_count()];
    labels
        .par_chunks_mut(e[2])
        .enumerate()
        .for_each(|(hw, chunk)| {
            let (h, w) = (hw / e[1], hw % e[1]);
            for (z, slot) in chunk.iter_mut().enumerate() {
                let center = grid.cell_center([h, w, z]);
                for p in &scene.spec.primitives {
                    if p.contains(center) {
                        *slot = p.class_label;
                        break;
                    }
                }
            }
        });
    SemanticVoxelGrid::from_labels(e, labels, scene.num_classes())
        .expect("labels are valid by construction")
}

/// Synthesize depth cost logits from ground truth: a Gaussian bump of
/// width `sharpness` (meters) centered on the true depth, plus optional
/// seeded noise. Pixels without a hit get uniform zero logits. With zero
/// noise the argmax is always the hypothesis nearest the true depth.
pub fn oracle_depth_feature(
    frame: &RenderedFrame,
    hyps: &DepthHypothesisSet,
    sharpness: f64,
    noise: f64,
    seed: u64,
) -> Result<DepthFeature> {
    if sharpness <= 0.0 {
        return Err(Error::Argument(format!(
            "sharpness must be positive, got {sharpness}"
        )));
    }
    let (h, w) = (frame.depth.shape()[0], frame.depth.shape()[1]);
    let d_n = hyps.count();
    let plane = h * w;
    let mut logits = DenseArray::zeros(&[d_n, h, w]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal is valid");
    for p in 0..plane {
        let gt = frame.depth.data()[p];
        if gt <= 0.0 {
            continue; // uniform logits on misses
        }
        for j in 0..d_n {
            let delta = (hyps.value(j) - gt) / sharpness;
            let mut v = -0.5 * delta * delta;
            if noise > 0.0 {
                v += noise * normal.sample(&mut rng);
            }
            logits.data_mut()[j * plane + p] = v;
        }
    }
    DepthFeature::new(logits)
}

/// Nearest hypothesis bin of each pixel's true depth; `None` on misses.
pub fn gt_depth_bins(frame: &RenderedFrame, hyps: &DepthHypothesisSet) -> Vec<Option<usize>> {
    frame
        .depth
        .data()
        .iter()
        .map(|&d| (d > 0.0).then(|| hyps.nearest_index(d)))
        .collect()
}

/// Bundled scenes used by the examples, the acceptance checks and the
/// benchmark suite.
pub mod presets {
    use super::*;

    /// Depth of the bundled fronto-parallel plane's visible face.
    pub const PLANE_DEPTH: f64 = 5.3;

    /// Scene bounds of the benchmark family: the camera sits at the world
    /// origin looking down +x with z up, so boxes live in front of it.
    pub const BENCH_BOUND_MIN: [f64; 3] = [2.0, -3.5, -1.4];
    pub const BENCH_BOUND_MAX: [f64; 3] = [8.0, 3.5, 1.4];

    /// A single textured slab facing a +z-looking camera, large enough to
    /// cover the whole view frustum of [`plane_camera`]. Its front face
    /// sits exactly at z = [`PLANE_DEPTH`]; the 0.4 m thickness exists so
    /// ground-truth voxelization sees it.
    pub fn textured_plane_spec() -> SceneSpec {
        SceneSpec {
            seed: 424242,
            primitives: vec![Primitive {
                shape: PrimitiveShape::Box,
                pose: RigidPose::new(
                    nalgebra::Matrix3::identity(),
                    Vector3::new(0.0, 0.0, PLANE_DEPTH + 0.2),
                )
                .expect("identity rotation is orthonormal"),
                extents: [14.0, 14.0, 0.4],
                class_label: 1,
            }],
            texture_frequency: 0.6,
            num_classes: 1,
            channels: 8,
        }
    }

    /// Camera of the bundled plane scene: 64x64 pixels.
    pub fn plane_camera() -> (Intrinsics, usize, usize) {
        (
            Intrinsics::new(64.0, 64.0, 31.5, 31.5).expect("valid intrinsics"),
            64,
            64,
        )
    }

    /// Benchmark scene family: seeded boxes in front of the camera.
    pub fn benchmark_spec(seed: u64) -> SceneSpec {
        SceneSpec::random(seed, 6, 4, BENCH_BOUND_MIN, BENCH_BOUND_MAX, 0.3, 8)
    }
}
