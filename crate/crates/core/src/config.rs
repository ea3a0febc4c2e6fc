//! Plain-text key=value configuration: run configs and scene files.
//!
//! Both formats share one syntax: `[section]` headers, `key = value`
//! lines, `#` comments. Sections may repeat (`[primitive]`, `[frame]`).
//! Rotations are written as 9 row-major reals, vectors as
//! whitespace-separated reals.

use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};

use crate::compose::UnifiedGridSpec;
use crate::error::{Error, Result};
use crate::geometry::{Intrinsics, RigidPose, Spacing};
use crate::scenes::{Primitive, PrimitiveShape, SceneSpec};

/// One parsed `[section]` with its key/value pairs in file order.
#[derive(Debug, Clone)]
pub struct KvSection {
    pub name: String,
    pub entries: Vec<(String, String)>,
}

impl KvSection {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }
}

/// Parse the shared key=value syntax into ordered sections.
pub fn parse_kv_text(text: &str) -> Result<Vec<KvSection>> {
    let mut sections: Vec<KvSection> = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(i) => &raw[..i],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            sections.push(KvSection {
                name: name.trim().to_string(),
                entries: Vec::new(),
            });
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Config(format!(
                "line {}: expected `[section]` or `key = value`, got `{raw}`",
                lineno + 1
            )));
        };
        let Some(section) = sections.last_mut() else {
            return Err(Error::Config(format!(
                "line {}: `key = value` before any [section]",
                lineno + 1
            )));
        };
        section
            .entries
            .push((key.trim().to_string(), value.trim().to_string()));
    }
    Ok(sections)
}

fn parse_f64(section: &str, key: &str, value: &str) -> Result<f64> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("[{section}] {key}: `{value}` is not a number")))
}

fn parse_usize(section: &str, key: &str, value: &str) -> Result<usize> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("[{section}] {key}: `{value}` is not an integer")))
}

fn parse_u64(section: &str, key: &str, value: &str) -> Result<u64> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("[{section}] {key}: `{value}` is not an integer")))
}

fn parse_reals(section: &str, key: &str, value: &str, want: usize) -> Result<Vec<f64>> {
    let parts: Vec<f64> = value
        .split_whitespace()
        .map(|p| parse_f64(section, key, p))
        .collect::<Result<_>>()?;
    if parts.len() != want {
        return Err(Error::Config(format!(
            "[{section}] {key}: expected {want} reals, got {}",
            parts.len()
        )));
    }
    Ok(parts)
}

fn parse_on_off(section: &str, key: &str, value: &str) -> Result<bool> {
    match value {
        "on" | "true" | "1" => Ok(true),
        "off" | "false" | "0" => Ok(false),
        other => Err(Error::Config(format!(
            "[{section}] {key}: expected on/off, got `{other}`"
        ))),
    }
}

fn parse_pose(section: &str, sec: &KvSection) -> Result<RigidPose> {
    let rot = parse_reals(
        section,
        "rotation",
        sec.get("rotation").unwrap_or("1 0 0 0 1 0 0 0 1"),
        9,
    )?;
    let tr = parse_reals(
        section,
        "translation",
        sec.get("translation").unwrap_or("0 0 0"),
        3,
    )?;
    let rotation = Matrix3::from_row_slice(&rot);
    RigidPose::new(rotation, Vector3::new(tr[0], tr[1], tr[2]))
}

// ---------------------------------------------------------------------
// Scene files
// ---------------------------------------------------------------------

/// Parse a scene file: one `[scene]` header section and one
/// `[primitive]` section per primitive.
pub fn parse_scene_spec(text: &str) -> Result<SceneSpec> {
    let sections = parse_kv_text(text)?;
    let header = sections
        .iter()
        .find(|s| s.name == "scene")
        .ok_or_else(|| Error::Config("scene file is missing its [scene] section".into()))?;
    let seed = parse_u64("scene", "seed", header.get("seed").unwrap_or("0"))?;
    let texture_frequency = parse_f64(
        "scene",
        "texture_frequency",
        header.get("texture_frequency").unwrap_or("1.4"),
    )?;
    let num_classes = parse_usize("scene", "classes", header.get("classes").unwrap_or("1"))?;
    let channels = parse_usize("scene", "channels", header.get("channels").unwrap_or("8"))?;

    let mut primitives = Vec::new();
    for sec in sections.iter().filter(|s| s.name == "primitive") {
        let shape = match sec.get("shape").unwrap_or("box") {
            "box" => PrimitiveShape::Box,
            "plane" => PrimitiveShape::Plane,
            other => {
                return Err(Error::Config(format!(
                    "[primitive] shape: `{other}` is not box or plane"
                )))
            }
        };
        let class = parse_usize("primitive", "class", sec.get("class").unwrap_or("1"))? as u16;
        let ext_text = sec
            .get("extents")
            .ok_or_else(|| Error::Config("[primitive] is missing `extents`".into()))?;
        let parts: Vec<f64> = ext_text
            .split_whitespace()
            .map(|p| parse_f64("primitive", "extents", p))
            .collect::<Result<_>>()?;
        let extents = match (shape, parts.len()) {
            (_, 3) => [parts[0], parts[1], parts[2]],
            (PrimitiveShape::Plane, 2) => [parts[0], parts[1], 0.0],
            _ => {
                return Err(Error::Config(format!(
                    "[primitive] extents: expected 3 reals (2 for planes), got {}",
                    parts.len()
                )))
            }
        };
        primitives.push(Primitive {
            shape,
            pose: parse_pose("primitive", sec)?,
            extents,
            class_label: class,
        });
    }
    let spec = SceneSpec {
        seed,
        primitives,
        texture_frequency,
        num_classes,
        channels,
    };
    spec.validate()?;
    Ok(spec)
}

/// Write a scene spec back to its text form (round-trips exactly:
/// float formatting is shortest-round-trip).
pub fn scene_spec_to_text(spec: &SceneSpec) -> String {
    let mut out = String::new();
    out.push_str("[scene]\n");
    out.push_str(&format!("seed = {}\n", spec.seed));
    out.push_str(&format!("texture_frequency = {}\n", spec.texture_frequency));
    out.push_str(&format!("classes = {}\n", spec.num_classes));
    out.push_str(&format!("channels = {}\n", spec.channels));
    for p in &spec.primitives {
        out.push_str("\n[primitive]\n");
        out.push_str(&format!(
            "shape = {}\n",
            match p.shape {
                PrimitiveShape::Box => "box",
                PrimitiveShape::Plane => "plane",
            }
        ));
        out.push_str(&format!("class = {}\n", p.class_label));
        out.push_str(&format!(
            "extents = {} {} {}\n",
            p.extents[0], p.extents[1], p.extents[2]
        ));
        let r = &p.pose.rotation;
        out.push_str(&format!(
            "rotation = {} {} {} {} {} {} {} {} {}\n",
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)]
        ));
        let t = &p.pose.translation;
        out.push_str(&format!("translation = {} {} {}\n", t[0], t[1], t[2]));
    }
    out
}

/// Load a scene file from disk.
pub fn load_scene_spec(path: &Path) -> Result<SceneSpec> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_scene_spec(&text)
}

// ---------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------

/// Where the scene comes from.
#[derive(Debug, Clone)]
pub enum SceneSource {
    /// A scene file on disk.
    Path(PathBuf),
    /// Seeded random boxes (the benchmark family).
    Generate {
        seed: u64,
        primitives: usize,
        classes: usize,
    },
    /// An in-memory spec (bundled presets, tests).
    Inline(SceneSpec),
}

/// Pipeline component toggles, mirroring the ablation columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AblationFlags {
    /// Confidence-aware lifting (off = plain softmax lifting).
    pub gcl_confidence: bool,
    /// Pattern-affinity gating (off = neutral affinity of one).
    pub cpa: bool,
    /// Deformable refinement (off = plain mean of the two blocks).
    pub adr: bool,
    /// Unified-grid transformation (off = joint pooling of the naive
    /// channel concatenation).
    pub dhbt: bool,
    /// Cyclically misassign historical poses (misalignment probe).
    pub pose_shuffle: bool,
    /// Replace the temporal feature volume with a matching-cost volume.
    pub cost_volume_mode: bool,
    /// Temporal branch as a whole (off = geometric-only baseline).
    pub temporal_branch: bool,
    /// Geometric branch as a whole (off = unwarped temporal stack).
    pub geometric_branch: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        AblationFlags {
            gcl_confidence: true,
            cpa: true,
            adr: true,
            dhbt: true,
            pose_shuffle: false,
            cost_volume_mode: false,
            temporal_branch: true,
            geometric_branch: true,
        }
    }
}

impl AblationFlags {
    /// Set one named flag; unknown names or values are config errors.
    pub fn set(&mut self, name: &str, enabled: bool) -> Result<()> {
        match name {
            "gcl_confidence" => self.gcl_confidence = enabled,
            "cpa" => self.cpa = enabled,
            "adr" => self.adr = enabled,
            "dhbt" => self.dhbt = enabled,
            "pose_shuffle" => self.pose_shuffle = enabled,
            "cost_volume_mode" => self.cost_volume_mode = enabled,
            "temporal_branch" => self.temporal_branch = enabled,
            "geometric_branch" => self.geometric_branch = enabled,
            other => {
                return Err(Error::Config(format!(
                    "unknown ablation flag `{other}`"
                )))
            }
        }
        Ok(())
    }
}

/// Everything a pipeline run needs, resolved from a config file plus CLI
/// overrides.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub scene: SceneSource,
    pub intrinsics: Intrinsics,
    /// World-to-camera rotation of the current frame (frame 0). The
    /// trajectory generator yaws this base orientation about world z.
    pub camera_rotation: Matrix3<f64>,
    pub width: usize,
    pub height: usize,
    /// Total frames: one current plus `frame_count - 1` historical.
    pub frame_count: usize,
    /// World translation of the camera per step back in time.
    pub frame_step: [f64; 3],
    /// Camera yaw increment per step back in time, degrees.
    pub yaw_step_deg: f64,
    /// Pose jitter applied to historical poses (misalignment knob).
    pub pose_noise_rot_deg: f64,
    pub pose_noise_trans: f64,
    /// Explicit world-to-camera poses (current first); overrides the
    /// trajectory generator when non-empty.
    pub explicit_poses: Vec<RigidPose>,
    pub d_min: f64,
    pub d_max: f64,
    pub hypothesis_count: usize,
    pub spacing: Spacing,
    pub grid: UnifiedGridSpec,
    /// Width (meters) of the oracle's depth-logit bump.
    pub oracle_sharpness: f64,
    /// Amplitude of seeded noise on the depth logits.
    pub oracle_noise: f64,
    /// Per-channel gate applied to the pooled temporal volume.
    pub compose_gate: f64,
    pub lambda_ce: f64,
    pub ablation: AblationFlags,
    pub seed: u64,
    /// Artifact directory; `None` keeps the run in memory.
    pub out_dir: Option<PathBuf>,
    pub threads: usize,
}

impl RunConfig {
    /// Defaults matching the bundled plane config: 64x64 images looking
    /// down world +z, 16 hypotheses over [2, 10], a grid slab around the
    /// plane.
    pub fn default_plane() -> Self {
        RunConfig {
            scene: SceneSource::Inline(crate::scenes::presets::textured_plane_spec()),
            intrinsics: Intrinsics::new(64.0, 64.0, 31.5, 31.5).expect("valid intrinsics"),
            camera_rotation: Matrix3::identity(),
            width: 64,
            height: 64,
            frame_count: 4,
            frame_step: [-0.22, 0.05, 0.0],
            yaw_step_deg: 0.0,
            pose_noise_rot_deg: 0.0,
            pose_noise_trans: 0.0,
            explicit_poses: Vec::new(),
            d_min: 2.0,
            d_max: 10.0,
            hypothesis_count: 16,
            spacing: Spacing::Linear,
            grid: UnifiedGridSpec::new([32, 32, 8], 0.4, [-6.4, -6.4, 4.0])
                .expect("valid grid"),
            oracle_sharpness: 0.6,
            oracle_noise: 0.0,
            compose_gate: 1.0,
            lambda_ce: 1.0,
            ablation: AblationFlags::default(),
            seed: 42,
            out_dir: None,
            threads: 1,
        }
    }

    /// Defaults of the seeded-scene benchmark family: a 32x32 camera at
    /// the world origin looking down +x (world z up), a 12.8 m x 12.8 m x
    /// 3.2 m grid of 0.4 m voxels in front of it, and noisy depth logits
    /// so the temporal branch has something to correct.
    pub fn default_benchmark() -> Self {
        // camera axes: right = -y, down = -z, forward = +x
        let camera_rotation = Matrix3::from_row_slice(&[
            0.0, -1.0, 0.0, //
            0.0, 0.0, -1.0, //
            1.0, 0.0, 0.0,
        ]);
        RunConfig {
            scene: SceneSource::Generate {
                seed: 0,
                primitives: 6,
                classes: 4,
            },
            intrinsics: Intrinsics::new(24.0, 24.0, 15.5, 15.5).expect("valid intrinsics"),
            camera_rotation,
            width: 32,
            height: 32,
            frame_count: 4,
            frame_step: [-0.3, 0.18, 0.0],
            yaw_step_deg: 1.2,
            pose_noise_rot_deg: 0.0,
            pose_noise_trans: 0.0,
            explicit_poses: Vec::new(),
            d_min: 2.0,
            d_max: 10.0,
            hypothesis_count: 12,
            spacing: Spacing::Linear,
            grid: UnifiedGridSpec::new([32, 32, 8], 0.4, [0.0, -6.4, -1.6])
                .expect("valid grid"),
            oracle_sharpness: 0.35,
            oracle_noise: 1.0,
            compose_gate: 1.0,
            lambda_ce: 1.0,
            ablation: AblationFlags::default(),
            seed: 42,
            out_dir: None,
            threads: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frame_count < 2 {
            return Err(Error::Config(format!(
                "frame count must be at least 2 (current + historical), got {}",
                self.frame_count
            )));
        }
        if !self.explicit_poses.is_empty() && self.explicit_poses.len() != self.frame_count {
            return Err(Error::Config(format!(
                "{} explicit [frame] poses for {} frames",
                self.explicit_poses.len(),
                self.frame_count
            )));
        }
        if self.threads == 0 {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config("image extents must be positive".into()));
        }
        if !self.compose_gate.is_finite() {
            return Err(Error::Config("compose gate must be finite".into()));
        }
        if self.oracle_sharpness <= 0.0 || self.oracle_noise < 0.0 {
            return Err(Error::Config(
                "oracle sharpness must be positive and noise nonnegative".into(),
            ));
        }
        Ok(())
    }
}

/// Parse a run config from text. `base_dir` anchors relative scene paths.
pub fn parse_run_config(text: &str, base_dir: &Path) -> Result<RunConfig> {
    let sections = parse_kv_text(text)?;
    let mut cfg = RunConfig::default_plane();
    let mut scene_set = false;
    let mut explicit_poses = Vec::new();

    for sec in &sections {
        match sec.name.as_str() {
            "scene" => {
                if let Some(path) = sec.get("path") {
                    cfg.scene = SceneSource::Path(base_dir.join(path));
                    scene_set = true;
                } else if let Some(seed) = sec.get("generate_seed") {
                    cfg.scene = SceneSource::Generate {
                        seed: parse_u64("scene", "generate_seed", seed)?,
                        primitives: parse_usize(
                            "scene",
                            "generate_primitives",
                            sec.get("generate_primitives").unwrap_or("6"),
                        )?,
                        classes: parse_usize(
                            "scene",
                            "generate_classes",
                            sec.get("generate_classes").unwrap_or("4"),
                        )?,
                    };
                    scene_set = true;
                }
            }
            "camera" => {
                let g = |k: &str, d: &str| sec.get(k).unwrap_or(d).to_string();
                cfg.width = parse_usize("camera", "width", &g("width", "64"))?;
                cfg.height = parse_usize("camera", "height", &g("height", "64"))?;
                cfg.intrinsics = Intrinsics::new(
                    parse_f64("camera", "fx", &g("fx", "64"))?,
                    parse_f64("camera", "fy", &g("fy", "64"))?,
                    parse_f64("camera", "cx", &g("cx", "31.5"))?,
                    parse_f64("camera", "cy", &g("cy", "31.5"))?,
                )?;
                if let Some(v) = sec.get("rotation") {
                    let r = parse_reals("camera", "rotation", v, 9)?;
                    cfg.camera_rotation = Matrix3::from_row_slice(&r);
                }
            }
            "frames" => {
                if let Some(v) = sec.get("count") {
                    cfg.frame_count = parse_usize("frames", "count", v)?;
                }
                if let Some(v) = sec.get("step") {
                    let s = parse_reals("frames", "step", v, 3)?;
                    cfg.frame_step = [s[0], s[1], s[2]];
                }
                if let Some(v) = sec.get("yaw_step_deg") {
                    cfg.yaw_step_deg = parse_f64("frames", "yaw_step_deg", v)?;
                }
                if let Some(v) = sec.get("pose_noise_rot_deg") {
                    cfg.pose_noise_rot_deg = parse_f64("frames", "pose_noise_rot_deg", v)?;
                }
                if let Some(v) = sec.get("pose_noise_trans") {
                    cfg.pose_noise_trans = parse_f64("frames", "pose_noise_trans", v)?;
                }
            }
            "frame" => explicit_poses.push(parse_pose("frame", sec)?),
            "hypotheses" => {
                if let Some(v) = sec.get("d_min") {
                    cfg.d_min = parse_f64("hypotheses", "d_min", v)?;
                }
                if let Some(v) = sec.get("d_max") {
                    cfg.d_max = parse_f64("hypotheses", "d_max", v)?;
                }
                if let Some(v) = sec.get("count") {
                    cfg.hypothesis_count = parse_usize("hypotheses", "count", v)?;
                }
                if let Some(v) = sec.get("spacing") {
                    cfg.spacing = match v {
                        "linear" => Spacing::Linear,
                        "inverse" => Spacing::Inverse,
                        other => {
                            return Err(Error::Config(format!(
                                "[hypotheses] spacing: `{other}` is not linear or inverse"
                            )))
                        }
                    };
                }
            }
            "grid" => {
                let size = parse_reals("grid", "size", sec.get("size").unwrap_or("32 32 8"), 3)?;
                let voxel = parse_f64("grid", "voxel_size", sec.get("voxel_size").unwrap_or("0.4"))?;
                let origin = parse_reals(
                    "grid",
                    "origin",
                    sec.get("origin").unwrap_or("-6.4 -6.4 -1.6"),
                    3,
                )?;
                cfg.grid = UnifiedGridSpec::new(
                    [size[0] as usize, size[1] as usize, size[2] as usize],
                    voxel,
                    [origin[0], origin[1], origin[2]],
                )?;
            }
            "oracle" => {
                if let Some(v) = sec.get("sharpness") {
                    cfg.oracle_sharpness = parse_f64("oracle", "sharpness", v)?;
                }
                if let Some(v) = sec.get("noise") {
                    cfg.oracle_noise = parse_f64("oracle", "noise", v)?;
                }
            }
            "compose" => {
                if let Some(v) = sec.get("gate") {
                    cfg.compose_gate = parse_f64("compose", "gate", v)?;
                }
                if let Some(v) = sec.get("lambda_ce") {
                    cfg.lambda_ce = parse_f64("compose", "lambda_ce", v)?;
                }
            }
            "ablation" => {
                for (key, value) in &sec.entries {
                    let enabled = parse_on_off("ablation", key, value)?;
                    cfg.ablation.set(key, enabled)?;
                }
            }
            "run" => {
                if let Some(v) = sec.get("seed") {
                    cfg.seed = parse_u64("run", "seed", v)?;
                }
                if let Some(v) = sec.get("out") {
                    cfg.out_dir = Some(base_dir.join(v));
                }
                if let Some(v) = sec.get("threads") {
                    cfg.threads = parse_usize("run", "threads", v)?;
                }
            }
            other => {
                return Err(Error::Config(format!("unknown section [{other}]")));
            }
        }
    }
    if !scene_set {
        return Err(Error::Config(
            "config needs a [scene] section with `path` or `generate_seed`".into(),
        ));
    }
    cfg.explicit_poses = explicit_poses;
    cfg.validate()?;
    Ok(cfg)
}

/// Load a run config file; relative paths resolve against its directory.
pub fn load_run_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    parse_run_config(&text, base)
}

/// Apply a repeatable `name=on|off` override from the command line.
pub fn apply_ablation_override(cfg: &mut RunConfig, spec: &str) -> Result<()> {
    let Some((name, value)) = spec.split_once('=') else {
        return Err(Error::Config(format!(
            "ablation override `{spec}` must look like name=off"
        )));
    };
    let enabled = parse_on_off("ablation", name.trim(), value.trim())?;
    cfg.ablation.set(name.trim(), enabled)
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "\
# sample config
[scene]
generate_seed = 9
generate_primitives = 5
generate_classes = 3

[camera]
width = 32
height = 24
fx = 30
fy = 31
cx = 15.5
cy = 11.5

[frames]
count = 3
step = -0.2 0 0
yaw_step_deg = 1.5

[hypotheses]
d_min = 1.5
d_max = 9
count = 10
spacing = inverse

[grid]
size = 16 16 4
voxel_size = 0.5
origin = -4 -4 0

[ablation]
cpa = off
pose_shuffle = on

[run]
seed = 77
threads = 2
";

    #[test]
    fn parses_full_config() {
        let cfg = parse_run_config(SAMPLE, Path::new("/tmp")).unwrap();
        assert!(matches!(cfg.scene, SceneSource::Generate { seed: 9, .. }));
        assert_eq!((cfg.width, cfg.height), (32, 24));
        assert_eq!(cfg.frame_count, 3);
        assert_eq!(cfg.hypothesis_count, 10);
        assert_eq!(cfg.spacing, Spacing::Inverse);
        assert_eq!(cfg.grid.extents, [16, 16, 4]);
        assert!(!cfg.ablation.cpa);
        assert!(cfg.ablation.pose_shuffle);
        assert!(cfg.ablation.adr);
        assert_eq!(cfg.seed, 77);
        assert_eq!(cfg.threads, 2);
    }

    #[test]
    fn unknown_flag_is_config_error_naming_it() {
        let mut cfg = RunConfig::default_plane();
        let err = apply_ablation_override(&mut cfg, "warp_twice=off").unwrap_err();
        assert!(err.to_string().contains("warp_twice"));
    }

    #[test]
    fn bad_flag_value_is_config_error() {
        let mut cfg = RunConfig::default_plane();
        assert!(apply_ablation_override(&mut cfg, "cpa=maybe").is_err());
        assert!(apply_ablation_override(&mut cfg, "cpa").is_err());
        apply_ablation_override(&mut cfg, "cpa=off").unwrap();
        assert!(!cfg.ablation.cpa);
    }

    #[test]
    fn missing_scene_section_is_config_error() {
        let err = parse_run_config("[run]\nseed = 1\n", Path::new(".")).unwrap_err();
        assert!(err.to_string().contains("scene"));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let err = parse_kv_text("[a]\nnot a kv line\n").unwrap_err();
        assert!(err.to_string().contains("line 2"));
    }

    #[test]
    fn scene_spec_round_trips_through_text() {
        let spec = crate::scenes::presets::benchmark_spec(5);
        let text = scene_spec_to_text(&spec);
        let parsed = parse_scene_spec(&text).unwrap();
        assert_eq!(parsed.seed, spec.seed);
        assert_eq!(parsed.num_classes, spec.num_classes);
        assert_eq!(parsed.primitives.len(), spec.primitives.len());
        for (a, b) in parsed.primitives.iter().zip(&spec.primitives) {
            assert_eq!(a.class_label, b.class_label);
            assert_eq!(a.extents, b.extents);
            assert_eq!(a.pose.rotation, b.pose.rotation);
            assert_eq!(a.pose.translation, b.pose.translation);
        }
        // and the resolved scenes agree bit for bit
        let s1 = crate::scenes::build_scene(&spec).unwrap();
        let s2 = crate::scenes::build_scene(&parsed).unwrap();
        assert_eq!(s1.canonical_bytes(), s2.canonical_bytes());
    }

    #[test]
    fn plane_scene_file_parses() {
        let text = "\
[scene]
seed = 424242
texture_frequency = 1.4
classes = 1
channels = 8

[primitive]
shape = plane
class = 1
extents = 14 14
translation = 0 0 5.3
";
        let spec = parse_scene_spec(text).unwrap();
        assert_eq!(spec.primitives.len(), 1);
        assert_eq!(spec.primitives[0].extents, [14.0, 14.0, 0.0]);
        assert_eq!(spec.primitives[0].pose.translation.z, 5.3);
    }

    #[test]
    fn explicit_frame_poses_are_collected_in_order() {
        let text = "\
[scene]
generate_seed = 1

[frames]
count = 2

[frame]
rotation = 1 0 0 0 1 0 0 0 1
translation = 0 0 0

[frame]
translation = 0.5 0 0
";
        let cfg = parse_run_config(text, Path::new(".")).unwrap();
        assert_eq!(cfg.explicit_poses.len(), 2);
        assert_eq!(cfg.explicit_poses[1].translation.x, 0.5);
    }

    #[test]
    fn wrong_pose_count_is_config_error() {
        let text = "\
[scene]
generate_seed = 1

[frames]
count = 3

[frame]
translation = 0 0 0
";
        assert!(parse_run_config(text, Path::new(".")).is_err());
    }
}
