//! End-to-end orchestration: scene to rendered frames, the geometric and
//! temporal branches, global composition, metrics and artifacts.
//!
//! Everything downstream of the config is a pure function of
//! `(config, seed)`: scenes, noise, kernels, taps and thread scheduling
//! are all derived deterministically, so repeated runs produce
//! byte-identical artifacts at any thread count.

use std::path::Path;
use std::time::Instant;

use nalgebra::{Rotation3, Vector3};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::alignment::{
    multigroup_context, multilevel_refine, pattern_affinity, seeded_context_kernels,
    PatternAffinity, RefineConfig,
};
use crate::compose::{
    evaluate, semantic_head, total_loss, voxel_pool, zero_gated_compose, ComposedVolume,
    LossWeights, PoolOutcome, SemanticVoxelGrid,
};
use crate::config::{AblationFlags, RunConfig, SceneSource};
use crate::error::{Error, Result};
use crate::geometry::{build_hypotheses, RigidPose};
use crate::io::{export_heatmap, export_voxel_grid};
use crate::lifting::{depth_confidence, lift_plain, lift_to_voxel_volume, LiftOutcome};
use crate::numerics::DenseArray;
use crate::scenes::{
    build_scene, gt_depth_bins, oracle_depth_feature, presets, render_frame, RenderedFrame, Scene,
    SceneSpec,
};
use crate::temporal::{
    build_cost_volume, build_temporal_volume, lift_current, FrameObservation, MatchMode,
    TemporalFeatureVolume,
};

/// Outcome of one pipeline run.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub run_id: String,
    pub iou: f64,
    pub miou: f64,
    pub per_class_iou: Vec<Option<f64>>,
    pub l_depth: f64,
    pub l_ce: f64,
    pub total_loss: f64,
    /// Measured wall time of the run. Persisted CSVs from `run` write
    /// this column as zero to stay byte-reproducible; the benchmark CSV
    /// records the measured value.
    pub wall_ms: f64,
    pub stage_ms: Vec<(&'static str, f64)>,
    /// Samples dropped outside the grid across all pooling calls.
    pub dropped_count: usize,
    /// Total absolute dropped feature mass across channels.
    pub dropped_mass: f64,
}

fn resolve_scene_spec(config: &RunConfig) -> Result<SceneSpec> {
    match &config.scene {
        SceneSource::Path(path) => crate::config::load_scene_spec(path),
        SceneSource::Generate {
            seed,
            primitives,
            classes,
        } => Ok(SceneSpec::random(
            *seed,
            *primitives,
            *classes,
            presets::BENCH_BOUND_MIN,
            presets::BENCH_BOUND_MAX,
            0.3,
            8,
        )),
        SceneSource::Inline(spec) => Ok(spec.clone()),
    }
}

/// True camera poses along the configured trajectory, current frame
/// first. The camera center translates by `frame_step` per step back in
/// time and yaws about world z.
pub fn generate_poses(config: &RunConfig) -> Result<Vec<RigidPose>> {
    if !config.explicit_poses.is_empty() {
        return Ok(config.explicit_poses.clone());
    }
    let step = Vector3::new(
        config.frame_step[0],
        config.frame_step[1],
        config.frame_step[2],
    );
    let base_c2w = config.camera_rotation.transpose();
    (0..config.frame_count)
        .map(|i| {
            let yaw = (i as f64) * config.yaw_step_deg.to_radians();
            let center = step * i as f64;
            let c2w = Rotation3::from_axis_angle(&Vector3::z_axis(), yaw).into_inner() * base_c2w;
            let rotation = c2w.transpose();
            let translation = -(rotation * center);
            RigidPose::new(rotation, translation)
        })
        .collect()
}

/// Poses handed to the warper: identical to the true poses unless pose
/// noise or pose shuffling is enabled. Shuffling rotates the historical
/// poses by one position (features keep their own frame), which
/// misassigns every historical pose when there are at least two.
fn warp_poses(config: &RunConfig, truth: &[RigidPose]) -> Result<Vec<RigidPose>> {
    let mut poses = truth.to_vec();
    let historical = poses.len() - 1;
    if config.ablation.pose_shuffle {
        if historical >= 2 {
            let first = poses[1];
            for i in 1..historical {
                poses[i] = poses[i + 1];
            }
            poses[historical] = first;
        } else {
            // single historical frame: the only wrong assignment available
            poses[1] = poses[0];
        }
    }
    if config.pose_noise_rot_deg > 0.0 || config.pose_noise_trans > 0.0 {
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        for (i, pose) in poses.iter_mut().enumerate().skip(1) {
            let mut rng = ChaCha8Rng::seed_from_u64(
                config.seed ^ 0x706f_7365 ^ ((i as u64) << 32), // "pose"
            );
            let axis = Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            let axis = if axis.norm() < 1e-9 {
                Vector3::x()
            } else {
                axis.normalize()
            };
            let angle = config.pose_noise_rot_deg.to_radians() * normal.sample(&mut rng);
            let jitter_rot =
                Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle)
                    .into_inner();
            let jitter_t = Vector3::new(
                config.pose_noise_trans * normal.sample(&mut rng),
                config.pose_noise_trans * normal.sample(&mut rng),
                config.pose_noise_trans * normal.sample(&mut rng),
            );
            *pose = RigidPose::new(jitter_rot * pose.rotation, pose.translation + jitter_t)?;
        }
    }
    Ok(poses)
}

/// Selector head weights: class k reads the scene's embedding channel of
/// k in every feature block, scaled so stacked blocks average.
fn selector_head_weights(scene: &Scene, blocks: usize) -> DenseArray {
    let c = scene.channels();
    let n = scene.num_classes();
    let mut weights = DenseArray::zeros(&[n + 1, blocks * c]);
    for class in 1..=n {
        let channel = scene.class_channel(class as u16);
        for b in 0..blocks {
            weights.set(&[class, b * c + channel], 1.0 / blocks as f64);
        }
    }
    weights
}

struct StageClock {
    start: Instant,
    last: Instant,
    stages: Vec<(&'static str, f64)>,
}

impl StageClock {
    fn new() -> Self {
        let now = Instant::now();
        StageClock {
            start: now,
            last: now,
            stages: Vec::new(),
        }
    }

    fn lap(&mut self, name: &'static str) {
        let now = Instant::now();
        self.stages
            .push((name, now.duration_since(self.last).as_secs_f64() * 1e3));
        self.last = now;
    }

    fn total_ms(&self) -> f64 {
        self.start.elapsed().as_secs_f64() * 1e3
    }
}

fn flags_suffix(flags: &AblationFlags) -> String {
    let mut parts = Vec::new();
    if !flags.gcl_confidence {
        parts.push("nogcl");
    }
    if !flags.cpa {
        parts.push("nocpa");
    }
    if !flags.adr {
        parts.push("noadr");
    }
    if !flags.dhbt {
        parts.push("nodhbt");
    }
    if flags.cost_volume_mode {
        parts.push("cost");
    }
    if flags.pose_shuffle {
        parts.push("shuffle");
    }
    if !flags.temporal_branch {
        parts.push("geoonly");
    }
    if !flags.geometric_branch {
        parts.push("temonly");
    }
    if parts.is_empty() {
        String::new()
    } else {
        format!("-{}", parts.join("-"))
    }
}

/// Run the pipeline with a derived run id.
pub fn run_pipeline(config: &RunConfig) -> Result<RunReport> {
    let id = format!("seed{:03}{}", config.seed, flags_suffix(&config.ablation));
    run_pipeline_with_id(config, &id)
}

/// Run the pipeline. Intra-op parallelism uses a private pool of
/// `config.threads` threads; results are bitwise independent of the
/// thread count.
pub fn run_pipeline_with_id(config: &RunConfig, run_id: &str) -> Result<RunReport> {
    config.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.threads)
        .build()
        .map_err(|e| Error::Config(format!("cannot build a {}-thread pool: {e}", config.threads)))?;
    pool.install(|| run_inner(config, run_id))
}

fn run_inner(config: &RunConfig, run_id: &str) -> Result<RunReport> {
    let mut clock = StageClock::new();
    let flags = &config.ablation;
    if !flags.temporal_branch && !flags.geometric_branch {
        return Err(Error::Config(
            "flag combo temporal_branch=off, geometric_branch=off leaves no pipeline".into(),
        ));
    }

    // -- scene, geometry, frames --
    let spec = resolve_scene_spec(config)?;
    let scene = build_scene(&spec)?;
    let hyps = build_hypotheses(
        config.d_min,
        config.d_max,
        config.hypothesis_count,
        config.spacing,
    )?;
    let true_poses = generate_poses(config)?;
    let frames: Vec<RenderedFrame> = true_poses
        .iter()
        .map(|pose| {
            render_frame(
                &scene,
                &config.intrinsics,
                pose,
                config.height,
                config.width,
            )
        })
        .collect::<Result<_>>()?;
    clock.lap("render");

    // -- geometric branch --
    let current = &frames[0];
    let fd = oracle_depth_feature(
        current,
        &hyps,
        config.oracle_sharpness,
        config.oracle_noise,
        config.seed ^ 0x6465_7074_68, // "depth"
    )?;
    let lift: LiftOutcome = if flags.gcl_confidence {
        let conf = depth_confidence(&fd)?;
        lift_to_voxel_volume(&current.feature, &fd, &conf)?
    } else {
        lift_plain(&current.feature, &fd)?
    };
    clock.lap("geometric");

    // -- temporal branch --
    let warp_pose_list = warp_poses(config, &true_poses)?;
    let mut temporal: Option<(TemporalFeatureVolume, PatternAffinity, DenseArray)> = None;
    if flags.temporal_branch {
        let observations: Vec<FrameObservation> = frames
            .iter()
            .enumerate()
            .map(|(i, frame)| FrameObservation {
                feature: frame.feature.clone(),
                intrinsics: frame.intrinsics,
                // With the geometric branch ablated the stack baseline
                // skips warping entirely: every frame pretends to sit at
                // the current pose.
                pose: if flags.geometric_branch {
                    warp_pose_list[i]
                } else {
                    warp_pose_list[0]
                },
                timestamp: -(i as i64),
            })
            .collect();
        let vtem = if flags.cost_volume_mode {
            let cost = build_cost_volume(&observations, &hyps, MatchMode::AbsDiff)?;
            let lifted = lift_current(&observations[0], &hyps);
            let s = lifted.shape().to_vec();
            let mut values = DenseArray::zeros(&[2 * s[0], s[1], s[2], s[3]]);
            let half = lifted.len();
            values.data_mut()[..half].copy_from_slice(lifted.data());
            values.data_mut()[half..].copy_from_slice(cost.data());
            TemporalFeatureVolume::new(values, s[0])?
        } else {
            build_temporal_volume(&observations, &hyps)?
        };
        clock.lap("temporal");

        let (d_n, h, w) = (
            vtem.values().shape()[1],
            vtem.values().shape()[2],
            vtem.values().shape()[3],
        );
        let aff = if flags.cpa {
            let kernels = seeded_context_kernels(
                vtem.block_channels(),
                config.seed ^ 0x6370_61, // "cpa"
            );
            let ctx_cur = multigroup_context(&vtem.current_block(), &kernels)?;
            let ctx_his = multigroup_context(&vtem.historical_block(), &kernels)?;
            pattern_affinity(&ctx_cur, &ctx_his)?
        } else {
            PatternAffinity::uniform_one(d_n, h, w)
        };

        let refined = if flags.adr {
            let refine_cfg = RefineConfig::seeded(
                vtem.block_channels(),
                config.seed ^ 0x6164_72, // "adr"
            );
            multilevel_refine(&vtem, &aff, &refine_cfg)?.into_values()
        } else {
            // plain mean of the two blocks, no deformable gathering
            let cur = vtem.current_block();
            let his = vtem.historical_block();
            let mut mean = cur;
            for (slot, v) in mean.data_mut().iter_mut().zip(his.data()) {
                *slot = 0.5 * (*slot + v);
            }
            mean
        };
        temporal = Some((vtem, aff, refined));
        clock.lap("alignment");
    }

    // -- global composition --
    let cur_pose = &true_poses[0];
    let mut dropped_count = 0usize;
    let mut dropped_mass = 0.0f64;
    let mut track = |outcome: &PoolOutcome| {
        dropped_count += outcome.dropped_count;
        dropped_mass += outcome.dropped_mass.iter().map(|m| m.abs()).sum::<f64>();
    };

    let (vcom, head_blocks): (ComposedVolume, usize) = if flags.dhbt {
        let pooled_tem = match &temporal {
            Some((_, _, refined)) => {
                let out = voxel_pool(refined, &hyps, &config.intrinsics, cur_pose, &config.grid)?;
                track(&out);
                Some(out.values)
            }
            None => None,
        };
        let pooled_vvox = if flags.geometric_branch {
            let out = voxel_pool(
                lift.volume.values(),
                &hyps,
                &config.intrinsics,
                cur_pose,
                &config.grid,
            )?;
            track(&out);
            Some(out.values)
        } else {
            None
        };
        let vcom = match (pooled_tem, pooled_vvox) {
            (Some(tem), Some(vvox)) => {
                let gate = vec![config.compose_gate; tem.shape()[0]];
                zero_gated_compose(&tem, &vvox, &gate)?
            }
            (Some(tem), None) => ComposedVolume::new(tem)?,
            (None, Some(vvox)) => ComposedVolume::new(vvox)?,
            (None, None) => unreachable!("at least one branch is enabled"),
        };
        (vcom, 1)
    } else {
        // naive fallback: concatenate the frustum volumes on channels and
        // pool the concatenation jointly
        let mut parts: Vec<&DenseArray> = Vec::new();
        if flags.geometric_branch {
            parts.push(lift.volume.values());
        }
        let refined_ref = temporal.as_ref().map(|(_, _, r)| r);
        if let Some(r) = refined_ref {
            parts.push(r);
        }
        let s = parts[0].shape().to_vec();
        let mut concat = DenseArray::zeros(&[parts.len() * s[0], s[1], s[2], s[3]]);
        let span = parts[0].len();
        for (i, part) in parts.iter().enumerate() {
            concat.data_mut()[i * span..(i + 1) * span].copy_from_slice(part.data());
        }
        let out = voxel_pool(&concat, &hyps, &config.intrinsics, cur_pose, &config.grid)?;
        track(&out);
        (ComposedVolume::new(out.values)?, parts.len())
    };

    let head = selector_head_weights(&scene, head_blocks);
    let (logits, prediction) = semantic_head(&vcom, &head)?;
    clock.lap("compose");

    // -- evaluation --
    let gt = crate::scenes::voxelize_ground_truth(&scene, &config.grid);
    let eval = evaluate(&prediction, &gt, None)?;
    let weights = LossWeights::uniform(scene.num_classes(), config.lambda_ce)?;
    let bins = gt_depth_bins(current, &hyps);
    let loss = total_loss(&logits, &gt, &lift.distribution, &bins, &weights, None)?;
    clock.lap("evaluate");

    let report = RunReport {
        run_id: run_id.to_string(),
        iou: eval.iou,
        miou: eval.miou,
        per_class_iou: eval.per_class_iou,
        l_depth: loss.l_depth,
        l_ce: loss.l_ce,
        total_loss: loss.total,
        wall_ms: clock.total_ms(),
        stage_ms: clock.stages.clone(),
        dropped_count,
        dropped_mass,
    };

    if let Some(dir) = &config.out_dir {
        write_artifacts(config, dir, &prediction, &gt, temporal.as_ref().map(|t| &t.1), &report)?;
    }
    Ok(report)
}

/// Artifacts of a `run`: prediction and ground-truth grids, an affinity
/// heatmap when the temporal branch ran, and the metrics CSV (timing
/// column zeroed so bytes are reproducible).
fn write_artifacts(
    config: &RunConfig,
    dir: &Path,
    prediction: &SemanticVoxelGrid,
    gt: &SemanticVoxelGrid,
    affinity: Option<&PatternAffinity>,
    report: &RunReport,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    export_voxel_grid(prediction, &dir.join("pred.hisopvox"))?;
    export_voxel_grid(gt, &dir.join("gt.hisopvox"))?;
    if let Some(aff) = affinity {
        let mid = aff.values().shape()[1] / 2;
        export_heatmap(aff, 0, mid, &dir.join("affinity.pgm"))?;
    }
    let mut persisted = report.clone();
    persisted.wall_ms = 0.0;
    report_metrics(std::slice::from_ref(&persisted), &dir.join("metrics.csv"))?;
    let _ = config;
    Ok(())
}

/// Write the metrics table: one fixed 6-decimal row per run, per-class
/// columns sized to the widest report, absent classes left empty.
pub fn report_metrics(reports: &[RunReport], path: &Path) -> Result<()> {
    if reports.is_empty() {
        return Err(Error::Argument(
            "report_metrics needs at least one run".into(),
        ));
    }
    let classes = reports
        .iter()
        .map(|r| r.per_class_iou.len())
        .max()
        .unwrap_or(0);
    let mut text = String::from("run_id,iou,miou");
    for c in 1..=classes {
        text.push_str(&format!(",class_{c}"));
    }
    text.push_str(",l_depth,l_ce,wall_ms\n");
    for r in reports {
        text.push_str(&format!("{},{:.6},{:.6}", r.run_id, r.iou, r.miou));
        for c in 0..classes {
            match r.per_class_iou.get(c).copied().flatten() {
                Some(v) => text.push_str(&format!(",{v:.6}")),
                None => text.push(','),
            }
        }
        text.push_str(&format!(
            ",{:.6},{:.6},{:.6}\n",
            r.l_depth, r.l_ce, r.wall_ms
        ));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Per-seed outcome of the alignment benchmark.
#[derive(Debug, Clone)]
pub struct BenchMargin {
    pub seed: u64,
    pub aligned_miou: f64,
    pub shuffled_miou: f64,
    pub ablated_miou: f64,
}

impl BenchMargin {
    pub fn margin_over_shuffled(&self) -> f64 {
        self.aligned_miou - self.shuffled_miou
    }

    pub fn margin_over_ablated(&self) -> f64 {
        self.aligned_miou - self.ablated_miou
    }
}

/// Full benchmark outcome: every run report plus the per-seed margins.
#[derive(Debug, Clone)]
pub struct BenchOutcome {
    pub reports: Vec<RunReport>,
    pub margins: Vec<BenchMargin>,
}

impl BenchOutcome {
    pub fn aligned_wins_over_shuffled(&self) -> usize {
        self.margins
            .iter()
            .filter(|m| m.margin_over_shuffled() > 0.0)
            .count()
    }

    pub fn aligned_wins_over_ablated(&self) -> usize {
        self.margins
            .iter()
            .filter(|m| m.margin_over_ablated() > 0.0)
            .count()
    }
}

/// Run the seeded-scene benchmark: for every seed, one fully aligned run,
/// one pose-shuffled run and one run without affinity gating or
/// deformable refinement. Writes `runs.csv` (measured timings) and
/// `margins.csv` when an output directory is given.
pub fn run_benchmark(
    base: &RunConfig,
    seeds: &[u64],
    out_dir: Option<&Path>,
) -> Result<BenchOutcome> {
    let mut reports = Vec::new();
    let mut margins = Vec::new();
    for &seed in seeds {
        let mut aligned_cfg = base.clone();
        aligned_cfg.scene = SceneSource::Generate {
            seed,
            primitives: 6,
            classes: 4,
        };
        aligned_cfg.seed = seed;
        aligned_cfg.out_dir = None;

        let mut shuffled_cfg = aligned_cfg.clone();
        shuffled_cfg.ablation.pose_shuffle = true;

        let mut ablated_cfg = aligned_cfg.clone();
        ablated_cfg.ablation.cpa = false;
        ablated_cfg.ablation.adr = false;

        let aligned =
            run_pipeline_with_id(&aligned_cfg, &format!("seed{seed:03}-aligned"))?;
        let shuffled =
            run_pipeline_with_id(&shuffled_cfg, &format!("seed{seed:03}-shuffled"))?;
        let ablated =
            run_pipeline_with_id(&ablated_cfg, &format!("seed{seed:03}-nocpa-noadr"))?;
        margins.push(BenchMargin {
            seed,
            aligned_miou: aligned.miou,
            shuffled_miou: shuffled.miou,
            ablated_miou: ablated.miou,
        });
        reports.extend([aligned, shuffled, ablated]);
    }
    let outcome = BenchOutcome { reports, margins };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        report_metrics(&outcome.reports, &dir.join("runs.csv"))?;
        write_margins_csv(&outcome.margins, &dir.join("margins.csv"))?;
    }
    Ok(outcome)
}

/// Companion table of the benchmark: per-seed aligned / shuffled /
/// ablated mIoU and the margins.
pub fn write_margins_csv(margins: &[BenchMargin], path: &Path) -> Result<()> {
    let mut text =
        String::from("seed,aligned_miou,shuffled_miou,margin_shuffled,ablated_miou,margin_ablated\n");
    for m in margins {
        text.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            m.seed,
            m.aligned_miou,
            m.shuffled_miou,
            m.margin_over_shuffled(),
            m.ablated_miou,
            m.margin_over_ablated()
        ));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// The ten benchmark seeds used by the directional acceptance check.
pub const BENCHMARK_SEEDS: [u64; 10] = [0, 1, 2, 3, 4, 5, 6, 7, 8, 9];

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;

    fn quick_config() -> RunConfig {
        let mut cfg = RunConfig::default_benchmark();
        cfg.width = 16;
        cfg.height = 16;
        cfg.intrinsics = crate::geometry::Intrinsics::new(12.0, 12.0, 7.5, 7.5).unwrap();
        cfg.hypothesis_count = 6;
        cfg.scene = SceneSource::Generate {
            seed: 3,
            primitives: 4,
            classes: 3,
        };
        cfg.seed = 3;
        cfg
    }

    #[test]
    fn pipeline_runs_and_reports() {
        let report = run_pipeline(&quick_config()).unwrap();
        assert!(report.miou >= 0.0 && report.miou <= 1.0);
        assert!(report.iou >= 0.0 && report.iou <= 1.0);
        assert!(report.total_loss >= 0.0);
        assert!(!report.stage_ms.is_empty());
    }

    #[test]
    fn pipeline_is_deterministic_in_memory() {
        let cfg = quick_config();
        let a = run_pipeline(&cfg).unwrap();
        let b = run_pipeline(&cfg).unwrap();
        assert_eq!(a.miou, b.miou);
        assert_eq!(a.iou, b.iou);
        assert_eq!(a.l_depth, b.l_depth);
        assert_eq!(a.l_ce, b.l_ce);
        assert_eq!(a.per_class_iou, b.per_class_iou);
    }

    #[test]
    fn pipeline_thread_count_does_not_change_results() {
        let mut cfg = quick_config();
        cfg.threads = 1;
        let a = run_pipeline(&cfg).unwrap();
        cfg.threads = 4;
        let b = run_pipeline(&cfg).unwrap();
        assert_eq!(a.miou, b.miou);
        assert_eq!(a.l_ce, b.l_ce);
        assert_eq!(a.per_class_iou, b.per_class_iou);
    }

    #[test]
    fn ablation_flags_compose_without_errors() {
        let combos: [&[&str]; 6] = [
            &["gcl_confidence=off"],
            &["cpa=off", "adr=off"],
            &["dhbt=off"],
            &["cost_volume_mode=on"],
            &["temporal_branch=off"],
            &["geometric_branch=off"],
        ];
        for combo in combos {
            let mut cfg = quick_config();
            for f in combo {
                crate::config::apply_ablation_override(&mut cfg, f).unwrap();
            }
            let report = run_pipeline(&cfg).unwrap();
            assert!(report.miou.is_finite(), "combo {combo:?}");
        }
    }

    #[test]
    fn disabling_both_branches_is_a_config_error() {
        let mut cfg = quick_config();
        cfg.ablation.temporal_branch = false;
        cfg.ablation.geometric_branch = false;
        assert!(matches!(run_pipeline(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn zero_gate_with_temporal_matches_geometric_only() {
        // The zero-initialized gate must make the temporal branch invisible.
        let mut with_temporal = quick_config();
        with_temporal.compose_gate = 0.0;
        let mut geometric_only = quick_config();
        geometric_only.ablation.temporal_branch = false;
        let a = run_pipeline(&with_temporal).unwrap();
        let b = run_pipeline(&geometric_only).unwrap();
        assert_eq!(a.miou, b.miou);
        assert_eq!(a.iou, b.iou);
        assert_eq!(a.per_class_iou, b.per_class_iou);
    }

    #[test]
    fn metrics_csv_formats_perfect_run() {
        let dir = tempfile::tempdir().unwrap();
        let report = RunReport {
            run_id: "perfect".into(),
            iou: 1.0,
            miou: 1.0,
            per_class_iou: vec![Some(1.0), None],
            l_depth: 0.0,
            l_ce: 0.0,
            total_loss: 0.0,
            wall_ms: 12.5,
            stage_ms: vec![],
            dropped_count: 0,
            dropped_mass: 0.0,
        };
        let path = dir.path().join("m.csv");
        report_metrics(&[report], &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "run_id,iou,miou,class_1,class_2,l_depth,l_ce,wall_ms"
        );
        assert_eq!(
            lines.next().unwrap(),
            "perfect,1.000000,1.000000,1.000000,,0.000000,0.000000,12.500000"
        );
    }

    #[test]
    fn metrics_csv_empty_list_is_argument_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            report_metrics(&[], &dir.path().join("m.csv")),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn metrics_csv_keeps_submission_order() {
        let dir = tempfile::tempdir().unwrap();
        let mk = |id: &str| RunReport {
            run_id: id.into(),
            iou: 0.5,
            miou: 0.25,
            per_class_iou: vec![],
            l_depth: 1.0,
            l_ce: 2.0,
            total_loss: 3.0,
            wall_ms: 0.0,
            stage_ms: vec![],
            dropped_count: 0,
            dropped_mass: 0.0,
        };
        let path = dir.path().join("m.csv");
        report_metrics(&[mk("first"), mk("second")], &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert!(lines[1].starts_with("first,"));
        assert!(lines[2].starts_with("second,"));
    }

    #[test]
    fn run_writes_all_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = quick_config();
        cfg.out_dir = Some(dir.path().join("out"));
        run_pipeline(&cfg).unwrap();
        for name in ["pred.hisopvox", "gt.hisopvox", "affinity.pgm", "metrics.csv"] {
            assert!(dir.path().join("out").join(name).exists(), "{name} missing");
        }
    }

    #[test]
    fn missing_scene_file_is_io_error_with_path() {
        let mut cfg = quick_config();
        cfg.scene = SceneSource::Path(std::path::PathBuf::from("/nonexistent/scene.scene"));
        let err = run_pipeline(&cfg).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/scene.scene"));
    }
}
