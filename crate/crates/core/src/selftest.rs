//! The acceptance checks, runnable headlessly from the binary and from
//! the integration suite. Each criterion states a property, a tolerance
//! and a runtime budget; a criterion passes only if the property holds
//! and the budget is met.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::alignment::{
    affinity_deformable_sample, multigroup_context, pattern_affinity, seeded_context_kernels,
    multilevel_refine, GroupContext, PatternAffinity, RefineConfig, TapSet,
};
use crate::compose::{
    evaluate, voxel_pool, zero_gated_compose, SemanticVoxelGrid, UnifiedGridSpec,
};
use crate::config::{RunConfig, SceneSource};
use crate::geometry::{
    backproject, build_hypotheses, warp_pixel, Intrinsics, RigidPose, Spacing,
};
use crate::lifting::{
    depth_confidence, lift_to_voxel_volume, linear_cross_attention, ContextFeature, DepthFeature,
};
use crate::numerics::DenseArray;
use crate::pipeline::{run_benchmark, run_pipeline, BENCHMARK_SEEDS};
use crate::scenes::presets;
use crate::temporal::{
    build_cost_volume, build_temporal_volume, FrameObservation, MatchMode,
};

/// Result of one acceptance criterion.
#[derive(Debug, Clone)]
pub struct CriterionOutcome {
    pub index: usize,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub millis: f64,
    pub budget_ms: f64,
}

impl CriterionOutcome {
    pub fn line(&self) -> String {
        format!(
            "[{}] {:2}. {:<28} {:>9.1} ms (budget {:>6.0} ms)  {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.index,
            self.name,
            self.millis,
            self.budget_ms,
            self.detail
        )
    }
}

fn run_criterion(
    index: usize,
    name: &'static str,
    budget_ms: f64,
    body: impl FnOnce() -> (bool, String),
) -> CriterionOutcome {
    let start = Instant::now();
    let (ok, detail) = body();
    let millis = start.elapsed().as_secs_f64() * 1e3;
    CriterionOutcome {
        index,
        name,
        passed: ok && millis <= budget_ms,
        detail,
        millis,
        budget_ms,
    }
}

fn random_array(shape: &[usize], seed: u64, lo: f64, hi: f64) -> DenseArray {
    let mut rng = StdRng::seed_from_u64(seed);
    let data = (0..shape.iter().product::<usize>())
        .map(|_| rng.gen_range(lo..hi))
        .collect();
    DenseArray::from_vec(shape, data).expect("random data is finite")
}

// -- 1. warp exactness -------------------------------------------------

fn warp_exactness() -> (bool, String) {
    let k = Intrinsics::new(64.0, 64.0, 31.5, 31.5).expect("valid intrinsics");
    let identity = RigidPose::identity();
    let mut max_err = 0.0f64;
    for ui in 0..32 {
        for vi in 0..32 {
            for d in [0.3, 1.0, 2.5, 5.3, 9.7, 40.0] {
                let (u, v) = (ui as f64 * 2.0, vi as f64 * 2.0);
                let Some((wu, wv)) = warp_pixel(&k, &k, &identity, (u, v), d).unwrap() else {
                    return (false, "identity warp flagged a valid pixel".into());
                };
                max_err = max_err.max((wu - u).abs()).max((wv - v).abs());
            }
        }
    }
    let ident_k = Intrinsics::new(1.0, 1.0, 0.0, 0.0).expect("valid intrinsics");
    let pose = RigidPose::new(
        nalgebra::Matrix3::identity(),
        nalgebra::Vector3::new(0.5, 0.0, 0.0),
    )
    .expect("translation pose");
    let (au, av) = warp_pixel(&ident_k, &ident_k, &pose, (1.0, 2.0), 4.0)
        .unwrap()
        .expect("analytic case is in front of the camera");
    let analytic_err = (au - 1.125).abs().max((av - 2.0).abs());
    let ok = max_err <= 1e-9 && analytic_err <= 1e-9;
    (
        ok,
        format!("identity max err {max_err:.2e}, analytic err {analytic_err:.2e}"),
    )
}

// -- 2. plane-sweep correspondence --------------------------------------

fn plane_frames() -> (Vec<FrameObservation>, crate::geometry::DepthHypothesisSet) {
    let scene = crate::scenes::build_scene(&presets::textured_plane_spec())
        .expect("bundled plane spec is valid");
    let (k, h, w) = presets::plane_camera();
    let hyps = build_hypotheses(2.0, 10.0, 16, Spacing::Linear).expect("valid range");
    let steps = [
        nalgebra::Vector3::new(0.0, 0.0, 0.0),
        nalgebra::Vector3::new(-0.22, 0.05, 0.0),
        nalgebra::Vector3::new(-0.44, 0.1, 0.0),
        nalgebra::Vector3::new(-0.66, 0.15, 0.0),
    ];
    let frames = steps
        .iter()
        .enumerate()
        .map(|(i, center)| {
            let rotation = nalgebra::Matrix3::identity();
            let pose = RigidPose::new(rotation, -(rotation * center)).expect("valid pose");
            let frame = crate::scenes::render_frame(&scene, &k, &pose, h, w)
                .expect("rendering the plane succeeds");
            FrameObservation {
                feature: frame.feature,
                intrinsics: k,
                pose,
                timestamp: -(i as i64),
            }
        })
        .collect();
    (frames, hyps)
}

fn plane_sweep_correspondence() -> (bool, String) {
    let (frames, hyps) = plane_frames();
    let want_bin = hyps.nearest_index(presets::PLANE_DEPTH);
    let (h, w) = (64usize, 64usize);
    // textured interior: pixels whose true-depth correspondence stays
    // inside every historical frame (largest baseline shifts ~8 px)
    let margin = 10usize;
    let plane = h * w;

    // matching-cost route
    let cost = build_cost_volume(&frames, &hyps, MatchMode::AbsDiff)
        .expect("cost volume on the plane scene");
    let c_n = cost.shape()[0];
    let d_n = cost.shape()[1];
    let mut cost_hits = 0usize;
    let mut textured = 0usize;
    for y in margin..h - margin {
        for x in margin..w - margin {
            textured += 1;
            let mut best = 0usize;
            let mut best_v = f64::INFINITY;
            for d in 0..d_n {
                let mut v = 0.0;
                for c in 0..c_n {
                    v += cost.data()[((c * d_n + d) * h + y) * w + x];
                }
                if v < best_v {
                    best_v = v;
                    best = d;
                }
            }
            if best == want_bin {
                cost_hits += 1;
            }
        }
    }

    // affinity route
    let vtem = build_temporal_volume(&frames, &hyps).expect("temporal volume");
    let kernels = seeded_context_kernels(vtem.block_channels(), 0x706c_616e_65); // "plane"
    let ctx_cur = multigroup_context(&vtem.current_block(), &kernels).expect("current context");
    let ctx_his = multigroup_context(&vtem.historical_block(), &kernels).expect("history context");
    let aff = pattern_affinity(&ctx_cur, &ctx_his).expect("affinity");
    let mut aff_hits = 0usize;
    for y in margin..h - margin {
        for x in margin..w - margin {
            let mut best = 0usize;
            let mut best_v = f64::NEG_INFINITY;
            for d in 0..d_n {
                let v = aff.values().data()[(d * h + y) * w + x];
                if v > best_v {
                    best_v = v;
                    best = d;
                }
            }
            if best == want_bin {
                aff_hits += 1;
            }
        }
    }
    let _ = plane;
    let cost_rate = cost_hits as f64 / textured as f64;
    let aff_rate = aff_hits as f64 / textured as f64;
    (
        cost_rate >= 0.95 && aff_rate >= 0.95,
        format!(
            "cost argmin {:.1}%, affinity argmax {:.1}% at hypothesis {} ({} px)",
            cost_rate * 100.0,
            aff_rate * 100.0,
            want_bin,
            textured
        ),
    )
}

// -- 3. scale-aware affinity invariance ----------------------------------

fn affinity_invariance() -> (bool, String) {
    let mk = |v: &DenseArray| {
        GroupContext::new(vec![v.clone(), v.clone(), v.clone()])
            .expect("three equal groups form a context")
    };
    let mut worst_pos = 0.0f64;
    let mut worst_neg = 0.0f64;
    let mut worst_bound = 0.0f64;
    let mut rng = StdRng::seed_from_u64(33);
    for case in 0..100u64 {
        let x = random_array(&[6, 2, 3, 3], 5000 + case, -2.0, 2.0);
        let a = rng.gen_range(0.2..3.0);
        let b = rng.gen_range(-2.0..2.0);
        let pos = DenseArray::from_vec(
            &[6, 2, 3, 3],
            x.data().iter().map(|v| a * v + b).collect(),
        )
        .expect("finite");
        let neg = DenseArray::from_vec(
            &[6, 2, 3, 3],
            x.data().iter().map(|v| -a * v + b).collect(),
        )
        .expect("finite");
        let aff_pos = pattern_affinity(&mk(&x), &mk(&pos)).expect("affinity");
        let aff_neg = pattern_affinity(&mk(&x), &mk(&neg)).expect("affinity");
        for &v in aff_pos.values().data() {
            worst_pos = worst_pos.max((v - 1.0).abs());
            worst_bound = worst_bound.max(v.abs());
        }
        for &v in aff_neg.values().data() {
            worst_neg = worst_neg.max((v + 1.0).abs());
            worst_bound = worst_bound.max(v.abs());
        }
    }
    let ok = worst_pos <= 1e-6 && worst_neg <= 1e-6 && worst_bound <= 1.0 + 1e-9;
    (
        ok,
        format!(
            "max |aff-1| {worst_pos:.2e}, max |aff+1| {worst_neg:.2e}, max |aff| {worst_bound:.12}"
        ),
    )
}

// -- 4. linear-attention oracle ------------------------------------------

fn naive_attention(q: &DenseArray, k: &DenseArray, v: &DenseArray, conf: &[f64]) -> Vec<f64> {
    let (nq, c) = (q.shape()[0], q.shape()[1]);
    let nk = k.shape()[0];
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
    let mut out = vec![0.0; nq * c];
    for qi in 0..nq {
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

fn attention_oracle() -> (bool, String) {
    let mut rng = StdRng::seed_from_u64(77);
    let mut max_err = 0.0f64;
    for case in 0..200u64 {
        let nq = rng.gen_range(1..=32);
        let nk = rng.gen_range(1..=32);
        let c = rng.gen_range(1..=8);
        let q = random_array(&[nq, c], 9000 + case, -3.0, 3.0);
        let k = random_array(&[nk, c], 19000 + case, -3.0, 3.0);
        let v = random_array(&[nk, c], 29000 + case, -3.0, 3.0);
        let conf: Vec<f64> = (0..nq).map(|_| rng.gen_range(0.05..1.0)).collect();
        let got = linear_cross_attention(&q, &k, &v, &conf).expect("valid shapes");
        let want = naive_attention(&q, &k, &v, &conf);
        for (g, w) in got.data().iter().zip(&want) {
            max_err = max_err.max((g - w).abs());
        }
    }
    (max_err <= 1e-9, format!("max |impl - oracle| {max_err:.2e}"))
}

// -- 5. lifting conservation ----------------------------------------------

fn lifting_conservation() -> (bool, String) {
    let mut rng = StdRng::seed_from_u64(55);
    let mut max_mass_err = 0.0f64;
    let mut bounds_ok = true;
    let mut uniform_exact = true;
    for case in 0..50u64 {
        let c = rng.gen_range(1..=6);
        let d = rng.gen_range(2..=8);
        let h = rng.gen_range(2..=6);
        let w = rng.gen_range(2..=6);
        let fc = ContextFeature::new(random_array(&[c, h, w], 100 + case, -3.0, 3.0))
            .expect("rank 3");
        let fd = DepthFeature::new(random_array(&[d, h, w], 200 + case, -4.0, 4.0))
            .expect("rank 3");
        let conf = depth_confidence(&fd).expect("confidence");
        for &v in conf.values().data() {
            if v < 1.0 / d as f64 - 1e-12 || v > 1.0 + 1e-12 {
                bounds_ok = false;
            }
        }
        let lifted = lift_to_voxel_volume(&fc, &fd, &conf).expect("lifting");
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let mut sum = 0.0;
                    for di in 0..d {
                        sum += lifted.volume.values().get(&[ci, di, y, x]);
                    }
                    max_mass_err = max_mass_err.max((sum - fc.values().get(&[ci, y, x])).abs());
                }
            }
        }
        // uniform logits must hit exactly 1/D
        let flat = DepthFeature::new(DenseArray::filled(&[d, h, w], rng.gen_range(-1.0..1.0)))
            .expect("rank 3");
        let flat_conf = depth_confidence(&flat).expect("confidence");
        if flat_conf.values().data().iter().any(|&v| v != 1.0 / d as f64) {
            uniform_exact = false;
        }
    }
    let ok = max_mass_err <= 1e-9 && bounds_ok && uniform_exact;
    (
        ok,
        format!(
            "max mass err {max_mass_err:.2e}, bounds {}, uniform exact {}",
            if bounds_ok { "ok" } else { "violated" },
            uniform_exact
        ),
    )
}

// -- 6. voxel-pool conservation and oracle equality -------------------------

fn voxel_pool_oracle() -> (bool, String) {
    let mut rng = StdRng::seed_from_u64(66);
    let mut bitwise = true;
    let mut max_rel = 0.0f64;
    for case in 0..50u64 {
        let hyps = build_hypotheses(
            rng.gen_range(0.5..1.5),
            rng.gen_range(3.0..6.0),
            rng.gen_range(2..=5),
            Spacing::Linear,
        )
        .expect("valid range");
        let k = Intrinsics::new(
            rng.gen_range(2.0..5.0),
            rng.gen_range(2.0..5.0),
            rng.gen_range(1.0..2.0),
            rng.gen_range(1.0..2.0),
        )
        .expect("valid intrinsics");
        let rot = nalgebra::Rotation3::from_euler_angles(
            rng.gen_range(-0.3..0.3),
            rng.gen_range(-0.3..0.3),
            rng.gen_range(-0.3..0.3),
        );
        let pose = RigidPose::new(
            rot.into_inner(),
            nalgebra::Vector3::new(rng.gen_range(-0.4..0.4), 0.0, rng.gen_range(-0.4..0.4)),
        )
        .expect("valid pose");
        let grid = UnifiedGridSpec::new([6, 6, 6], 0.8, [-2.4, -2.4, -0.8]).expect("valid grid");
        let (c_n, h, w) = (2usize, 3usize, 4usize);
        let d_n = hyps.count();
        let vol = random_array(&[c_n, d_n, h, w], 7000 + case, -2.0, 2.0);
        let got = voxel_pool(&vol, &hyps, &k, &pose, &grid).expect("pooling");

        // independent naive loop
        let cells = grid.voxel_count();
        let mut want = vec![0.0; c_n * cells];
        let mut want_dropped = vec![0.0; c_n];
        for c in 0..c_n {
            for y in 0..h {
                for x in 0..w {
                    for j in 0..d_n {
                        let cam = backproject(&k, (x as f64, y as f64), hyps.value(j))
                            .expect("positive depth");
                        let world = pose.camera_to_world(cam);
                        let v = vol.get(&[c, j, y, x]);
                        match grid.cell_of(world) {
                            Some(cell) => want[c * cells + cell] += v,
                            None => want_dropped[c] += v,
                        }
                    }
                }
            }
        }
        if got.values.data() != &want[..] {
            bitwise = false;
        }
        for c in 0..c_n {
            let input: f64 = (0..d_n * h * w)
                .map(|i| vol.data()[c * d_n * h * w + i])
                .sum();
            let output: f64 = got.values.data()[c * cells..(c + 1) * cells].iter().sum();
            let rel = ((output + got.dropped_mass[c]) - input).abs() / input.abs().max(1.0);
            max_rel = max_rel.max(rel);
        }
    }
    (
        bitwise && max_rel <= 1e-9,
        format!(
            "bitwise {}, max relative mass err {max_rel:.2e}",
            if bitwise { "equal" } else { "UNEQUAL" }
        ),
    )
}

// -- 7. zero-gate identity ---------------------------------------------------

fn zero_gate_identity() -> (bool, String) {
    let hyps = build_hypotheses(2.0, 6.0, 4, Spacing::Linear).expect("valid range");
    let k = Intrinsics::new(6.0, 6.0, 3.5, 3.5).expect("valid intrinsics");
    let grid = UnifiedGridSpec::new([8, 8, 8], 1.0, [-4.0, -4.0, 0.0]).expect("valid grid");
    let vvox = random_array(&[3, 4, 8, 8], 911, -2.0, 2.0);
    let vtem = random_array(&[3, 4, 8, 8], 912, -2.0, 2.0);
    let pooled_vvox = voxel_pool(&vvox, &hyps, &k, &RigidPose::identity(), &grid)
        .expect("pooling")
        .values;
    let pooled_tem = voxel_pool(&vtem, &hyps, &k, &RigidPose::identity(), &grid)
        .expect("pooling")
        .values;
    let composed = zero_gated_compose(&pooled_tem, &pooled_vvox, &[0.0; 3]).expect("compose");
    let identical = composed.values().data() == pooled_vvox.data();
    (
        identical,
        format!(
            "gate 0 output {} the pooled geometric volume",
            if identical { "bitwise equals" } else { "DIFFERS from" }
        ),
    )
}

// -- 8. metric oracle ----------------------------------------------------------

fn confusion_oracle(pred: &SemanticVoxelGrid, gt: &SemanticVoxelGrid) -> (f64, f64) {
    let n = gt.num_classes();
    let mut m = vec![vec![0usize; n + 1]; n + 1];
    for (a, b) in pred.labels().iter().zip(gt.labels()) {
        m[*a as usize][*b as usize] += 1;
    }
    let inter_occ: usize = (1..=n)
        .map(|a| (1..=n).map(|b| m[a][b]).sum::<usize>())
        .sum();
    let pred_occ: usize = (1..=n).map(|a| m[a].iter().sum::<usize>()).sum();
    let gt_occ: usize = (0..=n)
        .map(|a| (1..=n).map(|b| m[a][b]).sum::<usize>())
        .sum();
    let union = pred_occ + gt_occ - inter_occ;
    let iou = if union == 0 {
        1.0
    } else {
        inter_occ as f64 / union as f64
    };
    let mut sum = 0.0;
    let mut present = 0usize;
    for c in 1..=n {
        let inter = m[c][c];
        let row: usize = m[c].iter().sum();
        let col: usize = (0..=n).map(|a| m[a][c]).sum();
        let u = row + col - inter;
        if u > 0 {
            sum += inter as f64 / u as f64;
            present += 1;
        }
    }
    let miou = if present == 0 { 1.0 } else { sum / present as f64 };
    (iou, miou)
}

fn metric_oracle() -> (bool, String) {
    let mut rng = StdRng::seed_from_u64(88);
    let mut exact = true;
    for _ in 0..100 {
        let e = [
            rng.gen_range(1..=16usize),
            rng.gen_range(1..=16usize),
            rng.gen_range(1..=16usize),
        ];
        let n = rng.gen_range(1..=5usize);
        let count = e.iter().product();
        let pred = SemanticVoxelGrid::from_labels(
            e,
            (0..count).map(|_| rng.gen_range(0..=n as u16)).collect(),
            n,
        )
        .expect("valid labels");
        let gt = SemanticVoxelGrid::from_labels(
            e,
            (0..count).map(|_| rng.gen_range(0..=n as u16)).collect(),
            n,
        )
        .expect("valid labels");
        let r = evaluate(&pred, &gt, None).expect("evaluation");
        let (iou, miou) = confusion_oracle(&pred, &gt);
        if r.iou != iou || r.miou != miou {
            exact = false;
        }
    }
    // exhaustive monotonicity sweep on 2x2x1 grids
    let mut monotone = true;
    let all: Vec<Vec<u16>> = (0..81u32)
        .map(|i| (0..4).map(|p| ((i / 3u32.pow(p)) % 3) as u16).collect())
        .collect();
    for pred_labels in &all {
        for gt_labels in &all {
            let gt = SemanticVoxelGrid::from_labels([2, 2, 1], gt_labels.clone(), 2)
                .expect("valid labels");
            let base = evaluate(
                &SemanticVoxelGrid::from_labels([2, 2, 1], pred_labels.clone(), 2)
                    .expect("valid labels"),
                &gt,
                None,
            )
            .expect("evaluation")
            .miou;
            for p in 0..4 {
                if pred_labels[p] != gt_labels[p] {
                    let mut fixed = pred_labels.clone();
                    fixed[p] = gt_labels[p];
                    let better = evaluate(
                        &SemanticVoxelGrid::from_labels([2, 2, 1], fixed, 2)
                            .expect("valid labels"),
                        &gt,
                        None,
                    )
                    .expect("evaluation")
                    .miou;
                    if better < base - 1e-12 {
                        monotone = false;
                    }
                }
            }
        }
    }
    (
        exact && monotone,
        format!(
            "oracle {}, monotonicity {}",
            if exact { "exact" } else { "MISMATCH" },
            if monotone { "holds" } else { "VIOLATED" }
        ),
    )
}

// -- 9. deformable identity and linearity ---------------------------------------

fn deformable_identity_linearity() -> (bool, String) {
    let vol = random_array(&[4, 3, 5, 5], 991, -2.0, 2.0);
    let vtem = crate::temporal::TemporalFeatureVolume::new(vol.clone(), 2).expect("2C volume");
    let ones = PatternAffinity::uniform_one(3, 5, 5);
    let refined = multilevel_refine(&vtem, &ones, &RefineConfig::identity(4)).expect("refine");
    let mut max_ident = 0.0f64;
    for (a, b) in refined.values().data().iter().zip(vol.data()) {
        max_ident = max_ident.max((a - b).abs());
    }

    let taps = TapSet::seeded(71);
    let base = random_array(&[3, 3, 5, 5], 992, -2.4, 2.4);
    let unit = DenseArray::from_vec(
        &[3, 3, 5, 5],
        base.data().iter().map(|v| v / 2.5).collect(),
    )
    .expect("finite");
    let mut max_linear = 0.0f64;
    for scale in [0.3, 0.7] {
        let scaled = DenseArray::from_vec(
            &[3, 3, 5, 5],
            unit.data().iter().map(|v| v * scale).collect(),
        )
        .expect("finite");
        let a = affinity_deformable_sample(
            &vol,
            &taps,
            &PatternAffinity::new(unit.clone()).expect("bounded"),
            1,
        )
        .expect("sampling");
        let b = affinity_deformable_sample(
            &vol,
            &taps,
            &PatternAffinity::new(scaled).expect("bounded"),
            1,
        )
        .expect("sampling");
        for (x, y) in a.data().iter().zip(b.data()) {
            max_linear = max_linear.max((x * scale - y).abs());
        }
    }
    let ok = max_ident <= 1e-12 && max_linear <= 1e-9;
    (
        ok,
        format!("identity err {max_ident:.2e}, linearity err {max_linear:.2e}"),
    )
}

// -- 10. end-to-end directional check --------------------------------------------

fn directional_benchmark(out_dir: &Path, threads: usize) -> (bool, String) {
    let mut base = RunConfig::default_benchmark();
    base.threads = threads;
    let outcome = match run_benchmark(&base, &BENCHMARK_SEEDS, Some(out_dir)) {
        Ok(o) => o,
        Err(e) => return (false, format!("benchmark failed: {e}")),
    };
    let shuffled_wins = outcome.aligned_wins_over_shuffled();
    let ablated_wins = outcome.aligned_wins_over_ablated();
    let mean_shuffle_margin: f64 = outcome
        .margins
        .iter()
        .map(|m| m.margin_over_shuffled())
        .sum::<f64>()
        / outcome.margins.len() as f64;
    let mean_ablate_margin: f64 = outcome
        .margins
        .iter()
        .map(|m| m.margin_over_ablated())
        .sum::<f64>()
        / outcome.margins.len() as f64;
    let ok = shuffled_wins >= 9 && ablated_wins >= 8;
    (
        ok,
        format!(
            "aligned > shuffled {shuffled_wins}/10 (mean +{mean_shuffle_margin:.4}), \
             aligned > no-cpa/no-adr {ablated_wins}/10 (mean +{mean_ablate_margin:.4}), \
             margins in {}",
            out_dir.join("margins.csv").display()
        ),
    )
}

// -- 11. determinism ----------------------------------------------------------------

fn determinism(out_dir: &Path) -> (bool, String) {
    let artifacts = ["pred.hisopvox", "gt.hisopvox", "metrics.csv"];
    let run_into = |dir: PathBuf, threads: usize| -> crate::error::Result<PathBuf> {
        let mut cfg = RunConfig::default_benchmark();
        cfg.scene = SceneSource::Generate {
            seed: 5,
            primitives: 6,
            classes: 4,
        };
        cfg.seed = 5;
        cfg.threads = threads;
        cfg.out_dir = Some(dir.clone());
        run_pipeline(&cfg)?;
        Ok(dir)
    };
    let a = match run_into(out_dir.join("det-a"), 1) {
        Ok(p) => p,
        Err(e) => return (false, format!("run failed: {e}")),
    };
    let b = match run_into(out_dir.join("det-b"), 1) {
        Ok(p) => p,
        Err(e) => return (false, format!("run failed: {e}")),
    };
    let c = match run_into(out_dir.join("det-c"), 4) {
        Ok(p) => p,
        Err(e) => return (false, format!("run failed: {e}")),
    };
    for name in artifacts {
        let bytes_a = std::fs::read(a.join(name)).unwrap_or_default();
        let bytes_b = std::fs::read(b.join(name)).unwrap_or_default();
        let bytes_c = std::fs::read(c.join(name)).unwrap_or_default();
        if bytes_a.is_empty() || bytes_a != bytes_b || bytes_a != bytes_c {
            return (false, format!("{name} differs between runs or threads"));
        }
    }
    (true, "all artifacts bitwise identical at 1 and 4 threads".into())
}

/// Run every acceptance criterion. Artifact-producing criteria write
/// under `out_dir` (a temp directory by default).
pub fn run_all(threads: usize, out_dir: Option<&Path>) -> Vec<CriterionOutcome> {
    let fallback = std::env::temp_dir().join(format!("hisop-selftest-{}", std::process::id()));
    let out = out_dir.map(Path::to_path_buf).unwrap_or(fallback);
    let _ = std::fs::create_dir_all(&out);

    vec![
        run_criterion(1, "warp-exactness", 1_000.0, warp_exactness),
        run_criterion(2, "plane-sweep-correspondence", 10_000.0, plane_sweep_correspondence),
        run_criterion(3, "affinity-invariance", 5_000.0, affinity_invariance),
        run_criterion(4, "attention-oracle", 5_000.0, attention_oracle),
        run_criterion(5, "lifting-conservation", 5_000.0, lifting_conservation),
        run_criterion(6, "voxel-pool-oracle", 10_000.0, voxel_pool_oracle),
        run_criterion(7, "zero-gate-identity", 1_000.0, zero_gate_identity),
        run_criterion(8, "metric-oracle", 5_000.0, metric_oracle),
        run_criterion(9, "deformable-identity", 5_000.0, deformable_identity_linearity),
        run_criterion(10, "directional-benchmark", 60_000.0, || {
            directional_benchmark(&out.join("bench"), threads)
        }),
        run_criterion(11, "determinism", 30_000.0, || {
            determinism(&out)
        }),
    ]
}
