//! Seeded invariant suite.
//!
//! Each invariant runs once per trial with its own seed, derived from the
//! root seed, the `check` stream, the invariant index and the trial index. A
//! failure records the invariant name and that trial seed, which
//! [`run_invariant`] replays.

use std::panic::{catch_unwind, AssertUnwindSafe};

use nalgebra::Vector3;
use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::augment::{
    apply_bda_boxes, apply_bda_feature, sample_bda, sample_ida, warp_feature_lattice, BdaConfig, IdaConfig,
};
use crate::config::{BdaSection, IdaSection, PipelineConfig};
use crate::encoder::{encode_image, EncoderKind};
use crate::geometry::{
    camera_to_ego, compose_aug, pixel_to_camera, unproject_augmented, wrap_angle, AugOp, AugTransform2D,
    Camera, CameraIntrinsics, CameraPoint, PixelPoint,
};
use crate::head::{decode, encode_targets, Box3D, DecodeParams};
use crate::metrics::{
    average_precision, evaluate, match_detections, nds, Scored, NDS_REFERENCE_ROWS,
};
use crate::pipeline::Pipeline;
use crate::raster::{DepthRaster, ImageU8};
use crate::rng::{derive_seed, stream_rng};
use crate::scenegen::{generate_scene, make_rig, render_camera, NUM_ATTRIBUTES};
use crate::view_transform::{
    in_range_mass, lattice_coord, lift, splat_naive, splat_sorted, view_transform, BevFeature, BevGrid,
    CameraFeatures, DepthBins, DepthLogits, FeatureMap, PointFeatureCloud,
};
use crate::{Error, Result};

pub const STREAM_CHECK: &str = "check";

/// Test-only mutations of library paths, used to confirm the suite can fail.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Hooks {
    /// Unproject augmented pixels through `A` rather than `A^-1`.
    pub corrupt_unprojection: bool,
}

type Outcome = std::result::Result<(), String>;

struct Ctx {
    cfg: PipelineConfig,
    grid: BevGrid,
    bins: DepthBins,
    rig: Vec<Camera>,
    hooks: Hooks,
}

struct Invariant {
    name: &'static str,
    run: fn(&Ctx, &mut ChaCha8Rng) -> Outcome,
}

const INVARIANTS: &[Invariant] = &[
    Invariant { name: "geometry.augmented_unprojection", run: unprojection_invariance },
    Invariant { name: "geometry.aug_inverse_round_trip", run: aug_round_trip },
    Invariant { name: "geometry.reprojection", run: reprojection },
    Invariant { name: "view_transform.depth_normalization", run: depth_normalization },
    Invariant { name: "view_transform.mass_conservation", run: mass_conservation },
    Invariant { name: "view_transform.kernel_equivalence", run: kernel_equivalence },
    Invariant { name: "view_transform.splat_additivity", run: splat_additivity },
    Invariant { name: "view_transform.flip_decoupling", run: flip_decoupling },
    Invariant { name: "view_transform.fractional_decoupling", run: fractional_decoupling },
    Invariant { name: "augment.bda_joint_consistency", run: bda_joint_consistency },
    Invariant { name: "augment.bda_group", run: bda_group },
    Invariant { name: "encoder.determinism", run: encoder_determinism },
    Invariant { name: "encoder.footprint_mass", run: footprint_mass },
    Invariant { name: "head.codec_round_trip", run: codec_round_trip },
    Invariant { name: "head.decode_permutation", run: decode_permutation },
    Invariant { name: "metrics.matcher_oracle", run: matcher_oracle },
    Invariant { name: "metrics.nds_reference", run: nds_reference },
    Invariant { name: "metrics.ap_monotonicity", run: ap_monotonicity },
    Invariant { name: "metrics.self_evaluation", run: self_evaluation },
    Invariant { name: "metrics.equal_score_permutation", run: equal_score_permutation },
    Invariant { name: "scenegen.surface_reconstruction", run: surface_reconstruction },
    Invariant { name: "scenegen.disjoint_footprints", run: disjoint_footprints },
    Invariant { name: "pipeline.determinism", run: pipeline_determinism },
    Invariant { name: "pipeline.collapsed_augmentation", run: collapsed_augmentation },
];

pub fn invariant_names() -> Vec<&'static str> {
    INVARIANTS.iter().map(|i| i.name).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Failure {
    pub invariant: String,
    pub seed: u64,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InvariantReport {
    pub name: String,
    pub trials: usize,
    pub failures: Vec<Failure>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckReport {
    pub seed: u64,
    pub trials: usize,
    pub invariants: Vec<InvariantReport>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.invariants.iter().all(|i| i.failures.is_empty())
    }

    pub fn failures(&self) -> impl Iterator<Item = &Failure> {
        self.invariants.iter().flat_map(|i| &i.failures)
    }
}

fn context(cfg: &PipelineConfig, hooks: Hooks) -> Result<Ctx> {
    cfg.validate()?;
    Ok(Ctx {
        grid: cfg.grid()?,
        bins: cfg.depth_bins()?,
        rig: make_rig(cfg.scene.n_cameras, cfg.scene.hfov_deg.to_radians(), cfg.scene.image_size_px)?,
        cfg: cfg.clone(),
        hooks,
    })
}

fn trial_seed(root: u64, invariant: usize, trial: usize) -> u64 {
    derive_seed(root, STREAM_CHECK, &[invariant as u64, trial as u64])
}

fn run_one(ctx: &Ctx, inv: &Invariant, seed: u64) -> Outcome {
    let mut rng = stream_rng(seed, STREAM_CHECK, &[]);
    match catch_unwind(AssertUnwindSafe(|| (inv.run)(ctx, &mut rng))) {
        Ok(r) => r,
        Err(p) => Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .map_or_else(|| "panicked".into(), |m| format!("panicked: {m}"))),
    }
}

/// Run every invariant `trials` times.
pub fn run_suite(cfg: &PipelineConfig, seed: u64, trials: usize, hooks: Hooks) -> Result<CheckReport> {
    if trials == 0 {
        return Err(Error::InvalidParameter("trials must be at least 1".into()));
    }
    let ctx = context(cfg, hooks)?;
    let jobs: Vec<(usize, usize)> = (0..INVARIANTS.len())
        .flat_map(|i| (0..trials).map(move |t| (i, t)))
        .collect();
    let outcomes: Vec<(usize, u64, Outcome)> = jobs
        .into_par_iter()
        .map(|(i, t)| {
            let s = trial_seed(seed, i, t);
            (i, s, run_one(&ctx, &INVARIANTS[i], s))
        })
        .collect();
    let mut invariants: Vec<InvariantReport> = INVARIANTS
        .iter()
        .map(|i| InvariantReport {
            name: i.name.into(),
            trials,
            failures: Vec::new(),
        })
        .collect();
    for (i, s, o) in outcomes {
        if let Err(message) = o {
            invariants[i].failures.push(Failure {
                invariant: INVARIANTS[i].name.into(),
                seed: s,
                message,
            });
        }
    }
    Ok(CheckReport {
        seed,
        trials,
        invariants,
    })
}

/// Replay one invariant at a trial seed taken from a [`Failure`].
pub fn run_invariant(cfg: &PipelineConfig, name: &str, seed: u64, hooks: Hooks) -> Result<Option<String>> {
    let inv = INVARIANTS
        .iter()
        .find(|i| i.name == name)
        .ok_or_else(|| Error::InvalidParameter(format!("unknown invariant {name:?}")))?;
    let ctx = context(cfg, hooks)?;
    Ok(run_one(&ctx, inv, seed).err())
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Outcome {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn lib<T>(r: Result<T>) -> std::result::Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

// ---------------------------------------------------------------- geometry

fn random_intrinsics(rng: &mut ChaCha8Rng) -> std::result::Result<CameraIntrinsics, String> {
    let fx = rng.random_range(200.0..2000.0);
    let fy = fx * rng.random_range(0.9..1.1);
    lib(CameraIntrinsics::from_focal(
        fx,
        fy,
        rng.random_range(200.0..1400.0),
        rng.random_range(100.0..800.0),
    ))
}

fn ida_family(ctx: &Ctx) -> IdaConfig {
    let mut ida = ctx.cfg.ida_config(ctx.cfg.scene.image_size_px);
    if !ctx.cfg.ida.enabled {
        // Still exercise the configured ranges.
        ida.flip_prob = ida.flip_prob.max(0.5);
    }
    ida
}

fn unproject(ctx: &Ctx, p_aug: PixelPoint, d: f64, k: &CameraIntrinsics, a: &AugTransform2D) -> Result<CameraPoint> {
    if ctx.hooks.corrupt_unprojection {
        let src = a.matrix() * Vector3::new(p_aug.x, p_aug.y, 1.0);
        return Ok(CameraPoint::from_vector(k.inverse() * (src * d)));
    }
    unproject_augmented(p_aug, d, k, a)
}

fn unprojection_invariance(ctx: &Ctx, rng: &mut ChaCha8Rng) -> Outcome {
    let ida = ida_family(ctx);
    let [w, h] = ida.source_size.map(|v| v as f64);
    for _ in 0..100 {
        let k = random_intrinsics(rng)?;
        let a = lib(sample_ida(&ida, rng))?;
        let p = PixelPoint::new(rng.random_range(0.0..w), rng.random_range(0.0..h));
        let d = rng.random_range(0.5..80.0);
        let direct = lib(pixel_to_camera(p, d, &k))?.to_vector();
        let via = lib(unproject(ctx, a.apply(p), d, &k, &a))?.to_vector();
        let err = (via - direct).norm() / direct.norm();
        ensure(err < 1e-9, || format!("relative deviation {err:e} at p=({}, {}), d={d}", p.x, p.y))?;
    }
    Ok(())
}

fn aug_round_trip(ctx: &Ctx, rng: &mut ChaCha8Rng) -> Outcome {
    let ida = ida_family(ctx);
    let [w, h] = ida.source_size.map(|v| v as f64);
    for _ in 0..100 {
        let a = lib(sample_ida(&ida, rng))?;
        let p = PixelPoint::new(rng.random_range(0.0..w), rng.random_range(0.0..h));
        let back = a.apply_inverse(a.apply(p));
        let err = (back.x - p.x).abs().max((back.y - p.y).abs());
        ensure(err < 1e-10, || format!("round-trip error {err:e}"))?;
    }
    Ok(())
}

fn reprojection(_: &Ctx, rng: &mut ChaCha8Rng) -> Outcome {
    for _ in 0..100 {
        let k = random_intrinsics(rng)?;
        let p = PixelPoint::new(rng.random_range(0.0..1600.0), rng.random_range(0.0..900.0));
        let d = rng.random_range(0.5..80.0);
        let q = k
            .project(lib(pixel_to_camera(p, d, &k))?)
            .ok_or("point behind the camera")?;
        let err = (q.x - p.x).abs().max((q.y - p.y).abs());
        ensure(err < 1e-9, || format!("reprojection error {err:e}"))?;
    }
    Ok(())
}

// ---------------------------------------------------------- view transform

fn random_cloud(rng: &mut ChaCha8Rng, n: usize, c: usize, extent: f64) -> std::result::Result<PointFeatureCloud, String> {
    let positions = (0..n)
        .map(|_| {
            [
                rng.random_range(-extent..extent),
                rng.random_range(-extent..extent),
                rng.random_range(-8.0..6.0),
            ]
        })
        .collect();
    let features = Array2::from_shape_fn((n, c), |_| rng.random_range(0.0..1.0));
    let weights = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
    lib(PointFeatureCloud::new(positions, features, weights))
}

fn depth_normalization(ctx: &Ctx, rng: &mut ChaCha8Rng) -> Outcome {
    let (d, h, w) = (ctx.bins.count(), rng.random_range(1..8), rng.random_range(1..8));
    let spread = rng.random_range(0.1..50.0);
    let logits = lib(DepthLogits::new(Array3::from_shape_fn((d, h, w), |_| rng.random_range(-spread..spread))))?;
    let fm = lib(FeatureMap::new(Array3::zeros((1, h, w)), ctx.cfg.encoder.stride))?;
    let lifted = lib(lift(&fm, &logits))?;
    for i in 0..h {
        for j in 0..w {
            let s: f64 = (0..d).map(|k| lifted.weights()[[k, i, j]]).sum();
            ensure((s - 1.0).abs() < 1e-6, || format!("weights at ({i}, {j}) sum to {s}"))?;
        }
    }
    Ok(())
}

fn mass_conservation(ctx: &Ctx, rng: &mut ChaCha8Rng) -> Outcome {
    let n = rng.random_range(1..5000);
    let cloud = random_cloud(rng, n, 3, ctx.grid.x_max * 1.3)?;
    let expected = in_range_mass(&cloud, &ctx.grid);
    let got = ctx.cfg.kernel.splat(&cloud, &ctx.grid).total();
    ensure(rel_close(got, expected, 1e-6) || (got == 0.0 && expected == 0.0), || {
        format!("bev mass {got} vs in-range mass {expected} ({n} points)")
    })
}

fn cellwise(a: &BevFeature, b: &BevFeature, tol: f64) -> Outcome {
    ensure(a.data().dim() == b.data().dim(), || "shape mismatch".into())?;
    for (idx, (x, y)) in a.data().indexed_iter().map(|(i, x)| (i, (*x, b.data()[i]))) {
        ensure(x == y || rel_close(x, y, tol), || format!("cell {idx:?}: {x} vs {y}"))?;
    }
    Ok(())
}

fn kernel_equivalence(ctx: &Ctx, rng: &mut ChaCha8Rng) -> Outcome {
    let n = rng.random_range(1..20_000);
    let cloud = random_cloud(rng, n, 2, ctx.grid.x_max * 1.1)?;
    cellwise(&splat_sorted(&cloud, &ctx.grid), &splat_naive(&cloud, &ctx.grid), 1e-6)
}

fn splat_additivity(ctx: &Ctx, rng: &mut ChaCha8Rng) -> Outcome {
    let (na, nb) = (rng.random_range(0..3000), rng.random_range(0..3000));
    let a = random_cloud(rng, na, 2, ctx.grid.x_max)?;
    let b = random_cloud(rng, nb, 2, ctx.grid.x_max)?;
    let joint = ctx.cfg.kernel.splat(&lib(PointFeatureCloud::concat(&[a.clone(), b.clone()]))?, &ctx.grid);
    let sum = BevFeature::new(
        ctx.cfg.kernel.splat(&a, &ctx.grid).into_data() + ctx.cfg.kernel.splat(&b, &ctx.grid).data(),
    );
    cellwise(&joint, &sum, 1e-6)
}

fn flip_decoupling(ctx: &Ctx, rng: &mut ChaCha8Rng) -> Outcome {
    let s = ctx.cfg.encoder.stride;
    let [w, h] = ctx.cfg.scene.image_size_px;
    let (fh, fw) = (h / s, w / s);
    let d = ctx.bins.count();
    let cam = &ctx.rig[rng.random_range(0..ctx.rig.len())];
    let feats = Array3::from_shape_fn((3, fh, fw), |_| rng.random_range(0.0..1.0));
    let logits = Array3::from_shape_fn((d, fh, fw), |_| rng.random_range(-4.0..4.0));
    let flip = lib(compose_aug(&[AugOp::Flip { width: w as f64 }]))?;
    let run = |f: Array3<f64>, l: Array3<f64>, aug: AugTransform2D| -> std::result::Result<BevFeature, String> {
        let input = CameraFeatures {
            features: lib(FeatureMap::new(f, s))?,
            logits: lib(DepthLogits::new(l))?,
            aug,
        };
        lib(view_transform(std::slice::from_ref(cam), &[input], &ctx.grid, &ctx.bins, ctx.cfg.kernel))
    };
    let plain = run(feats.clone(), logits.clone(), AugTransform2D::identity())?;
    let flipped = run(
        warp_feature_lattice(&feats, s, &flip, (fh, fw)),
        warp_feature_lattice(&logits, s, &flip, (fh, fw)),
        flip,
    )?;
    cellwise(&flipped, &plain, 1e-6)
}

fn center_of_mass(f: &BevFeature, grid: &BevGrid) -> Option<[f64; 2]> {
    let mass = f.mass();
    let mut acc = [0.0; 3];
    for ((ix, iy), &m) in mass.indexed_iter() {
        let [x, y] = grid.cell_center(ix, iy);
        acc[0] += m * x;
        acc[1] += m * y;
        acc[2] += m;
    }
    (acc[2] > 0.0).then(|| [acc[0] / acc[2], acc[1] / acc[2]])
}

// A single bright lattice pixel is lifted at one depth. The augmented run
// carries the same pixel, bilinearly spread over the four augmented lattice
// points around its image.
fn fractional_decoupling(ctx: &Ctx, rng: &mut ChaCha8Rng) -> Outcome {
    let s = ctx.cfg.encoder.stride;
    let ida = ida_family(ctx);
    let [w, h] = ida.source_size;
    let [cw, ch] = ida.crop_size;
    let (fh, fw, ah, aw) = (h / s, w / s, ch / s, cw / s);
    let half = (s as f64 - 1.0) / 2.0;
    for _ in 0..200 {
        let cam = &ctx.rig[rng.random_range(0..ctx.rig.len())];
        let (i, j) = (rng.random_range(0..fh), rng.random_range(0..fw));
        let p = PixelPoint::new(lattice_coord(j, s), lattice_coord(i, s));
        let depth = rng.random_range(ctx.bins.min..ctx.bins.max - 1.0);
        let bins = lib(DepthBins::new(depth, depth + 1.0, 1.0))?;
        let ego = camera_to_ego(lib(pixel_to_camera(p, bins.center(0), &cam.intrinsics))?, &cam.pose);
        if ctx.grid.cell_of([ego.x, ego.y, ego.z]).is_none() {
            continue;
        }
        let a = lib(sample_ida(&ida, rng))?;
        let q = a.apply(p);
        let (u, v) = ((q.x - half) / s as f64, (q.y - half) / s as f64);
        if u < 0.0 || v < 0.0 || u > (aw - 1) as f64 || v > (ah - 1) as f64 {
            continue;
        }
        let mut plain = Array3::zeros((1, fh, fw));
        plain[[0, i, j]] = 1.0;
        let mut warped = Array3::zeros((1, ah, aw));
        let (u0, v0) = (u.floor() as usize, v.floor() as usize);
        let (fu, fv) = (u - u0 as f64, v - v0 as f64);
        for (du, dv, wt) in [(0, 0, (1.0 - fu) * (1.0 - fv)), (1, 0, fu * (1.0 - fv)), (0, 1, (1.0 - fu) * fv), (1, 1, fu * fv)] {
            let (uu, vv) = ((u0 + du).min(aw - 1), (v0 + dv).min(ah - 1));
            warped[[0, vv, uu]] += wt;
        }
        let run = |f: Array3<f64>, aug: AugTransform2D| -> std::result::Result<BevFeature, String> {
            let (_, lh, lw) = f.dim();
            let input = CameraFeatures {
                features: lib(FeatureMap::new(f, s))?,
                logits: lib(DepthLogits::new(Array3::zeros((1, lh, lw))))?,
                aug,
            };
            lib(view_transform(std::slice::from_ref(cam), &[input], &ctx.grid, &bins, ctx.cfg.kernel))
        };
        let ref_com = center_of_mass(&run(plain, AugTransform2D::identity())?, &ctx.grid).ok_or("empty reference")?;
        let Some(aug_com) = center_of_mass(&run(warped, a.clone())?, &ctx.grid) else {
            return Err("augmented impulse left the grid".into());
        };
        let drift = (aug_com[0] - ref_com[0]).hypot(aug_com[1] - ref_com[1]);
        return ensure(drift < ctx.grid.cell, || {
            format!("center of mass drifted {drift} m (scale {}, rotation {})", a.scale(), a.rotation())
        });
    }
    Err("no visible impulse in 200 draws".into())
}

// ---------------------------------------------------------------- augment

fn bda_family(ctx: &Ctx) -> BdaConfig {
    let mut bda = ctx.cfg.bda_config();
    if !ctx.grid.is_centered_square() {
        bda.rot_range = [0.0, 0.0];
    }
    bda
}

fn random_box(rng: &mut ChaCha8Rng, radius: f64, classes: u32) -> Box3D {
    let r = radius * rng.random::<f64>().sqrt();
    let phi = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
    Box3D {
        center: [r * phi.cos(), r * phi.sin(), rng.random_range(-2.0..1.0)],
        dims: [rng.random_range(0.3..3.0), rng.random_range(0.3..8.0), rng.random_range(0.5..3.0)],
        yaw: wrap_angle(rng.random_range(-4.0..4.0)),
        velocity: [rng.random_range(-15.0..15.0), rng.random_range(-15.0..15.0)],
        class_id: rng.random_range(0..classes),
        attribute_id: rng.random_range(0..NUM_ATTRIBUTES),
        score: 1.0,
    }
}

fn bda_joint_consistency(ctx: &Ctx, rng: &mut ChaCha8Rng) -> Outcome {
    let bda = bda_family(ctx);
    let g = &ctx.grid;
    let half = (g.x_max - g.x_min).min(g.y_max - g.y_min) / 2.0;
    let cx = (g.x_min + g.x_max) / 2.0;
    let cy = (g.y_min + g.y_max) / 2.0;
    let radius = half / bda.scale_range[1].max(1.0) - 2.0 * g.cell;
    for _ in 0..10 {
        let mut b = random_box(rng, radius, 1);
        b.center[0] += cx;
        b.center[1] += cy;
        let t = lib(sample_bda(&bda, rng))?;
        let (ix, iy) = g.cell_xy(b.center[0], b.center[1]).ok_or("box outside grid")?;
        let mut f = BevFeature::zeros(1, g);
        f.data_mut()[[0, ix, iy]] = 1.0;
        let warped = lib(apply_bda_feature(&f, &t, g))?;
        let tb = &apply_bda_boxes(std::slice::from_ref(&b), &t)[0];
        let (ex, ey) = g.cell_xy(tb.center[0], tb.center[1]).ok_or("transformed box outside grid")?;
        let mass = warped.mass();
        let ((ax, ay), &peak) = mass
            .indexed_iter()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .ok_or("empty grid")?;
        ensure(peak > 0.0, || format!("impulse vanished under {t:?}"))?;
        ensure(ax.abs_diff(ex) <= 1 && ay.abs_diff(ey) <= 1, || {
            format!("argmax cell ({ax}, {ay}) vs box cell ({ex}, {ey}) under {t:?}")
        })?;
    }
    Ok(())
}

fn bda_group(ctx: &Ctx, rng: &mut ChaCha8Rng) -> Outcome {
    let bda = bda_family(ctx);
    for _ in 0..10 {
        let b = random_box(rng, 50.0, 5);
        let t = lib(sample_bda(&bda, rng))?;
        let back = &apply_bda_boxes(&apply_bda_boxes(std::slice::from_ref(&b), &t), &t.inverse())[0];
        let err = (0..3)
            .map(|i| (back.center[i] - b.center[i]).abs().max((back.dims[i] - b.dims[i]).abs()))
            .chain((0..2).map(|i| (back.velocity[i] - b.velocity[i]).abs()))
            .chain([wrap_angle(back.yaw - b.yaw).abs()])
            .fold(0.0, f64::max);
        ensure(err < 1e-9, || format!("group round-trip error {err:e} under {t:?}"))?;
    }
    Ok(())
}

// ---------------------------------------------------------------- encoder

fn encoder_determinism(ctx: &Ctx, rng: &mut ChaCha8Rng) -> Outcome {
    let mut spec = lib(ctx.cfg.encoder_spec())?;
    let s = spec.stride;
    let (h, w) = (s * rng.random_range(1..4), s * rng.random_range(1..6));
    let img = lib(ImageU8::from_vec(h, w, 1, (0..h * w).map(|_| rng.random()).collect()))?;
    let depth = lib(DepthRaster::from_vec(h, w, 1, (0..h * w).map(|_| rng.random_range(0.0..70.0)).collect()))?;
    for kind in [EncoderKind::ToyConv, EncoderKind::DepthOracle] {
        spec.kind = kind;
        let a = lib(encode_image(&img, Some(&depth), &spec, &ctx.bins))?;
        let b = lib(encode_image(&img, Some(&depth), &spec, &ctx.bins))?;
        ensure(a.0 == b.0 && a.1 == b.1, || format!("{kind:?} output differs between runs"))?;
        ensure(a.0.data().dim() == (spec.channels, h / s, w / s), || format!("{kind:?} feature shape"))?;
        ensure(a.1.data().dim() == (ctx.bins.count(), h / s, w / s), || format!("{kind:?} logit shape"))?;
    }
    Ok(())
}

fn footprint_touches(b: &Box3D, g: &BevGrid, ix: usize, iy: usize, dilate: f64) -> bool {
    let [x, y] = g.cell_center(ix, iy);
    let (sn, cs) = b.yaw.sin_cos();
    let (dx, dy) = (x - b.center[0], y - b.center[1]);
    let (lx, ly) = (cs * dx + sn * dy, -sn * dx + cs * dy);
    let r = g.cell * std::f64::consts::FRAC_1_SQRT_2 + dilate;
    lx.abs() <= b.dims[1] / 2.0 + r && ly.abs() <= b.dims[0] / 2.0 + r
}

fn footprint_mass(ctx: &Ctx, rng: &mut ChaCha8Rng) -> Outcome {
    let mut cfg = ctx.cfg.clone();
    cfg.encoder.kind = EncoderKind::DepthOracle;
    cfg.ida.enabled = false;
    let s = lib(generate_scene(&cfg.scene, rng.random(), rng.random_range(0..1000)))?;
    if s.boxes.is_empty() {
        return Ok(());
    }
    let mass = lib(lib(Pipeline::new(&cfg))?.bev(&s))?.mass();
    let g = &ctx.grid;
    let (mut fg, mut bg) = (0.0_f64, 0.0_f64);
    for ((ix, iy), &m) in mass.indexed_iter() {
        if s.boxes.iter().any(|b| footprint_touches(b, g, ix, iy, 0.0)) {
            fg = fg.max(m);
        } else if !s.boxes.iter().any(|b| footprint_touches(b, g, ix, iy, 2.0 * g.cell)) {
            bg = bg.max(m);
        }
    }
    ensure(fg > bg, || format!("footprint mass {fg} does not exceed background {bg} in {}", s.sample_id))
}

// ------------------------------------------------------------------- head

fn codec_round_trip(ctx: &Ctx, rng: &mut ChaCha8Rng) -> Outcome {
    let g = &ctx.grid;
    let k = ctx.cfg.head.num_classes;
    let half = ((g.x_max - g.x_min).min(g.y_max - g.y_min) / 2.0) * 0.98;
    for _ in 0..10 {
        let mut b = random_box(rng, half, k as u32);
        b.center[0] += (g.x_min + g.x_max) / 2.0;
        b.center[1] += (g.y_min + g.y_max) / 2.0;
        let r = lib(encode_targets(std::slice::from_ref(&b), g, k, ctx.cfg.head.gaussian_min_radius_cells))?.raster;
        let d = lib(decode(&r, g, &DecodeParams::default()))?;
        ensure(d.len() == 1, || format!("{} detections for one box", d.len()))?;
        let got = &d[0];
        let ce = got.center_distance(&b);
        ensure(ce < g.cell / 1000.0, || format!("center error {ce}"))?;
        ensure((0..3).all(|i| (got.dims[i] - b.dims[i]).abs() <= 1e-6 * b.dims[i]), || "dims error".into())?;
        let ye = wrap_angle(got.yaw - b.yaw).abs();
        ensure(ye < 1e-6, || format!("yaw error {ye}"))?;
    }
    Ok(())
}

fn decode_permutation(ctx: &Ctx, rng: &mut ChaCha8Rng) -> Outcome {
    let g = &ctx.grid;
    let k = ctx.cfg.head.num_classes;
    let half = (g.x_max - g.x_min).min(g.y_max - g.y_min) / 2.0 - g.cell;
    let mut boxes: Vec<Box3D> = Vec::new();
    let mut cells = std::collections::HashSet::new();
    for _ in 0..rng.random_range(1..20) {
        let mut b = random_box(rng, half, k as u32);
        b.center[0] += (g.x_min + g.x_max) / 2.0;
        b.center[1] += (g.y_min + g.y_max) / 2.0;
        if let Some(c) = g.cell_xy(b.center[0], b.center[1]) {
            if cells.insert(c) {
                boxes.push(b);
            }
        }
    }
    let run = |bx: &[Box3D]| -> std::result::Result<Vec<Box3D>, String> {
        let r = lib(encode_targets(bx, g, k, ctx.cfg.head.gaussian_min_radius_cells))?.raster;
        lib(decode(&r, g, &DecodeParams::default()))
    };
    let before = run(&boxes)?;
    boxes.shuffle(rng);
    ensure(before == run(&boxes)?, || "decoded set depends on input order".into())
}

// ---------------------------------------------------------------- metrics

fn coarse_box(rng: &mut ChaCha8Rng, score: f64) -> Box3D {
    Box3D {
        center: [rng.random_range(0..8) as f64 * 0.5, rng.random_range(0..8) as f64 * 0.5, 0.0],
        dims: [2.0, 4.0, 1.5],
        yaw: 0.0,
        velocity: [0.0, 0.0],
        class_id: 0,
        attribute_id: 0,
        score,
    }
}

// Every (prediction, ground truth) pair sorted by (score desc, prediction
// index, distance, ground-truth index), accepted in order when both ends are
// free. The greedy matcher must agree exactly.
fn brute_force_match(preds: &[Box3D], gts: &[Box3D], t: f64) -> Vec<(usize, usize)> {
    let mut cand: Vec<(f64, usize, f64, usize)> = Vec::new();
    for (i, p) in preds.iter().enumerate() {
        for (j, g) in gts.iter().enumerate() {
            let d = p.center_distance(g);
            if d < t {
                cand.push((-p.score, i, d, j));
            }
        }
    }
    cand.sort_by(|a, b| {
        a.0.total_cmp(&b.0)
            .then(a.1.cmp(&b.1))
            .then(a.2.total_cmp(&b.2))
            .then(a.3.cmp(&b.3))
    });
    let mut pu = vec![false; preds.len()];
    let mut gu = vec![false; gts.len()];
    let mut out = Vec::new();
    for (_, i, _, j) in cand {
        if !pu[i] && !gu[j] {
            pu[i] = true;
            gu[j] = true;
            out.push((i, j));
        }
    }
    out
}

fn matcher_oracle(_: &Ctx, rng: &mut ChaCha8Rng) -> Outcome {
    for _ in 0..10 {
        let preds: Vec<Box3D> = (0..rng.random_range(0..=6))
            .map(|_| {
                let s = rng.random_range(1..5) as f64 / 4.0;
                coarse_box(rng, s)
            })
            .collect();
        let gts: Vec<Box3D> = (0..rng.random_range(0..=6)).map(|_| coarse_box(rng, 1.0)).collect();
        let t = [0.5, 1.0, 2.0, 4.0][rng.random_range(0..4)];
        let got = match_detections(&preds, &gts, t).pairs;
        let want = brute_force_match(&preds, &gts, t);
        ensure(got == want, || format!("greedy {got:?} vs oracle {want:?} at {t} m"))?;
    }
    Ok(())
}

fn nds_reference(_: &Ctx, _: &mut ChaCha8Rng) -> Outcome {
    for (map, errs, expected) in NDS_REFERENCE_ROWS {
        let got = nds(map, errs);
        ensure((got - expected).abs() <= 0.0015, || format!("NDS {got} vs {expected} for mAP {map}"))?;
    }
    Ok(())
}

fn ap_monotonicity(ctx: &Ctx, rng: &mut ChaCha8Rng) -> Outcome {
    let m = &ctx.cfg.metrics;
    let n = rng.random_range(0..12);
    let scored: Vec<Scored> = (0..n)
        .map(|_| Scored { score: rng.random(), is_tp: rng.random_bool(0.6) })
        .collect();
    let num_gt = scored.iter().filter(|s| s.is_tp).count() + 1 + rng.random_range(0..3);
    let base = average_precision(&scored, num_gt, m.min_recall, m.min_precision);
    let score = rng.random();
    for (is_tp, sign) in [(false, -1.0), (true, 1.0)] {
        let mut more = scored.clone();
        more.push(Scored { score, is_tp });
        let ap = average_precision(&more, num_gt, m.min_recall, m.min_precision);
        ensure(sign * (ap - base) >= -1e-12, || {
            format!("AP {base} -> {ap} after adding a {} at score {score}", if is_tp { "TP" } else { "FP" })
        })?;
    }
    Ok(())
}

fn self_evaluation(ctx: &Ctx, rng: &mut ChaCha8Rng) -> Outcome {
    let k = ctx.cfg.head.num_classes as u32;
    let gts: Vec<Vec<Box3D>> = (0..rng.random_range(1..5))
        .map(|_| (0..rng.random_range(0..8)).map(|_| random_box(rng, 50.0, k)).collect())
        .collect();
    let r = lib(evaluate(&gts, &gts, &ctx.cfg.metrics))?;
    let errs = [r.mate, r.mase, r.maoe, r.mave, r.maae];
    let any_gt = gts.iter().any(|g| !g.is_empty());
    if any_gt {
        ensure(r.map == 1.0 && r.nds == 1.0, || format!("mAP {} NDS {}", r.map, r.nds))?;
        ensure(errs.iter().all(|&e| e.abs() < 1e-12), || format!("TP errors {errs:?}"))?;
    }
    Ok(())
}

fn equal_score_permutation(_: &Ctx, rng: &mut ChaCha8Rng) -> Outcome {
    let gts: Vec<Box3D> = (0..4)
        .map(|i| Box3D { center: [10.0 * i as f64, 0.0, 0.0], ..coarse_box(rng, 1.0) })
        .collect();
    let mut preds: Vec<Box3D> = (0..rng.random_range(0..8))
        .map(|_| {
            let x = 10.0 * rng.random_range(0..4) as f64 + rng.random_range(-3.0..3.0);
            let y = rng.random_range(-1.0..1.0);
            Box3D { center: [x, y, 0.0], ..coarse_box(rng, 0.5) }
        })
        .collect();
    let matched = |p: &[Box3D]| {
        let mut v: Vec<usize> = match_detections(p, &gts, 2.0).pairs.iter().map(|x| x.1).collect();
        v.sort_unstable();
        v
    };
    let before = matched(&preds);
    preds.shuffle(rng);
    let after = matched(&preds);
    ensure(before == after, || format!("matched ground truths {before:?} vs {after:?}"))
}

// --------------------------------------------------------------- scenegen

fn surface_reconstruction(ctx: &Ctx, rng: &mut ChaCha8Rng) -> Outcome {
    let s = lib(generate_scene(&ctx.cfg.scene, rng.random(), rng.random_range(0..1000)))?;
    let [w, _] = ctx.cfg.scene.image_size_px;
    for sc in &s.cameras {
        let (_, _, owner) = render_camera(&sc.camera, &s.boxes, ctx.cfg.scene.image_size_px);
        for (idx, o) in owner.iter().enumerate() {
            let Some(bi) = *o else { continue };
            let d = sc.depth.data()[idx] as f64;
            ensure(d > 0.0, || format!("silhouette pixel {idx} has depth {d}"))?;
            let p = PixelPoint::new((idx % w) as f64, (idx / w) as f64);
            let e: Vector3<f64> = camera_to_ego(lib(pixel_to_camera(p, d, &sc.camera.intrinsics))?, &sc.camera.pose);
            let b = &s.boxes[bi];
            let (sn, cs) = b.yaw.sin_cos();
            let (dx, dy) = (e.x - b.center[0], e.y - b.center[1]);
            let (lx, ly) = (cs * dx + sn * dy, -sn * dx + cs * dy);
            let c = ctx.grid.cell;
            ensure(lx.abs() <= b.dims[1] / 2.0 + c && ly.abs() <= b.dims[0] / 2.0 + c, || {
                format!("pixel {idx} of {} lands {lx:.3}, {ly:.3} from box {bi}", s.sample_id)
            })?;
        }
    }
    Ok(())
}

fn separated(a: &[[f64; 2]; 4], b: &[[f64; 2]; 4]) -> bool {
    // Separating axis test over the edge normals of both rectangles.
    [a, b].iter().any(|poly| {
        (0..4).any(|i| {
            let [x0, y0] = poly[i];
            let [x1, y1] = poly[(i + 1) % 4];
            let n = [y1 - y0, x0 - x1];
            let proj = |p: &[f64; 2]| p[0] * n[0] + p[1] * n[1];
            let (amin, amax) = a.iter().map(proj).fold((f64::MAX, f64::MIN), |(l, h), v| (l.min(v), h.max(v)));
            let (bmin, bmax) = b.iter().map(proj).fold((f64::MAX, f64::MIN), |(l, h), v| (l.min(v), h.max(v)));
            amax < bmin || bmax < amin
        })
    })
}

fn disjoint_footprints(ctx: &Ctx, rng: &mut ChaCha8Rng) -> Outcome {
    let s = lib(generate_scene(&ctx.cfg.scene, rng.random(), rng.random_range(0..1000)))?;
    for (i, a) in s.boxes.iter().enumerate() {
        for (j, b) in s.boxes.iter().enumerate().skip(i + 1) {
            ensure(separated(&a.footprint(), &b.footprint()), || {
                format!("boxes {i} and {j} of {} overlap", s.sample_id)
            })?;
        }
    }
    Ok(())
}

// --------------------------------------------------------------- pipeline

fn pipeline_determinism(ctx: &Ctx, rng: &mut ChaCha8Rng) -> Outcome {
    let s = lib(generate_scene(&ctx.cfg.scene, rng.random(), rng.random_range(0..1000)))?;
    let p = lib(Pipeline::new(&ctx.cfg))?;
    ensure(lib(p.infer(&s))? == lib(p.infer(&s))?, || format!("{} differs between runs", s.sample_id))
}

fn collapsed_augmentation(ctx: &Ctx, rng: &mut ChaCha8Rng) -> Outcome {
    let mut plain = ctx.cfg.clone();
    plain.ida.enabled = false;
    plain.bda.enabled = false;
    let mut collapsed = plain.clone();
    collapsed.ida = IdaSection {
        enabled: true,
        flip_prob: 0.0,
        scale_range: [1.0, 1.0],
        rot_range_deg: [0.0, 0.0],
        crop_size_px: None,
        ..plain.ida.clone()
    };
    collapsed.bda = BdaSection {
        enabled: true,
        flip_prob: 0.0,
        rot_range_deg: [0.0, 0.0],
        scale_range: [1.0, 1.0],
    };
    let s = lib(generate_scene(&plain.scene, rng.random(), rng.random_range(0..1000)))?;
    let a = lib(lib(Pipeline::new(&plain))?.infer(&s))?;
    let b = lib(lib(Pipeline::new(&collapsed))?.infer(&s))?;
    ensure(a == b, || format!("{}: collapsed augmentation changes detections", s.sample_id))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> PipelineConfig {
        let mut cfg = PipelineConfig::default();
        cfg.scene.image_size_px = [176, 64];
        cfg.scene.min_visible_px = 8;
        cfg.scene.max_boxes = 3;
        cfg.encoder.stride = 8;
        cfg
    }

    #[test]
    fn suite_passes_and_counts_trials() {
        let r = run_suite(&small(), 3, 2, Hooks::default()).unwrap();
        for f in r.failures() {
            eprintln!("{f:?}");
        }
        assert!(r.passed());
        assert_eq!(r.invariants.len(), INVARIANTS.len());
        assert!(r.invariants.iter().all(|i| i.trials == 2));
    }

    #[test]
    fn corrupted_unprojection_is_caught() {
        let hooks = Hooks { corrupt_unprojection: true };
        let r = run_suite(&small(), 3, 1, hooks).unwrap();
        let failed: Vec<&str> = r.failures().map(|f| f.invariant.as_str()).collect();
        assert!(failed.contains(&"geometry.augmented_unprojection"), "{failed:?}");
        let f = r.failures().find(|f| f.invariant == "geometry.augmented_unprojection").unwrap();
        assert!(run_invariant(&small(), &f.invariant, f.seed, hooks).unwrap().is_some());
        assert!(run_invariant(&small(), &f.invariant, f.seed, Hooks::default()).unwrap().is_none());
    }

    #[test]
    fn zero_trials_rejected() {
        assert!(run_suite(&small(), 0, 0, Hooks::default()).is_err());
    }

    #[test]
    fn brute_force_agrees_on_simple_case() {
        let mut rng = stream_rng(1, "t", &[]);
        let g = vec![coarse_box(&mut rng, 1.0)];
        let p = vec![Box3D { score: 0.5, ..g[0].clone() }];
        assert_eq!(brute_force_match(&p, &g, 1.0), vec![(0, 0)]);
    }
}
