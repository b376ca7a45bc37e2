//! Seeded synthetic multi-camera scenes.
//!
//! Cameras sit at the ego origin, 1.6 m above a flat ground, and look outward
//! at evenly spaced headings. Boxes stand on the ground with disjoint
//! footprints. Each camera gets a single-channel image where every pixel of a
//! box carries its class shade, and a camera-`z` depth raster that is zero
//! where no box is hit.

use std::f64::consts::{PI, TAU};

use nalgebra::Vector3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{wrap_angle, Camera, CameraIntrinsics, Pose3D};
use crate::head::Box3D;
use crate::raster::{DepthRaster, ImageU8};
use crate::rng::{stream_rng, STREAM_SCENEGEN};
use crate::{Error, Result};

/// Catalog entry of a synthetic object class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassSpec {
    pub name: &'static str,
    /// Nominal `(w, l, h)` in meters.
    pub dims: [f64; 3],
    /// Image intensity of the class silhouette.
    pub shade: u8,
    pub max_speed: f64,
}

pub const CLASSES: [ClassSpec; 5] = [
    ClassSpec { name: "car", dims: [1.9, 4.5, 1.6], shade: 200, max_speed: 12.0 },
    ClassSpec { name: "pedestrian", dims: [0.7, 0.7, 1.75], shade: 160, max_speed: 1.5 },
    ClassSpec { name: "cyclist", dims: [0.8, 1.8, 1.5], shade: 120, max_speed: 6.0 },
    ClassSpec { name: "barrier", dims: [2.0, 0.5, 1.0], shade: 90, max_speed: 0.0 },
    ClassSpec { name: "traffic_cone", dims: [0.45, 0.45, 0.8], shade: 240, max_speed: 0.0 },
];

pub const NUM_CLASSES: usize = CLASSES.len();
/// Attribute ids are drawn uniformly below this bound.
pub const NUM_ATTRIBUTES: u32 = 3;

/// Class whose silhouette shade is `shade`.
pub fn class_from_shade(shade: u8) -> Option<u32> {
    CLASSES.iter().position(|c| c.shade == shade).map(|k| k as u32)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub n_cameras: usize,
    pub hfov_deg: f64,
    /// `[width, height]` in pixels.
    pub image_size_px: [usize; 2],
    pub min_boxes: usize,
    pub max_boxes: usize,
    pub spawn_radius_m: f64,
    pub min_radius_m: f64,
    /// Clearance between the bounding circles of two footprints.
    pub footprint_gap_m: f64,
    pub ground_z_m: f64,
    /// Every box must own at least this many pixels over the rig.
    pub min_visible_px: usize,
    pub max_retries: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            n_cameras: 6,
            hfov_deg: 70.0,
            image_size_px: [704, 256],
            min_boxes: 1,
            max_boxes: 8,
            spawn_radius_m: 45.0,
            min_radius_m: 8.0,
            footprint_gap_m: 4.0,
            ground_z_m: -1.6,
            min_visible_px: 64,
            max_retries: 100,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_cameras == 0 {
            return Err(Error::Config("scene needs at least one camera".into()));
        }
        if !(self.hfov_deg > 0.0 && self.hfov_deg < 180.0) {
            return Err(Error::Config(format!("hfov {} deg", self.hfov_deg)));
        }
        if self.image_size_px.contains(&0) {
            return Err(Error::Config(format!("image size {:?}", self.image_size_px)));
        }
        if self.min_boxes > self.max_boxes {
            return Err(Error::Config(format!(
                "box count range [{}, {}]",
                self.min_boxes, self.max_boxes
            )));
        }
        if !(self.min_radius_m >= 0.0 && self.min_radius_m < self.spawn_radius_m) {
            return Err(Error::Config(format!(
                "spawn annulus [{}, {}] m",
                self.min_radius_m, self.spawn_radius_m
            )));
        }
        if !(self.footprint_gap_m >= 0.0) || !self.ground_z_m.is_finite() {
            return Err(Error::Config("footprint gap and ground height must be finite".into()));
        }
        Ok(())
    }
}

/// One rendered camera of a sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneCamera {
    pub camera: Camera,
    pub image: ImageU8,
    pub depth: DepthRaster,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub sample_id: String,
    pub seed: u64,
    pub cameras: Vec<SceneCamera>,
    pub boxes: Vec<Box3D>,
}

impl SceneSample {
    pub fn rig(&self) -> Vec<Camera> {
        self.cameras.iter().map(|c| c.camera.clone()).collect()
    }
}

pub fn sample_id(index: u64) -> String {
    format!("sample-{index:06}")
}

/// `n` cameras at the ego origin with headings `2 pi k / n`.
pub fn make_rig(n: usize, hfov: f64, image_size: [usize; 2]) -> Result<Vec<Camera>> {
    if n == 0 {
        return Err(Error::Config("rig needs at least one camera".into()));
    }
    let intrinsics = CameraIntrinsics::from_fov(hfov, image_size[0], image_size[1])?;
    Ok((0..n)
        .map(|k| Camera {
            intrinsics: intrinsics.clone(),
            pose: Pose3D::looking_along(wrap_angle(TAU * k as f64 / n as f64), Vector3::zeros()),
        })
        .collect())
}

/// Entry distance of the ray `origin + t dir` into `b`, if it hits for `t > 0`.
fn ray_box(origin: Vector3<f64>, dir: Vector3<f64>, b: &Box3D) -> Option<f64> {
    let (s, c) = b.yaw.sin_cos();
    let to_local = |v: Vector3<f64>| Vector3::new(c * v.x + s * v.y, -s * v.x + c * v.y, v.z);
    let o = to_local(origin - Vector3::from(b.center));
    let d = to_local(dir);
    let half = [b.dims[1] / 2.0, b.dims[0] / 2.0, b.dims[2] / 2.0];
    let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
    for a in 0..3 {
        if d[a].abs() < 1e-15 {
            if o[a].abs() > half[a] {
                return None;
            }
            continue;
        }
        let (mut ta, mut tb) = ((-half[a] - o[a]) / d[a], (half[a] - o[a]) / d[a]);
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
        if t0 > t1 {
            return None;
        }
    }
    (t0 > 0.0).then_some(t0)
}

fn box_corners(b: &Box3D) -> [Vector3<f64>; 8] {
    let (s, c) = b.yaw.sin_cos();
    let mut out = [Vector3::zeros(); 8];
    for (i, o) in out.iter_mut().enumerate() {
        let lx = if i & 1 == 0 { 0.5 } else { -0.5 } * b.dims[1];
        let ly = if i & 2 == 0 { 0.5 } else { -0.5 } * b.dims[0];
        let lz = if i & 4 == 0 { 0.5 } else { -0.5 } * b.dims[2];
        *o = Vector3::new(
            b.center[0] + c * lx - s * ly,
            b.center[1] + s * lx + c * ly,
            b.center[2] + lz,
        );
    }
    out
}

/// Pixel rectangle `[x0, x1) x [y0, y1)` that can contain the box.
fn pixel_bounds(cam: &Camera, b: &Box3D, w: usize, h: usize) -> Option<[usize; 4]> {
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for p in box_corners(b) {
        let q = cam.pose.ego_to_camera(p);
        if q.z <= 1e-3 {
            // Box straddles the image plane; scan the whole image.
            return Some([0, w, 0, h]);
        }
        let px = cam.intrinsics.project(q)?;
        lo = [lo[0].min(px.x), lo[1].min(px.y)];
        hi = [hi[0].max(px.x), hi[1].max(px.y)];
    }
    let x0 = (lo[0].floor() - 1.0).max(0.0);
    let y0 = (lo[1].floor() - 1.0).max(0.0);
    let x1 = (hi[0].ceil() + 2.0).min(w as f64);
    let y1 = (hi[1].ceil() + 2.0).min(h as f64);
    (x0 < x1 && y0 < y1).then(|| [x0 as usize, x1 as usize, y0 as usize, y1 as usize])
}

/// Ray-cast every box into one camera. Returns the image, the depth raster
/// and, per pixel, the index of the visible box.
pub fn render_camera(
    cam: &Camera,
    boxes: &[Box3D],
    image_size: [usize; 2],
) -> (ImageU8, DepthRaster, Vec<Option<usize>>) {
    let [w, h] = image_size;
    let mut image = ImageU8::zeros(h, w, 1);
    let mut depth = DepthRaster::zeros(h, w, 1);
    let mut owner = vec![None; w * h];
    let mut best = vec![f64::INFINITY; w * h];
    let kinv = cam.intrinsics.inverse();
    let rot = cam.pose.rotation();
    let origin = *cam.pose.translation();
    for (bi, b) in boxes.iter().enumerate() {
        let Some([x0, x1, y0, y1]) = pixel_bounds(cam, b, w, h) else {
            continue;
        };
        for y in y0..y1 {
            for x in x0..x1 {
                // Unit-z camera ray, so the hit distance is camera-z depth.
                let ray_cam = kinv * Vector3::new(x as f64, y as f64, 1.0);
                let Some(t) = ray_box(origin, rot * ray_cam, b) else {
                    continue;
                };
                let i = y * w + x;
                if t < best[i] {
                    best[i] = t;
                    owner[i] = Some(bi);
                }
            }
        }
    }
    for y in 0..h {
        for x in 0..w {
            if let Some(bi) = owner[y * w + x] {
                image.set(y, x, 0, CLASSES[boxes[bi].class_id as usize].shade);
                depth.set(y, x, 0, best[y * w + x] as f32);
            }
        }
    }
    (image, depth, owner)
}

/// Render `boxes` into every camera of `rig`.
pub fn render_scene(rig: &[Camera], boxes: &[Box3D], image_size: [usize; 2]) -> Vec<SceneCamera> {
    rig.iter()
        .map(|cam| {
            let (image, depth, _) = render_camera(cam, boxes, image_size);
            SceneCamera {
                camera: cam.clone(),
                image,
                depth,
            }
        })
        .collect()
}

fn bounding_radius(b: &Box3D) -> f64 {
    b.dims[0].hypot(b.dims[1]) / 2.0
}

fn draw_box(cfg: &SceneConfig, rng: &mut impl Rng) -> Box3D {
    let class_id = rng.random_range(0..NUM_CLASSES as u32);
    let spec = CLASSES[class_id as usize];
    let dims = spec.dims.map(|d| d * rng.random_range(0.9..1.1));
    let (r0, r1) = (cfg.min_radius_m, cfg.spawn_radius_m);
    let r = (rng.random_range(0.0..1.0) * (r1 * r1 - r0 * r0) + r0 * r0).sqrt();
    let theta: f64 = rng.random_range(-PI..PI);
    let yaw = wrap_angle(rng.random_range(-PI..PI));
    let speed = if spec.max_speed > 0.0 {
        rng.random_range(0.0..spec.max_speed)
    } else {
        0.0
    };
    Box3D {
        center: [r * theta.cos(), r * theta.sin(), cfg.ground_z_m + dims[2] / 2.0],
        dims,
        yaw,
        velocity: [speed * yaw.cos(), speed * yaw.sin()],
        class_id,
        attribute_id: rng.random_range(0..NUM_ATTRIBUTES),
        score: 1.0,
    }
}

fn place_boxes(cfg: &SceneConfig, n: usize, rng: &mut impl Rng) -> Option<Vec<Box3D>> {
    const ATTEMPTS_PER_BOX: usize = 200;
    let mut boxes: Vec<Box3D> = Vec::with_capacity(n);
    for _ in 0..n {
        let placed = (0..ATTEMPTS_PER_BOX).find_map(|_| {
            let b = draw_box(cfg, rng);
            boxes
                .iter()
                .all(|o| {
                    o.center_distance(&b) > bounding_radius(o) + bounding_radius(&b) + cfg.footprint_gap_m
                })
                .then_some(b)
        })?;
        boxes.push(placed);
    }
    Some(boxes)
}

/// Generate sample `index` of the stream rooted at `seed`.
pub fn generate_scene(cfg: &SceneConfig, seed: u64, index: u64) -> Result<SceneSample> {
    cfg.validate()?;
    let rig = make_rig(cfg.n_cameras, cfg.hfov_deg.to_radians(), cfg.image_size_px)?;
    let mut rng = stream_rng(seed, STREAM_SCENEGEN, &[index]);
    let n = rng.random_range(cfg.min_boxes..=cfg.max_boxes);
    for _ in 0..cfg.max_retries.max(1) {
        let Some(boxes) = place_boxes(cfg, n, &mut rng) else {
            continue;
        };
        let mut visible = vec![0usize; boxes.len()];
        let mut cameras = Vec::with_capacity(rig.len());
        for cam in &rig {
            let (image, depth, owner) = render_camera(cam, &boxes, cfg.image_size_px);
            for bi in owner.into_iter().flatten() {
                visible[bi] += 1;
            }
            cameras.push(SceneCamera {
                camera: cam.clone(),
                image,
                depth,
            });
        }
        if visible.iter().all(|&v| v >= cfg.min_visible_px) {
            return Ok(SceneSample {
                sample_id: sample_id(index),
                seed,
                cameras,
                boxes,
            });
        }
    }
    Err(Error::Generation(format!(
        "could not place {n} visible disjoint boxes within {} m after {} retries",
        cfg.spawn_radius_m, cfg.max_retries
    )))
}
