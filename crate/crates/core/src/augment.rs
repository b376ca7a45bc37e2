//! Image-view (IDA) and BEV-space (BDA) augmentation.
//!
//! IDA transforms are plain [`AugTransform2D`] values. They warp images and
//! image features only; their inverse is folded into unprojection, so 3D box
//! targets never see them. BDA transforms act on the ground plane and are
//! applied jointly to the BEV feature and to the box targets.

use nalgebra::{Matrix2, Vector2};
use ndarray::Array3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{compose_aug, wrap_angle, AugOp, AugTransform2D, PixelPoint};
use crate::head::Box3D;
use crate::raster::Raster;
use crate::view_transform::{lattice_coord, BevFeature, BevGrid};
use crate::{Error, Result};

/// Vertical placement of the crop window in the scaled image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CropVertical {
    /// `y1 = max(0, s*H - crop_h)`: keep the bottom of the image.
    #[default]
    Fixed,
    /// `y1 = s*H - crop_h` without the clamp.
    FixedUnclamped,
    /// `y1` uniform in `[0, max(0, s*H - crop_h)]`.
    Random,
}

/// Horizontal placement of the crop window in the scaled image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CropHorizontal {
    /// `x1` uniform in `[0, max(0, s*W - crop_w)]`.
    #[default]
    Random,
    /// `x1 = max(0, (s*W - crop_w) / 2)`.
    Center,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdaConfig {
    pub flip_prob: f64,
    pub scale_range: [f64; 2],
    /// Radians.
    pub rot_range: [f64; 2],
    /// `(width, height)` of the augmented image.
    pub crop_size: [usize; 2],
    /// `(width, height)` of the raw camera image.
    pub source_size: [usize; 2],
    pub crop_vertical: CropVertical,
    pub crop_horizontal: CropHorizontal,
}

impl Default for IdaConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            scale_range: [0.386, 0.55],
            rot_range: [(-5.4f64).to_radians(), 5.4f64.to_radians()],
            crop_size: [704, 256],
            source_size: [1600, 900],
            crop_vertical: CropVertical::Fixed,
            crop_horizontal: CropHorizontal::Random,
        }
    }
}

impl IdaConfig {
    /// The deterministic evaluation-time transform: scale 0.48 and a centered
    /// 704x256 crop of a 1600x900 image.
    pub fn test_time() -> Self {
        Self {
            flip_prob: 0.0,
            scale_range: [0.48, 0.48],
            rot_range: [0.0, 0.0],
            crop_horizontal: CropHorizontal::Center,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_prob("ida flip_prob", self.flip_prob)?;
        check_range("ida scale_range", self.scale_range)?;
        check_range("ida rot_range", self.rot_range)?;
        if self.scale_range[0] <= 0.0 {
            return Err(Error::Config("ida scales must be positive".into()));
        }
        if self.crop_size.contains(&0) || self.source_size.contains(&0) {
            return Err(Error::Config("ida image sizes must be non-zero".into()));
        }
        // The crop may overhang the scaled image horizontally (zero padded), but
        // the fixed vertical window must stay inside it.
        if self.crop_vertical == CropVertical::FixedUnclamped {
            let min_h = self.scale_range[0] * self.source_size[1] as f64;
            if min_h < self.crop_size[1] as f64 {
                return Err(Error::Config(format!(
                    "unclamped vertical crop of {} px does not fit a scaled height of {min_h} px",
                    self.crop_size[1]
                )));
            }
        }
        Ok(())
    }
}

fn check_prob(name: &str, p: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} = {p} outside [0, 1]")))
    }
}

fn check_range(name: &str, r: [f64; 2]) -> Result<()> {
    if r[0].is_finite() && r[1].is_finite() && r[0] <= r[1] {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} {r:?} is not an ordered pair")))
    }
}

fn uniform(rng: &mut impl Rng, r: [f64; 2]) -> f64 {
    let u: f64 = rng.random();
    r[0] + (r[1] - r[0]) * u
}

/// Draw an IDA transform: flip, scale, rotate about the crop center, crop.
pub fn sample_ida(cfg: &IdaConfig, rng: &mut impl Rng) -> Result<AugTransform2D> {
    cfg.validate()?;
    let flip = rng.random::<f64>() < cfg.flip_prob;
    let scale = uniform(rng, cfg.scale_range);
    let angle = uniform(rng, cfg.rot_range);
    let [src_w, src_h] = cfg.source_size.map(|v| v as f64);
    let [crop_w, crop_h] = cfg.crop_size.map(|v| v as f64);
    let slack_x = (scale * src_w - crop_w).max(0.0);
    let slack_y = scale * src_h - crop_h;
    let x1 = match cfg.crop_horizontal {
        CropHorizontal::Random => uniform(rng, [0.0, slack_x]),
        CropHorizontal::Center => slack_x / 2.0,
    };
    let y1 = match cfg.crop_vertical {
        CropVertical::Fixed => slack_y.max(0.0),
        CropVertical::FixedUnclamped => slack_y,
        CropVertical::Random => uniform(rng, [0.0, slack_y.max(0.0)]),
    };
    let mut ops = Vec::with_capacity(4);
    if flip {
        ops.push(AugOp::Flip { width: src_w });
    }
    ops.push(AugOp::Scale { factor: scale });
    ops.push(AugOp::Rotate {
        angle,
        pivot: [x1 + (crop_w - 1.0) / 2.0, y1 + (crop_h - 1.0) / 2.0],
    });
    ops.push(AugOp::Crop { offset: [x1, y1] });
    compose_aug(&ops)
}

/// `output(p) = input(A^-1 p)` with nearest-pixel sampling; reads outside the
/// input yield `T::default()`.
pub fn apply_ida_image<T: Copy + Default>(
    img: &Raster<T>,
    aug: &AugTransform2D,
    out_size: [usize; 2],
) -> Raster<T> {
    let [out_w, out_h] = out_size;
    let mut out = Raster::zeros(out_h, out_w, img.channels());
    for y in 0..out_h {
        for x in 0..out_w {
            let src = aug.apply_inverse(PixelPoint::new(x as f64, y as f64));
            let sx = src.x.round();
            let sy = src.y.round();
            if sx < 0.0 || sy < 0.0 || sx >= img.width() as f64 || sy >= img.height() as f64 {
                continue;
            }
            let (sx, sy) = (sx as usize, sy as usize);
            out.pixel_mut(y, x).copy_from_slice(img.pixel(sy, sx));
        }
    }
    out
}

/// Warp a `C x H x W` feature-lattice tensor by `aug`: each output lattice
/// point samples the nearest input lattice point of its preimage. Reads
/// outside the input yield zero.
pub fn warp_feature_lattice(
    data: &Array3<f64>,
    stride: usize,
    aug: &AugTransform2D,
    out_hw: (usize, usize),
) -> Array3<f64> {
    let (c, h, w) = data.dim();
    let (out_h, out_w) = out_hw;
    let s = stride as f64;
    let half = (s - 1.0) / 2.0;
    let mut out = Array3::zeros((c, out_h, out_w));
    for i in 0..out_h {
        for j in 0..out_w {
            let src = aug.apply_inverse(PixelPoint::new(lattice_coord(j, stride), lattice_coord(i, stride)));
            let sj = ((src.x - half) / s).round();
            let si = ((src.y - half) / s).round();
            if sj < 0.0 || si < 0.0 || sj >= w as f64 || si >= h as f64 {
                continue;
            }
            let (si, sj) = (si as usize, sj as usize);
            for ch in 0..c {
                out[[ch, i, j]] = data[[ch, si, sj]];
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct BdaConfig {
    /// Probability of each axis flip, drawn independently.
    pub flip_prob: f64,
    /// Radians.
    pub rot_range: [f64; 2],
    pub scale_range: [f64; 2],
}

impl Default for BdaConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            rot_range: [(-22.5f64).to_radians(), 22.5f64.to_radians()],
            scale_range: [0.95, 1.05],
        }
    }
}

impl BdaConfig {
    pub fn validate(&self) -> Result<()> {
        check_prob("bda flip_prob", self.flip_prob)?;
        check_range("bda rot_range", self.rot_range)?;
        check_range("bda scale_range", self.scale_range)?;
        if self.scale_range[0] <= 0.0 {
            return Err(Error::Config("bda scales must be positive".into()));
        }
        Ok(())
    }
}

/// Ground-plane similarity `M = scale * R(rotation) * F`, where `F` negates
/// `x` and/or `y`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BdaTransform {
    pub flip_x: bool,
    pub flip_y: bool,
    pub rotation: f64,
    pub scale: f64,
}

impl Default for BdaTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl BdaTransform {
    pub fn identity() -> Self {
        Self {
            flip_x: false,
            flip_y: false,
            rotation: 0.0,
            scale: 1.0,
        }
    }

    pub fn new(flip_x: bool, flip_y: bool, rotation: f64, scale: f64) -> Result<Self> {
        if !(scale.is_finite() && scale > 0.0) || !rotation.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "bda scale {scale} / rotation {rotation}"
            )));
        }
        Ok(Self {
            flip_x,
            flip_y,
            rotation,
            scale,
        })
    }

    pub fn matrix(&self) -> Matrix2<f64> {
        let (s, c) = self.rotation.sin_cos();
        let fx = if self.flip_x { -1.0 } else { 1.0 };
        let fy = if self.flip_y { -1.0 } else { 1.0 };
        Matrix2::new(c * fx, -s * fy, s * fx, c * fy) * self.scale
    }

    /// The transform undoing `self`.
    pub fn inverse(&self) -> Self {
        // F R(-t) equals R(t) F for a single reflection and R(-t) F otherwise.
        let single_flip = self.flip_x != self.flip_y;
        Self {
            flip_x: self.flip_x,
            flip_y: self.flip_y,
            rotation: if single_flip {
                self.rotation
            } else {
                -self.rotation
            },
            scale: 1.0 / self.scale,
        }
    }

    pub fn apply_xy(&self, v: [f64; 2]) -> [f64; 2] {
        let m = self.matrix();
        let r = m * Vector2::new(v[0], v[1]);
        [r.x, r.y]
    }

    /// Heading after reflection then rotation, wrapped to `(-pi, pi]`.
    pub fn apply_yaw(&self, yaw: f64) -> f64 {
        let mut y = yaw;
        if self.flip_x {
            y = std::f64::consts::PI - y;
        }
        if self.flip_y {
            y = -y;
        }
        wrap_angle(y + self.rotation)
    }
}

pub fn sample_bda(cfg: &BdaConfig, rng: &mut impl Rng) -> Result<BdaTransform> {
    cfg.validate()?;
    let flip_x = rng.random::<f64>() < cfg.flip_prob;
    let flip_y = rng.random::<f64>() < cfg.flip_prob;
    let rotation = uniform(rng, cfg.rot_range);
    let scale = uniform(rng, cfg.scale_range);
    BdaTransform::new(flip_x, flip_y, rotation, scale)
}

/// Move every BEV cell to the cell containing its transformed center, summing
/// collisions. Cells mapped outside the grid are dropped.
pub fn apply_bda_feature(f: &BevFeature, t: &BdaTransform, grid: &BevGrid) -> Result<BevFeature> {
    if !f.matches_grid(grid) {
        return Err(Error::ShapeMismatch(format!(
            "bev feature {:?} vs grid {}x{}",
            f.data().dim(),
            grid.nx(),
            grid.ny()
        )));
    }
    if t.rotation != 0.0 && !grid.is_centered_square() {
        return Err(Error::Config(
            "bev rotation requires a square grid centered on the ego origin".into(),
        ));
    }
    let m = t.matrix();
    let src = f.data();
    let (c, nx, ny) = src.dim();
    let mut out = Array3::zeros((c, nx, ny));
    for ix in 0..nx {
        for iy in 0..ny {
            let [px, py] = grid.cell_center(ix, iy);
            let q = m * Vector2::new(px, py);
            let Some((dx, dy)) = grid.cell_xy(q.x, q.y) else {
                continue;
            };
            for ch in 0..c {
                out[[ch, dx, dy]] += src[[ch, ix, iy]];
            }
        }
    }
    Ok(BevFeature::new(out))
}

/// Apply the ground-plane similarity to box targets. Heights and vertical
/// positions scale with the similarity factor; yaw follows the heading.
pub fn apply_bda_boxes(boxes: &[Box3D], t: &BdaTransform) -> Vec<Box3D> {
    boxes
        .iter()
        .map(|b| {
            let [x, y] = t.apply_xy([b.center[0], b.center[1]]);
            let velocity = t.apply_xy(b.velocity);
            Box3D {
                center: [x, y, b.center[2] * t.scale],
                dims: b.dims.map(|d| d * t.scale),
                yaw: t.apply_yaw(b.yaw),
                velocity,
                ..b.clone()
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn bx(center: [f64; 3], yaw: f64, vel: [f64; 2]) -> Box3D {
        Box3D {
            center,
            dims: [1.8, 4.2, 1.5],
            yaw,
            velocity: vel,
            class_id: 0,
            attribute_id: 0,
            score: 1.0,
        }
    }

    #[test]
    fn collapsed_ida_is_test_time_transform() {
        let cfg = IdaConfig::test_time();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = sample_ida(&cfg, &mut rng).unwrap();
        let m = a.matrix();
        assert!((m[(0, 0)] - 0.48).abs() < 1e-15 && (m[(1, 1)] - 0.48).abs() < 1e-15);
        assert!(m[(0, 1)].abs() < 1e-15 && m[(1, 0)].abs() < 1e-15);
        let [x1, y1] = a.crop_offset();
        let (x2, y2) = (x1 + 704.0, y1 + 256.0);
        assert!((x1 - 32.0).abs() < 1e-9, "x1 = {x1}");
        assert!((y1 - 176.0).abs() < 1e-9, "y1 = {y1}");
        assert!((x2 - 736.0).abs() < 1e-9 && (y2 - 432.0).abs() < 1e-9);
        // Source corner (32/0.48, 176/0.48) lands at the crop origin.
        let o = a.apply(PixelPoint::new(32.0 / 0.48, 176.0 / 0.48));
        assert!(o.x.abs() < 1e-9 && o.y.abs() < 1e-9);
    }

    #[test]
    fn ida_is_seed_reproducible() {
        let cfg = IdaConfig::default();
        let a = sample_ida(&cfg, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        let b = sample_ida(&cfg, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ida_parameters_stay_in_range() {
        let cfg = IdaConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut flips = 0;
        for _ in 0..10_000 {
            let a = sample_ida(&cfg, &mut rng).unwrap();
            let s = a.scale();
            let r = a.rotation();
            assert!(s >= cfg.scale_range[0] && s <= cfg.scale_range[1]);
            assert!(r >= cfg.rot_range[0] && r <= cfg.rot_range[1]);
            let [x1, y1] = a.crop_offset();
            assert!(x1 >= 0.0 && x1 <= (s * 1600.0 - 704.0).max(0.0));
            assert_eq!(y1, (s * 900.0 - 256.0).max(0.0));
            flips += a.is_flipped() as usize;
        }
        assert!(flips > 4500 && flips < 5500);
    }

    #[test]
    fn crop_vertical_modes() {
        let mut cfg = IdaConfig {
            scale_range: [0.5, 0.5],
            ..IdaConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        cfg.crop_vertical = CropVertical::FixedUnclamped;
        let a = sample_ida(&cfg, &mut rng).unwrap();
        assert_eq!(a.crop_offset()[1], 450.0 - 256.0);
        cfg.crop_vertical = CropVertical::Random;
        for _ in 0..100 {
            let y1 = sample_ida(&cfg, &mut rng).unwrap().crop_offset()[1];
            assert!((0.0..=194.0).contains(&y1));
        }
        cfg.scale_range = [0.2, 0.2];
        cfg.crop_vertical = CropVertical::FixedUnclamped;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn ida_image_identity_and_flip() {
        let img = Raster::from_vec(3, 4, 1, (0u8..12).collect()).unwrap();
        let id = AugTransform2D::identity();
        assert_eq!(apply_ida_image(&img, &id, [4, 3]), img);

        let flip = compose_aug(&[AugOp::Flip { width: 4.0 }]).unwrap();
        let f = apply_ida_image(&img, &flip, [4, 3]);
        for y in 0..3 {
            for x in 0..4 {
                assert_eq!(f.get(y, x, 0), img.get(y, 3 - x, 0));
            }
        }
        assert_eq!(apply_ida_image(&f, &flip, [4, 3]), img);
    }

    #[test]
    fn ida_image_out_of_bounds_is_zero() {
        let img = Raster::from_vec(2, 2, 1, vec![9u8; 4]).unwrap();
        let shift = compose_aug(&[AugOp::Crop { offset: [-1.0, 0.0] }]).unwrap();
        let out = apply_ida_image(&img, &shift, [3, 2]);
        assert_eq!(out.get(0, 0, 0), 0);
        assert_eq!(out.get(0, 1, 0), 9);
        assert_eq!(out.get(1, 2, 0), 9);
    }

    #[test]
    fn lattice_flip_reverses_columns() {
        let data = Array3::from_shape_fn((2, 3, 5), |(c, i, j)| (c * 100 + i * 10 + j) as f64);
        let flip = compose_aug(&[AugOp::Flip { width: 80.0 }]).unwrap();
        let out = warp_feature_lattice(&data, 16, &flip, (3, 5));
        for c in 0..2 {
            for i in 0..3 {
                for j in 0..5 {
                    assert_eq!(out[[c, i, j]], data[[c, i, 4 - j]]);
                }
            }
        }
    }

    #[test]
    fn bda_matrix_cases() {
        let id = sample_bda(
            &BdaConfig {
                flip_prob: 0.0,
                rot_range: [0.0, 0.0],
                scale_range: [1.0, 1.0],
            },
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        assert_eq!(id.matrix(), Matrix2::identity());

        let quarter = BdaTransform::new(false, false, FRAC_PI_2, 1.0).unwrap();
        let m = quarter.matrix();
        assert!((m - Matrix2::new(0.0, -1.0, 1.0, 0.0)).abs().max() < 1e-15);

        let cfg = BdaConfig::default();
        let a = sample_bda(&cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = sample_bda(&cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn bda_rotation_on_boxes() {
        let t = BdaTransform::new(false, false, FRAC_PI_2, 1.0).unwrap();
        let out = apply_bda_boxes(&[bx([3.0, 0.0, -1.0], 0.0, [1.0, 0.0])], &t)[0].clone();
        assert!(out.center[0].abs() < 1e-12 && (out.center[1] - 3.0).abs() < 1e-12);
        assert!((out.yaw - FRAC_PI_2).abs() < 1e-12);
        assert!(out.velocity[0].abs() < 1e-12 && (out.velocity[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bda_y_flip_on_boxes() {
        let t = BdaTransform::new(false, true, 0.0, 1.0).unwrap();
        let b = bx([4.0, 2.0, -0.5], 0.7, [1.5, -2.0]);
        let out = apply_bda_boxes(std::slice::from_ref(&b), &t)[0].clone();
        assert_eq!(out.center, [4.0, -2.0, -0.5]);
        assert_eq!(out.yaw, -0.7);
        assert_eq!(out.velocity, [1.5, 2.0]);
        assert_eq!(out.dims, b.dims);
    }

    #[test]
    fn bda_x_flip_on_yaw() {
        let t = BdaTransform::new(true, false, 0.0, 1.0).unwrap();
        assert!((t.apply_yaw(0.3) - (PI - 0.3)).abs() < 1e-12);
        assert!((t.apply_yaw(-2.9) - wrap_angle(PI + 2.9)).abs() < 1e-12);
    }

    #[test]
    fn bda_scale_on_boxes() {
        let t = BdaTransform::new(false, false, 0.0, 1.05).unwrap();
        let b = bx([10.0, -3.0, -1.0], 1.1, [3.0, 4.0]);
        let out = apply_bda_boxes(std::slice::from_ref(&b), &t)[0].clone();
        for i in 0..3 {
            assert!((out.center[i] - 1.05 * b.center[i]).abs() < 1e-12);
            assert!((out.dims[i] - 1.05 * b.dims[i]).abs() < 1e-12);
        }
        let speed = out.velocity[0].hypot(out.velocity[1]);
        assert!((speed - 5.25).abs() < 1e-12);
        assert_eq!(out.yaw, 1.1);
    }

    fn impulse(grid: &BevGrid, ix: usize, iy: usize) -> BevFeature {
        let mut f = BevFeature::zeros(1, grid);
        f.data_mut()[[0, ix, iy]] = 1.0;
        f
    }

    #[test]
    fn bda_feature_identity_and_flip() {
        let grid = BevGrid::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = BevFeature::new(Array3::from_shape_fn((2, 128, 128), |_| rng.random::<f64>()));
        assert_eq!(
            apply_bda_feature(&f, &BdaTransform::identity(), &grid).unwrap(),
            f
        );
        let flip = BdaTransform::new(true, false, 0.0, 1.0).unwrap();
        let out = apply_bda_feature(&f, &flip, &grid).unwrap();
        for c in 0..2 {
            for ix in 0..128 {
                for iy in 0..128 {
                    assert_eq!(out.data()[[c, ix, iy]], f.data()[[c, 127 - ix, iy]]);
                }
            }
        }
    }

    #[test]
    fn bda_quarter_turn_permutes_cells() {
        let grid = BevGrid::default();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let f = BevFeature::new(Array3::from_shape_fn((1, 128, 128), |_| rng.random::<f64>()));
        let t = BdaTransform::new(false, false, FRAC_PI_2, 1.0).unwrap();
        let out = apply_bda_feature(&f, &t, &grid).unwrap();
        // Index-permutation oracle: (ix, iy) reads (iy, n-1-ix).
        for ix in 0..128 {
            for iy in 0..128 {
                assert_eq!(out.data()[[0, ix, iy]], f.data()[[0, iy, 127 - ix]]);
            }
        }
        let moved = apply_bda_feature(&impulse(&grid, 70, 64), &t, &grid).unwrap();
        assert_eq!(moved.data()[[0, 63, 70]], 1.0);
    }

    #[test]
    fn bda_rotation_needs_centered_grid() {
        let grid = BevGrid::new(0.0, 51.2, -25.6, 25.6, 0.8, -5.0, 3.0).unwrap();
        let f = BevFeature::zeros(1, &grid);
        let t = BdaTransform::new(false, false, 0.1, 1.0).unwrap();
        assert!(matches!(apply_bda_feature(&f, &t, &grid), Err(Error::Config(_))));
        let s = BdaTransform::new(false, false, 0.0, 1.02).unwrap();
        assert!(apply_bda_feature(&f, &s, &grid).is_ok());
    }

    fn any_bda() -> impl Strategy<Value = BdaTransform> {
        (any::<bool>(), any::<bool>(), -PI..PI, 0.5f64..2.0)
            .prop_map(|(fx, fy, r, s)| BdaTransform::new(fx, fy, r, s).unwrap())
    }

    proptest! {
        #[test]
        fn bda_inverse_composes_to_identity(t in any_bda()) {
            let m = t.matrix() * t.inverse().matrix();
            prop_assert!((m - Matrix2::identity()).abs().max() < 1e-12);
        }

        #[test]
        fn bda_box_round_trip(
            t in any_bda(),
            x in -45.0f64..45.0, y in -45.0f64..45.0, z in -3.0f64..1.0,
            yaw in -PI..PI, vx in -10.0f64..10.0, vy in -10.0f64..10.0,
        ) {
            let b = bx([x, y, z], wrap_angle(yaw), [vx, vy]);
            let back = apply_bda_boxes(&apply_bda_boxes(std::slice::from_ref(&b), &t), &t.inverse())[0].clone();
            for i in 0..3 {
                prop_assert!((back.center[i] - b.center[i]).abs() < 1e-9);
                prop_assert!((back.dims[i] - b.dims[i]).abs() < 1e-9);
            }
            for i in 0..2 {
                prop_assert!((back.velocity[i] - b.velocity[i]).abs() < 1e-9);
            }
            prop_assert!(wrap_angle(back.yaw - b.yaw).abs() < 1e-9);
        }

        #[test]
        fn yaw_follows_matrix_heading(t in any_bda(), yaw in -PI..PI) {
            let h = t.apply_xy([yaw.cos(), yaw.sin()]);
            let want = h[1].atan2(h[0]);
            prop_assert!(wrap_angle(t.apply_yaw(yaw) - want).abs() < 1e-9);
        }
    }
}
