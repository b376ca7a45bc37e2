//! Center-based detection codec on the BEV grid.
//!
//! Targets are encoded as per-class Gaussian heatmaps plus per-cell regression
//! rasters written at each box's center cell:
//!
//! | raster | content |
//! |---|---|
//! | `reg` | fractional center position inside the cell, `(dx, dy)` in cells |
//! | `z` | center height in meters |
//! | `dims` | natural log of `(w, l, h)` |
//! | `rot` | `(sin yaw, cos yaw)` |
//! | `vel` | `(vx, vy)` in m/s |
//! | `attr` | attribute id, passed through |
//!
//! Gaussian radii follow the corner-overlap rule with a 0.1 minimum overlap and
//! a floor of `min_radius` cells; the kernel uses `sigma = (2r + 1) / 6`.

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::geometry::wrap_angle;
use crate::view_transform::{BevFeature, BevGrid};
use crate::{Error, Result};

/// Ground-plane oriented 3D box. `dims` is `(w, l, h)`: `l` runs along the
/// heading, `w` across it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub center: [f64; 3],
    pub dims: [f64; 3],
    pub yaw: f64,
    pub velocity: [f64; 2],
    pub class_id: u32,
    pub attribute_id: u32,
    pub score: f64,
}

impl Box3D {
    pub fn validate(&self) -> Result<()> {
        let finite = self
            .center
            .iter()
            .chain(&self.dims)
            .chain(&self.velocity)
            .chain([&self.yaw, &self.score])
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidInput("box has a non-finite field".into()));
        }
        if self.dims.iter().any(|&d| d <= 0.0) {
            return Err(Error::InvalidInput(format!("box dims {:?}", self.dims)));
        }
        if !(0.0..=1.0).contains(&self.score) {
            return Err(Error::InvalidInput(format!("box score {}", self.score)));
        }
        Ok(())
    }

    /// Ground-plane distance between centers.
    pub fn center_distance(&self, other: &Box3D) -> f64 {
        (self.center[0] - other.center[0]).hypot(self.center[1] - other.center[1])
    }

    /// Footprint corners in counter-clockwise order.
    pub fn footprint(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.yaw.sin_cos();
        let hl = self.dims[1] / 2.0;
        let hw = self.dims[0] / 2.0;
        [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)].map(|(a, b)| {
            [
                self.center[0] + a * c - b * s,
                self.center[1] + a * s + b * c,
            ]
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadRaster {
    pub heatmap: Array3<f64>,
    pub reg: Array3<f64>,
    pub z: Array2<f64>,
    pub dims: Array3<f64>,
    pub rot: Array3<f64>,
    pub vel: Array3<f64>,
    pub attr: Array2<u32>,
}

impl HeadRaster {
    pub fn zeros(num_classes: usize, grid: &BevGrid) -> Self {
        let (nx, ny) = (grid.nx(), grid.ny());
        let mut rot = Array3::zeros((2, nx, ny));
        rot.index_axis_mut(Axis(0), 1).fill(1.0);
        Self {
            heatmap: Array3::zeros((num_classes, nx, ny)),
            reg: Array3::from_elem((2, nx, ny), 0.5),
            z: Array2::zeros((nx, ny)),
            dims: Array3::zeros((3, nx, ny)),
            rot,
            vel: Array3::zeros((2, nx, ny)),
            attr: Array2::zeros((nx, ny)),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.heatmap.dim().0
    }

    fn grid_dim(&self) -> (usize, usize) {
        let (_, nx, ny) = self.heatmap.dim();
        (nx, ny)
    }
}

/// Gaussian radius (cells) such that a box shifted by it keeps at least
/// `min_overlap` IoU with the original.
pub fn gaussian_radius(length: f64, width: f64, min_overlap: f64) -> f64 {
    let (h, w) = (length, width);
    let b1 = h + w;
    let c1 = w * h * (1.0 - min_overlap) / (1.0 + min_overlap);
    let r1 = (b1 + (b1 * b1 - 4.0 * c1).sqrt()) / 2.0;

    let b2 = 2.0 * (h + w);
    let c2 = (1.0 - min_overlap) * w * h;
    let r2 = (b2 + (b2 * b2 - 16.0 * c2).sqrt()) / 2.0;

    let a3 = 4.0 * min_overlap;
    let b3 = -2.0 * min_overlap * (h + w);
    let c3 = (min_overlap - 1.0) * w * h;
    let r3 = (b3 + (b3 * b3 - 4.0 * a3 * c3).sqrt()) / 2.0;
    r1.min(r2).min(r3)
}

/// Stamp a peak-1 Gaussian of `radius` cells at `(cx, cy)` with elementwise max.
pub fn draw_gaussian(heat: &mut ndarray::ArrayViewMut2<'_, f64>, cx: usize, cy: usize, radius: usize) {
    let sigma = (2 * radius + 1) as f64 / 6.0;
    let (nx, ny) = heat.dim();
    let r = radius as isize;
    for dx in -r..=r {
        for dy in -r..=r {
            let (x, y) = (cx as isize + dx, cy as isize + dy);
            if x < 0 || y < 0 || x >= nx as isize || y >= ny as isize {
                continue;
            }
            let g = (-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp();
            if g < f64::EPSILON {
                continue;
            }
            let cell = &mut heat[[x as usize, y as usize]];
            if g > *cell {
                *cell = g;
            }
        }
    }
}

pub const GAUSSIAN_OVERLAP: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedTargets {
    pub raster: HeadRaster,
    /// Boxes whose centers fall outside the grid.
    pub skipped: usize,
}

pub fn encode_targets(
    boxes: &[Box3D],
    grid: &BevGrid,
    num_classes: usize,
    min_radius: usize,
) -> Result<EncodedTargets> {
    let mut raster = HeadRaster::zeros(num_classes, grid);
    let mut skipped = 0;
    for b in boxes {
        b.validate()?;
        let k = b.class_id as usize;
        if k >= num_classes {
            return Err(Error::InvalidInput(format!(
                "class id {k} with {num_classes} heatmap classes"
            )));
        }
        let Some((ix, iy)) = grid.cell_xy(b.center[0], b.center[1]) else {
            skipped += 1;
            continue;
        };
        let radius = gaussian_radius(b.dims[1] / grid.cell, b.dims[0] / grid.cell, GAUSSIAN_OVERLAP);
        let radius = (radius.max(0.0) as usize).max(min_radius);
        draw_gaussian(
            &mut raster.heatmap.index_axis_mut(Axis(0), k),
            ix,
            iy,
            radius,
        );
        let fx = (b.center[0] - grid.x_min) / grid.cell;
        let fy = (b.center[1] - grid.y_min) / grid.cell;
        raster.reg[[0, ix, iy]] = fx - ix as f64;
        raster.reg[[1, ix, iy]] = fy - iy as f64;
        raster.z[[ix, iy]] = b.center[2];
        for d in 0..3 {
            raster.dims[[d, ix, iy]] = b.dims[d].ln();
        }
        let (s, c) = b.yaw.sin_cos();
        raster.rot[[0, ix, iy]] = s;
        raster.rot[[1, ix, iy]] = c;
        raster.vel[[0, ix, iy]] = b.velocity[0];
        raster.vel[[1, ix, iy]] = b.velocity[1];
        raster.attr[[ix, iy]] = b.attribute_id;
    }
    Ok(EncodedTargets { raster, skipped })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeParams {
    pub max_dets: usize,
    pub score_thresh: f64,
}

impl Default for DecodeParams {
    fn default() -> Self {
        Self {
            max_dets: 500,
            score_thresh: 0.1,
        }
    }
}

/// Local 3x3 maxima above threshold, best `max_dets` by score.
pub fn decode(raster: &HeadRaster, grid: &BevGrid, params: &DecodeParams) -> Result<Vec<Box3D>> {
    if raster.grid_dim() != (grid.nx(), grid.ny()) {
        return Err(Error::ShapeMismatch(format!(
            "head raster {:?} vs grid {}x{}",
            raster.grid_dim(),
            grid.nx(),
            grid.ny()
        )));
    }
    let (nx, ny) = raster.grid_dim();
    let mut peaks = Vec::new();
    for (k, heat) in raster.heatmap.outer_iter().enumerate() {
        for ix in 0..nx {
            for iy in 0..ny {
                let v = heat[[ix, iy]];
                if !(v > params.score_thresh) {
                    continue;
                }
                let mut is_peak = true;
                'window: for x in ix.saturating_sub(1)..(ix + 2).min(nx) {
                    for y in iy.saturating_sub(1)..(iy + 2).min(ny) {
                        if heat[[x, y]] > v {
                            is_peak = false;
                            break 'window;
                        }
                    }
                }
                if is_peak {
                    peaks.push((v, k, ix, iy));
                }
            }
        }
    }
    peaks.sort_by(|a, b| {
        b.0.total_cmp(&a.0)
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
            .then(a.3.cmp(&b.3))
    });
    peaks.truncate(params.max_dets);
    Ok(peaks
        .into_iter()
        .map(|(score, k, ix, iy)| Box3D {
            center: [
                grid.x_min + (ix as f64 + raster.reg[[0, ix, iy]]) * grid.cell,
                grid.y_min + (iy as f64 + raster.reg[[1, ix, iy]]) * grid.cell,
                raster.z[[ix, iy]],
            ],
            dims: [0, 1, 2].map(|d| raster.dims[[d, ix, iy]].exp()),
            yaw: wrap_angle(raster.rot[[0, ix, iy]].atan2(raster.rot[[1, ix, iy]])),
            velocity: [raster.vel[[0, ix, iy]], raster.vel[[1, ix, iy]]],
            class_id: k as u32,
            attribute_id: raster.attr[[ix, iy]],
            score: score.clamp(0.0, 1.0),
        })
        .collect())
}

/// Greedy distance NMS: walk detections by descending score (stable for equal
/// scores) and drop any detection within its class radius of a kept one.
pub fn nms_distance(dets: &[Box3D], radius_per_class: &[f64]) -> Result<Vec<Box3D>> {
    if let Some(r) = radius_per_class.iter().find(|r| !(**r > 0.0)) {
        return Err(Error::InvalidParameter(format!("nms radius {r}")));
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut kept_by_class: Vec<Vec<usize>> = vec![Vec::new(); radius_per_class.len()];
    let mut kept = Vec::new();
    for i in order {
        let d = &dets[i];
        let k = d.class_id as usize;
        let Some(&radius) = radius_per_class.get(k) else {
            return Err(Error::InvalidParameter(format!("no nms radius for class {k}")));
        };
        let suppressed = kept_by_class[k]
            .iter()
            .any(|&j| dets[j].center_distance(d) < radius);
        if !suppressed {
            kept_by_class[k].push(i);
            kept.push(d.clone());
        }
    }
    Ok(kept)
}

/// Mean camera-axis depth of the visible faces of a `w x l` footprint behind
/// its nearest point, averaged over headings. Surface-only evidence places
/// centers this much too close to a camera at the origin.
pub fn visible_depth_offset(w: f64, l: f64) -> f64 {
    const N: usize = 1024;
    (0..N)
        .map(|i| {
            let phi = (i as f64 + 0.5) / N as f64 * std::f64::consts::FRAC_PI_2;
            (w * l / 2.0) / (w * phi.cos() + l * phi.sin())
        })
        .sum::<f64>()
        / N as f64
}

/// Move each detection away from the ego origin by its class offset.
pub fn apply_range_offset(dets: &mut [Box3D], offset_per_class: &[f64]) {
    for d in dets {
        let Some(&off) = offset_per_class.get(d.class_id as usize) else {
            continue;
        };
        let r = d.center[0].hypot(d.center[1]);
        if r > 0.0 && off != 0.0 {
            d.center[0] *= (r + off) / r;
            d.center[1] *= (r + off) / r;
        }
    }
}

/// Parameters of the occupancy head.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OccupancyHeadParams {
    /// Width of the Gaussian used to smooth pillar mass, in cells.
    pub sigma_cells: f64,
    /// Height written into the `z` raster, meters.
    pub z_prior: f64,
}

impl Default for OccupancyHeadParams {
    fn default() -> Self {
        Self {
            sigma_cells: 1.5,
            z_prior: 0.0,
        }
    }
}

/// Network-free head: BEV channel `k` is read as class-`k` occupancy mass.
///
/// The heatmap is `1 - exp(-m)` of the Gaussian-smoothed mass (unit-peak
/// kernel), and the center offset of each cell is the mass centroid of its
/// neighbourhood. Size, heading and velocity are left at neutral values.
pub fn occupancy_head(
    bev: &BevFeature,
    grid: &BevGrid,
    num_classes: usize,
    params: &OccupancyHeadParams,
) -> Result<HeadRaster> {
    if !bev.matches_grid(grid) {
        return Err(Error::ShapeMismatch("bev feature does not match grid".into()));
    }
    if !(params.sigma_cells > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "occupancy sigma {}",
            params.sigma_cells
        )));
    }
    let mut raster = HeadRaster::zeros(num_classes, grid);
    raster.z.fill(params.z_prior);
    let used = num_classes.min(bev.channels());
    let radius = (3.0 * params.sigma_cells).ceil() as usize;
    let kernel: Vec<f64> = (-(radius as isize)..=radius as isize)
        .map(|d| (-((d * d) as f64) / (2.0 * params.sigma_cells * params.sigma_cells)).exp())
        .collect();
    for k in 0..used {
        let mass = bev.data().index_axis(Axis(0), k).mapv(|v| v.max(0.0));
        let blurred = blur_separable(&mass, &kernel, radius);
        raster
            .heatmap
            .index_axis_mut(Axis(0), k)
            .assign(&blurred.mapv(|m| 1.0 - (-m).exp()));
    }

    let total = bev
        .data()
        .slice(ndarray::s![..used, .., ..])
        .sum_axis(Axis(0))
        .mapv(|v| v.max(0.0));
    let (nx, ny) = total.dim();
    let win = (2.0 * params.sigma_cells).ceil() as isize;
    for ix in 0..nx {
        for iy in 0..ny {
            let (mut m, mut sx, mut sy) = (0.0, 0.0, 0.0);
            for dx in -win..=win {
                for dy in -win..=win {
                    let (x, y) = (ix as isize + dx, iy as isize + dy);
                    if x < 0 || y < 0 || x >= nx as isize || y >= ny as isize {
                        continue;
                    }
                    let v = total[[x as usize, y as usize]];
                    m += v;
                    sx += v * dx as f64;
                    sy += v * dy as f64;
                }
            }
            if m > 0.0 {
                raster.reg[[0, ix, iy]] = 0.5 + sx / m;
                raster.reg[[1, ix, iy]] = 0.5 + sy / m;
            }
        }
    }
    Ok(raster)
}

fn blur_separable(src: &Array2<f64>, kernel: &[f64], radius: usize) -> Array2<f64> {
    let (nx, ny) = src.dim();
    let r = radius as isize;
    let mut tmp = Array2::zeros((nx, ny));
    for ix in 0..nx {
        for iy in 0..ny {
            let mut acc = 0.0;
            for (t, w) in kernel.iter().enumerate() {
                let x = ix as isize + t as isize - r;
                if x >= 0 && (x as usize) < nx {
                    acc += w * src[[x as usize, iy]];
                }
            }
            tmp[[ix, iy]] = acc;
        }
    }
    let mut out = Array2::zeros((nx, ny));
    for ix in 0..nx {
        for iy in 0..ny {
            let mut acc = 0.0;
            for (t, w) in kernel.iter().enumerate() {
                let y = iy as isize + t as isize - r;
                if y >= 0 && (y as usize) < ny {
                    acc += w * tmp[[ix, y as usize]];
                }
            }
            out[[ix, iy]] = acc;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn grid() -> BevGrid {
        BevGrid::default()
    }

    fn random_box(rng: &mut impl Rng, classes: u32) -> Box3D {
        Box3D {
            center: [
                rng.random_range(-50.0..50.0),
                rng.random_range(-50.0..50.0),
                rng.random_range(-2.0..1.0),
            ],
            dims: [
                rng.random_range(0.3..3.0),
                rng.random_range(0.3..12.0),
                rng.random_range(0.5..4.0),
            ],
            yaw: wrap_angle(rng.random_range(-PI..PI)),
            velocity: [rng.random_range(-15.0..15.0), rng.random_range(-15.0..15.0)],
            class_id: rng.random_range(0..classes),
            attribute_id: rng.random_range(0..4),
            score: 1.0,
        }
    }

    #[test]
    fn cell_center_box_encodes_half_offsets() {
        let g = grid();
        let [x, y] = g.cell_center(40, 90);
        let b = Box3D {
            center: [x, y, -0.7],
            dims: [1.0, 1.0, 1.0],
            yaw: 0.0,
            velocity: [0.0, 0.0],
            class_id: 1,
            attribute_id: 2,
            score: 1.0,
        };
        let enc = encode_targets(&[b], &g, 3, 2).unwrap();
        let r = &enc.raster;
        assert_eq!(r.heatmap[[1, 40, 90]], 1.0);
        assert!((r.reg[[0, 40, 90]] - 0.5).abs() < 1e-12);
        assert!((r.reg[[1, 40, 90]] - 0.5).abs() < 1e-12);
        assert_eq!([r.dims[[0, 40, 90]], r.dims[[1, 40, 90]], r.dims[[2, 40, 90]]], [0.0; 3]);
        assert_eq!(r.heatmap.index_axis(Axis(0), 0).sum(), 0.0);
    }

    #[test]
    fn radius_floor_applies() {
        // A tiny box still gets a radius-2 stamp.
        let g = grid();
        let b = Box3D {
            center: [0.4, 0.4, 0.0],
            dims: [0.2, 0.2, 0.2],
            yaw: 0.0,
            velocity: [0.0; 2],
            class_id: 0,
            attribute_id: 0,
            score: 1.0,
        };
        let r = encode_targets(&[b], &g, 1, 2).unwrap().raster;
        let sigma: f64 = 5.0 / 6.0;
        assert!((r.heatmap[[0, 66, 64]] - (-4.0 / (2.0 * sigma * sigma)).exp()).abs() < 1e-15);
        assert_eq!(r.heatmap[[0, 67, 64]], 0.0);
    }

    #[test]
    fn gaussian_radius_reference_values() {
        // Evaluated by hand from the three quadratic roots.
        let r = gaussian_radius(10.0, 10.0, 0.1);
        let b1: f64 = 20.0;
        let c1 = 100.0 * 0.9 / 1.1;
        let r1 = (b1 + (b1 * b1 - 4.0 * c1).sqrt()) / 2.0;
        let b2: f64 = 40.0;
        let r2 = (b2 + (b2 * b2 - 16.0 * 90.0).sqrt()) / 2.0;
        let (a3, b3, c3): (f64, f64, f64) = (0.4, -4.0, -90.0);
        let r3 = (b3 + (b3 * b3 - 4.0 * a3 * c3).sqrt()) / 2.0;
        assert!((r - r1.min(r2).min(r3)).abs() < 1e-12);
        assert!(r > 0.0);
    }

    #[test]
    fn outside_boxes_are_skipped() {
        let mut b = random_box(&mut ChaCha8Rng::seed_from_u64(1), 1);
        b.center[0] = 60.0;
        let enc = encode_targets(&[b], &grid(), 1, 2).unwrap();
        assert_eq!(enc.skipped, 1);
        assert_eq!(enc.raster.heatmap.sum(), 0.0);
    }

    #[test]
    fn superposition_of_distant_boxes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = grid();
        for _ in 0..50 {
            let a = random_box(&mut rng, 3);
            let mut b = random_box(&mut rng, 3);
            if a.center_distance(&b) < 30.0 {
                b.center[0] = -a.center[0].signum() * 45.0;
                b.center[1] = -a.center[1].signum() * 45.0;
            }
            let both = encode_targets(&[a.clone(), b.clone()], &g, 3, 2).unwrap().raster;
            let ra = encode_targets(&[a], &g, 3, 2).unwrap().raster;
            let rb = encode_targets(&[b], &g, 3, 2).unwrap().raster;
            let max = ndarray::Zip::from(&ra.heatmap)
                .and(&rb.heatmap)
                .map_collect(|x, y| x.max(*y));
            assert_eq!(both.heatmap, max);
            // Regression rasters: each box wrote one cell, background is the neutral value.
            let neutral = HeadRaster::zeros(3, &g);
            let merged_z = &ra.z + &rb.z - &neutral.z;
            assert_eq!(both.z, merged_z);
            let merged_vel = &ra.vel + &rb.vel - &neutral.vel;
            assert_eq!(both.vel, merged_vel);
        }
    }

    #[test]
    fn zero_heatmap_decodes_to_nothing() {
        let r = HeadRaster::zeros(4, &grid());
        assert!(decode(&r, &grid(), &DecodeParams::default()).unwrap().is_empty());
    }

    #[test]
    fn quarter_turn_yaw_is_recovered() {
        let mut b = random_box(&mut ChaCha8Rng::seed_from_u64(3), 1);
        b.yaw = FRAC_PI_2;
        let r = encode_targets(&[b], &grid(), 1, 2).unwrap().raster;
        let d = decode(&r, &grid(), &DecodeParams::default()).unwrap();
        assert_eq!(d.len(), 1);
        assert!((d[0].yaw - FRAC_PI_2).abs() < 1e-9);
    }

    #[test]
    fn codec_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = grid();
        for _ in 0..1000 {
            let b = random_box(&mut rng, 5);
            let r = encode_targets(std::slice::from_ref(&b), &g, 5, 2).unwrap().raster;
            let d = decode(&r, &g, &DecodeParams::default()).unwrap();
            assert_eq!(d.len(), 1);
            let got = &d[0];
            assert!(got.center_distance(&b) < g.cell / 1000.0);
            assert!((got.center[2] - b.center[2]).abs() < 1e-12);
            for i in 0..3 {
                assert!((got.dims[i] - b.dims[i]).abs() <= 1e-6 * b.dims[i]);
            }
            assert!(wrap_angle(got.yaw - b.yaw).abs() < 1e-6);
            assert_eq!(got.velocity, b.velocity);
            assert_eq!((got.class_id, got.attribute_id), (b.class_id, b.attribute_id));
            assert_eq!(got.score, 1.0);
        }
    }

    #[test]
    fn decode_respects_threshold_and_cap() {
        let g = grid();
        let mut r = HeadRaster::zeros(1, &g);
        r.heatmap[[0, 10, 10]] = 0.1;
        r.heatmap[[0, 20, 20]] = 0.5;
        r.heatmap[[0, 30, 30]] = 0.9;
        let all = decode(&r, &g, &DecodeParams { max_dets: 10, score_thresh: 0.1 }).unwrap();
        assert_eq!(all.len(), 2);
        assert_eq!(all[0].score, 0.9);
        let capped = decode(&r, &g, &DecodeParams { max_dets: 1, score_thresh: 0.0 }).unwrap();
        assert_eq!(capped.len(), 1);
        assert_eq!(capped[0].score, 0.9);
    }

    fn det(x: f64, y: f64, class_id: u32, score: f64) -> Box3D {
        Box3D {
            center: [x, y, 0.0],
            dims: [1.0; 3],
            yaw: 0.0,
            velocity: [0.0; 2],
            class_id,
            attribute_id: 0,
            score,
        }
    }

    #[test]
    fn nms_basic_cases() {
        let kept = nms_distance(&[det(0.0, 0.0, 0, 0.6), det(0.1, 0.0, 0, 0.8)], &[0.5]).unwrap();
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score, 0.8);
        let kept =
            nms_distance(&[det(0.0, 0.0, 0, 0.6), det(0.0, 0.0, 1, 0.8)], &[0.5, 0.5]).unwrap();
        assert_eq!(kept.len(), 2);
        assert!(nms_distance(&[det(0.0, 0.0, 0, 0.5)], &[0.0]).is_err());
        assert!(nms_distance(&[det(0.0, 0.0, 3, 0.5)], &[1.0]).is_err());
    }

    // Quadratic oracle: repeatedly take the best remaining detection and
    // delete everything it suppresses.
    fn nms_oracle(dets: &[Box3D], radii: &[f64]) -> Vec<Box3D> {
        let mut alive: Vec<bool> = vec![true; dets.len()];
        let mut out = Vec::new();
        loop {
            let mut best: Option<usize> = None;
            for i in 0..dets.len() {
                if alive[i] && best.is_none_or(|b| dets[i].score > dets[b].score) {
                    best = Some(i);
                }
            }
            let Some(b) = best else { break };
            alive[b] = false;
            out.push(dets[b].clone());
            for i in 0..dets.len() {
                if alive[i]
                    && dets[i].class_id == dets[b].class_id
                    && dets[i].center_distance(&dets[b]) < radii[dets[b].class_id as usize]
                {
                    alive[i] = false;
                }
            }
        }
        out
    }

    #[test]
    fn nms_matches_quadratic_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let radii = [0.5, 1.0, 4.0];
        for _ in 0..500 {
            let n = rng.random_range(0..40);
            let dets: Vec<Box3D> = (0..n)
                .map(|_| {
                    det(
                        rng.random_range(-5.0..5.0),
                        rng.random_range(-5.0..5.0),
                        rng.random_range(0..3),
                        // Coarse scores create ties.
                        (rng.random_range(0..20) as f64) / 20.0,
                    )
                })
                .collect();
            assert_eq!(nms_distance(&dets, &radii).unwrap(), nms_oracle(&dets, &radii));
        }
    }

    #[test]
    fn occupancy_head_peaks_at_mass() {
        let g = grid();
        let mut bev = BevFeature::zeros(2, &g);
        bev.data_mut()[[1, 30, 70]] = 3.0;
        let r = occupancy_head(&bev, &g, 2, &OccupancyHeadParams::default()).unwrap();
        let dets = decode(&r, &g, &DecodeParams::default()).unwrap();
        assert_eq!(dets.len(), 1);
        assert_eq!(dets[0].class_id, 1);
        let [x, y] = g.cell_center(30, 70);
        assert!((dets[0].center[0] - x).abs() < 1e-12 && (dets[0].center[1] - y).abs() < 1e-12);
        assert!((dets[0].score - (1.0 - (-3.0f64).exp())).abs() < 1e-12);
    }

    #[test]
    fn visible_offset_limits() {
        // A square footprint: mean of (a/2) / (cos + sin) over a quarter turn.
        let sq = visible_depth_offset(2.0, 2.0);
        assert!(sq > 0.7 && sq < 1.0);
        // Degenerate thin slab: never deeper than half its length.
        assert!(visible_depth_offset(0.01, 4.0) < 2.0);
        let mut d = [det(3.0, 4.0, 0, 1.0)];
        apply_range_offset(&mut d, &[1.0]);
        assert!((d[0].center[0] - 3.6).abs() < 1e-12 && (d[0].center[1] - 4.8).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn decode_is_permutation_invariant(seed in any::<u64>(), n in 1usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = grid();
            let mut boxes: Vec<Box3D> = Vec::new();
            while boxes.len() < n {
                let b = random_box(&mut rng, 3);
                if boxes.iter().all(|o| o.center_distance(&b) > 3.0) {
                    boxes.push(b);
                }
            }
            let a = decode(&encode_targets(&boxes, &g, 3, 2).unwrap().raster, &g, &DecodeParams::default()).unwrap();
            boxes.reverse();
            let b = decode(&encode_targets(&boxes, &g, 3, 2).unwrap().raster, &g, &DecodeParams::default()).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
