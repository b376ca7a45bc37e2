//! Lift-splat view transformer.
//!
//! Each camera's feature map is lifted into a frustum of `(pixel, depth-bin)`
//! points weighted by a softmax depth distribution, the points are moved into
//! the ego frame through the augmentation-aware unprojection, and finally
//! sum-pooled into BEV pillars.
//!
//! Two pooling kernels are provided. [`splat_naive`] scatters point by point
//! and serves as the reference. [`splat_sorted`] counting-sorts points by
//! linearized cell id and reduces each contiguous segment independently, which
//! parallelizes without atomics. Both add contributions to a cell in original
//! point order, so their outputs agree bit for bit.

use ndarray::{Array2, Array3, Array4, ArrayView1, Axis};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::{camera_to_ego, unproject_augmented, AugTransform2D, Camera, PixelPoint};
use crate::{Error, Result};

/// Uniform categorical depth bins over `[min, max)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthBins {
    pub min: f64,
    pub max: f64,
    pub step: f64,
}

impl Default for DepthBins {
    fn default() -> Self {
        Self {
            min: 1.0,
            max: 60.0,
            step: 1.0,
        }
    }
}

impl DepthBins {
    pub fn new(min: f64, max: f64, step: f64) -> Result<Self> {
        let bins = Self { min, max, step };
        bins.validate()?;
        Ok(bins)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.min.is_finite() && self.min > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "depth min {} must be positive",
                self.min
            )));
        }
        if !(self.step.is_finite() && self.step > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "depth step {} must be positive",
                self.step
            )));
        }
        if !(self.max.is_finite()) || self.count() < 1 {
            return Err(Error::InvalidParameter(format!(
                "depth range [{}, {}) holds no bin of width {}",
                self.min, self.max, self.step
            )));
        }
        Ok(())
    }

    pub fn count(&self) -> usize {
        let n = ((self.max - self.min) / self.step).round();
        if n.is_finite() && n >= 1.0 {
            n as usize
        } else {
            0
        }
    }

    /// Depth at the middle of bin `k`.
    pub fn center(&self, k: usize) -> f64 {
        self.min + (k as f64 + 0.5) * self.step
    }

    /// Bin containing `depth`, if any.
    pub fn bin_of(&self, depth: f64) -> Option<usize> {
        if !depth.is_finite() || depth < self.min {
            return None;
        }
        let k = ((depth - self.min) / self.step).floor() as usize;
        (k < self.count()).then_some(k)
    }
}

/// `C x H x W` image-view features at `stride` input pixels per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    data: Array3<f64>,
    stride: usize,
}

impl FeatureMap {
    pub fn new(data: Array3<f64>, stride: usize) -> Result<Self> {
        let (_, h, w) = data.dim();
        if h == 0 || w == 0 || stride == 0 {
            return Err(Error::ShapeMismatch(format!(
                "feature map {:?} with stride {stride}",
                data.dim()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite feature".into()));
        }
        Ok(Self { data, stride })
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    pub fn hw(&self) -> (usize, usize) {
        let (_, h, w) = self.data.dim();
        (h, w)
    }
}

/// `D x H x W` depth classification scores.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthLogits {
    data: Array3<f64>,
}

impl DepthLogits {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite depth logit".into()));
        }
        Ok(Self { data })
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn bins(&self) -> usize {
        self.data.dim().0
    }
}

/// Fixed `(pixel x, pixel y, depth)` sample positions, indexed `[k, i, j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Frustum {
    depth: usize,
    height: usize,
    width: usize,
    points: Vec<[f64; 3]>,
}

impl Frustum {
    pub fn dim(&self) -> (usize, usize, usize) {
        (self.depth, self.height, self.width)
    }

    pub fn get(&self, k: usize, i: usize, j: usize) -> [f64; 3] {
        self.points[(k * self.height + i) * self.width + j]
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }
}

/// Pixel-center coordinate of feature cell `j` at `stride`.
#[inline]
pub fn lattice_coord(j: usize, stride: usize) -> f64 {
    (j * stride) as f64 + (stride as f64 - 1.0) / 2.0
}

/// Build the frustum lattice for an `H x W` feature map. The pixel position of
/// cell `(i, j)` is the center of the `stride x stride` block it summarizes.
pub fn build_frustum(bins: &DepthBins, fm_hw: (usize, usize), stride: usize) -> Result<Frustum> {
    if stride == 0 {
        return Err(Error::InvalidParameter("stride must be >= 1".into()));
    }
    bins.validate()?;
    let (height, width) = fm_hw;
    let depth = bins.count();
    let mut points = Vec::with_capacity(depth * height * width);
    for k in 0..depth {
        let d = bins.center(k);
        for i in 0..height {
            let y = lattice_coord(i, stride);
            for j in 0..width {
                points.push([lattice_coord(j, stride), y, d]);
            }
        }
    }
    Ok(Frustum {
        depth,
        height,
        width,
        points,
    })
}

/// Softmax depth weights paired with the per-pixel context features. The
/// lifted feature of bin `k` at pixel `(i, j)` is `weights[k,i,j] * context[.,i,j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LiftedFeatures {
    weights: Array3<f64>,
    context: Array3<f64>,
}

impl LiftedFeatures {
    pub fn weights(&self) -> &Array3<f64> {
        &self.weights
    }

    pub fn context(&self) -> &Array3<f64> {
        &self.context
    }

    /// Materialize the `D x C x H x W` outer product.
    pub fn outer_product(&self) -> Array4<f64> {
        let (d, h, w) = self.weights.dim();
        let c = self.context.dim().0;
        Array4::from_shape_fn((d, c, h, w), |(k, ch, i, j)| {
            self.weights[[k, i, j]] * self.context[[ch, i, j]]
        })
    }
}

pub fn lift(fm: &FeatureMap, logits: &DepthLogits) -> Result<LiftedFeatures> {
    let (d, lh, lw) = logits.data.dim();
    if (lh, lw) != fm.hw() {
        return Err(Error::ShapeMismatch(format!(
            "depth logits {lh}x{lw} vs feature map {:?}",
            fm.hw()
        )));
    }
    if d == 0 {
        return Err(Error::ShapeMismatch("no depth bins".into()));
    }
    if logits.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite depth logit".into()));
    }
    let mut weights = logits.data.clone();
    for mut lane in weights.lanes_mut(Axis(0)) {
        let max = lane.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        lane.mapv_inplace(|v| (v - max).exp());
        let total = lane.sum();
        lane.mapv_inplace(|v| v / total);
    }
    Ok(LiftedFeatures {
        weights,
        context: fm.data.clone(),
    })
}

/// Ego-frame points with per-point features and depth weights.
#[derive(Debug, Clone, PartialEq)]
pub struct PointFeatureCloud {
    positions: Vec<[f64; 3]>,
    features: Array2<f64>,
    weights: Vec<f64>,
}

impl PointFeatureCloud {
    pub fn new(positions: Vec<[f64; 3]>, features: Array2<f64>, weights: Vec<f64>) -> Result<Self> {
        let n = positions.len();
        if features.nrows() != n || weights.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "{n} positions, {} feature rows, {} weights",
                features.nrows(),
                weights.len()
            )));
        }
        Ok(Self {
            positions,
            features,
            weights,
        })
    }

    pub fn empty(channels: usize) -> Self {
        Self {
            positions: Vec::new(),
            features: Array2::zeros((0, channels)),
            weights: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.features.ncols()
    }

    pub fn positions(&self) -> &[[f64; 3]] {
        &self.positions
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn feature(&self, idx: usize) -> ArrayView1<'_, f64> {
        self.features.row(idx)
    }

    /// Concatenate clouds in order.
    pub fn concat(clouds: &[PointFeatureCloud]) -> Result<Self> {
        let channels = clouds.first().map_or(0, |c| c.channels());
        if clouds.iter().any(|c| c.channels() != channels) {
            return Err(Error::ShapeMismatch("clouds differ in channel count".into()));
        }
        let n: usize = clouds.iter().map(|c| c.len()).sum();
        let mut positions = Vec::with_capacity(n);
        let mut weights = Vec::with_capacity(n);
        let mut features = Array2::zeros((n, channels));
        let mut row = 0;
        for c in clouds {
            positions.extend_from_slice(&c.positions);
            weights.extend_from_slice(&c.weights);
            features
                .slice_mut(ndarray::s![row..row + c.len(), ..])
                .assign(&c.features);
            row += c.len();
        }
        Ok(Self {
            positions,
            features,
            weights,
        })
    }
}

/// Move every lattice sample of one camera into the ego frame, undoing the
/// image-view augmentation `aug` that produced the features.
pub fn render_points(
    lifted: &LiftedFeatures,
    frustum: &Frustum,
    camera: &Camera,
    aug: &AugTransform2D,
) -> Result<PointFeatureCloud> {
    if lifted.weights.dim() != frustum.dim() {
        return Err(Error::ShapeMismatch(format!(
            "lifted weights {:?} vs frustum {:?}",
            lifted.weights.dim(),
            frustum.dim()
        )));
    }
    let (d, h, w) = frustum.dim();
    let c = lifted.context.dim().0;
    let n = d * h * w;
    let mut positions = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    let mut features = Array2::zeros((n, c));
    let mut row = 0;
    for k in 0..d {
        for i in 0..h {
            for j in 0..w {
                let [x, y, depth] = frustum.get(k, i, j);
                let cam =
                    unproject_augmented(PixelPoint::new(x, y), depth, &camera.intrinsics, aug)?;
                let ego = camera_to_ego(cam, &camera.pose);
                positions.push([ego.x, ego.y, ego.z]);
                weights.push(lifted.weights[[k, i, j]]);
                features
                    .row_mut(row)
                    .assign(&lifted.context.slice(ndarray::s![.., i, j]));
                row += 1;
            }
        }
    }
    PointFeatureCloud::new(positions, features, weights)
}

/// Ground-plane region of interest and its pillar resolution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BevGrid {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub cell: f64,
    pub z_min: f64,
    pub z_max: f64,
    nx: usize,
    ny: usize,
}

impl Default for BevGrid {
    fn default() -> Self {
        Self::new(-51.2, 51.2, -51.2, 51.2, 0.8, -5.0, 3.0).expect("default grid is valid")
    }
}

impl BevGrid {
    pub fn new(
        x_min: f64,
        x_max: f64,
        y_min: f64,
        y_max: f64,
        cell: f64,
        z_min: f64,
        z_max: f64,
    ) -> Result<Self> {
        if !(cell.is_finite() && cell > 0.0) {
            return Err(Error::Config(format!("cell size {cell} must be positive")));
        }
        if !(z_min < z_max) {
            return Err(Error::Config(format!("z window [{z_min}, {z_max}] is empty")));
        }
        let count = |lo: f64, hi: f64, axis: &str| -> Result<usize> {
            let r = (hi - lo) / cell;
            let n = r.round();
            if !(n >= 1.0) || (r - n).abs() > 1e-9 {
                return Err(Error::Config(format!(
                    "{axis} extent [{lo}, {hi}] is not a whole number of {cell} m cells"
                )));
            }
            Ok(n as usize)
        };
        let nx = count(x_min, x_max, "x")?;
        let ny = count(y_min, y_max, "y")?;
        Ok(Self {
            x_min,
            x_max,
            y_min,
            y_max,
            cell,
            z_min,
            z_max,
            nx,
            ny,
        })
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn num_cells(&self) -> usize {
        self.nx * self.ny
    }

    /// Square and symmetric about the ego origin, so ground-plane rotations
    /// keep cell centers on the lattice.
    pub fn is_centered_square(&self) -> bool {
        self.nx == self.ny && self.x_min == -self.x_max && self.y_min == -self.y_max
    }

    /// Half-open cell lookup on `x, y` ignoring height.
    #[inline]
    pub fn cell_xy(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        if !(x >= self.x_min && x < self.x_max && y >= self.y_min && y < self.y_max) {
            return None;
        }
        let ix = ((x - self.x_min) / self.cell).floor() as usize;
        let iy = ((y - self.y_min) / self.cell).floor() as usize;
        (ix < self.nx && iy < self.ny).then_some((ix, iy))
    }

    /// Pillar containing `p`, or `None` outside the ROI or vertical window.
    #[inline]
    pub fn cell_of(&self, p: [f64; 3]) -> Option<(usize, usize)> {
        if !(p[2] >= self.z_min && p[2] <= self.z_max) {
            return None;
        }
        self.cell_xy(p[0], p[1])
    }

    pub fn cell_center(&self, ix: usize, iy: usize) -> [f64; 2] {
        [
            self.x_min + (ix as f64 + 0.5) * self.cell,
            self.y_min + (iy as f64 + 0.5) * self.cell,
        ]
    }
}

/// `C x nx x ny` BEV raster.
#[derive(Debug, Clone, PartialEq)]
pub struct BevFeature {
    data: Array3<f64>,
}

impl BevFeature {
    pub fn zeros(channels: usize, grid: &BevGrid) -> Self {
        Self {
            data: Array3::zeros((channels, grid.nx(), grid.ny())),
        }
    }

    pub fn new(data: Array3<f64>) -> Self {
        Self { data }
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array3<f64> {
        &mut self.data
    }

    pub fn into_data(self) -> Array3<f64> {
        self.data
    }

    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    pub fn total(&self) -> f64 {
        self.data.sum()
    }

    /// Per-cell mass summed over channels.
    pub fn mass(&self) -> Array2<f64> {
        self.data.sum_axis(Axis(0))
    }

    pub fn matches_grid(&self, grid: &BevGrid) -> bool {
        let (_, nx, ny) = self.data.dim();
        nx == grid.nx() && ny == grid.ny()
    }
}

/// Reference pooling: scatter each in-range point's `feature * weight`.
pub fn splat_naive(cloud: &PointFeatureCloud, grid: &BevGrid) -> BevFeature {
    let c = cloud.channels();
    let mut out = BevFeature::zeros(c, grid);
    for (idx, p) in cloud.positions.iter().enumerate() {
        let Some((ix, iy)) = grid.cell_of(*p) else {
            continue;
        };
        let w = cloud.weights[idx];
        let f = cloud.features.row(idx);
        for ch in 0..c {
            out.data[[ch, ix, iy]] += f[ch] * w;
        }
    }
    out
}

/// Sorted segment-sum pooling.
///
/// Points are counting-sorted by linearized cell id (stable, so ties keep
/// their original order), then every cell reduces its contiguous segment in
/// parallel. The accumulation order does not depend on the thread count.
pub fn splat_sorted(cloud: &PointFeatureCloud, grid: &BevGrid) -> BevFeature {
    const OUTSIDE: u32 = u32::MAX;
    let c = cloud.channels();
    let ny = grid.ny();
    let ncells = grid.num_cells();

    let ids: Vec<u32> = cloud
        .positions
        .par_iter()
        .map(|p| match grid.cell_of(*p) {
            Some((ix, iy)) => (ix * ny + iy) as u32,
            None => OUTSIDE,
        })
        .collect();

    let mut starts = vec![0usize; ncells + 1];
    for &id in &ids {
        if id != OUTSIDE {
            starts[id as usize + 1] += 1;
        }
    }
    for i in 0..ncells {
        starts[i + 1] += starts[i];
    }
    let mut cursor = starts.clone();
    let mut order = vec![0u32; starts[ncells]];
    for (idx, &id) in ids.iter().enumerate() {
        if id != OUTSIDE {
            let slot = &mut cursor[id as usize];
            order[*slot] = idx as u32;
            *slot += 1;
        }
    }

    let mut acc = vec![0.0f64; ncells * c];
    if c > 0 {
        acc.par_chunks_mut(c).enumerate().for_each(|(cell, out)| {
            for &p in &order[starts[cell]..starts[cell + 1]] {
                let p = p as usize;
                let w = cloud.weights[p];
                let f = cloud.features.row(p);
                for ch in 0..c {
                    out[ch] += f[ch] * w;
                }
            }
        });
    }

    let data = Array3::from_shape_fn((c, grid.nx(), ny), |(ch, ix, iy)| {
        acc[(ix * ny + iy) * c + ch]
    });
    BevFeature { data }
}

/// Which pooling implementation to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolingKernel {
    Naive,
    #[default]
    Sorted,
}

impl PoolingKernel {
    pub fn name(self) -> &'static str {
        match self {
            PoolingKernel::Naive => "splat_naive",
            PoolingKernel::Sorted => "splat_sorted",
        }
    }

    pub fn splat(self, cloud: &PointFeatureCloud, grid: &BevGrid) -> BevFeature {
        match self {
            PoolingKernel::Naive => splat_naive(cloud, grid),
            PoolingKernel::Sorted => splat_sorted(cloud, grid),
        }
    }
}

/// Uniform random cloud over the grid footprint grown by 10% on each side and
/// the vertical window grown by 1 m, so some points fall outside.
pub fn random_cloud(rng: &mut impl Rng, n: usize, channels: usize, grid: &BevGrid) -> PointFeatureCloud {
    let mx = 0.1 * (grid.x_max - grid.x_min);
    let my = 0.1 * (grid.y_max - grid.y_min);
    let positions = (0..n)
        .map(|_| {
            [
                rng.random_range(grid.x_min - mx..grid.x_max + mx),
                rng.random_range(grid.y_min - my..grid.y_max + my),
                rng.random_range(grid.z_min - 1.0..grid.z_max + 1.0),
            ]
        })
        .collect();
    let features = Array2::from_shape_fn((n, channels), |_| rng.random_range(-1.0..1.0));
    let weights = (0..n).map(|_| rng.random::<f64>()).collect();
    PointFeatureCloud::new(positions, features, weights).expect("consistent cloud shapes")
}

/// Sum of `weight * feature` over points that land inside the grid.
pub fn in_range_mass(cloud: &PointFeatureCloud, grid: &BevGrid) -> f64 {
    cloud
        .positions
        .iter()
        .enumerate()
        .filter(|(_, p)| grid.cell_of(**p).is_some())
        .map(|(i, _)| cloud.weights[i] * cloud.features.row(i).sum())
        .sum()
}

/// Image-view inputs of one camera.
#[derive(Debug, Clone)]
pub struct CameraFeatures {
    pub features: FeatureMap,
    pub logits: DepthLogits,
    /// Augmentation that produced `features` from the raw camera image.
    pub aug: AugTransform2D,
}

/// Lift and render a single camera.
pub fn camera_cloud(
    camera: &Camera,
    input: &CameraFeatures,
    bins: &DepthBins,
) -> Result<PointFeatureCloud> {
    if input.logits.bins() != bins.count() {
        return Err(Error::ShapeMismatch(format!(
            "{} depth logit channels for {} bins",
            input.logits.bins(),
            bins.count()
        )));
    }
    let lifted = lift(&input.features, &input.logits)?;
    let frustum = build_frustum(bins, input.features.hw(), input.features.stride())?;
    render_points(&lifted, &frustum, camera, &input.aug)
}

/// Full view transform: every camera is lifted and rendered, the clouds are
/// concatenated in rig order and pooled once.
pub fn view_transform(
    rig: &[Camera],
    inputs: &[CameraFeatures],
    grid: &BevGrid,
    bins: &DepthBins,
    kernel: PoolingKernel,
) -> Result<BevFeature> {
    if rig.is_empty() {
        return Err(Error::Config("camera rig is empty".into()));
    }
    if rig.len() != inputs.len() {
        return Err(Error::Config(format!(
            "{} camera inputs for a rig of {} cameras",
            inputs.len(),
            rig.len()
        )));
    }
    let clouds = rig
        .par_iter()
        .zip(inputs.par_iter())
        .map(|(cam, input)| camera_cloud(cam, input, bins))
        .collect::<Result<Vec<_>>>()?;
    let cloud = PointFeatureCloud::concat(&clouds)?;
    Ok(kernel.splat(&cloud, grid))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{camera_to_ego, pixel_to_camera, AugOp, CameraIntrinsics, Pose3D};
    use crate::geometry::compose_aug;
    use nalgebra::Vector3;
    use ndarray::Array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cloud(rng: &mut impl Rng, n: usize, c: usize, extent: f64) -> PointFeatureCloud {
        let positions = (0..n)
            .map(|_| {
                [
                    rng.random_range(-extent..extent),
                    rng.random_range(-extent..extent),
                    rng.random_range(-7.0..5.0),
                ]
            })
            .collect();
        let features = Array2::from_shape_fn((n, c), |_| rng.random_range(-2.0..2.0));
        let weights = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        PointFeatureCloud::new(positions, features, weights).unwrap()
    }

    fn single(p: [f64; 3], f: &[f64]) -> PointFeatureCloud {
        PointFeatureCloud::new(
            vec![p],
            Array2::from_shape_vec((1, f.len()), f.to_vec()).unwrap(),
            vec![1.0],
        )
        .unwrap()
    }

    #[test]
    fn depth_bins_defaults() {
        let b = DepthBins::default();
        assert_eq!(b.count(), 59);
        assert_eq!(b.bin_of(12.3), Some(11));
        assert_eq!(b.bin_of(60.0), None);
        assert_eq!(b.bin_of(0.9), None);
        assert!(DepthBins::new(0.0, 10.0, 1.0).is_err());
        assert!(DepthBins::new(1.0, 1.2, 1.0).is_err());
    }

    #[test]
    fn frustum_single_cell() {
        let f = build_frustum(&DepthBins::new(1.0, 2.0, 1.0).unwrap(), (1, 1), 16).unwrap();
        assert_eq!(f.dim(), (1, 1, 1));
        assert_eq!(f.get(0, 0, 0), [7.5, 7.5, 1.5]);
    }

    #[test]
    fn frustum_depth_axis_only() {
        let one = build_frustum(&DepthBins::new(1.0, 2.0, 1.0).unwrap(), (3, 4), 8).unwrap();
        let two = build_frustum(&DepthBins::new(1.0, 3.0, 1.0).unwrap(), (3, 4), 8).unwrap();
        assert_eq!(two.dim(), (2, 3, 4));
        for i in 0..3 {
            for j in 0..4 {
                let a = one.get(0, i, j);
                let b = two.get(1, i, j);
                assert_eq!((a[0], a[1]), (b[0], b[1]));
                assert_eq!(b[2], 2.5);
            }
        }
    }

    #[test]
    fn frustum_matches_triple_loop() {
        let bins = DepthBins::new(2.0, 10.0, 0.5).unwrap();
        let f = build_frustum(&bins, (5, 7), 16).unwrap();
        let (d, h, w) = f.dim();
        assert_eq!(d, 16);
        for k in 0..d {
            for i in 0..h {
                for j in 0..w {
                    let want = [
                        j as f64 * 16.0 + 7.5,
                        i as f64 * 16.0 + 7.5,
                        2.0 + (k as f64 + 0.5) * 0.5,
                    ];
                    assert_eq!(f.get(k, i, j), want);
                }
            }
        }
        assert!(build_frustum(&bins, (1, 1), 0).is_err());
    }

    #[test]
    fn uniform_logits_split_evenly() {
        let fm = FeatureMap::new(
            Array3::from_shape_vec((2, 1, 1), vec![1.0, 2.0]).unwrap(),
            16,
        )
        .unwrap();
        let logits = DepthLogits::new(Array3::zeros((3, 1, 1))).unwrap();
        let lifted = lift(&fm, &logits).unwrap().outer_product();
        for k in 0..3 {
            assert!((lifted[[k, 0, 0, 0]] - 1.0 / 3.0).abs() < 1e-15);
            assert!((lifted[[k, 1, 0, 0]] - 2.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn saturated_logits_are_one_hot() {
        let fm = FeatureMap::new(Array3::from_elem((3, 1, 1), 0.7), 16).unwrap();
        let mut l = Array3::from_elem((5, 1, 1), -40.0);
        l[[2, 0, 0]] = 40.0;
        let lifted = lift(&fm, &DepthLogits::new(l).unwrap()).unwrap().outer_product();
        for ch in 0..3 {
            assert!((lifted[[2, ch, 0, 0]] - 0.7).abs() < 1e-12);
            assert!(lifted[[0, ch, 0, 0]].abs() < 1e-12);
        }
    }

    #[test]
    fn lift_rejects_bad_input() {
        let fm = FeatureMap::new(Array3::zeros((1, 2, 2)), 16).unwrap();
        let mut l = Array3::zeros((3, 2, 2));
        l[[0, 1, 1]] = f64::NAN;
        assert!(DepthLogits::new(l.clone()).is_err());
        let bad = DepthLogits { data: l };
        assert!(matches!(lift(&fm, &bad), Err(Error::InvalidInput(_))));
        let wrong = DepthLogits::new(Array3::zeros((3, 2, 3))).unwrap();
        assert!(matches!(lift(&fm, &wrong), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn softmax_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (d, c, h, w) = (7, 3, 4, 5);
        let fm = FeatureMap::new(
            Array::from_shape_fn((c, h, w), |_| rng.random_range(-1.0..1.0)),
            16,
        )
        .unwrap();
        let l = Array::from_shape_fn((d, h, w), |_| rng.random_range(-6.0..6.0));
        let lifted = lift(&fm, &DepthLogits::new(l.clone()).unwrap()).unwrap();
        let outer = lifted.outer_product();
        for i in 0..h {
            for j in 0..w {
                let exps: Vec<f64> = (0..d).map(|k| l[[k, i, j]].exp()).collect();
                let z: f64 = exps.iter().sum();
                let mut wsum = 0.0;
                for k in 0..d {
                    let want = exps[k] / z;
                    assert!((lifted.weights()[[k, i, j]] - want).abs() < 1e-9);
                    wsum += lifted.weights()[[k, i, j]];
                }
                assert!((wsum - 1.0).abs() < 1e-6);
                for ch in 0..c {
                    let summed: f64 = (0..d).map(|k| outer[[k, ch, i, j]]).sum();
                    let want: f64 =
                        (0..d).map(|k| lifted.weights()[[k, i, j]] * fm.data()[[ch, i, j]]).sum();
                    assert_eq!(summed, want);
                }
            }
        }
    }

    #[test]
    fn render_identity_principal_point() {
        let k = CameraIntrinsics::from_focal(500.0, 500.0, 7.5, 7.5).unwrap();
        let cam = Camera {
            intrinsics: k,
            pose: Pose3D::identity(),
        };
        let fm = FeatureMap::new(Array3::from_elem((1, 1, 1), 1.0), 16).unwrap();
        let logits = DepthLogits::new(Array3::zeros((1, 1, 1))).unwrap();
        let bins = DepthBins::new(9.5, 10.5, 1.0).unwrap();
        let lifted = lift(&fm, &logits).unwrap();
        let fr = build_frustum(&bins, (1, 1), 16).unwrap();
        let cloud = render_points(&lifted, &fr, &cam, &AugTransform2D::identity()).unwrap();
        assert_eq!(cloud.positions()[0], [0.0, 0.0, 10.0]);
    }

    #[test]
    fn render_matches_per_point_geometry_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let k = CameraIntrinsics::from_focal(480.0, 470.0, 350.0, 130.0).unwrap();
        let pose = Pose3D::looking_along(0.7, Vector3::new(1.0, -0.5, 1.6));
        let cam = Camera {
            intrinsics: k.clone(),
            pose: pose.clone(),
        };
        let a = compose_aug(&[
            AugOp::Scale { factor: 0.9 },
            AugOp::Rotate {
                angle: 0.05,
                pivot: [300.0, 120.0],
            },
            AugOp::Crop { offset: [10.0, 4.0] },
        ])
        .unwrap();
        let (h, w) = (6, 9);
        let bins = DepthBins::new(1.0, 20.0, 1.0).unwrap();
        let fm = FeatureMap::new(
            Array::from_shape_fn((2, h, w), |_| rng.random_range(0.0..1.0)),
            16,
        )
        .unwrap();
        let logits = DepthLogits::new(Array::from_shape_fn((bins.count(), h, w), |_| {
            rng.random_range(-2.0..2.0)
        }))
        .unwrap();
        let lifted = lift(&fm, &logits).unwrap();
        let fr = build_frustum(&bins, (h, w), 16).unwrap();
        let cloud = render_points(&lifted, &fr, &cam, &a).unwrap();
        let inv = a.matrix().try_inverse().unwrap();
        let mut idx = 0;
        for kk in 0..bins.count() {
            for i in 0..h {
                for j in 0..w {
                    let u = j as f64 * 16.0 + 7.5;
                    let v = i as f64 * 16.0 + 7.5;
                    let src = inv * Vector3::new(u, v, 1.0);
                    let cp = pixel_to_camera(
                        crate::geometry::PixelPoint::new(src.x, src.y),
                        bins.center(kk),
                        &k,
                    )
                    .unwrap();
                    let e = camera_to_ego(cp, &pose);
                    let got = cloud.positions()[idx];
                    let err = ((got[0] - e.x).powi(2) + (got[1] - e.y).powi(2) + (got[2] - e.z).powi(2)).sqrt();
                    assert!(err < 1e-9 * e.norm().max(1.0));
                    assert_eq!(cloud.weights()[idx], lifted.weights()[[kk, i, j]]);
                    assert_eq!(cloud.feature(idx)[1], fm.data()[[1, i, j]]);
                    idx += 1;
                }
            }
        }
    }

    #[test]
    fn splat_single_point() {
        let grid = BevGrid::default();
        assert_eq!((grid.nx(), grid.ny()), (128, 128));
        let cloud = single([0.4, 0.4, 1.0], &[2.0]);
        for kernel in [PoolingKernel::Naive, PoolingKernel::Sorted] {
            let out = kernel.splat(&cloud, &grid);
            assert_eq!(out.data()[[0, 64, 64]], 2.0);
            assert_eq!(out.total(), 2.0);
        }
    }

    #[test]
    fn splat_sums_same_cell() {
        let grid = BevGrid::default();
        let cloud = PointFeatureCloud::concat(&[
            single([0.1, 0.1, 0.0], &[1.0]),
            single([0.5, 0.7, -1.0], &[3.0]),
        ])
        .unwrap();
        for kernel in [PoolingKernel::Naive, PoolingKernel::Sorted] {
            let out = kernel.splat(&cloud, &grid);
            assert_eq!(out.data()[[0, 64, 64]], 4.0);
        }
    }

    #[test]
    fn splat_drops_max_edge_and_vertical_outliers() {
        let grid = BevGrid::default();
        for p in [[51.2, 0.0, 0.0], [0.0, 51.2, 0.0], [0.0, 0.0, 3.5], [0.0, 0.0, -5.1]] {
            let cloud = single(p, &[1.0]);
            assert_eq!(splat_naive(&cloud, &grid).total(), 0.0);
            assert_eq!(splat_sorted(&cloud, &grid).total(), 0.0);
        }
        let edge = single([-51.2, -51.2, 0.0], &[1.0]);
        assert_eq!(splat_naive(&edge, &grid).data()[[0, 0, 0]], 1.0);
    }

    #[test]
    fn empty_cloud_gives_zero_tensor() {
        let grid = BevGrid::default();
        let out = splat_sorted(&PointFeatureCloud::empty(3), &grid);
        assert_eq!(out.data().dim(), (3, 128, 128));
        assert_eq!(out.total(), 0.0);
    }

    #[test]
    fn sorted_equals_naive_on_large_cloud() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let grid = BevGrid::default();
        let cloud = random_cloud(&mut rng, 100_000, 4, 60.0);
        let a = splat_naive(&cloud, &grid);
        let b = splat_sorted(&cloud, &grid);
        let max_rel = a
            .data()
            .iter()
            .zip(b.data().iter())
            .map(|(x, y)| (x - y).abs() / x.abs().max(1e-300))
            .fold(0.0, f64::max);
        assert!(max_rel < 1e-6);
        assert_eq!(a, b);
    }

    #[test]
    fn grid_validation() {
        assert!(BevGrid::new(-51.2, 51.2, -51.2, 51.2, 0.7, -5.0, 3.0).is_err());
        assert!(BevGrid::new(-10.0, 10.0, -10.0, 10.0, 0.0, -5.0, 3.0).is_err());
        assert!(BevGrid::new(-10.0, 10.0, -10.0, 10.0, 0.5, 3.0, -5.0).is_err());
        assert!(BevGrid::default().is_centered_square());
        assert!(!BevGrid::new(0.0, 10.0, -5.0, 5.0, 0.5, -5.0, 3.0)
            .unwrap()
            .is_centered_square());
    }

    #[test]
    fn rig_size_mismatch_is_config_error() {
        let cam = Camera {
            intrinsics: CameraIntrinsics::from_focal(100.0, 100.0, 7.5, 7.5).unwrap(),
            pose: Pose3D::identity(),
        };
        let bins = DepthBins::new(1.0, 3.0, 1.0).unwrap();
        let input = CameraFeatures {
            features: FeatureMap::new(Array3::ones((1, 1, 1)), 16).unwrap(),
            logits: DepthLogits::new(Array3::zeros((2, 1, 1))).unwrap(),
            aug: AugTransform2D::identity(),
        };
        let r = view_transform(
            &[cam.clone(), cam],
            &[input],
            &BevGrid::default(),
            &bins,
            PoolingKernel::Sorted,
        );
        assert!(matches!(r, Err(Error::Config(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn mass_is_conserved(seed in any::<u64>(), n in 0usize..3000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let grid = BevGrid::default();
            let cloud = random_cloud(&mut rng, n, 3, 70.0);
            let want = in_range_mass(&cloud, &grid);
            let got = splat_sorted(&cloud, &grid).total();
            prop_assert!((got - want).abs() <= 1e-6 * want.abs().max(1.0));
        }

        #[test]
        fn splat_is_additive(seed in any::<u64>(), n1 in 0usize..1500, n2 in 0usize..1500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let grid = BevGrid::default();
            let a = random_cloud(&mut rng, n1, 2, 55.0);
            let b = random_cloud(&mut rng, n2, 2, 55.0);
            let joint = splat_sorted(&PointFeatureCloud::concat(&[a.clone(), b.clone()]).unwrap(), &grid);
            let sum = splat_naive(&a, &grid).into_data() + splat_naive(&b, &grid).into_data();
            for (x, y) in joint.data().iter().zip(sum.iter()) {
                prop_assert!((x - y).abs() <= 1e-6 * y.abs().max(1.0));
            }
        }
    }
}
