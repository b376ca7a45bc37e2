//! Workloads shared by the criterion benches.

use bevlift_core::rng::stream_rng;
use bevlift_core::scenegen::make_rig;
use bevlift_core::view_transform::{random_cloud, CameraFeatures, PointFeatureCloud};
use bevlift_core::{AugTransform2D, BevGrid, Camera, DepthBins, DepthLogits, FeatureMap};
use ndarray::Array3;
use rand::Rng;

pub const SEED: u64 = 0;

/// Random point cloud over the default grid, reproducible per `n`.
pub fn cloud(n: usize, channels: usize) -> PointFeatureCloud {
    let mut rng = stream_rng(SEED, "bench", &[n as u64]);
    random_cloud(&mut rng, n, channels, &BevGrid::default())
}

/// Six-camera rig with random features and depth logits, unaugmented.
pub struct CameraWorkload {
    pub cameras: Vec<Camera>,
    pub inputs: Vec<CameraFeatures>,
    pub grid: BevGrid,
    pub bins: DepthBins,
}

pub fn camera_workload(image: [usize; 2], stride: usize, channels: usize) -> CameraWorkload {
    let cameras = make_rig(6, 70f64.to_radians(), image).expect("rig");
    let bins = DepthBins::default();
    let (h, w) = (image[1] / stride, image[0] / stride);
    let mut rng = stream_rng(SEED, "bench", &[(image[0] * image[1]) as u64, stride as u64]);
    let inputs = (0..cameras.len())
        .map(|_| CameraFeatures {
            features: FeatureMap::new(Array3::from_shape_fn((channels, h, w), |_| rng.random()), stride).unwrap(),
            logits: DepthLogits::new(Array3::from_shape_fn((bins.count(), h, w), |_| rng.random_range(-4.0..4.0)))
                .unwrap(),
            aug: AugTransform2D::identity(),
        })
        .collect();
    CameraWorkload { cameras, inputs, grid: BevGrid::default(), bins }
}
