//! Camera-to-BEV lifting, pillar pooling, dual-space augmentation, center-based
//! box coding and center-distance detection metrics, all runnable on synthetic
//! multi-camera scenes without a trained network.
//!
//! The crate is organized bottom-up:
//!
//! * [`geometry`]: intrinsics, poses, pixel unprojection and the image-plane
//!   augmentation algebra.
//! * [`view_transform`]: frustum lattice, categorical depth lifting, point
//!   rendering and the two pooling kernels.
//! * [`augment`]: image-view and BEV-space augmentation samplers and appliers.
//! * [`encoder`]: deterministic stand-ins for the image and BEV encoders.
//! * [`head`]: heatmap/regression target codec, peak decoding and distance NMS.
//! * [`metrics`]: matching, AP, true-positive errors and NDS.
//! * [`scenegen`]: seeded synthetic rigs and scenes.
//! * [`pipeline`], [`config`], [`io`], [`check`]: composition, configuration,
//!   file formats and the invariant suite used by the CLI.

pub mod augment;
pub mod check;
pub mod config;
pub mod encoder;
mod error;
pub mod geometry;
pub mod head;
pub mod io;
pub mod metrics;
pub mod pipeline;
pub mod raster;
pub mod rng;
pub mod scenegen;
pub mod view_transform;

pub use error::{Error, Result};

pub use augment::{BdaConfig, BdaTransform, IdaConfig};
pub use config::PipelineConfig;
pub use geometry::{
    AugOp, AugTransform2D, Camera, CameraIntrinsics, CameraPoint, PixelPoint, Pose3D,
};
pub use head::{Box3D, HeadRaster};
pub use metrics::{EvalResult, MetricConfig};
pub use scenegen::SceneSample;
pub use view_transform::{
    BevFeature, BevGrid, DepthBins, DepthLogits, FeatureMap, PointFeatureCloud, PoolingKernel,
};
