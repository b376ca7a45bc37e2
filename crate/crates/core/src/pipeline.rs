//! End-to-end inference on one scene sample.
//!
//! Per camera: optional IDA warp of image and depth, image encoding. Then the
//! view transform, optional BDA of the BEV feature, BEV encoding, the
//! occupancy head, peak decoding, BDA undo and range offset on the boxes, and
//! distance NMS.
//!
//! IDA draws come from the `ida` stream keyed by `(sample id, camera)`, BDA
//! draws from the `bda` stream keyed by the sample id.

use rayon::prelude::*;

use crate::augment::{apply_bda_boxes, apply_bda_feature, apply_ida_image, sample_bda, sample_ida, BdaTransform};
use crate::config::PipelineConfig;
use crate::encoder::{encode_bev, encode_image, EncoderSpec};
use crate::geometry::AugTransform2D;
use crate::head::{apply_range_offset, decode, nms_distance, occupancy_head, Box3D};
use crate::rng::{id_key, stream_rng, STREAM_BDA, STREAM_IDA};
use crate::scenegen::SceneSample;
use crate::view_transform::{view_transform, BevFeature, BevGrid, CameraFeatures, DepthBins};
use crate::Result;

#[derive(Debug, Clone)]
pub struct Pipeline {
    cfg: PipelineConfig,
    grid: BevGrid,
    bins: DepthBins,
    encoder: EncoderSpec,
}

impl Pipeline {
    pub fn new(cfg: &PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            grid: cfg.grid()?,
            bins: cfg.depth_bins()?,
            encoder: cfg.encoder_spec()?,
            cfg: cfg.clone(),
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn grid(&self) -> &BevGrid {
        &self.grid
    }

    /// IDA transform used for camera `cam` of `sample`.
    pub fn ida_for(&self, sample: &SceneSample, cam: usize) -> Result<AugTransform2D> {
        if !self.cfg.ida.enabled {
            return Ok(AugTransform2D::identity());
        }
        let img = &sample.cameras[cam].image;
        let ida = self.cfg.ida_config([img.width(), img.height()]);
        let mut rng = stream_rng(self.cfg.seed, STREAM_IDA, &[id_key(&sample.sample_id), cam as u64]);
        sample_ida(&ida, &mut rng)
    }

    /// BDA transform used for `sample`.
    pub fn bda_for(&self, sample: &SceneSample) -> Result<BdaTransform> {
        if !self.cfg.bda.enabled {
            return Ok(BdaTransform::identity());
        }
        let mut rng = stream_rng(self.cfg.seed, STREAM_BDA, &[id_key(&sample.sample_id)]);
        sample_bda(&self.cfg.bda_config(), &mut rng)
    }

    fn camera_input(&self, sample: &SceneSample, cam: usize) -> Result<CameraFeatures> {
        let sc = &sample.cameras[cam];
        let aug = self.ida_for(sample, cam)?;
        let (image, depth) = if self.cfg.ida.enabled {
            let size = self
                .cfg
                .ida
                .crop_size_px
                .unwrap_or([sc.image.width(), sc.image.height()]);
            (
                apply_ida_image(&sc.image, &aug, size),
                apply_ida_image(&sc.depth, &aug, size),
            )
        } else {
            (sc.image.clone(), sc.depth.clone())
        };
        let (features, logits) = encode_image(&image, Some(&depth), &self.encoder, &self.bins)?;
        Ok(CameraFeatures { features, logits, aug })
    }

    /// Pooled BEV feature before BDA and BEV encoding.
    pub fn bev(&self, sample: &SceneSample) -> Result<BevFeature> {
        let inputs = (0..sample.cameras.len())
            .into_par_iter()
            .map(|c| self.camera_input(sample, c))
            .collect::<Result<Vec<_>>>()?;
        view_transform(&sample.rig(), &inputs, &self.grid, &self.bins, self.cfg.kernel)
    }

    /// Detections in the ego frame, by descending score.
    pub fn infer(&self, sample: &SceneSample) -> Result<Vec<Box3D>> {
        let mut bev = self.bev(sample)?;
        let bda = self.bda_for(sample)?;
        if self.cfg.bda.enabled {
            bev = apply_bda_feature(&bev, &bda, &self.grid)?;
        }
        let bev = encode_bev(&bev, &self.cfg.bev_encoder);
        let raster = occupancy_head(&bev, &self.grid, self.cfg.head.num_classes, &self.cfg.occupancy_params())?;
        let mut dets = decode(&raster, &self.grid, &self.cfg.decode_params())?;
        if self.cfg.bda.enabled {
            dets = apply_bda_boxes(&dets, &bda.inverse());
        }
        apply_range_offset(&mut dets, &self.cfg.head.range_offset_m);
        nms_distance(&dets, &self.cfg.head.nms_radius_m)
    }
}
