//! Pipeline configuration file.
//!
//! The file is TOML. Every section and key is optional and falls back to the
//! defaults below; unknown keys are rejected. Keys carrying a physical
//! quantity end in their unit (`_m`, `_deg`, `_px`, `_cells`).
//!
//! ```toml
//! preset = "BEVDet-R50"
//! seed = 7
//!
//! [encoder]
//! kind = "toy_conv"
//! stride = 16
//!
//! [bda]
//! enabled = true
//! rot_range_deg = [-22.5, 22.5]
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{BdaConfig, CropHorizontal, CropVertical, IdaConfig};
use crate::encoder::{preset, BevEncoderSpec, EncoderKind, EncoderSpec};
use crate::head::{visible_depth_offset, DecodeParams, OccupancyHeadParams};
use crate::metrics::MetricConfig;
use crate::scenegen::{SceneConfig, CLASSES, NUM_CLASSES};
use crate::view_transform::{BevGrid, DepthBins, PoolingKernel};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSection {
    pub x_range_m: [f64; 2],
    pub y_range_m: [f64; 2],
    pub cell_m: f64,
    pub z_range_m: [f64; 2],
}

impl Default for GridSection {
    fn default() -> Self {
        Self {
            x_range_m: [-51.2, 51.2],
            y_range_m: [-51.2, 51.2],
            cell_m: 0.8,
            z_range_m: [-5.0, 3.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DepthSection {
    pub min_m: f64,
    pub max_m: f64,
    pub step_m: f64,
}

impl Default for DepthSection {
    fn default() -> Self {
        let d = DepthBins::default();
        Self {
            min_m: d.min,
            max_m: d.max,
            step_m: d.step,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderSection {
    pub kind: EncoderKind,
    /// Overrides the preset's view-transformer width.
    pub channels: Option<usize>,
    pub stride: usize,
    pub seed: u64,
}

impl Default for EncoderSection {
    fn default() -> Self {
        let e = EncoderSpec::default();
        Self {
            kind: e.kind,
            channels: None,
            stride: e.stride,
            seed: e.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IdaSection {
    pub enabled: bool,
    pub flip_prob: f64,
    pub scale_range: [f64; 2],
    pub rot_range_deg: [f64; 2],
    /// Defaults to the camera image size.
    pub crop_size_px: Option<[usize; 2]>,
    pub crop_vertical: CropVertical,
    pub crop_horizontal: CropHorizontal,
}

impl Default for IdaSection {
    fn default() -> Self {
        Self {
            enabled: false,
            flip_prob: 0.5,
            scale_range: [1.0, 1.2],
            rot_range_deg: [-5.4, 5.4],
            crop_size_px: None,
            crop_vertical: CropVertical::Fixed,
            crop_horizontal: CropHorizontal::Random,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BdaSection {
    pub enabled: bool,
    pub flip_prob: f64,
    pub rot_range_deg: [f64; 2],
    pub scale_range: [f64; 2],
}

impl Default for BdaSection {
    fn default() -> Self {
        Self {
            enabled: false,
            flip_prob: 0.5,
            rot_range_deg: [-22.5, 22.5],
            scale_range: [0.95, 1.05],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadSection {
    pub num_classes: usize,
    pub score_thresh: f64,
    pub max_dets: usize,
    pub gaussian_min_radius_cells: usize,
    pub occupancy_sigma_cells: f64,
    pub z_prior_m: f64,
    /// One suppression radius per class.
    pub nms_radius_m: Vec<f64>,
    /// Outward shift per class applied to decoded centers.
    pub range_offset_m: Vec<f64>,
}

impl Default for HeadSection {
    fn default() -> Self {
        Self {
            num_classes: NUM_CLASSES,
            score_thresh: 0.1,
            max_dets: 500,
            gaussian_min_radius_cells: 2,
            occupancy_sigma_cells: 1.5,
            z_prior_m: -0.8,
            // A class diagonal plus half the default scene gap, at least 4 m.
            nms_radius_m: CLASSES
                .iter()
                .map(|c| (c.dims[0].hypot(c.dims[1]) + 2.0).max(4.0))
                .collect(),
            range_offset_m: CLASSES
                .iter()
                .map(|c| visible_depth_offset(c.dims[0], c.dims[1]))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub preset: String,
    pub seed: u64,
    pub kernel: PoolingKernel,
    pub grid: GridSection,
    pub depth: DepthSection,
    pub encoder: EncoderSection,
    pub bev_encoder: BevEncoderSpec,
    pub ida: IdaSection,
    pub bda: BdaSection,
    pub head: HeadSection,
    pub metrics: MetricConfig,
    pub scene: SceneConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            preset: "BEVDet-STTiny".into(),
            seed: 0,
            kernel: PoolingKernel::default(),
            grid: GridSection::default(),
            depth: DepthSection::default(),
            encoder: EncoderSection::default(),
            bev_encoder: BevEncoderSpec::default(),
            ida: IdaSection::default(),
            bda: BdaSection::default(),
            head: HeadSection::default(),
            metrics: MetricConfig::default(),
            scene: SceneConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(json.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn grid(&self) -> Result<BevGrid> {
        let g = &self.grid;
        BevGrid::new(
            g.x_range_m[0],
            g.x_range_m[1],
            g.y_range_m[0],
            g.y_range_m[1],
            g.cell_m,
            g.z_range_m[0],
            g.z_range_m[1],
        )
    }

    pub fn depth_bins(&self) -> Result<DepthBins> {
        DepthBins::new(self.depth.min_m, self.depth.max_m, self.depth.step_m)
    }

    pub fn encoder_spec(&self) -> Result<EncoderSpec> {
        let p = preset(&self.preset)
            .ok_or_else(|| Error::Config(format!("unknown preset {:?}", self.preset)))?;
        let spec = EncoderSpec {
            kind: self.encoder.kind,
            channels: self.encoder.channels.unwrap_or(p.view_channels),
            stride: self.encoder.stride,
            seed: self.encoder.seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// IDA sampler for raw images of `source_size`.
    pub fn ida_config(&self, source_size: [usize; 2]) -> IdaConfig {
        let i = &self.ida;
        IdaConfig {
            flip_prob: i.flip_prob,
            scale_range: i.scale_range,
            rot_range: i.rot_range_deg.map(f64::to_radians),
            crop_size: i.crop_size_px.unwrap_or(source_size),
            source_size,
            crop_vertical: i.crop_vertical,
            crop_horizontal: i.crop_horizontal,
        }
    }

    pub fn bda_config(&self) -> BdaConfig {
        BdaConfig {
            flip_prob: self.bda.flip_prob,
            rot_range: self.bda.rot_range_deg.map(f64::to_radians),
            scale_range: self.bda.scale_range,
        }
    }

    pub fn decode_params(&self) -> DecodeParams {
        DecodeParams {
            max_dets: self.head.max_dets,
            score_thresh: self.head.score_thresh,
        }
    }

    pub fn occupancy_params(&self) -> OccupancyHeadParams {
        OccupancyHeadParams {
            sigma_cells: self.head.occupancy_sigma_cells,
            z_prior: self.head.z_prior_m,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let grid = self.grid()?;
        self.depth_bins()?;
        let enc = self.encoder_spec()?;
        self.metrics.validate()?;
        self.scene.validate()?;

        let [w, h] = self.scene.image_size_px;
        if w % enc.stride != 0 || h % enc.stride != 0 {
            return Err(Error::Config(format!(
                "scene image {w}x{h} is not divisible by encoder stride {}",
                enc.stride
            )));
        }
        if self.ida.enabled {
            let ida = self.ida_config(self.scene.image_size_px);
            ida.validate()?;
            let [cw, ch] = ida.crop_size;
            if cw % enc.stride != 0 || ch % enc.stride != 0 {
                return Err(Error::Config(format!(
                    "ida crop {cw}x{ch} is not divisible by encoder stride {}",
                    enc.stride
                )));
            }
            // The vertical crop window must fit the smallest scaled image.
            let min_h = ida.scale_range[0] * h as f64;
            if min_h < ch as f64 {
                return Err(Error::Config(format!(
                    "ida crop height {ch} px exceeds the scaled image height {min_h} px"
                )));
            }
        }
        if self.bda.enabled {
            let bda = self.bda_config();
            bda.validate()?;
            if bda.rot_range != [0.0, 0.0] && !grid.is_centered_square() {
                return Err(Error::Config(
                    "bda rotation needs a square grid centered on the ego origin".into(),
                ));
            }
        }
        let head = &self.head;
        if head.num_classes == 0 {
            return Err(Error::Config("head needs at least one class".into()));
        }
        if head.nms_radius_m.len() != head.num_classes {
            return Err(Error::Config(format!(
                "{} nms radii for {} classes",
                head.nms_radius_m.len(),
                head.num_classes
            )));
        }
        if head.range_offset_m.len() != head.num_classes {
            return Err(Error::Config(format!(
                "{} range offsets for {} classes",
                head.range_offset_m.len(),
                head.num_classes
            )));
        }
        if head.nms_radius_m.iter().any(|r| !(*r > 0.0)) {
            return Err(Error::Config(format!("nms radii {:?}", head.nms_radius_m)));
        }
        if !(0.0..1.0).contains(&head.score_thresh) {
            return Err(Error::Config(format!("score threshold {}", head.score_thresh)));
        }
        if !(head.occupancy_sigma_cells > 0.0) {
            return Err(Error::Config(format!(
                "occupancy sigma {}",
                head.occupancy_sigma_cells
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_default() {
        assert_eq!(PipelineConfig::from_toml_str("").unwrap(), PipelineConfig::default());
    }

    #[test]
    fn toml_round_trip() {
        let mut cfg = PipelineConfig::default();
        cfg.seed = 99;
        cfg.bda.enabled = true;
        cfg.encoder.channels = Some(8);
        let back = PipelineConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(PipelineConfig::from_toml_str("sed = 1").is_err());
        assert!(PipelineConfig::from_toml_str("[grid]\ncell = 0.8").is_err());
        assert!(PipelineConfig::from_toml_str("[bda]\nrot_range = [0.0, 0.1]").is_err());
    }

    #[test]
    fn partial_sections_fill_defaults() {
        let cfg = PipelineConfig::from_toml_str("[bda]\nenabled = true\n[encoder]\nkind = \"toy_conv\"").unwrap();
        assert!(cfg.bda.enabled);
        assert_eq!(cfg.bda.scale_range, [0.95, 1.05]);
        assert_eq!(cfg.encoder.kind, EncoderKind::ToyConv);
        assert_eq!(cfg.encoder_spec().unwrap().channels, 64);
    }

    #[test]
    fn preset_sets_channels() {
        let cfg = PipelineConfig::from_toml_str("preset = \"BEVDet-R50\"").unwrap();
        assert_eq!(cfg.encoder_spec().unwrap().channels, 80);
        assert!(PipelineConfig::from_toml_str("preset = \"R18\"").is_err());
    }

    #[test]
    fn cross_field_checks() {
        let off_center = "[grid]\nx_range_m = [0.0, 102.4]\n[bda]\nenabled = true";
        assert!(matches!(PipelineConfig::from_toml_str(off_center), Err(Error::Config(_))));
        let no_rot = format!("{off_center}\nrot_range_deg = [0.0, 0.0]");
        assert!(PipelineConfig::from_toml_str(&no_rot).is_ok());

        let tall_crop = "[ida]\nenabled = true\nscale_range = [0.5, 1.0]";
        assert!(PipelineConfig::from_toml_str(tall_crop).is_err());

        assert!(PipelineConfig::from_toml_str("[head]\nnms_radius_m = [1.0]").is_err());
        assert!(PipelineConfig::from_toml_str("[encoder]\nstride = 12").is_err());
        assert!(PipelineConfig::from_toml_str("[scene]\nimage_size_px = [700, 256]").is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = PipelineConfig::default();
        let mut b = a.clone();
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
