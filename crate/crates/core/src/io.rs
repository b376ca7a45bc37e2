//! JSON file formats.
//!
//! All writers print floats with 17 significant digits, enough to round-trip
//! every `f64`. Every file carries a `format_version`; readers refuse other
//! versions.
//!
//! * Scene: one sample; cameras with row-major intrinsics (9 values), pose
//!   rotation (9) and translation (3), and base64 rasters with `dtype` and
//!   `shape = [height, width, channels]`. `f32` data is little-endian.
//! * Detection set: boxes grouped by `sample_id`; used for both predictions
//!   and ground truth.
//! * Manifest: command, config hash, seed and the written files with their
//!   SHA-256.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::geometry::{Camera, CameraIntrinsics, Pose3D};
use crate::head::Box3D;
use crate::metrics::EvalResult;
use crate::raster::{DepthRaster, ImageU8};
use crate::scenegen::{SceneCamera, SceneSample, CLASSES};
use crate::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

/// JSON formatter printing floats as `d.dddddddddddddddde±x`.
#[derive(Debug, Clone, Copy, Default)]
pub struct SigFormatter;

impl serde_json::ser::Formatter for SigFormatter {
    fn write_f64<W: ?Sized + std::io::Write>(&mut self, writer: &mut W, value: f64) -> std::io::Result<()> {
        write!(writer, "{value:.16e}")
    }

    fn write_f32<W: ?Sized + std::io::Write>(&mut self, writer: &mut W, value: f32) -> std::io::Result<()> {
        write!(writer, "{value:.8e}")
    }
}

pub fn to_json<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, SigFormatter);
    value.serialize(&mut ser)?;
    Ok(String::from_utf8(buf).expect("serde_json writes UTF-8"))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<String> {
    let mut text = to_json(value)?;
    text.push('\n');
    std::fs::write(path, &text).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(text.as_bytes()))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

#[derive(Deserialize)]
struct VersionProbe {
    format_version: u32,
}

fn read_versioned<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let probe: VersionProbe = serde_json::from_str(&text)?;
    if probe.format_version != FORMAT_VERSION {
        return Err(Error::FormatVersion {
            expected: FORMAT_VERSION,
            found: probe.format_version,
        });
    }
    Ok(serde_json::from_str(&text)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RasterJson {
    pub dtype: String,
    pub shape: [usize; 3],
    pub data: String,
}

impl RasterJson {
    pub fn from_u8(r: &ImageU8) -> Self {
        Self {
            dtype: "u8".into(),
            shape: r.shape(),
            data: B64.encode(r.data()),
        }
    }

    pub fn from_f32(r: &DepthRaster) -> Self {
        let bytes: Vec<u8> = r.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        Self {
            dtype: "f32".into(),
            shape: r.shape(),
            data: B64.encode(bytes),
        }
    }

    fn expect_dtype(&self, dtype: &str) -> Result<()> {
        if self.dtype != dtype {
            return Err(Error::InvalidInput(format!(
                "raster dtype {:?}, expected {dtype:?}",
                self.dtype
            )));
        }
        Ok(())
    }

    pub fn to_u8(&self) -> Result<ImageU8> {
        self.expect_dtype("u8")?;
        let [h, w, c] = self.shape;
        ImageU8::from_vec(h, w, c, B64.decode(&self.data)?)
    }

    pub fn to_f32(&self) -> Result<DepthRaster> {
        self.expect_dtype("f32")?;
        let bytes = B64.decode(&self.data)?;
        if bytes.len() % 4 != 0 {
            return Err(Error::InvalidInput("f32 raster byte count not a multiple of 4".into()));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let [h, w, c] = self.shape;
        DepthRaster::from_vec(h, w, c, data)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraJson {
    pub intrinsics: [f64; 9],
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
    pub image: RasterJson,
    pub depth: RasterJson,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneJson {
    pub format_version: u32,
    pub sample_id: String,
    pub seed: u64,
    pub cameras: Vec<CameraJson>,
    pub boxes: Vec<Box3D>,
}

impl SceneJson {
    pub fn from_sample(s: &SceneSample) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            sample_id: s.sample_id.clone(),
            seed: s.seed,
            cameras: s
                .cameras
                .iter()
                .map(|c| CameraJson {
                    intrinsics: c.camera.intrinsics.to_row_major(),
                    rotation: c.camera.pose.rotation_row_major(),
                    translation: c.camera.pose.translation_array(),
                    image: RasterJson::from_u8(&c.image),
                    depth: RasterJson::from_f32(&c.depth),
                })
                .collect(),
            boxes: s.boxes.clone(),
        }
    }

    pub fn into_sample(self) -> Result<SceneSample> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::FormatVersion {
                expected: FORMAT_VERSION,
                found: self.format_version,
            });
        }
        if self.cameras.is_empty() {
            return Err(Error::InvalidInput(format!("scene {} has no cameras", self.sample_id)));
        }
        let cameras = self
            .cameras
            .into_iter()
            .map(|c| {
                let image = c.image.to_u8()?;
                let depth = c.depth.to_f32()?;
                if depth.channels() != 1 || depth.height() != image.height() || depth.width() != image.width() {
                    return Err(Error::ShapeMismatch(format!(
                        "depth raster {:?} vs image {:?}",
                        depth.shape(),
                        image.shape()
                    )));
                }
                Ok(SceneCamera {
                    camera: Camera {
                        intrinsics: CameraIntrinsics::from_row_major(&c.intrinsics)?,
                        pose: Pose3D::from_parts(&c.rotation, &c.translation)?,
                    },
                    image,
                    depth,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        for b in &self.boxes {
            b.validate()?;
        }
        Ok(SceneSample {
            sample_id: self.sample_id,
            seed: self.seed,
            cameras,
            boxes: self.boxes,
        })
    }
}

pub fn write_scene(path: &Path, s: &SceneSample) -> Result<String> {
    write_json(path, &SceneJson::from_sample(s))
}

pub fn read_scene(path: &Path) -> Result<SceneSample> {
    read_versioned::<SceneJson>(path)?.into_sample()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleBoxes {
    pub sample_id: String,
    pub boxes: Vec<Box3D>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionSet {
    pub format_version: u32,
    /// Hash of the configuration that produced the boxes, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    pub samples: Vec<SampleBoxes>,
}

impl DetectionSet {
    /// Samples sorted by id, boxes in the given order.
    pub fn new(mut samples: Vec<SampleBoxes>) -> Self {
        samples.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
        Self {
            format_version: FORMAT_VERSION,
            config_hash: None,
            samples,
        }
    }

    pub fn read(path: &Path) -> Result<Self> {
        let set: Self = read_versioned(path)?;
        let mut seen = std::collections::BTreeSet::new();
        for s in &set.samples {
            if !seen.insert(&s.sample_id) {
                return Err(Error::InvalidInput(format!("duplicate sample id {}", s.sample_id)));
            }
        }
        Ok(set)
    }

    pub fn write(&self, path: &Path) -> Result<String> {
        write_json(path, self)
    }

    pub fn by_id(&self) -> BTreeMap<&str, &[Box3D]> {
        self.samples
            .iter()
            .map(|s| (s.sample_id.as_str(), s.boxes.as_slice()))
            .collect()
    }
}

/// Ids present on one side only.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct IdMismatch {
    pub missing_in_preds: Vec<String>,
    pub missing_in_gts: Vec<String>,
}

/// Align predictions to ground truth by sample id.
pub fn align(
    preds: &DetectionSet,
    gts: &DetectionSet,
) -> std::result::Result<(Vec<Vec<Box3D>>, Vec<Vec<Box3D>>), IdMismatch> {
    let p = preds.by_id();
    let g = gts.by_id();
    let mismatch = IdMismatch {
        missing_in_preds: g.keys().filter(|k| !p.contains_key(*k)).map(|k| k.to_string()).collect(),
        missing_in_gts: p.keys().filter(|k| !g.contains_key(*k)).map(|k| k.to_string()).collect(),
    };
    if !mismatch.missing_in_preds.is_empty() || !mismatch.missing_in_gts.is_empty() {
        return Err(mismatch);
    }
    Ok(g.iter().map(|(id, gb)| (p[id].to_vec(), gb.to_vec())).unzip())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub sample_id: String,
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn new(command: &str, config_hash: String, seed: u64, entries: Vec<ManifestEntry>) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            command: command.into(),
            config_hash,
            seed,
            entries,
        }
    }

    pub fn read(path: &Path) -> Result<Self> {
        read_versioned(path)
    }
}

pub fn class_name(class_id: u32) -> String {
    CLASSES
        .get(class_id as usize)
        .map_or_else(|| format!("class_{class_id}"), |c| c.name.to_string())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "     n/a".into(), |v| format!("{v:8.4}"))
}

/// Fixed-width text summary of an evaluation.
pub fn eval_table(r: &EvalResult) -> String {
    let mut s = String::new();
    for (name, v) in [
        ("mAP", r.map),
        ("mATE", r.mate),
        ("mASE", r.mase),
        ("mAOE", r.maoe),
        ("mAVE", r.mave),
        ("mAAE", r.maae),
        ("NDS", r.nds),
    ] {
        let _ = writeln!(s, "{name:<6}{v:8.4}");
    }
    let _ = write!(s, "\n{:<14}{:>6}", "class", "gt");
    for t in &r.dist_thresholds_m {
        let _ = write!(s, "{:>8}", format!("AP@{t}"));
    }
    let _ = writeln!(s, "{:>8}{:>8}{:>8}{:>8}{:>8}", "ATE", "ASE", "AOE", "AVE", "AAE");
    for c in &r.classes {
        let _ = write!(s, "{:<14}{:>6}", class_name(c.class_id), c.num_gt);
        for ap in &c.ap {
            let _ = write!(s, "{ap:8.4}");
        }
        let _ = writeln!(
            s,
            "{:8.4}{:8.4}{:8.4}{}{}",
            c.tp.ate,
            c.tp.ase,
            c.tp.aoe,
            fmt_opt(c.tp.ave),
            fmt_opt(c.tp.aae)
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::{generate_scene, SceneConfig};

    #[test]
    fn floats_print_seventeen_digits() {
        assert_eq!(to_json(&0.1f64).unwrap(), "1.0000000000000001e-1");
        assert_eq!(to_json(&[1.0f64, -2.5]).unwrap(), "[1.0000000000000000e0,-2.5000000000000000e0]");
        for v in [std::f64::consts::PI, 1e-300, -7.25e12, f64::MIN_POSITIVE, 0.0] {
            let back: f64 = serde_json::from_str(&to_json(&v).unwrap()).unwrap();
            assert_eq!(back.to_bits(), v.to_bits());
        }
    }

    #[test]
    fn scene_round_trip() {
        let cfg = SceneConfig { image_size_px: [64, 32], min_visible_px: 1, min_radius_m: 3.0, ..SceneConfig::default() };
        let s = generate_scene(&cfg, 5, 1).unwrap();
        let dir = std::env::temp_dir().join(format!("bevlift-io-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("scene.json");
        write_scene(&path, &s).unwrap();
        assert_eq!(read_scene(&path).unwrap(), s);

        let mut json = SceneJson::from_sample(&s);
        json.format_version = 9;
        write_json(&path, &json).unwrap();
        assert!(matches!(read_scene(&path), Err(Error::FormatVersion { expected: 1, found: 9 })));
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn raster_dtype_checked() {
        let r = RasterJson::from_u8(&ImageU8::zeros(2, 2, 1));
        assert!(r.to_f32().is_err());
        let bad = RasterJson { shape: [3, 2, 1], ..r };
        assert!(bad.to_u8().is_err());
    }

    #[test]
    fn alignment_reports_missing_ids() {
        let mk = |ids: &[&str]| {
            DetectionSet::new(ids.iter().map(|i| SampleBoxes { sample_id: i.to_string(), boxes: vec![] }).collect())
        };
        let err = align(&mk(&["a", "c"]), &mk(&["a", "b"])).unwrap_err();
        assert_eq!(err.missing_in_preds, vec!["b"]);
        assert_eq!(err.missing_in_gts, vec!["c"]);
        assert!(align(&mk(&["b", "a"]), &mk(&["a", "b"])).is_ok());
    }
}
