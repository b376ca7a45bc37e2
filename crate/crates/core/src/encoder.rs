//! Deterministic stand-ins for the image-view and BEV encoders.
//!
//! Nothing here is trained. The toy encoders expand their weights from a seed;
//! the depth oracle reads ground-truth depth and class shades from a rendered
//! scene.

use ndarray::{Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::raster::{DepthRaster, ImageU8};
use crate::scenegen::{class_from_shade, NUM_CLASSES};
use crate::view_transform::{BevFeature, DepthBins, DepthLogits, FeatureMap};
use crate::{Error, Result};

/// Logit magnitude used by the depth oracle.
pub const ORACLE_LOGIT: f64 = 40.0;
const TOY_HIDDEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    ToyConv,
    DepthOracle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSpec {
    pub kind: EncoderKind,
    pub channels: usize,
    pub stride: usize,
    pub seed: u64,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        Self {
            kind: EncoderKind::DepthOracle,
            channels: 64,
            stride: 16,
            seed: 0,
        }
    }
}

impl EncoderSpec {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::Config("encoder needs at least one channel".into()));
        }
        if ![8, 16, 32].contains(&self.stride) {
            return Err(Error::Config(format!("encoder stride {} not in {{8, 16, 32}}", self.stride)));
        }
        Ok(())
    }
}

/// Uniform weights with variance `1 / fan_in`.
fn init_weights(rng: &mut ChaCha8Rng, shape: (usize, usize, usize, usize), fan_in: usize) -> Array4<f64> {
    let a = (3.0 / fan_in as f64).sqrt();
    Array4::from_shape_simple_fn(shape, || rng.random_range(-a..a))
}

/// Image features and depth logits for one camera.
pub fn encode_image(
    img: &ImageU8,
    depth: Option<&DepthRaster>,
    spec: &EncoderSpec,
    bins: &DepthBins,
) -> Result<(FeatureMap, DepthLogits)> {
    spec.validate()?;
    bins.validate()?;
    let s = spec.stride;
    if img.height() % s != 0 || img.width() % s != 0 || img.height() == 0 || img.width() == 0 {
        return Err(Error::ShapeMismatch(format!(
            "image {}x{} not divisible by stride {s}",
            img.width(),
            img.height()
        )));
    }
    match spec.kind {
        EncoderKind::ToyConv => toy_conv(img, spec, bins.count()),
        EncoderKind::DepthOracle => {
            let depth = depth.ok_or_else(|| {
                Error::InvalidInput("depth oracle needs a ground-truth depth raster".into())
            })?;
            if depth.height() != img.height() || depth.width() != img.width() {
                return Err(Error::ShapeMismatch(format!(
                    "depth raster {}x{} vs image {}x{}",
                    depth.width(),
                    depth.height(),
                    img.width(),
                    img.height()
                )));
            }
            depth_oracle(img, depth, spec, bins)
        }
    }
}

/// Patchify convolution (kernel = stride, ReLU) followed by a 1x1 projection
/// to `C` feature and `D` depth channels.
fn toy_conv(img: &ImageU8, spec: &EncoderSpec, d: usize) -> Result<(FeatureMap, DepthLogits)> {
    let s = spec.stride;
    let cin = img.channels();
    let (h, w) = (img.height() / s, img.width() / s);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let w1 = init_weights(&mut rng, (TOY_HIDDEN, cin, s, s), cin * s * s);
    let w2 = init_weights(&mut rng, (spec.channels + d, TOY_HIDDEN, 1, 1), TOY_HIDDEN);

    let mut hidden = Array3::<f64>::zeros((TOY_HIDDEN, h, w));
    for i in 0..h {
        for j in 0..w {
            for o in 0..TOY_HIDDEN {
                let mut acc = 0.0;
                for c in 0..cin {
                    for u in 0..s {
                        for v in 0..s {
                            let px = f64::from(img.get(i * s + u, j * s + v, c)) / 255.0;
                            acc += w1[[o, c, u, v]] * px;
                        }
                    }
                }
                hidden[[o, i, j]] = acc.max(0.0);
            }
        }
    }
    let mut out = Array3::<f64>::zeros((spec.channels + d, h, w));
    for o in 0..spec.channels + d {
        for i in 0..h {
            for j in 0..w {
                out[[o, i, j]] = (0..TOY_HIDDEN).map(|k| w2[[o, k, 0, 0]] * hidden[[k, i, j]]).sum();
            }
        }
    }
    let feats = out.slice(ndarray::s![..spec.channels, .., ..]).to_owned();
    let logits = out.slice(ndarray::s![spec.channels.., .., ..]).to_owned();
    Ok((FeatureMap::new(feats, s)?, DepthLogits::new(logits)?))
}

/// Per stride block: the nearest surface pixel decides the depth bin
/// (`+40` there, `-40` elsewhere) and the feature. Features are a class
/// one-hot when `C` covers every class, else a constant 1 in channel 0.
/// Blocks without a surface inside the bin range get zero features and flat
/// logits, so they carry no mass.
fn depth_oracle(
    img: &ImageU8,
    depth: &DepthRaster,
    spec: &EncoderSpec,
    bins: &DepthBins,
) -> Result<(FeatureMap, DepthLogits)> {
    let s = spec.stride;
    let (h, w) = (img.height() / s, img.width() / s);
    let mut feats = Array3::<f64>::zeros((spec.channels, h, w));
    let mut logits = Array3::<f64>::zeros((bins.count(), h, w));
    let one_hot = spec.channels >= NUM_CLASSES;
    for i in 0..h {
        for j in 0..w {
            let mut nearest: Option<(f32, usize, usize)> = None;
            for y in i * s..(i + 1) * s {
                for x in j * s..(j + 1) * s {
                    let z = depth.get(y, x, 0);
                    if z > 0.0 && nearest.is_none_or(|(bz, _, _)| z < bz) {
                        nearest = Some((z, y, x));
                    }
                }
            }
            let Some((z, y, x)) = nearest else { continue };
            let Some(k) = bins.bin_of(f64::from(z)) else { continue };
            for b in 0..bins.count() {
                logits[[b, i, j]] = if b == k { ORACLE_LOGIT } else { -ORACLE_LOGIT };
            }
            let channel = match class_from_shade(img.get(y, x, 0)) {
                Some(c) if one_hot => c as usize,
                _ => 0,
            };
            feats[[channel, i, j]] = 1.0;
        }
    }
    Ok((FeatureMap::new(feats, s)?, DepthLogits::new(logits)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BevEncoderKind {
    Identity,
    ToyConv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BevEncoderSpec {
    pub kind: BevEncoderKind,
    pub seed: u64,
    pub bias: bool,
}

impl Default for BevEncoderSpec {
    fn default() -> Self {
        Self {
            kind: BevEncoderKind::Identity,
            seed: 0,
            bias: false,
        }
    }
}

fn conv3x3(input: &Array3<f64>, weights: &Array4<f64>, bias: Option<&[f64]>) -> Array3<f64> {
    let (cin, nx, ny) = input.dim();
    let cout = weights.dim().0;
    let mut out = Array3::<f64>::zeros((cout, nx, ny));
    for o in 0..cout {
        for x in 0..nx {
            for y in 0..ny {
                let mut acc = bias.map_or(0.0, |b| b[o]);
                for c in 0..cin {
                    for u in 0..3 {
                        let xx = x as isize + u as isize - 1;
                        if xx < 0 || xx >= nx as isize {
                            continue;
                        }
                        for v in 0..3 {
                            let yy = y as isize + v as isize - 1;
                            if yy < 0 || yy >= ny as isize {
                                continue;
                            }
                            acc += weights[[o, c, u, v]] * input[[c, xx as usize, yy as usize]];
                        }
                    }
                }
                out[[o, x, y]] = acc;
            }
        }
    }
    out
}

/// Identity, or two same-padded 3x3 convolutions with a ReLU between them.
/// Without bias the toy stack is positively homogeneous.
pub fn encode_bev(f: &BevFeature, spec: &BevEncoderSpec) -> BevFeature {
    match spec.kind {
        BevEncoderKind::Identity => f.clone(),
        BevEncoderKind::ToyConv => {
            let c = f.channels();
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            let w1 = init_weights(&mut rng, (c, c, 3, 3), 9 * c);
            let w2 = init_weights(&mut rng, (c, c, 3, 3), 9 * c);
            let b1: Vec<f64> = (0..c).map(|_| rng.random_range(-0.1..0.1)).collect();
            let b2: Vec<f64> = (0..c).map(|_| rng.random_range(-0.1..0.1)).collect();
            let (b1, b2) = if spec.bias {
                (Some(b1.as_slice()), Some(b2.as_slice()))
            } else {
                (None, None)
            };
            let hidden = conv3x3(f.data(), &w1, b1).mapv(|v| v.max(0.0));
            BevFeature::new(conv3x3(&hidden, &w2, b2))
        }
    }
}

/// Named channel-width presets. Only `view_channels` affects computation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Preset {
    pub name: &'static str,
    pub backbone: &'static str,
    pub view_channels: usize,
    /// Output widths of the three BEV residual stages.
    pub bev_stage_widths: [usize; 3],
    pub bev_blocks_per_stage: usize,
    pub bev_neck_channels: usize,
}

pub const PRESETS: [Preset; 3] = [
    Preset {
        name: "BEVDet-STTiny",
        backbone: "SwinTransformer-Tiny",
        view_channels: 64,
        bev_stage_widths: [128, 256, 512],
        bev_blocks_per_stage: 2,
        bev_neck_channels: 256,
    },
    Preset {
        name: "BEVDet-R50",
        backbone: "ResNet-50",
        view_channels: 80,
        bev_stage_widths: [160, 320, 640],
        bev_blocks_per_stage: 2,
        bev_neck_channels: 256,
    },
    Preset {
        name: "BEVDet-R101",
        backbone: "ResNet-101",
        view_channels: 64,
        bev_stage_widths: [128, 256, 512],
        bev_blocks_per_stage: 1,
        bev_neck_channels: 128,
    },
];

pub fn preset(name: &str) -> Option<&'static Preset> {
    PRESETS.iter().find(|p| p.name == name)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::view_transform::BevGrid;

    fn blank(w: usize, h: usize) -> (ImageU8, DepthRaster) {
        (ImageU8::zeros(h, w, 1), DepthRaster::zeros(h, w, 1))
    }

    #[test]
    fn oracle_bin_of_true_depth() {
        let (mut img, mut depth) = blank(32, 16);
        depth.set(3, 5, 0, 12.3);
        img.set(3, 5, 0, crate::scenegen::CLASSES[2].shade);
        let spec = EncoderSpec { channels: 8, ..EncoderSpec::default() };
        let (f, l) = encode_image(&img, Some(&depth), &spec, &DepthBins::default()).unwrap();
        let col = l.data().slice(ndarray::s![.., 0, 0]).to_vec();
        let arg = col.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        assert_eq!(arg, 11);
        assert_eq!(col[11], ORACLE_LOGIT);
        assert_eq!(f.data()[[2, 0, 0]], 1.0);
        assert_eq!(f.data().sum(), 1.0);
        // The second block is empty: flat logits, no features.
        assert!(l.data().slice(ndarray::s![.., 0, 1]).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn oracle_nearest_pixel_wins_block() {
        let (mut img, mut depth) = blank(16, 16);
        depth.set(0, 0, 0, 30.0);
        depth.set(9, 9, 0, 7.5);
        img.set(9, 9, 0, crate::scenegen::CLASSES[0].shade);
        let spec = EncoderSpec { channels: 1, ..EncoderSpec::default() };
        let (f, l) = encode_image(&img, Some(&depth), &spec, &DepthBins::default()).unwrap();
        assert_eq!(l.data()[[6, 0, 0]], ORACLE_LOGIT);
        assert_eq!(f.data()[[0, 0, 0]], 1.0);
    }

    #[test]
    fn oracle_requires_depth() {
        let (img, _) = blank(32, 32);
        let r = encode_image(&img, None, &EncoderSpec::default(), &DepthBins::default());
        assert!(matches!(r, Err(Error::InvalidInput(_))));
    }

    #[test]
    fn stride_and_divisibility() {
        let (img, depth) = blank(40, 32);
        let r = encode_image(&img, Some(&depth), &EncoderSpec::default(), &DepthBins::default());
        assert!(matches!(r, Err(Error::ShapeMismatch(_))));
        let bad = EncoderSpec { stride: 4, ..EncoderSpec::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn toy_conv_shape_and_determinism() {
        let mut img = ImageU8::zeros(64, 128, 1);
        for y in 0..64 {
            for x in 0..128 {
                img.set(y, x, 0, ((y * 7 + x * 3) % 256) as u8);
            }
        }
        let spec = EncoderSpec { kind: EncoderKind::ToyConv, channels: 12, stride: 16, seed: 3 };
        let bins = DepthBins::default();
        let (f1, l1) = encode_image(&img, None, &spec, &bins).unwrap();
        let (f2, l2) = encode_image(&img, None, &spec, &bins).unwrap();
        assert_eq!(f1.data().dim(), (12, 4, 8));
        assert_eq!(l1.data().dim(), (59, 4, 8));
        assert_eq!((f1, l1), (f2, l2));
        let other = EncoderSpec { seed: 4, ..spec };
        assert_ne!(encode_image(&img, None, &other, &bins).unwrap().0.data(), encode_image(&img, None, &spec, &bins).unwrap().0.data());
    }

    fn random_bev(seed: u64) -> BevFeature {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = BevGrid::new(-8.0, 8.0, -8.0, 8.0, 0.8, -5.0, 3.0).unwrap();
        let mut f = BevFeature::zeros(3, &grid);
        f.data_mut().mapv_inplace(|_| rng.random_range(-1.0..1.0));
        f
    }

    #[test]
    fn bev_identity_and_determinism() {
        let f = random_bev(1);
        assert_eq!(encode_bev(&f, &BevEncoderSpec::default()), f);
        let toy = BevEncoderSpec { kind: BevEncoderKind::ToyConv, seed: 9, bias: true };
        let a = encode_bev(&f, &toy);
        assert_eq!(a, encode_bev(&f, &toy));
        assert_eq!(a.data().dim(), f.data().dim());
    }

    #[test]
    fn bev_toy_is_homogeneous_without_bias() {
        let f = random_bev(2);
        let toy = BevEncoderSpec { kind: BevEncoderKind::ToyConv, seed: 5, bias: false };
        let base = encode_bev(&f, &toy);
        for alpha in [0.25, 1.0, 3.5] {
            let scaled = encode_bev(&BevFeature::new(f.data() * alpha), &toy);
            let err = (scaled.data() - &(base.data() * alpha)).mapv(f64::abs).fold(0.0_f64, |m, v| m.max(*v));
            assert!(err < 1e-6, "alpha {alpha}: {err}");
        }
    }

    #[test]
    fn presets_lookup() {
        assert_eq!(preset("BEVDet-R50").unwrap().view_channels, 80);
        assert_eq!(preset("BEVDet-STTiny").unwrap().view_channels, 64);
        assert_eq!(preset("BEVDet-R101").unwrap().bev_neck_channels, 128);
        assert!(preset("nope").is_none());
    }
}
