//! Backdoor trigger generation and stamping.
//!
//! A trigger is a (perturbation, mask, blend) triple. Stamping computes
//! `out = (1 - blend*mask) * x + blend*mask * perturbation`, clipped to
//! `[0, 1]`, with one fixed arithmetic order so results are reproducible
//! across runs and platforms.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::model::Model;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TriggerKind {
    Gaussian,
    Logo,
    Trojan,
    FixedAsset,
}

/// A stamping transform applied to images.
#[derive(Debug, Clone, PartialEq)]
pub struct TriggerPattern {
    pub kind: TriggerKind,
    /// RGB perturbation, values in `[0, 1]`.
    pub perturbation: ImageTensor,
    /// Single-channel mask in `[0, 1]`; 1 marks the trigger region.
    pub mask: ImageTensor,
    /// Opacity of the trigger over the original pixels.
    pub blend: f32,
    pub seed: u64,
}

impl TriggerPattern {
    pub fn image_shape(&self) -> (usize, usize, usize) {
        self.perturbation.shape()
    }

    /// Content hash used in provenance metadata.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.perturbation.to_rgb8());
        for v in self.mask.data() {
            hasher.update(crate::image::quantize(*v).to_le_bytes());
        }
        hasher.update(self.blend.to_le_bytes());
        hasher.update(self.seed.to_le_bytes());
        hex::encode(&hasher.finalize()[..16])
    }

    pub fn validate(&self) -> Result<()> {
        let (c, h, w) = self.perturbation.shape();
        if c != 3 {
            return Err(Error::Parameter("perturbation must be RGB".into()));
        }
        if self.mask.shape() != (1, h, w) {
            return Err(Error::Parameter(format!(
                "mask shape {:?} does not match perturbation {}x{}",
                self.mask.shape(),
                h,
                w
            )));
        }
        let in_unit = |s: &[f32]| s.iter().all(|v| (0.0..=1.0).contains(v));
        if !in_unit(self.perturbation.data()) || !in_unit(self.mask.data()) {
            return Err(Error::Parameter(
                "perturbation and mask values must lie in [0, 1]".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.blend) {
            return Err(Error::Parameter(format!(
                "blend {} out of [0, 1]",
                self.blend
            )));
        }
        Ok(())
    }
}

/// Apply trigger `t` to image `x`.
pub fn stamp(x: &ImageTensor, t: &TriggerPattern) -> Result<ImageTensor> {
    let (c, h, w) = x.shape();
    if t.perturbation.shape() != (c, h, w) {
        return Err(Error::Parameter(format!(
            "stamp shape mismatch: image {:?} vs trigger {:?}",
            x.shape(),
            t.perturbation.shape()
        )));
    }
    let mut out = ImageTensor::zeros(c, h, w);
    let plane = h * w;
    let blend = t.blend;
    let xd = x.data();
    let pd = t.perturbation.data();
    let md = t.mask.data();
    let od = out.data_mut();
    for ch in 0..c {
        for i in 0..plane {
            let m = blend * md[i];
            let v = (1.0 - m) * xd[ch * plane + i] + m * pd[ch * plane + i];
            od[ch * plane + i] = v.clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

/// Full-image clipped-Gaussian noise trigger centered on mid-gray.
pub fn make_gaussian_trigger(
    shape: (usize, usize),
    std: f32,
    blend: f32,
    seed: u64,
) -> Result<TriggerPattern> {
    if std < 0.0 {
        return Err(Error::Parameter(format!("negative std {std}")));
    }
    let (h, w) = shape;
    let mut perturbation = ImageTensor::zeros(3, h, w);
    if std == 0.0 {
        perturbation.data_mut().fill(0.5);
    } else {
        use rand_distr::{Distribution, Normal};
        let normal = Normal::new(0.5f32, std)
            .map_err(|e| Error::Parameter(format!("gaussian parameters: {e}")))?;
        let mut rng = rng::derived(seed, "gaussian-trigger");
        for v in perturbation.data_mut() {
            *v = normal.sample(&mut rng).clamp(0.0, 1.0);
        }
    }
    let pattern = TriggerPattern {
        kind: TriggerKind::Gaussian,
        perturbation,
        mask: ImageTensor::splat(1, h, w, 1.0),
        blend,
        seed,
    };
    pattern.validate()?;
    Ok(pattern)
}

/// Paste a logo asset at a pixel offset; mask covers the asset's opaque
/// footprint. `scale` resizes the asset by nearest neighbor.
pub fn make_logo_trigger(
    asset: &Path,
    image_shape: (usize, usize),
    position: (usize, usize),
    scale: f32,
    blend: f32,
) -> Result<TriggerPattern> {
    let img = image::open(asset)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(asset, io),
            other => Error::Image(other),
        })?
        .to_rgba8();
    make_logo_trigger_from_image(&img, image_shape, position, scale, blend)
}

pub fn make_logo_trigger_from_image(
    asset: &image::RgbaImage,
    image_shape: (usize, usize),
    position: (usize, usize),
    scale: f32,
    blend: f32,
) -> Result<TriggerPattern> {
    if scale <= 0.0 {
        return Err(Error::Parameter(format!("scale {scale} must be > 0")));
    }
    let (h, w) = image_shape;
    let fw = ((asset.width() as f32) * scale).round() as usize;
    let fh = ((asset.height() as f32) * scale).round() as usize;
    if fw == 0 || fh == 0 {
        return Err(Error::Parameter("scaled asset footprint is empty".into()));
    }
    let (px, py) = position;
    if px + fw > w || py + fh > h {
        return Err(Error::Placement(format!(
            "asset footprint {fw}x{fh} at ({px}, {py}) exceeds image bounds {w}x{h}"
        )));
    }
    let mut perturbation = ImageTensor::zeros(3, h, w);
    let mut mask = ImageTensor::zeros(1, h, w);
    for oy in 0..fh {
        for ox in 0..fw {
            // nearest-neighbor source sample
            let sx = ((ox as f32 + 0.5) / scale) as u32;
            let sy = ((oy as f32 + 0.5) / scale) as u32;
            let sx = sx.min(asset.width() - 1);
            let sy = sy.min(asset.height() - 1);
            let p = asset.get_pixel(sx, sy);
            if p[3] >= 128 {
                mask.set(0, py + oy, px + ox, 1.0);
                for c in 0..3 {
                    perturbation.set(c, py + oy, px + ox, p[c] as f32 / 255.0);
                }
            }
        }
    }
    let pattern = TriggerPattern {
        kind: TriggerKind::Logo,
        perturbation,
        mask,
        blend,
        seed: 0,
    };
    pattern.validate()?;
    Ok(pattern)
}

/// Load an externally produced trigger image as-is. An alpha channel, when
/// present, becomes the mask; otherwise the mask covers the full image.
pub fn make_fixed_asset_trigger(
    asset: &Path,
    image_shape: (usize, usize),
    blend: f32,
) -> Result<TriggerPattern> {
    let img = image::open(asset)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(asset, io),
            other => Error::Image(other),
        })?
        .to_rgba8();
    let (h, w) = image_shape;
    if (img.width() as usize, img.height() as usize) != (w, h) {
        return Err(Error::Parameter(format!(
            "fixed asset is {}x{}, expected {}x{}",
            img.width(),
            img.height(),
            w,
            h
        )));
    }
    let mut perturbation = ImageTensor::zeros(3, h, w);
    let mut mask = ImageTensor::zeros(1, h, w);
    for y in 0..h {
        for x in 0..w {
            let p = img.get_pixel(x as u32, y as u32);
            for c in 0..3 {
                perturbation.set(c, y, x, p[c] as f32 / 255.0);
            }
            mask.set(0, y, x, p[3] as f32 / 255.0);
        }
    }
    let pattern = TriggerPattern {
        kind: TriggerKind::FixedAsset,
        perturbation,
        mask,
        blend,
        seed: 0,
    };
    pattern.validate()?;
    Ok(pattern)
}

/// A rectangle in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

/// Configuration for the activation-maximization trigger.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrojanForgeConfig {
    pub layer: String,
    pub neurons: Vec<usize>,
    pub region: Rect,
    pub steps: usize,
    pub step_size: f64,
    pub target_activation: f64,
}

/// Optimize a patch that drives the configured neurons toward a target
/// activation on a trained clean model (simplified activation maximization).
pub fn make_trojan_trigger(model: &Model, cfg: &TrojanForgeConfig) -> Result<TriggerPattern> {
    use candle_core::{IndexOp, Tensor, Var};

    if cfg.steps == 0 {
        return Err(Error::Parameter("trojan optimization needs steps >= 1".into()));
    }
    if cfg.step_size <= 0.0 {
        return Err(Error::Parameter("step size must be positive".into()));
    }
    let (h, w) = model.input_hw();
    let r = cfg.region;
    if r.width == 0 || r.height == 0 || r.x + r.width > w || r.y + r.height > h {
        return Err(Error::Parameter(format!(
            "mask region {:?} outside {w}x{h} image bounds",
            r
        )));
    }
    let dim = model
        .feature_dim(&cfg.layer)
        .ok_or_else(|| Error::Config(format!("unknown feature layer '{}'", cfg.layer)))?;
    if cfg.neurons.is_empty() {
        return Err(Error::Config("no target neurons selected".into()));
    }
    if let Some(bad) = cfg.neurons.iter().find(|&&n| n >= dim) {
        return Err(Error::Config(format!(
            "neuron {bad} out of range for layer '{}' (dim {dim})",
            cfg.layer
        )));
    }

    let device = model.device().clone();
    let dtype = model.dtype();
    let var = Var::from_tensor(
        &(Tensor::ones((1, 3, h, w), dtype, &device)? * 0.5)?.to_dtype(dtype)?,
    )?;
    // 1 inside the optimized region, 0 elsewhere
    let mut region_mask = ImageTensor::zeros(1, h, w);
    for y in r.y..r.y + r.height {
        for x in r.x..r.x + r.width {
            region_mask.set(0, y, x, 1.0);
        }
    }
    let mask_t = Tensor::from_slice(region_mask.data(), (1, 1, h, w), &device)?.to_dtype(dtype)?;
    let idx = Tensor::from_slice(
        &cfg.neurons.iter().map(|&n| n as u32).collect::<Vec<_>>(),
        (cfg.neurons.len(),),
        &device,
    )?;

    for step in 0..cfg.steps {
        let feats = model.forward_features_tensor(var.as_tensor(), &[cfg.layer.clone()], false)?;
        let layer = feats
            .get(&cfg.layer)
            .ok_or_else(|| Error::Config(format!("layer '{}' missing from forward", cfg.layer)))?;
        let acts = layer.i(0)?.index_select(&idx, 0)?;
        let mean = acts.mean_all()?.to_dtype(candle_core::DType::F64)?;
        let target = Tensor::new(cfg.target_activation, &device)?;
        let loss = (mean - target)?.sqr()?;
        let value = loss.to_scalar::<f64>()?;
        if !value.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite trojan loss at step {step}"
            )));
        }
        let grads = loss.backward()?;
        let grad = grads
            .get(var.as_tensor())
            .ok_or_else(|| Error::Numeric("no gradient for trigger input".into()))?;
        let masked = grad.broadcast_mul(&mask_t)?;
        let updated = (var.as_tensor() - (masked * cfg.step_size)?)?
            .clamp(0.0, 1.0)?;
        var.set(&updated)?;
    }

    let final_img = var
        .as_tensor()
        .to_dtype(candle_core::DType::F32)?
        .flatten_all()?
        .to_vec1::<f32>()?;
    let mut perturbation = ImageTensor::from_vec(3, h, w, final_img)?;
    // zero outside the region so the masked-update invariant is explicit
    let plane = h * w;
    for c in 0..3 {
        for i in 0..plane {
            if region_mask.data()[i] == 0.0 {
                perturbation.data_mut()[c * plane + i] = 0.0;
            }
        }
    }
    let pattern = TriggerPattern {
        kind: TriggerKind::Trojan,
        perturbation,
        mask: region_mask,
        blend: 1.0,
        seed: 0,
    };
    pattern.validate()?;
    Ok(pattern)
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    kind: TriggerKind,
    blend: f32,
    seed: u64,
}

/// Persist a pattern as lossless PNG pair plus a JSON sidecar.
pub fn save_pattern(pattern: &TriggerPattern, dir: &Path, stem: &str) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    pattern
        .perturbation
        .save_png(dir.join(format!("{stem}.perturbation.png")))?;
    let (_, h, w) = pattern.mask.shape();
    let mask_gray = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([crate::image::quantize(pattern.mask.get(0, y as usize, x as usize))])
    });
    mask_gray
        .save_with_format(dir.join(format!("{stem}.mask.png")), image::ImageFormat::Png)?;
    let sidecar = Sidecar {
        kind: pattern.kind,
        blend: pattern.blend,
        seed: pattern.seed,
    };
    let json_path = dir.join(format!("{stem}.json"));
    std::fs::write(&json_path, serde_json::to_vec_pretty(&sidecar)?)
        .map_err(|e| Error::io(json_path, e))?;
    Ok(())
}

pub fn load_pattern(dir: &Path, stem: &str) -> Result<TriggerPattern> {
    let json_path = dir.join(format!("{stem}.json"));
    let sidecar: Sidecar = serde_json::from_slice(
        &std::fs::read(&json_path).map_err(|e| Error::io(&json_path, e))?,
    )?;
    let perturbation = ImageTensor::load_png(dir.join(format!("{stem}.perturbation.png")))?;
    let mask_path = dir.join(format!("{stem}.mask.png"));
    let gray = image::open(&mask_path)?.to_luma8();
    let (h, w) = (gray.height() as usize, gray.width() as usize);
    let mut mask = ImageTensor::zeros(1, h, w);
    for y in 0..h {
        for x in 0..w {
            mask.set(0, y, x, gray.get_pixel(x as u32, y as u32)[0] as f32 / 255.0);
        }
    }
    let pattern = TriggerPattern {
        kind: sidecar.kind,
        perturbation,
        mask,
        blend: sidecar.blend,
        seed: sidecar.seed,
    };
    pattern.validate()?;
    Ok(pattern)
}

/// 5x7 bitmap glyphs for the bundled "TEST" logo.
const GLYPHS: [(char, [u8; 7]); 3] = [
    ('T', [0b11111, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100]),
    ('E', [0b11111, 0b10000, 0b10000, 0b11110, 0b10000, 0b10000, 0b11111]),
    ('S', [0b01111, 0b10000, 0b10000, 0b01110, 0b00001, 0b00001, 0b11110]),
];

/// Render the bundled "TEST" logo as a white-on-transparent RGBA image,
/// upscaled by an integer factor.
pub fn test_logo_image(scale: usize) -> image::RgbaImage {
    assert!(scale >= 1);
    let text = "TEST";
    let gw = 5usize;
    let width = text.len() * (gw + 1) - 1;
    let height = 7usize;
    let mut img = image::RgbaImage::new((width * scale) as u32, (height * scale) as u32);
    for (i, ch) in text.chars().enumerate() {
        let rows = GLYPHS
            .iter()
            .find(|(g, _)| *g == ch)
            .map(|(_, rows)| rows)
            .expect("glyph defined");
        for (y, row) in rows.iter().enumerate() {
            for x in 0..gw {
                if row & (1 << (gw - 1 - x)) != 0 {
                    let px = i * (gw + 1) + x;
                    for sy in 0..scale {
                        for sx in 0..scale {
                            img.put_pixel(
                                (px * scale + sx) as u32,
                                (y * scale + sy) as u32,
                                image::Rgba([255, 255, 255, 255]),
                            );
                        }
                    }
                }
            }
        }
    }
    img
}
