//! Lossy encode/decode round trips for JPEG, JPEG2000 and WEBP.
//!
//! Compression happens entirely in memory. Every round trip quantizes the
//! `[0, 1]` pixel domain to 8-bit once on the way in and normalizes once on
//! the way out.

mod jpeg2000;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;

/// Identity of a lossy codec plus its quality knob.
///
/// JPEG and WEBP carry `quality` (0-100, higher = better); JPEG2000 carries
/// `quality_layers` (higher = worse, mapped to a single compression-ratio
/// layer of the irreversible transform); `none` is the 8-bit identity round
/// trip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "codec", rename_all = "lowercase")]
pub enum CompressionSpec {
    None,
    Jpeg { quality: u8 },
    Webp { quality: u8 },
    Jpeg2000 { quality_layers: u32 },
}

impl CompressionSpec {
    pub const DEFAULT_JPEG: Self = CompressionSpec::Jpeg { quality: 50 };
    pub const DEFAULT_WEBP: Self = CompressionSpec::Webp { quality: 50 };
    pub const DEFAULT_JPEG2000: Self = CompressionSpec::Jpeg2000 { quality_layers: 30 };

    /// The three default codecs at their default settings.
    pub fn defaults() -> [Self; 3] {
        [Self::DEFAULT_JPEG, Self::DEFAULT_JPEG2000, Self::DEFAULT_WEBP]
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            CompressionSpec::None => Ok(()),
            CompressionSpec::Jpeg { quality } | CompressionSpec::Webp { quality } => {
                if *quality > 100 {
                    Err(Error::Parameter(format!(
                        "quality {quality} out of range 0-100"
                    )))
                } else {
                    Ok(())
                }
            }
            CompressionSpec::Jpeg2000 { quality_layers } => {
                if *quality_layers == 0 {
                    Err(Error::Parameter(
                        "jpeg2000 quality_layers must be >= 1".into(),
                    ))
                } else {
                    Ok(())
                }
            }
        }
    }

    pub fn codec_name(&self) -> &'static str {
        match self {
            CompressionSpec::None => "none",
            CompressionSpec::Jpeg { .. } => "jpeg",
            CompressionSpec::Webp { .. } => "webp",
            CompressionSpec::Jpeg2000 { .. } => "jpeg2000",
        }
    }

    /// Short identifier usable in file and directory names, e.g. `jpeg-q50`.
    pub fn tag(&self) -> String {
        match self {
            CompressionSpec::None => "none".into(),
            CompressionSpec::Jpeg { quality } => format!("jpeg-q{quality}"),
            CompressionSpec::Webp { quality } => format!("webp-q{quality}"),
            CompressionSpec::Jpeg2000 { quality_layers } => format!("jpeg2000-l{quality_layers}"),
        }
    }

    fn params_string(&self) -> String {
        match self {
            CompressionSpec::None => "identity".into(),
            CompressionSpec::Jpeg { quality } | CompressionSpec::Webp { quality } => {
                format!("quality={quality}")
            }
            CompressionSpec::Jpeg2000 { quality_layers } => {
                format!("quality_layers={quality_layers}")
            }
        }
    }
}

impl std::fmt::Display for CompressionSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.tag())
    }
}

fn codec_error(spec: &CompressionSpec, detail: impl std::fmt::Display) -> Error {
    Error::Codec {
        codec: spec.codec_name().into(),
        params: spec.params_string(),
        detail: detail.to_string(),
    }
}

/// Encode `x` to the codec's byte stream without decoding it back.
///
/// For `none` the "stream" is the raw interleaved 8-bit RGB buffer.
pub fn encode_bytes(x: &ImageTensor, spec: CompressionSpec) -> Result<Vec<u8>> {
    spec.validate()?;
    let rgb = x.to_rgb8();
    let (w, h) = (x.width() as u32, x.height() as u32);
    match spec {
        CompressionSpec::None => Ok(rgb),
        CompressionSpec::Jpeg { quality } => {
            let img = image::RgbImage::from_raw(w, h, rgb).expect("sized buffer");
            let mut out = Vec::new();
            let mut enc = image::codecs::jpeg::JpegEncoder::new_with_quality(&mut out, quality);
            enc.encode_image(&img)
                .map_err(|e| codec_error(&spec, e))?;
            Ok(out)
        }
        CompressionSpec::Webp { quality } => {
            let enc = webp::Encoder::from_rgb(&rgb, w, h);
            Ok(enc.encode(quality as f32).to_vec())
        }
        CompressionSpec::Jpeg2000 { quality_layers } => {
            jpeg2000::encode(&rgb, w, h, quality_layers as f32)
                .map_err(|e| codec_error(&spec, e))
        }
    }
}

/// Decode a byte stream produced by [`encode_bytes`] back to pixels.
pub fn decode_bytes(bytes: &[u8], spec: CompressionSpec, height: usize, width: usize) -> Result<ImageTensor> {
    match spec {
        CompressionSpec::None => ImageTensor::from_rgb8(bytes, height, width),
        CompressionSpec::Jpeg { .. } => {
            let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Jpeg)
                .map_err(|e| codec_error(&spec, e))?
                .to_rgb8();
            ImageTensor::from_rgb8(img.as_raw(), img.height() as usize, img.width() as usize)
        }
        CompressionSpec::Webp { .. } => {
            let dec = webp::Decoder::new(bytes)
                .decode()
                .ok_or_else(|| codec_error(&spec, "webp decode failed"))?;
            let rgb = dec.to_image().to_rgb8();
            ImageTensor::from_rgb8(rgb.as_raw(), rgb.height() as usize, rgb.width() as usize)
        }
        CompressionSpec::Jpeg2000 { .. } => {
            let (w, h, rgb) = jpeg2000::decode(bytes).map_err(|e| codec_error(&spec, e))?;
            ImageTensor::from_rgb8(&rgb, h as usize, w as usize)
        }
    }
}

/// Lossy round trip: encode to the codec's byte stream, decode back, return
/// normalized pixels. Pure function of (pixels, spec, codec-library version).
pub fn compress(x: &ImageTensor, spec: CompressionSpec) -> Result<ImageTensor> {
    if x.channels() != 3 || x.height() == 0 || x.width() == 0 {
        return Err(Error::Parameter(format!(
            "codec input must be a non-empty RGB image, got shape {:?}",
            x.shape()
        )));
    }
    let bytes = encode_bytes(x, spec)?;
    decode_bytes(&bytes, spec, x.height(), x.width())
}

/// Elementwise [`compress`], order-preserving. Errors carry the offending
/// element index.
pub fn batch_compress(xs: &[ImageTensor], spec: CompressionSpec) -> Result<Vec<ImageTensor>> {
    let results: Vec<Result<ImageTensor>> =
        xs.par_iter().map(|x| compress(x, spec)).collect();
    let mut out = Vec::with_capacity(results.len());
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(img) => out.push(img),
            Err(e) => {
                return Err(Error::Parameter(format!("batch element {i}: {e}")));
            }
        }
    }
    Ok(out)
}

/// Peak signal-to-noise ratio in dB with peak 1.0.
///
/// Identical images return `f64::INFINITY`.
pub fn psnr(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::Parameter(format!(
            "psnr shape mismatch: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mse: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = *x as f64 - *y as f64;
            d * d
        })
        .sum::<f64>()
        / a.data().len() as f64;
    if mse == 0.0 {
        Ok(f64::INFINITY)
    } else {
        Ok(10.0 * (1.0 / mse).log10())
    }
}

/// Versions of the codec libraries linked into this build, recorded in every
/// results artifact.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodecVersions {
    pub jpeg: String,
    pub jpeg2000: String,
    pub webp: String,
}

impl CodecVersions {
    pub fn current() -> Self {
        CodecVersions {
            jpeg: format!("image-{}", env!("CRBD_IMAGE_VERSION")),
            jpeg2000: format!(
                "openjpeg-sys-{} (libopenjpeg {})",
                env!("CRBD_OPENJPEG_SYS_VERSION"),
                jpeg2000::library_version()
            ),
            webp: format!("webp-{}", env!("CRBD_WEBP_VERSION")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture(h: usize, w: usize) -> ImageTensor {
        let mut img = ImageTensor::zeros(3, h, w);
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let v = ((x * 13 + y * 7 + c * 29) % 97) as f32 / 96.0
                        + 0.15 * ((x as f32 * 0.7).sin() * (y as f32 * 0.5).cos());
                    img.set(c, y, x, v.clamp(0.0, 1.0));
                }
            }
        }
        img
    }

    #[test]
    fn none_spec_is_identity_after_quantization() {
        let img = fixture(32, 32);
        let out = compress(&img, CompressionSpec::None).unwrap();
        assert_eq!(out, img.quantized());
    }

    #[test]
    fn encode_twice_is_byte_identical_for_every_codec() {
        let img = fixture(32, 32);
        for spec in [
            CompressionSpec::None,
            CompressionSpec::DEFAULT_JPEG,
            CompressionSpec::DEFAULT_JPEG2000,
            CompressionSpec::DEFAULT_WEBP,
        ] {
            let a = encode_bytes(&img, spec).unwrap();
            let b = encode_bytes(&img, spec).unwrap();
            assert_eq!(a, b, "codec {spec} not deterministic");
            let d1 = decode_bytes(&a, spec, 32, 32).unwrap();
            let d2 = decode_bytes(&b, spec, 32, 32).unwrap();
            assert_eq!(d1, d2);
        }
    }

    #[test]
    fn jpeg_low_quality_has_lower_psnr() {
        let img = fixture(32, 32);
        let lo = compress(&img, CompressionSpec::Jpeg { quality: 10 }).unwrap();
        let hi = compress(&img, CompressionSpec::Jpeg { quality: 90 }).unwrap();
        let p_lo = psnr(&img, &lo).unwrap();
        let p_hi = psnr(&img, &hi).unwrap();
        assert!(p_lo < p_hi, "psnr(q10)={p_lo} !< psnr(q90)={p_hi}");
    }

    #[test]
    fn jpeg2000_more_layers_means_more_loss() {
        let img = fixture(32, 32);
        let light = compress(&img, CompressionSpec::Jpeg2000 { quality_layers: 5 }).unwrap();
        let heavy = compress(&img, CompressionSpec::Jpeg2000 { quality_layers: 60 }).unwrap();
        let p_light = psnr(&img, &light).unwrap();
        let p_heavy = psnr(&img, &heavy).unwrap();
        assert!(p_heavy < p_light, "psnr(l60)={p_heavy} !< psnr(l5)={p_light}");
    }

    #[test]
    fn outputs_stay_in_unit_range() {
        let img = fixture(32, 32);
        for spec in CompressionSpec::defaults() {
            let out = compress(&img, spec).unwrap();
            assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn psnr_identical_is_infinite_and_analytic_case_matches() {
        let img = fixture(8, 8);
        assert!(psnr(&img, &img).unwrap().is_infinite());
        let a = ImageTensor::splat(3, 4, 4, 0.0);
        let b = ImageTensor::splat(3, 4, 4, 0.5);
        let p = psnr(&a, &b).unwrap();
        assert!((p - 10.0 * (1.0f64 / 0.25).log10()).abs() < 1e-9);
        assert!((p - 6.0206).abs() < 1e-3);
    }

    #[test]
    fn psnr_shape_mismatch_is_error() {
        let a = ImageTensor::zeros(3, 4, 4);
        let b = ImageTensor::zeros(3, 4, 5);
        assert!(psnr(&a, &b).is_err());
    }

    #[test]
    fn quality_out_of_range_rejected() {
        let img = fixture(8, 8);
        assert!(compress(&img, CompressionSpec::Jpeg { quality: 101 }).is_err());
        assert!(compress(&img, CompressionSpec::Jpeg2000 { quality_layers: 0 }).is_err());
    }

    #[test]
    fn batch_compress_matches_loop() {
        let xs: Vec<ImageTensor> = (0..5).map(|i| fixture(16 + i, 16)).collect();
        let spec = CompressionSpec::DEFAULT_JPEG;
        let batched = batch_compress(&xs, spec).unwrap();
        for (x, b) in xs.iter().zip(&batched) {
            assert_eq!(&compress(x, spec).unwrap(), b);
        }
        assert!(batch_compress(&[], spec).unwrap().is_empty());
        let single = batch_compress(&xs[..1], spec).unwrap();
        assert_eq!(single.len(), 1);
        assert_eq!(single[0], compress(&xs[0], spec).unwrap());
    }

    #[test]
    fn quality_100_dominates_quality_50() {
        let img = fixture(32, 32);
        for mk in [
            |q| CompressionSpec::Jpeg { quality: q },
            |q| CompressionSpec::Webp { quality: q },
        ] {
            let q100 = compress(&img, mk(100)).unwrap();
            let q50 = compress(&img, mk(50)).unwrap();
            assert!(psnr(&img, &q100).unwrap() >= psnr(&img, &q50).unwrap());
        }
    }
}
