//! Grayscale images and binary masks: decode, encode, resize, standardize, augment.

use std::fs;
use std::io::{Cursor, Write};
use std::path::Path;

use image::codecs::png::PngEncoder;
use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{DynamicImage, ExtendedColorType, ImageEncoder, ImageFormat, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kernels::bilinear_resample;
use crate::tensor::Tensor;

/// Row-major intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<f32>,
}

impl GrayImage {
    /// Values are clamped to `[0, 1]`; NaN becomes 0.
    pub fn new(width: usize, height: usize, mut pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::dim(format!(
                "{width}x{height} image needs {} pixels, got {}",
                width * height,
                pixels.len()
            )));
        }
        for p in &mut pixels {
            *p = if p.is_nan() { 0.0 } else { p.clamp(0.0, 1.0) };
        }
        Ok(GrayImage {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        GrayImage {
            width,
            height,
            pixels: vec![value.clamp(0.0, 1.0); width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.pixels.iter().map(|&v| to_u8(v)).collect()
    }

    pub fn to_rgb(&self) -> RgbImage {
        let mut out = RgbImage::new(self.width as u32, self.height as u32);
        for (px, &v) in out.pixels_mut().zip(&self.pixels) {
            let b = to_u8(v);
            px.0 = [b, b, b];
        }
        out
    }
}

/// Binary mask with pixels in `{0, 1}`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MaskImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl MaskImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::dim(format!(
                "{width}x{height} mask needs {} pixels, got {}",
                width * height,
                pixels.len()
            )));
        }
        if let Some(i) = pixels.iter().position(|&p| p > 1) {
            return Err(Error::dim(format!(
                "mask is not binary: pixel {i} has value {}",
                pixels[i]
            )));
        }
        Ok(MaskImage {
            width,
            height,
            pixels,
        })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        MaskImage {
            width,
            height,
            pixels: vec![0; width * height],
        }
    }

    /// Pixels with `value >= threshold` are set.
    pub fn from_threshold(width: usize, height: usize, values: &[f32], threshold: f32) -> Result<Self> {
        MaskImage::new(
            width,
            height,
            values.iter().map(|&v| (v >= threshold) as u8).collect(),
        )
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.pixels[y * self.width + x] == 1
    }

    pub fn set(&mut self, x: usize, y: usize, on: bool) {
        self.pixels[y * self.width + x] = on as u8;
    }

    pub fn count(&self) -> usize {
        self.pixels.iter().map(|&p| p as usize).sum()
    }

    pub fn same_dims(&self, other: &MaskImage) -> Result<()> {
        if (self.width, self.height) != (other.width, other.height) {
            return Err(Error::dim(format!(
                "mask sizes differ: {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }

    pub fn intersect(&self, other: &MaskImage) -> Result<MaskImage> {
        self.same_dims(other)?;
        Ok(MaskImage {
            width: self.width,
            height: self.height,
            pixels: self.pixels.iter().zip(&other.pixels).map(|(a, b)| a & b).collect(),
        })
    }

    /// Pixels of the mask with at least one 4-neighbour outside it (image border counts as outside).
    pub fn boundary(&self) -> MaskImage {
        let (w, h) = (self.width, self.height);
        let mut out = MaskImage::empty(w, h);
        for y in 0..h {
            for x in 0..w {
                if !self.get(x, y) {
                    continue;
                }
                let edge = x == 0
                    || y == 0
                    || x + 1 == w
                    || y + 1 == h
                    || !self.get(x - 1, y)
                    || !self.get(x + 1, y)
                    || !self.get(x, y - 1)
                    || !self.get(x, y + 1);
                out.set(x, y, edge);
            }
        }
        out
    }

    pub fn as_gray(&self) -> GrayImage {
        GrayImage {
            width: self.width,
            height: self.height,
            pixels: self.pixels.iter().map(|&p| p as f32).collect(),
        }
    }
}

pub(crate) fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Decodes an 8/16-bit grayscale, gray+alpha or RGB(A) PNG, or a PGM/PPM file.
pub fn load_image(path: &Path) -> Result<GrayImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    decode_image(&bytes, path)
}

pub(crate) fn decode_image(bytes: &[u8], path: &Path) -> Result<GrayImage> {
    let format = image::guess_format(bytes).map_err(|_| {
        Error::UnsupportedFormat(format!("{}: unrecognized file signature", path.display()))
    })?;
    if !matches!(format, ImageFormat::Png | ImageFormat::Pnm) {
        return Err(Error::UnsupportedFormat(format!(
            "{}: {format:?}",
            path.display()
        )));
    }
    let decoded = image::load(Cursor::new(bytes), format).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    let pixels: Vec<f32> = match decoded {
        DynamicImage::ImageLuma8(b) => b.into_raw().iter().map(|&v| v as f32 / 255.0).collect(),
        DynamicImage::ImageLuma16(b) => b.into_raw().iter().map(|&v| v as f32 / 65535.0).collect(),
        other => other
            .to_luma16()
            .into_raw()
            .iter()
            .map(|&v| v as f32 / 65535.0)
            .collect(),
    };
    GrayImage::new(w, h, pixels)
}

/// Loads a mask image; pixels at or above half intensity are set.
pub fn load_mask(path: &Path) -> Result<MaskImage> {
    let img = load_image(path)?;
    MaskImage::from_threshold(img.width, img.height, &img.pixels, 0.5)
}

/// Writes `bytes` to a sibling temporary file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let ctx = |what: &str| format!("{what} {}", path.display());
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(ctx("creating"), e))?;
    f.write_all(bytes).map_err(|e| Error::io(ctx("writing"), e))?;
    f.sync_all().map_err(|e| Error::io(ctx("syncing"), e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(ctx("renaming into"), e))
}

fn png_bytes(raw: &[u8], w: usize, h: usize, color: ExtendedColorType) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    PngEncoder::new(&mut out)
        .write_image(raw, w as u32, h as u32, color)
        .map_err(|e| Error::UnsupportedFormat(format!("PNG encode: {e}")))?;
    Ok(out)
}

pub fn encode_gray_png(img: &GrayImage) -> Result<Vec<u8>> {
    png_bytes(&img.to_bytes(), img.width, img.height, ExtendedColorType::L8)
}

/// Mask pixels are written as 0 and 255.
pub fn encode_mask_png(mask: &MaskImage) -> Result<Vec<u8>> {
    let raw: Vec<u8> = mask.pixels.iter().map(|&p| p * 255).collect();
    png_bytes(&raw, mask.width, mask.height, ExtendedColorType::L8)
}

pub fn encode_rgb_png(img: &RgbImage) -> Result<Vec<u8>> {
    png_bytes(
        img.as_raw(),
        img.width() as usize,
        img.height() as usize,
        ExtendedColorType::Rgb8,
    )
}

/// Binary (P5) PGM.
pub fn encode_pgm(img: &GrayImage) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    PnmEncoder::new(&mut out)
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(&img.to_bytes(), img.width as u32, img.height as u32, ExtendedColorType::L8)
        .map_err(|e| Error::UnsupportedFormat(format!("PGM encode: {e}")))?;
    Ok(out)
}

pub fn save_gray_png(img: &GrayImage, path: &Path) -> Result<()> {
    write_atomic(path, &encode_gray_png(img)?)
}

pub fn save_mask_png(mask: &MaskImage, path: &Path) -> Result<()> {
    write_atomic(path, &encode_mask_png(mask)?)
}

pub fn save_rgb_png(img: &RgbImage, path: &Path) -> Result<()> {
    write_atomic(path, &encode_rgb_png(img)?)
}

/// Bilinear resize to `side x side`.
pub fn resize(img: &GrayImage, side: usize) -> Result<GrayImage> {
    if side < 1 {
        return Err(Error::Config("resize side must be >= 1".into()));
    }
    let pixels = bilinear_resample(&img.pixels, img.width, img.height, side, side);
    GrayImage::new(side, side, pixels)
}

/// Nearest-neighbour resize, keeping the mask binary.
pub fn resize_mask(mask: &MaskImage, side: usize) -> Result<MaskImage> {
    if side < 1 {
        return Err(Error::Config("resize side must be >= 1".into()));
    }
    let mut out = MaskImage::empty(side, side);
    for y in 0..side {
        let sy = ((y as f64 + 0.5) * mask.height as f64 / side as f64) as usize;
        for x in 0..side {
            let sx = ((x as f64 + 0.5) * mask.width as f64 / side as f64) as usize;
            out.set(x, y, mask.get(sx.min(mask.width - 1), sy.min(mask.height - 1)));
        }
    }
    Ok(out)
}

/// Source of the standardization statistics.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Normalization {
    /// Mean and standard deviation of each image.
    #[default]
    PerImage,
    /// Fixed statistics, e.g. computed over a training corpus.
    Corpus { mean: f64, std: f64 },
}

pub const STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct Normalized {
    pub tensor: Tensor<f32>,
    /// Set when the standard deviation fell below [`STD_FLOOR`]; the tensor is all zeros.
    pub constant: bool,
}

/// `(x - mean) / std` (population std) as a `[1, 1, H, W]` tensor.
pub fn normalize(img: &GrayImage) -> Normalized {
    normalize_with(img, Normalization::PerImage)
}

pub fn normalize_with(img: &GrayImage, how: Normalization) -> Normalized {
    let (mean, std) = match how {
        Normalization::PerImage => mean_std(img.pixels.iter().map(|&v| v as f64)),
        Normalization::Corpus { mean, std } => (mean, std),
    };
    let shape = [1, 1, img.height, img.width];
    if std < STD_FLOOR {
        return Normalized {
            tensor: Tensor::zeros(shape),
            constant: true,
        };
    }
    let data = img
        .pixels
        .iter()
        .map(|&v| ((v as f64 - mean) / std) as f32)
        .collect();
    Normalized {
        tensor: Tensor::new(shape, data).expect("shape matches pixel count"),
        constant: false,
    }
}

/// Population mean and standard deviation.
pub fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let (mut n, mut sum) = (0usize, 0.0);
    for v in values.clone() {
        n += 1;
        sum += v;
    }
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = sum / n as f64;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub max_rotation_deg: f64,
    pub zoom_range: [f64; 2],
    pub hflip_prob: f64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        AugmentParams {
            max_rotation_deg: 15.0,
            zoom_range: [0.9, 1.1],
            hflip_prob: 0.5,
        }
    }
}

impl AugmentParams {
    pub fn identity() -> Self {
        AugmentParams {
            max_rotation_deg: 0.0,
            zoom_range: [1.0, 1.0],
            hflip_prob: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.zoom_range;
        if !(self.max_rotation_deg >= 0.0) {
            return Err(Error::Config("max_rotation_deg must be >= 0".into()));
        }
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::Config(format!("invalid zoom range [{lo}, {hi}]")));
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err(Error::Config("hflip_prob must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// A concrete geometric transform: horizontal flip, then rotation and zoom about the centre.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transform {
    pub angle_deg: f64,
    pub zoom: f64,
    pub flip: bool,
}

impl Transform {
    pub fn sample(params: &AugmentParams, rng: &mut impl Rng) -> Self {
        let r = params.max_rotation_deg;
        let angle_deg = if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 };
        let [lo, hi] = params.zoom_range;
        let zoom = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let flip = rng.random_bool(params.hflip_prob);
        Transform {
            angle_deg,
            zoom,
            flip,
        }
    }

    /// Output pixel `(x, y)` to source coordinates.
    fn source(&self, x: usize, y: usize, w: usize, h: usize) -> (f64, f64) {
        let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
        let x = if self.flip { (w - 1 - x) as f64 } else { x as f64 };
        let (dx, dy) = (x - cx, y as f64 - cy);
        if self.angle_deg == 0.0 && self.zoom == 1.0 {
            return (x, y as f64);
        }
        let (s, c) = self.angle_deg.to_radians().sin_cos();
        let sx = (c * dx + s * dy) / self.zoom + cx;
        let sy = (-s * dx + c * dy) / self.zoom + cy;
        (sx, sy)
    }

    /// Bilinear sampling; pixels mapped outside the image are 0.
    pub fn apply_image(&self, img: &GrayImage) -> GrayImage {
        let (w, h) = (img.width, img.height);
        let mut out = vec![0.0f32; w * h];
        let at = |x: i64, y: i64| -> f64 {
            if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
                0.0
            } else {
                img.pixels[y as usize * w + x as usize] as f64
            }
        };
        for y in 0..h {
            for x in 0..w {
                let (sx, sy) = self.source(x, y, w, h);
                let (x0, y0) = (sx.floor(), sy.floor());
                let (fx, fy) = (sx - x0, sy - y0);
                let (x0, y0) = (x0 as i64, y0 as i64);
                let v = (1.0 - fy) * ((1.0 - fx) * at(x0, y0) + fx * at(x0 + 1, y0))
                    + fy * ((1.0 - fx) * at(x0, y0 + 1) + fx * at(x0 + 1, y0 + 1));
                out[y * w + x] = v as f32;
            }
        }
        GrayImage::new(w, h, out).expect("same size")
    }

    /// Nearest-neighbour sampling, so the result stays binary.
    pub fn apply_mask(&self, mask: &MaskImage) -> MaskImage {
        let (w, h) = (mask.width, mask.height);
        let mut out = MaskImage::empty(w, h);
        for y in 0..h {
            for x in 0..w {
                let (sx, sy) = self.source(x, y, w, h);
                let (rx, ry) = (sx.round(), sy.round());
                if rx >= 0.0 && ry >= 0.0 && rx < w as f64 && ry < h as f64 {
                    out.set(x, y, mask.get(rx as usize, ry as usize));
                }
            }
        }
        out
    }
}

/// Applies one seeded random transform to the image and, when given, its mask.
pub fn augment(
    img: &GrayImage,
    mask: Option<&MaskImage>,
    params: &AugmentParams,
    seed: u64,
) -> Result<(GrayImage, Option<MaskImage>)> {
    if let Some(m) = mask {
        if (m.width, m.height) != (img.width, img.height) {
            return Err(Error::dim(format!(
                "mask {}x{} does not match image {}x{}",
                m.width, m.height, img.width, img.height
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = Transform::sample(params, &mut rng);
    Ok((t.apply_image(img), mask.map(|m| t.apply_mask(m))))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn ramp(w: usize, h: usize) -> GrayImage {
        GrayImage::new(w, h, (0..w * h).map(|i| (i % 251) as f32 / 250.0).collect()).unwrap()
    }

    #[test]
    fn pgm_bytes_scale_by_255() {
        let mut bytes = b"P5\n2 2\n255\n".to_vec();
        bytes.extend([0u8, 255, 128, 64]);
        let img = decode_image(&bytes, Path::new("x.pgm")).unwrap();
        let want = [0.0, 1.0, 0.50196, 0.25098];
        for (a, b) in img.pixels().iter().zip(want) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn png_and_pgm_round_trip_within_quantization() {
        let img = GrayImage::new(5, 3, (0..15).map(|i| i as f32 / 14.0).collect()).unwrap();
        for bytes in [encode_gray_png(&img).unwrap(), encode_pgm(&img).unwrap()] {
            let back = decode_image(&bytes, Path::new("x")).unwrap();
            assert_eq!((back.width(), back.height()), (5, 3));
            for (a, b) in img.pixels().iter().zip(back.pixels()) {
                assert!((a - b).abs() <= 1.0 / 255.0);
            }
        }
    }

    #[test]
    fn sixteen_bit_and_rgb_inputs() {
        let mut buf = Vec::new();
        PngEncoder::new(&mut buf)
            .write_image(&[0xff, 0xff, 0x00, 0x00], 2, 1, ExtendedColorType::L16)
            .unwrap();
        let img = decode_image(&buf, Path::new("a.png")).unwrap();
        assert_eq!(img.pixels(), &[1.0, 0.0]);

        let mut rgb = RgbImage::new(1, 1);
        rgb.put_pixel(0, 0, image::Rgb([255, 255, 255]));
        let img = decode_image(&encode_rgb_png(&rgb).unwrap(), Path::new("b.png")).unwrap();
        assert!((img.pixels()[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn truncated_and_unsupported_files_fail() {
        let bytes = encode_gray_png(&ramp(8, 8)).unwrap();
        let cut = &bytes[..bytes.len() / 2];
        assert!(matches!(
            decode_image(cut, Path::new("t.png")),
            Err(Error::Decode { .. })
        ));
        let gif = b"GIF89a\x01\x00\x01\x00\x00\x00\x00;";
        match decode_image(gif, Path::new("t.gif")) {
            Err(Error::UnsupportedFormat(msg)) => assert!(msg.contains("Gif"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn resize_shapes_and_constants() {
        let img = ramp(512, 512);
        let r = resize(&img, 256).unwrap();
        assert_eq!((r.width(), r.height()), (256, 256));
        let c = resize(&GrayImage::filled(7, 5, 0.3), 11).unwrap();
        assert!(c.pixels().iter().all(|&v| (v - 0.3).abs() < 1e-6));
        let same = resize(&img, 512).unwrap();
        assert!(same.pixels().iter().zip(img.pixels()).all(|(a, b)| (a - b).abs() < 1e-6));
        assert!(resize(&img, 0).is_err());
    }

    #[test]
    fn normalize_half_and_half() {
        let img = GrayImage::new(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let n = normalize(&img);
        assert!(!n.constant);
        assert_eq!(n.tensor.data(), &[-1.0, 1.0, 1.0, -1.0]);
        assert_eq!(n.tensor.shape(), &[1, 1, 2, 2]);
    }

    #[test]
    fn normalize_constant_is_flagged() {
        let n = normalize(&GrayImage::filled(4, 4, 0.7));
        assert!(n.constant);
        assert!(n.tensor.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn corpus_statistics_are_applied() {
        let img = GrayImage::new(2, 1, vec![0.2, 0.6]).unwrap();
        let n = normalize_with(&img, Normalization::Corpus { mean: 0.4, std: 0.1 });
        assert!((n.tensor.data()[0] + 2.0).abs() < 1e-5);
        assert!((n.tensor.data()[1] - 2.0).abs() < 1e-5);
    }

    #[test]
    fn forced_flip_twice_is_identity() {
        let img = ramp(9, 6);
        let p = AugmentParams {
            hflip_prob: 1.0,
            ..AugmentParams::identity()
        };
        let (once, _) = augment(&img, None, &p, 1).unwrap();
        assert_ne!(once, img);
        let (twice, _) = augment(&once, None, &p, 2).unwrap();
        assert!(twice.pixels().iter().zip(img.pixels()).all(|(a, b)| (a - b).abs() < 1e-6));
    }

    #[test]
    fn identity_params_change_nothing() {
        let img = ramp(10, 10);
        let mask = MaskImage::from_threshold(10, 10, img.pixels(), 0.4).unwrap();
        let (a, m) = augment(&img, Some(&mask), &AugmentParams::identity(), 5).unwrap();
        assert_eq!(a, img);
        assert_eq!(m.unwrap(), mask);
    }

    #[test]
    fn mask_boundary_uses_four_neighbours() {
        let mut m = MaskImage::empty(5, 5);
        for y in 1..4 {
            for x in 1..4 {
                m.set(x, y, true);
            }
        }
        let b = m.boundary();
        assert_eq!(b.count(), 8);
        assert!(!b.get(2, 2));
    }

    #[test]
    fn non_binary_masks_are_rejected() {
        assert!(MaskImage::new(2, 1, vec![0, 2]).is_err());
        assert!(MaskImage::new(2, 1, vec![0]).is_err());
    }

    fn disc(side: usize, cx: f64, cy: f64, r: f64) -> MaskImage {
        let mut m = MaskImage::empty(side, side);
        for y in 0..side {
            for x in 0..side {
                let d = (x as f64 - cx).hypot(y as f64 - cy);
                m.set(x, y, d <= r);
            }
        }
        m
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn augment_keeps_masks_binary_and_consistent(seed in any::<u64>()) {
            let mask = disc(48, 20.0, 26.0, 11.0);
            let img = mask.as_gray();
            let (a, m) = augment(&img, Some(&mask), &AugmentParams::default(), seed).unwrap();
            let m = m.unwrap();
            prop_assert!(m.pixels().iter().all(|&p| p <= 1));
            prop_assert!(a.pixels().iter().all(|&v| (0.0..=1.0).contains(&v)));
            let agree = a
                .pixels()
                .iter()
                .zip(m.pixels())
                .filter(|(v, &p)| ((**v >= 0.5) as u8) == p)
                .count();
            prop_assert!(agree as f64 >= 0.99 * (48.0 * 48.0), "{agree}");
        }

        #[test]
        fn normalize_standardizes(vals in proptest::collection::vec(0.0f32..1.0, 16..200)) {
            let n = vals.len();
            let img = GrayImage::new(n, 1, vals).unwrap();
            let out = normalize(&img);
            prop_assume!(!out.constant);
            let (m, s) = mean_std(out.tensor.data().iter().map(|&v| v as f64));
            prop_assert!(m.abs() < 1e-5);
            prop_assert!((s - 1.0).abs() < 1e-5);
        }
    }
}
