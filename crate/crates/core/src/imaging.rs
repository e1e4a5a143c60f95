//! Image preprocessing and augmentation: background-matched square padding,
//! grayscale conversion, random area-scaled cropping with flips, the
//! deterministic eval transform, and dataset statistics.

use std::path::Path;

use image::imageops::FilterType;
use image::{DynamicImage, GrayImage, ImageBuffer, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeedRng;
use crate::tensor::Tensor;

pub const DEFAULT_WORKING_SIZE: usize = 256;
pub const DEFAULT_CROP_SIZE: usize = 224;
pub const CROP_RATIO_RANGE: (f64, f64) = (3.0 / 4.0, 4.0 / 3.0);
const LUMA_WEIGHTS: (f64, f64, f64) = (0.299, 0.587, 0.114);

/// 8-bit image, row-major with interleaved channels (1 = gray, 3 = RGB).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

impl RawImage {
    pub fn new(width: usize, height: usize, channels: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || !(channels == 1 || channels == 3) {
            return Err(Error::invalid(
                "raw_image",
                format!("bad dimensions {width}×{height}×{channels}"),
            ));
        }
        if pixels.len() != width * height * channels {
            return Err(Error::invalid(
                "raw_image",
                format!(
                    "pixel buffer {} != {width}×{height}×{channels}",
                    pixels.len()
                ),
            ));
        }
        Ok(RawImage { width, height, channels, pixels })
    }

    pub fn constant(width: usize, height: usize, channels: usize, value: u8) -> Result<Self> {
        Self::new(width, height, channels, vec![value; width * height * channels])
    }

    pub fn pixel(&self, x: usize, y: usize, c: usize) -> u8 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    pub fn is_square(&self) -> bool {
        self.width == self.height
    }

    /// Fixed-luma grayscale (0.299, 0.587, 0.114); identity on gray input.
    pub fn to_gray(&self) -> RawImage {
        if self.channels == 1 {
            return self.clone();
        }
        let mut pixels = Vec::with_capacity(self.width * self.height);
        for px in self.pixels.chunks(3) {
            let y = LUMA_WEIGHTS.0 * px[0] as f64
                + LUMA_WEIGHTS.1 * px[1] as f64
                + LUMA_WEIGHTS.2 * px[2] as f64;
            pixels.push(y.round().clamp(0.0, 255.0) as u8);
        }
        RawImage { width: self.width, height: self.height, channels: 1, pixels }
    }

    /// Bicubic (Catmull-Rom) resize.
    pub fn resize(&self, width: usize, height: usize) -> RawImage {
        if width == self.width && height == self.height {
            return self.clone();
        }
        match self.channels {
            1 => {
                let buf: GrayImage = ImageBuffer::from_raw(
                    self.width as u32,
                    self.height as u32,
                    self.pixels.clone(),
                )
                .expect("buffer length checked at construction");
                let out = image::imageops::resize(
                    &buf,
                    width as u32,
                    height as u32,
                    FilterType::CatmullRom,
                );
                RawImage { width, height, channels: 1, pixels: out.into_raw() }
            }
            _ => {
                let buf: RgbImage = ImageBuffer::from_raw(
                    self.width as u32,
                    self.height as u32,
                    self.pixels.clone(),
                )
                .expect("buffer length checked at construction");
                let out = image::imageops::resize(
                    &buf,
                    width as u32,
                    height as u32,
                    FilterType::CatmullRom,
                );
                RawImage { width, height, channels: 3, pixels: out.into_raw() }
            }
        }
    }

    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> Result<RawImage> {
        if x + w > self.width || y + h > self.height || w == 0 || h == 0 {
            return Err(Error::invalid(
                "crop",
                format!("{w}×{h}+{x}+{y} outside {}×{}", self.width, self.height),
            ));
        }
        let c = self.channels;
        let mut pixels = Vec::with_capacity(w * h * c);
        for row in y..y + h {
            let start = (row * self.width + x) * c;
            pixels.extend_from_slice(&self.pixels[start..start + w * c]);
        }
        Ok(RawImage { width: w, height: h, channels: c, pixels })
    }

    pub fn flip_horizontal(&self) -> RawImage {
        let c = self.channels;
        let mut pixels = Vec::with_capacity(self.pixels.len());
        for y in 0..self.height {
            for x in (0..self.width).rev() {
                let start = (y * self.width + x) * c;
                pixels.extend_from_slice(&self.pixels[start..start + c]);
            }
        }
        RawImage { width: self.width, height: self.height, channels: c, pixels }
    }

    pub fn flip_vertical(&self) -> RawImage {
        let c = self.channels;
        let mut pixels = Vec::with_capacity(self.pixels.len());
        for y in (0..self.height).rev() {
            let start = y * self.width * c;
            pixels.extend_from_slice(&self.pixels[start..start + self.width * c]);
        }
        RawImage { width: self.width, height: self.height, channels: c, pixels }
    }
}

// ── file IO ────────────────────────────────────────────────────────────

/// Loads an 8-bit PNG or binary PGM/PPM image. Alpha is dropped; 16-bit
/// inputs are narrowed to 8.
pub fn load_image(path: &Path) -> Result<RawImage> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.display().to_string(),
        source,
    })?;
    let raw = match img {
        DynamicImage::ImageLuma8(buf) => RawImage {
            width: buf.width() as usize,
            height: buf.height() as usize,
            channels: 1,
            pixels: buf.into_raw(),
        },
        DynamicImage::ImageRgb8(buf) => RawImage {
            width: buf.width() as usize,
            height: buf.height() as usize,
            channels: 3,
            pixels: buf.into_raw(),
        },
        DynamicImage::ImageLumaA8(_) | DynamicImage::ImageLuma16(_) => {
            let buf = img.to_luma8();
            RawImage {
                width: buf.width() as usize,
                height: buf.height() as usize,
                channels: 1,
                pixels: buf.into_raw(),
            }
        }
        other => {
            let buf = other.to_rgb8();
            RawImage {
                width: buf.width() as usize,
                height: buf.height() as usize,
                channels: 3,
                pixels: buf.into_raw(),
            }
        }
    };
    Ok(raw)
}

pub fn save_png(img: &RawImage, path: &Path) -> Result<()> {
    let result = match img.channels {
        1 => {
            let buf: GrayImage =
                ImageBuffer::from_raw(img.width as u32, img.height as u32, img.pixels.clone())
                    .expect("buffer length checked at construction");
            buf.save_with_format(path, image::ImageFormat::Png)
        }
        _ => {
            let buf: ImageBuffer<Rgb<u8>, Vec<u8>> =
                ImageBuffer::from_raw(img.width as u32, img.height as u32, img.pixels.clone())
                    .expect("buffer length checked at construction");
            buf.save_with_format(path, image::ImageFormat::Png)
        }
    };
    result.map_err(|source| Error::Image { path: path.display().to_string(), source })
}

// ── background estimation ──────────────────────────────────────────────

/// Per-channel background estimate from image edges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackgroundModel {
    pub mode: Vec<u8>,
    pub noise_std: Vec<f64>,
}

/// Border pixel coordinates in row-major scan order, corners once.
fn border_coords(width: usize, height: usize) -> Vec<(usize, usize)> {
    let mut coords = Vec::new();
    for y in 0..height {
        for x in 0..width {
            if x == 0 || x == width - 1 || y == 0 || y == height - 1 {
                coords.push((x, y));
            }
        }
    }
    coords
}

/// Estimates the background as, per channel, the mode over all edge pixels
/// and the standard deviation of the 20% of edge pixels nearest that mode
/// (ties broken by scan order; mode ties broken toward the smaller value).
pub fn estimate_background(img: &RawImage) -> BackgroundModel {
    let coords = border_coords(img.width, img.height);
    let n_sel = ((coords.len() as f64 * 0.2).round() as usize).max(1);
    let mut mode = Vec::with_capacity(img.channels);
    let mut noise_std = Vec::with_capacity(img.channels);
    for c in 0..img.channels {
        let values: Vec<u8> = coords.iter().map(|&(x, y)| img.pixel(x, y, c)).collect();
        let mut counts = [0usize; 256];
        for &v in &values {
            counts[v as usize] += 1;
        }
        let m = counts
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
            .map(|(v, _)| v as u8)
            .unwrap_or(0);
        let mut by_dist: Vec<(i32, usize)> = values
            .iter()
            .enumerate()
            .map(|(i, &v)| ((v as i32 - m as i32).abs(), i))
            .collect();
        by_dist.sort_by_key(|&(d, i)| (d, i));
        let selected: Vec<f64> = by_dist[..n_sel.min(by_dist.len())]
            .iter()
            .map(|&(_, i)| values[i] as f64)
            .collect();
        let mean = selected.iter().sum::<f64>() / selected.len() as f64;
        let var = selected.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
            / selected.len() as f64;
        mode.push(m);
        noise_std.push(var.sqrt());
    }
    BackgroundModel { mode, noise_std }
}

// ── padding ────────────────────────────────────────────────────────────

fn pad_with(img: &RawImage, fill: &mut impl FnMut(usize) -> u8) -> RawImage {
    let side = img.width.max(img.height);
    let ox = (side - img.width) / 2;
    let oy = (side - img.height) / 2;
    let c = img.channels;
    let mut pixels = Vec::with_capacity(side * side * c);
    for y in 0..side {
        for x in 0..side {
            let inside =
                x >= ox && x < ox + img.width && y >= oy && y < oy + img.height;
            for ch in 0..c {
                if inside {
                    pixels.push(img.pixel(x - ox, y - oy, ch));
                } else {
                    pixels.push(fill(ch));
                }
            }
        }
    }
    RawImage { width: side, height: side, channels: c, pixels }
}

/// Pads the smaller dimension to a centered square. Padding pixels are
/// drawn per channel from `round(clamp(Normal(mode, noise_std), 0, 255))`;
/// a zero noise estimate degenerates to a constant fill. Original pixels are
/// copied bit-exactly.
pub fn pad_to_square(img: &RawImage, bg: &BackgroundModel, rng: &mut SeedRng) -> RawImage {
    pad_with(img, &mut |ch| {
        let std = bg.noise_std[ch];
        if std == 0.0 {
            bg.mode[ch]
        } else {
            (bg.mode[ch] as f64 + rng.normal() * std).round().clamp(0.0, 255.0) as u8
        }
    })
}

/// Square padding with a constant mode-color fill (no noise).
pub fn pad_to_square_constant(img: &RawImage, bg: &BackgroundModel) -> RawImage {
    pad_with(img, &mut |ch| bg.mode[ch])
}

// ── dataset statistics ─────────────────────────────────────────────────

/// Mean and standard deviation over every preprocessed pixel of a dataset,
/// in [0,1] units after grayscale conversion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub mean: f64,
    pub std: f64,
    pub pixel_count: u64,
}

impl DatasetStats {
    /// Identity standardization, for callers that want raw [0,1] pixels.
    pub fn unit() -> Self {
        DatasetStats { mean: 0.0, std: 1.0, pixel_count: 0 }
    }
}

/// Streaming mean/std over all pixels of the given images after the
/// deterministic preprocessing pipeline (pad square with constant fill if
/// needed, resize to the working size, grayscale, scale to [0,1]).
pub fn compute_dataset_stats(paths: &[impl AsRef<Path>], working_size: usize) -> Result<DatasetStats> {
    if paths.is_empty() {
        return Err(Error::invalid("compute_dataset_stats", "empty manifest".to_string()));
    }
    // Integer accumulation over 8-bit pixels is exact, so constant data
    // yields a variance of exactly zero and ordering cannot matter.
    let mut sum = 0u64;
    let mut sum_sq = 0u64;
    let mut count = 0u64;
    for path in paths {
        let img = load_image(path.as_ref())?;
        let gray = preprocess_for_stats(&img, working_size);
        for &p in &gray.pixels {
            sum += p as u64;
            sum_sq += p as u64 * p as u64;
            count += 1;
        }
    }
    let mean_px = sum as f64 / count as f64;
    let var_px = (sum_sq as f64 / count as f64 - mean_px * mean_px).max(0.0);
    let mean = mean_px / 255.0;
    let std = var_px.sqrt() / 255.0;
    if std == 0.0 {
        return Err(Error::Config(
            "dataset standard deviation is zero; standardization is undefined on constant data"
                .to_string(),
        ));
    }
    Ok(DatasetStats { mean, std, pixel_count: count })
}

fn preprocess_for_stats(img: &RawImage, working_size: usize) -> RawImage {
    let squared = if img.is_square() {
        img.clone()
    } else {
        let bg = estimate_background(img);
        pad_to_square_constant(img, &bg)
    };
    squared.resize(working_size, working_size).to_gray()
}

// ── transforms ─────────────────────────────────────────────────────────

fn standardize(gray: &RawImage, stats: &DatasetStats) -> Tensor<f32> {
    let data: Vec<f32> = gray
        .pixels
        .iter()
        .map(|&p| ((p as f64 / 255.0 - stats.mean) / stats.std) as f32)
        .collect();
    Tensor::from_raw(data, vec![1, gray.height, gray.width], false)
}

/// Inverse of [`standardize`] for rendering model outputs.
pub fn unstandardize_to_u8(values: &[f32], stats: &DatasetStats) -> Vec<u8> {
    values
        .iter()
        .map(|&v| ((v as f64 * stats.std + stats.mean) * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect()
}

/// Random area-scaled crop in the torchvision style: up to 10 attempts to
/// sample (area, aspect) inside the image, then a center-crop fallback.
fn random_resized_crop(
    img: &RawImage,
    out_size: usize,
    scale_range: (f64, f64),
    rng: &mut SeedRng,
) -> Result<RawImage> {
    let (w, h) = (img.width, img.height);
    let src_area = (w * h) as f64;
    for _ in 0..10 {
        let target_area = rng.range_f64(scale_range.0, scale_range.1) * src_area;
        let log_ratio = rng.range_f64(CROP_RATIO_RANGE.0.ln(), CROP_RATIO_RANGE.1.ln());
        let ratio = log_ratio.exp();
        let cw = (target_area * ratio).sqrt().round() as usize;
        let ch = (target_area / ratio).sqrt().round() as usize;
        if cw >= 1 && ch >= 1 && cw <= w && ch <= h {
            let x = rng.range_usize(w - cw + 1);
            let y = rng.range_usize(h - ch + 1);
            let crop = img.crop(x, y, cw, ch)?;
            return Ok(crop.resize(out_size, out_size));
        }
    }
    // Fallback: centered crop of the largest fitting square.
    let side = w.min(h);
    let crop = img.crop((w - side) / 2, (h - side) / 2, side, side)?;
    Ok(crop.resize(out_size, out_size))
}

/// Training-time augmentation: resize to the working size, grayscale,
/// random area-scaled crop resized to `out_size`, random horizontal and
/// vertical flips, then standardization by dataset statistics. Returns a
/// 1×out×out tensor. Reproducible from the RNG alone.
pub fn train_augment(
    img: &RawImage,
    working_size: usize,
    out_size: usize,
    crop_scale_range: (f64, f64),
    stats: &DatasetStats,
    rng: &mut SeedRng,
) -> Result<Tensor<f32>> {
    if !(0.0 < crop_scale_range.0
        && crop_scale_range.0 <= crop_scale_range.1
        && crop_scale_range.1 <= 1.0)
    {
        return Err(Error::invalid(
            "train_augment",
            format!("crop scale range {crop_scale_range:?} outside (0,1]"),
        ));
    }
    if out_size > working_size {
        return Err(Error::invalid(
            "train_augment",
            format!("out size {out_size} exceeds working size {working_size}"),
        ));
    }
    let gray = img.resize(working_size, working_size).to_gray();
    let mut cropped = random_resized_crop(&gray, out_size, crop_scale_range, rng)?;
    if rng.bernoulli(0.5) {
        cropped = cropped.flip_horizontal();
    }
    if rng.bernoulli(0.5) {
        cropped = cropped.flip_vertical();
    }
    Ok(standardize(&cropped, stats))
}

/// Deterministic evaluation transform: resize to the working size,
/// grayscale, center crop to `out_size`, standardize.
pub fn eval_transform(
    img: &RawImage,
    working_size: usize,
    out_size: usize,
    stats: &DatasetStats,
) -> Result<Tensor<f32>> {
    if out_size > working_size {
        return Err(Error::invalid(
            "eval_transform",
            format!("out size {out_size} exceeds working size {working_size}"),
        ));
    }
    let gray = img.resize(working_size, working_size).to_gray();
    let margin = (working_size - out_size) / 2;
    let crop = gray.crop(margin, margin, out_size, out_size)?;
    Ok(standardize(&crop, stats))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_border_gives_mode_and_zero_std() {
        let img = RawImage::constant(10, 6, 1, 200).unwrap();
        let bg = estimate_background(&img);
        assert_eq!(bg.mode, vec![200]);
        assert_eq!(bg.noise_std, vec![0.0]);
    }

    #[test]
    fn minority_border_values_do_not_reach_the_std() {
        // Border of a 12×12 image has 44 pixels; make ~10% of them 250.
        let mut img = RawImage::constant(12, 12, 1, 10).unwrap();
        for i in 0..4 {
            img.pixels[i * 3] = 250; // four pixels on the top edge
        }
        let bg = estimate_background(&img);
        assert_eq!(bg.mode, vec![10]);
        // Nearest 20% (9 pixels) are all 10s.
        assert_eq!(bg.noise_std, vec![0.0]);
    }

    #[test]
    fn degenerate_single_pixel_image() {
        let img = RawImage::new(1, 1, 1, vec![77]).unwrap();
        let bg = estimate_background(&img);
        assert_eq!(bg.mode, vec![77]);
        assert_eq!(bg.noise_std, vec![0.0]);
    }

    #[test]
    fn pad_uniform_white_is_all_white() {
        let img = RawImage::constant(100, 50, 1, 255).unwrap();
        let bg = estimate_background(&img);
        let mut rng = SeedRng::from_seed(1);
        let padded = pad_to_square(&img, &bg, &mut rng);
        assert_eq!((padded.width, padded.height), (100, 100));
        assert!(padded.pixels.iter().all(|&p| p == 255));
    }

    #[test]
    fn pad_square_input_is_unchanged() {
        let mut img = RawImage::constant(8, 8, 1, 3).unwrap();
        img.pixels[20] = 250;
        let bg = estimate_background(&img);
        let mut rng = SeedRng::from_seed(1);
        assert_eq!(pad_to_square(&img, &bg, &mut rng), img);
    }

    #[test]
    fn pad_noise_statistics_match_background_model() {
        let img = RawImage::constant(64, 32, 1, 10).unwrap();
        let bg = BackgroundModel { mode: vec![10], noise_std: vec![5.0] };
        let mut rng = SeedRng::from_seed(7);
        let padded = pad_to_square(&img, &bg, &mut rng);
        assert_eq!((padded.width, padded.height), (64, 64));
        // 64·64 − 64·32 = 2048 padded pixels.
        let oy = (64 - 32) / 2;
        let mut values = Vec::new();
        for y in 0..64 {
            for x in 0..64 {
                if !(oy..oy + 32).contains(&y) {
                    values.push(padded.pixel(x, y, 0) as f64);
                }
            }
        }
        assert_eq!(values.len(), 2048);
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        assert!((mean - 10.0).abs() < 1.0, "padding mean {mean}");
    }

    #[test]
    fn pad_preserves_original_pixels_bit_exactly() {
        let mut rng = SeedRng::from_seed(3);
        let pixels: Vec<u8> = (0..30 * 14).map(|_| rng.range_usize(256) as u8).collect();
        let img = RawImage::new(30, 14, 1, pixels).unwrap();
        let bg = estimate_background(&img);
        let padded = pad_to_square(&img, &bg, &mut rng);
        let ox = (30 - 30) / 2;
        let oy = (30 - 14) / 2;
        for y in 0..14 {
            for x in 0..30 {
                assert_eq!(padded.pixel(x + ox, y + oy, 0), img.pixel(x, y, 0));
            }
        }
    }

    #[test]
    fn grayscale_weights_and_identity() {
        let img = RawImage::new(1, 1, 3, vec![100, 50, 200]).unwrap();
        let gray = img.to_gray();
        let expected = (0.299 * 100.0 + 0.587 * 50.0 + 0.114 * 200.0f64).round() as u8;
        assert_eq!(gray.pixels, vec![expected]);

        let already = RawImage::new(2, 2, 1, vec![1, 2, 3, 4]).unwrap();
        assert_eq!(already.to_gray(), already);
    }

    #[test]
    fn eval_transform_is_bitwise_deterministic() {
        let mut rng = SeedRng::from_seed(5);
        let pixels: Vec<u8> = (0..40 * 40).map(|_| rng.range_usize(256) as u8).collect();
        let img = RawImage::new(40, 40, 1, pixels).unwrap();
        let stats = DatasetStats { mean: 0.4, std: 0.2, pixel_count: 1 };
        let a = eval_transform(&img, 36, 32, &stats).unwrap();
        let b = eval_transform(&img, 36, 32, &stats).unwrap();
        let bits_a: Vec<u32> = a.to_vec().iter().map(|v| v.to_bits()).collect();
        let bits_b: Vec<u32> = b.to_vec().iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits_a, bits_b);
        assert_eq!(a.shape(), [1, 32, 32]);
    }

    #[test]
    fn center_crop_removes_equal_margins() {
        // 6×6 working image, crop 4 → margins of 1 on each side.
        let mut pixels = vec![0u8; 36];
        for (i, p) in pixels.iter_mut().enumerate() {
            *p = i as u8;
        }
        let img = RawImage::new(6, 6, 1, pixels).unwrap();
        let crop = img.crop(1, 1, 4, 4).unwrap();
        let stats = DatasetStats::unit();
        let via_transform = eval_transform(&img, 6, 4, &stats).unwrap();
        let direct = standardize(&crop, &stats);
        assert_eq!(via_transform.to_vec(), direct.to_vec());
    }

    #[test]
    fn augment_shape_contract_and_constant_zeroing() {
        let img = RawImage::constant(48, 48, 1, 102).unwrap();
        // Stats matching the constant image: μ = 102/255.
        let stats = DatasetStats { mean: 102.0 / 255.0, std: 0.5, pixel_count: 1 };
        let mut rng = SeedRng::from_seed(11);
        let out = train_augment(&img, 36, 32, (0.4, 1.0), &stats, &mut rng).unwrap();
        assert_eq!(out.shape(), [1, 32, 32]);
        assert!(out.data().iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn degenerate_augment_equals_eval_transform() {
        let mut rng = SeedRng::from_seed(5);
        let pixels: Vec<u8> = (0..50 * 50).map(|_| rng.range_usize(256) as u8).collect();
        let img = RawImage::new(50, 50, 1, pixels).unwrap();
        let stats = DatasetStats { mean: 0.45, std: 0.21, pixel_count: 1 };

        // Find a seed whose two flip draws are both false; with working ==
        // out size the scale-[1,1] crop falls back to the full image and the
        // pipelines coincide.
        let mut flip_free_seed = None;
        for seed in 0..64 {
            let mut probe = SeedRng::from_seed(seed);
            let mut r = SeedRng::from_seed(seed);
            // Consume the same draws train_augment would: 10 failed attempts
            // (2 draws each) and no x/y draw, then two flips.
            for _ in 0..20 {
                probe.uniform();
            }
            let flips = (probe.bernoulli(0.5), probe.bernoulli(0.5));
            if !flips.0 && !flips.1 {
                flip_free_seed = Some(seed);
                let aug = train_augment(&img, 32, 32, (1.0, 1.0), &stats, &mut r).unwrap();
                let eval = eval_transform(&img, 32, 32, &stats).unwrap();
                assert_eq!(aug.to_vec(), eval.to_vec());
                break;
            }
        }
        assert!(flip_free_seed.is_some(), "no flip-free seed in range");
    }

    #[test]
    fn augment_is_reproducible_from_seed() {
        let mut rng = SeedRng::from_seed(5);
        let pixels: Vec<u8> = (0..64 * 64).map(|_| rng.range_usize(256) as u8).collect();
        let img = RawImage::new(64, 64, 1, pixels).unwrap();
        let stats = DatasetStats { mean: 0.5, std: 0.25, pixel_count: 1 };
        let run = |seed: u64| {
            let mut r = SeedRng::from_seed(seed);
            train_augment(&img, 36, 32, (0.4, 1.0), &stats, &mut r).unwrap().to_vec()
        };
        assert_eq!(run(77), run(77));
        assert_ne!(run(77), run(78));
    }

    #[test]
    fn stats_reject_constant_datasets() {
        let dir = tempfile::tempdir().unwrap();
        let img = RawImage::constant(16, 16, 1, 128).unwrap();
        let p = dir.path().join("c.png");
        save_png(&img, &p).unwrap();
        let err = compute_dataset_stats(&[&p], 16).unwrap_err().to_string();
        assert!(err.contains("standard deviation"), "{err}");
    }

    #[test]
    fn stats_match_two_pass_oracle_on_single_image() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = SeedRng::from_seed(9);
        let pixels: Vec<u8> = (0..24 * 24).map(|_| rng.range_usize(256) as u8).collect();
        let img = RawImage::new(24, 24, 1, pixels.clone()).unwrap();
        let p = dir.path().join("i.png");
        save_png(&img, &p).unwrap();
        let stats = compute_dataset_stats(&[&p], 24).unwrap();

        // Two-pass oracle on the same preprocessed pixels.
        let values: Vec<f64> = pixels.iter().map(|&v| v as f64 / 255.0).collect();
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / values.len() as f64;
        assert!((stats.mean - mean).abs() < 1e-12);
        assert!((stats.std - var.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn stats_are_order_independent() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = SeedRng::from_seed(13);
        let mut paths = Vec::new();
        for i in 0..4 {
            let pixels: Vec<u8> = (0..16 * 16).map(|_| rng.range_usize(256) as u8).collect();
            let img = RawImage::new(16, 16, 1, pixels).unwrap();
            let p = dir.path().join(format!("{i}.png"));
            save_png(&img, &p).unwrap();
            paths.push(p);
        }
        let forward = compute_dataset_stats(&paths, 16).unwrap();
        let mut reversed = paths.clone();
        reversed.reverse();
        let backward = compute_dataset_stats(&reversed, 16).unwrap();
        assert!((forward.mean - backward.mean).abs() < 1e-6);
        assert!((forward.std - backward.std).abs() < 1e-6);
    }

    #[test]
    fn png_roundtrip_preserves_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = SeedRng::from_seed(21);
        let pixels: Vec<u8> = (0..12 * 9).map(|_| rng.range_usize(256) as u8).collect();
        let img = RawImage::new(12, 9, 1, pixels).unwrap();
        let p = dir.path().join("rt.png");
        save_png(&img, &p).unwrap();
        let back = load_image(&p).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn pnm_files_load() {
        let dir = tempfile::tempdir().unwrap();
        // Binary PGM (P5), 3×2, maxval 255.
        let pgm = b"P5\n3 2\n255\n\x00\x7f\xff\x10\x20\x30";
        let p = dir.path().join("img.pgm");
        std::fs::write(&p, pgm).unwrap();
        let img = load_image(&p).unwrap();
        assert_eq!((img.width, img.height, img.channels), (3, 2, 1));
        assert_eq!(img.pixels, vec![0x00, 0x7f, 0xff, 0x10, 0x20, 0x30]);
    }
}
