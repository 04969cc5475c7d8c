//! Synthetic lesion dataset: darker elliptical lesions on a brighter
//! background with softened boundaries and speckle noise, plus
//! manifest-driven loading of PGM/PPM image–mask pairs.
//!
//! Every sample is generated from its own RNG stream seeded with
//! `seed ⊕ index`, so serial and parallel generation produce byte-identical
//! files and any single sample can be regenerated in isolation.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::pnm::{self, GrayImage};
use crate::tensor::Tensor;

/// Parameters of the synthetic lesion generator.
#[derive(Clone, Debug)]
pub struct SyntheticSpec {
    pub count: usize,
    /// Square image side length in pixels.
    pub resolution: usize,
    /// Inclusive range of lesion (ellipse) count per image.
    pub ellipse_count: (usize, usize),
    /// Semi-axis lengths as a fraction of the resolution.
    pub radius_range: (f64, f64),
    /// Intensity gap between background and lesion interior.
    pub contrast_range: (f64, f64),
    /// Gaussian blur width in pixels applied to the image (never the mask);
    /// zero disables blurring.
    pub blur_sigma: f64,
    /// Multiplicative speckle noise amplitude; zero disables it.
    pub speckle_amplitude: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> SyntheticSpec {
        SyntheticSpec {
            count: 250,
            resolution: 64,
            ellipse_count: (1, 3),
            radius_range: (0.08, 0.30),
            contrast_range: (0.15, 0.6),
            blur_sigma: 1.2,
            speckle_amplitude: 0.04,
            seed: 7,
        }
    }
}

/// Background brightness range; lesions sit `contrast` below it.
const BACKGROUND_RANGE: (f64, f64) = (0.65, 0.90);

/// One image–mask pair. The image is (c, h, w) with values in [0,1]; the
/// mask is (1, h, w) with values exactly 0.0 or 1.0.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub image: Tensor,
    pub mask: Tensor,
}

/// A generated sample before quantization/serialization.
struct RawSample {
    image: Vec<f64>,
    mask: Vec<bool>,
}

fn generate_one(spec: &SyntheticSpec, index: usize) -> RawSample {
    let res = spec.resolution;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ index as u64);
    let background = rng.gen_range(BACKGROUND_RANGE.0..BACKGROUND_RANGE.1);
    let contrast = rng.gen_range(spec.contrast_range.0..spec.contrast_range.1);
    let lesions = rng.gen_range(spec.ellipse_count.0..=spec.ellipse_count.1);

    let mut mask = vec![false; res * res];
    let mut first_center = (0usize, 0usize);
    for lesion in 0..lesions {
        let cx = rng.gen_range(0.25..0.75) * res as f64;
        let cy = rng.gen_range(0.25..0.75) * res as f64;
        let a = rng.gen_range(spec.radius_range.0..spec.radius_range.1) * res as f64;
        let b = rng.gen_range(spec.radius_range.0..spec.radius_range.1) * res as f64;
        let theta = rng.gen_range(0.0..std::f64::consts::PI);
        if lesion == 0 {
            first_center = (
                (cx as usize).min(res - 1),
                (cy as usize).min(res - 1),
            );
        }
        let (sin, cos) = theta.sin_cos();
        for y in 0..res {
            for x in 0..res {
                let dx = (x as f64 + 0.5) - cx;
                let dy = (y as f64 + 0.5) - cy;
                let u = dx * cos + dy * sin;
                let v = -dx * sin + dy * cos;
                if (u / a).powi(2) + (v / b).powi(2) <= 1.0 {
                    mask[y * res + x] = true;
                }
            }
        }
    }
    // tiny resolutions can miss every pixel center; force the invariant
    if !mask.iter().any(|&m| m) {
        mask[first_center.1 * res + first_center.0] = true;
    }

    let lesion_value = background - contrast;
    let mut image: Vec<f64> = mask
        .iter()
        .map(|&m| if m { lesion_value } else { background })
        .collect();
    if spec.blur_sigma > 0.0 {
        image = gaussian_blur(&image, res, res, spec.blur_sigma);
    }
    for v in image.iter_mut() {
        let noise = rng.gen_range(-1.0..1.0);
        *v = (*v * (1.0 + spec.speckle_amplitude * noise)).clamp(0.0, 1.0);
    }
    RawSample { image, mask }
}

/// Separable Gaussian blur with kernel radius ⌈3σ⌉ and replicated borders.
fn gaussian_blur(src: &[f64], w: usize, h: usize, sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity(2 * radius as usize + 1);
    for i in -radius..=radius {
        kernel.push((-0.5 * (i as f64 / sigma).powi(2)).exp());
    }
    let norm: f64 = kernel.iter().sum();
    for k in kernel.iter_mut() {
        *k /= norm;
    }
    let clamp = |v: isize, hi: usize| v.clamp(0, hi as isize - 1) as usize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, k) in kernel.iter().enumerate() {
                let sx = clamp(x as isize + ki as isize - radius, w);
                acc += k * src[y * w + sx];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, k) in kernel.iter().enumerate() {
                let sy = clamp(y as isize + ki as isize - radius, h);
                acc += k * tmp[sy * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn sample_id(index: usize) -> String {
    format!("sample_{index:04}")
}

/// Generates `spec.count` image/mask PGM pairs plus `manifest.tsv` in
/// `out_dir`, creating the directory if needed. Deterministic per seed.
pub fn gen_data(spec: &SyntheticSpec, out_dir: &Path) -> Result<()> {
    if spec.resolution == 0 || spec.count == 0 {
        return Err(Error::Config("dataset needs count ≥ 1 and resolution ≥ 1".into()));
    }
    if spec.ellipse_count.0 == 0 || spec.ellipse_count.0 > spec.ellipse_count.1 {
        return Err(Error::Config(format!(
            "ellipse count range {:?} is empty or starts at zero",
            spec.ellipse_count
        )));
    }
    fs::create_dir_all(out_dir)?;
    let res = spec.resolution;
    let mut manifest = String::new();
    for i in 0..spec.count {
        let raw = generate_one(spec, i);
        let id = sample_id(i);
        let image_name = format!("{id}.pgm");
        let mask_name = format!("{id}_mask.pgm");
        let image = GrayImage::new(res, res, raw.image.iter().map(|&v| quantize(v)).collect())?;
        let mask = GrayImage::new(
            res,
            res,
            raw.mask.iter().map(|&m| if m { 255u8 } else { 0 }).collect(),
        )?;
        pnm::write_pgm(&out_dir.join(&image_name), &image)?;
        pnm::write_pgm(&out_dir.join(&mask_name), &mask)?;
        writeln!(manifest, "{id}\t{image_name}\t{mask_name}").expect("string write");
    }
    fs::write(out_dir.join("manifest.tsv"), manifest)?;
    Ok(())
}

/// Converts interleaved 8-bit pixels to a (c,h,w) tensor scaled to [0,1].
pub fn image_to_tensor(w: usize, h: usize, channels: usize, pixels: &[u8]) -> Tensor {
    let mut data = vec![0.0; channels * h * w];
    for y in 0..h {
        for x in 0..w {
            for c in 0..channels {
                data[c * h * w + y * w + x] = pixels[(y * w + x) * channels + c] as f64 / 255.0;
            }
        }
    }
    Tensor::from_parts(vec![channels, h, w], data)
}

fn mask_to_tensor(img: &GrayImage, what: &str) -> Result<Tensor> {
    let mut data = Vec::with_capacity(img.pixels.len());
    for (i, &p) in img.pixels.iter().enumerate() {
        match p {
            0 => data.push(0.0),
            255 => data.push(1.0),
            other => {
                return Err(Error::Data(format!(
                    "{what}: mask value {other} at pixel {i} is not 0 or 255"
                )))
            }
        }
    }
    Ok(Tensor::from_parts(vec![1, img.height, img.width], data))
}

/// Loads every manifest entry of a generated (or user-supplied) dataset
/// directory. Images may be PGM or PPM; masks must be PGM with values
/// exactly 0 or 255 and the same extents as their image.
pub fn load_dataset(dir: &Path) -> Result<Vec<Sample>> {
    let manifest_path = dir.join("manifest.tsv");
    let text = fs::read_to_string(&manifest_path)
        .map_err(|e| Error::Data(format!("{}: {e}", manifest_path.display())))?;
    let mut samples = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 3 {
            return Err(Error::Data(format!(
                "manifest line {}: expected 3 tab-separated fields, got {}",
                lineno + 1,
                parts.len()
            )));
        }
        let (id, image_rel, mask_rel) = (parts[0], parts[1], parts[2]);
        let (w, h, channels, pixels) = pnm::read_auto(&dir.join(image_rel))?;
        let mask_img = pnm::read_pgm(&dir.join(mask_rel))?;
        if (mask_img.width, mask_img.height) != (w, h) {
            return Err(Error::Data(format!(
                "{id}: image is {w}×{h} but mask is {}×{}",
                mask_img.width, mask_img.height
            )));
        }
        samples.push(Sample {
            id: id.to_string(),
            image: image_to_tensor(w, h, channels, &pixels),
            mask: mask_to_tensor(&mask_img, id)?,
        });
    }
    if samples.is_empty() {
        return Err(Error::Data(format!("{}: manifest lists no samples", manifest_path.display())));
    }
    Ok(samples)
}
