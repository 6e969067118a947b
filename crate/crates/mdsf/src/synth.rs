//! Synthetic speckled sonar-like scenes: a low-frequency background under
//! multiplicative exponential speckle, with Gaussian-blob targets of 3–12 px
//! extent. Everything is a deterministic function of the seed.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};

use crate::error::{Error, Result};
use crate::losses::BBox;
use crate::tensor::{io, Graph};

#[derive(Debug, Clone)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub target_count: usize,
    pub num_classes: usize,
    /// Mean background intensity.
    pub background_level: f64,
    /// Blob amplitude as a multiple of the background level.
    pub contrast: f64,
    /// 0 disables speckle; 1 is full single-look exponential gain.
    pub speckle_strength: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            height: 64,
            width: 64,
            target_count: 3,
            num_classes: 2,
            background_level: 0.2,
            contrast: 3.0,
            speckle_strength: 0.5,
        }
    }
}

/// One generated scene; boxes are in normalized coordinates and lie fully
/// inside the image.
#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub image: Vec<f64>,
    pub height: usize,
    pub width: usize,
    pub boxes: Vec<BBox>,
    pub classes: Vec<usize>,
    pub seed: u64,
}

/// Blob extents in pixels: boxes are tight to the 2σ radius, so the side is
/// 4σ and σ ranges over [3/4, 3].
const SIGMA_MIN: f64 = 0.75;
const SIGMA_MAX: f64 = 3.0;

pub fn generate_scene(cfg: &SceneConfig, seed: u64) -> Result<SyntheticScene> {
    if cfg.contrast <= 0.0 {
        return Err(Error::Config("contrast must be positive".into()));
    }
    if cfg.num_classes == 0 {
        return Err(Error::Config("need at least one class".into()));
    }
    let (h, w) = (cfg.height, cfg.width);
    let max_side = 4.0 * SIGMA_MAX;
    if cfg.target_count > 0 && ((h as f64) < max_side + 2.0 || (w as f64) < max_side + 2.0) {
        return Err(Error::Generation(format!(
            "{h}x{w} image cannot fit targets up to {max_side} px"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // low-frequency background: a coarse uniform grid upsampled bilinearly,
    // mean equal to the configured level
    let (gh, gw) = ((h / 16).max(2), (w / 16).max(2));
    let coarse: Vec<f64> = (0..gh * gw)
        .map(|_| cfg.background_level * rng.random_range(0.5..1.5))
        .collect();
    let graph = Graph::new();
    let mut image = graph
        .tensor(&[1, gh, gw], coarse)
        .bilinear_resize(h, w)
        .value();

    // multiplicative speckle with unit-mean gain
    if cfg.speckle_strength > 0.0 {
        let exp = Exp::new(1.0).expect("rate 1");
        let s = cfg.speckle_strength;
        for px in image.iter_mut() {
            let gain = (1.0 - s) + s * exp.sample(&mut rng);
            *px *= gain;
        }
    }

    // additive Gaussian-blob targets, tight 2σ boxes
    let mut boxes = Vec::with_capacity(cfg.target_count);
    let mut classes = Vec::with_capacity(cfg.target_count);
    for _ in 0..cfg.target_count {
        let sigma = rng.random_range(SIGMA_MIN..SIGMA_MAX);
        let margin = 2.0 * sigma + 0.5;
        let cx = rng.random_range(margin..w as f64 - margin);
        let cy = rng.random_range(margin..h as f64 - margin);
        let amp = cfg.contrast * cfg.background_level;
        for y in 0..h {
            for x in 0..w {
                let dy = (y as f64 + 0.5) - cy;
                let dx = (x as f64 + 0.5) - cx;
                let r_sq = dx * dx + dy * dy;
                image[y * w + x] += amp * (-r_sq / (2.0 * sigma * sigma)).exp();
            }
        }
        boxes.push(BBox::new(
            cx / w as f64,
            cy / h as f64,
            4.0 * sigma / w as f64,
            4.0 * sigma / h as f64,
        )?);
        classes.push(rng.random_range(0..cfg.num_classes));
    }

    for px in image.iter_mut() {
        *px = px.clamp(0.0, 1.0);
    }
    Ok(SyntheticScene {
        image,
        height: h,
        width: w,
        boxes,
        classes,
        seed,
    })
}

impl SyntheticScene {
    /// Write the image as a TNSR1 tensor plus a sidecar text annotation file:
    /// one `class c_x c_y w h` line per box.
    pub fn export(&self, image_path: &Path, annotation_path: &Path) -> Result<()> {
        io::write_tensor_file(image_path, &[1, self.height, self.width], &self.image)?;
        let mut text = String::new();
        for (b, &c) in self.boxes.iter().zip(&self.classes) {
            text.push_str(&format!("{c} {} {} {} {}\n", b.cx, b.cy, b.w, b.h));
        }
        std::fs::write(annotation_path, text)?;
        Ok(())
    }

    pub fn import(image_path: &Path, annotation_path: &Path) -> Result<SyntheticScene> {
        let (shape, image) = io::read_tensor_file(image_path)?;
        if shape.len() != 3 || shape[0] != 1 {
            return Err(Error::Format(format!(
                "expected a [1,H,W] scene tensor, got {shape:?}"
            )));
        }
        let mut boxes = Vec::new();
        let mut classes = Vec::new();
        for line in std::fs::read_to_string(annotation_path)?.lines() {
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 5 {
                return Err(Error::Format(format!("bad annotation line: {line}")));
            }
            let parse = |s: &str| -> Result<f64> {
                s.parse()
                    .map_err(|_| Error::Format(format!("bad number in annotation: {s}")))
            };
            classes.push(fields[0]
                .parse::<usize>()
                .map_err(|_| Error::Format(format!("bad class in annotation: {line}")))?);
            boxes.push(BBox::new(
                parse(fields[1])?,
                parse(fields[2])?,
                parse(fields[3])?,
                parse(fields[4])?,
            )?);
        }
        Ok(SyntheticScene {
            image,
            height: shape[1],
            width: shape[2],
            boxes,
            classes,
            seed: 0,
        })
    }
}
