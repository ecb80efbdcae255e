//! Pixel-space augmentation and spherical feature interpolation.

mod slerp;

pub use slerp::{draw_slerp_pairs, sample_slerp_batch, slerp, slerp_rows, LabeledFeature, SlerpPair, DEGENERATE_SIN};

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::ModelRng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentPolicy {
    pub enable_blur: bool,
    pub enable_color: bool,
    pub enable_contrast: bool,
    pub vertical_flip: bool,
    /// Classes whose anatomy is left/right symmetric enough to mirror.
    pub horizontal_flip_classes: Vec<String>,
    pub enable_mask: bool,
    /// Side of each masked square, in pixels.
    pub mask_patch: usize,
    /// Target share of the image to mask.
    pub mask_fraction: f64,
    pub rng_seed: u64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            enable_blur: true,
            enable_color: true,
            enable_contrast: true,
            vertical_flip: true,
            horizontal_flip_classes: vec!["throat".into(), "vc-open".into(), "vc-closed".into()],
            enable_mask: true,
            mask_patch: 16,
            mask_fraction: 0.10,
            rng_seed: 7,
        }
    }
}

impl AugmentPolicy {
    /// Every augmentation switched off.
    pub fn none() -> Self {
        Self {
            enable_blur: false,
            enable_color: false,
            enable_contrast: false,
            vertical_flip: false,
            horizontal_flip_classes: Vec::new(),
            enable_mask: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mask_fraction > 0.0 && self.mask_fraction < 1.0) {
            return Err(Error::Config(format!("mask_fraction {} outside (0, 1)", self.mask_fraction)));
        }
        if self.mask_patch == 0 {
            return Err(Error::Config("mask_patch must be positive".into()));
        }
        Ok(())
    }
}

fn dims(image: &Tensor) -> Result<(usize, usize, usize)> {
    match image.shape() {
        [c, h, w] if h == w => Ok((*c, *h, *w)),
        s => Err(Error::Contract(format!("expected a square C×S×S image, got {s:?}"))),
    }
}

/// Applies a randomly drawn subset of the enabled augmentations, each with
/// probability ½, then patch masking when enabled. Deterministic in `rng`.
pub fn augment_image(image: &Tensor, class_name: &str, policy: &AugmentPolicy, rng: &mut ModelRng) -> Result<Tensor> {
    let (c, s, _) = dims(image)?;
    let mut out = image.clone();
    if policy.enable_blur && rng.random_bool(0.5) {
        out = box_blur(&out)?;
    }
    if policy.enable_color && rng.random_bool(0.5) {
        let plane = s * s;
        for ch in 0..c {
            let gain = rng.random_range(0.8..=1.2);
            for v in &mut out.data_mut()[ch * plane..(ch + 1) * plane] {
                *v = (*v * gain).clamp(0.0, 1.0);
            }
        }
    }
    if policy.enable_contrast && rng.random_bool(0.5) {
        let factor = rng.random_range(0.8..=1.2);
        let mean = out.data().iter().sum::<f64>() / out.numel() as f64;
        for v in out.data_mut() {
            *v = ((*v - mean) * factor + mean).clamp(0.0, 1.0);
        }
    }
    if policy.vertical_flip && rng.random_bool(0.5) {
        out = flip_vertical(&out)?;
    }
    if policy.horizontal_flip_classes.iter().any(|k| k == class_name) && rng.random_bool(0.5) {
        out = flip_horizontal(&out)?;
    }
    if policy.enable_mask {
        out = patch_mask(&out, policy.mask_patch, policy.mask_fraction, rng)?;
    }
    Ok(out)
}

/// 3×3 mean filter with edge clamping.
pub fn box_blur(image: &Tensor) -> Result<Tensor> {
    let (c, s, _) = dims(image)?;
    let src = image.data();
    let mut out = vec![0.0; src.len()];
    let clamp = |v: isize| v.clamp(0, s as isize - 1) as usize;
    for ch in 0..c {
        let base = ch * s * s;
        for y in 0..s {
            for x in 0..s {
                let mut acc = 0.0;
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        acc += src[base + clamp(y as isize + dy) * s + clamp(x as isize + dx)];
                    }
                }
                out[base + y * s + x] = acc / 9.0;
            }
        }
    }
    Tensor::new(image.shape(), out)
}

/// Mirrors the image top-to-bottom.
pub fn flip_vertical(image: &Tensor) -> Result<Tensor> {
    let (c, s, _) = dims(image)?;
    let src = image.data();
    let mut out = Vec::with_capacity(src.len());
    for ch in 0..c {
        for y in (0..s).rev() {
            let row = (ch * s + y) * s;
            out.extend_from_slice(&src[row..row + s]);
        }
    }
    Tensor::new(image.shape(), out)
}

/// Mirrors the image left-to-right.
pub fn flip_horizontal(image: &Tensor) -> Result<Tensor> {
    let (c, s, _) = dims(image)?;
    let src = image.data();
    let mut out = Vec::with_capacity(src.len());
    for ch in 0..c {
        for y in 0..s {
            let row = (ch * s + y) * s;
            out.extend(src[row..row + s].iter().rev());
        }
    }
    Tensor::new(image.shape(), out)
}

/// Number of grid patches `patch_mask` zeroes: `round(fraction · (S/patch)²)`.
pub fn masked_patch_count(side: usize, patch: usize, fraction: f64) -> usize {
    let grid = side / patch;
    (fraction * (grid * grid) as f64).round() as usize
}

/// Zeroes `round(fraction · (S/patch)²)` distinct grid-aligned squares,
/// chosen uniformly without replacement, across all channels.
pub fn patch_mask(image: &Tensor, patch: usize, fraction: f64, rng: &mut ModelRng) -> Result<Tensor> {
    let (c, s, _) = dims(image)?;
    if patch == 0 || s % patch != 0 {
        return Err(Error::Config(format!("image side {s} is not divisible by mask patch {patch}")));
    }
    let grid = s / patch;
    let count = masked_patch_count(s, patch, fraction).min(grid * grid);
    let mut out = image.clone();
    let data = out.data_mut();
    for cell in index::sample(rng, grid * grid, count) {
        let (gy, gx) = (cell / grid, cell % grid);
        for ch in 0..c {
            for y in gy * patch..(gy + 1) * patch {
                let row = (ch * s + y) * s + gx * patch;
                data[row..row + patch].fill(0.0);
            }
        }
    }
    Ok(out)
}
