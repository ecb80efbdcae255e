use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{Rgb, RgbImage};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Strategy;
use crate::objectives::{build_prompt, class_index, CLASS_NAMES};
use crate::rng::{derive_seed, seeded};
use crate::tensor::Tensor;

/// Pixels at or below this level in every channel count as border.
pub const BORDER_THRESHOLD: u8 = 10;

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub path: String,
    #[serde(rename = "Classification")]
    pub classification: String,
    #[serde(rename = "Type")]
    pub kind: String,
    #[serde(rename = "Description")]
    pub description: String,
    #[serde(rename = "DescriptionEN", default, skip_serializing_if = "Option::is_none")]
    pub description_en: Option<String>,
}

impl ManifestRecord {
    /// The record's training prompt.
    pub fn prompt(&self) -> Result<String> {
        build_prompt(&self.classification, self.description_en.as_deref())
    }
}

/// Validated manifest records with their labels and source lines.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub source: PathBuf,
    pub records: Vec<ManifestRecord>,
    pub labels: Vec<usize>,
    pub lines: Vec<usize>,
}

impl Manifest {
    /// Parses JSONL text; `source` names the file in errors and anchors
    /// relative image paths. Blank lines are skipped.
    pub fn parse(text: &str, source: &Path) -> Result<Self> {
        let mut m = Manifest {
            source: source.to_path_buf(),
            records: Vec::new(),
            labels: Vec::new(),
            lines: Vec::new(),
        };
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let err = |message: String| Error::Record {
                path: source.to_path_buf(),
                line: i + 1,
                message,
            };
            let rec: ManifestRecord = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
            let label = class_index(&rec.classification).map_err(|e| err(e.to_string()))?;
            m.records.push(rec);
            m.labels.push(label);
            m.lines.push(i + 1);
        }
        if m.records.is_empty() {
            log::warn!("manifest {} has no records", source.display());
        }
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Record {
            path: path.to_path_buf(),
            line: 0,
            message: e.to_string(),
        })?;
        Self::parse(&text, path)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serialises") + "\n")
            .collect()
    }

    pub fn image_path(&self, i: usize) -> PathBuf {
        let p = Path::new(&self.records[i].path);
        match self.source.parent() {
            Some(dir) if p.is_relative() => dir.join(p),
            _ => p.to_path_buf(),
        }
    }

    /// Loads and preprocesses every image, failing on the first bad record.
    pub fn load_images(&self, size: usize, exec: Strategy) -> Result<Vec<Tensor>> {
        exec.map(self.len(), |i| {
            load_image(&self.image_path(i), size).map_err(|e| Error::Record {
                path: self.source.clone(),
                line: self.lines[i],
                message: e.to_string(),
            })
        })
        .into_iter()
        .collect()
    }

    pub fn prompts(&self) -> Result<Vec<String>> {
        self.records.iter().map(ManifestRecord::prompt).collect()
    }
}

/// Reads an image as `[3 × size × size]` in `[0, 1]`: the bounding box of
/// non-border pixels is cropped out, then resized bilinearly.
pub fn load_image(path: &Path, size: usize) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok(preprocess(&img.to_rgb8(), size))
}

pub fn preprocess(img: &RgbImage, size: usize) -> Tensor {
    let cropped = crop_border(img);
    let resized = image::imageops::resize(&cropped, size as u32, size as u32, FilterType::Triangle);
    let plane = size * size;
    let mut data = vec![0.0; 3 * plane];
    for (x, y, px) in resized.enumerate_pixels() {
        for c in 0..3 {
            data[c * plane + y as usize * size + x as usize] = px[c] as f64 / 255.0;
        }
    }
    Tensor::new(&[3, size, size], data).expect("shape matches")
}

/// The maximal box of pixels brighter than [`BORDER_THRESHOLD`] in some
/// channel; the whole image when every pixel is border.
pub fn crop_border(img: &RgbImage) -> RgbImage {
    let (mut x0, mut y0, mut x1, mut y1) = (u32::MAX, u32::MAX, 0, 0);
    for (x, y, px) in img.enumerate_pixels() {
        if px.0.iter().any(|&c| c > BORDER_THRESHOLD) {
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
        }
    }
    if x0 == u32::MAX {
        return img.clone();
    }
    image::imageops::crop_imm(img, x0, y0, x1 - x0 + 1, y1 - y0 + 1).to_image()
}

fn pattern(class: usize, x: f64, y: f64, jitter: (f64, f64)) -> bool {
    let (u, v) = (x - jitter.0, y - jitter.1);
    match class {
        0 => u * u + v * v < 0.2,
        1 => ((x * 4.0).floor() as i64 + (y * 4.0).floor() as i64).rem_euclid(2) == 0,
        2 => ((y * 4.0).floor() as i64).rem_euclid(2) == 0,
        3 => ((x * 4.0).floor() as i64).rem_euclid(2) == 0,
        4 => (((x + y) * 3.0).floor() as i64).rem_euclid(2) == 0,
        5 => {
            let r = (u * u + v * v).sqrt();
            (0.35..0.6).contains(&r)
        }
        _ => u.abs() < 0.15 || v.abs() < 0.15,
    }
}

/// Renders one synthetic image of `class` on a `size × size` canvas with a
/// thin black frame.
pub fn synthetic_image(class: usize, size: usize, seed: u64) -> RgbImage {
    let mut rng = seeded(seed);
    let jitter = (rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1));
    let fg: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.6..1.0));
    let bg: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.1..0.35));
    let mut img = RgbImage::new(size as u32, size as u32);
    for (px, py, out) in img.enumerate_pixels_mut() {
        if px == 0 || py == 0 || px as usize == size - 1 || py as usize == size - 1 {
            *out = Rgb([0, 0, 0]);
            continue;
        }
        let x = 2.0 * (px as f64 + 0.5) / size as f64 - 1.0;
        let y = 2.0 * (py as f64 + 0.5) / size as f64 - 1.0;
        let base = if pattern(class, x, y, jitter) { fg } else { bg };
        *out = Rgb(std::array::from_fn(|c| {
            let noisy = base[c] + rng.random_range(-0.05..0.05);
            (noisy.clamp(0.0, 1.0) * 255.0).round() as u8
        }));
    }
    img
}

/// Writes `per_class` images for each class plus `manifest.jsonl` into
/// `dir`, returning the manifest path.
pub fn write_synthetic_dataset(dir: &Path, per_class: usize, size: usize, seed: u64) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let mut lines = String::new();
    for (c, name) in CLASS_NAMES.iter().enumerate() {
        for i in 0..per_class {
            let file = format!("{name}_{i:03}.png");
            let img = synthetic_image(c, size, derive_seed(seed, &[c as u64, i as u64]));
            img.save(dir.join(&file)).map_err(|e| Error::Image {
                path: dir.join(&file),
                message: e.to_string(),
            })?;
            let rec = ManifestRecord {
                path: file,
                classification: name.to_string(),
                kind: "synthetic".into(),
                description: format!("pattern {c}"),
                description_en: None,
            };
            lines.push_str(&serde_json::to_string(&rec).expect("record serialises"));
            lines.push('\n');
        }
    }
    let path = dir.join("manifest.jsonl");
    std::fs::write(&path, lines)?;
    Ok(path)
}
