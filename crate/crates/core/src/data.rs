//! Labelled image datasets on disk, a procedural shapes dataset, and input normalization.
//!
//! Images are held as `[N, C, H, W]` floats in `[0, 1]`.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use dfq_autograd::{Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rand::SeedableRng;
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// File name used when a dataset directory holds a single packed tensor file.
pub const PACKED_FILE: &str = "packed.safetensors";

static DATASET_READS: AtomicUsize = AtomicUsize::new(0);

/// Number of dataset loads performed by this process so far.
pub fn dataset_read_count() -> usize {
    DATASET_READS.load(Ordering::SeqCst)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>) -> Result<Self> {
        if images.rank() != 4 || images.dim(0) != labels.len() {
            return Err(Error::Dataset(format!(
                "images {:?} do not match {} labels",
                images.shape(),
                labels.len()
            )));
        }
        Ok(Self { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }
}

/// Loads a packed tensor file, a directory holding one, or a class-per-subfolder PNG tree.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    DATASET_READS.fetch_add(1, Ordering::SeqCst);
    if path.is_file() {
        return load_packed(path);
    }
    if !path.is_dir() {
        return Err(Error::DatasetNotFound(path.to_path_buf()));
    }
    let packed = path.join(PACKED_FILE);
    if packed.is_file() {
        return load_packed(&packed);
    }
    load_image_tree(path)
}

fn load_packed(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let st = SafeTensors::deserialize(&bytes).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    let images = st
        .tensor("images")
        .map_err(|_| Error::Dataset(format!("{}: missing `images`", path.display())))?;
    let labels = st
        .tensor("labels")
        .map_err(|_| Error::Dataset(format!("{}: missing `labels`", path.display())))?;
    let shape = images.shape().to_vec();
    let pixels: Vec<f32> = match images.dtype() {
        Dtype::U8 => images.data().iter().map(|&b| b as f32 / 255.0).collect(),
        Dtype::F32 => images
            .data()
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
        other => return Err(Error::Dataset(format!("unsupported image dtype {other:?}"))),
    };
    let labels: Vec<usize> = match labels.dtype() {
        Dtype::I64 => labels
            .data()
            .chunks_exact(8)
            .map(|c| i64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .map(|v| usize::try_from(v).map_err(|_| Error::Dataset(format!("negative label {v}"))))
            .collect::<Result<_>>()?,
        Dtype::U8 => labels.data().iter().map(|&b| b as usize).collect(),
        other => return Err(Error::Dataset(format!("unsupported label dtype {other:?}"))),
    };
    Dataset::new(Tensor::new(&shape, pixels)?, labels)
}

fn load_image_tree(root: &Path) -> Result<Dataset> {
    let mut classes: Vec<PathBuf> = read_dir_sorted(root)?.into_iter().filter(|p| p.is_dir()).collect();
    classes.sort();
    if classes.is_empty() {
        return Err(Error::DatasetNotFound(root.to_path_buf()));
    }
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    let mut dims = None;
    for (label, dir) in classes.iter().enumerate() {
        for file in read_dir_sorted(dir)? {
            if file.extension().and_then(|e| e.to_str()) != Some("png") {
                continue;
            }
            let img = image::open(&file)
                .map_err(|e| Error::Dataset(format!("{}: {e}", file.display())))?
                .to_rgb8();
            let (w, h) = img.dimensions();
            if *dims.get_or_insert((w, h)) != (w, h) {
                return Err(Error::Dataset(format!("{}: inconsistent image size", file.display())));
            }
            for c in 0..3 {
                for y in 0..h {
                    for x in 0..w {
                        pixels.push(img.get_pixel(x, y)[c] as f32 / 255.0);
                    }
                }
            }
            labels.push(label);
        }
    }
    let (w, h) = dims.ok_or_else(|| Error::DatasetNotFound(root.to_path_buf()))?;
    Dataset::new(Tensor::new(&[labels.len(), 3, h as usize, w as usize], pixels)?, labels)
}

fn read_dir_sorted(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    entries.sort();
    Ok(entries)
}

/// Writes `data` as a packed tensor file (8-bit images, i64 labels).
pub fn save_packed(data: &Dataset, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = data
        .images
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let labels: Vec<u8> = data.labels.iter().flat_map(|&l| (l as i64).to_le_bytes()).collect();
    let err = |e: safetensors::SafeTensorError| Error::Dataset(e.to_string());
    let views = vec![
        ("images", TensorView::new(Dtype::U8, data.images.shape().to_vec(), &bytes).map_err(err)?),
        ("labels", TensorView::new(Dtype::I64, vec![data.labels.len()], &labels).map_err(err)?),
    ];
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let meta: HashMap<String, String> = HashMap::from([("format".into(), "dfq-dataset-v1".into())]);
    safetensors::serialize_to_file(views, &Some(meta), path).map_err(err)
}

pub const SHAPE_CLASSES: [&str; 10] = [
    "circle", "ring", "square", "frame", "triangle", "plus", "cross", "hbars", "vbars", "diamond",
];

fn inside(class: usize, u: f32, v: f32) -> bool {
    let r = (u * u + v * v).sqrt();
    let box_r = u.abs().max(v.abs());
    match class {
        0 => r < 0.8,
        1 => r > 0.5 && r < 0.85,
        2 => box_r < 0.7,
        3 => box_r > 0.45 && box_r < 0.8,
        4 => v > -0.8 && v < 0.7 && u.abs() < (v + 0.8) * 0.55,
        5 => (u.abs() < 0.22 && v.abs() < 0.85) || (v.abs() < 0.22 && u.abs() < 0.85),
        6 => box_r < 0.85 && ((u - v).abs() < 0.3 || (u + v).abs() < 0.3),
        7 => u.abs() < 0.85 && ((v - 0.4).abs() < 0.18 || (v + 0.4).abs() < 0.18),
        8 => v.abs() < 0.85 && ((u - 0.4).abs() < 0.18 || (u + 0.4).abs() < 0.18),
        _ => u.abs() + v.abs() < 0.85,
    }
}

fn luminance(c: &[f32; 3]) -> f32 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

fn random_color(rng: &mut impl Rng) -> [f32; 3] {
    [rng.gen(), rng.gen(), rng.gen()]
}

/// Renders one shape with random colors, placement, size and pixel noise.
pub fn render_shape(class: usize, size: usize, rng: &mut impl Rng) -> Vec<f32> {
    let bg = random_color(rng);
    let fg = loop {
        let c = random_color(rng);
        if (luminance(&c) - luminance(&bg)).abs() > 0.25 {
            break c;
        }
    };
    let s = size as f32;
    let half = s * rng.gen_range(0.28..0.42);
    let cx = s / 2.0 + rng.gen_range(-0.12..0.12) * s;
    let cy = s / 2.0 + rng.gen_range(-0.12..0.12) * s;
    let noise = Normal::new(0.0f32, 0.04).expect("valid std");
    let mut coverage = vec![0.0f32; size * size];
    for y in 0..size {
        for x in 0..size {
            let mut hits = 0;
            for sy in [0.25, 0.75] {
                for sx in [0.25, 0.75] {
                    let u = (x as f32 + sx - cx) / half;
                    let v = (y as f32 + sy - cy) / half;
                    hits += inside(class, u, v) as u32;
                }
            }
            coverage[y * size + x] = hits as f32 / 4.0;
        }
    }
    let mut out = vec![0.0f32; 3 * size * size];
    for c in 0..3 {
        for (i, &a) in coverage.iter().enumerate() {
            let v = a * fg[c] + (1.0 - a) * bg[c] + noise.sample(rng);
            out[c * size * size + i] = v.clamp(0.0, 1.0);
        }
    }
    out
}

/// Balanced procedural dataset of the ten [`SHAPE_CLASSES`], deterministic given `seed`.
pub fn synthetic_shapes(n: usize, size: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pixels = Vec::with_capacity(n * 3 * size * size);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % SHAPE_CLASSES.len();
        pixels.extend(render_shape(class, size, &mut rng));
        labels.push(class);
    }
    Dataset::new(Tensor::new(&[n, 3, size, size], pixels).expect("sized above"), labels).expect("consistent")
}

/// Per-channel input statistics the teacher was trained with.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalizer {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Default for Normalizer {
    fn default() -> Self {
        Self {
            mean: vec![0.5; 3],
            std: vec![0.25; 3],
        }
    }
}

impl Normalizer {
    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.mean.len() != channels || self.std.len() != channels {
            return Err(Error::validation(
                "normalization",
                format!("mean and std need {channels} entries"),
            ));
        }
        if self.std.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::validation("normalization.std", "entries must be positive"));
        }
        Ok(())
    }

    /// `(x - mean) / std` for images in `[0, 1]`.
    pub fn apply_unit(&self, tape: &mut Tape, x: Var) -> Var {
        let scale: Vec<f32> = self.std.iter().map(|s| 1.0 / s).collect();
        let shift: Vec<f32> = self.mean.iter().zip(&self.std).map(|(m, s)| -m / s).collect();
        tape.channel_affine(x, &scale, &shift)
    }

    /// Maps generator output in `[-1, 1]` to `[0, 1]`, then normalizes.
    pub fn apply_signed(&self, tape: &mut Tape, x: Var) -> Var {
        let scale: Vec<f32> = self.std.iter().map(|s| 0.5 / s).collect();
        let shift: Vec<f32> = self.mean.iter().zip(&self.std).map(|(m, s)| (0.5 - m) / s).collect();
        tape.channel_affine(x, &scale, &shift)
    }

    pub fn normalize_unit(&self, images: &Tensor) -> Tensor {
        let mut tape = Tape::new();
        let x = tape.constant(images.clone());
        let y = self.apply_unit(&mut tape, x);
        tape.value(y).clone()
    }
}
