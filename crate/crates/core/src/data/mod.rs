//! Samples, the synthetic phantom generator, model-space conversion,
//! photometric augmentation, batching and the on-disk manifest.

mod io;
mod synth;

use std::path::PathBuf;

use mhmtl_autograd::Tensor;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::losses::Targets;
use crate::task::{ConfigError, TaskKind, TaskSpec};

pub use io::{load_manifest, read_gray, save_dataset, write_gray, Manifest, MANIFEST_FILE};
pub use synth::{generate, generate_with_masks, sample_seed, SizeRange};

#[derive(Debug, Error)]
pub enum DataError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("sample `{id}`: file {path} is missing")]
    MissingFile { id: String, path: PathBuf },
    #[error("{path}:{line}: malformed record: {reason}")]
    Malformed { path: PathBuf, line: usize, reason: String },
    #[error("sample `{id}` references unknown subtask `{subtask}`")]
    UnknownSubtask { id: String, subtask: String },
    #[error("cannot read image {path}: {reason}")]
    Image { path: PathBuf, reason: String },
    #[error("sample `{id}`: {reason}")]
    Label { id: String, reason: String },
    #[error("batch mixes subtasks `{first}` and `{other}`")]
    MixedBatch { first: String, other: String },
    #[error("empty batch")]
    EmptyBatch,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl DataError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}

/// 8-bit grayscale raster, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self, DataError> {
        if height == 0 || width == 0 || pixels.len() != height * width {
            return Err(DataError::Image {
                path: PathBuf::new(),
                reason: format!("{height}x{width} image with {} pixels", pixels.len()),
            });
        }
        Ok(Self { height, width, pixels })
    }

    pub fn size(&self) -> [usize; 2] {
        [self.height, self.width]
    }

    /// Pixels scaled to `[0, 1]`.
    pub fn to_unit(&self) -> Vec<f32> {
        self.pixels.iter().map(|&p| p as f32 / 255.0).collect()
    }
}

/// Ground truth at original resolution.
#[derive(Debug, Clone, PartialEq)]
pub enum Label {
    /// Class index per pixel, same size as the image.
    Mask(Vec<u8>),
    Class(usize),
    /// Normalized `(cx, cy, w, h)`.
    Box([f64; 4]),
    /// `(x, y)` in original pixels.
    Keypoints(Vec<[f64; 2]>),
}

impl Label {
    pub fn kind(&self) -> TaskKind {
        match self {
            Label::Mask(_) => TaskKind::Segmentation,
            Label::Class(_) => TaskKind::Classification,
            Label::Box(_) => TaskKind::Detection,
            Label::Keypoints(_) => TaskKind::Regression,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub subtask_id: String,
    pub image: GrayImage,
    pub label: Label,
}

impl Sample {
    /// `(H₀, W₀)`.
    pub fn orig_size(&self) -> [usize; 2] {
        self.image.size()
    }

    /// Checks the label against its task and the image geometry.
    pub fn validate(&self, task: &TaskSpec) -> Result<(), DataError> {
        let err = |reason: String| DataError::Label {
            id: self.id.clone(),
            reason,
        };
        if self.label.kind() != task.kind {
            return Err(err(format!("{} label for {} task", self.label.kind(), task.kind)));
        }
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        match &self.label {
            Label::Mask(m) => {
                if m.len() != self.image.pixels.len() {
                    return Err(err(format!("mask has {} pixels, image {}", m.len(), self.image.pixels.len())));
                }
                if let Some(v) = m.iter().find(|&&v| v as usize >= task.num_classes()) {
                    return Err(err(format!("mask value {v} >= {} classes", task.num_classes())));
                }
            }
            Label::Class(c) if *c >= task.num_classes() => {
                return Err(err(format!("class {c} >= {} classes", task.num_classes())))
            }
            Label::Box(b) if !b.iter().all(|&v| unit(v)) => {
                return Err(err(format!("box {b:?} outside [0, 1]")))
            }
            Label::Keypoints(k) if k.len() != task.num_keypoints() => {
                return Err(err(format!("{} keypoints, task expects {}", k.len(), task.num_keypoints())))
            }
            _ => {}
        }
        Ok(())
    }
}

/// Label in network space.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelLabel {
    /// Class map at model resolution.
    Mask(Vec<u8>),
    Class(usize),
    Box([f64; 4]),
    /// Normalized `(x/W₀, y/H₀)`.
    Keypoints(Vec<[f64; 2]>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSample {
    pub id: String,
    pub subtask_id: String,
    /// `[0, 1]` intensities at model resolution.
    pub image: Vec<f32>,
    pub label: ModelLabel,
    pub orig_size: [usize; 2],
}

/// Bilinear resize of a `[0, 1]` image with half-pixel centre alignment.
pub fn resize_bilinear(src: &[f32], from: [usize; 2], to: [usize; 2]) -> Vec<f32> {
    let [sh, sw] = from;
    let [dh, dw] = to;
    let axis = |d: usize, dn: usize, sn: usize| {
        let s = ((d as f64 + 0.5) * sn as f64 / dn as f64 - 0.5).clamp(0.0, (sn - 1) as f64);
        let lo = s.floor() as usize;
        (lo, (lo + 1).min(sn - 1), (s - lo as f64) as f32)
    };
    let cols: Vec<_> = (0..dw).map(|x| axis(x, dw, sw)).collect();
    let mut out = Vec::with_capacity(dh * dw);
    for y in 0..dh {
        let (y0, y1, fy) = axis(y, dh, sh);
        for &(x0, x1, fx) in &cols {
            let top = src[y0 * sw + x0] * (1.0 - fx) + src[y0 * sw + x1] * fx;
            let bot = src[y1 * sw + x0] * (1.0 - fx) + src[y1 * sw + x1] * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    out
}

/// Nearest-neighbour resize; never invents values.
pub fn resize_nearest<T: Copy>(src: &[T], from: [usize; 2], to: [usize; 2]) -> Vec<T> {
    let [sh, sw] = from;
    let [dh, dw] = to;
    let pick = |d: usize, dn: usize, sn: usize| (((d as f64 + 0.5) * sn as f64 / dn as f64).floor() as usize).min(sn - 1);
    let cols: Vec<usize> = (0..dw).map(|x| pick(x, dw, sw)).collect();
    let mut out = Vec::with_capacity(dh * dw);
    for y in 0..dh {
        let row = pick(y, dh, sh) * sw;
        out.extend(cols.iter().map(|&x| src[row + x]));
    }
    out
}

/// Brings a sample to network resolution: bilinear image, nearest mask,
/// keypoints normalized by the original size. Boxes and classes are already
/// resolution-free.
pub fn resize_to_model(sample: &Sample, model_size: [usize; 2]) -> ModelSample {
    let from = sample.orig_size();
    let [h0, w0] = from;
    let label = match &sample.label {
        Label::Mask(m) => ModelLabel::Mask(resize_nearest(m, from, model_size)),
        Label::Class(c) => ModelLabel::Class(*c),
        Label::Box(b) => ModelLabel::Box(*b),
        Label::Keypoints(k) => ModelLabel::Keypoints(k.iter().map(|p| [p[0] / w0 as f64, p[1] / h0 as f64]).collect()),
    };
    ModelSample {
        id: sample.id.clone(),
        subtask_id: sample.subtask_id.clone(),
        image: resize_bilinear(&sample.image.to_unit(), from, model_size),
        label,
        orig_size: from,
    }
}

/// Photometric augmentation of a `[0, 1]` image: brightness shift
/// `U(−0.2, 0.2)`, contrast scale `U(0.8, 1.2)` about the mean, and Gaussian
/// noise with `σ ~ U(0, 0.03)`, each applied with probability 0.5, then
/// clamped. Identity when `train` is false.
pub fn augment<R: Rng + ?Sized>(image: &mut [f32], rng: &mut R, train: bool) {
    if !train || image.is_empty() {
        return;
    }
    if rng.random_bool(0.5) {
        let shift = rng.random_range(-0.2f32..0.2);
        image.iter_mut().for_each(|v| *v += shift);
    }
    if rng.random_bool(0.5) {
        let scale = rng.random_range(0.8f32..1.2);
        let mean = image.iter().sum::<f32>() / image.len() as f32;
        image.iter_mut().for_each(|v| *v = mean + (*v - mean) * scale);
    }
    if rng.random_bool(0.5) {
        let sigma = rng.random_range(0.0f32..0.03);
        if let Ok(noise) = Normal::new(0.0f32, sigma) {
            image.iter_mut().for_each(|v| *v += noise.sample(rng));
        }
    }
    image.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
}

/// One task-homogeneous minibatch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub subtask_id: String,
    pub ids: Vec<String>,
    /// `[N, 1, H, W]`.
    pub images: Tensor<f32>,
    pub targets: Targets,
}

impl Batch {
    /// Stacks `H×W` model-space samples into a batch. `images` overrides the
    /// sample images (augmented copies); all samples must share one subtask.
    pub fn collate(
        samples: &[&ModelSample],
        images: Option<Vec<Vec<f32>>>,
        size: [usize; 2],
    ) -> Result<Self, DataError> {
        let first = samples.first().ok_or(DataError::EmptyBatch)?;
        if let Some(other) = samples.iter().find(|s| s.subtask_id != first.subtask_id) {
            return Err(DataError::MixedBatch {
                first: first.subtask_id.clone(),
                other: other.subtask_id.clone(),
            });
        }
        let [h, w] = size;
        let images = images.unwrap_or_else(|| samples.iter().map(|s| s.image.clone()).collect());
        let mut data = Vec::with_capacity(samples.len() * h * w);
        for (s, img) in samples.iter().zip(&images) {
            if img.len() != h * w {
                return Err(DataError::Label {
                    id: s.id.clone(),
                    reason: format!("image has {} pixels, model expects {h}x{w}", img.len()),
                });
            }
            data.extend_from_slice(img);
        }
        let mismatch = |s: &ModelSample| DataError::Label {
            id: s.id.clone(),
            reason: format!("label kind differs within subtask `{}`", first.subtask_id),
        };
        let targets = match &first.label {
            ModelLabel::Mask(_) => {
                let mut all = Vec::with_capacity(samples.len() * h * w);
                for s in samples {
                    match &s.label {
                        ModelLabel::Mask(m) if m.len() == h * w => all.extend_from_slice(m),
                        _ => return Err(mismatch(s)),
                    }
                }
                Targets::Masks(all)
            }
            ModelLabel::Class(_) => Targets::Classes(
                samples
                    .iter()
                    .map(|s| match s.label {
                        ModelLabel::Class(c) => Ok(c),
                        _ => Err(mismatch(s)),
                    })
                    .collect::<Result<_, _>>()?,
            ),
            ModelLabel::Box(_) => Targets::Boxes(
                samples
                    .iter()
                    .map(|s| match s.label {
                        ModelLabel::Box(b) => Ok(b),
                        _ => Err(mismatch(s)),
                    })
                    .collect::<Result<_, _>>()?,
            ),
            ModelLabel::Keypoints(_) => {
                let mut all = Vec::new();
                for s in samples {
                    match &s.label {
                        ModelLabel::Keypoints(k) => all.extend(k.iter().flatten()),
                        _ => return Err(mismatch(s)),
                    }
                }
                Targets::Keypoints(all)
            }
        };
        Ok(Self {
            subtask_id: first.subtask_id.clone(),
            ids: samples.iter().map(|s| s.id.clone()).collect(),
            images: Tensor::new(&[samples.len(), 1, h, w], data).expect("image sizes checked above"),
            targets,
        })
    }
}
