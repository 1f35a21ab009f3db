//! Dataset directories: `manifest.jsonl` (a header line listing the tasks,
//! then one JSON record per sample), 8-bit grayscale PNG images and PNG
//! class-index masks.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use image::{ColorType, DynamicImage, ImageBuffer, Luma};
use serde::{Deserialize, Serialize};

use super::{DataError, GrayImage, Label, Sample};
use crate::task::TaskSpec;

pub const MANIFEST_FILE: &str = "manifest.jsonl";
const FORMAT: &str = "mhmtl-manifest";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    tasks: Vec<TaskSpec>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
enum LabelRecord {
    MaskPath(String),
    Class(usize),
    Box([f64; 4]),
    Keypoints(Vec<[f64; 2]>),
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: String,
    subtask_id: String,
    image_path: String,
    label: LabelRecord,
    /// `[H₀, W₀]`.
    orig_size: [usize; 2],
}

/// A loaded dataset, samples in manifest order.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub tasks: Vec<TaskSpec>,
    pub samples: Vec<Sample>,
}

impl Manifest {
    pub fn task(&self, id: &str) -> Option<&TaskSpec> {
        self.tasks.iter().find(|t| t.id == id)
    }
}

fn file_stem(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
        .collect()
}

fn write_png(path: &Path, height: usize, width: usize, pixels: &[u8]) -> Result<(), DataError> {
    let buf: ImageBuffer<Luma<u8>, &[u8]> =
        ImageBuffer::from_raw(width as u32, height as u32, pixels).expect("pixel count matches size");
    buf.save(path).map_err(|e| DataError::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Writes an 8-bit grayscale PNG (images and class-index masks alike).
pub fn write_gray(path: &Path, image: &GrayImage) -> Result<(), DataError> {
    write_png(path, image.height, image.width, &image.pixels)
}

/// Reads an image as 8-bit grayscale. Colour images are reduced by
/// averaging their RGB channels.
pub fn read_gray(path: &Path) -> Result<GrayImage, DataError> {
    let img = image::open(path).map_err(|e| DataError::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let (width, height) = (img.width() as usize, img.height() as usize);
    let pixels = match img {
        DynamicImage::ImageLuma8(buf) => buf.into_raw(),
        other if other.color().has_color() => other
            .to_rgb8()
            .pixels()
            .map(|p| ((p[0] as u16 + p[1] as u16 + p[2] as u16 + 1) / 3) as u8)
            .collect(),
        other => other.to_luma8().into_raw(),
    };
    GrayImage::new(height, width, pixels).map_err(|_| DataError::Image {
        path: path.to_path_buf(),
        reason: "empty image".into(),
    })
}

fn read_mask(path: &Path) -> Result<GrayImage, DataError> {
    let img = image::open(path).map_err(|e| DataError::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    if img.color() != ColorType::L8 {
        return Err(DataError::Image {
            path: path.to_path_buf(),
            reason: format!("masks must be 8-bit single channel, found {:?}", img.color()),
        });
    }
    let (width, height) = (img.width() as usize, img.height() as usize);
    GrayImage::new(height, width, img.into_luma8().into_raw())
}

/// Writes images, masks and the manifest under `dir` and returns the
/// manifest path. Existing files are overwritten.
pub fn save_dataset(dir: &Path, tasks: &[TaskSpec], samples: &[Sample]) -> Result<PathBuf, DataError> {
    for sub in ["images", "masks"] {
        fs::create_dir_all(dir.join(sub)).map_err(|e| DataError::io(dir.join(sub), e))?;
    }
    let manifest = dir.join(MANIFEST_FILE);
    let file = fs::File::create(&manifest).map_err(|e| DataError::io(&manifest, e))?;
    let mut out = BufWriter::new(file);
    let header = Header {
        format: FORMAT.into(),
        version: VERSION,
        tasks: tasks.to_vec(),
    };
    let mut lines = vec![serde_json::to_string(&header).expect("header serializes")];
    for s in samples {
        let stem = file_stem(&s.id);
        let image_path = format!("images/{stem}.png");
        write_png(&dir.join(&image_path), s.image.height, s.image.width, &s.image.pixels)?;
        let label = match &s.label {
            Label::Mask(m) => {
                let mask_path = format!("masks/{stem}.png");
                write_png(&dir.join(&mask_path), s.image.height, s.image.width, m)?;
                LabelRecord::MaskPath(mask_path)
            }
            Label::Class(c) => LabelRecord::Class(*c),
            Label::Box(b) => LabelRecord::Box(*b),
            Label::Keypoints(k) => LabelRecord::Keypoints(k.clone()),
        };
        let record = Record {
            id: s.id.clone(),
            subtask_id: s.subtask_id.clone(),
            image_path,
            label,
            orig_size: s.orig_size(),
        };
        lines.push(serde_json::to_string(&record).expect("record serializes"));
    }
    for line in lines {
        writeln!(out, "{line}").map_err(|e| DataError::io(&manifest, e))?;
    }
    out.flush().map_err(|e| DataError::io(&manifest, e))?;
    Ok(manifest)
}

/// Loads a manifest written by [`save_dataset`] (or by hand). Relative paths
/// resolve against the manifest's directory.
pub fn load_manifest(path: &Path) -> Result<Manifest, DataError> {
    let file = fs::File::open(path).map_err(|e| DataError::io(path, e))?;
    let root = path.parent().unwrap_or(Path::new("."));
    let malformed = |line: usize, reason: String| DataError::Malformed {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let mut lines = BufReader::new(file).lines().enumerate();
    let (_, first) = lines.next().ok_or_else(|| malformed(1, "empty manifest".into()))?;
    let first = first.map_err(|e| DataError::io(path, e))?;
    let header: Header = serde_json::from_str(&first).map_err(|e| malformed(1, format!("header: {e}")))?;
    if header.format != FORMAT || header.version != VERSION {
        return Err(malformed(
            1,
            format!("unsupported format {} v{}", header.format, header.version),
        ));
    }
    for t in &header.tasks {
        t.validate()?;
    }
    let tasks: HashMap<&str, &TaskSpec> = header.tasks.iter().map(|t| (t.id.as_str(), t)).collect();

    let mut samples = Vec::new();
    for (i, line) in lines {
        let line = line.map_err(|e| DataError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| malformed(i + 1, e.to_string()))?;
        let task = tasks.get(rec.subtask_id.as_str()).ok_or_else(|| DataError::UnknownSubtask {
            id: rec.id.clone(),
            subtask: rec.subtask_id.clone(),
        })?;
        let resolve = |p: &str| {
            let full = root.join(p);
            if full.is_file() {
                Ok(full)
            } else {
                Err(DataError::MissingFile {
                    id: rec.id.clone(),
                    path: full,
                })
            }
        };
        let image = read_gray(&resolve(&rec.image_path)?)?;
        if image.size() != rec.orig_size {
            return Err(malformed(
                i + 1,
                format!("orig_size {:?} but image is {:?}", rec.orig_size, image.size()),
            ));
        }
        let label = match rec.label {
            LabelRecord::MaskPath(p) => {
                let mask = read_mask(&resolve(&p)?)?;
                if mask.size() != image.size() {
                    return Err(malformed(i + 1, format!("mask size {:?} differs from image", mask.size())));
                }
                Label::Mask(mask.pixels)
            }
            LabelRecord::Class(c) => Label::Class(c),
            LabelRecord::Box(b) => Label::Box(b),
            LabelRecord::Keypoints(k) => Label::Keypoints(k),
        };
        let sample = Sample {
            id: rec.id,
            subtask_id: rec.subtask_id,
            image,
            label,
        };
        sample.validate(task).map_err(|e| malformed(i + 1, e.to_string()))?;
        samples.push(sample);
    }
    Ok(Manifest {
        tasks: header.tasks,
        samples,
    })
}
