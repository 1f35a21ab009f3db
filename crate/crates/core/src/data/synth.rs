//! Ultrasound-like phantoms: a dim smooth intensity field under
//! multiplicative Gamma speckle, with dark distractor ellipses and one or
//! more bright target ellipses. Labels come from the generating geometry.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{DataError, GrayImage, Label, Sample};
use crate::task::{ConfigError, TaskKind, TaskSpec};

/// Inclusive range of original image side lengths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SizeRange {
    pub min: usize,
    pub max: usize,
}

impl SizeRange {
    pub const MIN_SIDE: usize = 48;

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.min < Self::MIN_SIDE || self.min > self.max {
            return Err(ConfigError::invalid(
                "data.synth.orig_size",
                format!("need {} <= min <= max, got {}..={}", Self::MIN_SIDE, self.min, self.max),
            ));
        }
        Ok(())
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(s: &str) -> u64 {
    s.bytes()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Seed of sample `index` of `subtask`; independent of generation order and
/// thread count.
pub fn sample_seed(seed: u64, subtask: &str, index: u64) -> u64 {
    splitmix(splitmix(seed ^ splitmix(fnv1a(subtask))) ^ index)
}

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    theta: f64,
}

impl Ellipse {
    /// Pixel `(x, y)` is inside when its centre `(x+½, y+½)` is.
    fn contains(&self, x: usize, y: usize) -> bool {
        let (dx, dy) = (x as f64 + 0.5 - self.cx, y as f64 + 0.5 - self.cy);
        let (s, c) = self.theta.sin_cos();
        let u = (dx * c + dy * s) / self.a;
        let v = (-dx * s + dy * c) / self.b;
        u * u + v * v <= 1.0
    }

    /// Pixel rows/cols that can intersect the ellipse.
    fn bounds(&self, h: usize, w: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let r = self.a.max(self.b) + 1.0;
        let clip = |lo: f64, hi: f64, n: usize| (lo.max(0.0) as usize)..(hi.ceil().max(0.0) as usize).min(n);
        (clip(self.cy - r, self.cy + r, h), clip(self.cx - r, self.cx + r, w))
    }

    fn paint(&self, h: usize, w: usize, mut f: impl FnMut(usize)) {
        let (rows, cols) = self.bounds(h, w);
        for y in rows {
            for x in cols.clone() {
                if self.contains(x, y) {
                    f(y * w + x);
                }
            }
        }
    }

    /// Major-axis endpoints (+, −) then minor-axis endpoints (+, −).
    fn axis_endpoints(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.theta.sin_cos();
        [
            [self.cx + self.a * c, self.cy + self.a * s],
            [self.cx - self.a * c, self.cy - self.a * s],
            [self.cx - self.b * s, self.cy + self.b * c],
            [self.cx + self.b * s, self.cy - self.b * c],
        ]
    }

    fn overlaps(&self, other: &Ellipse) -> bool {
        (self.cx - other.cx).hypot(self.cy - other.cy) < self.a + other.a + 2.0
    }
}

/// Major semi-axis range as a fraction of the shorter image side.
fn place<R: Rng>(rng: &mut R, h: usize, w: usize, frac: (f64, f64), theta: (f64, f64), avoid: &[Ellipse]) -> Ellipse {
    let side = h.min(w) as f64;
    let mut e = Ellipse {
        cx: 0.0,
        cy: 0.0,
        a: 0.0,
        b: 0.0,
        theta: 0.0,
    };
    for _ in 0..64 {
        let a = rng.random_range(frac.0..frac.1) * side;
        let margin = a + 2.0;
        e = Ellipse {
            cx: rng.random_range(margin..w as f64 - margin),
            cy: rng.random_range(margin..h as f64 - margin),
            a,
            b: a * rng.random_range(0.55..0.9),
            theta: rng.random_range(theta.0..theta.1),
        };
        if !avoid.iter().any(|o| e.overlaps(o)) {
            break;
        }
    }
    e
}

fn check_task(task: &TaskSpec) -> Result<(), ConfigError> {
    task.validate()?;
    if task.kind == TaskKind::Regression && task.num_keypoints() > 4 {
        return Err(ConfigError::invalid(
            format!("tasks.{}.keypoints", task.id),
            format!("phantoms provide 4 axis endpoints, {} requested", task.num_keypoints()),
        ));
    }
    Ok(())
}

/// Intensity of the target ellipse for classification class `k`: one of `K`
/// equal-width buckets spanning `[0.4, 0.95]`, jittered inside its bucket.
fn class_level<R: Rng>(rng: &mut R, k: usize, classes: usize) -> f64 {
    0.4 + 0.55 * (k as f64 + rng.random_range(0.25..0.75)) / classes as f64
}

fn segmentation_level(class: usize, classes: usize) -> f64 {
    0.55 + 0.4 * class as f64 / (classes - 1) as f64
}

fn render(task: &TaskSpec, seed: u64, index: usize, sizes: SizeRange, class: Option<usize>) -> (Sample, Vec<u8>, Vec<Ellipse>) {
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(seed, &task.id, index as u64));
    let h = rng.random_range(sizes.min..=sizes.max);
    let w = rng.random_range(sizes.min..=sizes.max);

    // Smooth background: a tilted ramp plus one low-frequency ripple.
    let (base, tilt, ripple) = (
        rng.random_range(0.10..0.18),
        rng.random_range(-0.06..0.06),
        rng.random_range(0.0..0.05),
    );
    let dir = rng.random_range(0.0..2.0 * PI);
    let (freq, phase) = (rng.random_range(0.5..2.0), rng.random_range(0.0..2.0 * PI));
    let mut field: Vec<f64> = (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as f64 / h as f64, (i % w) as f64 / w as f64);
            let t = x * dir.cos() + y * dir.sin();
            base + tilt * t + ripple * (2.0 * PI * freq * t + phase).sin()
        })
        .collect();

    let primaries = match task.kind {
        TaskKind::Segmentation => task.num_classes() - 1,
        _ => 1,
    };
    let distractors = rng.random_range(0..=(3 - primaries.min(3)).min(2));
    let mut placed = Vec::new();
    for _ in 0..distractors {
        let e = place(&mut rng, h, w, (0.05, 0.1), (-FRAC_PI_2, FRAC_PI_2), &placed);
        let level = rng.random_range(0.0..0.04);
        e.paint(h, w, |i| field[i] = level);
        placed.push(e);
    }

    let theta = if task.kind == TaskKind::Regression {
        (-FRAC_PI_4, FRAC_PI_4)
    } else {
        (-FRAC_PI_2, FRAC_PI_2)
    };
    let frac = match task.kind {
        TaskKind::Classification => (0.15, 0.2),
        // Organ-scale targets, shrunk so several classes still fit side by side.
        TaskKind::Segmentation => {
            let shrink = (primaries as f64).sqrt();
            (0.2 / shrink, 0.32 / shrink)
        }
        _ => (0.12, 0.22),
    };
    let mut mask = vec![0u8; h * w];
    let mut targets = Vec::with_capacity(primaries);
    for p in 0..primaries {
        let e = place(&mut rng, h, w, frac, theta, &placed);
        let level = match task.kind {
            TaskKind::Segmentation => segmentation_level(p + 1, task.num_classes()),
            TaskKind::Classification => class_level(&mut rng, class.unwrap_or(0), task.num_classes()),
            _ => rng.random_range(0.75..0.95),
        };
        e.paint(h, w, |i| {
            field[i] = level;
            mask[i] = (p + 1) as u8;
        });
        placed.push(e);
        targets.push(e);
    }

    let speckle = Gamma::new(4.0, 0.25).expect("valid gamma parameters");
    let pixels = field
        .iter()
        .map(|&v| (v * speckle.sample(&mut rng) * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();

    let target = targets[0];
    let label = match task.kind {
        TaskKind::Segmentation => Label::Mask(mask.clone()),
        TaskKind::Classification => Label::Class(class.unwrap_or(0)),
        TaskKind::Detection => {
            let (mut x0, mut y0, mut x1, mut y1) = (w, h, 0, 0);
            target.paint(h, w, |i| {
                let (y, x) = (i / w, i % w);
                x0 = x0.min(x);
                x1 = x1.max(x);
                y0 = y0.min(y);
                y1 = y1.max(y);
            });
            Label::Box([
                (x0 + x1 + 1) as f64 / 2.0 / w as f64,
                (y0 + y1 + 1) as f64 / 2.0 / h as f64,
                (x1 + 1 - x0) as f64 / w as f64,
                (y1 + 1 - y0) as f64 / h as f64,
            ])
        }
        TaskKind::Regression => Label::Keypoints(target.axis_endpoints()[..task.num_keypoints()].to_vec()),
    };

    let sample = Sample {
        id: format!("{}-{index:05}", task.id),
        subtask_id: task.id.clone(),
        image: GrayImage {
            height: h,
            width: w,
            pixels,
        },
        label,
    };
    (sample, mask, targets)
}

/// Generates `count` phantoms for `task`. Output is a pure function of
/// `(seed, task, count, sizes)`; samples are rendered in parallel.
pub fn generate(seed: u64, task: &TaskSpec, count: usize, sizes: SizeRange) -> Result<Vec<Sample>, DataError> {
    Ok(generate_with_masks(seed, task, count, sizes)?
        .into_iter()
        .map(|(s, _)| s)
        .collect())
}

/// Like [`generate`], also returning for every sample the raster of its
/// target ellipses (value `p+1` for the `p`-th target) whatever the task
/// kind.
pub fn generate_with_masks(
    seed: u64,
    task: &TaskSpec,
    count: usize,
    sizes: SizeRange,
) -> Result<Vec<(Sample, Vec<u8>)>, DataError> {
    check_task(task)?;
    sizes.validate()?;
    if count == 0 {
        return Err(ConfigError::invalid("data.synth.count", "must be at least 1").into());
    }
    let classes: Vec<Option<usize>> = if task.kind == TaskKind::Classification {
        let k = task.num_classes();
        let mut labels: Vec<usize> = (0..count).map(|i| i % k).collect();
        labels.shuffle(&mut ChaCha8Rng::seed_from_u64(sample_seed(seed, &task.id, u64::MAX)));
        labels.into_iter().map(Some).collect()
    } else {
        vec![None; count]
    };
    Ok(classes
        .into_par_iter()
        .enumerate()
        .map(|(i, class)| {
            let (sample, mask, _) = render(task, seed, i, sizes, class);
            (sample, mask)
        })
        .collect())
}
