//! Anchor-free grid detection: one `(cx, cy, w, h, objectness)` vector per
//! cell of the stride-4 grid, supervised only at the cell holding the target
//! centre.

use mhmtl_autograd::Scalar;

/// Channel layout of a detection head output.
pub const BOX_CHANNELS: usize = 4;
pub const OBJECTNESS_CHANNEL: usize = 4;
pub const DETECTION_CHANNELS: usize = 5;

/// Maps a normalized centre to its grid cell `(i, j)` with
/// `i = ⌊y·h'⌋`, `j = ⌊x·w'⌋`. Coordinates at or past 1 (and below 0) are
/// clamped into the grid.
pub fn encode_detection_target(x: f64, y: f64, grid_h: usize, grid_w: usize) -> (usize, usize) {
    let cell = |v: f64, n: usize, axis: &str| {
        let raw = (v * n as f64).floor();
        if !(0.0..n as f64).contains(&raw) {
            log::warn!("detection centre {axis}={v} outside [0, 1); clamped to the grid");
        }
        raw.clamp(0.0, (n - 1) as f64) as usize
    };
    (cell(y, grid_h, "y"), cell(x, grid_w, "x"))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub cell: (usize, usize),
    /// Normalized `(cx, cy, w, h)`.
    pub bbox: [f64; 4],
    /// Sigmoid of the winning objectness logit.
    pub score: f64,
}

/// Picks the cell with the largest objectness logit from one image's
/// `[5, h', w']` head output (the layout produced by the detection head: box
/// channels already activated, objectness still a logit). Ties go to the
/// smallest `(i, j)` in row-major order.
pub fn decode_detection<T: Scalar>(pred: &[T], grid_h: usize, grid_w: usize) -> Detection {
    assert_eq!(pred.len(), DETECTION_CHANNELS * grid_h * grid_w, "decode_detection expects [5, h', w']");
    let plane = grid_h * grid_w;
    let obj = &pred[OBJECTNESS_CHANNEL * plane..(OBJECTNESS_CHANNEL + 1) * plane];
    let mut best = 0;
    for (idx, v) in obj.iter().enumerate() {
        if *v > obj[best] {
            best = idx;
        }
    }
    let bbox = std::array::from_fn(|c| pred[c * plane + best].as_f64());
    Detection {
        cell: (best / grid_w, best % grid_w),
        bbox,
        score: sigmoid(obj[best].as_f64()),
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_mapping_examples() {
        assert_eq!(encode_detection_target(0.5, 0.5, 64, 64), (32, 32));
        assert_eq!(encode_detection_target(0.0, 0.0, 64, 64), (0, 0));
        assert_eq!(encode_detection_target(0.999, 0.999, 16, 16), (15, 15));
        assert_eq!(encode_detection_target(1.0, 1.0, 16, 16), (15, 15));
        assert_eq!(encode_detection_target(0.3, 0.9, 10, 20), (9, 6));
    }

    #[test]
    fn decode_ties_pick_first_cell() {
        let pred = vec![0.25f32; DETECTION_CHANNELS * 4 * 4];
        let d = decode_detection(&pred, 4, 4);
        assert_eq!(d.cell, (0, 0));
        assert!((d.score - sigmoid(0.25)).abs() < 1e-7);
    }

    #[test]
    fn decode_one_hot_cell() {
        let (h, w) = (16, 16);
        let plane = h * w;
        let mut pred = vec![0.0f64; DETECTION_CHANNELS * plane];
        let cell = 7 * w + 2;
        for (c, v) in [0.5, 0.5, 0.25, 0.25].into_iter().enumerate() {
            pred[c * plane + cell] = v;
        }
        pred[OBJECTNESS_CHANNEL * plane + cell] = 3.0;
        let d = decode_detection(&pred, h, w);
        assert_eq!(d.cell, (7, 2));
        assert_eq!(d.bbox, [0.5, 0.5, 0.25, 0.25]);
    }

    #[test]
    fn encode_then_decode_round_trips_cell() {
        let (h, w) = (8, 12);
        for i in 0..h {
            for j in 0..w {
                let (x, y) = ((j as f64 + 0.3) / w as f64, (i as f64 + 0.7) / h as f64);
                let cell = encode_detection_target(x, y, h, w);
                let mut pred = vec![0.0f32; DETECTION_CHANNELS * h * w];
                pred[OBJECTNESS_CHANNEL * h * w + cell.0 * w + cell.1] = 1.0;
                assert_eq!(decode_detection(&pred, h, w).cell, (i, j));
            }
        }
    }
}
