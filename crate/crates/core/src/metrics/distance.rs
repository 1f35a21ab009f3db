use super::{same_len, MetricError};

/// Stand-in for "no site on this line"; larger than any squared distance on
/// a real image but finite so the envelope arithmetic never produces NaN.
const FAR: f64 = 1e20;

/// Foreground pixels with a background 4-neighbour or lying on the image
/// edge.
pub fn boundary(mask: &[bool], h: usize, w: usize) -> Vec<bool> {
    let mut out = vec![false; mask.len()];
    for y in 0..h {
        for x in 0..w {
            if !mask[y * w + x] {
                continue;
            }
            out[y * w + x] = y == 0
                || x == 0
                || y + 1 == h
                || x + 1 == w
                || !mask[(y - 1) * w + x]
                || !mask[(y + 1) * w + x]
                || !mask[y * w + x - 1]
                || !mask[y * w + x + 1];
        }
    }
    out
}

/// Lower envelope of parabolas rooted at `f` (Felzenszwalb–Huttenlocher).
fn transform_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let sq = |q: usize| (q * q) as f64;
    let mut k = 0;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        loop {
            let p = v[k];
            let s = ((f[q] + sq(q)) - (f[p] + sq(p))) / (2.0 * q as f64 - 2.0 * p as f64);
            if s <= z[k] && k > 0 {
                k -= 1;
                continue;
            }
            if s <= z[k] {
                // k == 0: the new parabola dominates everywhere seen so far.
                v[0] = q;
                z[0] = f64::NEG_INFINITY;
                z[1] = f64::INFINITY;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
            }
            break;
        }
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Exact squared Euclidean distance from every pixel to the nearest `true`
/// site. Pixels get a huge value when there is no site at all.
pub fn squared_distance_transform(sites: &[bool], h: usize, w: usize) -> Vec<f64> {
    let n = h.max(w);
    let mut f = vec![0.0; n];
    let mut out = vec![0.0; n];
    let mut v = vec![0usize; n];
    let mut z = vec![0.0; n + 1];
    let mut grid: Vec<f64> = sites.iter().map(|&s| if s { 0.0 } else { FAR }).collect();
    for x in 0..w {
        for y in 0..h {
            f[y] = grid[y * w + x];
        }
        transform_1d(&f[..h], &mut out[..h], &mut v, &mut z);
        for y in 0..h {
            grid[y * w + x] = out[y];
        }
    }
    for y in 0..h {
        f[..w].copy_from_slice(&grid[y * w..(y + 1) * w]);
        transform_1d(&f[..w], &mut out[..w], &mut v, &mut z);
        grid[y * w..(y + 1) * w].copy_from_slice(&out[..w]);
    }
    grid
}

/// Symmetric Hausdorff distance in pixels between the boundaries of two
/// `h×w` masks. One empty mask yields the image diagonal; two empty masks
/// yield 0.
pub fn hausdorff(pred: &[bool], gt: &[bool], h: usize, w: usize) -> Result<f64, MetricError> {
    same_len("hausdorff", pred.len(), gt.len())?;
    same_len("hausdorff", pred.len(), h * w)?;
    let (bp, bg) = (boundary(pred, h, w), boundary(gt, h, w));
    let (has_p, has_g) = (bp.contains(&true), bg.contains(&true));
    match (has_p, has_g) {
        (false, false) => return Ok(0.0),
        (true, false) | (false, true) => return Ok((h as f64).hypot(w as f64)),
        _ => {}
    }
    let directed = |from: &[bool], to: &[bool]| {
        let dt = squared_distance_transform(to, h, w);
        from.iter()
            .zip(&dt)
            .filter(|(&f, _)| f)
            .fold(0.0f64, |m, (_, &d)| m.max(d))
    };
    Ok(directed(&bp, &bg).max(directed(&bg, &bp)).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_with(h: usize, w: usize, on: &[(usize, usize)]) -> Vec<bool> {
        let mut m = vec![false; h * w];
        for &(y, x) in on {
            m[y * w + x] = true;
        }
        m
    }

    #[test]
    fn three_four_five() {
        let a = mask_with(6, 6, &[(0, 0)]);
        let b = mask_with(6, 6, &[(4, 3)]);
        assert_eq!(hausdorff(&a, &b, 6, 6).unwrap(), 5.0);
    }

    #[test]
    fn identical_and_empty() {
        let a = mask_with(5, 5, &[(1, 1), (1, 2), (2, 2)]);
        assert_eq!(hausdorff(&a, &a, 5, 5).unwrap(), 0.0);
        let empty = vec![false; 25];
        assert_eq!(hausdorff(&empty, &empty, 5, 5).unwrap(), 0.0);
        assert_eq!(hausdorff(&a, &empty, 3, 4).ok(), None);
        assert_eq!(hausdorff(&a, &empty, 5, 5).unwrap(), 50f64.sqrt());
    }

    #[test]
    fn interior_pixels_are_not_boundary() {
        let m = vec![true; 25];
        let b = boundary(&m, 5, 5);
        assert_eq!(b.iter().filter(|&&v| v).count(), 16);
        assert!(!b[12]);
    }

    #[test]
    fn distance_transform_single_site() {
        let d = squared_distance_transform(&mask_with(4, 7, &[(2, 5)]), 4, 7);
        for y in 0..4 {
            for x in 0..7 {
                let e = (y as f64 - 2.0).powi(2) + (x as f64 - 5.0).powi(2);
                assert_eq!(d[y * 7 + x], e);
            }
        }
    }
}
