//! Shared test support: brute-force metric oracles written directly from
//! the metric definitions, finite-difference gradient checking, and
//! random inputs.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rgbd_sod::tensor::{Map, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: [usize; 4], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Random prediction in [0, 1]; a quarter of the pixels are snapped to
/// multiples of 1/255 so threshold ties get exercised.
pub fn random_prediction(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Map {
    Map::from_fn(h, w, |_, _| {
        let v: f64 = rng.random();
        if rng.random_bool(0.25) {
            (v * 255.0).round() / 255.0
        } else {
            v
        }
    })
}

/// Random binary mask; `kind` selects blob, noise, empty or full masks.
pub fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, kind: usize) -> Map {
    match kind % 8 {
        0 => Map::filled(h, w, 0.0),
        1 => Map::filled(h, w, 1.0),
        2 | 3 | 4 => {
            let cy = rng.random_range(0.0..h as f64);
            let cx = rng.random_range(0.0..w as f64);
            let r = rng.random_range(1.0..(h.max(w) as f64 / 2.0));
            Map::from_fn(h, w, |y, x| {
                let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                (dy * dy + dx * dx <= r * r) as u8 as f64
            })
        }
        _ => {
            let p = rng.random_range(0.05..0.95);
            Map::from_fn(h, w, |_, _| rng.random_bool(p) as u8 as f64)
        }
    }
}

pub mod oracle {
    //! Direct transcriptions of the metric definitions with per-pixel
    //! loops and no shared code with the library.

    use rgbd_sod::tensor::Map;

    const EPS: f64 = f64::EPSILON;

    pub fn mae(s: &Map, g: &Map) -> f64 {
        let mut total = 0.0;
        for y in 0..g.height() {
            for x in 0..g.width() {
                total += (s.get(y, x) - g.get(y, x)).abs();
            }
        }
        total / (g.height() * g.width()) as f64
    }

    fn binarize_at(s: &Map, t: usize) -> Vec<Vec<bool>> {
        let thr = t as f64 / 255.0;
        (0..s.height()).map(|y| (0..s.width()).map(|x| s.get(y, x) >= thr).collect()).collect()
    }

    /// Max over thresholds of `(1 + β²) P R / (β² P + R)`, β² = 0.3.
    pub fn max_f(s: &Map, g: &Map) -> Option<f64> {
        let gt_fg = g.data().iter().filter(|&&v| v == 1.0).count();
        if gt_fg == 0 {
            return None;
        }
        let mut best = f64::NEG_INFINITY;
        for t in 0..256 {
            let b = binarize_at(s, t);
            let (mut tp, mut pred_fg) = (0.0, 0.0);
            for y in 0..g.height() {
                for x in 0..g.width() {
                    if b[y][x] {
                        pred_fg += 1.0;
                        if g.get(y, x) == 1.0 {
                            tp += 1.0;
                        }
                    }
                }
            }
            let f = if tp == 0.0 {
                0.0
            } else {
                let precision = tp / pred_fg;
                let recall = tp / gt_fg as f64;
                1.3 * precision * recall / (0.3 * precision + recall)
            };
            best = best.max(f);
        }
        Some(best)
    }

    /// Enhanced-alignment score of one binary map, averaged over `N` pixels.
    pub fn e_binary(fm: &[Vec<bool>], g: &Map) -> f64 {
        let (h, w) = g.dims();
        let n = (h * w) as f64;
        let fmv = |y: usize, x: usize| if fm[y][x] { 1.0 } else { 0.0 };
        let gt_sum: f64 = g.data().iter().sum();
        let mut score = 0.0;
        if gt_sum == 0.0 {
            for y in 0..h {
                for x in 0..w {
                    score += 1.0 - fmv(y, x);
                }
            }
            return score / n;
        }
        if gt_sum == n {
            for y in 0..h {
                for x in 0..w {
                    score += fmv(y, x);
                }
            }
            return score / n;
        }
        let mut mu_fm = 0.0;
        for y in 0..h {
            for x in 0..w {
                mu_fm += fmv(y, x);
            }
        }
        mu_fm /= n;
        let mu_gt = gt_sum / n;
        for y in 0..h {
            for x in 0..w {
                let a = fmv(y, x) - mu_fm;
                let b = g.get(y, x) - mu_gt;
                let align = 2.0 * a * b / (a * a + b * b + EPS);
                score += (align + 1.0) * (align + 1.0) / 4.0;
            }
        }
        score / n
    }

    pub fn max_e(s: &Map, g: &Map) -> f64 {
        (0..256).map(|t| e_binary(&binarize_at(s, t), g)).fold(f64::NEG_INFINITY, f64::max)
    }

    fn mean(v: &[f64]) -> f64 {
        v.iter().sum::<f64>() / v.len() as f64
    }

    fn sample_std(v: &[f64]) -> f64 {
        if v.len() < 2 {
            return 0.0;
        }
        let m = mean(v);
        (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() as f64 - 1.0)).sqrt()
    }

    fn object(v: &[f64]) -> f64 {
        let x = mean(v);
        2.0 * x / (x * x + 1.0 + sample_std(v) + EPS)
    }

    fn ssim(pred: &[f64], gt: &[f64]) -> f64 {
        if pred.is_empty() {
            return 0.0;
        }
        let n = pred.len() as f64;
        let x = mean(pred);
        let y = mean(gt);
        let mut sx2 = 0.0;
        let mut sy2 = 0.0;
        let mut sxy = 0.0;
        for i in 0..pred.len() {
            sx2 += (pred[i] - x) * (pred[i] - x);
            sy2 += (gt[i] - y) * (gt[i] - y);
            sxy += (pred[i] - x) * (gt[i] - y);
        }
        sx2 /= n - 1.0 + EPS;
        sy2 /= n - 1.0 + EPS;
        sxy /= n - 1.0 + EPS;
        let alpha = 4.0 * x * y * sxy;
        let beta = (x * x + y * y) * (sx2 + sy2);
        if alpha != 0.0 {
            alpha / (beta + EPS)
        } else if beta == 0.0 {
            1.0
        } else {
            0.0
        }
    }

    /// Structure measure with α = 0.5.
    pub fn s_measure(s: &Map, g: &Map) -> f64 {
        let (h, w) = g.dims();
        let area = (h * w) as f64;
        let y_mean = mean(g.data());
        if y_mean == 0.0 {
            return 1.0 - mean(s.data());
        }
        if y_mean == 1.0 {
            return mean(s.data());
        }
        // object part
        let mut fg = vec![];
        let mut bg = vec![];
        for r in 0..h {
            for c in 0..w {
                if g.get(r, c) == 1.0 {
                    fg.push(s.get(r, c));
                } else {
                    bg.push(1.0 - s.get(r, c));
                }
            }
        }
        let s_object = y_mean * object(&fg) + (1.0 - y_mean) * object(&bg);

        // region part, 1-based centroid
        let total: f64 = g.data().iter().sum();
        let mut xs = 0.0;
        let mut ys = 0.0;
        for r in 0..h {
            for c in 0..w {
                xs += (c + 1) as f64 * g.get(r, c);
                ys += (r + 1) as f64 * g.get(r, c);
            }
        }
        let cx = (xs / total).round() as usize;
        let cy = (ys / total).round() as usize;
        let block = |r0: usize, r1: usize, c0: usize, c1: usize| {
            let mut p = vec![];
            let mut q = vec![];
            for r in r0..r1 {
                for c in c0..c1 {
                    p.push(s.get(r, c));
                    q.push(g.get(r, c));
                }
            }
            ssim(&p, &q)
        };
        let w1 = (cx * cy) as f64 / area;
        let w2 = ((w - cx) * cy) as f64 / area;
        let w3 = (cx * (h - cy)) as f64 / area;
        let w4 = 1.0 - w1 - w2 - w3;
        let s_region = w1 * block(0, cy, 0, cx)
            + w2 * block(0, cy, cx, w)
            + w3 * block(cy, h, 0, cx)
            + w4 * block(cy, h, cx, w);
        (0.5 * s_object + 0.5 * s_region).max(0.0)
    }
}

/// Largest elementwise relative error `|a − n| / max(|a|, |n|, floor)`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Central differences of `f` at `x`.
pub fn numeric_gradient(x: &[f64], step: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + step;
            let up = f(&probe);
            probe[i] = orig - step;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// Step and floor used by the gradient checks.
pub const FD_STEP: f64 = 1e-6;
pub const FD_FLOOR: f64 = 1e-6;
pub const GRAD_TOL: f64 = 1e-4;
