//! Saliency evaluation: structure measure (S_α), maximum F-measure,
//! maximum enhanced-alignment measure (E_φ) and mean absolute error.
//!
//! Threshold sweeps use the 256 integer thresholds `t ∈ [0, 255]`, a pixel
//! being foreground at `t` when `s ≥ t / 255`. F uses β² = 0.3 and S uses
//! α = 0.5. Corpus scores average the per-sample curves and then take the
//! maximum of the mean curve.

use std::path::{Path, PathBuf};

use log::warn;
use serde::{Deserialize, Serialize};

use crate::dataset::sorted_stems;
use crate::error::{Error, Result};
use crate::tensor::Map;

pub const BETA_SQ: f64 = 0.3;
pub const ALPHA: f64 = 0.5;
pub const THRESHOLDS: usize = 256;

const EPS: f64 = f64::EPSILON;

fn check(s: &Map, g: &Map) -> Result<()> {
    s.expect_same_dims(g)
}

/// Threshold value for index `t`.
pub fn threshold(t: usize) -> f64 {
    t as f64 / 255.0
}

pub fn mae(s: &Map, g: &Map) -> Result<f64> {
    check(s, g)?;
    let n = s.data().len() as f64;
    Ok(s.data().iter().zip(g.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / n)
}

/// Per-threshold confusion counts, index `t` for threshold `t / 255`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
struct Counts {
    tp: usize,
    fp: usize,
    fn_: usize,
    tn: usize,
}

/// Highest threshold index a value passes, or `None` when it passes none.
fn top_threshold(v: f64) -> Option<usize> {
    if v < 0.0 {
        return None;
    }
    let mut t = ((v * 255.0).floor().max(0.0) as usize).min(THRESHOLDS - 1);
    while t + 1 < THRESHOLDS && v >= threshold(t + 1) {
        t += 1;
    }
    loop {
        if v >= threshold(t) {
            return Some(t);
        }
        if t == 0 {
            return None;
        }
        t -= 1;
    }
}

fn sweep_counts(s: &Map, g: &Map) -> Vec<Counts> {
    let mut fg_hist = [0usize; THRESHOLDS];
    let mut bg_hist = [0usize; THRESHOLDS];
    let (mut fg_total, mut bg_total) = (0usize, 0usize);
    for (&v, &gt) in s.data().iter().zip(g.data()) {
        let is_fg = gt >= 0.5;
        if is_fg {
            fg_total += 1;
        } else {
            bg_total += 1;
        }
        if let Some(t) = top_threshold(v) {
            if is_fg {
                fg_hist[t] += 1;
            } else {
                bg_hist[t] += 1;
            }
        }
    }
    let mut out = vec![Counts::default(); THRESHOLDS];
    let (mut tp, mut fp) = (0usize, 0usize);
    for t in (0..THRESHOLDS).rev() {
        tp += fg_hist[t];
        fp += bg_hist[t];
        out[t] = Counts {
            tp,
            fp,
            fn_: fg_total - tp,
            tn: bg_total - fp,
        };
    }
    out
}

fn f_from_counts(c: &Counts) -> f64 {
    if c.tp == 0 {
        return 0.0;
    }
    let p = c.tp as f64 / (c.tp + c.fp) as f64;
    let r = c.tp as f64 / (c.tp + c.fn_) as f64;
    (1.0 + BETA_SQ) * p * r / (BETA_SQ * p + r)
}

/// F-measure at every threshold; `None` when the ground truth has no
/// foreground (the measure is undefined).
pub fn f_measure_curve(s: &Map, g: &Map) -> Result<Option<Vec<f64>>> {
    check(s, g)?;
    if !g.data().iter().any(|&v| v >= 0.5) {
        return Ok(None);
    }
    Ok(Some(sweep_counts(s, g).iter().map(f_from_counts).collect()))
}

pub fn max_f_measure(s: &Map, g: &Map) -> Result<Option<(f64, Vec<f64>)>> {
    Ok(f_measure_curve(s, g)?.map(|c| (curve_max(&c), c)))
}

/// Enhanced-alignment score of a binary foreground map given its confusion
/// counts.
fn e_from_counts(c: &Counts) -> f64 {
    let n = (c.tp + c.fp + c.fn_ + c.tn) as f64;
    let fm_fg = (c.tp + c.fp) as f64;
    let gt_fg = (c.tp + c.fn_) as f64;
    if gt_fg == 0.0 {
        return (n - fm_fg) / n;
    }
    if gt_fg == n {
        return fm_fg / n;
    }
    let mu_fm = fm_fg / n;
    let mu_gt = gt_fg / n;
    let enhanced = |fm: f64, gt: f64| {
        let a = fm - mu_fm;
        let b = gt - mu_gt;
        let align = 2.0 * a * b / (a * a + b * b + EPS);
        (align + 1.0).powi(2) / 4.0
    };
    (c.tp as f64 * enhanced(1.0, 1.0)
        + c.fp as f64 * enhanced(1.0, 0.0)
        + c.fn_ as f64 * enhanced(0.0, 1.0)
        + c.tn as f64 * enhanced(0.0, 0.0))
        / n
}

/// E-measure of a binary map `fm` (values 0/1) against binary `g`.
pub fn e_measure_binary(fm: &Map, g: &Map) -> Result<f64> {
    check(fm, g)?;
    let mut c = Counts::default();
    for (&f, &t) in fm.data().iter().zip(g.data()) {
        match (f >= 0.5, t >= 0.5) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(e_from_counts(&c))
}

pub fn e_measure_curve(s: &Map, g: &Map) -> Result<Vec<f64>> {
    check(s, g)?;
    Ok(sweep_counts(s, g).iter().map(e_from_counts).collect())
}

pub fn max_e_measure(s: &Map, g: &Map) -> Result<(f64, Vec<f64>)> {
    let c = e_measure_curve(s, g)?;
    Ok((curve_max(&c), c))
}

fn curve_max(c: &[f64]) -> f64 {
    c.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Centered second moments of paired values, accumulated in two passes.
#[derive(Default, Clone, Copy)]
struct Moments {
    n: usize,
    mean_x: f64,
    mean_y: f64,
    cxx: f64,
    cyy: f64,
    cxy: f64,
}

impl Moments {
    fn of(pairs: &[(f64, f64)]) -> Self {
        let n = pairs.len();
        if n == 0 {
            return Moments::default();
        }
        let nf = n as f64;
        let mean_x = pairs.iter().map(|p| p.0).sum::<f64>() / nf;
        let mean_y = pairs.iter().map(|p| p.1).sum::<f64>() / nf;
        let mut m = Moments {
            n,
            mean_x,
            mean_y,
            ..Default::default()
        };
        for &(x, y) in pairs {
            let (dx, dy) = (x - mean_x, y - mean_y);
            m.cxx += dx * dx;
            m.cyy += dy * dy;
            m.cxy += dx * dy;
        }
        m
    }
}

/// `2 μ / (μ² + 1 + σ + eps)` with the sample standard deviation.
fn object_score(values: &[f64]) -> f64 {
    let n = values.len();
    let nf = n as f64;
    let mean = values.iter().sum::<f64>() / nf;
    let std = if n > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (nf - 1.0)).sqrt()
    } else {
        0.0
    };
    2.0 * mean / (mean * mean + 1.0 + std + EPS)
}

fn region_ssim(m: &Moments) -> f64 {
    if m.n == 0 {
        return 0.0;
    }
    let denom = m.n as f64 - 1.0 + EPS;
    let (x, y) = (m.mean_x, m.mean_y);
    let alpha = 4.0 * x * y * m.cxy / denom;
    let beta = (x * x + y * y) * (m.cxx + m.cyy) / denom;
    if alpha != 0.0 {
        alpha / (beta + EPS)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Structure measure: `α · S_object + (1 − α) · S_region`, clamped at 0.
pub fn s_measure(s: &Map, g: &Map) -> Result<f64> {
    check(s, g)?;
    let (h, w) = g.dims();
    let n = (h * w) as f64;
    let gt_mean = g.data().iter().sum::<f64>() / n;
    let pred_mean = s.data().iter().sum::<f64>() / n;
    if gt_mean == 0.0 {
        return Ok(1.0 - pred_mean);
    }
    if gt_mean == 1.0 {
        return Ok(pred_mean);
    }

    // object-aware term
    let mut fg = Vec::new();
    let mut bg = Vec::new();
    let (mut cy, mut cx) = (0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            let v = s.get(y, x);
            if g.get(y, x) >= 0.5 {
                fg.push(v);
                cy += (y + 1) as f64;
                cx += (x + 1) as f64;
            } else {
                bg.push(1.0 - v);
            }
        }
    }
    let object = gt_mean * object_score(&fg) + (1.0 - gt_mean) * object_score(&bg);

    // region-aware term: split at the 1-based rounded centroid (X, Y); the
    // top-left block spans rows 1..=Y and columns 1..=X
    let split_x = (cx / fg.len() as f64).round() as usize;
    let split_y = (cy / fg.len() as f64).round() as usize;
    let mut quads: [Vec<(f64, f64)>; 4] = Default::default();
    for y in 0..h {
        for x in 0..w {
            let q = (y >= split_y) as usize * 2 + (x >= split_x) as usize;
            quads[q].push((s.get(y, x), g.get(y, x)));
        }
    }
    let (sx, sy) = (split_x as f64, split_y as f64);
    let (wf, hf) = (w as f64, h as f64);
    let w1 = sx * sy / n;
    let w2 = (wf - sx) * sy / n;
    let w3 = sx * (hf - sy) / n;
    let w4 = 1.0 - w1 - w2 - w3;
    let q: Vec<f64> = quads.iter().map(|p| region_ssim(&Moments::of(p))).collect();
    let region = w1 * q[0] + w2 * q[1] + w3 * q[2] + w4 * q[3];

    Ok((ALPHA * object + (1.0 - ALPHA) * region).max(0.0))
}

/// Scores of one prediction / ground-truth pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub id: String,
    pub s_alpha: f64,
    /// Absent when the ground truth has no foreground.
    pub f_beta_max: Option<f64>,
    pub e_phi_max: f64,
    pub mae: f64,
    #[serde(skip)]
    pub f_curve: Option<Vec<f64>>,
    #[serde(skip)]
    pub e_curve: Vec<f64>,
    pub notes: Vec<String>,
}

pub fn evaluate_sample(id: &str, s: &Map, g: &Map) -> Result<SampleMetrics> {
    check(s, g)?;
    let mut notes = Vec::new();
    let fg = g.data().iter().filter(|&&v| v >= 0.5).count();
    if fg == 0 {
        notes.push("ground truth is all background: F excluded, S and E use the empty-object rule".into());
        warn!("{id}: ground truth has no foreground, F-measure excluded");
    } else if fg == g.data().len() {
        notes.push("ground truth is all foreground: S and E use the full-object rule".into());
    }
    let f = max_f_measure(s, g)?;
    let (e_max, e_curve) = max_e_measure(s, g)?;
    Ok(SampleMetrics {
        id: id.to_string(),
        s_alpha: s_measure(s, g)?,
        f_beta_max: f.as_ref().map(|(m, _)| *m),
        e_phi_max: e_max,
        mae: mae(s, g)?,
        f_curve: f.map(|(_, c)| c),
        e_curve,
        notes,
    })
}

/// Corpus-level scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub samples: usize,
    pub s_alpha: f64,
    pub f_beta_max: f64,
    pub e_phi_max: f64,
    pub mae: f64,
    pub f_curve: Vec<f64>,
    pub e_curve: Vec<f64>,
    /// Samples left out of the F average.
    pub excluded_from_f: Vec<String>,
}

pub fn aggregate(samples: &[SampleMetrics]) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::Data("cannot aggregate an empty sample set".into()));
    }
    let n = samples.len() as f64;
    let mut f_curve = vec![0.0; THRESHOLDS];
    let mut e_curve = vec![0.0; THRESHOLDS];
    let mut f_n = 0usize;
    let mut excluded = Vec::new();
    for s in samples {
        for (acc, v) in e_curve.iter_mut().zip(&s.e_curve) {
            *acc += v / n;
        }
        match &s.f_curve {
            Some(c) => {
                f_n += 1;
                for (acc, v) in f_curve.iter_mut().zip(c) {
                    *acc += v;
                }
            }
            None => excluded.push(s.id.clone()),
        }
    }
    if f_n > 0 {
        f_curve.iter_mut().for_each(|v| *v /= f_n as f64);
    }
    Ok(MetricsReport {
        samples: samples.len(),
        s_alpha: samples.iter().map(|s| s.s_alpha).sum::<f64>() / n,
        f_beta_max: if f_n > 0 { curve_max(&f_curve) } else { 0.0 },
        e_phi_max: curve_max(&e_curve),
        mae: samples.iter().map(|s| s.mae).sum::<f64>() / n,
        f_curve,
        e_curve,
        excluded_from_f: excluded,
    })
}

/// Scale an 8-bit prediction to `[0, 1]`, then optionally stretch it to
/// the full range when it is not constant.
pub fn prepare_prediction(raw: &Map, min_max_normalize: bool) -> Map {
    let (lo, hi) = raw
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if min_max_normalize && hi > lo {
        raw.map(|v| (v - lo) / (hi - lo))
    } else {
        raw.map(|v| v / 255.0)
    }
}

pub(crate) fn read_gray(path: &Path) -> Result<Map> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory(&bytes)
        .map_err(|e| Error::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?
        .to_luma8();
    Map::new(
        img.height() as usize,
        img.width() as usize,
        img.pixels().map(|p| p[0] as f64).collect(),
    )
}

fn find_stem(dir: &Path, stem: &str) -> Option<PathBuf> {
    let mut hits: Vec<PathBuf> = std::fs::read_dir(dir)
        .ok()?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| crate::dataset::is_image(p) && p.file_stem().is_some_and(|s| s == stem))
        .collect();
    hits.sort();
    hits.into_iter().next()
}

/// Evaluate every prediction in `pred_dir` against the same-stem map in
/// `gt_dir`. Predictions are resized to the ground truth when sizes differ.
pub fn evaluate_dirs(pred_dir: &Path, gt_dir: &Path, min_max_normalize: bool) -> Result<(MetricsReport, Vec<SampleMetrics>)> {
    let stems = sorted_stems(pred_dir)?;
    let mut rows = Vec::with_capacity(stems.len());
    for stem in stems {
        let gt_path = find_stem(gt_dir, &stem)
            .ok_or_else(|| Error::Data(format!("no ground truth for prediction {stem} in {}", gt_dir.display())))?;
        let pred_path = find_stem(pred_dir, &stem).expect("stem came from this directory");
        let gt = read_gray(&gt_path)?.map(|v| if v / 255.0 >= 0.5 { 1.0 } else { 0.0 });
        let mut pred = prepare_prediction(&read_gray(&pred_path)?, min_max_normalize);
        if pred.dims() != gt.dims() {
            pred = pred.resize_bilinear(gt.height(), gt.width());
        }
        rows.push(evaluate_sample(&stem, &pred, &gt)?);
    }
    let report = aggregate(&rows)?;
    Ok((report, rows))
}
