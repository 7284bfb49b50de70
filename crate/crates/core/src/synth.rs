//! Synthetic RGB-D mini-dataset.
//!
//! Each scene holds one salient shape that is both color-contrasted and
//! near the camera. Distractors carry only one of the two cues: an RGB
//! distractor repeats the object color at background depth, and a depth
//! distractor sits near the camera with background color. Identifying the
//! salient object reliably therefore needs both modalities.

use std::fs;
use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dataset::{RgbdSample, MANIFEST_FILE};
use crate::error::{Error, Result};
use crate::tensor::{Map, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthConfig {
    pub size: usize,
    /// Probability that a scene contains an RGB-only distractor.
    pub rgb_distractor: f64,
    /// Probability that a scene contains a depth-only distractor.
    pub depth_distractor: f64,
    pub rgb_noise: f64,
    pub depth_noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            size: 64,
            rgb_distractor: 0.9,
            depth_distractor: 0.9,
            rgb_noise: 6.0,
            depth_noise: 1.5,
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Ellipse { cy: f64, cx: f64, ry: f64, rx: f64 },
    Rect { cy: f64, cx: f64, hy: f64, hx: f64 },
}

impl Shape {
    fn random<R: Rng>(rng: &mut R, cy: f64, cx: f64, size: f64) -> Shape {
        let a = rng.random_range(0.10..0.18) * size;
        let b = rng.random_range(0.10..0.18) * size;
        if rng.random_bool(0.5) {
            Shape::Ellipse { cy, cx, ry: a, rx: b }
        } else {
            Shape::Rect { cy, cx, hy: a * 0.85, hx: b * 0.85 }
        }
    }

    fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            Shape::Ellipse { cy, cx, ry, rx } => {
                let dy = (y - cy) / ry;
                let dx = (x - cx) / rx;
                dy * dy + dx * dx <= 1.0
            }
            Shape::Rect { cy, cx, hy, hx } => (y - cy).abs() <= hy && (x - cx).abs() <= hx,
        }
    }
}

/// Non-overlapping shape centres, one per requested slot.
fn place_centres<R: Rng>(rng: &mut R, count: usize, size: f64) -> Vec<(f64, f64)> {
    let margin = 0.2 * size;
    let min_dist = 0.38 * size;
    let mut centres: Vec<(f64, f64)> = Vec::with_capacity(count);
    let mut attempts = 0;
    while centres.len() < count {
        let c = (
            rng.random_range(margin..size - margin),
            rng.random_range(margin..size - margin),
        );
        attempts += 1;
        let far = centres
            .iter()
            .all(|p| ((p.0 - c.0).powi(2) + (p.1 - c.1).powi(2)).sqrt() >= min_dist);
        if far || attempts > 500 {
            centres.push(c);
        }
    }
    centres
}

fn random_color<R: Rng>(rng: &mut R) -> [f64; 3] {
    let mut c = [0.0; 3];
    let strong = rng.random_range(0..3);
    for (i, v) in c.iter_mut().enumerate() {
        *v = if i == strong {
            rng.random_range(200.0..250.0)
        } else {
            rng.random_range(20.0..120.0)
        };
    }
    c
}

/// Generate one scene.
pub fn generate_sample<R: Rng>(rng: &mut R, id: &str, cfg: &SynthConfig) -> Result<RgbdSample> {
    let n = cfg.size;
    let size = n as f64;
    let has_rgb_d = rng.random_bool(cfg.rgb_distractor);
    let has_depth_d = rng.random_bool(cfg.depth_distractor);
    let count = 1 + has_rgb_d as usize + has_depth_d as usize;
    let centres = place_centres(rng, count, size);
    let object = Shape::random(rng, centres[0].0, centres[0].1, size);
    let mut next = 1;
    let rgb_d = has_rgb_d.then(|| {
        let s = Shape::random(rng, centres[next].0, centres[next].1, size);
        next += 1;
        s
    });
    let depth_d = has_depth_d.then(|| Shape::random(rng, centres[next].0, centres[next].1, size));

    let bg_top: [f64; 3] = std::array::from_fn(|_| rng.random_range(90.0..150.0));
    let bg_bottom: [f64; 3] = std::array::from_fn(|_| rng.random_range(90.0..150.0));
    let fg = random_color(rng);
    let far = rng.random_range(40.0..80.0);
    let near = rng.random_range(170.0..220.0);
    let depth_d_level = near + rng.random_range(-10.0..10.0);

    let rgb_noise = Normal::new(0.0, cfg.rgb_noise).map_err(|e| Error::Config(e.to_string()))?;
    let depth_noise = Normal::new(0.0, cfg.depth_noise).map_err(|e| Error::Config(e.to_string()))?;

    let mut rgb = Tensor::zeros([1, 3, n, n]);
    let mut depth = Vec::with_capacity(n * n);
    let mut gt = Vec::with_capacity(n * n);
    for y in 0..n {
        let t = y as f64 / (size - 1.0);
        for x in 0..n {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            let in_obj = object.contains(py, px);
            let in_rgb_d = rgb_d.is_some_and(|s| s.contains(py, px));
            let in_depth_d = depth_d.is_some_and(|s| s.contains(py, px));
            // ground plane recedes towards the top of the frame
            let mut d = far + 30.0 * t;
            if in_obj {
                d = near;
            } else if in_depth_d {
                d = depth_d_level;
            }
            depth.push((d + depth_noise.sample(rng)).max(0.0));
            gt.push(in_obj as u8 as f64);
            for c in 0..3 {
                let bg = bg_top[c] * (1.0 - t) + bg_bottom[c] * t;
                let v = if in_obj || in_rgb_d { fg[c] } else { bg };
                let v = (v + rgb_noise.sample(rng)).clamp(0.0, 255.0).round();
                rgb.data_mut()[(c * n + y) * n + x] = v;
            }
        }
    }
    // depth is stored as 16-bit on disk; keep the in-memory copy on that grid
    let depth = Map::new(n, n, depth.into_iter().map(|v| (v * 256.0).round().min(65535.0)).collect())?;
    RgbdSample::new(id, rgb, depth, Map::new(n, n, gt)?)
}

/// Generate `count` scenes from a seed. Ids are zero-padded indices.
pub fn generate(count: usize, cfg: &SynthConfig, seed: u64) -> Result<Vec<RgbdSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| generate_sample(&mut rng, &format!("synth_{i:04}"), cfg))
        .collect()
}

/// Write samples in the on-disk dataset layout: 8-bit RGB PNG, 16-bit
/// depth PNG, 8-bit ground-truth PNG, plus a manifest.
pub fn write_dataset(root: &Path, samples: &[RgbdSample]) -> Result<()> {
    for sub in ["rgb", "depth", "gt"] {
        let dir = root.join(sub);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let mut manifest = String::new();
    for s in samples {
        let (h, w) = (s.height() as u32, s.width() as u32);
        let rgb = RgbImage::from_fn(w, h, |x, y| {
            let at = |c: usize| s.rgb.plane(0, c)[(y * w + x) as usize].round().clamp(0.0, 255.0) as u8;
            image::Rgb([at(0), at(1), at(2)])
        });
        let depth: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(w, h, |x, y| {
            Luma([s.depth.get(y as usize, x as usize).round().clamp(0.0, 65535.0) as u16])
        });
        let gt = GrayImage::from_fn(w, h, |x, y| Luma([(s.gt.get(y as usize, x as usize) * 255.0) as u8]));
        let save = |path: std::path::PathBuf, r: image::ImageResult<()>| {
            r.map_err(|e| Error::Format {
                path,
                message: e.to_string(),
            })
        };
        let p = root.join("rgb").join(format!("{}.png", s.id));
        save(p.clone(), rgb.save(&p))?;
        let p = root.join("depth").join(format!("{}.png", s.id));
        save(p.clone(), depth.save(&p))?;
        let p = root.join("gt").join(format!("{}.png", s.id));
        save(p.clone(), gt.save(&p))?;
        manifest.push_str(&s.id);
        manifest.push('\n');
    }
    let path = root.join(MANIFEST_FILE);
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
}
