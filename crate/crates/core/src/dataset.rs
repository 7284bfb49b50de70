//! RGB-D sample loading, preprocessing, augmentation and Siamese batching.
//!
//! On disk a dataset is three sibling directories `rgb/`, `depth/` and `gt/`
//! holding files with identical stems (extensions may differ). An optional
//! `manifest.txt` at the dataset root lists sample ids one per line;
//! without it the `rgb/` directory is scanned and sorted lexicographically.

use std::fs;
use std::path::{Path, PathBuf};

use image::DynamicImage;

use crate::error::{Error, Result};
use crate::tensor::{self, Map, Tensor};

/// Spatial granularity every input size must respect: six hierarchies with
/// four stride-2 reductions, plus headroom for the dataset contract.
pub const SIZE_MULTIPLE: usize = 32;

pub const MANIFEST_FILE: &str = "manifest.txt";

/// One RGB image, its raw depth map and its binary ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbdSample {
    pub id: String,
    /// `[1, 3, H, W]`, values in `[0, 255]`.
    pub rgb: Tensor,
    /// Raw depth, any nonnegative range.
    pub depth: Map,
    /// Values in `{0, 1}`.
    pub gt: Map,
}

impl RgbdSample {
    pub fn new(id: impl Into<String>, rgb: Tensor, depth: Map, gt: Map) -> Result<Self> {
        let [n, c, h, w] = rgb.shape();
        if n != 1 || c != 3 {
            return Err(Error::Shape(format!("rgb must be [1, 3, H, W], got {:?}", rgb.shape())));
        }
        if depth.dims() != (h, w) || gt.dims() != (h, w) {
            return Err(Error::Shape(format!(
                "rgb {h}x{w}, depth {:?}, gt {:?} must share spatial size",
                depth.dims(),
                gt.dims()
            )));
        }
        if gt.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Data("ground truth must contain only 0 and 1".into()));
        }
        Ok(RgbdSample {
            id: id.into(),
            rgb,
            depth,
            gt,
        })
    }

    pub fn height(&self) -> usize {
        self.gt.height()
    }

    pub fn width(&self) -> usize {
        self.gt.width()
    }
}

pub fn check_target_size(target_size: usize) -> Result<()> {
    if target_size < SIZE_MULTIPLE || target_size % SIZE_MULTIPLE != 0 {
        return Err(Error::Config(format!(
            "input size {target_size} must be a positive multiple of {SIZE_MULTIPLE}"
        )));
    }
    Ok(())
}

fn open_image(path: &Path) -> Result<DynamicImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    image::load_from_memory(&bytes).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn resize_map(map: &Map, size: usize) -> Map {
    map.resize_bilinear(size, size)
}

/// Pixel dimensions `(height, width)` of an image file.
pub fn image_dims(path: &Path) -> Result<(usize, usize)> {
    let img = open_image(path)?;
    Ok((img.height() as usize, img.width() as usize))
}

/// Load and resize an RGB / depth / ground-truth triple to
/// `target_size × target_size`. Ground truth is scaled to `[0, 1]` and
/// binarized at 0.5 after resizing; without one the mask is all zeros.
pub fn load_sample(rgb_path: &Path, depth_path: &Path, gt_path: Option<&Path>, target_size: usize) -> Result<RgbdSample> {
    check_target_size(target_size)?;
    let rgb_img = open_image(rgb_path)?.to_rgb8();
    let depth_img = open_image(depth_path)?;

    let (w, h) = (rgb_img.width() as usize, rgb_img.height() as usize);
    let mut rgb = Tensor::zeros([1, 3, h, w]);
    {
        let data = rgb.data_mut();
        for (i, px) in rgb_img.pixels().enumerate() {
            for c in 0..3 {
                data[c * h * w + i] = px[c] as f64;
            }
        }
    }
    let rgb = tensor::resize_bilinear(&rgb, target_size, target_size);

    let depth = match depth_img {
        DynamicImage::ImageLuma16(_) | DynamicImage::ImageLumaA16(_) | DynamicImage::ImageRgb16(_) | DynamicImage::ImageRgba16(_) => {
            let d = depth_img.to_luma16();
            Map::new(d.height() as usize, d.width() as usize, d.pixels().map(|p| p[0] as f64).collect())?
        }
        other => {
            let d = other.to_luma8();
            Map::new(d.height() as usize, d.width() as usize, d.pixels().map(|p| p[0] as f64).collect())?
        }
    };
    let depth = resize_map(&depth, target_size);

    let gt = match gt_path {
        Some(path) => {
            let gt_img = open_image(path)?.to_luma8();
            let gt = Map::new(
                gt_img.height() as usize,
                gt_img.width() as usize,
                gt_img.pixels().map(|p| p[0] as f64 / 255.0).collect(),
            )?;
            binarize(&resize_map(&gt, target_size), 0.5)
        }
        None => Map::filled(target_size, target_size, 0.0),
    };

    let id = rgb_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    RgbdSample::new(id, rgb, depth, gt)
}

/// Save a `[0, 1]` map as an 8-bit grayscale PNG of `round(255 · s)`.
pub fn save_map_png(path: &Path, map: &Map) -> Result<()> {
    let (h, w) = map.dims();
    let pixels: Vec<u8> = map.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let img = image::GrayImage::from_raw(w as u32, h as u32, pixels).expect("buffer matches dimensions");
    img.save(path).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn binarize(map: &Map, threshold: f64) -> Map {
    map.map(|v| if v >= threshold { 1.0 } else { 0.0 })
}

/// Min-max normalize depth to `[0, 255]` and replicate it into three
/// identical channels (gray color mapping). A constant map yields zeros.
pub fn depth_to_three_channel(depth: &Map) -> Result<Tensor> {
    if let Some(bad) = depth.data().iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(Error::Data(format!("depth values must be finite and nonnegative, found {bad}")));
    }
    let (lo, hi) = depth
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let plane: Vec<f64> = if hi > lo {
        let scale = 255.0 / (hi - lo);
        depth.data().iter().map(|&v| ((v - lo) * scale).min(255.0)).collect()
    } else {
        vec![0.0; depth.data().len()]
    };
    let (h, w) = depth.dims();
    let mut data = Vec::with_capacity(3 * plane.len());
    for _ in 0..3 {
        data.extend_from_slice(&plane);
    }
    Tensor::from_vec([1, 3, h, w], data)
}

/// Horizontal flip of all three maps.
pub fn mirror_augment(sample: &RgbdSample) -> RgbdSample {
    RgbdSample {
        id: format!("{}_mirror", sample.id),
        rgb: sample.rgb.flip_horizontal(),
        depth: sample.depth.flip_horizontal(),
        gt: sample.gt.flip_horizontal(),
    }
}

/// Value normalization applied to both modalities before batching:
/// scale `[0, 255]` to `[0, 1]` then subtract a per-channel mean.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InputNorm {
    pub rgb_mean: [f64; 3],
    pub depth_mean: f64,
}

impl InputNorm {
    /// Scaling only, no mean subtraction.
    pub const fn identity() -> Self {
        InputNorm {
            rgb_mean: [0.0; 3],
            depth_mean: 0.0,
        }
    }

    /// Per-channel means of the scaled inputs over a sample set.
    pub fn from_samples(samples: &[RgbdSample]) -> Result<Self> {
        if samples.is_empty() {
            return Ok(Self::identity());
        }
        let mut rgb = [0.0; 3];
        let mut depth = 0.0;
        let mut pixels = 0usize;
        for s in samples {
            let hw = s.height() * s.width();
            for (c, acc) in rgb.iter_mut().enumerate() {
                *acc += s.rgb.plane(0, c).iter().sum::<f64>() / 255.0;
            }
            depth += depth_to_three_channel(&s.depth)?.plane(0, 0).iter().sum::<f64>() / 255.0;
            pixels += hw;
        }
        let n = pixels as f64;
        Ok(InputNorm {
            rgb_mean: rgb.map(|v| v / n),
            depth_mean: depth / n,
        })
    }

    fn apply(&self, t: &Tensor, means: [f64; 3]) -> Tensor {
        let hw = t.height() * t.width();
        let mut out = t.map(|v| v / 255.0);
        for (c, chunk) in out.data_mut().chunks_mut(hw).enumerate() {
            let m = means[c % 3];
            chunk.iter_mut().for_each(|v| *v -= m);
        }
        out
    }

    pub fn rgb(&self, rgb: &Tensor) -> Tensor {
        self.apply(rgb, self.rgb_mean)
    }

    pub fn depth(&self, depth3: &Tensor) -> Tensor {
        self.apply(depth3, [self.depth_mean; 3])
    }
}

/// RGB and three-channel depth stacked along the batch axis:
/// `[2, 3, H, W]`, RGB at index 0 and depth at index 1.
#[derive(Clone, Debug, PartialEq)]
pub struct SiamesePair {
    stacked: Tensor,
}

impl SiamesePair {
    pub const RGB: usize = 0;
    pub const DEPTH: usize = 1;

    /// Stack two `[1, 3, H, W]` tensors.
    pub fn new(rgb: &Tensor, depth3: &Tensor) -> Result<Self> {
        if rgb.shape() != depth3.shape() {
            return Err(Error::Shape(format!(
                "rgb {:?} and depth {:?} must have identical shapes",
                rgb.shape(),
                depth3.shape()
            )));
        }
        let [n, c, _, _] = rgb.shape();
        if n != 1 || c != 3 {
            return Err(Error::Shape(format!(
                "each modality must be [1, 3, H, W], got {:?}",
                rgb.shape()
            )));
        }
        Ok(SiamesePair {
            stacked: Tensor::concat(&[rgb, depth3], 0)?,
        })
    }

    pub fn from_stacked(stacked: Tensor) -> Result<Self> {
        let [n, c, _, _] = stacked.shape();
        if n != 2 || c != 3 {
            return Err(Error::Shape(format!("pair must be [2, 3, H, W], got {:?}", stacked.shape())));
        }
        Ok(SiamesePair { stacked })
    }

    pub fn stacked(&self) -> &Tensor {
        &self.stacked
    }

    pub fn size(&self) -> (usize, usize) {
        (self.stacked.height(), self.stacked.width())
    }

    pub fn rgb(&self) -> Tensor {
        self.stacked.slice_batch(Self::RGB)
    }

    pub fn depth(&self) -> Tensor {
        self.stacked.slice_batch(Self::DEPTH)
    }

    pub fn split(&self) -> (Tensor, Tensor) {
        (self.rgb(), self.depth())
    }

    /// Same pair with the two batch slices exchanged.
    pub fn swapped(&self) -> SiamesePair {
        SiamesePair {
            stacked: Tensor::concat(&[&self.depth(), &self.rgb()], 0).expect("slices share shape"),
        }
    }
}

/// Preprocess a loaded sample and stack it into a Siamese pair.
pub fn form_siamese_pair(sample: &RgbdSample, norm: &InputNorm) -> Result<SiamesePair> {
    let depth3 = depth_to_three_channel(&sample.depth)?;
    SiamesePair::new(&norm.rgb(&sample.rgb), &norm.depth(&depth3))
}

/// Resolved file paths of one on-disk sample.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SamplePaths {
    pub id: String,
    pub rgb: PathBuf,
    pub depth: PathBuf,
    pub gt: Option<PathBuf>,
}

/// A dataset directory with `rgb/`, `depth/` and `gt/` subdirectories.
#[derive(Clone, Debug)]
pub struct DatasetDir {
    root: PathBuf,
    samples: Vec<SamplePaths>,
}

/// Extensions recognised as image files.
pub const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

pub(crate) fn is_image(path: &Path) -> bool {
    path.is_file()
        && path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

fn find_by_stem(dir: &Path, stem: &str) -> Result<PathBuf> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut found: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| is_image(p) && p.file_stem().is_some_and(|s| s == stem))
        .collect();
    found.sort();
    found.into_iter().next().ok_or_else(|| {
        Error::io(
            dir.join(stem),
            std::io::Error::new(std::io::ErrorKind::NotFound, "no file with this stem"),
        )
    })
}

pub(crate) fn sorted_stems(dir: &Path) -> Result<Vec<String>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut stems: Vec<String> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| is_image(p))
        .filter_map(|p| p.file_stem().map(|s| s.to_string_lossy().into_owned()))
        .collect();
    stems.sort();
    stems.dedup();
    Ok(stems)
}

impl DatasetDir {
    /// Labelled dataset: every sample needs a ground-truth file.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        Self::open_with(root.into(), true)
    }

    /// Inputs only; `gt/` is used where present.
    pub fn open_inputs(root: impl Into<PathBuf>) -> Result<Self> {
        Self::open_with(root.into(), false)
    }

    fn open_with(root: PathBuf, labelled: bool) -> Result<Self> {
        let manifest = root.join(MANIFEST_FILE);
        let ids: Vec<String> = if manifest.is_file() {
            fs::read_to_string(&manifest)
                .map_err(|e| Error::io(&manifest, e))?
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(String::from)
                .collect()
        } else {
            sorted_stems(&root.join("rgb"))?
        };
        let gt_dir = root.join("gt");
        let mut samples = Vec::with_capacity(ids.len());
        for id in ids {
            samples.push(SamplePaths {
                rgb: find_by_stem(&root.join("rgb"), &id)?,
                depth: find_by_stem(&root.join("depth"), &id)?,
                gt: if labelled {
                    Some(find_by_stem(&gt_dir, &id)?)
                } else {
                    find_by_stem(&gt_dir, &id).ok()
                },
                id,
            });
        }
        Ok(DatasetDir { root, samples })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn name(&self) -> String {
        self.root
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".into())
    }

    pub fn samples(&self) -> &[SamplePaths] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn load_all(&self, target_size: usize) -> Result<Vec<RgbdSample>> {
        self.samples
            .iter()
            .map(|p| {
                let mut s = load_sample(&p.rgb, &p.depth, p.gt.as_deref(), target_size)?;
                s.id = p.id.clone();
                Ok(s)
            })
            .collect()
    }
}
