//! Python bindings. Images cross the boundary as nested lists: RGB as
//! `H × W × 3` values in `[0, 255]`, depth and saliency maps as `H × W`.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use rgbd_sod::checkpoint::{self, Checkpoint};
use rgbd_sod::config::RunConfig;
use rgbd_sod::dataset::{DatasetDir, RgbdSample};
use rgbd_sod::decoder;
use rgbd_sod::metrics::{self, MetricsReport};
use rgbd_sod::model::{Model, Variant};
use rgbd_sod::synth::{self, SynthConfig};
use rgbd_sod::tensor::{Map, Tensor};
use rgbd_sod::trainer;
use rgbd_sod::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::Numerical(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

type Grid = Vec<Vec<f64>>;

fn to_map(rows: &Grid) -> PyResult<Map> {
    let h = rows.len();
    let w = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != w) {
        return Err(PyValueError::new_err("ragged rows"));
    }
    Map::new(h, w, rows.concat()).map_err(py_err)
}

fn from_map(m: &Map) -> Grid {
    m.data().chunks(m.width()).map(<[f64]>::to_vec).collect()
}

fn rgb_tensor(rgb: &[Vec<Vec<f64>>]) -> PyResult<Tensor> {
    let h = rgb.len();
    let w = rgb.first().map_or(0, Vec::len);
    let mut data = vec![0.0; 3 * h * w];
    for (y, row) in rgb.iter().enumerate() {
        if row.len() != w {
            return Err(PyValueError::new_err("ragged rows"));
        }
        for (x, px) in row.iter().enumerate() {
            if px.len() != 3 {
                return Err(PyValueError::new_err("rgb pixels need 3 values"));
            }
            for c in 0..3 {
                data[(c * h + y) * w + x] = px[c];
            }
        }
    }
    Tensor::from_vec([1, 3, h, w], data).map_err(py_err)
}

fn report_dict(r: &MetricsReport) -> BTreeMap<&'static str, f64> {
    BTreeMap::from([
        ("s_alpha", r.s_alpha),
        ("f_beta_max", r.f_beta_max),
        ("e_phi_max", r.e_phi_max),
        ("mae", r.mae),
        ("samples", r.samples as f64),
    ])
}

fn run_config(variant: Option<&str>, settings: Option<BTreeMap<String, String>>) -> PyResult<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(v) = variant {
        let v: Variant = v.parse().map_err(py_err)?;
        cfg.variant = cfg.variant.with_variant(v);
    }
    for (k, v) in settings.unwrap_or_default() {
        cfg.set(&k, &v).map_err(py_err)?;
    }
    cfg.validate().map_err(py_err)?;
    Ok(cfg)
}

/// A saliency network with its input normalization.
#[pyclass(name = "Model", module = "rgbd_sod_py")]
struct PyModel {
    model: Model,
    cfg: RunConfig,
}

#[pymethods]
impl PyModel {
    /// Build an untrained network. `variant` is one of A–F; `settings`
    /// overrides configuration keys, e.g. `{"k": "8"}`.
    #[new]
    #[pyo3(signature = (variant=None, settings=None))]
    fn new(variant: Option<&str>, settings: Option<BTreeMap<String, String>>) -> PyResult<Self> {
        let cfg = run_config(variant, settings)?;
        let model = Model::build(cfg.variant, cfg.train.seed, None).map_err(py_err)?;
        Ok(PyModel { model, cfg })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = checkpoint::load(&path).map_err(py_err)?;
        let cfg = ck.config;
        Ok(PyModel {
            model: ck.into_model(None).map_err(py_err)?,
            cfg,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        checkpoint::save(&path, &Checkpoint::from_model(&self.model, &self.cfg.train, &[])).map_err(py_err)
    }

    /// Configuration as `key -> value` strings.
    fn config(&self) -> BTreeMap<String, String> {
        self.cfg.to_kv().iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.model.parameter_count()
    }

    /// Train on a dataset directory; returns the mean loss of each epoch.
    fn fit(&mut self, data_dir: PathBuf) -> PyResult<Vec<f64>> {
        let samples = DatasetDir::open(&data_dir)
            .and_then(|ds| ds.load_all(self.cfg.variant.input_size))
            .map_err(py_err)?;
        let out = trainer::train(&mut self.model, &samples, &self.cfg.train, |_, _| Ok(())).map_err(py_err)?;
        Ok(out.epochs.iter().map(|e| e.mean_loss).collect())
    }

    /// Saliency probabilities at the model's input size. Returns a dict
    /// with `s_f` and, when present, `s_c_rgb` and `s_c_d`.
    fn predict(&self, rgb: Vec<Vec<Vec<f64>>>, depth: Grid) -> PyResult<BTreeMap<&'static str, Grid>> {
        let depth = to_map(&depth)?;
        let gt = Map::filled(depth.height(), depth.width(), 0.0);
        let sample = RgbdSample::new("input", rgb_tensor(&rgb)?, depth, gt).map_err(py_err)?;
        let pred = trainer::infer(&self.model, &sample).map_err(py_err)?;
        let mut out = BTreeMap::from([("s_f", from_map(&pred.s_f))]);
        if let Some(m) = &pred.s_c_rgb {
            out.insert("s_c_rgb", from_map(m));
        }
        if let Some(m) = &pred.s_c_d {
            out.insert("s_c_d", from_map(m));
        }
        Ok(out)
    }

    fn __repr__(&self) -> String {
        let v = &self.cfg.variant;
        format!("Model(fusion={}, modalities={}, k={}, input_size={})", v.fusion, v.modalities, v.k, v.input_size)
    }
}

/// Scores of one prediction against a binary ground truth.
#[pyfunction]
fn evaluate(pred: Grid, gt: Grid) -> PyResult<BTreeMap<&'static str, Option<f64>>> {
    let m = metrics::evaluate_sample("sample", &to_map(&pred)?, &to_map(&gt)?).map_err(py_err)?;
    Ok(BTreeMap::from([
        ("s_alpha", Some(m.s_alpha)),
        ("f_beta_max", m.f_beta_max),
        ("e_phi_max", Some(m.e_phi_max)),
        ("mae", Some(m.mae)),
    ]))
}

/// Corpus scores for same-named PNG maps in two directories.
#[pyfunction]
#[pyo3(signature = (pred_dir, gt_dir, normalize=false))]
fn evaluate_dirs(pred_dir: PathBuf, gt_dir: PathBuf, normalize: bool) -> PyResult<BTreeMap<&'static str, f64>> {
    let (report, _) = metrics::evaluate_dirs(&pred_dir, &gt_dir, normalize).map_err(py_err)?;
    Ok(report_dict(&report))
}

/// Cross-modal fusion `a + b + a ⊙ b` of two `C × H × W` feature maps.
#[pyfunction]
fn cm_fuse(rgb: Vec<Grid>, depth: Vec<Grid>) -> PyResult<Vec<Grid>> {
    let stack = |planes: &[Grid]| -> PyResult<Tensor> {
        let maps = planes.iter().map(to_map).collect::<PyResult<Vec<_>>>()?;
        let (h, w) = maps.first().map_or((0, 0), Map::dims);
        let data: Vec<f64> = maps.iter().flat_map(|m| m.data().iter().copied()).collect();
        Tensor::from_vec([1, maps.len(), h, w], data).map_err(py_err)
    };
    let fused = decoder::cm_fuse(&stack(&rgb)?, &stack(&depth)?).map_err(py_err)?;
    Ok((0..fused.channels()).map(|c| from_map(&Map::from_tensor_plane(&fused, 0, c))).collect())
}

/// Write a synthetic RGB-D dataset to `out_dir`.
#[pyfunction]
#[pyo3(signature = (out_dir, count=8, size=64, seed=0))]
fn generate_synth(out_dir: PathBuf, count: usize, size: usize, seed: u64) -> PyResult<()> {
    let samples = synth::generate(count, &SynthConfig { size, ..Default::default() }, seed).map_err(py_err)?;
    synth::write_dataset(&out_dir, &samples).map_err(py_err)
}

#[pymodule]
fn rgbd_sod_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_dirs, m)?)?;
    m.add_function(wrap_pyfunction!(cm_fuse, m)?)?;
    m.add_function(wrap_pyfunction!(generate_synth, m)?)?;
    Ok(())
}
