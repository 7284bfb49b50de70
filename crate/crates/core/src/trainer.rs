//! SGD training loop and model evaluation.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Graph;
use crate::dataset::{mirror_augment, InputNorm, RgbdSample, SiamesePair};
use crate::error::{Error, Result};
use crate::loss::{total_loss_graph, LossReport};
use crate::metrics::{aggregate, evaluate_sample, MetricsReport, SampleMetrics};
use crate::model::{Model, Prediction};
use crate::params::ParamId;
use crate::tensor::Tensor;

/// Header of the loss log.
pub const LOSS_CSV_HEADER: &str = "epoch,step,l_f,l_g_rgb,l_g_d,l_total";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub mirror_augment: bool,
    pub seed: u64,
    /// Sample pairs per update.
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 3e-7,
            momentum: 0.99,
            weight_decay: 5e-4,
            epochs: 200,
            mirror_augment: true,
            seed: 0,
            batch_size: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr = {} must be positive", self.lr)));
        }
        if !finite_nonneg(self.momentum) || self.momentum >= 1.0 {
            return Err(Error::Config(format!("momentum = {} must lie in [0, 1)", self.momentum)));
        }
        if !finite_nonneg(self.weight_decay) {
            return Err(Error::Config(format!("weight_decay = {} must be nonnegative", self.weight_decay)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Loss of one update step, summed over its batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: LossReport,
}

impl LossRecord {
    pub fn csv_row(&self) -> String {
        let l = &self.loss;
        format!("{},{},{},{},{},{}", self.epoch, self.step, l.l_f, l.l_g_rgb, l.l_g_d, l.l_total)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochSummary {
    /// 1-based.
    pub epoch: usize,
    /// Sum of `l_total` over the epoch divided by the number of pairs.
    pub mean_loss: f64,
    /// Whether this epoch has the lowest mean loss so far.
    pub is_best: bool,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOutcome {
    pub records: Vec<LossRecord>,
    pub epochs: Vec<EpochSummary>,
}

impl TrainOutcome {
    pub fn best(&self) -> Option<&EpochSummary> {
        self.epochs.iter().filter(|e| e.is_best).last()
    }

    pub fn loss_csv(&self) -> String {
        let mut s = String::from(LOSS_CSV_HEADER);
        s.push('\n');
        for r in &self.records {
            s.push_str(&r.csv_row());
            s.push('\n');
        }
        s
    }
}

pub fn write_loss_csv(path: &Path, records: &[LossRecord]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let mut emit = || -> std::io::Result<()> {
        writeln!(w, "{LOSS_CSV_HEADER}")?;
        for r in records {
            writeln!(w, "{}", r.csv_row())?;
        }
        w.flush()
    };
    emit().map_err(|e| Error::io(path, e))
}

struct Sgd {
    velocity: Vec<Tensor>,
}

impl Sgd {
    fn new(model: &Model) -> Self {
        Sgd {
            velocity: model.params().iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect(),
        }
    }

    /// `v ← μ v − lr (∇ + wd · w)`, `w ← w + v`.
    fn step(&mut self, model: &mut Model, grads: &[(ParamId, Tensor)], cfg: &TrainConfig) {
        for (id, grad) in grads {
            let w = model.params_mut().get_mut(*id);
            let v = &mut self.velocity[id.index()];
            for ((wi, vi), gi) in w.data_mut().iter_mut().zip(v.data_mut()).zip(grad.data()) {
                *vi = cfg.momentum * *vi - cfg.lr * (gi + cfg.weight_decay * *wi);
                *wi += *vi;
            }
        }
    }
}

/// Forward, loss, and parameter gradients for one pair.
pub fn loss_and_grads(model: &Model, pair: &SiamesePair, gt: &crate::tensor::Map) -> Result<(LossReport, Vec<(ParamId, Tensor)>)> {
    let mut g = Graph::new();
    let out = model.forward(&mut g, pair)?;
    let s_f = g.sigmoid(out.s_f);
    let c_rgb = out.coarse_rgb.map(|n| g.sigmoid(n));
    let c_d = out.coarse_d.map(|n| g.sigmoid(n));
    let lambda = model.config().lambda;
    let nodes = total_loss_graph(&mut g, s_f, c_rgb, c_d, gt, lambda)?;
    let report = nodes.report(&g, lambda);
    if !report.is_finite() {
        return Ok((report, Vec::new()));
    }
    let grads = g.backward(nodes.total)?.param_grads(&g);
    Ok((report, grads))
}

fn add_reports(a: LossReport, b: LossReport) -> LossReport {
    LossReport {
        l_f: a.l_f + b.l_f,
        l_g_rgb: a.l_g_rgb + b.l_g_rgb,
        l_g_d: a.l_g_d + b.l_g_d,
        l_total: a.l_total + b.l_total,
        lambda: a.lambda,
    }
}

/// Train in place. The input normalization is fitted on `samples` first.
/// `on_epoch` runs after every epoch, e.g. to write checkpoints.
pub fn train<F>(model: &mut Model, samples: &[RgbdSample], cfg: &TrainConfig, mut on_epoch: F) -> Result<TrainOutcome>
where
    F: FnMut(&Model, &EpochSummary) -> Result<()>,
{
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    model.set_norm(InputNorm::from_samples(samples)?);
    let mut data: Vec<RgbdSample> = samples.to_vec();
    if cfg.mirror_augment {
        data.extend(samples.iter().map(mirror_augment));
    }
    let pairs = data
        .iter()
        .map(|s| Ok((model.prepare(s)?, s.gt.clone())))
        .collect::<Result<Vec<_>>>()?;
    let size = model.config().input_size;
    if let Some((_, gt)) = pairs.iter().find(|(_, gt)| gt.dims() != (size, size)) {
        return Err(Error::Data(format!("ground truth is {:?}, model expects {size}x{size}", gt.dims())));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5348_5546_464c_45);
    let mut sgd = Sgd::new(model);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut outcome = TrainOutcome::default();
    let mut best = f64::INFINITY;
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            step += 1;
            let mut report: Option<LossReport> = None;
            let mut acc: Vec<Option<Tensor>> = vec![None; model.params().len()];
            for &i in batch {
                let (pair, gt) = &pairs[i];
                let (r, grads) = loss_and_grads(model, pair, gt)?;
                if !r.is_finite() {
                    return Err(Error::Numerical(format!(
                        "non-finite loss at epoch {epoch}, step {step} (sample {}): l_total = {}",
                        data[i].id, r.l_total
                    )));
                }
                report = Some(report.map_or(r, |a| add_reports(a, r)));
                for (id, grad) in grads {
                    match &mut acc[id.index()] {
                        Some(t) => t.add_assign(&grad),
                        slot => *slot = Some(grad),
                    }
                }
            }
            let grads: Vec<(ParamId, Tensor)> = model
                .params()
                .ids()
                .zip(acc)
                .filter_map(|(id, g)| g.map(|g| (id, g)))
                .collect();
            if grads.iter().any(|(_, g)| g.data().iter().any(|v| !v.is_finite())) {
                return Err(Error::Numerical(format!("non-finite gradient at epoch {epoch}, step {step}")));
            }
            sgd.step(model, &grads, cfg);
            let report = report.expect("non-empty batch");
            epoch_total += report.l_total;
            outcome.records.push(LossRecord { epoch, step, loss: report });
        }
        let mean_loss = epoch_total / pairs.len() as f64;
        let is_best = mean_loss < best;
        if is_best {
            best = mean_loss;
        }
        let summary = EpochSummary { epoch, mean_loss, is_best };
        log::info!("epoch {epoch}: mean loss {mean_loss:.4}{}", if is_best { " (best)" } else { "" });
        on_epoch(model, &summary)?;
        outcome.epochs.push(summary);
    }
    Ok(outcome)
}

/// Probability maps for one sample.
pub fn infer(model: &Model, sample: &RgbdSample) -> Result<Prediction> {
    model.predict(sample)
}

/// Score the model's final maps against each sample's ground truth.
pub fn evaluate_model(model: &Model, samples: &[RgbdSample]) -> Result<(MetricsReport, Vec<SampleMetrics>)> {
    let per_sample = samples
        .iter()
        .map(|s| {
            let pred = model.predict(s)?.s_f;
            let (h, w) = s.gt.dims();
            let pred = if pred.dims() == (h, w) { pred } else { pred.resize_bilinear(h, w) };
            evaluate_sample(&s.id, &pred, &s.gt)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((aggregate(&per_sample)?, per_sample))
}
