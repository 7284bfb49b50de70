//! Summed pixel-wise cross-entropy and the composite objective
//! `l_f + λ · (l_g_rgb + l_g_d)`.

use serde::{Deserialize, Serialize};

use crate::autograd::{binary_cross_entropy_sum, Graph, NodeId};
use crate::dataset::binarize;
use crate::encoder::MAX_STRIDE;
use crate::error::{Error, Result};
use crate::tensor::{Map, Tensor};

/// Default guidance weight: the squared coarse-to-fine resolution ratio.
pub const DEFAULT_LAMBDA: f64 = 256.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_f: f64,
    pub l_g_rgb: f64,
    pub l_g_d: f64,
    pub l_total: f64,
    pub lambda: f64,
}

impl LossReport {
    pub fn new(l_f: f64, l_g_rgb: f64, l_g_d: f64, lambda: f64) -> Self {
        LossReport {
            l_f,
            l_g_rgb,
            l_g_d,
            l_total: l_f + lambda * (l_g_rgb + l_g_d),
            lambda,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.l_f, self.l_g_rgb, self.l_g_d, self.l_total].iter().all(|v| v.is_finite())
    }
}

/// `-Σ [g ln s + (1 - g) ln(1 - s)]` with `s` clamped to `[1e-7, 1 - 1e-7]`.
pub fn cross_entropy(s: &Map, g: &Map) -> Result<f64> {
    s.expect_same_dims(g)?;
    Ok(binary_cross_entropy_sum(s.data(), g.data()))
}

/// Area-average the ground truth over `factor × factor` blocks, then
/// re-binarize at 0.5.
pub fn downsample_gt(gt: &Map, factor: usize) -> Result<Map> {
    let (h, w) = gt.dims();
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::Shape(format!("{h}x{w} ground truth is not divisible by {factor}")));
    }
    let (oh, ow) = (h / factor, w / factor);
    let area = (factor * factor) as f64;
    let avg = Map::from_fn(oh, ow, |y, x| {
        let mut acc = 0.0;
        for yy in y * factor..(y + 1) * factor {
            for xx in x * factor..(x + 1) * factor {
                acc += gt.get(yy, xx);
            }
        }
        acc / area
    });
    Ok(binarize(&avg, 0.5))
}

fn coarse_target(gt: &Map, coarse: (usize, usize)) -> Result<Map> {
    let (h, w) = gt.dims();
    if coarse.0 * MAX_STRIDE != h || coarse.1 * MAX_STRIDE != w {
        return Err(Error::Shape(format!(
            "coarse map {}x{} is not 1/{MAX_STRIDE} of {h}x{w}",
            coarse.0, coarse.1
        )));
    }
    downsample_gt(gt, MAX_STRIDE)
}

/// Evaluate the composite loss on probability maps.
pub fn total_loss(s_f: &Map, s_c_rgb: &Map, s_c_d: &Map, gt: &Map, lambda: f64) -> Result<LossReport> {
    s_f.expect_same_dims(gt)?;
    s_c_rgb.expect_same_dims(s_c_d)?;
    let coarse = coarse_target(gt, s_c_rgb.dims())?;
    Ok(LossReport::new(
        cross_entropy(s_f, gt)?,
        cross_entropy(s_c_rgb, &coarse)?,
        cross_entropy(s_c_d, &coarse)?,
        lambda,
    ))
}

/// Loss nodes recorded on a graph, for training.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub total: NodeId,
    pub l_f: NodeId,
    pub l_g_rgb: Option<NodeId>,
    pub l_g_d: Option<NodeId>,
}

impl LossNodes {
    pub fn report(&self, g: &Graph, lambda: f64) -> LossReport {
        let v = |id: Option<NodeId>| id.map(|i| g.value(i).item()).unwrap_or(0.0);
        LossReport {
            l_f: g.value(self.l_f).item(),
            l_g_rgb: v(self.l_g_rgb),
            l_g_d: v(self.l_g_d),
            l_total: g.value(self.total).item(),
            lambda,
        }
    }
}

/// Record the composite loss on `g`. `s_f` and the coarse maps are
/// probability nodes of shape `[1, 1, ·, ·]`; either coarse map may be
/// absent for single-stream models.
pub fn total_loss_graph(
    g: &mut Graph,
    s_f: NodeId,
    s_c_rgb: Option<NodeId>,
    s_c_d: Option<NodeId>,
    gt: &Map,
    lambda: f64,
) -> Result<LossNodes> {
    let fine_target = gt.to_tensor();
    let l_f = g.cross_entropy(s_f, &fine_target)?;
    let mut guidance: Vec<NodeId> = Vec::new();
    let mut coarse_term = |g: &mut Graph, node: Option<NodeId>| -> Result<Option<NodeId>> {
        let Some(node) = node else { return Ok(None) };
        let t = g.value(node);
        let target: Tensor = coarse_target(gt, (t.height(), t.width()))?.to_tensor();
        let l = g.cross_entropy(node, &target)?;
        guidance.push(l);
        Ok(Some(l))
    };
    let l_g_rgb = coarse_term(g, s_c_rgb)?;
    let l_g_d = coarse_term(g, s_c_d)?;
    let total = match guidance.as_slice() {
        [] => l_f,
        [one] => {
            let scaled = g.scale(*one, lambda);
            g.add(l_f, scaled)?
        }
        [a, b] => {
            let sum = g.add(*a, *b)?;
            let scaled = g.scale(sum, lambda);
            g.add(l_f, scaled)?
        }
        _ => unreachable!(),
    };
    Ok(LossNodes {
        total,
        l_f,
        l_g_rgb,
        l_g_d,
    })
}
