//! Finite-difference checks of every differentiable operation and of the
//! assembled network.

mod common;

use common::{max_relative_error, numeric_gradient, random_mask, random_tensor, rng, FD_FLOOR, FD_STEP, GRAD_TOL};
use rand::Rng;
use rgbd_sod::autograd::{Graph, NodeId};
use rgbd_sod::dataset::SiamesePair;
use rgbd_sod::model::{build_variant, Variant, VariantConfig};
use rgbd_sod::tensor::{ConvSpec, Tensor};
use rgbd_sod::trainer::loss_and_grads;

/// Check d(Σ proj ⊙ op(inputs)) / d(inputs) for a graph-built op.
fn check_op(inputs: &[Tensor], build: impl Fn(&mut Graph, &[NodeId]) -> NodeId) -> f64 {
    let mut r = rng(1000 + inputs.len() as u64);
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = build(&mut g, &ids);
    let proj = random_tensor(&mut r, g.value(out).shape(), -1.0, 1.0);
    let p = g.input(proj.clone());
    let prod = g.mul(out, p).unwrap();
    let root = g.sum(prod);
    let grads = g.backward(root).unwrap();

    let eval = |values: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = values.iter().map(|t| g.input(t.clone())).collect();
        let out = build(&mut g, &ids);
        g.value(out).data().iter().zip(proj.data()).map(|(a, b)| a * b).sum()
    };
    let mut worst: f64 = 0.0;
    for (i, t) in inputs.iter().enumerate() {
        let numeric = numeric_gradient(t.data(), FD_STEP, |v| {
            let mut vals = inputs.to_vec();
            vals[i] = Tensor::from_vec(t.shape(), v.to_vec()).unwrap();
            eval(&vals)
        });
        let analytic = grads.get(ids[i]).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; t.len()]);
        worst = worst.max(max_relative_error(&analytic, &numeric, FD_FLOOR));
    }
    worst
}

#[test]
fn convolution_variants() {
    let mut r = rng(1);
    for (spec, k) in [
        (ConvSpec::same(3, 1), 3),
        (ConvSpec::new(2, 1, 1), 3),
        (ConvSpec::same(3, 2), 3),
        (ConvSpec::same(5, 1), 5),
        (ConvSpec::new(1, 0, 1), 1),
    ] {
        let x = random_tensor(&mut r, [2, 3, 6, 6], -1.0, 1.0);
        let w = random_tensor(&mut r, [4, 3, k, k], -0.5, 0.5);
        let b = random_tensor(&mut r, [1, 4, 1, 1], -0.5, 0.5);
        let err = check_op(&[x, w, b], |g, ids| g.conv2d(ids[0], ids[1], Some(ids[2]), spec).unwrap());
        assert!(err < GRAD_TOL, "{spec:?}: {err:e}");
    }
}

#[test]
fn pooling_resizing_and_pointwise() {
    let mut r = rng(2);
    let x = random_tensor(&mut r, [1, 2, 5, 5], -1.0, 1.0);
    assert!(check_op(&[x.clone()], |g, ids| g.max_pool3(ids[0])) < GRAD_TOL);
    assert!(check_op(&[x.clone()], |g, ids| g.resize_bilinear(ids[0], 10, 10)) < GRAD_TOL);
    assert!(check_op(&[x.clone()], |g, ids| g.resize_bilinear(ids[0], 3, 7)) < GRAD_TOL);
    assert!(check_op(&[x.clone()], |g, ids| g.sigmoid(ids[0])) < GRAD_TOL);
    assert!(check_op(&[x.clone()], |g, ids| g.scale(ids[0], -2.5)) < GRAD_TOL);
    // keep inputs away from the kink
    let shifted = x.map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
    assert!(check_op(&[shifted], |g, ids| g.relu(ids[0])) < GRAD_TOL);
}

#[test]
fn structural_ops() {
    let mut r = rng(3);
    let a = random_tensor(&mut r, [1, 2, 3, 3], -1.0, 1.0);
    let b = random_tensor(&mut r, [1, 3, 3, 3], -1.0, 1.0);
    let c = random_tensor(&mut r, [1, 2, 3, 3], -1.0, 1.0);
    let err = check_op(&[a.clone(), b, c.clone()], |g, ids| g.concat_channels(ids).unwrap());
    assert!(err < GRAD_TOL, "{err:e}");
    let err = check_op(&[a.clone(), c.clone()], |g, ids| {
        let s = g.stack_batch(ids).unwrap();
        g.slice_batch(s, 1).unwrap()
    });
    assert!(err < GRAD_TOL, "{err:e}");
    let err = check_op(&[a, c], |g, ids| {
        let p = g.mul(ids[0], ids[1]).unwrap();
        g.add(p, ids[0]).unwrap()
    });
    assert!(err < GRAD_TOL, "{err:e}");
}

#[test]
fn clamped_cross_entropy_passes_gradient_through() {
    // probabilities beyond the clamp still receive the clamped-point slope
    let mut g = Graph::new();
    let p = g.input(Tensor::from_vec([1, 1, 1, 2], vec![1.0, 0.0]).unwrap());
    let l = g.cross_entropy(p, &Tensor::from_vec([1, 1, 1, 2], vec![1.0, 1.0]).unwrap()).unwrap();
    let grad = g.backward(l).unwrap().get(p).unwrap().clone();
    assert!((grad.data()[0] + 1.0 / (1.0 - 1e-7)).abs() < 1e-9);
    assert!((grad.data()[1] + 1e7).abs() < 1e-3);
}

/// Spot-check parameter gradients of whole variants on random entries.
/// Biases are randomized first: at their zero initialization many ReLU
/// inputs sit exactly on the kink, where central differences average the
/// two one-sided slopes.
#[test]
fn network_parameter_gradients() {
    let cfg = VariantConfig {
        k: 8,
        input_size: 32,
        backbone_channels: [4, 4, 8, 8, 8, 8],
        ..VariantConfig::default()
    };
    for v in [Variant::A, Variant::C, Variant::D, Variant::F] {
        let mut model = build_variant(cfg.with_variant(v), 5).unwrap();
        let mut r = rng(6);
        let ids: Vec<_> = model.params().ids().collect();
        for id in ids {
            if model.params().name(id).ends_with(".bias") {
                for b in model.params_mut().get_mut(id).data_mut() {
                    *b = r.random_range(-0.1..0.1);
                }
            }
        }
        let pair = SiamesePair::from_stacked(random_tensor(&mut r, [2, 3, 32, 32], -1.0, 1.0)).unwrap();
        let gt = random_mask(&mut r, 32, 32, 3);
        let (_, grads) = loss_and_grads(&model, &pair, &gt).unwrap();
        let mut probe = model.params().clone();
        let mut worst: f64 = 0.0;
        for (pid, grad) in grads.iter().step_by(3) {
            let i = r.random_range(0..grad.len());
            let orig = probe.get(*pid).data()[i];
            let mut eval = |delta: f64| {
                probe.get_mut(*pid).data_mut()[i] = orig + delta;
                let mut m = build_variant(cfg.with_variant(v), 0).unwrap();
                *m.params_mut() = probe.clone();
                loss_and_grads(&m, &pair, &gt).unwrap().0.l_total
            };
            let numeric = (eval(1e-6) - eval(-1e-6)) / 2e-6;
            probe.get_mut(*pid).data_mut()[i] = orig;
            let a = grad.data()[i];
            // summed losses are O(1e4); allow for the finite-difference noise floor
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-2));
        }
        assert!(worst < 1e-3, "variant {v}: {worst:e}");
    }
}
