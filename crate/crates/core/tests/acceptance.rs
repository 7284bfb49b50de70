//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run with `cargo test -p rgbd-sod --test acceptance`.

mod common;

use std::f64::consts::LN_2;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use common::{max_relative_error, numeric_gradient, oracle, random_mask, random_prediction, random_tensor, rng};
use common::{FD_FLOOR, FD_STEP, GRAD_TOL};
use rgbd_sod::autograd::{sigmoid, Graph};
use rgbd_sod::dataset::SiamesePair;
use rgbd_sod::decoder::{cm_fuse, fa_forward, fa_input_channels, FaModule, FusionMode};
use rgbd_sod::encoder::LEVELS;
use rgbd_sod::loss::{cross_entropy, total_loss, total_loss_graph, DEFAULT_LAMBDA};
use rgbd_sod::metrics::{evaluate_sample, mae, max_e_measure, max_f_measure, s_measure};
use rgbd_sod::model::{build_variant, Model, Variant, VariantConfig};
use rgbd_sod::params::ParamStore;
use rgbd_sod::synth::{generate, SynthConfig};
use rgbd_sod::tensor::{Map, Tensor};
use rgbd_sod::trainer::{evaluate_model, train, TrainConfig};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn t(v: &[f64]) -> Tensor {
    Tensor::from_vec([1, v.len(), 1, 1], v.to_vec()).unwrap()
}

fn fusion_algebra() -> Outcome {
    ensure!(cm_fuse(&t(&[1.0, 2.0]), &t(&[3.0, -1.0])).unwrap().data() == [7.0, -1.0], "hand example");
    let mut r = rng(11);
    for _ in 0..50 {
        let a = random_tensor(&mut r, [1, 4, 5, 5], -3.0, 3.0);
        let b = random_tensor(&mut r, [1, 4, 5, 5], -3.0, 3.0);
        ensure!(cm_fuse(&a, &b).unwrap() == cm_fuse(&b, &a).unwrap(), "not symmetric");
        ensure!(cm_fuse(&a, &Tensor::zeros(a.shape())).unwrap() == a, "zero is not an identity");
    }
    Ok("[7, -1] exact; symmetry and zero identity on 50 random pairs".into())
}

fn full_size_config(size: usize) -> VariantConfig {
    VariantConfig {
        input_size: size,
        ..VariantConfig::default()
    }
}

fn shape_contract() -> Outcome {
    let start = Instant::now();
    for size in [32, 64, 320] {
        let model = build_variant(full_size_config(size), 0).unwrap();
        let mut r = rng(size as u64);
        let pair = SiamesePair::from_stacked(random_tensor(&mut r, [2, 3, size, size], -1.0, 1.0)).unwrap();
        let mut g = Graph::new();
        let out = model.forward(&mut g, &pair).unwrap();
        let ratios = [1, 2, 4, 8, 16, 16];
        for (h, id) in out.pyramid.iter().enumerate() {
            let s = g.value(*id).shape();
            ensure!(s[0] == 2 && s[2] == size / ratios[h] && s[3] == size / ratios[h], "size {size} level {} is {s:?}", h + 1);
        }
        for c in [out.coarse_rgb, out.coarse_d] {
            let s = g.value(c.unwrap()).shape();
            ensure!(s == [1, 1, size / 16, size / 16], "size {size} coarse map {s:?}");
        }
        let s = g.value(out.s_f).shape();
        ensure!(s == [1, 1, size, size], "size {size} final map {s:?}");
    }
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(10), "took {elapsed:?}");
    Ok(format!("sizes 32/64/320 at k = 64 in {:.2}s", elapsed.as_secs_f64()))
}

fn siamese_equivariance() -> Outcome {
    let model = build_variant(full_size_config(64), 3).unwrap();
    let mut r = rng(5);
    let pair = SiamesePair::from_stacked(random_tensor(&mut r, [2, 3, 64, 64], -1.0, 1.0)).unwrap();
    let mut g1 = Graph::new();
    let a = model.forward(&mut g1, &pair).unwrap();
    let mut g2 = Graph::new();
    let b = model.forward(&mut g2, &pair.swapped()).unwrap();
    for h in 0..LEVELS {
        let (x, y) = (g1.value(a.pyramid[h]), g2.value(b.pyramid[h]));
        ensure!(x.slice_batch(0) == y.slice_batch(1) && x.slice_batch(1) == y.slice_batch(0), "level {} not swapped", h + 1);
    }
    ensure!(g1.value(a.coarse_rgb.unwrap()) == g2.value(b.coarse_d.unwrap()), "s_c_rgb vs swapped s_c_d");
    ensure!(g1.value(a.coarse_d.unwrap()) == g2.value(b.coarse_rgb.unwrap()), "s_c_d vs swapped s_c_rgb");
    Ok("all six levels and both coarse maps swap bit-exactly".into())
}

/// Weighted sum of a tensor, to turn outputs into a scalar objective.
fn project(values: &[f64], weights: &[f64]) -> f64 {
    values.iter().zip(weights).map(|(a, b)| a * b).sum()
}

fn gradient_checks() -> Outcome {
    let start = Instant::now();
    let mut r = rng(21);
    let mut worst = Vec::new();

    // cm_fuse, differentiated through the graph's fusion node
    let shape = [1, 4, 4, 4];
    let a = random_tensor(&mut r, shape, -2.0, 2.0);
    let b = random_tensor(&mut r, shape, -2.0, 2.0);
    let proj = random_tensor(&mut r, shape, -1.0, 1.0);
    let mut g = Graph::new();
    let stacked = g.input(Tensor::concat(&[&a, &b], 0).unwrap());
    let fused = FusionMode::Cm.apply(&mut g, stacked).unwrap();
    let pw = g.input(proj.clone());
    let prod = g.mul(fused, pw).unwrap();
    let root = g.sum(prod);
    let analytic = g.backward(root).unwrap().get(stacked).unwrap().clone();
    let joint: Vec<f64> = a.data().iter().chain(b.data()).copied().collect();
    let n = a.len();
    let numeric = numeric_gradient(&joint, FD_STEP, |x| {
        let ta = Tensor::from_vec(shape, x[..n].to_vec()).unwrap();
        let tb = Tensor::from_vec(shape, x[n..].to_vec()).unwrap();
        project(cm_fuse(&ta, &tb).unwrap().data(), proj.data())
    });
    worst.push(("cm_fuse", max_relative_error(analytic.data(), &numeric, FD_FLOOR)));

    // fa_forward: gradient with respect to the input and every parameter
    let mut store = ParamStore::new();
    let fa = FaModule::new(&mut store, &mut r, "fa", 6, 8, true).unwrap();
    let x = random_tensor(&mut r, [1, 6, 4, 4], -1.0, 1.0);
    let proj = random_tensor(&mut r, [1, 8, 4, 4], -1.0, 1.0);
    let mut g = Graph::new();
    let xin = g.input(x.clone());
    let y = fa.forward(&mut g, &store, xin).unwrap();
    let pw = g.input(proj.clone());
    let prod = g.mul(y, pw).unwrap();
    let root = g.sum(prod);
    let grads = g.backward(root).unwrap();
    let numeric = numeric_gradient(x.data(), FD_STEP, |v| {
        let xt = Tensor::from_vec(x.shape(), v.to_vec()).unwrap();
        project(fa_forward(&fa, &store, &xt).unwrap().data(), proj.data())
    });
    let mut fa_err = max_relative_error(grads.get(xin).unwrap().data(), &numeric, FD_FLOOR);
    for (pid, grad) in grads.param_grads(&g) {
        let base = store.get(pid).clone();
        let numeric = numeric_gradient(base.data(), FD_STEP, |v| {
            let mut s = store.clone();
            s.set(pid, Tensor::from_vec(base.shape(), v.to_vec()).unwrap()).unwrap();
            project(fa_forward(&fa, &s, &x).unwrap().data(), proj.data())
        });
        fa_err = fa_err.max(max_relative_error(grad.data(), &numeric, FD_FLOOR));
    }
    worst.push(("fa_forward", fa_err));

    // cross_entropy with respect to the probabilities
    let s = random_tensor(&mut r, [1, 1, 4, 4], 0.05, 0.95);
    let gt = random_mask(&mut r, 4, 4, 5).to_tensor();
    let mut g = Graph::new();
    let sp = g.input(s.clone());
    let l = g.cross_entropy(sp, &gt).unwrap();
    let analytic = g.backward(l).unwrap().get(sp).unwrap().clone();
    let gt_map = Map::from_tensor_plane(&gt, 0, 0);
    let numeric = numeric_gradient(s.data(), FD_STEP, |v| cross_entropy(&Map::new(4, 4, v.to_vec()).unwrap(), &gt_map).unwrap());
    worst.push(("cross_entropy", max_relative_error(analytic.data(), &numeric, FD_FLOOR)));

    // total_loss with respect to the fine and both coarse logit maps; the
    // coarse maps are 1/16 of the fine map, so a 4×4 coarse grid needs a
    // 64×64 fine map
    let fine = random_tensor(&mut r, [1, 1, 64, 64], -3.0, 3.0);
    let c_rgb = random_tensor(&mut r, [1, 1, 4, 4], -3.0, 3.0);
    let c_d = random_tensor(&mut r, [1, 1, 4, 4], -3.0, 3.0);
    let gt = random_mask(&mut r, 64, 64, 2);
    let mut g = Graph::new();
    let ids = [g.input(fine.clone()), g.input(c_rgb.clone()), g.input(c_d.clone())];
    let probs = ids.map(|id| g.sigmoid(id));
    let nodes = total_loss_graph(&mut g, probs[0], Some(probs[1]), Some(probs[2]), &gt, DEFAULT_LAMBDA).unwrap();
    let grads = g.backward(nodes.total).unwrap();
    let analytic: Vec<f64> = ids.iter().flat_map(|id| grads.get(*id).unwrap().data().to_vec()).collect();
    let joint: Vec<f64> = fine.data().iter().chain(c_rgb.data()).chain(c_d.data()).copied().collect();
    let numeric = numeric_gradient(&joint, FD_STEP, |v| {
        let m = |range: std::ops::Range<usize>, side: usize| Map::new(side, side, v[range].iter().map(|&z| sigmoid(z)).collect()).unwrap();
        total_loss(&m(0..4096, 64), &m(4096..4112, 4), &m(4112..4128, 4), &gt, DEFAULT_LAMBDA)
            .unwrap()
            .l_total
    });
    worst.push(("total_loss", max_relative_error(&analytic, &numeric, FD_FLOOR)));

    let elapsed = start.elapsed();
    let summary = worst.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect::<Vec<_>>().join(", ");
    for (name, err) in &worst {
        ensure!(*err <= GRAD_TOL, "{name}: relative error {err:.3e} > {GRAD_TOL:e} ({summary})");
    }
    ensure!(elapsed < Duration::from_secs(60), "took {elapsed:?}");
    Ok(format!("max relative errors: {summary}; {:.2}s", elapsed.as_secs_f64()))
}

fn loss_identities() -> Outcome {
    let (h, w) = (64, 64);
    let mut r = rng(8);
    let gt = random_mask(&mut r, h, w, 3);
    let rep = total_loss(&Map::filled(h, w, 0.5), &Map::filled(h / 16, w / 16, 0.5), &Map::filled(h / 16, w / 16, 0.5), &gt, 256.0).unwrap();
    let want = 3.0 * (h * w) as f64 * LN_2;
    let rel = ((rep.l_total - want) / want).abs();
    ensure!(rel <= 1e-9, "l_total {} vs {want}: relative error {rel:e}", rep.l_total);
    Ok(format!("l_total = {:.6} = 3·HW·ln2 (relative error {rel:.1e})", rep.l_total))
}

fn metric_oracles() -> Outcome {
    let mut r = rng(99);
    let pairs = 200;
    let mut worst: f64 = 0.0;
    for i in 0..pairs {
        let s = random_prediction(&mut r, 8, 8);
        let g = random_mask(&mut r, 8, 8, i);
        let diffs = [
            (mae(&s, &g).unwrap() - oracle::mae(&s, &g)).abs(),
            (s_measure(&s, &g).unwrap() - oracle::s_measure(&s, &g)).abs(),
            (max_e_measure(&s, &g).unwrap().0 - oracle::max_e(&s, &g)).abs(),
        ];
        let f = max_f_measure(&s, &g).unwrap().map(|x| x.0);
        let fo = oracle::max_f(&s, &g);
        ensure!(f.is_some() == fo.is_some(), "pair {i}: F definedness differs");
        let fd = f.zip(fo).map(|(a, b)| (a - b).abs()).unwrap_or(0.0);
        for (name, d) in ["MAE", "S", "E", "F"].iter().zip(diffs.iter().chain([&fd])) {
            ensure!(*d <= 1e-9, "pair {i}: {name} differs by {d:e}");
            worst = worst.max(*d);
        }
    }
    let disc = Map::from_fn(8, 8, |y, x| ((y as f64 - 3.5).powi(2) + (x as f64 - 4.0).powi(2) <= 6.0) as u8 as f64);
    let p = evaluate_sample("perfect", &disc, &disc).unwrap();
    let f = p.f_beta_max.unwrap();
    ensure!(
        (p.s_alpha - 1.0).abs() <= 1e-9 && (f - 1.0).abs() <= 1e-9 && (p.e_phi_max - 1.0).abs() <= 1e-9 && p.mae == 0.0,
        "perfect prediction gave ({}, {f}, {}, {})",
        p.s_alpha,
        p.e_phi_max,
        p.mae
    );
    Ok(format!("{pairs} random 8x8 pairs, max deviation {worst:.1e}; perfect prediction (1, 1, 1, 0)"))
}

fn overfit_smoke() -> Outcome {
    let start = Instant::now();
    let samples = generate(5, &SynthConfig::default(), 7).unwrap();
    let mut model = build_variant(VariantConfig::desk(), 0).unwrap();
    let cfg = TrainConfig {
        epochs: 100,
        ..TrainConfig::default()
    };
    train(&mut model, &samples, &cfg, |_, _| Ok(())).map_err(|e| e.to_string())?;
    let (report, _) = evaluate_model(&model, &samples).unwrap();
    let elapsed = start.elapsed();
    let detail = format!(
        "MAE {:.4}, max F {:.4} after {} epochs in {:.0}s",
        report.mae,
        report.f_beta_max,
        cfg.epochs,
        elapsed.as_secs_f64()
    );
    ensure!(report.mae < 0.1 && report.f_beta_max > 0.9, "{detail}");
    ensure!(elapsed < Duration::from_secs(600), "{detail}");
    Ok(detail)
}

fn ablation_structure() -> Outcome {
    let base = VariantConfig::desk();
    let a = build_variant(base.with_variant(Variant::B), 0).unwrap();
    let f = build_variant(base.with_variant(Variant::F), 0).unwrap();
    let one_backbone = a.backbone_parameter_count();
    ensure!(
        f.parameter_count() - a.parameter_count() == one_backbone,
        "params(F) - params(B) = {} but one backbone has {one_backbone}",
        f.parameter_count() - a.parameter_count()
    );
    ensure!(f.backbone_parameter_count() == 2 * one_backbone, "F backbone count");

    let d = build_variant(base.with_variant(Variant::D), 1).unwrap();
    let mut r = rng(4);
    let rgb = random_tensor(&mut r, [1, 3, 64, 64], -1.0, 1.0);
    let depth1 = random_tensor(&mut r, [1, 3, 64, 64], -1.0, 1.0);
    let garbage = random_tensor(&mut r, [1, 3, 64, 64], -1e6, 1e6);
    let p1 = d.predict_pair(&SiamesePair::new(&rgb, &depth1).unwrap()).unwrap();
    let p2 = d.predict_pair(&SiamesePair::new(&rgb, &garbage).unwrap()).unwrap();
    ensure!(p1 == p2, "variant D output depends on depth");

    let c = build_variant(base.with_variant(Variant::C), 2).unwrap();
    let k = base.k;
    ensure!(c.decoder().fused_width() == 2 * k, "C fused width {}", c.decoder().fused_width());
    let mut g = Graph::new();
    let out = c.forward(&mut g, &SiamesePair::new(&rgb, &depth1).unwrap()).unwrap();
    for h in 0..LEVELS {
        ensure!(g.value(out.fused[h]).channels() == 2 * k, "C fused level {} width", h + 1);
    }
    ensure!(c.decoder().module(1).in_channels() == fa_input_channels(1, 2 * k, k), "C FA1 input width");
    Ok(format!(
        "params F - B = {one_backbone} = one backbone; D ignores depth; C fuses to 2k = {}",
        2 * k
    ))
}

fn ablation_direction() -> Outcome {
    let start = Instant::now();
    let train_set = generate(8, &SynthConfig::default(), 1).unwrap();
    let val_set = generate(8, &SynthConfig::default(), 2).unwrap();
    let cfg = TrainConfig {
        epochs: 60,
        ..TrainConfig::default()
    };
    let run = |v: Variant| -> Result<(Model, [f64; 4], [f64; 4]), String> {
        let mut m = build_variant(VariantConfig::desk().with_variant(v), 0).unwrap();
        train(&mut m, &train_set, &cfg, |_, _| Ok(())).map_err(|e| e.to_string())?;
        let score = |set| {
            let (r, _) = evaluate_model(&m, set).unwrap();
            [r.s_alpha, r.f_beta_max, r.e_phi_max, r.mae]
        };
        let (tr, va) = (score(&train_set), score(&val_set));
        Ok((m, tr, va))
    };
    let (_, a_tr, a_va) = run(Variant::A)?;
    let mut lines = vec![format!("A' val {a_va:.3?} train {a_tr:.3?}")];
    for v in [Variant::D, Variant::E] {
        let (_, tr, va) = run(v)?;
        lines.push(format!("{v}' val {va:.3?} train {tr:.3?}"));
        let better = a_va[0] >= va[0] && a_va[1] >= va[1] && a_va[2] >= va[2] && a_va[3] <= va[3];
        ensure!(better, "A' does not dominate {v}' on validation [S, F, E, MAE]: {}", lines.join("; "));
    }
    Ok(format!("{}; {:.0}s", lines.join("; "), start.elapsed().as_secs_f64()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("fusion algebra", fusion_algebra),
        ("shape contract", shape_contract),
        ("siamese equivariance", siamese_equivariance),
        ("gradient checks", gradient_checks),
        ("loss identities", loss_identities),
        ("metric oracles", metric_oracles),
        ("overfit smoke test", overfit_smoke),
        ("ablation structure", ablation_structure),
        ("ablation direction", ablation_direction),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, check) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match result {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
