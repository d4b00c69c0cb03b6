//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero when a criterion fails that is not listed in
//! `EXPECTED_RED`.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use fooling::data::{build_composite_dataset, glyph_dataset, Dataset};
use fooling::engine::{Graph, Tensor};
use fooling::fooling::{
    active_penalty, build_frame_mask, center_of_mass, centermass_penalty, finetune, location_penalty, topk_indices,
    topk_penalty, train_classifier, FoolMethod, FoolingConfig, TrainConfig,
};
use fooling::interpreters::{heatmaps, InterpreterKind, InterpreterSpec};
use fooling::metrics::{
    accuracy, aopc_curve, fsr, gaussian_perturb_probe, mean_swap_score, spearman, test_losses, AopcConfig,
    AopcOrdering, FsrSpec, TestLossExtras, TestLossRecord,
};
use fooling::model::{ArchDescriptor, LayerKind, Model, Params};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Criteria known not to hold on this testbench; README explains why.
const EXPECTED_RED: &[usize] = &[6];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

// ------------------------------------------------------------ gradients

/// ReLU sign pattern and max-pool winners of a forward pass; a finite
/// difference is only valid when both endpoints share the pattern.
fn kink_pattern(model: &Model, params: &Params<f64>, x: &Tensor<f64>) -> Vec<usize> {
    let mut g = Graph::new();
    let pn = model.bind(&mut g, params).unwrap();
    let xn = g.constant(x.clone()).unwrap();
    let trace = model.forward(&mut g, &pn, xn).unwrap();
    let mut pat = Vec::new();
    for (layer, t) in model.desc().layers.iter().zip(&trace.layers) {
        let v = g.value(t.input);
        match layer.kind {
            LayerKind::Relu => pat.extend(v.data().iter().map(|&z| (z > 0.0) as usize)),
            LayerKind::MaxPool { k, stride } => {
                let s = v.shape();
                let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
                let (oh, ow) = ((h - k) / stride + 1, (w - k) / stride + 1);
                for p in 0..planes {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut best = (f64::NEG_INFINITY, 0);
                            for dy in 0..k {
                                for dx in 0..k {
                                    let z = v.data()[(p * h + oy * stride + dy) * w + ox * stride + dx];
                                    if z > best.0 {
                                        best = (z, dy * k + dx);
                                    }
                                }
                            }
                            pat.push(best.1);
                        }
                    }
                }
            }
            _ => {}
        }
    }
    pat
}

fn ce_loss(model: &Model, params: &Params<f64>, x: &Tensor<f64>, y: &[usize]) -> f64 {
    let mut g = Graph::new();
    let pn = model.bind(&mut g, params).unwrap();
    let xn = g.constant(x.clone()).unwrap();
    let trace = model.forward(&mut g, &pn, xn).unwrap();
    let l = g.softmax_cross_entropy(trace.logits, y).unwrap();
    g.value(l).item()
}

fn gradient_correctness() -> Outcome {
    let t = Instant::now();
    let model = Model::build(ArchDescriptor::small_net(1, 12, 12, 10)).unwrap();
    let (mut worst_fd, mut worst_gg, mut checked, mut skipped) = (0.0f64, 0.0f64, 0, 0);
    for net in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + net);
        let mut params: Params<f64> = model.init_params(net);
        for (name, p) in params.iter_mut() {
            if name.ends_with(".bias") {
                *p = Tensor::from_fn(p.shape(), |_| rng.random_range(-0.1..0.1));
            }
        }
        let x = Tensor::from_fn(&[2, 1, 12, 12], |_| rng.random_range(-1.0..1.0));
        let y = [net as usize % 10, (net as usize + 3) % 10];

        let mut g = Graph::new();
        let pn = model.bind(&mut g, &params).unwrap();
        let xn = g.constant(x.clone()).unwrap();
        let trace = model.forward(&mut g, &pn, xn).unwrap();
        let loss = g.softmax_cross_entropy(trace.logits, &y).unwrap();
        let leaves: Vec<_> = pn.values().copied().collect();
        let grads = g.backward(loss, &leaves).unwrap();

        // symbolic gradients of a weighted logit sum against backward()
        let r = g.constant(Tensor::from_fn(&[2, 10], |_| rng.random_range(-1.0..1.0))).unwrap();
        let weighted = g.mul(trace.logits, r).unwrap();
        let score = g.sum(weighted).unwrap();
        let numeric = g.backward(score, &leaves).unwrap();
        let symbolic = g.grad_as_graph(score, &leaves).unwrap();
        for (leaf, s) in leaves.iter().zip(&symbolic) {
            for (a, b) in numeric.get(*leaf).unwrap().data().iter().zip(g.value(*s).data()) {
                worst_gg = worst_gg.max((a - b).abs() / a.abs().max(b.abs()).max(1e-12));
            }
        }

        let base = kink_pattern(&model, &params, &x);
        let h = 1e-5;
        for (name, leaf) in &pn {
            let analytic = grads.get(*leaf).unwrap().data().to_vec();
            for _ in 0..10 {
                let j = rng.random_range(0..analytic.len());
                let orig = params[name].data()[j];
                let mut at = |v: f64| {
                    params.get_mut(name).unwrap().data_mut()[j] = v;
                    let l = ce_loss(&model, &params, &x, &y);
                    let same = kink_pattern(&model, &params, &x) == base;
                    (l, same)
                };
                let (f1, s1) = at(orig + h);
                let (f_1, s2) = at(orig - h);
                let (f2, s3) = at(orig + 2.0 * h);
                let (f_2, s4) = at(orig - 2.0 * h);
                params.get_mut(name).unwrap().data_mut()[j] = orig;
                if !(s1 && s2 && s3 && s4) {
                    skipped += 1;
                    continue;
                }
                let fd = (8.0 * (f1 - f_1) - (f2 - f_2)) / (12.0 * h);
                let a = analytic[j];
                worst_fd = worst_fd.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-6));
                checked += 1;
            }
        }
    }
    let secs = t.elapsed().as_secs_f64();
    outcome(
        worst_fd <= 1e-5 && worst_gg <= 1e-6 && secs <= 60.0,
        format!(
            "20 nets, {checked} coordinates ({skipped} at kinks skipped): backward vs FD max rel {worst_fd:.2e}, \
             grad_as_graph vs backward {worst_gg:.2e}, {secs:.1}s"
        ),
    )
}

// ------------------------------------------------------------ LRP

fn lrp_conservation() -> Outcome {
    let model = Model::build(ArchDescriptor::small_net(1, 28, 28, 10)).unwrap();
    let mut spec = InterpreterSpec::new(InterpreterKind::Lrp, "act3");
    spec.epsilon = 1e-6;
    spec.alpha = 1.0;
    spec.beta = 0.0;
    let mut worst = 0.0f64;
    let mut inputs = 0;
    for net in 0..5u64 {
        let mut params: Params<f64> = model.init_params(50 + net);
        for (name, p) in params.iter_mut() {
            if name.ends_with(".bias") {
                *p = Tensor::zeros(p.shape());
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(77 + net);
        let x = Tensor::from_fn(&[20, 1, 28, 28], |_| rng.random_range(-1.0..1.0));
        let classes: Vec<usize> = (0..20).map(|_| rng.random_range(0..10)).collect();
        let logits = model.logits(&params, &x).unwrap();
        let r = heatmaps(&model, &params, &x, &classes, &spec).unwrap();
        let per = 28 * 28;
        for (i, &c) in classes.iter().enumerate() {
            let total: f64 = r.data()[i * per..(i + 1) * per].iter().sum();
            let logit = logits.data()[i * 10 + c];
            worst = worst.max((total - logit).abs() / logit.abs());
            inputs += 1;
        }
    }
    outcome(worst <= 1e-4, format!("{inputs} inputs, max |ΣR − logit|/|logit| = {worst:.2e}"))
}

// ------------------------------------------------------------ fooling runs

struct Bench {
    model: Model,
    train: Dataset,
    val: Dataset,
    w0: Params<f32>,
    a0: f64,
}

fn bench() -> Bench {
    let all = glyph_dataset(5000, 28, 28, 1).unwrap();
    let (train, val) = all.split_at(4000);
    let stats = train.normalization_stats();
    let (train, val) = (train.normalized(&stats).unwrap(), val.normalized(&stats).unwrap());
    let model = Model::build(ArchDescriptor::small_net(1, 28, 28, 10)).unwrap();
    let tc = TrainConfig { epochs: 2, lr: 0.02, momentum: 0.9, batch_size: 32, seed: 0 };
    let (w0, _) = train_classifier(&model, &model.init_params(0), &train, &tc).unwrap();
    let a0 = accuracy(&model, &w0, &val, 1, None).unwrap();
    Bench { model, train, val, w0, a0 }
}

struct PassiveRun {
    method: FoolMethod,
    kind: InterpreterKind,
    params: Params<f32>,
    acc: f64,
    fsr_before: f64,
    fsr_after: f64,
    excluded: usize,
    secs: f64,
}

fn passive_run(b: &Bench, method: FoolMethod, kind: InterpreterKind) -> PassiveRun {
    let t = Instant::now();
    let spec = InterpreterSpec::new(kind, "act3");
    let cfg = FoolingConfig::new(method, spec.clone());
    let (params, _) = finetune(&b.model, &b.w0, &b.train, None, &cfg).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let extras = match method {
        FoolMethod::Location => TestLossExtras::Location(build_frame_mask(7, 7).unwrap()),
        FoolMethod::TopK => TestLossExtras::TopK { k_percent: cfg.k_percent },
        _ => TestLossExtras::CenterMass,
    };
    let range = FsrSpec::default_for(method);
    let before = test_losses(&b.model, &b.w0, &b.w0, &b.val, &spec, &extras, &range).unwrap();
    let after = test_losses(&b.model, &b.w0, &params, &b.val, &spec, &extras, &range).unwrap();
    PassiveRun {
        method,
        kind,
        acc: accuracy(&b.model, &params, &b.val, 1, None).unwrap(),
        fsr_before: fsr(&before.records, &range).unwrap(),
        fsr_after: fsr(&after.records, &range).unwrap(),
        excluded: after.excluded,
        params,
        secs,
    }
}

fn active_swap(b: &Bench) -> Outcome {
    let (c1, c2) = (0, 1);
    let comp = build_composite_dataset(&b.train, c1, c2, 260, 3).unwrap();
    let spec = InterpreterSpec::new(InterpreterKind::GradCam, "act3");
    let mut cfg = FoolingConfig::new(FoolMethod::Active, spec.clone());
    cfg.c1 = c1;
    cfg.c2 = c2;
    let (w, _) = finetune(&b.model, &b.w0, &b.train, Some(&comp.train), &cfg).unwrap();
    let h = &comp.holdout;
    let s = |p: &Params<f32>, x, y| mean_swap_score(&b.model, &b.w0, p, h, &spec, x, y).unwrap();
    let (s12_0, s12) = (s(&b.w0, c1, c2), s(&w, c1, c2));
    let (s11_0, s11) = (s(&b.w0, c1, c1), s(&w, c1, c1));
    let acc = accuracy(&b.model, &w, &b.val, 1, None).unwrap();
    let class_acc = |p: &Params<f32>, c| accuracy(&b.model, p, &b.val, 1, Some(c)).unwrap();
    let (a1_0, a1, a2_0, a2) = (class_acc(&b.w0, c1), class_acc(&w, c1), class_acc(&b.w0, c2), class_acc(&w, c2));
    let pass = s12 - s12_0 >= 0.2
        && s11_0 - s11 >= 0.2
        && b.a0 - acc <= 3.0
        && (a1 - a1_0).abs() <= 5.0
        && (a2 - a2_0).abs() <= 5.0;
    outcome(
        pass,
        format!(
            "Grad-CAM, {} holdout composites: s(c1,c2) {s12_0:.3} -> {s12:.3}, s(c1,c1) {s11_0:.3} -> {s11:.3}; \
             accuracy {:.1} -> {acc:.1}; class {c1} {a1_0:.1} -> {a1:.1}, class {c2} {a2_0:.1} -> {a2:.1}",
            h.len(),
            b.a0
        ),
    )
}

fn aopc_ordering(b: &Bench, fooled: &Params<f32>) -> Outcome {
    let spec = InterpreterSpec::new(InterpreterKind::GradCam, "act3");
    let cfg = AopcConfig { steps: 40, region: 2, seed: 1 };
    let curves = |eval: &Params<f32>| {
        let end = |o| aopc_curve(&b.model, eval, &b.val, o, &cfg).unwrap()[cfg.steps];
        (
            end(AopcOrdering::Heatmap { params: &b.w0, spec: &spec }),
            end(AopcOrdering::Random),
            end(AopcOrdering::Heatmap { params: fooled, spec: &spec }),
        )
    };
    let (o, r, f) = curves(fooled);
    let (o0, r0, f0) = curves(&b.w0);
    outcome(
        o - r >= 0.01 && r - f >= 0.01,
        format!(
            "Top-k/Grad-CAM model, {} images, 40 steps of 2×2: h(w0) {o:.4}, random {r:.4}, h(w*) {f:.4} \
             (scored with w0 instead: {o0:.4}, {r0:.4}, {f0:.4})",
            b.val.len()
        ),
    )
}

fn perturbation(b: &Bench, fooled: &Params<f32>) -> Outcome {
    let sigmas = [0.0, 1e-3, 3e-3, 1e-2];
    let p0 = gaussian_perturb_probe(&b.model, &b.w0, &b.val, &sigmas, 5, 11).unwrap();
    let p1 = gaussian_perturb_probe(&b.model, fooled, &b.val, &sigmas, 5, 11).unwrap();
    let gaps: Vec<f64> = p0.iter().zip(&p1).map(|(a, c)| (a.accuracy - c.accuracy).abs()).collect();
    let detail = p0
        .iter()
        .zip(&p1)
        .map(|(a, c)| format!("σ {}: {:.1} vs {:.1}", a.sigma, a.accuracy, c.accuracy))
        .collect::<Vec<_>>()
        .join("; ");
    outcome(gaps.iter().all(|&g| g <= 5.0), format!("w0 vs Top-k/Grad-CAM w*, 5 trials: {detail}"))
}

// ------------------------------------------------------------ metric oracles

/// Rank by counting: 1 + #smaller + (#equal − 1)/2.
fn naive_ranks(v: &[f64]) -> Vec<f64> {
    v.iter()
        .map(|&x| {
            let less = v.iter().filter(|&&y| y < x).count() as f64;
            let eq = v.iter().filter(|&&y| y == x).count() as f64;
            1.0 + less + (eq - 1.0) / 2.0
        })
        .collect()
}

fn naive_spearman(a: &[f64], b: &[f64]) -> f64 {
    let (x, y) = (naive_ranks(a), naive_ranks(b));
    let n = a.len() as f64;
    let (sx, sy) = (x.iter().sum::<f64>(), y.iter().sum::<f64>());
    let sxy: f64 = x.iter().zip(&y).map(|(p, q)| p * q).sum();
    let sxx: f64 = x.iter().map(|p| p * p).sum();
    let syy: f64 = y.iter().map(|q| q * q).sum();
    (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt())
}

fn naive_center(h: &[f64], rows: usize, cols: usize) -> Option<(f64, f64)> {
    let (mut m, mut r, mut c) = (0.0, 0.0, 0.0);
    for y in 0..rows {
        for x in 0..cols {
            let v = h[y * cols + x].max(0.0);
            m += v;
            r += v * y as f64;
            c += v * x as f64;
        }
    }
    (m > 0.0).then(|| (r / m, c / m))
}

fn max_one(h: &[f64]) -> Vec<f64> {
    let m = h.iter().fold(0.0f64, |a, &v| a.max(v));
    h.iter().map(|&v| v.max(0.0) / m).collect()
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    let mut cases = 0;
    let mut err = |a: f64, b: f64| worst = worst.max((a - b).abs());
    for trial in 0..150 {
        let (n, hh, ww) = (rng.random_range(1..4), rng.random_range(7..10), rng.random_range(7..10));
        let d = hh * ww;
        // coarse values in some trials so ties occur
        let draw = |rng: &mut ChaCha8Rng| {
            if trial % 3 == 0 {
                rng.random_range(-3i32..6) as f64
            } else {
                rng.random_range(-1.0..2.0)
            }
        };
        let maps: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let mut m: Vec<f64> = (0..d).map(|_| draw(&mut rng)).collect();
                m[rng.random_range(0..d)] = 3.0; // keep positive mass
                m
            })
            .collect();
        let other: Vec<f64> = (0..d).map(|_| draw(&mut rng)).collect();
        let tensor = Tensor::new(vec![n, hh, ww], maps.concat()).unwrap();

        if let Ok(s) = spearman(&maps[0], &other) {
            err(s, naive_spearman(&maps[0], &other));
        }
        let c = center_of_mass(&maps[0], &[hh, ww]).unwrap();
        let (cr, cc) = naive_center(&maps[0], hh, ww).unwrap();
        err(c[0], cr);
        err(c[1], cc);

        let spec = FsrSpec::new(FoolMethod::TopK, 0.2, 0.7).unwrap();
        let recs: Vec<TestLossRecord> = other
            .iter()
            .enumerate()
            .map(|(i, &t)| TestLossRecord { sample_id: i.to_string(), t, in_range: spec.contains(t) })
            .collect();
        let hits = other.iter().filter(|&&t| (0.2..=0.7).contains(&t)).count();
        err(fsr(&recs, &spec).unwrap(), 100.0 * hits as f64 / d as f64);

        // location
        let mask = build_frame_mask(hh, ww).unwrap();
        let mut g = Graph::<f64>::new();
        let h = g.leaf(tensor.clone()).unwrap();
        let pen = location_penalty(&mut g, h, &mask).unwrap();
        let naive: f64 = maps
            .iter()
            .map(|m| max_one(m).iter().zip(&mask.m).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / d as f64)
            .sum::<f64>()
            / n as f64;
        err(g.value(pen).item(), naive);

        // top-k
        let sets: Vec<Vec<usize>> = (0..n)
            .map(|_| {
                let ref_map: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..1.0)).collect();
                topk_indices(&ref_map, 10.0).unwrap()
            })
            .collect();
        let set_refs: Vec<&[usize]> = sets.iter().map(Vec::as_slice).collect();
        let pen = topk_penalty(&mut g, h, &set_refs).unwrap();
        let naive: f64 = maps
            .iter()
            .zip(&sets)
            .map(|(m, s)| {
                let mass: f64 = m.iter().map(|v| v.abs()).sum();
                s.iter().map(|&j| m[j].abs() / mass).sum::<f64>()
            })
            .sum::<f64>()
            / n as f64;
        err(g.value(pen).item(), naive);

        // center-mass
        let frozen: Vec<Option<[f64; 2]>> =
            (0..n).map(|_| Some([rng.random_range(0.0..hh as f64), rng.random_range(0.0..ww as f64)])).collect();
        let (pen, skipped) = centermass_penalty(&mut g, h, &frozen).unwrap();
        let naive: f64 = maps
            .iter()
            .zip(&frozen)
            .map(|(m, f)| {
                let (r, c) = naive_center(m, hh, ww).unwrap();
                -((r - f.unwrap()[0]).abs() + (c - f.unwrap()[1]).abs())
            })
            .sum::<f64>()
            / n as f64;
        assert_eq!(skipped, 0);
        err(g.value(pen).item(), naive);

        // active
        let f1: Vec<f64> = (0..n * d).map(|_| rng.random_range(0.0..1.0)).collect();
        let f2: Vec<f64> = (0..n * d).map(|_| rng.random_range(0.0..1.0)).collect();
        let h2_maps: Vec<Vec<f64>> = maps.iter().rev().cloned().collect();
        let h2 = g.leaf(Tensor::new(vec![n, hh, ww], h2_maps.concat()).unwrap()).unwrap();
        let pen = active_penalty(
            &mut g,
            h,
            h2,
            &Tensor::new(vec![n, hh, ww], f1.clone()).unwrap(),
            &Tensor::new(vec![n, hh, ww], f2.clone()).unwrap(),
        )
        .unwrap();
        let mut naive = 0.0;
        for i in 0..n {
            let (a, b) = (max_one(&maps[i]), max_one(&h2_maps[i]));
            for j in 0..d {
                naive += (a[j] - f2[i * d + j]).powi(2) + (f1[i * d + j] - b[j]).powi(2);
            }
        }
        err(g.value(pen).item(), naive / (2.0 * (n * d) as f64));
        cases += 1;
    }
    outcome(worst <= 1e-6, format!("{cases} random cases, spearman/center/fsr/4 penalties: max abs diff {worst:.2e}"))
}

// ------------------------------------------------------------ determinism

fn cli(dir: &Path, args: &[&str]) -> bool {
    Command::new(env!("CARGO_BIN_EXE_fooling"))
        .current_dir(dir)
        .args(args)
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false)
}

fn determinism() -> Outcome {
    let run = |dir: &Path| {
        cli(dir, &["synth", "--n-train", "500", "--n-val", "200", "--seed", "9", "--out", "data"])
            && cli(dir, &["train", "--data", "data/train-images.idx", "--epochs", "1", "--seed", "5", "--out", "w0.ckpt"])
            && cli(dir, &["fool", "--ckpt", "w0.ckpt", "--data", "data/train-images.idx", "--method", "location", "--iters", "40", "--seed", "6", "--out", "w.ckpt"])
            && cli(dir, &["fsr", "--original", "w0.ckpt", "--fooled", "w.ckpt", "--method", "location", "--data", "data/val-images.idx", "--out", "fsr"])
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    if !(run(a.path()) && run(b.path())) {
        return outcome(false, "a CLI step failed".into());
    }
    let files = ["w0.ckpt", "w.ckpt", "w.ckpt.log.csv", "fsr/records.csv", "fsr/report.json"];
    let differing: Vec<&str> = files
        .iter()
        .copied()
        .filter(|f| fs::read(a.path().join(f)).ok() != fs::read(b.path().join(f)).ok())
        .collect();
    outcome(
        differing.is_empty(),
        if differing.is_empty() {
            format!("two CLI train+fool+fsr runs: {} files byte-identical", files.len())
        } else {
            format!("differing: {}", differing.join(", "))
        },
    )
}

// ------------------------------------------------------------ driver

fn report(id: usize, name: &str, o: &Outcome, results: &mut Vec<(usize, bool)>) {
    let tag = if o.pass { "PASS" } else { "FAIL" };
    println!("[{id}/9] {tag} {name}: {}", o.detail);
    results.push((id, o.pass));
}

fn main() {
    let mut results = Vec::new();
    report(1, "gradient correctness", &gradient_correctness(), &mut results);
    report(2, "LRP conservation", &lrp_conservation(), &mut results);

    let b = bench();
    println!("      baseline SmallNet: {:.1}% on {} validation glyphs", b.a0, b.val.len());
    let mut runs = Vec::new();
    for method in FoolMethod::PASSIVE {
        for kind in [InterpreterKind::GradCam, InterpreterKind::LrpT] {
            runs.push(passive_run(&b, method, kind));
        }
    }
    for r in &runs {
        println!(
            "      {} / {}: accuracy {:.1}, FSR {:.1} -> {:.1} ({} excluded), {:.0}s",
            r.method, r.kind, r.acc, r.fsr_before, r.fsr_after, r.excluded, r.secs
        );
    }
    let acc_ok = runs.iter().all(|r| r.acc >= b.a0 - 3.0 && r.secs <= 600.0);
    let worst_drop = runs.iter().map(|r| b.a0 - r.acc).fold(f64::NEG_INFINITY, f64::max);
    report(
        3,
        "accuracy-preserving fooling",
        &outcome(acc_ok, format!("6 runs, largest drop {worst_drop:.1} points from {:.1}", b.a0)),
        &mut results,
    );
    let gains: Vec<f64> = runs.iter().map(|r| r.fsr_after - r.fsr_before).collect();
    let min_gain = gains.iter().copied().fold(f64::INFINITY, f64::min);
    let max_excluded = runs.iter().map(|r| r.excluded).max().unwrap_or(0);
    report(
        4,
        "fooling efficacy",
        // FSR skips degenerate maps, so a run that blanks most maps proves nothing
        &outcome(
            gains.iter().all(|&g| g >= 30.0) && max_excluded <= b.val.len() / 10,
            format!("smallest matched FSR gain {min_gain:.1} points, at most {max_excluded} samples excluded"),
        ),
        &mut results,
    );
    report(5, "active swap", &active_swap(&b), &mut results);
    let topk = runs
        .iter()
        .find(|r| r.method == FoolMethod::TopK && r.kind == InterpreterKind::GradCam)
        .expect("top-k run");
    report(6, "AOPC ordering", &aopc_ordering(&b, &topk.params), &mut results);
    report(7, "perturbation indistinguishability", &perturbation(&b, &topk.params), &mut results);
    report(8, "metric oracles", &metric_oracles(), &mut results);
    report(9, "determinism", &determinism(), &mut results);

    let passed = results.iter().filter(|r| r.1).count();
    println!("{passed}/9 criteria pass");
    let unexpected: Vec<usize> = results.iter().filter(|r| !r.1 && !EXPECTED_RED.contains(&r.0)).map(|r| r.0).collect();
    for id in EXPECTED_RED {
        if results.iter().any(|r| r.0 == *id && !r.1) {
            println!("criterion {id} is a known failure on this testbench");
        }
    }
    if !unexpected.is_empty() {
        println!("unexpected failures: {unexpected:?}");
        std::process::exit(1);
    }
}
