use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::glyph_dataset;
use crate::interpreters::InterpreterKind;
use crate::model::ArchDescriptor;

fn node(g: &mut Graph<f64>, shape: &[usize], v: &[f64]) -> NodeId {
    g.leaf(Tensor::from_f64(shape, v).unwrap()).unwrap()
}

#[test]
fn frame_mask_sizes() {
    let m = build_frame_mask(14, 14).unwrap();
    assert_eq!(m.ones(), 96);
    assert_eq!(build_frame_mask(7, 7).unwrap().ones(), 24);
    assert!(build_frame_mask(6, 9).is_err());
    for n in [7, 14, 28] {
        let m = build_frame_mask(n, n).unwrap();
        for y in 0..n {
            for x in 0..n {
                let v = m.m[y * n + x];
                assert_eq!(v, m.m[y * n + (n - 1 - x)]);
                assert_eq!(v, m.m[x * n + y]);
            }
        }
    }
}

#[test]
fn location_examples() {
    let mask = build_frame_mask(14, 14).unwrap();
    let mut g = Graph::new();
    let h = node(&mut g, &[1, 14, 14], &mask.m);
    let p = location_penalty(&mut g, h, &mask).unwrap();
    assert_eq!(g.value(p).item(), 0.0);
    let z = node(&mut g, &[1, 14, 14], &[0.0; 196]);
    let p = location_penalty(&mut g, z, &mask).unwrap();
    assert!((g.value(p).item() - 96.0 / 196.0).abs() < 1e-12);
    let wrong = node(&mut g, &[1, 7, 7], &[0.0; 49]);
    assert!(matches!(location_penalty(&mut g, wrong, &mask), Err(FoolError::Resolution { .. })));
}

#[test]
fn topk_examples() {
    assert_eq!(topk_indices(&[0.1, 0.9, 0.5, 0.2], 25.0).unwrap(), vec![1]);
    assert_eq!(topk_indices(&[0.1, 0.9, 0.5, 0.2], 100.0).unwrap(), vec![0, 1, 2, 3]);
    assert_eq!(topk_indices(&[1.0, 1.0, 0.0, 0.0], 25.0).unwrap(), vec![0]);
    assert!(topk_indices(&[1.0], 0.0).is_err());

    let mut g = Graph::new();
    let h = node(&mut g, &[1, 2, 2], &[0.0, 0.0, 3.0, -1.0]);
    let zero = topk_penalty(&mut g, h, &[&[0, 1]]).unwrap();
    assert_eq!(g.value(zero).item(), 0.0);
    let full = topk_penalty(&mut g, h, &[&[2, 3]]).unwrap();
    assert!((g.value(full).item() - 1.0).abs() < 1e-12);
    assert!(matches!(topk_penalty(&mut g, h, &[]), Err(FoolError::MissingCache(_))));
}

#[test]
fn center_of_mass_examples() {
    assert_eq!(center_of_mass(&[0.0, 0.0, 1.0, 1.0], &[4]).unwrap(), vec![2.5]);
    assert_eq!(center_of_mass(&[1.0; 12], &[3, 4]).unwrap(), vec![1.0, 1.5]);
    assert_eq!(center_of_mass(&[0.0, 2.0, 0.0, 2.0], &[2, 2]).unwrap(), vec![0.5, 1.0]);
    assert!(matches!(center_of_mass(&[0.0, -1.0], &[2]), Err(FoolError::Degenerate)));
}

#[test]
fn centermass_examples() {
    // unmoved center
    let mut g = Graph::new();
    let h = node(&mut g, &[1, 1, 4], &[0.0, 0.0, 1.0, 1.0]);
    let (p, skipped) = centermass_penalty(&mut g, h, &[Some([0.0, 2.5])]).unwrap();
    assert_eq!((g.value(p).item(), skipped), (0.0, 0));
    // 1D center moved from 2.5 to 0.5
    let moved = node(&mut g, &[1, 1, 4], &[1.0, 1.0, 0.0, 0.0]);
    let (p, _) = centermass_penalty(&mut g, moved, &[Some([0.0, 2.5])]).unwrap();
    assert!((g.value(p).item() + 2.0).abs() < 1e-12);
    // degenerate samples are skipped and counted
    let two = node(&mut g, &[2, 1, 4], &[1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    let (p, skipped) = centermass_penalty(&mut g, two, &[Some([0.0, 2.5]), Some([0.0, 1.0])]).unwrap();
    assert_eq!(skipped, 1);
    assert!((g.value(p).item() + 2.0).abs() < 1e-12);
}

#[test]
fn centermass_gradient_pushes_mass_away() {
    // two pixels, frozen center at 0.4: C = h1/(h0+h1), dC/dh1 = h0/(h0+h1)^2 > 0,
    // so minimizing −|C − 0.4| with C > 0.4 must grow h1 and shrink h0
    let mut g = Graph::new();
    let h = node(&mut g, &[1, 1, 2], &[1.0, 1.0]);
    let (p, _) = centermass_penalty(&mut g, h, &[Some([0.0, 0.4])]).unwrap();
    let grad = g.backward(p, &[h]).unwrap();
    let d = grad.get(h).unwrap().data().to_vec();
    assert!((d[0] - 0.25).abs() < 1e-12 && (d[1] + 0.25).abs() < 1e-12, "{d:?}");
}

#[test]
fn active_examples() {
    let mut g = Graph::new();
    let a = [0.0, 0.5, 1.0, 0.25];
    let b = [1.0, 0.0, 0.5, 0.5];
    let ha = node(&mut g, &[1, 2, 2], &a);
    let hb = node(&mut g, &[1, 2, 2], &b);
    let ta = Tensor::from_f64(&[1, 2, 2], &a).unwrap();
    let tb = Tensor::from_f64(&[1, 2, 2], &b).unwrap();
    // equal frozen maps and unchanged model
    let p = active_penalty(&mut g, ha, ha, &ta, &ta).unwrap();
    assert_eq!(g.value(p).item(), 0.0);
    // already swapped
    let p = active_penalty(&mut g, hb, ha, &ta, &tb).unwrap();
    assert_eq!(g.value(p).item(), 0.0);
    assert!(active_penalty(&mut g, ha, hb, &Tensor::zeros(&[2, 2, 2]), &tb).is_err());
}

/// Straight-line recomputations used as oracles.
mod brute {
    pub fn max_one(h: &[f64]) -> Vec<f64> {
        let m = h.iter().cloned().fold(0.0, f64::max);
        h.iter().map(|&v| if m > 0.0 { v.max(0.0) / m } else { 0.0 }).collect()
    }

    pub fn location(maps: &[Vec<f64>], mask: &[f64]) -> f64 {
        let mut total = 0.0;
        for h in maps {
            let n = max_one(h);
            let mut s = 0.0;
            for j in 0..mask.len() {
                s += (n[j] - mask[j]) * (n[j] - mask[j]);
            }
            total += s / mask.len() as f64;
        }
        total / maps.len() as f64
    }

    pub fn topk(maps: &[Vec<f64>], sets: &[Vec<usize>]) -> f64 {
        let mut total = 0.0;
        for (h, set) in maps.iter().zip(sets) {
            let mass: f64 = h.iter().map(|v| v.abs()).sum();
            for &j in set {
                total += (h[j] / mass).abs();
            }
        }
        total / maps.len() as f64
    }

    pub fn centermass(maps: &[Vec<f64>], w: usize, frozen: &[[f64; 2]]) -> f64 {
        let mut total = 0.0;
        for (h, c0) in maps.iter().zip(frozen) {
            let (mut m, mut cy, mut cx) = (0.0, 0.0, 0.0);
            for (i, &v) in h.iter().enumerate() {
                let v = v.max(0.0);
                m += v;
                cy += v * (i / w) as f64;
                cx += v * (i % w) as f64;
            }
            total += (cy / m - c0[0]).abs() + (cx / m - c0[1]).abs();
        }
        -total / maps.len() as f64
    }

    pub fn active(h1: &[Vec<f64>], h2: &[Vec<f64>], f1: &[Vec<f64>], f2: &[Vec<f64>]) -> f64 {
        let mut total = 0.0;
        for i in 0..h1.len() {
            let (a, b) = (max_one(&h1[i]), max_one(&h2[i]));
            let d = a.len() as f64;
            let s1: f64 = a.iter().zip(&f2[i]).map(|(x, y)| (x - y).powi(2)).sum();
            let s2: f64 = f1[i].iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum();
            total += (s1 + s2) / d;
        }
        total / (2.0 * h1.len() as f64)
    }
}

#[test]
fn penalties_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for trial in 0..120 {
        let n = rng.random_range(1..4);
        let (h, w) = (rng.random_range(7..10), rng.random_range(7..10));
        let d = h * w;
        let maps = |rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
            (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0..2.0)).collect()).collect()
        };
        let m1 = maps(&mut rng);
        let m2 = maps(&mut rng);
        let flat = |m: &[Vec<f64>]| m.iter().flatten().copied().collect::<Vec<f64>>();
        let mut g = Graph::new();
        let n1 = node(&mut g, &[n, h, w], &flat(&m1));
        let n2 = node(&mut g, &[n, h, w], &flat(&m2));

        let mask = build_frame_mask(h, w).unwrap();
        let p = location_penalty(&mut g, n1, &mask).unwrap();
        assert!((g.value(p).item() - brute::location(&m1, &mask.m)).abs() < 1e-6, "trial {trial}");

        let k = rng.random_range(5.0..50.0);
        let sets: Vec<Vec<usize>> = m2.iter().map(|r| topk_indices(r, k).unwrap()).collect();
        let refs: Vec<&[usize]> = sets.iter().map(Vec::as_slice).collect();
        let p = topk_penalty(&mut g, n1, &refs).unwrap();
        assert!((g.value(p).item() - brute::topk(&m1, &sets)).abs() < 1e-6, "trial {trial}");

        let frozen: Vec<[f64; 2]> = m2
            .iter()
            .map(|r| {
                let c = center_of_mass(r, &[h, w]).unwrap();
                [c[0], c[1]]
            })
            .collect();
        let opt: Vec<Option<[f64; 2]>> = frozen.iter().copied().map(Some).collect();
        let (p, _) = centermass_penalty(&mut g, n1, &opt).unwrap();
        assert!((g.value(p).item() - brute::centermass(&m1, w, &frozen)).abs() < 1e-6, "trial {trial}");

        let f1: Vec<Vec<f64>> = maps(&mut rng).iter().map(|r| brute::max_one(r)).collect();
        let f2: Vec<Vec<f64>> = maps(&mut rng).iter().map(|r| brute::max_one(r)).collect();
        let t1 = Tensor::from_f64(&[n, h, w], &flat(&f1)).unwrap();
        let t2 = Tensor::from_f64(&[n, h, w], &flat(&f2)).unwrap();
        let p = active_penalty(&mut g, n1, n2, &t1, &t2).unwrap();
        assert!((g.value(p).item() - brute::active(&m1, &m2, &f1, &f2)).abs() < 1e-6, "trial {trial}");
    }
}

fn tiny_setup() -> (Model, Params<f32>, Dataset) {
    let model = Model::build(ArchDescriptor::small_net(1, 28, 28, 10)).unwrap();
    let params = model.init_params::<f32>(1);
    let data = glyph_dataset(40, 28, 28, 2).unwrap();
    (model, params, data)
}

#[test]
fn every_penalty_reaches_conv_weights() {
    let model = Model::build(ArchDescriptor::small_net(1, 28, 28, 10)).unwrap();
    let p = model.init_params::<f64>(3);
    let other = model.init_params::<f64>(4);
    let data = glyph_dataset(4, 28, 28, 1).unwrap();
    let (x, y) = data.batch::<f64>(&[0, 1, 2, 3]);
    let y = y.unwrap();
    for kind in [InterpreterKind::GradCam, InterpreterKind::LrpT, InterpreterKind::Lrp] {
        let spec = InterpreterSpec::new(kind, "act3");
        let frozen = heatmaps(&model, &other, &x, &y, &spec).unwrap();
        let (fh, fw) = (frozen.shape()[1], frozen.shape()[2]);
        let rows: Vec<Vec<f64>> = frozen.data().chunks(fh * fw).map(<[f64]>::to_vec).collect();
        for method in ["location", "topk", "centermass", "active"] {
            let mut g = Graph::new();
            let pn = model.bind(&mut g, &p).unwrap();
            let xn = g.leaf(x.clone()).unwrap();
            let h = heatmap_node(&mut g, &model, &pn, xn, &y, &spec).unwrap();
            let pen = match method {
                "location" => location_penalty(&mut g, h, &build_frame_mask(fh, fw).unwrap()).unwrap(),
                "topk" => {
                    let sets: Vec<Vec<usize>> = rows.iter().map(|r| topk_indices(r, 10.0).unwrap()).collect();
                    let refs: Vec<&[usize]> = sets.iter().map(Vec::as_slice).collect();
                    topk_penalty(&mut g, h, &refs).unwrap()
                }
                "centermass" => {
                    let c: Vec<Option<[f64; 2]>> =
                        rows.iter().map(|r| center_of_mass(r, &[fh, fw]).ok().map(|c| [c[0], c[1]])).collect();
                    centermass_penalty(&mut g, h, &c).unwrap().0
                }
                _ => {
                    let xn2 = g.leaf(x.clone()).unwrap();
                    let h2 = heatmap_node(&mut g, &model, &pn, xn2, &[5, 6, 7, 8], &spec).unwrap();
                    let norm = |t: &Tensor<f64>| t.map(|v| v.max(0.0) / 10.0);
                    active_penalty(&mut g, h, h2, &norm(&frozen), &norm(&frozen)).unwrap()
                }
            };
            let grads = g.backward(pen, &[pn["conv2.weight"], pn["conv3.weight"]]).unwrap();
            let nonzero = [pn["conv2.weight"], pn["conv3.weight"]]
                .iter()
                .any(|id| grads.get(*id).unwrap().data().iter().any(|&v| v != 0.0));
            assert!(nonzero, "{kind} / {method}");
        }
    }
}

#[test]
fn zero_iterations_returns_start() {
    let (model, params, data) = tiny_setup();
    let mut cfg = FoolingConfig::new(FoolMethod::Location, InterpreterSpec::new(InterpreterKind::GradCam, "act3"));
    cfg.iterations = 0;
    let (out, log) = finetune(&model, &params, &data, None, &cfg).unwrap();
    assert_eq!(out, params);
    assert!(log.is_empty());
}

#[test]
fn lambda_zero_is_plain_training() {
    let (model, params, data) = tiny_setup();
    let mut cfg = FoolingConfig::new(FoolMethod::TopK, InterpreterSpec::new(InterpreterKind::LrpT, "act3"));
    cfg.lambda = 0.0;
    cfg.iterations = 3;
    cfg.batch_size = 8;
    cfg.lr = 0.01;
    cfg.schedule = LrSchedule::Constant;
    let (fooled, log) = finetune(&model, &params, &data, None, &cfg).unwrap();
    let train = TrainConfig { epochs: 1, lr: 0.01, momentum: 0.9, batch_size: 8, seed: 0 };
    let (plain, plain_log) = train_classifier(&model, &params, &data, &train).unwrap();
    assert_eq!(plain_log.len(), 5);
    assert_eq!(log[..], plain_log[..3]);
    // same three steps, then two more in the plain run
    let cfg5 = FoolingConfig { iterations: 5, ..cfg };
    assert_eq!(finetune(&model, &params, &data, None, &cfg5).unwrap().0, plain);
    assert_ne!(fooled, plain);
}

#[test]
fn one_step_matches_hand_update() {
    // logits = x·W + b with x = [1, 2], y = 0; CE gradient is (softmax − onehot)
    let model = Model::build(ArchDescriptor::parse("input 1 1 2\nclasses 2\ndense fc out=2\n").unwrap()).unwrap();
    let mut p = Params::new();
    p.insert("fc.weight".to_string(), Tensor::<f32>::from_f64(&[2, 2], &[0.5, -0.5, 0.25, 0.0]).unwrap());
    p.insert("fc.bias".to_string(), Tensor::<f32>::zeros(&[2]));
    let data = Dataset::new(Tensor::from_f64(&[1, 1, 1, 2], &[1.0, 2.0]).unwrap(), Some(vec![0]), 2).unwrap();
    let cfg = TrainConfig { epochs: 1, lr: 0.1, momentum: 0.0, batch_size: 1, seed: 0 };
    let (out, _) = train_classifier(&model, &p, &data, &cfg).unwrap();
    let (z0, z1) = (0.5 + 0.5, -0.5f64);
    let p0 = 1.0 / (1.0 + (z1 - z0).exp());
    let gz = [p0 - 1.0, 1.0 - p0];
    let w = [0.5, -0.5, 0.25, 0.0];
    for (i, (&got, &w0)) in out["fc.weight"].data().iter().zip(&w).enumerate() {
        let x = [1.0, 2.0][i / 2];
        let want = w0 - 0.1 * x * gz[i % 2];
        assert!((got as f64 - want).abs() < 1e-6, "{i}: {got} vs {want}");
    }
    for (k, &got) in out["fc.bias"].data().iter().enumerate() {
        assert!((got as f64 + 0.1 * gz[k]).abs() < 1e-6);
    }
}

#[test]
fn config_validation() {
    let spec = InterpreterSpec::new(InterpreterKind::GradCam, "act3");
    let mut cfg = FoolingConfig::new(FoolMethod::Active, spec);
    cfg.c2 = cfg.c1;
    assert!(cfg.validate(10).is_err());
    cfg.c2 = 12;
    assert!(cfg.validate(10).is_err());
    let mut cfg = FoolingConfig { method: FoolMethod::TopK, k_percent: 100.0, ..cfg };
    assert!(cfg.validate(10).is_err());
    cfg.k_percent = 10.0;
    cfg.lr = 0.0;
    assert!(cfg.validate(10).is_err());
    assert_eq!("centermass".parse::<FoolMethod>().unwrap(), FoolMethod::CenterMass);
}

#[test]
fn active_requires_fool_set() {
    let (model, params, data) = tiny_setup();
    let cfg = FoolingConfig::new(FoolMethod::Active, InterpreterSpec::new(InterpreterKind::GradCam, "act3"));
    assert!(matches!(finetune(&model, &params, &data, None, &cfg), Err(FoolError::Config(_))));
}

#[test]
fn divergence_returns_last_good() {
    let (model, params, data) = tiny_setup();
    let mut cfg = FoolingConfig::new(FoolMethod::Location, InterpreterSpec::new(InterpreterKind::GradCam, "act3"));
    cfg.lr = 1e30;
    cfg.iterations = 50;
    match finetune(&model, &params, &data, None, &cfg) {
        Err(FoolError::Diverged { last_good, .. }) => assert!(last_good.values().all(|t| t.all_finite())),
        other => panic!("expected divergence, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn linear_schedule_decays_to_zero() {
    let s = LrSchedule::Linear;
    assert_eq!(s.lr_at(0.01, 0, 4), 0.01);
    assert_eq!(s.lr_at(0.01, 2, 4), 0.005);
    assert!((s.lr_at(0.01, 3, 4) - 0.0025).abs() < 1e-15);
    assert_eq!(LrSchedule::Constant.lr_at(0.01, 3, 4), 0.01);
}
