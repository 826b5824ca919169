//! Independent references for the tape, the integer backbone and the split
//! model.

use odfcl::continual::{self, Dataset, Sample, Split};
use odfcl::harness::{self, ExperimentConfig, PlanConfig};
use odfcl::model::{HeadShape, TrainableHead};
use odfcl::objective::{self, ClassPartition, Example, LossConfig};
use odfcl::oracle::{ABS_TOL, FD_STEP, REL_TOL};
use odfcl::quant::{self, BackboneSpec, FrozenBackbone, QuantParams};
use odfcl::tensor::gradcheck::{compare_gradients, finite_diff_grad};
use odfcl::tensor::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

fn matmul_f64(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut y = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            y[i * m + j] = (0..k).map(|p| a[i * k + p] * b[p * m + j]).sum();
        }
    }
    y
}

fn conv_f64(x: &[f64], w: &[f64], b: &[f64], cin: usize, cout: usize, hw: usize) -> Vec<f64> {
    let mut y = vec![0.0; cout * hw];
    for o in 0..cout {
        for s in 0..hw {
            y[o * hw + s] = b[o] + (0..cin).map(|c| w[o * cin + c] * x[c * hw + s]).sum::<f64>();
        }
    }
    y
}

fn dot(c: &[f64], y: &[f64]) -> f64 {
    c.iter().zip(y).map(|(a, b)| a * b).sum()
}

/// Scalar `<c, y>` on the tape, so the op under test receives the exact
/// cotangent `c`.
fn probe(g: &mut Graph, y: Var, c: &[f32]) -> Var {
    let n = g.value(y).len();
    let flat = g.reshape(y, &[1, n]).unwrap();
    let cv = g.input(Tensor::matrix(n, 1, c.to_vec()).unwrap());
    g.matmul(flat, cv).unwrap()
}

fn assert_close(seed: u64, what: &str, analytic: &Tensor, numeric: &[f64]) {
    let c = compare_gradients(analytic.data(), numeric, REL_TOL, ABS_TOL);
    assert!(c.passed, "seed {seed}, {what}: {c:?}");
}

/// Values with magnitude at least 0.1, away from the relu kink.
fn off_kink(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    randn(rng, n)
        .into_iter()
        .map(|v| v.signum() * (0.1 + v.abs()))
        .collect()
}

#[test]
fn matmul_gradients_match_finite_differences() {
    let (n, k, m) = (3, 4, 2);
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b, c) = (randn(&mut rng, n * k), randn(&mut rng, k * m), randn(&mut rng, n * m));
        let mut g = Graph::new();
        let va = g.param(Tensor::matrix(n, k, a.clone()).unwrap());
        let vb = g.param(Tensor::matrix(k, m, b.clone()).unwrap());
        let y = g.matmul(va, vb).unwrap();
        let loss = probe(&mut g, y, &c);
        g.backward(loss).unwrap();

        let (a64, b64, c64) = (to_f64(&a), to_f64(&b), to_f64(&c));
        let na = finite_diff_grad(|x| dot(&c64, &matmul_f64(x, &b64, n, k, m)), &a64, FD_STEP).unwrap();
        let nb = finite_diff_grad(|x| dot(&c64, &matmul_f64(&a64, x, n, k, m)), &b64, FD_STEP).unwrap();
        assert_close(seed, "dA", g.grad(va).unwrap(), &na);
        assert_close(seed, "dB", g.grad(vb).unwrap(), &nb);
    }
}

#[test]
fn pointwise_conv_gradients_match_finite_differences() {
    let (cin, cout, h, w) = (4, 5, 3, 3);
    let hw = h * w;
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let x = randn(&mut rng, cin * hw);
        let wt = randn(&mut rng, cout * cin);
        let bs = randn(&mut rng, cout);
        let c = randn(&mut rng, cout * hw);
        let mut g = Graph::new();
        let vx = g.param(Tensor::new(vec![cin, h, w], x.clone()).unwrap());
        let vw = g.param(Tensor::matrix(cout, cin, wt.clone()).unwrap());
        let vb = g.param(Tensor::vector(bs.clone()));
        let y = g.pointwise_conv(vx, vw, vb).unwrap();
        let loss = probe(&mut g, y, &c);
        g.backward(loss).unwrap();

        let (x64, w64, b64, c64) = (to_f64(&x), to_f64(&wt), to_f64(&bs), to_f64(&c));
        let f = |x: &[f64], w: &[f64], b: &[f64]| dot(&c64, &conv_f64(x, w, b, cin, cout, hw));
        let nx = finite_diff_grad(|v| f(v, &w64, &b64), &x64, FD_STEP).unwrap();
        let nw = finite_diff_grad(|v| f(&x64, v, &b64), &w64, FD_STEP).unwrap();
        let nb = finite_diff_grad(|v| f(&x64, &w64, v), &b64, FD_STEP).unwrap();
        assert_close(seed, "dx", g.grad(vx).unwrap(), &nx);
        assert_close(seed, "dw", g.grad(vw).unwrap(), &nw);
        assert_close(seed, "db", g.grad(vb).unwrap(), &nb);
    }
}

#[test]
fn elementwise_and_pooling_gradients_match_finite_differences() {
    let (ch, h, w) = (3, 2, 2);
    let n = ch * h * w;
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let (x, z) = (off_kink(&mut rng, n), randn(&mut rng, n));
        let c = randn(&mut rng, n);
        let cp = randn(&mut rng, ch);
        let factor = 0.5 + rng.random::<f32>();
        let (x64, z64, c64, cp64) = (to_f64(&x), to_f64(&z), to_f64(&c), to_f64(&cp));
        let shape = vec![ch, h, w];

        // relu, add, sub, scale chained: scale(relu(x) + z - x, f)
        let mut g = Graph::new();
        let vx = g.param(Tensor::new(shape.clone(), x.clone()).unwrap());
        let vz = g.param(Tensor::new(shape.clone(), z.clone()).unwrap());
        let r = g.relu(vx);
        let s = g.add(r, vz).unwrap();
        let d = g.sub(s, vx).unwrap();
        let y = g.scale(d, factor);
        let loss = probe(&mut g, y, &c);
        g.backward(loss).unwrap();
        let f = |x: &[f64], z: &[f64]| -> f64 {
            let y: Vec<f64> = (0..n).map(|i| (x[i].max(0.0) + z[i] - x[i]) * factor as f64).collect();
            dot(&c64, &y)
        };
        assert_close(seed, "elementwise dx", g.grad(vx).unwrap(), &finite_diff_grad(|v| f(v, &z64), &x64, FD_STEP).unwrap());
        assert_close(seed, "elementwise dz", g.grad(vz).unwrap(), &finite_diff_grad(|v| f(&x64, v), &z64, FD_STEP).unwrap());

        // global_avg_pool
        let mut g = Graph::new();
        let vx = g.param(Tensor::new(shape.clone(), x.clone()).unwrap());
        let p = g.global_avg_pool(vx).unwrap();
        let loss = probe(&mut g, p, &cp);
        g.backward(loss).unwrap();
        let pool = |x: &[f64]| -> f64 {
            let hw = h * w;
            let y: Vec<f64> = (0..ch).map(|k| x[k * hw..(k + 1) * hw].iter().sum::<f64>() / hw as f64).collect();
            dot(&cp64, &y)
        };
        assert_close(seed, "pool", g.grad(vx).unwrap(), &finite_diff_grad(pool, &x64, FD_STEP).unwrap());

        // sum_squares is scalar already
        let mut g = Graph::new();
        let vx = g.param(Tensor::new(shape.clone(), x.clone()).unwrap());
        let loss = g.sum_squares(vx);
        g.backward(loss).unwrap();
        let sq = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>();
        assert_close(seed, "sum_squares", g.grad(vx).unwrap(), &finite_diff_grad(sq, &x64, FD_STEP).unwrap());
    }
}

fn lse(z: &[f64]) -> f64 {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn mean_of(z: &[f64], idx: &[usize]) -> f64 {
    idx.iter().map(|&i| z[i]).sum::<f64>() / idx.len() as f64
}

#[test]
fn loss_op_gradients_match_finite_differences() {
    let k = 6;
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(250 + seed);
        let z = randn(&mut rng, k);
        let z64 = to_f64(&z);
        let target = seed as usize % k;

        let mut g = Graph::new();
        let vz = g.param(Tensor::vector(z.clone()));
        let loss = g.cross_entropy(vz, target).unwrap();
        g.backward(loss).unwrap();
        let ce = |z: &[f64]| lse(z) - z[target];
        assert_close(seed, "cross_entropy", g.grad(vz).unwrap(), &finite_diff_grad(ce, &z64, FD_STEP).unwrap());

        for (a, b) in [(vec![1usize, 2], vec![3usize, 4, 5]), (vec![], vec![3, 4, 5])] {
            let mut g = Graph::new();
            let vz = g.param(Tensor::vector(z.clone()));
            let loss = g.mean_output_gap(vz, a.clone(), b.clone()).unwrap();
            g.backward(loss).unwrap();
            let gap = |z: &[f64]| {
                let d = if a.is_empty() { mean_of(z, &b) } else { mean_of(z, &a) - mean_of(z, &b) };
                d * d
            };
            let what = if a.is_empty() { "mol fallback" } else { "mol" };
            assert_close(seed, what, g.grad(vz).unwrap(), &finite_diff_grad(gap, &z64, FD_STEP).unwrap());
        }
    }
}

/// Float pipeline over the dequantized weights, clamped to each layer's
/// representable output range but never rounded.
fn float_reference(backbone: &FrozenBackbone, x: &[f32]) -> Vec<f64> {
    let [_, h, w] = backbone.input_shape();
    let hw = h * w;
    let mut act: Vec<f64> = x.iter().map(|&v| v as f64).collect();
    let mut in_scale = backbone.input_qparams().scale() as f64;
    for layer in backbone.layers() {
        let ws = layer.weight_scale() as f64;
        let out = layer.output();
        let (s, zp) = (out.scale() as f64, out.zero_point() as f64);
        let lo = if layer.relu() { 0.0 } else { (-128.0 - zp) * s };
        let hi = (127.0 - zp) * s;
        let mut next = vec![0.0; layer.c_out() * hw];
        for o in 0..layer.c_out() {
            for p in 0..hw {
                let mut acc = layer.bias()[o] as f64 * in_scale * ws;
                for c in 0..layer.c_in() {
                    acc += layer.weights()[o * layer.c_in() + c] as f64 * ws * act[c * hw + p];
                }
                next[o * hw + p] = acc.clamp(lo, hi);
            }
        }
        act = next;
        in_scale = s;
    }
    let c_out = backbone.feature_dim();
    (0..c_out)
        .map(|c| act[c * hw..(c + 1) * hw].iter().sum::<f64>() / hw as f64)
        .collect()
}

#[test]
fn integer_backbone_tracks_float_reference() {
    let spec = BackboneSpec {
        input_shape: [16, 3, 3],
        hidden: vec![32],
        feature_dim: 12,
        ..BackboneSpec::default()
    };
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = FrozenBackbone::random(&spec, &mut rng).unwrap();
        let bound: f64 = 2.0 * backbone.layers().iter().map(|l| l.output().scale() as f64).sum::<f64>();
        let numel: usize = spec.input_shape.iter().product();
        let x: Vec<f32> = randn(&mut rng, numel);
        let qx = quant::quantize(&Tensor::new(spec.input_shape.to_vec(), x).unwrap(), spec.input_qparams()).unwrap();
        let deq = quant::dequantize(&qx);
        let got = backbone.forward(&qx).unwrap();
        let want = float_reference(&backbone, deq.data());
        for (g, w) in got.data().iter().zip(&want) {
            assert!((*g as f64 - w).abs() <= bound, "seed {seed}: {g} vs {w}, bound {bound}");
        }
    }
}

#[test]
fn quantize_examples() {
    let qp = QuantParams::new(0.5, -28).unwrap();
    assert_eq!(qp.dequantize_value(-128), -50.0);
    let qp = QuantParams::new(0.1, 0).unwrap();
    assert_eq!(qp.quantize_value(100.0), 127);
    assert_eq!(qp.quantize_value(-100.0), -128);
}

/// Head forward in f64 from a flattened parameter vector
/// `[conv_w, conv_b, cls_w, cls_b]`.
fn head_logits_f64(p: &[f64], x: &[f64], f: usize, h: usize, k: usize) -> Vec<f64> {
    let (cw, rest) = p.split_at(h * f);
    let (cb, rest) = rest.split_at(h);
    let (kw, kb) = rest.split_at(k * h);
    let hid: Vec<f64> = (0..h)
        .map(|o| (cb[o] + (0..f).map(|i| cw[o * f + i] * x[i]).sum::<f64>()).max(0.0))
        .collect();
    (0..k)
        .map(|c| kb[c] + (0..h).map(|j| kw[c * h + j] * hid[j]).sum::<f64>())
        .collect()
}

#[test]
fn cross_entropy_head_gradients_match_finite_differences() {
    let (f, h, k) = (5, 4, 3);
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let head = TrainableHead::random(HeadShape::new(f, h, k), 1.0, &mut rng).unwrap();
        let x = Tensor::vector(randn(&mut rng, f));
        let target = seed as usize % k;
        let mut g = Graph::new();
        let vars = head.attach(&mut g);
        let z = vars.logits(&mut g, &x).unwrap();
        let loss = g.cross_entropy(z, target).unwrap();
        g.backward(loss).unwrap();
        // only head parameters carry gradients
        let grads = vars.gradients(&g).unwrap();
        assert_eq!(grads.parameter_count(), head.parameter_count());

        let x64 = to_f64(x.data());
        let numeric = finite_diff_grad(
            |p| {
                let z = head_logits_f64(p, &x64, f, h, k);
                let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln() - z[target]
            },
            &to_f64(head.flatten().data()),
            FD_STEP,
        )
        .unwrap();
        let c = compare_gradients(grads.flatten().data(), &numeric, REL_TOL, ABS_TOL);
        assert!(c.passed, "seed {seed}: {c:?}");
    }
}

#[test]
fn expansion_keeps_old_logits_on_random_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let head = TrainableHead::random(HeadShape::new(6, 5, 4), 1.0, &mut rng).unwrap();
    let grown = head.expand_classifier(&[4, 5]).unwrap();
    for _ in 0..50 {
        let x = Tensor::vector(randn(&mut rng, 6));
        let a = head.logits(&x).unwrap();
        let b = grown.logits(&x).unwrap();
        assert_eq!(&b.data()[..4], a.data());
        assert_eq!(&b.data()[4..], &[0.0, 0.0]);
    }
}

#[test]
fn node_views_partition_session_samples() {
    let cfg = ExperimentConfig::default();
    let plan = cfg.plan.build().unwrap();
    let (train, _) = harness::gen_synthetic(&cfg.synthetic_spec(), 1).unwrap();
    for t in 1..=plan.num_sessions() {
        let mut ids = Vec::new();
        for n in 0..plan.num_nodes() {
            let view = continual::node_train_view(&train, &plan, t, n).unwrap();
            assert!(view.samples().iter().all(|s| plan.node_classes(t, n).unwrap().contains(&s.class)));
            ids.extend(view.samples().iter().map(|s| s.id));
        }
        let want: Vec<usize> = train
            .filter_classes(&plan.session_classes(t).unwrap())
            .samples()
            .iter()
            .map(|s| s.id)
            .collect();
        let n_ids = ids.len();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), n_ids, "views overlap");
        assert_eq!(ids, want);
    }
}

#[test]
fn backbone_is_untouched_by_an_experiment() {
    let cfg = ExperimentConfig {
        rounds: 2,
        pretrain_epochs: 2,
        plan: PlanConfig {
            classes: 6,
            nodes: 2,
            base: 4,
            per_node: 1,
            sessions: None,
        },
        ..ExperimentConfig::default()
    };
    let before = cfg.backbone().unwrap().fingerprint();
    let out = harness::run_experiment_detailed(&cfg).unwrap();
    assert_eq!(out.backbone.fingerprint(), before);
}

#[test]
fn separable_toy_training_reduces_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut samples = Vec::new();
    for i in 0..40 {
        let class = i % 2;
        let sign = if class == 0 { 1.0 } else { -1.0 };
        let x: Vec<f32> = (0..3).map(|_| sign + 0.2 * rng.random::<f32>()).collect();
        samples.push(Sample { id: i, class, input: Tensor::vector(x) });
    }
    let ds = Dataset::new(Split::Train, samples);
    let mut head = TrainableHead::random(HeadShape::new(3, 4, 2), 1.0, &mut rng).unwrap();
    let anchor = head.clone();
    let part = ClassPartition::new([], [0, 1]).unwrap();
    let cfg = LossConfig::default().naive();
    let batch: Vec<Example> = ds
        .samples()
        .iter()
        .map(|s| Example { features: s.input.clone(), target: s.class })
        .collect();
    let first = objective::total_loss(&head, &batch, &part, &anchor, &cfg).unwrap().loss;
    for _ in 0..50 {
        let out = objective::total_loss(&head, &batch, &part, &anchor, &cfg).unwrap();
        head = objective::sgd_step(&head, &out.grads, 0.1).unwrap();
    }
    let last = objective::total_loss(&head, &batch, &part, &anchor, &cfg).unwrap().loss;
    assert!(last < 0.5 * first, "{first} -> {last}");
}

