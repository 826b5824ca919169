//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use odfcl::continual;
use odfcl::cost::{self, LinkModel, OperatingPoint};
use odfcl::federation::{self, Contribution, EventKind, NodeState, SimNetwork, SyncMessage};
use odfcl::harness::{self, ExperimentConfig, Strategy};
use odfcl::model::{HeadShape, TrainableHead};
use odfcl::oracle;
use odfcl::quant::QuantParams;
use odfcl::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = std::result::Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

fn ensure(cond: bool, msg: impl Into<String>) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(value: f64, target: f64, rel: f64) -> bool {
    (value - target).abs() <= rel * target.abs()
}

fn in_time(elapsed: Duration, limit: Duration) -> std::result::Result<(), String> {
    ensure(elapsed < limit, format!("took {elapsed:.2?}, limit {limit:?}"))
}

fn c1_gradients() -> Check {
    let start = Instant::now();
    let cases = oracle::gradcheck_suite(0, 20).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let worst = cases.iter().map(|c| c.comparison.max_rel_error).fold(0.0, f64::max);
    let worst_abs = cases.iter().map(|c| c.comparison.max_abs_error).fold(0.0, f64::max);
    let branches = cases.iter().filter(|c| c.branch == oracle::MolBranch::Fallback).count();
    ensure(cases.len() == 20, "expected 20 instances")?;
    ensure(branches > 0 && branches < 20, "both MOL branches must be covered")?;
    if let Some(bad) = cases.iter().find(|c| !c.comparison.passed) {
        return Err(format!("seed {} failed: {:?}", bad.seed, bad.comparison));
    }
    in_time(elapsed, Duration::from_secs(30))?;
    Ok(format!(
        "20 heads ({branches} fallback), max rel {worst:.2e} < 1e-4, max abs {worst_abs:.2e}, {elapsed:.2?}"
    ))
}

fn c2_quantization() -> Check {
    let qp = QuantParams::new(0.1, 0).map_err(|e| e.to_string())?;
    let mut worst = 0.0f32;
    let mut points = 0;
    for i in -12_700i32..=12_700 {
        let x = (i as f64 * 0.001) as f32;
        let err = (qp.dequantize_value(qp.quantize_value(x)) - x).abs();
        worst = worst.max(err);
        points += 1;
        ensure(err <= 0.05 + 1e-6, format!("x = {x}: error {err}"))?;
    }
    // the tensor path agrees with the scalar path
    let grid: Vec<f32> = (-127..=127).map(|i| i as f32 * 0.1).collect();
    let q = odfcl::quant::quantize(&Tensor::vector(grid.clone()), qp).map_err(|e| e.to_string())?;
    ensure(
        q.data().iter().zip(&grid).all(|(&q, &x)| q == qp.quantize_value(x)),
        "tensor quantize disagrees with scalar quantize",
    )?;
    for x in [12.76f32, 13.0, 100.0, 1e6, f32::MAX] {
        ensure(qp.quantize_value(x) == 127, format!("{x} does not saturate to 127"))?;
    }
    for x in [-12.86f32, -13.0, -100.0, -1e6, f32::MIN] {
        ensure(qp.quantize_value(x) == -128, format!("{x} does not saturate to -128"))?;
    }
    ensure(qp.quantize_value(12.7) == 127 && qp.quantize_value(-12.7) == -127, "edge of range")?;
    Ok(format!("{points} grid points, worst error {worst:.3e} <= scale/2; saturation exact at 127 / -128"))
}

fn c3_cost() -> Check {
    let start = Instant::now();
    let lpm = OperatingPoint::lpm();
    let hpm = OperatingPoint::hpm();
    let e_lpm = 1e3 * cost::epoch_energy(&lpm);
    let e_hpm = 1e3 * cost::epoch_energy(&hpm);
    let ps = 1e3 * cost::per_sample_latency(&lpm, 28).map_err(|e| e.to_string())?;
    let link = LinkModel::calibrated();
    let fed = cost::federated_epoch_time(&hpm, &link, 3, 24_576);
    let head = HeadShape::new(50, 104, 8);
    let free = cost::free_local_epochs(fed, lpm.local_epoch_latency_s);
    ensure(within(e_lpm, 4.3, 0.02), format!("LPM energy {e_lpm:.3} mJ"))?;
    ensure(within(e_hpm, 6.2, 0.02), format!("HPM energy {e_hpm:.3} mJ"))?;
    ensure(within(ps, 6.4, 0.02), format!("LPM per-sample {ps:.3} ms"))?;
    ensure(within(fed, 10.5, 0.05), format!("federated epoch {fed:.3} s"))?;
    ensure(head.parameter_count() == 6144, "test head must have 6144 params")?;
    ensure(head.message_bytes() == 24_576, format!("message {} B", head.message_bytes()))?;
    ensure((57..=59).contains(&free), format!("free epochs {free}"))?;
    in_time(start.elapsed(), Duration::from_secs(1))?;
    Ok(format!(
        "energy {e_lpm:.3}/{e_hpm:.3} mJ, per sample {ps:.3} ms, fed epoch {fed:.4} s, 6144 params -> {} B, free epochs {free}",
        head.message_bytes()
    ))
}

fn c4_fedavg() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for case in 0..100 {
        let n = rng.random_range(1..6);
        let len = rng.random_range(1..50);
        let vs: Vec<Vec<f32>> = (0..n)
            .map(|_| (0..len).map(|_| rng.random_range(-100.0f32..100.0)).collect())
            .collect();
        let weights: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..100.0)).collect();

        let same: Vec<&[f32]> = (0..n).map(|_| vs[0].as_slice()).collect();
        let avg = federation::fedavg(&same, &weights).map_err(|e| e.to_string())?;
        ensure(avg == vs[0], format!("case {case}: idempotence"))?;

        let contribs: Vec<Contribution> = vs
            .iter()
            .enumerate()
            .map(|(node, v)| Contribution { node, params: v, weight: weights[node] })
            .collect();
        let mut shuffled = contribs.clone();
        shuffled.shuffle(&mut rng);
        let a = federation::fedavg_by_node(&contribs).map_err(|e| e.to_string())?;
        let b = federation::fedavg_by_node(&shuffled).map_err(|e| e.to_string())?;
        ensure(a == b, format!("case {case}: permutation"))?;

        for (i, o) in a.iter().enumerate() {
            let lo = vs.iter().map(|v| v[i]).fold(f32::INFINITY, f32::min);
            let hi = vs.iter().map(|v| v[i]).fold(f32::NEG_INFINITY, f32::max);
            ensure(lo <= *o && *o <= hi, format!("case {case}: bounds at {i}"))?;
        }
    }
    Ok("100 seeded cases: idempotent (bit-exact), permutation invariant, within min/max".into())
}

/// Reference accuracies of the default config, frozen from one run.
const REF_NAIVE_T2: f64 = 26.0 / 70.0;
const REF_ODFCL_T2: f64 = 37.0 / 70.0;
const REF_JOINT_T2: f64 = 1.0;
const REF_NAIVE_BASE_T2: f64 = 5.0 / 28.0;

fn c5_forgetting() -> Check {
    let start = Instant::now();
    let report = harness::run_experiment(&ExperimentConfig::default()).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let get = |s| report.result(s).ok_or(format!("missing {s:?}"));
    let (naive, odfcl, joint) = (get(Strategy::Naive)?, get(Strategy::Odfcl)?, get(Strategy::Joint)?);
    let last = report.sessions.len() - 1;
    let pp = |x: f64| 100.0 * x;
    let drop = pp(naive.base_accuracy[0] - naive.base_accuracy[last]);
    let gain = pp(odfcl.accuracy[last] - naive.accuracy[last]);
    let over_joint = pp(odfcl.accuracy[last] - joint.accuracy[last]);
    ensure(drop >= 25.0, format!("(a) naive drop on T0 classes {drop:.1} pp < 25"))?;
    ensure(gain >= 10.0, format!("(b) odfcl - naive {gain:.1} pp < 10"))?;
    ensure(over_joint <= 5.0, format!("(c) odfcl - joint {over_joint:.1} pp > 5"))?;
    let frozen = [
        (naive.accuracy[last], REF_NAIVE_T2, "naive"),
        (odfcl.accuracy[last], REF_ODFCL_T2, "odfcl"),
        (joint.accuracy[last], REF_JOINT_T2, "joint"),
        (naive.base_accuracy[last], REF_NAIVE_BASE_T2, "naive on T0 classes"),
    ];
    for (got, want, what) in frozen {
        ensure(got == want, format!("{what} final accuracy {got} differs from reference {want}"))?;
    }
    in_time(elapsed, Duration::from_secs(300))?;
    Ok(format!(
        "naive T0-class drop {drop:.1} pp, odfcl - naive {gain:+.1} pp, odfcl - joint {over_joint:+.1} pp ({elapsed:.2?})"
    ))
}

fn c6_consensus_privacy() -> Check {
    let cfg = ExperimentConfig::default();
    let plan = cfg.plan.build().map_err(|e| e.to_string())?;
    let backbone = cfg.backbone().map_err(|e| e.to_string())?;
    let (train, _) = cfg.datasets().map_err(|e| e.to_string())?;
    let train = train.embed(&backbone).map_err(|e| e.to_string())?;
    let shape = HeadShape::new(backbone.feature_dim(), cfg.head.hidden_dim, plan.base_classes().len());
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut head = TrainableHead::random(shape, 1.0, &mut rng).map_err(|e| e.to_string())?;
    let mut net = SimNetwork::new(cfg.cost.link).map_err(|e| e.to_string())?;
    let mut nodes: Vec<NodeState> = (0..plan.num_nodes()).map(|i| NodeState::new(i, head.clone(), 50 + i as u64)).collect();
    let mut rounds = 0;
    for t in 1..=plan.num_sessions() {
        head = nodes[0].global.expand_classifier(&plan.session_classes(t).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        nodes.iter_mut().for_each(|n| n.adopt(&head));
        for _ in 0..3 {
            for n in nodes.iter_mut() {
                let view = continual::node_train_view(&train, &plan, t, n.id).map_err(|e| e.to_string())?;
                let part = plan.partition(t, n.id).map_err(|e| e.to_string())?;
                n.local_epoch(&view, &part, &cfg.loss).map_err(|e| e.to_string())?;
            }
            let distinct = nodes.windows(2).any(|w| w[0].head != w[1].head);
            ensure(distinct, "local training should make heads diverge before sync")?;
            let (global, _) = federation::sync_round(&mut nodes, 0, &mut net).map_err(|e| e.to_string())?;
            rounds += 1;
            for n in &nodes {
                ensure(n.head == global, format!("round {rounds}: node {} head differs", n.id))?;
                ensure(n.global == global, format!("round {rounds}: node {} snapshot differs", n.id))?;
            }
            // type level: the only message constructors take a head
            let msg = SyncMessage::upload(1, 0, &global);
            ensure(msg.payload().len() == global.parameter_count(), "upload payload is not the head")?;
        }
    }
    // trace audit: every transfer is exactly one head's worth of bytes
    let mut transfers = 0;
    let mut expected = Vec::new();
    for t in 1..=plan.num_sessions() {
        let k = plan.seen_classes(t).map_err(|e| e.to_string())?.len();
        expected.push(HeadShape::new(shape.feature_dim, shape.hidden_dim, k).message_bytes());
    }
    for e in net.trace() {
        match e.kind {
            EventKind::Upload | EventKind::Broadcast => {
                transfers += 1;
                ensure(expected.contains(&e.bytes), format!("transfer of {} B is not a head", e.bytes))?;
            }
            _ => ensure(e.bytes == 0, "non-transfer event carries bytes")?,
        }
    }
    ensure(transfers == rounds * 2 * plan.num_nodes(), "unexpected number of transfers")?;
    // the same audit over a full experiment run
    let out = harness::run_experiment_detailed(&cfg).map_err(|e| e.to_string())?;
    for (s, events) in &out.traces {
        for e in events.iter().filter(|e| matches!(e.kind, EventKind::Upload | EventKind::Broadcast)) {
            ensure(expected.contains(&e.bytes), format!("{s:?}: transfer of {} B is not a head", e.bytes))?;
        }
    }
    Ok(format!(
        "{rounds} rounds: heads and snapshots bit-identical after each sync; {transfers} transfers, all head-sized"
    ))
}

fn run_cli(config: &Path, out: &Path) -> std::result::Result<(), String> {
    let status = Command::new(env!("CARGO_BIN_EXE_odfcl"))
        .args(["run", "--config"])
        .arg(config)
        .arg("--out")
        .arg(out)
        .output()
        .map_err(|e| e.to_string())?;
    ensure(status.status.success(), format!("run failed: {}", String::from_utf8_lossy(&status.stderr)))
}

fn c7_determinism() -> Check {
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/desk.toml");
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run_cli(&config, &a)?;
    run_cli(&config, &b)?;
    let mut bytes = 0;
    for name in [harness::REPORT_JSON, harness::REPORT_TABLE] {
        let x = std::fs::read(a.join(name)).map_err(|e| e.to_string())?;
        let y = std::fs::read(b.join(name)).map_err(|e| e.to_string())?;
        ensure(x == y, format!("{name} differs between runs"))?;
        bytes += x.len();
    }
    Ok(format!("two `run` executions: report.json and report.txt byte-identical ({bytes} B)"))
}

fn c8_equivalence() -> Check {
    let mut cfg = ExperimentConfig {
        strategies: vec![Strategy::Naive],
        ..ExperimentConfig::default()
    };
    let naive = harness::run_experiment(&cfg).map_err(|e| e.to_string())?;
    cfg.strategies = vec![Strategy::Odfcl];
    cfg.loss.mu = 0.0;
    cfg.loss.lambda = 0.0;
    let odfcl = harness::run_experiment(&cfg).map_err(|e| e.to_string())?;
    let mut relabeled = odfcl.results[0].clone();
    relabeled.strategy = Strategy::Naive;
    let a = serde_json::to_string(&naive.results[0]).map_err(|e| e.to_string())?;
    let b = serde_json::to_string(&relabeled).map_err(|e| e.to_string())?;
    ensure(a == b, "odfcl with mu = lambda = 0 differs from naive")?;
    ensure(naive.cost == odfcl.cost && naive.sessions == odfcl.sessions, "report metadata differs")?;
    Ok(format!("odfcl(mu=0, lambda=0) result bit-identical to naive ({} B of JSON)", a.len()))
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("gradient correctness", c1_gradients),
        ("quantization bound", c2_quantization),
        ("cost model", c3_cost),
        ("fedavg algebra", c4_fedavg),
        ("forgetting ordering", c5_forgetting),
        ("consensus and privacy", c6_consensus_privacy),
        ("end-to-end determinism", c7_determinism),
        ("naive/odfcl equivalence", c8_equivalence),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        match check() {
            Ok(detail) => println!("criterion {} ({name}): PASS - {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {} ({name}): FAIL - {why}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
