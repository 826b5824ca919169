//! One incremental session on a small swarm: each node trains on its own new
//! class, uploads its head, and receives the average. The link trace shows
//! only parameter-sized messages.

use odfcl::continual::{self, Dataset, Sample, Split};
use odfcl::cost::LinkModel;
use odfcl::federation::Swarm;
use odfcl::model::{HeadShape, TrainableHead};
use odfcl::objective::LossConfig;
use odfcl::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn main() -> odfcl::Result<()> {
    let plan = continual::make_plan(5, 2, 3, 1)?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let noise = Normal::new(0.0f32, 0.3).unwrap();
    let mut samples = Vec::new();
    for class in 0..5 {
        for k in 0..6 {
            let x: Vec<f32> = (0..4)
                .map(|d| if d == class % 4 { 2.0 } else { 0.0 } + noise.sample(&mut rng))
                .collect();
            samples.push(Sample { id: class * 6 + k, class, input: Tensor::vector(x) });
        }
    }
    let train = Dataset::new(Split::Train, samples);

    let head = TrainableHead::random(HeadShape::new(4, 8, 3), 1.0, &mut rng)?;
    let mut swarm = Swarm::new(&head, &[11, 12], LinkModel::calibrated(), 0.1176)?;
    swarm.install(&swarm.global().expand_classifier(&plan.session_classes(1)?)?);
    let (global, rounds) = swarm.run_session(&plan, 1, 3, &train, &LossConfig::default(), None)?;

    for r in &rounds {
        println!("round {}: mean loss {:.4}, t = {:.2} s", r.round, r.mean_loss.unwrap_or(f64::NAN), r.sim_time_s);
    }
    assert!(swarm.nodes.iter().all(|n| n.head == global && n.global == global));
    println!("{} classes after the session; trace:", global.num_classes());
    print!("{}", swarm.net.trace_csv());
    Ok(())
}
