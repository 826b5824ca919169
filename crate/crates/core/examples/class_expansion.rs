//! Grow a head's classifier as sessions register new classes. New rows
//! start at zero, so old logits are untouched.

use odfcl::continual;
use odfcl::model::{HeadShape, TrainableHead};
use odfcl::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> odfcl::Result<()> {
    let plan = continual::make_plan(10, 3, 4, 1)?;
    for t in 0..=plan.num_sessions() {
        println!("T{t}: seen {:?}", plan.seen_classes(t)?);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut head = TrainableHead::random(HeadShape::new(8, 6, plan.base_classes().len()), 1.0, &mut rng)?;
    let x = Tensor::vector(vec![0.5, -1.0, 0.25, 2.0, 0.0, 1.5, -0.5, 1.0]);
    let before = head.logits(&x)?;
    for t in 1..=plan.num_sessions() {
        head = head.expand_classifier(&plan.session_classes(t)?)?;
        let z = head.logits(&x)?;
        assert_eq!(&z.data()[..before.len()], before.data());
        println!("after T{t}: {} classes, logits {:?}", head.num_classes(), z.data());
    }
    Ok(())
}
