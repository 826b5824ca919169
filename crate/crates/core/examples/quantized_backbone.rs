//! Build a random int8 backbone, push one quantized input through it, and
//! round-trip it through the binary checkpoint format.

use odfcl::quant::{self, BackboneSpec, FrozenBackbone};
use odfcl::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn main() -> odfcl::Result<()> {
    let spec = BackboneSpec::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let backbone = FrozenBackbone::random(&spec, &mut rng)?;
    println!(
        "backbone: input {:?}, {} layers, {} int8/int32 parameters",
        backbone.input_shape(),
        backbone.layers().len(),
        backbone.parameter_count()
    );

    let numel: usize = spec.input_shape.iter().product();
    let x: Vec<f32> = (0..numel).map(|_| StandardNormal.sample(&mut rng)).collect();
    let qx = quant::quantize(&Tensor::new(spec.input_shape.to_vec(), x)?, spec.input_qparams())?;
    let features = backbone.forward(&qx)?;
    println!("features: {} values, first four {:?}", features.len(), &features.data()[..4]);

    let dir = std::env::temp_dir().join("odfcl_backbone_example");
    std::fs::create_dir_all(&dir).map_err(|e| odfcl::Error::io(&dir, e))?;
    let path = dir.join("backbone.fcb");
    backbone.save(&path)?;
    let reloaded = FrozenBackbone::load(&path)?;
    assert_eq!(reloaded.fingerprint(), backbone.fingerprint());
    assert_eq!(reloaded.forward(&qx)?, features);
    println!("checkpoint {} reloads bit-identically", path.display());
    Ok(())
}
