//! Materialize the synthetic dataset as int8 blobs plus a TOML manifest and
//! read it back.

use odfcl::continual;
use odfcl::harness::{self, ExperimentConfig};

fn main() -> odfcl::Result<()> {
    let cfg = ExperimentConfig::default();
    let (train, test) = harness::gen_synthetic(&cfg.synthetic_spec(), cfg.seed)?;
    let dir = std::env::temp_dir().join("odfcl_dataset_example");
    let manifest = continual::write_dataset(&dir, &train, &test)?;
    let (train2, test2) = continual::load_manifest(&manifest)?;
    assert_eq!(train, train2);
    assert_eq!(test, test2);
    println!(
        "{} train / {} test samples over {} classes written to {}",
        train.len(),
        test.len(),
        train.classes().len(),
        manifest.display()
    );
    Ok(())
}
