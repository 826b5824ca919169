//! Compare tape gradients of the full training loss against central finite
//! differences of an independent f64 implementation.

use odfcl::oracle::{self, MolBranch};

fn main() -> odfcl::Result<()> {
    for branch in [MolBranch::Fallback, MolBranch::Both] {
        let case = oracle::head_gradcheck(42, branch)?;
        println!(
            "{branch:?}: {} parameters, max relative error {:.2e} -> {}",
            case.parameter_count,
            case.comparison.max_rel_error,
            if case.comparison.passed { "ok" } else { "FAIL" }
        );
    }
    Ok(())
}
