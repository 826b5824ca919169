//! Latency, energy, link and memory figures for the default operating
//! points and head.

use odfcl::cost::{self, CostConfig, LinkModel, OperatingPoint};
use odfcl::model::HeadShape;

fn main() -> odfcl::Result<()> {
    let lpm = OperatingPoint::lpm();
    let hpm = OperatingPoint::hpm();
    let link = LinkModel::calibrated();
    let fed = cost::federated_epoch_time(&hpm, &link, 3, cost::REFERENCE_MESSAGE_BYTES);
    println!("LPM epoch energy {:.3} mJ", 1e3 * cost::epoch_energy(&lpm));
    println!("HPM epoch energy {:.3} mJ", 1e3 * cost::epoch_energy(&hpm));
    println!("federated epoch (HPM, 3 nodes, 24 KiB): {fed:.4} s");
    println!("LPM local epochs in the same time: {}", cost::free_local_epochs(fed, lpm.local_epoch_latency_s));
    println!();
    let report = cost::cost_report(&CostConfig::default(), HeadShape::new(64, 64, 10), 3, 4)?;
    print!("{}", report.table());
    Ok(())
}
