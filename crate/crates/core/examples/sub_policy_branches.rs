//! Draws a two-operation sub-policy many times and compares the frequency of
//! each outcome branch with the product of the calling probabilities.
//!
//! `cargo run --example sub_policy_branches -- [p1] [p2] [draws]`

use fastaa::cli::{apply_branches, Branch};
use fastaa::data::{synth_dataset, SynthSpec};
use fastaa::policy::SubPolicy;

fn main() -> fastaa::Result<()> {
    let mut args = std::env::args().skip(1);
    let p1: f64 = args.next().map_or(Ok(0.5), |a| a.parse()).expect("p1");
    let p2: f64 = args.next().map_or(Ok(0.5), |a| a.parse()).expect("p2");
    let draws: usize = args.next().map_or(Ok(10_000), |a| a.parse()).expect("draws");

    let data = synth_dataset(&SynthSpec::new(3, 10), 0)?;
    let sub_policy: SubPolicy = format!("Rotate:{p1}:0.9,Solarize:{p2}:0.7").parse()?;
    let (report, _) = apply_branches(&data, &sub_policy, draws, 0, 7)?;

    let expected = [p1 * p2, p1 * (1.0 - p2), (1.0 - p1) * p2, (1.0 - p1) * (1.0 - p2)];
    println!("{:>12} {:>9} {:>9} {:>9}", "branch", "observed", "expected", "3 sigma");
    for (b, e) in Branch::ALL.into_iter().zip(expected) {
        let sigma = (e * (1.0 - e) / draws as f64).sqrt();
        println!("{:>12} {:>9.4} {e:>9.4} {:>9.4}", b.name(), report.frequency(b), 3.0 * sigma);
    }
    Ok(())
}
