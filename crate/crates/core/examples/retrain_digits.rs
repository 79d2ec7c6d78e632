//! End to end on the digits subset: search policies, then compare test error
//! of retraining with them against no augmentation and against random policies.
//!
//! `cargo run --release --example retrain_digits -- [seeds] [epochs]`

use std::path::Path;
use std::time::Instant;

use fastaa::data::{load_dataset, Format};
use fastaa::model::{self, TrainConfig};
use fastaa::search::{fast_autoaugment, random_policy_set, retrain_with_policies, SearchConfig};

fn main() -> fastaa::Result<()> {
    let mut args = std::env::args().skip(1);
    let seeds: u64 = args.next().map_or(Ok(3), |a| a.parse()).expect("seeds");
    let epochs: usize = args.next().map_or(Ok(20), |a| a.parse()).expect("epochs");
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/digits");
    let train = load_dataset(&root.join("train"), Format::Idx)?;
    let test = load_dataset(&root.join("test"), Format::Idx)?;

    println!("seed  baseline  random  searched  (test error)");
    for seed in 0..seeds {
        let started = Instant::now();
        let cfg = SearchConfig {
            k: 2,
            t: 1,
            b: 100,
            n: 5,
            concurrency: 1,
            seed,
            ..SearchConfig::default()
        };
        let searched = fast_autoaugment(&train, &cfg, None)?.policies;
        let random = random_policy_set(searched.len(), cfg.sub_policies, cfg.ops_per_sub_policy, seed)?;
        let search_secs = started.elapsed().as_secs_f64();

        let train_cfg = TrainConfig {
            epochs,
            seed,
            ..TrainConfig::default()
        };
        let error = |set| -> fastaa::Result<f64> {
            let params = retrain_with_policies(&train, set, &train_cfg)?;
            Ok(1.0 - model::accuracy(&params, &test)?)
        };
        println!(
            "{seed:>4}  {:>8.4}  {:>6.4}  {:>8.4}  (search {search_secs:.0}s, total {:.0}s)",
            error(None)?,
            error(Some(&random))?,
            error(Some(&searched))?,
            started.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
