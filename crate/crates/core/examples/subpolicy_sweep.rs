//! Retrains on the digits subset with growing prefixes of a searched
//! sub-policy pool and prints test error per pool size.
//!
//! `cargo run --release --example subpolicy_sweep -- [epochs] [seeds]`

use std::path::Path;

use fastaa::cli::{ranked_pool, sweep_subpolicies};
use fastaa::data::{load_dataset, Format};
use fastaa::model::TrainConfig;
use fastaa::search::{fast_autoaugment, SearchConfig};

fn main() -> fastaa::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs: usize = args.next().map_or(Ok(40), |a| a.parse()).expect("epochs");
    let seeds: usize = args.next().map_or(Ok(3), |a| a.parse()).expect("seeds");
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/digits");
    let train = load_dataset(&root.join("train"), Format::Idx)?;
    let test = load_dataset(&root.join("test"), Format::Idx)?;

    let cfg = SearchConfig {
        k: 2,
        t: 1,
        b: 100,
        n: 10,
        concurrency: 1,
        ..SearchConfig::default()
    };
    let pool = ranked_pool(&fast_autoaugment(&train, &cfg, None)?.policies);
    println!("pool of {} sub-policies", pool.len());
    let train_cfg = TrainConfig {
        epochs,
        ..TrainConfig::default()
    };
    print!("{}", sweep_subpolicies(&train, &test, &pool, &[5, 25, 50, 100], seeds, &train_cfg)?);
    Ok(())
}
