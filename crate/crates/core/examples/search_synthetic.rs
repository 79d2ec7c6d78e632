//! A complete small search on synthetic data: fold training, exploration,
//! top-N selection, then a check of the selected policies against random ones
//! on each fold's exploration split.
//!
//! `cargo run --release --example search_synthetic -- [seed]`

use fastaa::data::{synth_dataset, SynthSpec};
use fastaa::search::{density_match_report, fast_autoaugment, SearchConfig};

fn main() -> fastaa::Result<()> {
    let seed: u64 = std::env::args().nth(1).map_or(Ok(0), |a| a.parse()).expect("seed");
    let data = synth_dataset(
        &SynthSpec {
            noise: 24.0,
            ..SynthSpec::new(4, 100)
        },
        seed,
    )?;
    let cfg = SearchConfig {
        k: 2,
        t: 2,
        b: 40,
        n: 5,
        concurrency: 2,
        seed,
        ..SearchConfig::default()
    };
    let outcome = fast_autoaugment(&data, &cfg, None)?;
    println!("{} policies selected", outcome.policies.len());
    for fold in &outcome.folds {
        let r = density_match_report(fold, &cfg)?;
        println!(
            "fold {}: probe {} unchanged; D_A accuracy plain {:.3}, searched {:.3}, random {:.3}",
            fold.fold,
            &fold.hash_after[..12],
            r.plain,
            r.searched,
            r.random
        );
    }
    let best = outcome
        .policies
        .policies
        .iter()
        .min_by(|a, b| a.loss.total_cmp(&b.loss))
        .expect("non-empty");
    println!("best policy (fold {}, round {}, loss {:.4}):", best.fold, best.round, best.loss);
    for sp in &best.sub_policies {
        let ops: Vec<String> = sp.ops().iter().map(|o| format!("{}(p={:.2}, l={:.2})", o.kind, o.p, o.lambda)).collect();
        println!("  {}", ops.join(" -> "));
    }
    Ok(())
}
