//! Trains the probe CNN on the bundled digits subset and reports test accuracy.
//!
//! `cargo run --release --example train_probe -- [epochs] [seed]`

use std::path::Path;
use std::time::Instant;

use fastaa::data::{load_dataset, Format};
use fastaa::model::{self, TrainConfig};
use fastaa::search::retrain_with_policies;

fn main() -> fastaa::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs = args.next().map_or(Ok(10), |a| a.parse()).expect("epochs");
    let seed = args.next().map_or(Ok(0), |a| a.parse()).expect("seed");
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/digits");
    let train = load_dataset(&root.join("train"), Format::Idx)?;
    let test = load_dataset(&root.join("test"), Format::Idx)?;
    println!("train {} images, test {} images, {} classes", train.len(), test.len(), train.class_count());

    let cfg = TrainConfig {
        epochs,
        seed,
        ..TrainConfig::default()
    };
    let started = Instant::now();
    let params = retrain_with_policies(&train, None, &cfg)?;
    let secs = started.elapsed().as_secs_f64();
    let m = model::evaluate(&params, test.images())?;
    println!(
        "{epochs} epochs in {secs:.1}s: test loss {:.4}, test accuracy {:.4}",
        m.loss, m.accuracy
    );
    Ok(())
}
