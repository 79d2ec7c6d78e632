//! Stratified K-fold shuffling of an unbalanced synthetic set, showing the
//! per-class counts of every D_M / D_A pair.
//!
//! `cargo run --example kfold_split -- [k] [seed]`

use fastaa::data::{stratified_kfold_split, synth_dataset, Dataset, SynthSpec};

fn main() -> fastaa::Result<()> {
    let mut args = std::env::args().skip(1);
    let k: usize = args.next().map_or(Ok(5), |a| a.parse()).expect("k");
    let seed: u64 = args.next().map_or(Ok(0), |a| a.parse()).expect("seed");

    let full = synth_dataset(&SynthSpec::new(3, 40), 1)?;
    // drop some images of class 2 so the classes are unbalanced
    let keep: Vec<usize> = (0..full.len())
        .filter(|&i| full.images()[i].label() != 2 || (i / 3) % 3 == 0)
        .collect();
    let data = full.subset("unbalanced", &keep)?;
    println!("source class counts {:?}", data.class_counts());

    let show = |d: &Dataset| format!("{:?}", d.class_counts());
    for split in stratified_kfold_split(&data, k, 0.5, seed)? {
        println!(
            "fold {}: D_M {} {:<14} D_A {} {}",
            split.fold_index,
            split.d_m.len(),
            show(&split.d_m),
            split.d_a.len(),
            show(&split.d_a)
        );
    }
    Ok(())
}
