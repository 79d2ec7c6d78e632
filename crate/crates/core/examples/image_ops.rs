//! Applies every operation at a few magnitudes to one synthetic image and
//! prints how far each output moved from the input.
//!
//! `cargo run --example image_ops`

use fastaa::data::{synth_dataset, SynthSpec};
use fastaa::imageops::{apply_op, magnitude_map, OpArgs, OpKind};

fn main() -> fastaa::Result<()> {
    let data = synth_dataset(
        &SynthSpec {
            channels: 3,
            noise: 10.0,
            ..SynthSpec::new(2, 2)
        },
        0,
    )?;
    let img = &data.images()[0];
    let partner = &data.images()[1];

    println!("{:<14} {:>6} {:>28} {:>12}", "op", "lambda", "parameter", "mean |diff|");
    for index in 0..16 {
        let kind = OpKind::from_index(index).expect("16 operations");
        for lambda in [0.0, 0.25, 0.5, 1.0] {
            let args = if kind == OpKind::SamplePairing { OpArgs::pair(partner) } else { OpArgs::default() };
            let out = apply_op(img, kind, lambda, args)?;
            let diff: f64 = out
                .pixels()
                .iter()
                .zip(img.pixels())
                .map(|(&a, &b)| f64::from(a.abs_diff(b)))
                .sum::<f64>()
                / img.pixels().len() as f64;
            let param = format!("{:?}", magnitude_map(kind, lambda)?);
            println!("{:<14} {lambda:>6.2} {param:>28} {diff:>12.2}", kind.name());
            if !kind.uses_magnitude() {
                break;
            }
        }
    }
    Ok(())
}
