//! Minimizes (x - 0.7)^2 with the Parzen-estimator optimizer and with uniform
//! random search, printing the running best of both.
//!
//! `cargo run --example tpe_quadratic -- [trials] [seed]`

use fastaa::rng;
use fastaa::tpe::{SearchSpace, TpeConfig, TrialHistory};
use rand::Rng;

fn main() -> fastaa::Result<()> {
    let mut args = std::env::args().skip(1);
    let trials: usize = args.next().map_or(Ok(150), |a| a.parse()).expect("trials");
    let seed: u64 = args.next().map_or(Ok(0), |a| a.parse()).expect("seed");
    let f = |x: f64| (x - 0.7).powi(2);

    let mut history = TrialHistory::new(SearchSpace::continuous(1)?, TpeConfig::default())?;
    let mut s = rng::stream(seed, &[1]);
    let mut r = rng::stream(seed, &[2]);
    let (mut best_tpe, mut best_rand) = (f64::INFINITY, f64::INFINITY);
    println!("{:>6} {:>12} {:>12}", "trial", "tpe best", "random best");
    for t in 1..=trials {
        let (id, x) = history.ask(&mut s)?;
        let v = f(x[0]);
        history.tell(id, v)?;
        best_tpe = best_tpe.min(v);
        best_rand = best_rand.min(f(r.random()));
        if t % 10 == 0 || t == trials {
            println!("{t:>6} {best_tpe:>12.3e} {best_rand:>12.3e}");
        }
    }
    let (id, loss) = history.best().expect("completed trials");
    println!("best x = {:.4} (loss {loss:.3e})", history.trials()[id].params[0]);
    Ok(())
}
