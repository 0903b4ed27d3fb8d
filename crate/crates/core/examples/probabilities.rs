//! Switch and mode probabilities for a few exploration rates, and the
//! convex-combination identity that reduces any exploiter to three corners.

use muxncs::markov::{self, Corner, ExploitParams};

fn main() -> muxncs::Result<()> {
    let delta = 0.8;
    let exploit = ExploitParams::new(0.3, 0.5)?;
    println!("exploiter p = {}, q = {}, delta = {delta}", exploit.p(), exploit.q());
    for eps in [0.0, 0.2, 0.5, 1.0] {
        let sw = markov::switch_distribution(eps, exploit)?;
        let modes = markov::mode_distribution(delta, sw)?;
        let residual = markov::convex_combination_check(eps, exploit)?;
        println!("eps {eps:.1}: switch {sw:?}");
        println!("         modes {:?}, corner-mix residual {residual:.1e}", modes.probs());
    }
    for corner in Corner::ALL {
        let dist = markov::corner_mode_distribution(corner, delta, 0.2)?;
        println!("C{} at eps 0.2: {:?}", corner.number(), dist.probs());
    }
    Ok(())
}
