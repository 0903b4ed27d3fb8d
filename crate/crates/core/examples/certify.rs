//! Finds the largest certified exploration rate at one success probability
//! and re-checks the returned Lyapunov matrix.
//!
//! `cargo run --release --example certify -- 0.8`

use muxncs::model::{build_mode_set, PlantModel};
use muxncs::stability::{self, EpsilonSearch};

fn main() -> muxncs::Result<()> {
    let delta: f64 = std::env::args().nth(1).map_or(Ok(0.8), |s| s.parse()).expect("delta must be a number");
    let modes = build_mode_set(&PlantModel::reference());
    match stability::find_epsilon_bar(delta, &modes, 1e-4)? {
        EpsilonSearch::Certified { epsilon_bar, certificate } => {
            println!("delta {delta}: epsilon_bar = {epsilon_bar:.5}");
            println!("corner margins {:?}", certificate.margins);
            println!("V = {:.4}", certificate.v);
            let rechecked = certificate.verify(&modes)?;
            println!("re-verified margins {rechecked:?}");
        }
        EpsilonSearch::NoFeasibleEpsilon { best_margin } => {
            println!("delta {delta}: no exploration rate is certifiable (best margin {best_margin:.3e})");
        }
    }
    Ok(())
}
