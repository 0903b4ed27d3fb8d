//! Monte-Carlo second-moment decay for three (delta, epsilon) settings with
//! a silent exploiter: a certified rate at high delta, a small rate at low
//! delta, and the largest rate at low delta.

use muxncs::model::{build_mode_set, PlantModel, Switch};
use muxncs::sim::{monte_carlo_decay, Always, EpsilonGreedy, NetworkConfig};
use muxncs::stability;
use nalgebra::DVector;

fn main() -> muxncs::Result<()> {
    let plant = PlantModel::reference();
    let modes = build_mode_set(&plant);
    let certified = stability::find_epsilon_bar(0.8, &modes, 1e-4)?.epsilon_bar().unwrap_or(0.0);
    let x0 = DVector::from_element(2, 10.0);
    for (label, delta, eps) in [
        ("high delta, certified eps", 0.8, certified),
        ("low delta, low eps", 0.1, 0.02),
        ("low delta, eps = 1", 0.1, 1.0),
    ] {
        let policy = EpsilonGreedy::new(eps, Box::new(Always(Switch::Silent)));
        let net = NetworkConfig::new(delta, 7, 200)?;
        let est = monte_carlo_decay(&plant, &policy, &net, &x0, 1000)?;
        println!(
            "{label:>26} (delta {delta}, eps {eps:.4}): xi = {:.4}, R^2 = {:.3}, diverged {}/{}",
            est.xi, est.r_squared, est.diverged, est.runs
        );
    }
    Ok(())
}
