//! Prints the five mode matrices of the double-integrator loop and their
//! spectral radii.

use muxncs::linalg;
use muxncs::model::{build_mode_set, Mode, PlantModel};

fn main() -> muxncs::Result<()> {
    let plant = PlantModel::reference();
    println!("A + BK has spectral radius {:.4}", linalg::spectral_radius(&plant.closed_loop())?);
    let modes = build_mode_set(&plant);
    for mode in Mode::ALL {
        let gamma = modes.gamma(mode);
        println!(
            "mode {} (sigma {:+}, {:?}): rho = {:.4}{gamma:.4}",
            mode.index(),
            mode.switch().value(),
            mode.outcome(),
            linalg::spectral_radius(gamma)?
        );
    }
    Ok(())
}
