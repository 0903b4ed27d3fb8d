//! The certified exploration rate across success probabilities, written as
//! CSV to stdout.

use muxncs::markov::CHECK_DELTAS;
use muxncs::model::{build_mode_set, PlantModel};
use muxncs::stability;

fn main() -> muxncs::Result<()> {
    let modes = build_mode_set(&PlantModel::reference());
    let rows = stability::sweep_delta(&CHECK_DELTAS, &modes, 1e-4);
    for row in &rows {
        eprintln!("delta {:.1}: {} {:?}", row.delta, row.status(), row.epsilon_bar());
    }
    stability::write_sweep_csv(&rows, std::io::stdout().lock())
}
