//! Trains a small Q-network and prints its reward curve.
//!
//! `cargo run --release --example train_dqn -- 100`

use muxncs::model::PlantModel;
use muxncs::rl::{self, CertifiedEpsilon, TrainConfig};
use muxncs::sim::{CostWeights, NetworkConfig};
use muxncs::stability;

fn main() -> muxncs::Result<()> {
    let episodes: usize = std::env::args().nth(1).map_or(Ok(60), |s| s.parse()).expect("episode count");
    let plant = PlantModel::reference();
    let modes = muxncs::model::build_mode_set(&plant);
    let cert = match stability::find_epsilon_bar(0.8, &modes, 1e-4)? {
        stability::EpsilonSearch::Certified { certificate, .. } => certificate,
        _ => unreachable!("the reference loop is certifiable at delta 0.8"),
    };
    let mut cfg = TrainConfig::new(CertifiedEpsilon::from_certificate(cert));
    cfg.episodes = episodes;
    cfg.hidden = vec![64, 32];
    let net = NetworkConfig::new(0.8, 12345, 200)?;
    let out = rl::train(&plant, &net, &CostWeights::identity(2, 1), &cfg)?;
    let avg = rl::moving_average(&out.episode_rewards, 20);
    for (i, (r, a)) in out.episode_rewards.iter().zip(&avg).enumerate().step_by(10) {
        println!("episode {i:4}: total {r:10.1}, 20-episode mean {a:10.1}");
    }
    println!("{} updates, failed = {}", out.losses.len(), out.failed);
    Ok(())
}
