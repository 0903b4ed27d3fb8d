//! Paired average-reward comparison of the fixed scheduling baselines.

use muxncs::model::{PlantModel, Switch};
use muxncs::sim::{average_reward, Always, CostWeights, InitialBox, NetworkConfig, RoundRobin, SchedulingPolicy, UniformRandom};

fn main() -> muxncs::Result<()> {
    let plant = PlantModel::reference();
    let net = NetworkConfig::new(0.8, 2024, 200)?;
    let weights = CostWeights::identity(2, 1);
    let policies: Vec<Box<dyn SchedulingPolicy>> = vec![
        Box::new(RoundRobin::alternating()),
        Box::new(RoundRobin::three_phase()),
        Box::new(UniformRandom),
        Box::new(Always(Switch::Control)),
        Box::new(Always(Switch::Observe)),
    ];
    for p in &policies {
        let s = average_reward(&plant, p.as_ref(), &net, &weights, 500, InitialBox::default())?;
        println!("{:>14}: {:9.3} +/- {:.3} ({} diverged)", p.name(), s.mean, s.stderr, s.diverged);
    }
    Ok(())
}
