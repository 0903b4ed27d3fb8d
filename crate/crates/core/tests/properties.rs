//! Invariants checked over random inputs.

mod common;

use muxncs::markov::{self, Corner, ExploitParams};
use muxncs::model::{build_mode_set, mode_from_events, step_augmented, step_components, AugmentedState, Mode, PlantModel, Switch};
use muxncs::rl::{
    self, load_weights, save_weights, CertifiedEpsilon, Experience, InputMode, QNetwork, QNetworkGreedy, ReplayMemory,
    TrainConfig, WeightsMeta,
};
use muxncs::sim::{
    self, explore, simulate, simulate_with_streams, Always, CostWeights, EpsilonGreedy, NetworkConfig, RngStreams,
    RoundRobin, SchedulingPolicy, UniformRandom,
};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn simplex_point() -> impl Strategy<Value = (f64, f64)> {
    (0.0..=1.0f64, 0.0..=1.0f64).prop_map(|(a, b)| (a, (1.0 - a) * b))
}

fn plant_strategy() -> impl Strategy<Value = PlantModel> {
    (1usize..=3, 1usize..=2, any::<u64>()).prop_map(|(n, m, seed)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |r, c| DMatrix::from_fn(r, c, |_, _| rng.gen_range(-1.5..1.5));
        let (a, b, k) = (draw(n, n), draw(n, m), draw(m, n));
        PlantModel::new_unchecked_gain(a, b, DMatrix::identity(n, n), k).unwrap()
    })
}

fn state_for(plant: &PlantModel, seed: u64) -> AugmentedState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, m) = (plant.state_dim(), plant.input_dim());
    AugmentedState {
        x: DVector::from_fn(n, |_, _| rng.gen_range(-10.0..10.0)),
        xhat_prev: DVector::from_fn(n, |_, _| rng.gen_range(-10.0..10.0)),
        uhat_prev: DVector::from_fn(m, |_, _| rng.gen_range(-10.0..10.0)),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn distributions_are_normalized(eps in 0.0..=1.0f64, (p, q) in simplex_point(), delta in 0.0..=1.0f64) {
        let exploit = ExploitParams::new(p, q).unwrap();
        let sw = markov::switch_distribution(eps, exploit).unwrap();
        prop_assert!((sw.total() - 1.0).abs() < 1e-12);
        let modes = markov::mode_distribution(delta, sw).unwrap();
        prop_assert!((modes.total() - 1.0).abs() < 1e-12);
        prop_assert!(modes.probs().iter().all(|&v| v >= 0.0));
        let oracle = common::mode_probs(delta, eps, p, q);
        for (a, b) in modes.probs().iter().zip(oracle) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn general_case_is_convex_mix_of_corners(eps in 0.0..=1.0f64, (p, q) in simplex_point()) {
        let exploit = ExploitParams::new(p, q).unwrap();
        prop_assert!(markov::convex_combination_check(eps, exploit).unwrap() < 1e-12);
    }

    #[test]
    fn corners_match_their_exploit_parameters(eps in 0.0..=1.0f64, delta in 0.0..=1.0f64) {
        for corner in Corner::ALL {
            let e = corner.exploit();
            let direct = markov::corner_mode_distribution(corner, delta, eps).unwrap();
            let oracle = common::mode_probs(delta, eps, e.p(), e.q());
            for (a, b) in direct.probs().iter().zip(oracle) {
                prop_assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn matrix_and_component_steps_agree(plant in plant_strategy(), seed in any::<u64>(), s in 0usize..3, delivered in any::<bool>()) {
        let modes = build_mode_set(&plant);
        let state = state_for(&plant, seed);
        let switch = Switch::ALL[s];
        let a = step_augmented(&modes, &state, mode_from_events(switch, delivered)).unwrap().flatten();
        let b = step_components(&plant, &state, switch, delivered).unwrap().flatten();
        let scale = b.amax().max(1.0);
        prop_assert!((a - b).amax() / scale < 1e-10);
    }

    #[test]
    fn stepping_is_linear(plant in plant_strategy(), s1 in any::<u64>(), s2 in any::<u64>(), c in -3.0..3.0f64, mode in 1usize..=5) {
        let modes = build_mode_set(&plant);
        let (u, v) = (state_for(&plant, s1), state_for(&plant, s2));
        let mode = Mode::from_index(mode).unwrap();
        let combo = AugmentedState::unflatten(&(u.flatten() * c + v.flatten()), plant.state_dim(), plant.input_dim()).unwrap();
        let lhs = step_augmented(&modes, &combo, mode).unwrap().flatten();
        let rhs = step_augmented(&modes, &u, mode).unwrap().flatten() * c + step_augmented(&modes, &v, mode).unwrap().flatten();
        prop_assert!((lhs - &rhs).amax() <= 1e-10 * rhs.amax().max(1.0));
    }

    #[test]
    fn trace_replays_through_mode_matrices(seed in any::<u64>(), delta in 0.05..=1.0f64, eps in 0.0..=1.0f64) {
        let plant = PlantModel::reference();
        let modes = build_mode_set(&plant);
        let net = NetworkConfig::new(delta, seed, 60).unwrap();
        let weights = CostWeights::identity(2, 1);
        let mut policy = EpsilonGreedy::new(eps, Box::new(UniformRandom));
        let trace = simulate(&plant, &mut policy, &net, &weights, &DVector::from_vec(vec![3.0, -2.0])).unwrap();
        let mut state = trace.initial.clone();
        for r in &trace.records {
            prop_assert_eq!(r.mode, mode_from_events(r.switch, r.delivered));
            let next = step_augmented(&modes, &state, r.mode).unwrap();
            let scale = r.state.flatten().amax().max(1.0);
            prop_assert!((next.flatten() - r.state.flatten()).amax() / scale < 1e-10);
            let expected_cost = state.x.norm_squared() + next.uhat_prev.norm_squared() + 0.5 * r.switch.transmissions();
            prop_assert!((r.cost - expected_cost).abs() <= 1e-10 * expected_cost.max(1.0));
            prop_assert_eq!(r.reward, -r.cost);
            state = next;
        }
    }

    #[test]
    fn weights_round_trip_exactly(seed in any::<u64>(), h1 in 1usize..8, h2 in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = QNetwork::random(&[2, h1, h2, 3], &mut rng).unwrap();
        let meta = WeightsMeta { epsilon: 0.2, delta: 0.8, seed, input: InputMode::State };
        let mut buf = Vec::new();
        save_weights(&net, meta.clone(), &mut buf).unwrap();
        let (back, back_meta) = load_weights(buf.as_slice()).unwrap();
        prop_assert_eq!(back_meta, meta);
        for _ in 0..100 {
            let probe = DVector::from_fn(2, |_, _| rng.gen_range(-20.0..20.0));
            prop_assert_eq!(net.forward(&probe).unwrap(), back.forward(&probe).unwrap());
        }
    }

    #[test]
    fn td_loss_uses_the_target_network(seed in any::<u64>(), beta in 0.0..0.99f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = QNetwork::random(&[2, 4, 3], &mut rng).unwrap();
        let target = QNetwork::random(&[2, 4, 3], &mut rng).unwrap();
        let batch: Vec<Experience> = (0..4)
            .map(|i| Experience {
                sigma: Switch::ALL[i % 3],
                state: DVector::from_fn(2, |_, _| rng.gen_range(-5.0..5.0)),
                reward: rng.gen_range(-10.0..0.0),
                next_state: DVector::from_fn(2, |_, _| rng.gen_range(-5.0..5.0)),
            })
            .collect();
        let refs: Vec<&Experience> = batch.iter().collect();
        let (loss, _) = rl::td_gradient(&net, &target, &refs, beta).unwrap();
        let expected: f64 = batch
            .iter()
            .map(|e| {
                let y = e.reward + beta * target.forward(&e.next_state).unwrap().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let q = net.forward(&e.state).unwrap()[rl::action_index(e.sigma)];
                (q - y).powi(2)
            })
            .sum::<f64>()
            / batch.len() as f64;
        prop_assert!((loss - expected).abs() <= 1e-9 * expected.max(1.0));
    }
}

fn four_sigma(p: f64, n: usize) -> f64 {
    4.0 * (p * (1.0 - p) / n as f64).sqrt()
}

#[test]
fn exploration_frequency_matches_epsilon() {
    const N: usize = 100_000;
    for eps in [0.1, 0.26, 0.7] {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let (mut control, mut observe) = (0usize, 0usize);
        for _ in 0..N {
            match explore(eps, &mut rng) {
                Some(Switch::Control) => control += 1,
                Some(Switch::Observe) => observe += 1,
                Some(Switch::Silent) => panic!("exploration chose σ = 0"),
                None => {}
            }
        }
        let half = eps / 2.0;
        for count in [control, observe] {
            assert!((count as f64 / N as f64 - half).abs() < four_sigma(half, N), "eps {eps}: {control} / {observe}");
        }
    }
}

#[test]
fn drop_frequency_matches_delta() {
    const STEPS: usize = 100_000;
    let plant = PlantModel::reference();
    let net = NetworkConfig::new(0.3, 5, STEPS).unwrap();
    let mut policy = Always(Switch::Silent);
    let trace = simulate(&plant, &mut policy, &net, &CostWeights::identity(2, 1), &DVector::zeros(2)).unwrap();
    let delivered = trace.records.iter().filter(|r| r.delivered).count();
    assert!((delivered as f64 / STEPS as f64 - 0.3).abs() < four_sigma(0.3, STEPS));
}

#[test]
fn streams_do_not_shift_each_other() {
    // Consuming exploration draws must not change the drop sequence.
    let plant = PlantModel::reference();
    let net = NetworkConfig::new(0.6, 11, 300).unwrap();
    let weights = CostWeights::identity(2, 1);
    let x0 = DVector::from_vec(vec![1.0, 1.0]);
    let quiet = simulate(&plant, &mut Always(Switch::Silent), &net, &weights, &x0).unwrap();
    let busy = simulate(&plant, &mut EpsilonGreedy::new(0.9, Box::new(UniformRandom)), &net, &weights, &x0).unwrap();
    let drops = |t: &sim::Trace| t.records.iter().map(|r| r.delivered).collect::<Vec<_>>();
    assert_eq!(drops(&quiet), drops(&busy));

    let mut a = RngStreams::new(11, 0);
    let b = RngStreams::new(11, 1);
    let first: Vec<u64> = (0..8).map(|_| a.network.gen()).collect();
    let other: Vec<u64> = (0..8).map(|_| b.clone().network.gen()).collect();
    assert_ne!(first, other);
    let mut fresh = RngStreams::new(11, 0);
    let _: Vec<u64> = (0..1000).map(|_| fresh.exploration.gen()).collect();
    let again: Vec<u64> = (0..8).map(|_| fresh.network.gen()).collect();
    assert_eq!(first, again);
}

#[test]
fn rerunning_with_fresh_streams_is_identical() {
    let plant = PlantModel::reference();
    let net = NetworkConfig::new(0.7, 3, 100).unwrap();
    let weights = CostWeights::identity(2, 1);
    let x0 = DVector::from_vec(vec![4.0, 0.0]);
    let run = || {
        let mut streams = RngStreams::new(3, 9);
        let mut policy = EpsilonGreedy::new(0.4, Box::new(RoundRobin::alternating()));
        simulate_with_streams(&plant, &mut policy, &net, &weights, &x0, &mut streams).unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn replay_keeps_last_k_and_samples_uniformly() {
    const K: usize = 10;
    let mut memory = ReplayMemory::new(K).unwrap();
    for i in 0..25 {
        memory.push(Experience {
            sigma: Switch::Silent,
            state: DVector::from_element(1, i as f64),
            reward: 0.0,
            next_state: DVector::zeros(1),
        });
    }
    let kept: Vec<f64> = memory.iter().map(|e| e.state[0]).collect();
    assert_eq!(kept, (15..25).map(|i| i as f64).collect::<Vec<_>>());

    const DRAWS: usize = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut counts = [0usize; K];
    for _ in 0..DRAWS / 10 {
        for i in memory.sample_indices(10, &mut rng) {
            counts[i] += 1;
        }
    }
    let p = 1.0 / K as f64;
    for c in counts {
        assert!((c as f64 / DRAWS as f64 - p).abs() < four_sigma(p, DRAWS), "{counts:?}");
    }
}

#[test]
fn exploration_bypasses_the_network() {
    let plant = PlantModel::reference();
    let net = NetworkConfig::new(0.8, 1, 200).unwrap();
    let weights = CostWeights::identity(2, 1);
    let x0 = DVector::from_vec(vec![1.0, 1.0]);
    let q = QNetwork::zeros(&[2, 3, 3]).unwrap();

    let greedy = QNetworkGreedy::new(q.clone(), InputMode::State);
    let mut always_explore = EpsilonGreedy::new(1.0, Box::new(greedy.clone()));
    let trace = simulate(&plant, &mut always_explore, &net, &weights, &x0).unwrap();
    assert_eq!(greedy.evaluations(), 0);
    assert!(trace.records.iter().all(|r| r.explored && r.switch != Switch::Silent));

    let greedy = QNetworkGreedy::new(q, InputMode::State);
    let mut never_explore = EpsilonGreedy::new(0.0, Box::new(greedy.clone()));
    simulate(&plant, &mut never_explore, &net, &weights, &x0).unwrap();
    assert_eq!(greedy.evaluations(), 200);

    // Every exploring step skips one evaluation.
    let greedy = QNetworkGreedy::new(QNetwork::zeros(&[2, 3, 3]).unwrap(), InputMode::State);
    let mut mixed = EpsilonGreedy::new(0.3, Box::new(greedy.clone()));
    let trace = simulate(&plant, &mut mixed, &net, &weights, &x0).unwrap();
    let exploited = trace.records.iter().filter(|r| !r.explored).count() as u64;
    assert_eq!(greedy.evaluations(), exploited);
}

fn tiny_config(episodes: usize) -> TrainConfig {
    let mut cfg = TrainConfig::new(CertifiedEpsilon::uncertified(0.3).unwrap());
    cfg.episodes = episodes;
    cfg.hidden = vec![8, 4];
    cfg.batch_size = 4;
    cfg.replay_capacity = 50;
    cfg.target_sync_period = 10;
    cfg
}

#[test]
fn training_is_deterministic() {
    let plant = PlantModel::reference();
    let net = NetworkConfig::new(0.8, 21, 30).unwrap();
    let weights = CostWeights::identity(2, 1);
    let a = rl::train(&plant, &net, &weights, &tiny_config(4)).unwrap();
    let b = rl::train(&plant, &net, &weights, &tiny_config(4)).unwrap();
    assert_eq!(a.episode_rewards, b.episode_rewards);
    assert_eq!(a.losses, b.losses);
    assert_eq!(a.network, b.network);
    assert!(!a.losses.is_empty());
}

#[test]
fn zero_episodes_returns_the_initial_network() {
    let plant = PlantModel::reference();
    let net = NetworkConfig::new(0.8, 21, 30).unwrap();
    let weights = CostWeights::identity(2, 1);
    let out = rl::train(&plant, &net, &weights, &tiny_config(0)).unwrap();
    let mut streams = RngStreams::new(21, 0);
    let initial = QNetwork::random(&[5, 8, 4, 3], &mut streams.initial).unwrap();
    assert_eq!(out.network, initial);
    assert!(out.episode_rewards.is_empty() && out.losses.is_empty() && !out.failed);
}

#[test]
fn silent_policy_never_touches_actuator() {
    // With σ = 0 forever the input stays at its initial zero.
    let plant = PlantModel::reference();
    let net = NetworkConfig::new(1.0, 2, 50).unwrap();
    let mut policy: Box<dyn SchedulingPolicy> = Box::new(Always(Switch::Silent));
    let trace = simulate(&plant, policy.as_mut(), &net, &CostWeights::identity(2, 1), &DVector::from_vec(vec![1.0, 0.0])).unwrap();
    assert!(trace.records.iter().all(|r| r.state.uhat_prev[0] == 0.0));
    assert_eq!(trace.records[9].state.x[0], 1.0);
}

#[test]
fn single_observe_step_example() {
    // x₀ = (1, 0), σ = -1 delivered: x̂₀ = x₀, û stays 0, x₁ = A x₀.
    let plant = PlantModel::reference();
    let state = AugmentedState::initial(DVector::from_vec(vec![1.0, 0.0]), 1);
    let next = step_components(&plant, &state, Switch::Observe, true).unwrap();
    assert_eq!(next.xhat_prev.as_slice(), &[1.0, 0.0]);
    assert_eq!(next.uhat_prev[0], 0.0);
    assert_eq!(next.x.as_slice(), &[1.0, 0.0]);

    // σ = 1 delivered: û = K(Ax̂₋ + Bû₋), which is -0.012 here.
    let next = step_components(&plant, &next, Switch::Control, true).unwrap();
    assert!((next.uhat_prev[0] - -0.012).abs() < 1e-15);
}

#[test]
fn target_stays_fixed_between_syncs() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut net = QNetwork::random(&[2, 6, 3], &mut rng).unwrap();
    let mut target = net.clone();
    let snapshot = target.clone();
    let batch: Vec<Experience> = (0..8)
        .map(|i| Experience {
            sigma: Switch::ALL[i % 3],
            state: DVector::from_fn(2, |_, _| rng.gen_range(-5.0..5.0)),
            reward: -1.0,
            next_state: DVector::from_fn(2, |_, _| rng.gen_range(-5.0..5.0)),
        })
        .collect();
    let refs: Vec<&Experience> = batch.iter().collect();
    let mut opt = rl::Optimizer::new(rl::OptimizerKind::Sgd, 0.01, None);
    for _ in 0..5 {
        rl::td_update(&mut net, &target, &refs, 0.9, &mut opt).unwrap();
    }
    assert_eq!(target, snapshot);
    assert_ne!(net, snapshot);
    rl::sync_target(&net, &mut target).unwrap();
    assert_eq!(target, net);
}

#[test]
fn certificate_covers_every_larger_epsilon() {
    // C1 and C2 average to the ε = 1 distribution, and each corner is affine in
    // ε, so the V found at ε̄ certifies the whole interval [ε̄, 1].
    let modes = build_mode_set(&PlantModel::reference());
    let cert = match muxncs::stability::find_epsilon_bar(0.8, &modes, 1e-3).unwrap() {
        muxncs::stability::EpsilonSearch::Certified { certificate, .. } => certificate,
        other => panic!("expected a certificate, got {other:?}"),
    };
    for k in 0..=10 {
        let epsilon = cert.epsilon + (1.0 - cert.epsilon) * k as f64 / 10.0;
        let moved = muxncs::stability::StabilityCertificate { epsilon, ..cert.clone() };
        let margins = moved.verify(&modes).unwrap();
        assert!(margins.iter().all(|m| *m <= -1.0 + 1e-6), "eps {epsilon}: {margins:?}");
    }
}
