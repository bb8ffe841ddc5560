use dual_unroll::gnn::{ArchDims, Model, draw_primal_start};
use dual_unroll::problem::{generate_instance, relax, InstanceDistributionConfig, RelaxedQP};
use dual_unroll::seed::rng_from_seed;
use dual_unroll::selftest::randomized_model;
use dual_unroll::tensor::Tensor;
use dual_unroll::training::*;
use rand::Rng as _;

fn dims() -> ArchDims {
    ArchDims {
        k_layers: 2,
        l_layers: 2,
        t_sub: 1,
        k_hops: 1,
        hidden: 3,
        per_node_bias: false,
    }
}

fn data(count: u64) -> Vec<RelaxedQP> {
    (0..count)
        .map(|s| relax(&generate_instance(&InstanceDistributionConfig::with_dims(4, 2, 1), 100 + s).unwrap()).unwrap())
        .collect()
}

fn state_with(model: Model, seed: u64) -> TrainState {
    let mut s = TrainState::new(&model.dims, (4, 4), seed);
    s.model = model;
    s
}

/// Objective of one primal sample, evaluated without the tape.
fn lagrangian_at_output(model: &Model, qp: &RelaxedQP, x0: &[f64], lambda: &[f64]) -> f64 {
    let traj = model.primal_trajectory(qp, x0, lambda).unwrap();
    qp.lagrangian(traj.last().unwrap(), lambda).unwrap()
}

#[test]
fn single_sample_sgd_step_matches_finite_difference_update() {
    let d = data(1);
    let model = randomized_model(&mut rng_from_seed(3), &dims(), (4, 4));
    let mut state = state_with(model.clone(), 5);
    let lambda = vec![0.3, 0.0, 0.7, 0.1];
    let pool = MultiplierPool {
        per_instance: vec![vec![lambda.clone()]],
    };
    let cfg = TrainConfig {
        eps_p: 0.01,
        batch_multipliers: 1,
        batch_instances: 1,
        ..TrainConfig::default()
    };

    // replay the draws the step makes
    let mut rng = state.rng.clone();
    let _ = rng.random_range(0..1usize);
    let x0 = draw_primal_start(&mut rng, 4);

    primal_training_step(&d, &[0], &pool, &mut state, &cfg, 1).unwrap();

    let h = 1e-5;
    let mut probe = model.clone();
    let before: Vec<Tensor> = model.primal.tensors().cloned().collect();
    let after: Vec<Tensor> = state.model.primal.tensors().cloned().collect();
    for (ti, t) in before.iter().enumerate() {
        for e in 0..t.len() {
            let mut at = |delta: f64| {
                let p = probe.primal.tensors_mut().nth(ti).unwrap();
                p.data_mut()[e] = t.data()[e] + delta;
                let v = lagrangian_at_output(&probe, &d[0], &x0, &lambda);
                probe.primal.tensors_mut().nth(ti).unwrap().data_mut()[e] = t.data()[e];
                v
            };
            let g = (at(-2.0 * h) - 8.0 * at(-h) + 8.0 * at(h) - at(2.0 * h)) / (12.0 * h);
            let expect = t.data()[e] - cfg.eps_p * g;
            let got = after[ti].data()[e];
            assert!(
                (got - expect).abs() <= 1e-8 * (1.0 + expect.abs()),
                "tensor {ti} entry {e}: {got} vs {expect}"
            );
        }
    }
    assert_eq!(state.model.dual, model.dual);
}

#[test]
fn zero_step_size_changes_only_meta_duals() {
    let d = data(3);
    let model = randomized_model(&mut rng_from_seed(4), &dims(), (4, 4));
    let mut state = state_with(model.clone(), 6);
    let cfg = TrainConfig {
        eps_p: 0.0,
        eps_d: 0.0,
        eta_p: 1.0,
        eta_d: 1.0,
        rounds: 1,
        dual_epochs: 2,
        primal_epochs: 2,
        batch_instances: 2,
        batch_multipliers: 2,
        ..TrainConfig::default()
    };
    alternate_train(&d, &cfg, &mut state, 1, &mut NoObserver).unwrap();
    assert_eq!(state.model, model);
    assert!(state.meta.mu.iter().chain(&state.meta.nu).all(|&v| v >= 0.0));
}

#[test]
fn unconstrained_updates_ignore_meta_duals() {
    let d = data(2);
    let model = randomized_model(&mut rng_from_seed(8), &dims(), (4, 4));
    let pool = MultiplierPool {
        per_instance: vec![vec![vec![0.2; 4]], vec![vec![0.5; 4]]],
    };
    let base = TrainConfig {
        constraints: false,
        batch_instances: 2,
        batch_multipliers: 1,
        ..TrainConfig::default()
    };
    let mut a = state_with(model.clone(), 1);
    let mut b = state_with(model, 1);
    b.meta.mu = vec![5.0, 5.0];
    primal_training_step(&d, &[0, 1], &pool, &mut a, &base, 1).unwrap();
    primal_training_step(&d, &[0, 1], &pool, &mut b, &base, 1).unwrap();
    assert_eq!(a.model, b.model);
    assert_eq!(a.meta.mu, vec![0.0, 0.0]);
    assert_eq!(b.meta.mu, vec![5.0, 5.0]);
}

#[test]
fn training_is_deterministic() {
    let d = data(5);
    let cfg = TrainConfig {
        rounds: 2,
        dual_epochs: 1,
        primal_epochs: 1,
        batch_instances: 2,
        batch_multipliers: 2,
        eps_p: 1e-2,
        eps_d: 1e-2,
        eta_p: 0.1,
        eta_d: 0.1,
        ..TrainConfig::default()
    };
    let run = || {
        let mut s = TrainState::new(&dims(), (4, 4), 21);
        let log = alternate_train(&d, &cfg, &mut s, 1, &mut NoObserver).unwrap();
        (s, log)
    };
    let (s1, l1) = run();
    let (s2, l2) = run();
    assert_eq!(s1, s2);
    assert_eq!(l1, l2);
    assert_eq!(s1.round, 2);
}

#[test]
fn resuming_from_a_round_boundary_matches_an_uninterrupted_run() {
    struct Grab(Vec<TrainState>);
    impl TrainObserver for Grab {
        fn on_round_end(&mut self, s: &TrainState) -> dual_unroll::Result<()> {
            self.0.push(s.clone());
            Ok(())
        }
    }
    let d = data(4);
    let cfg = TrainConfig {
        rounds: 2,
        dual_epochs: 1,
        primal_epochs: 1,
        batch_instances: 2,
        batch_multipliers: 1,
        optimizer: OptimizerKind::Adam,
        ..TrainConfig::default()
    };
    let mut full = TrainState::new(&dims(), (4, 4), 2);
    let mut grab = Grab(Vec::new());
    alternate_train(&d, &cfg, &mut full, 1, &mut grab).unwrap();

    let mut resumed = grab.0[0].clone();
    alternate_train(&d, &cfg, &mut resumed, 1, &mut NoObserver).unwrap();
    assert_eq!(resumed, full);
}

#[test]
fn divergence_is_reported_with_phase() {
    let d = data(2);
    let mut state = TrainState::new(&dims(), (4, 4), 2);
    state.model.dual.layers[0].c = Tensor::filled(1, 1, f64::NAN);
    let cfg = TrainConfig {
        rounds: 1,
        dual_epochs: 1,
        primal_epochs: 1,
        batch_instances: 2,
        ..TrainConfig::default()
    };
    match alternate_train(&d, &cfg, &mut state, 1, &mut NoObserver) {
        Err(dual_unroll::Error::Divergence { phase, .. }) => assert_eq!(phase, "dual"),
        other => panic!("{other:?}"),
    }
}
