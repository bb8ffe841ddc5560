use dual_unroll::gnn::{ArchDims, Model};
use dual_unroll::oracle::{kkt_residuals, solve, KKT_TOL};
use dual_unroll::problem::{generate_instance, relax, InstanceDistributionConfig};
use dual_unroll::seed::rng_from_seed;
use dual_unroll::selftest;
use dual_unroll::tensor::Tensor;
use dual_unroll::training::{alternate_train, NoObserver, TrainConfig, TrainState};
use proptest::prelude::*;

fn instance_dims() -> impl Strategy<Value = (usize, usize, usize)> {
    (1usize..10, 0usize..8).prop_flat_map(|(n, m)| (Just(n), Just(m), 0..=n.min(4)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn relaxation_structure((n, m, r) in instance_dims(), seed in any::<u64>()) {
        let inst = generate_instance(&InstanceDistributionConfig::with_dims(n, m, r), seed).unwrap();
        let qp = relax(&inst).unwrap();
        prop_assert_eq!(qp.a.shape(), (m + 2 * r, n));
        for (k, &i) in inst.int_idx.iter().enumerate() {
            for j in 0..n {
                let e = if i == j { 1.0 } else { 0.0 };
                prop_assert_eq!(qp.a.get(m + k, j), e);
                prop_assert_eq!(qp.a.get(m + r + k, j), -e);
            }
            prop_assert_eq!(qp.b.data()[m + k], 1.0);
            prop_assert_eq!(qp.b.data()[m + r + k], 1.0);
        }
        let s = &qp.s;
        prop_assert_eq!(s.sub(&s.transpose()).unwrap().max_abs(), 0.0);
        prop_assert_eq!(relax(&inst).unwrap(), qp);
    }

    #[test]
    fn generated_point_is_strictly_feasible((n, m, r) in instance_dims(), seed in any::<u64>()) {
        let inst = generate_instance(&InstanceDistributionConfig::with_dims(n, m, r), seed).unwrap();
        let qp = relax(&inst).unwrap();
        let x = inst.strictly_feasible_point().unwrap();
        let f = qp.constraint_values(&x).unwrap();
        prop_assert!(f.iter().all(|&v| v < 0.0));
    }

    #[test]
    fn lagrangian_gradient_is_affine_in_lambda(seed in any::<u64>(), t in -2.0f64..2.0) {
        let qp = relax(&generate_instance(&InstanceDistributionConfig::with_dims(5, 3, 1), seed).unwrap()).unwrap();
        let x = vec![0.3, -0.2, 0.9, 0.0, -1.0];
        let l1 = vec![0.1, 0.2, 0.0, 1.0, 0.5];
        let l2 = vec![1.0, 0.0, 0.3, 0.2, 0.1];
        let mix: Vec<f64> = l1.iter().zip(&l2).map(|(a, b)| a + t * b).collect();
        let g1 = qp.grad_x_lagrangian(&x, &l1).unwrap();
        let g2 = qp.grad_x_lagrangian(&x, &l2).unwrap();
        let g0 = qp.grad_x_lagrangian(&x, &[0.0; 5]).unwrap();
        let gm = qp.grad_x_lagrangian(&x, &mix).unwrap();
        for i in 0..5 {
            let expect = g1[i] + t * (g2[i] - g0[i]);
            prop_assert!((gm[i] - expect).abs() <= 1e-12 * (1.0 + expect.abs()));
        }
    }

    #[test]
    fn dual_outputs_are_nonnegative(
        seed in any::<u64>(),
        scale in 0.01f64..50.0,
        k in 1usize..3,
        l in 1usize..3,
        hops in 0usize..3,
    ) {
        let qp = relax(&generate_instance(&InstanceDistributionConfig::with_dims(4, 3, 2), seed).unwrap()).unwrap();
        let dims = ArchDims { k_layers: k, l_layers: l, t_sub: 2, k_hops: hops, hidden: 3, per_node_bias: false };
        let mut rng = rng_from_seed(seed);
        let mut model = Model::init(&mut rng, &dims, (4, 7));
        for t in model.primal.tensors_mut().chain(model.dual.tensors_mut()) {
            let (r, c) = t.shape();
            *t = Tensor::from_fn(r, c, |i, j| scale * (((i * 7 + j * 13) as f64 + seed as f64 * 1e-3).sin()));
        }
        let traj = model.forward(&qp, &[0.5, -0.5, 0.1, 0.9], &[0.05; 7]).unwrap();
        for lam in &traj.duals {
            prop_assert!(lam.iter().all(|&v| v >= 0.0));
        }
        prop_assert_eq!(traj.duals.len(), l + 1);
        prop_assert_eq!(traj.primal_outer.len(), l + 1);
        for (outer, inner) in traj.primal_outer.iter().zip(&traj.primal_inner) {
            prop_assert_eq!(outer, inner.last().unwrap());
            prop_assert_eq!(inner.len(), k + 1);
        }
    }

    #[test]
    fn oracle_solution_satisfies_kkt(seed in any::<u64>(), n in 2usize..9, m in 1usize..6) {
        let r = n.min(2);
        let qp = relax(&generate_instance(&InstanceDistributionConfig::with_dims(n, m, r), seed).unwrap()).unwrap();
        let sol = solve(&qp).unwrap();
        prop_assert!(sol.converged);
        prop_assert!(sol.lambda_star.iter().all(|&v| v >= 0.0));
        let kkt = kkt_residuals(&sol.x_star, &sol.lambda_star, &qp).unwrap();
        prop_assert!(kkt.within(KKT_TOL));
        prop_assert_eq!(kkt, sol.kkt);
    }

    #[test]
    fn meta_duals_stay_nonnegative(seed in 0u64..1000, eta in 0.0f64..20.0, alpha in 0.05f64..1.0) {
        let data: Vec<_> = (0..3)
            .map(|s| relax(&generate_instance(&InstanceDistributionConfig::with_dims(3, 2, 1), seed + s).unwrap()).unwrap())
            .collect();
        let dims = ArchDims { k_layers: 2, l_layers: 2, t_sub: 1, k_hops: 1, hidden: 2, per_node_bias: false };
        let mut state = TrainState::new(&dims, (3, 4), seed);
        let cfg = TrainConfig {
            rounds: 1, dual_epochs: 1, primal_epochs: 1, batch_instances: 1, batch_multipliers: 1,
            eta_p: eta, eta_d: eta, alpha, eps_p: 1e-2, eps_d: 1e-2,
            ..TrainConfig::default()
        };
        alternate_train(&data, &cfg, &mut state, 1, &mut NoObserver).unwrap();
        prop_assert!(state.meta.mu.iter().chain(&state.meta.nu).all(|&v| v >= 0.0));
    }
}

#[test]
fn closed_form_gradient_matches_finite_differences_on_50_draws() {
    let e = selftest::lagrangian_gradient_error(50, 7).unwrap();
    assert!(e <= 1e-6, "{e}");
}

#[test]
fn permutation_equivariance_of_the_filter() {
    let e = selftest::sublayer_equivariance_error(20, 3).unwrap();
    assert!(e <= 1e-10, "{e}");
}

#[test]
fn full_gradient_flows_into_both_networks() {
    for (name, e) in selftest::coupled_gradient_errors(11).unwrap() {
        assert!(e <= 1e-4, "{name}: {e}");
    }
}
