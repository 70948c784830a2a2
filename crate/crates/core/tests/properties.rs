use mftg_core::grad::{full_horizon_gradient, Player, StackedGain};
use mftg_core::instance::{random_instance, InstanceParams};
use mftg_core::linalg::{checked_inverse, Mat};
use mftg_core::riccati::viability_at;
use mftg_core::rng;
use mftg_core::*;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

fn instance(seed: u64, horizon: usize, m: usize, p: usize) -> LqMftgModel {
    let mut params = InstanceParams::new(horizon, m, p);
    params.time_varying = true;
    params.gamma_margin = 0.7;
    random_instance(&params, seed).expect("calibrated instance")
}

fn dims() -> impl Strategy<Value = (u64, usize, usize, usize)> {
    (0u64..1_000_000, 1usize..=5, 1usize..=3, 1usize..=3)
}

fn random_gains(model: &LqMftgModel, seed: u64, scale: f64) -> PolicyProfile {
    let mut r = rng::stream(seed, &[77]);
    let (m, p) = (model.state_dim, model.control_dim);
    let mut draw = |rows, cols| DMatrix::from_fn(rows, cols, |_, _| scale * r.sample::<f64, _>(StandardNormal));
    let steps = (0..model.horizon)
        .map(|_| StepGains {
            k1: draw(p, m),
            k2: draw(m, m),
            l1: draw(p, m),
            l2: draw(m, m),
        })
        .collect();
    PolicyProfile::from_steps(steps)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn riccati_terminal_symmetry_and_closed_loop((seed, t, m, p) in dims()) {
        let model = instance(seed, t, m, p);
        let sol = solve_riccati(&model);
        prop_assert!(sol.cond1_holds);
        prop_assert_eq!(&sol.m_seq[t], &model.q[t]);
        prop_assert_eq!(&sol.m_bar_seq[t], &model.q_bar[t]);
        prop_assert_eq!(sol.n_seq[t], 0.0);
        prop_assert_eq!(sol.n_bar_seq[t], 0.0);
        for mat in sol.m_seq.iter().chain(&sol.m_bar_seq) {
            prop_assert!((mat - mat.transpose()).amax() <= 1e-12);
        }
        let (dev, mean) = closed_loop_matrices(&model, &sol.nash_gains).unwrap();
        for s in 0..t {
            let target = checked_inverse(&sol.lambda_seq[s]).unwrap() * &model.a[s];
            prop_assert!((&dev[s] - target).amax() <= 1e-10);
            let target = checked_inverse(&sol.lambda_bar_seq[s]).unwrap() * model.a_tilde(s);
            prop_assert!((&mean[s] - target).amax() <= 1e-10);
        }
    }

    #[test]
    fn closed_form_decomposes_and_matches_nash_value((seed, t, m, p) in dims()) {
        let model = instance(seed, t, m, p);
        let sol = solve_riccati(&model);
        let c = closed_form_cost(&model, &sol.nash_gains, &model.sigma0, &model.sigma0_bar, 0).unwrap();
        prop_assert!((c.total - (c.y_part + c.z_part)).abs() <= 1e-10);
        prop_assert!((c.total - sol.nash_value).abs() <= 1e-9 * sol.nash_value.abs().max(1.0));
    }

    #[test]
    fn viability_is_monotone_in_gamma((seed, t, m, p) in dims()) {
        let model = instance(seed, t, m, p);
        let mut seen_viable = false;
        for i in 0..30 {
            let g = 0.1 + i as f64 * model.gamma / 10.0;
            let v = viability_at(&model, g, ViabilityMode::MeanField).unwrap().viable;
            prop_assert!(!(seen_viable && !v), "viable below {g} but not at it");
            seen_viable |= v;
        }
    }

    #[test]
    fn exact_gradient_matches_finite_differences((seed, t, m, p) in dims(), at in 0usize..5) {
        let model = instance(seed, t, m, p);
        let at = at % t;
        let frozen = random_gains(&model, seed, 0.3);
        let gains = random_gains(&model, seed + 1, 0.3).step(at);
        let eye = Mat::identity(m, m);
        let problem = RecedingProblem::new(&model, &frozen, at, &eye, &eye, &NoiseModel::infinite(&model)).unwrap();
        let grad = problem.gradient(&gains);
        for player in [Player::Minimizer, Player::Maximizer] {
            let base = StackedGain::of(player, &gains);
            let analytic = &grad.of(player).matrix;
            let mut fd = analytic.clone();
            for i in 0..base.dim() {
                let h = 1e-5;
                let (mut plus, mut minus) = (base.clone(), base.clone());
                plus.matrix[i] += h;
                minus.matrix[i] -= h;
                fd[i] = (problem.cost(&plus.inserted(&gains)) - problem.cost(&minus.inserted(&gains))) / (2.0 * h);
            }
            let scale = analytic.norm().max(1.0);
            prop_assert!((&fd - analytic).norm() / scale <= 1e-5, "{} vs {}", fd, analytic);
        }
    }

    #[test]
    fn full_horizon_gradient_matches_finite_differences((seed, t, m, p) in dims()) {
        let model = instance(seed, t, m, p);
        let policy = random_gains(&model, seed, 0.2);
        let eye = Mat::identity(m, m);
        let noise = NoiseModel::infinite(&model);
        let grads = full_horizon_gradient(&model, &policy, &eye, &eye, &noise).unwrap();
        let cost = |pol: &PolicyProfile| closed_form_cost(&model, pol, &eye, &eye, 0).unwrap().total;
        for s in 0..t {
            let base = StackedGain::of(Player::Maximizer, &policy.step(s));
            let i = (seed as usize) % base.dim();
            let h = 1e-5;
            let shifted = |d: f64| {
                let mut g = base.clone();
                g.matrix[i] += d;
                let mut pol = policy.clone();
                pol.set_step(s, g.inserted(&policy.step(s)));
                cost(&pol)
            };
            let fd = (shifted(h) - shifted(-h)) / (2.0 * h);
            let analytic = grads[s].player2.matrix[i];
            prop_assert!((fd - analytic).abs() <= 1e-5 * analytic.abs().max(1.0), "{fd} vs {analytic}");
        }
    }

    #[test]
    fn ascent_direction_increases_cost((seed, t, m, p) in dims()) {
        let model = instance(seed, t, m, p);
        let sol = solve_riccati(&model);
        let eye = Mat::identity(m, m);
        let at = t - 1;
        let problem = RecedingProblem::new(&model, &sol.nash_gains, at, &eye, &eye, &NoiseModel::infinite(&model)).unwrap();
        let gains = random_gains(&model, seed, 0.5).step(at);
        let g2 = problem.gradient(&gains).player2;
        prop_assume!(g2.norm() > 1e-6);
        let mut moved = StackedGain::of(Player::Maximizer, &gains);
        moved.matrix += &g2.matrix * (1e-4 / g2.norm());
        prop_assert!(problem.cost(&moved.inserted(&gains)) > problem.cost(&gains));
    }

    #[test]
    fn projection_contracts_and_is_idempotent(entries in proptest::collection::vec(-10.0f64..10.0, 8), d in 0.01f64..50.0) {
        let g = StackedGain { player: Player::Minimizer, matrix: Mat::from_vec(4, 2, entries) };
        let p = project_ball(&g, d);
        prop_assert!(p.norm() <= g.norm());
        prop_assert!(p.norm_sq() <= d);
        if g.norm_sq() <= d {
            prop_assert_eq!(&p, &g);
        }
        prop_assert_eq!(project_ball(&p, d), p);
    }

    #[test]
    fn deviations_sum_to_zero(seed in 0u64..1000, n in 2usize..20) {
        let model = instance(seed, 2, 2, 1);
        let sol = solve_riccati(&model);
        let mut r = rng::stream(seed, &[]);
        let states: Vec<DVector<f64>> = (0..n).map(|_| DVector::from_fn(2, |_, _| r.sample::<f64, _>(StandardNormal))).collect();
        let mut state = PopulationState::new(states, 0).unwrap();
        for t in 0..2 {
            state = step_population(&model, &sol.nash_gains.step(t), &state, &mut r).unwrap();
            let sum = state.deviations().iter().fold(DVector::zeros(2), |acc, y| acc + y);
            prop_assert!(sum.amax() <= 1e-10);
            let mean = state.states.iter().fold(DVector::zeros(2), |acc, x| acc + x) / n as f64;
            prop_assert!((mean - &state.empirical_mean).amax() <= 1e-12);
        }
    }
}

#[test]
fn effective_noise_covariances_match_finite_population_model() {
    // One step from the origin with zero gains: the deviation of agent 0 has
    // covariance ((M-1)/M) Σ and the empirical mean Σ̄ + Σ/M.
    let s = |v: f64| Mat::from_element(1, 1, v);
    let model = LqMftgModel {
        horizon: 1,
        state_dim: 1,
        control_dim: 1,
        a: vec![s(0.5)],
        a_bar: vec![s(0.1)],
        b: vec![s(1.0)],
        b_bar: vec![s(0.0)],
        q: vec![s(1.0); 2],
        q_bar: vec![s(1.0); 2],
        sigma: s(2.0),
        sigma_bar: s(0.5),
        sigma0: s(0.0),
        sigma0_bar: s(0.0),
        gamma: 5.0,
    };
    let n = 5;
    let samples = 100_000;
    let (mut dev, mut dev_sq, mut mean, mut mean_sq) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..samples {
        let mut r = rng::stream(42, &[i]);
        let state = PopulationState::new(vec![DVector::zeros(1); n], 0).unwrap();
        let next = step_population(&model, &StepGains::zeros(1, 1), &state, &mut r).unwrap();
        let y = next.deviations()[0][0];
        let z = next.empirical_mean[0];
        dev += y;
        dev_sq += y * y;
        mean += z;
        mean_sq += z * z;
    }
    let k = samples as f64;
    let check = |sum: f64, sum_sq: f64, expected: f64| {
        let var = sum_sq / k - (sum / k).powi(2);
        // Var of the sample variance of a Gaussian is 2σ⁴/k.
        let se = (2.0 * expected * expected / k).sqrt();
        assert!((var - expected).abs() <= 3.0 * se, "{var} vs {expected} ± {se}");
    };
    check(dev, dev_sq, 2.0 * (n as f64 - 1.0) / n as f64);
    check(mean, mean_sq, 0.5 + 2.0 / n as f64);
}

#[test]
fn simulation_is_bit_reproducible_and_thread_independent() {
    let model = instance(3, 3, 2, 2);
    let sol = solve_riccati(&model);
    let sim = SimConfig::new(50, 200, 9);
    let a = rollout_cost(&model, &sol.nash_gains, &sim).unwrap();
    let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let b = single.install(|| rollout_cost(&model, &sol.nash_gains, &sim).unwrap());
    let quad = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
    let c = quad.install(|| rollout_cost(&model, &sol.nash_gains, &sim).unwrap());
    assert_eq!(a, b);
    assert_eq!(a, c);
}

#[test]
fn deterministic_instance_costs_exactly() {
    // Zero noise and zero initial spread: every rollout equals the deterministic cost (0).
    let mut model = instance(5, 3, 2, 2);
    for c in [&mut model.sigma, &mut model.sigma_bar, &mut model.sigma0, &mut model.sigma0_bar] {
        c.fill(0.0);
    }
    let sol = solve_riccati(&model);
    let r = rollout_cost(&model, &sol.nash_gains, &SimConfig::new(10, 100_000, 1)).unwrap();
    assert_eq!(r.total, 0.0);
    assert_eq!(sol.nash_value, 0.0);
}

#[test]
fn receding_cost_with_nash_continuation_matches_closed_form() {
    let model = instance(11, 3, 2, 2);
    let sol = solve_riccati(&model);
    let eye = Mat::identity(2, 2);
    let t = 1;
    let n = 200;
    let mut sim = SimConfig::new(n, 4000, 2);
    sim.antithetic = true;
    let mc = receding_horizon_cost(&model, &sol.nash_gains.step(t), &sol.nash_gains, t, &eye, &eye, &sim).unwrap();
    let exact = mftg_core::riccati::closed_form_cost_with(&model, &sol.nash_gains, &eye, &eye, t, &NoiseModel::finite(&model, n)).unwrap();
    assert!((mc.total - exact.total).abs() <= 4.0 * mc.std_error, "{} vs {} ± {}", mc.total, exact.total, mc.std_error);
}

#[test]
fn zero_order_constant_cost_has_zero_mean() {
    let base = StackedGain::stack(Player::Minimizer, &Mat::zeros(1, 1), &Mat::zeros(1, 1));
    let sm = SmoothingParams::new(0.5, 1_000_000);
    let est = zero_order_gradient(|_, _| 3.0, &base, &sm, 5).unwrap();
    // Each sample is (n/r) c u with ‖u‖ = 1, so a coordinate has std (n/r) c / √n.
    let se = (2.0 / 0.5) * 3.0 / 2f64.sqrt() / 1000.0;
    for v in est.matrix.iter() {
        assert!(v.abs() <= 3.0 * se, "{v} vs ±{se}");
    }
}

#[test]
fn zero_order_quadratic_with_paired_directions() {
    // J(k) = k² at k = 1 with r = 1e-3, N_b = 1e6. Needs paired directions:
    // i.i.d. directions leave a J(k)·√n/(r√N_b) = 1 noise term (see README).
    let base = StackedGain {
        player: Player::Minimizer,
        matrix: Mat::from_element(1, 1, 1.0),
    };
    let mut sm = SmoothingParams::new(1e-3, 1_000_000);
    sm.antithetic = true;
    let est = zero_order_gradient(|g, _| g.matrix[0] * g.matrix[0], &base, &sm, 3).unwrap();
    assert!((est.matrix[0] - 2.0).abs() <= 0.1, "{}", est.matrix[0]);
}

#[test]
fn zero_order_agrees_with_exact_gradient_on_noise_free_instance() {
    let mut model = instance(8, 2, 2, 2);
    model.sigma.fill(0.0);
    model.sigma_bar.fill(0.0);
    let sol = solve_riccati(&model);
    let eye = Mat::identity(2, 2);
    let problem = RecedingProblem::new(&model, &sol.nash_gains, 0, &eye, &eye, &NoiseModel::infinite(&model)).unwrap();
    let gains = StepGains::zeros(2, 2);
    let mut sm = SmoothingParams::new(1e-2, 100_000);
    sm.antithetic = true;
    for player in [Player::Minimizer, Player::Maximizer] {
        let exact = problem.gradient(&gains).of(player).clone();
        let est = zero_order_gradient(|g, _| problem.cost(&g.inserted(&gains)), &StackedGain::of(player, &gains), &sm, 1).unwrap();
        let rel = (&est.matrix - &exact.matrix).norm() / exact.norm();
        assert!(rel <= 0.10, "{player:?}: {rel}");
    }
}

#[test]
fn learner_invariants() {
    let model = instance(21, 3, 2, 2);
    let sol = solve_riccati(&model);
    let mut cfg = RgdaConfig::exact(&model, 100, 0.02);
    cfg.proj_radius_sq = Some(0.5);
    let (policy, trace) = rgda(&model, &cfg, Some(&sol)).unwrap();
    assert_eq!(trace.rows.len(), 3 * 100);
    // Projection containment.
    for row in &trace.rows {
        for g in &row.gains {
            for player in [Player::Minimizer, Player::Maximizer] {
                assert!(StackedGain::of(player, g).norm_sq() <= 0.5 + 1e-12);
            }
        }
    }
    // Backward-in-time isolation: the last step does not depend on earlier ones.
    let mut frozen = PolicyProfile::zeros(&model);
    let (g2, _) = inner_gda(&model, 2, &frozen, &cfg, Some(&sol)).unwrap();
    assert_eq!(g2, policy.step(2));
    frozen.set_step(2, g2);
    let (g1, _) = inner_gda(&model, 1, &frozen, &cfg, Some(&sol)).unwrap();
    assert_eq!(g1, policy.step(1));
}

#[test]
fn single_step_rgda_is_one_inner_call() {
    let model = instance(4, 1, 2, 1);
    let sol = solve_riccati(&model);
    let cfg = RgdaConfig::exact(&model, 300, 0.01);
    let (policy, trace) = rgda(&model, &cfg, Some(&sol)).unwrap();
    let (gains, rows) = inner_gda(&model, 0, &PolicyProfile::zeros(&model), &cfg, Some(&sol)).unwrap();
    assert_eq!(policy.step(0), gains);
    assert_eq!(trace.rows, rows);
}

#[test]
fn zero_order_learning_is_seed_deterministic() {
    let model = instance(2, 2, 1, 1);
    let sol = solve_riccati(&model);
    let mut cfg = RgdaConfig::zero_order(&model, 5, 0.01, SmoothingParams::new(0.5, 64), SimConfig::new(10, 1, 0));
    cfg.seed = 99;
    let a = rgda(&model, &cfg, Some(&sol)).unwrap();
    let b = rgda(&model, &cfg, Some(&sol)).unwrap();
    assert_eq!(a, b);
    cfg.seed = 100;
    assert_ne!(rgda(&model, &cfg, Some(&sol)).unwrap().0, a.0);
}

#[test]
fn non_finite_costs_abort_with_location() {
    let mut model = instance(2, 2, 1, 1);
    model.gamma = 1e-3;
    // Huge γ⁻² terms drive the maximizer's gradient to overflow quickly.
    let mut cfg = RgdaConfig::exact(&model, 2000, 1e3);
    cfg.proj_radius_sq = Some(f64::MAX);
    match rgda(&model, &cfg, None) {
        Err(e @ Error::NonFinite { .. }) => assert!(e.to_string().contains("t=")),
        other => panic!("expected a non-finite failure, got {other:?}"),
    }
}
