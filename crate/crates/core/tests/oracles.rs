mod common;

use std::f64::consts::PI;

use approx::assert_relative_eq;
use nodecg::baseline::{backprop_discrete, forward_discrete, DiscreteNet};
use nodecg::cost::{cost, forward_solve, LabeledSet};
use nodecg::gradient::{adjoint_directional_derivative, evaluate_batch, sobolev_representative};
use nodecg::linesearch::{etilde_prime, optimal_beta, solve_sensitivity, BetaOutcome, Surrogate, BETA_MAX};
use nodecg::mesh::{axpy, CostWeights, GradientField, ParamTrajectory};
use nodecg::model::node_output;
use nodecg::ode::{SolverMode, SolverOptions};
use proptest::prelude::*;
use rand::Rng;

use common::*;

#[test]
fn adjoint_directional_derivative_matches_central_differences() {
    let opts = SolverOptions::adaptive(1e-8, 1e-6);
    let mut r = rng(11);
    let weights = [
        CostWeights::moons(),
        CostWeights::circles(),
        CostWeights::moons().with_l2_penalty(1e-2),
        CostWeights { mu_run: 0.1, ..CostWeights::moons().with_w12_penalty(1e-2) },
    ];
    for case in 0..8 {
        let w = weights[case % weights.len()];
        let n = if case % 3 == 2 { 3 } else { 2 };
        let p = smooth_params(&mut r, mesh(250), n, 0.5);
        let batch = random_batch(&mut r, n, 6);
        let eta = smooth_field(&mut r, p.mesh().clone(), n, 1.0);
        let eval = evaluate_batch(&p, &batch, &w, &opts).unwrap();
        let d = adjoint_directional_derivative(&p, &w, &eval.forward, &eval.costates, &eta).unwrap();
        let h = 1e-4;
        let fd = (cost(&axpy(h, &eta, &p).unwrap(), &batch, &w, &opts).unwrap()
            - cost(&axpy(-h, &eta, &p).unwrap(), &batch, &w, &opts).unwrap())
            / (2.0 * h);
        assert!(rel_err(d, fd) <= 1e-3, "case {case}: adjoint {d} vs fd {fd}");
    }
}

#[test]
fn sobolev_matches_finite_difference_bvp() {
    let m = mesh(999);
    let mut r = rng(5);
    for _ in 0..3 {
        let f = smooth_fn(&mut r, 3, 1.0, 5.0);
        let u: Vec<f64> = m.nodes().iter().map(|t| f(*t)).collect();
        let v = sobolev_representative(&u, &m).unwrap();
        let oracle = neumann_fd_solve(&u, 5.0);
        let sup = v.iter().zip(&oracle).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(sup <= 1e-4, "sup error {sup}");
    }
}

#[test]
fn sobolev_cosine_mode_is_scaled() {
    let m = mesh(1000);
    let u: Vec<f64> = m.nodes().iter().map(|t| (PI * t / 5.0).cos()).collect();
    let v = sobolev_representative(&u, &m).unwrap();
    let scale = 1.0 / (1.0 + (PI / 5.0).powi(2));
    for (a, b) in v.iter().zip(&u) {
        assert!((a - scale * b).abs() <= 1e-6);
    }
}

#[test]
fn riesz_duality() {
    let m = mesh(250);
    let one = GradientField::constant(m.clone(), 1, &[1.0, 1.0]).unwrap();
    let ramp = GradientField::from_fn(m.clone(), 1, |t, out| out.fill(t));
    let s_one = nodecg::gradient::sobolev_transform(&one).unwrap();
    assert_relative_eq!(s_one.w12_inner(&ramp).unwrap(), one.l2_inner(&ramp).unwrap(), max_relative = 1e-6);

    // trapezoid error in the L2 part is ~2e-4 relative at 250 intervals
    let m = mesh(1000);
    let mut r = rng(9);
    for _ in 0..5 {
        let u = smooth_field(&mut r, m.clone(), 1, 1.0);
        let phi = smooth_field(&mut r, m.clone(), 1, 1.0);
        let su = nodecg::gradient::sobolev_transform(&u).unwrap();
        let lhs = u.l2_inner(&phi).unwrap();
        let rhs = su.w12_inner(&phi).unwrap();
        let scale = (u.l2_norm_sq() * phi.l2_norm_sq()).sqrt();
        assert!((rhs - lhs).abs() <= 1e-4 * scale, "{rhs} vs {lhs}");
    }
}

#[test]
fn constant_direction_sensitivity_grows_linearly() {
    let m = mesh(250);
    let p = ParamTrajectory::zeros(m.clone(), 2);
    let dir = GradientField::constant(m, 2, &[0.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
    let batch = LabeledSet::new(2, vec![vec![0.3, -0.4]], vec![0]).unwrap();
    for opts in [SolverOptions::fixed(), SolverOptions::default()] {
        let fwd = forward_solve(&p, &batch, &opts).unwrap();
        let xi = solve_sensitivity(&p, &dir, &fwd, &opts).unwrap();
        assert_relative_eq!(xi[0].terminal()[0], 5.0, epsilon = 1e-9);
        assert!(xi[0].terminal()[1].abs() < 1e-12);
    }
}

/// Remainder ratio `|r(eps)| / |r(eps/2)|` of the first-order expansion.
fn richardson_ratio(seed: u64) -> f64 {
    let opts = SolverOptions::fixed();
    let mut r = rng(seed);
    let p = smooth_params(&mut r, mesh(250), 2, 0.5);
    let eta = smooth_field(&mut r, p.mesh().clone(), 2, 1.0);
    let batch = random_batch(&mut r, 2, 1);
    let fwd = forward_solve(&p, &batch, &opts).unwrap();
    let xi = solve_sensitivity(&p, &eta, &fwd, &opts).unwrap();
    let rem = |eps: f64| {
        let x = node_output(&axpy(eps, &eta, &p).unwrap(), batch.input(0), &opts).unwrap();
        x.iter()
            .zip(fwd[0].terminal())
            .zip(xi[0].terminal())
            .map(|((a, b), s)| (a - b - eps * s).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    rem(1e-3) / rem(5e-4)
}

#[test]
fn sensitivity_remainder_is_second_order() {
    for seed in 0..3 {
        let ratio = richardson_ratio(seed);
        assert!(ratio >= 3.5, "seed {seed}: ratio {ratio}");
    }
}

fn hand_case() -> (ParamTrajectory, LabeledSet, GradientField, CostWeights) {
    let m = mesh(250);
    let p = ParamTrajectory::zeros(m.clone(), 2);
    let dir = GradientField::constant(m, 2, &[0.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
    let batch = LabeledSet::new(2, vec![vec![0.0, 0.0]], vec![0]).unwrap();
    (p, batch, dir, CostWeights::moons())
}

#[test]
fn hand_surrogate_derivative() {
    let (p, batch, dir, w) = hand_case();
    let opts = SolverOptions::fixed();
    let fwd = forward_solve(&p, &batch, &opts).unwrap();
    let sens = solve_sensitivity(&p, &dir, &fwd, &opts).unwrap();
    for beta in [0.0, 0.1, 0.2, 1.0, 3.0] {
        let d = etilde_prime(beta, &p, &batch, &w, &fwd, &sens, &dir).unwrap();
        assert_relative_eq!(d, 5.0 * (5.0 * beta - 1.0), epsilon = 1e-12);
    }
    let s = Surrogate::new(&p, &batch, &w, &fwd, &sens, &dir).unwrap();
    match optimal_beta(&s).unwrap() {
        BetaOutcome::Step(b) => assert_relative_eq!(b, 0.2, epsilon = 1e-12),
        other => panic!("{other:?}"),
    }
}

#[test]
fn zero_direction_is_stationary() {
    let (p, batch, _, w) = hand_case();
    let opts = SolverOptions::fixed();
    // target equals the output, so the gradient vanishes
    let batch = LabeledSet::new(2, vec![vec![1.0, 0.0]], batch.classes().to_vec()).unwrap();
    let zero = GradientField::zeros(p.mesh().clone(), 2);
    let fwd = forward_solve(&p, &batch, &opts).unwrap();
    let sens = solve_sensitivity(&p, &zero, &fwd, &opts).unwrap();
    let s = Surrogate::new(&p, &batch, &w, &fwd, &sens, &zero).unwrap();
    assert!((0..5).all(|b| s.derivative(b as f64) == 0.0));
    assert_eq!(optimal_beta(&s).unwrap(), BetaOutcome::Stationary);
}

fn steepest_surrogate(w: CostWeights, seed: u64) -> Surrogate {
    let opts = SolverOptions::fixed();
    let mut r = rng(seed);
    let p = smooth_params(&mut r, mesh(250), 2, 0.3);
    let batch = random_batch(&mut r, 2, 8);
    let eval = evaluate_batch(&p, &batch, &w, &opts).unwrap();
    let dir = eval.gradient.negated();
    let sens = solve_sensitivity(&p, &dir, &eval.forward, &opts).unwrap();
    Surrogate::new(&p, &batch, &w, &eval.forward, &sens, &dir).unwrap()
}

#[test]
fn squared_loss_surrogate_derivative_is_affine() {
    for (seed, w) in [(1, CostWeights::moons()), (2, CostWeights::moons().with_w12_penalty(1e-3))] {
        let s = steepest_surrogate(w, seed);
        let (d0, d1) = (s.derivative(0.0), s.derivative(1.0));
        for beta in [0.37, 2.5, 7.0] {
            let line = d0 + beta * (d1 - d0);
            assert!((s.derivative(beta) - line).abs() <= 1e-10 * (1.0 + line.abs()));
        }
    }
}

#[test]
fn bisection_agrees_with_dense_scan() {
    for seed in 0..3 {
        let s = steepest_surrogate(CostWeights::circles(), seed);
        let beta = optimal_beta(&s).unwrap().beta().unwrap();
        let grid = 20_000;
        let step = BETA_MAX / grid as f64;
        let (scan, _) = (0..=grid)
            .map(|i| i as f64 * step)
            .map(|b| (b, s.value(b)))
            .fold((0.0, f64::INFINITY), |acc, (b, v)| if v < acc.1 { (b, v) } else { acc });
        assert!((beta - scan).abs() <= step, "seed {seed}: bisection {beta} scan {scan}");
        assert!(s.value(beta) <= s.value(0.0) + 1e-12);
    }
}

fn small_net(r: &mut rand_chacha::ChaCha8Rng, depth: usize) -> DiscreteNet {
    let layers = (0..depth).map(|_| (0..6).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
    let steps = (0..depth).map(|_| r.random_range(0.05..0.5)).collect();
    DiscreteNet::with_steps(2, layers, steps).unwrap()
}

#[test]
fn backprop_matches_central_differences() {
    let mut r = rng(3);
    for (depth, w) in [(1, CostWeights::moons()), (3, CostWeights::circles()), (5, CostWeights::moons())] {
        let net = small_net(&mut r, depth);
        let batch = random_batch(&mut r, 2, 4);
        let (_, grads) = backprop_discrete(&net, &batch, &w).unwrap();
        let h = 1e-5;
        for l in 0..depth {
            for j in 0..6 {
                let shifted = |d: f64| {
                    let mut layers = net.layers().to_vec();
                    layers[l][j] += d;
                    let n = DiscreteNet::with_steps(2, layers, net.steps().to_vec()).unwrap();
                    backprop_discrete(&n, &batch, &w).unwrap().0
                };
                let fd = (shifted(h) - shifted(-h)) / (2.0 * h);
                let g = grads[l][j];
                assert!((g - fd).abs() <= 1e-6 * fd.abs().max(1e-3), "layer {l} entry {j}: {g} vs {fd}");
            }
        }
    }
}

#[test]
fn discrete_net_reproduces_euler_node() {
    let mut r = rng(21);
    let p = smooth_params(&mut r, mesh(250), 2, 1.0);
    let net = DiscreteNet::from_trajectory(&p).unwrap();
    let euler = SolverOptions { mode: SolverMode::Euler, ..SolverOptions::default() };
    for _ in 0..10 {
        let x0 = [r.random_range(-2.0..2.0), r.random_range(-2.0..2.0)];
        let (out, _) = forward_discrete(&net, &x0);
        assert_eq!(out, node_output(&p, &x0, &euler).unwrap());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn sobolev_is_linear_and_smoothing(a in prop::collection::vec(-2.0f64..2.0, 21), s in -3.0f64..3.0) {
        let m = mesh(20);
        let v = sobolev_representative(&a, &m).unwrap();
        let scaled: Vec<f64> = a.iter().map(|x| s * x).collect();
        let vs = sobolev_representative(&scaled, &m).unwrap();
        for (x, y) in v.iter().zip(&vs) {
            prop_assert!((s * x - y).abs() <= 1e-12 * (1.0 + y.abs()));
        }
        let u = GradientField::from_values(m.clone(), 1, a.iter().flat_map(|x| [*x, 0.0]).collect()).unwrap();
        let su = nodecg::gradient::sobolev_transform(&u).unwrap();
        // |S u|_W12^2 = <u, S u>_L2 <= |u|_L2 |S u|_L2 <= |u|_L2 |S u|_W12
        prop_assert!(su.w12_norm_sq() <= u.l2_norm_sq() * (1.0 + 1e-2) + 1e-12);
    }

    #[test]
    fn flow_moves_at_most_unit_speed(x in -3.0f64..3.0, y in -3.0f64..3.0, seed in 0u64..1000) {
        let mut r = rng(seed);
        let p = smooth_params(&mut r, mesh(50), 2, 2.0);
        let out = node_output(&p, &[x, y], &SolverOptions::fixed()).unwrap();
        let d = ((out[0] - x).powi(2) + (out[1] - y).powi(2)).sqrt();
        prop_assert!(d <= 5.0 * 2f64.sqrt() + 1e-9);
    }
}
