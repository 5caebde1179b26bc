//! Acceptance suite. Prints one PASS/FAIL line per criterion. Failures are
//! reported but only fail the process when `ACCEPTANCE_STRICT=1`, since some
//! criteria measure training behaviour rather than correctness.
//!
//! Run seed `s` trains on the set generated with seed `s` and is scored on
//! the clean test set generated with seed `1000 + s`. Set
//! `ACCEPTANCE_ONLY=6,7` to run a subset.

mod common;

use std::f64::consts::PI;
use std::process::{Command, ExitCode};
use std::time::Instant;

use nodecg::baseline::{forward_discrete, sgd_train, DiscreteNet, SgdConfig};
use nodecg::cost::{cost, forward_solve};
use nodecg::datasets::{DatasetKind, DatasetSpec};
use nodecg::gradient::{adjoint_directional_derivative, evaluate_batch, sobolev_representative, sobolev_transform};
use nodecg::linesearch::solve_sensitivity;
use nodecg::mesh::{axpy, CostWeights};
use nodecg::model::node_output;
use nodecg::ncg::{ncg_resume, DescentSpace, EvalSets, TrainConfig, TrainState};
use nodecg::ode::{SolverMode, SolverOptions};
use rand::Rng;

use common::*;

const SEEDS: u64 = 10;
const EPOCHS: usize = 5;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 { s[n / 2] } else { 0.5 * (s[n / 2 - 1] + s[n / 2]) }
}

fn fmt_list(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.1}")).collect::<Vec<_>>().join(" ")
}

/// NCG run on the protocol data for `seed`; with `stop_at_perfect` training
/// ends after the first epoch in which the clean accuracy reached 1.
fn ncg_run(kind: DatasetKind, augment: bool, descent: DescentSpace, seed: u64, stop_at_perfect: bool) -> TrainState {
    let started = Instant::now();
    let train = DatasetSpec::train(kind, seed).augmented(augment).generate().unwrap();
    let clean = DatasetSpec::clean_test(kind, 1000 + seed).augmented(augment).generate().unwrap();
    let weights = match kind {
        DatasetKind::Moons => CostWeights::moons(),
        DatasetKind::Circles => CostWeights::circles(),
    };
    let mut config = TrainConfig::new(descent, weights, seed);
    let sets = EvalSets { clean: Some(&clean), noisy: None };
    let mut state = TrainState::initial(&config, train.n_state()).unwrap();
    for epochs in 1..=EPOCHS {
        config.epochs = epochs;
        state = ncg_resume(&config, state, &train, &sets).unwrap_or_else(|f| panic!("seed {seed}: {}", f.error));
        if stop_at_perfect && state.first_perfect_clean().is_some() {
            break;
        }
    }
    eprintln!(
        "  {kind}{} {descent} seed {seed}: first hit {:?}, best {:?}, {:.0}s",
        if augment { " 3d" } else { "" },
        state.first_perfect_clean(),
        state.best_clean(),
        started.elapsed().as_secs_f64()
    );
    state
}

fn moons_runs(descent: DescentSpace) -> Vec<TrainState> {
    (0..SEEDS).map(|s| ncg_run(DatasetKind::Moons, false, descent, s, false)).collect()
}

fn first_hits(runs: &[TrainState]) -> Vec<Option<f64>> {
    runs.iter().map(TrainState::first_perfect_clean).collect()
}

fn criterion_1(runs: &[TrainState]) -> Outcome {
    let hits = first_hits(runs);
    let all = hits.iter().all(Option::is_some);
    let h: Vec<f64> = hits.iter().map(|h| h.unwrap_or(f64::INFINITY)).collect();
    let med = median(&h);
    outcome(all && med <= 1.5, format!("first hits [{}], median {med:.2} (need all within 5 epochs, median <= 1.5)", fmt_list(&h)))
}

fn criterion_2(runs: &[TrainState]) -> Outcome {
    let hits = first_hits(runs);
    let all = hits.iter().all(Option::is_some);
    let h: Vec<f64> = hits.iter().map(|h| h.unwrap_or(f64::INFINITY)).collect();
    let med = median(&h);
    outcome(
        all && (1.5..=4.5).contains(&med),
        format!("first hits [{}], median {med:.2} (need all within 5 epochs, median in [1.5, 4.5])", fmt_list(&h)),
    )
}

fn criterion_3() -> Outcome {
    let hits = (0..SEEDS)
        .filter(|s| ncg_run(DatasetKind::Circles, true, DescentSpace::L2, *s, true).first_perfect_clean().is_some())
        .count();
    outcome(hits >= 9, format!("{hits}/10 runs reached 100% clean accuracy (need >= 9)"))
}

fn criterion_4() -> Outcome {
    let best: Vec<f64> = (0..SEEDS)
        .map(|s| ncg_run(DatasetKind::Circles, false, DescentSpace::L2, s, false).best_clean().unwrap())
        .collect();
    let mean = best.iter().sum::<f64>() / best.len() as f64;
    let below = best.iter().filter(|b| **b < 1.0).count();
    outcome(
        (0.9..1.0).contains(&mean) && below >= 8,
        format!("mean best clean {:.1}%, {below}/10 below 100% (need mean in [90, 100) and >= 8 below)", 100.0 * mean),
    )
}

fn criterion_5(l2: &[TrainState], w12: &[TrainState]) -> Outcome {
    let mean = |runs: &[TrainState]| runs.iter().map(|s| s.params.w12_norm_sq().sqrt()).sum::<f64>() / runs.len() as f64;
    let (a, b) = (mean(l2), mean(w12));
    outcome(a >= 5.0 * b, format!("mean W12 norm {a:.1} (L2 descent) vs {b:.1} (W12 descent), ratio {:.1} (need >= 5)", a / b))
}

fn criterion_6() -> Outcome {
    let opts = SolverOptions::adaptive(1e-8, 1e-6);
    let weights = [
        CostWeights::moons(),
        CostWeights::circles(),
        CostWeights::moons().with_l2_penalty(1e-2),
        CostWeights::circles().with_w12_penalty(1e-2),
        CostWeights { mu_run: 0.1, ..CostWeights::moons() },
    ];
    let mut r = rng(600);
    let mut worst: f64 = 0.0;
    for case in 0..20 {
        let w = weights[case % weights.len()];
        let n = if case % 4 == 3 { 3 } else { 2 };
        let p = smooth_params(&mut r, mesh(250), n, 0.5);
        let batch = random_batch(&mut r, n, 10);
        let eta = smooth_field(&mut r, p.mesh().clone(), n, 1.0);
        let eval = evaluate_batch(&p, &batch, &w, &opts).unwrap();
        let d = adjoint_directional_derivative(&p, &w, &eval.forward, &eval.costates, &eta).unwrap();
        let h = 1e-4;
        let fd = (cost(&axpy(h, &eta, &p).unwrap(), &batch, &w, &opts).unwrap()
            - cost(&axpy(-h, &eta, &p).unwrap(), &batch, &w, &opts).unwrap())
            / (2.0 * h);
        worst = worst.max(rel_err(d, fd));
    }
    outcome(worst <= 1e-3, format!("worst relative error {worst:.2e} over 20 cases (need <= 1e-3)"))
}

fn criterion_7() -> Outcome {
    let mut r = rng(700);
    let fine = mesh(999);
    let mut bvp: f64 = 0.0;
    for _ in 0..10 {
        let f = smooth_fn(&mut r, 3, 1.0, 5.0);
        let u: Vec<f64> = fine.nodes().iter().map(|t| f(*t)).collect();
        let v = sobolev_representative(&u, &fine).unwrap();
        let oracle = neumann_fd_solve(&u, 5.0);
        bvp = bvp.max(v.iter().zip(&oracle).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
    }

    let m = mesh(1000);
    let u: Vec<f64> = m.nodes().iter().map(|t| (PI * t / 5.0).cos()).collect();
    let scale = 1.0 / (1.0 + (PI / 5.0).powi(2));
    let eig = sobolev_representative(&u, &m)
        .unwrap()
        .iter()
        .zip(&u)
        .map(|(a, b)| (a - scale * b).abs())
        .fold(0.0, f64::max);

    let mut duality: f64 = 0.0;
    for _ in 0..20 {
        let u = smooth_field(&mut r, m.clone(), 1, 1.0);
        let phi = smooth_field(&mut r, m.clone(), 1, 1.0);
        let lhs = u.l2_inner(&phi).unwrap();
        let rhs = sobolev_transform(&u).unwrap().w12_inner(&phi).unwrap();
        duality = duality.max((lhs - rhs).abs() / (u.l2_norm_sq() * phi.l2_norm_sq()).sqrt());
    }
    outcome(
        bvp <= 1e-4 && eig <= 1e-6 && duality <= 1e-4,
        format!("BVP sup error {bvp:.2e} (<= 1e-4), cosine mode {eig:.2e} (<= 1e-6), duality {duality:.2e} (<= 1e-4)"),
    )
}

fn criterion_8() -> Outcome {
    let opts = SolverOptions::fixed();
    let mut worst = f64::INFINITY;
    for seed in 0..10 {
        let mut r = rng(800 + seed);
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
        worst = worst.min(rem(1e-3) / rem(5e-4));
    }
    outcome(worst >= 3.5, format!("smallest remainder ratio {worst:.3} over 10 configurations (need >= 3.5)"))
}

fn criterion_9() -> Outcome {
    let mut r = rng(900);
    let euler = SolverOptions { mode: SolverMode::Euler, ..SolverOptions::default() };
    let mut bitwise = true;
    for _ in 0..5 {
        let p = smooth_params(&mut r, mesh(250), 2, 1.0);
        let net = DiscreteNet::from_trajectory(&p).unwrap();
        for _ in 0..10 {
            let x0 = [r.random_range(-2.0..2.0), r.random_range(-2.0..2.0)];
            bitwise &= forward_discrete(&net, &x0).0 == node_output(&p, &x0, &euler).unwrap();
        }
    }
    let mut hits = Vec::new();
    for seed in 0..SEEDS {
        let train = DatasetSpec::train(DatasetKind::Moons, seed).generate().unwrap();
        let run = sgd_train(&SgdConfig::new(CostWeights::moons(), 15, seed), &train, None, None).unwrap();
        hits.push(run.records.iter().find(|e| e.train_acc == 1.0).map(|e| e.epoch + 1));
    }
    let reached = hits.iter().filter(|h| h.is_some()).count();
    let list: Vec<String> = hits.iter().map(|h| h.map_or("-".into(), |e| e.to_string())).collect();
    outcome(
        bitwise && reached >= 8,
        format!(
            "discrete net equals Euler NODE bitwise: {bitwise}; RMSProp 100% training accuracy in {reached}/10 runs, epochs [{}] (need >= 8)",
            list.join(" ")
        ),
    )
}

fn criterion_10() -> Outcome {
    let dir = tempfile::TempDir::new().unwrap();
    let run = |tag: &str| {
        let metrics = dir.path().join(format!("{tag}.csv"));
        let ckpt = dir.path().join(format!("{tag}.ckpt"));
        let out = Command::new(env!("CARGO_BIN_EXE_nodecg"))
            .args(["train", "--epochs", "1", "--seed", "4", "--set", "solver.mode=fixed", "--checkpoint"])
            .arg(&ckpt)
            .arg("--metrics")
            .arg(&metrics)
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        std::fs::read(metrics).unwrap()
    };
    let (a, b) = (run("a"), run("b"));
    outcome(a == b && !a.is_empty(), format!("two fixed-step runs wrote {} and {} byte metrics, identical: {}", a.len(), b.len(), a == b))
}

fn main() -> ExitCode {
    let only: Option<Vec<usize>> =
        std::env::var("ACCEPTANCE_ONLY").ok().map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let wanted = |i: usize| only.as_ref().is_none_or(|o| o.contains(&i));

    let names = [
        "moons L2 descent reaches 100% early",
        "moons W12 descent reaches 100% later",
        "augmented circles reach 100%",
        "planar circles stay below 100%",
        "W12 descent yields smaller W12 norms",
        "adjoint gradient matches finite differences",
        "Sobolev transform oracles",
        "sensitivity remainder is second order",
        "Euler baseline equivalence and RMSProp training",
        "deterministic metrics in fixed-step mode",
    ];
    let mut results: Vec<(usize, Outcome)> = Vec::new();
    let mut report = |i: usize, o: Outcome| {
        println!("{} [{i}] {}: {}", if o.pass { "PASS" } else { "FAIL" }, names[i - 1], o.detail);
        results.push((i, o));
    };

    for (i, f) in [(6, criterion_6 as fn() -> Outcome), (7, criterion_7), (8, criterion_8), (9, criterion_9), (10, criterion_10)] {
        if wanted(i) {
            report(i, f());
        }
    }
    let l2 = (wanted(1) || wanted(5)).then(|| moons_runs(DescentSpace::L2));
    if let (true, Some(runs)) = (wanted(1), &l2) {
        report(1, criterion_1(runs));
    }
    let w12 = (wanted(2) || wanted(5)).then(|| moons_runs(DescentSpace::W12));
    if let (true, Some(runs)) = (wanted(2), &w12) {
        report(2, criterion_2(runs));
    }
    if let (true, Some(a), Some(b)) = (wanted(5), &l2, &w12) {
        report(5, criterion_5(a, b));
    }
    if wanted(3) {
        report(3, criterion_3());
    }
    if wanted(4) {
        report(4, criterion_4());
    }

    let failed: Vec<usize> = results.iter().filter(|(_, o)| !o.pass).map(|(i, _)| *i).collect();
    println!("acceptance: {} passed, {} failed {failed:?}", results.len() - failed.len(), failed.len());
    let strict = std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if failed.is_empty() || !strict { ExitCode::SUCCESS } else { ExitCode::FAILURE }
}
