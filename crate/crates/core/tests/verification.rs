use gameirl::matops::solve_gare;
use gameirl::verify::{
    hamiltonian, imitation_error, nonuniqueness_residual, saddle_check, scale_solution, LearnedGame, TargetGame,
};
use gameirl::{CostWeights, GameSolution, Mat, SystemDynamics, Vector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_game(rng: &mut ChaCha8Rng) -> (SystemDynamics, CostWeights, GameSolution) {
    loop {
        let a = Mat::from_fn(2, 2, |_, _| rng.random_range(-2.0..2.0));
        let b = Mat::from_fn(2, 1, |_, _| rng.random_range(-2.0..2.0));
        let d = Mat::from_fn(2, 1, |_, _| rng.random_range(-0.5..0.5));
        let g = Mat::from_fn(2, 2, |_, _| rng.random_range(-1.0..1.0));
        let q = &g * g.transpose() + Mat::identity(2, 2) * rng.random_range(0.5..3.0);
        let r = Mat::from_element(1, 1, rng.random_range(0.5..3.0));
        let gamma = rng.random_range(3.0..6.0);
        let Ok(sys) = SystemDynamics::new(a, b, d) else {
            continue;
        };
        let w = CostWeights::new(q, r, gamma).unwrap();
        if let Ok(sol) = solve_gare(&sys, &w) {
            return (sys, w, sol);
        }
    }
}

fn reference_game() -> (SystemDynamics, CostWeights, GameSolution) {
    let sys = SystemDynamics::new(
        Mat::from_row_slice(2, 2, &[-1.0, 2.0, 2.2, 1.7]),
        Mat::from_row_slice(2, 1, &[0.0, 3.0]),
        Mat::from_row_slice(2, 1, &[1.0, 0.0]),
    )
    .unwrap();
    let w = CostWeights::new(
        Mat::from_diagonal(&Vector::from_row_slice(&[8.0, 12.0])),
        Mat::from_element(1, 1, 2.0),
        3.0,
    )
    .unwrap();
    let sol = solve_gare(&sys, &w).unwrap();
    (sys, w, sol)
}

#[test]
fn hamiltonian_is_the_completed_square() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let (sys, w, sol) = random_game(&mut rng);
        for _ in 0..20 {
            let x = Vector::from_fn(2, |_, _| rng.random_range(-2.0..2.0));
            let u = Vector::from_fn(1, |_, _| rng.random_range(-2.0..2.0));
            let d = Vector::from_fn(1, |_, _| rng.random_range(-2.0..2.0));
            let h = hamiltonian(&sys, &sol.p, &w.q, &w.r, w.gamma, &x, &u, &d);
            let du = &u + &sol.k * &x;
            let dd = &d - &sol.l * &x;
            let expected = du.dot(&(&w.r * &du)) - w.gamma * w.gamma * dd.dot(&dd);
            assert!(
                (h - expected).abs() <= 1e-9 * (1.0 + expected.abs()),
                "{h} vs {expected}"
            );
        }
    }
}

#[test]
fn uniform_scaling_keeps_the_gain() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let (sys, w, sol) = random_game(&mut rng);
        for c in [0.1, 2.0, 10.0] {
            let scaled = solve_gare(&sys, &scale_solution(&w, c).unwrap()).unwrap();
            assert!((&scaled.k - &sol.k).norm() <= 1e-8 * (1.0 + sol.k.norm()), "c = {c}");
            assert!((&scaled.p - &sol.p * c).norm() <= 1e-6 * c * sol.p.norm(), "c = {c}");
        }
    }
}

#[test]
fn scaled_game_satisfies_nonuniqueness_relations() {
    let (sys, w, sol) = reference_game();
    let target = TargetGame {
        weights: w.clone(),
        p: sol.p.clone(),
        k: sol.k.clone(),
    };
    for c in [0.5, 2.0, 3.0] {
        let ws = scale_solution(&w, c).unwrap();
        let s = solve_gare(&sys, &ws).unwrap();
        let learned = LearnedGame {
            q: ws.q,
            r: ws.r,
            gamma: ws.gamma,
            p: s.p,
        };
        let report = nonuniqueness_residual(&sys, &target, &learned, 1e-8);
        assert!(report.all_passed(), "c = {c}\n{}", report.to_table());
    }
}

#[test]
fn saddle_holds_and_perturbed_value_breaks_it() {
    let (sys, w, sol) = reference_game();
    let ok = saddle_check(&sys, &sol, &w.q, &w.r, w.gamma, 1000, 1);
    assert!(ok.all_passed(), "{}", ok.to_table());

    let bad = GameSolution {
        p: &sol.p + Mat::identity(2, 2) * 0.1,
        ..sol.clone()
    };
    let report = saddle_check(&sys, &bad, &w.q, &w.r, w.gamma, 1000, 1);
    assert!(!report.all_passed());
}

#[test]
fn saddle_check_is_deterministic_per_seed() {
    let (sys, w, sol) = reference_game();
    let a = saddle_check(&sys, &sol, &w.q, &w.r, w.gamma, 100, 42);
    let b = saddle_check(&sys, &sol, &w.q, &w.r, w.gamma, 100, 42);
    assert_eq!(a.to_table(), b.to_table());
}

fn trajectories() -> impl Strategy<Value = (Vec<Vector>, Vec<Vector>)> {
    (1usize..4, 1usize..30).prop_flat_map(|(n, a)| {
        let traj = prop::collection::vec(prop::collection::vec(-10.0..10.0f64, n), a)
            .prop_map(|rows| rows.into_iter().map(Vector::from_vec).collect::<Vec<_>>());
        (traj.clone(), traj)
    })
}

proptest! {
    #[test]
    fn imitation_error_is_nonnegative((x, y) in trajectories()) {
        let te = imitation_error(&x, &y).unwrap();
        prop_assert!(te >= 0.0);
        prop_assert_eq!(imitation_error(&x, &x).unwrap(), 0.0);
        prop_assert!((te - imitation_error(&y, &x).unwrap()).abs() <= 1e-12 * (1.0 + te));
        if x != y {
            prop_assert!(te > 0.0);
        }
    }

    #[test]
    fn constant_offset_gives_offset((x, _) in trajectories(), delta in 0.0..5.0f64) {
        let shifted: Vec<Vector> = x.iter().map(|v| v.add_scalar(delta)).collect();
        let te = imitation_error(&shifted, &x).unwrap();
        prop_assert!((te - delta).abs() <= 1e-9 * (1.0 + delta));
    }
}

#[test]
fn imitation_error_rejects_length_mismatch() {
    let x = vec![Vector::zeros(2); 3];
    let y = vec![Vector::zeros(2); 4];
    assert!(imitation_error(&x, &y).is_err());
}
