use gameirl::matops::{
    bilinear_regressor, gare_residual, hat_vec, is_hurwitz, lyapunov_residual, pack_sym, solve_gare, solve_lyapunov,
    unpack_sym, vec_row, SymPacked, TOL_GARE, TOL_LYAP,
};
use gameirl::{CostWeights, Mat, SystemDynamics, Vector};
use proptest::prelude::*;

fn sym_matrix(n: usize) -> impl Strategy<Value = Mat> {
    prop::collection::vec(-3.0..3.0f64, n * n).prop_map(move |v| {
        let m = Mat::from_row_slice(n, n, &v);
        (&m + m.transpose()) * 0.5
    })
}

/// Hurwitz matrix built as `M - (rho(M) + margin) I`.
fn hurwitz_matrix(n: usize) -> impl Strategy<Value = Mat> {
    (prop::collection::vec(-2.0..2.0f64, n * n), 0.2..2.0f64).prop_map(move |(v, margin)| {
        let m = Mat::from_row_slice(n, n, &v);
        let shift = m
            .complex_eigenvalues()
            .iter()
            .map(|c| c.re)
            .fold(f64::NEG_INFINITY, f64::max);
        m - Mat::identity(n, n) * (shift + margin)
    })
}

/// Independent Kronecker-form Lyapunov solve: `(I (x) A' + A' (x) I) vec P = -vec M`.
fn kronecker_lyapunov(a: &Mat, m: &Mat) -> Mat {
    let n = a.nrows();
    let at = a.transpose();
    let eye = Mat::identity(n, n);
    let big = eye.kronecker(&at) + at.kronecker(&eye);
    let rhs = -Vector::from_column_slice(m.as_slice());
    let sol = big.lu().solve(&rhs).expect("nonsingular");
    Mat::from_column_slice(n, n, sol.as_slice())
}

proptest! {
    #[test]
    fn hat_vec_matches_quadratic_form((x, w) in (1usize..6).prop_flat_map(|n| (prop::collection::vec(-5.0..5.0f64, n), sym_matrix(n)))) {
        let xv = Vector::from_row_slice(&x);
        let direct = xv.dot(&(&w * &xv));
        let via = hat_vec(&x).unwrap().dot(&pack_sym(&w));
        prop_assert!((direct - via).abs() <= 1e-12 * (1.0 + direct.abs()));
    }

    #[test]
    fn bilinear_regressor_matches_form(
        (a, b, w) in (1usize..5, 1usize..5).prop_flat_map(|(p, q)| (
            prop::collection::vec(-5.0..5.0f64, p),
            prop::collection::vec(-5.0..5.0f64, q),
            prop::collection::vec(-5.0..5.0f64, p * q),
        ))
    ) {
        let wm = Mat::from_row_slice(a.len(), b.len(), &w);
        let direct = Vector::from_row_slice(&a).dot(&(&wm * Vector::from_row_slice(&b)));
        let via = bilinear_regressor(&a, &b).dot(&vec_row(&wm));
        prop_assert!((direct - via).abs() <= 1e-12 * (1.0 + direct.abs()));
    }

    #[test]
    fn pack_round_trip(w in (1usize..7).prop_flat_map(sym_matrix)) {
        let n = w.nrows();
        prop_assert_eq!(unpack_sym(n, pack_sym(&w).as_slice()), w.clone());
        let packed = SymPacked::pack(&w).unwrap();
        prop_assert_eq!(packed.unpack(), w);
    }

    #[test]
    fn lyapunov_matches_kronecker_oracle((a, m) in (1usize..5).prop_flat_map(|n| (hurwitz_matrix(n), sym_matrix(n)))) {
        let p = solve_lyapunov(&a, &m).unwrap();
        prop_assert!(lyapunov_residual(&a, &p, &m) <= TOL_LYAP * (1.0 + m.norm()));
        prop_assert!((&p - p.transpose()).norm() <= 1e-12 * (1.0 + p.norm()));
        let oracle = kronecker_lyapunov(&a, &m);
        prop_assert!((&p - &oracle).norm() <= 1e-9 * (1.0 + oracle.norm()));
    }
}

#[test]
fn lyapunov_kronecker_example() {
    let a = Mat::from_row_slice(2, 2, &[0.0, 1.0, -2.0, -3.0]);
    let m = Mat::identity(2, 2);
    let p = solve_lyapunov(&a, &m).unwrap();
    let oracle = kronecker_lyapunov(&a, &m);
    for (x, y) in p.iter().zip(oracle.iter()) {
        assert!((x - y).abs() <= 1e-9);
    }
}

#[test]
fn scalar_gare_matches_closed_form() {
    // a p * 2 + q - p^2 (b^2/r - d^2/g^2) = 0  =>  p = (a + sqrt(a^2 + q s)) / s.
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
    for _ in 0..100 {
        let a: f64 = rng.random_range(-2.0..-0.1);
        let b: f64 = rng.random_range(0.5..2.0);
        let d: f64 = rng.random_range(0.0..1.0);
        let q: f64 = rng.random_range(0.5..5.0);
        let r: f64 = rng.random_range(0.5..3.0);
        let gamma: f64 = rng.random_range(2.0..6.0);
        let s = b * b / r - d * d / (gamma * gamma);
        let p_exact = (a + (a * a + q * s).sqrt()) / s;
        let sys = SystemDynamics::new(
            Mat::from_element(1, 1, a),
            Mat::from_element(1, 1, b),
            Mat::from_element(1, 1, d),
        )
        .unwrap();
        let w = CostWeights::new(Mat::from_element(1, 1, q), Mat::from_element(1, 1, r), gamma).unwrap();
        let sol = solve_gare(&sys, &w).unwrap();
        assert!(
            (sol.p[(0, 0)] - p_exact).abs() <= 1e-8 * p_exact.max(1.0),
            "a={a} p={} vs {p_exact}",
            sol.p[(0, 0)]
        );
        assert!((sol.k[(0, 0)] - b * p_exact / r).abs() <= 1e-8 * (1.0 + b * p_exact / r));
    }
}

#[test]
fn random_gare_solutions_are_stabilizing() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
    for _ in 0..30 {
        let a = Mat::from_fn(3, 3, |_, _| rng.random_range(-1.5..1.5));
        let b = Mat::from_fn(3, 1, |_, _| rng.random_range(-1.0..1.0)) + Mat::from_row_slice(3, 1, &[0.0, 0.0, 1.0]);
        let d = Mat::from_fn(3, 1, |_, _| rng.random_range(-0.3..0.3));
        let sys = SystemDynamics::new(a, b, d).unwrap();
        let w = CostWeights::new(Mat::identity(3, 3) * 2.0, Mat::identity(1, 1), 5.0).unwrap();
        let Ok(sol) = solve_gare(&sys, &w) else { continue };
        assert!(gare_residual(&sys, &w.q, &w.r, w.gamma, &sol.p) <= TOL_GARE * (1.0 + sol.p.norm()));
        assert!(is_hurwitz(&sys.closed_loop(&sol.k)));
        assert!(sol.p.clone().symmetric_eigenvalues().iter().all(|&e| e > 0.0));
    }
}
