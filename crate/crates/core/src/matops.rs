//! Vectorization conventions, the quadratic basis, symmetric packing, a dense
//! Lyapunov solver and the game Riccati oracle.
//!
//! Conventions used throughout the crate:
//!
//! * `hat_vec(x) = [x1^2, 2 x1 x2, .., 2 x1 xn, x2^2, .., xn^2]`, so that
//!   `hat_vec(x) . pack_sym(W) = x'Wx` for symmetric `W`.
//! * `pack_sym(W)` stores the upper triangle of `W` row by row.
//! * `vec_row(W)` flattens `W` row by row, and
//!   `a'Wb = bilinear_regressor(a, b) . vec_row(W)` with the regressor `a (x) b`.

use nalgebra::DMatrix;

use crate::error::{invalid, Error, Result};
use crate::system::{is_spd, is_symmetric, CostWeights, GameSolution, Mat, SystemDynamics, Vector};

pub const TOL_LYAP: f64 = 1e-9;
pub const TOL_GARE: f64 = 1e-7;
pub const EPS_HURWITZ: f64 = 1e-9;
pub const EPS_PSD: f64 = 1e-8;

/// Length of the packed upper triangle of an `n x n` symmetric matrix.
pub const fn sym_len(n: usize) -> usize {
    n * (n + 1) / 2
}

/// Inverse of [`sym_len`], if `len` is a triangular number.
pub fn sym_dim(len: usize) -> Option<usize> {
    let mut n = 0;
    while sym_len(n) < len {
        n += 1;
    }
    (sym_len(n) == len).then_some(n)
}

/// Quadratic basis of `x`; the off-diagonal products carry a factor 2.
pub fn hat_vec(x: &[f64]) -> Result<Vector> {
    if x.is_empty() {
        return Err(invalid("hat_vec of an empty vector"));
    }
    Ok(hat_vec_unchecked(x))
}

pub(crate) fn hat_vec_unchecked(x: &[f64]) -> Vector {
    let n = x.len();
    let mut out = Vector::zeros(sym_len(n));
    let mut idx = 0;
    for i in 0..n {
        out[idx] = x[i] * x[i];
        idx += 1;
        for j in i + 1..n {
            out[idx] = 2.0 * x[i] * x[j];
            idx += 1;
        }
    }
    out
}

/// Symmetric matrix stored as its upper triangle, row by row.
#[derive(Debug, Clone, PartialEq)]
pub struct SymPacked {
    dim: usize,
    packed: Vec<f64>,
}

impl SymPacked {
    pub fn from_packed(dim: usize, packed: Vec<f64>) -> Result<Self> {
        if dim == 0 || packed.len() != sym_len(dim) {
            return Err(invalid(format!(
                "packed length {} does not match dimension {dim}",
                packed.len()
            )));
        }
        Ok(Self { dim, packed })
    }

    /// Packs the upper triangle; the lower triangle is ignored.
    pub fn pack(m: &Mat) -> Result<Self> {
        if !m.is_square() || m.nrows() == 0 {
            return Err(invalid("only non-empty square matrices can be packed"));
        }
        Ok(Self {
            dim: m.nrows(),
            packed: pack_sym(m).as_slice().to_vec(),
        })
    }

    pub fn unpack(&self) -> Mat {
        unpack_sym(self.dim, &self.packed)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.packed
    }
}

pub fn pack_sym(m: &Mat) -> Vector {
    let n = m.nrows();
    let mut out = Vector::zeros(sym_len(n));
    let mut idx = 0;
    for i in 0..n {
        for j in i..n {
            out[idx] = m[(i, j)];
            idx += 1;
        }
    }
    out
}

pub fn unpack_sym(n: usize, packed: &[f64]) -> Mat {
    debug_assert_eq!(packed.len(), sym_len(n));
    let mut m = Mat::zeros(n, n);
    let mut idx = 0;
    for i in 0..n {
        for j in i..n {
            m[(i, j)] = packed[idx];
            m[(j, i)] = packed[idx];
            idx += 1;
        }
    }
    m
}

/// Row-major flattening `[a11, a12, .., a1n, a21, .., amn]`.
pub fn vec_row(a: &Mat) -> Vector {
    Vector::from_iterator(
        a.len(),
        (0..a.nrows()).flat_map(|i| (0..a.ncols()).map(move |j| a[(i, j)])),
    )
}

/// Inverse of [`vec_row`].
pub fn unvec_row(rows: usize, cols: usize, v: &[f64]) -> Mat {
    Mat::from_row_slice(rows, cols, v)
}

/// Regressor `a (x) b` with `a'Wb = bilinear_regressor(a, b) . vec_row(W)`.
pub fn bilinear_regressor(a: &[f64], b: &[f64]) -> Vector {
    Vector::from_iterator(
        a.len() * b.len(),
        a.iter().flat_map(|ai| b.iter().map(move |bj| ai * bj)),
    )
}

pub fn symmetrize(m: &Mat) -> Mat {
    (m + m.transpose()) * 0.5
}

/// Largest real part over the spectrum.
pub fn spectral_abscissa(a: &Mat) -> f64 {
    a.complex_eigenvalues()
        .iter()
        .map(|c| c.re)
        .fold(f64::NEG_INFINITY, f64::max)
}

/// True iff every eigenvalue has real part below `-EPS_HURWITZ`.
pub fn is_hurwitz(a: &Mat) -> bool {
    a.is_square() && a.nrows() > 0 && a.iter().all(|v| v.is_finite()) && spectral_abscissa(a) < -EPS_HURWITZ
}

/// Loewner order test `a <= b`, i.e. `b - a` has no eigenvalue below `-EPS_PSD`.
pub fn psd_order(a: &Mat, b: &Mat) -> Result<bool> {
    if a.shape() != b.shape() {
        return Err(invalid("psd_order needs matrices of equal shape"));
    }
    if !is_symmetric(a) || !is_symmetric(b) {
        return Err(invalid("psd_order needs symmetric inputs"));
    }
    Ok(min_eigenvalue(&(b - a)) >= -EPS_PSD)
}

/// Smallest eigenvalue of the symmetric part of `m`.
pub fn min_eigenvalue(m: &Mat) -> f64 {
    symmetrize(m).symmetric_eigenvalues().min()
}

/// Solves `A_cl' P + P A_cl + M = 0` for symmetric `P`.
///
/// The unknown is the packed upper triangle of `P`, so the system has
/// `n(n+1)/2` unknowns and is solved directly by LU.
pub fn solve_lyapunov(a_cl: &Mat, m: &Mat) -> Result<Mat> {
    let n = a_cl.nrows();
    if !a_cl.is_square() || n == 0 {
        return Err(invalid("closed-loop matrix must be square"));
    }
    if m.shape() != (n, n) {
        return Err(invalid(format!("right-hand side must be {n}x{n}")));
    }
    if !is_symmetric(m) {
        return Err(invalid("right-hand side of the Lyapunov equation must be symmetric"));
    }
    if !is_hurwitz(a_cl) {
        return Err(Error::StabilityViolation(format!(
            "closed-loop matrix is not Hurwitz (spectral abscissa {:.3e})",
            spectral_abscissa(a_cl)
        )));
    }

    let len = sym_len(n);
    let at = a_cl.transpose();
    let mut op = Mat::zeros(len, len);
    let mut basis = Mat::zeros(n, n);
    let mut col = 0;
    for i in 0..n {
        for j in i..n {
            basis[(i, j)] = 1.0;
            basis[(j, i)] = 1.0;
            let image = &at * &basis + &basis * a_cl;
            op.set_column(col, &pack_sym(&image));
            basis[(i, j)] = 0.0;
            basis[(j, i)] = 0.0;
            col += 1;
        }
    }
    let rhs = -pack_sym(&symmetrize(m));
    let packed = op
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::NumericFailure("singular Lyapunov operator".into()))?;
    let p = unpack_sym(n, packed.as_slice());

    let residual = lyapunov_residual(a_cl, &p, m);
    if residual.is_nan() || residual > TOL_LYAP * m.norm().max(1.0) {
        return Err(Error::NumericFailure(format!(
            "Lyapunov residual {residual:.3e} above tolerance"
        )));
    }
    Ok(p)
}

/// Frobenius norm of `A_cl' P + P A_cl + M`.
pub fn lyapunov_residual(a_cl: &Mat, p: &Mat, m: &Mat) -> f64 {
    (a_cl.transpose() * p + p * a_cl + m).norm()
}

/// Frobenius norm of the game Riccati residual
/// `A'P + PA + Q - P B R^-1 B'P + P D D'P / gamma^2`.
pub fn gare_residual(sys: &SystemDynamics, q: &Mat, r: &Mat, gamma: f64, p: &Mat) -> f64 {
    let Some(r_inv) = r.clone().try_inverse() else {
        return f64::INFINITY;
    };
    let a = sys.a();
    let pb = p * sys.b();
    let pd = p * sys.d();
    (a.transpose() * p + p * a + q - &pb * r_inv * pb.transpose() + &pd * pd.transpose() / (gamma * gamma)).norm()
}

const GARE_MAX_OUTER: usize = 500;
const GARE_MAX_NEWTON: usize = 100;
const GARE_BLOWUP: f64 = 1e12;

/// Stabilizing solution of the game algebraic Riccati equation.
///
/// `(A, B)` must be controllable; this is the caller's responsibility. The
/// primary route is a Kleinman iteration on the disturbance-free Riccati
/// equation, followed by a fixed-point iteration on the folded weight
/// `Q + P D D'P / gamma^2` and a Newton polish on the full game equation. If
/// that fails the matrix-sign Hamiltonian method is tried.
pub fn solve_gare(sys: &SystemDynamics, w: &CostWeights) -> Result<GameSolution> {
    w.validate()?;
    w.check_dims(sys)?;
    let p = match gare_newton(sys, w) {
        Ok(p) => p,
        Err(first) => gare_hamiltonian(sys, w)
            .map_err(|second| Error::NoSolution(format!("Newton route: {first}; Hamiltonian route: {second}")))?,
    };
    finish_gare(sys, w, p)
}

/// Game Riccati solution from the stable invariant subspace of the
/// Hamiltonian, computed with the matrix sign function.
pub fn solve_gare_hamiltonian(sys: &SystemDynamics, w: &CostWeights) -> Result<GameSolution> {
    w.validate()?;
    w.check_dims(sys)?;
    let p = gare_hamiltonian(sys, w)?;
    finish_gare(sys, w, p)
}

fn finish_gare(sys: &SystemDynamics, w: &CostWeights, p: Mat) -> Result<GameSolution> {
    let p = symmetrize(&p);
    if !is_spd(&p) {
        return Err(Error::NumericFailure(
            "Riccati solution is not positive definite".into(),
        ));
    }
    let residual = gare_residual(sys, &w.q, &w.r, w.gamma, &p);
    if residual.is_nan() || residual > TOL_GARE * w.q.norm().max(1.0) {
        return Err(Error::NumericFailure(format!(
            "game Riccati residual {residual:.3e} above tolerance"
        )));
    }
    let sol = GameSolution::from_value(sys, &w.r, w.gamma, p)?;
    let a_game = sys.closed_loop(&sol.k) + sys.d() * &sol.l;
    if !is_hurwitz(&a_game) {
        return Err(Error::NoSolution("Riccati solution is not stabilizing".into()));
    }
    Ok(sol)
}

/// Stabilizing gain from the Bass construction, or zero if `A` is already Hurwitz.
fn initial_stabilizing_gain(sys: &SystemDynamics) -> Result<Mat> {
    let (n, m) = (sys.n(), sys.m());
    if is_hurwitz(sys.a()) {
        return Ok(Mat::zeros(m, n));
    }
    let beta = sys.a().norm() + 1.0;
    let shifted = -(sys.a() + Mat::identity(n, n) * beta).transpose();
    let bbt = sys.b() * sys.b().transpose() * 2.0;
    let z = solve_lyapunov(&shifted, &bbt)?;
    let z_inv = z
        .try_inverse()
        .ok_or_else(|| Error::NoSolution("(A, B) is not controllable".into()))?;
    let k = sys.b().transpose() * z_inv;
    if !is_hurwitz(&sys.closed_loop(&k)) {
        return Err(Error::NoSolution(
            "could not construct a stabilizing initial gain".into(),
        ));
    }
    Ok(k)
}

/// Kleinman iteration for `A'P + PA + Qt - P B R^-1 B'P = 0` from a stabilizing gain.
fn kleinman(sys: &SystemDynamics, qt: &Mat, r: &Mat, mut k: Mat) -> Result<(Mat, Mat)> {
    let mut prev: Option<Mat> = None;
    for _ in 0..GARE_MAX_NEWTON {
        let a_cl = sys.closed_loop(&k);
        let rhs = symmetrize(&(qt + k.transpose() * r * &k));
        let p = solve_lyapunov(&a_cl, &rhs)?;
        k = crate::system::control_gain(sys, r, &p)?;
        if let Some(pp) = &prev {
            if (&p - pp).norm() <= 1e-13 * p.norm().max(1.0) {
                return Ok((p, k));
            }
        }
        prev = Some(p);
    }
    let p = prev.expect("at least one Kleinman step");
    Ok((p, k))
}

fn gare_newton(sys: &SystemDynamics, w: &CostWeights) -> Result<Mat> {
    let g2 = w.gamma * w.gamma;
    let ddt = sys.d() * sys.d().transpose();
    let k0 = initial_stabilizing_gain(sys)?;
    let (mut p, mut k) = kleinman(sys, &w.q, &w.r, k0)?;

    // fixed point on the folded weight
    let mut settled = false;
    for _ in 0..GARE_MAX_OUTER {
        let qt = symmetrize(&(&w.q + &p * &ddt * &p / g2));
        let (p_next, k_next) = kleinman(sys, &qt, &w.r, k.clone())?;
        if !p_next.iter().all(|v| v.is_finite()) || p_next.norm() > GARE_BLOWUP {
            return Err(Error::NoSolution("folded-weight iteration diverged".into()));
        }
        let step = (&p_next - &p).norm();
        p = p_next;
        k = k_next;
        if step <= 1e-9 * p.norm().max(1.0) {
            settled = true;
            break;
        }
    }
    if !settled {
        return Err(Error::NoSolution("folded-weight iteration did not settle".into()));
    }

    // Newton polish on the full game equation
    for _ in 0..GARE_MAX_NEWTON {
        let k = crate::system::control_gain(sys, &w.r, &p)?;
        let l = crate::system::disturbance_gain(sys, w.gamma, &p);
        let a_game = sys.closed_loop(&k) + sys.d() * &l;
        let rhs = symmetrize(&(&w.q + k.transpose() * &w.r * &k - l.transpose() * &l * g2));
        let p_next = solve_lyapunov(&a_game, &rhs)?;
        let step = (&p_next - &p).norm();
        p = symmetrize(&p_next);
        if step <= 1e-14 * p.norm().max(1.0) {
            break;
        }
    }
    Ok(p)
}

fn gare_hamiltonian(sys: &SystemDynamics, w: &CostWeights) -> Result<Mat> {
    let n = sys.n();
    let r_inv = w.r.clone().try_inverse().ok_or_else(|| invalid("R is singular"))?;
    let s = sys.b() * r_inv * sys.b().transpose() - sys.d() * sys.d().transpose() / (w.gamma * w.gamma);
    let mut h = Mat::zeros(2 * n, 2 * n);
    h.view_mut((0, 0), (n, n)).copy_from(sys.a());
    h.view_mut((0, n), (n, n)).copy_from(&(-&s));
    h.view_mut((n, 0), (n, n)).copy_from(&(-&w.q));
    h.view_mut((n, n), (n, n)).copy_from(&(-sys.a().transpose()));

    let sign = matrix_sign(&h)?;
    let ident = Mat::identity(n, n);
    let mut lhs = Mat::zeros(2 * n, n);
    lhs.view_mut((0, 0), (n, n)).copy_from(&sign.view((0, n), (n, n)));
    lhs.view_mut((n, 0), (n, n))
        .copy_from(&(sign.view((n, n), (n, n)) + &ident));
    let mut rhs = Mat::zeros(2 * n, n);
    rhs.view_mut((0, 0), (n, n))
        .copy_from(&(-(sign.view((0, 0), (n, n)) + &ident)));
    rhs.view_mut((n, 0), (n, n)).copy_from(&(-sign.view((n, 0), (n, n))));
    let p = lhs
        .svd(true, true)
        .solve(&rhs, 1e-14)
        .map_err(|e| Error::NumericFailure(e.to_string()))?;
    if p.iter().any(|v| !v.is_finite()) {
        return Err(Error::NoSolution(
            "Hamiltonian has eigenvalues on the imaginary axis".into(),
        ));
    }
    Ok(symmetrize(&p))
}

/// Newton iteration for the matrix sign function with determinant scaling.
fn matrix_sign(h: &Mat) -> Result<DMatrix<f64>> {
    let dim = h.nrows() as f64;
    let mut z = h.clone();
    for _ in 0..100 {
        let z_inv = z
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::NoSolution("Hamiltonian has eigenvalues on the imaginary axis".into()))?;
        let det = z.determinant().abs();
        let c = if det.is_finite() && det > 0.0 {
            det.powf(-1.0 / dim)
        } else {
            1.0
        };
        let next = (&z * c + z_inv / c) * 0.5;
        let step = (&next - &z).norm();
        z = next;
        if step <= 1e-13 * z.norm() {
            return Ok(z);
        }
    }
    Err(Error::NoSolution("matrix sign iteration did not converge".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;

    fn scalar_sys(a: f64, b: f64, d: f64) -> SystemDynamics {
        SystemDynamics::new(dmatrix![a], dmatrix![b], dmatrix![d]).unwrap()
    }

    #[test]
    fn hat_vec_examples() {
        assert_eq!(hat_vec(&[1.0, 2.0]).unwrap().as_slice(), &[1.0, 4.0, 4.0]);
        assert_eq!(
            hat_vec(&[1.0, 0.0, 0.0]).unwrap().as_slice(),
            &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0]
        );
        let w = dmatrix![2.0, 1.0; 1.0, 5.0];
        let q = hat_vec(&[3.0, -1.0]).unwrap().dot(&pack_sym(&w));
        assert_eq!(q, 17.0);
        assert!(matches!(hat_vec(&[]), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn vec_row_examples() {
        assert_eq!(vec_row(&dmatrix![1.0, 2.0; 3.0, 4.0]).as_slice(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(vec_row(&Mat::identity(2, 2)).as_slice(), &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(vec_row(&dmatrix![5.0, 6.0, 7.0]).as_slice(), &[5.0, 6.0, 7.0]);
    }

    #[test]
    fn sym_dim_inverts_sym_len() {
        for n in 1..8 {
            assert_eq!(sym_dim(sym_len(n)), Some(n));
        }
        assert_eq!(sym_dim(4), None);
    }

    #[test]
    fn lyapunov_scalar_and_diagonal() {
        let p = solve_lyapunov(&dmatrix![-1.0], &dmatrix![2.0]).unwrap();
        assert!((p[(0, 0)] - 1.0).abs() < 1e-14);
        let p = solve_lyapunov(&(-Mat::identity(2, 2)), &dmatrix![2.0, 0.0; 0.0, 4.0]).unwrap();
        assert!((p - dmatrix![1.0, 0.0; 0.0, 2.0]).amax() < 1e-14);
    }

    #[test]
    fn lyapunov_rejects_unstable_and_asymmetric() {
        assert!(matches!(
            solve_lyapunov(&dmatrix![0.5], &dmatrix![1.0]),
            Err(Error::StabilityViolation(_))
        ));
        assert!(matches!(
            solve_lyapunov(&(-Mat::identity(2, 2)), &dmatrix![1.0, 2.0; 0.0, 1.0]),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn hurwitz_examples() {
        assert!(is_hurwitz(&dmatrix![0.0, 1.0; -2.0, -3.0]));
        assert!(!is_hurwitz(&Mat::zeros(2, 2)));
    }

    #[test]
    fn psd_order_examples() {
        let i = Mat::identity(2, 2);
        assert!(psd_order(&i, &(&i * 2.0)).unwrap());
        assert!(!psd_order(&(&i * 2.0), &i).unwrap());
        assert!(psd_order(&dmatrix![1.0, 0.0; 0.0, 3.0], &dmatrix![2.0, 0.0; 0.0, 3.0]).unwrap());
        assert!(matches!(
            psd_order(&dmatrix![1.0, 1.0; 0.0, 1.0], &i),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn gare_scalar_without_disturbance() {
        // P^2 + 2P - 3 = 0
        let sys = scalar_sys(-1.0, 1.0, 0.0);
        let w = CostWeights::new(dmatrix![3.0], dmatrix![1.0], 5.0).unwrap();
        let sol = solve_gare(&sys, &w).unwrap();
        assert!((sol.p[(0, 0)] - 1.0).abs() < 1e-10);
        assert!((sol.k[(0, 0)] - 1.0).abs() < 1e-10);
        assert_eq!(sol.l[(0, 0)], 0.0);
    }

    #[test]
    fn gare_scalar_with_disturbance() {
        // 1 - P^2 + P^2/2 = 0
        let sys = scalar_sys(0.0, 1.0, 1.0);
        let w = CostWeights::new(dmatrix![1.0], dmatrix![1.0], 2f64.sqrt()).unwrap();
        for sol in [solve_gare(&sys, &w).unwrap(), solve_gare_hamiltonian(&sys, &w).unwrap()] {
            let s2 = 2f64.sqrt();
            assert!((sol.p[(0, 0)] - s2).abs() < 1e-10);
            assert!((sol.k[(0, 0)] - s2).abs() < 1e-10);
            assert!((sol.l[(0, 0)] - 1.0 / s2).abs() < 1e-10);
        }
    }

    #[test]
    fn gare_reports_missing_solution() {
        // gamma below the attenuation bound: 1 - P^2 + 4P^2 has no positive root
        let sys = scalar_sys(0.0, 1.0, 1.0);
        let w = CostWeights::new(dmatrix![1.0], dmatrix![1.0], 0.5).unwrap();
        assert!(solve_gare(&sys, &w).is_err());
    }
}
