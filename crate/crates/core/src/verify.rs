//! Executable checks on learned and target games: residuals, Hamiltonian
//! saddle inequalities, non-uniqueness relations, uniform cost scaling and
//! the imitation error index.

use std::fmt::Write as _;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, Result};
use crate::matops::EPS_PSD;
use crate::sim::fmt_f64;
use crate::system::{CostWeights, GameSolution, Mat, SystemDynamics, Vector};

/// One named check with an explicit tolerance.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub passed: bool,
    /// Advisory checks are reported but do not fail the report.
    pub required: bool,
    /// Short description of the property being checked.
    pub property: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct VerificationReport {
    pub checks: Vec<Check>,
}

impl VerificationReport {
    /// Adds a check that passes when `value <= tolerance`.
    pub fn push_le(&mut self, name: &str, value: f64, tolerance: f64, property: &str) {
        self.checks.push(Check {
            name: name.into(),
            value,
            tolerance,
            passed: value.is_finite() && value <= tolerance,
            required: true,
            property: property.into(),
        });
    }

    /// Advisory variant of [`VerificationReport::push_le`].
    pub fn push_advisory(&mut self, name: &str, value: f64, tolerance: f64, property: &str) {
        self.push_le(name, value, tolerance, property);
        if let Some(c) = self.checks.last_mut() {
            c.required = false;
        }
    }

    /// Adds a check that passes when `value > threshold`.
    pub fn push_gt(&mut self, name: &str, value: f64, threshold: f64, property: &str) {
        self.checks.push(Check {
            name: name.into(),
            value,
            tolerance: threshold,
            passed: value.is_finite() && value > threshold,
            required: true,
            property: property.into(),
        });
    }

    pub fn extend(&mut self, other: VerificationReport) {
        self.checks.extend(other.checks);
    }

    pub fn get(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    /// True when every required check passed.
    pub fn all_passed(&self) -> bool {
        self.failed().next().is_none()
    }

    /// Required checks that did not pass.
    pub fn failed(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| c.required && !c.passed)
    }

    pub fn to_table(&self) -> String {
        let width = self.checks.iter().map(|c| c.name.len()).max().unwrap_or(5).max(5);
        let mut out = format!(
            "{:<width$}  {:>12}  {:>10}  {:<4}  property\n",
            "check", "value", "tolerance", "pass"
        );
        for c in &self.checks {
            let _ = writeln!(
                out,
                "{:<width$}  {:>12.4e}  {:>10.1e}  {:<4}  {}",
                c.name,
                c.value,
                c.tolerance,
                match (c.passed, c.required) {
                    (true, _) => "yes",
                    (false, true) => "NO",
                    (false, false) => "warn",
                },
                c.property
            );
        }
        out
    }

    /// Columns: `check, value, tolerance, passed, required, property`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        wtr.write_record(["check", "value", "tolerance", "passed", "required", "property"])?;
        for c in &self.checks {
            wtr.write_record([
                c.name.clone(),
                fmt_f64(c.value),
                fmt_f64(c.tolerance),
                c.passed.to_string(),
                c.required.to_string(),
                c.property.clone(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Frobenius norm of `(A-BK_T)'P + P(A-BK_T) + Q + P D D' P / gamma^2 + K_T' R K_T`.
/// Zero exactly when `(P, Q)` solves the learner GARE and `R^-1 B'P = K_T`.
pub fn theorem1_residual(sys: &SystemDynamics, k_t: &Mat, p: &Mat, q: &Mat, r: &Mat, gamma: f64) -> f64 {
    let a_cl = sys.closed_loop(k_t);
    let d = sys.d();
    let res =
        a_cl.transpose() * p + p * &a_cl + q + p * d * d.transpose() * p / (gamma * gamma) + k_t.transpose() * r * k_t;
    res.norm()
}

/// `x'Qx + u'Ru - gamma^2 d'd + 2 x'P(Ax + Bu + Dd)`.
#[allow(clippy::too_many_arguments)]
pub fn hamiltonian(
    sys: &SystemDynamics,
    p: &Mat,
    q: &Mat,
    r: &Mat,
    gamma: f64,
    x: &Vector,
    u: &Vector,
    d: &Vector,
) -> f64 {
    let flow = sys.derivative(x, u, d);
    x.dot(&(q * x)) + u.dot(&(r * u)) - gamma * gamma * d.dot(d) + 2.0 * x.dot(&(p * flow))
}

/// Largest log10 scale of a sampled perturbation.
const DELTA_LOG_MAX: f64 = 0.0;
/// Smallest log10 scale of a sampled perturbation.
const DELTA_LOG_MIN: f64 = -4.0;

/// Samples `(x, du, dd)` and checks
/// `H(x, u*, d* + dd) <= H(x, u*, d*) <= H(x, u* + du, d*)` with
/// `u* = -K x`, `d* = L x`, plus `H(x, u*, d*) = 0`. The inequalities get
/// slack `EPS_PSD * max(1, |H|)`.
pub fn saddle_check(
    sys: &SystemDynamics,
    sol: &GameSolution,
    q: &Mat,
    r: &Mat,
    gamma: f64,
    samples: usize,
    seed: u64,
) -> VerificationReport {
    let (n, m, z) = (sys.n(), sys.m(), sys.z());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = |len: usize, rng: &mut ChaCha8Rng| Vector::from_fn(len, |_, _| rng.sample::<f64, _>(StandardNormal));
    let mut violations_u = 0usize;
    let mut violations_d = 0usize;
    let mut margin_u = f64::INFINITY;
    let mut margin_d = f64::INFINITY;
    let mut h_star_max = 0.0f64;
    for _ in 0..samples {
        let x = normal(n, &mut rng);
        let su = 10f64.powf(rng.random_range(DELTA_LOG_MIN..=DELTA_LOG_MAX));
        let sd = 10f64.powf(rng.random_range(DELTA_LOG_MIN..=DELTA_LOG_MAX));
        let du = normal(m, &mut rng) * su;
        let dd = normal(z, &mut rng) * sd;
        let u_star = -(&sol.k * &x);
        let d_star = &sol.l * &x;
        let h = |u: &Vector, d: &Vector| hamiltonian(sys, &sol.p, q, r, gamma, &x, u, d);
        let h_star = h(&u_star, &d_star);
        let h_u = h(&(&u_star + &du), &d_star);
        let h_d = h(&u_star, &(&d_star + &dd));
        h_star_max = h_star_max.max(h_star.abs());
        let slack = EPS_PSD * h_star.abs().max(1.0);
        let mu = h_u - h_star;
        let md = h_star - h_d;
        margin_u = margin_u.min(mu);
        margin_d = margin_d.min(md);
        if mu < -slack {
            violations_u += 1;
        }
        if md < -slack {
            violations_d += 1;
        }
    }
    let mut report = VerificationReport::default();
    let label = format!("over {samples} samples");
    report.push_le(
        "saddle_violations_u",
        violations_u as f64,
        0.0,
        &format!("H(x,u*,d*) <= H(x,u,d*) {label}"),
    );
    report.push_le(
        "saddle_violations_d",
        violations_d as f64,
        0.0,
        &format!("H(x,u*,d) <= H(x,u*,d*) {label}"),
    );
    report.push_le(
        "hamiltonian_at_saddle",
        h_star_max,
        1e-9,
        "H(x,u*,d*) = 0 for a GARE solution",
    );
    if samples > 0 {
        report.push_advisory(
            "saddle_worst_drop_u",
            (-margin_u).max(0.0),
            EPS_PSD,
            "largest drop of H when u leaves u*",
        );
        report.push_advisory(
            "saddle_worst_rise_d",
            (-margin_d).max(0.0),
            EPS_PSD,
            "largest rise of H when d leaves d*",
        );
    }
    report
}

/// Target game: weights, value matrix and optimal gain.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetGame {
    pub weights: CostWeights,
    pub p: Mat,
    pub k: Mat,
}

/// Learned game: reconstructed `Q`, the learner's fixed `R`, `gamma` and the value matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct LearnedGame {
    pub q: Mat,
    pub r: Mat,
    pub gamma: f64,
    pub p: Mat,
}

/// Residuals of the relations linking the target and a learned game that
/// share a gain: with `Q_o = Q_T - Q*`, `R_o = R_T - R`, `P_o = P_T - P*`,
/// `B'P_o - R_o R_T^-1 B'P_T` and
/// `Q_o + A'P_o + P_oA - K_T'R_oK_T + P_T DD' P_T / gamma_T^2 - P* DD' P* / gamma^2`.
pub fn nonuniqueness_residual(
    sys: &SystemDynamics,
    target: &TargetGame,
    learned: &LearnedGame,
    tol: f64,
) -> VerificationReport {
    let t = &target.weights;
    let q_o = &t.q - &learned.q;
    let r_o = &t.r - &learned.r;
    let p_o = &target.p - &learned.p;
    let (a, b, d) = (sys.a(), sys.b(), sys.d());
    let r_t_inv =
        t.r.clone()
            .try_inverse()
            .unwrap_or_else(|| Mat::from_element(t.r.nrows(), t.r.ncols(), f64::NAN));
    let gain_rel = b.transpose() * &p_o - &r_o * r_t_inv * b.transpose() * &target.p;
    let ddt = d * d.transpose();
    let k_t = &target.k;
    let riccati_rel = &q_o + a.transpose() * &p_o + &p_o * a - k_t.transpose() * &r_o * k_t
        + &target.p * &ddt * &target.p / (t.gamma * t.gamma)
        - &learned.p * &ddt * &learned.p / (learned.gamma * learned.gamma);
    let mut report = VerificationReport::default();
    report.push_le(
        "nonuniqueness_gain_relation",
        gain_rel.norm(),
        tol,
        "B'P_o = R_o R_T^-1 B'P_T",
    );
    report.push_le(
        "nonuniqueness_riccati_relation",
        riccati_rel.norm(),
        tol,
        "difference of target and learned GAREs vanishes",
    );
    report
}

/// Uniformly scaled game `(cQ, cR, sqrt(c) gamma)`; its value is `c P` and
/// its gain is unchanged.
pub fn scale_solution(target: &CostWeights, c: f64) -> Result<CostWeights> {
    if !(c.is_finite() && c > 0.0) {
        return Err(invalid(format!("scale factor must be positive, got {c}")));
    }
    Ok(CostWeights {
        q: &target.q * c,
        r: &target.r * c,
        gamma: target.gamma * c.sqrt(),
    })
}

/// `Te = (1/n) sum_i sqrt((1/a) sum_k |x_i(kT) - x_T,i(kT)|^2)` over `a`
/// matched samples.
pub fn imitation_error(learner: &[Vector], target: &[Vector]) -> Result<f64> {
    if learner.len() != target.len() {
        return Err(invalid(format!(
            "trajectory lengths differ: {} vs {}",
            learner.len(),
            target.len()
        )));
    }
    let a = learner.len();
    if a == 0 {
        return Err(invalid("trajectories are empty"));
    }
    let n = target[0].len();
    if n == 0 || learner.iter().chain(target).any(|x| x.len() != n) {
        return Err(invalid("trajectory samples must share one non-zero dimension"));
    }
    let mut total = 0.0;
    for i in 0..n {
        let ss: f64 = learner.iter().zip(target).map(|(x, xt)| (x[i] - xt[i]).powi(2)).sum();
        total += (ss / a as f64).sqrt();
    }
    Ok(total / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matops::solve_gare;
    use nalgebra::{dmatrix, dvector};

    fn plant() -> SystemDynamics {
        SystemDynamics::new(dmatrix![-1.0, 2.0; 2.2, 1.7], dmatrix![0.0; 3.0], dmatrix![1.0; 0.0]).unwrap()
    }

    fn target_weights() -> CostWeights {
        CostWeights::new(dmatrix![8.0, 0.0; 0.0, 12.0], dmatrix![2.0], 3.0).unwrap()
    }

    #[test]
    fn printed_target_satisfies_consistency() {
        let p_t = dmatrix![3.7459, 1.3246; 1.3246, 2.3853];
        let k_t = dmatrix![1.9869, 3.5779];
        let w = target_weights();
        assert!(theorem1_residual(&plant(), &k_t, &p_t, &w.q, &w.r, w.gamma) <= 1e-3);
    }

    #[test]
    fn mismatched_pair_is_not_consistent() {
        let w = target_weights();
        let sol = solve_gare(&plant(), &w).unwrap();
        let p = dmatrix![1.0, 0.3; 0.3, 2.0];
        assert!(theorem1_residual(&plant(), &sol.k, &p, &w.q, &w.r, w.gamma) > 1e-3);
    }

    #[test]
    fn hamiltonian_basics() {
        let sys = plant();
        let w = target_weights();
        let sol = solve_gare(&sys, &w).unwrap();
        let zero2 = Vector::zeros(2);
        let zero1 = Vector::zeros(1);
        assert_eq!(
            hamiltonian(&sys, &sol.p, &w.q, &w.r, w.gamma, &zero2, &zero1, &zero1),
            0.0
        );
        let x = dvector![0.7, -1.3];
        let u_o = -(&sol.k * &x);
        let d_w = &sol.l * &x;
        let h0 = hamiltonian(&sys, &sol.p, &w.q, &w.r, w.gamma, &x, &u_o, &d_w);
        assert!(h0.abs() < 1e-9);
        let delta = dvector![0.37];
        let h1 = hamiltonian(&sys, &sol.p, &w.q, &w.r, w.gamma, &x, &(&u_o + &delta), &d_w);
        assert!((h1 - h0 - 2.0 * 0.37 * 0.37).abs() < 1e-9);
    }

    #[test]
    fn saddle_passes_and_negative_control_fails() {
        let sys = plant();
        let w = target_weights();
        let sol = solve_gare(&sys, &w).unwrap();
        let report = saddle_check(&sys, &sol, &w.q, &w.r, w.gamma, 500, 3);
        assert!(report.all_passed(), "{}", report.to_table());
        let mut bad = sol.clone();
        bad.p += Mat::identity(2, 2) * 0.1;
        let report = saddle_check(&sys, &bad, &w.q, &w.r, w.gamma, 500, 3);
        assert!(!report.all_passed());
    }

    #[test]
    fn zero_perturbation_is_equality() {
        let sys = plant();
        let w = target_weights();
        let sol = solve_gare(&sys, &w).unwrap();
        let report = saddle_check(&sys, &sol, &w.q, &w.r, w.gamma, 0, 1);
        assert!(report.all_passed());
    }

    #[test]
    fn scaling() {
        let w = target_weights();
        assert_eq!(scale_solution(&w, 1.0).unwrap(), w);
        assert!(scale_solution(&w, 0.0).is_err());
        assert!(scale_solution(&w, -2.0).is_err());

        let scalar = SystemDynamics::new(dmatrix![0.0], dmatrix![1.0], dmatrix![1.0]).unwrap();
        let w1 = CostWeights::new(dmatrix![1.0], dmatrix![1.0], 2f64.sqrt()).unwrap();
        let s = solve_gare(&scalar, &scale_solution(&w1, 2.0).unwrap()).unwrap();
        assert!((s.p[(0, 0)] - 2.0 * 2f64.sqrt()).abs() < 1e-9);
        assert!((s.k[(0, 0)] - 2f64.sqrt()).abs() < 1e-9);

        let sys = plant();
        let base = solve_gare(&sys, &w).unwrap();
        let s3 = solve_gare(&sys, &scale_solution(&w, 3.0).unwrap()).unwrap();
        assert!((&s3.k - &base.k).amax() < 1e-6);
    }

    #[test]
    fn nonuniqueness_identities() {
        let sys = plant();
        let w = target_weights();
        let sol = solve_gare(&sys, &w).unwrap();
        let target = TargetGame {
            weights: w.clone(),
            p: sol.p.clone(),
            k: sol.k.clone(),
        };
        let same = LearnedGame {
            q: w.q.clone(),
            r: w.r.clone(),
            gamma: w.gamma,
            p: sol.p.clone(),
        };
        let rep = nonuniqueness_residual(&sys, &target, &same, 1e-12);
        assert!(rep.checks.iter().all(|c| c.value == 0.0));

        let c = 5.0;
        let ws = scale_solution(&w, c).unwrap();
        let scaled = LearnedGame {
            q: ws.q,
            r: ws.r,
            gamma: ws.gamma,
            p: &sol.p * c,
        };
        let rep = nonuniqueness_residual(&sys, &target, &scaled, 1e-5);
        assert!(rep.all_passed(), "{}", rep.to_table());
    }

    #[test]
    fn imitation_index() {
        let a: Vec<Vector> = (0..10).map(|k| dvector![k as f64, -(k as f64)]).collect();
        assert_eq!(imitation_error(&a, &a).unwrap(), 0.0);
        let shifted: Vec<Vector> = a.iter().map(|x| x.add_scalar(0.25)).collect();
        assert!((imitation_error(&shifted, &a).unwrap() - 0.25).abs() < 1e-15);
        assert!(imitation_error(&a[..3], &a).is_err());
        assert!(imitation_error(&[], &[]).is_err());
    }

    #[test]
    fn report_rendering() {
        let mut r = VerificationReport::default();
        r.push_le("a", 1e-9, 1e-6, "small");
        r.push_gt("b", 0.05, 0.1, "big");
        assert!(!r.all_passed());
        assert_eq!(r.failed().count(), 1);
        assert!(r.to_table().contains("NO"));
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 3);
    }
}
