//! Model-based inverse iteration: policy correction, input update and
//! cost-weight reconstruction with known dynamics and a known target gain.

use std::io::{Read, Write};

use crate::error::{invalid, Error, Result};
use crate::matops::{
    gare_residual, is_hurwitz, pack_sym, solve_lyapunov, sym_dim, sym_len, symmetrize, unpack_sym, unvec_row, vec_row,
};
use crate::sim::{fmt_f64, is_indexed_column};
use crate::system::{control_gain, disturbance_gain, is_spd, is_symmetric, Mat, SystemDynamics};

/// Default stopping tolerance on `||P^i - P^(i-1)||_F`.
pub const DEFAULT_TOL_CONVERGE: f64 = 1e-8;

/// Default iteration cap.
pub const DEFAULT_MAX_ITERS: usize = 500;

/// Bound on `||P^i||_F` beyond which an iteration is declared divergent.
pub const BLOWUP_BOUND: f64 = 1e12;

/// Learner-side settings shared by both inverse algorithms.
#[derive(Debug, Clone, PartialEq)]
pub struct IrlConfig {
    pub r: Mat,
    pub gamma: f64,
    pub q0: Mat,
    pub max_iters: usize,
    pub tol_converge: f64,
}

impl IrlConfig {
    pub fn new(r: Mat, gamma: f64, q0: Mat) -> Result<Self> {
        let cfg = Self {
            r,
            gamma,
            q0,
            max_iters: DEFAULT_MAX_ITERS,
            tol_converge: DEFAULT_TOL_CONVERGE,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_max_iters(mut self, max_iters: usize) -> Self {
        self.max_iters = max_iters;
        self
    }

    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol_converge = tol;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !is_spd(&self.r) {
            return Err(invalid("R must be symmetric positive definite"));
        }
        if !is_spd(&self.q0) {
            return Err(invalid("Q0 must be symmetric positive definite"));
        }
        if !(self.gamma.is_finite() && self.gamma > 0.0) {
            return Err(invalid(format!("gamma must be positive, got {}", self.gamma)));
        }
        if self.max_iters == 0 {
            return Err(invalid("max_iters must be positive"));
        }
        if !(self.tol_converge.is_finite() && self.tol_converge > 0.0) {
            return Err(invalid("tol_converge must be positive"));
        }
        Ok(())
    }

    fn check_dims(&self, n: usize, m: usize) -> Result<()> {
        if self.q0.shape() != (n, n) {
            return Err(invalid(format!("Q0 must be {n}x{n}")));
        }
        if self.r.shape() != (m, m) {
            return Err(invalid(format!("R must be {m}x{m}")));
        }
        Ok(())
    }
}

/// One pass of the iteration: `Q^i -> P^i -> (K^(i+1), L^(i+1)) -> Q^(i+1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iter: usize,
    pub q: Mat,
    pub p: Mat,
    pub k: Mat,
    pub l: Mat,
    pub q_next: Mat,
    /// Learner GARE residual of `(P^i, Q^(i+1))`.
    pub gare_residual: Option<f64>,
    /// Target-consistency residual of `(P^i, Q^(i+1))` against `K_T`.
    pub theorem1_residual: Option<f64>,
    /// `||K^(i+1) - K_T||_F`.
    pub gain_error: Option<f64>,
    /// Whether `A - B K^(i+1)` is Hurwitz.
    pub hurwitz_ok: Option<bool>,
    /// `||P^i - P^(i-1)||_F`; absent on the first record.
    pub p_step: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct IterationTrace {
    pub records: Vec<IterationRecord>,
    pub converged: bool,
    pub iterations_used: usize,
    /// Number of linear solves performed (Lyapunov or least squares).
    pub linear_solves: usize,
    pub warnings: Vec<String>,
}

/// Side information used only for diagnostics; the iteration never reads it.
#[derive(Debug, Clone, Default)]
pub struct Reference {
    pub dynamics: Option<SystemDynamics>,
    pub target_gain: Option<Mat>,
}

/// Solves `(A-BK_T)'P + P(A-BK_T) = -(Q_i + K_T'RK_T + gamma^2 L_i'L_i)`.
pub fn policy_correction(sys: &SystemDynamics, k_t: &Mat, q_i: &Mat, l_i: &Mat, cfg: &IrlConfig) -> Result<Mat> {
    let (n, m, z) = (sys.n(), sys.m(), sys.z());
    if k_t.shape() != (m, n) || q_i.shape() != (n, n) || l_i.shape() != (z, n) || cfg.r.shape() != (m, m) {
        return Err(invalid("policy correction inputs have inconsistent dimensions"));
    }
    if !is_symmetric(q_i) {
        return Err(invalid("Q_i must be symmetric"));
    }
    let a_cl = sys.closed_loop(k_t);
    if !is_hurwitz(&a_cl) {
        return Err(Error::StabilityViolation("A - B K_T is not Hurwitz".into()));
    }
    let g2 = cfg.gamma * cfg.gamma;
    let rhs = symmetrize(&(q_i + k_t.transpose() * &cfg.r * k_t + l_i.transpose() * l_i * g2));
    Ok(symmetrize(&solve_lyapunov(&a_cl, &rhs)?))
}

/// `K = R^-1 B'P`, `L = D'P / gamma^2`.
pub fn input_update(sys: &SystemDynamics, p_i: &Mat, cfg: &IrlConfig) -> Result<(Mat, Mat)> {
    if p_i.shape() != (sys.n(), sys.n()) {
        return Err(invalid("P must be n x n"));
    }
    if !is_symmetric(p_i) {
        return Err(invalid("P must be symmetric"));
    }
    Ok((control_gain(sys, &cfg.r, p_i)?, disturbance_gain(sys, cfg.gamma, p_i)))
}

/// `Q = -A'P - PA + K'RK - gamma^2 L'L`, symmetrized.
pub fn weight_update(sys: &SystemDynamics, p_i: &Mat, k: &Mat, l: &Mat, cfg: &IrlConfig) -> Result<Mat> {
    let (n, m, z) = (sys.n(), sys.m(), sys.z());
    if p_i.shape() != (n, n) || k.shape() != (m, n) || l.shape() != (z, n) || cfg.r.shape() != (m, m) {
        return Err(invalid("weight update inputs have inconsistent dimensions"));
    }
    let a = sys.a();
    let g2 = cfg.gamma * cfg.gamma;
    let q = -a.transpose() * p_i - p_i * a + k.transpose() * &cfg.r * k - l.transpose() * l * g2;
    Ok(symmetrize(&q))
}

/// The two halves of one inverse iteration, backed by a model or by data.
pub(crate) trait InverseStep {
    fn dims(&self) -> (usize, usize, usize);

    /// Returns `(P^i, K^(i+1), L^(i+1))`.
    fn policy(&mut self, q: &Mat, l: &Mat, warnings: &mut Vec<String>) -> Result<(Mat, Mat, Mat)>;

    fn weight(&mut self, p: &Mat, k: &Mat, l: &Mat, warnings: &mut Vec<String>) -> Result<Mat>;

    /// Linear solves charged to one iteration.
    fn solves_per_iteration(&self) -> usize;
}

struct ModelStep<'a> {
    sys: &'a SystemDynamics,
    k_t: &'a Mat,
    cfg: &'a IrlConfig,
}

impl InverseStep for ModelStep<'_> {
    fn dims(&self) -> (usize, usize, usize) {
        (self.sys.n(), self.sys.m(), self.sys.z())
    }

    fn policy(&mut self, q: &Mat, l: &Mat, _: &mut Vec<String>) -> Result<(Mat, Mat, Mat)> {
        let p = policy_correction(self.sys, self.k_t, q, l, self.cfg)?;
        let (k, l) = input_update(self.sys, &p, self.cfg)?;
        Ok((p, k, l))
    }

    fn weight(&mut self, p: &Mat, k: &Mat, l: &Mat, _: &mut Vec<String>) -> Result<Mat> {
        weight_update(self.sys, p, k, l, self.cfg)
    }

    fn solves_per_iteration(&self) -> usize {
        1
    }
}

/// Runs the model-based iteration from `(Q0, L0 = 0)` until
/// `||P^i - P^(i-1)||_F <= tol_converge` or `max_iters` records.
pub fn run_algorithm1(sys: &SystemDynamics, k_t: &Mat, cfg: &IrlConfig) -> Result<IterationTrace> {
    cfg.validate()?;
    cfg.check_dims(sys.n(), sys.m())?;
    if k_t.shape() != (sys.m(), sys.n()) {
        return Err(invalid(format!("K_T must be {}x{}", sys.m(), sys.n())));
    }
    if !is_hurwitz(&sys.closed_loop(k_t)) {
        return Err(Error::StabilityViolation("A - B K_T is not Hurwitz".into()));
    }
    let reference = Reference {
        dynamics: Some(sys.clone()),
        target_gain: Some(k_t.clone()),
    };
    let mut step = ModelStep { sys, k_t, cfg };
    iterate(&mut step, cfg, &reference)
}

pub(crate) fn iterate(step: &mut impl InverseStep, cfg: &IrlConfig, reference: &Reference) -> Result<IterationTrace> {
    let (n, _, z) = step.dims();
    let mut trace = IterationTrace::default();
    let mut q = symmetrize(&cfg.q0);
    let mut l = Mat::zeros(z, n);
    let mut p_prev: Option<Mat> = None;

    for iter in 0..cfg.max_iters {
        let policy = step.policy(&q, &l, &mut trace.warnings);
        let (p, k_next, l_next) = match policy {
            Ok(v) => v,
            Err(e) => return Err(attach_trace(e, trace)),
        };
        if p.iter().any(|v| !v.is_finite()) || p.norm() > BLOWUP_BOUND {
            trace.iterations_used = trace.records.len();
            return Err(Error::Divergence {
                reason: format!("||P|| = {:.3e} at iteration {iter}", p.norm()),
                trace: Some(Box::new(trace)),
            });
        }
        let q_next = match step.weight(&p, &k_next, &l_next, &mut trace.warnings) {
            Ok(v) => v,
            Err(e) => return Err(attach_trace(e, trace)),
        };
        trace.linear_solves += step.solves_per_iteration();

        let p_step = p_prev.as_ref().map(|prev| (&p - prev).norm());
        let mut rec = IterationRecord {
            iter,
            q: q.clone(),
            p: p.clone(),
            k: k_next.clone(),
            l: l_next.clone(),
            q_next: q_next.clone(),
            gare_residual: None,
            theorem1_residual: None,
            gain_error: None,
            hurwitz_ok: None,
            p_step,
        };
        diagnose(&mut rec, cfg, reference);
        trace.records.push(rec);

        if p_step.is_some_and(|s| s <= cfg.tol_converge) {
            trace.converged = true;
            break;
        }
        q = q_next;
        l = l_next;
        p_prev = Some(p);
    }
    trace.iterations_used = trace.records.len();
    Ok(trace)
}

fn attach_trace(e: Error, mut trace: IterationTrace) -> Error {
    match e {
        Error::Divergence { reason, trace: None } => {
            trace.iterations_used = trace.records.len();
            Error::Divergence {
                reason,
                trace: Some(Box::new(trace)),
            }
        }
        other => other,
    }
}

fn diagnose(rec: &mut IterationRecord, cfg: &IrlConfig, reference: &Reference) {
    if let Some(k_t) = &reference.target_gain {
        if k_t.shape() == rec.k.shape() {
            rec.gain_error = Some((&rec.k - k_t).norm());
        }
    }
    let Some(sys) = &reference.dynamics else { return };
    if sys.n() != rec.p.nrows() || sys.m() != rec.k.nrows() {
        return;
    }
    rec.gare_residual = Some(gare_residual(sys, &rec.q_next, &cfg.r, cfg.gamma, &rec.p));
    rec.hurwitz_ok = Some(is_hurwitz(&sys.closed_loop(&rec.k)));
    if let Some(k_t) = &reference.target_gain {
        rec.theorem1_residual = Some(crate::verify::theorem1_residual(
            sys,
            k_t,
            &rec.p,
            &rec.q_next,
            &cfg.r,
            cfg.gamma,
        ));
    }
}

impl IterationTrace {
    pub fn last(&self) -> Option<&IterationRecord> {
        self.records.last()
    }

    /// Final `K`, if any iteration ran.
    pub fn final_gain(&self) -> Option<&Mat> {
        self.last().map(|r| &r.k)
    }

    /// Index of the first record whose gain error is within `tol`.
    pub fn first_within(&self, tol: f64) -> Option<usize> {
        self.records.iter().position(|r| r.gain_error.is_some_and(|e| e <= tol))
    }

    /// One row per iteration: packed `Q`, packed `P`, row-major `K` and `L`,
    /// packed `Q^(i+1)`, then the diagnostics (empty when not available).
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        let Some(first) = self.records.first() else {
            wtr.write_record(["i"])?;
            wtr.flush()?;
            return Ok(());
        };
        let (n, m, z) = (first.p.nrows(), first.k.nrows(), first.l.nrows());
        let mut header = vec!["i".to_string()];
        let mut push = |p: &str, len: usize| header.extend((1..=len).map(|i| format!("{p}_{i}")));
        push("q", sym_len(n));
        push("p", sym_len(n));
        push("k", m * n);
        push("l", z * n);
        push("qnext", sym_len(n));
        header.extend(
            [
                "gare_residual",
                "theorem1_residual",
                "gain_error",
                "hurwitz_ok",
                "p_step",
            ]
            .map(String::from),
        );
        wtr.write_record(&header)?;
        let opt = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
        for r in &self.records {
            let mut row = vec![r.iter.to_string()];
            for v in [
                pack_sym(&r.q),
                pack_sym(&r.p),
                vec_row(&r.k),
                vec_row(&r.l),
                pack_sym(&r.q_next),
            ] {
                row.extend(v.iter().map(|x| fmt_f64(*x)));
            }
            row.push(opt(r.gare_residual));
            row.push(opt(r.theorem1_residual));
            row.push(opt(r.gain_error));
            row.push(r.hurwitz_ok.map(|b| b.to_string()).unwrap_or_default());
            row.push(opt(r.p_step));
            wtr.write_record(&row)?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// Reads the records of a trace CSV. Run-level fields (`converged`,
    /// solve count, warnings) are not part of the file and come back empty.
    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(input);
        let headers = rdr.headers()?.clone();
        let count = |p: &str| headers.iter().filter(|h| is_indexed_column(h, p)).count();
        let nn = count("q");
        let mut trace = IterationTrace::default();
        if nn == 0 {
            return Ok(trace);
        }
        let n = sym_dim(nn).ok_or_else(|| Error::Csv("q column count is not triangular".into()))?;
        let (mn, zn) = (count("k"), count("l"));
        if count("p") != nn || count("qnext") != nn || mn % n != 0 || zn % n != 0 {
            return Err(Error::Csv("trace column counts are inconsistent".into()));
        }
        let (m, z) = (mn / n, zn / n);
        for (line, row) in rdr.records().enumerate() {
            let row = row?;
            let bad = |what: &str| Error::Csv(format!("row {}: bad {what}", line + 2));
            let iter: usize = row.get(0).and_then(|s| s.parse().ok()).ok_or_else(|| bad("index"))?;
            let mut cells = row.iter().skip(1);
            let mut nums = |len: usize| -> Result<Vec<f64>> {
                (0..len)
                    .map(|_| {
                        cells
                            .next()
                            .and_then(|s| s.trim().parse().ok())
                            .ok_or_else(|| bad("value"))
                    })
                    .collect()
            };
            let q = unpack_sym(n, &nums(nn)?);
            let p = unpack_sym(n, &nums(nn)?);
            let k = unvec_row(m, n, &nums(mn)?);
            let l = unvec_row(z, n, &nums(zn)?);
            let q_next = unpack_sym(n, &nums(nn)?);
            let diag: Vec<&str> = cells.collect();
            let opt = |idx: usize| -> Result<Option<f64>> {
                match diag.get(idx).map(|s| s.trim()) {
                    Some("") | None => Ok(None),
                    Some(s) => s.parse().map(Some).map_err(|_| bad("diagnostic")),
                }
            };
            let gare_residual = opt(0)?;
            let theorem1_residual = opt(1)?;
            let gain_error = opt(2)?;
            let hurwitz_ok = match diag.get(3).map(|s| s.trim()) {
                Some("true") => Some(true),
                Some("false") => Some(false),
                _ => None,
            };
            let p_step = opt(4)?;
            trace.records.push(IterationRecord {
                iter,
                q,
                p,
                k,
                l,
                q_next,
                gare_residual,
                theorem1_residual,
                gain_error,
                hurwitz_ok,
                p_step,
            });
        }
        trace.iterations_used = trace.records.len();
        Ok(trace)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matops::solve_gare;
    use crate::system::CostWeights;
    use nalgebra::dmatrix;

    fn integrator() -> SystemDynamics {
        SystemDynamics::new(dmatrix![0.0], dmatrix![1.0], dmatrix![0.0]).unwrap()
    }

    fn unit_cfg() -> IrlConfig {
        IrlConfig::new(dmatrix![1.0], 1.0, dmatrix![1.0]).unwrap()
    }

    #[test]
    fn scalar_policy_correction() {
        let sys = integrator();
        let cfg = unit_cfg();
        let l0 = Mat::zeros(1, 1);
        let p = policy_correction(&sys, &dmatrix![1.0], &dmatrix![1.0], &l0, &cfg).unwrap();
        assert!((p[(0, 0)] - 1.0).abs() < 1e-12);
        let p = policy_correction(&sys, &dmatrix![2.0], &dmatrix![1.0], &l0, &cfg).unwrap();
        assert!((p[(0, 0)] - 1.25).abs() < 1e-12);
        let err = policy_correction(&sys, &dmatrix![0.0], &dmatrix![1.0], &l0, &cfg).unwrap_err();
        assert!(matches!(err, Error::StabilityViolation(_)));
    }

    #[test]
    fn scalar_updates() {
        let sys = integrator();
        let cfg = unit_cfg();
        let (k, l) = input_update(&sys, &dmatrix![1.25], &cfg).unwrap();
        assert!((k[(0, 0)] - 1.25).abs() < 1e-15);
        assert_eq!(l[(0, 0)], 0.0);
        let q = weight_update(&sys, &dmatrix![1.25], &k, &l, &cfg).unwrap();
        assert!((q[(0, 0)] - 1.5625).abs() < 1e-12);
    }

    #[test]
    fn scalar_recursion_matches_hand_values() {
        let sys = integrator();
        let cfg = unit_cfg().with_max_iters(3);
        let trace = run_algorithm1(&sys, &dmatrix![2.0], &cfg).unwrap();
        let p: Vec<f64> = trace.records.iter().map(|r| r.p[(0, 0)]).collect();
        let q: Vec<f64> = trace.records.iter().map(|r| r.q_next[(0, 0)]).collect();
        // P = (Q + 4) / 4 and Q' = P^2
        assert!((p[0] - 1.25).abs() < 1e-12);
        assert!((q[0] - 1.5625).abs() < 1e-12);
        assert!((p[1] - 1.390625).abs() < 1e-12);
        assert!((q[1] - 1.390625f64.powi(2)).abs() < 1e-12);
        assert!((q[1] - 1.93384).abs() < 1e-5);
        assert_eq!(trace.records.len(), 3);
        assert!(!trace.converged);
    }

    #[test]
    fn scalar_limit() {
        // the scalar map has unit slope at its fixed point, so approach is slow
        let sys = integrator();
        let cfg = unit_cfg().with_max_iters(2000).with_tol(1e-12);
        let trace = run_algorithm1(&sys, &dmatrix![2.0], &cfg).unwrap();
        let last = trace.last().unwrap();
        assert!((last.k[(0, 0)] - 2.0).abs() < 0.01);
        assert!(last.q_next[(0, 0)] < 4.0 && last.q_next[(0, 0)] > 3.9);
        for w in trace.records.windows(2) {
            assert!(w[1].q[(0, 0)] >= w[0].q[(0, 0)]);
            assert!(w[1].k[(0, 0)] <= 2.0);
        }
    }

    #[test]
    fn fixed_point_at_first_step() {
        let sys = integrator();
        let trace = run_algorithm1(&sys, &dmatrix![1.0], &unit_cfg()).unwrap();
        assert!(trace.converged);
        assert!(trace.records.len() <= 2);
        let first = &trace.records[0];
        assert!((first.p[(0, 0)] - 1.0).abs() < 1e-12);
        assert!((first.q_next[(0, 0)] - 1.0).abs() < 1e-12);
        assert!((first.k[(0, 0)] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gare_fixed_point() {
        let sys = SystemDynamics::new(dmatrix![-1.0, 2.0; 2.2, 1.7], dmatrix![0.0; 3.0], dmatrix![1.0; 0.0]).unwrap();
        let w = CostWeights::new(dmatrix![8.0, 0.0; 0.0, 12.0], dmatrix![2.0], 3.0).unwrap();
        let sol = solve_gare(&sys, &w).unwrap();
        let cfg = IrlConfig::new(w.r.clone(), w.gamma, w.q.clone()).unwrap();
        let q = weight_update(&sys, &sol.p, &sol.k, &sol.l, &cfg).unwrap();
        assert!((&q - &w.q).amax() < 1e-6);
        let p = policy_correction(&sys, &sol.k, &w.q, &sol.l, &cfg).unwrap();
        assert!((&p - &sol.p).amax() < 1e-8);
        let (k, l) = input_update(&sys, &sol.p, &cfg).unwrap();
        assert!((&k - &sol.k).amax() < 1e-12 && (&l - &sol.l).amax() < 1e-12);
    }

    #[test]
    fn trace_csv_round_trip() {
        let sys = integrator();
        let trace = run_algorithm1(&sys, &dmatrix![2.0], &unit_cfg().with_max_iters(5)).unwrap();
        let mut buf = Vec::new();
        trace.write_csv(&mut buf).unwrap();
        let back = IterationTrace::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back.records, trace.records);
    }

    #[test]
    fn config_validation() {
        assert!(IrlConfig::new(dmatrix![-1.0], 1.0, dmatrix![1.0]).is_err());
        assert!(IrlConfig::new(dmatrix![1.0], 0.0, dmatrix![1.0]).is_err());
        assert!(IrlConfig::new(dmatrix![1.0], 1.0, dmatrix![1.0])
            .unwrap()
            .with_max_iters(0)
            .validate()
            .is_err());
    }
}
