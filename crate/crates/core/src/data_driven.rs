//! Data-driven inverse iteration.
//!
//! The policy step regresses `theta = [pack(P); vec_row(K); vec_row(L)]`
//! on expert windows. The weight step regresses `pack(Q)` on learner
//! windows. Both regressors depend only on the data, so each is factored
//! once and reused for every iteration; only the right-hand sides change.

use crate::error::{invalid, Error, Result};
use crate::matops::{min_eigenvalue, pack_sym, sym_len, symmetrize, unpack_sym, unvec_row, EPS_PSD};
use crate::model_based::{iterate, InverseStep, IrlConfig, IterationTrace, Reference};
use crate::sim::{BatchRole, DataBatch};
use crate::system::{Mat, Vector};

/// Singular values below `RANK_TOL * s_max` count as zero.
pub const RANK_TOL: f64 = 1e-9;

/// Condition number above which a policy solve carries a warning.
pub const COND_MAX: f64 = 1e8;

/// Floor added on top of `|lambda_min|` when shifting an indefinite `Q`.
pub const Q_SHIFT_FLOOR: f64 = 1e-8;

/// Tall least-squares operator, factored once.
#[derive(Debug, Clone)]
struct LsqOperator {
    phi: Mat,
    q: Mat,
    r: Mat,
    singular_values: Vec<f64>,
    rank: usize,
}

impl LsqOperator {
    fn new(phi: Mat) -> Self {
        let qr = phi.clone().qr();
        let (q, r) = (qr.q(), qr.r());
        let mut singular_values: Vec<f64> = phi.singular_values().iter().copied().collect();
        singular_values.sort_by(|a, b| b.total_cmp(a));
        let rank = numerical_rank(&singular_values);
        Self {
            phi,
            q,
            r,
            singular_values,
            rank,
        }
    }

    fn cols(&self) -> usize {
        self.phi.ncols()
    }

    fn condition_number(&self) -> f64 {
        match (self.singular_values.first(), self.singular_values.last()) {
            (Some(&hi), Some(&lo)) if lo > 0.0 => hi / lo,
            _ => f64::INFINITY,
        }
    }

    fn require_rank(&self, what: &'static str) -> Result<()> {
        if self.rank < self.cols() {
            return Err(Error::RankDeficient {
                what,
                rank: self.rank,
                required: self.cols(),
            });
        }
        Ok(())
    }

    fn solve_qr(&self, rhs: &Vector) -> Result<Vector> {
        let qtb = self.q.transpose() * rhs;
        self.r
            .solve_upper_triangular(&qtb)
            .ok_or_else(|| Error::NumericFailure("triangular factor is singular".into()))
    }

    fn solve_svd(&self, rhs: &Vector) -> Result<Vector> {
        let eps = RANK_TOL * self.singular_values.first().copied().unwrap_or(0.0);
        self.phi
            .clone()
            .svd(true, true)
            .solve(rhs, eps)
            .map_err(|e| Error::NumericFailure(e.to_string()))
    }
}

fn numerical_rank(sorted_desc: &[f64]) -> usize {
    let Some(&top) = sorted_desc.first() else { return 0 };
    if top <= 0.0 || !top.is_finite() {
        return 0;
    }
    sorted_desc.iter().filter(|&&s| s > RANK_TOL * top).count()
}

fn rank_of(m: &Mat) -> usize {
    if m.is_empty() {
        return 0;
    }
    let mut s: Vec<f64> = m.singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    numerical_rank(&s)
}

fn stack(rows: usize, cols: usize, f: impl Fn(usize) -> Vec<f64>) -> Mat {
    let mut out = Mat::zeros(rows, cols);
    for j in 0..rows {
        for (c, v) in f(j).into_iter().enumerate() {
            out[(j, c)] = v;
        }
    }
    out
}

/// Policy-step regressor built from an expert batch.
#[derive(Debug, Clone)]
pub struct PolicyRegression {
    n: usize,
    m: usize,
    z: usize,
    r: Mat,
    gamma: f64,
    op: LsqOperator,
    i_xx: Mat,
    i_vv: Mat,
}

/// Output of one policy least-squares solve.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicySolution {
    pub p: Mat,
    pub k: Mat,
    pub l: Mat,
    pub residual_norm: f64,
    pub warning: Option<String>,
}

/// Builds the policy regressor. Row `j` encodes window `j`; columns are
/// `[pack(P); vec_row(K); vec_row(L)]`.
pub fn build_policy_regressors(batch: &DataBatch, cfg: &IrlConfig) -> Result<PolicyRegression> {
    if batch.role != BatchRole::Expert {
        return Err(invalid(
            "policy regression needs an expert batch (probing-noise integrals missing)",
        ));
    }
    batch.validate()?;
    let (n, m, z) = (batch.n, batch.m, batch.z);
    if cfg.r.shape() != (m, m) {
        return Err(invalid(format!("R must be {m}x{m}")));
    }
    let nn = sym_len(n);
    let cols = nn + n * m + n * z;
    let l = batch.len();
    if l < cols {
        return Err(invalid(format!(
            "policy regression needs at least {cols} windows, got {l}"
        )));
    }
    let g2 = cfg.gamma * cfg.gamma;
    let r = &cfg.r;
    let phi = stack(l, cols, |j| {
        let w = &batch.windows[j];
        let i_xe = w.i_xe.as_ref().expect("validated expert window");
        let mut row = w.d_xx.iter().copied().collect::<Vec<_>>();
        for jj in 0..m {
            for k in 0..n {
                let s: f64 = (0..m).map(|i| r[(i, jj)] * i_xe[k * m + i]).sum();
                row.push(-2.0 * s);
            }
        }
        for jj in 0..z {
            for k in 0..n {
                row.push(-2.0 * g2 * w.i_xd[k * z + jj]);
            }
        }
        row
    });
    let i_xx = stack(l, nn, |j| batch.windows[j].i_xx.iter().copied().collect());
    let i_vv = stack(l, sym_len(m), |j| {
        batch.windows[j]
            .i_vv
            .as_ref()
            .expect("validated expert window")
            .iter()
            .copied()
            .collect()
    });
    Ok(PolicyRegression {
        n,
        m,
        z,
        r: cfg.r.clone(),
        gamma: cfg.gamma,
        op: LsqOperator::new(phi),
        i_xx,
        i_vv,
    })
}

impl PolicyRegression {
    pub fn phi(&self) -> &Mat {
        &self.op.phi
    }

    pub fn columns(&self) -> usize {
        self.op.cols()
    }

    pub fn rank(&self) -> usize {
        self.op.rank
    }

    pub fn is_full_rank(&self) -> bool {
        self.op.rank == self.op.cols()
    }

    pub fn condition_number(&self) -> f64 {
        self.op.condition_number()
    }

    /// Right side for the current `(Q^i, L^i)`.
    pub fn rhs(&self, q_i: &Mat, l_i: &Mat) -> Result<Vector> {
        if q_i.shape() != (self.n, self.n) || l_i.shape() != (self.z, self.n) {
            return Err(invalid("Q_i/L_i dimensions do not match the regression"));
        }
        let g2 = self.gamma * self.gamma;
        let weight = pack_sym(&symmetrize(&(q_i + l_i.transpose() * l_i * g2)));
        Ok(-(&self.i_xx * weight) - &self.i_vv * pack_sym(&self.r))
    }

    fn unpack(&self, theta: &Vector) -> (Mat, Mat, Mat) {
        let (n, m, z) = (self.n, self.m, self.z);
        let nn = sym_len(n);
        let p = unpack_sym(n, &theta.as_slice()[..nn]);
        let k = unvec_row(m, n, &theta.as_slice()[nn..nn + n * m]);
        let l = unvec_row(z, n, &theta.as_slice()[nn + n * m..]);
        (p, k, l)
    }

    fn finish(&self, theta: Vector, rhs: &Vector) -> PolicySolution {
        let residual_norm = (&self.op.phi * &theta - rhs).norm();
        let (p, k, l) = self.unpack(&theta);
        let cond = self.condition_number();
        let warning = (cond > COND_MAX).then(|| format!("policy regressor ill-conditioned (cond = {cond:.3e})"));
        PolicySolution {
            p,
            k,
            l,
            residual_norm,
            warning,
        }
    }

    /// Second factorization path (SVD) for uniqueness cross-checks.
    pub fn solve_with_svd(&self, q_i: &Mat, l_i: &Mat) -> Result<PolicySolution> {
        self.op.require_rank("policy regressor")?;
        let rhs = self.rhs(q_i, l_i)?;
        let theta = self.op.solve_svd(&rhs)?;
        Ok(self.finish(theta, &rhs))
    }
}

/// Least-squares solve of the policy regression via the cached QR factor.
pub fn solve_policy_lsq(reg: &PolicyRegression, q_i: &Mat, l_i: &Mat) -> Result<PolicySolution> {
    reg.op.require_rank("policy regressor")?;
    let rhs = reg.rhs(q_i, l_i)?;
    let theta = reg.op.solve_qr(&rhs)?;
    Ok(reg.finish(theta, &rhs))
}

/// Weight-step regressor built from a learner batch.
#[derive(Debug, Clone)]
pub struct WeightRegression {
    n: usize,
    m: usize,
    z: usize,
    op: LsqOperator,
    d_xx: Mat,
    i_xu: Mat,
    i_xd: Mat,
}

/// Output of one weight least-squares solve.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSolution {
    pub q: Mat,
    /// Diagonal shift applied to restore positive definiteness, if any.
    pub shift: Option<f64>,
}

/// Builds the weight regressor `Phi_q = I_xx`; any batch role is accepted
/// since only the state, control and disturbance integrals are read.
pub fn build_weight_regressors(batch: &DataBatch) -> Result<WeightRegression> {
    batch.validate()?;
    let (n, m, z) = (batch.n, batch.m, batch.z);
    let nn = sym_len(n);
    let k = batch.len();
    if k < nn {
        return Err(invalid(format!(
            "weight regression needs at least {nn} windows, got {k}"
        )));
    }
    let row = |f: fn(&crate::sim::WindowRecord) -> &Vector, len: usize| {
        stack(k, len, |j| f(&batch.windows[j]).iter().copied().collect())
    };
    Ok(WeightRegression {
        n,
        m,
        z,
        op: LsqOperator::new(row(|w| &w.i_xx, nn)),
        d_xx: row(|w| &w.d_xx, nn),
        i_xu: row(|w| &w.i_xu, n * m),
        i_xd: row(|w| &w.i_xd, n * z),
    })
}

impl WeightRegression {
    pub fn phi(&self) -> &Mat {
        &self.op.phi
    }

    pub fn columns(&self) -> usize {
        self.op.cols()
    }

    pub fn rank(&self) -> usize {
        self.op.rank
    }

    /// Right side for `(P^i, K^(i+1), L^(i+1))`.
    pub fn rhs(&self, p: &Mat, k: &Mat, l: &Mat, cfg: &IrlConfig) -> Result<Vector> {
        let (n, m, z) = (self.n, self.m, self.z);
        if p.shape() != (n, n) || k.shape() != (m, n) || l.shape() != (z, n) || cfg.r.shape() != (m, m) {
            return Err(invalid("P/K/L dimensions do not match the regression"));
        }
        let g2 = cfg.gamma * cfg.gamma;
        let rk = &cfg.r * k;
        // 2 * integral u'RKx and 2 * integral d'Lx as coefficient vectors
        let mut cu = Vector::zeros(n * m);
        for i in 0..m {
            for kk in 0..n {
                cu[kk * m + i] = 2.0 * rk[(i, kk)];
            }
        }
        let mut cd = Vector::zeros(n * z);
        for j in 0..z {
            for kk in 0..n {
                cd[kk * z + j] = 2.0 * l[(j, kk)];
            }
        }
        let quad = pack_sym(&symmetrize(&(k.transpose() * &rk - l.transpose() * l * g2)));
        Ok(-(&self.d_xx * pack_sym(p)) + &self.i_xu * cu + &self.i_xd * cd * g2 + &self.op.phi * quad)
    }
}

/// Least-squares solve for `Q^(i+1)`. An indefinite result is shifted by
/// `(|lambda_min| + 1e-8) I` and the shift reported.
pub fn solve_weight_lsq(reg: &WeightRegression, p: &Mat, k: &Mat, l: &Mat, cfg: &IrlConfig) -> Result<WeightSolution> {
    reg.op.require_rank("weight regressor")?;
    let rhs = reg.rhs(p, k, l, cfg)?;
    let q = symmetrize(&unpack_sym(reg.n, reg.op.solve_qr(&rhs)?.as_slice()));
    let lmin = min_eigenvalue(&q);
    if lmin < 0.0 {
        let shift = lmin.abs() + Q_SHIFT_FLOOR;
        let q = q + Mat::identity(reg.n, reg.n) * shift;
        return Ok(WeightSolution { q, shift: Some(shift) });
    }
    Ok(WeightSolution { q, shift: None })
}

/// Numerical ranks behind the uniqueness conditions of both regressions.
#[derive(Debug, Clone, PartialEq)]
pub struct RankReport {
    /// Rank of `[I_xx, I_xu, I_xd]` over expert windows.
    pub expert_rank: usize,
    pub expert_required: usize,
    pub expert_pass: bool,
    /// Rank of `I_xx` over learner windows.
    pub learner_rank: usize,
    pub learner_required: usize,
    pub learner_pass: bool,
}

impl RankReport {
    pub fn passed(&self) -> bool {
        self.expert_pass && self.learner_pass
    }
}

/// Evaluates both rank conditions. Never fails; mismatched batches simply
/// report the shortfall.
pub fn check_rank(expert: &DataBatch, learner: &DataBatch) -> RankReport {
    let (n, m, z) = (expert.n, expert.m, expert.z);
    let nn = sym_len(n);
    let expert_required = nn + n * m + n * z;
    let excite = stack(expert.len(), expert_required, |j| {
        let w = &expert.windows[j];
        w.i_xx
            .iter()
            .chain(w.i_xu.iter())
            .chain(w.i_xd.iter())
            .copied()
            .collect()
    });
    let expert_rank = rank_of(&excite);
    let learner_required = sym_len(learner.n);
    let gram = stack(learner.len(), learner_required, |j| {
        learner.windows[j].i_xx.iter().copied().collect()
    });
    let learner_rank = rank_of(&gram);
    RankReport {
        expert_rank,
        expert_required,
        expert_pass: expert_rank >= expert_required,
        learner_rank,
        learner_required,
        learner_pass: learner_rank >= learner_required,
    }
}

struct DataStep<'a> {
    policy: PolicyRegression,
    weight: WeightRegression,
    cfg: &'a IrlConfig,
}

impl InverseStep for DataStep<'_> {
    fn dims(&self) -> (usize, usize, usize) {
        (self.policy.n, self.policy.m, self.policy.z)
    }

    fn policy(&mut self, q: &Mat, l: &Mat, warnings: &mut Vec<String>) -> Result<(Mat, Mat, Mat)> {
        let sol = solve_policy_lsq(&self.policy, q, l)?;
        if let Some(w) = sol.warning {
            if !warnings.contains(&w) {
                warnings.push(w);
            }
        }
        Ok((sol.p, sol.k, sol.l))
    }

    fn weight(&mut self, p: &Mat, k: &Mat, l: &Mat, warnings: &mut Vec<String>) -> Result<Mat> {
        let sol = solve_weight_lsq(&self.weight, p, k, l, self.cfg)?;
        if let Some(shift) = sol.shift {
            warnings.push(format!(
                "degraded weight: Q shifted by {shift:.3e} to stay positive definite"
            ));
        }
        Ok(sol.q)
    }

    fn solves_per_iteration(&self) -> usize {
        2
    }
}

/// Runs the data-driven iteration from `(Q0, L0 = 0)`.
pub fn run_algorithm2(expert: &DataBatch, learner: &DataBatch, cfg: &IrlConfig) -> Result<IterationTrace> {
    run_algorithm2_with_reference(expert, learner, cfg, &Reference::default())
}

/// As [`run_algorithm2`], additionally filling the per-iteration
/// diagnostics that need the true dynamics or the target gain.
pub fn run_algorithm2_with_reference(
    expert: &DataBatch,
    learner: &DataBatch,
    cfg: &IrlConfig,
    reference: &Reference,
) -> Result<IterationTrace> {
    cfg.validate()?;
    if (expert.n, expert.m, expert.z) != (learner.n, learner.m, learner.z) {
        return Err(invalid("expert and learner batches have different dimensions"));
    }
    if cfg.q0.shape() != (expert.n, expert.n) {
        return Err(invalid(format!("Q0 must be {0}x{0}", expert.n)));
    }
    let report = check_rank(expert, learner);
    if !report.expert_pass {
        return Err(Error::RankDeficient {
            what: "expert excitation [I_xx, I_xu, I_xd]",
            rank: report.expert_rank,
            required: report.expert_required,
        });
    }
    if !report.learner_pass {
        return Err(Error::RankDeficient {
            what: "learner I_xx",
            rank: report.learner_rank,
            required: report.learner_required,
        });
    }
    let mut step = DataStep {
        policy: build_policy_regressors(expert, cfg)?,
        weight: build_weight_regressors(learner)?,
        cfg,
    };
    let cond = step.policy.condition_number();
    let mut trace = iterate(&mut step, cfg, reference)?;
    if cond > COND_MAX && trace.warnings.is_empty() {
        trace
            .warnings
            .push(format!("policy regressor ill-conditioned (cond = {cond:.3e})"));
    }
    if trace.records.iter().any(|r| min_eigenvalue(&r.q_next) < -EPS_PSD) {
        trace.warnings.push("a weight iterate was indefinite".into());
    }
    Ok(trace)
}
