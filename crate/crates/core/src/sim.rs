//! Agent simulation and trajectory-integral bookkeeping.
//!
//! Expert and learner agents are integrated with fixed-step RK4. Window
//! integrals are accumulated with the composite trapezoid rule on the RK4
//! grid. Each window records the quadratic-basis increment, the integral of
//! the quadratic basis and the state/input cross-integrals that the
//! data-driven regressions consume.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::matops::{hat_vec_unchecked, is_hurwitz, sym_dim, sym_len};
use crate::system::{Mat, SystemDynamics, Vector};

/// Default bound on the state norm before a simulation is declared divergent.
pub const DEFAULT_BLOWUP: f64 = 1e6;

/// Default probing frequencies in rad/s.
pub const DEFAULT_PROBING_FREQUENCIES: [f64; 5] = [1.3, 4.1, 7.7, 12.9, 18.6];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SignalKind {
    Zero,
    /// `amplitude * U[0, 1)`, redrawn every integration step.
    UniformRandom,
    /// `amplitude * sum_k sin(w_k t + phase)`.
    SinusoidSum,
}

impl SignalKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SignalKind::Zero => "zero",
            SignalKind::UniformRandom => "uniform-random",
            SignalKind::SinusoidSum => "sinusoid-sum",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "zero" => Some(SignalKind::Zero),
            "uniform-random" | "uniform" => Some(SignalKind::UniformRandom),
            "sinusoid-sum" | "sinusoids" => Some(SignalKind::SinusoidSum),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SignalSpec {
    pub kind: SignalKind,
    pub amplitude: f64,
    pub frequencies: Vec<f64>,
    pub seed: u64,
}

impl SignalSpec {
    pub fn zero() -> Self {
        Self {
            kind: SignalKind::Zero,
            amplitude: 0.0,
            frequencies: Vec::new(),
            seed: 0,
        }
    }

    pub fn uniform(amplitude: f64, seed: u64) -> Self {
        Self {
            kind: SignalKind::UniformRandom,
            amplitude,
            frequencies: Vec::new(),
            seed,
        }
    }

    pub fn sinusoids(amplitude: f64, frequencies: Vec<f64>) -> Self {
        Self {
            kind: SignalKind::SinusoidSum,
            amplitude,
            frequencies,
            seed: 0,
        }
    }

    /// Five-tone probing signal with amplitude 0.1.
    pub fn default_probing() -> Self {
        Self::sinusoids(0.1, DEFAULT_PROBING_FREQUENCIES.to_vec())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.amplitude.is_finite() && self.amplitude >= 0.0) {
            return Err(invalid(format!(
                "signal amplitude must be >= 0, got {}",
                self.amplitude
            )));
        }
        if self.kind == SignalKind::SinusoidSum {
            if self.frequencies.is_empty() {
                return Err(invalid("sinusoid-sum needs at least one frequency"));
            }
            for (i, w) in self.frequencies.iter().enumerate() {
                if !(w.is_finite() && *w > 0.0) {
                    return Err(invalid(format!("frequency {w} must be positive")));
                }
                if self.frequencies[..i].contains(w) {
                    return Err(invalid(format!("frequency {w} appears twice")));
                }
            }
        }
        Ok(())
    }

    pub fn is_zero(&self) -> bool {
        self.kind == SignalKind::Zero || self.amplitude == 0.0
    }

    /// Signal value of dimension `dim` at time `t`. `step` is the index of
    /// the integration step containing `t`; random signals are held over a step.
    pub fn sample(&self, dim: usize, t: f64, step: u64) -> Vector {
        match self.kind {
            SignalKind::Zero => Vector::zeros(dim),
            SignalKind::UniformRandom => Vector::from_iterator(
                dim,
                (0..dim).map(|j| {
                    let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                    rng.set_stream(j as u64);
                    rng.set_word_pos(2 * step as u128);
                    self.amplitude * rng.random::<f64>()
                }),
            ),
            SignalKind::SinusoidSum => Vector::from_iterator(
                dim,
                (0..dim).map(|j| {
                    self.frequencies
                        .iter()
                        .enumerate()
                        .map(|(k, w)| (w * t + 0.7 * (j * (k + 1)) as f64).sin())
                        .sum::<f64>()
                        * self.amplitude
                }),
            ),
        }
    }
}

/// Signal value at time `t`; see [`SignalSpec::sample`].
pub fn gen_signal(spec: &SignalSpec, dim: usize, t: f64, step: u64) -> Vector {
    spec.sample(dim, t, step)
}

/// One classical RK4 step of `dx/dt = Ax + Bu + Dd` with `u`, `d` held.
pub fn step_rk4(sys: &SystemDynamics, x: &Vector, u: &Vector, d: &Vector, h: f64) -> Result<Vector> {
    check_step_inputs(sys, x, u, d, h)?;
    let f = |y: &Vector| sys.derivative(y, u, d);
    let k1 = f(x);
    let k2 = f(&(x + &k1 * (h / 2.0)));
    let k3 = f(&(x + &k2 * (h / 2.0)));
    let k4 = f(&(x + &k3 * h));
    let next = x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
    finite_or_fail(next)
}

/// One RK4 step of the feedback loop `u = -K x + e(t)`, with the probing
/// signal evaluated at the stage times and the disturbance held.
pub fn step_rk4_feedback(
    sys: &SystemDynamics,
    gain: &Mat,
    x: &Vector,
    t: f64,
    h: f64,
    probe: impl Fn(f64) -> Vector,
    d: &Vector,
) -> Result<Vector> {
    let f = |tau: f64, y: &Vector| {
        let u = probe(tau) - gain * y;
        sys.derivative(y, &u, d)
    };
    let k1 = f(t, x);
    let k2 = f(t + h / 2.0, &(x + &k1 * (h / 2.0)));
    let k3 = f(t + h / 2.0, &(x + &k2 * (h / 2.0)));
    let k4 = f(t + h, &(x + &k3 * h));
    finite_or_fail(x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0))
}

fn check_step_inputs(sys: &SystemDynamics, x: &Vector, u: &Vector, d: &Vector, h: f64) -> Result<()> {
    if !(h.is_finite() && h > 0.0) {
        return Err(invalid(format!("step size must be positive, got {h}")));
    }
    if x.len() != sys.n() || u.len() != sys.m() || d.len() != sys.z() {
        return Err(invalid("state/input dimensions do not match the dynamics"));
    }
    Ok(())
}

fn finite_or_fail(x: Vector) -> Result<Vector> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(x)
    } else {
        Err(Error::NumericFailure("non-finite state after RK4 step".into()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchRole {
    /// Demonstration data; carries the probing-noise integrals.
    Expert,
    /// Data from the learner's own behavior policy.
    Learner,
}

/// Integrals over one data window `[t_start, t_start + T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowRecord {
    pub t_start: f64,
    pub start_state: Vector,
    pub end_state: Vector,
    /// `hat(x(t+T)) - hat(x(t))`.
    pub d_xx: Vector,
    /// Integral of `hat(x)`.
    pub i_xx: Vector,
    /// Integral of `x (x) u`, index `i*m + j` for `x_i u_j`.
    pub i_xu: Vector,
    /// Integral of `x (x) d`, index `i*z + j`.
    pub i_xd: Vector,
    /// Integral of `x (x) e` (expert only).
    pub i_xe: Option<Vector>,
    /// Integral of `hat(u - e)` (expert only).
    pub i_vv: Option<Vector>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataBatch {
    pub role: BatchRole,
    pub n: usize,
    pub m: usize,
    pub z: usize,
    pub t_window: f64,
    pub windows: Vec<WindowRecord>,
}

/// Minimum expert window count for full-rank policy regression.
pub fn min_expert_windows(n: usize, m: usize, z: usize) -> usize {
    sym_len(n) + n * m + n * z
}

/// Minimum learner window count for full-rank weight regression.
pub fn min_learner_windows(n: usize) -> usize {
    sym_len(n)
}

/// Trapezoid accumulator for a single window.
#[derive(Debug, Clone)]
pub struct WindowAccumulator {
    n: usize,
    m: usize,
    z: usize,
    expert: bool,
    t_start: f64,
    start_state: Vector,
    i_xx: Vector,
    i_xu: Vector,
    i_xd: Vector,
    i_xe: Vector,
    i_vv: Vector,
}

/// Samples at one end of an integration step.
#[derive(Debug, Clone, Copy)]
pub struct StepPoint<'a> {
    pub x: &'a Vector,
    pub u: &'a Vector,
    pub e: &'a Vector,
}

impl WindowAccumulator {
    pub fn new(role: BatchRole, m: usize, z: usize, t_start: f64, start_state: Vector) -> Self {
        let n = start_state.len();
        Self {
            n,
            m,
            z,
            expert: role == BatchRole::Expert,
            t_start,
            start_state,
            i_xx: Vector::zeros(sym_len(n)),
            i_xu: Vector::zeros(n * m),
            i_xd: Vector::zeros(n * z),
            i_xe: Vector::zeros(n * m),
            i_vv: Vector::zeros(sym_len(m)),
        }
    }

    /// Adds the trapezoid contribution of one step of length `h`; `d` is
    /// held over the step.
    pub fn push_step(&mut self, a: StepPoint<'_>, b: StepPoint<'_>, d: &Vector, h: f64) {
        let w = h / 2.0;
        self.i_xx += (hat_vec_unchecked(a.x.as_slice()) + hat_vec_unchecked(b.x.as_slice())) * w;
        for i in 0..self.n {
            for j in 0..self.m {
                self.i_xu[i * self.m + j] += w * (a.x[i] * a.u[j] + b.x[i] * b.u[j]);
                if self.expert {
                    self.i_xe[i * self.m + j] += w * (a.x[i] * a.e[j] + b.x[i] * b.e[j]);
                }
            }
            for j in 0..self.z {
                self.i_xd[i * self.z + j] += w * (a.x[i] + b.x[i]) * d[j];
            }
        }
        if self.expert {
            let va = a.u - a.e;
            let vb = b.u - b.e;
            self.i_vv += (hat_vec_unchecked(va.as_slice()) + hat_vec_unchecked(vb.as_slice())) * w;
        }
    }

    pub fn finish(self, end_state: Vector) -> WindowRecord {
        let d_xx = hat_vec_unchecked(end_state.as_slice()) - hat_vec_unchecked(self.start_state.as_slice());
        WindowRecord {
            t_start: self.t_start,
            start_state: self.start_state,
            end_state,
            d_xx,
            i_xx: self.i_xx,
            i_xu: self.i_xu,
            i_xd: self.i_xd,
            i_xe: self.expert.then_some(self.i_xe),
            i_vv: self.expert.then_some(self.i_vv),
        }
    }
}

/// Shared knobs of a batch collection run.
#[derive(Debug, Clone, PartialEq)]
pub struct CollectOptions {
    pub t_window: f64,
    pub windows: usize,
    pub h: f64,
    pub x0: Vector,
    pub blowup: f64,
}

impl CollectOptions {
    /// Defaults to `h = T/8` and the standard blow-up bound.
    pub fn new(t_window: f64, windows: usize, x0: Vector) -> Self {
        Self {
            t_window,
            windows,
            h: t_window / 8.0,
            x0,
            blowup: DEFAULT_BLOWUP,
        }
    }

    fn steps_per_window(&self) -> Result<usize> {
        if !(self.t_window.is_finite() && self.t_window > 0.0) {
            return Err(invalid("window length must be positive"));
        }
        if !(self.h.is_finite() && self.h > 0.0) {
            return Err(invalid("step size must be positive"));
        }
        let steps = (self.t_window / self.h).round();
        if steps < 1.0 || (steps * self.h - self.t_window).abs() > 1e-9 * self.t_window {
            return Err(invalid(format!(
                "window length {} is not an integer multiple of the step {}",
                self.t_window, self.h
            )));
        }
        Ok(steps as usize)
    }
}

/// Simulates the expert loop `u_T = -K_T x_T + e` and records windows.
pub fn collect_expert_batch(
    sys: &SystemDynamics,
    k_t: &Mat,
    noise: &SignalSpec,
    dist: &SignalSpec,
    opts: &CollectOptions,
) -> Result<DataBatch> {
    let need = min_expert_windows(sys.n(), sys.m(), sys.z());
    if opts.windows < need {
        return Err(invalid(format!(
            "expert batch needs at least {need} windows, got {}",
            opts.windows
        )));
    }
    collect(BatchRole::Expert, sys, k_t, noise, dist, opts)
}

/// Simulates the learner under its behavior policy `u = -K_b x`.
pub fn collect_learner_batch(
    sys: &SystemDynamics,
    k_b: &Mat,
    dist: &SignalSpec,
    opts: &CollectOptions,
) -> Result<DataBatch> {
    let need = min_learner_windows(sys.n());
    if opts.windows < need {
        return Err(invalid(format!(
            "learner batch needs at least {need} windows, got {}",
            opts.windows
        )));
    }
    check_gain(sys, k_b)?;
    if !is_hurwitz(&sys.closed_loop(k_b)) {
        return Err(Error::StabilityViolation(
            "behavior gain does not stabilize the learner".into(),
        ));
    }
    collect(BatchRole::Learner, sys, k_b, &SignalSpec::zero(), dist, opts)
}

fn check_gain(sys: &SystemDynamics, k: &Mat) -> Result<()> {
    if k.shape() != (sys.m(), sys.n()) {
        return Err(invalid(format!("gain must be {}x{}", sys.m(), sys.n())));
    }
    Ok(())
}

fn collect(
    role: BatchRole,
    sys: &SystemDynamics,
    gain: &Mat,
    noise: &SignalSpec,
    dist: &SignalSpec,
    opts: &CollectOptions,
) -> Result<DataBatch> {
    check_gain(sys, gain)?;
    noise.validate()?;
    dist.validate()?;
    if opts.x0.len() != sys.n() {
        return Err(invalid("initial state has the wrong dimension"));
    }
    let steps = opts.steps_per_window()?;
    let (m, z) = (sys.m(), sys.z());
    let h = opts.h;

    let mut windows = Vec::with_capacity(opts.windows);
    let mut x = opts.x0.clone();
    let mut step: u64 = 0;
    for w in 0..opts.windows {
        let t0 = (w * steps) as f64 * h;
        let mut acc = WindowAccumulator::new(role, m, z, t0, x.clone());
        for s in 0..steps {
            let t = t0 + s as f64 * h;
            let d = dist.sample(z, t, step);
            let probe = |tau: f64| noise.sample(m, tau, step);
            let next = step_rk4_feedback(sys, gain, &x, t, h, probe, &d)?;
            if next.norm() > opts.blowup {
                return Err(Error::Divergence {
                    reason: format!("state norm exceeded {} at t = {:.4}", opts.blowup, t + h),
                    trace: None,
                });
            }
            let (e_a, e_b) = (probe(t), probe(t + h));
            let u_a = &e_a - gain * &x;
            let u_b = &e_b - gain * &next;
            acc.push_step(
                StepPoint {
                    x: &x,
                    u: &u_a,
                    e: &e_a,
                },
                StepPoint {
                    x: &next,
                    u: &u_b,
                    e: &e_b,
                },
                &d,
                h,
            );
            x = next;
            step += 1;
        }
        windows.push(acc.finish(x.clone()));
    }
    Ok(DataBatch {
        role,
        n: sys.n(),
        m,
        z,
        t_window: opts.t_window,
        windows,
    })
}

/// Initial condition of one synthetic window with inputs held constant.
#[derive(Debug, Clone, PartialEq)]
pub struct ExactWindow {
    pub x0: Vector,
    pub e: Vector,
    pub d: Vector,
}

/// Expert batch whose integrals are exact to rounding: each window starts
/// from its own state with constant probing noise and disturbance, and the
/// integrals come from the Van Loan matrix exponential.
pub fn exact_expert_batch(
    sys: &SystemDynamics,
    k_t: &Mat,
    t_window: f64,
    windows: &[ExactWindow],
) -> Result<DataBatch> {
    exact_batch(BatchRole::Expert, sys, k_t, t_window, windows)
}

/// Learner counterpart of [`exact_expert_batch`]; the `e` field is ignored.
pub fn exact_learner_batch(
    sys: &SystemDynamics,
    k_b: &Mat,
    t_window: f64,
    windows: &[ExactWindow],
) -> Result<DataBatch> {
    exact_batch(BatchRole::Learner, sys, k_b, t_window, windows)
}

fn exact_batch(
    role: BatchRole,
    sys: &SystemDynamics,
    gain: &Mat,
    t_window: f64,
    windows: &[ExactWindow],
) -> Result<DataBatch> {
    check_gain(sys, gain)?;
    if !(t_window.is_finite() && t_window > 0.0) {
        return Err(invalid("window length must be positive"));
    }
    let (n, m, z) = (sys.n(), sys.m(), sys.z());
    let big = n + m + z;
    // augmented state [x; e; d] with e and d constant
    let mut drift = Mat::zeros(big, big);
    drift.view_mut((0, 0), (n, n)).copy_from(&sys.closed_loop(gain));
    drift.view_mut((0, n), (n, m)).copy_from(sys.b());
    drift.view_mut((0, n + m), (n, z)).copy_from(sys.d());
    let expert = role == BatchRole::Expert;

    let flow = (&drift * t_window).exp();
    let mut records = Vec::with_capacity(windows.len());
    for (w, win) in windows.iter().enumerate() {
        if win.x0.len() != n || win.d.len() != z || (expert && win.e.len() != m) {
            return Err(invalid(format!("synthetic window {w} has wrong dimensions")));
        }
        let mut z0 = Vector::zeros(big);
        z0.rows_mut(0, n).copy_from(&win.x0);
        if expert {
            z0.rows_mut(n, m).copy_from(&win.e);
        }
        z0.rows_mut(n + m, z).copy_from(&win.d);

        let mut vl = Mat::zeros(2 * big, 2 * big);
        vl.view_mut((0, 0), (big, big)).copy_from(&(-&drift));
        vl.view_mut((0, big), (big, big)).copy_from(&(&z0 * z0.transpose()));
        vl.view_mut((big, big), (big, big)).copy_from(&drift.transpose());
        let ex = (vl * t_window).exp();
        let gram = ex.view((big, big), (big, big)).transpose() * ex.view((0, big), (big, big));
        let gram = crate::matops::symmetrize(&gram);

        let gxx = gram.view((0, 0), (n, n)).into_owned();
        let i_xx = hat_of_gram(&gxx);
        let mut i_xu = Vector::zeros(n * m);
        let mut i_xe = Vector::zeros(n * m);
        let mut i_xd = Vector::zeros(n * z);
        let gxk = &gxx * gain.transpose();
        for i in 0..n {
            for j in 0..m {
                let xe = gram[(i, n + j)];
                i_xe[i * m + j] = xe;
                i_xu[i * m + j] = xe - gxk[(i, j)];
            }
            for j in 0..z {
                i_xd[i * z + j] = gram[(i, n + m + j)];
            }
        }
        let end = (&flow * &z0).rows(0, n).into_owned();
        let d_xx = hat_vec_unchecked(end.as_slice()) - hat_vec_unchecked(win.x0.as_slice());
        records.push(WindowRecord {
            t_start: w as f64 * t_window,
            start_state: win.x0.clone(),
            end_state: end,
            d_xx,
            i_xx,
            i_xu,
            i_xd,
            i_xe: expert.then_some(i_xe),
            i_vv: expert.then(|| hat_of_gram(&(gain * &gxx * gain.transpose()))),
        });
    }
    Ok(DataBatch {
        role,
        n,
        m,
        z,
        t_window,
        windows: records,
    })
}

/// `integral hat(v)` from `integral v v'`.
fn hat_of_gram(g: &Mat) -> Vector {
    let n = g.nrows();
    let mut out = Vector::zeros(sym_len(n));
    let mut idx = 0;
    for i in 0..n {
        for j in i..n {
            out[idx] = if i == j { g[(i, i)] } else { 2.0 * g[(i, j)] };
            idx += 1;
        }
    }
    out
}

impl DataBatch {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    /// Checks dimensions and the `d_xx = hat(end) - hat(start)` bookkeeping.
    pub fn validate(&self) -> Result<()> {
        let (n, m, z) = (self.n, self.m, self.z);
        let expert = self.role == BatchRole::Expert;
        for (w, rec) in self.windows.iter().enumerate() {
            let dims_ok = rec.start_state.len() == n
                && rec.end_state.len() == n
                && rec.d_xx.len() == sym_len(n)
                && rec.i_xx.len() == sym_len(n)
                && rec.i_xu.len() == n * m
                && rec.i_xd.len() == n * z
                && rec.i_xe.as_ref().map(|v| v.len() == n * m).unwrap_or(!expert)
                && rec.i_vv.as_ref().map(|v| v.len() == sym_len(m)).unwrap_or(!expert);
            if !dims_ok {
                return Err(invalid(format!("window {w} has inconsistent dimensions")));
            }
            let expect = hat_vec_unchecked(rec.end_state.as_slice()) - hat_vec_unchecked(rec.start_state.as_slice());
            let scale = expect.amax().max(1.0);
            if (&expect - &rec.d_xx).amax() > 1e-12 * scale {
                return Err(invalid(format!("window {w}: d_xx does not match its end states")));
            }
        }
        Ok(())
    }

    fn header(&self) -> Vec<String> {
        let (n, m, z) = (self.n, self.m, self.z);
        let mut cols: Vec<String> = vec!["window".into(), "t_start".into(), "t_window".into()];
        let mut push = |prefix: &str, len: usize| cols.extend((1..=len).map(|i| format!("{prefix}_{i}")));
        push("x0", n);
        push("x1", n);
        push("dxx", sym_len(n));
        push("ixx", sym_len(n));
        push("ixu", n * m);
        push("ixd", n * z);
        if self.role == BatchRole::Expert {
            push("ixe", n * m);
            push("ivv", sym_len(m));
        }
        cols
    }

    /// Writes one row per window; floats carry 17 significant digits.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        wtr.write_record(self.header())?;
        for (w, rec) in self.windows.iter().enumerate() {
            let mut row = vec![w.to_string(), fmt_f64(rec.t_start), fmt_f64(self.t_window)];
            let vectors = [
                Some(&rec.start_state),
                Some(&rec.end_state),
                Some(&rec.d_xx),
                Some(&rec.i_xx),
                Some(&rec.i_xu),
                Some(&rec.i_xd),
                rec.i_xe.as_ref(),
                rec.i_vv.as_ref(),
            ];
            for v in vectors.into_iter().flatten() {
                row.extend(v.iter().map(|x| fmt_f64(*x)));
            }
            wtr.write_record(&row)?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// Reads a batch written by [`DataBatch::write_csv`] or an external recorder.
    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(input);
        let headers = rdr.headers()?.clone();
        let count = |prefix: &str| headers.iter().filter(|h| is_indexed_column(h, prefix)).count();
        let n = count("x0");
        if n == 0 || count("x1") != n {
            return Err(Error::Csv("batch header must name x0_* and x1_* columns".into()));
        }
        let nn = count("dxx");
        if sym_dim(nn) != Some(n) || count("ixx") != nn {
            return Err(Error::Csv(
                "dxx/ixx column counts do not match the state dimension".into(),
            ));
        }
        let nm = count("ixu");
        if nm == 0 || nm % n != 0 {
            return Err(Error::Csv("ixu column count must be a positive multiple of n".into()));
        }
        let m = nm / n;
        let nz = count("ixd");
        if nz % n != 0 {
            return Err(Error::Csv("ixd column count must be a multiple of n".into()));
        }
        let z = nz / n;
        let expert = count("ixe") > 0;
        if expert && (count("ixe") != nm || count("ivv") != sym_len(m)) {
            return Err(Error::Csv("ixe/ivv column counts do not match".into()));
        }
        let expected_cols = 3 + 2 * n + 2 * nn + nm + nz + if expert { nm + sym_len(m) } else { 0 };
        if headers.len() != expected_cols {
            return Err(Error::Csv(format!(
                "expected {expected_cols} columns, found {}",
                headers.len()
            )));
        }

        let mut windows = Vec::new();
        let mut t_window = None;
        for (line, row) in rdr.records().enumerate() {
            let row = row?;
            let vals: Vec<f64> = row
                .iter()
                .skip(1)
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Csv(format!("row {}: {e}", line + 2)))?;
            let mut it = vals.into_iter();
            let t_start = it.next().unwrap_or_default();
            let tw = it.next().unwrap_or_default();
            match t_window {
                None => t_window = Some(tw),
                Some(prev) if prev != tw => {
                    return Err(Error::Csv(format!(
                        "row {}: window length changes within the batch",
                        line + 2
                    )))
                }
                _ => {}
            }
            let mut take = |len: usize| Vector::from_iterator(len, it.by_ref().take(len));
            let start_state = take(n);
            let end_state = take(n);
            let d_xx = take(nn);
            let i_xx = take(nn);
            let i_xu = take(nm);
            let i_xd = take(nz);
            let (i_xe, i_vv) = if expert {
                (Some(take(nm)), Some(take(sym_len(m))))
            } else {
                (None, None)
            };
            windows.push(WindowRecord {
                t_start,
                start_state,
                end_state,
                d_xx,
                i_xx,
                i_xu,
                i_xd,
                i_xe,
                i_vv,
            });
        }
        let batch = DataBatch {
            role: if expert { BatchRole::Expert } else { BatchRole::Learner },
            n,
            m,
            z,
            t_window: t_window.ok_or_else(|| Error::Csv("batch has no windows".into()))?,
            windows,
        };
        batch.validate()?;
        Ok(batch)
    }
}

/// True for headers of the form `{prefix}_{index}`.
pub(crate) fn is_indexed_column(header: &str, prefix: &str) -> bool {
    header
        .strip_prefix(prefix)
        .and_then(|r| r.strip_prefix('_'))
        .is_some_and(|idx| !idx.is_empty() && idx.bytes().all(|b| b.is_ascii_digit()))
}

/// Formats with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}
