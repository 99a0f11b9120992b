//! C ABI over the `gameirl` library.
//!
//! Objects cross the boundary as opaque handles created by `*_new`/`*_load`
//! and released by the matching `*_free`. Matrices are row-major `double`
//! buffers. Every fallible call returns a status code; on failure
//! `gameirl_last_error_message` describes the error for the calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use gameirl::data_driven::run_algorithm2;
use gameirl::matops::{solve_gare, solve_lyapunov};
use gameirl::model_based::{run_algorithm1, IrlConfig, IterationTrace};
use gameirl::scenario::{load_config, run_scenario, ScenarioConfig};
use gameirl::sim::DataBatch;
use gameirl::verify::imitation_error;
use gameirl::{CostWeights, Error, Mat, SystemDynamics, Vector};

pub const GAMEIRL_OK: i32 = 0;
pub const GAMEIRL_INVALID_ARGUMENT: i32 = 1;
pub const GAMEIRL_STABILITY: i32 = 2;
pub const GAMEIRL_NUMERIC: i32 = 3;
pub const GAMEIRL_NO_SOLUTION: i32 = 4;
pub const GAMEIRL_RANK_DEFICIENT: i32 = 5;
pub const GAMEIRL_DIVERGENCE: i32 = 6;
pub const GAMEIRL_IO: i32 = 7;
pub const GAMEIRL_CONFIG: i32 = 8;
pub const GAMEIRL_NULL_POINTER: i32 = 9;
pub const GAMEIRL_PANIC: i32 = 10;

/// Plant `dx/dt = A x + B u + D d`.
pub struct GameirlSystem(SystemDynamics);

/// Window integrals of one agent.
pub struct GameirlBatch(DataBatch);

/// Iteration history of an inverse run.
pub struct GameirlTrace(IterationTrace);

/// Loaded experiment scenario.
pub struct GameirlScenario(ScenarioConfig);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

enum Failure {
    Lib(Error),
    Null(&'static str),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Lib(Error::Io(e))
    }
}

fn status_of(e: &Error) -> i32 {
    match e {
        Error::InvalidArgument(_) => GAMEIRL_INVALID_ARGUMENT,
        Error::StabilityViolation(_) => GAMEIRL_STABILITY,
        Error::NumericFailure(_) => GAMEIRL_NUMERIC,
        Error::NoSolution(_) => GAMEIRL_NO_SOLUTION,
        Error::RankDeficient { .. } => GAMEIRL_RANK_DEFICIENT,
        Error::Divergence { .. } => GAMEIRL_DIVERGENCE,
        Error::Config(_) => GAMEIRL_CONFIG,
        Error::Csv(_) | Error::Io(_) => GAMEIRL_IO,
    }
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> i32 {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            GAMEIRL_OK
        }
        Ok(Err(Failure::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            GAMEIRL_NULL_POINTER
        }
        Err(_) => {
            set_error("internal panic".into());
            GAMEIRL_PANIC
        }
    }
}

/// # Safety
/// `p` must be null or valid for `rows * cols` reads.
unsafe fn read_mat(p: *const f64, rows: usize, cols: usize, what: &'static str) -> Result<Mat, Failure> {
    if rows * cols == 0 {
        return Ok(Mat::zeros(rows, cols));
    }
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    let s = std::slice::from_raw_parts(p, rows * cols);
    Ok(Mat::from_row_slice(rows, cols, s))
}

/// # Safety
/// `p` must be null or valid for `m.len()` writes.
unsafe fn write_mat(p: *mut f64, m: &Mat, what: &'static str) -> Result<(), Failure> {
    if m.is_empty() {
        return Ok(());
    }
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    let out = std::slice::from_raw_parts_mut(p, m.len());
    for (i, row) in m.row_iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            out[i * m.ncols() + j] = *v;
        }
    }
    Ok(())
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(Failure::Null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::Lib(Error::InvalidArgument("path is not valid UTF-8".into())))?;
    Ok(PathBuf::from(s))
}

unsafe fn handle<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or(Failure::Null(what))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure::Null("out"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call into this library.
#[no_mangle]
pub extern "C" fn gameirl_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Creates a plant from row-major `A` (n x n), `B` (n x m), `D` (n x z).
///
/// # Safety
/// Buffers must hold the stated number of doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gameirl_system_new(
    a: *const f64,
    b: *const f64,
    d: *const f64,
    n: usize,
    m: usize,
    z: usize,
    out: *mut *mut GameirlSystem,
) -> i32 {
    guard(|| {
        let sys = SystemDynamics::new(
            read_mat(a, n, n, "A")?,
            read_mat(b, n, m, "B")?,
            read_mat(d, n, z, "D")?,
        )?;
        put(out, GameirlSystem(sys))
    })
}

/// # Safety
/// `sys` must be null or a handle from `gameirl_system_new` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn gameirl_system_free(sys: *mut GameirlSystem) {
    if !sys.is_null() {
        drop(Box::from_raw(sys));
    }
}

/// Solves the game Riccati equation for `(Q, R, gamma)`. Writes `P` (n x n),
/// `K` (m x n) and `L` (z x n).
///
/// # Safety
/// Input buffers must hold n*n and m*m doubles; outputs must be writable for
/// n*n, m*n and z*n doubles.
#[no_mangle]
pub unsafe extern "C" fn gameirl_solve_gare(
    sys: *const GameirlSystem,
    q: *const f64,
    r: *const f64,
    gamma: f64,
    p_out: *mut f64,
    k_out: *mut f64,
    l_out: *mut f64,
) -> i32 {
    guard(|| {
        let sys = &handle(sys, "sys")?.0;
        let (n, m) = (sys.n(), sys.m());
        let w = CostWeights::new(read_mat(q, n, n, "Q")?, read_mat(r, m, m, "R")?, gamma)?;
        let sol = solve_gare(sys, &w)?;
        write_mat(p_out, &sol.p, "P")?;
        write_mat(k_out, &sol.k, "K")?;
        write_mat(l_out, &sol.l, "L")
    })
}

/// Solves `A'P + PA + M = 0` for a Hurwitz `A` and symmetric `M`.
///
/// # Safety
/// `a` and `m` must hold n*n doubles; `p_out` must be writable for n*n.
#[no_mangle]
pub unsafe extern "C" fn gameirl_solve_lyapunov(a: *const f64, m: *const f64, n: usize, p_out: *mut f64) -> i32 {
    guard(|| {
        let p = solve_lyapunov(&read_mat(a, n, n, "A")?, &read_mat(m, n, n, "M")?)?;
        write_mat(p_out, &p, "P")
    })
}

/// Reads a batch CSV.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gameirl_batch_read_csv(path: *const c_char, out: *mut *mut GameirlBatch) -> i32 {
    guard(|| {
        let file = File::open(path_arg(path)?)?;
        let batch = DataBatch::read_csv(BufReader::new(file))?;
        put(out, GameirlBatch(batch))
    })
}

/// # Safety
/// `batch` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn gameirl_batch_write_csv(batch: *const GameirlBatch, path: *const c_char) -> i32 {
    guard(|| {
        let batch = &handle(batch, "batch")?.0;
        let file = File::create(path_arg(path)?)?;
        Ok(batch.write_csv(BufWriter::new(file))?)
    })
}

/// Number of windows, or 0 for a null handle.
///
/// # Safety
/// `batch` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn gameirl_batch_len(batch: *const GameirlBatch) -> usize {
    batch.as_ref().map(|b| b.0.len()).unwrap_or(0)
}

/// # Safety
/// `batch` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn gameirl_batch_free(batch: *mut GameirlBatch) {
    if !batch.is_null() {
        drop(Box::from_raw(batch));
    }
}

unsafe fn irl_config(
    n: usize,
    m: usize,
    r: *const f64,
    gamma: f64,
    q0: *const f64,
    max_iters: usize,
    tol: f64,
) -> Result<IrlConfig, Failure> {
    let cfg = IrlConfig::new(read_mat(r, m, m, "R")?, gamma, read_mat(q0, n, n, "Q0")?)?
        .with_max_iters(max_iters)
        .with_tol(tol);
    cfg.validate()?;
    Ok(cfg)
}

/// Model-based inverse iteration against the target gain `k_t` (m x n).
///
/// # Safety
/// `sys` must be a live handle; `k_t`, `r`, `q0` must hold m*n, m*m and n*n
/// doubles; `out` must be writable.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn gameirl_run_algorithm1(
    sys: *const GameirlSystem,
    k_t: *const f64,
    r: *const f64,
    gamma: f64,
    q0: *const f64,
    max_iters: usize,
    tol: f64,
    out: *mut *mut GameirlTrace,
) -> i32 {
    guard(|| {
        let sys = &handle(sys, "sys")?.0;
        let (n, m) = (sys.n(), sys.m());
        let cfg = irl_config(n, m, r, gamma, q0, max_iters, tol)?;
        let trace = run_algorithm1(sys, &read_mat(k_t, m, n, "K_T")?, &cfg)?;
        put(out, GameirlTrace(trace))
    })
}

/// Data-driven inverse iteration on an expert and a learner batch.
///
/// # Safety
/// Handles must be live; `r` and `q0` must hold m*m and n*n doubles;
/// `out` must be writable.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn gameirl_run_algorithm2(
    expert: *const GameirlBatch,
    learner: *const GameirlBatch,
    r: *const f64,
    gamma: f64,
    q0: *const f64,
    max_iters: usize,
    tol: f64,
    out: *mut *mut GameirlTrace,
) -> i32 {
    guard(|| {
        let expert = &handle(expert, "expert")?.0;
        let learner = &handle(learner, "learner")?.0;
        let cfg = irl_config(expert.n, expert.m, r, gamma, q0, max_iters, tol)?;
        let trace = run_algorithm2(expert, learner, &cfg)?;
        put(out, GameirlTrace(trace))
    })
}

/// Number of records, or 0 for a null handle.
///
/// # Safety
/// `trace` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn gameirl_trace_len(trace: *const GameirlTrace) -> usize {
    trace.as_ref().map(|t| t.0.records.len()).unwrap_or(0)
}

/// 1 if the stopping rule was met, 0 otherwise (also for null).
///
/// # Safety
/// `trace` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn gameirl_trace_converged(trace: *const GameirlTrace) -> i32 {
    trace.as_ref().map(|t| t.0.converged as i32).unwrap_or(0)
}

/// Copies `K`, `P` and `Q^(i+1)` of record `index` into caller buffers
/// (m*n, n*n, n*n doubles). Any output may be null to skip it.
///
/// # Safety
/// `trace` must be a live handle; non-null outputs must be large enough.
#[no_mangle]
pub unsafe extern "C" fn gameirl_trace_record(
    trace: *const GameirlTrace,
    index: usize,
    k_out: *mut f64,
    p_out: *mut f64,
    q_out: *mut f64,
) -> i32 {
    guard(|| {
        let t = &handle(trace, "trace")?.0;
        let rec = t.records.get(index).ok_or_else(|| {
            Error::InvalidArgument(format!("record {index} out of range ({} records)", t.records.len()))
        })?;
        for (ptr, m) in [(k_out, &rec.k), (p_out, &rec.p), (q_out, &rec.q_next)] {
            if !ptr.is_null() {
                write_mat(ptr, m, "output")?;
            }
        }
        Ok(())
    })
}

/// # Safety
/// `trace` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn gameirl_trace_write_csv(trace: *const GameirlTrace, path: *const c_char) -> i32 {
    guard(|| {
        let t = &handle(trace, "trace")?.0;
        let file = File::create(path_arg(path)?)?;
        Ok(t.write_csv(BufWriter::new(file))?)
    })
}

/// # Safety
/// `trace` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn gameirl_trace_free(trace: *mut GameirlTrace) {
    if !trace.is_null() {
        drop(Box::from_raw(trace));
    }
}

/// Imitation index over `samples` states of dimension `n`, stored row by row.
///
/// # Safety
/// Both buffers must hold `samples * n` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gameirl_imitation_error(
    learner: *const f64,
    target: *const f64,
    samples: usize,
    n: usize,
    out: *mut f64,
) -> i32 {
    guard(|| {
        let rows = |m: Mat| -> Vec<Vector> { m.row_iter().map(|r| r.transpose()).collect() };
        let a = rows(read_mat(learner, samples, n, "learner")?);
        let b = rows(read_mat(target, samples, n, "target")?);
        let te = imitation_error(&a, &b)?;
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        *out = te;
        Ok(())
    })
}

/// Loads and validates a scenario file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gameirl_scenario_load(path: *const c_char, out: *mut *mut GameirlScenario) -> i32 {
    guard(|| put(out, GameirlScenario(load_config(path_arg(path)?)?)))
}

/// Redirects all artifacts of the scenario to `dir`.
///
/// # Safety
/// `scenario` must be a live handle and `dir` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn gameirl_scenario_set_output_dir(scenario: *mut GameirlScenario, dir: *const c_char) -> i32 {
    guard(|| {
        let s = scenario.as_mut().ok_or(Failure::Null("scenario"))?;
        s.0.output_dir = path_arg(dir)?;
        Ok(())
    })
}

/// Runs the scenario and writes its artifacts. `passed_out`, if non-null,
/// receives 1 when every run converged and every required check passed.
///
/// # Safety
/// `scenario` must be a live handle; `passed_out` null or writable.
#[no_mangle]
pub unsafe extern "C" fn gameirl_scenario_run(scenario: *const GameirlScenario, passed_out: *mut i32) -> i32 {
    guard(|| {
        let s = &handle(scenario, "scenario")?.0;
        let artifacts = run_scenario(s)?;
        if !passed_out.is_null() {
            *passed_out = artifacts.passed() as i32;
        }
        Ok(())
    })
}

/// Simulates the scenario's expert and learner and returns both batches.
///
/// # Safety
/// `scenario` must be a live handle; both outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn gameirl_scenario_collect(
    scenario: *const GameirlScenario,
    expert_out: *mut *mut GameirlBatch,
    learner_out: *mut *mut GameirlBatch,
) -> i32 {
    guard(|| {
        let s = &handle(scenario, "scenario")?.0;
        if expert_out.is_null() || learner_out.is_null() {
            return Err(Failure::Null("out"));
        }
        let (k_t, _) = s.expert_gain()?;
        let (expert, learner) = s.collect(&k_t)?;
        put(expert_out, GameirlBatch(expert))?;
        put(learner_out, GameirlBatch(learner))
    })
}

/// # Safety
/// `scenario` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn gameirl_scenario_free(scenario: *mut GameirlScenario) {
    if !scenario.is_null() {
        drop(Box::from_raw(scenario));
    }
}
