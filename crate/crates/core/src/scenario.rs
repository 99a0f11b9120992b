//! Config-driven experiment pipeline: load a scenario, collect data, run
//! the inverse iterations, replay the learned controller and verify.
//!
//! Configs are TOML with dotted keys:
//!
//! ```toml
//! name = "demo"
//! dynamics.A = [[-1.0, 2.0], [2.2, 1.7]]
//! dynamics.B = [[0.0], [3.0]]
//! dynamics.D = [[1.0], [0.0]]
//! expert.Q = [[8.0, 0.0], [0.0, 12.0]]
//! expert.R = 2.0
//! expert.gamma = 3.0
//! learner.Q0 = [[1.0, 0.0], [0.0, 0.5]]
//! learner.R = 1.0
//! learner.gamma = 40.0
//! learner.K_b = [1.2129, 2.2812]
//! ```
//!
//! A 1-D array is read as a row vector and a scalar as a 1x1 matrix.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use toml::{Table, Value};

use crate::data_driven::{check_rank, run_algorithm2_with_reference, RankReport};
use crate::error::{Error, Result};
use crate::matops::{gare_residual, is_hurwitz, min_eigenvalue, solve_gare, EPS_PSD};
use crate::model_based::{
    run_algorithm1, IrlConfig, IterationTrace, Reference, DEFAULT_MAX_ITERS, DEFAULT_TOL_CONVERGE,
};
use crate::sim::{
    collect_expert_batch, collect_learner_batch, fmt_f64, step_rk4_feedback, CollectOptions, DataBatch, SignalKind,
    SignalSpec, DEFAULT_BLOWUP, DEFAULT_PROBING_FREQUENCIES,
};
use crate::system::{is_spd, CostWeights, GameSolution, Mat, SystemDynamics, Vector};
use crate::verify::{
    imitation_error, nonuniqueness_residual, saddle_check, theorem1_residual, LearnedGame, TargetGame,
    VerificationReport,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algorithm {
    Alg1,
    Alg2,
    Both,
}

impl Algorithm {
    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::Alg1 => "alg1",
            Algorithm::Alg2 => "alg2",
            Algorithm::Both => "both",
        }
    }

    fn runs_alg1(self) -> bool {
        matches!(self, Algorithm::Alg1 | Algorithm::Both)
    }

    fn runs_alg2(self) -> bool {
        matches!(self, Algorithm::Alg2 | Algorithm::Both)
    }
}

/// Source of the expert's gain.
#[derive(Debug, Clone, PartialEq)]
pub enum ExpertSpec {
    /// Weights of the expert game; the gain comes from the GARE.
    Weights(CostWeights),
    /// A gain given directly.
    Gain(Mat),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LearnerSpec {
    pub q0: Mat,
    pub r: Mat,
    pub gamma: f64,
    /// Behavior gain for learner data; needed only by the data-driven run.
    pub k_b: Option<Mat>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataSpec {
    pub t_window: f64,
    pub expert_windows: usize,
    pub learner_windows: usize,
    pub h: f64,
    pub x0: Vector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub algorithm: Algorithm,
    pub max_iters: usize,
    /// Stopping tolerance of the model-based run.
    pub tol_converge: f64,
    /// Stopping tolerance of the data-driven run.
    pub alg2_tol_converge: f64,
    /// Gain-error threshold tracked for the model-based run.
    pub gain_tol: f64,
    /// Number of sampling instants `a` in the replay.
    pub replay_samples: usize,
    pub saddle_samples: usize,
    pub saddle_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifySpec {
    pub alg2_gain_tol: f64,
    /// Residual tolerance for results learned from data.
    pub data_residual_tol: f64,
    /// Residual tolerance for results of the model-based run.
    pub model_residual_tol: f64,
    pub te_tol: f64,
    /// Minimum Frobenius distance between learned and target weights.
    pub distinct_min: f64,
    /// Tolerance of the non-uniqueness relations on learned results.
    pub nonuniqueness_tol: f64,
    /// Slack for monotonicity on data-driven iterates.
    pub eps_noise: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub name: String,
    pub dynamics: SystemDynamics,
    pub expert: ExpertSpec,
    pub learner: LearnerSpec,
    pub data: DataSpec,
    pub noise: SignalSpec,
    pub expert_disturbance: SignalSpec,
    pub learner_disturbance: SignalSpec,
    pub run: RunSpec,
    pub verify: VerifySpec,
    pub output_dir: PathBuf,
}

const KNOWN_KEYS: &[&str] = &[
    "name",
    "dynamics.A",
    "dynamics.B",
    "dynamics.D",
    "expert.Q",
    "expert.R",
    "expert.gamma",
    "expert.K",
    "learner.Q0",
    "learner.R",
    "learner.gamma",
    "learner.K_b",
    "data.T",
    "data.expert_windows",
    "data.learner_windows",
    "data.h",
    "data.x0",
    "noise.kind",
    "noise.amplitude",
    "noise.frequencies",
    "noise.seed",
    "expert_disturbance.kind",
    "expert_disturbance.amplitude",
    "expert_disturbance.frequencies",
    "expert_disturbance.seed",
    "learner_disturbance.kind",
    "learner_disturbance.amplitude",
    "learner_disturbance.frequencies",
    "learner_disturbance.seed",
    "run.algorithm",
    "run.max_iters",
    "run.tol_converge",
    "run.alg2_tol_converge",
    "run.gain_tol",
    "run.replay_samples",
    "run.saddle_samples",
    "run.saddle_seed",
    "verify.alg2_gain_tol",
    "verify.data_residual_tol",
    "verify.model_residual_tol",
    "verify.te_tol",
    "verify.distinct_min",
    "verify.nonuniqueness_tol",
    "verify.eps_noise",
    "output.dir",
];

fn cfg_err(field: &str, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("{field}: {msg}"))
}

fn leaf_keys(table: &Table, prefix: &str, out: &mut Vec<String>) {
    for (k, v) in table {
        let path = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match v {
            Value::Table(t) => leaf_keys(t, &path, out),
            _ => out.push(path),
        }
    }
}

struct Doc<'a> {
    root: &'a Table,
}

impl<'a> Doc<'a> {
    fn get(&self, path: &str) -> Option<&'a Value> {
        let mut parts = path.split('.');
        let mut cur = self.root.get(parts.next()?)?;
        for p in parts {
            cur = cur.as_table()?.get(p)?;
        }
        Some(cur)
    }

    fn float(&self, path: &str) -> Result<Option<f64>> {
        self.get(path)
            .map(|v| as_float(v).ok_or_else(|| cfg_err(path, "expected a number")))
            .transpose()
    }

    fn float_or(&self, path: &str, default: f64) -> Result<f64> {
        Ok(self.float(path)?.unwrap_or(default))
    }

    fn uint(&self, path: &str) -> Result<Option<u64>> {
        self.get(path)
            .map(|v| {
                v.as_integer()
                    .and_then(|i| u64::try_from(i).ok())
                    .ok_or_else(|| cfg_err(path, "expected a non-negative integer"))
            })
            .transpose()
    }

    fn usize_or(&self, path: &str, default: usize) -> Result<usize> {
        Ok(self.uint(path)?.map(|v| v as usize).unwrap_or(default))
    }

    fn string(&self, path: &str) -> Result<Option<&'a str>> {
        self.get(path)
            .map(|v| v.as_str().ok_or_else(|| cfg_err(path, "expected a string")))
            .transpose()
    }

    fn matrix(&self, path: &str) -> Result<Option<Mat>> {
        self.get(path)
            .map(|v| to_matrix(v).map_err(|m| cfg_err(path, m)))
            .transpose()
    }

    fn require_matrix(&self, path: &str) -> Result<Mat> {
        self.matrix(path)?.ok_or_else(|| cfg_err(path, "missing"))
    }

    fn vector(&self, path: &str) -> Result<Option<Vector>> {
        self.get(path)
            .map(|v| {
                let m = to_matrix(v).map_err(|m| cfg_err(path, m))?;
                if m.nrows() == 1 {
                    Ok(Vector::from_iterator(m.ncols(), m.iter().copied()))
                } else if m.ncols() == 1 {
                    Ok(m.column(0).into_owned())
                } else {
                    Err(cfg_err(path, "expected a vector"))
                }
            })
            .transpose()
    }

    fn signal(&self, section: &str, default: SignalSpec) -> Result<SignalSpec> {
        let key = |k: &str| format!("{section}.{k}");
        let mut spec = default;
        if let Some(kind) = self.string(&key("kind"))? {
            spec.kind = SignalKind::parse(kind)
                .ok_or_else(|| cfg_err(&key("kind"), "expected zero, uniform-random or sinusoid-sum"))?;
        }
        if let Some(a) = self.float(&key("amplitude"))? {
            spec.amplitude = a;
        }
        if let Some(f) = self.vector(&key("frequencies"))? {
            spec.frequencies = f.iter().copied().collect();
        }
        if let Some(s) = self.uint(&key("seed"))? {
            spec.seed = s;
        }
        if spec.kind == SignalKind::SinusoidSum && spec.frequencies.is_empty() {
            spec.frequencies = DEFAULT_PROBING_FREQUENCIES.to_vec();
        }
        spec.validate().map_err(|e| cfg_err(section, e))?;
        Ok(spec)
    }
}

fn as_float(v: &Value) -> Option<f64> {
    v.as_float().or_else(|| v.as_integer().map(|i| i as f64))
}

fn to_matrix(v: &Value) -> std::result::Result<Mat, String> {
    if let Some(x) = as_float(v) {
        return Ok(Mat::from_element(1, 1, x));
    }
    let rows = v.as_array().ok_or("expected a number or an array")?;
    if rows.is_empty() {
        return Err("empty array".into());
    }
    if rows.iter().all(|r| as_float(r).is_some()) {
        let vals: Vec<f64> = rows.iter().filter_map(as_float).collect();
        return Ok(Mat::from_row_slice(1, vals.len(), &vals));
    }
    let mut data = Vec::new();
    let mut cols = None;
    for (i, r) in rows.iter().enumerate() {
        let r = r.as_array().ok_or(format!("row {i} is not an array"))?;
        let vals: Vec<f64> = r
            .iter()
            .map(|x| as_float(x).ok_or(format!("row {i} has a non-numeric entry")))
            .collect::<std::result::Result<_, _>>()?;
        match cols {
            None => cols = Some(vals.len()),
            Some(c) if c != vals.len() => return Err(format!("row {i} has {} entries, expected {c}", vals.len())),
            _ => {}
        }
        data.extend(vals);
    }
    Ok(Mat::from_row_slice(rows.len(), cols.unwrap_or(0), &data))
}

fn default_x0(n: usize) -> Vector {
    Vector::from_fn(n, |i, _| if i % 2 == 0 { 1.0 } else { -1.0 })
}

/// Reads and validates a scenario file.
pub fn load_config(path: impl AsRef<Path>) -> Result<ScenarioConfig> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    parse_config(&text)
}

/// Parses and validates a scenario from TOML text.
pub fn parse_config(text: &str) -> Result<ScenarioConfig> {
    let root: Table = text
        .parse()
        .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    let mut keys = Vec::new();
    leaf_keys(&root, "", &mut keys);
    let known: BTreeSet<&str> = KNOWN_KEYS.iter().copied().collect();
    if let Some(bad) = keys.iter().find(|k| !known.contains(k.as_str())) {
        return Err(cfg_err(bad, "unknown key"));
    }
    let doc = Doc { root: &root };

    let name = doc.string("name")?.unwrap_or("scenario").to_string();
    let a = doc.require_matrix("dynamics.A")?;
    let n = a.nrows();
    let b = doc.require_matrix("dynamics.B")?;
    let d = doc.matrix("dynamics.D")?.unwrap_or_else(|| Mat::zeros(n, 1));
    let dynamics = SystemDynamics::new(a, b, d).map_err(|e| cfg_err("dynamics", e))?;
    let m = dynamics.m();

    let spd = |path: &str, mat: Mat, dim: usize| -> Result<Mat> {
        if mat.shape() != (dim, dim) {
            return Err(cfg_err(path, format!("must be {dim}x{dim}")));
        }
        if !is_spd(&mat) {
            return Err(cfg_err(path, "must be symmetric positive definite"));
        }
        Ok(mat)
    };
    let positive = |path: &str, v: Option<f64>| -> Result<f64> {
        let v = v.ok_or_else(|| cfg_err(path, "missing"))?;
        if !(v.is_finite() && v > 0.0) {
            return Err(cfg_err(path, "must be positive"));
        }
        Ok(v)
    };

    let has_weights = ["expert.Q", "expert.R", "expert.gamma"]
        .iter()
        .any(|k| doc.get(k).is_some());
    let expert = match (has_weights, doc.matrix("expert.K")?) {
        (true, Some(_)) => return Err(cfg_err("expert", "give either Q/R/gamma or K, not both")),
        (false, None) => return Err(cfg_err("expert", "give either Q/R/gamma or K")),
        (true, None) => ExpertSpec::Weights(CostWeights {
            q: spd("expert.Q", doc.require_matrix("expert.Q")?, n)?,
            r: spd("expert.R", doc.require_matrix("expert.R")?, m)?,
            gamma: positive("expert.gamma", doc.float("expert.gamma")?)?,
        }),
        (false, Some(k)) => {
            if k.shape() != (m, n) {
                return Err(cfg_err("expert.K", format!("must be {m}x{n}")));
            }
            ExpertSpec::Gain(k)
        }
    };

    let k_b = doc.matrix("learner.K_b")?;
    if let Some(k) = &k_b {
        if k.shape() != (m, n) {
            return Err(cfg_err("learner.K_b", format!("must be {m}x{n}")));
        }
    }
    let learner = LearnerSpec {
        q0: spd("learner.Q0", doc.require_matrix("learner.Q0")?, n)?,
        r: spd("learner.R", doc.require_matrix("learner.R")?, m)?,
        gamma: positive("learner.gamma", doc.float("learner.gamma")?)?,
        k_b,
    };

    let t_window = positive("data.T", Some(doc.float_or("data.T", 0.008)?))?;
    let x0 = doc.vector("data.x0")?.unwrap_or_else(|| default_x0(n));
    if x0.len() != n {
        return Err(cfg_err("data.x0", format!("must have {n} entries")));
    }
    let data = DataSpec {
        t_window,
        expert_windows: doc.usize_or("data.expert_windows", 510)?,
        learner_windows: doc.usize_or("data.learner_windows", 510)?,
        h: positive("data.h", Some(doc.float_or("data.h", t_window / 8.0)?))?,
        x0,
    };
    let steps = (data.t_window / data.h).round();
    if steps < 1.0 || (steps * data.h - data.t_window).abs() > 1e-9 * data.t_window {
        return Err(cfg_err(
            "data.h",
            "window length must be an integer multiple of the step",
        ));
    }

    let noise = doc.signal("noise", SignalSpec::default_probing())?;
    let expert_disturbance = doc.signal("expert_disturbance", SignalSpec::uniform(0.003, 1))?;
    let learner_disturbance = doc.signal("learner_disturbance", SignalSpec::uniform(0.003, 2))?;

    let algorithm = match doc.string("run.algorithm")?.unwrap_or("alg2") {
        "alg1" => Algorithm::Alg1,
        "alg2" => Algorithm::Alg2,
        "both" => Algorithm::Both,
        other => return Err(cfg_err("run.algorithm", format!("unknown algorithm {other:?}"))),
    };
    if algorithm.runs_alg2() && learner.k_b.is_none() {
        return Err(cfg_err("learner.K_b", "required for the data-driven run"));
    }
    let run = RunSpec {
        algorithm,
        max_iters: doc.usize_or("run.max_iters", DEFAULT_MAX_ITERS)?,
        tol_converge: positive(
            "run.tol_converge",
            Some(doc.float_or("run.tol_converge", DEFAULT_TOL_CONVERGE)?),
        )?,
        alg2_tol_converge: positive(
            "run.alg2_tol_converge",
            Some(doc.float_or("run.alg2_tol_converge", DEFAULT_TOL_CONVERGE)?),
        )?,
        gain_tol: positive("run.gain_tol", Some(doc.float_or("run.gain_tol", 0.01)?))?,
        replay_samples: doc.usize_or("run.replay_samples", 250)?,
        saddle_samples: doc.usize_or("run.saddle_samples", 1000)?,
        saddle_seed: doc.uint("run.saddle_seed")?.unwrap_or(7),
    };
    if run.max_iters == 0 {
        return Err(cfg_err("run.max_iters", "must be positive"));
    }
    let verify = VerifySpec {
        alg2_gain_tol: positive(
            "verify.alg2_gain_tol",
            Some(doc.float_or("verify.alg2_gain_tol", 0.02)?),
        )?,
        data_residual_tol: positive(
            "verify.data_residual_tol",
            Some(doc.float_or("verify.data_residual_tol", 1e-4)?),
        )?,
        model_residual_tol: positive(
            "verify.model_residual_tol",
            Some(doc.float_or("verify.model_residual_tol", 1e-6)?),
        )?,
        te_tol: positive("verify.te_tol", Some(doc.float_or("verify.te_tol", 0.05)?))?,
        distinct_min: doc.float_or("verify.distinct_min", 0.1)?,
        nonuniqueness_tol: positive(
            "verify.nonuniqueness_tol",
            Some(doc.float_or("verify.nonuniqueness_tol", 0.05)?),
        )?,
        eps_noise: doc.float_or("verify.eps_noise", 1e-6)?,
    };
    let output_dir = PathBuf::from(
        doc.string("output.dir")?
            .map(String::from)
            .unwrap_or(format!("out/{name}")),
    );

    Ok(ScenarioConfig {
        name,
        dynamics,
        expert,
        learner,
        data,
        noise,
        expert_disturbance,
        learner_disturbance,
        run,
        verify,
        output_dir,
    })
}

fn toml_matrix(m: &Mat) -> String {
    let rows: Vec<String> = m
        .row_iter()
        .map(|r| {
            format!(
                "[{}]",
                r.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(", ")
            )
        })
        .collect();
    format!("[{}]", rows.join(", "))
}

fn toml_vector(v: &[f64]) -> String {
    format!(
        "[{}]",
        v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(", ")
    )
}

impl ScenarioConfig {
    /// Overrides every signal seed: disturbances get `seed` and `seed + 1`,
    /// probing noise `seed + 2`.
    pub fn reseed(&mut self, seed: u64) {
        self.expert_disturbance.seed = seed;
        self.learner_disturbance.seed = seed.wrapping_add(1);
        self.noise.seed = seed.wrapping_add(2);
    }

    /// Emits a config that parses back to `self`.
    pub fn to_toml_string(&self) -> String {
        let mut s = String::new();
        let dy = &self.dynamics;
        let _ = writeln!(s, "name = {:?}", self.name);
        let _ = writeln!(s, "dynamics.A = {}", toml_matrix(dy.a()));
        let _ = writeln!(s, "dynamics.B = {}", toml_matrix(dy.b()));
        let _ = writeln!(s, "dynamics.D = {}", toml_matrix(dy.d()));
        match &self.expert {
            ExpertSpec::Weights(w) => {
                let _ = writeln!(s, "expert.Q = {}", toml_matrix(&w.q));
                let _ = writeln!(s, "expert.R = {}", toml_matrix(&w.r));
                let _ = writeln!(s, "expert.gamma = {:?}", w.gamma);
            }
            ExpertSpec::Gain(k) => {
                let _ = writeln!(s, "expert.K = {}", toml_matrix(k));
            }
        }
        let l = &self.learner;
        let _ = writeln!(s, "learner.Q0 = {}", toml_matrix(&l.q0));
        let _ = writeln!(s, "learner.R = {}", toml_matrix(&l.r));
        let _ = writeln!(s, "learner.gamma = {:?}", l.gamma);
        if let Some(k) = &l.k_b {
            let _ = writeln!(s, "learner.K_b = {}", toml_matrix(k));
        }
        let d = &self.data;
        let _ = writeln!(s, "data.T = {:?}", d.t_window);
        let _ = writeln!(s, "data.expert_windows = {}", d.expert_windows);
        let _ = writeln!(s, "data.learner_windows = {}", d.learner_windows);
        let _ = writeln!(s, "data.h = {:?}", d.h);
        let _ = writeln!(s, "data.x0 = {}", toml_vector(d.x0.as_slice()));
        for (section, spec) in [
            ("noise", &self.noise),
            ("expert_disturbance", &self.expert_disturbance),
            ("learner_disturbance", &self.learner_disturbance),
        ] {
            let _ = writeln!(s, "{section}.kind = {:?}", spec.kind.as_str());
            let _ = writeln!(s, "{section}.amplitude = {:?}", spec.amplitude);
            if !spec.frequencies.is_empty() {
                let _ = writeln!(s, "{section}.frequencies = {}", toml_vector(&spec.frequencies));
            }
            let _ = writeln!(s, "{section}.seed = {}", spec.seed);
        }
        let r = &self.run;
        let _ = writeln!(s, "run.algorithm = {:?}", r.algorithm.as_str());
        let _ = writeln!(s, "run.max_iters = {}", r.max_iters);
        let _ = writeln!(s, "run.tol_converge = {:?}", r.tol_converge);
        let _ = writeln!(s, "run.alg2_tol_converge = {:?}", r.alg2_tol_converge);
        let _ = writeln!(s, "run.gain_tol = {:?}", r.gain_tol);
        let _ = writeln!(s, "run.replay_samples = {}", r.replay_samples);
        let _ = writeln!(s, "run.saddle_samples = {}", r.saddle_samples);
        let _ = writeln!(s, "run.saddle_seed = {}", r.saddle_seed);
        let v = &self.verify;
        let _ = writeln!(s, "verify.alg2_gain_tol = {:?}", v.alg2_gain_tol);
        let _ = writeln!(s, "verify.data_residual_tol = {:?}", v.data_residual_tol);
        let _ = writeln!(s, "verify.model_residual_tol = {:?}", v.model_residual_tol);
        let _ = writeln!(s, "verify.te_tol = {:?}", v.te_tol);
        let _ = writeln!(s, "verify.distinct_min = {:?}", v.distinct_min);
        let _ = writeln!(s, "verify.nonuniqueness_tol = {:?}", v.nonuniqueness_tol);
        let _ = writeln!(s, "verify.eps_noise = {:?}", v.eps_noise);
        let _ = writeln!(s, "output.dir = {:?}", self.output_dir.display().to_string());
        s
    }

    /// Expert gain, together with the expert game solution when weights are given.
    pub fn expert_gain(&self) -> Result<(Mat, Option<GameSolution>)> {
        match &self.expert {
            ExpertSpec::Weights(w) => {
                let sol = solve_gare(&self.dynamics, w)?;
                Ok((sol.k.clone(), Some(sol)))
            }
            ExpertSpec::Gain(k) => Ok((k.clone(), None)),
        }
    }

    pub fn irl_config(&self, tol: f64) -> Result<IrlConfig> {
        Ok(
            IrlConfig::new(self.learner.r.clone(), self.learner.gamma, self.learner.q0.clone())?
                .with_max_iters(self.run.max_iters)
                .with_tol(tol),
        )
    }

    fn collect_options(&self, windows: usize) -> CollectOptions {
        CollectOptions {
            t_window: self.data.t_window,
            windows,
            h: self.data.h,
            x0: self.data.x0.clone(),
            blowup: DEFAULT_BLOWUP,
        }
    }

    /// Expert and learner batches as configured.
    pub fn collect(&self, k_t: &Mat) -> Result<(DataBatch, DataBatch)> {
        let k_b = self
            .learner
            .k_b
            .as_ref()
            .ok_or_else(|| cfg_err("learner.K_b", "required to collect learner data"))?;
        let expert = collect_expert_batch(
            &self.dynamics,
            k_t,
            &self.noise,
            &self.expert_disturbance,
            &self.collect_options(self.data.expert_windows),
        )?;
        let learner = collect_learner_batch(
            &self.dynamics,
            k_b,
            &self.learner_disturbance,
            &self.collect_options(self.data.learner_windows),
        )?;
        Ok((expert, learner))
    }
}

/// States sampled at `t = kT`, `k = 0..=samples`, under `u = -K x` plus a
/// disturbance, without probing noise.
pub fn replay(
    sys: &SystemDynamics,
    gain: &Mat,
    dist: &SignalSpec,
    x0: &Vector,
    t_sample: f64,
    h: f64,
    samples: usize,
) -> Result<Vec<Vector>> {
    let steps = (t_sample / h).round() as usize;
    let zero = Vector::zeros(sys.m());
    let mut out = Vec::with_capacity(samples + 1);
    let mut x = x0.clone();
    out.push(x.clone());
    let mut step = 0u64;
    for k in 0..samples {
        for s in 0..steps {
            let t = (k * steps + s) as f64 * h;
            let d = dist.sample(sys.z(), t, step);
            x = step_rk4_feedback(sys, gain, &x, t, h, |_| zero.clone(), &d)?;
            step += 1;
        }
        out.push(x.clone());
    }
    Ok(out)
}

/// Headline numbers of one algorithm run.
#[derive(Debug, Clone, PartialEq)]
pub struct AlgorithmSummary {
    pub algorithm: &'static str,
    pub converged: bool,
    pub iterations: usize,
    pub linear_solves: usize,
    /// `||K* - K_T||_F` of the final record.
    pub gain_error: f64,
    /// First iteration whose gain error is within the tracked threshold.
    pub first_within: Option<usize>,
    pub within_tol: f64,
    pub imitation_error: f64,
    pub k_star: Mat,
    pub q_star: Mat,
    pub p_star: Mat,
    pub l_star: Mat,
}

/// Learner and expert replays used for the imitation index.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectories {
    pub t: Vec<f64>,
    pub learner: Vec<Vector>,
    pub expert: Vec<Vector>,
}

#[derive(Debug, Clone)]
pub struct AlgorithmRun {
    pub trace: IterationTrace,
    pub summary: AlgorithmSummary,
    pub trajectories: Trajectories,
    pub trace_path: PathBuf,
    pub trajectory_path: PathBuf,
}

/// Everything a scenario run produced.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub name: String,
    pub out_dir: PathBuf,
    pub k_t: Mat,
    pub expert_solution: Option<GameSolution>,
    pub rank: Option<RankReport>,
    pub alg1: Option<AlgorithmRun>,
    pub alg2: Option<AlgorithmRun>,
    pub report: VerificationReport,
    pub report_path: PathBuf,
    pub summary_path: PathBuf,
    pub wall_clock_s: f64,
}

impl RunArtifacts {
    pub fn passed(&self) -> bool {
        self.report.all_passed() && self.runs().all(|r| r.summary.converged)
    }

    pub fn runs(&self) -> impl Iterator<Item = &AlgorithmRun> {
        self.alg1.iter().chain(self.alg2.iter())
    }

    /// Data-driven run if present, otherwise the model-based one.
    pub fn primary(&self) -> Option<&AlgorithmRun> {
        self.alg2.as_ref().or(self.alg1.as_ref())
    }
}

type PushCheck = fn(&mut VerificationReport, &str, f64, f64, &str);

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

/// Writes both batches into `dir` and returns them.
pub fn collect_only(cfg: &ScenarioConfig, dir: &Path) -> Result<(DataBatch, DataBatch, RankReport)> {
    fs::create_dir_all(dir)?;
    let (k_t, _) = cfg.expert_gain()?;
    let (expert, learner) = cfg.collect(&k_t)?;
    expert.write_csv(create(&dir.join("expert_batch.csv"))?)?;
    learner.write_csv(create(&dir.join("learner_batch.csv"))?)?;
    let rank = check_rank(&expert, &learner);
    Ok((expert, learner, rank))
}

/// Runs the configured pipeline and writes all artifacts into `cfg.output_dir`.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<RunArtifacts> {
    let started = Instant::now();
    let dir = cfg.output_dir.clone();
    fs::create_dir_all(&dir)?;
    let sys = &cfg.dynamics;
    let (k_t, expert_solution) = cfg.expert_gain()?;
    if !is_hurwitz(&sys.closed_loop(&k_t)) {
        return Err(Error::StabilityViolation(
            "expert gain does not stabilize the dynamics".into(),
        ));
    }
    let reference = Reference {
        dynamics: Some(sys.clone()),
        target_gain: Some(k_t.clone()),
    };
    let mut report = VerificationReport::default();
    if let Some(sol) = &expert_solution {
        if let ExpertSpec::Weights(w) = &cfg.expert {
            report.push_le(
                "expert_gare_residual",
                gare_residual(sys, &w.q, &w.r, w.gamma, &sol.p),
                cfg.verify.model_residual_tol,
                "expert value solves its GARE",
            );
        }
    }

    let mut alg1 = None;
    if cfg.run.algorithm.runs_alg1() {
        let irl = cfg.irl_config(cfg.run.tol_converge)?;
        let trace = run_algorithm1(sys, &k_t, &irl)?;
        let run = finish_run(cfg, "alg1", trace, &k_t, expert_solution.as_ref(), &dir, &mut report)?;
        alg1 = Some(run);
    }

    let mut alg2 = None;
    let mut rank = None;
    if cfg.run.algorithm.runs_alg2() {
        let (expert, learner) = cfg.collect(&k_t)?;
        expert.write_csv(create(&dir.join("expert_batch.csv"))?)?;
        learner.write_csv(create(&dir.join("learner_batch.csv"))?)?;
        let rr = check_rank(&expert, &learner);
        report.push_le(
            "rank_expert_shortfall",
            rr.expert_required.saturating_sub(rr.expert_rank) as f64,
            0.0,
            &format!("rank [I_xx, I_xu, I_xd] = {} of {}", rr.expert_rank, rr.expert_required),
        );
        report.push_le(
            "rank_learner_shortfall",
            rr.learner_required.saturating_sub(rr.learner_rank) as f64,
            0.0,
            &format!("rank I_xx = {} of {}", rr.learner_rank, rr.learner_required),
        );
        rank = Some(rr);
        let irl = cfg.irl_config(cfg.run.alg2_tol_converge)?;
        let trace = match run_algorithm2_with_reference(&expert, &learner, &irl, &reference) {
            Ok(t) => t,
            Err(Error::Divergence { reason, trace: Some(t) }) => {
                t.write_csv(create(&dir.join("trace_alg2.csv"))?)?;
                return Err(Error::Divergence { reason, trace: Some(t) });
            }
            Err(e) => return Err(e),
        };
        let run = finish_run(cfg, "alg2", trace, &k_t, expert_solution.as_ref(), &dir, &mut report)?;
        alg2 = Some(run);
    }

    let report_path = dir.join("verification.csv");
    report.write_csv(create(&report_path)?)?;
    fs::write(dir.join("verification.txt"), report.to_table())?;

    let wall_clock_s = started.elapsed().as_secs_f64();
    let mut artifacts = RunArtifacts {
        name: cfg.name.clone(),
        out_dir: dir.clone(),
        k_t,
        expert_solution,
        rank,
        alg1,
        alg2,
        report,
        report_path,
        summary_path: dir.join("summary.txt"),
        wall_clock_s,
    };
    fs::write(&artifacts.summary_path, render_summary(&artifacts))?;
    artifacts.wall_clock_s = wall_clock_s;
    Ok(artifacts)
}

fn finish_run(
    cfg: &ScenarioConfig,
    label: &'static str,
    trace: IterationTrace,
    k_t: &Mat,
    expert: Option<&GameSolution>,
    dir: &Path,
    report: &mut VerificationReport,
) -> Result<AlgorithmRun> {
    let sys = &cfg.dynamics;
    let last = trace
        .last()
        .ok_or_else(|| Error::NumericFailure(format!("{label} produced no iterations")))?
        .clone();
    let data = label == "alg2";
    let (gain_tol, residual_tol) = if data {
        (cfg.verify.alg2_gain_tol, cfg.verify.data_residual_tol)
    } else {
        (cfg.run.gain_tol, cfg.verify.model_residual_tol)
    };
    let (r, gamma) = (&cfg.learner.r, cfg.learner.gamma);
    let name = |s: &str| format!("{label}_{s}");

    let gain_error = (&last.k - k_t).norm();
    report.push_gt(
        &name("converged"),
        if trace.converged { 1.0 } else { 0.0 },
        0.5,
        "stopping rule met (1 = yes)",
    );
    report.push_le(&name("gain_error"), gain_error, gain_tol, "||K* - K_T||_F");
    let t1 = theorem1_residual(sys, k_t, &last.p, &last.q_next, r, gamma);
    report.push_le(
        &name("theorem1_residual"),
        t1,
        residual_tol,
        "(P*, Q*) consistent with K_T",
    );
    let gres = gare_residual(sys, &last.q_next, r, gamma, &last.p);
    report.push_le(
        &name("gare_residual"),
        gres,
        residual_tol,
        "(P*, Q*) solve the learner GARE",
    );

    let not_hurwitz = trace
        .records
        .iter()
        .filter(|r| !is_hurwitz(&sys.closed_loop(&r.k)))
        .count();
    let hurwitz_prop = "A - B K^(i+1) Hurwitz at every iteration";
    if data {
        report.push_advisory(&name("non_hurwitz_iterations"), not_hurwitz as f64, 0.0, hurwitz_prop);
    } else {
        report.push_le(&name("non_hurwitz_iterations"), not_hurwitz as f64, 0.0, hurwitz_prop);
    }

    // Monotonicity: Q^i itself, and Q^i + gamma^2 L^i'L^i (L^0 = 0).
    let g2 = gamma * gamma;
    let mut q_viol = 0.0f64;
    let mut m_viol = 0.0f64;
    let mut p_viol = 0.0f64;
    let n = sys.n();
    let mut l_prev = Mat::zeros(sys.z(), n);
    let mut p_prev: Option<&Mat> = None;
    let slack = if data { cfg.verify.eps_noise } else { 0.0 };
    for rec in &trace.records {
        let drop = |a: &Mat, b: &Mat| -> f64 { (-min_eigenvalue(&(b - a))).max(0.0) };
        q_viol = q_viol.max(drop(&rec.q, &rec.q_next));
        let m_now = &rec.q + l_prev.transpose() * &l_prev * g2;
        let m_next = &rec.q_next + rec.l.transpose() * &rec.l * g2;
        m_viol = m_viol.max(drop(&m_now, &m_next));
        if let Some(pp) = p_prev {
            p_viol = p_viol.max(drop(pp, &rec.p));
        }
        l_prev = rec.l.clone();
        p_prev = Some(&rec.p);
    }
    // On data-driven iterates these properties are reported, not enforced.
    let tol_mono = EPS_PSD + slack;
    let (mono_note, push): (&str, PushCheck) = if data {
        (" (noisy data, slack eps_noise)", VerificationReport::push_advisory)
    } else {
        ("", VerificationReport::push_le)
    };
    push(
        report,
        &name("q_monotone_violation"),
        q_viol,
        tol_mono,
        &format!("Q^i <= Q^(i+1){mono_note}"),
    );
    push(
        report,
        &name("q_plus_l_monotone_violation"),
        m_viol,
        tol_mono,
        &format!("Q^i + g^2 L^i'L^i nondecreasing{mono_note}"),
    );
    push(
        report,
        &name("p_monotone_violation"),
        p_viol,
        tol_mono,
        &format!("P^(i-1) <= P^i{mono_note}"),
    );

    if let (Some(sol), ExpertSpec::Weights(w)) = (expert, &cfg.expert) {
        report.push_gt(
            &name("q_distance_from_target"),
            (&last.q_next - &w.q).norm(),
            cfg.verify.distinct_min,
            "Q* != Q_T",
        );
        report.push_gt(
            &name("p_distance_from_target"),
            (&last.p - &sol.p).norm(),
            cfg.verify.distinct_min,
            "P* != P_T",
        );
        let target = TargetGame {
            weights: w.clone(),
            p: sol.p.clone(),
            k: sol.k.clone(),
        };
        let learned = LearnedGame {
            q: last.q_next.clone(),
            r: r.clone(),
            gamma,
            p: last.p.clone(),
        };
        let mut nu = nonuniqueness_residual(sys, &target, &learned, cfg.verify.nonuniqueness_tol);
        for c in &mut nu.checks {
            c.name = name(&c.name);
        }
        report.extend(nu);
    }

    // Saddle point of the learned game (Q*, R, gamma).
    match CostWeights::new(last.q_next.clone(), r.clone(), gamma).and_then(|w| solve_gare(sys, &w)) {
        Ok(sol) => {
            let mut sc = saddle_check(
                sys,
                &sol,
                &last.q_next,
                r,
                gamma,
                cfg.run.saddle_samples,
                cfg.run.saddle_seed,
            );
            for c in &mut sc.checks {
                c.name = name(&c.name);
            }
            report.extend(sc);
        }
        Err(e) => report.push_le(&name("learned_game_solvable"), 1.0, 0.0, &format!("learned game: {e}")),
    }

    let a = cfg.run.replay_samples;
    let learner = replay(
        sys,
        &last.k,
        &cfg.learner_disturbance,
        &cfg.data.x0,
        cfg.data.t_window,
        cfg.data.h,
        a,
    )?;
    let expert_traj = replay(
        sys,
        k_t,
        &cfg.expert_disturbance,
        &cfg.data.x0,
        cfg.data.t_window,
        cfg.data.h,
        a,
    )?;
    let te = if a > 0 {
        imitation_error(&learner[1..], &expert_traj[1..])?
    } else {
        0.0
    };
    report.push_le(
        &name("imitation_error"),
        te,
        cfg.verify.te_tol,
        &format!("Te over a = {a} samples"),
    );
    let trajectories = Trajectories {
        t: (0..=a).map(|k| k as f64 * cfg.data.t_window).collect(),
        learner,
        expert: expert_traj,
    };

    let trace_path = dir.join(format!("trace_{label}.csv"));
    trace.write_csv(create(&trace_path)?)?;
    let trajectory_path = dir.join(format!("trajectory_{label}.csv"));
    write_trajectories(&trajectories, create(&trajectory_path)?)?;

    let within_tol = if data {
        cfg.verify.alg2_gain_tol
    } else {
        cfg.run.gain_tol
    };
    let summary = AlgorithmSummary {
        algorithm: label,
        converged: trace.converged,
        iterations: trace.iterations_used,
        linear_solves: trace.linear_solves,
        gain_error: last.gain_error.unwrap_or(gain_error),
        first_within: trace.first_within(within_tol),
        within_tol,
        imitation_error: te,
        k_star: last.k.clone(),
        q_star: last.q_next.clone(),
        p_star: last.p.clone(),
        l_star: last.l.clone(),
    };
    Ok(AlgorithmRun {
        trace,
        summary,
        trajectories,
        trace_path,
        trajectory_path,
    })
}

fn write_trajectories<W: std::io::Write>(tr: &Trajectories, out: W) -> Result<()> {
    let n = tr.expert.first().map(|x| x.len()).unwrap_or(0);
    let mut wtr = csv::Writer::from_writer(out);
    let mut header = vec!["t".to_string()];
    header.extend((1..=n).map(|i| format!("x_{i}")));
    header.extend((1..=n).map(|i| format!("xT_{i}")));
    wtr.write_record(&header)?;
    for ((t, x), xt) in tr.t.iter().zip(&tr.learner).zip(&tr.expert) {
        let mut row = vec![fmt_f64(*t)];
        row.extend(x.iter().chain(xt.iter()).map(|v| fmt_f64(*v)));
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

fn fmt_mat(m: &Mat) -> String {
    toml_matrix(m)
}

/// `key = value` lines; numbers use the same formatting as the CSVs.
pub fn render_summary(a: &RunArtifacts) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "scenario = {}", a.name);
    let _ = writeln!(s, "k_target = {}", fmt_mat(&a.k_t));
    if let Some(r) = &a.rank {
        let _ = writeln!(s, "rank_expert = {} / {}", r.expert_rank, r.expert_required);
        let _ = writeln!(s, "rank_learner = {} / {}", r.learner_rank, r.learner_required);
    }
    for run in a.runs() {
        let m = &run.summary;
        let p = m.algorithm;
        let _ = writeln!(s, "{p}.converged = {}", m.converged);
        let _ = writeln!(s, "{p}.iterations = {}", m.iterations);
        let _ = writeln!(s, "{p}.linear_solves = {}", m.linear_solves);
        let _ = writeln!(s, "{p}.gain_error = {}", fmt_f64(m.gain_error));
        let first = m.first_within.map(|i| i.to_string()).unwrap_or_else(|| "never".into());
        let _ = writeln!(s, "{p}.first_iteration_within_{} = {first}", m.within_tol);
        let _ = writeln!(s, "{p}.imitation_error = {}", fmt_f64(m.imitation_error));
        let _ = writeln!(s, "{p}.K = {}", fmt_mat(&m.k_star));
        let _ = writeln!(s, "{p}.L = {}", fmt_mat(&m.l_star));
        let _ = writeln!(s, "{p}.Q = {}", fmt_mat(&m.q_star));
        let _ = writeln!(s, "{p}.P = {}", fmt_mat(&m.p_star));
        for w in &run.trace.warnings {
            let _ = writeln!(s, "{p}.warning = {w}");
        }
    }
    let _ = writeln!(s, "checks_passed = {}", a.report.all_passed());
    let _ = writeln!(s, "wall_clock_s = {:.3}", a.wall_clock_s);
    s
}

/// Long-format convergence series and the trajectory overlay for each run.
/// Returns the written paths.
pub fn emit_plot_data(artifacts: &RunArtifacts) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::new();
    for run in artifacts.runs() {
        let label = run.summary.algorithm;
        let path = artifacts.out_dir.join(format!("convergence_{label}.csv"));
        let mut wtr = csv::Writer::from_writer(create(&path)?);
        wtr.write_record(["series", "i", "value"])?;
        let recs = &run.trace.records;
        for r in recs {
            let i = r.iter.to_string();
            let ge = (&r.k - &artifacts.k_t).norm();
            wtr.write_record(["gain_error", &i, &fmt_f64(ge)])?;
            wtr.write_record(["q_step", &i, &fmt_f64((&r.q_next - &r.q).norm())])?;
            if let Some(ps) = r.p_step {
                wtr.write_record(["p_step", &i, &fmt_f64(ps)])?;
            }
        }
        wtr.flush()?;
        paths.push(path);

        let path = artifacts.out_dir.join(format!("trajectory_overlay_{label}.csv"));
        write_trajectories(&run.trajectories, create(&path)?)?;
        paths.push(path);
    }
    Ok(paths)
}
