//! Plant and cost descriptions shared by every solver.

use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, Result};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Continuous-time LTI agent `dx/dt = A x + B u + D d`.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemDynamics {
    a: Mat,
    b: Mat,
    d: Mat,
}

impl SystemDynamics {
    pub fn new(a: Mat, b: Mat, d: Mat) -> Result<Self> {
        let n = a.nrows();
        if n == 0 || a.ncols() != n {
            return Err(invalid(format!(
                "A must be square and non-empty, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        if b.nrows() != n || b.ncols() == 0 {
            return Err(invalid(format!(
                "B must be {n}xm with m >= 1, got {}x{}",
                b.nrows(),
                b.ncols()
            )));
        }
        if d.nrows() != n {
            return Err(invalid(format!("D must have {n} rows, got {}", d.nrows())));
        }
        for (name, m) in [("A", &a), ("B", &b), ("D", &d)] {
            if m.iter().any(|v| !v.is_finite()) {
                return Err(invalid(format!("{name} has non-finite entries")));
            }
        }
        Ok(Self { a, b, d })
    }

    pub fn a(&self) -> &Mat {
        &self.a
    }

    pub fn b(&self) -> &Mat {
        &self.b
    }

    pub fn d(&self) -> &Mat {
        &self.d
    }

    /// State dimension.
    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    /// Control dimension.
    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    /// Disturbance dimension.
    pub fn z(&self) -> usize {
        self.d.ncols()
    }

    /// `A - B K` for a state-feedback gain `K` (m x n).
    pub fn closed_loop(&self, k: &Mat) -> Mat {
        &self.a - &self.b * k
    }

    pub fn derivative(&self, x: &Vector, u: &Vector, d: &Vector) -> Vector {
        let mut dx = &self.a * x + &self.b * u;
        if self.z() > 0 {
            dx += &self.d * d;
        }
        dx
    }
}

/// Quadratic game cost `x'Qx + u'Ru - gamma^2 d'd`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostWeights {
    pub q: Mat,
    pub r: Mat,
    pub gamma: f64,
}

impl CostWeights {
    pub fn new(q: Mat, r: Mat, gamma: f64) -> Result<Self> {
        let w = Self { q, r, gamma };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if !is_spd(&self.q) {
            return Err(invalid("Q must be symmetric positive definite"));
        }
        if !is_spd(&self.r) {
            return Err(invalid("R must be symmetric positive definite"));
        }
        if !(self.gamma.is_finite() && self.gamma > 0.0) {
            return Err(invalid(format!("gamma must be positive, got {}", self.gamma)));
        }
        Ok(())
    }

    pub(crate) fn check_dims(&self, sys: &SystemDynamics) -> Result<()> {
        if self.q.shape() != (sys.n(), sys.n()) {
            return Err(invalid(format!("Q must be {0}x{0}", sys.n())));
        }
        if self.r.shape() != (sys.m(), sys.m()) {
            return Err(invalid(format!("R must be {0}x{0}", sys.m())));
        }
        Ok(())
    }
}

/// Value matrix and the saddle-point gains `u = -K x`, `d = L x`.
#[derive(Debug, Clone, PartialEq)]
pub struct GameSolution {
    pub p: Mat,
    pub k: Mat,
    pub l: Mat,
}

impl GameSolution {
    /// Builds the gains `K = R^-1 B'P` and `L = D'P / gamma^2` from a value matrix.
    pub fn from_value(sys: &SystemDynamics, r: &Mat, gamma: f64, p: Mat) -> Result<Self> {
        let k = control_gain(sys, r, &p)?;
        let l = disturbance_gain(sys, gamma, &p);
        Ok(Self { p, k, l })
    }
}

pub(crate) fn control_gain(sys: &SystemDynamics, r: &Mat, p: &Mat) -> Result<Mat> {
    let chol = r
        .clone()
        .cholesky()
        .ok_or_else(|| invalid("R is not positive definite"))?;
    Ok(chol.solve(&(sys.b().transpose() * p)))
}

pub(crate) fn disturbance_gain(sys: &SystemDynamics, gamma: f64, p: &Mat) -> Mat {
    sys.d().transpose() * p / (gamma * gamma)
}

/// Relative symmetry tolerance used by every symmetric-input check.
pub(crate) const SYM_TOL: f64 = 1e-8;

pub fn is_symmetric(m: &Mat) -> bool {
    if !m.is_square() {
        return false;
    }
    let scale = m.amax().max(1.0);
    (m - m.transpose()).amax() <= SYM_TOL * scale
}

pub fn is_spd(m: &Mat) -> bool {
    if m.nrows() == 0 || !is_symmetric(m) || m.iter().any(|v| !v.is_finite()) {
        return false;
    }
    let s = crate::matops::symmetrize(m);
    s.symmetric_eigenvalues().min() > 0.0
}
