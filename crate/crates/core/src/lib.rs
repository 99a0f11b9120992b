//! Inverse reinforcement learning for expert–learner zero-sum games on
//! continuous-time linear systems.
//!
//! A learner observes an expert playing a linear-quadratic zero-sum game
//! against a disturbance and reconstructs a cost weight whose game-optimal
//! gain matches the expert's. Two iterations are provided: a model-based
//! one that needs the dynamics, and a data-driven one that needs only
//! trajectory integrals of both agents.

pub mod data_driven;
pub mod error;
pub mod matops;
pub mod model_based;
pub mod scenario;
pub mod sim;
pub mod system;
pub mod verify;

pub use data_driven::{check_rank, run_algorithm2, run_algorithm2_with_reference, RankReport};
pub use error::{Error, Result};
pub use matops::{solve_gare, solve_lyapunov};
pub use model_based::{run_algorithm1, IrlConfig, IterationRecord, IterationTrace, Reference};
pub use sim::{BatchRole, DataBatch, SignalSpec};
pub use system::{CostWeights, GameSolution, Mat, SystemDynamics, Vector};
pub use verify::VerificationReport;
