use thiserror::Error;

use crate::model::Violation;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid specification: {}", format_violations(.0))]
    Validation(Vec<Violation>),

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("constant-power load at node index {node} evaluated at {voltage} V")]
    SingularLoad { node: usize, voltage: f64 },

    #[error("no equilibrium found after {iterations} iterations (residual {residual:e})")]
    NoEquilibrium { iterations: usize, residual: f64 },

    #[error("invalid envelope: {0}")]
    Envelope(String),

    #[error("{count} uncertain parameters exceed the vertex cap of {cap}")]
    VertexCap { count: usize, cap: usize },

    #[error("{vertices} vertices need about {bytes} bytes of solver data, over the budget of {budget}")]
    ProblemSize {
        vertices: usize,
        bytes: usize,
        budget: usize,
    },

    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    Asymmetric(f64),

    #[error("step size underflow at t = {t} s (dt = {dt:e} s); reduce dt_max or tighten the envelope")]
    StepUnderflow { t: f64, dt: f64 },

    #[error("non-finite state encountered at t = {t} s")]
    NonFinite { t: f64 },

    #[error("invalid port: {0}")]
    Port(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("linear algebra failure: {0}")]
    Singular(&'static str),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn format_violations(v: &[Violation]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}
