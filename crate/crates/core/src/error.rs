use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid robot parameters: {0}")]
    InvalidParams(String),

    #[error("invalid path: {0}")]
    InvalidPath(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("implicit integrator did not converge (residual {residual:e} after {iterations} iterations)")]
    NonConvergence { residual: f64, iterations: usize },

    #[error("QP solver hit the iteration limit ({0})")]
    MaxIterations(usize),

    #[error("QP is infeasible (constraint violation {violation:e})")]
    Infeasible { violation: f64 },

    #[error("simulation blew up at t = {t} s (|qdot| = {speed})")]
    SimulationBlowup { t: f64, speed: f64 },

    #[error("internal fault: {0}")]
    Internal(&'static str),

    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
