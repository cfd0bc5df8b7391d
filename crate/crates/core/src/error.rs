use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dynamics do not vanish at the origin (|phi(0,0)| = {0:e})")]
    NonzeroEquilibrium(f64),

    #[error("analytic Jacobian disagrees with finite differences (relative error {0:e})")]
    JacobianMismatch(f64),

    #[error("integration diverged; last finite time {last_finite_time}")]
    IntegrationDiverged { last_finite_time: f64 },

    #[error("Riccati recursion did not converge after {iterations} iterations")]
    RiccatiDiverged { iterations: usize },

    #[error("QP subproblem failed with status {0:?}")]
    QpFailed(crate::qp::QpStatus),

    #[error("oracle did not converge after {iterations} iterations (last KKT residual {kkt:e})")]
    OracleFailure { iterations: usize, kkt: f64 },

    #[error("step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("contraction violated at x = {state:?}, radius {radius:e}: error ratio {ratio}")]
    ContractionViolation {
        state: Vec<f64>,
        radius: f64,
        ratio: f64,
    },

    #[error("estimation failed: {0}")]
    Estimation(String),

    #[error("sampling time {t} is outside the certificate domain (T * a_bar = {product} >= 1)")]
    OutOfDomain { t: f64, product: f64 },

    #[error("degenerate bundle: {0}")]
    Degenerate(String),

    #[error("internal inconsistency: {0}")]
    Inconsistent(String),

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

impl Error {
    pub(crate) fn at_step(step: usize, err: Error) -> Error {
        Error::AtStep {
            step,
            source: Box::new(err),
        }
    }
}
