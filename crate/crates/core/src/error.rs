//! Error taxonomy shared by all modules.

use thiserror::Error;

#[derive(Debug, Clone, Error)]
pub enum Error {
    #[error("integrator step size underflow at t = {t:.6e} (h = {h:.3e}); system may be stiff or blowing up")]
    StepSizeUnderflow { t: f64, h: f64 },

    #[error("state left R^n at t = {t:.6e} (non-finite component)")]
    NonFinite { t: f64 },

    #[error("propagator numerically singular (condition estimate {cond:.3e} > {limit:.1e})")]
    SingularPropagator { cond: f64, limit: f64 },

    #[error("point is off the manifold: descriptor residual {residual:.3e} exceeds tolerance {tol:.1e}")]
    OffManifold { residual: f64, tol: f64 },

    #[error("angle between the stable complement and the tangent space fell to {angle:.3e} rad (minimum {min:.3e})")]
    DegenerateAngle { angle: f64, min: f64 },

    #[error("point lies outside the tubular neighborhood: {reason}")]
    OutsideTube { reason: String },

    #[error("hyperbolicity test failed: {reason}")]
    NonHyperbolic { reason: String },

    #[error("dichotomy horizon too short: e^(-alpha*T) = {decay:.3e} >= {required:.1e}")]
    HorizonTooShort { decay: f64, required: f64 },

    #[error("no admissible (r, R) after {attempts} shrink steps: {reason}")]
    ConstantsInfeasible { attempts: usize, reason: String },

    #[error("fixed-point iteration stopped contracting (residual ratio {ratio:.3} > 1 for {streak} consecutive steps)")]
    NoContraction { ratio: f64, streak: usize },

    #[error("iterate violated the decay envelope at t = {t:.4}: |y| = {norm:.3e} > {bound:.3e}")]
    BoundViolated { t: f64, norm: f64, bound: f64 },

    #[error("graph correction computed two ways disagrees: |direct - integral| = {diff:.3e} > {tol:.1e}")]
    InconsistentH { diff: f64, tol: f64 },

    #[error("chart domain exceeded: |q| = {q_norm:.3e} > radius {radius:.3e}")]
    ChartExceeded { q_norm: f64, radius: f64 },

    #[error("self-map condition failed on the ball of radius {eps:.3e}: max |A^-1 H| = {max_image:.3e}")]
    SelfMapViolated { eps: f64, max_image: f64 },

    #[error("fixed-point solve did not converge after {iterations} iterations (residual {residual:.3e})")]
    NonConvergent { iterations: usize, residual: f64 },

    #[error("result failed verification: {reason}")]
    VerificationFailed { reason: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// True for the errors that signal a failed hyperbolicity hypothesis
    /// rather than a numerical mishap.
    pub fn is_hyperbolicity_failure(&self) -> bool {
        matches!(
            self,
            Error::NonHyperbolic { .. } | Error::ConstantsInfeasible { .. }
        )
    }
}
