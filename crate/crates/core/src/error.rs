use thiserror::Error;

/// Errors surfaced by the physics and numerics layers.
///
/// Broadly: invalid physical inputs, guard violations of the integrators,
/// and non-convergence of iterative solvers. IO/config errors live in the
/// CLI crate.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error("square-root argument is negative ({radicand:.6e}); check the sign convention of the dispersive shift")]
    NegativeRadicand { radicand: f64 },

    #[error("division by zero: {context}")]
    DivisionByZero { context: &'static str },

    #[error("T2_echo = {t2_echo:.3e} s exceeds 2*T1 = {two_t1:.3e} s beyond tolerance; inputs are physically inconsistent")]
    InconsistentTimes { t2_echo: f64, two_t1: f64 },

    #[error("adaptive quadrature did not reach relative error {target:.1e} within {max_intervals} intervals (estimate {estimate:.6e}, error {error:.2e})")]
    QuadratureNonConvergence {
        target: f64,
        max_intervals: usize,
        estimate: f64,
        error: f64,
    },

    #[error("drive is resonant with the dressed resonator (|delta_c'| = {delta_c_prime_abs:.3e} rad/s < 1e-6 kappa_f); the steady-state elimination is degenerate")]
    ResonantDrive { delta_c_prime_abs: f64 },

    #[error("no stable steady branch found during amplitude continuation at step {step} of {steps}")]
    NoStableBranch { step: usize, steps: usize },

    #[error("integration step {dt:.3e} s exceeds the stability guard {max_dt:.3e} s")]
    StepTooLarge { dt: f64, max_dt: f64 },

    #[error("density matrix lost positivity: min eigenvalue {min_eig:.3e} at t = {t:.3e} s")]
    PositivityLoss { min_eig: f64, t: f64 },

    #[error("Fock-space dimension 2*n_c*n_f = {dim} exceeds the guard of {max}")]
    DimensionGuard { dim: usize, max: usize },

    #[error("Liouvillian null space has dimension {nullity} at tolerance; the steady state is not unique")]
    NonUniqueSteadyState { nullity: usize },

    #[error("steady-state search did not converge: residual {residual:.3e} after t = {t_final:.3e} s")]
    SteadyStateNotConverged { residual: f64, t_final: f64 },

    #[error("post-transient coherence decay is not log-linear (R^2 = {r_squared:.6}); dephasing fit rejected")]
    FitUnstable { r_squared: f64 },

    #[error("drive too strong for the dispersive comparison: steady <c^dag c> = {n_bar:.3} exceeds n_crit/10 = {limit:.3}")]
    WeakDriveViolated { n_bar: f64, limit: f64 },

    #[error("normal matrix is singular or non-finite at iteration {iteration}; the fit data do not constrain the parameters")]
    SingularNormalMatrix { iteration: usize },

    #[error("Monte Carlo duration too short: stderr/estimate = {stderr_frac:.3} exceeds 0.05")]
    InsufficientDuration { stderr_frac: f64 },

    #[error("invalid parameter: {context}")]
    InvalidInput { context: String },
}

pub type Result<T> = std::result::Result<T, CoreError>;
