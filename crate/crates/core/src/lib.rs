//! Simulation and analysis library for dispersive qubit readout through a
//! Kerr-nonlinear Purcell filter.
//!
//! The crate is organized by physical layer:
//!
//! - [`device`]: static parameters and derived mode quantities.
//! - [`linear`]: closed-form and quadrature linear-response theory
//!   (reflection coefficients, dephasing rates, Purcell rates, sensitivity
//!   sweeps).
//! - [`meanfield`]: classical dynamics of the driven resonator-filter pair,
//!   steady-state bifurcation branches, input-output signals, measurement
//!   rate.
//! - [`lindblad`]: truncated-Fock-space master equation for cross-validating
//!   the closed forms in the weak-drive regime.
//! - [`noise`]: band-limited noise synthesis and the time-domain Monte Carlo
//!   dephasing estimator.
//! - [`fit`]: damped least-squares engine and the shared-parameter
//!   multi-group dephasing-spectrum fit.
//!
//! All public physics APIs take and return angular frequencies (rad/s);
//! ordinary-Hz conversions live at the serde/CSV boundary.

pub mod device;
pub mod error;
pub mod fit;
pub mod lindblad;
pub mod linear;
pub mod meanfield;
pub mod noise;
pub mod par;
pub mod quadrature;

pub use device::{
    bundled_device, bundled_device_json, pure_dephasing_time, Detunings, DeviceParams,
    DeviceParamsHz, DriveSpec, HybridModes, ModeIndex, QubitState, HBAR, TWO_PI,
};
pub use error::{CoreError, Result};
