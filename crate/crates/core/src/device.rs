//! Static device description and derived quantities: detunings, the
//! qubit-resonator coupling implied by the dispersive shift, critical photon
//! number, hybridized resonator-filter modes, and the effective linewidth
//! seen by the qubit.
//!
//! Unit convention: every frequency/rate stored in these types is angular
//! (rad/s). Configuration files and CSV columns use ordinary frequencies in
//! Hz (suffix `_hz`, the tabulated "/2pi" values); conversion happens at the
//! serde boundary and nowhere else.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Reduced Planck constant (J s), CODATA 2018.
pub const HBAR: f64 = 1.054571817e-34;

pub const TWO_PI: f64 = std::f64::consts::TAU;

/// Qubit state selector for state-dependent response.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QubitState {
    G,
    E,
}

/// Static device parameters, all angular (rad/s) except `qubit_t1` (s).
///
/// `resonator_freq` is the ground-state-qubit-dressed resonator frequency;
/// `chi_qc` is the full dispersive shift (resonator frequency difference
/// between qubit states), stored signed and negative for this device class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeviceParams {
    pub qubit_freq: f64,
    pub qubit_anharm: f64,
    pub qubit_t1: f64,
    pub resonator_freq: f64,
    pub chi_qc: f64,
    pub filter_freq: f64,
    pub filter_anharm: f64,
    pub g_cf: f64,
    pub kappa_f: f64,
}

/// Serde image of a device file: ordinary frequencies in Hz.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeviceParamsHz {
    pub qubit_freq_hz: f64,
    pub qubit_anharm_hz: f64,
    pub qubit_t1_s: f64,
    pub resonator_freq_hz: f64,
    pub chi_qc_hz: f64,
    pub filter_freq_hz: f64,
    pub filter_anharm_hz: f64,
    pub g_cf_hz: f64,
    pub kappa_f_hz: f64,
}

impl From<&DeviceParamsHz> for DeviceParams {
    fn from(h: &DeviceParamsHz) -> Self {
        DeviceParams {
            qubit_freq: TWO_PI * h.qubit_freq_hz,
            qubit_anharm: TWO_PI * h.qubit_anharm_hz,
            qubit_t1: h.qubit_t1_s,
            resonator_freq: TWO_PI * h.resonator_freq_hz,
            chi_qc: TWO_PI * h.chi_qc_hz,
            filter_freq: TWO_PI * h.filter_freq_hz,
            filter_anharm: TWO_PI * h.filter_anharm_hz,
            g_cf: TWO_PI * h.g_cf_hz,
            kappa_f: TWO_PI * h.kappa_f_hz,
        }
    }
}

impl From<&DeviceParams> for DeviceParamsHz {
    fn from(d: &DeviceParams) -> Self {
        DeviceParamsHz {
            qubit_freq_hz: d.qubit_freq / TWO_PI,
            qubit_anharm_hz: d.qubit_anharm / TWO_PI,
            qubit_t1_s: d.qubit_t1,
            resonator_freq_hz: d.resonator_freq / TWO_PI,
            chi_qc_hz: d.chi_qc / TWO_PI,
            filter_freq_hz: d.filter_freq / TWO_PI,
            filter_anharm_hz: d.filter_anharm / TWO_PI,
            g_cf_hz: d.g_cf / TWO_PI,
            kappa_f_hz: d.kappa_f / TWO_PI,
        }
    }
}

/// Readout tone: frequency, amplitude (both rad/s), and which qubit state
/// the response is evaluated for.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DriveSpec {
    pub drive_freq: f64,
    pub drive_amp: f64,
    pub qubit_state: QubitState,
}

impl DriveSpec {
    pub fn new(drive_freq: f64, drive_amp: f64, qubit_state: QubitState) -> Result<Self> {
        if !(drive_amp >= 0.0) {
            return Err(CoreError::InvalidInput {
                context: format!("drive amplitude must be >= 0, got {drive_amp}"),
            });
        }
        Ok(DriveSpec { drive_freq, drive_amp, qubit_state })
    }
}

/// Detunings in the drive rotating frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detunings {
    /// delta_c = omega_c - omega
    pub delta_c: f64,
    /// delta_f = omega_f - omega
    pub delta_f: f64,
    /// delta_c for qubit g, delta_c + chi_qc for qubit e
    pub delta_c_prime: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeIndex {
    Plus,
    Minus,
}

/// Normal modes of the resonantly coupled resonator-filter pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HybridModes {
    pub omega_plus: f64,
    pub omega_minus: f64,
    pub kappa_plus: f64,
    pub kappa_minus: f64,
    /// Which mode carries the larger resonator weight (ties resolve to the
    /// smaller-|Im| eigenvalue, then to Minus).
    pub readout_like_index: ModeIndex,
}

impl DeviceParams {
    /// Validate hard invariants; returns human-readable warnings for soft
    /// ones (regime sanity, not errors).
    pub fn validate(&self) -> Result<Vec<String>> {
        if !(self.kappa_f > 0.0) {
            return Err(CoreError::InvalidInput {
                context: format!("kappa_f must be > 0, got {:.3e}", self.kappa_f),
            });
        }
        if !(self.g_cf >= 0.0) {
            return Err(CoreError::InvalidInput {
                context: format!("g_cf must be >= 0, got {:.3e}", self.g_cf),
            });
        }
        if !(self.qubit_t1 > 0.0) {
            return Err(CoreError::InvalidInput {
                context: format!("qubit_t1 must be > 0, got {:.3e}", self.qubit_t1),
            });
        }
        for (name, v) in [
            ("qubit_freq", self.qubit_freq),
            ("resonator_freq", self.resonator_freq),
            ("filter_freq", self.filter_freq),
        ] {
            if !(v > 0.0) {
                return Err(CoreError::InvalidInput {
                    context: format!("{name} must be > 0, got {v:.3e}"),
                });
            }
        }
        let mut warnings = Vec::new();
        // overcoupled-regime sanity, not an error
        if self.chi_qc.abs() >= self.kappa_f {
            warnings.push(format!(
                "|chi_qc| = {:.3e} rad/s is not small against kappa_f = {:.3e} rad/s; \
                 the overcoupled-regime formulas may be strained",
                self.chi_qc.abs(),
                self.kappa_f
            ));
        }
        Ok(warnings)
    }

    pub fn from_hz(h: &DeviceParamsHz) -> Result<Self> {
        let d = DeviceParams::from(h);
        d.validate()?;
        Ok(d)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let h: DeviceParamsHz = serde_json::from_str(s).map_err(|e| CoreError::InvalidInput {
            context: format!("device JSON: {e}"),
        })?;
        Self::from_hz(&h)
    }

    /// Copy with the filter moved to `resonator_freq + detuning`.
    pub fn with_filter_detuning(&self, detuning: f64) -> Self {
        DeviceParams { filter_freq: self.resonator_freq + detuning, ..*self }
    }

    /// Dressed resonator frequency for a given qubit state.
    pub fn resonator_freq_for(&self, state: QubitState) -> f64 {
        match state {
            QubitState::G => self.resonator_freq,
            QubitState::E => self.resonator_freq + self.chi_qc,
        }
    }

    /// Rotating-frame detunings for a drive tone.
    pub fn detunings(&self, drive: &DriveSpec) -> Detunings {
        let delta_c = self.resonator_freq - drive.drive_freq;
        let delta_f = self.filter_freq - drive.drive_freq;
        let delta_c_prime = match drive.qubit_state {
            QubitState::G => delta_c,
            QubitState::E => delta_c + self.chi_qc,
        };
        Detunings { delta_c, delta_f, delta_c_prime }
    }

    /// Qubit-resonator coupling implied by the dispersive shift:
    /// g_qc = sqrt[(w_q - w_c)(w_q + alpha_q - w_c) chi_qc / (2 alpha_q)].
    pub fn qubit_resonator_coupling(&self) -> Result<f64> {
        let delta = self.qubit_freq - self.resonator_freq;
        let radicand = delta * (delta + self.qubit_anharm) * self.chi_qc / (2.0 * self.qubit_anharm);
        if radicand < 0.0 {
            return Err(CoreError::NegativeRadicand { radicand });
        }
        Ok(radicand.sqrt())
    }

    /// n_crit = (w_q - w_c)^2 / (4 g_qc^2), the photon scale where the
    /// dispersive approximation degrades.
    pub fn critical_photon_number(&self) -> Result<f64> {
        let g = self.qubit_resonator_coupling()?;
        if g == 0.0 {
            return Err(CoreError::DivisionByZero { context: "n_crit with g_qc = 0" });
        }
        let delta = self.qubit_freq - self.resonator_freq;
        Ok(delta * delta / (4.0 * g * g))
    }

    /// Normal modes at the resonant condition w_f = w_c:
    /// w_pm + i kappa_pm/2 = w_c + i kappa_f/4 +- sqrt(g_cf^2 - (kappa_f/4)^2).
    ///
    /// The complex square root covers both regimes: for 4 g_cf >= kappa_f the
    /// linewidths are exactly kappa_f/2 each; below that threshold the mode
    /// frequencies coincide and the linewidths split.
    pub fn hybridized_modes(&self) -> HybridModes {
        let quarter = 0.25 * self.kappa_f;
        let s = Complex64::new(self.g_cf * self.g_cf - quarter * quarter, 0.0).sqrt();
        let center = Complex64::new(self.resonator_freq, quarter);
        let lp = center + s;
        let lm = center - s;
        let (kp, km) = (2.0 * lp.im, 2.0 * lm.im);
        // Resonator weight of eigenvector (g, lambda - w_c) is larger for the
        // eigenvalue closer to w_c; ties (always, when 4g >= kappa) resolve to
        // smaller |Im|, then to Minus.
        let dp = (lp.re - self.resonator_freq).hypot(lp.im);
        let dm = (lm.re - self.resonator_freq).hypot(lm.im);
        let readout_like_index = if (dp - dm).abs() > 1e-12 * dp.max(dm) {
            if dp < dm { ModeIndex::Plus } else { ModeIndex::Minus }
        } else if (lp.im.abs() - lm.im.abs()).abs() > 1e-12 * lp.im.abs().max(lm.im.abs()) {
            if lp.im.abs() < lm.im.abs() { ModeIndex::Plus } else { ModeIndex::Minus }
        } else {
            ModeIndex::Minus
        };
        HybridModes {
            omega_plus: lp.re,
            omega_minus: lm.re,
            kappa_plus: kp,
            kappa_minus: km,
            readout_like_index,
        }
    }

    /// Effective linewidth and dressed frequency of the readout-like mode for
    /// arbitrary filter detuning.
    ///
    /// Eigen-decomposes [[w_c, g],[g, w_f - i kappa_f/2]]; the eigenvalue
    /// whose eigenvector has the larger resonator-component magnitude defines
    /// w_eff - i kappa_eff/2 (tie resolves to the smaller |Im| branch).
    pub fn effective_linewidth(&self) -> (f64, f64) {
        let a = Complex64::new(self.resonator_freq, 0.0);
        let b = Complex64::new(self.filter_freq, -0.5 * self.kappa_f);
        let g = self.g_cf;
        if g == 0.0 {
            // bare lossless resonator
            return (0.0, self.resonator_freq);
        }
        let half_tr = 0.5 * (a + b);
        let s = (0.25 * (a - b) * (a - b) + Complex64::new(g * g, 0.0)).sqrt();
        let l1 = half_tr + s;
        let l2 = half_tr - s;
        // eigenvector for lambda is (g, lambda - a); resonator weight is
        // larger when |lambda - a| is smaller
        let d1 = (l1 - a).norm();
        let d2 = (l2 - a).norm();
        let pick = if (d1 - d2).abs() > 1e-12 * d1.max(d2) {
            if d1 < d2 { l1 } else { l2 }
        } else if l1.im.abs() <= l2.im.abs() {
            l1
        } else {
            l2
        };
        (-2.0 * pick.im, pick.re)
    }
}

/// Pure dephasing time from echo and relaxation times:
/// T_phi = [(T2_echo)^-1 - (2 T1)^-1]^-1.
///
/// Returns `f64::INFINITY` when T2_echo = 2 T1 within `rel_tol` (no pure
/// dephasing); errors if T2_echo exceeds 2 T1 beyond the tolerance.
pub fn pure_dephasing_time(t2_echo: f64, t1: f64, rel_tol: f64) -> Result<f64> {
    if !(t2_echo > 0.0) || !(t1 > 0.0) {
        return Err(CoreError::InvalidInput {
            context: format!("times must be positive: T2_echo = {t2_echo:.3e}, T1 = {t1:.3e}"),
        });
    }
    let two_t1 = 2.0 * t1;
    if t2_echo > two_t1 * (1.0 + rel_tol) {
        return Err(CoreError::InconsistentTimes { t2_echo, two_t1 });
    }
    if (two_t1 - t2_echo).abs() <= rel_tol * two_t1 {
        return Ok(f64::INFINITY);
    }
    Ok(1.0 / (1.0 / t2_echo - 1.0 / two_t1))
}

/// Device parameters bundled with the crate (the tabulated reference device).
pub fn bundled_device_json() -> &'static str {
    include_str!("../../../data/device_tables.json")
}

pub fn bundled_device() -> DeviceParams {
    DeviceParams::from_json_str(bundled_device_json())
        .expect("bundled device tables must parse and validate")
}
