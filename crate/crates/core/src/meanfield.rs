//! Classical mean-field model of the driven resonator + Kerr filter pair:
//! coupled-amplitude equations of motion, fixed-step RK4 integration,
//! closed-form steady-state branches of the bifurcation cubic with stability
//! classification, input-output signals, the semiclassical measurement rate
//! via amplitude continuation, and the Gaussian separation-error estimate.
//!
//! Everything here works on the two complex amplitudes c (resonator) and f
//! (filter) in the frame rotating at the drive, with |c|^2 and |f|^2 equal
//! to photon numbers.

use nalgebra::Matrix4;
use num_complex::Complex64;

use crate::device::{DeviceParams, DriveSpec, QubitState};
use crate::error::{CoreError, Result};
use crate::linear::s11_linear;
use crate::par::par_map;

const I: Complex64 = Complex64::new(0.0, 1.0);

/// Cap on the RK4 step relative to the fastest rate in the equations.
const STEP_GUARD: f64 = 0.05;
/// Continuation steps used by `measurement_rate` and the nonlinear sweep.
const CONTINUATION_STEPS: usize = 100;
/// Relative gap below which two cubic roots are reported as one.
const ROOT_MERGE_REL: f64 = 1e-9;

/// Mean amplitudes of the resonator (c) and filter (f); squared moduli are
/// photon numbers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanFieldState {
    pub c: Complex64,
    pub f: Complex64,
}

impl MeanFieldState {
    pub fn vacuum() -> Self {
        MeanFieldState { c: Complex64::new(0.0, 0.0), f: Complex64::new(0.0, 0.0) }
    }

    /// Total excitation |c|^2 + |f|^2.
    pub fn total_excitation(&self) -> f64 {
        self.c.norm_sqr() + self.f.norm_sqr()
    }

    fn dist(&self, other: &MeanFieldState) -> f64 {
        ((self.c - other.c).norm_sqr() + (self.f - other.f).norm_sqr()).sqrt()
    }
}

/// One steady-state solution of the driven system.
#[derive(Debug, Clone, Copy)]
pub struct SteadyBranch {
    /// filter photons |f|^2
    pub n_f: f64,
    /// resonator photons |c|^2
    pub n_c: f64,
    pub state: MeanFieldState,
    pub stable: bool,
    pub jacobian_eigs: [Complex64; 4],
    /// norm of the equations of motion at `state` (rad/s amplitude units)
    pub residual: f64,
    /// true when this root absorbed a near-degenerate partner
    pub degenerate: bool,
}

/// Input and output traveling-wave amplitudes in photon-flux normalization.
#[derive(Debug, Clone, Copy)]
pub struct InputOutput {
    pub b_in: Complex64,
    pub b_out: Complex64,
}

/// Time-sampled mean-field trajectory.
#[derive(Debug, Clone)]
pub struct MfTrajectory {
    pub times: Vec<f64>,
    pub states: Vec<MeanFieldState>,
}

/// Reflection sample from the driven nonlinear model.
#[derive(Debug, Clone, Copy)]
pub struct NonlinearPoint {
    /// drive frequency (rad/s)
    pub freq: f64,
    pub s11: Complex64,
    pub phase: f64,
    /// more than one stable branch exists at this frequency
    pub multistable: bool,
}

/// Nonlinear reflection spectra for both qubit states.
#[derive(Debug, Clone)]
pub struct NonlinearSweep {
    pub g: Vec<NonlinearPoint>,
    pub e: Vec<NonlinearPoint>,
}

/// Right-hand side of the coupled amplitude equations:
/// dc/dt = -i d_c' c - i g_cf f
/// df/dt = [-i (d_f + alpha_f |f|^2) - kappa_f/2] f - i g_cf c - i Omega/2
pub fn mf_rhs(state: &MeanFieldState, device: &DeviceParams, drive: &DriveSpec) -> MeanFieldState {
    let det = device.detunings(drive);
    let dc = -I * det.delta_c_prime * state.c - I * device.g_cf * state.f;
    let df = (-I * (det.delta_f + device.filter_anharm * state.f.norm_sqr())
        - Complex64::new(0.5 * device.kappa_f, 0.0))
        * state.f
        - I * device.g_cf * state.c
        - I * (0.5 * drive.drive_amp);
    MeanFieldState { c: dc, f: df }
}

fn max_rate(device: &DeviceParams, drive: &DriveSpec) -> f64 {
    let det = device.detunings(drive);
    device
        .kappa_f
        .max(det.delta_c.abs())
        .max(det.delta_f.abs())
        .max(det.delta_c_prime.abs())
        .max(device.g_cf)
        .max(drive.drive_amp)
}

/// Largest RK4 step the stability guard allows for this device and drive.
pub fn max_step(device: &DeviceParams, drive: &DriveSpec) -> f64 {
    STEP_GUARD / max_rate(device, drive)
}

fn rk4_step(
    state: &MeanFieldState,
    device: &DeviceParams,
    drive: &DriveSpec,
    dt: f64,
) -> MeanFieldState {
    let add = |s: &MeanFieldState, k: &MeanFieldState, h: f64| MeanFieldState {
        c: s.c + k.c * h,
        f: s.f + k.f * h,
    };
    let k1 = mf_rhs(state, device, drive);
    let k2 = mf_rhs(&add(state, &k1, 0.5 * dt), device, drive);
    let k3 = mf_rhs(&add(state, &k2, 0.5 * dt), device, drive);
    let k4 = mf_rhs(&add(state, &k3, dt), device, drive);
    MeanFieldState {
        c: state.c + (k1.c + 2.0 * k2.c + 2.0 * k3.c + k4.c) * (dt / 6.0),
        f: state.f + (k1.f + 2.0 * k2.f + 2.0 * k3.f + k4.f) * (dt / 6.0),
    }
}

/// Fixed-step RK4 integration of the mean-field equations, sampled every
/// `stride` steps (the initial and final states are always included).
///
/// The requested `dt` must respect the stability guard
/// dt <= 0.05 / max(kappa_f, |detunings|, g_cf, Omega); the actual step is
/// t_final divided into an integer number of steps of at most `dt`.
///
/// With Omega = 0 the model is passive, so the total excitation must not
/// grow; each step is checked at 1e-9 relative tolerance.
pub fn mf_integrate(
    state0: &MeanFieldState,
    device: &DeviceParams,
    drive: &DriveSpec,
    t_final: f64,
    dt: f64,
    stride: usize,
) -> Result<MfTrajectory> {
    assert!(t_final > 0.0, "t_final must be positive");
    assert!(dt > 0.0, "dt must be positive");
    assert!(stride > 0, "stride must be positive");
    let max_dt = max_step(device, drive);
    if dt > max_dt {
        return Err(CoreError::StepTooLarge { dt, max_dt });
    }
    let n_steps = (t_final / dt).ceil().max(1.0) as usize;
    let h = t_final / n_steps as f64;
    let passive = drive.drive_amp == 0.0;

    let mut times = Vec::with_capacity(n_steps / stride + 2);
    let mut states = Vec::with_capacity(n_steps / stride + 2);
    times.push(0.0);
    states.push(*state0);
    let mut s = *state0;
    for k in 0..n_steps {
        let next = rk4_step(&s, device, drive, h);
        if passive {
            let (e0, e1) = (s.total_excitation(), next.total_excitation());
            assert!(
                e1 <= e0 * (1.0 + 1e-9) + 1e-300,
                "undriven energy grew from {e0} to {e1} in one step"
            );
        }
        s = next;
        if (k + 1) % stride == 0 || k + 1 == n_steps {
            times.push((k + 1) as f64 * h);
            states.push(s);
        }
    }
    Ok(MfTrajectory { times, states })
}

/// Integrate with the drive amplitude ramped linearly from 0 to its final
/// value over `t_ramp`, then held for `t_hold`. Used to emulate how a
/// readout pulse reaches its operating point.
pub fn mf_integrate_ramped(
    state0: &MeanFieldState,
    device: &DeviceParams,
    drive: &DriveSpec,
    t_ramp: f64,
    t_hold: f64,
    dt: f64,
) -> Result<MeanFieldState> {
    assert!(t_ramp >= 0.0 && t_hold > 0.0);
    let max_dt = max_step(device, drive);
    if dt > max_dt {
        return Err(CoreError::StepTooLarge { dt, max_dt });
    }
    let mut s = *state0;
    if t_ramp > 0.0 {
        let n_ramp = (t_ramp / dt).ceil() as usize;
        let h = t_ramp / n_ramp as f64;
        for k in 0..n_ramp {
            // amplitude at the midpoint of the step, matching RK4's sampling
            let amp = drive.drive_amp * ((k as f64 + 0.5) * h / t_ramp).min(1.0);
            let d = DriveSpec { drive_amp: amp, ..*drive };
            s = rk4_step(&s, device, &d, h);
        }
    }
    let n_hold = (t_hold / dt).ceil() as usize;
    let h = t_hold / n_hold as f64;
    for _ in 0..n_hold {
        s = rk4_step(&s, device, drive, h);
    }
    Ok(s)
}

/// Real positive roots of the steady-state photon-number cubic
/// n [(d_eff + alpha n)^2 + kappa^2/4] = Omega^2/4, Newton-polished and
/// merged when closer than `ROOT_MERGE_REL`. Returns (n, degenerate) pairs
/// in ascending order.
fn photon_cubic_roots(d_eff: f64, alpha: f64, kappa: f64, omega_amp: f64) -> Vec<(f64, bool)> {
    let rhs = 0.25 * omega_amp * omega_amp;
    let g = |n: f64| {
        let u = d_eff + alpha * n;
        n * (u * u + 0.25 * kappa * kappa) - rhs
    };
    let gp = |n: f64| {
        let u = d_eff + alpha * n;
        u * u + 0.25 * kappa * kappa + 2.0 * alpha * n * u
    };

    let mut raw: Vec<f64> = if alpha == 0.0 {
        vec![rhs / (d_eff * d_eff + 0.25 * kappa * kappa)]
    } else {
        // monic cubic n^3 + p2 n^2 + p1 n + p0 = 0
        let a2 = alpha * alpha;
        let p2 = 2.0 * d_eff / alpha;
        let p1 = (d_eff * d_eff + 0.25 * kappa * kappa) / a2;
        let p0 = -rhs / a2;
        // depressed form t^3 + p t + q, n = t - p2/3
        let shift = p2 / 3.0;
        let p = p1 - p2 * shift;
        let q = shift * (2.0 * shift * shift - p1) + p0;
        // fused multiply-adds trim the cancellation in the discriminant
        let disc = (0.25 * q).mul_add(q, p * p * p / 27.0);
        let mut ts = Vec::with_capacity(3);
        if disc <= 0.0 {
            // three real roots (trigonometric form)
            let m = 2.0 * (-p / 3.0).sqrt();
            if m == 0.0 {
                ts.push(0.0);
            } else {
                let arg = (3.0 * q / (p * m)).clamp(-1.0, 1.0);
                let theta = arg.acos() / 3.0;
                for k in 0..3 {
                    ts.push(m * (theta - 2.0 * std::f64::consts::PI * k as f64 / 3.0).cos());
                }
            }
        } else {
            // one real root; pick the non-cancelling cube-root branch
            let s = disc.sqrt();
            let w = if q <= 0.0 { -0.5 * q + s } else { -0.5 * q - s };
            let u = w.cbrt();
            ts.push(if u == 0.0 { 0.0 } else { u - p / (3.0 * u) });
        }
        ts.into_iter().map(|t| t - shift).collect()
    };

    // Newton polish, drop negatives, sort, merge near-degenerate pairs
    let scale = rhs / (d_eff * d_eff + 0.25 * kappa * kappa) + 1e-300;
    for n in raw.iter_mut() {
        for _ in 0..3 {
            let d = gp(*n);
            if d == 0.0 {
                break;
            }
            let step = g(*n) / d;
            *n -= step;
            if step.abs() <= 1e-15 * n.abs() {
                break;
            }
        }
    }
    raw.retain(|&n| n >= -1e-12 * scale);
    let mut roots: Vec<f64> = raw.into_iter().map(|n| n.max(0.0)).collect();
    roots.sort_by(f64::total_cmp);
    let mut merged: Vec<(f64, bool)> = Vec::with_capacity(roots.len());
    for n in roots {
        match merged.last_mut() {
            Some((prev, degenerate)) if n - *prev <= ROOT_MERGE_REL * n.max(*prev).max(1e-300) => {
                *degenerate = true;
            }
            _ => merged.push((n, false)),
        }
    }
    merged
}

/// 4x4 real Jacobian of `mf_rhs` at `state`, in coordinates
/// (Re c, Im c, Re f, Im f).
fn real_jacobian(state: &MeanFieldState, device: &DeviceParams, drive: &DriveSpec) -> Matrix4<f64> {
    let det = device.detunings(drive);
    let zero = Complex64::new(0.0, 0.0);
    // holomorphic/antiholomorphic derivative pairs of each equation
    let dcc = -I * det.delta_c_prime;
    let dcf = -I * device.g_cf;
    let dfc = -I * device.g_cf;
    let dff = -I * (det.delta_f + 2.0 * device.filter_anharm * state.f.norm_sqr())
        - Complex64::new(0.5 * device.kappa_f, 0.0);
    let dff_bar = -I * device.filter_anharm * state.f * state.f;

    let mut j = Matrix4::zeros();
    let mut put = |row: usize, col: usize, a: Complex64, b: Complex64| {
        // block for dF/dz = a, dF/dzbar = b in (x, y) coordinates
        j[(row, col)] = (a + b).re;
        j[(row, col + 1)] = -(a - b).im;
        j[(row + 1, col)] = (a + b).im;
        j[(row + 1, col + 1)] = (a - b).re;
    };
    put(0, 0, dcc, zero);
    put(0, 2, dcf, zero);
    put(2, 0, dfc, zero);
    put(2, 2, dff, dff_bar);
    j
}

/// All steady states of the driven system for the drive's qubit state.
///
/// The resonator equation is eliminated through c = -g_cf f / d_c', turning
/// the filter equation into a cubic in n = |f|^2 with effective detuning
/// d_eff = d_f - g_cf^2/d_c'. Each real nonnegative root is reconstructed
/// into amplitudes, residual-checked against the full equations, and
/// classified by the eigenvalues of the real 4x4 Jacobian. Branches are
/// returned in ascending n_f.
pub fn mf_steady_branches(device: &DeviceParams, drive: &DriveSpec) -> Result<Vec<SteadyBranch>> {
    let det = device.detunings(drive);
    if det.delta_c_prime.abs() < 1e-6 * device.kappa_f {
        return Err(CoreError::ResonantDrive { delta_c_prime_abs: det.delta_c_prime.abs() });
    }
    let d_eff = det.delta_f - device.g_cf * device.g_cf / det.delta_c_prime;
    let roots = photon_cubic_roots(d_eff, device.filter_anharm, device.kappa_f, drive.drive_amp);

    let residual_bound = 1e-10 * drive.drive_amp.max(device.kappa_f);
    let mut branches = Vec::with_capacity(roots.len());
    for (n, degenerate) in roots {
        let f = -Complex64::new(0.5 * drive.drive_amp, 0.0)
            / Complex64::new(d_eff + device.filter_anharm * n, -0.5 * device.kappa_f);
        let c = -device.g_cf * f / det.delta_c_prime;
        let state = MeanFieldState { c, f };
        let rhs = mf_rhs(&state, device, drive);
        let residual = rhs.total_excitation().sqrt();
        if residual >= residual_bound {
            return Err(CoreError::InvalidInput {
                context: format!(
                    "steady-branch residual {residual:.3e} rad/s exceeds bound {residual_bound:.3e}"
                ),
            });
        }
        let eigs = real_jacobian(&state, device, drive).complex_eigenvalues();
        let jacobian_eigs = [eigs[0], eigs[1], eigs[2], eigs[3]];
        let stable = jacobian_eigs.iter().all(|l| l.re < 0.0);
        branches.push(SteadyBranch {
            n_f: f.norm_sqr(),
            n_c: c.norm_sqr(),
            state,
            stable,
            jacobian_eigs,
            residual,
            degenerate,
        });
    }
    Ok(branches)
}

/// Input and output amplitudes for a mean-field state:
/// b_in = Omega/(2 sqrt(kappa_f)), b_out = b_in - i sqrt(kappa_f) f.
pub fn io_transform(
    state: &MeanFieldState,
    drive: &DriveSpec,
    device: &DeviceParams,
) -> InputOutput {
    assert!(device.kappa_f > 0.0, "io_transform needs kappa_f > 0");
    let rk = device.kappa_f.sqrt();
    let b_in = Complex64::new(0.5 * drive.drive_amp / rk, 0.0);
    InputOutput { b_in, b_out: b_in - I * rk * state.f }
}

/// Stable branch reached by an adiabatic upward amplitude ramp from vacuum:
/// the amplitude is stepped from 0 to `drive.drive_amp` in
/// `CONTINUATION_STEPS` equal steps, following the stable root closest to
/// the previous state (hysteresis-aware, deterministic). This is the branch
/// an experiment lands on when the tone is switched on smoothly.
pub fn continuation_branch(device: &DeviceParams, drive: &DriveSpec) -> Result<SteadyBranch> {
    let mut current = MeanFieldState::vacuum();
    let mut picked = None;
    for k in 1..=CONTINUATION_STEPS {
        let amp = drive.drive_amp * k as f64 / CONTINUATION_STEPS as f64;
        let step_drive = DriveSpec { drive_amp: amp, ..*drive };
        let branches = mf_steady_branches(device, &step_drive)?;
        let chosen = branches
            .into_iter()
            .filter(|b| b.stable)
            .min_by(|a, b| a.state.dist(&current).total_cmp(&b.state.dist(&current)))
            .ok_or(CoreError::NoStableBranch { step: k, steps: CONTINUATION_STEPS })?;
        current = chosen.state;
        picked = Some(chosen);
    }
    Ok(picked.expect("continuation always runs at least one step"))
}

/// Semiclassical measurement rate at drive (omega, Omega):
/// Gamma_meas = |b_out^e - b_out^g|^2 / 2, with each output taken on the
/// stable branch reached by upward amplitude continuation from vacuum.
/// Returns (Gamma_meas, b_out_g, b_out_e).
pub fn measurement_rate(
    device: &DeviceParams,
    omega: f64,
    omega_amp: f64,
) -> Result<(f64, Complex64, Complex64)> {
    let mut outs = [Complex64::new(0.0, 0.0); 2];
    for (i, state) in [QubitState::G, QubitState::E].into_iter().enumerate() {
        let drive = DriveSpec::new(omega, omega_amp, state)?;
        let branch = continuation_branch(device, &drive)?;
        outs[i] = io_transform(&branch.state, &drive, device).b_out;
    }
    Ok((0.5 * (outs[1] - outs[0]).norm_sqr(), outs[0], outs[1]))
}

/// Small-amplitude extrapolation of the measurement rate from the linear
/// reflection contrast: Gamma = |S11^e - S11^g|^2 Omega^2 / (8 kappa_f).
pub fn linear_rate_extrapolation(device: &DeviceParams, omega: f64, omega_amp: f64) -> f64 {
    let ds = s11_linear(device, omega, QubitState::E) - s11_linear(device, omega, QubitState::G);
    ds.norm_sqr() * omega_amp * omega_amp / (8.0 * device.kappa_f)
}

/// Reflection spectra of the driven nonlinear model for both qubit states.
/// Each grid point is continuation-selected independently (parallel over the
/// grid); `multistable` marks frequencies with more than one stable branch.
pub fn s11_nonlinear_sweep(
    device: &DeviceParams,
    omega_amp: f64,
    grid: &[f64],
) -> Result<NonlinearSweep> {
    assert!(!grid.is_empty(), "frequency grid must be nonempty");
    assert!(omega_amp > 0.0, "reflection needs a nonzero drive");
    let sweep_state = |state: QubitState| -> Result<Vec<NonlinearPoint>> {
        let pts = par_map(grid.len(), |i| -> Result<NonlinearPoint> {
            let drive = DriveSpec::new(grid[i], omega_amp, state)?;
            let branch = continuation_branch(device, &drive)?;
            let io = io_transform(&branch.state, &drive, device);
            let s11 = io.b_out / io.b_in;
            let n_stable =
                mf_steady_branches(device, &drive)?.iter().filter(|b| b.stable).count();
            Ok(NonlinearPoint {
                freq: grid[i],
                s11,
                phase: s11.im.atan2(s11.re),
                multistable: n_stable > 1,
            })
        });
        pts.into_iter().collect()
    };
    Ok(NonlinearSweep { g: sweep_state(QubitState::G)?, e: sweep_state(QubitState::E)? })
}

/// Gaussian-overlap separation error of an integrated readout:
/// epsilon = erfc(sqrt(eta Gamma tau / 2)) / 2.
pub fn separation_error(gamma_meas: f64, tau: f64, eta: f64) -> f64 {
    assert!(gamma_meas >= 0.0, "measurement rate must be nonnegative");
    assert!(tau > 0.0, "integration time must be positive");
    assert!(eta > 0.0 && eta <= 1.0, "efficiency must lie in (0, 1]");
    0.5 * libm::erfc((0.5 * eta * gamma_meas * tau).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::device::{bundled_device, TWO_PI};
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dev() -> DeviceParams {
        bundled_device()
    }

    fn op_drive(state: QubitState) -> DriveSpec {
        DriveSpec::new(TWO_PI * 9.8e9, TWO_PI * 0.76e9, state).unwrap()
    }

    fn rand_c(rng: &mut ChaCha8Rng, scale: f64) -> Complex64 {
        Complex64::new(rng.gen_range(-scale..scale), rng.gen_range(-scale..scale))
    }

    #[test]
    fn rhs_fixed_point_and_drive_entry() {
        let d = dev();
        let vac = MeanFieldState::vacuum();
        let quiet = DriveSpec::new(TWO_PI * 9.8e9, 0.0, QubitState::G).unwrap();
        let r0 = mf_rhs(&vac, &d, &quiet);
        assert_eq!(r0.total_excitation(), 0.0);

        let driven = op_drive(QubitState::G);
        let r1 = mf_rhs(&vac, &d, &driven);
        assert_eq!(r1.c, Complex64::new(0.0, 0.0));
        assert_abs_diff_eq!(r1.f.re, 0.0, epsilon = 1e-12);
        assert_relative_eq!(r1.f.im, -0.5 * driven.drive_amp, max_relative = 1e-14);
    }

    #[test]
    fn rhs_matches_linear_matrix_when_kerr_off() {
        let d = DeviceParams { filter_anharm: 0.0, ..dev() };
        let drive = op_drive(QubitState::E);
        let det = d.detunings(&drive);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let s = MeanFieldState { c: rand_c(&mut rng, 5.0), f: rand_c(&mut rng, 5.0) };
            let r = mf_rhs(&s, &d, &drive);
            let dc = -I * det.delta_c_prime * s.c - I * d.g_cf * s.f;
            let df = (-I * det.delta_f - Complex64::new(0.5 * d.kappa_f, 0.0)) * s.f
                - I * d.g_cf * s.c
                - I * (0.5 * drive.drive_amp);
            assert!((r.c - dc).norm() <= 1e-15 * dc.norm().max(1.0));
            assert!((r.f - df).norm() <= 1e-15 * df.norm().max(1.0));
        }
    }

    #[test]
    fn integrate_damped_mode_and_step_guard() {
        let d = DeviceParams { g_cf: 0.0, ..dev() };
        let drive = DriveSpec::new(d.filter_freq, 0.0, QubitState::G).unwrap();
        let s0 = MeanFieldState { c: Complex64::new(0.0, 0.0), f: Complex64::new(1.0, 0.0) };
        let t_final = 3.0 / d.kappa_f;
        let dt = max_step(&d, &drive) / 4.0;
        let traj = mf_integrate(&s0, &d, &drive, t_final, dt, 16).unwrap();
        for (t, s) in traj.times.iter().zip(&traj.states) {
            assert_relative_eq!(s.f.norm_sqr(), (-d.kappa_f * t).exp(), max_relative = 1e-7);
        }

        let err = mf_integrate(&s0, &d, &drive, t_final, 1.0, 1);
        assert!(matches!(err, Err(CoreError::StepTooLarge { .. })));
    }

    #[test]
    fn integrate_energy_never_grows_without_drive() {
        let d = dev();
        let drive = DriveSpec::new(TWO_PI * 9.8e9, 0.0, QubitState::E).unwrap();
        let s0 = MeanFieldState { c: Complex64::new(0.8, -0.3), f: Complex64::new(-0.2, 0.5) };
        let traj =
            mf_integrate(&s0, &d, &drive, 20e-9, max_step(&d, &drive), 1).unwrap();
        for w in traj.states.windows(2) {
            assert!(w[1].total_excitation() <= w[0].total_excitation() * (1.0 + 1e-9));
        }
    }

    /// Time after which the undriven total excitation stays at or below
    /// `level`, starting from one resonator photon.
    fn settle_time(d: &DeviceParams, frame: f64, level: f64) -> f64 {
        let drive = DriveSpec::new(frame, 0.0, QubitState::G).unwrap();
        let s0 = MeanFieldState { c: Complex64::new(1.0, 0.0), f: Complex64::new(0.0, 0.0) };
        let traj = mf_integrate(&s0, d, &drive, 15e-9, 1e-11, 1).unwrap();
        let mut last_above = 0usize;
        for (i, s) in traj.states.iter().enumerate() {
            if s.total_excitation() > level {
                last_above = i;
            }
        }
        assert!(last_above + 1 < traj.times.len(), "never settled below {level}");
        traj.times[last_above + 1]
    }

    #[test]
    fn ring_down_reaches_ten_nanoseconds() {
        // one resonator photon drains through the filter in about 10 ns when
        // the filter sits on the resonator; with the Kerr term off the decay
        // matches the linear two-mode closed form (frozen: 9.781 ns)
        let dlin = DeviceParams { filter_anharm: 0.0, ..dev() }.with_filter_detuning(0.0);
        let t_lin = settle_time(&dlin, dlin.resonator_freq, 1e-4);
        assert!(t_lin > 9e-9 && t_lin < 11e-9, "settles at {t_lin:.3e} s");
        assert_abs_diff_eq!(t_lin, 9.781e-9, epsilon = 0.05e-9);

        // the Kerr shift detunes the beat while the photon drains, delaying
        // settling by half a swing but staying inside the 10 ns picture
        let d0 = dev().with_filter_detuning(0.0);
        let t_kerr = settle_time(&d0, d0.resonator_freq, 1e-4);
        assert!(t_kerr > 9e-9 && t_kerr < 11e-9, "settles at {t_kerr:.3e} s");
        assert_abs_diff_eq!(t_kerr, 10.40e-9, epsilon = 0.05e-9);

        // the tabulated 1.7 MHz filter offset barely changes the answer
        let d = dev();
        let t_tab = settle_time(&d, TWO_PI * 9.8e9, 1e-4);
        assert!(t_tab > 9e-9 && t_tab < 11e-9, "settles at {t_tab:.3e} s");
    }

    #[test]
    fn steady_branches_frozen_operating_point() {
        let d = dev();
        let bg = mf_steady_branches(&d, &op_drive(QubitState::G)).unwrap();
        let stable_g: Vec<&SteadyBranch> = bg.iter().filter(|b| b.stable).collect();
        assert!(!stable_g.is_empty());
        // continuation from vacuum lands on the low branch; check it exists
        // with the frozen photon numbers
        let low = &bg[0];
        assert!(low.stable);
        assert_relative_eq!(low.n_f, 0.13159, max_relative = 1e-3);
        assert_relative_eq!(low.n_c, 19.1217, max_relative = 1e-3);
        // internal consistency: |c|^2/|f|^2 = (g_cf/d_c')^2 exactly
        let det = d.detunings(&op_drive(QubitState::G));
        let ratio = (d.g_cf / det.delta_c_prime).powi(2);
        assert_relative_eq!(low.n_c / low.n_f, ratio, max_relative = 1e-12);

        let be = mf_steady_branches(&d, &op_drive(QubitState::E)).unwrap();
        let e_match = be
            .iter()
            .find(|b| (b.n_f - 4.16387).abs() < 0.05)
            .expect("e-state branch near |f|^2 = 4.16 missing");
        assert_relative_eq!(e_match.n_f, 4.16387, max_relative = 1e-3);
        assert_relative_eq!(e_match.n_c, 88.3885, max_relative = 1e-3);
        assert!(e_match.n_c > low.n_c);
    }

    #[test]
    fn steady_branches_zero_drive_and_resonant_refusal() {
        let d = dev();
        let quiet = DriveSpec::new(TWO_PI * 9.8e9, 0.0, QubitState::G).unwrap();
        let b = mf_steady_branches(&d, &quiet).unwrap();
        assert_eq!(b.len(), 1);
        assert_eq!(b[0].n_f, 0.0);
        assert!(b[0].stable);

        let resonant = DriveSpec::new(d.resonator_freq, TWO_PI * 1e8, QubitState::G).unwrap();
        assert!(matches!(
            mf_steady_branches(&d, &resonant),
            Err(CoreError::ResonantDrive { .. })
        ));
    }

    #[test]
    fn branch_scan_residuals_counts_and_stability() {
        let d = dev();
        let mut saw_three = false;
        for state in [QubitState::G, QubitState::E] {
            for i in 0..41 {
                let omega = TWO_PI * (9.79e9 + 0.02e9 * i as f64 / 40.0);
                for amp_ghz in [0.1, 0.76, 2.0] {
                    let drive =
                        DriveSpec::new(omega, TWO_PI * amp_ghz * 1e9, state).unwrap();
                    let branches = match mf_steady_branches(&d, &drive) {
                        Ok(b) => b,
                        Err(CoreError::ResonantDrive { .. }) => continue,
                        Err(e) => panic!("unexpected error: {e}"),
                    };
                    let bound = 1e-10 * (drive.drive_amp + d.kappa_f);
                    for b in &branches {
                        assert!(b.residual < bound, "residual {} >= {}", b.residual, bound);
                    }
                    let degenerate = branches.iter().any(|b| b.degenerate);
                    assert!(
                        branches.len() == 1 || branches.len() == 3 || degenerate,
                        "{} roots without degeneracy flag",
                        branches.len()
                    );
                    if branches.len() == 3 {
                        saw_three = true;
                        assert!(branches[0].stable);
                        assert!(!branches[1].stable, "middle branch must be unstable");
                        assert!(branches[2].stable);
                    }
                }
            }
        }
        assert!(saw_three, "scan never entered the bistable region");
    }

    #[test]
    fn io_trivial_cases_and_energy_balance() {
        let d = dev();
        let drive = op_drive(QubitState::G);
        let io0 = io_transform(&MeanFieldState::vacuum(), &drive, &d);
        assert_eq!(io0.b_out, io0.b_in);

        let quiet = DriveSpec::new(drive.drive_freq, 0.0, QubitState::G).unwrap();
        let f = Complex64::new(0.3, -0.7);
        let io1 = io_transform(&MeanFieldState { c: Complex64::new(0.0, 0.0), f }, &quiet, &d);
        assert_eq!(io1.b_in, Complex64::new(0.0, 0.0));
        assert_relative_eq!((io1.b_out - -I * d.kappa_f.sqrt() * f).norm(), 0.0, epsilon = 1e-12);

        // lossless port: |b_out| = |b_in| on every steady branch
        for state in [QubitState::G, QubitState::E] {
            let dr = op_drive(state);
            for b in mf_steady_branches(&d, &dr).unwrap() {
                let io = io_transform(&b.state, &dr, &d);
                assert_relative_eq!(io.b_out.norm(), io.b_in.norm(), max_relative = 1e-8);
            }
        }
    }

    #[test]
    fn low_power_reflection_matches_linear_theory() {
        let d = dev();
        let amp = 1e-4 * d.kappa_f;
        let mut rng = ChaCha8Rng::seed_from_u64(0xB0);
        for _ in 0..100 {
            let omega = d.resonator_freq + TWO_PI * rng.gen_range(-0.5e9..0.5e9);
            let state = if rng.gen_bool(0.5) { QubitState::G } else { QubitState::E };
            let drive = DriveSpec::new(omega, amp, state).unwrap();
            let branch = continuation_branch(&d, &drive).unwrap();
            let io = io_transform(&branch.state, &drive, &d);
            let s11 = io.b_out / io.b_in;
            assert!((s11 - s11_linear(&d, omega, state)).norm() < 1e-6);
        }
    }

    #[test]
    fn measurement_rate_small_drive_slope_and_chi_zero() {
        let d = dev();
        let omega = TWO_PI * 9.8e9;
        let amp = TWO_PI * 1e6;
        let (gamma, _, _) = measurement_rate(&d, omega, amp).unwrap();
        assert_relative_eq!(
            gamma,
            linear_rate_extrapolation(&d, omega, amp),
            max_relative = 1e-4
        );

        let d0 = DeviceParams { chi_qc: 0.0, ..d };
        let (g0, bg, be) = measurement_rate(&d0, omega, op_drive(QubitState::G).drive_amp)
            .unwrap();
        assert_eq!(g0, 0.0);
        assert_eq!(bg, be);
    }

    #[test]
    fn measurement_rate_frozen_operating_point_beats_linear() {
        let d = dev();
        let omega = TWO_PI * 9.8e9;
        let amp = TWO_PI * 0.76e9;
        let (gamma, bg, be) = measurement_rate(&d, omega, amp).unwrap();
        assert_relative_eq!(gamma, 4.79610e9, max_relative = 1e-3);
        assert!((be - bg).norm() > 0.0);
        let lin = linear_rate_extrapolation(&d, omega, amp);
        assert!(gamma > 3.0 * lin, "rate {gamma:.3e} not >3x linear {lin:.3e}");
        assert_relative_eq!(gamma / lin, 16.26, max_relative = 2e-3);
    }

    #[test]
    fn ramped_integration_lands_on_a_stable_branch() {
        // 50 random devices and drives: the adiabatically ramped integrator
        // must settle onto one of the solver's stable branches
        let base = dev();
        let mut rng = ChaCha8Rng::seed_from_u64(0x50B1);
        let mut checked = 0;
        let mut attempts = 0;
        while checked < 50 {
            attempts += 1;
            assert!(attempts < 500, "draw acceptance collapsed");
            let d = DeviceParams {
                kappa_f: TWO_PI * rng.gen_range(0.15e9..0.45e9),
                g_cf: TWO_PI * rng.gen_range(50e6..140e6),
                filter_anharm: -TWO_PI * rng.gen_range(0.02e9..0.2e9),
                filter_freq: base.resonator_freq + TWO_PI * rng.gen_range(-0.15e9..0.15e9),
                ..base
            };
            let state = if rng.gen_bool(0.5) { QubitState::G } else { QubitState::E };
            let omega = base.resonator_freq + TWO_PI * rng.gen_range(-0.3e9..0.3e9);
            let amp = TWO_PI * rng.gen_range(0.01e9..0.4e9);
            let drive = match DriveSpec::new(omega, amp, state) {
                Ok(dr) => dr,
                Err(_) => continue,
            };
            let branches = match mf_steady_branches(&d, &drive) {
                Ok(b) => b,
                Err(_) => continue,
            };
            if !branches.iter().any(|b| b.stable) {
                continue;
            }
            // settle for many lifetimes of the slowest relaxation eigenvalue
            // among the stable branches (folds slow the dynamics far below
            // the linear hybrid-mode rates)
            let slowest = branches
                .iter()
                .filter(|b| b.stable)
                .flat_map(|b| b.jacobian_eigs.iter().map(|l| -l.re))
                .fold(f64::INFINITY, f64::min);
            if !(slowest > TWO_PI * 3e6) {
                continue;
            }
            let t_hold = (30.0 / slowest).max(100e-9);
            let dt = max_step(&d, &drive) / 2.0;
            let fin = mf_integrate_ramped(&MeanFieldState::vacuum(), &d, &drive, 20e-9, t_hold, dt)
                .unwrap();
            let nearest = branches
                .iter()
                .filter(|b| b.stable)
                .map(|b| b.state.dist(&fin))
                .fold(f64::INFINITY, f64::min);
            assert!(nearest < 1e-6, "ramped endpoint {nearest:.2e} away from stable branches");
            checked += 1;
        }
    }

    #[test]
    fn nonlinear_sweep_limits_and_state_dependent_jump() {
        let d = dev();
        let n = 101;
        let grid: Vec<f64> = (0..n)
            .map(|i| TWO_PI * (9.775e9 + 0.05e9 * i as f64 / (n - 1) as f64))
            .collect();

        // weak drive reproduces linear reflection
        let weak = s11_nonlinear_sweep(&d, 1e-4 * d.kappa_f, &grid).unwrap();
        for (p, &w) in weak.g.iter().zip(&grid) {
            assert!((p.s11 - s11_linear(&d, w, QubitState::G)).norm() < 1e-6);
            assert!(!p.multistable);
        }

        // no Kerr: spectrum independent of drive strength
        let dlin = DeviceParams { filter_anharm: 0.0, ..d };
        let a = s11_nonlinear_sweep(&dlin, 1e-4 * d.kappa_f, &grid).unwrap();
        let b = s11_nonlinear_sweep(&dlin, TWO_PI * 2e9, &grid).unwrap();
        for (pa, pb) in a.e.iter().zip(&b.e) {
            assert!((pa.s11 - pb.s11).norm() < 1e-9);
        }

        // operating drive: reflection jumps at a qubit-state-dependent
        // frequency and multistability is flagged somewhere on the grid
        let strong = s11_nonlinear_sweep(&d, TWO_PI * 0.76e9, &grid).unwrap();
        let jump_at = |pts: &[NonlinearPoint]| -> Option<usize> {
            let mut best = (0.0, None);
            for i in 1..pts.len() {
                let gap = (pts[i].s11 - pts[i - 1].s11).norm();
                if gap > best.0 {
                    best = (gap, Some(i));
                }
            }
            if best.0 > 0.5 {
                best.1
            } else {
                None
            }
        };
        let jg = jump_at(&strong.g).expect("no g-state phase jump");
        let je = jump_at(&strong.e).expect("no e-state phase jump");
        assert_ne!(jg, je, "branch switch must move with the qubit state");
        assert!(strong.g.iter().any(|p| p.multistable));
    }

    #[test]
    fn separation_error_values_and_monotonicity() {
        assert_eq!(separation_error(0.0, 1e-6, 1.0), 0.5);
        assert_relative_eq!(separation_error(18e6, 1e-6, 1.0), 1.104525e-5, max_relative = 1e-5);
        let mut prev = separation_error(1e6, 50e-9, 0.5);
        for k in 1..6 {
            let tau = 50e-9 * 2f64.powi(k);
            let e = separation_error(1e6, tau, 0.5);
            assert!(e < prev);
            prev = e;
        }
        assert!(separation_error(1e6, 1e-6, 0.9) < separation_error(1e6, 1e-6, 0.3));
    }
}
