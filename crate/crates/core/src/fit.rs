//! Shared-parameter extraction from measurement-induced dephasing spectra.
//!
//! The experiment this reproduces sweeps the measurement-tone frequency at
//! fixed low power for several magnet-coil settings. Moving the coil moves
//! only the filter frequency, so every spectrum is fit simultaneously with
//! one shared set of device parameters (resonator frequency, dispersive
//! shift, resonator-filter coupling, filter linewidth) plus one filter
//! frequency per group. The model is the low-power reflection contrast,
//! [`crate::linear::meas_dephasing_model`].
//!
//! The optimizer is a damped (Levenberg-Marquardt) Gauss-Newton loop with
//! forward-difference Jacobians, written once and reused by the
//! single-parameter filter-anharmonicity fit ([`fit_kerr`]), which matches
//! nonlinear reflection phases instead of dephasing rates. Weighting is
//! 1/sigma per point; neither choice is dictated by the source experiment,
//! which does not state its optimizer.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::device::{DeviceParams, TWO_PI};
use crate::error::{CoreError, Result};
use crate::linear::meas_dephasing_model;
use crate::meanfield::s11_nonlinear_sweep;
use crate::par::par_map;

/// Shared-parameter count and layout of the fit vector:
/// `[resonator_freq, chi_qc, g_cf, kappa_f, filter_freq(group 0), ...]`.
pub const SHARED_PARAMS: usize = 4;

/// Fallback resonator-filter coupling guess when no spectrum shows a
/// resolved mode splitting.
const G_CF_INIT_FALLBACK: f64 = TWO_PI * 100.0e6;
/// Damping growth/shrink factors and abandonment threshold.
const LAMBDA_GROW: f64 = 10.0;
const LAMBDA_SHRINK: f64 = 3.0;
const LAMBDA_MAX: f64 = 1e12;
/// Cost assigned to a parameter point where the model itself fails to
/// evaluate (e.g. no stable branch in the nonlinear phase fit): large enough
/// that the step is always rejected, finite so the loop keeps control.
const UNEVALUABLE_RESIDUAL: f64 = 1e12;

/// One measured point of a dephasing spectrum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FitPoint {
    /// Measurement-tone angular frequency (rad/s).
    pub omega_meas: f64,
    /// Tone power at the device (W).
    pub p_meas: f64,
    /// Measured dephasing rate (1/s).
    pub gamma: f64,
    /// One-sigma uncertainty of `gamma` (1/s).
    pub sigma: f64,
}

/// One coil setting: a tag and its measured spectrum.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitDataset {
    pub group_tag: String,
    pub points: Vec<FitPoint>,
}

impl FitDataset {
    pub fn validate(&self) -> Result<()> {
        if self.points.len() < 4 {
            return Err(CoreError::InvalidInput {
                context: format!(
                    "group '{}' has {} points; at least 4 are needed per group",
                    self.group_tag,
                    self.points.len()
                ),
            });
        }
        for (i, pt) in self.points.iter().enumerate() {
            if !(pt.sigma > 0.0) || !pt.sigma.is_finite() {
                return Err(CoreError::InvalidInput {
                    context: format!(
                        "group '{}' point {i}: sigma must be positive and finite, got {:.3e}",
                        self.group_tag, pt.sigma
                    ),
                });
            }
            if !(pt.omega_meas > 0.0) || !pt.p_meas.is_finite() || !pt.gamma.is_finite() {
                return Err(CoreError::InvalidInput {
                    context: format!("group '{}' point {i}: non-finite or nonpositive fields", self.group_tag),
                });
            }
        }
        Ok(())
    }
}

/// Shared device parameters recovered by the fit (all rad/s).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FitShared {
    pub resonator_freq: f64,
    pub chi_qc: f64,
    pub g_cf: f64,
    pub kappa_f: f64,
}

/// Outcome of the simultaneous multi-group fit.
#[derive(Debug, Clone, Serialize)]
pub struct FitResult {
    pub shared: FitShared,
    /// Fitted filter frequency per group, in dataset order (rad/s).
    pub filter_freqs: Vec<f64>,
    pub group_tags: Vec<String>,
    /// Full covariance of the fit vector (row-major, `(4+G)^2`), in the
    /// layout documented at [`SHARED_PARAMS`].
    pub covariance: Vec<Vec<f64>>,
    pub chi2_reduced: f64,
    /// Weighted residuals at the optimum, concatenated in dataset order.
    pub residuals: Vec<f64>,
    pub iterations: usize,
    /// False when the iteration cap was hit before the cost plateaued; the
    /// best parameters found are still reported.
    pub converged: bool,
}

impl FitResult {
    /// Standard error of fit-vector entry `j` (square root of the
    /// covariance diagonal).
    pub fn stderr(&self, j: usize) -> f64 {
        self.covariance[j][j].max(0.0).sqrt()
    }

    /// Correlation coefficient between fit-vector entries `i` and `j`.
    pub fn correlation(&self, i: usize, j: usize) -> f64 {
        self.covariance[i][j] / (self.stderr(i) * self.stderr(j))
    }
}

/// Device whose reflection contrast the fit vector describes. Fields that
/// do not enter the low-power model are inert placeholders.
fn model_device(shared: &[f64], filter_freq: f64) -> DeviceParams {
    DeviceParams {
        resonator_freq: shared[0],
        chi_qc: shared[1],
        g_cf: shared[2],
        kappa_f: shared[3],
        filter_freq,
        qubit_freq: 0.0,
        qubit_anharm: -1.0,
        qubit_t1: f64::INFINITY,
        filter_anharm: 0.0,
    }
}

/// Weighted residual vector `(model - gamma)/sigma`, concatenated in dataset
/// order. The parameter layout is `[shared(4), filter_freq per group]`; only
/// group k's block depends on filter_freq(k).
pub fn fit_residuals(params: &[f64], datasets: &[FitDataset]) -> Vec<f64> {
    assert_eq!(
        params.len(),
        SHARED_PARAMS + datasets.len(),
        "parameter vector must hold 4 shared entries plus one filter frequency per group"
    );
    let mut r = Vec::with_capacity(datasets.iter().map(|d| d.points.len()).sum());
    for (g, ds) in datasets.iter().enumerate() {
        let dev = model_device(&params[..SHARED_PARAMS], params[SHARED_PARAMS + g]);
        for pt in &ds.points {
            let model = meas_dephasing_model(&dev, pt.omega_meas, pt.p_meas);
            r.push((model - pt.gamma) / pt.sigma);
        }
    }
    r
}

/// Damped least-squares settings.
#[derive(Debug, Clone)]
pub struct LmOptions {
    pub max_iters: usize,
    /// Stop when the relative cost decrease falls below this.
    pub rel_tol: f64,
    /// Relative forward-difference step for the Jacobian.
    pub fd_rel_step: f64,
    pub lambda_init: f64,
    /// Per-parameter magnitude floors for the finite-difference step, for
    /// parameters whose current value may pass through zero. Defaults to
    /// the absolute initial values.
    pub typical: Option<Vec<f64>>,
}

impl Default for LmOptions {
    fn default() -> Self {
        LmOptions {
            max_iters: 200,
            rel_tol: 1e-10,
            fd_rel_step: 1e-6,
            lambda_init: 1e-3,
            typical: None,
        }
    }
}

/// Raw optimizer outcome (weighted-residual space).
#[derive(Debug, Clone)]
pub struct LmOutcome {
    pub params: Vec<f64>,
    pub covariance: DMatrix<f64>,
    pub chi2: f64,
    pub chi2_reduced: f64,
    pub residuals: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Damped Gauss-Newton minimization of `|residual_fn(p)|^2`.
///
/// Forward-difference Jacobian (columns evaluated on the parallel map), a
/// Marquardt-scaled damping term `lambda * diag(J^T J)` grown by 10 on every
/// rejected step and shrunk by 3 on every accepted one, and a stop when the
/// relative cost decrease of an accepted step falls below `rel_tol`. When no
/// downhill step exists at damping 1e12 the current point is reported as
/// converged (a machine-precision minimum). When the iteration cap is hit
/// first, the best point so far is returned with `converged = false`.
///
/// The covariance is the chi2_reduced-scaled inverse of `J^T J` at the
/// optimum, the standard error estimate for 1/sigma-weighted residuals.
pub fn lm_minimize<F>(residual_fn: F, init: &[f64], opts: &LmOptions) -> Result<LmOutcome>
where
    F: Fn(&[f64]) -> Vec<f64> + Sync,
{
    let m = init.len();
    assert!(m > 0, "need at least one parameter");
    let typical: Vec<f64> = match &opts.typical {
        Some(t) => {
            assert_eq!(t.len(), m, "typical scale vector length must match the parameters");
            t.clone()
        }
        None => init.iter().map(|p| p.abs()).collect(),
    };
    let fd_step = |p: &[f64], j: usize| opts.fd_rel_step * p[j].abs().max(typical[j]).max(1e-300);

    let mut p = init.to_vec();
    let mut r = DVector::from_vec(residual_fn(&p));
    let n = r.len();
    if n < m {
        return Err(CoreError::InvalidInput {
            context: format!("{n} residuals cannot constrain {m} parameters"),
        });
    }
    let mut cost = r.norm_squared();
    if !cost.is_finite() {
        return Err(CoreError::InvalidInput {
            context: "initial parameters do not evaluate to finite residuals".into(),
        });
    }
    let mut lambda = opts.lambda_init;
    let mut converged = false;
    let mut iterations = 0;

    let jacobian = |p: &[f64], r0: &DVector<f64>| -> DMatrix<f64> {
        let cols = par_map(m, |j| {
            let h = fd_step(p, j);
            let mut pj = p.to_vec();
            pj[j] += h;
            let rj = residual_fn(&pj);
            debug_assert_eq!(rj.len(), r0.len());
            rj.iter().zip(r0.iter()).map(|(a, b)| (a - b) / h).collect::<Vec<f64>>()
        });
        DMatrix::from_fn(r0.len(), m, |i, j| cols[j][i])
    };

    while iterations < opts.max_iters && !converged {
        iterations += 1;
        let jac = jacobian(&p, &r);
        let a = jac.transpose() * &jac;
        let grad = jac.transpose() * &r;
        for j in 0..m {
            if !(a[(j, j)] > 0.0) {
                return Err(CoreError::SingularNormalMatrix { iteration: iterations });
            }
        }
        let mut accepted = false;
        while lambda <= LAMBDA_MAX {
            let mut aug = a.clone();
            for j in 0..m {
                aug[(j, j)] += lambda * a[(j, j)];
            }
            let delta = match Cholesky::new(aug) {
                Some(ch) => ch.solve(&(-&grad)),
                None => {
                    // numerically indefinite; stiffen and retry
                    lambda *= LAMBDA_GROW;
                    continue;
                }
            };
            let pt: Vec<f64> = p.iter().zip(delta.iter()).map(|(pi, di)| pi + di).collect();
            let rt = DVector::from_vec(residual_fn(&pt));
            let ct = rt.norm_squared();
            if ct.is_finite() && ct < cost {
                let rel_change = (cost - ct) / cost.max(f64::MIN_POSITIVE);
                p = pt;
                r = rt;
                cost = ct;
                lambda = (lambda / LAMBDA_SHRINK).max(1e-14);
                accepted = true;
                if rel_change < opts.rel_tol {
                    converged = true;
                }
                break;
            }
            lambda *= LAMBDA_GROW;
        }
        if !accepted {
            // no downhill direction at maximum damping: machine-precision minimum
            converged = true;
        }
    }

    let jac = jacobian(&p, &r);
    let a = jac.transpose() * &jac;
    let dof = (n - m).max(1);
    let chi2_reduced = cost / dof as f64;
    let inv = Cholesky::new(a.clone())
        .map(|ch| ch.inverse())
        .or_else(|| a.try_inverse())
        .ok_or(CoreError::SingularNormalMatrix { iteration: iterations })?;
    let mut covariance = inv * chi2_reduced;
    // enforce exact symmetry against accumulated rounding
    let c_t = covariance.transpose();
    covariance = (covariance + c_t) * 0.5;

    Ok(LmOutcome {
        params: p,
        covariance,
        chi2: cost,
        chi2_reduced,
        residuals: r.iter().copied().collect(),
        iterations,
        converged,
    })
}

/// Simultaneous fit of all dephasing spectra with shared device parameters
/// and one filter frequency per group.
///
/// `init` uses the layout documented at [`SHARED_PARAMS`]; [`auto_init`]
/// builds a starting point from the data when nothing better is known.
pub fn fit_lm(datasets: &[FitDataset], init: &[f64], opts: &LmOptions) -> Result<FitResult> {
    if datasets.is_empty() {
        return Err(CoreError::InvalidInput { context: "no datasets to fit".into() });
    }
    for ds in datasets {
        ds.validate()?;
    }
    if init.len() != SHARED_PARAMS + datasets.len() {
        return Err(CoreError::InvalidInput {
            context: format!(
                "init vector has {} entries; need 4 shared + {} filter frequencies",
                init.len(),
                datasets.len()
            ),
        });
    }
    if !(init[3] > 0.0) || !(init[2] > 0.0) {
        return Err(CoreError::InvalidInput {
            context: format!(
                "initial kappa_f ({:.3e}) and g_cf ({:.3e}) must be positive",
                init[3], init[2]
            ),
        });
    }
    let mut opts = opts.clone();
    if opts.typical.is_none() {
        // frequency-scale floors so finite-difference steps stay sane even
        // if a parameter (e.g. chi) crosses zero during iteration
        let floor = 1e-3 * init[3];
        opts.typical = Some(init.iter().map(|p| p.abs().max(floor)).collect());
    }
    let out = lm_minimize(|p| fit_residuals(p, datasets), init, &opts)?;
    let m = out.params.len();
    Ok(FitResult {
        shared: FitShared {
            resonator_freq: out.params[0],
            chi_qc: out.params[1],
            g_cf: out.params[2],
            kappa_f: out.params[3],
        },
        filter_freqs: out.params[SHARED_PARAMS..].to_vec(),
        group_tags: datasets.iter().map(|d| d.group_tag.clone()).collect(),
        covariance: (0..m)
            .map(|i| (0..m).map(|j| out.covariance[(i, j)]).collect())
            .collect(),
        chi2_reduced: out.chi2_reduced,
        residuals: out.residuals,
        iterations: out.iterations,
        converged: out.converged,
    })
}

/// Peak position, height, full width at half maximum, and (if two clear
/// maxima exist) their splitting, for one power-normalized spectrum.
struct SpectralFeature {
    peak_omega: f64,
    peak_height: f64,
    fwhm: f64,
    splitting: Option<f64>,
}

fn spectral_feature(points: &[FitPoint]) -> SpectralFeature {
    let mut pts: Vec<(f64, f64)> =
        points.iter().map(|p| (p.omega_meas, p.gamma / p.p_meas)).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (mut ipk, mut top) = (0usize, f64::NEG_INFINITY);
    for (i, &(_, y)) in pts.iter().enumerate() {
        if y > top {
            top = y;
            ipk = i;
        }
    }
    let half = 0.5 * top;
    let mut lo = pts[0].0;
    for i in (0..ipk).rev() {
        if pts[i].1 < half {
            lo = pts[i].0;
            break;
        }
    }
    let mut hi = pts[pts.len() - 1].0;
    for i in ipk + 1..pts.len() {
        if pts[i].1 < half {
            hi = pts[i].0;
            break;
        }
    }
    // interior local maxima above half height, for a mode-splitting estimate
    let mut maxima: Vec<f64> = Vec::new();
    for i in 1..pts.len() - 1 {
        if pts[i].1 > half && pts[i].1 > pts[i - 1].1 && pts[i].1 >= pts[i + 1].1 {
            maxima.push(pts[i].0);
        }
    }
    let splitting = if maxima.len() >= 2 {
        Some(maxima[maxima.len() - 1] - maxima[0])
    } else {
        None
    };
    SpectralFeature { peak_omega: pts[ipk].0, peak_height: top, fwhm: hi - lo, splitting }
}

/// Starting point built from the spectra themselves: the resonator frequency
/// from the tallest peak anywhere, the filter linewidth from the widest
/// spectrum, the coupling from half the largest resolved mode splitting
/// (falling back to 2pi*100 MHz when none is resolved), the dispersive
/// shift from half the narrowest width with the sign of this device family,
/// and each group's filter frequency from its own peak.
pub fn auto_init(datasets: &[FitDataset]) -> Result<Vec<f64>> {
    if datasets.is_empty() {
        return Err(CoreError::InvalidInput { context: "no datasets to initialize from".into() });
    }
    for ds in datasets {
        ds.validate()?;
    }
    let features: Vec<SpectralFeature> =
        datasets.iter().map(|d| spectral_feature(&d.points)).collect();
    let deepest = features
        .iter()
        .max_by(|a, b| a.peak_height.total_cmp(&b.peak_height))
        .expect("nonempty");
    let widest = features.iter().map(|f| f.fwhm).fold(0.0, f64::max);
    let narrowest = features.iter().map(|f| f.fwhm).fold(f64::INFINITY, f64::min);
    let g_cf = features
        .iter()
        .filter_map(|f| f.splitting)
        .fold(0.0, f64::max);
    let mut init = vec![
        deepest.peak_omega,
        -0.5 * narrowest,
        if g_cf > 0.0 { 0.5 * g_cf } else { G_CF_INIT_FALLBACK },
        widest,
    ];
    init.extend(features.iter().map(|f| f.peak_omega));
    Ok(init)
}

/// Synthetic multi-group spectra from the low-power model: one group per
/// entry of `filter_freqs`, all sharing `device`'s other parameters, rates
/// perturbed by multiplicative Gaussian noise of fraction `noise_frac`.
///
/// Reported sigmas are `noise_frac * model` (the exact noise scale); for
/// `noise_frac = 0` they fall back to `model` itself, i.e. unit relative
/// weights, so the weighted cost stays finite and dimensionless.
/// Deterministic for a given `seed`.
pub fn synth_dataset(
    device: &DeviceParams,
    filter_freqs: &[f64],
    grid: &[f64],
    p_meas: f64,
    noise_frac: f64,
    seed: u64,
) -> Result<Vec<FitDataset>> {
    if !(noise_frac >= 0.0) {
        return Err(CoreError::InvalidInput {
            context: format!("noise fraction must be >= 0, got {noise_frac}"),
        });
    }
    if grid.len() < 4 {
        return Err(CoreError::InvalidInput {
            context: format!("grid of {} points cannot satisfy the 4-point minimum", grid.len()),
        });
    }
    if !(p_meas > 0.0) {
        return Err(CoreError::InvalidInput {
            context: format!("measurement power must be positive, got {p_meas:.3e}"),
        });
    }
    let sig_frac = if noise_frac > 0.0 { noise_frac } else { 1.0 };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(filter_freqs.len());
    for (g, &wf) in filter_freqs.iter().enumerate() {
        let dev = DeviceParams { filter_freq: wf, ..*device };
        let points: Vec<FitPoint> = grid
            .iter()
            .map(|&w| {
                let model = meas_dephasing_model(&dev, w, p_meas);
                let z: f64 = rng.sample(StandardNormal);
                FitPoint {
                    omega_meas: w,
                    p_meas,
                    gamma: model * (1.0 + noise_frac * z),
                    sigma: sig_frac * model,
                }
            })
            .collect();
        let ds = FitDataset { group_tag: format!("coil-{g}"), points };
        ds.validate()?;
        out.push(ds);
    }
    Ok(out)
}

/// Filter-anharmonicity fit result.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct KerrFit {
    /// Fitted filter anharmonicity (rad/s, negative for a softening mode).
    pub alpha_f: f64,
    /// Standard error of `alpha_f` (rad/s).
    pub stderr: f64,
    pub chi2_reduced: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Fit the filter anharmonicity to observed nonlinear reflection phases.
///
/// The dephasing-spectrum fit cannot see the Kerr coefficient (it only
/// probes the low-power response), so this companion fit drives the full
/// nonlinear steady-state model at amplitude `omega_amp`, compares reflected
/// phases on the observation grid (qubit in g), and adjusts the single free
/// parameter. Phase residuals are wrapped to (-pi, pi], so branch jumps in
/// either the data or the model do not poison the cost. Parameter points
/// where the nonlinear solver finds no stable branch are rejected by a
/// large finite residual instead of aborting the fit.
pub fn fit_kerr(
    device: &DeviceParams,
    omega_amp: f64,
    observations: &[(f64, f64)],
    init_alpha: f64,
    opts: &LmOptions,
) -> Result<KerrFit> {
    if observations.len() < 4 {
        return Err(CoreError::InvalidInput {
            context: format!("{} phase observations cannot constrain the fit", observations.len()),
        });
    }
    let grid: Vec<f64> = observations.iter().map(|o| o.0).collect();
    let phases: Vec<f64> = observations.iter().map(|o| o.1).collect();
    let residual = |p: &[f64]| -> Vec<f64> {
        let dev = DeviceParams { filter_anharm: p[0], ..*device };
        match s11_nonlinear_sweep(&dev, omega_amp, &grid) {
            Ok(sweep) => sweep
                .g
                .iter()
                .zip(&phases)
                .map(|(pt, &obs)| {
                    let d = pt.phase - obs;
                    d.sin().atan2(d.cos())
                })
                .collect(),
            Err(_) => vec![UNEVALUABLE_RESIDUAL; grid.len()],
        }
    };
    let mut opts = opts.clone();
    if opts.typical.is_none() {
        opts.typical = Some(vec![init_alpha.abs().max(TWO_PI * 1.0e5)]);
    }
    let out = lm_minimize(residual, &[init_alpha], &opts)?;
    Ok(KerrFit {
        alpha_f: out.params[0],
        stderr: out.covariance[(0, 0)].max(0.0).sqrt(),
        chi2_reduced: out.chi2_reduced,
        iterations: out.iterations,
        converged: out.converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::device::bundled_device;
    use approx::assert_relative_eq;

    fn truth() -> DeviceParams {
        bundled_device()
    }

    /// Five coil settings spanning the detuning range the experiment sweeps.
    fn five_filters(d: &DeviceParams) -> Vec<f64> {
        [-0.4e9, -0.2e9, 0.0, 0.2e9, 0.4e9]
            .iter()
            .map(|&x| d.resonator_freq + TWO_PI * x)
            .collect()
    }

    /// Measurement-frequency grid around the resonator, resolving the
    /// narrowest (far-detuned) effective linewidths of ~2pi*10 MHz.
    fn grid(d: &DeviceParams, n: usize) -> Vec<f64> {
        let half = TWO_PI * 0.25e9;
        (0..n)
            .map(|i| d.resonator_freq - half + 2.0 * half * i as f64 / (n - 1) as f64)
            .collect()
    }

    const P_MEAS: f64 = 1e-17;

    /// Starting point a few percent off truth: the standard synthetic
    /// recovery protocol (the experimenter knows design values that well).
    fn perturbed_init(d: &DeviceParams, filters: &[f64]) -> Vec<f64> {
        let mut init = vec![
            d.resonator_freq + TWO_PI * 3e6,
            d.chi_qc * 1.15,
            d.g_cf * 0.90,
            d.kappa_f * 1.20,
        ];
        init.extend(filters.iter().map(|&f| f + TWO_PI * 20e6));
        init
    }

    #[test]
    fn residuals_vanish_at_truth_and_scale_with_sigma() {
        let d = truth();
        let filters = five_filters(&d);
        let datasets = synth_dataset(&d, &filters, &grid(&d, 61), P_MEAS, 0.0, 1).unwrap();
        let mut params = vec![d.resonator_freq, d.chi_qc, d.g_cf, d.kappa_f];
        params.extend(&filters);
        let r = fit_residuals(&params, &datasets);
        assert!(r.iter().all(|&x| x == 0.0), "noiseless data at truth must fit exactly");

        let noisy = synth_dataset(&d, &filters, &grid(&d, 61), P_MEAS, 0.03, 1).unwrap();
        let r1 = fit_residuals(&params, &noisy);
        let doubled: Vec<FitDataset> = noisy
            .iter()
            .map(|ds| FitDataset {
                group_tag: ds.group_tag.clone(),
                points: ds
                    .points
                    .iter()
                    .map(|p| FitPoint { sigma: 2.0 * p.sigma, ..*p })
                    .collect(),
            })
            .collect();
        let r2 = fit_residuals(&params, &doubled);
        for (a, b) in r1.iter().zip(&r2) {
            assert_relative_eq!(*a, 2.0 * *b, max_relative = 1e-14);
        }
    }

    #[test]
    fn residual_blocks_follow_group_structure() {
        let d = truth();
        let filters = five_filters(&d);
        let datasets = synth_dataset(&d, &filters, &grid(&d, 31), P_MEAS, 0.03, 2).unwrap();
        let mut params = vec![d.resonator_freq, d.chi_qc, d.g_cf, d.kappa_f];
        params.extend(&filters);
        let base = fit_residuals(&params, &datasets);
        let k = 2usize;
        let mut perturbed = params.clone();
        perturbed[SHARED_PARAMS + k] += TWO_PI * 30e6;
        let shifted = fit_residuals(&perturbed, &datasets);
        let block = datasets[0].points.len();
        for i in 0..base.len() {
            let group = i / block;
            if group == k {
                continue;
            }
            assert_eq!(base[i].to_bits(), shifted[i].to_bits(), "point {i} outside group {k} moved");
        }
        let kth = &shifted[k * block..(k + 1) * block];
        assert!(kth.iter().zip(&base[k * block..(k + 1) * block]).any(|(a, b)| a != b));
    }

    #[test]
    fn zero_noise_fit_lands_on_truth_to_machine_cost() {
        let d = truth();
        let filters = five_filters(&d);
        let datasets = synth_dataset(&d, &filters, &grid(&d, 41), P_MEAS, 0.0, 3).unwrap();
        let init = perturbed_init(&d, &filters);
        let fit = fit_lm(&datasets, &init, &LmOptions::default()).unwrap();
        assert!(fit.converged, "zero-noise fit must converge");
        let cost: f64 = fit.residuals.iter().map(|r| r * r).sum();
        assert!(cost < 1e-18, "residual cost {cost:.3e} should be machine-level");
        assert_relative_eq!(fit.shared.resonator_freq, d.resonator_freq, max_relative = 1e-6);
        assert_relative_eq!(fit.shared.chi_qc, d.chi_qc, max_relative = 1e-6);
        assert_relative_eq!(fit.shared.g_cf, d.g_cf, max_relative = 1e-6);
        assert_relative_eq!(fit.shared.kappa_f, d.kappa_f, max_relative = 1e-6);
        for (got, want) in fit.filter_freqs.iter().zip(&filters) {
            assert_relative_eq!(*got, *want, max_relative = 1e-6);
        }
    }

    #[test]
    fn noisy_fit_recovers_within_two_standard_errors() {
        let d = truth();
        let filters = five_filters(&d);
        let datasets = synth_dataset(&d, &filters, &grid(&d, 41), P_MEAS, 0.03, 4).unwrap();
        let fit = fit_lm(&datasets, &perturbed_init(&d, &filters), &LmOptions::default()).unwrap();
        assert!(fit.converged);
        for (j, want) in [(1, d.chi_qc), (2, d.g_cf), (3, d.kappa_f)] {
            let got = [
                fit.shared.resonator_freq,
                fit.shared.chi_qc,
                fit.shared.g_cf,
                fit.shared.kappa_f,
            ][j];
            let se = fit.stderr(j);
            assert!(
                (got - want).abs() < 2.0 * se,
                "param {j}: {got:.6e} vs truth {want:.6e}, 2se = {:.2e}",
                2.0 * se
            );
        }
        // 205 points, correctly specified model: reduced chi-square near 1
        assert!(
            fit.chi2_reduced > 0.5 && fit.chi2_reduced < 1.5,
            "chi2_reduced = {}",
            fit.chi2_reduced
        );
        // covariance sanity: exactly symmetric, positive diagonal
        let m = fit.covariance.len();
        for i in 0..m {
            assert!(fit.covariance[i][i] > 0.0);
            for j in 0..m {
                assert_eq!(fit.covariance[i][j].to_bits(), fit.covariance[j][i].to_bits());
            }
        }
    }

    #[test]
    fn fit_is_invariant_under_group_permutation() {
        let d = truth();
        let filters = five_filters(&d);
        let datasets = synth_dataset(&d, &filters, &grid(&d, 41), P_MEAS, 0.03, 5).unwrap();
        let fit_a = fit_lm(&datasets, &perturbed_init(&d, &filters), &LmOptions::default()).unwrap();

        let perm = [2usize, 4, 0, 3, 1];
        let permuted: Vec<FitDataset> = perm.iter().map(|&i| datasets[i].clone()).collect();
        let perm_filters: Vec<f64> = perm.iter().map(|&i| filters[i]).collect();
        let fit_b =
            fit_lm(&permuted, &perturbed_init(&d, &perm_filters), &LmOptions::default()).unwrap();

        assert_relative_eq!(fit_a.shared.resonator_freq, fit_b.shared.resonator_freq, max_relative = 1e-10);
        assert_relative_eq!(fit_a.shared.chi_qc, fit_b.shared.chi_qc, max_relative = 1e-10);
        assert_relative_eq!(fit_a.shared.g_cf, fit_b.shared.g_cf, max_relative = 1e-10);
        assert_relative_eq!(fit_a.shared.kappa_f, fit_b.shared.kappa_f, max_relative = 1e-10);
        for (slot, &src) in perm.iter().enumerate() {
            assert_relative_eq!(
                fit_b.filter_freqs[slot],
                fit_a.filter_freqs[src],
                max_relative = 1e-10
            );
            assert_eq!(fit_b.group_tags[slot], fit_a.group_tags[src]);
        }
    }

    #[test]
    fn single_resonant_group_leaves_coupling_and_linewidth_degenerate() {
        let d = truth();
        let filters = vec![d.resonator_freq];
        // a window that sees only the blended central feature: on resonance
        // both hybrid modes decay at exactly kappa_f/2 whatever g_cf is, so
        // without the resolved splitting the two parameters trade off
        let narrow: Vec<f64> = {
            let half = TWO_PI * 80e6;
            (0..41)
                .map(|i| d.resonator_freq - half + 2.0 * half * i as f64 / 40.0)
                .collect()
        };
        let datasets = synth_dataset(&d, &filters, &narrow, P_MEAS, 0.03, 6).unwrap();
        let fit = fit_lm(&datasets, &perturbed_init(&d, &filters), &LmOptions::default()).unwrap();
        let corr = fit.correlation(2, 3);
        assert!(
            corr.abs() > 0.9,
            "g_cf/kappa_f correlation {corr:.3}: a single on-resonance spectrum should not \
             separate them (this is why the filter frequency gets swept)"
        );
    }

    #[test]
    fn recovery_is_unbiased_over_one_hundred_seeds() {
        let d = truth();
        let filters = five_filters(&d);
        let g = grid(&d, 21);
        let init = perturbed_init(&d, &filters);
        let mut sums = [0.0f64; 3];
        let mut se_sums = [0.0f64; 3];
        let n_seeds = 100;
        for seed in 0..n_seeds {
            let datasets = synth_dataset(&d, &filters, &g, P_MEAS, 0.03, 300 + seed).unwrap();
            let fit = fit_lm(&datasets, &init, &LmOptions::default()).unwrap();
            for (slot, (j, got)) in
                [(1, fit.shared.chi_qc), (2, fit.shared.g_cf), (3, fit.shared.kappa_f)]
                    .iter()
                    .enumerate()
            {
                sums[slot] += got;
                se_sums[slot] += fit.stderr(*j);
            }
        }
        for (slot, want) in [(0, d.chi_qc), (1, d.g_cf), (2, d.kappa_f)] {
            let mean = sums[slot] / n_seeds as f64;
            let mean_se = se_sums[slot] / n_seeds as f64;
            assert!(
                (mean - want).abs() < 0.5 * mean_se,
                "slot {slot}: seed-averaged value {mean:.6e} deviates from {want:.6e} by more \
                 than half a standard error ({:.2e})",
                mean_se
            );
        }
    }

    #[test]
    fn synthetic_data_is_exact_linear_in_power_and_splits_when_narrow() {
        let d = truth();
        let g = grid(&d, 61);
        let noiseless = synth_dataset(&d, &[d.filter_freq], &g, P_MEAS, 0.0, 7).unwrap();
        for pt in &noiseless[0].points {
            let dev = DeviceParams { filter_freq: d.filter_freq, ..d };
            assert_eq!(pt.gamma, meas_dephasing_model(&dev, pt.omega_meas, P_MEAS));
        }
        let double_p = synth_dataset(&d, &[d.filter_freq], &g, 2.0 * P_MEAS, 0.0, 7).unwrap();
        for (a, b) in double_p[0].points.iter().zip(&noiseless[0].points) {
            assert_eq!(a.gamma, 2.0 * b.gamma, "the model is exactly linear in power");
        }

        // far-detuned filter: effective linewidth ~2pi*6 MHz < |chi| = 2pi*11.8 MHz,
        // so the spectrum shows both qubit-state peaks
        let detuned = d.resonator_freq - TWO_PI * 0.6e9;
        let fine: Vec<f64> = {
            let half = TWO_PI * 60e6;
            (0..401)
                .map(|i| d.resonator_freq - half + 2.0 * half * i as f64 / 400.0)
                .collect()
        };
        let split = synth_dataset(&d, &[detuned], &fine, P_MEAS, 0.0, 8).unwrap();
        let ys: Vec<f64> = split[0].points.iter().map(|p| p.gamma).collect();
        let top = ys.iter().cloned().fold(0.0, f64::max);
        let peaks = (1..ys.len() - 1)
            .filter(|&i| ys[i] > ys[i - 1] && ys[i] >= ys[i + 1] && ys[i] > 0.25 * top)
            .count();
        assert!(peaks >= 2, "expected a split spectrum, found {peaks} peak(s)");

        assert_eq!(
            synth_dataset(&d, &[d.filter_freq], &g, P_MEAS, 0.03, 77).unwrap(),
            synth_dataset(&d, &[d.filter_freq], &g, P_MEAS, 0.03, 77).unwrap(),
            "synthesis must be deterministic per seed"
        );
    }

    #[test]
    fn auto_init_lands_in_the_basin_scale() {
        let d = truth();
        let filters = five_filters(&d);
        let datasets = synth_dataset(&d, &filters, &grid(&d, 201), P_MEAS, 0.03, 9).unwrap();
        let init = auto_init(&datasets).unwrap();
        assert_eq!(init.len(), SHARED_PARAMS + filters.len());
        // resonator guess within the hybridized-mode span of the truth
        assert!((init[0] - d.resonator_freq).abs() < 2.0 * d.g_cf + d.kappa_f);
        // dispersive shift guessed negative (device family sign), sane scale
        assert!(init[1] < 0.0 && init[1].abs() < d.kappa_f);
        // positive coupling and linewidth within an order of magnitude
        assert!(init[2] > 0.0);
        assert!(init[3] > 0.2 * d.kappa_f && init[3] < 5.0 * d.kappa_f);
        // and the fit accepts it as a starting point
        assert!(fit_lm(&datasets, &init, &LmOptions::default()).is_ok());
    }

    #[test]
    fn engine_flags_unused_parameters_and_iteration_caps() {
        // second parameter never enters the residuals: singular normal matrix
        let res = lm_minimize(|p| vec![p[0] - 1.0, p[0] + 2.0, 3.0 * p[0]], &[0.5, 0.5], &LmOptions::default());
        assert!(matches!(res, Err(CoreError::SingularNormalMatrix { .. })), "got {res:?}");

        let d = truth();
        let filters = five_filters(&d);
        let datasets = synth_dataset(&d, &filters, &grid(&d, 31), P_MEAS, 0.03, 10).unwrap();
        let opts = LmOptions { max_iters: 2, ..Default::default() };
        let fit = fit_lm(&datasets, &perturbed_init(&d, &filters), &opts).unwrap();
        assert!(!fit.converged, "two iterations cannot plateau from a perturbed start");
        assert_eq!(fit.iterations, 2);
    }

    #[test]
    fn init_validation_rejects_unphysical_starts() {
        let d = truth();
        let datasets = synth_dataset(&d, &[d.filter_freq], &grid(&d, 31), P_MEAS, 0.0, 11).unwrap();
        let mut bad = vec![d.resonator_freq, d.chi_qc, d.g_cf, -d.kappa_f, d.filter_freq];
        assert!(fit_lm(&datasets, &bad, &LmOptions::default()).is_err());
        bad[3] = d.kappa_f;
        bad[2] = 0.0;
        assert!(fit_lm(&datasets, &bad, &LmOptions::default()).is_err());
        assert!(fit_lm(&datasets, &bad[..4], &LmOptions::default()).is_err());
    }

    #[test]
    fn kerr_fit_recovers_the_filter_anharmonicity() {
        let d = truth();
        let omega_amp = TWO_PI * 120e6;
        // half-step offset keeps every point away from the exact dressed
        // resonance, where the steady-branch solver is (rightly) degenerate
        let grid: Vec<f64> = {
            let half = TWO_PI * 0.3e9;
            let n = 40;
            (0..n)
                .map(|i| d.resonator_freq - half + (i as f64 + 0.5) * 2.0 * half / n as f64)
                .collect()
        };
        let sweep = s11_nonlinear_sweep(&d, omega_amp, &grid).unwrap();
        assert!(
            sweep.g.iter().all(|p| !p.multistable),
            "calibration drive must stay below the bifurcation"
        );
        let obs: Vec<(f64, f64)> = sweep.g.iter().map(|p| (p.freq, p.phase)).collect();
        let fit = fit_kerr(&d, omega_amp, &obs, 2.5 * d.filter_anharm, &LmOptions::default())
            .unwrap();
        assert!(fit.converged);
        assert_relative_eq!(fit.alpha_f, d.filter_anharm, max_relative = 1e-3);
        assert!(
            (fit.alpha_f - d.filter_anharm).abs() < 2.0 * fit.stderr.max(1e-6 * d.filter_anharm.abs()),
            "alpha {:.6e} vs truth {:.6e} with stderr {:.2e}",
            fit.alpha_f,
            d.filter_anharm,
            fit.stderr
        );
    }
}
