//! One function per subcommand. Each consumes the loaded configuration,
//! writes its CSV/JSON artifacts into the output directory, and returns the
//! key results as a JSON map that `main` stores as `summary.json`.
//!
//! Unit conventions in all artifacts: oscillation frequencies are ordinary
//! Hz (angular frequency over 2pi); decay and dephasing rates are plain
//! inverse seconds (written `_hz` since Hz = 1/s); powers are W; times are s.

use std::path::{Path, PathBuf};

use num_complex::Complex64;
use serde_json::{json, Map, Value};

use purcellsim_core::fit::{
    auto_init, fit_kerr, fit_lm, synth_dataset, FitDataset, FitPoint, LmOptions, SHARED_PARAMS,
};
use purcellsim_core::lindblad::{
    evolve, extract_meas_dephasing, max_step, DensityMatrix, FockConfig,
};
use purcellsim_core::linear::{
    gamma_noise_integral, noise_sensitivity_sweep, purcell_report, s11_spectrum,
};
use purcellsim_core::meanfield::{
    continuation_branch, io_transform, linear_rate_extrapolation, mf_steady_branches,
    s11_nonlinear_sweep,
};
use purcellsim_core::noise::{noise_dephasing_mc, NoiseSpec};
use purcellsim_core::par::par_map;
use purcellsim_core::{DeviceParams, DriveSpec, QubitState, TWO_PI};

use crate::config::{resolve, LoadedConfig, SensitivityCfg};
use crate::errors::CliError;
use crate::output::{write_json, Csv};

/// Everything a subcommand needs: parsed config, its directory (for
/// relative paths), the device, the output directory, and the seed.
pub struct Ctx {
    pub loaded: LoadedConfig,
    pub out_dir: PathBuf,
    pub seed: u64,
}

impl Ctx {
    fn device(&self) -> &DeviceParams {
        &self.loaded.device
    }

    fn out(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }
}

fn require<'a, T>(block: &'a Option<T>, name: &str) -> Result<&'a T, CliError> {
    block
        .as_ref()
        .ok_or_else(|| CliError::config(format!("config is missing the `{name}` block")))
}

fn write_csv(csv: &Csv, path: &Path) -> Result<(), CliError> {
    csv.write(path).map_err(|e| CliError::io(format!("writing {}: {e}", path.display())))
}

fn hz(omega: f64) -> f64 {
    omega / TWO_PI
}

// ---------------------------------------------------------------------------
// spectrum
// ---------------------------------------------------------------------------

struct SpectrumRow {
    freq: f64,
    g: (Complex64, f64, bool),
    e: (Complex64, f64, bool),
}

/// Reflection spectra for both qubit states -> `s11.csv`. Zero drive
/// amplitude selects the closed-form low-power response; a positive
/// amplitude drives the Kerr steady-state model on the ramp-selected branch.
pub fn cmd_spectrum(ctx: &Ctx) -> Result<Value, CliError> {
    let sc = require(&ctx.loaded.cfg.spectrum, "spectrum")?;
    if !(sc.drive_amp_hz >= 0.0) {
        return Err(CliError::config(format!(
            "spectrum.drive_amp_hz must be >= 0, got {}",
            sc.drive_amp_hz
        )));
    }
    let grid = sc.grid.build(ctx.device())?;

    let (mode, rows) = if sc.drive_amp_hz == 0.0 {
        let g = s11_spectrum(ctx.device(), &grid, QubitState::G);
        let e = s11_spectrum(ctx.device(), &grid, QubitState::E);
        let rows = g
            .iter()
            .zip(&e)
            .map(|(pg, pe)| SpectrumRow {
                freq: pg.freq,
                g: (Complex64::new(pg.s11_re, pg.s11_im), pg.phase, false),
                e: (Complex64::new(pe.s11_re, pe.s11_im), pe.phase, false),
            })
            .collect::<Vec<_>>();
        ("linear", rows)
    } else {
        let sweep = s11_nonlinear_sweep(ctx.device(), TWO_PI * sc.drive_amp_hz, &grid)?;
        let rows = sweep
            .g
            .iter()
            .zip(&sweep.e)
            .map(|(pg, pe)| SpectrumRow {
                freq: pg.freq,
                g: (pg.s11, pg.phase, pg.multistable),
                e: (pe.s11, pe.phase, pe.multistable),
            })
            .collect::<Vec<_>>();
        ("nonlinear", rows)
    };

    let mut csv = Csv::new(&[
        "freq_hz",
        "s11_re_g",
        "s11_im_g",
        "phase_g_rad",
        "multistable_g",
        "s11_re_e",
        "s11_im_e",
        "phase_e_rad",
        "multistable_e",
    ]);
    for r in &rows {
        csv.cell_f64(hz(r.freq))
            .cell_f64(r.g.0.re)
            .cell_f64(r.g.0.im)
            .cell_f64(r.g.1)
            .cell_int(r.g.2 as i64)
            .cell_f64(r.e.0.re)
            .cell_f64(r.e.0.im)
            .cell_f64(r.e.1)
            .cell_int(r.e.2 as i64);
        csv.end_row();
    }
    write_csv(&csv, &ctx.out("s11.csv"))?;

    // widest pointer-state separation across the grid: where to park a tone
    let (mut best, mut best_freq) = (0.0_f64, rows[0].freq);
    for r in &rows {
        let c = (r.e.0 - r.g.0).norm();
        if c > best {
            best = c;
            best_freq = r.freq;
        }
    }
    let multi_g = rows.iter().filter(|r| r.g.2).count();
    let multi_e = rows.iter().filter(|r| r.e.2).count();

    Ok(json!({
        "mode": mode,
        "n_points": rows.len(),
        "drive_amp_hz": sc.drive_amp_hz,
        "max_contrast": best,
        "max_contrast_freq_hz": hz(best_freq),
        "multistable_points_g": multi_g,
        "multistable_points_e": multi_e,
        "files": ["s11.csv"],
    }))
}

// ---------------------------------------------------------------------------
// sensitivity
// ---------------------------------------------------------------------------

/// Photon-noise dephasing per noise photon versus filter detuning ->
/// `sensitivity.csv`. The block is optional; the default grid covers
/// +-0.6 GHz in 201 points.
pub fn cmd_sensitivity(ctx: &Ctx) -> Result<Value, CliError> {
    let default_cfg;
    let sc = match &ctx.loaded.cfg.sensitivity {
        Some(s) => s,
        None => {
            default_cfg = SensitivityCfg::default();
            &default_cfg
        }
    };
    let detunings = sc.detunings()?;
    let curve = noise_sensitivity_sweep(ctx.device(), &detunings)?;

    let mut csv = Csv::new(&["filter_detuning_hz", "sensitivity_hz_per_photon"]);
    for (d, s) in curve.filter_detuning.iter().zip(&curve.sensitivity) {
        csv.cell_f64(hz(*d)).cell_f64(*s);
        csv.end_row();
    }
    write_csv(&csv, &ctx.out("sensitivity.csv"))?;

    Ok(json!({
        "n_points": curve.sensitivity.len(),
        "min_hz_per_photon": curve.min,
        "max_hz_per_photon": curve.max,
        "ratio": curve.ratio,
        "argmin_detuning_hz": hz(curve.argmin_detuning),
        "argmax_detuning_hz": hz(curve.argmax_detuning),
        "files": ["sensitivity.csv"],
    }))
}

// ---------------------------------------------------------------------------
// bifurcation
// ---------------------------------------------------------------------------

struct AmpPoint {
    branch_rows: Vec<(QubitState, usize, f64, f64, bool, bool)>,
    cont_g: (f64, f64, Complex64),
    cont_e: (f64, f64, Complex64),
    multistable: bool,
}

/// Steady-branch structure and measurement rate along an upward drive-power
/// ramp at fixed frequency -> `bifurcation.csv` (every root) and
/// `meas_rate.csv` (ramp-selected branch, pointer contrast, linear
/// extrapolation).
pub fn cmd_bifurcation(ctx: &Ctx) -> Result<Value, CliError> {
    let bc = require(&ctx.loaded.cfg.bifurcation, "bifurcation")?;
    let amps = bc.amps()?;
    let omega = TWO_PI * bc.drive_freq_hz;
    let device = *ctx.device();

    let points = par_map(amps.len(), |i| -> Result<AmpPoint, purcellsim_core::CoreError> {
        let amp = amps[i];
        let mut branch_rows = Vec::new();
        let mut cont = [(0.0, 0.0, Complex64::new(0.0, 0.0)); 2];
        let mut multistable = false;
        for (si, state) in [QubitState::G, QubitState::E].into_iter().enumerate() {
            let drive = DriveSpec::new(omega, amp, state)?;
            let branches = mf_steady_branches(&device, &drive)?;
            multistable |= branches.iter().filter(|b| b.stable).count() > 1;
            for (bi, b) in branches.iter().enumerate() {
                branch_rows.push((state, bi, b.n_c, b.n_f, b.stable, b.degenerate));
            }
            let picked = continuation_branch(&device, &drive)?;
            let b_out = io_transform(&picked.state, &drive, &device).b_out;
            cont[si] = (picked.n_c, picked.n_f, b_out);
        }
        Ok(AmpPoint { branch_rows, cont_g: cont[0], cont_e: cont[1], multistable })
    });
    let points: Vec<AmpPoint> = points.into_iter().collect::<Result<_, _>>()?;

    let mut branches_csv = Csv::new(&[
        "drive_amp_hz",
        "qubit_state",
        "branch",
        "n_c",
        "n_f",
        "stable",
        "degenerate",
    ]);
    let mut rate_csv = Csv::new(&[
        "drive_amp_hz",
        "gamma_meas_hz",
        "linear_extrap_hz",
        "enhancement",
        "n_c_g",
        "n_f_g",
        "n_c_e",
        "n_f_e",
    ]);
    let mut onset_amp = None;
    for (amp, p) in amps.iter().zip(&points) {
        for (state, bi, n_c, n_f, stable, degenerate) in &p.branch_rows {
            branches_csv
                .cell_f64(hz(*amp))
                .cell_str(match state {
                    QubitState::G => "g",
                    QubitState::E => "e",
                })
                .cell_int(*bi as i64)
                .cell_f64(*n_c)
                .cell_f64(*n_f)
                .cell_int(*stable as i64)
                .cell_int(*degenerate as i64);
            branches_csv.end_row();
        }
        let gamma = 0.5 * (p.cont_e.2 - p.cont_g.2).norm_sqr();
        let lin = linear_rate_extrapolation(&device, omega, *amp);
        rate_csv
            .cell_f64(hz(*amp))
            .cell_f64(gamma)
            .cell_f64(lin)
            .cell_f64(gamma / lin)
            .cell_f64(p.cont_g.0)
            .cell_f64(p.cont_g.1)
            .cell_f64(p.cont_e.0)
            .cell_f64(p.cont_e.1);
        rate_csv.end_row();
        if p.multistable && onset_amp.is_none() {
            onset_amp = Some(hz(*amp));
        }
    }
    write_csv(&branches_csv, &ctx.out("bifurcation.csv"))?;
    write_csv(&rate_csv, &ctx.out("meas_rate.csv"))?;

    let last = points.last().expect("amplitude grid is nonempty");
    let gamma_top = 0.5 * (last.cont_e.2 - last.cont_g.2).norm_sqr();
    let lin_top = linear_rate_extrapolation(&device, omega, *amps.last().unwrap());
    Ok(json!({
        "drive_freq_hz": bc.drive_freq_hz,
        "n_amplitudes": amps.len(),
        "top_amp_hz": hz(*amps.last().unwrap()),
        "gamma_meas_hz": gamma_top,
        "linear_extrap_hz": lin_top,
        "enhancement": gamma_top / lin_top,
        "n_c_g": last.cont_g.0,
        "n_f_g": last.cont_g.1,
        "n_c_e": last.cont_e.0,
        "n_f_e": last.cont_e.1,
        "bistable_onset_amp_hz": onset_amp,
        "files": ["bifurcation.csv", "meas_rate.csv"],
    }))
}

// ---------------------------------------------------------------------------
// purcell
// ---------------------------------------------------------------------------

/// External-relaxation report with and without the filter -> `purcell.csv`.
/// Needs no command block; everything comes from the device file.
pub fn cmd_purcell(ctx: &Ctx) -> Result<Value, CliError> {
    let rep = purcell_report(ctx.device())?;
    let mut csv = Csv::new(&[
        "gamma_ex_filtered_hz",
        "gamma_ex_bare_hz",
        "t1_limit_filtered_s",
        "t1_limit_bare_s",
        "suppression_factor",
    ]);
    csv.cell_f64(rep.gamma_ex_filtered)
        .cell_f64(rep.gamma_ex_bare)
        .cell_f64(rep.t1_limit_filtered)
        .cell_f64(rep.t1_limit_bare)
        .cell_f64(rep.suppression_factor);
    csv.end_row();
    write_csv(&csv, &ctx.out("purcell.csv"))?;

    Ok(json!({
        "gamma_ex_filtered_hz": rep.gamma_ex_filtered,
        "gamma_ex_filtered_over_2pi_hz": hz(rep.gamma_ex_filtered),
        "gamma_ex_bare_hz": rep.gamma_ex_bare,
        "t1_limit_filtered_s": rep.t1_limit_filtered,
        "t1_limit_bare_s": rep.t1_limit_bare,
        "suppression_factor": rep.suppression_factor,
        "files": ["purcell.csv"],
    }))
}

// ---------------------------------------------------------------------------
// lindblad
// ---------------------------------------------------------------------------

/// Master-equation evolution of a (|g>+|e>)/sqrt(2) x vacuum start ->
/// `lindblad_traj.csv` plus a dephasing-rate extraction and a semiclassical
/// cross-check in the summary.
pub fn cmd_lindblad(ctx: &Ctx) -> Result<Value, CliError> {
    let lc = require(&ctx.loaded.cfg.lindblad, "lindblad")?;
    if !(lc.t_final_s > 0.0 && lc.fit_start_s >= 0.0 && lc.fit_start_s < lc.t_final_s) {
        return Err(CliError::config(format!(
            "lindblad times invalid: t_final_s = {}, fit_start_s = {}",
            lc.t_final_s, lc.fit_start_s
        )));
    }
    let mut device = *ctx.device();
    if lc.zero_filter_kerr.unwrap_or(false) {
        device.filter_anharm = 0.0;
    }
    let fock = FockConfig::new(lc.n_c, lc.n_f)?;
    let drive =
        DriveSpec::new(TWO_PI * lc.drive_freq_hz, TWO_PI * lc.drive_amp_hz, QubitState::G)?;

    let dt = 0.8 * max_step(&device, &drive, fock)?;
    let n_steps = (lc.t_final_s / dt).ceil() as usize;
    let samples = lc.samples.unwrap_or(200).max(2);
    let stride = (n_steps / samples).max(1);
    let rho0 = DensityMatrix::superposition_vacuum(fock)?;
    let (traj, _) = evolve(&rho0, &device, &drive, fock, lc.t_final_s, dt, stride)?;

    let mut csv = Csv::new(&[
        "t_s",
        "n_c_mean",
        "n_f_mean",
        "coherence_re",
        "coherence_im",
        "trace_err",
        "herm_err",
        "min_eig",
        "top_level_pop",
    ]);
    for s in &traj {
        csv.cell_f64(s.t)
            .cell_f64(s.n_c_mean)
            .cell_f64(s.n_f_mean)
            .cell_f64(s.coherence.re)
            .cell_f64(s.coherence.im)
            .cell_f64(s.trace_err)
            .cell_f64(s.herm_err)
            .cell_f64(s.min_eig)
            .cell_f64(s.top_level_pop);
        csv.end_row();
    }
    write_csv(&csv, &ctx.out("lindblad_traj.csv"))?;

    let ext = extract_meas_dephasing(&device, &drive, fock, lc.t_final_s, lc.fit_start_s)?;

    // semiclassical pointer-state rate at the same drive; skipped (null)
    // where the mean-field point is degenerate, e.g. exactly on resonance
    let mf = purcellsim_core::meanfield::measurement_rate(
        &device,
        TWO_PI * lc.drive_freq_hz,
        TWO_PI * lc.drive_amp_hz,
    );
    let (gamma_mf, mf_note): (Option<f64>, Option<String>) = match mf {
        Ok((g, _, _)) => (Some(g), None),
        Err(e) => (None, Some(e.to_string())),
    };

    let fold =
        |f: fn(&purcellsim_core::lindblad::LindbladSample) -> f64| -> f64 {
            traj.iter().map(f).fold(f64::NEG_INFINITY, f64::max)
        };
    Ok(json!({
        "n_c": lc.n_c,
        "n_f": lc.n_f,
        "hilbert_dim": fock.dim(),
        "drive_freq_hz": lc.drive_freq_hz,
        "drive_amp_hz": lc.drive_amp_hz,
        "t_final_s": lc.t_final_s,
        "dt_s": dt,
        "samples": traj.len(),
        "gamma_meas_hz": ext.gamma,
        "gamma_total_hz": ext.gamma_total,
        "relaxation_baseline_hz": ext.baseline,
        "r_squared": ext.r_squared,
        "n_c_max": ext.n_c_max,
        "gamma_meanfield_hz": gamma_mf,
        "meanfield_note": mf_note,
        "max_trace_err": fold(|s| s.trace_err),
        "max_herm_err": fold(|s| s.herm_err),
        "min_eigenvalue_worst": traj.iter().map(|s| s.min_eig).fold(f64::INFINITY, f64::min),
        "top_level_pop_max": fold(|s| s.top_level_pop),
        "files": ["lindblad_traj.csv"],
    }))
}

// ---------------------------------------------------------------------------
// noise-mc
// ---------------------------------------------------------------------------

/// Band-limited photon-noise dephasing Monte Carlo over independent seeds ->
/// `noise_mc.csv`, with the quadrature closed form as a cross-check in the
/// summary.
pub fn cmd_noise_mc(ctx: &Ctx) -> Result<Value, CliError> {
    let nc = require(&ctx.loaded.cfg.noise_mc, "noise_mc")?;
    if nc.n_seeds == 0 {
        return Err(CliError::config("noise_mc.n_seeds must be at least 1".to_string()));
    }
    let device = *ctx.device();
    let specs: Vec<NoiseSpec> = (0..nc.n_seeds)
        .map(|k| {
            NoiseSpec::new(
                nc.psd_quanta,
                TWO_PI * nc.band_lo_hz,
                TWO_PI * nc.band_hi_hz,
                nc.sample_dt_s,
                nc.duration_s,
                ctx.seed.wrapping_add(k),
            )
        })
        .collect::<Result<_, _>>()?;

    let runs = par_map(specs.len(), |i| noise_dephasing_mc(&specs[i], &device));
    let runs: Vec<_> = runs.into_iter().collect::<Result<_, _>>()?;

    let mut csv = Csv::new(&["seed", "gamma_est_hz", "stderr_hz", "n_c_mean"]);
    for (spec, run) in specs.iter().zip(&runs) {
        csv.cell_int(spec.seed as i64)
            .cell_f64(run.gamma_est)
            .cell_f64(run.stderr)
            .cell_f64(run.n_c_mean);
        csv.end_row();
    }
    write_csv(&csv, &ctx.out("noise_mc.csv"))?;

    let n = runs.len() as f64;
    let gamma_mean = runs.iter().map(|r| r.gamma_est).sum::<f64>() / n;
    // seed scatter when available, single-run bootstrap otherwise
    let stderr_mean = if runs.len() > 1 {
        let var = runs.iter().map(|r| (r.gamma_est - gamma_mean).powi(2)).sum::<f64>()
            / (n - 1.0);
        (var / n).sqrt()
    } else {
        runs[0].stderr
    };
    let oracle = gamma_noise_integral(&device, nc.psd_quanta)?;
    Ok(json!({
        "n_seeds": runs.len(),
        "gamma_mean_hz": gamma_mean,
        "stderr_hz": stderr_mean,
        "n_c_mean": runs.iter().map(|r| r.n_c_mean).sum::<f64>() / n,
        "samples_per_seed": runs[0].samples_used,
        "quadrature_gamma_hz": oracle,
        "z_score": (gamma_mean - oracle) / stderr_mean,
        "files": ["noise_mc.csv"],
    }))
}

// ---------------------------------------------------------------------------
// fit
// ---------------------------------------------------------------------------

fn read_float_csv(path: &Path, ncols: usize) -> Result<Vec<Vec<f64>>, CliError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::io(format!("opening {}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| CliError::io(format!("reading {}: {e}", path.display())))?;
        if rec.len() != ncols {
            return Err(CliError::config(format!(
                "{} row {}: expected {ncols} columns, found {}",
                path.display(),
                i + 1,
                rec.len()
            )));
        }
        let mut row = Vec::with_capacity(ncols);
        for field in rec.iter() {
            let v: f64 = field.parse().map_err(|_| {
                CliError::config(format!(
                    "{} row {}: `{field}` is not a number",
                    path.display(),
                    i + 1
                ))
            })?;
            row.push(v);
        }
        rows.push(row);
    }
    Ok(rows)
}

fn write_dataset_csv(ds: &FitDataset, path: &Path) -> Result<(), CliError> {
    let mut csv = Csv::new(&["omega_meas_hz", "p_meas_w", "gamma_hz", "sigma_hz"]);
    for p in &ds.points {
        csv.cell_f64(hz(p.omega_meas)).cell_f64(p.p_meas).cell_f64(p.gamma).cell_f64(p.sigma);
        csv.end_row();
    }
    write_csv(&csv, path)
}

fn param_labels(tags: &[String]) -> Vec<String> {
    let mut labels =
        vec!["resonator_freq".into(), "chi_qc".into(), "g_cf".into(), "kappa_f".into()];
    labels.extend(tags.iter().map(|t| format!("filter_freq[{t}]")));
    labels
}

/// Simultaneous shared-parameter fit of dephasing spectra across groups ->
/// `fit.json` (and, for self-generated data, one `fit_data_<tag>.csv` per
/// group). A fit that exhausts its iteration budget still writes its
/// best-so-far result, then exits with the non-convergence code.
pub fn cmd_fit(ctx: &Ctx) -> Result<Value, CliError> {
    let fc = require(&ctx.loaded.cfg.fit, "fit")?;
    let datasets: Vec<FitDataset> = match (&fc.groups, &fc.synth) {
        (Some(_), Some(_)) | (None, None) => {
            return Err(CliError::config(
                "fit needs exactly one of `groups` (measured CSVs) or `synth`".to_string(),
            ))
        }
        (Some(groups), None) => {
            let mut out = Vec::with_capacity(groups.len());
            for g in groups {
                let path = resolve(&ctx.loaded.dir, &g.csv);
                let rows = read_float_csv(&path, 4)?;
                let points = rows
                    .iter()
                    .map(|r| FitPoint {
                        omega_meas: TWO_PI * r[0],
                        p_meas: r[1],
                        gamma: r[2],
                        sigma: r[3],
                    })
                    .collect();
                out.push(FitDataset { group_tag: g.tag.clone(), points });
            }
            out
        }
        (None, Some(sy)) => {
            let freqs: Vec<f64> = sy
                .filter_detunings_hz
                .iter()
                .map(|d| ctx.device().resonator_freq + TWO_PI * d)
                .collect();
            let grid = sy.grid.build(ctx.device())?;
            let ds =
                synth_dataset(ctx.device(), &freqs, &grid, sy.p_meas_w, sy.noise_frac, ctx.seed)?;
            for d in &ds {
                write_dataset_csv(d, &ctx.out(&format!("fit_data_{}.csv", d.group_tag)))?;
            }
            ds
        }
    };

    let init = match &fc.init {
        Some(i) => {
            if i.filter_freqs_hz.len() != datasets.len() {
                return Err(CliError::config(format!(
                    "fit.init has {} filter frequencies but there are {} groups",
                    i.filter_freqs_hz.len(),
                    datasets.len()
                )));
            }
            i.to_params()
        }
        None => auto_init(&datasets)?,
    };

    let opts = LmOptions { max_iters: fc.max_iters.unwrap_or(200), ..LmOptions::default() };
    let res = fit_lm(&datasets, &init, &opts)?;

    let m = SHARED_PARAMS + datasets.len();
    let labels = param_labels(&res.group_tags);
    let cov_hz2: Vec<Vec<f64>> = res
        .covariance
        .iter()
        .map(|row| row.iter().map(|c| c / (TWO_PI * TWO_PI)).collect())
        .collect();
    let corr: Vec<Vec<f64>> =
        (0..m).map(|i| (0..m).map(|j| res.correlation(i, j)).collect()).collect();
    let n_points: usize = datasets.iter().map(|d| d.points.len()).sum();

    let report = json!({
        "converged": res.converged,
        "iterations": res.iterations,
        "chi2_reduced": res.chi2_reduced,
        "n_points": n_points,
        "n_groups": datasets.len(),
        "group_tags": res.group_tags,
        "param_order": labels,
        "shared": {
            "resonator_freq_hz": hz(res.shared.resonator_freq),
            "chi_qc_hz": hz(res.shared.chi_qc),
            "g_cf_hz": hz(res.shared.g_cf),
            "kappa_f_hz": hz(res.shared.kappa_f),
        },
        "shared_stderr": {
            "resonator_freq_hz": hz(res.stderr(0)),
            "chi_qc_hz": hz(res.stderr(1)),
            "g_cf_hz": hz(res.stderr(2)),
            "kappa_f_hz": hz(res.stderr(3)),
        },
        "filter_freqs_hz": res.filter_freqs.iter().map(|w| hz(*w)).collect::<Vec<_>>(),
        "filter_freqs_stderr_hz":
            (0..datasets.len()).map(|g| hz(res.stderr(SHARED_PARAMS + g))).collect::<Vec<_>>(),
        "covariance_hz2": cov_hz2,
        "correlation": corr,
    });
    let fit_path = ctx.out("fit.json");
    write_json(&fit_path, &report)
        .map_err(|e| CliError::io(format!("writing {}: {e}", fit_path.display())))?;

    if !res.converged {
        return Err(CliError::NonConvergence(format!(
            "fit hit the {}-iteration cap (best-so-far written to fit.json)",
            opts.max_iters
        )));
    }

    Ok(json!({
        "converged": true,
        "iterations": res.iterations,
        "chi2_reduced": res.chi2_reduced,
        "n_points": n_points,
        "n_groups": datasets.len(),
        "resonator_freq_hz": hz(res.shared.resonator_freq),
        "chi_qc_hz": hz(res.shared.chi_qc),
        "g_cf_hz": hz(res.shared.g_cf),
        "kappa_f_hz": hz(res.shared.kappa_f),
        "files": ["fit.json"],
    }))
}

// ---------------------------------------------------------------------------
// fit-kerr
// ---------------------------------------------------------------------------

/// Single-parameter filter-anharmonicity fit against driven ground-state
/// reflection phases -> `kerr.json`. Observations come from a CSV
/// (freq_hz, phase_rad) or are self-generated at `synth_alpha_hz`.
pub fn cmd_fit_kerr(ctx: &Ctx) -> Result<Value, CliError> {
    let kc = require(&ctx.loaded.cfg.fit_kerr, "fit_kerr")?;
    if !(kc.drive_amp_hz > 0.0) {
        return Err(CliError::config(format!(
            "fit_kerr.drive_amp_hz must be > 0, got {}",
            kc.drive_amp_hz
        )));
    }
    let omega_amp = TWO_PI * kc.drive_amp_hz;

    let (observations, source): (Vec<(f64, f64)>, String) =
        match (&kc.observations_csv, &kc.synth_alpha_hz) {
            (Some(_), Some(_)) | (None, None) => {
                return Err(CliError::config(
                    "fit_kerr needs exactly one of `observations_csv` or `synth_alpha_hz`"
                        .to_string(),
                ))
            }
            (Some(p), None) => {
                let path = resolve(&ctx.loaded.dir, p);
                let rows = read_float_csv(&path, 2)?;
                let obs = rows.iter().map(|r| (TWO_PI * r[0], r[1])).collect();
                (obs, path.display().to_string())
            }
            (None, Some(alpha)) => {
                let grid = kc.grid.build(ctx.device())?;
                let mut dev = *ctx.device();
                dev.filter_anharm = TWO_PI * alpha;
                let sweep = s11_nonlinear_sweep(&dev, omega_amp, &grid)?;
                let obs: Vec<(f64, f64)> =
                    sweep.g.iter().map(|pt| (pt.freq, pt.phase)).collect();
                let mut csv = Csv::new(&["freq_hz", "phase_rad"]);
                for (w, ph) in &obs {
                    csv.cell_f64(hz(*w)).cell_f64(*ph);
                    csv.end_row();
                }
                write_csv(&csv, &ctx.out("kerr_obs.csv"))?;
                (obs, format!("synthetic, alpha_f = {} Hz", alpha))
            }
        };

    let res = fit_kerr(
        ctx.device(),
        omega_amp,
        &observations,
        TWO_PI * kc.init_alpha_hz,
        &LmOptions::default(),
    )?;

    let report = json!({
        "converged": res.converged,
        "iterations": res.iterations,
        "chi2_reduced": res.chi2_reduced,
        "alpha_f_hz": hz(res.alpha_f),
        "alpha_f_stderr_hz": hz(res.stderr),
        "init_alpha_hz": kc.init_alpha_hz,
        "drive_amp_hz": kc.drive_amp_hz,
        "n_points": observations.len(),
        "source": source,
    });
    let path = ctx.out("kerr.json");
    write_json(&path, &report)
        .map_err(|e| CliError::io(format!("writing {}: {e}", path.display())))?;

    if !res.converged {
        return Err(CliError::NonConvergence(format!(
            "Kerr fit hit the iteration cap (best-so-far written to kerr.json)"
        )));
    }

    Ok(json!({
        "converged": true,
        "iterations": res.iterations,
        "chi2_reduced": res.chi2_reduced,
        "alpha_f_hz": hz(res.alpha_f),
        "alpha_f_stderr_hz": hz(res.stderr),
        "files": ["kerr.json"],
    }))
}

/// Fold a command's summary into the final map written as `summary.json`.
pub fn finish_summary(command: &str, seed: u64, body: Value) -> Map<String, Value> {
    let mut map = Map::new();
    map.insert("command".into(), Value::String(command.to_string()));
    map.insert("seed".into(), json!(seed));
    if let Value::Object(obj) = body {
        map.extend(obj);
    }
    map
}
