//! Run configuration: one JSON file holding the device reference, output
//! location, seed, and a parameter block per subcommand. All frequencies in
//! configs are ordinary Hz (the `/2pi` values); conversion to angular
//! frequencies happens when blocks are turned into core types.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use purcellsim_core::{DeviceParams, TWO_PI};

use crate::CliError;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Device parameter file, resolved relative to this config's directory.
    pub device: PathBuf,
    /// Output directory (overridable with --out). Default: "out".
    pub out_dir: Option<PathBuf>,
    /// Base RNG seed (overridable with --seed). Default: 0.
    pub seed: Option<u64>,
    pub spectrum: Option<SpectrumCfg>,
    pub sensitivity: Option<SensitivityCfg>,
    pub bifurcation: Option<BifurcationCfg>,
    pub lindblad: Option<LindbladCfg>,
    pub noise_mc: Option<NoiseMcCfg>,
    pub fit: Option<FitCfg>,
    pub fit_kerr: Option<FitKerrCfg>,
}

/// Uniform frequency grid; `center_hz` defaults to the resonator frequency.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridCfg {
    pub center_hz: Option<f64>,
    pub span_hz: f64,
    pub points: usize,
}

impl GridCfg {
    /// Inclusive linspace of angular frequencies.
    pub fn build(&self, device: &DeviceParams) -> Result<Vec<f64>, CliError> {
        if self.points < 2 {
            return Err(CliError::config(format!(
                "grid needs at least 2 points, got {}",
                self.points
            )));
        }
        if !(self.span_hz > 0.0) {
            return Err(CliError::config(format!(
                "grid span must be positive, got {} Hz",
                self.span_hz
            )));
        }
        let center = TWO_PI * self.center_hz.unwrap_or(device.resonator_freq / TWO_PI);
        let half = TWO_PI * 0.5 * self.span_hz;
        let n = self.points;
        Ok((0..n)
            .map(|i| center - half + 2.0 * half * i as f64 / (n - 1) as f64)
            .collect())
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectrumCfg {
    pub grid: GridCfg,
    /// Readout-tone amplitude; 0 selects the closed-form linear response,
    /// anything positive drives the nonlinear steady-state model.
    pub drive_amp_hz: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SensitivityCfg {
    pub detuning_min_hz: f64,
    pub detuning_max_hz: f64,
    pub points: usize,
}

impl Default for SensitivityCfg {
    fn default() -> Self {
        // the library's default sweep: +-0.6 GHz, 201 points
        SensitivityCfg { detuning_min_hz: -0.6e9, detuning_max_hz: 0.6e9, points: 201 }
    }
}

impl SensitivityCfg {
    pub fn detunings(&self) -> Result<Vec<f64>, CliError> {
        if self.points < 2 || !(self.detuning_max_hz > self.detuning_min_hz) {
            return Err(CliError::config(format!(
                "sensitivity grid invalid: [{}, {}] Hz with {} points",
                self.detuning_min_hz, self.detuning_max_hz, self.points
            )));
        }
        let lo = TWO_PI * self.detuning_min_hz;
        let hi = TWO_PI * self.detuning_max_hz;
        let n = self.points;
        Ok((0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect())
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BifurcationCfg {
    pub drive_freq_hz: f64,
    pub amp_min_hz: f64,
    pub amp_max_hz: f64,
    pub points: usize,
}

impl BifurcationCfg {
    pub fn amps(&self) -> Result<Vec<f64>, CliError> {
        if self.points < 2 || !(self.amp_max_hz > self.amp_min_hz) || !(self.amp_min_hz > 0.0) {
            return Err(CliError::config(format!(
                "amplitude grid invalid: [{}, {}] Hz with {} points",
                self.amp_min_hz, self.amp_max_hz, self.points
            )));
        }
        let lo = TWO_PI * self.amp_min_hz;
        let hi = TWO_PI * self.amp_max_hz;
        let n = self.points;
        Ok((0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect())
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LindbladCfg {
    pub n_c: usize,
    pub n_f: usize,
    pub drive_freq_hz: f64,
    pub drive_amp_hz: f64,
    pub t_final_s: f64,
    pub fit_start_s: f64,
    /// Trajectory samples to keep (default ~200).
    pub samples: Option<usize>,
    /// Run with the filter Kerr term switched off (mean-field cross-checks).
    pub zero_filter_kerr: Option<bool>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseMcCfg {
    pub psd_quanta: f64,
    pub band_lo_hz: f64,
    pub band_hi_hz: f64,
    pub sample_dt_s: f64,
    pub duration_s: f64,
    pub n_seeds: u64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitCfg {
    /// Measured spectra, one CSV per group: omega_meas_hz, p_meas_w,
    /// gamma_hz, sigma_hz. Mutually exclusive with `synth`.
    pub groups: Option<Vec<FitGroupCfg>>,
    /// Self-generated synthetic spectra (round-trip demonstrations).
    pub synth: Option<FitSynthCfg>,
    /// Explicit starting point; omitted → spectra-derived auto-init.
    pub init: Option<FitInitCfg>,
    pub max_iters: Option<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitGroupCfg {
    pub tag: String,
    pub csv: PathBuf,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitSynthCfg {
    /// Filter detunings from the resonator, one group each (Hz).
    pub filter_detunings_hz: Vec<f64>,
    pub grid: GridCfg,
    pub p_meas_w: f64,
    pub noise_frac: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitInitCfg {
    pub resonator_freq_hz: f64,
    pub chi_qc_hz: f64,
    pub g_cf_hz: f64,
    pub kappa_f_hz: f64,
    pub filter_freqs_hz: Vec<f64>,
}

impl FitInitCfg {
    pub fn to_params(&self) -> Vec<f64> {
        let mut p = vec![
            TWO_PI * self.resonator_freq_hz,
            TWO_PI * self.chi_qc_hz,
            TWO_PI * self.g_cf_hz,
            TWO_PI * self.kappa_f_hz,
        ];
        p.extend(self.filter_freqs_hz.iter().map(|f| TWO_PI * f));
        p
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitKerrCfg {
    pub drive_amp_hz: f64,
    pub grid: GridCfg,
    pub init_alpha_hz: f64,
    /// Observed phases CSV (omega_hz, phase_rad). Mutually exclusive with
    /// `synth_alpha_hz`.
    pub observations_csv: Option<PathBuf>,
    /// Generate observations from the model at this anharmonicity, then fit
    /// them starting from `init_alpha_hz` (round-trip demonstration).
    pub synth_alpha_hz: Option<f64>,
}

/// Config file plus everything resolved against its location.
pub struct LoadedConfig {
    pub cfg: RunConfig,
    pub dir: PathBuf,
    pub device: DeviceParams,
}

pub fn load_config(path: &Path) -> Result<LoadedConfig, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
    let cfg: RunConfig = serde_json::from_str(&text)
        .map_err(|e| CliError::config(format!("cannot parse config {}: {e}", path.display())))?;
    let dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let device_path = resolve(&dir, &cfg.device);
    let device_text = fs::read_to_string(&device_path).map_err(|e| {
        CliError::config(format!("cannot read device file {}: {e}", device_path.display()))
    })?;
    let device = DeviceParams::from_json_str(&device_text).map_err(|e| {
        CliError::config(format!("invalid device file {}: {e}", device_path.display()))
    })?;
    Ok(LoadedConfig { cfg, dir, device })
}

/// Interpret `p` relative to `base` unless it is absolute.
pub fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}
