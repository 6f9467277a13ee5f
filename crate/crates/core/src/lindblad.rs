//! Truncated-Fock-space open-quantum-system model of the qubit + resonator +
//! Kerr filter: Hamiltonian construction, master-equation right-hand side,
//! fixed-step RK4 evolution, steady states, and measurement-dephasing
//! extraction from the qubit coherence decay.
//!
//! Internals are nondimensionalized by kappa_f (time in units of 1/kappa_f,
//! rates in units of kappa_f) so the contract tolerances on trace, drift,
//! and residuals are meaningful machine-scale numbers. The density matrix is
//! stored as separate real and imaginary planes; the Hamiltonian is real
//! symmetric in this basis and both jump operators are real, so the hot
//! evolution path runs entirely on real row-contiguous AXPYs.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::device::{DeviceParams, DriveSpec};
use crate::error::{CoreError, Result};

/// Hard cap on the total Hilbert-space dimension 2 * n_c * n_f.
pub const MAX_DIM: usize = 4096;

/// Fock-space truncation: `n_c` resonator levels and `n_f` filter levels
/// (the qubit always has exactly two).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FockConfig {
    pub n_c: usize,
    pub n_f: usize,
}

impl FockConfig {
    pub fn new(n_c: usize, n_f: usize) -> Result<Self> {
        let cfg = FockConfig { n_c, n_f };
        cfg.guard()?;
        Ok(cfg)
    }

    pub fn dim(&self) -> usize {
        2 * self.n_c * self.n_f
    }

    pub fn guard(&self) -> Result<()> {
        if self.n_c < 2 || self.n_f < 2 || self.dim() > MAX_DIM {
            return Err(CoreError::DimensionGuard { dim: self.dim(), max: MAX_DIM });
        }
        Ok(())
    }

    /// Basis index of |qubit q, resonator m, filter k> (filter index fastest).
    pub fn index(&self, q: usize, m: usize, k: usize) -> usize {
        debug_assert!(q < 2 && m < self.n_c && k < self.n_f);
        (q * self.n_c + m) * self.n_f + k
    }

    fn filter_of(&self, i: usize) -> usize {
        i % self.n_f
    }

    fn resonator_of(&self, i: usize) -> usize {
        (i / self.n_f) % self.n_c
    }

    fn qubit_of(&self, i: usize) -> usize {
        i / (self.n_f * self.n_c)
    }
}

/// Density matrix on the truncated space, stored as real and imaginary
/// row-major planes.
#[derive(Debug, Clone)]
pub struct DensityMatrix {
    pub cfg: FockConfig,
    dim: usize,
    re: Vec<f64>,
    im: Vec<f64>,
}

impl DensityMatrix {
    pub fn dim(&self) -> usize {
        self.dim
    }

    fn zeros(cfg: FockConfig) -> Self {
        let dim = cfg.dim();
        DensityMatrix { cfg, dim, re: vec![0.0; dim * dim], im: vec![0.0; dim * dim] }
    }

    /// Pure state |psi><psi| from a complex state vector.
    pub fn from_pure(cfg: FockConfig, psi: &[Complex64]) -> Result<Self> {
        cfg.guard()?;
        let dim = cfg.dim();
        assert_eq!(psi.len(), dim, "state vector length must match the space");
        let norm: f64 = psi.iter().map(|a| a.norm_sqr()).sum();
        assert!(norm > 0.0, "state vector must be nonzero");
        let mut rho = DensityMatrix::zeros(cfg);
        for i in 0..dim {
            for j in 0..dim {
                let v = psi[i] * psi[j].conj() / norm;
                rho.re[i * dim + j] = v.re;
                rho.im[i * dim + j] = v.im;
            }
        }
        Ok(rho)
    }

    /// |g> (x) |0> (x) |0>.
    pub fn ground_vacuum(cfg: FockConfig) -> Result<Self> {
        let mut psi = vec![Complex64::new(0.0, 0.0); cfg.dim()];
        psi[cfg.index(0, 0, 0)] = Complex64::new(1.0, 0.0);
        DensityMatrix::from_pure(cfg, &psi)
    }

    /// (|g> + |e>)/sqrt(2) (x) |0> (x) |0> — the dephasing probe state.
    pub fn superposition_vacuum(cfg: FockConfig) -> Result<Self> {
        let mut psi = vec![Complex64::new(0.0, 0.0); cfg.dim()];
        let a = Complex64::new(std::f64::consts::FRAC_1_SQRT_2, 0.0);
        psi[cfg.index(0, 0, 0)] = a;
        psi[cfg.index(1, 0, 0)] = a;
        DensityMatrix::from_pure(cfg, &psi)
    }

    pub fn entry(&self, i: usize, j: usize) -> Complex64 {
        Complex64::new(self.re[i * self.dim + j], self.im[i * self.dim + j])
    }

    pub fn to_matrix(&self) -> DMatrix<Complex64> {
        DMatrix::from_fn(self.dim, self.dim, |i, j| self.entry(i, j))
    }

    pub fn from_matrix(cfg: FockConfig, m: &DMatrix<Complex64>) -> Result<Self> {
        cfg.guard()?;
        let dim = cfg.dim();
        assert_eq!((m.nrows(), m.ncols()), (dim, dim));
        let mut rho = DensityMatrix::zeros(cfg);
        for i in 0..dim {
            for j in 0..dim {
                rho.re[i * dim + j] = m[(i, j)].re;
                rho.im[i * dim + j] = m[(i, j)].im;
            }
        }
        Ok(rho)
    }

    pub fn trace(&self) -> Complex64 {
        let mut t = Complex64::new(0.0, 0.0);
        for i in 0..self.dim {
            t += self.entry(i, i);
        }
        t
    }

    /// max-abs deviation from Hermiticity.
    pub fn herm_err(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.dim {
            for j in i..self.dim {
                let d = self.entry(i, j) - self.entry(j, i).conj();
                worst = worst.max(d.norm());
            }
        }
        worst
    }

    /// Replace rho by (rho + rho^dagger)/2 and rescale to unit trace.
    pub fn rehermitize_renormalize(&mut self) {
        let d = self.dim;
        for i in 0..d {
            for j in i..d {
                let re = 0.5 * (self.re[i * d + j] + self.re[j * d + i]);
                let im = 0.5 * (self.im[i * d + j] - self.im[j * d + i]);
                self.re[i * d + j] = re;
                self.re[j * d + i] = re;
                self.im[i * d + j] = im;
                self.im[j * d + i] = -im;
            }
        }
        let tr = self.trace().re;
        assert!(tr > 0.0, "trace collapsed to {tr}");
        for v in self.re.iter_mut().chain(self.im.iter_mut()) {
            *v /= tr;
        }
    }

    /// Smallest eigenvalue of the Hermitized matrix, via the symmetric real
    /// embedding [[R, -I], [I, R]] (each eigenvalue appears twice).
    pub fn min_eigenvalue(&self) -> f64 {
        let d = self.dim;
        let mut big = DMatrix::<f64>::zeros(2 * d, 2 * d);
        for i in 0..d {
            for j in 0..d {
                let r = 0.5 * (self.re[i * d + j] + self.re[j * d + i]);
                let im = 0.5 * (self.im[i * d + j] - self.im[j * d + i]);
                big[(i, j)] = r;
                big[(d + i, d + j)] = r;
                big[(i, d + j)] = -im;
                big[(d + i, j)] = im;
            }
        }
        let eigs = nalgebra::linalg::SymmetricEigen::new(big).eigenvalues;
        eigs.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    /// <c^dagger c>.
    pub fn mean_nc(&self) -> f64 {
        (0..self.dim).map(|i| self.cfg.resonator_of(i) as f64 * self.re[i * self.dim + i]).sum()
    }

    /// <f^dagger f>.
    pub fn mean_nf(&self) -> f64 {
        (0..self.dim).map(|i| self.cfg.filter_of(i) as f64 * self.re[i * self.dim + i]).sum()
    }

    /// <c> = Tr(c rho).
    pub fn mean_c(&self) -> Complex64 {
        let mut s = Complex64::new(0.0, 0.0);
        for b in 0..self.dim {
            let m = self.cfg.resonator_of(b);
            if m >= 1 {
                s += (m as f64).sqrt() * self.entry(b, b - self.cfg.n_f);
            }
        }
        s
    }

    /// <f> = Tr(f rho).
    pub fn mean_f(&self) -> Complex64 {
        let mut s = Complex64::new(0.0, 0.0);
        for b in 0..self.dim {
            let k = self.cfg.filter_of(b);
            if k >= 1 {
                s += (k as f64).sqrt() * self.entry(b, b - 1);
            }
        }
        s
    }

    /// Qubit coherence <g| Tr_cf rho |e>.
    pub fn qubit_coherence(&self) -> Complex64 {
        let block = self.cfg.n_c * self.cfg.n_f;
        let mut s = Complex64::new(0.0, 0.0);
        for i in 0..block {
            s += self.entry(i, i + block);
        }
        s
    }

    /// Population of the highest resonator or filter level (truncation-edge
    /// occupancy).
    pub fn top_level_population(&self) -> f64 {
        (0..self.dim)
            .filter(|&i| {
                self.cfg.resonator_of(i) == self.cfg.n_c - 1
                    || self.cfg.filter_of(i) == self.cfg.n_f - 1
            })
            .map(|i| self.re[i * self.dim + i])
            .sum()
    }
}

/// One sampled instant of a master-equation evolution. Drift fields record
/// the deviations found before the sample was re-Hermitized and
/// renormalized.
#[derive(Debug, Clone, Copy)]
pub struct LindbladSample {
    pub t: f64,
    pub n_c_mean: f64,
    pub n_f_mean: f64,
    pub mean_c: Complex64,
    pub mean_f: Complex64,
    pub coherence: Complex64,
    pub trace_err: f64,
    pub herm_err: f64,
    pub min_eig: f64,
    pub top_level_pop: f64,
}

/// Steady state with its convergence diagnostics. `residual` is the
/// kappa_f-scaled Frobenius norm of the generator applied to the state.
#[derive(Debug, Clone)]
pub struct SteadyState {
    pub rho: DensityMatrix,
    pub residual: f64,
    /// top_level_population >= 1e-4: reported values are truncation-limited
    pub truncation_warning: bool,
}

/// Measurement-dephasing extraction from the coherence decay of an initial
/// (|g>+|e>)/sqrt(2) superposition.
#[derive(Debug, Clone, Copy)]
pub struct DephasingExtraction {
    /// dephasing rate after subtracting the 1/(2 T1) relaxation baseline (1/s)
    pub gamma: f64,
    /// raw fitted coherence decay rate (1/s)
    pub gamma_total: f64,
    /// subtracted baseline 1/(2 T1) (1/s)
    pub baseline: f64,
    pub r_squared: f64,
    /// largest resonator photon number seen during the evolution
    pub n_c_max: f64,
    pub samples_used: usize,
}

/// Sparse symmetric Hamiltonian: diagonal plus strictly-upper entries.
struct HSparse {
    diag: Vec<f64>,
    /// (row, col, value) with row < col
    pairs: Vec<(usize, usize, f64)>,
}

/// Hamiltonian terms in SI angular units (rad/s), in the drive rotating
/// frame:
/// (d_c + chi |e><e|) c'c + d_f f'f + (alpha_f/2) f'f'ff
/// + g_cf (c'f + c f') + (Omega/2)(f + f').
fn hamiltonian_terms(device: &DeviceParams, drive: &DriveSpec, cfg: FockConfig) -> HSparse {
    let det = device.detunings(drive);
    let delta_c = det.delta_c;
    let (n_c, n_f) = (cfg.n_c, cfg.n_f);
    let mut diag = vec![0.0; cfg.dim()];
    let mut pairs = Vec::new();
    for q in 0..2 {
        let d_res = delta_c + device.chi_qc * q as f64;
        for m in 0..n_c {
            for k in 0..n_f {
                let i = cfg.index(q, m, k);
                diag[i] = d_res * m as f64
                    + det.delta_f * k as f64
                    + 0.5 * device.filter_anharm * (k * (k - k.min(1))) as f64;
                // exchange coupling c'f: |m, k> -> |m+1, k-1>
                if m + 1 < n_c && k >= 1 {
                    let j = cfg.index(q, m + 1, k - 1);
                    pairs.push((i, j, device.g_cf * ((m + 1) as f64 * k as f64).sqrt()));
                }
                // drive f': |m, k> -> |m, k+1>
                if k + 1 < n_f {
                    let j = cfg.index(q, m, k + 1);
                    pairs.push((i, j, 0.5 * drive.drive_amp * ((k + 1) as f64).sqrt()));
                }
            }
        }
    }
    // Kerr diagonal written via k(k-1) without underflow at k = 0
    debug_assert!(pairs.iter().all(|&(a, b, _)| a < b));
    HSparse { diag, pairs }
}

/// Dense Hermitian Hamiltonian matrix (rad/s), basis-ordered
/// qubit (x) resonator (x) filter with the filter index fastest.
pub fn build_hamiltonian(
    device: &DeviceParams,
    drive: &DriveSpec,
    cfg: FockConfig,
) -> Result<DMatrix<Complex64>> {
    cfg.guard()?;
    let h = hamiltonian_terms(device, drive, cfg);
    let dim = cfg.dim();
    let mut m = DMatrix::zeros(dim, dim);
    for (i, &d) in h.diag.iter().enumerate() {
        m[(i, i)] = Complex64::new(d, 0.0);
    }
    for &(a, b, v) in &h.pairs {
        m[(a, b)] = Complex64::new(v, 0.0);
        m[(b, a)] = Complex64::new(v, 0.0);
    }
    Ok(m)
}

/// Kappa_f-scaled evolution engine (time unit 1/kappa_f, rates in kappa_f).
struct Engine {
    dim: usize,
    block: usize,
    diag: Vec<f64>,
    pairs: Vec<(usize, usize, f64)>,
    /// sqrt(k_i + 1), zero at the filter truncation edge
    sqf: Vec<f64>,
    /// 0.5 * (k_i + gamma1 * q_i) — anticommutator weights
    w: Vec<f64>,
    /// qubit decay rate 1/(T1 kappa_f)
    gamma1: f64,
    kappa_f: f64,
}

impl Engine {
    fn new(device: &DeviceParams, drive: &DriveSpec, cfg: FockConfig) -> Result<Self> {
        cfg.guard()?;
        assert!(device.kappa_f > 0.0, "evolution needs kappa_f > 0");
        let kf = device.kappa_f;
        let h = hamiltonian_terms(device, drive, cfg);
        let dim = cfg.dim();
        let gamma1 = if device.qubit_t1.is_finite() { 1.0 / (device.qubit_t1 * kf) } else { 0.0 };
        let sqf = (0..dim)
            .map(|i| {
                let k = cfg.filter_of(i);
                if k + 1 < cfg.n_f { ((k + 1) as f64).sqrt() } else { 0.0 }
            })
            .collect();
        let w = (0..dim)
            .map(|i| 0.5 * (cfg.filter_of(i) as f64 + gamma1 * cfg.qubit_of(i) as f64))
            .collect();
        Ok(Engine {
            dim,
            block: cfg.n_c * cfg.n_f,
            diag: h.diag.iter().map(|d| d / kf).collect(),
            pairs: h.pairs.iter().map(|&(a, b, v)| (a, b, v / kf)).collect(),
            sqf,
            w,
            gamma1,
            kappa_f: kf,
        })
    }

    /// out = H * p for one real plane (H symmetric sparse), row-contiguous.
    fn h_mul(&self, p: &[f64], out: &mut [f64]) {
        let d = self.dim;
        for a in 0..d {
            let da = self.diag[a];
            let (row_p, row_o) = (&p[a * d..(a + 1) * d], &mut out[a * d..(a + 1) * d]);
            for j in 0..d {
                row_o[j] = da * row_p[j];
            }
        }
        for &(a, b, h) in &self.pairs {
            let (lo, hi) = out.split_at_mut(b * d);
            let row_a = &mut lo[a * d..(a + 1) * d];
            let row_b = &mut hi[..d];
            let (pa, pb) = (&p[a * d..(a + 1) * d], &p[b * d..(b + 1) * d]);
            for j in 0..d {
                row_a[j] += h * pb[j];
                row_b[j] += h * pa[j];
            }
        }
    }

    /// out = p * H for one real plane (column sweeps; correctness path).
    fn mul_h(&self, p: &[f64], out: &mut [f64]) {
        let d = self.dim;
        for r in 0..d {
            let row_p = &p[r * d..(r + 1) * d];
            let row_o = &mut out[r * d..(r + 1) * d];
            for c in 0..d {
                row_o[c] = row_p[c] * self.diag[c];
            }
            for &(a, b, h) in &self.pairs {
                row_o[b] += h * row_p[a];
                row_o[a] += h * row_p[b];
            }
        }
    }

    /// Add the dissipators of one plane of rho into the same plane of out:
    /// filter decay (rate 1) and qubit decay (rate gamma1), both real.
    fn add_dissipators(&self, p: &[f64], out: &mut [f64]) {
        let d = self.dim;
        // f rho f': out[i][j] += sqf[i] sqf[j] p[i+1][j+1]
        for i in 0..d - 1 {
            let si = self.sqf[i];
            if si == 0.0 {
                continue;
            }
            let src = &p[(i + 1) * d + 1..(i + 2) * d];
            let dst = &mut out[i * d..i * d + d - 1];
            for j in 0..d - 1 {
                dst[j] += si * self.sqf[j] * src[j];
            }
        }
        // qubit jump feeds the g block from the e block
        if self.gamma1 > 0.0 {
            let s = self.block;
            for i in 0..s {
                let src = &p[(i + s) * d + s..(i + s) * d + 2 * s];
                let dst = &mut out[i * d..i * d + s];
                for j in 0..s {
                    dst[j] += self.gamma1 * src[j];
                }
            }
        }
        // anticommutator halves
        for i in 0..d {
            let wi = self.w[i];
            let row_p = &p[i * d..(i + 1) * d];
            let row_o = &mut out[i * d..(i + 1) * d];
            for j in 0..d {
                row_o[j] -= (wi + self.w[j]) * row_p[j];
            }
        }
    }

    /// Master-equation right-hand side for Hermitian rho, using
    /// [H, rho] = A - A^dagger with A = H rho (one sparse multiply).
    /// `a_re`/`a_im` are scratch planes.
    fn rhs_hermitian(
        &self,
        p_re: &[f64],
        p_im: &[f64],
        out_re: &mut [f64],
        out_im: &mut [f64],
        a_re: &mut [f64],
        a_im: &mut [f64],
    ) {
        let d = self.dim;
        self.h_mul(p_re, a_re);
        self.h_mul(p_im, a_im);
        // -i (A - A^dagger): re = A_im + A_im^T, im = A_re^T - A_re
        for i in 0..d {
            for j in 0..d {
                out_re[i * d + j] = a_im[i * d + j] + a_im[j * d + i];
                out_im[i * d + j] = a_re[j * d + i] - a_re[i * d + j];
            }
        }
        self.add_dissipators(p_re, out_re);
        self.add_dissipators(p_im, out_im);
    }

    /// Right-hand side for a general (not necessarily Hermitian) rho.
    fn rhs_general(
        &self,
        p_re: &[f64],
        p_im: &[f64],
        out_re: &mut [f64],
        out_im: &mut [f64],
        a_re: &mut [f64],
        a_im: &mut [f64],
        b_re: &mut [f64],
        b_im: &mut [f64],
    ) {
        let d = self.dim;
        self.h_mul(p_re, a_re);
        self.h_mul(p_im, a_im);
        self.mul_h(p_re, b_re);
        self.mul_h(p_im, b_im);
        // -i (H rho - rho H)
        for i in 0..d * d {
            out_re[i] = a_im[i] - b_im[i];
            out_im[i] = b_re[i] - a_re[i];
        }
        self.add_dissipators(p_re, out_re);
        self.add_dissipators(p_im, out_im);
    }

    /// Power-iteration estimate of the generator's spectral radius (in
    /// kappa_f units), on a fixed-seed random Hermitian matrix.
    fn spectral_radius(&self) -> f64 {
        let d = self.dim;
        let mut rng = ChaCha8Rng::seed_from_u64(0xE16E);
        let mut re = vec![0.0; d * d];
        let mut im = vec![0.0; d * d];
        for i in 0..d {
            for j in i..d {
                let vr: f64 = rng.gen_range(-1.0..1.0);
                re[i * d + j] = vr;
                re[j * d + i] = vr;
                if j > i {
                    let vi: f64 = rng.gen_range(-1.0..1.0);
                    im[i * d + j] = vi;
                    im[j * d + i] = -vi;
                }
            }
        }
        let mut out_re = vec![0.0; d * d];
        let mut out_im = vec![0.0; d * d];
        let mut a_re = vec![0.0; d * d];
        let mut a_im = vec![0.0; d * d];
        let norm = |r: &[f64], i: &[f64]| -> f64 {
            (r.iter().map(|x| x * x).sum::<f64>() + i.iter().map(|x| x * x).sum::<f64>()).sqrt()
        };
        let mut sigma: f64 = 0.0;
        for _ in 0..25 {
            let n0 = norm(&re, &im);
            assert!(n0 > 0.0, "power iteration vector vanished");
            for v in re.iter_mut().chain(im.iter_mut()) {
                *v /= n0;
            }
            self.rhs_hermitian(&re, &im, &mut out_re, &mut out_im, &mut a_re, &mut a_im);
            sigma = sigma.max(norm(&out_re, &out_im));
            std::mem::swap(&mut re, &mut out_re);
            std::mem::swap(&mut im, &mut out_im);
        }
        sigma * 1.05
    }
}

/// Largest RK4 step (seconds) the generator allows: 0.02 divided by the
/// spectral-radius estimate.
pub fn max_step(device: &DeviceParams, drive: &DriveSpec, cfg: FockConfig) -> Result<f64> {
    let engine = Engine::new(device, drive, cfg)?;
    Ok(0.02 / engine.spectral_radius() / device.kappa_f)
}

/// Master-equation right-hand side d(rho)/dt in SI units (1/s). Correct for
/// any complex input matrix; the evolution loop uses a Hermitian-specialized
/// internal path that this function cross-checks against.
pub fn lindblad_rhs(
    rho: &DensityMatrix,
    device: &DeviceParams,
    drive: &DriveSpec,
    cfg: FockConfig,
) -> Result<DensityMatrix> {
    assert_eq!(rho.cfg, cfg, "density matrix and config disagree");
    let engine = Engine::new(device, drive, cfg)?;
    let n = rho.dim * rho.dim;
    let mut out = DensityMatrix::zeros(cfg);
    let (mut a_re, mut a_im) = (vec![0.0; n], vec![0.0; n]);
    let (mut b_re, mut b_im) = (vec![0.0; n], vec![0.0; n]);
    engine.rhs_general(
        &rho.re, &rho.im, &mut out.re, &mut out.im, &mut a_re, &mut a_im, &mut b_re, &mut b_im,
    );
    for v in out.re.iter_mut().chain(out.im.iter_mut()) {
        *v *= engine.kappa_f;
    }
    Ok(out)
}

struct Workspace {
    k1_re: Vec<f64>,
    k1_im: Vec<f64>,
    k2_re: Vec<f64>,
    k2_im: Vec<f64>,
    k3_re: Vec<f64>,
    k3_im: Vec<f64>,
    k4_re: Vec<f64>,
    k4_im: Vec<f64>,
    tmp_re: Vec<f64>,
    tmp_im: Vec<f64>,
    a_re: Vec<f64>,
    a_im: Vec<f64>,
}

impl Workspace {
    fn new(n: usize) -> Self {
        Workspace {
            k1_re: vec![0.0; n],
            k1_im: vec![0.0; n],
            k2_re: vec![0.0; n],
            k2_im: vec![0.0; n],
            k3_re: vec![0.0; n],
            k3_im: vec![0.0; n],
            k4_re: vec![0.0; n],
            k4_im: vec![0.0; n],
            tmp_re: vec![0.0; n],
            tmp_im: vec![0.0; n],
            a_re: vec![0.0; n],
            a_im: vec![0.0; n],
        }
    }
}

fn rk4_step(engine: &Engine, rho: &mut DensityMatrix, h: f64, ws: &mut Workspace) {
    let n = rho.re.len();
    let half = 0.5 * h;
    engine.rhs_hermitian(&rho.re, &rho.im, &mut ws.k1_re, &mut ws.k1_im, &mut ws.a_re, &mut ws.a_im);
    for i in 0..n {
        ws.tmp_re[i] = rho.re[i] + half * ws.k1_re[i];
        ws.tmp_im[i] = rho.im[i] + half * ws.k1_im[i];
    }
    engine.rhs_hermitian(&ws.tmp_re, &ws.tmp_im, &mut ws.k2_re, &mut ws.k2_im, &mut ws.a_re, &mut ws.a_im);
    for i in 0..n {
        ws.tmp_re[i] = rho.re[i] + half * ws.k2_re[i];
        ws.tmp_im[i] = rho.im[i] + half * ws.k2_im[i];
    }
    engine.rhs_hermitian(&ws.tmp_re, &ws.tmp_im, &mut ws.k3_re, &mut ws.k3_im, &mut ws.a_re, &mut ws.a_im);
    for i in 0..n {
        ws.tmp_re[i] = rho.re[i] + h * ws.k3_re[i];
        ws.tmp_im[i] = rho.im[i] + h * ws.k3_im[i];
    }
    engine.rhs_hermitian(&ws.tmp_re, &ws.tmp_im, &mut ws.k4_re, &mut ws.k4_im, &mut ws.a_re, &mut ws.a_im);
    let sixth = h / 6.0;
    for i in 0..n {
        rho.re[i] +=
            sixth * (ws.k1_re[i] + 2.0 * ws.k2_re[i] + 2.0 * ws.k3_re[i] + ws.k4_re[i]);
        rho.im[i] +=
            sixth * (ws.k1_im[i] + 2.0 * ws.k2_im[i] + 2.0 * ws.k3_im[i] + ws.k4_im[i]);
    }
}

fn take_sample(rho: &mut DensityMatrix, t: f64) -> Result<LindbladSample> {
    let trace_err = (rho.trace() - Complex64::new(1.0, 0.0)).norm();
    let herm_err = rho.herm_err();
    assert!(herm_err < 1e-7, "Hermiticity drift {herm_err:.3e} at t = {t:.3e} s");
    rho.rehermitize_renormalize();
    let min_eig = rho.min_eigenvalue();
    if min_eig < -1e-5 {
        return Err(CoreError::PositivityLoss { min_eig, t });
    }
    Ok(LindbladSample {
        t,
        n_c_mean: rho.mean_nc(),
        n_f_mean: rho.mean_nf(),
        mean_c: rho.mean_c(),
        mean_f: rho.mean_f(),
        coherence: rho.qubit_coherence(),
        trace_err,
        herm_err,
        min_eig,
        top_level_pop: rho.top_level_population(),
    })
}

/// Evolve `rho0` for `t_final` seconds with fixed RK4 steps of at most `dt`,
/// sampling every `stride` steps (plus the initial and final instants).
///
/// The step must satisfy dt <= 0.02 / spectral_radius(generator); per-step
/// trace drift must stay below 1e-7 (asserted) and each sample is
/// re-Hermitized and trace-renormalized after its drift is recorded.
pub fn evolve(
    rho0: &DensityMatrix,
    device: &DeviceParams,
    drive: &DriveSpec,
    cfg: FockConfig,
    t_final: f64,
    dt: f64,
    stride: usize,
) -> Result<(Vec<LindbladSample>, DensityMatrix)> {
    assert_eq!(rho0.cfg, cfg, "density matrix and config disagree");
    assert!(t_final > 0.0 && dt > 0.0 && stride > 0);
    let engine = Engine::new(device, drive, cfg)?;
    let max_dt = 0.02 / engine.spectral_radius() / engine.kappa_f;
    if dt > max_dt {
        return Err(CoreError::StepTooLarge { dt, max_dt });
    }
    let n_steps = (t_final / dt).ceil().max(1.0) as usize;
    let h_si = t_final / n_steps as f64;
    let h = h_si * engine.kappa_f; // scaled step

    let mut rho = rho0.clone();
    let mut ws = Workspace::new(rho.re.len());
    let mut samples = Vec::with_capacity(n_steps / stride + 2);
    samples.push(take_sample(&mut rho, 0.0)?);
    for step in 0..n_steps {
        rk4_step(&engine, &mut rho, h, &mut ws);
        let t = (step + 1) as f64 * h_si;
        let tr_drift = (rho.trace() - Complex64::new(1.0, 0.0)).norm();
        assert!(tr_drift < 1e-7, "trace drift {tr_drift:.3e} at t = {t:.3e} s");
        if (step + 1) % stride == 0 || step + 1 == n_steps {
            samples.push(take_sample(&mut rho, t)?);
        }
    }
    Ok((samples, rho))
}

/// Frobenius norm of the kappa_f-scaled generator applied to rho.
fn generator_residual(engine: &Engine, rho: &DensityMatrix) -> f64 {
    let n = rho.re.len();
    let (mut o_re, mut o_im) = (vec![0.0; n], vec![0.0; n]);
    let (mut a_re, mut a_im) = (vec![0.0; n], vec![0.0; n]);
    engine.rhs_hermitian(&rho.re, &rho.im, &mut o_re, &mut o_im, &mut a_re, &mut a_im);
    (o_re.iter().map(|x| x * x).sum::<f64>() + o_im.iter().map(|x| x * x).sum::<f64>()).sqrt()
}

/// Relative pivot threshold below which elimination gives up on a column
/// and swaps in a later one. Rank detection from pivots alone is not
/// trustworthy on ill-conditioned generators, so the null space is found by
/// inverse iteration through the factorization instead; this threshold only
/// keeps the elimination out of numerically dead columns.
const NULL_PIVOT_REL: f64 = 1e-6;

/// Unit-norm vectors whose generator residual falls below this are counted
/// as null directions. Genuine null vectors converge to ~1e-12 under
/// inverse iteration while the slowest physical decay modes sit at least
/// four decades higher.
const NULL_RESIDUAL: f64 = 1e-9;

/// Row-pivoted in-place LU with lazy column exchange, used for numerical
/// rank detection, null-space extraction, and regularized solves (inverse
/// iteration). A column whose remaining entries all fall below the
/// tolerance is swapped out for a later viable one, so the trailing columns
/// at exit are exactly the null directions. Row-major storage keeps the
/// elimination sweeps contiguous.
struct LuNull {
    n: usize,
    rank: usize,
    /// multipliers below the diagonal, U on and above
    a: Vec<Complex64>,
    row_perm: Vec<usize>,
    col_perm: Vec<usize>,
    max_abs: f64,
}

impl LuNull {
    fn factor(m: &DMatrix<Complex64>, tol_rel: f64) -> Self {
        let n = m.nrows();
        let zero = Complex64::new(0.0, 0.0);
        let mut a: Vec<Complex64> = vec![zero; n * n];
        let mut max_abs: f64 = 0.0;
        for r in 0..n {
            for c in 0..n {
                let v = m[(r, c)];
                a[r * n + c] = v;
                max_abs = max_abs.max(v.norm());
            }
        }
        let tol = tol_rel * max_abs.max(1e-300);
        let mut row_perm: Vec<usize> = (0..n).collect();
        let mut col_perm: Vec<usize> = (0..n).collect();
        let col_max = |a: &[Complex64], col: usize, from: usize| -> (f64, usize) {
            let mut best = (0.0f64, from);
            for r in from..n {
                let v = a[r * n + col].norm();
                if v > best.0 {
                    best = (v, r);
                }
            }
            best
        };
        let mut rank = n;
        'elim: for step in 0..n {
            let (mut best, mut br) = col_max(&a, step, step);
            if best <= tol {
                // exchange with the first later column that still has weight
                let mut found = false;
                for c in step + 1..n {
                    let (b, r) = col_max(&a, c, step);
                    if b > tol {
                        for row in 0..n {
                            a.swap(row * n + step, row * n + c);
                        }
                        col_perm.swap(step, c);
                        best = b;
                        br = r;
                        found = true;
                        break;
                    }
                }
                if !found {
                    rank = step;
                    break 'elim;
                }
            }
            let _ = best;
            if br != step {
                for c in 0..n {
                    a.swap(step * n + c, br * n + c);
                }
                row_perm.swap(step, br);
            }
            let piv = a[step * n + step];
            for r in step + 1..n {
                let factor = a[r * n + step] / piv;
                a[r * n + step] = factor;
                if factor.norm() == 0.0 {
                    continue;
                }
                let (prow, crow) = a.split_at_mut(r * n);
                let prow = &prow[step * n..step * n + n];
                let crow = &mut crow[..n];
                for c in step + 1..n {
                    crow[c] -= factor * prow[c];
                }
            }
        }
        LuNull { n, rank, a, row_perm, col_perm, max_abs }
    }

    /// Solve A x = b with near-singular pivots clamped just above the
    /// machine floor — one inverse-iteration step that amplifies the null
    /// component while perturbing the operator as little as possible.
    fn solve_regularized(&self, b: &DVector<Complex64>) -> DVector<Complex64> {
        let (n, zero) = (self.n, Complex64::new(0.0, 0.0));
        let clamp = 1e-13 * self.max_abs.max(1e-300);
        // forward: apply the recorded row permutation and multipliers
        let mut y: Vec<Complex64> = (0..n).map(|i| b[self.row_perm[i]]).collect();
        for step in 0..self.rank {
            for r in step + 1..n {
                let f = self.a[r * n + step];
                if f.norm() != 0.0 {
                    let ys = y[step];
                    y[r] -= f * ys;
                }
            }
        }
        // back: clamp dead pivots so the division stays finite
        let mut x = vec![zero; n];
        for r in (0..n).rev() {
            let mut s = y[r];
            for c in r + 1..n {
                s -= self.a[r * n + c] * x[c];
            }
            let mut piv = self.a[r * n + r];
            if piv.norm() < clamp {
                let scale = if piv.norm() == 0.0 {
                    Complex64::new(1.0, 0.0)
                } else {
                    piv / piv.norm()
                };
                piv = scale * clamp;
            }
            x[r] = s / piv;
        }
        let mut v = DVector::from_element(n, zero);
        for i in 0..n {
            v[self.col_perm[i]] = x[i];
        }
        v
    }
}

/// Dense kappa_f-scaled Liouvillian in the column-major vectorization
/// vec(rho)[c * dim + r] = rho[r, c].
fn build_liouvillian(engine: &Engine, cfg: FockConfig) -> DMatrix<Complex64> {
    let d = engine.dim;
    let n = d * d;
    let mi = -Complex64::i();
    let mut l = DMatrix::from_element(n, n, Complex64::new(0.0, 0.0));
    let v = |r: usize, c: usize| c * d + r;
    let mut h_entries: Vec<(usize, usize, f64)> = Vec::new();
    for (i, &dg) in engine.diag.iter().enumerate() {
        h_entries.push((i, i, dg));
    }
    for &(a, b, hv) in &engine.pairs {
        h_entries.push((a, b, hv));
        h_entries.push((b, a, hv));
    }
    // -i (H rho - rho H)
    for &(r, a, hv) in &h_entries {
        for c in 0..d {
            l[(v(r, c), v(a, c))] += mi * hv;
            l[(v(c, a), v(c, r))] -= mi * hv;
        }
    }
    // jump operators: filter lowering (rate 1 scaled) and qubit lowering
    let mut jumps: Vec<(Vec<(usize, usize, f64)>, f64)> = Vec::new();
    let mut f_entries = Vec::new();
    for i in 0..d {
        let k = cfg.filter_of(i);
        if k + 1 < cfg.n_f {
            f_entries.push((i, i + 1, ((k + 1) as f64).sqrt()));
        }
    }
    jumps.push((f_entries, 1.0));
    if engine.gamma1 > 0.0 {
        let s = engine.block;
        let q_entries: Vec<(usize, usize, f64)> = (0..s).map(|i| (i, i + s, 1.0)).collect();
        jumps.push((q_entries, engine.gamma1));
    }
    for (entries, rate) in &jumps {
        for &(r, a, va) in entries {
            for &(c, b, vb) in entries {
                l[(v(r, c), v(a, b))] += Complex64::new(rate * va * vb, 0.0);
            }
        }
        // A^T A is diagonal for both lowering operators
        let mut m_diag = vec![0.0; d];
        for &(_, a, va) in entries {
            m_diag[a] += va * va;
        }
        for (a, &md) in m_diag.iter().enumerate() {
            for c in 0..d {
                l[(v(a, c), v(a, c))] -= Complex64::new(0.5 * rate * md, 0.0);
                l[(v(c, a), v(c, a))] -= Complex64::new(0.5 * rate * md, 0.0);
            }
        }
    }
    l
}

/// Dimension threshold below which the steady state is found by dense
/// null-space extraction; larger spaces use long-time evolution.
const NULLSPACE_MAX_DIM: usize = 64;

/// Steady state of the master equation. For dim <= 64 the Liouvillian null
/// space is extracted densely (erroring on degeneracy); otherwise the system
/// is evolved from |g, vac, vac> until the generator residual falls below
/// 1e-9 (kappa_f-scaled).
pub fn steady_state(device: &DeviceParams, drive: &DriveSpec, cfg: FockConfig) -> Result<SteadyState> {
    cfg.guard()?;
    let engine = Engine::new(device, drive, cfg)?;
    let dim = cfg.dim();
    let rho = if dim <= NULLSPACE_MAX_DIM {
        let l = build_liouvillian(&engine, cfg);
        let lu = LuNull::factor(&l, NULL_PIVOT_REL);
        let n = dim * dim;

        // Deflated inverse iteration: the factorization's huge gain along
        // the (exactly singular) null space pulls a random start onto it in
        // a few rounds, independent of pivot-based rank guesses. Found
        // directions are projected out of later iterates, so each pass
        // either converges onto a further null direction (degenerate
        // kernel) or stalls at the slowest decaying mode, whose residual is
        // decades above the null threshold.
        let mut rng = ChaCha8Rng::seed_from_u64(0x55AD);
        let mut found: Vec<DVector<Complex64>> = Vec::new();
        let max_probe = 6.min(n);
        for _slot in 0..max_probe {
            let mut x = DVector::from_fn(n, |_, _| {
                Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
            });
            x /= Complex64::new(x.norm(), 0.0);
            for _ in 0..5 {
                let mut y = lu.solve_regularized(&x);
                for v in &found {
                    let proj = v.dotc(&y);
                    y -= v * proj;
                }
                let norm = y.norm();
                assert!(norm > 0.0, "inverse iteration collapsed");
                y /= Complex64::new(norm, 0.0);
                x = y;
            }
            if (&l * &x).norm() < NULL_RESIDUAL {
                found.push(x);
            } else {
                break;
            }
        }
        if found.len() != 1 {
            return Err(CoreError::NonUniqueSteadyState { nullity: found.len() });
        }
        let vec = found.pop().expect("length checked above");
        // rotate away the arbitrary overall phase so the trace is real
        // and positive before Hermitizing
        let mut tr = Complex64::new(0.0, 0.0);
        for r in 0..dim {
            tr += vec[r * dim + r];
        }
        assert!(tr.norm() > 0.0, "null vector is traceless");
        let phase = tr.conj() / tr.norm();
        let mut rho = DensityMatrix::zeros(cfg);
        for c in 0..dim {
            for r in 0..dim {
                let z = phase * vec[c * dim + r];
                rho.re[r * dim + c] = z.re;
                rho.im[r * dim + c] = z.im;
            }
        }
        rho.rehermitize_renormalize();
        rho
    } else {
        // long-time evolution at the slowest hybrid-mode rate
        let modes = device.hybridized_modes();
        let kappa_slow = modes
            .kappa_plus
            .min(modes.kappa_minus)
            .max(1e-3 * device.kappa_f);
        let dt = 0.8 * 0.02 / engine.spectral_radius() / engine.kappa_f;
        let t_max = 60.0 / kappa_slow;
        let chunk = 2.0 / kappa_slow;
        let mut rho = DensityMatrix::ground_vacuum(cfg)?;
        let mut t = 0.0;
        let mut residual = f64::INFINITY;
        while t < t_max {
            let (_, next) = evolve(&rho, device, drive, cfg, chunk, dt, usize::MAX)?;
            rho = next;
            t += chunk;
            residual = generator_residual(&engine, &rho);
            if residual < 1e-9 {
                break;
            }
        }
        if residual >= 1e-9 {
            return Err(CoreError::SteadyStateNotConverged { residual, t_final: t });
        }
        rho
    };
    let residual = generator_residual(&engine, &rho);
    if residual >= 1e-9 {
        return Err(CoreError::SteadyStateNotConverged { residual, t_final: 0.0 });
    }
    let top = rho.top_level_population();
    Ok(SteadyState { rho, residual, truncation_warning: top >= 1e-4 })
}

/// Measurement-induced dephasing rate extracted from the decay of the qubit
/// coherence of an initial (|g>+|e>)/sqrt(2) (x) vacuum state under the
/// drive.
///
/// The log-magnitude of the coherence is fit linearly on [fit_start,
/// t_final] (fit_start is clamped up to the 5/kappa_f transient); the
/// 1/(2 T1) relaxation baseline is subtracted from the fitted rate. The
/// resonator population must stay below n_crit/10 for the comparison with
/// the closed-form rates to be meaningful.
pub fn extract_meas_dephasing(
    device: &DeviceParams,
    drive: &DriveSpec,
    cfg: FockConfig,
    t_final: f64,
    fit_start: f64,
) -> Result<DephasingExtraction> {
    cfg.guard()?;
    let fit_start = fit_start.max(5.0 / device.kappa_f);
    assert!(t_final > fit_start, "t_final must exceed the fit transient");
    let rho0 = DensityMatrix::superposition_vacuum(cfg)?;
    let dt = 0.8 * max_step(device, drive, cfg)?;
    let n_steps = (t_final / dt).ceil() as usize;
    let stride = (n_steps / 150).max(1);
    let (samples, _) = evolve(&rho0, device, drive, cfg, t_final, dt, stride)?;

    let n_c_max = samples.iter().map(|s| s.n_c_mean).fold(0.0, f64::max);
    let limit = device.critical_photon_number()? / 10.0;
    if n_c_max >= limit {
        return Err(CoreError::WeakDriveViolated { n_bar: n_c_max, limit });
    }

    let pts: Vec<(f64, f64)> = samples
        .iter()
        .filter(|s| s.t >= fit_start && s.coherence.norm() > 0.0)
        .map(|s| (s.t, s.coherence.norm().ln()))
        .collect();
    assert!(pts.len() >= 8, "too few samples in the fit window");
    let n = pts.len() as f64;
    let mean_t = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mean_t).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mean_t) * (p.1 - mean_y)).sum();
    let slope = sxy / sxx;
    let ss_tot: f64 = pts.iter().map(|p| (p.1 - mean_y).powi(2)).sum();
    let ss_res: f64 = pts
        .iter()
        .map(|p| (p.1 - (mean_y + slope * (p.0 - mean_t))).powi(2))
        .sum();
    // a perfectly flat signal is a perfect fit, not an undefined one
    let r_squared = if ss_tot > 1e-24 { 1.0 - ss_res / ss_tot } else { 1.0 };
    if r_squared < 0.99 {
        return Err(CoreError::FitUnstable { r_squared });
    }
    let gamma_total = -slope;
    let baseline = if device.qubit_t1.is_finite() { 0.5 / device.qubit_t1 } else { 0.0 };
    Ok(DephasingExtraction {
        gamma: (gamma_total - baseline).max(0.0),
        gamma_total,
        baseline,
        r_squared,
        n_c_max,
        samples_used: pts.len(),
    })
}
