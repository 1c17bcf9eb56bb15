//! Time, frequency and delay sampling grids plus the discrete Fourier
//! transform convention shared by the forward model and the retrieval.
//!
//! The transform is the unitary centered DFT
//! `X_j = n^{-1/2} sum_k x_k exp(-i w_j t_k)` with `t_k = (k - n/2) dt` and
//! `w_j = (j - n/2) dw`, `dw = 2 pi / (n dt)`.

use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Energy fraction allowed to wrap across the grid boundary in a delay shift.
pub const WRAP_ENERGY_TOL: f64 = 1e-10;

/// Uniform time grid centered so that t = 0 falls on sample n_t/2.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    n_t: usize,
    dt: f64,
    t0_offset: f64,
}

impl TimeGrid {
    /// Centered grid; `n_t` must be a power of two >= 4 and `dt > 0`.
    pub fn centered(n_t: usize, dt: f64) -> Result<Self> {
        if n_t < 4 || !n_t.is_power_of_two() {
            return Err(Error::InvalidGrid(format!(
                "n_t = {n_t} must be a power of two >= 4"
            )));
        }
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::InvalidGrid(format!("dt = {dt} must be positive")));
        }
        Ok(Self {
            n_t,
            dt,
            t0_offset: -((n_t / 2) as f64) * dt,
        })
    }

    pub fn n(&self) -> usize {
        self.n_t
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn span(&self) -> f64 {
        self.n_t as f64 * self.dt
    }

    /// Time of sample `k` in femtoseconds.
    pub fn t(&self, k: usize) -> f64 {
        self.t0_offset + k as f64 * self.dt
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.n_t).map(|k| self.t(k)).collect()
    }

    /// DFT-conjugate frequency grid.
    pub fn freq_grid(&self) -> FreqGrid {
        FreqGrid {
            n_w: self.n_t,
            dw: 2.0 * std::f64::consts::PI / (self.n_t as f64 * self.dt),
            w_center: 0.0,
        }
    }
}

/// Angular-frequency grid, rad/fs, centered like the time grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FreqGrid {
    n_w: usize,
    dw: f64,
    w_center: f64,
}

impl FreqGrid {
    pub fn n(&self) -> usize {
        self.n_w
    }

    pub fn dw(&self) -> f64 {
        self.dw
    }

    pub fn w_center(&self) -> f64 {
        self.w_center
    }

    /// Frequency of bin `j` relative to the grid center.
    pub fn w(&self, j: usize) -> f64 {
        (j as f64 - (self.n_w / 2) as f64) * self.dw + self.w_center
    }

    pub fn with_center(self, w_center: f64) -> Self {
        Self { w_center, ..self }
    }
}

/// Gate-delay grid; dtau must be an integer multiple of dt so delays are
/// exact sample rolls.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DelayGrid {
    n_tau: usize,
    dtau: f64,
    tau_min: f64,
}

impl DelayGrid {
    /// Delays symmetric about zero: tau_i = (i - n_tau/2) dtau.
    pub fn symmetric(n_tau: usize, dtau: f64) -> Result<Self> {
        if n_tau == 0 {
            return Err(Error::InvalidGrid("n_tau must be >= 1".into()));
        }
        if !(dtau > 0.0) || !dtau.is_finite() {
            return Err(Error::InvalidGrid(format!("dtau = {dtau} must be positive")));
        }
        Ok(Self {
            n_tau,
            dtau,
            tau_min: -((n_tau / 2) as f64) * dtau,
        })
    }

    pub fn new(n_tau: usize, dtau: f64, tau_min: f64) -> Result<Self> {
        if n_tau == 0 || !(dtau > 0.0) {
            return Err(Error::InvalidGrid("bad delay grid".into()));
        }
        Ok(Self { n_tau, dtau, tau_min })
    }

    pub fn n(&self) -> usize {
        self.n_tau
    }

    pub fn dtau(&self) -> f64 {
        self.dtau
    }

    pub fn tau_min(&self) -> f64 {
        self.tau_min
    }

    pub fn tau(&self, i: usize) -> f64 {
        self.tau_min + i as f64 * self.dtau
    }

    pub fn taus(&self) -> Vec<f64> {
        (0..self.n_tau).map(|i| self.tau(i)).collect()
    }

    /// Checks the dtau-multiple-of-dt invariant against a time grid.
    pub fn validate_against(&self, grid: &TimeGrid) -> Result<()> {
        for tau in [self.dtau, self.tau_min] {
            let ratio = tau / grid.dt();
            if (ratio - ratio.round()).abs() > 1e-9 {
                return Err(Error::NonCommensurateDelay { tau, dt: grid.dt() });
            }
        }
        Ok(())
    }

    /// Sample shift for delay index `i` on `grid`.
    pub fn shift_samples(&self, i: usize, grid: &TimeGrid) -> Result<i64> {
        commensurate_shift(self.tau(i), grid.dt())
    }
}

pub fn commensurate_shift(tau: f64, dt: f64) -> Result<i64> {
    let ratio = tau / dt;
    if (ratio - ratio.round()).abs() > 1e-9 {
        return Err(Error::NonCommensurateDelay { tau, dt });
    }
    Ok(ratio.round() as i64)
}

/// A delayed copy of a signal together with the energy fraction that wrapped
/// across the grid boundary.
#[derive(Debug, Clone)]
pub struct Shifted {
    pub samples: Vec<Complex64>,
    pub wrap_fraction: f64,
}

impl Shifted {
    /// True when the wrapped samples carried more than [`WRAP_ENERGY_TOL`]
    /// of the total energy; callers treat this as a diagnostic warning.
    pub fn wrap_violation(&self) -> bool {
        self.wrap_fraction > WRAP_ENERGY_TOL
    }
}

/// Circular sample roll realizing `s(t) -> s(t - tau)`; `tau` must be an
/// integer multiple of dt.
pub fn shift_by_delay(signal: &[Complex64], tau: f64, grid: &TimeGrid) -> Result<Shifted> {
    if signal.len() != grid.n() {
        return Err(Error::GridMismatch(format!(
            "signal length {} != n_t {}",
            signal.len(),
            grid.n()
        )));
    }
    let m = commensurate_shift(tau, grid.dt())?;
    let n = grid.n() as i64;
    let m = m.rem_euclid(n) as usize;
    let n = grid.n();
    let mut out = vec![Complex64::default(); n];
    for k in 0..n {
        out[k] = signal[(k + n - m) % n];
    }
    let total: f64 = signal.iter().map(|z| z.norm_sqr()).sum();
    // Samples landing in out[0..m] came from the far end of the input.
    let wrapped: f64 = (0..m).map(|k| out[k].norm_sqr()).sum();
    let wrap_fraction = if total > 0.0 { wrapped / total } else { 0.0 };
    Ok(Shifted {
        samples: out,
        wrap_fraction,
    })
}

/// Roll by a precomputed sample count (hot-path variant, no checks).
pub fn roll(signal: &[Complex64], m: i64) -> Vec<Complex64> {
    let n = signal.len();
    let m = m.rem_euclid(n as i64) as usize;
    let mut out = vec![Complex64::default(); n];
    for k in 0..n {
        out[k] = signal[(k + n - m) % n];
    }
    out
}

/// Planned unitary centered DFT for one grid size.
#[derive(Clone)]
pub struct Dft {
    n: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Dft {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Dft").field("n", &self.n).finish()
    }
}

impl Dft {
    pub fn new(grid: &TimeGrid) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            n: grid.n(),
            fwd: planner.plan_fft_forward(grid.n()),
            inv: planner.plan_fft_inverse(grid.n()),
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// `X_j = n^{-1/2} sum_k x_k exp(-i w_j t_k)`.
    pub fn forward(&self, signal: &[Complex64]) -> Result<Vec<Complex64>> {
        if signal.len() != self.n {
            return Err(Error::GridMismatch(format!(
                "signal length {} != n_t {}",
                signal.len(),
                self.n
            )));
        }
        let mut buf = signal.to_vec();
        self.forward_in_place(&mut buf);
        Ok(buf)
    }

    /// In-place forward transform; `buf.len()` must equal `n`.
    pub fn forward_in_place(&self, buf: &mut [Complex64]) {
        debug_assert_eq!(buf.len(), self.n);
        // Centered kernel: e^{-i w_j t_k} = e^{-2 pi i jk/n} (-1)^{j+k} for
        // n divisible by 4, absorbed as pre/post sign flips.
        for (k, z) in buf.iter_mut().enumerate() {
            if k % 2 == 1 {
                *z = -*z;
            }
        }
        self.fwd.process(buf);
        let scale = 1.0 / (self.n as f64).sqrt();
        for (j, z) in buf.iter_mut().enumerate() {
            *z *= if j % 2 == 1 { -scale } else { scale };
        }
    }

    /// Inverse of [`Dft::forward`].
    pub fn inverse(&self, spectrum: &[Complex64]) -> Result<Vec<Complex64>> {
        if spectrum.len() != self.n {
            return Err(Error::GridMismatch(format!(
                "spectrum length {} != n_t {}",
                spectrum.len(),
                self.n
            )));
        }
        let mut buf = spectrum.to_vec();
        self.inverse_in_place(&mut buf);
        Ok(buf)
    }

    pub fn inverse_in_place(&self, buf: &mut [Complex64]) {
        debug_assert_eq!(buf.len(), self.n);
        for (j, z) in buf.iter_mut().enumerate() {
            if j % 2 == 1 {
                *z = -*z;
            }
        }
        self.inv.process(buf);
        let scale = 1.0 / (self.n as f64).sqrt();
        for (k, z) in buf.iter_mut().enumerate() {
            *z *= if k % 2 == 1 { -scale } else { scale };
        }
    }
}

/// Grid metadata embedded in every spectrogram file header.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridMeta {
    pub n_t: usize,
    pub dt_fs: f64,
    pub n_tau: usize,
    pub dtau_fs: f64,
    pub tau_min_fs: f64,
    pub w_center_radfs: f64,
}

impl GridMeta {
    pub fn new(time: &TimeGrid, freq: &FreqGrid, delays: &DelayGrid) -> Self {
        Self {
            n_t: time.n(),
            dt_fs: time.dt(),
            n_tau: delays.n(),
            dtau_fs: delays.dtau(),
            tau_min_fs: delays.tau_min(),
            w_center_radfs: freq.w_center(),
        }
    }

    pub fn time_grid(&self) -> Result<TimeGrid> {
        TimeGrid::centered(self.n_t, self.dt_fs)
    }

    pub fn freq_grid(&self) -> Result<FreqGrid> {
        Ok(self.time_grid()?.freq_grid().with_center(self.w_center_radfs))
    }

    pub fn delay_grid(&self) -> Result<DelayGrid> {
        DelayGrid::new(self.n_tau, self.dtau_fs, self.tau_min_fs)
    }
}
