//! Multimode Gaussian input states: principal temporal modes, quadrature
//! variances and squeezing angles.
//!
//! Quadrature convention is x = (a + a^dag)/2, so the vacuum variance is 1/4
//! and "s dB of squeezing" means var = (1/4) 10^(-s/10).

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::TimeGrid;

/// Vacuum quadrature variance under x = (a + a^dag)/2.
pub const VACUUM_VARIANCE: f64 = 0.25;

pub const NORM_TOL: f64 = 1e-10;
pub const ORTHO_TOL: f64 = 1e-8;

/// One principal temporal mode: a unit-norm complex envelope on the shared
/// time grid (norm measured with the dt weight).
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalMode {
    samples: Vec<Complex64>,
    label: usize,
}

impl TemporalMode {
    /// Wraps samples that are already unit-norm on `grid`.
    pub fn new(samples: Vec<Complex64>, label: usize, grid: &TimeGrid) -> Result<Self> {
        if samples.len() != grid.n() {
            return Err(Error::GridMismatch(format!(
                "mode length {} != n_t {}",
                samples.len(),
                grid.n()
            )));
        }
        let norm = norm_sq(&samples, grid.dt());
        if (norm - 1.0).abs() > NORM_TOL {
            return Err(Error::InvalidState(format!(
                "mode {label} norm^2 = {norm}, expected 1"
            )));
        }
        Ok(Self { samples, label })
    }

    /// Normalizes arbitrary samples to unit norm.
    pub fn from_samples_normalized(
        samples: Vec<Complex64>,
        label: usize,
        grid: &TimeGrid,
    ) -> Result<Self> {
        if samples.len() != grid.n() {
            return Err(Error::GridMismatch(format!(
                "mode length {} != n_t {}",
                samples.len(),
                grid.n()
            )));
        }
        let norm = norm_sq(&samples, grid.dt()).sqrt();
        if norm <= 0.0 || !norm.is_finite() {
            return Err(Error::InvalidState(format!("mode {label} has zero norm")));
        }
        let samples = samples.into_iter().map(|z| z / norm).collect();
        Ok(Self { samples, label })
    }

    pub fn samples(&self) -> &[Complex64] {
        &self.samples
    }

    pub fn label(&self) -> usize {
        self.label
    }

    /// `integral psi_self^*(t) psi_other(t) dt` on the grid.
    pub fn overlap(&self, other: &TemporalMode, dt: f64) -> Complex64 {
        inner(&self.samples, &other.samples, dt)
    }

    /// Multiplies the envelope by a global phase.
    pub fn rotated(&self, angle: f64) -> TemporalMode {
        let ph = Complex64::from_polar(1.0, angle);
        TemporalMode {
            samples: self.samples.iter().map(|z| z * ph).collect(),
            label: self.label,
        }
    }
}

pub fn norm_sq(samples: &[Complex64], dt: f64) -> f64 {
    samples.iter().map(|z| z.norm_sqr()).sum::<f64>() * dt
}

/// `sum conj(a) b dt`.
pub fn inner(a: &[Complex64], b: &[Complex64], dt: f64) -> Complex64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.conj() * y)
        .sum::<Complex64>()
        * dt
}

/// An ordered, pairwise-orthonormal set of temporal modes.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeBasis {
    modes: Vec<TemporalMode>,
}

impl ModeBasis {
    pub fn new(modes: Vec<TemporalMode>, grid: &TimeGrid) -> Result<Self> {
        let basis = Self { modes };
        let dev = basis.gram_deviation(grid.dt());
        if dev > ORTHO_TOL {
            return Err(Error::InvalidState(format!(
                "basis not orthonormal: max |Gram - I| = {dev:.3e}"
            )));
        }
        Ok(basis)
    }

    /// No orthonormality check; used for retrieval intermediates.
    pub fn new_unchecked(modes: Vec<TemporalMode>) -> Self {
        Self { modes }
    }

    pub fn modes(&self) -> &[TemporalMode] {
        &self.modes
    }

    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }

    /// Max-norm deviation of the Gram matrix from the identity.
    pub fn gram_deviation(&self, dt: f64) -> f64 {
        let mut dev: f64 = 0.0;
        for (m, a) in self.modes.iter().enumerate() {
            for (n, b) in self.modes.iter().enumerate() {
                let g = a.overlap(b, dt);
                let target = if m == n { 1.0 } else { 0.0 };
                dev = dev.max((g - target).norm());
            }
        }
        dev
    }
}

/// Multimode Gaussian state: orthonormal principal modes with per-mode
/// quadrature variances and squeezing angles.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStateSpec {
    pub basis: ModeBasis,
    pub var_x: Vec<f64>,
    pub var_p: Vec<f64>,
    pub angle: Vec<f64>,
    pub w_s: f64,
}

impl GaussianStateSpec {
    pub fn new(
        basis: ModeBasis,
        var_x: Vec<f64>,
        var_p: Vec<f64>,
        angle: Vec<f64>,
        w_s: f64,
    ) -> Result<Self> {
        let m = basis.len();
        if var_x.len() != m || var_p.len() != m || angle.len() != m {
            return Err(Error::InvalidState(format!(
                "expected {m} variances/angles, got {}/{}/{}",
                var_x.len(),
                var_p.len(),
                angle.len()
            )));
        }
        for n in 0..m {
            if !(var_x[n] > 0.0) || !(var_p[n] > 0.0) {
                return Err(Error::InvalidState(format!(
                    "mode {n}: variances must be positive (got {}, {})",
                    var_x[n], var_p[n]
                )));
            }
            if var_x[n] * var_p[n] < 1.0 / 16.0 - 1e-12 {
                return Err(Error::InvalidState(format!(
                    "mode {n}: var_x*var_p = {} violates the Heisenberg bound 1/16",
                    var_x[n] * var_p[n]
                )));
            }
        }
        Ok(Self {
            basis,
            var_x,
            var_p,
            angle,
            w_s,
        })
    }

    pub fn n_modes(&self) -> usize {
        self.basis.len()
    }

    /// All occupied modes at vacuum variance.
    pub fn vacuum(basis: ModeBasis, w_s: f64) -> Result<Self> {
        let m = basis.len();
        Self::new(
            basis,
            vec![VACUUM_VARIANCE; m],
            vec![VACUUM_VARIANCE; m],
            vec![0.0; m],
            w_s,
        )
    }

    /// Checks that the time grid span covers at least 6x the longest mode
    /// duration (RMS-based) used by the state.
    pub fn check_span(&self, grid: &TimeGrid) -> Result<()> {
        for mode in self.basis.modes() {
            let (mut p0, mut p1, mut p2) = (0.0, 0.0, 0.0);
            for (k, z) in mode.samples().iter().enumerate() {
                let t = grid.t(k);
                let m = z.norm_sqr();
                p0 += m;
                p1 += m * t;
                p2 += m * t * t;
            }
            let mean = p1 / p0;
            let rms = (p2 / p0 - mean * mean).max(0.0).sqrt();
            // "duration" taken as the RMS full width (2 sigma).
            let duration = 2.0 * rms;
            if grid.span() < 6.0 * duration {
                return Err(Error::InvalidState(format!(
                    "grid span {} fs < 6x mode duration {} fs (mode {})",
                    grid.span(),
                    duration,
                    mode.label()
                )));
            }
        }
        Ok(())
    }
}

/// Converts "dB of squeezing" to a quadrature variance.
/// Positive dB means noise reduction below vacuum.
pub fn squeezing_db_to_variance(db: f64) -> f64 {
    VACUUM_VARIANCE * 10f64.powf(-db / 10.0)
}

/// Inverse of [`squeezing_db_to_variance`].
pub fn variance_to_squeezing_db(var: f64) -> f64 {
    -10.0 * (var / VACUUM_VARIANCE).log10()
}

/// Chirped Hermite-Gaussian mode
/// `psi_n(t) ~ H_n(t/t0) exp(-t^2/(2 t0^2)) exp(i chirp t^2/(2 t0^2))`,
/// normalized on the grid.
pub fn hermite_gaussian_mode(
    grid: &TimeGrid,
    order: usize,
    t0: f64,
    chirp: f64,
    label: usize,
) -> Result<TemporalMode> {
    if order > 20 {
        return Err(Error::InvalidState(format!(
            "Hermite order {order} > 20 is numerically unstable"
        )));
    }
    if t0 <= 4.0 * grid.dt() {
        return Err(Error::UnderResolved {
            t0,
            min: 4.0 * grid.dt(),
        });
    }
    let samples: Vec<Complex64> = grid
        .times()
        .iter()
        .map(|&t| {
            let u = t / t0;
            let env = hermite(order, u) * (-0.5 * u * u).exp();
            Complex64::from_polar(1.0, 0.5 * chirp * u * u) * env
        })
        .collect();
    TemporalMode::from_samples_normalized(samples, label, grid)
}

/// Physicists' Hermite polynomial by recurrence.
fn hermite(order: usize, u: f64) -> f64 {
    match order {
        0 => 1.0,
        1 => 2.0 * u,
        _ => {
            let mut hm = 1.0;
            let mut h = 2.0 * u;
            for k in 1..order {
                let next = 2.0 * u * h - 2.0 * k as f64 * hm;
                hm = h;
                h = next;
            }
            h
        }
    }
}

/// Absorbs each squeezing angle into the mode envelope as a global phase and
/// resets the angle field to zero.
pub fn apply_squeezing_angle(state: &GaussianStateSpec) -> GaussianStateSpec {
    let modes = state
        .basis
        .modes()
        .iter()
        .zip(&state.angle)
        .map(|(mode, &a)| mode.rotated(a))
        .collect();
    GaussianStateSpec {
        basis: ModeBasis::new_unchecked(modes),
        var_x: state.var_x.clone(),
        var_p: state.var_p.clone(),
        angle: vec![0.0; state.angle.len()],
        w_s: state.w_s,
    }
}

/// JSON description of a state (External Interfaces schema).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StateConfig {
    pub w_s_radfs: f64,
    pub modes: Vec<ModeConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModeConfig {
    pub generator: GeneratorConfig,
    pub var_x: f64,
    pub var_p: f64,
    #[serde(default)]
    pub angle_rad: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum GeneratorConfig {
    HermiteGaussian { order: usize, t0_fs: f64, chirp: f64 },
    Samples { re: Vec<f64>, im: Vec<f64> },
}

impl StateConfig {
    /// Builds the state on `grid`, folding configured angles into the modes.
    pub fn build(&self, grid: &TimeGrid) -> Result<GaussianStateSpec> {
        let mut modes = Vec::with_capacity(self.modes.len());
        for (label, mc) in self.modes.iter().enumerate() {
            let mode = match &mc.generator {
                GeneratorConfig::HermiteGaussian { order, t0_fs, chirp } => {
                    hermite_gaussian_mode(grid, *order, *t0_fs, *chirp, label)?
                }
                GeneratorConfig::Samples { re, im } => {
                    if re.len() != im.len() {
                        return Err(Error::InvalidConfig(
                            "mode samples: re and im lengths differ".into(),
                        ));
                    }
                    let samples = re
                        .iter()
                        .zip(im)
                        .map(|(&r, &i)| Complex64::new(r, i))
                        .collect();
                    TemporalMode::from_samples_normalized(samples, label, grid)?
                }
            };
            modes.push(mode);
        }
        let basis = ModeBasis::new(modes, grid)?;
        let state = GaussianStateSpec::new(
            basis,
            self.modes.iter().map(|m| m.var_x).collect(),
            self.modes.iter().map(|m| m.var_p).collect(),
            self.modes.iter().map(|m| m.angle_rad).collect(),
            self.w_s_radfs,
        )?;
        Ok(apply_squeezing_angle(&state))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn grid() -> TimeGrid {
        TimeGrid::centered(1024, 0.5).unwrap()
    }

    #[test]
    fn gaussian_peak_matches_normalization_constant() {
        let g = grid();
        let t0 = 20.0;
        let mode = hermite_gaussian_mode(&g, 0, t0, 0.0, 0).unwrap();
        let peak = mode.samples()[g.n() / 2].norm();
        let expect = (std::f64::consts::PI * t0 * t0).powf(-0.25);
        assert_relative_eq!(peak, expect, max_relative = 1e-6);
    }

    #[test]
    fn odd_order_vanishes_at_zero() {
        let g = grid();
        let mode = hermite_gaussian_mode(&g, 1, 20.0, 0.0, 0).unwrap();
        assert!(mode.samples()[g.n() / 2].norm() < 1e-14);
    }

    #[test]
    fn hermite_orthogonality() {
        let g = grid();
        let m0 = hermite_gaussian_mode(&g, 0, 20.0, 0.7, 0).unwrap();
        let m2 = hermite_gaussian_mode(&g, 2, 20.0, 0.7, 2).unwrap();
        assert!(m0.overlap(&m2, g.dt()).norm() < 1e-10);
    }

    #[test]
    fn basis_gram_matrix_close_to_identity() {
        let g = grid();
        let modes: Vec<_> = (0..5)
            .map(|n| hermite_gaussian_mode(&g, n, 20.0, 1.0, n).unwrap())
            .collect();
        let basis = ModeBasis::new(modes, &g).unwrap();
        assert!(basis.gram_deviation(g.dt()) < 1e-8);
    }

    #[test]
    fn under_resolution_rejected() {
        let g = TimeGrid::centered(64, 8.0).unwrap();
        assert!(matches!(
            hermite_gaussian_mode(&g, 0, 20.0, 0.0, 0),
            Err(Error::UnderResolved { .. })
        ));
    }

    #[test]
    fn db_conversion_values() {
        assert_relative_eq!(squeezing_db_to_variance(0.0), 0.25);
        assert_relative_eq!(squeezing_db_to_variance(3.0103), 0.125, max_relative = 1e-4);
        assert_relative_eq!(
            squeezing_db_to_variance(4.0),
            0.25 * 10f64.powf(-0.4),
            max_relative = 1e-12
        );
        assert_relative_eq!(squeezing_db_to_variance(4.0), 0.09953, max_relative = 1e-4);
        assert_relative_eq!(variance_to_squeezing_db(0.125), 3.0103, max_relative = 1e-4);
    }

    #[test]
    fn pure_state_saturates_heisenberg() {
        for db in [-7.3, 0.0, 2.0, 13.5] {
            let prod = squeezing_db_to_variance(db) * squeezing_db_to_variance(-db);
            assert_relative_eq!(prod, 1.0 / 16.0, max_relative = 1e-12);
        }
    }

    #[test]
    fn heisenberg_violation_rejected() {
        let g = grid();
        let mode = hermite_gaussian_mode(&g, 0, 20.0, 0.0, 0).unwrap();
        let basis = ModeBasis::new(vec![mode], &g).unwrap();
        assert!(GaussianStateSpec::new(basis, vec![0.1], vec![0.1], vec![0.0], 0.0).is_err());
    }

    #[test]
    fn angle_absorption_resets_angles() {
        let g = grid();
        let modes: Vec<_> = (0..2)
            .map(|n| hermite_gaussian_mode(&g, n, 20.0, 0.0, n).unwrap())
            .collect();
        let basis = ModeBasis::new(modes, &g).unwrap();
        let state = GaussianStateSpec::new(
            basis,
            vec![0.125, 0.25],
            vec![0.5, 0.25],
            vec![std::f64::consts::FRAC_PI_2, 0.0],
            0.0,
        )
        .unwrap();
        let rotated = apply_squeezing_angle(&state);
        assert!(rotated.angle.iter().all(|&a| a == 0.0));
        assert!(rotated.basis.gram_deviation(g.dt()) < 1e-10);
        // angle = 0 for all modes leaves the state unchanged
        let again = apply_squeezing_angle(&rotated);
        assert_eq!(again, rotated);
        // pi/2 rotation: samples multiplied by i
        let z0 = state.basis.modes()[0].samples()[400];
        let z1 = rotated.basis.modes()[0].samples()[400];
        assert!((z1 - z0 * Complex64::new(0.0, 1.0)).norm() < 1e-14);
    }

    #[test]
    fn state_config_roundtrip() {
        let json = r#"{
            "w_s_radfs": 0.0,
            "modes": [
                {"generator": {"type": "hermite_gaussian", "order": 0, "t0_fs": 20.0, "chirp": 1.0},
                 "var_x": 0.125, "var_p": 0.5, "angle_rad": 0.0}
            ]
        }"#;
        let cfg: StateConfig = serde_json::from_str(json).unwrap();
        let state = cfg.build(&grid()).unwrap();
        assert_eq!(state.n_modes(), 1);
        assert_relative_eq!(state.var_x[0], 0.125);
    }
}
