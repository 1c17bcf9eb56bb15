//! Gate (pump) pulse model and the per-time squeezing parameters it induces:
//! r(t) = |xi(t)|, theta(t) = arg xi(t), dphi(t) = theta(t)/2 - w_s t and
//! G(t) = exp(-i dphi(t) + r(t)).

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::TimeGrid;

/// Complex gate/pump envelope with nonlinear coupling kappa, so that the
/// per-time squeezing parameter is xi(t) = kappa * E_g(t).
#[derive(Debug, Clone, PartialEq)]
pub struct GatePulse {
    pub envelope: Vec<Complex64>,
    pub kappa: f64,
    pub w_s: f64,
}

impl GatePulse {
    pub fn new(envelope: Vec<Complex64>, kappa: f64, w_s: f64, grid: &TimeGrid) -> Result<Self> {
        if envelope.len() != grid.n() {
            return Err(Error::GridMismatch(format!(
                "gate length {} != n_t {}",
                envelope.len(),
                grid.n()
            )));
        }
        Ok(Self { envelope, kappa, w_s })
    }

    /// Peak gain profile value r_peak = max |kappa E_g|.
    pub fn peak_r(&self) -> f64 {
        self.envelope
            .iter()
            .map(|z| z.norm() * self.kappa)
            .fold(0.0, f64::max)
    }

    /// True in the paper's high-gain regime (peak r > 1).
    pub fn is_high_gain(&self) -> bool {
        self.peak_r() > 1.0
    }
}

/// Pointwise gate functions feeding the spectrogram formula.
#[derive(Debug, Clone, PartialEq)]
pub struct GateFunctions {
    /// Gain profile r(t) = |xi(t)| >= 0.
    pub r: Vec<f64>,
    /// Unwrapped pump phase theta(t) = arg xi(t).
    pub theta: Vec<f64>,
    /// dphi(t) = theta(t)/2 - w_s t.
    pub delta_phi: Vec<f64>,
    /// G(t) = exp(-i dphi(t) + r(t)).
    pub g: Vec<Complex64>,
    pub w_s: f64,
}

impl GateFunctions {
    pub fn n(&self) -> usize {
        self.g.len()
    }

    pub fn peak_r(&self) -> f64 {
        self.r.iter().copied().fold(0.0, f64::max)
    }
}

/// Gaussian gate with the given intensity FWHM, quadratic temporal phase
/// chirp, and kappa scaled so that the peak power amplification e^{2 r_peak}
/// equals 10^{peak_gain_db / 10}.
pub fn chirped_gaussian_gate(
    grid: &TimeGrid,
    fwhm: f64,
    chirp: f64,
    peak_gain_db: f64,
    w_s: f64,
) -> Result<GatePulse> {
    if !(fwhm > 2.0 * grid.dt()) {
        return Err(Error::InvalidConfig(format!(
            "gate fwhm {fwhm} fs not resolvable on dt = {} fs",
            grid.dt()
        )));
    }
    if !(peak_gain_db > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "peak_gain_db = {peak_gain_db} must be positive"
        )));
    }
    // Intensity |E|^2 has the given FWHM: |E| = exp(-t^2/(2 sigma^2)) with
    // sigma = fwhm / (2 sqrt(ln 2)).
    let sigma = fwhm / (2.0 * (2f64).ln().sqrt());
    let envelope: Vec<Complex64> = grid
        .times()
        .iter()
        .map(|&t| {
            let u = t / sigma;
            Complex64::from_polar((-0.5 * u * u).exp(), 0.5 * chirp * u * u)
        })
        .collect();
    // e^{2 r_peak} = 10^{db/10}  =>  r_peak = db ln(10) / 20.
    let kappa = peak_gain_db * std::f64::consts::LN_10 / 20.0;
    GatePulse::new(envelope, kappa, w_s, grid)
}

/// Computes r, theta, dphi and G from a gate pulse. theta is unwrapped along
/// t before halving so dphi carries no spurious pi-jumps.
pub fn gate_functions(gate: &GatePulse, grid: &TimeGrid) -> Result<GateFunctions> {
    if gate.envelope.len() != grid.n() {
        return Err(Error::GridMismatch("gate/grid length mismatch".into()));
    }
    let xi: Vec<Complex64> = gate.envelope.iter().map(|z| z * gate.kappa).collect();
    let r: Vec<f64> = xi.iter().map(|z| z.norm()).collect();
    let peak = r.iter().copied().fold(0.0, f64::max);
    let theta = unwrapped_phase(&xi, 1e-12 * peak.max(f64::MIN_POSITIVE));
    let delta_phi: Vec<f64> = theta
        .iter()
        .enumerate()
        .map(|(k, &th)| 0.5 * th - gate.w_s * grid.t(k))
        .collect();
    let g: Vec<Complex64> = r
        .iter()
        .zip(&delta_phi)
        .map(|(&rv, &dp)| Complex64::from_polar(rv.exp(), -dp))
        .collect();
    Ok(GateFunctions {
        r,
        theta,
        delta_phi,
        g,
        w_s: gate.w_s,
    })
}

/// Continuous phase along the samples; where |z| falls below `floor` the
/// previous phase is held (the phase of a vanishing envelope is undefined).
fn unwrapped_phase(z: &[Complex64], floor: f64) -> Vec<f64> {
    let mut out = vec![0.0; z.len()];
    // Anchor at the peak so the held tails inherit a meaningful phase.
    let k0 = z
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.norm().total_cmp(&b.1.norm()))
        .map(|(k, _)| k)
        .unwrap_or(0);
    out[k0] = z[k0].arg();
    let mut prev = out[k0];
    for k in (k0 + 1)..z.len() {
        if z[k].norm() > floor {
            prev += wrap_to_pi(z[k].arg() - prev);
        }
        out[k] = prev;
    }
    prev = out[k0];
    for k in (0..k0).rev() {
        if z[k].norm() > floor {
            prev += wrap_to_pi(z[k].arg() - prev);
        }
        out[k] = prev;
    }
    out
}

fn wrap_to_pi(x: f64) -> f64 {
    use std::f64::consts::PI;
    let mut y = (x + PI) % (2.0 * PI);
    if y < 0.0 {
        y += 2.0 * PI;
    }
    y - PI
}

/// Gate spec JSON (External Interfaces schema).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum GateConfig {
    ChirpedGaussian {
        fwhm_fs: f64,
        chirp: f64,
        peak_gain_db: f64,
    },
    Samples {
        re: Vec<f64>,
        im: Vec<f64>,
        kappa: f64,
    },
}

impl GateConfig {
    pub fn build(&self, grid: &TimeGrid, w_s: f64) -> Result<GatePulse> {
        match self {
            GateConfig::ChirpedGaussian {
                fwhm_fs,
                chirp,
                peak_gain_db,
            } => chirped_gaussian_gate(grid, *fwhm_fs, *chirp, *peak_gain_db, w_s),
            GateConfig::Samples { re, im, kappa } => {
                if re.len() != im.len() {
                    return Err(Error::InvalidConfig(
                        "gate samples: re and im lengths differ".into(),
                    ));
                }
                let env = re
                    .iter()
                    .zip(im)
                    .map(|(&r, &i)| Complex64::new(r, i))
                    .collect();
                GatePulse::new(env, *kappa, w_s, grid)
            }
        }
    }
}
