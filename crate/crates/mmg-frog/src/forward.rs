//! Forward measurement model: synthesizes the OPA-FROG spectrogram of a
//! multimode Gaussian state from its principal modes and second moments.
//!
//! Per mode n and delay tau the four term fields are
//!   A_x  = F{ G(t-tau) Im[psi_n(t) e^{i(dphi(t-tau) + w_s tau)}] }
//!   A_p  = F{ G(t-tau) Re[psi_n(t) e^{i(dphi(t-tau) + w_s tau)}] }
//!   A_c1 = F{ G(t-tau) e^{-i dphi(t-tau)} psi_n^*(t) }
//!   A_c2 = F{ G(t-tau) e^{+i dphi(t-tau)} psi_n(t) }
//! and the intensity is
//!   I = sum_n [ var_x |A_x|^2 + var_p |A_p|^2 + (|A_c1|^2 + |A_c2|^2)/8 ].
//!
//! All term fields carry a gate-dependent overall scale chosen so that the
//! infinite-complete-basis vacuum intensity equals the closed-form vacuum
//! level |integral G dt|^2 / 4; spectrograms are thereby expressed in
//! vacuum-referenced units and the two vacuum routes agree.

use ndarray::Array2;
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::gate::GateFunctions;
use crate::grid::{roll, DelayGrid, Dft, FreqGrid, TimeGrid};
use crate::states::{GaussianStateSpec, VACUUM_VARIANCE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpectrogramKind {
    Raw,
    Vacuum,
    VacuumSubtracted,
}

/// Real-valued intensity over (omega, tau).
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub values: Array2<f64>,
    pub freq_grid: FreqGrid,
    pub delay_grid: DelayGrid,
    pub kind: SpectrogramKind,
    /// Peak value divided out if the spectrogram was normalized; 1.0 otherwise.
    pub normalization: f64,
}

impl Spectrogram {
    pub fn n_w(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_tau(&self) -> usize {
        self.values.ncols()
    }

    pub fn peak(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn same_grids(&self, other: &Spectrogram) -> bool {
        self.freq_grid == other.freq_grid && self.delay_grid == other.delay_grid
    }

    /// Divides by the peak value and records it in `normalization`.
    pub fn peak_normalized(&self) -> Spectrogram {
        let peak = self.peak();
        let scale = if peak != 0.0 { peak } else { 1.0 };
        Spectrogram {
            values: &self.values / scale,
            normalization: self.normalization * scale,
            ..self.clone()
        }
    }
}

/// The four complex term fields of one mode, each (n_w, n_tau).
#[derive(Debug, Clone)]
pub struct ModeFields {
    pub x: Array2<Complex64>,
    pub p: Array2<Complex64>,
    pub c1: Array2<Complex64>,
    pub c2: Array2<Complex64>,
}

/// Term fields for every mode plus the grids they live on.
#[derive(Debug, Clone)]
pub struct TermFields {
    pub per_mode: Vec<ModeFields>,
    pub freq_grid: FreqGrid,
    pub delay_grid: DelayGrid,
}

impl TermFields {
    /// Weighted incoherent sum of the four terms (truncated mode sum).
    pub fn weighted_intensity(&self, var_x: &[f64], var_p: &[f64]) -> Array2<f64> {
        let mut out = Array2::zeros(self.per_mode[0].x.raw_dim());
        for (n, mf) in self.per_mode.iter().enumerate() {
            ndarray::Zip::from(&mut out)
                .and(&mf.x)
                .and(&mf.p)
                .and(&mf.c1)
                .and(&mf.c2)
                .for_each(|o, x, p, c1, c2| {
                    *o += var_x[n] * x.norm_sqr()
                        + var_p[n] * p.norm_sqr()
                        + 0.125 * (c1.norm_sqr() + c2.norm_sqr());
                });
        }
        out
    }
}

/// Per-delay gate arrays shared by synthesis and retrieval:
/// `gs[i] = G(t - tau_i)` and `phase[i] = exp(i (dphi(t - tau_i) + w_s tau_i))`.
#[derive(Debug, Clone)]
pub struct DelayKernels {
    pub gs: Vec<Vec<Complex64>>,
    pub phase: Vec<Vec<Complex64>>,
    /// exp(i w_s tau_i) per delay.
    pub osc: Vec<Complex64>,
    /// sqrt of the vacuum-referencing scale applied to every term field.
    pub sqrt_scale: f64,
    pub n_t: usize,
}

impl DelayKernels {
    pub fn new(fns: &GateFunctions, time: &TimeGrid, delays: &DelayGrid) -> Result<Self> {
        if fns.n() != time.n() {
            return Err(Error::GridMismatch("gate/grid length mismatch".into()));
        }
        delays.validate_against(time)?;
        let n = time.n();
        let mut gs = Vec::with_capacity(delays.n());
        let mut phase = Vec::with_capacity(delays.n());
        let mut osc = Vec::with_capacity(delays.n());
        let dphi_c: Vec<Complex64> = fns
            .delta_phi
            .iter()
            .map(|&d| Complex64::new(d, 0.0))
            .collect();
        for i in 0..delays.n() {
            let m = delays.shift_samples(i, time)?;
            gs.push(roll(&fns.g, m));
            let dphis = roll(&dphi_c, m);
            let wtau = fns.w_s * delays.tau(i);
            phase.push(
                dphis
                    .iter()
                    .map(|d| Complex64::from_polar(1.0, d.re + wtau))
                    .collect(),
            );
            osc.push(Complex64::from_polar(1.0, wtau));
        }
        Ok(Self {
            gs,
            phase,
            osc,
            sqrt_scale: model_scale(fns, time).sqrt(),
            n_t: n,
        })
    }
}

/// Closed-form vacuum level `|sum G dt|^2 / 4`.
pub fn vacuum_level_closed(fns: &GateFunctions, time: &TimeGrid) -> f64 {
    let integral: Complex64 = fns.g.iter().sum::<Complex64>() * time.dt();
    integral.norm_sqr() / 4.0
}

/// Complete-basis vacuum level in raw (unit-scale) field units:
/// `sum_k e^{2 r_k} / (2 n dt)`.
pub fn vacuum_level_complete_unscaled(fns: &GateFunctions, time: &TimeGrid) -> f64 {
    let s: f64 = fns.r.iter().map(|&r| (2.0 * r).exp()).sum();
    s / (2.0 * time.n() as f64 * time.dt())
}

/// Intensity scale applied to the model so the complete-basis vacuum sum
/// equals the closed-form vacuum level.
pub fn model_scale(fns: &GateFunctions, time: &TimeGrid) -> f64 {
    vacuum_level_closed(fns, time) / vacuum_level_complete_unscaled(fns, time)
}

/// Computes the x/p integrands for one (mode, delay) pair into `bx`/`bp`.
#[inline]
pub(crate) fn xp_integrands(
    psi: &[Complex64],
    gs: &[Complex64],
    phase: &[Complex64],
    bx: &mut [Complex64],
    bp: &mut [Complex64],
) {
    for k in 0..psi.len() {
        let z = psi[k] * phase[k];
        bx[k] = gs[k] * z.im;
        bp[k] = gs[k] * z.re;
    }
}

/// Synthesizes all four term fields for every mode of `state`.
pub fn synthesize_term_fields(
    state: &GaussianStateSpec,
    fns: &GateFunctions,
    time: &TimeGrid,
    delays: &DelayGrid,
) -> Result<TermFields> {
    for mode in state.basis.modes() {
        if mode.samples().len() != time.n() {
            return Err(Error::GridMismatch("state/grid length mismatch".into()));
        }
    }
    let kernels = DelayKernels::new(fns, time, delays)?;
    let dft = Dft::new(time);
    let n = time.n();
    let n_tau = delays.n();
    let scale = kernels.sqrt_scale;

    let mut per_mode = Vec::with_capacity(state.n_modes());
    let mut bx = vec![Complex64::default(); n];
    let mut bp = vec![Complex64::default(); n];
    for mode in state.basis.modes() {
        let psi = mode.samples();
        let mut fx = Array2::zeros((n, n_tau));
        let mut fp = Array2::zeros((n, n_tau));
        let mut fc1 = Array2::zeros((n, n_tau));
        let mut fc2 = Array2::zeros((n, n_tau));
        for i in 0..n_tau {
            let gs = &kernels.gs[i];
            let phase = &kernels.phase[i];
            let osc = kernels.osc[i];
            xp_integrands(psi, gs, phase, &mut bx, &mut bp);
            dft.forward_in_place(&mut bx);
            dft.forward_in_place(&mut bp);
            for j in 0..n {
                fx[(j, i)] = bx[j] * scale;
                fp[(j, i)] = bp[j] * scale;
            }
            // c1: G e^{-i dphi} psi^* ; e^{-i dphi(t-tau)} = conj(phase) e^{i w_s tau}
            for k in 0..n {
                bx[k] = gs[k] * phase[k].conj() * osc * psi[k].conj();
                bp[k] = gs[k] * phase[k] * osc.conj() * psi[k];
            }
            dft.forward_in_place(&mut bx);
            dft.forward_in_place(&mut bp);
            for j in 0..n {
                fc1[(j, i)] = bx[j] * scale;
                fc2[(j, i)] = bp[j] * scale;
            }
        }
        per_mode.push(ModeFields {
            x: fx,
            p: fp,
            c1: fc1,
            c2: fc2,
        });
    }
    Ok(TermFields {
        per_mode,
        freq_grid: time.freq_grid(),
        delay_grid: *delays,
    })
}

/// Constant vacuum spectrogram `|integral G dt|^2 / 4`.
pub fn vacuum_spectrogram(
    fns: &GateFunctions,
    time: &TimeGrid,
    delays: &DelayGrid,
) -> Result<Spectrogram> {
    delays.validate_against(time)?;
    let value = vacuum_level_closed(fns, time);
    Ok(Spectrogram {
        values: Array2::from_elem((time.n(), delays.n()), value),
        freq_grid: time.freq_grid(),
        delay_grid: *delays,
        kind: SpectrogramKind::Vacuum,
        normalization: 1.0,
    })
}

/// Synthesizes the raw spectrogram of `state`.
///
/// With `include_vacuum_complement` the contribution of all unoccupied
/// orthogonal modes is added via the truncation identity
/// `I = I_vac + sum_n [ (var_x - 1/4) |A_x|^2 + (var_p - 1/4) |A_p|^2 ]`,
/// so the output equals what an infinite complete basis would give.
pub fn synthesize_spectrogram(
    state: &GaussianStateSpec,
    fns: &GateFunctions,
    time: &TimeGrid,
    delays: &DelayGrid,
    include_vacuum_complement: bool,
) -> Result<Spectrogram> {
    state.check_span(time)?;
    let fields = synthesize_term_fields(state, fns, time, delays)?;
    let values = if include_vacuum_complement {
        let vac = vacuum_level_closed(fns, time);
        let mut out = Array2::from_elem((time.n(), delays.n()), vac);
        for (n, mf) in fields.per_mode.iter().enumerate() {
            let dx = state.var_x[n] - VACUUM_VARIANCE;
            let dp = state.var_p[n] - VACUUM_VARIANCE;
            ndarray::Zip::from(&mut out)
                .and(&mf.x)
                .and(&mf.p)
                .for_each(|o, x, p| {
                    *o += dx * x.norm_sqr() + dp * p.norm_sqr();
                });
        }
        out
    } else {
        fields.weighted_intensity(&state.var_x, &state.var_p)
    };
    Ok(Spectrogram {
        values,
        freq_grid: fields.freq_grid,
        delay_grid: fields.delay_grid,
        kind: SpectrogramKind::Raw,
        normalization: 1.0,
    })
}

/// Pointwise `raw - vac`; negative values indicate squeezing.
pub fn vacuum_subtract(raw: &Spectrogram, vac: &Spectrogram) -> Result<Spectrogram> {
    if raw.kind != SpectrogramKind::Raw {
        return Err(Error::Data("vacuum_subtract: first input must be raw".into()));
    }
    if vac.kind != SpectrogramKind::Vacuum {
        return Err(Error::Data(
            "vacuum_subtract: second input must be a vacuum spectrogram".into(),
        ));
    }
    if !raw.same_grids(vac) {
        return Err(Error::GridMismatch(
            "vacuum_subtract: spectrogram grids differ".into(),
        ));
    }
    Ok(Spectrogram {
        values: &raw.values - &vac.values,
        freq_grid: raw.freq_grid,
        delay_grid: raw.delay_grid,
        kind: SpectrogramKind::VacuumSubtracted,
        normalization: 1.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gate::{chirped_gaussian_gate, gate_functions, GatePulse};
    use crate::states::{hermite_gaussian_mode, ModeBasis};
    use approx::assert_relative_eq;

    fn small_setup() -> (TimeGrid, DelayGrid) {
        let time = TimeGrid::centered(128, 4.0).unwrap();
        let delays = DelayGrid::symmetric(16, 16.0).unwrap();
        (time, delays)
    }

    fn test_state(time: &TimeGrid, n_modes: usize, dbs: &[f64]) -> GaussianStateSpec {
        let modes: Vec<_> = (0..n_modes)
            .map(|n| hermite_gaussian_mode(time, n, 25.0, 1.0, n).unwrap())
            .collect();
        let basis = ModeBasis::new(modes, time).unwrap();
        let var_x: Vec<f64> = dbs
            .iter()
            .map(|&d| crate::states::squeezing_db_to_variance(d))
            .collect();
        let var_p: Vec<f64> = dbs
            .iter()
            .map(|&d| crate::states::squeezing_db_to_variance(-d))
            .collect();
        GaussianStateSpec::new(basis, var_x, var_p, vec![0.0; n_modes], 0.0).unwrap()
    }

    fn test_gate(time: &TimeGrid) -> GateFunctions {
        let gate = chirped_gaussian_gate(time, 100.0, 0.5, 50.0, 0.0).unwrap();
        gate_functions(&gate, time).unwrap()
    }

    #[test]
    fn box_gate_closed_form() {
        let time = TimeGrid::centered(128, 1.0).unwrap();
        let r0 = 2.0;
        // G real constant e^r over the middle T samples, ~0 elsewhere is not
        // expressible with |G| = e^r >= 1; use r = r0 everywhere instead.
        let env = vec![Complex64::new(1.0, 0.0); 128];
        let gate = GatePulse::new(env, r0, 0.0, &time).unwrap();
        let fns = gate_functions(&gate, &time).unwrap();
        let t_total = 128.0;
        let delays = DelayGrid::symmetric(4, 2.0).unwrap();
        let vac = vacuum_spectrogram(&fns, &time, &delays).unwrap();
        let expect = (t_total * r0.exp()).powi(2) / 4.0;
        assert_relative_eq!(vac.values[(0, 0)], expect, max_relative = 1e-12);
        assert_eq!(vac.kind, SpectrogramKind::Vacuum);
    }

    #[test]
    fn oscillating_phase_vacuum_is_tiny() {
        let time = TimeGrid::centered(256, 1.0).unwrap();
        // r = 0, delta_phi a fast linear phase: take w_s large, flat envelope
        let env = vec![Complex64::new(1.0, 0.0); 256];
        let gate = GatePulse::new(env, 1e-300, 1.5, &time).unwrap();
        let fns = gate_functions(&gate, &time).unwrap();
        let delays = DelayGrid::symmetric(4, 2.0).unwrap();
        let vac = vacuum_spectrogram(&fns, &time, &delays).unwrap();
        // |sum e^{i w_s t} dt|^2/4 for w_s = 1.5 rad/fs over 256 fs ~ 0
        let scale = (256.0f64 * 1.0).powi(2) / 4.0;
        assert!(vac.values[(0, 0)] < 1e-3 * scale);
    }

    #[test]
    fn vacuum_state_reproduces_vacuum_spectrogram() {
        let (time, delays) = small_setup();
        let fns = test_gate(&time);
        let modes: Vec<_> = (0..3)
            .map(|n| hermite_gaussian_mode(&time, n, 25.0, 1.0, n).unwrap())
            .collect();
        let basis = ModeBasis::new(modes, &time).unwrap();
        let state = GaussianStateSpec::vacuum(basis, 0.0).unwrap();
        let raw = synthesize_spectrogram(&state, &fns, &time, &delays, true).unwrap();
        let vac = vacuum_spectrogram(&fns, &time, &delays).unwrap();
        for (a, b) in raw.values.iter().zip(vac.values.iter()) {
            assert_relative_eq!(a, b, max_relative = 1e-9);
        }
    }

    #[test]
    fn unit_modulus_gate_makes_c2_delay_invariant() {
        let (time, delays) = small_setup();
        // r == 0, theta == 0 gate: G(t) = e^{i w_s t} (dphi = -w_s t)
        let env = vec![Complex64::new(1.0, 0.0); time.n()];
        let gate = GatePulse::new(env, 1e-300, 0.12, &time).unwrap();
        let fns = gate_functions(&gate, &time).unwrap();
        let state = test_state(&time, 1, &[3.0]);
        let state = GaussianStateSpec::new(
            state.basis.clone(),
            state.var_x.clone(),
            state.var_p.clone(),
            vec![0.0],
            0.12,
        )
        .unwrap();
        let fields = synthesize_term_fields(&state, &fns, &time, &delays).unwrap();
        let c2 = &fields.per_mode[0].c2;
        for i in 1..delays.n() {
            for j in 0..time.n() {
                assert_relative_eq!(
                    c2[(j, i)].norm(),
                    c2[(j, 0)].norm(),
                    max_relative = 1e-10,
                    epsilon = 1e-12 * c2[(j, 0)].norm().max(1.0)
                );
            }
        }
    }

    #[test]
    fn real_mode_zero_phase_kills_x_term() {
        let time = TimeGrid::centered(128, 4.0).unwrap();
        // single delay tau = 0, real gate (theta = 0), w_s = 0: Phi == 0
        let delays = DelayGrid::new(1, 4.0, 0.0).unwrap();
        let env: Vec<Complex64> = time
            .times()
            .iter()
            .map(|&t| Complex64::new((-t * t / 3200.0).exp(), 0.0))
            .collect();
        let gate = GatePulse::new(env, 3.0, 0.0, &time).unwrap();
        let fns = gate_functions(&gate, &time).unwrap();
        let state = test_state(&time, 1, &[3.0]); // chirp 1.0 -> complex mode
        // rebuild with chirp 0 so the mode is real
        let mode = hermite_gaussian_mode(&time, 0, 25.0, 0.0, 0).unwrap();
        let basis = ModeBasis::new(vec![mode], &time).unwrap();
        let state = GaussianStateSpec::new(
            basis,
            state.var_x.clone(),
            state.var_p.clone(),
            vec![0.0],
            0.0,
        )
        .unwrap();
        let fields = synthesize_term_fields(&state, &fns, &time, &delays).unwrap();
        let peak_p = fields.per_mode[0]
            .p
            .iter()
            .map(|z| z.norm())
            .fold(0.0, f64::max);
        for z in fields.per_mode[0].x.iter() {
            assert!(z.norm() < 1e-12 * peak_p);
        }
    }

    #[test]
    fn variance_linearity() {
        let (time, delays) = small_setup();
        let fns = test_gate(&time);
        let state = test_state(&time, 2, &[3.0, 2.0]);
        let fields = synthesize_term_fields(&state, &fns, &time, &delays).unwrap();
        let i0 = fields.weighted_intensity(&state.var_x, &state.var_p);
        let mut vx2 = state.var_x.clone();
        vx2[0] *= 2.0;
        let i1 = fields.weighted_intensity(&vx2, &state.var_p);
        let diff = &i1 - &i0;
        let expect = fields.per_mode[0].x.mapv(|z| z.norm_sqr() * state.var_x[0]);
        for (a, b) in diff.iter().zip(expect.iter()) {
            assert_relative_eq!(a, b, max_relative = 1e-10, epsilon = 1e-12);
        }
    }

    #[test]
    fn gate_global_phase_rotates_quadrature_frame() {
        // A global gate phase phi0 shifts delta-phi by phi0/2, which rotates
        // the quadrature reference; counter-rotating the modes by phi0/2
        // restores the identical spectrogram.
        let (time, delays) = small_setup();
        let gate = chirped_gaussian_gate(&time, 100.0, 0.5, 40.0, 0.0).unwrap();
        let fns = gate_functions(&gate, &time).unwrap();
        let phi0 = 0.77;
        let rot = Complex64::from_polar(1.0, phi0);
        let gate2 = GatePulse::new(
            gate.envelope.iter().map(|z| z * rot).collect(),
            gate.kappa,
            gate.w_s,
            &time,
        )
        .unwrap();
        let fns2 = gate_functions(&gate2, &time).unwrap();
        let state = test_state(&time, 2, &[3.0, 2.0]);
        let counter = GaussianStateSpec {
            basis: crate::states::ModeBasis::new_unchecked(
                state
                    .basis
                    .modes()
                    .iter()
                    .map(|m| m.rotated(-phi0 / 2.0))
                    .collect(),
            ),
            var_x: state.var_x.clone(),
            var_p: state.var_p.clone(),
            angle: state.angle.clone(),
            w_s: state.w_s,
        };
        let s1 = synthesize_spectrogram(&state, &fns, &time, &delays, true).unwrap();
        let s2 = synthesize_spectrogram(&counter, &fns2, &time, &delays, true).unwrap();
        let peak = s1.peak();
        for (a, b) in s1.values.iter().zip(s2.values.iter()) {
            assert!((a - b).abs() <= 1e-9 * peak);
        }
    }

    #[test]
    fn pi_rotation_leaves_spectrogram_invariant() {
        let (time, delays) = small_setup();
        let fns = test_gate(&time);
        let state = test_state(&time, 2, &[3.0, 2.0]);
        let mut rotated = state.clone();
        rotated.angle[0] = std::f64::consts::PI;
        let rotated = crate::states::apply_squeezing_angle(&rotated);
        let s1 = synthesize_spectrogram(&state, &fns, &time, &delays, true).unwrap();
        let s2 = synthesize_spectrogram(&rotated, &fns, &time, &delays, true).unwrap();
        let peak = s1.peak();
        for (a, b) in s1.values.iter().zip(s2.values.iter()) {
            assert!((a - b).abs() <= 1e-10 * peak);
        }
    }

    #[test]
    fn half_pi_rotation_swaps_variances() {
        let (time, delays) = small_setup();
        let fns = test_gate(&time);
        let state = test_state(&time, 2, &[3.0, 2.0]);
        // rotate mode 0 by pi/2 and swap its variances: spectrogram invariant
        let mut rotated = state.clone();
        rotated.angle[0] = std::f64::consts::FRAC_PI_2;
        let mut rotated = crate::states::apply_squeezing_angle(&rotated);
        rotated.var_x.swap(0, 0);
        let (vx, vp) = (rotated.var_x[0], rotated.var_p[0]);
        rotated.var_x[0] = vp;
        rotated.var_p[0] = vx;
        let s1 = synthesize_spectrogram(&state, &fns, &time, &delays, true).unwrap();
        let s2 = synthesize_spectrogram(&rotated, &fns, &time, &delays, true).unwrap();
        let peak = s1.peak();
        for (a, b) in s1.values.iter().zip(s2.values.iter()) {
            assert!((a - b).abs() <= 1e-10 * peak);
        }
    }

    #[test]
    fn squeezed_state_has_negative_vacuum_subtracted_minimum() {
        let (time, delays) = small_setup();
        let fns = test_gate(&time);
        let state = test_state(&time, 3, &[3.0, 4.0, 2.0]);
        let raw = synthesize_spectrogram(&state, &fns, &time, &delays, true).unwrap();
        let vac = vacuum_spectrogram(&fns, &time, &delays).unwrap();
        let sub = vacuum_subtract(&raw, &vac).unwrap();
        assert!(sub.min() < 0.0);
        assert_eq!(sub.kind, SpectrogramKind::VacuumSubtracted);
        // raw never goes negative
        assert!(raw.min() >= 0.0);
    }

    #[test]
    fn anti_squeezed_only_is_nonnegative() {
        let (time, delays) = small_setup();
        let fns = test_gate(&time);
        let modes: Vec<_> = (0..2)
            .map(|n| hermite_gaussian_mode(&time, n, 25.0, 1.0, n).unwrap())
            .collect();
        let basis = ModeBasis::new(modes, &time).unwrap();
        let state =
            GaussianStateSpec::new(basis, vec![1.0, 1.0], vec![1.0, 1.0], vec![0.0, 0.0], 0.0)
                .unwrap();
        let raw = synthesize_spectrogram(&state, &fns, &time, &delays, true).unwrap();
        let vac = vacuum_spectrogram(&fns, &time, &delays).unwrap();
        let sub = vacuum_subtract(&raw, &vac).unwrap();
        assert!(sub.min() >= -1e-9 * sub.peak().abs().max(1.0));
    }

    #[test]
    fn vacuum_subtract_identity_and_errors() {
        let (time, delays) = small_setup();
        let fns = test_gate(&time);
        let vac = vacuum_spectrogram(&fns, &time, &delays).unwrap();
        let mut raw = vac.clone();
        raw.kind = SpectrogramKind::Raw;
        let sub = vacuum_subtract(&raw, &vac).unwrap();
        assert!(sub.values.iter().all(|&v| v == 0.0));
        assert!(vacuum_subtract(&vac, &vac).is_err());
    }

    #[test]
    fn peak_normalization_records_scale() {
        let (time, delays) = small_setup();
        let fns = test_gate(&time);
        let state = test_state(&time, 2, &[3.0, 2.0]);
        let raw = synthesize_spectrogram(&state, &fns, &time, &delays, true).unwrap();
        let norm = raw.peak_normalized();
        assert_relative_eq!(norm.peak(), 1.0, max_relative = 1e-12);
        assert_relative_eq!(norm.normalization, raw.peak(), max_relative = 1e-12);
    }
}
