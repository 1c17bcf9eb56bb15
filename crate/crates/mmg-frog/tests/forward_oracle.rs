//! Brute-force oracle for the forward model: every term field is rebuilt
//! with a naive O(n^2) sum of e^{-i w_j t_k} against explicitly delayed
//! gate samples, with no shared FFT or kernel code, and the resulting
//! spectrogram must match `synthesize_spectrogram` to near machine
//! precision.

use mmg_frog::*;
use num_complex::Complex64;

/// Naive centered unitary transform: X_j = n^{-1/2} sum_k x_k e^{-i w_j t_k}.
fn naive_dft(x: &[Complex64], times: &[f64], freqs: &[f64]) -> Vec<Complex64> {
    let n = x.len();
    let scale = 1.0 / (n as f64).sqrt();
    freqs
        .iter()
        .map(|&w| {
            let mut acc = Complex64::default();
            for (k, &t) in times.iter().enumerate() {
                acc += x[k] * Complex64::from_polar(1.0, -w * t);
            }
            acc * scale
        })
        .collect()
}

/// Delayed samples f(t - tau) as an exact circular shift of the grid samples.
fn delayed(samples: &[Complex64], tau: f64, dt: f64) -> Vec<Complex64> {
    let n = samples.len() as i64;
    let m = (tau / dt).round() as i64;
    (0..samples.len() as i64)
        .map(|k| samples[(((k - m) % n + n) % n) as usize])
        .collect()
}

#[test]
fn brute_force_spectrogram_matches_fft_synthesis() {
    let time = TimeGrid::centered(128, 4.0).unwrap();
    let delays = DelayGrid::symmetric(8, 12.0).unwrap();
    let gate = chirped_gaussian_gate(&time, 60.0, 0.4, 30.0, 0.02).unwrap();
    let fns = gate_functions(&gate, &time).unwrap();

    let modes: Vec<_> = (0..2)
        .map(|n| hermite_gaussian_mode(&time, n, 20.0, 0.8, n).unwrap())
        .collect();
    let basis = ModeBasis::new(modes, &time).unwrap();
    let var_x = vec![
        squeezing_db_to_variance(3.0),
        squeezing_db_to_variance(1.5),
    ];
    let var_p = vec![
        squeezing_db_to_variance(-3.0),
        squeezing_db_to_variance(-1.5),
    ];
    let state =
        GaussianStateSpec::new(basis, var_x.clone(), var_p.clone(), vec![0.0; 2], fns.w_s)
            .unwrap();

    let fast = synthesize_spectrogram(&state, &fns, &time, &delays, false).unwrap();

    let times = time.times();
    let fg = time.freq_grid();
    let freqs: Vec<f64> = (0..fg.n()).map(|j| fg.w(j)).collect();
    let dt = time.dt();
    let lambda = model_scale(&fns, &time);
    let mut naive = ndarray::Array2::<f64>::zeros((time.n(), delays.n()));
    for i in 0..delays.n() {
        let tau = delays.tau(i);
        let gs = delayed(&fns.g, tau, dt);
        let dphi: Vec<f64> = {
            let d: Vec<Complex64> = fns
                .delta_phi
                .iter()
                .map(|&v| Complex64::new(v, 0.0))
                .collect();
            delayed(&d, tau, dt).iter().map(|z| z.re).collect()
        };
        for (n_mode, mode) in state.basis.modes().iter().enumerate() {
            let psi = mode.samples();
            let mut bx = vec![Complex64::default(); time.n()];
            let mut bp = vec![Complex64::default(); time.n()];
            let mut b1 = vec![Complex64::default(); time.n()];
            let mut b2 = vec![Complex64::default(); time.n()];
            for k in 0..time.n() {
                let phase = Complex64::from_polar(1.0, dphi[k] + fns.w_s * tau);
                let z = psi[k] * phase;
                bx[k] = gs[k] * z.im;
                bp[k] = gs[k] * z.re;
                let e = Complex64::from_polar(1.0, dphi[k]);
                b1[k] = gs[k] * e.conj() * psi[k].conj();
                b2[k] = gs[k] * e * psi[k];
            }
            let ax = naive_dft(&bx, &times, &freqs);
            let ap = naive_dft(&bp, &times, &freqs);
            let a1 = naive_dft(&b1, &times, &freqs);
            let a2 = naive_dft(&b2, &times, &freqs);
            for j in 0..time.n() {
                naive[(j, i)] += lambda
                    * (var_x[n_mode] * ax[j].norm_sqr()
                        + var_p[n_mode] * ap[j].norm_sqr()
                        + 0.125 * (a1[j].norm_sqr() + a2[j].norm_sqr()));
            }
        }
    }

    let peak = fast.peak();
    assert!(peak > 0.0);
    let mut worst = 0.0f64;
    for (a, b) in fast.values.iter().zip(naive.iter()) {
        worst = worst.max((a - b).abs());
    }
    eprintln!("worst absolute deviation: {:.3e} (peak {:.3e})", worst, peak);
    assert!(worst <= 1e-12 * peak, "worst = {worst:.3e}, peak = {peak:.3e}");
}
