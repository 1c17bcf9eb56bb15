//! Measurement-noise injection, spectrogram masking and pixel-bootstrap
//! uncertainty estimation.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::forward::Spectrogram;
use crate::gate::GateFunctions;
use crate::grid::TimeGrid;
use crate::retrieval::{
    match_modes, retrieve, MaskSpec, RetrievalConfig, RetrievalResult,
};
use crate::states::ModeBasis;

/// How the signal level entering the SNR definition is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NoiseDefinition {
    /// sigma = rms(values) / 10^(snr_db/20)
    #[default]
    Rms,
    /// sigma = max(values) / 10^(snr_db/20)
    Peak,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub snr_db: f64,
    pub seed: u64,
    #[serde(default)]
    pub definition: NoiseDefinition,
}

/// Adds white Gaussian noise at the requested signal-to-noise ratio.
/// Deterministic in the seed; the spectrogram kind is preserved.
pub fn add_noise(spectrogram: &Spectrogram, spec: &NoiseSpec) -> Result<Spectrogram> {
    if !spec.snr_db.is_finite() {
        return Err(Error::InvalidConfig("snr_db must be finite".into()));
    }
    let level = match spec.definition {
        NoiseDefinition::Rms => {
            (spectrogram.values.iter().map(|v| v * v).sum::<f64>()
                / spectrogram.values.len() as f64)
                .sqrt()
        }
        NoiseDefinition::Peak => spectrogram.values.iter().copied().fold(0.0, f64::max),
    };
    if level <= 0.0 {
        return Err(Error::Data("add_noise: spectrogram has no signal".into()));
    }
    let sigma = level / 10f64.powf(spec.snr_db / 20.0);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let normal = StandardNormal;
    let mut out = spectrogram.clone();
    // deterministic order: ndarray iterates row-major
    for v in out.values.iter_mut() {
        let n: f64 = normal.sample(&mut rng);
        *v += sigma * n;
    }
    Ok(out)
}

/// Builds a support mask: pixels whose 3x3 moving-average magnitude reaches
/// `threshold` times the smoothed maximum, dilated by two pixels.
pub fn build_mask(spectrogram: &Spectrogram, threshold: f64) -> Result<Array2<bool>> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidConfig(
            "mask threshold must lie in (0, 1)".into(),
        ));
    }
    let (nr, nc) = spectrogram.values.dim();
    let mut smooth = Array2::<f64>::zeros((nr, nc));
    for r in 0..nr {
        for c in 0..nc {
            let mut acc = 0.0;
            let mut cnt = 0.0;
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    let (rr, cc) = (r as i64 + dr, c as i64 + dc);
                    if rr >= 0 && rr < nr as i64 && cc >= 0 && cc < nc as i64 {
                        acc += spectrogram.values[(rr as usize, cc as usize)].abs();
                        cnt += 1.0;
                    }
                }
            }
            smooth[(r, c)] = acc / cnt;
        }
    }
    let peak = smooth.iter().copied().fold(0.0, f64::max);
    if peak <= 0.0 {
        return Err(Error::EmptyMask);
    }
    let core = smooth.mapv(|v| v >= threshold * peak);
    // dilate by 2 pixels (Chebyshev distance)
    let mut mask = Array2::from_elem((nr, nc), false);
    for r in 0..nr {
        for c in 0..nc {
            if core[(r, c)] {
                for dr in -2i64..=2 {
                    for dc in -2i64..=2 {
                        let (rr, cc) = (r as i64 + dr, c as i64 + dc);
                        if rr >= 0 && rr < nr as i64 && cc >= 0 && cc < nc as i64 {
                            mask[(rr as usize, cc as usize)] = true;
                        }
                    }
                }
            }
        }
    }
    if !mask.iter().any(|&b| b) {
        return Err(Error::EmptyMask);
    }
    Ok(mask)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapSpec {
    pub n_replicas: usize,
    pub seed: u64,
    /// Fraction of masked pixels drawn (with replacement) per replica.
    pub resample_fraction: f64,
}

impl BootstrapSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_replicas < 2 {
            return Err(Error::InvalidConfig("n_replicas must be >= 2".into()));
        }
        if !(self.resample_fraction > 0.0 && self.resample_fraction <= 1.0) {
            return Err(Error::InvalidConfig(
                "resample_fraction must lie in (0, 1]".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplicaSummary {
    pub final_loss: f64,
    pub converged: bool,
    pub var_x: Vec<f64>,
    pub var_p: Vec<f64>,
    pub angles: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct BootstrapResult {
    pub replicas: Vec<ReplicaSummary>,
    pub var_x_mean: Vec<f64>,
    pub var_x_std: Vec<f64>,
    pub var_p_mean: Vec<f64>,
    pub var_p_std: Vec<f64>,
    /// Per-mode |psi(t)|^2 envelope mean over replicas.
    pub envelope_mean: Vec<Vec<f64>>,
    pub envelope_std: Vec<Vec<f64>>,
    /// Present when a truth basis was supplied: per-mode fidelity stats.
    pub fidelity_mean: Option<Vec<f64>>,
    pub fidelity_std: Option<Vec<f64>>,
}

/// Derives an independent sub-stream seed from a master seed and a label.
pub fn derive_seed(master: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(label.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// Pixel-bootstrap retrieval: each replica retrieves on a mask of pixels
/// resampled with replacement from the base mask; modes are aligned to the
/// first replica (or to `truth`) before accumulating statistics.
pub fn bootstrap_retrieve(
    measured: &Spectrogram,
    fns: &GateFunctions,
    time: &TimeGrid,
    config: &RetrievalConfig,
    spec: &BootstrapSpec,
    truth: Option<&ModeBasis>,
) -> Result<BootstrapResult> {
    spec.validate()?;
    config.validate()?;
    let base_mask: Array2<bool> = match &config.mask {
        MaskSpec::None => Array2::from_elem(measured.values.raw_dim(), true),
        MaskSpec::Auto { threshold } => {
            // mask is always built from the vacuum-subtracted view inside
            // retrieve; replicate that here on a best-effort basis
            build_mask(measured, *threshold)?
        }
        MaskSpec::Explicit(m) => m.clone(),
    };
    let pixels: Vec<(usize, usize)> = base_mask
        .indexed_iter()
        .filter(|(_, &b)| b)
        .map(|(idx, _)| idx)
        .collect();
    if pixels.is_empty() {
        return Err(Error::EmptyMask);
    }
    let n_draw = ((pixels.len() as f64 * spec.resample_fraction).round() as usize).max(1);

    let mut results: Vec<RetrievalResult> = Vec::with_capacity(spec.n_replicas);
    for rep in 0..spec.n_replicas {
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &format!("resample/{rep}")));
        let mut mask = Array2::from_elem(measured.values.raw_dim(), false);
        for _ in 0..n_draw {
            let idx = pixels[rng.gen_range(0..pixels.len())];
            mask[idx] = true;
        }
        let mut cfg = config.clone();
        cfg.mask = MaskSpec::Explicit(mask);
        cfg.seed = derive_seed(spec.seed, &format!("retrieve/{rep}"));
        results.push(retrieve(measured, fns, time, &cfg)?);
    }

    let m = config.n_modes;
    let dt = time.dt();
    let reference: ModeBasis = match truth {
        Some(t) => t.clone(),
        None => results[0].basis.clone(),
    };
    // align each replica to the reference ordering
    let mut aligned: Vec<(Vec<usize>, Vec<f64>)> = Vec::with_capacity(results.len());
    for r in &results {
        let mm = match_modes(&reference, &r.basis, dt)?;
        aligned.push((mm.permutation, mm.fidelities));
    }

    let n = time.n();
    let mut var_x_acc = vec![Vec::with_capacity(results.len()); m];
    let mut var_p_acc = vec![Vec::with_capacity(results.len()); m];
    let mut env_acc = vec![vec![Vec::with_capacity(results.len()); n]; m];
    let mut fid_acc = vec![Vec::with_capacity(results.len()); m];
    let mut replicas = Vec::with_capacity(results.len());
    for (r, (perm, fids)) in results.iter().zip(&aligned) {
        let mut vx = vec![0.0; m];
        let mut vp = vec![0.0; m];
        let mut ang = vec![0.0; m];
        for i in 0..m {
            let j = perm[i];
            vx[i] = r.var_x[j];
            vp[i] = r.var_p[j];
            ang[i] = r.angles[j];
            var_x_acc[i].push(r.var_x[j]);
            var_p_acc[i].push(r.var_p[j]);
            fid_acc[i].push(fids[i]);
            let samples = r.basis.modes()[j].samples();
            for k in 0..n {
                env_acc[i][k].push(samples[k].norm_sqr());
            }
        }
        replicas.push(ReplicaSummary {
            final_loss: r.final_loss,
            converged: r.converged,
            var_x: vx,
            var_p: vp,
            angles: ang,
        });
    }

    let stats = |acc: &[Vec<f64>]| -> (Vec<f64>, Vec<f64>) {
        acc.iter().map(|v| mean_std(v)).unzip()
    };
    let (var_x_mean, var_x_std) = stats(&var_x_acc);
    let (var_p_mean, var_p_std) = stats(&var_p_acc);
    let mut envelope_mean = vec![vec![0.0; n]; m];
    let mut envelope_std = vec![vec![0.0; n]; m];
    for i in 0..m {
        for k in 0..n {
            let (mu, sd) = mean_std(&env_acc[i][k]);
            envelope_mean[i][k] = mu;
            envelope_std[i][k] = sd;
        }
    }
    let (fidelity_mean, fidelity_std) = if truth.is_some() {
        let (mu, sd) = stats(&fid_acc);
        (Some(mu), Some(sd))
    } else {
        (None, None)
    };
    Ok(BootstrapResult {
        replicas,
        var_x_mean,
        var_x_std,
        var_p_mean,
        var_p_std,
        envelope_mean,
        envelope_std,
        fidelity_mean,
        fidelity_std,
    })
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mu = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n;
    (mu, var.sqrt())
}

/// Achieved SNR of a noisy spectrogram against its clean counterpart,
/// under the same definition used by [`add_noise`].
pub fn measured_snr_db(
    clean: &Spectrogram,
    noisy: &Spectrogram,
    definition: NoiseDefinition,
) -> Result<f64> {
    if !clean.same_grids(noisy) {
        return Err(Error::GridMismatch("measured_snr_db: grids differ".into()));
    }
    let level = match definition {
        NoiseDefinition::Rms => {
            (clean.values.iter().map(|v| v * v).sum::<f64>() / clean.values.len() as f64).sqrt()
        }
        NoiseDefinition::Peak => clean.values.iter().copied().fold(0.0, f64::max),
    };
    let noise_rms = (clean
        .values
        .iter()
        .zip(noisy.values.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / clean.values.len() as f64)
        .sqrt();
    if noise_rms <= 0.0 || level <= 0.0 {
        return Err(Error::Data("measured_snr_db: degenerate input".into()));
    }
    Ok(20.0 * (level / noise_rms).log10())
}
