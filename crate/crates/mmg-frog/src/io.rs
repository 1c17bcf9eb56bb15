//! Run configuration, spectrogram/result file formats and the output
//! manifest.
//!
//! Spectrograms travel in either of two lossless containers:
//! - CSV: a single JSON header line (grid metadata, kind, normalization)
//!   followed by `n_w` comma-separated rows of `n_tau` float64 values
//!   (shortest round-trip decimal formatting);
//! - binary: the magic `MMGFROG1`, a little-endian u32 header length, the
//!   same JSON header, then row-major little-endian float64 values.

use std::fs;
use std::io::{Read as _, Write as _};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::forward::{Spectrogram, SpectrogramKind};
use crate::gate::{chirped_gaussian_gate, GatePulse};
use crate::grid::{DelayGrid, GridMeta, TimeGrid};
use crate::noise::{BootstrapSpec, NoiseDefinition};
use crate::retrieval::{MaskSpec, RetrievalConfig, RetrievalResult, StepSchedule};
use crate::states::StateConfig;

const BINARY_MAGIC: &[u8; 8] = b"MMGFROG1";

/// Grid block of a run configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridBlock {
    pub n_t: usize,
    pub dt_fs: f64,
    pub n_tau: usize,
    pub dtau_fs: f64,
    /// Defaults to a delay axis symmetric about zero.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau_min_fs: Option<f64>,
}

impl GridBlock {
    pub fn time_grid(&self) -> Result<TimeGrid> {
        TimeGrid::centered(self.n_t, self.dt_fs)
    }

    pub fn delay_grid(&self) -> Result<DelayGrid> {
        match self.tau_min_fs {
            Some(tau_min) => DelayGrid::new(self.n_tau, self.dtau_fs, tau_min),
            None => DelayGrid::symmetric(self.n_tau, self.dtau_fs),
        }
    }
}

/// Gate block: a chirped Gaussian pump specified by intensity FWHM,
/// quadratic phase and peak power gain.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GateBlock {
    pub fwhm_fs: f64,
    #[serde(default)]
    pub chirp: f64,
    pub peak_gain_db: f64,
    #[serde(default)]
    pub w_s_radfs: f64,
}

impl GateBlock {
    pub fn build(&self, time: &TimeGrid) -> Result<GatePulse> {
        chirped_gaussian_gate(time, self.fwhm_fs, self.chirp, self.peak_gain_db, self.w_s_radfs)
    }
}

/// Retrieval block; seeds are derived from the run's master seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrievalBlock {
    pub n_modes: usize,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    #[serde(default = "default_step_size")]
    pub step_size: f64,
    #[serde(default)]
    pub step_schedule: StepSchedule,
    #[serde(default = "default_convergence_tol")]
    pub convergence_tol: f64,
    #[serde(default = "default_success_loss_threshold")]
    pub success_loss_threshold: f64,
    /// Enables the automatic low-intensity zeroing mask at this relative
    /// threshold.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_threshold: Option<f64>,
}

fn default_max_iters() -> usize {
    10_000
}
fn default_step_size() -> f64 {
    1.0
}
fn default_convergence_tol() -> f64 {
    1e-7
}
fn default_success_loss_threshold() -> f64 {
    0.10
}

impl RetrievalBlock {
    pub fn build(&self, seed: u64) -> Result<RetrievalConfig> {
        let cfg = RetrievalConfig {
            n_modes: self.n_modes,
            max_iters: self.max_iters,
            step_size: self.step_size,
            step_schedule: self.step_schedule,
            seed,
            mask: match self.mask_threshold {
                Some(threshold) => MaskSpec::Auto { threshold },
                None => MaskSpec::None,
            },
            convergence_tol: self.convergence_tol,
            success_loss_threshold: self.success_loss_threshold,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Noise block; the injection seed is derived from the master seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseBlock {
    pub snr_db: f64,
    #[serde(default)]
    pub definition: NoiseDefinition,
}

/// Bootstrap block; the resampling seed is derived from the master seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BootstrapBlock {
    #[serde(default = "default_n_replicas")]
    pub n_replicas: usize,
    #[serde(default = "default_resample_fraction")]
    pub resample_fraction: f64,
}

fn default_n_replicas() -> usize {
    100
}
fn default_resample_fraction() -> f64 {
    1.0
}

impl BootstrapBlock {
    pub fn build(&self, seed: u64) -> Result<BootstrapSpec> {
        let spec = BootstrapSpec {
            n_replicas: self.n_replicas,
            seed,
            resample_fraction: self.resample_fraction,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Top-level run configuration. Every block validates against its module's
/// schema before any computation starts.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub grid: GridBlock,
    pub gate: GateBlock,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state: Option<StateConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retrieval: Option<RetrievalBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<NoiseBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bootstrap: Option<BootstrapBlock>,
    /// Root of all sub-stream seeds (init, noise, bootstrap). Mandatory when
    /// any stochastic block is present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub master_seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)
            .map_err(|e| Error::InvalidConfig(format!("run config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    /// Applies dotted-path overrides (`grid.n_t=256`) on the JSON view of the
    /// config and re-validates. Values parse as JSON first, falling back to
    /// strings.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut value = serde_json::to_value(self)?;
        for item in overrides {
            let (path, raw) = item.split_once('=').ok_or_else(|| {
                Error::InvalidConfig(format!("override '{item}' is not of the form key=value"))
            })?;
            let parsed: serde_json::Value = serde_json::from_str(raw)
                .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
            let mut cursor = &mut value;
            let segments: Vec<&str> = path.split('.').collect();
            for (i, seg) in segments.iter().enumerate() {
                let last = i + 1 == segments.len();
                cursor = match cursor {
                    serde_json::Value::Object(map) => {
                        if last {
                            map.insert(seg.to_string(), parsed.clone());
                            break;
                        }
                        map.entry(seg.to_string())
                            .or_insert_with(|| serde_json::Value::Object(Default::default()))
                    }
                    serde_json::Value::Array(items) => {
                        let idx: usize = seg.parse().map_err(|_| {
                            Error::InvalidConfig(format!(
                                "override '{path}': '{seg}' is not an array index"
                            ))
                        })?;
                        let slot = items.get_mut(idx).ok_or_else(|| {
                            Error::InvalidConfig(format!(
                                "override '{path}': index {idx} out of bounds"
                            ))
                        })?;
                        if last {
                            *slot = parsed.clone();
                            break;
                        }
                        slot
                    }
                    _ => {
                        return Err(Error::InvalidConfig(format!(
                            "override '{path}': '{seg}' does not address an object or array"
                        )))
                    }
                };
            }
        }
        let cfg: RunConfig = serde_json::from_value(value)
            .map_err(|e| Error::InvalidConfig(format!("run config after overrides: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.time_grid()?;
        self.grid.delay_grid()?;
        let stochastic =
            self.retrieval.is_some() || self.noise.is_some() || self.bootstrap.is_some();
        if stochastic && self.master_seed.is_none() {
            return Err(Error::InvalidConfig(
                "master_seed is required when a retrieval, noise or bootstrap block is present"
                    .into(),
            ));
        }
        if let Some(r) = &self.retrieval {
            r.build(0)?;
        }
        if let Some(b) = &self.bootstrap {
            b.build(0)?;
        }
        if let Some(n) = &self.noise {
            if !n.snr_db.is_finite() {
                return Err(Error::InvalidConfig("noise.snr_db must be finite".into()));
            }
        }
        Ok(())
    }
}

/// File header shared by the CSV and binary spectrogram containers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpectrogramHeader {
    pub grid: GridMeta,
    pub kind: SpectrogramKind,
    pub normalization: f64,
}

impl SpectrogramHeader {
    fn of(s: &Spectrogram) -> Result<Self> {
        // dt recovers from the DFT relation dw * dt = 2 pi / n
        let n = s.freq_grid.n();
        let dt = 2.0 * std::f64::consts::PI / (n as f64 * s.freq_grid.dw());
        let time = TimeGrid::centered(n, dt)?;
        Ok(Self {
            grid: GridMeta::new(&time, &s.freq_grid, &s.delay_grid),
            kind: s.kind,
            normalization: s.normalization,
        })
    }

    fn into_spectrogram(self, values: Array2<f64>) -> Result<Spectrogram> {
        if values.nrows() != self.grid.n_t || values.ncols() != self.grid.n_tau {
            return Err(Error::Data(format!(
                "spectrogram payload is {}x{}, header says {}x{}",
                values.nrows(),
                values.ncols(),
                self.grid.n_t,
                self.grid.n_tau
            )));
        }
        Ok(Spectrogram {
            values,
            freq_grid: self.grid.freq_grid()?,
            delay_grid: self.grid.delay_grid()?,
            kind: self.kind,
            normalization: self.normalization,
        })
    }
}

/// Container format of a spectrogram file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FileFormat {
    Csv,
    Binary,
}

impl FileFormat {
    /// Picks the format from a file extension (`.csv` => CSV, else binary).
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => FileFormat::Csv,
            _ => FileFormat::Binary,
        }
    }
}

pub fn write_spectrogram(path: &Path, s: &Spectrogram, format: FileFormat) -> Result<()> {
    let header = SpectrogramHeader::of(s)?;
    let header_json = serde_json::to_string(&header)?;
    let mut out: Vec<u8> = Vec::new();
    match format {
        FileFormat::Csv => {
            out.extend_from_slice(header_json.as_bytes());
            out.push(b'\n');
            for row in s.values.rows() {
                let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
                out.extend_from_slice(line.join(",").as_bytes());
                out.push(b'\n');
            }
        }
        FileFormat::Binary => {
            out.extend_from_slice(BINARY_MAGIC);
            out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
            out.extend_from_slice(header_json.as_bytes());
            for v in s.values.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    atomic_write(path, &out)
}

pub fn read_spectrogram(path: &Path) -> Result<Spectrogram> {
    let bytes = fs::read(path)?;
    if bytes.starts_with(BINARY_MAGIC) {
        read_spectrogram_binary(&bytes)
    } else {
        read_spectrogram_csv(&bytes)
    }
}

fn read_spectrogram_csv(bytes: &[u8]) -> Result<Spectrogram> {
    let text = std::str::from_utf8(bytes)
        .map_err(|_| Error::Data("spectrogram CSV is not valid UTF-8".into()))?;
    let mut lines = text.lines();
    let header_line = lines
        .next()
        .ok_or_else(|| Error::Data("spectrogram CSV is empty".into()))?;
    let header: SpectrogramHeader = serde_json::from_str(header_line)
        .map_err(|e| Error::Data(format!("spectrogram CSV header: {e}")))?;
    let mut values = Array2::zeros((header.grid.n_t, header.grid.n_tau));
    let mut rows = 0usize;
    for (j, line) in lines.filter(|l| !l.is_empty()).enumerate() {
        if j >= header.grid.n_t {
            return Err(Error::Data("spectrogram CSV has too many rows".into()));
        }
        let mut cols = 0usize;
        for (i, field) in line.split(',').enumerate() {
            if i >= header.grid.n_tau {
                return Err(Error::Data(format!(
                    "spectrogram CSV row {j} has too many columns"
                )));
            }
            values[(j, i)] = field
                .trim()
                .parse::<f64>()
                .map_err(|_| Error::Data(format!("spectrogram CSV row {j}: bad float '{field}'")))?;
            cols += 1;
        }
        if cols != header.grid.n_tau {
            return Err(Error::Data(format!(
                "spectrogram CSV row {j} has {cols} columns, expected {}",
                header.grid.n_tau
            )));
        }
        rows += 1;
    }
    if rows != header.grid.n_t {
        return Err(Error::Data(format!(
            "spectrogram CSV has {rows} rows, expected {}",
            header.grid.n_t
        )));
    }
    header.into_spectrogram(values)
}

fn read_spectrogram_binary(bytes: &[u8]) -> Result<Spectrogram> {
    let mut cursor = &bytes[BINARY_MAGIC.len()..];
    let mut len_buf = [0u8; 4];
    cursor
        .read_exact(&mut len_buf)
        .map_err(|_| Error::Data("spectrogram binary: truncated header length".into()))?;
    let header_len = u32::from_le_bytes(len_buf) as usize;
    if cursor.len() < header_len {
        return Err(Error::Data("spectrogram binary: truncated header".into()));
    }
    let header: SpectrogramHeader = serde_json::from_str(
        std::str::from_utf8(&cursor[..header_len])
            .map_err(|_| Error::Data("spectrogram binary header is not UTF-8".into()))?,
    )
    .map_err(|e| Error::Data(format!("spectrogram binary header: {e}")))?;
    cursor = &cursor[header_len..];
    let n = header.grid.n_t * header.grid.n_tau;
    if cursor.len() != n * 8 {
        return Err(Error::Data(format!(
            "spectrogram binary payload is {} bytes, expected {}",
            cursor.len(),
            n * 8
        )));
    }
    let mut flat = Vec::with_capacity(n);
    for chunk in cursor.chunks_exact(8) {
        flat.push(f64::from_le_bytes(chunk.try_into().unwrap()));
    }
    let values = Array2::from_shape_vec((header.grid.n_t, header.grid.n_tau), flat)
        .map_err(|e| Error::Data(format!("spectrogram binary shape: {e}")))?;
    header.into_spectrogram(values)
}

/// Serialized form of a retrieval result: modes as re/im arrays plus the
/// scalar outputs and a config echo.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetrievalResultFile {
    pub grid: GridMeta,
    pub modes_re: Vec<Vec<f64>>,
    pub modes_im: Vec<Vec<f64>>,
    pub var_x: Vec<f64>,
    pub var_p: Vec<f64>,
    pub squeezing_db: Vec<f64>,
    pub anti_squeezing_db: Vec<f64>,
    pub angles_rad: Vec<f64>,
    pub final_loss: f64,
    pub converged: bool,
    pub iterations_run: usize,
    pub loss_trace: Vec<f64>,
    pub diagnostics: Vec<String>,
    pub seed: u64,
    pub config: serde_json::Value,
}

impl RetrievalResultFile {
    pub fn new(
        result: &RetrievalResult,
        time: &TimeGrid,
        delays: &DelayGrid,
        config_echo: serde_json::Value,
        seed: u64,
    ) -> Self {
        let freq = time.freq_grid();
        Self {
            grid: GridMeta::new(time, &freq, delays),
            modes_re: result
                .basis
                .modes()
                .iter()
                .map(|m| m.samples().iter().map(|z| z.re).collect())
                .collect(),
            modes_im: result
                .basis
                .modes()
                .iter()
                .map(|m| m.samples().iter().map(|z| z.im).collect())
                .collect(),
            var_x: result.var_x.clone(),
            var_p: result.var_p.clone(),
            squeezing_db: result
                .var_x
                .iter()
                .map(|&v| crate::states::variance_to_squeezing_db(v))
                .collect(),
            anti_squeezing_db: result
                .var_p
                .iter()
                .map(|&v| crate::states::variance_to_squeezing_db(v))
                .collect(),
            angles_rad: result.angles.clone(),
            final_loss: result.final_loss,
            converged: result.converged,
            iterations_run: result.iterations_run,
            loss_trace: result.loss_trace.clone(),
            diagnostics: result.diagnostics.clone(),
            seed,
            config: config_echo,
        }
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    atomic_write(path, text.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

/// Output manifest: config echo plus SHA-256 checksums of every emitted
/// file, so post-hoc modification is detectable.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub config: serde_json::Value,
    pub files: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub sha256: String,
}

impl Manifest {
    pub fn new(config: serde_json::Value) -> Self {
        Self {
            config,
            files: Vec::new(),
        }
    }

    /// Checksums `path` (relative to `root`) and records it.
    pub fn add(&mut self, root: &Path, path: &Path) -> Result<()> {
        let bytes = fs::read(path)?;
        let rel = path.strip_prefix(root).unwrap_or(path);
        self.files.push(ManifestEntry {
            path: rel.to_string_lossy().into_owned(),
            sha256: hex_digest(&bytes),
        });
        Ok(())
    }

    pub fn write(&self, root: &Path) -> Result<PathBuf> {
        let path = root.join("manifest.json");
        write_json(&path, self)?;
        Ok(path)
    }

    /// Re-checksums every listed file; returns the paths that changed or
    /// disappeared.
    pub fn verify(&self, root: &Path) -> Result<Vec<String>> {
        let mut bad = Vec::new();
        for entry in &self.files {
            match fs::read(root.join(&entry.path)) {
                Ok(bytes) if hex_digest(&bytes) == entry.sha256 => {}
                _ => bad.push(entry.path.clone()),
            }
        }
        Ok(bad)
    }
}

fn hex_digest(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut s = String::with_capacity(64);
    for b in digest {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let tmp = path.with_extension("tmp.partial");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}
