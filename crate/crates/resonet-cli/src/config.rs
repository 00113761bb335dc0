//! Run configuration: one TOML file with sections for physics, dataset,
//! surrogate, training, the optional two-layer head, and output paths.
//! Unknown keys are rejected everywhere so typos fail fast instead of
//! silently falling back to defaults.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use resonet::audio::{SynthConfig, SynthKind};
use resonet::model::PhysicsConfig;
use resonet::nonlinear::NonlinearElement;
use resonet::trainer::{DeepTrainConfig, TrainConfig};

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub physics: PhysicsConfig,
    pub dataset: DatasetSection,
    pub surrogate: SurrogateSection,
    pub training: TrainConfig,
    /// Present only for two-layer runs.
    pub deep: Option<DeepSection>,
    pub output: OutputSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    /// "spectral" (tone A vs tone B) or "temporal" (A->B vs B->A).
    pub kind: String,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub seed: u64,
    /// Prepared-clip cache directory; when set, clips are loaded from it
    /// instead of being synthesized in memory.
    pub dir: Option<PathBuf>,
    /// Manifest of WAV files to ingest with `dataset prepare`.
    pub manifest: Option<PathBuf>,
    pub synth: SynthSection,
    pub ingest: IngestSection,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            kind: "spectral".into(),
            train_per_class: 30,
            test_per_class: 20,
            seed: 99,
            dir: None,
            manifest: None,
            synth: SynthSection::default(),
            ingest: IngestSection::default(),
        }
    }
}

/// Synthetic-clip knobs; unset fields fall back to the library defaults,
/// except `rate` which follows the training grid.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub f_a_hz: Option<f64>,
    pub f_b_hz: Option<f64>,
    pub duration_s: Option<f64>,
    pub rate: Option<f64>,
    pub snr_db: Option<f64>,
    pub amp_lo: Option<f64>,
    pub amp_hi: Option<f64>,
}

/// WAV ingestion pipeline parameters: normalize, modulate onto a carrier,
/// speed up, resample onto the simulation grid, band-pass.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestSection {
    /// Clip duration after the length fix, in seconds of original audio.
    pub duration_s: f64,
    /// Mean squared amplitude after normalization.
    pub target_power: f64,
    /// Carrier frequency applied at the original rate, Hz.
    pub carrier_hz: f64,
    /// Playback speedup; the effective carrier is `carrier_hz * speed`.
    pub speed: f64,
    /// Band-pass corners on the simulation grid, Hz.
    pub band_lo_hz: f64,
    pub band_hi_hz: f64,
}

impl Default for IngestSection {
    fn default() -> Self {
        Self {
            duration_s: 1.0,
            target_power: 1.0,
            carrier_hz: 685.0,
            speed: 100.0,
            band_lo_hz: 60_000.0,
            band_hi_hz: 77_000.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurrogateSection {
    /// Oracle training pairs to generate when fitting in-process.
    pub samples: usize,
    pub seed: u64,
    /// Fitted surrogate JSON; when set, loaded instead of fitting.
    pub path: Option<PathBuf>,
}

impl Default for SurrogateSection {
    fn default() -> Self {
        Self {
            samples: 600,
            seed: 11,
            path: None,
        }
    }
}

/// Two-layer head: the nonlinear element and its coupling gains.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeepSection {
    pub mass: [f64; 3],
    pub damping: [f64; 3],
    pub stiffness: [f64; 3],
    pub gamma_s1: f64,
    pub gamma_s2: f64,
    pub kappa_a: f64,
    pub kappa_b: f64,
    pub step_init: f64,
}

impl Default for DeepSection {
    fn default() -> Self {
        // Strings resonant at the two class tones (0.9 and 1.1 in units of
        // the lattice center frequency) so each passes one channel; a soft,
        // lightly damped cantilever holds the slow cross-channel state.
        let k1 = (2.0 * std::f64::consts::PI).powi(2);
        Self {
            mass: [1.0, 1.0, 1.0],
            damping: [0.1, 0.1, 0.1],
            stiffness: [0.81 * k1, 1.21 * k1, 0.2 * k1],
            gamma_s1: 6.0,
            gamma_s2: 8.0,
            kappa_a: 4.0,
            kappa_b: 6.0,
            step_init: 0.5,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
    /// Emit CSV plot bundles next to the report.
    pub emit_plots: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs/out"),
            emit_plots: true,
        }
    }
}

impl RunConfig {
    /// Parse a config file, remembering its raw bytes for the run hash.
    pub fn load(path: &Path) -> Result<(Self, Vec<u8>)> {
        let bytes = std::fs::read(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let text = std::str::from_utf8(&bytes)
            .with_context(|| format!("config {} is not UTF-8", path.display()))?;
        let cfg: RunConfig = toml::from_str(text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        cfg.validate()?;
        Ok((cfg, bytes))
    }

    pub fn validate(&self) -> Result<()> {
        self.training.validate()?;
        self.synth_kind()?;
        if let Some(dir) = &self.dataset.dir {
            if !dir.is_dir() {
                bail!(missing(format!("dataset directory {}", dir.display())));
            }
        }
        if let Some(m) = &self.dataset.manifest {
            if !m.is_file() {
                bail!(missing(format!("dataset manifest {}", m.display())));
            }
        }
        if let Some(p) = &self.surrogate.path {
            if !p.is_file() {
                bail!(missing(format!("surrogate file {}", p.display())));
            }
        }
        if self.surrogate.samples == 0 {
            bail!("surrogate.samples must be at least 1");
        }
        if let Some(deep) = &self.deep {
            self.deep_config(deep)?.validate()?;
        }
        Ok(())
    }

    pub fn synth_kind(&self) -> Result<SynthKind> {
        match self.dataset.kind.as_str() {
            "spectral" => Ok(SynthKind::Spectral),
            "temporal" => Ok(SynthKind::Temporal),
            other => bail!("dataset.kind {other:?} is neither \"spectral\" nor \"temporal\""),
        }
    }

    /// Resolve the synthetic-clip parameters: explicit values win, the
    /// sample rate follows the training grid, everything else keeps the
    /// library defaults.
    pub fn synth_config(&self) -> SynthConfig {
        let d = SynthConfig::default();
        let s = &self.dataset.synth;
        SynthConfig {
            f_a_hz: s.f_a_hz.unwrap_or(d.f_a_hz),
            f_b_hz: s.f_b_hz.unwrap_or(d.f_b_hz),
            duration_s: s.duration_s.unwrap_or(d.duration_s),
            rate: s.rate.unwrap_or(1.0 / self.training.dt),
            snr_db: s.snr_db.unwrap_or(d.snr_db),
            amp_lo: s.amp_lo.unwrap_or(d.amp_lo),
            amp_hi: s.amp_hi.unwrap_or(d.amp_hi),
        }
    }

    pub fn deep_config(&self, deep: &DeepSection) -> Result<DeepTrainConfig> {
        let cfg = DeepTrainConfig {
            base: self.training.clone(),
            element: NonlinearElement {
                mass: deep.mass,
                damping: deep.damping,
                stiffness: deep.stiffness,
                gamma_s1: deep.gamma_s1,
                gamma_s2: deep.gamma_s2,
            },
            kappa_a: deep.kappa_a,
            kappa_b: deep.kappa_b,
            step_init: deep.step_init,
        };
        Ok(cfg)
    }
}

/// Tag for errors that should map to the missing-input exit code.
#[derive(Debug)]
pub struct MissingInput(pub String);

impl std::fmt::Display for MissingInput {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "missing input: {}", self.0)
    }
}

impl std::error::Error for MissingInput {}

pub fn missing(what: String) -> MissingInput {
    MissingInput(what)
}

/// Parse a lattice shape like `3x3`.
pub fn parse_shape(s: &str) -> Result<(usize, usize), String> {
    let (r, c) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("shape {s:?} is not of the form ROWSxCOLS"))?;
    let rows: usize = r.trim().parse().map_err(|_| format!("bad row count {r:?}"))?;
    let cols: usize = c.trim().parse().map_err(|_| format!("bad column count {c:?}"))?;
    if rows == 0 || cols == 0 {
        return Err(format!("shape {s:?} has an empty dimension"));
    }
    Ok((rows, cols))
}

/// Parse a comma-separated list of exactly four frequencies.
pub fn parse_band(s: &str) -> Result<[f64; 4], String> {
    let vals: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|_| format!("bad frequency {t:?}")))
        .collect::<Result<_, _>>()?;
    <[f64; 4]>::try_from(vals).map_err(|v| format!("need exactly 4 frequencies, got {}", v.len()))
}
