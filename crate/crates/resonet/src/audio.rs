//! Audio ingestion and preparation.
//!
//! Real recordings enter as PCM WAV files and go through a fixed chain:
//! trim and power-normalize, shift into the lattice's operating band by
//! carrier modulation plus playback speedup, resample onto the simulation
//! grid, and band-limit with a zero-phase Butterworth filter. Synthetic
//! desk-scale datasets are generated directly on the simulation grid.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::io::Read;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed audio container: {0}")]
    Format(String),
    #[error("unsupported audio encoding: {0}")]
    Unsupported(String),
    #[error("invalid parameter: {0}")]
    BadInput(String),
    #[error("manifest error: {0}")]
    Manifest(String),
}

/// One labeled waveform.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioSample {
    pub id: String,
    /// Class label, -1 or +1.
    pub label: i8,
    /// Sample rate in Hz.
    pub rate: f64,
    pub samples: Vec<f64>,
}

impl AudioSample {
    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.rate
    }

    /// Mean squared amplitude over the whole clip.
    pub fn mean_power(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(|&s| s * s).sum::<f64>() / self.samples.len() as f64
    }
}

// ---------------------------------------------------------------------------
// WAV reader

/// Decode a PCM WAV file: 8/16/24-bit integer or 32-bit float, first
/// channel taken, samples scaled to `[-1, 1]`.
pub fn load_wav(path: &Path) -> Result<(f64, Vec<f64>), AudioError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    parse_wav(&bytes)
}

/// Decode WAV bytes; see [`load_wav`].
pub fn parse_wav(bytes: &[u8]) -> Result<(f64, Vec<f64>), AudioError> {
    let fail = |msg: &str| AudioError::Format(msg.into());
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(fail("missing RIFF/WAVE header"));
    }
    let mut pos = 12;
    let mut fmt: Option<(u16, u16, u32, u16)> = None; // format code, channels, rate, bits
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        let body_end = pos + 8 + size;
        if body_end > bytes.len() {
            return Err(fail("chunk extends past end of file"));
        }
        let body = &bytes[pos + 8..body_end];
        match id {
            b"fmt " => {
                if body.len() < 16 {
                    return Err(fail("fmt chunk too short"));
                }
                let mut code = u16::from_le_bytes(body[0..2].try_into().unwrap());
                let channels = u16::from_le_bytes(body[2..4].try_into().unwrap());
                let rate = u32::from_le_bytes(body[4..8].try_into().unwrap());
                let bits = u16::from_le_bytes(body[14..16].try_into().unwrap());
                // WAVE_FORMAT_EXTENSIBLE wraps the true code in a GUID.
                if code == 0xFFFE {
                    if body.len() < 26 {
                        return Err(fail("extensible fmt chunk too short"));
                    }
                    code = u16::from_le_bytes(body[24..26].try_into().unwrap());
                }
                fmt = Some((code, channels, rate, bits));
            }
            b"data" => data = Some(body),
            _ => {}
        }
        // Chunks are word-aligned: odd sizes carry one pad byte.
        pos = body_end + (size & 1);
    }
    let (code, channels, rate, bits) = fmt.ok_or_else(|| fail("missing fmt chunk"))?;
    let data = data.ok_or_else(|| fail("missing data chunk"))?;
    if channels == 0 || rate == 0 {
        return Err(fail("fmt chunk has zero channels or rate"));
    }
    let bytes_per = match (code, bits) {
        (1, 8) => 1,
        (1, 16) => 2,
        (1, 24) => 3,
        (3, 32) => 4,
        (1, other) => {
            return Err(AudioError::Unsupported(format!(
                "{other}-bit integer PCM (only 8/16/24-bit integer and 32-bit float are handled)"
            )))
        }
        (3, other) => {
            return Err(AudioError::Unsupported(format!("{other}-bit float PCM")))
        }
        (other, _) => {
            return Err(AudioError::Unsupported(format!("WAV format code {other}")))
        }
    };
    let frame = bytes_per * channels as usize;
    let n_frames = data.len() / frame;
    let mut out = Vec::with_capacity(n_frames);
    for f in 0..n_frames {
        let o = f * frame;
        let s = &data[o..o + bytes_per];
        let value = match (code, bits) {
            (1, 8) => (s[0] as f64 - 128.0) / 128.0,
            (1, 16) => i16::from_le_bytes([s[0], s[1]]) as f64 / 32768.0,
            (1, 24) => {
                let raw = (s[0] as i32) | ((s[1] as i32) << 8) | (((s[2] as i8) as i32) << 16);
                raw as f64 / 8_388_608.0
            }
            (3, 32) => f32::from_le_bytes([s[0], s[1], s[2], s[3]]) as f64,
            _ => unreachable!(),
        };
        out.push(value);
    }
    Ok((rate as f64, out))
}

// ---------------------------------------------------------------------------
// Preparation chain

/// Result of [`prepare`]: the conditioned clip plus a flag for inputs that
/// were completely silent and therefore could not be normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    pub sample: AudioSample,
    pub silent: bool,
}

/// Fix the clip length to `round(duration_s * rate)` samples (longer
/// inputs center-cropped, shorter ones zero-padded at the end), then scale
/// so the mean squared amplitude over the full duration equals
/// `target_power`. All-silent inputs are returned unscaled with the
/// `silent` flag set.
pub fn prepare(sample: &AudioSample, duration_s: f64, target_power: f64) -> Prepared {
    let n_target = (duration_s * sample.rate).round() as usize;
    let n = sample.samples.len();
    let mut out = if n >= n_target {
        let start = (n - n_target) / 2;
        sample.samples[start..start + n_target].to_vec()
    } else {
        let mut v = sample.samples.clone();
        v.resize(n_target, 0.0);
        v
    };
    let power = if n_target == 0 {
        0.0
    } else {
        out.iter().map(|&s| s * s).sum::<f64>() / n_target as f64
    };
    let silent = power == 0.0;
    if !silent {
        let scale = (target_power / power).sqrt();
        for s in &mut out {
            *s *= scale;
        }
    }
    Prepared {
        sample: AudioSample {
            id: sample.id.clone(),
            label: sample.label,
            rate: sample.rate,
            samples: out,
        },
        silent,
    }
}

/// Multiply by a sine carrier, then increase the playback speed by
/// relabeling the sample rate: the sample values are untouched and the
/// time axis compresses by `speed_factor`, so the effective carrier after
/// speedup is `f_carrier_hz * speed_factor`.
pub fn modulate_and_speedup(
    sample: &AudioSample,
    f_carrier_hz: f64,
    speed_factor: f64,
) -> Result<AudioSample, AudioError> {
    if !(f_carrier_hz > 0.0) || f_carrier_hz >= sample.rate / 2.0 {
        return Err(AudioError::BadInput(format!(
            "carrier {f_carrier_hz} Hz outside (0, {}) for rate {}",
            sample.rate / 2.0,
            sample.rate
        )));
    }
    if !(speed_factor > 0.0) {
        return Err(AudioError::BadInput(format!(
            "speed factor {speed_factor} must be positive"
        )));
    }
    let w = 2.0 * std::f64::consts::PI * f_carrier_hz / sample.rate;
    let samples = sample
        .samples
        .iter()
        .enumerate()
        .map(|(k, &s)| s * (w * k as f64).sin())
        .collect();
    Ok(AudioSample {
        id: sample.id.clone(),
        label: sample.label,
        rate: sample.rate * speed_factor,
        samples,
    })
}

/// Linear interpolation of the clip onto the uniform simulation grid of
/// width `dt_s`. The output has `floor(duration / dt_s)` entries; grid
/// points outside the signal support read 0.
pub fn resample_to_grid(sample: &AudioSample, dt_s: f64) -> Result<Vec<f64>, AudioError> {
    if !(dt_s > 0.0) {
        return Err(AudioError::BadInput(format!("dt {dt_s} must be positive")));
    }
    let n_in = sample.samples.len();
    let duration = n_in as f64 / sample.rate;
    let n_out = (duration / dt_s).floor() as usize;
    let step = dt_s * sample.rate; // grid step in input-sample units
    let mut out = Vec::with_capacity(n_out);
    for k in 0..n_out {
        let pos = k as f64 * step;
        let i = pos.floor() as usize;
        let frac = pos - i as f64;
        let s0 = if i < n_in { sample.samples[i] } else { 0.0 };
        let s1 = if i + 1 < n_in { sample.samples[i + 1] } else { 0.0 };
        out.push(s0 + frac * (s1 - s0));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Zero-phase Butterworth band-pass

/// One second-order section, direct form II transposed.
#[derive(Debug, Clone, Copy)]
struct Biquad {
    b0: f64,
    b1: f64,
    b2: f64,
    a1: f64,
    a2: f64,
}

impl Biquad {
    /// Complex frequency response at digital angular frequency `w`.
    fn response(&self, w: f64) -> nalgebra::Complex<f64> {
        use nalgebra::Complex;
        let z1 = Complex::new(w.cos(), -w.sin());
        let z2 = z1 * z1;
        (Complex::new(self.b0, 0.0) + z1 * self.b1 + z2 * self.b2)
            / (Complex::new(1.0, 0.0) + z1 * self.a1 + z2 * self.a2)
    }

    /// Internal state producing a settled output for a constant input `u`,
    /// which suppresses startup transients when filtering begins mid-level.
    fn settled_state(&self, u: f64) -> (f64, f64) {
        let y = u * (self.b0 + self.b1 + self.b2) / (1.0 + self.a1 + self.a2);
        let z1 = y - self.b0 * u;
        let z2 = self.b2 * u - self.a2 * y;
        (z1, z2)
    }

    fn filter_inplace(&self, x: &mut [f64]) {
        if x.is_empty() {
            return;
        }
        let (mut z1, mut z2) = self.settled_state(x[0]);
        for v in x.iter_mut() {
            let u = *v;
            let y = self.b0 * u + z1;
            z1 = self.b1 * u - self.a1 * y + z2;
            z2 = self.b2 * u - self.a2 * y;
            *v = y;
        }
    }
}

/// Design a Butterworth band-pass (order-4 low-pass prototype, 8 poles)
/// as cascaded second-order sections, gain-normalized to exactly 1 at the
/// band's geometric center.
fn butter_bandpass_sections(rate: f64, f_lo: f64, f_hi: f64) -> Result<Vec<Biquad>, AudioError> {
    use nalgebra::Complex;
    if !(0.0 < f_lo && f_lo < f_hi && f_hi < rate / 2.0) {
        return Err(AudioError::BadInput(format!(
            "band [{f_lo}, {f_hi}] must satisfy 0 < lo < hi < rate/2 = {}",
            rate / 2.0
        )));
    }
    let order = 4usize;
    let fs2 = 2.0 * rate;
    // Prewarped analog band edges for the bilinear transform.
    let w_lo = fs2 * (std::f64::consts::PI * f_lo / rate).tan();
    let w_hi = fs2 * (std::f64::consts::PI * f_hi / rate).tan();
    let bw = w_hi - w_lo;
    let w0_sq = w_lo * w_hi;

    // Low-pass prototype poles on the unit circle, left half-plane.
    let mut analog_poles = Vec::with_capacity(2 * order);
    for k in 0..order {
        let theta = std::f64::consts::PI * (2.0 * k as f64 + order as f64 + 1.0)
            / (2.0 * order as f64);
        let p = Complex::new(theta.cos(), theta.sin());
        // Low-pass to band-pass: roots of s^2 - (bw p) s + w0^2.
        let bp = p * bw;
        let disc = (bp * bp - Complex::new(4.0 * w0_sq, 0.0)).sqrt();
        analog_poles.push((bp + disc) * 0.5);
        analog_poles.push((bp - disc) * 0.5);
    }

    // Bilinear transform; zeros land at z = +1 (4x) and z = -1 (4x).
    let digital_poles: Vec<Complex<f64>> = analog_poles
        .iter()
        .map(|&s| (Complex::new(fs2, 0.0) + s) / (Complex::new(fs2, 0.0) - s))
        .collect();
    let mut upper: Vec<Complex<f64>> = digital_poles.iter().copied().filter(|p| p.im > 0.0).collect();
    if upper.len() != order {
        return Err(AudioError::BadInput(
            "band-pass design degenerated to real poles; band too wide for this order".into(),
        ));
    }
    upper.sort_by(|a, b| a.re.partial_cmp(&b.re).unwrap());

    // Each conjugate pole pair takes one zero pair (z - 1)(z + 1), i.e.
    // numerator 1 - z^-2.
    let mut sections: Vec<Biquad> = upper
        .iter()
        .map(|p| Biquad {
            b0: 1.0,
            b1: 0.0,
            b2: -1.0,
            a1: -2.0 * p.re,
            a2: p.norm_sqr(),
        })
        .collect();

    // Normalize at the digital image of the analog center frequency.
    let f_center = (rate / std::f64::consts::PI) * (w0_sq.sqrt() / fs2).atan();
    let w_center = 2.0 * std::f64::consts::PI * f_center / rate;
    let gain: Complex<f64> = sections
        .iter()
        .map(|s| s.response(w_center))
        .product();
    let g = gain.norm();
    if !(g > 0.0) || !g.is_finite() {
        return Err(AudioError::BadInput("degenerate band-pass gain".into()));
    }
    let scale = 1.0 / g;
    sections[0].b0 *= scale;
    sections[0].b1 *= scale;
    sections[0].b2 *= scale;
    Ok(sections)
}

/// Zero-phase band-pass: the Butterworth cascade applied forward and
/// backward, with odd-symmetric edge extension so the filter starts and
/// ends settled. Output length equals input length.
pub fn bandpass(x: &[f64], rate: f64, f_lo: f64, f_hi: f64) -> Result<Vec<f64>, AudioError> {
    let sections = butter_bandpass_sections(rate, f_lo, f_hi)?;
    let n = x.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    // Long enough to cover several ring-down constants of the band-limited
    // impulse response at the intended megahertz-scale rates.
    let padlen = (n - 1).min(240);
    let mut ext = Vec::with_capacity(n + 2 * padlen);
    for i in (1..=padlen).rev() {
        ext.push(2.0 * x[0] - x[i]);
    }
    ext.extend_from_slice(x);
    for i in ((n - 1 - padlen)..(n - 1)).rev() {
        ext.push(2.0 * x[n - 1] - x[i]);
    }
    for s in &sections {
        s.filter_inplace(&mut ext);
    }
    ext.reverse();
    for s in &sections {
        s.filter_inplace(&mut ext);
    }
    ext.reverse();
    Ok(ext[padlen..padlen + n].to_vec())
}

/// Amplitude of the component at frequency `f` estimated by quadrature
/// correlation over the whole window.
pub fn quadrature_amplitude(x: &[f64], rate: f64, f: f64) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    let w = 2.0 * std::f64::consts::PI * f / rate;
    let (mut c, mut s) = (0.0f64, 0.0f64);
    for (k, &v) in x.iter().enumerate() {
        let ph = w * k as f64;
        c += v * ph.cos();
        s += v * ph.sin();
    }
    2.0 * (c * c + s * s).sqrt() / x.len() as f64
}

// ---------------------------------------------------------------------------
// Synthetic datasets

/// Which synthetic discrimination task to generate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthKind {
    /// Classes differ by carrier frequency (66 vs 71 kHz tones).
    Spectral,
    /// Classes differ only by the temporal order of the same two tones,
    /// so their average spectra are identical.
    Temporal,
}

/// Parameters of the synthetic generators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    /// First tone, Hz. Class +1 of the spectral task; first segment of
    /// class +1 of the temporal task.
    pub f_a_hz: f64,
    /// Second tone, Hz.
    pub f_b_hz: f64,
    /// Clip duration in seconds.
    pub duration_s: f64,
    /// Sample rate; defaults to the simulation grid rate.
    pub rate: f64,
    /// Additive white noise level relative to the clean signal.
    pub snr_db: f64,
    /// Per-sample amplitude is uniform in this range.
    pub amp_lo: f64,
    pub amp_hi: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            f_a_hz: 66_000.0,
            f_b_hz: 71_000.0,
            duration_s: 2e-3,
            rate: 1.0 / crate::sim::DEFAULT_DT,
            snr_db: 20.0,
            amp_lo: 0.7,
            amp_hi: 1.3,
        }
    }
}

/// Which half of the dataset an entry belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Test => write!(f, "test"),
        }
    }
}

/// Where a manifest entry's waveform comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum SampleSource {
    /// A WAV file on disk.
    File(PathBuf),
    /// Generated by the synthetic pipeline (`SYNTH` marker in the text form).
    Synthetic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub source: SampleSource,
    pub label: i8,
    pub split: Split,
}

/// Line-oriented dataset index: `<id>,<path-or-SYNTH>,<label>,<split>`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    /// Check the manifest invariants: unique ids, and both labels present
    /// in every split that appears.
    pub fn validate(&self) -> Result<(), AudioError> {
        let mut ids = HashSet::new();
        for e in &self.entries {
            if !ids.insert(e.id.as_str()) {
                return Err(AudioError::Manifest(format!("duplicate id {:?}", e.id)));
            }
            if e.label != 1 && e.label != -1 {
                return Err(AudioError::Manifest(format!(
                    "entry {:?} has label {}, want -1 or +1",
                    e.id, e.label
                )));
            }
        }
        for split in [Split::Train, Split::Test] {
            let labels: HashSet<i8> = self
                .entries
                .iter()
                .filter(|e| e.split == split)
                .map(|e| e.label)
                .collect();
            if !labels.is_empty() && labels.len() < 2 {
                return Err(AudioError::Manifest(format!(
                    "{split} split contains only label {:?}",
                    labels.iter().next().unwrap()
                )));
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            let src = match &e.source {
                SampleSource::File(p) => p.display().to_string(),
                SampleSource::Synthetic => "SYNTH".into(),
            };
            out.push_str(&format!("{},{},{:+},{}\n", e.id, src, e.label, e.split));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, AudioError> {
        let mut entries = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 4 {
                return Err(AudioError::Manifest(format!(
                    "line {}: expected 4 comma-separated fields, got {}",
                    ln + 1,
                    fields.len()
                )));
            }
            let label: i8 = fields[2].trim().parse().map_err(|_| {
                AudioError::Manifest(format!("line {}: bad label {:?}", ln + 1, fields[2]))
            })?;
            let split = match fields[3].trim() {
                "train" => Split::Train,
                "test" => Split::Test,
                other => {
                    return Err(AudioError::Manifest(format!(
                        "line {}: bad split {other:?}",
                        ln + 1
                    )))
                }
            };
            let source = if fields[1].trim() == "SYNTH" {
                SampleSource::Synthetic
            } else {
                SampleSource::File(PathBuf::from(fields[1].trim()))
            };
            entries.push(ManifestEntry {
                id: fields[0].trim().to_string(),
                source,
                label,
                split,
            });
        }
        Ok(Self { entries })
    }
}

/// Generate a synthetic dataset: `n_train`/`n_test` clips per class with
/// deterministic content for a given seed.
///
/// Spectral task: each clip is one Gaussian-windowed tone (window sigma =
/// duration/6, centered), frequency `f_a` for class +1 and `f_b` for
/// class -1. Temporal task: each clip is two Gaussian-windowed tone
/// segments of half duration each; class +1 plays `f_a` then `f_b`,
/// class -1 the reverse, so the class-averaged spectra coincide and only
/// the ordering carries information. Every clip gets one amplitude drawn
/// uniformly from the configured range, an independent phase per tone
/// segment, and white noise at the configured SNR.
pub fn synth_dataset(
    kind: SynthKind,
    n_train: usize,
    n_test: usize,
    seed: u64,
    cfg: &SynthConfig,
) -> (DatasetManifest, Vec<AudioSample>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();
    let mut samples = Vec::new();
    let kind_name = match kind {
        SynthKind::Spectral => "spectral",
        SynthKind::Temporal => "temporal",
    };
    for (split, count) in [(Split::Train, n_train), (Split::Test, n_test)] {
        for &label in &[1i8, -1i8] {
            let class_name = if label == 1 { "pos" } else { "neg" };
            for idx in 0..count {
                let id = format!("{kind_name}-{split}-{class_name}-{idx:04}");
                let clip = synth_clip(kind, label, cfg, &mut rng);
                entries.push(ManifestEntry {
                    id: id.clone(),
                    source: SampleSource::Synthetic,
                    label,
                    split,
                });
                samples.push(AudioSample {
                    id,
                    label,
                    rate: cfg.rate,
                    samples: clip,
                });
            }
        }
    }
    (DatasetManifest { entries }, samples)
}

fn synth_clip(kind: SynthKind, label: i8, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = (cfg.duration_s * cfg.rate).round() as usize;
    let dt = 1.0 / cfg.rate;
    let amp = rng.random_range(cfg.amp_lo..=cfg.amp_hi);
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut clean = vec![0.0f64; n];
    match kind {
        SynthKind::Spectral => {
            let f = if label == 1 { cfg.f_a_hz } else { cfg.f_b_hz };
            let phase = rng.random_range(0.0..two_pi);
            let center = 0.5 * cfg.duration_s;
            let sigma = cfg.duration_s / 6.0;
            for (k, c) in clean.iter_mut().enumerate() {
                let t = k as f64 * dt;
                let u = (t - center) / sigma;
                *c = amp * (-0.5 * u * u).exp() * (two_pi * f * t + phase).sin();
            }
        }
        SynthKind::Temporal => {
            let (f1, f2) = if label == 1 {
                (cfg.f_a_hz, cfg.f_b_hz)
            } else {
                (cfg.f_b_hz, cfg.f_a_hz)
            };
            let phase1 = rng.random_range(0.0..two_pi);
            let phase2 = rng.random_range(0.0..two_pi);
            let seg = 0.5 * cfg.duration_s;
            let sigma = seg / 6.0;
            for (k, c) in clean.iter_mut().enumerate() {
                let t = k as f64 * dt;
                let (f, phase, center) = if t < seg {
                    (f1, phase1, 0.5 * seg)
                } else {
                    (f2, phase2, 1.5 * seg)
                };
                let u = (t - center) / sigma;
                *c = amp * (-0.5 * u * u).exp() * (two_pi * f * t + phase).sin();
            }
        }
    }
    let p_clean = clean.iter().map(|&s| s * s).sum::<f64>() / n as f64;
    let noise_std = (p_clean / 10f64.powf(cfg.snr_db / 10.0)).sqrt();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    for c in &mut clean {
        *c += noise_std * normal.sample(rng);
    }
    clean
}

// ---------------------------------------------------------------------------
// Forcing cache

/// A processed forcing sequence ready for simulation, as cached on disk:
/// raw little-endian 64-bit floats plus a JSON sidecar.
#[derive(Debug, Clone, PartialEq)]
pub struct CachedSequence {
    pub rate: f64,
    pub label: i8,
    pub samples: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CacheSidecar {
    rate: f64,
    count: usize,
    label: i8,
}

/// Write `<id>.f64` (raw samples) and `<id>.json` (rate, count, label)
/// into `dir`.
pub fn save_cache(dir: &Path, id: &str, seq: &CachedSequence) -> Result<(), AudioError> {
    std::fs::create_dir_all(dir)?;
    let mut bytes = Vec::with_capacity(seq.samples.len() * 8);
    for &s in &seq.samples {
        bytes.extend_from_slice(&s.to_le_bytes());
    }
    std::fs::write(dir.join(format!("{id}.f64")), bytes)?;
    let sidecar = CacheSidecar {
        rate: seq.rate,
        count: seq.samples.len(),
        label: seq.label,
    };
    let json = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
    std::fs::write(dir.join(format!("{id}.json")), json)?;
    Ok(())
}

/// Read a sequence cached by [`save_cache`].
pub fn load_cache(dir: &Path, id: &str) -> Result<CachedSequence, AudioError> {
    let json = std::fs::read_to_string(dir.join(format!("{id}.json")))?;
    let sidecar: CacheSidecar = serde_json::from_str(&json)
        .map_err(|e| AudioError::Format(format!("cache sidecar for {id:?}: {e}")))?;
    let bytes = std::fs::read(dir.join(format!("{id}.f64")))?;
    if bytes.len() != sidecar.count * 8 {
        return Err(AudioError::Format(format!(
            "cache payload for {id:?} has {} bytes, sidecar expects {}",
            bytes.len(),
            sidecar.count * 8
        )));
    }
    let samples = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(CachedSequence {
        rate: sidecar.rate,
        label: sidecar.label,
        samples,
    })
}
