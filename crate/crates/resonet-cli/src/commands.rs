//! Subcommand implementations. Each command reads inputs, delegates the
//! numerics to the library, writes its artifacts atomically under the
//! configured output directory, and prints a one-line summary to stdout.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use resonet::audio::{
    bandpass, load_cache, load_wav, modulate_and_speedup, prepare, resample_to_grid,
    synth_dataset, AudioSample, DatasetManifest, SampleSource,
};
use resonet::model::{
    oracle_effective_model, EffectiveModel, Geometry, PencilLayout, PhysicsConfig,
};
use resonet::nonlinear::DeepNetwork;
use resonet::reduction::{band_misfit, run_membrane_benchmark, MembraneSpec};
use resonet::sim::{simulate, transfer_function, LinearLattice, SimConfig, DEFAULT_DT};
use resonet::surrogate::{fit, oracle_training_set, SurrogateModel};
use resonet::trainer::{
    batch_energies, deep_batch_energies, energies_csv, evaluate, evaluate_energies, gradcheck,
    histogram_csv, log_energy_histogram, loss_curves_csv, size_study, size_study_csv,
    train_deep, train_single_layer, Checkpoint, Dataset, DeepCheckpoint, DeepRestartSummary,
    DeepTrainReport, Evaluation, TrainReport, TrainSample,
};

use crate::artifacts::{log_run, run_hash, write_atomic, write_json};
use crate::config::RunConfig;

/// Fixed bin count of the emitted histogram CSVs.
const PLOT_HISTOGRAM_BINS: usize = 40;

// ---------------------------------------------------------------------------
// Shared plumbing

fn grid_rate_matches(rate: f64, dt: f64) -> bool {
    (rate * dt - 1.0).abs() < 1e-6
}

/// Load the train/test splits: from the prepared-clip cache when
/// `dataset.dir` is set, synthesized in memory otherwise.
fn build_dataset(cfg: &RunConfig) -> Result<Dataset> {
    if let Some(dir) = &cfg.dataset.dir {
        let manifest_path = dir.join("manifest.txt");
        let text = std::fs::read_to_string(&manifest_path)
            .with_context(|| format!("reading {}", manifest_path.display()))?;
        let manifest = DatasetManifest::from_text(&text)?;
        let mut clips = Vec::with_capacity(manifest.entries.len());
        for e in &manifest.entries {
            let seq = load_cache(dir, &e.id)
                .with_context(|| format!("loading cached clip {:?}", e.id))?;
            if !grid_rate_matches(seq.rate, cfg.training.dt) {
                bail!(
                    "cached clip {:?} is sampled at {} Hz but training.dt implies {} Hz; \
                     re-run `dataset prepare` for this grid",
                    e.id,
                    seq.rate,
                    1.0 / cfg.training.dt
                );
            }
            if seq.label != e.label {
                bail!(
                    "cached clip {:?} carries label {} but the manifest says {}",
                    e.id,
                    seq.label,
                    e.label
                );
            }
            clips.push(AudioSample {
                id: e.id.clone(),
                label: e.label,
                rate: seq.rate,
                samples: seq.samples,
            });
        }
        return Ok(Dataset::from_manifest(&manifest, &clips)?);
    }
    let kind = cfg.synth_kind()?;
    let synth = cfg.synth_config();
    let (manifest, clips) = synth_dataset(
        kind,
        cfg.dataset.train_per_class,
        cfg.dataset.test_per_class,
        cfg.dataset.seed,
        &synth,
    );
    Ok(Dataset::from_manifest(&manifest, &clips)?)
}

/// Load the fitted surrogate from `surrogate.path`, or generate oracle
/// pairs and fit one in process.
fn build_surrogate(cfg: &RunConfig, rows: usize, cols: usize) -> Result<SurrogateModel> {
    if let Some(path) = &cfg.surrogate.path {
        let bytes =
            std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        let model: SurrogateModel = serde_json::from_slice(&bytes)
            .with_context(|| format!("parsing surrogate {}", path.display()))?;
        if model.rows != rows || model.cols != cols {
            bail!(
                "surrogate {} was fitted for a {}x{} lattice, training wants {}x{}",
                path.display(),
                model.rows,
                model.cols,
                rows,
                cols
            );
        }
        return Ok(model);
    }
    let pairs = oracle_training_set(rows, cols, cfg.surrogate.samples, cfg.surrogate.seed, &cfg.physics);
    Ok(fit(&pairs, rows, cols)?)
}

fn mean_log_energy(energies: &[f64]) -> Result<f64> {
    let lns: Vec<f64> = energies
        .iter()
        .map(|e| e.ln())
        .filter(|l| l.is_finite())
        .collect();
    if lns.is_empty() {
        bail!("no sample produced a positive readout energy");
    }
    Ok(lns.iter().sum::<f64>() / lns.len() as f64)
}

/// Histogram CSV over a split's outcomes; header-only with a warning when
/// the split is empty.
fn outcome_histogram_csv(eval: &Evaluation) -> String {
    if eval.outcomes.is_empty() {
        eprintln!("resonet: warning: empty split, emitting header-only histogram");
        return String::from("bin,log_energy_lo,log_energy_hi,pos,neg\n");
    }
    let energies: Vec<f64> = eval.outcomes.iter().map(|o| o.energy).collect();
    let labels: Vec<i8> = eval.outcomes.iter().map(|o| o.label).collect();
    histogram_csv(&log_energy_histogram(&energies, &labels, PLOT_HISTOGRAM_BINS))
}

/// Transfer-function CSV on a fixed relative grid around the operating
/// band: 241 points spanning 80% to 120% of the on-site resonance.
fn transfer_csv(model: &EffectiveModel, physics: &PhysicsConfig) -> String {
    let freqs: Vec<f64> = (0..=240)
        .map(|i| physics.f0_hz * (0.80 + 0.40 * i as f64 / 240.0))
        .collect();
    let mut out = String::from("freq_hz,magnitude,singular\n");
    for p in transfer_function(model, &freqs) {
        let _ = writeln!(out, "{},{},{}", p.freq_hz, p.magnitude, p.singular);
    }
    out
}

fn deep_loss_curves_csv(restarts: &[DeepRestartSummary]) -> String {
    let mut out = String::from("restart,iteration,loss,error_rate\n");
    for r in restarts {
        for (i, (l, e)) in r.loss_curve.iter().zip(&r.error_curve).enumerate() {
            let _ = writeln!(out, "{},{},{},{}", r.index, i, l, e);
        }
    }
    out
}

fn surrogate_ref(cfg: &RunConfig) -> Option<String> {
    cfg.surrogate.path.as_ref().map(|p| p.display().to_string())
}

// ---------------------------------------------------------------------------
// dataset prepare

/// Mirror of the clip cache format: `<id>.f64` raw samples plus a JSON
/// sidecar, written atomically.
fn save_cache_atomic(dir: &Path, id: &str, rate: f64, label: i8, samples: &[f64]) -> Result<()> {
    #[derive(Serialize)]
    struct Sidecar {
        rate: f64,
        count: usize,
        label: i8,
    }
    let mut bytes = Vec::with_capacity(samples.len() * 8);
    for &s in samples {
        bytes.extend_from_slice(&s.to_le_bytes());
    }
    write_atomic(&dir.join(format!("{id}.f64")), &bytes)?;
    let sidecar = serde_json::to_string_pretty(&Sidecar {
        rate,
        count: samples.len(),
        label,
    })?;
    write_atomic(&dir.join(format!("{id}.json")), sidecar.as_bytes())
}

pub fn dataset_prepare(
    cfg: &RunConfig,
    raw: &[u8],
    out_dir: Option<PathBuf>,
    threads: usize,
) -> Result<()> {
    let hash = run_hash(raw);
    log_run("dataset prepare", &hash, cfg.dataset.seed, threads);
    let out = out_dir.unwrap_or_else(|| cfg.output.dir.join("dataset"));

    let (manifest, clips) = if let Some(manifest_path) = &cfg.dataset.manifest {
        ingest_wavs(cfg, manifest_path)?
    } else {
        let kind = cfg.synth_kind()?;
        synth_dataset(
            kind,
            cfg.dataset.train_per_class,
            cfg.dataset.test_per_class,
            cfg.dataset.seed,
            &cfg.synth_config(),
        )
    };

    for clip in &clips {
        save_cache_atomic(&out, &clip.id, clip.rate, clip.label, &clip.samples)?;
    }
    write_atomic(&out.join("manifest.txt"), manifest.to_text().as_bytes())?;
    println!(
        "prepared {} clips into {} (manifest.txt + per-clip caches)",
        clips.len(),
        out.display()
    );
    Ok(())
}

/// Run WAV files through the preparation pipeline: normalize, modulate
/// onto the carrier, speed up, resample onto the simulation grid,
/// band-pass.
fn ingest_wavs(
    cfg: &RunConfig,
    manifest_path: &Path,
) -> Result<(DatasetManifest, Vec<AudioSample>)> {
    let text = std::fs::read_to_string(manifest_path)
        .with_context(|| format!("reading {}", manifest_path.display()))?;
    let manifest = DatasetManifest::from_text(&text)?;
    let ingest = &cfg.dataset.ingest;
    let dt = cfg.training.dt;
    let mut clips = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        let SampleSource::File(path) = &e.source else {
            bail!(
                "manifest entry {:?} is synthetic; drop dataset.manifest to synthesize clips",
                e.id
            );
        };
        let (rate, samples) =
            load_wav(path).with_context(|| format!("loading {}", path.display()))?;
        let sample = AudioSample {
            id: e.id.clone(),
            label: e.label,
            rate,
            samples,
        };
        let prepared = prepare(&sample, ingest.duration_s, ingest.target_power);
        if prepared.silent {
            eprintln!("resonet: warning: clip {:?} is silent", e.id);
        }
        let modulated =
            modulate_and_speedup(&prepared.sample, ingest.carrier_hz, ingest.speed)?;
        let grid = resample_to_grid(&modulated, dt)?;
        let filtered = bandpass(&grid, 1.0 / dt, ingest.band_lo_hz, ingest.band_hi_hz)?;
        clips.push(AudioSample {
            id: e.id.clone(),
            label: e.label,
            rate: 1.0 / dt,
            samples: filtered,
        });
    }
    Ok((manifest, clips))
}

// ---------------------------------------------------------------------------
// surrogate gen / fit

pub fn surrogate_gen(
    cfg: &RunConfig,
    raw: &[u8],
    out: Option<PathBuf>,
    threads: usize,
) -> Result<()> {
    let hash = run_hash(raw);
    log_run("surrogate gen", &hash, cfg.surrogate.seed, threads);
    let out = out.unwrap_or_else(|| cfg.output.dir.join("surrogate_samples.json"));
    let (rows, cols) = (cfg.training.rows, cfg.training.cols);
    let pairs = oracle_training_set(rows, cols, cfg.surrogate.samples, cfg.surrogate.seed, &cfg.physics);
    write_json(&out, &pairs)?;
    println!(
        "generated {} oracle pairs for a {rows}x{cols} lattice -> {}",
        pairs.len(),
        out.display()
    );
    Ok(())
}

pub fn surrogate_fit(
    cfg: &RunConfig,
    raw: &[u8],
    samples: Option<PathBuf>,
    out: Option<PathBuf>,
    threads: usize,
) -> Result<()> {
    let hash = run_hash(raw);
    log_run("surrogate fit", &hash, cfg.surrogate.seed, threads);
    let samples_path =
        samples.unwrap_or_else(|| cfg.output.dir.join("surrogate_samples.json"));
    let out = out.unwrap_or_else(|| cfg.output.dir.join("surrogate.json"));
    let bytes = std::fs::read(&samples_path)
        .with_context(|| format!("reading {}", samples_path.display()))?;
    let pairs: Vec<(Geometry, EffectiveModel)> = serde_json::from_slice(&bytes)
        .with_context(|| format!("parsing {}", samples_path.display()))?;
    let (rows, cols) = (cfg.training.rows, cfg.training.cols);
    let model = fit(&pairs, rows, cols)?;
    write_json(&out, &model)?;
    println!(
        "fitted surrogate from {} pairs -> {}",
        pairs.len(),
        out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train

pub fn train(cfg: &RunConfig, raw: &[u8], threads: usize) -> Result<()> {
    let hash = run_hash(raw);
    log_run("train", &hash, cfg.training.seed, threads);
    let dataset = build_dataset(cfg)?;
    let surrogate = build_surrogate(cfg, cfg.training.rows, cfg.training.cols)?;
    let physics = cfg.physics.clone();
    let oracle = |g: &Geometry| oracle_effective_model(g, &physics);
    let dir = &cfg.output.dir;

    if let Some(deep) = &cfg.deep {
        let deep_cfg = cfg.deep_config(deep)?;
        let report = train_deep(&deep_cfg, &dataset, &surrogate, &cfg.physics, &oracle)?;
        write_json(&dir.join("report.json"), &report)?;
        let ckpt = DeepCheckpoint::from_report(&report, surrogate_ref(cfg));
        write_json(&dir.join("checkpoint.json"), &ckpt)?;
        if cfg.output.emit_plots {
            emit_deep_plots(cfg, &report)?;
        }
        println!(
            "train_accuracy={} test_accuracy={} best_restart={} report={}",
            report.train.accuracy,
            report.test.accuracy,
            report.best_restart,
            dir.join("report.json").display()
        );
    } else {
        let report =
            train_single_layer(&cfg.training, &dataset, &surrogate, &cfg.physics, &oracle)?;
        write_json(&dir.join("report.json"), &report)?;
        let ckpt = Checkpoint::from_report(&report, surrogate_ref(cfg));
        write_json(&dir.join("checkpoint.json"), &ckpt)?;
        if cfg.output.emit_plots {
            emit_plots(cfg, &report)?;
        }
        println!(
            "train_accuracy={} test_accuracy={} best_restart={} report={}",
            report.train.accuracy,
            report.test.accuracy,
            report.best_restart,
            dir.join("report.json").display()
        );
    }
    Ok(())
}

/// CSV plot bundle for a single-layer report: loss curves, per-sample
/// energies, class histograms, and the trained lattice's transfer
/// function.
pub fn emit_plots(cfg: &RunConfig, report: &TrainReport) -> Result<()> {
    let dir = &cfg.output.dir;
    write_atomic(
        &dir.join("loss_curves.csv"),
        loss_curves_csv(&report.restarts).as_bytes(),
    )?;
    write_atomic(
        &dir.join("train_energies.csv"),
        energies_csv(&report.train.outcomes).as_bytes(),
    )?;
    write_atomic(
        &dir.join("test_energies.csv"),
        energies_csv(&report.test.outcomes).as_bytes(),
    )?;
    write_atomic(
        &dir.join("train_histogram.csv"),
        outcome_histogram_csv(&report.train).as_bytes(),
    )?;
    write_atomic(
        &dir.join("test_histogram.csv"),
        outcome_histogram_csv(&report.test).as_bytes(),
    )?;
    let model = oracle_effective_model(&report.geometry, &cfg.physics);
    write_atomic(
        &dir.join("transfer_function.csv"),
        transfer_csv(&model, &cfg.physics).as_bytes(),
    )?;
    Ok(())
}

fn emit_deep_plots(cfg: &RunConfig, report: &DeepTrainReport) -> Result<()> {
    let dir = &cfg.output.dir;
    write_atomic(
        &dir.join("loss_curves.csv"),
        deep_loss_curves_csv(&report.restarts).as_bytes(),
    )?;
    write_atomic(
        &dir.join("train_energies.csv"),
        energies_csv(&report.train.outcomes).as_bytes(),
    )?;
    write_atomic(
        &dir.join("test_energies.csv"),
        energies_csv(&report.test.outcomes).as_bytes(),
    )?;
    write_atomic(
        &dir.join("train_histogram.csv"),
        outcome_histogram_csv(&report.train).as_bytes(),
    )?;
    write_atomic(
        &dir.join("test_histogram.csv"),
        outcome_histogram_csv(&report.test).as_bytes(),
    )?;
    for (name, g) in [
        ("transfer_function_a.csv", &report.geometry_a),
        ("transfer_function_b.csv", &report.geometry_b),
    ] {
        let model = oracle_effective_model(g, &cfg.physics);
        write_atomic(&dir.join(name), transfer_csv(&model, &cfg.physics).as_bytes())?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// eval

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum AnyCheckpoint {
    Deep(DeepCheckpoint),
    Single(Checkpoint),
}

pub fn eval(
    cfg: &RunConfig,
    raw: &[u8],
    checkpoint: &Path,
    split: SplitArg,
    out: Option<PathBuf>,
    threads: usize,
) -> Result<()> {
    let hash = run_hash(raw);
    log_run("eval", &hash, cfg.dataset.seed, threads);
    let bytes = std::fs::read(checkpoint)
        .with_context(|| format!("reading {}", checkpoint.display()))?;
    let ckpt: AnyCheckpoint = serde_json::from_slice(&bytes)
        .with_context(|| format!("parsing checkpoint {}", checkpoint.display()))?;
    let dataset = build_dataset(cfg)?;
    let samples = match split {
        SplitArg::Train => &dataset.train,
        SplitArg::Test => &dataset.test,
    };
    let sim = SimConfig::new(cfg.training.dt, cfg.training.n_steps);
    let evaluation = match &ckpt {
        AnyCheckpoint::Single(c) => {
            let model = oracle_effective_model(&c.geometry, &cfg.physics);
            evaluate(&model, samples, &sim, c.theta, c.polarity)?
        }
        AnyCheckpoint::Deep(c) => {
            let [ga, gb] = c.layers.as_slice() else {
                bail!(
                    "deep checkpoint {} must carry exactly two layers",
                    checkpoint.display()
                );
            };
            let net = DeepNetwork {
                lattice_a: oracle_effective_model(ga, &cfg.physics),
                lattice_b: oracle_effective_model(gb, &cfg.physics),
                element: c.element.clone(),
                kappa_a: c.kappa_a,
                kappa_b: c.kappa_b,
            };
            let energies = deep_batch_energies(&net, samples, &sim)?;
            evaluate_energies(samples, &energies, c.theta, c.polarity)?
        }
    };
    let text = serde_json::to_string_pretty(&evaluation)?;
    if let Some(path) = &out {
        write_atomic(path, format!("{text}\n").as_bytes())?;
    }
    println!(
        "split={} n={} accuracy={} tp={} tn={} fp={} fn={}",
        match split {
            SplitArg::Train => "train",
            SplitArg::Test => "test",
        },
        evaluation.outcomes.len(),
        evaluation.accuracy,
        evaluation.true_pos,
        evaluation.true_neg,
        evaluation.false_pos,
        evaluation.false_neg
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// gradcheck

#[allow(clippy::too_many_arguments)]
pub fn gradcheck_cmd(
    shape: (usize, usize),
    steps: usize,
    samples_per_class: usize,
    seed: u64,
    rel_step: f64,
    out: Option<PathBuf>,
    threads: usize,
) -> Result<()> {
    let arg_key = format!("gradcheck {shape:?} {steps} {samples_per_class} {seed} {rel_step}");
    log_run("gradcheck", &run_hash(arg_key.as_bytes()), seed, threads);
    let (rows, cols) = shape;
    let physics = PhysicsConfig::default();
    let geometry = Geometry::random(rows, cols, seed)?;
    let model = oracle_effective_model(&geometry, &physics);
    let layout = PencilLayout::lattice(rows, cols);

    let synth = resonet::audio::SynthConfig {
        duration_s: (steps as f64 * DEFAULT_DT).min(2e-3),
        ..resonet::audio::SynthConfig::default()
    };
    let (_, clips) = synth_dataset(
        resonet::audio::SynthKind::Spectral,
        samples_per_class,
        0,
        seed,
        &synth,
    );
    let samples: Vec<TrainSample> = clips.iter().map(TrainSample::from_audio).collect();
    let sim = SimConfig::new(DEFAULT_DT, steps);
    let energies = batch_energies(&model, &samples, &sim)?;
    let theta = mean_log_energy(&energies)?;

    let report = gradcheck(&model, &layout, &samples, theta, 1.0, &sim, rel_step)?;
    let text = serde_json::to_string_pretty(&report)?;
    if let Some(path) = &out {
        write_atomic(path, format!("{text}\n").as_bytes())?;
    } else {
        println!("{text}");
    }
    eprintln!(
        "resonet gradcheck: entries={} max_rel_err={} theta_rel_err={}",
        report.entries.len(),
        report.max_rel_err,
        report.theta_rel_err
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// reduce bench

pub fn reduce_bench(
    grid: usize,
    strips: usize,
    modes: usize,
    compare: usize,
    out: Option<PathBuf>,
    threads: usize,
) -> Result<()> {
    let arg_key = format!("reduce bench {grid} {strips} {modes} {compare}");
    log_run("reduce bench", &run_hash(arg_key.as_bytes()), 0, threads);
    let spec = MembraneSpec {
        rows: grid,
        cols: grid,
        n_strips: strips,
        ..MembraneSpec::default()
    };
    let report = run_membrane_benchmark(&spec, modes, compare)?;
    let mut csv = String::from("mode,full_hz,rubin_rel_err,craig_bampton_rel_err\n");
    for i in 0..report.full_hz.len() {
        let _ = writeln!(
            csv,
            "{},{},{},{}",
            i, report.full_hz[i], report.rubin_rel_err[i], report.craig_bampton_rel_err[i]
        );
    }
    if let Some(path) = &out {
        write_atomic(path, csv.as_bytes())?;
    } else {
        print!("{csv}");
    }
    let max_rubin = report.rubin_rel_err.iter().cloned().fold(0.0, f64::max);
    let max_cb = report
        .craig_bampton_rel_err
        .iter()
        .cloned()
        .fold(0.0, f64::max);
    eprintln!(
        "resonet reduce bench: full_dim={} reduced_dim={} max_rubin_err={} max_craig_bampton_err={}",
        report.full_dim, report.reduced_dim, max_rubin, max_cb
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// bands misfit

pub fn bands_misfit_cmd(f7: [f64; 4], f8: [f64; 4], f9: [f64; 4]) -> Result<()> {
    let misfit = band_misfit(&f7, &f8, &f9)?;
    println!("{}", serde_json::to_string_pretty(&misfit)?);
    Ok(())
}

// ---------------------------------------------------------------------------
// size study

pub fn size_study_cmd(
    cfg: &RunConfig,
    raw: &[u8],
    sizes: &[(usize, usize)],
    out: Option<PathBuf>,
    threads: usize,
) -> Result<()> {
    let hash = run_hash(raw);
    log_run("size-study", &hash, cfg.training.seed, threads);
    if sizes.is_empty() {
        bail!("size-study needs at least one lattice size");
    }
    let dataset = build_dataset(cfg)?;
    let physics = cfg.physics.clone();
    let oracle = |g: &Geometry| oracle_effective_model(g, &physics);
    let surrogates: Vec<SurrogateModel> = sizes
        .iter()
        .enumerate()
        .map(|(i, &(r, c))| {
            let pairs = oracle_training_set(
                r,
                c,
                cfg.surrogate.samples,
                cfg.surrogate.seed.wrapping_add(i as u64),
                &cfg.physics,
            );
            Ok(fit(&pairs, r, c)?)
        })
        .collect::<Result<_>>()?;
    let cases: Vec<(usize, usize, &SurrogateModel)> = sizes
        .iter()
        .zip(&surrogates)
        .map(|(&(r, c), s)| (r, c, s))
        .collect();
    let rows = size_study(&cfg.training, &cases, &dataset, &cfg.physics, &oracle)?;
    let csv = size_study_csv(&rows);
    let path = out.unwrap_or_else(|| cfg.output.dir.join("size_study.csv"));
    write_atomic(&path, csv.as_bytes())?;
    print!("{csv}");
    Ok(())
}

// ---------------------------------------------------------------------------
// simulate

pub enum GeometrySource {
    Checkpoint(PathBuf),
    Random(u64),
    Flat,
}

#[allow(clippy::too_many_arguments)]
pub fn simulate_cmd(
    cfg: &RunConfig,
    raw: &[u8],
    source: GeometrySource,
    sine_hz: Option<f64>,
    amp: f64,
    steps: Option<usize>,
    out: Option<PathBuf>,
    threads: usize,
) -> Result<()> {
    let hash = run_hash(raw);
    log_run("simulate", &hash, cfg.training.seed, threads);
    let (rows, cols) = (cfg.training.rows, cfg.training.cols);
    let geometry = match source {
        GeometrySource::Checkpoint(path) => {
            let bytes =
                std::fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
            let ckpt: Checkpoint = serde_json::from_slice(&bytes)
                .with_context(|| format!("parsing checkpoint {}", path.display()))?;
            ckpt.geometry
        }
        GeometrySource::Random(seed) => Geometry::random(rows, cols, seed)?,
        GeometrySource::Flat => Geometry::uniform(rows, cols, 0.5)?,
    };
    let model = oracle_effective_model(&geometry, &cfg.physics);
    let dt = cfg.training.dt;
    let n_steps = steps.unwrap_or(cfg.training.n_steps);
    let freq = sine_hz.unwrap_or(cfg.physics.f0_hz);
    let forcing: Vec<f64> = (0..n_steps)
        .map(|k| amp * (2.0 * std::f64::consts::PI * freq * dt * k as f64).sin())
        .collect();
    let lattice = LinearLattice::new(&model, forcing)?;
    let traj = simulate(&lattice, &SimConfig::new(dt, n_steps), lattice.output_index)?;

    let mut csv = String::from("t_s,x_out\n");
    for (i, &x) in traj.readout.iter().enumerate() {
        let _ = writeln!(csv, "{},{}", i as f64 * dt, x);
    }
    let path = out.unwrap_or_else(|| cfg.output.dir.join("trajectory.csv"));
    write_atomic(&path, csv.as_bytes())?;
    let energy = traj.energy();
    println!(
        "steps={n_steps} drive_hz={freq} energy={energy} log_energy={} trajectory={}",
        energy.ln(),
        path.display()
    );
    Ok(())
}

