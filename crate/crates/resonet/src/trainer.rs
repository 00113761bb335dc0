//! Training loop for lattice classifiers.
//!
//! The classifier is the lattice itself: a waveform drives the boundary,
//! the readout site's squared displacement integrates into an energy `E`,
//! and the label is the sign of `ln E - theta`. Training minimizes a
//! logistic loss on the log-energies over the lattice geometry and the
//! threshold `theta` jointly, with gradients flowing through the
//! surrogate's quadratic geometry-to-matrix map into the exact
//! reverse-mode simulation gradients.
//!
//! Design choices worth knowing before reading the code:
//!
//! * Geometry parameters are box-bounded by a logistic reparameterization
//!   (`p = lo + (hi - lo) * sigmoid(q)`), so the optimizer works in an
//!   unconstrained space and never needs projections.
//! * Each restart runs an independent BFGS descent from a random
//!   geometry; restarts run in parallel and the best is selected by
//!   training accuracy of the extracted (non-surrogate) model.
//! * Every `correction_period` iterations the surrogate is re-anchored to
//!   the extracted model at the current design point; the optimizer keeps
//!   its curvature memory and only re-evaluates the objective.
//! * The threshold is co-optimized as the last coordinate, then re-fit by
//!   exhaustive midpoint search; the report carries both values and the
//!   better of the two (on training accuracy) is used for final metrics.
//! * Normalization uses the count of included samples; a sample is
//!   excluded (with a warning in the report) only when its readout energy
//!   is not strictly positive, which for an integrated squared signal
//!   means the readout never moved at all.

use std::fmt::Write as _;
use std::sync::Arc;

use nalgebra::DVector;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adjoint::{
    functional_gradient, max_relative_error, CheckpointStrategy, LatticeAdjoint, PencilGradient,
};
use crate::audio::{AudioSample, DatasetManifest, Split};
use crate::model::{EffectiveModel, Geometry, GeometryError, PencilLayout, PhysicsConfig};
use crate::nonlinear::{deep_gradient, DeepGradient, DeepNetwork, NonlinearElement, NonlinearError};
use crate::opt::{backtracking_step, Bfgs, Objective, StepOutcome, WolfeConfig};
use crate::sim::{classify_log_energy, simulate, LinearLattice, SimConfig, SimError, DEFAULT_DT};
use crate::surrogate::{apply_correction, CorrectionState, SurrogateError, SurrogateModel};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("dataset split is empty")]
    EmptySplit,
    #[error("threshold fitting needs both classes present")]
    SingleClass,
    #[error("every sample was excluded: no readout energy was positive")]
    AllExcluded,
    #[error("all {count} restarts failed; first failure: {first}")]
    AllRestartsFailed { count: usize, first: String },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Surrogate(#[from] SurrogateError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Nonlinear(#[from] NonlinearError),
}

/// The reference extractor: maps a geometry to the effective model that
/// final metrics (and periodic surrogate corrections) are computed from.
pub type OracleFn<'o> = dyn Fn(&Geometry) -> EffectiveModel + Sync + 'o;

// ---------------------------------------------------------------------------
// Samples and datasets

/// One labeled forcing signal on the simulation grid. The waveform is
/// shared, not copied, across restarts and worker threads.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub id: String,
    /// Class label, +1 or -1.
    pub label: i8,
    pub forcing: Arc<Vec<f64>>,
}

impl TrainSample {
    pub fn new(id: impl Into<String>, label: i8, forcing: Vec<f64>) -> Self {
        Self {
            id: id.into(),
            label,
            forcing: Arc::new(forcing),
        }
    }

    /// Adopt a prepared audio clip as a forcing signal. The clip must
    /// already be on the simulation grid.
    pub fn from_audio(sample: &AudioSample) -> Self {
        Self::new(sample.id.clone(), sample.label, sample.samples.clone())
    }
}

/// Train and test splits.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub train: Vec<TrainSample>,
    pub test: Vec<TrainSample>,
}

impl Dataset {
    /// Split prepared clips by the manifest. Entry `i` must describe
    /// clip `i`.
    pub fn from_manifest(
        manifest: &DatasetManifest,
        samples: &[AudioSample],
    ) -> Result<Self, TrainError> {
        if manifest.entries.len() != samples.len() {
            return Err(TrainError::Config(format!(
                "manifest has {} entries but {} clips were provided",
                manifest.entries.len(),
                samples.len()
            )));
        }
        let mut out = Dataset::default();
        for (entry, sample) in manifest.entries.iter().zip(samples) {
            if entry.id != sample.id {
                return Err(TrainError::Config(format!(
                    "manifest entry '{}' does not match clip '{}'",
                    entry.id, sample.id
                )));
            }
            let t = TrainSample::from_audio(sample);
            match entry.split {
                Split::Train => out.train.push(t),
                Split::Test => out.test.push(t),
            }
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// Loss

/// Batch logistic loss on log-energies and its exact partials.
#[derive(Debug, Clone, PartialEq)]
pub struct LossEval {
    /// Mean per-sample loss over included samples.
    pub loss: f64,
    /// `d loss / d E_s`, zero for excluded samples.
    pub d_energy: Vec<f64>,
    /// `d loss / d theta`.
    pub d_theta: f64,
    /// Indices of samples excluded for nonpositive energy.
    pub excluded: Vec<usize>,
}

fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

fn softplus(u: f64) -> f64 {
    u.max(0.0) + (-u.abs()).exp().ln_1p()
}

fn logit(u: f64) -> f64 {
    (u / (1.0 - u)).ln()
}

/// Per-sample loss term and partials, before the 1/S normalization:
/// `(loss_s, d loss_s / dE, d loss_s / d theta)`, or `None` when the
/// sample is excluded for nonpositive energy.
fn sample_terms(energy: f64, label: i8, theta: f64, scale: f64) -> Option<(f64, f64, f64)> {
    if !(energy > 0.0) {
        return None;
    }
    let y = label as f64;
    let z = y * scale * (energy.ln() - theta);
    let sig = sigmoid(-z);
    Some((softplus(-z), -sig * y * scale / energy, sig * y * scale))
}

fn check_labels(labels: &[i8]) -> Result<(), TrainError> {
    if labels.iter().any(|&l| l != 1 && l != -1) {
        return Err(TrainError::Config("labels must be +1 or -1".into()));
    }
    Ok(())
}

/// Mean logistic loss `1/S sum_s ln(1 + exp(-y_s scale (ln E_s - theta)))`
/// over the included samples, with exact partials with respect to every
/// energy and the threshold. Samples with nonpositive energy are excluded
/// and reported; `S` is the included count.
pub fn sigmoidal_loss(
    energies: &[f64],
    labels: &[i8],
    theta: f64,
    scale: f64,
) -> Result<LossEval, TrainError> {
    if energies.len() != labels.len() {
        return Err(TrainError::Config(format!(
            "{} energies vs {} labels",
            energies.len(),
            labels.len()
        )));
    }
    if energies.is_empty() {
        return Err(TrainError::EmptySplit);
    }
    check_labels(labels)?;
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(TrainError::Config(format!("loss scale {scale} must be positive")));
    }
    if !theta.is_finite() {
        return Err(TrainError::Config(format!("threshold {theta} must be finite")));
    }
    if energies.iter().any(|e| !e.is_finite()) {
        return Err(TrainError::Config("non-finite readout energy".into()));
    }

    let mut loss = 0.0;
    let mut d_theta = 0.0;
    let mut d_energy = vec![0.0; energies.len()];
    let mut excluded = Vec::new();
    for (i, (&e, &y)) in energies.iter().zip(labels).enumerate() {
        match sample_terms(e, y, theta, scale) {
            Some((l, de, dt)) => {
                loss += l;
                d_energy[i] = de;
                d_theta += dt;
            }
            None => excluded.push(i),
        }
    }
    let s = (energies.len() - excluded.len()) as f64;
    if s == 0.0 {
        return Err(TrainError::AllExcluded);
    }
    loss /= s;
    d_theta /= s;
    for de in &mut d_energy {
        *de /= s;
    }
    Ok(LossEval {
        loss,
        d_energy,
        d_theta,
        excluded,
    })
}

// ---------------------------------------------------------------------------
// Threshold fitting and evaluation

/// A fitted decision rule: predict `polarity * sign(ln E - theta)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdFit {
    pub theta: f64,
    /// +1 for "high energy means positive class", -1 for the inverse.
    pub polarity: i8,
    /// Training accuracy achieved by this rule.
    pub accuracy: f64,
}

fn predicted_label(energy: f64, theta: f64, polarity: i8) -> i8 {
    let c = classify_log_energy(energy, theta);
    if polarity >= 0 {
        c
    } else {
        -c
    }
}

fn threshold_accuracy(energies: &[f64], labels: &[i8], theta: f64, polarity: i8) -> f64 {
    let correct = energies
        .iter()
        .zip(labels)
        .filter(|&(&e, &y)| predicted_label(e, theta, polarity) == y)
        .count();
    correct as f64 / energies.len() as f64
}

/// Exhaustive threshold search: accuracy is piecewise constant in `theta`
/// with breakpoints at the sample log-energies, so scanning the midpoints
/// of adjacent distinct values visits every achievable rule. Ties go to
/// the lowest `theta`, then to positive polarity. Errors when only one
/// class is present.
pub fn fit_threshold(energies: &[f64], labels: &[i8]) -> Result<ThresholdFit, TrainError> {
    if energies.len() != labels.len() {
        return Err(TrainError::Config(format!(
            "{} energies vs {} labels",
            energies.len(),
            labels.len()
        )));
    }
    if energies.is_empty() {
        return Err(TrainError::EmptySplit);
    }
    check_labels(labels)?;
    if labels.iter().all(|&y| y == labels[0]) {
        return Err(TrainError::SingleClass);
    }

    let mut lns: Vec<f64> = energies
        .iter()
        .map(|e| e.ln())
        .filter(|l| l.is_finite())
        .collect();
    lns.sort_by(f64::total_cmp);
    lns.dedup();
    let mut candidates: Vec<f64> = lns.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
    if candidates.is_empty() {
        // Degenerate spread: a single distinct value (or none finite).
        // The threshold sits on it and only the polarity matters.
        candidates.push(lns.first().copied().unwrap_or(0.0));
    }

    let mut best = ThresholdFit {
        theta: candidates[0],
        polarity: 1,
        accuracy: -1.0,
    };
    for &theta in &candidates {
        for &polarity in &[1i8, -1] {
            let accuracy = threshold_accuracy(energies, labels, theta, polarity);
            if accuracy > best.accuracy {
                best = ThresholdFit {
                    theta,
                    polarity,
                    accuracy,
                };
            }
        }
    }
    Ok(best)
}

/// Per-sample classification record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleOutcome {
    pub id: String,
    pub label: i8,
    pub energy: f64,
    pub predicted: i8,
}

/// Class-resolved histogram of log-energies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyHistogram {
    /// Lower edge of the first bin (log-energy).
    pub lo: f64,
    /// Upper edge of the last bin.
    pub hi: f64,
    pub pos: Vec<usize>,
    pub neg: Vec<usize>,
    /// Samples with nonpositive energy, outside any bin.
    pub nonpositive: usize,
}

/// Histogram the finite log-energies into `bins` equal-width bins spanning
/// the observed range, split by class.
pub fn log_energy_histogram(energies: &[f64], labels: &[i8], bins: usize) -> EnergyHistogram {
    let bins = bins.max(1);
    let lns: Vec<f64> = energies
        .iter()
        .map(|e| e.ln())
        .filter(|l| l.is_finite())
        .collect();
    let (lo, hi) = lns.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
        (a.min(v), b.max(v))
    });
    let (lo, hi) = if lns.is_empty() { (0.0, 0.0) } else { (lo, hi) };
    let width = (hi - lo) / bins as f64;
    let mut pos = vec![0usize; bins];
    let mut neg = vec![0usize; bins];
    let mut nonpositive = 0usize;
    for (&e, &y) in energies.iter().zip(labels) {
        let ln = e.ln();
        if !ln.is_finite() {
            nonpositive += 1;
            continue;
        }
        let bin = if width > 0.0 {
            (((ln - lo) / width) as usize).min(bins - 1)
        } else {
            0
        };
        if y == 1 {
            pos[bin] += 1;
        } else {
            neg[bin] += 1;
        }
    }
    EnergyHistogram {
        lo,
        hi,
        pos,
        neg,
        nonpositive,
    }
}

/// Classification metrics of one split under a fixed decision rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub theta: f64,
    pub polarity: i8,
    pub accuracy: f64,
    pub true_pos: usize,
    pub true_neg: usize,
    pub false_pos: usize,
    pub false_neg: usize,
    pub outcomes: Vec<SampleOutcome>,
    pub histogram: EnergyHistogram,
}

const HISTOGRAM_BINS: usize = 16;

/// Score precomputed energies against labels under a fixed rule.
pub fn evaluate_energies(
    samples: &[TrainSample],
    energies: &[f64],
    theta: f64,
    polarity: i8,
) -> Result<Evaluation, TrainError> {
    if samples.is_empty() {
        return Err(TrainError::EmptySplit);
    }
    if samples.len() != energies.len() {
        return Err(TrainError::Config(format!(
            "{} samples vs {} energies",
            samples.len(),
            energies.len()
        )));
    }
    if polarity != 1 && polarity != -1 {
        return Err(TrainError::Config(format!("polarity {polarity} must be +1 or -1")));
    }
    let labels: Vec<i8> = samples.iter().map(|s| s.label).collect();
    check_labels(&labels)?;

    let mut outcomes = Vec::with_capacity(samples.len());
    let (mut tp, mut tn, mut fp, mut fne) = (0usize, 0usize, 0usize, 0usize);
    for (s, &e) in samples.iter().zip(energies) {
        let predicted = predicted_label(e, theta, polarity);
        match (predicted, s.label) {
            (1, 1) => tp += 1,
            (-1, -1) => tn += 1,
            (1, -1) => fp += 1,
            _ => fne += 1,
        }
        outcomes.push(SampleOutcome {
            id: s.id.clone(),
            label: s.label,
            energy: e,
            predicted,
        });
    }
    Ok(Evaluation {
        theta,
        polarity,
        accuracy: (tp + tn) as f64 / samples.len() as f64,
        true_pos: tp,
        true_neg: tn,
        false_pos: fp,
        false_neg: fne,
        outcomes,
        histogram: log_energy_histogram(energies, &labels, HISTOGRAM_BINS),
    })
}

/// Forward-simulate every sample through one model, in parallel.
pub fn batch_energies(
    model: &EffectiveModel,
    samples: &[TrainSample],
    sim: &SimConfig,
) -> Result<Vec<f64>, TrainError> {
    samples
        .par_iter()
        .map(|s| {
            let lattice = LinearLattice::new(model, s.forcing.as_ref().clone())?;
            let traj = simulate(&lattice, sim, lattice.output_index)?;
            Ok(traj.energy())
        })
        .collect()
}

/// Simulate a split through one model and score it under a fixed rule.
pub fn evaluate(
    model: &EffectiveModel,
    samples: &[TrainSample],
    sim: &SimConfig,
    theta: f64,
    polarity: i8,
) -> Result<Evaluation, TrainError> {
    if samples.is_empty() {
        return Err(TrainError::EmptySplit);
    }
    let energies = batch_energies(model, samples, sim)?;
    evaluate_energies(samples, &energies, theta, polarity)
}

// ---------------------------------------------------------------------------
// Training configuration and report

/// Single-layer training parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub rows: usize,
    pub cols: usize,
    /// Maximum BFGS iterations per restart.
    pub iterations: usize,
    /// Independent random initializations.
    pub restarts: usize,
    /// Re-anchor the surrogate every this many iterations; 0 disables.
    pub correction_period: usize,
    /// Logistic sharpness on the log-energy margin.
    pub loss_scale: f64,
    /// Geometry box bounds, enforced by reparameterization.
    pub bound_lo: f64,
    pub bound_hi: f64,
    pub seed: u64,
    /// Simulation step and window for every sample.
    pub dt: f64,
    pub n_steps: usize,
    /// Stop a restart when the gradient max-norm falls below this.
    pub grad_tol: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            rows: 7,
            cols: 7,
            iterations: 300,
            restarts: 15,
            correction_period: 30,
            loss_scale: 1.0,
            bound_lo: 0.05,
            bound_hi: 0.95,
            seed: 7,
            dt: DEFAULT_DT,
            n_steps: 6400,
            grad_tol: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |msg: String| Err(TrainError::Config(msg));
        if self.rows == 0 || self.cols == 0 {
            return fail(format!("lattice shape {}x{} is empty", self.rows, self.cols));
        }
        if self.iterations == 0 {
            return fail("iterations must be at least 1".into());
        }
        if self.restarts == 0 {
            return fail("restarts must be at least 1".into());
        }
        if !(self.loss_scale > 0.0) || !self.loss_scale.is_finite() {
            return fail(format!("loss scale {} must be positive", self.loss_scale));
        }
        if !(0.0 <= self.bound_lo && self.bound_lo < self.bound_hi && self.bound_hi <= 1.0) {
            return fail(format!(
                "bounds [{}, {}] must satisfy 0 <= lo < hi <= 1",
                self.bound_lo, self.bound_hi
            ));
        }
        if !(self.dt > 0.0) || self.n_steps == 0 {
            return fail(format!("simulation window {} x {} steps is empty", self.dt, self.n_steps));
        }
        if !(self.grad_tol >= 0.0) {
            return fail(format!("gradient tolerance {} must be nonnegative", self.grad_tol));
        }
        Ok(())
    }

    fn sim(&self) -> SimConfig {
        SimConfig::new(self.dt, self.n_steps)
    }
}

/// One restart's trajectory and outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestartSummary {
    pub index: usize,
    pub seed: u64,
    /// Accepted optimizer steps.
    pub iterations: usize,
    pub converged: bool,
    /// The line search found no acceptable step before the budget ran out.
    pub stalled: bool,
    /// Hard failure (bad starting point, degenerate prediction).
    pub error: Option<String>,
    pub theta: f64,
    pub final_loss: f64,
    /// Training accuracy of the extracted model at this restart's
    /// optimized threshold; the selection metric.
    pub train_accuracy: f64,
    /// Samples excluded at the last objective evaluation.
    pub excluded: usize,
    /// Indices into `loss_curve` recorded right after a surrogate
    /// correction re-anchored the objective (the loss may step there).
    pub corrections: Vec<usize>,
    /// Objective value at the start and after every accepted step and
    /// every correction.
    pub loss_curve: Vec<f64>,
    /// Training error rate alongside `loss_curve`.
    pub error_curve: Vec<f64>,
}

/// Everything a training run produces. Serialization is deterministic:
/// fixed field order, no timestamps, no maps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub version: u32,
    pub config: TrainConfig,
    pub restarts: Vec<RestartSummary>,
    pub best_restart: usize,
    pub geometry: Geometry,
    /// Threshold found by the optimizer (last coordinate of the search).
    pub theta_optimized: f64,
    /// Threshold re-fit by exhaustive midpoint search on the extracted
    /// model's training energies.
    pub theta_refit: f64,
    pub polarity: i8,
    /// Final metrics on the extracted model, using whichever threshold
    /// scored better on the training split.
    pub train: Evaluation,
    pub test: Evaluation,
    pub warnings: Vec<String>,
}

pub const REPORT_VERSION: u32 = 1;

// ---------------------------------------------------------------------------
// Single-layer objective

/// Shared per-sample gradient machinery: forward + reverse sweep for every
/// sample against one model, summed into a single normalized pencil
/// gradient. Returns the energies, the batch loss, and `d loss / d theta`.
fn batch_pencil_gradient(
    model: &EffectiveModel,
    layout: &PencilLayout,
    samples: &[TrainSample],
    theta: f64,
    scale: f64,
    sim: &SimConfig,
) -> Result<(Vec<f64>, PencilGradient, LossEval), TrainError> {
    let per_sample: Vec<(f64, PencilGradient)> = samples
        .par_iter()
        .map(|s| {
            let lattice = LinearLattice::new(model, s.forcing.as_ref().clone())?;
            let adjoint = LatticeAdjoint {
                field: &lattice,
                layout,
            };
            let mut grad = PencilGradient::zeros(layout);
            let label = s.label;
            // Seed with the unnormalized d loss_s / dE; the 1/S factor is
            // applied after the batch is reduced, because S (the included
            // count) is only known once every energy is in.
            let run = functional_gradient(
                &adjoint,
                sim,
                lattice.output_index,
                CheckpointStrategy::Dense,
                |e| sample_terms(e, label, theta, scale).map_or(0.0, |t| t.1),
                &mut grad,
            )?;
            Ok((run.energy, grad))
        })
        .collect::<Result<_, TrainError>>()?;

    let energies: Vec<f64> = per_sample.iter().map(|p| p.0).collect();
    let labels: Vec<i8> = samples.iter().map(|s| s.label).collect();
    let eval = sigmoidal_loss(&energies, &labels, theta, scale)?;
    let s_count = (energies.len() - eval.excluded.len()) as f64;

    let mut total = PencilGradient::zeros(layout);
    for (_, g) in &per_sample {
        total.k_diag += &g.k_diag;
        total.m_diag += &g.m_diag;
        for (acc, v) in total.k_pairs.iter_mut().zip(&g.k_pairs) {
            *acc += v;
        }
    }
    total.k_diag /= s_count;
    total.m_diag /= s_count;
    for v in &mut total.k_pairs {
        *v /= s_count;
    }
    Ok((energies, total, eval))
}

struct SingleLayerObjective<'a> {
    rows: usize,
    cols: usize,
    n_geo: usize,
    bound_lo: f64,
    bound_hi: f64,
    loss_scale: f64,
    physics: &'a PhysicsConfig,
    surrogate: &'a SurrogateModel,
    samples: &'a [TrainSample],
    sim: SimConfig,
    layout: &'a PencilLayout,
    correction: Option<CorrectionState>,
    /// Byproducts of the latest evaluation, for curves and warnings.
    last_energies: Vec<f64>,
    last_excluded: usize,
    last_error: Option<String>,
}

impl SingleLayerObjective<'_> {
    fn geometry(&self, x: &DVector<f64>) -> Result<Geometry, GeometryError> {
        let span = self.bound_hi - self.bound_lo;
        let p: Vec<f64> = x
            .iter()
            .take(self.n_geo)
            .map(|&q| self.bound_lo + span * sigmoid(q))
            .collect();
        Geometry::from_flat(self.rows, self.cols, &p)
    }

    fn eval_inner(&mut self, x: &DVector<f64>) -> Result<(f64, DVector<f64>), TrainError> {
        let theta = x[self.n_geo];
        let g = self.geometry(x)?;
        let model = self
            .surrogate
            .predict(&g, self.physics, self.correction.as_ref())?;
        let (energies, pencil, eval) = batch_pencil_gradient(
            &model,
            self.layout,
            self.samples,
            theta,
            self.loss_scale,
            &self.sim,
        )?;
        let geo_grad = self.surrogate.chain_gradient(&g, &pencil)?;
        let mut grad = DVector::zeros(x.len());
        let span = self.bound_hi - self.bound_lo;
        for i in 0..self.n_geo {
            let s = sigmoid(x[i]);
            grad[i] = geo_grad[i] * span * s * (1.0 - s);
        }
        grad[self.n_geo] = eval.d_theta;
        self.last_energies = energies;
        self.last_excluded = eval.excluded.len();
        Ok((eval.loss, grad))
    }

    fn error_rate(&self, theta: f64) -> f64 {
        let labels: Vec<i8> = self.samples.iter().map(|s| s.label).collect();
        1.0 - threshold_accuracy(&self.last_energies, &labels, theta, 1)
    }
}

impl Objective for SingleLayerObjective<'_> {
    fn eval(&mut self, x: &DVector<f64>) -> (f64, DVector<f64>) {
        match self.eval_inner(x) {
            Ok(r) => {
                self.last_error = None;
                r
            }
            Err(e) => {
                // An infinite value makes the line search back away from
                // whatever broke (degenerate mass, blowup) instead of
                // aborting the restart.
                self.last_error = Some(e.to_string());
                (f64::INFINITY, DVector::zeros(x.len()))
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Restart driver

struct TrainCtx<'a> {
    cfg: &'a TrainConfig,
    physics: &'a PhysicsConfig,
    surrogate: &'a SurrogateModel,
    oracle: &'a OracleFn<'a>,
    train: &'a [TrainSample],
    layout: &'a PencilLayout,
}

struct RestartCand {
    summary: RestartSummary,
    geometry: Option<Geometry>,
}

fn failed_restart(index: usize, seed: u64, message: String) -> RestartCand {
    RestartCand {
        summary: RestartSummary {
            index,
            seed,
            iterations: 0,
            converged: false,
            stalled: false,
            error: Some(message),
            theta: 0.0,
            final_loss: 0.0,
            train_accuracy: 0.0,
            excluded: 0,
            corrections: Vec::new(),
            loss_curve: Vec::new(),
            error_curve: Vec::new(),
        },
        geometry: None,
    }
}

/// Map a uniformly drawn geometry into the unconstrained search space.
/// Draws land in [0.05, 0.95]; rescale that range onto the configured box
/// and invert the logistic map.
fn initial_coords(g: &Geometry, n_geo: usize, theta0: f64) -> DVector<f64> {
    let mut x = DVector::zeros(n_geo + 1);
    for (i, &p) in g.flat().iter().enumerate() {
        let u = ((p - 0.05) / 0.9).clamp(1e-6, 1.0 - 1e-6);
        x[i] = logit(u);
    }
    x[n_geo] = theta0;
    x
}

fn mean_initial_log_energy(energies: &[f64]) -> Option<f64> {
    let lns: Vec<f64> = energies
        .iter()
        .map(|e| e.ln())
        .filter(|l| l.is_finite())
        .collect();
    if lns.is_empty() {
        None
    } else {
        Some(lns.iter().sum::<f64>() / lns.len() as f64)
    }
}

fn run_restart(ctx: &TrainCtx, index: usize, seed: u64) -> RestartCand {
    let cfg = ctx.cfg;
    let n_geo = ctx.layout.n_sites + ctx.layout.pairs.len();
    let sim = cfg.sim();

    let g0 = match Geometry::random(cfg.rows, cfg.cols, seed) {
        Ok(g) => g,
        Err(e) => return failed_restart(index, seed, e.to_string()),
    };
    let mut objective = SingleLayerObjective {
        rows: cfg.rows,
        cols: cfg.cols,
        n_geo,
        bound_lo: cfg.bound_lo,
        bound_hi: cfg.bound_hi,
        loss_scale: cfg.loss_scale,
        physics: ctx.physics,
        surrogate: ctx.surrogate,
        samples: ctx.train,
        sim: sim.clone(),
        layout: ctx.layout,
        correction: (cfg.correction_period > 0)
            .then(|| CorrectionState::new(cfg.rows * cfg.cols, cfg.correction_period)),
        last_energies: Vec::new(),
        last_excluded: 0,
        last_error: None,
    };

    // The threshold starts at the mean initial log-energy so the logistic
    // terms begin in their informative range rather than saturated.
    let theta0 = {
        let x_probe = initial_coords(&g0, n_geo, 0.0);
        let g_probe = match objective.geometry(&x_probe) {
            Ok(g) => g,
            Err(e) => return failed_restart(index, seed, e.to_string()),
        };
        let model = match objective
            .surrogate
            .predict(&g_probe, ctx.physics, objective.correction.as_ref())
        {
            Ok(m) => m,
            Err(e) => return failed_restart(index, seed, e.to_string()),
        };
        let energies = match batch_energies(&model, ctx.train, &sim) {
            Ok(e) => e,
            Err(e) => return failed_restart(index, seed, e.to_string()),
        };
        match mean_initial_log_energy(&energies) {
            Some(t) => t,
            None => {
                return failed_restart(
                    index,
                    seed,
                    "no sample produced a positive readout energy at the initial geometry".into(),
                )
            }
        }
    };

    let x0 = initial_coords(&g0, n_geo, theta0);
    let mut bfgs = match Bfgs::new(&mut objective, x0) {
        Ok(b) => b,
        Err(e) => {
            let detail = objective
                .last_error
                .clone()
                .unwrap_or_else(|| e.to_string());
            return failed_restart(index, seed, detail);
        }
    };

    let wolfe = WolfeConfig::default();
    let mut loss_curve = vec![bfgs.f()];
    let mut error_curve = vec![objective.error_rate(bfgs.x()[n_geo])];
    let mut corrections = Vec::new();
    let mut iterations = 0usize;
    let mut converged = false;
    let mut stalled = false;

    for i in 0..cfg.iterations {
        if objective
            .correction
            .as_ref()
            .is_some_and(|c| c.due(i))
        {
            let g_now = match objective.geometry(bfgs.x()) {
                Ok(g) => g,
                Err(e) => return failed_restart(index, seed, e.to_string()),
            };
            let extracted = (ctx.oracle)(&g_now);
            let state = objective.correction.as_mut().expect("checked above");
            if let Err(e) =
                apply_correction(state, ctx.surrogate, &g_now, ctx.physics, &extracted)
            {
                return failed_restart(index, seed, e.to_string());
            }
            bfgs.refresh(&mut objective);
            corrections.push(loss_curve.len());
            loss_curve.push(bfgs.f());
            error_curve.push(objective.error_rate(bfgs.x()[n_geo]));
        }
        match bfgs.step(&mut objective, &wolfe, cfg.grad_tol) {
            StepOutcome::Accepted { f, .. } => {
                iterations += 1;
                loss_curve.push(f);
                error_curve.push(objective.error_rate(bfgs.x()[n_geo]));
            }
            StepOutcome::Converged => {
                converged = true;
                break;
            }
            StepOutcome::LineSearchFailed => {
                stalled = true;
                break;
            }
        }
    }

    let theta = bfgs.x()[n_geo];
    let geometry = match objective.geometry(bfgs.x()) {
        Ok(g) => g,
        Err(e) => return failed_restart(index, seed, e.to_string()),
    };

    // Selection metric: training accuracy of the extracted model at this
    // restart's own threshold, so restarts are compared on the model that
    // final metrics will use, not on their private surrogate state.
    let extracted = (ctx.oracle)(&geometry);
    let train_accuracy = match batch_energies(&extracted, ctx.train, &sim) {
        Ok(energies) => {
            let labels: Vec<i8> = ctx.train.iter().map(|s| s.label).collect();
            threshold_accuracy(&energies, &labels, theta, 1)
        }
        Err(e) => return failed_restart(index, seed, e.to_string()),
    };

    RestartCand {
        summary: RestartSummary {
            index,
            seed,
            iterations,
            converged,
            stalled,
            error: None,
            theta,
            final_loss: bfgs.f(),
            train_accuracy,
            excluded: objective.last_excluded,
            corrections,
            loss_curve,
            error_curve,
        },
        geometry: Some(geometry),
    }
}

fn check_dataset(dataset: &Dataset) -> Result<(), TrainError> {
    if dataset.train.is_empty() || dataset.test.is_empty() {
        return Err(TrainError::EmptySplit);
    }
    let labels: Vec<i8> = dataset.train.iter().map(|s| s.label).collect();
    check_labels(&labels)?;
    if labels.iter().all(|&y| y == labels[0]) {
        return Err(TrainError::SingleClass);
    }
    let labels: Vec<i8> = dataset.test.iter().map(|s| s.label).collect();
    check_labels(&labels)
}

/// Train a single lattice: per restart, BFGS over (geometry, threshold)
/// through the surrogate from a random initialization, with periodic
/// re-anchoring to the extracted model. The best restart by training
/// accuracy wins; final metrics come from the extracted model with the
/// threshold re-fit (keeping the optimizer's threshold when it scores
/// better on the training split).
pub fn train_single_layer(
    cfg: &TrainConfig,
    dataset: &Dataset,
    surrogate: &SurrogateModel,
    physics: &PhysicsConfig,
    oracle: &OracleFn<'_>,
) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    check_dataset(dataset)?;
    let layout = PencilLayout::lattice(cfg.rows, cfg.cols);

    let mut master = ChaCha8Rng::seed_from_u64(cfg.seed);
    let seeds: Vec<u64> = (0..cfg.restarts).map(|_| master.random()).collect();

    let ctx = TrainCtx {
        cfg,
        physics,
        surrogate,
        oracle,
        train: &dataset.train,
        layout: &layout,
    };
    let candidates: Vec<RestartCand> = seeds
        .par_iter()
        .enumerate()
        .map(|(i, &seed)| run_restart(&ctx, i, seed))
        .collect();

    let best = candidates
        .iter()
        .filter(|c| c.geometry.is_some())
        .max_by(|a, b| {
            a.summary
                .train_accuracy
                .partial_cmp(&b.summary.train_accuracy)
                .expect("accuracies are finite")
                // On equal accuracy keep the lowest index: max_by keeps
                // the later of equal elements, so order by reversed index.
                .then(b.summary.index.cmp(&a.summary.index))
        });
    let Some(best) = best else {
        let first = candidates
            .first()
            .and_then(|c| c.summary.error.clone())
            .unwrap_or_else(|| "no restarts ran".into());
        return Err(TrainError::AllRestartsFailed {
            count: candidates.len(),
            first,
        });
    };
    let best_restart = best.summary.index;
    let geometry = best.geometry.clone().expect("filtered on Some");
    let theta_optimized = best.summary.theta;

    let sim = cfg.sim();
    let extracted = oracle(&geometry);
    let train_energies = batch_energies(&extracted, &dataset.train, &sim)?;
    let train_labels: Vec<i8> = dataset.train.iter().map(|s| s.label).collect();
    let fit = fit_threshold(&train_energies, &train_labels)?;
    // Keep whichever rule wins on the training split; the refit can only
    // see midpoint thresholds, and the optimizer's theta may sit outside
    // the sampled range.
    let optimized_accuracy = threshold_accuracy(&train_energies, &train_labels, theta_optimized, 1);
    let (theta_final, polarity) = if fit.accuracy >= optimized_accuracy {
        (fit.theta, fit.polarity)
    } else {
        (theta_optimized, 1)
    };

    let train_eval = evaluate_energies(&dataset.train, &train_energies, theta_final, polarity)?;
    let test_eval = evaluate(&extracted, &dataset.test, &sim, theta_final, polarity)?;

    let mut warnings = Vec::new();
    for c in &candidates {
        if let Some(err) = &c.summary.error {
            warnings.push(format!("restart {} failed: {err}", c.summary.index));
        }
    }
    for (s, &e) in dataset.train.iter().zip(&train_energies) {
        if !(e > 0.0) {
            warnings.push(format!(
                "train sample '{}' produced no readout energy and was excluded from the loss",
                s.id
            ));
        }
    }

    Ok(TrainReport {
        version: REPORT_VERSION,
        config: cfg.clone(),
        restarts: candidates.into_iter().map(|c| c.summary).collect(),
        best_restart,
        geometry,
        theta_optimized,
        theta_refit: fit.theta,
        polarity,
        train: train_eval,
        test: test_eval,
        warnings,
    })
}

// ---------------------------------------------------------------------------
// Gradient check

/// One compared parameter: the reverse-mode partial, the central
/// finite-difference probe, and their relative disagreement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckEntry {
    pub param: String,
    pub adjoint: f64,
    pub fd: f64,
    pub rel_err: f64,
}

/// Agreement between the reverse-mode batch loss gradient and a central
/// finite-difference probe of the same loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    /// Every structural matrix entry (K diagonal, K pairs, M diagonal)
    /// followed by the threshold.
    pub entries: Vec<GradcheckEntry>,
    /// Largest relative error over the matrix entries.
    pub max_rel_err: f64,
    pub theta_rel_err: f64,
}

impl GradcheckReport {
    /// Largest relative error over everything compared, threshold included.
    pub fn overall_max(&self) -> f64 {
        self.max_rel_err.max(self.theta_rel_err)
    }
}

fn batch_loss(
    model: &EffectiveModel,
    samples: &[TrainSample],
    theta: f64,
    scale: f64,
    sim: &SimConfig,
) -> Result<f64, TrainError> {
    let energies = batch_energies(model, samples, sim)?;
    let labels: Vec<i8> = samples.iter().map(|s| s.label).collect();
    Ok(sigmoidal_loss(&energies, &labels, theta, scale)?.loss)
}

/// Compare the adjoint batch-loss gradient against central finite
/// differences over every structural matrix entry and the threshold.
/// Mass bumps keep the velocity-coupling operator fixed, mirroring the
/// model family the adjoint differentiates.
pub fn gradcheck(
    model: &EffectiveModel,
    layout: &PencilLayout,
    samples: &[TrainSample],
    theta: f64,
    scale: f64,
    sim: &SimConfig,
    relative_step: f64,
) -> Result<GradcheckReport, TrainError> {
    if samples.is_empty() {
        return Err(TrainError::EmptySplit);
    }
    let (_, pencil, eval) =
        batch_pencil_gradient(model, layout, samples, theta, scale, sim)?;

    let k_scale: f64 = model.stiffness.diagonal().amax();
    let m_scale: f64 = model.mass.diagonal().amax();
    // G = M^-1 B, held fixed while the mass moves.
    let g_op = {
        let chol = model
            .mass
            .clone()
            .cholesky()
            .ok_or_else(|| TrainError::Config("mass matrix is not positive definite".into()))?;
        chol.solve(&model.damping)
    };
    let mut fd = PencilGradient::zeros(layout);
    let n = layout.n_sites;
    let h_k = relative_step * k_scale;
    let h_m = relative_step * m_scale;

    let probe = |m: &EffectiveModel| batch_loss(m, samples, theta, scale, sim);
    for i in 0..n {
        let mut up = model.clone();
        up.stiffness[(i, i)] += h_k;
        let mut dn = model.clone();
        dn.stiffness[(i, i)] -= h_k;
        fd.k_diag[i] = (probe(&up)? - probe(&dn)?) / (2.0 * h_k);
    }
    for (p, &(a, b)) in layout.pairs.iter().enumerate() {
        let mut up = model.clone();
        up.stiffness[(a, b)] += h_k;
        up.stiffness[(b, a)] += h_k;
        let mut dn = model.clone();
        dn.stiffness[(a, b)] -= h_k;
        dn.stiffness[(b, a)] -= h_k;
        fd.k_pairs[p] = (probe(&up)? - probe(&dn)?) / (2.0 * h_k);
    }
    for i in 0..n {
        let mut up = model.clone();
        up.mass[(i, i)] += h_m;
        up.damping = &up.mass * &g_op;
        let mut dn = model.clone();
        dn.mass[(i, i)] -= h_m;
        dn.damping = &dn.mass * &g_op;
        fd.m_diag[i] = (probe(&up)? - probe(&dn)?) / (2.0 * h_m);
    }

    let h_t = relative_step * theta.abs().max(1.0);
    let d_theta_fd =
        (batch_loss(model, samples, theta + h_t, scale, sim)?
            - batch_loss(model, samples, theta - h_t, scale, sim)?)
            / (2.0 * h_t);
    let theta_rel_err =
        (eval.d_theta - d_theta_fd).abs() / (d_theta_fd.abs() + 1e-12 * d_theta_fd.abs().max(1.0));

    // Per-entry records in pencil order, with the same near-zero guard as
    // the aggregate comparison.
    let names = (0..n)
        .map(|i| format!("k[{i},{i}]"))
        .chain(layout.pairs.iter().map(|&(a, b)| format!("k[{a},{b}]")))
        .chain((0..n).map(|i| format!("m[{i},{i}]")));
    let adj_flat = pencil.flat();
    let fd_flat = fd.flat();
    let fd_scale = fd_flat.iter().fold(0.0f64, |m, &x| m.max(x.abs()));
    let floor = 1e-12 * fd_scale.max(f64::MIN_POSITIVE);
    let mut entries: Vec<GradcheckEntry> = names
        .zip(adj_flat.iter().zip(fd_flat.iter()))
        .map(|(param, (&adjoint, &fd_v))| GradcheckEntry {
            param,
            adjoint,
            fd: fd_v,
            rel_err: (adjoint - fd_v).abs() / (fd_v.abs() + floor),
        })
        .collect();
    entries.push(GradcheckEntry {
        param: "theta".into(),
        adjoint: eval.d_theta,
        fd: d_theta_fd,
        rel_err: theta_rel_err,
    });

    Ok(GradcheckReport {
        entries,
        max_rel_err: max_relative_error(&pencil, &fd),
        theta_rel_err,
    })
}

// ---------------------------------------------------------------------------
// Size study

/// Accuracy of the best restart at one lattice size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeStudyRow {
    pub rows: usize,
    pub cols: usize,
    pub best_restart: usize,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

/// Train one lattice per size with surrogate corrections disabled (the
/// pure quadratic map stands alone) and report the best restart's
/// accuracies. Each size needs a surrogate fitted for that shape.
pub fn size_study(
    base: &TrainConfig,
    cases: &[(usize, usize, &SurrogateModel)],
    dataset: &Dataset,
    physics: &PhysicsConfig,
    oracle: &OracleFn<'_>,
) -> Result<Vec<SizeStudyRow>, TrainError> {
    let mut rows = Vec::with_capacity(cases.len());
    for &(r, c, surrogate) in cases {
        let mut cfg = base.clone();
        cfg.rows = r;
        cfg.cols = c;
        cfg.correction_period = 0;
        let report = train_single_layer(&cfg, dataset, surrogate, physics, oracle)?;
        rows.push(SizeStudyRow {
            rows: r,
            cols: c,
            best_restart: report.best_restart,
            train_accuracy: report.train.accuracy,
            test_accuracy: report.test.accuracy,
        });
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Two-layer (nonlinear) training

/// Two-layer training parameters: two lattices of the same shape feed the
/// string-cantilever element. The element's masses, damping, and mixing
/// coefficients stay fixed; its three stiffnesses and both coupling gains
/// train alongside the geometries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeepTrainConfig {
    pub base: TrainConfig,
    pub element: NonlinearElement,
    pub kappa_a: f64,
    pub kappa_b: f64,
    /// First trial step of the backtracking descent.
    pub step_init: f64,
}

impl DeepTrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        self.base.validate()?;
        self.element.validate()?;
        if !self.kappa_a.is_finite() || !self.kappa_b.is_finite() {
            return Err(TrainError::Config("coupling gains must be finite".into()));
        }
        if !(self.step_init > 0.0) {
            return Err(TrainError::Config(format!(
                "initial step {} must be positive",
                self.step_init
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeepRestartSummary {
    pub index: usize,
    pub seed: u64,
    pub iterations: usize,
    pub converged: bool,
    pub stalled: bool,
    pub error: Option<String>,
    pub theta: f64,
    pub final_loss: f64,
    pub train_accuracy: f64,
    pub loss_curve: Vec<f64>,
    pub error_curve: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeepTrainReport {
    pub version: u32,
    pub config: DeepTrainConfig,
    pub restarts: Vec<DeepRestartSummary>,
    pub best_restart: usize,
    pub geometry_a: Geometry,
    pub geometry_b: Geometry,
    /// Element with its trained stiffnesses.
    pub element: NonlinearElement,
    pub kappa_a: f64,
    pub kappa_b: f64,
    pub theta_optimized: f64,
    pub theta_refit: f64,
    pub polarity: i8,
    pub train: Evaluation,
    pub test: Evaluation,
    pub warnings: Vec<String>,
}

/// Forward-simulate every sample through one two-layer network.
pub fn deep_batch_energies(
    net: &DeepNetwork,
    samples: &[TrainSample],
    sim: &SimConfig,
) -> Result<Vec<f64>, TrainError> {
    samples
        .par_iter()
        .map(|s| Ok(crate::nonlinear::deep_forward(net, s.forcing.as_ref(), sim)?.energy()))
        .collect()
}

struct DeepObjective<'a> {
    cfg: &'a DeepTrainConfig,
    n_geo: usize,
    physics: &'a PhysicsConfig,
    surrogate: &'a SurrogateModel,
    samples: &'a [TrainSample],
    sim: SimConfig,
    layout: &'a PencilLayout,
    last_energies: Vec<f64>,
    last_error: Option<String>,
}

impl DeepObjective<'_> {
    /// Coordinates: `[q_a, q_b, ln k_s1, ln k_s2, ln k_c, kappa_a,
    /// kappa_b, theta]`. Element stiffnesses live in log space so
    /// positivity is structural rather than enforced.
    fn dim(&self) -> usize {
        2 * self.n_geo + 6
    }

    fn geometry_pair(&self, x: &DVector<f64>) -> Result<(Geometry, Geometry), GeometryError> {
        let base = self.cfg.base.clone();
        let span = base.bound_hi - base.bound_lo;
        let decode = |offset: usize| -> Result<Geometry, GeometryError> {
            let p: Vec<f64> = (0..self.n_geo)
                .map(|i| base.bound_lo + span * sigmoid(x[offset + i]))
                .collect();
            Geometry::from_flat(base.rows, base.cols, &p)
        };
        Ok((decode(0)?, decode(self.n_geo)?))
    }

    fn network(&self, x: &DVector<f64>) -> Result<DeepNetwork, TrainError> {
        let (g_a, g_b) = self.geometry_pair(x)?;
        let lattice_a = self.surrogate.predict(&g_a, self.physics, None)?;
        let lattice_b = self.surrogate.predict(&g_b, self.physics, None)?;
        let k = 2 * self.n_geo;
        let mut element = self.cfg.element.clone();
        element.stiffness = [x[k].exp(), x[k + 1].exp(), x[k + 2].exp()];
        Ok(DeepNetwork {
            lattice_a,
            lattice_b,
            element,
            kappa_a: x[k + 3],
            kappa_b: x[k + 4],
        })
    }

    fn eval_inner(&mut self, x: &DVector<f64>) -> Result<(f64, DVector<f64>), TrainError> {
        let k = 2 * self.n_geo;
        let theta = x[k + 5];
        let scale = self.cfg.base.loss_scale;
        let (g_a, g_b) = self.geometry_pair(x)?;
        let net = self.network(x)?;

        let per_sample: Vec<(f64, DeepGradient)> = self
            .samples
            .par_iter()
            .map(|s| {
                let label = s.label;
                let (grad, run) = deep_gradient(
                    &net,
                    self.layout,
                    self.layout,
                    s.forcing.as_ref(),
                    &self.sim,
                    CheckpointStrategy::Dense,
                    |e| sample_terms(e, label, theta, scale).map_or(0.0, |t| t.1),
                )?;
                Ok((run.energy, grad))
            })
            .collect::<Result<_, TrainError>>()?;

        let energies: Vec<f64> = per_sample.iter().map(|p| p.0).collect();
        let labels: Vec<i8> = self.samples.iter().map(|s| s.label).collect();
        let eval = sigmoidal_loss(&energies, &labels, theta, scale)?;
        let s_count = (energies.len() - eval.excluded.len()) as f64;

        let mut total = DeepGradient::zeros(self.layout, self.layout);
        for (_, g) in &per_sample {
            for (dst, src) in [(&mut total.lattice_a, &g.lattice_a), (&mut total.lattice_b, &g.lattice_b)]
            {
                dst.k_diag += &src.k_diag;
                dst.m_diag += &src.m_diag;
                for (acc, v) in dst.k_pairs.iter_mut().zip(&src.k_pairs) {
                    *acc += v;
                }
            }
            for (acc, v) in total.stiffness.iter_mut().zip(&g.stiffness) {
                *acc += v;
            }
            total.kappa_a += g.kappa_a;
            total.kappa_b += g.kappa_b;
        }

        let geo_a = self.surrogate.chain_gradient(&g_a, &total.lattice_a)?;
        let geo_b = self.surrogate.chain_gradient(&g_b, &total.lattice_b)?;
        let mut grad = DVector::zeros(self.dim());
        let base = &self.cfg.base;
        let span = base.bound_hi - base.bound_lo;
        for i in 0..self.n_geo {
            let sa = sigmoid(x[i]);
            grad[i] = geo_a[i] / s_count * span * sa * (1.0 - sa);
            let sb = sigmoid(x[self.n_geo + i]);
            grad[self.n_geo + i] = geo_b[i] / s_count * span * sb * (1.0 - sb);
        }
        for j in 0..3 {
            // d/d(ln k) = k * d/dk.
            grad[k + j] = net.element.stiffness[j] * total.stiffness[j] / s_count;
        }
        grad[k + 3] = total.kappa_a / s_count;
        grad[k + 4] = total.kappa_b / s_count;
        grad[k + 5] = eval.d_theta;

        self.last_energies = energies;
        Ok((eval.loss, grad))
    }

    fn error_rate(&self, theta: f64) -> f64 {
        let labels: Vec<i8> = self.samples.iter().map(|s| s.label).collect();
        1.0 - threshold_accuracy(&self.last_energies, &labels, theta, 1)
    }
}

impl Objective for DeepObjective<'_> {
    fn eval(&mut self, x: &DVector<f64>) -> (f64, DVector<f64>) {
        match self.eval_inner(x) {
            Ok(r) => {
                self.last_error = None;
                r
            }
            Err(e) => {
                self.last_error = Some(e.to_string());
                (f64::INFINITY, DVector::zeros(x.len()))
            }
        }
    }
}

struct DeepRestartCand {
    summary: DeepRestartSummary,
    geometries: Option<(Geometry, Geometry)>,
    element: Option<NonlinearElement>,
    kappa: (f64, f64),
}

fn failed_deep_restart(index: usize, seed: u64, message: String) -> DeepRestartCand {
    DeepRestartCand {
        summary: DeepRestartSummary {
            index,
            seed,
            iterations: 0,
            converged: false,
            stalled: false,
            error: Some(message),
            theta: 0.0,
            final_loss: 0.0,
            train_accuracy: 0.0,
            loss_curve: Vec::new(),
            error_curve: Vec::new(),
        },
        geometries: None,
        element: None,
        kappa: (0.0, 0.0),
    }
}

fn run_deep_restart(
    cfg: &DeepTrainConfig,
    physics: &PhysicsConfig,
    surrogate: &SurrogateModel,
    oracle: &OracleFn<'_>,
    train: &[TrainSample],
    layout: &PencilLayout,
    index: usize,
    seed: u64,
) -> DeepRestartCand {
    let base = &cfg.base;
    let n_geo = layout.n_sites + layout.pairs.len();
    let sim = base.sim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g_a0 = match Geometry::random(base.rows, base.cols, rng.random()) {
        Ok(g) => g,
        Err(e) => return failed_deep_restart(index, seed, e.to_string()),
    };
    let g_b0 = match Geometry::random(base.rows, base.cols, rng.random()) {
        Ok(g) => g,
        Err(e) => return failed_deep_restart(index, seed, e.to_string()),
    };

    let mut objective = DeepObjective {
        cfg,
        n_geo,
        physics,
        surrogate,
        samples: train,
        sim: sim.clone(),
        layout,
        last_energies: Vec::new(),
        last_error: None,
    };

    let mut x = DVector::zeros(objective.dim());
    for (i, &p) in g_a0.flat().iter().enumerate() {
        x[i] = logit(((p - 0.05) / 0.9).clamp(1e-6, 1.0 - 1e-6));
    }
    for (i, &p) in g_b0.flat().iter().enumerate() {
        x[n_geo + i] = logit(((p - 0.05) / 0.9).clamp(1e-6, 1.0 - 1e-6));
    }
    let k = 2 * n_geo;
    for j in 0..3 {
        x[k + j] = cfg.element.stiffness[j].ln();
    }
    x[k + 3] = cfg.kappa_a;
    x[k + 4] = cfg.kappa_b;

    // Threshold initialization from the initial network's energies.
    let theta0 = {
        let net = match objective.network(&x) {
            Ok(n) => n,
            Err(e) => return failed_deep_restart(index, seed, e.to_string()),
        };
        let energies = match deep_batch_energies(&net, train, &sim) {
            Ok(e) => e,
            Err(e) => return failed_deep_restart(index, seed, e.to_string()),
        };
        match mean_initial_log_energy(&energies) {
            Some(t) => t,
            None => {
                return failed_deep_restart(
                    index,
                    seed,
                    "no sample produced a positive readout energy at the initial network".into(),
                )
            }
        }
    };
    x[k + 5] = theta0;

    let (mut f, mut g) = objective.eval(&x);
    if !f.is_finite() {
        let detail = objective
            .last_error
            .clone()
            .unwrap_or_else(|| "objective not finite at the starting point".into());
        return failed_deep_restart(index, seed, detail);
    }
    let mut loss_curve = vec![f];
    let mut error_curve = vec![objective.error_rate(x[k + 5])];
    let mut t0 = cfg.step_init;
    let mut iterations = 0usize;
    let mut converged = false;
    let mut stalled = false;
    for _ in 0..base.iterations {
        if g.amax() <= base.grad_tol {
            converged = true;
            break;
        }
        match backtracking_step(&mut objective, &x, f, &g, t0, 40) {
            Some((xn, fn_, gn, t)) => {
                x = xn;
                f = fn_;
                g = gn;
                t0 = (2.0 * t).min(1e8);
                iterations += 1;
                loss_curve.push(f);
                error_curve.push(objective.error_rate(x[k + 5]));
            }
            None => {
                stalled = true;
                break;
            }
        }
    }

    let theta = x[k + 5];
    let (g_a, g_b) = match objective.geometry_pair(&x) {
        Ok(p) => p,
        Err(e) => return failed_deep_restart(index, seed, e.to_string()),
    };
    let net = match objective.network(&x) {
        Ok(n) => n,
        Err(e) => return failed_deep_restart(index, seed, e.to_string()),
    };

    // Selection on the extracted models with the trained element.
    let eval_net = DeepNetwork {
        lattice_a: oracle(&g_a),
        lattice_b: oracle(&g_b),
        element: net.element.clone(),
        kappa_a: net.kappa_a,
        kappa_b: net.kappa_b,
    };
    let train_accuracy = match deep_batch_energies(&eval_net, train, &sim) {
        Ok(energies) => {
            let labels: Vec<i8> = train.iter().map(|s| s.label).collect();
            threshold_accuracy(&energies, &labels, theta, 1)
        }
        Err(e) => return failed_deep_restart(index, seed, e.to_string()),
    };

    DeepRestartCand {
        summary: DeepRestartSummary {
            index,
            seed,
            iterations,
            converged,
            stalled,
            error: None,
            theta,
            final_loss: f,
            train_accuracy,
            loss_curve,
            error_curve,
        },
        geometries: Some((g_a, g_b)),
        element: Some(net.element),
        kappa: (net.kappa_a, net.kappa_b),
    }
}

/// Train a two-layer network: two lattices of the same shape couple into
/// the string-cantilever element and the first string is read out.
/// Steepest descent with backtracking over both geometries, the element
/// stiffnesses (log space), both coupling gains, and the threshold.
/// Surrogate corrections are not applied on this path; the surrogate is
/// used as fitted.
pub fn train_deep(
    cfg: &DeepTrainConfig,
    dataset: &Dataset,
    surrogate: &SurrogateModel,
    physics: &PhysicsConfig,
    oracle: &OracleFn<'_>,
) -> Result<DeepTrainReport, TrainError> {
    cfg.validate()?;
    check_dataset(dataset)?;
    let layout = PencilLayout::lattice(cfg.base.rows, cfg.base.cols);

    let mut master = ChaCha8Rng::seed_from_u64(cfg.base.seed);
    let seeds: Vec<u64> = (0..cfg.base.restarts).map(|_| master.random()).collect();

    let candidates: Vec<DeepRestartCand> = seeds
        .par_iter()
        .enumerate()
        .map(|(i, &seed)| {
            run_deep_restart(
                cfg,
                physics,
                surrogate,
                oracle,
                &dataset.train,
                &layout,
                i,
                seed,
            )
        })
        .collect();

    let best = candidates
        .iter()
        .filter(|c| c.geometries.is_some())
        .max_by(|a, b| {
            a.summary
                .train_accuracy
                .partial_cmp(&b.summary.train_accuracy)
                .expect("accuracies are finite")
                .then(b.summary.index.cmp(&a.summary.index))
        });
    let Some(best) = best else {
        let first = candidates
            .first()
            .and_then(|c| c.summary.error.clone())
            .unwrap_or_else(|| "no restarts ran".into());
        return Err(TrainError::AllRestartsFailed {
            count: candidates.len(),
            first,
        });
    };
    let best_restart = best.summary.index;
    let (geometry_a, geometry_b) = best.geometries.clone().expect("filtered on Some");
    let element = best.element.clone().expect("filtered on Some");
    let (kappa_a, kappa_b) = best.kappa;
    let theta_optimized = best.summary.theta;

    let sim = cfg.base.sim();
    let eval_net = DeepNetwork {
        lattice_a: oracle(&geometry_a),
        lattice_b: oracle(&geometry_b),
        element: element.clone(),
        kappa_a,
        kappa_b,
    };
    let train_energies = deep_batch_energies(&eval_net, &dataset.train, &sim)?;
    let train_labels: Vec<i8> = dataset.train.iter().map(|s| s.label).collect();
    let fit = fit_threshold(&train_energies, &train_labels)?;
    let optimized_accuracy = threshold_accuracy(&train_energies, &train_labels, theta_optimized, 1);
    let (theta_final, polarity) = if fit.accuracy >= optimized_accuracy {
        (fit.theta, fit.polarity)
    } else {
        (theta_optimized, 1)
    };

    let train_eval = evaluate_energies(&dataset.train, &train_energies, theta_final, polarity)?;
    let test_energies = deep_batch_energies(&eval_net, &dataset.test, &sim)?;
    let test_eval = evaluate_energies(&dataset.test, &test_energies, theta_final, polarity)?;

    let mut warnings = Vec::new();
    for c in &candidates {
        if let Some(err) = &c.summary.error {
            warnings.push(format!("restart {} failed: {err}", c.summary.index));
        }
    }
    for (s, &e) in dataset.train.iter().zip(&train_energies) {
        if !(e > 0.0) {
            warnings.push(format!(
                "train sample '{}' produced no readout energy and was excluded from the loss",
                s.id
            ));
        }
    }

    Ok(DeepTrainReport {
        version: REPORT_VERSION,
        config: cfg.clone(),
        restarts: candidates.into_iter().map(|c| c.summary).collect(),
        best_restart,
        geometry_a,
        geometry_b,
        element,
        kappa_a,
        kappa_b,
        theta_optimized,
        theta_refit: fit.theta,
        polarity,
        train: train_eval,
        test: test_eval,
        warnings,
    })
}

// ---------------------------------------------------------------------------
// Checkpoints

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMetrics {
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

/// Reloadable snapshot of a trained single-layer classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub rows: usize,
    pub cols: usize,
    pub geometry: Geometry,
    pub theta: f64,
    pub polarity: i8,
    /// Path or identifier of the surrogate used during training.
    pub surrogate_ref: Option<String>,
    pub metrics: CheckpointMetrics,
}

impl Checkpoint {
    pub fn from_report(report: &TrainReport, surrogate_ref: Option<String>) -> Self {
        Self {
            version: REPORT_VERSION,
            rows: report.config.rows,
            cols: report.config.cols,
            geometry: report.geometry.clone(),
            theta: report.train.theta,
            polarity: report.polarity,
            surrogate_ref,
            metrics: CheckpointMetrics {
                train_accuracy: report.train.accuracy,
                test_accuracy: report.test.accuracy,
            },
        }
    }
}

/// Snapshot of a trained two-layer classifier: the same envelope as
/// [`Checkpoint`] with a `layers` section instead of a single geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeepCheckpoint {
    pub version: u32,
    pub rows: usize,
    pub cols: usize,
    pub layers: Vec<Geometry>,
    pub element: NonlinearElement,
    pub kappa_a: f64,
    pub kappa_b: f64,
    pub theta: f64,
    pub polarity: i8,
    pub surrogate_ref: Option<String>,
    pub metrics: CheckpointMetrics,
}

impl DeepCheckpoint {
    pub fn from_report(report: &DeepTrainReport, surrogate_ref: Option<String>) -> Self {
        Self {
            version: REPORT_VERSION,
            rows: report.config.base.rows,
            cols: report.config.base.cols,
            layers: vec![report.geometry_a.clone(), report.geometry_b.clone()],
            element: report.element.clone(),
            kappa_a: report.kappa_a,
            kappa_b: report.kappa_b,
            theta: report.train.theta,
            polarity: report.polarity,
            surrogate_ref,
            metrics: CheckpointMetrics {
                train_accuracy: report.train.accuracy,
                test_accuracy: report.test.accuracy,
            },
        }
    }
}

// ---------------------------------------------------------------------------
// CSV emitters

/// Per-restart loss and error-rate curves as CSV.
pub fn loss_curves_csv(restarts: &[RestartSummary]) -> String {
    let mut out = String::from("restart,iteration,loss,error_rate\n");
    for r in restarts {
        for (i, (l, e)) in r.loss_curve.iter().zip(&r.error_curve).enumerate() {
            let _ = writeln!(out, "{},{},{},{}", r.index, i, l, e);
        }
    }
    out
}

/// Class-resolved log-energy histogram as CSV.
pub fn histogram_csv(h: &EnergyHistogram) -> String {
    let mut out = String::from("bin,log_energy_lo,log_energy_hi,pos,neg\n");
    let bins = h.pos.len();
    let width = (h.hi - h.lo) / bins as f64;
    for i in 0..bins {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            i,
            h.lo + i as f64 * width,
            h.lo + (i + 1) as f64 * width,
            h.pos[i],
            h.neg[i]
        );
    }
    out
}

/// Per-sample outcomes as CSV.
pub fn energies_csv(outcomes: &[SampleOutcome]) -> String {
    let mut out = String::from("id,label,energy,predicted\n");
    for o in outcomes {
        let _ = writeln!(out, "{},{},{},{}", o.id, o.label, o.energy, o.predicted);
    }
    out
}

/// Size-study table as CSV.
pub fn size_study_csv(rows: &[SizeStudyRow]) -> String {
    let mut out = String::from("rows,cols,best_restart,train_accuracy,test_accuracy\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.rows, r.cols, r.best_restart, r.train_accuracy, r.test_accuracy
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{synth_dataset, SynthConfig, SynthKind};
    use crate::model::{drive_weights, oracle_effective_model, output_index};
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;

    fn sine_forcing(freq: f64, dt: f64, n: usize, amp: f64) -> Vec<f64> {
        (0..n)
            .map(|k| amp * (2.0 * std::f64::consts::PI * freq * dt * k as f64).sin())
            .collect()
    }

    // -----------------------------------------------------------------
    // Loss

    #[test]
    fn loss_matches_hand_values() {
        // ln E exactly at the threshold: per-sample loss is ln 2.
        let e = 3.7_f64;
        let eval = sigmoidal_loss(&[e], &[1], e.ln(), 1.0).unwrap();
        assert_relative_eq!(eval.loss, std::f64::consts::LN_2, max_relative = 1e-15);

        // Far into the correct side: the loss saturates to zero.
        let eval = sigmoidal_loss(&[e], &[1], e.ln() - 50.0, 1.0).unwrap();
        assert!(eval.loss < 1e-20, "loss = {}", eval.loss);
        // Far into the wrong side: the loss grows linearly in the margin,
        // the gradient saturates to +-scale.
        let eval = sigmoidal_loss(&[e], &[1], e.ln() + 50.0, 2.0).unwrap();
        assert_relative_eq!(eval.loss, 100.0, max_relative = 1e-12);
        assert_relative_eq!(eval.d_theta, 2.0, max_relative = 1e-12);

        // Two samples average.
        let eval = sigmoidal_loss(&[e, e], &[1, -1], e.ln(), 1.0).unwrap();
        assert_relative_eq!(eval.loss, std::f64::consts::LN_2, max_relative = 1e-15);
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let energies = [0.8, 2.5, 0.031, 7.0, 1.1];
        let labels = [1i8, -1, 1, -1, 1];
        let theta = 0.4;
        let scale = 1.7;
        let eval = sigmoidal_loss(&energies, &labels, theta, scale).unwrap();

        let h = 1e-6;
        let lp = sigmoidal_loss(&energies, &labels, theta + h, scale).unwrap().loss;
        let lm = sigmoidal_loss(&energies, &labels, theta - h, scale).unwrap().loss;
        let fd_theta = (lp - lm) / (2.0 * h);
        assert_relative_eq!(eval.d_theta, fd_theta, max_relative = 1e-9);

        for i in 0..energies.len() {
            let mut up = energies;
            up[i] += h * energies[i];
            let mut dn = energies;
            dn[i] -= h * energies[i];
            let fd = (sigmoidal_loss(&up, &labels, theta, scale).unwrap().loss
                - sigmoidal_loss(&dn, &labels, theta, scale).unwrap().loss)
                / (2.0 * h * energies[i]);
            assert_relative_eq!(eval.d_energy[i], fd, max_relative = 1e-8);
        }
    }

    #[test]
    fn loss_excludes_nonpositive_energies() {
        let eval = sigmoidal_loss(&[1.0, 0.0, 2.0], &[1, 1, -1], 0.0, 1.0).unwrap();
        assert_eq!(eval.excluded, vec![1]);
        assert_eq!(eval.d_energy[1], 0.0);
        // Normalization over the two included samples.
        let by_hand = (softplus(-(1.0f64.ln())) + softplus(2.0f64.ln())) / 2.0;
        assert_relative_eq!(eval.loss, by_hand, max_relative = 1e-14);

        assert!(matches!(
            sigmoidal_loss(&[0.0, 0.0], &[1, -1], 0.0, 1.0),
            Err(TrainError::AllExcluded)
        ));
        assert!(matches!(
            sigmoidal_loss(&[1.0], &[2], 0.0, 1.0),
            Err(TrainError::Config(_))
        ));
        assert!(matches!(
            sigmoidal_loss(&[1.0, 1.0], &[1], 0.0, 1.0),
            Err(TrainError::Config(_))
        ));
    }

    // -----------------------------------------------------------------
    // Threshold fitting and evaluation

    #[test]
    fn threshold_fit_hand_examples() {
        // Energies 1 and e^2: the midpoint of the log-energies is 1.
        let fit = fit_threshold(&[1.0, std::f64::consts::E.powi(2)], &[-1, 1]).unwrap();
        assert_relative_eq!(fit.theta, 1.0, max_relative = 1e-15);
        assert_eq!(fit.polarity, 1);
        assert_eq!(fit.accuracy, 1.0);

        // Swapped labels: same threshold, inverted polarity.
        let fit = fit_threshold(&[1.0, std::f64::consts::E.powi(2)], &[1, -1]).unwrap();
        assert_relative_eq!(fit.theta, 1.0, max_relative = 1e-15);
        assert_eq!(fit.polarity, -1);
        assert_eq!(fit.accuracy, 1.0);

        assert!(matches!(
            fit_threshold(&[1.0, 2.0], &[1, 1]),
            Err(TrainError::SingleClass)
        ));
    }

    #[test]
    fn threshold_ties_pick_lowest() {
        // Log-energies 0, 1, 2, 3 with labels -,+,-,+: thresholds 0.5 and
        // 2.5 both score 3/4; the scan keeps the lower one.
        let energies: Vec<f64> = [0.0f64, 1.0, 2.0, 3.0].iter().map(|l| l.exp()).collect();
        let fit = fit_threshold(&energies, &[-1, 1, -1, 1]).unwrap();
        assert_relative_eq!(fit.theta, 0.5, max_relative = 1e-12);
        assert_relative_eq!(fit.accuracy, 0.75, max_relative = 1e-15);
    }

    #[test]
    fn equal_energies_fall_back_to_class_prior() {
        let energies = vec![2.0; 5];
        let labels = [1i8, 1, 1, -1, -1];
        let fit = fit_threshold(&energies, &labels).unwrap();
        assert_relative_eq!(fit.accuracy, 0.6, max_relative = 1e-15);
        // All samples tie at the threshold and classify negative, so the
        // majority-positive split needs the inverted polarity.
        assert_eq!(fit.polarity, -1);
        let eval = evaluate_energies(
            &labels
                .iter()
                .enumerate()
                .map(|(i, &l)| TrainSample::new(format!("s{i}"), l, vec![]))
                .collect::<Vec<_>>(),
            &energies,
            fit.theta,
            fit.polarity,
        )
        .unwrap();
        assert_relative_eq!(eval.accuracy, 0.6, max_relative = 1e-15);
    }

    #[test]
    fn evaluation_separates_scaled_copies() {
        // Quadratic readout: scaling the input by 3 scales the energy by
        // 9, so amplitude classes are exactly separable.
        let g = Geometry::random(2, 2, 11).unwrap();
        let physics = PhysicsConfig::default();
        let model = oracle_effective_model(&g, &physics);
        let sim = SimConfig::new(DEFAULT_DT, 900);
        let base = sine_forcing(68_000.0, DEFAULT_DT, 800, 1.0);
        let samples: Vec<TrainSample> = (0..8)
            .map(|i| {
                let amp = if i % 2 == 0 { 1.0 } else { 3.0 };
                let label = if i % 2 == 0 { -1 } else { 1 };
                TrainSample::new(
                    format!("s{i}"),
                    label,
                    base.iter().map(|v| v * amp).collect(),
                )
            })
            .collect();
        let energies = batch_energies(&model, &samples, &sim).unwrap();
        let fit = fit_threshold(
            &energies,
            &samples.iter().map(|s| s.label).collect::<Vec<_>>(),
        )
        .unwrap();
        assert_eq!(fit.accuracy, 1.0);
        let eval = evaluate(&model, &samples, &sim, fit.theta, fit.polarity).unwrap();
        assert_eq!(eval.accuracy, 1.0);
        assert_eq!(eval.true_pos, 4);
        assert_eq!(eval.true_neg, 4);
        assert_eq!(eval.false_pos + eval.false_neg, 0);
        assert_eq!(
            eval.histogram.pos.iter().sum::<usize>()
                + eval.histogram.neg.iter().sum::<usize>(),
            8
        );

        // Shuffled labels leave nothing to separate: accuracy within
        // 3 sigma of coin flipping.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let shuffled: Vec<TrainSample> = (0..40)
            .map(|i| {
                let amp = 0.5 + 0.1 * (i as f64);
                let label = if rng.random::<bool>() { 1 } else { -1 };
                TrainSample::new(
                    format!("r{i}"),
                    label,
                    base.iter().map(|v| v * amp).collect(),
                )
            })
            .collect();
        let energies = batch_energies(&model, &shuffled, &sim).unwrap();
        let theta = {
            let mut lns: Vec<f64> = energies.iter().map(|e| e.ln()).collect();
            lns.sort_by(f64::total_cmp);
            lns[lns.len() / 2]
        };
        let eval = evaluate_energies(&shuffled, &energies, theta, 1).unwrap();
        let sigma = 0.5 / (40.0f64).sqrt();
        assert!(
            (eval.accuracy - 0.5).abs() <= 3.0 * sigma,
            "accuracy {} outside the chance band",
            eval.accuracy
        );

        assert!(matches!(
            evaluate(&model, &[], &sim, 0.0, 1),
            Err(TrainError::EmptySplit)
        ));
    }

    // -----------------------------------------------------------------
    // Objective gradients

    fn fitted_surrogate(
        rows: usize,
        cols: usize,
        count: usize,
        seed: u64,
        physics: &PhysicsConfig,
    ) -> SurrogateModel {
        let train = crate::surrogate::oracle_training_set(rows, cols, count, seed, physics);
        crate::surrogate::fit(&train, rows, cols).unwrap()
    }

    fn spectral_samples(n_per_class: usize, n_steps: usize, seed: u64) -> Vec<TrainSample> {
        let cfg = SynthConfig {
            duration_s: n_steps as f64 * DEFAULT_DT,
            ..SynthConfig::default()
        };
        let (_, clips) = synth_dataset(SynthKind::Spectral, n_per_class, 0, seed, &cfg);
        clips.iter().map(TrainSample::from_audio).collect()
    }

    #[test]
    fn chained_gradient_matches_loss_finite_differences() {
        let physics = PhysicsConfig::default();
        let surrogate = fitted_surrogate(2, 2, 450, 31, &physics);
        let layout = PencilLayout::lattice(2, 2);
        let samples = spectral_samples(3, 700, 9);
        let n_geo = layout.n_sites + layout.pairs.len();

        let mut objective = SingleLayerObjective {
            rows: 2,
            cols: 2,
            n_geo,
            bound_lo: 0.05,
            bound_hi: 0.95,
            loss_scale: 1.0,
            physics: &physics,
            surrogate: &surrogate,
            samples: &samples,
            sim: SimConfig::new(DEFAULT_DT, 800),
            layout: &layout,
            correction: None,
            last_energies: Vec::new(),
            last_excluded: 0,
            last_error: None,
        };

        let g0 = Geometry::random(2, 2, 77).unwrap();
        let mut x = initial_coords(&g0, n_geo, 0.0);
        // Pick a threshold near the operating energies so both logistic
        // branches stay active.
        let (_, _) = objective.eval(&x);
        x[n_geo] = mean_initial_log_energy(&objective.last_energies).unwrap();

        let (_, grad) = objective.eval(&x);
        let h = 1e-4;
        let mut max_rel: f64 = 0.0;
        let mut fd_all = DVector::zeros(x.len());
        for i in 0..x.len() {
            let mut up = x.clone();
            up[i] += h;
            let mut dn = x.clone();
            dn[i] -= h;
            let (fu, _) = objective.eval(&up);
            let (fd_, _) = objective.eval(&dn);
            fd_all[i] = (fu - fd_) / (2.0 * h);
        }
        let guard = 1e-9 * fd_all.amax();
        for i in 0..x.len() {
            let rel = (grad[i] - fd_all[i]).abs() / (fd_all[i].abs() + guard);
            max_rel = max_rel.max(rel);
        }
        assert!(max_rel < 1e-5, "max relative error {max_rel}");
    }

    // -----------------------------------------------------------------
    // Surrogate path against an exactly quadratic reference

    /// A reference map built from quadratic polynomials only, so the
    /// surrogate's function class contains it exactly.
    fn quadratic_truth(physics: &PhysicsConfig, rows: usize, cols: usize, g: &Geometry) -> EffectiveModel {
        let n = rows * cols;
        let w0 = 2.0 * std::f64::consts::PI * physics.f0_hz;
        let k0 = physics.m0 * w0 * w0;
        let c0 = physics.coupling_ratio * k0;
        let mut stiffness = DMatrix::<f64>::zeros(n, n);
        let mut mass = DMatrix::<f64>::zeros(n, n);
        for r in 0..rows {
            for c in 0..cols {
                let i = r * cols + c;
                let d = g.d_at(r, c);
                stiffness[(i, i)] = k0 * (1.0 - 0.5 * d * d + 0.05 * d);
                mass[(i, i)] = physics.m0 * (1.0 - 0.3 * d * d + 0.02 * d);
            }
        }
        let layout = PencilLayout::lattice(rows, cols);
        for &(a, b) in &layout.pairs {
            let (ra, ca) = (a / cols, a % cols);
            let (rb, cb) = (b / cols, b % cols);
            let s = if ra == rb {
                g.h_at(ra, ca.min(cb))
            } else {
                g.v_at(ra.min(rb), ca)
            };
            let da = g.d_at(ra, ca);
            let db = g.d_at(rb, cb);
            // Strictly positive on [0, 1]^3, so the absolute-value step
            // of a general assembly never engages.
            let c = c0 * (0.1 + 0.2 * s + 0.1 * s * s + 0.02 * da * db);
            stiffness[(a, a)] += c;
            stiffness[(b, b)] += c;
            stiffness[(a, b)] = -c;
            stiffness[(b, a)] = -c;
        }
        let damping = &mass * (w0 / physics.quality_factor);
        EffectiveModel {
            mass,
            stiffness,
            damping,
            input_weights: drive_weights(physics, rows, cols),
            output_index: output_index(physics, rows, cols),
        }
    }

    #[test]
    fn surrogate_and_reference_losses_agree_on_quadratic_truth() {
        // Slow, lightly damped physics keeps resonant error amplification
        // bounded so fit bias stays visible (or not) at full precision.
        let physics = PhysicsConfig {
            f0_hz: 2.0,
            quality_factor: 8.0,
            ..PhysicsConfig::default()
        };
        let truth = |g: &Geometry| quadratic_truth(&physics, 2, 2, g);

        let mut rng = ChaCha8Rng::seed_from_u64(committee_seed());
        let train: Vec<(Geometry, EffectiveModel)> = (0..800)
            .map(|_| {
                let g = Geometry::random(2, 2, rng.random()).unwrap();
                let m = truth(&g);
                (g, m)
            })
            .collect();
        let surrogate = crate::surrogate::fit(&train, 2, 2).unwrap();

        let layout = PencilLayout::lattice(2, 2);
        let n_geo = layout.n_sites + layout.pairs.len();
        let dt = 0.01;
        let sim = SimConfig::new(dt, 600);
        let samples: Vec<TrainSample> = (0..6)
            .map(|i| {
                let freq = 1.5 + 0.2 * i as f64;
                let label = if i % 2 == 0 { 1 } else { -1 };
                TrainSample::new(format!("q{i}"), label, sine_forcing(freq, dt, 500, 1.0))
            })
            .collect();

        let mut objective = SingleLayerObjective {
            rows: 2,
            cols: 2,
            n_geo,
            bound_lo: 0.05,
            bound_hi: 0.95,
            loss_scale: 1.0,
            physics: &physics,
            surrogate: &surrogate,
            samples: &samples,
            sim: sim.clone(),
            layout: &layout,
            correction: None,
            last_energies: Vec::new(),
            last_excluded: 0,
            last_error: None,
        };

        let g0 = Geometry::random(2, 2, 3).unwrap();
        let mut x0 = initial_coords(&g0, n_geo, 0.0);
        objective.eval(&x0);
        x0[n_geo] = mean_initial_log_energy(&objective.last_energies).unwrap();

        let labels: Vec<i8> = samples.iter().map(|s| s.label).collect();
        let reference_loss = |obj: &SingleLayerObjective, x: &DVector<f64>| -> f64 {
            let g = obj.geometry(x).unwrap();
            let model = truth(&g);
            let energies = batch_energies(&model, &samples, &sim).unwrap();
            sigmoidal_loss(&energies, &labels, x[n_geo], 1.0)
                .unwrap()
                .loss
        };

        let mut bfgs = Bfgs::new(&mut objective, x0).unwrap();
        let wolfe = WolfeConfig::default();
        for _ in 0..5 {
            let surrogate_loss = bfgs.f();
            let oracle_loss = reference_loss(&objective, bfgs.x());
            assert!(
                (surrogate_loss - oracle_loss).abs() < 1e-9,
                "paths diverge: {surrogate_loss} vs {oracle_loss}"
            );
            if !matches!(
                bfgs.step(&mut objective, &wolfe, 1e-12),
                StepOutcome::Accepted { .. }
            ) {
                break;
            }
        }
    }

    fn committee_seed() -> u64 {
        271_828
    }

    // -----------------------------------------------------------------
    // Full training runs

    fn tiny_dataset(n_train_per_class: usize, n_test_per_class: usize, n_steps: usize) -> Dataset {
        let cfg = SynthConfig {
            duration_s: n_steps as f64 * DEFAULT_DT,
            ..SynthConfig::default()
        };
        let (manifest, clips) = synth_dataset(
            SynthKind::Spectral,
            n_train_per_class,
            n_test_per_class,
            99,
            &cfg,
        );
        Dataset::from_manifest(&manifest, &clips).unwrap()
    }

    #[test]
    fn training_is_deterministic_and_well_formed() {
        let physics = PhysicsConfig::default();
        let surrogate = fitted_surrogate(2, 2, 450, 13, &physics);
        let dataset = tiny_dataset(4, 2, 1200);
        let cfg = TrainConfig {
            rows: 2,
            cols: 2,
            iterations: 8,
            restarts: 3,
            correction_period: 3,
            seed: 21,
            n_steps: 1400,
            ..TrainConfig::default()
        };
        let oracle = |g: &Geometry| oracle_effective_model(g, &physics);

        let report = train_single_layer(&cfg, &dataset, &surrogate, &physics, &oracle).unwrap();
        let again = train_single_layer(&cfg, &dataset, &surrogate, &physics, &oracle).unwrap();
        assert_eq!(
            serde_json::to_string(&report).unwrap(),
            serde_json::to_string(&again).unwrap(),
            "identical config and seed must produce byte-identical reports"
        );

        assert_eq!(report.version, REPORT_VERSION);
        assert_eq!(report.restarts.len(), 3);
        let best = &report.restarts[report.best_restart];
        for r in &report.restarts {
            assert!(
                best.train_accuracy >= r.train_accuracy,
                "best restart is not best: {} < {}",
                best.train_accuracy,
                r.train_accuracy
            );
            assert_eq!(r.loss_curve.len(), r.error_curve.len());
            // Loss may only move up where a correction re-anchored the
            // objective.
            for j in 1..r.loss_curve.len() {
                if !r.corrections.contains(&j) {
                    assert!(
                        r.loss_curve[j] <= r.loss_curve[j - 1] + 1e-12,
                        "restart {}: loss rose at step {j} without a correction",
                        r.index
                    );
                }
            }
            for e in &r.error_curve {
                assert!((0.0..=1.0).contains(e));
            }
        }
        assert!(!best.loss_curve.is_empty());
        assert!(
            best.corrections.len() >= 2,
            "an 8-iteration run with period 3 should re-anchor at least twice"
        );
        assert!((0.0..=1.0).contains(&report.train.accuracy));
        assert!((0.0..=1.0).contains(&report.test.accuracy));
        // The final rule must beat or match the optimizer's raw threshold
        // on the training split, and the report's train accuracy is the
        // selection metric or better.
        assert!(report.train.accuracy >= best.train_accuracy - 1e-12);
        // Per-sample records cover both splits.
        assert_eq!(report.train.outcomes.len(), dataset.train.len());
        assert_eq!(report.test.outcomes.len(), dataset.test.len());

        // Training made progress on at least the best restart.
        let first = best.loss_curve.first().unwrap();
        let last = best.loss_curve.last().unwrap();
        assert!(last <= first, "no progress: {first} -> {last}");
    }

    #[test]
    fn gradcheck_small_lattice() {
        let physics = PhysicsConfig::default();
        let g = Geometry::random(2, 2, 41).unwrap();
        let model = oracle_effective_model(&g, &physics);
        let layout = PencilLayout::lattice(2, 2);
        let samples = spectral_samples(2, 700, 17);
        let sim = SimConfig::new(DEFAULT_DT, 800);
        let energies = batch_energies(&model, &samples, &sim).unwrap();
        let theta = mean_initial_log_energy(&energies).unwrap();

        let report = gradcheck(&model, &layout, &samples, theta, 1.0, &sim, 1e-6).unwrap();
        assert_eq!(report.entries.len(), 2 * 4 + layout.pairs.len() + 1);
        assert_eq!(report.entries.last().unwrap().param, "theta");
        let worst = report
            .entries
            .iter()
            .take(report.entries.len() - 1)
            .map(|e| e.rel_err)
            .fold(0.0, f64::max);
        assert_eq!(worst, report.max_rel_err);
        assert!(
            report.max_rel_err < 1e-5,
            "pencil gradient mismatch {}",
            report.max_rel_err
        );
        // The theta partial nearly cancels between balanced classes, so
        // the finite-difference truncation at this step size dominates.
        assert!(
            report.theta_rel_err < 1e-7,
            "threshold gradient mismatch {}",
            report.theta_rel_err
        );
    }

    #[test]
    fn size_study_reports_each_case() {
        let physics = PhysicsConfig::default();
        let s2 = fitted_surrogate(2, 2, 450, 61, &physics);
        let dataset = tiny_dataset(3, 2, 1000);
        let base = TrainConfig {
            rows: 2,
            cols: 2,
            iterations: 4,
            restarts: 2,
            correction_period: 0,
            seed: 5,
            n_steps: 1100,
            ..TrainConfig::default()
        };
        let oracle = |g: &Geometry| oracle_effective_model(g, &physics);
        let rows = size_study(
            &base,
            &[(2, 2, &s2)],
            &dataset,
            &physics,
            &oracle,
        )
        .unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!((rows[0].rows, rows[0].cols), (2, 2));
        let csv = size_study_csv(&rows);
        assert!(csv.starts_with("rows,cols,best_restart,train_accuracy,test_accuracy\n"));
        assert_eq!(csv.lines().count(), 2);
    }

    // -----------------------------------------------------------------
    // Two-layer path

    fn slow_physics() -> PhysicsConfig {
        PhysicsConfig {
            f0_hz: 1.0,
            quality_factor: 30.0,
            ..PhysicsConfig::default()
        }
    }

    fn slow_element() -> NonlinearElement {
        let k1 = (2.0 * std::f64::consts::PI).powi(2);
        NonlinearElement {
            mass: [1.0, 1.0, 1.0],
            damping: [0.3, 0.3, 0.5],
            stiffness: [k1, 1.1 * k1, 0.2 * k1],
            gamma_s1: 3.0,
            gamma_s2: 2.0,
        }
    }

    fn slow_samples(n: usize, amp_pos: f64, amp_neg: f64) -> Vec<TrainSample> {
        (0..n)
            .map(|i| {
                let label = if i % 2 == 0 { 1 } else { -1 };
                let amp = if label == 1 { amp_pos } else { amp_neg };
                let freq = 1.0 + 0.02 * (i / 2) as f64;
                TrainSample::new(format!("d{i}"), label, sine_forcing(freq, 1e-3, 3000, amp))
            })
            .collect()
    }

    fn deep_config(physics: &PhysicsConfig) -> DeepTrainConfig {
        let _ = physics;
        DeepTrainConfig {
            base: TrainConfig {
                rows: 2,
                cols: 2,
                iterations: 4,
                restarts: 2,
                correction_period: 0,
                seed: 3,
                dt: 1e-3,
                n_steps: 4000,
                grad_tol: 1e-10,
                ..TrainConfig::default()
            },
            element: slow_element(),
            kappa_a: 2.0,
            kappa_b: 1.5,
            step_init: 0.25,
        }
    }

    #[test]
    fn deep_objective_gradient_matches_finite_differences() {
        let physics = slow_physics();
        let surrogate = fitted_surrogate(2, 2, 450, 23, &physics);
        let layout = PencilLayout::lattice(2, 2);
        let cfg = deep_config(&physics);
        let samples = slow_samples(4, 16.0, 10.0);
        let n_geo = layout.n_sites + layout.pairs.len();

        let mut objective = DeepObjective {
            cfg: &cfg,
            n_geo,
            physics: &physics,
            surrogate: &surrogate,
            samples: &samples,
            sim: SimConfig::new(1e-3, 4000),
            layout: &layout,
            last_energies: Vec::new(),
            last_error: None,
        };

        let mut x = DVector::zeros(objective.dim());
        let g_a = Geometry::random(2, 2, 19).unwrap();
        let g_b = Geometry::random(2, 2, 20).unwrap();
        for (i, &p) in g_a.flat().iter().enumerate() {
            x[i] = logit(((p - 0.05) / 0.9).clamp(1e-6, 1.0 - 1e-6));
        }
        for (i, &p) in g_b.flat().iter().enumerate() {
            x[n_geo + i] = logit(((p - 0.05) / 0.9).clamp(1e-6, 1.0 - 1e-6));
        }
        let k = 2 * n_geo;
        for j in 0..3 {
            x[k + j] = cfg.element.stiffness[j].ln();
        }
        x[k + 3] = cfg.kappa_a;
        x[k + 4] = cfg.kappa_b;
        objective.eval(&x);
        x[k + 5] = mean_initial_log_energy(&objective.last_energies).unwrap();

        let (_, grad) = objective.eval(&x);
        let h = 1e-5;
        let mut fd = DVector::zeros(x.len());
        for i in 0..x.len() {
            let mut up = x.clone();
            up[i] += h;
            let mut dn = x.clone();
            dn[i] -= h;
            fd[i] = (objective.eval(&up).0 - objective.eval(&dn).0) / (2.0 * h);
        }
        let guard = 1e-7 * fd.amax();
        let mut max_rel: f64 = 0.0;
        for i in 0..x.len() {
            let rel = (grad[i] - fd[i]).abs() / (fd[i].abs() + guard);
            max_rel = max_rel.max(rel);
        }
        assert!(max_rel < 1e-4, "max relative error {max_rel}");
    }

    #[test]
    fn deep_training_is_deterministic_and_reports_progress() {
        let physics = slow_physics();
        let surrogate = fitted_surrogate(2, 2, 450, 29, &physics);
        let cfg = deep_config(&physics);
        // Amplitude-separated classes: a threshold alone can split them,
        // so even a short run should land at perfect training accuracy.
        let dataset = Dataset {
            train: slow_samples(8, 16.0, 6.0),
            test: slow_samples(6, 16.0, 6.0),
        };
        let oracle = |g: &Geometry| oracle_effective_model(g, &physics);

        let report = train_deep(&cfg, &dataset, &surrogate, &physics, &oracle).unwrap();
        let again = train_deep(&cfg, &dataset, &surrogate, &physics, &oracle).unwrap();
        assert_eq!(
            serde_json::to_string(&report).unwrap(),
            serde_json::to_string(&again).unwrap()
        );
        assert_eq!(report.restarts.len(), 2);
        let best = &report.restarts[report.best_restart];
        for r in &report.restarts {
            assert!(best.train_accuracy >= r.train_accuracy);
            for j in 1..r.loss_curve.len() {
                assert!(r.loss_curve[j] <= r.loss_curve[j - 1] + 1e-12);
            }
        }
        assert!(report.train.accuracy >= 0.5);
        assert!(report.element.stiffness.iter().all(|&k| k > 0.0));

        let ckpt = DeepCheckpoint::from_report(&report, Some("surrogate.json".into()));
        let json = serde_json::to_string(&ckpt).unwrap();
        let back: DeepCheckpoint = serde_json::from_str(&json).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.layers.len(), 2);
    }

    #[test]
    fn checkpoint_round_trip() {
        let physics = PhysicsConfig::default();
        let surrogate = fitted_surrogate(2, 2, 450, 71, &physics);
        let dataset = tiny_dataset(3, 2, 900);
        let cfg = TrainConfig {
            rows: 2,
            cols: 2,
            iterations: 3,
            restarts: 2,
            correction_period: 0,
            seed: 2,
            n_steps: 1000,
            ..TrainConfig::default()
        };
        let oracle = |g: &Geometry| oracle_effective_model(g, &physics);
        let report = train_single_layer(&cfg, &dataset, &surrogate, &physics, &oracle).unwrap();

        let ckpt = Checkpoint::from_report(&report, None);
        let json = serde_json::to_string_pretty(&ckpt).unwrap();
        let back: Checkpoint = serde_json::from_str(&json).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.geometry, report.geometry);

        // Report JSON round-trips exactly as well.
        let jr = serde_json::to_string(&report).unwrap();
        let rback: TrainReport = serde_json::from_str(&jr).unwrap();
        assert_eq!(serde_json::to_string(&rback).unwrap(), jr);

        // CSV emitters produce one row per record plus a header.
        let curves = loss_curves_csv(&report.restarts);
        assert!(curves.starts_with("restart,iteration,loss,error_rate\n"));
        let hist = histogram_csv(&report.train.histogram);
        assert_eq!(hist.lines().count(), HISTOGRAM_BINS + 1);
        let en = energies_csv(&report.train.outcomes);
        assert_eq!(en.lines().count(), dataset.train.len() + 1);
    }
}
