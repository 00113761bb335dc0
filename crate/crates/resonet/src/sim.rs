//! Time-domain simulation of second-order systems with classic RK4.
//!
//! The state is the pair `(x, v)` of displacements and velocities; a
//! [`SecondOrderField`] supplies the acceleration. Time is discretized on a
//! fixed grid of width `dt`, and forcing is defined by its samples on that
//! grid: RK4 mid-stages use the average of the two bracketing samples, which
//! is linear interpolation at the half step. Everything downstream (energy
//! readout, gradients, training) builds on the single step primitive
//! [`rk4_step`], so forward runs and gradient replays share bit-identical
//! arithmetic.

use crate::model::EffectiveModel;
use nalgebra::{Cholesky, Complex, DMatrix, DVector};
use thiserror::Error;

/// Default integration step, in seconds.
///
/// Chosen as a non-round number so that no signal of interest sits at an
/// exact integer number of samples per period, which would mask aliasing
/// mistakes in resampling code.
pub const DEFAULT_DT: f64 = 624.7e-9;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("state norm exceeded {threshold:.1e} at step {step}: integration blew up")]
    Blowup { step: usize, threshold: f64 },
    #[error("invalid simulation request: {0}")]
    Config(String),
    #[error("model is invalid: {0}")]
    BadModel(String),
}

/// Which RK4 stage an acceleration request belongs to.
///
/// `Start` is the beginning of step `k` (time `k dt`), `Mid` the half step
/// (`(k + 1/2) dt`, two stages share it), and `End` the end (`(k + 1) dt`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Start,
    Mid,
    End,
}

/// Right-hand side of `x'' = a(t, x, v)` evaluated on the RK4 stage grid.
pub trait SecondOrderField {
    /// Number of displacement coordinates.
    fn dof(&self) -> usize;

    /// Write the acceleration at stage `stage` of step `step` into `out`.
    fn accel_into(
        &self,
        step: usize,
        stage: Stage,
        x: &DVector<f64>,
        v: &DVector<f64>,
        out: &mut DVector<f64>,
    );

    /// Convenience wrapper returning a fresh vector.
    fn accel(&self, step: usize, stage: Stage, x: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.dof());
        self.accel_into(step, stage, x, v, &mut out);
        out
    }
}

/// Reusable stage buffers for [`rk4_step`]; keeps the hot loop free of
/// allocation.
#[derive(Debug, Clone)]
pub struct StepScratch {
    pub a1: DVector<f64>,
    pub a2: DVector<f64>,
    pub a3: DVector<f64>,
    pub a4: DVector<f64>,
    pub sx: DVector<f64>,
    pub sv: DVector<f64>,
    pub tx: DVector<f64>,
    pub tv: DVector<f64>,
    pub ux: DVector<f64>,
    pub uv: DVector<f64>,
}

impl StepScratch {
    pub fn new(n: usize) -> Self {
        let z = || DVector::zeros(n);
        Self {
            a1: z(),
            a2: z(),
            a3: z(),
            a4: z(),
            sx: z(),
            sv: z(),
            tx: z(),
            tv: z(),
            ux: z(),
            uv: z(),
        }
    }
}

/// Advance `(x, v)` in place from step `step` to `step + 1` with one
/// classic RK4 step of width `h`.
pub fn rk4_step<F: SecondOrderField + ?Sized>(
    field: &F,
    step: usize,
    h: f64,
    x: &mut DVector<f64>,
    v: &mut DVector<f64>,
    ws: &mut StepScratch,
) {
    let n = x.len();
    let h2 = 0.5 * h;

    field.accel_into(step, Stage::Start, x, v, &mut ws.a1);

    {
        let (xs, vs) = (x.as_slice(), v.as_slice());
        let (sx, sv) = (ws.sx.as_mut_slice(), ws.sv.as_mut_slice());
        let a1 = ws.a1.as_slice();
        for i in 0..n {
            sx[i] = xs[i] + h2 * vs[i];
            sv[i] = vs[i] + h2 * a1[i];
        }
    }
    field.accel_into(step, Stage::Mid, &ws.sx, &ws.sv, &mut ws.a2);

    {
        let (xs, vs) = (x.as_slice(), v.as_slice());
        let (tx, tv) = (ws.tx.as_mut_slice(), ws.tv.as_mut_slice());
        let (sv, a2) = (ws.sv.as_slice(), ws.a2.as_slice());
        for i in 0..n {
            tx[i] = xs[i] + h2 * sv[i];
            tv[i] = vs[i] + h2 * a2[i];
        }
    }
    field.accel_into(step, Stage::Mid, &ws.tx, &ws.tv, &mut ws.a3);

    {
        let (xs, vs) = (x.as_slice(), v.as_slice());
        let (ux, uv) = (ws.ux.as_mut_slice(), ws.uv.as_mut_slice());
        let (tv, a3) = (ws.tv.as_slice(), ws.a3.as_slice());
        for i in 0..n {
            ux[i] = xs[i] + h * tv[i];
            uv[i] = vs[i] + h * a3[i];
        }
    }
    field.accel_into(step, Stage::End, &ws.ux, &ws.uv, &mut ws.a4);

    let h6 = h / 6.0;
    let (xs, vs) = (x.as_mut_slice(), v.as_mut_slice());
    let (sv, tv, uv) = (ws.sv.as_slice(), ws.tv.as_slice(), ws.uv.as_slice());
    let (a1, a2, a3, a4) = (
        ws.a1.as_slice(),
        ws.a2.as_slice(),
        ws.a3.as_slice(),
        ws.a4.as_slice(),
    );
    for i in 0..n {
        // The x update reads v[i] before the v update overwrites it.
        xs[i] += h6 * (vs[i] + 2.0 * sv[i] + 2.0 * tv[i] + uv[i]);
        vs[i] += h6 * (a1[i] + 2.0 * a2[i] + 2.0 * a3[i] + a4[i]);
    }
}

/// Forcing sample on the RK4 stage grid: the midpoint stage averages the
/// bracketing grid samples, and reads past the end of the sample vector
/// are zero so a system rings down freely once the input ends.
pub(crate) fn stage_sample(samples: &[f64], step: usize, stage: Stage) -> f64 {
    let sample = |k: usize| samples.get(k).copied().unwrap_or(0.0);
    match stage {
        Stage::Start => sample(step),
        Stage::Mid => 0.5 * (sample(step) + sample(step + 1)),
        Stage::End => sample(step + 1),
    }
}

/// How velocities couple back into the acceleration.
#[derive(Debug, Clone)]
pub(crate) enum DampingOp {
    /// `G = mu I`: mass-proportional damping reduces to a scalar.
    Proportional(f64),
    /// General `G = M^-1 B`.
    Dense(DMatrix<f64>),
}

/// Mass structure, kept for solves and gradient scatter.
#[derive(Debug, Clone)]
pub(crate) enum MassOp {
    Diagonal(DVector<f64>),
    Dense(Cholesky<f64, nalgebra::Dyn>),
}

impl MassOp {
    /// `out = M^-1 rhs`.
    pub(crate) fn solve_into(&self, rhs: &DVector<f64>, out: &mut DVector<f64>) {
        match self {
            MassOp::Diagonal(m) => {
                for i in 0..rhs.len() {
                    out[i] = rhs[i] / m[i];
                }
            }
            MassOp::Dense(chol) => {
                out.copy_from(rhs);
                chol.solve_mut(out);
            }
        }
    }
}

/// A linear second-order system `M x'' + B x' + K x = w_in s(t)` prepared
/// for time stepping: the acceleration is `-D x - G v + b s` with
/// `D = M^-1 K`, `G = M^-1 B`, `b = M^-1 w_in`, all precomputed.
///
/// The scalar forcing `s` is defined by its samples on the `dt` grid; a
/// stage index past the end of the samples reads zero, so a system rings
/// down freely once the input ends.
#[derive(Debug, Clone)]
pub struct LinearLattice {
    pub(crate) d: DMatrix<f64>,
    pub(crate) damping: DampingOp,
    pub(crate) b_in: DVector<f64>,
    pub(crate) mass: MassOp,
    pub(crate) forcing: Vec<f64>,
    pub output_index: usize,
}

impl LinearLattice {
    /// Prepare a model for stepping. Fails if the mass matrix is not
    /// positive definite.
    pub fn new(model: &EffectiveModel, forcing: Vec<f64>) -> Result<Self, SimError> {
        Self::build(model, forcing, false)
    }

    /// As [`LinearLattice::new`] but keeps the damping as a full matrix
    /// even when it is proportional to the mass. Exists so that tests can
    /// pin the two code paths against each other.
    pub fn new_dense_damping(model: &EffectiveModel, forcing: Vec<f64>) -> Result<Self, SimError> {
        Self::build(model, forcing, true)
    }

    fn build(model: &EffectiveModel, forcing: Vec<f64>, force_dense: bool) -> Result<Self, SimError> {
        let n = model.dof();
        if model.stiffness.nrows() != n || model.damping.nrows() != n || model.input_weights.len() != n
        {
            return Err(SimError::BadModel("matrix dimensions disagree".into()));
        }
        if model.output_index >= n {
            return Err(SimError::BadModel(format!(
                "output index {} out of range for {} dof",
                model.output_index, n
            )));
        }

        let diag_scale = model.mass.diagonal().amax();
        let mut off_diag: f64 = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    off_diag = off_diag.max(model.mass[(i, j)].abs());
                }
            }
        }
        let mass = if off_diag <= 1e-14 * diag_scale {
            let diag = model.mass.diagonal();
            if diag.iter().any(|&m| m <= 0.0) {
                return Err(SimError::BadModel("mass diagonal must be positive".into()));
            }
            MassOp::Diagonal(diag)
        } else {
            MassOp::Dense(
                Cholesky::new(model.mass.clone())
                    .ok_or_else(|| SimError::BadModel("mass matrix is not positive definite".into()))?,
            )
        };

        let solve_mat = |rhs: &DMatrix<f64>| -> DMatrix<f64> {
            match &mass {
                MassOp::Diagonal(m) => {
                    let mut out = rhs.clone();
                    for i in 0..n {
                        let inv = 1.0 / m[i];
                        for j in 0..n {
                            out[(i, j)] *= inv;
                        }
                    }
                    out
                }
                MassOp::Dense(chol) => {
                    let mut out = rhs.clone();
                    chol.solve_mut(&mut out);
                    out
                }
            }
        };

        let d = solve_mat(&model.stiffness);
        let g = solve_mat(&model.damping);
        let mut b_in = DVector::zeros(n);
        mass.solve_into(&model.input_weights, &mut b_in);

        let mu = g.trace() / n as f64;
        let mut defect: f64 = 0.0;
        for i in 0..n {
            for j in 0..n {
                let target = if i == j { mu } else { 0.0 };
                defect = defect.max((g[(i, j)] - target).abs());
            }
        }
        let damping = if !force_dense && defect <= 1e-12 * mu.abs().max(g.amax()).max(1.0) {
            DampingOp::Proportional(mu)
        } else {
            DampingOp::Dense(g)
        };

        Ok(Self {
            d,
            damping,
            b_in,
            mass,
            forcing,
            output_index: model.output_index,
        })
    }

    /// Forcing sample at a stage of the step grid. Reads past the end of
    /// the sample vector are zero.
    pub fn forcing_at(&self, step: usize, stage: Stage) -> f64 {
        stage_sample(&self.forcing, step, stage)
    }

    /// True when the damping term collapsed to the scalar fast path.
    pub fn damping_is_proportional(&self) -> bool {
        matches!(self.damping, DampingOp::Proportional(_))
    }

    /// True when the mass matrix reduced to its diagonal.
    pub fn mass_is_diagonal(&self) -> bool {
        matches!(self.mass, MassOp::Diagonal(_))
    }
}

impl SecondOrderField for LinearLattice {
    fn dof(&self) -> usize {
        self.d.nrows()
    }

    fn accel_into(
        &self,
        step: usize,
        stage: Stage,
        x: &DVector<f64>,
        v: &DVector<f64>,
        out: &mut DVector<f64>,
    ) {
        out.gemv(-1.0, &self.d, x, 0.0);
        match &self.damping {
            DampingOp::Proportional(mu) => out.axpy(-*mu, v, 1.0),
            DampingOp::Dense(g) => out.gemv(-1.0, g, v, 1.0),
        }
        let s = self.forcing_at(step, stage);
        if s != 0.0 {
            out.axpy(s, &self.b_in, 1.0);
        }
    }
}

/// Grid parameters of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    /// Step width in seconds.
    pub dt: f64,
    /// Number of RK4 steps; the run produces `n_steps + 1` states.
    pub n_steps: usize,
    /// State magnitude beyond which the run is declared divergent.
    pub blowup_threshold: f64,
}

impl SimConfig {
    pub fn new(dt: f64, n_steps: usize) -> Self {
        Self {
            dt,
            n_steps,
            blowup_threshold: 1e12,
        }
    }
}

impl Default for SimConfig {
    fn default() -> Self {
        Self::new(DEFAULT_DT, 0)
    }
}

/// Result of a forward run that records only the readout coordinate.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub dt: f64,
    /// Displacement of the readout coordinate at steps `0..=n_steps`.
    pub readout: Vec<f64>,
    pub final_x: DVector<f64>,
    pub final_v: DVector<f64>,
}

impl Trajectory {
    /// Quadratic readout energy `dt * sum_{k>=1} x_out(t_k)^2`.
    pub fn energy(&self) -> f64 {
        readout_energy(&self.readout, self.dt)
    }
}

/// Quadratic readout energy over a readout series that includes the
/// initial state: the sum runs from the first step, not the initial
/// condition.
pub fn readout_energy(readout: &[f64], dt: f64) -> f64 {
    readout.iter().skip(1).map(|&x| x * x).sum::<f64>() * dt
}

/// Decision rule on the readout energy: positive class when
/// `ln E > threshold`, negative otherwise (ties and `E = 0` are negative).
pub fn classify_log_energy(energy: f64, threshold: f64) -> i8 {
    if energy.ln() > threshold {
        1
    } else {
        -1
    }
}

/// Run `cfg.n_steps` RK4 steps from the zero state, recording the readout
/// coordinate.
pub fn simulate<F: SecondOrderField + ?Sized>(
    field: &F,
    cfg: &SimConfig,
    output_index: usize,
) -> Result<Trajectory, SimError> {
    let n = field.dof();
    simulate_from(field, cfg, output_index, DVector::zeros(n), DVector::zeros(n))
}

/// Run from an explicit initial state.
pub fn simulate_from<F: SecondOrderField + ?Sized>(
    field: &F,
    cfg: &SimConfig,
    output_index: usize,
    mut x: DVector<f64>,
    mut v: DVector<f64>,
) -> Result<Trajectory, SimError> {
    check_cfg(cfg)?;
    if output_index >= field.dof() {
        return Err(SimError::Config(format!(
            "output index {} out of range for {} dof",
            output_index,
            field.dof()
        )));
    }
    let mut ws = StepScratch::new(field.dof());
    let mut readout = Vec::with_capacity(cfg.n_steps + 1);
    readout.push(x[output_index]);
    for step in 0..cfg.n_steps {
        rk4_step(field, step, cfg.dt, &mut x, &mut v, &mut ws);
        readout.push(x[output_index]);
        check_state(step, cfg, &x, &v)?;
    }
    Ok(Trajectory {
        dt: cfg.dt,
        readout,
        final_x: x,
        final_v: v,
    })
}

/// Run and keep every state. Memory scales with `n_steps`; meant for
/// tests and small problems.
pub fn simulate_full<F: SecondOrderField + ?Sized>(
    field: &F,
    cfg: &SimConfig,
    x0: DVector<f64>,
    v0: DVector<f64>,
) -> Result<Vec<(DVector<f64>, DVector<f64>)>, SimError> {
    check_cfg(cfg)?;
    let mut ws = StepScratch::new(field.dof());
    let mut x = x0;
    let mut v = v0;
    let mut states = Vec::with_capacity(cfg.n_steps + 1);
    states.push((x.clone(), v.clone()));
    for step in 0..cfg.n_steps {
        rk4_step(field, step, cfg.dt, &mut x, &mut v, &mut ws);
        check_state(step, cfg, &x, &v)?;
        states.push((x.clone(), v.clone()));
    }
    Ok(states)
}

fn check_cfg(cfg: &SimConfig) -> Result<(), SimError> {
    if !(cfg.dt > 0.0) || !cfg.dt.is_finite() {
        return Err(SimError::Config(format!("dt = {} must be positive", cfg.dt)));
    }
    Ok(())
}

fn check_state(step: usize, cfg: &SimConfig, x: &DVector<f64>, v: &DVector<f64>) -> Result<(), SimError> {
    let m = x.amax().max(v.amax());
    if !m.is_finite() || m > cfg.blowup_threshold {
        return Err(SimError::Blowup {
            step,
            threshold: cfg.blowup_threshold,
        });
    }
    Ok(())
}

/// Total mechanical energy `v^T M v / 2 + x^T K x / 2` of a model state.
pub fn mechanical_energy(model: &EffectiveModel, x: &DVector<f64>, v: &DVector<f64>) -> f64 {
    0.5 * (v.dot(&(&model.mass * v)) + x.dot(&(&model.stiffness * x)))
}

/// One frequency sample of the steady-state response.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferPoint {
    pub freq_hz: f64,
    /// `|x_out / s|` for unit-amplitude harmonic forcing.
    pub magnitude: f64,
    /// Set when the frequency-domain solve was singular or unreliable
    /// (an undamped resonance hit exactly).
    pub singular: bool,
}

/// Frequency response `|e_out^T (K - w^2 M + i w B)^-1 w_in|` sampled at
/// the given frequencies.
pub fn transfer_function(model: &EffectiveModel, freqs_hz: &[f64]) -> Vec<TransferPoint> {
    let n = model.dof();
    let rhs = DVector::from_fn(n, |i, _| Complex::new(model.input_weights[i], 0.0));
    freqs_hz
        .iter()
        .map(|&f| {
            let w = 2.0 * std::f64::consts::PI * f;
            let a = DMatrix::from_fn(n, n, |i, j| {
                Complex::new(
                    model.stiffness[(i, j)] - w * w * model.mass[(i, j)],
                    w * model.damping[(i, j)],
                )
            });
            let norm_a = a.iter().map(|c| c.norm()).fold(0.0f64, f64::max);
            match a.clone().lu().solve(&rhs) {
                Some(z) => {
                    let residual = (&a * &z - &rhs).norm();
                    let denom = norm_a * z.norm() + rhs.norm();
                    let singular = !residual.is_finite() || residual > 1e-8 * denom;
                    let magnitude = z[model.output_index].norm();
                    TransferPoint {
                        freq_hz: f,
                        magnitude,
                        singular: singular || !magnitude.is_finite(),
                    }
                }
                None => TransferPoint {
                    freq_hz: f,
                    magnitude: f64::INFINITY,
                    singular: true,
                },
            }
        })
        .collect()
}
