//! String-cantilever nonlinear element and two-lattice deep networks.
//!
//! A deep network runs the same scalar input through two independent
//! lattices and couples their output displacements into a three-oscillator
//! mechanical element: two "strings" and one "cantilever". The cantilever
//! displacement stiffens or softens the strings, and string vibration
//! pushes on the cantilever in proportion to its squared displacement, so
//! the element acts as an amplitude-dependent gate between linear layers.
//! The network readout integrates the squared displacement of the first
//! string.
//!
//! The coupled terms derive from the interaction potential
//! `gamma_1 x_c x_s1^2 + gamma_2 x_c x_s2^2`: each string sees the
//! effective stiffness `k_s + 2 gamma x_c`, and the cantilever feels the
//! force `-gamma_1 x_s1^2 - gamma_2 x_s2^2`. With damping and external
//! forces removed, the total energy
//!
//! ```text
//! H = sum_j ( m_j v_j^2 / 2 + k_j x_j^2 / 2 )
//!     + gamma_1 x_c x_s1^2 + gamma_2 x_c x_s2^2
//! ```
//!
//! is conserved, which the tests audit directly. (Writing the cantilever
//! coupling as a stiffness modulation `(k_c + gamma x_s^2) x_c` instead
//! would make `x_c = 0` an invariant manifold: a network starting from
//! rest would never engage the nonlinearity, no energy function would be
//! conserved, and doubling the input would exactly quadruple the readout.
//! The potential form above is the one consistent with strings forcing
//! the cantilever through their elongation.)
//!
//! Coupling from the lattices into the element is feedforward only: the
//! element does not load the lattice outputs. Real mechanics would react
//! back; the one-way coupling is a deliberate simplification that keeps
//! the composite stable and trainable.
//!
//! Gradients reuse the stage-resolved reverse sweep from the adjoint
//! machinery: the composite field supplies transposed Jacobian products
//! (which pick up the state-dependent cross terms of the element) and a
//! parameter scatter covering both lattice pencils, the three element
//! stiffnesses, and the two coupling gains. Element masses and the
//! nonlinear constants are treated as fixed hardware, not trainables.

use crate::adjoint::{
    functional_gradient, AdjointField, CheckpointStrategy, GradientRun, PencilGradient,
    ScatterScratch,
};
use crate::model::{EffectiveModel, PencilLayout};
use crate::sim::{
    simulate, stage_sample, LinearLattice, SecondOrderField, SimConfig, SimError, Stage,
    Trajectory,
};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NonlinearError {
    /// An element parameter violates its sign constraint.
    #[error("element invariant violated: {0}")]
    BadElement(String),
    /// A pencil layout disagrees with the lattice it is paired with.
    #[error("layout does not match lattice: {0}")]
    LayoutMismatch(String),
    /// Composite networks keep per-coordinate mass inverses in the
    /// gradient scatter, so lattices with dense mass matrices are not
    /// supported.
    #[error("deep networks require diagonal lattice mass matrices")]
    DenseMass,
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// Two strings and a cantilever. Index order within all per-oscillator
/// arrays is `[s1, s2, c]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NonlinearElement {
    /// Oscillator masses, all positive.
    pub mass: [f64; 3],
    /// Viscous damping coefficients, all nonnegative.
    pub damping: [f64; 3],
    /// Linear stiffnesses, all positive.
    pub stiffness: [f64; 3],
    /// Coupling constant between string 1 and the cantilever.
    pub gamma_s1: f64,
    /// Coupling constant between string 2 and the cantilever.
    pub gamma_s2: f64,
}

impl NonlinearElement {
    pub fn validate(&self) -> Result<(), NonlinearError> {
        for (name, vals, min_ok) in [
            ("mass", &self.mass, false),
            ("damping", &self.damping, true),
            ("stiffness", &self.stiffness, false),
        ] {
            for (i, &v) in vals.iter().enumerate() {
                let ok = v.is_finite() && if min_ok { v >= 0.0 } else { v > 0.0 };
                if !ok {
                    return Err(NonlinearError::BadElement(format!(
                        "{name}[{i}] = {v} out of range"
                    )));
                }
            }
        }
        if !self.gamma_s1.is_finite() || !self.gamma_s2.is_finite() {
            return Err(NonlinearError::BadElement("coupling must be finite".into()));
        }
        Ok(())
    }

    /// Accelerations of `[s1, s2, c]` given displacements, velocities and
    /// instantaneous external forces:
    ///
    /// ```text
    /// m_s1 a_s1 = f_s1 - b_s1 v_s1 - (k_s1 + 2 gamma_1 x_c) x_s1
    /// m_s2 a_s2 = f_s2 - b_s2 v_s2 - (k_s2 + 2 gamma_2 x_c) x_s2
    /// m_c  a_c  = f_c  - b_c  v_c  - k_c x_c - gamma_1 x_s1^2 - gamma_2 x_s2^2
    /// ```
    pub fn accel(&self, x: &[f64; 3], v: &[f64; 3], f: &[f64; 3]) -> [f64; 3] {
        let (g1, g2) = (self.gamma_s1, self.gamma_s2);
        [
            (f[0] - self.damping[0] * v[0] - (self.stiffness[0] + 2.0 * g1 * x[2]) * x[0])
                / self.mass[0],
            (f[1] - self.damping[1] * v[1] - (self.stiffness[1] + 2.0 * g2 * x[2]) * x[1])
                / self.mass[1],
            (f[2] - self.damping[2] * v[2] - self.stiffness[2] * x[2]
                - g1 * x[0] * x[0]
                - g2 * x[1] * x[1])
                / self.mass[2],
        ]
    }

    /// Total mechanical energy including the interaction terms. Constant
    /// along undamped, unforced trajectories.
    pub fn energy(&self, x: &[f64; 3], v: &[f64; 3]) -> f64 {
        let mut h = 0.0;
        for j in 0..3 {
            h += 0.5 * self.mass[j] * v[j] * v[j] + 0.5 * self.stiffness[j] * x[j] * x[j];
        }
        h + self.gamma_s1 * x[2] * x[0] * x[0] + self.gamma_s2 * x[2] * x[1] * x[1]
    }
}

/// The element alone as an integrable field: a scalar forcing drives the
/// three coordinates through fixed input weights, with the same stage
/// sampling convention as the lattice simulator.
#[derive(Debug, Clone)]
pub struct ElementField {
    pub element: NonlinearElement,
    pub input_weights: [f64; 3],
    pub forcing: Vec<f64>,
}

impl SecondOrderField for ElementField {
    fn dof(&self) -> usize {
        3
    }

    fn accel_into(
        &self,
        step: usize,
        stage: Stage,
        x: &DVector<f64>,
        v: &DVector<f64>,
        out: &mut DVector<f64>,
    ) {
        let s = stage_sample(&self.forcing, step, stage);
        let f = [
            self.input_weights[0] * s,
            self.input_weights[1] * s,
            self.input_weights[2] * s,
        ];
        let a = self.element.accel(&[x[0], x[1], x[2]], &[v[0], v[1], v[2]], &f);
        out[0] = a[0];
        out[1] = a[1];
        out[2] = a[2];
    }
}

/// Two lattices feeding one nonlinear element. Both lattices are driven
/// by the same prepared input; the lattice output displacements force the
/// two strings through the gains `kappa_a` and `kappa_b`, and the network
/// readout is the energy of the first string.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeepNetwork {
    pub lattice_a: EffectiveModel,
    pub lattice_b: EffectiveModel,
    pub element: NonlinearElement,
    /// Gain from the lattice-a output displacement to the force on string 1.
    pub kappa_a: f64,
    /// Gain from the lattice-b output displacement to the force on string 2.
    pub kappa_b: f64,
}

impl DeepNetwork {
    /// Full state dimension of the composite system: displacement and
    /// velocity for every lattice coordinate plus the three element
    /// coordinates.
    pub fn state_dim(&self) -> usize {
        2 * (self.lattice_a.dof() + self.lattice_b.dof() + 3)
    }
}

/// Gradient of a scalar functional of a deep-network run with respect to
/// every trainable parameter: both lattice pencils, the three element
/// stiffnesses, and the two coupling gains.
#[derive(Debug, Clone, PartialEq)]
pub struct DeepGradient {
    pub lattice_a: PencilGradient,
    pub lattice_b: PencilGradient,
    /// d/d(k_s1, k_s2, k_c).
    pub stiffness: [f64; 3],
    pub kappa_a: f64,
    pub kappa_b: f64,
}

impl DeepGradient {
    pub fn zeros(layout_a: &PencilLayout, layout_b: &PencilLayout) -> Self {
        Self {
            lattice_a: PencilGradient::zeros(layout_a),
            lattice_b: PencilGradient::zeros(layout_b),
            stiffness: [0.0; 3],
            kappa_a: 0.0,
            kappa_b: 0.0,
        }
    }

    /// Flatten as lattice a, lattice b (each in pencil order), element
    /// stiffnesses, then the two gains.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = self.lattice_a.flat();
        out.extend(self.lattice_b.flat());
        out.extend_from_slice(&self.stiffness);
        out.push(self.kappa_a);
        out.push(self.kappa_b);
        out
    }
}

/// A [`DeepNetwork`] prepared for time stepping. Composite coordinate
/// order: lattice a, lattice b, then `[s1, s2, c]`.
#[derive(Debug, Clone)]
pub struct DeepField {
    a: LinearLattice,
    b: LinearLattice,
    element: NonlinearElement,
    kappa_a: f64,
    kappa_b: f64,
    na: usize,
    nb: usize,
    /// Composite index of the lattice-a output displacement.
    out_a: usize,
    /// Composite index of the lattice-b output displacement.
    out_b: usize,
}

impl DeepField {
    pub fn new(net: &DeepNetwork, forcing: Vec<f64>) -> Result<Self, NonlinearError> {
        net.element.validate()?;
        if !net.kappa_a.is_finite() || !net.kappa_b.is_finite() {
            return Err(NonlinearError::BadElement("coupling gain must be finite".into()));
        }
        let a = LinearLattice::new(&net.lattice_a, forcing.clone())?;
        let b = LinearLattice::new(&net.lattice_b, forcing)?;
        if !a.mass_is_diagonal() || !b.mass_is_diagonal() {
            return Err(NonlinearError::DenseMass);
        }
        let (na, nb) = (a.dof(), b.dof());
        Ok(Self {
            out_a: a.output_index,
            out_b: na + b.output_index,
            a,
            b,
            element: net.element.clone(),
            kappa_a: net.kappa_a,
            kappa_b: net.kappa_b,
            na,
            nb,
        })
    }

    /// Composite index of the first string displacement, the readout
    /// coordinate of the network.
    pub fn readout_index(&self) -> usize {
        self.na + self.nb
    }
}

impl SecondOrderField for DeepField {
    fn dof(&self) -> usize {
        self.na + self.nb + 3
    }

    fn accel_into(
        &self,
        step: usize,
        stage: Stage,
        x: &DVector<f64>,
        v: &DVector<f64>,
        out: &mut DVector<f64>,
    ) {
        let (na, nb) = (self.na, self.nb);
        for (lat, off, n) in [(&self.a, 0, na), (&self.b, na, nb)] {
            let xs = x.rows(off, n);
            let vs = v.rows(off, n);
            let mut os = out.rows_mut(off, n);
            os.gemv(-1.0, &lat.d, &xs, 0.0);
            match &lat.damping {
                crate::sim::DampingOp::Proportional(mu) => os.axpy(-*mu, &vs, 1.0),
                crate::sim::DampingOp::Dense(g) => os.gemv(-1.0, g, &vs, 1.0),
            }
            let s = lat.forcing_at(step, stage);
            if s != 0.0 {
                os.axpy(s, &lat.b_in, 1.0);
            }
        }
        let i = na + nb;
        let f = [
            self.kappa_a * x[self.out_a],
            self.kappa_b * x[self.out_b],
            0.0,
        ];
        let a = self
            .element
            .accel(&[x[i], x[i + 1], x[i + 2]], &[v[i], v[i + 1], v[i + 2]], &f);
        out[i] = a[0];
        out[i + 1] = a[1];
        out[i + 2] = a[2];
    }
}

/// A [`DeepField`] paired with the structural layouts its lattice
/// gradients are scattered into.
pub struct DeepAdjoint<'a> {
    pub field: &'a DeepField,
    pub layout_a: &'a PencilLayout,
    pub layout_b: &'a PencilLayout,
}

impl SecondOrderField for DeepAdjoint<'_> {
    fn dof(&self) -> usize {
        self.field.dof()
    }

    fn accel_into(
        &self,
        step: usize,
        stage: Stage,
        x: &DVector<f64>,
        v: &DVector<f64>,
        out: &mut DVector<f64>,
    ) {
        self.field.accel_into(step, stage, x, v, out);
    }
}

impl AdjointField for DeepAdjoint<'_> {
    type ParamGrad = DeepGradient;

    fn jt_accel_into(
        &self,
        _step: usize,
        _stage: Stage,
        x: &DVector<f64>,
        _v: &DVector<f64>,
        w: &DVector<f64>,
        out_x: &mut DVector<f64>,
        out_v: &mut DVector<f64>,
    ) {
        let f = self.field;
        let (na, nb) = (f.na, f.nb);
        for (lat, off, n) in [(&f.a, 0, na), (&f.b, na, nb)] {
            let ws = w.rows(off, n);
            out_x.rows_mut(off, n).gemv_tr(-1.0, &lat.d, &ws, 0.0);
            match &lat.damping {
                crate::sim::DampingOp::Proportional(mu) => {
                    for j in off..off + n {
                        out_v[j] = -mu * w[j];
                    }
                }
                crate::sim::DampingOp::Dense(g) => {
                    out_v.rows_mut(off, n).gemv_tr(-1.0, g, &ws, 0.0)
                }
            }
        }
        let i = na + nb;
        let el = &f.element;
        let (m1, m2, m3) = (el.mass[0], el.mass[1], el.mass[2]);
        let (g1, g2) = (el.gamma_s1, el.gamma_s2);
        let (x1, x2, xc) = (x[i], x[i + 1], x[i + 2]);
        let (w1, w2, wc) = (w[i], w[i + 1], w[i + 2]);
        out_x[i] = -((el.stiffness[0] + 2.0 * g1 * xc) / m1) * w1 - (2.0 * g1 * x1 / m3) * wc;
        out_x[i + 1] = -((el.stiffness[1] + 2.0 * g2 * xc) / m2) * w2 - (2.0 * g2 * x2 / m3) * wc;
        out_x[i + 2] =
            -(2.0 * g1 * x1 / m1) * w1 - (2.0 * g2 * x2 / m2) * w2 - (el.stiffness[2] / m3) * wc;
        out_v[i] = -(el.damping[0] / m1) * w1;
        out_v[i + 1] = -(el.damping[1] / m2) * w2;
        out_v[i + 2] = -(el.damping[2] / m3) * wc;
        // Feedforward coupling: the string forces read lattice output
        // displacements, so their adjoint weights flow back into those
        // coordinates. Added after the block overwrites above.
        out_x[f.out_a] += f.kappa_a / m1 * w1;
        out_x[f.out_b] += f.kappa_b / m2 * w2;
    }

    fn scatter_stage(
        &self,
        _step: usize,
        _stage: Stage,
        x: &DVector<f64>,
        v: &DVector<f64>,
        a: &DVector<f64>,
        w: &DVector<f64>,
        _tmp: &mut ScatterScratch,
        grad: &mut DeepGradient,
    ) {
        let f = self.field;
        scatter_block(&f.a, self.layout_a, 0, x, v, a, w, &mut grad.lattice_a);
        scatter_block(&f.b, self.layout_b, f.na, x, v, a, w, &mut grad.lattice_b);
        let i = f.na + f.nb;
        let el = &f.element;
        let z1 = w[i] / el.mass[0];
        let z2 = w[i + 1] / el.mass[1];
        let z3 = w[i + 2] / el.mass[2];
        grad.stiffness[0] -= z1 * x[i];
        grad.stiffness[1] -= z2 * x[i + 1];
        grad.stiffness[2] -= z3 * x[i + 2];
        grad.kappa_a += z1 * x[f.out_a];
        grad.kappa_b += z2 * x[f.out_b];
    }
}

/// Pencil scatter for one lattice block at an offset into the composite
/// state, with the same fixed-velocity-coupling mass rule as the
/// single-lattice adjoint.
#[allow(clippy::too_many_arguments)]
fn scatter_block(
    lat: &LinearLattice,
    layout: &PencilLayout,
    off: usize,
    x: &DVector<f64>,
    v: &DVector<f64>,
    a: &DVector<f64>,
    w: &DVector<f64>,
    grad: &mut PencilGradient,
) {
    let n = layout.n_sites;
    let m = match &lat.mass {
        crate::sim::MassOp::Diagonal(m) => m,
        // Rejected when the field is constructed.
        crate::sim::MassOp::Dense(_) => unreachable!("dense mass in deep network"),
    };
    match &lat.damping {
        crate::sim::DampingOp::Proportional(mu) => {
            for i in 0..n {
                let z = w[off + i] / m[i];
                grad.k_diag[i] -= z * x[off + i];
                grad.m_diag[i] -= z * (a[off + i] + mu * v[off + i]);
            }
        }
        crate::sim::DampingOp::Dense(g) => {
            for i in 0..n {
                let mut gv = 0.0;
                for j in 0..n {
                    gv += g[(i, j)] * v[off + j];
                }
                let z = w[off + i] / m[i];
                grad.k_diag[i] -= z * x[off + i];
                grad.m_diag[i] -= z * (a[off + i] + gv);
            }
        }
    }
    for (idx, &(pa, pb)) in layout.pairs.iter().enumerate() {
        let za = w[off + pa] / m[pa];
        let zb = w[off + pb] / m[pb];
        grad.k_pairs[idx] -= za * x[off + pb] + zb * x[off + pa];
    }
}

/// Integrate a deep network from rest. The returned trajectory records the
/// first string displacement, and its [`Trajectory::energy`] is the
/// network readout. Divergent runs (possible for strong softening
/// coupling) surface as a blowup error carrying the step index.
pub fn deep_forward(
    net: &DeepNetwork,
    forcing: &[f64],
    cfg: &SimConfig,
) -> Result<Trajectory, NonlinearError> {
    let field = DeepField::new(net, forcing.to_vec())?;
    let idx = field.readout_index();
    Ok(simulate(&field, cfg, idx)?)
}

/// Gradient of `loss(E)` for a deep-network run, where `E` is the readout
/// energy. `loss_grad` maps the forward energy to `dL/dE`; the reverse
/// sweep is the exact adjoint of the discrete RK4 map, including the
/// state-dependent cross terms of the element.
pub fn deep_gradient(
    net: &DeepNetwork,
    layout_a: &PencilLayout,
    layout_b: &PencilLayout,
    forcing: &[f64],
    cfg: &SimConfig,
    strategy: CheckpointStrategy,
    loss_grad: impl FnOnce(f64) -> f64,
) -> Result<(DeepGradient, GradientRun), NonlinearError> {
    let field = DeepField::new(net, forcing.to_vec())?;
    if layout_a.n_sites != field.na {
        return Err(NonlinearError::LayoutMismatch(format!(
            "layout a has {} sites, lattice a has {} coordinates",
            layout_a.n_sites, field.na
        )));
    }
    if layout_b.n_sites != field.nb {
        return Err(NonlinearError::LayoutMismatch(format!(
            "layout b has {} sites, lattice b has {} coordinates",
            layout_b.n_sites, field.nb
        )));
    }
    let adjoint = DeepAdjoint {
        field: &field,
        layout_a,
        layout_b,
    };
    let mut grad = DeepGradient::zeros(layout_a, layout_b);
    let idx = field.readout_index();
    let run = functional_gradient(&adjoint, cfg, idx, strategy, loss_grad, &mut grad)?;
    Ok((grad, run))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::quadrature_amplitude;
    use crate::model::{oracle_effective_model, Geometry, PhysicsConfig};
    use crate::sim::{simulate_from, DampingOp};
    use nalgebra::DMatrix;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn test_element() -> NonlinearElement {
        NonlinearElement {
            mass: [1.0, 1.2, 0.8],
            damping: [0.0, 0.0, 0.0],
            stiffness: [
                (2.0 * PI).powi(2),
                (2.0 * PI * 1.3).powi(2),
                (2.0 * PI * 0.75).powi(2),
            ],
            gamma_s1: 2.0,
            gamma_s2: 1.5,
        }
    }

    /// Lattice physics slowed to order-1 Hz so composite tests can use
    /// generous step counts at small phase error per step.
    fn slow_physics() -> PhysicsConfig {
        PhysicsConfig {
            f0_hz: 1.0,
            quality_factor: 30.0,
            ..PhysicsConfig::default()
        }
    }

    fn sine_forcing(freq: f64, dt: f64, n: usize) -> Vec<f64> {
        (0..n).map(|k| (2.0 * PI * freq * k as f64 * dt).sin()).collect()
    }

    #[test]
    fn element_invariants_rejected() {
        let mut el = test_element();
        assert!(el.validate().is_ok());
        el.mass[1] = 0.0;
        assert!(matches!(el.validate(), Err(NonlinearError::BadElement(_))));
        el = test_element();
        el.damping[2] = -0.1;
        assert!(matches!(el.validate(), Err(NonlinearError::BadElement(_))));
        el = test_element();
        el.stiffness[0] = -1.0;
        assert!(matches!(el.validate(), Err(NonlinearError::BadElement(_))));
        el = test_element();
        el.gamma_s1 = f64::NAN;
        assert!(matches!(el.validate(), Err(NonlinearError::BadElement(_))));
    }

    /// With the couplings off the element is three independent damped
    /// oscillators, and its accelerations agree with the linear simulator
    /// on the same three-coordinate model up to rounding in the different
    /// evaluation orders.
    #[test]
    fn gamma_zero_decouples_to_linear_oscillators() {
        let mut el = test_element();
        el.damping = [0.3, 0.1, 0.5];
        el.gamma_s1 = 0.0;
        el.gamma_s2 = 0.0;
        let weights = [1.0, -0.4, 0.7];

        let model = EffectiveModel {
            mass: DMatrix::from_diagonal(&DVector::from_row_slice(&el.mass)),
            stiffness: DMatrix::from_diagonal(&DVector::from_row_slice(&el.stiffness)),
            damping: DMatrix::from_diagonal(&DVector::from_row_slice(&el.damping)),
            input_weights: DVector::from_row_slice(&weights),
            output_index: 0,
        };
        let forcing = sine_forcing(0.9, 1e-3, 2000);
        let linear = LinearLattice::new(&model, forcing.clone()).unwrap();
        let field = ElementField {
            element: el.clone(),
            input_weights: weights,
            forcing,
        };

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for step in [0usize, 31, 1999, 2500] {
            for stage in [Stage::Start, Stage::Mid, Stage::End] {
                let x = DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
                let v = DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
                let a_el = field.accel(step, stage, &x, &v);
                let a_lin = linear.accel(step, stage, &x, &v);
                for j in 0..3 {
                    let tol = 8.0 * f64::EPSILON * a_lin[j].abs().max(1e-3);
                    assert!(
                        (a_el[j] - a_lin[j]).abs() <= tol,
                        "step {step} coord {j}: {} vs {}",
                        a_el[j],
                        a_lin[j]
                    );
                }
            }
        }

        let cfg = SimConfig::new(1e-3, 3000);
        let t_el = simulate(&field, &cfg, 0).unwrap();
        let t_lin = simulate(&linear, &cfg, 0).unwrap();
        let scale = t_lin.final_x.amax().max(t_lin.final_v.amax());
        for j in 0..3 {
            assert!((t_el.final_x[j] - t_lin.final_x[j]).abs() <= 1e-12 * scale);
            assert!((t_el.final_v[j] - t_lin.final_v[j]).abs() <= 1e-12 * scale);
        }
    }

    /// Holding the cantilever at a fixed deflection shifts the string
    /// resonance to sqrt((k_s1 + 2 gamma X) / m_s1) / 2 pi. The cantilever
    /// is pinned by giving it an enormous mass and starting it displaced.
    #[test]
    fn frozen_cantilever_shifts_string_resonance() {
        let deflection = 0.5;
        let gamma = 1000.0;
        let k1 = (2.0 * PI * 10.0).powi(2);
        let el = NonlinearElement {
            mass: [1.0, 1.0, 1e18],
            damping: [2.3447, 0.0, 0.0],
            stiffness: [k1, k1, (2.0 * PI).powi(2)],
            gamma_s1: gamma,
            gamma_s2: 0.0,
        };
        let predicted = ((k1 + 2.0 * gamma * deflection) / el.mass[0]).sqrt() / (2.0 * PI);
        assert!((predicted - 11.1954).abs() < 1e-3);

        let dt = 5e-4;
        let n_steps = 12_000;
        let sweep = [10.0, 10.6, predicted, 11.8, 12.4];
        let mut amps = Vec::new();
        for &freq in &sweep {
            let field = ElementField {
                element: el.clone(),
                input_weights: [1.0, 0.0, 0.0],
                forcing: sine_forcing(freq, dt, n_steps + 1),
            };
            let mut x0 = DVector::zeros(3);
            x0[2] = deflection;
            let cfg = SimConfig::new(dt, n_steps);
            let traj = simulate_from(&field, &cfg, 0, x0, DVector::zeros(3)).unwrap();
            // Steady-state tail, after the transient has decayed.
            let tail = &traj.readout[n_steps / 2..];
            amps.push(quadrature_amplitude(tail, 1.0 / dt, freq));
        }
        let peak = amps
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        assert_eq!(peak, 2, "amplitudes {amps:?}");
        // The unshifted resonance at 10 Hz is well off the peak.
        assert!(amps[2] > 3.0 * amps[0], "amplitudes {amps:?}");
    }

    /// Undamped, unforced motion conserves the full energy including the
    /// cubic interaction terms; dropping those terms from the audit makes
    /// the drift three orders of magnitude larger, so the check is not
    /// vacuous. With the couplings off, the quadratic energy alone is
    /// conserved.
    #[test]
    fn conserved_energy_audit() {
        let el = test_element();
        let field = ElementField {
            element: el.clone(),
            input_weights: [0.0; 3],
            forcing: Vec::new(),
        };
        let x0 = DVector::from_row_slice(&[0.3, -0.2, 0.4]);
        let cfg = SimConfig::new(1e-3, 5000);
        let states =
            crate::sim::simulate_full(&field, &cfg, x0.clone(), DVector::zeros(3)).unwrap();
        let h0 = el.energy(&[x0[0], x0[1], x0[2]], &[0.0; 3]);
        let mut max_full: f64 = 0.0;
        let mut max_quad: f64 = 0.0;
        for (x, v) in &states {
            let xs = [x[0], x[1], x[2]];
            let vs = [v[0], v[1], v[2]];
            let h = el.energy(&xs, &vs);
            max_full = max_full.max((h - h0).abs() / h0.abs());
            let mut quad = NonlinearElement {
                gamma_s1: 0.0,
                gamma_s2: 0.0,
                ..el.clone()
            }
            .energy(&xs, &vs);
            quad -= h0 - el.gamma_s1 * x0[2] * x0[0] * x0[0] - el.gamma_s2 * x0[2] * x0[1] * x0[1];
            max_quad = max_quad.max(quad.abs() / h0.abs());
        }
        assert!(max_full < 1e-6, "full energy drift {max_full}");
        assert!(max_quad > 1e-3, "quadratic part should exchange energy, drift {max_quad}");

        // Couplings off: the quadratic energy is itself conserved.
        let lin = NonlinearElement {
            gamma_s1: 0.0,
            gamma_s2: 0.0,
            ..el
        };
        let lin_field = ElementField {
            element: lin.clone(),
            input_weights: [0.0; 3],
            forcing: Vec::new(),
        };
        let states = crate::sim::simulate_full(&lin_field, &cfg, x0.clone(), DVector::zeros(3)).unwrap();
        let h0 = lin.energy(&[x0[0], x0[1], x0[2]], &[0.0; 3]);
        for (x, v) in &states {
            let h = lin.energy(&[x[0], x[1], x[2]], &[v[0], v[1], v[2]]);
            assert!((h - h0).abs() / h0.abs() < 1e-9);
        }
    }

    /// Two-lattice network at an operating point where the element is
    /// solidly nonlinear (|x_c| reaches ~0.4 against the softening limit
    /// k_c / 2 gamma) yet both the nominal and doubled inputs stay
    /// bounded. Drive with [`strong_forcing`].
    fn slow_network(seed_a: u64, seed_b: u64) -> (DeepNetwork, PencilLayout, PencilLayout) {
        let phys = slow_physics();
        let ga = Geometry::random(2, 2, seed_a).unwrap();
        let gb = Geometry::random(2, 2, seed_b).unwrap();
        let k1 = (2.0 * PI).powi(2);
        let net = DeepNetwork {
            lattice_a: oracle_effective_model(&ga, &phys),
            lattice_b: oracle_effective_model(&gb, &phys),
            element: NonlinearElement {
                mass: [1.0, 1.0, 1.0],
                damping: [0.3, 0.3, 0.5],
                stiffness: [k1, 1.1 * k1, 0.2 * k1],
                gamma_s1: 3.0,
                gamma_s2: 2.0,
            },
            kappa_a: 2.0,
            kappa_b: 1.5,
        };
        (net, PencilLayout::lattice(2, 2), PencilLayout::lattice(2, 2))
    }

    fn strong_forcing(dt: f64, n: usize) -> Vec<f64> {
        sine_forcing(1.0, dt, n).iter().map(|s| 16.0 * s).collect()
    }

    #[test]
    fn zero_input_zero_energy() {
        let (net, _, _) = slow_network(11, 12);
        let cfg = SimConfig::new(1e-3, 500);
        let traj = deep_forward(&net, &[0.0; 200], &cfg).unwrap();
        assert_eq!(traj.energy(), 0.0);
    }

    /// With the second path and the couplings off, the composite run is a
    /// linear cascade: lattice a followed by the string-1 filter. Running
    /// the two stages separately, with the sampled lattice output as the
    /// second stage's forcing, must give the same readout energy up to the
    /// different stage interpolation of the intermediate signal.
    #[test]
    fn deep_reduces_to_linear_pipeline() {
        let (mut net, _, _) = slow_network(13, 14);
        net.element.gamma_s1 = 0.0;
        net.element.gamma_s2 = 0.0;
        net.kappa_b = 0.0;
        net.kappa_a = 10.0;
        let dt = 1e-3;
        let forcing = sine_forcing(1.0, dt, 2000);
        let cfg = SimConfig::new(dt, 4000);

        let deep = deep_forward(&net, &forcing, &cfg).unwrap();

        let stage1 = LinearLattice::new(&net.lattice_a, forcing).unwrap();
        let t1 = simulate(&stage1, &cfg, net.lattice_a.output_index).unwrap();
        let s1_model = EffectiveModel {
            mass: DMatrix::from_element(1, 1, net.element.mass[0]),
            stiffness: DMatrix::from_element(1, 1, net.element.stiffness[0]),
            damping: DMatrix::from_element(1, 1, net.element.damping[0]),
            input_weights: DVector::from_element(1, net.kappa_a),
            output_index: 0,
        };
        let stage2 = LinearLattice::new(&s1_model, t1.readout.clone()).unwrap();
        let t2 = simulate(&stage2, &cfg, 0).unwrap();

        let rel = (deep.energy() - t2.energy()).abs() / t2.energy();
        assert!(rel < 1e-3, "pipeline mismatch {rel}");
        assert!(t2.energy() > 0.0);
    }

    /// Doubling the input exactly quadruples the readout of any linear
    /// path; with the couplings on it must not.
    #[test]
    fn nonlinearity_witness() {
        let (mut net, _, _) = slow_network(19, 20);
        let dt = 1e-3;
        let forcing = strong_forcing(dt, 3000);
        let cfg = SimConfig::new(dt, 4000);

        let e1 = deep_forward(&net, &forcing, &cfg).unwrap().energy();
        let doubled: Vec<f64> = forcing.iter().map(|s| 2.0 * s).collect();
        let e2 = deep_forward(&net, &doubled, &cfg).unwrap().energy();
        let ratio = e2 / e1;
        assert!(
            (ratio - 4.0).abs() > 0.2,
            "nonlinearity too weak: ratio {ratio}"
        );

        // Control: same network with the couplings off scales exactly.
        net.element.gamma_s1 = 0.0;
        net.element.gamma_s2 = 0.0;
        let e1 = deep_forward(&net, &forcing, &cfg).unwrap().energy();
        let e2 = deep_forward(&net, &doubled, &cfg).unwrap().energy();
        assert!((e2 / e1 - 4.0).abs() < 1e-12);
    }

    /// Strong softening coupling drives the effective string stiffness
    /// negative and the state escapes; the run must report the divergence
    /// rather than return garbage.
    #[test]
    fn divergent_run_reports_blowup() {
        let (mut net, _, _) = slow_network(17, 18);
        net.kappa_a = 5e3;
        net.element.gamma_s1 = 5e3;
        let dt = 1e-3;
        let forcing = sine_forcing(1.0, dt, 4000);
        let cfg = SimConfig::new(dt, 6000);
        match deep_forward(&net, &forcing, &cfg) {
            Err(NonlinearError::Sim(SimError::Blowup { .. })) => {}
            other => panic!("expected blowup, got {other:?}"),
        }
    }

    /// Central finite differences over every trainable parameter: both
    /// lattice pencils (mass steps rebuild the damping so the velocity
    /// coupling stays fixed, matching the scatter convention), element
    /// stiffnesses and both gains. Loss is log energy.
    #[test]
    fn deep_gradient_matches_finite_differences() {
        let (net, layout_a, layout_b) = slow_network(19, 20);
        let dt = 1e-3;
        let forcing = strong_forcing(dt, 3000);
        let cfg = SimConfig::new(dt, 4000);

        let (grad, _) = deep_gradient(
            &net,
            &layout_a,
            &layout_b,
            &forcing,
            &cfg,
            CheckpointStrategy::Dense,
            |e| 1.0 / e,
        )
        .unwrap();

        let eval = |n: &DeepNetwork| deep_forward(n, &forcing, &cfg).unwrap().energy().ln();
        let central = |hi: f64, lo: f64, h: f64| (hi - lo) / (2.0 * h);
        let mut fd = DeepGradient::zeros(&layout_a, &layout_b);

        for (which, layout) in [(0usize, &layout_a), (1, &layout_b)] {
            let model = if which == 0 { &net.lattice_a } else { &net.lattice_b };
            let k_scale = model.stiffness.diagonal().amax();
            let g_op = {
                let mut g = model.damping.clone();
                for i in 0..g.nrows() {
                    let inv = 1.0 / model.mass[(i, i)];
                    for j in 0..g.ncols() {
                        g[(i, j)] *= inv;
                    }
                }
                g
            };
            let perturbed = |f: &dyn Fn(&mut EffectiveModel)| {
                let mut n2 = net.clone();
                {
                    let m = if which == 0 { &mut n2.lattice_a } else { &mut n2.lattice_b };
                    f(m);
                }
                n2
            };
            let pg = if which == 0 { &mut fd.lattice_a } else { &mut fd.lattice_b };
            for i in 0..layout.n_sites {
                let h = 1e-6 * k_scale;
                let hi = eval(&perturbed(&|m| m.stiffness[(i, i)] += h));
                let lo = eval(&perturbed(&|m| m.stiffness[(i, i)] -= h));
                pg.k_diag[i] = central(hi, lo, h);
            }
            for (idx, &(a, b)) in layout.pairs.iter().enumerate() {
                let h = 1e-6 * k_scale;
                let bump = move |m: &mut EffectiveModel, s: f64| {
                    m.stiffness[(a, b)] += s;
                    m.stiffness[(b, a)] += s;
                };
                let hi = eval(&perturbed(&|m| bump(m, h)));
                let lo = eval(&perturbed(&|m| bump(m, -h)));
                pg.k_pairs[idx] = central(hi, lo, h);
            }
            for i in 0..layout.n_sites {
                let h = 1e-6;
                let g_op = g_op.clone();
                let bump = move |m: &mut EffectiveModel, s: f64| {
                    m.mass[(i, i)] += s;
                    m.damping = &m.mass * &g_op;
                };
                let hi = eval(&perturbed(&|m| bump(m, h)));
                let lo = eval(&perturbed(&|m| bump(m, -h)));
                pg.m_diag[i] = central(hi, lo, h);
            }
        }
        for j in 0..3 {
            let h = 1e-6 * net.element.stiffness[j];
            let mut hi_net = net.clone();
            hi_net.element.stiffness[j] += h;
            let mut lo_net = net.clone();
            lo_net.element.stiffness[j] -= h;
            fd.stiffness[j] = central(eval(&hi_net), eval(&lo_net), h);
        }
        for (get, slot) in [(0usize, 0usize), (1, 1)] {
            let h = 1e-6;
            let mut hi_net = net.clone();
            let mut lo_net = net.clone();
            if get == 0 {
                hi_net.kappa_a += h;
                lo_net.kappa_a -= h;
            } else {
                hi_net.kappa_b += h;
                lo_net.kappa_b -= h;
            }
            let val = central(eval(&hi_net), eval(&lo_net), h);
            if slot == 0 {
                fd.kappa_a = val;
            } else {
                fd.kappa_b = val;
            }
        }

        let cand = grad.flat();
        let refv = fd.flat();
        let scale = refv.iter().fold(0.0f64, |m, &x| m.max(x.abs()));
        let mut worst = 0.0f64;
        for (c, r) in cand.iter().zip(refv.iter()) {
            worst = worst.max((c - r).abs() / (r.abs() + 1e-12 * scale));
        }
        assert!(worst < 1e-4, "gradient mismatch {worst}");

        // Checkpointed replay is bit-identical, so the gradient is too.
        let (grad_ck, _) = deep_gradient(
            &net,
            &layout_a,
            &layout_b,
            &forcing,
            &cfg,
            CheckpointStrategy::SqrtN,
            |e| 1.0 / e,
        )
        .unwrap();
        assert_eq!(grad.flat(), grad_ck.flat());
    }

    /// With gamma_s2 off, string 2 influences nothing the readout can see,
    /// so the whole second path has exactly zero gradient: no adjoint
    /// weight ever enters it.
    #[test]
    fn decoupled_second_path_has_zero_gradient() {
        let (mut net, layout_a, layout_b) = slow_network(23, 24);
        net.element.gamma_s2 = 0.0;
        let dt = 1e-3;
        let forcing = sine_forcing(1.0, dt, 300);
        let cfg = SimConfig::new(dt, 400);
        let (grad, _) = deep_gradient(
            &net,
            &layout_a,
            &layout_b,
            &forcing,
            &cfg,
            CheckpointStrategy::Dense,
            |e| 1.0 / e,
        )
        .unwrap();
        assert_eq!(grad.kappa_b, 0.0);
        assert!(grad.lattice_b.flat().iter().all(|&g| g == 0.0));
        assert_eq!(grad.stiffness[1], 0.0);
        // The first path must still carry gradient.
        assert!(grad.kappa_a != 0.0);
        assert!(grad.lattice_a.k_diag.amax() > 0.0);
    }

    /// With the couplings off the composite is one big linear system, so
    /// the block-structured adjoint must agree with the dense linear
    /// adjoint run on the explicitly assembled composite model.
    #[test]
    fn gamma_zero_matches_dense_linear_adjoint() {
        let (mut net, layout_a, layout_b) = slow_network(27, 28);
        net.element.gamma_s1 = 0.0;
        net.element.gamma_s2 = 0.0;
        let dt = 1e-3;
        let forcing = sine_forcing(1.0, dt, 300);
        let cfg = SimConfig::new(dt, 400);

        let (grad, _) = deep_gradient(
            &net,
            &layout_a,
            &layout_b,
            &forcing,
            &cfg,
            CheckpointStrategy::Dense,
            |e| 1.0 / e,
        )
        .unwrap();

        let (na, nb) = (net.lattice_a.dof(), net.lattice_b.dof());
        let n = na + nb + 3;
        let mut mass = DMatrix::zeros(n, n);
        let mut stiffness = DMatrix::zeros(n, n);
        let mut damping = DMatrix::zeros(n, n);
        let mut input = DVector::zeros(n);
        for (model, off) in [(&net.lattice_a, 0), (&net.lattice_b, na)] {
            let nl = model.dof();
            for i in 0..nl {
                for j in 0..nl {
                    mass[(off + i, off + j)] = model.mass[(i, j)];
                    stiffness[(off + i, off + j)] = model.stiffness[(i, j)];
                    damping[(off + i, off + j)] = model.damping[(i, j)];
                }
                input[off + i] = model.input_weights[i];
            }
        }
        let i = na + nb;
        for j in 0..3 {
            mass[(i + j, i + j)] = net.element.mass[j];
            stiffness[(i + j, i + j)] = net.element.stiffness[j];
            damping[(i + j, i + j)] = net.element.damping[j];
        }
        // Feedforward gains enter as one-sided stiffness coupling.
        stiffness[(i, net.lattice_a.output_index)] = -net.kappa_a;
        stiffness[(i + 1, na + net.lattice_b.output_index)] = -net.kappa_b;
        let composite = EffectiveModel {
            mass,
            stiffness,
            damping,
            input_weights: input,
            output_index: i,
        };
        let mut pairs = layout_a.pairs.clone();
        pairs.extend(layout_b.pairs.iter().map(|&(a, b)| (na + a, na + b)));
        let union = PencilLayout { n_sites: n, pairs };

        let lattice = LinearLattice::new(&composite, forcing.clone()).unwrap();
        let adj = crate::adjoint::LatticeAdjoint {
            field: &lattice,
            layout: &union,
        };
        let mut dense = PencilGradient::zeros(&union);
        functional_gradient(&adj, &cfg, i, CheckpointStrategy::Dense, |e| 1.0 / e, &mut dense)
            .unwrap();

        let check = |got: f64, want: f64| {
            let tol = 1e-10 * want.abs().max(1e-12);
            assert!((got - want).abs() <= tol, "{got} vs {want}");
        };
        for j in 0..na {
            check(grad.lattice_a.k_diag[j], dense.k_diag[j]);
            check(grad.lattice_a.m_diag[j], dense.m_diag[j]);
        }
        for j in 0..nb {
            check(grad.lattice_b.k_diag[j], dense.k_diag[na + j]);
            check(grad.lattice_b.m_diag[j], dense.m_diag[na + j]);
        }
        for (idx, _) in layout_a.pairs.iter().enumerate() {
            check(grad.lattice_a.k_pairs[idx], dense.k_pairs[idx]);
        }
        for (idx, _) in layout_b.pairs.iter().enumerate() {
            check(grad.lattice_b.k_pairs[idx], dense.k_pairs[layout_a.pairs.len() + idx]);
        }
        for j in 0..3 {
            check(grad.stiffness[j], dense.k_diag[i + j]);
        }
    }

    #[test]
    fn network_serde_round_trip() {
        let (net, _, _) = slow_network(31, 32);
        let json = serde_json::to_string(&net).unwrap();
        let back: DeepNetwork = serde_json::from_str(&json).unwrap();
        assert_eq!(net, back);
    }

    #[test]
    fn layout_mismatch_rejected() {
        let (net, layout_a, _) = slow_network(33, 34);
        let bad = PencilLayout::lattice(3, 3);
        let cfg = SimConfig::new(1e-3, 10);
        let err = deep_gradient(
            &net,
            &layout_a,
            &bad,
            &[1.0; 10],
            &cfg,
            CheckpointStrategy::Dense,
            |e| 1.0 / e,
        )
        .unwrap_err();
        assert!(matches!(err, NonlinearError::LayoutMismatch(_)));
    }

    /// Dense damping fast path: a lattice whose damping is not
    /// mass-proportional still gets exact gradients (exercises the dense
    /// branches of the block scatter and transposed products).
    #[test]
    fn dense_damping_block_matches_finite_differences() {
        let (mut net, layout_a, layout_b) = slow_network(35, 36);
        // Perturb one damping entry so the proportional detection fails.
        net.lattice_a.damping[(0, 1)] += 0.05;
        net.lattice_a.damping[(1, 0)] += 0.05;
        let dt = 1e-3;
        let forcing = sine_forcing(1.0, dt, 300);
        let cfg = SimConfig::new(dt, 400);
        let field = DeepField::new(&net, forcing.clone()).unwrap();
        assert!(matches!(field.a.damping, DampingOp::Dense(_)));

        let (grad, _) = deep_gradient(
            &net,
            &layout_a,
            &layout_b,
            &forcing,
            &cfg,
            CheckpointStrategy::Dense,
            |e| 1.0 / e,
        )
        .unwrap();

        let eval = |n: &DeepNetwork| deep_forward(n, &forcing, &cfg).unwrap().energy().ln();
        // Spot-check a stiffness diagonal and a mass diagonal on the dense
        // block; the full sweep lives in the main finite-difference test.
        let k_scale = net.lattice_a.stiffness.diagonal().amax();
        let h = 1e-6 * k_scale;
        let mut hi = net.clone();
        hi.lattice_a.stiffness[(2, 2)] += h;
        let mut lo = net.clone();
        lo.lattice_a.stiffness[(2, 2)] -= h;
        let fd_k = (eval(&hi) - eval(&lo)) / (2.0 * h);
        assert!((grad.lattice_a.k_diag[2] - fd_k).abs() <= 1e-4 * fd_k.abs());

        let g_op = {
            let mut g = net.lattice_a.damping.clone();
            for i in 0..g.nrows() {
                let inv = 1.0 / net.lattice_a.mass[(i, i)];
                for j in 0..g.ncols() {
                    g[(i, j)] *= inv;
                }
            }
            g
        };
        let h = 1e-6;
        let mut hi = net.clone();
        hi.lattice_a.mass[(1, 1)] += h;
        hi.lattice_a.damping = &hi.lattice_a.mass * &g_op;
        let mut lo = net.clone();
        lo.lattice_a.mass[(1, 1)] -= h;
        lo.lattice_a.damping = &lo.lattice_a.mass * &g_op;
        let fd_m = (eval(&hi) - eval(&lo)) / (2.0 * h);
        assert!((grad.lattice_a.m_diag[1] - fd_m).abs() <= 1e-4 * fd_m.abs());
    }
}
