//! Quadratic surrogate from geometry to effective matrices.
//!
//! Each structural matrix element (stiffness diagonal, stiffness neighbor
//! pair, mass diagonal) is modeled as an independent quadratic in the
//! geometric parameters near it:
//!
//! ```text
//! value(p) = a + b . p_r + p_r^T C p_r
//! ```
//!
//! where `p_r` is the element's relevant-parameter subvector: every hole
//! and beam within graph distance 2 of the element's site(s). Fitting K
//! and M separately (instead of the dynamic matrix M^-1 K) keeps both
//! predictions symmetric, so the predicted pencil has real eigenvalues.
//! The analytic per-element Jacobian `b + 2 C p_r` turns matrix-space
//! gradients into geometry-space gradients, and a periodic correction
//! blends in the ground-truth extractor at the current design point.

use crate::adjoint::PencilGradient;
use crate::model::{
    drive_weights, oracle_effective_model, output_index, EffectiveModel, Geometry, PencilLayout,
    PhysicsConfig,
};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SurrogateError {
    #[error("matrix element ({0}, {1}) is not structural for this lattice")]
    NonStructural(usize, usize),
    #[error("element {element}: {have} samples cannot determine {need} coefficients")]
    InsufficientData {
        element: String,
        have: usize,
        need: usize,
    },
    #[error("shape mismatch: model is {expected_rows}x{expected_cols}, input is {got_rows}x{got_cols}")]
    ShapeMismatch {
        expected_rows: usize,
        expected_cols: usize,
        got_rows: usize,
        got_cols: usize,
    },
    #[error("predicted mass matrix is not positive definite (re-seed the geometry)")]
    DegenerateMass,
    #[error("least-squares solve failed for element {0}")]
    Solve(String),
}

/// A structural matrix element addressed by kind and site indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementKey {
    /// `K[i][j]`: diagonal (`i == j`) or a lattice-neighbor pair.
    Stiffness(usize, usize),
    /// `M[i][i]`; the mass matrix has no structural off-diagonals.
    Mass(usize),
}

fn manhattan(rows: usize, cols: usize, a: usize, b: usize) -> usize {
    let _ = rows;
    let (ra, ca) = (a / cols, a % cols);
    let (rb, cb) = (b / cols, b % cols);
    ra.abs_diff(rb) + ca.abs_diff(cb)
}

/// Geometric-parameter indices relevant to one matrix element: the holes
/// of every site within graph distance 2 of the element's site(s), plus
/// every beam whose nearer endpoint is within distance 2. Sorted and
/// de-duplicated. Flat parameter order matches [`Geometry::flat`]: holes,
/// then horizontal beams, then vertical beams.
pub fn relevant_params(
    rows: usize,
    cols: usize,
    key: ElementKey,
) -> Result<Vec<usize>, SurrogateError> {
    let n_sites = rows * cols;
    let anchor_sites: Vec<usize> = match key {
        ElementKey::Mass(i) => {
            if i >= n_sites {
                return Err(SurrogateError::NonStructural(i, i));
            }
            vec![i]
        }
        ElementKey::Stiffness(i, j) => {
            if i >= n_sites || j >= n_sites {
                return Err(SurrogateError::NonStructural(i, j));
            }
            if i == j {
                vec![i]
            } else if manhattan(rows, cols, i, j) == 1 {
                vec![i, j]
            } else {
                return Err(SurrogateError::NonStructural(i, j));
            }
        }
    };
    let dist = |site: usize| -> usize {
        anchor_sites
            .iter()
            .map(|&a| manhattan(rows, cols, site, a))
            .min()
            .unwrap()
    };
    let mut out = Vec::new();
    for s in 0..n_sites {
        if dist(s) <= 2 {
            out.push(s);
        }
    }
    let layout = PencilLayout::lattice(rows, cols);
    for (p, &(a, b)) in layout.pairs.iter().enumerate() {
        if dist(a).min(dist(b)) <= 2 {
            out.push(n_sites + p);
        }
    }
    Ok(out)
}

/// One fitted element: `value(p) = a + b . p_r + p_r^T C p_r` over the
/// relevant-parameter subvector `p_r`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElementFit {
    pub a: f64,
    pub b: DVector<f64>,
    /// Symmetric by construction.
    pub c: DMatrix<f64>,
    /// Global parameter indices making up `p_r`, ascending.
    pub relevant: Vec<usize>,
}

impl ElementFit {
    fn gather(&self, flat: &[f64]) -> DVector<f64> {
        DVector::from_iterator(self.relevant.len(), self.relevant.iter().map(|&i| flat[i]))
    }

    /// Evaluate the quadratic form at a flat parameter vector.
    pub fn value(&self, flat: &[f64]) -> f64 {
        let p = self.gather(flat);
        self.a + self.b.dot(&p) + (&self.c * &p).dot(&p)
    }

    /// Analytic gradient `b + 2 C p_r`, returned as (global index, value)
    /// pairs; parameters outside the relevant set have exactly zero
    /// derivative.
    pub fn gradient(&self, flat: &[f64]) -> Vec<(usize, f64)> {
        let p = self.gather(flat);
        let g = &self.b + (&self.c * &p) * 2.0;
        self.relevant
            .iter()
            .zip(g.iter())
            .map(|(&i, &v)| (i, v))
            .collect()
    }
}

/// The complete fitted surrogate for one lattice shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateModel {
    pub version: u32,
    pub rows: usize,
    pub cols: usize,
    /// `K[i][i]` fits, site order.
    pub k_diag: Vec<ElementFit>,
    /// Neighbor-pair fits in [`PencilLayout::lattice`] order.
    pub k_pairs: Vec<ElementFit>,
    /// `M[i][i]` fits, site order.
    pub m_diag: Vec<ElementFit>,
}

/// Offsets blended in from the ground-truth extractor at a correction
/// point: `delta = alpha * (oracle - surrogate)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionState {
    pub delta_k: DMatrix<f64>,
    pub delta_m: DMatrix<f64>,
    /// Blend factor in `[0, 1]`, ramping up over the first few corrections.
    pub alpha: f64,
    /// Apply every this many optimizer iterations; 0 disables.
    pub period: usize,
    /// How many corrections have been applied so far.
    pub count: usize,
}

impl CorrectionState {
    pub fn new(n_dof: usize, period: usize) -> Self {
        Self {
            delta_k: DMatrix::zeros(n_dof, n_dof),
            delta_m: DMatrix::zeros(n_dof, n_dof),
            alpha: 0.0,
            period,
            count: 0,
        }
    }

    /// True on iterations where a correction is scheduled.
    pub fn due(&self, iteration: usize) -> bool {
        self.period > 0 && iteration > 0 && iteration % self.period == 0
    }
}

const RIDGE: f64 = 1e-10;
/// Corrections reach full strength after this many applications.
const ALPHA_RAMP_STEPS: usize = 5;

fn check_shape(rows: usize, cols: usize, g: &Geometry) -> Result<(), SurrogateError> {
    if g.rows() != rows || g.cols() != cols {
        return Err(SurrogateError::ShapeMismatch {
            expected_rows: rows,
            expected_cols: cols,
            got_rows: g.rows(),
            got_cols: g.cols(),
        });
    }
    Ok(())
}

fn feature_count(n_relevant: usize) -> usize {
    1 + n_relevant + n_relevant * (n_relevant + 1) / 2
}

fn fill_features(p: &[f64], relevant: &[usize], row: &mut [f64]) {
    row[0] = 1.0;
    let l = relevant.len();
    for (k, &idx) in relevant.iter().enumerate() {
        row[1 + k] = p[idx];
    }
    let mut f = 1 + l;
    for i in 0..l {
        for j in i..l {
            row[f] = p[relevant[i]] * p[relevant[j]];
            f += 1;
        }
    }
}

/// Ordinary least squares for one element over its quadratic features,
/// solved by QR on the feature matrix with a tiny ridge for conditioning.
fn fit_element(
    label: &str,
    relevant: Vec<usize>,
    params: &[Vec<f64>],
    values: &[f64],
) -> Result<ElementFit, SurrogateError> {
    let l = relevant.len();
    let nf = feature_count(l);
    let ns = params.len();
    if ns <= nf {
        return Err(SurrogateError::InsufficientData {
            element: label.to_string(),
            have: ns,
            need: nf + 1,
        });
    }
    let mut a = DMatrix::<f64>::zeros(ns + nf, nf);
    let mut y = DVector::<f64>::zeros(ns + nf);
    let mut row = vec![0.0; nf];
    for (s, p) in params.iter().enumerate() {
        fill_features(p, &relevant, &mut row);
        for (f, &v) in row.iter().enumerate() {
            a[(s, f)] = v;
        }
        y[s] = values[s];
    }
    let sqrt_ridge = RIDGE.sqrt();
    for f in 0..nf {
        a[(ns + f, f)] = sqrt_ridge;
    }
    let qr = a.qr();
    let rhs = qr.q().transpose() * y;
    let coeff = qr
        .r()
        .solve_upper_triangular(&rhs)
        .ok_or_else(|| SurrogateError::Solve(label.to_string()))?;

    let b = DVector::from_iterator(l, (0..l).map(|k| coeff[1 + k]));
    let mut c = DMatrix::<f64>::zeros(l, l);
    let mut f = 1 + l;
    for i in 0..l {
        for j in i..l {
            // The feature p_i p_j (i < j) appears twice in p^T C p.
            let w = coeff[f];
            if i == j {
                c[(i, i)] = w;
            } else {
                c[(i, j)] = 0.5 * w;
                c[(j, i)] = 0.5 * w;
            }
            f += 1;
        }
    }
    Ok(ElementFit {
        a: coeff[0],
        b,
        c,
        relevant,
    })
}

/// Fit a surrogate for the given lattice shape from (geometry, extracted
/// model) pairs. Element fits are independent and run in parallel.
pub fn fit(
    train: &[(Geometry, EffectiveModel)],
    rows: usize,
    cols: usize,
) -> Result<SurrogateModel, SurrogateError> {
    let n_sites = rows * cols;
    for (g, m) in train {
        check_shape(rows, cols, g)?;
        if m.dof() != n_sites {
            return Err(SurrogateError::ShapeMismatch {
                expected_rows: rows,
                expected_cols: cols,
                got_rows: m.dof(),
                got_cols: 1,
            });
        }
    }
    let params: Vec<Vec<f64>> = train.iter().map(|(g, _)| g.flat()).collect();
    let layout = PencilLayout::lattice(rows, cols);

    enum Target {
        KDiag(usize),
        KPair(usize, usize),
        MDiag(usize),
    }
    let mut jobs = Vec::new();
    for i in 0..n_sites {
        jobs.push(Target::KDiag(i));
    }
    for &(a, b) in &layout.pairs {
        jobs.push(Target::KPair(a, b));
    }
    for i in 0..n_sites {
        jobs.push(Target::MDiag(i));
    }

    let fits: Result<Vec<ElementFit>, SurrogateError> = jobs
        .par_iter()
        .map(|job| {
            let (label, key, values): (String, ElementKey, Vec<f64>) = match *job {
                Target::KDiag(i) => (
                    format!("K[{i}][{i}]"),
                    ElementKey::Stiffness(i, i),
                    train.iter().map(|(_, m)| m.stiffness[(i, i)]).collect(),
                ),
                Target::KPair(a, b) => (
                    format!("K[{a}][{b}]"),
                    ElementKey::Stiffness(a, b),
                    train.iter().map(|(_, m)| m.stiffness[(a, b)]).collect(),
                ),
                Target::MDiag(i) => (
                    format!("M[{i}][{i}]"),
                    ElementKey::Mass(i),
                    train.iter().map(|(_, m)| m.mass[(i, i)]).collect(),
                ),
            };
            let relevant = relevant_params(rows, cols, key)?;
            fit_element(&label, relevant, &params, &values)
        })
        .collect();
    let mut fits = fits?;

    let m_diag = fits.split_off(n_sites + layout.pairs.len());
    let k_pairs = fits.split_off(n_sites);
    Ok(SurrogateModel {
        version: 1,
        rows,
        cols,
        k_diag: fits,
        k_pairs,
        m_diag,
    })
}

impl SurrogateModel {
    pub fn layout(&self) -> PencilLayout {
        PencilLayout::lattice(self.rows, self.cols)
    }

    /// Predict the effective model at a geometry, optionally adding an
    /// active correction offset. The mass prediction must stay positive
    /// definite; a violation is reported so the caller can re-seed.
    pub fn predict(
        &self,
        g: &Geometry,
        physics: &PhysicsConfig,
        correction: Option<&CorrectionState>,
    ) -> Result<EffectiveModel, SurrogateError> {
        check_shape(self.rows, self.cols, g)?;
        let n = self.rows * self.cols;
        let flat = g.flat();
        let layout = self.layout();

        let mut stiffness = DMatrix::<f64>::zeros(n, n);
        let mut mass = DMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            stiffness[(i, i)] = self.k_diag[i].value(&flat);
            mass[(i, i)] = self.m_diag[i].value(&flat);
        }
        for (p, &(a, b)) in layout.pairs.iter().enumerate() {
            let v = self.k_pairs[p].value(&flat);
            stiffness[(a, b)] = v;
            stiffness[(b, a)] = v;
        }
        if let Some(corr) = correction {
            stiffness += &corr.delta_k;
            mass += &corr.delta_m;
            // The offsets are symmetric differences of symmetric matrices,
            // but guard against drift anyway.
            stiffness = (&stiffness + stiffness.transpose()) * 0.5;
            mass = (&mass + mass.transpose()) * 0.5;
        }
        if mass.clone().cholesky().is_none() {
            return Err(SurrogateError::DegenerateMass);
        }
        let w0 = 2.0 * std::f64::consts::PI * physics.f0_hz;
        let damping = &mass * (w0 / physics.quality_factor);
        Ok(EffectiveModel {
            mass,
            stiffness,
            damping,
            input_weights: drive_weights(physics, self.rows, self.cols),
            output_index: output_index(physics, self.rows, self.cols),
        })
    }

    /// Chain matrix-element gradients through the per-element Jacobians:
    /// `dL/dp = sum over elements of dL/d(element) * d(element)/dp`.
    pub fn chain_gradient(
        &self,
        g: &Geometry,
        matrix_grad: &PencilGradient,
    ) -> Result<DVector<f64>, SurrogateError> {
        check_shape(self.rows, self.cols, g)?;
        let flat = g.flat();
        let mut out = DVector::<f64>::zeros(g.n_params());
        let mut scatter = |fit: &ElementFit, weight: f64| {
            if weight == 0.0 {
                return;
            }
            for (idx, dv) in fit.gradient(&flat) {
                out[idx] += weight * dv;
            }
        };
        for (i, fit) in self.k_diag.iter().enumerate() {
            scatter(fit, matrix_grad.k_diag[i]);
        }
        for (p, fit) in self.k_pairs.iter().enumerate() {
            scatter(fit, matrix_grad.k_pairs[p]);
        }
        for (i, fit) in self.m_diag.iter().enumerate() {
            scatter(fit, matrix_grad.m_diag[i]);
        }
        Ok(out)
    }
}

/// Update a correction state at the current design point: the blend
/// factor ramps linearly to 1 over the first [`ALPHA_RAMP_STEPS`]
/// corrections, and the offsets become `alpha * (oracle - surrogate)`
/// evaluated here.
pub fn apply_correction(
    state: &mut CorrectionState,
    surrogate: &SurrogateModel,
    g: &Geometry,
    physics: &PhysicsConfig,
    oracle: &EffectiveModel,
) -> Result<(), SurrogateError> {
    let raw = surrogate.predict(g, physics, None)?;
    state.count += 1;
    state.alpha = (state.count as f64 / ALPHA_RAMP_STEPS as f64).min(1.0);
    state.delta_k = (&oracle.stiffness - &raw.stiffness) * state.alpha;
    state.delta_m = (&oracle.mass - &raw.mass) * state.alpha;
    Ok(())
}

/// Generate (random geometry, oracle model) training pairs,
/// deterministically from the seed.
pub fn oracle_training_set(
    rows: usize,
    cols: usize,
    count: usize,
    seed: u64,
    physics: &PhysicsConfig,
) -> Vec<(Geometry, EffectiveModel)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let g = Geometry::random(rows, cols, rng.random::<u64>()).expect("valid shape");
            let m = oracle_effective_model(&g, physics);
            (g, m)
        })
        .collect()
}

/// Frobenius norm of the stiffness prediction error over a held-out set.
pub fn holdout_residual(
    s: &SurrogateModel,
    holdout: &[(Geometry, EffectiveModel)],
    physics: &PhysicsConfig,
) -> Result<f64, SurrogateError> {
    let mut total = 0.0;
    for (g, truth) in holdout {
        let pred = s.predict(g, physics, None)?;
        total += (&pred.stiffness - &truth.stiffness).norm_squared();
    }
    Ok((total / holdout.len() as f64).sqrt())
}
