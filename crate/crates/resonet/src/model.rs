//! Lattice geometry and the reference geometry-to-matrices map.
//!
//! A design is a rectangular grid of identical unit cells. Each cell carries
//! a hole-diameter parameter `d` in `[0, 1]`; horizontally and vertically
//! adjacent cells are joined by beams whose width parameters `h` and `v`
//! also live in `[0, 1]`. The *oracle* (the stand-in for a full
//! finite-element solve of a fabricated plate) maps a geometry to effective
//! mass, stiffness, and damping matrices of a mass-spring model with one
//! degree of freedom per site.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors from geometry construction and parsing.
#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("geometry shape {rows}x{cols} is invalid: both dimensions must be at least 1")]
    BadShape { rows: usize, cols: usize },
    #[error("{field} has {got} values, expected {want} for a {rows}x{cols} lattice")]
    BadLength {
        field: &'static str,
        got: usize,
        want: usize,
        rows: usize,
        cols: usize,
    },
    #[error("geometry csv line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// Trainable design parameters of one lattice.
///
/// All values are clamped to `[0, 1]` on construction. Sites are indexed
/// row-major: site `(r, c)` has flat index `r * cols + c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    rows: usize,
    cols: usize,
    /// Hole diameters, one per site, row-major, length `rows * cols`.
    d: Vec<f64>,
    /// Horizontal beam widths between `(r, c)` and `(r, c + 1)`,
    /// row-major, length `rows * (cols - 1)`.
    h: Vec<f64>,
    /// Vertical beam widths between `(r, c)` and `(r + 1, c)`,
    /// row-major, length `(rows - 1) * cols`.
    v: Vec<f64>,
}

impl Geometry {
    /// Build a geometry from raw parameter vectors, clamping every entry
    /// into `[0, 1]`.
    pub fn new(
        rows: usize,
        cols: usize,
        d: Vec<f64>,
        h: Vec<f64>,
        v: Vec<f64>,
    ) -> Result<Self, GeometryError> {
        if rows == 0 || cols == 0 {
            return Err(GeometryError::BadShape { rows, cols });
        }
        let check = |field: &'static str, got: usize, want: usize| {
            if got == want {
                Ok(())
            } else {
                Err(GeometryError::BadLength {
                    field,
                    got,
                    want,
                    rows,
                    cols,
                })
            }
        };
        check("d", d.len(), rows * cols)?;
        check("h", h.len(), rows * (cols - 1))?;
        check("v", v.len(), (rows - 1) * cols)?;
        let clamp = |mut xs: Vec<f64>| {
            for x in &mut xs {
                *x = x.clamp(0.0, 1.0);
            }
            xs
        };
        Ok(Self {
            rows,
            cols,
            d: clamp(d),
            h: clamp(h),
            v: clamp(v),
        })
    }

    /// Uniform geometry with every parameter equal to `value`.
    pub fn uniform(rows: usize, cols: usize, value: f64) -> Result<Self, GeometryError> {
        Self::new(
            rows,
            cols,
            vec![value; rows * cols],
            vec![value; rows * (cols - 1)],
            vec![value; (rows - 1) * cols],
        )
    }

    /// Draw an i.i.d. random geometry with every parameter uniform on
    /// `[0.05, 0.95]`.
    ///
    /// The margin keeps initial designs away from the clamp boundaries so
    /// that optimization starts with nonzero parameter sensitivity.
    /// Identical `(rows, cols, seed)` always produce the identical
    /// geometry; draw order is `d`, then `h`, then `v`, each row-major.
    pub fn random(rows: usize, cols: usize, seed: u64) -> Result<Self, GeometryError> {
        if rows == 0 || cols == 0 {
            return Err(GeometryError::BadShape { rows, cols });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |n: usize| -> Vec<f64> {
            (0..n).map(|_| rng.random_range(0.05..=0.95)).collect()
        };
        let d = draw(rows * cols);
        let h = draw(rows * (cols - 1));
        let v = draw((rows - 1) * cols);
        Self::new(rows, cols, d, h, v)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Number of sites (`rows * cols`).
    pub fn n_sites(&self) -> usize {
        self.rows * self.cols
    }

    /// Flat site index of `(r, c)`.
    pub fn site(&self, r: usize, c: usize) -> usize {
        debug_assert!(r < self.rows && c < self.cols);
        r * self.cols + c
    }

    pub fn d(&self) -> &[f64] {
        &self.d
    }

    pub fn h(&self) -> &[f64] {
        &self.h
    }

    pub fn v(&self) -> &[f64] {
        &self.v
    }

    /// Hole diameter at site `(r, c)`.
    pub fn d_at(&self, r: usize, c: usize) -> f64 {
        self.d[self.site(r, c)]
    }

    /// Horizontal beam width between `(r, c)` and `(r, c + 1)`.
    pub fn h_at(&self, r: usize, c: usize) -> f64 {
        debug_assert!(c + 1 < self.cols);
        self.h[r * (self.cols - 1) + c]
    }

    /// Vertical beam width between `(r, c)` and `(r + 1, c)`.
    pub fn v_at(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r + 1 < self.rows);
        self.v[r * self.cols + c]
    }

    /// Total number of design parameters (`d`, `h`, and `v` together).
    pub fn n_params(&self) -> usize {
        self.d.len() + self.h.len() + self.v.len()
    }

    /// All parameters concatenated in the canonical order `d`, `h`, `v`.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        out.extend_from_slice(&self.d);
        out.extend_from_slice(&self.h);
        out.extend_from_slice(&self.v);
        out
    }

    /// Rebuild a geometry from a flat parameter vector in canonical order.
    pub fn from_flat(rows: usize, cols: usize, flat: &[f64]) -> Result<Self, GeometryError> {
        let nd = rows * cols;
        let nh = rows * cols.saturating_sub(1);
        let nv = rows.saturating_sub(1) * cols;
        if flat.len() != nd + nh + nv {
            return Err(GeometryError::BadLength {
                field: "flat",
                got: flat.len(),
                want: nd + nh + nv,
                rows,
                cols,
            });
        }
        Self::new(
            rows,
            cols,
            flat[..nd].to_vec(),
            flat[nd..nd + nh].to_vec(),
            flat[nd + nh..].to_vec(),
        )
    }

    /// Serialize to the geometry CSV format: header `row,col,d,h,v`, one
    /// line per site. The `h` field is empty in the last column and the
    /// `v` field is empty in the last row, because those beams do not
    /// exist.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("row,col,d,h,v\n");
        for r in 0..self.rows {
            for c in 0..self.cols {
                let h = if c + 1 < self.cols {
                    format!("{}", self.h_at(r, c))
                } else {
                    String::new()
                };
                let v = if r + 1 < self.rows {
                    format!("{}", self.v_at(r, c))
                } else {
                    String::new()
                };
                out.push_str(&format!("{},{},{},{},{}\n", r, c, self.d_at(r, c), h, v));
            }
        }
        out
    }

    /// Parse the CSV format produced by [`Geometry::to_csv`].
    pub fn from_csv(text: &str) -> Result<Self, GeometryError> {
        let mut rows = 0usize;
        let mut cols = 0usize;
        let mut entries: Vec<(usize, usize, f64, Option<f64>, Option<f64>)> = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || (idx == 0 && line.starts_with("row")) {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 5 {
                return Err(GeometryError::Parse {
                    line: idx + 1,
                    msg: format!("expected 5 fields, got {}", fields.len()),
                });
            }
            let parse_num = |s: &str, what: &str| -> Result<f64, GeometryError> {
                s.trim().parse::<f64>().map_err(|e| GeometryError::Parse {
                    line: idx + 1,
                    msg: format!("bad {what} value {s:?}: {e}"),
                })
            };
            let r = parse_num(fields[0], "row")? as usize;
            let c = parse_num(fields[1], "col")? as usize;
            let d = parse_num(fields[2], "d")?;
            let h = if fields[3].trim().is_empty() {
                None
            } else {
                Some(parse_num(fields[3], "h")?)
            };
            let v = if fields[4].trim().is_empty() {
                None
            } else {
                Some(parse_num(fields[4], "v")?)
            };
            rows = rows.max(r + 1);
            cols = cols.max(c + 1);
            entries.push((r, c, d, h, v));
        }
        if rows == 0 || cols == 0 {
            return Err(GeometryError::BadShape { rows, cols });
        }
        if entries.len() != rows * cols {
            return Err(GeometryError::Parse {
                line: 0,
                msg: format!(
                    "got {} site lines for a {}x{} lattice (want {})",
                    entries.len(),
                    rows,
                    cols,
                    rows * cols
                ),
            });
        }
        let mut d = vec![f64::NAN; rows * cols];
        let mut h = vec![f64::NAN; rows * (cols - 1)];
        let mut v = vec![f64::NAN; (rows - 1) * cols];
        for (r, c, dv, hv, vv) in entries {
            d[r * cols + c] = dv;
            match (hv, c + 1 < cols) {
                (Some(x), true) => h[r * (cols - 1) + c] = x,
                (None, false) => {}
                (Some(_), false) => {
                    return Err(GeometryError::Parse {
                        line: 0,
                        msg: format!("site ({r},{c}) is in the last column but has an h value"),
                    })
                }
                (None, true) => {
                    return Err(GeometryError::Parse {
                        line: 0,
                        msg: format!("site ({r},{c}) is missing its h value"),
                    })
                }
            }
            match (vv, r + 1 < rows) {
                (Some(x), true) => v[r * cols + c] = x,
                (None, false) => {}
                (Some(_), false) => {
                    return Err(GeometryError::Parse {
                        line: 0,
                        msg: format!("site ({r},{c}) is in the last row but has a v value"),
                    })
                }
                (None, true) => {
                    return Err(GeometryError::Parse {
                        line: 0,
                        msg: format!("site ({r},{c}) is missing its v value"),
                    })
                }
            }
        }
        if d.iter().chain(h.iter()).chain(v.iter()).any(|x| x.is_nan()) {
            return Err(GeometryError::Parse {
                line: 0,
                msg: "duplicate or missing site lines".into(),
            });
        }
        Self::new(rows, cols, d, h, v)
    }
}

/// Index map of the structural nonzeros of a lattice pencil `(K, M)`:
/// `n` stiffness diagonal entries, one stiffness entry per neighbor pair,
/// and `n` mass diagonal entries.
///
/// The pair order is fixed: all horizontal beams row-major, then all
/// vertical beams row-major, so pair `i` lines up with `Geometry::h()[i]`
/// for `i < rows * (cols - 1)` and with `Geometry::v()[i - rows * (cols - 1)]`
/// after that. Gradients, surrogate fits, and optimizer vectors all use
/// this one ordering.
#[derive(Debug, Clone, PartialEq)]
pub struct PencilLayout {
    pub n_sites: usize,
    /// Site pairs `(a, b)` with `a < b`.
    pub pairs: Vec<(usize, usize)>,
}

impl PencilLayout {
    pub fn lattice(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0);
        let site = |r: usize, c: usize| r * cols + c;
        let mut pairs = Vec::with_capacity(rows * (cols - 1) + (rows - 1) * cols);
        for r in 0..rows {
            for c in 0..cols - 1 {
                pairs.push((site(r, c), site(r, c + 1)));
            }
        }
        for r in 0..rows - 1 {
            for c in 0..cols {
                pairs.push((site(r, c), site(r + 1, c)));
            }
        }
        Self {
            n_sites: rows * cols,
            pairs,
        }
    }

    /// Total number of structural parameters:
    /// `K` diagonal + `K` pairs + `M` diagonal.
    pub fn n_params(&self) -> usize {
        2 * self.n_sites + self.pairs.len()
    }
}

/// Which sites receive the input forcing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DriveLayout {
    /// Unit weight on every perimeter site, zero inside. The default:
    /// the waveform arrives from the surrounding medium at the edges.
    Perimeter,
    /// Unit weight on every site.
    Uniform,
    /// Unit weight on a single flat site index.
    Single(usize),
    /// Explicit per-site weights, length `rows * cols`.
    Custom(Vec<f64>),
}

impl Default for DriveLayout {
    fn default() -> Self {
        DriveLayout::Perimeter
    }
}

/// Which site is read out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum OutputSite {
    /// The central site `(rows / 2, cols / 2)` (integer division).
    Center,
    /// Explicit flat site index.
    Index(usize),
}

impl Default for OutputSite {
    fn default() -> Self {
        OutputSite::Center
    }
}

/// Material and coupling constants of the oracle map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhysicsConfig {
    /// Uncoupled on-site resonance frequency at `d = 0`, in Hz.
    pub f0_hz: f64,
    /// Quality factor defining mass-proportional damping `B = (w0 / Q) M`.
    pub quality_factor: f64,
    /// Base neighbor coupling as a fraction of the base stiffness
    /// (`c0 = coupling_ratio * k0`).
    pub coupling_ratio: f64,
    /// Hole-pair cross term as a fraction of the base coupling
    /// (`eps = cross_ratio * c0`).
    pub cross_ratio: f64,
    /// On-site stiffness softening: `k_i = k0 * (1 - stiffness_drop * d^2)`.
    pub stiffness_drop: f64,
    /// Mass softening: `m_i = m0 * (1 - mass_drop * d^2)`.
    pub mass_drop: f64,
    /// Slope of the beam-width response `tanh(beam_slope * (s - 1/2))`.
    pub beam_slope: f64,
    /// Base mass per site.
    pub m0: f64,
    /// Input forcing layout.
    pub drive: DriveLayout,
    /// Readout site.
    pub output: OutputSite,
}

impl Default for PhysicsConfig {
    fn default() -> Self {
        Self {
            f0_hz: 68_500.0,
            quality_factor: 1000.0,
            coupling_ratio: 0.15,
            cross_ratio: 0.02,
            stiffness_drop: 0.55,
            mass_drop: 0.30,
            beam_slope: 3.0,
            m0: 1.0,
            drive: DriveLayout::Perimeter,
            output: OutputSite::Center,
        }
    }
}

impl PhysicsConfig {
    /// Base on-site stiffness `k0 = m0 * (2 pi f0)^2`, chosen so that an
    /// isolated site with `d = 0` resonates at exactly `f0_hz`.
    pub fn base_stiffness(&self) -> f64 {
        let w0 = 2.0 * std::f64::consts::PI * self.f0_hz;
        self.m0 * w0 * w0
    }

    /// Base neighbor coupling `c0 = coupling_ratio * k0`.
    pub fn base_coupling(&self) -> f64 {
        self.coupling_ratio * self.base_stiffness()
    }

    /// Signed coupling of a beam with width parameter `s` joining sites
    /// with hole diameters `da` and `db`:
    /// `c0 * tanh(beam_slope * (s - 1/2)) + eps * da * db`.
    pub fn coupling(&self, s: f64, da: f64, db: f64) -> f64 {
        let c0 = self.base_coupling();
        let eps = self.cross_ratio * c0;
        c0 * (self.beam_slope * (s - 0.5)).tanh() + eps * da * db
    }

    /// On-site spring constant for hole diameter `d`.
    pub fn site_stiffness(&self, d: f64) -> f64 {
        self.base_stiffness() * (1.0 - self.stiffness_drop * d * d)
    }

    /// Site mass for hole diameter `d`.
    pub fn site_mass(&self, d: f64) -> f64 {
        self.m0 * (1.0 - self.mass_drop * d * d)
    }
}

/// Second-order model `M x'' + B x' + K x = w_in s(t)` with scalar forcing
/// `s(t)`, plus the readout site index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectiveModel {
    pub mass: DMatrix<f64>,
    pub stiffness: DMatrix<f64>,
    pub damping: DMatrix<f64>,
    /// Per-coordinate input weights multiplying the scalar forcing.
    pub input_weights: DVector<f64>,
    /// Coordinate whose displacement is squared and integrated.
    pub output_index: usize,
}

impl EffectiveModel {
    /// Number of degrees of freedom.
    pub fn dof(&self) -> usize {
        self.mass.nrows()
    }

    /// Largest relative symmetry defect of `M` and `K`.
    pub fn symmetry_defect(&self) -> f64 {
        let defect = |m: &DMatrix<f64>| {
            let scale = m.amax().max(f64::MIN_POSITIVE);
            let mut worst: f64 = 0.0;
            for i in 0..m.nrows() {
                for j in (i + 1)..m.ncols() {
                    worst = worst.max((m[(i, j)] - m[(j, i)]).abs() / scale);
                }
            }
            worst
        };
        defect(&self.mass).max(defect(&self.stiffness))
    }

    /// True when `K` has nonzeros only on the diagonal and on
    /// lattice-nearest-neighbor site pairs of a `rows x cols` grid.
    pub fn is_lattice_sparse(&self, rows: usize, cols: usize, tol: f64) -> bool {
        if self.dof() != rows * cols {
            return false;
        }
        let scale = self.stiffness.amax().max(f64::MIN_POSITIVE);
        for a in 0..self.dof() {
            let (ra, ca) = (a / cols, a % cols);
            for b in 0..self.dof() {
                if a == b {
                    continue;
                }
                let (rb, cb) = (b / cols, b % cols);
                let neighbor = ra.abs_diff(rb) + ca.abs_diff(cb) == 1;
                if !neighbor && self.stiffness[(a, b)].abs() > tol * scale {
                    return false;
                }
            }
        }
        true
    }
}

/// Reference map from a geometry to its effective model.
///
/// This closed-form map stands in for a finite-element solve of the
/// fabricated plate: smooth, nonlinear in the parameters, and local. It is
/// the ground truth that surrogates are fitted to and that final metrics
/// are reported against.
///
/// Assembly: per-site masses `m_i` and on-site springs `k_i` fill the
/// diagonals; each beam between sites `a` and `b` with signed coupling `c`
/// adds `|c|` to `K[a][a]` and `K[b][b]` and sets
/// `K[a][b] = K[b][a] = -c`, so every beam contributes a positive
/// semidefinite block regardless of the sign of `c`. Damping is
/// mass-proportional, `B = (2 pi f0 / Q) M`.
pub fn oracle_effective_model(geometry: &Geometry, physics: &PhysicsConfig) -> EffectiveModel {
    let n = geometry.n_sites();
    let (rows, cols) = (geometry.rows(), geometry.cols());
    let mut mass = DMatrix::<f64>::zeros(n, n);
    let mut stiffness = DMatrix::<f64>::zeros(n, n);

    for r in 0..rows {
        for c in 0..cols {
            let i = geometry.site(r, c);
            let d = geometry.d_at(r, c);
            mass[(i, i)] = physics.site_mass(d);
            stiffness[(i, i)] = physics.site_stiffness(d);
        }
    }

    let mut add_beam = |a: usize, b: usize, coupling: f64| {
        stiffness[(a, a)] += coupling.abs();
        stiffness[(b, b)] += coupling.abs();
        stiffness[(a, b)] = -coupling;
        stiffness[(b, a)] = -coupling;
    };
    for r in 0..rows {
        for c in 0..cols.saturating_sub(1) {
            let a = geometry.site(r, c);
            let b = geometry.site(r, c + 1);
            let coupling =
                physics.coupling(geometry.h_at(r, c), geometry.d_at(r, c), geometry.d_at(r, c + 1));
            add_beam(a, b, coupling);
        }
    }
    for r in 0..rows.saturating_sub(1) {
        for c in 0..cols {
            let a = geometry.site(r, c);
            let b = geometry.site(r + 1, c);
            let coupling =
                physics.coupling(geometry.v_at(r, c), geometry.d_at(r, c), geometry.d_at(r + 1, c));
            add_beam(a, b, coupling);
        }
    }

    let w0 = 2.0 * std::f64::consts::PI * physics.f0_hz;
    let damping = &mass * (w0 / physics.quality_factor);

    EffectiveModel {
        mass,
        stiffness,
        damping,
        input_weights: drive_weights(physics, rows, cols),
        output_index: output_index(physics, rows, cols),
    }
}

/// Per-site forcing weights for the configured drive layout.
pub fn drive_weights(physics: &PhysicsConfig, rows: usize, cols: usize) -> DVector<f64> {
    let n = rows * cols;
    match &physics.drive {
        DriveLayout::Perimeter => {
            let mut w = DVector::zeros(n);
            for r in 0..rows {
                for c in 0..cols {
                    if r == 0 || c == 0 || r == rows - 1 || c == cols - 1 {
                        w[r * cols + c] = 1.0;
                    }
                }
            }
            w
        }
        DriveLayout::Uniform => DVector::from_element(n, 1.0),
        DriveLayout::Single(i) => {
            let mut w = DVector::zeros(n);
            w[(*i).min(n - 1)] = 1.0;
            w
        }
        DriveLayout::Custom(weights) => {
            assert_eq!(weights.len(), n, "custom drive weights length mismatch");
            DVector::from_vec(weights.clone())
        }
    }
}

/// Flat site index read out for the configured output site.
pub fn output_index(physics: &PhysicsConfig, rows: usize, cols: usize) -> usize {
    let n = rows * cols;
    match &physics.output {
        OutputSite::Center => (rows / 2) * cols + cols / 2,
        OutputSite::Index(i) => (*i).min(n - 1),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn single_site_resonates_at_f0() {
        let g = Geometry::uniform(1, 1, 0.0).unwrap();
        let p = PhysicsConfig::default();
        let m = oracle_effective_model(&g, &p);
        let f = (m.stiffness[(0, 0)] / m.mass[(0, 0)]).sqrt() / (2.0 * std::f64::consts::PI);
        assert_relative_eq!(f, 68_500.0, max_relative = 1e-12);
    }

    #[test]
    fn coupling_at_half_width_is_cross_term_only() {
        // tanh(0) = 0, so only the hole-pair cross term survives:
        // eps * da * db = (0.02 * c0) * 0.25.
        let p = PhysicsConfig::default();
        let c0 = p.base_coupling();
        let expected = 0.02 * c0 * 0.5 * 0.5;
        assert_relative_eq!(p.coupling(0.5, 0.5, 0.5), expected, max_relative = 1e-12);

        let g = Geometry::uniform(1, 2, 0.5).unwrap();
        let m = oracle_effective_model(&g, &p);
        assert_relative_eq!(m.stiffness[(0, 1)], -expected, max_relative = 1e-12);
        assert_relative_eq!(m.stiffness[(1, 0)], -expected, max_relative = 1e-12);
    }

    #[test]
    fn oracle_matrices_are_symmetric_definite_and_sparse() {
        let p = PhysicsConfig::default();
        for seed in 0..8u64 {
            let g = Geometry::random(4, 5, seed).unwrap();
            let m = oracle_effective_model(&g, &p);
            assert!(m.symmetry_defect() < 1e-15);
            assert!(m.is_lattice_sparse(4, 5, 0.0));
            // M is diagonal positive; K is positive definite because every
            // beam block is PSD and the on-site springs stay positive.
            for i in 0..m.dof() {
                assert!(m.mass[(i, i)] > 0.0);
            }
            assert!(
                nalgebra::Cholesky::new(m.stiffness.clone()).is_some(),
                "oracle K must be positive definite (seed {seed})"
            );
            assert!(nalgebra::Cholesky::new(m.mass.clone()).is_some());
        }
    }

    #[test]
    fn beam_sign_flip_below_half_width() {
        // tanh is odd around s = 1/2: narrow beams invert the coupling sign.
        let p = PhysicsConfig::default();
        let da = 0.3;
        let db = 0.7;
        let up = p.coupling(0.8, da, db);
        let down = p.coupling(0.2, da, db);
        let cross = 0.02 * p.base_coupling() * da * db;
        assert_relative_eq!(up - cross, -(down - cross), max_relative = 1e-12);
        assert!(up > 0.0 && down < 0.0);
    }

    #[test]
    fn oracle_is_locally_lipschitz_in_parameters() {
        // Finite-difference slope of any single parameter stays below
        // 5 * k0: the steepest response is the beam tanh with slope
        // 3 * c0 = 0.45 * k0, and on-site terms are gentler still.
        let p = PhysicsConfig::default();
        let bound = 5.0 * p.base_stiffness();
        let g = Geometry::random(3, 3, 7).unwrap();
        let base = oracle_effective_model(&g, &p);
        let flat = g.flat();
        let step = 1e-6;
        for i in 0..flat.len() {
            let mut bumped = flat.clone();
            bumped[i] += step;
            let gb = Geometry::from_flat(3, 3, &bumped).unwrap();
            let mb = oracle_effective_model(&gb, &p);
            let dk = (&mb.stiffness - &base.stiffness).amax() / step;
            let dm = (&mb.mass - &base.mass).amax() / step;
            assert!(dk < bound, "param {i}: dK/dp = {dk:.3e} exceeds bound");
            assert!(dm < bound);
        }
    }

    #[test]
    fn random_geometry_is_deterministic_and_in_range() {
        let a = Geometry::random(5, 4, 42).unwrap();
        let b = Geometry::random(5, 4, 42).unwrap();
        assert_eq!(a, b);
        let c = Geometry::random(5, 4, 43).unwrap();
        assert_ne!(a, c);
        for &x in a.flat().iter() {
            assert!((0.05..=0.95).contains(&x));
        }
    }

    #[test]
    fn random_geometry_draws_are_uniform() {
        // Kolmogorov-Smirnov check of pooled draws against U[0.05, 0.95].
        let g = Geometry::random(100, 34, 2024).unwrap();
        let mut xs = g.flat();
        assert!(xs.len() >= 10_000);
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = xs.len() as f64;
        let mut d_stat: f64 = 0.0;
        for (i, &x) in xs.iter().enumerate() {
            let cdf = ((x - 0.05) / 0.90).clamp(0.0, 1.0);
            let lo = i as f64 / n;
            let hi = (i + 1) as f64 / n;
            d_stat = d_stat.max((cdf - lo).abs()).max((hi - cdf).abs());
        }
        // Asymptotic Kolmogorov distribution: p = 2 sum (-1)^(k-1) exp(-2 k^2 n D^2).
        let lambda = d_stat * n.sqrt();
        let mut p = 0.0;
        for k in 1..100 {
            let term = 2.0 * (-1.0f64).powi(k - 1) * (-2.0 * (k as f64).powi(2) * lambda * lambda).exp();
            p += term;
        }
        assert!(p > 0.01, "KS p-value {p:.4} too small (D = {d_stat:.5})");
    }

    #[test]
    fn clamping_and_shape_checks() {
        let g = Geometry::new(1, 2, vec![-0.5, 1.5], vec![2.0], vec![]).unwrap();
        assert_eq!(g.d(), &[0.0, 1.0]);
        assert_eq!(g.h(), &[1.0]);
        assert!(Geometry::new(0, 2, vec![], vec![], vec![]).is_err());
        assert!(Geometry::new(2, 2, vec![0.1; 3], vec![0.1; 2], vec![0.1; 2]).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let g = Geometry::random(3, 4, 5).unwrap();
        let text = g.to_csv();
        let back = Geometry::from_csv(&text).unwrap();
        assert_eq!(g, back);
    }

    #[test]
    fn flat_round_trip() {
        let g = Geometry::random(4, 3, 11).unwrap();
        let back = Geometry::from_flat(4, 3, &g.flat()).unwrap();
        assert_eq!(g, back);
    }

    #[test]
    fn perimeter_drive_and_center_output() {
        let g = Geometry::uniform(3, 3, 0.2).unwrap();
        let m = oracle_effective_model(&g, &PhysicsConfig::default());
        assert_eq!(m.output_index, 4);
        let expected = [1., 1., 1., 1., 0., 1., 1., 1., 1.];
        for (i, &w) in expected.iter().enumerate() {
            assert_eq!(m.input_weights[i], w);
        }
        // 1x1 lattice: the single site is both perimeter and center.
        let g1 = Geometry::uniform(1, 1, 0.0).unwrap();
        let m1 = oracle_effective_model(&g1, &PhysicsConfig::default());
        assert_eq!(m1.input_weights[0], 1.0);
        assert_eq!(m1.output_index, 0);
    }
}
