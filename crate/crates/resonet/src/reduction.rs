//! Model-order reduction for fine-grained mass-spring models.
//!
//! A fine model (many internal degrees of freedom per lattice site) is
//! reduced to one DOF per site in three steps: extract the normal modes
//! of an isolated frequency band, rotate them into a maximally localized
//! basis (one basis vector pinned to each site), and congruence-transform
//! the fine matrices. Component-level reduction (Rubin and Craig-Bampton)
//! compresses subdomains before assembly so large models never need a
//! monolithic solve. The band-misfit figures of merit score dispersion
//! curves during unit-cell design.

use crate::linalg::{generalized_symmetric_eigen, symmetric_eigen_ascending, LinalgError};
use crate::model::EffectiveModel;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ReductionError {
    #[error("band is not isolated: out-of-band mode at {neighbor:.6} Hz is within 1% of band edge {edge:.6} Hz")]
    BandNotIsolated { neighbor: f64, edge: f64 },
    #[error("band holds {found} modes, expected {expected} (one per site)")]
    ModeCountMismatch { found: usize, expected: usize },
    #[error("basis is rank-deficient: rank {rank} < {cols} columns")]
    RankDeficient { rank: usize, cols: usize },
    #[error("interior stiffness block is singular (floating interior); Craig-Bampton needs a grounded interior")]
    SingularInterior,
    #[error("requested {requested} modes but only {available} are available")]
    TooManyModes { requested: usize, available: usize },
    #[error("residual flexibility is degenerate at the boundary; reduce the kept-mode count")]
    DegenerateAttachment,
    #[error("assembly map is inconsistent: {0}")]
    Assembly(String),
    #[error("bands cross at sample {index}: need f7 < f8 < f9")]
    BandCrossing { index: usize },
    #[error("bad input: {0}")]
    BadInput(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// A large symmetric mass-spring model standing in for an FEM extraction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FineModel {
    pub mass: DMatrix<f64>,
    pub stiffness: DMatrix<f64>,
    /// Site index of every DOF.
    pub site_map: Vec<usize>,
    /// Optional interface DOF groups (used by component benchmarks).
    pub boundary_sets: Vec<Vec<usize>>,
}

impl FineModel {
    pub fn dof(&self) -> usize {
        self.mass.nrows()
    }

    pub fn n_sites(&self) -> usize {
        self.site_map.iter().copied().max().map_or(0, |m| m + 1)
    }

    /// DOF indices per site, in site order.
    pub fn site_dofs(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_sites()];
        for (dof, &site) in self.site_map.iter().enumerate() {
            out[site].push(dof);
        }
        out
    }
}

/// Modes of one isolated frequency band.
#[derive(Debug, Clone)]
pub struct BandModes {
    /// Mass-orthonormal mode shapes, one column per band mode.
    pub modes: DMatrix<f64>,
    /// Band frequencies in Hz, ascending.
    pub frequencies: Vec<f64>,
    /// Positions of the band modes in the full ascending spectrum.
    pub indices: Vec<usize>,
}

/// Solve the free eigenproblem and keep the modes with frequencies in
/// `[f_lo, f_hi]`. The band must be isolated (nearest out-of-band
/// frequency more than 1% away from the band edge) and must hold exactly
/// one mode per site.
pub fn band_modes(fine: &FineModel, f_lo: f64, f_hi: f64) -> Result<BandModes, ReductionError> {
    let eig = generalized_symmetric_eigen(&fine.stiffness, &fine.mass)?;
    let freqs = eig.frequencies() / (2.0 * std::f64::consts::PI);
    let in_band: Vec<usize> = (0..freqs.len())
        .filter(|&i| freqs[i] >= f_lo && freqs[i] <= f_hi)
        .collect();
    if in_band.is_empty() {
        return Err(ReductionError::ModeCountMismatch {
            found: 0,
            expected: fine.n_sites(),
        });
    }
    let (first, last) = (in_band[0], *in_band.last().unwrap());
    if first > 0 {
        let (neighbor, edge) = (freqs[first - 1], freqs[first]);
        if (edge - neighbor) <= 0.01 * edge {
            return Err(ReductionError::BandNotIsolated { neighbor, edge });
        }
    }
    if last + 1 < freqs.len() {
        let (neighbor, edge) = (freqs[last + 1], freqs[last]);
        if (neighbor - edge) <= 0.01 * edge {
            return Err(ReductionError::BandNotIsolated { neighbor, edge });
        }
    }
    if in_band.len() != fine.n_sites() {
        return Err(ReductionError::ModeCountMismatch {
            found: in_band.len(),
            expected: fine.n_sites(),
        });
    }
    let modes = DMatrix::from_columns(
        &in_band
            .iter()
            .map(|&i| eig.vectors.column(i).into_owned())
            .collect::<Vec<_>>(),
    );
    Ok(BandModes {
        modes,
        frequencies: in_band.iter().map(|&i| freqs[i]).collect(),
        indices: in_band,
    })
}

/// A localized rotation of band modes: one basis vector per site.
#[derive(Debug, Clone)]
pub struct LocalizedBasis {
    /// Localized basis vectors, one column per site: `gamma = psi * a^T`.
    pub gamma: DMatrix<f64>,
    /// Rotation coefficients, row `j` holding site `j`'s unit-norm
    /// combination of band modes.
    pub coefficients: DMatrix<f64>,
    /// Band mode indices the basis was built from (informational).
    pub band: Vec<usize>,
    /// Sites whose localization had a near-degenerate leading direction
    /// and fell back to the deterministic lowest-index tie-break.
    pub ambiguous_sites: Vec<usize>,
}

/// Rotate band modes into maximally localized combinations: for each
/// site, the unit coefficient vector maximizing the projection
/// `phi^T P phi` onto that site's DOFs is the leading eigenvector of
/// `psi^T P psi`. Signs are fixed so each vector's largest-magnitude
/// entry is positive.
pub fn localize(
    psi: &DMatrix<f64>,
    site_dofs: &[Vec<usize>],
) -> Result<LocalizedBasis, ReductionError> {
    let (n, count) = (psi.nrows(), psi.ncols());
    if count == 0 {
        return Err(ReductionError::BadInput("no modes to localize".into()));
    }
    for dofs in site_dofs {
        if dofs.iter().any(|&d| d >= n) {
            return Err(ReductionError::BadInput(
                "site projector indexes past the model".into(),
            ));
        }
    }
    let n_sites = site_dofs.len();
    let mut coefficients = DMatrix::<f64>::zeros(n_sites, count);
    let mut gamma = DMatrix::<f64>::zeros(n, n_sites);
    let mut ambiguous_sites = Vec::new();
    for (j, dofs) in site_dofs.iter().enumerate() {
        // b = psi^T P_j psi built from the projected rows only.
        let mut b = DMatrix::<f64>::zeros(count, count);
        for &dof in dofs {
            let row = psi.row(dof);
            for p in 0..count {
                for q in 0..count {
                    b[(p, q)] += row[p] * row[q];
                }
            }
        }
        let (vals, vecs) = symmetric_eigen_ascending(&b);
        let top = count - 1;
        if count > 1 {
            let gap = vals[top] - vals[top - 1];
            if gap < 1e-10 * vals[top].abs().max(1.0) {
                // Keep the first of the tied directions (ascending order
                // makes this deterministic) and flag the site.
                ambiguous_sites.push(j);
            }
        }
        let mut a = vecs.column(top).into_owned();
        a /= a.norm();
        let mut phi = psi * &a;
        let imax = phi.iamax();
        if phi[imax] < 0.0 {
            a = -a;
            phi = -phi;
        }
        coefficients.row_mut(j).copy_from(&a.transpose());
        gamma.column_mut(j).copy_from(&phi);
    }
    Ok(LocalizedBasis {
        gamma,
        coefficients,
        band: (0..count).collect(),
        ambiguous_sites,
    })
}

/// Congruence-reduce a fine model onto a basis: `K = gamma^T K_f gamma`,
/// `M = gamma^T M_f gamma`. When the columns span an invariant subspace,
/// the reduced pencil's eigenvalues equal the corresponding fine
/// eigenvalues. Damping and drive are left for the caller to attach.
pub fn reduce(fine: &FineModel, gamma: &DMatrix<f64>) -> Result<EffectiveModel, ReductionError> {
    let cols = gamma.ncols();
    let rank = gamma.clone().svd(false, false).rank(1e-10 * gamma.amax());
    if rank < cols {
        return Err(ReductionError::RankDeficient { rank, cols });
    }
    let stiffness = sym(gamma.transpose() * &fine.stiffness * gamma);
    let mass = sym(gamma.transpose() * &fine.mass * gamma);
    let n = cols;
    Ok(EffectiveModel {
        mass,
        stiffness,
        damping: DMatrix::zeros(n, n),
        input_weights: DVector::zeros(n),
        output_index: 0,
    })
}

fn sym(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

/// Band extraction, localization, and congruence reduction in one call.
pub fn localized_band_reduction(
    fine: &FineModel,
    f_lo: f64,
    f_hi: f64,
) -> Result<(EffectiveModel, LocalizedBasis, BandModes), ReductionError> {
    let band = band_modes(fine, f_lo, f_hi)?;
    let mut basis = localize(&band.modes, &fine.site_dofs())?;
    basis.band = band.indices.clone();
    let reduced = reduce(fine, &basis.gamma)?;
    Ok((reduced, basis, band))
}

// ---------------------------------------------------------------------------
// Component reduction

/// One substructure: symmetric mass and stiffness over local DOFs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentModel {
    pub mass: DMatrix<f64>,
    pub stiffness: DMatrix<f64>,
}

impl ComponentModel {
    pub fn dof(&self) -> usize {
        self.mass.nrows()
    }
}

/// Which component-reduction family to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComponentMethod {
    /// Free-interface modes plus residual-flexibility attachment modes,
    /// re-coordinated so boundary DOFs stay explicit.
    Rubin,
    /// Fixed-interface modes plus static constraint modes.
    CraigBampton,
}

/// A reduced substructure; the first `n_boundary` DOFs are the original
/// boundary DOFs in the order given to [`component_reduce`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReducedComponent {
    pub mass: DMatrix<f64>,
    pub stiffness: DMatrix<f64>,
    pub n_boundary: usize,
}

/// Eigenvalues below `RIGID_TOL * max` count as rigid-body modes.
const RIGID_TOL: f64 = 1e-9;

/// Reduce one component to its boundary DOFs plus `n_modes` generalized
/// coordinates.
pub fn component_reduce(
    comp: &ComponentModel,
    boundary: &[usize],
    n_modes: usize,
    method: ComponentMethod,
) -> Result<ReducedComponent, ReductionError> {
    let n = comp.dof();
    let mut seen = vec![false; n];
    for &b in boundary {
        if b >= n {
            return Err(ReductionError::BadInput(format!(
                "boundary DOF {b} out of range for {n}-DOF component"
            )));
        }
        if seen[b] {
            return Err(ReductionError::BadInput(format!(
                "boundary DOF {b} listed twice"
            )));
        }
        seen[b] = true;
    }
    let interior: Vec<usize> = (0..n).filter(|&i| !seen[i]).collect();
    let nb = boundary.len();
    let ni = interior.len();

    match method {
        ComponentMethod::CraigBampton => {
            if n_modes > ni {
                return Err(ReductionError::TooManyModes {
                    requested: n_modes,
                    available: ni,
                });
            }
            let k_ii = gather(&comp.stiffness, &interior, &interior);
            let k_ib = gather(&comp.stiffness, &interior, boundary);
            let chol = k_ii
                .clone()
                .cholesky()
                .ok_or(ReductionError::SingularInterior)?;
            // Static constraint modes: interior response to unit boundary
            // displacements.
            let psi_static = -chol.solve(&k_ib);
            let m_ii = gather(&comp.mass, &interior, &interior);
            let eig = generalized_symmetric_eigen(&k_ii, &m_ii)?;
            let phi_fixed = eig.vectors.columns(0, n_modes).into_owned();

            // t maps [u_b; q] to full local coordinates, boundary rows
            // the identity.
            let mut t = DMatrix::<f64>::zeros(n, nb + n_modes);
            for (r, &b) in boundary.iter().enumerate() {
                t[(b, r)] = 1.0;
            }
            for (r, &i) in interior.iter().enumerate() {
                for c in 0..nb {
                    t[(i, c)] = psi_static[(r, c)];
                }
                for c in 0..n_modes {
                    t[(i, nb + c)] = phi_fixed[(r, c)];
                }
            }
            Ok(ReducedComponent {
                mass: sym(t.transpose() * &comp.mass * &t),
                stiffness: sym(t.transpose() * &comp.stiffness * &t),
                n_boundary: nb,
            })
        }
        ComponentMethod::Rubin => {
            let eig = generalized_symmetric_eigen(&comp.stiffness, &comp.mass)?;
            let lam_max = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
            let n_rigid = eig
                .eigenvalues
                .iter()
                .take_while(|&&l| l < RIGID_TOL * lam_max.max(1.0))
                .count();
            let n_elastic = n - n_rigid;
            if n_modes > n_elastic {
                return Err(ReductionError::TooManyModes {
                    requested: n_modes,
                    available: n_elastic,
                });
            }
            // Elastic flexibility with rigid-body content deflated: the
            // mass-orthogonal pseudo-inverse of K, assembled from the
            // elastic modes. Splitting off the kept modes leaves the
            // residual-flexibility term.
            let mut residual = DMatrix::<f64>::zeros(n, n);
            for i in (n_rigid + n_modes)..n {
                let phi = eig.vectors.column(i);
                let w = 1.0 / eig.eigenvalues[i];
                residual.syger(w, &phi, &phi, 1.0);
            }
            let residual = sym(residual);

            // Attachment columns at the boundary DOFs.
            let mut attach = DMatrix::<f64>::zeros(n, nb);
            for (c, &b) in boundary.iter().enumerate() {
                attach.column_mut(c).copy_from(&residual.column(b));
            }
            let attach_b = gather(&attach, boundary, &(0..nb).collect::<Vec<_>>());
            let attach_b_inv = attach_b
                .clone()
                .cholesky()
                .ok_or(ReductionError::DegenerateAttachment)?
                .inverse();

            let kept = eig.vectors.columns(n_rigid, n_modes).into_owned();
            let rigid = eig.vectors.columns(0, n_rigid).into_owned();

            // Re-coordinate so the first block of generalized DOFs equals
            // the physical boundary displacements: subtract each mode's
            // boundary trace propagated through the attachment columns.
            let a_norm = &attach * &attach_b_inv;
            let kept_b = take_rows(&kept, boundary);
            let rigid_b = take_rows(&rigid, boundary);
            let kept_c = &kept - &a_norm * kept_b;
            let rigid_c = &rigid - &a_norm * rigid_b;

            let mut t = DMatrix::<f64>::zeros(n, nb + n_modes + n_rigid);
            t.columns_mut(0, nb).copy_from(&a_norm);
            t.columns_mut(nb, n_modes).copy_from(&kept_c);
            t.columns_mut(nb + n_modes, n_rigid).copy_from(&rigid_c);
            Ok(ReducedComponent {
                mass: sym(t.transpose() * &comp.mass * &t),
                stiffness: sym(t.transpose() * &comp.stiffness * &t),
                n_boundary: nb,
            })
        }
    }
}

fn gather(m: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |r, c| m[(rows[r], cols[c])])
}

fn take_rows(m: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), m.ncols(), |r, c| m[(rows[r], c)])
}

/// Primal assembly: each part carries a map from local DOF to global DOF;
/// shared global ids are summed. The maps must cover a dense global range.
pub fn assemble(parts: &[(ComponentModel, Vec<usize>)]) -> Result<FineModel, ReductionError> {
    let mut n_global = 0usize;
    for (idx, (comp, map)) in parts.iter().enumerate() {
        if map.len() != comp.dof() {
            return Err(ReductionError::Assembly(format!(
                "part {idx}: map covers {} DOFs, component has {}",
                map.len(),
                comp.dof()
            )));
        }
        n_global = n_global.max(map.iter().copied().max().map_or(0, |m| m + 1));
    }
    let mut covered = vec![false; n_global];
    let mut mass = DMatrix::<f64>::zeros(n_global, n_global);
    let mut stiffness = DMatrix::<f64>::zeros(n_global, n_global);
    for (comp, map) in parts {
        for (lr, &gr) in map.iter().enumerate() {
            covered[gr] = true;
            for (lc, &gc) in map.iter().enumerate() {
                mass[(gr, gc)] += comp.mass[(lr, lc)];
                stiffness[(gr, gc)] += comp.stiffness[(lr, lc)];
            }
        }
    }
    if let Some(hole) = covered.iter().position(|&c| !c) {
        return Err(ReductionError::Assembly(format!(
            "global DOF {hole} is not touched by any part"
        )));
    }
    Ok(FineModel {
        mass,
        stiffness,
        site_map: (0..n_global).collect(),
        boundary_sets: Vec::new(),
    })
}

// ---------------------------------------------------------------------------
// Synthetic fine-model generators

/// Parameters of the per-site internal-chain fine lattice: every site is
/// a short stiff chain anchored to ground, and neighboring sites couple
/// weakly through their top masses. The site-bounce modes of all chains
/// cluster into one isolated band holding exactly one mode per site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChainLatticeSpec {
    pub rows: usize,
    pub cols: usize,
    /// Masses per site chain.
    pub chain_len: usize,
    /// Ground spring at each chain base.
    pub ground_k: f64,
    /// Stiff springs along each chain.
    pub internal_k: f64,
    /// Weak springs between neighboring chain tops.
    pub coupling_k: f64,
    /// Relative ground-spring disorder, uniform in `[-d, d]`.
    pub disorder: f64,
    pub seed: u64,
}

impl Default for ChainLatticeSpec {
    fn default() -> Self {
        Self {
            rows: 7,
            cols: 7,
            chain_len: 3,
            ground_k: 1.0,
            internal_k: 40.0,
            coupling_k: 0.02,
            disorder: 0.02,
            seed: 0,
        }
    }
}

/// Build the chain-of-resonators fine model for the given layout.
pub fn fine_chain_lattice(spec: &ChainLatticeSpec) -> FineModel {
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    let n_sites = spec.rows * spec.cols;
    let n = n_sites * spec.chain_len;
    let mut k = DMatrix::<f64>::zeros(n, n);
    let mass = DMatrix::<f64>::identity(n, n);
    let mut site_map = vec![0usize; n];
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(spec.seed);

    let dof = |site: usize, link: usize| site * spec.chain_len + link;
    let spring = |k: &mut DMatrix<f64>, a: usize, b: usize, stiff: f64| {
        k[(a, a)] += stiff;
        k[(b, b)] += stiff;
        k[(a, b)] -= stiff;
        k[(b, a)] -= stiff;
    };
    for site in 0..n_sites {
        let jitter = 1.0 + rng.random_range(-spec.disorder..=spec.disorder);
        k[(dof(site, 0), dof(site, 0))] += spec.ground_k * jitter;
        for link in 0..spec.chain_len {
            site_map[dof(site, link)] = site;
        }
        for link in 0..spec.chain_len.saturating_sub(1) {
            spring(&mut k, dof(site, link), dof(site, link + 1), spec.internal_k);
        }
    }
    let top = spec.chain_len - 1;
    for r in 0..spec.rows {
        for c in 0..spec.cols {
            let site = r * spec.cols + c;
            if c + 1 < spec.cols {
                spring(&mut k, dof(site, top), dof(site + 1, top), spec.coupling_k);
            }
            if r + 1 < spec.rows {
                spring(
                    &mut k,
                    dof(site, top),
                    dof(site + spec.cols, top),
                    spec.coupling_k,
                );
            }
        }
    }
    FineModel {
        mass,
        stiffness: k,
        site_map,
        boundary_sets: Vec::new(),
    }
}

/// Parameters of the grounded membrane benchmark: a `rows x cols` grid of
/// unit masses joined by nearest-neighbor springs, each node also
/// grounded, split into vertical strips sharing their interface columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MembraneSpec {
    pub rows: usize,
    pub cols: usize,
    pub n_strips: usize,
    pub node_mass: f64,
    pub spring_k: f64,
    pub ground_k: f64,
}

impl Default for MembraneSpec {
    fn default() -> Self {
        Self {
            rows: 40,
            cols: 40,
            n_strips: 4,
            node_mass: 1.0,
            spring_k: 1.0,
            ground_k: 0.2,
        }
    }
}

/// One strip of the membrane: local matrices, local-to-global DOF map,
/// and the local indices of its interface (shared-column) DOFs.
#[derive(Debug, Clone)]
pub struct MembranePart {
    pub model: ComponentModel,
    pub global: Vec<usize>,
    pub boundary_local: Vec<usize>,
}

/// Build the full membrane and its strip decomposition. Elements living
/// entirely on a shared interface column (node mass, ground spring,
/// vertical springs) are split half-and-half between the two adjacent
/// strips so that primal assembly reproduces the full model exactly.
pub fn membrane_benchmark_models(spec: &MembraneSpec) -> Result<(FineModel, Vec<MembranePart>), ReductionError> {
    let (rows, cols) = (spec.rows, spec.cols);
    if spec.n_strips < 2 || cols < 2 * spec.n_strips {
        return Err(ReductionError::BadInput(
            "membrane needs at least two strips of at least two columns".into(),
        ));
    }
    let n = rows * cols;
    let node = |r: usize, c: usize| r * cols + c;

    let mut k = DMatrix::<f64>::zeros(n, n);
    let mut m = DMatrix::<f64>::zeros(n, n);
    let spring = |k: &mut DMatrix<f64>, a: usize, b: usize, stiff: f64| {
        k[(a, a)] += stiff;
        k[(b, b)] += stiff;
        k[(a, b)] -= stiff;
        k[(b, a)] -= stiff;
    };
    for r in 0..rows {
        for c in 0..cols {
            let i = node(r, c);
            m[(i, i)] = spec.node_mass;
            k[(i, i)] += spec.ground_k;
            if c + 1 < cols {
                spring(&mut k, i, node(r, c + 1), spec.spring_k);
            }
            if r + 1 < rows {
                spring(&mut k, i, node(r + 1, c), spec.spring_k);
            }
        }
    }
    // Interface columns split the strips; strip s covers
    // [interfaces[s-1], interfaces[s]] inclusive.
    let width = cols / spec.n_strips;
    let interfaces: Vec<usize> = (1..spec.n_strips).map(|s| s * width).collect();
    let fine = FineModel {
        mass: m,
        stiffness: k,
        site_map: (0..n).collect(),
        boundary_sets: interfaces
            .iter()
            .map(|&ic| (0..rows).map(|r| node(r, ic)).collect())
            .collect(),
    };

    let mut parts = Vec::new();
    for s in 0..spec.n_strips {
        let c_start = if s == 0 { 0 } else { interfaces[s - 1] };
        let c_end = if s == spec.n_strips - 1 {
            cols - 1
        } else {
            interfaces[s]
        };
        let local_cols: Vec<usize> = (c_start..=c_end).collect();
        let nl = rows * local_cols.len();
        let local = |r: usize, ci: usize| r * local_cols.len() + ci;
        let is_interface = |c: usize| interfaces.contains(&c);
        let weight = |c: usize| if is_interface(c) { 0.5 } else { 1.0 };

        let mut lk = DMatrix::<f64>::zeros(nl, nl);
        let mut lm = DMatrix::<f64>::zeros(nl, nl);
        let mut global = vec![0usize; nl];
        let mut boundary_local = Vec::new();
        for r in 0..rows {
            for (ci, &c) in local_cols.iter().enumerate() {
                let i = local(r, ci);
                global[i] = node(r, c);
                let w = weight(c);
                lm[(i, i)] = spec.node_mass * w;
                lk[(i, i)] += spec.ground_k * w;
                if is_interface(c) {
                    boundary_local.push(i);
                }
                // Vertical springs: halved on interface columns.
                if r + 1 < rows {
                    spring(&mut lk, i, local(r + 1, ci), spec.spring_k * w);
                }
                // Horizontal springs: never on an interface, owned by the
                // strip containing both endpoints.
                if ci + 1 < local_cols.len() {
                    spring(&mut lk, i, local(r, ci + 1), spec.spring_k);
                }
            }
        }
        parts.push(MembranePart {
            model: ComponentModel {
                mass: lm,
                stiffness: lk,
            },
            global,
            boundary_local,
        });
    }
    Ok((fine, parts))
}

/// Eigenfrequency errors of the assembled reduced membrane against the
/// full model, per method.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkReport {
    /// Reference frequencies of the full model (Hz), lowest first.
    pub full_hz: Vec<f64>,
    /// Relative frequency errors of the Rubin-reduced assembly.
    pub rubin_rel_err: Vec<f64>,
    /// Relative frequency errors of the Craig-Bampton-reduced assembly.
    pub craig_bampton_rel_err: Vec<f64>,
    pub n_modes_per_component: usize,
    pub reduced_dim: usize,
    pub full_dim: usize,
}

/// Reduce each strip with both methods, assemble, and compare the first
/// `n_compare` eigenfrequencies against the full model. Strip reductions
/// run in parallel.
pub fn run_membrane_benchmark(
    spec: &MembraneSpec,
    n_modes: usize,
    n_compare: usize,
) -> Result<BenchmarkReport, ReductionError> {
    use rayon::prelude::*;
    let two_pi = 2.0 * std::f64::consts::PI;
    let (fine, parts) = membrane_benchmark_models(spec)?;
    let full = generalized_symmetric_eigen(&fine.stiffness, &fine.mass)?;
    let full_hz: Vec<f64> = full
        .frequencies()
        .iter()
        .take(n_compare)
        .map(|w| w / two_pi)
        .collect();

    let mut errs = Vec::new();
    let mut reduced_dim = 0;
    for method in [ComponentMethod::Rubin, ComponentMethod::CraigBampton] {
        let reduced: Result<Vec<ReducedComponent>, ReductionError> = parts
            .par_iter()
            .map(|p| component_reduce(&p.model, &p.boundary_local, n_modes, method))
            .collect();
        let reduced = reduced?;
        // Boundary DOFs keep their original global ids (made dense),
        // generalized DOFs get fresh ids appended after them.
        let mut boundary_globals: Vec<usize> = parts
            .iter()
            .flat_map(|p| p.boundary_local.iter().map(|&l| p.global[l]))
            .collect();
        boundary_globals.sort_unstable();
        boundary_globals.dedup();
        let dense: std::collections::HashMap<usize, usize> = boundary_globals
            .iter()
            .enumerate()
            .map(|(d, &g)| (g, d))
            .collect();
        let mut next = boundary_globals.len();
        let mut assembly = Vec::new();
        for (part, red) in parts.iter().zip(&reduced) {
            let mut map = Vec::with_capacity(red.mass.nrows());
            for &l in &part.boundary_local {
                map.push(dense[&part.global[l]]);
            }
            for _ in red.n_boundary..red.mass.nrows() {
                map.push(next);
                next += 1;
            }
            assembly.push((
                ComponentModel {
                    mass: red.mass.clone(),
                    stiffness: red.stiffness.clone(),
                },
                map,
            ));
        }
        let assembled = assemble(&assembly)?;
        reduced_dim = assembled.dof();
        let eig = generalized_symmetric_eigen(&assembled.stiffness, &assembled.mass)?;
        let approx = eig.frequencies() / two_pi;
        let err: Vec<f64> = full_hz
            .iter()
            .zip(approx.iter())
            .map(|(f, a)| (a - f).abs() / f)
            .collect();
        errs.push(err);
    }
    let craig_bampton_rel_err = errs.pop().unwrap();
    let rubin_rel_err = errs.pop().unwrap();
    Ok(BenchmarkReport {
        full_hz,
        rubin_rel_err,
        craig_bampton_rel_err,
        n_modes_per_component: n_modes,
        reduced_dim,
        full_dim: fine.dof(),
    })
}

// ---------------------------------------------------------------------------
// Band misfit

/// Dispersion figures of merit for a three-band crystal sampled at four
/// wavenumbers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandMisfit {
    /// Inverse-gap sum: large when the middle band crowds its neighbors.
    pub g: f64,
    /// Cosine-weighted middle-band spread, a signed bandwidth proxy.
    pub delta_omega: f64,
    /// Mean middle-band frequency.
    pub omega0: f64,
    /// Combined objective.
    pub n: f64,
}

/// Wavenumber samples: four equally spaced points over `[0, pi]`.
pub const MISFIT_K: [f64; 4] = [
    0.0,
    std::f64::consts::PI / 3.0,
    2.0 * std::f64::consts::PI / 3.0,
    std::f64::consts::PI,
];

/// Score three dispersion bands sampled at [`MISFIT_K`]; frequencies in
/// kHz. `g` sums the inverse gaps, `delta_omega` is the cosine-weighted
/// middle band, and `n = -800 delta_omega / omega0 + g + g^2 / 64`.
pub fn band_misfit(
    f7: &[f64; 4],
    f8: &[f64; 4],
    f9: &[f64; 4],
) -> Result<BandMisfit, ReductionError> {
    for i in 0..4 {
        if !(f7[i] < f8[i] && f8[i] < f9[i]) {
            return Err(ReductionError::BandCrossing { index: i });
        }
    }
    let mut g = 0.0;
    let mut delta_omega = 0.0;
    for i in 0..4 {
        g += 1.0 / (f8[i] - f7[i]) + 1.0 / (f9[i] - f8[i]);
        delta_omega += f8[i] * MISFIT_K[i].cos();
    }
    let omega0 = f8.iter().sum::<f64>() / 4.0;
    let n = -800.0 * delta_omega / omega0 + g + g * g / 64.0;
    Ok(BandMisfit {
        g,
        delta_omega,
        omega0,
        n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn dimer(k_site: f64, c: f64) -> FineModel {
        let stiffness = DMatrix::from_row_slice(2, 2, &[k_site + c, -c, -c, k_site + c]);
        FineModel {
            mass: DMatrix::identity(2, 2),
            stiffness,
            site_map: vec![0, 1],
            boundary_sets: Vec::new(),
        }
    }

    #[test]
    fn dimer_band_splits_symmetric_antisymmetric() {
        let fine = dimer(1.0, 0.1);
        let band = band_modes(&fine, 0.0, 1.0).unwrap();
        assert_eq!(band.frequencies.len(), 2);
        let two_pi = 2.0 * std::f64::consts::PI;
        assert_relative_eq!(band.frequencies[0] * two_pi, 1.0f64.sqrt(), max_relative = 1e-10);
        assert_relative_eq!(band.frequencies[1] * two_pi, 1.2f64.sqrt(), max_relative = 1e-10);
        // Mass-orthonormality.
        let gram = band.modes.transpose() * &fine.mass * &band.modes;
        assert!((gram - DMatrix::identity(2, 2)).amax() < 1e-10);
        // Symmetric mode has equal entries, antisymmetric opposite signs.
        let s = band.modes.column(0);
        let a = band.modes.column(1);
        assert_relative_eq!(s[0], s[1], max_relative = 1e-9);
        assert_relative_eq!(a[0], -a[1], max_relative = 1e-9);
    }

    #[test]
    fn chain_lattice_band_holds_one_mode_per_site() {
        let spec = ChainLatticeSpec {
            rows: 7,
            cols: 7,
            ..Default::default()
        };
        let fine = fine_chain_lattice(&spec);
        assert_eq!(fine.dof(), 49 * 3);
        let band = band_modes(&fine, 0.0, 0.2).unwrap();
        assert_eq!(band.frequencies.len(), 49);
        let gram = band.modes.transpose() * &fine.mass * &band.modes;
        assert!((gram - DMatrix::identity(49, 49)).amax() < 1e-9);
    }

    #[test]
    fn band_isolation_and_count_are_enforced() {
        let spec = ChainLatticeSpec::default();
        let fine = fine_chain_lattice(&spec);
        let eig = generalized_symmetric_eigen(&fine.stiffness, &fine.mass).unwrap();
        let freqs = eig.frequencies() / (2.0 * std::f64::consts::PI);
        // A cut through the middle of the low cluster violates isolation:
        // neighbors inside a cluster sit closer than 1%.
        let cut = (freqs[20] + freqs[21]) / 2.0;
        assert!(matches!(
            band_modes(&fine, 0.0, cut),
            Err(ReductionError::BandNotIsolated { .. })
        ));
        // A band swallowing both clusters has the wrong count.
        let wide = freqs[97] * 1.1 + freqs[98] * 0.0;
        match band_modes(&fine, 0.0, wide.max(freqs[97] * 1.02)) {
            Err(ReductionError::ModeCountMismatch { found, expected }) => {
                assert_eq!(expected, 49);
                assert!(found > 49);
            }
            other => panic!("expected count mismatch, got {other:?}"),
        }
    }

    #[test]
    fn localization_matches_hand_solved_example() {
        let r = 1.0 / 2.0f64.sqrt();
        let psi = DMatrix::from_row_slice(2, 2, &[r, r, r, -r]);
        let basis = localize(&psi, &[vec![0], vec![1]]).unwrap();
        // First site's vector collapses onto DOF 0.
        assert_relative_eq!(basis.gamma[(0, 0)], 1.0, epsilon = 1e-12);
        assert_relative_eq!(basis.gamma[(1, 0)], 0.0, epsilon = 1e-12);
        assert_relative_eq!(basis.gamma[(0, 1)], 0.0, epsilon = 1e-12);
        assert_relative_eq!(basis.gamma[(1, 1)], 1.0, epsilon = 1e-12);
        // Identity modes are a fixed point.
        let id = DMatrix::<f64>::identity(3, 3);
        let fixed = localize(&id, &[vec![0], vec![1], vec![2]]).unwrap();
        assert!((&fixed.coefficients - DMatrix::identity(3, 3)).amax() < 1e-12);
    }

    #[test]
    fn localization_is_optimal_and_unit_norm() {
        use rand::Rng;
        use rand_chacha::rand_core::SeedableRng;
        let spec = ChainLatticeSpec {
            rows: 3,
            cols: 3,
            ..Default::default()
        };
        let fine = fine_chain_lattice(&spec);
        let band = band_modes(&fine, 0.0, 0.2).unwrap();
        let site_dofs = fine.site_dofs();
        let basis = localize(&band.modes, &site_dofs).unwrap();
        for j in 0..9 {
            let norm: f64 = basis.coefficients.row(j).norm();
            assert!((norm - 1.0).abs() < 1e-12, "row {j} norm {norm}");
        }
        // The chosen coefficients beat random unit vectors on the
        // localization measure.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let measure = |a: &DVector<f64>, j: usize| -> f64 {
            let phi = &band.modes * a;
            site_dofs[j].iter().map(|&d| phi[d] * phi[d]).sum()
        };
        for j in [0usize, 4, 8] {
            let best = measure(&basis.coefficients.row(j).transpose(), j);
            for _ in 0..100 {
                let mut a = DVector::from_fn(9, |_, _| rng.random_range(-1.0..1.0));
                a /= a.norm();
                assert!(measure(&a, j) <= best + 1e-12);
            }
        }
    }

    #[test]
    fn degenerate_localization_is_flagged_deterministically() {
        let id = DMatrix::<f64>::identity(2, 2);
        // Projector covering all DOFs makes every direction equally good.
        let basis = localize(&id, &[vec![0, 1]]).unwrap();
        assert_eq!(basis.ambiguous_sites, vec![0]);
        let again = localize(&id, &[vec![0, 1]]).unwrap();
        assert_eq!(basis.coefficients, again.coefficients);
        assert_relative_eq!(basis.coefficients.row(0).norm(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn congruence_reduction_preserves_band_eigenvalues() {
        let spec = ChainLatticeSpec {
            rows: 4,
            cols: 4,
            ..Default::default()
        };
        let fine = fine_chain_lattice(&spec);
        let (reduced, basis, band) = localized_band_reduction(&fine, 0.0, 0.2).unwrap();
        assert_eq!(reduced.dof(), 16);
        assert!((reduced.stiffness.clone() - reduced.stiffness.transpose()).amax() < 1e-12);
        let eig = generalized_symmetric_eigen(&reduced.stiffness, &reduced.mass).unwrap();
        let got_hz = eig.frequencies() / (2.0 * std::f64::consts::PI);
        for (got, want) in got_hz.iter().zip(&band.frequencies) {
            assert_relative_eq!(got, want, max_relative = 1e-9);
        }
        // Localized vectors concentrate on their own site.
        let site_dofs = fine.site_dofs();
        for j in 0..16 {
            let phi = basis.gamma.column(j);
            let own: f64 = site_dofs[j].iter().map(|&d| phi[d] * phi[d]).sum();
            let total = phi.norm_squared();
            assert!(own / total > 0.5, "site {j} holds {}", own / total);
        }
    }

    #[test]
    fn dimer_reduction_reproduces_half_band_split_coupling() {
        let fine = dimer(1.0, 0.1);
        let (reduced, _, band) = localized_band_reduction(&fine, 0.0, 1.0).unwrap();
        let two_pi = 2.0 * std::f64::consts::PI;
        let lam0 = (band.frequencies[0] * two_pi).powi(2);
        let lam1 = (band.frequencies[1] * two_pi).powi(2);
        let split = lam1 - lam0;
        // Stiffness-normalized units: M reduces to the identity, so the
        // off-diagonal coupling is half the band split.
        assert!((reduced.mass.clone() - DMatrix::identity(2, 2)).amax() < 1e-10);
        assert_relative_eq!(reduced.stiffness[(0, 1)].abs(), split / 2.0, max_relative = 1e-9);
    }

    #[test]
    fn rank_deficient_basis_is_rejected() {
        let fine = dimer(1.0, 0.1);
        let mut gamma = DMatrix::<f64>::zeros(2, 2);
        gamma[(0, 0)] = 1.0;
        gamma[(0, 1)] = 1.0;
        assert!(matches!(
            reduce(&fine, &gamma),
            Err(ReductionError::RankDeficient { rank: 1, cols: 2 })
        ));
    }

    fn grounded_chain(n: usize, ground: f64) -> ComponentModel {
        let mut k = DMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            k[(i, i)] += ground;
            if i + 1 < n {
                k[(i, i)] += 1.0;
                k[(i + 1, i + 1)] += 1.0;
                k[(i, i + 1)] -= 1.0;
                k[(i + 1, i)] -= 1.0;
            }
        }
        ComponentModel {
            mass: DMatrix::identity(n, n),
            stiffness: k,
        }
    }

    #[test]
    fn full_basis_component_reduction_is_exact() {
        let comp = grounded_chain(8, 0.3);
        let full = generalized_symmetric_eigen(&comp.stiffness, &comp.mass).unwrap();
        for method in [ComponentMethod::CraigBampton, ComponentMethod::Rubin] {
            // All interior DOFs for Craig-Bampton; for Rubin the two
            // attachment columns complete the space, so keeping every
            // elastic mode would leave no residual flexibility.
            let n_modes = 6;
            let red = component_reduce(&comp, &[0, 7], n_modes, method).unwrap();
            assert_eq!(red.n_boundary, 2);
            let eig = generalized_symmetric_eigen(&red.stiffness, &red.mass).unwrap();
            for (got, want) in eig.frequencies().iter().zip(full.frequencies().iter()) {
                assert_relative_eq!(got, want, max_relative = 1e-9);
            }
        }
    }

    #[test]
    fn component_reduction_input_contracts() {
        let comp = grounded_chain(6, 0.3);
        assert!(matches!(
            component_reduce(&comp, &[0, 5], 5, ComponentMethod::CraigBampton),
            Err(ReductionError::TooManyModes {
                requested: 5,
                available: 4
            })
        ));
        assert!(matches!(
            component_reduce(&comp, &[0, 0], 1, ComponentMethod::Rubin),
            Err(ReductionError::BadInput(_))
        ));
        // A floating interior mass makes the fixed-interface block
        // singular.
        let mut island = grounded_chain(3, 0.0);
        island.stiffness[(2, 2)] = 0.0;
        island.stiffness[(1, 2)] = 0.0;
        island.stiffness[(2, 1)] = 0.0;
        island.stiffness[(1, 1)] = 2.0; // keep the connected part grounded via DOF 0
        assert!(matches!(
            component_reduce(&island, &[0], 1, ComponentMethod::CraigBampton),
            Err(ReductionError::SingularInterior)
        ));
    }

    #[test]
    fn rubin_deflates_rigid_body_modes() {
        // Free-free chain: one rigid translation mode.
        let comp = grounded_chain(6, 0.0);
        let red = component_reduce(&comp, &[0, 5], 3, ComponentMethod::Rubin).unwrap();
        // Boundary DOFs, 3 kept elastic modes, 1 rigid mode.
        assert_eq!(red.mass.nrows(), 2 + 3 + 1);
        let eig = generalized_symmetric_eigen(&red.stiffness, &red.mass).unwrap();
        let full = generalized_symmetric_eigen(&comp.stiffness, &comp.mass).unwrap();
        // Rigid mode survives the reduction, elastic modes approximate.
        assert!(eig.eigenvalues[0].abs() < 1e-8);
        for i in 1..4 {
            assert_relative_eq!(
                eig.frequencies()[i],
                full.frequencies()[i],
                max_relative = 1e-6
            );
        }
    }

    #[test]
    fn series_springs_assemble_to_the_hand_built_chain() {
        // Two 2-DOF springs sharing their middle node: a 3-mass chain.
        let part = |k: f64| ComponentModel {
            mass: DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 0.5]),
            stiffness: DMatrix::from_row_slice(2, 2, &[k, -k, -k, k]),
        };
        let fine = assemble(&[(part(2.0), vec![0, 1]), (part(3.0), vec![1, 2])]).unwrap();
        let expect = DMatrix::from_row_slice(
            3,
            3,
            &[2.0, -2.0, 0.0, -2.0, 5.0, -3.0, 0.0, -3.0, 3.0],
        );
        assert_eq!(fine.stiffness, expect);
        assert_eq!(fine.mass[(1, 1)], 1.0);
        assert!((fine.stiffness.clone() - fine.stiffness.transpose()).amax() == 0.0);

        // Gaps in the global numbering are rejected.
        assert!(matches!(
            assemble(&[(part(1.0), vec![0, 2])]),
            Err(ReductionError::Assembly(_))
        ));
        assert!(matches!(
            assemble(&[(part(1.0), vec![0])]),
            Err(ReductionError::Assembly(_))
        ));
    }

    #[test]
    fn membrane_parts_reassemble_to_the_full_model() {
        let spec = MembraneSpec {
            rows: 6,
            cols: 8,
            n_strips: 2,
            ..Default::default()
        };
        let (fine, parts) = membrane_benchmark_models(&spec).unwrap();
        let assembly: Vec<(ComponentModel, Vec<usize>)> = parts
            .iter()
            .map(|p| (p.model.clone(), p.global.clone()))
            .collect();
        let back = assemble(&assembly).unwrap();
        assert!((&back.stiffness - &fine.stiffness).amax() < 1e-12);
        assert!((&back.mass - &fine.mass).amax() < 1e-12);
    }

    #[test]
    fn rubin_beats_craig_bampton_on_the_membrane() {
        let spec = MembraneSpec {
            rows: 16,
            cols: 16,
            n_strips: 2,
            ..Default::default()
        };
        let report = run_membrane_benchmark(&spec, 8, 10).unwrap();
        let max_rubin = report.rubin_rel_err.iter().cloned().fold(0.0f64, f64::max);
        let max_cb = report
            .craig_bampton_rel_err
            .iter()
            .cloned()
            .fold(0.0f64, f64::max);
        assert!(
            max_rubin < max_cb,
            "rubin {max_rubin:.3e} not below craig-bampton {max_cb:.3e}"
        );
        assert!(max_rubin < 5e-3, "rubin error {max_rubin:.3e}");
        assert!(report.reduced_dim < report.full_dim);

        // Fewer kept modes cannot help.
        let coarse = run_membrane_benchmark(&spec, 3, 10).unwrap();
        let max_coarse = coarse.rubin_rel_err.iter().cloned().fold(0.0f64, f64::max);
        assert!(max_coarse >= max_rubin * 0.99);
    }

    #[test]
    fn band_misfit_matches_hand_evaluation() {
        let f7 = [60.0; 4];
        let f8 = [70.0, 72.0, 74.0, 72.0];
        let f9 = [80.0; 4];
        let m = band_misfit(&f7, &f8, &f9).unwrap();
        // By hand: G = 1/10+1/10 + 1/12+1/8 + 1/14+1/6 + 1/12+1/8 = 718/840.
        assert_relative_eq!(m.g, 718.0 / 840.0, epsilon = 1e-12);
        assert_relative_eq!(m.delta_omega, -3.0, epsilon = 1e-9);
        assert_relative_eq!(m.omega0, 72.0, epsilon = 1e-12);
        let g = 718.0 / 840.0;
        let n_expect = -800.0 * (-3.0) / 72.0 + g + g * g / 64.0;
        assert_relative_eq!(m.n, n_expect, epsilon = 1e-9);
        assert!((m.n - 34.19951).abs() < 1e-4);

        // Flat middle band: cosine weights cancel.
        let flat = band_misfit(&f7, &[71.0; 4], &f9).unwrap();
        assert_relative_eq!(flat.delta_omega, 0.0, epsilon = 1e-12);
        // Doubling all gaps halves the inverse-gap sum.
        let f7w = [2.0 * 60.0 - f8[0], 2.0 * 60.0 - f8[1], 2.0 * 60.0 - f8[2], 2.0 * 60.0 - f8[3]];
        let f9w = [160.0 - f8[0], 160.0 - f8[1], 160.0 - f8[2], 160.0 - f8[3]];
        let wide = band_misfit(&f7w, &f8, &f9w).unwrap();
        assert_relative_eq!(wide.g, m.g / 2.0, epsilon = 1e-12);

        assert!(matches!(
            band_misfit(&[60.0; 4], &[60.0, 72.0, 74.0, 72.0], &f9),
            Err(ReductionError::BandCrossing { index: 0 })
        ));
    }
}
