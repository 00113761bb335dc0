//! Toolkit for designing passive mass-spring lattice classifiers.
//!
//! A rectangular lattice of masses and springs acts as a fixed-weight
//! acoustic network: an input waveform drives the boundary, the response of
//! one readout site is squared and integrated into a scalar energy, and a
//! threshold on the log-energy yields a binary label. The lattice geometry
//! (hole diameters and beam widths) is the trainable parameter set.
//!
//! The crate provides the full design loop:
//!
//! * [`model`] — geometry parameterization and the reference
//!   ("oracle") map from geometry to effective mass/stiffness matrices;
//! * [`audio`] — WAV ingestion, carrier modulation, resampling, filtering,
//!   and synthetic benchmark datasets;
//! * [`sim`] — explicit RK4 time-domain simulation, energy readout, and
//!   frequency-domain transfer functions;
//! * [`adjoint`] — reverse-mode gradients of the readout energy with
//!   square-root-of-N checkpointing;
//! * [`surrogate`] — local quadratic models of the geometry-to-matrix map
//!   with periodic oracle corrections;
//! * [`reduction`] — modal band extraction, spatial localization, congruence
//!   reduction, component-mode synthesis, and band misfit objectives;
//! * [`nonlinear`] — a string-cantilever mixing element and two-layer
//!   networks built from lattice pairs;
//! * [`trainer`] — logistic loss, BFGS optimization with restarts, threshold
//!   fitting, evaluation, and lattice-size studies;
//! * [`opt`] — the dense BFGS and line-search primitives used by the trainer.

pub mod adjoint;
pub mod audio;
pub mod model;
pub mod nonlinear;
pub mod opt;
pub mod reduction;
pub mod sim;
pub mod surrogate;
pub mod trainer;

mod book;
mod linalg;

pub use linalg::{generalized_symmetric_eigen, symmetric_eigen_ascending, GeneralizedEigen};

/// Configure the global worker-thread pool.
///
/// Precedence: an explicit `requested` count, then the `RESONET_THREADS`
/// environment variable, then one thread per available core. Returns the
/// thread count in effect. Calling this more than once (or after the pool
/// has already been used) leaves the existing pool in place.
pub fn configure_threads(requested: Option<usize>) -> usize {
    let wanted = requested.or_else(|| {
        std::env::var("RESONET_THREADS")
            .ok()
            .and_then(|s| s.parse::<usize>().ok())
            .filter(|&n| n > 0)
    });
    if let Some(n) = wanted {
        // Ignore the error: the pool can only be built once per process.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    rayon::current_num_threads()
}
