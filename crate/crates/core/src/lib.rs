//! Correlated-noise filtering laboratory.
//!
//! Two threads run through this crate:
//!
//! * **Singularity diagnostics.** When the signal and the observation share a
//!   Brownian driver, the joint path law of `(X, Y)` and the product of its
//!   marginals are mutually singular. [`singularity`] measures this through
//!   the discrete Radon-Nikodym ratio of a random-walk pair and through dyadic
//!   quadratic covariation statistics.
//! * **Conditional Gibbs filter.** For linear models the filter is a Gibbs
//!   measure relative to the driftless reference law `mu_y`, in which the
//!   shared noise is frozen to the observed path. [`gibbs`] reweights draws of
//!   `mu_y`, and [`free_energy`] checks the variational characterisation
//!   against exact Gaussian ground truth from [`oracle`].
//!
//! Every Monte Carlo routine is keyed by a [`SeedSpec`]; ensembles are
//! generated per stream id and reduced in stream order, so results do not
//! depend on the worker count. With the `parallel` feature (default) ensemble
//! generation runs on rayon, otherwise it runs sequentially.

pub mod error;
pub mod free_energy;
pub mod gaussian;
pub mod gibbs;
pub mod io;
pub mod model;
pub mod oracle;
pub mod par;
pub mod rng;
pub mod sampler;
pub mod singularity;
pub mod stats;

pub use error::{Error, Result};
pub use gaussian::{GaussianLaw, Layout};
pub use model::{
    make_dyadic_grid, Coupling, LinearModel, NonlinearModel, Path, PathPair,
    SignalObservationModel, TimeGrid, ValidationIssue, ValidationReport,
};
pub use rng::SeedSpec;
