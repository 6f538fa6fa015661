//! Score-driven time-varying correlation models with observable factors.
//!
//! This crate estimates and filters conditional correlation matrices for
//! panels of standardized returns. The model family combines:
//!
//! - a **factor decomposition** `Z = ρ'U + Λ_ω e`, where each asset loads on a
//!   small set of orthogonalized factors `U` and the loadings are made
//!   unconstrained through an artanh-norm transform ([`loadings`]);
//! - the **matrix-logarithm parametrization** of correlation matrices, which
//!   maps the set of valid correlation matrices one-to-one onto a Euclidean
//!   space ([`matcorr`]), together with a canonical representation for
//!   block-structured matrices that keeps large problems tractable
//!   ([`blockcorr`]);
//! - **convolution-t innovations** — affine transforms of independent
//!   multivariate-t blocks, nesting the Gaussian, multivariate-t,
//!   cluster-t, and heterogeneous-t cases ([`convt`]);
//! - **score-driven dynamics**: every time-varying parameter follows a
//!   mean-reverting recursion driven by the scaled score of the predictive
//!   log-likelihood ([`scoredriven`]);
//! - univariate **AR(1)-EGARCH** pre-filtering that turns raw returns into
//!   the standardized inputs the correlation layer consumes ([`egarch`]).
//!
//! Estimation drivers (joint and decoupled maximum likelihood, static
//! method-of-moments, BIC accounting, out-of-sample evaluation) live in
//! [`estimate`]; generative simulation of the full model in [`sim`].
//!
//! # Orientation
//!
//! A typical pipeline runs:
//!
//! 1. [`egarch::fit`] per return series → standardized panel `Z` (and `F` for
//!    factor series);
//! 2. [`estimate::fit_factor_model`] on `F` → factor correlation path and the
//!    orthogonalized factor panel `U`;
//! 3. [`estimate::fit_core_joint`] or [`estimate::fit_core_decoupled`] on
//!    `(Z, U)` → loading and idiosyncratic-correlation dynamics;
//! 4. [`estimate::evaluate_oos`] for held-out comparison of fitted models.
//!
//! The command-line companion crate wires these stages to CSV/JSON files; the
//! book under `book/` walks through the concepts chapter by chapter with
//! runnable snippets.
//!
//! # Conventions
//!
//! - `vecl` (strict lower triangle, column-major) is the canonical vector
//!   order for every half-vectorized object in this crate; see [`indexmaps`].
//! - All randomness is seeded explicitly; identical seeds give bit-identical
//!   results on a given target.
//! - Functions return [`Error`] values rather than clamping or silently
//!   repairing invalid inputs; numerical guards reject rather than project.

pub mod blockcorr;
pub mod convt;
pub mod egarch;
mod error;
pub mod estimate;
pub mod indexmaps;
pub mod loadings;
pub mod matcorr;
pub mod optim;
pub mod scoredriven;
pub mod sim;

pub use error::{Error, Result};
