//! Recovery of an unknown dictionary `A ∈ R^{n×m}` from observations
//! `y = Ax` where `x ∈ {0,1}^m` has i.i.d. ρ-Bernoulli coordinates.
//!
//! The pipeline works at the "slightly sparse" density regime (ρm well above
//! √n) and is built from four stages, each independently testable against
//! ground truth:
//!
//! 1. **Candidate sets** — small pixel sets `T` whose sample sum
//!    `β_T = Σ_{i∈T} y_i` is elevated by ≈ σt with probability ≈ ρ
//!    ([`setstats::correlated_test`]).
//! 2. **Expansion** — conditioning on the elevated tail of `β_T` turns the
//!    batch into a column estimate `Ã ≈ A_j` and a size-d expanded set
//!    ([`learner::expand`]).
//! 3. **Selection** — expanded sets are ranked by empirical bias (an order
//!    statistic of `β` deviations) and consumed greedily with an exclusion
//!    rule that prevents recovering a feature twice
//!    ([`learner::select_next_feature`]).
//! 4. **Refinement** — each selected column is re-estimated from the set of
//!    its confidently-large entries ([`learner::refine_column`]).
//!
//! The [`model`] module generates planted instances satisfying the structural
//! assumptions the pipeline needs (strong-entry degrees, bounded pairwise
//! support intersections, bounded small-entry power), [`oracle`] verifies
//! definitional predicates and scores recovered dictionaries against the
//! truth, and [`harness`] orchestrates reproducible end-to-end experiments.
//!
//! Everything downstream of a seed is deterministic: batches, candidate
//! draws, learned dictionaries and experiment records reproduce bitwise for
//! a fixed master seed, regardless of worker-pool size.

pub mod error;
pub mod harness;
pub mod learner;
pub mod model;
pub mod numeric;
pub mod oracle;
pub mod rng;
pub mod sampling;
pub mod setstats;

pub use error::Error;

/// Scalar type used by the domain layer.
///
/// File formats round-trip at 17 significant digits and the statistics
/// contracts are stated at 1e-10..1e-12 accuracy, which pins `f64`;
/// the generic kernels in [`numeric`] stay usable at `f32` for callers
/// that want them.
pub type Real = f64;

/// Shorthand result type for fallible library operations.
pub type Result<T> = std::result::Result<T, Error>;
