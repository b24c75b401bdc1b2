//! Error type shared across the library.

use thiserror::Error;

/// Errors reported by library operations.
///
/// The statistical operations distinguish *data* problems (too few samples,
/// empty conditioning tails) from *structural* problems (no eligible sets
/// left, a refinement set that collapsed) because callers react differently:
/// the former ask for more samples, the latter signal the instance or the
/// upstream stage is at fault.
#[derive(Debug, Error)]
pub enum Error {
    /// The batch is too small for tail statistics at this density: the
    /// expected number of elevated samples `N·ρ` is below the minimum needed
    /// for the tail-fraction estimate to mean anything.
    #[error("insufficient samples: N·ρ = {effective:.1} < {required} (N = {n_samples}, rho = {rho})")]
    InsufficientSamples {
        n_samples: usize,
        rho: f64,
        effective: f64,
        required: usize,
    },

    /// Conditioning on the elevated tail of `β_T` accepted too few samples;
    /// the set was not genuinely correlated at the given threshold.
    #[error("empty tail: {accepted} samples above threshold, need at least {required}")]
    EmptyTail { accepted: usize, required: usize },

    /// Every remaining expanded set is excluded by an already-recovered
    /// column; either the target column count overestimates m or the
    /// candidate stage missed a feature.
    #[error("no eligible expanded sets remain ({pool} in pool, all excluded)")]
    NoEligibleSets { pool: usize },

    /// The refinement set `S = {i : estimate(i) ≥ σ/2}` has fewer than d
    /// entries, which a sound upstream estimate cannot produce.
    #[error("refinement set too small: |S| = {size} < d = {d}")]
    RefinementSetTooSmall { size: usize, d: usize },

    /// The planted-instance generator could not satisfy its constraints
    /// within the retry budget.
    #[error("infeasible parameters: {reason}")]
    InfeasibleParams { reason: String },

    /// An exhaustive enumeration was requested whose subset count exceeds
    /// the configured budget.
    #[error("enumeration budget exceeded: C({n},{t}) = {subsets} > budget {budget}")]
    EnumerationBudgetExceeded {
        n: usize,
        t: usize,
        subsets: u128,
        budget: u64,
    },

    /// A configuration file or CLI combination is invalid.
    #[error("invalid config: {0}")]
    ConfigInvalid(String),

    /// Malformed input that violates a documented call contract
    /// (unsorted index sets, dimension mismatches, …).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A pipeline stage failed at a specific iteration of the selection /
    /// refinement loop.
    #[error("at iteration {index}: {source}")]
    AtIteration {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    /// File parse failure (dictionary, batch, config or report files).
    #[error("parse error in {path}: {message}")]
    Parse { path: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Wraps an error with the selection/refinement iteration it occurred in.
    pub fn at_iteration(self, index: usize) -> Self {
        Error::AtIteration {
            index,
            source: Box::new(self),
        }
    }
}
