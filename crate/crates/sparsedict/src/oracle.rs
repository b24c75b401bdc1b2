//! Ground-truth-side verification: definitional predicates on pixel sets,
//! permutation matching and scoring of recovered dictionaries, ε-equivalence
//! testing on random inputs, and Monte Carlo validation of the probability
//! bounds the pipeline's accuracy rests on.
//!
//! Everything here may look at the planted dictionary; nothing here feeds
//! back into the learner. The predicates are exact recomputations of the
//! definitions ([`is_signature_set`], [`is_expanded_signature_set`],
//! [`count_k_large`]). Matching uses ℓ∞ column distance because the accuracy
//! contracts elsewhere in the crate are stated entrywise; ℓ₂ is available as
//! an option on [`match_and_score_with`].

use std::fmt;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::error::Error;
use crate::learner::LearnedDictionary;
use crate::model::{check_assumptions, Dictionary, Mode};
use crate::numeric::CompensatedSum;
use crate::rng;
use crate::setstats::{true_coefficients, PixelSet};
use crate::Result;

/// Default failure-probability budget for ε-equivalence at instance size n:
/// "with high probability" made concrete as 1/n.
pub fn default_fail_prob(n: usize) -> f64 {
    1.0 / n.max(1) as f64
}

/// Verdict of [`is_signature_set`]: either the predicate holds or the first
/// violated condition with its witness.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SignatureVerdict {
    /// All conditions hold for the designated feature.
    Signature,
    /// The designated feature's own coefficient is below `σ|T|`
    /// (magnitude in general mode).
    WeakDominant { beta: f64, required: f64 },
    /// Some other feature's coefficient exceeds `σ²|T|/(Δ ln n)`; the
    /// witness is the worst offender.
    LargeCompetitor { feature: usize, beta: f64, cap: f64 },
    /// General mode only: the residual deviation `ν_{−j,T}` exceeds
    /// `σ|T|/√(Δ ln n)`.
    LargeResidual { nu: f64, cap: f64 },
}

impl SignatureVerdict {
    pub fn holds(&self) -> bool {
        matches!(self, SignatureVerdict::Signature)
    }
}

/// Exact signature-set predicate for `feature` on the planted dictionary.
///
/// Checks, with `t = |T|`: (a) the feature's own coefficient dominates,
/// `β_{j,T} ≥ σt` (`|β| ≥ σt` in general mode); (b) every other feature's
/// coefficient is at most `σ²t/(Δ ln n)` in magnitude; and, in general mode,
/// (c) the residual deviation satisfies `ν_{−j,T} ≤ σt/√(Δ ln n)`
/// (nonnegativity plus row scaling make (c) automatic in nonnegative mode).
pub fn is_signature_set(dict: &Dictionary, set: &PixelSet, feature: usize) -> SignatureVerdict {
    assert!(feature < dict.m(), "feature index out of range");
    let p = dict.params();
    let t = set.len();
    let coeffs = true_coefficients(dict, set);
    let own = coeffs.beta[feature];
    let required = p.sigma * t as f64;
    let dominant = match dict.mode() {
        Mode::Nonnegative => own >= required,
        Mode::General => own.abs() >= required,
    };
    if !dominant {
        return SignatureVerdict::WeakDominant {
            beta: own,
            required,
        };
    }
    let cap = p.signature_cap(dict.n(), t);
    let worst = coeffs
        .beta
        .iter()
        .enumerate()
        .filter(|(k, _)| *k != feature)
        .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()).then(b.0.cmp(&a.0)));
    if let Some((k, &beta)) = worst {
        if beta.abs() > cap {
            return SignatureVerdict::LargeCompetitor { feature: k, beta, cap };
        }
    }
    if dict.mode() == Mode::General {
        let nu = coeffs.nu_minus[feature];
        let nu_cap = p.nu_cap(dict.n(), t);
        if nu > nu_cap {
            return SignatureVerdict::LargeResidual { nu, cap: nu_cap };
        }
    }
    SignatureVerdict::Signature
}

/// Returns the unique feature for which `set` is an expanded signature set,
/// or `None`.
///
/// With `d = |set|`, feature j qualifies when `β_{j,set} ≥ 0.7σd` and every
/// other `β_{k,set} ≤ 0.3σd` (absolute values in general mode). Two features
/// cannot qualify simultaneously: a second qualifier's own coefficient would
/// already violate the first one's `0.3σd` cap.
pub fn is_expanded_signature_set(dict: &Dictionary, set: &PixelSet) -> Option<usize> {
    let p = dict.params();
    let d = set.len() as f64;
    let hi = 0.7 * p.sigma * d;
    let lo = 0.3 * p.sigma * d;
    let coeffs = true_coefficients(dict, set);
    let value = |b: f64| match dict.mode() {
        Mode::Nonnegative => b,
        Mode::General => b.abs(),
    };
    for (j, &b) in coeffs.beta.iter().enumerate() {
        if value(b) >= hi
            && coeffs
                .beta
                .iter()
                .enumerate()
                .all(|(k, &c)| k == j || value(c) <= lo)
        {
            return Some(j);
        }
    }
    None
}

/// Coefficient threshold above which a feature counts as "large" on a
/// size-d set: `dσ⁴/(ΔΛ² ln n)`.
pub fn k_large_threshold(dict: &Dictionary, set_size: usize) -> f64 {
    let p = dict.params();
    set_size as f64 * p.sigma.powi(4) / (p.delta * p.lambda.powi(2) * (dict.n() as f64).ln())
}

/// Number of features whose coefficient magnitude on `set` reaches
/// [`k_large_threshold`].
pub fn count_k_large(dict: &Dictionary, set: &PixelSet) -> usize {
    let threshold = k_large_threshold(dict, set.len());
    true_coefficients(dict, set)
        .beta
        .iter()
        .filter(|b| b.abs() >= threshold)
        .count()
}

/// Largest admissible count of large-coefficient features on a size-d set,
/// computed from the instance's actual constants.
///
/// Every large feature owns at least `q = σ⁴d/(2ΔΛ³ ln n)` heavy pixels
/// inside the set, pairwise intersections are capped by κ, and the set has
/// only d pixels, so inclusion–exclusion forces `Kq − K²κ/2 ≤ d`. The
/// left side is concave in K and any subset of the large features satisfies
/// the same inequality, so the first K that violates it bounds the count.
pub fn k_large_bound(dict: &Dictionary, set_size: usize) -> usize {
    let p = dict.params();
    let q = set_size as f64 * p.sigma.powi(4)
        / (2.0 * p.delta * p.lambda.powi(3) * (dict.n() as f64).ln());
    let kappa = p.kappa as f64;
    let d = set_size as f64;
    let mut k = 0usize;
    while k < dict.m() {
        let next = (k + 1) as f64;
        if next * q - next * next * kappa / 2.0 > d {
            break;
        }
        k += 1;
    }
    k
}

/// Structural constants of an instance as actually measured, attached to
/// every report so desk-scale deviations from the declared regime are
/// visible.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EffectiveParams {
    pub n: usize,
    pub m: usize,
    /// Minimum per-feature count of entries with magnitude ≥ σ.
    pub min_strong_degree: usize,
    /// Maximum number of τ-heavy pixels shared by any feature pair.
    pub max_pair_intersection: usize,
    /// Maximum per-pixel small-entry power `ρ·Σ_{|A|<τ} A²`.
    pub max_small_entry_power: f64,
    /// Smallest strong-entry magnitude (the effective σ).
    pub min_strong_magnitude: f64,
    /// Largest entry magnitude (the effective Λ).
    pub max_entry_magnitude: f64,
}

/// Measures [`EffectiveParams`] from a dictionary.
pub fn measure_effective_params(dict: &Dictionary) -> EffectiveParams {
    let report = check_assumptions(dict);
    let sigma = dict.params().sigma;
    let mut min_strong = f64::INFINITY;
    let mut max_mag = 0.0f64;
    for i in 0..dict.n() {
        for &a in dict.row(i) {
            let mag = a.abs();
            if mag >= sigma && mag < min_strong {
                min_strong = mag;
            }
            if mag > max_mag {
                max_mag = mag;
            }
        }
    }
    if !min_strong.is_finite() {
        min_strong = 0.0;
    }
    EffectiveParams {
        n: dict.n(),
        m: dict.m(),
        min_strong_degree: report.min_strong_degree,
        max_pair_intersection: report.max_pair_intersection,
        max_small_entry_power: report.max_small_entry_power,
        min_strong_magnitude: min_strong,
        max_entry_magnitude: max_mag,
    }
}

/// Outcome of [`equivalence_test`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EquivalenceVerdict {
    pub pass: bool,
    pub epsilon: f64,
    pub fail_prob: f64,
    pub n_trials: usize,
    /// Trials with some coordinate of `(A−Â)x` exceeding ε in magnitude.
    pub failures: usize,
    pub failure_fraction: f64,
}

/// Column distance used by matching.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ColumnMetric {
    /// Maximum entrywise difference (the default; accuracy contracts are
    /// entrywise).
    Linf,
    /// Euclidean distance.
    L2,
}

/// Result of matching recovered columns against the planted dictionary.
#[derive(Clone, Debug)]
pub struct RecoveryReport {
    /// `permutation[c]` = planted feature matched to learned column c; the
    /// entries are distinct.
    pub permutation: Vec<usize>,
    /// Matched distance per learned column (under the recorded sign).
    pub per_column_linf: Vec<f64>,
    /// Sign applied to each learned column before comparison: ±1, always
    /// +1 in nonnegative mode.
    pub sign_flips: Vec<f64>,
    /// Filled by [`score_with_equivalence`]; `None` from plain matching.
    pub equivalence_verdict: Option<EquivalenceVerdict>,
    pub effective_params: EffectiveParams,
}

impl RecoveryReport {
    pub fn max_linf(&self) -> f64 {
        self.per_column_linf.iter().copied().fold(0.0, f64::max)
    }

    pub fn mean_linf(&self) -> f64 {
        if self.per_column_linf.is_empty() {
            return 0.0;
        }
        let mut acc = CompensatedSum::new();
        for &e in &self.per_column_linf {
            acc.add(e);
        }
        acc.value() / self.per_column_linf.len() as f64
    }
}

impl fmt::Display for RecoveryReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "columns_matched: {}", self.permutation.len())?;
        writeln!(f, "max_linf_error: {:.6e}", self.max_linf())?;
        writeln!(f, "mean_linf_error: {:.6e}", self.mean_linf())?;
        writeln!(
            f,
            "sign_flips: {}",
            self.sign_flips.iter().filter(|&&s| s < 0.0).count()
        )?;
        match &self.equivalence_verdict {
            Some(v) => {
                writeln!(
                    f,
                    "equivalence: {} (epsilon {:.6e}, failure fraction {:.6e} vs budget {:.6e}, {} trials)",
                    if v.pass { "pass" } else { "fail" },
                    v.epsilon,
                    v.failure_fraction,
                    v.fail_prob,
                    v.n_trials
                )?;
            }
            None => writeln!(f, "equivalence: not tested")?,
        }
        let ep = &self.effective_params;
        writeln!(f, "instance: n {} m {}", ep.n, ep.m)?;
        writeln!(f, "effective_min_strong_degree: {}", ep.min_strong_degree)?;
        writeln!(
            f,
            "effective_max_pair_intersection: {}",
            ep.max_pair_intersection
        )?;
        writeln!(
            f,
            "effective_max_small_entry_power: {:.6e}",
            ep.max_small_entry_power
        )?;
        writeln!(
            f,
            "effective_strong_magnitude_range: [{:.6e}, {:.6e}]",
            ep.min_strong_magnitude, ep.max_entry_magnitude
        )
    }
}

/// Minimum-cost assignment of each row to a distinct column (`r ≤ c`),
/// by shortest augmenting paths over dual potentials. Deterministic; ties
/// resolve toward the first improving column scanned.
fn min_cost_assignment(cost: &[Vec<f64>]) -> Vec<usize> {
    let r = cost.len();
    if r == 0 {
        return Vec::new();
    }
    let c = cost[0].len();
    assert!(r <= c, "assignment needs at least as many columns as rows");
    // 1-indexed with a virtual column 0 holding the row being inserted.
    let mut u = vec![0.0f64; r + 1];
    let mut v = vec![0.0f64; c + 1];
    let mut matched_row = vec![0usize; c + 1]; // 0 = free column
    let mut way = vec![0usize; c + 1];
    for i in 1..=r {
        matched_row[0] = i;
        let mut j0 = 0usize;
        let mut min_slack = vec![f64::INFINITY; c + 1];
        let mut used = vec![false; c + 1];
        loop {
            used[j0] = true;
            let i0 = matched_row[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=c {
                if used[j] {
                    continue;
                }
                let slack = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if slack < min_slack[j] {
                    min_slack[j] = slack;
                    way[j] = j0;
                }
                if min_slack[j] < delta {
                    delta = min_slack[j];
                    j1 = j;
                }
            }
            for j in 0..=c {
                if used[j] {
                    u[matched_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    min_slack[j] -= delta;
                }
            }
            j0 = j1;
            if matched_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched_row[j0] = matched_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![usize::MAX; r];
    for j in 1..=c {
        if matched_row[j] != 0 {
            assignment[matched_row[j] - 1] = j - 1;
        }
    }
    debug_assert!(assignment.iter().all(|&j| j != usize::MAX));
    assignment
}

fn column_distance(
    learned: &[f64],
    dict: &Dictionary,
    feature: usize,
    sign: f64,
    metric: ColumnMetric,
) -> f64 {
    match metric {
        ColumnMetric::Linf => {
            let mut worst = 0.0f64;
            for (i, &v) in learned.iter().enumerate() {
                worst = worst.max((sign * v - dict.entry(i, feature)).abs());
            }
            worst
        }
        ColumnMetric::L2 => {
            let mut acc = CompensatedSum::new();
            for (i, &v) in learned.iter().enumerate() {
                let e = sign * v - dict.entry(i, feature);
                acc.add(e * e);
            }
            acc.value().sqrt()
        }
    }
}

/// Matches recovered columns to planted features by minimum-cost bipartite
/// assignment on column distance and reports per-column errors.
///
/// General mode takes the better of the two signs per (column, feature)
/// pair and records the sign used; ties go to +1. The reported distances
/// are under the stated metric (ℓ∞ by default — see [`match_and_score`]).
pub fn match_and_score_columns(
    dict: &Dictionary,
    columns: &[Vec<f64>],
    metric: ColumnMetric,
) -> Result<RecoveryReport> {
    for (cidx, col) in columns.iter().enumerate() {
        if col.len() != dict.n() {
            return Err(Error::InvalidInput(format!(
                "recovered column {cidx} has {} pixels but the truth has {}",
                col.len(),
                dict.n()
            )));
        }
    }
    if columns.len() > dict.m() {
        return Err(Error::InvalidInput(format!(
            "{} recovered columns exceed the {} planted features",
            columns.len(),
            dict.m()
        )));
    }
    let r = columns.len();
    let m = dict.m();
    let signed_distance = |col: &[f64], j: usize| -> (f64, f64) {
        match dict.mode() {
            Mode::Nonnegative => (column_distance(col, dict, j, 1.0, metric), 1.0),
            Mode::General => {
                let plus = column_distance(col, dict, j, 1.0, metric);
                let minus = column_distance(col, dict, j, -1.0, metric);
                if plus <= minus {
                    (plus, 1.0)
                } else {
                    (minus, -1.0)
                }
            }
        }
    };
    let cost: Vec<Vec<f64>> = (0..r)
        .map(|cidx| (0..m).map(|j| signed_distance(&columns[cidx], j).0).collect())
        .collect();
    let permutation = min_cost_assignment(&cost);
    let mut per_column = Vec::with_capacity(r);
    let mut signs = Vec::with_capacity(r);
    for (cidx, &j) in permutation.iter().enumerate() {
        let (dist, sign) = signed_distance(&columns[cidx], j);
        per_column.push(dist);
        signs.push(sign);
    }
    Ok(RecoveryReport {
        permutation,
        per_column_linf: per_column,
        sign_flips: signs,
        equivalence_verdict: None,
        effective_params: measure_effective_params(dict),
    })
}

/// [`match_and_score_columns`] applied straight to a learner result.
pub fn match_and_score_with(
    dict: &Dictionary,
    learned: &LearnedDictionary,
    metric: ColumnMetric,
) -> Result<RecoveryReport> {
    match_and_score_columns(dict, &learned.columns, metric)
}

/// [`match_and_score_with`] under the default ℓ∞ metric.
pub fn match_and_score(dict: &Dictionary, learned: &LearnedDictionary) -> Result<RecoveryReport> {
    match_and_score_with(dict, learned, ColumnMetric::Linf)
}

/// Rearranges recovered columns into planted-feature order (applying the
/// matched signs), zero-filling features that were not recovered, so the
/// result is directly comparable to the truth.
pub fn aligned_from_columns(
    dict: &Dictionary,
    columns: &[Vec<f64>],
    report: &RecoveryReport,
) -> Result<Dictionary> {
    if report.permutation.len() != columns.len() {
        return Err(Error::InvalidInput(format!(
            "report matches {} columns but {} were recovered",
            report.permutation.len(),
            columns.len()
        )));
    }
    let n = dict.n();
    let m = dict.m();
    let mut entries = vec![0.0f64; n * m];
    for (cidx, (&j, &sign)) in report
        .permutation
        .iter()
        .zip(&report.sign_flips)
        .enumerate()
    {
        for (i, &v) in columns[cidx].iter().enumerate() {
            entries[i * m + j] = sign * v;
        }
    }
    Dictionary::from_entries(n, m, dict.mode(), dict.params().clone(), entries)
}

/// [`aligned_from_columns`] applied straight to a learner result.
pub fn aligned_dictionary(
    dict: &Dictionary,
    learned: &LearnedDictionary,
    report: &RecoveryReport,
) -> Result<Dictionary> {
    aligned_from_columns(dict, &learned.columns, report)
}

/// Monte Carlo test of entrywise ε-closeness of `Ax` and `Âx` on random
/// ρ-Bernoulli inputs.
///
/// A trial fails when any coordinate of `(A−Â)x` exceeds ε in magnitude;
/// the verdict passes when the failure fraction is at most `fail_prob`
/// (see [`default_fail_prob`]). Symmetric in its two dictionaries, and
/// reflexive at every ε ≥ 0. Trials use independent per-index seed streams,
/// so the verdict is deterministic and parallel-safe.
pub fn equivalence_test(
    dict_a: &Dictionary,
    dict_b: &Dictionary,
    rho: f64,
    epsilon: f64,
    n_trials: usize,
    fail_prob: f64,
    seed: u64,
) -> Result<EquivalenceVerdict> {
    if dict_a.n() != dict_b.n() || dict_a.m() != dict_b.m() {
        return Err(Error::InvalidInput(format!(
            "dimension mismatch: {}x{} vs {}x{}",
            dict_a.n(),
            dict_a.m(),
            dict_b.n(),
            dict_b.m()
        )));
    }
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::InvalidInput(format!("rho = {rho} outside [0,1]")));
    }
    if !epsilon.is_finite() || epsilon < 0.0 {
        return Err(Error::InvalidInput(format!(
            "epsilon = {epsilon} must be finite and nonnegative"
        )));
    }
    if !(0.0 < fail_prob && fail_prob <= 1.0) {
        return Err(Error::InvalidInput(format!(
            "fail_prob = {fail_prob} outside (0,1]"
        )));
    }
    let needed = (100.0 / fail_prob).ceil() as usize;
    if n_trials < needed {
        return Err(Error::InvalidInput(format!(
            "{n_trials} trials cannot resolve failure probability {fail_prob}; \
             need at least {needed}"
        )));
    }

    let n = dict_a.n();
    let m = dict_a.m();
    let mut diff = vec![0.0f64; n * m];
    let mut diff_cols: Vec<Vec<(u32, f64)>> = vec![Vec::new(); m];
    for i in 0..n {
        for j in 0..m {
            let d = dict_a.entry(i, j) - dict_b.entry(i, j);
            diff[i * m + j] = d;
            if d != 0.0 {
                diff_cols[j].push((i as u32, d));
            }
        }
    }

    let failures = (0..n_trials)
        .into_par_iter()
        .map(|trial| {
            let mut stream = rng::rng_stream(seed, trial as u64);
            let mut dx = vec![0.0f64; n];
            let mut any_active = false;
            for (j, col) in diff_cols.iter().enumerate() {
                // One Bernoulli draw per feature keeps the stream layout
                // independent of which entries differ.
                let active = rng::bernoulli(&mut stream, rho);
                let _ = j;
                if active {
                    any_active = true;
                    for &(i, d) in col {
                        dx[i as usize] += d;
                    }
                }
            }
            if !any_active {
                return 0usize;
            }
            usize::from(dx.iter().any(|v| v.abs() > epsilon))
        })
        .sum::<usize>();

    let failure_fraction = failures as f64 / n_trials as f64;
    Ok(EquivalenceVerdict {
        pass: failure_fraction <= fail_prob,
        epsilon,
        fail_prob,
        n_trials,
        failures,
        failure_fraction,
    })
}

/// Number of deviation grid points in [`validate_concentration`].
pub const CONCENTRATION_GRID_POINTS: usize = 17;

/// One grid point of an empirical tail curve.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConcentrationPoint {
    /// Deviation t.
    pub deviation: f64,
    /// Empirical `Pr[|Σ w_i x_i − E| > t]`.
    pub empirical: f64,
    /// `2·exp(−t²/(2σ̄² + (2/3)Mt))` with `σ̄² = ρ(1−ρ)Σw²`, `M = max|w|`.
    pub bound: f64,
    /// Binomial standard error of the empirical frequency.
    pub standard_error: f64,
}

/// Empirical tail curve of a weighted ρ-Bernoulli sum against its
/// sub-exponential bound.
#[derive(Clone, Debug)]
pub struct ConcentrationReport {
    pub points: Vec<ConcentrationPoint>,
    /// `ρ(1−ρ)Σw²`.
    pub variance: f64,
    /// `max|w|`.
    pub max_weight: f64,
    pub n_trials: usize,
    /// True when every grid point has `empirical ≤ bound + 3·SE`.
    pub pass: bool,
}

/// Estimates `Pr[|Σ w_i x_i − E| > t]` on a 17-point grid over
/// `t ∈ [0, 5σ̄ + M]` and compares each point against the closed-form tail
/// bound. The t = 0 point is reported with its vacuous bound of 2.
pub fn validate_concentration(
    weights: &[f64],
    rho: f64,
    n_trials: usize,
    seed: u64,
) -> Result<ConcentrationReport> {
    if weights.iter().any(|w| !w.is_finite()) {
        return Err(Error::InvalidInput("non-finite weight".into()));
    }
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::InvalidInput(format!("rho = {rho} outside [0,1]")));
    }
    if n_trials == 0 {
        return Err(Error::InvalidInput("n_trials must be ≥ 1".into()));
    }
    let mut sum = CompensatedSum::new();
    let mut sum_sq = CompensatedSum::new();
    let mut max_weight = 0.0f64;
    for &w in weights {
        sum.add(w);
        sum_sq.add(w * w);
        max_weight = max_weight.max(w.abs());
    }
    let mean = rho * sum.value();
    let variance = rho * (1.0 - rho) * sum_sq.value();
    let sigma_bar = variance.sqrt();

    let hi = 5.0 * sigma_bar + max_weight;
    let grid: Vec<f64> = (0..CONCENTRATION_GRID_POINTS)
        .map(|i| hi * i as f64 / (CONCENTRATION_GRID_POINTS - 1) as f64)
        .collect();

    let counts = (0..n_trials)
        .into_par_iter()
        .fold(
            || vec![0usize; CONCENTRATION_GRID_POINTS],
            |mut acc, trial| {
                let mut stream = rng::rng_stream(seed, trial as u64);
                let mut x = CompensatedSum::new();
                for &w in weights {
                    if rng::bernoulli(&mut stream, rho) {
                        x.add(w);
                    }
                }
                let dev = (x.value() - mean).abs();
                for (slot, &t) in acc.iter_mut().zip(&grid) {
                    if dev > t {
                        *slot += 1;
                    }
                }
                acc
            },
        )
        .reduce(
            || vec![0usize; CONCENTRATION_GRID_POINTS],
            |mut a, b| {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += y;
                }
                a
            },
        );

    let nf = n_trials as f64;
    let mut pass = true;
    let points: Vec<ConcentrationPoint> = grid
        .iter()
        .zip(&counts)
        .map(|(&t, &count)| {
            let empirical = count as f64 / nf;
            let bound = if t == 0.0 {
                2.0
            } else {
                2.0 * (-t * t / (2.0 * variance + 2.0 / 3.0 * max_weight * t)).exp()
            };
            let standard_error = (empirical * (1.0 - empirical) / nf).sqrt().max(1.0 / nf);
            if empirical > bound + 3.0 * standard_error {
                pass = false;
            }
            ConcentrationPoint {
                deviation: t,
                empirical,
                bound,
                standard_error,
            }
        })
        .collect();

    Ok(ConcentrationReport {
        points,
        variance,
        max_weight,
        n_trials,
        pass,
    })
}

/// Outcome of [`validate_conditional_shift`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShiftReport {
    /// `|Ê[X|E] − Ê[X]|`.
    pub shift: f64,
    /// `2δM` with δ = measured `1 − P̂(E)`.
    pub bound: f64,
    pub delta: f64,
    pub bound_m: f64,
    pub standard_error: f64,
    /// `shift ≤ bound + 3·SE` (with a float-dust allowance for the exactly
    /// tight two-point case).
    pub pass: bool,
}

/// Checks the conditional-mean shift inequality `|E[X|E] − E[X]| ≤ 2δM` on
/// supplied draws of a bounded variable and an event mask.
///
/// δ is measured from the mask; `bound_m` must dominate every `|x|`. The
/// standard error covers both mean estimates.
pub fn validate_conditional_shift(
    samples: &[f64],
    event: &[bool],
    bound_m: f64,
) -> Result<ShiftReport> {
    if samples.is_empty() || samples.len() != event.len() {
        return Err(Error::InvalidInput(format!(
            "{} samples vs {} event flags",
            samples.len(),
            event.len()
        )));
    }
    if !(bound_m.is_finite() && bound_m >= 0.0) {
        return Err(Error::InvalidInput(format!(
            "bound M = {bound_m} must be finite and nonnegative"
        )));
    }
    if let Some(bad) = samples.iter().find(|x| x.abs() > bound_m + 1e-12) {
        return Err(Error::InvalidInput(format!(
            "sample {bad} exceeds the stated bound M = {bound_m}"
        )));
    }
    let n = samples.len();
    let n_event = event.iter().filter(|&&e| e).count();
    if n_event == 0 {
        return Err(Error::InvalidInput(
            "the conditioning event never occurs in the supplied draws".into(),
        ));
    }
    let mut all = CompensatedSum::new();
    let mut all_sq = CompensatedSum::new();
    let mut cond = CompensatedSum::new();
    for (&x, &e) in samples.iter().zip(event) {
        all.add(x);
        all_sq.add(x * x);
        if e {
            cond.add(x);
        }
    }
    let mean = all.value() / n as f64;
    let mean_cond = cond.value() / n_event as f64;
    let var = (all_sq.value() / n as f64 - mean * mean).max(0.0);
    let std = var.sqrt();
    let delta = 1.0 - n_event as f64 / n as f64;
    let shift = (mean_cond - mean).abs();
    let bound = 2.0 * delta * bound_m;
    let standard_error = std * (1.0 / (n_event as f64).sqrt() + 1.0 / (n as f64).sqrt());
    Ok(ShiftReport {
        shift,
        bound,
        delta,
        bound_m,
        standard_error,
        pass: shift <= bound + 3.0 * standard_error + 1e-12,
    })
}

/// Writes the report's key-value text form.
pub fn write_report(report: &RecoveryReport, path: &Path) -> Result<()> {
    std::fs::write(path, report.to_string())?;
    Ok(())
}

/// Writes the per-column error table as CSV.
pub fn write_column_errors_csv(report: &RecoveryReport, path: &Path) -> Result<()> {
    let mut out = String::from("# sparsedict-score-csv v1\ncolumn,true_feature,sign,linf_error\n");
    for (c, ((&j, &sign), &err)) in report
        .permutation
        .iter()
        .zip(&report.sign_flips)
        .zip(&report.per_column_linf)
        .enumerate()
    {
        writeln!(out, "{c},{j},{},{err:.17e}", sign as i32)
            .expect("writing to a String cannot fail");
    }
    std::fs::write(path, out)?;
    Ok(())
}
