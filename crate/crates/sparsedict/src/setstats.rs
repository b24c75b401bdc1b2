//! Per-set statistics over observation batches: the sums `β_T = Σ_{i∈T} y_i`,
//! ground-truth coefficients `β_{j,T} = Σ_{i∈T} A[i][j]`, correlated-set
//! tests, and the empirical bias order statistic — in both the nonnegative
//! (upper-tail) and general (two-tailed) variants.
//!
//! All operations are pure over immutable batches: every returned statistic
//! is a deterministic function of `(batch, set, params, mode)`, so sets can
//! be evaluated concurrently in any order. Sums over samples use compensated
//! summation (target 1e-10 relative accuracy at desk scale).

use crate::error::Error;
use crate::model::{Dictionary, Mode, RegimeParams};
use crate::numeric::{ceil_guarded, CompensatedSum};
use crate::sampling::SampleBatch;
use crate::Result;

/// Tail elevation multiple for the nonnegative correlated-set definition:
/// a set is correlated when `β_T ≥ Ê[β_T] + 0.9·σ·|T|` for an ≈ρ fraction
/// of samples.
pub const ELEVATION_NONNEGATIVE: f64 = 0.9;

/// Tail elevation multiple for the general (two-tailed) definition; the
/// two constants are kept distinct, named, and as stated.
pub const ELEVATION_GENERAL: f64 = 0.8;

/// Minimum expected number of elevated samples `N·ρ` for tail statistics.
pub const MIN_EFFECTIVE_SAMPLES: usize = 20;

/// Standard-error multiple used in the correlated-test slack (see
/// [`tail_fraction_slack`]).
pub const TAIL_SLACK_SE_FACTOR: f64 = 6.0;

/// Slack subtracted from ρ when testing a tail fraction: the larger of the
/// definitional `2/n²` term and [`TAIL_SLACK_SE_FACTOR`] standard errors of
/// a Binomial(N, ρ) fraction.
///
/// At batch sizes `N ≥ n²/ρ` the standard error is dominated by `1/n²` and
/// the second term vanishes from the max; desk-scale batches are far
/// smaller, where a bare `ρ − 2/n²` cutoff would sit well inside sampling
/// noise of the tail fraction itself and turn the test into a coin flip on
/// genuinely correlated sets.
pub fn tail_fraction_slack(n_pixels: usize, n_samples: usize, rho: f64) -> f64 {
    let definitional = 2.0 / (n_pixels as f64 * n_pixels as f64);
    let standard_error = (rho * (1.0 - rho) / n_samples as f64).sqrt();
    definitional.max(TAIL_SLACK_SE_FACTOR * standard_error)
}

/// What a pixel set is used as; sizes are tied to the regime.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SetKind {
    /// A candidate (signature-size) set: exactly t pixels.
    Candidate,
    /// An expanded set: exactly d pixels.
    Expanded,
    /// A refinement set: at least d pixels.
    Refinement,
}

/// A sorted set of distinct pixel indices with a declared role.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PixelSet {
    indices: Vec<u32>,
    kind: SetKind,
}

impl PixelSet {
    /// Builds a set, validating sortedness, distinctness, non-emptiness and
    /// the size its kind demands.
    pub fn new(indices: Vec<u32>, kind: SetKind, params: &RegimeParams) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::InvalidInput("pixel set must be nonempty".into()));
        }
        if !indices.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::InvalidInput(
                "pixel set indices must be strictly increasing".into(),
            ));
        }
        let ok = match kind {
            SetKind::Candidate => indices.len() == params.t,
            SetKind::Expanded => indices.len() == params.d,
            SetKind::Refinement => indices.len() >= params.d,
        };
        if !ok {
            return Err(Error::InvalidInput(format!(
                "{kind:?} set has {} pixels; regime demands t = {}, d = {}",
                indices.len(),
                params.t,
                params.d
            )));
        }
        Ok(PixelSet { indices, kind })
    }

    pub fn candidate(indices: Vec<u32>, params: &RegimeParams) -> Result<Self> {
        Self::new(indices, SetKind::Candidate, params)
    }

    pub fn expanded(indices: Vec<u32>, params: &RegimeParams) -> Result<Self> {
        Self::new(indices, SetKind::Expanded, params)
    }

    pub fn refinement(indices: Vec<u32>, params: &RegimeParams) -> Result<Self> {
        Self::new(indices, SetKind::Refinement, params)
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn kind(&self) -> SetKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Ground-truth per-feature coefficients of a set (oracle-side object:
/// requires the true dictionary).
#[derive(Clone, Debug, PartialEq)]
pub struct SetCoefficients {
    /// `beta[j] = β_{j,T} = Σ_{i∈T} A[i][j]`.
    pub beta: Vec<f64>,
    /// `nu_minus[j] = ν_{−j,T} = √(ρ·Σ_{k≠j} β_{k,T}²)` — the standard
    /// deviation of `β_T` with feature j's contribution removed.
    pub nu_minus: Vec<f64>,
}

/// Tail statistics of `β_T` over a batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BiasStat {
    /// Ê[β_T].
    pub empirical_mean: f64,
    /// The ⌈ρN/2⌉-th largest deviation from Ê[β_T] (absolute deviation in
    /// general mode; clamped at 0 in nonnegative mode). Always ≥ 0.
    pub empirical_bias: f64,
    /// Fraction of samples with β_T ≥ Ê + e·σ·|T| where e is the mode's
    /// elevation constant.
    pub tail_fraction_pos: f64,
    /// Fraction of samples with β_T ≤ Ê − e·σ·|T|.
    pub tail_fraction_neg: f64,
}

/// Verdict of [`correlated_test`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CorrelationVerdict {
    CorrelatedPos,
    CorrelatedNeg,
    NotCorrelated,
}

/// Per-sample sums `β_T^k = Σ_{i∈T} y_i^k` in one pass over the batch.
pub fn beta_sum(batch: &SampleBatch, set: &PixelSet) -> Vec<f64> {
    let n = batch.n();
    assert!(
        set.indices().last().map_or(true, |&i| (i as usize) < n),
        "pixel set index out of range for batch with n = {n}"
    );
    (0..batch.n_samples())
        .map(|k| {
            let row = batch.sample(k);
            let mut acc = CompensatedSum::new();
            for &i in set.indices() {
                acc.add(row[i as usize]);
            }
            acc.value()
        })
        .collect()
}

/// Exact ground-truth coefficients `β_{j,T}` and deviations `ν_{−j,T}`.
pub fn true_coefficients(dict: &Dictionary, set: &PixelSet) -> SetCoefficients {
    let m = dict.m();
    let rho = dict.params().rho;
    let mut beta = vec![0.0f64; m];
    for j in 0..m {
        let mut acc = CompensatedSum::new();
        for &i in set.indices() {
            acc.add(dict.entry(i as usize, j));
        }
        beta[j] = acc.value();
    }
    let mut total_sq = CompensatedSum::new();
    for &b in &beta {
        total_sq.add(b * b);
    }
    let total = total_sq.value();
    let nu_minus = beta
        .iter()
        .map(|&b| (rho * (total - b * b)).max(0.0).sqrt())
        .collect();
    SetCoefficients { beta, nu_minus }
}

/// Shared tail computation behind [`empirical_bias`] and [`correlated_test`].
fn tail_stats(
    batch: &SampleBatch,
    set: &PixelSet,
    params: &RegimeParams,
    mode: Mode,
) -> Result<BiasStat> {
    let n_samples = batch.n_samples();
    let rho = batch.rho();
    let effective = n_samples as f64 * rho;
    if effective < MIN_EFFECTIVE_SAMPLES as f64 {
        return Err(Error::InsufficientSamples {
            n_samples,
            rho,
            effective,
            required: MIN_EFFECTIVE_SAMPLES,
        });
    }
    let sums = beta_sum(batch, set);
    let mut acc = CompensatedSum::new();
    for &s in &sums {
        acc.add(s);
    }
    let mean = acc.value() / n_samples as f64;

    let elevation = match mode {
        Mode::Nonnegative => ELEVATION_NONNEGATIVE,
        Mode::General => ELEVATION_GENERAL,
    } * params.sigma
        * set.len() as f64;
    let hi = mean + elevation;
    let lo = mean - elevation;
    let mut count_pos = 0usize;
    let mut count_neg = 0usize;
    for &s in &sums {
        if s >= hi {
            count_pos += 1;
        }
        if s <= lo {
            count_neg += 1;
        }
    }

    // ⌈ρN/2⌉-th largest deviation; the guarded ceiling keeps float dust in
    // ρN/2 from shifting the rank. Ties resolve by the sorted-value
    // convention: the k-th element of the descending multiset.
    let rank = ceil_guarded(effective / 2.0) as usize;
    let rank = rank.clamp(1, n_samples);
    let mut deviations: Vec<f64> = match mode {
        Mode::Nonnegative => sums.iter().map(|&s| s - mean).collect(),
        Mode::General => sums.iter().map(|&s| (s - mean).abs()).collect(),
    };
    let (_, kth, _) =
        deviations.select_nth_unstable_by(rank - 1, |a, b| f64::total_cmp(b, a));
    let bias = match mode {
        Mode::Nonnegative => kth.max(0.0),
        Mode::General => *kth,
    };

    Ok(BiasStat {
        empirical_mean: mean,
        empirical_bias: bias,
        tail_fraction_pos: count_pos as f64 / n_samples as f64,
        tail_fraction_neg: count_neg as f64 / n_samples as f64,
    })
}

/// Tests whether the set's `β_T` has an elevated tail of probability ≈ ρ.
///
/// Nonnegative mode compares the fraction of samples with
/// `β_T ≥ Ê + 0.9σ|T|` against `ρ −` [`tail_fraction_slack`]; general mode
/// tests both tails at `0.8σ|T|`. When both general tails pass, the verdict
/// is the direction with the larger fraction (positive on an exact tie) —
/// the three-valued verdict keeps downstream plumbing simple and a genuine
/// both-tails set is dominated by whichever feature elevates it more.
pub fn correlated_test(
    batch: &SampleBatch,
    set: &PixelSet,
    params: &RegimeParams,
    mode: Mode,
) -> Result<CorrelationVerdict> {
    let stat = tail_stats(batch, set, params, mode)?;
    let cutoff = batch.rho() - tail_fraction_slack(batch.n(), batch.n_samples(), batch.rho());
    let pos = stat.tail_fraction_pos >= cutoff;
    let neg = stat.tail_fraction_neg >= cutoff;
    Ok(match mode {
        Mode::Nonnegative => {
            if pos {
                CorrelationVerdict::CorrelatedPos
            } else {
                CorrelationVerdict::NotCorrelated
            }
        }
        Mode::General => match (pos, neg) {
            (true, true) => {
                if stat.tail_fraction_pos >= stat.tail_fraction_neg {
                    CorrelationVerdict::CorrelatedPos
                } else {
                    CorrelationVerdict::CorrelatedNeg
                }
            }
            (true, false) => CorrelationVerdict::CorrelatedPos,
            (false, true) => CorrelationVerdict::CorrelatedNeg,
            (false, false) => CorrelationVerdict::NotCorrelated,
        },
    })
}

/// Empirical bias of a set: the ⌈ρN/2⌉-th largest deviation of `β_T` from
/// its empirical mean (absolute deviation in general mode), plus the tail
/// fractions at the mode's elevation threshold.
pub fn empirical_bias(
    batch: &SampleBatch,
    set: &PixelSet,
    params: &RegimeParams,
    mode: Mode,
) -> Result<BiasStat> {
    tail_stats(batch, set, params, mode)
}

/// Learner-side coefficient surrogate: the column estimate summed over the
/// set, `β̂ = Σ_{i∈T} estimate[i]`.
pub fn estimated_coefficient(column_estimate: &[f64], set: &PixelSet) -> f64 {
    let mut acc = CompensatedSum::new();
    for &i in set.indices() {
        acc.add(column_estimate[i as usize]);
    }
    acc.value()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{generate_planted, threshold_graph, Mode, RegimeParams};
    use crate::sampling::{draw_batch, SampleBatch};

    fn params_nn() -> RegimeParams {
        // τ is sized so that even t weak entries at the 0.8τ cap sum below
        // the signature cap σ²t/(Δ·ln n) ≈ 0.14 — weak-only coefficients
        // then satisfy the signature bound deterministically.
        RegimeParams {
            sigma: 0.5,
            lambda: 1.0,
            delta: 1.0,
            rho: 0.05,
            d: 6,
            t: 3,
            tau: 0.055,
            kappa: 1,
            gamma: 0.1,
            big_c: 1.0,
        }
    }

    /// Planted nonnegative instance with disjoint supports (200 pixels hold
    /// 32 features × 6 strong pixels) so signature sets are easy to exhibit.
    fn planted_nn() -> crate::model::Dictionary {
        generate_planted(&params_nn(), 200, 32, Mode::Nonnegative, 41).unwrap()
    }

    /// Feature whose top-t strong pixels carry the largest ground-truth
    /// coefficient — the cleanest signature set the instance offers.
    fn best_feature_and_top_set(
        dict: &crate::model::Dictionary,
        p: &RegimeParams,
        want_negative: bool,
    ) -> (usize, Vec<u32>) {
        let strong = threshold_graph(dict, p.sigma);
        let mut best: Option<(f64, usize, Vec<u32>)> = None;
        for j in 0..dict.m() {
            let pixels = &strong.by_feature[j];
            if pixels.len() < p.t {
                continue;
            }
            if want_negative && dict.entry(pixels[0] as usize, j) >= 0.0 {
                continue;
            }
            let mut by_mag: Vec<u32> = pixels.clone();
            by_mag.sort_by(|&a, &b| {
                dict.entry(b as usize, j)
                    .abs()
                    .total_cmp(&dict.entry(a as usize, j).abs())
            });
            let mut top: Vec<u32> = by_mag[..p.t].to_vec();
            top.sort_unstable();
            let mag: f64 = top.iter().map(|&i| dict.entry(i as usize, j).abs()).sum();
            if best.as_ref().map_or(true, |(m, _, _)| mag > *m) {
                best = Some((mag, j, top));
            }
        }
        let (_, j, set) = best.expect("no usable feature");
        (j, set)
    }

    fn synthetic_batch(values: &[f64], rho: f64) -> SampleBatch {
        SampleBatch::from_parts(1, rho, 0, values.to_vec(), None, 0).unwrap()
    }

    fn single_pixel_set(params: &RegimeParams) -> PixelSet {
        let one = RegimeParams { t: 1, d: 1, kappa: 0, ..*params };
        PixelSet::candidate(vec![0], &one).unwrap()
    }

    #[test]
    fn pixel_set_validation_rules() {
        let p = params_nn();
        assert!(PixelSet::candidate(vec![3, 1, 2], &p).is_err(), "unsorted");
        assert!(PixelSet::candidate(vec![1, 1, 2], &p).is_err(), "duplicate");
        assert!(PixelSet::candidate(vec![], &p).is_err(), "empty");
        assert!(PixelSet::candidate(vec![1, 2], &p).is_err(), "size ≠ t");
        assert!(PixelSet::candidate(vec![1, 2, 3], &p).is_ok());
        assert!(PixelSet::expanded(vec![1, 2, 3], &p).is_err(), "size ≠ d");
        assert!(PixelSet::expanded((0..6).collect(), &p).is_ok());
        assert!(PixelSet::refinement((0..5).collect(), &p).is_err(), "size < d");
        assert!(PixelSet::refinement((0..11).collect(), &p).is_ok());
    }

    #[test]
    fn beta_sum_of_full_sample_is_total() {
        // One sample (1,2,3); T = all pixels → 6.
        let p = RegimeParams { t: 3, d: 3, kappa: 2, ..params_nn() };
        let batch = SampleBatch::from_parts(3, 0.5, 0, vec![1.0, 2.0, 3.0], None, 0).unwrap();
        let set = PixelSet::candidate(vec![0, 1, 2], &p).unwrap();
        assert_eq!(beta_sum(&batch, &set), vec![6.0]);
    }

    #[test]
    fn beta_sum_mean_matches_set_size_when_normalized() {
        // Instance whose rows reach sum 1/ρ exactly, so E[β_T] = |T|.
        let p = RegimeParams {
            d: 2,
            t: 2,
            kappa: 1,
            rho: 0.1,
            tau: 0.45,
            ..params_nn()
        };
        let dict = generate_planted(&p, 32, 64, Mode::Nonnegative, 5).unwrap();
        let n_samples = 100_000;
        let batch = draw_batch(&dict, n_samples, 61, false).unwrap();
        let set = PixelSet::candidate(vec![4, 17], &p).unwrap();
        let sums = beta_sum(&batch, &set);
        let mean: f64 = sums.iter().sum::<f64>() / n_samples as f64;
        let coeff = true_coefficients(&dict, &set);
        let var: f64 = coeff
            .beta
            .iter()
            .map(|b| p.rho * (1.0 - p.rho) * b * b)
            .sum();
        let se = (var / n_samples as f64).sqrt();
        assert!(
            (mean - set.len() as f64).abs() <= 5.0 * se,
            "mean {mean} vs {} ± {}",
            set.len(),
            5.0 * se
        );
    }

    #[test]
    fn true_coefficients_match_brute_force_and_identity() {
        let p = RegimeParams { d: 4, t: 2, tau: 0.45, rho: 0.1, ..params_nn() };
        let dict = generate_planted(&p, 16, 16, Mode::Nonnegative, 7).unwrap();
        let set = PixelSet::candidate(vec![2, 9], &p).unwrap();
        let coeff = true_coefficients(&dict, &set);
        for j in 0..dict.m() {
            let direct: f64 = set.indices().iter().map(|&i| dict.entry(i as usize, j)).sum();
            assert!((coeff.beta[j] - direct).abs() < 1e-12);
            let rest: f64 = (0..dict.m())
                .filter(|&k| k != j)
                .map(|k| {
                    let b: f64 =
                        set.indices().iter().map(|&i| dict.entry(i as usize, k)).sum();
                    b * b
                })
                .sum();
            assert!((coeff.nu_minus[j] - (p.rho * rest).sqrt()).abs() < 1e-9);
        }
        // Consistency identity: Σ_j β_j equals Σ_{i∈T} row-sum(i).
        let total: f64 = coeff.beta.iter().sum();
        let row_sums = dict.row_sums();
        let expected: f64 = set.indices().iter().map(|&i| row_sums[i as usize]).sum();
        assert!((total - expected).abs() < 1e-9);
    }

    #[test]
    fn true_coefficients_singleton_reads_one_row() {
        let p = RegimeParams { d: 4, t: 2, tau: 0.45, rho: 0.1, ..params_nn() };
        let dict = generate_planted(&p, 16, 16, Mode::Nonnegative, 7).unwrap();
        let one = RegimeParams { t: 1, d: 1, kappa: 0, ..p };
        let set = PixelSet::candidate(vec![5], &one).unwrap();
        let coeff = true_coefficients(&dict, &set);
        for j in 0..dict.m() {
            assert_eq!(coeff.beta[j], dict.entry(5, j));
        }
    }

    #[test]
    fn disjoint_supports_give_single_strong_coefficient() {
        let dict = planted_nn();
        let p = params_nn();
        let strong = threshold_graph(&dict, p.sigma);
        // T ⊂ support of feature 3; supports are disjoint, so only feature 3
        // has a strong coefficient over T.
        let set =
            PixelSet::candidate(strong.by_feature[3][..p.t].to_vec(), &p).unwrap();
        let coeff = true_coefficients(&dict, &set);
        for (j, &b) in coeff.beta.iter().enumerate() {
            if j == 3 {
                assert!(b >= p.sigma * p.t as f64);
            } else {
                assert!(
                    b <= p.tau * p.t as f64,
                    "feature {j} unexpectedly strong on T: {b}"
                );
            }
        }
    }

    #[test]
    fn signature_set_is_correlated_pos_and_weak_set_is_not() {
        let dict = planted_nn();
        let p = params_nn();
        let strong = threshold_graph(&dict, p.sigma);
        let n_samples = 100_000;
        let batch = draw_batch(&dict, n_samples, 67, false).unwrap();

        let (j_sig, top) = best_feature_and_top_set(&dict, &p, false);
        let sig = PixelSet::candidate(top, &p).unwrap();
        // Confirm the signature-set premises directly against the truth.
        let coeff = true_coefficients(&dict, &sig);
        assert!(coeff.beta[j_sig] >= p.sigma * p.t as f64);
        let cap = p.signature_cap(dict.n(), p.t);
        for (j, &b) in coeff.beta.iter().enumerate() {
            if j != j_sig {
                assert!(b <= cap, "feature {j}: β = {b} > cap {cap}");
            }
        }
        assert_eq!(
            correlated_test(&batch, &sig, &p, Mode::Nonnegative).unwrap(),
            CorrelationVerdict::CorrelatedPos
        );

        // Pixels strongly touched by no feature: every coefficient stays
        // below τ·t, and the set must not test correlated.
        let strong_free: Vec<u32> = (0..dict.n() as u32)
            .filter(|&i| strong.by_pixel[i as usize].is_empty())
            .take(p.t)
            .collect();
        assert_eq!(strong_free.len(), p.t, "instance lost its free pixels");
        let weak = PixelSet::candidate(strong_free, &p).unwrap();
        let wcoeff = true_coefficients(&dict, &weak);
        for &b in &wcoeff.beta {
            assert!(b <= p.tau * p.t as f64);
        }
        assert_eq!(
            correlated_test(&batch, &weak, &p, Mode::Nonnegative).unwrap(),
            CorrelationVerdict::NotCorrelated
        );
    }

    #[test]
    fn negative_feature_tests_correlated_neg_in_general_mode() {
        // General-mode power fill needs chunkier weak entries (squares must
        // close the row-power gap within m free cells), hence τ = 0.3; the
        // set only needs a dominant negative feature, not full signature
        // margins.
        let p = RegimeParams { d: 3, tau: 0.3, ..params_nn() };
        let dict = generate_planted(&p, 200, 32, Mode::General, 43).unwrap();
        let (j_neg, top) = best_feature_and_top_set(&dict, &p, true);
        let set = PixelSet::candidate(top, &p).unwrap();
        let coeff = true_coefficients(&dict, &set);
        assert!(coeff.beta[j_neg] <= -p.sigma * p.t as f64);
        let batch = draw_batch(&dict, 100_000, 71, false).unwrap();
        assert_eq!(
            correlated_test(&batch, &set, &p, Mode::General).unwrap(),
            CorrelationVerdict::CorrelatedNeg
        );
    }

    #[test]
    fn insufficient_samples_is_reported() {
        let dict = planted_nn();
        let p = params_nn();
        let batch = draw_batch(&dict, 300, 3, false).unwrap(); // N·ρ = 15 < 20
        let set = PixelSet::candidate(vec![0, 1, 2], &p).unwrap();
        match correlated_test(&batch, &set, &p, Mode::Nonnegative) {
            Err(Error::InsufficientSamples { effective, required, .. }) => {
                assert!(effective < required as f64);
            }
            other => panic!("expected InsufficientSamples, got {other:?}"),
        }
        assert!(matches!(
            empirical_bias(&batch, &set, &p, Mode::Nonnegative),
            Err(Error::InsufficientSamples { .. })
        ));
    }

    #[test]
    fn constant_batch_has_zero_bias() {
        let p = params_nn();
        let batch = synthetic_batch(&vec![2.5; 1000], 0.1);
        let set = single_pixel_set(&p);
        for mode in [Mode::Nonnegative, Mode::General] {
            let stat = empirical_bias(&batch, &set, &p, mode).unwrap();
            assert_eq!(stat.empirical_bias, 0.0, "{mode:?}");
            assert_eq!(stat.empirical_mean, 2.5);
        }
    }

    #[test]
    fn bias_is_exact_order_statistic_by_construction() {
        // 100 of 1000 samples sit exactly 10 above the empirical mean
        // (ρ = 0.1 → rank ⌈ρN/2⌉ = 50), the rest 10/9 below it.
        let rho = 0.1;
        let n_samples = 1000;
        let k = 100;
        let a = 20.0;
        let b = a - 10.0 * n_samples as f64 / (n_samples - k) as f64;
        let mut values = vec![a; k];
        values.extend(std::iter::repeat(b).take(n_samples - k));
        let batch = synthetic_batch(&values, rho);
        let p = params_nn();
        let set = single_pixel_set(&p);
        for mode in [Mode::Nonnegative, Mode::General] {
            let stat = empirical_bias(&batch, &set, &p, mode).unwrap();
            assert!(
                (stat.empirical_mean - (a - 10.0)).abs() < 1e-9,
                "mean {}",
                stat.empirical_mean
            );
            assert!(
                (stat.empirical_bias - 10.0).abs() < 1e-9,
                "{mode:?}: bias {}",
                stat.empirical_bias
            );
        }
    }

    #[test]
    fn bias_is_permutation_and_shift_invariant() {
        let rho = 0.1;
        let values: Vec<f64> = (0..400).map(|i| ((i * 37) % 113) as f64 / 7.0).collect();
        let p = params_nn();
        let set = single_pixel_set(&p);
        let stat = empirical_bias(&synthetic_batch(&values, rho), &set, &p, Mode::General).unwrap();
        // Permute samples.
        let mut permuted = values.clone();
        permuted.reverse();
        permuted.swap(3, 200);
        let stat_p =
            empirical_bias(&synthetic_batch(&permuted, rho), &set, &p, Mode::General).unwrap();
        assert_eq!(stat.empirical_bias, stat_p.empirical_bias);
        // Shift every sample by a constant: B̂ unchanged.
        let shifted: Vec<f64> = values.iter().map(|v| v + 129.25).collect();
        let stat_s =
            empirical_bias(&synthetic_batch(&shifted, rho), &set, &p, Mode::General).unwrap();
        assert!((stat.empirical_bias - stat_s.empirical_bias).abs() < 1e-9);
        assert!((stat_s.empirical_mean - stat.empirical_mean - 129.25).abs() < 1e-9);
    }

    #[test]
    fn negating_samples_swaps_tails_and_preserves_bias() {
        let rho = 0.1;
        let values: Vec<f64> = (0..500)
            .map(|i| if i % 10 == 0 { 4.0 } else { -0.1 })
            .collect();
        let p = params_nn();
        let set = single_pixel_set(&p);
        let stat = empirical_bias(&synthetic_batch(&values, rho), &set, &p, Mode::General).unwrap();
        let negated: Vec<f64> = values.iter().map(|v| -v).collect();
        let stat_n =
            empirical_bias(&synthetic_batch(&negated, rho), &set, &p, Mode::General).unwrap();
        assert_eq!(stat.empirical_bias, stat_n.empirical_bias);
        assert_eq!(stat.tail_fraction_pos, stat_n.tail_fraction_neg);
        assert_eq!(stat.tail_fraction_neg, stat_n.tail_fraction_pos);
    }

    #[test]
    fn bias_sandwiches_max_coefficient_on_expanded_set() {
        // σ = 0.8 keeps the systematic part of |B̂ − max β| (≈ ρ·max β) well
        // inside the 0.1dσ²/Λ budget.
        let p = RegimeParams { sigma: 0.8, ..params_nn() };
        let dict = generate_planted(&p, 200, 32, Mode::Nonnegative, 47).unwrap();
        let strong = threshold_graph(&dict, p.sigma);
        let set = PixelSet::expanded(strong.by_feature[2][..p.d].to_vec(), &p).unwrap();
        let coeff = true_coefficients(&dict, &set);
        let max_beta = coeff.beta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert!(max_beta >= 0.5 * p.d as f64 * p.sigma);
        let batch = draw_batch(&dict, 100_000, 73, false).unwrap();
        let stat = empirical_bias(&batch, &set, &p, Mode::Nonnegative).unwrap();
        let budget = 0.1 * p.d as f64 * p.sigma * p.sigma / p.lambda;
        assert!(
            (stat.empirical_bias - max_beta).abs() <= budget,
            "B̂ = {} vs max β = {max_beta}, budget {budget}",
            stat.empirical_bias
        );
    }

    #[test]
    fn estimated_coefficient_matches_truth_on_exact_column() {
        let dict = planted_nn();
        let p = params_nn();
        let set = PixelSet::candidate(vec![1, 8, 133], &p).unwrap();
        let coeff = true_coefficients(&dict, &set);
        let column = dict.column(6);
        let surrogate = estimated_coefficient(&column, &set);
        assert!((surrogate - coeff.beta[6]).abs() < 1e-12);
        // Entrywise δ-perturbation moves the surrogate by at most |T|·δ.
        let delta = 0.01;
        let perturbed: Vec<f64> = column.iter().map(|v| v + delta).collect();
        let moved = estimated_coefficient(&perturbed, &set);
        assert!((moved - surrogate).abs() <= set.len() as f64 * delta + 1e-12);
    }
}
