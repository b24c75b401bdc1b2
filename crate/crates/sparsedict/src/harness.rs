//! Experiment orchestration: a flat text config format, end-to-end runs
//! (generate → sample → learn → score) with per-stage timing and artifact
//! persistence, repetitions under derived seeds, and parameter sweeps with
//! a bounded worker pool and versioned CSV output.
//!
//! Reproducibility contract: every random choice flows from the single
//! `sampling.seed` through a fixed derivation tree — per repetition r,
//! `repetition = derive(master, "repetition", r)` and from that the
//! `instance`, `batch`, `strategy`, and `scoring` seeds — so identical
//! configs produce byte-identical artifacts, and each stage can be re-run
//! in isolation from its recorded seed.

use std::collections::HashSet;
use std::fmt;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use crate::error::Error;
use crate::learner::{learn, CandidateStrategy, LearnLog, LearnedDictionary, StrategyKind};
use crate::model::{
    generate_planted, write_dictionary, Dictionary, Mode, RegimeParams, DEFAULT_T_SCALE,
};
use crate::numeric::CompensatedSum;
use crate::oracle::{
    aligned_dictionary, equivalence_test, match_and_score, write_column_errors_csv, write_report,
    RecoveryReport,
};
use crate::rng::derive_seed;
use crate::sampling::{draw_batch, SampleBatch};
use crate::Result;

/// Environment variable bounding the sweep worker pool.
pub const WORKERS_ENV_VAR: &str = "SPARSEDICT_WORKERS";

/// First line of every config file written by [`ExperimentConfig::to_text`].
pub const CONFIG_HEADER: &str = "# sparsedict experiment config v1";

/// First line of every sweep CSV.
pub const SWEEP_CSV_HEADER: &str = "# sparsedict-sweep-csv v1";

/// The recognized config keys, in canonical output order.
pub const CONFIG_KEYS: &[&str] = &[
    "instance.n",
    "instance.m",
    "instance.mode",
    "instance.sigma",
    "instance.lambda",
    "instance.delta",
    "instance.rho",
    "instance.d",
    "instance.tau",
    "instance.kappa",
    "instance.gamma",
    "instance.big_c",
    "sampling.n_samples",
    "sampling.seed",
    "learner.strategy",
    "learner.t",
    "learner.m_target",
    "scoring.epsilon",
    "scoring.fail_prob",
    "scoring.trials",
    "output.dir",
    "run.repetitions",
];

/// A fully resolved experiment description.
///
/// The text form is flat `key = value` lines with `#` comments (see
/// [`CONFIG_KEYS`]). Optional keys get defaults at parse time, so a parsed
/// config always prints every field and `parse(to_text(c)) == c`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    /// Pixels (`instance.n`).
    pub n: usize,
    /// Features (`instance.m`).
    pub m: usize,
    /// Sign structure (`instance.mode`).
    pub mode: Mode,
    /// Regime constants (`instance.*` and `learner.t`).
    pub params: RegimeParams,
    /// Batch size (`sampling.n_samples`).
    pub n_samples: usize,
    /// Master seed (`sampling.seed`); everything else derives from it.
    pub master_seed: u64,
    /// Candidate generation (`learner.strategy`); the per-repetition seed is
    /// derived, not configured.
    pub strategy: StrategyKind,
    /// Columns to recover (`learner.m_target`, default `instance.m`).
    pub m_target: usize,
    /// Equivalence-test tolerance (`scoring.epsilon`, default 0.1).
    pub epsilon: f64,
    /// Equivalence-test failure budget (`scoring.fail_prob`, default `1/n`).
    pub fail_prob: f64,
    /// Equivalence-test trials (`scoring.trials`, default `⌈100/fail_prob⌉`).
    pub equivalence_trials: usize,
    /// Artifact directory (`output.dir`).
    pub output_dir: PathBuf,
    /// Repetitions under distinct derived seeds (`run.repetitions`,
    /// default 1).
    pub repetitions: usize,
}

/// Partially specified config; every field optional until [`Builder::finish`].
#[derive(Default)]
struct Builder {
    n: Option<usize>,
    m: Option<usize>,
    mode: Option<Mode>,
    sigma: Option<f64>,
    lambda: Option<f64>,
    delta: Option<f64>,
    rho: Option<f64>,
    d: Option<usize>,
    t: Option<usize>,
    tau: Option<f64>,
    kappa: Option<usize>,
    gamma: Option<f64>,
    big_c: Option<f64>,
    n_samples: Option<usize>,
    master_seed: Option<u64>,
    strategy: Option<StrategyKind>,
    m_target: Option<usize>,
    epsilon: Option<f64>,
    fail_prob: Option<f64>,
    equivalence_trials: Option<usize>,
    output_dir: Option<PathBuf>,
    repetitions: Option<usize>,
}

fn bad_value(key: &str, raw: &str, err: impl fmt::Display) -> Error {
    Error::ConfigInvalid(format!("bad value for {key}: {raw:?} ({err})"))
}

impl Builder {
    fn from_config(c: &ExperimentConfig) -> Self {
        Builder {
            n: Some(c.n),
            m: Some(c.m),
            mode: Some(c.mode),
            sigma: Some(c.params.sigma),
            lambda: Some(c.params.lambda),
            delta: Some(c.params.delta),
            rho: Some(c.params.rho),
            d: Some(c.params.d),
            t: Some(c.params.t),
            tau: Some(c.params.tau),
            kappa: Some(c.params.kappa),
            gamma: Some(c.params.gamma),
            big_c: Some(c.params.big_c),
            n_samples: Some(c.n_samples),
            master_seed: Some(c.master_seed),
            strategy: Some(c.strategy.clone()),
            m_target: Some(c.m_target),
            epsilon: Some(c.epsilon),
            fail_prob: Some(c.fail_prob),
            equivalence_trials: Some(c.equivalence_trials),
            output_dir: Some(c.output_dir.clone()),
            repetitions: Some(c.repetitions),
        }
    }

    fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        fn int<T: std::str::FromStr>(key: &str, raw: &str) -> Result<T>
        where
            T::Err: fmt::Display,
        {
            raw.parse().map_err(|e| bad_value(key, raw, e))
        }
        let flt = |raw: &str| -> Result<f64> {
            raw.parse::<f64>().map_err(|e| bad_value(key, raw, e))
        };
        match key {
            "instance.n" => self.n = Some(int(key, raw)?),
            "instance.m" => self.m = Some(int(key, raw)?),
            "instance.mode" => self.mode = Some(raw.parse()?),
            "instance.sigma" => self.sigma = Some(flt(raw)?),
            "instance.lambda" => self.lambda = Some(flt(raw)?),
            "instance.delta" => self.delta = Some(flt(raw)?),
            "instance.rho" => self.rho = Some(flt(raw)?),
            "instance.d" => self.d = Some(int(key, raw)?),
            "instance.tau" => self.tau = Some(flt(raw)?),
            "instance.kappa" => self.kappa = Some(int(key, raw)?),
            "instance.gamma" => self.gamma = Some(flt(raw)?),
            "instance.big_c" => self.big_c = Some(flt(raw)?),
            "sampling.n_samples" => self.n_samples = Some(int(key, raw)?),
            "sampling.seed" => self.master_seed = Some(int(key, raw)?),
            "learner.strategy" => self.strategy = Some(raw.parse()?),
            "learner.t" => self.t = Some(int(key, raw)?),
            "learner.m_target" => self.m_target = Some(int(key, raw)?),
            "scoring.epsilon" => self.epsilon = Some(flt(raw)?),
            "scoring.fail_prob" => self.fail_prob = Some(flt(raw)?),
            "scoring.trials" => self.equivalence_trials = Some(int(key, raw)?),
            "output.dir" => self.output_dir = Some(PathBuf::from(raw)),
            "run.repetitions" => self.repetitions = Some(int(key, raw)?),
            other => {
                return Err(Error::ConfigInvalid(format!(
                    "unknown key {other:?} (recognized keys: {})",
                    CONFIG_KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    fn finish(self) -> Result<ExperimentConfig> {
        fn require<T>(v: Option<T>, key: &str) -> Result<T> {
            v.ok_or_else(|| Error::ConfigInvalid(format!("missing required key {key}")))
        }
        let n = require(self.n, "instance.n")?;
        let m = require(self.m, "instance.m")?;
        let mode = require(self.mode, "instance.mode")?;
        let sigma = require(self.sigma, "instance.sigma")?;
        let lambda = require(self.lambda, "instance.lambda")?;
        let rho = require(self.rho, "instance.rho")?;
        let d = require(self.d, "instance.d")?;
        let tau = require(self.tau, "instance.tau")?;
        let n_samples = require(self.n_samples, "sampling.n_samples")?;
        let master_seed = require(self.master_seed, "sampling.seed")?;
        let strategy = require(self.strategy, "learner.strategy")?;
        let output_dir = require(self.output_dir, "output.dir")?;

        let t = self
            .t
            .unwrap_or_else(|| RegimeParams::default_t(n, sigma, lambda, DEFAULT_T_SCALE).min(d));
        let params = RegimeParams {
            sigma,
            lambda,
            delta: self.delta.unwrap_or(1.0),
            rho,
            d,
            t,
            tau,
            kappa: self.kappa.unwrap_or(1),
            gamma: self.gamma.unwrap_or(0.1),
            big_c: self.big_c.unwrap_or(1.0),
        };
        let config = ExperimentConfig {
            n,
            m,
            mode,
            params,
            n_samples,
            master_seed,
            strategy,
            m_target: self.m_target.unwrap_or(m),
            epsilon: self.epsilon.unwrap_or(0.1),
            fail_prob: self.fail_prob.unwrap_or(1.0 / n.max(1) as f64),
            equivalence_trials: self.equivalence_trials.unwrap_or(0),
            output_dir,
            repetitions: self.repetitions.unwrap_or(1),
        };
        let mut config = config;
        if config.equivalence_trials == 0 {
            config.equivalence_trials = config.min_equivalence_trials();
        }
        config.validate()?;
        Ok(config)
    }
}

impl ExperimentConfig {
    /// Smallest trial count [`equivalence_test`] accepts for this
    /// `fail_prob`.
    pub fn min_equivalence_trials(&self) -> usize {
        (100.0 / self.fail_prob).ceil() as usize
    }

    /// Checks every invariant a config must satisfy before any work starts.
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::ConfigInvalid(msg));
        if self.n == 0 || self.m == 0 {
            return fail(format!("need n ≥ 1 and m ≥ 1, got n = {}, m = {}", self.n, self.m));
        }
        self.params.validate()?;
        if self.n_samples == 0 {
            return fail("sampling.n_samples must be ≥ 1".into());
        }
        match self.strategy {
            StrategyKind::Exhaustive { budget } if budget == 0 => {
                return fail("exhaustive budget must be ≥ 1".into())
            }
            StrategyKind::RandomSubsets { count } | StrategyKind::OracleSeeded { count }
                if count == 0 =>
            {
                return fail("strategy count must be ≥ 1".into())
            }
            _ => {}
        }
        if self.m_target == 0 || self.m_target > self.m {
            return fail(format!(
                "learner.m_target must be in 1..={}, got {}",
                self.m, self.m_target
            ));
        }
        if !(self.epsilon.is_finite() && self.epsilon >= 0.0) {
            return fail(format!(
                "scoring.epsilon must be finite and ≥ 0, got {}",
                self.epsilon
            ));
        }
        if !(self.fail_prob > 0.0 && self.fail_prob <= 1.0) {
            return fail(format!(
                "scoring.fail_prob must be in (0,1], got {}",
                self.fail_prob
            ));
        }
        if self.equivalence_trials < self.min_equivalence_trials() {
            return fail(format!(
                "scoring.trials = {} cannot resolve fail_prob = {}; need ≥ {}",
                self.equivalence_trials,
                self.fail_prob,
                self.min_equivalence_trials()
            ));
        }
        if self.output_dir.as_os_str().is_empty() {
            return fail("output.dir must not be empty".into());
        }
        if self.repetitions == 0 {
            return fail("run.repetitions must be ≥ 1".into());
        }
        Ok(())
    }

    /// Parses the flat `key = value` text form. Unknown keys, duplicate
    /// keys, missing required keys, and invalid values are all
    /// [`Error::ConfigInvalid`].
    pub fn parse(text: &str) -> Result<ExperimentConfig> {
        let mut builder = Builder::default();
        let mut seen: HashSet<String> = HashSet::new();
        for (idx, raw_line) in text.lines().enumerate() {
            let line = match raw_line.split_once('#') {
                Some((before, _)) => before,
                None => raw_line,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let lineno = idx + 1;
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::ConfigInvalid(format!("line {lineno}: expected `key = value`, got {line:?}"))
            })?;
            let key = key.trim();
            let value = value.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::ConfigInvalid(format!(
                    "line {lineno}: duplicate key {key}"
                )));
            }
            builder
                .set(key, value)
                .map_err(|e| match e {
                    Error::ConfigInvalid(msg) => {
                        Error::ConfigInvalid(format!("line {lineno}: {msg}"))
                    }
                    other => other,
                })?;
        }
        builder.finish()
    }

    /// Reads and parses a config file.
    pub fn from_file(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)?;
        ExperimentConfig::parse(&text).map_err(|e| match e {
            Error::ConfigInvalid(msg) => {
                Error::ConfigInvalid(format!("{}: {msg}", path.display()))
            }
            other => other,
        })
    }

    /// Canonical text form: every field, one `key = value` line each.
    /// Floats print in shortest round-trip form, so parsing the output
    /// reproduces the config exactly.
    pub fn to_text(&self) -> String {
        let p = &self.params;
        let mut out = String::new();
        let _ = writeln!(out, "{CONFIG_HEADER}");
        let _ = writeln!(out, "instance.n = {}", self.n);
        let _ = writeln!(out, "instance.m = {}", self.m);
        let _ = writeln!(out, "instance.mode = {}", self.mode);
        let _ = writeln!(out, "instance.sigma = {}", p.sigma);
        let _ = writeln!(out, "instance.lambda = {}", p.lambda);
        let _ = writeln!(out, "instance.delta = {}", p.delta);
        let _ = writeln!(out, "instance.rho = {}", p.rho);
        let _ = writeln!(out, "instance.d = {}", p.d);
        let _ = writeln!(out, "instance.tau = {}", p.tau);
        let _ = writeln!(out, "instance.kappa = {}", p.kappa);
        let _ = writeln!(out, "instance.gamma = {}", p.gamma);
        let _ = writeln!(out, "instance.big_c = {}", p.big_c);
        let _ = writeln!(out, "sampling.n_samples = {}", self.n_samples);
        let _ = writeln!(out, "sampling.seed = {}", self.master_seed);
        let _ = writeln!(out, "learner.strategy = {}", self.strategy);
        let _ = writeln!(out, "learner.t = {}", p.t);
        let _ = writeln!(out, "learner.m_target = {}", self.m_target);
        let _ = writeln!(out, "scoring.epsilon = {}", self.epsilon);
        let _ = writeln!(out, "scoring.fail_prob = {}", self.fail_prob);
        let _ = writeln!(out, "scoring.trials = {}", self.equivalence_trials);
        let _ = writeln!(out, "output.dir = {}", self.output_dir.display());
        let _ = writeln!(out, "run.repetitions = {}", self.repetitions);
        out
    }

    /// Returns a copy with one key changed (value in text form), re-running
    /// full validation. This is how sweep axes are applied.
    pub fn with_value(&self, key: &str, value: &str) -> Result<ExperimentConfig> {
        let mut builder = Builder::from_config(self);
        builder.set(key, value)?;
        builder.finish()
    }

    /// True when `key` names a config field (usable as a sweep axis).
    pub fn is_recognized_key(key: &str) -> bool {
        CONFIG_KEYS.contains(&key)
    }
}

/// The seeds one repetition runs under, all derived from the master seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DerivedSeeds {
    pub repetition: u64,
    pub instance: u64,
    pub batch: u64,
    pub strategy: u64,
    pub scoring: u64,
}

impl DerivedSeeds {
    /// The documented derivation tree: one node per repetition, four
    /// component seeds under it.
    pub fn derive(master_seed: u64, repetition: usize) -> DerivedSeeds {
        let rep = derive_seed(master_seed, "repetition", repetition as u64);
        DerivedSeeds {
            repetition: rep,
            instance: derive_seed(rep, "instance", 0),
            batch: derive_seed(rep, "batch", 0),
            strategy: derive_seed(rep, "strategy", 0),
            scoring: derive_seed(rep, "scoring", 0),
        }
    }
}

/// Pipeline stages, in execution order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Generate,
    Sample,
    Learn,
    Score,
    Persist,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Generate => "generate",
            Stage::Sample => "sample",
            Stage::Learn => "learn",
            Stage::Score => "score",
            Stage::Persist => "persist",
        })
    }
}

/// Wall-clock seconds per stage; stages not reached stay 0.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StageTimings {
    pub generate: f64,
    pub sample: f64,
    pub learn: f64,
    pub score: f64,
    pub persist: f64,
}

impl StageTimings {
    pub fn sum(&self) -> f64 {
        self.generate + self.sample + self.learn + self.score + self.persist
    }
}

/// Everything one repetition produced.
#[derive(Clone, Debug)]
pub struct RunRecord {
    /// Snapshot of the config the run executed (equal to the input).
    pub config: ExperimentConfig,
    /// Repetition index within the experiment.
    pub repetition: usize,
    pub seeds: DerivedSeeds,
    pub timings: StageTimings,
    /// Wall clock around all five stages; the per-stage timings sum to
    /// within 5% of this.
    pub total_seconds: f64,
    /// Scoring output; `None` when a stage before scoring failed.
    pub report: Option<RecoveryReport>,
    /// Per-iteration learner events; `None` when learning never ran or
    /// failed before returning.
    pub learner_log: Option<LearnLog>,
    /// First stage that failed, with the error text; later stages needing
    /// its output are skipped, but persistence still writes what exists.
    pub failure: Option<(Stage, String)>,
    /// Directory this repetition's artifacts were written to.
    pub artifact_dir: PathBuf,
}

impl RunRecord {
    pub fn succeeded(&self) -> bool {
        self.failure.is_none()
    }

    /// Key-value text form, written as `record.txt` next to the artifacts.
    pub fn to_text(&self) -> String {
        let mut out = String::from("# sparsedict-run-record v1\n");
        let _ = writeln!(out, "repetition = {}", self.repetition);
        let _ = writeln!(out, "artifact_dir = {}", self.artifact_dir.display());
        let s = &self.seeds;
        let _ = writeln!(out, "seed.master = {}", self.config.master_seed);
        let _ = writeln!(out, "seed.repetition = {}", s.repetition);
        let _ = writeln!(out, "seed.instance = {}", s.instance);
        let _ = writeln!(out, "seed.batch = {}", s.batch);
        let _ = writeln!(out, "seed.strategy = {}", s.strategy);
        let _ = writeln!(out, "seed.scoring = {}", s.scoring);
        let t = &self.timings;
        let _ = writeln!(out, "timing.generate_s = {:.6}", t.generate);
        let _ = writeln!(out, "timing.sample_s = {:.6}", t.sample);
        let _ = writeln!(out, "timing.learn_s = {:.6}", t.learn);
        let _ = writeln!(out, "timing.score_s = {:.6}", t.score);
        let _ = writeln!(out, "timing.persist_s = {:.6}", t.persist);
        let _ = writeln!(out, "timing.total_s = {:.6}", self.total_seconds);
        match &self.failure {
            None => {
                let _ = writeln!(out, "outcome = ok");
            }
            Some((stage, message)) => {
                let _ = writeln!(out, "outcome = failed");
                let _ = writeln!(out, "failed_stage = {stage}");
                let _ = writeln!(out, "error = {message}");
            }
        }
        if let Some(report) = &self.report {
            let _ = writeln!(out, "columns_matched = {}", report.permutation.len());
            let _ = writeln!(out, "max_linf_error = {:.6e}", report.max_linf());
            let _ = writeln!(out, "mean_linf_error = {:.6e}", report.mean_linf());
            if let Some(v) = &report.equivalence_verdict {
                let _ = writeln!(out, "equivalence_pass = {}", v.pass);
                let _ = writeln!(out, "equivalence_failure_fraction = {:.6e}", v.failure_fraction);
            }
        }
        if let Some(log) = &self.learner_log {
            let _ = writeln!(out, "learner.candidates_requested = {}", log.candidates.requested);
            let _ = writeln!(out, "learner.candidates_evaluated = {}", log.candidates.evaluated);
            let _ = writeln!(out, "learner.candidates_passing = {}", log.candidates.passing);
            let _ = writeln!(out, "learner.empty_tail_dropped = {}", log.empty_tail_dropped);
            let _ = writeln!(out, "learner.duplicates_merged = {}", log.duplicates_merged);
            let _ = writeln!(out, "learner.pool_size = {}", log.pool_size);
            for note in &log.notes {
                let _ = writeln!(out, "learner.note = {note}");
            }
            for ev in &log.iterations {
                let set: Vec<String> = ev.set.iter().map(|i| i.to_string()).collect();
                let _ = writeln!(
                    out,
                    "iteration.{} = eligible={} bias={:.6e} tail={} accepted={} set=[{}]",
                    ev.index,
                    ev.eligible,
                    ev.bias,
                    ev.tail,
                    ev.accepted_samples,
                    set.join(" ")
                );
            }
        }
        out.push_str("--- config ---\n");
        out.push_str(&self.config.to_text());
        out
    }
}

/// Probes that the output directory can be created and written.
fn ensure_writable(dir: &Path) -> Result<()> {
    let invalid = |e: std::io::Error| {
        Error::ConfigInvalid(format!("output dir {} is not writable: {e}", dir.display()))
    };
    std::fs::create_dir_all(dir).map_err(invalid)?;
    let probe = dir.join(".write-probe");
    std::fs::write(&probe, b"probe").map_err(invalid)?;
    std::fs::remove_file(&probe).map_err(invalid)?;
    Ok(())
}

/// What the pipeline stages produced so far; persistence writes whatever is
/// present.
#[derive(Default)]
struct StageProducts {
    dict: Option<Dictionary>,
    batch: Option<SampleBatch>,
    learned: Option<LearnedDictionary>,
    report: Option<RecoveryReport>,
}

fn run_pipeline_stages(
    config: &ExperimentConfig,
    seeds: &DerivedSeeds,
    timings: &mut StageTimings,
    products: &mut StageProducts,
) -> std::result::Result<(), (Stage, String)> {
    let capture = |stage: Stage| move |e: Error| (stage, e.to_string());

    let start = Instant::now();
    let dict = generate_planted(&config.params, config.n, config.m, config.mode, seeds.instance);
    timings.generate = start.elapsed().as_secs_f64();
    let dict = dict.map_err(capture(Stage::Generate))?;
    products.dict = Some(dict);
    let dict = products.dict.as_ref().expect("just stored");

    let start = Instant::now();
    let batch = draw_batch(dict, config.n_samples, seeds.batch, false);
    timings.sample = start.elapsed().as_secs_f64();
    let batch = batch.map_err(capture(Stage::Sample))?;
    products.batch = Some(batch);
    let batch = products.batch.as_ref().expect("just stored");

    let strategy = CandidateStrategy {
        kind: config.strategy.clone(),
        seed: seeds.strategy,
    };
    let start = Instant::now();
    let learned = learn(
        batch,
        &config.params,
        config.mode,
        &strategy,
        config.m_target,
        Some(dict),
    );
    timings.learn = start.elapsed().as_secs_f64();
    let learned = learned.map_err(capture(Stage::Learn))?;
    products.learned = Some(learned);
    let learned = products.learned.as_ref().expect("just stored");

    let start = Instant::now();
    let score = (|| -> Result<RecoveryReport> {
        let mut report = match_and_score(dict, learned)?;
        let aligned = aligned_dictionary(dict, learned, &report)?;
        report.equivalence_verdict = Some(equivalence_test(
            dict,
            &aligned,
            config.params.rho,
            config.epsilon,
            config.equivalence_trials,
            config.fail_prob,
            seeds.scoring,
        )?);
        Ok(report)
    })();
    timings.score = start.elapsed().as_secs_f64();
    products.report = Some(score.map_err(capture(Stage::Score))?);
    Ok(())
}

fn write_batch_meta(batch: &SampleBatch, path: &Path) -> Result<()> {
    let mut grand = CompensatedSum::new();
    for &v in batch.pixel_mean() {
        grand.add(v);
    }
    let text = format!(
        "# sparsedict-batch-meta v1\nn_samples = {}\nn = {}\nrho = {}\nseed = {}\nmean_pixel_value = {:.17e}\n",
        batch.n_samples(),
        batch.n(),
        batch.rho(),
        batch.seed(),
        grand.value() / batch.n().max(1) as f64,
    );
    std::fs::write(path, text)?;
    Ok(())
}

fn persist_artifacts(dir: &Path, products: &StageProducts) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    if let Some(dict) = &products.dict {
        write_dictionary(dict, &dir.join("dictionary.txt"))?;
    }
    if let Some(batch) = &products.batch {
        write_batch_meta(batch, &dir.join("batch-meta.txt"))?;
    }
    if let Some(learned) = &products.learned {
        let as_dict = learned.to_dictionary()?;
        write_dictionary(&as_dict, &dir.join("learned.txt"))?;
        crate::learner::write_provenance(learned, &dir.join("provenance.txt"))?;
    }
    if let Some(report) = &products.report {
        write_report(report, &dir.join("report.txt"))?;
        write_column_errors_csv(report, &dir.join("columns.csv"))?;
    }
    Ok(())
}

fn run_repetition(config: &ExperimentConfig, repetition: usize) -> RunRecord {
    let seeds = DerivedSeeds::derive(config.master_seed, repetition);
    let rep_dir = config.output_dir.join(format!("rep{repetition:03}"));
    let mut timings = StageTimings::default();
    let mut products = StageProducts::default();

    let total_start = Instant::now();
    let stage_result = run_pipeline_stages(config, &seeds, &mut timings, &mut products);
    let persist_start = Instant::now();
    let persist_result = persist_artifacts(&rep_dir, &products);
    timings.persist = persist_start.elapsed().as_secs_f64();
    let total_seconds = total_start.elapsed().as_secs_f64();

    let failure = stage_result
        .err()
        .or_else(|| persist_result.err().map(|e| (Stage::Persist, e.to_string())));

    let record = RunRecord {
        config: config.clone(),
        repetition,
        seeds,
        timings,
        total_seconds,
        report: products.report,
        learner_log: products.learned.map(|l| l.log),
        failure,
        artifact_dir: rep_dir.clone(),
    };
    // Best effort: record bookkeeping must never mask the run's own outcome.
    let _ = std::fs::write(rep_dir.join("record.txt"), record.to_text());
    record
}

/// Runs the full pipeline once per repetition and returns one record each.
///
/// Config problems (including an unwritable output directory) fail fast
/// with [`Error::ConfigInvalid`] before any work; stage errors inside a
/// repetition are captured in its record, never thrown, and artifacts
/// produced before the failure are still persisted.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<RunRecord>> {
    config.validate()?;
    ensure_writable(&config.output_dir)?;
    std::fs::write(config.output_dir.join("config.txt"), config.to_text())?;
    Ok((0..config.repetitions)
        .map(|rep| run_repetition(config, rep))
        .collect())
}

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

/// Aggregated result of one sweep cell (one axis value, all repetitions).
#[derive(Clone, Debug)]
pub struct SweepRow {
    pub axis: String,
    pub value: String,
    /// Repetitions attempted.
    pub repetitions: usize,
    /// Repetitions that produced a recovery report.
    pub completed: usize,
    /// Median of per-repetition max ℓ∞ errors over completed repetitions.
    pub median_linf: Option<f64>,
    /// Fraction of completed repetitions whose equivalence test passed.
    pub equivalence_pass_rate: Option<f64>,
    /// Mean total wall clock over attempted repetitions.
    pub mean_runtime_seconds: Option<f64>,
    /// First failure message, when any repetition failed.
    pub note: Option<String>,
}

impl SweepRow {
    pub fn all_completed(&self) -> bool {
        self.completed == self.repetitions
    }
}

/// A finished sweep: per-value rows, the CSV text, and where it was written.
#[derive(Clone, Debug)]
pub struct SweepOutcome {
    pub rows: Vec<SweepRow>,
    pub csv: String,
    pub csv_path: PathBuf,
    /// Worker threads the cell pool actually used.
    pub workers: usize,
}

impl SweepOutcome {
    /// True when every cell completed every repetition — the CLI's exit-code
    /// condition.
    pub fn all_cells_completed(&self) -> bool {
        self.rows.iter().all(SweepRow::all_completed)
    }
}

fn median(sorted: &mut Vec<f64>) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    Some(if sorted.len() % 2 == 1 {
        sorted[mid]
    } else {
        0.5 * (sorted[mid - 1] + sorted[mid])
    })
}

/// Resolves the worker-pool size from the env var text and the cell count.
fn resolve_workers(env_value: Option<&str>, cells: usize) -> Result<usize> {
    let requested = match env_value {
        None => None,
        Some(raw) => match raw.trim().parse::<usize>() {
            Ok(w) if w >= 1 => Some(w),
            _ => {
                return Err(Error::ConfigInvalid(format!(
                    "{WORKERS_ENV_VAR} must be a positive integer, got {raw:?}"
                )))
            }
        },
    };
    let default = std::thread::available_parallelism()
        .map(|p| p.get())
        .unwrap_or(1);
    Ok(requested.unwrap_or(default).min(cells.max(1)))
}

fn sanitize_component(s: &str) -> String {
    s.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '.' | '-' | '_') {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn aggregate_cell(axis: &str, value: &str, records: Vec<RunRecord>) -> SweepRow {
    let repetitions = records.len();
    let mut linf = Vec::new();
    let mut passes = 0usize;
    let mut completed = 0usize;
    let mut runtime = CompensatedSum::new();
    let mut note = None;
    for record in &records {
        runtime.add(record.total_seconds);
        if let Some(report) = &record.report {
            completed += 1;
            linf.push(report.max_linf());
            if report.equivalence_verdict.as_ref().is_some_and(|v| v.pass) {
                passes += 1;
            }
        }
        if note.is_none() {
            if let Some((stage, message)) = &record.failure {
                note = Some(format!("rep {} failed at {stage}: {message}", record.repetition));
            }
        }
    }
    SweepRow {
        axis: axis.to_string(),
        value: value.to_string(),
        repetitions,
        completed,
        median_linf: median(&mut linf),
        equivalence_pass_rate: (completed > 0).then(|| passes as f64 / completed as f64),
        mean_runtime_seconds: (repetitions > 0).then(|| runtime.value() / repetitions as f64),
        note,
    }
}

fn failed_cell(axis: &str, value: &str, repetitions: usize, message: String) -> SweepRow {
    SweepRow {
        axis: axis.to_string(),
        value: value.to_string(),
        repetitions,
        completed: 0,
        median_linf: None,
        equivalence_pass_rate: None,
        mean_runtime_seconds: None,
        note: Some(message),
    }
}

fn run_cell(base: &ExperimentConfig, axis: &str, value: &str, index: usize) -> SweepRow {
    let mut config = match base.with_value(axis, value) {
        Ok(c) => c,
        Err(e) => return failed_cell(axis, value, base.repetitions, e.to_string()),
    };
    config.master_seed = derive_seed(base.master_seed, "sweep-cell", index as u64);
    config.output_dir = base
        .output_dir
        .join("sweep")
        .join(format!("{}-{}", sanitize_component(axis), sanitize_component(value)));
    match run_experiment(&config) {
        Ok(records) => aggregate_cell(axis, value, records),
        Err(e) => failed_cell(axis, value, config.repetitions, e.to_string()),
    }
}

fn csv_from_rows(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_CSV_HEADER);
    out.push('\n');
    out.push_str(
        "axis,value,repetitions,completed,median_linf_error,equivalence_pass_rate,mean_runtime_seconds\n",
    );
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.6e}")).unwrap_or_default();
    for row in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            row.axis,
            row.value,
            row.repetitions,
            row.completed,
            opt(row.median_linf),
            opt(row.equivalence_pass_rate),
            opt(row.mean_runtime_seconds),
        );
    }
    out
}

/// Runs one experiment per axis value (each with the base config's
/// repetitions) and aggregates a CSV with exactly one row per value.
///
/// Cells run in a worker pool bounded by the `SPARSEDICT_WORKERS` env var
/// (default: available parallelism); each cell is fully independent, with
/// its own derived master seed and its own output directory under
/// `<output.dir>/sweep/`. Per-cell failures become rows with empty metric
/// fields; the sweep itself fails only on an unrecognized axis, an invalid
/// worker-pool setting, or an unusable base output directory.
pub fn sweep(base: &ExperimentConfig, axis: &str, values: &[String]) -> Result<SweepOutcome> {
    if !ExperimentConfig::is_recognized_key(axis) {
        return Err(Error::ConfigInvalid(format!(
            "unknown sweep axis {axis:?} (recognized keys: {})",
            CONFIG_KEYS.join(", ")
        )));
    }
    if values.is_empty() {
        return Err(Error::ConfigInvalid("sweep needs at least one value".into()));
    }
    base.validate()?;
    ensure_writable(&base.output_dir)?;
    let workers = resolve_workers(
        std::env::var(WORKERS_ENV_VAR).ok().as_deref(),
        values.len(),
    )?;

    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<SweepRow>>> = values.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= values.len() {
                    break;
                }
                let row = run_cell(base, axis, &values[i], i);
                *slots[i].lock().expect("row slot poisoned") = Some(row);
            });
        }
    });
    let rows: Vec<SweepRow> = slots
        .into_iter()
        .map(|slot| {
            slot.into_inner()
                .expect("row slot poisoned")
                .expect("every cell index was claimed by a worker")
        })
        .collect();

    let csv = csv_from_rows(&rows);
    let csv_path = base
        .output_dir
        .join(format!("sweep-{}.csv", sanitize_component(axis)));
    std::fs::write(&csv_path, &csv)?;
    Ok(SweepOutcome {
        rows,
        csv,
        csv_path,
        workers,
    })
}
