//! Command-line front end for the sparsedict library: generate planted
//! instances, check their structural assumptions, draw sample batches, run
//! the learner, score recoveries against the truth, and drive configured
//! experiments and sweeps.
//!
//! Every subcommand accepts `--config <path>`; explicit flags override the
//! values the config supplies. The direct subcommands (`gen`, `sample`,
//! `learn`, `score`) are leaf tools that take their seeds literally — when a
//! config is given and no seed flag is set, they fall back to the config's
//! derived repetition-0 seeds so their outputs line up with `run`.

use std::fs;
use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use sparsedict::error::Error;
use sparsedict::harness::{self, DerivedSeeds, ExperimentConfig};
use sparsedict::learner::{learn, write_provenance, CandidateStrategy, StrategyKind};
use sparsedict::model::{
    check_assumptions, generate_planted, read_dictionary, write_dictionary, Mode, RegimeParams,
    DEFAULT_T_SCALE,
};
use sparsedict::oracle::{
    aligned_from_columns, default_fail_prob, equivalence_test, match_and_score_columns,
    write_column_errors_csv, write_report, ColumnMetric,
};
use sparsedict::sampling::{draw_batch, read_batch, write_batch};

#[derive(Parser, Debug)]
#[command(
    name = "sparsedict",
    version,
    about = "Planted dictionary recovery from slightly sparse Bernoulli mixtures"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a planted dictionary and write it to a file
    Gen(GenArgs),
    /// Check the structural assumptions of a dictionary file
    Check(CheckArgs),
    /// Draw a sample batch from a planted dictionary
    Sample(SampleArgs),
    /// Recover a dictionary from a sample batch
    Learn(LearnArgs),
    /// Score a recovered dictionary against the planted truth
    Score(ScoreArgs),
    /// Run a configured experiment end to end
    Run(RunArgs),
    /// Vary one config key across values and tabulate the outcomes
    Sweep(SweepArgs),
}

/// Instance shape and regime constants, each optional so a config file can
/// supply the rest.
#[derive(Args, Debug)]
struct InstanceFlags {
    /// Pixels (rows)
    #[arg(long)]
    n: Option<usize>,
    /// Features (columns)
    #[arg(long)]
    m: Option<usize>,
    /// Sign structure: nonnegative or general
    #[arg(long)]
    mode: Option<Mode>,
    /// Strong-entry magnitude threshold σ
    #[arg(long)]
    sigma: Option<f64>,
    /// Entry magnitude cap Λ
    #[arg(long)]
    lambda: Option<f64>,
    /// Slack constant Δ [default: 1]
    #[arg(long)]
    delta: Option<f64>,
    /// Feature density ρ
    #[arg(long)]
    rho: Option<f64>,
    /// Strong degree per feature
    #[arg(long)]
    d: Option<usize>,
    /// Candidate set size [default: scaled from n, capped at d]
    #[arg(long)]
    t: Option<usize>,
    /// Small-entry threshold τ
    #[arg(long)]
    tau: Option<f64>,
    /// Pairwise neighborhood-intersection cap κ [default: 1]
    #[arg(long)]
    kappa: Option<usize>,
    /// Small-entry power budget γ, general mode [default: 0.1]
    #[arg(long)]
    gamma: Option<f64>,
    /// Equivalence exponent C [default: 1]
    #[arg(long)]
    big_c: Option<f64>,
}

#[derive(Args, Debug)]
struct GenArgs {
    /// Experiment config supplying values not given as flags
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    instance: InstanceFlags,
    /// Dictionary seed [default: the config's repetition-0 instance seed]
    #[arg(long)]
    seed: Option<u64>,
    /// Output dictionary file [default: <config output.dir>/dictionary.txt]
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CheckArgs {
    /// Experiment config supplying the default input path
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dictionary file to check [default: <config output.dir>/dictionary.txt]
    #[arg(long = "in", value_name = "PATH")]
    input: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SampleArgs {
    /// Experiment config supplying values not given as flags
    #[arg(long)]
    config: Option<PathBuf>,
    /// Planted dictionary file [default: <config output.dir>/dictionary.txt]
    #[arg(long)]
    dict: Option<PathBuf>,
    /// Samples to draw [default: the config's sampling.n_samples]
    #[arg(long)]
    n_samples: Option<usize>,
    /// Sampling seed [default: the config's repetition-0 batch seed]
    #[arg(long)]
    seed: Option<u64>,
    /// Also store the hidden feature indicators
    #[arg(long)]
    keep_hidden: bool,
    /// Output batch file [default: <config output.dir>/batch.txt]
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct LearnArgs {
    /// Experiment config supplying values not given as flags
    #[arg(long)]
    config: Option<PathBuf>,
    /// Sample batch file [default: <config output.dir>/batch.txt]
    #[arg(long)]
    batch: Option<PathBuf>,
    /// Dictionary file whose header supplies the regime constants
    /// [default: --truth, else the config]
    #[arg(long)]
    params_from: Option<PathBuf>,
    /// Planted dictionary; required by oracle-seeded candidate generation
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Sign structure override
    #[arg(long)]
    mode: Option<Mode>,
    /// Candidate strategy: exhaustive[:BUDGET], random:COUNT, or
    /// oracle-seeded:COUNT
    #[arg(long)]
    strategy: Option<StrategyKind>,
    /// Candidate set size override
    #[arg(long)]
    t: Option<usize>,
    /// Columns to recover [default: the constants source's feature count]
    #[arg(long)]
    m_target: Option<usize>,
    /// Candidate-generation seed [default: the config's repetition-0
    /// strategy seed, else 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Output dictionary file [default: <config output.dir>/learned.txt]
    #[arg(long)]
    out: Option<PathBuf>,
    /// Provenance sidecar listing each column's index sets
    /// [default: <out>.provenance.txt]
    #[arg(long)]
    provenance: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ScoreArgs {
    /// Experiment config supplying values not given as flags
    #[arg(long)]
    config: Option<PathBuf>,
    /// Planted truth dictionary [default: <config output.dir>/dictionary.txt]
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Recovered dictionary file [default: <config output.dir>/learned.txt]
    #[arg(long)]
    learned: Option<PathBuf>,
    /// Feature density for the equivalence test [default: the truth's ρ]
    #[arg(long)]
    batch_rho: Option<f64>,
    /// Entrywise equivalence tolerance ε [default: config scoring.epsilon,
    /// else 0.1]
    #[arg(long)]
    epsilon: Option<f64>,
    /// Equivalence failure budget [default: config scoring.fail_prob,
    /// else 1/n]
    #[arg(long)]
    fail_prob: Option<f64>,
    /// Equivalence trials [default: config scoring.trials, else the minimum
    /// the budget supports]
    #[arg(long)]
    trials: Option<usize>,
    /// Equivalence-test seed [default: the config's repetition-0 scoring
    /// seed, else 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Report output path; when set, a per-column CSV lands beside it
    /// [default: <config output.dir>/report.txt]
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-column CSV path [default: <out with .csv extension>]
    #[arg(long)]
    columns: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Experiment config to execute
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args, Debug)]
struct SweepArgs {
    /// Base experiment config
    #[arg(long)]
    config: PathBuf,
    /// Config key to vary, e.g. instance.rho or sampling.n_samples
    #[arg(long)]
    axis: String,
    /// Comma-separated values for the axis
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<String>,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let completed = match cli.command {
        Command::Gen(args) => {
            cmd_gen(args)?;
            true
        }
        Command::Check(args) => {
            cmd_check(args)?;
            true
        }
        Command::Sample(args) => {
            cmd_sample(args)?;
            true
        }
        Command::Learn(args) => {
            cmd_learn(args)?;
            true
        }
        Command::Score(args) => {
            cmd_score(args)?;
            true
        }
        Command::Run(args) => cmd_run(args)?,
        Command::Sweep(args) => cmd_sweep(args)?,
    };
    if !completed {
        // Operational errors already exited through `?`; a clean run that
        // left repetitions or sweep cells unfinished reports it here.
        std::process::exit(1);
    }
    Ok(())
}

fn load_config(path: &Option<PathBuf>) -> Result<Option<ExperimentConfig>> {
    Ok(match path {
        Some(p) => Some(ExperimentConfig::from_file(p)?),
        None => None,
    })
}

fn require<T>(value: Option<T>, flag: &str) -> Result<T> {
    value.ok_or_else(|| {
        anyhow::Error::new(Error::ConfigInvalid(format!(
            "{flag} is required when no --config supplies it"
        )))
    })
}

fn ensure_parent(path: &PathBuf) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    Ok(())
}

/// Merges instance flags over the config (when given); without a config the
/// core shape flags are required and the optional constants get the same
/// defaults a config file would.
fn resolve_instance(
    cfg: Option<&ExperimentConfig>,
    f: &InstanceFlags,
) -> Result<(usize, usize, Mode, RegimeParams)> {
    let (n, m, mode, mut params) = match cfg {
        Some(c) => (
            f.n.unwrap_or(c.n),
            f.m.unwrap_or(c.m),
            f.mode.unwrap_or(c.mode),
            c.params.clone(),
        ),
        None => {
            let n = require(f.n, "--n")?;
            let m = require(f.m, "--m")?;
            let mode = require(f.mode, "--mode")?;
            let sigma = require(f.sigma, "--sigma")?;
            let lambda = require(f.lambda, "--lambda")?;
            let rho = require(f.rho, "--rho")?;
            let d = require(f.d, "--d")?;
            let tau = require(f.tau, "--tau")?;
            let t = f
                .t
                .unwrap_or_else(|| RegimeParams::default_t(n, sigma, lambda, DEFAULT_T_SCALE).min(d));
            let params = RegimeParams {
                sigma,
                lambda,
                delta: f.delta.unwrap_or(1.0),
                rho,
                d,
                t,
                tau,
                kappa: f.kappa.unwrap_or(1),
                gamma: f.gamma.unwrap_or(0.1),
                big_c: f.big_c.unwrap_or(1.0),
            };
            return Ok((n, m, mode, params));
        }
    };
    if let Some(v) = f.sigma {
        params.sigma = v;
    }
    if let Some(v) = f.lambda {
        params.lambda = v;
    }
    if let Some(v) = f.delta {
        params.delta = v;
    }
    if let Some(v) = f.rho {
        params.rho = v;
    }
    if let Some(v) = f.d {
        params.d = v;
    }
    if let Some(v) = f.t {
        params.t = v;
    }
    if let Some(v) = f.tau {
        params.tau = v;
    }
    if let Some(v) = f.kappa {
        params.kappa = v;
    }
    if let Some(v) = f.gamma {
        params.gamma = v;
    }
    if let Some(v) = f.big_c {
        params.big_c = v;
    }
    Ok((n, m, mode, params))
}

fn cmd_gen(args: GenArgs) -> Result<()> {
    let cfg = load_config(&args.config)?;
    let (n, m, mode, params) = resolve_instance(cfg.as_ref(), &args.instance)?;
    let seed = args
        .seed
        .or_else(|| cfg.as_ref().map(|c| DerivedSeeds::derive(c.master_seed, 0).instance));
    let seed = require(seed, "--seed")?;
    let out = args
        .out
        .or_else(|| cfg.as_ref().map(|c| c.output_dir.join("dictionary.txt")));
    let out = require(out, "--out")?;
    let dict = generate_planted(&params, n, m, mode, seed)?;
    ensure_parent(&out)?;
    write_dictionary(&dict, &out)?;
    println!(
        "wrote {} ({n} x {m}, mode {mode}, seed {seed})",
        out.display()
    );
    Ok(())
}

fn cmd_check(args: CheckArgs) -> Result<()> {
    let cfg = load_config(&args.config)?;
    let input = args
        .input
        .or_else(|| cfg.as_ref().map(|c| c.output_dir.join("dictionary.txt")));
    let input = require(input, "--in")?;
    let dict = read_dictionary(&input)?;
    let report = check_assumptions(&dict);
    println!("{report}");
    Ok(())
}

fn cmd_sample(args: SampleArgs) -> Result<()> {
    let cfg = load_config(&args.config)?;
    let dict_path = args
        .dict
        .or_else(|| cfg.as_ref().map(|c| c.output_dir.join("dictionary.txt")));
    let dict_path = require(dict_path, "--dict")?;
    let n_samples = args.n_samples.or(cfg.as_ref().map(|c| c.n_samples));
    let n_samples = require(n_samples, "--n-samples")?;
    let seed = args
        .seed
        .or_else(|| cfg.as_ref().map(|c| DerivedSeeds::derive(c.master_seed, 0).batch));
    let seed = require(seed, "--seed")?;
    let out = args
        .out
        .or_else(|| cfg.as_ref().map(|c| c.output_dir.join("batch.txt")));
    let out = require(out, "--out")?;
    let dict = read_dictionary(&dict_path)?;
    let batch = draw_batch(&dict, n_samples, seed, args.keep_hidden)?;
    ensure_parent(&out)?;
    write_batch(&batch, &out)?;
    println!(
        "wrote {} ({n_samples} samples of {} pixels, seed {seed}, hidden {})",
        out.display(),
        dict.n(),
        args.keep_hidden
    );
    Ok(())
}

fn cmd_learn(args: LearnArgs) -> Result<()> {
    let cfg = load_config(&args.config)?;
    let batch_path = args
        .batch
        .or_else(|| cfg.as_ref().map(|c| c.output_dir.join("batch.txt")));
    let batch_path = require(batch_path, "--batch")?;
    let batch = read_batch(&batch_path)?;
    let truth = args.truth.as_deref().map(read_dictionary).transpose()?;

    // Regime constants: an explicit source file wins, then the truth's
    // header, then the config. The source also sets the default m_target.
    let (mut params, mut mode, source_m) = if let Some(p) = &args.params_from {
        let source = read_dictionary(p)?;
        (source.params().clone(), source.mode(), Some(source.m()))
    } else if let Some(t) = &truth {
        (t.params().clone(), t.mode(), Some(t.m()))
    } else if let Some(c) = &cfg {
        (c.params.clone(), c.mode, None)
    } else {
        return Err(Error::ConfigInvalid(
            "learn needs regime constants: pass --params-from, --truth, or --config".into(),
        )
        .into());
    };
    if let Some(v) = args.mode {
        mode = v;
    }
    if let Some(v) = args.t {
        params.t = v;
    }
    if (params.rho - batch.rho()).abs() > 1e-9 {
        return Err(Error::ConfigInvalid(format!(
            "batch was drawn at rho = {} but the regime constants say rho = {}",
            batch.rho(),
            params.rho
        ))
        .into());
    }

    let kind = args
        .strategy
        .or_else(|| cfg.as_ref().map(|c| c.strategy.clone()));
    let kind = require(kind, "--strategy")?;
    if matches!(kind, StrategyKind::OracleSeeded { .. }) && truth.is_none() {
        return Err(Error::ConfigInvalid(
            "oracle-seeded candidate generation requires --truth".into(),
        )
        .into());
    }
    let m_target = args
        .m_target
        .or_else(|| cfg.as_ref().map(|c| c.m_target))
        .or(source_m);
    let m_target = require(m_target, "--m-target")?;
    let seed = args
        .seed
        .or_else(|| cfg.as_ref().map(|c| DerivedSeeds::derive(c.master_seed, 0).strategy))
        .unwrap_or(0);
    let out = args
        .out
        .or_else(|| cfg.as_ref().map(|c| c.output_dir.join("learned.txt")));
    let out = require(out, "--out")?;
    let provenance = args.provenance.unwrap_or_else(|| {
        let mut p = out.clone().into_os_string();
        p.push(".provenance.txt");
        PathBuf::from(p)
    });

    let strategy = CandidateStrategy { kind, seed };
    let learned = learn(&batch, &params, mode, &strategy, m_target, truth.as_ref())?;
    for note in &learned.log.notes {
        eprintln!("note: {note}");
    }
    ensure_parent(&out)?;
    write_dictionary(&learned.to_dictionary()?, &out)?;
    write_provenance(&learned, &provenance)?;
    println!(
        "wrote {} and {} ({} columns in {} iterations)",
        out.display(),
        provenance.display(),
        learned.m(),
        learned.log.iterations.len()
    );
    Ok(())
}

fn cmd_score(args: ScoreArgs) -> Result<()> {
    let cfg = load_config(&args.config)?;
    let truth_path = args
        .truth
        .or_else(|| cfg.as_ref().map(|c| c.output_dir.join("dictionary.txt")));
    let truth_path = require(truth_path, "--truth")?;
    let learned_path = args
        .learned
        .or_else(|| cfg.as_ref().map(|c| c.output_dir.join("learned.txt")));
    let learned_path = require(learned_path, "--learned")?;
    let truth = read_dictionary(&truth_path)?;
    let learned = read_dictionary(&learned_path)?;
    let columns: Vec<Vec<f64>> = (0..learned.m()).map(|j| learned.column(j)).collect();

    let mut report = match_and_score_columns(&truth, &columns, ColumnMetric::Linf)?;
    let aligned = aligned_from_columns(&truth, &columns, &report)?;
    let rho = args.batch_rho.unwrap_or(truth.params().rho);
    let epsilon = args
        .epsilon
        .or(cfg.as_ref().map(|c| c.epsilon))
        .unwrap_or(0.1);
    let fail_prob = args
        .fail_prob
        .or(cfg.as_ref().map(|c| c.fail_prob))
        .unwrap_or_else(|| default_fail_prob(truth.n()));
    let trials = args
        .trials
        .or(cfg.as_ref().map(|c| c.equivalence_trials))
        .unwrap_or_else(|| (100.0 / fail_prob).ceil() as usize);
    let seed = args
        .seed
        .or_else(|| cfg.as_ref().map(|c| DerivedSeeds::derive(c.master_seed, 0).scoring))
        .unwrap_or(0);
    report.equivalence_verdict = Some(equivalence_test(
        &truth, &aligned, rho, epsilon, trials, fail_prob, seed,
    )?);
    print!("{report}");

    let out = args
        .out
        .or_else(|| cfg.as_ref().map(|c| c.output_dir.join("report.txt")));
    if let Some(out) = out {
        let columns_path = args.columns.unwrap_or_else(|| out.with_extension("csv"));
        ensure_parent(&out)?;
        write_report(&report, &out)?;
        ensure_parent(&columns_path)?;
        write_column_errors_csv(&report, &columns_path)?;
        println!("wrote {} and {}", out.display(), columns_path.display());
    }
    Ok(())
}

fn cmd_run(args: RunArgs) -> Result<bool> {
    let cfg = ExperimentConfig::from_file(&args.config)?;
    let records = harness::run_experiment(&cfg)?;
    for record in &records {
        match &record.failure {
            None => {
                let report = record.report.as_ref().expect("successful run has a report");
                let equivalence = match &report.equivalence_verdict {
                    Some(v) if v.pass => "pass",
                    Some(_) => "fail",
                    None => "not tested",
                };
                println!(
                    "rep {}: ok, max linf {:.6e}, equivalence {equivalence}, {:.2}s -> {}",
                    record.repetition,
                    report.max_linf(),
                    record.total_seconds,
                    record.artifact_dir.display()
                );
            }
            Some((stage, message)) => {
                println!(
                    "rep {}: failed at {stage}: {message} -> {}",
                    record.repetition,
                    record.artifact_dir.display()
                );
            }
        }
    }
    let completed = records.iter().filter(|r| r.succeeded()).count();
    println!("completed = {completed}/{}", records.len());
    Ok(completed == records.len())
}

fn cmd_sweep(args: SweepArgs) -> Result<bool> {
    let cfg = ExperimentConfig::from_file(&args.config)?;
    let outcome = harness::sweep(&cfg, &args.axis, &args.values)?;
    print!("{}", outcome.csv);
    println!("csv = {}", outcome.csv_path.display());
    println!("workers = {}", outcome.workers);
    Ok(outcome.all_cells_completed())
}
