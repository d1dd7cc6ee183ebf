use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use cireg_core::coverage::{run_coverage_study, StudyConfig};
use cireg_core::data::{read_pair_rows, write_line_list, write_pair_rows, write_pairs};
use cireg_core::{
    build_pair_rows, default_terms, ecm_fit, load_line_list, marginal_nelson_aalen, maximize, simulate_epidemic,
    AnalysisMode, EmOptions, EpidemicConfig, FitOptions, MissingPolicy, PairPolicy, PairTable, RelRisk,
    SmoothOptions, StepCumHaz, Term, Ties,
};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use serde::Serialize;

mod output;

use output::{write_baseline, write_json, write_trace};

/// Relative-risk regression for infectious-disease transmission data on the
/// contact-interval time scale.
#[derive(Parser)]
#[command(name = "cireg", version, about)]
struct Cli {
    /// More log output on standard error (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate an epidemic on a small-world network.
    Simulate(SimulateArgs),
    /// Export the pair risk-set rows built from a line list.
    Pairs(PairsArgs),
    /// Fit the model with who-infects-whom observed.
    Fit(FitArgs),
    /// Fit the model with unknown infectors by the ECM algorithm.
    FitEm(FitEmArgs),
    /// Marginal Nelson-Aalen estimate of the homogeneous model.
    NelsonAalen(NelsonAalenArgs),
    /// Monte Carlo coverage study over simulated epidemics.
    CoverageStudy(StudyArgs),
}

#[derive(Args)]
struct DataArgs {
    /// Line-list CSV.
    #[arg(long, required_unless_present = "pairs_in", conflicts_with = "pairs_in")]
    line_list: Option<PathBuf>,

    /// Pair CSV `i,j,<covariates>` replacing contacts generated from `group`.
    #[arg(long, requires = "line_list")]
    contacts: Option<PathBuf>,

    /// Previously exported pair rows, used instead of a line list.
    #[arg(long)]
    pairs_in: Option<PathBuf>,

    /// Model terms such as `inf:age,sus:vacc,pair:spouse`.
    #[arg(long, value_delimiter = ',', conflicts_with_all = ["pairs_in", "no_covariates"])]
    terms: Vec<Term>,

    /// Fit without covariates.
    #[arg(long)]
    no_covariates: bool,

    /// Stratify the baseline by a numeric column, e.g. `sus:site`.
    #[arg(long, conflicts_with = "pairs_in")]
    strata: Option<Term>,

    #[arg(long, value_enum, default_value_t = Missing::CompleteCase)]
    missing: Missing,

    /// Treat infected individuals without possible infectors as imported.
    #[arg(long)]
    imported_if_unexplained: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Missing {
    CompleteCase,
    DropPair,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long, default_value_t = RelRisk::Loglinear)]
    relrisk: RelRisk,

    #[arg(long, default_value_t = Ties::Efron)]
    ties: Ties,

    #[arg(long, default_value_t = 0.05)]
    alpha: f64,

    /// Baseline table `tau,cumhaz,var,lo,hi` (with a leading `stratum`
    /// column when stratified).
    #[arg(long)]
    baseline_out: Option<PathBuf>,

    /// Result JSON; standard output when absent.
    #[arg(long)]
    json_out: Option<PathBuf>,
}

#[derive(Args)]
struct PairsArgs {
    #[command(flatten)]
    data: DataArgs,

    /// Build rows for unknown infectors (candidate rows) instead of the
    /// observed infector column.
    #[arg(long)]
    unknown_infector: bool,

    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args)]
struct EmArgs {
    /// Kernel bandwidth for the hazard smoother; a tenth of the largest
    /// infectiousness age by default.
    #[arg(long)]
    bandwidth: Option<f64>,

    #[arg(long, default_value_t = 25)]
    max_em: usize,

    #[arg(long, default_value_t = 2)]
    min_em: usize,

    /// Threshold on the change in expected log likelihood.
    #[arg(long, default_value_t = 0.002)]
    em_tol: f64,
}

#[derive(Args)]
struct FitEmArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    em: EmArgs,

    /// Final infector probabilities `j,i,p_ij`.
    #[arg(long)]
    weights_out: Option<PathBuf>,

    /// Per-iteration convergence trace.
    #[arg(long)]
    trace_out: Option<PathBuf>,
}

#[derive(Args)]
struct NelsonAalenArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    em: EmArgs,

    #[arg(long, default_value_t = 0.05)]
    alpha: f64,

    /// Baseline table; standard output when absent.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    /// JSON epidemic configuration; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    nodes: Option<usize>,
    #[arg(long)]
    neighbors: Option<usize>,
    #[arg(long)]
    rewire: Option<f64>,
    /// Weibull shape of the baseline contact-interval law.
    #[arg(long)]
    shape: Option<f64>,
    /// Weibull rate of the baseline contact-interval law.
    #[arg(long)]
    rate: Option<f64>,
    #[arg(long)]
    infectious_mean: Option<f64>,
    #[arg(long)]
    latent: Option<f64>,
    /// True coefficients `inf,sus,pair`.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    beta: Vec<f64>,
    #[arg(long)]
    relrisk: Option<RelRisk>,
    /// Stop after this many infections besides the index case.
    #[arg(long)]
    infections: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for `line_list.csv`, `contacts.csv`, `truth.json`.
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args)]
struct StudyArgs {
    /// JSON study configuration; the built-in desk-scale design otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    replicates: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; `CONTACT_INTERVAL_THREADS` takes precedence.
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long, short)]
    out: PathBuf,
}

/// An error in how the tool was invoked rather than in the data.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

enum Status {
    Done,
    NotConverged,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(3) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    match run(cli.command) {
        Ok(Status::Done) => ExitCode::SUCCESS,
        Ok(Status::NotConverged) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<UsageError>() {
            return 3;
        }
        if let Some(err) = cause.downcast_ref::<cireg_core::Error>() {
            return match err {
                _ if err.is_convergence_failure() => 2,
                cireg_core::Error::InvalidParameter(_) => 3,
                _ => 1,
            };
        }
    }
    1
}

fn run(command: Command) -> Result<Status> {
    match command {
        Command::Simulate(args) => simulate(args),
        Command::Pairs(args) => pairs(args),
        Command::Fit(args) => fit(args),
        Command::FitEm(args) => fit_em(args),
        Command::NelsonAalen(args) => nelson_aalen(args),
        Command::CoverageStudy(args) => coverage_study(args),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    let file = File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    Ok(BufWriter::new(file))
}

fn open(path: &Path) -> Result<File> {
    File::open(path).with_context(|| format!("cannot open {}", path.display()))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_reader(io::BufReader::new(open(path)?))
        .with_context(|| format!("invalid JSON in {}", path.display()))
        .map_err(|e| usage(format!("{e:#}")))
}

fn load_table(data: &DataArgs, mode: AnalysisMode) -> Result<PairTable> {
    if let Some(path) = &data.pairs_in {
        let (mut names, mut rows) = read_pair_rows(io::BufReader::new(open(path)?), &path.display().to_string())?;
        if data.no_covariates {
            names.clear();
            rows.iter_mut().for_each(|r| r.covariates.clear());
        }
        return Ok(PairTable::from_rows(names, rows, mode)?);
    }
    let line_list = data.line_list.as_deref().expect("clap requires a line list");
    for path in [Some(line_list), data.contacts.as_deref()].into_iter().flatten() {
        if !path.is_file() {
            bail!("cannot open {}: no such file", path.display());
        }
    }
    let (list, contacts) = load_line_list(line_list, data.contacts.as_deref(), data.imported_if_unexplained)
        .with_context(|| format!("loading {}", line_list.display()))?;
    let terms = if data.no_covariates {
        Vec::new()
    } else if data.terms.is_empty() {
        default_terms(&list, &contacts)
    } else {
        data.terms.clone()
    };
    info!(
        "{} records, {} contacts, terms [{}]",
        list.len(),
        contacts.len(),
        terms.iter().map(Term::to_string).collect::<Vec<_>>().join(", ")
    );
    let policy = PairPolicy {
        mode,
        missing: match data.missing {
            Missing::CompleteCase => MissingPolicy::CompleteCase,
            Missing::DropPair => MissingPolicy::DropPairOnly,
        },
        terms,
        strata: data.strata.clone(),
    };
    Ok(build_pair_rows(&list, &contacts, &policy)?)
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(usage(format!("--alpha must lie in (0, 1), got {alpha}")));
    }
    Ok(())
}

fn pairs(args: PairsArgs) -> Result<Status> {
    let mode = if args.unknown_infector {
        AnalysisMode::UnknownInfector
    } else {
        AnalysisMode::CompleteData
    };
    let table = load_table(&args.data, mode)?;
    let mut out = create(&args.out)?;
    write_pair_rows(&mut out, &table.covariate_names, &table.rows)?;
    out.flush()?;
    info!("wrote {} rows to {}", table.rows.len(), args.out.display());
    Ok(Status::Done)
}

fn baselines(out: Option<&Path>, baseline: &std::collections::BTreeMap<i64, StepCumHaz>, alpha: f64) -> Result<()> {
    match out {
        Some(path) => {
            let mut w = create(path)?;
            write_baseline(&mut w, baseline, alpha)?;
            w.flush()?;
        }
        None => write_baseline(io::stdout().lock(), baseline, alpha)?,
    }
    Ok(())
}

fn report<T: Serialize>(out: Option<&Path>, value: &T) -> Result<()> {
    match out {
        Some(path) => {
            let mut w = create(path)?;
            write_json(&mut w, value)?;
            w.flush()?;
        }
        None => write_json(io::stdout().lock(), value)?,
    }
    Ok(())
}

fn fit(args: FitArgs) -> Result<Status> {
    check_alpha(args.model.alpha)?;
    let table = load_table(&args.data, AnalysisMode::CompleteData)?;
    let opts = FitOptions {
        relrisk: args.model.relrisk,
        ties: args.model.ties,
        ..FitOptions::default()
    };
    let result = maximize(&table.rows, &table.covariate_names, &opts)?;
    if let Some(path) = &args.model.baseline_out {
        baselines(Some(path), &result.baseline, args.model.alpha)?;
    }
    report(args.model.json_out.as_deref(), &result.report(args.model.alpha))?;
    Ok(Status::Done)
}

fn em_options(em: &EmArgs, relrisk: RelRisk, ties: Ties) -> Result<EmOptions> {
    if em.bandwidth.is_some_and(|b| !(b > 0.0 && b.is_finite())) {
        return Err(usage("--bandwidth must be positive"));
    }
    if em.min_em > em.max_em || em.max_em == 0 {
        return Err(usage("need 1 <= --min-em <= --max-em"));
    }
    Ok(EmOptions {
        relrisk,
        ties,
        smooth: SmoothOptions {
            bandwidth: em.bandwidth,
            ..SmoothOptions::default()
        },
        min_iter: em.min_em,
        max_iter: em.max_em,
        loglik_tol: em.em_tol,
        ..EmOptions::default()
    })
}

fn fit_em(args: FitEmArgs) -> Result<Status> {
    check_alpha(args.model.alpha)?;
    let opts = em_options(&args.em, args.model.relrisk, args.model.ties)?;
    let table = load_table(&args.data, AnalysisMode::UnknownInfector)?;
    info!(
        "{} infectees, {} candidate pairs, {} rows",
        table.infectious_sets.len(),
        table.infectious_sets.total_candidates(),
        table.rows.len()
    );
    let result = ecm_fit(&table, &opts)?;
    if let Some(path) = &args.model.baseline_out {
        baselines(Some(path), &result.marginal_baseline, args.model.alpha)?;
    }
    if let Some(path) = &args.weights_out {
        let mut w = create(path)?;
        result.weights.write_csv(&mut w)?;
        w.flush()?;
    }
    if let Some(path) = &args.trace_out {
        let mut w = create(path)?;
        write_trace(&mut w, &result.covariate_names, &result.trace)?;
        w.flush()?;
    }
    report(args.model.json_out.as_deref(), &result.report(args.model.alpha))?;
    if result.converged {
        Ok(Status::Done)
    } else {
        warn!("EM stopped after {} iterations without meeting the convergence criteria", result.em_iterations);
        Ok(Status::NotConverged)
    }
}

fn nelson_aalen(mut args: NelsonAalenArgs) -> Result<Status> {
    check_alpha(args.alpha)?;
    args.data.no_covariates = true;
    let opts = em_options(&args.em, RelRisk::Loglinear, Ties::Efron)?;
    let table = load_table(&args.data, AnalysisMode::UnknownInfector)?;
    let result = marginal_nelson_aalen(&table, &opts)?;
    baselines(args.out.as_deref(), &result.marginal_baseline, args.alpha)?;
    Ok(if result.converged { Status::Done } else { Status::NotConverged })
}

#[derive(Serialize)]
struct Truth<'a> {
    beta_inf: f64,
    beta_sus: f64,
    beta_pair: f64,
    weibull_shape: f64,
    weibull_rate: f64,
    relrisk: RelRisk,
    seed: u64,
    index_case: u64,
    cutoff: f64,
    reached_target: bool,
    infections: usize,
    /// Infectee to infector.
    infector: &'a std::collections::BTreeMap<u64, u64>,
}

fn simulate(args: SimulateArgs) -> Result<Status> {
    let mut cfg: EpidemicConfig = match &args.config {
        Some(path) => read_json(path)?,
        None => EpidemicConfig::default(),
    };
    macro_rules! set {
        ($($field:ident = $value:expr),* $(,)?) => {
            $(if let Some(v) = $value { cfg.$field = v; })*
        };
    }
    set!(
        n_nodes = args.nodes,
        ws_neighbors = args.neighbors,
        rewire_prob = args.rewire,
        weibull_shape = args.shape,
        weibull_rate = args.rate,
        infectious_mean = args.infectious_mean,
        latent = args.latent,
        relrisk = args.relrisk,
        stop_after_infections = args.infections,
        seed = args.seed,
    );
    match args.beta[..] {
        [] => {}
        [inf, sus, pair] => cfg.beta = [inf, sus, pair],
        _ => return Err(usage("--beta takes three values: inf,sus,pair")),
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let sim = simulate_epidemic(&cfg)?;
    if !sim.reached_target {
        warn!(
            "epidemic died out after {} of {} infections",
            sim.n_infected(),
            cfg.stop_after_infections
        );
    }
    std::fs::create_dir_all(&args.out).with_context(|| format!("cannot create {}", args.out.display()))?;
    let mut w = create(&args.out.join("line_list.csv"))?;
    write_line_list(&mut w, &sim.line_list, true)?;
    w.flush()?;
    let mut w = create(&args.out.join("contacts.csv"))?;
    write_pairs(&mut w, &sim.contacts)?;
    w.flush()?;
    let truth = Truth {
        beta_inf: cfg.beta[0],
        beta_sus: cfg.beta[1],
        beta_pair: cfg.beta[2],
        weibull_shape: cfg.weibull_shape,
        weibull_rate: cfg.weibull_rate,
        relrisk: cfg.relrisk,
        seed: cfg.seed,
        index_case: sim.index_case,
        cutoff: sim.cutoff,
        reached_target: sim.reached_target,
        infections: sim.n_infected(),
        infector: &sim.infector,
    };
    let mut w = create(&args.out.join("truth.json"))?;
    write_json(&mut w, &truth)?;
    w.flush()?;
    info!("{} infections by time {:.4}", sim.n_infected(), sim.cutoff);
    Ok(Status::Done)
}

fn jobs(flag: Option<usize>) -> Result<usize> {
    if let Ok(v) = std::env::var("CONTACT_INTERVAL_THREADS") {
        return match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(usage(format!("CONTACT_INTERVAL_THREADS must be a positive integer, got `{v}`"))),
        };
    }
    match flag {
        Some(0) => Err(usage("--jobs must be positive")),
        Some(n) => Ok(n),
        None => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

fn coverage_study(args: StudyArgs) -> Result<Status> {
    let mut cfg: StudyConfig = match &args.config {
        Some(path) => read_json(path)?,
        None => StudyConfig::default(),
    };
    if let Some(n) = args.replicates {
        cfg.replicates = n;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if cfg.cells.is_empty() || cfg.replicates == 0 {
        bail!(usage("the study needs at least one cell and one replicate"));
    }
    let jobs = jobs(args.jobs)?;
    info!("{} cells x {} replicates on {jobs} threads", cfg.cells.len(), cfg.replicates);
    let result = run_coverage_study(&cfg, jobs)?;
    std::fs::create_dir_all(&args.out).with_context(|| format!("cannot create {}", args.out.display()))?;
    result.write_outputs(&args.out)?;
    let failed = result.failures();
    if failed > 0 {
        warn!("{failed} replicates had a failed fit; see replicates.csv");
    }
    for row in result.beta_coverage() {
        if row.param == cfg.cells[row.cell].varied {
            eprintln!(
                "cell {} (shape {}, {} varied): {} coverage {:.3} over {}",
                row.cell, row.weibull_shape, row.varied, row.estimator, row.coverage, row.n
            );
        }
    }
    Ok(Status::Done)
}
