use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use hdqtest::io::{self, BadRowPolicy, ColumnMapping, SubsampleProtocol};
use hdqtest::sim::{self, CovarianceCase, ExperimentConfig, TraceSetting};
use hdqtest::{CombinationRule, DistributionKind, Error, Result};

#[derive(Parser)]
#[command(name = "hdqtest", version, about = "Adaptive tests for high-dimensional quantile regression")]
struct Cli {
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Test one CSV dataset.
    Test(DataArgs),
    /// Monte Carlo size study.
    SimulateSize(SimArgs),
    /// Monte Carlo power study over a sparsity grid.
    SimulatePower {
        #[command(flatten)]
        sim: SimArgs,
        /// Comma-separated sparsity levels.
        #[arg(long, value_delimiter = ',', default_value = "1,9,60")]
        s_grid: Vec<usize>,
    },
    /// Empirical joint-vs-product CDF of the sum and max statistics under the null.
    IndependenceProbe(SimArgs),
    /// Repeated subsampling of a CSV dataset across quantile levels.
    SubsampleStudy {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        subsample_size: Option<usize>,
        #[arg(long)]
        replications: Option<usize>,
        /// Comma-separated quantile levels.
        #[arg(long, value_delimiter = ',')]
        tau_grid: Option<Vec<f64>>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum RuleArg {
    Cauchy,
    CauchyPaper,
    Minp,
}

impl From<RuleArg> for CombinationRule {
    fn from(r: RuleArg) -> Self {
        match r {
            RuleArg::Cauchy => CombinationRule::CauchyEqualWeights,
            RuleArg::CauchyPaper => CombinationRule::CauchyPaperSum,
            RuleArg::Minp => CombinationRule::MinP,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum TraceArg {
    Estimate,
    Oracle,
}

#[derive(Clone, Copy, ValueEnum)]
enum CovArg {
    Identity,
    Ar,
    Spiked,
}

#[derive(Args)]
struct SimArgs {
    /// JSON experiment configuration; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    replications: Option<usize>,
    #[arg(long, value_enum)]
    rule: Option<RuleArg>,
    #[arg(long, value_enum)]
    trace: Option<TraceArg>,
    #[arg(long)]
    n: Option<usize>,
    /// Number of high-dimensional covariates.
    #[arg(long)]
    p: Option<usize>,
    #[arg(long)]
    q: Option<usize>,
    #[arg(long)]
    dist: Option<DistributionKind>,
    #[arg(long)]
    error_dist: Option<DistributionKind>,
    #[arg(long, value_enum)]
    cov: Option<CovArg>,
    #[arg(long)]
    s: Option<usize>,
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DataArgs {
    /// JSON file with any of the data settings below.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    response: Option<String>,
    /// Comma-separated adjustment columns (intercept added automatically).
    #[arg(long, value_delimiter = ',')]
    z: Option<Vec<String>>,
    /// Comma-separated high-dimensional columns; default is all remaining.
    #[arg(long, value_delimiter = ',')]
    x: Option<Vec<String>>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, value_enum)]
    rule: Option<RuleArg>,
    /// Only `estimate` is available for observed data.
    #[arg(long, value_enum)]
    trace: Option<TraceArg>,
    /// Skip rows with missing or unparseable values instead of failing.
    #[arg(long)]
    drop_bad_rows: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct DataConfig {
    data: Option<PathBuf>,
    response: Option<String>,
    z_columns: Option<Vec<String>>,
    x_columns: Option<Vec<String>>,
    tau: Option<f64>,
    alpha: Option<f64>,
    rule: Option<CombinationRule>,
    drop_bad_rows: Option<bool>,
    subsample_size: Option<usize>,
    replications: Option<usize>,
    tau_grid: Option<Vec<f64>>,
    master_seed: Option<u64>,
}

fn read_json<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else { return Ok(T::default()) };
    if !path.exists() {
        return Err(Error::FileNotFound(path.display().to_string()));
    }
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => io::write_text(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Io(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

fn experiment_config(a: &SimArgs) -> Result<ExperimentConfig> {
    let mut c: ExperimentConfig = read_json(a.config.as_deref())?;
    macro_rules! set {
        ($($flag:ident => $field:ident),*) => {
            $(if let Some(v) = a.$flag { c.$field = v; })*
        };
    }
    set!(tau => tau, alpha => alpha, seed => master_seed, replications => replications,
         n => n, p => p_dim, q => q, dist => dist, error_dist => error_dist, s => s);
    if let Some(r) = a.rule {
        c.rule = r.into();
    }
    if let Some(t) = a.trace {
        c.trace_mode = match t {
            TraceArg::Estimate => TraceSetting::Estimate,
            TraceArg::Oracle => TraceSetting::Oracle,
        };
    }
    if let Some(cov) = a.cov {
        c.cov = match cov {
            CovArg::Identity => CovarianceCase::Identity,
            CovArg::Ar => CovarianceCase::ar2(),
            CovArg::Spiked => CovarianceCase::Spiked,
        };
    }
    c.validate()?;
    Ok(c)
}

struct DataSetup {
    data: PathBuf,
    mapping: ColumnMapping,
    policy: BadRowPolicy,
    tau: f64,
    alpha: f64,
    rule: CombinationRule,
    cfg: DataConfig,
}

fn data_setup(a: &DataArgs) -> Result<DataSetup> {
    let cfg: DataConfig = read_json(a.config.as_deref())?;
    if matches!(a.trace, Some(TraceArg::Oracle)) {
        return Err(Error::InvalidConfig("oracle trace is unavailable for observed data".into()));
    }
    let data = a
        .data
        .clone()
        .or(cfg.data.clone())
        .ok_or_else(|| Error::InvalidConfig("--data is required".into()))?;
    let response = a
        .response
        .clone()
        .or(cfg.response.clone())
        .ok_or_else(|| Error::InvalidConfig("--response is required".into()))?;
    let mapping = ColumnMapping {
        response,
        z_columns: a.z.clone().or(cfg.z_columns.clone()).unwrap_or_default(),
        x_columns: a.x.clone().or(cfg.x_columns.clone()).unwrap_or_default(),
    };
    let policy = if a.drop_bad_rows || cfg.drop_bad_rows.unwrap_or(false) {
        BadRowPolicy::Drop
    } else {
        BadRowPolicy::Reject
    };
    Ok(DataSetup {
        data,
        mapping,
        policy,
        tau: a.tau.or(cfg.tau).unwrap_or(0.5),
        alpha: a.alpha.or(cfg.alpha).unwrap_or(0.05),
        rule: a.rule.map(Into::into).or(cfg.rule).unwrap_or_default(),
        cfg,
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Test(a) => {
            let s = data_setup(&a)?;
            let skeleton = io::ingest_csv(&s.data, &s.mapping, s.policy)?;
            let out = io::run_dataset_test(&skeleton.with_tau(s.tau)?, s.rule)?;
            for w in &out.warnings {
                eprintln!("warning: {w}");
            }
            let r = out.result.rejections(s.alpha);
            eprintln!(
                "n = {}, p = {}, q = {}; reject at alpha = {}: t_cc {}, t_max {}, t_sum {}",
                out.result.n, out.result.p_dim, out.result.q, s.alpha, r.cc, r.max, r.sum
            );
            emit(a.out.as_deref(), &io::test_results_csv(std::slice::from_ref(&out.result))?)
        }
        Command::SimulateSize(a) => {
            let cfg = experiment_config(&a)?;
            let report = sim::run_size_experiment(&cfg)?;
            emit(a.out.as_deref(), &json(&report)?)
        }
        Command::SimulatePower { sim: a, s_grid } => {
            let cfg = experiment_config(&a)?;
            let reports = sim::run_power_experiment(&cfg, &s_grid)?;
            emit(a.out.as_deref(), &io::power_table_csv(&reports)?)
        }
        Command::IndependenceProbe(a) => {
            let cfg = experiment_config(&a)?;
            let report = sim::run_independence_probe(&cfg, &sim::default_grid())?;
            emit(a.out.as_deref(), &json(&report)?)
        }
        Command::SubsampleStudy { data: a, subsample_size, replications, tau_grid, seed } => {
            let s = data_setup(&a)?;
            let skeleton = io::ingest_csv(&s.data, &s.mapping, s.policy)?;
            let d = SubsampleProtocol::default();
            let protocol = SubsampleProtocol {
                subsample_size: subsample_size.or(s.cfg.subsample_size).unwrap_or(d.subsample_size),
                replications: replications.or(s.cfg.replications).unwrap_or(d.replications),
                tau_grid: tau_grid.or(s.cfg.tau_grid.clone()).unwrap_or(d.tau_grid),
                alpha: s.alpha,
                master_seed: seed.or(s.cfg.master_seed).unwrap_or(d.master_seed),
            };
            let rows = io::run_subsample_study(&skeleton, &protocol, s.rule)?;
            emit(a.out.as_deref(), &io::subsample_csv(&rows)?)
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        e if e.is_usage() => 1,
        e if e.is_numerical() => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.threads {
        Some(t) => match rayon::ThreadPoolBuilder::new().num_threads(t).build() {
            Ok(pool) => pool.install(|| run(cli)),
            Err(e) => Err(Error::InvalidConfig(e.to_string())),
        },
        None => run(cli),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
