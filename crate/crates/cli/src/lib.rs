//! `fourierformer` command-line runner.
//!
//! Every subcommand reads a flat `key=value` config (`--config FILE`), lets
//! flags override individual keys (`--some-key value` for `some_key`), writes
//! the resolved config to `config.txt` in the output directory and then its
//! CSV/JSON artifacts next to it. Precedence is defaults, then the config
//! file, then flags.
//!
//! Exit codes: 0 success, 1 failed check or runtime failure, 2 usage error.

mod commands;
pub mod config;

use std::ffi::OsString;
use std::fmt;
use std::path::PathBuf;

use clap::parser::ValueSource;
use clap::{Arg, ArgMatches, Command};

pub use config::ExperimentConfig;

/// Environment variable consulted for the default `output_dir`.
pub const OUTPUT_DIR_ENV: &str = "FOURIERFORMER_OUTPUT_DIR";

/// Name of the resolved-config echo written into the output directory.
pub const CONFIG_ECHO: &str = "config.txt";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CliError {
    Usage(String),
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Failed(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Failed(m) => write!(f, "error: {m}"),
        }
    }
}

impl From<fourierformer_core::Error> for CliError {
    fn from(e: fourierformer_core::Error) -> Self {
        use fourierformer_core::Error as E;
        match e {
            E::Parameter(_) | E::Config(_) | E::Mode(_) | E::UnsupportedNormalization(_) => {
                CliError::Usage(e.to_string())
            }
            other => CliError::Failed(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Failed(e.to_string())
    }
}

/// A config key with its default and help text.
#[derive(Clone, Debug)]
pub struct KeySpec {
    pub name: &'static str,
    pub default: String,
    pub help: &'static str,
}

fn key(name: &'static str, default: impl Into<String>, help: &'static str) -> KeySpec {
    KeySpec { name, default: default.into(), help }
}

pub const SUBCOMMANDS: &[(&str, &str)] = &[
    ("gradcheck", "Fused Fourier-attention backward against central differences"),
    ("density-rate", "MISE of the Fourier density estimator along a sample-size ladder"),
    ("regression-rate", "Test MSE of Fourier NW regression along repeated ladders"),
    ("equivalence", "Gaussian NW regression vs dot-product attention on unit-norm keys"),
    ("bandlimit", "Numeric Fourier transform of the l=1 and l=2 kernels vs closed forms"),
    ("train-lm", "Train the byte-level language model"),
    ("ablate-phi", "Train one model per phi exponent"),
    ("ablate-r", "Train one model per initial bandwidth"),
    ("head-distance", "Pairwise head distances of trained dot and Fourier models"),
];

fn default_output_dir() -> String {
    std::env::var(OUTPUT_DIR_ENV).unwrap_or_else(|_| "out".to_string())
}

struct ModelDefaults {
    corpus_bytes: usize,
    layers: usize,
    d_model: usize,
    d_ff: usize,
    context: usize,
    steps: usize,
    batch_size: usize,
    eval_every: usize,
    valid_windows: usize,
}

const FULL: ModelDefaults = ModelDefaults {
    corpus_bytes: 200_000,
    layers: 2,
    d_model: 32,
    d_ff: 64,
    context: 64,
    steps: 2000,
    batch_size: 8,
    eval_every: 500,
    valid_windows: 64,
};

const TOY: ModelDefaults = ModelDefaults {
    corpus_bytes: 40_000,
    layers: 1,
    d_model: 16,
    d_ff: 32,
    context: 32,
    steps: 300,
    batch_size: 8,
    eval_every: 0,
    valid_windows: 32,
};

fn model_keys(d: &ModelDefaults) -> Vec<KeySpec> {
    vec![
        key("corpus", "", "Path to a raw byte corpus; empty uses the synthetic corpus"),
        key("corpus_bytes", d.corpus_bytes.to_string(), "Synthetic corpus size in bytes"),
        key("corpus_seed", "7", "Synthetic corpus seed"),
        key("layers", d.layers.to_string(), "Transformer blocks"),
        key("d_model", d.d_model.to_string(), "Model width"),
        key("heads", "2", "Attention heads per block"),
        key("d_ff", d.d_ff.to_string(), "Feed-forward width"),
        key("context", d.context.to_string(), "Context length in bytes"),
        key("exponent", "4", "phi exponent l"),
        key("r_init", "2.0", "Initial bandwidth R"),
        key("vector_r", "false", "One bandwidth per head dimension instead of one per head"),
        key("steps", d.steps.to_string(), "Optimizer steps"),
        key("batch_size", d.batch_size.to_string(), "Sequences per step"),
        key("lr", "3e-4", "Adam step size"),
        key("eval_every", d.eval_every.to_string(), "Validation interval in steps (0: only at the end)"),
        key("valid_windows", d.valid_windows.to_string(), "Validation windows"),
    ]
}

/// Every key a subcommand accepts, global keys first.
pub fn keys(subcommand: &str) -> Vec<KeySpec> {
    let mut ks = vec![
        key("seed", "0", "Root RNG seed"),
        key("threads", "1", "Worker threads"),
        key("output_dir", default_output_dir(), "Directory for artifacts"),
    ];
    let extra = match subcommand {
        "gradcheck" => vec![
            key("dims", "4", "Head dimension D"),
            key("seeds", "25", "Random instances per configuration"),
            key("max_n", "8", "Largest sequence length"),
            key("exponents", "2,4,6", "phi exponents to check"),
            key("h", "1e-4", "Central-difference step"),
            key("tol", "1e-4", "Maximum relative error"),
        ],
        "density-rate" => vec![
            key("ladder", "100,400,1600,6400", "Sample sizes"),
            key("reps", "50", "Monte Carlo repetitions per sample size"),
            key("exponent", "2", "phi exponent l"),
            key("truth", "gaussian", "gaussian | cauchy | laplace | mixture"),
            key("dim", "1", "Dimension (1 or 2)"),
            key("r_constant", "1.0", "Constant c in R = c N^rate"),
            key("grid_points", "1201", "Grid points per axis"),
            key("grid_half_width", "6.0", "Grid covers [-w, w] per axis"),
            key("max_slope", "-0.35", "Largest accepted log-log slope"),
        ],
        "regression-rate" => vec![
            key("ladder", "100,400,1600", "Sample sizes"),
            key("reps", "1", "Data sets per sample size and repeat"),
            key("repeats", "20", "Independent ladders"),
            key("exponent", "4", "phi exponent l"),
            key("r_constant", "1.0", "Constant c in R = c N^rate"),
            key("noise_sigma", "0.1", "Observation noise"),
            key("test_points", "20", "Evenly spaced test points"),
            key("test_half_width", "1.5", "Test points cover [-w, w]"),
            key("min_fraction", "0.95", "Required fraction of strictly decreasing ladders"),
        ],
        "equivalence" => vec![
            key("n", "50", "Random instances"),
            key("max_n", "16", "Largest key count"),
            key("max_d", "16", "Largest dimension"),
            key("tol", "1e-10", "Maximum absolute gap"),
        ],
        "bandlimit" => vec![
            key("radii", "1,2", "Bandwidths R"),
            key("exponents", "1,2", "phi exponents (1 and/or 2)"),
            key("points", "61", "Frequencies per (l, R) on [-3R, 3R]"),
            key("margin", "0.05", "Frequencies closer than this to a kink are not checked"),
            key("tol", "2e-2", "Maximum absolute error"),
        ],
        "train-lm" => {
            let mut v = model_keys(&FULL);
            v.push(key("variant", "fourier", "fourier | dot"));
            v.push(key("require_baseline", "true", "Fail unless validation perplexity beats the order-0 baseline"));
            v
        }
        "ablate-phi" => {
            let mut v = model_keys(&TOY);
            v.retain(|k| k.name != "exponent");
            v.push(key("exponents", "1,2,3,4,6", "phi exponents, one model each"));
            v
        }
        "ablate-r" => {
            let mut v = model_keys(&TOY);
            v.retain(|k| k.name != "r_init");
            v.push(key("r_inits", "0.1,0.5,1,2,4", "Initial bandwidths, one model each"));
            v
        }
        "head-distance" => {
            let mut v = model_keys(&TOY);
            v.push(key("source", "outputs", "outputs | attention"));
            v.push(key("windows", "8", "Validation windows the distance is averaged over"));
            v.push(key("checkpoint", "", "Measure this checkpoint (its directory must hold config.txt) instead of training"));
            v
        }
        _ => Vec::new(),
    };
    ks.extend(extra);
    ks
}

fn flag(name: &str) -> String {
    name.replace('_', "-")
}

pub fn command() -> Command {
    let mut cmd = Command::new("fourierformer")
        .about("Fourier integral estimators, Fourier attention and toy language-model experiments")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .arg_required_else_help(true);
    for &(name, about) in SUBCOMMANDS {
        let mut sub = Command::new(name)
            .about(about)
            .arg(Arg::new("config").long("config").value_name("FILE").help("key=value config file"));
        for k in keys(name) {
            sub = sub.arg(
                Arg::new(k.name)
                    .long(flag(k.name))
                    .value_name("VALUE")
                    .help(format!("{} [default: {}]", k.help, k.default)),
            );
        }
        cmd = cmd.subcommand(sub);
    }
    cmd
}

/// Defaults, then the config file, then flags.
pub fn resolve(subcommand: &str, matches: &ArgMatches) -> Result<ExperimentConfig, CliError> {
    let specs = keys(subcommand);
    let mut cfg = ExperimentConfig::new();
    for k in &specs {
        cfg.set(k.name, &k.default);
    }
    if let Some(path) = matches.get_one::<String>("config") {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {path}: {e}")))?;
        let file = ExperimentConfig::parse(&text)?;
        for k in file.keys() {
            if !specs.iter().any(|s| s.name == k) {
                return Err(CliError::Usage(format!("unknown key `{k}` for {subcommand}")));
            }
            cfg.set(k, file.raw(k)?);
        }
    }
    for k in &specs {
        if matches.value_source(k.name) == Some(ValueSource::CommandLine) {
            if let Some(v) = matches.get_one::<String>(k.name) {
                cfg.set(k.name, v);
            }
        }
    }
    Ok(cfg)
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let Some((sub, sub_matches)) = matches.subcommand() else {
        return 2;
    };
    match execute(sub, sub_matches) {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}

fn execute(sub: &str, matches: &ArgMatches) -> Result<bool, CliError> {
    let cfg = resolve(sub, matches)?;
    let threads: usize = cfg.get("threads")?;
    if threads == 0 {
        return Err(CliError::Usage("threads must be >= 1".into()));
    }
    let out = PathBuf::from(cfg.raw("output_dir")?);
    std::fs::create_dir_all(&out)?;
    std::fs::write(out.join(CONFIG_ECHO), cfg.echo(sub))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Failed(e.to_string()))?;
    let outcome = pool.install(|| commands::dispatch(sub, &cfg, &out))?;
    println!("{}", outcome.summary);
    if !outcome.passed {
        eprintln!("check failed; see {}", out.display());
    }
    Ok(outcome.passed)
}
