//! Command-line front end: `analyze`, `ablate` and `fixtures`.

pub mod settings;

mod commands;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

use dbsa::Error;

use settings::Layer;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_PARTIAL: i32 = 3;
pub const EXIT_FAILED: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "dbsa", version, about = "Per-token sensitivity of a stochastic text generator")]
pub struct Cli {
    /// More log output on stderr (repeat for more).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Score every token of a prompt and render a report.
    Analyze(AnalyzeArgs),
    /// Compare token rankings across models, metrics or sample sizes.
    Ablate(AblateArgs),
    /// Write the bundled example prompts and neighbour tables.
    Fixtures(FixturesArgs),
}

#[derive(Debug, Clone, Args)]
#[group(required = true, multiple = false)]
pub struct PromptArgs {
    /// Prompt text.
    #[arg(long)]
    pub prompt: Option<String>,
    /// File holding the prompt text.
    #[arg(long)]
    pub prompt_file: Option<PathBuf>,
}

/// Settings shared by `analyze` and `ablate`.
#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// TOML file with run settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Neighbour provider: static:PATH, knn:PATH or synonyms.
    #[arg(long)]
    pub neighbors: Option<String>,
    /// Chat completions endpoint URL.
    #[arg(long)]
    pub endpoint: Option<String>,
    /// Embedding endpoint; defaults to the generation endpoint.
    #[arg(long)]
    pub embedding_endpoint: Option<String>,
    #[arg(long)]
    pub embedding_model: Option<String>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub max_output_tokens: Option<u32>,
    /// Responses per sample set.
    #[arg(short = 'n', long = "samples")]
    pub samples: Option<usize>,
    /// Neighbours per occurrence.
    #[arg(short = 'k', long)]
    pub k: Option<usize>,
    /// embedding_energy, sim1d_mean, sim1d_emd or sim1d_energy.
    #[arg(long)]
    pub mode: Option<String>,
    /// cosine, l1 or l2.
    #[arg(long)]
    pub metric: Option<String>,
    #[arg(long)]
    pub permutations: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
    #[arg(long)]
    pub max_concurrent_requests: Option<usize>,
    /// Request timeout in seconds.
    #[arg(long)]
    pub timeout: Option<f64>,
    #[arg(long)]
    pub max_retries: Option<u32>,
    /// Environment variable holding the API key.
    #[arg(long)]
    pub api_key_env: Option<String>,
    /// Use (hits + 1) / (permutations + 1) p-values.
    #[arg(long)]
    pub add_one: bool,
    #[arg(long, value_enum)]
    pub p_aggregation: Option<Aggregation>,
    #[arg(long)]
    pub normalize_by_neighbor_distance: bool,
    /// Draw a fresh baseline for every unit.
    #[arg(long)]
    pub resample_baseline_per_unit: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Aggregation {
    Mean,
    Fisher,
}

impl RunArgs {
    fn layer(&self) -> Layer {
        Layer {
            endpoint_url: self.endpoint.clone(),
            embedding_endpoint_url: self.embedding_endpoint.clone(),
            embedding_model: self.embedding_model.clone(),
            temperature: self.temperature,
            max_output_tokens: self.max_output_tokens,
            sample_count_n: self.samples,
            timeout_secs: self.timeout,
            max_retries: self.max_retries,
            max_concurrent_requests: self.max_concurrent_requests,
            api_key_env: self.api_key_env.clone(),
            neighbors: self.neighbors.clone(),
            k: self.k,
            mode: self.mode.clone(),
            metric: self.metric.clone(),
            permutations: self.permutations,
            run_seed: self.seed,
            p_value_estimator: self.add_one.then(|| "add_one".to_owned()),
            p_value_aggregation: self.p_aggregation.map(|a| {
                match a {
                    Aggregation::Mean => "mean",
                    Aggregation::Fisher => "fisher",
                }
                .to_owned()
            }),
            normalize_by_neighbor_distance: self.normalize_by_neighbor_distance.then_some(true),
            resample_baseline_per_unit: self.resample_baseline_per_unit.then_some(true),
            cache_dir: self.cache_dir.clone(),
            ..Layer::default()
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub prompt: PromptArgs,
    #[command(flatten)]
    pub run: RunArgs,
    /// Generator model name.
    #[arg(long)]
    pub model: Option<String>,
    /// JSON file describing a mock generator and embedder, used instead of
    /// the HTTP clients.
    #[arg(long)]
    pub mock: Option<PathBuf>,
    /// ansi, html or json. Repeat for several reports.
    #[arg(long)]
    pub format: Vec<String>,
    /// Output path. With several formats the extension is replaced per format.
    #[arg(short, long)]
    pub output: Option<PathBuf>,
    /// Append a table of the k most sensitive tokens.
    #[arg(long)]
    pub top_k: Option<usize>,
    /// Significance level for the top-k table.
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub show_p_values: bool,
    /// Tokens never highlighted.
    #[arg(long)]
    pub suppress: Vec<String>,
    /// Print the planned work and exit without any network traffic.
    #[arg(long)]
    pub dry_run: bool,
}

impl AnalyzeArgs {
    fn layer(&self) -> Layer {
        Layer {
            model_name: self.model.clone(),
            mock: self.mock.clone(),
            format: (!self.format.is_empty()).then(|| self.format.clone()),
            output: self.output.clone(),
            top_k: self.top_k,
            alpha: self.alpha,
            show_p_values: self.show_p_values.then_some(true),
            suppress: (!self.suppress.is_empty()).then(|| self.suppress.clone()),
            ..self.run.layer()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AblationCommand {
    /// Pairwise rank agreement between generators.
    CrossModel,
    /// Pairwise rank agreement between distance metrics.
    Metrics,
    /// Agreement of two generators as the sample size grows.
    McSweep,
}

#[derive(Debug, Clone, Args)]
pub struct AblateArgs {
    #[arg(value_enum)]
    pub study: AblationCommand,
    #[command(flatten)]
    pub prompt: PromptArgs,
    #[command(flatten)]
    pub run: RunArgs,
    /// Generator model; repeat once per model.
    #[arg(long)]
    pub model: Vec<String>,
    /// Mock client spec; repeat once per model.
    #[arg(long)]
    pub mock: Vec<PathBuf>,
    /// Metrics compared by the `metrics` study.
    #[arg(long, value_delimiter = ',')]
    pub metrics: Vec<String>,
    /// Sample sizes for `mc-sweep`.
    #[arg(long, value_delimiter = ',', default_value = "4,8,16,32,40")]
    pub sizes: Vec<usize>,
    /// Repeats per sample size for `mc-sweep`.
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    /// Directory receiving `<study>.csv` and `<study>.json`.
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct FixturesArgs {
    #[arg(long, default_value = "fixtures")]
    pub dir: PathBuf,
    /// Print file names only.
    #[arg(long)]
    pub list: bool,
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format(|buf, record| {
            writeln!(
                buf,
                "ts={} level={} target={} msg={:?}",
                buf.timestamp_millis(),
                record.level(),
                record.target(),
                record.args().to_string()
            )
        })
        .target(env_logger::Target::Stderr)
        .try_init();
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Argument(_) | Error::Io { .. } => EXIT_CONFIG,
        _ => EXIT_FAILED,
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_CONFIG,
            };
        }
    };
    init_logging(cli.verbose);
    let env = |var: &str| std::env::var(var).ok();
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    let outcome = match &cli.command {
        Command::Analyze(args) => commands::analyze(args, &env, &mut out),
        Command::Ablate(args) => commands::ablate(args, &env, &mut out),
        Command::Fixtures(args) => commands::fixtures(args, &mut out),
    };
    let _ = out.flush();
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
