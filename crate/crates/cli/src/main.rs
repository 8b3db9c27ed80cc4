use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;

/// Fingerprint neural-network weights with anti-collusion codes.
#[derive(Debug, Parser)]
#[command(name = "nnmark", version)]
pub struct Cli {
    /// Master seed for key generation, training and simulation.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// JSON pipeline configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Registry file (defaults to $NNMARK_REGISTRY, then ./nnmark-registry.json).
    #[arg(long, global = true, env = "NNMARK_REGISTRY")]
    pub registry: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build, check or export a codebook.
    #[command(subcommand)]
    Codebook(CodebookCmd),
    /// Create a registry holding the owner's key seed and codebook.
    Keygen(KeygenArgs),
    /// Bind codebook columns to users.
    Assign(AssignArgs),
    /// Train the unmarked host model.
    TrainBaseline(TrainArgs),
    /// Embed a user's fingerprint into a copy of the baseline.
    Embed(EmbedArgs),
    /// Print the extracted fingerprint and correlation scores of a model.
    Extract(ModelArg),
    /// Match a model's decoded code-vector against the codebook.
    Identify(DetectArgs),
    /// List every minimal colluder set consistent with a model.
    DetectColluders(DetectArgs),
    /// Apply an attack to one or more models.
    Attack(AttackArgs),
    /// Run a Monte Carlo sweep and write a report.
    Simulate(SimulateArgs),
    /// Re-render a saved JSON report.
    Report(ReportArgs),
    /// Check every recorded weight-file digest in the registry.
    Verify,
}

#[derive(Debug, Subcommand)]
pub enum CodebookCmd {
    /// Print the codebook as JSON.
    Construct(SpecArg),
    /// Check a BIBD given by name or by an exported JSON file.
    Validate {
        #[arg(long, conflicts_with = "file")]
        spec: Option<String>,
        #[arg(long)]
        file: Option<PathBuf>,
    },
    /// Write the codebook to a file.
    Export {
        #[command(flatten)]
        spec: SpecArg,
        #[arg(long, value_enum, default_value = "json")]
        format: ExportFormat,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct SpecArg {
    /// `projective:P`, `steiner:V` or `orthogonal:V`; defaults to the config.
    #[arg(long)]
    pub spec: Option<String>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ExportFormat {
    Json,
    Csv,
}

#[derive(Debug, Args)]
pub struct KeygenArgs {
    #[arg(long, default_value = "owner")]
    pub owner: String,
    #[command(flatten)]
    pub spec: SpecArg,
    /// Replace an existing registry.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
pub struct AssignArgs {
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub users: Option<Vec<usize>>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    #[arg(long)]
    pub user: usize,
    #[arg(long)]
    pub baseline: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Write per-epoch JSON lines here.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ModelArg {
    #[arg(long)]
    pub model: PathBuf,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub k_cap: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum AttackKindArg {
    Prune,
    Finetune,
    Collude,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ScopeArg {
    Marked,
    Global,
}

#[derive(Debug, Args)]
pub struct AttackArgs {
    #[arg(long, value_enum)]
    pub kind: AttackKindArg,
    /// Input model; repeat for collusion.
    #[arg(long = "model", required = true)]
    pub models: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pub rate: f64,
    #[arg(long, value_enum, default_value = "marked")]
    pub scope: ScopeArg,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SweepKind {
    Collusion,
    Prune,
    Finetune,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Code,
    Model,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, value_enum)]
    pub sweep: SweepKind,
    /// Collusion sweeps default to code level; the others need models.
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[command(flatten)]
    pub spec: SpecArg,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub k_min: Option<usize>,
    #[arg(long)]
    pub k_max: Option<usize>,
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.5,0.9")]
    pub rates: Vec<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, value_enum, default_value = "csv")]
    pub format: ExportFormat,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_enum, default_value = "csv")]
    pub format: ExportFormat,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
