//! `locemb`: prepare descriptions, train, evaluate, ablate and query
//! location encoders from the command line.
//!
//! Exit codes: 0 success, 1 invalid input or configuration, 2 runtime
//! failure.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use locemb::eval::ProbeHead;
use locemb::poi::DescriptionVariant;

/// A user-facing input or configuration problem (exit code 1).
#[derive(Debug)]
pub struct Invalid(pub String);

impl std::fmt::Display for Invalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

#[derive(Debug, Parser)]
#[command(name = "locemb", version, about = "Contrastive location embeddings from POI descriptions")]
struct Cli {
    /// More logging (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render POI descriptions (and id sidecar) for an external text model.
    Prepare(PrepareArgs),
    /// Train a location encoder from a run config.
    Train(TrainArgs),
    /// Probe a checkpoint on a land-use (luc) or distribution (sdm) task.
    Eval(EvalArgs),
    /// Rank grid locations against a text query.
    Retrieve(RetrieveArgs),
    /// Train and evaluate one model per description variant.
    Ablate(AblateArgs),
    /// Generate a synthetic city with evaluation data and a starter config.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    /// POI CSV (id,lon,lat,name,category_l1,category_l2).
    #[arg(long)]
    pub pois: PathBuf,
    #[arg(long, default_value = "name_and_type")]
    pub variant: DescriptionVariant,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write hashing-encoder vectors of this dimension.
    #[arg(long)]
    pub fallback_dim: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub fallback_seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Run config (TOML, or JSON by extension).
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides `train.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides `train.description_variant`.
    #[arg(long)]
    pub variant: Option<DescriptionVariant>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Task {
    Luc,
    Sdm,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[arg(long, value_delimiter = ',', default_value = "linear,mlp")]
    pub heads: Vec<ProbeHead>,
    /// Number of probe seeds.
    #[arg(long, default_value_t = 5)]
    pub seeds: usize,
    /// First probe seed; seeds run `seed..seed+seeds`.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl ProbeArgs {
    pub fn seed_list(&self) -> Vec<u64> {
        (0..self.seeds as u64).map(|i| self.seed + i).collect()
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum)]
    pub task: Task,
    /// LUC CSV (lon,lat,label) or SDM CSV (region_id,lon,lat,p_1..p_K).
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub probe: ProbeArgs,
    /// Run config whose `[eval]` table sets probe and metric options.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RetrieveArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Query key into the vectors given by --vectors/--ids.
    #[arg(long, conflicts_with = "text", requires_all = ["vectors", "ids"])]
    pub query_id: Option<String>,
    #[arg(long)]
    pub vectors: Option<PathBuf>,
    #[arg(long)]
    pub ids: Option<PathBuf>,
    /// Query text, embedded with the hashing encoder.
    #[arg(long, required_unless_present = "query_id")]
    pub text: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub fallback_seed: u64,
    /// Candidate grid over the checkpoint's bounding box.
    #[arg(long, default_value = "100x100")]
    pub grid: GridSpec,
    /// CSV of candidate points (lon,lat) to rank instead of a grid.
    #[arg(long, conflicts_with = "svg")]
    pub candidates: Option<PathBuf>,
    #[arg(long, default_value_t = 30)]
    pub k: usize,
    /// Also write a similarity heatmap.
    #[arg(long)]
    pub svg: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridSpec {
    pub width: usize,
    pub height: usize,
}

impl std::str::FromStr for GridSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (w, h) = s
            .split_once(['x', 'X'])
            .ok_or_else(|| format!("expected WxH, got `{s}`"))?;
        let parse = |v: &str| v.trim().parse::<usize>().ok().filter(|&n| n > 0);
        match (parse(w), parse(h)) {
            (Some(width), Some(height)) => Ok(GridSpec { width, height }),
            _ => Err(format!("expected positive WxH, got `{s}`")),
        }
    }
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Run config; `[[arms]]` entries supply per-variant vectors.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long = "variant", value_delimiter = ',', default_value = "name_and_type,name_only,type_only")]
    pub variants: Vec<DescriptionVariant>,
    #[command(flatten)]
    pub probe: ProbeArgs,
    /// Overrides `train.seed`.
    #[arg(long = "train-seed")]
    pub train_seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Four zones in quadrants with disjoint categories and names.
    FourQuadrants,
    /// Zones share categories and differ only in names, tiled in blocks.
    SharedCategories,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// City spec JSON; overrides --preset and its options.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "four-quadrants")]
    pub preset: Preset,
    #[arg(long, default_value_t = 2000)]
    pub pois: usize,
    /// Blocks per side for the shared-categories preset.
    #[arg(long, default_value_t = 4)]
    pub blocks: usize,
    /// Append a unique suffix to every POI name.
    #[arg(long)]
    pub unique_names: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Description variant for the written text vectors.
    #[arg(long, default_value = "name_and_type")]
    pub variant: DescriptionVariant,
    #[arg(long, default_value_t = locemb::embedding::DEFAULT_TEXT_DIM)]
    pub fallback_dim: usize,
    #[arg(long)]
    pub out: PathBuf,
}

/// 1 for bad input, 2 for anything that failed while running.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<Invalid>() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<locemb::Error>() {
            return match e {
                locemb::Error::NonFinite(_) => 2,
                locemb::Error::Io { source, .. } if source.kind() != std::io::ErrorKind::NotFound => 2,
                _ => 1,
            };
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = match &cli.command {
        Command::Prepare(a) => commands::prepare(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Retrieve(a) => commands::retrieve(a),
        Command::Ablate(a) => commands::ablate(a),
        Command::Synth(a) => commands::synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
