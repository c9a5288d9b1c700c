//! Batch command-line front-end.
//!
//! Every command reads its inputs fully, computes everything in memory and
//! only then writes its outputs (atomically), so a failing run leaves no
//! partial artifacts. Failures print `{"error": {"code", "message"}}` on
//! stderr and exit nonzero.

mod commands;
pub mod manifest;

use std::ffi::OsString;
use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::aggregation::{Variant, DEFAULT_ALPHA};
use crate::compression::TransformKind;
use crate::retrieval::SortOrder;
use crate::selection::Connectivity;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CliError {
    pub code: String,
    pub message: String,
}

impl CliError {
    pub fn new(code: impl Into<String>, message: impl Into<String>) -> Self {
        CliError {
            code: code.into(),
            message: message.into(),
        }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::new("io", format!("{}: {e}", path.display()))
    }

    pub fn context(mut self, ctx: impl fmt::Display) -> Self {
        self.message = format!("{ctx}: {}", self.message);
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::json!({ "error": self }).to_string()
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.code, self.message)
    }
}

impl std::error::Error for CliError {}

impl From<crate::Error> for CliError {
    fn from(e: crate::Error) -> Self {
        CliError::new(e.code(), e.to_string())
    }
}

/// Library error with the offending file prepended.
pub(crate) fn at_path(path: &Path) -> impl Fn(crate::Error) -> CliError + '_ {
    move |e| CliError::from(e).context(path.display())
}

#[derive(Debug, Parser)]
#[command(
    name = "scda",
    version,
    about = "Selective convolutional descriptor aggregation for fine-grained image retrieval"
)]
pub struct Cli {
    /// Worker threads for per-image stages (default: logical cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Select and aggregate descriptors for every manifest entry into a feature store.
    Features(FeaturesArgs),
    /// Build a gallery index from a feature store.
    Index(IndexArgs),
    /// Rank the gallery for features in a store.
    Query(QueryArgs),
    /// Top-k mAP of the query split against an index.
    EvalMap(EvalMapArgs),
    /// IoU / PCP of predicted object boxes against ground truth.
    EvalLoc(EvalLocArgs),
    /// Fit (or apply) an SVD / PCA / whitening projection to a feature store.
    Compress(CompressArgs),
    /// Order gallery ids by one feature dimension.
    SortDim(SortDimArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    Scda,
    #[value(name = "scda_plus")]
    ScdaPlus,
    #[value(name = "scda_flip_plus")]
    ScdaFlipPlus,
    Vlad,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Scda => Variant::Scda,
            VariantArg::ScdaPlus => Variant::ScdaPlus,
            VariantArg::ScdaFlipPlus => Variant::ScdaFlipPlus,
            VariantArg::Vlad => Variant::Vlad,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ConnectivityArg {
    #[value(name = "4")]
    Four,
    #[value(name = "8")]
    Eight,
}

impl From<ConnectivityArg> for Connectivity {
    fn from(c: ConnectivityArg) -> Self {
        match c {
            ConnectivityArg::Four => Connectivity::Four,
            ConnectivityArg::Eight => Connectivity::Eight,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CompressArg {
    Svd,
    Pca,
    #[value(name = "svd_whiten")]
    SvdWhiten,
}

impl From<CompressArg> for TransformKind {
    fn from(c: CompressArg) -> Self {
        match c {
            CompressArg::Svd => TransformKind::Svd,
            CompressArg::Pca => TransformKind::Pca,
            CompressArg::SvdWhiten => TransformKind::SvdWhiten,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OrderArg {
    Desc,
    Asc,
}

impl From<OrderArg> for SortOrder {
    fn from(o: OrderArg) -> Self {
        match o {
            OrderArg::Desc => SortOrder::Descending,
            OrderArg::Asc => SortOrder::Ascending,
        }
    }
}

#[derive(Debug, Args)]
pub struct FeaturesArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_enum, default_value = "scda")]
    pub variant: VariantArg,
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    pub alpha: f64,
    #[arg(long, value_enum, default_value = "8")]
    pub connectivity: ConnectivityArg,
    /// Seed for VLAD codebook training.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// VLAD codebook size.
    #[arg(long, default_value_t = 2)]
    pub clusters: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Per-image JSON Lines sidecar with selected count and predicted box.
    #[arg(long)]
    pub sidecar: Option<PathBuf>,
    /// Directory for PGM dumps of the final pool5 masks.
    #[arg(long)]
    pub mask_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct IndexArgs {
    #[arg(long)]
    pub features: PathBuf,
    /// Restrict the index to the manifest's gallery split.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct QueryArgs {
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    /// Comma-separated ids to query (default: every feature in the store).
    #[arg(long, value_delimiter = ',')]
    pub ids: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalMapArgs {
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long)]
    pub features: PathBuf,
    /// Queries are the manifest's query split (default: store entries not in the index).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub k: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalLocArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_enum, default_value = "8")]
    pub connectivity: ConnectivityArg,
    /// Use the raw threshold mask instead of its largest component.
    #[arg(long)]
    pub no_largest_component: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CompressArgs {
    #[arg(long)]
    pub features: PathBuf,
    /// Fit on the manifest's gallery split (default: every row).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long = "compress", value_enum, required_unless_present = "transform")]
    pub kind: Option<CompressArg>,
    #[arg(long, required_unless_present = "transform")]
    pub dim: Option<usize>,
    /// Apply a previously saved transform instead of fitting.
    #[arg(long, conflicts_with_all = ["kind", "dim"])]
    pub transform: Option<PathBuf>,
    /// Where to save the fitted transform.
    #[arg(long)]
    pub transform_out: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SortDimArgs {
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long)]
    pub dim_index: usize,
    #[arg(long, value_enum, default_value = "desc")]
    pub order: OrderArg,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `args` and runs the command.
pub fn run<I, T>(args: I) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| CliError::new("usage", e.to_string()))?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        pool = pool.num_threads(n);
    }
    let pool = pool.build().map_err(|e| CliError::new("threads", e.to_string()))?;
    pool.install(|| commands::dispatch(&cli.command))
}

/// Binary entry point: returns the process exit code.
pub fn main() -> i32 {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().filter_or("SCDA_LOG", "warn")).try_init();
    let args: Vec<OsString> = std::env::args_os().collect();
    // help and version go to stdout as usual
    if let Err(e) = Cli::try_parse_from(&args) {
        if matches!(
            e.kind(),
            clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
        ) {
            let _ = e.print();
            return 0;
        }
    }
    match run(args) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.to_json());
            if e.code == "usage" {
                2
            } else {
                1
            }
        }
    }
}
