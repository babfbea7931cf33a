//! `hierloc`: build hierarchies, generate synthetic worlds, train, evaluate
//! and query hierarchical hyperbolic geolocalization models.

mod commands;
mod predfile;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hierloc::config::ManifoldKind;
use hierloc::geodesy::KernelKind;
use hierloc::hierarchy::DatasetTag;

#[derive(Parser, Debug)]
#[command(name = "hierloc", version, about = "Hierarchical hyperbolic image geolocalization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build the entity hierarchy from metadata CSVs.
    BuildHierarchy(BuildArgs),
    /// Write a seeded synthetic world: CSVs, feature sidecars and ground truth.
    GenSynthetic(GenArgs),
    /// Train a model and write its checkpoint, index and metrics log.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a labeled split, or a predictions file against ground truth.
    Eval(EvalArgs),
    /// Predict the country-to-city path of one image feature.
    Query(QueryArgs),
    /// Compare analytic gradients against central differences on a toy world.
    CheckGrad(CheckGradArgs),
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum DatasetArg {
    Labels,
    Coords,
}

impl From<DatasetArg> for DatasetTag {
    fn from(d: DatasetArg) -> Self {
        match d {
            DatasetArg::Labels => DatasetTag::LabelsProvided,
            DatasetArg::Coords => DatasetTag::CoordsOnly,
        }
    }
}

#[derive(Args, Debug)]
struct BuildArgs {
    /// Metadata CSV; repeat for several files.
    #[arg(long = "csv", required = true)]
    csvs: Vec<PathBuf>,
    /// Feature sidecar aligned with each CSV, in the same order.
    #[arg(long = "features")]
    features: Vec<PathBuf>,
    #[arg(long, short)]
    out: PathBuf,
    /// Stats summary path; defaults to `<out>.stats.json`.
    #[arg(long)]
    stats: Option<PathBuf>,
    #[arg(long, value_enum)]
    dataset: Option<DatasetArg>,
    /// Reverse geocode coordinate-only rows with the offline grid geocoder.
    #[arg(long, value_name = "DEGREES")]
    grid_cell_deg: Option<f64>,
    /// Text feature width; defaults to `model.d_text` of the config.
    #[arg(long)]
    d_text: Option<usize>,
    #[arg(long, default_value_t = 0)]
    text_seed: u64,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GenArgs {
    /// Output directory.
    #[arg(long, short)]
    out: PathBuf,
    /// World spec JSON; flags below override its fields.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    countries: Option<usize>,
    #[arg(long)]
    regions: Option<usize>,
    #[arg(long)]
    subregions: Option<usize>,
    #[arg(long)]
    cities: Option<usize>,
    #[arg(long)]
    images: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    d_img: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum ManifoldArg {
    Hyperbolic,
    Euclidean,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum KernelArg {
    Laplace,
    Gauss,
    Inverse,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    hierarchy: Option<PathBuf>,
    #[arg(long)]
    train_csv: Option<PathBuf>,
    #[arg(long)]
    train_features: Option<PathBuf>,
    #[arg(long)]
    test_csv: Option<PathBuf>,
    #[arg(long)]
    test_features: Option<PathBuf>,
    /// Directory for checkpoint, index, metrics log and effective config.
    #[arg(long, short)]
    out: PathBuf,
    #[arg(long, value_enum)]
    manifold: Option<ManifoldArg>,
    #[arg(long, value_enum)]
    kernel: Option<KernelArg>,
    /// Use plain instead of squared geodesic distances in the logits.
    #[arg(long)]
    no_squared_distance: bool,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    /// Beam width of the evaluation run after each epoch.
    #[arg(long)]
    beam_width: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long, required_unless_present = "predictions")]
    checkpoint: Option<PathBuf>,
    /// Defaults to the hierarchy recorded in the checkpoint.
    #[arg(long)]
    hierarchy: Option<PathBuf>,
    #[arg(long, requires = "checkpoint")]
    csv: Option<PathBuf>,
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long)]
    beam_width: Option<usize>,
    /// Predictions CSV (`image_id,country_id,region_id,subregion_id,city_id,lat,lon`).
    #[arg(long, requires = "truth", conflicts_with = "checkpoint")]
    predictions: Option<PathBuf>,
    /// Ground-truth CSV with the same columns; extra columns are ignored.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Also write the report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct QueryArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    hierarchy: Option<PathBuf>,
    /// Semicolon-separated image feature.
    #[arg(long, allow_hyphen_values = true, conflicts_with = "features", required_unless_present = "features")]
    feature: Option<String>,
    /// Feature sidecar; pick the row with `--row`.
    #[arg(long, requires = "row")]
    features: Option<PathBuf>,
    #[arg(long)]
    row: Option<usize>,
    /// Saved index snapshot to search instead of rebuilding from the checkpoint.
    #[arg(long)]
    index: Option<PathBuf>,
    #[arg(long)]
    beam_width: Option<usize>,
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct CheckGradArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Print every case, not only failures and the summary.
    #[arg(long)]
    verbose: bool,
}

impl From<ManifoldArg> for ManifoldKind {
    fn from(m: ManifoldArg) -> Self {
        match m {
            ManifoldArg::Hyperbolic => ManifoldKind::Hyperbolic,
            ManifoldArg::Euclidean => ManifoldKind::Euclidean,
        }
    }
}

impl From<KernelArg> for KernelKind {
    fn from(k: KernelArg) -> Self {
        match k {
            KernelArg::Laplace => KernelKind::Laplace,
            KernelArg::Gauss => KernelKind::Gauss,
            KernelArg::Inverse => KernelKind::Inverse,
        }
    }
}

/// 2 for bad input or configuration, 1 for everything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    let validation = err.chain().any(|e| {
        e.downcast_ref::<hierloc::Error>().is_some_and(hierloc::Error::is_validation)
            || e.downcast_ref::<commands::Usage>().is_some()
    });
    if validation {
        2
    } else {
        1
    }
}

fn broken_pipe(err: &anyhow::Error) -> bool {
    err.chain()
        .any(|e| e.downcast_ref::<std::io::Error>().is_some_and(|io| io.kind() == std::io::ErrorKind::BrokenPipe))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("HIERLOC_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::BuildHierarchy(a) => commands::build_hierarchy(a),
        Command::GenSynthetic(a) => commands::gen_synthetic(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Query(a) => commands::query(a),
        Command::CheckGrad(a) => commands::check_grad(a),
    };
    match result {
        Ok(code) => code,
        Err(e) if broken_pipe(&e) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
