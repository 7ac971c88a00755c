//! Command-line entry point.
//!
//! Subcommands: `train`, `eval`, `perturb`, `report`, `gen-synth`. All
//! outputs land under the chosen output directory; errors print one
//! machine-readable JSON line on stderr and exit with a stable code
//! (0 ok, 2 config, 3 data/model, 4 numeric).

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use mmkgc::adversarial::GpSign;
use mmkgc::checkpoint;
use mmkgc::config::{ConfigError, Overrides, RunConfig};
use mmkgc::data::{self, DropRecord, ImbalanceLevel, ImbalanceSpec, SynthOptions};
use mmkgc::eval::{self, EvalError};
use mmkgc::train::{self, TrainError};

#[derive(Parser)]
#[command(name = "mmkgc", version, about = "Multi-modal knowledge graph completion toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoint, loss curve and config snapshot.
    Train(TrainArgs),
    /// Evaluate a checkpoint with filtered link prediction.
    Eval(EvalArgs),
    /// Drop modality information from a dataset copy.
    Perturb(PerturbArgs),
    /// Dump relation temperatures and mean fusion weights.
    Report(ReportArgs),
    /// Generate a synthetic toy dataset.
    GenSynth(GenSynthArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum GpSignArg {
    Paper,
    Standard,
}

impl From<GpSignArg> for GpSign {
    fn from(v: GpSignArg) -> Self {
        match v {
            GpSignArg::Paper => GpSign::Paper,
            GpSignArg::Standard => GpSign::Standard,
        }
    }
}

#[derive(Clone, Copy, ValueEnum, Debug)]
enum LevelArg {
    Entity,
    Modality,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML configuration file; flags below override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    save_every: Option<usize>,
    #[arg(long)]
    threads: Option<usize>,
    /// Comma-separated modality subset, e.g. "S,txt". S is always active.
    #[arg(long, value_delimiter = ',')]
    modalities: Option<Vec<String>>,
    /// Disable adversarial augmentation entirely.
    #[arg(long)]
    no_comat: bool,
    /// Drop the per-relation fusion temperature.
    #[arg(long)]
    no_relation_guidance: bool,
    /// Drop the gradient-penalty term from the generator loss.
    #[arg(long)]
    no_gp: bool,
    /// Log-likelihood GAN losses instead of the Wasserstein objective.
    #[arg(long)]
    vanilla_gan: bool,
    /// Score synthetic entities with a two-layer MLP critic.
    #[arg(long)]
    mlp_discriminator: bool,
    #[arg(long)]
    gp_sign: Option<GpSignArg>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint directory, or a training output directory containing one.
    #[arg(long)]
    model: PathBuf,
    /// Dataset directory to evaluate on.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for metrics.json (defaults to the model dir).
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Add per-group sub-reports by endpoint modality completeness.
    #[arg(long)]
    groups: bool,
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Args)]
struct PerturbArgs {
    #[arg(long)]
    data: PathBuf,
    /// Fraction of modality information to drop, in [0, 1].
    #[arg(long)]
    eta: f64,
    #[arg(long, value_enum)]
    level: LevelArg,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    model: PathBuf,
    /// Dataset directory; defaults to the data dir recorded in the model's
    /// config snapshot.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Max training triples sampled for the weight summary.
    #[arg(long, default_value_t = 5000)]
    sample: usize,
}

#[derive(Args)]
struct GenSynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    entities: usize,
    #[arg(long, default_value_t = 10)]
    relations: usize,
    /// Comma-separated name:dim pairs, e.g. "img:16,txt:16".
    #[arg(long, default_value = "img:16,txt:16")]
    modalities: String,
    #[arg(long, default_value_t = 10)]
    clusters: usize,
    #[arg(long, default_value_t = 6)]
    triples_per_entity: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

/// Error carrying its exit code and a short machine-readable kind.
struct CliError {
    code: u8,
    kind: &'static str,
    message: String,
}

impl CliError {
    fn config(message: impl Into<String>) -> Self {
        Self { code: 2, kind: "config", message: message.into() }
    }

    fn data(message: impl Into<String>) -> Self {
        Self { code: 3, kind: "data", message: message.into() }
    }

    fn numeric(message: impl Into<String>) -> Self {
        Self { code: 4, kind: "numeric", message: message.into() }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::config(e.to_string())
    }
}

impl From<data::DataError> for CliError {
    fn from(e: data::DataError) -> Self {
        CliError::data(e.to_string())
    }
}

impl From<checkpoint::CheckpointError> for CliError {
    fn from(e: checkpoint::CheckpointError) -> Self {
        CliError::data(e.to_string())
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::data(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Numeric { .. } | TrainError::Tensor(_) => CliError::numeric(e.to_string()),
            TrainError::Invalid(_) => CliError::config(e.to_string()),
            TrainError::Data(d) => d.into(),
            TrainError::Checkpoint(c) => c.into(),
        }
    }
}

fn io_cli(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::data(format!("io error on {}: {e}", path.display()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Perturb(args) => cmd_perturb(args),
        Command::Report(args) => cmd_report(args),
        Command::GenSynth(args) => cmd_gen_synth(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", serde_json::json!({ "error": e.kind, "message": e.message }));
            ExitCode::from(e.code)
        }
    }
}

/// Restrict a store to the configured modality subset. The pseudo-name "S"
/// refers to the always-active structural source and is ignored here.
fn apply_modality_filter(
    store: &mut data::FeatureStore,
    filter: &Option<Vec<String>>,
) -> Result<(), CliError> {
    let Some(names) = filter else { return Ok(()) };
    let keep: Vec<String> = names.iter().filter(|n| n.as_str() != "S").cloned().collect();
    for name in &keep {
        if store.modality_index(name).is_none() {
            return Err(CliError::config(format!("unknown modality '{name}' in filter")));
        }
    }
    store.retain_modalities(&keep);
    Ok(())
}

/// Accept either a checkpoint directory or a training output directory.
fn resolve_checkpoint_dir(model: &Path) -> PathBuf {
    let nested = model.join("checkpoint");
    if nested.join("manifest.json").exists() {
        nested
    } else {
        model.to_path_buf()
    }
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let mut config = match &args.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    config.apply(&Overrides {
        seed: args.seed,
        threads: args.threads,
        data_dir: args.data_dir,
        out_dir: args.out_dir,
        modalities: args.modalities,
        epochs: args.epochs,
        batch_size: args.batch_size,
        save_every: args.save_every,
        no_comat: args.no_comat,
        no_relation_guidance: args.no_relation_guidance,
        no_gp: args.no_gp,
        vanilla_gan: args.vanilla_gan,
        mlp_discriminator: args.mlp_discriminator,
        gp_sign: args.gp_sign.map(Into::into),
    });
    config.validate()?;

    let data_dir = config
        .data
        .dir
        .clone()
        .ok_or_else(|| CliError::config("no data directory (set --data-dir or [data] dir)"))?;
    let out_dir = config
        .output
        .dir
        .clone()
        .ok_or_else(|| CliError::config("no output directory (set --out-dir or [output] dir)"))?;

    let (kg, mut store) = data::load_dataset(&data_dir)?;
    apply_modality_filter(&mut store, &config.data.modalities)?;

    std::fs::create_dir_all(&out_dir).map_err(io_cli(&out_dir))?;
    let snapshot = out_dir.join("config.toml");
    std::fs::write(&snapshot, config.to_toml()).map_err(io_cli(&snapshot))?;

    let outcome = train::train(&kg, &store, &config.train_options(), Some(&out_dir))?;
    let losses = out_dir.join("losses.csv");
    train::write_losses_csv(&losses, &outcome).map_err(io_cli(&losses))?;

    let last_d = outcome.d_losses.last().copied().unwrap_or(f64::NAN);
    println!(
        "trained {} epochs on {} triples; final d_loss {last_d:.6}; checkpoint at {}",
        config.train.epochs,
        kg.train.len(),
        out_dir.join("checkpoint").display()
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let (params, _, manifest) = checkpoint::load(&resolve_checkpoint_dir(&args.model))?;
    let (kg, store) = data::load_dataset(&args.data)?;
    if kg.n_entities() != manifest.n_entities || kg.n_relations() != manifest.n_relations {
        return Err(CliError::data(format!(
            "vocabulary mismatch: checkpoint has {} entities / {} relations, dataset has {} / {}",
            manifest.n_entities,
            manifest.n_relations,
            kg.n_entities(),
            kg.n_relations()
        )));
    }
    let store = store.aligned_subset(&manifest.modalities)?;

    let labels = if args.groups { Some(data::group_split(&kg, &store)?) } else { None };
    let report = eval::evaluate(&kg.test, &params, &store, &kg, labels.as_deref(), args.threads)?;

    let out_dir = args.out_dir.unwrap_or_else(|| args.model.clone());
    std::fs::create_dir_all(&out_dir).map_err(io_cli(&out_dir))?;
    let path = out_dir.join("metrics.json");
    eval::write_metrics_json(&path, &report).map_err(io_cli(&path))?;
    println!(
        "evaluated {} queries: MRR {:.4}, hits@1 {:.4}, hits@10 {:.4} ({:.1}s)",
        report.n_queries, report.mrr, report.hits.at1, report.hits.at10, report.seconds
    );
    Ok(())
}

fn cmd_perturb(args: PerturbArgs) -> Result<(), CliError> {
    if !(0.0..=1.0).contains(&args.eta) {
        return Err(CliError::config(format!("eta must be in [0, 1], got {}", args.eta)));
    }
    let level = match args.level {
        LevelArg::Entity => ImbalanceLevel::Entity,
        LevelArg::Modality => ImbalanceLevel::Modality,
    };
    let (kg, store) = data::load_dataset(&args.data)?;
    let spec = ImbalanceSpec { eta: args.eta, level, seed: args.seed };
    let (_, drops) = data::perturb(&store, &kg, &spec)?;

    write_perturbed_copy(&args.data, &args.out, &store, &drops)?;
    let manifest_path = args.out.join("drop_manifest.json");
    let json = serde_json::to_string_pretty(&drops)
        .map_err(|e| CliError::data(format!("drop manifest: {e}")))?;
    std::fs::write(&manifest_path, format!("{json}\n")).map_err(io_cli(&manifest_path))?;
    println!(
        "dropped {} (entity, modality) pairs at eta {} ({} level) into {}",
        drops.len(),
        args.eta,
        level,
        args.out.display()
    );
    Ok(())
}

/// Copy a dataset, filtering dropped rows out of the feature files. All
/// other files are copied byte-for-byte, so eta = 0 reproduces the input
/// exactly.
fn write_perturbed_copy(
    src: &Path,
    dst: &Path,
    store: &data::FeatureStore,
    drops: &[DropRecord],
) -> Result<(), CliError> {
    std::fs::create_dir_all(dst.join("features")).map_err(io_cli(dst))?;
    for f in ["entities.tsv", "relations.tsv", "train.tsv", "valid.tsv", "test.tsv", "manifest.json"]
    {
        std::fs::copy(src.join(f), dst.join(f)).map_err(io_cli(&src.join(f)))?;
    }
    let dropped: HashSet<(&str, &str)> =
        drops.iter().map(|d| (d.modality.as_str(), d.entity.as_str())).collect();
    for meta in store.modalities() {
        let name = format!("{}.tsv", meta.name);
        let src_path = src.join("features").join(&name);
        let text = std::fs::read_to_string(&src_path).map_err(io_cli(&src_path))?;
        let mut kept = String::with_capacity(text.len());
        for line in text.lines() {
            let entity = line.split('\t').next().unwrap_or("");
            if !dropped.contains(&(meta.name.as_str(), entity)) {
                kept.push_str(line);
                kept.push('\n');
            }
        }
        let dst_path = dst.join("features").join(&name);
        std::fs::write(&dst_path, kept).map_err(io_cli(&dst_path))?;
    }
    Ok(())
}

fn cmd_report(args: ReportArgs) -> Result<(), CliError> {
    let (params, _, manifest) = checkpoint::load(&resolve_checkpoint_dir(&args.model))?;

    let data_dir = match args.data_dir {
        Some(d) => d,
        None => {
            let snapshot = args.model.join("config.toml");
            let cfg = RunConfig::from_file(&snapshot).map_err(|e| {
                CliError::data(format!("cannot locate dataset: {e}; pass --data-dir"))
            })?;
            cfg.data
                .dir
                .ok_or_else(|| CliError::data("config snapshot has no data dir; pass --data-dir"))?
        }
    };
    let (kg, store) = data::load_dataset(&data_dir)?;
    if kg.n_relations() != manifest.n_relations {
        return Err(CliError::data("vocabulary mismatch between checkpoint and dataset".to_string()));
    }
    let store = store.aligned_subset(&manifest.modalities)?;

    let out_dir = args.out_dir.unwrap_or_else(|| args.model.clone());
    std::fs::create_dir_all(&out_dir).map_err(io_cli(&out_dir))?;
    let temp_path = out_dir.join("temperatures.csv");
    mmkgc::report::write_temperatures_csv(&temp_path, &params, &kg).map_err(io_cli(&temp_path))?;
    let weights_path = out_dir.join("modality_weights.csv");
    mmkgc::report::write_weight_summary_csv(&weights_path, &params, &store, &kg, args.sample)
        .map_err(io_cli(&weights_path))?;
    println!("wrote {} and {}", temp_path.display(), weights_path.display());
    Ok(())
}

fn cmd_gen_synth(args: GenSynthArgs) -> Result<(), CliError> {
    let mut modalities = Vec::new();
    for part in args.modalities.split(',').filter(|p| !p.is_empty()) {
        let (name, dim) = part
            .split_once(':')
            .ok_or_else(|| CliError::config(format!("expected name:dim, got '{part}'")))?;
        let dim: usize =
            dim.parse().map_err(|_| CliError::config(format!("bad dimension in '{part}'")))?;
        modalities.push((name.to_string(), dim));
    }
    let opts = SynthOptions {
        n_entities: args.entities,
        n_relations: args.relations,
        modalities,
        n_clusters: args.clusters,
        triples_per_entity: args.triples_per_entity,
        seed: args.seed,
    };
    // Size validation failures are argument errors here.
    let (kg, store) = data::generate_synthetic(&opts).map_err(|e| CliError::config(e.to_string()))?;
    data::write_dataset(&args.out, &kg, &store)?;
    println!(
        "generated {} entities, {} relations, {} triples ({} train / {} valid / {} test) in {}",
        kg.n_entities(),
        kg.n_relations(),
        kg.train.len() + kg.valid.len() + kg.test.len(),
        kg.train.len(),
        kg.valid.len(),
        kg.test.len(),
        args.out.display()
    );
    Ok(())
}
