//! `segclr` command line: dataset generation, training, evaluation, ranking
//! and reports, all driven by one TOML experiment file.
//!
//! Exit codes are 0 on success, 1 for invalid input and 2 for runtime
//! failures. Errors are printed to stderr as one `error kind=... message=...`
//! line.

mod manifest;
mod report;

pub use manifest::{deterministic_mode, sha256_hex, Artifact, RunManifest, CONFIG_NAME, MANIFEST_NAME};
pub use report::{cmd_rank, cmd_report, RANK_FILE, REPORT_FILE, SIGNIFICANCE_FILE};

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::evaluation::{evaluate_model, write_records, MetricRecord};
use crate::model::{load_checkpoint, save_checkpoint};
use crate::synthdata::{generate_domain, save_dataset, split_dataset};
use crate::training::{train, Datasets, ExperimentConfig, SplitName};

#[derive(Debug, Parser)]
#[command(name = "segclr", version, about = "Joint supervised and contrastive segmentation experiments")]
pub struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate one dataset directory per domain of the config.
    Generate(GenerateArgs),
    /// Train every model of the config for every seed.
    Train(TrainArgs),
    /// Evaluate trained models slice-wise and class-wise into a CSV.
    Evaluate(EvaluateArgs),
    /// Rank models and test pairwise differences from metric CSVs.
    Rank(RankArgs),
    /// Relative-metric tables and plots against a baseline model.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated seed list replacing the config's.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Train only these model ids.
    #[arg(long, value_delimiter = ',')]
    pub models: Option<Vec<String>>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',')]
    pub models: Option<Vec<String>>,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for SplitName {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => SplitName::Train,
            SplitArg::Val => SplitName::Val,
            SplitArg::Test => SplitName::Test,
        }
    }
}

#[derive(Debug, Args)]
pub struct RankArgs {
    #[arg(long, num_args = 1.., required = true)]
    pub metrics: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long, num_args = 1.., required = true)]
    pub metrics: Vec<PathBuf>,
    #[arg(long)]
    pub baseline: String,
    #[arg(long)]
    pub out: PathBuf,
    /// Models to report; defaults to every non-baseline model in the CSVs.
    #[arg(long, value_delimiter = ',')]
    pub models: Option<Vec<String>>,
    #[arg(long)]
    pub force: bool,
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    if e.is_validation() {
        1
    } else {
        2
    }
}

/// `error kind=<kind> [field=<field>] message="<escaped>"`.
pub fn error_line(e: &Error) -> String {
    let mut inner = e;
    while let Error::Seed { source, .. } = inner {
        inner = source;
    }
    let field = match inner {
        Error::Validation { field, .. } => format!(" field={field}"),
        _ => String::new(),
    };
    let seed = match e {
        Error::Seed { seed, .. } => format!(" seed={seed}"),
        _ => String::new(),
    };
    let msg = serde_json::to_string(&e.to_string()).expect("strings serialize");
    format!("error kind={}{seed}{field} message={msg}", e.kind())
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Generate(a) => {
            let dirs = cmd_generate(&a.config, &a.out, a.force)?;
            for d in dirs {
                println!("{}", d.display());
            }
        }
        Command::Train(a) => {
            let m = cmd_train(&a)?;
            println!("{}", a.out.join(MANIFEST_NAME).display());
            log::info!("trained {} artifacts", m.artifacts.len());
        }
        Command::Evaluate(a) => {
            let n = cmd_evaluate(&a.manifest, &a.data, &a.out, a.models.as_deref(), a.split.into(), a.force)?;
            println!("{} rows -> {}", n, a.out.display());
        }
        Command::Rank(a) => {
            let table = cmd_rank(&a.metrics, &a.out, a.force)?;
            for e in &table.entries {
                println!("{}\t{:.3}\t(dice {:.3}, uvd {:.3})", e.model_id, e.rank, e.dice_rank, e.uvd_rank);
            }
        }
        Command::Report(a) => {
            for f in cmd_report(&a.metrics, &a.baseline, a.models.as_deref(), &a.out, a.force)? {
                println!("{}", f.display());
            }
        }
    }
    Ok(())
}

fn refuse_overwrite(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(Error::validation(
            "--force",
            format!("{} exists; pass --force to overwrite", path.display()),
        ));
    }
    Ok(())
}

/// One dataset directory `<out>/<domain_id>` per domain, split with the
/// config's fractions and `data_seed`.
pub fn cmd_generate(config_path: &Path, out: &Path, force: bool) -> Result<Vec<PathBuf>> {
    let config = ExperimentConfig::load(config_path)?;
    if config.domains.is_empty() {
        return Err(Error::validation("domains", "the config declares no domains to generate"));
    }
    let mut dirs = Vec::new();
    for spec in &config.domains {
        let dir = out.join(&spec.domain_id);
        refuse_overwrite(&dir, force)?;
        let volumes = generate_domain(spec, config.data_seed)?;
        let split = split_dataset(volumes, config.split, config.data_seed)?;
        save_dataset(&split, &dir)?;
        dirs.push(dir);
    }
    Ok(dirs)
}

/// Trains each selected model for each seed and writes checkpoints,
/// histories, the canonical config and the run manifest under `out`.
pub fn cmd_train(args: &TrainArgs) -> Result<RunManifest> {
    let mut config = ExperimentConfig::load(&args.config)?;
    if let Some(seeds) = &args.seeds {
        config.seeds = seeds.clone();
        config.validate()?;
    }
    let mut models = config.resolve_variants()?;
    if let Some(wanted) = &args.models {
        let known: BTreeSet<&str> = models.iter().map(|(m, _)| m.as_str()).collect();
        if let Some(w) = wanted.iter().find(|w| !known.contains(w.as_str())) {
            return Err(Error::validation(
                "--models",
                format!("unknown model id `{w}` (known: {})", known.into_iter().collect::<Vec<_>>().join(", ")),
            ));
        }
        models.retain(|(m, _)| wanted.contains(m));
    }
    refuse_overwrite(&args.out.join(MANIFEST_NAME), args.force)?;
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let started_at = manifest::now_unix();

    let canonical = config.to_toml_string();
    let config_path = args.out.join(CONFIG_NAME);
    std::fs::write(&config_path, &canonical).map_err(|e| Error::io(&config_path, e))?;

    let datasets = Datasets::from_dir(&args.data)?;
    let mut artifacts = Vec::new();
    for (model_id, cfg) in &models {
        for &seed in &config.seeds {
            log::info!("training {model_id} seed {seed}");
            let outcome = train(cfg, &datasets, seed).map_err(|e| Error::Seed {
                seed,
                source: Box::new(e),
            })?;
            let rel = PathBuf::from(model_id).join(format!("seed_{seed}"));
            let dir = args.out.join(&rel);
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let checkpoint = rel.join("model.ckpt");
            let history = rel.join("history.jsonl");
            save_checkpoint(&outcome.model, &args.out.join(&checkpoint))?;
            outcome.history.write_jsonl(&args.out.join(&history))?;
            artifacts.push(Artifact {
                model_id: model_id.clone(),
                seed,
                checkpoint,
                history,
                best_epoch: outcome.history.best_epoch,
                best_val_dice: outcome.history.best_val_dice,
            });
        }
    }

    let data_access = datasets.access_log();
    let targets: BTreeSet<&str> = models.iter().flat_map(|(_, c)| c.target_domains.iter().map(|s| s.as_str())).collect();
    let target_file_reads = data_access
        .iter()
        .filter(|(d, _)| targets.contains(d.as_str()))
        .map(|(_, a)| a.files_read)
        .sum();
    let manifest = RunManifest {
        framework_version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: sha256_hex(canonical.as_bytes()),
        config: PathBuf::from(CONFIG_NAME),
        experiment: config.name.clone(),
        seeds: config.seeds.clone(),
        models: models.iter().map(|(m, _)| m.clone()).collect(),
        artifacts,
        data_access,
        target_file_reads,
        started_at,
        finished_at: manifest::now_unix(),
    };
    manifest.write(&args.out)?;
    Ok(manifest)
}

/// Evaluates the manifest's checkpoints on `split` of each model's evaluated
/// domains. Returns the number of CSV rows.
pub fn cmd_evaluate(
    manifest_path: &Path,
    data: &Path,
    out_csv: &Path,
    models: Option<&[String]>,
    split: SplitName,
    force: bool,
) -> Result<usize> {
    let manifest = RunManifest::read(manifest_path)?;
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let config_path = root.join(&manifest.config);
    let text = std::fs::read_to_string(&config_path).map_err(|e| Error::io(&config_path, e))?;
    if sha256_hex(text.as_bytes()) != manifest.config_hash {
        return Err(Error::format(&config_path, "config does not match the manifest's hash"));
    }
    let config = ExperimentConfig::from_toml_str(&text)?;
    let variants = config.resolve_variants()?;
    if let Some(wanted) = models {
        if wanted.is_empty() {
            return Err(Error::validation("--models", "empty model list"));
        }
        if let Some(w) = wanted.iter().find(|w| !manifest.models.contains(w)) {
            return Err(Error::validation(
                "--models",
                format!("unknown model id `{w}` (known: {})", manifest.models.join(", ")),
            ));
        }
    }
    refuse_overwrite(out_csv, force)?;
    let datasets = Datasets::from_dir(data)?;
    let mut records: Vec<MetricRecord> = Vec::new();
    for a in &manifest.artifacts {
        if models.is_some_and(|m| !m.contains(&a.model_id)) {
            continue;
        }
        let cfg = &variants
            .iter()
            .find(|(m, _)| *m == a.model_id)
            .ok_or_else(|| Error::Missing(format!("model `{}` in the manifest's config", a.model_id)))?
            .1;
        let model = load_checkpoint(&root.join(&a.checkpoint))?;
        for domain in cfg.evaluated_domains() {
            let volumes = datasets.split(&domain, split)?;
            records.extend(evaluate_model(&model, volumes, cfg.threshold, &a.model_id, a.seed)?);
        }
    }
    if let Some(parent) = out_csv.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    write_records(out_csv, &records)?;
    Ok(records.len())
}
