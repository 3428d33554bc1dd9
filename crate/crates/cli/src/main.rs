use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use iahash::checkpoint::{self, Checkpoint};
use iahash::config::RunConfig;
use iahash::hashcode::{encode_all, read_codes, write_codes, CodeBundle};
use iahash::index::{build_index, read_index, write_index, write_pgm};
use iahash::model::ModelKind;
use iahash::pipeline;
use iahash::synthdata::{read_dataset, read_manifest, write_dataset, Dataset};
use iahash::trainer::write_trace;
use iahash::{Error, Execution, Result};

#[derive(Parser)]
#[command(name = "iahash", version, about = "Instance-aware hashing for multi-label image retrieval")]
struct Cli {
    /// Run every stage on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Run configuration (TOML). Built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Override a config value, e.g. `--set train.iterations=500`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let cfg = match &self.config {
            Some(path) => RunConfig::load(path, &self.overrides)?,
            None => RunConfig::from_toml("", &self.overrides)?,
        };
        info!("config hash {} seed {}", cfg.hash(), cfg.seed);
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the full model.
    Train(TrainArgs),
    /// Train the flat baseline.
    TrainBaseline(TrainArgs),
    /// Encode the database and query splits.
    Encode {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out_codes: PathBuf,
    },
    /// Build the grouped index from codes.
    Index {
        #[arg(long)]
        codes: PathBuf,
        /// Keep only database-split codes of this dataset.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = iahash::index::DEFAULT_THRESHOLD)]
        threshold: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run category-aware queries against an index.
    Query {
        /// Encode the query split with this model.
        #[arg(long, conflicts_with = "codes", required_unless_present = "codes")]
        ckpt: Option<PathBuf>,
        /// Use precomputed codes.
        #[arg(long)]
        codes: Option<PathBuf>,
        /// Dataset whose query split is used; required with `--ckpt`.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        index: PathBuf,
        /// Query-side threshold; defaults to the index threshold.
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long, default_value_t = iahash::index::DEFAULT_TOP_K)]
        topk: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute the metric report from codes and ground truth.
    Evaluate {
        #[arg(long)]
        codes: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Ranking depth for NDCG and ACG.
        #[arg(long, default_value_t = 100)]
        depth: usize,
        /// Index threshold for per-category MAP.
        #[arg(long, default_value_t = iahash::index::DEFAULT_THRESHOLD)]
        threshold: f64,
    },
    /// Write a saliency map as a binary PGM.
    Saliency {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        image_id: u64,
        #[arg(long)]
        category: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Loss trace output.
    #[arg(long)]
    trace: Option<PathBuf>,
}

fn load_data(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    info!("dataset {} config hash {} seed {}", dir.display(), manifest.config_hash, manifest.seed);
    read_dataset(dir)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let ckpt = checkpoint::load(path)?;
    info!(
        "checkpoint {} ({:?}) config hash {}",
        path.display(),
        ckpt.params.kind,
        hex_of(&ckpt.config_hash)
    );
    Ok(ckpt)
}

fn hex_of(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn train(args: &TrainArgs, kind: ModelKind, exec: Execution) -> Result<()> {
    let cfg = args.cfg.load()?;
    let data_dir = args.data.clone().unwrap_or_else(|| cfg.paths.data.clone());
    let out = args.out.clone().unwrap_or_else(|| cfg.paths.checkpoint.clone());
    let data = load_data(&data_dir)?;
    let (ckpt, trace) = pipeline::train_model(&cfg, &data.train, kind, exec)?;
    pipeline::save_checkpoint(&out, &ckpt)?;
    if let Some(path) = &args.trace {
        pipeline::ensure_parent(path)?;
        write_trace(path, &trace)?;
    }
    if let Some(last) = trace.last() {
        info!("final loss {:.4} after {} iterations", last.total, trace.len());
    }
    info!("wrote {} (sha256 {})", out.display(), checkpoint::checkpoint_hash(&ckpt));
    Ok(())
}

/// Codes from `codes`, restricted to the query split when `data` is given.
fn query_bundles(codes: &Path, data: Option<&Path>) -> Result<Vec<CodeBundle>> {
    let all = read_codes(codes)?;
    match data {
        Some(dir) => pipeline::query_codes(&all, &load_data(dir)?),
        None => Ok(all),
    }
}

fn run(cli: Cli) -> Result<()> {
    let exec = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    };
    match cli.command {
        Command::GenData { cfg, out } => {
            let cfg = cfg.load()?;
            let out = out.unwrap_or_else(|| cfg.paths.data.clone());
            let (data, manifest) = pipeline::make_dataset(&cfg, exec)?;
            write_dataset(&out, &data, &manifest)?;
            info!("wrote {} scenes to {}", data.train.len() + data.database.len() + data.query.len(), out.display());
        }
        Command::Train(args) => train(&args, ModelKind::Full, exec)?,
        Command::TrainBaseline(args) => train(&args, ModelKind::FlatBaseline, exec)?,
        Command::Encode { ckpt, data, out_codes } => {
            let ckpt = load_checkpoint(&ckpt)?;
            let data = load_data(&data)?;
            let codes = pipeline::encode_dataset(&ckpt, &data, exec)?;
            pipeline::ensure_parent(&out_codes)?;
            write_codes(&out_codes, &codes)?;
            info!("wrote {} codes to {}", codes.len(), out_codes.display());
        }
        Command::Index {
            codes,
            data,
            threshold,
            out,
        } => {
            let mut bundles = read_codes(&codes)?;
            if let Some(dir) = data {
                bundles = pipeline::database_codes(&bundles, &load_data(&dir)?)?;
            }
            let idx = build_index(&bundles, threshold)?;
            pipeline::ensure_parent(&out)?;
            write_index(&out, &idx)?;
            info!("indexed {} images, table sizes {:?}", bundles.len(), idx.counts());
        }
        Command::Query {
            ckpt,
            codes,
            data,
            index,
            threshold,
            topk,
            out,
        } => {
            let idx = read_index(&index)?;
            let queries = match (ckpt, codes) {
                (Some(ckpt), _) => {
                    let dir = data.ok_or_else(|| Error::Invalid("--ckpt needs --data".into()))?;
                    let model = load_checkpoint(&ckpt)?;
                    encode_all(&load_data(&dir)?.query, &model.params, exec)?
                }
                (None, Some(codes)) => query_bundles(&codes, data.as_deref())?,
                (None, None) => return Err(Error::Invalid("need --ckpt or --codes".into())),
            };
            let threshold = threshold.unwrap_or(idx.threshold);
            if topk == 0 {
                return Err(Error::Invalid("--topk must be positive".into()));
            }
            let results = pipeline::run_queries(&queries, &idx, threshold, topk, exec)?;
            pipeline::ensure_parent(&out)?;
            pipeline::write_results(&out, &results)?;
            let hits: usize = results.iter().flat_map(|(_, r)| &r.groups).map(|(_, l)| l.len()).sum();
            info!("{} queries, {hits} hits", results.len());
        }
        Command::Evaluate {
            codes,
            data,
            report,
            depth,
            threshold,
        } => {
            let cfg = RunConfig::from_toml(
                "",
                &[format!("retrieval.eval_depth={depth}"), format!("retrieval.threshold={threshold}")],
            )?;
            let bundles = read_codes(&codes)?;
            let data = load_data(&data)?;
            let rep = pipeline::evaluate_codes(&bundles, &data, &cfg, exec)?;
            pipeline::ensure_parent(&report)?;
            rep.write(&report)?;
            for line in &rep.lines {
                info!("{} ({} bits): {:.4}", line.metric, line.bits, line.value);
            }
        }
        Command::Saliency {
            ckpt,
            data,
            image_id,
            category,
            out,
        } => {
            let ckpt = load_checkpoint(&ckpt)?;
            let data = load_data(&data)?;
            let record = data
                .find(image_id)
                .ok_or_else(|| Error::Invalid(format!("no image with id {image_id}")))?;
            let map = pipeline::saliency_for(&ckpt, record, category)?;
            pipeline::ensure_parent(&out)?;
            write_pgm(&out, record.scene.width, record.scene.height, &map)?;
            info!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
