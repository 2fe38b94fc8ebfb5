//! Command-line entry points: training, evaluation, augmentation preview and
//! toy-dataset generation.
//!
//! Exit codes: 0 success, 2 usage/configuration error, 3 runtime failure.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ccreid::checkpoint;
use ccreid::config::RunConfig;
use ccreid::data::toy::{generate_toy_dataset, ToyConfig};
use ccreid::data::{load_manifest, ClothingLabels, LoadedDataset, Split};
use ccreid::evaluator::{
    cmc_map, distance_matrix, format_rankings, format_report, ProtocolFilter, RetrievalMeta,
};
use ccreid::trainer::{infer_embeddings, lr_at, Trainer};
use ccreid::Error;

#[derive(Parser)]
#[command(
    name = "ccreid",
    version,
    about = "Cloth-changing person re-identification toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a run configuration.
    Train(TrainArgs),
    /// Evaluate a checkpoint under a protocol setting.
    Eval(EvalArgs),
    /// Augmentation utilities.
    Augment(AugmentArgs),
    /// Generate the procedural toy dataset.
    GenToy(GenToyArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Run configuration file (flat key = value text).
    #[arg(long)]
    config: PathBuf,
    /// Resume from a checkpoint produced by a previous run.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Output directory (overrides the config's `out`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run seed (overrides the config's `seed`).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    config: PathBuf,
    /// Checkpoint to evaluate.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Protocol: general, cloth-changing or same-clothes.
    #[arg(long)]
    setting: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AugmentArgs {
    #[command(subcommand)]
    command: AugmentCommand,
}

#[derive(Subcommand)]
enum AugmentCommand {
    /// Write side-by-side grids: raw, the five non-identity channel
    /// permutations, and the clothing-erased image.
    Preview(PreviewArgs),
}

#[derive(Args)]
struct PreviewArgs {
    #[arg(long)]
    config: PathBuf,
    /// Number of samples to preview.
    #[arg(short = 'n', long, default_value_t = 4)]
    count: usize,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct GenToyArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    ids: usize,
    #[arg(long, default_value_t = 2)]
    outfits: usize,
    #[arg(long, default_value_t = 8)]
    images: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 32)]
    width: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Augment(args) => match args.command {
            AugmentCommand::Preview(p) => cmd_augment_preview(p),
        },
        Command::GenToy(args) => cmd_gen_toy(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CmdError { code, source }) => {
            eprintln!("error: {source}");
            ExitCode::from(code)
        }
    }
}

struct CmdError {
    code: u8,
    source: Error,
}

trait Phase<T> {
    fn setup(self) -> Result<T, CmdError>;
    fn runtime(self) -> Result<T, CmdError>;
}

impl<T> Phase<T> for ccreid::Result<T> {
    /// Failures before the run starts: usage and configuration problems.
    fn setup(self) -> Result<T, CmdError> {
        self.map_err(|source| CmdError {
            code: EXIT_CONFIG,
            source,
        })
    }

    /// Failures while the run is in progress.
    fn runtime(self) -> Result<T, CmdError> {
        self.map_err(|source| CmdError {
            code: EXIT_RUNTIME,
            source,
        })
    }
}

fn load_config(path: &Path, out: Option<PathBuf>, seed: Option<u64>) -> ccreid::Result<RunConfig> {
    let mut cfg = RunConfig::from_file(path)?;
    if let Some(out) = out {
        cfg.out_dir = out;
    }
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

/// Points the config's manifests at a generated toy dataset when the preset
/// is `toy` and no training data was configured.
fn ensure_toy_data(cfg: &mut RunConfig) -> ccreid::Result<()> {
    if cfg.train_manifest.is_some() || cfg.preset != "toy" {
        return Ok(());
    }
    let dir = cfg.out_dir.join("toy-data");
    let toy_cfg = ToyConfig {
        height: cfg.input_hw.0,
        width: cfg.input_hw.1,
        seed: cfg.seed,
        ..cfg.toy.clone()
    };
    let already = dir.join("train.tsv").is_file();
    if !already {
        generate_toy_dataset(&toy_cfg, &dir)?;
        println!("generated toy dataset under {}", dir.display());
    }
    cfg.train_manifest = Some(dir.join("train.tsv"));
    cfg.query_manifest = Some(dir.join("query.tsv"));
    cfg.gallery_manifest = Some(dir.join("gallery.tsv"));
    Ok(())
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::io(path, e)
}

fn cmd_train(args: TrainArgs) -> Result<(), CmdError> {
    let mut cfg = load_config(&args.config, args.out, args.seed).setup()?;
    std::fs::create_dir_all(&cfg.out_dir)
        .map_err(|e| io_err(&cfg.out_dir, e))
        .setup()?;
    ensure_toy_data(&mut cfg).setup()?;

    let train_path = cfg
        .train_manifest
        .clone()
        .ok_or_else(|| Error::InvalidConfig {
            msg: "data.train is required (non-toy presets do not auto-generate data)".to_string(),
        })
        .setup()?;
    let clothing = ClothingLabels::new(cfg.clothing_labels.iter().copied());
    let manifest = load_manifest(&train_path, Split::Train).setup()?;
    let dataset = LoadedDataset::load(manifest, &clothing).setup()?;
    let num_identities = dataset.manifest.identity_count;

    let mut trainer = cfg.build_trainer(num_identities, dataset.len()).setup()?;
    if let Some(resume) = &args.resume {
        let meta = checkpoint::restore(resume, &mut trainer).setup()?;
        println!(
            "resumed from {} at epoch {}, step {}",
            resume.display(),
            meta.epoch,
            meta.step_in_epoch
        );
    }

    let log_path = cfg.out_dir.join("train_log.tsv");
    let fresh_log = args.resume.is_none() || !log_path.is_file();
    let mut log: Box<dyn Write> = Box::new(
        std::fs::OpenOptions::new()
            .create(true)
            .append(!fresh_log)
            .write(true)
            .truncate(fresh_log)
            .open(&log_path)
            .map_err(|e| io_err(&log_path, e))
            .setup()?,
    );
    if fresh_log {
        writeln!(log, "{}", Trainer::LOG_HEADER)
            .map_err(|e| io_err(&log_path, e))
            .setup()?;
    }

    let config_text = cfg.to_text();
    while !trainer.finished() {
        let epoch = trainer.position.epoch;
        let lr = lr_at(epoch, &trainer.schedule).runtime()?;
        let global = trainer.position.global_step(trainer.steps_per_epoch);
        let bundle = trainer.train_step(&dataset).runtime()?;
        writeln!(log, "{}", Trainer::log_line(epoch, global, lr, &bundle))
            .map_err(|e| io_err(&log_path, e))
            .runtime()?;
        let epoch_finished = trainer.position.step_in_epoch == 0;
        if epoch_finished {
            let done = trainer.position.epoch;
            if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && !trainer.finished() {
                let p = cfg.out_dir.join(format!("checkpoint_epoch_{done}.ckpt"));
                checkpoint::save(&p, &trainer, num_identities, &config_text).runtime()?;
            }
        }
    }
    let final_path = cfg.out_dir.join("checkpoint_final.ckpt");
    checkpoint::save(&final_path, &trainer, num_identities, &config_text).runtime()?;

    let accuracy = trainer.train_accuracy(&dataset).runtime()?;
    let report_path = cfg.out_dir.join("train_report.txt");
    let report = format!(
        "epochs\t{}\nsteps\t{}\ntrain_identity_accuracy\t{:.6}\nparameters\t{}\ncheckpoint\t{}\n",
        trainer.schedule.total_epochs,
        trainer.position.global_step(trainer.steps_per_epoch),
        accuracy,
        trainer.store.scalar_count(),
        final_path.display()
    );
    std::fs::write(&report_path, report)
        .map_err(|e| io_err(&report_path, e))
        .runtime()?;
    println!(
        "training complete: {} epochs, train accuracy {:.4}, checkpoint {}",
        trainer.schedule.total_epochs,
        accuracy,
        final_path.display()
    );
    Ok(())
}

fn retrieval_meta(ds: &LoadedDataset) -> Vec<RetrievalMeta> {
    ds.samples
        .iter()
        .map(|s| RetrievalMeta {
            identity: s.original_identity,
            camera: s.camera,
            clothes_id: s.clothes_id,
        })
        .collect()
}

fn cmd_eval(args: EvalArgs) -> Result<(), CmdError> {
    let mut cfg = load_config(&args.config, args.out, None).setup()?;
    let setting: ProtocolFilter = args.setting.parse().setup()?;
    std::fs::create_dir_all(&cfg.out_dir)
        .map_err(|e| io_err(&cfg.out_dir, e))
        .setup()?;
    ensure_toy_data(&mut cfg).setup()?;

    let meta = checkpoint::read_meta(&args.checkpoint).setup()?;
    let mut trainer = cfg.build_trainer(meta.num_identities, 1).setup()?;
    checkpoint::restore(&args.checkpoint, &mut trainer).setup()?;

    let clothing = ClothingLabels::new(cfg.clothing_labels.iter().copied());
    let load_split = |path: Option<&PathBuf>, split: Split| -> ccreid::Result<LoadedDataset> {
        let path = path.ok_or_else(|| Error::InvalidConfig {
            msg: format!("data.{split} manifest is required for evaluation"),
        })?;
        // masks are not needed by the raw-image inference stream
        LoadedDataset::load_with_masks(load_manifest(path, split)?, &clothing, false)
    };
    let query = load_split(cfg.query_manifest.as_ref(), Split::Query).setup()?;
    let gallery = load_split(cfg.gallery_manifest.as_ref(), Split::Gallery).setup()?;

    let q_emb = infer_embeddings(&trainer.model, &trainer.store, &query.samples).runtime()?;
    let g_emb = infer_embeddings(&trainer.model, &trainer.store, &gallery.samples).runtime()?;
    let dist = distance_matrix(&q_emb, &g_emb).runtime()?;
    let outcome = cmc_map(
        &dist,
        &retrieval_meta(&query),
        &retrieval_meta(&gallery),
        setting,
    )
    .runtime()?;

    let report = format_report(&outcome);
    let report_path = cfg.out_dir.join(format!("eval_{}.txt", setting.name()));
    std::fs::write(&report_path, &report)
        .map_err(|e| io_err(&report_path, e))
        .runtime()?;
    if cfg.dump_rankings {
        let rank_path = cfg.out_dir.join(format!("rankings_{}.tsv", setting.name()));
        std::fs::write(&rank_path, format_rankings(&outcome))
            .map_err(|e| io_err(&rank_path, e))
            .runtime()?;
    }
    println!(
        "{} rank1 {:.4} mAP {:.4} ({} queries, {} dropped) -> {}",
        setting.name(),
        outcome.rank1(),
        outcome.map,
        outcome.retained_queries,
        outcome.dropped_queries,
        report_path.display()
    );
    Ok(())
}

fn cmd_augment_preview(args: PreviewArgs) -> Result<(), CmdError> {
    let mut cfg = load_config(&args.config, args.out, args.seed).setup()?;
    std::fs::create_dir_all(&cfg.out_dir)
        .map_err(|e| io_err(&cfg.out_dir, e))
        .setup()?;
    ensure_toy_data(&mut cfg).setup()?;
    let train_path = cfg
        .train_manifest
        .clone()
        .ok_or_else(|| Error::InvalidConfig {
            msg: "data.train is required for augmentation preview".to_string(),
        })
        .setup()?;
    let clothing = ClothingLabels::new(cfg.clothing_labels.iter().copied());
    let dataset = LoadedDataset::load(load_manifest(&train_path, Split::Train).setup()?, &clothing)
        .setup()?;

    for (i, sample) in dataset.samples.iter().take(args.count).enumerate() {
        let grid = ccreid::augment::preview_grid(sample).runtime()?;
        let path = cfg.out_dir.join(format!("preview_{i:03}.png"));
        grid.save(&path)
            .map_err(|source| Error::Image {
                path: path.clone(),
                source,
            })
            .runtime()?;
    }
    println!(
        "wrote {} preview grids to {}",
        args.count.min(dataset.len()),
        cfg.out_dir.display()
    );
    Ok(())
}

fn cmd_gen_toy(args: GenToyArgs) -> Result<(), CmdError> {
    let cfg = ToyConfig {
        n_ids: args.ids,
        outfits_per_id: args.outfits,
        images_per_outfit: args.images,
        height: args.height,
        width: args.width,
        seed: args.seed,
    };
    let ds = generate_toy_dataset(&cfg, &args.out).setup()?;
    println!(
        "toy dataset: {} samples, {} identities -> {}",
        ds.all.records.len(),
        ds.all.identity_count,
        args.out.display()
    );
    Ok(())
}
