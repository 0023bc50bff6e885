//! Command-line interface: argument definitions and subcommand drivers.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use log::info;

use crate::checkpoint::{embeddings_archive, load_checkpoint, save_checkpoint};
use crate::data::{
    generate_synthetic, load_sample, load_samples, parse_sample_name, records_in, scan_dataset, LoadedSample,
    SampleRecord, Split, SynthSpec,
};
use crate::evaluation::{
    dump_attention, embed_samples, evaluate, render_similarity, similarity_matrix, write_cmc_csv, write_ranked_lists,
    AttentionStage, EvalProtocol,
};
use crate::exec::Exec;
use crate::semantic_encoder::LabelMapping;
use crate::training::{write_loss_trace, TrainConfig, TrainSet, Trainer};

#[derive(Debug, Parser)]
#[command(name = "savs", version, about = "Cloth-changing person re-identification")]
pub struct Cli {
    /// Run per-sample work on one thread.
    #[arg(long, global = true)]
    pub sequential: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the synthetic dataset.
    GenData(GenDataArgs),
    /// Train a model and write a checkpoint plus loss trace.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the query/gallery splits.
    Eval(EvalArgs),
    /// Export test-path embeddings of a directory of images.
    Encode(EncodeArgs),
    /// Render an attention heat map for one image.
    DumpAttention(DumpAttentionArgs),
    /// Render the cosine similarity matrix of a set of images.
    Similarity(SimilarityArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub num_ids: u32,
    #[arg(long, default_value_t = 2)]
    pub clothes_per_id: u32,
    #[arg(long, default_value_t = 6)]
    pub images_per_combination: u32,
    #[arg(long, default_value_t = 64)]
    pub height: usize,
    #[arg(long, default_value_t = 64)]
    pub width: usize,
    #[arg(long, default_value_t = 0.75)]
    pub confound_strength: f64,
    #[arg(long, default_value_t = 0.03)]
    pub noise: f32,
    #[arg(long, default_value_t = 0.8)]
    pub train_fraction: f64,
    #[arg(long, env = "SAVS_SEED", default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// `key = value` config file; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out_checkpoint: PathBuf,
    /// Loss trace CSV (default: `loss_trace.csv` next to the checkpoint).
    #[arg(long)]
    pub loss_trace: Option<PathBuf>,
    /// baseline | hsa | hsa_vcs
    #[arg(long)]
    pub ablation: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub images_per_id: Option<usize>,
    #[arg(long)]
    pub lambda_id: Option<f64>,
    #[arg(long)]
    pub lambda_cir: Option<f64>,
    #[arg(long)]
    pub lambda_sem: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub margin: Option<f64>,
    /// l2 | mse
    #[arg(long)]
    pub semantic_loss: Option<String>,
    /// Comma-separated canonical classes replaced in the shielded image.
    #[arg(long)]
    pub shield_classes: Option<String>,
    /// Any config key, as `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Label mapping file for masks stored in a raw label space, or
    /// `parsing20` for the built-in 20-label parser mapping.
    #[arg(long)]
    pub mapping: Option<PathBuf>,
    #[arg(long, env = "SAVS_SEED")]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// standard | cloth-changing
    #[arg(long, default_value = "cloth-changing")]
    pub protocol: String,
    /// Metrics JSON; the CMC curve and ranked lists go next to it.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub top: usize,
    #[arg(long)]
    pub mapping: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EncodeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// A directory with `images/` and `masks/`, or a dataset root.
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub mapping: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DumpAttentionArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub mask: PathBuf,
    /// hsa | hsa_vcs
    #[arg(long, default_value = "hsa")]
    pub stage: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub mapping: Option<PathBuf>,
    #[arg(long, env = "SAVS_SEED", default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct SimilarityArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// A directory with `images/` and `masks/`, or a dataset root.
    #[arg(long)]
    pub images: PathBuf,
    /// Heat map PNG.
    #[arg(long)]
    pub out: PathBuf,
    /// Optional CSV of the matrix.
    #[arg(long)]
    pub matrix_csv: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    pub cell: usize,
    #[arg(long)]
    pub mapping: Option<PathBuf>,
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let exec = if cli.sequential {
        Exec::Sequential
    } else {
        Exec::default()
    };
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a, exec),
        Command::Eval(a) => eval(a, exec),
        Command::Encode(a) => encode(a, exec),
        Command::DumpAttention(a) => dump(a),
        Command::Similarity(a) => similarity(a, exec),
    }
}

fn mapping(path: &Option<PathBuf>) -> anyhow::Result<Option<LabelMapping>> {
    Ok(match path {
        Some(p) if p.as_os_str() == "parsing20" && !p.exists() => Some(LabelMapping::parsing20()),
        Some(p) => Some(LabelMapping::load(p)?),
        None => None,
    })
}

fn gen_data(a: GenDataArgs) -> anyhow::Result<()> {
    let spec = SynthSpec {
        num_ids: a.num_ids,
        clothes_per_id: a.clothes_per_id,
        images_per_combination: a.images_per_combination,
        height: a.height,
        width: a.width,
        seed: a.seed,
        confound_strength: a.confound_strength,
        noise: a.noise,
        train_fraction: a.train_fraction,
    };
    let m = generate_synthetic(&spec, &a.out)?;
    info!(
        "wrote {} train ids and {} held-out ids to {}",
        m.train_ids.len(),
        m.held_out_ids.len(),
        a.out.display()
    );
    Ok(())
}

/// Builds the training config from file, flags and `--set` pairs, in that
/// order of precedence (later wins).
pub fn train_config(a: &TrainArgs) -> anyhow::Result<TrainConfig> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    let flags: [(&str, Option<String>); 14] = [
        ("ablation", a.ablation.clone()),
        ("epochs", a.epochs.map(|v| v.to_string())),
        ("lr0", a.lr.map(|v| v.to_string())),
        ("momentum", a.momentum.map(|v| v.to_string())),
        ("weight_decay", a.weight_decay.map(|v| v.to_string())),
        ("batch_size", a.batch_size.map(|v| v.to_string())),
        ("images_per_id", a.images_per_id.map(|v| v.to_string())),
        ("lambda_id", a.lambda_id.map(|v| v.to_string())),
        ("lambda_cir", a.lambda_cir.map(|v| v.to_string())),
        ("lambda_sem", a.lambda_sem.map(|v| v.to_string())),
        ("gamma", a.gamma.map(|v| v.to_string())),
        ("margin", a.margin.map(|v| v.to_string())),
        ("semantic_loss", a.semantic_loss.clone()),
        ("shield_classes", a.shield_classes.clone()),
    ];
    for (key, value) in flags {
        if let Some(v) = value {
            cfg.set(key, &v)
                .with_context(|| format!("--{}", key.replace('_', "-")))?;
        }
    }
    for pair in &a.set {
        cfg.set_pair(pair).with_context(|| format!("--set {pair}"))?;
    }
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train(a: TrainArgs, exec: Exec) -> anyhow::Result<()> {
    let cfg = train_config(&a)?;
    let mapping = mapping(&a.mapping)?;
    let records = records_in(&scan_dataset(&a.data)?, Split::Train);
    if records.is_empty() {
        bail!("no training images under {}", a.data.display());
    }
    let samples = load_samples(&records, cfg.input_dims(), mapping.as_ref(), exec)?;
    let set = TrainSet::new(samples)?;
    info!(
        "training `{}` on {} images of {} ids",
        cfg.ablation,
        records.len(),
        set.num_classes()
    );
    let out_dir = a
        .out_checkpoint
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."))
        .to_path_buf();
    fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let mut trainer = Trainer::new(cfg.clone(), set.num_classes(), exec)?;
    trainer.set_dump_dir(&out_dir);
    let trace = trainer.train(&set, |_| {})?;
    save_checkpoint(&a.out_checkpoint, trainer.model(), &cfg)?;
    let trace_path = a.loss_trace.unwrap_or_else(|| out_dir.join("loss_trace.csv"));
    write_loss_trace(&trace_path, &trace)?;
    info!(
        "checkpoint {}, loss trace {}",
        a.out_checkpoint.display(),
        trace_path.display()
    );
    Ok(())
}

fn eval(a: EvalArgs, exec: Exec) -> anyhow::Result<()> {
    let protocol: EvalProtocol = a.protocol.parse()?;
    let (model, cfg) = load_checkpoint(&a.checkpoint)?;
    let mapping = mapping(&a.mapping)?;
    let records = scan_dataset(&a.data)?;
    let load = |split| -> anyhow::Result<Vec<LoadedSample>> {
        let recs = records_in(&records, split);
        if recs.is_empty() {
            bail!("no {split} images under {}", a.data.display());
        }
        Ok(load_samples(&recs, cfg.input_dims(), mapping.as_ref(), exec)?)
    };
    let queries = load(Split::Query)?;
    let gallery = load(Split::Gallery)?;
    let result = evaluate(&model, &queries, &gallery, protocol, exec)?;
    let r = &result.report;
    fs::write(&a.out, r.to_json()).with_context(|| format!("writing {}", a.out.display()))?;
    write_cmc_csv(&a.out.with_extension("cmc.csv"), r)?;
    write_ranked_lists(&a.out.with_extension("ranked.csv"), &result, a.top)?;
    info!(
        "{protocol}: rank-1 {:.4}  mAP {:.4}  ({} queries, {} skipped)",
        r.rank1, r.map, r.num_queries, r.num_skipped
    );
    Ok(())
}

/// Image/mask pairs of a split directory or of every split of a dataset.
fn image_set(dir: &Path) -> anyhow::Result<Vec<SampleRecord>> {
    let images = dir.join("images");
    if !images.is_dir() {
        let records = scan_dataset(dir)?;
        if records.is_empty() {
            bail!("no images under {}", dir.display());
        }
        return Ok(records);
    }
    let mut names: Vec<String> = fs::read_dir(&images)
        .with_context(|| format!("listing {}", images.display()))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".png"))
        .collect();
    names.sort();
    if names.is_empty() {
        bail!("no images under {}", images.display());
    }
    Ok(names
        .into_iter()
        .enumerate()
        .map(|(i, name)| {
            let (person_id, clothing_id, seq) = parse_sample_name(&name).unwrap_or((0, 0, i as u32));
            SampleRecord {
                split: Split::Query,
                person_id,
                clothing_id,
                seq,
                mask_path: dir.join("masks").join(&name),
                image_path: images.join(name),
            }
        })
        .collect())
}

fn encode(a: EncodeArgs, exec: Exec) -> anyhow::Result<()> {
    let (model, cfg) = load_checkpoint(&a.checkpoint)?;
    let mapping = mapping(&a.mapping)?;
    let records = image_set(&a.images)?;
    let samples = load_samples(&records, cfg.input_dims(), mapping.as_ref(), exec)?;
    let emb = embed_samples(&model, &samples, exec)?;
    let rows: Vec<(String, Vec<f64>)> = records
        .iter()
        .map(|r| r.image_path.display().to_string())
        .zip(emb)
        .collect();
    embeddings_archive(&rows).save(&a.out)?;
    info!("wrote {} embeddings to {}", rows.len(), a.out.display());
    Ok(())
}

fn dump(a: DumpAttentionArgs) -> anyhow::Result<()> {
    let stage: AttentionStage = a.stage.parse()?;
    let (model, cfg) = load_checkpoint(&a.checkpoint)?;
    let mapping = mapping(&a.mapping)?;
    let record = SampleRecord {
        split: Split::Query,
        person_id: 0,
        clothing_id: 0,
        seq: 0,
        image_path: a.image.clone(),
        mask_path: a.mask.clone(),
    };
    let sample = load_sample(&record, cfg.input_dims(), mapping.as_ref())?;
    let map = dump_attention(&model, &sample, stage, &cfg.shield_classes, a.seed)?;
    map.save_png(&a.out)?;
    Ok(())
}

fn similarity(a: SimilarityArgs, exec: Exec) -> anyhow::Result<()> {
    let (model, cfg) = load_checkpoint(&a.checkpoint)?;
    let mapping = mapping(&a.mapping)?;
    let records = image_set(&a.images)?;
    let samples = load_samples(&records, cfg.input_dims(), mapping.as_ref(), exec)?;
    let s = similarity_matrix(&embed_samples(&model, &samples, exec)?)?;
    let img = render_similarity(&s, a.cell);
    img.save(&a.out)
        .with_context(|| format!("writing {}", a.out.display()))?;
    if let Some(path) = &a.matrix_csv {
        let mut text = String::new();
        for row in &s {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
            text.push_str(&cells.join(","));
            text.push('\n');
        }
        fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}
