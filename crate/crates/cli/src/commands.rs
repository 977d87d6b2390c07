use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use chain_core::affinity::{cluster_video_frames, APConfig};
use chain_core::augment::{center_sample, eval_clip};
use chain_core::corpus::{generate_synthetic_corpus, load_videos, Background, SynthConfig};
use chain_core::encoder::{forward, ClipBatch};
use chain_core::experiment::{run_ablation, summarize, ABLATION_GRID};
use chain_core::extract::{extract_corpus, ExtractorConfig};
use chain_core::retrieval::{
    encode_corpus, map_at_k, pr_curve, write_metrics_csv, write_pr_csv, CodeBook, MetricRow,
};
use chain_core::{
    Checkpoint, FrameEncoderKind, LoadedVideo, Manifest, Split, TrainConfig, Trainer, VideoData,
};

use crate::plot;

/// Error in how the tool was invoked (exit code 2).
#[derive(Debug)]
pub struct UsageError {
    pub kind: &'static str,
    pub msg: String,
}

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.msg)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError {
        kind: "usage",
        msg: msg.into(),
    }
    .into()
}

#[derive(Parser, Debug)]
#[command(
    name = "chain",
    version,
    about = "Self-supervised video hashing toolkit"
)]
pub struct Cli {
    /// Worker threads for loading, clustering and ranking (defaults to all cores).
    #[arg(long, env = "CHAIN_NUM_WORKERS", global = true)]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render a synthetic labeled video corpus (frame archives + manifest).
    Synth(SynthArgs),
    /// Turn a frame-archive corpus into 128-D frame features with a frozen random CNN.
    Extract(ExtractArgs),
    /// Train an encoder on a corpus.
    Train(TrainArgs),
    /// Encode a corpus into a binary code file.
    Encode(EncodeArgs),
    /// Score mAP@K and the precision-recall curve of query codes against database codes.
    Eval(EvalArgs),
    /// Train the task-toggle grid {CL, CL+FOV, CL+SCR, CL+FOV+SCR} over several seeds.
    Ablate(AblateArgs),
    /// Render PR-curve and mAP CSV files as SVG charts.
    Plot(PlotArgs),
    /// Print the scene clusters found in one video's evaluation clip.
    Cluster(ClusterArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 200)]
    pub videos: usize,
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    /// Frames per video (L).
    #[arg(long, default_value_t = 32)]
    pub frames: usize,
    /// Background swaps per video.
    #[arg(long, default_value_t = 1)]
    pub scene_changes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Split recorded in the manifest (train, retrieval, query).
    #[arg(long, default_value = "train")]
    pub split: Split,
    /// Prefix of the generated video ids.
    #[arg(long, default_value = "v")]
    pub id_prefix: String,
    /// Plain black background instead of textured scenes.
    #[arg(long)]
    pub black_background: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ExtractArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Feature width D.
    #[arg(long, default_value_t = 128)]
    pub dim: usize,
    /// Keep raw CNN activations instead of standardizing each dimension.
    #[arg(long)]
    pub no_standardize: bool,
    #[arg(long)]
    pub out: PathBuf,
}

/// Overrides applied on top of the config file.
#[derive(Args, Debug, Default)]
pub struct TrainOverrides {
    /// TOML training config; flags below take precedence over its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Code length K.
    #[arg(long)]
    pub bits: Option<usize>,
    /// Frames per clip T.
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Base learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Drop the frame order term.
    #[arg(long)]
    pub disable_order: bool,
    /// Drop the scene prototype term.
    #[arg(long)]
    pub disable_scene: bool,
    /// No crop/jitter/grayscale (or feature noise in feature mode).
    #[arg(long)]
    pub disable_spatial_aug: bool,
    /// Mid-segment frames instead of random segment sampling.
    #[arg(long)]
    pub disable_temporal_aug: bool,
}

impl TrainOverrides {
    pub fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::load(p)?,
            None => TrainConfig::default(),
        };
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.bits {
            cfg.encoder.code_bits = v;
        }
        if let Some(v) = self.frames {
            cfg.encoder.clip_length = v;
        }
        if let Some(v) = self.batch {
            cfg.batch_size = v;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.lr {
            cfg.base_lr = v;
            cfg.min_lr = cfg.min_lr.min(v);
        }
        if self.disable_order {
            cfg.loss.tasks.order = false;
        }
        if self.disable_scene {
            cfg.loss.tasks.scene = false;
        }
        if self.disable_spatial_aug {
            cfg.augment.spatial = false;
        }
        if self.disable_temporal_aug {
            cfg.augment.temporal = false;
        }
        cfg.validate()?;
        log::info!("effective config:\n{}", cfg.to_toml_string());
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[command(flatten)]
    pub overrides: TrainOverrides,
    /// Continue from a checkpoint (its config is used; --epochs may extend it).
    #[arg(long, conflicts_with = "config")]
    pub resume: Option<PathBuf>,
    /// Output directory for checkpoints, the step log and the effective config.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EncodeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Only encode records of this split.
    #[arg(long)]
    pub split: Option<Split>,
    /// Output code file (.chnb).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Database code file.
    #[arg(long)]
    pub codes: PathBuf,
    /// Query code file (defaults to the database, with self matches excluded).
    #[arg(long)]
    pub queries: Option<PathBuf>,
    /// Cutoffs for mAP@K; repeatable.
    #[arg(long = "k", default_values_t = [5usize])]
    pub k: Vec<usize>,
    /// Directory for metrics.csv and pr.csv.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[command(flatten)]
    pub overrides: TrainOverrides,
    /// Comma-separated training seeds.
    #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2])]
    pub seeds: Vec<u64>,
    #[arg(long = "k", default_value_t = 5)]
    pub k: usize,
    /// Output directory for ablation.csv and ablation_summary.csv.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct PlotArgs {
    /// PR curve CSVs (radius,precision,recall); several are overlaid.
    #[arg(long)]
    pub pr: Vec<PathBuf>,
    /// Metric CSVs (metric,K,value) rendered as mAP bars.
    #[arg(long)]
    pub metrics: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ClusterArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Video id to cluster.
    #[arg(long)]
    pub id: String,
    /// Cluster the encoder's frame representations instead of the stored data.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Clip length (T) when no checkpoint is given.
    #[arg(long, default_value_t = 8)]
    pub frames: usize,
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(usage("CHAIN_NUM_WORKERS must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring worker pool")?;
    }
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Extract(a) => extract(a),
        Command::Train(a) => train(a),
        Command::Encode(a) => encode(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
        Command::Plot(a) => plot_cmd(a),
        Command::Cluster(a) => cluster(a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut cfg = SynthConfig::new(a.videos, a.classes, a.frames, a.scene_changes, a.seed);
    cfg.split = a.split;
    cfg.id_prefix = a.id_prefix;
    if a.black_background {
        cfg.background = Background::Black;
    }
    let manifest = generate_synthetic_corpus(&cfg, &a.out)?;
    println!(
        "wrote {} videos to {}",
        manifest.len(),
        a.out.join("manifest.jsonl").display()
    );
    Ok(())
}

fn extract(a: ExtractArgs) -> Result<()> {
    let manifest = Manifest::load(&a.manifest)?;
    let cfg = ExtractorConfig {
        seed: a.seed,
        feature_dim: a.dim,
        standardize: !a.no_standardize,
        ..ExtractorConfig::default()
    };
    let out = extract_corpus(&manifest, &cfg, &a.out)?;
    println!(
        "wrote {} feature files to {}",
        out.len(),
        a.out.join("manifest.jsonl").display()
    );
    Ok(())
}

/// Loads the videos of `manifest` (optionally one split) and checks that
/// their modality matches the encoder configuration.
fn load_for(
    manifest_path: &Path,
    split: Option<Split>,
    cfg: &chain_core::EncoderConfig,
) -> Result<Vec<LoadedVideo>> {
    let mut manifest = Manifest::load(manifest_path)?;
    if let Some(s) = split {
        manifest = Manifest::new(
            manifest
                .records
                .into_iter()
                .filter(|r| r.split == s)
                .collect(),
        )?;
    }
    if manifest.is_empty() {
        return Err(usage(format!(
            "{} has no matching records",
            manifest_path.display()
        )));
    }
    let videos = load_videos(&manifest, cfg.clip_length)?;
    let feature_mode = matches!(cfg.frame_encoder, FrameEncoderKind::Identity);
    for v in &videos {
        match (&v.data, feature_mode) {
            (VideoData::Features(f), true) if f.ncols() != cfg.frame_dim => {
                return Err(usage(format!(
                    "{} has {}-D features but the encoder expects {}",
                    v.record.id,
                    f.ncols(),
                    cfg.frame_dim
                )))
            }
            (VideoData::Frames(_), true) => {
                return Err(usage(format!(
                    "{} stores raw frames; run `chain extract` first or configure a toy_cnn frame encoder",
                    v.record.id
                )))
            }
            (VideoData::Features(_), false) => {
                return Err(usage(format!(
                    "{} stores features but the encoder expects raw frames",
                    v.record.id
                )))
            }
            _ => {}
        }
    }
    Ok(videos)
}

fn train(a: TrainArgs) -> Result<()> {
    let mut trainer = match &a.resume {
        Some(p) => {
            let mut ck = Checkpoint::load(p)?;
            if let Some(e) = a.overrides.epochs {
                ck.config.epochs = e;
            }
            log::info!("resuming at epoch {} step {}", ck.epoch, ck.global_step);
            Trainer::from_checkpoint(ck)?
        }
        None => Trainer::new(a.overrides.resolve()?)?,
    };
    let videos = load_for(&a.manifest, Some(Split::Train), &trainer.config.encoder)?;
    create_dir(&a.out)?;
    fs::write(a.out.join("config.toml"), trainer.config.to_toml_string())
        .context("writing config.toml")?;
    let log_path = a.out.join("train_log.txt");
    let mut log_file =
        fs::File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?;
    let mut write_err = None;
    let result = trainer.fit(&videos, Some(&a.out), &mut |l| {
        if let Err(e) = writeln!(log_file, "{l}") {
            write_err.get_or_insert(e);
        }
    });
    if let Some(e) = write_err {
        return Err(e).context("writing train_log.txt");
    }
    let path = result?.expect("checkpoint directory given");
    println!("checkpoint {}", path.display());
    Ok(())
}

fn encode(a: EncodeArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let videos = load_for(&a.manifest, a.split, &ck.model.config)?;
    let book = encode_corpus(&ck.model, &videos)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    book.write(&a.out)?;
    println!(
        "wrote {} codes of {} bits to {}",
        book.len(),
        book.bits(),
        a.out.display()
    );
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    if a.k.contains(&0) {
        return Err(usage("--k must be at least 1"));
    }
    let db = CodeBook::read(&a.codes)?;
    let queries = match &a.queries {
        Some(p) => CodeBook::read(p)?,
        None => db.clone(),
    };
    let mut rows = Vec::new();
    for &k in &a.k {
        rows.push(MetricRow {
            metric: "map".into(),
            k,
            value: map_at_k(&queries, &db, k)?,
        });
    }
    let curve = pr_curve(&queries, &db)?;
    println!("metric,K,value");
    for r in &rows {
        println!("{},{},{}", r.metric, r.k, r.value);
    }
    if let Some(dir) = &a.out {
        create_dir(dir)?;
        write_metrics_csv(dir.join("metrics.csv"), &rows)?;
        write_pr_csv(dir.join("pr.csv"), &curve)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct AblationCsvRow<'a> {
    tasks: &'a str,
    #[serde(rename = "CL")]
    cl: u8,
    #[serde(rename = "FOV")]
    fov: u8,
    #[serde(rename = "SCR")]
    scr: u8,
    seed: u64,
    #[serde(rename = "K")]
    k: usize,
    map: f64,
    final_loss: f64,
}

#[derive(Serialize)]
struct AblationSummaryRow<'a> {
    tasks: &'a str,
    #[serde(rename = "CL")]
    cl: u8,
    #[serde(rename = "FOV")]
    fov: u8,
    #[serde(rename = "SCR")]
    scr: u8,
    #[serde(rename = "K")]
    k: usize,
    median_map: f64,
    seeds: usize,
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w =
        csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn ablate(a: AblateArgs) -> Result<()> {
    if a.seeds.is_empty() {
        return Err(usage("--seeds must list at least one seed"));
    }
    if a.k == 0 {
        return Err(usage("--k must be at least 1"));
    }
    let base = a.overrides.resolve()?;
    let videos = load_for(&a.manifest, None, &base.encoder)?;
    let rows = run_ablation(&videos, &base, &ABLATION_GRID, &a.seeds, a.k)?;
    create_dir(&a.out)?;
    let labels: Vec<String> = rows.iter().map(|r| r.tasks.label()).collect();
    let detail: Vec<AblationCsvRow> = rows
        .iter()
        .zip(&labels)
        .map(|(r, label)| AblationCsvRow {
            tasks: label,
            cl: r.tasks.contrastive as u8,
            fov: r.tasks.order as u8,
            scr: r.tasks.scene as u8,
            seed: r.seed,
            k: a.k,
            map: r.map,
            final_loss: r.final_loss,
        })
        .collect();
    write_csv(&a.out.join("ablation.csv"), &detail)?;
    let summary = summarize(&rows)?;
    let summary_labels: Vec<String> = summary.iter().map(|(t, _)| t.label()).collect();
    let summary_rows: Vec<AblationSummaryRow> = summary
        .iter()
        .zip(&summary_labels)
        .map(|((t, m), label)| AblationSummaryRow {
            tasks: label,
            cl: t.contrastive as u8,
            fov: t.order as u8,
            scr: t.scene as u8,
            k: a.k,
            median_map: *m,
            seeds: a.seeds.len(),
        })
        .collect();
    write_csv(&a.out.join("ablation_summary.csv"), &summary_rows)?;
    println!("tasks,median_map@{}", a.k);
    for r in &summary_rows {
        println!("{},{}", r.tasks, r.median_map);
    }
    Ok(())
}

fn plot_cmd(a: PlotArgs) -> Result<()> {
    if a.pr.is_empty() && a.metrics.is_empty() {
        return Err(usage("give at least one --pr or --metrics file"));
    }
    create_dir(&a.out)?;
    if !a.pr.is_empty() {
        let path = a.out.join("pr_curve.svg");
        plot::pr_chart(&a.pr, &path)?;
        println!("wrote {}", path.display());
    }
    if !a.metrics.is_empty() {
        let path = a.out.join("map_bars.svg");
        plot::map_chart(&a.metrics, &path)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cluster(a: ClusterArgs) -> Result<()> {
    let manifest = Manifest::load(&a.manifest)?;
    let record = manifest
        .records
        .iter()
        .find(|r| r.id == a.id)
        .cloned()
        .ok_or_else(|| usage(format!("no video {:?} in {}", a.id, a.manifest.display())))?;
    let one = Manifest::new(vec![record])?;
    let (rows, indices) = match &a.checkpoint {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            let cfg = &ckpt.config.encoder;
            let video = &load_videos(&one, cfg.clip_length)?[0];
            let clip = eval_clip(video, cfg.clip_length)?;
            let pass = forward(&ckpt.model, &ClipBatch::from_views([&clip])?)?;
            let indices = center_sample(video.data.frame_count(), cfg.clip_length)?;
            (pass.value(pass.frames).clone(), indices)
        }
        None => {
            let video = &load_videos(&one, a.frames)?[0];
            let clip = eval_clip(video, a.frames)?;
            let rows = match ClipBatch::from_views([&clip])? {
                ClipBatch::Features(x) | ClipBatch::Frames(x) => x,
            };
            (rows, center_sample(video.data.frame_count(), a.frames)?)
        }
    };
    let (result, _) = cluster_video_frames(rows.view(), &APConfig::default())?;
    let ids = result.cluster_ids();
    let mut out = std::io::stdout().lock();
    writeln!(out, "frame,cluster")?;
    for (t, c) in indices.as_slice().iter().zip(&ids) {
        writeln!(out, "{t},{c}")?;
    }
    log::info!(
        "{}: {} clusters after {} iterations{}",
        a.id,
        result.num_clusters(),
        result.iterations,
        if result.converged {
            ""
        } else {
            " (not converged)"
        }
    );
    Ok(())
}
