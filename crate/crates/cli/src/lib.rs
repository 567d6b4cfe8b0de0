//! The `edk` command line: dataset generation, both training stages, feature
//! extraction, evaluation, prediction and plotting.

pub mod config;
pub mod plot;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use edk_core::eval::{evaluate, Aggregate, StepReport};
use edk_core::frame_encoder::{FeatureSet, FrameEncoder};
use edk_core::fusion::{fuse, symmetric_planes, FusedFeatureSequence};
use edk_core::model::{Bundle, PlaneSelection};
use edk_core::stage::{LabelFile, SegmentList};
use edk_core::synth::{generate_dataset, read_dataset, write_dataset};
use edk_core::train::{json_lines, prepare_features, train_stage2};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub use config::RunConfig;

/// A failed command: message plus process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

pub const EXIT_INTERNAL: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_PROTOCOL: i32 = 4;

impl Failure {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_DATA,
            message: message.into(),
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<edk_core::Error> for Failure {
    fn from(e: edk_core::Error) -> Self {
        use edk_core::Error as E;
        let code = match &e {
            E::Config(_) => EXIT_CONFIG,
            E::Protocol(_) => EXIT_PROTOCOL,
            E::Data(_) | E::Header(_) | E::DimensionMismatch { .. } | E::Truncated { .. } | E::Io(_) | E::Json(_) => {
                EXIT_DATA
            }
            E::Shape(_) | E::Tensor(_) => EXIT_INTERNAL,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self::data(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Self::data(e.to_string())
    }
}

type Result<T> = std::result::Result<T, Failure>;

#[derive(Debug, Parser)]
#[command(
    name = "edk",
    version,
    about = "Two-stage developmental stage segmentation of multi-focal time-lapse sequences"
)]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Starting configuration: paper, desk, mfhe-like or sfhe-like.
    #[arg(long, global = true, default_value = "desk")]
    pub profile: String,
    /// TOML file merged over the profile.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one config value, e.g. `--set train.weights.sem=0.5`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
}

/// Where stage-2 inputs come from: an extracted feature set, or a raw dataset
/// plus a frozen encoder.
#[derive(Debug, Args)]
pub struct Inputs {
    /// Feature set written by `extract`.
    #[arg(long, value_name = "FILE", conflicts_with = "data")]
    pub features: Option<PathBuf>,
    /// Raw dataset written by `gen-data`.
    #[arg(long, value_name = "FILE")]
    pub data: Option<PathBuf>,
    /// Frozen stage-1 checkpoint used with `--data`.
    #[arg(long, value_name = "FILE", requires = "data")]
    pub encoder: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic multi-focal dataset.
    GenData {
        /// Dataset file to write.
        #[arg(long)]
        out: PathBuf,
        /// Number of sequences; defaults to `sequences` from the config.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train the stage-1 frame classifier and freeze it.
    TrainFrame {
        /// Raw dataset written by `gen-data`.
        #[arg(long)]
        data: PathBuf,
        /// Encoder checkpoint to write.
        #[arg(long)]
        out: PathBuf,
        /// Save the encoder unfrozen (it then cannot be used for extraction).
        #[arg(long)]
        no_freeze: bool,
    },
    /// Extract per-plane features with a frozen encoder.
    Extract {
        /// Frozen stage-1 checkpoint.
        #[arg(long)]
        encoder: PathBuf,
        /// Raw dataset written by `gen-data`.
        #[arg(long)]
        data: PathBuf,
        /// Feature set to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the stage-2 diffusion model.
    TrainDiff {
        #[command(flatten)]
        inputs: Inputs,
        /// Stage-2 bundle to write.
        #[arg(long)]
        out: PathBuf,
        /// JSON-lines training log; stdout when omitted.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Evaluate a trained bundle over sampling-step counts and seeds.
    Eval {
        /// Stage-2 bundle written by `train-diff`.
        #[arg(long)]
        bundle: PathBuf,
        #[command(flatten)]
        inputs: Inputs,
        /// Comma-separated DDIM step counts.
        #[arg(long, value_delimiter = ',')]
        steps: Option<Vec<usize>>,
        /// Number of sampler seeds.
        #[arg(long)]
        seeds: Option<usize>,
        /// per-seq or pooled.
        #[arg(long)]
        aggregate: Option<Aggregate>,
        /// Write the noise schedule (S+1 values) as JSON.
        #[arg(long, value_name = "FILE")]
        dump_schedule: Option<PathBuf>,
        /// Report path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predict per-frame stages for one sequence.
    Predict {
        /// Stage-2 bundle written by `train-diff`.
        #[arg(long)]
        bundle: PathBuf,
        #[command(flatten)]
        inputs: Inputs,
        /// Record index within the input file.
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// DDIM sampling steps.
        #[arg(long, default_value_t = 15)]
        steps: usize,
        /// Sampler seed; defaults to the config seed.
        #[arg(long)]
        sample_seed: Option<u64>,
        /// Prediction file (labels and segments as JSON).
        #[arg(long)]
        out: PathBuf,
        /// Also write the ground-truth labels of the record.
        #[arg(long, value_name = "FILE")]
        truth_out: Option<PathBuf>,
        /// Write per-block activation statistics of the first sampling step.
        #[arg(long, value_name = "FILE")]
        dump_taps: Option<PathBuf>,
    },
    /// Draw stage bars for ground truth and predictions as SVG.
    Plot {
        /// Prediction files (label JSON). Repeatable.
        #[arg(long = "pred", required = true)]
        preds: Vec<PathBuf>,
        /// Ground-truth label file.
        #[arg(long)]
        gt: PathBuf,
        /// SVG file to write.
        #[arg(long)]
        out: PathBuf,
    },
}

pub fn file_digest(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

fn note(msg: impl AsRef<str>) {
    eprintln!("{}", msg.as_ref());
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = RunConfig::load(&cli.common.profile, cli.common.config.as_deref(), &cli.common.sets)?;
    match cli.command {
        Command::GenData { out, count } => gen_data(&cfg, &out, count),
        Command::TrainFrame { data, out, no_freeze } => train_frame(&cfg, &data, &out, no_freeze),
        Command::Extract { encoder, data, out } => extract(&cfg, &encoder, &data, &out),
        Command::TrainDiff { inputs, out, log } => train_diff(&cfg, &inputs, &out, log.as_deref()),
        Command::Eval {
            bundle,
            inputs,
            steps,
            seeds,
            aggregate,
            dump_schedule,
            out,
        } => {
            let mut cfg = cfg;
            if let Some(s) = steps {
                cfg.eval.steps = s;
            }
            if let Some(s) = seeds {
                cfg.eval.seeds = s;
            }
            if let Some(a) = aggregate {
                cfg.eval.aggregate = a;
            }
            eval(&cfg, &bundle, &inputs, dump_schedule.as_deref(), out.as_deref())
        }
        Command::Predict {
            bundle,
            inputs,
            index,
            steps,
            sample_seed,
            out,
            truth_out,
            dump_taps,
        } => predict(
            &cfg,
            &PredictArgs {
                bundle: &bundle,
                inputs: &inputs,
                index,
                steps,
                seed: sample_seed.unwrap_or(cfg.seed),
                out: &out,
                truth_out: truth_out.as_deref(),
                dump_taps: dump_taps.as_deref(),
            },
        ),
        Command::Plot { preds, gt, out } => plot_cmd(&preds, &gt, &out),
    }
}

fn gen_data(cfg: &RunConfig, out: &Path, count: Option<usize>) -> Result<()> {
    let count = count.unwrap_or(cfg.sequences);
    if count == 0 {
        return Err(Failure::config("sequence count must be positive"));
    }
    let stacks = generate_dataset(&cfg.data, count)?;
    write_dataset(&stacks, out)?;
    let digest = cfg.snapshot(out)?;
    note(format!(
        "wrote {count} sequences to {} (sha256 {}, config {digest})",
        out.display(),
        file_digest(out)?
    ));
    Ok(())
}

fn train_frame(cfg: &RunConfig, data: &Path, out: &Path, no_freeze: bool) -> Result<()> {
    let stacks = read_dataset(data)?;
    let first = stacks.first().ok_or_else(|| Failure::data("dataset is empty"))?;
    let mut fc = cfg.frame.clone();
    fc.raw_dim = first.raw_dim;
    fc.classes = first.labels.num_classes();
    let mut enc = FrameEncoder::new(fc.clone())?;
    let report = enc.fit(&stacks)?;
    if !no_freeze {
        enc.freeze();
    }
    let checksum = enc.save(out)?;
    let mut resolved = cfg.clone();
    resolved.frame = fc;
    let digest = resolved.snapshot(out)?;
    println!("{}", serde_json::to_string(&report)?);
    note(format!(
        "saved {} encoder to {} (checksum {checksum}, config {digest})",
        if enc.is_frozen() { "frozen" } else { "unfrozen" },
        out.display()
    ));
    Ok(())
}

fn extract(cfg: &RunConfig, encoder: &Path, data: &Path, out: &Path) -> Result<()> {
    let enc = FrameEncoder::load(encoder)?;
    let stacks = read_dataset(data)?;
    let set = FeatureSet::extract(&enc, &stacks)?;
    set.save(out)?;
    let digest = cfg.snapshot(out)?;
    note(format!(
        "wrote features for {} sequences to {} (sha256 {}, config {digest})",
        set.stacks.len(),
        out.display(),
        file_digest(out)?
    ));
    Ok(())
}

/// Fused sequences plus the encoder that produced them, if raw data was used.
fn load_inputs(
    inputs: &Inputs,
    planes: PlaneSelection,
    fallback_encoder: Option<&FrameEncoder>,
) -> Result<(Vec<FusedFeatureSequence>, Option<FrameEncoder>)> {
    match (&inputs.features, &inputs.data) {
        (Some(path), _) => {
            let set = FeatureSet::load(path)?;
            let fused = set
                .stacks
                .iter()
                .map(|s| match planes {
                    PlaneSelection::All => fuse(s),
                    PlaneSelection::Symmetric(n) => {
                        fuse(&s.select_planes(&symmetric_planes(s.planes, set.central, n)?)?)
                    }
                })
                .collect::<edk_core::Result<_>>()?;
            Ok((fused, None))
        }
        (None, Some(data)) => {
            let stacks = read_dataset(data)?;
            let loaded = inputs.encoder.as_deref().map(FrameEncoder::load).transpose()?;
            let enc = loaded
                .as_ref()
                .or(fallback_encoder)
                .ok_or_else(|| Failure::config("--data needs --encoder (or a bundle that carries one)"))?;
            let fused = prepare_features(enc, &stacks, planes)?;
            Ok((fused, loaded))
        }
        (None, None) => Err(Failure::config("pass --features or --data")),
    }
}

fn train_diff(cfg: &RunConfig, inputs: &Inputs, out: &Path, log: Option<&Path>) -> Result<()> {
    let (data, frame) = load_inputs(inputs, cfg.planes, None)?;
    let first = data.first().ok_or_else(|| Failure::data("no training sequences"))?;
    let vocab = first
        .labels
        .as_ref()
        .map(|l| l.vocab().names().to_vec())
        .ok_or_else(|| Failure::data("training sequences need labels"))?;
    let mut resolved = cfg.clone();
    resolved.model.feature_dim = first.dim;
    resolved.model.classes = vocab.len();
    if let Some(f) = &frame {
        resolved.frame = f.config().clone();
    }
    let frame_before = frame.as_ref().map(|f| f.checksum()).transpose()?;
    let model = match log {
        Some(path) => {
            let mut sink = json_lines(BufWriter::new(File::create(path)?));
            train_stage2(resolved.model.clone(), &resolved.train, &data, &mut sink)?
        }
        None => {
            let stdout = std::io::stdout();
            let mut sink = json_lines(stdout.lock());
            train_stage2(resolved.model.clone(), &resolved.train, &data, &mut sink)?
        }
    };
    if frame.as_ref().map(|f| f.checksum()).transpose()? != frame_before {
        return Err(Failure {
            code: EXIT_PROTOCOL,
            message: "stage-1 encoder changed during stage-2 training".into(),
        });
    }
    let bundle = Bundle {
        model,
        planes: cfg.planes,
        vocab,
        frame,
    };
    let checksum = bundle.save(out)?;
    let digest = resolved.snapshot(out)?;
    note(format!(
        "saved stage-2 bundle to {} (checksum {checksum}, config {digest})",
        out.display()
    ));
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct EvalReport {
    pub config_digest: String,
    pub model_checksum: String,
    pub aggregate: Aggregate,
    pub seeds: Vec<u64>,
    pub sequences: usize,
    pub reports: Vec<StepReport>,
}

#[derive(Debug, Serialize)]
struct ScheduleDump<'a> {
    steps: usize,
    bar_alpha: &'a [f64],
}

fn eval(cfg: &RunConfig, bundle: &Path, inputs: &Inputs, schedule: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let bundle = Bundle::load(bundle)?;
    let model = &bundle.model;
    if let Some(path) = schedule {
        let dump = ScheduleDump {
            steps: model.schedule.steps,
            bar_alpha: &model.schedule.bar_alpha,
        };
        std::fs::write(path, serde_json::to_string_pretty(&dump)?)?;
    }
    if cfg.eval.seeds == 0 {
        return Err(Failure::config("eval.seeds must be positive"));
    }
    let (data, _) = load_inputs(inputs, bundle.planes, bundle.frame.as_ref())?;
    let seeds: Vec<u64> = (0..cfg.eval.seeds as u64).map(|i| cfg.seed.wrapping_add(i)).collect();
    let reports = evaluate(model, &data, &cfg.eval.steps, &seeds, cfg.eval.aggregate, &bundle.vocab)?;
    let report = EvalReport {
        config_digest: cfg.digest()?,
        model_checksum: model.checksum()?,
        aggregate: cfg.eval.aggregate,
        seeds,
        sequences: data.len(),
        reports,
    };
    let text = serde_json::to_string_pretty(&report)?;
    match out {
        Some(path) => {
            std::fs::write(path, text)?;
            cfg.snapshot(path)?;
            for r in &report.reports {
                note(format!(
                    "{:>3} steps: acc {:.2} edit {:.2} F1@10/25/50 {:.2}/{:.2}/{:.2} avg {:.2}",
                    r.steps,
                    r.metrics.acc,
                    r.metrics.edit,
                    r.metrics.f1_10,
                    r.metrics.f1_25,
                    r.metrics.f1_50,
                    r.metrics.avg
                ));
            }
        }
        None => println!("{text}"),
    }
    Ok(())
}

struct PredictArgs<'a> {
    bundle: &'a Path,
    inputs: &'a Inputs,
    index: usize,
    steps: usize,
    seed: u64,
    out: &'a Path,
    truth_out: Option<&'a Path>,
    dump_taps: Option<&'a Path>,
}

#[derive(Debug, Serialize)]
struct SegmentOut {
    stage: usize,
    name: String,
    start: usize,
    end: usize,
}

/// Prediction file; `vocab` and `labels` make it a valid label file.
#[derive(Debug, Serialize)]
struct PredictionOut {
    frames: usize,
    steps: usize,
    seed: u64,
    vocab: Vec<String>,
    labels: Vec<usize>,
    segments: Vec<SegmentOut>,
}

#[derive(Debug, Serialize)]
struct TensorStats {
    shape: Vec<usize>,
    mean: f64,
    rms: f64,
}

impl TensorStats {
    fn of(t: &candle_core::Tensor) -> Result<Self> {
        let v = t
            .flatten_all()
            .and_then(|x| x.to_dtype(candle_core::DType::F64))
            .and_then(|x| x.to_vec1::<f64>())
            .map_err(edk_core::Error::from)?;
        let n = v.len().max(1) as f64;
        Ok(Self {
            shape: t.dims().to_vec(),
            mean: v.iter().sum::<f64>() / n,
            rms: (v.iter().map(|x| x * x).sum::<f64>() / n).sqrt(),
        })
    }
}

#[derive(Debug, Serialize)]
struct BlockDump {
    block: usize,
    boundary: TensorStats,
    value: TensorStats,
    semantic: TensorStats,
    output: TensorStats,
}

fn predict(cfg: &RunConfig, a: &PredictArgs) -> Result<()> {
    let bundle = Bundle::load(a.bundle)?;
    let (data, _) = load_inputs(a.inputs, bundle.planes, bundle.frame.as_ref())?;
    let seq = data
        .get(a.index)
        .ok_or_else(|| Failure::data(format!("record {} out of range ({} records)", a.index, data.len())))?;
    let model = &bundle.model;
    let conds = model.conditions(seq)?;
    let sample = model.sample(&conds, a.steps, a.seed)?;
    let segments = SegmentList::from_labels(&sample.labels)
        .as_slice()
        .iter()
        .map(|s| SegmentOut {
            stage: s.stage,
            name: bundle
                .vocab
                .get(s.stage)
                .cloned()
                .unwrap_or_else(|| s.stage.to_string()),
            start: s.start,
            end: s.end,
        })
        .collect();
    let pred = PredictionOut {
        frames: seq.frames,
        steps: a.steps,
        seed: a.seed,
        vocab: bundle.vocab.clone(),
        labels: sample.labels,
        segments,
    };
    std::fs::write(a.out, serde_json::to_string_pretty(&pred)?)?;
    let digest = cfg.snapshot(a.out)?;
    if let Some(path) = a.truth_out {
        let labels = seq
            .labels
            .as_ref()
            .ok_or_else(|| Failure::data("record has no labels"))?;
        std::fs::write(path, serde_json::to_string_pretty(&LabelFile::from(labels))?)?;
    }
    if let Some(path) = a.dump_taps {
        let taps = model.first_step_taps(&conds, a.steps, a.seed)?;
        let blocks = taps
            .iter()
            .enumerate()
            .map(|(i, t)| {
                Ok(BlockDump {
                    block: i,
                    boundary: TensorStats::of(&t.boundary)?,
                    value: TensorStats::of(&t.value)?,
                    semantic: TensorStats::of(&t.semantic)?,
                    output: TensorStats::of(&t.output)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        std::fs::write(path, serde_json::to_string_pretty(&blocks)?)?;
    }
    note(format!(
        "wrote {} frame labels to {} (sha256 {}, config {digest})",
        pred.frames,
        a.out.display(),
        file_digest(a.out)?
    ));
    Ok(())
}

fn read_labels(path: &Path) -> Result<LabelFile> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Failure::data(format!("{}: {e}", path.display())))
}

fn plot_cmd(preds: &[PathBuf], gt: &Path, out: &Path) -> Result<()> {
    let truth = read_labels(gt)?;
    let mut rows = vec![plot::Row {
        name: "ground truth".into(),
        labels: truth.labels,
    }];
    for p in preds {
        let lf = read_labels(p)?;
        if lf.vocab != truth.vocab {
            return Err(Failure::data(format!("{} uses a different vocabulary", p.display())));
        }
        rows.push(plot::Row {
            name: p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default(),
            labels: lf.labels,
        });
    }
    let svg = plot::render(&rows, &truth.vocab)?;
    let mut f = BufWriter::new(File::create(out)?);
    f.write_all(svg.as_bytes())?;
    f.flush()?;
    note(format!("wrote {} rows to {}", rows.len(), out.display()));
    Ok(())
}
