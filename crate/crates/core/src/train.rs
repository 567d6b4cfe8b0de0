//! Stage-2 optimisation: conditions, corruption, denoising and the weighted
//! objective, with a per-step loss log.

use std::io::Write;

use candle_core::{DType, Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{gaussian, q_sample};
use crate::error::{Error, Result};
use crate::frame_encoder::{cosine_lr, FrameEncoder};
use crate::fusion::{fuse, symmetric_planes, FusedFeatureSequence};
use crate::losses::{bound_loss, diff_loss, sem_loss, smooth_loss, total_loss, LossParts, LossWeights};
use crate::model::{ModelConfig, PlaneSelection, Stage2Model};
use crate::nn::layers::Dropout;
use crate::nn::FrameMask;
use crate::stage::boundary_targets;
use crate::synth::RawFocalStack;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    /// Caps the number of optimisation steps when set; the cosine schedule
    /// then spans exactly this many steps.
    pub max_steps: Option<usize>,
    pub weights: LossWeights,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 350,
            batch_size: 24,
            lr: 1e-4,
            min_lr: 1e-7,
            weight_decay: 0.01,
            max_steps: None,
            weights: LossWeights::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.batch_size == 0 || self.lr <= 0.0 || self.min_lr < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Config("batch size and learning rate must be positive".into()));
        }
        if self.epochs == 0 && self.max_steps.is_none() {
            return Err(Error::Config("set epochs or max_steps".into()));
        }
        if self.max_steps == Some(0) {
            return Err(Error::Config("max_steps must be positive".into()));
        }
        Ok(())
    }

    pub fn total_steps(&self, sequences: usize) -> usize {
        self.max_steps
            .unwrap_or_else(|| self.epochs * sequences.div_ceil(self.batch_size))
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    #[serde(rename = "L_sem")]
    pub sem: f64,
    #[serde(rename = "L_smooth")]
    pub smooth: f64,
    #[serde(rename = "L_bound")]
    pub bound: f64,
    #[serde(rename = "L_diff")]
    pub diff: f64,
    pub total: f64,
    pub lr: f64,
}

/// Tensors for one padded batch.
struct Batch {
    features: Tensor,
    one_hot: Tensor,
    ids: Tensor,
    bounds: Tensor,
    mask: FrameMask,
}

fn make_batch(data: &[FusedFeatureSequence], idx: &[usize], cfg: &ModelConfig, dtype: DType) -> Result<Batch> {
    let dev = Device::Cpu;
    let t_max = idx.iter().map(|&i| data[i].frames).max().unwrap_or(0);
    let (b, d, c) = (idx.len(), cfg.feature_dim, cfg.classes);
    let mut feats = vec![0f32; b * t_max * d];
    let mut one_hot = vec![0f32; b * t_max * c];
    let mut ids = vec![0u32; b * t_max];
    let mut bounds = vec![0f32; b * t_max];
    let mut lengths = Vec::with_capacity(b);
    for (row, &i) in idx.iter().enumerate() {
        let seq = &data[i];
        let labels = seq
            .labels
            .as_ref()
            .ok_or_else(|| Error::Data(format!("training sequence {i} has no labels")))?;
        let t = seq.frames;
        lengths.push(t);
        feats[row * t_max * d..row * t_max * d + t * d].copy_from_slice(&seq.data);
        let target = boundary_targets(labels.labels(), cfg.boundary_sigma);
        for (f, &l) in labels.labels().iter().enumerate() {
            one_hot[(row * t_max + f) * c + l] = 1.0;
            ids[row * t_max + f] = l as u32;
            bounds[row * t_max + f] = target.values[f] as f32;
        }
    }
    Ok(Batch {
        features: Tensor::from_vec(feats, (b, t_max, d), &dev)?.to_dtype(dtype)?,
        one_hot: Tensor::from_vec(one_hot, (b, t_max, c), &dev)?.to_dtype(dtype)?,
        ids: Tensor::from_vec(ids, (b, t_max), &dev)?,
        bounds: Tensor::from_vec(bounds, (b, t_max), &dev)?.to_dtype(dtype)?,
        mask: FrameMask::new(&lengths, t_max, dtype, &dev)?,
    })
}

/// Loss parts for a batch; `rng` drives timesteps, noise and dropout.
pub fn batch_losses(
    model: &Stage2Model,
    data: &[FusedFeatureSequence],
    idx: &[usize],
    rng: &mut ChaCha8Rng,
    train: bool,
) -> Result<LossParts> {
    let cfg = &model.cfg;
    let dtype = model.dtype();
    let batch = make_batch(data, idx, cfg, dtype)?;
    let mask = Some(&batch.mask);
    let steps: Vec<usize> = idx.iter().map(|_| rng.random_range(1..=cfg.diffusion.steps)).collect();
    let (b, t) = batch.ids.dims2()?;
    let noise = gaussian(&[b, t, cfg.denoiser.width], rng, dtype, &Device::Cpu)?;
    let mut enc_rng = ChaCha8Rng::seed_from_u64(rng.random());
    let mut dropout = train.then_some(Dropout {
        rate: cfg.encoder.dropout,
        rng: &mut enc_rng,
    });
    let conds = model.encoders.forward(&batch.features, mask, &mut dropout)?;
    let y0 = model.embedding.embed(&batch.ids)?;
    let y_t = q_sample(&y0, &steps, &model.schedule, &noise)?;
    let mut den_rng = ChaCha8Rng::seed_from_u64(rng.random());
    let mut dropout = train.then_some(Dropout {
        rate: cfg.denoiser.dropout,
        rng: &mut den_rng,
    });
    let out = model.denoiser.forward(&y_t, &steps, &conds, mask, &mut dropout)?;
    let m = &batch.mask.mask;
    Ok(LossParts {
        sem: sem_loss(&conds.sem_logits, &batch.one_hot, m)?,
        smooth: if t >= 2 {
            smooth_loss(&conds.sem_logits, m)?
        } else {
            Tensor::new(0f32, &Device::Cpu)?.to_dtype(dtype)?
        },
        bound: bound_loss(&conds.bound_logits, &batch.bounds, m)?,
        diff: diff_loss(&out.logits, &batch.one_hot, m)?,
    })
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Trains a fresh model on fused, labelled sequences. `on_step` receives every
/// log record as it is produced.
pub fn train_stage2(
    model_cfg: ModelConfig,
    cfg: &TrainConfig,
    data: &[FusedFeatureSequence],
    mut on_step: impl FnMut(&LogRecord) -> Result<()>,
) -> Result<Stage2Model> {
    cfg.validate()?;
    model_cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data("stage-2 training needs at least one sequence".into()));
    }
    for (i, s) in data.iter().enumerate() {
        if s.dim != model_cfg.feature_dim {
            return Err(Error::DimensionMismatch {
                record: i,
                detail: format!("feature dim {} but model expects {}", s.dim, model_cfg.feature_dim),
            });
        }
        match &s.labels {
            Some(l) if l.num_classes() == model_cfg.classes => {}
            _ => {
                return Err(Error::DimensionMismatch {
                    record: i,
                    detail: format!("labels missing or not over {} classes", model_cfg.classes),
                })
            }
        }
    }
    let model = Stage2Model::new(model_cfg, cfg.seed, DType::F32)?;
    let mut opt = AdamW::new(
        model.store.vars(),
        ParamsAdamW {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..Default::default()
        },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_57a9e2);
    let total = cfg.total_steps(data.len());
    let mut order: Vec<usize> = Vec::new();
    for step in 0..total {
        if order.len() < cfg.batch_size.min(data.len()) {
            let mut epoch: Vec<usize> = (0..data.len()).collect();
            epoch.shuffle(&mut rng);
            order.extend(epoch);
        }
        let idx: Vec<usize> = order.drain(..cfg.batch_size.min(data.len())).collect();
        let lr = cosine_lr(cfg.lr, cfg.min_lr, step, total);
        opt.set_learning_rate(lr);
        let parts = batch_losses(&model, data, &idx, &mut rng, true)?;
        let loss = total_loss(&parts, &cfg.weights)?;
        opt.backward_step(&loss)?;
        on_step(&LogRecord {
            step,
            sem: scalar(&parts.sem)?,
            smooth: scalar(&parts.smooth)?,
            bound: scalar(&parts.bound)?,
            diff: scalar(&parts.diff)?,
            total: scalar(&loss)?,
            lr,
        })?;
    }
    Ok(model)
}

/// Writes log records as JSON lines.
pub fn json_lines<W: Write>(out: W) -> impl FnMut(&LogRecord) -> Result<()> {
    let mut out = out;
    move |r| {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
        Ok(())
    }
}

/// Runs a frozen encoder over raw stacks and fuses the selected planes.
pub fn prepare_features(
    encoder: &FrameEncoder,
    stacks: &[RawFocalStack],
    planes: PlaneSelection,
) -> Result<Vec<FusedFeatureSequence>> {
    if !encoder.is_frozen() {
        return Err(Error::Protocol(
            "stage-2 training requires a frozen stage-1 encoder".into(),
        ));
    }
    stacks
        .iter()
        .map(|s| {
            let feats = encoder.extract_features(s)?;
            match planes {
                PlaneSelection::All => fuse(&feats),
                PlaneSelection::Symmetric(n) => {
                    fuse(&feats.select_planes(&symmetric_planes(feats.planes, s.central, n)?)?)
                }
            }
        })
        .collect()
}
