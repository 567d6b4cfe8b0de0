//! The stage-2 model: condition encoders, label embedding and denoiser under
//! one parameter store, plus sampling-time views.

use std::path::Path;

use candle_core::{DType, Device, Tensor, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::condition::{ConditionEncoders, ConditionPair, TemporalEncoderConfig};
use crate::denoiser::{BlockTaps, Denoiser, DenoiserConfig};
use crate::diffusion::{ddim_sample, gaussian, Denoise, LabelEmbedding, NoiseSchedule, SampleOutput};
use crate::error::{Error, Result};
use crate::frame_encoder::{FrameEncoder, FrameEncoderConfig};
use crate::fusion::FusedFeatureSequence;
use crate::nn::ParamStore;

/// What the sampler treats as the clean estimate between DDIM steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CleanEstimate {
    /// The denoiser's `y0_hat` output as is.
    Direct,
    /// The label embedding averaged under the head's class probabilities,
    /// which keeps intermediate states on the scale of real embeddings.
    Reembedded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    pub steps: usize,
    pub signal_scale: f64,
    pub clean_estimate: CleanEstimate,
    pub eta: f64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            signal_scale: 0.1,
            clean_estimate: CleanEstimate::Reembedded,
            eta: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub classes: usize,
    pub encoder: TemporalEncoderConfig,
    pub denoiser: DenoiserConfig,
    pub diffusion: DiffusionConfig,
    /// Gaussian width of the boundary targets, in frames.
    pub boundary_sigma: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::new(64, 8)
    }
}

impl ModelConfig {
    pub fn new(feature_dim: usize, classes: usize) -> Self {
        Self {
            feature_dim,
            classes,
            encoder: TemporalEncoderConfig::default(),
            denoiser: DenoiserConfig::default(),
            diffusion: DiffusionConfig::default(),
            boundary_sigma: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.denoiser.validate()?;
        if self.classes < 2 || self.feature_dim == 0 {
            return Err(Error::Config(
                "model needs >= 2 classes and a positive feature dim".into(),
            ));
        }
        if self.diffusion.steps == 0 || self.diffusion.signal_scale <= 0.0 {
            return Err(Error::Config(
                "diffusion steps and signal scale must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.diffusion.eta) {
            return Err(Error::Config("eta must lie in [0, 1]".into()));
        }
        if self.boundary_sigma < 0.0 {
            return Err(Error::Config("boundary_sigma must be >= 0".into()));
        }
        Ok(())
    }
}

pub struct Stage2Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub encoders: ConditionEncoders,
    pub embedding: LabelEmbedding,
    pub denoiser: Denoiser,
    pub schedule: NoiseSchedule,
}

impl std::fmt::Debug for Stage2Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Stage2Model").field("cfg", &self.cfg).finish()
    }
}

impl Stage2Model {
    pub fn new(cfg: ModelConfig, seed: u64, dtype: DType) -> Result<Self> {
        Self::with_store(cfg, ParamStore::new(seed, dtype))
    }

    pub fn with_store(cfg: ModelConfig, store: ParamStore) -> Result<Self> {
        cfg.validate()?;
        let root = store.root();
        let encoders = ConditionEncoders::new(&root.pp("cond"), &cfg.encoder, cfg.feature_dim, cfg.classes)?;
        let embedding = LabelEmbedding::new(
            &root.pp("embed"),
            cfg.classes,
            cfg.denoiser.width,
            cfg.diffusion.signal_scale,
        )?;
        let denoiser = Denoiser::new(
            &root.pp("denoiser"),
            &cfg.denoiser,
            cfg.encoder.condition_width(),
            cfg.classes,
        )?;
        let schedule = NoiseSchedule::cosine(cfg.diffusion.steps)?;
        Ok(Self {
            cfg,
            store,
            encoders,
            embedding,
            denoiser,
            schedule,
        })
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    /// Eval-mode conditions for one fused sequence.
    pub fn conditions(&self, fused: &FusedFeatureSequence) -> Result<ConditionPair> {
        if fused.dim != self.cfg.feature_dim {
            return Err(Error::Shape(format!(
                "features have dim {} but the model expects {}",
                fused.dim, self.cfg.feature_dim
            )));
        }
        let x = Tensor::from_slice(&fused.data, (1, fused.frames, fused.dim), &Device::Cpu)?.to_dtype(self.dtype())?;
        Ok(self.encoders.forward(&x, None, &mut None)?.detach())
    }

    /// Binds conditions for repeated sampling; the condition projections are
    /// computed once.
    pub fn sampler(&self, conds: &ConditionPair) -> Result<Sampler<'_>> {
        let (c_sem, c_bound) = self.denoiser.project_conditions(conds)?;
        Ok(Sampler {
            model: self,
            frames: conds.frames()?,
            c_sem: c_sem.detach(),
            c_bound: c_bound.detach(),
        })
    }

    pub fn sample(&self, conds: &ConditionPair, steps: usize, seed: u64) -> Result<SampleOutput> {
        let sampler = self.sampler(conds)?;
        ddim_sample(&sampler, steps, &self.schedule, seed, self.cfg.diffusion.eta)
    }

    pub fn predict(&self, fused: &FusedFeatureSequence, steps: usize, seed: u64) -> Result<SampleOutput> {
        self.sample(&self.conditions(fused)?, steps, seed)
    }

    /// Block activations at the first sampling step, from the same initial
    /// noise that `sample` draws for `seed`.
    pub fn first_step_taps(&self, conds: &ConditionPair, steps: usize, seed: u64) -> Result<Vec<BlockTaps>> {
        let grid = self.schedule.ddim_timesteps(steps)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y = gaussian(
            &[1, conds.frames()?, self.cfg.denoiser.width],
            &mut rng,
            self.dtype(),
            &Device::Cpu,
        )?;
        Ok(self.denoiser.forward_with_taps(&y, &[grid[0]], conds, None)?.1)
    }

    pub fn checksum(&self) -> Result<String> {
        self.store.checksum()
    }
}

/// A [`Stage2Model`] with conditions fixed, usable by the DDIM sampler.
pub struct Sampler<'a> {
    model: &'a Stage2Model,
    frames: usize,
    c_sem: Tensor,
    c_bound: Tensor,
}

impl Denoise for Sampler<'_> {
    fn width(&self) -> usize {
        self.model.cfg.denoiser.width
    }

    fn frames(&self) -> usize {
        self.frames
    }

    fn dtype(&self) -> DType {
        self.model.dtype()
    }

    fn denoise(&self, y_t: &Tensor, t: usize) -> Result<(Tensor, Tensor)> {
        let out = self
            .model
            .denoiser
            .forward_projected(y_t, &[t], &self.c_sem, &self.c_bound, None, &mut None)?;
        let y0 = match self.model.cfg.diffusion.clean_estimate {
            CleanEstimate::Direct => out.y0,
            CleanEstimate::Reembedded => {
                let probs = candle_nn::ops::softmax(&out.logits, D::Minus1)?;
                self.model.embedding.expected(&probs)?
            }
        };
        Ok((y0.detach(), out.logits.detach()))
    }
}

/// Which focal planes feed the fused features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "count")]
pub enum PlaneSelection {
    All,
    /// `count` planes chosen symmetrically around the central plane.
    Symmetric(usize),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BundleMeta {
    pub model: ModelConfig,
    pub planes: PlaneSelection,
    pub vocab: Vec<String>,
    pub frame_encoder: Option<FrameEncoderConfig>,
    pub frame_checksum: Option<String>,
    pub checksum: String,
}

/// A trained stage-2 model plus what is needed to run it on raw stacks.
pub struct Bundle {
    pub model: Stage2Model,
    pub planes: PlaneSelection,
    pub vocab: Vec<String>,
    pub frame: Option<FrameEncoder>,
}

const FRAME_PREFIX: &str = "frame.";

impl Bundle {
    pub fn save(&self, path: &Path) -> Result<String> {
        let combined = ParamStore::new(0, self.model.dtype());
        combined.absorb(&self.model.store, "")?;
        if let Some(f) = &self.frame {
            combined.absorb(f.params(), FRAME_PREFIX)?;
        }
        let meta = BundleMeta {
            model: self.model.cfg.clone(),
            planes: self.planes,
            vocab: self.vocab.clone(),
            frame_encoder: self.frame.as_ref().map(|f| f.config().clone()),
            frame_checksum: self.frame.as_ref().map(|f| f.checksum()).transpose()?,
            checksum: self.model.checksum()?,
        };
        combined.save(path, "stage2", serde_json::to_value(meta)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (store, header) = ParamStore::load(path, DType::F32)?;
        if header.kind != "stage2" {
            return Err(Error::Header(format!(
                "expected a stage2 checkpoint, got {:?}",
                header.kind
            )));
        }
        let meta: BundleMeta = serde_json::from_value(header.meta)?;
        let frame = match &meta.frame_encoder {
            Some(cfg) => {
                let fs = store.extract(FRAME_PREFIX)?;
                Some(FrameEncoder::from_store(cfg.clone(), fs, true)?)
            }
            None => None,
        };
        let model_store = ParamStore::new(0, DType::F32);
        for (name, var) in store.vars_with_prefix("") {
            if !name.starts_with(FRAME_PREFIX) {
                model_store.insert(&name, var.as_tensor())?;
            }
        }
        let count = model_store.names().len();
        let model = Stage2Model::with_store(meta.model.clone(), model_store)?;
        if model.store.names().len() != count {
            return Err(Error::Header("checkpoint does not match the model layout".into()));
        }
        if model.checksum()? != meta.checksum {
            return Err(Error::Header("model checksum mismatch".into()));
        }
        Ok(Self {
            model,
            planes: meta.planes,
            vocab: meta.vocab,
            frame,
        })
    }
}
