//! Stage 1: a per-frame classifier trained on the central plane, then frozen
//! and reused as the feature extractor for every focal plane.

use std::path::Path;
use std::sync::Arc;

use candle_core::{DType, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Init, Linear, ParamStore};
use crate::stage::{StageSequence, StageVocabulary};
use crate::synth::{split_header, take_f32s, write_f32s, write_header, RawFocalStack};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrameEncoderConfig {
    pub raw_dim: usize,
    /// Feature dimension `D`. 2048 is reserved for imported backbone features.
    pub feature_dim: usize,
    pub hidden: Vec<usize>,
    pub classes: usize,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    pub lr: f64,
    pub min_lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    /// Fraction of records held out for validation accuracy.
    pub val_fraction: f64,
    pub seed: u64,
}

fn default_activation() -> Activation {
    Activation::Relu
}

impl Default for FrameEncoderConfig {
    fn default() -> Self {
        Self {
            raw_dim: 32,
            feature_dim: 64,
            hidden: vec![128],
            classes: 8,
            activation: Activation::Relu,
            lr: 5e-3,
            min_lr: 1e-7,
            batch_size: 16,
            epochs: 5,
            weight_decay: 0.01,
            val_fraction: 0.2,
            seed: 0,
        }
    }
}

impl FrameEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim < self.classes {
            return Err(Error::Config(format!(
                "feature_dim {} must be >= classes {}",
                self.feature_dim, self.classes
            )));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::Config(
                "frame encoder needs at least one non-empty hidden layer".into(),
            ));
        }
        if self.batch_size == 0 || self.lr <= 0.0 {
            return Err(Error::Config("batch_size and lr must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config("val_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// MLP trunk (`raw_dim -> hidden.. -> feature_dim`) plus a linear head.
pub struct FrameEncoder {
    cfg: FrameEncoderConfig,
    store: ParamStore,
    trunk: Vec<Linear>,
    head: Linear,
    frozen: bool,
}

impl std::fmt::Debug for FrameEncoder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FrameEncoder")
            .field("cfg", &self.cfg)
            .field("frozen", &self.frozen)
            .finish()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameTrainReport {
    pub train_accuracy: f64,
    pub val_accuracy: Option<f64>,
    pub epochs: usize,
}

impl FrameEncoder {
    /// Freshly initialised, unfrozen encoder.
    pub fn new(cfg: FrameEncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let store = ParamStore::new(cfg.seed, DType::F32);
        Self::build(cfg, store, false)
    }

    fn build(cfg: FrameEncoderConfig, store: ParamStore, frozen: bool) -> Result<Self> {
        let root = store.root();
        let mut widths = vec![cfg.raw_dim];
        widths.extend(&cfg.hidden);
        widths.push(cfg.feature_dim);
        let trunk = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(&root.pp("trunk").pp(i), w[0], w[1], Init::FanIn(w[0])))
            .collect::<Result<Vec<_>>>()?;
        let head = Linear::new(
            &root.pp("head"),
            cfg.feature_dim,
            cfg.classes,
            Init::FanIn(cfg.feature_dim),
        )?;
        Ok(Self {
            cfg,
            store,
            trunk,
            head,
            frozen,
        })
    }

    pub fn config(&self) -> &FrameEncoderConfig {
        &self.cfg
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn checksum(&self) -> Result<String> {
        self.store.checksum()
    }

    /// Ends training. The encoder can no longer be optimised and may now be
    /// used for feature extraction.
    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// Sets trunk layer `i` weights; only allowed before freezing.
    pub fn set_trunk_layer(&self, i: usize, weight: &Tensor, bias: &Tensor) -> Result<()> {
        if self.frozen {
            return Err(Error::Protocol("frozen encoder parameters are immutable".into()));
        }
        self.store.set(&format!("trunk.{i}.weight"), weight)?;
        self.store.set(&format!("trunk.{i}.bias"), bias)
    }

    /// `(n, raw_dim)` -> `(n, feature_dim)`.
    fn trunk_forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        let last = self.trunk.len() - 1;
        for (i, layer) in self.trunk.iter().enumerate() {
            h = layer.forward(&h)?;
            if i < last && self.cfg.activation == Activation::Relu {
                h = h.relu()?;
            }
        }
        Ok(h)
    }

    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.head.forward(&self.trunk_forward(x)?)
    }

    /// Per-frame class predictions, `(n, raw_dim)` rows.
    pub fn classify(&self, frames: &[f32], n: usize) -> Result<Vec<usize>> {
        let x = Tensor::from_slice(frames, (n, self.cfg.raw_dim), self.store.device())?;
        let logits = self.logits(&x)?.to_vec2::<f32>()?;
        Ok(logits.iter().map(|row| argmax(row)).collect())
    }

    pub fn train(cfg: FrameEncoderConfig, dataset: &[RawFocalStack]) -> Result<(Self, FrameTrainReport)> {
        let mut enc = Self::new(cfg)?;
        let report = enc.fit(dataset)?;
        enc.freeze();
        Ok((enc, report))
    }

    /// Cross-entropy training on independent central-plane frames.
    pub fn fit(&mut self, dataset: &[RawFocalStack]) -> Result<FrameTrainReport> {
        if self.frozen {
            return Err(Error::Protocol("cannot train a frozen encoder".into()));
        }
        let cfg = self.cfg.clone();
        if dataset.is_empty() {
            return Err(Error::Data("frame encoder needs a non-empty dataset".into()));
        }
        for (i, s) in dataset.iter().enumerate() {
            if s.raw_dim != cfg.raw_dim {
                return Err(Error::DimensionMismatch {
                    record: i,
                    detail: format!("raw_dim {} but encoder expects {}", s.raw_dim, cfg.raw_dim),
                });
            }
            if s.labels.num_classes() != cfg.classes {
                return Err(Error::DimensionMismatch {
                    record: i,
                    detail: format!("{} classes but encoder expects {}", s.labels.num_classes(), cfg.classes),
                });
            }
        }
        let n_val = if dataset.len() > 1 {
            ((dataset.len() as f64 * cfg.val_fraction).round() as usize).min(dataset.len() - 1)
        } else {
            0
        };
        let (train_set, val_set) = dataset.split_at(dataset.len() - n_val);
        let (x_train, y_train) = central_frames(train_set);
        let n = y_train.len();

        let mut opt = AdamW::new(
            self.store.vars(),
            ParamsAdamW {
                lr: cfg.lr,
                weight_decay: cfg.weight_decay,
                ..Default::default()
            },
        )?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xf4a3e);
        let mut order: Vec<usize> = (0..n).collect();
        let steps_per_epoch = n.div_ceil(cfg.batch_size);
        let total = (steps_per_epoch * cfg.epochs).max(1);
        let mut step = 0;
        let device = self.store.device().clone();
        for _ in 0..cfg.epochs {
            order.shuffle(&mut rng);
            for batch in order.chunks(cfg.batch_size) {
                opt.set_learning_rate(cosine_lr(cfg.lr, cfg.min_lr, step, total));
                let xs: Vec<f32> = batch
                    .iter()
                    .flat_map(|&i| x_train[i * cfg.raw_dim..(i + 1) * cfg.raw_dim].iter().copied())
                    .collect();
                let ys: Vec<u32> = batch.iter().map(|&i| y_train[i] as u32).collect();
                let x = Tensor::from_vec(xs, (batch.len(), cfg.raw_dim), &device)?;
                let y = Tensor::from_vec(ys, batch.len(), &device)?;
                let logits = self.logits(&x)?;
                let loss = candle_nn::loss::cross_entropy(&logits, &y)?;
                opt.backward_step(&loss)?;
                step += 1;
            }
        }
        let train_accuracy = self.accuracy(&x_train, &y_train)?;
        let val_accuracy = if val_set.is_empty() {
            None
        } else {
            let (xv, yv) = central_frames(val_set);
            Some(self.accuracy(&xv, &yv)?)
        };
        Ok(FrameTrainReport {
            train_accuracy,
            val_accuracy,
            epochs: cfg.epochs,
        })
    }

    fn accuracy(&self, x: &[f32], y: &[usize]) -> Result<f64> {
        let pred = self.classify(x, y.len())?;
        let hits = pred.iter().zip(y).filter(|(a, b)| a == b).count();
        Ok(100.0 * hits as f64 / y.len() as f64)
    }

    /// Maps every plane frame-wise through the trunk (head excluded).
    pub fn extract_features(&self, stack: &RawFocalStack) -> Result<FocalFeatureStack> {
        if !self.frozen {
            return Err(Error::Protocol(
                "feature extraction requires a frozen stage-1 encoder".into(),
            ));
        }
        if stack.raw_dim != self.cfg.raw_dim {
            return Err(Error::Shape(format!(
                "stack raw_dim {} but encoder expects {}",
                stack.raw_dim, self.cfg.raw_dim
            )));
        }
        let t = stack.frames();
        let mut data = Vec::with_capacity(stack.planes * t * self.cfg.feature_dim);
        for p in 0..stack.planes {
            let x = Tensor::from_slice(stack.plane(p), (t, self.cfg.raw_dim), self.store.device())?;
            data.extend(self.trunk_forward(&x)?.flatten_all()?.to_vec1::<f32>()?);
        }
        FocalFeatureStack::new(data, stack.planes, t, self.cfg.feature_dim, Some(stack.labels.clone()))
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        let meta = EncoderMeta {
            raw_dim: self.cfg.raw_dim,
            feature_dim: self.cfg.feature_dim,
            hidden: self.cfg.hidden.clone(),
            classes: self.cfg.classes,
            frozen: self.frozen,
            checksum: self.checksum()?,
            config: self.cfg.clone(),
        };
        self.store.save(path, "frame_encoder", serde_json::to_value(meta)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (store, header) = ParamStore::load(path, DType::F32)?;
        if header.kind != "frame_encoder" {
            return Err(Error::Header(format!(
                "expected a frame_encoder checkpoint, got {:?}",
                header.kind
            )));
        }
        let meta: EncoderMeta = serde_json::from_value(header.meta)?;
        Self::from_store(meta.config, store, meta.frozen)
    }

    /// Rebuilds an encoder around existing parameters (e.g. extracted from a
    /// stage-2 bundle).
    pub fn from_store(cfg: FrameEncoderConfig, store: ParamStore, frozen: bool) -> Result<Self> {
        let names_before = store.names().len();
        let enc = Self::build(cfg, store, frozen)?;
        if enc.store.names().len() != names_before {
            return Err(Error::Header("checkpoint does not match the encoder layout".into()));
        }
        Ok(enc)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncoderMeta {
    pub raw_dim: usize,
    pub feature_dim: usize,
    pub hidden: Vec<usize>,
    pub classes: usize,
    pub frozen: bool,
    pub checksum: String,
    pub config: FrameEncoderConfig,
}

fn central_frames(stacks: &[RawFocalStack]) -> (Vec<f32>, Vec<usize>) {
    let mut x = Vec::new();
    let mut y = Vec::new();
    for s in stacks {
        x.extend_from_slice(s.plane(s.central));
        y.extend_from_slice(s.labels.labels());
    }
    (x, y)
}

/// Cosine decay from `lr` to `min_lr` over `total` steps.
pub fn cosine_lr(lr: f64, min_lr: f64, step: usize, total: usize) -> f64 {
    let p = (step as f64 / total.max(1) as f64).min(1.0);
    min_lr + 0.5 * (lr - min_lr) * (1.0 + (std::f64::consts::PI * p).cos())
}

/// First index of the maximum; ties resolve to the smaller class id.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// `N x T x D` per-plane features, plane-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FocalFeatureStack {
    pub data: Vec<f32>,
    pub planes: usize,
    pub frames: usize,
    pub dim: usize,
    pub labels: Option<StageSequence>,
}

impl FocalFeatureStack {
    pub fn new(
        data: Vec<f32>,
        planes: usize,
        frames: usize,
        dim: usize,
        labels: Option<StageSequence>,
    ) -> Result<Self> {
        if data.len() != planes * frames * dim {
            return Err(Error::Shape(format!(
                "{} values for a {planes}x{frames}x{dim} feature stack",
                data.len()
            )));
        }
        if let Some(l) = &labels {
            if l.len() != frames {
                return Err(Error::Shape(format!("{} labels for {frames} frames", l.len())));
            }
        }
        Ok(Self {
            data,
            planes,
            frames,
            dim,
            labels,
        })
    }

    pub fn plane(&self, i: usize) -> &[f32] {
        let n = self.frames * self.dim;
        &self.data[i * n..(i + 1) * n]
    }

    /// Keeps the planes listed in `indices`, in that order.
    pub fn select_planes(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() || indices.iter().any(|&i| i >= self.planes) {
            return Err(Error::Config(format!(
                "plane selection {indices:?} invalid for {} planes",
                self.planes
            )));
        }
        let data = indices.iter().flat_map(|&i| self.plane(i).iter().copied()).collect();
        Self::new(data, indices.len(), self.frames, self.dim, self.labels.clone())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = FeatureHeader {
            planes: self.planes,
            frames: self.frames,
            dim: self.dim,
            vocab: self.labels.as_ref().map(|l| l.vocab().names().to_vec()),
            labels: self.labels.as_ref().map(|l| l.labels().to_vec()),
        };
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        write_header(&mut out, FEATURE_MAGIC, &serde_json::to_vec(&header)?)?;
        write_f32s(&mut out, &self.data)?;
        std::io::Write::flush(&mut out)?;
        Ok(())
    }

    /// Reads a feature file as-is (features computed elsewhere are accepted
    /// without transformation).
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let (h, payload) = split_header(&bytes, FEATURE_MAGIC)?;
        let header: FeatureHeader =
            serde_json::from_slice(h).map_err(|e| Error::Header(format!("feature header: {e}")))?;
        if header.planes == 0 || header.frames == 0 || header.dim == 0 {
            return Err(Error::Header("feature stack dimensions must be positive".into()));
        }
        let labels = match (header.vocab, header.labels) {
            (Some(v), Some(l)) => {
                let vocab = Arc::new(StageVocabulary::new(v).map_err(|e| Error::Header(e.to_string()))?);
                Some(StageSequence::new(l, vocab).map_err(|e| Error::Header(e.to_string()))?)
            }
            (None, None) => None,
            _ => return Err(Error::Header("vocab and labels must be given together".into())),
        };
        let (data, rest) = take_f32s(payload, header.planes * header.frames * header.dim, 0)?;
        if !rest.is_empty() {
            return Err(Error::DimensionMismatch {
                record: 0,
                detail: format!(
                    "{} bytes beyond the declared {}x{}x{} payload",
                    rest.len(),
                    header.planes,
                    header.frames,
                    header.dim
                ),
            });
        }
        Self::new(data, header.planes, header.frames, header.dim, labels).map_err(|e| Error::Header(e.to_string()))
    }
}

pub const FEATURE_MAGIC: &[u8; 4] = b"EDF1";

#[derive(Debug, Serialize, Deserialize)]
struct FeatureHeader {
    #[serde(rename = "N")]
    planes: usize,
    #[serde(rename = "T")]
    frames: usize,
    #[serde(rename = "D")]
    dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    vocab: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    labels: Option<Vec<usize>>,
}

/// Features of a whole dataset: one [`FocalFeatureStack`] per record plus the
/// central plane shared by all of them.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub stacks: Vec<FocalFeatureStack>,
    pub central: usize,
}

pub const FEATURE_SET_MAGIC: &[u8; 4] = b"EDS1";

#[derive(Debug, Serialize, Deserialize)]
struct FeatureSetHeader {
    record_count: usize,
    planes: usize,
    dim: usize,
    central_plane: usize,
    vocab: Vec<String>,
    records: Vec<FeatureRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct FeatureRecord {
    frames: usize,
    labels: Vec<usize>,
}

impl FeatureSet {
    /// Runs a frozen encoder over every stack of a raw dataset.
    pub fn extract(encoder: &FrameEncoder, dataset: &[RawFocalStack]) -> Result<Self> {
        let first = dataset
            .first()
            .ok_or_else(|| Error::Data("cannot extract features from an empty dataset".into()))?;
        let stacks = dataset
            .iter()
            .map(|s| encoder.extract_features(s))
            .collect::<Result<_>>()?;
        Ok(Self {
            stacks,
            central: first.central,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let first = self
            .stacks
            .first()
            .ok_or_else(|| Error::Data("refusing to write an empty feature set".into()))?;
        let mut records = Vec::with_capacity(self.stacks.len());
        for (i, s) in self.stacks.iter().enumerate() {
            let labels = s.labels.as_ref().ok_or_else(|| Error::DimensionMismatch {
                record: i,
                detail: "feature sets carry labels for every record".into(),
            })?;
            let same_vocab = labels.vocab().names() == first.labels.as_ref().map(|l| l.vocab().names()).unwrap_or(&[]);
            if s.planes != first.planes || s.dim != first.dim || !same_vocab {
                return Err(Error::DimensionMismatch {
                    record: i,
                    detail: "planes, feature dim and vocabulary must agree across records".into(),
                });
            }
            records.push(FeatureRecord {
                frames: s.frames,
                labels: labels.labels().to_vec(),
            });
        }
        let header = FeatureSetHeader {
            record_count: self.stacks.len(),
            planes: first.planes,
            dim: first.dim,
            central_plane: self.central,
            vocab: first
                .labels
                .as_ref()
                .map(|l| l.vocab().names().to_vec())
                .unwrap_or_default(),
            records,
        };
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        write_header(&mut out, FEATURE_SET_MAGIC, &serde_json::to_vec(&header)?)?;
        for s in &self.stacks {
            write_f32s(&mut out, &s.data)?;
        }
        std::io::Write::flush(&mut out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let (h, mut payload) = split_header(&bytes, FEATURE_SET_MAGIC)?;
        let header: FeatureSetHeader =
            serde_json::from_slice(h).map_err(|e| Error::Header(format!("feature set header: {e}")))?;
        if header.records.len() != header.record_count {
            return Err(Error::Header(format!(
                "record_count {} but {} record entries",
                header.record_count,
                header.records.len()
            )));
        }
        if header.planes == 0 || header.dim == 0 || header.central_plane >= header.planes {
            return Err(Error::Header(format!(
                "invalid layout: {} planes, dim {}, central plane {}",
                header.planes, header.dim, header.central_plane
            )));
        }
        let vocab = Arc::new(StageVocabulary::new(header.vocab).map_err(|e| Error::Header(e.to_string()))?);
        let mut stacks = Vec::with_capacity(header.record_count);
        for (i, rec) in header.records.into_iter().enumerate() {
            let labels = StageSequence::new(rec.labels, vocab.clone()).map_err(|e| Error::DimensionMismatch {
                record: i,
                detail: e.to_string(),
            })?;
            let (data, rest) = take_f32s(payload, header.planes * rec.frames * header.dim, i)?;
            payload = rest;
            stacks.push(
                FocalFeatureStack::new(data, header.planes, rec.frames, header.dim, Some(labels)).map_err(|e| {
                    Error::DimensionMismatch {
                        record: i,
                        detail: e.to_string(),
                    }
                })?,
            );
        }
        if !payload.is_empty() {
            return Err(Error::Header(format!("{} trailing payload bytes", payload.len())));
        }
        Ok(Self {
            stacks,
            central: header.central_plane,
        })
    }
}

/// Loads a feature file; the pass-through route for backbone features
/// computed outside this crate.
pub fn import_precomputed(path: &Path) -> Result<FocalFeatureStack> {
    FocalFeatureStack::load(path)
}
