//! Run configuration: one TOML document covering every stage, with
//! `--set a.b.c=v` overrides and an `EDK_SEED` override of the master seed.

use std::path::Path;

use edk_core::condition::TemporalEncoderConfig;
use edk_core::denoiser::DenoiserConfig;
use edk_core::eval::Aggregate;
use edk_core::frame_encoder::FrameEncoderConfig;
use edk_core::model::{ModelConfig, PlaneSelection};
use edk_core::synth::SyntheticConfig;
use edk_core::train::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::Failure;

pub const SEED_ENV: &str = "EDK_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub steps: Vec<usize>,
    /// Number of sampler seeds; seed `i` is `seed + i`.
    pub seeds: usize,
    pub aggregate: Aggregate,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            steps: vec![1, 15, 25],
            seeds: 10,
            aggregate: Aggregate::PerSeq,
        }
    }
}

/// Everything a command may need. Section seeds are overwritten by the
/// master `seed` during resolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Sequences written by `gen-data`.
    pub sequences: usize,
    pub data: SyntheticConfig,
    pub frame: FrameEncoderConfig,
    pub planes: PlaneSelection,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            sequences: 8,
            data: SyntheticConfig::default(),
            frame: FrameEncoderConfig::default(),
            planes: PlaneSelection::All,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

pub const PROFILES: &[&str] = &["paper", "desk", "mfhe-like", "sfhe-like"];

impl RunConfig {
    /// Named starting points. `paper` keeps the module defaults; `desk` is
    /// sized for a single CPU.
    pub fn profile(name: &str) -> Result<Self, Failure> {
        let mut cfg = Self::default();
        match name {
            "paper" => {}
            "desk" => cfg.apply_desk(),
            "mfhe-like" => {
                cfg.apply_desk();
                cfg.data.classes = 15;
                cfg.data.vocab = Some("mfhe15".into());
                cfg.data.planes = 7;
                cfg.data.min_frames = 300;
                cfg.data.max_frames = 500;
                cfg.data.duration_logmean = 3.0;
                cfg.data.occlusion_rate = 0.3;
            }
            "sfhe-like" => {
                cfg.apply_desk();
                cfg.data.classes = 12;
                cfg.data.vocab = Some("sfhe12".into());
                cfg.data.planes = 1;
            }
            other => {
                return Err(Failure::config(format!(
                    "unknown profile {other:?}; expected one of {}",
                    PROFILES.join(", ")
                )))
            }
        }
        Ok(cfg)
    }

    fn apply_desk(&mut self) {
        self.data = desk_data();
        self.model.encoder = desk_encoder();
        self.model.denoiser = desk_denoiser();
        self.train = desk_train();
    }

    /// Profile, then file, then `--set` overrides, then `EDK_SEED`.
    pub fn load(profile: &str, file: Option<&Path>, sets: &[String]) -> Result<Self, Failure> {
        let base = Self::profile(profile)?;
        let mut tree = toml::Value::try_from(&base).map_err(|e| Failure::config(e.to_string()))?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Failure::config(format!("reading {}: {e}", path.display())))?;
            let user: toml::Value =
                toml::from_str(&text).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
            merge(&mut tree, user);
        }
        for s in sets {
            apply_set(&mut tree, s)?;
        }
        let mut cfg: Self = tree
            .try_into()
            .map_err(|e: toml::de::Error| Failure::config(e.to_string()))?;
        if let Ok(v) = std::env::var(SEED_ENV) {
            cfg.seed = v
                .trim()
                .parse()
                .map_err(|_| Failure::config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        cfg.propagate_seed();
        Ok(cfg)
    }

    fn propagate_seed(&mut self) {
        self.data.seed = self.seed;
        self.frame.seed = self.seed;
        self.train.seed = self.seed;
    }

    pub fn to_toml(&self) -> Result<String, Failure> {
        toml::to_string(self).map_err(|e| Failure::config(e.to_string()))
    }

    /// SHA-256 of the canonical TOML rendering.
    pub fn digest(&self) -> Result<String, Failure> {
        Ok(hex::encode(Sha256::digest(self.to_toml()?.as_bytes())))
    }

    /// Writes `<out>.config.toml` and returns the digest.
    pub fn snapshot(&self, out: &Path) -> Result<String, Failure> {
        let mut name = out.as_os_str().to_owned();
        name.push(".config.toml");
        std::fs::write(&name, self.to_toml()?)?;
        self.digest()
    }
}

pub fn desk_data() -> SyntheticConfig {
    SyntheticConfig {
        classes: 8,
        min_frames: 180,
        max_frames: 220,
        planes: 3,
        raw_dim: 32,
        duration_logmean: 3.2,
        duration_logstd: 0.3,
        noise_sigma: 0.1,
        occlusion_rate: 0.1,
        ..SyntheticConfig::default()
    }
}

pub fn desk_encoder() -> TemporalEncoderConfig {
    TemporalEncoderConfig {
        layers: 4,
        hidden: 64,
        tap_layers: vec![2, 4],
        window_base: 16,
        dropout: 0.1,
    }
}

pub fn desk_denoiser() -> DenoiserConfig {
    DenoiserConfig {
        blocks: 2,
        width: 128,
        ..DenoiserConfig::default()
    }
}

pub fn desk_train() -> TrainConfig {
    TrainConfig {
        epochs: 0,
        batch_size: 1,
        lr: 1e-3,
        max_steps: Some(2000),
        ..TrainConfig::default()
    }
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_table() && v.is_table() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

/// `a.b.c=v`; `v` is read as a TOML value, falling back to a bare string.
fn apply_set(tree: &mut toml::Value, spec: &str) -> Result<(), Failure> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Failure::config(format!("--set {spec:?}: expected key.path=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Failure::config(format!("--set {spec:?}: empty key segment")));
    }
    let value = parse_value(raw.trim());
    let mut node = tree;
    for key in &keys[..keys.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Failure::config(format!("--set {spec:?}: {key:?} is not inside a table")))?;
        node = table
            .entry(key.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    let table = node
        .as_table_mut()
        .ok_or_else(|| Failure::config(format!("--set {spec:?}: parent is not a table")))?;
    table.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    #[derive(Deserialize)]
    struct Wrap {
        v: toml::Value,
    }
    toml::from_str::<Wrap>(&format!("v = {raw}"))
        .map(|w| w.v)
        .unwrap_or_else(|_| toml::Value::String(raw.to_string()))
}
