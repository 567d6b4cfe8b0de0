//! Synthetic multi-focal sequences with occlusion-style corruption.
//!
//! Every stage owns a unit-norm prototype vector. A frame on one focal plane
//! is its stage prototype plus Gaussian noise, except that with probability
//! `occlusion_rate` the prototype is swapped for that of a developmentally
//! nearby stage. Swaps are drawn independently per plane, so averaging planes
//! pulls the frame back towards the true prototype. This is a simulator for
//! testing, not a model of real imaging.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stage::{StageSequence, StageVocabulary};

/// Probability that an interior stage is absent from a sequence.
pub const STAGE_SKIP_PROB: f64 = 0.05;

const PROTOTYPE_STREAM: u64 = 0x5052_4f54;
const SEQUENCE_STREAM: u64 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    /// Stage count `c`.
    pub classes: usize,
    /// Optional named vocabulary; must have `classes` entries.
    pub vocab: Option<String>,
    pub min_frames: usize,
    pub max_frames: usize,
    /// Focal planes `N`.
    pub planes: usize,
    /// Raw frame-vector dimension.
    pub raw_dim: usize,
    pub duration_logmean: f64,
    pub duration_logstd: f64,
    pub noise_sigma: f64,
    pub occlusion_rate: f64,
    /// Maximum rank distance of an occlusion substitute.
    pub confuse_span: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            classes: 8,
            vocab: None,
            min_frames: 100,
            max_frames: 300,
            planes: 3,
            raw_dim: 32,
            duration_logmean: 3.2,
            duration_logstd: 0.3,
            noise_sigma: 0.1,
            occlusion_rate: 0.1,
            confuse_span: 1,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.classes < 2 {
            return fail(format!("classes must be >= 2, got {}", self.classes));
        }
        if self.planes < 1 {
            return fail("planes must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.occlusion_rate) {
            return fail(format!("occlusion_rate {} outside [0, 1]", self.occlusion_rate));
        }
        if self.raw_dim < self.classes {
            return fail(format!(
                "raw_dim {} must be at least the class count {}",
                self.raw_dim, self.classes
            ));
        }
        if self.min_frames < 1 || self.min_frames > self.max_frames {
            return fail(format!(
                "frame range [{}, {}] is empty",
                self.min_frames, self.max_frames
            ));
        }
        if self.max_frames < self.classes {
            return fail(format!(
                "max_frames {} cannot hold {} stages of at least one frame",
                self.max_frames, self.classes
            ));
        }
        if self.noise_sigma < 0.0 || self.duration_logstd < 0.0 {
            return fail("noise_sigma and duration_logstd must be non-negative".into());
        }
        self.vocabulary().map(|_| ())
    }

    pub fn vocabulary(&self) -> Result<StageVocabulary> {
        let vocab = match &self.vocab {
            Some(name) => StageVocabulary::preset(name)
                .ok_or_else(|| Error::Config(format!("unknown vocabulary preset {name:?}")))?,
            None => StageVocabulary::generic(self.classes)?,
        };
        if vocab.len() != self.classes {
            return Err(Error::Config(format!(
                "vocabulary has {} stages but classes = {}",
                vocab.len(),
                self.classes
            )));
        }
        Ok(vocab)
    }

    /// RNG for sequence `index`, derived as `seed ^ index`.
    pub fn sequence_rng(&self, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ index);
        rng.set_stream(SEQUENCE_STREAM);
        rng
    }
}

/// `N x T x D_raw` frame vectors plus their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct RawFocalStack {
    /// Plane-major, frame-major, channel-minor.
    pub data: Vec<f32>,
    pub planes: usize,
    pub raw_dim: usize,
    pub labels: StageSequence,
    /// Focal offsets relative to the central plane.
    pub plane_ids: Vec<i32>,
    pub central: usize,
}

impl RawFocalStack {
    pub fn frames(&self) -> usize {
        self.labels.len()
    }

    pub fn plane(&self, i: usize) -> &[f32] {
        let n = self.frames() * self.raw_dim;
        &self.data[i * n..(i + 1) * n]
    }

    pub fn frame(&self, plane: usize, t: usize) -> &[f32] {
        let off = (plane * self.frames() + t) * self.raw_dim;
        &self.data[off..off + self.raw_dim]
    }
}

/// Per-stage prototypes shared by every sequence of a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Prototypes {
    pub vectors: Vec<Vec<f32>>,
}

impl Prototypes {
    pub fn draw(cfg: &SyntheticConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(PROTOTYPE_STREAM);
        let vectors = (0..cfg.classes)
            .map(|_| {
                let v: Vec<f64> = (0..cfg.raw_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.iter().map(|x| (x / norm) as f32).collect()
            })
            .collect();
        Self { vectors }
    }
}

/// Visits stages in order, skipping interior stages with probability
/// [`STAGE_SKIP_PROB`], with log-normal durations rescaled into the frame range.
pub fn sample_stage_sequence<R: Rng>(
    cfg: &SyntheticConfig,
    vocab: Arc<StageVocabulary>,
    rng: &mut R,
) -> Result<StageSequence> {
    let durations = LogNormal::new(cfg.duration_logmean, cfg.duration_logstd)
        .map_err(|e| Error::Config(format!("duration distribution: {e}")))?;
    let mut stages = Vec::new();
    let mut lengths = Vec::new();
    for s in 0..cfg.classes {
        let interior = s > 0 && s + 1 < cfg.classes;
        if interior && rng.random::<f64>() < STAGE_SKIP_PROB {
            continue;
        }
        let d: f64 = durations.sample(rng);
        stages.push(s);
        lengths.push(d.ceil().max(1.0) as usize);
    }
    let total: usize = lengths.iter().sum();
    let target = total.clamp(cfg.min_frames, cfg.max_frames).max(stages.len());
    if target != total {
        lengths = rescale(&lengths, target);
    }
    let labels = stages
        .iter()
        .zip(&lengths)
        .flat_map(|(&s, &n)| std::iter::repeat_n(s, n))
        .collect();
    StageSequence::new(labels, vocab)
}

/// Proportional rescale to an exact total, keeping every entry >= 1
/// (largest-remainder rounding).
fn rescale(lengths: &[usize], target: usize) -> Vec<usize> {
    let total: usize = lengths.iter().sum();
    let spare = target - lengths.len();
    let excess: Vec<f64> = lengths.iter().map(|&l| (l - 1) as f64).collect();
    let excess_total = (total - lengths.len()) as f64;
    let ideal: Vec<f64> = if excess_total > 0.0 {
        excess.iter().map(|e| e * spare as f64 / excess_total).collect()
    } else {
        vec![spare as f64 / lengths.len() as f64; lengths.len()]
    };
    let mut out: Vec<usize> = ideal.iter().map(|x| x.floor() as usize).collect();
    let mut left = spare - out.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = ideal[a] - ideal[a].floor();
        let fb = ideal[b] - ideal[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        out[i] += 1;
        left -= 1;
    }
    out.iter().map(|x| x + 1).collect()
}

pub fn render_raw_stack<R: Rng>(
    seq: &StageSequence,
    cfg: &SyntheticConfig,
    protos: &Prototypes,
    rng: &mut R,
) -> RawFocalStack {
    let t_len = seq.len();
    let c = cfg.classes;
    let mut data = Vec::with_capacity(cfg.planes * t_len * cfg.raw_dim);
    for _plane in 0..cfg.planes {
        for &s in seq.labels() {
            let mut shown = s;
            if rng.random::<f64>() < cfg.occlusion_rate {
                let lo = s.saturating_sub(cfg.confuse_span);
                let hi = (s + cfg.confuse_span).min(c - 1);
                shown = rng.random_range(lo..=hi);
            }
            for &p in &protos.vectors[shown] {
                let eps: f64 = StandardNormal.sample(rng);
                data.push((p as f64 + cfg.noise_sigma * eps) as f32);
            }
        }
    }
    let central = cfg.planes / 2;
    RawFocalStack {
        data,
        planes: cfg.planes,
        raw_dim: cfg.raw_dim,
        labels: seq.clone(),
        plane_ids: (0..cfg.planes).map(|i| i as i32 - central as i32).collect(),
        central,
    }
}

/// `count` sequences; sequence `i` uses the RNG derived from `seed ^ i`.
pub fn generate_dataset(cfg: &SyntheticConfig, count: usize) -> Result<Vec<RawFocalStack>> {
    cfg.validate()?;
    let vocab = Arc::new(cfg.vocabulary()?);
    let protos = Prototypes::draw(cfg);
    (0..count)
        .map(|i| {
            let mut rng = cfg.sequence_rng(i as u64);
            let seq = sample_stage_sequence(cfg, vocab.clone(), &mut rng)?;
            Ok(render_raw_stack(&seq, cfg, &protos, &mut rng))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Dataset file: "EDK1", u64 LE header length, JSON header, f32 LE payload in
// record-major, plane-major, frame-major, channel-minor order.

pub const DATASET_MAGIC: &[u8; 4] = b"EDK1";

#[derive(Debug, Serialize, Deserialize)]
struct DatasetHeader {
    record_count: usize,
    planes: usize,
    raw_dim: usize,
    vocab: Vec<String>,
    central_plane: usize,
    records: Vec<RecordHeader>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RecordHeader {
    frames: usize,
    labels: Vec<usize>,
}

pub fn write_dataset(stacks: &[RawFocalStack], path: &Path) -> Result<()> {
    let first = stacks
        .first()
        .ok_or_else(|| Error::Data("refusing to write an empty dataset".into()))?;
    for (i, s) in stacks.iter().enumerate() {
        if s.planes != first.planes
            || s.raw_dim != first.raw_dim
            || s.central != first.central
            || s.labels.vocab() != first.labels.vocab()
        {
            return Err(Error::DimensionMismatch {
                record: i,
                detail: "planes, raw_dim, central plane and vocabulary must agree across records".into(),
            });
        }
        if s.data.len() != s.planes * s.frames() * s.raw_dim {
            return Err(Error::DimensionMismatch {
                record: i,
                detail: format!(
                    "{} values for shape {}x{}x{}",
                    s.data.len(),
                    s.planes,
                    s.frames(),
                    s.raw_dim
                ),
            });
        }
    }
    let header = DatasetHeader {
        record_count: stacks.len(),
        planes: first.planes,
        raw_dim: first.raw_dim,
        vocab: first.labels.vocab().names().to_vec(),
        central_plane: first.central,
        records: stacks
            .iter()
            .map(|s| RecordHeader {
                frames: s.frames(),
                labels: s.labels.labels().to_vec(),
            })
            .collect(),
    };
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_header(&mut out, DATASET_MAGIC, &serde_json::to_vec(&header)?)?;
    for s in stacks {
        write_f32s(&mut out, &s.data)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<RawFocalStack>> {
    let bytes = std::fs::read(path)?;
    let (header_bytes, mut payload) = split_header(&bytes, DATASET_MAGIC)?;
    let header: DatasetHeader =
        serde_json::from_slice(header_bytes).map_err(|e| Error::Header(format!("header JSON: {e}")))?;
    if header.records.len() != header.record_count {
        return Err(Error::Header(format!(
            "record_count {} but {} record entries",
            header.record_count,
            header.records.len()
        )));
    }
    if header.planes == 0 || header.central_plane >= header.planes {
        return Err(Error::Header(format!(
            "central plane {} outside {} planes",
            header.central_plane, header.planes
        )));
    }
    let vocab = Arc::new(StageVocabulary::new(header.vocab).map_err(|e| Error::Header(e.to_string()))?);
    let mut stacks = Vec::with_capacity(header.record_count);
    for (i, rec) in header.records.into_iter().enumerate() {
        if rec.labels.len() != rec.frames {
            return Err(Error::DimensionMismatch {
                record: i,
                detail: format!("{} labels for {} frames", rec.labels.len(), rec.frames),
            });
        }
        let labels = StageSequence::new(rec.labels, vocab.clone()).map_err(|e| Error::DimensionMismatch {
            record: i,
            detail: e.to_string(),
        })?;
        let n = header.planes * rec.frames * header.raw_dim;
        let (data, rest) = take_f32s(payload, n, i)?;
        payload = rest;
        stacks.push(RawFocalStack {
            data,
            planes: header.planes,
            raw_dim: header.raw_dim,
            labels,
            plane_ids: (0..header.planes)
                .map(|p| p as i32 - header.central_plane as i32)
                .collect(),
            central: header.central_plane,
        });
    }
    if !payload.is_empty() {
        return Err(Error::Header(format!("{} trailing payload bytes", payload.len())));
    }
    Ok(stacks)
}

pub(crate) fn write_header<W: Write>(out: &mut W, magic: &[u8; 4], json: &[u8]) -> Result<()> {
    out.write_all(magic)?;
    out.write_all(&(json.len() as u64).to_le_bytes())?;
    out.write_all(json)?;
    Ok(())
}

pub(crate) fn write_f32s<W: Write>(out: &mut W, values: &[f32]) -> Result<()> {
    for v in values {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Checks the magic and returns (header JSON, payload).
pub(crate) fn split_header<'a>(bytes: &'a [u8], magic: &[u8; 4]) -> Result<(&'a [u8], &'a [u8])> {
    if bytes.len() < 12 {
        return Err(Error::Header(format!("file too short ({} bytes)", bytes.len())));
    }
    if &bytes[..4] != magic {
        return Err(Error::Header(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&bytes[..4]),
            String::from_utf8_lossy(magic)
        )));
    }
    let len = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
    let rest = &bytes[12..];
    if len > rest.len() {
        return Err(Error::Header(format!("header length {len} exceeds file size")));
    }
    Ok(rest.split_at(len))
}

pub(crate) fn take_f32s(payload: &[u8], n: usize, record: usize) -> Result<(Vec<f32>, &[u8])> {
    let need = n * 4;
    if payload.len() < need {
        return Err(Error::Truncated {
            record,
            expected: need,
            found: payload.len(),
        });
    }
    let (head, rest) = payload.split_at(need);
    let mut values = Vec::with_capacity(n);
    let mut buf = [0u8; 4];
    let mut reader = head;
    while reader.read_exact(&mut buf).is_ok() {
        values.push(f32::from_le_bytes(buf));
    }
    Ok((values, rest))
}
