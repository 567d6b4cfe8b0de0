//! Stage vocabularies, per-frame label sequences and their run-length view.

use std::collections::HashSet;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MFHE15: [&str; 15] = [
    "tPB2", "tPNa", "tPNf", "t2", "t3", "t4", "t5", "t6", "t7", "t8", "t9+", "tM", "tSB", "tB", "tEB",
];

const SFHE12: [&str; 12] = [
    "tPNa", "tPNf", "t2", "t3", "t4", "t5", "t6", "t7", "t8", "tSC", "tM", "tSB",
];

/// Ordered set of stage names. Position in `names` is the stage id; `order`
/// gives each id's rank in developmental order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageVocabulary {
    names: Vec<String>,
    order: Vec<usize>,
}

impl StageVocabulary {
    /// Vocabulary whose developmental order is the listing order.
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        let order = (0..names.len()).collect();
        Self::with_order(names, order)
    }

    pub fn with_order(names: Vec<String>, order: Vec<usize>) -> Result<Self> {
        if names.len() < 2 {
            return Err(Error::Config(format!(
                "a stage vocabulary needs at least 2 stages, got {}",
                names.len()
            )));
        }
        let mut seen = HashSet::new();
        for name in &names {
            if name.is_empty() {
                return Err(Error::Config("empty stage name".into()));
            }
            if !seen.insert(name.as_str()) {
                return Err(Error::Config(format!("duplicate stage name {name:?}")));
            }
        }
        let mut sorted = order.clone();
        sorted.sort_unstable();
        if order.len() != names.len() || sorted.iter().enumerate().any(|(i, &r)| i != r) {
            return Err(Error::Config(
                "developmental order must be a permutation of stage ids".into(),
            ));
        }
        Ok(Self { names, order })
    }

    /// The 15-stage multi-focal vocabulary (tPB2 .. tEB).
    pub fn mfhe15() -> Self {
        Self::new(MFHE15).expect("preset is valid")
    }

    /// The 12-stage single-focal vocabulary (tPNa .. tSB).
    pub fn sfhe12() -> Self {
        Self::new(SFHE12).expect("preset is valid")
    }

    /// `s0, s1, ...` for synthetic data without a named preset.
    pub fn generic(c: usize) -> Result<Self> {
        Self::new((0..c).map(|i| format!("s{i}")))
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "mfhe15" => Some(Self::mfhe15()),
            "sfhe12" => Some(Self::sfhe12()),
            _ => None,
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn id_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn rank(&self, id: usize) -> usize {
        self.order[id]
    }
}

/// Per-frame stage ids over a shared vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageSequence {
    labels: Vec<usize>,
    vocab: Arc<StageVocabulary>,
}

impl StageSequence {
    pub fn new(labels: Vec<usize>, vocab: Arc<StageVocabulary>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Data("a stage sequence needs at least one frame".into()));
        }
        if let Some((i, &bad)) = labels.iter().enumerate().find(|(_, &l)| l >= vocab.len()) {
            return Err(Error::Data(format!(
                "frame {i}: stage id {bad} outside vocabulary of {} stages",
                vocab.len()
            )));
        }
        Ok(Self { labels, vocab })
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn vocab(&self) -> &Arc<StageVocabulary> {
        &self.vocab
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.vocab.len()
    }

    /// T x c row-major indicator matrix.
    pub fn one_hot(&self) -> Vec<Vec<u8>> {
        one_hot(&self.labels, self.vocab.len())
    }

    pub fn segments(&self) -> SegmentList {
        SegmentList::from_labels(&self.labels)
    }

    pub fn boundary_targets(&self, sigma: f64) -> BoundaryTarget {
        boundary_targets(&self.labels, sigma)
    }

    /// True when developmental rank never decreases across frames.
    pub fn is_monotone(&self) -> bool {
        self.labels
            .windows(2)
            .all(|w| self.vocab.rank(w[0]) <= self.vocab.rank(w[1]))
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let file: LabelFile = serde_json::from_str(&text)?;
        file.into_sequence()
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let file = LabelFile::from(self);
        std::fs::write(path, serde_json::to_string(&file)?)?;
        Ok(())
    }
}

/// On-disk label file: `{"vocab": [names], "labels": [ids]}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabelFile {
    pub vocab: Vec<String>,
    pub labels: Vec<usize>,
}

impl LabelFile {
    pub fn into_sequence(self) -> Result<StageSequence> {
        let vocab = Arc::new(StageVocabulary::new(self.vocab)?);
        StageSequence::new(self.labels, vocab)
    }
}

impl From<&StageSequence> for LabelFile {
    fn from(seq: &StageSequence) -> Self {
        Self {
            vocab: seq.vocab.names().to_vec(),
            labels: seq.labels.clone(),
        }
    }
}

pub fn one_hot(labels: &[usize], c: usize) -> Vec<Vec<u8>> {
    labels
        .iter()
        .map(|&l| {
            let mut row = vec![0u8; c];
            row[l] = 1;
            row
        })
        .collect()
}

/// A maximal run of one stage over `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub stage: usize,
    pub start: usize,
    pub end: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SegmentList {
    segments: Vec<Segment>,
}

impl SegmentList {
    /// Validates that `segments` tile `[0, T)` with no repeated adjacent stage.
    pub fn new(segments: Vec<Segment>) -> Result<Self> {
        let mut cursor = 0;
        for (i, s) in segments.iter().enumerate() {
            if s.start != cursor || s.end <= s.start {
                return Err(Error::Data(format!(
                    "segment {i} [{}, {}) does not continue the tiling at frame {cursor}",
                    s.start, s.end
                )));
            }
            if i > 0 && segments[i - 1].stage == s.stage {
                return Err(Error::Data(format!(
                    "segments {} and {i} share stage {}",
                    i - 1,
                    s.stage
                )));
            }
            cursor = s.end;
        }
        Ok(Self { segments })
    }

    pub fn from_labels(labels: &[usize]) -> Self {
        let mut segments: Vec<Segment> = Vec::new();
        for (t, &l) in labels.iter().enumerate() {
            match segments.last_mut() {
                Some(last) if last.stage == l => last.end = t + 1,
                _ => segments.push(Segment {
                    stage: l,
                    start: t,
                    end: t + 1,
                }),
            }
        }
        Self { segments }
    }

    pub fn expand(&self) -> Vec<usize> {
        self.segments
            .iter()
            .flat_map(|s| std::iter::repeat_n(s.stage, s.len()))
            .collect()
    }

    pub fn as_slice(&self) -> &[Segment] {
        &self.segments
    }

    pub fn stages(&self) -> Vec<usize> {
        self.segments.iter().map(|s| s.stage).collect()
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }
}

/// Per-frame boundary supervision in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryTarget {
    pub values: Vec<f64>,
}

/// Unit impulse at the first frame of every segment but the first, spread by a
/// peak-one Gaussian of half-width `ceil(3 sigma)` and clamped to `[0, 1]`.
pub fn boundary_targets(labels: &[usize], sigma: f64) -> BoundaryTarget {
    let t_len = labels.len();
    let mut impulses = vec![0.0; t_len];
    for t in 1..t_len {
        if labels[t] != labels[t - 1] {
            impulses[t] = 1.0;
        }
    }
    if sigma <= 0.0 {
        return BoundaryTarget { values: impulses };
    }
    let half = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-half..=half)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let values = (0..t_len as isize)
        .map(|t| {
            let mut acc = 0.0;
            for (ki, k) in (-half..=half).enumerate() {
                let src = t - k;
                if src >= 0 && (src as usize) < t_len {
                    acc += kernel[ki] * impulses[src as usize];
                }
            }
            acc.clamp(0.0, 1.0)
        })
        .collect();
    BoundaryTarget { values }
}
