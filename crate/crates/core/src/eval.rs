//! Dataset evaluation over sampling-step counts and sampler seeds.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::FusedFeatureSequence;
use crate::metrics::{pooled_report, MetricReport};
use crate::model::Stage2Model;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregate {
    /// Metrics per sequence, then a uniform mean.
    PerSeq,
    /// Frames and segment counts pooled across sequences.
    Pooled,
}

impl std::str::FromStr for Aggregate {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-seq" => Ok(Self::PerSeq),
            "pooled" => Ok(Self::Pooled),
            other => Err(Error::Config(format!("unknown aggregation {other:?} (per-seq|pooled)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceMetrics {
    pub index: usize,
    pub seed: u64,
    pub metrics: MetricReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub steps: usize,
    /// Mean over seeds of the dataset-level metrics.
    pub metrics: MetricReport,
    pub per_seed: Vec<MetricReport>,
    pub per_sequence: Vec<SequenceMetrics>,
}

/// Sampler seed for sequence `index` under run seed `seed`.
pub fn sequence_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (index as u64)
}

/// Predicted labels from any per-sequence predictor.
pub trait Predictor {
    fn prepare(&self, seq: &FusedFeatureSequence) -> Result<Box<dyn PreparedSequence + '_>>;
}

/// Sequence-level state reused across step counts and seeds.
pub trait PreparedSequence {
    fn predict(&self, steps: usize, seed: u64) -> Result<Vec<usize>>;
}

impl Predictor for Stage2Model {
    fn prepare(&self, seq: &FusedFeatureSequence) -> Result<Box<dyn PreparedSequence + '_>> {
        let conds = self.conditions(seq)?;
        Ok(Box::new(PreparedModel { model: self, conds }))
    }
}

struct PreparedModel<'a> {
    model: &'a Stage2Model,
    conds: crate::condition::ConditionPair,
}

impl PreparedSequence for PreparedModel<'_> {
    fn predict(&self, steps: usize, seed: u64) -> Result<Vec<usize>> {
        Ok(self.model.sample(&self.conds, steps, seed)?.labels)
    }
}

/// One report per step count. Conditions are computed once per sequence.
pub fn evaluate(
    model: &dyn Predictor,
    data: &[FusedFeatureSequence],
    steps: &[usize],
    seeds: &[u64],
    aggregate: Aggregate,
    names: &[String],
) -> Result<Vec<StepReport>> {
    if data.is_empty() || steps.is_empty() || seeds.is_empty() {
        return Err(Error::Config(
            "evaluation needs sequences, step counts and seeds".into(),
        ));
    }
    let truth: Vec<&[usize]> = data
        .iter()
        .enumerate()
        .map(|(i, s)| {
            s.labels
                .as_ref()
                .map(|l| l.labels())
                .ok_or_else(|| Error::Data(format!("evaluation sequence {i} has no labels")))
        })
        .collect::<Result<_>>()?;
    // preds[step][seed][sequence]
    let mut preds = vec![vec![Vec::with_capacity(data.len()); seeds.len()]; steps.len()];
    for (i, seq) in data.iter().enumerate() {
        let prepared = model.prepare(seq)?;
        for (si, &k) in steps.iter().enumerate() {
            for (ri, &seed) in seeds.iter().enumerate() {
                preds[si][ri].push(prepared.predict(k, sequence_seed(seed, i))?);
            }
        }
    }
    let mut out = Vec::with_capacity(steps.len());
    for (si, &k) in steps.iter().enumerate() {
        let mut per_seed = Vec::with_capacity(seeds.len());
        let mut per_sequence = Vec::new();
        for (ri, &seed) in seeds.iter().enumerate() {
            let seq_reports: Vec<MetricReport> = preds[si][ri]
                .iter()
                .zip(&truth)
                .map(|(p, g)| MetricReport::for_sequence(p, g, names))
                .collect::<Result<_>>()?;
            per_seed.push(match aggregate {
                Aggregate::PerSeq => MetricReport::mean(&seq_reports)?,
                Aggregate::Pooled => {
                    let pairs: Vec<(Vec<usize>, Vec<usize>)> = preds[si][ri]
                        .iter()
                        .zip(&truth)
                        .map(|(p, g)| (p.clone(), g.to_vec()))
                        .collect();
                    pooled_report(&pairs, names)?
                }
            });
            per_sequence.extend(
                seq_reports
                    .into_iter()
                    .enumerate()
                    .map(|(index, metrics)| SequenceMetrics { index, seed, metrics }),
            );
        }
        out.push(StepReport {
            steps: k,
            metrics: MetricReport::mean(&per_seed)?,
            per_seed,
            per_sequence,
        });
    }
    Ok(out)
}
