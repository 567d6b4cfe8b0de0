//! Frame accuracy, segmental edit score, F1@k and per-class accuracy.
//! All scores are percentages in `[0, 100]`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stage::SegmentList;

fn check_lengths(pred: &[usize], gt: &[usize]) -> Result<()> {
    if pred.len() != gt.len() || gt.is_empty() {
        return Err(Error::Shape(format!(
            "prediction has {} frames, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    Ok(())
}

pub fn frame_accuracy(pred: &[usize], gt: &[usize]) -> Result<f64> {
    check_lengths(pred, gt)?;
    let hits = pred.iter().zip(gt).filter(|(p, g)| p == g).count();
    Ok(100.0 * hits as f64 / gt.len() as f64)
}

/// Levenshtein distance with unit costs.
pub fn levenshtein(a: &[usize], b: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn edit_score(pred: &[usize], gt: &[usize]) -> Result<f64> {
    if pred.is_empty() || gt.is_empty() {
        return Err(Error::Shape("edit score needs non-empty sequences".into()));
    }
    let p = SegmentList::from_labels(pred).stages();
    let g = SegmentList::from_labels(gt).stages();
    let d = levenshtein(&p, &g) as f64;
    Ok((100.0 * (1.0 - d / p.len().max(g.len()) as f64)).max(0.0))
}

/// True/false positive and false negative segment counts at one threshold.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl SegmentCounts {
    pub fn f1(&self) -> f64 {
        let (tp, fp, fn_) = (self.tp as f64, self.fp as f64, self.fn_ as f64);
        let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let recall = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
        if precision + recall == 0.0 {
            0.0
        } else {
            100.0 * 2.0 * precision * recall / (precision + recall)
        }
    }

    pub fn add(&mut self, other: SegmentCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }
}

/// Greedy segment matching: each predicted segment, in temporal order, takes
/// the same-label ground-truth segment of highest IoU (first on ties); it is a
/// hit when IoU > `threshold` and that segment is still unclaimed.
pub fn segment_counts(pred: &[usize], gt: &[usize], threshold: f64) -> Result<SegmentCounts> {
    check_lengths(pred, gt)?;
    let p = SegmentList::from_labels(pred);
    let g = SegmentList::from_labels(gt);
    let mut claimed = vec![false; g.len()];
    let mut counts = SegmentCounts::default();
    for ps in p.as_slice() {
        let mut best: Option<(usize, f64)> = None;
        for (j, gs) in g.as_slice().iter().enumerate() {
            if gs.stage != ps.stage {
                continue;
            }
            let inter = ps.end.min(gs.end).saturating_sub(ps.start.max(gs.start));
            let union = ps.end.max(gs.end) - ps.start.min(gs.start);
            let iou = inter as f64 / union as f64;
            if best.is_none_or(|(_, b)| iou > b) {
                best = Some((j, iou));
            }
        }
        match best {
            Some((j, iou)) if iou > threshold && !claimed[j] => {
                claimed[j] = true;
                counts.tp += 1;
            }
            _ => counts.fp += 1,
        }
    }
    counts.fn_ = g.len() - counts.tp;
    Ok(counts)
}

/// Segmental F1 at IoU threshold `k / 100`.
pub fn f1_at(pred: &[usize], gt: &[usize], k: u32) -> Result<f64> {
    Ok(segment_counts(pred, gt, k as f64 / 100.0)?.f1())
}

/// Accuracy restricted to each stage present in `gt`.
pub fn per_class_accuracy(pred: &[usize], gt: &[usize]) -> Result<BTreeMap<usize, f64>> {
    let counts = per_class_counts(pred, gt)?;
    Ok(counts
        .into_iter()
        .map(|(s, (hit, n))| (s, 100.0 * hit as f64 / n as f64))
        .collect())
}

/// `stage -> (correct frames, frames)` for stages present in `gt`.
pub fn per_class_counts(pred: &[usize], gt: &[usize]) -> Result<BTreeMap<usize, (usize, usize)>> {
    check_lengths(pred, gt)?;
    let mut out: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (p, g) in pred.iter().zip(gt) {
        let e = out.entry(*g).or_default();
        e.1 += 1;
        if p == g {
            e.0 += 1;
        }
    }
    Ok(out)
}

pub const F1_THRESHOLDS: [u32; 3] = [10, 25, 50];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub acc: f64,
    pub edit: f64,
    pub f1_10: f64,
    pub f1_25: f64,
    pub f1_50: f64,
    pub avg: f64,
    pub per_class_acc: BTreeMap<String, f64>,
}

impl MetricReport {
    /// Builds a report; `avg` is the mean of the five headline metrics.
    pub fn new(acc: f64, edit: f64, f1: [f64; 3], per_class_acc: BTreeMap<String, f64>) -> Self {
        Self {
            acc,
            edit,
            f1_10: f1[0],
            f1_25: f1[1],
            f1_50: f1[2],
            avg: average_of_five([acc, edit, f1[0], f1[1], f1[2]]),
            per_class_acc,
        }
    }

    /// Metrics of one predicted sequence; class names come from `names`.
    pub fn for_sequence(pred: &[usize], gt: &[usize], names: &[String]) -> Result<Self> {
        let f1 = [f1_at(pred, gt, 10)?, f1_at(pred, gt, 25)?, f1_at(pred, gt, 50)?];
        let per_class = per_class_accuracy(pred, gt)?
            .into_iter()
            .map(|(s, v)| (class_name(names, s), v))
            .collect();
        Ok(Self::new(
            frame_accuracy(pred, gt)?,
            edit_score(pred, gt)?,
            f1,
            per_class,
        ))
    }

    /// Uniform mean of several reports. A class's accuracy is averaged over
    /// the reports in which it appears.
    pub fn mean(reports: &[MetricReport]) -> Result<Self> {
        if reports.is_empty() {
            return Err(Error::Data("cannot average zero reports".into()));
        }
        let n = reports.len() as f64;
        let m = |f: fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        let mut classes: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for r in reports {
            for (k, v) in &r.per_class_acc {
                let e = classes.entry(k.clone()).or_default();
                e.0 += v;
                e.1 += 1;
            }
        }
        let per_class = classes.into_iter().map(|(k, (s, c))| (k, s / c as f64)).collect();
        Ok(Self::new(
            m(|r| r.acc),
            m(|r| r.edit),
            [m(|r| r.f1_10), m(|r| r.f1_25), m(|r| r.f1_50)],
            per_class,
        ))
    }
}

pub fn average_of_five(v: [f64; 5]) -> f64 {
    v.iter().sum::<f64>() / 5.0
}

pub fn class_name(names: &[String], id: usize) -> String {
    names.get(id).cloned().unwrap_or_else(|| id.to_string())
}

/// Pooled metrics over several sequences: accuracy and per-class accuracy over
/// all frames, F1 from summed segment counts, edit averaged per sequence
/// (it has no pooled form).
pub fn pooled_report(pairs: &[(Vec<usize>, Vec<usize>)], names: &[String]) -> Result<MetricReport> {
    if pairs.is_empty() {
        return Err(Error::Data("cannot pool zero sequences".into()));
    }
    let mut hits = 0usize;
    let mut frames = 0usize;
    let mut counts = [SegmentCounts::default(); 3];
    let mut classes: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    let mut edit = 0.0;
    for (pred, gt) in pairs {
        check_lengths(pred, gt)?;
        hits += pred.iter().zip(gt).filter(|(p, g)| p == g).count();
        frames += gt.len();
        for (c, k) in counts.iter_mut().zip(F1_THRESHOLDS) {
            c.add(segment_counts(pred, gt, k as f64 / 100.0)?);
        }
        for (s, (h, n)) in per_class_counts(pred, gt)? {
            let e = classes.entry(s).or_default();
            e.0 += h;
            e.1 += n;
        }
        edit += edit_score(pred, gt)?;
    }
    let per_class = classes
        .into_iter()
        .map(|(s, (h, n))| (class_name(names, s), 100.0 * h as f64 / n as f64))
        .collect();
    Ok(MetricReport::new(
        100.0 * hits as f64 / frames as f64,
        edit / pairs.len() as f64,
        [counts[0].f1(), counts[1].f1(), counts[2].f1()],
        per_class,
    ))
}
