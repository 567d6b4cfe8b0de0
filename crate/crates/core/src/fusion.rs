//! Prefusion of per-plane features by averaging over the focal-plane axis.

use crate::error::{Error, Result};
use crate::frame_encoder::FocalFeatureStack;
use crate::stage::StageSequence;

/// `T x D` fused features, frame-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedFeatureSequence {
    pub data: Vec<f32>,
    pub frames: usize,
    pub dim: usize,
    pub labels: Option<StageSequence>,
}

impl FusedFeatureSequence {
    pub fn frame(&self, t: usize) -> &[f32] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }
}

/// Mean over planes. Each element is accumulated in f64 over its values in
/// sorted order, so the result does not depend on plane order at all.
pub fn fuse(stack: &FocalFeatureStack) -> Result<FusedFeatureSequence> {
    if stack.planes == 0 || stack.frames == 0 {
        return Err(Error::Data("cannot fuse an empty feature stack".into()));
    }
    let n = stack.frames * stack.dim;
    let data = if stack.planes == 1 {
        stack.data.clone()
    } else {
        let mut column = vec![0f32; stack.planes];
        (0..n)
            .map(|e| {
                for (p, v) in column.iter_mut().enumerate() {
                    *v = stack.data[p * n + e];
                }
                column.sort_by(f32::total_cmp);
                let sum: f64 = column.iter().map(|&v| v as f64).sum();
                (sum / stack.planes as f64) as f32
            })
            .collect()
    };
    Ok(FusedFeatureSequence {
        data,
        frames: stack.frames,
        dim: stack.dim,
        labels: stack.labels.clone(),
    })
}

/// Indices of `count` planes chosen symmetrically around `central`: the
/// central plane, then pairs at growing distance on both sides.
pub fn symmetric_planes(total: usize, central: usize, count: usize) -> Result<Vec<usize>> {
    if count == 0 || count > total || central >= total {
        return Err(Error::Config(format!(
            "cannot select {count} of {total} planes around plane {central}"
        )));
    }
    if count.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "symmetric plane selection needs an odd count, got {count}"
        )));
    }
    let half = count / 2;
    if central < half || central + half >= total {
        return Err(Error::Config(format!(
            "{count} planes do not fit symmetrically around plane {central} of {total}"
        )));
    }
    Ok((central - half..=central + half).collect())
}

/// Applies a symmetric selection to `stack`, then fuses.
pub fn fuse_selected(stack: &FocalFeatureStack, central: usize, count: usize) -> Result<FusedFeatureSequence> {
    let planes = symmetric_planes(stack.planes, central, count)?;
    fuse(&stack.select_planes(&planes)?)
}
