//! Evaluation metrics: volumetric overlap and inter-slice smoothness.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::infer::CostReport;
use crate::math;
use crate::tensor::Real;
use crate::volume::{Axis, Kind, Volume};

/// Per-volume evaluation row: overlap per view, fused overlap, and how well
/// the prediction's slice-to-slice smoothness tracks the ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub case: String,
    pub dsc_coronal: Real,
    pub dsc_sagittal: Real,
    pub dsc_axial: Real,
    pub dsc_fused: Real,
    /// L2 distance between neighbor-slice dice profiles (fused vs truth).
    pub inter_slice: Real,
    /// Same distance divided by sqrt(profile length), comparable across
    /// volumes of different depth.
    pub inter_slice_normalized: Real,
    pub cost: Option<CostReport>,
}

fn require_mask(v: &Volume, what: &str) -> Result<()> {
    if v.kind != Kind::Mask {
        return Err(Error::Config(format!(
            "{what} must be a mask volume, got {:?}",
            v.kind
        )));
    }
    Ok(())
}

/// Dice-Sørensen coefficient 2|Y∩Z| / (|Y|+|Z|) between two masks.
/// Two empty masks agree perfectly and score 1.
pub fn dsc(y: &Volume, z: &Volume) -> Result<Real> {
    require_mask(y, "dsc ground truth")?;
    require_mask(z, "dsc prediction")?;
    if y.dims() != z.dims() {
        return Err(Error::Shape(format!(
            "dsc dims differ: {:?} vs {:?}",
            y.dims(),
            z.dims()
        )));
    }
    let mut inter = 0usize;
    let mut total = 0usize;
    for (a, b) in y.voxels.iter().zip(&z.voxels) {
        let fa = *a == 1.0;
        let fb = *b == 1.0;
        inter += (fa && fb) as usize;
        total += fa as usize + fb as usize;
    }
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as Real / total as Real)
}

/// Dice between each pair of neighboring slices along `axis`; length is
/// extent − 1. Empty-empty pairs score 1.
pub fn inter_slice_profile(m: &Volume, axis: Axis) -> Result<Vec<Real>> {
    require_mask(m, "profile input")?;
    let extent = m.axis_extent(axis);
    if extent < 2 {
        return Err(Error::Shape(format!(
            "profile needs at least 2 slices along {}, got {extent}",
            axis.name()
        )));
    }
    let mut profile = Vec::with_capacity(extent - 1);
    let mut prev = m.slice(axis, 1)?;
    for s in 2..=extent {
        let cur = m.slice(axis, s)?;
        let mut inter = 0usize;
        let mut total = 0usize;
        for (a, b) in prev.data.iter().zip(&cur.data) {
            let fa = *a == 1.0;
            let fb = *b == 1.0;
            inter += (fa && fb) as usize;
            total += fa as usize + fb as usize;
        }
        profile.push(if total == 0 {
            1.0
        } else {
            2.0 * inter as Real / total as Real
        });
        prev = cur;
    }
    Ok(profile)
}

/// L2 distance between the axial neighbor-slice dice profiles of a
/// prediction and the ground truth. Zero means the prediction's smoothness
/// matches the truth exactly; smaller is better.
pub fn inter_slice_similarity(pred: &Volume, gt: &Volume) -> Result<Real> {
    if pred.dims() != gt.dims() {
        return Err(Error::Shape(format!(
            "similarity dims differ: {:?} vs {:?}",
            pred.dims(),
            gt.dims()
        )));
    }
    let a = inter_slice_profile(pred, Axis::Axial)?;
    let b = inter_slice_profile(gt, Axis::Axial)?;
    let sq: Real = a
        .iter()
        .zip(&b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(math::sqrt(sq))
}

/// [`inter_slice_similarity`] divided by sqrt(profile length), so volumes of
/// different depth are comparable.
pub fn inter_slice_similarity_normalized(pred: &Volume, gt: &Volume) -> Result<Real> {
    let l2 = inter_slice_similarity(pred, gt)?;
    let n = (pred.axis_extent(Axis::Axial) - 1) as Real;
    Ok(l2 / math::sqrt(n))
}
