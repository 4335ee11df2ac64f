//! 3D volumes and the slice/group/regroup machinery around them.
//!
//! A volume is H x W x D with D outermost in memory. Slices are taken along
//! one of three anatomical axes; k consecutive slices form a group that a
//! 2D network consumes as channels. Regrouping inverts that: per-group
//! predictions are assembled back into a volume, averaging slices that
//! several groups share. Public indices are 1-based to match the grouping
//! notation (groups start at d = 1); everything internal is 0-based.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// What the voxel values mean, and therefore which ranges are legal.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    /// Unbounded finite intensities.
    Intensity,
    /// Values in [0, 1].
    Probability,
    /// Values exactly 0 or 1.
    Mask,
}

impl Kind {
    /// Stable one-byte tag used by serialized volumes.
    pub fn tag(self) -> u8 {
        match self {
            Kind::Intensity => 0,
            Kind::Probability => 1,
            Kind::Mask => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Kind::Intensity),
            1 => Ok(Kind::Probability),
            2 => Ok(Kind::Mask),
            other => Err(Error::Config(format!("unknown volume kind tag {other}"))),
        }
    }
}

/// Slicing direction. The extent along each axis differs: coronal yields H
/// slices, sagittal W, axial D.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Coronal,
    Sagittal,
    Axial,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::Coronal, Axis::Sagittal, Axis::Axial];

    pub fn name(self) -> &'static str {
        match self {
            Axis::Coronal => "coronal",
            Axis::Sagittal => "sagittal",
            Axis::Axial => "axial",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "coronal" => Ok(Axis::Coronal),
            "sagittal" => Ok(Axis::Sagittal),
            "axial" => Ok(Axis::Axial),
            other => Err(Error::Config(format!("unknown axis '{other}'"))),
        }
    }
}

/// Dense H x W x D scalar field.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub h: usize,
    pub w: usize,
    pub d: usize,
    /// Row-major with D outermost: index (h, w, d) lives at (d*H + h)*W + w.
    pub voxels: Vec<Real>,
    pub kind: Kind,
}

impl Volume {
    pub fn new(h: usize, w: usize, d: usize, voxels: Vec<Real>, kind: Kind) -> Result<Self> {
        if h == 0 || w == 0 || d == 0 {
            return Err(Error::Shape(format!("volume dims must be positive, got {h}x{w}x{d}")));
        }
        if voxels.len() != h * w * d {
            return Err(Error::Shape(format!(
                "{h}x{w}x{d} volume wants {} voxels, got {}",
                h * w * d,
                voxels.len()
            )));
        }
        let vol = Volume { h, w, d, voxels, kind };
        vol.check_values()?;
        Ok(vol)
    }

    pub fn zeros(h: usize, w: usize, d: usize, kind: Kind) -> Result<Self> {
        Self::new(h, w, d, vec![0.0; h * w * d], kind)
    }

    fn check_values(&self) -> Result<()> {
        let ok = match self.kind {
            Kind::Intensity => self.voxels.iter().all(|v| v.is_finite()),
            Kind::Probability => self.voxels.iter().all(|&v| (0.0..=1.0).contains(&v)),
            Kind::Mask => self.voxels.iter().all(|&v| v == 0.0 || v == 1.0),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Numeric(format!(
                "voxel values violate the {:?} range",
                self.kind
            )))
        }
    }

    #[inline]
    pub fn vox_index(&self, h: usize, w: usize, d: usize) -> usize {
        (d * self.h + h) * self.w + w
    }

    #[inline]
    pub fn at(&self, h: usize, w: usize, d: usize) -> Real {
        self.voxels[self.vox_index(h, w, d)]
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.h, self.w, self.d)
    }

    /// Number of slices along `axis`.
    pub fn axis_extent(&self, axis: Axis) -> usize {
        match axis {
            Axis::Coronal => self.h,
            Axis::Sagittal => self.w,
            Axis::Axial => self.d,
        }
    }

    /// 2D extents of a slice taken along `axis`.
    pub fn slice_extents(&self, axis: Axis) -> (usize, usize) {
        slice_extents(self.dims(), axis)
    }

    /// Cross-section at 1-based `index` along `axis`, as a rank-2 tensor.
    pub fn slice(&self, axis: Axis, index: usize) -> Result<Tensor> {
        let extent = self.axis_extent(axis);
        if index == 0 || index > extent {
            return Err(Error::Bounds(format!(
                "slice {index} outside 1..={extent} along the {} axis",
                axis.name()
            )));
        }
        let s = index - 1;
        let (n1, n2) = self.slice_extents(axis);
        let mut data = vec![0.0; n1 * n2];
        for i in 0..n1 {
            for j in 0..n2 {
                let (h, w, d) = slice_coords(axis, s, i, j);
                data[i * n2 + j] = self.at(h, w, d);
            }
        }
        Tensor::new(vec![n1, n2], data)
    }

    /// Writes a rank-2 tensor back as the slice at 1-based `index`.
    pub fn set_slice(&mut self, axis: Axis, index: usize, slice: &Tensor) -> Result<()> {
        let extent = self.axis_extent(axis);
        if index == 0 || index > extent {
            return Err(Error::Bounds(format!(
                "slice {index} outside 1..={extent} along the {} axis",
                axis.name()
            )));
        }
        let (n1, n2) = self.slice_extents(axis);
        if slice.shape != [n1, n2] {
            return Err(Error::Shape(format!(
                "slice shape {:?} does not fit {n1}x{n2}",
                slice.shape
            )));
        }
        let s = index - 1;
        for i in 0..n1 {
            for j in 0..n2 {
                let (h, w, d) = slice_coords(axis, s, i, j);
                let idx = self.vox_index(h, w, d);
                self.voxels[idx] = slice.data[i * n2 + j];
            }
        }
        Ok(())
    }

    /// k consecutive slices starting at 1-based `start`, stacked as channels
    /// of a rank-3 tensor. Channel c holds slice `start + c`.
    pub fn extract_group(&self, axis: Axis, start: usize, k: usize) -> Result<Tensor> {
        let extent = self.axis_extent(axis);
        if k == 0 {
            return Err(Error::Shape("group thickness k must be >= 1".into()));
        }
        if start == 0 || start + k - 1 > extent {
            return Err(Error::Bounds(format!(
                "group [{start}, {}] outside 1..={extent} along the {} axis",
                start + k - 1,
                axis.name()
            )));
        }
        let (n1, n2) = self.slice_extents(axis);
        let mut data = Vec::with_capacity(k * n1 * n2);
        for c in 0..k {
            data.extend_from_slice(&self.slice(axis, start + c)?.data);
        }
        Tensor::new(vec![k, n1, n2], data)
    }
}

/// 2D extents of a slice of an (H, W, D) volume along `axis`.
pub fn slice_extents(dims: (usize, usize, usize), axis: Axis) -> (usize, usize) {
    let (h, w, d) = dims;
    match axis {
        Axis::Coronal => (w, d),
        Axis::Sagittal => (h, d),
        Axis::Axial => (h, w),
    }
}

/// Volume coordinates of entry (i, j) of 0-based slice `s` along `axis`.
#[inline]
fn slice_coords(axis: Axis, s: usize, i: usize, j: usize) -> (usize, usize, usize) {
    match axis {
        Axis::Coronal => (s, i, j),
        Axis::Sagittal => (i, s, j),
        Axis::Axial => (i, j, s),
    }
}

/// How many stride-1 groups of thickness k contain 1-based slice `s` of an
/// axis with `extent` slices (assuming every group start 1..=extent-k+1 is
/// present).
pub fn overlap_count(s: usize, k: usize, extent: usize) -> usize {
    s.min(k).min(extent - s + 1).min(extent - k + 1)
}

/// Assembles per-group predictions back into a probability volume.
///
/// `groups` pairs each 1-based start index with a (k, s1, s2) prediction
/// whose channel c is the probability map for slice start+c. Overlapping
/// slices are averaged with their exact coverage counts; a slice no group
/// covers is an error.
pub fn regroup(
    axis: Axis,
    dims: (usize, usize, usize),
    k: usize,
    groups: &[(usize, Tensor)],
) -> Result<Volume> {
    let (h, w, d) = dims;
    let mut out = Volume::zeros(h, w, d, Kind::Probability)?;
    let extent = out.axis_extent(axis);
    let (n1, n2) = out.slice_extents(axis);
    if k == 0 || k > extent {
        return Err(Error::Shape(format!(
            "group thickness {k} invalid for {extent} slices"
        )));
    }
    let mut counts = vec![0usize; extent];
    let mut sums = vec![0.0; h * w * d];
    for (start, pred) in groups {
        if *start == 0 || start + k - 1 > extent {
            return Err(Error::Bounds(format!(
                "group start {start} outside 1..={}",
                extent - k + 1
            )));
        }
        if pred.shape != [k, n1, n2] {
            return Err(Error::Shape(format!(
                "group prediction {:?} does not fit {k}x{n1}x{n2}",
                pred.shape
            )));
        }
        for c in 0..k {
            let s = start - 1 + c;
            counts[s] += 1;
            for i in 0..n1 {
                for j in 0..n2 {
                    let (hh, ww, dd) = slice_coords(axis, s, i, j);
                    sums[out.vox_index(hh, ww, dd)] += pred.data[(c * n1 + i) * n2 + j];
                }
            }
        }
    }
    for (s, &count) in counts.iter().enumerate() {
        if count == 0 {
            return Err(Error::Coverage(format!(
                "slice {} along the {} axis is covered by no group",
                s + 1,
                axis.name()
            )));
        }
        for i in 0..n1 {
            for j in 0..n2 {
                let (hh, ww, dd) = slice_coords(axis, s, i, j);
                let idx = out.vox_index(hh, ww, dd);
                // rounding can push an average of probabilities a hair past 1
                out.voxels[idx] = (sums[idx] / count as Real).clamp(0.0, 1.0);
            }
        }
    }
    Ok(out)
}

/// Mini-batch of slice groups ready for the network.
#[derive(Debug, Clone)]
pub struct SliceGroupBatch {
    pub axis: Axis,
    /// 1-based group start indices, parallel to `data`.
    pub starts: Vec<usize>,
    pub k: usize,
    /// Each entry is (k, s1, s2).
    pub data: Vec<Tensor>,
    /// Matching label groups when training.
    pub labels: Option<Vec<Tensor>>,
}

impl SliceGroupBatch {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.starts.len() != self.data.len() {
            return Err(Error::Shape(format!(
                "{} starts for {} data tensors",
                self.starts.len(),
                self.data.len()
            )));
        }
        for t in &self.data {
            if t.rank() != 3 || t.shape[0] != self.k {
                return Err(Error::Shape(format!(
                    "group tensor {:?} does not have {} channels",
                    t.shape, self.k
                )));
            }
        }
        if let Some(labels) = &self.labels {
            if labels.len() != self.data.len() {
                return Err(Error::Shape(format!(
                    "{} labels for {} data tensors",
                    labels.len(),
                    self.data.len()
                )));
            }
            for (x, y) in self.data.iter().zip(labels) {
                if x.shape != y.shape {
                    return Err(Error::Shape(format!(
                        "label shape {:?} does not match data {:?}",
                        y.shape, x.shape
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Geometry of one pad-or-crop so predictions can be mapped back.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SliceFit {
    pub orig: (usize, usize),
    pub target: (usize, usize),
}

/// Maps a 0-based target coordinate to its source coordinate, if any.
/// `None` means the target cell is padding.
fn from_target(orig: usize, target: usize, j: usize) -> Option<usize> {
    if orig >= target {
        Some(j + (orig - target) / 2)
    } else {
        j.checked_sub((target - orig) / 2).filter(|&v| v < orig)
    }
}

/// Maps a 0-based source coordinate into the target, if it survives a crop.
fn to_target(orig: usize, target: usize, j: usize) -> Option<usize> {
    if orig >= target {
        j.checked_sub((orig - target) / 2).filter(|&v| v < target)
    } else {
        Some(j + (target - orig) / 2)
    }
}

/// Center-crops or zero-pads the last two dimensions to `th x tw`.
/// Works on rank-2 slices and rank-3 channel stacks.
pub fn pad_or_crop(t: &Tensor, th: usize, tw: usize) -> Result<(Tensor, SliceFit)> {
    if th == 0 || tw == 0 {
        return Err(Error::Shape("pad_or_crop target must be positive".into()));
    }
    let (c, h, w) = match t.rank() {
        2 => (1, t.shape[0], t.shape[1]),
        3 => (t.shape[0], t.shape[1], t.shape[2]),
        _ => {
            return Err(Error::Shape(format!(
                "pad_or_crop wants rank 2 or 3, got {:?}",
                t.shape
            )))
        }
    };
    let mut data = vec![0.0; c * th * tw];
    for ch in 0..c {
        for y in 0..th {
            let Some(sy) = from_target(h, th, y) else { continue };
            for x in 0..tw {
                let Some(sx) = from_target(w, tw, x) else { continue };
                data[(ch * th + y) * tw + x] = t.data[(ch * h + sy) * w + sx];
            }
        }
    }
    let shape = if t.rank() == 2 {
        vec![th, tw]
    } else {
        vec![c, th, tw]
    };
    let fit = SliceFit {
        orig: (h, w),
        target: (th, tw),
    };
    Ok((Tensor::new(shape, data)?, fit))
}

impl SliceFit {
    /// Maps a prediction at the target size back to the original extents.
    /// Regions that were cropped away come back as zeros.
    pub fn unmap(&self, pred: &Tensor) -> Result<Tensor> {
        let (th, tw) = self.target;
        let (h, w) = self.orig;
        let (c, rank2) = match pred.rank() {
            2 => (1, true),
            3 => (pred.shape[0], false),
            _ => {
                return Err(Error::Shape(format!(
                    "unmap wants rank 2 or 3, got {:?}",
                    pred.shape
                )))
            }
        };
        let spatial = if rank2 {
            [pred.shape[0], pred.shape[1]]
        } else {
            [pred.shape[1], pred.shape[2]]
        };
        if spatial != [th, tw] {
            return Err(Error::Shape(format!(
                "prediction {:?} does not match fitted size {th}x{tw}",
                pred.shape
            )));
        }
        let mut data = vec![0.0; c * h * w];
        for ch in 0..c {
            for y in 0..h {
                let Some(ty) = to_target(h, th, y) else { continue };
                for x in 0..w {
                    let Some(tx) = to_target(w, tw, x) else { continue };
                    data[(ch * h + y) * w + x] = pred.data[(ch * th + ty) * tw + tx];
                }
            }
        }
        let shape = if rank2 { vec![h, w] } else { vec![c, h, w] };
        Tensor::new(shape, data)
    }
}
