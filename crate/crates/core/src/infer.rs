//! Sliding single-axis inference, mask fusion, and window-count/cost
//! arithmetic for comparing scan schemes.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::model::{FusionMode, ModelConfig, T2DNet};
use crate::tensor::{Real, Tensor};
use crate::volume::{pad_or_crop, regroup, Axis, Kind, Volume};

/// Probabilities at or above this threshold binarize to foreground.
pub const BINARIZE_THRESHOLD: Real = 0.5;

/// Runs a predictor over every stride-1 thickness-`k` group along `axis`
/// and averages overlapping outputs into a probability volume.
///
/// Each group is padded or center-cropped to `s`x`s` before prediction and
/// mapped back afterwards, so the output aligns voxel-for-voxel with the
/// input. The predictor maps a (k, s, s) tensor to a (k, s, s) tensor of
/// probabilities.
pub fn predict_axis<F>(vol: &Volume, axis: Axis, k: usize, s: usize, predict: F) -> Result<Volume>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let extent = vol.axis_extent(axis);
    if k == 0 || k > extent {
        return Err(Error::Shape(format!(
            "group thickness {k} invalid for {extent} slices along {}",
            axis.name()
        )));
    }
    let mut groups = Vec::with_capacity(extent - k + 1);
    for start in 1..=extent - k + 1 {
        let group = vol.extract_group(axis, start, k)?;
        let (fitted, fit) = pad_or_crop(&group, s, s)?;
        let pred = predict(&fitted)?;
        if pred.shape != [k, s, s] {
            return Err(Error::Shape(format!(
                "predictor returned {:?}, expected {k}x{s}x{s}",
                pred.shape
            )));
        }
        groups.push((start, fit.unmap(&pred)?));
    }
    regroup(axis, vol.dims(), k, &groups)
}

/// [`predict_axis`] driven by a network.
pub fn predict_axis_net(net: &T2DNet, vol: &Volume, axis: Axis) -> Result<Volume> {
    predict_axis(vol, axis, net.config.k, net.config.input_size, |g| {
        net.predict(g)
    })
}

/// Thresholds a probability volume into a mask; `threshold` is inclusive.
pub fn binarize(p: &Volume, threshold: Real) -> Result<Volume> {
    if p.kind == Kind::Intensity {
        return Err(Error::Config(
            "binarize expects probabilities or a mask, not raw intensity".into(),
        ));
    }
    let voxels = p
        .voxels
        .iter()
        .map(|&v| if v >= threshold { 1.0 } else { 0.0 })
        .collect();
    let (h, w, d) = p.dims();
    Volume::new(h, w, d, voxels, Kind::Mask)
}

/// Voxelwise 2-of-3 majority vote over three masks.
pub fn fuse_views(a: &Volume, b: &Volume, c: &Volume) -> Result<Volume> {
    for (v, name) in [(a, "first"), (b, "second"), (c, "third")] {
        if v.kind != Kind::Mask {
            return Err(Error::Config(format!("{name} fusion input is not a mask")));
        }
    }
    if a.dims() != b.dims() || a.dims() != c.dims() {
        return Err(Error::Shape(format!(
            "fusion dims differ: {:?} / {:?} / {:?}",
            a.dims(),
            b.dims(),
            c.dims()
        )));
    }
    let voxels = a
        .voxels
        .iter()
        .zip(&b.voxels)
        .zip(&c.voxels)
        .map(|((x, y), z)| if x + y + z >= 2.0 { 1.0 } else { 0.0 })
        .collect();
    let (h, w, d) = a.dims();
    Volume::new(h, w, d, voxels, Kind::Mask)
}

/// Alternative fusion: voxelwise mean of three probability volumes.
/// Binarize the result separately.
pub fn fuse_views_mean(a: &Volume, b: &Volume, c: &Volume) -> Result<Volume> {
    for (v, name) in [(a, "first"), (b, "second"), (c, "third")] {
        if v.kind != Kind::Probability {
            return Err(Error::Config(format!(
                "{name} mean-fusion input is not a probability volume"
            )));
        }
    }
    if a.dims() != b.dims() || a.dims() != c.dims() {
        return Err(Error::Shape(format!(
            "fusion dims differ: {:?} / {:?} / {:?}",
            a.dims(),
            b.dims(),
            c.dims()
        )));
    }
    let voxels = a
        .voxels
        .iter()
        .zip(&b.voxels)
        .zip(&c.voxels)
        .map(|((x, y), z)| (x + y + z) / 3.0)
        .collect();
    let (h, w, d) = a.dims();
    Volume::new(h, w, d, voxels, Kind::Probability)
}

/// How a volume is scanned: whole slices, thickness-k slice groups, or
/// dense 3D patches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WindowScheme {
    /// One window per slice along `axis`.
    Slice2d { axis: Axis },
    /// One window per stride-1 thickness-`k` group along `axis`.
    Thick2d { axis: Axis, k: usize },
    /// Regular 3D grid; a leftover tail adds one final window clamped to
    /// the volume boundary instead of erroring.
    Patch3d {
        patch: (usize, usize, usize),
        stride: (usize, usize, usize),
    },
}

impl WindowScheme {
    pub fn name(self) -> &'static str {
        match self {
            WindowScheme::Slice2d { .. } => "slice2d",
            WindowScheme::Thick2d { .. } => "thick2d",
            WindowScheme::Patch3d { .. } => "patch3d",
        }
    }
}

/// Window count and analytic multiply-accumulate cost for one scheme over
/// one volume geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct CostReport {
    pub scheme: String,
    pub windows: u64,
    pub macs_per_window: u128,
    pub total_macs: u128,
    /// Measured wall time, filled in by callers that actually run the scan.
    pub wall_ms: Option<Real>,
}

/// Output extent of a 3x3 stride-2 pad-1 convolution.
fn half(n: usize) -> usize {
    (n - 1) / 2 + 1
}

fn conv_macs(cout: usize, oh: usize, ow: usize, cin: usize, taps: usize) -> u128 {
    cout as u128 * oh as u128 * ow as u128 * cin as u128 * taps as u128
}

/// Multiply-accumulates of one forward pass: all convolutions plus the
/// attention matmuls. Norms, activations, pooling, and upsampling are
/// linear-time and excluded.
pub fn network_macs(cfg: &ModelConfig) -> u128 {
    let s = cfg.input_size;
    let s2 = half(s);
    let s4 = half(s2);
    let s8 = half(s4);
    let s16 = half(s8);
    let gs = cfg.group_size();
    let m = cfg.group_count();
    let bw = cfg.base_width;
    let so = cfg.stem_out_width();
    let t = cfg.trunk_width;

    let stem = conv_macs(bw, s2, s2, gs, 9)
        + conv_macs(so, s4, s4, bw, 9)
        + conv_macs(so, s4, s4, so, 9)
        + conv_macs(so, s4, s4, bw, 1);
    let fuse = conv_macs(m * bw, s4, s4, m * so, 1) + conv_macs(t, s4, s4, m * bw, 1);
    let trunk = conv_macs(2 * t, s8, s8, t, 9)
        + conv_macs(2 * t, s8, s8, 2 * t, 9)
        + conv_macs(2 * t, s8, s8, t, 1)
        + conv_macs(4 * t, s16, s16, 2 * t, 9)
        + conv_macs(4 * t, s16, s16, 4 * t, 9)
        + conv_macs(4 * t, s16, s16, 2 * t, 1)
        + conv_macs(t, s16, s16, 4 * t, 1)
        + conv_macs(t, s4, s4, t, 9);
    let attn = match cfg.fusion_mode {
        FusionMode::Plain | FusionMode::Esm => 0,
        FusionMode::EsmConcat => conv_macs(t, s, s, t + so, 1),
        FusionMode::EsmDot => conv_macs(t, s, s, so, 1),
        FusionMode::EsmSsa => {
            let ca = so;
            let p = cfg.ssa_pool_size;
            conv_macs(ca, p, p, so, 1)
                + conv_macs(ca, p, p, t, 1)
                + 3 * conv_macs(ca, p, p, ca, 1)
                + 2 * (ca as u128 * ca as u128 * (p * p) as u128)
                + conv_macs(t, p, p, ca, 1)
        }
    };
    let head = conv_macs(gs, s, s, t, 1);
    m as u128 * stem + fuse + trunk + m as u128 * (attn + head)
}

fn extent_of(dims: (usize, usize, usize), axis: Axis) -> usize {
    match axis {
        Axis::Coronal => dims.0,
        Axis::Sagittal => dims.1,
        Axis::Axial => dims.2,
    }
}

fn axis_windows(extent: usize, patch: usize, stride: usize) -> Result<u64> {
    if patch == 0 || stride == 0 {
        return Err(Error::Config(
            "patch and stride extents must be positive".into(),
        ));
    }
    if patch >= extent {
        return Ok(1);
    }
    let span = extent - patch;
    Ok((span / stride + 1 + (span % stride != 0) as usize) as u64)
}

/// Computes the number of windows a scheme needs to cover `dims` and the
/// analytic cost of running `cfg`'s network over them.
///
/// Per-window cost: `thick2d` pays one forward pass of the configured
/// network; `slice2d` pays a k=1 variant of it; `patch3d` pays the
/// network's per-voxel cost times the patch voxel count, tripled for the
/// 3x3x3 kernels a 3D counterpart would need.
pub fn count_windows(
    dims: (usize, usize, usize),
    scheme: WindowScheme,
    cfg: &ModelConfig,
) -> Result<CostReport> {
    let (windows, per) = match scheme {
        WindowScheme::Slice2d { axis } => {
            let mut flat = cfg.clone();
            flat.k = 1;
            flat.g = 1;
            flat.fusion_mode = FusionMode::Plain;
            flat.validate()?;
            (extent_of(dims, axis) as u64, network_macs(&flat))
        }
        WindowScheme::Thick2d { axis, k } => {
            let mut thick = cfg.clone();
            thick.k = k;
            thick.validate()?;
            let extent = extent_of(dims, axis);
            if k > extent {
                return Err(Error::Shape(format!(
                    "group thickness {k} invalid for {extent} slices along {}",
                    axis.name()
                )));
            }
            ((extent - k + 1) as u64, network_macs(&thick))
        }
        WindowScheme::Patch3d { patch, stride } => {
            cfg.validate()?;
            let n = axis_windows(dims.0, patch.0, stride.0)?
                * axis_windows(dims.1, patch.1, stride.1)?
                * axis_windows(dims.2, patch.2, stride.2)?;
            let s = cfg.input_size;
            let per_voxel = network_macs(cfg) as Real / (cfg.k * s * s) as Real;
            let voxels = (patch.0 * patch.1 * patch.2) as Real;
            (n, math::round(per_voxel * 3.0 * voxels) as u128)
        }
    };
    Ok(CostReport {
        scheme: String::from(scheme.name()),
        windows,
        macs_per_window: per,
        total_macs: windows as u128 * per,
        wall_ms: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn ramp_volume(h: usize, w: usize, d: usize) -> Volume {
        let n = h * w * d;
        let voxels = (0..n).map(|i| i as Real / n as Real).collect();
        Volume::new(h, w, d, voxels, Kind::Probability).unwrap()
    }

    #[test]
    fn echo_predictor_reproduces_the_volume() {
        let vol = ramp_volume(5, 6, 7);
        for axis in Axis::ALL {
            let out = predict_axis(&vol, axis, 3, 8, |g| Ok(g.clone())).unwrap();
            let diff = vol
                .voxels
                .iter()
                .zip(&out.voxels)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, Real::max);
            assert!(diff < 1e-12, "{} axis diff {diff}", axis.name());
        }
    }

    #[test]
    fn single_group_covers_whole_extent() {
        let vol = ramp_volume(4, 4, 3);
        let out = predict_axis(&vol, Axis::Axial, 3, 4, |g| Ok(g.clone())).unwrap();
        assert_eq!(out.voxels, vol.voxels);
    }

    #[test]
    fn thickness_must_fit_the_volume() {
        let vol = ramp_volume(4, 4, 3);
        assert!(predict_axis(&vol, Axis::Axial, 4, 4, |g| Ok(g.clone())).is_err());
    }

    #[test]
    fn predictor_shape_is_enforced() {
        let vol = ramp_volume(4, 4, 3);
        let bad = predict_axis(&vol, Axis::Axial, 3, 4, |_| {
            Ok(Tensor::zeros(vec![3, 2, 2]))
        });
        assert!(bad.is_err());
    }

    #[test]
    fn binarize_threshold_is_inclusive() {
        let p = Volume::new(
            1,
            4,
            1,
            vec![0.4999, 0.5, 0.500001, 1.0],
            Kind::Probability,
        )
        .unwrap();
        let m = binarize(&p, BINARIZE_THRESHOLD).unwrap();
        assert_eq!(m.voxels, vec![0.0, 1.0, 1.0, 1.0]);
        // idempotent on its own output
        let again = binarize(&m, BINARIZE_THRESHOLD).unwrap();
        assert_eq!(again.voxels, m.voxels);
    }

    #[test]
    fn binarize_rejects_intensity() {
        let v = Volume::new(1, 1, 1, vec![3.7], Kind::Intensity).unwrap();
        assert!(binarize(&v, 0.5).is_err());
    }

    #[test]
    fn majority_vote_truth_table() {
        let m = |bits: [Real; 4]| Volume::new(1, 4, 1, bits.to_vec(), Kind::Mask).unwrap();
        let a = m([1.0, 1.0, 1.0, 0.0]);
        let b = m([1.0, 1.0, 0.0, 0.0]);
        let c = m([1.0, 0.0, 0.0, 0.0]);
        let f = fuse_views(&a, &b, &c).unwrap();
        assert_eq!(f.voxels, vec![1.0, 1.0, 0.0, 0.0]);
        // vote is symmetric in its arguments
        let g = fuse_views(&c, &a, &b).unwrap();
        assert_eq!(g.voxels, f.voxels);
    }

    #[test]
    fn mean_fusion_averages_probabilities() {
        let p = |v: Real| Volume::new(1, 1, 1, vec![v], Kind::Probability).unwrap();
        let f = fuse_views_mean(&p(0.0), &p(0.5), &p(1.0)).unwrap();
        assert_eq!(f.kind, Kind::Probability);
        assert!((f.voxels[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn window_counts_match_hand_arithmetic() {
        let cfg = ModelConfig {
            k: 15,
            ..ModelConfig::default()
        };
        let dims = (512, 512, 394);
        let p3 = count_windows(
            dims,
            WindowScheme::Patch3d {
                patch: (128, 128, 64),
                stride: (32, 32, 16),
            },
            &cfg,
        )
        .unwrap();
        assert_eq!(p3.windows, 3718); // 13 * 13 * 22, with one clamped tail in depth
        let t2 = count_windows(
            dims,
            WindowScheme::Thick2d {
                axis: Axis::Axial,
                k: 15,
            },
            &cfg,
        )
        .unwrap();
        assert_eq!(t2.windows, 380);
        let s2 = count_windows(dims, WindowScheme::Slice2d { axis: Axis::Axial }, &cfg).unwrap();
        assert_eq!(s2.windows, 394);
    }

    #[test]
    fn totals_are_windows_times_per_window() {
        let cfg = ModelConfig::default();
        for scheme in [
            WindowScheme::Slice2d { axis: Axis::Axial },
            WindowScheme::Thick2d {
                axis: Axis::Axial,
                k: 9,
            },
            WindowScheme::Patch3d {
                patch: (32, 32, 16),
                stride: (16, 16, 8),
            },
        ] {
            let r = count_windows((96, 96, 40), scheme, &cfg).unwrap();
            assert_eq!(r.total_macs, r.windows as u128 * r.macs_per_window);
            assert!(r.macs_per_window > 0);
        }
    }

    #[test]
    fn thick2d_costs_less_than_patch3d_on_large_volumes() {
        let cfg = ModelConfig {
            k: 15,
            ..ModelConfig::default()
        };
        let dims = (512, 512, 394);
        let t2 = count_windows(
            dims,
            WindowScheme::Thick2d {
                axis: Axis::Axial,
                k: 15,
            },
            &cfg,
        )
        .unwrap();
        // three axes of thick2d still beat one patch3d sweep
        let p3 = count_windows(
            dims,
            WindowScheme::Patch3d {
                patch: (128, 128, 64),
                stride: (32, 32, 16),
            },
            &cfg,
        )
        .unwrap();
        assert!(3 * t2.total_macs < p3.total_macs);
    }

    #[test]
    fn clamped_tail_adds_one_window() {
        assert_eq!(axis_windows(10, 4, 3).unwrap(), 3); // exact cover
        assert_eq!(axis_windows(11, 4, 3).unwrap(), 4); // remainder -> clamp
        assert_eq!(axis_windows(3, 4, 3).unwrap(), 1); // patch larger than extent
        assert!(axis_windows(10, 4, 0).is_err());
    }

    #[test]
    fn larger_groups_cost_more_per_window() {
        let base = ModelConfig::default();
        let mut big = base.clone();
        big.k = 18;
        assert!(network_macs(&big) > network_macs(&base));
    }
}
