//! Synthetic vessel-like phantoms with exact ground-truth masks.
//!
//! Two families: `tube_tree` draws a branching tube system (the vessel-like
//! case slice grouping is meant to help with), `blob` draws a few smooth
//! ellipsoids. Distractor speckles live on a single axial slice each, at
//! foreground intensity, so a slice-by-slice segmenter is actively misled
//! while a thickness-aware one can reject them.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::derive_seed;
use crate::error::{Error, Result};
use crate::math;
use crate::tensor::Real;
use crate::volume::{Kind, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    TubeTree,
    Blob,
}

impl Family {
    pub const ALL: [Family; 2] = [Family::TubeTree, Family::Blob];

    pub fn name(self) -> &'static str {
        match self {
            Family::TubeTree => "tube_tree",
            Family::Blob => "blob",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown phantom family '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomConfig {
    pub h: usize,
    pub w: usize,
    pub d: usize,
    pub family: Family,
    pub radius_min: Real,
    pub radius_max: Real,
    /// Children spawned at each branch point (tube_tree), and the basis of
    /// the blob count (blob draws branch_count + 1 ellipsoids).
    pub branch_count: usize,
    /// Branching generations below the trunk.
    pub branch_depth: usize,
    /// Foreground intensity above the zero background.
    pub contrast: Real,
    pub noise_sigma: Real,
    /// Expected distractor speckles per axial slice.
    pub distractor_density: Real,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            h: 64,
            w: 64,
            d: 64,
            family: Family::TubeTree,
            radius_min: 1.5,
            radius_max: 3.0,
            branch_count: 2,
            branch_depth: 2,
            contrast: 1.0,
            noise_sigma: 0.2,
            distractor_density: 0.1,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let min_extent = self.h.min(self.w).min(self.d);
        if min_extent < 8 {
            return Err(Error::Config(format!(
                "phantom volumes need every extent >= 8, got {}x{}x{}",
                self.h, self.w, self.d
            )));
        }
        if self.radius_min < 1.0 {
            return Err(Error::Config(format!(
                "radius_min must be at least 1, got {}",
                self.radius_min
            )));
        }
        if self.radius_max < self.radius_min {
            return Err(Error::Config(format!(
                "radius_max {} below radius_min {}",
                self.radius_max, self.radius_min
            )));
        }
        if self.radius_max > min_extent as Real / 4.0 {
            return Err(Error::Config(format!(
                "radius_max {} too large for the smallest extent {min_extent}",
                self.radius_max
            )));
        }
        if self.branch_count == 0 {
            return Err(Error::Config("branch_count must be positive".into()));
        }
        if !(self.contrast > 0.0) {
            return Err(Error::Config(format!(
                "contrast must be positive, got {}",
                self.contrast
            )));
        }
        if self.noise_sigma < 0.0 || !self.noise_sigma.is_finite() {
            return Err(Error::Config(format!(
                "noise_sigma must be a non-negative number, got {}",
                self.noise_sigma
            )));
        }
        if self.distractor_density < 0.0 {
            return Err(Error::Config(format!(
                "distractor_density must be non-negative, got {}",
                self.distractor_density
            )));
        }
        Ok(())
    }
}

const MAX_TRIES: usize = 16;

/// Generated volume pair plus the seed that produced it.
#[derive(Debug, Clone)]
pub struct PhantomCase {
    pub seed: u64,
    pub intensity: Volume,
    pub mask: Volume,
}

fn random_unit(rng: &mut ChaCha8Rng) -> [Real; 3] {
    loop {
        let v: [Real; 3] = [
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        ];
        let n = math::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
        if n > 1e-6 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

fn stamp_ball(mask: &mut [Real], dims: (usize, usize, usize), pos: [Real; 3], r: Real) {
    let (h, w, d) = dims;
    let lo = |c: Real| (math::floor(c - r).max(0.0)) as usize;
    let hi = |c: Real, n: usize| (math::floor(c + r) as usize).min(n - 1);
    let r2 = r * r;
    for dd in lo(pos[2])..=hi(pos[2], d) {
        for hh in lo(pos[0])..=hi(pos[0], h) {
            for ww in lo(pos[1])..=hi(pos[1], w) {
                let dy = hh as Real - pos[0];
                let dx = ww as Real - pos[1];
                let dz = dd as Real - pos[2];
                if dy * dy + dx * dx + dz * dz <= r2 {
                    mask[(dd * h + hh) * w + ww] = 1.0;
                }
            }
        }
    }
}

struct Branch {
    pos: [Real; 3],
    dir: [Real; 3],
    radius: Real,
    depth: usize,
}

/// Step size along centerlines; below 1 in the inf-norm, so consecutive
/// rounded centers stay 26-connected.
const STEP: Real = 0.9;

fn rasterize_tube_tree(cfg: &PhantomConfig, rng: &mut ChaCha8Rng) -> Vec<Real> {
    let dims = (cfg.h, cfg.w, cfg.d);
    let mut mask = vec![0.0; cfg.h * cfg.w * cfg.d];
    let extents = [cfg.h as Real, cfg.w as Real, cfg.d as Real];
    let min_extent = extents[0].min(extents[1]).min(extents[2]);
    let seg_len = 0.35 * min_extent;

    let start = [
        rng.gen_range(extents[0] / 3.0..=2.0 * extents[0] / 3.0),
        rng.gen_range(extents[1] / 3.0..=2.0 * extents[1] / 3.0),
        rng.gen_range(extents[2] / 3.0..=2.0 * extents[2] / 3.0),
    ];
    let mut stack = vec![Branch {
        pos: start,
        dir: random_unit(rng),
        radius: rng.gen_range(cfg.radius_min..=cfg.radius_max),
        depth: cfg.branch_depth,
    }];

    while let Some(mut b) = stack.pop() {
        let steps = (seg_len * rng.gen_range(0.7..=1.3) / STEP) as usize + 1;
        stamp_ball(&mut mask, dims, b.pos, b.radius);
        for _ in 0..steps {
            // gentle drift keeps tubes curved instead of straight
            let drift = random_unit(rng);
            let mut dir = [
                b.dir[0] + 0.15 * drift[0],
                b.dir[1] + 0.15 * drift[1],
                b.dir[2] + 0.15 * drift[2],
            ];
            let n = math::sqrt(dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]);
            dir = [dir[0] / n, dir[1] / n, dir[2] / n];
            let inf = dir[0].abs().max(dir[1].abs()).max(dir[2].abs());
            let next = [
                b.pos[0] + dir[0] / inf * STEP,
                b.pos[1] + dir[1] / inf * STEP,
                b.pos[2] + dir[2] / inf * STEP,
            ];
            let inside = next
                .iter()
                .zip(&extents)
                .all(|(p, e)| *p >= 1.0 && *p <= e - 2.0);
            if !inside {
                break;
            }
            b.pos = next;
            b.dir = dir;
            stamp_ball(&mut mask, dims, b.pos, b.radius);
        }
        if b.depth > 0 {
            for _ in 0..cfg.branch_count {
                let kick = random_unit(rng);
                let mut dir = [
                    b.dir[0] + 0.8 * kick[0],
                    b.dir[1] + 0.8 * kick[1],
                    b.dir[2] + 0.8 * kick[2],
                ];
                let n = math::sqrt(dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]);
                dir = [dir[0] / n, dir[1] / n, dir[2] / n];
                stack.push(Branch {
                    pos: b.pos,
                    dir,
                    radius: (b.radius * 0.8).max(cfg.radius_min),
                    depth: b.depth - 1,
                });
            }
        }
    }
    mask
}

fn rasterize_blobs(cfg: &PhantomConfig, rng: &mut ChaCha8Rng) -> Vec<Real> {
    let mut mask = vec![0.0; cfg.h * cfg.w * cfg.d];
    let extents = [cfg.h as Real, cfg.w as Real, cfg.d as Real];
    for _ in 0..cfg.branch_count + 1 {
        let center = [
            rng.gen_range(extents[0] * 0.25..=extents[0] * 0.75),
            rng.gen_range(extents[1] * 0.25..=extents[1] * 0.75),
            rng.gen_range(extents[2] * 0.25..=extents[2] * 0.75),
        ];
        let semi = [
            rng.gen_range(0.07..=0.14) * extents[0],
            rng.gen_range(0.07..=0.14) * extents[1],
            rng.gen_range(0.07..=0.14) * extents[2],
        ];
        for dd in 0..cfg.d {
            for hh in 0..cfg.h {
                for ww in 0..cfg.w {
                    let dy = (hh as Real - center[0]) / semi[0];
                    let dx = (ww as Real - center[1]) / semi[1];
                    let dz = (dd as Real - center[2]) / semi[2];
                    if dy * dy + dx * dx + dz * dz <= 1.0 {
                        mask[(dd * cfg.h + hh) * cfg.w + ww] = 1.0;
                    }
                }
            }
        }
    }
    mask
}

fn stamp_disc(
    img: &mut [Real],
    cfg: &PhantomConfig,
    dz: usize,
    cy: Real,
    cx: Real,
    r: Real,
) {
    let r2 = r * r;
    let lo = |c: Real| (math::floor(c - r).max(0.0)) as usize;
    let hi = |c: Real, n: usize| (math::floor(c + r) as usize).min(n - 1);
    for hh in lo(cy)..=hi(cy, cfg.h) {
        for ww in lo(cx)..=hi(cx, cfg.w) {
            let dy = hh as Real - cy;
            let dx = ww as Real - cx;
            if dy * dy + dx * dx <= r2 {
                img[(dz * cfg.h + hh) * cfg.w + ww] = cfg.contrast;
            }
        }
    }
}

/// Draws one phantom: a mask from the configured family, an intensity
/// volume at `contrast` over a zero background with single-slice distractor
/// speckles, plus Gaussian noise.
///
/// Redraws (up to a bound) until the foreground fraction lands in (0, 0.5).
pub fn generate(cfg: &PhantomConfig) -> Result<(Volume, Volume)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "phantom"));
    let total = cfg.h * cfg.w * cfg.d;

    let mut mask = None;
    for _ in 0..MAX_TRIES {
        let m = match cfg.family {
            Family::TubeTree => rasterize_tube_tree(cfg, &mut rng),
            Family::Blob => rasterize_blobs(cfg, &mut rng),
        };
        let frac = m.iter().filter(|&&v| v == 1.0).count() as Real / total as Real;
        if frac > 0.0 && frac < 0.5 {
            mask = Some(m);
            break;
        }
    }
    let mask = mask.ok_or_else(|| {
        Error::Geometry(format!(
            "no draw landed in foreground fraction (0, 0.5) after {MAX_TRIES} attempts; \
             shrink the radius range or branch settings"
        ))
    })?;

    let mut img: Vec<Real> = mask.iter().map(|&v| v * cfg.contrast).collect();
    let speckles = math::round(cfg.distractor_density * cfg.d as Real) as usize;
    for _ in 0..speckles {
        let dz = rng.gen_range(0..cfg.d);
        let cy = rng.gen_range(0.0..cfg.h as Real);
        let cx = rng.gen_range(0.0..cfg.w as Real);
        let r = rng.gen_range(cfg.radius_min..=cfg.radius_max);
        stamp_disc(&mut img, cfg, dz, cy, cx, r);
    }
    if cfg.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, cfg.noise_sigma)
            .map_err(|_| Error::Config(format!("bad noise sigma {}", cfg.noise_sigma)))?;
        for v in &mut img {
            *v += normal.sample(&mut rng);
        }
    }

    Ok((
        Volume::new(cfg.h, cfg.w, cfg.d, img, Kind::Intensity)?,
        Volume::new(cfg.h, cfg.w, cfg.d, mask, Kind::Mask)?,
    ))
}

/// Generates `n` cases with seeds `cfg.seed + 0..n` and splits the first
/// `round(n * train_fraction)` into the training side.
pub fn make_dataset(
    n: usize,
    cfg: &PhantomConfig,
    train_fraction: Real,
) -> Result<(Vec<PhantomCase>, Vec<PhantomCase>)> {
    if n == 0 {
        return Err(Error::Config("dataset needs at least one volume".into()));
    }
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(Error::Config(format!(
            "train_fraction must be in [0, 1], got {train_fraction}"
        )));
    }
    let train_n = (math::round(n as Real * train_fraction) as usize).min(n);
    let mut train = Vec::with_capacity(train_n);
    let mut test = Vec::with_capacity(n - train_n);
    for i in 0..n {
        let seed = cfg.seed + i as u64;
        let case_cfg = PhantomConfig {
            seed,
            ..cfg.clone()
        };
        let (intensity, mask) = generate(&case_cfg)?;
        let case = PhantomCase {
            seed,
            intensity,
            mask,
        };
        if i < train_n {
            train.push(case);
        } else {
            test.push(case);
        }
    }
    Ok((train, test))
}
