//! Synthetic manifold datasets and exact distance-to-support oracles.
//!
//! Six constructions: concentric rings, an Archimedean-style spiral, two
//! interleaving moons, a checkerboard, a helix and a torus. Each spec knows
//! how to sample noisy points and how far an arbitrary point lies from the
//! noiseless support.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{MagtError, Result};
use crate::rng::{stream_rng, streams};

pub const DEFAULT_JITTER: f64 = 0.02;
pub const DEFAULT_OFF_MANIFOLD_THRESHOLD: f64 = 0.1;

/// Grid resolution used before local refinement on the curve datasets.
const CURVE_GRID: usize = 4096;
const REFINE_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ManifoldName {
    Rings2d,
    Spiral2d,
    Moons2d,
    Checker2d,
    Helix3d,
    Torus3d,
}

impl ManifoldName {
    pub const ALL: [ManifoldName; 6] = [
        ManifoldName::Rings2d,
        ManifoldName::Spiral2d,
        ManifoldName::Moons2d,
        ManifoldName::Checker2d,
        ManifoldName::Helix3d,
        ManifoldName::Torus3d,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ManifoldName::Rings2d => "rings2d",
            ManifoldName::Spiral2d => "spiral2d",
            ManifoldName::Moons2d => "moons2d",
            ManifoldName::Checker2d => "checker2d",
            ManifoldName::Helix3d => "helix3d",
            ManifoldName::Torus3d => "torus3d",
        }
    }
}

impl fmt::Display for ManifoldName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ManifoldName {
    type Err = MagtError;

    fn from_str(s: &str) -> Result<Self> {
        ManifoldName::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| MagtError::Config(format!("unknown dataset {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ShapeParams {
    Rings { radii: Vec<f64> },
    Spiral { a: f64, b: f64, t_min: f64, t_max: f64 },
    Moons { delta: f64 },
    Checker { cells: usize },
    Helix { t_min: f64, t_max: f64 },
    Torus { major: f64, minor: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifoldSpec {
    pub name: ManifoldName,
    pub ambient_dim: usize,
    pub intrinsic_dim: usize,
    pub jitter_sigma: f64,
    pub shape: ShapeParams,
}

impl ManifoldSpec {
    /// Default construction for `name`, including the default jitter.
    pub fn new(name: ManifoldName) -> Self {
        let (ambient_dim, intrinsic_dim, shape) = match name {
            ManifoldName::Rings2d => (
                2,
                1,
                ShapeParams::Rings {
                    radii: vec![0.25, 0.5, 0.75, 1.0],
                },
            ),
            ManifoldName::Spiral2d => (
                2,
                1,
                ShapeParams::Spiral {
                    a: 0.25,
                    b: 0.15,
                    t_min: 0.0,
                    t_max: 4.0 * PI,
                },
            ),
            // the noiseless moons are curves; the latent width follows the benchmark table
            ManifoldName::Moons2d => (2, 2, ShapeParams::Moons { delta: 0.5 }),
            ManifoldName::Checker2d => (2, 2, ShapeParams::Checker { cells: 4 }),
            ManifoldName::Helix3d => (
                3,
                1,
                ShapeParams::Helix {
                    t_min: 0.0,
                    t_max: 2.0 * PI,
                },
            ),
            ManifoldName::Torus3d => (
                3,
                2,
                ShapeParams::Torus {
                    major: 2.0,
                    minor: 1.0,
                },
            ),
        };
        ManifoldSpec {
            name,
            ambient_dim,
            intrinsic_dim,
            jitter_sigma: DEFAULT_JITTER,
            shape,
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        Ok(Self::new(name.parse()?))
    }

    pub fn with_jitter(mut self, sigma: f64) -> Self {
        self.jitter_sigma = sigma;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=2).contains(&self.intrinsic_dim) || self.intrinsic_dim > self.ambient_dim {
            return Err(MagtError::Config(format!(
                "intrinsic dimension {} invalid for ambient dimension {}",
                self.intrinsic_dim, self.ambient_dim
            )));
        }
        if !(self.jitter_sigma >= 0.0) {
            return Err(MagtError::Config("jitter must be nonnegative".into()));
        }
        let expected_ambient = match self.shape {
            ShapeParams::Helix { .. } | ShapeParams::Torus { .. } => 3,
            _ => 2,
        };
        if self.ambient_dim != expected_ambient {
            return Err(MagtError::Config(format!(
                "{} lives in R^{expected_ambient}",
                self.name
            )));
        }
        match &self.shape {
            ShapeParams::Rings { radii } => {
                if radii.is_empty()
                    || radii[0] <= 0.0
                    || radii.windows(2).any(|w| w[1] <= w[0])
                {
                    return Err(MagtError::Config(
                        "ring radii must be positive and strictly increasing".into(),
                    ));
                }
            }
            ShapeParams::Spiral { a, b, t_min, t_max } => {
                if !(*a > 0.0 && *b > 0.0 && t_max > t_min) {
                    return Err(MagtError::Config("spiral needs a, b > 0 and t_min < t_max".into()));
                }
            }
            ShapeParams::Moons { delta } => {
                if !(*delta > 0.0) {
                    return Err(MagtError::Config("moons separation must be positive".into()));
                }
            }
            ShapeParams::Checker { cells } => {
                if *cells < 1 {
                    return Err(MagtError::Config("checker needs at least one cell".into()));
                }
            }
            ShapeParams::Helix { t_min, t_max } => {
                if !(t_max > t_min) {
                    return Err(MagtError::Config("helix needs t_min < t_max".into()));
                }
            }
            ShapeParams::Torus { major, minor } => {
                if !(*minor > 0.0 && major > minor) {
                    return Err(MagtError::Config("torus needs 0 < r < R".into()));
                }
            }
        }
        Ok(())
    }

    /// One noiseless point of the support.
    fn sample_clean<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        match &self.shape {
            ShapeParams::Rings { radii } => {
                let r = radii[rng.random_range(0..radii.len())];
                let theta = 2.0 * PI * rng.random::<f64>();
                out[0] = r * theta.cos();
                out[1] = r * theta.sin();
            }
            ShapeParams::Spiral { a, b, t_min, t_max } => {
                let t = t_min + (t_max - t_min) * rng.random::<f64>();
                let r = a + b * t;
                out[0] = r * t.cos();
                out[1] = r * t.sin();
            }
            ShapeParams::Moons { delta } => {
                let second = rng.random::<bool>();
                let theta = PI * rng.random::<f64>();
                if second {
                    out[0] = 1.0 - theta.cos();
                    out[1] = 1.0 - theta.sin() - delta;
                } else {
                    out[0] = theta.cos();
                    out[1] = theta.sin();
                }
            }
            ShapeParams::Checker { cells } => {
                let m = *cells;
                let black: Vec<(usize, usize)> = (0..m)
                    .flat_map(|i| (0..m).map(move |j| (i, j)))
                    .filter(|(i, j)| (i + j) % 2 == 0)
                    .collect();
                let (i, j) = black[rng.random_range(0..black.len())];
                let w = 2.0 / m as f64;
                out[0] = -1.0 + (i as f64 + rng.random::<f64>()) * w;
                out[1] = -1.0 + (j as f64 + rng.random::<f64>()) * w;
            }
            ShapeParams::Helix { t_min, t_max } => {
                let t = t_min + (t_max - t_min) * rng.random::<f64>();
                out[0] = t.cos();
                out[1] = t.sin();
                out[2] = t;
            }
            ShapeParams::Torus { major, minor } => {
                let u = 2.0 * PI * rng.random::<f64>();
                let v = 2.0 * PI * rng.random::<f64>();
                out[0] = (major + minor * v.cos()) * u.cos();
                out[1] = (major + minor * v.cos()) * u.sin();
                out[2] = minor * v.sin();
            }
        }
    }

    /// Euclidean distance from `point` to the noiseless support.
    pub fn distance(&self, point: ArrayView1<f64>) -> f64 {
        let p = point.to_vec();
        match &self.shape {
            ShapeParams::Rings { radii } => {
                let rho = p[0].hypot(p[1]);
                radii
                    .iter()
                    .map(|r| (rho - r).abs())
                    .fold(f64::INFINITY, f64::min)
            }
            ShapeParams::Torus { major, minor } => {
                let rho = p[0].hypot(p[1]);
                ((rho - major).hypot(p[2]) - minor).abs()
            }
            ShapeParams::Moons { delta } => {
                let upper = arc_distance(p[0], p[1], 0.0, 0.0, true);
                let lower = arc_distance(p[0], p[1], 1.0, 1.0 - delta, false);
                upper.min(lower)
            }
            ShapeParams::Checker { cells } => checker_distance(*cells, p[0], p[1]),
            ShapeParams::Spiral { a, b, t_min, t_max } => {
                let (a, b) = (*a, *b);
                let curve = |t: f64| {
                    let r = a + b * t;
                    (p[0] - r * t.cos()).powi(2) + (p[1] - r * t.sin()).powi(2)
                };
                curve_distance(curve, *t_min, *t_max, CURVE_GRID)
            }
            ShapeParams::Helix { t_min, t_max } => {
                let curve =
                    |t: f64| (p[0] - t.cos()).powi(2) + (p[1] - t.sin()).powi(2) + (p[2] - t).powi(2);
                curve_distance(curve, *t_min, *t_max, CURVE_GRID)
            }
        }
    }

    /// Distance by brute force over `samples` parameter values, with no
    /// refinement. Only meaningful for the curve datasets.
    pub fn brute_force_curve_distance(&self, point: ArrayView1<f64>, samples: usize) -> Option<f64> {
        let p = point.to_vec();
        let (t_min, t_max, f): (f64, f64, Box<dyn Fn(f64) -> f64>) = match &self.shape {
            ShapeParams::Spiral { a, b, t_min, t_max } => {
                let (a, b) = (*a, *b);
                let p = p.clone();
                (
                    *t_min,
                    *t_max,
                    Box::new(move |t| {
                        let r = a + b * t;
                        (p[0] - r * t.cos()).powi(2) + (p[1] - r * t.sin()).powi(2)
                    }),
                )
            }
            ShapeParams::Helix { t_min, t_max } => {
                let p = p.clone();
                (
                    *t_min,
                    *t_max,
                    Box::new(move |t| {
                        (p[0] - t.cos()).powi(2) + (p[1] - t.sin()).powi(2) + (p[2] - t).powi(2)
                    }),
                )
            }
            _ => return None,
        };
        let step = (t_max - t_min) / (samples - 1) as f64;
        let best = (0..samples)
            .map(|i| f(t_min + i as f64 * step))
            .fold(f64::INFINITY, f64::min);
        Some(best.sqrt())
    }
}

/// Distance to a unit-radius half circle centred at `(cx, cy)`; the upper
/// half when `upper`, the lower half otherwise.
fn arc_distance(x: f64, y: f64, cx: f64, cy: f64, upper: bool) -> f64 {
    let dx = x - cx;
    let dy = y - cy;
    let on_side = if upper { dy >= 0.0 } else { dy <= 0.0 };
    if on_side {
        (dx.hypot(dy) - 1.0).abs()
    } else {
        let e1 = (dx - 1.0).hypot(dy);
        let e2 = (dx + 1.0).hypot(dy);
        e1.min(e2)
    }
}

fn checker_distance(m: usize, x: f64, y: f64) -> f64 {
    let w = 2.0 / m as f64;
    let mut best = f64::INFINITY;
    for i in 0..m {
        for j in 0..m {
            if (i + j) % 2 != 0 {
                continue;
            }
            let (x0, x1) = (-1.0 + i as f64 * w, -1.0 + (i + 1) as f64 * w);
            let (y0, y1) = (-1.0 + j as f64 * w, -1.0 + (j + 1) as f64 * w);
            let dx = (x0 - x).max(0.0).max(x - x1);
            let dy = (y0 - y).max(0.0).max(y - y1);
            best = best.min(dx.hypot(dy));
        }
    }
    best
}

/// Minimum of a squared-distance profile over `[t_min, t_max]`: grid search,
/// then golden-section refinement inside the bracket of every grid-local
/// minimum that could still be the global one.
fn curve_distance(sq: impl Fn(f64) -> f64, t_min: f64, t_max: f64, grid: usize) -> f64 {
    let step = (t_max - t_min) / (grid - 1) as f64;
    let values: Vec<f64> = (0..grid).map(|i| sq(t_min + i as f64 * step)).collect();
    let grid_best = values.iter().copied().fold(f64::INFINITY, f64::min);
    let mut best = grid_best;
    for i in 0..grid {
        let left = if i == 0 { f64::INFINITY } else { values[i - 1] };
        let right = if i + 1 == grid { f64::INFINITY } else { values[i + 1] };
        if values[i] > left || values[i] > right {
            continue;
        }
        // skip local minima that are clearly not competitive
        if values[i].sqrt() > grid_best.sqrt() + step * 4.0 {
            continue;
        }
        let lo = t_min + i.saturating_sub(1) as f64 * step;
        let hi = t_min + (i + 1).min(grid - 1) as f64 * step;
        best = best.min(golden_section(&sq, lo, hi));
    }
    best.max(0.0).sqrt()
}

fn golden_section(f: &impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = hi - ratio * (hi - lo);
    let mut d = lo + ratio * (hi - lo);
    let (mut fc, mut fd) = (f(c), f(d));
    while hi - lo > REFINE_TOL {
        if fc < fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - ratio * (hi - lo);
            fc = f(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + ratio * (hi - lo);
            fd = f(d);
        }
    }
    f(lo).min(f(hi)).min(fc).min(fd)
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub points: Array2<f64>,
    pub spec: ManifoldSpec,
    pub seed: u64,
}

/// `n` points from `spec` with Gaussian jitter, deterministic in `seed`.
pub fn sample_dataset(spec: &ManifoldSpec, n: usize, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    if n == 0 {
        return Err(MagtError::Config("dataset size must be at least 1".into()));
    }
    let mut rng = stream_rng(seed, streams::DATASET);
    let dim = spec.ambient_dim;
    let mut points = Array2::zeros((n, dim));
    for mut row in points.rows_mut() {
        let slot = row.as_slice_mut().unwrap();
        spec.sample_clean(&mut rng, slot);
        if spec.jitter_sigma > 0.0 {
            for x in slot.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *x += spec.jitter_sigma * z;
            }
        }
    }
    Ok(Dataset {
        points,
        spec: spec.clone(),
        seed,
    })
}

pub fn distance_to_manifold(spec: &ManifoldSpec, point: ArrayView1<f64>) -> f64 {
    spec.distance(point)
}

/// Fraction of rows farther than `threshold` from the support.
pub fn off_manifold_rate(spec: &ManifoldSpec, points: ArrayView2<f64>, threshold: f64) -> Result<f64> {
    if points.nrows() == 0 {
        return Err(MagtError::Config("off-manifold rate of an empty point set".into()));
    }
    if !(threshold > 0.0) {
        return Err(MagtError::Range(format!("threshold must be positive, got {threshold}")));
    }
    if points.ncols() != spec.ambient_dim {
        return Err(MagtError::Dimension {
            what: "point dimension",
            expected: spec.ambient_dim,
            got: points.ncols(),
        });
    }
    let off = points
        .rows()
        .into_iter()
        .filter(|p| spec.distance(*p) > threshold)
        .count();
    Ok(off as f64 / points.nrows() as f64)
}
