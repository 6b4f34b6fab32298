//! Latent base distributions `pi`.

use std::f64::consts::PI;

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LatentPrior {
    /// `N(0, I_d)`.
    StandardNormal,
    /// Uniform on the box `[low, high)^d`.
    Uniform { low: f64, high: f64 },
}

impl Default for LatentPrior {
    fn default() -> Self {
        LatentPrior::StandardNormal
    }
}

impl LatentPrior {
    pub fn unit_uniform() -> Self {
        LatentPrior::Uniform {
            low: 0.0,
            high: 1.0,
        }
    }

    pub fn sample<T: Scalar, R: Rng + ?Sized>(&self, rng: &mut R, n: usize, d: usize) -> Array2<T> {
        match *self {
            LatentPrior::StandardNormal => Array2::from_shape_fn((n, d), |_| {
                let z: f64 = StandardNormal.sample(rng);
                T::lit(z)
            }),
            LatentPrior::Uniform { low, high } => Array2::from_shape_fn((n, d), |_| {
                T::lit(low + (high - low) * rng.random::<f64>())
            }),
        }
    }

    pub fn log_density<T: Scalar>(&self, u: ArrayView1<T>) -> T {
        let d = u.len() as f64;
        match *self {
            LatentPrior::StandardNormal => {
                let sq = u.iter().fold(T::zero(), |a, &x| a + x * x);
                T::lit(-0.5 * d * (2.0 * PI).ln()) - T::lit(0.5) * sq
            }
            LatentPrior::Uniform { low, high } => {
                let inside = u.iter().all(|&x| {
                    let x = x.as_f64();
                    x >= low && x < high
                });
                if inside {
                    T::lit(-d * (high - low).ln())
                } else {
                    T::neg_infinity()
                }
            }
        }
    }

    pub fn log_density_rows<T: Scalar>(&self, latents: &Array2<T>) -> Array1<T> {
        latents.rows().into_iter().map(|r| self.log_density(r)).collect()
    }

    /// `grad_u log pi(u)`; zero inside a uniform box.
    pub fn grad_log_density<T: Scalar>(&self, u: ArrayView1<T>) -> Array1<T> {
        match self {
            LatentPrior::StandardNormal => u.mapv(|x| -x),
            LatentPrior::Uniform { .. } => Array1::zeros(u.len()),
        }
    }

    /// Coordinate-wise inverse CDF applied to a point of the unit cube.
    pub fn from_unit_cube(&self, p: f64) -> f64 {
        match *self {
            LatentPrior::StandardNormal => {
                let n = Normal::standard();
                n.inverse_cdf(p)
            }
            LatentPrior::Uniform { low, high } => low + (high - low) * p,
        }
    }

    pub fn name(&self) -> String {
        match self {
            LatentPrior::StandardNormal => "normal".into(),
            LatentPrior::Uniform { low, high } => format!("uniform[{low},{high})"),
        }
    }
}
