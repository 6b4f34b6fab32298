//! Variance-preserving noise schedule: `sigma_t^2 = t`, `alpha_t = sqrt(1 - t)`.

use ndarray::{ArrayView1, ArrayView2, Array1, Array2, Zip};

use crate::error::{MagtError, Result};
use crate::scalar::Scalar;

/// A smoothing level `t` together with its schedule coefficients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseLevel<T> {
    pub t: T,
    pub alpha: T,
    pub sigma: T,
}

impl<T: Scalar> NoiseLevel<T> {
    /// Builds the VP level for `t` in the open interval (0, 1).
    pub fn vp(t: T) -> Result<Self> {
        if !(t > T::zero() && t < T::one()) {
            return Err(MagtError::Range(format!(
                "smoothing level t must lie in (0, 1), got {t}"
            )));
        }
        Ok(NoiseLevel {
            t,
            alpha: (T::one() - t).sqrt(),
            sigma: t.sqrt(),
        })
    }

    pub fn sigma2(&self) -> T {
        self.sigma * self.sigma
    }

    /// `alpha * y0 + sigma * noise`.
    pub fn corrupt(&self, y0: ArrayView1<T>, noise: ArrayView1<T>) -> Result<Array1<T>> {
        if y0.len() != noise.len() {
            return Err(MagtError::Dimension {
                what: "noise length",
                expected: y0.len(),
                got: noise.len(),
            });
        }
        Ok(Zip::from(&y0)
            .and(&noise)
            .map_collect(|&y, &z| self.alpha * y + self.sigma * z))
    }

    /// Row-wise [`corrupt`](Self::corrupt) over a batch.
    pub fn corrupt_batch(&self, y0: ArrayView2<T>, noise: ArrayView2<T>) -> Result<Array2<T>> {
        if y0.dim() != noise.dim() {
            return Err(MagtError::Dimension {
                what: "noise batch columns",
                expected: y0.ncols(),
                got: noise.ncols(),
            });
        }
        Ok(Zip::from(&y0)
            .and(&noise)
            .map_collect(|&y, &z| self.alpha * y + self.sigma * z))
    }
}

/// `vp_level` under its operation name.
pub fn vp_level<T: Scalar>(t: T) -> Result<NoiseLevel<T>> {
    NoiseLevel::vp(t)
}
