//! The `Transport` abstraction: anything mapping latents to ambient points.
//!
//! The trained network is the main implementor; closures are wrapped with
//! [`FnTransport`] for analytic toy maps and charts.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{MagtError, Result};
use crate::net::TransportNet;
use crate::scalar::Scalar;

pub trait Transport<T: Scalar> {
    fn latent_dim(&self) -> usize;
    fn ambient_dim(&self) -> usize;

    /// Row-wise evaluation of `h`.
    fn apply(&self, latents: ArrayView2<T>) -> Result<Array2<T>>;

    /// `D x d` Jacobian at `latent` and whether the point sits on a kink.
    fn jacobian(&self, latent: ArrayView1<T>) -> Result<(Array2<T>, bool)>;

    /// Parameter version, for maps whose parameters change during training.
    fn version(&self) -> Option<u64> {
        None
    }

    fn apply_one(&self, latent: ArrayView1<T>) -> Result<Array1<T>> {
        Ok(self.apply(latent.insert_axis(Axis(0)))?.row(0).to_owned())
    }
}

impl<T: Scalar> Transport<T> for TransportNet<T> {
    fn latent_dim(&self) -> usize {
        TransportNet::latent_dim(self)
    }

    fn ambient_dim(&self) -> usize {
        TransportNet::ambient_dim(self)
    }

    fn apply(&self, latents: ArrayView2<T>) -> Result<Array2<T>> {
        TransportNet::apply(self, latents)
    }

    fn jacobian(&self, latent: ArrayView1<T>) -> Result<(Array2<T>, bool)> {
        self.input_jacobian(latent)
    }

    fn version(&self) -> Option<u64> {
        Some(TransportNet::version(self))
    }
}

type PointFn<'a, T> = Box<dyn Fn(ArrayView1<T>) -> Array1<T> + Send + Sync + 'a>;
type JacobianFn<'a, T> = Box<dyn Fn(ArrayView1<T>) -> Array2<T> + Send + Sync + 'a>;

/// A transport given by a point-wise closure. Without an explicit Jacobian
/// the Jacobian is taken by central differences.
pub struct FnTransport<'a, T> {
    latent_dim: usize,
    ambient_dim: usize,
    map: PointFn<'a, T>,
    jacobian: Option<JacobianFn<'a, T>>,
}

impl<'a, T: Scalar> FnTransport<'a, T> {
    pub fn new(
        latent_dim: usize,
        ambient_dim: usize,
        map: impl Fn(ArrayView1<T>) -> Array1<T> + Send + Sync + 'a,
    ) -> Self {
        FnTransport {
            latent_dim,
            ambient_dim,
            map: Box::new(map),
            jacobian: None,
        }
    }

    pub fn with_jacobian(
        mut self,
        jacobian: impl Fn(ArrayView1<T>) -> Array2<T> + Send + Sync + 'a,
    ) -> Self {
        self.jacobian = Some(Box::new(jacobian));
        self
    }
}

impl<T: Scalar> Transport<T> for FnTransport<'_, T> {
    fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    fn ambient_dim(&self) -> usize {
        self.ambient_dim
    }

    fn apply(&self, latents: ArrayView2<T>) -> Result<Array2<T>> {
        if latents.ncols() != self.latent_dim {
            return Err(MagtError::Dimension {
                what: "latent columns",
                expected: self.latent_dim,
                got: latents.ncols(),
            });
        }
        let mut out = Array2::zeros((latents.nrows(), self.ambient_dim));
        for (row, u) in out.rows_mut().into_iter().zip(latents.rows()) {
            let y = (self.map)(u);
            if y.len() != self.ambient_dim {
                return Err(MagtError::Dimension {
                    what: "transport output length",
                    expected: self.ambient_dim,
                    got: y.len(),
                });
            }
            let mut row = row;
            row.assign(&y);
        }
        Ok(out)
    }

    fn jacobian(&self, latent: ArrayView1<T>) -> Result<(Array2<T>, bool)> {
        if latent.len() != self.latent_dim {
            return Err(MagtError::Dimension {
                what: "latent length",
                expected: self.latent_dim,
                got: latent.len(),
            });
        }
        if let Some(j) = &self.jacobian {
            return Ok((j(latent), false));
        }
        let eps = T::lit(1e-6);
        let mut jac = Array2::zeros((self.ambient_dim, self.latent_dim));
        for c in 0..self.latent_dim {
            let mut up = latent.to_owned();
            up[c] += eps;
            let mut dn = latent.to_owned();
            dn[c] -= eps;
            let diff = ((self.map)(up.view()) - (self.map)(dn.view())) / (T::lit(2.0) * eps);
            jac.column_mut(c).assign(&diff);
        }
        Ok((jac, false))
    }
}
