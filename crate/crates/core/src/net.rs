//! Fully connected ReLU transport `h: R^d -> R^D`.
//!
//! Weights are stored `out x in`; a batch of inputs is a `K x in` matrix and
//! each layer computes `Z = A W^T + b`. Hidden layers apply the rectifier,
//! the output layer is affine. The rectifier derivative at exactly zero is
//! taken to be 0, both in reverse mode and in the forward-mode Jacobian.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand_distr::{Distribution, StandardNormal};

use crate::error::{MagtError, Result};
use crate::rng::{stream_rng, streams};
use crate::scalar::Scalar;

/// Hidden pre-activations closer to zero than this are reported as lying on
/// an activation boundary by [`TransportNet::input_jacobian`].
pub const BOUNDARY_TOL: f64 = 1e-12;

const CHECKPOINT_MAGIC: &str = "MAGT-NET v1";

#[derive(Debug, Clone, PartialEq)]
pub struct TransportNet<T> {
    layer_dims: Vec<usize>,
    pub weights: Vec<Array2<T>>,
    pub biases: Vec<Array1<T>>,
    seed: u64,
    /// Bumped on every parameter update; anchor banks remember the version
    /// they were built against.
    version: u64,
}

/// Activations recorded by [`TransportNet::forward`]. `activations[0]` is the
/// input batch and `activations[l]` the post-rectifier output of hidden
/// layer `l`; the rectifier mask is recovered as `activation > 0`.
#[derive(Debug, Clone)]
pub struct ForwardTape<T> {
    pub activations: Vec<Array2<T>>,
    version: u64,
}

impl<T> ForwardTape<T> {
    pub fn batch_size(&self) -> usize {
        self.activations[0].nrows()
    }
}

/// Gradient of a scalar with respect to every weight and bias, laid out
/// like the network parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterGradient<T> {
    pub weights: Vec<Array2<T>>,
    pub biases: Vec<Array1<T>>,
}

impl<T: Scalar> ParameterGradient<T> {
    pub fn zeros_like(net: &TransportNet<T>) -> Self {
        ParameterGradient {
            weights: net.weights.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            biases: net.biases.iter().map(|b| Array1::zeros(b.raw_dim())).collect(),
        }
    }

    pub fn norm(&self) -> T {
        let mut acc = T::zero();
        for w in &self.weights {
            acc = acc + w.iter().fold(T::zero(), |a, &x| a + x * x);
        }
        for b in &self.biases {
            acc = acc + b.iter().fold(T::zero(), |a, &x| a + x * x);
        }
        acc.sqrt()
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        let mut m = T::zero();
        for (a, b) in self.weights.iter().zip(&other.weights) {
            for (&x, &y) in a.iter().zip(b.iter()) {
                m = m.max((x - y).abs());
            }
        }
        for (a, b) in self.biases.iter().zip(&other.biases) {
            for (&x, &y) in a.iter().zip(b.iter()) {
                m = m.max((x - y).abs());
            }
        }
        m
    }

    pub fn is_zero(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|x| x.is_zero()))
            && self.biases.iter().all(|b| b.iter().all(|x| x.is_zero()))
    }

    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter().copied());
            out.extend(b.iter().copied());
        }
        out
    }
}

impl<T: Scalar> TransportNet<T> {
    /// He-initialised network: weights `N(0, 2 / fan_in)`, zero biases.
    pub fn init(layer_dims: &[usize], seed: u64) -> Result<Self> {
        validate_dims(layer_dims)?;
        let mut rng = stream_rng(seed, streams::NET_INIT);
        let mut weights = Vec::with_capacity(layer_dims.len() - 1);
        let mut biases = Vec::with_capacity(layer_dims.len() - 1);
        for pair in layer_dims.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let scale = (2.0 / fan_in as f64).sqrt();
            let w = Array2::from_shape_fn((fan_out, fan_in), |_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                T::lit(scale * z)
            });
            weights.push(w);
            biases.push(Array1::zeros(fan_out));
        }
        Ok(TransportNet {
            layer_dims: layer_dims.to_vec(),
            weights,
            biases,
            seed,
            version: 0,
        })
    }

    /// Builds a network from explicit parameters (`weights[l]` is `out x in`).
    pub fn from_parameters(
        weights: Vec<Array2<T>>,
        biases: Vec<Array1<T>>,
        seed: u64,
    ) -> Result<Self> {
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(MagtError::Config(
                "need one bias vector per weight matrix and at least one layer".into(),
            ));
        }
        let mut dims = vec![weights[0].ncols()];
        for (l, (w, b)) in weights.iter().zip(&biases).enumerate() {
            if w.ncols() != *dims.last().unwrap() {
                return Err(MagtError::Dimension {
                    what: "weight input width",
                    expected: *dims.last().unwrap(),
                    got: w.ncols(),
                });
            }
            if b.len() != w.nrows() {
                return Err(MagtError::Dimension {
                    what: "bias length",
                    expected: w.nrows(),
                    got: b.len(),
                });
            }
            if w.iter().chain(b.iter()).any(|x| !x.is_finite()) {
                return Err(MagtError::Numerical(format!("non-finite parameter in layer {l}")));
            }
            dims.push(w.nrows());
        }
        validate_dims(&dims)?;
        Ok(TransportNet {
            layer_dims: dims,
            weights,
            biases,
            seed,
            version: 0,
        })
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn latent_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn ambient_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn num_parameters(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>()
            + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    fn check_latents(&self, latents: &ArrayView2<T>) -> Result<()> {
        if latents.ncols() != self.latent_dim() {
            return Err(MagtError::Dimension {
                what: "latent columns",
                expected: self.latent_dim(),
                got: latents.ncols(),
            });
        }
        Ok(())
    }

    fn layer(&self, l: usize, input: &ArrayView2<T>) -> Array2<T> {
        let mut z = input.dot(&self.weights[l].t());
        z += &self.biases[l];
        if l + 1 < self.num_layers() {
            z.mapv_inplace(|x| if x > T::zero() { x } else { T::zero() });
        }
        z
    }

    /// Evaluates `h` on every row without recording a tape.
    pub fn apply(&self, latents: ArrayView2<T>) -> Result<Array2<T>> {
        self.check_latents(&latents)?;
        let mut a = self.layer(0, &latents);
        for l in 1..self.num_layers() {
            a = self.layer(l, &a.view());
        }
        Ok(a)
    }

    /// Evaluates `h` at a single latent point.
    pub fn apply_one(&self, latent: ArrayView1<T>) -> Result<Array1<T>> {
        let row = latent.insert_axis(Axis(0));
        Ok(self.apply(row)?.row(0).to_owned())
    }

    /// Evaluates `h` on every row and keeps what [`backward_params`] needs.
    ///
    /// [`backward_params`]: Self::backward_params
    pub fn forward(&self, latents: ArrayView2<T>) -> Result<(Array2<T>, ForwardTape<T>)> {
        self.check_latents(&latents)?;
        let mut activations = Vec::with_capacity(self.num_layers());
        activations.push(latents.to_owned());
        for l in 0..self.num_layers() - 1 {
            let next = self.layer(l, &activations[l].view());
            activations.push(next);
        }
        let out = self.layer(self.num_layers() - 1, &activations.last().unwrap().view());
        Ok((
            out,
            ForwardTape {
                activations,
                version: self.version,
            },
        ))
    }

    /// `grad_theta sum_k <h(u_k), g_k>` with the cotangents `g_k` held fixed.
    pub fn backward_params(
        &self,
        tape: &ForwardTape<T>,
        cotangents: ArrayView2<T>,
    ) -> Result<ParameterGradient<T>> {
        let mut grad = ParameterGradient::zeros_like(self);
        self.backward_params_into(tape, cotangents, &mut grad)?;
        Ok(grad)
    }

    /// Like [`backward_params`](Self::backward_params) but accumulates into
    /// `grad`, which is how chunked gradients are summed.
    pub fn backward_params_into(
        &self,
        tape: &ForwardTape<T>,
        cotangents: ArrayView2<T>,
        grad: &mut ParameterGradient<T>,
    ) -> Result<()> {
        if tape.version != self.version || tape.activations.len() != self.num_layers() {
            return Err(MagtError::Config(
                "forward tape was recorded for different parameters".into(),
            ));
        }
        if cotangents.dim() != (tape.batch_size(), self.ambient_dim()) {
            return Err(MagtError::Dimension {
                what: "cotangent rows",
                expected: tape.batch_size(),
                got: cotangents.nrows(),
            });
        }
        if grad.weights.len() != self.num_layers() {
            return Err(MagtError::Config("gradient accumulator has wrong layout".into()));
        }
        let mut delta = cotangents.to_owned();
        for l in (0..self.num_layers()).rev() {
            let input = &tape.activations[l];
            ndarray::linalg::general_mat_mul(
                T::one(),
                &delta.t(),
                input,
                T::one(),
                &mut grad.weights[l],
            );
            grad.biases[l] += &delta.sum_axis(Axis(0));
            if l > 0 {
                let mut back = delta.dot(&self.weights[l]);
                back.zip_mut_with(input, |d, &a| {
                    if a <= T::zero() {
                        *d = T::zero();
                    }
                });
                delta = back;
            }
        }
        Ok(())
    }

    /// Exact Jacobian `D x d` at `latent` by forward-mode propagation of the
    /// identity tangent. The flag is true when some hidden pre-activation is
    /// within [`BOUNDARY_TOL`] of zero, where `h` may not be differentiable.
    pub fn input_jacobian(&self, latent: ArrayView1<T>) -> Result<(Array2<T>, bool)> {
        if latent.len() != self.latent_dim() {
            return Err(MagtError::Dimension {
                what: "latent length",
                expected: self.latent_dim(),
                got: latent.len(),
            });
        }
        let tol = T::lit(BOUNDARY_TOL);
        let mut boundary = false;
        let mut value = latent.to_owned();
        let mut tangent = Array2::<T>::eye(self.latent_dim());
        for l in 0..self.num_layers() {
            let w = &self.weights[l];
            let mut z = w.dot(&value);
            z += &self.biases[l];
            let mut jz = w.dot(&tangent);
            if l + 1 < self.num_layers() {
                for (i, zi) in z.iter_mut().enumerate() {
                    if zi.abs() < tol {
                        boundary = true;
                    }
                    if *zi <= T::zero() {
                        *zi = T::zero();
                        jz.row_mut(i).fill(T::zero());
                    }
                }
            }
            value = z;
            tangent = jz;
        }
        Ok((tangent, boundary))
    }

    /// `theta <- theta - step`, where `step` has the gradient layout.
    pub fn apply_update(&mut self, step: &ParameterGradient<T>) {
        for (w, s) in self.weights.iter_mut().zip(&step.weights) {
            *w -= s;
        }
        for (b, s) in self.biases.iter_mut().zip(&step.biases) {
            *b -= s;
        }
        self.version += 1;
    }

    /// Replaces `h` by `scale * h + shift`, folded into the output layer.
    pub fn append_output_affine(&mut self, scale: T, shift: ArrayView1<T>) -> Result<()> {
        let last = self.num_layers() - 1;
        if shift.len() != self.biases[last].len() {
            return Err(MagtError::Dimension {
                what: "output shift",
                expected: self.biases[last].len(),
                got: shift.len(),
            });
        }
        self.weights[last].mapv_inplace(|w| w * scale);
        let b = &self.biases[last] * scale + &shift;
        self.biases[last] = b;
        self.version += 1;
        Ok(())
    }

    /// Mutable access to the parameters; counts as an update.
    pub fn parameters_mut(&mut self) -> (&mut [Array2<T>], &mut [Array1<T>]) {
        self.version += 1;
        (&mut self.weights, &mut self.biases)
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|x| x.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|x| x.is_finite()))
    }

    /// Converts the parameters to another scalar type.
    pub fn cast<U: Scalar>(&self) -> TransportNet<U> {
        TransportNet {
            layer_dims: self.layer_dims.clone(),
            weights: self.weights.iter().map(|w| w.mapv(|x| U::lit(x.as_f64()))).collect(),
            biases: self.biases.iter().map(|b| b.mapv(|x| U::lit(x.as_f64()))).collect(),
            seed: self.seed,
            version: self.version,
        }
    }

    /// Writes the checkpoint format: one text header line followed by
    /// little-endian `f64` parameters, per layer weights (row-major) then bias.
    pub fn write_checkpoint<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let dims: Vec<String> = self.layer_dims.iter().map(|d| d.to_string()).collect();
        writeln!(out, "{CHECKPOINT_MAGIC}; dims={}; seed={}", dims.join(","), self.seed)?;
        for (w, b) in self.weights.iter().zip(&self.biases) {
            for &x in w.iter() {
                out.write_all(&x.as_f64().to_le_bytes())?;
            }
            for &x in b.iter() {
                out.write_all(&x.as_f64().to_le_bytes())?;
            }
        }
        out.flush()
    }

    pub fn read_checkpoint<R: Read>(input: R) -> Result<Self> {
        let mut reader = BufReader::new(input);
        let mut header = String::new();
        reader
            .read_line(&mut header)
            .map_err(|e| MagtError::Parse(format!("checkpoint header: {e}")))?;
        let (dims, seed) = parse_checkpoint_header(header.trim_end_matches(['\n', '\r']))?;
        validate_dims(&dims)?;
        let mut next = || -> Result<T> {
            let mut buf = [0u8; 8];
            reader
                .read_exact(&mut buf)
                .map_err(|e| MagtError::Parse(format!("truncated checkpoint: {e}")))?;
            Ok(T::lit(f64::from_le_bytes(buf)))
        };
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in dims.windows(2) {
            let mut w = Array2::zeros((pair[1], pair[0]));
            for x in w.iter_mut() {
                *x = next()?;
            }
            let mut b = Array1::zeros(pair[1]);
            for x in b.iter_mut() {
                *x = next()?;
            }
            weights.push(w);
            biases.push(b);
        }
        let mut rest = Vec::new();
        reader
            .read_to_end(&mut rest)
            .map_err(|e| MagtError::Parse(e.to_string()))?;
        if !rest.is_empty() {
            return Err(MagtError::Parse(format!(
                "{} trailing bytes after checkpoint parameters",
                rest.len()
            )));
        }
        TransportNet::from_parameters(weights, biases, seed)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| MagtError::io(path, e))?;
        self.write_checkpoint(std::io::BufWriter::new(file))
            .map_err(|e| MagtError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| MagtError::io(path, e))?;
        Self::read_checkpoint(file)
    }
}

fn validate_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 {
        return Err(MagtError::Config(format!(
            "layer_dims needs at least input and output widths, got {dims:?}"
        )));
    }
    if dims.iter().any(|&w| w == 0) {
        return Err(MagtError::Config(format!("zero-width layer in {dims:?}")));
    }
    Ok(())
}

fn parse_checkpoint_header(line: &str) -> Result<(Vec<usize>, u64)> {
    let bad = || MagtError::Parse(format!("malformed checkpoint header {line:?}"));
    let mut parts = line.split("; ");
    if parts.next() != Some(CHECKPOINT_MAGIC) {
        return Err(bad());
    }
    let dims = parts
        .next()
        .and_then(|p| p.strip_prefix("dims="))
        .ok_or_else(bad)?
        .split(',')
        .map(|s| s.parse::<usize>().map_err(|_| bad()))
        .collect::<Result<Vec<_>>>()?;
    let seed = parts
        .next()
        .and_then(|p| p.strip_prefix("seed="))
        .ok_or_else(bad)?
        .parse::<u64>()
        .map_err(|_| bad())?;
    if parts.next().is_some() {
        return Err(bad());
    }
    Ok((dims, seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use ndarray::array;
    use rand::Rng;

    fn random_net(dims: &[usize], seed: u64) -> TransportNet<f64> {
        // He init has zero biases; perturb them so every code path is exercised
        let mut net = TransportNet::<f64>::init(dims, seed).unwrap();
        let mut rng = stream_rng(seed, 99);
        for b in net.biases.iter_mut() {
            b.mapv_inplace(|_| rng.random_range(-0.3..0.3));
        }
        net
    }

    fn random_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.5..1.5))
    }

    /// Straight-line evaluation used as an independent oracle.
    fn naive_eval(net: &TransportNet<f64>, u: &[f64]) -> Vec<f64> {
        let mut a = u.to_vec();
        let n = net.num_layers();
        for l in 0..n {
            let w = &net.weights[l];
            let mut z = vec![0.0; w.nrows()];
            for i in 0..w.nrows() {
                let mut s = net.biases[l][i];
                for j in 0..w.ncols() {
                    s += w[[i, j]] * a[j];
                }
                z[i] = if l + 1 < n { s.max(0.0) } else { s };
            }
            a = z;
        }
        a
    }

    #[test]
    fn identity_layer_is_identity() {
        let net =
            TransportNet::from_parameters(vec![Array2::<f64>::eye(3)], vec![Array1::zeros(3)], 0)
                .unwrap();
        let u = array![[0.5, -1.0, 2.0], [3.0, 0.0, -0.25]];
        let (out, _) = net.forward(u.view()).unwrap();
        assert_eq!(out, u);
    }

    #[test]
    fn dead_hidden_layer_outputs_final_bias() {
        let net = TransportNet::from_parameters(
            vec![array![[1.0], [1.0]], array![[2.0, -3.0], [1.0, 1.0]]],
            vec![array![-10.0, -10.0], array![0.7, -0.2]],
            0,
        )
        .unwrap();
        let out = net.apply(array![[1.0], [2.5]].view()).unwrap();
        assert_eq!(out, array![[0.7, -0.2], [0.7, -0.2]]);
    }

    #[test]
    fn forward_matches_straight_line_evaluation() {
        let net = random_net(&[3, 7, 4], 5);
        let mut rng = stream_rng(1, 1);
        let u = random_matrix(1, 3, &mut rng);
        let out = net.apply(u.view()).unwrap();
        let naive = naive_eval(&net, u.row(0).as_slice().unwrap());
        for (a, b) in out.row(0).iter().zip(&naive) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let net = random_net(&[2, 4, 3], 0);
        assert!(net.forward(array![[1.0, 2.0, 3.0]].view()).is_err());
        let (_, tape) = net.forward(array![[1.0, 2.0]].view()).unwrap();
        assert!(net.backward_params(&tape, array![[1.0, 2.0]].view()).is_err());
        assert!(net.input_jacobian(array![1.0].view()).is_err());
    }

    #[test]
    fn zero_cotangent_gives_zero_gradient() {
        let net = random_net(&[2, 5, 3], 2);
        let u = array![[0.3, -0.7], [1.2, 0.4]];
        let (_, tape) = net.forward(u.view()).unwrap();
        let g = net.backward_params(&tape, Array2::zeros((2, 3)).view()).unwrap();
        assert!(g.is_zero());
    }

    #[test]
    fn linear_gradient_is_outer_product() {
        let w = array![[1.0, 2.0], [0.5, -1.0], [3.0, 0.0]];
        let net = TransportNet::from_parameters(vec![w], vec![Array1::zeros(3)], 0).unwrap();
        let u = array![[0.4, -2.0]];
        let g = array![[1.0, -1.0, 0.5]];
        let (_, tape) = net.forward(u.view()).unwrap();
        let grad = net.backward_params(&tape, g.view()).unwrap();
        let expected = g.t().dot(&u);
        assert_eq!(grad.weights[0], expected);
        assert_eq!(grad.biases[0], array![1.0, -1.0, 0.5]);
    }

    fn pairing(net: &TransportNet<f64>, u: &Array2<f64>, g: &Array2<f64>) -> f64 {
        (net.apply(u.view()).unwrap() * g).sum()
    }

    fn fd_check(dims: &[usize], seed: u64) {
        let net = random_net(dims, seed);
        let mut rng = stream_rng(seed, 2);
        let u = random_matrix(3, dims[0], &mut rng);
        let g = random_matrix(3, *dims.last().unwrap(), &mut rng);
        let (_, tape) = net.forward(u.view()).unwrap();
        let grad = net.backward_params(&tape, g.view()).unwrap();
        let eps = 1e-5;
        let mut worst: f64 = 0.0;
        for l in 0..net.num_layers() {
            for idx in 0..net.weights[l].len() {
                let (r, c) = (idx / net.weights[l].ncols(), idx % net.weights[l].ncols());
                let mut p = net.clone();
                p.weights[l][[r, c]] += eps;
                let mut m = net.clone();
                m.weights[l][[r, c]] -= eps;
                let fd = (pairing(&p, &u, &g) - pairing(&m, &u, &g)) / (2.0 * eps);
                let an = grad.weights[l][[r, c]];
                worst = worst.max((fd - an).abs() / an.abs().max(1e-3));
            }
            for i in 0..net.biases[l].len() {
                let mut p = net.clone();
                p.biases[l][i] += eps;
                let mut m = net.clone();
                m.biases[l][i] -= eps;
                let fd = (pairing(&p, &u, &g) - pairing(&m, &u, &g)) / (2.0 * eps);
                let an = grad.biases[l][i];
                worst = worst.max((fd - an).abs() / an.abs().max(1e-3));
            }
        }
        assert!(worst < 1e-4, "relative error {worst}");
    }

    #[test]
    fn backward_matches_finite_differences() {
        fd_check(&[2, 6, 3], 10);
        fd_check(&[1, 8, 8, 2], 11);
    }

    #[test]
    fn linear_jacobian_is_weight() {
        let a = array![[1.0, 2.0], [-0.5, 0.25], [0.0, 3.0]];
        let net =
            TransportNet::from_parameters(vec![a.clone()], vec![array![1.0, 1.0, 1.0]], 0).unwrap();
        let (j, boundary) = net.input_jacobian(array![0.3, -7.0].view()).unwrap();
        assert_eq!(j, a);
        assert!(!boundary);
    }

    #[test]
    fn embedding_jacobian() {
        let net =
            TransportNet::from_parameters(vec![array![[1.0], [0.0]]], vec![array![0.0, 0.0]], 0)
                .unwrap();
        let (j, _) = net.input_jacobian(array![0.4].view()).unwrap();
        assert_eq!(j, array![[1.0], [0.0]]);
        let jtj = j.t().dot(&j);
        assert_eq!(jtj[[0, 0]], 1.0);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let net = random_net(&[2, 16, 16, 3], 3);
        let mut rng = stream_rng(3, 3);
        let eps = 1e-6;
        for _ in 0..20 {
            let u = Array1::from_shape_fn(2, |_| rng.random_range(-2.0..2.0));
            let (j, boundary) = net.input_jacobian(u.view()).unwrap();
            assert!(!boundary);
            for c in 0..2 {
                let mut up = u.clone();
                up[c] += eps;
                let mut um = u.clone();
                um[c] -= eps;
                let fd = (net.apply_one(up.view()).unwrap() - net.apply_one(um.view()).unwrap())
                    / (2.0 * eps);
                for r in 0..3 {
                    assert!((fd[r] - j[[r, c]]).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn boundary_is_flagged() {
        let net = TransportNet::from_parameters(
            vec![array![[1.0]], array![[1.0]]],
            vec![array![0.0], array![0.0]],
            0,
        )
        .unwrap();
        let (j, boundary) = net.input_jacobian(array![0.0].view()).unwrap();
        assert!(boundary);
        assert_eq!(j[[0, 0]], 0.0);
    }

    #[test]
    fn init_is_deterministic_with_zero_bias() {
        let a = TransportNet::<f64>::init(&[2, 32, 3], 9).unwrap();
        let b = TransportNet::<f64>::init(&[2, 32, 3], 9).unwrap();
        let c = TransportNet::<f64>::init(&[2, 32, 3], 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.weights, c.weights);
        assert!(a.biases.iter().all(|b| b.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn init_variance_matches_fan_in() {
        let net = TransportNet::<f64>::init(&[2, 512, 512, 3], 4).unwrap();
        for w in &net.weights[1..2] {
            let n = w.len() as f64;
            let mean = w.sum() / n;
            let var = w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            let target = 2.0 / w.ncols() as f64;
            assert!((var / target - 1.0).abs() < 0.1, "var {var} target {target}");
        }
    }

    #[test]
    fn output_affine_is_folded_exactly() {
        let mut net = TransportNet::<f64>::init(&[2, 6, 3], 4).unwrap();
        let u = array![[0.3, -1.2], [1.0, 0.5]];
        let before = net.apply(u.view()).unwrap();
        let shift = array![1.0, -2.0, 0.5];
        net.append_output_affine(2.5, shift.view()).unwrap();
        let after = net.apply(u.view()).unwrap();
        let want = &before * 2.5 + &shift;
        assert!(after.iter().zip(want.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
        assert!(net.append_output_affine(1.0, array![0.0].view()).is_err());
    }

    #[test]
    fn checkpoint_roundtrip_and_header() {
        let net = random_net(&[2, 5, 3], 77);
        let mut buf = Vec::new();
        net.write_checkpoint(&mut buf).unwrap();
        let header_end = buf.iter().position(|&b| b == b'\n').unwrap();
        assert_eq!(
            std::str::from_utf8(&buf[..header_end]).unwrap(),
            "MAGT-NET v1; dims=2,5,3; seed=77"
        );
        assert_eq!(buf.len(), header_end + 1 + 8 * net.num_parameters());
        // first stored value is W_0[0,0]
        let first = f64::from_le_bytes(buf[header_end + 1..header_end + 9].try_into().unwrap());
        assert_eq!(first, net.weights[0][[0, 0]]);
        let back = TransportNet::<f64>::read_checkpoint(&buf[..]).unwrap();
        assert_eq!(back.weights, net.weights);
        assert_eq!(back.biases, net.biases);
        assert_eq!(back.seed(), 77);
        assert!(TransportNet::<f64>::read_checkpoint(&buf[..buf.len() - 3]).is_err());
        assert!(TransportNet::<f64>::read_checkpoint(&b"MAGT-NET v2; dims=1,1; seed=0\n"[..]).is_err());
    }

    #[test]
    fn f32_forward_agrees_with_f64() {
        let net = random_net(&[2, 8, 3], 1);
        let net32: TransportNet<f32> = net.cast();
        let u = array![[0.2, -0.4]];
        let a = net.apply(u.view()).unwrap();
        let b = net32.apply(u.mapv(|x| x as f32).view()).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - *y as f64).abs() < 1e-5);
        }
    }
}
