//! Densities of the learned model: the chart density on the image manifold
//! and the anchor estimate of the smoothed ambient density.

use ndarray::{Array1, Array2, ArrayView1};

use crate::anchor_score::{log_weights, AnchorBank, ProposalKind};
use crate::error::{MagtError, Result};
use crate::linalg;
use crate::prior::LatentPrior;
use crate::rng::{stream_rng, streams};
use crate::scalar::Scalar;
use crate::schedule::NoiseLevel;
use crate::transport::Transport;

/// Smallest admissible eigenvalue of `J^T J`.
pub const RANK_TOL: f64 = 1e-12;

/// `log pi(u) - 0.5 log det(J^T J)` at `latent`.
pub fn intrinsic_log_density<T: Scalar>(
    transport: &(impl Transport<T> + ?Sized),
    prior: &LatentPrior,
    latent: ArrayView1<T>,
) -> Result<T> {
    let (jac, _on_kink) = transport.jacobian(latent)?;
    let gram = jac.t().dot(&jac);
    let eig = linalg::symmetric_eigenvalues(gram.view());
    let min_eig = eig.first().copied().unwrap_or_else(T::zero);
    if !(min_eig >= T::lit(RANK_TOL)) {
        return Err(MagtError::RankDeficient {
            min_eig: min_eig.as_f64(),
        });
    }
    let chol = linalg::cholesky(gram.view())?;
    Ok(prior.log_density(latent) - T::lit(0.5) * linalg::logdet_from_cholesky(&chol))
}

/// `log[(1/K) sum_j N(y; alpha h(u_j), sigma^2 I)]` over a prior bank.
pub fn smoothed_ambient_log_density<T: Scalar>(
    level: &NoiseLevel<T>,
    bank: &AnchorBank<T>,
    y: ArrayView1<T>,
) -> Result<T> {
    if bank.proposal == ProposalKind::MapLaplace {
        return Err(MagtError::Config(
            "smoothed density needs a prior bank; MAP-Laplace banks are query-specific".into(),
        ));
    }
    let logits = log_weights(level, bank, y)?;
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    if !max.is_finite() {
        return Err(MagtError::Numerical("smoothed density underflowed".into()));
    }
    let sum = logits.iter().fold(T::zero(), |acc, &l| acc + (l - max).exp());
    let k = T::lit(bank.len() as f64);
    let dim = T::lit(bank.ambient_dim() as f64);
    let two_pi = T::lit(2.0 * std::f64::consts::PI);
    Ok(max + sum.ln() - k.ln() - T::lit(0.5) * dim * (two_pi * level.sigma2()).ln())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PreimageOptions {
    pub starts: usize,
    pub max_iters: usize,
    pub tol: f64,
    pub seed: u64,
}

impl Default for PreimageOptions {
    fn default() -> Self {
        PreimageOptions {
            starts: 64,
            max_iters: 100,
            tol: 1e-10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Preimage<T> {
    pub latent: Array1<T>,
    /// `|h(latent) - y|`.
    pub residual: T,
}

/// Best-effort latent `u` with `h(u)` close to `y`: damped Gauss–Newton from
/// the best of several prior draws. Finds one preimage; fibres with several
/// points are not enumerated.
pub fn find_preimage<T: Scalar>(
    transport: &(impl Transport<T> + ?Sized),
    prior: &LatentPrior,
    y: ArrayView1<T>,
    opts: &PreimageOptions,
) -> Result<Preimage<T>> {
    if y.len() != transport.ambient_dim() {
        return Err(MagtError::Dimension {
            what: "point dimension",
            expected: transport.ambient_dim(),
            got: y.len(),
        });
    }
    let d = transport.latent_dim();
    let mut rng = stream_rng(opts.seed, streams::LAPLACE);
    let starts: Array2<T> = prior.sample(&mut rng, opts.starts.max(1), d);
    let outputs = transport.apply(starts.view())?;
    let residual2 = |h: ArrayView1<T>| {
        let r = &h - &y;
        r.dot(&r)
    };
    let (mut best_i, mut best_r) = (0, T::infinity());
    for (i, h) in outputs.rows().into_iter().enumerate() {
        let r = residual2(h);
        if r < best_r {
            best_r = r;
            best_i = i;
        }
    }
    let mut u = starts.row(best_i).to_owned();
    let mut r2 = best_r;
    let mut damping = T::lit(1e-3);
    for _ in 0..opts.max_iters {
        if r2.sqrt() < T::lit(opts.tol) {
            break;
        }
        let h = transport.apply_one(u.view())?;
        let (jac, _) = transport.jacobian(u.view())?;
        let resid = &h - &y;
        let g = jac.t().dot(&resid);
        let gram = jac.t().dot(&jac);
        let mut improved = false;
        for _ in 0..30 {
            let mut a = gram.clone();
            for i in 0..d {
                a[[i, i]] += damping * (T::one() + gram[[i, i]]);
            }
            let Ok(chol) = linalg::cholesky(a.view()) else {
                damping *= T::lit(10.0);
                continue;
            };
            let step = linalg::cholesky_solve(&chol, g.view());
            let cand = &u - &step;
            let cand_r2 = residual2(transport.apply_one(cand.view())?.view());
            if cand_r2 < r2 {
                u = cand;
                r2 = cand_r2;
                damping = (damping * T::lit(0.3)).max(T::lit(1e-12));
                improved = true;
                break;
            }
            damping *= T::lit(10.0);
        }
        if !improved {
            break;
        }
    }
    Ok(Preimage {
        latent: u,
        residual: r2.sqrt(),
    })
}
