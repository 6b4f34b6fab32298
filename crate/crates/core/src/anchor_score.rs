//! Anchor-based estimates of the posterior mean `E[h(U) | Y_t = y]` and of
//! the fixed-level score `(alpha * mean - y) / sigma^2`.
//!
//! Anchors are latent points with cached outputs `h(u_j)`. Their
//! self-normalized importance weights are
//!
//! ```text
//! log w_j = log pi(u_j) - log q(u_j | y) - |y - alpha h(u_j)|^2 / (2 sigma^2)
//! ```
//!
//! where the ratio term vanishes for prior proposals (MC and QMC) and the
//! Gaussian normalizing constant is dropped because it cancels on
//! normalization. Everything is computed in the log domain with the
//! maximum subtracted before exponentiation.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand_distr::{Distribution, StandardNormal};

use crate::error::{MagtError, Result};
use crate::linalg;
use crate::prior::LatentPrior;
use crate::qmc::Sobol;
use crate::rng::{stream_rng, streams, substream};
use crate::scalar::Scalar;
use crate::schedule::NoiseLevel;
use crate::transport::Transport;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ProposalKind {
    PriorMc,
    PriorQmc,
    MapLaplace,
}

impl ProposalKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ProposalKind::PriorMc => "mc",
            ProposalKind::PriorQmc => "qmc",
            ProposalKind::MapLaplace => "map",
        }
    }
}

impl std::str::FromStr for ProposalKind {
    type Err = MagtError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mc" | "prior_mc" => Ok(ProposalKind::PriorMc),
            "qmc" | "prior_qmc" => Ok(ProposalKind::PriorQmc),
            "map" | "map_laplace" => Ok(ProposalKind::MapLaplace),
            other => Err(MagtError::Config(format!("unknown proposal kind {other:?}"))),
        }
    }
}

/// `K` latent anchors together with their transported outputs.
#[derive(Debug, Clone)]
pub struct AnchorBank<T> {
    pub latents: Array2<T>,
    pub outputs: Array2<T>,
    pub proposal: ProposalKind,
    /// `log q(u_j | y)`; present only for data-dependent proposals.
    pub proposal_log_density: Option<Array1<T>>,
    pub prior_log_density: Array1<T>,
    built_for: Option<u64>,
}

impl<T: Scalar> AnchorBank<T> {
    /// Evaluates `transport` at `latents` and records prior log-densities.
    pub fn from_latents(
        transport: &(impl Transport<T> + ?Sized),
        prior: &LatentPrior,
        latents: Array2<T>,
        proposal: ProposalKind,
    ) -> Result<Self> {
        if latents.nrows() == 0 {
            return Err(MagtError::Config("anchor bank needs K >= 1".into()));
        }
        let outputs = transport.apply(latents.view())?;
        let prior_log_density = prior.log_density_rows(&latents);
        Ok(AnchorBank {
            latents,
            outputs,
            proposal,
            proposal_log_density: None,
            prior_log_density,
            built_for: transport.version(),
        })
    }

    /// Bank from outputs already computed by `transport`, e.g. during a
    /// recorded forward pass.
    pub fn from_outputs(
        transport: &(impl Transport<T> + ?Sized),
        prior: &LatentPrior,
        latents: Array2<T>,
        outputs: Array2<T>,
        proposal: ProposalKind,
    ) -> Result<Self> {
        if latents.nrows() == 0 || latents.nrows() != outputs.nrows() {
            return Err(MagtError::Dimension {
                what: "anchor outputs",
                expected: latents.nrows(),
                got: outputs.nrows(),
            });
        }
        let prior_log_density = prior.log_density_rows(&latents);
        Ok(AnchorBank {
            latents,
            outputs,
            proposal,
            proposal_log_density: None,
            prior_log_density,
            built_for: transport.version(),
        })
    }

    /// A bank of fixed atoms with equal prior mass, i.e. the exact mixture
    /// for a prior that is uniform over `outputs`.
    pub fn from_atoms(outputs: Array2<T>) -> Result<Self> {
        let k = outputs.nrows();
        if k == 0 {
            return Err(MagtError::Config("anchor bank needs K >= 1".into()));
        }
        let log_mass = -T::lit(k as f64).ln();
        Ok(AnchorBank {
            latents: Array2::zeros((k, 0)),
            outputs,
            proposal: ProposalKind::PriorMc,
            proposal_log_density: None,
            prior_log_density: Array1::from_elem(k, log_mass),
            built_for: None,
        })
    }

    pub fn len(&self) -> usize {
        self.outputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn ambient_dim(&self) -> usize {
        self.outputs.ncols()
    }

    /// Fails if `transport` changed since the bank was built.
    pub fn ensure_fresh(&self, transport: &(impl Transport<T> + ?Sized)) -> Result<()> {
        match (self.built_for, transport.version()) {
            (Some(built), Some(current)) if built != current => {
                Err(MagtError::StaleBank { built, current })
            }
            _ => Ok(()),
        }
    }

    /// `log pi(u_j) - log q(u_j | y)`, or zeros for prior proposals.
    pub fn log_ratio(&self) -> Array1<T> {
        match &self.proposal_log_density {
            Some(q) => &self.prior_log_density - q,
            None => Array1::zeros(self.len()),
        }
    }
}

/// Result of one score query.
#[derive(Debug, Clone)]
pub struct ScoreEstimate<T> {
    pub score: Array1<T>,
    pub posterior_mean: Array1<T>,
    /// `logsumexp(log w) - log K`.
    pub log_normalizer: T,
    /// `1 / sum_j w_j^2` for normalized weights.
    pub effective_sample_size: T,
}

/// Normalized weights and derived quantities for a batch of queries.
#[derive(Debug, Clone)]
pub struct SoftAssignment<T> {
    /// `B x K`, rows sum to one.
    pub weights: Array2<T>,
    /// `B x D` posterior means.
    pub means: Array2<T>,
    pub log_normalizer: Array1<T>,
    pub ess: Array1<T>,
}

impl<T: Scalar> SoftAssignment<T> {
    /// Scores `(alpha m_b - y_b) / sigma^2` for the queries that produced
    /// this assignment.
    pub fn scores(&self, level: &NoiseLevel<T>, ys: ArrayView2<T>) -> Array2<T> {
        let inv = T::one() / level.sigma2();
        (&self.means * level.alpha - &ys) * inv
    }
}

fn check_query<T: Scalar>(bank: &AnchorBank<T>, dim: usize) -> Result<()> {
    if bank.is_empty() {
        return Err(MagtError::Config("anchor bank is empty".into()));
    }
    if dim != bank.ambient_dim() {
        return Err(MagtError::Dimension {
            what: "query dimension",
            expected: bank.ambient_dim(),
            got: dim,
        });
    }
    Ok(())
}

fn logits_into<T: Scalar>(
    level: &NoiseLevel<T>,
    outputs: &[T],
    dim: usize,
    ratio: &[T],
    y: &[T],
    out: &mut [T],
) {
    let scale = T::lit(-0.5) / level.sigma2();
    for ((o, row), &r) in out.iter_mut().zip(outputs.chunks_exact(dim)).zip(ratio) {
        let mut sq = T::zero();
        for (&yi, &hi) in y.iter().zip(row) {
            let diff = yi - level.alpha * hi;
            sq += diff * diff;
        }
        *o = r + scale * sq;
    }
}

/// In-place softmax; returns `logsumexp` of the input.
fn softmax_in_place<T: Scalar>(v: &mut [T]) -> Result<T> {
    let max = v.iter().copied().fold(T::neg_infinity(), T::max);
    if !max.is_finite() {
        return Err(MagtError::Numerical(
            "every anchor has zero importance weight".into(),
        ));
    }
    let mut sum = T::zero();
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    let inv = T::one() / sum;
    for x in v.iter_mut() {
        *x *= inv;
    }
    Ok(max + sum.ln())
}

/// Unnormalized log-weights of every anchor for the query `y`.
pub fn log_weights<T: Scalar>(
    level: &NoiseLevel<T>,
    bank: &AnchorBank<T>,
    y: ArrayView1<T>,
) -> Result<Array1<T>> {
    check_query(bank, y.len())?;
    let outputs = bank.outputs.as_standard_layout();
    let ratio = bank.log_ratio();
    let y = y.to_owned();
    let mut out = Array1::zeros(bank.len());
    logits_into(
        level,
        outputs.as_slice().unwrap(),
        bank.ambient_dim(),
        ratio.as_slice().unwrap(),
        y.as_slice().unwrap(),
        out.as_slice_mut().unwrap(),
    );
    Ok(out)
}

/// Normalized weights of `log_weights`.
pub fn normalized_weights<T: Scalar>(
    level: &NoiseLevel<T>,
    bank: &AnchorBank<T>,
    y: ArrayView1<T>,
) -> Result<Array1<T>> {
    let mut w = log_weights(level, bank, y)?;
    softmax_in_place(w.as_slice_mut().unwrap())?;
    Ok(w)
}

/// Posterior mean, score and weight diagnostics at a single query.
pub fn estimate_score<T: Scalar>(
    level: &NoiseLevel<T>,
    bank: &AnchorBank<T>,
    y: ArrayView1<T>,
) -> Result<ScoreEstimate<T>> {
    let mut w = log_weights(level, bank, y)?;
    let lse = softmax_in_place(w.as_slice_mut().unwrap())?;
    let posterior_mean = w.dot(&bank.outputs);
    let score = (&posterior_mean * level.alpha - &y) / level.sigma2();
    let sum_sq = w.iter().fold(T::zero(), |a, &x| a + x * x);
    Ok(ScoreEstimate {
        score,
        posterior_mean,
        log_normalizer: lse - T::lit(bank.len() as f64).ln(),
        effective_sample_size: T::one() / sum_sq,
    })
}

/// Soft assignment of every query row to the anchors of one shared bank.
pub fn soft_assign<T: Scalar>(
    level: &NoiseLevel<T>,
    bank: &AnchorBank<T>,
    ys: ArrayView2<T>,
) -> Result<SoftAssignment<T>> {
    check_query(bank, ys.ncols())?;
    let (b, k, dim) = (ys.nrows(), bank.len(), bank.ambient_dim());
    let outputs = bank.outputs.as_standard_layout();
    let outputs = outputs.as_slice().unwrap();
    let ratio = bank.log_ratio();
    let ratio = ratio.as_slice().unwrap();
    let ys = ys.as_standard_layout();
    let mut weights = Array2::<T>::zeros((b, k));
    let mut log_normalizer = Array1::<T>::zeros(b);
    let mut ess = Array1::<T>::zeros(b);
    let log_k = T::lit(k as f64).ln();
    for (i, (mut row, y)) in weights.rows_mut().into_iter().zip(ys.rows()).enumerate() {
        let slot = row.as_slice_mut().unwrap();
        logits_into(level, outputs, dim, ratio, y.as_slice().unwrap(), slot);
        log_normalizer[i] = softmax_in_place(slot)? - log_k;
        ess[i] = T::one() / slot.iter().fold(T::zero(), |a, &x| a + x * x);
    }
    let means = weights.dot(&bank.outputs);
    Ok(SoftAssignment {
        weights,
        means,
        log_normalizer,
        ess,
    })
}

/// Scores for every row of `ys` against one bank.
pub fn estimate_scores<T: Scalar>(
    level: &NoiseLevel<T>,
    bank: &AnchorBank<T>,
    ys: ArrayView2<T>,
) -> Result<Array2<T>> {
    Ok(soft_assign(level, bank, ys)?.scores(level, ys))
}

/// Streaming posterior means for large query sets: never materializes the
/// full `B x K` weight matrix.
pub fn posterior_means<T: Scalar>(
    level: &NoiseLevel<T>,
    bank: &AnchorBank<T>,
    ys: ArrayView2<T>,
) -> Result<Array2<T>> {
    check_query(bank, ys.ncols())?;
    let (k, dim) = (bank.len(), bank.ambient_dim());
    let outputs = bank.outputs.as_standard_layout();
    let outputs = outputs.as_slice().unwrap();
    let ratio = bank.log_ratio();
    let ratio = ratio.as_slice().unwrap();
    let ys = ys.as_standard_layout();
    let mut means = Array2::<T>::zeros((ys.nrows(), dim));
    let mut w = vec![T::zero(); k];
    for (mut m, y) in means.rows_mut().into_iter().zip(ys.rows()) {
        logits_into(level, outputs, dim, ratio, y.as_slice().unwrap(), &mut w);
        softmax_in_place(&mut w)?;
        let m = m.as_slice_mut().unwrap();
        for (&wj, row) in w.iter().zip(outputs.chunks_exact(dim)) {
            for (mi, &hi) in m.iter_mut().zip(row) {
                *mi += wj * hi;
            }
        }
    }
    Ok(means)
}

/// `K` i.i.d. prior anchors.
pub fn build_bank_mc<T: Scalar>(
    transport: &(impl Transport<T> + ?Sized),
    prior: &LatentPrior,
    k: usize,
    seed: u64,
) -> Result<AnchorBank<T>> {
    let mut rng = stream_rng(seed, streams::ANCHORS);
    let latents = prior.sample(&mut rng, k, transport.latent_dim());
    AnchorBank::from_latents(transport, prior, latents, ProposalKind::PriorMc)
}

/// The first `K` Sobol' points (scrambled when a seed is given) pushed
/// through the prior's coordinate-wise inverse CDF.
///
/// For the normal prior each 32-bit cell is mapped at its midpoint so the
/// unscrambled origin does not land on `-inf`.
pub fn build_bank_qmc<T: Scalar>(
    transport: &(impl Transport<T> + ?Sized),
    prior: &LatentPrior,
    k: usize,
    scramble_seed: Option<u64>,
) -> Result<AnchorBank<T>> {
    let latents = qmc_latents(prior, k, transport.latent_dim(), scramble_seed)?;
    AnchorBank::from_latents(transport, prior, latents, ProposalKind::PriorQmc)
}

pub fn qmc_latents<T: Scalar>(
    prior: &LatentPrior,
    k: usize,
    d: usize,
    scramble_seed: Option<u64>,
) -> Result<Array2<T>> {
    let sobol = Sobol::new(d, scramble_seed.map(|s| substream(streams::QMC_SCRAMBLE, s)))?;
    let raw = sobol.points(k);
    let half_cell = 0.5 / 4_294_967_296.0;
    Ok(raw.mapv(|p| {
        let p = match prior {
            LatentPrior::StandardNormal => p + half_cell,
            LatentPrior::Uniform { .. } => p,
        };
        T::lit(prior.from_unit_cube(p))
    }))
}

/// Settings for the MAP search and the Laplace covariance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LaplaceOptions {
    pub max_iters: usize,
    pub grad_tol: f64,
    /// Armijo sufficient-decrease constant.
    pub armijo: f64,
    pub zeta: f64,
    pub tau2: f64,
    /// Number of prior draws the search starts from (best one wins).
    pub init_draws: usize,
    pub seed: u64,
}

impl Default for LaplaceOptions {
    fn default() -> Self {
        LaplaceOptions {
            max_iters: 200,
            grad_tol: 1e-6,
            armijo: 1e-4,
            zeta: 1.0,
            tau2: 1e-4,
            init_draws: 64,
            seed: 0,
        }
    }
}

/// Gaussian proposal `N(map_point, precision^{-1})`.
#[derive(Debug, Clone)]
pub struct LaplaceProposal<T> {
    pub map_point: Array1<T>,
    pub precision: Array2<T>,
    pub zeta: T,
    pub tau2: T,
    /// Lower Cholesky factor of `precision`.
    pub chol: Array2<T>,
    pub iterations: usize,
    pub grad_norm: T,
}

impl<T: Scalar> LaplaceProposal<T> {
    pub fn new(map_point: Array1<T>, precision: Array2<T>, zeta: T, tau2: T) -> Result<Self> {
        let chol = linalg::cholesky(precision.view())
            .map_err(|e| MagtError::Numerical(format!("Laplace precision: {e}")))?;
        Ok(LaplaceProposal {
            map_point,
            precision,
            zeta,
            tau2,
            chol,
            iterations: 0,
            grad_norm: T::zero(),
        })
    }

    pub fn dim(&self) -> usize {
        self.map_point.len()
    }

    pub fn covariance(&self) -> Array2<T> {
        linalg::cholesky_inverse(&self.chol)
    }

    /// Draws `u = map + L^{-T} z` and returns it with `log q(u)`.
    pub fn sample<R: rand::Rng + ?Sized>(&self, rng: &mut R, k: usize) -> (Array2<T>, Array1<T>) {
        let d = self.dim();
        let half_logdet = T::lit(0.5) * linalg::logdet_from_cholesky(&self.chol);
        let norm = T::lit(-0.5 * d as f64 * (2.0 * std::f64::consts::PI).ln()) + half_logdet;
        let mut latents = Array2::zeros((k, d));
        let mut logq = Array1::zeros(k);
        for j in 0..k {
            let z = Array1::from_shape_fn(d, |_| {
                let x: f64 = StandardNormal.sample(rng);
                T::lit(x)
            });
            let step = linalg::solve_upper_t(&self.chol, z.view());
            latents.row_mut(j).assign(&(&self.map_point + &step));
            logq[j] = norm - T::lit(0.5) * z.dot(&z);
        }
        (latents, logq)
    }

    pub fn log_density(&self, u: ArrayView1<T>) -> T {
        let d = self.dim();
        let diff = &u - &self.map_point;
        let lt = self.chol.t().dot(&diff);
        T::lit(-0.5 * d as f64 * (2.0 * std::f64::consts::PI).ln())
            + T::lit(0.5) * linalg::logdet_from_cholesky(&self.chol)
            - T::lit(0.5) * lt.dot(&lt)
    }
}

/// Negative log-posterior `|y - alpha h(u)|^2 / (2 sigma^2) - log pi(u)`.
pub fn neg_log_posterior<T: Scalar>(
    transport: &(impl Transport<T> + ?Sized),
    prior: &LatentPrior,
    level: &NoiseLevel<T>,
    y: ArrayView1<T>,
    u: ArrayView1<T>,
) -> Result<T> {
    let h = transport.apply_one(u)?;
    let r = &y - &(&h * level.alpha);
    Ok(r.dot(&r) / (T::lit(2.0) * level.sigma2()) - prior.log_density(u))
}

fn neg_log_posterior_grad<T: Scalar>(
    transport: &(impl Transport<T> + ?Sized),
    prior: &LatentPrior,
    level: &NoiseLevel<T>,
    y: ArrayView1<T>,
    u: ArrayView1<T>,
) -> Result<(T, Array1<T>, Array2<T>)> {
    let h = transport.apply_one(u)?;
    let (jac, _) = transport.jacobian(u)?;
    let r = &y - &(&h * level.alpha);
    let value = r.dot(&r) / (T::lit(2.0) * level.sigma2()) - prior.log_density(u);
    let grad = jac.t().dot(&r) * (-level.alpha / level.sigma2()) - prior.grad_log_density(u);
    Ok((value, grad, jac))
}

/// Gauss–Newton Laplace proposal around the MAP latent for query `y`.
///
/// The MAP point is found by gradient descent with Armijo backtracking
/// (step halving), started from the best of `opts.init_draws` prior draws.
/// The trial step of each iteration is the Barzilai–Borwein length from
/// the previous pair of iterates.
pub fn fit_laplace_proposal<T: Scalar>(
    transport: &(impl Transport<T> + ?Sized),
    prior: &LatentPrior,
    level: &NoiseLevel<T>,
    y: ArrayView1<T>,
    opts: &LaplaceOptions,
) -> Result<LaplaceProposal<T>> {
    if y.len() != transport.ambient_dim() {
        return Err(MagtError::Dimension {
            what: "query dimension",
            expected: transport.ambient_dim(),
            got: y.len(),
        });
    }
    let d = transport.latent_dim();
    let mut rng = stream_rng(opts.seed, streams::LAPLACE);
    let starts: Array2<T> = prior.sample(&mut rng, opts.init_draws.max(1), d);
    let start_outputs = transport.apply(starts.view())?;
    let mut best = (T::infinity(), 0usize);
    for (i, (u, h)) in starts.rows().into_iter().zip(start_outputs.rows()).enumerate() {
        let r = &y - &(&h * level.alpha);
        let phi = r.dot(&r) / (T::lit(2.0) * level.sigma2()) - prior.log_density(u);
        if phi < best.0 {
            best = (phi, i);
        }
    }
    let mut u = starts.row(best.1).to_owned();
    let (mut phi, mut grad, mut jac) = neg_log_posterior_grad(transport, prior, level, y, u.view())?;
    let mut trace = vec![phi.as_f64()];
    let armijo = T::lit(opts.armijo);
    let mut prev: Option<(Array1<T>, Array1<T>)> = None;
    let mut iterations = 0;
    while iterations < opts.max_iters {
        let gnorm2 = grad.dot(&grad);
        if gnorm2.sqrt() < T::lit(opts.grad_tol) {
            break;
        }
        let mut step = match &prev {
            Some((pu, pg)) => {
                let s = &u - pu;
                let g = &grad - pg;
                let sy = s.dot(&g);
                if sy > T::zero() {
                    s.dot(&s) / sy
                } else {
                    T::one()
                }
            }
            None => T::one(),
        };
        let mut accepted = None;
        for _ in 0..60 {
            let cand = &u - &(&grad * step);
            let value = neg_log_posterior(transport, prior, level, y, cand.view())?;
            if value.is_nan() {
                return Err(MagtError::Numerical(format!(
                    "non-finite negative log-posterior during MAP search; trace {trace:?}"
                )));
            }
            if value <= phi - armijo * step * gnorm2 {
                accepted = Some(cand);
                break;
            }
            step = step * T::lit(0.5);
        }
        let Some(cand) = accepted else { break };
        prev = Some((u, grad));
        u = cand;
        (phi, grad, jac) = neg_log_posterior_grad(transport, prior, level, y, u.view())?;
        if !phi.is_finite() {
            trace.push(phi.as_f64());
            return Err(MagtError::Numerical(format!(
                "non-finite negative log-posterior during MAP search; trace {trace:?}"
            )));
        }
        trace.push(phi.as_f64());
        iterations += 1;
    }
    let ratio = level.alpha * level.alpha / level.sigma2();
    let mut lambda = jac.t().dot(&jac) * ratio;
    for i in 0..d {
        lambda[[i, i]] += T::one();
    }
    let zeta = T::lit(opts.zeta);
    let tau2 = T::lit(opts.tau2);
    let mut precision = lambda * zeta;
    for i in 0..d {
        precision[[i, i]] += tau2;
    }
    let mut proposal = LaplaceProposal::new(u, precision, zeta, tau2)?;
    proposal.iterations = iterations;
    proposal.grad_norm = grad.dot(&grad).sqrt();
    Ok(proposal)
}

/// `K` draws from a given Gaussian proposal with the importance ratio
/// recorded.
pub fn build_bank_from_proposal<T: Scalar>(
    transport: &(impl Transport<T> + ?Sized),
    prior: &LatentPrior,
    proposal: &LaplaceProposal<T>,
    k: usize,
    seed: u64,
) -> Result<AnchorBank<T>> {
    let mut rng = stream_rng(seed, streams::ANCHORS);
    let (latents, logq) = proposal.sample(&mut rng, k);
    let mut bank = AnchorBank::from_latents(transport, prior, latents, ProposalKind::MapLaplace)?;
    bank.proposal_log_density = Some(logq);
    Ok(bank)
}

/// MAP–Laplace anchors for a single query `y`.
pub fn build_bank_map<T: Scalar>(
    transport: &(impl Transport<T> + ?Sized),
    prior: &LatentPrior,
    level: &NoiseLevel<T>,
    y: ArrayView1<T>,
    k: usize,
    seed: u64,
    opts: &LaplaceOptions,
) -> Result<AnchorBank<T>> {
    let proposal = fit_laplace_proposal(transport, prior, level, y, opts)?;
    build_bank_from_proposal(transport, prior, &proposal, k, seed)
}

/// Sum of normalized weights per row; used by invariant checks.
pub fn weight_sums<T: Scalar>(weights: &Array2<T>) -> Array1<T> {
    weights.sum_axis(Axis(1))
}
