//! One-shot generation and anchor-driven DDIM-style refinement.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand_distr::{Distribution, StandardNormal};

use crate::anchor_score::{build_bank_mc, posterior_means, AnchorBank};
use crate::error::{MagtError, Result};
use crate::prior::LatentPrior;
use crate::rng::{stream_rng, streams};
use crate::scalar::Scalar;
use crate::schedule::NoiseLevel;
use crate::transport::Transport;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerKind {
    OneShot,
    MDdim,
}

impl SamplerKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            SamplerKind::OneShot => "one_shot",
            SamplerKind::MDdim => "m_ddim",
        }
    }
}

impl fmt::Display for SamplerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SamplerKind {
    type Err = MagtError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "one_shot" | "magt" => Ok(SamplerKind::OneShot),
            "m_ddim" | "mddim" => Ok(SamplerKind::MDdim),
            other => Err(MagtError::Config(format!("unknown sampler {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    pub t_high: f64,
    pub t_low: f64,
    pub steps: usize,
    pub eta: f64,
    /// Size of the anchor bank cached for the whole refinement.
    pub bank_size: usize,
}

impl SamplerConfig {
    pub fn one_shot() -> Self {
        SamplerConfig {
            kind: SamplerKind::OneShot,
            ..Self::m_ddim()
        }
    }

    pub fn m_ddim() -> Self {
        SamplerConfig {
            kind: SamplerKind::MDdim,
            t_high: 0.90,
            t_low: 0.05,
            steps: 205,
            eta: 1.0,
            bank_size: 1024,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == SamplerKind::OneShot {
            return Ok(());
        }
        if !(0.0 < self.t_low && self.t_low < self.t_high && self.t_high < 1.0) {
            return Err(MagtError::Config(format!(
                "need 0 < t_low < t_high < 1, got t_low={} t_high={}",
                self.t_low, self.t_high
            )));
        }
        if self.steps == 0 {
            return Err(MagtError::Config("steps must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(MagtError::Config(format!("eta must lie in [0, 1], got {}", self.eta)));
        }
        if self.bank_size == 0 {
            return Err(MagtError::Config("bank size must be at least 1".into()));
        }
        Ok(())
    }

    /// Score evaluations per generated batch.
    pub fn nfe(&self) -> usize {
        match self.kind {
            SamplerKind::OneShot => 1,
            SamplerKind::MDdim => self.steps,
        }
    }

    /// `steps + 1` levels, uniform in `t`, from `t_high` down to `t_low`.
    pub fn level_grid(&self) -> Vec<f64> {
        (0..=self.steps)
            .map(|i| self.t_high + (self.t_low - self.t_high) * i as f64 / self.steps as f64)
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct SampleOutput<T> {
    pub samples: Array2<T>,
    pub nfe: usize,
}

/// `h(u_i)` for `n` prior draws.
pub fn sample_one_shot<T: Scalar>(
    transport: &(impl Transport<T> + ?Sized),
    prior: &LatentPrior,
    n: usize,
    seed: u64,
) -> Result<SampleOutput<T>> {
    let mut rng = stream_rng(seed, streams::SAMPLER);
    let latents: Array2<T> = prior.sample(&mut rng, n, transport.latent_dim());
    Ok(SampleOutput {
        samples: transport.apply(latents.view())?,
        nfe: 1,
    })
}

/// M-DDIM with a freshly drawn prior bank of `config.bank_size` anchors.
pub fn sample_m_ddim<T: Scalar>(
    transport: &(impl Transport<T> + ?Sized),
    prior: &LatentPrior,
    config: &SamplerConfig,
    n: usize,
    seed: u64,
) -> Result<SampleOutput<T>> {
    config.validate()?;
    let bank = build_bank_mc(transport, prior, config.bank_size, seed)?;
    m_ddim_with_bank(&bank, config, n, seed, |_, _| {})
}

/// M-DDIM on a fixed bank. `observe(step, state)` sees the initial state
/// (step 0) and the state after every transition.
pub fn m_ddim_with_bank<T: Scalar>(
    bank: &AnchorBank<T>,
    config: &SamplerConfig,
    n: usize,
    seed: u64,
    mut observe: impl FnMut(usize, &Array2<T>),
) -> Result<SampleOutput<T>> {
    if config.kind != SamplerKind::MDdim {
        return Err(MagtError::Config("m_ddim_with_bank needs an m_ddim config".into()));
    }
    config.validate()?;
    let dim = bank.ambient_dim();
    let mut rng = stream_rng(seed, streams::SAMPLER);
    let mut x = Array2::<T>::from_shape_simple_fn((n, dim), || {
        T::lit(StandardNormal.sample(&mut rng))
    });
    observe(0, &x);
    let grid = config.level_grid();
    let eta = T::lit(config.eta);
    for step in 0..config.steps {
        let here = NoiseLevel::vp(T::lit(grid[step]))?;
        let next = NoiseLevel::vp(T::lit(grid[step + 1]))?;
        let means = posterior_means(&here, bank, x.view())?;
        // posterior mean of the clean point is exactly the Tweedie prediction
        let x0 = means;
        let eps = (&x - &(&x0 * here.alpha)) / here.sigma;
        let sigma_tilde = ddim_noise_scale(&here, &next, eta);
        let direction = (next.sigma2() - sigma_tilde * sigma_tilde).max(T::zero()).sqrt();
        x = &x0 * next.alpha + &eps * direction;
        if sigma_tilde > T::zero() {
            for v in x.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v += sigma_tilde * T::lit(z);
            }
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(MagtError::Numerical(format!(
                "non-finite sampler state at step {}",
                step + 1
            )));
        }
        observe(step + 1, &x);
    }
    Ok(SampleOutput {
        samples: x,
        nfe: config.nfe(),
    })
}

/// `eta * sigma' * sqrt(1 - alpha^2 sigma'^2 / (alpha'^2 sigma^2))`, clipped
/// to `[0, sigma']`.
pub fn ddim_noise_scale<T: Scalar>(here: &NoiseLevel<T>, next: &NoiseLevel<T>, eta: T) -> T {
    let ratio = (here.alpha * here.alpha * next.sigma2())
        / (next.alpha * next.alpha * here.sigma2());
    let s = eta * next.sigma * (T::one() - ratio).max(T::zero()).sqrt();
    s.max(T::zero()).min(next.sigma)
}

/// Dispatch on `config.kind`.
pub fn sample<T: Scalar>(
    transport: &(impl Transport<T> + ?Sized),
    prior: &LatentPrior,
    config: &SamplerConfig,
    n: usize,
    seed: u64,
) -> Result<SampleOutput<T>> {
    match config.kind {
        SamplerKind::OneShot => sample_one_shot(transport, prior, n, seed),
        SamplerKind::MDdim => sample_m_ddim(transport, prior, config, n, seed),
    }
}
