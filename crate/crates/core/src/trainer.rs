//! Single-level denoising score matching with the two-phase exact-gradient
//! update, the epoch loop, and selection of the smoothing level.
//!
//! Phase 1 evaluates the anchors without a tape and computes the loss
//! gradient with respect to every anchor output in closed form. Phase 2
//! back-propagates those frozen output gradients through the network, chunk
//! by chunk, and sums the parameter gradients.

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};

use crate::anchor_score::{
    fit_laplace_proposal, qmc_latents, soft_assign, AnchorBank, LaplaceOptions, ProposalKind,
};
use crate::error::{MagtError, Result};
use crate::metrics::w2_subsampled;
use crate::net::{ForwardTape, ParameterGradient, TransportNet};
use crate::prior::LatentPrior;
use crate::rng::{stream_rng, streams, substream, StreamRng};
use crate::samplers::sample_one_shot;
use crate::scalar::Scalar;
use crate::schedule::NoiseLevel;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl OptimizerKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OptimizerKind {
    type Err = MagtError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(MagtError::Config(format!("unknown optimizer {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub t_candidates: Vec<f64>,
    pub latent_dim: usize,
    pub hidden: Vec<usize>,
    pub anchor_count: usize,
    pub batch_size: usize,
    pub chunk_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub max_epochs: usize,
    /// Minibatches per epoch; `None` means one pass over the training set.
    pub steps_per_epoch: Option<usize>,
    pub seed: u64,
    pub proposal: ProposalKind,
    pub prior: LatentPrior,
    pub laplace: LaplaceOptions,
    /// Generated points scored against the validation set.
    pub val_samples: usize,
    pub val_subsample: usize,
    pub val_repeats: usize,
    /// Validation metric every this many epochs; the last epoch is always
    /// scored.
    pub val_every: usize,
    /// Train on centered data divided by one isotropic scale, then fold the
    /// inverse map into the output layer.
    pub normalize: bool,
}

impl TrainConfig {
    pub fn new(latent_dim: usize) -> Self {
        TrainConfig {
            t_candidates: (1..=9).map(|i| i as f64 / 10.0).collect(),
            latent_dim,
            hidden: vec![512; 5],
            anchor_count: 1024,
            batch_size: 256,
            chunk_size: 1024,
            learning_rate: 1e-4,
            optimizer: OptimizerKind::Adam,
            max_epochs: 200,
            steps_per_epoch: None,
            seed: 0,
            proposal: ProposalKind::PriorMc,
            prior: LatentPrior::StandardNormal,
            laplace: LaplaceOptions::default(),
            val_samples: 5000,
            val_subsample: 2000,
            val_repeats: 5,
            val_every: usize::MAX,
            normalize: true,
        }
    }

    pub fn layer_dims(&self, ambient_dim: usize) -> Vec<usize> {
        let mut dims = vec![self.latent_dim];
        dims.extend(&self.hidden);
        dims.push(ambient_dim);
        dims
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(MagtError::Config(m));
        if self.t_candidates.is_empty() {
            return fail("no smoothing levels to try".into());
        }
        if let Some(t) = self.t_candidates.iter().find(|t| !(**t > 0.0 && **t < 1.0)) {
            return fail(format!("smoothing level {t} outside (0, 1)"));
        }
        if self.latent_dim == 0 {
            return fail("latent dimension must be at least 1".into());
        }
        if self.anchor_count == 0 {
            return fail("anchor count must be at least 1".into());
        }
        if self.chunk_size == 0 || self.chunk_size > self.anchor_count {
            return fail(format!(
                "chunk size must lie in [1, K={}], got {}",
                self.anchor_count, self.chunk_size
            ));
        }
        if self.batch_size == 0 {
            return fail("batch size must be at least 1".into());
        }
        if !(self.learning_rate > 0.0) {
            return fail("learning rate must be positive".into());
        }
        if self.max_epochs == 0 {
            return fail("max_epochs must be at least 1".into());
        }
        if self.steps_per_epoch == Some(0) {
            return fail("steps_per_epoch must be at least 1".into());
        }
        if self.val_samples == 0 || self.val_subsample == 0 || self.val_repeats == 0 {
            return fail("validation sizes must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchLossReport {
    /// Mean of the per-item losses.
    pub loss: f64,
    pub mean_ess: f64,
    pub min_ess: f64,
    /// Norm of the parameter gradient of the mean loss; zero when no
    /// gradient was taken.
    pub grad_norm: f64,
}

/// Noisy queries `alpha y0 + sigma z` and the targets `-z / sigma`.
fn queries_and_targets<T: Scalar>(
    level: &NoiseLevel<T>,
    batch_y0: ArrayView2<T>,
    batch_noise: ArrayView2<T>,
) -> Result<(Array2<T>, Array2<T>)> {
    let y = level.corrupt_batch(batch_y0, batch_noise)?;
    let target = batch_noise.mapv(|z| -z / level.sigma);
    Ok((y, target))
}

fn check_batch<T: Scalar>(bank: &AnchorBank<T>, y0: &ArrayView2<T>, noise: &ArrayView2<T>) -> Result<()> {
    if y0.dim() != noise.dim() {
        return Err(MagtError::Dimension {
            what: "noise rows",
            expected: y0.nrows(),
            got: noise.nrows(),
        });
    }
    if y0.ncols() != bank.ambient_dim() {
        return Err(MagtError::Dimension {
            what: "batch dimension",
            expected: bank.ambient_dim(),
            got: y0.ncols(),
        });
    }
    if y0.nrows() == 0 {
        return Err(MagtError::Config("empty batch".into()));
    }
    Ok(())
}

/// Loss `0.5 |s_hat - T|^2` averaged over the batch, for a bank that must be
/// current for `net`.
pub fn batch_loss<T: Scalar>(
    net: &TransportNet<T>,
    level: &NoiseLevel<T>,
    bank: &AnchorBank<T>,
    batch_y0: ArrayView2<T>,
    batch_noise: ArrayView2<T>,
) -> Result<BatchLossReport> {
    bank.ensure_fresh(net)?;
    let (_, report) = center_gradients_with_report(level, bank, batch_y0, batch_noise)?;
    Ok(report)
}

/// `d(sum_b loss_b) / d h(u_k)` for every anchor, `K x D`.
pub fn center_gradients<T: Scalar>(
    level: &NoiseLevel<T>,
    bank: &AnchorBank<T>,
    batch_y0: ArrayView2<T>,
    batch_noise: ArrayView2<T>,
) -> Result<Array2<T>> {
    Ok(center_gradients_with_report(level, bank, batch_y0, batch_noise)?.0)
}

fn center_gradients_with_report<T: Scalar>(
    level: &NoiseLevel<T>,
    bank: &AnchorBank<T>,
    batch_y0: ArrayView2<T>,
    batch_noise: ArrayView2<T>,
) -> Result<(Array2<T>, BatchLossReport)> {
    check_batch(bank, &batch_y0, &batch_noise)?;
    let (y, target) = queries_and_targets(level, batch_y0, batch_noise)?;
    let assign = soft_assign(level, bank, y.view())?;
    let score = assign.scores(level, y.view());
    let resid = &score - &target;
    let b = y.nrows();
    let loss = resid.iter().fold(T::zero(), |a, &r| a + r * r) * T::lit(0.5);
    let loss = loss.as_f64() / b as f64;
    if !loss.is_finite() {
        return Err(MagtError::Numerical(format!("non-finite batch loss at t={}", level.t)));
    }

    let inv_s2 = T::one() / level.sigma2();
    let a_s2 = level.alpha * inv_s2;
    // c_b = (alpha / sigma^2)(s_hat_b - T_b)
    let c = &resid * a_s2;
    // Delta_bk = <y~_k - m_b, c_b>
    let mc: Array1<T> = (&assign.means * &c).sum_axis(Axis(1));
    let mut delta = c.dot(&bank.outputs.t());
    for (mut row, &v) in delta.rows_mut().into_iter().zip(mc.iter()) {
        row -= v;
    }
    let wd = &assign.weights * &delta;
    let mut g = assign.weights.t().dot(&c);
    g += &(wd.t().dot(&y) * a_s2);
    let col = wd.sum_axis(Axis(0));
    let a2_s2 = level.alpha * a_s2;
    for ((mut gk, yk), &s) in g.rows_mut().into_iter().zip(bank.outputs.rows()).zip(col.iter()) {
        gk.scaled_add(-a2_s2 * s, &yk);
    }

    let ess: Vec<f64> = assign.ess.iter().map(|e| e.as_f64()).collect();
    let report = BatchLossReport {
        loss,
        mean_ess: ess.iter().sum::<f64>() / b as f64,
        min_ess: ess.iter().copied().fold(f64::INFINITY, f64::min),
        grad_norm: 0.0,
    };
    Ok((g, report))
}

/// Latent anchors for one minibatch, drawn from the prior (i.i.d. or
/// scrambled Sobol').
fn draw_anchor_latents<T: Scalar>(
    config: &TrainConfig,
    rng: &mut StreamRng,
    step: u64,
) -> Result<Array2<T>> {
    match config.proposal {
        ProposalKind::PriorQmc => qmc_latents(
            &config.prior,
            config.anchor_count,
            config.latent_dim,
            Some(substream(config.seed, step)),
        ),
        _ => Ok(config.prior.sample(rng, config.anchor_count, config.latent_dim)),
    }
}

/// Gradient of the mean batch loss with respect to every parameter, by the
/// two-phase scheme, for a shared prior bank built from `latents`.
pub fn parameter_gradient<T: Scalar>(
    net: &TransportNet<T>,
    level: &NoiseLevel<T>,
    prior: &LatentPrior,
    latents: ArrayView2<T>,
    batch_y0: ArrayView2<T>,
    batch_noise: ArrayView2<T>,
    chunk_size: usize,
    proposal: ProposalKind,
) -> Result<(ParameterGradient<T>, BatchLossReport)> {
    let k = latents.nrows();
    if chunk_size == 0 || chunk_size > k {
        return Err(MagtError::Config(format!(
            "chunk size must lie in [1, {k}], got {chunk_size}"
        )));
    }
    // with a single chunk the phase-1 forward doubles as the phase-2 tape
    let (outputs, tape): (Array2<T>, Option<ForwardTape<T>>) = if chunk_size >= k {
        let (o, tape) = net.forward(latents)?;
        (o, Some(tape))
    } else {
        (net.apply(latents)?, None)
    };
    let bank = AnchorBank::from_outputs(net, prior, latents.to_owned(), outputs, proposal)?;
    let (mut g, mut report) = center_gradients_with_report(level, &bank, batch_y0, batch_noise)?;
    g /= T::lit(batch_y0.nrows() as f64);

    let mut grad = ParameterGradient::zeros_like(net);
    match tape {
        Some(tape) => net.backward_params_into(&tape, g.view(), &mut grad)?,
        None => {
            for start in (0..k).step_by(chunk_size) {
                let end = (start + chunk_size).min(k);
                let (_, tape) = net.forward(latents.slice(s![start..end, ..]))?;
                net.backward_params_into(&tape, g.slice(s![start..end, ..]), &mut grad)?;
            }
        }
    }
    report.grad_norm = grad.norm().as_f64();
    Ok((grad, report))
}

/// Like [`parameter_gradient`] with one MAP–Laplace bank per batch item.
pub fn parameter_gradient_map<T: Scalar>(
    net: &TransportNet<T>,
    level: &NoiseLevel<T>,
    prior: &LatentPrior,
    batch_y0: ArrayView2<T>,
    batch_noise: ArrayView2<T>,
    anchors: usize,
    chunk_size: usize,
    opts: &LaplaceOptions,
    rng: &mut StreamRng,
) -> Result<(ParameterGradient<T>, BatchLossReport)> {
    let (y, _) = queries_and_targets(level, batch_y0, batch_noise)?;
    let b = y.nrows();
    let mut grad = ParameterGradient::zeros_like(net);
    let (mut loss, mut ess_sum, mut ess_min) = (0.0, 0.0, f64::INFINITY);
    for i in 0..b {
        let mut item_opts = *opts;
        item_opts.seed = substream(opts.seed, i as u64);
        let proposal = fit_laplace_proposal(net, prior, level, y.row(i), &item_opts)?;
        let (latents, logq) = proposal.sample(rng, anchors);
        let outputs = net.apply(latents.view())?;
        let mut bank =
            AnchorBank::from_outputs(net, prior, latents.clone(), outputs, ProposalKind::MapLaplace)?;
        bank.proposal_log_density = Some(logq);
        let rows = s![i..i + 1, ..];
        let (mut g, report) =
            center_gradients_with_report(level, &bank, batch_y0.slice(rows), batch_noise.slice(rows))?;
        g /= T::lit(b as f64);
        for start in (0..anchors).step_by(chunk_size.min(anchors)) {
            let end = (start + chunk_size).min(anchors);
            let (_, tape) = net.forward(latents.slice(s![start..end, ..]))?;
            net.backward_params_into(&tape, g.slice(s![start..end, ..]), &mut grad)?;
        }
        loss += report.loss;
        ess_sum += report.mean_ess;
        ess_min = ess_min.min(report.min_ess);
    }
    let report = BatchLossReport {
        loss: loss / b as f64,
        mean_ess: ess_sum / b as f64,
        min_ess: ess_min,
        grad_norm: grad.norm().as_f64(),
    };
    Ok((grad, report))
}

/// First-order optimizer state.
#[derive(Debug, Clone)]
pub struct Optimizer<T> {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    steps: u64,
    m: Option<ParameterGradient<T>>,
    v: Option<ParameterGradient<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Self {
        Optimizer {
            kind,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 0,
            m: None,
            v: None,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update. A zero gradient leaves SGD parameters untouched;
    /// Adam may still move on stale moments.
    pub fn step(&mut self, net: &mut TransportNet<T>, grad: &ParameterGradient<T>) {
        self.steps += 1;
        let lr = T::lit(self.learning_rate);
        match self.kind {
            OptimizerKind::Sgd => {
                if grad.is_zero() {
                    return;
                }
                let mut update = grad.clone();
                scale(&mut update, lr);
                net.apply_update(&update);
            }
            OptimizerKind::Adam => {
                let m = self.m.get_or_insert_with(|| ParameterGradient::zeros_like(net));
                let v = self.v.get_or_insert_with(|| ParameterGradient::zeros_like(net));
                let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
                let c1 = T::one() / (T::one() - b1.powi(self.steps as i32));
                let c2 = T::one() / (T::one() - b2.powi(self.steps as i32));
                let eps = T::lit(self.eps);
                let mut update = ParameterGradient::zeros_like(net);
                let layers = grad.weights.len();
                for l in 0..layers {
                    adam_leaf(
                        grad.weights[l].as_slice().unwrap(),
                        m.weights[l].as_slice_mut().unwrap(),
                        v.weights[l].as_slice_mut().unwrap(),
                        update.weights[l].as_slice_mut().unwrap(),
                        [b1, b2, c1, c2, eps, lr],
                    );
                    adam_leaf(
                        grad.biases[l].as_slice().unwrap(),
                        m.biases[l].as_slice_mut().unwrap(),
                        v.biases[l].as_slice_mut().unwrap(),
                        update.biases[l].as_slice_mut().unwrap(),
                        [b1, b2, c1, c2, eps, lr],
                    );
                }
                net.apply_update(&update);
            }
        }
    }
}

fn adam_leaf<T: Scalar>(g: &[T], m: &mut [T], v: &mut [T], out: &mut [T], c: [T; 6]) {
    let [b1, b2, c1, c2, eps, lr] = c;
    let one = T::one();
    for (((&gi, mi), vi), oi) in g.iter().zip(m.iter_mut()).zip(v.iter_mut()).zip(out.iter_mut()) {
        *mi = b1 * *mi + (one - b1) * gi;
        *vi = b2 * *vi + (one - b2) * gi * gi;
        *oi = lr * (*mi * c1) / ((*vi * c2).sqrt() + eps);
    }
}

fn scale<T: Scalar>(g: &mut ParameterGradient<T>, c: T) {
    for w in &mut g.weights {
        *w *= c;
    }
    for b in &mut g.biases {
        *b *= c;
    }
}

/// One training step: fresh anchors, both phases, one optimizer step.
pub fn two_phase_update<T: Scalar>(
    net: &mut TransportNet<T>,
    level: &NoiseLevel<T>,
    config: &TrainConfig,
    optimizer: &mut Optimizer<T>,
    latents: ArrayView2<T>,
    batch_y0: ArrayView2<T>,
    batch_noise: ArrayView2<T>,
) -> Result<BatchLossReport> {
    let (grad, report) = parameter_gradient(
        net,
        level,
        &config.prior,
        latents,
        batch_y0,
        batch_noise,
        config.chunk_size,
        config.proposal,
    )?;
    optimizer.step(net, &grad);
    if !net.is_finite() {
        return Err(MagtError::Numerical(format!(
            "non-finite parameters after step {} at t={}",
            optimizer.steps(),
            level.t
        )));
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub t: f64,
    pub loss: f64,
    pub grad_norm: f64,
    pub mean_ess: f64,
    /// Validation W2 when it was computed for this epoch.
    pub val_metric: Option<f64>,
}

impl EpochRecord {
    pub const CSV_HEADER: &'static str = "epoch,t,loss,grad_norm,mean_ess,val_metric";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.16e},{:.16e},{:.16e},{}",
            self.epoch,
            self.t,
            self.loss,
            self.grad_norm,
            self.mean_ess,
            self.val_metric.map(|v| format!("{v:.16e}")).unwrap_or_default()
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainedLevel<T> {
    pub t: f64,
    pub net: TransportNet<T>,
    pub val_metric: f64,
    pub log: Vec<EpochRecord>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub levels: Vec<TrainedLevel<T>>,
    pub selected: usize,
}

impl<T> TrainOutcome<T> {
    pub fn selected_t(&self) -> f64 {
        self.levels[self.selected].t
    }

    pub fn selected_net(&self) -> &TransportNet<T> {
        &self.levels[self.selected].net
    }

    /// `(t, validation metric)` per candidate.
    pub fn metric_table(&self) -> Vec<(f64, f64)> {
        self.levels.iter().map(|l| (l.t, l.val_metric)).collect()
    }
}

/// Affine change of data coordinates used during training: the model sees
/// `(y - shift) / scale`.
#[derive(Debug, Clone, PartialEq)]
pub struct DataScaling {
    pub shift: Array1<f64>,
    pub scale: f64,
}

impl DataScaling {
    pub fn identity(dim: usize) -> Self {
        DataScaling {
            shift: Array1::zeros(dim),
            scale: 1.0,
        }
    }

    /// Column means and the root of the mean per-coordinate variance.
    pub fn fit(data: ArrayView2<f64>) -> Self {
        let n = data.nrows().max(1) as f64;
        let shift = data.sum_axis(Axis(0)) / n;
        let var = data
            .rows()
            .into_iter()
            .map(|r| (&r - &shift).mapv(|v| v * v).sum())
            .sum::<f64>()
            / (n * data.ncols().max(1) as f64);
        let scale = if var > 0.0 && var.is_finite() { var.sqrt() } else { 1.0 };
        DataScaling { shift, scale }
    }

    pub fn to_model(&self, data: ArrayView2<f64>) -> Array2<f64> {
        (&data - &self.shift) / self.scale
    }

    /// Makes a model-coordinate network produce data coordinates.
    pub fn fold_into<T: Scalar>(&self, net: &mut TransportNet<T>) -> Result<()> {
        net.append_output_affine(T::lit(self.scale), self.shift.mapv(T::lit).view())
    }
}

/// Validation W2 of `|val_samples|` one-shot samples against `val`.
pub fn validation_w2<T: Scalar>(
    net: &TransportNet<T>,
    val: ArrayView2<f64>,
    config: &TrainConfig,
) -> Result<f64> {
    let generated = sample_one_shot(net, &config.prior, config.val_samples, substream(config.seed, 1))?;
    let generated = generated.samples.mapv(|v| v.as_f64());
    let n = config.val_subsample.min(val.nrows()).min(generated.nrows());
    Ok(w2_subsampled(val, generated.view(), n, config.val_repeats, config.seed)?.mean)
}

/// Trains a fresh network at a single level `t`.
///
/// Every level sees the same initialization, minibatch order, corruption
/// noise and anchor draws, so levels differ only through `t`.
pub fn train_level<T: Scalar>(
    train: ArrayView2<f64>,
    val: ArrayView2<f64>,
    t: f64,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainedLevel<T>> {
    config.validate()?;
    if train.nrows() == 0 || val.nrows() == 0 {
        return Err(MagtError::Config("training and validation sets must be nonempty".into()));
    }
    let dim = train.ncols();
    let level = NoiseLevel::vp(T::lit(t))?;
    let mut net = TransportNet::<T>::init(&config.layer_dims(dim), config.seed)?;
    let mut optimizer = Optimizer::new(config.optimizer, config.learning_rate);
    let mut shuffle_rng = stream_rng(config.seed, streams::SHUFFLE);
    let mut noise_rng = stream_rng(config.seed, streams::TRAIN_NOISE);
    let mut anchor_rng = stream_rng(config.seed, streams::ANCHORS);
    let mut laplace_rng = stream_rng(config.seed, streams::LAPLACE);
    let scaling = if config.normalize {
        DataScaling::fit(train)
    } else {
        DataScaling::identity(dim)
    };
    let train_t: Array2<T> = scaling.to_model(train).mapv(T::lit);
    let n = train.nrows();
    let b = config.batch_size.min(n);
    let steps = config.steps_per_epoch.unwrap_or_else(|| n.div_ceil(b));
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;
    let mut log = Vec::with_capacity(config.max_epochs);
    let mut val_metric = f64::NAN;
    let mut step_index = 0u64;
    for epoch in 1..=config.max_epochs {
        let (mut loss, mut gnorm, mut ess) = (0.0, 0.0, 0.0);
        for _ in 0..steps {
            if cursor + b > n {
                order.shuffle(&mut shuffle_rng);
                cursor = 0;
            }
            let rows = &order[cursor..cursor + b];
            cursor += b;
            let y0 = train_t.select(Axis(0), rows);
            let noise = Array2::<T>::from_shape_simple_fn((b, dim), || {
                let z: f64 = StandardNormal.sample(&mut noise_rng);
                T::lit(z)
            });
            let report = match config.proposal {
                ProposalKind::MapLaplace => {
                    let mut opts = config.laplace;
                    opts.seed = substream(config.seed, step_index);
                    let (grad, report) = parameter_gradient_map(
                        &net,
                        &level,
                        &config.prior,
                        y0.view(),
                        noise.view(),
                        config.anchor_count,
                        config.chunk_size,
                        &opts,
                        &mut laplace_rng,
                    )?;
                    optimizer.step(&mut net, &grad);
                    if !net.is_finite() {
                        return Err(MagtError::Numerical(format!(
                            "non-finite parameters after step {} at t={t}",
                            optimizer.steps()
                        )));
                    }
                    report
                }
                _ => {
                    let latents = draw_anchor_latents(config, &mut anchor_rng, step_index)?;
                    two_phase_update(
                        &mut net,
                        &level,
                        config,
                        &mut optimizer,
                        latents.view(),
                        y0.view(),
                        noise.view(),
                    )?
                }
            };
            step_index += 1;
            loss += report.loss;
            gnorm += report.grad_norm;
            ess += report.mean_ess;
        }
        let scored = epoch == config.max_epochs || epoch % config.val_every.max(1) == 0;
        let metric = if scored {
            let mut folded = net.clone();
            scaling.fold_into(&mut folded)?;
            val_metric = validation_w2(&folded, val, config)?;
            Some(val_metric)
        } else {
            None
        };
        let record = EpochRecord {
            epoch,
            t,
            loss: loss / steps as f64,
            grad_norm: gnorm / steps as f64,
            mean_ess: ess / steps as f64,
            val_metric: metric,
        };
        on_epoch(&record);
        log.push(record);
    }
    scaling.fold_into(&mut net)?;
    Ok(TrainedLevel {
        t,
        net,
        val_metric,
        log,
    })
}

/// Trains one network per candidate level and keeps the one with the
/// smallest validation W2.
pub fn train_and_select<T: Scalar>(
    train: ArrayView2<f64>,
    val: ArrayView2<f64>,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    let mut levels = Vec::with_capacity(config.t_candidates.len());
    for &t in &config.t_candidates {
        levels.push(train_level(train, val, t, config, &mut on_epoch)?);
    }
    let selected = select_best(&levels.iter().map(|l| l.val_metric).collect::<Vec<_>>())?;
    Ok(TrainOutcome { levels, selected })
}

/// Index of the smallest finite metric; ties go to the earlier candidate.
pub fn select_best(metrics: &[f64]) -> Result<usize> {
    metrics
        .iter()
        .enumerate()
        .filter(|(_, m)| m.is_finite())
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .ok_or_else(|| MagtError::Numerical("no candidate produced a finite validation metric".into()))
}
