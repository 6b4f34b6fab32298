//! Checks shared by the property tests and the acceptance target. Each
//! returns the measured quantity; callers decide the tolerance.
#![allow(dead_code)]

use std::f64::consts::PI;

use magt::anchor_score::{
    build_bank_from_proposal, build_bank_mc, build_bank_qmc, estimate_score, estimate_scores, AnchorBank,
    LaplaceProposal, ProposalKind,
};
use magt::density::{intrinsic_log_density, smoothed_ambient_log_density};
use magt::metrics::w2_exact;
use magt::prior::LatentPrior;
use magt::rng::stream_rng;
use magt::trainer::{batch_loss, center_gradients, parameter_gradient, two_phase_update, Optimizer, OptimizerKind, TrainConfig};
use magt::{FnTransport, NoiseLevel, TransportNet};
use ndarray::{array, Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;

pub fn gaussian(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut rng = stream_rng(seed, 100);
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

fn rel(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

// ---------------------------------------------------------------- gradients

fn atom_sum_loss(level: &NoiseLevel<f64>, outputs: &Array2<f64>, y0: &Array2<f64>, z: &Array2<f64>) -> f64 {
    let bank = AnchorBank::from_atoms(outputs.clone()).unwrap();
    let net = TransportNet::<f64>::init(&[1, 1], 0).unwrap();
    batch_loss(&net, level, &bank, y0.view(), z.view()).unwrap().loss * y0.nrows() as f64
}

/// Worst relative error of the closed-form center gradients against
/// central differences of the summed loss (B=3, K=5, D=3).
pub fn center_gradient_fd_error() -> f64 {
    let mut worst: f64 = 0.0;
    for (seed, t) in [(1, 0.3), (2, 0.7), (3, 0.1), (4, 0.5)] {
        let level = NoiseLevel::vp(t).unwrap();
        let outputs = gaussian(5, 3, seed) * 0.7;
        let y0 = gaussian(3, 3, seed + 10) * 0.7;
        let z = gaussian(3, 3, seed + 20);
        let bank = AnchorBank::from_atoms(outputs.clone()).unwrap();
        let g = center_gradients(&level, &bank, y0.view(), z.view()).unwrap();
        let eps = 1e-6;
        for k in 0..5 {
            for j in 0..3 {
                let mut up = outputs.clone();
                up[[k, j]] += eps;
                let mut dn = outputs.clone();
                dn[[k, j]] -= eps;
                let fd = (atom_sum_loss(&level, &up, &y0, &z) - atom_sum_loss(&level, &dn, &y0, &z)) / (2.0 * eps);
                worst = worst.max(rel(fd, g[[k, j]], 1e-3));
            }
        }
    }
    worst
}

pub fn mean_prior_loss(
    net: &TransportNet<f64>,
    level: &NoiseLevel<f64>,
    latents: &Array2<f64>,
    y0: &Array2<f64>,
    z: &Array2<f64>,
) -> f64 {
    let bank = AnchorBank::from_latents(net, &LatentPrior::StandardNormal, latents.clone(), ProposalKind::PriorMc).unwrap();
    batch_loss(net, level, &bank, y0.view(), z.view()).unwrap().loss
}

/// Worst relative error, over every parameter of a 2x8x8x2 net, between
/// the update applied by one SGD step of `two_phase_update` (divided by
/// the learning rate) and central differences of the mean batch loss.
pub fn two_phase_fd_error() -> f64 {
    let level = NoiseLevel::vp(0.3).unwrap();
    let net = TransportNet::<f64>::init(&[2, 8, 8, 2], 5).unwrap();
    let latents = gaussian(6, 2, 11);
    let y0 = gaussian(4, 2, 12) * 0.5;
    let z = gaussian(4, 2, 13);
    let lr = 1e-3;
    let mut config = TrainConfig::new(2);
    config.anchor_count = 6;
    config.chunk_size = 4;
    config.batch_size = 4;
    config.optimizer = OptimizerKind::Sgd;
    config.learning_rate = lr;
    let mut stepped = net.clone();
    let mut opt = Optimizer::new(OptimizerKind::Sgd, lr);
    two_phase_update(&mut stepped, &level, &config, &mut opt, latents.view(), y0.view(), z.view()).unwrap();

    let eps = 1e-6;
    let fd = |perturb: &dyn Fn(&mut TransportNet<f64>, f64)| {
        let mut up = net.clone();
        perturb(&mut up, eps);
        let mut dn = net.clone();
        perturb(&mut dn, -eps);
        (mean_prior_loss(&up, &level, &latents, &y0, &z) - mean_prior_loss(&dn, &level, &latents, &y0, &z)) / (2.0 * eps)
    };
    let mut worst: f64 = 0.0;
    for l in 0..net.weights.len() {
        let cols = net.weights[l].ncols();
        for idx in 0..net.weights[l].len() {
            let (r, c) = (idx / cols, idx % cols);
            let numeric = fd(&|n, e| n.parameters_mut().0[l][[r, c]] += e);
            let applied = (net.weights[l][[r, c]] - stepped.weights[l][[r, c]]) / lr;
            worst = worst.max((numeric - applied).abs() / numeric.abs().max(1e-2));
        }
        for i in 0..net.biases[l].len() {
            let numeric = fd(&|n, e| n.parameters_mut().1[l][i] += e);
            let applied = (net.biases[l][i] - stepped.biases[l][i]) / lr;
            worst = worst.max((numeric - applied).abs() / numeric.abs().max(1e-2));
        }
    }
    worst
}

/// Largest parameter-gradient difference between chunk sizes 1, 3, 7 and K.
pub fn chunk_invariance_error() -> f64 {
    let prior = LatentPrior::StandardNormal;
    let level = NoiseLevel::vp(0.5).unwrap();
    let net = TransportNet::<f64>::init(&[2, 16, 16, 3], 6).unwrap();
    let k = 23;
    let latents = gaussian(k, 2, 14);
    let y0 = gaussian(5, 3, 15);
    let z = gaussian(5, 3, 16);
    let grad = |chunk| {
        parameter_gradient(&net, &level, &prior, latents.view(), y0.view(), z.view(), chunk, ProposalKind::PriorMc)
            .unwrap()
            .0
    };
    let full = grad(k);
    [1, 3, 7].iter().map(|&c| grad(c).max_abs_diff(&full)).fold(0.0, f64::max)
}

// --------------------------------------------------------------- estimators

/// Gaussian-mixture score written out directly, for the finite-prior oracle.
pub fn mixture_score(level: &NoiseLevel<f64>, atoms: ArrayView2<f64>, y: ArrayView1<f64>) -> Array1<f64> {
    let s2 = level.sigma * level.sigma;
    let logits: Vec<f64> = atoms
        .rows()
        .into_iter()
        .map(|a| -(0..y.len()).map(|j| (y[j] - level.alpha * a[j]).powi(2)).sum::<f64>() / (2.0 * s2))
        .collect();
    let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
    let total: f64 = w.iter().sum();
    let mut grad = Array1::zeros(y.len());
    for (wk, a) in w.iter().zip(atoms.rows()) {
        for j in 0..y.len() {
            grad[j] += wk / total * (level.alpha * a[j] - y[j]) / s2;
        }
    }
    grad
}

/// Largest deviation of `estimate_score` from the exact mixture score when
/// the prior is uniform over the bank's atoms.
pub fn finite_prior_score_error() -> f64 {
    let mut worst: f64 = 0.0;
    for (seed, t, k, dim) in [(1, 0.2, 7, 2), (2, 0.5, 30, 3), (3, 0.9, 3, 1), (4, 0.05, 12, 2)] {
        let level = NoiseLevel::vp(t).unwrap();
        let atoms = gaussian(k, dim, seed);
        let bank = AnchorBank::from_atoms(atoms.clone()).unwrap();
        let queries = gaussian(50, dim, seed + 100) * 1.5;
        for y in queries.rows() {
            let got = estimate_score(&level, &bank, y).unwrap().score;
            let want = mixture_score(&level, atoms.view(), y);
            let scale = want.iter().fold(1.0f64, |m, v| m.max(v.abs()));
            worst = worst.max((&got - &want).iter().fold(0.0f64, |m, v| m.max(v.abs())) / scale);
        }
    }
    worst
}

/// Smooth one-dimensional curve in the plane used by the rate experiments.
pub fn toy_map(u: f64) -> [f64; 2] {
    [u, 0.5 * (2.0 * u).sin()]
}

pub fn toy_transport<'a>() -> FnTransport<'a, f64> {
    FnTransport::new(1, 2, |u: ArrayView1<f64>| {
        let p = toy_map(u[0]);
        array![p[0], p[1]]
    })
}

pub const TOY_T: f64 = 0.3;

/// Test points drawn from the smoothed toy distribution.
pub fn toy_queries(n: usize, seed: u64) -> Array2<f64> {
    let level = NoiseLevel::vp(TOY_T).unwrap();
    let mut rng = stream_rng(seed, 200);
    let mut out = Array2::zeros((n, 2));
    for i in 0..n {
        let u: f64 = rng.sample(StandardNormal);
        let p = toy_map(u);
        for j in 0..2 {
            let z: f64 = rng.sample(StandardNormal);
            out[[i, j]] = level.alpha * p[j] + level.sigma * z;
        }
    }
    out
}

/// Reference score from a large prior bank.
pub fn toy_reference_mc(queries: ArrayView2<f64>, k: usize) -> Array2<f64> {
    let level = NoiseLevel::vp(TOY_T).unwrap();
    let bank = build_bank_mc(&toy_transport(), &LatentPrior::StandardNormal, k, 987_654).unwrap();
    let mut out = Array2::zeros(queries.dim());
    for (i, y) in queries.rows().into_iter().enumerate() {
        out.row_mut(i).assign(&estimate_score(&level, &bank, y).unwrap().score);
    }
    out
}

/// Reference score by trapezoidal quadrature over the latent line.
pub fn toy_reference_quadrature(queries: ArrayView2<f64>) -> Array2<f64> {
    let level = NoiseLevel::vp(TOY_T).unwrap();
    let s2 = level.sigma * level.sigma;
    let nodes = 40_001;
    let (lo, hi) = (-10.0, 10.0);
    let du = (hi - lo) / (nodes - 1) as f64;
    let mut out = Array2::zeros(queries.dim());
    for (i, y) in queries.rows().into_iter().enumerate() {
        let mut logs = Vec::with_capacity(nodes);
        let mut pts = Vec::with_capacity(nodes);
        for n in 0..nodes {
            let u = lo + n as f64 * du;
            let p = toy_map(u);
            let r2 = (y[0] - level.alpha * p[0]).powi(2) + (y[1] - level.alpha * p[1]).powi(2);
            logs.push(-0.5 * u * u - r2 / (2.0 * s2));
            pts.push(p);
        }
        let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let (mut total, mut m0, mut m1) = (0.0, 0.0, 0.0);
        for (n, (l, p)) in logs.iter().zip(&pts).enumerate() {
            let edge = if n == 0 || n == nodes - 1 { 0.5 } else { 1.0 };
            let w = edge * (l - top).exp();
            total += w;
            m0 += w * p[0];
            m1 += w * p[1];
        }
        out[[i, 0]] = (level.alpha * m0 / total - y[0]) / s2;
        out[[i, 1]] = (level.alpha * m1 / total - y[1]) / s2;
    }
    out
}

fn mean_sq_error(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    (a - b).mapv(|v| v * v).sum() / a.nrows() as f64
}

/// `(K, MSE)` of the prior-MC score estimate against `reference`, averaged
/// over `repeats` independent banks.
pub fn toy_mc_mse_curve(queries: ArrayView2<f64>, reference: &Array2<f64>, ks: &[usize], repeats: u64) -> Vec<(usize, f64)> {
    let level = NoiseLevel::vp(TOY_T).unwrap();
    let transport = toy_transport();
    ks.iter()
        .map(|&k| {
            let mse = (0..repeats)
                .map(|r| {
                    let bank = build_bank_mc(&transport, &LatentPrior::StandardNormal, k, 1000 + r).unwrap();
                    mean_sq_error(&estimate_scores(&level, &bank, queries).unwrap(), reference)
                })
                .sum::<f64>()
                / repeats as f64;
            (k, mse)
        })
        .collect()
}

/// Least-squares slope of log MSE against log K.
pub fn log_log_slope(curve: &[(usize, f64)]) -> f64 {
    let xs: Vec<f64> = curve.iter().map(|(k, _)| (*k as f64).ln()).collect();
    let ys: Vec<f64> = curve.iter().map(|(_, m)| m.ln()).collect();
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

/// The MC rate experiment: slope over K = 2^6..2^13 against a 10^6-anchor
/// reference, with the curve for reporting.
pub fn mc_rate_slope() -> (f64, Vec<(usize, f64)>) {
    let queries = toy_queries(200, 1);
    let reference = toy_reference_mc(queries.view(), 1_000_000);
    let ks: Vec<usize> = (6..=13).map(|e| 1usize << e).collect();
    let curve = toy_mc_mse_curve(queries.view(), &reference, &ks, 40);
    (log_log_slope(&curve), curve)
}

/// Number of scramble seeds (out of 20) for which scrambled-Sobol' anchors
/// give a lower score MSE than i.i.d. anchors at K=1024.
pub fn qmc_wins() -> usize {
    let level = NoiseLevel::vp(TOY_T).unwrap();
    let queries = toy_queries(200, 2);
    let reference = toy_reference_quadrature(queries.view());
    let transport = toy_transport();
    let prior = LatentPrior::StandardNormal;
    (0..20u64)
        .filter(|&s| {
            let mc = build_bank_mc(&transport, &prior, 1024, 50 + s).unwrap();
            let qmc = build_bank_qmc(&transport, &prior, 1024, Some(50 + s)).unwrap();
            let e_mc = mean_sq_error(&estimate_scores(&level, &mc, queries.view()).unwrap(), &reference);
            let e_qmc = mean_sq_error(&estimate_scores(&level, &qmc, queries.view()).unwrap(), &reference);
            e_qmc < e_mc
        })
        .count()
}

/// `D_2(p || q) = E_q[(p/q)^2]` for one-dimensional Gaussians
/// `p = N(m1, s1^2)`, `q = N(m2, s2^2)`; infinite when `2 s2^2 <= s1^2`.
pub fn gaussian_d2(m1: f64, s1: f64, m2: f64, s2: f64) -> f64 {
    let a = 2.0 / (s1 * s1) - 1.0 / (s2 * s2);
    if a <= 0.0 {
        return f64::INFINITY;
    }
    let b = 2.0 * m1 / (s1 * s1) - m2 / (s2 * s2);
    let c = 2.0 * m1 * m1 / (s1 * s1) - m2 * m2 / (s2 * s2);
    let pre = s2 * (2.0 * PI).sqrt() / (2.0 * PI * s1 * s1);
    pre * (2.0 * PI / a).sqrt() * (0.5 * (b * b / a - c)).exp()
}

pub struct SnisCase {
    pub label: &'static str,
    pub k: usize,
    pub mse: f64,
    pub bound: f64,
    pub d2: f64,
}

/// Conjugate linear-Gaussian case `h(u) = v u`, `u ~ N(0,1)`: measured score
/// MSE of SNIS for three proposals against `32 alpha^2 B^2 D_2 / (K sigma^4)`.
/// `B` should be `sup ||h||`, which is infinite here; the largest `||h(u)||`
/// over every anchor drawn stands in for it.
pub fn snis_bound_cases() -> Vec<SnisCase> {
    let t = 0.3;
    let level = NoiseLevel::vp(t).unwrap();
    let (alpha, s2) = (level.alpha, level.sigma * level.sigma);
    let v = [1.5, 0.5];
    let vv = v[0] * v[0] + v[1] * v[1];
    let transport = FnTransport::new(1, 2, move |u: ArrayView1<f64>| array![v[0] * u[0], v[1] * u[0]]);
    let prior = LatentPrior::StandardNormal;
    let y = array![1.2, -0.3];
    // posterior N(mu, s^2) of u given y
    let post_prec = 1.0 + alpha * alpha * vv / s2;
    let post_sd = post_prec.recip().sqrt();
    let post_mean = alpha * (v[0] * y[0] + v[1] * y[1]) / s2 / post_prec;
    // exact score: -(alpha^2 v v^T + s2 I)^{-1} y
    let cov = [
        [alpha * alpha * v[0] * v[0] + s2, alpha * alpha * v[0] * v[1]],
        [alpha * alpha * v[0] * v[1], alpha * alpha * v[1] * v[1] + s2],
    ];
    let det = cov[0][0] * cov[1][1] - cov[0][1] * cov[1][0];
    let exact = array![
        -(cov[1][1] * y[0] - cov[0][1] * y[1]) / det,
        -(-cov[1][0] * y[0] + cov[0][0] * y[1]) / det
    ];
    let proposals: [(&'static str, Option<(f64, f64)>); 3] = [
        ("prior", None),
        ("posterior", Some((post_mean, post_sd))),
        ("shifted-wide", Some((post_mean + 0.5 * post_sd, 1.6 * post_sd))),
    ];
    let repeats = 3000u64;
    let mut cases = Vec::new();
    for (label, q) in proposals {
        let (qm, qs) = q.unwrap_or((0.0, 1.0));
        let d2 = gaussian_d2(post_mean, post_sd, qm, qs);
        for k in [16usize, 64, 256] {
            let mut sq = 0.0;
            let mut b_max: f64 = 0.0;
            for r in 0..repeats {
                let bank = match q {
                    None => build_bank_mc(&transport, &prior, k, 10_000 + r).unwrap(),
                    Some((m, s)) => {
                        let proposal = LaplaceProposal::new(array![m], array![[1.0 / (s * s)]], 1.0, 0.0).unwrap();
                        build_bank_from_proposal(&transport, &prior, &proposal, k, 10_000 + r).unwrap()
                    }
                };
                b_max = bank.outputs.rows().into_iter().fold(b_max, |b, h| b.max(h.dot(&h).sqrt()));
                let est = estimate_score(&level, &bank, y.view()).unwrap().score;
                sq += (&est - &exact).mapv(|e| e * e).sum();
            }
            let mse = sq / repeats as f64;
            let bound = 32.0 * alpha * alpha * b_max * b_max / (k as f64 * s2 * s2) * d2;
            cases.push(SnisCase { label, k, mse, bound, d2 });
        }
    }
    cases
}

// ------------------------------------------------------------------ density

/// Worst error between central differences of the smoothed log-density and
/// the score estimate, at 20 random queries on a random-net bank.
pub fn smoothed_density_gradient_error() -> f64 {
    let net = TransportNet::<f64>::init(&[2, 16, 16, 3], 21).unwrap();
    let prior = LatentPrior::StandardNormal;
    let mut worst: f64 = 0.0;
    for (i, t) in [0.2, 0.5, 0.8].into_iter().enumerate() {
        let level = NoiseLevel::vp(t).unwrap();
        let bank = build_bank_mc(&net, &prior, 256, 40 + i as u64).unwrap();
        let queries = gaussian(20, 3, 60 + i as u64);
        for y in queries.rows() {
            let score = estimate_score(&level, &bank, y).unwrap().score;
            let eps = 1e-5;
            for j in 0..3 {
                let mut up = y.to_owned();
                up[j] += eps;
                let mut dn = y.to_owned();
                dn[j] -= eps;
                let fd = (smoothed_ambient_log_density(&level, &bank, up.view()).unwrap()
                    - smoothed_ambient_log_density(&level, &bank, dn.view()).unwrap())
                    / (2.0 * eps);
                worst = worst.max((fd - score[j]).abs() / score[j].abs().max(1.0));
            }
        }
    }
    worst
}

/// Worst deviation of the circle-chart intrinsic density from 1/(2 pi R)
/// over 10 angles.
pub fn circle_chart_density_error(radius: f64) -> f64 {
    let chart = FnTransport::new(1, 2, move |u: ArrayView1<f64>| array![radius * u[0].cos(), radius * u[0].sin()])
        .with_jacobian(move |u: ArrayView1<f64>| array![[-radius * u[0].sin()], [radius * u[0].cos()]]);
    let prior = LatentPrior::Uniform { low: 0.0, high: 2.0 * PI };
    let want = 1.0 / (2.0 * PI * radius);
    (0..10)
        .map(|i| {
            let theta = 2.0 * PI * (i as f64 + 0.37) / 10.0;
            let logp = intrinsic_log_density(&chart, &prior, array![theta].view()).unwrap();
            (logp.exp() - want).abs()
        })
        .fold(0.0, f64::max)
}

// ------------------------------------------------------------------ metrics

pub fn permutation_search_w2(a: ArrayView2<f64>, b: ArrayView2<f64>) -> f64 {
    let n = a.nrows();
    let cost = |i: usize, j: usize| (0..a.ncols()).map(|c| (a[[i, c]] - b[[j, c]]).powi(2)).sum::<f64>();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = f64::INFINITY;
    // Heap's algorithm
    let mut counters = vec![0usize; n];
    let total = |p: &[usize]| p.iter().enumerate().map(|(i, &j)| cost(i, j)).sum::<f64>();
    best = best.min(total(&perm));
    let mut i = 0;
    while i < n {
        if counters[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(counters[i], i);
            }
            best = best.min(total(&perm));
            counters[i] += 1;
            i = 0;
        } else {
            counters[i] = 0;
            i += 1;
        }
    }
    (best / n as f64).sqrt()
}

/// Worst gap between the assignment solver and exhaustive search on
/// 8-point instances.
pub fn w2_brute_force_gap(instances: u64) -> f64 {
    (0..instances)
        .map(|s| {
            let a = gaussian(8, 2, 300 + s);
            let b = gaussian(8, 2, 400 + s) + 0.5;
            (w2_exact(a.view(), b.view()).unwrap() - permutation_search_w2(a.view(), b.view())).abs()
        })
        .fold(0.0, f64::max)
}

/// Subsampled W2 between N(0, I_2) and N((1,0), I_2) samples; analytic 1.
pub fn gaussian_shift_w2() -> f64 {
    let a = gaussian(4000, 2, 501);
    let mut b = gaussian(4000, 2, 502);
    b.column_mut(0).mapv_inplace(|x| x + 1.0);
    magt::metrics::w2_subsampled(a.view(), b.view(), 2000, 3, 7).unwrap().mean
}
