use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ndarray::{concatenate, Array2, Axis};

use magt::anchor_score::build_bank_mc;
use magt::density::{intrinsic_log_density, smoothed_ambient_log_density};
use magt::experiment::{
    append_csv, append_epoch_log, checkpoint_bytes, checkpoint_name, evaluate, fnv1a64, generate_splits,
    read_points_csv, score_samples, train_experiment, write_once, write_points, write_points_csv, EvalRow, ExperimentConfig,
    SweepRow,
};
use magt::manifolds::ManifoldName;
use magt::metrics::timing_harness;
use magt::rng::{stream_rng, streams, substream};
use magt::samplers::{sample, SamplerKind};
use magt::{LatentPrior, MagtError, NoiseLevel, Result, TransportNet};

#[derive(Parser)]
#[command(name = "magt", version, about = "Train, sample and evaluate manifold-aligned transport models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write train/val/test CSVs for a dataset.
    GenData(Common),
    /// Train one model per t candidate and record the selected level.
    Train(Common),
    /// Draw samples from a trained model.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "one_shot")]
        sampler: SamplerKind,
        /// Number of samples (defaults to n_generate).
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        output: PathBuf,
        /// Use this checkpoint instead of the selected one.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Score samplers (or a points file) against the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Score this points CSV instead of sampling from the model.
        #[arg(long)]
        samples: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Intrinsic and smoothed log-densities at prior draws.
    Density {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Cartesian sweep over training-set size, anchor count and t.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        n_values: Vec<usize>,
        #[arg(long = "k-values", value_delimiter = ',')]
        k_values: Vec<usize>,
        #[arg(long, value_delimiter = ',')]
        t_values: Vec<f64>,
        /// `i/m`: run only cells whose index is i modulo m.
        #[arg(long, default_value = "0/1")]
        shard: String,
    },
    /// Wall-clock and NFE of every configured sampler.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Time a freshly initialised network instead of a trained one.
        #[arg(long)]
        untrained: bool,
    },
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<ManifoldName>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Train at this single level instead of the candidate grid.
    #[arg(long)]
    t: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Any config key, e.g. `--set anchor_count=64`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl Common {
    /// File, then `MAGT_SEED`, then flags.
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut config = match (&self.config, self.dataset) {
            (Some(path), _) => ExperimentConfig::load(path)?,
            (None, Some(name)) => ExperimentConfig::new(name),
            (None, None) => return Err(MagtError::Config("give --config or --dataset".into())),
        };
        config.apply_env()?;
        if let Some(name) = self.dataset {
            config.set("dataset", name.as_str())?;
        }
        if let Some(seed) = self.seed {
            config.set("seed", &seed.to_string())?;
        }
        if let Some(out) = &self.out {
            config.out_dir = out.clone();
        }
        if let Some(t) = self.t {
            config.train.t_candidates = vec![t];
        }
        if let Some(epochs) = self.epochs {
            config.train.max_epochs = epochs;
        }
        for pair in &self.sets {
            let (key, value) = pair
                .split_once('=')
                .ok_or_else(|| MagtError::Config(format!("--set expects KEY=VALUE, got {pair:?}")))?;
            config.set(key.trim(), value)?;
        }
        config.validate()?;
        Ok(config)
    }
}

/// Data files depend only on the dataset, split sizes and seed.
fn data_dir(config: &ExperimentConfig) -> PathBuf {
    let keys = ["dataset", "jitter", "n_train", "n_val", "n_test", "seed"];
    let text: String = keys
        .iter()
        .map(|k| format!("{k} = {}\n", config.get(k).unwrap_or_default()))
        .collect();
    config
        .out_dir
        .join(format!("data-{}-{:016x}", config.dataset, fnv1a64(text.as_bytes())))
}

fn load_split(config: &ExperimentConfig, split: &str) -> Result<Array2<f64>> {
    let path = data_dir(config).join(format!("{split}.csv"));
    if !path.exists() {
        return Err(MagtError::Config(format!(
            "{} not found; run gen-data with the same dataset, split sizes and seed",
            path.display()
        )));
    }
    read_points_csv(path)
}

fn points_bytes(points: &Array2<f64>) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    write_points(&mut bytes, points.view())?;
    Ok(bytes)
}

fn cmd_gen_data(config: &ExperimentConfig) -> Result<()> {
    let splits = generate_splits(config)?;
    let dir = data_dir(config);
    for (name, points) in [("train", &splits.train), ("val", &splits.val), ("test", &splits.test)] {
        let path = dir.join(format!("{name}.csv"));
        write_once(&path, &points_bytes(points)?)?;
        println!("{}", path.display());
    }
    Ok(())
}

struct Selection {
    t: f64,
    checkpoint: PathBuf,
}

fn write_selection(config: &ExperimentConfig, outcome: &magt::trainer::TrainOutcome<f64>) -> Result<()> {
    let dir = config.run_dir();
    let mut text = format!(
        "selected_t = {}\ncheckpoint = {}\n",
        outcome.selected_t(),
        checkpoint_name(outcome.selected_t())
    );
    for (t, metric) in outcome.metric_table() {
        text.push_str(&format!("val_w2_t{t} = {metric}\n"));
    }
    write_once(dir.join("selected.txt"), text.as_bytes())
}

fn read_selection(config: &ExperimentConfig) -> Result<Selection> {
    let dir = config.run_dir();
    let path = dir.join("selected.txt");
    let text = fs::read_to_string(&path).map_err(|_| {
        MagtError::Config(format!("{} not found; run train with the same config first", path.display()))
    })?;
    let mut t = None;
    let mut checkpoint = None;
    for line in text.lines() {
        if let Some((k, v)) = line.split_once('=') {
            match k.trim() {
                "selected_t" => t = v.trim().parse().ok(),
                "checkpoint" => checkpoint = Some(dir.join(v.trim())),
                _ => {}
            }
        }
    }
    match (t, checkpoint) {
        (Some(t), Some(checkpoint)) => Ok(Selection { t, checkpoint }),
        _ => Err(MagtError::Parse(format!("{}: malformed selection record", path.display()))),
    }
}

/// The model to use: an explicit checkpoint (t taken from the config's
/// first candidate) or the one recorded by `train`.
fn load_model(config: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<(f64, TransportNet<f64>)> {
    match checkpoint {
        Some(path) => Ok((config.train.t_candidates[0], TransportNet::load(path)?)),
        None => {
            let sel = read_selection(config)?;
            Ok((sel.t, TransportNet::load(&sel.checkpoint)?))
        }
    }
}

fn train_and_record(config: &ExperimentConfig, train: &Array2<f64>, val: &Array2<f64>) -> Result<magt::trainer::TrainOutcome<f64>> {
    let dir = config.run_dir();
    write_once(dir.join("config.txt"), config.to_text().as_bytes())?;
    let log_path = dir.join("train_log.csv");
    let mut records = Vec::new();
    let outcome = train_experiment(config, train.view(), val.view(), |r| {
        eprintln!(
            "t={} epoch={} loss={:.5} grad_norm={:.4} ess={:.1}{}",
            r.t,
            r.epoch,
            r.loss,
            r.grad_norm,
            r.mean_ess,
            r.val_metric.map(|v| format!(" val_w2={v:.4}")).unwrap_or_default()
        );
        records.push(r.clone());
    })?;
    append_epoch_log(&log_path, &records)?;
    for level in &outcome.levels {
        write_once(dir.join(checkpoint_name(level.t)), &checkpoint_bytes(&level.net)?)?;
    }
    Ok(outcome)
}

fn cmd_train(config: &ExperimentConfig) -> Result<()> {
    let train = load_split(config, "train")?;
    let val = load_split(config, "val")?;
    let outcome = train_and_record(config, &train, &val)?;
    write_selection(config, &outcome)?;
    println!("run_dir = {}", config.run_dir().display());
    println!("selected_t = {}", outcome.selected_t());
    Ok(())
}

fn cmd_sample(config: &ExperimentConfig, kind: SamplerKind, n: Option<usize>, output: &Path, checkpoint: Option<&Path>) -> Result<()> {
    let (_, net) = load_model(config, checkpoint)?;
    let sampler = config.sampler_config(kind);
    let seed = substream(config.seed, streams::SAMPLER);
    let out = sample(&net, &LatentPrior::StandardNormal, &sampler, n.unwrap_or(config.n_generate), seed)?;
    if out.samples.iter().any(|v| !v.is_finite()) {
        return Err(MagtError::Numerical(format!("{kind} produced non-finite samples")));
    }
    write_points_csv(output, out.samples.view())?;
    println!("nfe = {}", out.nfe);
    Ok(())
}

fn print_rows(rows: &[EvalRow]) {
    println!("dataset,method,t,K,W2_mean,W2_sd,offmanifold,seconds,NFE,seed");
    for r in rows {
        println!(
            "{},{},{},{},{},{},{},{},{},{}",
            r.dataset, r.method, r.t, r.k, r.w2_mean, r.w2_sd, r.offmanifold, r.seconds, r.nfe, r.seed
        );
    }
}

fn cmd_eval(config: &ExperimentConfig, samples: Option<&Path>, checkpoint: Option<&Path>) -> Result<()> {
    let test = load_split(config, "test")?;
    let rows = match samples {
        Some(path) => {
            let points = read_points_csv(path)?;
            let t = config.train.t_candidates[0];
            vec![score_samples(config, "file", t, points.view(), test.view(), 0.0, 0)?]
        }
        None => {
            let (t, net) = load_model(config, checkpoint)?;
            let mut rows = Vec::new();
            for &kind in &config.samplers {
                rows.push(evaluate(config, &net, t, kind, test.view())?.0);
            }
            rows
        }
    };
    append_csv(config.run_dir().join("eval.csv"), &rows)?;
    print_rows(&rows);
    Ok(())
}

fn cmd_density(config: &ExperimentConfig, n: usize, output: &Path, checkpoint: Option<&Path>) -> Result<()> {
    let (t, net) = load_model(config, checkpoint)?;
    let prior = LatentPrior::StandardNormal;
    let mut rng = stream_rng(config.seed, substream(streams::SAMPLER, 1));
    let latents: Array2<f64> = prior.sample(&mut rng, n, net.latent_dim());
    let outputs = net.apply(latents.view())?;
    let level = NoiseLevel::vp(t)?;
    let bank = build_bank_mc(&net, &prior, config.train.anchor_count, config.seed)?;
    let mut values = Array2::<f64>::zeros((n, 2));
    let mut deficient = 0;
    for i in 0..n {
        values[[i, 0]] = match intrinsic_log_density(&net, &prior, latents.row(i)) {
            Ok(v) => v,
            Err(MagtError::RankDeficient { .. }) => {
                deficient += 1;
                f64::NAN
            }
            Err(e) => return Err(e),
        };
        values[[i, 1]] = smoothed_ambient_log_density(&level, &bank, outputs.row(i))?;
    }
    if deficient > 0 {
        eprintln!("{deficient} of {n} latents have a rank-deficient Jacobian; intrinsic_logp is NaN there");
    }
    let table = concatenate![Axis(1), latents, outputs, values];
    let mut header: Vec<String> = (0..net.latent_dim()).map(|j| format!("u{j}")).collect();
    header.extend((0..net.ambient_dim()).map(|j| format!("y{j}")));
    header.push("intrinsic_logp".into());
    header.push(format!("smoothed_logp_t{t}"));
    let mut out = csv::Writer::from_path(output).map_err(|e| MagtError::Parse(e.to_string()))?;
    out.write_record(&header).map_err(|e| MagtError::Parse(e.to_string()))?;
    for row in table.rows() {
        out.write_record(row.iter().map(|v| format!("{v:.16e}")))
            .map_err(|e| MagtError::Parse(e.to_string()))?;
    }
    out.flush().map_err(|e| MagtError::io(output, e))
}

fn parse_shard(shard: &str) -> Result<(usize, usize)> {
    let bad = || MagtError::Config(format!("--shard expects i/m with i < m, got {shard:?}"));
    let (i, m) = shard.split_once('/').ok_or_else(bad)?;
    let (i, m): (usize, usize) = (i.parse().map_err(|_| bad())?, m.parse().map_err(|_| bad())?);
    if m == 0 || i >= m {
        return Err(bad());
    }
    Ok((i, m))
}

fn cmd_sweep(base: &ExperimentConfig, ns: &[usize], ks: &[usize], ts: &[f64], shard: &str) -> Result<()> {
    let (shard_index, shard_count) = parse_shard(shard)?;
    let ns = if ns.is_empty() { vec![base.n_train] } else { ns.to_vec() };
    let ks = if ks.is_empty() { vec![base.train.anchor_count] } else { ks.to_vec() };
    let ts = if ts.is_empty() { base.train.t_candidates.clone() } else { ts.to_vec() };
    let out = base.run_dir().join(format!("sweep-{shard_index}of{shard_count}.csv"));
    println!("n,dataset,method,t,K,W2_mean,W2_sd,offmanifold,seconds,NFE,seed");
    let mut cells = Vec::new();
    for &n in &ns {
        for &k in &ks {
            for &t in &ts {
                cells.push((n, k, t));
            }
        }
    }
    for (index, (n, k, t)) in cells.into_iter().enumerate() {
        if index % shard_count != shard_index {
            continue;
        }
        let mut config = base.clone();
        config.set("n_train", &n.to_string())?;
        config.set("anchor_count", &k.to_string())?;
        config.train.t_candidates = vec![t];
        config.validate()?;
        let splits = generate_splits(&config)?;
        let outcome = train_and_record(&config, &splits.train, &splits.val)?;
        let net = outcome.selected_net();
        let mut rows = Vec::new();
        for &kind in &config.samplers {
            let (row, _) = evaluate(&config, net, t, kind, splits.test.view())?;
            rows.push(SweepRow::new(n, row));
        }
        append_csv(&out, &rows)?;
        for r in &rows {
            println!(
                "{},{},{},{},{},{},{},{},{},{},{}",
                r.n, r.dataset, r.method, r.t, r.k, r.w2_mean, r.w2_sd, r.offmanifold, r.seconds, r.nfe, r.seed
            );
        }
    }
    Ok(())
}

fn cmd_bench(config: &ExperimentConfig, checkpoint: Option<&Path>, untrained: bool) -> Result<()> {
    let net = if untrained {
        let dims = config.train.layer_dims(config.manifold()?.ambient_dim);
        TransportNet::<f64>::init(&dims, config.seed)?
    } else {
        load_model(config, checkpoint)?.1
    };
    let net32: TransportNet<f32> = net.cast();
    let prior = LatentPrior::StandardNormal;
    let seed = substream(config.seed, streams::SAMPLER);
    println!("sampler,n,seconds,NFE");
    for &kind in &config.samplers {
        let sampler = config.sampler_config(kind);
        let (timing, _) = timing_harness(|n| sample(&net32, &prior, &sampler, n, seed), config.n_generate)?;
        println!("{kind},{},{},{}", config.n_generate, timing.seconds, timing.nfe);
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(common) => cmd_gen_data(&common.resolve()?),
        Command::Train(common) => cmd_train(&common.resolve()?),
        Command::Sample {
            common,
            sampler,
            n,
            output,
            checkpoint,
        } => cmd_sample(&common.resolve()?, sampler, n, &output, checkpoint.as_deref()),
        Command::Eval {
            common,
            samples,
            checkpoint,
        } => cmd_eval(&common.resolve()?, samples.as_deref(), checkpoint.as_deref()),
        Command::Density {
            common,
            n,
            output,
            checkpoint,
        } => cmd_density(&common.resolve()?, n, &output, checkpoint.as_deref()),
        Command::Sweep {
            common,
            n_values,
            k_values,
            t_values,
            shard,
        } => cmd_sweep(&common.resolve()?, &n_values, &k_values, &t_values, &shard),
        Command::Bench {
            common,
            checkpoint,
            untrained,
        } => cmd_bench(&common.resolve()?, checkpoint.as_deref(), untrained),
    }
}

fn exit_code(err: &MagtError) -> u8 {
    if err.is_numerical() {
        3
    } else if matches!(err, MagtError::Config(_) | MagtError::Parse(_) | MagtError::Range(_)) {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
