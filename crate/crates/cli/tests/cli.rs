use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use magt::experiment::{read_csv, read_points_csv, EvalRow, SweepRow};
use magt::manifolds::{distance_to_manifold, ManifoldSpec};

const TINY: &str = "\
n_train = 200
n_val = 120
n_test = 150
n_generate = 150
hidden = 16,16
anchor_count = 32
batch_size = 32
chunk_size = 32
epochs = 1
steps_per_epoch = 4
val_samples = 120
val_subsample = 100
val_repeats = 1
ddim_steps = 5
ddim_bank_size = 32
w2_subsample = 100
w2_repeats = 2
precision = f64
";

fn scratch(name: &str) -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(name);
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn tiny_config(dir: &Path, dataset: &str, extra: &str) -> PathBuf {
    let path = dir.join("tiny.conf");
    fs::write(&path, format!("dataset = {dataset}\n{TINY}out_dir = {}\n{extra}", dir.join("out").display())).unwrap();
    path
}

fn magt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_magt"))
        .args(args)
        .env_remove("MAGT_SEED")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = magt(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn files_under(dir: &Path, suffix: &str) -> Vec<PathBuf> {
    let mut found = Vec::new();
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            found.extend(files_under(&path, suffix));
        } else if path.to_string_lossy().ends_with(suffix) {
            found.push(path);
        }
    }
    found.sort();
    found
}

#[test]
fn gen_data_is_reproducible_and_sized() {
    let a = scratch("gen_a");
    let b = scratch("gen_b");
    let args = |dir: &Path| {
        vec![
            "gen-data".to_string(),
            "--dataset".into(),
            "torus3d".into(),
            "--seed".into(),
            "7".into(),
            "--out".into(),
            dir.display().to_string(),
            "--set".into(),
            "n_train=300".into(),
            "--set".into(),
            "n_val=50".into(),
            "--set".into(),
            "n_test=80".into(),
        ]
    };
    let run = |dir: &Path| {
        let owned = args(dir);
        let refs: Vec<&str> = owned.iter().map(String::as_str).collect();
        ok(&refs)
    };
    run(&a);
    run(&a); // rerun into the same tree is accepted when identical
    run(&b);
    let fa = files_under(&a, ".csv");
    let fb = files_under(&b, ".csv");
    assert_eq!(fa.len(), 3);
    for (x, y) in fa.iter().zip(&fb) {
        assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap());
    }
    let rows: Vec<usize> = fa.iter().map(|p| read_points_csv(p).unwrap().nrows()).collect();
    // sorted paths: test, train, val
    assert_eq!(rows, vec![80, 300, 50]);
}

#[test]
fn noiseless_generated_points_lie_on_the_manifold() {
    let dir = scratch("gen_clean");
    for name in ["rings2d", "spiral2d", "moons2d", "checker2d", "helix3d", "torus3d"] {
        ok(&[
            "gen-data", "--dataset", name, "--out", &dir.display().to_string(),
            "--set", "jitter=0", "--set", "n_train=200", "--set", "n_val=10", "--set", "n_test=10",
        ]);
    }
    let trains = files_under(&dir, "train.csv");
    assert_eq!(trains.len(), 6);
    for path in trains {
        let name = path.parent().unwrap().file_name().unwrap().to_string_lossy().to_string();
        let dataset = name.split('-').nth(1).unwrap();
        let spec = ManifoldSpec::by_name(dataset).unwrap();
        let points = read_points_csv(&path).unwrap();
        for row in points.rows() {
            let d = distance_to_manifold(&spec, row);
            assert!(d < 1e-6, "{dataset}: distance {d}");
        }
    }
}

#[test]
fn seed_env_overrides_the_config_seed() {
    let dir = scratch("seed_env");
    let conf = tiny_config(&dir, "moons2d", "seed = 1\n");
    let out = Command::new(env!("CARGO_BIN_EXE_magt"))
        .args(["gen-data", "--config", conf.to_str().unwrap()])
        .env("MAGT_SEED", "5")
        .output()
        .unwrap();
    assert!(out.status.success());
    let env_paths = String::from_utf8(out.stdout).unwrap();
    let dir2 = scratch("seed_env_flag");
    let conf2 = tiny_config(&dir2, "moons2d", "seed = 5\n");
    ok(&["gen-data", "--config", conf2.to_str().unwrap()]);
    let a = read_points_csv(env_paths.lines().next().unwrap()).unwrap();
    let b = read_points_csv(&files_under(&dir2, "train.csv")[0]).unwrap();
    assert_eq!(a, b);
}

#[test]
fn train_eval_sample_density_bench_pipeline() {
    let dir = scratch("pipeline");
    let conf = tiny_config(&dir, "rings2d", "seed = 3\n");
    let conf = conf.to_str().unwrap();
    ok(&["gen-data", "--config", conf]);
    let stdout = ok(&["train", "--config", conf, "--t", "0.3", "--epochs", "1"]);
    assert!(stdout.contains("selected_t = 0.3"));
    let ckpts = files_under(&dir, ".ckpt");
    assert_eq!(ckpts.len(), 1);
    let logs = files_under(&dir, "train_log.csv");
    let log = fs::read_to_string(&logs[0]).unwrap();
    assert_eq!(log.lines().count(), 2, "header plus one epoch row");
    assert!(log.starts_with("epoch,t,loss,grad_norm,mean_ess,val_metric"));

    // identical rerun elsewhere gives identical checkpoint bytes
    let other = scratch("pipeline_rerun");
    let conf2 = tiny_config(&other, "rings2d", "seed = 3\n");
    let conf2 = conf2.to_str().unwrap();
    ok(&["gen-data", "--config", conf2]);
    ok(&["train", "--config", conf2, "--t", "0.3", "--epochs", "1"]);
    assert_eq!(fs::read(&ckpts[0]).unwrap(), fs::read(&files_under(&other, ".ckpt")[0]).unwrap());

    let stdout = ok(&["eval", "--config", conf, "--t", "0.3", "--epochs", "1"]);
    assert!(stdout.starts_with("dataset,method,t,K,W2_mean,W2_sd,offmanifold,seconds,NFE,seed"));
    let eval = files_under(&dir, "eval.csv");
    let rows: Vec<EvalRow> = read_csv(&eval[0]).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!((rows[0].method.as_str(), rows[0].nfe), ("one_shot", 1));
    assert_eq!((rows[1].method.as_str(), rows[1].nfe), ("m_ddim", 5));
    for r in &rows {
        assert!((0.0..=1.0).contains(&r.offmanifold));
        assert!(r.w2_mean.is_finite() && r.w2_sd >= 0.0);
        assert_eq!(r.seed, 3);
    }

    // same config and seed elsewhere: identical rows apart from timing
    ok(&["eval", "--config", conf2, "--t", "0.3", "--epochs", "1"]);
    let mut again: Vec<EvalRow> = read_csv(&files_under(&other, "eval.csv")[0]).unwrap();
    let mut first = rows.clone();
    for r in first.iter_mut().chain(again.iter_mut()) {
        r.seconds = 0.0;
    }
    assert_eq!(first, again);

    // appended, never overwritten
    ok(&["eval", "--config", conf, "--t", "0.3", "--epochs", "1"]);
    let rows: Vec<EvalRow> = read_csv(&eval[0]).unwrap();
    assert_eq!(rows.len(), 4);

    // the test set scored against itself at full subsample size
    let test = files_under(&dir, "test.csv")[0].clone();
    let stdout = ok(&[
        "eval", "--config", conf, "--t", "0.3", "--epochs", "1", "--set", "w2_subsample=150", "--samples",
        test.to_str().unwrap(),
    ]);
    let row = stdout.lines().nth(1).unwrap();
    let fields: Vec<&str> = row.split(',').collect();
    assert_eq!(fields[4].parse::<f64>().unwrap(), 0.0);

    let samples = dir.join("samples.csv");
    let stdout = ok(&[
        "sample", "--config", conf, "--t", "0.3", "--epochs", "1", "--sampler", "m_ddim", "--n", "40",
        "--output", samples.to_str().unwrap(),
    ]);
    assert!(stdout.contains("nfe = 5"));
    assert_eq!(read_points_csv(&samples).unwrap().dim(), (40, 2));

    let density = dir.join("density.csv");
    ok(&[
        "density", "--config", conf, "--t", "0.3", "--epochs", "1", "--n", "25", "--output",
        density.to_str().unwrap(),
    ]);
    let text = fs::read_to_string(&density).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "u0,y0,y1,intrinsic_logp,smoothed_logp_t0.3");
    let body: Vec<&str> = lines.collect();
    assert_eq!(body.len(), 25);
    for line in body {
        let last: f64 = line.rsplit(',').next().unwrap().parse().unwrap();
        assert!(last.is_finite());
    }

    let stdout = ok(&["bench", "--config", conf, "--t", "0.3", "--epochs", "1"]);
    let nfe: Vec<&str> = stdout.lines().skip(1).map(|l| l.rsplit(',').next().unwrap()).collect();
    assert_eq!(nfe, vec!["1", "5"]);
}

#[test]
fn sweep_emits_one_row_per_cell() {
    let dir = scratch("sweep");
    let conf = tiny_config(&dir, "rings2d", "seed = 11\nsamplers = one_shot\n");
    let conf = conf.to_str().unwrap();
    let stdout = ok(&["sweep", "--config", conf, "--k-values", "16,32", "--t-values", "0.3"]);
    assert_eq!(stdout.lines().count(), 3);
    let files = files_under(&dir, "sweep-0of1.csv");
    let rows: Vec<SweepRow> = read_csv(&files[0]).unwrap();
    assert_eq!(rows.iter().map(|r| r.k).collect::<Vec<_>>(), vec![16, 32]);
    assert!(rows.iter().all(|r| r.seed == 11 && r.n == 200 && r.t == 0.3));
}

#[test]
fn sweep_shards_partition_the_grid() {
    let dir = scratch("sweep_shards");
    let conf = tiny_config(&dir, "rings2d", "samplers = one_shot\n");
    let conf = conf.to_str().unwrap();
    let a = ok(&["sweep", "--config", conf, "--t-values", "0.2,0.4,0.6", "--shard", "0/2"]);
    let b = ok(&["sweep", "--config", conf, "--t-values", "0.2,0.4,0.6", "--shard", "1/2"]);
    assert_eq!(a.lines().count() - 1, 2);
    assert_eq!(b.lines().count() - 1, 1);
}

#[test]
fn exit_codes() {
    let dir = scratch("exit_codes");
    let d = dir.display().to_string();
    // config errors
    assert_eq!(magt(&["gen-data", "--out", &d]).status.code(), Some(2));
    assert_eq!(magt(&["gen-data", "--dataset", "rings2d", "--out", &d, "--set", "n_train=0"]).status.code(), Some(2));
    assert_eq!(magt(&["gen-data", "--dataset", "rings2d", "--out", &d, "--set", "bogus=1"]).status.code(), Some(2));
    assert_eq!(magt(&["gen-data", "--dataset", "sphere"]).status.code(), Some(2));
    assert_eq!(magt(&["train", "--dataset", "rings2d", "--out", &d]).status.code(), Some(2));
    assert_eq!(magt(&["sweep", "--dataset", "rings2d", "--out", &d, "--shard", "2/2"]).status.code(), Some(2));
    // numerical failure: a huge learning rate overflows the parameters
    let conf = tiny_config(&dir, "rings2d", "precision = f32\nlearning_rate = 1e30\n");
    let conf = conf.to_str().unwrap();
    ok(&["gen-data", "--config", conf]);
    let out = magt(&["train", "--config", conf, "--t", "0.3"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}
