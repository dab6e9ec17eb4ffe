use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use structdrop::data::{write_idx_images, write_idx_labels};

const TRAIN: usize = 600;
const VAL: usize = 100;
const TEST: usize = 200;

/// Writes an MNIST-shaped IDX set where class `c` lights up row band `c`.
fn write_fixture(dir: &Path) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut make = |count: usize| {
        let mut pixels = Vec::with_capacity(count * 784);
        let mut labels = Vec::with_capacity(count);
        for _ in 0..count {
            let c: u8 = rng.random_range(0..10);
            for r in 0..28 {
                for _ in 0..28 {
                    let lit = r / 3 == c as usize;
                    pixels.push(if lit { rng.random_range(150..=255) } else { rng.random_range(0..60) });
                }
            }
            labels.push(c);
        }
        (pixels, labels)
    };
    fs::create_dir_all(dir).unwrap();
    let (p, l) = make(TRAIN);
    write_idx_images(dir.join("train-images-idx3-ubyte"), 28, 28, &p).unwrap();
    write_idx_labels(dir.join("train-labels-idx1-ubyte"), &l).unwrap();
    let (p, l) = make(TEST);
    write_idx_images(dir.join("t10k-images-idx3-ubyte"), 28, 28, &p).unwrap();
    write_idx_labels(dir.join("t10k-labels-idx1-ubyte"), &l).unwrap();
}

struct Env {
    root: tempfile::TempDir,
}

impl Env {
    fn new() -> Self {
        let root = tempfile::tempdir().unwrap();
        write_fixture(&root.path().join("mnist"));
        Env { root }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.root.path().join(rel)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_sdrop"))
            .args(args)
            .env_remove("SDROP_OUT_DIR")
            .env("SDROP_DATA_DIR", self.path("mnist"))
            .current_dir(self.root.path())
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    fn train(&self, out: &str, extra: &[&str]) -> PathBuf {
        let val = VAL.to_string();
        let mut args = vec!["train", "--epochs", "1", "--seed", "7", "--batch-size", "32", "--val-size", &val, "--out-dir", out];
        args.extend_from_slice(extra);
        self.ok(&args);
        self.path(out).join("model.sdn")
    }
}

fn value<'a>(stdout: &'a str, key: &str) -> &'a str {
    stdout
        .lines()
        .flat_map(|l| l.split_whitespace())
        .find_map(|kv| kv.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
        .unwrap_or_else(|| panic!("{key} missing in {stdout}"))
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

#[test]
fn train_writes_checkpoint_and_log_deterministically() {
    let env = Env::new();
    let a = env.train("a", &[]);
    let b = env.train("b", &[]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let log = fs::read_to_string(env.path("a/run_log.csv")).unwrap();
    let steps = (TRAIN - VAL).div_ceil(32);
    assert_eq!(log.lines().count(), steps + 1);
    assert!(env.path("a/epochs.csv").is_file());
    let fast = env.train("fast", &["--fast-path"]);
    assert!(fast.is_file());
}

#[test]
fn missing_dataset_is_a_config_error() {
    let env = Env::new();
    let out = env.run(&["train", "--epochs", "1", "--data-dir", "nowhere/mnist", "--out-dir", "x"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere/mnist"));
    let out = env.run(&["eval", "--checkpoint", "missing.sdn"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.sdn"));
}

#[test]
fn sweep_prune_and_eval_agree() {
    let env = Env::new();
    let ckpt = env.train("run", &[]);
    let ckpt = ckpt.to_str().unwrap();
    let val = VAL.to_string();

    let out = env.ok(&["sweep", "--checkpoint", ckpt, "--stride", "4", "--val-size", &val, "--out-dir", "run"]);
    let csv = fs::read_to_string(env.path("run/sweep.csv")).unwrap();
    let widths: Vec<usize> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(widths, (1..=64).map(|i| 4 * i).collect::<Vec<_>>());
    assert!(env.path("run/sweep.svg").is_file());
    assert!(out.contains("selected policy=best"));

    let out = env.ok(&[
        "sweep", "--checkpoint", ckpt, "--stride", "16", "--policy", "smallest_within:0.02", "--val-size", &val, "--out-dir", "run",
    ]);
    assert!(out.contains("selected policy=smallest_within:0.02 width="), "{out}");

    let out = env.run(&["sweep", "--checkpoint", ckpt, "--stride", "64", "--policy", "max_params:10", "--val-size", &val, "--out-dir", "run"]);
    assert_eq!(code(&out), 3);

    let out = env.ok(&["prune", "--checkpoint", ckpt, "--width", "64", "--out-dir", "run"]);
    assert_eq!(value(&out, "params_before"), (784 * 256 + 256 + 256 * 256 + 256 + 2570).to_string());
    assert_eq!(value(&out, "params_after"), (784 * 64 + 64 + 64 * 64 + 64 + 650).to_string());
    let pruned = value(&out, "checkpoint").to_string();

    let direct = env.ok(&["eval", "--checkpoint", &pruned, "--val-size", &val]);
    let masked = env.ok(&["eval", "--checkpoint", ckpt, "--width", "64", "--val-size", &val]);
    assert_eq!(value(&direct, "accuracy"), value(&masked, "accuracy"));
    assert_eq!(value(&direct, "loss"), value(&masked, "loss"));
    let acc = value(&direct, "accuracy");
    assert!(acc.len() == 6 && acc.starts_with("0.") || acc == "1.0000", "{acc}");

    // pruning at full width keeps the full-width metric
    let out = env.ok(&["prune", "--checkpoint", ckpt, "--widths", "256,256", "--output", "full.sdn", "--out-dir", "run"]);
    let full_pruned = env.ok(&["eval", "--checkpoint", value(&out, "checkpoint"), "--val-size", &val]);
    let full = env.ok(&["eval", "--checkpoint", ckpt, "--val-size", &val]);
    assert_eq!(value(&full_pruned, "accuracy"), value(&full, "accuracy"));

    // widths make no sense on a checkpoint without dropout layers
    let out = env.run(&["eval", "--checkpoint", &pruned, "--width", "8", "--val-size", &val]);
    assert_eq!(code(&out), 2);
}

#[test]
fn domain_errors_exit_with_three() {
    let env = Env::new();
    let ckpt = env.train("run", &[]);
    let ckpt = ckpt.to_str().unwrap();
    let out = env.run(&["prune", "--checkpoint", ckpt, "--width", "300", "--out-dir", "run"]);
    assert_eq!(code(&out), 3);
    let out = env.run(&["prune", "--checkpoint", ckpt, "--widths", "16", "--out-dir", "run"]);
    assert_eq!(code(&out), 3);
    let out = env.run(&["prune", "--checkpoint", ckpt, "--width", "0", "--out-dir", "run"]);
    assert_eq!(code(&out), 3);
    let out = env.run(&["sweep", "--checkpoint", ckpt, "--policy", "bogus", "--out-dir", "run"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn p_zero_checkpoint_still_sweeps() {
    let env = Env::new();
    let ckpt = env.train("plain", &["--p", "0"]);
    let val = VAL.to_string();
    env.ok(&["sweep", "--checkpoint", ckpt.to_str().unwrap(), "--stride", "32", "--val-size", &val, "--out-dir", "plain"]);
    assert!(env.path("plain/sweep.csv").is_file());
}

#[test]
fn synthetic_task_end_to_end() {
    let env = Env::new();
    let common = ["--dataset", "synth", "--val-size", "500", "--synth-train", "1000"];
    let mut args = vec!["train", "--preset", "synth", "--epochs", "2", "--out-dir", "synth"];
    args.extend_from_slice(&common);
    let out = env.ok(&args);
    let val: f64 = value(&out, "val_accuracy").parse().unwrap();
    assert!(val > 0.6, "{val}");
    let ckpt = env.path("synth/model.sdn");
    let mut args = vec!["sweep", "--checkpoint", ckpt.to_str().unwrap(), "--out-dir", "synth"];
    args.extend_from_slice(&common);
    env.ok(&args);
    let rows = fs::read_to_string(env.path("synth/sweep.csv")).unwrap().lines().count();
    assert_eq!(rows, 65);
}

#[test]
fn artifacts_stay_under_the_output_directory() {
    let env = Env::new();
    env.train("only/here", &[]);
    let mut top: Vec<String> = fs::read_dir(env.root.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    top.sort();
    assert_eq!(top, ["mnist", "only"]);
    let out = env.run(&["prune", "--checkpoint", "only/here/model.sdn", "--width", "8", "--output", "../escape.sdn", "--out-dir", "only"]);
    assert_eq!(code(&out), 2);
}
