//! `sdrop`: train a Structural Dropout MLP, sweep its widths, prune it and
//! evaluate the result.
//!
//! Exit codes: 0 on success, 2 for configuration, usage and I/O errors, 3
//! for width or selection-policy errors.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use structdrop::data::{load_mnist, Dataset, Split, SyntheticTask};
use structdrop::network::{self, Activation, DropoutSettings, ModelSpec, Network, Widths};
use structdrop::sweep::{self, SelectPolicy, SweepPlan};
use structdrop::train::{AdamConfig, TrainConfig};
use structdrop::{prune, Error};

const SYNTH_WIDTH: usize = 64;
const SYNTH_INFORMATIVE: usize = 8;

#[derive(Debug, Parser)]
#[command(name = "sdrop", version, about = "Structural Dropout: train once, prune to any width")]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model and write its checkpoint and logs.
    Train(TrainArgs),
    /// Evaluate a checkpoint at every shared width and pick one.
    Sweep(SweepArgs),
    /// Slice a checkpoint down to fixed widths.
    Prune(PruneArgs),
    /// Print accuracy and loss of a checkpoint.
    Eval(EvalArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DatasetKind {
    /// MNIST IDX files under --data-dir.
    Mnist,
    /// The ordered synthetic task (64 inputs, 8 informative), generated from --synth-seed.
    Synth,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Preset {
    /// 784-256-256-10 with dropout after both hidden layers.
    Mnist,
    /// 64-64-64-2 for the synthetic task.
    Synth,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum EvalSplit {
    Validation,
    Test,
}

#[derive(Debug, Args)]
struct DataArgs {
    #[arg(long, value_enum, default_value = "mnist")]
    dataset: DatasetKind,

    /// Directory holding the four MNIST IDX files (plain or gzipped).
    #[arg(long, env = "SDROP_DATA_DIR", default_value = "data/mnist")]
    data_dir: PathBuf,

    /// Training samples held out for validation.
    #[arg(long, default_value_t = 5000)]
    val_size: usize,

    #[arg(long, default_value_t = 0)]
    synth_seed: u64,

    /// Training samples of the synthetic task.
    #[arg(long, default_value_t = 8000)]
    synth_train: usize,
}

#[derive(Debug, Args)]
struct OutArgs {
    /// Every artifact is written under this directory.
    #[arg(long, env = "SDROP_OUT_DIR", default_value = "runs")]
    out_dir: PathBuf,
}

#[derive(Debug, Args)]
struct WidthArgs {
    /// One width for every dropout layer.
    #[arg(long, conflicts_with = "widths")]
    width: Option<usize>,

    /// Comma-separated width per dropout layer.
    #[arg(long, value_delimiter = ',')]
    widths: Option<Vec<usize>>,
}

impl WidthArgs {
    fn get(&self) -> Option<Widths> {
        match (&self.width, &self.widths) {
            (Some(k), _) => Some(Widths::Shared(*k)),
            (None, Some(ws)) => Some(Widths::PerLayer(ws.clone())),
            (None, None) => None,
        }
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long, value_enum, default_value = "mnist", conflicts_with = "spec")]
    preset: Preset,

    /// Model spec as JSON instead of a preset.
    #[arg(long)]
    spec: Option<PathBuf>,

    /// Dropout probability for presets.
    #[arg(long, default_value_t = 0.5)]
    p: f64,

    #[arg(long, default_value_t = 15)]
    epochs: usize,

    #[arg(long, default_value_t = 128)]
    batch_size: usize,

    #[arg(long, default_value_t = 8e-4)]
    lr: f64,

    #[arg(long, default_value_t = 0)]
    seed: u64,

    /// Run each step on the sliced network.
    #[arg(long)]
    fast_path: bool,

    /// Also save a checkpoint every this many epochs.
    #[arg(long)]
    checkpoint_every: Option<usize>,

    #[command(flatten)]
    data: DataArgs,

    #[command(flatten)]
    out: OutArgs,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[arg(long)]
    checkpoint: PathBuf,

    /// Evaluate every stride-th width, counting down from full width.
    #[arg(long, default_value_t = 1)]
    stride: usize,

    /// best, smallest_within:EPS or max_params:N.
    #[arg(long, default_value = "best")]
    policy: String,

    #[arg(long, value_enum, default_value = "validation")]
    split: EvalSplit,

    #[command(flatten)]
    data: DataArgs,

    #[command(flatten)]
    out: OutArgs,
}

#[derive(Debug, Args)]
struct PruneArgs {
    #[arg(long)]
    checkpoint: PathBuf,

    #[command(flatten)]
    widths: WidthArgs,

    /// File name of the pruned checkpoint inside the output directory.
    #[arg(long)]
    output: Option<String>,

    #[command(flatten)]
    out: OutArgs,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,

    #[command(flatten)]
    widths: WidthArgs,

    #[arg(long, value_enum, default_value = "test")]
    split: EvalSplit,

    #[command(flatten)]
    data: DataArgs,
}

struct Splits {
    train: Dataset,
    validation: Dataset,
    test: Dataset,
}

fn load_data(args: &DataArgs) -> structdrop::Result<Splits> {
    match args.dataset {
        DatasetKind::Mnist => {
            let (train, test) = load_mnist(&args.data_dir)?;
            let (train, validation) = train.split_tail(args.val_size)?;
            Ok(Splits {
                train,
                validation,
                test,
            })
        }
        DatasetKind::Synth => {
            let mut rng = ChaCha8Rng::seed_from_u64(args.synth_seed);
            let task = SyntheticTask::new(&mut rng, SYNTH_WIDTH, SYNTH_INFORMATIVE)?;
            Ok(Splits {
                train: task.sample(&mut rng, args.synth_train, Split::Train),
                validation: task.sample(&mut rng, args.val_size, Split::Validation),
                test: task.sample(&mut rng, 20_000, Split::Test),
            })
        }
    }
}

fn pick(splits: Splits, split: EvalSplit) -> Dataset {
    match split {
        EvalSplit::Validation => splits.validation,
        EvalSplit::Test => splits.test,
    }
}

fn ensure_exists(path: &Path) -> structdrop::Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Io {
            path: path.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "file not found"),
        })
    }
}

fn create_dir(dir: &Path) -> structdrop::Result<()> {
    fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })
}

fn check_input_width(net: &Network, data: &Dataset) -> structdrop::Result<()> {
    if net.spec().input_width != data.input_width() {
        return Err(Error::InvalidConfig(format!(
            "model takes {} inputs but the dataset has {}",
            net.spec().input_width,
            data.input_width()
        )));
    }
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> structdrop::Result<()> {
    let spec = match &args.spec {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|source| Error::Io {
                path: path.clone(),
                source,
            })?;
            let spec: ModelSpec = serde_json::from_str(&text)?;
            spec.validate()?;
            spec
        }
        None => {
            let dropout = Some(DropoutSettings::with_p(args.p));
            match args.preset {
                Preset::Mnist => ModelSpec::mlp("mnist", 784, &[256, 256], 10, Activation::Relu, dropout)?,
                Preset::Synth => ModelSpec::mlp("synth", SYNTH_WIDTH, &[64, 64], 2, Activation::Relu, dropout)?,
            }
        }
    };
    let data = load_data(&args.data)?;
    let out = &args.out.out_dir;
    create_dir(out)?;
    let cfg = TrainConfig {
        epochs: args.epochs,
        batch_size: args.batch_size,
        adam: AdamConfig {
            learning_rate: args.lr,
            ..AdamConfig::default()
        },
        seed: args.seed,
        shuffle: true,
        sd_fast_path: args.fast_path,
        checkpoint_every: args.checkpoint_every,
        checkpoint_dir: args.checkpoint_every.map(|_| out.join("checkpoints")),
    };
    cfg.validate()?;

    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let net = Network::init(spec, &mut rng)?;
    check_input_width(&net, &data.train)?;
    let (net, log) = structdrop::train(net, &data.train, Some(&data.validation), &cfg)?;
    network::save(&net, out.join("model.sdn"))?;
    log.write_steps_csv(out.join("run_log.csv"))?;
    log.write_epochs_csv(out.join("epochs.csv"))?;
    let last = log.epochs.last().expect("at least one epoch");
    println!("checkpoint={}", out.join("model.sdn").display());
    println!("val_accuracy={:.4}", last.val_accuracy.unwrap_or(f64::NAN));
    Ok(())
}

fn cmd_sweep(args: &SweepArgs) -> structdrop::Result<()> {
    ensure_exists(&args.checkpoint)?;
    let policy: SelectPolicy = args.policy.parse()?;
    let net = network::load(&args.checkpoint)?;
    let plan = SweepPlan::strided(net.spec(), args.stride)?;
    let data = pick(load_data(&args.data)?, args.split);
    check_input_width(&net, &data)?;
    create_dir(&args.out.out_dir)?;

    let records = sweep::sweep(&net, &data, &plan)?;
    sweep::report(&records, &args.out.out_dir, "sweep")?;
    for r in &records {
        println!("k={} params={} accuracy={:.4}", r.width, r.params, r.metric);
    }
    let chosen = sweep::select_width(&records, &policy)?;
    println!(
        "selected policy={policy} width={} params={} flops={} accuracy={:.4}",
        chosen.width, chosen.params, chosen.flops, chosen.metric
    );
    Ok(())
}

fn cmd_prune(args: &PruneArgs) -> structdrop::Result<()> {
    ensure_exists(&args.checkpoint)?;
    let widths = args
        .widths
        .get()
        .ok_or_else(|| Error::InvalidConfig("prune needs --width or --widths".into()))?;
    let net = network::load(&args.checkpoint)?;
    let before = net.param_count();
    let pruned = prune(&net, &widths)?;
    let name = args.output.clone().unwrap_or_else(|| {
        let ws: Vec<String> = pruned.widths().iter().map(|k| k.to_string()).collect();
        format!("pruned-k{}.sdn", ws.join("-"))
    });
    if Path::new(&name).components().count() != 1 {
        return Err(Error::InvalidConfig(format!("--output {name:?} must be a plain file name")));
    }
    create_dir(&args.out.out_dir)?;
    let path = args.out.out_dir.join(name);
    network::save(pruned.network(), &path)?;
    println!("params_before={before}");
    println!("params_after={}", pruned.param_count());
    println!("checkpoint={}", path.display());
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> structdrop::Result<()> {
    ensure_exists(&args.checkpoint)?;
    let net = network::load(&args.checkpoint)?;
    let widths = args.widths.get();
    if let Some(w) = &widths {
        if net.spec().sd_count() == 0 {
            return Err(Error::InvalidConfig(
                "--width/--widths apply to checkpoints with structural dropout layers; this one has none".into(),
            ));
        }
        w.resolve(net.spec())?;
    }
    let data = pick(load_data(&args.data)?, args.split);
    check_input_width(&net, &data)?;
    let e = net.evaluate(&data, widths.as_ref())?;
    println!("accuracy={:.4}", e.accuracy);
    println!("loss={:.4}", e.loss);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Prune(a) => cmd_prune(a),
        Command::Eval(a) => cmd_eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_domain() { 3 } else { 2 })
        }
    }
}
