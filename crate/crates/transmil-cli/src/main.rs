//! `transmil` — desk-scale correlated multiple-instance learning.
//!
//! Subcommands: `gen` (synthetic witness bags), `train`, `eval`, `attend`
//! (attention heat maps), `bench` (exact vs low-rank attention scaling), and
//! `entropy-check` (the information-theoretic property sweep).
//!
//! Exit codes are a stable contract: 0 success, 1 a property or runtime
//! failure, 2 a usage or configuration error. Logs go to standard error;
//! data goes to files (plus the one-line metric summary `eval` prints on
//! standard out). Every command echoes its resolved configuration to
//! standard error so runs are reproducible from logs alone.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use transmil::attention::{exact_self_attention, nystrom_attention, AttentionMode};
use transmil::data::{
    generate_synthetic_dataset, load_bags, read_bag, write_dataset, write_heatmap_csv,
    write_heatmap_pgm, DataError, Manifest, Split, SyntheticConfig,
};
use transmil::mil::entropy::entropy_sweep;
use transmil::model::checkpoint;
use transmil::model::{attention_heatmap, BagClassifier, ModelConfig, PosEncoding};
use transmil::tensor::Tape;
use transmil::train::{evaluate, train_loop, write_train_log, TrainConfig, TrainError};

#[derive(Parser)]
#[command(
    name = "transmil",
    version,
    about = "Correlated multiple-instance learning on bags of instance features"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic witness-bag dataset with a split manifest.
    Gen(GenArgs),
    /// Train a classifier on a generated dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split.
    Eval(EvalArgs),
    /// Export the class-token attention over one bag as CSV + PGM.
    Attend(AttendArgs),
    /// Time exact vs low-rank attention over growing sequence lengths.
    Bench(BenchArgs),
    /// Sweep random joint distributions for the entropy properties.
    #[command(name = "entropy-check")]
    EntropyCheck(EntropyArgs),
}

/// Failures split by exit code: usage/config errors exit 2, everything
/// else (I/O, format, property violations) exits 1.
enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<DataError> for Failure {
    fn from(e: DataError) -> Failure {
        match e {
            DataError::Config { .. } => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Failure {
        match e {
            TrainError::Config { .. } => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

impl From<checkpoint::CheckpointError> for Failure {
    fn from(e: checkpoint::CheckpointError) -> Failure {
        Failure::Runtime(e.to_string())
    }
}

impl From<transmil::tensor::TensorError> for Failure {
    fn from(e: transmil::tensor::TensorError) -> Failure {
        Failure::Runtime(e.to_string())
    }
}

fn io_failure(what: &str, path: &Path, e: std::io::Error) -> Failure {
    Failure::Runtime(format!("cannot {what} {}: {e}", path.display()))
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Exact,
    Nystrom,
}

impl From<ModeArg> for AttentionMode {
    fn from(m: ModeArg) -> AttentionMode {
        match m {
            ModeArg::Exact => AttentionMode::Exact,
            ModeArg::Nystrom => AttentionMode::Nystrom,
        }
    }
}

impl ModeArg {
    fn name(self) -> &'static str {
        match self {
            ModeArg::Exact => "exact",
            ModeArg::Nystrom => "nystrom",
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    /// Sparse witnesses (10%) in one contiguous block.
    CamelyonLike,
    /// Witness-dominated bags (80%), scattered.
    TcgaLike,
}

#[derive(Clone, Copy, ValueEnum)]
enum PosArg {
    Ppeg,
    Sinusoidal,
    None,
}

impl From<PosArg> for PosEncoding {
    fn from(p: PosArg) -> PosEncoding {
        match p {
            PosArg::Ppeg => PosEncoding::Ppeg,
            PosArg::Sinusoidal => PosEncoding::Sinusoidal,
            PosArg::None => PosEncoding::None,
        }
    }
}

impl PosArg {
    fn name(self) -> &'static str {
        match self {
            PosArg::Ppeg => "ppeg",
            PosArg::Sinusoidal => "sinusoidal",
            PosArg::None => "none",
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Args)]
struct GenArgs {
    /// Output directory for bag files and manifest.csv.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "camelyon-like")]
    preset: PresetArg,
    /// Override the preset's bag count.
    #[arg(long)]
    bags: Option<usize>,
    #[arg(long)]
    min_instances: Option<usize>,
    #[arg(long)]
    max_instances: Option<usize>,
    #[arg(long)]
    feature_dim: Option<usize>,
    #[arg(long)]
    witness_rate: Option<f64>,
    #[arg(long)]
    separation: Option<f64>,
    /// Place witnesses as one contiguous block (true) or scattered (false).
    #[arg(long)]
    spatial: Option<bool>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Train,val,test patient fractions (three comma-separated numbers).
    #[arg(long, value_delimiter = ',', default_value = "0.6,0.15,0.25")]
    ratios: Vec<f64>,
}

fn cmd_gen(args: GenArgs) -> Result<(), Failure> {
    let mut cfg = match args.preset {
        PresetArg::CamelyonLike => SyntheticConfig::camelyon_like(args.seed),
        PresetArg::TcgaLike => SyntheticConfig::tcga_like(args.seed),
    };
    if let Some(v) = args.bags {
        cfg.bag_count = v;
    }
    let lo = args.min_instances.unwrap_or(*cfg.instances_per_bag.start());
    let hi = args.max_instances.unwrap_or(*cfg.instances_per_bag.end());
    cfg.instances_per_bag = lo..=hi;
    if let Some(v) = args.feature_dim {
        cfg.feature_dim = v;
    }
    if let Some(v) = args.witness_rate {
        cfg.witness_rate = v;
    }
    if let Some(v) = args.separation {
        cfg.cluster_separation = v;
    }
    if let Some(v) = args.spatial {
        cfg.spatial_clustering = v;
    }
    let ratios: [f64; 3] = args.ratios.clone().try_into().map_err(|_| {
        Failure::Usage(format!("--ratios needs exactly 3 numbers, got {}", args.ratios.len()))
    })?;

    eprintln!(
        "config: bags={} instances={}..={} feature-dim={} witness-rate={} separation={} \
         spatial={} seed={} ratios={},{},{}",
        cfg.bag_count,
        cfg.instances_per_bag.start(),
        cfg.instances_per_bag.end(),
        cfg.feature_dim,
        cfg.witness_rate,
        cfg.cluster_separation,
        cfg.spatial_clustering,
        cfg.seed,
        ratios[0],
        ratios[1],
        ratios[2],
    );

    let bags = generate_synthetic_dataset(&cfg)?;
    let manifest = write_dataset(&bags, &args.out, ratios, cfg.seed)?;
    let count = |s| manifest.of_split(s).count();
    eprintln!(
        "wrote {} bags to {} (train={} val={} test={})",
        bags.len(),
        args.out.display(),
        count(Split::Train),
        count(Split::Val),
        count(Split::Test),
    );
    Ok(())
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory containing manifest.csv.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for model.tmil and log.csv.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 2e-4)]
    lr: f64,
    #[arg(long, default_value_t = 1e-5)]
    wd: f64,
    #[arg(long, value_enum, default_value = "nystrom")]
    mode: ModeArg,
    #[arg(long, default_value_t = 64)]
    landmarks: usize,
    #[arg(long, default_value_t = 8)]
    heads: usize,
    /// Model (embedding) dimension.
    #[arg(long, default_value_t = 512)]
    dim: usize,
    #[arg(long, default_value_t = 6)]
    pinv_iters: usize,
    #[arg(long, value_enum, default_value = "ppeg")]
    pos: PosArg,
    #[arg(long, default_value_t = 5)]
    lookahead_k: usize,
    #[arg(long, default_value_t = 0.5)]
    lookahead_alpha: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn cmd_train(args: TrainArgs) -> Result<(), Failure> {
    let manifest = Manifest::read(args.data.join("manifest.csv"))?;
    let train = load_bags(&manifest, &args.data, Split::Train)?;
    let val = load_bags(&manifest, &args.data, Split::Val)?;
    let input_dim = train
        .first()
        .ok_or_else(|| Failure::Runtime("train split is empty".to_string()))?
        .instances
        .shape()[1];
    let classes = (manifest.records.iter().map(|r| r.label).max().unwrap_or(1) + 1).max(2);

    let config = ModelConfig {
        input_dim,
        model_dim: args.dim,
        heads: args.heads,
        landmarks: args.landmarks,
        pinv_iters: args.pinv_iters,
        classes,
        pos_encoding: args.pos.into(),
    };
    config.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    eprintln!(
        "config: input-dim={input_dim} dim={} heads={} landmarks={} pinv-iters={} classes={classes} \
         pos={} mode={} lr={} wd={} epochs={} lookahead-k={} lookahead-alpha={} seed={}",
        args.dim,
        args.heads,
        args.landmarks,
        args.pinv_iters,
        args.pos.name(),
        args.mode.name(),
        args.lr,
        args.wd,
        args.epochs,
        args.lookahead_k,
        args.lookahead_alpha,
        args.seed,
    );

    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let model = BagClassifier::init(config, &mut rng)?;
    let cfg = TrainConfig {
        lr: args.lr,
        weight_decay: args.wd,
        epochs: args.epochs,
        lookahead_k: args.lookahead_k,
        lookahead_alpha: args.lookahead_alpha,
        mode: args.mode.into(),
        seed: args.seed,
    };
    let outcome = train_loop(model, &train, &val, &cfg)?;
    for e in &outcome.log {
        eprintln!(
            "epoch={} train_loss={:.6} val_auc={:.4} val_acc={:.4} ({:.2}s)",
            e.epoch, e.train_loss, e.val_auc, e.val_acc, e.seconds
        );
    }

    fs::create_dir_all(&args.out).map_err(|e| io_failure("create", &args.out, e))?;
    let ckpt = args.out.join("model.tmil");
    checkpoint::save(&outcome.best, &ckpt)?;
    let log = args.out.join("log.csv");
    write_train_log(&outcome.log, &log).map_err(|e| io_failure("write", &log, e))?;
    eprintln!(
        "kept epoch {} (val_auc={:.4}) at {}; log at {}",
        outcome.best_epoch,
        outcome.best_val_auc,
        ckpt.display(),
        log.display(),
    );
    Ok(())
}

#[derive(Args)]
struct EvalArgs {
    /// Dataset directory containing manifest.csv.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint to evaluate.
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    #[arg(long, value_enum, default_value = "nystrom")]
    mode: ModeArg,
    /// Report file (default: eval-report.txt beside the checkpoint).
    #[arg(long)]
    report: Option<PathBuf>,
}

fn cmd_eval(args: EvalArgs) -> Result<(), Failure> {
    eprintln!(
        "config: data={} ckpt={} split={} mode={}",
        args.data.display(),
        args.ckpt.display(),
        Split::from(args.split),
        args.mode.name(),
    );
    let model = checkpoint::load(&args.ckpt)?;
    let manifest = Manifest::read(args.data.join("manifest.csv"))?;
    let bags = load_bags(&manifest, &args.data, args.split.into())?;
    let report = evaluate(&model, &bags, args.mode.into())?;

    println!("accuracy={} auc={}", report.accuracy, report.auc);
    let path = args.report.unwrap_or_else(|| {
        args.ckpt.parent().unwrap_or(Path::new(".")).join("eval-report.txt")
    });
    let body = format!(
        "split={}\nbags={}\naccuracy={}\nauc={}\nmean_loss={}\n",
        Split::from(args.split),
        report.bags,
        report.accuracy,
        report.auc,
        report.mean_loss,
    );
    fs::write(&path, body).map_err(|e| io_failure("write", &path, e))?;
    eprintln!("report at {}", path.display());
    Ok(())
}

#[derive(Args)]
struct AttendArgs {
    /// Checkpoint to read attention from.
    #[arg(long)]
    ckpt: PathBuf,
    /// Bag file to explain.
    #[arg(long)]
    bag: PathBuf,
    #[arg(long, value_enum, default_value = "nystrom")]
    mode: ModeArg,
    /// Where to put the two outputs (default: the bag's directory).
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

fn cmd_attend(args: AttendArgs) -> Result<(), Failure> {
    eprintln!(
        "config: ckpt={} bag={} mode={}",
        args.ckpt.display(),
        args.bag.display(),
        args.mode.name(),
    );
    let model = checkpoint::load(&args.ckpt)?;
    let bag = read_bag(&args.bag)?;
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let features = tape.constant_from(bag.instances.shape(), bag.instances.data().to_vec())?;
    let pass = bound.forward(&mut tape, features, args.mode.into())?;
    let map = attention_heatmap(&mut tape, &pass)?;

    let dir = match args.out_dir {
        Some(d) => d,
        None => args.bag.parent().unwrap_or(Path::new(".")).to_path_buf(),
    };
    fs::create_dir_all(&dir).map_err(|e| io_failure("create", &dir, e))?;
    let stem = args
        .bag
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Failure::Usage(format!("bag path {} has no file name", args.bag.display())))?;
    let csv = dir.join(format!("{stem}.heatmap.csv"));
    let pgm = dir.join(format!("{stem}.pgm"));
    write_heatmap_csv(&map, &csv)?;
    write_heatmap_pgm(&map, &pgm)?;
    eprintln!(
        "wrote {} and {} ({} instances on a {}x{} grid)",
        csv.display(),
        pgm.display(),
        map.scores.len(),
        map.side,
        map.side,
    );
    Ok(())
}

#[derive(Args)]
struct BenchArgs {
    /// Sequence lengths to time.
    #[arg(long, value_delimiter = ',', default_value = "1024,2048,4096")]
    sizes: Vec<usize>,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 64)]
    landmarks: usize,
    #[arg(long, default_value_t = 6)]
    pinv_iters: usize,
    /// Timed repetitions per point; the minimum is reported.
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV output path.
    #[arg(long, default_value = "bench.csv")]
    out: PathBuf,
}

fn cmd_bench(args: BenchArgs) -> Result<(), Failure> {
    if args.sizes.is_empty() || args.repeats == 0 {
        return Err(Failure::Usage("need at least one size and one repeat".to_string()));
    }
    for &n in &args.sizes {
        if n < args.landmarks {
            return Err(Failure::Usage(format!(
                "size {n} is smaller than --landmarks {}",
                args.landmarks
            )));
        }
    }
    eprintln!(
        "config: sizes={:?} dim={} landmarks={} pinv-iters={} repeats={} seed={}",
        args.sizes, args.dim, args.landmarks, args.pinv_iters, args.repeats, args.seed
    );

    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let mut csv = String::from("n,mode,millis\n");
    let mut ratios: Vec<(usize, f64, f64)> = Vec::new();
    for &n in &args.sizes {
        let data: Vec<f64> = (0..n * args.dim).map(|_| rng.random::<f64>() - 0.5).collect();
        let mut best = [f64::INFINITY; 2];
        for _ in 0..args.repeats {
            for (slot, mode) in [ModeArg::Exact, ModeArg::Nystrom].iter().enumerate() {
                let mut tape = Tape::new();
                let x = tape.constant_from(&[n, args.dim], data.clone())?;
                let started = Instant::now();
                match mode {
                    ModeArg::Exact => {
                        exact_self_attention(&mut tape, x, x, x)?;
                    }
                    ModeArg::Nystrom => {
                        nystrom_attention(&mut tape, x, x, x, args.landmarks, args.pinv_iters)?;
                    }
                }
                best[slot] = best[slot].min(started.elapsed().as_secs_f64() * 1e3);
            }
        }
        let _ = writeln!(csv, "{n},exact,{:.3}", best[0]);
        let _ = writeln!(csv, "{n},nystrom,{:.3}", best[1]);
        eprintln!("n={n}: exact {:.1} ms, nystrom {:.1} ms", best[0], best[1]);
        ratios.push((n, best[0], best[1]));
    }
    fs::write(&args.out, csv).map_err(|e| io_failure("write", &args.out, e))?;

    if let (Some(first), Some(last)) = (ratios.first(), ratios.last()) {
        if first.0 != last.0 {
            eprintln!(
                "growth t({})/t({}): exact {:.2}x, nystrom {:.2}x",
                last.0,
                first.0,
                last.1 / first.1,
                last.2 / first.2,
            );
        }
    }
    eprintln!("wrote {}", args.out.display());
    Ok(())
}

#[derive(Args)]
struct EntropyArgs {
    /// Random joint tables per variable count.
    #[arg(long, default_value_t = 1000)]
    trials: usize,
    /// Variable counts to sweep.
    #[arg(long, value_delimiter = ',', default_value = "2,3,4")]
    vars: Vec<usize>,
    #[arg(long, default_value_t = 1e-9)]
    tol: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn cmd_entropy_check(args: EntropyArgs) -> Result<(), Failure> {
    if args.trials == 0 {
        return Err(Failure::Usage("--trials must be at least 1".to_string()));
    }
    if args.vars.is_empty() || args.vars.iter().any(|&v| v == 0 || v > 12) {
        return Err(Failure::Usage(format!(
            "--vars must name variable counts in 1..=12, got {:?}",
            args.vars
        )));
    }
    if !(args.tol > 0.0) {
        return Err(Failure::Usage(format!("--tol must be positive, got {}", args.tol)));
    }
    eprintln!(
        "config: trials={} vars={:?} tol={} seed={}",
        args.trials, args.vars, args.tol, args.seed
    );

    let report = entropy_sweep(args.trials, &args.vars, args.seed)
        .map_err(|e| Failure::Runtime(e.to_string()))?;
    eprintln!(
        "checked {} joints and {} products: max subadditivity gap {:.3e}, \
         max chain gap {:.3e}, max product gap {:.3e}",
        report.joints_checked,
        report.products_checked,
        report.max_subadditivity_gap,
        report.max_chain_gap,
        report.max_product_gap,
    );
    if report.passes(args.tol) {
        eprintln!("all entropy properties hold within {}", args.tol);
        return Ok(());
    }

    let kinds = ["subadditivity", "chain identity", "product equality"];
    let gaps = [report.max_subadditivity_gap, report.max_chain_gap, report.max_product_gap];
    for ((kind, gap), table) in kinds.iter().zip(gaps).zip(&report.argmax_tables) {
        if gap > args.tol {
            eprintln!("{kind} violated by {gap:.3e}; offending table: {table:?}");
        }
    }
    Err(Failure::Runtime(format!(
        "entropy sweep failed at tolerance {}",
        args.tol
    )))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(args) => cmd_gen(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Attend(args) => cmd_attend(args),
        Command::Bench(args) => cmd_bench(args),
        Command::EntropyCheck(args) => cmd_entropy_check(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
