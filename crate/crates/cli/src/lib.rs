//! The `fewshot` command-line tool. [`run`] parses arguments, executes one
//! subcommand and returns the process exit code: 0 on success, 1 on usage
//! or configuration errors, 2 on runtime or numerical failures.

pub mod config;

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand};
use fewshot::data::{
    fc100_split, load_checkpoint, load_cifar100, save_checkpoint, split_manifest, synth_dataset, write_atomic,
    CifarOptions, DatasetSplit, Normalization, FC100_TRAIN,
};
use fewshot::metric::scaling::{limit_relative_error, nearest_gap, random_lemma_instance, LemmaInstanceConfig, LimitSide};
use fewshot::model::{ten_report_csv, FewShotModel};
use fewshot::training::{evaluate, sweep_alpha, sweep_alpha_fixed, train, EvalResult, SweepTable};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use config::{ConfigError, DataSource, RunConfig, SweepMode};

/// Environment variable that overrides `[data] dir`.
pub const DATA_DIR_ENV: &str = "FEWSHOT_DATA_DIR";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Engine(#[from] fewshot::Error),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) | CliError::Engine(fewshot::Error::InvalidConfig(_)) => 1,
            CliError::Engine(_) | CliError::Failed(_) => 2,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "fewshot", version, about = "Few-shot metric learning: training, evaluation and diagnostics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model and write metrics.csv, model.ckpt and config.cfg.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
        /// Data directory; overrides the environment and the config file.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Overrides `[train] seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint with the `[eval]` protocol.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to the configuration stored in the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        split: Option<String>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare scaled gradients against their small- and large-α limits.
    VerifyLemma {
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "lemma_report.csv")]
        out: PathBuf,
    },
    /// Validation accuracy across a grid of fixed α values.
    SweepAlpha {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated α values; overrides `[sweep] grid`.
        #[arg(long)]
        grid: Option<String>,
        /// `train` or `fixed`; overrides `[sweep] mode`.
        #[arg(long)]
        mode: Option<String>,
        /// Trained model for `fixed` mode.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "sweep.csv")]
        out: PathBuf,
    },
    /// Write the FC100 split manifest for a CIFAR-100 directory.
    SplitFc100 {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "fc100_manifest.csv")]
        out: PathBuf,
    },
    /// Per-layer |γ₀| and |β₀| of a checkpoint's task embedding network.
    ReportTen {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "ten_report.csv")]
        out: PathBuf,
    },
}

/// Runs the tool on `argv` (program name first) and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("fewshot: error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train { config, out_dir, data, seed } => cmd_train(config.as_deref(), &out_dir, data.as_deref(), seed),
        Command::Eval { checkpoint, config, split, data, out } => {
            cmd_eval(&checkpoint, config.as_deref(), split.as_deref(), data.as_deref(), out.as_deref())
        }
        Command::VerifyLemma { trials, seed, out } => cmd_verify_lemma(trials, seed, &out),
        Command::SweepAlpha { config, grid, mode, checkpoint, data, out } => {
            cmd_sweep(config.as_deref(), grid.as_deref(), mode.as_deref(), checkpoint.as_deref(), data.as_deref(), &out)
        }
        Command::SplitFc100 { data, out } => cmd_split(data.as_deref(), &out),
        Command::ReportTen { checkpoint, out } => cmd_report_ten(&checkpoint, &out),
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => {
            if !p.is_file() {
                return Err(CliError::Usage(format!("config file {} does not exist", p.display())));
            }
            Ok(RunConfig::load(p)?)
        }
        None => Ok(RunConfig::default()),
    }
}

fn echo(title: &str, text: &str) {
    println!("# {title}");
    print!("{text}");
    println!();
}

fn data_dir(flag: Option<&Path>, configured: Option<&Path>) -> Option<PathBuf> {
    flag.map(Path::to_path_buf)
        .or_else(|| std::env::var_os(DATA_DIR_ENV).filter(|v| !v.is_empty()).map(PathBuf::from))
        .or_else(|| configured.map(Path::to_path_buf))
}

struct Loaded {
    train: DatasetSplit,
    val: DatasetSplit,
    test: DatasetSplit,
    normalization: Option<Normalization>,
    input_shape: Vec<usize>,
}

impl Loaded {
    fn split(&self, name: &str) -> Result<&DatasetSplit> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => Err(CliError::Usage(format!("unknown split `{other}` (expected train, val or test)"))),
        }
    }
}

/// Loads the configured data. FC100 images are standardized with `recorded`
/// when given, otherwise with statistics of the training superclasses.
fn load_data(cfg: &RunConfig, flag: Option<&Path>, recorded: Option<&Normalization>) -> Result<Loaded> {
    match cfg.data.source {
        DataSource::Synth => {
            let d = synth_dataset(&cfg.synth)?;
            Ok(Loaded { train: d.train, val: d.val, test: d.test, normalization: None, input_shape: vec![cfg.synth.input_dim] })
        }
        DataSource::Fc100 => {
            let dir = data_dir(flag, cfg.data.dir.as_deref()).ok_or_else(|| {
                CliError::Usage(format!("FC100 needs a data directory: pass --data, set {DATA_DIR_ENV} or set [data] dir"))
            })?;
            let mut store = load_cifar100(&dir, CifarOptions { side: cfg.data.side, normalize: false })?;
            let norm = match recorded {
                Some(n) => Some(n.clone()),
                None if cfg.data.normalize => {
                    let train: Vec<usize> = store
                        .classes()
                        .into_iter()
                        .filter(|&c| store.coarse_of(c).is_some_and(|k| FC100_TRAIN.contains(&k)))
                        .collect();
                    Some(store.fit_normalization(&train)?)
                }
                None => None,
            };
            if let Some(n) = &norm {
                store.apply_normalization(n.clone())?;
            }
            let shape = store.example_shape().to_vec();
            let s = fc100_split(&Arc::new(store))?;
            Ok(Loaded { train: s.train, val: s.val, test: s.test, normalization: norm, input_shape: shape })
        }
    }
}

/// Checkpoint metadata: the resolved configuration and the input
/// normalization, as JSON.
fn metadata(cfg: &RunConfig, norm: Option<&Normalization>) -> String {
    serde_json::json!({ "config": cfg.to_text(), "normalization": norm }).to_string()
}

fn parse_metadata(meta: &str) -> Result<(RunConfig, Option<Normalization>)> {
    let bad = |m: String| CliError::Failed(format!("checkpoint metadata: {m}"));
    let v: serde_json::Value = serde_json::from_str(meta).map_err(|e| bad(e.to_string()))?;
    let text = v.get("config").and_then(|c| c.as_str()).ok_or_else(|| bad("no stored configuration".into()))?;
    let cfg = RunConfig::parse(text).map_err(|e| bad(e.to_string()))?;
    let norm = match v.get("normalization") {
        None | Some(serde_json::Value::Null) => None,
        Some(n) => Some(serde_json::from_value(n.clone()).map_err(|e| bad(e.to_string()))?),
    };
    Ok((cfg, norm))
}

fn cmd_train(config: Option<&Path>, out_dir: &Path, data: Option<&Path>, seed: Option<u64>) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let text = cfg.to_text();
    echo("resolved configuration", &text);
    let d = load_data(&cfg, data, None)?;
    let mut model = FewShotModel::new(cfg.model_config(&d.input_shape, d.train.classes().len()))?;
    let tc = cfg.train_config();
    let report = train(&mut model, &tc, &d.train, &d.val)?;
    std::fs::create_dir_all(out_dir).map_err(|e| CliError::Failed(format!("{}: {e}", out_dir.display())))?;
    write_atomic(&out_dir.join("config.cfg"), text.as_bytes())?;
    write_atomic(&out_dir.join("metrics.csv"), report.log.to_csv().as_bytes())?;
    save_checkpoint(&model, &metadata(&cfg, d.normalization.as_ref()), &out_dir.join("model.ckpt"))?;
    println!(
        "trained {} steps ({} episodic, {} auxiliary); best validation accuracy {:.4} at step {}{}",
        report.log.rows.last().map_or(0, |r| r.t),
        report.episodic_steps,
        report.aux_steps,
        report.best_val_acc,
        report.best_t,
        if report.stopped_early { " (stopped early)" } else { "" }
    );
    println!("alpha = {}", model.alpha());
    Ok(())
}

fn eval_csv(split: &str, cfg: &RunConfig, r: &EvalResult) -> String {
    format!(
        "split,ways,shots,tasks,queries,accuracy,ci95\n{split},{},{},{},{},{},{}\n",
        cfg.ways,
        cfg.shots,
        r.per_task.len(),
        cfg.eval.queries,
        r.mean,
        r.ci95
    )
}

fn cmd_eval(checkpoint: &Path, config: Option<&Path>, split: Option<&str>, data: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let ck = load_checkpoint(checkpoint)?;
    let (stored, norm) = parse_metadata(&ck.metadata)?;
    let cfg = match config {
        Some(p) => load_config(Some(p))?,
        None => stored,
    };
    let split = split.unwrap_or(&cfg.eval.split).to_string();
    echo("resolved configuration", &cfg.to_text());
    let d = load_data(&cfg, data, norm.as_ref())?;
    let r = evaluate(&ck.model, d.split(&split)?, &cfg.eval_config(), &mut ChaCha8Rng::seed_from_u64(cfg.eval.seed))?;
    println!("{split} accuracy {:.4} ± {:.4} over {} tasks", r.mean, r.ci95, r.per_task.len());
    if let Some(p) = out {
        write_atomic(p, eval_csv(&split, &cfg, &r).as_bytes())?;
    }
    Ok(())
}

const SMALL_ALPHAS: [f64; 3] = [1e-2, 1e-3, 1e-4];
const LARGE_ALPHAS: [f64; 3] = [10.0, 100.0, 1000.0];
/// Minimum nearest/second-nearest distance gap for large-α instances.
const MIN_GAP: f64 = 0.1;
/// Tolerance on the relative error at the most extreme α of each side.
pub const LEMMA_TOLERANCE: f64 = 1e-3;

fn cmd_verify_lemma(trials: usize, seed: u64, out: &Path) -> Result<()> {
    if trials == 0 {
        return Err(CliError::Usage("--trials must be at least 1".into()));
    }
    echo("resolved configuration", &format!("trials = {trials}\nseed = {seed}\nout = {}\n", out.display()));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = LemmaInstanceConfig::default();
    let mut csv = String::from("trial,alpha,side,rel_error\n");
    let mut worst = [0.0f64; 2];
    for trial in 0..trials {
        let (model, ep) = random_lemma_instance(&cfg, &mut rng)?;
        for a in SMALL_ALPHAS {
            let e = limit_relative_error(&model, &ep, a, LimitSide::Small)?;
            csv.push_str(&format!("{trial},{a},small,{e}\n"));
            if a == SMALL_ALPHAS[2] {
                worst[0] = worst[0].max(e);
            }
        }
        // The large-α limit needs a clear nearest prototype for every query
        // and at least one misclassified query.
        let mut attempts = 0;
        let (model, ep) = loop {
            let inst = random_lemma_instance(&cfg, &mut rng)?;
            let (gap, wrong) = nearest_gap(&inst.0, &inst.1)?;
            if gap >= MIN_GAP && wrong > 0 {
                break inst;
            }
            attempts += 1;
            if attempts >= 10_000 {
                return Err(CliError::Failed("no instance with a clear nearest prototype after 10000 draws".into()));
            }
        };
        for a in LARGE_ALPHAS {
            let e = limit_relative_error(&model, &ep, a, LimitSide::Large)?;
            csv.push_str(&format!("{trial},{a},large,{e}\n"));
            if a == LARGE_ALPHAS[2] {
                worst[1] = worst[1].max(e);
            }
        }
    }
    write_atomic(out, csv.as_bytes())?;
    println!("max relative error: small side {:.3e} at α = 1e-4, large side {:.3e} at α = 1000", worst[0], worst[1]);
    if worst.iter().all(|&w| w < LEMMA_TOLERANCE) {
        Ok(())
    } else {
        Err(CliError::Failed(format!("limit errors exceed {LEMMA_TOLERANCE:e}")))
    }
}

fn parse_grid(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|v| match v.trim().parse::<f64>() {
            Ok(a) if a.is_finite() && a > 0.0 => Ok(a),
            _ => Err(CliError::Usage(format!("--grid value `{}` is not a positive number", v.trim()))),
        })
        .collect()
}

fn print_sweep(t: &SweepTable) {
    for r in &t.rows {
        println!("alpha {:>10}  accuracy {:.4} ± {:.4}", r.alpha, r.acc, r.ci95);
    }
    if let Some(b) = t.best() {
        println!("best alpha = {}", b.alpha);
    }
}

fn cmd_sweep(
    config: Option<&Path>,
    grid: Option<&str>,
    mode: Option<&str>,
    checkpoint: Option<&Path>,
    data: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(g) = grid {
        cfg.sweep.grid = parse_grid(g)?;
    }
    match mode {
        Some("train") => cfg.sweep.mode = SweepMode::Train,
        Some("fixed") => cfg.sweep.mode = SweepMode::Fixed,
        Some(m) => return Err(CliError::Usage(format!("--mode must be train or fixed, got `{m}`"))),
        None => {}
    }
    echo("resolved configuration", &cfg.to_text());
    let table = match cfg.sweep.mode {
        SweepMode::Train => {
            let d = load_data(&cfg, data, None)?;
            let base = cfg.model_config(&d.input_shape, d.train.classes().len());
            sweep_alpha(&base, &cfg.train_config(), &d.train, &d.val, &cfg.eval_config(), &cfg.sweep.grid)?
        }
        SweepMode::Fixed => {
            let path = checkpoint.ok_or_else(|| CliError::Usage("fixed mode needs --checkpoint".into()))?;
            let ck = load_checkpoint(path)?;
            let (_, norm) = parse_metadata(&ck.metadata)?;
            let d = load_data(&cfg, data, norm.as_ref())?;
            sweep_alpha_fixed(&ck.model, &d.val, &cfg.eval_config(), &cfg.sweep.grid, cfg.eval.seed)?
        }
    };
    write_atomic(out, table.to_csv().as_bytes())?;
    print_sweep(&table);
    Ok(())
}

fn cmd_split(data: Option<&Path>, out: &Path) -> Result<()> {
    let dir = data_dir(data, None)
        .ok_or_else(|| CliError::Usage(format!("split-fc100 needs --data or {DATA_DIR_ENV}")))?;
    echo("resolved configuration", &format!("data = {}\nout = {}\n", dir.display(), out.display()));
    let store = load_cifar100(&dir, CifarOptions { side: 32, normalize: false })?;
    let s = fc100_split(&Arc::new(store))?;
    write_atomic(out, split_manifest(&s.all()).as_bytes())?;
    println!("train {} / val {} / test {} classes", s.train.classes().len(), s.val.classes().len(), s.test.classes().len());
    Ok(())
}

fn cmd_report_ten(checkpoint: &Path, out: &Path) -> Result<()> {
    echo("resolved configuration", &format!("checkpoint = {}\nout = {}\n", checkpoint.display(), out.display()));
    let ck = load_checkpoint(checkpoint)?;
    let report = ck.model.ten_magnitude_report()?;
    let csv = ten_report_csv(&report);
    write_atomic(out, csv.as_bytes())?;
    print!("{csv}");
    Ok(())
}
