use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgGroup, Args, Parser, Subcommand};
use pfa_core::config::RunConfig;
use pfa_core::data::{self, Sample};
use pfa_core::gradcheck::{self, CheckReport};
use pfa_core::loss::laplace_edge_map;
use pfa_core::metrics::{self, MetricsReport};
use pfa_core::model::{build_model, predict, ModelConfig, ModelParams};
use pfa_core::train::{self, predict_samples};
use pfa_core::{checkpoint, Tensor};

const EXIT_USAGE: u8 = 1;
const EXIT_RUNTIME: u8 = 2;

#[derive(Parser)]
#[command(
    name = "pfa",
    version,
    about = "Pyramid feature attention saliency network"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic saliency dataset.
    Synth(SynthArgs),
    /// Train a model from a config file and write its checkpoint.
    Train(TrainArgs),
    /// Score predictions against ground-truth masks.
    Eval(EvalArgs),
    /// Write the saliency map and its boundary map for one image.
    Predict(PredictArgs),
    /// Run finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    count: usize,
    /// Side length, or HxW.
    #[arg(long, default_value = "64", value_parser = parse_size)]
    size: (usize, usize),
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Logs go next to it as train_log.csv and epoch_log.csv.
    #[arg(long)]
    out_checkpoint: PathBuf,
}

#[derive(Args)]
#[command(group(ArgGroup::new("source").required(true).args(["checkpoint", "pred_dir"])))]
struct EvalArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Precomputed maps named <id>.pgm instead of running a model.
    #[arg(long)]
    pred_dir: Option<PathBuf>,
    #[arg(long)]
    data_dir: PathBuf,
    /// Curve CSV, one row per threshold.
    #[arg(long)]
    out_csv: PathBuf,
    /// Defaults to <out-csv stem>_summary.csv.
    #[arg(long)]
    summary_csv: Option<PathBuf>,
    /// Model layout of the checkpoint; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    out_map: PathBuf,
    #[arg(long)]
    out_edge: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
#[command(group(ArgGroup::new("target").required(true).args(["op", "end_to_end", "all"])))]
struct GradcheckArgs {
    /// First seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of consecutive seeds.
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u64).range(1..))]
    seeds: u64,
    /// One operator by name.
    #[arg(long)]
    op: Option<String>,
    /// The whole tiny network under the total loss.
    #[arg(long)]
    end_to_end: bool,
    /// Every operator, then the end-to-end check.
    #[arg(long)]
    all: bool,
}

/// Error tagged with the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

type CmdResult<T = ()> = Result<T, Failure>;

trait Classify<T> {
    fn usage(self) -> CmdResult<T>;
    fn runtime(self) -> CmdResult<T>;
}

impl<T, E: std::fmt::Display> Classify<T> for Result<T, E> {
    fn usage(self) -> CmdResult<T> {
        self.map_err(|e| Failure {
            code: EXIT_USAGE,
            message: e.to_string(),
        })
    }
    fn runtime(self) -> CmdResult<T> {
        self.map_err(|e| Failure {
            code: EXIT_RUNTIME,
            message: e.to_string(),
        })
    }
}

fn usage_error(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_USAGE,
        message: message.into(),
    }
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    match s.split_once(['x', 'X']) {
        Some((h, w)) => Ok((parse(h)?, parse(w)?)),
        None => parse(s).map(|n| (n, n)),
    }
}

/// Worker cap from `PFA_THREADS`, 1 when unset.
fn worker_count() -> CmdResult<usize> {
    match std::env::var("PFA_THREADS") {
        Err(std::env::VarError::NotPresent) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(usage_error(format!(
                "PFA_THREADS must be a positive integer, got {v:?}"
            ))),
        },
        Err(e) => Err(usage_error(format!("PFA_THREADS: {e}"))),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Predict(a) => predict_cmd(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn synth(a: SynthArgs) -> CmdResult {
    if a.count == 0 {
        return Err(usage_error("--count must be at least 1"));
    }
    let samples = data::synth_dataset(a.seed, a.count, a.size).usage()?;
    data::save_dataset(&a.out_dir, &samples).runtime()?;
    println!("wrote {} samples to {}", a.count, a.out_dir.display());
    Ok(())
}

fn load_config(path: Option<&Path>) -> CmdResult<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p).usage(),
        None => Ok(RunConfig::default()),
    }
}

fn create(path: &Path) -> CmdResult<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)
            .map_err(|e| format!("creating {}: {e}", dir.display()))
            .runtime()?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| format!("creating {}: {e}", path.display()))
        .runtime()
}

fn write_with(
    path: &Path,
    f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
) -> CmdResult {
    let mut out = create(path)?;
    f(&mut out)
        .and_then(|_| out.flush())
        .map_err(|e| format!("writing {}: {e}", path.display()))
        .runtime()
}

fn train_cmd(a: TrainArgs) -> CmdResult {
    let cfg = load_config(Some(&a.config))?;
    let train_dir = cfg
        .train_dir
        .as_ref()
        .ok_or_else(|| usage_error(format!("{}: train_dir is not set", a.config.display())))?;
    let train_set = data::load_dataset(train_dir).runtime()?;
    let val_set = match &cfg.val_dir {
        Some(d) => data::load_dataset(d).runtime()?,
        None => Vec::new(),
    };
    let (params, log) = train::train(&cfg.model, &cfg.train, &train_set, &val_set).runtime()?;

    let dir = a
        .out_checkpoint
        .parent()
        .filter(|d| !d.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)
        .map_err(|e| format!("creating {}: {e}", dir.display()))
        .runtime()?;
    checkpoint::save(&a.out_checkpoint, &params).runtime()?;
    write_with(&dir.join("train_log.csv"), |w| log.write_csv(w))?;
    write_with(&dir.join("epoch_log.csv"), |w| log.write_epoch_csv(w))?;
    if let Some(last) = log.steps.last() {
        println!("final loss {:.6} after {} steps", last.loss, last.step);
    }
    println!("wrote {}", a.out_checkpoint.display());
    Ok(())
}

/// Checkpoint parameters after checking them against the configured layout.
fn load_params(path: &Path, model: &ModelConfig) -> CmdResult<ModelParams> {
    let params = checkpoint::load(path).runtime()?;
    let expected = build_model(model, 0).usage()?;
    params.check_layout(&expected).runtime()?;
    Ok(params)
}

/// Model predictions in sample order, with samples split across workers.
fn predict_parallel(
    model: &ModelConfig,
    params: &ModelParams,
    samples: &[Sample],
    workers: usize,
) -> pfa_core::Result<Vec<Tensor>> {
    let one = |s: &[Sample]| -> pfa_core::Result<Vec<Tensor>> {
        // Images in a dataset may differ in size, so run them one at a time.
        s.chunks(1)
            .map(|c| predict_samples(model, params, c, 1).map(|mut v| v.remove(0)))
            .collect()
    };
    if workers <= 1 || samples.len() <= 1 {
        return one(samples);
    }
    let chunk = samples.len().div_ceil(workers);
    std::thread::scope(|scope| {
        let handles: Vec<_> = samples
            .chunks(chunk)
            .map(|c| scope.spawn(move || one(c)))
            .collect();
        let mut maps = Vec::with_capacity(samples.len());
        for h in handles {
            maps.extend(h.join().expect("prediction worker panicked")?);
        }
        Ok(maps)
    })
}

fn summary_path(out_csv: &Path) -> PathBuf {
    let stem = out_csv
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "metrics".into());
    out_csv.with_file_name(format!("{stem}_summary.csv"))
}

fn eval(a: EvalArgs) -> CmdResult {
    let workers = worker_count()?;
    let samples = data::load_dataset(&a.data_dir).runtime()?;
    let maps = match (&a.checkpoint, &a.pred_dir) {
        (Some(ckpt), _) => {
            let cfg = load_config(a.config.as_deref())?;
            let params = load_params(ckpt, &cfg.model)?;
            predict_parallel(&cfg.model, &params, &samples, workers).runtime()?
        }
        (None, Some(dir)) => samples
            .iter()
            .map(|s| data::load_gray(&dir.join(format!("{}.pgm", s.id))))
            .collect::<pfa_core::Result<Vec<_>>>()
            .runtime()?,
        (None, None) => unreachable!("clap requires one source"),
    };
    let pairs: Vec<(Tensor, Tensor)> = maps
        .into_iter()
        .zip(&samples)
        .map(|(p, s)| (p, s.mask.clone()))
        .collect();
    let report: MetricsReport = metrics::evaluate_dataset(&pairs).runtime()?;

    write_with(&a.out_csv, |w| metrics::write_curve_csv(&report, w))?;
    let summary = a
        .summary_csv
        .clone()
        .unwrap_or_else(|| summary_path(&a.out_csv));
    write_with(&summary, |w| metrics::write_summary_csv(&report, w))?;
    println!(
        "images {}  mae {:.6}  max_f {:.6}  adaptive_f {:.6}",
        report.n_images, report.mae, report.max_f, report.adaptive_f
    );
    Ok(())
}

fn predict_cmd(a: PredictArgs) -> CmdResult {
    let cfg = load_config(a.config.as_deref())?;
    let params = load_params(&a.checkpoint, &cfg.model)?;
    let image = data::load_image(&a.image).runtime()?;
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let batch = image.reshape(&[1, 3, h, w]).runtime()?;
    let pred = predict(&cfg.model, &params, &batch).runtime()?;
    let edge = laplace_edge_map(&pred.saliency).runtime()?;
    data::save_gray(&a.out_map, &pred.saliency).runtime()?;
    data::save_gray(&a.out_edge, &edge).runtime()?;
    println!("wrote {} and {}", a.out_map.display(), a.out_edge.display());
    Ok(())
}

fn print_report(r: &CheckReport) {
    println!(
        "{:<24} seeds {:>3}  max rel err {:.3e}  tol {:.0e}  checked {}  skipped {}  {}",
        r.name,
        r.seeds,
        r.max_rel_error,
        r.tolerance,
        r.checked,
        r.skipped,
        if r.passed() { "PASS" } else { "FAIL" }
    );
}

fn gradcheck_cmd(a: GradcheckArgs) -> CmdResult {
    let seeds = a.seeds as usize;
    let mut reports = Vec::new();
    let ops: Vec<&str> = match &a.op {
        Some(op) if !gradcheck::OPERATORS.contains(&op.as_str()) => {
            return Err(usage_error(format!(
                "unknown operator {op:?}; expected one of {}",
                gradcheck::OPERATORS.join(", ")
            )))
        }
        Some(op) => vec![op.as_str()],
        None if a.all => gradcheck::OPERATORS.to_vec(),
        None => Vec::new(),
    };
    for op in ops {
        let r = gradcheck::check_operator_seeds(op, a.seed, seeds).runtime()?;
        print_report(&r);
        reports.push(r);
    }
    if a.end_to_end || a.all {
        let r = gradcheck::check_end_to_end_seeds(a.seed, seeds).runtime()?;
        print_report(&r);
        reports.push(r);
    }
    let failed: Vec<&str> = reports
        .iter()
        .filter(|r| !r.passed())
        .map(|r| r.name.as_str())
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure {
            code: EXIT_RUNTIME,
            message: format!("gradient check failed: {}", failed.join(", ")),
        })
    }
}
