//! Command-line driver: `gen`, `train`, `ablate`, `sweep-eta`, `grad-check`.
//!
//! Exit codes: 0 success, 1 check failure, 2 configuration error,
//! 3 numeric failure.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::benchgen::{save_dataset, TaskSplit};
use crate::checkpoint::{save_checkpoint, Checkpoint};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::grad::{run_grad_check, GradFault};
use crate::nullspace::{check_eta, ProjectorFlags};
use crate::trainer::{
    run_task_sequence, run_task_sequence_observed, EpochRecord, FinalMetrics, RunObserver, TaskRecord, TrainConfig,
    TrainState,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

pub const DATASET_FILE: &str = "dataset.bin";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const ACCURACY_FILE: &str = "accuracy.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const ABLATION_FILE: &str = "ablation.csv";
pub const SWEEP_FILE: &str = "eta_sweep.csv";
pub const GRAD_CHECK_FILE: &str = "grad_check.csv";

#[derive(Debug, Parser)]
#[command(name = "ssmcl", version, about = "Null-space projected continual learning for selective SSMs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic benchmark and write it as a dataset file.
    Gen,
    /// Train on the task sequence; writes JSONL metrics, accuracy CSV and a checkpoint.
    Train,
    /// One run per projector subset listed under [ablate].
    Ablate,
    /// One run per eta; writes a CSV with one row per value.
    SweepEta {
        /// Comma-separated eta values, overriding [sweep].etas.
        #[arg(long, value_delimiter = ',')]
        etas: Option<Vec<f64>>,
    },
    /// Compare analytic gradients against central finite differences.
    GradCheck {
        #[arg(long, hide = true)]
        inject_sign_flip: bool,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Seq,
    Cl,
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Seed for both data generation and training.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// `seq` disables every projector; `cl` enables them.
    #[arg(long, global = true, value_enum)]
    pub mode: Option<Mode>,
    #[arg(long, global = true)]
    pub eta: Option<f64>,
    /// Comma-separated projectors to enable (h1_delta,h1_c,h2,h3,h_out, or all/none).
    #[arg(long, global = true, value_delimiter = ',')]
    pub flags: Option<Vec<String>>,
}

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Numeric(_) | Error::Convergence { .. } => EXIT_NUMERIC,
        _ => EXIT_CONFIG,
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cli: &Cli) -> Result<i32> {
    let cfg = effective_config(&cli.common)?;
    let out = cli
        .common
        .out
        .clone()
        .or_else(|| cfg.output.dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    match &cli.command {
        Command::Gen => cmd_gen(&cfg, &out).map(|_| EXIT_OK),
        Command::Train => cmd_train(&cfg, &out).map(|_| EXIT_OK),
        Command::Ablate => cmd_ablate(&cfg, &out).map(|_| EXIT_OK),
        Command::SweepEta { etas } => {
            let etas = etas.clone().unwrap_or_else(|| cfg.sweep.etas.clone());
            cmd_sweep_eta(&cfg, &etas, &out).map(|_| EXIT_OK)
        }
        Command::GradCheck { inject_sign_flip } => {
            let fault = if *inject_sign_flip { GradFault::SignFlip } else { GradFault::None };
            let out = cli.common.out.as_deref().or(cfg.output.dir.as_deref());
            let report = cmd_grad_check(&cfg, fault, out)?;
            Ok(if report.passed { EXIT_OK } else { EXIT_CHECK_FAILED })
        }
    }
}

/// Config file plus command-line overrides.
pub fn effective_config(args: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.set_seed(s);
    }
    if let Some(eta) = args.eta {
        check_eta(eta)?;
        cfg.train.eta = eta;
    }
    if let Some(names) = &args.flags {
        cfg.train.flags = ProjectorFlags::from_names(names)?;
    }
    match args.mode {
        Some(Mode::Seq) => cfg.train.flags = ProjectorFlags::none(),
        Some(Mode::Cl) if !cfg.train.flags.any() => cfg.train.flags = ProjectorFlags::all(),
        _ => {}
    }
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)
        .map_err(|e| Error::config(format!("cannot create output directory {}: {e}", dir.display())))
}

fn prepared(cfg: &RunConfig) -> Result<(Vec<TaskSplit>, TrainConfig)> {
    let tasks = cfg.tasks()?;
    let d_raw = tasks
        .iter()
        .map(|t| t.train.d_raw())
        .find(|&d| d > 0)
        .ok_or_else(|| Error::config("dataset has no training samples"))?;
    let train = cfg.train_config(d_raw)?;
    Ok((tasks, train))
}

pub fn cmd_gen(cfg: &RunConfig, out: &Path) -> Result<PathBuf> {
    let tasks = crate::benchgen::generate(&cfg.bench)?;
    create_dir(out)?;
    let path = out.join(DATASET_FILE);
    save_dataset(&path, &tasks)?;
    Ok(path)
}

#[derive(serde::Serialize)]
struct EpochLine<'a> {
    kind: &'static str,
    mode: &'a str,
    #[serde(flatten)]
    rec: &'a EpochRecord,
}

#[derive(serde::Serialize)]
struct TaskLine<'a> {
    kind: &'static str,
    mode: &'a str,
    #[serde(flatten)]
    rec: &'a TaskRecord,
}

struct FileObserver {
    mode: &'static str,
    jsonl: BufWriter<File>,
    csv_path: PathBuf,
    ckpt_path: PathBuf,
    acc_rows: Vec<Vec<f64>>,
}

impl FileObserver {
    fn line<T: serde::Serialize>(&mut self, v: &T) -> Result<()> {
        let s = serde_json::to_string(v).map_err(|e| Error::Numeric(format!("cannot encode record: {e}")))?;
        writeln!(self.jsonl, "{s}")?;
        Ok(())
    }
}

impl RunObserver for FileObserver {
    fn on_epoch(&mut self, rec: &EpochRecord) -> Result<()> {
        let mode = self.mode;
        self.line(&EpochLine { kind: "epoch", mode, rec })
    }

    fn on_task_end(&mut self, rec: &TaskRecord, state: &TrainState) -> Result<()> {
        let mode = self.mode;
        self.line(&TaskLine { kind: "task", mode, rec })?;
        self.jsonl.flush()?;
        self.acc_rows.push(rec.accuracies.clone());
        let acc = crate::trainer::AccuracyMatrix::from_rows(self.acc_rows.clone())?;
        std::fs::write(&self.csv_path, acc.to_csv())?;
        save_checkpoint(&self.ckpt_path, &Checkpoint::from_state(state))
    }
}

/// Trains and writes `metrics.jsonl`, `accuracy.csv` and `checkpoint.bin`.
/// On a numeric failure the checkpoint of the last completed task stays.
pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<FinalMetrics> {
    let (tasks, train) = prepared(cfg)?;
    create_dir(out)?;
    let ckpt_path = out.join(CHECKPOINT_FILE);
    if ckpt_path.exists() {
        std::fs::remove_file(&ckpt_path)?;
    }
    let mut obs = FileObserver {
        mode: train.mode_tag(),
        jsonl: BufWriter::new(File::create(out.join(METRICS_FILE))?),
        csv_path: out.join(ACCURACY_FILE),
        ckpt_path,
        acc_rows: Vec::new(),
    };
    let result = run_task_sequence_observed(&train, &tasks, &mut obs);
    obs.jsonl.flush()?;
    Ok(result?.metrics)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Runs `configs` with at most `SSMCL_THREADS` in flight; results keep input order.
pub fn run_many(configs: &[TrainConfig], tasks: &[TaskSplit]) -> Result<Vec<FinalMetrics>> {
    let threads = std::env::var("SSMCL_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let mut out = Vec::with_capacity(configs.len());
    for chunk in configs.chunks(threads.max(1)) {
        let results: Vec<Result<FinalMetrics>> = std::thread::scope(|s| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|c| s.spawn(move || run_task_sequence(c, tasks).map(|r| r.metrics)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(Error::Numeric("training thread panicked".into()))))
                .collect()
        });
        for r in results {
            out.push(r?);
        }
    }
    Ok(out)
}

/// One row per projector subset, in config order.
pub fn cmd_ablate(cfg: &RunConfig, out: &Path) -> Result<Vec<FinalMetrics>> {
    let subsets = cfg.ablation_flags()?;
    let (tasks, base) = prepared(cfg)?;
    let configs: Vec<TrainConfig> = subsets
        .iter()
        .map(|&flags| {
            let c = TrainConfig { flags, ..base };
            c.validate().map(|_| c)
        })
        .collect::<Result<_>>()?;
    let metrics = run_many(&configs, &tasks)?;
    create_dir(out)?;
    let mut csv = String::from("subset,mode,h1_delta,h1_c,h2,h3,h_out,avg_accuracy,avg_forgetting\n");
    for (flags, m) in subsets.iter().zip(&metrics) {
        let names = flags.names();
        let label = if names.is_empty() { "none".to_string() } else { names.join("+") };
        let bits: Vec<String> = flags.as_array().iter().map(|&b| u8::from(b).to_string()).collect();
        let mode = if flags.any() { "cl" } else { "seq" };
        csv.push_str(&format!(
            "{label},{mode},{},{},{}\n",
            bits.join(","),
            m.avg_accuracy,
            fmt_opt(m.avg_forgetting)
        ));
    }
    std::fs::write(out.join(ABLATION_FILE), csv)?;
    Ok(metrics)
}

/// One row per eta, in input order.
pub fn cmd_sweep_eta(cfg: &RunConfig, etas: &[f64], out: &Path) -> Result<Vec<FinalMetrics>> {
    if etas.is_empty() {
        return Err(Error::config("eta list is empty"));
    }
    for &e in etas {
        check_eta(e)?;
    }
    let (tasks, base) = prepared(cfg)?;
    let configs: Vec<TrainConfig> = etas.iter().map(|&eta| TrainConfig { eta, ..base }).collect();
    let metrics = run_many(&configs, &tasks)?;
    create_dir(out)?;
    let mut csv = String::from("eta,avg_accuracy,avg_forgetting\n");
    for (eta, m) in etas.iter().zip(&metrics) {
        csv.push_str(&format!("{eta},{},{}\n", m.avg_accuracy, fmt_opt(m.avg_forgetting)));
    }
    std::fs::write(out.join(SWEEP_FILE), csv)?;
    Ok(metrics)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub passed: bool,
    pub max_rel_error: f64,
    pub worst: String,
    pub rows: Vec<(u64, f64, String)>,
}

/// Prints one line per seed and a verdict; optionally writes a CSV.
pub fn cmd_grad_check(cfg: &RunConfig, fault: GradFault, out: Option<&Path>) -> Result<GradCheckReport> {
    let gc = &cfg.grad_check;
    let mut rows = Vec::new();
    for case in gc.cases()? {
        let o = run_grad_check(&case, gc.step, fault)?;
        println!("seed {}: max relative error {:.3e} ({})", o.seed, o.max_rel_error, o.worst);
        rows.push((o.seed, o.max_rel_error, o.worst));
    }
    let (max_rel_error, worst) = rows
        .iter()
        .fold((0.0f64, String::new()), |acc, r| if r.1 >= acc.0 { (r.1, r.2.clone()) } else { acc });
    let passed = max_rel_error.is_finite() && max_rel_error <= gc.tolerance;
    if passed {
        println!("PASS: max relative error {max_rel_error:.3e} <= {:.1e}", gc.tolerance);
    } else {
        println!(
            "FAIL: max relative error {max_rel_error:.3e} > {:.1e}, worst offender {worst}",
            gc.tolerance
        );
    }
    if let Some(dir) = out {
        create_dir(dir)?;
        let mut csv = String::from("seed,max_rel_error,worst\n");
        for (s, e, w) in &rows {
            csv.push_str(&format!("{s},{e},{w}\n"));
        }
        std::fs::write(dir.join(GRAD_CHECK_FILE), csv)?;
    }
    Ok(GradCheckReport {
        passed,
        max_rel_error,
        worst,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn common() -> CommonArgs {
        CommonArgs {
            config: None,
            out: None,
            seed: None,
            mode: None,
            eta: None,
            flags: None,
        }
    }

    #[test]
    fn overrides_apply() {
        let args = CommonArgs {
            seed: Some(7),
            eta: Some(0.5),
            flags: Some(vec!["h1_delta".into(), "h_out".into()]),
            ..common()
        };
        let cfg = effective_config(&args).unwrap();
        assert_eq!((cfg.train.seed, cfg.bench.seed, cfg.train.eta), (7, 7, 0.5));
        assert_eq!(cfg.train.flags.names(), vec!["h1_delta", "h_out"]);

        let cfg = effective_config(&CommonArgs { mode: Some(Mode::Seq), ..common() }).unwrap();
        assert!(!cfg.train.flags.any());
        let cfg = effective_config(&CommonArgs {
            mode: Some(Mode::Cl),
            flags: Some(vec!["none".into()]),
            ..common()
        })
        .unwrap();
        assert_eq!(cfg.train.flags, ProjectorFlags::all());
    }

    #[test]
    fn bad_overrides_are_config_errors() {
        let e = effective_config(&CommonArgs { eta: Some(1.5), ..common() }).unwrap_err();
        assert_eq!(exit_code(&e), EXIT_CONFIG);
        let e = effective_config(&CommonArgs { flags: Some(vec!["h9".into()]), ..common() }).unwrap_err();
        assert_eq!(exit_code(&e), EXIT_CONFIG);
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Numeric("x".into())), EXIT_NUMERIC);
        assert_eq!(exit_code(&Error::Config("x".into())), EXIT_CONFIG);
        assert_eq!(run(["ssmcl", "no-such-command"]), EXIT_CONFIG);
        assert_eq!(run(["ssmcl", "sweep-eta", "--etas", "0.5,2"]), EXIT_CONFIG);
    }
}
