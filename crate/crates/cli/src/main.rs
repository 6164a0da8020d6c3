//! `prunesym`: fit expressions to CSV data, sample benchmark datasets and
//! run benchmark suites.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use prunesym::bench::{builtin_cases, find_case, run_suite, sample_dataset, SuiteReport};
use prunesym::data::{load_csv, save_csv, write_csv, DataError};
use prunesym::engine::{run, EngineConfig, EngineError, Mode, RunLogs};
use prunesym::trainer::TrainError;

#[derive(Parser)]
#[command(name = "prunesym", version, about = "Symbolic regression by pruning an operator network")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Clone, Default)]
struct Overrides {
    /// TOML file with engine settings (keys named after the config fields)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Hidden layers of the network
    #[arg(long)]
    layers: Option<usize>,
    /// Training epochs
    #[arg(long = "max-epoch")]
    max_epoch: Option<usize>,
    /// Beam width of the pruner
    #[arg(long)]
    beam: Option<usize>,
    /// Worker threads (default: available parallelism)
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Search for an expression fitting a CSV dataset (header x1,...,xd,y)
    Fit {
        csv: PathBuf,
        #[command(flatten)]
        common: Overrides,
        #[arg(long)]
        seed: Option<u64>,
        /// full, no_gd or rand_prune
        #[arg(long)]
        mode: Option<Mode>,
        /// Write the JSON report here instead of standard output
        #[arg(long)]
        out: Option<PathBuf>,
        /// Line-delimited JSON training log
        #[arg(long = "run-log")]
        run_log: Option<PathBuf>,
        /// Line-delimited JSON record of every pruning decision
        #[arg(long = "prune-trace")]
        prune_trace: Option<PathBuf>,
    },
    /// Write a sampled dataset of a built-in benchmark case as CSV
    Sample {
        case: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output CSV (standard output if omitted)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run benchmark suites (Koza, Korns, ODE, Livermore, AIFeynman2, AIFeynman3, all)
    Benchmark {
        #[arg(required = true)]
        suites: Vec<String>,
        #[command(flatten)]
        common: Overrides,
        /// Modes to compare, comma separated
        #[arg(long, value_delimiter = ',', default_value = "full")]
        mode: Vec<Mode>,
        /// First seed
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of seeds per case
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        /// JSON report path (an array when several suites are given)
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

struct Failure {
    code: u8,
    msg: String,
}

impl Failure {
    fn usage(msg: impl Into<String>) -> Self {
        Self { code: 1, msg: msg.into() }
    }
    fn data(msg: impl Into<String>) -> Self {
        Self { code: 2, msg: msg.into() }
    }
}

impl From<EngineError> for Failure {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::Config(_) => Failure::usage(e.to_string()),
            EngineError::Train(TrainError::NonFinite { .. }) => Failure { code: 3, msg: e.to_string() },
            EngineError::Train(TrainError::Io(_)) => Failure::data(e.to_string()),
            EngineError::Train(_) => Failure::usage(e.to_string()),
        }
    }
}

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        Failure::data(e.to_string())
    }
}

fn io_fail(path: &Path, e: std::io::Error) -> Failure {
    Failure::data(format!("{}: {e}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path).map(BufWriter::new).map_err(|e| io_fail(path, e))
}

fn load_config(o: &Overrides) -> Result<EngineConfig, Failure> {
    let mut cfg = match &o.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Failure::usage(format!("{}: {e}", p.display())))?;
            EngineConfig::from_toml(&text).map_err(|e| Failure::usage(format!("{}: {e}", p.display())))?
        }
        None => EngineConfig::default(),
    };
    if let Some(l) = o.layers {
        cfg.layers = l;
    }
    if let Some(m) = o.max_epoch {
        cfg.max_epoch = m;
    }
    if let Some(b) = o.beam {
        cfg.beam_size = b;
    }
    if let Some(j) = o.jobs {
        if j == 0 {
            return Err(Failure::usage("--jobs must be at least 1"));
        }
        // only fails if the pool already exists, which cannot happen here
        let _ = rayon::ThreadPoolBuilder::new().num_threads(j).build_global();
    }
    Ok(cfg)
}

fn write_json(out: Option<&Path>, value: &impl serde::Serialize) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    match out {
        Some(p) => {
            let mut f = create(p)?;
            writeln!(f, "{text}").and_then(|_| f.flush()).map_err(|e| io_fail(p, e))
        }
        None => stdout_write(|o| writeln!(o, "{text}")),
    }
}

/// Writes to standard output; a closed pipe ends the output quietly.
fn stdout_write(f: impl FnOnce(&mut dyn Write) -> std::io::Result<()>) -> Result<(), Failure> {
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    match f(&mut lock).and_then(|_| lock.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Failure::data(format!("stdout: {e}"))),
        _ => Ok(()),
    }
}

fn cmd_fit(
    csv: &Path,
    common: &Overrides,
    seed: Option<u64>,
    mode: Option<Mode>,
    out: Option<&Path>,
    run_log: Option<&Path>,
    prune_trace: Option<&Path>,
) -> Result<(), Failure> {
    let mut cfg = load_config(common)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(m) = mode {
        cfg.mode = m;
    }
    cfg.validate().map_err(|e| Failure::usage(e.to_string()))?;
    let data = load_csv(csv).map_err(|e| Failure::data(format!("{}: {e}", csv.display())))?;
    info!("fitting {} points of dimension {}", data.len(), data.dim());

    let mut log_file = run_log.map(create).transpose()?;
    let mut trace_file = prune_trace.map(create).transpose()?;
    let logs = RunLogs {
        run_log: log_file.as_mut().map(|f| f as &mut dyn Write),
        prune_trace: trace_file.as_mut().map(|f| f as &mut dyn Write),
    };
    let report = run(&data, &cfg, logs)?;
    for (f, p) in [(log_file, run_log), (trace_file, prune_trace)] {
        if let (Some(mut f), Some(p)) = (f, p) {
            f.flush().map_err(|e| io_fail(p, e))?;
        }
    }
    if out.is_some() {
        stdout_write(|o| {
            writeln!(o, "expression: {}", report.expression)?;
            writeln!(o, "mse:        {:e}", report.mse)?;
            writeln!(o, "complexity: {}", report.complexity)
        })?;
    }
    write_json(out, &report)
}

fn cmd_sample(case: &str, seed: u64, out: Option<&Path>) -> Result<(), Failure> {
    let case = find_case(case).map_err(|e| Failure::usage(e.to_string()))?;
    let data = sample_dataset(&case, seed).map_err(|e| Failure::data(e.to_string()))?;
    match out {
        Some(p) => save_csv(&data, p)?,
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            match write_csv(&mut lock, &data) {
                Err(DataError::Io(e)) if e.kind() == std::io::ErrorKind::BrokenPipe => {}
                r => r?,
            }
        }
    }
    Ok(())
}

fn print_summary(o: &mut dyn Write, rep: &SuiteReport) -> std::io::Result<()> {
    writeln!(o, "suite {} ({} seeds)", rep.suite, rep.seeds.len())?;
    for c in &rep.cases {
        writeln!(
            o,
            "  {:<16} {:<10} {:>9.3e}  {}/{}  {}",
            c.name,
            c.mode.to_string(),
            c.mse,
            c.successes,
            c.runs.len(),
            c.best_expression
        )?;
    }
    for s in &rep.summary {
        writeln!(
            o,
            "  mode {:<10} optimal {:>3}  successes {:>3}  votes {:>3}",
            s.mode.to_string(),
            s.optimal_count,
            s.success_count,
            s.votes
        )?;
    }
    Ok(())
}

fn cmd_benchmark(
    suites: &[String],
    common: &Overrides,
    modes: &[Mode],
    seed: u64,
    n_seeds: u64,
    out: Option<&Path>,
) -> Result<(), Failure> {
    let cfg = load_config(common)?;
    cfg.validate().map_err(|e| Failure::usage(e.to_string()))?;
    if n_seeds == 0 {
        return Err(Failure::usage("--seeds must be at least 1"));
    }
    let seeds: Vec<u64> = (seed..seed + n_seeds).collect();
    let mut reports = Vec::new();
    for suite in suites {
        let cases = builtin_cases(suite).map_err(|e| Failure::usage(e.to_string()))?;
        let rep = run_suite(suite, &cases, &cfg, modes, &seeds);
        stdout_write(|o| print_summary(o, &rep))?;
        reports.push(rep);
    }
    if let Some(p) = out {
        if reports.len() == 1 {
            write_json(Some(p), &reports[0])?;
        } else {
            write_json(Some(p), &reports)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("PRUNESYM_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.cmd {
        Command::Fit { csv, common, seed, mode, out, run_log, prune_trace } => {
            cmd_fit(csv, common, *seed, *mode, out.as_deref(), run_log.as_deref(), prune_trace.as_deref())
        }
        Command::Sample { case, seed, out } => cmd_sample(case, *seed, out.as_deref()),
        Command::Benchmark { suites, common, mode, seed, seeds, out } => {
            cmd_benchmark(suites, common, mode, *seed, *seeds, out.as_deref())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
