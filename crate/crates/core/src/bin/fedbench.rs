use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use fedbench::bench::{
    self, read_lines, render_summary, run_baseline_record, run_campaign, run_experiment, run_sweep, summary_rows,
    AttackCampaignConfig, BenchError, ConfigError, ExperimentConfig, RecordLine,
};
use fedbench::metrics::write_csv;
use fedbench::protocol::DurationMode;

#[derive(Parser)]
#[command(name = "fedbench", version, about = "Federated learning benchmark simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// JSON-lines output; defaults to the config's `output`, else stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config's durations mode.
    #[arg(long)]
    durations: Option<DurationMode>,
}

#[derive(Subcommand)]
enum Command {
    /// One federated run.
    Run(Common),
    /// Every cell of the config's sweep grid; cells already in the output are skipped.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Worker threads (default: logical cores).
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Gradient-inversion attack campaign.
    Attack {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        jobs: Option<usize>,
        /// Write truth and reconstruction images as PGM next to the output.
        #[arg(long)]
        dump_images: bool,
    },
    /// LocalAcc and CentralAcc only.
    Baselines(Common),
    /// Renders JSON-lines records as CSV plus a summary table.
    Report {
        input: PathBuf,
        /// CSV destination; defaults to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Accuracy-loss tolerance of the summary's selection rule.
        #[arg(long, default_value_t = 0.01)]
        delta: f64,
    },
}

fn seed_override() -> Result<Option<u64>, ConfigError> {
    match std::env::var("FEDBENCH_SEED") {
        Ok(v) => v.trim().parse().map(Some).map_err(|_| ConfigError {
            path: "FEDBENCH_SEED".into(),
            message: format!("`{v}` is not an unsigned integer"),
        }),
        Err(_) => Ok(None),
    }
}

fn experiment(common: &Common) -> Result<(ExperimentConfig, Option<PathBuf>), ConfigError> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = seed_override()? {
        cfg = cfg.with_seed(seed);
    }
    if let Some(d) = common.durations {
        cfg.durations = d;
    }
    if let Some(out) = &common.out {
        cfg.output = Some(out.clone());
    }
    let out = cfg.output.clone();
    Ok((cfg.resolve(Path::new("."))?, out))
}

fn emit(out: Option<&Path>, line: &RecordLine) -> Result<()> {
    match out {
        Some(path) => bench::append_line(path, line)?,
        None => println!("{}", serde_json::to_string(line)?),
    }
    Ok(())
}

fn jobs(n: Option<usize>) -> usize {
    n.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(common) => {
            let (cfg, out) = experiment(&common)?;
            let rec = run_experiment(&cfg, "")?;
            if let Some(r) = &rec.record {
                eprintln!(
                    "{} FLAcc={:.4} LocalAcc={} CentralAcc={} CommRound={} TimeAll={}",
                    r.strategy,
                    r.fl_acc,
                    r.local_acc.map_or("-".into(), |v| format!("{v:.4}")),
                    r.central_acc.map_or("-".into(), |v| format!("{v:.4}")),
                    r.comm_round,
                    r.time_all_hms
                );
            }
            emit(out.as_deref(), &RecordLine::Run(rec))
        }
        Command::Sweep { common, jobs: j } => {
            let (cfg, out) = experiment(&common)?;
            if cfg.sweep.is_none() {
                bail!(BenchError::Config(ConfigError {
                    path: "sweep".into(),
                    message: "the config has no sweep table".into(),
                }));
            }
            let out = out.context("sweeps need --out or an `output` path to resume from")?;
            let delta = cfg.sweep.as_ref().map_or(0.01, |s| s.delta);
            let outcome = run_sweep(&cfg, &out, jobs(j), |total, done| {
                eprintln!("sweep: {total} cells, {done} already recorded, {} to run", total - done);
            })?;
            let failed = outcome.all_records.iter().filter(|r| r.record.is_none()).count();
            eprintln!("sweep: {} new records, {failed} failed cells", outcome.new_records.len());
            print!("{}", render_summary(&summary_rows(&outcome.all_records), delta));
            Ok(())
        }
        Command::Attack {
            common,
            jobs: j,
            dump_images,
        } => {
            let mut cfg = AttackCampaignConfig::load(&common.config)?;
            if let Some(seed) = seed_override()? {
                cfg.seed = seed;
            }
            if common.durations.is_some() {
                eprintln!("attack: --durations has no effect on attacks");
            }
            let out = common.out.clone().or(cfg.output.clone());
            let dump_dir = dump_images.then(|| match &out {
                Some(p) => p.with_extension("images"),
                None => PathBuf::from("attack-images"),
            });
            let to_stdout = out.is_none();
            let outcome = run_campaign(&cfg, out.as_deref(), jobs(j), dump_dir.as_deref(), |rec| {
                eprintln!("{}", rec.summary);
                if to_stdout {
                    let line = serde_json::to_string(&RecordLine::Attack(rec.clone())).expect("records serialize");
                    let mut stdout = std::io::stdout().lock();
                    let _ = writeln!(stdout, "{line}");
                }
            })?;
            let failed = outcome.records.iter().filter(|r| r.failed).count();
            eprintln!("attack: {} cells, {failed} flagged failed", outcome.records.len());
            Ok(())
        }
        Command::Baselines(common) => {
            let (cfg, out) = experiment(&common)?;
            let rec = run_baseline_record(&cfg)?;
            eprintln!("LocalAcc={:.4} CentralAcc={:.4}", rec.local_acc, rec.central_acc);
            emit(out.as_deref(), &RecordLine::Baselines(rec))
        }
        Command::Report { input, out, delta } => {
            let lines = read_lines(&input)?;
            if lines.is_empty() {
                bail!("{} holds no records", input.display());
            }
            let mut runs = Vec::new();
            for line in lines {
                match line {
                    RecordLine::Run(r) => runs.push(r),
                    RecordLine::Attack(a) => println!("{}", a.summary),
                    RecordLine::Baselines(b) => {
                        println!("baselines LocalAcc={:.4} CentralAcc={:.4}", b.local_acc, b.central_acc)
                    }
                }
            }
            if runs.is_empty() {
                return Ok(());
            }
            let records: Vec<_> = runs.iter().filter_map(|r| r.record.clone()).collect();
            match &out {
                Some(path) => {
                    let f = std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
                    write_csv(f, &records)?;
                    print!("{}", render_summary(&summary_rows(&runs), delta));
                }
                None => write_csv(std::io::stdout().lock(), &records)?,
            }
            Ok(())
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if let Some(b) = err.downcast_ref::<BenchError>() {
        return b.exit_code() as u8;
    }
    if err.downcast_ref::<ConfigError>().is_some() {
        return 2;
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
