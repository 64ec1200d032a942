use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use measurenet::data::config::{parse_config, Experiment, ExperimentConfig};
use measurenet::diagnostics::write_diagnostics;
use measurenet::harness::{replay, run_cell, run_suite, summarize, summary_table, Model, SuiteOutcome, Task};
use measurenet::{ClassTag, EvalReport, Result};

#[derive(Parser)]
#[command(name = "measurenet", version, about = "Networks on empirical measures: training suites and diagnostics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Key = value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Results CSV; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Base seed (overrides the config).
    #[arg(long)]
    seed: Option<u64>,
    /// Desk-scale robust suite: 500 training sets, 5000 iterations.
    #[arg(long)]
    desk: bool,
    /// Worker threads (overrides the config).
    #[arg(long)]
    threads: Option<usize>,
    /// Print per-group mean and std to stderr.
    #[arg(long)]
    summary: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate one cell.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "S1")]
        class: String,
        #[arg(long)]
        target: Option<String>,
        /// Penalty weight; defaults to the config value or 0.
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed_index: u64,
        /// Write the trained network here.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Write the per-iteration objective here.
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Synthetic suite (or deepsets_compare when the config says so).
    Sweep {
        #[command(flatten)]
        common: Common,
    },
    /// Robust mean estimation suite with baselines.
    Robust {
        #[command(flatten)]
        common: Common,
    },
    /// Point-cloud digit classification.
    Mnist {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        images: Option<PathBuf>,
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        test_images: Option<PathBuf>,
        #[arg(long)]
        test_labels: Option<PathBuf>,
        /// Points per training cloud.
        #[arg(long)]
        max_points: Option<usize>,
        /// Training images used.
        #[arg(long)]
        subset: Option<usize>,
    },
    /// Continuity, duplication, softmax and concentration checks.
    Diagnose {
        #[command(flatten)]
        common: Common,
    },
    /// Recompute the rows of one run id.
    Replay {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        run_id: String,
    },
}

fn load(common: &Common, default: Experiment, allowed: &[Experiment]) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => parse_config(p)?,
        None => ExperimentConfig::defaults(default),
    };
    if !allowed.is_empty() && !allowed.contains(&cfg.experiment) {
        return Err(measurenet::Error::Usage(format!(
            "config describes `{}`, this command runs {}",
            cfg.experiment,
            allowed.iter().map(|e| e.name()).collect::<Vec<_>>().join(" or ")
        )));
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(t) = common.threads {
        cfg.threads = t;
    }
    if common.desk {
        cfg.apply_desk();
    }
    Ok(cfg)
}

fn echo(cfg: &ExperimentConfig) {
    let mut err = io::stderr().lock();
    for line in cfg.echo().lines() {
        let _ = writeln!(err, "# {line}");
    }
}

fn emit(out: &Option<PathBuf>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text)?,
        None => io::stdout().lock().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn finish(outcome: SuiteOutcome, common: &Common) -> Result<bool> {
    emit(&common.out, &outcome.report.to_csv())?;
    report_side(&outcome.report, common);
    for (class, target, choice) in &outcome.lambdas {
        if !choice.validation.is_empty() {
            eprintln!("# lambda {} {}: {:?} from {:?}", class.name(), target, choice.lambda, choice.validation);
        }
    }
    for f in &outcome.failures {
        eprintln!("FAILED {}: {}", f.cell, f.message);
    }
    Ok(outcome.failures.is_empty())
}

fn report_side(report: &EvalReport, common: &Common) {
    if common.summary && !report.is_empty() {
        eprint!("{}", summary_table(&summarize(report)));
    }
}

fn write_file(path: &Path, f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<()> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train {
            common,
            class,
            target,
            lambda,
            seed_index,
            checkpoint,
            history,
        } => {
            let cfg = load(&common, Experiment::Synthetic, &[])?;
            echo(&cfg);
            let class: ClassTag = class.parse()?;
            let target = target.unwrap_or_else(|| cfg.targets[0].clone());
            let lambda = lambda.or(cfg.lambda).unwrap_or(0.0);
            let task = Task::new(&target, &cfg, cfg.seed)?;
            let cell = run_cell(&task, &cfg, Model::Net(class), lambda, seed_index)?;
            if let (Some(p), Some(net)) = (&checkpoint, &cell.net) {
                write_file(p, |b| net.write_checkpoint(b))?;
            }
            if let (Some(p), Some(h)) = (&history, &cell.history) {
                write_file(p, |b| h.write_csv(b))?;
            }
            if let Some(final_loss) = cell.history.as_ref().and_then(|h| h.final_data_loss()) {
                eprintln!("# final training loss {final_loss:e}");
            }
            let report = EvalReport { rows: cell.rows };
            emit(&common.out, &report.to_csv())?;
            Ok(true)
        }
        Command::Sweep { common } => {
            let cfg = load(
                &common,
                Experiment::Synthetic,
                &[Experiment::Synthetic, Experiment::DeepsetsCompare],
            )?;
            echo(&cfg);
            finish(run_suite(&cfg)?, &common)
        }
        Command::Robust { common } => {
            let cfg = load(&common, Experiment::Robust, &[Experiment::Robust])?;
            echo(&cfg);
            finish(run_suite(&cfg)?, &common)
        }
        Command::Mnist {
            common,
            images,
            labels,
            test_images,
            test_labels,
            max_points,
            subset,
        } => {
            let mut cfg = load(&common, Experiment::Mnist, &[Experiment::Mnist])?;
            cfg.images = images.or(cfg.images);
            cfg.labels = labels.or(cfg.labels);
            cfg.test_images = test_images.or(cfg.test_images);
            cfg.test_labels = test_labels.or(cfg.test_labels);
            if let Some(m) = max_points {
                cfg.max_points = m;
                cfg.train_n = m;
            }
            if let Some(s) = subset {
                cfg.subset = s;
            }
            echo(&cfg);
            finish(run_suite(&cfg)?, &common)
        }
        Command::Diagnose { common } => {
            let cfg = load(&common, Experiment::Diagnostics, &[Experiment::Diagnostics])?;
            echo(&cfg);
            let outcome = run_suite(&cfg)?;
            let mut buf = Vec::new();
            write_diagnostics(&outcome.diagnostics, &mut buf)?;
            emit(&common.out, &String::from_utf8_lossy(&buf))?;
            for f in &outcome.failures {
                eprintln!("FAILED {}: {}", f.cell, f.message);
            }
            Ok(outcome.failures.is_empty())
        }
        Command::Replay { common, run_id } => {
            let cfg = load(&common, Experiment::Synthetic, &[])?;
            echo(&cfg);
            let report = replay(&cfg, &run_id)?;
            emit(&common.out, &report.to_csv())?;
            report_side(&report, &common);
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
