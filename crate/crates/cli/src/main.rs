use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use tmn::data::{build_splits, read_samples, write_dataset, SplitSpec};
use tmn::harness::{
    dump_attention, evaluate_checkpoint, run_suite, train, ExperimentConfig, HarnessError, SuiteOptions, THREADS_ENV,
};
use tmn::library::SubTaskCatalog;

#[derive(Parser)]
#[command(name = "tmn", about = "Transformer module networks on synthetic grid scenes")]
#[command(after_help = "Evaluation uses the thread count in TMN_THREADS (default 1).")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate and audit a dataset from a split spec file.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model from an experiment config file.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Score a checkpoint on a split file.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        split: PathBuf,
    },
    /// Write per-step head attention maps for one sample.
    DumpAttn {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        sample_id: String,
        /// Split file holding the sample.
        #[arg(long)]
        split: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run an experiment grid: main, specialization, ablation or structure.
    Suite {
        #[arg(long)]
        name: String,
        #[arg(long)]
        out: PathBuf,
        /// Optional suite options file (seeds, sizes, schedule, [model]).
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn read(path: &Path) -> Result<String, HarnessError> {
    fs::read_to_string(path).map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))
}

fn run(cmd: Command) -> Result<(), HarnessError> {
    match cmd {
        Command::GenData { spec, out } => {
            let spec = SplitSpec::from_toml(&read(&spec)?)?;
            let (splits, report) = build_splits(&spec)?;
            for c in &report.checks {
                println!("{} {}: {}", if c.passed { "ok  " } else { "FAIL" }, c.name, c.detail);
            }
            let manifest = write_dataset(&out, &spec, &splits, &report, &SubTaskCatalog::clevr().hash())?;
            for (split, f) in &manifest.files {
                println!(
                    "{} {} samples -> {}",
                    split.name(),
                    f.count,
                    out.join(&f.path).display()
                );
            }
        }
        Command::Train { config } => {
            let cfg = ExperimentConfig::from_file(&config)?;
            let outcome = train(&cfg)?;
            for e in &outcome.metrics.epochs {
                let acc = |m: &Option<tmn::harness::SplitMetrics>| {
                    m.as_ref()
                        .map(|m| format!("{:.4}", m.accuracy()))
                        .unwrap_or_else(|| "-".into())
                };
                println!(
                    "epoch {:3} loss {:.4} val {} test {}",
                    e.epoch,
                    e.train_loss,
                    acc(&e.val),
                    acc(&e.test)
                );
            }
            let m = &outcome.metrics;
            println!(
                "best epoch {} val {:.4} test {} ({:.1}s)",
                m.best_epoch.map(|e| e.to_string()).unwrap_or_else(|| "-".into()),
                m.val.accuracy(),
                m.test
                    .as_ref()
                    .map(|t| format!("{:.4}", t.accuracy()))
                    .unwrap_or_else(|| "-".into()),
                m.wall_seconds
            );
            if let Some(p) = &outcome.checkpoint {
                println!("checkpoint {}", p.display());
            }
        }
        Command::Eval { ckpt, split } => {
            let m = evaluate_checkpoint(&ckpt, &split)?;
            println!("overall {:.4} ({}/{})", m.accuracy(), m.correct, m.total);
            for (f, &(c, t)) in &m.per_family {
                println!("{f} {:.4} ({c}/{t})", c as f64 / t as f64);
            }
        }
        Command::DumpAttn {
            ckpt,
            sample_id,
            split,
            out,
        } => {
            let samples = read_samples(&split)?;
            let maps = dump_attention(&ckpt, &samples, &sample_id, &out)?;
            for m in &maps {
                println!("{} visual mass {:.4} row sum {:.6}", m.label, m.visual_mass, m.row_sum);
            }
        }
        Command::Suite { name, out, config } => {
            let opts = match config {
                Some(p) => SuiteOptions::from_toml(&read(&p)?)?,
                None => SuiteOptions::default(),
            };
            let result = run_suite(&name, &out, &opts)?;
            print!("{}", result.render());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    if let Ok(v) = std::env::var(THREADS_ENV) {
        if v.trim().parse::<usize>().map_or(true, |n| n == 0) {
            eprintln!("{THREADS_ENV} must be a positive integer, got {v:?}");
            return ExitCode::from(1);
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
