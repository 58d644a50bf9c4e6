//! Command-line front end: dataset generation, training, evaluation,
//! reports, and the numeric self-test.

use clap::{Parser, Subcommand};
use srgd_cli::config::Config;
use srgd_cli::{runner, selftest, CliError, CliResult};
use std::path::PathBuf;

const LONG_ABOUT: &str = "\
Deformable 2D registration trained with surrogate supervision: the model \
reads heterogeneous inputs while the loss is computed on surrogate image \
pairs (artifact-corrected, masked, or same-modality observations).

Experiments: artifact (bias-field robustness), mask (ROI-mask agnosticism), \
multimodal (cross-modality registration via paired surrogates).

CSV column orders:
  *_eval.csv     experiment,setting,seed,eval_cond,pair,dsc,tre,ndv
  *_summary.csv  experiment,eval_cond,setting,metric,n,mean,std,mean_ndv,p_vs_ours,mark,note
  *_history.csv  step,train_loss,val_metric

Exit codes: 0 ok, 1 usage, 2 data error, 3 numeric failure.
Worker threads: --workers beats SRGD_WORKERS beats the detected CPU count.";

#[derive(Parser)]
#[command(name = "srgd", version, about = "Surrogate-supervised image registration", long_about = LONG_ABOUT)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Key-value config file ('key = value' lines, '#' comments).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Inline config override, repeatable (e.g. --set steps=200).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic dataset for one experiment.
    Gen {
        /// artifact | mask | multimodal
        #[arg(long)]
        experiment: String,
        /// Dataset directory to create.
        #[arg(long)]
        out: PathBuf,
        /// Master dataset seed.
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Overwrite an existing dataset.
        #[arg(long)]
        force: bool,
        #[arg(long)]
        workers: Option<usize>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Train the experiment's settings; one checkpoint per (setting, seed).
    Train {
        #[arg(long)]
        experiment: String,
        /// Dataset directory from `gen`.
        #[arg(long)]
        data: PathBuf,
        /// Output directory for checkpoints and histories.
        #[arg(long)]
        out: PathBuf,
        /// Restrict to one setting, repeatable; default is all.
        #[arg(long = "setting")]
        settings: Vec<String>,
        /// Restrict to these seeds (comma-separated); default is all.
        #[arg(long)]
        seeds: Option<String>,
        #[arg(long)]
        workers: Option<usize>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Score checkpoints on every evaluation condition of the experiment.
    Eval {
        #[arg(long)]
        experiment: String,
        #[arg(long)]
        data: PathBuf,
        /// Directory holding the checkpoints; eval CSVs land beside them.
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "setting")]
        settings: Vec<String>,
        #[arg(long)]
        seeds: Option<String>,
        #[arg(long)]
        workers: Option<usize>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Summarize eval CSVs into a table, a summary CSV, and a box-plot SVG.
    Report {
        #[arg(long)]
        experiment: String,
        /// Directory holding the eval CSVs.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Gradient checks and metric oracle probes.
    Selftest {
        /// Comma-separated seeds for the gradient-check battery.
        #[arg(long, default_value = "0,1,2")]
        seeds: String,
    },
}

fn load_config(args: &ConfigArgs) -> CliResult<Config> {
    let mut cfg = match &args.config {
        Some(path) => Config::from_file(path)?,
        None => Config::default(),
    };
    for kv in &args.sets {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set '{}' is not KEY=VALUE", kv)))?;
        cfg.set(k.trim(), v.trim());
    }
    Ok(cfg)
}

fn parse_seed_list(raw: &str) -> CliResult<Vec<u64>> {
    raw.split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("bad seed '{}' in '{}'", s, raw)))
        })
        .collect()
}

fn resolve_workers(flag: Option<usize>) -> usize {
    flag.or_else(|| std::env::var("SRGD_WORKERS").ok().and_then(|v| v.parse().ok()))
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
        .max(1)
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.cmd {
        Cmd::Gen { experiment, out, seed, force, workers, config } => {
            let cfg = load_config(&config)?;
            let spec = runner::cmd_gen(
                &experiment,
                &out,
                seed,
                &cfg,
                force,
                resolve_workers(workers),
            )?;
            println!(
                "wrote {} dataset to {} ({} train / {} val / {} test, seed {})",
                spec.experiment,
                out.display(),
                spec.n_train,
                spec.n_val,
                spec.n_test,
                spec.seed
            );
            Ok(())
        }
        Cmd::Train { experiment, data, out, settings, seeds, workers, config } => {
            let cfg = load_config(&config)?;
            let exp = runner::experiment(&experiment, &cfg)?;
            let seeds = seeds.as_deref().map(parse_seed_list).transpose()?.unwrap_or_default();
            let runs = runner::resolve_runs(&exp, &settings, &seeds)?;
            for line in runner::cmd_train(&exp, &data, &out, &runs, resolve_workers(workers))? {
                println!("{}", line);
            }
            Ok(())
        }
        Cmd::Eval { experiment, data, out, settings, seeds, workers, config } => {
            let cfg = load_config(&config)?;
            let exp = runner::experiment(&experiment, &cfg)?;
            let seeds = seeds.as_deref().map(parse_seed_list).transpose()?.unwrap_or_default();
            let runs = runner::resolve_runs(&exp, &settings, &seeds)?;
            for line in runner::cmd_eval(&exp, &data, &out, &runs, resolve_workers(workers))? {
                println!("{}", line);
            }
            Ok(())
        }
        Cmd::Report { experiment, out, config } => {
            let cfg = load_config(&config)?;
            let exp = runner::experiment(&experiment, &cfg)?;
            let (table, warnings) = runner::cmd_report(&exp, &out)?;
            for w in &warnings {
                eprintln!("warning: {}", w);
            }
            print!("{}", table);
            println!("wrote {0}_summary.csv and {0}_boxplot.svg to {1}", exp.name, out.display());
            Ok(())
        }
        Cmd::Selftest { seeds } => {
            let seeds = parse_seed_list(&seeds)?;
            let (lines, ok) = selftest::run(&seeds)?;
            for line in lines {
                println!("{}", line);
            }
            if ok {
                Ok(())
            } else {
                Err(CliError::Numeric("selftest found gradient or oracle failures".into()))
            }
        }
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version are successes; everything else is a usage
            // error, kept distinct from data errors (exit 2).
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {}", e);
        std::process::exit(e.exit_code());
    }
}
