use std::path::{Path, PathBuf};
use std::process::ExitCode;

use agg_core::harness::{
    compare, comparison_text, dump_inversions, load_config, parse_metrics_csv, run, train_net, Experiment,
    ExperimentConfig, RunReport, METRIC_COLUMNS,
};
use agg_core::Error;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "agg-lab",
    version,
    about = "Guided diffusion translation experiments on toy models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment config (TOML).
    config: PathBuf,
    /// Override a config field, e.g. `--set guidance.lambda_sty=50`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Replace run.output_dir.
    #[arg(long)]
    output: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> agg_core::Result<ExperimentConfig> {
        let mut cfg = load_config(&self.config, &self.overrides)?;
        if let Some(o) = &self.output {
            cfg.run.output_dir = o.to_string_lossy().into_owned();
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run every (seed, variant) cell and write the report.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        /// Worker threads; defaults to the number of cores.
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Paired-seed comparison of two reports.
    Compare {
        /// Run directory or metrics.csv.
        a: PathBuf,
        /// Run directory or metrics.csv.
        b: PathBuf,
        #[arg(long)]
        variant_a: Option<String>,
        #[arg(long)]
        variant_b: Option<String>,
        /// Print JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Train the learned epsilon predictor described by a config.
    TrainEps {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Forward-invert the first seed's sources.
    Invert {
        #[command(flatten)]
        config: ConfigArgs,
        /// Write the forward cache to `<output_dir>/cache.csv`.
        #[arg(long)]
        dump_cache: bool,
    },
}

enum Failure {
    Invalid(Error),
    Cells(usize),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Invalid(e)
    }
}

fn metrics_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join("metrics.csv")
    } else {
        p.to_path_buf()
    }
}

fn read(path: &Path) -> agg_core::Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, text: &str) -> agg_core::Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn print_report(cfg: &ExperimentConfig, report: &RunReport) {
    println!(
        "{} ({}), config {}",
        cfg.name,
        report.output_dir.display(),
        &report.config_hash[..12]
    );
    print!("{:<20}", "variant");
    for c in METRIC_COLUMNS {
        print!(" {c:>14}");
    }
    println!();
    for &v in &cfg.run.variants {
        print!("{:<20}", v.name());
        for c in METRIC_COLUMNS {
            match report.mean(v, c) {
                Some(m) => print!(" {m:>14.4}"),
                None => print!(" {:>14}", "-"),
            }
        }
        println!();
    }
}

fn execute(command: Command) -> Result<(), Failure> {
    match command {
        Command::Run { config, threads } => {
            let cfg = config.load()?;
            let report = run(&cfg, threads)?;
            print_report(&cfg, &report);
            for c in &report.cells {
                if let Err(e) = &c.result {
                    eprintln!("cell seed={} variant={} failed: {e}", c.seed, c.variant);
                }
            }
            match report.failed() {
                0 => Ok(()),
                n => Err(Failure::Cells(n)),
            }
        }
        Command::Compare {
            a,
            b,
            variant_a,
            variant_b,
            json,
        } => {
            let ra = parse_metrics_csv(&read(&metrics_path(&a))?)?;
            let rb = parse_metrics_csv(&read(&metrics_path(&b))?)?;
            let c = compare(&ra, &rb, variant_a.as_deref(), variant_b.as_deref())?;
            if json {
                println!("{}", serde_json::to_string_pretty(&c).expect("comparison serializes"));
            } else {
                print!("{}", comparison_text(&c));
            }
            Ok(())
        }
        Command::TrainEps { config } => {
            let cfg = config.load()?;
            let (net, losses) = train_net(&cfg)?;
            let dir = cfg.output_path();
            let weights = dir.join("epsnet.txt");
            write(&weights, &net.to_text())?;
            let mut csv = String::from("step,loss\n");
            for (i, l) in losses.iter().enumerate() {
                csv.push_str(&format!("{i},{l:e}\n"));
            }
            write(&dir.join("train_loss.csv"), &csv)?;
            println!(
                "trained {} steps, final loss {:.5}, weights at {}",
                losses.len(),
                losses.last().copied().unwrap_or(f64::NAN),
                weights.display()
            );
            Ok(())
        }
        Command::Invert { config, dump_cache } => {
            if !dump_cache {
                return Err(Error::Config("nothing to do: pass --dump-cache".into()).into());
            }
            let cfg = config.load()?;
            let exp = Experiment::build(&cfg)?;
            let path = cfg.output_path().join("cache.csv");
            let rows = dump_inversions(&exp, &path)?;
            println!("wrote {rows} cache rows to {}", path.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(Failure::Cells(n)) => {
            eprintln!("{n} cell(s) failed");
            ExitCode::from(2)
        }
    }
}
