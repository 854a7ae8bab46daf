use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use clstream_core::datagen::{self, ShiftProfile};
use clstream_harness::{self as harness, results, Result, SweepAxis};

#[derive(Parser)]
#[command(name = "clstream", version, about = "Continual-learning experiments on clinical-style time series")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort from a named profile.
    GenerateData {
        /// One of: default, strong-shift, hospital-20.
        profile: String,
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        n_patients: Option<usize>,
    },
    /// Grid-search strategy hyperparameters on the first two tasks.
    Tune { config: PathBuf },
    /// Train and evaluate every repetition of an experiment.
    Run {
        config: PathBuf,
        /// JSON file with the strategy hyperparameters, as written by `tune`.
        #[arg(long)]
        hyperparams: Option<PathBuf>,
    },
    /// Repeat an experiment over the config's sweep values.
    Sweep {
        config: PathBuf,
        #[arg(long, value_enum)]
        axis: SweepAxis,
        #[arg(long)]
        hyperparams: Option<PathBuf>,
    },
    /// Summaries and plot series for a results directory.
    Report { dir: PathBuf },
}

fn generate(profile: &str, out: &PathBuf, seed: u64, n_patients: Option<usize>) -> Result<()> {
    let mut p = ShiftProfile::preset(profile)?;
    if let Some(n) = n_patients {
        p.n_patients = n;
    }
    let cohort = datagen::generate_cohort(&p, seed)?;
    datagen::write_dataset(&cohort, out)?;
    println!("wrote {} samples to {}", cohort.n_samples, out.display());
    for d in &cohort.domains {
        for (value, (n, pos)) in datagen::domain_summary(&cohort, &d.key)? {
            println!("{}={value}\t{n}\t{pos}", d.key);
        }
    }
    Ok(())
}

/// Returns whether every run completed.
fn execute(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenerateData {
            profile,
            out,
            seed,
            n_patients,
        } => generate(&profile, &out, seed, n_patients).map(|_| true),
        Command::Tune { config } => {
            let cfg = harness::load_config(&config)?;
            let stream = harness::PreparedStream::prepare(&cfg)?;
            let outcome = harness::tune(&cfg, &stream)?;
            let dir = harness::experiment_dir(&cfg);
            results::write_tuning(&dir, &outcome)?;
            for c in &outcome.candidates {
                println!("{}\t{:?}", c.strategy, c.score);
            }
            println!("chosen: {} (written to {})", outcome.chosen, dir.join("hyperparams.json").display());
            Ok(true)
        }
        Command::Run { config, hyperparams } => {
            let cfg = harness::load_config(&config)?;
            let supplied = hyperparams.map(|p| results::read_hyperparams(&p)).transpose()?;
            let outcome = harness::run_and_persist(&cfg, supplied)?;
            println!(
                "{}: {} run(s), {} failed, results in {}",
                outcome.strategy,
                outcome.runs.len(),
                outcome.failed_runs(),
                outcome.dir.display()
            );
            Ok(outcome.failed_runs() == 0)
        }
        Command::Sweep {
            config,
            axis,
            hyperparams,
        } => {
            let cfg = harness::load_config(&config)?;
            let supplied = hyperparams.map(|p| results::read_hyperparams(&p)).transpose()?;
            let groups = harness::sweep(&cfg, axis, supplied)?;
            let mut ok = true;
            for g in &groups {
                ok &= g.outcome.failed_runs() == 0;
                println!("{}\t{}\t{}", g.label, g.outcome.strategy, g.outcome.dir.display());
            }
            Ok(ok)
        }
        Command::Report { dir } => {
            let r = harness::report::report(&dir)?;
            for row in &r.summary {
                let ci = match (row.final_balanced_accuracy_ci_low, row.final_balanced_accuracy_ci_high) {
                    (Some(lo), Some(hi)) => format!("({lo:.3}, {hi:.3})"),
                    _ => "(CI suppressed)".into(),
                };
                println!(
                    "{}\t{}\t{:.3} {ci}\tforgetting {:?}",
                    row.hyperparameters, row.architecture, row.final_balanced_accuracy, row.final_forgetting
                );
            }
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}
