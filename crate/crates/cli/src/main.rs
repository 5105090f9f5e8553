use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use modcomp::pipeline::{self, RunConfig};
use modcomp::Error;

/// Zero-shot adapter composition experiments.
#[derive(Parser)]
#[command(name = "modcomp", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Run configuration (TOML). Built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Worker threads; defaults to every available core.
    #[arg(long, global = true)]
    jobs: Option<usize>,

    /// Replaces the benchmark seeds, e.g. `--seed-override 5,10`.
    #[arg(long, global = true, value_delimiter = ',')]
    seed_override: Vec<u64>,

    /// Overrides `output_dir` from the config.
    #[arg(long, global = true, env = "MODCOMP_OUT", hide_env_values = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Build the corpora and print the domain overlap matrix.
    GenData,
    /// Pre-train the base and fit one adapter per training domain.
    Train,
    /// Run the benchmark grid.
    Bench,
    /// Fit the meta-regression models on the benchmark results.
    Metareg,
    /// Emit plot data series from the benchmark results.
    Report,
    /// Print the effective configuration.
    Config,
}

fn load(cli: &Cli) -> Result<RunConfig, Error> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    if !cli.seed_override.is_empty() {
        cfg.grid.seeds = cli.seed_override.clone();
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), Error> {
    let cfg = load(cli)?;
    let out = cfg.output_dir.display();
    match cli.command {
        Command::GenData => {
            let g = pipeline::gen_data(&cfg)?;
            println!("wrote {} domains to {out}/corpus", g.corpus.domains.len());
            print!("{}", g.overlap_table());
        }
        Command::Train => {
            let t = pipeline::train(&cfg)?;
            if !t.skipped.is_empty() {
                println!("already complete: {}", t.skipped.join(", "));
            }
            println!(
                "trained: {}",
                if t.trained.is_empty() {
                    "nothing".into()
                } else {
                    t.trained.join(", ")
                }
            );
        }
        Command::Bench => {
            let b = pipeline::bench(&cfg)?;
            println!("{} result rows written to {out}/{}", b.records.len(), pipeline::RESULTS);
        }
        Command::Metareg => {
            let m = pipeline::metareg(&cfg)?;
            println!("{:<12} {:>8} {:>10} {:>10}", "model", "alpha", "pearson", "spearman");
            let fmt = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.4}"));
            for r in m.rows.iter().filter(|r| r.fold == "mean") {
                let alpha = r.alpha.map_or("-".to_string(), |a| a.to_string());
                println!(
                    "{:<12} {:>8} {:>10} {:>10}",
                    r.model,
                    alpha,
                    fmt(r.pearson),
                    fmt(r.spearman)
                );
            }
            println!("{} coefficients with |c| > 0.1", m.coefficients.len());
        }
        Command::Report => {
            pipeline::report(&cfg)?;
            for f in [
                pipeline::PPL_VS_K,
                pipeline::WEIGHTS,
                pipeline::WEIGHT_KL,
                pipeline::CO2_VS_K,
                pipeline::AUTOK_SWEEP,
            ] {
                println!("wrote {out}/{f}");
            }
        }
        Command::Config => print!("{}", cfg.to_toml()),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build_global();
        if let Err(e) = pool {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
