use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use wealthlens_core::pipeline::{ExplainMethod, Pipeline, RunConfig, StageOutcome};
use wealthlens_core::Error;

#[derive(Parser)]
#[command(name = "wealthlens", version, about = "Nightlight transfer learning and explainability on synthetic satellite tiles")]
struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Top-level seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores), overriding the config.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Output directory, overriding the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus.
    Generate,
    /// Two-stage nightlight training.
    Train,
    /// Extract features and fit the 1x1 and 3x3 ridge heads.
    FitHead,
    /// Run one explanation method.
    Explain {
        /// shuffle, filter, color, occlusion, gradcam, guidedbp, guidedgradcam or featviz
        method: String,
        /// Corpus indices for the attribution figure.
        #[arg(long, value_delimiter = ',')]
        sites: Option<Vec<usize>>,
    },
    /// Train on one phase and test on another.
    EvalCrossPeriod,
    /// Write the consolidated report.
    Report,
    /// Every stage in order.
    All,
    /// Print the effective configuration as TOML.
    Config,
}

fn load_config(cli: &Cli) -> Result<RunConfig, Error> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(jobs) = cli.jobs {
        cfg.jobs = jobs;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn report(stage: &str, outcome: StageOutcome) {
    match outcome {
        StageOutcome::Ran => println!("{stage}: done"),
        StageOutcome::UpToDate => println!("{stage}: up to date"),
    }
}

fn run(cli: &Cli) -> Result<(), Error> {
    let cfg = load_config(cli)?;
    if let Command::Config = cli.command {
        print!("{}", cfg.to_toml()?);
        return Ok(());
    }
    let p = Pipeline::new(cfg)?;
    match &cli.command {
        Command::Generate => report("generate", p.generate()?),
        Command::Train => report("train", p.train()?),
        Command::FitHead => report("fit-head", p.fit_head()?),
        Command::Explain { method, sites } => {
            let m: ExplainMethod = method.parse()?;
            report(&format!("explain {method}"), p.explain(m, sites.as_deref())?);
            println!("{}", p.config().out_dir.join(p.explain_dir(m, sites.as_deref())?).display());
        }
        Command::EvalCrossPeriod => report("eval-cross-period", p.eval_cross_period()?),
        Command::Report => {
            report("report", p.report()?);
            println!("{}", p.config().out_dir.join(p.stage_dir("report")?).join("report.md").display());
        }
        Command::All => {
            p.run_all()?;
            println!("{}", p.config().out_dir.join(p.stage_dir("report")?).join("report.md").display());
        }
        Command::Config => unreachable!(),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
