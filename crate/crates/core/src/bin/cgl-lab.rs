use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cgl_control::runner::{
    emit_plot_data, load_config, read_manifest, run_experiment, ExperimentConfig, Pipeline,
};
use cgl_control::LabError;

#[derive(Parser)]
#[command(name = "cgl-lab", version, about = "Penalized HUM experiments on a scenario tree")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML experiment file; documented defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Suppresses the summary on stdout.
    #[arg(long)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Uncontrolled forward trajectory.
    Simulate(Common),
    /// Penalized HUM control of the forward equation over an eps sweep.
    ControlForward(Common),
    /// Penalized HUM control of the backward equation over an eps sweep.
    ControlBackward(Common),
    /// Empirical Carleman ratios over random samples and a lambda sweep.
    CarlemanSweep(Common),
    /// Picard fixed point for the semilinear forward problem.
    SemilinearForward(Common),
    /// Picard fixed point for the semilinear backward problem.
    SemilinearBackward(Common),
    /// Writes plot-ready CSV from the manifest in the output directory.
    PlotData {
        #[command(flatten)]
        common: Common,
        /// One of eps-trend, weights, picard, carleman.
        #[arg(long)]
        selector: String,
    },
    /// Parses and checks a config without running it.
    ValidateConfig(Common),
}

fn load(common: &Common) -> Result<ExperimentConfig, LabError> {
    let mut cfg = match &common.config {
        Some(p) => load_config(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.output_dir = o.clone();
    }
    Ok(cfg)
}

fn fail(e: &LabError) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(e.exit_code() as u8)
}

fn run(common: &Common, pipeline: Pipeline) -> ExitCode {
    let mut cfg = match load(common) {
        Ok(c) => c,
        Err(e) => return fail(&e),
    };
    cfg.problem = pipeline;
    match run_experiment(&cfg) {
        Ok(m) => {
            if let Some(err) = &m.error {
                eprintln!("error: {err}");
            }
            if !common.quiet {
                println!("{}: {} file(s) in {}", m.pipeline, m.files.len(), cfg.output_dir.display());
                for (k, v) in &m.summary {
                    println!("  {k} = {v:e}");
                }
            }
            ExitCode::from(m.exit_code as u8)
        }
        Err(e) => fail(&e),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Simulate(c) => run(&c, Pipeline::Simulate),
        Command::ControlForward(c) => run(&c, Pipeline::ForwardLinear),
        Command::ControlBackward(c) => run(&c, Pipeline::BackwardLinear),
        Command::CarlemanSweep(c) => run(&c, Pipeline::CarlemanSweep),
        Command::SemilinearForward(c) => run(&c, Pipeline::ForwardSemilinear),
        Command::SemilinearBackward(c) => run(&c, Pipeline::BackwardSemilinear),
        Command::PlotData { common, selector } => {
            let dir = match load(&common) {
                Ok(cfg) => cfg.output_dir,
                Err(e) => return fail(&e),
            };
            let result = read_manifest(&dir).and_then(|m| emit_plot_data(&m, &selector, &dir));
            match result {
                Ok(path) => {
                    if !common.quiet {
                        println!("{}", path.display());
                    }
                    ExitCode::SUCCESS
                }
                Err(e) => fail(&e),
            }
        }
        Command::ValidateConfig(c) => match load(&c).and_then(|cfg| cfg.validate().map(|_| cfg)) {
            Ok(cfg) => {
                if !c.quiet {
                    println!("ok: {} ({})", cfg.problem.name(), c.config.as_ref().map_or("defaults".into(), |p| p.display().to_string()));
                }
                ExitCode::SUCCESS
            }
            Err(e) => fail(&e),
        },
    }
}
