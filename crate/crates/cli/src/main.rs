use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use downscale::experiment::{
    cmd_evaluate, cmd_forecast_emulate, cmd_make_synthetic, cmd_predict, cmd_train_diffusion, cmd_train_regression,
    forecast, ExperimentConfig, Overrides,
};
use downscale::Error;

#[derive(Parser, Debug)]
#[command(name = "downscale", version, about = "Regression plus residual-diffusion downscaling experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug)]
struct Common {
    /// Experiment TOML file.
    #[arg(long)]
    config: PathBuf,
    /// Overrides every stage seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the ensemble size.
    #[arg(long)]
    members: Option<usize>,
    /// Overrides the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic paired dataset.
    MakeSynthetic(Common),
    /// Train the regression UNet.
    TrainRegression(Common),
    /// Train the residual denoiser against the selected regression checkpoint.
    TrainDiffusion(Common),
    /// Sample CorrDiff ensembles for the configured split.
    Predict(Common),
    /// Score stored predictions and write tables and figures.
    Evaluate(Common),
    /// Downscale degraded inputs per lead time and scenario.
    ForecastEmulate(Common),
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::MakeSynthetic(c)
            | Command::TrainRegression(c)
            | Command::TrainDiffusion(c)
            | Command::Predict(c)
            | Command::Evaluate(c)
            | Command::ForecastEmulate(c) => c,
        }
    }
}

fn run(cmd: &Command) -> Result<(), Error> {
    let c = cmd.common();
    let ov = Overrides { seed: c.seed, members: c.members, out: c.out.clone() };
    let cfg = ExperimentConfig::load(&c.config, &ov)?;
    match cmd {
        Command::MakeSynthetic(_) => println!("{}", cmd_make_synthetic(&cfg)?),
        Command::TrainRegression(_) => {
            let r = cmd_train_regression(&cfg)?;
            println!("regression: best epoch {} (score {:.5})", r.best_epoch, r.best_score);
            println!("{:<12} {:<12} {:>12} {:>12} {:>8}", "variable", "level", "MAE", "bilinear", "ratio");
            for row in &r.final_table.rows {
                println!(
                    "{:<12} {:<12} {:>12.4} {:>12.4} {:>8.3}",
                    row.variable,
                    row.level,
                    row.mae,
                    row.baseline_mae,
                    row.mae / row.baseline_mae
                );
            }
        }
        Command::TrainDiffusion(_) => {
            let r = cmd_train_diffusion(&cfg)?;
            println!("diffusion: best epoch {} (val loss {:.5})", r.best_epoch, r.best_val_loss);
        }
        Command::Predict(_) => println!("{}", cmd_predict(&cfg)?),
        Command::Evaluate(_) => println!("{}", cmd_evaluate(&cfg)?),
        Command::ForecastEmulate(_) => {
            let r = cmd_forecast_emulate(&cfg)?;
            print!("{}", forecast::curves_csv(&r));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
