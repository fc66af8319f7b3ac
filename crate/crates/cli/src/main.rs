use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use otfs_isac::experiment::{self, ExperimentConfig};

#[derive(Parser)]
#[command(name = "otfs-isac", version, about = "OTFS sensing and communication experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate trajectory groups and write train.bin and test.bin.
    GenerateData(Common),
    /// Train one forecaster per channel parameter.
    TrainPredictor(Common),
    /// Write the MAPE table of the trained forecasters and baselines.
    EvalPredictor(Common),
    /// Train the pre-equalization network at `preeq.rho_c`.
    TrainPreeq(Common),
    /// MSE against transmit SNR for each CSI source.
    SweepPower(Common),
    /// MSE and sensing bound across the loss-weight grid.
    Tradeoff(Common),
    /// Receiver multiplication counts.
    Complexity(Common),
}

#[derive(Args)]
struct Common {
    /// TOML configuration; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Artifact directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

impl Common {
    fn load(&self) -> anyhow::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }
}

fn wrote(out: &Path, file: &str) {
    println!("wrote {}", out.join(file).display());
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenerateData(c) => {
            let cfg = c.load()?;
            let d = experiment::run_generate_data(&cfg, &c.out).context("generate-data")?;
            let (train, test) = d.split_sizes();
            println!("{} groups ({train} train, {test} test), {} slots each", train + test, cfg.scenario.n_slots);
            wrote(&c.out, experiment::TRAIN_DATASET_FILE);
            wrote(&c.out, experiment::TEST_DATASET_FILE);
        }
        Command::TrainPredictor(c) => {
            let cfg = c.load()?;
            let reports = experiment::run_train_predictor(&cfg, &c.out).context("train-predictor")?;
            for (param, r) in &reports {
                let best = r.curve.last().map_or(f64::NAN, |e| e.best_val_loss);
                println!(
                    "{:<5} best epoch {:>3}  val loss {best:.4e}  persistence {:.4e}",
                    param.name(),
                    r.best_epoch,
                    r.persistence_val_loss
                );
            }
            wrote(&c.out, experiment::PREDICTOR_FILE);
            wrote(&c.out, "predictor_curve.csv");
        }
        Command::EvalPredictor(c) => {
            let cfg = c.load()?;
            for r in experiment::run_eval_predictor(&cfg, &c.out).context("eval-predictor")? {
                println!("{:<5} {:<12} {:>12.6}%", r.parameter.name(), r.model, r.mape);
            }
            wrote(&c.out, "mape.csv");
        }
        Command::TrainPreeq(c) => {
            let cfg = c.load()?;
            let t = experiment::run_train_preeq(&cfg, &c.out).context("train-preeq")?;
            if let (Some(first), Some(last)) = (t.trace.first(), t.trace.last()) {
                println!(
                    "epoch {} -> {}: mse {:.4} -> {:.4}, sensing {:.4e} -> {:.4e}",
                    first.epoch, last.epoch, first.val_mse, last.val_mse, first.val_sensing, last.val_sensing
                );
            }
            wrote(&c.out, experiment::PREEQ_FILE);
            wrote(&c.out, "convergence.csv");
        }
        Command::SweepPower(c) => {
            let cfg = c.load()?;
            for r in experiment::run_sweep_power(&cfg, &c.out).context("sweep-power")? {
                println!("{:>5} dB  {:<20} {:.4} +- {:.4}", r.snr_db, r.scheme, r.mse, r.mse_stderr);
            }
            wrote(&c.out, "power.csv");
        }
        Command::Tradeoff(c) => {
            let cfg = c.load()?;
            for r in experiment::run_tradeoff(&cfg, &c.out).context("tradeoff")? {
                println!(
                    "{:<9} rho_c {:<5} mse {:.4}  sqrt crlb_v {:.4} m/s",
                    r.csi.name(),
                    r.rho_c,
                    r.mse,
                    r.sqrt_crlb_velocity
                );
            }
            wrote(&c.out, "tradeoff.csv");
        }
        Command::Complexity(c) => {
            let cfg = c.load()?;
            for r in experiment::run_complexity(&cfg, &c.out).context("complexity")? {
                println!(
                    "MN {:>5} o {}  {:>22} vs {:>10}  ({:.2}% fewer)",
                    r.m * r.n,
                    r.order,
                    r.conventional,
                    r.preeq,
                    r.reduction_pct
                );
            }
            wrote(&c.out, "complexity.csv");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
