use std::path::PathBuf;
use std::process::ExitCode;

use bbcu::ablate::{self, AblationOptions};
use bbcu::commands::{self, BenefitInputs};
use bbcu::config::BenchConfig;
use bbcu::{CliError, CliResult};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bbcu", version, about = "Binarized image restoration networks: train, evaluate, benchmark, account, ablate")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network from a config file; writes model, trace and manifest.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a saved model on paired image directories.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        lq: PathBuf,
        #[arg(long)]
        hq: PathBuf,
        /// PSNR on the luma channel instead of RGB.
        #[arg(long)]
        y: bool,
        /// Write restored images here.
        #[arg(long)]
        save: Option<PathBuf>,
    },
    /// Time the packed binary convolution against a naive float loop.
    Bench {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 64)]
        channels: usize,
        #[arg(long, default_value_t = 180)]
        height: usize,
        #[arg(long, default_value_t = 320)]
        width: usize,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
    },
    /// Operation and parameter counts per network part.
    Account {
        /// Network config; the x4, 64-channel, 32-conv network is used when absent.
        #[arg(long)]
        config: Option<PathBuf>,
        /// PSNR of the full-precision network.
        #[arg(long)]
        psnr_f: Option<f64>,
        /// PSNR with one part binarized, e.g. `head=28.58,body=28.38`.
        #[arg(long)]
        psnr_b: Option<String>,
        #[arg(long)]
        csv: bool,
    },
    /// Run an ablation suite over several seeds.
    Ablate {
        /// variants | residual-count | breakpoint | k-sweep | parts | value-range
        suite: String,
        #[arg(long, default_value_t = 300)]
        steps: usize,
        #[arg(long, default_value_t = 3)]
        seeds: usize,
        #[arg(long, default_value_t = 32)]
        patch: usize,
        #[arg(long, default_value_t = 4)]
        batch: usize,
        /// Also write the table to `<out>/ablate-<suite>.txt`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train { config } => {
            let out = commands::cmd_train(&config, &mut |r| {
                println!("step={} loss={:.6} val_psnr={:.3}", r.step, r.loss, r.val_psnr)
            })?;
            println!("input_val_psnr={:.3}", out.input_psnr);
            println!("model={}", out.model.display());
            println!("trace={}", out.trace.display());
            println!("manifest={}", out.manifest.display());
        }
        Command::Eval { model, lq, hq, y, save } => {
            print!("{}", commands::cmd_eval(&model, &lq, &hq, y, save.as_deref())?.to_text());
        }
        Command::Bench {
            config,
            channels,
            height,
            width,
            repeats,
        } => {
            let overrides = BenchConfig {
                channels,
                height,
                width,
                repeats,
            };
            print!("{}", commands::cmd_bench(config.as_deref(), overrides)?.to_text());
        }
        Command::Account {
            config,
            psnr_f,
            psnr_b,
            csv,
        } => {
            let inputs = BenefitInputs {
                psnr_f,
                psnr_b: commands::parse_part_psnrs(psnr_b.as_deref().unwrap_or(""))?,
            };
            let report = commands::cmd_account(config.as_deref(), &inputs)?;
            print!("{}", if csv { report.to_csv() } else { report.to_text() });
        }
        Command::Ablate {
            suite,
            steps,
            seeds,
            patch,
            batch,
            out,
        } => {
            let opts = AblationOptions {
                steps,
                seeds,
                patch,
                batch,
            };
            let table = ablate::run(&suite, &opts, &mut |line| eprintln!("{line}"))?;
            let text = table.to_text();
            print!("{text}");
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
                let path = dir.join(format!("ablate-{suite}.txt"));
                std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
