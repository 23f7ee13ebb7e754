use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nfreg::cli::{
    cmd_eval, cmd_gen_data, cmd_register, cmd_train, exit_code, format_timings, loss_csv_path, mean_timings,
    PipelineConfig, RegisterFlags,
};
use nfreg::Result;

#[derive(Parser)]
#[command(name = "nfreg", version, about = "Template registration with neural deformation fields")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// TOML pipeline config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic registered dataset.
    GenData {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a deformation field on a dataset.
    Train {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        data: PathBuf,
        /// Weight archive to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Register one raw point cloud.
    Register {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        weights: PathBuf,
        /// Target cloud, one `x y z` line per point.
        #[arg(long)]
        target: PathBuf,
        /// Result directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        no_nicp: bool,
        #[arg(long)]
        no_chamfer: bool,
        #[arg(long)]
        displacements: bool,
        #[arg(long)]
        one_directional: bool,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Benchmark one or more fields on a test dataset.
    Eval {
        #[command(flatten)]
        config: ConfigArg,
        /// Weight archives; several give the segments ablation table.
        #[arg(long = "weights", required = true, num_args = 1..)]
        weights: Vec<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Worker threads.
        #[arg(long, env = "NFREG_JOBS", default_value_t = 1)]
        jobs: usize,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, out } => {
            let cfg = PipelineConfig::load_or_default(config.config.as_deref())?;
            let n = cmd_gen_data(&cfg, &out)?;
            println!("wrote {n} shapes to {}", out.display());
        }
        Command::Train { config, data, out } => {
            let cfg = PipelineConfig::load_or_default(config.config.as_deref())?;
            let history = cmd_train(&cfg, &data, &out, |p| {
                if p.step % 100 == 0 {
                    eprintln!("epoch {} step {} loss {:.6}", p.epoch, p.step, p.loss);
                }
            })?;
            for (e, l) in history.iter().enumerate() {
                println!("epoch {e}: mean loss {l:.6}");
            }
            println!("wrote {} and {}", out.display(), loss_csv_path(&out).display());
        }
        Command::Register {
            config,
            weights,
            target,
            out,
            no_nicp,
            no_chamfer,
            displacements,
            one_directional,
            seed,
        } => {
            let cfg = PipelineConfig::load_or_default(config.config.as_deref())?;
            let flags = RegisterFlags { no_nicp, no_chamfer, displacements, one_directional, seed };
            let result = cmd_register(&cfg, &weights, &target, &out, &flags)?;
            print!("{}", format_timings(&result.timings));
            println!("wrote {}", out.display());
        }
        Command::Eval { config, weights, data, out, jobs } => {
            let cfg = PipelineConfig::load_or_default(config.config.as_deref())?;
            let report = cmd_eval(&cfg, &weights, &data, &out, jobs)?;
            for s in &report.summary {
                println!(
                    "{:<28} mean v2v {:.5}  median {:.5}  geodesic auc {:.4}",
                    s.method, s.mean_v2v, s.median_v2v, s.curve.auc
                );
            }
            for r in &report.improvements {
                println!(
                    "{} over {}: improvement rate {:.3}, mean reduction {:.3}",
                    r.with, r.without, r.rate, r.mean_reduction
                );
            }
            print!("{}", format_timings(&mean_timings(report.cells.iter().map(|c| c.timings.as_slice()))));
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::try_parse().unwrap_or_else(|e| {
        let code = if e.use_stderr() { 2 } else { 0 };
        let _ = e.print();
        std::process::exit(code);
    });
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
