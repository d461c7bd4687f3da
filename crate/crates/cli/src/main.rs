use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use osparse::commands;
use osparse::config::RunConfig;

#[derive(Parser)]
#[command(name = "osparse", version, about = "One-shot human parsing experiments")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(clap::Args)]
struct Common {
    /// JSON run config; relative paths inside it resolve against its directory.
    #[arg(long)]
    config: PathBuf,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render the synthetic dataset and its manifest.
    GenData(Common),
    /// Train all stages and write checkpoints plus loss curves.
    Train {
        #[command(flatten)]
        common: Common,
        /// Skip stages that already have a valid checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate the final checkpoint on the fixed test episodes.
    Eval(Common),
    /// Train and evaluate the six ablation rows.
    Ablate(Common),
}

fn load(common: &Common) -> osparse::Result<RunConfig> {
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    Ok(cfg)
}

fn run(cli: Cli) -> osparse::Result<()> {
    match cli.command {
        Cmd::GenData(c) => {
            let cfg = load(&c)?;
            let m = commands::gen_data(&cfg)?;
            let s = &m.splits;
            println!(
                "wrote {} ({} + {} train, {} + {} test, supports {:?})",
                cfg.manifest_path().display(),
                s.s_train.len(),
                s.q_train.len(),
                s.s_test.len(),
                s.q_test.len(),
                m.fixed_supports
            );
        }
        Cmd::Train { common, resume } => {
            let cfg = load(&common)?;
            let out = commands::train(&cfg, resume)?;
            for s in &out.resumed {
                println!("stage {s}: restored from checkpoint");
            }
            for r in &out.reports {
                let tail = r.curve.len().min(50);
                let mean = r.curve[r.curve.len() - tail..].iter().map(|x| x.loss).sum::<f64>() / tail.max(1) as f64;
                println!("stage {}: {} episodes, final loss {mean:.4}, {} rejected updates", r.stage, r.curve.len(), r.rejected_updates);
            }
            println!("wrote {}", cfg.final_checkpoint().display());
        }
        Cmd::Eval(c) => {
            let cfg = load(&c)?;
            print!("{}", commands::eval(&cfg)?.table());
        }
        Cmd::Ablate(c) => {
            let cfg = load(&c)?;
            let report = commands::ablate(&cfg)?;
            print!("{}{}", report.table(), report.verdict());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
