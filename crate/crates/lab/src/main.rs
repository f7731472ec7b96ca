use std::net::{IpAddr, SocketAddr};
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use hyt_core::codec::ModalityConfig;
use hyt_lab::config::{self, EvalRunConfig, GenConfig, OracleFollowConfig, SweepConfig, TrainRunConfig};
use hyt_lab::service::{ModelSource, SessionStore, DEFAULT_TTL};
use hyt_lab::{checkpoint, report, runner};

#[derive(Parser)]
#[command(name = "hyt", about = "Hybrid act/think/follow training lab")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate oracle demonstrations.
    GenData {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train a model; `--resume` continues from a checkpoint of the same config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this epoch even if the config asks for more.
        #[arg(long)]
        stop_after: Option<u32>,
    },
    /// Roll out a checkpoint and print (or write) a success table.
    Eval {
        #[arg(long)]
        config: PathBuf,
    },
    /// Rebuild the scaling table and plot data from a sweep directory.
    Report {
        #[arg(long)]
        metrics: PathBuf,
    },
    /// Train and evaluate every paradigm over dataset sizes and seeds.
    Sweep {
        #[arg(long)]
        config: PathBuf,
    },
    /// Compare act, think and oracle-thought conditions on trained checkpoints.
    OracleFollow {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the interactive steering service.
    Serve {
        #[arg(long, default_value = "127.0.0.1")]
        bind: IpAddr,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long)]
        checkpoint_dir: PathBuf,
    },
    /// Print the token table as JSON.
    Vocab {
        #[arg(long, default_value_t = hyt_core::world::DEFAULT_GRID)]
        grid_size: u8,
        /// Use the vocabulary stored in this checkpoint instead.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable")
}

fn run(cli: Cli) -> hyt_lab::Result<()> {
    match cli.cmd {
        Cmd::GenData { config } => {
            let cfg: GenConfig = config::load(&config)?;
            let file = runner::gen_data(&cfg)?;
            let steps: usize = file.demos.iter().map(|d| d.steps.len()).sum();
            println!("wrote {} demonstrations ({steps} steps) to {}", file.demos.len(), cfg.out.display());
        }
        Cmd::Train { config, resume, stop_after } => {
            let cfg: TrainRunConfig = config::load(&config)?;
            let out = runner::train_run(&cfg, resume.as_deref(), stop_after)?;
            println!("trained to epoch {}; checkpoints in {}", out.state.epoch, cfg.out_dir.display());
        }
        Cmd::Eval { config } => {
            let cfg: EvalRunConfig = config::load(&config)?;
            for r in runner::evaluate(&cfg)? {
                println!(
                    "{}/{} {}: success {:.3} ± {:.3} over {} episodes ({} invalid), {:.2} tokens/step, {:.2} ms/step",
                    r.family,
                    r.n_objects,
                    r.mode,
                    r.success_rate,
                    r.stderr,
                    r.episodes,
                    r.invalid,
                    r.tokens_per_step,
                    r.seconds_per_step * 1e3
                );
            }
        }
        Cmd::Report { metrics } => {
            let rep = report::report(&metrics)?;
            let absent = rep.cells.iter().filter(|c| c.absent).count();
            println!("{} cells ({absent} absent) -> {}", rep.cells.len(), metrics.join(report::CSV).display());
            match rep.trend.holds {
                Some(true) => println!("trend holds at size {}: HyT >= act-only", rep.trend.size),
                Some(false) => println!("FLAG: trend violated at size {}: HyT < act-only", rep.trend.size),
                None => println!("FLAG: trend not computable at size {} (cells missing)", rep.trend.size),
            }
        }
        Cmd::Sweep { config } => {
            let cfg: SweepConfig = config::load(&config)?;
            runner::sweep(&cfg)?;
            let rep = report::report(&cfg.out_dir)?;
            println!("sweep done; trend holds: {:?}", rep.trend.holds);
        }
        Cmd::OracleFollow { config } => {
            let cfg: OracleFollowConfig = config::load(&config)?;
            let rep = runner::oracle_follow(&cfg)?;
            for r in &rep.rows {
                println!("{}/{} {:?}: {:.3} ± {:.3}", r.family, r.n_objects, r.condition, r.success_rate, r.stderr);
            }
            for (v, ok) in &rep.substitution_helps {
                if !ok {
                    println!("FLAG: oracle thoughts did not match own-thought think mode on {}/{}", v.family, v.n_objects);
                }
            }
        }
        Cmd::Serve { bind, port, checkpoint_dir } => {
            let store = Arc::new(SessionStore::new(ModelSource::directory(checkpoint_dir), DEFAULT_TTL));
            let rt = tokio::runtime::Runtime::new().map_err(|e| hyt_lab::LabError::Config(e.to_string()))?;
            rt.block_on(hyt_lab::service::serve(store, SocketAddr::new(bind, port)))
                .map_err(|e| hyt_lab::LabError::Config(format!("server: {e}")))?;
        }
        Cmd::Vocab { grid_size, checkpoint } => {
            let v = match checkpoint {
                Some(p) => checkpoint::Checkpoint::load(&p)?.vocabulary(),
                None => runner::vocabulary(grid_size, &ModalityConfig::default()),
            };
            println!("{}", json(&checkpoint::manifest(&v)));
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
            ExitCode::FAILURE
        }
    }
}
