use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use metalink::harness::{
    self, append_results, evaluate_bler, run_experiment_in, train_system, write_history, BlerRecord,
    ExperimentConfig, HarnessError, TrainedSystem,
};
use metalink::link::Checkpoint;

#[derive(Parser)]
#[command(name = "metalink", version, about = "Meta-learned end-to-end link simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Directory for results, manifests, histories and checkpoints.
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    /// Overrides `train.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the configured scheme once and save its checkpoint and loss history.
    Train(Common),
    /// Evaluate a saved checkpoint and append rows to results.csv.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Pilot blocks per test frame (default: `test.pilots`).
        #[arg(long)]
        pilots: Option<usize>,
    },
    /// Train and evaluate every point of the configured sweep.
    Sweep(Common),
    /// Run the quick oracle checks.
    Selftest {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        threads: Option<usize>,
    },
}

fn set_threads(threads: Option<usize>) -> anyhow::Result<()> {
    #[cfg(feature = "parallel")]
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .context("configuring worker threads")?;
    }
    #[cfg(not(feature = "parallel"))]
    let _ = threads;
    Ok(())
}

fn load(common: &Common) -> Result<ExperimentConfig, HarnessError> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn train(common: &Common) -> anyhow::Result<()> {
    let cfg = load(common)?;
    create_dir(&common.out_dir)?;
    let run = train_system(&cfg, cfg.train.seed, &[], |_, _| Ok(()))?;
    let stem = format!("{}_seed{}_rho{}", cfg.scheme, run.run_seed, run.rho);
    let ck = common.out_dir.join(format!("{stem}.ckpt"));
    run.system.to_checkpoint().save(&ck).map_err(HarnessError::from)?;
    if !run.history.is_empty() {
        write_history(&common.out_dir.join(format!("{stem}_history.csv")), cfg.scheme, &run.history)?;
    }
    let last = run.history.last().map(|s| s.mean_loss);
    match last {
        Some(loss) => println!("trained {} for {} frames, final mean loss {loss:.4}", cfg.scheme, run.history.len()),
        None => println!("{} has no training phase", cfg.scheme),
    }
    println!("checkpoint: {}", ck.display());
    Ok(())
}

fn eval(common: &Common, checkpoint: &Path, pilots: Option<usize>) -> anyhow::Result<()> {
    let cfg = load(common)?;
    let ck = Checkpoint::load(checkpoint).map_err(HarnessError::from)?;
    let system = TrainedSystem::from_checkpoint(&ck)?;
    let pilots = pilots.unwrap_or(cfg.test.pilots);
    let mut rows = Vec::new();
    for r in 0..cfg.test.runs as u64 {
        let seed = cfg.train.seed.wrapping_add(r);
        let est = evaluate_bler(&cfg, &system, pilots, seed)?;
        println!(
            "{} P={pilots} seed={seed}: BLER {:.5} (std err {:.5}, {} blocks)",
            system.scheme, est.bler, est.std_err, est.blocks
        );
        rows.push(BlerRecord {
            scheme: system.scheme,
            pilots,
            rho: system.train.rho,
            train_frames: system.frames_trained,
            run_seed: seed,
            bler: est.bler,
            std: est.std_err,
        });
    }
    create_dir(&common.out_dir)?;
    append_results(&common.out_dir.join("results.csv"), &rows)?;
    Ok(())
}

fn sweep(common: &Common) -> anyhow::Result<()> {
    let cfg = load(common)?;
    let out = run_experiment_in(&cfg, &common.out_dir)?;
    for r in &out.records {
        println!(
            "{} P={} rho={} frames={} seed={}: BLER {:.5} +- {:.5}",
            r.scheme, r.pilots, r.rho, r.train_frames, r.run_seed, r.bler, r.std
        );
    }
    println!("wrote {}", common.out_dir.join("results.csv").display());
    Ok(())
}

fn selftest(seed: u64) -> anyhow::Result<bool> {
    let mut ok = true;
    for check in harness::selftest::run_all(seed) {
        println!("{} {}: {}", if check.passed { "PASS" } else { "FAIL" }, check.name, check.detail);
        ok &= check.passed;
    }
    Ok(ok)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    err.chain()
        .find_map(|e| e.downcast_ref::<HarnessError>())
        .map(|h| h.exit_code() as u8)
        .unwrap_or(1)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(c) => set_threads(c.threads).and_then(|_| train(c)).map(|_| true),
        Command::Eval {
            common,
            checkpoint,
            pilots,
        } => set_threads(common.threads)
            .and_then(|_| eval(common, checkpoint, *pilots))
            .map(|_| true),
        Command::Sweep(c) => set_threads(c.threads).and_then(|_| sweep(c)).map(|_| true),
        Command::Selftest { seed, threads } => set_threads(*threads).and_then(|_| selftest(*seed)),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
