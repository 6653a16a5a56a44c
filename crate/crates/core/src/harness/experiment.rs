use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::training::{FrameStats, Trainer};

use super::{evaluate_bler, io_error, Axis, ExperimentConfig, HarnessError, Scheme, TrainedSystem};

pub const RESULTS_HEADER: &str = "scheme,P,rho,train_frames,run_seed,bler,std";

/// One row of `results.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlerRecord {
    pub scheme: Scheme,
    #[serde(rename = "P")]
    pub pilots: usize,
    pub rho: f64,
    pub train_frames: u64,
    pub run_seed: u64,
    pub bler: f64,
    /// Standard error of `bler` within the run.
    pub std: f64,
}

impl BlerRecord {
    fn sort_key(&self) -> (Scheme, usize, u64, u64, u64) {
        (self.scheme, self.pilots, self.rho.to_bits(), self.train_frames, self.run_seed)
    }

    fn check(&self) -> Result<(), HarnessError> {
        if !(0.0..=1.0).contains(&self.bler) {
            return Err(HarnessError::Format(format!("bler {} outside [0, 1]", self.bler)));
        }
        if !(self.std >= 0.0) {
            return Err(HarnessError::Format(format!("negative std {}", self.std)));
        }
        Ok(())
    }
}

/// One row of a training-history CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub tau: u64,
    pub mean_loss: f64,
    pub scheme: Scheme,
}

/// Full description of a sweep, written next to its results.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: ExperimentConfig,
    pub run_seeds: Vec<u64>,
    pub eval_seeds: Vec<u64>,
    pub git_describe: String,
}

/// Models and loss history of one training run.
#[derive(Clone, Debug)]
pub struct TrainingRun {
    pub run_seed: u64,
    pub rho: f64,
    pub system: TrainedSystem,
    pub history: Vec<FrameStats>,
}

#[derive(Clone, Debug)]
pub struct ExperimentOutput {
    pub records: Vec<BlerRecord>,
    pub runs: Vec<TrainingRun>,
    pub manifest: Manifest,
}

/// Evaluation stream seed paired with a training seed.
fn eval_seed(run_seed: u64) -> u64 {
    run_seed ^ 0x9e37_79b9_7f4a_7c15
}

/// `git describe` of the working directory, or "unknown" outside a repository.
pub fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".to_string())
}

/// Trains the scheme of `cfg` with `seed`, calling `at_frame` after the frames
/// listed in `checkpoints` (and once before training when 0 is listed).
pub fn train_system<F>(
    cfg: &ExperimentConfig,
    seed: u64,
    checkpoints: &[u64],
    mut at_frame: F,
) -> Result<TrainingRun, HarnessError>
where
    F: FnMut(u64, &TrainedSystem) -> Result<(), HarnessError>,
{
    let mut train = cfg.train.clone();
    train.seed = seed;
    let Some(mode) = cfg.scheme.training_mode() else {
        let system = TrainedSystem::untrained(cfg.scheme, &train);
        for &stop in checkpoints {
            at_frame(stop, &system)?;
        }
        return Ok(TrainingRun {
            run_seed: seed,
            rho: train.rho,
            system,
            history: Vec::new(),
        });
    };
    let mut trainer = Trainer::new(&train, mode)?;
    let mut stops: Vec<u64> = checkpoints.to_vec();
    stops.sort_unstable();
    stops.dedup();
    let total = stops.last().copied().unwrap_or(0).max(train.frames as u64);
    let mut next = stops.iter().peekable();
    loop {
        while let Some(&stop) = next.next_if(|&&s| s == trainer.frames_done()) {
            at_frame(stop, &TrainedSystem::from_trainer(cfg.scheme, &trainer))?;
        }
        if trainer.frames_done() >= total {
            break;
        }
        let stats = trainer.step()?;
        if !stats.mean_loss.is_finite() {
            return Err(HarnessError::Numeric(format!(
                "non-finite training loss at frame {}",
                stats.tau
            )));
        }
    }
    Ok(TrainingRun {
        run_seed: seed,
        rho: train.rho,
        system: TrainedSystem::from_trainer(cfg.scheme, &trainer),
        history: trainer.history().to_vec(),
    })
}

fn record(system: &TrainedSystem, pilots: usize, frames: u64, run_seed: u64, est: super::BlerEstimate) -> BlerRecord {
    BlerRecord {
        scheme: system.scheme,
        pilots,
        rho: system.train.rho,
        train_frames: frames,
        run_seed,
        bler: est.bler,
        std: est.std_err,
    }
}

/// Trains and evaluates every run of the sweep in `cfg`. Rows come back
/// sorted; `on_record` sees them as they are produced.
pub fn run_experiment<F>(cfg: &ExperimentConfig, on_record: F) -> Result<ExperimentOutput, HarnessError>
where
    F: Fn(&BlerRecord) + Sync,
{
    cfg.validate()?;
    let run_seeds: Vec<u64> = (0..cfg.test.runs as u64).map(|r| cfg.train.seed.wrapping_add(r)).collect();
    let (axis, values) = match &cfg.sweep {
        Some(s) => (s.axis, s.values.clone()),
        None => (Axis::Pilots, vec![cfg.test.pilots as f64]),
    };

    // (run seed, rho) training jobs
    let jobs: Vec<(u64, f64)> = match axis {
        Axis::Rho => run_seeds
            .iter()
            .flat_map(|&s| values.iter().map(move |&r| (s, r)))
            .collect(),
        _ => run_seeds.iter().map(|&s| (s, cfg.train.rho)).collect(),
    };

    let job = |&(seed, rho): &(u64, f64)| -> Result<(Vec<BlerRecord>, TrainingRun), HarnessError> {
        let mut c = cfg.clone();
        c.train.rho = rho;
        let es = eval_seed(seed);
        let mut rows = Vec::new();
        let run = match axis {
            Axis::TrainFrames => {
                let stops: Vec<u64> = values.iter().map(|&v| v as u64).collect();
                let mut c = c.clone();
                c.train.frames = 0;
                train_system(&c, seed, &stops, |stop, sys| {
                    let est = evaluate_bler(&c, sys, c.test.pilots, es)?;
                    let r = record(sys, c.test.pilots, stop, seed, est);
                    on_record(&r);
                    rows.push(r);
                    Ok(())
                })?
            }
            Axis::Pilots | Axis::Rho => {
                let run = train_system(&c, seed, &[], |_, _| Ok(()))?;
                let pilots: Vec<usize> = match axis {
                    Axis::Pilots => values.iter().map(|&v| v as usize).collect(),
                    _ => vec![c.test.pilots],
                };
                for p in pilots {
                    let est = evaluate_bler(&c, &run.system, p, es)?;
                    let r = record(&run.system, p, c.train.frames as u64, seed, est);
                    on_record(&r);
                    rows.push(r);
                }
                run
            }
        };
        for r in &rows {
            if !r.bler.is_finite() {
                return Err(HarnessError::Numeric("non-finite BLER".into()));
            }
        }
        Ok((rows, run))
    };

    #[cfg(feature = "parallel")]
    let results: Vec<(Vec<BlerRecord>, TrainingRun)> = {
        use rayon::prelude::*;
        jobs.par_iter().map(job).collect::<Result<_, _>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let results: Vec<(Vec<BlerRecord>, TrainingRun)> = jobs.iter().map(job).collect::<Result<_, _>>()?;

    let mut records = Vec::new();
    let mut runs = Vec::new();
    for (rows, run) in results {
        records.extend(rows);
        runs.push(run);
    }
    records.sort_by_key(BlerRecord::sort_key);
    let manifest = Manifest {
        config: cfg.clone(),
        eval_seeds: run_seeds.iter().map(|&s| eval_seed(s)).collect(),
        run_seeds,
        git_describe: git_describe(),
    };
    Ok(ExperimentOutput {
        records,
        runs,
        manifest,
    })
}

/// Runs the sweep and writes `results.csv`, `manifest.json`, training
/// histories and checkpoints into `out_dir`. Rows are streamed to
/// `results.partial.csv` while the sweep runs.
pub fn run_experiment_in(cfg: &ExperimentConfig, out_dir: &Path) -> Result<ExperimentOutput, HarnessError> {
    fs::create_dir_all(out_dir).map_err(|e| io_error(out_dir, e))?;
    let partial_path = out_dir.join("results.partial.csv");
    let partial = Mutex::new(
        csv::WriterBuilder::new()
            .has_headers(true)
            .from_path(&partial_path)?,
    );
    let out = run_experiment(cfg, |r| {
        let mut w = partial.lock().expect("partial writer");
        // best effort: the sorted file written at the end is authoritative
        let _ = w.serialize(r).and_then(|_| w.flush().map_err(csv::Error::from));
    })?;
    drop(partial);

    write_results(&out_dir.join("results.csv"), &out.records)?;
    fs::remove_file(&partial_path).map_err(|e| io_error(&partial_path, e))?;
    let manifest_path = out_dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&out.manifest)?;
    fs::write(&manifest_path, json + "\n").map_err(|e| io_error(&manifest_path, e))?;

    let ck_dir = out_dir.join("checkpoints");
    let hist_dir = out_dir.join("history");
    for run in &out.runs {
        let stem = format!("{}_seed{}_rho{}", cfg.scheme, run.run_seed, run.rho);
        if !run.history.is_empty() {
            fs::create_dir_all(&hist_dir).map_err(|e| io_error(&hist_dir, e))?;
            write_history(&hist_dir.join(format!("{stem}.csv")), cfg.scheme, &run.history)?;
        }
        if run.system.decoder.is_some() {
            fs::create_dir_all(&ck_dir).map_err(|e| io_error(&ck_dir, e))?;
            run.system.to_checkpoint().save(ck_dir.join(format!("{stem}.ckpt")))?;
        }
    }
    Ok(out)
}

fn results_writer(file: File, header: bool) -> csv::Writer<File> {
    csv::WriterBuilder::new().has_headers(header).from_writer(file)
}

/// Writes `records` to a fresh `results.csv`.
pub fn write_results(path: &Path, records: &[BlerRecord]) -> Result<(), HarnessError> {
    let file = File::create(path).map_err(|e| io_error(path, e))?;
    let mut w = results_writer(file, false);
    w.write_record(RESULTS_HEADER.split(','))?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| io_error(path, e))?;
    Ok(())
}

/// Appends rows to `path`, creating it with the header if needed. An existing
/// file must carry exactly the expected header.
pub fn append_results(path: &Path, records: &[BlerRecord]) -> Result<(), HarnessError> {
    if !path.exists() {
        return write_results(path, records);
    }
    let mut first = String::new();
    BufReader::new(File::open(path).map_err(|e| io_error(path, e))?)
        .read_line(&mut first)
        .map_err(|e| io_error(path, e))?;
    if first.trim_end() != RESULTS_HEADER {
        return Err(HarnessError::Format(format!(
            "{}: header `{}` differs from `{RESULTS_HEADER}`",
            path.display(),
            first.trim_end()
        )));
    }
    let file = OpenOptions::new()
        .append(true)
        .open(path)
        .map_err(|e| io_error(path, e))?;
    let mut w = results_writer(file, false);
    for r in records {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| io_error(path, e))?;
    Ok(())
}

/// Parses `results.csv`, rejecting unknown headers and out-of-range rows.
pub fn read_results(path: &Path) -> Result<Vec<BlerRecord>, HarnessError> {
    let mut rdr = csv::Reader::from_path(path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header.join(",") != RESULTS_HEADER {
        return Err(HarnessError::Format(format!("unexpected header {}", header.join(","))));
    }
    let mut out = Vec::new();
    for row in rdr.deserialize() {
        let r: BlerRecord = row?;
        r.check()?;
        out.push(r);
    }
    Ok(out)
}

pub fn write_history(path: &Path, scheme: Scheme, history: &[FrameStats]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path)?;
    for s in history {
        w.serialize(HistoryRow {
            tau: s.tau,
            mean_loss: s.mean_loss,
            scheme,
        })?;
    }
    w.flush().map_err(|e| io_error(path, e))?;
    Ok(())
}

pub fn read_history(path: &Path) -> Result<Vec<HistoryRow>, HarnessError> {
    let mut rdr = csv::Reader::from_path(path)?;
    rdr.deserialize().map(|r| r.map_err(HarnessError::from)).collect()
}
