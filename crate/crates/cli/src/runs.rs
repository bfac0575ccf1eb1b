use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tsnode::metrics::{evaluate, history_to_csv, last_k_average, MetricsRecord};
use tsnode::tsnode::{Profile, TrainConfig, Trainer, Variant};
use tsnode::{Dataset, NetworkParams, TrainerState};

use crate::data::build_dataset;
use crate::manifest::ExperimentManifest;
use crate::write_file;

/// Number of trailing evaluations averaged into a run's headline numbers.
pub const SUMMARY_WINDOW: usize = 5;

/// A training run that ended in a failure report.
#[derive(Debug)]
pub struct TrainingFailed(pub String);

impl fmt::Display for TrainingFailed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "training failed: {}", self.0)
    }
}

impl std::error::Error for TrainingFailed {}

/// Contents of a run directory's `run.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub name: String,
    pub system: String,
    pub variant: Variant,
    pub seed: u64,
    pub profile: Profile,
    pub config: TrainConfig,
    pub iterations: usize,
    pub skipped: usize,
    /// Which network the metrics describe: `teacher` or `student`.
    pub model: String,
    pub history: Vec<MetricsRecord>,
    /// Average of the last evaluations.
    pub summary: MetricsRecord,
}

pub fn run_name(variant: Variant, seed: u64) -> String {
    format!("{}_seed{seed}", variant.name())
}

fn model_file(variant: Variant) -> &'static str {
    if variant == Variant::NoFeedback {
        "student"
    } else {
        "teacher"
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn load_checkpoint(path: &Path, variant: Variant, config: &TrainConfig) -> Option<TrainerState> {
    let state: TrainerState = read_json(path).ok()?;
    if state.variant == variant && &state.config == config {
        Some(state)
    } else {
        log::warn!("{}: checkpoint does not match this run, starting over", path.display());
        None
    }
}

/// Trains one (variant, seed) into `dir`, resuming from `dir/checkpoint.json`
/// when it matches unless `fresh` is set.
pub fn train_run(
    manifest: &ExperimentManifest,
    ds: &Dataset,
    variant: Variant,
    config: TrainConfig,
    dir: &Path,
    fresh: bool,
) -> Result<RunRecord> {
    let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    fs::create_dir_all(dir)?;
    let ckpt = dir.join("checkpoint.json");
    let resumed = if fresh { None } else { load_checkpoint(&ckpt, variant, &config) };
    let mut trainer = match resumed {
        Some(state) => {
            log::info!("{name}: resuming at iteration {}", state.iteration);
            Trainer::resume(state, ds)
        }
        None => Trainer::new(variant, config.clone(), ds),
    }
    .map_err(|e| TrainingFailed(format!("{name}: {e}")))?;

    while !trainer.is_finished() {
        let report = trainer.step().map_err(|e| TrainingFailed(format!("{name}: {e}")))?;
        if let Some(rec) = report.record {
            log::info!(
                "{name}: iter {} local {:.4e} re100 {:.4e}",
                rec.iteration,
                rec.local_error,
                rec.rollouts_error[4]
            );
            write_file(&ckpt, &serde_json::to_string(&trainer.checkpoint())?)?;
            write_file(&dir.join("metrics.csv"), &history_to_csv(&trainer.state().history))?;
        }
    }
    let state = trainer.checkpoint();
    write_file(&ckpt, &serde_json::to_string(&state)?)?;
    write_file(&dir.join("metrics.csv"), &history_to_csv(&state.history))?;
    write_file(&dir.join("teacher.json"), &state.teacher.to_json())?;
    if let Some(s) = &state.student {
        write_file(&dir.join("student.json"), &s.to_json())?;
    }
    let summary = last_k_average(&state.history, SUMMARY_WINDOW).context("run produced no evaluations")?;
    let record = RunRecord {
        name,
        system: manifest.system.system.name().to_string(),
        variant,
        seed: config.seed,
        profile: manifest.profile,
        config,
        iterations: state.iteration,
        skipped: state.skipped,
        model: model_file(variant).to_string(),
        history: state.history,
        summary,
    };
    write_file(&dir.join("run.json"), &serde_json::to_string_pretty(&record)?)?;
    Ok(record)
}

struct Job {
    variant: Variant,
    config: TrainConfig,
    dir: PathBuf,
}

fn run_jobs(manifest: &ExperimentManifest, ds: &Dataset, jobs: Vec<Job>, fresh: bool) -> Result<Vec<RunRecord>> {
    let results: Vec<Result<RunRecord>> = jobs
        .into_par_iter()
        .map(|j| train_run(manifest, ds, j.variant, j.config, &j.dir, fresh))
        .collect();
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok(rec) => records.push(rec),
            Err(e) => match e.downcast::<TrainingFailed>() {
                Ok(TrainingFailed(msg)) => failures.push(msg),
                Err(other) => return Err(other),
            },
        }
    }
    if !failures.is_empty() {
        return Err(TrainingFailed(failures.join("; ")).into());
    }
    Ok(records)
}

/// Runs every (variant, seed) of the manifest, then rewrites the summary
/// tables from all run directories present.
pub fn train(manifest: &ExperimentManifest, fresh: bool) -> Result<Vec<RunRecord>> {
    let ds = build_dataset(manifest)?;
    let runs = manifest.runs_dir();
    let jobs = manifest
        .variants
        .iter()
        .flat_map(|&v| manifest.seeds.iter().map(move |&s| (v, s)))
        .map(|(variant, seed)| Job { variant, config: manifest.config_for(seed), dir: runs.join(run_name(variant, seed)) })
        .collect();
    let outcome = run_jobs(manifest, &ds, jobs, fresh);
    write_summaries(manifest)?;
    outcome
}

pub const SUMMARY_HEADER: &str = "system,model,seed,iterations,skipped,local_error,re05,re10,re20,re50,re100,diverged";
pub const TABLE_HEADER: &str = "model,runs,local_error,re05,re10,re20,re50,re100";

fn summary_row(r: &RunRecord) -> String {
    let s = &r.summary;
    let re = s.rollouts_error;
    format!(
        "{},{},{},{},{},{},{},{},{},{},{},{}",
        r.system, r.variant.name(), r.seed, r.iterations, r.skipped, s.local_error, re[0], re[1], re[2], re[3], re[4], s.diverged
    )
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Per-variant medians over seeds, one row per model in the fixed variant
/// order.
pub fn table_rows(records: &[RunRecord]) -> Vec<(Variant, usize, MetricsRecord)> {
    Variant::ALL
        .iter()
        .filter_map(|&v| {
            let runs: Vec<&RunRecord> = records.iter().filter(|r| r.variant == v).collect();
            if runs.is_empty() {
                return None;
            }
            let mut local: Vec<f64> = runs.iter().map(|r| r.summary.local_error).collect();
            let mut re = [0.0; 5];
            for (k, slot) in re.iter_mut().enumerate() {
                let mut col: Vec<f64> = runs.iter().map(|r| r.summary.rollouts_error[k]).collect();
                *slot = median(&mut col);
            }
            let rec = MetricsRecord {
                iteration: runs[0].iterations,
                local_error: median(&mut local),
                rollouts_error: re,
                diverged: runs.iter().any(|r| r.summary.diverged),
            };
            Some((v, runs.len(), rec))
        })
        .collect()
}

/// All `run.json` files below `dir`, sorted by directory name.
pub fn collect_runs(dir: &Path) -> Result<Vec<RunRecord>> {
    let mut names: Vec<PathBuf> = match fs::read_dir(dir) {
        Ok(entries) => entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join("run.json").is_file())
            .collect(),
        Err(_) => Vec::new(),
    };
    names.sort();
    names.iter().map(|p| read_json(&p.join("run.json"))).collect()
}

/// `summary.csv` (one row per run) and `table.csv` (median per model) in
/// the output directory.
pub fn write_summaries(manifest: &ExperimentManifest) -> Result<()> {
    let records = collect_runs(&manifest.runs_dir())?;
    if records.is_empty() {
        return Ok(());
    }
    let mut summary = String::from(SUMMARY_HEADER);
    summary.push('\n');
    for r in &records {
        summary.push_str(&summary_row(r));
        summary.push('\n');
    }
    write_file(&manifest.output_dir.join("summary.csv"), &summary)?;
    let mut table = String::from(TABLE_HEADER);
    table.push('\n');
    for (v, n, m) in table_rows(&records) {
        let re = m.rollouts_error;
        table.push_str(&format!(
            "{},{n},{},{},{},{},{},{}\n",
            v.name(),
            m.local_error,
            re[0],
            re[1],
            re[2],
            re[3],
            re[4]
        ));
    }
    write_file(&manifest.output_dir.join("table.csv"), &table)?;
    Ok(())
}

pub const SWEEP_HEADER: &str = "sigma,seed,local_error,re05,re10,re20,re50,re100";

/// One TS-NODE run per sigma of the sweep, plus the matching baseline.
/// Returns `None` when the sweep list is empty.
pub fn sweep_sigma(manifest: &ExperimentManifest, fresh: bool) -> Result<Option<PathBuf>> {
    if manifest.sigma_sweep.is_empty() {
        return Ok(None);
    }
    let ds = build_dataset(manifest)?;
    let dir = manifest.output_dir.join("sweep");
    let mut jobs = Vec::new();
    let mut labels = Vec::new();
    for &seed in &manifest.seeds {
        let config = manifest.config_for(seed);
        jobs.push(Job { variant: Variant::Baseline, config: config.clone(), dir: dir.join(format!("baseline_seed{seed}")) });
        labels.push("baseline".to_string());
        for &sigma in &manifest.sigma_sweep {
            jobs.push(Job {
                variant: Variant::Tsnode,
                config: TrainConfig { sigma, ..config.clone() },
                dir: dir.join(format!("sigma_{sigma}_seed{seed}")),
            });
            labels.push(sigma.to_string());
        }
    }
    let records = run_jobs(manifest, &ds, jobs, fresh)?;
    let mut out = String::from(SWEEP_HEADER);
    out.push('\n');
    for (label, r) in labels.iter().zip(&records) {
        let s = &r.summary;
        let re = s.rollouts_error;
        out.push_str(&format!(
            "{label},{},{},{},{},{},{},{}\n",
            r.seed, s.local_error, re[0], re[1], re[2], re[3], re[4]
        ));
    }
    let path = manifest.output_dir.join("sigma_sweep.csv");
    write_file(&path, &out)?;
    Ok(Some(path))
}

/// Re-scored final model of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub run: String,
    pub variant: Option<Variant>,
    pub seed: Option<u64>,
    pub model: String,
    pub metrics: MetricsRecord,
}

pub fn load_model(run_dir: &Path) -> Result<(RunRecord, NetworkParams)> {
    let record: RunRecord = read_json(&run_dir.join("run.json"))?;
    let path = run_dir.join(format!("{}.json", record.model));
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let net = NetworkParams::from_json(&text).with_context(|| format!("parsing {}", path.display()))?;
    Ok((record, net))
}

/// Scores the final model of every run (or of `run_dirs`) and the ground
/// truth; writes `evaluation.json` and `evaluation.csv`.
pub fn evaluate_runs(manifest: &ExperimentManifest, run_dirs: &[PathBuf]) -> Result<Vec<Evaluation>> {
    let ds = build_dataset(manifest)?;
    let dirs: Vec<PathBuf> = if run_dirs.is_empty() {
        let mut d: Vec<PathBuf> = fs::read_dir(manifest.runs_dir())
            .with_context(|| format!("no runs under {}", manifest.runs_dir().display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join("run.json").is_file())
            .collect();
        d.sort();
        d
    } else {
        run_dirs.to_vec()
    };
    let mut evals = vec![Evaluation {
        run: "ground_truth".into(),
        variant: None,
        seed: None,
        model: "ground_truth".into(),
        metrics: evaluate(&ds.spec.system, &ds, 0),
    }];
    for dir in &dirs {
        let (record, net) = load_model(dir)?;
        if record.system != ds.spec.system.name() {
            bail!("{}: trained on {}, manifest is {}", dir.display(), record.system, ds.spec.system.name());
        }
        evals.push(Evaluation {
            run: record.name,
            variant: Some(record.variant),
            seed: Some(record.seed),
            model: record.model,
            metrics: evaluate(&net, &ds, record.iterations),
        });
    }
    write_file(&manifest.output_dir.join("evaluation.json"), &serde_json::to_string_pretty(&evals)?)?;
    let mut csv = String::from("run,model,local_error,re05,re10,re20,re50,re100,diverged\n");
    for e in &evals {
        let m = &e.metrics;
        let re = m.rollouts_error;
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            e.run, e.model, m.local_error, re[0], re[1], re[2], re[3], re[4], m.diverged
        ));
    }
    write_file(&manifest.output_dir.join("evaluation.csv"), &csv)?;
    Ok(evals)
}
