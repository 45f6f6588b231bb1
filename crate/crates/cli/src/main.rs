//! Experiment driver: deterministic pipelines over synthetic cohorts with
//! run manifests and consolidated reporting.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use milsurv_core::abmil::{
    attention_dump, file_checksum, fit_abmil, hex_digest, load_abmil, save_abmil,
    train_cancer_specific, AbmilConfig, AbmilModel, TrainConfig,
};
use milsurv_core::cohort::io::{load_bags, save_bags, sidecar_path};
use milsurv_core::cohort::{stratified_kfold, synth_cohorts, Cohort, SynthSpec};
use milsurv_core::error::Error;
use milsurv_core::factors::factor_analysis;
use milsurv_core::moe::{
    ablation_suite, default_variants, save_moe, train_moe_cv, write_routing_log, Expert, MoeConfig,
};
use milsurv_core::transfer::{transfer_matrix, TransferCell, TransferMatrix};

#[derive(Parser)]
#[command(name = "milsurv", about = "Multiple-instance survival modeling pipelines")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON experiment config.
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Override the config seed (applies to synth and training).
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Output directory for artifacts and manifests.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Overwrite existing output artifacts.
    #[arg(long)]
    force: bool,
    /// Worker budget for internally parallel steps.
    #[arg(long, value_name = "N", default_value_t = 1)]
    jobs: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic cohorts: bag files, label sidecars, ground truth.
    Synth(Common),
    /// Train cross-validated cancer-specific models plus full-cohort models.
    Train(Common),
    /// Evaluate every source model on every target cohort.
    TransferMatrix(Common),
    /// Regress transfer performance on prognosticability/closeness factors.
    Factors(Common),
    /// Train the top-K expert mixture on a target cohort.
    Roupkt(Common),
    /// Run the single-knob ablation grid on a target cohort.
    Ablate(Common),
    /// Dump per-instance attention scores for one bag.
    Attention(Common),
    /// Consolidate manifests and artifact summaries into one report.
    Report(Common),
}

/// One JSON file drives every command; unknown keys are rejected.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct ExperimentConfig {
    synth: Option<SynthSpec>,
    train: Option<TrainConfig>,
    abmil: Option<AbmilConfig>,
    moe: Option<MoeConfig>,
    folds: usize,
    /// Target cancer code for roupkt / ablate / attention.
    target: Option<String>,
    /// Bag id for the attention dump.
    bag: Option<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            synth: None,
            train: None,
            abmil: None,
            moe: None,
            folds: 5,
            target: None,
            bag: None,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ArtifactRecord {
    path: String,
    checksum: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct RunManifest {
    command: String,
    config_hash: String,
    seed: u64,
    jobs: usize,
    wall_time_secs: f64,
    artifacts: Vec<ArtifactRecord>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (name, common) = match &cli.command {
        Command::Synth(c) => ("synth", c),
        Command::Train(c) => ("train", c),
        Command::TransferMatrix(c) => ("transfer-matrix", c),
        Command::Factors(c) => ("factors", c),
        Command::Roupkt(c) => ("roupkt", c),
        Command::Ablate(c) => ("ablate", c),
        Command::Attention(c) => ("attention", c),
        Command::Report(c) => ("report", c),
    };
    match run(name, common) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 2 = config/usage, 3 = missing prerequisite, 4 = numerical/data failure.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Contract(_) | Error::Json(_) => 2,
        Error::MissingPrerequisite(_) => 3,
        _ => 4,
    }
}

fn run(name: &str, common: &Common) -> Result<(), Error> {
    if common.jobs == 0 {
        return Err(Error::Contract("--jobs must be at least 1".into()));
    }
    let raw = std::fs::read(&common.config)
        .map_err(|e| Error::Contract(format!("cannot read config {}: {e}", common.config.display())))?;
    let mut cfg: ExperimentConfig = serde_json::from_slice(&raw)?;
    if let Some(seed) = common.seed {
        if let Some(s) = cfg.synth.as_mut() {
            s.seed = seed;
        }
        if let Some(t) = cfg.train.as_mut() {
            t.seed = seed;
        }
    }
    if cfg.folds < 2 {
        return Err(Error::Contract("folds must be at least 2".into()));
    }
    std::fs::create_dir_all(&common.out)
        .map_err(|e| Error::io(common.out.display().to_string(), e))?;

    let resolved = serde_json::to_vec_pretty(&cfg)?;
    let config_hash = hex_digest(&resolved);
    let started = Instant::now();

    let artifacts = match name {
        "synth" => cmd_synth(&cfg, common)?,
        "train" => cmd_train(&cfg, common)?,
        "transfer-matrix" => cmd_transfer_matrix(&cfg, common)?,
        "factors" => cmd_factors(&cfg, common)?,
        "roupkt" => cmd_roupkt(&cfg, common)?,
        "ablate" => cmd_ablate(&cfg, common)?,
        "attention" => cmd_attention(&cfg, common)?,
        "report" => cmd_report(common)?,
        _ => unreachable!(),
    };

    // `report` consolidates manifests, so it does not write one of its own;
    // that keeps reruns byte-identical.
    if name != "report" {
        let manifest = RunManifest {
            command: name.to_string(),
            config_hash,
            seed: effective_seed(&cfg),
            jobs: common.jobs,
            wall_time_secs: started.elapsed().as_secs_f64(),
            artifacts,
        };
        let path = common.out.join(format!("{name}.manifest.json"));
        write_bytes(&path, &serde_json::to_vec_pretty(&manifest)?, true)?;
        // the resolved config rides along for provenance
        let cfg_path = common.out.join(format!("{name}.config.json"));
        write_bytes(&cfg_path, &resolved, true)?;
    }
    Ok(())
}

fn effective_seed(cfg: &ExperimentConfig) -> u64 {
    cfg.train
        .as_ref()
        .map(|t| t.seed)
        .or_else(|| cfg.synth.as_ref().map(|s| s.seed))
        .unwrap_or(0)
}

fn write_bytes(path: &Path, data: &[u8], force: bool) -> Result<(), Error> {
    if !force && path.exists() {
        return Err(Error::Contract(format!(
            "output {} already exists; rerun with --force to overwrite",
            path.display()
        )));
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    }
    std::fs::write(path, data).map_err(|e| Error::io(path.display().to_string(), e))
}

fn record(out: &Path, path: &Path) -> Result<ArtifactRecord, Error> {
    Ok(ArtifactRecord {
        path: path
            .strip_prefix(out)
            .unwrap_or(path)
            .display()
            .to_string(),
        checksum: file_checksum(path)?,
    })
}

fn bags_dir(common: &Common) -> PathBuf {
    common.out.join("bags")
}

/// Load every cohort written by `synth`, sorted by cancer code.
fn load_cohorts(common: &Common, needed_by: &str) -> Result<Vec<Cohort>, Error> {
    let dir = bags_dir(common);
    let entries = std::fs::read_dir(&dir).map_err(|_| {
        Error::MissingPrerequisite(format!(
            "bag files in {} not found; run `milsurv synth` first ({needed_by} requires them)",
            dir.display()
        ))
    })?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "pktb"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::MissingPrerequisite(format!(
            "no bag files in {}; run `milsurv synth` first",
            dir.display()
        )));
    }
    paths.iter().map(|p| load_bags(p)).collect()
}

fn abmil_config(cfg: &ExperimentConfig, cohort: &Cohort) -> AbmilConfig {
    cfg.abmil
        .unwrap_or_else(|| AbmilConfig::desk(cohort.dim(), cohort.t_bins))
}

fn train_config(cfg: &ExperimentConfig) -> TrainConfig {
    cfg.train.clone().unwrap_or_default()
}

fn ckpt_dir(common: &Common) -> PathBuf {
    common.out.join("checkpoints")
}

fn full_ckpt(common: &Common, code: &str) -> PathBuf {
    ckpt_dir(common).join(format!("{code}.full.pktm"))
}

fn fold_ckpt(common: &Common, code: &str, fold: usize) -> PathBuf {
    ckpt_dir(common).join(format!("{code}.fold{fold}.pktm"))
}

#[derive(Debug, Serialize, Deserialize)]
struct CancerMetrics {
    cancer: String,
    mean_c_index: f64,
    sigma_c_index: f64,
    per_fold: Vec<f64>,
}

fn metrics_path(common: &Common) -> PathBuf {
    common.out.join("train.metrics.json")
}

fn load_metrics(common: &Common, needed_by: &str) -> Result<Vec<CancerMetrics>, Error> {
    let path = metrics_path(common);
    let raw = std::fs::read(&path).map_err(|_| {
        Error::MissingPrerequisite(format!(
            "{} not found; run `milsurv train` first ({needed_by} requires it)",
            path.display()
        ))
    })?;
    Ok(serde_json::from_slice(&raw)?)
}

fn cmd_synth(cfg: &ExperimentConfig, common: &Common) -> Result<Vec<ArtifactRecord>, Error> {
    let spec = cfg
        .synth
        .as_ref()
        .ok_or_else(|| Error::Contract("config is missing the `synth` section".into()))?;
    let (cohorts, truth) = synth_cohorts(spec)?;
    let dir = bags_dir(common);
    let mut artifacts = Vec::new();
    for cohort in &cohorts {
        let path = dir.join(format!("{}.pktb", cohort.cancer_code));
        if !common.force && path.exists() {
            return Err(Error::Contract(format!(
                "output {} already exists; rerun with --force to overwrite",
                path.display()
            )));
        }
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        save_bags(&path, cohort)?;
        artifacts.push(record(&common.out, &path)?);
        artifacts.push(record(&common.out, &sidecar_path(&path))?);
    }
    let truth_path = common.out.join("ground_truth.json");
    write_bytes(&truth_path, &serde_json::to_vec_pretty(&truth)?, common.force)?;
    artifacts.push(record(&common.out, &truth_path)?);
    Ok(artifacts)
}

fn cmd_train(cfg: &ExperimentConfig, common: &Common) -> Result<Vec<ArtifactRecord>, Error> {
    let cohorts = load_cohorts(common, "train")?;
    let tc = train_config(cfg);
    let mut artifacts = Vec::new();
    let mut metrics = Vec::new();
    for cohort in &cohorts {
        let model_cfg = abmil_config(cfg, cohort);
        let folds = stratified_kfold(cohort, cfg.folds, tc.seed)?;
        let cv = train_cancer_specific(cohort, &folds, &model_cfg, &tc)?;
        for outcome in &cv.folds {
            let path = fold_ckpt(common, &cohort.cancer_code, outcome.fold);
            if !common.force && path.exists() {
                return Err(Error::Contract(format!(
                    "output {} already exists; rerun with --force to overwrite",
                    path.display()
                )));
            }
            std::fs::create_dir_all(ckpt_dir(common))
                .map_err(|e| Error::io(ckpt_dir(common).display().to_string(), e))?;
            save_abmil(&path, &outcome.model)?;
            artifacts.push(record(&common.out, &path)?);
        }
        let all: Vec<usize> = (0..cohort.bags.len()).collect();
        let mut full = AbmilModel::init(model_cfg, tc.seed);
        fit_abmil(&mut full, cohort, &all, &tc)?;
        let path = full_ckpt(common, &cohort.cancer_code);
        save_abmil(&path, &full)?;
        artifacts.push(record(&common.out, &path)?);
        metrics.push(CancerMetrics {
            cancer: cohort.cancer_code.clone(),
            mean_c_index: cv.mean_c_index,
            sigma_c_index: cv.sigma_c_index,
            per_fold: cv.per_fold_c(),
        });
    }
    let mpath = metrics_path(common);
    write_bytes(&mpath, &serde_json::to_vec_pretty(&metrics)?, common.force)?;
    artifacts.push(record(&common.out, &mpath)?);
    Ok(artifacts)
}

fn matrix_path(common: &Common) -> PathBuf {
    common.out.join("transfer_matrix.json")
}

fn cmd_transfer_matrix(
    cfg: &ExperimentConfig,
    common: &Common,
) -> Result<Vec<ArtifactRecord>, Error> {
    let cohorts = load_cohorts(common, "transfer-matrix")?;
    let metrics = load_metrics(common, "transfer-matrix")?;
    let tc = train_config(cfg);
    let mut sources = Vec::new();
    let mut targets = Vec::new();
    let mut own_cv = Vec::new();
    for cohort in &cohorts {
        let code = cohort.cancer_code.clone();
        let path = full_ckpt(common, &code);
        if !path.exists() {
            return Err(Error::MissingPrerequisite(format!(
                "checkpoint {} not found; run `milsurv train` first",
                path.display()
            )));
        }
        sources.push((code.clone(), load_abmil(&path)?));
        targets.push((
            code.clone(),
            cohort.clone(),
            Some(stratified_kfold(cohort, cfg.folds, tc.seed)?),
        ));
        let m = metrics
            .iter()
            .find(|m| m.cancer == code)
            .ok_or_else(|| {
                Error::MissingPrerequisite(format!(
                    "no CV metrics for {code}; run `milsurv train` first"
                ))
            })?;
        own_cv.push((
            code,
            TransferCell {
                mean: m.mean_c_index,
                sigma: Some(m.sigma_c_index),
            },
        ));
    }
    let matrix = transfer_matrix(&sources, &targets, &own_cv)?;
    let json_path = matrix_path(common);
    write_bytes(&json_path, &serde_json::to_vec_pretty(&matrix)?, common.force)?;
    let csv_path = common.out.join("transfer_matrix.csv");
    write_bytes(&csv_path, matrix.to_csv().as_bytes(), common.force)?;
    Ok(vec![
        record(&common.out, &json_path)?,
        record(&common.out, &csv_path)?,
    ])
}

fn load_matrix(common: &Common, needed_by: &str) -> Result<TransferMatrix, Error> {
    let path = matrix_path(common);
    let raw = std::fs::read(&path).map_err(|_| {
        Error::MissingPrerequisite(format!(
            "{} not found; run `milsurv transfer-matrix` first ({needed_by} requires it)",
            path.display()
        ))
    })?;
    Ok(serde_json::from_slice(&raw)?)
}

fn cmd_factors(cfg: &ExperimentConfig, common: &Common) -> Result<Vec<ArtifactRecord>, Error> {
    let _ = cfg;
    let cohorts = load_cohorts(common, "factors")?;
    let matrix = load_matrix(common, "factors")?;
    let analysis = factor_analysis(&matrix, &cohorts)?;
    let json_path = common.out.join("factors.json");
    write_bytes(&json_path, &serde_json::to_vec_pretty(&analysis)?, common.force)?;
    let csv_path = common.out.join("factors.csv");
    write_bytes(&csv_path, analysis.rows_csv().as_bytes(), common.force)?;
    Ok(vec![
        record(&common.out, &json_path)?,
        record(&common.out, &csv_path)?,
    ])
}

fn target_code<'a>(cfg: &'a ExperimentConfig, command: &str) -> Result<&'a str, Error> {
    cfg.target.as_deref().ok_or_else(|| {
        Error::Contract(format!("config is missing `target` (required by {command})"))
    })
}

/// One expert registry per fold: full-cohort source models shared across
/// folds plus the target's own fold model.
fn fold_registries(
    common: &Common,
    cohorts: &[Cohort],
    target: &str,
    folds: usize,
) -> Result<Vec<Vec<Expert>>, Error> {
    let mut sources = Vec::new();
    for cohort in cohorts {
        if cohort.cancer_code == target {
            continue;
        }
        let path = full_ckpt(common, &cohort.cancer_code);
        if !path.exists() {
            return Err(Error::MissingPrerequisite(format!(
                "checkpoint {} not found; run `milsurv train` first",
                path.display()
            )));
        }
        sources.push(Expert {
            code: cohort.cancer_code.clone(),
            encoder: load_abmil(&path)?,
        });
    }
    let mut registries = Vec::with_capacity(folds);
    for fold in 0..folds {
        let path = fold_ckpt(common, target, fold);
        if !path.exists() {
            return Err(Error::MissingPrerequisite(format!(
                "checkpoint {} not found; run `milsurv train` first",
                path.display()
            )));
        }
        let mut registry = sources.clone();
        registry.push(Expert {
            code: target.to_string(),
            encoder: load_abmil(&path)?,
        });
        registries.push(registry);
    }
    Ok(registries)
}

fn moe_config(cfg: &ExperimentConfig, n_experts: usize) -> MoeConfig {
    cfg.moe
        .clone()
        .unwrap_or_else(|| MoeConfig::desk(n_experts.min(3)))
}

#[derive(Debug, Serialize)]
struct RoupktMetrics {
    target: String,
    mean_c_index: f64,
    sigma_c_index: f64,
    per_fold: Vec<f64>,
    baseline_c_index: f64,
    gain: f64,
}

fn cmd_roupkt(cfg: &ExperimentConfig, common: &Common) -> Result<Vec<ArtifactRecord>, Error> {
    let target = target_code(cfg, "roupkt")?;
    let cohorts = load_cohorts(common, "roupkt")?;
    let metrics = load_metrics(common, "roupkt")?;
    let cohort = cohorts
        .iter()
        .find(|c| c.cancer_code == target)
        .ok_or_else(|| Error::Contract(format!("unknown target cancer {target}")))?;
    let baseline = metrics
        .iter()
        .find(|m| m.cancer == target)
        .ok_or_else(|| {
            Error::MissingPrerequisite(format!(
                "no CV metrics for {target}; run `milsurv train` first"
            ))
        })?
        .mean_c_index;
    let tc = train_config(cfg);
    let folds = stratified_kfold(cohort, cfg.folds, tc.seed)?;
    let registries = fold_registries(common, &cohorts, target, cfg.folds)?;
    let moe_cfg = moe_config(cfg, registries[0].len());
    moe_cfg.validate(registries[0].len())?;
    let cv = train_moe_cv(cohort, &folds, &registries, &moe_cfg, &tc)?;

    let dir = common.out.join("roupkt");
    let mut artifacts = Vec::new();
    for outcome in &cv.folds {
        let ckpt = dir.join(format!("{target}.fold{}.pktm", outcome.fold));
        if !common.force && ckpt.exists() {
            return Err(Error::Contract(format!(
                "output {} already exists; rerun with --force to overwrite",
                ckpt.display()
            )));
        }
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        save_moe(&ckpt, &outcome.model)?;
        artifacts.push(record(&common.out, &ckpt)?);
        let log = dir.join(format!("{target}.fold{}.routing.csv", outcome.fold));
        write_routing_log(&log, &outcome.routing_log)?;
        artifacts.push(record(&common.out, &log)?);
    }
    let summary = RoupktMetrics {
        target: target.to_string(),
        mean_c_index: cv.mean_c_index,
        sigma_c_index: cv.sigma_c_index,
        per_fold: cv.folds.iter().map(|f| f.test_c_index).collect(),
        baseline_c_index: baseline,
        gain: cv.mean_c_index - baseline,
    };
    let mpath = dir.join(format!("{target}.metrics.json"));
    write_bytes(&mpath, &serde_json::to_vec_pretty(&summary)?, common.force)?;
    artifacts.push(record(&common.out, &mpath)?);
    Ok(artifacts)
}

fn cmd_ablate(cfg: &ExperimentConfig, common: &Common) -> Result<Vec<ArtifactRecord>, Error> {
    let target = target_code(cfg, "ablate")?;
    let cohorts = load_cohorts(common, "ablate")?;
    let matrix = load_matrix(common, "ablate")?;
    let cohort = cohorts
        .iter()
        .find(|c| c.cancer_code == target)
        .ok_or_else(|| Error::Contract(format!("unknown target cancer {target}")))?;
    let tc = train_config(cfg);
    let folds = stratified_kfold(cohort, cfg.folds, tc.seed)?;
    let registries = fold_registries(common, &cohorts, target, cfg.folds)?;
    let moe_cfg = moe_config(cfg, registries[0].len());
    // positive transfer onto the target, read from the matrix
    let positive: BTreeSet<String> = matrix
        .sources
        .iter()
        .filter(|s| s.as_str() != target)
        .filter(|s| {
            matrix
                .cell(s, target)
                .map(|c| c.mean > 0.5)
                .unwrap_or(false)
        })
        .cloned()
        .collect();
    let variants = default_variants(registries[0].len());
    let report = ablation_suite(cohort, &folds, &registries, &moe_cfg, &tc, &variants, &positive)?;
    let dir = common.out.join("ablate");
    let json_path = dir.join(format!("{target}.json"));
    write_bytes(&json_path, &serde_json::to_vec_pretty(&report)?, common.force)?;
    let csv_path = dir.join(format!("{target}.csv"));
    write_bytes(&csv_path, report.to_csv().as_bytes(), common.force)?;
    Ok(vec![
        record(&common.out, &json_path)?,
        record(&common.out, &csv_path)?,
    ])
}

fn cmd_attention(cfg: &ExperimentConfig, common: &Common) -> Result<Vec<ArtifactRecord>, Error> {
    let target = target_code(cfg, "attention")?;
    let bag_id = cfg
        .bag
        .as_deref()
        .ok_or_else(|| Error::Contract("config is missing `bag` (required by attention)".into()))?;
    let cohorts = load_cohorts(common, "attention")?;
    let cohort = cohorts
        .iter()
        .find(|c| c.cancer_code == target)
        .ok_or_else(|| Error::Contract(format!("unknown target cancer {target}")))?;
    let bag = cohort
        .bags
        .iter()
        .find(|b| b.bag_id == bag_id)
        .ok_or_else(|| Error::Contract(format!("bag {bag_id} not found in {target}")))?;
    let path = full_ckpt(common, target);
    if !path.exists() {
        return Err(Error::MissingPrerequisite(format!(
            "checkpoint {} not found; run `milsurv train` first",
            path.display()
        )));
    }
    let model = load_abmil(&path)?;
    let out_path = common.out.join("attention").join(format!("{bag_id}.csv"));
    if !common.force && out_path.exists() {
        return Err(Error::Contract(format!(
            "output {} already exists; rerun with --force to overwrite",
            out_path.display()
        )));
    }
    if let Some(dir) = out_path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    }
    attention_dump(&model, bag, &out_path)?;
    Ok(vec![record(&common.out, &out_path)?])
}

#[derive(Debug, Serialize)]
struct CsvSummary {
    path: String,
    rows: usize,
}

#[derive(Debug, Serialize)]
struct Report {
    manifests: Vec<(String, RunManifest)>,
    /// Data rows (header excluded) per CSV artifact.
    csv_row_counts: Vec<CsvSummary>,
    total_artifacts: usize,
}

fn cmd_report(common: &Common) -> Result<Vec<ArtifactRecord>, Error> {
    let mut names: Vec<PathBuf> = std::fs::read_dir(&common.out)
        .map_err(|e| Error::io(common.out.display().to_string(), e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.ends_with(".manifest.json"))
        })
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::MissingPrerequisite(format!(
            "no run manifests in {}; run a pipeline command first",
            common.out.display()
        )));
    }
    let mut manifests = Vec::new();
    let mut csv_row_counts = Vec::new();
    let mut total_artifacts = 0usize;
    for path in &names {
        let raw = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let manifest: RunManifest = serde_json::from_slice(&raw)
            .map_err(|e| Error::Integrity(format!("corrupt manifest {}: {e}", path.display())))?;
        for artifact in &manifest.artifacts {
            total_artifacts += 1;
            let apath = common.out.join(&artifact.path);
            let actual = file_checksum(&apath)?;
            if actual != artifact.checksum {
                return Err(Error::Integrity(format!(
                    "artifact {} does not match its manifest checksum",
                    artifact.path
                )));
            }
            if artifact.path.ends_with(".csv") {
                let text = std::fs::read_to_string(&apath)
                    .map_err(|e| Error::io(apath.display().to_string(), e))?;
                csv_row_counts.push(CsvSummary {
                    path: artifact.path.clone(),
                    rows: text.lines().count().saturating_sub(1),
                });
            }
        }
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        manifests.push((name, manifest));
    }
    let report = Report {
        manifests,
        csv_row_counts,
        total_artifacts,
    };
    let path = common.out.join("report.json");
    write_bytes(&path, &serde_json::to_vec_pretty(&report)?, true)?;
    Ok(vec![record(&common.out, &path)?])
}
