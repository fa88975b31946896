//! Subcommand implementations. Each writes its artifacts under
//! `<out>/<subcommand>/` (raw simulated data under `<out>/raw/`, the cleaned
//! dataset under `<out>/dataset/`), its effective configuration as
//! `<out>/config.<subcommand>.toml` and a manifest as
//! `<out>/manifest.<subcommand>.json`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use gxe_core::data::io::{fmt_f64, read_dataset, write_dataset, write_env_vectors, CsvOut};
use gxe_core::data::{
    filter_dataset, filter_markers, impute_environment, impute_markers, load_dataset, raw_env_vectors, Dataset,
    EnvPaths, MarkerFilter,
};
use gxe_core::evaluation::{
    compare_models, evaluate, gain_curve, read_predictions, select_global, select_per_environment,
    write_environment_metrics, write_gain_curve, write_metrics, write_predictions, write_selection, Comparison,
    MetricReport, MetricsRow, ModelReplicates, PredictionSet,
};
use gxe_core::mixed::{read_labels, write_blups, write_fa_fit, write_labels};
use gxe_core::neural::{load_checkpoint, save_checkpoint, write_trace, Recomposition};
use gxe_core::seeds::SeedStream;
use gxe_core::simgen::{simulate, write_truth};
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::manifest::Manifest;
use crate::pipeline::{
    cell_seed, decompose, fit_network, fold_spec, observed_cells, predict_network, prepare_fold, run_cell,
    stage_seeds, CellRun, FoldData, ModelKind,
};
use crate::tune::{tune, write_best_network, write_leaderboard};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Simulate,
    Ingest,
    Decompose,
    Train,
    Predict,
    Evaluate,
    Select,
    Tune,
    Experiment,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Ingest => "ingest",
            Command::Decompose => "decompose",
            Command::Train => "train",
            Command::Predict => "predict",
            Command::Evaluate => "evaluate",
            Command::Select => "select",
            Command::Tune => "tune",
            Command::Experiment => "experiment",
        }
    }
}

/// Runs one subcommand. `config_path` is recorded in the manifest when given.
pub fn run(cmd: Command, cfg: &RunConfig, config_path: Option<&Path>) -> Result<PathBuf> {
    std::fs::create_dir_all(&cfg.out).map_err(|e| CliError::io(&cfg.out, e))?;
    let mut m = Manifest::new(cmd.name(), &cfg.out, cfg.seed);
    if let Some(p) = config_path {
        m.read(p);
    }
    let effective = cfg.out.join(format!("config.{}.toml", cmd.name()));
    std::fs::write(&effective, cfg.effective_toml()?).map_err(|e| CliError::io(&effective, e))?;
    m.written(&effective);
    match cmd {
        Command::Simulate => run_simulate(cfg, &mut m)?,
        Command::Ingest => run_ingest(cfg, &mut m)?,
        Command::Decompose => run_decompose(cfg, &mut m)?,
        Command::Train => run_train(cfg, &mut m)?,
        Command::Predict => run_predict(cfg, &mut m)?,
        Command::Evaluate => run_evaluate(cfg, &mut m)?,
        Command::Select => run_select(cfg, &mut m)?,
        Command::Tune => run_tune(cfg, &mut m)?,
        Command::Experiment => run_experiment(cfg, &mut m)?,
    }
    m.finish()
}

fn require(path: &Path, producer: &'static str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::MissingArtifact {
            path: path.to_path_buf(),
            producer,
        })
    }
}

fn stage_dir(cfg: &RunConfig, cmd: Command) -> Result<PathBuf> {
    let dir = cfg.out.join(cmd.name());
    std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    Ok(dir)
}

const DATASET_FILES: [&str; 5] = ["trials.csv", "markers.csv", "weather.csv", "soil.csv", "management.csv"];

fn load_clean(cfg: &RunConfig, m: &mut Manifest) -> Result<Dataset> {
    let dir = cfg.dataset_dir();
    for f in DATASET_FILES {
        require(&dir.join(f), "ingest")?;
        m.read(dir.join(f));
    }
    Ok(read_dataset(&dir)?)
}

/// The configured fold of the step-wise pipeline, prepared.
fn step_fold(cfg: &RunConfig, d: &Dataset) -> Result<FoldData> {
    let spec = fold_spec(d, cfg.seed)?;
    let index = cfg.folds.index.unwrap_or(spec.tuning_fold_index);
    let fold = spec
        .folds
        .get(index)
        .ok_or_else(|| CliError::Invalid(format!("folds.index {index} is out of range")))?;
    prepare_fold(d, index, fold)
}

fn run_simulate(cfg: &RunConfig, m: &mut Manifest) -> Result<()> {
    m.seed("simulate", cfg.simulate.seed);
    let (d, truth) = simulate(&cfg.simulate)?;
    let dir = cfg.out.join("raw");
    m.written_all(write_dataset(&dir, &d)?);
    let mut envs = d.environments.clone();
    envs.env_vector = Some(raw_env_vectors(&envs)?);
    let ev = dir.join("env_vectors.csv");
    write_env_vectors(&ev, &envs)?;
    m.written(ev);
    m.written_all(write_truth(&dir.join("truth"), &truth)?);
    log::info!("simulated {} records into {}", d.records.len(), dir.display());
    Ok(())
}

fn run_ingest(cfg: &RunConfig, m: &mut Manifest) -> Result<()> {
    let dir = cfg.raw_dir();
    let trials = dir.join("trials.csv");
    let markers = dir.join("markers.csv");
    let weather = dir.join("weather.csv");
    for p in [&trials, &markers, &weather] {
        require(p, "simulate")?;
        m.read(p);
    }
    let optional = |name: &str| Some(dir.join(name)).filter(|p| p.is_file());
    let env_paths = EnvPaths {
        weather,
        soil: optional("soil.csv"),
        management: optional("management.csv"),
    };
    for p in env_paths.soil.iter().chain(&env_paths.management) {
        m.read(p);
    }
    let raw = load_dataset(&trials, &markers, &env_paths)?;
    let environments = impute_environment(&raw.environments)?;
    let mut genotypes = raw.genotypes.clone();
    if let Some(f) = &cfg.ingest.markers {
        let seed = SeedStream::fork(cfg.seed, "ingest/markers").next_seed();
        m.seed("ingest/markers", seed);
        genotypes = filter_markers(
            &genotypes,
            &MarkerFilter {
                maf_min: f.maf_min,
                max_missing: f.max_missing,
                target_count: f.target_count,
                seed,
            },
        )?;
    }
    let genotypes = impute_markers(&genotypes)?;
    let (clean, report) = filter_dataset(&Dataset {
        records: raw.records,
        genotypes,
        environments,
    })?;
    clean.validate()?;
    let out = cfg.dataset_dir();
    m.written_all(write_dataset(&out, &clean)?);
    let rp = out.join("filter_report.csv");
    let mut w = CsvOut::create(&rp, &["cause", "count"])?;
    for (k, v) in [
        ("missing_yield", report.missing_yield),
        ("missing_markers", report.missing_markers),
        ("missing_weather", report.missing_weather),
        ("environments_removed", report.environments_removed),
    ] {
        w.row([k.to_string(), v.to_string()])?;
    }
    w.finish()?;
    m.written(rp);
    Ok(())
}

fn run_decompose(cfg: &RunConfig, m: &mut Manifest) -> Result<()> {
    let d = load_clean(cfg, m)?;
    let fold = step_fold(cfg, &d)?;
    let (fa_seed, _) = stage_seeds(cell_seed(cfg.seed, ModelKind::Mixinn, fold.index, 0));
    m.seed("decompose", fa_seed);
    let settings = cfg.pipeline_settings()?;
    let (fit, labels) = decompose(&fold.train, &settings.fa, fa_seed)?;
    let dir = stage_dir(cfg, Command::Decompose)?;
    let files = [dir.join("fa_fit.csv"), dir.join("blups.csv"), dir.join("labels.csv")];
    write_fa_fit(&files[0], &fit)?;
    write_blups(&files[1], &fit)?;
    write_labels(&files[2], &labels)?;
    m.written_all(files);
    Ok(())
}

fn run_train(cfg: &RunConfig, m: &mut Manifest) -> Result<()> {
    let d = load_clean(cfg, m)?;
    let fold = step_fold(cfg, &d)?;
    let labels_path = cfg.out.join("decompose").join("labels.csv");
    require(&labels_path, "decompose")?;
    m.read(&labels_path);
    let labels = read_labels(&labels_path)?;
    let (_, net_seed) = stage_seeds(cell_seed(cfg.seed, ModelKind::Mixinn, fold.index, 0));
    m.seed("train", net_seed);
    let fit = fit_network(&fold.train, &labels, &cfg.pipeline_settings()?.network, net_seed)?;
    let dir = stage_dir(cfg, Command::Train)?;
    let ckpt = dir.join("model.ckpt");
    save_checkpoint(&ckpt, &fit.model)?;
    let trace = dir.join("trace.csv");
    write_trace(
        &trace,
        &[
            ("genotype", &fit.genotype_trace),
            ("environment", &fit.environment_trace),
            ("interaction", &fit.interaction_trace),
        ],
    )?;
    m.written_all([ckpt, trace]);
    Ok(())
}

fn run_predict(cfg: &RunConfig, m: &mut Manifest) -> Result<()> {
    let d = load_clean(cfg, m)?;
    let fold = step_fold(cfg, &d)?;
    let ckpt = cfg.out.join("train").join("model.ckpt");
    require(&ckpt, "train")?;
    m.read(&ckpt);
    let model = load_checkpoint(&ckpt)?;
    let cells = observed_cells(&fold.test);
    let dir = stage_dir(cfg, Command::Predict)?;
    for (name, terms) in [
        ("predictions.csv", Recomposition::Full),
        ("predictions_additive.csv", Recomposition::Additive),
    ] {
        let path = dir.join(name);
        write_predictions(&path, &predict_network(&model, &fold.test, &cells, terms)?)?;
        m.written(path);
    }
    Ok(())
}

fn input_predictions(cfg: &RunConfig, explicit: &Option<PathBuf>, m: &mut Manifest) -> Result<(String, PredictionSet)> {
    let path = explicit
        .clone()
        .unwrap_or_else(|| cfg.out.join("predict").join("predictions.csv"));
    require(&path, "predict")?;
    m.read(&path);
    let name = path.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned());
    Ok((name, read_predictions(&path)?))
}

fn run_evaluate(cfg: &RunConfig, m: &mut Manifest) -> Result<()> {
    let (name, p) = input_predictions(cfg, &cfg.evaluate.predictions, m)?;
    let report = evaluate(&p)?;
    let dir = stage_dir(cfg, Command::Evaluate)?;
    let metrics = dir.join("metrics.csv");
    let by_env = dir.join("metrics_by_environment.csv");
    write_metrics(
        &metrics,
        &[MetricsRow {
            model: name,
            fold: String::new(),
            replicate: 0,
            n: p.len(),
            report: report.clone(),
        }],
    )?;
    write_environment_metrics(&by_env, &report.ranking.per_environment)?;
    m.written_all([metrics, by_env]);
    Ok(())
}

fn run_select(cfg: &RunConfig, m: &mut Manifest) -> Result<()> {
    let (_, p) = input_predictions(cfg, &cfg.select.predictions, m)?;
    let s = &cfg.select;
    let mut reports = Vec::new();
    for &f in &s.fractions {
        reports.push(select_global(&p, f, s.coverage_min)?);
        reports.push(select_per_environment(&p, f)?);
    }
    let dir = stage_dir(cfg, Command::Select)?;
    let sel = dir.join("selection.csv");
    let curve = dir.join("gain_curve.csv");
    write_selection(&sel, &reports)?;
    write_gain_curve(&curve, &gain_curve(std::slice::from_ref(&p), &s.fractions, s.coverage_min)?)?;
    m.written_all([sel, curve]);
    Ok(())
}

fn run_tune(cfg: &RunConfig, m: &mut Manifest) -> Result<()> {
    let spec = cfg
        .tune
        .as_ref()
        .ok_or_else(|| CliError::Invalid("tune needs a [tune] section".into()))?;
    let d = load_clean(cfg, m)?;
    let folds = fold_spec(&d, cfg.seed)?;
    let index = folds.tuning_fold_index;
    let fold = prepare_fold(&d, index, &folds.folds[index])?;
    let fa_seed = SeedStream::fork(cfg.seed, "tune/decompose").next_seed();
    m.seed("tune/decompose", fa_seed);
    let settings = cfg.pipeline_settings()?;
    let (_, labels) = decompose(&d, &settings.fa, fa_seed)?;
    let result = tune(spec, &cfg.network, cfg.profile, &fold, &labels, cfg.seed)?;
    let dir = stage_dir(cfg, Command::Tune)?;
    let board = dir.join("leaderboard.csv");
    write_leaderboard(&board, spec, &result.leaderboard)?;
    m.written(board);
    m.written(write_best_network(&dir.join("best_network.toml"), &result.best_network)?);
    Ok(())
}

/// Directory of one experiment cell.
pub fn cell_dir(root: &Path, model: ModelKind, fold: usize, replicate: usize) -> PathBuf {
    root.join(model.name()).join(format!("fold{fold}")).join(format!("rep{replicate}"))
}

const SUMMARY_METRICS: [&str; 5] = ["rmse", "mae", "pearson_r", "r_j", "rho_j"];

fn metric_values(r: &MetricReport) -> [Option<f64>; 5] {
    [
        Some(r.regression.rmse),
        Some(r.regression.mae),
        r.regression.pearson_r,
        r.ranking.r_j,
        r.ranking.rho_j,
    ]
}

fn write_summary(path: &Path, c: &Comparison) -> Result<()> {
    let mut w = CsvOut::create(path, &["metric", "model", "n", "mean", "sd", "is_best", "p_vs_best"])?;
    for s in &c.summaries {
        w.row([
            s.metric.clone(),
            s.model.clone(),
            s.n.to_string(),
            fmt_f64(s.mean),
            s.sd.map(fmt_f64).unwrap_or_default(),
            s.is_best.to_string(),
            s.p_vs_best.map(fmt_f64).unwrap_or_default(),
        ])?;
    }
    Ok(w.finish()?)
}

/// Runs every (model, fold, replicate) cell of the plan on the first
/// `folds` cross-validation folds.
pub fn experiment_cells(cfg: &RunConfig, d: &Dataset) -> Result<Vec<CellRun>> {
    let plan = &cfg.experiment;
    let spec = fold_spec(d, cfg.seed)?;
    if plan.folds > spec.folds.len() {
        return Err(CliError::Invalid(format!(
            "experiment.folds = {} but only {} folds exist",
            plan.folds,
            spec.folds.len()
        )));
    }
    let folds = (0..plan.folds)
        .map(|k| prepare_fold(d, k, &spec.folds[k]))
        .collect::<Result<Vec<_>>>()?;
    let settings = cfg.pipeline_settings()?;
    let mut jobs = Vec::new();
    for &model in &plan.models {
        for fold in &folds {
            for rep in 0..plan.replicates {
                jobs.push((model, fold, rep));
            }
        }
    }
    let run = |&(model, fold, rep): &(ModelKind, &FoldData, usize)| run_cell(model, fold, &settings, cfg.seed, rep);
    if cfg.workers > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build()
            .map_err(|e| CliError::Invalid(e.to_string()))?;
        pool.install(|| jobs.par_iter().map(run).collect())
    } else {
        jobs.iter().map(run).collect()
    }
}

fn run_experiment(cfg: &RunConfig, m: &mut Manifest) -> Result<()> {
    let d = load_clean(cfg, m)?;
    for &model in &cfg.experiment.models {
        for fold in 0..cfg.experiment.folds {
            for rep in 0..cfg.experiment.replicates {
                m.seed(format!("{}/fold{fold}/rep{rep}", model.name()), cell_seed(cfg.seed, model, fold, rep));
            }
        }
    }
    let runs = experiment_cells(cfg, &d)?;
    let root = stage_dir(cfg, Command::Experiment)?;
    let mut rows = Vec::new();
    let mut replicates: BTreeMap<String, BTreeMap<String, Vec<f64>>> = BTreeMap::new();
    let mut sets: BTreeMap<ModelKind, Vec<PredictionSet>> = BTreeMap::new();
    for run in &runs {
        let path = cell_dir(&root, run.model, run.fold, run.replicate).join("predictions.csv");
        write_predictions(&path, &run.predictions)?;
        m.written(path);
        sets.entry(run.model).or_default().push(run.predictions.clone());
        let variants = std::iter::once((run.model.name().to_string(), &run.predictions))
            .chain(run.additive.iter().map(|a| (format!("{}_additive", run.model.name()), a)));
        for (name, p) in variants {
            let report = evaluate(p)?;
            let per_model = replicates.entry(name.clone()).or_default();
            for (metric, v) in SUMMARY_METRICS.iter().zip(metric_values(&report)) {
                per_model.entry(metric.to_string()).or_default().extend(v);
            }
            rows.push(MetricsRow {
                model: name,
                fold: run.fold.to_string(),
                replicate: run.replicate,
                n: p.len(),
                report,
            });
        }
    }
    let metrics = root.join("metrics.csv");
    write_metrics(&metrics, &rows)?;
    m.written(metrics);

    let models: Vec<ModelReplicates> = replicates
        .into_iter()
        .map(|(model, metrics)| ModelReplicates { model, metrics })
        .collect();
    let summary = root.join("summary.csv");
    write_summary(&summary, &compare_models(&models, &[])?)?;
    m.written(summary);

    for (model, p) in &sets {
        let path = root.join(model.name()).join("gain_curve.csv");
        write_gain_curve(&path, &gain_curve(p, &cfg.select.fractions, cfg.select.coverage_min)?)?;
        m.written(path);
    }
    Ok(())
}
