use std::fs;
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use serde::Serialize;
use splitopf::acopf::SolutionFile;
use splitopf::datagen::{generate_dataset, read_dataset, write_dataset, Dataset};
use splitopf::evaluation::{
    compare_models, emit_report, evaluate, loadflow_stats, read_predictions, read_report, write_predictions,
    DumpedPrediction, ReportFormat,
};
use splitopf::netmodel::{parse_case, NetworkCase};
use splitopf::partition::{auto_partition, induce_partition, partition_stats, Partition, RegionAssignment};
use splitopf::solver::SolveStatus;
use splitopf::training::{
    assemble_prediction, predict_direct, train_direct, train_stage1, train_stage2, write_log, OpfPrediction,
    Predictor, TrainOutcome,
};

use crate::config::RunConfig;
use crate::Failure;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelArg {
    /// Single network over the whole grid (model O)
    Direct,
    /// Coupling model plus one model per region (model D)
    Decomposed,
}

impl ModelArg {
    fn name(self) -> &'static str {
        match self {
            ModelArg::Direct => "direct",
            ModelArg::Decomposed => "decomposed",
        }
    }
}

fn require(path: &Path, what: &str) -> Result<(), Failure> {
    if path.exists() {
        Ok(())
    } else {
        Err(Failure::config(format!("{what} {} does not exist", path.display())))
    }
}

fn create_dir(path: &Path) -> Result<(), Failure> {
    fs::create_dir_all(path).map_err(|e| Failure::config(format!("cannot create {}: {e}", path.display())))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Failure::config(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Failure::config(format!("cannot write {}: {e}", path.display())))
}

/// Writes `run.json` into the run directory.
pub fn echo(cfg: &RunConfig, command: &str) -> Result<(), Failure> {
    #[derive(Serialize)]
    struct Echo<'a> {
        command: &'a str,
        config: &'a RunConfig,
    }
    create_dir(&cfg.run_dir)?;
    write_json(&cfg.run_dir.join("run.json"), &Echo { command, config: cfg })
}

fn load_case(cfg: &RunConfig) -> Result<NetworkCase, Failure> {
    let path = cfg.case_path()?;
    require(path, "case file")?;
    let text = fs::read_to_string(path).map_err(|e| Failure::config(format!("cannot read {}: {e}", path.display())))?;
    let case = parse_case(&text)?;
    Ok(match cfg.voltage_band {
        Some([lo, hi]) => case.with_voltage_band_at_least(lo, hi)?,
        None => case,
    })
}

fn load_partition(cfg: &RunConfig, case: &NetworkCase) -> Result<Partition, Failure> {
    let path = cfg.partition_path();
    require(path, "partition file")?;
    let text = fs::read_to_string(path).map_err(|e| Failure::config(format!("cannot read {}: {e}", path.display())))?;
    Ok(induce_partition(case, &RegionAssignment::from_json(&text)?)?)
}

fn load_dataset(cfg: &RunConfig, case: &NetworkCase, partition: Option<&Partition>) -> Result<Dataset, Failure> {
    require(cfg.dataset_dir(), "dataset directory")?;
    let ds = read_dataset(cfg.dataset_dir())?;
    ds.check_compatible(case, partition)?;
    Ok(ds)
}

fn stage1_path(cfg: &RunConfig) -> PathBuf {
    cfg.models_dir().join("stage1.model")
}

fn region_path(cfg: &RunConfig, k: usize) -> PathBuf {
    cfg.models_dir().join(format!("region{k}.model"))
}

fn direct_path(cfg: &RunConfig) -> PathBuf {
    cfg.models_dir().join("direct.model")
}

fn predictions_path(cfg: &RunConfig, model: ModelArg) -> PathBuf {
    cfg.reports_dir().join(format!("predictions-{}.ndjson", model.name()))
}

// Saves the checkpoint and log, then turns an aborted run into exit code 4.
fn save_outcome(out: &TrainOutcome, model: &Path) -> Result<(), Failure> {
    out.model.write(model)?;
    write_log(&model.with_extension("log.csv"), &out.log)?;
    println!("{}: best holdout L0 {:.6e}", model.display(), out.best_holdout_l0);
    Ok(())
}

fn check_aborted<'a>(outcomes: impl IntoIterator<Item = &'a TrainOutcome>) -> Result<(), Failure> {
    let reasons: Vec<&str> = outcomes.into_iter().filter_map(|o| o.aborted.as_deref()).collect();
    if reasons.is_empty() {
        Ok(())
    } else {
        Err(Failure { code: 4, msg: format!("training aborted: {}", reasons.join("; ")) })
    }
}

pub fn gen_data(cfg: &RunConfig) -> Result<(), Failure> {
    let case = load_case(cfg)?;
    let partition = load_partition(cfg, &case)?;
    let ds = generate_dataset(&case, &partition, cfg.samples, &cfg.sampler, &cfg.solver, cfg.workers)?;
    write_dataset(cfg.dataset_dir(), &ds)?;
    println!(
        "{}: {} samples from {} draws ({} train / {} test)",
        cfg.dataset_dir().display(),
        ds.samples.len(),
        ds.manifest.attempts,
        ds.manifest.train.len(),
        ds.manifest.test.len()
    );
    Ok(())
}

pub fn partition(cfg: &RunConfig) -> Result<(), Failure> {
    let case = load_case(cfg)?;
    let assignment = match &cfg.paths.assignment {
        Some(path) => {
            require(path, "assignment file")?;
            let text =
                fs::read_to_string(path).map_err(|e| Failure::config(format!("cannot read {}: {e}", path.display())))?;
            RegionAssignment::from_json(&text)?
        }
        None => auto_partition(&case, cfg.regions, cfg.seed.unwrap_or_default())?,
    };
    let p = induce_partition(&case, &assignment)?;
    let out = cfg.partition_path();
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    fs::write(out, assignment.to_json()).map_err(|e| Failure::config(format!("cannot write {}: {e}", out.display())))?;
    let stats = partition_stats(&case, &p);
    println!(
        "{}: {} regions, sizes {:?}, {} coupling lines ({:.1}%)",
        out.display(),
        p.k(),
        stats.region_sizes,
        stats.coupling_edges,
        100.0 * stats.coupling_fraction
    );
    Ok(())
}

pub fn train_stage1_cmd(cfg: &RunConfig) -> Result<(), Failure> {
    let case = load_case(cfg)?;
    let p = load_partition(cfg, &case)?;
    let ds = load_dataset(cfg, &case, Some(&p))?;
    if p.coupling_edges.is_empty() {
        println!("partition has no coupling lines; there is no first stage to train");
        return Ok(());
    }
    create_dir(cfg.models_dir())?;
    let out = train_stage1(&case, &p, &ds, &cfg.train)?;
    save_outcome(&out, &stage1_path(cfg))?;
    check_aborted([&out])
}

pub fn train_stage2_cmd(cfg: &RunConfig) -> Result<(), Failure> {
    let case = load_case(cfg)?;
    let p = load_partition(cfg, &case)?;
    let ds = load_dataset(cfg, &case, Some(&p))?;
    let coupling = read_stage1(cfg, &case, &p)?;
    create_dir(cfg.models_dir())?;
    let outcomes = train_stage2(&case, &p, &ds, coupling.as_ref(), &cfg.train, cfg.workers)?;
    for (k, out) in outcomes.iter().enumerate() {
        save_outcome(out, &region_path(cfg, k))?;
    }
    check_aborted(&outcomes)
}

pub fn train_direct_cmd(cfg: &RunConfig) -> Result<(), Failure> {
    let case = load_case(cfg)?;
    let ds = load_dataset(cfg, &case, None)?;
    create_dir(cfg.models_dir())?;
    let out = train_direct(&case, &ds, &cfg.train)?;
    save_outcome(&out, &direct_path(cfg))?;
    check_aborted([&out])
}

fn read_stage1(cfg: &RunConfig, case: &NetworkCase, p: &Partition) -> Result<Option<Predictor>, Failure> {
    if p.coupling_edges.is_empty() {
        return Ok(None);
    }
    let path = stage1_path(cfg);
    require(&path, "first-stage model")?;
    Ok(Some(Predictor::read(&path, case, Some(p))?))
}

enum Models {
    Direct(Predictor),
    Decomposed { partition: Partition, coupling: Option<Predictor>, regions: Vec<Predictor> },
}

impl Models {
    fn load(cfg: &RunConfig, case: &NetworkCase, model: ModelArg) -> Result<Self, Failure> {
        match model {
            ModelArg::Direct => {
                let path = direct_path(cfg);
                require(&path, "direct model")?;
                Ok(Models::Direct(Predictor::read(&path, case, None)?))
            }
            ModelArg::Decomposed => {
                let partition = load_partition(cfg, case)?;
                let coupling = read_stage1(cfg, case, &partition)?;
                let regions = (0..partition.k())
                    .map(|k| {
                        let path = region_path(cfg, k);
                        require(&path, "regional model")?;
                        Ok(Predictor::read(&path, case, Some(&partition))?)
                    })
                    .collect::<Result<_, Failure>>()?;
                Ok(Models::Decomposed { partition, coupling, regions })
            }
        }
    }

    fn check_dataset(&self, ds: &Dataset) -> Result<(), Failure> {
        let models: Vec<&Predictor> = match self {
            Models::Direct(m) => vec![m],
            Models::Decomposed { coupling, regions, .. } => coupling.iter().chain(regions).collect(),
        };
        if models.iter().any(|m| m.dataset_hash != ds.manifest.samples_sha256) {
            return Err(Failure::config("models were trained on a different dataset".into()));
        }
        Ok(())
    }

    fn predict(&self, case: &NetworkCase, loads: &splitopf::acopf::LoadProfile) -> Result<OpfPrediction, Failure> {
        Ok(match self {
            Models::Direct(m) => predict_direct(case, m, loads)?,
            Models::Decomposed { partition, coupling, regions } => {
                assemble_prediction(case, partition, coupling.as_ref(), regions, loads)?
            }
        })
    }
}

pub fn predict(cfg: &RunConfig, model: ModelArg) -> Result<(), Failure> {
    let case = load_case(cfg)?;
    let ds = load_dataset(cfg, &case, None)?;
    let models = Models::load(cfg, &case, model)?;
    models.check_dataset(&ds)?;
    let dumps = ds
        .manifest
        .test
        .iter()
        .map(|&i| Ok(DumpedPrediction { sample: i, prediction: models.predict(&case, &ds.samples[i].loads)? }))
        .collect::<Result<Vec<_>, Failure>>()?;
    create_dir(cfg.reports_dir())?;
    let path = predictions_path(cfg, model);
    write_predictions(&path, &dumps)?;
    println!("{}: {} test predictions", path.display(), dumps.len());
    Ok(())
}

// Predictions aligned with the test split, or an error naming the mismatch.
fn read_test_predictions(cfg: &RunConfig, ds: &Dataset, model: ModelArg) -> Result<Vec<OpfPrediction>, Failure> {
    let path = predictions_path(cfg, model);
    require(&path, "prediction dump")?;
    let dumps = read_predictions(&path)?;
    let order: Vec<usize> = dumps.iter().map(|d| d.sample).collect();
    if order != ds.manifest.test {
        return Err(Failure::config(format!("{} does not match the dataset's test split", path.display())));
    }
    Ok(dumps.into_iter().map(|d| d.prediction).collect())
}

pub fn loadflow(cfg: &RunConfig, model: ModelArg) -> Result<(), Failure> {
    #[derive(Serialize)]
    struct Restored {
        sample: usize,
        status: SolveStatus,
        iterations: usize,
        objective: f64,
        solution: SolutionFile,
    }
    let case = load_case(cfg)?;
    let ds = load_dataset(cfg, &case, None)?;
    let preds = read_test_predictions(cfg, &ds, model)?;
    let (stats, restored) = loadflow_stats(&case, &ds, &preds, &cfg.solver)?;
    let reports = cfg.reports_dir();
    write_json(&reports.join(format!("loadflow-{}.json", model.name())), &stats)?;
    let mut lines = String::new();
    for (&sample, (sol, rep)) in ds.manifest.test.iter().zip(&restored) {
        let r = Restored {
            sample,
            status: rep.status,
            iterations: rep.iterations,
            objective: rep.objective,
            solution: SolutionFile::from_solution(&case, sol),
        };
        lines.push_str(&serde_json::to_string(&r).map_err(|e| Failure::config(e.to_string()))?);
        lines.push('\n');
    }
    let path = reports.join(format!("restored-{}.ndjson", model.name()));
    fs::write(&path, lines).map_err(|e| Failure::config(format!("cannot write {}: {e}", path.display())))?;
    println!(
        "{}: converged {:.1}%, mean gap {:.4}%, mean time {:.3} s (cold AC-OPF {:.3} s)",
        model.name(),
        stats.converged_pct,
        stats.objective_gap_pct.avg,
        stats.loadflow_time_s.avg,
        stats.acopf_time_s.avg
    );
    Ok(())
}

pub fn evaluate_cmd(cfg: &RunConfig, model: ModelArg) -> Result<(), Failure> {
    let case = load_case(cfg)?;
    let ds = load_dataset(cfg, &case, None)?;
    // Loading the models re-checks their case, partition and dataset hashes.
    Models::load(cfg, &case, model)?.check_dataset(&ds)?;
    let preds = read_test_predictions(cfg, &ds, model)?;
    let report = evaluate(&case, &ds, &preds, model.name(), &cfg.thresholds)?;
    let dir = cfg.reports_dir();
    let stem = format!("report-{}", model.name());
    for (format, ext) in [(ReportFormat::Json, "json"), (ReportFormat::Csv, "csv"), (ReportFormat::Markdown, "md")] {
        emit_report(&report, format, &dir.join(format!("{stem}.{ext}")))?;
    }
    print!("{}", splitopf::evaluation::report_markdown(&report));

    let other = dir.join("report-direct.json");
    let mine = dir.join("report-decomposed.json");
    if other.exists() && mine.exists() {
        let rows = compare_models(&read_report(&other)?, &read_report(&mine)?)?;
        write_json(&dir.join("comparison.json"), &rows)?;
        println!("\n| metric | unit | direct | decomposed | ratio |");
        println!("|---|---|---|---|---|");
        for r in &rows {
            println!("| {} | {} | {:.6} | {:.6} | {:.3} |", r.metric, r.unit, r.direct, r.decomposed, r.ratio);
        }
    }
    Ok(())
}
