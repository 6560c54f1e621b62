//! The five verbs: run, grid, report, timing and overhead.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use contistream_core::metrics::{
    self, HeadTiming, MemoryDescriptor, OverheadReport, SampleGeometry,
};
use contistream_core::models::{ContinualModel, HeadMode};
use contistream_core::scenario::{build_scenario, SplitDataset};
use contistream_core::strategies::{run, RunRecord, Strategy};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ConfigError, ExperimentConfig, Loaded};

pub const RUNS_DIR: &str = "runs";
pub const METRICS_CSV: &str = "metrics.csv";
pub const RESOLVED_CONFIG: &str = "resolved_config.toml";

/// One row of `metrics.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub run_id: String,
    pub strategy: Strategy,
    pub head_mode: HeadMode,
    pub seed: u64,
    pub memory: usize,
    pub lambda: f64,
    pub alpha: f64,
    pub acc: f64,
    pub bwt: f64,
    pub forgetting: f64,
    pub scaler_params: usize,
    #[serde(rename = "O")]
    pub o: usize,
    #[serde(rename = "O_CG")]
    pub o_cg: usize,
}

/// Contents of `runs/<run_id>.json`: the resolved config of this one run,
/// its summary metrics and the full record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunDocument {
    pub run_id: String,
    pub experiment: ExperimentConfig,
    pub metrics: MetricsRow,
    pub record: RunRecord,
}

pub fn run_id(
    strategy: Strategy,
    head_mode: HeadMode,
    memory: usize,
    lambda: f64,
    alpha: f64,
    seed: u64,
) -> String {
    format!("{strategy}_{head_mode}_m{memory}_l{lambda}_a{alpha}_s{seed}")
}

fn geometry(config: &ExperimentConfig, data: &SplitDataset) -> SampleGeometry {
    config.overhead.geometry.unwrap_or(SampleGeometry::Flat {
        dim: data.train.feature_dim(),
    })
}

fn metrics_row(record: &RunRecord, seed: u64, per_sample: usize) -> Result<MetricsRow> {
    let c = &record.config;
    let memory = if record.strategy.uses_memory() {
        c.memory_capacity
    } else {
        0
    };
    let o = memory * per_sample;
    let acc = record.acc()?;
    let bwt = record.bwt()?;
    Ok(MetricsRow {
        run_id: run_id(
            record.strategy,
            c.head_mode,
            memory,
            c.loss.lambda,
            c.loss.alpha,
            seed,
        ),
        strategy: record.strategy,
        head_mode: c.head_mode,
        seed,
        memory,
        lambda: c.loss.lambda,
        alpha: c.loss.alpha,
        acc,
        bwt,
        forgetting: -bwt,
        scaler_params: record.parameter_counts.scalers(),
        o,
        o_cg: o + record.parameter_counts.scaler_weights,
    })
}

/// Trains one (config, seed) cell.
pub fn run_cell(config: &ExperimentConfig, data: &SplitDataset, seed: u64) -> Result<RunDocument> {
    let scenario = build_scenario(data, config.scenario.task_count, seed)?;
    let train = contistream_core::strategies::TrainConfig {
        seed,
        ..config.train.clone()
    };
    log::info!("{} seed {seed}: training", config.strategy);
    let record = run(config.strategy, &scenario, &train)
        .with_context(|| format!("{} with seed {seed}", config.strategy))?
        .record;
    let metrics = metrics_row(&record, seed, geometry(config, data).floats())?;
    log::info!(
        "{}: acc {:.4} forgetting {:.4}",
        metrics.run_id,
        metrics.acc,
        metrics.forgetting
    );
    let mut experiment = config.clone();
    experiment.seeds = vec![seed];
    experiment.train.seed = seed;
    Ok(RunDocument {
        run_id: metrics.run_id.clone(),
        experiment,
        metrics,
        record,
    })
}

fn pool(threads: usize) -> Result<rayon::ThreadPool> {
    Ok(rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()?)
}

/// Runs `cells` on `threads` workers; results keep the input order.
fn run_cells(
    data: &SplitDataset,
    cells: &[(ExperimentConfig, u64)],
    threads: usize,
) -> Result<Vec<RunDocument>> {
    pool(threads)?.install(|| {
        cells
            .par_iter()
            .map(|(c, seed)| run_cell(c, data, *seed))
            .collect()
    })
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

/// Reads every run document under `dir/runs`, sorted by run id.
pub fn read_runs(dir: &Path) -> Result<Vec<RunDocument>> {
    let runs = dir.join(RUNS_DIR);
    let mut docs = Vec::new();
    if !runs.is_dir() {
        return Ok(docs);
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(&runs)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.retain(|p| p.extension().is_some_and(|e| e == "json"));
    paths.sort();
    for p in paths {
        let text = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
        docs.push(serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?);
    }
    Ok(docs)
}

fn write_metrics_csv(dir: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(dir.join(METRICS_CSV))?;
    for doc in read_runs(dir)? {
        w.serialize(&doc.metrics)?;
    }
    w.flush()?;
    Ok(())
}

/// `run`: every seed of the configured strategy. Writes one JSON document per
/// run, regenerates `metrics.csv` over all runs in the directory and echoes
/// the resolved config.
pub fn cmd_run(loaded: &Loaded, threads: usize) -> Result<Vec<RunDocument>> {
    let data = loaded.dataset()?;
    let config = &loaded.config;
    let cells: Vec<_> = config.seeds.iter().map(|&s| (config.clone(), s)).collect();
    let docs = run_cells(&data, &cells, threads)?;

    let out = &config.output_dir;
    fs::create_dir_all(out.join(RUNS_DIR))
        .with_context(|| format!("creating {}", out.display()))?;
    for doc in &docs {
        write_json(
            &out.join(RUNS_DIR).join(format!("{}.json", doc.run_id)),
            doc,
        )?;
    }
    write_metrics_csv(out)?;
    fs::write(out.join(RESOLVED_CONFIG), loaded.to_toml())?;
    Ok(docs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub value: f64,
    pub dev_acc: f64,
    pub test_acc: f64,
    pub selected: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridOutcome {
    /// `lambda` for MD, `alpha` for LD.
    pub parameter: &'static str,
    pub seed: u64,
    pub points: Vec<GridPoint>,
    pub best: f64,
}

/// Index of the best dev accuracy; ties go to the larger value.
pub fn select(values: &[f64], dev: &[f64]) -> Option<usize> {
    (0..values.len()).reduce(|best, i| {
        let better = dev[i] > dev[best] || (dev[i] == dev[best] && values[i] > values[best]);
        if better {
            i
        } else {
            best
        }
    })
}

/// Trains each grid value once on `seed` and selects on mean dev accuracy.
pub fn grid_search(
    config: &ExperimentConfig,
    data: &SplitDataset,
    seed: u64,
    threads: usize,
) -> Result<GridOutcome> {
    let (parameter, values) = match config.strategy {
        Strategy::Md => ("lambda", &config.grid.lambdas),
        Strategy::Ld => ("alpha", &config.grid.alphas),
        other => {
            return Err(
                ConfigError::Usage(format!("grid needs strategy md or ld, got {other}")).into(),
            )
        }
    };
    if values.is_empty() {
        return Err(ConfigError::Usage(format!("the {parameter} grid is empty")).into());
    }
    let cells: Vec<_> = values
        .iter()
        .map(|&v| {
            let mut c = config.clone();
            match config.strategy {
                Strategy::Md => c.train.loss.lambda = v,
                _ => c.train.loss.alpha = v,
            }
            (c, seed)
        })
        .collect();
    let docs = run_cells(data, &cells, threads)?;
    let dev: Vec<f64> = docs.iter().map(|d| d.record.dev_acc()).collect();
    let best_i = select(values, &dev).expect("non-empty grid");
    let points = values
        .iter()
        .zip(&docs)
        .enumerate()
        .map(|(i, (&value, d))| GridPoint {
            value,
            dev_acc: dev[i],
            test_acc: d.metrics.acc,
            selected: i == best_i,
        })
        .collect();
    Ok(GridOutcome {
        parameter,
        seed,
        points,
        best: values[best_i],
    })
}

/// `grid`: selection on the first configured seed, written to `grid.csv`.
pub fn cmd_grid(loaded: &Loaded, threads: usize) -> Result<GridOutcome> {
    let config = &loaded.config;
    if !matches!(config.strategy, Strategy::Md | Strategy::Ld) {
        return Err(ConfigError::Usage(format!(
            "grid needs strategy md or ld, got {}",
            config.strategy
        ))
        .into());
    }
    let values = if config.strategy == Strategy::Md {
        &config.grid.lambdas
    } else {
        &config.grid.alphas
    };
    if values.is_empty() {
        return Err(ConfigError::Usage("the grid is empty".into()).into());
    }
    let data = loaded.dataset()?;
    let outcome = grid_search(config, &data, config.seeds[0], threads)?;
    let out = &config.output_dir;
    fs::create_dir_all(out)?;
    let mut w = csv::Writer::from_path(out.join("grid.csv"))?;
    w.write_record([
        "strategy",
        "head_mode",
        "seed",
        outcome.parameter,
        "dev_acc",
        "test_acc",
        "selected",
    ])?;
    for p in &outcome.points {
        w.write_record([
            config.strategy.to_string(),
            config.train.head_mode.to_string(),
            outcome.seed.to_string(),
            p.value.to_string(),
            p.dev_acc.to_string(),
            p.test_acc.to_string(),
            p.selected.to_string(),
        ])?;
    }
    w.flush()?;
    fs::write(out.join(RESOLVED_CONFIG), loaded.to_toml())?;
    Ok(outcome)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub strategy: Strategy,
    pub head_mode: HeadMode,
    pub memory: usize,
    pub runs: usize,
    pub acc_mean: f64,
    pub acc_std: f64,
    pub forgetting_mean: f64,
    pub forgetting_std: f64,
}

/// Mean and population standard deviation per (strategy, head, memory) cell.
pub fn summarize(rows: &[MetricsRow]) -> Vec<ReportRow> {
    type Cell = (Strategy, HeadMode, usize, Vec<f64>, Vec<f64>);
    let mut cells: BTreeMap<(String, String, usize), Cell> = BTreeMap::new();
    for r in rows {
        let key = (r.strategy.to_string(), r.head_mode.to_string(), r.memory);
        let cell = cells
            .entry(key)
            .or_insert_with(|| (r.strategy, r.head_mode, r.memory, Vec::new(), Vec::new()));
        cell.3.push(r.acc);
        cell.4.push(r.forgetting);
    }
    cells
        .into_values()
        .map(|(strategy, head_mode, memory, acc, forgetting)| {
            let (acc_mean, acc_std) = metrics::mean_std(&acc);
            let (forgetting_mean, forgetting_std) = metrics::mean_std(&forgetting);
            ReportRow {
                strategy,
                head_mode,
                memory,
                runs: acc.len(),
                acc_mean,
                acc_std,
                forgetting_mean,
                forgetting_std,
            }
        })
        .collect()
}

pub fn render_report(rows: &[ReportRow]) -> String {
    let mut s =
        String::from("# mean ± std over seeds; std uses the population convention (divide by n)\n");
    s += &format!(
        "{:<12} {:<16} {:>6} {:>4} {:>17} {:>17}\n",
        "strategy", "head_mode", "memory", "runs", "ACC (%)", "forgetting (%)"
    );
    for r in rows {
        s += &format!(
            "{:<12} {:<16} {:>6} {:>4} {:>8.2} ± {:>6.2} {:>8.2} ± {:>6.2}\n",
            r.strategy.to_string(),
            r.head_mode.to_string(),
            r.memory,
            r.runs,
            100.0 * r.acc_mean,
            100.0 * r.acc_std,
            100.0 * r.forgetting_mean,
            100.0 * r.forgetting_std
        );
    }
    s
}

/// `report`: summary tables over every run in `dir`.
pub fn cmd_report(dir: &Path) -> Result<Vec<ReportRow>> {
    let docs = read_runs(dir)?;
    if docs.is_empty() {
        return Err(ConfigError::Usage(format!(
            "no run documents under {}",
            dir.join(RUNS_DIR).display()
        ))
        .into());
    }
    let rows: Vec<MetricsRow> = docs.into_iter().map(|d| d.metrics).collect();
    let summary = summarize(&rows);
    let mut w = csv::Writer::from_path(dir.join("summary.csv"))?;
    for r in &summary {
        w.serialize(r)?;
    }
    w.flush()?;
    fs::write(dir.join("summary.txt"), render_report(&summary))?;
    Ok(summary)
}

pub fn timing_csv(rows: &[HeadTiming]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

/// `timing`: head-only forward cost for 1..=tasks virtual tasks.
pub fn cmd_timing(tasks: usize, repeats: usize, out: Option<&Path>) -> Result<Vec<HeadTiming>> {
    if tasks == 0 || repeats < 10 {
        return Err(ConfigError::Usage(format!(
            "timing needs --tasks >= 1 and --repeats >= 10, got {tasks} and {repeats}"
        ))
        .into());
    }
    let rows = metrics::time_heads(tasks, repeats)?;
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("timing.csv"), timing_csv(&rows)?)?;
    }
    Ok(rows)
}

/// Builds the end-of-stream model the config describes, without training.
pub fn grown_model(
    config: &ExperimentConfig,
    classes: usize,
    input_dim: usize,
) -> Result<ContinualModel> {
    let t = config.scenario.task_count;
    let mut model = ContinualModel::new(
        &config.train.layer_sizes(input_dim),
        config.train.head_mode,
        config.train.gate,
        0,
    )?;
    for _ in 0..t {
        model.add_task(classes / t)?;
    }
    Ok(model)
}

pub fn overhead_csv(report: &OverheadReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.serialize(report)?;
    Ok(String::from_utf8(w.into_inner()?)?)
}

/// `overhead`: extra floats of the configured memory and head.
pub fn cmd_overhead(loaded: &Loaded) -> Result<OverheadReport> {
    let config = &loaded.config;
    let (classes, input_dim) = match config.scenario.synthetic {
        Some(s) => (s.classes, s.feature_dim),
        None => {
            let data = loaded.dataset()?;
            (data.train.class_count(), data.train.feature_dim())
        }
    };
    let geometry = config
        .overhead
        .geometry
        .unwrap_or(SampleGeometry::Flat { dim: input_dim });
    let memory = MemoryDescriptor {
        geometry,
        samples: config
            .overhead
            .samples
            .unwrap_or(config.train.memory_capacity),
    };
    let model = grown_model(config, classes, input_dim)?;
    Ok(metrics::overhead(&memory, &model))
}
