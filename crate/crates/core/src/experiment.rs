//! End-to-end drivers behind the command line: training runs, attack runs
//! and parameter sweeps, with their CSV outputs.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use thiserror::Error;

use crate::analysis::{mcc, mse, write_attack_csv, AnalysisError, AttackAccumulator, AttackResult, Histogram2d};
use crate::config::{ConfigError, CostKind, ExperimentConfig};
use crate::keyexchange::DhParams;
use crate::protocol::{
    Capture, Federation, MemorySink, Mode, NullSink, ProtocolError, RoundOutcome, RoundTranscript, Seeds,
    TranscriptSink,
};
use crate::regression::{
    load_dataset, predict, preprocess_adult_file, train_test_split, write_snapshot, Dataset, RegressionError, Weights,
};
use crate::simnet::{build_named_graph, run_simulation, CostTable, SimError, TimingReport};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),

    #[error(transparent)]
    Data(#[from] RegressionError),

    #[error(transparent)]
    Protocol(#[from] ProtocolError),

    #[error(transparent)]
    Sim(#[from] SimError),

    #[error(transparent)]
    Analysis(#[from] AnalysisError),

    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl ExperimentError {
    /// Configuration problems are the caller's to fix; everything else
    /// happened while running.
    pub fn is_config(&self) -> bool {
        matches!(self, ExperimentError::Config(_))
    }
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Training pool shared by the clients, and the held-out test set.
#[derive(Debug, Clone)]
pub struct Split {
    pub train: Arc<Dataset>,
    pub test: Dataset,
}

pub fn split_dataset(ds: &Dataset, cfg: &ExperimentConfig) -> Result<Split> {
    let (train, test) = train_test_split(ds, cfg.test_fraction, cfg.seeds.data)?;
    Ok(Split {
        train: Arc::new(train),
        test,
    })
}

pub fn load_split(cfg: &ExperimentConfig) -> Result<Split> {
    split_dataset(&load_dataset(&cfg.dataset)?, cfg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessSummary {
    pub snapshot: PathBuf,
    pub rows: usize,
    /// Columns before the intercept.
    pub features: usize,
    pub positives: usize,
    pub content_hash: String,
}

impl std::fmt::Display for PreprocessSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} rows, {} features (+intercept), {} positive",
            self.rows, self.features, self.positives
        )
    }
}

/// Preprocesses an Adult CSV and writes the snapshot into `out_dir`, or
/// beside the input when none is given.
pub fn cmd_preprocess(input: &Path, out_dir: Option<&Path>) -> Result<PreprocessSummary> {
    let ds = preprocess_adult_file(input)?;
    let dir = match out_dir {
        Some(d) => d.to_path_buf(),
        None => input.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("dataset");
    let snapshot = write_snapshot(&ds, &dir, stem)?;
    Ok(PreprocessSummary {
        snapshot,
        rows: ds.rows(),
        features: ds.n_cols() - 1,
        positives: ds.positives(),
        content_hash: ds.content_hash(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub round: u32,
    pub mode: Mode,
    pub epsilon: f64,
    pub n: usize,
    /// Out-of-sample MCC of the broadcast model.
    pub mcc: f64,
    /// Mean squared gap between the broadcast model and the noise-free
    /// average of the clients' weights.
    pub mse: f64,
}

pub fn metrics_row(cfg: &ExperimentConfig, outcome: &RoundOutcome, test: &Dataset) -> Result<MetricsRow> {
    let predictions = predict(&outcome.global, test)?;
    Ok(MetricsRow {
        round: outcome.round,
        mode: cfg.mode,
        epsilon: cfg.epsilon,
        n: cfg.n_clients,
        mcc: mcc(&predictions, test.labels())?,
        mse: mse(&outcome.global, &outcome.exact_average)?,
    })
}

pub fn write_metrics_csv<W: Write>(rows: &[MetricsRow], out: W, config_hash: &str) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["config_hash", "round", "mode", "epsilon", "n", "mcc", "mse"])?;
    for r in rows {
        w.write_record([
            config_hash.to_string(),
            r.round.to_string(),
            r.mode.name().to_string(),
            r.epsilon.to_string(),
            r.n.to_string(),
            r.mcc.to_string(),
            r.mse.to_string(),
        ])?;
    }
    w.flush()
}

pub fn write_weights_csv<W: Write>(weights: &[f64], out: W, config_hash: &str) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["config_hash", "index", "weight"])?;
    for (i, v) in weights.iter().enumerate() {
        w.write_record([config_hash.to_string(), i.to_string(), v.to_string()])?;
    }
    w.flush()
}

pub fn cost_table(cfg: &ExperimentConfig, dh: &DhParams, n_features: usize) -> CostTable {
    let base = match cfg.costs.kind {
        CostKind::Synthetic => CostTable::synthetic(),
        CostKind::Calibrated => CostTable::calibrated(dh, n_features),
    };
    base.with_overrides(&cfg.costs.override_ns)
}

#[derive(Debug)]
pub struct RunResult {
    pub final_weights: Weights,
    pub metrics: Vec<MetricsRow>,
    pub timing: TimingReport,
    pub outcomes: Vec<RoundOutcome>,
}

/// Setup once, then `rounds` rounds of local training and per-weight
/// aggregation, under the simulator.
pub fn run_federated(
    cfg: &ExperimentConfig,
    data: &Split,
    dh: Arc<DhParams>,
    capture: Capture,
    sink: &mut dyn TranscriptSink,
) -> Result<RunResult> {
    cfg.validate()?;
    let n_weights = data.train.n_cols() as u32;
    let params = Arc::new(cfg.protocol_params_with(n_weights, capture, Arc::clone(&dh))?);
    let costs = cost_table(cfg, &dh, data.train.n_cols());
    let mut graph = build_named_graph(&cfg.network, &cfg.latency_profile, cfg.n_clients, cfg.seeds.network)?;
    let (mut fed, initial) = Federation::setup(params, &cfg.seeds, Arc::clone(&data.train))?;
    let mut metrics = Vec::with_capacity(cfg.rounds as usize);
    let mut failure = None;
    let out = run_simulation(&mut fed, initial, &mut graph, &costs, sink, false, |o| {
        match metrics_row(cfg, o, &data.test) {
            Ok(row) => metrics.push(row),
            Err(e) => {
                failure.get_or_insert(e);
            }
        }
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    let final_weights = out.outcomes.last().map(|o| o.global.clone()).unwrap_or_default();
    Ok(RunResult {
        final_weights,
        metrics,
        timing: out.timing,
        outcomes: out.outcomes,
    })
}

#[derive(Debug)]
pub struct RunSummary {
    pub result: RunResult,
    pub metrics_path: PathBuf,
    pub timing_path: PathBuf,
    pub weights_path: PathBuf,
}

fn create(dir: &Path, name: &str) -> Result<(fs::File, PathBuf)> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let path = dir.join(name);
    let file = fs::File::create(&path).map_err(io_err(&path))?;
    Ok((file, path))
}

/// Runs one configuration and writes `metrics.csv`, `timing.csv` and
/// `weights.csv` under its output directory.
pub fn cmd_run(cfg: &ExperimentConfig) -> Result<RunSummary> {
    let data = load_split(cfg)?;
    let dh = Arc::new(cfg.dh_params()?);
    run_into(cfg, &data, dh, &cfg.output_dir)
}

fn run_into(cfg: &ExperimentConfig, data: &Split, dh: Arc<DhParams>, dir: &Path) -> Result<RunSummary> {
    let result = run_federated(cfg, data, dh, Capture::Nothing, &mut NullSink)?;
    let hash = cfg.hash();
    let (f, metrics_path) = create(dir, "metrics.csv")?;
    write_metrics_csv(&result.metrics, f, &hash).map_err(io_err(&metrics_path))?;
    let (f, timing_path) = create(dir, "timing.csv")?;
    result.timing.write_csv(f, &hash).map_err(io_err(&timing_path))?;
    let (f, weights_path) = create(dir, "weights.csv")?;
    write_weights_csv(&result.final_weights, f, &hash).map_err(io_err(&weights_path))?;
    Ok(RunSummary {
        result,
        metrics_path,
        timing_path,
        weights_path,
    })
}

#[derive(Debug)]
pub struct AttackRun {
    pub results: Vec<AttackResult>,
    /// Round of each iteration.
    pub rounds: Vec<u32>,
}

/// Runs `attack.iterations` consecutive rounds with the tracked weight
/// captured and applies every scenario to each round.
pub fn run_attack(cfg: &ExperimentConfig, data: &Split, dh: Arc<DhParams>) -> Result<AttackRun> {
    let scenarios = &cfg.attack.scenarios;
    if let Some(s) = scenarios.iter().find(|s| s.mode() != cfg.mode) {
        return Err(ConfigError::Invalid(format!(
            "scenario {} needs mode {} but the configuration runs {}",
            s.name(),
            s.mode().name(),
            cfg.mode.name()
        ))
        .into());
    }
    if scenarios.is_empty() {
        return Err(ConfigError::Invalid("no attack scenarios given".into()).into());
    }
    let run_cfg = ExperimentConfig {
        rounds: cfg.attack.iterations,
        ..cfg.clone()
    };
    run_cfg.validate()?;
    let n_weights = data.train.n_cols() as u32;
    if cfg.tracked_weight >= n_weights {
        return Err(ConfigError::Invalid(format!(
            "tracked_weight {} but the model has {n_weights} weights",
            cfg.tracked_weight
        ))
        .into());
    }
    let capture = Capture::Weights([cfg.tracked_weight].into());
    let params = Arc::new(run_cfg.protocol_params_with(n_weights, capture, dh)?);
    let fixed_point = params.fixed_point;
    let mut acc = AttackAccumulator::new(
        scenarios,
        cfg.tracked_weight,
        cfg.attack.honest,
        cfg.n_clients,
        fixed_point,
        cfg.attack.guess_seed,
    );
    let mut failure = None;
    let (mut fed, initial) = Federation::setup(params, &run_cfg.seeds, Arc::clone(&data.train))?;
    {
        let mut sink = MemorySink::new(|t: RoundTranscript| {
            if failure.is_none() {
                if let Err(e) = acc.observe(&t) {
                    failure = Some(e);
                }
            }
        });
        fed.run_fifo(initial, &mut sink, |_| {})?;
    }
    if let Some(e) = failure {
        return Err(e.into());
    }
    let rounds = acc.rounds().to_vec();
    Ok(AttackRun {
        results: acc.finish()?,
        rounds,
    })
}

#[derive(Debug)]
pub struct AttackSummary {
    pub run: AttackRun,
    pub attack_path: PathBuf,
    pub summary_path: PathBuf,
    pub histogram_path: PathBuf,
}

/// Writes `attack.csv`, `attack_summary.csv` and `attack_density.csv`.
pub fn cmd_attack(cfg: &ExperimentConfig) -> Result<AttackSummary> {
    let data = load_split(cfg)?;
    let dh = Arc::new(cfg.dh_params()?);
    let run = run_attack(cfg, &data, dh)?;
    let hash = cfg.hash();
    let dir = &cfg.output_dir;
    let (f, attack_path) = create(dir, "attack.csv")?;
    write_attack_csv(&run.results, &run.rounds, f, &hash).map_err(io_err(&attack_path))?;

    let (f, summary_path) = create(dir, "attack_summary.csv")?;
    let mut w = csv::Writer::from_writer(f);
    let header = [
        "config_hash", "scenario", "iterations", "r2", "r2_defined", "correlation_negative", "residual_mean",
        "residual_std", "q05", "q25", "q50", "q75", "q95",
    ];
    let write = |w: &mut csv::Writer<fs::File>| -> std::io::Result<()> {
        w.write_record(header)?;
        for r in &run.results {
            let mut rec = vec![
                hash.clone(),
                r.scenario.name().to_string(),
                r.actuals.len().to_string(),
                r.r_squared.value.to_string(),
                r.r_squared.defined.to_string(),
                r.r_squared.negative.to_string(),
                r.error.mean.to_string(),
                r.error.std.to_string(),
            ];
            rec.extend(r.error.quantiles.iter().map(|q| q.to_string()));
            w.write_record(rec)?;
        }
        w.flush()
    };
    write(&mut w).map_err(io_err(&summary_path))?;

    let (mut f, histogram_path) = create(dir, "attack_density.csv")?;
    let mut first = true;
    for r in &run.results {
        if r.actuals.is_empty() {
            continue;
        }
        let h = Histogram2d::new(&r.actuals, &r.estimates, cfg.attack.histogram_bins)?;
        let mut buf = Vec::new();
        h.write_csv(&mut buf, r.scenario.name(), &hash).map_err(io_err(&histogram_path))?;
        let text = String::from_utf8(buf).expect("csv output is utf-8");
        let body = if first { &text[..] } else { text.split_once('\n').map_or("", |(_, rest)| rest) };
        f.write_all(body.as_bytes()).map_err(io_err(&histogram_path))?;
        first = false;
    }
    Ok(AttackSummary {
        run,
        attack_path,
        summary_path,
        histogram_path,
    })
}

/// One `(n, ε, replicate)` cell of a sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub n: usize,
    pub epsilon: f64,
    pub replicate: u32,
}

impl Cell {
    pub fn dir_name(&self) -> String {
        format!("n{}_eps{:e}_r{}", self.n, self.epsilon, self.replicate)
    }

    pub fn config(&self, base: &ExperimentConfig) -> ExperimentConfig {
        let r = u64::from(self.replicate);
        ExperimentConfig {
            n_clients: self.n,
            epsilon: self.epsilon,
            seeds: Seeds {
                data: base.seeds.data + r,
                protocol: base.seeds.protocol + r,
                network: base.seeds.network + r,
            },
            ..base.clone()
        }
    }
}

pub fn sweep_cells(cfg: &ExperimentConfig) -> Vec<Cell> {
    let mut cells = Vec::new();
    for &n in &cfg.sweep.clients {
        for &epsilon in &cfg.sweep.epsilons {
            for replicate in 0..cfg.sweep.replicates.max(1) {
                cells.push(Cell { n, epsilon, replicate });
            }
        }
    }
    cells
}

#[derive(Debug, Default)]
pub struct SweepSummary {
    pub completed: Vec<Cell>,
    /// Cells already marked done by an earlier invocation.
    pub skipped: Vec<Cell>,
    pub failed: Vec<(Cell, String)>,
    pub merged_path: PathBuf,
}

const DONE_MARKER: &str = "DONE";

/// Runs every grid cell not yet marked done, then merges all finished
/// cells into `sweep.csv`. A failing cell is recorded and skipped.
pub fn cmd_sweep(cfg: &ExperimentConfig) -> Result<SweepSummary> {
    cmd_sweep_with(cfg, |_| {})
}

/// [`cmd_sweep`] reporting after each cell.
pub fn cmd_sweep_with(cfg: &ExperimentConfig, mut progress: impl FnMut(&Cell)) -> Result<SweepSummary> {
    let cells = sweep_cells(cfg);
    if cells.is_empty() {
        return Err(ConfigError::Invalid("the sweep grid is empty".into()).into());
    }
    let data = load_dataset(&cfg.dataset)?;
    let dh = Arc::new(cfg.dh_params()?);
    let root = cfg.output_dir.join("sweep");
    let mut summary = SweepSummary::default();
    for cell in cells {
        let dir = root.join(cell.dir_name());
        if dir.join(DONE_MARKER).exists() {
            summary.skipped.push(cell);
            continue;
        }
        let cell_cfg = cell.config(cfg);
        let outcome = cell_cfg
            .validate()
            .map_err(ExperimentError::from)
            .and_then(|_| split_dataset(&data, &cell_cfg))
            .and_then(|split| run_into(&cell_cfg, &split, Arc::clone(&dh), &dir));
        match outcome {
            Ok(_) => {
                fs::write(dir.join(DONE_MARKER), cell_cfg.hash()).map_err(io_err(&dir))?;
                summary.completed.push(cell);
            }
            Err(e) => {
                let (mut f, _) = create(&dir, "FAILED")?;
                let _ = writeln!(f, "{e}");
                summary.failed.push((cell, e.to_string()));
            }
        }
        progress(&cell);
    }
    summary.merged_path = merge_sweep(cfg, &root)?;
    Ok(summary)
}

fn merge_sweep(cfg: &ExperimentConfig, root: &Path) -> Result<PathBuf> {
    let (f, path) = create(&cfg.output_dir, "sweep.csv")?;
    let mut w = csv::Writer::from_writer(f);
    let mut write = || -> std::result::Result<(), Box<dyn std::error::Error>> {
        w.write_record(["config_hash", "n", "epsilon", "replicate", "round", "mode", "mcc", "mse"])?;
        for cell in sweep_cells(cfg) {
            let dir = root.join(cell.dir_name());
            if !dir.join(DONE_MARKER).exists() {
                continue;
            }
            let mut r = csv::Reader::from_path(dir.join("metrics.csv"))?;
            for rec in r.records() {
                let rec = rec?;
                w.write_record([
                    &rec[0],
                    &cell.n.to_string(),
                    &cell.epsilon.to_string(),
                    &cell.replicate.to_string(),
                    &rec[1],
                    &rec[2],
                    &rec[5],
                    &rec[6],
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    };
    write().map_err(|e| ExperimentError::Io {
        path: path.clone(),
        source: std::io::Error::other(e.to_string()),
    })?;
    Ok(path)
}
