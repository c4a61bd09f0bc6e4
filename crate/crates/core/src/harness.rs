//! Metrics and experiment plumbing: normalized entropy, throughput, sync
//! gap accounting, held-out evaluation, and the CSV-emitting experiment
//! runner behind the CLI.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::sync::Arc;

use crate::data::{DataSpec, OnePassReader};
use crate::embedding::{FullTable, PoolMode};
use crate::error::{Error, Result};
use crate::model::{DenseLayout, Prediction, forward};
use crate::num::{AtomicScalar, Scalar};
use crate::runtime::{ClusterSpec, TrainOptions, TrainOutput, run_training};
use crate::sync::{Placement, SyncAlgorithm, SyncConfig};

/// Final counters of one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunMetrics {
    pub examples_processed: u64,
    pub iterations: u64,
    pub wall_seconds: f64,
    /// Examples per second; `eps * wall_seconds == examples_processed` by
    /// construction.
    pub eps: f64,
    /// Progressive-validation train NE; `None` when no batch had a
    /// defined NE (e.g. all labels equal in every batch).
    pub train_ne: Option<f64>,
    pub sync_rounds: u64,
    pub sync_aborted: u64,
    /// Payload bytes received by the sync tier (one direction).
    pub sync_bytes: u64,
    pub stall_seconds: f64,
    pub param_bytes: u64,
    pub batch_size: usize,
}

/// Normalized entropy: mean cross-entropy of the predictions divided by
/// the entropy of the empirical CTR of `labels`. Undefined when the
/// labels are all clicks or all non-clicks.
pub fn normalized_entropy<T: Scalar>(pred: &Prediction<T>, labels: &[u8]) -> Result<f64> {
    if pred.probs.len() != labels.len() || labels.is_empty() {
        return Err(Error::Shape {
            tensor: "ne_labels",
            expected: pred.probs.len().to_string(),
            got: labels.len().to_string(),
        });
    }
    let n = labels.len() as f64;
    let ctr = labels.iter().map(|&y| y as f64).sum::<f64>() / n;
    if ctr <= 0.0 || ctr >= 1.0 {
        return Err(Error::UndefinedNe);
    }
    let mut ce = 0.0;
    for (&y, &p) in labels.iter().zip(&pred.probs) {
        let p = Scalar::to_f64(p);
        ce -= if y == 1 { p.ln() } else { (1.0 - p).ln() };
    }
    ce /= n;
    let denom = -(ctr * ctr.ln() + (1.0 - ctr) * (1.0 - ctr).ln());
    Ok(ce / denom)
}

/// Accumulates per-batch NE components weighted by example count.
/// Batches with undefined NE are counted but excluded from the average.
#[derive(Debug, Clone, Default)]
pub struct NeAccumulator {
    weighted_sum: f64,
    weight: u64,
    pub skipped_batches: u64,
}

impl NeAccumulator {
    pub fn record<T: Scalar>(&mut self, pred: &Prediction<T>, labels: &[u8]) {
        match normalized_entropy(pred, labels) {
            Ok(ne) => {
                self.weighted_sum += ne * labels.len() as f64;
                self.weight += labels.len() as u64;
            }
            Err(_) => self.skipped_batches += 1,
        }
    }

    pub fn merge(&mut self, other: &NeAccumulator) {
        self.weighted_sum += other.weighted_sum;
        self.weight += other.weight;
        self.skipped_batches += other.skipped_batches;
    }

    pub fn value(&self) -> Option<f64> {
        (self.weight > 0).then(|| self.weighted_sum / self.weight as f64)
    }
}

/// Average sync gap, measured two ways: from traffic via
/// `(eps / batch_size) / ((sync_bytes / wall) / param_bytes)`, and from
/// the direct counters `iterations / sync_rounds`. Either is `None` when
/// its denominator is zero.
pub fn avg_sync_gap(metrics: &RunMetrics) -> (Option<f64>, Option<f64>) {
    let formula = (metrics.sync_bytes > 0 && metrics.wall_seconds > 0.0).then(|| {
        let iters_per_sec = metrics.eps / metrics.batch_size as f64;
        let syncs_per_sec =
            (metrics.sync_bytes as f64 / metrics.wall_seconds) / metrics.param_bytes as f64;
        iters_per_sec / syncs_per_sec
    });
    let counted =
        (metrics.sync_rounds > 0).then(|| metrics.iterations as f64 / metrics.sync_rounds as f64);
    (formula, counted)
}

/// Evaluate a final model (dense replica plus assembled tables) over the
/// held-out split: `eval_count` indices starting at `spec.num_examples`,
/// disjoint from training by construction.
pub fn eval_ne<T: AtomicScalar>(
    dense: &[T],
    tables: &[FullTable<T>],
    spec: &DataSpec,
    eval_count: u64,
    pool_mode: PoolMode,
) -> Result<f64> {
    if eval_count == 0 {
        return Err(Error::InvalidConfig("empty eval split".into()));
    }
    let arch = &spec.arch;
    let layout = Arc::new(DenseLayout::new(arch));
    let mut eval_spec = spec.clone();
    eval_spec.num_examples = spec.num_examples + eval_count;
    let reader = OnePassReader::over_range(
        Arc::new(eval_spec),
        1024,
        spec.num_examples,
        spec.num_examples + eval_count,
    );
    let dim = arch.embedding_dim;
    let mut probs: Vec<T> = Vec::with_capacity(eval_count as usize);
    let mut labels: Vec<u8> = Vec::with_capacity(eval_count as usize);
    while let Some(batch) = reader.next_batch::<T>() {
        let mut pooled = vec![vec![T::zero(); batch.len * dim]; arch.num_tables];
        for t in 0..arch.num_tables {
            for e in 0..batch.len {
                let v = tables[t].pooled(&batch.sparse_ids[t][e], pool_mode);
                pooled[t][e * dim..(e + 1) * dim].copy_from_slice(&v);
            }
        }
        let (pred, _) = forward(dense, &layout, arch, &pooled, &batch.dense_x, batch.len)?;
        probs.extend(pred.probs);
        labels.extend(batch.labels);
    }
    normalized_entropy(&Prediction { probs }, &labels)
}

pub fn default_eval_count(num_examples: u64) -> u64 {
    (num_examples / 10).max(1)
}

/// One experiment: cluster, optional sync, data, optimizer knobs.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub run_id: String,
    pub cluster: ClusterSpec,
    pub sync: Option<SyncConfig>,
    pub data: DataSpec,
    pub opts: TrainOptions,
    pub eval_count: u64,
    pub out: Option<PathBuf>,
}

/// Algorithm label for the CSV row, e.g. "s-easgd" or "fr-ma".
pub fn algorithm_label(sync: Option<&SyncConfig>) -> String {
    match sync {
        None => "none".into(),
        Some(cfg) => {
            let place = match cfg.placement {
                Placement::Shadow => "s",
                Placement::Foreground => "fr",
            };
            let alg = match cfg.algorithm {
                SyncAlgorithm::Easgd => "easgd",
                SyncAlgorithm::Ma => "ma",
                SyncAlgorithm::Bmuf => "bmuf",
            };
            format!("{}-{}", place, alg)
        }
    }
}

/// One result row. Fixed column order; see [`CsvRow::HEADER`].
#[derive(Debug, Clone, PartialEq)]
pub struct CsvRow {
    pub run_id: String,
    pub algorithm: String,
    pub trainers: usize,
    pub workers: usize,
    /// Foreground gap k, or shadow pacing in ms.
    pub k_or_pacing: u64,
    pub alpha: f64,
    pub eps: f64,
    pub train_ne: Option<f64>,
    pub eval_ne: Option<f64>,
    pub sync_rounds: u64,
    pub gap_formula: Option<f64>,
    pub gap_counted: Option<f64>,
    pub stall_seconds: f64,
    pub wall_seconds: f64,
    pub status: String,
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{}", x),
        None => "na".into(),
    }
}

fn parse_opt(s: &str) -> Result<Option<f64>> {
    if s == "na" {
        return Ok(None);
    }
    s.parse::<f64>()
        .map(Some)
        .map_err(|e| Error::InvalidConfig(format!("bad CSV float {:?}: {}", s, e)))
}

impl CsvRow {
    pub const HEADER: &'static str = "run_id,algorithm,trainers,workers,k_or_pacing,alpha,eps,\
         train_ne,eval_ne,sync_rounds,gap_formula,gap_counted,stall_seconds,wall_seconds,status";

    pub fn to_line(&self) -> String {
        let mut s = String::new();
        write!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.run_id,
            self.algorithm,
            self.trainers,
            self.workers,
            self.k_or_pacing,
            self.alpha,
            self.eps,
            fmt_opt(self.train_ne),
            fmt_opt(self.eval_ne),
            self.sync_rounds,
            fmt_opt(self.gap_formula),
            fmt_opt(self.gap_counted),
            self.stall_seconds,
            self.wall_seconds,
            self.status
        )
        .unwrap();
        s
    }

    pub fn parse(line: &str) -> Result<CsvRow> {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 15 {
            return Err(Error::InvalidConfig(format!(
                "CSV row has {} fields, expected 15",
                f.len()
            )));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|e| Error::InvalidConfig(format!("bad CSV number {:?}: {}", s, e)))
        };
        let int = |s: &str| -> Result<u64> {
            s.parse()
                .map_err(|e| Error::InvalidConfig(format!("bad CSV count {:?}: {}", s, e)))
        };
        Ok(CsvRow {
            run_id: f[0].into(),
            algorithm: f[1].into(),
            trainers: int(f[2])? as usize,
            workers: int(f[3])? as usize,
            k_or_pacing: int(f[4])?,
            alpha: num(f[5])?,
            eps: num(f[6])?,
            train_ne: parse_opt(f[7])?,
            eval_ne: parse_opt(f[8])?,
            sync_rounds: int(f[9])?,
            gap_formula: parse_opt(f[10])?,
            gap_counted: parse_opt(f[11])?,
            stall_seconds: num(f[12])?,
            wall_seconds: num(f[13])?,
            status: f[14].into(),
        })
    }
}

/// Run one experiment and distill a CSV row. Run failures are recorded in
/// the row's status instead of propagating.
pub fn run_experiment<T: AtomicScalar>(cfg: &ExperimentConfig) -> CsvRow {
    let k_or_pacing = match &cfg.sync {
        Some(s) if s.placement == Placement::Foreground => s.foreground_gap_k,
        Some(s) => s.pacing_ms,
        None => 0,
    };
    let mut row = CsvRow {
        run_id: cfg.run_id.clone(),
        algorithm: algorithm_label(cfg.sync.as_ref()),
        trainers: cfg.cluster.num_trainers,
        workers: cfg.cluster.workers_per_trainer,
        k_or_pacing,
        alpha: cfg.sync.as_ref().map(|s| s.alpha).unwrap_or(0.0),
        eps: 0.0,
        train_ne: None,
        eval_ne: None,
        sync_rounds: 0,
        gap_formula: None,
        gap_counted: None,
        stall_seconds: 0.0,
        wall_seconds: 0.0,
        status: "ok".into(),
    };
    let out: Result<TrainOutput<T>> =
        run_training(&cfg.cluster, cfg.sync.as_ref(), &cfg.data, &cfg.opts);
    match out {
        Err(e) => row.status = format!("error: {}", e).replace(',', ";"),
        Ok(out) => {
            let m = &out.metrics;
            row.eps = m.eps;
            row.train_ne = m.train_ne;
            row.sync_rounds = m.sync_rounds;
            let (gf, gc) = avg_sync_gap(m);
            row.gap_formula = gf;
            row.gap_counted = gc;
            row.stall_seconds = m.stall_seconds;
            row.wall_seconds = m.wall_seconds;
            match eval_ne(&out.dense, &out.tables, &cfg.data, cfg.eval_count, cfg.opts.pool_mode)
            {
                Ok(ne) => row.eval_ne = Some(ne),
                Err(e) => row.status = format!("eval error: {}", e).replace(',', ";"),
            }
        }
    }
    row
}

/// Append rows to `path`, writing the header if the file is new or empty.
pub fn write_csv(path: &std::path::Path, rows: &[CsvRow]) -> Result<()> {
    use std::io::Write;
    let header_needed = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let mut file = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    if header_needed {
        writeln!(file, "{}", CsvRow::HEADER)?;
    }
    for row in rows {
        writeln!(file, "{}", row.to_line())?;
    }
    Ok(())
}

/// Parse a flat `key=value` config file. Blank lines and lines starting
/// with `#` are ignored. Returns pairs in file order.
pub fn parse_config_file(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::InvalidConfig(format!("config line {} has no '=': {:?}", lineno + 1, raw))
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}
