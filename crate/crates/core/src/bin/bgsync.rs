//! Command-line entry point: `train` runs one configuration, `sweep` runs
//! a grid over trainer counts, worker counts, algorithms, and sync gaps.
//! Every flag can also come from a flat key=value config file; flags
//! override file values.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use bgsync::data::{DataSpec, dump_data};
use bgsync::harness::{
    CsvRow, ExperimentConfig, default_eval_count, parse_config_file, run_experiment, write_csv,
};
use bgsync::model::ModelArch;
use bgsync::runtime::{ClusterSpec, TrainOptions};
use bgsync::sync::{Placement, SyncAlgorithm, SyncConfig};
use bgsync::{Real, Result};

#[derive(Parser)]
#[command(name = "bgsync", about = "Background-synchronized distributed training, desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a single training configuration and append one CSV row.
    Train(RunArgs),
    /// Run a grid of configurations, one CSV row each. List-valued flags
    /// (--algorithm, --trainers, --workers, --sync-gap, --seed) take
    /// comma-separated values and are crossed.
    Sweep(RunArgs),
}

#[derive(Args, Default)]
struct RunArgs {
    /// Flat key=value config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// s-easgd | s-ma | s-bmuf | fr-easgd | fr-ma | fr-bmuf | none
    #[arg(long)]
    algorithm: Option<String>,
    #[arg(long)]
    trainers: Option<String>,
    /// Workers per trainer.
    #[arg(long)]
    workers: Option<String>,
    #[arg(long, value_name = "N")]
    embedding_ps: Option<usize>,
    #[arg(long, value_name = "N")]
    sync_ps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    /// Foreground sync gap k (iterations between inline syncs).
    #[arg(long)]
    sync_gap: Option<String>,
    /// Shadow pacing between rounds, milliseconds.
    #[arg(long)]
    pacing_ms: Option<u64>,
    /// Injected sync-PS request latency, milliseconds.
    #[arg(long)]
    latency_ms: Option<f64>,
    /// Sync-PS bandwidth cap, bytes per second.
    #[arg(long)]
    bandwidth_cap: Option<f64>,
    #[arg(long)]
    examples: Option<u64>,
    /// Number of embedding tables.
    #[arg(long)]
    tables: Option<usize>,
    /// Embedding dimension.
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    seed: Option<String>,
    /// CSV output path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write the full dataset as a binary dump before training.
    #[arg(long)]
    dump_data: Option<PathBuf>,
}

/// All settings after merging the config file underneath the flags.
struct Settings {
    algorithms: Vec<String>,
    trainers: Vec<usize>,
    workers: Vec<usize>,
    embedding_ps: usize,
    sync_ps: usize,
    batch_size: usize,
    alpha: f64,
    eta: f64,
    momentum: f64,
    sync_gaps: Vec<u64>,
    pacing_ms: u64,
    latency_ms: f64,
    bandwidth_cap: Option<f64>,
    examples: u64,
    tables: usize,
    dim: usize,
    seeds: Vec<u64>,
    out: Option<PathBuf>,
    dump: Option<PathBuf>,
}

fn parse_list<T: std::str::FromStr>(name: &str, s: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<T>()
                .map_err(|e| bgsync::Error::InvalidConfig(format!("bad --{} value {:?}: {}", name, p, e)))
        })
        .collect()
}

impl RunArgs {
    /// Fill unset flags from the config file, then resolve defaults.
    fn resolve(mut self) -> Result<Settings> {
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path)?;
            for (k, v) in parse_config_file(&text)? {
                self.absorb(&k, &v)?;
            }
        }
        Ok(Settings {
            algorithms: parse_list("algorithm", self.algorithm.as_deref().unwrap_or("none"))?,
            trainers: parse_list("trainers", self.trainers.as_deref().unwrap_or("1"))?,
            workers: parse_list("workers", self.workers.as_deref().unwrap_or("4"))?,
            embedding_ps: self.embedding_ps.unwrap_or(1),
            sync_ps: self.sync_ps.unwrap_or(1),
            batch_size: self.batch_size.unwrap_or(100),
            alpha: self.alpha.unwrap_or(0.1),
            eta: self.eta.unwrap_or(1.0),
            momentum: self.momentum.unwrap_or(0.0),
            sync_gaps: parse_list("sync-gap", self.sync_gap.as_deref().unwrap_or("10"))?,
            pacing_ms: self.pacing_ms.unwrap_or(10),
            latency_ms: self.latency_ms.unwrap_or(0.0),
            bandwidth_cap: self.bandwidth_cap,
            examples: self.examples.unwrap_or(100_000),
            tables: self.tables.unwrap_or(4),
            dim: self.dim.unwrap_or(8),
            seeds: parse_list("seed", self.seed.as_deref().unwrap_or("42"))?,
            out: self.out,
            dump: self.dump_data,
        })
    }

    /// Set one field from a config-file key unless the flag already set it.
    fn absorb(&mut self, key: &str, v: &str) -> Result<()> {
        let err = |e: &dyn std::fmt::Display| {
            bgsync::Error::InvalidConfig(format!("config key {}: bad value {:?} ({})", key, v, e))
        };
        macro_rules! fill {
            ($field:ident) => {
                if self.$field.is_none() {
                    self.$field = Some(v.parse().map_err(|e| err(&e))?);
                }
            };
        }
        match key {
            "algorithm" => fill!(algorithm),
            "trainers" => fill!(trainers),
            "workers" => fill!(workers),
            "embedding-ps" | "embedding_ps" => fill!(embedding_ps),
            "sync-ps" | "sync_ps" => fill!(sync_ps),
            "batch-size" | "batch_size" => fill!(batch_size),
            "alpha" => fill!(alpha),
            "eta" => fill!(eta),
            "momentum" => fill!(momentum),
            "sync-gap" | "sync_gap" => fill!(sync_gap),
            "pacing-ms" | "pacing_ms" => fill!(pacing_ms),
            "latency-ms" | "latency_ms" => fill!(latency_ms),
            "bandwidth-cap" | "bandwidth_cap" => fill!(bandwidth_cap),
            "examples" => fill!(examples),
            "tables" => fill!(tables),
            "dim" => fill!(dim),
            "seed" => fill!(seed),
            "out" => fill!(out),
            "dump-data" | "dump_data" => fill!(dump_data),
            other => {
                return Err(bgsync::Error::InvalidConfig(format!(
                    "unknown config key {:?}",
                    other
                )));
            }
        }
        Ok(())
    }
}

fn parse_algorithm(label: &str) -> Result<Option<(SyncAlgorithm, Placement)>> {
    let alg = match label {
        "none" => return Ok(None),
        "s-easgd" => (SyncAlgorithm::Easgd, Placement::Shadow),
        "s-ma" => (SyncAlgorithm::Ma, Placement::Shadow),
        "s-bmuf" => (SyncAlgorithm::Bmuf, Placement::Shadow),
        "fr-easgd" => (SyncAlgorithm::Easgd, Placement::Foreground),
        "fr-ma" => (SyncAlgorithm::Ma, Placement::Foreground),
        "fr-bmuf" => (SyncAlgorithm::Bmuf, Placement::Foreground),
        other => {
            return Err(bgsync::Error::InvalidConfig(format!(
                "unknown algorithm {:?}",
                other
            )));
        }
    };
    Ok(Some(alg))
}

fn experiment(
    s: &Settings,
    algorithm: &str,
    trainers: usize,
    workers: usize,
    gap: u64,
    seed: u64,
) -> Result<ExperimentConfig> {
    let sync = parse_algorithm(algorithm)?.map(|(alg, placement)| SyncConfig {
        algorithm: alg,
        placement,
        alpha: s.alpha,
        eta: s.eta,
        momentum: s.momentum,
        foreground_gap_k: gap,
        pacing_ms: s.pacing_ms,
    });
    let arch = ModelArch {
        num_tables: s.tables,
        embedding_dim: s.dim,
        rows_per_table: 1000,
        dense_in_dim: 8,
        bottom_mlp_dims: vec![16, s.dim],
        top_mlp_dims: vec![16, 8, 1],
    };
    let data = DataSpec {
        num_examples: s.examples,
        arch,
        ids_per_lookup: 3,
        label_noise: 0.1,
        seed,
    };
    Ok(ExperimentConfig {
        run_id: format!("{}-t{}-w{}-g{}-s{}", algorithm, trainers, workers, gap, seed),
        cluster: ClusterSpec {
            num_trainers: trainers,
            workers_per_trainer: workers,
            num_embedding_ps: s.embedding_ps,
            num_sync_ps: s.sync_ps,
            batch_size: s.batch_size,
            transport_latency_ms: s.latency_ms,
            ps_bandwidth_cap: s.bandwidth_cap,
            ..ClusterSpec::default()
        },
        sync,
        data,
        opts: TrainOptions::default(),
        eval_count: default_eval_count(s.examples),
        out: s.out.clone(),
    })
}

fn emit(out: Option<&PathBuf>, rows: &[CsvRow]) -> Result<()> {
    match out {
        Some(path) => write_csv(path, rows),
        None => {
            println!("{}", CsvRow::HEADER);
            for row in rows {
                println!("{}", row.to_line());
            }
            Ok(())
        }
    }
}

fn run(cmd: Command) -> Result<bool> {
    let (args, sweep) = match cmd {
        Command::Train(a) => (a, false),
        Command::Sweep(a) => (a, true),
    };
    let s = args.resolve()?;
    if !sweep
        && (s.algorithms.len() > 1
            || s.trainers.len() > 1
            || s.workers.len() > 1
            || s.sync_gaps.len() > 1
            || s.seeds.len() > 1)
    {
        return Err(bgsync::Error::InvalidConfig(
            "train takes single values; use sweep for comma-separated lists".into(),
        ));
    }
    if let Some(path) = &s.dump {
        let cfg = experiment(&s, &s.algorithms[0], s.trainers[0], s.workers[0], s.sync_gaps[0], s.seeds[0])?;
        dump_data(&cfg.data, path)?;
        eprintln!("dataset dumped to {}", path.display());
    }
    let mut rows = Vec::new();
    for algorithm in &s.algorithms {
        for &trainers in &s.trainers {
            for &workers in &s.workers {
                for &gap in &s.sync_gaps {
                    for &seed in &s.seeds {
                        let cfg = experiment(&s, algorithm, trainers, workers, gap, seed)?;
                        eprintln!("running {}", cfg.run_id);
                        rows.push(run_experiment::<Real>(&cfg));
                    }
                }
            }
        }
    }
    emit(s.out.as_ref(), &rows)?;
    Ok(rows.iter().all(|r| r.status == "ok"))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::FAILURE
        }
    }
}
