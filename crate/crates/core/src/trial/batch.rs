//! Batch experiments: many independent trials, run in parallel, with
//! results that do not depend on thread scheduling.

use std::fs;
use std::io::BufWriter;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use super::{Session, TrialConfig};
use crate::error::Result;
use crate::metrics::{aggregate, write_aggregate_csv, AggregateRow, TrialRecord};
use crate::robot::write_trace_csv;

#[derive(Debug, Clone)]
pub struct BatchReport {
    pub config: TrialConfig,
    pub records: Vec<TrialRecord>,
    pub aggregate: Vec<AggregateRow>,
    pub hash: String,
}

impl BatchReport {
    pub fn done_count(&self) -> usize {
        self.records.iter().filter(|r| r.status.is_done()).count()
    }
}

#[derive(Serialize)]
struct SummaryFile<'a> {
    master_seed: u64,
    trials: usize,
    done: usize,
    hash: &'a str,
    aggregate: &'a [AggregateRow],
}

pub fn run_batch(cfg: &TrialConfig) -> Result<BatchReport> {
    cfg.validate()?;
    let records = (0..cfg.trials)
        .into_par_iter()
        .map(|i| Session::new(cfg, i).map(Session::run))
        .collect::<Result<Vec<_>>>()?;
    let aggregate = aggregate(records.iter().filter_map(|r| r.metrics.as_ref()));
    let hash = batch_hash(&records)?;
    Ok(BatchReport {
        config: cfg.clone(),
        records,
        aggregate,
        hash,
    })
}

/// SHA-256 over the serialized records, in trial order.
pub fn batch_hash(records: &[TrialRecord]) -> Result<String> {
    let mut h = Sha256::new();
    for r in records {
        h.update(r.to_json()?.as_bytes());
        h.update(b"\n");
    }
    Ok(hex::encode(h.finalize()))
}

/// Write per-trial records, per-trial tick traces, the aggregate table and
/// a summary into `dir`.
pub fn write_batch(report: &BatchReport, dir: &Path) -> Result<()> {
    let trials = dir.join("trials");
    let traces = dir.join("traces");
    fs::create_dir_all(&trials)?;
    fs::create_dir_all(&traces)?;
    fs::write(dir.join("config.toml"), report.config.to_toml()?)?;
    for r in &report.records {
        fs::write(trials.join(format!("trial_{:03}.json", r.trial_index)), r.to_json()?)?;
        let f = fs::File::create(traces.join(format!("trial_{:03}.csv", r.trial_index)))?;
        write_trace_csv(&r.trace_rows(), BufWriter::new(f))?;
    }
    let f = fs::File::create(dir.join("aggregate.csv"))?;
    write_aggregate_csv(&report.aggregate, BufWriter::new(f))?;
    let summary = SummaryFile {
        master_seed: report.config.master_seed,
        trials: report.records.len(),
        done: report.done_count(),
        hash: &report.hash,
        aggregate: &report.aggregate,
    };
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(())
}
