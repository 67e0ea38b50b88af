//! Text tables from an output directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};

#[derive(Debug, Deserialize)]
struct ResultRecord {
    cell: String,
    protocol: Option<String>,
    ratio: Option<f64>,
    m: Option<usize>,
    workers: Option<usize>,
    epoch: Option<usize>,
    metric: String,
    value: f64,
    status: String,
}

#[derive(Debug, Deserialize)]
struct LedgerRecord {
    protocol: String,
    bytes_up: u64,
    bytes_down: u64,
    peak_param_bytes: u64,
}

fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Option<Vec<T>>> {
    if !path.exists() {
        return Ok(None);
    }
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let rows = rdr
        .deserialize()
        .collect::<std::result::Result<Vec<T>, _>>()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    Ok(Some(rows))
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let k = v.len();
    if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    }
}

/// Accuracy, theory and communication tables for the CSVs in `outdir`.
pub fn render_report(outdir: &Path) -> Result<String> {
    let results: Vec<ResultRecord> = read_csv(&outdir.join("results.csv"))?.unwrap_or_default();
    let ledger: Vec<LedgerRecord> = read_csv(&outdir.join("ledger.csv"))?.unwrap_or_default();
    let mut out = String::new();

    let mut tickets: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    let mut theory: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
    let mut failures = Vec::new();
    for r in &results {
        if r.status != "ok" {
            failures.push(format!("{}: {}", r.cell, r.status));
            continue;
        }
        match (r.metric.as_str(), r.epoch) {
            ("ticket_accuracy", None) => tickets
                .entry((
                    r.protocol.clone().unwrap_or_default(),
                    format!("{}", r.ratio.unwrap_or(0.0)),
                ))
                .or_default()
                .push(r.value),
            ("weight_dev_final", None) => theory
                .entry((r.m.unwrap_or(0), r.workers.unwrap_or(0)))
                .or_default()
                .push(r.value),
            _ => {}
        }
    }

    if !tickets.is_empty() {
        writeln!(out, "ticket accuracy (median over seeds)").unwrap();
        writeln!(
            out,
            "{:<12} {:>6} {:>6} {:>9}",
            "protocol", "ratio", "seeds", "accuracy"
        )
        .unwrap();
        for ((protocol, ratio), v) in &mut tickets {
            writeln!(out, "{:<12} {:>6} {:>6} {:>9.4}", protocol, ratio, v.len(), median(v)).unwrap();
        }
        writeln!(out).unwrap();
    }
    if !theory.is_empty() {
        writeln!(out, "final weight deviation (median over seeds)").unwrap();
        writeln!(out, "{:>6} {:>4} {:>6} {:>14}", "m", "S", "seeds", "weight_dev").unwrap();
        for ((m, s), v) in &mut theory {
            writeln!(out, "{:>6} {:>4} {:>6} {:>14.6e}", m, s, v.len(), median(v)).unwrap();
        }
        writeln!(out).unwrap();
    }
    if !ledger.is_empty() {
        let mut totals: BTreeMap<&str, (u64, u64)> = BTreeMap::new();
        for l in &ledger {
            let e = totals.entry(l.protocol.as_str()).or_default();
            e.0 += l.bytes_up + l.bytes_down;
            e.1 = e.1.max(l.peak_param_bytes);
        }
        let reference = totals
            .iter()
            .find(|(k, _)| k.starts_with("loft"))
            .or_else(|| totals.iter().next())
            .map(|(_, v)| v.0 as f64)
            .unwrap_or(1.0);
        writeln!(out, "communication").unwrap();
        writeln!(
            out,
            "{:<14} {:>16} {:>8} {:>16}",
            "protocol", "total_bytes", "ratio", "peak_param_bytes"
        )
        .unwrap();
        for (protocol, (bytes, peak)) in &totals {
            writeln!(
                out,
                "{:<14} {:>16} {:>8.3} {:>16}",
                protocol,
                bytes,
                *bytes as f64 / reference,
                peak
            )
            .unwrap();
        }
        writeln!(out).unwrap();
    }
    if !failures.is_empty() {
        writeln!(out, "failed cells").unwrap();
        for f in &failures {
            writeln!(out, "  {f}").unwrap();
        }
    }
    if out.is_empty() {
        out.push_str("no results found\n");
    }
    Ok(out)
}
