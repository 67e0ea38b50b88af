//! CSV emission and the artifact manifest.
//!
//! `results.csv` columns: `mode,cell,seed,protocol,ratio,m,workers,epoch,metric,value,status`.
//! Inapplicable columns are empty; `status` is `ok` or `error: <message>`.
//! `heatmap.csv`: `layer,t1,t2,distance`. `curves.csv`: `metric,t,value,seed`.
//! `ledger.csv`: `protocol,round,worker,bytes_up,bytes_down,peak_param_bytes` (first seed).
//! `moments.csv`: `xi,workers,trials,theta,quantity,estimate,std_err,stated,exact`.
//! `manifest.json` lists every file with its SHA-256, row count and the
//! config hash. No timestamps are written, so a rerun reproduces every byte.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::harness::pipeline::ResultBundle;

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub rows: usize,
    pub sha256: String,
    pub config_hash: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: Option<String>,
    pub files: Vec<ManifestEntry>,
}

fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)
            .map_err(|e| Error::Format(format!("csv encoding: {e}")))?;
    }
    w.into_inner().map_err(|e| Error::Format(format!("csv encoding: {e}")))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes every non-empty table of `bundle` plus the manifest into `outdir`.
pub fn emit_outputs(bundle: &ResultBundle, outdir: &Path) -> Result<Manifest> {
    std::fs::create_dir_all(outdir).map_err(|e| Error::io(outdir, e))?;
    let tables: [(&str, usize, Vec<u8>); 5] = [
        ("results.csv", bundle.results.len(), csv_bytes(&bundle.results)?),
        ("heatmap.csv", bundle.heatmap.len(), csv_bytes(&bundle.heatmap)?),
        ("curves.csv", bundle.curves.len(), csv_bytes(&bundle.curves)?),
        ("ledger.csv", bundle.ledger.len(), csv_bytes(&bundle.ledger)?),
        ("moments.csv", bundle.moments.len(), csv_bytes(&bundle.moments)?),
    ];
    let mut files = Vec::new();
    for (name, rows, bytes) in tables {
        if rows == 0 {
            continue;
        }
        let path = outdir.join(name);
        std::fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        files.push(ManifestEntry {
            file: name.to_string(),
            rows,
            sha256: sha256_hex(&bytes),
            config_hash: bundle.config_hash.clone(),
        });
    }
    let manifest = Manifest {
        config_hash: bundle.config_hash.clone(),
        files,
    };
    let path = outdir.join(MANIFEST);
    let mut json = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    json.push(b'\n');
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(outdir: &Path) -> Result<Manifest> {
    let path = outdir.join(MANIFEST);
    let text = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_slice(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}
