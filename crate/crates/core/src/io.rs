//! Plot-ready CSV (17 significant digits) and JSON artifacts.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::policy::PolicyTable;
use crate::simulator::TraceRow;
use crate::solver::GridSolution;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("cannot write {path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot serialise {what}: {source}")]
    Json {
        what: String,
        #[source]
        source: serde_json::Error,
    },
}

/// Round-trippable float with 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn table(header: &[String], rows: usize, cell: impl Fn(usize, usize) -> String) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for r in 0..rows {
        for c in 0..header.len() {
            if c > 0 {
                out.push(',');
            }
            out.push_str(&cell(r, c));
        }
        out.push('\n');
    }
    out
}

/// Columns `z, phi_1, ..., phi_d`.
pub fn phi_csv(sol: &GridSolution) -> String {
    let mut header = vec!["z".to_string()];
    header.extend((1..=sol.regimes()).map(|i| format!("phi_{i}")));
    table(&header, sol.z.len(), |k, c| {
        fmt_f64(if c == 0 { sol.z[k] } else { sol.phi[c - 1][k] })
    })
}

/// Columns `z, c_1, ..., c_d`; rebalancing targets go to JSON.
pub fn policy_csv(policy: &PolicyTable) -> String {
    let mut header = vec!["z".to_string()];
    header.extend((1..=policy.regimes()).map(|i| format!("c_{i}")));
    table(&header, policy.z.len(), |k, c| {
        fmt_f64(if c == 0 { policy.z[k] } else { policy.c_star[c - 1][k] })
    })
}

pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut out = String::from("path,t,i,r,z,disc_util\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.path,
            fmt_f64(r.t),
            r.i + 1,
            fmt_f64(r.r),
            fmt_f64(r.z),
            fmt_f64(r.disc_util)
        );
    }
    out
}

pub fn to_json<T: Serialize>(what: &str, value: &T) -> Result<String, IoError> {
    let mut s = serde_json::to_string_pretty(value).map_err(|source| IoError::Json {
        what: what.to_string(),
        source,
    })?;
    s.push('\n');
    Ok(s)
}

pub fn write_text(path: &Path, contents: &str) -> Result<(), IoError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|source| IoError::Write {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    fs::write(path, contents).map_err(|source| IoError::Write {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    write_text(path, &to_json(&path.display().to_string(), value)?)
}
