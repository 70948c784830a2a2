//! Artifact writers: trace and summary CSVs, JSON files, the run manifest and
//! the plotting script.

use std::fs;
use std::path::{Path, PathBuf};

use mftg_core::{Error, LearningTrace, Result};
use serde_json::Value;

/// Bumped whenever a CSV column is added, removed or reinterpreted.
pub const SCHEMA_VERSION: u32 = 1;

pub const TRACE_HEADER: [&str; 11] = [
    "schema",
    "algo",
    "t",
    "k",
    "cost_estimate",
    "err_K",
    "err_L",
    "grad_norm",
    "proj_active",
    "wall_ms",
    "seed",
];

pub const SUMMARY_HEADER: [&str; 6] = ["algo", "T", "final_gap", "budget_matched_gap", "total_evals", "wall_ms"];

/// 17 significant digits: enough to round-trip any `f64`.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_f64).unwrap_or_default()
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    io_err(path, std::io::Error::other(e))
}

pub fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

pub fn write_json(path: &Path, value: &Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("json values always serialize");
    text.push('\n');
    fs::write(path, text).map_err(|e| io_err(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

/// One row per inner iteration; `t` is empty for the full-horizon baseline and
/// the gap columns are empty when no oracle was available.
pub fn write_trace(path: &Path, algo: &str, trace: &LearningTrace, seed: u64) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(TRACE_HEADER).map_err(|e| csv_err(path, e))?;
    for row in &trace.rows {
        let record = [
            SCHEMA_VERSION.to_string(),
            algo.to_string(),
            row.t.map(|t| t.to_string()).unwrap_or_default(),
            row.k.to_string(),
            fmt_f64(row.cost_estimate),
            fmt_opt(row.err_k),
            fmt_opt(row.err_l),
            fmt_f64(row.grad_norm),
            u8::from(row.proj_active).to_string(),
            fmt_f64(row.wall_ms),
            seed.to_string(),
        ];
        w.write_record(&record).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub struct SummaryRow {
    pub algo: String,
    pub horizon: usize,
    pub final_gap: Option<f64>,
    pub budget_matched_gap: Option<f64>,
    pub total_evals: u64,
    pub wall_ms: f64,
}

pub fn write_summary(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(SUMMARY_HEADER).map_err(|e| csv_err(path, e))?;
    for r in rows {
        let record = [
            r.algo.clone(),
            r.horizon.to_string(),
            fmt_opt(r.final_gap),
            fmt_opt(r.budget_matched_gap),
            r.total_evals.to_string(),
            fmt_f64(r.wall_ms),
        ];
        w.write_record(&record).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Everything needed to repeat a run: the exact argument vector, a copy of the
/// model, and the configuration with every default filled in.
pub struct RunManifest {
    pub model_path: PathBuf,
    pub command: String,
    pub argv: Vec<String>,
    pub model: Value,
    pub config: Value,
    pub seed: Option<u64>,
    pub output_dir: PathBuf,
    pub threads: Option<usize>,
}

impl RunManifest {
    pub fn to_json(&self) -> Value {
        serde_json::json!({
            "tool": env!("CARGO_PKG_NAME"),
            "version": env!("CARGO_PKG_VERSION"),
            "schema": SCHEMA_VERSION,
            "command": self.command,
            "argv": self.argv,
            "model_path": self.model_path.display().to_string(),
            "model": self.model,
            "config": self.config,
            "seed": self.seed,
            "output_dir": self.output_dir.display().to_string(),
            "threads": self.threads,
        })
    }

    pub fn write(&self) -> Result<()> {
        write_json(&self.output_dir.join("manifest.json"), &self.to_json())
    }
}

/// Plots `err_K` against the cumulative gradient-evaluation count for every
/// trace CSV in its own directory.
pub const PLOT_SCRIPT: &str = r#"#!/usr/bin/env python3
"""Plot learning traces written by robust-mftg.

Usage: python3 plot_traces.py [DIR] [--out FILE]
Reads every *.csv with a `schema` column in DIR (default: this script's
directory) and plots the Nash gap err_K per iteration, one panel per horizon.
"""
import argparse
import csv
import glob
import os
from collections import defaultdict

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt


def load(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or "schema" not in rows[0]:
        return None
    return rows


def main():
    here = os.path.dirname(os.path.abspath(__file__))
    ap = argparse.ArgumentParser()
    ap.add_argument("dir", nargs="?", default=here)
    ap.add_argument("--out", default=None)
    args = ap.parse_args()

    panels = defaultdict(list)
    for path in sorted(glob.glob(os.path.join(args.dir, "*.csv"))):
        rows = load(path)
        if rows is None:
            continue
        name = os.path.splitext(os.path.basename(path))[0]
        horizon = name.rsplit("_T", 1)[1] if "_T" in name else "-"
        gaps = [float(r["err_K"]) if r["err_K"] else float("nan") for r in rows]
        panels[horizon].append((rows[0]["algo"], gaps))

    if not panels:
        raise SystemExit("no trace CSVs found in " + args.dir)
    keys = sorted(panels)
    fig, axes = plt.subplots(1, len(keys), figsize=(4 * len(keys), 3.2), squeeze=False)
    for ax, key in zip(axes[0], keys):
        for algo, gaps in panels[key]:
            ax.semilogy(range(1, len(gaps) + 1), gaps, label=algo)
        ax.set_title("T = " + key if key != "-" else "trace")
        ax.set_xlabel("iteration")
        ax.set_ylabel("err_K")
        ax.legend()
    fig.tight_layout()
    out = args.out or os.path.join(args.dir, "traces.png")
    fig.savefig(out, dpi=150)
    print("wrote", out)


if __name__ == "__main__":
    main()
"#;

pub fn write_plot_script(dir: &Path) -> Result<()> {
    write_text(&dir.join("plot_traces.py"), PLOT_SCRIPT)
}
