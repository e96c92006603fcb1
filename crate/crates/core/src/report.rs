//! JSON and plain-text reports.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::experiment::{Metric, RunRecord, SweepResult};
use crate::metrics::Aggregate;

pub fn to_json(record: &RunRecord) -> Result<String> {
    let mut s = serde_json::to_string_pretty(record)
        .map_err(|e| Error::Format(format!("serializing report: {e}")))?;
    s.push('\n');
    Ok(s)
}

pub fn from_json(text: &str) -> Result<RunRecord> {
    serde_json::from_str(text).map_err(|e| Error::Format(format!("report: {e}")))
}

const COLUMNS: [&str; 4] = ["ACC", "F1", "ΔDP", "ΔEO"];

fn cells(a: &Aggregate) -> [String; 4] {
    [a.acc, a.f1, a.dp_gap, a.eo_gap].map(|m| m.to_string())
}

fn row(label: &str, values: &[String]) -> String {
    let mut line = format!("{label:<12}");
    for v in values {
        line.push_str(&format!(" {v:<13}"));
    }
    line.trim_end().to_string()
}

/// Aligned table: one line per seed and a final aggregate line.
pub fn render_table(record: &RunRecord) -> String {
    let c = &record.config;
    let mut out = format!(
        "# experiment {} ({}) variant={} alpha={} beta={} seeds={}\n# {}\n",
        record.experiment,
        record.experiment_name,
        c.variant,
        c.alpha,
        c.beta,
        c.seeds.len(),
        record.note
    );
    let header: Vec<String> = COLUMNS.iter().map(|s| s.to_string()).collect();
    out.push_str(&row("", &header));
    out.push('\n');
    for s in &record.seeds {
        let t = &s.test;
        let v: Vec<String> = [t.acc, t.f1, t.dp_gap, t.eo_gap]
            .iter()
            .map(|x| format!("{x:.3}"))
            .collect();
        out.push_str(&row(&format!("seed {}", s.seed), &v));
        out.push('\n');
    }
    out.push_str(&row(c.variant.as_str(), &cells(&record.aggregate)));
    out.push('\n');
    if let Some(a) = &record.attribute_agreement {
        out.push_str(&format!("# estimated-attribute agreement {a}\n"));
    }
    out
}

fn write(path: PathBuf, text: &str) -> Result<PathBuf> {
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Writes `exp<N>-<variant>.json` and `.txt` into `dir`.
pub fn emit_report(record: &RunRecord, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    ensure_dir(dir)?;
    let stem = format!("exp{}-{}", record.experiment, record.config.variant);
    let json = write(dir.join(format!("{stem}.json")), &to_json(record)?)?;
    let txt = write(dir.join(format!("{stem}.txt")), &render_table(record))?;
    Ok((json, txt))
}

/// Writes one alpha-by-beta CSV matrix per metric plus the full JSON.
pub fn emit_sweep(sweep: &SweepResult, experiment: u32, dir: &Path) -> Result<Vec<PathBuf>> {
    ensure_dir(dir)?;
    let mut paths = Vec::new();
    for m in Metric::ALL {
        paths.push(write(
            dir.join(format!("sweep-exp{experiment}-{}.csv", m.name())),
            &sweep.matrix_csv(m),
        )?);
    }
    let json = serde_json::to_string_pretty(sweep)
        .map_err(|e| Error::Format(format!("serializing sweep: {e}")))?;
    paths.push(write(dir.join(format!("sweep-exp{experiment}.json")), &(json + "\n"))?);
    Ok(paths)
}
