//! Deterministic metric files.
//!
//! Two artifacts per evaluation: a human-readable `summary.txt` and a
//! machine-readable `metrics.tsv` (schema-versioned). Wall-clock timing goes
//! to a separate `timing.txt` so the metric files are byte-reproducible
//! under fixed seeds. Loss curves append one line per step.

use std::io::Write;
use std::path::Path;

use crate::eval::RobustnessReport;
use crate::losses::LossBreakdown;
use crate::{Error, Result};

pub const METRICS_SCHEMA: &str = "coopdiff-metrics v1";
pub const LOSSES_SCHEMA: &str = "coopdiff-losses v1";

/// Fixed-format float so file bytes are stable across runs.
fn fmt(v: f64) -> String {
    format!("{:.9e}", v)
}

/// Renders the machine-readable metrics table.
pub fn metrics_tsv(report: &RobustnessReport) -> String {
    let mut out = String::new();
    out.push_str(&format!("# {METRICS_SCHEMA}\n"));
    out.push_str("condition\tseverity\tap05\tap07\n");
    out.push_str(&format!("clean\t-\t{}\t{}\n", fmt(report.ap_clean05), fmt(report.ap_clean07)));
    for cell in &report.cells {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            cell.kind,
            cell.severity,
            fmt(cell.ap05),
            fmt(cell.ap07)
        ));
    }
    let opt = |v: Option<f64>| v.map(fmt).unwrap_or_else(|| "undefined".into());
    out.push_str(&format!("rce05\t-\t{}\t-\n", opt(report.rce05)));
    out.push_str(&format!("rce07\t-\t{}\t-\n", opt(report.rce07)));
    out.push_str(&format!("mrce\t-\t{}\t-\n", opt(report.mrce)));
    out
}

/// Renders the human-oriented summary.
pub fn summary_text(report: &RobustnessReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "clean AP@0.5 {:.4}  AP@0.7 {:.4}\n",
        report.ap_clean05, report.ap_clean07
    ));
    let mut seen = Vec::new();
    for cell in &report.cells {
        if !seen.contains(&cell.kind) {
            seen.push(cell.kind);
        }
    }
    for kind in seen {
        let (a5, a7) = report.family_mean(kind);
        out.push_str(&format!("{kind:<13} AP@0.5 {:.4}  AP@0.7 {:.4}\n", a5, a7));
    }
    match (report.rce05, report.rce07, report.mrce) {
        (Some(a), Some(b), Some(m)) => {
            out.push_str(&format!(
                "RCE@0.5 {:.2}%  RCE@0.7 {:.2}%  mRCE {:.2}%\n",
                a * 100.0,
                b * 100.0,
                m * 100.0
            ));
        }
        _ => out.push_str("RCE undefined (clean AP is zero)\n"),
    }
    out
}

/// Writes `metrics.tsv`, `summary.txt` and, when timing is present,
/// `timing.txt` under `dir`.
pub fn write_report(dir: &Path, report: &RobustnessReport) -> Result<()> {
    crate::io::write_text(&dir.join("metrics.tsv"), &metrics_tsv(report))?;
    crate::io::write_text(&dir.join("summary.txt"), &summary_text(report))?;
    if let Some(fps) = report.fps {
        crate::io::write_text(&dir.join("timing.txt"), &format!("fps {:.3}\n", fps))?;
    }
    Ok(())
}

/// Append-only loss-curve writer.
pub struct LossLog {
    file: std::fs::File,
}

impl LossLog {
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        writeln!(file, "# {LOSSES_SCHEMA}").map_err(|e| Error::io(path, e))?;
        writeln!(file, "step\ttask\tdiff\tdistill\tcoop\ttotal").map_err(|e| Error::io(path, e))?;
        Ok(Self { file })
    }

    /// Reopens an existing log for resumption.
    pub fn append(path: &Path) -> Result<Self> {
        let file = std::fs::OpenOptions::new()
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self { file })
    }

    pub fn record(&mut self, step: usize, b: &LossBreakdown) -> Result<()> {
        writeln!(
            self.file,
            "{}\t{}\t{}\t{}\t{}\t{}",
            step,
            fmt(b.task),
            fmt(b.diff),
            fmt(b.distill),
            fmt(b.coop),
            fmt(b.total)
        )
        .map_err(|e| Error::Io { path: "losses.tsv".into(), source: e })
    }
}

/// Parses a written metrics table back into (condition, severity, ap05, ap07)
/// rows, used by sweep comparisons and determinism checks.
pub fn parse_metrics(text: &str) -> Result<Vec<(String, String, f64, f64)>> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            if line != format!("# {METRICS_SCHEMA}") {
                return Err(Error::Config(format!("bad metrics schema line: {line}")));
            }
            continue;
        }
        if i == 1 || line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 4 {
            return Err(Error::Config(format!("bad metrics row: {line}")));
        }
        let parse = |s: &str| -> f64 {
            if s == "-" || s == "undefined" {
                f64::NAN
            } else {
                s.parse().unwrap_or(f64::NAN)
            }
        };
        rows.push((parts[0].to_string(), parts[1].to_string(), parse(parts[2]), parse(parts[3])));
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{CorruptionResult, RobustnessReport};
    use crate::scene::CorruptionKind;

    fn sample_report() -> RobustnessReport {
        RobustnessReport {
            ap_clean05: 0.9,
            ap_clean07: 0.8,
            cells: vec![
                CorruptionResult { kind: CorruptionKind::Fog, severity: 1, ap05: 0.8, ap07: 0.7 },
                CorruptionResult { kind: CorruptionKind::Fog, severity: 2, ap05: 0.7, ap07: 0.6 },
            ],
            rce05: Some(0.1),
            rce07: Some(0.15),
            mrce: Some(0.125),
            fps: None,
        }
    }

    #[test]
    fn metrics_are_byte_deterministic_and_parse_back() {
        let r = sample_report();
        let a = metrics_tsv(&r);
        let b = metrics_tsv(&r);
        assert_eq!(a, b);
        let rows = parse_metrics(&a).unwrap();
        assert_eq!(rows[0].0, "clean");
        assert!((rows[1].2 - 0.8).abs() < 1e-12);
        assert_eq!(rows.len(), 1 + 2 + 3);
    }

    #[test]
    fn mrce_identity_holds_in_report() {
        let r = sample_report();
        let m = r.mrce.unwrap();
        assert_eq!(m, 0.5 * (r.rce05.unwrap() + r.rce07.unwrap()));
    }

    #[test]
    fn loss_log_appends_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("losses.tsv");
        let mut log = LossLog::create(&path).unwrap();
        let b = LossBreakdown { task: 1.0, diff: 2.0, distill: 0.5, coop: 0.25, total: 3.75 };
        log.record(1, &b).unwrap();
        log.record(2, &b).unwrap();
        drop(log);
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.lines().nth(2).unwrap().starts_with("1\t"));
    }
}
