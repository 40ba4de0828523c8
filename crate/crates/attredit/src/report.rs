//! Append-only evaluation reports.
//!
//! One line per metric: `name<TAB>value<TAB>threshold<TAB>pass|fail`.
//! Every append is preceded by a timestamped comment header naming the
//! suite, so reports accumulate across runs.

use anyhow::{Context, Result};
use std::fmt::Write as _;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

#[derive(Debug, Clone, PartialEq)]
pub struct Metric {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    pub pass: bool,
}

impl Metric {
    pub fn new(name: impl Into<String>, value: f64, threshold: f64, pass: bool) -> Metric {
        Metric {
            name: name.into(),
            value,
            threshold,
            pass,
        }
    }
}

pub struct Report {
    path: PathBuf,
}

impl Report {
    pub fn new(path: impl Into<PathBuf>) -> Report {
        Report { path: path.into() }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Append a suite's metrics under a timestamped header and echo them to
    /// stdout. Returns whether every metric passed.
    pub fn append(&self, suite: &str, metrics: &[Metric]) -> Result<bool> {
        if let Some(dir) = self.path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        let ts = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let mut block = String::new();
        writeln!(block, "# ts={ts} suite={suite}").unwrap();
        for m in metrics {
            writeln!(
                block,
                "{}\t{:.6e}\t{:.6e}\t{}",
                m.name,
                m.value,
                m.threshold,
                if m.pass { "pass" } else { "fail" }
            )
            .unwrap();
        }
        print!("{block}");
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .with_context(|| format!("opening report {}", self.path.display()))?;
        f.write_all(block.as_bytes())?;
        Ok(metrics.iter().all(|m| m.pass))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_appends_and_formats() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.tsv");
        let r = Report::new(&path);
        let ok = r
            .append(
                "demo",
                &[
                    Metric::new("alpha", 0.25, 0.5, true),
                    Metric::new("beta", 2.0, 1.0, false),
                ],
            )
            .unwrap();
        assert!(!ok);
        r.append("demo", &[Metric::new("alpha", 0.3, 0.5, true)])
            .unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let headers = text.lines().filter(|l| l.starts_with("# ts=")).count();
        assert_eq!(headers, 2, "append-only with one header per run");
        assert!(text.contains("alpha\t2.5"));
        assert!(text.contains("\tpass"));
        assert!(text.contains("beta\t2"));
        assert!(text.contains("\tfail"));
    }
}
