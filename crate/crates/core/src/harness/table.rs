use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{fmt_metric, MetricsReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    RErr,
    TErr,
    Psnr,
    Ssim,
    VisPsnr,
    VisSsim,
}

impl Metric {
    pub const ALL: [Metric; 6] = [Metric::RErr, Metric::TErr, Metric::Psnr, Metric::Ssim, Metric::VisPsnr, Metric::VisSsim];

    pub fn name(self) -> &'static str {
        match self {
            Metric::RErr => "r_err_deg",
            Metric::TErr => "t_err",
            Metric::Psnr => "psnr_db",
            Metric::Ssim => "ssim",
            Metric::VisPsnr => "vis_psnr_db",
            Metric::VisSsim => "vis_ssim",
        }
    }

    pub fn lower_is_better(self) -> bool {
        matches!(self, Metric::RErr | Metric::TErr)
    }

    pub fn of(self, r: &MetricsReport) -> Option<f64> {
        let v = match self {
            Metric::RErr => Some(r.r_err_deg),
            Metric::TErr => Some(r.t_err),
            Metric::Psnr => Some(r.psnr_db),
            Metric::Ssim => Some(r.ssim),
            Metric::VisPsnr => r.vis_psnr_db,
            Metric::VisSsim => r.vis_ssim,
        };
        v.filter(|x| x.is_finite())
    }
}

/// One (regime, clip) cell; a failed cell keeps its error message.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub regime: String,
    pub clip: String,
    pub outcome: std::result::Result<MetricsReport, String>,
}

pub const RESULT_COLUMNS: [&str; 11] = [
    "regime",
    "clip",
    "status",
    "r_err_deg",
    "t_err",
    "psnr_db",
    "ssim",
    "vis_psnr_db",
    "vis_ssim",
    "unconverged_frames",
    "error",
];

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub rows: Vec<ResultRow>,
    /// Model evaluations made while filling the table.
    pub evaluations: u64,
    /// Chunks that reached the sampler.
    pub sampled_chunks: usize,
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

impl ResultTable {
    /// Regime labels in first-appearance order.
    pub fn regimes(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.regime) {
                out.push(r.regime.clone());
            }
        }
        out
    }

    pub fn failures(&self) -> impl Iterator<Item = &ResultRow> {
        self.rows.iter().filter(|r| r.outcome.is_err())
    }

    /// Defined values of `metric` over the successful cells of `regime`.
    pub fn values(&self, regime: &str, metric: Metric) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.regime == regime)
            .filter_map(|r| r.outcome.as_ref().ok().and_then(|m| metric.of(m)))
            .collect()
    }

    pub fn median(&self, regime: &str, metric: Metric) -> Option<f64> {
        median(&self.values(regime, metric))
    }

    pub fn mean(&self, regime: &str, metric: Metric) -> Option<f64> {
        mean(&self.values(regime, metric))
    }

    /// Share of clips defined under both regimes where `a` is strictly
    /// better than `b`.
    pub fn win_rate(&self, a: &str, b: &str, metric: Metric) -> Option<f64> {
        let lookup = |regime: &str, clip: &str| {
            self.rows
                .iter()
                .find(|r| r.regime == regime && r.clip == clip)
                .and_then(|r| r.outcome.as_ref().ok())
                .and_then(|m| metric.of(m))
        };
        let mut n = 0usize;
        let mut wins = 0usize;
        for r in self.rows.iter().filter(|r| r.regime == a) {
            if let (Some(x), Some(y)) = (lookup(a, &r.clip), lookup(b, &r.clip)) {
                n += 1;
                let better = if metric.lower_is_better() { x < y } else { x > y };
                wins += better as usize;
            }
        }
        (n > 0).then(|| wins as f64 / n as f64)
    }

    /// Clip-level rows in [`RESULT_COLUMNS`] order.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(RESULT_COLUMNS)?;
        for r in &self.rows {
            let mut rec = vec![r.regime.clone(), r.clip.clone()];
            match &r.outcome {
                Ok(m) => {
                    rec.push("ok".into());
                    rec.extend(Metric::ALL.iter().map(|x| fmt_metric(x.of(m))));
                    rec.push(m.unconverged_frames.to_string());
                    rec.push(String::new());
                }
                Err(e) => {
                    rec.push("failed".into());
                    rec.extend(std::iter::repeat_n(String::new(), Metric::ALL.len() + 1));
                    rec.push(e.clone());
                }
            }
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Per (regime, metric) medians and means over clips.
    pub fn write_summary_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["regime", "metric", "median", "mean", "clips", "failed"])?;
        for regime in self.regimes() {
            let failed = self.failures().filter(|r| r.regime == regime).count();
            for m in Metric::ALL {
                let v = self.values(&regime, m);
                w.write_record([
                    regime.clone(),
                    m.name().to_string(),
                    fmt_metric(median(&v)),
                    fmt_metric(mean(&v)),
                    v.len().to_string(),
                    failed.to_string(),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(r: f64, vis: Option<f64>) -> MetricsReport {
        MetricsReport {
            psnr_db: 20.0,
            ssim: 0.5,
            vis_psnr_db: vis,
            vis_ssim: None,
            r_err_deg: r,
            t_err: 0.1,
            t_err_unnormalized: false,
            unconverged_frames: 0,
            frames: Vec::new(),
        }
    }

    fn table() -> ResultTable {
        let row = |regime: &str, clip: &str, r: f64| ResultRow {
            regime: regime.into(),
            clip: clip.into(),
            outcome: Ok(report(r, Some(r))),
        };
        ResultTable {
            rows: vec![
                row("a", "c0", 1.0),
                row("a", "c1", 3.0),
                row("a", "c2", 2.0),
                row("b", "c0", 2.0),
                row("b", "c1", 1.0),
                ResultRow {
                    regime: "b".into(),
                    clip: "c2".into(),
                    outcome: Err("boom".into()),
                },
            ],
            evaluations: 0,
            sampled_chunks: 0,
        }
    }

    #[test]
    fn aggregates_skip_failed_cells() {
        let t = table();
        assert_eq!(t.regimes(), ["a", "b"]);
        assert_eq!(t.median("a", Metric::RErr), Some(2.0));
        assert_eq!(t.median("b", Metric::RErr), Some(1.5));
        assert_eq!(t.mean("a", Metric::RErr), Some(2.0));
        assert_eq!(t.median("a", Metric::VisSsim), None);
        assert_eq!(t.win_rate("a", "b", Metric::RErr), Some(0.5));
        assert_eq!(t.win_rate("a", "b", Metric::VisPsnr), Some(0.5));
        assert_eq!(t.failures().count(), 1);
    }

    #[test]
    fn csv_marks_failed_cells() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        table().write_csv(&path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], RESULT_COLUMNS.join(","));
        assert_eq!(lines.len(), 7);
        assert!(lines[6].starts_with("b,c2,failed,") && lines[6].ends_with(",boom"));
        let s = dir.path().join("s.csv");
        table().write_summary_csv(&s).unwrap();
        let text = fs::read_to_string(&s).unwrap();
        assert!(text.contains("b,r_err_deg,1.500000,1.500000,2,1"));
        assert!(text.contains("a,vis_ssim,undefined,undefined,0,0"));
    }
}
