//! Heart-rate error statistics.

use std::fmt::Write as _;
use std::path::Path;

use crate::dsp::pearson;
use crate::error::{Error, Result};

pub const METRICS_HEADER: &str = "method,count,std,mae,rmse,mer_pct,r";

/// Error statistics of predicted against reference heart rates (bpm).
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct MetricReport {
    pub count: usize,
    /// Sample (n − 1) standard deviation of the signed error; 0 for one pair.
    pub std: f64,
    pub mae: f64,
    pub rmse: f64,
    /// Mean relative error as a fraction.
    pub mer: f64,
    /// Pearson correlation; NaN when either list is constant.
    pub r: f64,
}

pub fn compute_metrics(pred: &[f64], gt: &[f64]) -> Result<MetricReport> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::invalid(format!(
            "metrics need equal non-empty lists, got {} predictions and {} references",
            pred.len(),
            gt.len()
        )));
    }
    if let Some(i) = gt.iter().position(|g| !(*g > 0.0)) {
        return Err(Error::invalid(format!(
            "reference heart rate #{i} is {} (must be > 0)",
            gt[i]
        )));
    }
    let n = pred.len() as f64;
    let err: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| p - g).collect();
    let mean = err.iter().sum::<f64>() / n;
    let std = if pred.len() > 1 {
        (err.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    let mae = err.iter().map(|e| e.abs()).sum::<f64>() / n;
    let rmse = (err.iter().map(|e| e * e).sum::<f64>() / n).sqrt();
    let mer = err.iter().zip(gt).map(|(e, g)| e.abs() / g).sum::<f64>() / n;
    let r = pearson(pred, gt).unwrap_or(f64::NAN);
    Ok(MetricReport {
        count: pred.len(),
        std,
        mae,
        rmse,
        mer,
        r,
    })
}

pub fn format_metrics_row(method: &str, m: &MetricReport) -> String {
    format!(
        "{method},{},{:.6},{:.6},{:.6},{:.6},{:.6}",
        m.count,
        m.std,
        m.mae,
        m.rmse,
        m.mer * 100.0,
        m.r
    )
}

pub fn format_metrics_csv(rows: &[(String, MetricReport)]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for (method, m) in rows {
        let _ = writeln!(s, "{}", format_metrics_row(method, m));
    }
    s
}

pub fn write_metrics_csv(path: &Path, rows: &[(String, MetricReport)]) -> Result<()> {
    std::fs::write(path, format_metrics_csv(rows)).map_err(|e| Error::io(path, e))
}
