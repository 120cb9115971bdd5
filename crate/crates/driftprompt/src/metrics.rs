//! Evaluation metrics and multi-run aggregation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Mse,
    Mae,
    /// 100 * (1 - accuracy) with a 0.5 threshold on sigmoid outputs.
    ClassificationErrorPct,
    /// sqrt(MSE) * 1000, the scale used for forecasting tables.
    RmseX1e3,
}

impl MetricKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MetricKind::Mse => "mse",
            MetricKind::Mae => "mae",
            MetricKind::ClassificationErrorPct => "classification_error_pct",
            MetricKind::RmseX1e3 => "rmse_x1e3",
        }
    }

    /// Natural metric for a task's reported table.
    pub fn for_task(task: crate::backbone::TaskKind) -> MetricKind {
        match task {
            crate::backbone::TaskKind::BinaryClassification => MetricKind::ClassificationErrorPct,
            _ => MetricKind::Mse,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Vanilla,
    Ours,
    OursNoPg,
    OursNoPt,
    OursNonsequential,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Vanilla => "vanilla",
            Method::Ours => "ours",
            Method::OursNoPg => "ours_no_pg",
            Method::OursNoPt => "ours_no_pt",
            Method::OursNonsequential => "ours_nonsequential",
        }
    }
}

pub fn compute_metric(preds: &[f64], targets: &[f64], kind: MetricKind) -> Result<f64> {
    if preds.len() != targets.len() {
        return Err(Error::Data(format!(
            "{} predictions vs {} targets",
            preds.len(),
            targets.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::Data("no predictions to score".into()));
    }
    let n = preds.len() as f64;
    let value = match kind {
        MetricKind::Mse => {
            preds
                .iter()
                .zip(targets)
                .map(|(p, t)| (p - t) * (p - t))
                .sum::<f64>()
                / n
        }
        MetricKind::Mae => {
            preds
                .iter()
                .zip(targets)
                .map(|(p, t)| (p - t).abs())
                .sum::<f64>()
                / n
        }
        MetricKind::ClassificationErrorPct => {
            let wrong = preds
                .iter()
                .zip(targets)
                .filter(|(p, t)| (**p > 0.5) != (**t > 0.5))
                .count();
            100.0 * wrong as f64 / n
        }
        MetricKind::RmseX1e3 => {
            compute_metric(preds, targets, MetricKind::Mse)?.sqrt() * 1000.0
        }
    };
    if !value.is_finite() {
        return Err(Error::NonFinite {
            context: format!("{} computation", kind.as_str()),
        });
    }
    Ok(value)
}

/// Single-pass mean and sample standard deviation (Welford). The std is
/// `None` for fewer than two values.
pub fn mean_std(values: &[f64]) -> (f64, Option<f64>) {
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for (i, &v) in values.iter().enumerate() {
        let delta = v - mean;
        mean += delta / (i + 1) as f64;
        m2 += delta * (v - mean);
    }
    let std = if values.len() > 1 {
        Some((m2 / (values.len() - 1) as f64).sqrt())
    } else {
        None
    };
    (mean, std)
}

/// One scored cell of a results table, aggregated over `runs` seeds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricRecord {
    pub dataset: String,
    pub method: Method,
    /// Domain the score was computed on (target domain index).
    pub domain: usize,
    pub metric: MetricKind,
    pub mean: f64,
    pub std: Option<f64>,
    pub runs: usize,
}

impl MetricRecord {
    pub fn from_runs(
        dataset: impl Into<String>,
        method: Method,
        domain: usize,
        metric: MetricKind,
        values: &[f64],
    ) -> Result<MetricRecord> {
        if values.is_empty() {
            return Err(Error::Data("no run values to aggregate".into()));
        }
        let (mean, std) = mean_std(values);
        Ok(MetricRecord {
            dataset: dataset.into(),
            method,
            domain,
            metric,
            mean,
            std,
            runs: values.len(),
        })
    }
}
