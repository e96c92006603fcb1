//! Classification and group-fairness metrics over binary predictions.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_lengths(a: &[u8], b: &[u8], what: &str) -> Result<()> {
    if a.is_empty() {
        return Err(Error::Contract(format!("{what}: empty input")));
    }
    if a.len() != b.len() {
        return Err(Error::Contract(format!(
            "{what}: length mismatch {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

pub fn accuracy(y_hat: &[u8], y: &[u8]) -> Result<f64> {
    check_lengths(y_hat, y, "accuracy")?;
    let hits = y_hat.iter().zip(y).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / y.len() as f64)
}

/// F1 of the positive class; 0 when precision + recall is 0.
pub fn f1(y_hat: &[u8], y: &[u8]) -> Result<f64> {
    check_lengths(y_hat, y, "f1")?;
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (&p, &t) in y_hat.iter().zip(y) {
        match (p, t) {
            (1, 1) => tp += 1,
            (1, _) => fp += 1,
            (_, 1) => fneg += 1,
            _ => {}
        }
    }
    let precision = if tp + fp > 0 {
        tp as f64 / (tp + fp) as f64
    } else {
        0.0
    };
    let recall = if tp + fneg > 0 {
        tp as f64 / (tp + fneg) as f64
    } else {
        0.0
    };
    if precision + recall == 0.0 {
        Ok(0.0)
    } else {
        Ok(2.0 * precision * recall / (precision + recall))
    }
}

/// Positive-prediction rate of each group, `[rate(a=0), rate(a=1)]`.
pub fn group_positive_rates(y_hat: &[u8], a: &[u8]) -> Result<[f64; 2]> {
    check_lengths(y_hat, a, "positive rate")?;
    let mut pos = [0usize; 2];
    let mut tot = [0usize; 2];
    for (&p, &g) in y_hat.iter().zip(a) {
        let g = usize::from(g == 1);
        tot[g] += 1;
        pos[g] += usize::from(p == 1);
    }
    if tot.contains(&0) {
        return Err(Error::UndefinedMetric(
            "demographic parity needs both groups present".into(),
        ));
    }
    Ok([
        pos[0] as f64 / tot[0] as f64,
        pos[1] as f64 / tot[1] as f64,
    ])
}

/// True-positive rate of each group, `[tpr(a=0), tpr(a=1)]`.
pub fn group_tprs(y_hat: &[u8], y: &[u8], a: &[u8]) -> Result<[f64; 2]> {
    check_lengths(y_hat, y, "tpr")?;
    check_lengths(y_hat, a, "tpr")?;
    let mut pos = [0usize; 2];
    let mut tot = [0usize; 2];
    for ((&p, &t), &g) in y_hat.iter().zip(y).zip(a) {
        if t != 1 {
            continue;
        }
        let g = usize::from(g == 1);
        tot[g] += 1;
        pos[g] += usize::from(p == 1);
    }
    if tot.contains(&0) {
        return Err(Error::UndefinedMetric(
            "equal opportunity needs positives in both groups".into(),
        ));
    }
    Ok([
        pos[0] as f64 / tot[0] as f64,
        pos[1] as f64 / tot[1] as f64,
    ])
}

/// `|P(Ŷ=1 | A=1) - P(Ŷ=1 | A=0)|`
pub fn dp_gap(y_hat: &[u8], a: &[u8]) -> Result<f64> {
    let r = group_positive_rates(y_hat, a)?;
    Ok((r[1] - r[0]).abs())
}

/// `|P(Ŷ=1 | A=1, Y=1) - P(Ŷ=1 | A=0, Y=1)|`
pub fn eo_gap(y_hat: &[u8], y: &[u8], a: &[u8]) -> Result<f64> {
    let r = group_tprs(y_hat, y, a)?;
    Ok((r[1] - r[0]).abs())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub acc: f64,
    pub f1: f64,
    pub dp_gap: f64,
    pub eo_gap: f64,
    pub n: usize,
    pub positive_rate: [f64; 2],
    pub tpr: [f64; 2],
}

impl MetricsReport {
    pub fn evaluate(y_hat: &[u8], y: &[u8], a: &[u8]) -> Result<Self> {
        let positive_rate = group_positive_rates(y_hat, a)?;
        let tpr = group_tprs(y_hat, y, a)?;
        Ok(Self {
            acc: accuracy(y_hat, y)?,
            f1: f1(y_hat, y)?,
            dp_gap: (positive_rate[1] - positive_rate[0]).abs(),
            eo_gap: (tpr[1] - tpr[0]).abs(),
            n: y.len(),
            positive_rate,
            tpr,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Mean and sample standard deviation (`n - 1` denominator, 0 for n = 1).
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Contract("cannot aggregate zero values".into()));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Ok(Self { mean, std })
    }
}

impl fmt::Display for MeanStd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.3}±{:.3}", self.mean, self.std)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub acc: MeanStd,
    pub f1: MeanStd,
    pub dp_gap: MeanStd,
    pub eo_gap: MeanStd,
}

pub fn aggregate(reports: &[MetricsReport]) -> Result<Aggregate> {
    if reports.is_empty() {
        return Err(Error::Contract("cannot aggregate zero reports".into()));
    }
    let col = |f: fn(&MetricsReport) -> f64| {
        MeanStd::of(&reports.iter().map(f).collect::<Vec<_>>())
    };
    Ok(Aggregate {
        acc: col(|r| r.acc)?,
        f1: col(|r| r.f1)?,
        dp_gap: col(|r| r.dp_gap)?,
        eo_gap: col(|r| r.eo_gap)?,
    })
}
