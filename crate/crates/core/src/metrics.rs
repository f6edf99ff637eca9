//! Point-forecast error metrics and naive reference forecasters.

use serde::{Deserialize, Serialize};

use crate::data::{WindowBatch, WindowSet};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

/// Targets with `|y|` below this are left out of MAPE.
pub const MAPE_FLOOR: f64 = 1e-8;

fn check(y: &[f64], y_hat: &[f64]) -> Result<()> {
    if y.len() != y_hat.len() {
        return Err(Error::shape("metric", format!("{} targets vs {} predictions", y.len(), y_hat.len())));
    }
    if y.is_empty() {
        return Err(Error::shape("metric", "no elements"));
    }
    Ok(())
}

pub fn mse(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    check(y, y_hat)?;
    Ok(y.iter().zip(y_hat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y.len() as f64)
}

pub fn mae(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    check(y, y_hat)?;
    Ok(y.iter().zip(y_hat).map(|(a, b)| (a - b).abs()).sum::<f64>() / y.len() as f64)
}

pub fn rmse(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    mse(y, y_hat).map(f64::sqrt)
}

/// Mean absolute percentage error in percent, over entries with
/// `|y| >= MAPE_FLOOR`. NaN when every target is below the floor.
pub fn mape(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    check(y, y_hat)?;
    let (sum, n) = y
        .iter()
        .zip(y_hat)
        .filter(|(a, _)| a.abs() >= MAPE_FLOOR)
        .fold((0.0, 0usize), |(s, n), (a, b)| (s + ((a - b) / a).abs(), n + 1));
    Ok(if n == 0 { f64::NAN } else { 100.0 * sum / n as f64 })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mse: f64,
    pub mae: f64,
    pub mape: f64,
    pub rmse: f64,
    pub count: usize,
}

/// Streaming sums for [`Metrics`] over many batches.
#[derive(Clone, Copy, Debug, Default)]
pub struct MetricAccumulator {
    sse: f64,
    sae: f64,
    sape: f64,
    n: usize,
    n_pct: usize,
}

impl MetricAccumulator {
    pub fn push(&mut self, y: &[f64], y_hat: &[f64]) -> Result<()> {
        check(y, y_hat)?;
        for (&a, &b) in y.iter().zip(y_hat) {
            let e = a - b;
            self.sse += e * e;
            self.sae += e.abs();
            if a.abs() >= MAPE_FLOOR {
                self.sape += (e / a).abs();
                self.n_pct += 1;
            }
        }
        self.n += y.len();
        Ok(())
    }

    pub fn finish(&self) -> Metrics {
        if self.n == 0 {
            return Metrics {
                mse: f64::NAN,
                mae: f64::NAN,
                mape: f64::NAN,
                rmse: f64::NAN,
                count: 0,
            };
        }
        let mse = self.sse / self.n as f64;
        Metrics {
            mse,
            mae: self.sae / self.n as f64,
            mape: if self.n_pct == 0 { f64::NAN } else { 100.0 * self.sape / self.n_pct as f64 },
            rmse: mse.sqrt(),
            count: self.n,
        }
    }
}

/// Copies the last observed step across the horizon.
pub fn repeat_last(batch: &WindowBatch) -> Tensor {
    let (b, l, c, o) = (batch.batch_size(), batch.lookback(), batch.channels(), batch.horizon());
    let mut out = Vec::with_capacity(b * o * c);
    for bi in 0..b {
        let last = &batch.x.data()[(bi * l + l - 1) * c..(bi * l + l) * c];
        for _ in 0..o {
            out.extend_from_slice(last);
        }
    }
    Tensor::from_parts(vec![b, o, c], out)
}

/// Predicts each window's own mean for every future step.
pub fn window_mean(batch: &WindowBatch) -> Tensor {
    let (b, c, o) = (batch.batch_size(), batch.channels(), batch.horizon());
    let mut out = Vec::with_capacity(b * o * c);
    for bi in 0..b {
        let mu = &batch.mu.data()[bi * c..(bi + 1) * c];
        for _ in 0..o {
            out.extend_from_slice(mu);
        }
    }
    Tensor::from_parts(vec![b, o, c], out)
}

/// Model metrics next to both naive references on the same windows.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: Metrics,
    pub repeat_last: Metrics,
    pub window_mean: Metrics,
    pub windows: usize,
}

/// Scores `model` on the windows at `positions` of `set`, in batches.
pub fn evaluate(model: Option<&Model>, set: &WindowSet, positions: &[usize], batch_size: usize) -> Result<EvalReport> {
    let mut m = MetricAccumulator::default();
    let mut r = MetricAccumulator::default();
    let mut w = MetricAccumulator::default();
    for chunk in positions.chunks(batch_size.max(1)) {
        let batch = set.batch(chunk)?;
        if let Some(model) = model {
            let pred = model.predict(&batch)?;
            m.push(batch.y.data(), pred.data())?;
        }
        r.push(batch.y.data(), repeat_last(&batch).data())?;
        w.push(batch.y.data(), window_mean(&batch).data())?;
    }
    Ok(EvalReport {
        model: m.finish(),
        repeat_last: r.finish(),
        window_mean: w.finish(),
        windows: positions.len(),
    })
}

/// Mean and sample standard deviation; the deviation is 0 for one value.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}
