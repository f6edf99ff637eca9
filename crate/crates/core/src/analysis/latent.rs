//! Latent factor diagnostics and the gate-versus-volatility trace.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::WindowSet;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::rlc::{pcc, project_latent, stat_readout};
use crate::train::StepRecord;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrthRow {
    pub step: usize,
    pub l_orth: f64,
    pub sigma_max: f64,
}

/// Penalty and spectral norm per optimizer step, with the initial
/// projection as step 0.
pub fn orth_trace(init_l_orth: f64, init_sigma_max: f64, steps: &[StepRecord]) -> Vec<OrthRow> {
    std::iter::once(OrthRow {
        step: 0,
        l_orth: init_l_orth,
        sigma_max: init_sigma_max,
    })
    .chain(steps.iter().map(|s| OrthRow {
        step: s.step,
        l_orth: s.l_orth,
        sigma_max: s.sigma_max,
    }))
    .collect()
}

pub fn write_orth_trace(path: impl AsRef<Path>, rows: &[OrthRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_orth_trace(path: impl AsRef<Path>) -> Result<Vec<OrthRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Latent factors `Z_rlc`, one row per window, `K` columns.
pub fn latent_factors(model: &Model, set: &WindowSet, positions: &[usize], batch_size: usize) -> Result<Vec<Vec<f64>>> {
    let mut rows = Vec::with_capacity(positions.len());
    for chunk in positions.chunks(batch_size.max(1)) {
        let batch = set.batch(chunk)?;
        let mut tape = Tape::new();
        let p = model.bind(&mut tape);
        let f = model.forward(&mut tape, &p, &batch)?;
        let stats = stat_readout(&mut tape, f.z_final)?;
        let z = project_latent(&mut tape, stats, p.var("rlc.w")?)?;
        let z = tape.value(z);
        let k = z.shape()[1];
        rows.extend(z.data().chunks(k).map(<[f64]>::to_vec));
    }
    Ok(rows)
}

/// Pearson correlation between columns; the diagonal is 1 by definition.
pub fn correlation_matrix(rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let k = rows.first().map_or(0, Vec::len);
    if rows.len() < 2 {
        return Err(Error::Data("correlation needs at least two windows".into()));
    }
    let cols: Vec<Vec<f64>> = (0..k).map(|j| rows.iter().map(|r| r[j]).collect()).collect();
    let mut m = vec![vec![1.0; k]; k];
    for i in 0..k {
        for j in i + 1..k {
            let r = pcc(&cols[i], &cols[j])?;
            m[i][j] = r;
            m[j][i] = r;
        }
    }
    Ok(m)
}

pub fn max_off_diagonal(m: &[Vec<f64>]) -> f64 {
    let mut best = 0.0f64;
    for (i, r) in m.iter().enumerate() {
        for (j, v) in r.iter().enumerate() {
            if i != j {
                best = best.max(v.abs());
            }
        }
    }
    best
}

pub fn write_matrix(path: impl AsRef<Path>, m: &[Vec<f64>]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    for r in m {
        w.write_record(r.iter().map(f64::to_string))?;
    }
    w.flush()?;
    Ok(())
}

/// Population standard deviation over a trailing window of `width` steps;
/// the first entries use whatever history exists.
pub fn rolling_std(x: &[f64], width: usize) -> Vec<f64> {
    let width = width.max(1);
    (0..x.len())
        .map(|t| {
            let w = &x[(t + 1).saturating_sub(width)..=t];
            let m = w.iter().sum::<f64>() / w.len() as f64;
            (w.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / w.len() as f64).sqrt()
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateRow {
    /// Row index in the dataset.
    pub t: usize,
    pub timestamp: String,
    pub signal: f64,
    pub volatility: f64,
    pub gate: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GateTrace {
    pub rows: Vec<GateRow>,
    /// Pearson correlation of volatility and gate; NaN for fewer than two rows.
    pub correlation: f64,
}

/// Gate values along consecutive non-overlapping windows of `set` next to
/// the rolling volatility of one channel. Build `set` with a stride equal
/// to the lookback for a gap-free trace.
pub fn gate_trace(model: &Model, set: &WindowSet, channel: usize, width: usize, max_windows: Option<usize>) -> Result<GateTrace> {
    if model.config.no_period {
        return Err(Error::config("model has no periodic gate"));
    }
    let ds = set.dataset();
    if channel >= ds.channels() {
        return Err(Error::config(format!("channel {channel} out of range for {} channels", ds.channels())));
    }
    let l = set.lookback;
    let n = max_windows.unwrap_or(usize::MAX).min(set.len());
    let mut rows = Vec::with_capacity(n * l);
    for w in 0..n {
        let batch = set.batch(&[w])?;
        let mut tape = Tape::new();
        let p = model.bind(&mut tape);
        let f = model.forward(&mut tape, &p, &batch)?;
        let gate = tape.value(f.gate.expect("gate exists when gating is on"));
        let s = set.starts[w];
        for i in 0..l {
            let t = s + i;
            rows.push(GateRow {
                t,
                timestamp: ds.timestamps[t].format("%Y-%m-%d %H:%M:%S").to_string(),
                signal: ds.value(t, channel),
                volatility: 0.0,
                gate: gate.data()[i],
            });
        }
    }
    let signal: Vec<f64> = rows.iter().map(|r| r.signal).collect();
    for (r, v) in rows.iter_mut().zip(rolling_std(&signal, width)) {
        r.volatility = v;
    }
    let vol: Vec<f64> = rows.iter().map(|r| r.volatility).collect();
    let gate: Vec<f64> = rows.iter().map(|r| r.gate).collect();
    let correlation = if rows.len() < 2 { f64::NAN } else { pcc(&vol, &gate)? };
    Ok(GateTrace { rows, correlation })
}

pub fn write_gate_trace(path: impl AsRef<Path>, trace: &GateTrace) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in &trace.rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SeriesDataset;
    use crate::model::ModelConfig;
    use crate::rlc::orth_value;
    use crate::synth::{generate, SynthSpec};

    fn setup(gamma: f64) -> (SeriesDataset, Model) {
        let ds = generate(&SynthSpec::linear_trend(2, 400, 0.1, 0)).unwrap().dataset;
        let mut cfg = ModelConfig::for_series(&ds, 32, 8);
        cfg.patch_len = 8;
        cfg.stride = 4;
        cfg.d_model = 8;
        cfg.heads = 2;
        cfg.gamma = gamma;
        let m = Model::new(cfg, 1).unwrap();
        (ds, m)
    }

    #[test]
    fn fresh_projection_starts_the_trace_near_zero() {
        let (_, m) = setup(0.5);
        let w = m.params.get("rlc.w").unwrap();
        let rows = orth_trace(orth_value(w).unwrap(), 1.0, &[]);
        assert_eq!(rows.len(), 1);
        assert!(rows[0].l_orth < 1e-10);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("orth_trace.csv");
        write_orth_trace(&p, &rows).unwrap();
        assert_eq!(read_orth_trace(&p).unwrap(), rows);
    }

    #[test]
    fn single_factor_correlation_is_one() {
        let rows = vec![vec![1.0], vec![2.0], vec![0.5]];
        assert_eq!(correlation_matrix(&rows).unwrap(), vec![vec![1.0]]);
        assert!(correlation_matrix(&rows[..1]).is_err());
    }

    #[test]
    fn correlation_matrix_is_symmetric() {
        let rows: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64, (i * i) as f64, -(i as f64)]).collect();
        let m = correlation_matrix(&rows).unwrap();
        assert!((m[0][2] + 1.0).abs() < 1e-12);
        assert_eq!(m[0][1], m[1][0]);
        assert!((max_off_diagonal(&m) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn latent_factors_have_one_row_per_window() {
        let (ds, m) = setup(0.5);
        let set = WindowSet::new(&ds, 0..400, 32, 8, 4).unwrap();
        let z = latent_factors(&m, &set, &set.spread(20), 6).unwrap();
        assert_eq!(z.len(), 20);
        assert!(z.iter().all(|r| r.len() == m.config.k_factors));
    }

    #[test]
    fn rolling_std_oracle() {
        assert!(rolling_std(&[4.0; 30], 24).iter().all(|&v| v == 0.0));
        let v = rolling_std(&[1.0, 3.0, 5.0], 2);
        assert_eq!(v, vec![0.0, 1.0, 1.0]);
    }

    #[test]
    fn volatility_spikes_at_a_regime_switch() {
        // Quiet level, then a jump at t = 100 into fast alternation.
        let x: Vec<f64> = (0..200).map(|t| if t < 100 { 0.0 } else if t % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let v = rolling_std(&x, 24);
        assert!(v[..100].iter().all(|&s| s == 0.0));
        assert!(v[101] > 0.0);
        assert!(v[150] > 0.9);
    }

    #[test]
    fn gate_column_exists_without_modulation() {
        let (ds, m) = setup(0.0);
        let set = WindowSet::new(&ds, 0..400, 32, 8, 32).unwrap();
        let tr = gate_trace(&m, &set, 0, 24, Some(3)).unwrap();
        assert_eq!(tr.rows.len(), 96);
        assert!(tr.rows.iter().all(|r| r.gate > 0.0 && r.gate < 1.0));
        assert_eq!(tr.rows[32].t, 32);
        assert!(tr.correlation.is_finite());
        let dir = tempfile::tempdir().unwrap();
        write_gate_trace(dir.path().join("gate_trace.csv"), &tr).unwrap();
        let text = std::fs::read_to_string(dir.path().join("gate_trace.csv")).unwrap();
        assert!(text.starts_with("t,timestamp,signal,volatility,gate\n"));
    }

    #[test]
    fn constant_signal_has_flat_volatility() {
        let (ds, m) = setup(0.5);
        let mut flat = ds.clone();
        flat.values.iter_mut().for_each(|v| *v = 2.0);
        let set = WindowSet::new(&flat, 0..400, 32, 8, 32).unwrap();
        let tr = gate_trace(&m, &set, 1, 24, None).unwrap();
        assert!(tr.rows.iter().all(|r| r.volatility == 0.0));
    }

    #[test]
    fn ablated_gate_is_an_error() {
        let (ds, mut m) = setup(0.5);
        m.config.no_period = true;
        let set = WindowSet::new(&ds, 0..400, 32, 8, 32).unwrap();
        assert!(gate_trace(&m, &set, 0, 24, None).is_err());
    }
}
