//! Periodograms of the smoothed and detrended patch sequences.

use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::Serialize;

use crate::autodiff::Tape;
use crate::data::WindowSet;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

/// Upper edge of the low band and lower edge of the high band, in cycles
/// per sample.
pub const LOW_EDGE: f64 = 0.1;
pub const HIGH_EDGE: f64 = 0.2;
/// Shortest sequence the periodogram accepts.
pub const MIN_SPECTRAL_LEN: usize = 8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct Bands {
    pub low: f64,
    pub mid: f64,
    pub high: f64,
}

impl Bands {
    pub fn total(&self) -> f64 {
        self.low + self.mid + self.high
    }

    /// Each band as a fraction of the total; all zero for a silent signal.
    pub fn shares(&self) -> Bands {
        let t = self.total();
        if t == 0.0 {
            return Bands::default();
        }
        Bands {
            low: self.low / t,
            mid: self.mid / t,
            high: self.high / t,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SpectralProfile {
    pub freqs: Vec<f64>,
    pub trend_psd: Vec<f64>,
    pub variation_psd: Vec<f64>,
    pub trend_bands: Bands,
    pub variation_bands: Bands,
    /// Number of sequences averaged per component.
    pub sequences: usize,
}

/// One-sided periodogram with a rectangular window, scaled so that the bins
/// sum to `sum(x^2)`. Bin `k` sits at frequency `k / n`.
pub fn periodogram(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    if n == 0 {
        return Vec::new();
    }
    let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    (0..=n / 2)
        .map(|k| {
            let p = buf[k].norm_sqr() / n as f64;
            if k == 0 || 2 * k == n {
                p
            } else {
                2.0 * p
            }
        })
        .collect()
}

pub fn bin_freqs(n: usize) -> Vec<f64> {
    (0..=n / 2).map(|k| k as f64 / n as f64).collect()
}

pub fn band_energies(freqs: &[f64], psd: &[f64]) -> Bands {
    let mut b = Bands::default();
    for (&f, &p) in freqs.iter().zip(psd) {
        if f < LOW_EDGE {
            b.low += p;
        } else if f < HIGH_EDGE {
            b.mid += p;
        } else {
            b.high += p;
        }
    }
    b
}

/// Accumulates mean periodograms of `B x N x C x D` latents along `N`.
#[derive(Clone, Debug)]
pub struct SpectralAccumulator {
    n: usize,
    remove_mean: bool,
    trend: Vec<f64>,
    variation: Vec<f64>,
    count: usize,
}

impl SpectralAccumulator {
    pub fn new(n: usize, remove_mean: bool) -> Result<Self> {
        if n < MIN_SPECTRAL_LEN {
            return Err(Error::config(format!(
                "spectral analysis needs at least {MIN_SPECTRAL_LEN} steps along the patch axis, got {n}"
            )));
        }
        Ok(SpectralAccumulator {
            n,
            remove_mean,
            trend: vec![0.0; n / 2 + 1],
            variation: vec![0.0; n / 2 + 1],
            count: 0,
        })
    }

    fn add_tensor(&self, t: &Tensor, acc: &mut [f64]) -> Result<usize> {
        let s = t.shape();
        if s.len() != 4 || s[1] != self.n {
            return Err(Error::shape("spectral_profile", format!("expected B x {} x C x D, got {s:?}", self.n)));
        }
        let (b, n, c, d) = (s[0], s[1], s[2], s[3]);
        let mut seq = vec![0.0; n];
        for bi in 0..b {
            for ci in 0..c {
                for di in 0..d {
                    for (ni, v) in seq.iter_mut().enumerate() {
                        *v = t.data()[((bi * n + ni) * c + ci) * d + di];
                    }
                    if self.remove_mean {
                        let m = seq.iter().sum::<f64>() / n as f64;
                        seq.iter_mut().for_each(|v| *v -= m);
                    }
                    for (a, p) in acc.iter_mut().zip(periodogram(&seq)) {
                        *a += p;
                    }
                }
            }
        }
        Ok(b * c * d)
    }

    pub fn push(&mut self, trend: &Tensor, variation: &Tensor) -> Result<()> {
        if trend.shape() != variation.shape() {
            return Err(Error::shape("spectral_profile", "trend and variation shapes differ"));
        }
        let mut t = std::mem::take(&mut self.trend);
        let mut v = std::mem::take(&mut self.variation);
        let r = self.add_tensor(trend, &mut t).and_then(|k| self.add_tensor(variation, &mut v).map(|_| k));
        self.trend = t;
        self.variation = v;
        self.count += r?;
        Ok(())
    }

    pub fn finish(&self) -> SpectralProfile {
        let k = self.count.max(1) as f64;
        let freqs = bin_freqs(self.n);
        let trend_psd: Vec<f64> = self.trend.iter().map(|p| p / k).collect();
        let variation_psd: Vec<f64> = self.variation.iter().map(|p| p / k).collect();
        SpectralProfile {
            trend_bands: band_energies(&freqs, &trend_psd),
            variation_bands: band_energies(&freqs, &variation_psd),
            freqs,
            trend_psd,
            variation_psd,
            sequences: self.count,
        }
    }
}

/// Profile of a single pair of `B x N x C x D` tensors.
pub fn spectral_profile(trend: &Tensor, variation: &Tensor, remove_mean: bool) -> Result<SpectralProfile> {
    let n = trend.shape().get(1).copied().unwrap_or(0);
    let mut acc = SpectralAccumulator::new(n, remove_mean)?;
    acc.push(trend, variation)?;
    Ok(acc.finish())
}

/// Runs the model on `positions` and profiles the first level's smoothed
/// trend and its detrended residual.
pub fn model_spectral_profile(
    model: &Model,
    set: &WindowSet,
    positions: &[usize],
    batch_size: usize,
    remove_mean: bool,
) -> Result<SpectralProfile> {
    let n = model.config.temporal_lengths()?[0];
    let mut acc = SpectralAccumulator::new(n, remove_mean)?;
    for chunk in positions.chunks(batch_size.max(1)) {
        let batch = set.batch(chunk)?;
        let mut tape = Tape::new();
        let p = model.bind(&mut tape);
        let f = model.forward(&mut tape, &p, &batch)?;
        let level = &f.levels[0];
        let (Some(trend), Some(det)) = (level.trend, level.det) else {
            return Err(Error::config("model has no smoothing stage to analyze"));
        };
        acc.push(tape.value(trend), tape.value(det))?;
    }
    Ok(acc.finish())
}

#[derive(Serialize)]
struct SpectralRow {
    freq: f64,
    trend_psd: f64,
    variation_psd: f64,
}

#[derive(Serialize)]
struct BandRow {
    band: &'static str,
    trend_energy: f64,
    trend_share: f64,
    variation_energy: f64,
    variation_share: f64,
}

/// Writes the per-bin table to `path` and the band table next to it as
/// `<stem>_bands.csv`.
pub fn write_spectral(path: impl AsRef<Path>, profile: &SpectralProfile) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    for i in 0..profile.freqs.len() {
        w.serialize(SpectralRow {
            freq: profile.freqs[i],
            trend_psd: profile.trend_psd[i],
            variation_psd: profile.variation_psd[i],
        })?;
    }
    w.flush()?;
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("spectral");
    let mut w = csv::Writer::from_path(path.with_file_name(format!("{stem}_bands.csv")))?;
    let (t, v) = (profile.trend_bands, profile.variation_bands);
    let (ts, vs) = (t.shares(), v.shares());
    for (band, te, tsh, ve, vsh) in [
        ("low", t.low, ts.low, v.low, vs.low),
        ("mid", t.mid, ts.mid, v.mid, vs.mid),
        ("high", t.high, ts.high, v.high, vs.high),
    ] {
        w.serialize(BandRow {
            band,
            trend_energy: te,
            trend_share: tsh,
            variation_energy: ve,
            variation_share: vsh,
        })?;
    }
    w.flush()?;
    Ok(())
}
