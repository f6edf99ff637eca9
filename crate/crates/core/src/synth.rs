//! Synthetic multivariate series with planted trend, seasonality, noise and
//! a known channel coupling.
//!
//! ```text
//! x_c(t) = a_c + b_c t + sum_j A_cj sin(2 pi f_cj t + p_cj)        trend
//!        + sum_d L_cd * amp_d sin(2 pi f_d t + phase_d)             seasonal
//!        + noise_std * e_c(t)                                        noise
//! ```
//!
//! `e_c(t)` comes from SplitMix64 driving a Box-Muller transform, drawn in
//! row-major `(t, c)` order, so any port with the same two algorithms
//! reproduces a dataset bit for bit from its seed.

use std::f64::consts::TAU;
use std::fs;
use std::path::Path;

use chrono::{NaiveDate, NaiveDateTime};
use serde::{Deserialize, Serialize};

use crate::data::{write_csv, Freq, SeriesDataset};
use crate::error::{Error, Result};

/// SplitMix64 (Steele, Lea and Flood), the reference 64-bit mixer.
#[derive(Clone, Debug)]
pub struct SplitMix64 {
    state: u64,
    spare: Option<f64>,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed, spare: None }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in `[0, 1)` from the top 53 bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal by Box-Muller. Each pair of uniforms gives two
    /// normals; the sine half is kept for the next call.
    pub fn next_gaussian(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        self.spare = Some(r * (TAU * u2).sin());
        r * (TAU * u2).cos()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Wave {
    /// Cycles per time step, in `(0, 0.5)`.
    pub freq: f64,
    pub amplitude: f64,
    pub phase: f64,
}

impl Wave {
    pub fn new(freq: f64, amplitude: f64, phase: f64) -> Self {
        Wave { freq, amplitude, phase }
    }

    pub fn at(&self, t: f64) -> f64 {
        self.amplitude * (TAU * self.freq * t + self.phase).sin()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub channels: usize,
    pub length: usize,
    /// Sampling interval in minutes.
    pub interval_minutes: u32,
    pub intercepts: Vec<f64>,
    pub slopes: Vec<f64>,
    /// Slow oscillations added to each channel's trend.
    pub trend_waves: Vec<Vec<Wave>>,
    /// One wave per latent driver.
    pub drivers: Vec<Wave>,
    /// `C x drivers` mixing matrix, rows of unit L2 norm (or all zero).
    pub coupling: Vec<Vec<f64>>,
    pub noise_std: f64,
    /// Values below this are clipped after summing (e.g. 0 for output that
    /// cannot go negative). Ground-truth components are stored unclipped.
    pub floor: Option<f64>,
    pub seed: u64,
}

/// Scales every nonzero row to unit L2 norm.
pub fn normalize_rows(m: &mut [Vec<f64>]) {
    for row in m {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
}

impl SynthSpec {
    /// Flat, noise-free channels; fill in the parts you need.
    pub fn blank(channels: usize, length: usize, seed: u64) -> Self {
        SynthSpec {
            channels,
            length,
            interval_minutes: 60,
            intercepts: vec![0.0; channels],
            slopes: vec![0.0; channels],
            trend_waves: vec![Vec::new(); channels],
            drivers: Vec::new(),
            coupling: vec![Vec::new(); channels],
            noise_std: 0.0,
            floor: None,
            seed,
        }
    }

    /// Independent linear trends, one driver per channel with identity
    /// coupling.
    pub fn linear_trend(channels: usize, length: usize, noise_std: f64, seed: u64) -> Self {
        let mut s = Self::blank(channels, length, seed);
        s.slopes = (0..channels).map(|c| 0.01 * (c as f64 + 1.0)).collect();
        s.intercepts = (0..channels).map(|c| c as f64).collect();
        s.drivers = (0..channels).map(|c| Wave::new(1.0 / 24.0, 1.0, 0.7 * c as f64)).collect();
        s.coupling = identity(channels);
        s.noise_std = noise_std;
        s
    }

    /// A slow trend wave at `trend_freq` and a fast seasonal driver at
    /// `season_freq`, shared by every channel.
    pub fn two_band(channels: usize, length: usize, trend_freq: f64, season_freq: f64, noise_std: f64, seed: u64) -> Self {
        let mut s = Self::blank(channels, length, seed);
        s.trend_waves = (0..channels).map(|c| vec![Wave::new(trend_freq, 2.0, 0.5 * c as f64)]).collect();
        s.drivers = vec![Wave::new(season_freq, 1.0, 0.0)];
        s.coupling = vec![vec![1.0]; channels];
        s.noise_std = noise_std;
        s
    }

    /// `pairs` pairs of channels; both channels of pair `d` are driven only
    /// by driver `d`, so the planted coupling graph is a perfect matching.
    pub fn coupled_pairs(pairs: usize, length: usize, noise_std: f64, seed: u64) -> Self {
        let channels = 2 * pairs;
        let mut s = Self::blank(channels, length, seed);
        let mut rng = SplitMix64::new(seed ^ 0x5EED);
        s.drivers = (0..pairs)
            .map(|d| {
                let freq = 1.0 / (6.0 + 5.0 * d as f64);
                Wave::new(freq, 1.0 + 0.25 * d as f64, TAU * rng.next_f64())
            })
            .collect();
        s.coupling = (0..channels).map(|c| (0..pairs).map(|d| f64::from(u8::from(c / 2 == d))).collect()).collect();
        s.slopes = (0..channels).map(|c| 1e-3 * (c / 2 % 3) as f64).collect();
        s.noise_std = noise_std;
        s
    }

    /// Daily cycle with a second harmonic, shared by all channels with
    /// channel-specific weights, clipped at zero like irradiance.
    pub fn solar_like(channels: usize, length: usize, seed: u64) -> Self {
        let mut s = Self::blank(channels, length, seed);
        s.drivers = vec![Wave::new(1.0 / 24.0, 1.0, 0.0), Wave::new(2.0 / 24.0, 0.3, 1.0)];
        s.coupling = (0..channels).map(|c| vec![1.0, 0.2 + 0.1 * (c % 4) as f64]).collect();
        normalize_rows(&mut s.coupling);
        s.intercepts = vec![0.1; channels];
        s.noise_std = 0.05;
        s.floor = Some(0.0);
        s
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels;
        if c == 0 || self.length == 0 {
            return Err(Error::config("synthetic series needs at least one channel and one step"));
        }
        if self.intercepts.len() != c || self.slopes.len() != c || self.trend_waves.len() != c || self.coupling.len() != c {
            return Err(Error::config(format!("per-channel settings must have {c} entries")));
        }
        let waves = self.drivers.iter().chain(self.trend_waves.iter().flatten());
        if let Some(w) = waves.clone().find(|w| !(w.freq > 0.0 && w.freq < 0.5)) {
            return Err(Error::config(format!("frequency {} outside (0, 0.5)", w.freq)));
        }
        for (ci, row) in self.coupling.iter().enumerate() {
            if row.len() != self.drivers.len() {
                return Err(Error::config(format!(
                    "coupling row {ci} has {} entries for {} drivers",
                    row.len(),
                    self.drivers.len()
                )));
            }
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n != 0.0 && (n - 1.0).abs() > 1e-9 {
                return Err(Error::config(format!("coupling row {ci} has norm {n}, expected 1")));
            }
        }
        if !(self.noise_std >= 0.0) || self.interval_minutes == 0 {
            return Err(Error::config("noise std must be >= 0 and the interval positive"));
        }
        Ok(())
    }

    /// Channels that share a driver, as a symmetric 0/1 matrix with an
    /// empty diagonal.
    pub fn coupling_graph(&self) -> Vec<Vec<u8>> {
        let c = self.channels;
        let mut g = vec![vec![0u8; c]; c];
        for i in 0..c {
            for j in 0..c {
                let dot: f64 = self.coupling[i].iter().zip(&self.coupling[j]).map(|(a, b)| a * b).sum();
                g[i][j] = u8::from(i != j && dot.abs() > 1e-12);
            }
        }
        g
    }
}

fn identity(n: usize) -> Vec<Vec<f64>> {
    (0..n).map(|i| (0..n).map(|j| f64::from(u8::from(i == j))).collect()).collect()
}

/// A generated series and its planted parts, each row-major `T x C`.
#[derive(Clone, Debug)]
pub struct SynthSeries {
    pub spec: SynthSpec,
    pub dataset: SeriesDataset,
    pub trend: Vec<f64>,
    pub seasonal: Vec<f64>,
    pub noise: Vec<f64>,
}

#[derive(Serialize)]
struct GroundTruth<'a> {
    spec: &'a SynthSpec,
    trend: Vec<Vec<f64>>,
    seasonal: Vec<Vec<f64>>,
    coupling_graph: Vec<Vec<u8>>,
}

pub fn start_time() -> NaiveDateTime {
    NaiveDate::from_ymd_opt(2020, 1, 1)
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .expect("valid date")
}

pub fn generate(spec: &SynthSpec) -> Result<SynthSeries> {
    spec.validate()?;
    let (t_len, c) = (spec.length, spec.channels);
    let mut rng = SplitMix64::new(spec.seed);
    let mut trend = Vec::with_capacity(t_len * c);
    let mut seasonal = Vec::with_capacity(t_len * c);
    let mut noise = Vec::with_capacity(t_len * c);
    let mut values = Vec::with_capacity(t_len * c);
    for t in 0..t_len {
        let tf = t as f64;
        let drivers: Vec<f64> = spec.drivers.iter().map(|w| w.at(tf)).collect();
        for ci in 0..c {
            let tr = spec.intercepts[ci] + spec.slopes[ci] * tf + spec.trend_waves[ci].iter().map(|w| w.at(tf)).sum::<f64>();
            let se: f64 = spec.coupling[ci].iter().zip(&drivers).map(|(l, d)| l * d).sum();
            let e = spec.noise_std * rng.next_gaussian();
            let mut v = tr + se + e;
            if let Some(f) = spec.floor {
                v = v.max(f);
            }
            trend.push(tr);
            seasonal.push(se);
            noise.push(e);
            values.push(v);
        }
    }
    let step = chrono::Duration::minutes(i64::from(spec.interval_minutes));
    let start = start_time();
    let timestamps = (0..t_len).map(|i| start + step * i as i32).collect();
    let names = (0..c).map(|i| format!("ch{i}")).collect();
    let dataset = SeriesDataset::new(timestamps, values, names, Freq::new(spec.interval_minutes)?)?;
    Ok(SynthSeries {
        spec: spec.clone(),
        dataset,
        trend,
        seasonal,
        noise,
    })
}

impl SynthSeries {
    fn rows(&self, flat: &[f64]) -> Vec<Vec<f64>> {
        flat.chunks(self.spec.channels).map(<[f64]>::to_vec).collect()
    }

    /// Writes the series as CSV and the planted components next to it as
    /// `<stem>.truth.json`. Returns the sidecar path.
    pub fn write(&self, csv_path: impl AsRef<Path>) -> Result<std::path::PathBuf> {
        let csv_path = csv_path.as_ref();
        write_csv(&self.dataset, csv_path)?;
        let sidecar = csv_path.with_extension("truth.json");
        let truth = GroundTruth {
            spec: &self.spec,
            trend: self.rows(&self.trend),
            seasonal: self.rows(&self.seasonal),
            coupling_graph: self.spec.coupling_graph(),
        };
        fs::write(&sidecar, serde_json::to_string(&truth)?)?;
        Ok(sidecar)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{load_csv, LoadOptions};
    use crate::rlc::pcc;

    #[test]
    fn splitmix_reference_values() {
        // First outputs for seed 1234567 from the published reference code.
        let mut r = SplitMix64::new(1234567);
        assert_eq!(r.next_u64(), 6457827717110365317);
        assert_eq!(r.next_u64(), 3203168211198807973);
        assert_eq!(r.next_u64(), 9817491932198370423);
    }

    #[test]
    fn gaussian_moments() {
        let mut r = SplitMix64::new(7);
        let xs: Vec<f64> = (0..200_000).map(|_| r.next_gaussian()).collect();
        let m = xs.iter().sum::<f64>() / xs.len() as f64;
        let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64;
        assert!(m.abs() < 0.01, "{m}");
        assert!((v - 1.0).abs() < 0.01, "{v}");
    }

    #[test]
    fn generation_is_deterministic_per_seed() {
        let spec = SynthSpec::coupled_pairs(3, 200, 0.3, 11);
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a.dataset.values, b.dataset.values);
        let mut other = spec.clone();
        other.seed = 12;
        assert_ne!(generate(&other).unwrap().dataset.values, a.dataset.values);
    }

    #[test]
    fn pure_linear_trends_are_recovered_by_least_squares() {
        let mut spec = SynthSpec::linear_trend(3, 100, 0.0, 0);
        spec.drivers.iter_mut().for_each(|w| w.amplitude = 0.0);
        let s = generate(&spec).unwrap();
        for c in 0..3 {
            let y = s.dataset.channel(c);
            let n = y.len() as f64;
            let tm = (n - 1.0) / 2.0;
            let ym = y.iter().sum::<f64>() / n;
            let sxy: f64 = y.iter().enumerate().map(|(t, v)| (t as f64 - tm) * (v - ym)).sum();
            let sxx: f64 = (0..y.len()).map(|t| (t as f64 - tm).powi(2)).sum();
            let slope = sxy / sxx;
            let intercept = ym - slope * tm;
            assert!((slope - spec.slopes[c]).abs() < 1e-12);
            assert!((intercept - spec.intercepts[c]).abs() < 1e-10);
        }
    }

    #[test]
    fn shared_driver_channels_are_strongly_correlated() {
        let spec = SynthSpec::coupled_pairs(2, 2000, 0.1, 3);
        let s = generate(&spec).unwrap();
        let r = pcc(&s.dataset.channel(0), &s.dataset.channel(1)).unwrap();
        assert!(r > 0.9, "{r}");
        let g = spec.coupling_graph();
        assert_eq!(g[0][1], 1);
        assert_eq!(g[0][2], 0);
        assert_eq!(g[1][1], 0);
    }

    #[test]
    fn identity_coupling_plants_no_edges() {
        let spec = SynthSpec::linear_trend(4, 50, 0.1, 0);
        assert!(spec.coupling_graph().iter().flatten().all(|&e| e == 0));
    }

    #[test]
    fn components_sum_to_the_series() {
        let spec = SynthSpec::two_band(2, 300, 0.03, 0.3, 0.5, 9);
        let s = generate(&spec).unwrap();
        for i in 0..s.dataset.values.len() {
            assert_eq!(s.dataset.values[i], s.trend[i] + s.seasonal[i] + s.noise[i]);
        }
    }

    #[test]
    fn solar_like_never_goes_negative() {
        let s = generate(&SynthSpec::solar_like(4, 500, 1)).unwrap();
        assert!(s.dataset.values.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut spec = SynthSpec::two_band(2, 10, 0.03, 0.3, 0.0, 0);
        spec.drivers[0].freq = 0.5;
        assert!(generate(&spec).is_err());
        let mut spec = SynthSpec::coupled_pairs(1, 10, 0.0, 0);
        spec.coupling[0][0] = 2.0;
        assert!(matches!(generate(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn writes_loadable_csv_and_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let s = generate(&SynthSpec::coupled_pairs(2, 48, 0.1, 5)).unwrap();
        let path = dir.path().join("synth.csv");
        let sidecar = s.write(&path).unwrap();
        let back = load_csv(&path, &LoadOptions::default()).unwrap();
        assert_eq!(back.len(), 48);
        assert_eq!(back.channels(), 4);
        for (a, b) in back.values.iter().zip(&s.dataset.values) {
            assert_eq!(a, b);
        }
        let truth: serde_json::Value = serde_json::from_str(&fs::read_to_string(sidecar).unwrap()).unwrap();
        assert_eq!(truth["coupling_graph"][0][1], 1);
        assert_eq!(truth["trend"].as_array().unwrap().len(), 48);
    }
}
