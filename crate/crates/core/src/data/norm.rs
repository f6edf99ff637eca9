use serde::{Deserialize, Serialize};

use super::SeriesDataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Floor on per-window standard deviations.
pub const NORM_EPS: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct Normalized {
    /// `B x L x C`.
    pub x: Tensor,
    /// `B x 1 x C`.
    pub mu: Tensor,
    /// `B x 1 x C`, never below [`NORM_EPS`].
    pub sigma: Tensor,
}

/// Per-window, per-channel standardization over the time axis of a
/// `B x L x C` tensor. The standard deviation is the population one,
/// floored at [`NORM_EPS`], so a constant window maps to zeros and any
/// affine change `a*x + b` with `a > 0` leaves the output unchanged up to
/// rounding.
pub fn instance_normalize(x: &Tensor) -> Result<Normalized> {
    let &[b, l, c] = x.shape() else {
        return Err(Error::shape("instance_normalize", format!("expected B x L x C, got {:?}", x.shape())));
    };
    let d = x.data();
    let mut mu = vec![0.0; b * c];
    let mut sigma = vec![0.0; b * c];
    for bi in 0..b {
        for ci in 0..c {
            let at = |t: usize| d[(bi * l + t) * c + ci];
            let m = (0..l).map(at).sum::<f64>() / l as f64;
            let var = (0..l).map(|t| (at(t) - m).powi(2)).sum::<f64>() / l as f64;
            mu[bi * c + ci] = m;
            sigma[bi * c + ci] = var.sqrt().max(NORM_EPS);
        }
    }
    let mut out = vec![0.0; d.len()];
    for bi in 0..b {
        for t in 0..l {
            for ci in 0..c {
                let k = bi * c + ci;
                let i = (bi * l + t) * c + ci;
                out[i] = (d[i] - mu[k]) / sigma[k];
            }
        }
    }
    Ok(Normalized {
        x: Tensor::new([b, l, c], out)?,
        mu: Tensor::new([b, 1, c], mu)?,
        sigma: Tensor::new([b, 1, c], sigma)?,
    })
}

/// `h * sigma + mu` with the statistics repeated along the horizon.
pub fn denormalize(h: &Tensor, mu: &Tensor, sigma: &Tensor) -> Result<Tensor> {
    let &[b, o, c] = h.shape() else {
        return Err(Error::shape("denormalize", format!("expected B x O x C, got {:?}", h.shape())));
    };
    if mu.shape() != [b, 1, c] || sigma.shape() != [b, 1, c] {
        return Err(Error::shape(
            "denormalize",
            format!("statistics {:?}/{:?} do not match predictions {:?}", mu.shape(), sigma.shape(), h.shape()),
        ));
    }
    let mut out = h.data().to_vec();
    for bi in 0..b {
        for t in 0..o {
            for ci in 0..c {
                let k = bi * c + ci;
                let v = &mut out[(bi * o + t) * c + ci];
                *v = *v * sigma.data()[k] + mu.data()[k];
            }
        }
    }
    Tensor::new([b, o, c], out)
}

/// Per-channel z-score fitted on a training range and applied to the whole
/// series, so errors are reported on a common scale across channels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Scaler {
    pub fn fit(ds: &SeriesDataset, rows: std::ops::Range<usize>) -> Result<Self> {
        if rows.is_empty() || rows.end > ds.len() {
            return Err(Error::Data(format!("cannot fit scaler on rows {rows:?} of {}", ds.len())));
        }
        let n = rows.len() as f64;
        let c = ds.channels();
        let mut mean = vec![0.0; c];
        let mut std = vec![0.0; c];
        for ci in 0..c {
            let m = rows.clone().map(|t| ds.value(t, ci)).sum::<f64>() / n;
            let var = rows.clone().map(|t| (ds.value(t, ci) - m).powi(2)).sum::<f64>() / n;
            mean[ci] = m;
            std[ci] = if var.sqrt() > NORM_EPS { var.sqrt() } else { 1.0 };
        }
        Ok(Scaler { mean, std })
    }

    pub fn identity(channels: usize) -> Self {
        Scaler {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    pub fn transform(&self, ds: &SeriesDataset) -> SeriesDataset {
        let c = ds.channels();
        let mut out = ds.clone();
        for (i, v) in out.values.iter_mut().enumerate() {
            *v = (*v - self.mean[i % c]) / self.std[i % c];
        }
        out
    }

    /// Maps a trailing-channel tensor back to the original units.
    pub fn inverse(&self, t: &Tensor) -> Tensor {
        let c = self.mean.len();
        let mut out = t.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = *v * self.std[i % c] + self.mean[i % c];
        }
        out
    }
}
