//! Latent alignment regularizer: channel statistics of the encoder output
//! projected onto an orthonormal basis and correlated with pooled target
//! statistics across the batch.

use crate::autodiff::{Tape, UnaryOp, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Floor on a sum of squares before its square root, so the root never
/// drops below `1e-8` and its gradient stays finite.
const SS_FLOOR: f64 = 1e-16;

/// Iteration cap for [`spectral_norm`]. Fifty iterations leave errors near
/// `1e-4` when the top two singular values are within a few percent.
pub const SPECTRAL_MAX_ITERS: usize = 1000;

/// Weights and switch for the auxiliary terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RlcWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    /// `false` removes both terms; diagnostics then report zero.
    pub enabled: bool,
}

impl RlcWeights {
    pub fn new(lambda1: f64, lambda2: f64) -> Self {
        RlcWeights {
            lambda1,
            lambda2,
            enabled: true,
        }
    }

    pub fn disabled() -> Self {
        RlcWeights {
            lambda1: 0.0,
            lambda2: 0.0,
            enabled: false,
        }
    }

    pub fn validate(&self, channels: usize, k: usize) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(Error::config(format!(
                "regularization weights must be non-negative, got {} and {}",
                self.lambda1, self.lambda2
            )));
        }
        if self.enabled && self.lambda2 > 0.0 && k != 2 * channels {
            return Err(Error::config(format!(
                "the correlation term pairs latent factor k with pooled statistic k, so it needs K = 2C = {}, got K = {k}",
                2 * channels
            )));
        }
        Ok(())
    }
}

impl Default for RlcWeights {
    fn default() -> Self {
        RlcWeights::new(1e-3, 1e-3)
    }
}

/// Scalar values of one loss evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBundle {
    pub l_mse: f64,
    pub l_orth: f64,
    pub pcc_sum: f64,
    pub total: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

/// The differentiable total plus its scalar breakdown.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub z_rlc: Option<Var>,
    pub bundle: LossBundle,
}

/// Population std over `axes` with the variance floored at `1e-16`.
fn population_std(tape: &mut Tape, x: Var, axes: &[usize]) -> Result<Var> {
    let mu = tape.mean(x, axes, true)?;
    let centered = tape.sub(x, mu)?;
    let sq = tape.square(centered)?;
    let var = tape.mean(sq, axes, false)?;
    let var = tape.unary(UnaryOp::ClampMin(SS_FLOOR), var)?;
    tape.sqrt(var)
}

/// `B x N x C x D` to `B x 2C`: per-channel mean, then population std, over
/// time and embedding axes.
pub fn stat_readout(tape: &mut Tape, z_final: Var) -> Result<Var> {
    let shape = tape.shape(z_final);
    if shape.len() != 4 || shape[1] * shape[3] == 0 {
        return Err(Error::shape("stat_readout", format!("expected non-empty B x N x C x D, got {shape:?}")));
    }
    let mu = tape.mean(z_final, &[1, 3], false)?;
    let sigma = population_std(tape, z_final, &[1, 3])?;
    tape.concat(&[mu, sigma], 1)
}

/// `B x O x C` to `B x 2C`: mean and population std over the horizon.
pub fn target_pool(y: &Tensor) -> Result<Tensor> {
    let &[b, o, c] = y.shape() else {
        return Err(Error::shape("target_pool", format!("expected B x O x C, got {:?}", y.shape())));
    };
    if o == 0 {
        return Err(Error::shape("target_pool", "empty horizon"));
    }
    let mut out = vec![0.0; b * 2 * c];
    for bi in 0..b {
        for ci in 0..c {
            let col = (0..o).map(|t| y.get(&[bi, t, ci]));
            let mean = col.clone().sum::<f64>() / o as f64;
            let var = col.map(|v| (v - mean) * (v - mean)).sum::<f64>() / o as f64;
            out[bi * 2 * c + ci] = mean;
            out[bi * 2 * c + c + ci] = var.sqrt();
        }
    }
    Tensor::new([b, 2 * c], out)
}

pub fn project_latent(tape: &mut Tape, f_stat: Var, w_rlc: Var) -> Result<Var> {
    if tape.shape(f_stat).last() != tape.shape(w_rlc).first() {
        return Err(Error::shape(
            "project_latent",
            format!("statistics {:?} do not match projection {:?}", tape.shape(f_stat), tape.shape(w_rlc)),
        ));
    }
    tape.matmul(f_stat, w_rlc)
}

/// `||W^T W - I||_F^2`.
pub fn orth_loss(tape: &mut Tape, w: Var) -> Result<Var> {
    let &[_, k] = tape.shape(w) else {
        return Err(Error::shape("orth_loss", format!("expected a matrix, got {:?}", tape.shape(w))));
    };
    let wt = tape.transpose(w)?;
    let gram = tape.matmul(wt, w)?;
    let eye = tape.constant(Tensor::eye(k));
    let d = tape.sub(gram, eye)?;
    let sq = tape.square(d)?;
    tape.sum_all(sq)
}

/// [`orth_loss`] on a plain matrix.
pub fn orth_value(w: &Tensor) -> Result<f64> {
    let &[r, k] = w.shape() else {
        return Err(Error::shape("orth_loss", format!("expected a matrix, got {:?}", w.shape())));
    };
    let d = w.data();
    let mut total = 0.0;
    for a in 0..k {
        for b in 0..k {
            let dot: f64 = (0..r).map(|i| d[i * k + a] * d[i * k + b]).sum();
            let e = dot - if a == b { 1.0 } else { 0.0 };
            total += e * e;
        }
    }
    Ok(total)
}

/// Column-wise Pearson correlation across the batch axis of two `B x K`
/// matrices; returns the `K` correlations. `v` carries no gradient.
pub fn pcc_columns(tape: &mut Tape, u: Var, v: &Tensor) -> Result<Var> {
    let shape = tape.shape(u).to_vec();
    if shape.len() != 2 || shape.as_slice() != v.shape() {
        return Err(Error::shape("pcc", format!("{shape:?} vs {:?}", v.shape())));
    }
    if shape[0] < 2 {
        return Err(Error::shape("pcc", "correlation needs at least two batch rows"));
    }
    let mu = tape.mean(u, &[0], true)?;
    let uc = tape.sub(u, mu)?;
    let (b, k) = (shape[0], shape[1]);
    let mut vc = v.clone();
    let mut v_norm = vec![0.0; k];
    for j in 0..k {
        let mean = (0..b).map(|i| v.get(&[i, j])).sum::<f64>() / b as f64;
        for i in 0..b {
            vc.set(&[i, j], v.get(&[i, j]) - mean);
        }
        let ss: f64 = (0..b).map(|i| vc.get(&[i, j]).powi(2)).sum();
        v_norm[j] = ss.max(SS_FLOOR).sqrt();
    }
    let vc = tape.constant(vc);
    let prod = tape.mul(uc, vc)?;
    let num = tape.sum(prod, &[0], false)?;
    let usq = tape.square(uc)?;
    let uss = tape.sum(usq, &[0], false)?;
    let uss = tape.unary(UnaryOp::ClampMin(SS_FLOOR), uss)?;
    let unorm = tape.sqrt(uss)?;
    let vnorm = tape.constant(Tensor::vector(v_norm));
    let den = tape.mul(unorm, vnorm)?;
    tape.div(num, den)
}

/// Pearson correlation of two plain vectors with the same guard as
/// [`pcc_columns`].
pub fn pcc(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::shape("pcc", format!("lengths {} and {}", u.len(), v.len())));
    }
    if u.len() < 2 {
        return Err(Error::shape("pcc", "correlation needs at least two samples"));
    }
    let n = u.len() as f64;
    let mu = u.iter().sum::<f64>() / n;
    let mv = v.iter().sum::<f64>() / n;
    let (mut num, mut su, mut sv) = (0.0, 0.0, 0.0);
    for (&a, &b) in u.iter().zip(v) {
        num += (a - mu) * (b - mv);
        su += (a - mu) * (a - mu);
        sv += (b - mv) * (b - mv);
    }
    Ok(num / (su.max(SS_FLOOR).sqrt() * sv.max(SS_FLOOR).sqrt()))
}

/// `mse + lambda1 * orth - lambda2 * sum_k pcc_k`.
///
/// `y_norm` are the targets scaled by each window's own statistics, the
/// space the encoder output lives in. The correlation term is dropped for
/// batches of one row.
pub fn total_loss(
    tape: &mut Tape,
    y_hat: Var,
    y: &Tensor,
    y_norm: &Tensor,
    z_final: Var,
    w_rlc: Var,
    weights: RlcWeights,
) -> Result<LossTerms> {
    if tape.shape(y_hat) != y.shape() {
        return Err(Error::shape(
            "total_loss",
            format!("prediction {:?} vs target {:?}", tape.shape(y_hat), y.shape()),
        ));
    }
    let target = tape.constant(y.clone());
    let diff = tape.sub(y_hat, target)?;
    let sq = tape.square(diff)?;
    let mse = tape.mean_all(sq)?;
    let mut bundle = LossBundle {
        l_mse: tape.value(mse).item()?,
        lambda1: weights.lambda1,
        lambda2: weights.lambda2,
        ..LossBundle::default()
    };
    if !weights.enabled {
        bundle.total = bundle.l_mse;
        return Ok(LossTerms {
            total: mse,
            z_rlc: None,
            bundle,
        });
    }
    let channels = y.shape()[2];
    weights.validate(channels, tape.shape(w_rlc)[1])?;

    let mut total = mse;
    let orth = orth_loss(tape, w_rlc)?;
    bundle.l_orth = tape.value(orth).item()?;
    if weights.lambda1 > 0.0 {
        let t = tape.scale(orth, weights.lambda1)?;
        total = tape.add(total, t)?;
    }

    let f_stat = stat_readout(tape, z_final)?;
    let z_rlc = project_latent(tape, f_stat, w_rlc)?;
    let batch = y.shape()[0];
    if batch >= 2 && tape.shape(z_rlc)[1] == 2 * channels {
        let pool = target_pool(y_norm)?;
        let r = pcc_columns(tape, z_rlc, &pool)?;
        let s = tape.sum_all(r)?;
        bundle.pcc_sum = tape.value(s).item()?;
        if weights.lambda2 > 0.0 {
            let t = tape.scale(s, -weights.lambda2)?;
            total = tape.add(total, t)?;
        }
    }
    bundle.total = tape.value(total).item()?;
    Ok(LossTerms {
        total,
        z_rlc: Some(z_rlc),
        bundle,
    })
}

/// Largest singular value by power iteration on `W^T W`, stopping once the
/// estimate moves by less than `1e-10` relative or after
/// [`SPECTRAL_MAX_ITERS`] iterations.
pub fn spectral_norm(w: &Tensor) -> Result<f64> {
    let &[r, k] = w.shape() else {
        return Err(Error::shape("spectral_norm", format!("expected a matrix, got {:?}", w.shape())));
    };
    if r == 0 || k == 0 {
        return Ok(0.0);
    }
    let d = w.data();
    // A mildly uneven start avoids being orthogonal to the top vector for
    // structured inputs.
    let mut x: Vec<f64> = (0..k).map(|i| 1.0 + 0.1 * i as f64).collect();
    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let n0 = norm(&x);
    x.iter_mut().for_each(|v| *v /= n0);
    let mut sigma = 0.0;
    for _ in 0..SPECTRAL_MAX_ITERS {
        let y: Vec<f64> = (0..r).map(|i| (0..k).map(|j| d[i * k + j] * x[j]).sum()).collect();
        let z: Vec<f64> = (0..k).map(|j| (0..r).map(|i| d[i * k + j] * y[i]).sum()).collect();
        let next = norm(&y);
        let nz = norm(&z);
        if nz == 0.0 {
            return Ok(next);
        }
        x = z.iter().map(|v| v / nz).collect();
        let done = (next - sigma).abs() <= 1e-10 * next.max(f64::MIN_POSITIVE);
        sigma = next;
        if done {
            break;
        }
    }
    // Rayleigh estimate from the final iterate.
    let y: Vec<f64> = (0..r).map(|i| (0..k).map(|j| d[i * k + j] * x[j]).sum()).collect();
    Ok(norm(&y).max(sigma))
}
