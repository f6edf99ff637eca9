//! Detrended attention, patch sampling and cross-channel attention over
//! `B x N x C x D` latents.

use crate::autodiff::{Padding, Tape, Var, Window};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Moving-average trend along the patch axis with edge replication, and
/// the residual `z - trend`.
pub fn smooth_and_detrend(tape: &mut Tape, z: Var, w: usize) -> Result<(Var, Var)> {
    if w % 2 == 0 {
        return Err(Error::config(format!("smoothing kernel {w} must be odd")));
    }
    let kernel = tape.constant(Tensor::vector(vec![1.0 / w as f64; w]));
    let trend = tape.conv1d(z, kernel, 1, Window::same(w, Padding::EdgeReplicate))?;
    let det = tape.sub(z, trend)?;
    Ok((trend, det))
}

#[derive(Clone, Copy, Debug)]
pub struct AttnParams {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub ln_gain: Var,
    pub ln_bias: Var,
}

/// Multi-head attention over the patch axis, independently per channel:
/// queries and keys from `z_det`, values from `z0`, followed by the output
/// projection, the residual with `z0` and layer normalization.
pub fn int_attention(tape: &mut Tape, p: &AttnParams, z0: Var, z_det: Var, heads: usize) -> Result<Var> {
    let &[b, n, c, d] = tape.shape(z0) else {
        return Err(Error::shape("int_attention", format!("expected B x N x C x D, got {:?}", tape.shape(z0))));
    };
    if heads == 0 || d % heads != 0 {
        return Err(Error::config(format!("d_model {d} is not divisible by heads {heads}")));
    }
    let dh = d / heads;
    // (B, N, C, D) -> (B, C, N, D): each (batch, channel) pair attends alone.
    let x0 = tape.permute(z0, &[0, 2, 1, 3])?;
    let xd = tape.permute(z_det, &[0, 2, 1, 3])?;
    let split = |tape: &mut Tape, t: Var| -> Result<Var> {
        let t = tape.reshape(t, &[b, c, n, heads, dh])?;
        tape.permute(t, &[0, 1, 3, 2, 4])
    };
    let q = tape.matmul(xd, p.wq)?;
    let q = tape.scale(q, 1.0 / (dh as f64).sqrt())?;
    let q = split(tape, q)?;
    let k = tape.matmul(xd, p.wk)?;
    let k = split(tape, k)?;
    let v = tape.matmul(x0, p.wv)?;
    let v = split(tape, v)?;
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let weights = tape.softmax(scores, 4)?;
    let h = tape.matmul(weights, v)?;
    let h = tape.permute(h, &[0, 1, 3, 2, 4])?;
    let h = tape.reshape(h, &[b, c, n, d])?;
    let h = tape.matmul(h, p.wo)?;
    let h = tape.permute(h, &[0, 2, 1, 3])?;
    let r = tape.add(z0, h)?;
    tape.layer_norm(r, p.ln_gain, p.ln_bias)
}

/// Stride-2 downsampling along the patch axis: a learned kernel-3
/// convolution (`3D x D`) and a kernel-3 max-pool, concatenated to `2D`
/// and projected back to `D` by `w_agg`. No biases.
pub fn patch_sample(tape: &mut Tape, w_conv: Var, w_agg: Var, z1: Var) -> Result<Var> {
    let &[b, n, c, d] = tape.shape(z1) else {
        return Err(Error::shape("patch_sample", format!("expected B x N x C x D, got {:?}", tape.shape(z1))));
    };
    if n < 2 {
        return Err(Error::config(format!(
            "patch sampling needs a temporal length of at least 2, got {n}; reduce the hierarchy depth"
        )));
    }
    let window = Window::downsample(3, 2, Padding::EdgeReplicate);
    let taps = tape.unfold(z1, 1, window)?;
    let n2 = n / 2;
    let taps = tape.permute(taps, &[0, 1, 3, 2, 4])?;
    let taps = tape.reshape(taps, &[b, n2, c, 3 * d])?;
    let conv = tape.matmul(taps, w_conv)?;
    let pool = tape.maxpool1d(z1, 1, window)?;
    let both = tape.concat(&[conv, pool], 3)?;
    tape.matmul(both, w_agg)
}

#[derive(Clone, Copy, Debug)]
pub struct CscaParams {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct CscaOutputs {
    pub z_final: Var,
    /// `B x C x D`.
    pub context: Var,
    /// `B x C x C`, row-stochastic.
    pub attn: Var,
}

/// Time-pooled single-head attention across channels, added back to every
/// time step.
pub fn csca(tape: &mut Tape, p: &CscaParams, z2: Var) -> Result<CscaOutputs> {
    let &[b, _, c, d] = tape.shape(z2) else {
        return Err(Error::shape("csca", format!("expected B x N x C x D, got {:?}", tape.shape(z2))));
    };
    let hc = tape.mean(z2, &[1], false)?;
    let q = tape.matmul(hc, p.wq)?;
    let q = tape.scale(q, 1.0 / (d as f64).sqrt())?;
    let k = tape.matmul(hc, p.wk)?;
    let v = tape.matmul(hc, p.wv)?;
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let attn = tape.softmax(scores, 2)?;
    let context = tape.matmul(attn, v)?;
    let ctx = tape.reshape(context, &[b, 1, c, d])?;
    let z_final = tape.add(z2, ctx)?;
    Ok(CscaOutputs { z_final, context, attn })
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::grad_check;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn attn_params(tape: &mut Tape, rng: &mut ChaCha8Rng, d: usize) -> AttnParams {
        AttnParams {
            wq: tape.param(random(rng, &[d, d])),
            wk: tape.param(random(rng, &[d, d])),
            wv: tape.param(random(rng, &[d, d])),
            wo: tape.param(random(rng, &[d, d])),
            ln_gain: tape.param(Tensor::full([d], 1.0)),
            ln_bias: tape.param(Tensor::zeros([d])),
        }
    }

    #[test]
    fn detrend_examples() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::new([1, 4, 1, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let (t, r) = smooth_and_detrend(&mut tape, z, 3).unwrap();
        let want_t = [4.0 / 3.0, 2.0, 3.0, 11.0 / 3.0];
        let want_r = [-1.0 / 3.0, 0.0, 0.0, 1.0 / 3.0];
        for i in 0..4 {
            assert!((tape.value(t).data()[i] - want_t[i]).abs() < 1e-12);
            assert!((tape.value(r).data()[i] - want_r[i]).abs() < 1e-12);
        }
        let c = tape.constant(Tensor::full([2, 5, 3, 4], 1.5));
        let (_, r) = smooth_and_detrend(&mut tape, c, 3).unwrap();
        assert!(tape.value(r).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_input_attends_uniformly() {
        // With a constant sequence the detrended part is zero, so every
        // query sees equal scores and the output is the mean value row.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let p = attn_params(&mut tape, &mut rng, 4);
        let row = random(&mut rng, &[4]);
        let data: Vec<f64> = (0..6).flat_map(|_| row.data().to_vec()).collect();
        let z0 = tape.constant(Tensor::new([1, 6, 1, 4], data).unwrap());
        let (_, det) = smooth_and_detrend(&mut tape, z0, 3).unwrap();
        let z1 = int_attention(&mut tape, &p, z0, det, 2).unwrap();
        // All positions equal since each sees the same average of identical values.
        let v = tape.value(z1);
        for t in 1..6 {
            for d in 0..4 {
                assert_eq!(v.get(&[0, t, 0, d]), v.get(&[0, 0, 0, d]));
            }
        }
    }

    #[test]
    fn single_patch_attention_is_projection_plus_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut tape = Tape::new();
        let p = attn_params(&mut tape, &mut rng, 4);
        let z = random(&mut rng, &[2, 1, 3, 4]);
        let z0 = tape.constant(z.clone());
        let det = tape.constant(random(&mut rng, &[2, 1, 3, 4]));
        let z1 = int_attention(&mut tape, &p, z0, det, 2).unwrap();
        // Reference: LayerNorm(z0 + z0 Wv Wo).
        let vw = tape.matmul(z0, p.wv).unwrap();
        let h = tape.matmul(vw, p.wo).unwrap();
        let r = tape.add(z0, h).unwrap();
        let want = tape.layer_norm(r, p.ln_gain, p.ln_bias).unwrap();
        assert!(tape.value(z1).max_abs_diff(tape.value(want)) < 1e-12);
    }

    #[test]
    fn stage_one_keeps_channels_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tape = Tape::new();
        let p = attn_params(&mut tape, &mut rng, 4);
        let z = random(&mut rng, &[2, 5, 3, 4]);
        let perm = [2, 0, 1];
        let zp = z.permute(&[0, 1, 2, 3]).unwrap();
        let mut swapped = zp.clone();
        for b in 0..2 {
            for n in 0..5 {
                for (to, &from) in perm.iter().enumerate() {
                    for d in 0..4 {
                        swapped.set(&[b, n, to, d], z.get(&[b, n, from, d]));
                    }
                }
            }
        }
        let run = |tape: &mut Tape, t: Tensor| {
            let z0 = tape.constant(t);
            let (_, det) = smooth_and_detrend(tape, z0, 3).unwrap();
            let z1 = int_attention(tape, &p, z0, det, 2).unwrap();
            tape.value(z1).clone()
        };
        let a = run(&mut tape, z);
        let b = run(&mut tape, swapped);
        for bi in 0..2 {
            for n in 0..5 {
                for (to, &from) in perm.iter().enumerate() {
                    for d in 0..4 {
                        assert_eq!(b.get(&[bi, n, to, d]), a.get(&[bi, n, from, d]));
                    }
                }
            }
        }
    }

    #[test]
    fn heads_must_divide_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut tape = Tape::new();
        let p = attn_params(&mut tape, &mut rng, 4);
        let z0 = tape.constant(random(&mut rng, &[1, 3, 1, 4]));
        assert!(matches!(int_attention(&mut tape, &p, z0, z0, 3), Err(Error::Config(_))));
    }

    #[test]
    fn patch_sample_shapes_and_zero_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut tape = Tape::new();
        let wc = tape.param(random(&mut rng, &[12, 4]));
        let wa = tape.param(random(&mut rng, &[8, 4]));
        let z = tape.constant(Tensor::zeros([2, 4, 3, 4]));
        let out = patch_sample(&mut tape, wc, wa, z).unwrap();
        assert_eq!(tape.shape(out), &[2, 2, 3, 4]);
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
        let z = tape.constant(Tensor::zeros([1, 5, 1, 4]));
        let out = patch_sample(&mut tape, wc, wa, z).unwrap();
        assert_eq!(tape.shape(out), &[1, 2, 1, 4]);
        let z = tape.constant(Tensor::zeros([1, 1, 1, 4]));
        let err = patch_sample(&mut tape, wc, wa, z).unwrap_err().to_string();
        assert!(err.contains("depth"), "{err}");
    }

    #[test]
    fn pool_branch_picks_window_maxima() {
        // Conv weights zero, aggregation selects the pool half: output is the
        // max-pool branch itself.
        let mut tape = Tape::new();
        let wc = tape.constant(Tensor::zeros([3, 1]));
        let wa = tape.constant(Tensor::matrix(&[&[0.0], &[1.0]]));
        let z = tape.constant(Tensor::new([1, 4, 1, 1], vec![1.0, 3.0, 2.0, 5.0]).unwrap());
        let out = patch_sample(&mut tape, wc, wa, z).unwrap();
        assert_eq!(tape.value(out).data(), &[3.0, 5.0]);
    }

    #[test]
    fn conv_branch_sees_three_taps() {
        // Aggregation selects the conv half and the conv sums its taps.
        let mut tape = Tape::new();
        let wc = tape.constant(Tensor::full([3, 1], 1.0));
        let wa = tape.constant(Tensor::matrix(&[&[1.0], &[0.0]]));
        let z = tape.constant(Tensor::new([1, 4, 1, 1], vec![1.0, 3.0, 2.0, 5.0]).unwrap());
        let out = patch_sample(&mut tape, wc, wa, z).unwrap();
        assert_eq!(tape.value(out).data(), &[6.0, 12.0]);
    }

    #[test]
    fn csca_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut tape = Tape::new();
        let p = CscaParams {
            wq: tape.param(random(&mut rng, &[4, 4])),
            wk: tape.param(random(&mut rng, &[4, 4])),
            wv: tape.param(random(&mut rng, &[4, 4])),
        };
        // Single channel: weight 1 on itself.
        let z = tape.constant(random(&mut rng, &[2, 3, 1, 4]));
        let out = csca(&mut tape, &p, z).unwrap();
        assert!(tape.value(out.attn).data().iter().all(|&a| a == 1.0));

        // Identical channels: uniform rows.
        let slice = random(&mut rng, &[4]);
        let data: Vec<f64> = (0..2 * 3 * 5).flat_map(|_| slice.data().to_vec()).collect();
        let z = tape.constant(Tensor::new([2, 3, 5, 4], data).unwrap());
        let out = csca(&mut tape, &p, z).unwrap();
        assert!(tape.value(out.attn).data().iter().all(|&a| (a - 0.2).abs() < 1e-12));

        // Rows sum to one and the added context is constant over time.
        let zt = random(&mut rng, &[2, 3, 4, 4]);
        let z = tape.constant(zt.clone());
        let out = csca(&mut tape, &p, z).unwrap();
        let a = tape.value(out.attn);
        for row in a.data().chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-10);
        }
        let f = tape.value(out.z_final);
        for b in 0..2 {
            for c in 0..4 {
                for d in 0..4 {
                    let delta0 = f.get(&[b, 0, c, d]) - zt.get(&[b, 0, c, d]);
                    for t in 1..3 {
                        let delta = f.get(&[b, t, c, d]) - zt.get(&[b, t, c, d]);
                        assert!((delta - delta0).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn csca_pools_constant_time_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let slice = random(&mut rng, &[1, 1, 2, 3]);
        let data: Vec<f64> = (0..4).flat_map(|_| slice.data().to_vec()).collect();
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::new([1, 4, 2, 3], data).unwrap());
        let hc = tape.mean(z, &[1], false).unwrap();
        let got = tape.value(hc).data().to_vec();
        for (g, w) in got.iter().zip(slice.data()) {
            assert!((g - w).abs() <= 4.0 * f64::EPSILON * w.abs());
        }
    }

    #[test]
    fn stages_pass_gradient_checks() {
        for seed in 0..3 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let inputs = vec![
                random(&mut rng, &[2, 5, 2, 4]),
                random(&mut rng, &[4, 4]),
                random(&mut rng, &[4, 4]),
                random(&mut rng, &[4, 4]),
                random(&mut rng, &[4, 4]),
                random(&mut rng, &[12, 4]),
                random(&mut rng, &[8, 4]),
            ];
            let err = grad_check(
                |t, v| {
                    let (_, det) = smooth_and_detrend(t, v[0], 3)?;
                    let gain = t.constant(Tensor::full([4], 1.0));
                    let bias = t.constant(Tensor::zeros([4]));
                    let p = AttnParams {
                        wq: v[1],
                        wk: v[2],
                        wv: v[3],
                        wo: v[4],
                        ln_gain: gain,
                        ln_bias: bias,
                    };
                    let z1 = int_attention(t, &p, v[0], det, 2)?;
                    let z2 = patch_sample(t, v[5], v[6], z1)?;
                    let q = CscaParams { wq: v[1], wk: v[2], wv: v[3] };
                    let out = csca(t, &q, z2)?;
                    let sq = t.square(out.z_final)?;
                    t.mean_all(sq)
                },
                &inputs,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }
}
