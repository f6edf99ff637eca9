//! Flatten, channel-shared linear head and inverse normalization.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

/// `B x N x C x D` to `B x C x (N*D)`, rows in temporal order.
pub fn flatten(tape: &mut Tape, z_final: Var) -> Result<Var> {
    let &[b, n, c, d] = tape.shape(z_final) else {
        return Err(Error::shape("flatten", format!("expected B x N x C x D, got {:?}", tape.shape(z_final))));
    };
    let t = tape.permute(z_final, &[0, 2, 1, 3])?;
    tape.reshape(t, &[b, c, n * d])
}

/// `Z~ W_head (+ bias)` transposed to `B x O x C`. The same weights serve
/// every channel.
pub fn project(tape: &mut Tape, z_tilde: Var, w_head: Var, bias: Option<Var>) -> Result<Var> {
    let width = *tape.shape(z_tilde).last().unwrap_or(&0);
    if tape.shape(w_head).first() != Some(&width) {
        return Err(Error::shape(
            "project",
            format!("flattened width {width} does not match head {:?}", tape.shape(w_head)),
        ));
    }
    let mut h = tape.matmul(z_tilde, w_head)?;
    if let Some(b) = bias {
        h = tape.add(h, b)?;
    }
    tape.permute(h, &[0, 2, 1])
}

/// `h * sigma + mu`, statistics `B x 1 x C` repeated along the horizon.
pub fn denormalize(tape: &mut Tape, h: Var, mu: Var, sigma: Var) -> Result<Var> {
    let scaled = tape.mul(h, sigma)?;
    tape.add(scaled, mu)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn flatten_shape_order_and_inverse() {
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let z = Tensor::new([1, 2, 3, 4], data).unwrap();
        let mut tape = Tape::new();
        let v = tape.constant(z.clone());
        let f = flatten(&mut tape, v).unwrap();
        assert_eq!(tape.shape(f), &[1, 3, 8]);
        let out = tape.value(f);
        for c in 0..3 {
            for n in 0..2 {
                for d in 0..4 {
                    assert_eq!(out.get(&[0, c, n * 4 + d]), z.get(&[0, n, c, d]));
                }
            }
        }
        let back = tape.reshape(f, &[1, 3, 2, 4]).unwrap();
        let back = tape.permute(back, &[0, 2, 1, 3]).unwrap();
        assert_eq!(tape.value(back), &z);
    }

    #[test]
    fn head_examples() {
        let mut tape = Tape::new();
        let zero = tape.constant(Tensor::zeros([2, 3, 6]));
        let w = tape.constant(Tensor::full([6, 4], 0.3));
        let h = project(&mut tape, zero, w, None).unwrap();
        assert_eq!(tape.shape(h), &[2, 4, 3]);
        assert!(tape.value(h).data().iter().all(|&v| v == 0.0));

        let z = tape.constant(Tensor::new([1, 2, 3], vec![1.0, 2.0, 3.0, 1.0, 2.0, 3.0]).unwrap());
        let ones = tape.constant(Tensor::full([3, 1], 1.0));
        let h = project(&mut tape, z, ones, None).unwrap();
        assert_eq!(tape.value(h).data(), &[6.0, 6.0]);

        let bad = tape.constant(Tensor::zeros([4, 1]));
        assert!(matches!(project(&mut tape, z, bad, None), Err(Error::Shape { .. })));
    }

    #[test]
    fn bias_shifts_every_channel() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros([1, 2, 3]));
        let w = tape.constant(Tensor::zeros([3, 2]));
        let b = tape.constant(Tensor::vector(vec![1.0, -1.0]));
        let h = project(&mut tape, z, w, Some(b)).unwrap();
        assert_eq!(tape.value(h).data(), &[1.0, 1.0, -1.0, -1.0]);
    }
}
