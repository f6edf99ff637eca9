//! Calendar embedding, multiplicative periodic gating and patch embedding.

use super::config::PatchPad;
use crate::autodiff::{Padding, Tape, UnaryOp, Var, Window};
use crate::error::{Error, Result};

/// Looks up each calendar feature in its own table, concatenates the rows
/// in feature order and fuses them to width D. `marks` is row-major
/// `B x L x N_freq`; the result is `B x L x D`.
pub fn embed_time(tape: &mut Tape, tables: &[Var], fuse: Var, marks: &[usize], b: usize, l: usize) -> Result<Var> {
    let f = tables.len();
    if marks.len() != b * l * f {
        return Err(Error::shape(
            "embed_time",
            format!("{} codes for {b} x {l} steps of {f} features", marks.len()),
        ));
    }
    let mut parts = Vec::with_capacity(f);
    for (k, &table) in tables.iter().enumerate() {
        let codes: Vec<usize> = marks.iter().skip(k).step_by(f).copied().collect();
        parts.push(tape.embedding(table, &codes, &[b, l], &feature_name(k))?);
    }
    let cat = if parts.len() == 1 { parts[0] } else { tape.concat(&parts, 2)? };
    tape.matmul(cat, fuse)
}

fn feature_name(k: usize) -> String {
    ["month", "day", "weekday", "hour", "minute"]
        .get(k)
        .map_or_else(|| format!("calendar feature {k}"), |s| s.to_string())
}

/// `sigmoid(E_time W_gate + b_gate)`, `B x L x 1`.
pub fn compute_gate(tape: &mut Tape, e_time: Var, w_gate: Var, b_gate: Var) -> Result<Var> {
    let pre = tape.matmul(e_time, w_gate)?;
    let pre = tape.add(pre, b_gate)?;
    tape.sigmoid(pre)
}

/// `X_norm * (1 + gamma * G)` with the gate shared across channels.
pub fn modulate(tape: &mut Tape, x_norm: Var, gate: Var, gamma: f64) -> Result<Var> {
    let g = tape.scale(gate, gamma)?;
    let factor = tape.unary(UnaryOp::AddScalar(1.0), g)?;
    tape.mul(x_norm, factor)
}

/// Splits `B x L x C` into patches of `p` steps at stride `s` and projects
/// each with `w_patch` (`P x D`, no bias), giving `B x N x C x D`.
pub fn patchify(tape: &mut Tape, x: Var, w_patch: Var, p: usize, s: usize, pad: PatchPad) -> Result<Var> {
    let window = match pad {
        PatchPad::Off => Window::valid(p, s),
        PatchPad::Replicate => Window::cover(p, s, Padding::EdgeReplicate),
        PatchPad::Zero => Window::cover(p, s, Padding::Zero),
    };
    let patches = tape.unfold(x, 1, window)?;
    let patches = tape.permute(patches, &[0, 1, 3, 2])?;
    tape.matmul(patches, w_patch)
}
