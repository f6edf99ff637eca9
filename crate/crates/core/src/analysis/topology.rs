//! Matching learned channel attention against a known sensor graph.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::WindowSet;
use crate::error::{Error, Result};
use crate::model::Model;

pub type Edge = (usize, usize);

/// Reads a square matrix (optional header row) or an edge list with a
/// `from,to[,cost]` header. Edge lists need `channels` to size the result.
pub fn read_matrix_csv(path: impl AsRef<Path>, channels: Option<usize>) -> Result<Vec<Vec<f64>>> {
    let path = path.as_ref();
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_path(path)?;
    let mut rows: Vec<Vec<String>> = Vec::new();
    for rec in rdr.records() {
        rows.push(rec?.iter().map(|s| s.trim().to_string()).collect());
    }
    let bad = |line: usize, detail: String| Error::Load {
        path: path.to_path_buf(),
        line,
        column: 0,
        detail,
    };
    if rows.is_empty() {
        return Err(bad(1, "empty adjacency file".into()));
    }
    let header = rows[0].iter().any(|s| s.parse::<f64>().is_err());
    let is_edge_list = header && rows[0].first().is_some_and(|s| s.eq_ignore_ascii_case("from"));
    let body = &rows[usize::from(header)..];
    let num = |line: usize, s: &str| s.parse::<f64>().map_err(|_| bad(line, format!("not a number: {s:?}")));

    if is_edge_list {
        let Some(c) = channels else {
            return Err(bad(1, "edge list needs the channel count".into()));
        };
        let mut m = vec![vec![0.0; c]; c];
        for (i, r) in body.iter().enumerate() {
            let line = i + 2;
            if r.len() < 2 {
                return Err(bad(line, "expected from,to[,cost]".into()));
            }
            let (a, b) = (num(line, &r[0])? as usize, num(line, &r[1])? as usize);
            if a >= c || b >= c {
                return Err(bad(line, format!("node index out of range for {c} channels")));
            }
            // A listed pair is connected whatever its cost.
            m[a][b] = r.get(2).map(|s| num(line, s)).transpose()?.map_or(1.0, |v| if v > 0.0 { v } else { 1.0 });
        }
        return Ok(m);
    }
    let n = body.len();
    let mut m = Vec::with_capacity(n);
    for (i, r) in body.iter().enumerate() {
        let line = i + 1 + usize::from(header);
        if r.len() != n {
            return Err(bad(line, format!("row has {} entries, expected {n}", r.len())));
        }
        m.push(r.iter().map(|s| if s.is_empty() { Ok(0.0) } else { num(line, s) }).collect::<Result<Vec<_>>>()?);
    }
    if let Some(c) = channels {
        if c != n {
            return Err(bad(1, format!("matrix is {n}x{n} but the model has {c} channels")));
        }
    }
    Ok(m)
}

fn symmetric_binary(m: &[Vec<f64>]) -> Result<Vec<Vec<u8>>> {
    let n = m.len();
    if m.iter().any(|r| r.len() != n) {
        return Err(Error::shape("build_ground_truth", "matrix is not square"));
    }
    if m.iter().flatten().any(|v| !(*v >= 0.0)) {
        return Err(Error::Data("adjacency entries must be nonnegative".into()));
    }
    Ok((0..n)
        .map(|i| (0..n).map(|j| u8::from(i != j && (m[i][j] > 0.0 || m[j][i] > 0.0))).collect())
        .collect())
}

/// Symmetrized, binarized adjacency with second-order neighbours added and
/// an empty diagonal.
pub fn build_ground_truth(m: &[Vec<f64>]) -> Result<Vec<Vec<u8>>> {
    let a = symmetric_binary(m)?;
    let n = a.len();
    let mut out = a.clone();
    for i in 0..n {
        for j in 0..n {
            if i != j && out[i][j] == 0 && (0..n).any(|k| a[i][k] == 1 && a[k][j] == 1) {
                out[i][j] = 1;
            }
        }
    }
    Ok(out)
}

pub fn edges_of(g: &[Vec<u8>]) -> BTreeSet<Edge> {
    let mut e = BTreeSet::new();
    for (i, row) in g.iter().enumerate() {
        for (j, &v) in row.iter().enumerate().skip(i + 1) {
            if v != 0 || g[j][i] != 0 {
                e.insert((i, j));
            }
        }
    }
    e
}

/// `A + I`.
pub fn overlay_identity(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    a.iter()
        .enumerate()
        .map(|(i, r)| r.iter().enumerate().map(|(j, v)| v + f64::from(u8::from(i == j))).collect())
        .collect()
}

/// The `k` undirected off-diagonal pairs with the largest symmetrized
/// weight `(a_ij + a_ji) / 2`, ranked over the whole matrix. Ties go to the
/// lower index pair.
pub fn top_k_edges(a: &[Vec<f64>], k: usize) -> Vec<Edge> {
    let n = a.len();
    let mut pairs: Vec<(f64, Edge)> = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            pairs.push(((a[i][j] + a[j][i]) / 2.0, (i, j)));
        }
    }
    pairs.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
    pairs.into_iter().take(k).map(|(_, e)| e).collect()
}

/// `|S n E| / |S u E|`, with two empty sets scoring 1.
pub fn iou(s: &BTreeSet<Edge>, e: &BTreeSet<Edge>) -> f64 {
    let union = s.union(e).count();
    if union == 0 {
        return 1.0;
    }
    s.intersection(e).count() as f64 / union as f64
}

fn ln_choose(n: usize, k: usize) -> f64 {
    if k > n {
        return f64::NEG_INFINITY;
    }
    let k = k.min(n - k);
    (0..k).map(|i| ((n - i) as f64).ln() - ((i + 1) as f64).ln()).sum()
}

/// Expected IoU of `k` pairs drawn uniformly without replacement from `m`
/// candidates against a fixed set of `g` true pairs. The overlap is
/// hypergeometric, so the expectation is a finite sum.
pub fn random_iou(m: usize, g: usize, k: usize) -> f64 {
    let k = k.min(m);
    let g = g.min(m);
    if k + g == 0 {
        return 1.0;
    }
    let denom = ln_choose(m, k);
    let lo = (k + g).saturating_sub(m);
    (lo..=k.min(g))
        .map(|x| {
            let p = (ln_choose(g, x) + ln_choose(m - g, k - x) - denom).exp();
            p * x as f64 / (k + g - x) as f64
        })
        .sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopologyReport {
    pub k: usize,
    pub truth: Vec<Vec<u8>>,
    pub learned: Vec<Vec<f64>>,
    pub overlay: Vec<Vec<f64>>,
    pub predicted_edges: Vec<Edge>,
    pub truth_edges: Vec<Edge>,
    pub hits: usize,
    pub iou: f64,
    pub random_baseline: f64,
}

pub fn topology_match(learned: &[Vec<f64>], truth: &[Vec<u8>], k: usize) -> Result<TopologyReport> {
    let n = learned.len();
    if learned.iter().any(|r| r.len() != n) || truth.len() != n || truth.iter().any(|r| r.len() != n) {
        return Err(Error::shape(
            "topology_match",
            format!("learned attention and ground truth must both be {n}x{n}"),
        ));
    }
    let overlay = overlay_identity(learned);
    let predicted = top_k_edges(&overlay, k);
    let s: BTreeSet<Edge> = predicted.iter().copied().collect();
    let e = edges_of(truth);
    let m = n * n.saturating_sub(1) / 2;
    Ok(TopologyReport {
        k,
        truth: truth.to_vec(),
        learned: learned.to_vec(),
        overlay,
        hits: s.intersection(&e).count(),
        iou: iou(&s, &e),
        random_baseline: random_iou(m, e.len(), s.len()),
        predicted_edges: predicted,
        truth_edges: e.into_iter().collect(),
    })
}

/// Channel attention averaged over the windows at `positions`.
pub fn mean_channel_attention(model: &Model, set: &WindowSet, positions: &[usize], batch_size: usize) -> Result<Vec<Vec<f64>>> {
    if model.config.no_csca {
        return Err(Error::config("model has no cross-channel attention stage"));
    }
    let c = model.config.channels;
    let mut acc = vec![vec![0.0; c]; c];
    let mut count = 0usize;
    for chunk in positions.chunks(batch_size.max(1)) {
        let batch = set.batch(chunk)?;
        let mut tape = Tape::new();
        let p = model.bind(&mut tape);
        let f = model.forward(&mut tape, &p, &batch)?;
        let Some(o) = f.csca else {
            return Err(Error::config("stage order skips cross-channel attention"));
        };
        let a = tape.value(o.attn);
        let b = a.shape()[0];
        for bi in 0..b {
            for i in 0..c {
                for j in 0..c {
                    acc[i][j] += a.data()[(bi * c + i) * c + j];
                }
            }
        }
        count += b;
    }
    if count == 0 {
        return Err(Error::Data("no windows to average attention over".into()));
    }
    acc.iter_mut().flatten().for_each(|v| *v /= count as f64);
    Ok(acc)
}

pub fn write_topology(path: impl AsRef<Path>, report: &TopologyReport) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(report)?)?;
    Ok(())
}
