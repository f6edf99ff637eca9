//! Plain nested-loop reference implementations, independent of the tape,
//! used to cross-check the tensor code paths.

/// Moving average with edge replication and the residual, summed tap by
/// tap in the same order as the tensor convolution.
pub fn oracle_decompose(series: &[f64], w: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(w % 2 == 1, "kernel must be odd");
    let n = series.len();
    let half = (w / 2) as isize;
    let k = 1.0 / w as f64;
    let mut trend = vec![0.0; n];
    for (i, t) in trend.iter_mut().enumerate() {
        let mut acc = 0.0;
        for j in 0..w as isize {
            let p = (i as isize + j - half).clamp(0, n as isize - 1) as usize;
            acc += k * series[p];
        }
        *t = acc;
    }
    let residual = series.iter().zip(&trend).map(|(x, t)| x - t).collect();
    (trend, residual)
}

/// Pearson correlation by the textbook two-pass formula, without guards.
pub fn oracle_pcc(u: &[f64], v: &[f64]) -> f64 {
    let n = u.len() as f64;
    let mu = u.iter().sum::<f64>() / n;
    let mv = v.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut su = 0.0;
    let mut sv = 0.0;
    for i in 0..u.len() {
        cov += (u[i] - mu) * (v[i] - mv);
        su += (u[i] - mu).powi(2);
        sv += (v[i] - mv).powi(2);
    }
    cov / (su.sqrt() * sv.sqrt())
}

pub fn oracle_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

/// `softmax(q k^T / sqrt(d)) v` for one head, rows are positions.
pub fn oracle_attention(q: &[Vec<f64>], k: &[Vec<f64>], v: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let d = q.first().map_or(1, Vec::len) as f64;
    q.iter()
        .map(|qi| {
            let scores: Vec<f64> = k.iter().map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / d.sqrt()).collect();
            let p = oracle_softmax(&scores);
            let width = v[0].len();
            (0..width).map(|c| p.iter().zip(v).map(|(pj, vj)| pj * vj[c]).sum()).collect()
        })
        .collect()
}

/// `x W` for a row-major `rows x cols` weight.
pub fn oracle_matmul(x: &[Vec<f64>], w: &[f64], cols: usize) -> Vec<Vec<f64>> {
    x.iter()
        .map(|r| (0..cols).map(|j| r.iter().enumerate().map(|(i, a)| a * w[i * cols + j]).sum()).collect())
        .collect()
}

/// Layer normalization without affine terms, epsilon `1e-5`.
pub fn oracle_layer_norm(row: &[f64]) -> Vec<f64> {
    let n = row.len() as f64;
    let m = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    row.iter().map(|x| (x - m) / (var + 1e-5).sqrt()).collect()
}
