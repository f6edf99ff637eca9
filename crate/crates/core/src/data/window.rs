use std::ops::Range;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{extract_time_features, instance_normalize, SeriesDataset};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Chronological train/validation/test partition of the rows.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SplitSpec {
    Fractions { train: f64, val: f64, test: f64 },
    /// Train is `[0, train_end)`, validation `[train_end, val_end)`, test the rest.
    Bounds { train_end: usize, val_end: usize },
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec::Fractions {
            train: 0.6,
            val: 0.2,
            test: 0.2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Segment {
    Train,
    Val,
    Test,
}

impl SplitSpec {
    /// Row ranges of the three segments, contiguous and in time order.
    pub fn segments(&self, total: usize) -> Result<[Range<usize>; 3]> {
        let (a, b, end) = match *self {
            SplitSpec::Fractions { train, val, test } => {
                if [train, val, test].iter().any(|f| !(0.0..=1.0).contains(f)) || train + val + test > 1.0 + 1e-9 {
                    return Err(Error::config(format!(
                        "split fractions {train}/{val}/{test} must be in [0,1] and sum to at most 1"
                    )));
                }
                let a = (total as f64 * train).floor() as usize;
                let b = a + (total as f64 * val).floor() as usize;
                let end = if (train + val + test - 1.0).abs() < 1e-9 {
                    total
                } else {
                    (b + (total as f64 * test).floor() as usize).min(total)
                };
                (a, b, end)
            }
            SplitSpec::Bounds { train_end, val_end } => {
                if train_end > val_end || val_end > total {
                    return Err(Error::config(format!(
                        "split bounds {train_end}/{val_end} do not fit {total} rows"
                    )));
                }
                (train_end, val_end, total)
            }
        };
        Ok([0..a, a..b, b..end])
    }

    pub fn segment(&self, total: usize, which: Segment) -> Result<Range<usize>> {
        let [tr, va, te] = self.segments(total)?;
        Ok(match which {
            Segment::Train => tr,
            Segment::Val => va,
            Segment::Test => te,
        })
    }
}

/// Start rows of every `lookback + horizon` window inside `rows`, stepping
/// by `stride`. Windows never leave the range.
pub fn make_windows(rows: Range<usize>, lookback: usize, horizon: usize, stride: usize) -> Result<Vec<usize>> {
    if lookback == 0 || horizon == 0 || stride == 0 {
        return Err(Error::config("lookback, horizon and stride must be >= 1"));
    }
    let need = lookback + horizon;
    if rows.len() < need {
        return Err(Error::Data(format!(
            "segment of {} rows is shorter than lookback + horizon = {need}",
            rows.len()
        )));
    }
    Ok((rows.start..=rows.end - need).step_by(stride).collect())
}

/// One batch of windows. Inputs are stored both raw and instance-normalized.
#[derive(Clone, Debug)]
pub struct WindowBatch {
    /// Raw inputs, `B x L x C`.
    pub x: Tensor,
    /// Normalized inputs, `B x L x C`.
    pub x_norm: Tensor,
    /// `B x 1 x C`.
    pub mu: Tensor,
    /// `B x 1 x C`.
    pub sigma: Tensor,
    /// Calendar codes, row-major `B x L x N_freq`.
    pub marks: Vec<usize>,
    pub n_freq: usize,
    /// Targets, `B x O x C`.
    pub y: Tensor,
}

impl WindowBatch {
    pub fn new(x: Tensor, marks: Vec<usize>, n_freq: usize, y: Tensor) -> Result<Self> {
        let (xs, ys) = (x.shape(), y.shape());
        if xs.len() != 3 || ys.len() != 3 || xs[0] != ys[0] || xs[2] != ys[2] {
            return Err(Error::shape("window_batch", format!("inputs {xs:?} and targets {ys:?} disagree")));
        }
        if marks.len() != xs[0] * xs[1] * n_freq {
            return Err(Error::shape(
                "window_batch",
                format!("{} calendar codes for {} steps of {n_freq} features", marks.len(), xs[0] * xs[1]),
            ));
        }
        let n = instance_normalize(&x)?;
        Ok(WindowBatch {
            x,
            x_norm: n.x,
            mu: n.mu,
            sigma: n.sigma,
            marks,
            n_freq,
            y,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn lookback(&self) -> usize {
        self.x.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.x.shape()[2]
    }

    pub fn horizon(&self) -> usize {
        self.y.shape()[1]
    }
}

/// The windows of one segment of a dataset.
#[derive(Clone, Debug)]
pub struct WindowSet<'a> {
    ds: &'a SeriesDataset,
    marks: Vec<usize>,
    n_freq: usize,
    pub starts: Vec<usize>,
    pub lookback: usize,
    pub horizon: usize,
}

impl<'a> WindowSet<'a> {
    pub fn new(ds: &'a SeriesDataset, rows: Range<usize>, lookback: usize, horizon: usize, stride: usize) -> Result<Self> {
        let starts = make_windows(rows, lookback, horizon, stride)?;
        let n_freq = ds.freq.features().len();
        Ok(WindowSet {
            ds,
            marks: extract_time_features(&ds.timestamps, ds.freq),
            n_freq,
            starts,
            lookback,
            horizon,
        })
    }

    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    pub fn dataset(&self) -> &SeriesDataset {
        self.ds
    }

    /// Assembles the windows at positions `which` of [`starts`](Self::starts).
    pub fn batch(&self, which: &[usize]) -> Result<WindowBatch> {
        let c = self.ds.channels();
        let (l, o, f) = (self.lookback, self.horizon, self.n_freq);
        let b = which.len();
        let mut x = Vec::with_capacity(b * l * c);
        let mut y = Vec::with_capacity(b * o * c);
        let mut marks = Vec::with_capacity(b * l * f);
        for &w in which {
            let s = *self
                .starts
                .get(w)
                .ok_or_else(|| Error::Data(format!("window {w} out of range ({} windows)", self.len())))?;
            x.extend_from_slice(&self.ds.values[s * c..(s + l) * c]);
            y.extend_from_slice(&self.ds.values[(s + l) * c..(s + l + o) * c]);
            marks.extend_from_slice(&self.marks[s * f..(s + l) * f]);
        }
        WindowBatch::new(Tensor::new([b, l, c], x)?, marks, f, Tensor::new([b, o, c], y)?)
    }

    /// Window positions grouped into batches; shuffled deterministically
    /// when a seed is given. The last batch may be short.
    pub fn batch_indices(&self, batch_size: usize, shuffle: Option<u64>) -> Vec<Vec<usize>> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        if let Some(seed) = shuffle {
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        }
        idx.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
    }

    /// Evenly spaced subset of at most `n` window positions.
    pub fn spread(&self, n: usize) -> Vec<usize> {
        let len = self.len();
        if n >= len {
            return (0..len).collect();
        }
        (0..n).map(|i| i * len / n).collect()
    }
}
