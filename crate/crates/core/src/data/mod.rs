//! Loading, calendar features, windowing and normalization of multivariate
//! series.

mod calendar;
mod load;
mod norm;
mod window;

pub use calendar::{extract_time_features, CalendarFeature, Freq};
pub use load::{load_csv, write_csv, LoadOptions};
pub use norm::{denormalize, instance_normalize, Normalized, Scaler, NORM_EPS};
pub use window::{make_windows, Segment, SplitSpec, WindowBatch, WindowSet};

use chrono::NaiveDateTime;

use crate::error::{Error, Result};

/// A uniformly sampled multivariate series, `T` rows by `C` channels.
#[derive(Clone, Debug)]
pub struct SeriesDataset {
    pub timestamps: Vec<NaiveDateTime>,
    /// Row-major `T x C`.
    pub values: Vec<f64>,
    pub channel_names: Vec<String>,
    pub freq: Freq,
}

impl SeriesDataset {
    pub fn new(
        timestamps: Vec<NaiveDateTime>,
        values: Vec<f64>,
        channel_names: Vec<String>,
        freq: Freq,
    ) -> Result<Self> {
        let c = channel_names.len();
        if c == 0 {
            return Err(Error::Data("dataset has no channels".into()));
        }
        if values.len() != timestamps.len() * c {
            return Err(Error::Data(format!(
                "{} values do not fill {} rows of {c} channels",
                values.len(),
                timestamps.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite value at row {}, channel {}", i / c, i % c)));
        }
        Ok(SeriesDataset {
            timestamps,
            values,
            channel_names,
            freq,
        })
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.channel_names.len()
    }

    pub fn value(&self, t: usize, c: usize) -> f64 {
        self.values[t * self.channels() + c]
    }

    /// Column `c` as a contiguous vector.
    pub fn channel(&self, c: usize) -> Vec<f64> {
        (0..self.len()).map(|t| self.value(t, c)).collect()
    }

    /// Rows `range` as a new dataset.
    pub fn slice(&self, range: std::ops::Range<usize>) -> SeriesDataset {
        let c = self.channels();
        SeriesDataset {
            timestamps: self.timestamps[range.clone()].to_vec(),
            values: self.values[range.start * c..range.end * c].to_vec(),
            channel_names: self.channel_names.clone(),
            freq: self.freq,
        }
    }
}
