use std::path::Path;

use chrono::NaiveDateTime;

use super::{Freq, SeriesDataset};
use crate::error::{Error, Result};

const TIMESTAMP_FORMATS: &[&str] = &[
    "%Y-%m-%d %H:%M:%S",
    "%Y-%m-%d %H:%M",
    "%Y-%m-%dT%H:%M:%S",
    "%Y-%m-%dT%H:%M",
    "%Y/%m/%d %H:%M:%S",
    "%Y/%m/%d %H:%M",
];

#[derive(Clone, Debug)]
pub struct LoadOptions {
    pub date_column: String,
    /// Accept gaps whose length is a whole multiple of the smallest spacing.
    pub allow_gaps: bool,
    /// Expected interval; inferred from the timestamps when `None`.
    pub freq: Option<Freq>,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            date_column: "date".into(),
            allow_gaps: false,
            freq: None,
        }
    }
}

fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    let s = s.trim();
    for fmt in TIMESTAMP_FORMATS {
        if let Ok(t) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(t);
        }
    }
    chrono::NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .ok()
        .and_then(|d| d.and_hms_opt(0, 0, 0))
}

/// Reads a comma-separated file whose date column holds ISO-like
/// timestamps and whose other columns are numeric channels.
pub fn load_csv(path: impl AsRef<Path>, opts: &LoadOptions) -> Result<SeriesDataset> {
    let path = path.as_ref();
    let load_err = |line: usize, column: usize, detail: String| Error::Load {
        path: path.to_path_buf(),
        line,
        column,
        detail,
    };

    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers = reader.headers()?.clone();
    let date_idx = headers
        .iter()
        .position(|h| h.trim() == opts.date_column)
        .ok_or_else(|| load_err(1, 1, format!("no '{}' column in header", opts.date_column)))?;
    let channel_names: Vec<String> = headers
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != date_idx)
        .map(|(_, h)| h.trim().to_string())
        .collect();
    if channel_names.is_empty() {
        return Err(load_err(1, 1, "no numeric columns".into()));
    }

    let mut timestamps = Vec::new();
    let mut values = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != headers.len() {
            return Err(load_err(
                line,
                record.len() + 1,
                format!("expected {} fields, found {}", headers.len(), record.len()),
            ));
        }
        for (i, cell) in record.iter().enumerate() {
            if i == date_idx {
                let t = parse_timestamp(cell)
                    .ok_or_else(|| load_err(line, i + 1, format!("unparseable timestamp '{cell}'")))?;
                timestamps.push(t);
                continue;
            }
            let cell = cell.trim();
            if cell.is_empty() {
                return Err(load_err(line, i + 1, "missing value".into()));
            }
            match cell.parse::<f64>() {
                Ok(v) if v.is_finite() => values.push(v),
                Ok(_) => return Err(load_err(line, i + 1, format!("missing value '{cell}'"))),
                Err(_) => return Err(load_err(line, i + 1, format!("not a number: '{cell}'"))),
            }
        }
    }
    if timestamps.is_empty() {
        return Err(Error::Data(format!("{}: no data rows", path.display())));
    }

    let freq = check_spacing(&timestamps, opts).map_err(|(row, detail)| load_err(row + 2, date_idx + 1, detail))?;
    SeriesDataset::new(timestamps, values, channel_names, freq)
}

/// Validates monotone, uniform spacing and returns the interval. Errors
/// carry the zero-based data row at fault.
fn check_spacing(ts: &[NaiveDateTime], opts: &LoadOptions) -> std::result::Result<Freq, (usize, String)> {
    let mut diffs = Vec::with_capacity(ts.len().saturating_sub(1));
    for (i, w) in ts.windows(2).enumerate() {
        let secs = (w[1] - w[0]).num_seconds();
        if secs <= 0 {
            return Err((i + 1, "timestamps must be strictly increasing".into()));
        }
        if secs % 60 != 0 {
            return Err((i + 1, "spacing is not a whole number of minutes".into()));
        }
        diffs.push(secs / 60);
    }
    let step = match (opts.freq, diffs.iter().min()) {
        (Some(f), _) => f.minutes as i64,
        (None, Some(&m)) => m,
        (None, None) => return Err((0, "cannot infer spacing from a single row".into())),
    };
    for (i, &d) in diffs.iter().enumerate() {
        let ok = if opts.allow_gaps { d % step == 0 } else { d == step };
        if !ok {
            return Err((i + 1, format!("irregular spacing: {d} min where {step} min expected")));
        }
    }
    let minutes = u32::try_from(step).map_err(|_| (0, "spacing too large".to_string()))?;
    Freq::new(minutes).map_err(|e| (0, e.to_string()))
}

/// Writes `ds` in the same layout [`load_csv`] reads.
pub fn write_csv(ds: &SeriesDataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["date".to_string()];
    header.extend(ds.channel_names.iter().cloned());
    w.write_record(&header)?;
    let c = ds.channels();
    for (t, ts) in ds.timestamps.iter().enumerate() {
        let mut row = vec![ts.format("%Y-%m-%d %H:%M:%S").to_string()];
        row.extend(ds.values[t * c..(t + 1) * c].iter().map(|v| format!("{v:?}")));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
