use std::fmt;
use std::str::FromStr;

use chrono::{Datelike, NaiveDateTime, Timelike};

use crate::error::{Error, Result};

/// Sampling interval in whole minutes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Freq {
    pub minutes: u32,
}

impl Freq {
    pub const HOURLY: Freq = Freq { minutes: 60 };
    pub const DAILY: Freq = Freq { minutes: 1440 };

    pub fn new(minutes: u32) -> Result<Self> {
        if minutes == 0 {
            return Err(Error::Data("sampling interval must be positive".into()));
        }
        if minutes < 60 && 60 % minutes != 0 {
            return Err(Error::Data(format!(
                "sub-hourly interval of {minutes} min does not divide the hour"
            )));
        }
        Ok(Freq { minutes })
    }

    pub fn is_sub_hourly(self) -> bool {
        self.minutes < 60
    }

    pub fn is_daily_or_coarser(self) -> bool {
        self.minutes >= 1440
    }

    /// Calendar features emitted for this interval, in column order.
    pub fn features(self) -> Vec<CalendarFeature> {
        let mut out = vec![CalendarFeature::Month, CalendarFeature::DayOfMonth, CalendarFeature::Weekday];
        if !self.is_daily_or_coarser() {
            out.push(CalendarFeature::Hour);
        }
        if self.is_sub_hourly() {
            out.push(CalendarFeature::MinuteBucket { interval: self.minutes });
        }
        out
    }

    /// Vocabulary size of each feature, aligned with [`features`](Self::features).
    pub fn vocab_sizes(self) -> Vec<usize> {
        self.features().iter().map(|f| f.vocab()).collect()
    }
}

impl fmt::Display for Freq {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.minutes {
            m if m % 1440 == 0 => write!(f, "{}d", m / 1440),
            m if m % 60 == 0 => write!(f, "{}h", m / 60),
            m => write!(f, "{m}min"),
        }
    }
}

impl FromStr for Freq {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        let split = s.find(|ch: char| !ch.is_ascii_digit()).unwrap_or(s.len());
        let (num, unit) = s.split_at(split);
        let n: u32 = if num.is_empty() {
            1
        } else {
            num.parse().map_err(|_| Error::Data(format!("bad frequency '{s}'")))?
        };
        let minutes = match unit {
            "min" | "m" | "t" => n,
            "h" => n * 60,
            "d" => n * 1440,
            _ => return Err(Error::Data(format!("bad frequency '{s}'"))),
        };
        Freq::new(minutes)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CalendarFeature {
    Month,
    DayOfMonth,
    /// Monday is 0.
    Weekday,
    Hour,
    /// Minute of the hour divided by the sampling interval.
    MinuteBucket { interval: u32 },
}

impl CalendarFeature {
    pub fn vocab(self) -> usize {
        match self {
            CalendarFeature::Month => 12,
            CalendarFeature::DayOfMonth => 31,
            CalendarFeature::Weekday => 7,
            CalendarFeature::Hour => 24,
            CalendarFeature::MinuteBucket { interval } => (60 / interval) as usize,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CalendarFeature::Month => "month",
            CalendarFeature::DayOfMonth => "day",
            CalendarFeature::Weekday => "weekday",
            CalendarFeature::Hour => "hour",
            CalendarFeature::MinuteBucket { .. } => "minute",
        }
    }

    pub fn code(self, t: &NaiveDateTime) -> usize {
        match self {
            CalendarFeature::Month => t.month0() as usize,
            CalendarFeature::DayOfMonth => t.day0() as usize,
            CalendarFeature::Weekday => t.weekday().num_days_from_monday() as usize,
            CalendarFeature::Hour => t.hour() as usize,
            CalendarFeature::MinuteBucket { interval } => (t.minute() / interval) as usize,
        }
    }
}

/// Zero-based calendar codes, row-major `T x N_freq`.
pub fn extract_time_features(timestamps: &[NaiveDateTime], freq: Freq) -> Vec<usize> {
    let features = freq.features();
    let mut out = Vec::with_capacity(timestamps.len() * features.len());
    for t in timestamps {
        out.extend(features.iter().map(|f| f.code(t)));
    }
    out
}

#[cfg(test)]
mod tests {
    use chrono::NaiveDate;

    use super::*;

    fn at(y: i32, m: u32, d: u32, h: u32, min: u32) -> NaiveDateTime {
        NaiveDate::from_ymd_opt(y, m, d).unwrap().and_hms_opt(h, min, 0).unwrap()
    }

    #[test]
    fn hourly_codes_for_a_known_friday() {
        let codes = extract_time_features(&[at(2016, 7, 1, 0, 0)], Freq::HOURLY);
        assert_eq!(codes, vec![6, 0, 4, 0]);
    }

    #[test]
    fn midnight_and_late_evening_differ_only_in_hour() {
        let codes = extract_time_features(&[at(2016, 7, 1, 0, 0), at(2016, 7, 1, 23, 0)], Freq::HOURLY);
        assert_eq!(&codes[..3], &codes[4..7]);
        assert_eq!((codes[3], codes[7]), (0, 23));
    }

    #[test]
    fn quarter_hour_buckets() {
        let freq: Freq = "15min".parse().unwrap();
        assert_eq!(freq.vocab_sizes(), vec![12, 31, 7, 24, 4]);
        let ts: Vec<_> = [0, 15, 30, 45].iter().map(|&m| at(2020, 1, 1, 5, m)).collect();
        let codes = extract_time_features(&ts, freq);
        let minutes: Vec<usize> = codes.chunks(5).map(|r| r[4]).collect();
        assert_eq!(minutes, vec![0, 1, 2, 3]);
    }

    #[test]
    fn daily_data_drops_the_hour() {
        assert_eq!(Freq::DAILY.vocab_sizes(), vec![12, 31, 7]);
    }

    #[test]
    fn frequency_tags_round_trip() {
        for tag in ["10min", "1h", "2h", "1d"] {
            let f: Freq = tag.parse().unwrap();
            assert_eq!(f.to_string(), tag);
        }
        assert!("7min".parse::<Freq>().is_err());
        assert!("1w".parse::<Freq>().is_err());
    }

    #[test]
    fn codes_stay_inside_their_vocabularies() {
        let freq: Freq = "5min".parse().unwrap();
        let vocab = freq.vocab_sizes();
        let start = at(2019, 12, 28, 22, 0);
        let ts: Vec<_> = (0..5000).map(|i| start + chrono::Duration::minutes(5 * i)).collect();
        let codes = extract_time_features(&ts, freq);
        for row in codes.chunks(vocab.len()) {
            for (c, v) in row.iter().zip(&vocab) {
                assert!(c < v);
            }
        }
    }
}
