use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::SeriesDataset;
use crate::error::{Error, Result};

/// The three encoder stage kinds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stage {
    /// Smoothing, detrending and detrended attention.
    S1,
    /// Stride-2 dual-branch patch sampling.
    S2,
    /// Cross-channel attention on time-pooled features.
    S3,
}

/// A permutation of the three stages. S1 and S2 repeat once per hierarchy
/// level in the listed order; S3 runs once, in the last level, at its
/// listed position.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct StageOrder(Vec<Stage>);

impl StageOrder {
    pub fn new(stages: Vec<Stage>) -> Result<Self> {
        let mut sorted = stages.clone();
        sorted.sort_by_key(|s| *s as u8);
        if sorted != [Stage::S1, Stage::S2, Stage::S3] {
            return Err(Error::config(format!("stage order {stages:?} is not a permutation of s1,s2,s3")));
        }
        Ok(StageOrder(stages))
    }

    pub fn stages(&self) -> &[Stage] {
        &self.0
    }

    pub fn is_default(&self) -> bool {
        self.0 == [Stage::S1, Stage::S2, Stage::S3]
    }
}

impl Default for StageOrder {
    fn default() -> Self {
        StageOrder(vec![Stage::S1, Stage::S2, Stage::S3])
    }
}

impl FromStr for StageOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        let bad = || Error::config(format!("bad stage order '{s}', expected e.g. s1s2s3"));
        let b = s.as_bytes();
        if b.len() != 6 {
            return Err(bad());
        }
        let stages = b
            .chunks(2)
            .map(|p| match p {
                b"s1" => Ok(Stage::S1),
                b"s2" => Ok(Stage::S2),
                b"s3" => Ok(Stage::S3),
                _ => Err(bad()),
            })
            .collect::<Result<Vec<_>>>()?;
        StageOrder::new(stages)
    }
}

impl fmt::Display for StageOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for s in &self.0 {
            write!(f, "{}", format!("{s:?}").to_ascii_lowercase())?;
        }
        Ok(())
    }
}

impl TryFrom<String> for StageOrder {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<StageOrder> for String {
    fn from(o: StageOrder) -> String {
        o.to_string()
    }
}

/// What patchify does when the lookback is shorter than one patch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PatchPad {
    /// Repeat the last timestep.
    Replicate,
    /// Pad with literal zeros.
    Zero,
    /// Refuse: a lookback shorter than the patch is an error.
    Off,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub lookback: usize,
    pub horizon: usize,
    pub channels: usize,
    /// Vocabulary size of each calendar feature.
    pub vocab: Vec<usize>,
    pub d_emb: usize,
    pub patch_len: usize,
    pub stride: usize,
    pub d_model: usize,
    pub heads: usize,
    pub smooth_kernel: usize,
    pub depth: usize,
    pub gamma: f64,
    pub no_period: bool,
    pub no_csca: bool,
    pub no_hierarchy: bool,
    pub order: StageOrder,
    pub head_bias: bool,
    pub patch_pad: PatchPad,
    pub k_factors: usize,
}

impl ModelConfig {
    /// Defaults for the given problem size: P=16, S=8, D=64, H=8, w=3,
    /// depth 2, gamma 0.5, K=2C.
    pub fn new(lookback: usize, horizon: usize, channels: usize, vocab: Vec<usize>) -> Self {
        ModelConfig {
            lookback,
            horizon,
            channels,
            vocab,
            d_emb: 8,
            patch_len: 16,
            stride: 8,
            d_model: 64,
            heads: 8,
            smooth_kernel: 3,
            depth: 2,
            gamma: 0.5,
            no_period: false,
            no_csca: false,
            no_hierarchy: false,
            order: StageOrder::default(),
            head_bias: true,
            patch_pad: PatchPad::Replicate,
            k_factors: 2 * channels,
        }
    }

    /// Defaults sized to `ds`: its channel count and calendar vocabulary.
    pub fn for_series(ds: &SeriesDataset, lookback: usize, horizon: usize) -> Self {
        Self::new(lookback, horizon, ds.channels(), ds.freq.vocab_sizes())
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::config(m));
        if self.lookback == 0 || self.horizon == 0 || self.channels == 0 {
            return err("lookback, horizon and channel count must be >= 1".into());
        }
        if self.patch_len == 0 || self.stride == 0 || self.stride > self.patch_len {
            return err(format!(
                "need 1 <= stride <= patch_len, got stride {} and patch_len {}",
                self.stride, self.patch_len
            ));
        }
        if self.lookback < self.patch_len && self.patch_pad == PatchPad::Off {
            return err(format!(
                "lookback {} is shorter than patch_len {} and padding is disabled",
                self.lookback, self.patch_len
            ));
        }
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return err(format!("d_model {} is not divisible by heads {}", self.d_model, self.heads));
        }
        if self.smooth_kernel % 2 == 0 {
            return err(format!("smoothing kernel {} must be odd", self.smooth_kernel));
        }
        if self.depth == 0 {
            return err("depth must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return err(format!("gamma {} outside [0, 1]", self.gamma));
        }
        if self.d_emb == 0 || self.vocab.iter().any(|&v| v == 0) {
            return err("calendar embedding sizes must be >= 1".into());
        }
        if self.k_factors == 0 || self.k_factors > 2 * self.channels {
            return err(format!(
                "k_factors {} must be in [1, 2C = {}]",
                self.k_factors,
                2 * self.channels
            ));
        }
        self.temporal_lengths().map(|_| ())
    }

    /// Hierarchy levels actually run.
    pub fn levels(&self) -> usize {
        if self.no_hierarchy {
            1
        } else {
            self.depth
        }
    }

    /// Patch count after patchify.
    pub fn n_patches(&self) -> usize {
        patch_count(self.lookback.max(self.patch_len), self.patch_len, self.stride)
    }

    /// Temporal length entering each level, followed by the final length.
    pub fn temporal_lengths(&self) -> Result<Vec<usize>> {
        let mut n = self.n_patches();
        let mut out = vec![n];
        for level in 0..self.levels() {
            if !self.no_hierarchy {
                if n < 2 {
                    return Err(Error::config(format!(
                        "temporal length {n} at hierarchy level {} cannot be halved; lower depth (now {})",
                        level + 1,
                        self.depth
                    )));
                }
                n /= 2;
            }
            out.push(n);
        }
        Ok(out)
    }

    /// Temporal length of the encoder output.
    pub fn n_eff(&self) -> usize {
        self.temporal_lengths().map_or(0, |v| *v.last().unwrap())
    }

    pub fn head_dh(&self) -> usize {
        self.d_model / self.heads
    }
}

/// `floor((L - P) / S) + 1` for `L >= P`.
pub fn patch_count(l: usize, p: usize, s: usize) -> usize {
    (l - p) / s + 1
}
