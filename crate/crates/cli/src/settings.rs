//! Run settings: built-in defaults, overridden by a flat `key=value` file,
//! overridden by command-line flags.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{Context, Result};
use clap::Args;
use pesd::data::LoadOptions;
use pesd::model::{PatchPad, StageOrder};
use pesd::{ModelConfig, SeriesDataset, SplitSpec, TrainConfig};

use crate::Usage;

/// Every recognised key with its default. `None` means unset.
const DEFAULTS: &[(&str, Option<&str>)] = &[
    ("data", None),
    ("date_column", Some("date")),
    ("allow_gaps", Some("false")),
    ("lookback", Some("720")),
    ("horizon", Some("96")),
    ("patch_len", Some("16")),
    ("stride", Some("8")),
    ("d_model", Some("64")),
    ("heads", Some("8")),
    ("depth", Some("2")),
    ("d_emb", Some("8")),
    ("smooth_kernel", Some("3")),
    ("gamma", Some("0.5")),
    ("lambda1", Some("0.001")),
    ("lambda2", Some("0.001")),
    ("k_factors", Some("auto")),
    ("seed", Some("2021")),
    ("epochs", Some("30")),
    ("batch", Some("32")),
    ("lr", Some("0.0001")),
    ("patience", Some("5")),
    ("clip_norm", Some("5")),
    ("max_steps", None),
    ("max_batches", None),
    ("max_eval_windows", None),
    ("train_stride", Some("1")),
    ("split", Some("0.6,0.2,0.2")),
    ("standardize", Some("true")),
    ("no_period", Some("false")),
    ("no_rlc", Some("false")),
    ("no_csca", Some("false")),
    ("no_hierarchy", Some("false")),
    ("order", Some("s1s2s3")),
    ("head_bias", Some("true")),
    ("patch_pad", Some("replicate")),
];

/// Flags shared by every command that builds and trains a model.
#[derive(Args, Debug, Clone, Default)]
pub struct RunArgs {
    /// Flat key=value settings file; flags given here take precedence.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Input CSV with a date column and one numeric column per channel.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub date_column: Option<String>,
    /// Accept timestamp gaps that are whole multiples of the base interval.
    #[arg(long)]
    pub allow_gaps: bool,
    #[arg(long)]
    pub lookback: Option<usize>,
    #[arg(long)]
    pub horizon: Option<usize>,
    #[arg(long)]
    pub patch_len: Option<usize>,
    #[arg(long)]
    pub stride: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub d_emb: Option<usize>,
    #[arg(long)]
    pub smooth_kernel: Option<usize>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub lambda1: Option<f64>,
    #[arg(long)]
    pub lambda2: Option<f64>,
    /// Number of latent factors, or `auto` for twice the channel count.
    #[arg(long, value_name = "K|auto")]
    pub k_factors: Option<String>,
    /// Falls back to $PESD_SEED, then to 2021.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub patience: Option<usize>,
    /// Global gradient norm cap, or `none`.
    #[arg(long)]
    pub clip_norm: Option<String>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// Cap on minibatches per epoch.
    #[arg(long)]
    pub max_batches: Option<usize>,
    /// Cap on evaluated windows per segment.
    #[arg(long)]
    pub max_eval_windows: Option<usize>,
    #[arg(long)]
    pub train_stride: Option<usize>,
    /// Train/validation/test fractions, e.g. 0.7,0.1,0.2.
    #[arg(long)]
    pub split: Option<String>,
    /// Skip the global z-score fitted on the training rows.
    #[arg(long)]
    pub no_standardize: bool,
    #[arg(long)]
    pub no_period: bool,
    #[arg(long)]
    pub no_rlc: bool,
    #[arg(long)]
    pub no_csca: bool,
    #[arg(long)]
    pub no_hierarchy: bool,
    /// Stage order, e.g. s2s1s3.
    #[arg(long)]
    pub order: Option<String>,
    #[arg(long)]
    pub no_head_bias: bool,
    /// Pad short lookbacks with literal zeros instead of the last value.
    #[arg(long)]
    pub strict_zero_pad: bool,
}

fn normalize_key(k: &str) -> String {
    k.trim().replace('-', "_")
}

/// Parses `key=value` lines; `#` starts a comment.
pub fn parse_config(text: &str, origin: &Path) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Usage(format!("{}:{}: expected key=value", origin.display(), i + 1)).into());
        };
        let k = normalize_key(k);
        if !DEFAULTS.iter().any(|(d, _)| *d == k) {
            return Err(Usage(format!("{}:{}: unknown setting '{k}'", origin.display(), i + 1)).into());
        }
        map.insert(k, v.trim().to_string());
    }
    Ok(map)
}

/// Resolved settings as strings, one per known key.
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Settings {
    pub fn resolve(args: &RunArgs) -> Result<Self> {
        let mut values: BTreeMap<String, String> = DEFAULTS
            .iter()
            .filter_map(|(k, v)| v.map(|v| (k.to_string(), v.to_string())))
            .collect();
        let from_file = match &args.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                parse_config(&text, p)?
            }
            None => BTreeMap::new(),
        };
        if !from_file.contains_key("seed") && args.seed.is_none() {
            if let Ok(s) = std::env::var("PESD_SEED") {
                values.insert("seed".into(), s);
            }
        }
        values.extend(from_file);

        let mut set = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                values.insert(k.to_string(), v);
            }
        };
        fn s<T: Display>(v: &Option<T>) -> Option<String> {
            v.as_ref().map(ToString::to_string)
        }
        fn flag(on: bool, value: &str) -> Option<String> {
            on.then(|| value.to_string())
        }
        set("data", args.data.as_ref().map(|p| p.display().to_string()));
        set("date_column", s(&args.date_column));
        set("allow_gaps", flag(args.allow_gaps, "true"));
        set("lookback", s(&args.lookback));
        set("horizon", s(&args.horizon));
        set("patch_len", s(&args.patch_len));
        set("stride", s(&args.stride));
        set("d_model", s(&args.d_model));
        set("heads", s(&args.heads));
        set("depth", s(&args.depth));
        set("d_emb", s(&args.d_emb));
        set("smooth_kernel", s(&args.smooth_kernel));
        set("gamma", s(&args.gamma));
        set("lambda1", s(&args.lambda1));
        set("lambda2", s(&args.lambda2));
        set("k_factors", s(&args.k_factors));
        set("seed", s(&args.seed));
        set("epochs", s(&args.epochs));
        set("batch", s(&args.batch));
        set("lr", s(&args.lr));
        set("patience", s(&args.patience));
        set("clip_norm", s(&args.clip_norm));
        set("max_steps", s(&args.max_steps));
        set("max_batches", s(&args.max_batches));
        set("max_eval_windows", s(&args.max_eval_windows));
        set("train_stride", s(&args.train_stride));
        set("split", s(&args.split));
        set("standardize", flag(args.no_standardize, "false"));
        set("no_period", flag(args.no_period, "true"));
        set("no_rlc", flag(args.no_rlc, "true"));
        set("no_csca", flag(args.no_csca, "true"));
        set("no_hierarchy", flag(args.no_hierarchy, "true"));
        set("order", s(&args.order));
        set("head_bias", flag(args.no_head_bias, "false"));
        set("patch_pad", flag(args.strict_zero_pad, "zero"));
        Ok(Settings { values })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        self.values.insert(key.to_string(), value.to_string());
    }

    fn parse<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: Display,
    {
        let raw = self.get(key).ok_or_else(|| Usage(format!("missing setting '{key}'")))?;
        raw.parse::<T>().map_err(|e| Usage(format!("bad value '{raw}' for {key}: {e}")).into())
    }

    fn optional<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        match self.get(key) {
            None | Some("none") | Some("") => Ok(None),
            Some(_) => self.parse(key).map(Some),
        }
    }

    pub fn data_path(&self) -> Result<PathBuf> {
        self.get("data")
            .map(PathBuf::from)
            .ok_or_else(|| Usage("no dataset given (use --data or data= in the config file)".into()).into())
    }

    pub fn load_options(&self) -> Result<LoadOptions> {
        Ok(LoadOptions {
            date_column: self.parse("date_column")?,
            allow_gaps: self.parse("allow_gaps")?,
            freq: None,
        })
    }

    pub fn seed(&self) -> Result<u64> {
        self.parse("seed")
    }

    pub fn split(&self) -> Result<SplitSpec> {
        parse_split(self.get("split").unwrap_or("0.6,0.2,0.2"))
    }

    pub fn model_config(&self, ds: &SeriesDataset) -> Result<ModelConfig> {
        let mut m = ModelConfig::for_series(ds, self.parse("lookback")?, self.parse("horizon")?);
        m.patch_len = self.parse("patch_len")?;
        m.stride = self.parse("stride")?;
        m.d_model = self.parse("d_model")?;
        m.heads = self.parse("heads")?;
        m.depth = self.parse("depth")?;
        m.d_emb = self.parse("d_emb")?;
        m.smooth_kernel = self.parse("smooth_kernel")?;
        m.gamma = self.parse("gamma")?;
        m.no_period = self.parse("no_period")?;
        m.no_csca = self.parse("no_csca")?;
        m.no_hierarchy = self.parse("no_hierarchy")?;
        m.order = self.parse::<StageOrder>("order")?;
        m.head_bias = self.parse("head_bias")?;
        m.patch_pad = match self.get("patch_pad").unwrap_or("replicate") {
            "replicate" => PatchPad::Replicate,
            "zero" => PatchPad::Zero,
            "off" => PatchPad::Off,
            other => return Err(Usage(format!("bad patch_pad '{other}' (replicate, zero or off)")).into()),
        };
        m.k_factors = match self.get("k_factors").unwrap_or("auto") {
            "auto" => 2 * ds.channels(),
            _ => self.parse("k_factors")?,
        };
        Ok(m)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            lr: self.parse("lr")?,
            batch_size: self.parse("batch")?,
            epochs: self.parse("epochs")?,
            patience: self.parse("patience")?,
            seed: self.seed()?,
            lambda1: self.parse("lambda1")?,
            lambda2: self.parse("lambda2")?,
            no_rlc: self.parse("no_rlc")?,
            clip_norm: self.optional("clip_norm")?,
            max_steps: self.optional("max_steps")?,
            max_batches_per_epoch: self.optional("max_batches")?,
            train_stride: self.parse("train_stride")?,
            max_eval_windows: self.optional("max_eval_windows")?,
            split: self.split()?,
            standardize: self.parse("standardize")?,
        })
    }

    /// The effective settings as `key=value` lines, in key order.
    pub fn echo(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}

pub fn parse_split(s: &str) -> Result<SplitSpec> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| Usage(format!("bad split '{s}', expected three fractions like 0.7,0.1,0.2")))?;
    let &[train, val, test] = parts.as_slice() else {
        return Err(Usage(format!("bad split '{s}', expected three fractions")).into());
    };
    Ok(SplitSpec::Fractions { train, val, test })
}

pub fn parse_list<T: FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| p.trim().parse::<T>().map_err(|_| Usage(format!("bad {what} '{}'", p.trim())).into()))
        .collect()
}
