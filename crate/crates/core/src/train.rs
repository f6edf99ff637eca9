//! Training loop: global scaling, minibatch Adam on the full objective,
//! early stopping on validation MSE, and parameter sweeps.

use std::fmt;
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{Scaler, Segment, SeriesDataset, SplitSpec, WindowBatch, WindowSet};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalReport};
use crate::model::{Checkpoint, Model, ModelConfig};
use crate::optim::{clip_global_norm, Adam};
use crate::rlc::{orth_value, spectral_norm, total_loss, LossBundle, RlcWeights};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub no_rlc: bool,
    /// Global gradient norm cap; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Stop after this many optimizer steps in total.
    pub max_steps: Option<usize>,
    /// Cap on minibatches per epoch; the shuffled order decides which.
    pub max_batches_per_epoch: Option<usize>,
    /// Step between consecutive training windows.
    pub train_stride: usize,
    /// Cap on evaluated windows, spread evenly over the segment.
    pub max_eval_windows: Option<usize>,
    pub split: SplitSpec,
    /// Fit a z-score on the training rows and apply it to the whole series.
    pub standardize: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            batch_size: 32,
            epochs: 30,
            patience: 5,
            seed: 2021,
            lambda1: 1e-3,
            lambda2: 1e-3,
            no_rlc: false,
            clip_norm: Some(5.0),
            max_steps: None,
            max_batches_per_epoch: None,
            train_stride: 1,
            max_eval_windows: None,
            split: SplitSpec::default(),
            standardize: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.patience == 0 {
            return Err(Error::config("patience must be >= 1"));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.train_stride == 0 {
            return Err(Error::config("batch size, epochs and stride must be >= 1"));
        }
        if let Some(c) = self.clip_norm {
            if c.is_nan() || c <= 0.0 {
                return Err(Error::config(format!("clip norm must be positive, got {c}")));
            }
        }
        Ok(())
    }

    pub fn weights(&self) -> RlcWeights {
        if self.no_rlc {
            RlcWeights::disabled()
        } else {
            RlcWeights::new(self.lambda1, self.lambda2)
        }
    }
}

/// A dataset after scaling, with its chronological segments.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub data: SeriesDataset,
    pub scaler: Scaler,
    pub segments: [Range<usize>; 3],
}

impl Prepared {
    pub fn new(ds: &SeriesDataset, split: SplitSpec, standardize: bool) -> Result<Self> {
        let segments = split.segments(ds.len())?;
        let scaler = if standardize {
            Scaler::fit(ds, segments[0].clone())?
        } else {
            Scaler::identity(ds.channels())
        };
        Ok(Prepared {
            data: scaler.transform(ds),
            scaler,
            segments,
        })
    }

    pub fn rows(&self, which: Segment) -> Range<usize> {
        let i = match which {
            Segment::Train => 0,
            Segment::Val => 1,
            Segment::Test => 2,
        };
        self.segments[i].clone()
    }

    pub fn windows(&self, which: Segment, lookback: usize, horizon: usize, stride: usize) -> Result<WindowSet<'_>> {
        let rows = self.rows(which);
        WindowSet::new(&self.data, rows, lookback, horizon, stride).map_err(|e| match e {
            Error::Data(m) => Error::Data(format!("{which:?} segment: {m}").to_lowercase()),
            other => other,
        })
    }

    /// Scores `model` on one segment.
    pub fn evaluate(&self, model: &Model, which: Segment, max_windows: Option<usize>, batch_size: usize) -> Result<EvalReport> {
        let cfg = &model.config;
        let set = self.windows(which, cfg.lookback, cfg.horizon, 1)?;
        let positions = set.spread(max_windows.unwrap_or(usize::MAX));
        evaluate(Some(model), &set, &positions, batch_size)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
    pub l_orth: f64,
    pub pcc_sum: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub l_mse: f64,
    pub l_orth: f64,
    pub pcc_sum: f64,
    pub sigma_max: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters of the best validation epoch.
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
    pub best_epoch: usize,
    pub best_val_mse: f64,
    /// Orthogonality penalty of the freshly initialized projection.
    pub init_l_orth: f64,
    pub init_sigma_max: f64,
    pub stopped_early: bool,
}

/// Targets scaled by each window's own statistics.
pub fn normalized_targets(batch: &WindowBatch) -> Tensor {
    let (b, o, c) = (batch.batch_size(), batch.horizon(), batch.channels());
    let mut out = batch.y.clone();
    let d = out.data_mut();
    for bi in 0..b {
        for t in 0..o {
            for ci in 0..c {
                let k = bi * c + ci;
                let i = (bi * o + t) * c + ci;
                d[i] = (d[i] - batch.mu.data()[k]) / batch.sigma.data()[k];
            }
        }
    }
    out
}

/// One forward/backward pass. Returns the loss values and the gradients in
/// parameter order.
pub fn loss_and_grads(model: &Model, batch: &WindowBatch, weights: RlcWeights) -> Result<(LossBundle, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let p = model.bind(&mut tape);
    let f = model.forward(&mut tape, &p, batch)?;
    let y_norm = normalized_targets(batch);
    let terms = total_loss(&mut tape, f.y_hat, &batch.y, &y_norm, f.z_final, p.var("rlc.w")?, weights)?;
    if !terms.bundle.total.is_finite() {
        return Ok((terms.bundle, Vec::new()));
    }
    tape.backward(terms.total)?;
    Ok((terms.bundle, p.grads(&tape)))
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(epoch as u64)
}

pub struct Trainer {
    prepared: Prepared,
    cfg: TrainConfig,
    model: Model,
    opt: Adam,
    last_good: Checkpoint,
    history: Vec<EpochRecord>,
    steps: Vec<StepRecord>,
}

impl Trainer {
    pub fn new(ds: &SeriesDataset, model_cfg: ModelConfig, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        model_cfg.validate()?;
        if model_cfg.channels != ds.channels() || model_cfg.vocab != ds.freq.vocab_sizes() {
            return Err(Error::config(format!(
                "model expects {} channels and calendar vocabulary {:?}; data has {} channels and {:?}",
                model_cfg.channels,
                model_cfg.vocab,
                ds.channels(),
                ds.freq.vocab_sizes()
            )));
        }
        cfg.weights().validate(model_cfg.channels, model_cfg.k_factors)?;
        let prepared = Prepared::new(ds, cfg.split, cfg.standardize)?;
        let model = Model::new(model_cfg, cfg.seed)?;
        let opt = Adam::new(&model.params, cfg.lr);
        let mut last_good = Checkpoint::new(model.clone());
        last_good.scaler = Some(prepared.scaler.clone());
        last_good.channel_names = ds.channel_names.clone();
        last_good.freq = Some(ds.freq.to_string());
        Ok(Trainer {
            prepared,
            cfg,
            model,
            opt,
            last_good,
            history: Vec::new(),
            steps: Vec::new(),
        })
    }

    pub fn prepared(&self) -> &Prepared {
        &self.prepared
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    /// Most recent parameters known to be finite. After a divergence error
    /// this is what survives.
    pub fn last_good(&self) -> &Checkpoint {
        &self.last_good
    }

    pub fn history(&self) -> &[EpochRecord] {
        &self.history
    }

    pub fn steps(&self) -> &[StepRecord] {
        &self.steps
    }

    fn snapshot(&self, model: &Model) -> Checkpoint {
        Checkpoint {
            model: model.clone(),
            ..self.last_good.clone()
        }
    }

    pub fn run(&mut self) -> Result<TrainOutcome> {
        let (l, o) = (self.model.config.lookback, self.model.config.horizon);
        let weights = self.cfg.weights();
        let init_l_orth = orth_value(self.model.params.get("rlc.w")?)?;
        let init_sigma_max = spectral_norm(self.model.params.get("rlc.w")?)?;
        let train_set = self.prepared.windows(Segment::Train, l, o, self.cfg.train_stride)?;
        let val_set = self.prepared.windows(Segment::Val, l, o, 1)?;
        let val_positions = val_set.spread(self.cfg.max_eval_windows.unwrap_or(usize::MAX));

        let mut best = self.snapshot(&self.model);
        let mut best_val = f64::INFINITY;
        let mut best_epoch = 0;
        let mut bad_epochs = 0;
        let mut stopped_early = false;
        let mut step = self.steps.len();
        'epochs: for epoch in 1..=self.cfg.epochs {
            let mut batches = train_set.batch_indices(self.cfg.batch_size, Some(epoch_seed(self.cfg.seed, epoch)));
            if let Some(cap) = self.cfg.max_batches_per_epoch {
                batches.truncate(cap);
            }
            let (mut sse, mut count, mut pcc, mut n_batches) = (0.0, 0usize, 0.0, 0usize);
            let mut hit_step_cap = false;
            for idx in &batches {
                let batch = train_set.batch(idx)?;
                let (bundle, mut grads) = loss_and_grads(&self.model, &batch, weights).map_err(|e| match e {
                    Error::Numeric { op, detail } => Error::Diverged {
                        step: step + 1,
                        detail: format!("{op}: {detail}"),
                    },
                    other => other,
                })?;
                if !bundle.total.is_finite() {
                    return Err(Error::Diverged {
                        step: step + 1,
                        detail: format!("training loss is {} (mse {})", bundle.total, bundle.l_mse),
                    });
                }
                if let Some(c) = self.cfg.clip_norm {
                    clip_global_norm(&mut grads, c);
                }
                self.opt.step(&mut self.model.params, &grads)?;
                step += 1;
                if self.model.params.tensors().iter().any(|t| !t.is_finite()) {
                    return Err(Error::Diverged {
                        step,
                        detail: "parameters became non-finite".into(),
                    });
                }
                self.last_good = self.snapshot(&self.model);
                let w = self.model.params.get("rlc.w")?;
                let l_orth = if weights.enabled { orth_value(w)? } else { 0.0 };
                self.steps.push(StepRecord {
                    step,
                    l_mse: bundle.l_mse,
                    l_orth,
                    pcc_sum: bundle.pcc_sum,
                    sigma_max: spectral_norm(w)?,
                });
                let n = batch.y.len();
                sse += bundle.l_mse * n as f64;
                count += n;
                pcc += bundle.pcc_sum;
                n_batches += 1;
                if self.cfg.max_steps.is_some_and(|m| step >= m) {
                    hit_step_cap = true;
                    break;
                }
            }
            let val = evaluate(Some(&self.model), &val_set, &val_positions, self.cfg.batch_size)?.model.mse;
            if !val.is_finite() {
                return Err(Error::Diverged {
                    step,
                    detail: format!("validation MSE is {val}"),
                });
            }
            let l_orth = if weights.enabled { orth_value(self.model.params.get("rlc.w")?)? } else { 0.0 };
            self.history.push(EpochRecord {
                epoch,
                train_mse: if count > 0 { sse / count as f64 } else { f64::NAN },
                val_mse: val,
                l_orth,
                pcc_sum: if n_batches > 0 { pcc / n_batches as f64 } else { 0.0 },
            });
            if val < best_val {
                best_val = val;
                best_epoch = epoch;
                best = self.snapshot(&self.model);
                bad_epochs = 0;
            } else {
                bad_epochs += 1;
                if bad_epochs >= self.cfg.patience {
                    stopped_early = true;
                    break 'epochs;
                }
            }
            if hit_step_cap {
                break;
            }
        }
        Ok(TrainOutcome {
            checkpoint: best,
            history: self.history.clone(),
            steps: self.steps.clone(),
            best_epoch,
            best_val_mse: best_val,
            init_l_orth,
            init_sigma_max,
            stopped_early,
        })
    }
}

/// Trains one model from scratch.
pub fn train(ds: &SeriesDataset, model_cfg: ModelConfig, cfg: TrainConfig) -> Result<TrainOutcome> {
    Trainer::new(ds, model_cfg, cfg)?.run()
}

pub fn write_history(path: impl AsRef<Path>, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in history {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_steps(path: impl AsRef<Path>, steps: &[StepRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in steps {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Which hyperparameter a sweep varies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepParam {
    /// Both regularization weights together.
    Lambda,
    Gamma,
}

impl FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lambda" => Ok(SweepParam::Lambda),
            "gamma" => Ok(SweepParam::Gamma),
            _ => Err(Error::config(format!("unknown sweep parameter '{s}' (expected lambda or gamma)"))),
        }
    }
}

impl fmt::Display for SweepParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepParam::Lambda => "lambda",
            SweepParam::Gamma => "gamma",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub val_mse: f64,
    pub test_mse: f64,
    pub best_epoch: usize,
}

/// One full training run per grid value, all with the same seed.
pub fn sweep(
    ds: &SeriesDataset,
    param: SweepParam,
    grid: &[f64],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<Vec<SweepRow>> {
    if grid.is_empty() {
        return Err(Error::config("sweep grid is empty"));
    }
    let mut rows = Vec::with_capacity(grid.len());
    for &value in grid {
        let (mut m, mut t) = (model_cfg.clone(), cfg.clone());
        match param {
            SweepParam::Lambda => {
                t.lambda1 = value;
                t.lambda2 = value;
            }
            SweepParam::Gamma => m.gamma = value,
        }
        let mut trainer = Trainer::new(ds, m, t)?;
        let out = trainer.run()?;
        let test = trainer
            .prepared()
            .evaluate(&out.checkpoint.model, Segment::Test, cfg.max_eval_windows, cfg.batch_size)?;
        rows.push(SweepRow {
            value,
            val_mse: out.best_val_mse,
            test_mse: test.model.mse,
            best_epoch: out.best_epoch,
        });
    }
    Ok(rows)
}

pub fn write_sweep(path: impl AsRef<Path>, param: SweepParam, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([param.to_string().as_str(), "val_mse", "test_mse", "best_epoch"])?;
    for r in rows {
        w.write_record([r.value.to_string(), r.val_mse.to_string(), r.test_mse.to_string(), r.best_epoch.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
