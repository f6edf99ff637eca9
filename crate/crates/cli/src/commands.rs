use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, ValueEnum};
use serde::Serialize;

use pesd::analysis::{self, latent, spectral, topology};
use pesd::data::{load_csv, LoadOptions};
use pesd::metrics::{mean_std, EvalReport};
use pesd::synth::{generate, SynthSpec};
use pesd::train::{sweep as run_sweep, write_history, write_steps, write_sweep, SweepParam};
use pesd::{Checkpoint, Model, ModelConfig, Segment, SeriesDataset, SplitSpec, TrainConfig, Trainer, WindowSet};

use crate::settings::{parse_list, parse_split, RunArgs, Settings};
use crate::Usage;

/// Creates `dir`, refusing to reuse a non-empty one unless `force` is set.
fn prepare_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() && !force && fs::read_dir(dir)?.next().is_some() {
        return Err(Usage(format!("{} is not empty; pass --force to overwrite", dir.display())).into());
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(())
}

fn load(settings: &Settings) -> Result<(PathBuf, SeriesDataset)> {
    let path = settings.data_path()?;
    let ds = load_csv(&path, &settings.load_options()?).with_context(|| format!("loading {}", path.display()))?;
    Ok((path, ds))
}

fn dataset_name(path: &Path) -> String {
    path.file_stem().and_then(|s| s.to_str()).unwrap_or("data").to_string()
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Run directory.
    #[arg(long, default_value = "runs/latest")]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

/// Test-set summary written as `metrics.json`. Errors are in standardized
/// units when the global scaler is on.
#[derive(Serialize)]
struct RunMetrics {
    dataset: String,
    horizon: usize,
    seed: u64,
    mse: f64,
    mae: f64,
    mape: f64,
    rmse: f64,
    baseline_mse_repeat_last: f64,
    baseline_mse_mean: f64,
    val_mse: f64,
    best_epoch: usize,
    steps: usize,
    windows: usize,
    standardized: bool,
}

pub fn train(a: TrainArgs) -> Result<()> {
    let mut settings = Settings::resolve(&a.run)?;
    let (path, ds) = load(&settings)?;
    let mcfg = settings.model_config(&ds)?;
    let tcfg = settings.train_config()?;
    settings.set("k_factors", mcfg.k_factors);
    prepare_dir(&a.out, a.force)?;
    fs::write(a.out.join("config.txt"), settings.echo())?;

    let mut trainer = Trainer::new(&ds, mcfg, tcfg.clone())?;
    let outcome = match trainer.run() {
        Ok(o) => o,
        Err(e) => {
            trainer.last_good().save(a.out.join("checkpoint.json"))?;
            write_history(a.out.join("history.csv"), trainer.history())?;
            write_steps(a.out.join("steps.csv"), trainer.steps())?;
            eprintln!("last finite parameters saved to {}", a.out.join("checkpoint.json").display());
            return Err(e.into());
        }
    };
    outcome.checkpoint.save(a.out.join("checkpoint.json"))?;
    write_history(a.out.join("history.csv"), &outcome.history)?;
    write_steps(a.out.join("steps.csv"), &outcome.steps)?;
    latent::write_orth_trace(
        a.out.join("orth_trace.csv"),
        &latent::orth_trace(outcome.init_l_orth, outcome.init_sigma_max, &outcome.steps),
    )?;
    let test = trainer
        .prepared()
        .evaluate(&outcome.checkpoint.model, Segment::Test, tcfg.max_eval_windows, tcfg.batch_size)?;
    let m = RunMetrics {
        dataset: dataset_name(&path),
        horizon: outcome.checkpoint.model.config.horizon,
        seed: tcfg.seed,
        mse: test.model.mse,
        mae: test.model.mae,
        mape: test.model.mape,
        rmse: test.model.rmse,
        baseline_mse_repeat_last: test.repeat_last.mse,
        baseline_mse_mean: test.window_mean.mse,
        val_mse: outcome.best_val_mse,
        best_epoch: outcome.best_epoch,
        steps: outcome.steps.len(),
        windows: test.windows,
        standardized: tcfg.standardize,
    };
    write_json(&a.out.join("metrics.json"), &m)?;
    println!(
        "epochs {}  best {}  val mse {:.6}  test mse {:.6}  mae {:.6}  (repeat-last {:.6})",
        outcome.history.len(),
        outcome.best_epoch,
        outcome.best_val_mse,
        m.mse,
        m.mae,
        m.baseline_mse_repeat_last
    );
    if outcome.stopped_early {
        println!("stopped early after {} epochs without improvement", tcfg.patience);
    }
    println!("run written to {}", a.out.display());
    Ok(())
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SegmentArg {
    Train,
    Val,
    Test,
}

impl From<SegmentArg> for Segment {
    fn from(s: SegmentArg) -> Self {
        match s {
            SegmentArg::Train => Segment::Train,
            SegmentArg::Val => Segment::Val,
            SegmentArg::Test => Segment::Test,
        }
    }
}

/// Data-side flags for commands that read a checkpoint.
#[derive(Args)]
struct CheckpointData {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "date")]
    date_column: String,
    #[arg(long)]
    allow_gaps: bool,
    #[arg(long, default_value = "0.6,0.2,0.2")]
    split: String,
    #[arg(long, default_value_t = 32)]
    batch: usize,
}

impl CheckpointData {
    /// Checkpoint, the dataset scaled with the checkpoint's scaler, and the split.
    fn open(&self) -> Result<(Checkpoint, SeriesDataset, SplitSpec)> {
        let ckpt = Checkpoint::load(&self.checkpoint).with_context(|| format!("loading {}", self.checkpoint.display()))?;
        let opts = LoadOptions {
            date_column: self.date_column.clone(),
            allow_gaps: self.allow_gaps,
            freq: None,
        };
        let ds = load_csv(&self.data, &opts).with_context(|| format!("loading {}", self.data.display()))?;
        let cfg = &ckpt.model.config;
        if ds.channels() != cfg.channels || ds.freq.vocab_sizes() != cfg.vocab {
            return Err(pesd::Error::Data(format!(
                "dataset has {} channels at interval {}; checkpoint expects {} channels and calendar vocabulary {:?}",
                ds.channels(),
                ds.freq,
                cfg.channels,
                cfg.vocab
            ))
            .into());
        }
        let ds = match &ckpt.scaler {
            Some(s) => s.transform(&ds),
            None => ds,
        };
        Ok((ckpt, ds, parse_split(&self.split)?))
    }
}

fn windows<'a>(ds: &'a SeriesDataset, split: SplitSpec, which: Segment, cfg: &ModelConfig, stride: usize) -> Result<WindowSet<'a>> {
    let rows = split.segment(ds.len(), which)?;
    Ok(WindowSet::new(ds, rows, cfg.lookback, cfg.horizon, stride).with_context(|| format!("{which:?} segment"))?)
}

#[derive(Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    src: CheckpointData,
    #[arg(long, value_enum, default_value = "test")]
    segment: SegmentArg,
    /// Evaluate at most this many windows, evenly spread.
    #[arg(long)]
    max_windows: Option<usize>,
    /// Also write the report as JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn evaluate(a: EvaluateArgs) -> Result<()> {
    let (ckpt, ds, split) = a.src.open()?;
    let set = windows(&ds, split, a.segment.into(), &ckpt.model.config, 1)?;
    let positions = set.spread(a.max_windows.unwrap_or(usize::MAX));
    let report: EvalReport = pesd::metrics::evaluate(Some(&ckpt.model), &set, &positions, a.src.batch)?;
    let text = serde_json::to_string_pretty(&report)?;
    println!("{text}");
    if let Some(p) = a.out {
        fs::write(p, text + "\n")?;
    }
    Ok(())
}

#[derive(Args)]
pub struct AblateArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Extra stage orders to compare, e.g. s2s1s3,s1s3s2.
    #[arg(long)]
    orders: Option<String>,
    /// Seeds to average over; defaults to the run seed.
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long, default_value = "runs/ablate")]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Serialize)]
struct AblationRun {
    variant: String,
    seed: u64,
    val_mse: f64,
    mse: f64,
    mae: f64,
}

#[derive(Serialize)]
struct AblationRow {
    variant: String,
    horizon: usize,
    mse: f64,
    mae: f64,
    mse_std: f64,
    val_mse: f64,
    seeds: usize,
}

/// Model and training settings of one named variant.
pub fn variants(base: &ModelConfig, train: &TrainConfig, orders: &[pesd::model::StageOrder]) -> Vec<(String, ModelConfig, TrainConfig)> {
    let mut out = vec![("full".to_string(), base.clone(), train.clone())];
    let mut with = |name: &str, f: &dyn Fn(&mut ModelConfig, &mut TrainConfig)| {
        let (mut m, mut t) = (base.clone(), train.clone());
        f(&mut m, &mut t);
        out.push((name.to_string(), m, t));
    };
    with("w/o period", &|m, _| m.no_period = true);
    with("w/o rlc", &|_, t| t.no_rlc = true);
    with("w/o csca", &|m, _| m.no_csca = true);
    with("w/o hierarchy", &|m, _| m.no_hierarchy = true);
    for o in orders.iter().filter(|o| **o != base.order) {
        with(&format!("order {o}"), &|m, _| m.order = o.clone());
    }
    out
}

pub fn ablate(a: AblateArgs) -> Result<()> {
    let settings = Settings::resolve(&a.run)?;
    let (_, ds) = load(&settings)?;
    let base = settings.model_config(&ds)?;
    let tcfg = settings.train_config()?;
    let orders = match &a.orders {
        Some(s) => parse_list::<pesd::model::StageOrder>(s, "stage order")?,
        None => Vec::new(),
    };
    let seeds = match &a.seeds {
        Some(s) => parse_list::<u64>(s, "seed")?,
        None => vec![tcfg.seed],
    };
    if seeds.is_empty() {
        return Err(Usage("no seeds given".into()).into());
    }
    prepare_dir(&a.out, a.force)?;
    fs::write(a.out.join("config.txt"), settings.echo())?;

    let mut runs = Vec::new();
    let mut table = Vec::new();
    for (name, m, t) in variants(&base, &tcfg, &orders) {
        let (mut mses, mut maes, mut vals) = (Vec::new(), Vec::new(), Vec::new());
        for &seed in &seeds {
            let t = TrainConfig { seed, ..t.clone() };
            let mut trainer = Trainer::new(&ds, m.clone(), t.clone())?;
            let out = trainer.run().with_context(|| format!("variant {name}, seed {seed}"))?;
            let test = trainer
                .prepared()
                .evaluate(&out.checkpoint.model, Segment::Test, t.max_eval_windows, t.batch_size)?;
            runs.push(AblationRun {
                variant: name.clone(),
                seed,
                val_mse: out.best_val_mse,
                mse: test.model.mse,
                mae: test.model.mae,
            });
            mses.push(test.model.mse);
            maes.push(test.model.mae);
            vals.push(out.best_val_mse);
        }
        let (mse, mse_std) = mean_std(&mses);
        let row = AblationRow {
            variant: name,
            horizon: m.horizon,
            mse,
            mae: mean_std(&maes).0,
            mse_std,
            val_mse: mean_std(&vals).0,
            seeds: seeds.len(),
        };
        println!("{:<16} mse {:.6}  mae {:.6}  val {:.6}", row.variant, row.mse, row.mae, row.val_mse);
        table.push(row);
    }
    let mut w = csv::Writer::from_path(a.out.join("ablation.csv"))?;
    table.iter().try_for_each(|r| w.serialize(r))?;
    w.flush()?;
    let mut w = csv::Writer::from_path(a.out.join("ablation_runs.csv"))?;
    runs.iter().try_for_each(|r| w.serialize(r))?;
    w.flush()?;
    println!("table written to {}", a.out.join("ablation.csv").display());
    Ok(())
}

#[derive(Args)]
pub struct SweepArgs {
    #[command(flatten)]
    run: RunArgs,
    /// `lambda` (both regularization weights) or `gamma`.
    #[arg(long)]
    param: String,
    /// Comma-separated values.
    #[arg(long)]
    grid: String,
    #[arg(long, default_value = "runs/sweep")]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

pub fn sweep(a: SweepArgs) -> Result<()> {
    let settings = Settings::resolve(&a.run)?;
    let param: SweepParam = a.param.parse().map_err(|e: pesd::Error| Usage(e.to_string()))?;
    let grid = parse_list::<f64>(&a.grid, "grid value")?;
    if grid.is_empty() {
        return Err(Usage("empty grid".into()).into());
    }
    let (_, ds) = load(&settings)?;
    let mcfg = settings.model_config(&ds)?;
    let tcfg = settings.train_config()?;
    prepare_dir(&a.out, a.force)?;
    fs::write(a.out.join("config.txt"), settings.echo())?;
    let rows = run_sweep(&ds, param, &grid, &mcfg, &tcfg)?;
    for r in &rows {
        println!("{param}={:<10} val mse {:.6}  test mse {:.6}", r.value, r.val_mse, r.test_mse);
    }
    write_sweep(a.out.join("sweep.csv"), param, &rows)?;
    Ok(())
}

#[derive(Args)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    src: CheckpointData,
    /// Distance or adjacency matrix CSV (square, or a from,to,cost list).
    #[arg(long)]
    adjacency: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    topk: usize,
    /// Print the band-share table.
    #[arg(long)]
    spectral: bool,
    /// Subtract each latent sequence's mean before the periodogram.
    #[arg(long)]
    remove_mean: bool,
    #[arg(long, default_value_t = 24)]
    gate_width: usize,
    #[arg(long, default_value_t = 0)]
    gate_channel: usize,
    /// Validation windows used per analysis.
    #[arg(long, default_value_t = 256)]
    max_windows: usize,
    /// Run directory holding orth_trace.csv; defaults to the checkpoint's directory.
    #[arg(long)]
    run: Option<PathBuf>,
    #[arg(long, default_value = "runs/analysis")]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

pub fn analyze(a: AnalyzeArgs) -> Result<()> {
    let (ckpt, ds, split) = a.src.open()?;
    let model: &Model = &ckpt.model;
    let cfg = &model.config;
    prepare_dir(&a.out, a.force)?;
    let val = windows(&ds, split, Segment::Val, cfg, 1)?;
    let positions = val.spread(a.max_windows);

    let n = cfg.temporal_lengths()?[0];
    if n >= spectral::MIN_SPECTRAL_LEN {
        let prof = analysis::model_spectral_profile(model, &val, &positions, a.src.batch, a.remove_mean)?;
        spectral::write_spectral(a.out.join("spectral.csv"), &prof)?;
        if a.spectral {
            let (t, v) = (prof.trend_bands.shares(), prof.variation_bands.shares());
            println!("band          trend   variation");
            println!("low  (<0.1)   {:.4}  {:.4}", t.low, v.low);
            println!("mid  [0.1,0.2) {:.4}  {:.4}", t.mid, v.mid);
            println!("high (>=0.2)  {:.4}  {:.4}", t.high, v.high);
        }
    } else {
        println!("spectral: skipped, only {n} patches along time (need {})", spectral::MIN_SPECTRAL_LEN);
    }

    match &a.adjacency {
        Some(p) => {
            if cfg.no_csca {
                println!("topology: skipped, the model has no cross-channel attention");
            } else {
                let truth = topology::build_ground_truth(&topology::read_matrix_csv(p, Some(cfg.channels))?)?;
                let learned = analysis::mean_channel_attention(model, &val, &positions, a.src.batch)?;
                let rep = analysis::topology_match(&learned, &truth, a.topk)?;
                topology::write_topology(a.out.join("topology.json"), &rep)?;
                println!(
                    "topology: top-{} IoU {:.4} ({} hits), random baseline {:.4}",
                    rep.k, rep.iou, rep.hits, rep.random_baseline
                );
            }
        }
        None => println!("topology: skipped, no --adjacency given"),
    }

    let run_dir = a
        .run
        .clone()
        .or_else(|| a.src.checkpoint.parent().map(Path::to_path_buf))
        .unwrap_or_default();
    let trace = run_dir.join("orth_trace.csv");
    if trace.exists() {
        let rows = latent::read_orth_trace(&trace)?;
        latent::write_orth_trace(a.out.join("orth_trace.csv"), &rows)?;
        if let Some(last) = rows.last() {
            println!("orthogonality: final penalty {:.3e}, spectral norm {:.6}", last.l_orth, last.sigma_max);
        }
    } else {
        println!("orthogonality: no training trace at {}", trace.display());
    }

    let factors = analysis::latent_factors(model, &val, &positions, a.src.batch)?;
    let corr = analysis::correlation_matrix(&factors)?;
    latent::write_matrix(a.out.join("corr_matrix.csv"), &corr)?;
    println!("latent factors: max off-diagonal |corr| {:.4}", analysis::max_off_diagonal(&corr));

    if cfg.no_period {
        println!("gate trace: skipped, gating is ablated");
    } else {
        let gate_windows = windows(&ds, split, Segment::Val, cfg, cfg.lookback)?;
        let tr = analysis::gate_trace(model, &gate_windows, a.gate_channel, a.gate_width, Some(a.max_windows))?;
        latent::write_gate_trace(a.out.join("gate_trace.csv"), &tr)?;
        println!("gate trace: {} steps, volatility correlation {:.4}", tr.rows.len(), tr.correlation);
    }
    println!("analysis written to {}", a.out.display());
    Ok(())
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SynthKind {
    /// Independent linear trends with a daily cycle.
    Linear,
    /// A slow trend wave plus a fast shared seasonal wave.
    TwoBand,
    /// Channel pairs that share a latent driver.
    Coupled,
    /// Clipped daily cycle like irradiance.
    Solar,
}

#[derive(Args)]
pub struct SynthArgs {
    #[arg(long, value_enum, default_value = "linear")]
    kind: SynthKind,
    #[arg(long, default_value_t = 4)]
    channels: usize,
    /// Driver pairs for `coupled` (channels = 2 x pairs).
    #[arg(long, default_value_t = 5)]
    pairs: usize,
    #[arg(long, default_value_t = 4000)]
    length: usize,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    #[arg(long, default_value_t = 0.03)]
    trend_freq: f64,
    #[arg(long, default_value_t = 0.3)]
    season_freq: f64,
    /// Falls back to $PESD_SEED, then to 2021.
    #[arg(long)]
    seed: Option<u64>,
    /// Output CSV; the planted components go to `<stem>.truth.json` and the
    /// coupling graph to `<stem>.adjacency.csv`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

pub fn synth(a: SynthArgs) -> Result<()> {
    if a.out.exists() && !a.force {
        return Err(Usage(format!("{} exists; pass --force to overwrite", a.out.display())).into());
    }
    let seed = match a.seed {
        Some(s) => s,
        None => match std::env::var("PESD_SEED") {
            Ok(s) => s.parse().map_err(|_| Usage(format!("bad PESD_SEED '{s}'")))?,
            Err(_) => 2021,
        },
    };
    let mut spec = match a.kind {
        SynthKind::Linear => SynthSpec::linear_trend(a.channels, a.length, a.noise, seed),
        SynthKind::TwoBand => SynthSpec::two_band(a.channels, a.length, a.trend_freq, a.season_freq, a.noise, seed),
        SynthKind::Coupled => SynthSpec::coupled_pairs(a.pairs, a.length, a.noise, seed),
        SynthKind::Solar => SynthSpec::solar_like(a.channels, a.length, seed),
    };
    if matches!(a.kind, SynthKind::Solar) {
        spec.noise_std = a.noise;
    }
    spec.validate().map_err(|e| Usage(e.to_string()))?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let series = generate(&spec)?;
    let sidecar = series.write(&a.out)?;
    let adjacency = a.out.with_extension("adjacency.csv");
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(&adjacency)?;
    for row in spec.coupling_graph() {
        w.write_record(row.iter().map(u8::to_string))?;
    }
    w.flush()?;
    println!(
        "{} rows x {} channels written to {} (truth {}, adjacency {})",
        spec.length,
        spec.channels,
        a.out.display(),
        sidecar.display(),
        adjacency.display()
    );
    Ok(())
}
