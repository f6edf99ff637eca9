//! The forecasting network: periodic gating, patch embedding, the staged
//! encoder and the linear head.

mod checkpoint;
mod config;
pub mod encoder;
pub mod head;
pub mod periodic;

pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use config::{patch_count, ModelConfig, PatchPad, Stage, StageOrder};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::data::WindowBatch;
use crate::error::{Error, Result};
use crate::params::{normal, orthonormal_columns, uniform_fan_in, Bound, ParamStore};
use crate::tensor::Tensor;
use encoder::{AttnParams, CscaParams};

/// Intermediate tensors of one hierarchy level.
#[derive(Clone, Debug, Default)]
pub struct LevelOutputs {
    pub input: Option<Var>,
    pub trend: Option<Var>,
    pub det: Option<Var>,
    pub z1: Option<Var>,
    pub z2: Option<Var>,
}

/// Everything a forward pass leaves on the tape that analyses need.
#[derive(Clone, Debug)]
pub struct Forward {
    /// `B x O x C`, physical scale.
    pub y_hat: Var,
    /// `B x L x 1`, absent when gating is ablated.
    pub gate: Option<Var>,
    pub z0: Var,
    pub levels: Vec<LevelOutputs>,
    pub csca: Option<encoder::CscaOutputs>,
    pub z_final: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    /// Fresh parameters: projections `U(+-1/sqrt(fan_in))`, calendar tables
    /// `N(0, 0.02)`, layer-norm gain 1 and bias 0, biases 0, and the latent
    /// projection with orthonormal columns.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let (d, c) = (config.d_model, config.channels);
        if !config.no_period {
            for (k, &v) in config.vocab.iter().enumerate() {
                p.insert(format!("period.emb.{k}"), normal(&mut rng, &[v, config.d_emb], 0.02));
            }
            p.insert("period.fuse", uniform_fan_in(&mut rng, config.vocab.len() * config.d_emb, d));
            p.insert("period.gate.w", uniform_fan_in(&mut rng, d, 1));
            p.insert("period.gate.b", Tensor::zeros([1]));
        }
        p.insert("patch.w", uniform_fan_in(&mut rng, config.patch_len, d));
        for level in 0..config.levels() {
            let pre = format!("enc.{level}");
            for name in ["wq", "wk", "wv", "wo"] {
                p.insert(format!("{pre}.attn.{name}"), uniform_fan_in(&mut rng, d, d));
            }
            p.insert(format!("{pre}.attn.ln.gain"), Tensor::full([d], 1.0));
            p.insert(format!("{pre}.attn.ln.bias"), Tensor::zeros([d]));
            if !config.no_hierarchy {
                p.insert(format!("{pre}.sample.conv"), uniform_fan_in(&mut rng, 3 * d, d));
                p.insert(format!("{pre}.sample.agg"), uniform_fan_in(&mut rng, 2 * d, d));
            }
        }
        if !config.no_csca {
            for name in ["wq", "wk", "wv"] {
                p.insert(format!("csca.{name}"), uniform_fan_in(&mut rng, d, d));
            }
        }
        let width = config.n_eff() * d;
        p.insert("head.w", uniform_fan_in(&mut rng, width, config.horizon));
        if config.head_bias {
            p.insert("head.b", Tensor::zeros([config.horizon]));
        }
        p.insert("rlc.w", orthonormal_columns(&mut rng, 2 * c, config.k_factors)?);
        Ok(Model { config, params: p })
    }

    pub fn bind<'a>(&'a self, tape: &mut Tape) -> Bound<'a> {
        self.params.bind(tape)
    }

    /// Records the full forward pass of `batch` on `tape`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, batch: &WindowBatch) -> Result<Forward> {
        let cfg = &self.config;
        let (b, l, c) = (batch.batch_size(), batch.lookback(), batch.channels());
        if l != cfg.lookback || c != cfg.channels || batch.n_freq != cfg.vocab.len() {
            return Err(Error::shape(
                "forward",
                format!(
                    "batch has L={l}, C={c}, {} calendar features; model expects L={}, C={}, {}",
                    batch.n_freq,
                    cfg.lookback,
                    cfg.channels,
                    cfg.vocab.len()
                ),
            ));
        }
        let x = tape.constant(batch.x_norm.clone());
        let gate = if cfg.no_period {
            None
        } else {
            let tables = (0..cfg.vocab.len())
                .map(|k| p.var(&format!("period.emb.{k}")))
                .collect::<Result<Vec<_>>>()?;
            let e = periodic::embed_time(tape, &tables, p.var("period.fuse")?, &batch.marks, b, l)?;
            Some(periodic::compute_gate(tape, e, p.var("period.gate.w")?, p.var("period.gate.b")?)?)
        };
        let x = match gate {
            Some(g) => periodic::modulate(tape, x, g, cfg.gamma)?,
            None => x,
        };
        let z0 = periodic::patchify(tape, x, p.var("patch.w")?, cfg.patch_len, cfg.stride, cfg.patch_pad)?;

        let mut z = z0;
        let mut levels = Vec::with_capacity(cfg.levels());
        let mut csca_out = None;
        for level in 0..cfg.levels() {
            let last = level + 1 == cfg.levels();
            let pre = format!("enc.{level}");
            let mut out = LevelOutputs {
                input: Some(z),
                ..LevelOutputs::default()
            };
            for stage in cfg.order.stages() {
                match stage {
                    Stage::S1 => {
                        let (trend, det) = encoder::smooth_and_detrend(tape, z, cfg.smooth_kernel)?;
                        let ap = AttnParams {
                            wq: p.var(&format!("{pre}.attn.wq"))?,
                            wk: p.var(&format!("{pre}.attn.wk"))?,
                            wv: p.var(&format!("{pre}.attn.wv"))?,
                            wo: p.var(&format!("{pre}.attn.wo"))?,
                            ln_gain: p.var(&format!("{pre}.attn.ln.gain"))?,
                            ln_bias: p.var(&format!("{pre}.attn.ln.bias"))?,
                        };
                        z = encoder::int_attention(tape, &ap, z, det, cfg.heads)?;
                        out.trend = Some(trend);
                        out.det = Some(det);
                        out.z1 = Some(z);
                    }
                    Stage::S2 if !cfg.no_hierarchy => {
                        let conv = p.var(&format!("{pre}.sample.conv"))?;
                        let agg = p.var(&format!("{pre}.sample.agg"))?;
                        z = encoder::patch_sample(tape, conv, agg, z)?;
                        out.z2 = Some(z);
                    }
                    Stage::S3 if last && !cfg.no_csca => {
                        let cp = CscaParams {
                            wq: p.var("csca.wq")?,
                            wk: p.var("csca.wk")?,
                            wv: p.var("csca.wv")?,
                        };
                        let o = encoder::csca(tape, &cp, z)?;
                        z = o.z_final;
                        csca_out = Some(o);
                    }
                    _ => {}
                }
            }
            levels.push(out);
        }
        let z_final = z;

        let flat = head::flatten(tape, z_final)?;
        let bias = if cfg.head_bias { Some(p.var("head.b")?) } else { None };
        let h = head::project(tape, flat, p.var("head.w")?, bias)?;
        let mu = tape.constant(batch.mu.clone());
        let sigma = tape.constant(batch.sigma.clone());
        let y_hat = head::denormalize(tape, h, mu, sigma)?;
        Ok(Forward {
            y_hat,
            gate,
            z0,
            levels,
            csca: csca_out,
            z_final,
        })
    }

    /// Forecast for `batch` in physical scale, `B x O x C`.
    pub fn predict(&self, batch: &WindowBatch) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape);
        let f = self.forward(&mut tape, &p, batch)?;
        Ok(tape.value(f.y_hat).clone())
    }
}
