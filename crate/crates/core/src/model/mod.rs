//! The captioning network: snippet selector, action-object predictor,
//! transformer encoder, gated snippet memory and transformer decoder.
//!
//! A [`Model`] owns its configuration and a [`ParamStore`]. Every forward
//! method records onto a caller-supplied [`Graph`], so the same model can be
//! evaluated against a perturbed copy of its parameters during gradient
//! checking.

mod forward;
mod layers;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::vocab::NUM_RESERVED;
use crate::data::KNOWLEDGE_DIM;
use crate::error::{Error, Result};
use crate::numerics::{ParamId, ParamStore, Real, Tensor};

pub use forward::{apply_gates, SnippetGraph, SnippetInputs, SnippetMemoryState};
use layers::{Attention, DecoderLayer, EncoderLayer, FeedForward, Linear, Norm};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub context_dim: usize,
    pub d_model: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub actobj_dim: usize,
    pub max_frames: usize,
    pub max_snippets: usize,
    pub max_sentence_len: usize,
    /// Frames averaged into one visual token.
    pub token_stride: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            feature_dim: 4096,
            context_dim: KNOWLEDGE_DIM,
            d_model: 512,
            heads: 8,
            enc_layers: 3,
            dec_layers: 3,
            ffn_dim: 2048,
            vocab_size: 3260,
            actobj_dim: 677,
            max_frames: 150,
            max_snippets: 20,
            max_sentence_len: 150,
            token_stride: 1,
            dropout: 0.1,
        }
    }
}

impl ModelConfig {
    /// The gradient-check configuration: `d_model` 16, 2 heads, one encoder
    /// and one decoder layer, vocabulary 20, no dropout.
    pub fn tiny() -> Self {
        ModelConfig {
            feature_dim: 6,
            d_model: 16,
            heads: 2,
            enc_layers: 1,
            dec_layers: 1,
            ffn_dim: 32,
            vocab_size: 20,
            actobj_dim: 5,
            dropout: 0.0,
            ..Self::default()
        }
    }

    /// Small configuration for the synthetic experiments.
    pub fn desk(feature_dim: usize, vocab_size: usize, actobj_dim: usize) -> Self {
        ModelConfig {
            feature_dim,
            d_model: 32,
            heads: 2,
            enc_layers: 1,
            dec_layers: 1,
            ffn_dim: 64,
            vocab_size,
            actobj_dim,
            dropout: 0.1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("feature_dim", self.feature_dim),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("enc_layers", self.enc_layers),
            ("dec_layers", self.dec_layers),
            ("ffn_dim", self.ffn_dim),
            ("actobj_dim", self.actobj_dim),
            ("max_frames", self.max_frames),
            ("max_snippets", self.max_snippets),
            ("max_sentence_len", self.max_sentence_len),
            ("token_stride", self.token_stride),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.context_dim != KNOWLEDGE_DIM {
            return Err(Error::config("context_dim", format!("must be {KNOWLEDGE_DIM}")));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::config(
                "heads",
                format!("d_model {} is not divisible by {} heads", self.d_model, self.heads),
            ));
        }
        if self.vocab_size <= NUM_RESERVED {
            return Err(Error::config("vocab_size", "must exceed the 4 reserved tokens"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout", "must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Encoder tokens for `num_frames` frames, including the context token.
    pub fn encoded_len(&self, num_frames: usize) -> usize {
        num_frames.div_ceil(self.token_stride) + 1
    }

    fn positions(&self) -> usize {
        self.encoded_len(self.max_frames).max(self.max_sentence_len + 2)
    }
}

/// Creates parameters on first build, or re-binds existing ones by name.
struct Builder<'a, F: Real> {
    store: &'a mut ParamStore<F>,
    rng: Option<ChaCha8Rng>,
}

impl<F: Real> Builder<'_, F> {
    fn fetch(&mut self, name: &str, shape: [usize; 2]) -> Result<ParamId> {
        let id = self
            .store
            .id(name)
            .ok_or_else(|| Error::invalid(format!("parameter {name} is missing")))?;
        let t = self.store.get(id);
        if t.rows() != shape[0] || t.cols() != shape[1] || t.len() != shape[0] * shape[1] {
            return Err(Error::Shape {
                op: "parameter binding",
                lhs: t.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        Ok(id)
    }

    fn weight(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<ParamId> {
        match &mut self.rng {
            Some(rng) => self.store.insert_xavier(name, fan_in, fan_out, rng),
            None => self.fetch(name, [fan_in, fan_out]),
        }
    }

    fn bias(&mut self, name: &str, n: usize) -> Result<ParamId> {
        match self.rng {
            Some(_) => self.store.insert_zeros(name, &[1, n]),
            None => self.fetch(name, [1, n]),
        }
    }

    fn ones(&mut self, name: &str, n: usize) -> Result<ParamId> {
        match self.rng {
            Some(_) => self.store.insert_full(name, &[1, n], F::one()),
            None => self.fetch(name, [1, n]),
        }
    }
}

/// Three fully connected layers with tanh between them.
#[derive(Clone, Debug)]
struct Mlp3 {
    l1: Linear,
    l2: Linear,
    l3: Linear,
}

#[derive(Clone, Debug)]
struct ParamIds {
    /// First selector layer split into frame and context blocks; applying the
    /// context block once and broadcasting it equals tiling the context.
    sel_w1_frame: ParamId,
    sel_w1_ctx: ParamId,
    sel_b1: ParamId,
    sel_l2: Linear,
    sel_l3: Linear,
    actobj: Mlp3,
    frame_in: Linear,
    context_in: Linear,
    encoder: Vec<EncoderLayer>,
    mem_query: ParamId,
    mem_erase: Linear,
    mem_add: Linear,
    token_embedding: ParamId,
    decoder: Vec<DecoderLayer>,
    final_norm: Norm,
    output: Linear,
}

impl ParamIds {
    fn build<F: Real>(c: &ModelConfig, b: &mut Builder<'_, F>) -> Result<Self> {
        let (d, ctx3) = (c.d_model, 3 * c.context_dim);
        let linear = |b: &mut Builder<'_, F>, name: &str, i: usize, o: usize| -> Result<Linear> {
            Ok(Linear {
                w: b.weight(&format!("{name}.w"), i, o)?,
                b: b.bias(&format!("{name}.b"), o)?,
            })
        };
        let norm = |b: &mut Builder<'_, F>, name: &str| -> Result<Norm> {
            Ok(Norm {
                gamma: b.ones(&format!("{name}.gamma"), d)?,
                beta: b.bias(&format!("{name}.beta"), d)?,
            })
        };
        let attention = |b: &mut Builder<'_, F>, name: &str| -> Result<Attention> {
            Ok(Attention {
                wq: b.weight(&format!("{name}.wq"), d, d)?,
                wk: b.weight(&format!("{name}.wk"), d, d)?,
                wv: b.weight(&format!("{name}.wv"), d, d)?,
                out: linear(b, &format!("{name}.out"), d, d)?,
                heads: c.heads,
            })
        };
        let ffn = |b: &mut Builder<'_, F>, name: &str| -> Result<FeedForward> {
            Ok(FeedForward {
                l1: linear(b, &format!("{name}.1"), d, c.ffn_dim)?,
                l2: linear(b, &format!("{name}.2"), c.ffn_dim, d)?,
            })
        };

        let sel_w1_frame = b.weight("selector.1.w_frame", c.feature_dim, d)?;
        let sel_w1_ctx = b.weight("selector.1.w_ctx", ctx3, d)?;
        let sel_b1 = b.bias("selector.1.b", d)?;
        let sel_l2 = linear(b, "selector.2", d, d)?;
        let sel_l3 = linear(b, "selector.3", d, 1)?;
        let actobj = Mlp3 {
            l1: linear(b, "actobj.1", c.feature_dim + ctx3, d)?,
            l2: linear(b, "actobj.2", d, d)?,
            l3: linear(b, "actobj.3", d, c.actobj_dim)?,
        };
        let frame_in = linear(b, "encoder.frame_in", c.feature_dim, d)?;
        let context_in = linear(b, "encoder.context_in", c.actobj_dim + ctx3, d)?;
        let encoder = (0..c.enc_layers)
            .map(|l| {
                Ok(EncoderLayer {
                    norm1: norm(b, &format!("encoder.{l}.norm1"))?,
                    attn: attention(b, &format!("encoder.{l}.attn"))?,
                    norm2: norm(b, &format!("encoder.{l}.norm2"))?,
                    ffn: ffn(b, &format!("encoder.{l}.ffn"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mem_query = b.weight("memory.query", d, d)?;
        let mem_erase = linear(b, "memory.erase", d, d)?;
        let mem_add = linear(b, "memory.add", d, d)?;
        let token_embedding = b.weight("decoder.embedding", c.vocab_size, d)?;
        let decoder = (0..c.dec_layers)
            .map(|l| {
                Ok(DecoderLayer {
                    norm1: norm(b, &format!("decoder.{l}.norm1"))?,
                    self_attn: attention(b, &format!("decoder.{l}.self_attn"))?,
                    norm2: norm(b, &format!("decoder.{l}.norm2"))?,
                    cross_attn: attention(b, &format!("decoder.{l}.cross_attn"))?,
                    norm3: norm(b, &format!("decoder.{l}.norm3"))?,
                    ffn: ffn(b, &format!("decoder.{l}.ffn"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let final_norm = norm(b, "decoder.final_norm")?;
        let output = linear(b, "decoder.output", d, c.vocab_size)?;
        Ok(ParamIds {
            sel_w1_frame,
            sel_w1_ctx,
            sel_b1,
            sel_l2,
            sel_l3,
            actobj,
            frame_in,
            context_in,
            encoder,
            mem_query,
            mem_erase,
            mem_add,
            token_embedding,
            decoder,
            final_norm,
            output,
        })
    }
}

/// Configuration, parameters and the fixed positional-encoding table.
#[derive(Clone, Debug)]
pub struct Model<F: Real = f32> {
    config: ModelConfig,
    pub params: ParamStore<F>,
    ids: ParamIds,
    positional: Vec<f64>,
}

/// Sinusoidal table `[positions, d]`.
pub fn sinusoidal_table(positions: usize, d: usize) -> Vec<f64> {
    let mut pe = vec![0.0; positions * d];
    for pos in 0..positions {
        for i in 0..d {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 / rate;
            pe[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}

impl<F: Real> Model<F> {
    /// Xavier-uniform weights and zero biases drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let ids = ParamIds::build(
            &config,
            &mut Builder {
                store: &mut params,
                rng: Some(ChaCha8Rng::seed_from_u64(seed)),
            },
        )?;
        Ok(Self::assemble(config, params, ids))
    }

    /// Binds an existing parameter store (e.g. from a checkpoint) to `config`.
    pub fn from_params(config: ModelConfig, mut params: ParamStore<F>) -> Result<Self> {
        config.validate()?;
        let ids = ParamIds::build(&config, &mut Builder { store: &mut params, rng: None })?;
        let expected = Self::new(config.clone(), 0)?.params.len();
        if params.len() != expected {
            return Err(Error::invalid(format!(
                "parameter store has {} tensors, configuration expects {expected}",
                params.len()
            )));
        }
        if let Some((_, name, _)) = params.iter().find(|(_, _, t)| !t.is_finite()) {
            return Err(Error::invalid(format!("parameter {name} is not finite")));
        }
        Ok(Self::assemble(config, params, ids))
    }

    fn assemble(config: ModelConfig, params: ParamStore<F>, ids: ParamIds) -> Self {
        let positional = sinusoidal_table(config.positions(), config.d_model);
        Model { config, params, ids, positional }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Same model in another precision.
    pub fn cast<G: Real>(&self) -> Model<G> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            ids: self.ids.clone(),
            positional: self.positional.clone(),
        }
    }

    /// Same architecture bound to a different store of identical layout.
    pub fn with_params(&self, params: ParamStore<F>) -> Result<Self> {
        Self::from_params(self.config.clone(), params)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<F>> {
        self.params.id(name).map(|id| self.params.get(id))
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        self.params.id(name).map(|id| self.params.get_mut(id))
    }

    /// Parameter names with the given prefix, e.g. `"actobj.3"`.
    pub fn param_names(&self, prefix: &str) -> Vec<String> {
        self.params
            .iter()
            .filter(|(_, name, _)| name.starts_with(prefix))
            .map(|(_, name, _)| name.to_string())
            .collect()
    }
}

#[cfg(test)]
mod tests;
