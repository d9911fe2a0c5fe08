use super::Model;
use crate::error::{Error, Result};
use crate::knowledge::KnowledgeContext;
use crate::numerics::{Graph, Real, Tensor, Var};

pub(crate) fn to_real<F: Real>(xs: &[f32]) -> Vec<F> {
    xs.iter().map(|&x| F::from_f32(x).expect("f32 conversion")).collect()
}

/// Inputs for captioning one snippet of a video.
#[derive(Clone, Copy, Debug)]
pub struct SnippetInputs<'a> {
    /// Row-major `[num_frames, feature_dim]`.
    pub features: &'a [f32],
    pub num_frames: usize,
    pub context: &'a KnowledgeContext,
    /// Per-frame mask used to pull features instead of the selector's
    /// prediction (ground-truth proposals).
    pub mask_override: Option<&'a [f32]>,
}

/// Nodes recorded while encoding one snippet.
#[derive(Clone, Copy, Debug)]
pub struct SnippetGraph {
    /// `[T, 1]` selector logits.
    pub selector_logits: Var,
    /// `[T, 1]` frame probabilities `n_i`.
    pub selection: Var,
    /// `[T, D]` masked features `V_i`.
    pub masked: Var,
    /// `[1, A]` action-object logits.
    pub actobj_logits: Var,
    /// `[1, A]` action-object probabilities `a_i`.
    pub actobj: Var,
    /// `[L, d]` encoded tokens `V_e`, also the initial memory.
    pub encoded: Var,
}

/// Decoder-side memory: one row per encoded token.
#[derive(Clone, Debug, PartialEq)]
pub struct SnippetMemoryState<F> {
    pub memory: Tensor<F>,
    pub step: usize,
}

/// `M'_j = M_j ⊙ (1 − w_j e) + w_j u` for write weights `w` over slots,
/// erase gate `e` and add vector `u`.
pub fn apply_gates<F: Real>(memory: &Tensor<F>, w: &[F], e: &[F], u: &[F]) -> Result<Tensor<F>> {
    let (slots, d) = (memory.rows(), memory.cols());
    if w.len() != slots || e.len() != d || u.len() != d {
        return Err(Error::Shape {
            op: "apply_gates",
            lhs: vec![slots, d],
            rhs: vec![w.len(), e.len(), u.len()],
        });
    }
    let mut out = memory.data().to_vec();
    for j in 0..slots {
        for k in 0..d {
            let x = &mut out[j * d + k];
            *x = *x * (F::one() - w[j] * e[k]) + w[j] * u[k];
        }
    }
    Tensor::matrix(slots, d, out)
}

impl<F: Real> Model<F> {
    /// `[1, 3·384]` constant holding `[m | g | h]`.
    pub fn context_var(&self, g: &mut Graph<'_, F>, ctx: &KnowledgeContext) -> Result<Var> {
        let width = 3 * self.config.context_dim;
        let flat = ctx.concat();
        if flat.len() != width {
            return Err(Error::Shape {
                op: "knowledge context",
                lhs: vec![flat.len()],
                rhs: vec![width],
            });
        }
        g.constant_matrix(1, width, to_real(&flat))
    }

    pub fn features_var(&self, g: &mut Graph<'_, F>, features: &[f32], num_frames: usize) -> Result<Var> {
        let d = self.config.feature_dim;
        if num_frames == 0 || num_frames > self.config.max_frames {
            return Err(Error::invalid(format!(
                "{num_frames} frames is outside 1..={}",
                self.config.max_frames
            )));
        }
        if features.len() != num_frames * d {
            return Err(Error::Shape {
                op: "frame features",
                lhs: vec![features.len()],
                rhs: vec![num_frames, d],
            });
        }
        g.constant_matrix(num_frames, d, to_real(features))
    }

    /// Per-frame selector logits `[T, 1]`: each frame row joined with the
    /// context, through three layers.
    pub fn selector_logits(&self, g: &mut Graph<'_, F>, frames: Var, ctx: Var) -> Result<Var> {
        let ids = &self.ids;
        let (wf, wc, b1) = (g.param(ids.sel_w1_frame), g.param(ids.sel_w1_ctx), g.param(ids.sel_b1));
        let per_frame = g.matmul(frames, wf)?;
        let shared = g.matmul(ctx, wc)?;
        let shared = g.add(shared, b1)?;
        let h = g.add_row(per_frame, shared)?;
        let h = g.tanh(h)?;
        let h = ids.sel_l2.forward(g, h)?;
        let h = g.tanh(h)?;
        ids.sel_l3.forward(g, h)
    }

    /// `V_i`: row `t` of `frames` scaled by `mask[t]`.
    pub fn apply_snippet_mask(&self, g: &mut Graph<'_, F>, frames: Var, mask: Var) -> Result<Var> {
        g.scale_rows(frames, mask)
    }

    /// Action-object logits `[1, A]` from the frame-pooled masked features and the context.
    pub fn actobj_logits(&self, g: &mut Graph<'_, F>, masked: Var, ctx: Var) -> Result<Var> {
        let pooled = g.mean_rows(masked)?;
        let x = g.concat_cols(&[pooled, ctx])?;
        let mlp = &self.ids.actobj;
        let h = mlp.l1.forward(g, x)?;
        let h = g.tanh(h)?;
        let h = mlp.l2.forward(g, h)?;
        let h = g.tanh(h)?;
        mlp.l3.forward(g, h)
    }

    fn positional(&self, g: &mut Graph<'_, F>, rows: usize) -> Result<Var> {
        let d = self.config.d_model;
        let data = self.positional[..rows * d].iter().map(|&v| F::from_f64_lossy(v)).collect();
        g.constant_matrix(rows, d, data)
    }

    /// Input embedding of the encoder: one context token projected from
    /// `[a_i | m | g | h]`, then one token per `token_stride` frames, plus
    /// positional encoding.
    pub fn encoder_input(&self, g: &mut Graph<'_, F>, masked: Var, actobj: Var, ctx: Var) -> Result<Var> {
        let pooled = g.pool_rows(masked, self.config.token_stride)?;
        let frames = self.ids.frame_in.forward(g, pooled)?;
        let joined = g.concat_cols(&[actobj, ctx])?;
        let context = self.ids.context_in.forward(g, joined)?;
        let tokens = g.concat_rows(&[context, frames])?;
        let pe = self.positional(g, g.shape(tokens).0)?;
        g.add(tokens, pe)
    }

    /// Runs the encoder stack over an input embedding.
    pub fn encoder_layers(&self, g: &mut Graph<'_, F>, mut x: Var) -> Result<Var> {
        for layer in &self.ids.encoder {
            x = layer.forward(g, x)?;
        }
        Ok(x)
    }

    /// Selector, mask, action-object predictor and encoder for one snippet.
    /// With `detach_actobj_input` the encoder sees `a_i` without a gradient path.
    pub fn encode_snippet(
        &self,
        g: &mut Graph<'_, F>,
        inputs: &SnippetInputs<'_>,
        detach_actobj_input: bool,
    ) -> Result<SnippetGraph> {
        let frames = self.features_var(g, inputs.features, inputs.num_frames)?;
        let ctx = self.context_var(g, inputs.context)?;
        let selector_logits = self.selector_logits(g, frames, ctx)?;
        let selection = g.sigmoid(selector_logits)?;
        let mask = match inputs.mask_override {
            Some(m) => {
                if m.len() != inputs.num_frames {
                    return Err(Error::Shape {
                        op: "snippet mask",
                        lhs: vec![m.len()],
                        rhs: vec![inputs.num_frames],
                    });
                }
                g.constant_matrix(inputs.num_frames, 1, to_real(m))?
            }
            None => selection,
        };
        let masked = self.apply_snippet_mask(g, frames, mask)?;
        let actobj_logits = self.actobj_logits(g, masked, ctx)?;
        let actobj = g.sigmoid(actobj_logits)?;
        let a_in = if detach_actobj_input { g.detach(actobj)? } else { actobj };
        let x = self.encoder_input(g, masked, a_in, ctx)?;
        let encoded = self.encoder_layers(g, x)?;
        Ok(SnippetGraph {
            selector_logits,
            selection,
            masked,
            actobj_logits,
            actobj,
            encoded,
        })
    }

    /// Gated erase/add write of `query` (`[1, d]`) into `memory` (`[slots, d]`).
    pub fn memory_update_var(&self, g: &mut Graph<'_, F>, memory: Var, query: Var) -> Result<Var> {
        let wq = g.param(self.ids.mem_query);
        let projected = g.matmul(query, wq)?;
        let scores = g.matmul_nt(projected, memory)?;
        let w = g.softmax(scores, false)?;
        let e = self.ids.mem_erase.forward(g, query)?;
        let e = g.sigmoid(e)?;
        let u = self.ids.mem_add.forward(g, query)?;
        let u = g.tanh(u)?;
        let wt = g.transpose(w)?;
        let erase = g.matmul(wt, e)?;
        let keep = g.affine(erase, -F::one(), F::one())?;
        let kept = g.mul(memory, keep)?;
        let added = g.matmul(wt, u)?;
        g.add(kept, added)
    }

    /// Top decoder layer output `[len, d]` for every prefix position, before the final norm.
    pub fn decoder_states(&self, g: &mut Graph<'_, F>, prefix: &[usize], memory: Var) -> Result<Var> {
        if prefix.is_empty() {
            return Err(Error::invalid("decoder prefix is empty"));
        }
        if prefix.len() > self.config.max_sentence_len + 1 {
            return Err(Error::invalid(format!(
                "decoder prefix of {} tokens exceeds max_sentence_len {}",
                prefix.len(),
                self.config.max_sentence_len
            )));
        }
        let table = g.param(self.ids.token_embedding);
        let emb = g.embedding(table, prefix)?;
        let pe = self.positional(g, prefix.len())?;
        let mut x = g.add(emb, pe)?;
        for layer in &self.ids.decoder {
            x = layer.forward(g, x, memory)?;
        }
        Ok(x)
    }

    /// One decoder pass over `prefix` against `memory`. Returns the `[1, V]`
    /// next-token logits and the `[1, d]` normalized top-layer state of the
    /// last position.
    pub fn decoder_step(&self, g: &mut Graph<'_, F>, prefix: &[usize], memory: Var) -> Result<(Var, Var)> {
        let x = self.decoder_states(g, prefix, memory)?;
        let last = g.slice_rows(x, prefix.len() - 1, prefix.len())?;
        let state = self.ids.final_norm.forward(g, last)?;
        let logits = self.ids.output.forward(g, state)?;
        Ok((logits, state))
    }

    /// Teacher-forced decoding of `tokens = [BOS, w_1, ..., EOS]`: the
    /// prediction of `tokens[j]` sees `tokens[..j]` and the memory after `j - 1`
    /// writes. Returns `[J, V]` logits for the `J = tokens.len() - 1` targets.
    pub fn teacher_forced_logits(&self, g: &mut Graph<'_, F>, tokens: &[usize], encoded: Var) -> Result<Var> {
        if tokens.len() < 2 {
            return Err(Error::invalid("a target sentence needs at least BOS and EOS"));
        }
        let steps = tokens.len() - 1;
        let mut memory = encoded;
        let mut rows = Vec::with_capacity(steps);
        for j in 1..=steps {
            let (logits, state) = self.decoder_step(g, &tokens[..j], memory)?;
            rows.push(logits);
            if j < steps {
                memory = self.memory_update_var(g, memory, state)?;
            }
        }
        g.concat_rows(&rows)
    }

    // ---- value-level wrappers -------------------------------------------

    /// Frame probabilities `n_i` for a video under `ctx`.
    pub fn snippet_selector(&self, features: &[f32], num_frames: usize, ctx: &KnowledgeContext) -> Result<Vec<F>> {
        let mut g = Graph::new(&self.params);
        let frames = self.features_var(&mut g, features, num_frames)?;
        let c = self.context_var(&mut g, ctx)?;
        let logits = self.selector_logits(&mut g, frames, c)?;
        let n = g.sigmoid(logits)?;
        Ok(g.value(n).to_vec())
    }

    /// Action-object probabilities for already-masked features `V_i`.
    pub fn action_object(&self, masked: &[f32], num_frames: usize, ctx: &KnowledgeContext) -> Result<Vec<F>> {
        let mut g = Graph::new(&self.params);
        let v = self.features_var(&mut g, masked, num_frames)?;
        let c = self.context_var(&mut g, ctx)?;
        let logits = self.actobj_logits(&mut g, v, c)?;
        let a = g.sigmoid(logits)?;
        Ok(g.value(a).to_vec())
    }

    /// Encoder output `V_e` for masked features and action-object probabilities.
    pub fn encode(&self, masked: &[f32], num_frames: usize, actobj: &[F], ctx: &KnowledgeContext) -> Result<Tensor<F>> {
        let mut g = Graph::new(&self.params);
        let v = self.features_var(&mut g, masked, num_frames)?;
        let c = self.context_var(&mut g, ctx)?;
        let a = g.constant_matrix(1, actobj.len(), actobj.to_vec())?;
        let x = self.encoder_input(&mut g, v, a, c)?;
        let e = self.encoder_layers(&mut g, x)?;
        Ok(g.tensor(e))
    }

    /// One gated memory write.
    pub fn memory_update(&self, state: &SnippetMemoryState<F>, query: &[F]) -> Result<SnippetMemoryState<F>> {
        if !query.iter().all(|q| q.is_finite()) {
            return Err(Error::NonFinite("memory query"));
        }
        let mut g = Graph::new(&self.params);
        let m = g.constant(&state.memory)?;
        let q = g.constant_matrix(1, query.len(), query.to_vec())?;
        let updated = self.memory_update_var(&mut g, m, q)?;
        Ok(SnippetMemoryState {
            memory: g.tensor(updated),
            step: state.step + 1,
        })
    }
}
