use crate::error::Result;
use crate::numerics::{Graph, ParamId, Real, Var};

#[derive(Clone, Debug)]
pub(super) struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.w), g.param(self.b));
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

#[derive(Clone, Debug)]
pub(super) struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        let (gamma, beta) = (g.param(self.gamma), g.param(self.beta));
        g.layer_norm(x, gamma, beta)
    }
}

#[derive(Clone, Debug)]
pub(super) struct Attention {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub out: Linear,
    pub heads: usize,
}

impl Attention {
    /// Scaled dot-product multi-head attention of `query` rows over `memory` rows.
    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, query: Var, memory: Var, causal: bool) -> Result<Var> {
        let (wq, wk, wv) = (g.param(self.wq), g.param(self.wk), g.param(self.wv));
        let q = g.matmul(query, wq)?;
        let k = g.matmul(memory, wk)?;
        let v = g.matmul(memory, wv)?;
        let d = g.shape(q).1;
        let dh = d / self.heads;
        let scale = F::one() / F::from_usize(dh).unwrap().sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let qh = g.slice_cols(q, lo, hi)?;
            let kh = g.slice_cols(k, lo, hi)?;
            let vh = g.slice_cols(v, lo, hi)?;
            let scores = g.matmul_nt(qh, kh)?;
            let scores = g.scale(scores, scale)?;
            let weights = g.softmax(scores, causal)?;
            heads.push(g.matmul(weights, vh)?);
        }
        let joined = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
        self.out.forward(g, joined)
    }
}

#[derive(Clone, Debug)]
pub(super) struct FeedForward {
    pub l1: Linear,
    pub l2: Linear,
}

impl FeedForward {
    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        let h = self.l1.forward(g, x)?;
        let h = g.gelu(h)?;
        self.l2.forward(g, h)
    }
}

/// `x + dropout(sublayer)`.
fn residual<F: Real>(g: &mut Graph<'_, F>, x: Var, update: Var) -> Result<Var> {
    let update = g.dropout(update)?;
    g.add(x, update)
}

#[derive(Clone, Debug)]
pub(super) struct EncoderLayer {
    pub norm1: Norm,
    pub attn: Attention,
    pub norm2: Norm,
    pub ffn: FeedForward,
}

impl EncoderLayer {
    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        let h = self.norm1.forward(g, x)?;
        let a = self.attn.forward(g, h, h, false)?;
        let x = residual(g, x, a)?;
        let h = self.norm2.forward(g, x)?;
        let f = self.ffn.forward(g, h)?;
        residual(g, x, f)
    }
}

#[derive(Clone, Debug)]
pub(super) struct DecoderLayer {
    pub norm1: Norm,
    pub self_attn: Attention,
    pub norm2: Norm,
    pub cross_attn: Attention,
    pub norm3: Norm,
    pub ffn: FeedForward,
}

impl DecoderLayer {
    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, x: Var, memory: Var) -> Result<Var> {
        let h = self.norm1.forward(g, x)?;
        let a = self.self_attn.forward(g, h, h, true)?;
        let x = residual(g, x, a)?;
        let h = self.norm2.forward(g, x)?;
        let c = self.cross_attn.forward(g, h, memory, false)?;
        let x = residual(g, x, c)?;
        let h = self.norm3.forward(g, x)?;
        let f = self.ffn.forward(g, h)?;
        residual(g, x, f)
    }
}
