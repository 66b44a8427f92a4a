//! Parameterized building blocks shared by the encoder and decoders.

use rand::Rng;

use crate::engine::graph::{Graph, Var};
use crate::engine::params::{ParamId, ParameterStore};
use crate::error::Result;
use crate::tensor::Mat;

/// `y = x·W + b`, `W` is `in × out`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    /// Weights uniform in `±1/√in`, zero bias.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParameterStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = 1.0 / (inputs as f64).sqrt();
        Ok(Self {
            w: store.add(format!("{name}.w"), Mat::uniform(inputs, outputs, bound, rng))?,
            b: store.add(format!("{name}.b"), Mat::zeros(1, outputs))?,
        })
    }

    pub fn zeros(store: &mut ParameterStore, name: &str, inputs: usize, outputs: usize) -> Result<Self> {
        Ok(Self {
            w: store.add(format!("{name}.w"), Mat::zeros(inputs, outputs))?,
            b: store.add(format!("{name}.b"), Mat::zeros(1, outputs))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParameterStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: store.add(format!("{name}.g"), Mat::filled(1, dim, 1.0))?,
            bias: store.add(format!("{name}.b"), Mat::zeros(1, dim))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        g.layer_norm(x, gain, bias)
    }
}

#[derive(Debug, Clone)]
pub struct AttentionHead {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    /// Per-head slice of the output projection, `head_dim × d`.
    pub wo: ParamId,
}

/// Pre-norm transformer layer:
/// `x ← x + MHA(LN(x))`, `x ← x + FFN(LN(x))`.
#[derive(Debug, Clone)]
pub struct TransformerLayer {
    pub ln1: LayerNorm,
    pub heads: Vec<AttentionHead>,
    pub bo: ParamId,
    pub ln2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub head_dim: usize,
}

impl TransformerLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParameterStore,
        name: &str,
        d: usize,
        heads: usize,
        ff_hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let head_dim = d / heads;
        let ln1 = LayerNorm::new(store, &format!("{name}.ln1"), d)?;
        let bound = 1.0 / (d as f64).sqrt();
        let obound = 1.0 / (d as f64).sqrt();
        let mut hs = Vec::with_capacity(heads);
        for h in 0..heads {
            let p = format!("{name}.attn.h{h}");
            hs.push(AttentionHead {
                wq: store.add(format!("{p}.wq"), Mat::uniform(d, head_dim, bound, rng))?,
                wk: store.add(format!("{p}.wk"), Mat::uniform(d, head_dim, bound, rng))?,
                wv: store.add(format!("{p}.wv"), Mat::uniform(d, head_dim, bound, rng))?,
                wo: store.add(format!("{p}.wo"), Mat::uniform(head_dim, d, obound, rng))?,
            });
        }
        let bo = store.add(format!("{name}.attn.bo"), Mat::zeros(1, d))?;
        let ln2 = LayerNorm::new(store, &format!("{name}.ln2"), d)?;
        let ff1 = Linear::new(store, &format!("{name}.ff1"), d, ff_hidden, rng)?;
        let ff2 = Linear::new(store, &format!("{name}.ff2"), ff_hidden, d, rng)?;
        Ok(Self {
            ln1,
            heads: hs,
            bo,
            ln2,
            ff1,
            ff2,
            head_dim,
        })
    }

    /// Returns the layer output and the per-head attention matrices.
    pub fn forward(&self, g: &mut Graph, x: Var) -> (Var, Vec<Var>) {
        let h = self.ln1.forward(g, x);
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let mut attn = Vec::with_capacity(self.heads.len());
        let mut mixed: Option<Var> = None;
        for head in &self.heads {
            let wq = g.param(head.wq);
            let wk = g.param(head.wk);
            let wv = g.param(head.wv);
            let wo = g.param(head.wo);
            let q = g.matmul(h, wq);
            let k = g.matmul(h, wk);
            let v = g.matmul(h, wv);
            let scores = g.matmul_t(q, k);
            let scores = g.scale(scores, scale);
            let a = g.softmax_rows(scores);
            attn.push(a);
            let o = g.matmul(a, v);
            let o = g.matmul(o, wo);
            mixed = Some(match mixed {
                Some(m) => g.add(m, o),
                None => o,
            });
        }
        let bo = g.param(self.bo);
        let mixed = g.add_row(mixed.expect("at least one head"), bo);
        let x = g.add(x, mixed);

        let h = self.ln2.forward(g, x);
        let f = self.ff1.forward(g, h);
        let f = g.gelu(f);
        let f = self.ff2.forward(g, f);
        (g.add(x, f), attn)
    }
}

/// Stack of transformer layers.
#[derive(Debug, Clone)]
pub struct TransformerStack {
    pub layers: Vec<TransformerLayer>,
}

/// Output of a stack together with every layer's attention maps.
pub struct StackOutput {
    pub out: Var,
    /// `attention[layer][head]`
    pub attention: Vec<Vec<Var>>,
}

impl TransformerStack {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParameterStore,
        name: &str,
        layers: usize,
        d: usize,
        heads: usize,
        ff_hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let layers = (0..layers)
            .map(|i| TransformerLayer::new(store, &format!("{name}.layer{i}"), d, heads, ff_hidden, rng))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn forward(&self, g: &mut Graph, mut x: Var) -> StackOutput {
        let mut attention = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (y, a) = layer.forward(g, x);
            x = y;
            attention.push(a);
        }
        StackOutput { out: x, attention }
    }
}
