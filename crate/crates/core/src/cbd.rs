//! Content-aware balanced decoder: a stack of blocks operating on the
//! spectrum of the restored token sequence.
//!
//! Each block replaces the self-attention sublayer of a pre-norm
//! transformer layer with spectral modulation followed by energy
//! rebalancing, and keeps the position-wise feed-forward sublayer:
//!
//! ```text
//! M   = σ(W_F · LN(Z) + b_F)            LN on re and im separately
//! Y   = SER(M ⊙ Z)
//! H   = gelu(LN(Y_re)·W1_re + LN(Y_im)·W1_im + b1)
//! out = Y + (H·W2_re + b2_re,  H·W2_im + b2_im)
//! ```
//!
//! The modulation is multiplicative, so the spectral sublayer needs no
//! additive skip: with `W_F = 0`, `b_F = 1`, `W_c = 0`, `b_c = 1` and a
//! zero output projection the block is exactly the identity.

use rand::Rng;

use crate::backbone::{restore_positions, MaskPlan};
use crate::cim::{complex_affine_graph, split_activation_graph, CimVars, ComplexAffineParams, SplitActivation};
use crate::engine::graph::{Cx, Graph, Var};
use crate::engine::params::{ParamId, ParameterStore};
use crate::error::{Error, Result};
use crate::layers::LayerNorm;
use crate::ser::{ser_graph, GatingParams, GatingVars};
use crate::spectral::{FeatureTensor, Spectrum};
use crate::tensor::Mat;

/// Which sublayers a block runs; the switches exist for ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockOptions {
    pub activation: SplitActivation,
    pub use_cim: bool,
    pub use_ser: bool,
}

impl Default for BlockOptions {
    fn default() -> Self {
        Self {
            activation: SplitActivation::Relu,
            use_cim: true,
            use_ser: true,
        }
    }
}

/// Row normalization gain and bias, `1 × d` each.
#[derive(Debug, Clone, PartialEq)]
pub struct NormParams {
    pub gain: Mat,
    pub bias: Mat,
}

impl NormParams {
    pub fn identity(d: usize) -> Self {
        Self {
            gain: Mat::filled(1, d, 1.0),
            bias: Mat::zeros(1, d),
        }
    }
}

/// Per-bin feed-forward sublayer acting on `[re | im]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedForwardParams {
    pub norm_re: NormParams,
    pub norm_im: NormParams,
    pub w1_re: Mat,
    pub w1_im: Mat,
    pub b1: Mat,
    pub w2_re: Mat,
    pub w2_im: Mat,
    pub b2_re: Mat,
    pub b2_im: Mat,
}

/// Gating parameters, shared or one set per channel.
#[derive(Debug, Clone, PartialEq)]
pub enum BlockGating {
    Shared(GatingParams),
    PerChannel(Vec<GatingParams>),
}

/// All parameters of one block.
#[derive(Debug, Clone, PartialEq)]
pub struct CbdBlockParams {
    pub cim: ComplexAffineParams,
    pub norm_re: NormParams,
    pub norm_im: NormParams,
    pub ser: BlockGating,
    pub ffn: FeedForwardParams,
}

impl CbdBlockParams {
    /// Fresh block: identity modulation and filter, random first FFN layer,
    /// zero output projection.
    pub fn init<R: Rng + ?Sized>(d: usize, bins: usize, order: usize, ff_hidden: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (d as f64).sqrt();
        Self {
            cim: ComplexAffineParams::bias_only(d),
            norm_re: NormParams::identity(d),
            norm_im: NormParams::identity(d),
            ser: BlockGating::Shared(GatingParams::identity(order, bins)),
            ffn: FeedForwardParams {
                norm_re: NormParams::identity(d),
                norm_im: NormParams::identity(d),
                w1_re: Mat::uniform(d, ff_hidden, bound, rng),
                w1_im: Mat::uniform(d, ff_hidden, bound, rng),
                b1: Mat::zeros(1, ff_hidden),
                w2_re: Mat::zeros(ff_hidden, d),
                w2_im: Mat::zeros(ff_hidden, d),
                b2_re: Mat::zeros(1, d),
                b2_im: Mat::zeros(1, d),
            },
        }
    }

    pub fn dim(&self) -> usize {
        self.cim.dim()
    }

    pub fn bins(&self) -> usize {
        match &self.ser {
            BlockGating::Shared(g) => g.bins(),
            BlockGating::PerChannel(gs) => gs[0].bins(),
        }
    }
}

/// Graph nodes of one block.
#[derive(Debug, Clone)]
pub struct CbdBlockVars {
    pub cim: CimVars,
    pub norm_re: (Var, Var),
    pub norm_im: (Var, Var),
    pub ser: GatingVars,
    pub ffn_norm_re: (Var, Var),
    pub ffn_norm_im: (Var, Var),
    pub w1_re: Var,
    pub w1_im: Var,
    pub b1: Var,
    pub w2_re: Var,
    pub w2_im: Var,
    pub b2_re: Var,
    pub b2_im: Var,
}

impl CbdBlockVars {
    pub fn constant(g: &mut Graph, p: &CbdBlockParams) -> Self {
        let mut c = |m: &Mat| g.constant(m.clone());
        let cim_w_re = c(&p.cim.w_re);
        let cim_w_im = c(&p.cim.w_im);
        let cim_b_re = c(&p.cim.b_re);
        let cim_b_im = c(&p.cim.b_im);
        let norm_re = (c(&p.norm_re.gain), c(&p.norm_re.bias));
        let norm_im = (c(&p.norm_im.gain), c(&p.norm_im.bias));
        let ffn_norm_re = (c(&p.ffn.norm_re.gain), c(&p.ffn.norm_re.bias));
        let ffn_norm_im = (c(&p.ffn.norm_im.gain), c(&p.ffn.norm_im.bias));
        let w1_re = c(&p.ffn.w1_re);
        let w1_im = c(&p.ffn.w1_im);
        let b1 = c(&p.ffn.b1);
        let w2_re = c(&p.ffn.w2_re);
        let w2_im = c(&p.ffn.w2_im);
        let b2_re = c(&p.ffn.b2_re);
        let b2_im = c(&p.ffn.b2_im);
        let ser = match &p.ser {
            BlockGating::Shared(gp) => GatingVars::Shared {
                w_c: c(&gp.w_c),
                b_c: c(&gp.b_c),
            },
            BlockGating::PerChannel(gs) => {
                GatingVars::PerChannel(gs.iter().map(|gp| (c(&gp.w_c), c(&gp.b_c))).collect())
            }
        };
        Self {
            cim: CimVars {
                w_re: cim_w_re,
                w_im: cim_w_im,
                b_re: cim_b_re,
                b_im: cim_b_im,
            },
            norm_re,
            norm_im,
            ser,
            ffn_norm_re,
            ffn_norm_im,
            w1_re,
            w1_im,
            b1,
            w2_re,
            w2_im,
            b2_re,
            b2_im,
        }
    }
}

/// Intermediate nodes of one block.
#[derive(Debug, Clone, Copy)]
pub struct BlockTrace {
    pub out: Cx,
    /// Spectrum entering SER (after modulation).
    pub ser_input: Cx,
    /// SER scale factors, when SER is enabled.
    pub scale: Option<Var>,
}

/// One block on the graph.
pub fn cbd_block_graph(g: &mut Graph, z: Cx, p: &CbdBlockVars, opts: BlockOptions) -> BlockTrace {
    let mut y = z;
    if opts.use_cim {
        let src = Cx {
            re: g.layer_norm(z.re, p.norm_re.0, p.norm_re.1),
            im: g.layer_norm(z.im, p.norm_im.0, p.norm_im.1),
        };
        let pre = complex_affine_graph(g, src, &p.cim);
        let m = split_activation_graph(g, pre, opts.activation);
        y = g.cx_mul(m, z);
    }
    let ser_input = y;
    let mut scale = None;
    if opts.use_ser {
        let (bal, s) = ser_graph(g, y, &p.ser);
        y = bal;
        scale = Some(s);
    }
    let hr = g.layer_norm(y.re, p.ffn_norm_re.0, p.ffn_norm_re.1);
    let hi = g.layer_norm(y.im, p.ffn_norm_im.0, p.ffn_norm_im.1);
    let a = g.matmul(hr, p.w1_re);
    let b = g.matmul(hi, p.w1_im);
    let h = g.add(a, b);
    let h = g.add_row(h, p.b1);
    let h = g.gelu(h);
    let dr = g.matmul(h, p.w2_re);
    let dr = g.add_row(dr, p.b2_re);
    let di = g.matmul(h, p.w2_im);
    let di = g.add_row(di, p.b2_im);
    let out = Cx {
        re: g.add(y.re, dr),
        im: g.add(y.im, di),
    };
    BlockTrace { out, ser_input, scale }
}

fn check_block(spec: &Spectrum, p: &CbdBlockParams) -> Result<()> {
    spec.ensure_finite()?;
    if spec.channels() != p.dim() || spec.bins() != p.bins() {
        return Err(Error::shape(
            "cbd_block",
            format!("({}, {})", p.bins(), p.dim()),
            format!("{:?}", spec.shape()),
        ));
    }
    if let BlockGating::PerChannel(gs) = &p.ser {
        if gs.len() != p.dim() {
            return Err(Error::shape("cbd_block per-channel gating", p.dim(), gs.len()));
        }
    }
    Ok(())
}

pub fn cbd_block(spec: &Spectrum, p: &CbdBlockParams, opts: BlockOptions) -> Result<Spectrum> {
    check_block(spec, p)?;
    let mut g = Graph::detached();
    let z = g.cx_constant(spec.re.clone(), spec.im.clone());
    let vars = CbdBlockVars::constant(&mut g, p);
    let out = cbd_block_graph(&mut g, z, &vars, opts).out;
    Spectrum::new(g.take_value(out.re), g.take_value(out.im))
}

/// Blocks applied in order, plus the decoder's positional encodings.
#[derive(Debug, Clone, PartialEq)]
pub struct CbdStack {
    pub blocks: Vec<CbdBlockParams>,
    /// `T × d`
    pub positional: Mat,
}

/// Scatter → positional encodings → DFT → every block.
pub fn cbd_decode(
    encoder_features: &FeatureTensor,
    mask: &MaskPlan,
    stack: &CbdStack,
    mask_token: &Mat,
    opts: BlockOptions,
) -> Result<Spectrum> {
    if stack.blocks.is_empty() {
        return Err(Error::InvalidArgument("decoder needs at least one block".into()));
    }
    let d = encoder_features.channels();
    if mask_token.shape() != (1, d) {
        return Err(Error::shape("cbd_decode mask token", format!("(1, {d})"), format!("{:?}", mask_token.shape())));
    }
    if stack.positional.shape() != (mask.tokens, d) {
        return Err(Error::shape(
            "cbd_decode positional",
            format!("({}, {d})", mask.tokens),
            format!("{:?}", stack.positional.shape()),
        ));
    }
    let mut g = Graph::detached();
    let feats = g.constant(encoder_features.values().clone());
    let token = g.constant(mask_token.clone());
    let pos = g.constant(stack.positional.clone());
    let full = restore_positions(&mut g, feats, mask, token, pos)?;
    let mut z = g.dft(full);
    for block in &stack.blocks {
        let spec_shape = (mask.tokens, d);
        if (block.bins(), block.dim()) != spec_shape {
            return Err(Error::shape("cbd_decode block", format!("{spec_shape:?}"), format!("({}, {})", block.bins(), block.dim())));
        }
        let vars = CbdBlockVars::constant(&mut g, block);
        z = cbd_block_graph(&mut g, z, &vars, opts).out;
    }
    Spectrum::new(g.take_value(z.re), g.take_value(z.im))
}

/// Parameter ids of one block in a store.
#[derive(Debug, Clone)]
pub struct CbdBlockLayout {
    pub cim: [ParamId; 4],
    pub norm_re: LayerNorm,
    pub norm_im: LayerNorm,
    pub ser: Vec<(ParamId, ParamId)>,
    pub per_channel: bool,
    pub ffn_norm_re: LayerNorm,
    pub ffn_norm_im: LayerNorm,
    pub w1: [ParamId; 3],
    pub w2: [ParamId; 4],
}

impl CbdBlockLayout {
    /// Registers the block's tensors under `name`.
    #[allow(clippy::too_many_arguments)]
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParameterStore,
        name: &str,
        d: usize,
        bins: usize,
        order: usize,
        ff_hidden: usize,
        per_channel: bool,
        uniform_cim: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let init = CbdBlockParams::init(d, bins, order, ff_hidden, rng);
        let cim_init = if uniform_cim {
            ComplexAffineParams::uniform(d, rng)
        } else {
            init.cim.clone()
        };
        let cim = [
            store.add(format!("{name}.cim.w_re"), cim_init.w_re)?,
            store.add(format!("{name}.cim.w_im"), cim_init.w_im)?,
            store.add(format!("{name}.cim.b_re"), cim_init.b_re)?,
            store.add(format!("{name}.cim.b_im"), cim_init.b_im)?,
        ];
        let norm_re = LayerNorm::new(store, &format!("{name}.cim.ln_re"), d)?;
        let norm_im = LayerNorm::new(store, &format!("{name}.cim.ln_im"), d)?;
        let gate = GatingParams::identity(order, bins);
        let ser = if per_channel {
            (0..d)
                .map(|c| {
                    Ok((
                        store.add(format!("{name}.ser.c{c}.w_c"), gate.w_c.clone())?,
                        store.add(format!("{name}.ser.c{c}.b_c"), gate.b_c.clone())?,
                    ))
                })
                .collect::<Result<Vec<_>>>()?
        } else {
            vec![(
                store.add(format!("{name}.ser.w_c"), gate.w_c.clone())?,
                store.add(format!("{name}.ser.b_c"), gate.b_c.clone())?,
            )]
        };
        let ffn_norm_re = LayerNorm::new(store, &format!("{name}.ffn.ln_re"), d)?;
        let ffn_norm_im = LayerNorm::new(store, &format!("{name}.ffn.ln_im"), d)?;
        let f = init.ffn;
        let w1 = [
            store.add(format!("{name}.ffn.w1_re"), f.w1_re)?,
            store.add(format!("{name}.ffn.w1_im"), f.w1_im)?,
            store.add(format!("{name}.ffn.b1"), f.b1)?,
        ];
        let w2 = [
            store.add(format!("{name}.ffn.w2_re"), f.w2_re)?,
            store.add(format!("{name}.ffn.w2_im"), f.w2_im)?,
            store.add(format!("{name}.ffn.b2_re"), f.b2_re)?,
            store.add(format!("{name}.ffn.b2_im"), f.b2_im)?,
        ];
        Ok(Self {
            cim,
            norm_re,
            norm_im,
            ser,
            per_channel,
            ffn_norm_re,
            ffn_norm_im,
            w1,
            w2,
        })
    }

    pub fn vars(&self, g: &mut Graph) -> CbdBlockVars {
        let ser = if self.per_channel {
            GatingVars::PerChannel(self.ser.iter().map(|&(w, b)| (g.param(w), g.param(b))).collect())
        } else {
            let (w, b) = self.ser[0];
            GatingVars::Shared {
                w_c: g.param(w),
                b_c: g.param(b),
            }
        };
        CbdBlockVars {
            cim: CimVars {
                w_re: g.param(self.cim[0]),
                w_im: g.param(self.cim[1]),
                b_re: g.param(self.cim[2]),
                b_im: g.param(self.cim[3]),
            },
            norm_re: (g.param(self.norm_re.gain), g.param(self.norm_re.bias)),
            norm_im: (g.param(self.norm_im.gain), g.param(self.norm_im.bias)),
            ser,
            ffn_norm_re: (g.param(self.ffn_norm_re.gain), g.param(self.ffn_norm_re.bias)),
            ffn_norm_im: (g.param(self.ffn_norm_im.gain), g.param(self.ffn_norm_im.bias)),
            w1_re: g.param(self.w1[0]),
            w1_im: g.param(self.w1[1]),
            b1: g.param(self.w1[2]),
            w2_re: g.param(self.w2[0]),
            w2_im: g.param(self.w2[1]),
            b2_re: g.param(self.w2[2]),
            b2_im: g.param(self.w2[3]),
        }
    }

    /// Copies the block's current values out of the store.
    pub fn params(&self, store: &ParameterStore) -> CbdBlockParams {
        let v = |id: ParamId| store.value(id).clone();
        let norm = |ln: &LayerNorm| NormParams {
            gain: v(ln.gain),
            bias: v(ln.bias),
        };
        let gates: Vec<GatingParams> = self
            .ser
            .iter()
            .map(|&(w, b)| GatingParams { w_c: v(w), b_c: v(b) })
            .collect();
        CbdBlockParams {
            cim: ComplexAffineParams {
                w_re: v(self.cim[0]),
                w_im: v(self.cim[1]),
                b_re: v(self.cim[2]),
                b_im: v(self.cim[3]),
            },
            norm_re: norm(&self.norm_re),
            norm_im: norm(&self.norm_im),
            ser: if self.per_channel {
                BlockGating::PerChannel(gates)
            } else {
                BlockGating::Shared(gates.into_iter().next().expect("shared gate"))
            },
            ffn: FeedForwardParams {
                norm_re: norm(&self.ffn_norm_re),
                norm_im: norm(&self.ffn_norm_im),
                w1_re: v(self.w1[0]),
                w1_im: v(self.w1[1]),
                b1: v(self.w1[2]),
                w2_re: v(self.w2[0]),
                w2_im: v(self.w2[1]),
                b2_re: v(self.w2[2]),
                b2_im: v(self.w2[3]),
            },
        }
    }
}

/// Store-backed decoder: positional table plus blocks.
#[derive(Debug, Clone)]
pub struct CbdDecoder {
    pub pos: ParamId,
    pub blocks: Vec<CbdBlockLayout>,
    pub options: BlockOptions,
}

/// Decoder output on the graph.
pub struct CbdOutput {
    pub spectrum: Cx,
    pub blocks: Vec<BlockTrace>,
}

impl CbdDecoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParameterStore,
        tokens: usize,
        d: usize,
        blocks: usize,
        order: usize,
        ff_hidden: usize,
        per_channel: bool,
        uniform_cim: bool,
        options: BlockOptions,
        rng: &mut R,
    ) -> Result<Self> {
        let pos = store.add("cbd.pos", Mat::normal(tokens, d, 0.02, rng))?;
        let blocks = (0..blocks)
            .map(|u| {
                CbdBlockLayout::register(
                    store,
                    &format!("cbd.block{u}"),
                    d,
                    tokens,
                    order,
                    ff_hidden,
                    per_channel,
                    uniform_cim,
                    rng,
                )
            })
            .collect::<Result<_>>()?;
        Ok(Self { pos, blocks, options })
    }

    pub fn forward(&self, g: &mut Graph, features: Var, mask: &MaskPlan, mask_token: Var) -> Result<CbdOutput> {
        let pos = g.param(self.pos);
        let full = restore_positions(g, features, mask, mask_token, pos)?;
        let mut z = g.dft(full);
        let mut traces = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let vars = block.vars(g);
            let t = cbd_block_graph(g, z, &vars, self.options);
            z = t.out;
            traces.push(t);
        }
        Ok(CbdOutput {
            spectrum: z,
            blocks: traces,
        })
    }

    pub fn stack(&self, store: &ParameterStore) -> CbdStack {
        CbdStack {
            blocks: self.blocks.iter().map(|b| b.params(store)).collect(),
            positional: store.value(self.pos).clone(),
        }
    }
}
