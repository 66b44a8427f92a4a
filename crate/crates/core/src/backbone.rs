//! Masked-modeling backbone: non-overlapping convolutional token embedding,
//! random timestamp masking, a pre-norm transformer encoder over visible
//! tokens, the vanilla temporal decoder, and the classification head.

use rand::seq::index::sample;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::engine::graph::{Graph, Var};
use crate::engine::params::{ParamId, ParameterStore};
use crate::error::{Error, Result};
use crate::layers::{Linear, TransformerStack};
use crate::spectral::FeatureTensor;
use crate::tensor::Mat;

/// `N` samples of `L` timestamps × `C` variables, optionally labelled.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesBatch {
    samples: Vec<Mat>,
    labels: Option<Vec<usize>>,
    length: usize,
    channels: usize,
    num_classes: usize,
}

impl TimeSeriesBatch {
    pub fn new(
        samples: Vec<Mat>,
        labels: Option<Vec<usize>>,
        length: usize,
        channels: usize,
        num_classes: usize,
    ) -> Result<Self> {
        for (i, s) in samples.iter().enumerate() {
            if s.shape() != (length, channels) {
                return Err(Error::shape(
                    "TimeSeriesBatch",
                    format!("({length}, {channels})"),
                    format!("sample {i}: {:?}", s.shape()),
                ));
            }
            s.ensure_finite(&format!("sample {i}"))?;
        }
        if let Some(l) = &labels {
            if l.len() != samples.len() {
                return Err(Error::shape("TimeSeriesBatch labels", samples.len(), l.len()));
            }
            if let Some(&bad) = l.iter().find(|&&y| y >= num_classes) {
                return Err(Error::InvalidArgument(format!(
                    "label {bad} out of range for {num_classes} classes"
                )));
            }
        }
        Ok(Self {
            samples,
            labels,
            length,
            channels,
            num_classes,
        })
    }

    pub fn empty(length: usize, channels: usize, num_classes: usize) -> Self {
        Self {
            samples: Vec::new(),
            labels: Some(Vec::new()),
            length,
            channels,
            num_classes,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn length(&self) -> usize {
        self.length
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn sample(&self, i: usize) -> &Mat {
        &self.samples[i]
    }

    pub fn samples(&self) -> &[Mat] {
        &self.samples
    }

    pub fn samples_mut(&mut self) -> &mut [Mat] {
        &mut self.samples
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn label(&self, i: usize) -> Option<usize> {
        self.labels.as_ref().map(|l| l[i])
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            samples: idx.iter().map(|&i| self.samples[i].clone()).collect(),
            labels: self.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect()),
            length: self.length,
            channels: self.channels,
            num_classes: self.num_classes,
        }
    }
}

/// Masked token positions for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPlan {
    pub masked: Vec<usize>,
    pub tokens: usize,
    pub ratio: f64,
    pub seed: u64,
}

impl MaskPlan {
    /// Nothing masked.
    pub fn none(tokens: usize) -> Self {
        Self {
            masked: Vec::new(),
            tokens,
            ratio: 0.0,
            seed: 0,
        }
    }

    /// Explicit positions (sorted and de-duplicated).
    pub fn from_indices(tokens: usize, mut masked: Vec<usize>) -> Result<Self> {
        masked.sort_unstable();
        masked.dedup();
        if masked.last().is_some_and(|&m| m >= tokens) {
            return Err(Error::InvalidArgument(format!(
                "masked index out of range for {tokens} tokens"
            )));
        }
        let ratio = masked.len() as f64 / tokens as f64;
        Ok(Self {
            masked,
            tokens,
            ratio,
            seed: 0,
        })
    }

    pub fn visible(&self) -> Vec<usize> {
        let mut m = self.masked.iter().peekable();
        (0..self.tokens)
            .filter(|i| {
                if m.peek() == Some(&i) {
                    m.next();
                    false
                } else {
                    true
                }
            })
            .collect()
    }

    pub fn is_masked(&self, i: usize) -> bool {
        self.masked.binary_search(&i).is_ok()
    }
}

/// Samples `round(ratio·T)` distinct positions uniformly without
/// replacement; deterministic in `seed`.
pub fn make_mask(tokens: usize, ratio: f64, seed: u64) -> Result<MaskPlan> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::InvalidArgument(format!(
            "mask ratio must lie in [0, 1], got {ratio}"
        )));
    }
    let count = (ratio * tokens as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut masked = sample(&mut rng, tokens, count).into_vec();
    masked.sort_unstable();
    Ok(MaskPlan {
        masked,
        tokens,
        ratio,
        seed,
    })
}

/// Number of tokens produced from `length` timestamps.
pub fn token_count(length: usize, window: usize) -> Result<usize> {
    if length < window {
        return Err(Error::InvalidArgument(format!(
            "series length {length} is shorter than the embedding window {window}"
        )));
    }
    Ok(length / window)
}

/// Right-truncates a `L × C` series to `T·window` rows and lays each window
/// out as one row of `window·C` values (time-major, then channel).
pub fn windows(x: &Mat, window: usize) -> Result<Mat> {
    let t = token_count(x.rows(), window)?;
    let c = x.cols();
    let keep = Mat::from_vec(t * window, c, x.as_slice()[..t * window * c].to_vec())?;
    keep.reshape(t, window * c)
}

/// Convolutional embedding plus encoder.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub embed: Linear,
    pub pos: ParamId,
    pub stack: TransformerStack,
    pub window: usize,
    pub tokens: usize,
    pub d: usize,
}

/// Encoder output with the attention maps of every layer.
pub struct Encoded {
    pub features: Var,
    /// `attention[layer][head]`, each `visible × visible`.
    pub attention: Vec<Vec<Var>>,
}

impl Encoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParameterStore,
        channels: usize,
        tokens: usize,
        window: usize,
        d: usize,
        layers: usize,
        heads: usize,
        ff_hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let embed = Linear::new(store, "enc.embed", window * channels, d, rng)?;
        let pos = store.add("enc.pos", Mat::normal(tokens, d, 0.02, rng))?;
        let stack = TransformerStack::new(store, "enc", layers, d, heads, ff_hidden, rng)?;
        Ok(Self {
            embed,
            pos,
            stack,
            window,
            tokens,
            d,
        })
    }

    /// Window embedding plus positional encoding: `T × d`.
    pub fn embed(&self, g: &mut Graph, x: &Mat) -> Result<Var> {
        let w = windows(x, self.window)?;
        if w.rows() != self.tokens {
            return Err(Error::shape("embed", format!("{} tokens", self.tokens), format!("{} tokens", w.rows())));
        }
        let input = g.constant(w);
        let e = self.embed.forward(g, input);
        let pos = g.param(self.pos);
        Ok(g.add(e, pos))
    }

    /// Runs the transformer over the given (visible) tokens.
    pub fn encode(&self, g: &mut Graph, tokens: Var) -> Result<Encoded> {
        if g.shape(tokens).0 == 0 {
            return Err(Error::InvalidArgument("encoder input has no tokens".into()));
        }
        let out = self.stack.forward(g, tokens);
        Ok(Encoded {
            features: out.out,
            attention: out.attention,
        })
    }

    /// Embeds, drops masked rows, encodes.
    pub fn forward(&self, g: &mut Graph, x: &Mat, mask: &MaskPlan) -> Result<Encoded> {
        let tokens = self.embed(g, x)?;
        let visible = mask.visible();
        let vis = if mask.masked.is_empty() {
            tokens
        } else {
            g.gather_rows(tokens, &visible)
        };
        self.encode(g, vis)
    }
}

/// Scatter visible features and the mask token back to full length, then
/// add positional encodings.
pub fn restore_positions(
    g: &mut Graph,
    features: Var,
    mask: &MaskPlan,
    mask_token: Var,
    pos: Var,
) -> Result<Var> {
    let visible = mask.visible();
    if g.shape(features).0 != visible.len() {
        return Err(Error::shape(
            "restore_positions",
            format!("{} visible rows", visible.len()),
            format!("{} rows", g.shape(features).0),
        ));
    }
    if g.shape(pos).0 != mask.tokens {
        return Err(Error::shape("restore_positions", mask.tokens, g.shape(pos).0));
    }
    let full = if mask.masked.is_empty() {
        features
    } else {
        g.scatter(features, mask_token, &visible, &mask.masked)
    };
    Ok(g.add(full, pos))
}

/// Vanilla transformer decoder with a linear head back to raw windows.
#[derive(Debug, Clone)]
pub struct TemporalDecoder {
    pub pos: ParamId,
    pub stack: TransformerStack,
    pub head: Linear,
    pub window: usize,
    pub channels: usize,
}

impl TemporalDecoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParameterStore,
        channels: usize,
        tokens: usize,
        window: usize,
        d: usize,
        layers: usize,
        heads: usize,
        ff_hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let pos = store.add("td.pos", Mat::normal(tokens, d, 0.02, rng))?;
        let stack = TransformerStack::new(store, "td", layers, d, heads, ff_hidden, rng)?;
        let head = Linear::new(store, "td.head", d, window * channels, rng)?;
        Ok(Self {
            pos,
            stack,
            head,
            window,
            channels,
        })
    }

    /// Reconstruction `(T·window) × C`.
    pub fn forward(&self, g: &mut Graph, features: Var, mask: &MaskPlan, mask_token: Var) -> Result<Var> {
        let pos = g.param(self.pos);
        let full = restore_positions(g, features, mask, mask_token, pos)?;
        let h = self.stack.forward(g, full).out;
        let y = self.head.forward(g, h);
        Ok(g.reshape(y, mask.tokens * self.window, self.channels))
    }
}

/// Mean-pool over tokens, then one linear layer.
#[derive(Debug, Clone, Copy)]
pub struct ClassifierHead {
    pub linear: Linear,
}

impl ClassifierHead {
    pub fn new<R: Rng + ?Sized>(store: &mut ParameterStore, d: usize, classes: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            linear: Linear::new(store, "cls", d, classes, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, features: Var) -> Var {
        let pooled = g.mean_rows(features);
        self.linear.forward(g, pooled)
    }
}

/// Mean-pool then `pooled·W + b` on plain matrices.
pub fn classify(z: &FeatureTensor, w: &Mat, b: &Mat) -> Result<Mat> {
    if w.rows() != z.channels() || b.shape() != (1, w.cols()) {
        return Err(Error::shape("classify", format!("{} x K", z.channels()), format!("{:?}", w.shape())));
    }
    let mut g = Graph::detached();
    let x = g.constant(z.values().clone());
    let wv = g.constant(w.clone());
    let bv = g.constant(b.clone());
    let pooled = g.mean_rows(x);
    let y = g.matmul(pooled, wv);
    let y = g.add_row(y, bv);
    Ok(g.take_value(y))
}
