//! Pre-training and fine-tuning objectives.
//!
//! Both decoder branches end in raw space (`L′ × C`, with `L′ = T·window`).
//! The pre-training loss combines four terms:
//!
//! ```text
//! L = L_T^re(x_T) + L_F^dual(F(x_T)) + γ·(L_F^re(F(x_F)) + L_T^dual(x_F))
//! ```
//!
//! Temporal terms average squared errors over the timestamps of masked
//! windows. Frequency terms compare full spectra of a composite series that
//! takes visible windows from the ground truth and masked windows from the
//! prediction.

use serde::{Deserialize, Serialize};

use crate::backbone::MaskPlan;
use crate::engine::graph::{Cx, Graph, Var};
use crate::error::{Error, Result};
use crate::spectral::{dft_forward, FeatureTensor, Spectrum};
use crate::tensor::Mat;

/// Loss weight and per-term switches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub gamma: f64,
    pub temporal_re: bool,
    pub freq_dual: bool,
    pub freq_re: bool,
    pub temporal_dual: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            gamma: 0.5,
            temporal_re: true,
            freq_dual: true,
            freq_re: true,
            temporal_dual: true,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !self.gamma.is_finite() || self.gamma < 0.0 {
            return Err(Error::Config(format!("loss.gamma must be finite and >= 0, got {}", self.gamma)));
        }
        Ok(())
    }

    /// Whether the frequency branch contributes at all.
    pub fn uses_frequency_branch(&self) -> bool {
        self.gamma > 0.0 && (self.freq_re || self.temporal_dual)
    }

    /// Plain masked modeling: temporal reconstruction only.
    pub fn plain_mtm() -> Self {
        Self {
            gamma: 0.0,
            temporal_re: true,
            freq_dual: false,
            freq_re: false,
            temporal_dual: false,
        }
    }
}

/// Value of every term and of the total.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub temporal_re: f64,
    pub freq_dual: f64,
    pub freq_re: f64,
    pub temporal_dual: f64,
    pub total: f64,
}

/// `L′ × C` indicator of timestamps inside masked windows. With an empty
/// mask every timestamp counts.
pub fn masked_support(mask: &MaskPlan, window: usize, channels: usize) -> Mat {
    let rows = mask.tokens * window;
    if mask.masked.is_empty() {
        return Mat::filled(rows, channels, 1.0);
    }
    let mut m = Mat::zeros(rows, channels);
    for &tok in &mask.masked {
        for r in tok * window..(tok + 1) * window {
            m.row_mut(r).fill(1.0);
        }
    }
    m
}

fn check_pair(op: &'static str, a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, format!("{b:?}"), format!("{a:?}")));
    }
    Ok(())
}

fn check_mask(op: &'static str, shape: (usize, usize), mask: &MaskPlan, window: usize) -> Result<()> {
    if shape.0 != mask.tokens * window {
        return Err(Error::shape(op, format!("{} rows", mask.tokens * window), format!("{} rows", shape.0)));
    }
    Ok(())
}

/// Mean squared error over masked-window timestamps.
pub fn mse_temporal_graph(g: &mut Graph, pred: Var, gt: Var, mask: &MaskPlan, window: usize) -> Result<Var> {
    let shape = g.shape(pred);
    check_pair("mse_temporal", shape, g.shape(gt))?;
    check_mask("mse_temporal", shape, mask, window)?;
    let support = masked_support(mask, window, shape.1);
    let n = support.sum();
    Ok(g.weighted_sq_err(pred, gt, support.scale(1.0 / n)))
}

/// Mean over bins and channels of `Δre² + Δim²`.
pub fn freq_loss_graph(g: &mut Graph, pred: Cx, gt: Cx) -> Result<Var> {
    let shape = g.shape(pred.re);
    check_pair("freq_loss", shape, g.shape(gt.re))?;
    let w = Mat::filled(shape.0, shape.1, 1.0 / (shape.0 * shape.1) as f64);
    let re = g.weighted_sq_err(pred.re, gt.re, w.clone());
    let im = g.weighted_sq_err(pred.im, gt.im, w);
    Ok(g.add(re, im))
}

/// Ground truth on visible windows, prediction on masked windows.
pub fn composite_graph(g: &mut Graph, pred: Var, gt: &Mat, mask: &MaskPlan, window: usize) -> Result<Var> {
    let shape = g.shape(pred);
    check_pair("composite", shape, gt.shape())?;
    check_mask("composite", shape, mask, window)?;
    if mask.masked.is_empty() {
        return Ok(pred);
    }
    let support = masked_support(mask, window, shape.1);
    let keep = gt.zip_map(&support, |x, m| x * (1.0 - m));
    let s = g.constant(support);
    let p = g.mul(pred, s);
    let k = g.constant(keep);
    Ok(g.add(p, k))
}

/// Loss nodes of one pre-training sample.
pub struct PretrainLoss {
    pub total: Var,
    pub temporal_re: Option<Var>,
    pub freq_dual: Option<Var>,
    pub freq_re: Option<Var>,
    pub temporal_dual: Option<Var>,
}

impl PretrainLoss {
    pub fn breakdown(&self, g: &Graph) -> LossBreakdown {
        let v = |x: Option<Var>| x.map_or(0.0, |x| g.value(x)[(0, 0)]);
        LossBreakdown {
            temporal_re: v(self.temporal_re),
            freq_dual: v(self.freq_dual),
            freq_re: v(self.freq_re),
            temporal_dual: v(self.temporal_dual),
            total: g.value(self.total)[(0, 0)],
        }
    }
}

/// Assembles the four-term loss. `gt` is the `L′ × C` ground truth,
/// `temporal` the temporal-branch reconstruction and `frequency` the
/// frequency-branch reconstruction mapped back to raw space.
pub fn pretrain_loss_graph(
    g: &mut Graph,
    temporal: Var,
    frequency: Option<Var>,
    gt: &Mat,
    mask: &MaskPlan,
    window: usize,
    w: &LossWeights,
) -> Result<PretrainLoss> {
    w.validate()?;
    let gt_var = g.constant(gt.clone());
    let gt_spec = dft_forward(&FeatureTensor::new(gt.clone())?);
    let gt_f = g.cx_constant(gt_spec.re, gt_spec.im);

    let mut terms: Vec<Var> = Vec::new();
    let temporal_re = if w.temporal_re {
        Some(mse_temporal_graph(g, temporal, gt_var, mask, window)?)
    } else {
        None
    };
    let freq_dual = if w.freq_dual {
        let c = composite_graph(g, temporal, gt, mask, window)?;
        let f = g.dft(c);
        Some(freq_loss_graph(g, f, gt_f)?)
    } else {
        None
    };
    terms.extend(temporal_re.iter().chain(freq_dual.iter()));

    let (mut freq_re, mut temporal_dual) = (None, None);
    if w.uses_frequency_branch() {
        let x_f = frequency.ok_or_else(|| {
            Error::InvalidArgument("frequency-branch output required when gamma > 0".into())
        })?;
        if w.freq_re {
            let c = composite_graph(g, x_f, gt, mask, window)?;
            let f = g.dft(c);
            freq_re = Some(freq_loss_graph(g, f, gt_f)?);
        }
        if w.temporal_dual {
            temporal_dual = Some(mse_temporal_graph(g, x_f, gt_var, mask, window)?);
        }
        let branch: Vec<Var> = freq_re.iter().chain(temporal_dual.iter()).copied().collect();
        let mut b = branch[0];
        for &t in &branch[1..] {
            b = g.add(b, t);
        }
        terms.push(g.scale(b, w.gamma));
    }
    let total = match terms.split_first() {
        Some((&first, rest)) => rest.iter().fold(first, |acc, &t| g.add(acc, t)),
        None => return Err(Error::Config("every loss term is disabled".into())),
    };
    Ok(PretrainLoss {
        total,
        temporal_re,
        freq_dual,
        freq_re,
        temporal_dual,
    })
}

pub fn mse_temporal(pred: &FeatureTensor, gt: &FeatureTensor, mask: &MaskPlan, window: usize) -> Result<f64> {
    let mut g = Graph::detached();
    let p = g.constant(pred.values().clone());
    let t = g.constant(gt.values().clone());
    let l = mse_temporal_graph(&mut g, p, t, mask, window)?;
    Ok(g.value(l)[(0, 0)])
}

pub fn freq_loss(pred: &Spectrum, gt: &Spectrum) -> Result<f64> {
    check_pair("freq_loss", pred.shape(), gt.shape())?;
    let mut g = Graph::detached();
    let p = g.cx_constant(pred.re.clone(), pred.im.clone());
    let t = g.cx_constant(gt.re.clone(), gt.im.clone());
    let l = freq_loss_graph(&mut g, p, t)?;
    Ok(g.value(l)[(0, 0)])
}

/// Four-term loss on plain values. `frequency` may be `None` only when the
/// weights leave the frequency branch out.
pub fn pretrain_loss(
    temporal: &FeatureTensor,
    frequency: Option<&FeatureTensor>,
    gt: &FeatureTensor,
    mask: &MaskPlan,
    window: usize,
    w: &LossWeights,
) -> Result<LossBreakdown> {
    let mut g = Graph::detached();
    let t = g.constant(temporal.values().clone());
    let f = frequency.map(|f| g.constant(f.values().clone()));
    if let Some(f) = f {
        check_pair("pretrain_loss", g.shape(f), g.shape(t))?;
    }
    let loss = pretrain_loss_graph(&mut g, t, f, gt.values(), mask, window, w)?;
    Ok(loss.breakdown(&g))
}

/// Mean cross-entropy of `N × classes` logits.
pub fn finetune_loss(logits: &Mat, labels: &[usize]) -> Result<f64> {
    logits.ensure_finite("logits")?;
    let mut g = Graph::detached();
    let l = g.constant(logits.clone());
    let ce = g.cross_entropy(l, labels)?;
    Ok(g.value(ce)[(0, 0)])
}
