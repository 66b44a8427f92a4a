//! Spectrum energy rebalancing: every frequency component is scaled by a
//! Bernstein polynomial of its softmax-normalized amplitude, with the
//! polynomial coefficients produced by an affine gate over the whole
//! normalized energy profile.
//!
//! For one channel with amplitudes `A(s)`:
//!
//! ```text
//! Ã      = softmax_s(A)
//! Θ      = W_c · Ã + b_c                      (K+1 coefficients)
//! p(s)   = Σ_k Θ_k · C(K,k) (1−Ã(s))^(K−k) Ã(s)^k
//! out(s) = p(s) · Z(s)
//! ```
//!
//! `W_c`/`b_c` are shared by all channels unless per-channel gating is
//! requested. Scale factors are not clamped; negative values flip phase.

use rand::Rng;

use crate::engine::graph::{softmax_rows, Cx, Graph, Var};
use crate::error::{Error, Result};
use crate::spectral::Spectrum;
use crate::tensor::Mat;

/// Largest polynomial order accepted by the public API.
pub const MAX_ORDER: usize = 32;

/// Default polynomial order.
pub const DEFAULT_ORDER: usize = 12;

/// Gate producing Bernstein coefficients from a normalized energy profile.
#[derive(Debug, Clone, PartialEq)]
pub struct GatingParams {
    /// `(K+1) × S`
    pub w_c: Mat,
    /// `(K+1) × 1`
    pub b_c: Mat,
}

impl GatingParams {
    pub fn new(w_c: Mat, b_c: Mat) -> Result<Self> {
        let k1 = w_c.rows();
        if !(2..=MAX_ORDER + 1).contains(&k1) {
            return Err(Error::InvalidArgument(format!(
                "polynomial order must be in 1..={MAX_ORDER}, got {}",
                k1 as isize - 1
            )));
        }
        if b_c.shape() != (k1, 1) {
            return Err(Error::shape("GatingParams", format!("({k1}, 1)"), format!("{:?}", b_c.shape())));
        }
        w_c.ensure_finite("w_c")?;
        b_c.ensure_finite("b_c")?;
        Ok(Self { w_c, b_c })
    }

    /// `w_c = 0`, `b_c = 1`: every coefficient is one, so the filter is the
    /// identity by partition of unity.
    pub fn identity(order: usize, bins: usize) -> Self {
        Self {
            w_c: Mat::zeros(order + 1, bins),
            b_c: Mat::filled(order + 1, 1, 1.0),
        }
    }

    pub fn random<R: Rng + ?Sized>(order: usize, bins: usize, scale: f64, rng: &mut R) -> Self {
        Self {
            w_c: Mat::uniform(order + 1, bins, scale, rng),
            b_c: Mat::from_fn(order + 1, 1, |_, _| 1.0 + rng.random_range(-scale..=scale)),
        }
    }

    pub fn order(&self) -> usize {
        self.w_c.rows() - 1
    }

    pub fn bins(&self) -> usize {
        self.w_c.cols()
    }
}

/// `B_k^K(w)` for `k = 0..=K`.
#[derive(Debug, Clone, PartialEq)]
pub struct BernsteinBasis(pub Vec<f64>);

impl BernsteinBasis {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    /// `Σ_k θ_k B_k(w)`.
    pub fn eval(&self, theta: &[f64]) -> f64 {
        self.0.iter().zip(theta).map(|(b, t)| b * t).sum()
    }
}

/// Fills `out[0..=order]` with the Bernstein basis at `w` using the
/// de Casteljau recurrence `B_k^n = (1−w)·B_k^{n−1} + w·B_{k−1}^{n−1}`.
/// Only convex combinations are formed, so the result is non-negative and
/// sums to one up to rounding.
pub(crate) fn bernstein_values(order: usize, w: f64, out: &mut [f64]) {
    debug_assert_eq!(out.len(), order + 1);
    let u = 1.0 - w;
    out[0] = 1.0;
    for n in 1..=order {
        out[n] = w * out[n - 1];
        for k in (1..n).rev() {
            out[k] = u * out[k] + w * out[k - 1];
        }
        out[0] *= u;
    }
}

pub fn bernstein_basis(order: usize, w: f64) -> Result<BernsteinBasis> {
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::InvalidArgument(format!(
            "Bernstein argument must lie in [0, 1], got {w}"
        )));
    }
    if order == 0 || order > MAX_ORDER {
        return Err(Error::InvalidArgument(format!(
            "polynomial order must be in 1..={MAX_ORDER}, got {order}"
        )));
    }
    let mut out = vec![0.0; order + 1];
    bernstein_values(order, w, &mut out);
    Ok(BernsteinBasis(out))
}

/// Softmax over the frequency axis (rows), independently per channel.
pub fn normalize_energy(a: &Mat) -> Result<Mat> {
    a.ensure_finite("energy")?;
    Ok(softmax_rows(&a.transpose()).transpose())
}

/// `W_c · ã + b_c` for one channel's normalized amplitude vector.
pub fn gate_coefficients(a_norm: &[f64], g: &GatingParams) -> Result<Vec<f64>> {
    if a_norm.len() != g.bins() {
        return Err(Error::shape("gate_coefficients", g.bins(), a_norm.len()));
    }
    Ok((0..=g.order())
        .map(|k| {
            g.w_c
                .row(k)
                .iter()
                .zip(a_norm)
                .map(|(w, a)| w * a)
                .sum::<f64>()
                + g.b_c[(k, 0)]
        })
        .collect())
}

/// Graph-side gating parameters.
#[derive(Debug, Clone)]
pub enum GatingVars {
    Shared { w_c: Var, b_c: Var },
    /// One `(w_c, b_c)` pair per channel.
    PerChannel(Vec<(Var, Var)>),
}

impl GatingVars {
    pub fn constant(g: &mut Graph, p: &GatingParams) -> Self {
        GatingVars::Shared {
            w_c: g.constant(p.w_c.clone()),
            b_c: g.constant(p.b_c.clone()),
        }
    }
}

/// Normalized amplitude `Ã` (`S × d`) of a graph spectrum.
pub fn normalized_amplitude_graph(g: &mut Graph, z: Cx) -> Var {
    let amp = g.hypot(z.re, z.im);
    g.softmax_cols(amp)
}

/// Coefficients `Θ` (`(K+1) × d`) for every channel.
pub fn gate_graph(g: &mut Graph, a_norm: Var, p: &GatingVars) -> Var {
    match p {
        GatingVars::Shared { w_c, b_c } => {
            let lin = g.matmul(*w_c, a_norm);
            g.add_col(lin, *b_c)
        }
        GatingVars::PerChannel(per) => {
            let d = g.shape(a_norm).1;
            assert_eq!(per.len(), d, "per-channel gating: channel count");
            let mut theta: Option<Var> = None;
            for (c, (w_c, b_c)) in per.iter().enumerate() {
                let pick = g.constant(Mat::from_fn(d, 1, |i, _| (i == c) as u8 as f64));
                let place = g.constant(Mat::from_fn(1, d, |_, j| (j == c) as u8 as f64));
                let col = g.matmul(a_norm, pick);
                let lin = g.matmul(*w_c, col);
                let coef = g.add(lin, *b_c);
                let spread = g.matmul(coef, place);
                theta = Some(match theta {
                    Some(t) => g.add(t, spread),
                    None => spread,
                });
            }
            theta.expect("at least one channel")
        }
    }
}

/// Rebalanced spectrum together with the scale factors `p(s)` (`S × d`).
pub fn ser_graph(g: &mut Graph, z: Cx, p: &GatingVars) -> (Cx, Var) {
    let a_norm = normalized_amplitude_graph(g, z);
    let theta = gate_graph(g, a_norm, p);
    let scale = g.bernstein(theta, a_norm);
    (g.cx_scale_by(z, scale), scale)
}

fn check_bins(spec: &Spectrum, g: &GatingParams) -> Result<()> {
    if spec.bins() != g.bins() {
        return Err(Error::shape("ser_rebalance", g.bins(), spec.bins()));
    }
    Ok(())
}

/// Applies the energy rebalance to a spectrum with shared gating.
pub fn ser_rebalance(spec: &Spectrum, gate: &GatingParams) -> Result<Spectrum> {
    spec.ensure_finite()?;
    check_bins(spec, gate)?;
    let mut g = Graph::detached();
    let z = g.cx_constant(spec.re.clone(), spec.im.clone());
    let p = GatingVars::constant(&mut g, gate);
    let (out, _) = ser_graph(&mut g, z, &p);
    Spectrum::new(g.take_value(out.re), g.take_value(out.im))
}

/// Scale factors `p(s)` for each bin and channel with explicitly supplied
/// coefficients `theta` (`(K+1) × d`), bypassing the gate.
pub fn scale_with_coefficients(spec: &Spectrum, theta: &Mat) -> Result<Mat> {
    spec.ensure_finite()?;
    if theta.cols() != spec.channels() || theta.rows() < 2 {
        return Err(Error::shape(
            "scale_with_coefficients",
            format!("(K+1) x {}", spec.channels()),
            format!("{:?}", theta.shape()),
        ));
    }
    let mut g = Graph::detached();
    let z = g.cx_constant(spec.re.clone(), spec.im.clone());
    let a = normalized_amplitude_graph(&mut g, z);
    let th = g.constant(theta.clone());
    let s = g.bernstein(th, a);
    Ok(g.take_value(s))
}
