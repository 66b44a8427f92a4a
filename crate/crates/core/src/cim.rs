//! Content-aware interaction modulation.
//!
//! A complex affine map `W_F·Z(s) + b_F` (weights shared across bins) is
//! passed through a split activation to form the modulation signal `M(s)`,
//! which then multiplies the spectrum bin by bin. Multiplying spectra is a
//! circular convolution in time, so the unit acts as a content-dependent
//! convolution kernel.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::engine::graph::{Cx, Graph, Var};
use crate::error::{Error, Result};
use crate::spectral::Spectrum;
use crate::tensor::Mat;

/// `W_F = w_re + j·w_im` (`d × d`), `b_F = b_re + j·b_im` (`1 × d`).
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexAffineParams {
    pub w_re: Mat,
    pub w_im: Mat,
    pub b_re: Mat,
    pub b_im: Mat,
}

impl ComplexAffineParams {
    pub fn new(w_re: Mat, w_im: Mat, b_re: Mat, b_im: Mat) -> Result<Self> {
        let d = w_re.rows();
        for (name, m, shape) in [
            ("w_re", &w_re, (d, d)),
            ("w_im", &w_im, (d, d)),
            ("b_re", &b_re, (1, d)),
            ("b_im", &b_im, (1, d)),
        ] {
            if m.shape() != shape {
                return Err(Error::shape("ComplexAffineParams", format!("{name} {shape:?}"), format!("{:?}", m.shape())));
            }
            m.ensure_finite(name)?;
        }
        Ok(Self { w_re, w_im, b_re, b_im })
    }

    /// Zero weights, `b = 1 + 0j`: `M ≡ 1` under split-ReLU or the identity
    /// map under no activation.
    pub fn bias_only(d: usize) -> Self {
        Self {
            w_re: Mat::zeros(d, d),
            w_im: Mat::zeros(d, d),
            b_re: Mat::filled(1, d, 1.0),
            b_im: Mat::zeros(1, d),
        }
    }

    /// `w = I`, `b = 0`.
    pub fn identity(d: usize) -> Self {
        Self {
            w_re: Mat::identity(d),
            w_im: Mat::zeros(d, d),
            b_re: Mat::zeros(1, d),
            b_im: Mat::zeros(1, d),
        }
    }

    /// Weights uniform in `±1/√d`, bias `1 + 0j`.
    pub fn uniform<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (d as f64).sqrt();
        Self {
            w_re: Mat::uniform(d, d, bound, rng),
            w_im: Mat::uniform(d, d, bound, rng),
            b_re: Mat::filled(1, d, 1.0),
            b_im: Mat::zeros(1, d),
        }
    }

    pub fn dim(&self) -> usize {
        self.w_re.rows()
    }
}

/// Split activation, applied independently to real and imaginary parts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitActivation {
    #[default]
    Relu,
    Tanh,
}

#[derive(Debug, Clone, Copy)]
pub struct CimVars {
    pub w_re: Var,
    pub w_im: Var,
    pub b_re: Var,
    pub b_im: Var,
}

impl CimVars {
    pub fn constant(g: &mut Graph, p: &ComplexAffineParams) -> Self {
        Self {
            w_re: g.constant(p.w_re.clone()),
            w_im: g.constant(p.w_im.clone()),
            b_re: g.constant(p.b_re.clone()),
            b_im: g.constant(p.b_im.clone()),
        }
    }
}

/// `re' = Z_re·w_reᵀ − Z_im·w_imᵀ + b_re`, `im' = Z_im·w_reᵀ + Z_re·w_imᵀ + b_im`.
pub fn complex_affine_graph(g: &mut Graph, z: Cx, p: &CimVars) -> Cx {
    let rr = g.matmul_t(z.re, p.w_re);
    let ii = g.matmul_t(z.im, p.w_im);
    let ir = g.matmul_t(z.im, p.w_re);
    let ri = g.matmul_t(z.re, p.w_im);
    let re = g.sub(rr, ii);
    let re = g.add_row(re, p.b_re);
    let im = g.add(ir, ri);
    let im = g.add_row(im, p.b_im);
    Cx { re, im }
}

pub fn split_activation_graph(g: &mut Graph, z: Cx, act: SplitActivation) -> Cx {
    match act {
        SplitActivation::Relu => Cx {
            re: g.relu(z.re),
            im: g.relu(z.im),
        },
        SplitActivation::Tanh => Cx {
            re: g.tanh(z.re),
            im: g.tanh(z.im),
        },
    }
}

/// `M = σ(W_F·source + b_F)`.
pub fn modulation_signal_graph(g: &mut Graph, source: Cx, p: &CimVars, act: SplitActivation) -> Cx {
    let pre = complex_affine_graph(g, source, p);
    split_activation_graph(g, pre, act)
}

/// `M ⊙ Z`.
pub fn modulate_with_signal_graph(g: &mut Graph, z: Cx, signal: Cx) -> Cx {
    g.cx_mul(signal, z)
}

/// Modulation signal computed from `z` itself, applied to `z`.
pub fn cim_graph(g: &mut Graph, z: Cx, p: &CimVars, act: SplitActivation) -> Cx {
    let m = modulation_signal_graph(g, z, p, act);
    modulate_with_signal_graph(g, z, m)
}

fn check(spec: &Spectrum, p: &ComplexAffineParams) -> Result<()> {
    spec.ensure_finite()?;
    if spec.channels() != p.dim() {
        return Err(Error::shape("cim", p.dim(), spec.channels()));
    }
    Ok(())
}

fn run(spec: &Spectrum, p: &ComplexAffineParams, f: impl FnOnce(&mut Graph, Cx, &CimVars) -> Cx) -> Result<Spectrum> {
    check(spec, p)?;
    let mut g = Graph::detached();
    let z = g.cx_constant(spec.re.clone(), spec.im.clone());
    let vars = CimVars::constant(&mut g, p);
    let out = f(&mut g, z, &vars);
    Spectrum::new(g.take_value(out.re), g.take_value(out.im))
}

/// `W_F·Z(s) + b_F` at every bin.
pub fn complex_affine(spec: &Spectrum, p: &ComplexAffineParams) -> Result<Spectrum> {
    run(spec, p, complex_affine_graph)
}

pub fn modulation_signal(spec: &Spectrum, p: &ComplexAffineParams, act: SplitActivation) -> Result<Spectrum> {
    run(spec, p, |g, z, v| modulation_signal_graph(g, z, v, act))
}

pub fn cim_modulate(spec: &Spectrum, p: &ComplexAffineParams, act: SplitActivation) -> Result<Spectrum> {
    run(spec, p, |g, z, v| cim_graph(g, z, v, act))
}

/// Elementwise complex product of a modulation signal with a spectrum.
pub fn modulate_with_signal(spec: &Spectrum, signal: &Spectrum) -> Result<Spectrum> {
    if spec.shape() != signal.shape() {
        return Err(Error::shape("modulate_with_signal", format!("{:?}", spec.shape()), format!("{:?}", signal.shape())));
    }
    let re = Mat::from_fn(spec.bins(), spec.channels(), |s, c| {
        signal.re[(s, c)] * spec.re[(s, c)] - signal.im[(s, c)] * spec.im[(s, c)]
    });
    let im = Mat::from_fn(spec.bins(), spec.channels(), |s, c| {
        signal.re[(s, c)] * spec.im[(s, c)] + signal.im[(s, c)] * spec.re[(s, c)]
    });
    Spectrum::new(re, im)
}
