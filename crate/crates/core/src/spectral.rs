//! Discrete Fourier transform along the temporal (row) axis of feature
//! tensors, plus the amplitude and circular-convolution helpers.
//!
//! Conventions: rows are indexed `0..T`, the forward transform is
//! unnormalized with kernel `exp(-j·2π·s·t/T)`, and the inverse carries the
//! `1/T` factor. Every `T ≥ 1` is supported (prime lengths included); the
//! transform is evaluated directly from an exact-index twiddle table, so
//! cost is `O(T²·d)`.

use crate::error::{Error, Result};
use crate::tensor::Mat;

/// Real-valued feature tensor: `T` temporal rows × `d` channels.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor(Mat);

impl FeatureTensor {
    pub fn new(values: Mat) -> Result<Self> {
        if values.rows() == 0 || values.cols() == 0 {
            return Err(Error::InvalidArgument(format!(
                "feature tensor needs T >= 1 and d >= 1, got {}x{}",
                values.rows(),
                values.cols()
            )));
        }
        values.ensure_finite("feature")?;
        Ok(Self(values))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(Mat::from_rows(rows))
    }

    /// Length-`T` single-channel tensor.
    pub fn from_series(values: &[f64]) -> Result<Self> {
        Self::new(Mat::column(values))
    }

    pub fn len(&self) -> usize {
        self.0.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.rows() == 0
    }

    pub fn channels(&self) -> usize {
        self.0.cols()
    }

    pub fn values(&self) -> &Mat {
        &self.0
    }

    pub fn into_inner(self) -> Mat {
        self.0
    }
}

/// Complex spectrum, `S` frequency bins × `d` channels, stored as separate
/// real and imaginary planes.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub re: Mat,
    pub im: Mat,
}

impl Spectrum {
    pub fn new(re: Mat, im: Mat) -> Result<Self> {
        if re.shape() != im.shape() {
            return Err(Error::shape(
                "Spectrum::new",
                format!("{:?}", re.shape()),
                format!("{:?}", im.shape()),
            ));
        }
        if re.rows() == 0 || re.cols() == 0 {
            return Err(Error::InvalidArgument("empty spectrum".into()));
        }
        re.ensure_finite("spectrum.re")?;
        im.ensure_finite("spectrum.im")?;
        Ok(Self { re, im })
    }

    pub fn zeros(bins: usize, channels: usize) -> Self {
        Self {
            re: Mat::zeros(bins, channels),
            im: Mat::zeros(bins, channels),
        }
    }

    pub fn bins(&self) -> usize {
        self.re.rows()
    }

    pub fn channels(&self) -> usize {
        self.re.cols()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.re.shape()
    }

    pub(crate) fn ensure_finite(&self) -> Result<()> {
        self.re.ensure_finite("spectrum.re")?;
        self.im.ensure_finite("spectrum.im")
    }
}

/// Transform direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// Kernel `exp(-j·θ)`.
    Forward,
    /// Kernel `exp(+j·θ)`; no normalization applied.
    Backward,
}

struct Twiddles {
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl Twiddles {
    fn new(n: usize) -> Self {
        let step = 2.0 * std::f64::consts::PI / n as f64;
        let (cos, sin) = (0..n)
            .map(|k| {
                let a = step * k as f64;
                (a.cos(), a.sin())
            })
            .unzip();
        Self { cos, sin }
    }
}

/// Unnormalized complex DFT along rows: `out[s] = Σ_t x[t]·exp(∓j·2π·s·t/T)`.
///
/// `im = None` treats the input as real. This is the kernel behind both the
/// public transforms and the differentiable graph op (whose adjoint is the
/// same routine in the opposite direction).
pub fn dft_rows(re: &Mat, im: Option<&Mat>, direction: Direction) -> (Mat, Mat) {
    let (n, d) = re.shape();
    if let Some(im) = im {
        assert_eq!(im.shape(), re.shape(), "dft_rows: re/im shape mismatch");
    }
    let tw = Twiddles::new(n.max(1));
    let sign = match direction {
        Direction::Forward => -1.0,
        Direction::Backward => 1.0,
    };
    let mut out_re = Mat::zeros(n, d);
    let mut out_im = Mat::zeros(n, d);
    for s in 0..n {
        for t in 0..n {
            let k = (s * t) % n;
            let c = tw.cos[k];
            let sn = sign * tw.sin[k];
            let xr = re.row(t);
            match im {
                Some(im) => {
                    let xi = im.row(t);
                    for ch in 0..d {
                        out_re[(s, ch)] += xr[ch] * c - xi[ch] * sn;
                        out_im[(s, ch)] += xi[ch] * c + xr[ch] * sn;
                    }
                }
                None => {
                    for ch in 0..d {
                        out_re[(s, ch)] += xr[ch] * c;
                        out_im[(s, ch)] += xr[ch] * sn;
                    }
                }
            }
        }
    }
    (out_re, out_im)
}

/// Forward DFT of every channel; `S = T` bins.
pub fn dft_forward(z: &FeatureTensor) -> Spectrum {
    let (re, im) = dft_rows(z.values(), None, Direction::Forward);
    Spectrum { re, im }
}

/// Inverse DFT keeping the real part, together with the Frobenius norm of
/// the discarded imaginary residue.
pub fn dft_inverse_with_residue(spec: &Spectrum) -> Result<(FeatureTensor, f64)> {
    spec.ensure_finite()?;
    let n = spec.bins() as f64;
    let (re, im) = dft_rows(&spec.re, Some(&spec.im), Direction::Backward);
    let residue = im.frobenius_norm() / n;
    Ok((FeatureTensor(re.scale(1.0 / n)), residue))
}

/// Inverse DFT (`1/T` normalized), real part only.
pub fn dft_inverse(spec: &Spectrum) -> Result<FeatureTensor> {
    dft_inverse_with_residue(spec).map(|(z, _)| z)
}

/// Entrywise modulus `sqrt(re² + im²)`.
pub fn amplitude(spec: &Spectrum) -> Mat {
    spec.re.zip_map(&spec.im, f64::hypot)
}

/// Per-channel circular convolution `out[t] = Σ_τ k[τ]·z[(t − τ) mod T]`.
pub fn circular_convolve(k: &FeatureTensor, z: &FeatureTensor) -> Result<FeatureTensor> {
    if k.values().shape() != z.values().shape() {
        return Err(Error::shape(
            "circular_convolve",
            format!("{:?}", z.values().shape()),
            format!("{:?}", k.values().shape()),
        ));
    }
    let (n, d) = z.values().shape();
    let (kv, zv) = (k.values(), z.values());
    let mut out = Mat::zeros(n, d);
    for t in 0..n {
        for tau in 0..n {
            let src = (t + n - tau) % n;
            for c in 0..d {
                out[(t, c)] += kv[(tau, c)] * zv[(src, c)];
            }
        }
    }
    Ok(FeatureTensor(out))
}

/// Sum of squared entries (temporal-domain energy).
pub fn energy(z: &Mat) -> f64 {
    z.as_slice().iter().map(|x| x * x).sum()
}

/// Sum of squared moduli over all bins and channels.
pub fn spectral_energy(spec: &Spectrum) -> f64 {
    energy(&spec.re) + energy(&spec.im)
}
