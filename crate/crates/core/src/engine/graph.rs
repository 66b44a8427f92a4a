//! Tape-based reverse-mode differentiation over matrix-valued nodes.
//!
//! A [`Graph`] records every operation of one forward pass. Values are
//! computed eagerly as nodes are pushed; [`Graph::backward`] walks the tape
//! in reverse and returns gradients aligned with the [`ParameterStore`] the
//! graph was opened against. Gradients are accumulated in a fixed order, so
//! the same inputs always give bitwise-identical results.

use crate::engine::params::{Gradients, ParamId, ParameterStore};
use crate::error::{Error, Result};
use crate::ser::bernstein_values;
use crate::spectral::{dft_rows, Direction};
use crate::tensor::Mat;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// A complex quantity represented by two real nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Cx {
    pub re: Var,
    pub im: Var,
}

/// Arithmetic precision of recorded values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    /// IEEE single precision: every node value and gradient is rounded to
    /// `f32` as it is produced.
    F32,
    #[default]
    F64,
}

#[derive(Debug, Clone, Copy)]
enum Broadcast {
    Row,
    Col,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBroadcast(Var, Var, Broadcast),
    Relu(Var),
    Tanh(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    SoftmaxCols(Var),
    LayerNorm { x: Var, gain: Var, bias: Var },
    Hypot(Var, Var),
    Bernstein { theta: Var, w: Var },
    Scatter {
        visible: Var,
        token: Var,
        visible_rows: Vec<usize>,
        masked_rows: Vec<usize>,
    },
    Gather { x: Var, rows: Vec<usize> },
    MeanRows(Var),
    Reshape(Var),
    Dft {
        re: Var,
        im: Option<Var>,
        direction: Direction,
        scale: f64,
        imag_part: bool,
    },
    WeightedSqErr { a: Var, b: Var, weights: Mat },
    CrossEntropy { logits: Var, labels: Vec<usize> },
    Sum(Var),
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Recording of one forward computation.
pub struct Graph<'a> {
    store: Option<&'a ParameterStore>,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    precision: Precision,
    relu_margin: f64,
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParameterStore) -> Self {
        Self {
            store: Some(store),
            nodes: Vec::new(),
            param_vars: vec![None; store.len()],
            precision: Precision::F64,
            relu_margin: f64::INFINITY,
        }
    }

    /// A graph with no parameters, for evaluating pure functions.
    pub fn detached() -> Graph<'static> {
        Graph {
            store: None,
            nodes: Vec::new(),
            param_vars: Vec::new(),
            precision: Precision::F64,
            relu_margin: f64::INFINITY,
        }
    }

    pub fn with_precision(mut self, precision: Precision) -> Self {
        self.precision = precision;
        self
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn take_value(&self, v: Var) -> Mat {
        self.nodes[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Smallest `|x|` seen at the input of any ReLU so far. Finite-difference
    /// probes closer than `h` to a kink are not meaningful.
    pub fn relu_margin(&self) -> f64 {
        self.relu_margin
    }

    fn push(&mut self, mut value: Mat, op: Op, needs_grad: bool) -> Var {
        if self.precision == Precision::F32 {
            round_f32(&mut value);
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A constant input; never receives gradient.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Mat::scalar(value))
    }

    /// The node for a stored parameter. Repeated calls return the same node.
    /// Parameters flagged non-trainable enter as constants.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let store = self.store.expect("graph has no parameter store");
        let p = store.get(id);
        let v = self.push(p.value.clone(), Op::Param(id), p.trainable);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_t(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMulT(a, b), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let ng = self.ng(a);
        self.push(value, Op::Transpose(a), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        let ng = self.ng(a);
        self.push(value, Op::Scale(a, s), ng)
    }

    /// `x + 1·row` where `row` is `1 × cols`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let (r, c) = self.shape(x);
        assert_eq!(self.shape(row), (1, c), "add_row: bias shape");
        let b = self.value(row).as_slice().to_vec();
        let value = Mat::from_fn(r, c, |i, j| self.value(x)[(i, j)] + b[j]);
        let ng = self.ng(x) || self.ng(row);
        self.push(value, Op::AddBroadcast(x, row, Broadcast::Row), ng)
    }

    /// `x + col·1ᵀ` where `col` is `rows × 1`.
    pub fn add_col(&mut self, x: Var, col: Var) -> Var {
        let (r, c) = self.shape(x);
        assert_eq!(self.shape(col), (r, 1), "add_col: bias shape");
        let b = self.value(col).as_slice().to_vec();
        let value = Mat::from_fn(r, c, |i, j| self.value(x)[(i, j)] + b[i]);
        let ng = self.ng(x) || self.ng(col);
        self.push(value, Op::AddBroadcast(x, col, Broadcast::Col), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let margin = self
            .value(a)
            .as_slice()
            .iter()
            .fold(f64::INFINITY, |m, x| m.min(x.abs()));
        self.relu_margin = self.relu_margin.min(margin);
        let value = self.value(a).map(|x| x.max(0.0));
        let ng = self.ng(a);
        self.push(value, Op::Relu(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        let ng = self.ng(a);
        self.push(value, Op::Tanh(a), ng)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self
            .value(a)
            .map(|x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()));
        let ng = self.ng(a);
        self.push(value, Op::Gelu(a), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a));
        let ng = self.ng(a);
        self.push(value, Op::SoftmaxRows(a), ng)
    }

    /// Softmax down each column.
    pub fn softmax_cols(&mut self, a: Var) -> Var {
        let value = softmax_rows(&self.value(a).transpose()).transpose();
        let ng = self.ng(a);
        self.push(value, Op::SoftmaxCols(a), ng)
    }

    /// Normalizes each row across its columns, then applies the `1 × cols`
    /// gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let (r, c) = self.shape(x);
        assert_eq!(self.shape(gain), (1, c));
        assert_eq!(self.shape(bias), (1, c));
        let (xhat, _) = normalize_rows(self.value(x));
        let g = self.value(gain);
        let b = self.value(bias);
        let value = Mat::from_fn(r, c, |i, j| xhat[(i, j)] * g[(0, j)] + b[(0, j)]);
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        self.push(value, Op::LayerNorm { x, gain, bias }, ng)
    }

    /// Entrywise `sqrt(a² + b²)`.
    pub fn hypot(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), f64::hypot);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Hypot(a, b), ng)
    }

    /// `out[s, c] = Σ_k theta[k, c] · B_k^K(w[s, c])` with `K = rows(theta) − 1`.
    /// Every `w` must lie in `[0, 1]`.
    pub fn bernstein(&mut self, theta: Var, w: Var) -> Var {
        let (k1, d) = self.shape(theta);
        let (s, dw) = self.shape(w);
        assert_eq!(d, dw, "bernstein: channel mismatch");
        assert!(k1 >= 2, "bernstein: order K >= 1 required");
        let th = self.value(theta);
        let wv = self.value(w);
        let mut basis = vec![0.0; k1];
        let mut value = Mat::zeros(s, d);
        for i in 0..s {
            for c in 0..d {
                bernstein_values(k1 - 1, wv[(i, c)], &mut basis);
                value[(i, c)] = (0..k1).map(|k| th[(k, c)] * basis[k]).sum();
            }
        }
        let ng = self.ng(theta) || self.ng(w);
        self.push(value, Op::Bernstein { theta, w }, ng)
    }

    /// Builds a `(visible + masked) × d` tensor: row `visible_rows[i]` takes
    /// row `i` of `visible`, every row in `masked_rows` takes `token` (`1 × d`).
    pub fn scatter(
        &mut self,
        visible: Var,
        token: Var,
        visible_rows: &[usize],
        masked_rows: &[usize],
    ) -> Var {
        let (nv, d) = self.shape(visible);
        assert_eq!(nv, visible_rows.len(), "scatter: visible row count");
        assert_eq!(self.shape(token), (1, d), "scatter: token shape");
        let total = nv + masked_rows.len();
        let mut value = Mat::zeros(total, d);
        for (i, &r) in visible_rows.iter().enumerate() {
            value.row_mut(r).copy_from_slice(self.value(visible).row(i));
        }
        for &r in masked_rows {
            value.row_mut(r).copy_from_slice(self.value(token).row(0));
        }
        let ng = self.ng(visible) || self.ng(token);
        self.push(
            value,
            Op::Scatter {
                visible,
                token,
                visible_rows: visible_rows.to_vec(),
                masked_rows: masked_rows.to_vec(),
            },
            ng,
        )
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Var {
        let value = self.value(x).select_rows(rows);
        let ng = self.ng(x);
        self.push(
            value,
            Op::Gather {
                x,
                rows: rows.to_vec(),
            },
            ng,
        )
    }

    /// Column means, `1 × cols`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let (r, c) = self.shape(x);
        let m = self.value(x);
        let value = Mat::from_fn(1, c, |_, j| (0..r).map(|i| m[(i, j)]).sum::<f64>() / r as f64);
        let ng = self.ng(x);
        self.push(value, Op::MeanRows(x), ng)
    }

    /// Row-major reinterpretation.
    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let value = self
            .value(x)
            .clone()
            .reshape(rows, cols)
            .expect("reshape: element count");
        let ng = self.ng(x);
        self.push(value, Op::Reshape(x), ng)
    }

    fn dft_part(
        &mut self,
        re: Var,
        im: Option<Var>,
        direction: Direction,
        scale: f64,
        imag_part: bool,
    ) -> Var {
        let (out_re, out_im) = dft_rows(self.value(re), im.map(|v| self.value(v)), direction);
        let value = if imag_part { out_im } else { out_re }.scale(scale);
        let ng = self.ng(re) || im.is_some_and(|v| self.ng(v));
        self.push(
            value,
            Op::Dft {
                re,
                im,
                direction,
                scale,
                imag_part,
            },
            ng,
        )
    }

    /// Forward DFT of a real tensor along rows.
    pub fn dft(&mut self, x: Var) -> Cx {
        let re = self.dft_part(x, None, Direction::Forward, 1.0, false);
        let im = self.dft_part(x, None, Direction::Forward, 1.0, true);
        Cx { re, im }
    }

    /// Forward DFT of a complex tensor along rows.
    pub fn dft_complex(&mut self, z: Cx) -> Cx {
        let re = self.dft_part(z.re, Some(z.im), Direction::Forward, 1.0, false);
        let im = self.dft_part(z.re, Some(z.im), Direction::Forward, 1.0, true);
        Cx { re, im }
    }

    /// Inverse DFT (`1/T`), real part only.
    pub fn idft_real(&mut self, z: Cx) -> Var {
        let n = self.shape(z.re).0 as f64;
        self.dft_part(z.re, Some(z.im), Direction::Backward, 1.0 / n, false)
    }

    /// Inverse DFT (`1/T`), imaginary part only.
    pub fn idft_imag(&mut self, z: Cx) -> Var {
        let n = self.shape(z.re).0 as f64;
        self.dft_part(z.re, Some(z.im), Direction::Backward, 1.0 / n, true)
    }

    /// `Σ weights ⊙ (a − b)²` as a `1 × 1` node.
    pub fn weighted_sq_err(&mut self, a: Var, b: Var, weights: Mat) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "weighted_sq_err: shapes");
        assert_eq!(self.shape(a), weights.shape(), "weighted_sq_err: weights");
        let av = self.value(a).as_slice();
        let bv = self.value(b).as_slice();
        let total: f64 = av
            .iter()
            .zip(bv)
            .zip(weights.as_slice())
            .map(|((x, y), w)| w * (x - y) * (x - y))
            .sum();
        let ng = self.ng(a) || self.ng(b);
        self.push(Mat::scalar(total), Op::WeightedSqErr { a, b, weights }, ng)
    }

    /// Mean cross-entropy of row-wise logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, k) = self.shape(logits);
        if labels.len() != n {
            return Err(Error::shape("cross_entropy", n, labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {k} classes"
            )));
        }
        let lv = self.value(logits);
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = lv.row(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            total += lse - row[y];
        }
        let ng = self.ng(logits);
        Ok(self.push(
            Mat::scalar(total / n as f64),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            ng,
        ))
    }

    /// Sum of all entries, `1 × 1`.
    pub fn sum(&mut self, x: Var) -> Var {
        let value = Mat::scalar(self.value(x).sum());
        let ng = self.ng(x);
        self.push(value, Op::Sum(x), ng)
    }

    // Complex helpers.

    pub fn cx_add(&mut self, a: Cx, b: Cx) -> Cx {
        Cx {
            re: self.add(a.re, b.re),
            im: self.add(a.im, b.im),
        }
    }

    /// Entrywise complex product.
    pub fn cx_mul(&mut self, a: Cx, b: Cx) -> Cx {
        let rr = self.mul(a.re, b.re);
        let ii = self.mul(a.im, b.im);
        let ri = self.mul(a.re, b.im);
        let ir = self.mul(a.im, b.re);
        Cx {
            re: self.sub(rr, ii),
            im: self.add(ri, ir),
        }
    }

    /// Scales both parts by the same real tensor.
    pub fn cx_scale_by(&mut self, a: Cx, s: Var) -> Cx {
        Cx {
            re: self.mul(a.re, s),
            im: self.mul(a.im, s),
        }
    }

    pub fn cx_constant(&mut self, re: Mat, im: Mat) -> Cx {
        Cx {
            re: self.constant(re),
            im: self.constant(im),
        }
    }

    /// Reverse pass from a `1 × 1` root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let store = self
            .store
            .ok_or_else(|| Error::InvalidArgument("backward on a detached graph".into()))?;
        self.backward_with(root, Gradients::zeros_like(store))
    }

    /// Reverse pass accumulating into `grads`.
    pub fn backward_with(&self, root: Var, mut grads: Gradients) -> Result<Gradients> {
        if self.shape(root) != (1, 1) {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar root, got {:?}",
                self.shape(root)
            )));
        }
        let mut adj: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[root.0] = Some(Mat::scalar(1.0));
        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if let Op::Param(id) = node.op {
                grads.accumulate(id, &g);
                continue;
            }
            for (v, mut contrib) in self.local_grads(i, &g) {
                if !self.nodes[v.0].needs_grad {
                    continue;
                }
                if self.precision == Precision::F32 {
                    round_f32(&mut contrib);
                }
                match &mut adj[v.0] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Ok(grads)
    }

    /// Gradient contributions to each input of node `i` given its adjoint.
    fn local_grads(&self, i: usize, g: &Mat) -> Vec<(Var, Mat)> {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf | Op::Param(_) => vec![],
            Op::MatMul(a, b) => vec![(*a, g.matmul_t(val(*b))), (*b, val(*a).t_matmul(g))],
            Op::MatMulT(a, b) => vec![(*a, g.matmul(val(*b))), (*b, g.t_matmul(val(*a)))],
            Op::Transpose(a) => vec![(*a, g.transpose())],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.scale(-1.0))],
            Op::Mul(a, b) => vec![
                (*a, g.zip_map(val(*b), |x, y| x * y)),
                (*b, g.zip_map(val(*a), |x, y| x * y)),
            ],
            Op::Scale(a, s) => vec![(*a, g.scale(*s))],
            Op::AddBroadcast(x, b, how) => {
                let (r, c) = g.shape();
                let gb = match how {
                    Broadcast::Row => {
                        Mat::from_fn(1, c, |_, j| (0..r).map(|i| g[(i, j)]).sum())
                    }
                    Broadcast::Col => Mat::from_fn(r, 1, |i, _| g.row(i).iter().sum()),
                };
                vec![(*x, g.clone()), (*b, gb)]
            }
            Op::Relu(a) => vec![(*a, g.zip_map(val(*a), |gi, x| if x > 0.0 { gi } else { 0.0 }))],
            Op::Tanh(a) => vec![(*a, g.zip_map(&node.value, |gi, y| gi * (1.0 - y * y)))],
            Op::Gelu(a) => vec![(
                *a,
                g.zip_map(val(*a), |gi, x| {
                    let u = GELU_C * (x + 0.044715 * x * x * x);
                    let t = u.tanh();
                    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                    gi * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                }),
            )],
            Op::SoftmaxRows(a) => vec![(*a, softmax_rows_backward(&node.value, g))],
            Op::SoftmaxCols(a) => vec![(
                *a,
                softmax_rows_backward(&node.value.transpose(), &g.transpose()).transpose(),
            )],
            Op::LayerNorm { x, gain, bias } => {
                let (xhat, inv_std) = normalize_rows(val(*x));
                let (r, c) = g.shape();
                let gv = val(*gain);
                let mut dx = Mat::zeros(r, c);
                let mut dgain = Mat::zeros(1, c);
                let mut dbias = Mat::zeros(1, c);
                for i in 0..r {
                    let mut mean_d = 0.0;
                    let mut mean_dx = 0.0;
                    for j in 0..c {
                        let d = g[(i, j)] * gv[(0, j)];
                        mean_d += d;
                        mean_dx += d * xhat[(i, j)];
                        dgain[(0, j)] += g[(i, j)] * xhat[(i, j)];
                        dbias[(0, j)] += g[(i, j)];
                    }
                    mean_d /= c as f64;
                    mean_dx /= c as f64;
                    for j in 0..c {
                        let d = g[(i, j)] * gv[(0, j)];
                        dx[(i, j)] = inv_std[i] * (d - mean_d - xhat[(i, j)] * mean_dx);
                    }
                }
                vec![(*x, dx), (*gain, dgain), (*bias, dbias)]
            }
            Op::Hypot(a, b) => {
                let h = &node.value;
                let part = |src: &Mat| {
                    Mat::from_fn(g.rows(), g.cols(), |i, j| {
                        let hv = h[(i, j)];
                        if hv > 0.0 {
                            g[(i, j)] * src[(i, j)] / hv
                        } else {
                            0.0
                        }
                    })
                };
                vec![(*a, part(val(*a))), (*b, part(val(*b)))]
            }
            Op::Bernstein { theta, w } => {
                let th = val(*theta);
                let wv = val(*w);
                let (k1, d) = th.shape();
                let order = k1 - 1;
                let mut dtheta = Mat::zeros(k1, d);
                let mut dw = Mat::zeros(wv.rows(), d);
                let mut basis = vec![0.0; k1];
                let mut lower = vec![0.0; order];
                for s in 0..wv.rows() {
                    for c in 0..d {
                        let gi = g[(s, c)];
                        let x = wv[(s, c)];
                        bernstein_values(order, x, &mut basis);
                        for k in 0..k1 {
                            dtheta[(k, c)] += gi * basis[k];
                        }
                        // d/dw Σ θ_k B_k^K = K Σ_{k<K} (θ_{k+1} − θ_k) B_k^{K−1}
                        bernstein_values(order - 1, x, &mut lower);
                        let deriv: f64 = (0..order)
                            .map(|k| (th[(k + 1, c)] - th[(k, c)]) * lower[k])
                            .sum::<f64>()
                            * order as f64;
                        dw[(s, c)] = gi * deriv;
                    }
                }
                vec![(*theta, dtheta), (*w, dw)]
            }
            Op::Scatter {
                visible,
                token,
                visible_rows,
                masked_rows,
            } => {
                let d = g.cols();
                let dv = g.select_rows(visible_rows);
                let mut dt = Mat::zeros(1, d);
                for &r in masked_rows {
                    for j in 0..d {
                        dt[(0, j)] += g[(r, j)];
                    }
                }
                vec![(*visible, dv), (*token, dt)]
            }
            Op::Gather { x, rows } => {
                let src = val(*x);
                let mut dx = Mat::zeros(src.rows(), src.cols());
                for (i, &r) in rows.iter().enumerate() {
                    for j in 0..src.cols() {
                        dx[(r, j)] += g[(i, j)];
                    }
                }
                vec![(*x, dx)]
            }
            Op::MeanRows(x) => {
                let (r, c) = val(*x).shape();
                vec![(*x, Mat::from_fn(r, c, |_, j| g[(0, j)] / r as f64))]
            }
            Op::Reshape(x) => {
                let (r, c) = val(*x).shape();
                vec![(*x, g.clone().reshape(r, c).expect("reshape adjoint"))]
            }
            Op::Dft {
                re,
                im,
                direction,
                scale,
                imag_part,
            } => {
                // Adjoint of a DFT is the transform with conjugated kernel.
                let zero = Mat::zeros(g.rows(), g.cols());
                let (gr, gi) = if *imag_part { (&zero, g) } else { (g, &zero) };
                let adjoint_dir = match direction {
                    Direction::Forward => Direction::Backward,
                    Direction::Backward => Direction::Forward,
                };
                let (ar, ai) = dft_rows(gr, Some(gi), adjoint_dir);
                let mut out = vec![(*re, ar.scale(*scale))];
                if let Some(im) = im {
                    out.push((*im, ai.scale(*scale)));
                }
                out
            }
            Op::WeightedSqErr { a, b, weights } => {
                let s = g[(0, 0)];
                let da = Mat::from_fn(weights.rows(), weights.cols(), |i, j| {
                    2.0 * s * weights[(i, j)] * (val(*a)[(i, j)] - val(*b)[(i, j)])
                });
                let db = da.scale(-1.0);
                vec![(*a, da), (*b, db)]
            }
            Op::CrossEntropy { logits, labels } => {
                let lv = val(*logits);
                let n = labels.len() as f64;
                let mut p = softmax_rows(lv);
                for (i, &y) in labels.iter().enumerate() {
                    p[(i, y)] -= 1.0;
                }
                vec![(*logits, p.scale(g[(0, 0)] / n))]
            }
            Op::Sum(x) => {
                let (r, c) = val(*x).shape();
                vec![(*x, Mat::filled(r, c, g[(0, 0)]))]
            }
        }
    }
}

fn round_f32(m: &mut Mat) {
    for x in m.as_mut_slice() {
        *x = *x as f32 as f64;
    }
}

/// Numerically stable softmax of each row.
pub fn softmax_rows(x: &Mat) -> Mat {
    let (r, c) = x.shape();
    let mut out = Mat::zeros(r, c);
    for i in 0..r {
        let row = x.row(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for j in 0..c {
            let e = (row[j] - m).exp();
            out[(i, j)] = e;
            z += e;
        }
        for j in 0..c {
            out[(i, j)] /= z;
        }
    }
    out
}

fn softmax_rows_backward(y: &Mat, g: &Mat) -> Mat {
    let (r, c) = y.shape();
    let mut out = Mat::zeros(r, c);
    for i in 0..r {
        let dot: f64 = (0..c).map(|j| g[(i, j)] * y[(i, j)]).sum();
        for j in 0..c {
            out[(i, j)] = y[(i, j)] * (g[(i, j)] - dot);
        }
    }
    out
}

/// Row-wise `(x − mean)/sqrt(var + eps)` and the per-row `1/sqrt(var + eps)`.
fn normalize_rows(x: &Mat) -> (Mat, Vec<f64>) {
    let (r, c) = x.shape();
    let mut out = Mat::zeros(r, c);
    let mut inv = Vec::with_capacity(r);
    for i in 0..r {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        for j in 0..c {
            out[(i, j)] = (row[j] - mean) * is;
        }
        inv.push(is);
    }
    (out, inv)
}
