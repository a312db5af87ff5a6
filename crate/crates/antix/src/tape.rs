//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] records primitive operations during the forward pass into a
//! linear list of nodes (parents always precede children), then replays them
//! in reverse exactly once to accumulate adjoints. Tapes are rebuilt per
//! training step; there is no graph caching.
//!
//! Leaves come in two flavors: [`Tape::leaf`] for constants and inputs, and
//! [`Tape::param`] for named trainable tensors whose gradients are collected
//! by [`Tape::param_grads`] after [`Tape::backward`].

use std::collections::BTreeMap;

use thiserror::Error;

use crate::tensor::{matmul_nn_acc, matmul_nt, matmul_tn_acc, Tensor};

/// Epsilon inside the layer-norm variance square root.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Error)]
pub enum TapeError {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("backward already ran on this tape; record a fresh tape first")]
    DoubleBackward,
    #[error("parameter {0:?} registered twice on one tape")]
    DuplicateParam(String),
}

pub type Result<T> = std::result::Result<T, TapeError>;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Min2(Var, Var),
    Affine { x: Var, scale: f64 },
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Ln(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    Linear { x: Var, w: Var, b: Var },
    Bilinear { s: Var, a: Var, w3: Var, u: Option<Var>, v: Option<Var>, b: Var },
    LayerNorm { x: Var, gain: Var, shift: Var },
    ConcatCols(Var, Var),
    SliceCols { x: Var, start: usize, len: usize },
    RowSums(Var),
    SumAll(Var),
    MeanAll(Var),
}

struct Node {
    op: Op,
    value: Tensor,
    /// Per-row (mean, inv_std) pairs for layer norm; empty elsewhere.
    saved: Vec<f64>,
}

pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
    adjoints: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: Vec::new(),
            adjoints: Vec::new(),
            backward_done: false,
        }
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.push_saved(op, value, Vec::new())
    }

    fn push_saved(&mut self, op: Op, value: Tensor, saved: Vec<f64>) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node { op, value, saved });
        self.adjoints.push(None);
        Var(id)
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Records a constant/input leaf. No gradient is reported for it, but
    /// its adjoint is still reachable through [`Tape::grad`].
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t)
    }

    /// Registers a named trainable leaf (the tensor is snapshotted).
    pub fn param(&mut self, name: impl Into<String>, t: &Tensor) -> Result<Var> {
        let name = name.into();
        if self.params.iter().any(|(n, _)| *n == name) {
            return Err(TapeError::DuplicateParam(name));
        }
        let v = self.push(Op::Param, t.clone());
        self.params.push((name, v));
        Ok(v)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(TapeError::Shape {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn zip_elementwise(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        self.same_shape(op_name, a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(op, Tensor::new(shape, data)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_elementwise("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_elementwise("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_elementwise("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Elementwise minimum; ties route the gradient to the first argument.
    pub fn min2(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_elementwise("min2", a, b, f64::min, Op::Min2(a, b))
    }

    /// `scale * x + offset`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, offset: f64) -> Var {
        let t = self.map_unary(x, |v| scale * v + offset);
        self.push(Op::Affine { x, scale }, t)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.affine(x, -1.0, 0.0)
    }

    fn map_unary(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let src = self.value(x);
        Tensor::new(src.shape().to_vec(), src.data().iter().map(|v| f(*v)).collect())
    }

    /// ReLU with subgradient 0 at the kink.
    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.map_unary(x, |v| if v > 0.0 { v } else { 0.0 });
        self.push(Op::Relu(x), t)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = self.map_unary(x, f64::tanh);
        self.push(Op::Tanh(x), t)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.map_unary(x, |v| 1.0 / (1.0 + (-v).exp()));
        self.push(Op::Sigmoid(x), t)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let t = self.map_unary(x, f64::exp);
        self.push(Op::Exp(x), t)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let t = self.map_unary(x, f64::ln);
        self.push(Op::Ln(x), t)
    }

    /// Clamp with pass-through gradient inside `[lo, hi]` (inclusive).
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let t = self.map_unary(x, |v| v.clamp(lo, hi));
        self.push(Op::Clamp { x, lo, hi }, t)
    }

    /// `x @ w^T + b` with `x` either `[in]` or `[batch, in]`, `w` `[out, in]`,
    /// `b` `[out]`. Output rank matches the input rank.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (rows, in_dim) = self.value(x).as_rows();
        let w_shape = self.value(w).shape().to_vec();
        if w_shape.len() != 2 || w_shape[1] != in_dim {
            return Err(TapeError::Shape {
                op: "linear",
                lhs: self.value(x).shape().to_vec(),
                rhs: w_shape,
            });
        }
        let out_dim = w_shape[0];
        if self.value(b).shape() != [out_dim] {
            return Err(TapeError::Shape {
                op: "linear",
                lhs: w_shape,
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let mut out = vec![0.0; rows * out_dim];
        matmul_nt(
            &mut out,
            self.value(x).data(),
            self.value(w).data(),
            rows,
            in_dim,
            out_dim,
        );
        let bias = self.value(b).data();
        for row in out.chunks_exact_mut(out_dim) {
            for (o, bv) in row.iter_mut().zip(bias) {
                *o += bv;
            }
        }
        let shape = if self.value(x).shape().len() == 1 {
            vec![out_dim]
        } else {
            vec![rows, out_dim]
        };
        Ok(self.push(Op::Linear { x, w, b }, Tensor::new(shape, out)))
    }

    /// General bilinear form `out_k = s^T W3[k] a (+ (U s)_k + (V a)_k) + b_k`
    /// with `w3` shaped `[out, s_dim, a_dim]`, `u` `[out, s_dim]`, `v`
    /// `[out, a_dim]`. `s`/`a` are `[s_dim]`/`[a_dim]` or batched rows.
    pub fn bilinear(
        &mut self,
        s: Var,
        a: Var,
        w3: Var,
        u: Option<Var>,
        v: Option<Var>,
        b: Var,
    ) -> Result<Var> {
        let (s_rows, s_dim) = self.value(s).as_rows();
        let (a_rows, a_dim) = self.value(a).as_rows();
        if s_rows != a_rows {
            return Err(TapeError::Shape {
                op: "bilinear",
                lhs: self.value(s).shape().to_vec(),
                rhs: self.value(a).shape().to_vec(),
            });
        }
        let w_shape = self.value(w3).shape().to_vec();
        if w_shape.len() != 3 || w_shape[1] != s_dim || w_shape[2] != a_dim {
            return Err(TapeError::Shape {
                op: "bilinear",
                lhs: vec![s_dim, a_dim],
                rhs: w_shape,
            });
        }
        let out_dim = w_shape[0];
        if self.value(b).shape() != [out_dim] {
            return Err(TapeError::Shape {
                op: "bilinear",
                lhs: vec![out_dim],
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let sd = self.value(s).data();
        let ad = self.value(a).data();
        let wd = self.value(w3).data();
        let bd = self.value(b).data();
        let mut out = vec![0.0; s_rows * out_dim];
        for r in 0..s_rows {
            let srow = &sd[r * s_dim..(r + 1) * s_dim];
            let arow = &ad[r * a_dim..(r + 1) * a_dim];
            let orow = &mut out[r * out_dim..(r + 1) * out_dim];
            for (k, o) in orow.iter_mut().enumerate() {
                let wk = &wd[k * s_dim * a_dim..(k + 1) * s_dim * a_dim];
                let mut acc = bd[k];
                for (i, sv) in srow.iter().enumerate() {
                    if *sv == 0.0 {
                        continue;
                    }
                    let wrow = &wk[i * a_dim..(i + 1) * a_dim];
                    let mut dot = 0.0;
                    for (wv, av) in wrow.iter().zip(arow) {
                        dot += wv * av;
                    }
                    acc += sv * dot;
                }
                *o = acc;
            }
        }
        if let Some(u) = u {
            let ud = self.value(u);
            if ud.shape() != [out_dim, s_dim] {
                return Err(TapeError::Shape {
                    op: "bilinear",
                    lhs: vec![out_dim, s_dim],
                    rhs: ud.shape().to_vec(),
                });
            }
            let mut us = vec![0.0; s_rows * out_dim];
            matmul_nt(&mut us, sd, ud.data(), s_rows, s_dim, out_dim);
            for (o, x) in out.iter_mut().zip(&us) {
                *o += x;
            }
        }
        if let Some(v) = v {
            let vd = self.value(v);
            if vd.shape() != [out_dim, a_dim] {
                return Err(TapeError::Shape {
                    op: "bilinear",
                    lhs: vec![out_dim, a_dim],
                    rhs: vd.shape().to_vec(),
                });
            }
            let mut va = vec![0.0; s_rows * out_dim];
            matmul_nt(&mut va, ad, vd.data(), s_rows, a_dim, out_dim);
            for (o, x) in out.iter_mut().zip(&va) {
                *o += x;
            }
        }
        let shape = if self.value(s).shape().len() == 1 && self.value(a).shape().len() == 1 {
            vec![out_dim]
        } else {
            vec![s_rows, out_dim]
        };
        Ok(self.push(Op::Bilinear { s, a, w3, u, v, b }, Tensor::new(shape, out)))
    }

    /// Per-row layer normalization: `gain * (x - mean) / sqrt(var + eps) + shift`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var) -> Result<Var> {
        let (rows, d) = self.value(x).as_rows();
        for (nm, p) in [("gain", gain), ("shift", shift)] {
            let _ = nm;
            if self.value(p).shape() != [d] {
                return Err(TapeError::Shape {
                    op: "layer_norm",
                    lhs: self.value(x).shape().to_vec(),
                    rhs: self.value(p).shape().to_vec(),
                });
            }
        }
        let xd = self.value(x).data();
        let gd = self.value(gain).data();
        let sd = self.value(shift).data();
        let mut out = vec![0.0; rows * d];
        let mut saved = Vec::with_capacity(rows * 2);
        for r in 0..rows {
            let xr = &xd[r * d..(r + 1) * d];
            let mean = xr.iter().sum::<f64>() / d as f64;
            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            saved.push(mean);
            saved.push(inv_std);
            let orow = &mut out[r * d..(r + 1) * d];
            for j in 0..d {
                orow[j] = gd[j] * (xr[j] - mean) * inv_std + sd[j];
            }
        }
        let shape = self.value(x).shape().to_vec();
        Ok(self.push_saved(Op::LayerNorm { x, gain, shift }, Tensor::new(shape, out), saved))
    }

    /// Concatenates along the feature axis; ranks must match.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.value(a).as_rows();
        let (rb, cb) = self.value(b).as_rows();
        let rank_a = self.value(a).shape().len();
        if ra != rb || rank_a != self.value(b).shape().len() {
            return Err(TapeError::Shape {
                op: "concat_cols",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let mut out = Vec::with_capacity(ra * (ca + cb));
        for r in 0..ra {
            out.extend_from_slice(&ad[r * ca..(r + 1) * ca]);
            out.extend_from_slice(&bd[r * cb..(r + 1) * cb]);
        }
        let shape = if rank_a == 1 {
            vec![ca + cb]
        } else {
            vec![ra, ca + cb]
        };
        Ok(self.push(Op::ConcatCols(a, b), Tensor::new(shape, out)))
    }

    /// Takes columns `[start, start+len)` of each row.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.value(x).as_rows();
        if start + len > cols {
            return Err(TapeError::Shape {
                op: "slice_cols",
                lhs: self.value(x).shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&xd[r * cols + start..r * cols + start + len]);
        }
        let shape = if self.value(x).shape().len() == 1 {
            vec![len]
        } else {
            vec![rows, len]
        };
        Ok(self.push(Op::SliceCols { x, start, len }, Tensor::new(shape, out)))
    }

    /// `[batch, d] -> [batch]` row sums (a rank-1 input sums to a scalar).
    pub fn row_sums(&mut self, x: Var) -> Var {
        let (rows, d) = self.value(x).as_rows();
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(rows);
        for r in 0..rows {
            out.push(xd[r * d..(r + 1) * d].iter().sum());
        }
        let shape = if self.value(x).shape().len() == 1 {
            vec![1]
        } else {
            vec![rows]
        };
        self.push(Op::RowSums(x), Tensor::new(shape, out))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        self.push(Op::SumAll(x), Tensor::scalar(s))
    }

    /// Mean of all entries, as a scalar.
    pub fn mean_all(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let m = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Op::MeanAll(x), Tensor::scalar(m))
    }

    fn adjoint_mut(&mut self, v: Var) -> &mut Vec<f64> {
        let n = self.nodes[v.0].value.numel();
        self.adjoints[v.0].get_or_insert_with(|| vec![0.0; n])
    }

    /// Reverse pass from a scalar loss. Adjoints accumulate into every node;
    /// running it twice on one tape is an error.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(TapeError::DoubleBackward);
        }
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(TapeError::NonScalarLoss {
                shape: lt.shape().to_vec(),
            });
        }
        self.backward_done = true;
        self.adjoint_mut(loss)[0] = 1.0;

        for id in (0..self.nodes.len()).rev() {
            let Some(g) = self.adjoints[id].take() else {
                continue;
            };
            let op = self.nodes[id].op.clone();
            self.backward_op(id, &op, &g);
            self.adjoints[id] = Some(g);
        }
        Ok(())
    }

    fn backward_op(&mut self, id: usize, op: &Op, g: &[f64]) {
        match *op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                for (d, gv) in self.adjoint_mut(a).iter_mut().zip(g) {
                    *d += gv;
                }
                for (d, gv) in self.adjoint_mut(b).iter_mut().zip(g) {
                    *d += gv;
                }
            }
            Op::Sub(a, b) => {
                for (d, gv) in self.adjoint_mut(a).iter_mut().zip(g) {
                    *d += gv;
                }
                for (d, gv) in self.adjoint_mut(b).iter_mut().zip(g) {
                    *d -= gv;
                }
            }
            Op::Mul(a, b) => {
                let bv = self.nodes[b.0].value.data().to_vec();
                for ((d, gv), y) in self.adjoint_mut(a).iter_mut().zip(g).zip(&bv) {
                    *d += gv * y;
                }
                let av = self.nodes[a.0].value.data().to_vec();
                for ((d, gv), x) in self.adjoint_mut(b).iter_mut().zip(g).zip(&av) {
                    *d += gv * x;
                }
            }
            Op::Min2(a, b) => {
                let (av, bv) = (
                    self.nodes[a.0].value.data().to_vec(),
                    self.nodes[b.0].value.data().to_vec(),
                );
                {
                    let da = self.adjoint_mut(a);
                    for i in 0..g.len() {
                        if av[i] <= bv[i] {
                            da[i] += g[i];
                        }
                    }
                }
                let db = self.adjoint_mut(b);
                for i in 0..g.len() {
                    if av[i] > bv[i] {
                        db[i] += g[i];
                    }
                }
            }
            Op::Affine { x, scale } => {
                for (d, gv) in self.adjoint_mut(x).iter_mut().zip(g) {
                    *d += scale * gv;
                }
            }
            Op::Relu(x) => {
                let xv = self.nodes[x.0].value.data().to_vec();
                for ((d, gv), v) in self.adjoint_mut(x).iter_mut().zip(g).zip(&xv) {
                    if *v > 0.0 {
                        *d += gv;
                    }
                }
            }
            Op::Tanh(x) => {
                let yv = self.nodes[id].value.data().to_vec();
                for ((d, gv), y) in self.adjoint_mut(x).iter_mut().zip(g).zip(&yv) {
                    *d += gv * (1.0 - y * y);
                }
            }
            Op::Sigmoid(x) => {
                let yv = self.nodes[id].value.data().to_vec();
                for ((d, gv), y) in self.adjoint_mut(x).iter_mut().zip(g).zip(&yv) {
                    *d += gv * y * (1.0 - y);
                }
            }
            Op::Exp(x) => {
                let yv = self.nodes[id].value.data().to_vec();
                for ((d, gv), y) in self.adjoint_mut(x).iter_mut().zip(g).zip(&yv) {
                    *d += gv * y;
                }
            }
            Op::Ln(x) => {
                let xv = self.nodes[x.0].value.data().to_vec();
                for ((d, gv), v) in self.adjoint_mut(x).iter_mut().zip(g).zip(&xv) {
                    *d += gv / v;
                }
            }
            Op::Clamp { x, lo, hi } => {
                let xv = self.nodes[x.0].value.data().to_vec();
                for ((d, gv), v) in self.adjoint_mut(x).iter_mut().zip(g).zip(&xv) {
                    if *v >= lo && *v <= hi {
                        *d += gv;
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let (rows, in_dim) = self.nodes[x.0].value.as_rows();
                let out_dim = self.nodes[w.0].value.shape()[0];
                let wv = self.nodes[w.0].value.data().to_vec();
                let xv = self.nodes[x.0].value.data().to_vec();
                matmul_nn_acc(self.adjoint_mut(x), g, &wv, rows, out_dim, in_dim);
                matmul_tn_acc(self.adjoint_mut(w), g, &xv, rows, out_dim, in_dim);
                let db = self.adjoint_mut(b);
                for grow in g.chunks_exact(out_dim) {
                    for (d, gv) in db.iter_mut().zip(grow) {
                        *d += gv;
                    }
                }
            }
            Op::Bilinear { s, a, w3, u, v, b } => {
                self.backward_bilinear(s, a, w3, u, v, b, g);
            }
            Op::LayerNorm { x, gain, shift } => {
                let (rows, d) = self.nodes[x.0].value.as_rows();
                let xv = self.nodes[x.0].value.data().to_vec();
                let gv = self.nodes[gain.0].value.data().to_vec();
                let saved = self.nodes[id].saved.clone();
                {
                    let dgain = self.adjoint_mut(gain);
                    for r in 0..rows {
                        let (mean, inv_std) = (saved[2 * r], saved[2 * r + 1]);
                        for j in 0..d {
                            let xhat = (xv[r * d + j] - mean) * inv_std;
                            dgain[j] += g[r * d + j] * xhat;
                        }
                    }
                }
                {
                    let dshift = self.adjoint_mut(shift);
                    for grow in g.chunks_exact(d) {
                        for (dj, gj) in dshift.iter_mut().zip(grow) {
                            *dj += gj;
                        }
                    }
                }
                let dx = self.adjoint_mut(x);
                for r in 0..rows {
                    let (mean, inv_std) = (saved[2 * r], saved[2 * r + 1]);
                    let mut mean_gg = 0.0;
                    let mut mean_ggx = 0.0;
                    for j in 0..d {
                        let gg = g[r * d + j] * gv[j];
                        let xhat = (xv[r * d + j] - mean) * inv_std;
                        mean_gg += gg;
                        mean_ggx += gg * xhat;
                    }
                    mean_gg /= d as f64;
                    mean_ggx /= d as f64;
                    for j in 0..d {
                        let gg = g[r * d + j] * gv[j];
                        let xhat = (xv[r * d + j] - mean) * inv_std;
                        dx[r * d + j] += inv_std * (gg - mean_gg - xhat * mean_ggx);
                    }
                }
            }
            Op::ConcatCols(a, b) => {
                let (rows, ca) = self.nodes[a.0].value.as_rows();
                let (_, cb) = self.nodes[b.0].value.as_rows();
                {
                    let da = self.adjoint_mut(a);
                    for r in 0..rows {
                        for j in 0..ca {
                            da[r * ca + j] += g[r * (ca + cb) + j];
                        }
                    }
                }
                let db = self.adjoint_mut(b);
                for r in 0..rows {
                    for j in 0..cb {
                        db[r * cb + j] += g[r * (ca + cb) + ca + j];
                    }
                }
            }
            Op::SliceCols { x, start, len } => {
                let (rows, cols) = self.nodes[x.0].value.as_rows();
                let dx = self.adjoint_mut(x);
                for r in 0..rows {
                    for j in 0..len {
                        dx[r * cols + start + j] += g[r * len + j];
                    }
                }
            }
            Op::RowSums(x) => {
                let (rows, d) = self.nodes[x.0].value.as_rows();
                let dx = self.adjoint_mut(x);
                for r in 0..rows {
                    for j in 0..d {
                        dx[r * d + j] += g[r];
                    }
                }
            }
            Op::SumAll(x) => {
                let gv = g[0];
                for d in self.adjoint_mut(x).iter_mut() {
                    *d += gv;
                }
            }
            Op::MeanAll(x) => {
                let n = self.nodes[x.0].value.numel() as f64;
                let gv = g[0] / n;
                for d in self.adjoint_mut(x).iter_mut() {
                    *d += gv;
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_bilinear(
        &mut self,
        s: Var,
        a: Var,
        w3: Var,
        u: Option<Var>,
        v: Option<Var>,
        b: Var,
        g: &[f64],
    ) {
        let (rows, s_dim) = self.nodes[s.0].value.as_rows();
        let (_, a_dim) = self.nodes[a.0].value.as_rows();
        let out_dim = self.nodes[w3.0].value.shape()[0];
        let sv = self.nodes[s.0].value.data().to_vec();
        let av = self.nodes[a.0].value.data().to_vec();
        let wv = self.nodes[w3.0].value.data().to_vec();

        {
            let ds = self.adjoint_mut(s);
            for r in 0..rows {
                let arow = &av[r * a_dim..(r + 1) * a_dim];
                let grow = &g[r * out_dim..(r + 1) * out_dim];
                for (k, gk) in grow.iter().enumerate() {
                    if *gk == 0.0 {
                        continue;
                    }
                    let wk = &wv[k * s_dim * a_dim..(k + 1) * s_dim * a_dim];
                    for i in 0..s_dim {
                        let wrow = &wk[i * a_dim..(i + 1) * a_dim];
                        let mut dot = 0.0;
                        for (wij, aj) in wrow.iter().zip(arow) {
                            dot += wij * aj;
                        }
                        ds[r * s_dim + i] += gk * dot;
                    }
                }
            }
        }
        {
            let da = self.adjoint_mut(a);
            for r in 0..rows {
                let srow = &sv[r * s_dim..(r + 1) * s_dim];
                let grow = &g[r * out_dim..(r + 1) * out_dim];
                for (k, gk) in grow.iter().enumerate() {
                    if *gk == 0.0 {
                        continue;
                    }
                    let wk = &wv[k * s_dim * a_dim..(k + 1) * s_dim * a_dim];
                    for (i, si) in srow.iter().enumerate() {
                        if *si == 0.0 {
                            continue;
                        }
                        let wrow = &wk[i * a_dim..(i + 1) * a_dim];
                        let c = gk * si;
                        for (dj, wij) in da[r * a_dim..(r + 1) * a_dim].iter_mut().zip(wrow) {
                            *dj += c * wij;
                        }
                    }
                }
            }
        }
        {
            let dw = self.adjoint_mut(w3);
            for r in 0..rows {
                let srow = &sv[r * s_dim..(r + 1) * s_dim];
                let arow = &av[r * a_dim..(r + 1) * a_dim];
                let grow = &g[r * out_dim..(r + 1) * out_dim];
                for (k, gk) in grow.iter().enumerate() {
                    if *gk == 0.0 {
                        continue;
                    }
                    let wk = &mut dw[k * s_dim * a_dim..(k + 1) * s_dim * a_dim];
                    for (i, si) in srow.iter().enumerate() {
                        let c = gk * si;
                        if c == 0.0 {
                            continue;
                        }
                        for (dij, aj) in wk[i * a_dim..(i + 1) * a_dim].iter_mut().zip(arow) {
                            *dij += c * aj;
                        }
                    }
                }
            }
        }
        if let Some(u) = u {
            let du = self.adjoint_mut(u);
            matmul_tn_acc(du, g, &sv, rows, out_dim, s_dim);
        }
        if let Some(v) = v {
            let dv = self.adjoint_mut(v);
            matmul_tn_acc(dv, g, &av, rows, out_dim, a_dim);
        }
        let db = self.adjoint_mut(b);
        for grow in g.chunks_exact(out_dim) {
            for (d, gv) in db.iter_mut().zip(grow) {
                *d += gv;
            }
        }
    }

    /// Adjoint of any node after [`Tape::backward`]; `None` when no gradient
    /// flowed to it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.adjoints[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.nodes[v.0].value.shape().to_vec(), g.clone()))
    }

    /// Gradients for every registered parameter, keyed by name. Parameters the
    /// loss never touched report zeros.
    pub fn param_grads(&self) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .map(|(name, v)| {
                let t = self
                    .grad(*v)
                    .unwrap_or_else(|| Tensor::zeros(self.nodes[v.0].value.shape().to_vec()));
                (name.clone(), t)
            })
            .collect()
    }
}
