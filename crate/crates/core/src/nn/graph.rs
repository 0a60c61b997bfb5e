//! A reverse-mode tape over [`Tensor`] values.
//!
//! A [`Graph`] is built for one forward pass. Nodes are appended in
//! evaluation order, so [`Graph::backward`] can walk them in reverse and
//! accumulate vector-Jacobian products. Parameter leaves reference a
//! [`ParamStore`]; their gradients come back as [`Grads`].

use std::sync::Arc;

use super::params::{Grads, ParamId, ParamStore};
use crate::dsp::StftPlan;
use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    kernel: usize,
    stride: usize,
    pad: usize,
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    /// `a * b^T`
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// Adds a `rows x 1` column to every column.
    AddCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Silu(Var),
    Relu(Var),
    Exp(Var),
    Ln(Var),
    Powf(Var, f64),
    Transpose(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    RepeatCols(Var),
    Conv1d { x: Var, w: Var, b: Var, geom: ConvGeom },
    Upsample2(Var),
    AvgPool2(Var),
    SoftmaxRows(Var),
    /// Stores `1 / sigma` per group.
    GroupNorm { a: Var, groups: usize, inv_std: Vec<f64> },
    /// `out[i][j] = table[row][i - j + lk - 1]`
    Toeplitz { table: Var, row: usize, lk: usize },
    StftPower { x: Var, plan: Arc<StftPlan> },
    Istft { re: Var, im: Var, plan: Arc<StftPlan> },
    MeanAbsDiff(Var, Var),
    Mean(Var),
    SumSq(Var),
}

struct Node {
    value: Tensor,
    op: Op,
}

pub struct Graph<'a> {
    store: &'a ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn im2col(x: &Tensor, geom: ConvGeom, l_out: usize) -> Tensor {
    let (cin, l) = x.shape();
    let k = geom.kernel;
    let mut col = Tensor::zeros(cin * k, l_out);
    for c in 0..cin {
        let xr = x.row(c);
        for j in 0..k {
            let dst = col.row_mut(c * k + j);
            for (o, d) in dst.iter_mut().enumerate() {
                let t = (o * geom.stride + j) as isize - geom.pad as isize;
                if t >= 0 && (t as usize) < l {
                    *d = xr[t as usize];
                }
            }
        }
    }
    col
}

fn col2im(dcol: &Tensor, geom: ConvGeom, cin: usize, l: usize) -> Tensor {
    let k = geom.kernel;
    let mut dx = Tensor::zeros(cin, l);
    for c in 0..cin {
        for j in 0..k {
            let src = dcol.row(c * k + j);
            let dst = dx.row_mut(c);
            for (o, g) in src.iter().enumerate() {
                let t = (o * geom.stride + j) as isize - geom.pad as isize;
                if t >= 0 && (t as usize) < l {
                    dst[t as usize] += g;
                }
            }
        }
    }
    dx
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self { store, nodes: Vec::new(), param_vars: vec![None; store.len()] }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        debug_assert!(value.is_finite() || matches!(op, Op::Leaf), "non-finite value produced");
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
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

    /// A constant input; receives no gradient outside the tape.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.index()] {
            return v;
        }
        let v = self.push(self.store.get(id).clone(), Op::Param(id));
        self.param_vars[id.index()] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Tensor::zeros(av.rows(), bv.rows());
        gemm(av, false, bv, true, &mut out, 0.0);
        self.push(out, Op::MatMulNT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(out, Op::Mul(a, b))
    }

    pub fn add_col(&mut self, x: Var, col: Var) -> Var {
        let (xv, cv) = (self.value(x), self.value(col));
        assert_eq!((cv.rows(), cv.cols()), (xv.rows(), 1), "add_col expects a matching column");
        let mut out = xv.clone();
        for r in 0..out.rows() {
            let b = cv.get(r, 0);
            out.row_mut(r).iter_mut().for_each(|v| *v += b);
        }
        self.push(out, Op::AddCol(x, col))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scaled(s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x + s);
        self.push(out, Op::AddScalar(a))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * sigmoid(x));
        self.push(out, Op::Silu(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(out, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        self.push(out, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::ln);
        self.push(out, Op::Ln(a))
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        let out = self.value(a).map(|x| x.powf(p));
        self.push(out, Op::Powf(a, p))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols(), cols, "concat_rows column mismatch");
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        self.push(Tensor::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                out.row_mut(r)[off..off + v.cols()].copy_from_slice(v.row(r));
            }
            off += v.cols();
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a);
        let cols = v.cols();
        let out = Tensor::from_vec(len, cols, v.data()[start * cols..(start + len) * cols].to_vec());
        self.push(out, Op::SliceRows(a, start))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a);
        let out = Tensor::from_fn(v.rows(), len, |r, c| v.get(r, start + c));
        self.push(out, Op::SliceCols(a, start))
    }

    /// Broadcasts a `rows x 1` column to `rows x n`.
    pub fn repeat_cols(&mut self, a: Var, n: usize) -> Var {
        let v = self.value(a);
        assert_eq!(v.cols(), 1, "repeat_cols expects a column");
        let out = Tensor::from_fn(v.rows(), n, |r, _| v.get(r, 0));
        self.push(out, Op::RepeatCols(a))
    }

    /// 1-D convolution of a `cin x L` map with weights `cout x (cin*kernel)`
    /// and bias `cout x 1`, zero padding `pad` on both sides.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, kernel: usize, stride: usize, pad: usize) -> Var {
        let geom = ConvGeom { kernel, stride, pad };
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (cin, l) = xv.shape();
        assert_eq!(wv.cols(), cin * kernel, "conv weight expects {} inputs", wv.cols() / kernel);
        assert!(l + 2 * pad >= kernel, "conv input shorter than kernel");
        let l_out = (l + 2 * pad - kernel) / stride + 1;
        let col = im2col(xv, geom, l_out);
        let mut out = Tensor::zeros(wv.rows(), l_out);
        gemm(wv, false, &col, false, &mut out, 0.0);
        for r in 0..out.rows() {
            let bias = bv.get(r, 0);
            out.row_mut(r).iter_mut().for_each(|v| *v += bias);
        }
        self.push(out, Op::Conv1d { x, w, b, geom })
    }

    /// Nearest-neighbour x2 along columns.
    pub fn upsample2(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let out = Tensor::from_fn(v.rows(), v.cols() * 2, |r, c| v.get(r, c / 2));
        self.push(out, Op::Upsample2(a))
    }

    /// Mean of adjacent column pairs; requires an even number of columns.
    pub fn avg_pool2(&mut self, a: Var) -> Var {
        let v = self.value(a);
        assert!(v.cols().is_multiple_of(2), "avg_pool2 needs even length");
        let out = Tensor::from_fn(v.rows(), v.cols() / 2, |r, c| 0.5 * (v.get(r, 2 * c) + v.get(r, 2 * c + 1)));
        self.push(out, Op::AvgPool2(a))
    }

    /// Normalizes each of `groups` contiguous row blocks to zero mean, unit
    /// variance over all its entries. No affine part.
    pub fn group_norm(&mut self, a: Var, groups: usize, eps: f64) -> Var {
        let mut out = self.value(a).clone();
        let (rows, cols) = out.shape();
        assert!(groups > 0 && rows % groups == 0, "group_norm: {rows} rows into {groups} groups");
        let per = rows / groups * cols;
        let mut inv_std = Vec::with_capacity(groups);
        for chunk in out.data_mut().chunks_mut(per) {
            let mean = chunk.iter().sum::<f64>() / per as f64;
            let var = chunk.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / per as f64;
            let inv = 1.0 / (var + eps).sqrt();
            chunk.iter_mut().for_each(|x| *x = (*x - mean) * inv);
            inv_std.push(inv);
        }
        self.push(out, Op::GroupNorm { a, groups, inv_std })
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let m = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let mut s = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                s += *x;
            }
            row.iter_mut().for_each(|x| *x /= s);
        }
        self.push(out, Op::SoftmaxRows(a))
    }

    /// Expands row `row` of a table indexed by relative offset into an
    /// `lq x lk` matrix. Column `d` of the table holds offset `d - (lk - 1)`.
    pub fn toeplitz(&mut self, table: Var, row: usize, lq: usize, lk: usize) -> Var {
        let t = self.value(table);
        assert_eq!(t.cols(), lq + lk - 1, "toeplitz table needs lq + lk - 1 offsets");
        let tr = t.row(row);
        let out = Tensor::from_fn(lq, lk, |i, j| tr[i + lk - 1 - j]);
        self.push(out, Op::Toeplitz { table, row, lk })
    }

    /// `|STFT(x)|^2` of a `1 x T` signal, laid out `bins x frames`.
    pub fn stft_power(&mut self, x: Var, plan: Arc<StftPlan>) -> Var {
        let v = self.value(x);
        assert_eq!(v.rows(), 1, "stft_power expects a 1 x T signal");
        let out = plan.power(v.data());
        self.push(out, Op::StftPower { x, plan })
    }

    /// Resynthesis of `bins x frames` real/imaginary parts to a `1 x (frames*hop)` signal.
    pub fn istft(&mut self, re: Var, im: Var, plan: Arc<StftPlan>) -> Var {
        let (rv, iv) = (self.value(re), self.value(im));
        assert_eq!(rv.shape(), iv.shape());
        let len = rv.cols() * plan.config().hop_len;
        let out = plan.synthesize_parts(rv, iv, len);
        self.push(Tensor::from_vec(1, len, out), Op::Istft { re, im, plan })
    }

    pub fn mean_abs_diff(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "mean_abs_diff shape mismatch");
        let m = av.data().iter().zip(bv.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / av.len() as f64;
        self.push(Tensor::scalar(m), Op::MeanAbsDiff(a, b))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let m = self.value(a).mean();
        self.push(Tensor::scalar(m), Op::Mean(a))
    }

    pub fn sum_sq(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().map(|x| x * x).sum();
        self.push(Tensor::scalar(s), Op::SumSq(a))
    }

    /// Sum of scalars.
    pub fn sum_scalars(&mut self, xs: &[Var]) -> Var {
        let mut acc = xs[0];
        for &x in &xs[1..] {
            acc = self.add(acc, x);
        }
        acc
    }

    /// Back-propagates from the scalar `loss` and returns parameter gradients.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut out = Grads::zeros_like(self.store);

        fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot => *slot = Some(g),
            }
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let val = |v: Var| &self.nodes[v.0].value;
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => out.accumulate(*id, &g),
                Op::MatMul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let mut da = Tensor::zeros(av.rows(), av.cols());
                    gemm(&g, false, bv, true, &mut da, 0.0);
                    let mut db = Tensor::zeros(bv.rows(), bv.cols());
                    gemm(av, true, &g, false, &mut db, 0.0);
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::MatMulNT(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let mut da = Tensor::zeros(av.rows(), av.cols());
                    gemm(&g, false, bv, false, &mut da, 0.0);
                    let mut db = Tensor::zeros(bv.rows(), bv.cols());
                    gemm(&g, true, av, false, &mut db, 0.0);
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, g.scaled(-1.0));
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    acc(&mut grads, *a, g.zip_map(val(*b), |g, y| g * y));
                    acc(&mut grads, *b, g.zip_map(val(*a), |g, x| g * x));
                }
                Op::AddCol(x, col) => {
                    acc(&mut grads, *col, g.row_means().scaled(g.cols() as f64));
                    acc(&mut grads, *x, g);
                }
                Op::Scale(a, s) => acc(&mut grads, *a, g.scaled(*s)),
                Op::AddScalar(a) => acc(&mut grads, *a, g),
                Op::Silu(a) => {
                    let d = g.zip_map(val(*a), |g, x| {
                        let s = sigmoid(x);
                        g * (s + x * s * (1.0 - s))
                    });
                    acc(&mut grads, *a, d);
                }
                Op::Relu(a) => acc(&mut grads, *a, g.zip_map(val(*a), |g, x| if x > 0.0 { g } else { 0.0 })),
                Op::Exp(a) => acc(&mut grads, *a, g.zip_map(&node.value, |g, y| g * y)),
                Op::Ln(a) => acc(&mut grads, *a, g.zip_map(val(*a), |g, x| g / x)),
                Op::Powf(a, p) => acc(&mut grads, *a, g.zip_map(val(*a), |g, x| g * p * x.powf(p - 1.0))),
                Op::Transpose(a) => acc(&mut grads, *a, g.transpose()),
                Op::ConcatRows(parts) => {
                    let cols = g.cols();
                    let mut off = 0;
                    for &p in parts {
                        let rows = val(p).rows();
                        let piece = Tensor::from_vec(rows, cols, g.data()[off * cols..(off + rows) * cols].to_vec());
                        off += rows;
                        acc(&mut grads, p, piece);
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let c = val(p).cols();
                        let piece = Tensor::from_fn(g.rows(), c, |r, j| g.get(r, off + j));
                        off += c;
                        acc(&mut grads, p, piece);
                    }
                }
                Op::SliceRows(a, start) => {
                    let av = val(*a);
                    let mut d = Tensor::zeros(av.rows(), av.cols());
                    let cols = av.cols();
                    d.data_mut()[start * cols..start * cols + g.len()].copy_from_slice(g.data());
                    acc(&mut grads, *a, d);
                }
                Op::SliceCols(a, start) => {
                    let av = val(*a);
                    let mut d = Tensor::zeros(av.rows(), av.cols());
                    for r in 0..g.rows() {
                        d.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    acc(&mut grads, *a, d);
                }
                Op::RepeatCols(a) => acc(&mut grads, *a, g.row_means().scaled(g.cols() as f64)),
                Op::Conv1d { x, w, b, geom } => {
                    let (xv, wv) = (val(*x), val(*w));
                    let col = im2col(xv, *geom, g.cols());
                    let mut dw = Tensor::zeros(wv.rows(), wv.cols());
                    gemm(&g, false, &col, true, &mut dw, 0.0);
                    let mut dcol = Tensor::zeros(col.rows(), col.cols());
                    gemm(wv, true, &g, false, &mut dcol, 0.0);
                    acc(&mut grads, *b, g.row_means().scaled(g.cols() as f64));
                    acc(&mut grads, *w, dw);
                    acc(&mut grads, *x, col2im(&dcol, *geom, xv.rows(), xv.cols()));
                }
                Op::Upsample2(a) => {
                    let av = val(*a);
                    let d = Tensor::from_fn(av.rows(), av.cols(), |r, c| g.get(r, 2 * c) + g.get(r, 2 * c + 1));
                    acc(&mut grads, *a, d);
                }
                Op::AvgPool2(a) => {
                    let av = val(*a);
                    let d = Tensor::from_fn(av.rows(), av.cols(), |r, c| 0.5 * g.get(r, c / 2));
                    acc(&mut grads, *a, d);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut d = Tensor::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for (dst, (yv, gv)) in d.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                            *dst = yv * (gv - dot);
                        }
                    }
                    acc(&mut grads, *a, d);
                }
                Op::GroupNorm { a, groups, inv_std } => {
                    let y = &node.value;
                    let per = y.len() / groups;
                    let mut d = g.clone();
                    for ((dc, yc), &inv) in d.data_mut().chunks_mut(per).zip(y.data().chunks(per)).zip(inv_std) {
                        let mg = dc.iter().sum::<f64>() / per as f64;
                        let mgy = dc.iter().zip(yc).map(|(a, b)| a * b).sum::<f64>() / per as f64;
                        for (dv, &yv) in dc.iter_mut().zip(yc) {
                            *dv = inv * (*dv - mg - yv * mgy);
                        }
                    }
                    acc(&mut grads, *a, d);
                }
                Op::Toeplitz { table, row, lk } => {
                    let tv = val(*table);
                    let mut d = Tensor::zeros(tv.rows(), tv.cols());
                    for i in 0..g.rows() {
                        for j in 0..g.cols() {
                            let k = i + lk - 1 - j;
                            let cur = d.get(*row, k);
                            d.set(*row, k, cur + g.get(i, j));
                        }
                    }
                    acc(&mut grads, *table, d);
                }
                Op::StftPower { x, plan } => {
                    let dx = plan.power_backward(val(*x).data(), &g);
                    acc(&mut grads, *x, Tensor::from_vec(1, dx.len(), dx));
                }
                Op::Istft { re, im, plan } => {
                    let n_frames = val(*re).cols();
                    let (dre, dim) = plan.synthesize_parts_backward(g.data(), n_frames);
                    acc(&mut grads, *re, dre);
                    acc(&mut grads, *im, dim);
                }
                Op::MeanAbsDiff(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let s = g.item() / av.len() as f64;
                    let da = av.zip_map(bv, |x, y| if x > y { s } else if x < y { -s } else { 0.0 });
                    acc(&mut grads, *b, da.scaled(-1.0));
                    acc(&mut grads, *a, da);
                }
                Op::Mean(a) => {
                    let av = val(*a);
                    acc(&mut grads, *a, Tensor::filled(av.rows(), av.cols(), g.item() / av.len() as f64));
                }
                Op::SumSq(a) => {
                    let s = 2.0 * g.item();
                    acc(&mut grads, *a, val(*a).scaled(s));
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::StftConfig;

    /// Central differences of `f` with respect to every entry of `x`.
    fn numeric_grad(x: &Tensor, f: &dyn Fn(&Tensor) -> f64) -> Tensor {
        let h = 1e-5;
        let mut g = Tensor::zeros(x.rows(), x.cols());
        for i in 0..x.len() {
            let mut p = x.clone();
            p.data_mut()[i] += h;
            let up = f(&p);
            p.data_mut()[i] -= 2.0 * h;
            let down = f(&p);
            g.data_mut()[i] = (up - down) / (2.0 * h);
        }
        g
    }

    fn assert_close(a: &Tensor, b: &Tensor, tol: f64) {
        let scale = b.max_abs().max(1e-6);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= tol * scale, "{x} vs {y}");
        }
    }

    fn ramp(rows: usize, cols: usize, seed: f64) -> Tensor {
        Tensor::from_fn(rows, cols, |r, c| ((r * cols + c) as f64 * 0.731 + seed).sin())
    }

    /// Checks the gradient of `loss(graph, input)` w.r.t. a single parameter.
    fn check(x0: Tensor, build: impl Fn(&mut Graph, Var) -> Var) {
        let mut store = ParamStore::new();
        let id = store.add("x", x0.clone());
        let eval = |t: &Tensor| {
            let mut s = ParamStore::new();
            s.add("x", t.clone());
            let mut g = Graph::new(&s);
            let x = g.param(ParamId::from_index(0));
            let l = build(&mut g, x);
            g.value(l).item()
        };
        let mut g = Graph::new(&store);
        let x = g.param(id);
        let l = build(&mut g, x);
        let analytic = g.backward(l);
        assert_close(analytic.get(id), &numeric_grad(&x0, &eval), 1e-6);
    }

    #[test]
    fn elementwise_and_matmul_gradients() {
        let w = ramp(3, 4, 0.3);
        check(ramp(2, 3, 0.1), |g, x| {
            let wv = g.input(w.clone());
            let y = g.matmul(x, wv);
            let y = g.silu(y);
            let z = g.exp(y);
            let z = g.mul(z, y);
            g.sum_sq(z)
        });
        check(ramp(3, 4, 0.7), |g, x| {
            let t = g.transpose(x);
            let p = g.matmul_nt(t, t);
            let q = g.scale(p, 0.3);
            let q = g.add_scalar(q, 2.0);
            let q = g.ln(q);
            let r = g.powf(q, 1.5);
            g.mean(r)
        });
    }

    #[test]
    fn group_norm_gradient_and_moments() {
        let w = ramp(6, 5, 0.9);
        check(ramp(6, 5, 0.4), |g, x| {
            let y = g.group_norm(x, 3, 1e-5);
            let wv = g.input(w.clone());
            let z = g.mul(y, wv);
            g.sum_sq(z)
        });
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let x = g.input(ramp(4, 8, 0.2));
        let y = g.group_norm(x, 2, 0.0);
        let half = &g.value(y).data()[..16];
        assert!(half.iter().sum::<f64>().abs() < 1e-12);
        assert!((half.iter().map(|v| v * v).sum::<f64>() / 16.0 - 1.0).abs() < 1e-10);
    }

    #[test]
    fn structural_op_gradients() {
        check(ramp(4, 6, 0.2), |g, x| {
            let a = g.slice_rows(x, 1, 2);
            let b = g.slice_rows(x, 0, 4);
            let ab = g.matmul_nt(a, b);
            let c = g.concat_rows(&[ab, ab]);
            let col = g.slice_cols(x, 0, 1);
            let col4 = g.slice_rows(col, 0, 4);
            let d = g.add_col(c, col4);
            let e = g.concat_cols(&[d, c]);
            let u = g.upsample2(e);
            let p = g.avg_pool2(u);
            let p = g.relu(p);
            let s = g.softmax_rows(p);
            let rep = g.repeat_cols(col4, 8);
            let m = g.mul(s, rep);
            g.sum_sq(m)
        });
    }

    #[test]
    fn conv_and_toeplitz_gradients() {
        let w = ramp(5, 3 * 3, 1.1);
        let b = ramp(5, 1, 0.4);
        for stride in [1, 2] {
            check(ramp(3, 10, 0.5), |g, x| {
                let (wv, bv) = (g.input(w.clone()), g.input(b.clone()));
                let y = g.conv1d(x, wv, bv, 3, stride, 1);
                g.sum_sq(y)
            });
        }
        check(ramp(5, 9, 0.5), |g, x| {
            let wv = g.input(w.clone());
            let xs = g.slice_rows(x, 0, 3);
            let bv = g.slice_cols(x, 0, 1);
            let y = g.conv1d(xs, wv, bv, 3, 1, 1);
            g.sum_sq(y)
        });
        check(ramp(2, 7, 0.9), |g, t| {
            let b = g.toeplitz(t, 1, 3, 5);
            let s = g.softmax_rows(b);
            g.sum_sq(s)
        });
    }

    #[test]
    fn spectral_op_gradients() {
        let plan = Arc::new(StftPlan::new(StftConfig::with_hop(4).unwrap()).unwrap());
        let p2 = plan.clone();
        check(ramp(1, 24, 0.2), move |g, x| {
            let p = g.stft_power(x, p2.clone());
            g.mean(p)
        });
        let target = ramp(1, 24, 1.3);
        check(ramp(9, 6, 0.6), move |g, re| {
            let im = g.scale(re, 0.5);
            let im = g.exp(im);
            let y = g.istft(re, im, plan.clone());
            let t = g.input(target.clone());
            let d = g.sub(y, t);
            g.sum_sq(d)
        });
    }

    #[test]
    fn repeated_parameter_use_accumulates() {
        check(ramp(2, 2, 0.0), |g, x| {
            let y = g.add(x, x);
            let z = g.mul(y, x);
            g.mean(z)
        });
    }
}
