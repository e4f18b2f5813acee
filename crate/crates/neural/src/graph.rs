//! Reverse-mode differentiation over a tape of matrix operations.
//!
//! A [`Graph`] records every operation applied to its variables. Parameter
//! leaves borrow their values from a [`ParamStore`]; calling
//! [`Graph::backward`] accumulates parameter gradients into a caller-owned
//! buffer, so per-example graphs can be reduced into one batch gradient.

use crate::error::{shape, Error, Result};
use crate::params::ParamStore;
use crate::tensor::{matmul_nt_acc, matmul_tn_acc, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Const,
    Param(usize),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        kernel: usize,
    },
    /// `argmax[o * cols + c]` is the input row that won output cell (o, c).
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
        frozen: Option<usize>,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Reshape(Var),
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Softmax(Var),
    CrossEntropy {
        probs: Var,
        label: usize,
    },
    SumAll(Var),
}

struct Node {
    /// `None` for parameters, whose value lives in the store.
    value: Option<Tensor>,
    op: Op,
}

pub const LOG_CLAMP: f64 = 1e-12;

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0] {
            Node { value: Some(t), .. } => t,
            Node { op: Op::Param(p), .. } => &self.params.tensors[*p],
            _ => unreachable!("non-parameter node without value"),
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value: Some(value), op });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Const)
    }

    pub fn param(&mut self, id: usize) -> Var {
        if let Some(v) = self.param_vars[id] {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id] = Some(v);
        v
    }

    pub fn param_named(&mut self, name: &str) -> Result<Var> {
        let id = self.params.id(name)?;
        Ok(self.param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.cols != y.rows {
            return Err(shape("matmul", format!("{:?} x {:?}", x.shape(), y.shape())));
        }
        let out = x.matmul(y);
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(shape("add", format!("{:?} + {:?}", x.shape(), y.shape())));
        }
        let mut out = x.clone();
        out.add_assign(y);
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// Adds a `1 x cols` row to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (x, b) = (self.value(a), self.value(bias));
        if b.rows != 1 || b.cols != x.cols {
            return Err(shape("add_bias", format!("{:?} + {:?}", x.shape(), b.shape())));
        }
        let mut out = x.clone();
        for r in 0..out.rows {
            for (o, bv) in out.data[r * x.cols..(r + 1) * x.cols].iter_mut().zip(&b.data) {
                *o += bv;
            }
        }
        Ok(self.push(out, Op::AddBias(a, bias)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(shape("mul", format!("{:?} * {:?}", x.shape(), y.shape())));
        }
        let data = x.data.iter().zip(&y.data).map(|(p, q)| p * q).collect();
        let out = Tensor::from_vec(x.rows, x.cols, data)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|v| v * s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| 1.0 / (1.0 + (-v).exp()));
        self.push(out, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(0.0));
        self.push(out, Op::Relu(a))
    }

    /// Same-padded 1-D convolution over rows. `x` is `T x C`, `w` is
    /// `(kernel * C) x F` with row `k * C + c`, `b` is `1 x F`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, kernel: usize) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (t, c) = xv.shape();
        if kernel == 0 || t == 0 {
            return Err(shape("conv1d", format!("kernel {kernel} over {t} steps")));
        }
        if wv.rows != kernel * c || bv.rows != 1 || bv.cols != wv.cols {
            return Err(shape(
                "conv1d",
                format!(
                    "input {:?}, weights {:?}, bias {:?}",
                    xv.shape(),
                    wv.shape(),
                    bv.shape()
                ),
            ));
        }
        let f = wv.cols;
        let pad = (kernel - 1) / 2;
        let mut out = Tensor::zeros(t, f);
        for o in 0..t {
            let orow = &mut out.data[o * f..(o + 1) * f];
            orow.copy_from_slice(&bv.data);
            for k in 0..kernel {
                let Some(src) = (o + k).checked_sub(pad).filter(|&s| s < t) else {
                    continue;
                };
                for (ci, &xval) in xv.row(src).iter().enumerate() {
                    if xval == 0.0 {
                        continue;
                    }
                    for (acc, &wval) in orow.iter_mut().zip(wv.row(k * c + ci)) {
                        *acc += xval * wval;
                    }
                }
            }
        }
        Ok(self.push(out, Op::Conv1d { x, w, b, kernel }))
    }

    /// Max pooling over rows; ties go to the first row of the window.
    pub fn maxpool1d(&mut self, x: Var, size: usize, stride: usize) -> Result<Var> {
        let xv = self.value(x);
        let (t, c) = xv.shape();
        if size == 0 || stride == 0 || t < size {
            return Err(shape(
                "maxpool1d",
                format!("size {size} stride {stride} over {t} steps"),
            ));
        }
        let n_out = (t - size) / stride + 1;
        let mut out = Tensor::zeros(n_out, c);
        let mut argmax = vec![0; n_out * c];
        for o in 0..n_out {
            for ch in 0..c {
                let mut best = o * stride;
                for r in o * stride + 1..o * stride + size {
                    if xv.get(r, ch) > xv.get(best, ch) {
                        best = r;
                    }
                }
                argmax[o * c + ch] = best;
                out.data[o * c + ch] = xv.get(best, ch);
            }
        }
        Ok(self.push(out, Op::MaxPool { x, argmax }))
    }

    /// Rows of `table` selected by `ids`. Row `frozen` receives no gradient.
    pub fn gather(&mut self, table: Var, ids: &[usize], frozen: Option<usize>) -> Result<Var> {
        let tv = self.value(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= tv.rows) {
            return Err(Error::InvalidArgument(format!(
                "token {bad} outside embedding table of {} rows",
                tv.rows
            )));
        }
        let mut data = Vec::with_capacity(ids.len() * tv.cols);
        for &i in ids {
            data.extend_from_slice(tv.row(i));
        }
        let out = Tensor::from_vec(ids.len(), tv.cols, data)?;
        Ok(self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
                frozen,
            },
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if start + len > xv.rows {
            return Err(shape("slice_rows", format!("{start}+{len} of {} rows", xv.rows)));
        }
        let out = Tensor::from_vec(len, xv.cols, xv.data[start * xv.cols..(start + len) * xv.cols].to_vec())?;
        Ok(self.push(out, Op::SliceRows { x, start }))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if start + len > xv.cols {
            return Err(shape("slice_cols", format!("{start}+{len} of {} cols", xv.cols)));
        }
        let mut data = Vec::with_capacity(xv.rows * len);
        for r in 0..xv.rows {
            data.extend_from_slice(&xv.row(r)[start..start + len]);
        }
        let out = Tensor::from_vec(xv.rows, len, data)?;
        Ok(self.push(out, Op::SliceCols { x, start }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows;
        if parts.iter().any(|&p| self.value(p).rows != rows) {
            return Err(shape("concat_cols", "row counts differ"));
        }
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::from_vec(rows, cols, data)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols;
        if parts.iter().any(|&p| self.value(p).cols != cols) {
            return Err(shape("concat_rows", "column counts differ"));
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(&self.value(p).data);
        }
        let rows = data.len() / cols.max(1);
        let out = Tensor::from_vec(rows, cols, data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let out = Tensor::from_vec(rows, cols, self.value(x).data.clone())?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    /// Multiplies by a fixed mask (entries 0 or 1/keep for inverted dropout).
    pub fn dropout(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        let xv = self.value(x);
        if mask.len() != xv.len() {
            return Err(shape("dropout", format!("mask {} for {} values", mask.len(), xv.len())));
        }
        let data = xv.data.iter().zip(&mask).map(|(a, m)| a * m).collect();
        let out = Tensor::from_vec(xv.rows, xv.cols, data)?;
        Ok(self.push(out, Op::Dropout { x, mask }))
    }

    /// Row-wise softmax with max subtraction. Entries whose mask is `false`
    /// get probability zero.
    pub fn softmax(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let xv = self.value(x);
        if let Some(m) = mask {
            if m.len() != xv.cols {
                return Err(shape("softmax", format!("mask {} for {} columns", m.len(), xv.cols)));
            }
            if !m.iter().any(|&k| k) {
                return Err(Error::InvalidArgument("softmax over a fully masked row".into()));
            }
        }
        let keep = |c: usize| mask.is_none_or(|m| m[c]);
        let mut out = Tensor::zeros(xv.rows, xv.cols);
        for r in 0..xv.rows {
            let row = xv.row(r);
            let max = (0..xv.cols)
                .filter(|&c| keep(c))
                .map(|c| row[c])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for c in (0..xv.cols).filter(|&c| keep(c)) {
                let e = (row[c] - max).exp();
                out.data[r * xv.cols + c] = e;
                total += e;
            }
            out.data[r * xv.cols..(r + 1) * xv.cols]
                .iter_mut()
                .for_each(|v| *v /= total);
        }
        Ok(self.push(out, Op::Softmax(x)))
    }

    /// `-ln(max(p[label], 1e-12))` for a `1 x n` probability row.
    pub fn cross_entropy(&mut self, probs: Var, label: usize) -> Result<Var> {
        let pv = self.value(probs);
        if pv.rows != 1 {
            return Err(shape("cross_entropy", format!("{:?}", pv.shape())));
        }
        if label >= pv.cols {
            return Err(Error::InvalidArgument(format!(
                "label {label} outside {} classes",
                pv.cols
            )));
        }
        let loss = -pv.data[label].max(LOG_CLAMP).ln();
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { probs, label }))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(x))
    }

    /// Back-propagates from a scalar and adds parameter gradients into
    /// `param_grads` (one tensor per parameter, shaped like the store).
    pub fn backward(&self, loss: Var, param_grads: &mut [Tensor]) {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let lv = self.value(loss);
        grads[loss.0] = Some(Tensor::from_vec(lv.rows, lv.cols, vec![1.0; lv.len()]).expect("shape"));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let out = node.value.as_ref();
            let acc = |v: Var, t: Tensor, grads: &mut Vec<Option<Tensor>>| match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            };
            match &node.op {
                Op::Const => {}
                Op::Param(p) => param_grads[*p].add_assign(&g),
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let mut ga = Tensor::zeros(av.rows, av.cols);
                    matmul_nt_acc(&g, bv, &mut ga);
                    let mut gb = Tensor::zeros(bv.rows, bv.cols);
                    matmul_tn_acc(av, &g, &mut gb);
                    acc(*a, ga, &mut grads);
                    acc(*b, gb, &mut grads);
                }
                Op::Transpose(a) => acc(*a, g.transpose(), &mut grads),
                Op::Add(a, b) => {
                    acc(*a, g.clone(), &mut grads);
                    acc(*b, g, &mut grads);
                }
                Op::AddBias(a, b) => {
                    let mut gb = Tensor::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for (s, v) in gb.data.iter_mut().zip(g.row(r)) {
                            *s += v;
                        }
                    }
                    acc(*b, gb, &mut grads);
                    acc(*a, g, &mut grads);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let ga = g.data.iter().zip(&bv.data).map(|(x, y)| x * y).collect();
                    let gb = g.data.iter().zip(&av.data).map(|(x, y)| x * y).collect();
                    acc(*a, Tensor::from_vec(g.rows, g.cols, ga).expect("shape"), &mut grads);
                    acc(*b, Tensor::from_vec(g.rows, g.cols, gb).expect("shape"), &mut grads);
                }
                Op::Scale(a, s) => acc(*a, g.map(|v| v * s), &mut grads),
                Op::Sigmoid(a) => {
                    let y = out.expect("value");
                    let d = g.data.iter().zip(&y.data).map(|(d, y)| d * y * (1.0 - y)).collect();
                    acc(*a, Tensor::from_vec(g.rows, g.cols, d).expect("shape"), &mut grads);
                }
                Op::Tanh(a) => {
                    let y = out.expect("value");
                    let d = g.data.iter().zip(&y.data).map(|(d, y)| d * (1.0 - y * y)).collect();
                    acc(*a, Tensor::from_vec(g.rows, g.cols, d).expect("shape"), &mut grads);
                }
                Op::Relu(a) => {
                    let y = out.expect("value");
                    let d = g
                        .data
                        .iter()
                        .zip(&y.data)
                        .map(|(d, y)| if *y > 0.0 { *d } else { 0.0 })
                        .collect();
                    acc(*a, Tensor::from_vec(g.rows, g.cols, d).expect("shape"), &mut grads);
                }
                Op::Conv1d { x, w, b, kernel } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (t, c) = xv.shape();
                    let f = wv.cols;
                    let pad = (kernel - 1) / 2;
                    let mut gx = Tensor::zeros(t, c);
                    let mut gw = Tensor::zeros(wv.rows, f);
                    let mut gb = Tensor::zeros(1, f);
                    for o in 0..t {
                        let grow = g.row(o);
                        for (s, v) in gb.data.iter_mut().zip(grow) {
                            *s += v;
                        }
                        for k in 0..*kernel {
                            let Some(src) = (o + k).checked_sub(pad).filter(|&s| s < t) else {
                                continue;
                            };
                            for ci in 0..c {
                                let wrow = wv.row(k * c + ci);
                                gx.data[src * c + ci] += grow.iter().zip(wrow).map(|(a, b)| a * b).sum::<f64>();
                                let xval = xv.data[src * c + ci];
                                if xval != 0.0 {
                                    let gwrow = &mut gw.data[(k * c + ci) * f..(k * c + ci + 1) * f];
                                    for (s, gv) in gwrow.iter_mut().zip(grow) {
                                        *s += xval * gv;
                                    }
                                }
                            }
                        }
                    }
                    acc(*x, gx, &mut grads);
                    acc(*w, gw, &mut grads);
                    acc(*b, gb, &mut grads);
                }
                Op::MaxPool { x, argmax } => {
                    let xv = self.value(*x);
                    let c = xv.cols;
                    let mut gx = Tensor::zeros(xv.rows, c);
                    for (cell, &src) in argmax.iter().enumerate() {
                        gx.data[src * c + cell % c] += g.data[cell];
                    }
                    acc(*x, gx, &mut grads);
                }
                Op::Gather { table, ids, frozen } => {
                    let tv = self.value(*table);
                    let mut gt = Tensor::zeros(tv.rows, tv.cols);
                    for (r, &id) in ids.iter().enumerate() {
                        if Some(id) == *frozen {
                            continue;
                        }
                        for (s, v) in gt.data[id * tv.cols..(id + 1) * tv.cols].iter_mut().zip(g.row(r)) {
                            *s += v;
                        }
                    }
                    acc(*table, gt, &mut grads);
                }
                Op::SliceRows { x, start } => {
                    let xv = self.value(*x);
                    let mut gx = Tensor::zeros(xv.rows, xv.cols);
                    gx.data[start * xv.cols..start * xv.cols + g.len()].copy_from_slice(&g.data);
                    acc(*x, gx, &mut grads);
                }
                Op::SliceCols { x, start } => {
                    let xv = self.value(*x);
                    let mut gx = Tensor::zeros(xv.rows, xv.cols);
                    for r in 0..g.rows {
                        gx.data[r * xv.cols + start..r * xv.cols + start + g.cols].copy_from_slice(g.row(r));
                    }
                    acc(*x, gx, &mut grads);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let pc = self.value(p).cols;
                        let mut gp = Tensor::zeros(g.rows, pc);
                        for r in 0..g.rows {
                            gp.data[r * pc..(r + 1) * pc].copy_from_slice(&g.row(r)[offset..offset + pc]);
                        }
                        offset += pc;
                        acc(p, gp, &mut grads);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let (pr, pc) = self.value(p).shape();
                        let gp = Tensor::from_vec(pr, pc, g.data[offset..offset + pr * pc].to_vec()).expect("shape");
                        offset += pr * pc;
                        acc(p, gp, &mut grads);
                    }
                }
                Op::Reshape(x) => {
                    let (r, c) = self.value(*x).shape();
                    acc(*x, Tensor::from_vec(r, c, g.data).expect("shape"), &mut grads);
                }
                Op::Dropout { x, mask } => {
                    let d = g.data.iter().zip(mask).map(|(a, m)| a * m).collect();
                    acc(*x, Tensor::from_vec(g.rows, g.cols, d).expect("shape"), &mut grads);
                }
                Op::Softmax(x) => {
                    let y = out.expect("value");
                    let mut gx = Tensor::zeros(g.rows, g.cols);
                    for r in 0..g.rows {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for c in 0..g.cols {
                            gx.data[r * g.cols + c] = yr[c] * (gr[c] - dot);
                        }
                    }
                    acc(*x, gx, &mut grads);
                }
                Op::CrossEntropy { probs, label } => {
                    let pv = self.value(*probs);
                    let mut gp = Tensor::zeros(1, pv.cols);
                    let p = pv.data[*label];
                    if p > LOG_CLAMP {
                        gp.data[*label] = -g.data[0] / p;
                    }
                    acc(*probs, gp, &mut grads);
                }
                Op::SumAll(x) => {
                    let (r, c) = self.value(*x).shape();
                    acc(
                        *x,
                        Tensor::from_vec(r, c, vec![g.data[0]; r * c]).expect("shape"),
                        &mut grads,
                    );
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(values: Vec<(&str, Tensor)>) -> ParamStore {
        let mut s = ParamStore::default();
        for (n, t) in values {
            s.add(n, t, true, true);
        }
        s
    }

    #[test]
    fn maxpool_values_and_ties() {
        let s = store(vec![("x", Tensor::from_vec(4, 1, vec![1.0, 3.0, 2.0, 5.0]).unwrap())]);
        let mut g = Graph::new(&s);
        let x = g.param(0);
        let p = g.maxpool1d(x, 2, 2).unwrap();
        assert_eq!(g.value(p).data, vec![3.0, 5.0]);

        let s = store(vec![("x", Tensor::from_vec(4, 1, vec![2.0; 4]).unwrap())]);
        let mut g = Graph::new(&s);
        let x = g.param(0);
        let p = g.maxpool1d(x, 2, 2).unwrap();
        let l = g.sum_all(p);
        let mut grads = s.zeros_like();
        g.backward(l, &mut grads);
        assert_eq!(grads[0].data, vec![1.0, 0.0, 1.0, 0.0]);
        assert!(g.maxpool1d(x, 5, 1).is_err());
    }

    #[test]
    fn conv_identity_kernel_delays() {
        // kernel 3, one channel, weight only on tap 0: out[t] = x[t-1]
        let s = store(vec![
            ("x", Tensor::from_vec(4, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap()),
            ("w", Tensor::from_vec(3, 1, vec![1.0, 0.0, 0.0]).unwrap()),
            ("b", Tensor::zeros(1, 1)),
        ]);
        let mut g = Graph::new(&s);
        let (x, w, b) = (g.param(0), g.param(1), g.param(2));
        let y = g.conv1d(x, w, b, 3).unwrap();
        assert_eq!(g.value(y).data, vec![0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn conv_zero_input_gives_relu_bias() {
        let s = store(vec![
            ("x", Tensor::zeros(6, 2)),
            ("w", Tensor::from_vec(10, 2, (0..20).map(f64::from).collect()).unwrap()),
            ("b", Tensor::row_vector(vec![0.5, -0.5])),
        ]);
        let mut g = Graph::new(&s);
        let (x, w, b) = (g.param(0), g.param(1), g.param(2));
        let y = g.conv1d(x, w, b, 5).unwrap();
        let r = g.relu(y);
        for row in 0..6 {
            assert_eq!(g.value(r).row(row), &[0.5, 0.0]);
        }
    }

    #[test]
    fn softmax_properties() {
        let s = store(vec![("x", Tensor::row_vector(vec![0.0, 0.0]))]);
        let mut g = Graph::new(&s);
        let x = g.param(0);
        let p = g.softmax(x, None).unwrap();
        assert_eq!(g.value(p).data, vec![0.5, 0.5]);

        let s = store(vec![("x", Tensor::row_vector(vec![1.0, -2.0, 3.5]))]);
        let mut g = Graph::new(&s);
        let x = g.param(0);
        let p = g.softmax(x, None).unwrap();
        let shifted = g.constant(Tensor::row_vector(vec![101.0, 98.0, 103.5]));
        let q = g.softmax(shifted, None).unwrap();
        for (a, b) in g.value(p).data.iter().zip(&g.value(q).data) {
            assert!((a - b).abs() < 1e-12);
            assert!(*a > 0.0 && *a < 1.0);
        }
        assert!((g.value(p).data.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let m = g.softmax(x, Some(&[true, false, true])).unwrap();
        assert_eq!(g.value(m).data[1], 0.0);
        assert!(g.softmax(x, Some(&[false; 3])).is_err());
    }

    #[test]
    fn cross_entropy_limits() {
        let s = store(vec![("x", Tensor::row_vector(vec![40.0, 0.0]))]);
        let mut g = Graph::new(&s);
        let x = g.param(0);
        let p = g.softmax(x, None).unwrap();
        let l = g.cross_entropy(p, 0).unwrap();
        assert!(g.value(l).data[0] < 1e-15);
        // p[1] = e^-40 sits below the clamp
        let far = g.cross_entropy(p, 1).unwrap();
        assert!((g.value(far).data[0] + LOG_CLAMP.ln()).abs() < 1e-12);
        assert!(g.cross_entropy(p, 2).is_err());
    }

    #[test]
    fn gather_skips_frozen_row() {
        let s = store(vec![(
            "e",
            Tensor::from_vec(3, 2, vec![0.0, 0.0, 1.0, 2.0, 3.0, 4.0]).unwrap(),
        )]);
        let mut g = Graph::new(&s);
        let e = g.param(0);
        let rows = g.gather(e, &[1, 0, 1], Some(0)).unwrap();
        assert_eq!(g.value(rows).data, vec![1.0, 2.0, 0.0, 0.0, 1.0, 2.0]);
        let l = g.sum_all(rows);
        let mut grads = s.zeros_like();
        g.backward(l, &mut grads);
        assert_eq!(grads[0].data, vec![0.0, 0.0, 2.0, 2.0, 0.0, 0.0]);
        assert!(g.gather(e, &[3], Some(0)).is_err());
    }
}
