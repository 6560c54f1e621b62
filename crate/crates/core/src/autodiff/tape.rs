//! Reverse-mode gradient tape.
//!
//! Every operation appends one node holding its forward value and the ids of
//! its inputs. `backward` walks the nodes once in reverse insertion order, so
//! the tape is always topologically sorted by construction.
//!
//! Class-axis operations (`concat`, `slice`, `softmax`, `gather`, ...) act on
//! the last dimension; a rank-1 tensor is treated as a single row.

use super::tensor::Tensor;
use crate::error::{contract, dimension, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Affine { x: Var, w: Var, b: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Relu(Var),
    Sigmoid(Var),
    Log(Var),
    Exp(Var),
    Concat(Vec<Var>),
    Slice { a: Var, start: usize },
    Sum(Var),
    Mean(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Gather { a: Var, index: Vec<usize> },
    RowMax { a: Var, argmax: Vec<usize> },
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.split_last() {
        Some((&c, rest)) => (rest.iter().product(), c),
        None => (1, 1),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> Result<&Node> {
        self.nodes
            .get(v.0)
            .ok_or_else(|| contract(format!("variable {} is not on this tape", v.0)))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a copy of `t` as a leaf, inheriting its `requires_grad` flag.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(
            t.shape().to_vec(),
            t.values().to_vec(),
            Op::Leaf,
            t.requires_grad(),
        )
    }

    pub fn constant(&mut self, shape: Vec<usize>, values: Vec<f64>) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(dimension(format!(
                "constant of shape {shape:?} given {} values",
                values.len()
            )));
        }
        Ok(self.push(shape, values, Op::Leaf, false))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Scalar value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    /// Copies the gradient of leaf `v` into `target`. A leaf with no
    /// gradient (unreachable from the loss) contributes zeros.
    pub fn accumulate_into(&self, v: Var, target: &mut Tensor) -> Result<()> {
        let node = self.node(v)?;
        if node.value.len() != target.len() {
            return Err(dimension(format!(
                "leaf {:?} does not match tensor {:?}",
                node.shape,
                target.shape()
            )));
        }
        match self.grad(v) {
            Some(g) => target.accumulate_grad(g),
            None => target.accumulate_grad(&vec![0.0; node.value.len()]),
        }
    }

    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 || xs[1] != ws[0] || bs[0] != ws[1] {
            return Err(dimension(format!(
                "affine: x {xs:?}, weight {ws:?}, bias {bs:?}"
            )));
        }
        let (batch, inner, out) = (xs[0], ws[0], ws[1]);
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let mut y = Vec::with_capacity(batch * out);
        for r in 0..batch {
            y.extend_from_slice(bv);
            let row = &mut y[r * out..(r + 1) * out];
            for k in 0..inner {
                let xk = xv[r * inner + k];
                if xk == 0.0 {
                    continue;
                }
                let wrow = &wv[k * out..(k + 1) * out];
                for (yo, wo) in row.iter_mut().zip(wrow) {
                    *yo += xk * wo;
                }
            }
        }
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(vec![batch, out], y, Op::Affine { x, w, b }, rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dimension(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        what: &str,
        f: fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    fn unary(&mut self, a: Var, value: Vec<f64>, op: Op) -> Var {
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), value, op, rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).iter().map(|x| x * c).collect();
        self.unary(a, value, Op::Scale(a, c))
    }

    /// Adds the constant `c` to every element.
    pub fn shift(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).iter().map(|x| x + c).collect();
        self.unary(a, value, Op::Shift(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).iter().map(|&x| x.max(0.0)).collect();
        self.unary(a, value, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).iter().map(|&x| sigmoid(x)).collect();
        self.unary(a, value, Op::Sigmoid(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).iter().find(|&&x| x.is_nan() || x <= 0.0) {
            return Err(Error::Domain(format!("log of non-positive value {bad}")));
        }
        let value = self.value(a).iter().map(|x| x.ln()).collect();
        Ok(self.unary(a, value, Op::Log(a)))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).iter().map(|x| x.exp()).collect();
        self.unary(a, value, Op::Exp(a))
    }

    /// Joins along the last (class) axis; all leading dimensions must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| contract("concat of zero tensors"))?;
        let lead = self
            .shape(first)
            .split_last()
            .map(|(_, r)| r.to_vec())
            .unwrap_or_default();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            match s.split_last() {
                Some((&c, rest)) if rest == lead.as_slice() => widths.push(c),
                _ => {
                    return Err(dimension(format!(
                        "concat: {s:?} does not share leading dims {lead:?}"
                    )))
                }
            }
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut value = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                value.extend_from_slice(&self.value(p)[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let rg = self.rg(parts);
        Ok(self.push(shape, value, Op::Concat(parts.to_vec()), rg))
    }

    /// Extracts the contiguous class range `start..start + len`.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let (rows, cols) = rows_cols(&shape);
        if shape.is_empty() || start + len > cols || len == 0 {
            return Err(dimension(format!(
                "slice {start}..{} of shape {shape:?}",
                start + len
            )));
        }
        let src = self.value(a);
        let mut value = Vec::with_capacity(rows * len);
        for r in 0..rows {
            value.extend_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = len;
        Ok(self.unary_shaped(a, out_shape, value, Op::Slice { a, start }))
    }

    fn unary_shaped(&mut self, a: Var, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Var {
        let rg = self.rg(&[a]);
        self.push(shape, value, op, rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        self.unary_shaped(a, vec![], vec![s], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(contract("mean of an empty tensor"));
        }
        let s = self.value(a).iter().sum::<f64>() / n as f64;
        Ok(self.unary_shaped(a, vec![], vec![s], Op::Mean(a)))
    }

    fn check_finite(&self, a: Var, what: &str) -> Result<()> {
        if self.value(a).iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!(
                "{what} input contains non-finite values"
            )));
        }
        Ok(())
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.check_finite(a, "softmax")?;
        let shape = self.shape(a).to_vec();
        let (_, cols) = rows_cols(&shape);
        if cols == 0 {
            return Err(dimension("softmax over zero classes"));
        }
        let value = softmax_rows(self.value(a), cols);
        Ok(self.unary_shaped(a, shape, value, Op::Softmax(a)))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        self.check_finite(a, "log_softmax")?;
        let shape = self.shape(a).to_vec();
        let (_, cols) = rows_cols(&shape);
        if cols == 0 {
            return Err(dimension("log_softmax over zero classes"));
        }
        let mut value = Vec::with_capacity(self.value(a).len());
        for row in self.value(a).chunks(cols) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
            value.extend(row.iter().map(|z| z - lse));
        }
        Ok(self.unary_shaped(a, shape, value, Op::LogSoftmax(a)))
    }

    /// Picks `a[r, index[r]]` for every row, giving shape `[rows]`.
    pub fn gather(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let shape = self.shape(a);
        let (rows, cols) = rows_cols(shape);
        if shape.len() != 2 || index.len() != rows {
            return Err(dimension(format!(
                "gather: {} indices for shape {shape:?}",
                index.len()
            )));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= cols) {
            return Err(dimension(format!(
                "gather index {bad} outside {cols} columns"
            )));
        }
        let value = index
            .iter()
            .enumerate()
            .map(|(r, &c)| self.value(a)[r * cols + c])
            .collect();
        Ok(self.unary_shaped(
            a,
            vec![rows],
            value,
            Op::Gather {
                a,
                index: index.to_vec(),
            },
        ))
    }

    /// Row-wise maximum over the last axis; the gradient goes to the first
    /// maximizing column.
    pub fn row_max(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a);
        let (rows, cols) = rows_cols(shape);
        if shape.len() != 2 || cols == 0 {
            return Err(dimension(format!("row_max of shape {shape:?}")));
        }
        let mut argmax = Vec::with_capacity(rows);
        let mut value = Vec::with_capacity(rows);
        for row in self.value(a).chunks(cols) {
            let (i, m) = argmax_first(row);
            argmax.push(i);
            value.push(m);
        }
        Ok(self.unary_shaped(a, vec![rows], value, Op::RowMax { a, argmax }))
    }

    /// Back-propagates from scalar `loss`. Gradients accumulate across calls
    /// until [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let node = self.node(loss)?;
        if node.value.len() != 1 {
            return Err(contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                node.shape
            )));
        }
        let mut local: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        local[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = local[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            self.propagate(id, &g, &mut local);
            let slot = self.grads[id].get_or_insert_with(|| vec![0.0; g.len()]);
            for (s, d) in slot.iter_mut().zip(&g) {
                *s += d;
            }
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[f64], local: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let mut send = |v: Var, delta: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let n = self.nodes[v.0].value.len();
            let buf = local[v.0].get_or_insert_with(|| vec![0.0; n]);
            delta(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Affine { x, w, b } => {
                let (batch, out) = (node.shape[0], node.shape[1]);
                let inner = self.nodes[w.0].shape[0];
                let xv = &self.nodes[x.0].value;
                let wv = &self.nodes[w.0].value;
                send(*x, &mut |buf| {
                    for r in 0..batch {
                        let grow = &g[r * out..(r + 1) * out];
                        for k in 0..inner {
                            let wrow = &wv[k * out..(k + 1) * out];
                            buf[r * inner + k] +=
                                grow.iter().zip(wrow).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                });
                send(*w, &mut |buf| {
                    for r in 0..batch {
                        let grow = &g[r * out..(r + 1) * out];
                        for k in 0..inner {
                            let xk = xv[r * inner + k];
                            if xk == 0.0 {
                                continue;
                            }
                            for (bo, go) in buf[k * out..(k + 1) * out].iter_mut().zip(grow) {
                                *bo += xk * go;
                            }
                        }
                    }
                });
                send(*b, &mut |buf| {
                    for grow in g.chunks(out) {
                        for (bo, go) in buf.iter_mut().zip(grow) {
                            *bo += go;
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                send(*a, &mut |buf| add_into(buf, g));
                send(*b, &mut |buf| add_into(buf, g));
            }
            Op::Sub(a, b) => {
                send(*a, &mut |buf| add_into(buf, g));
                send(*b, &mut |buf| {
                    buf.iter_mut().zip(g).for_each(|(s, d)| *s -= d)
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                send(*a, &mut |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * bv[i];
                    }
                });
                send(*b, &mut |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * av[i];
                    }
                });
            }
            Op::Scale(a, c) => send(*a, &mut |buf| {
                buf.iter_mut().zip(g).for_each(|(s, d)| *s += c * d)
            }),
            Op::Shift(a) => send(*a, &mut |buf| add_into(buf, g)),
            Op::Relu(a) => {
                let av = &self.nodes[a.0].value;
                send(*a, &mut |buf| {
                    for i in 0..buf.len() {
                        if av[i] > 0.0 {
                            buf[i] += g[i];
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                send(*a, &mut |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            Op::Log(a) => {
                let av = &self.nodes[a.0].value;
                send(*a, &mut |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] / av[i];
                    }
                });
            }
            Op::Exp(a) => {
                let y = &node.value;
                send(*a, &mut |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * y[i];
                    }
                });
            }
            Op::Concat(parts) => {
                let (rows, total) = rows_cols(&node.shape);
                let mut offset = 0;
                for p in parts {
                    let w = *self.nodes[p.0].shape.last().unwrap();
                    send(*p, &mut |buf| {
                        for r in 0..rows {
                            let src = &g[r * total + offset..r * total + offset + w];
                            add_into(&mut buf[r * w..(r + 1) * w], src);
                        }
                    });
                    offset += w;
                }
            }
            Op::Slice { a, start } => {
                let (rows, len) = rows_cols(&node.shape);
                let cols = *self.nodes[a.0].shape.last().unwrap();
                send(*a, &mut |buf| {
                    for r in 0..rows {
                        let dst = &mut buf[r * cols + start..r * cols + start + len];
                        add_into(dst, &g[r * len..(r + 1) * len]);
                    }
                });
            }
            Op::Sum(a) => send(*a, &mut |buf| buf.iter_mut().for_each(|s| *s += g[0])),
            Op::Mean(a) => {
                let n = self.nodes[a.0].value.len() as f64;
                send(*a, &mut |buf| buf.iter_mut().for_each(|s| *s += g[0] / n));
            }
            Op::Softmax(a) => {
                let cols = *node.shape.last().unwrap();
                let y = &node.value;
                send(*a, &mut |buf| {
                    for ((yr, gr), br) in
                        y.chunks(cols).zip(g.chunks(cols)).zip(buf.chunks_mut(cols))
                    {
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for c in 0..cols {
                            br[c] += yr[c] * (gr[c] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let cols = *node.shape.last().unwrap();
                let y = &node.value;
                send(*a, &mut |buf| {
                    for ((yr, gr), br) in
                        y.chunks(cols).zip(g.chunks(cols)).zip(buf.chunks_mut(cols))
                    {
                        let gs: f64 = gr.iter().sum();
                        for c in 0..cols {
                            br[c] += gr[c] - yr[c].exp() * gs;
                        }
                    }
                });
            }
            Op::Gather { a, index } => {
                let cols = *self.nodes[a.0].shape.last().unwrap();
                send(*a, &mut |buf| {
                    for (r, &c) in index.iter().enumerate() {
                        buf[r * cols + c] += g[r];
                    }
                });
            }
            Op::RowMax { a, argmax } => {
                let cols = *self.nodes[a.0].shape.last().unwrap();
                send(*a, &mut |buf| {
                    for (r, &c) in argmax.iter().enumerate() {
                        buf[r * cols + c] += g[r];
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Softmax of each `cols`-wide row of `z`, with max subtraction.
pub fn softmax_rows(z: &[f64], cols: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(z.len());
    for row in z.chunks(cols) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        out.extend(row.iter().map(|v| (v - m).exp()));
        let s: f64 = out[start..].iter().sum();
        out[start..].iter_mut().for_each(|v| *v /= s);
    }
    out
}

/// Index and value of the first maximum.
pub fn argmax_first(row: &[f64]) -> (usize, f64) {
    let mut best = (0, row[0]);
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn leaf(tape: &mut Tape, shape: Vec<usize>, v: Vec<f64>) -> Var {
        tape.leaf(&Tensor::new(shape, v).unwrap().with_grad())
    }

    #[test]
    fn affine_identity_and_bias() {
        let mut t = Tape::new();
        let x = leaf(&mut t, vec![1, 2], vec![1.0, 2.0]);
        let w = leaf(&mut t, vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let b = leaf(&mut t, vec![2], vec![0.0, 0.0]);
        let y = t.affine(x, w, b).unwrap();
        assert_eq!(t.value(y), &[1.0, 2.0]);

        let x0 = leaf(&mut t, vec![1, 2], vec![0.0, 0.0]);
        let w0 = leaf(&mut t, vec![2, 2], vec![5.0, -1.0, 2.0, 7.0]);
        let b0 = leaf(&mut t, vec![2], vec![3.0, 4.0]);
        let y0 = t.affine(x0, w0, b0).unwrap();
        assert_eq!(t.value(y0), &[3.0, 4.0]);
    }

    #[test]
    fn affine_matches_hand_multiplication() {
        // x = [[1,-2,3],[0.5,4,-1]], w = [[2,1],[0,-1],[1,3]], b = [0.5,-0.5]
        // row0: [2+0+3, 1+2+9] + b = [5.5, 11.5]
        // row1: [1+0-1, 0.5-4-3] + b = [0.5, -7.0]
        let mut t = Tape::new();
        let x = leaf(&mut t, vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 4.0, -1.0]);
        let w = leaf(&mut t, vec![3, 2], vec![2.0, 1.0, 0.0, -1.0, 1.0, 3.0]);
        let b = leaf(&mut t, vec![2], vec![0.5, -0.5]);
        let y = t.affine(x, w, b).unwrap();
        assert_eq!(t.value(y), &[5.5, 11.5, 0.5, -7.0]);
    }

    #[test]
    fn affine_rejects_mismatched_inner_dims() {
        let mut t = Tape::new();
        let x = leaf(&mut t, vec![1, 3], vec![1.0; 3]);
        let w = leaf(&mut t, vec![2, 2], vec![1.0; 4]);
        let b = leaf(&mut t, vec![2], vec![0.0; 2]);
        assert!(matches!(t.affine(x, w, b), Err(Error::Dimension(_))));
    }

    #[test]
    fn primitive_values() {
        let mut t = Tape::new();
        let z = leaf(&mut t, vec![1], vec![0.0]);
        let s = t.sigmoid(z);
        assert_eq!(t.value(s), &[0.5]);
        // 1/(1+e^-10) to 16 digits
        let ten = leaf(&mut t, vec![1], vec![10.0]);
        let s10 = t.sigmoid(ten);
        assert_relative_eq!(t.value(s10)[0], 0.999_954_602_131_297_6, epsilon = 1e-15);

        let a = leaf(&mut t, vec![2], vec![1.0, 2.0]);
        let b = leaf(&mut t, vec![1], vec![3.0]);
        let c = t.concat(&[a, b]).unwrap();
        assert_eq!(t.value(c), &[1.0, 2.0, 3.0]);
        let sl = t.slice(c, 1, 2).unwrap();
        assert_eq!(t.value(sl), &[2.0, 3.0]);
    }

    #[test]
    fn log_rejects_non_positive() {
        let mut t = Tape::new();
        let a = leaf(&mut t, vec![2], vec![1.0, 0.0]);
        assert!(matches!(t.log(a), Err(Error::Domain(_))));
    }

    #[test]
    fn concat_rejects_mismatched_rows() {
        let mut t = Tape::new();
        let a = leaf(&mut t, vec![2, 2], vec![1.0; 4]);
        let b = leaf(&mut t, vec![3, 1], vec![1.0; 3]);
        assert!(matches!(t.concat(&[a, b]), Err(Error::Dimension(_))));
    }

    #[test]
    fn softmax_values() {
        let mut t = Tape::new();
        let a = leaf(&mut t, vec![1, 2], vec![0.0, 0.0]);
        let s = t.softmax(a).unwrap();
        assert_eq!(t.value(s), &[0.5, 0.5]);
        let b = leaf(&mut t, vec![1, 4], vec![-3.7; 4]);
        let s = t.softmax(b).unwrap();
        assert_eq!(t.value(s), &[0.25; 4]);
        let c = leaf(&mut t, vec![1, 3], vec![1.0, 2.0, 3.0]);
        let s = t.softmax(c).unwrap();
        let denom = 1f64.exp() + 2f64.exp() + 3f64.exp();
        for (k, p) in t.value(s).iter().enumerate() {
            assert_relative_eq!(*p, ((k + 1) as f64).exp() / denom, epsilon = 1e-15);
        }
        let d = leaf(&mut t, vec![1, 2], vec![f64::NAN, 0.0]);
        assert!(matches!(t.softmax(d), Err(Error::Numeric(_))));
    }

    #[test]
    fn backward_simple_cases() {
        let mut t = Tape::new();
        let x = leaf(&mut t, vec![3], vec![1.0, -2.0, 5.0]);
        let s = t.sum(x);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

        let mut t = Tape::new();
        let x = leaf(&mut t, vec![1], vec![2.0]);
        let xx = t.mul(x, x).unwrap();
        let s = t.sum(xx);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[4.0]);
        // second call accumulates
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[8.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let x = leaf(&mut t, vec![2], vec![1.0, 2.0]);
        let y = t.exp(x);
        assert!(matches!(t.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn frozen_leaves_receive_nothing() {
        let mut t = Tape::new();
        let frozen = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let x = t.leaf(&frozen);
        let live = leaf(&mut t, vec![2], vec![3.0, 4.0]);
        let y = t.mul(x, live).unwrap();
        let s = t.sum(y);
        t.backward(s).unwrap();
        assert!(t.grad(x).is_none());
        assert_eq!(t.grad(live).unwrap(), &[1.0, 2.0]);
        let mut target = frozen.clone();
        t.accumulate_into(x, &mut target).unwrap();
        assert!(target.grad().is_none());
    }
}
