//! Reverse-mode differentiation over dense row-major `f64` matrices.
//!
//! A [`Tape`] borrows a flat parameter vector; `param` nodes view slices of it.
//! Every op appends a node holding its value, and `backward` walks the nodes in
//! reverse to accumulate the gradient of a `1 × 1` loss into a vector shaped
//! like the parameters.

use crate::error::{ensure_same_len, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Const,
    Param { offset: usize },
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    Exp(Var),
    Square(Var),
    Softplus(Var),
    LnFloor(Var, f64),
    SoftmaxRows(Var),
    Gather(Var, Vec<usize>),
    SegmentSum(Var, Vec<usize>),
    SumAll(Var),
    SumCols(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    needs_grad: bool,
}

#[derive(Debug)]
pub struct Tape<'p> {
    params: &'p [f64],
    nodes: Vec<Node>,
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p [f64]) -> Self {
        Self { params, nodes: Vec::new() }
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    /// Value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    fn push(&mut self, op: Op, rows: usize, cols: usize, value: Vec<f64>, needs_grad: bool) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node { op, rows, cols, value, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn grad_of(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn constant(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> Result<Var> {
        ensure_same_len(rows * cols, value.len())?;
        Ok(self.push(Op::Const, rows, cols, value, false))
    }

    pub fn scalar_const(&mut self, v: f64) -> Var {
        self.push(Op::Const, 1, 1, vec![v], false)
    }

    pub fn param(&mut self, offset: usize, rows: usize, cols: usize) -> Result<Var> {
        if offset + rows * cols > self.params.len() {
            return Err(Error::DimensionMismatch { expected: self.params.len(), found: offset + rows * cols });
        }
        let value = self.params[offset..offset + rows * cols].to_vec();
        Ok(self.push(Op::Param { offset }, rows, cols, value, true))
    }

    fn same_shape(&self, a: Var, b: Var) -> Result<(usize, usize)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::DimensionMismatch { expected: sa.0 * sa.1, found: sb.0 * sb.1 });
        }
        Ok(sa)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, k) = self.shape(a);
        let (k2, c) = self.shape(b);
        ensure_same_len(k, k2)?;
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let orow = &mut out[i * c..(i + 1) * c];
            for l in 0..k {
                let x = av[i * k + l];
                if x == 0.0 {
                    continue;
                }
                let brow = &bv[l * c..(l + 1) * c];
                for j in 0..c {
                    orow[j] += x * brow[j];
                }
            }
        }
        let g = self.grad_of(&[a, b]);
        Ok(self.push(Op::MatMul(a, b), r, c, out, g))
    }

    fn zip_op(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (r, c) = self.same_shape(a, b)?;
        let out = self.nodes[a.0].value.iter().zip(&self.nodes[b.0].value).map(|(x, y)| f(*x, *y)).collect();
        let g = self.grad_of(&[a, b]);
        Ok(self.push(op, r, c, out, g))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Adds a `1 × c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        let (one, c2) = self.shape(row);
        ensure_same_len(1, one)?;
        ensure_same_len(c, c2)?;
        let (av, rv) = (&self.nodes[a.0].value, &self.nodes[row.0].value);
        let out = (0..r * c).map(|i| av[i] + rv[i % c]).collect();
        let g = self.grad_of(&[a, row]);
        Ok(self.push(Op::AddRow(a, row), r, c, out, g))
    }

    /// Scales row `i` of `a` by `col[i]`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        let (r2, one) = self.shape(col);
        ensure_same_len(r, r2)?;
        ensure_same_len(1, one)?;
        let (av, cv) = (&self.nodes[a.0].value, &self.nodes[col.0].value);
        let out = (0..r * c).map(|i| av[i] * cv[i / c]).collect();
        let g = self.grad_of(&[a, col]);
        Ok(self.push(Op::MulCol(a, col), r, c, out, g))
    }

    fn map_op(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let (r, c) = self.shape(a);
        let out = self.nodes[a.0].value.iter().map(|x| f(*x)).collect();
        let g = self.grad_of(&[a]);
        self.push(op, r, c, out, g)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.map_op(a, Op::Scale(a, s), |x| s * x)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.map_op(a, Op::Silu(a), |x| x * sigmoid(x))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map_op(a, Op::Exp(a), f64::exp)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map_op(a, Op::Square(a), |x| x * x)
    }

    /// `ln(1 + e^x)`.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.map_op(a, Op::Softplus(a), |x| x.max(0.0) + (-x.abs()).exp().ln_1p())
    }

    /// `ln(max(x, eps))`; the gradient vanishes below the floor.
    pub fn ln_floor(&mut self, a: Var, eps: f64) -> Var {
        self.map_op(a, Op::LnFloor(a, eps), |x| x.max(eps).ln())
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let av = &self.nodes[a.0].value;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &av[i * c..(i + 1) * c];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for j in 0..c {
                let e = (row[j] - m).exp();
                out[i * c + j] = e;
                s += e;
            }
            out[i * c..(i + 1) * c].iter_mut().for_each(|v| *v /= s);
        }
        let g = self.grad_of(&[a]);
        self.push(Op::SoftmaxRows(a), r, c, out, g)
    }

    /// Row `k` of the output is row `idx[k]` of `a`.
    pub fn gather(&mut self, a: Var, idx: Vec<usize>) -> Result<Var> {
        let (r, c) = self.shape(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::DimensionMismatch { expected: r, found: bad + 1 });
        }
        let av = &self.nodes[a.0].value;
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in &idx {
            out.extend_from_slice(&av[i * c..(i + 1) * c]);
        }
        let g = self.grad_of(&[a]);
        let rows = idx.len();
        Ok(self.push(Op::Gather(a, idx), rows, c, out, g))
    }

    /// Sums rows of `a` into `n_segments` rows according to `seg`.
    pub fn segment_sum(&mut self, a: Var, seg: Vec<usize>, n_segments: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        ensure_same_len(r, seg.len())?;
        if let Some(&bad) = seg.iter().find(|&&s| s >= n_segments) {
            return Err(Error::DimensionMismatch { expected: n_segments, found: bad + 1 });
        }
        let av = &self.nodes[a.0].value;
        let mut out = vec![0.0; n_segments * c];
        for (i, &s) in seg.iter().enumerate() {
            for j in 0..c {
                out[s * c + j] += av[i * c + j];
            }
        }
        let g = self.grad_of(&[a]);
        Ok(self.push(Op::SegmentSum(a, seg), n_segments, c, out, g))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.iter().sum();
        let g = self.grad_of(&[a]);
        self.push(Op::SumAll(a), 1, 1, vec![s], g)
    }

    /// Row sums as an `r × 1` column.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let av = &self.nodes[a.0].value;
        let out = (0..r).map(|i| av[i * c..(i + 1) * c].iter().sum()).collect();
        let g = self.grad_of(&[a]);
        self.push(Op::SumCols(a), r, 1, out, g)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::Empty("concat inputs"))?;
        let r = self.shape(first).0;
        for p in parts {
            ensure_same_len(r, self.shape(*p).0)?;
        }
        let c: usize = parts.iter().map(|p| self.shape(*p).1).sum();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for p in parts {
                let (_, pc) = self.shape(*p);
                out.extend_from_slice(&self.nodes[p.0].value[i * pc..(i + 1) * pc]);
            }
        }
        let g = self.grad_of(parts);
        Ok(self.push(Op::ConcatCols(parts.to_vec()), r, c, out, g))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if start + len > c {
            return Err(Error::DimensionMismatch { expected: c, found: start + len });
        }
        let av = &self.nodes[a.0].value;
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&av[i * c + start..i * c + start + len]);
        }
        let g = self.grad_of(&[a]);
        Ok(self.push(Op::SliceCols(a, start), r, len, out, g))
    }

    /// Mean over all entries as a `1 × 1` node.
    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len().max(1) as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Gradient of the `1 × 1` node `loss` with respect to the parameters.
    pub fn backward(&self, loss: Var) -> Result<Vec<f64>> {
        if loss.0 >= self.nodes.len() || self.shape(loss) != (1, 1) {
            return Err(Error::GraphNotRecorded);
        }
        let mut param_grad = vec![0.0; self.params.len()];
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let mut acc = |v: Var, contrib: Vec<f64>| {
                if !self.nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => existing.iter_mut().zip(&contrib).for_each(|(e, c)| *e += c),
                    slot => *slot = Some(contrib),
                }
            };
            let (r, c) = (node.rows, node.cols);
            match &node.op {
                Op::Const => {}
                Op::Param { offset } => {
                    param_grad[*offset..offset + g.len()].iter_mut().zip(&g).for_each(|(p, v)| *p += v);
                }
                Op::MatMul(a, b) => {
                    let (_, k) = self.shape(*a);
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if self.nodes[a.0].needs_grad {
                        let mut ga = vec![0.0; r * k];
                        for i in 0..r {
                            for l in 0..k {
                                let brow = &bv[l * c..(l + 1) * c];
                                ga[i * k + l] = g[i * c..(i + 1) * c].iter().zip(brow).map(|(x, y)| x * y).sum();
                            }
                        }
                        acc(*a, ga);
                    }
                    if self.nodes[b.0].needs_grad {
                        let mut gb = vec![0.0; k * c];
                        for i in 0..r {
                            let grow = &g[i * c..(i + 1) * c];
                            for l in 0..k {
                                let x = av[i * k + l];
                                if x == 0.0 {
                                    continue;
                                }
                                for j in 0..c {
                                    gb[l * c + j] += x * grow[j];
                                }
                            }
                        }
                        acc(*b, gb);
                    }
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::Sub(a, b) => {
                    acc(*b, g.iter().map(|x| -x).collect());
                    acc(*a, g);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    acc(*a, g.iter().zip(bv).map(|(x, y)| x * y).collect());
                    acc(*b, g.iter().zip(av).map(|(x, y)| x * y).collect());
                }
                Op::AddRow(a, row) => {
                    let mut gr = vec![0.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            gr[j] += g[i * c + j];
                        }
                    }
                    acc(*row, gr);
                    acc(*a, g);
                }
                Op::MulCol(a, col) => {
                    let (av, cv) = (self.value(*a), self.value(*col));
                    let gc = (0..r).map(|i| (0..c).map(|j| g[i * c + j] * av[i * c + j]).sum()).collect();
                    acc(*col, gc);
                    acc(*a, (0..r * c).map(|i| g[i] * cv[i / c]).collect());
                }
                Op::Scale(a, s) => acc(*a, g.iter().map(|x| s * x).collect()),
                Op::Silu(a) => {
                    let av = self.value(*a);
                    acc(
                        *a,
                        g.iter()
                            .zip(av)
                            .map(|(gi, x)| {
                                let s = sigmoid(*x);
                                gi * s * (1.0 + x * (1.0 - s))
                            })
                            .collect(),
                    );
                }
                Op::Exp(a) => acc(*a, g.iter().zip(&node.value).map(|(x, y)| x * y).collect()),
                Op::Square(a) => acc(*a, g.iter().zip(self.value(*a)).map(|(x, y)| 2.0 * x * y).collect()),
                Op::Softplus(a) => acc(*a, g.iter().zip(self.value(*a)).map(|(x, y)| x * sigmoid(*y)).collect()),
                Op::LnFloor(a, eps) => acc(
                    *a,
                    g.iter().zip(self.value(*a)).map(|(x, y)| if *y > *eps { x / y } else { 0.0 }).collect(),
                ),
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = vec![0.0; r * c];
                    for i in 0..r {
                        let dot: f64 = (0..c).map(|j| g[i * c + j] * y[i * c + j]).sum();
                        for j in 0..c {
                            ga[i * c + j] = y[i * c + j] * (g[i * c + j] - dot);
                        }
                    }
                    acc(*a, ga);
                }
                Op::Gather(a, idx) => {
                    let (ar, _) = self.shape(*a);
                    let mut ga = vec![0.0; ar * c];
                    for (k, &i) in idx.iter().enumerate() {
                        for j in 0..c {
                            ga[i * c + j] += g[k * c + j];
                        }
                    }
                    acc(*a, ga);
                }
                Op::SegmentSum(a, seg) => {
                    let mut ga = Vec::with_capacity(seg.len() * c);
                    for &s in seg {
                        ga.extend_from_slice(&g[s * c..(s + 1) * c]);
                    }
                    acc(*a, ga);
                }
                Op::SumAll(a) => {
                    let n = self.nodes[a.0].value.len();
                    acc(*a, vec![g[0]; n]);
                }
                Op::SumCols(a) => {
                    let (_, ac) = self.shape(*a);
                    acc(*a, (0..r * ac).map(|i| g[i / ac]).collect());
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let (_, pc) = self.shape(*p);
                        let mut gp = Vec::with_capacity(r * pc);
                        for i in 0..r {
                            gp.extend_from_slice(&g[i * c + start..i * c + start + pc]);
                        }
                        acc(*p, gp);
                        start += pc;
                    }
                }
                Op::SliceCols(a, start) => {
                    let (_, ac) = self.shape(*a);
                    let mut ga = vec![0.0; r * ac];
                    for i in 0..r {
                        ga[i * ac + start..i * ac + start + c].copy_from_slice(&g[i * c..(i + 1) * c]);
                    }
                    acc(*a, ga);
                }
            }
        }
        Ok(param_grad)
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Central finite differences of `f` at `params`.
    pub(crate) fn fd_gradient(params: &[f64], h: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
        let mut p = params.to_vec();
        (0..params.len())
            .map(|i| {
                let orig = p[i];
                p[i] = orig + h;
                let up = f(&p);
                p[i] = orig - h;
                let down = f(&p);
                p[i] = orig;
                (up - down) / (2.0 * h)
            })
            .collect()
    }

    pub(crate) fn assert_grad_close(analytic: &[f64], numeric: &[f64], tol: f64) {
        let scale = analytic.iter().chain(numeric).fold(0.0f64, |m, v| m.max(v.abs())).max(1e-8);
        for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
            let rel = (a - n).abs() / (a.abs().max(n.abs()).max(1e-3 * scale));
            assert!(rel < tol, "param {i}: analytic {a} vs numeric {n} (rel {rel})");
        }
    }

    #[test]
    fn quadratic_single_layer() {
        // ‖Wx − y‖² with W 2×3: gradient 2 (Wx − y) xᵀ
        let w = vec![0.3, -0.2, 0.5, 1.0, 0.4, -0.7];
        let (x, y) = ([1.0, 2.0, -1.0], [0.5, -0.25]);
        let mut t = Tape::new(&w);
        let wv = t.param(0, 2, 3).unwrap();
        let xv = t.constant(3, 1, x.to_vec()).unwrap();
        let yv = t.constant(2, 1, y.to_vec()).unwrap();
        let wx = t.matmul(wv, xv).unwrap();
        let r = t.sub(wx, yv).unwrap();
        let sq = t.square(r);
        let loss = t.sum_all(sq);
        let g = t.backward(loss).unwrap();
        let resid: Vec<f64> = (0..2).map(|i| (0..3).map(|j| w[i * 3 + j] * x[j]).sum::<f64>() - y[i]).collect();
        for i in 0..2 {
            for j in 0..3 {
                assert!((g[i * 3 + j] - 2.0 * resid[i] * x[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let p = vec![1.0, 2.0];
        let mut t = Tape::new(&p);
        let _ = t.param(0, 1, 2).unwrap();
        let c = t.scalar_const(3.0);
        assert_eq!(t.backward(c).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn backward_requires_scalar_node() {
        let p = vec![1.0, 2.0];
        let mut t = Tape::new(&p);
        let v = t.param(0, 1, 2).unwrap();
        assert!(matches!(t.backward(v), Err(Error::GraphNotRecorded)));
        let empty = Tape::new(&p);
        assert!(matches!(empty.backward(Var(0)), Err(Error::GraphNotRecorded)));
    }

    // Exercises every op in one scalar function of 20 parameters.
    fn composite(p: &[f64]) -> (f64, Vec<f64>) {
        let mut t = Tape::new(p);
        let a = t.param(0, 3, 2).unwrap();
        let b = t.param(6, 2, 3).unwrap();
        let row = t.param(12, 1, 3).unwrap();
        let col = t.param(15, 3, 1).unwrap();
        let extra = t.param(18, 2, 1).unwrap();
        let ab = t.matmul(a, b).unwrap();
        let h = t.add_row(ab, row).unwrap();
        let h = t.silu(h);
        let hc = t.mul_col(h, col).unwrap();
        let sm = t.softmax_rows(hc);
        let ln = t.ln_floor(sm, 1e-12);
        let g = t.gather(ln, vec![2, 0, 2, 1]).unwrap();
        let seg = t.segment_sum(g, vec![1, 0, 1, 1], 2).unwrap();
        let sl = t.slice_cols(seg, 1, 2).unwrap();
        let cat = t.concat_cols(&[sl, extra]).unwrap();
        let e = t.exp(cat);
        let sp = t.softplus(e);
        let sq = t.square(sp);
        let prod = t.mul(sq, cat).unwrap();
        let s = t.sum_cols(prod);
        let sc = t.scale(s, 0.3);
        let d = t.sub(sc, extra).unwrap();
        let d = t.add(d, extra).unwrap();
        let loss = t.mean_all(d);
        let v = t.scalar(loss);
        (v, t.backward(loss).unwrap())
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let p: Vec<f64> = (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let (_, g) = composite(&p);
            let fd = fd_gradient(&p, 1e-5, |q| composite(q).0);
            assert_grad_close(&g, &fd, 1e-4);
        }
    }

    #[test]
    fn shape_errors() {
        let p = vec![0.0; 6];
        let mut t = Tape::new(&p);
        let a = t.param(0, 2, 3).unwrap();
        assert!(t.matmul(a, a).is_err());
        assert!(t.gather(a, vec![2]).is_err());
        assert!(t.param(4, 1, 3).is_err());
    }
}
