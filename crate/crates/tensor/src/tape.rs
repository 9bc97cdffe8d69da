use rand::Rng;

use crate::array::Array;
use crate::error::TensorError;
use crate::params::{ParamId, ParamStore};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Const,
    Param(ParamId),
    /// `a + b`; `b` may be a matching shape, a 1×n row broadcast over rows,
    /// or a 1×1 scalar broadcast.
    Add(NodeId, NodeId),
    /// Elementwise `a * b`; either side may be a 1×1 scalar broadcast.
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Log(NodeId),
    /// Row-wise softmax.
    Softmax(NodeId),
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    RepeatRows(NodeId, usize),
    /// Gather rows by index; duplicate indices accumulate gradient.
    Rows(NodeId, Vec<usize>),
    /// 1×n input scattered into a wider row; `map[i]` is the output column
    /// of input column `i`, colliding columns sum.
    ScatterAddCols { input: NodeId, map: Vec<usize> },
    /// Single element as a 1×1 node.
    Pick(NodeId, usize, usize),
    Sum(NodeId),
    Mean(NodeId),
    /// Mask entries are 0 or 1/(1-p) (inverted dropout, pre-scaled).
    Dropout(NodeId, Vec<f64>),
}

struct Node {
    op: Op,
    value: Array,
}

/// A Wengert list: forward ops append nodes, `backward` replays them in
/// reverse and accumulates parameter gradients into the [`ParamStore`].
///
/// A tape is single-writer; build one per forward pass. Parameter values are
/// snapshotted into the tape when bound via [`Tape::param`], so concurrent
/// tapes over one read-only store are safe.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Forward value of a node.
    pub fn value(&self, id: NodeId) -> &Array {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Array) -> NodeId {
        debug_assert!(
            value.all_finite(),
            "non-finite value produced by {op:?}"
        );
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Array) -> NodeId {
        self.push(Op::Const, value)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.constant(Array::scalar(v))
    }

    /// Bind a parameter: snapshots its current value onto the tape.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        self.push(Op::Param(id), store.value(id).clone())
    }

    fn shape(&self, id: NodeId) -> [usize; 2] {
        self.value(id).shape()
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let broadcast_row = sb == [1, sa[1]] && sa[0] > 1;
        let broadcast_scalar = sb == [1, 1] && sa != [1, 1];
        if sa != sb && !broadcast_row && !broadcast_scalar {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                lhs: sa,
                rhs: sb,
            });
        }
        let va = self.value(a);
        let vb = self.value(b);
        let mut out = va.clone();
        if sa == sb {
            out.add_assign(vb);
        } else if broadcast_scalar {
            let s = vb.scalar_value();
            out.data_mut().iter_mut().for_each(|x| *x += s);
        } else {
            for r in 0..out.rows() {
                for c in 0..out.cols() {
                    let v = out.get(r, c) + vb.get(0, c);
                    out.set(r, c, v);
                }
            }
        }
        Ok(self.push(Op::Add(a, b), out))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let a_scalar = sa == [1, 1];
        let b_scalar = sb == [1, 1];
        if sa != sb && !a_scalar && !b_scalar {
            return Err(TensorError::ShapeMismatch {
                op: "mul",
                lhs: sa,
                rhs: sb,
            });
        }
        let va = self.value(a);
        let vb = self.value(b);
        let out = if sa == sb {
            let data = va
                .data()
                .iter()
                .zip(vb.data())
                .map(|(x, y)| x * y)
                .collect();
            Array::from_flat(sa[0], sa[1], data)
        } else if b_scalar {
            let s = vb.scalar_value();
            va.map(|x| x * s)
        } else {
            let s = va.scalar_value();
            vb.map(|x| x * s)
        };
        Ok(self.push(Op::Mul(a, b), out))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let out = self.value(a).map(|x| x * c);
        self.push(Op::Scale(a, c), out)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let out = self.value(a).map(|x| x + c);
        self.push(Op::AddScalar(a), out)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.scale(a, -1.0)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let nb = self.neg(b);
        self.add(a, nb)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let out = matmul_values(self.value(a), self.value(b), false, false);
        Ok(self.push(Op::MatMul(a, b), out))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let mut out = Array::zeros(va.cols(), va.rows());
        for r in 0..va.rows() {
            for c in 0..va.cols() {
                out.set(c, r, va.get(r, c));
            }
        }
        self.push(Op::Transpose(a), out)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(Op::Sigmoid(a), out)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(f64::tanh);
        self.push(Op::Tanh(a), out)
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(f64::ln);
        self.push(Op::Log(a), out)
    }

    /// Numerically stable row-wise softmax; every output row sums to 1 and
    /// all entries are strictly positive.
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let mut out = Array::zeros(va.rows(), va.cols());
        for r in 0..va.rows() {
            let row = va.row_slice(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|&x| (x - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            for (c, e) in exps.iter().enumerate() {
                out.set(r, c, e / sum);
            }
        }
        self.push(Op::Softmax(a), out)
    }

    /// Concatenate along the given axis (0 = stack rows, 1 = widen columns).
    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId, TensorError> {
        match axis {
            0 => self.concat_rows(parts),
            1 => self.concat_cols(parts),
            _ => Err(TensorError::IndexOutOfBounds {
                op: "concat",
                index: axis,
                shape: [2, 0],
            }),
        }
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::EmptySequence { op: "concat_rows" });
        }
        let cols = self.shape(parts[0])[1];
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let sp = self.shape(p);
            if sp[1] != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: [rows, cols],
                    rhs: sp,
                });
            }
            rows += sp[0];
            data.extend_from_slice(self.value(p).data());
        }
        let out = Array::from_flat(rows, cols, data);
        Ok(self.push(Op::ConcatRows(parts.to_vec()), out))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::EmptySequence { op: "concat_cols" });
        }
        let rows = self.shape(parts[0])[0];
        let mut cols = 0;
        for &p in parts {
            let sp = self.shape(p);
            if sp[0] != rows {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: [rows, cols],
                    rhs: sp,
                });
            }
            cols += sp[1];
        }
        let mut out = Array::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let vp = self.value(p).clone();
            for r in 0..rows {
                for c in 0..vp.cols() {
                    out.set(r, offset + c, vp.get(r, c));
                }
            }
            offset += vp.cols();
        }
        Ok(self.push(Op::ConcatCols(parts.to_vec()), out))
    }

    /// Stack `n` copies of a 1×c row into an n×c matrix.
    pub fn repeat_rows(&mut self, a: NodeId, n: usize) -> Result<NodeId, TensorError> {
        let sa = self.shape(a);
        if sa[0] != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "repeat_rows",
                lhs: sa,
                rhs: [1, sa[1]],
            });
        }
        let row = self.value(a).data().to_vec();
        let mut data = Vec::with_capacity(n * sa[1]);
        for _ in 0..n {
            data.extend_from_slice(&row);
        }
        let out = Array::from_flat(n, sa[1], data);
        Ok(self.push(Op::RepeatRows(a, n), out))
    }

    /// Gather rows by index. This is also the embedding lookup: an id list
    /// gathered from a vocab×dim table.
    pub fn rows(&mut self, a: NodeId, indices: &[usize]) -> Result<NodeId, TensorError> {
        let sa = self.shape(a);
        if indices.is_empty() {
            return Err(TensorError::EmptySequence { op: "rows" });
        }
        for &i in indices {
            if i >= sa[0] {
                return Err(TensorError::IndexOutOfBounds {
                    op: "rows",
                    index: i,
                    shape: sa,
                });
            }
        }
        let va = self.value(a);
        let mut data = Vec::with_capacity(indices.len() * sa[1]);
        for &i in indices {
            data.extend_from_slice(va.row_slice(i));
        }
        let out = Array::from_flat(indices.len(), sa[1], data);
        Ok(self.push(Op::Rows(a, indices.to_vec()), out))
    }

    /// Embedding lookup: [`Tape::rows`] on the table node.
    pub fn embed(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId, TensorError> {
        self.rows(table, ids)
    }

    /// Scatter a 1×n row into a wider 1×`out_cols` row, summing columns that
    /// map to the same destination. Unmapped destinations are zero.
    pub fn scatter_add_cols(
        &mut self,
        input: NodeId,
        map: &[usize],
        out_cols: usize,
    ) -> Result<NodeId, TensorError> {
        let sa = self.shape(input);
        if sa[0] != 1 || sa[1] != map.len() {
            return Err(TensorError::ShapeMismatch {
                op: "scatter_add_cols",
                lhs: sa,
                rhs: [1, map.len()],
            });
        }
        for &m in map {
            if m >= out_cols {
                return Err(TensorError::IndexOutOfBounds {
                    op: "scatter_add_cols",
                    index: m,
                    shape: [1, out_cols],
                });
            }
        }
        let va = self.value(input);
        let mut out = Array::zeros(1, out_cols);
        for (i, &m) in map.iter().enumerate() {
            let v = out.get(0, m) + va.get(0, i);
            out.set(0, m, v);
        }
        Ok(self.push(
            Op::ScatterAddCols {
                input,
                map: map.to_vec(),
            },
            out,
        ))
    }

    /// Extract one element as a 1×1 node.
    pub fn pick(&mut self, a: NodeId, r: usize, c: usize) -> Result<NodeId, TensorError> {
        let sa = self.shape(a);
        if r >= sa[0] || c >= sa[1] {
            return Err(TensorError::IndexOutOfBounds {
                op: "pick",
                index: r * sa[1] + c,
                shape: sa,
            });
        }
        let v = self.value(a).get(r, c);
        Ok(self.push(Op::Pick(a, r, c), Array::scalar(v)))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Op::Sum(a), Array::scalar(s))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let s: f64 = v.data().iter().sum();
        let n = v.len() as f64;
        self.push(Op::Mean(a), Array::scalar(s / n))
    }

    /// Inverted dropout: in train mode each entry is zeroed with probability
    /// `p` and survivors are scaled by 1/(1-p); in eval mode it is identity.
    pub fn dropout<R: Rng>(&mut self, a: NodeId, p: f64, train: bool, rng: &mut R) -> NodeId {
        if !train || p <= 0.0 {
            let out = self.value(a).clone();
            let n = out.len();
            return self.push(Op::Dropout(a, vec![1.0; n]), out);
        }
        let keep = 1.0 - p;
        let va = self.value(a);
        let mask: Vec<f64> = (0..va.len())
            .map(|_| {
                if rng.random::<f64>() < p {
                    0.0
                } else {
                    1.0 / keep
                }
            })
            .collect();
        let data: Vec<f64> = va.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let out = Array::from_flat(va.rows(), va.cols(), data);
        self.push(Op::Dropout(a, mask), out)
    }

    /// Negative log-likelihood of column `target` of a 1×n probability row:
    /// `-ln p[target]`. Zero when the distribution is one-hot correct.
    pub fn cross_entropy(&mut self, probs: NodeId, target: usize) -> Result<NodeId, TensorError> {
        let p = self.pick(probs, 0, target)?;
        let lp = self.log(p);
        Ok(self.neg(lp))
    }

    /// Reverse pass from a scalar root; gradients for every reachable
    /// parameter are accumulated into `store` (repeated calls sum).
    pub fn backward(&mut self, root: NodeId, store: &mut ParamStore) -> Result<(), TensorError> {
        let root_shape = self.shape(root);
        if root_shape != [1, 1] {
            return Err(TensorError::NonScalarRoot { shape: root_shape });
        }
        let mut grads: Vec<Option<Array>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Array::scalar(1.0));

        for i in (0..=root.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[i].op {
                Op::Const => {}
                Op::Param(pid) => {
                    store.grad_mut(*pid).add_assign(&g);
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    accumulate(&mut grads, a.0, &g);
                    let sb = self.shape(b);
                    if sb == g.shape() {
                        accumulate(&mut grads, b.0, &g);
                    } else if sb == [1, 1] {
                        let s: f64 = g.data().iter().sum();
                        accumulate(&mut grads, b.0, &Array::scalar(s));
                    } else {
                        // Row broadcast: sum over rows.
                        let mut gb = Array::zeros(1, sb[1]);
                        for r in 0..g.rows() {
                            for c in 0..g.cols() {
                                let v = gb.get(0, c) + g.get(r, c);
                                gb.set(0, c, v);
                            }
                        }
                        accumulate(&mut grads, b.0, &gb);
                    }
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    let (sa, sb) = (self.shape(a), self.shape(b));
                    let va = self.value(a).clone();
                    let vb = self.value(b).clone();
                    if sa == sb {
                        let ga = elementwise(&g, &vb, |x, y| x * y);
                        let gb = elementwise(&g, &va, |x, y| x * y);
                        accumulate(&mut grads, a.0, &ga);
                        accumulate(&mut grads, b.0, &gb);
                    } else if sb == [1, 1] {
                        let s = vb.scalar_value();
                        accumulate(&mut grads, a.0, &g.map(|x| x * s));
                        let dot: f64 = g.data().iter().zip(va.data()).map(|(x, y)| x * y).sum();
                        accumulate(&mut grads, b.0, &Array::scalar(dot));
                    } else {
                        let s = va.scalar_value();
                        accumulate(&mut grads, b.0, &g.map(|x| x * s));
                        let dot: f64 = g.data().iter().zip(vb.data()).map(|(x, y)| x * y).sum();
                        accumulate(&mut grads, a.0, &Array::scalar(dot));
                    }
                }
                Op::Scale(a, c) => {
                    let (a, c) = (*a, *c);
                    accumulate(&mut grads, a.0, &g.map(|x| x * c));
                }
                Op::AddScalar(a) => {
                    accumulate(&mut grads, a.0, &g);
                }
                Op::MatMul(a, b) => {
                    let (a, b) = (*a, *b);
                    let va = self.value(a).clone();
                    let vb = self.value(b).clone();
                    // dA = G B^T ; dB = A^T G
                    let ga = matmul_values(&g, &vb, false, true);
                    let gb = matmul_values(&va, &g, true, false);
                    accumulate(&mut grads, a.0, &ga);
                    accumulate(&mut grads, b.0, &gb);
                }
                Op::Transpose(a) => {
                    let a = *a;
                    let mut gt = Array::zeros(g.cols(), g.rows());
                    for r in 0..g.rows() {
                        for c in 0..g.cols() {
                            gt.set(c, r, g.get(r, c));
                        }
                    }
                    accumulate(&mut grads, a.0, &gt);
                }
                Op::Sigmoid(a) => {
                    let a = *a;
                    let y = self.nodes[i].value.clone();
                    let ga = elementwise(&g, &y, |gv, yv| gv * yv * (1.0 - yv));
                    accumulate(&mut grads, a.0, &ga);
                }
                Op::Tanh(a) => {
                    let a = *a;
                    let y = self.nodes[i].value.clone();
                    let ga = elementwise(&g, &y, |gv, yv| gv * (1.0 - yv * yv));
                    accumulate(&mut grads, a.0, &ga);
                }
                Op::Log(a) => {
                    let a = *a;
                    let va = self.value(a).clone();
                    let ga = elementwise(&g, &va, |gv, xv| gv / xv);
                    accumulate(&mut grads, a.0, &ga);
                }
                Op::Softmax(a) => {
                    let a = *a;
                    let y = self.nodes[i].value.clone();
                    let mut ga = Array::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let dot: f64 = (0..y.cols()).map(|c| g.get(r, c) * y.get(r, c)).sum();
                        for c in 0..y.cols() {
                            ga.set(r, c, y.get(r, c) * (g.get(r, c) - dot));
                        }
                    }
                    accumulate(&mut grads, a.0, &ga);
                }
                Op::ConcatRows(parts) => {
                    let parts = parts.clone();
                    let mut offset = 0;
                    for p in parts {
                        let sp = self.shape(p);
                        let mut gp = Array::zeros(sp[0], sp[1]);
                        for r in 0..sp[0] {
                            for c in 0..sp[1] {
                                gp.set(r, c, g.get(offset + r, c));
                            }
                        }
                        offset += sp[0];
                        accumulate(&mut grads, p.0, &gp);
                    }
                }
                Op::ConcatCols(parts) => {
                    let parts = parts.clone();
                    let mut offset = 0;
                    for p in parts {
                        let sp = self.shape(p);
                        let mut gp = Array::zeros(sp[0], sp[1]);
                        for r in 0..sp[0] {
                            for c in 0..sp[1] {
                                gp.set(r, c, g.get(r, offset + c));
                            }
                        }
                        offset += sp[1];
                        accumulate(&mut grads, p.0, &gp);
                    }
                }
                Op::RepeatRows(a, n) => {
                    let (a, n) = (*a, *n);
                    let cols = g.cols();
                    let mut ga = Array::zeros(1, cols);
                    for r in 0..n {
                        for c in 0..cols {
                            let v = ga.get(0, c) + g.get(r, c);
                            ga.set(0, c, v);
                        }
                    }
                    accumulate(&mut grads, a.0, &ga);
                }
                Op::Rows(a, indices) => {
                    let a = *a;
                    let indices = indices.clone();
                    let sa = self.shape(a);
                    let mut ga = Array::zeros(sa[0], sa[1]);
                    for (r, &idx) in indices.iter().enumerate() {
                        for c in 0..sa[1] {
                            let v = ga.get(idx, c) + g.get(r, c);
                            ga.set(idx, c, v);
                        }
                    }
                    accumulate(&mut grads, a.0, &ga);
                }
                Op::ScatterAddCols { input, map } => {
                    let input = *input;
                    let map = map.clone();
                    let mut ga = Array::zeros(1, map.len());
                    for (i_col, &m) in map.iter().enumerate() {
                        ga.set(0, i_col, g.get(0, m));
                    }
                    accumulate(&mut grads, input.0, &ga);
                }
                Op::Pick(a, r, c) => {
                    let (a, r, c) = (*a, *r, *c);
                    let sa = self.shape(a);
                    let mut ga = Array::zeros(sa[0], sa[1]);
                    ga.set(r, c, g.scalar_value());
                    accumulate(&mut grads, a.0, &ga);
                }
                Op::Sum(a) => {
                    let a = *a;
                    let sa = self.shape(a);
                    let s = g.scalar_value();
                    let mut ga = Array::zeros(sa[0], sa[1]);
                    ga.fill(s);
                    accumulate(&mut grads, a.0, &ga);
                }
                Op::Mean(a) => {
                    let a = *a;
                    let sa = self.shape(a);
                    let n = (sa[0] * sa[1]) as f64;
                    let s = g.scalar_value() / n;
                    let mut ga = Array::zeros(sa[0], sa[1]);
                    ga.fill(s);
                    accumulate(&mut grads, a.0, &ga);
                }
                Op::Dropout(a, mask) => {
                    let a = *a;
                    let mask = mask.clone();
                    let data: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(&mask)
                        .map(|(gv, m)| gv * m)
                        .collect();
                    let ga = Array::from_flat(g.rows(), g.cols(), data);
                    accumulate(&mut grads, a.0, &ga);
                }
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Array>], idx: usize, g: &Array) {
    match &mut grads[idx] {
        Some(existing) => existing.add_assign(g),
        slot @ None => *slot = Some(g.clone()),
    }
}

fn elementwise(a: &Array, b: &Array, f: impl Fn(f64, f64) -> f64) -> Array {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Array::from_flat(a.rows(), a.cols(), data)
}

/// `A·B` with optional transposes, reading values directly.
fn matmul_values(a: &Array, b: &Array, ta: bool, tb: bool) -> Array {
    let (m, k) = if ta {
        (a.cols(), a.rows())
    } else {
        (a.rows(), a.cols())
    };
    let (kb, n) = if tb {
        (b.cols(), b.rows())
    } else {
        (b.rows(), b.cols())
    };
    assert_eq!(k, kb, "matmul_values inner dims");
    let mut out = Array::zeros(m, n);
    for i in 0..m {
        for p in 0..k {
            let av = if ta { a.get(p, i) } else { a.get(i, p) };
            if av == 0.0 {
                continue;
            }
            for j in 0..n {
                let bv = if tb { b.get(j, p) } else { b.get(p, j) };
                let v = out.get(i, j) + av * bv;
                out.set(i, j, v);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grad_of(store: &ParamStore, id: ParamId) -> Vec<f64> {
        store.grad(id).data().to_vec()
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut t = Tape::new();
        let x = t.constant(Array::row(vec![0.0, 0.0]));
        let y = t.softmax(x);
        assert_eq!(t.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_are_positive() {
        let mut t = Tape::new();
        let x = t.constant(Array::from_flat(2, 3, vec![1.0, -2.0, 0.5, 100.0, 99.0, 98.0]));
        let y = t.softmax(x);
        for r in 0..2 {
            let s: f64 = t.value(y).row_slice(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
            assert!(t.value(y).row_slice(r).iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn matmul_identity_is_identity() {
        let mut t = Tape::new();
        let x = t.constant(Array::from_flat(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let i = t.constant(Array::from_flat(2, 2, vec![1.0, 0.0, 0.0, 1.0]));
        let y = t.matmul(i, x).unwrap();
        assert_eq!(t.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_shape_error_names_op_and_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Array::zeros(2, 3));
        let b = t.constant(Array::zeros(2, 3));
        let err = t.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul"), "{msg}");
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn cross_entropy_of_one_hot_correct_is_zero() {
        let mut t = Tape::new();
        let p = t.constant(Array::row(vec![0.0, 1.0, 0.0]));
        let ce = t.cross_entropy(p, 1).unwrap();
        assert_eq!(t.value(ce).scalar_value(), 0.0);
    }

    #[test]
    fn cross_entropy_of_uniform_is_log_n() {
        let mut t = Tape::new();
        let p = t.constant(Array::row(vec![0.25; 4]));
        let ce = t.cross_entropy(p, 2).unwrap();
        assert!((t.value(ce).scalar_value() - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut ps = ParamStore::new();
        let w = ps.add("w", Array::row(vec![1.0, 2.0, 3.0]));
        let mut t = Tape::new();
        let wn = t.param(&ps, w);
        let s = t.sum(wn);
        t.backward(s, &mut ps).unwrap();
        assert_eq!(grad_of(&ps, w), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn grad_of_square_at_three_is_six() {
        let mut ps = ParamStore::new();
        let w = ps.add("w", Array::scalar(3.0));
        let mut t = Tape::new();
        let wn = t.param(&ps, w);
        let sq = t.mul(wn, wn).unwrap();
        t.backward(sq, &mut ps).unwrap();
        assert_eq!(grad_of(&ps, w), vec![6.0]);
    }

    #[test]
    fn repeated_backward_sums_gradients() {
        let mut ps = ParamStore::new();
        let w = ps.add("w", Array::scalar(3.0));
        let mut t = Tape::new();
        let wn = t.param(&ps, w);
        let sq = t.mul(wn, wn).unwrap();
        t.backward(sq, &mut ps).unwrap();
        t.backward(sq, &mut ps).unwrap();
        assert_eq!(grad_of(&ps, w), vec![12.0]);
        ps.zero_grad();
        t.backward(sq, &mut ps).unwrap();
        assert_eq!(grad_of(&ps, w), vec![6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut ps = ParamStore::new();
        let w = ps.add("w", Array::row(vec![1.0, 2.0]));
        let mut t = Tape::new();
        let wn = t.param(&ps, w);
        let err = t.backward(wn, &mut ps).unwrap_err();
        assert!(matches!(err, TensorError::NonScalarRoot { .. }));
    }

    #[test]
    fn scatter_add_cols_sums_collisions() {
        let mut t = Tape::new();
        let x = t.constant(Array::row(vec![0.1, 0.2, 0.3]));
        let y = t.scatter_add_cols(x, &[2, 0, 2], 4).unwrap();
        let got = t.value(y).data().to_vec();
        assert!((got[0] - 0.2).abs() < 1e-15);
        assert_eq!(got[1], 0.0);
        assert!((got[2] - 0.4).abs() < 1e-15);
        assert_eq!(got[3], 0.0);
    }

    #[test]
    fn rows_gather_accumulates_duplicate_grads() {
        let mut ps = ParamStore::new();
        let table = ps.add("t", Array::from_flat(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let mut t = Tape::new();
        let tn = t.param(&ps, table);
        let g = t.rows(tn, &[1, 1, 2]).unwrap();
        assert_eq!(t.value(g).shape(), [3, 2]);
        let s = t.sum(g);
        t.backward(s, &mut ps).unwrap();
        // Row 1 was gathered twice, row 2 once, row 0 never.
        assert_eq!(ps.grad(table).data(), &[0.0, 0.0, 2.0, 2.0, 1.0, 1.0]);
    }

    #[test]
    fn dropout_eval_mode_is_identity() {
        use rand::rngs::StdRng;
        use rand::SeedableRng;
        let mut rng = StdRng::seed_from_u64(1);
        let mut t = Tape::new();
        let x = t.constant(Array::row(vec![1.0, 2.0, 3.0]));
        let y = t.dropout(x, 0.5, false, &mut rng);
        assert_eq!(t.value(y).data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn dropout_mask_is_seed_deterministic() {
        use rand::rngs::StdRng;
        use rand::SeedableRng;
        let run = |seed: u64| {
            let mut rng = StdRng::seed_from_u64(seed);
            let mut t = Tape::new();
            let x = t.constant(Array::row(vec![1.0; 64]));
            let y = t.dropout(x, 0.3, true, &mut rng);
            t.value(y).data().to_vec()
        };
        assert_eq!(run(7), run(7));
        assert_ne!(run(7), run(8));
    }

    #[test]
    fn add_broadcasts_row_and_scalar() {
        let mut t = Tape::new();
        let a = t.constant(Array::from_flat(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let row = t.constant(Array::row(vec![10.0, 20.0]));
        let y = t.add(a, row).unwrap();
        assert_eq!(t.value(y).data(), &[11.0, 22.0, 13.0, 24.0]);
        let s = t.constant(Array::scalar(1.0));
        let z = t.add(a, s).unwrap();
        assert_eq!(t.value(z).data(), &[2.0, 3.0, 4.0, 5.0]);
    }
}
