//! Tape-based reverse-mode differentiation over [`Matrix`] values.
//!
//! A [`Graph`] borrows the parameter store; parameter leaves read straight
//! from it and their gradients come back indexed by parameter id.

use super::tensor::{dot, Matrix};

pub type NodeId = usize;

#[derive(Debug, Clone)]
pub struct ParamStore {
    pub names: Vec<String>,
    pub tensors: Vec<Matrix>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Matrix) -> usize {
        self.names.push(name.into());
        self.tensors.push(value);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn zeros_like(&self) -> Vec<Matrix> {
        self.tensors.iter().map(|t| Matrix::zeros(t.rows, t.cols)).collect()
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug)]
enum Op {
    Param(usize),
    Const,
    MatMul(NodeId, NodeId),
    /// a · bᵀ
    MatMulT(NodeId, NodeId),
    Add(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    RmsNorm {
        x: NodeId,
        gain: NodeId,
        inv_rms: Vec<f64>,
    },
    Softmax(NodeId),
    Embed {
        table: NodeId,
        ids: Vec<usize>,
    },
    /// Gathers `table[row, bucket]` into an n×m matrix.
    Gather {
        table: NodeId,
        row: usize,
        buckets: Vec<usize>,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Matrix,
    },
}

pub struct Graph<'p> {
    store: &'p ParamStore,
    ops: Vec<Op>,
    values: Vec<Option<Matrix>>,
    param_nodes: Vec<Option<NodeId>>,
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Graph {
            store,
            ops: Vec::with_capacity(256),
            values: Vec::with_capacity(256),
            param_nodes: vec![None; store.len()],
        }
    }

    fn push(&mut self, op: Op, value: Option<Matrix>) -> NodeId {
        self.ops.push(op);
        self.values.push(value);
        self.ops.len() - 1
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        match self.ops[id] {
            Op::Param(p) => &self.store.tensors[p],
            _ => self.values[id].as_ref().expect("node value"),
        }
    }

    pub fn param(&mut self, pid: usize) -> NodeId {
        if let Some(id) = self.param_nodes[pid] {
            return id;
        }
        let id = self.push(Op::Param(pid), None);
        self.param_nodes[pid] = Some(id);
        id
    }

    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(Op::Const, Some(value))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul(self.value(b));
        self.push(Op::MatMul(a, b), Some(v))
    }

    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul_t(self.value(b));
        self.push(Op::MatMulT(a, b), Some(v))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        self.push(Op::Add(a, b), Some(v))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let mut v = self.value(a).clone();
        v.scale_assign(factor);
        self.push(Op::Scale(a, factor), Some(v))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        for x in &mut v.data {
            if *x < 0.0 {
                *x = 0.0;
            }
        }
        self.push(Op::Relu(a), Some(v))
    }

    /// Row-wise `x / rms(x) * gain`, gain being 1×cols.
    pub fn rms_norm(&mut self, x: NodeId, gain: NodeId, eps: f64) -> NodeId {
        let xv = self.value(x);
        let g = self.value(gain);
        assert_eq!((1, xv.cols), g.shape(), "rms_norm gain shape");
        let mut out = Matrix::zeros(xv.rows, xv.cols);
        let mut inv_rms = Vec::with_capacity(xv.rows);
        for r in 0..xv.rows {
            let row = xv.row(r);
            let ms = dot(row, row) / xv.cols as f64;
            let inv = 1.0 / (ms + eps).sqrt();
            inv_rms.push(inv);
            for ((o, &a), &gj) in out.row_mut(r).iter_mut().zip(row).zip(&g.data) {
                *o = a * inv * gj;
            }
        }
        self.push(Op::RmsNorm { x, gain, inv_rms }, Some(out))
    }

    /// Row softmax. `-inf` entries get zero probability.
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let mut out = av.clone();
        for r in 0..out.rows {
            softmax_in_place(out.row_mut(r));
        }
        self.push(Op::Softmax(a), Some(out))
    }

    pub fn embed(&mut self, table: NodeId, ids: &[usize]) -> NodeId {
        let t = self.value(table);
        let mut out = Matrix::zeros(ids.len(), t.cols);
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(t.row(id));
        }
        self.push(
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
            Some(out),
        )
    }

    pub fn gather(&mut self, table: NodeId, row: usize, buckets: &[usize], rows: usize, cols: usize) -> NodeId {
        assert_eq!(buckets.len(), rows * cols, "gather shape");
        let t = self.value(table);
        let src = t.row(row);
        let data = buckets.iter().map(|&b| src[b]).collect();
        self.push(
            Op::Gather {
                table,
                row,
                buckets: buckets.to_vec(),
            },
            Some(Matrix::from_vec(rows, cols, data)),
        )
    }

    /// Summed negative log-likelihood over rows whose mask is set; a 1×1 node.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize], mask: &[bool]) -> NodeId {
        let lv = self.value(logits);
        assert_eq!(lv.rows, targets.len(), "cross_entropy rows");
        assert_eq!(mask.len(), targets.len(), "cross_entropy mask");
        let mut probs = lv.clone();
        let mut total = 0.0;
        for r in 0..probs.rows {
            softmax_in_place(probs.row_mut(r));
            if mask[r] {
                total -= log_softmax_at(lv.row(r), targets[r]);
            }
        }
        self.push(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
            },
            Some(Matrix::from_vec(1, 1, vec![total])),
        )
    }

    /// Reverse pass from a 1×1 node. Returns one gradient per parameter
    /// (zeros for parameters the graph never touched).
    pub fn backward(&self, root: NodeId) -> Vec<Matrix> {
        assert_eq!(self.value(root).shape(), (1, 1), "backward needs a scalar root");
        let mut grads: Vec<Option<Matrix>> = (0..self.ops.len()).map(|_| None).collect();
        grads[root] = Some(Matrix::filled(1, 1, 1.0));
        let mut param_grads = self.store.zeros_like();

        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            match &self.ops[id] {
                Op::Param(p) => param_grads[*p].add_assign(&g),
                Op::Const => {}
                Op::MatMul(a, b) => {
                    let da = g.matmul_t(self.value(*b));
                    let db = self.value(*a).t_matmul(&g);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::MatMulT(a, b) => {
                    let da = g.matmul(self.value(*b));
                    let db = g.t_matmul(self.value(*a));
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::Scale(a, f) => {
                    let mut d = g;
                    d.scale_assign(*f);
                    accumulate(&mut grads, *a, d);
                }
                Op::Relu(a) => {
                    let mut d = g;
                    for (dv, &x) in d.data.iter_mut().zip(&self.value(*a).data) {
                        if x <= 0.0 {
                            *dv = 0.0;
                        }
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::RmsNorm { x, gain, inv_rms } => {
                    let xv = self.value(*x);
                    let gv = self.value(*gain);
                    let n = xv.cols as f64;
                    let mut dx = Matrix::zeros(xv.rows, xv.cols);
                    let mut dgain = Matrix::zeros(1, xv.cols);
                    for r in 0..xv.rows {
                        let xr = xv.row(r);
                        let gr = g.row(r);
                        let inv = inv_rms[r];
                        let mut proj = 0.0;
                        for j in 0..xv.cols {
                            dgain.data[j] += gr[j] * xr[j] * inv;
                            proj += gr[j] * gv.data[j] * xr[j];
                        }
                        let coeff = inv * inv * inv * proj / n;
                        for (j, d) in dx.row_mut(r).iter_mut().enumerate() {
                            *d = inv * gv.data[j] * gr[j] - xr[j] * coeff;
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *gain, dgain);
                }
                Op::Softmax(a) => {
                    let y = self.values[id].as_ref().expect("softmax value");
                    let mut d = Matrix::zeros(y.rows, y.cols);
                    for r in 0..y.rows {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let s = dot(yr, gr);
                        for (j, dv) in d.row_mut(r).iter_mut().enumerate() {
                            *dv = yr[j] * (gr[j] - s);
                        }
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::Embed { table, ids } => {
                    let t = self.value(*table);
                    let mut d = Matrix::zeros(t.rows, t.cols);
                    for (r, &tok) in ids.iter().enumerate() {
                        for (dv, &gv) in d.row_mut(tok).iter_mut().zip(g.row(r)) {
                            *dv += gv;
                        }
                    }
                    accumulate(&mut grads, *table, d);
                }
                Op::Gather { table, row, buckets } => {
                    let t = self.value(*table);
                    let mut d = Matrix::zeros(t.rows, t.cols);
                    let dst = d.row_mut(*row);
                    for (&b, &gv) in buckets.iter().zip(&g.data) {
                        dst[b] += gv;
                    }
                    accumulate(&mut grads, *table, d);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    mask,
                    probs,
                } => {
                    let scale = g.data[0];
                    let mut d = Matrix::zeros(probs.rows, probs.cols);
                    for r in 0..probs.rows {
                        if !mask[r] {
                            continue;
                        }
                        for (dv, &p) in d.row_mut(r).iter_mut().zip(probs.row(r)) {
                            *dv = scale * p;
                        }
                        d.data[r * probs.cols + targets[r]] -= scale;
                    }
                    accumulate(&mut grads, *logits, d);
                }
            }
        }
        param_grads
    }
}

fn accumulate(grads: &mut [Option<Matrix>], id: NodeId, delta: Matrix) {
    match &mut grads[id] {
        Some(existing) => existing.add_assign(&delta),
        slot => *slot = Some(delta),
    }
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// `log softmax(row)[target]`, computed stably.
pub fn log_softmax_at(row: &[f64], target: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    row[target] - lse
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    /// Every op once, checked against central differences.
    #[test]
    fn ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let table = store.push("table", random(&mut rng, 6, 4));
        let w = store.push("w", random(&mut rng, 4, 4));
        let gain = store.push("gain", random(&mut rng, 1, 4));
        let bias = store.push("bias", random(&mut rng, 2, 5));
        let head = store.push("head", random(&mut rng, 4, 6));

        let f = |s: &ParamStore| -> (f64, Vec<Matrix>) {
            let mut g = Graph::new(s);
            let t = g.param(table);
            let x = g.embed(t, &[1, 3, 3, 0]);
            let wn = g.param(w);
            let h = g.matmul(x, wn);
            let h = g.relu(h);
            let gn = g.param(gain);
            let h = g.rms_norm(h, gn, 1e-6);
            let scores = g.matmul_t(h, x);
            let scores = g.scale(scores, 0.5);
            let b = g.param(bias);
            let buckets: Vec<usize> = (0..16).map(|i| (i * 7) % 5).collect();
            let rb = g.gather(b, 1, &buckets, 4, 4);
            let scores = g.add(scores, rb);
            let p = g.softmax(scores);
            let mixed = g.matmul(p, h);
            let hd = g.param(head);
            let logits = g.matmul(mixed, hd);
            let loss = g.cross_entropy(logits, &[2, 5, 0, 1], &[true, false, true, true]);
            let grads = g.backward(loss);
            (g.value(loss).data[0], grads)
        };

        let (_, analytic) = f(&store);
        let eps = 1e-6;
        for p in 0..store.len() {
            for k in 0..store.tensors[p].data.len() {
                let orig = store.tensors[p].data[k];
                store.tensors[p].data[k] = orig + eps;
                let (up, _) = f(&store);
                store.tensors[p].data[k] = orig - eps;
                let (down, _) = f(&store);
                store.tensors[p].data[k] = orig;
                let numeric = (up - down) / (2.0 * eps);
                let a = analytic[p].data[k];
                assert!(
                    (a - numeric).abs() <= 1e-6 * (1.0 + a.abs().max(numeric.abs())),
                    "{}[{k}]: analytic {a} numeric {numeric}",
                    store.names[p]
                );
            }
        }
    }

    #[test]
    fn softmax_masks_negative_infinity() {
        let mut row = [0.0, f64::NEG_INFINITY, 0.0];
        softmax_in_place(&mut row);
        assert_eq!(row, [0.5, 0.0, 0.5]);
    }
}
