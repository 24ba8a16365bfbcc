use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::GradError;
use crate::tensor::Tensor;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(0);

/// Identifies a trainable leaf. Gradients are reported keyed by this id.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LeafId(pub usize);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Debug)]
enum Op {
    Leaf(LeafId),
    Constant,
    MatMul(usize, usize),
    Add { lhs: usize, rhs: usize, broadcast: bool },
    Relu(usize),
    RowSoftmax(usize),
    Log(usize),
    Exp(usize),
    Mul(usize, usize),
    Div(usize, usize),
    Gather(usize, Vec<usize>),
    Sum(usize),
    Mean(usize),
    Scale(usize, f64),
    ClampMin(usize, f64),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Records primitive applications eagerly and replays them in reverse to
/// produce gradients.
///
/// Values are computed as soon as an op is applied, so the tape doubles as
/// the forward evaluator. Node indices are assigned in application order,
/// which is a topological order of the graph; `backward` walks them from the
/// end. A tape is single-threaded and owns everything recorded on it.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed), nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node. Vars from before the reset become invalid.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.id = NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed);
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var { tape: self.id, index: self.nodes.len() - 1 }
    }

    fn index(&self, v: Var) -> Result<usize, GradError> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(GradError::ForeignVar);
        }
        Ok(v.index)
    }

    fn node_value(&self, v: Var) -> Result<(usize, &Tensor), GradError> {
        let i = self.index(v)?;
        Ok((i, &self.nodes[i].value))
    }

    /// Registers a trainable leaf.
    pub fn leaf(&mut self, id: LeafId, value: Tensor) -> Var {
        self.push(value, Op::Leaf(id))
    }

    /// Registers a value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant)
    }

    /// Copies `v` into a new constant node, cutting gradient flow.
    pub fn detach(&mut self, v: Var) -> Result<Var, GradError> {
        let value = self.node_value(v)?.1.clone();
        Ok(self.constant(value))
    }

    pub fn value(&self, v: Var) -> Result<&Tensor, GradError> {
        Ok(self.node_value(v)?.1)
    }

    /// `(m×k) · (k×n) → (m×n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        let (ia, ta) = self.node_value(a)?;
        let (ib, tb) = self.node_value(b)?;
        if ta.rank() != 2 || tb.rank() != 2 || ta.cols() != tb.rows() {
            return Err(shape_err("matmul", ta, tb));
        }
        let out = matmul(ta, tb);
        Ok(self.push(out, Op::MatMul(ia, ib)))
    }

    /// Elementwise sum of equal shapes, or a matrix plus a row vector broadcast
    /// over every row.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        let (ia, ta) = self.node_value(a)?;
        let (ib, tb) = self.node_value(b)?;
        if ta.shape() == tb.shape() {
            let out = ta.zip_map(tb, |x, y| x + y);
            return Ok(self.push(out, Op::Add { lhs: ia, rhs: ib, broadcast: false }));
        }
        let row_like = match tb.shape() {
            [n] => Some(*n),
            [1, n] => Some(*n),
            _ => None,
        };
        match (ta.rank(), row_like) {
            (2, Some(n)) if n == ta.cols() => {
                let mut out = ta.clone();
                let bias = tb.data();
                for row in out.data_mut().chunks_mut(n) {
                    for (x, b) in row.iter_mut().zip(bias) {
                        *x += b;
                    }
                }
                Ok(self.push(out, Op::Add { lhs: ia, rhs: ib, broadcast: true }))
            }
            _ => Err(shape_err("add_broadcast", ta, tb)),
        }
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, GradError> {
        let (ia, ta) = self.node_value(a)?;
        let out = ta.map(|x| x.max(0.0));
        Ok(self.push(out, Op::Relu(ia)))
    }

    /// Softmax over each row of a matrix, computed after subtracting the row max.
    pub fn row_softmax(&mut self, a: Var) -> Result<Var, GradError> {
        let (ia, ta) = self.node_value(a)?;
        if ta.rank() != 2 {
            return Err(GradError::Shape { op: "row_softmax", detail: format!("expected a matrix, got {:?}", ta.shape()) });
        }
        let out = row_softmax(ta);
        Ok(self.push(out, Op::RowSoftmax(ia)))
    }

    /// Natural log; every input entry must be strictly positive.
    pub fn log(&mut self, a: Var) -> Result<Var, GradError> {
        let (ia, ta) = self.node_value(a)?;
        if let Some(index) = ta.data().iter().position(|&x| !(x > 0.0)) {
            return Err(GradError::Domain { op: "log", index, value: ta.data()[index] });
        }
        let out = ta.map(f64::ln);
        Ok(self.push(out, Op::Log(ia)))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, GradError> {
        let (ia, ta) = self.node_value(a)?;
        let out = ta.map(f64::exp);
        Ok(self.push(out, Op::Exp(ia)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        let (ia, ta) = self.node_value(a)?;
        let (ib, tb) = self.node_value(b)?;
        if ta.shape() != tb.shape() {
            return Err(shape_err("elementwise_mul", ta, tb));
        }
        let out = ta.zip_map(tb, |x, y| x * y);
        Ok(self.push(out, Op::Mul(ia, ib)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        let (ia, ta) = self.node_value(a)?;
        let (ib, tb) = self.node_value(b)?;
        if ta.shape() != tb.shape() {
            return Err(shape_err("elementwise_div", ta, tb));
        }
        if let Some(index) = tb.data().iter().position(|&x| x == 0.0) {
            return Err(GradError::Domain { op: "elementwise_div", index, value: 0.0 });
        }
        let out = ta.zip_map(tb, |x, y| x / y);
        Ok(self.push(out, Op::Div(ia, ib)))
    }

    /// Picks entry `indices[i]` from row `i`, producing a vector.
    pub fn gather_per_row(&mut self, a: Var, indices: &[usize]) -> Result<Var, GradError> {
        let (ia, ta) = self.node_value(a)?;
        if ta.rank() != 2 || ta.rows() != indices.len() {
            return Err(GradError::Shape {
                op: "gather_per_row",
                detail: format!("{:?} with {} indices", ta.shape(), indices.len()),
            });
        }
        if let Some(row) = indices.iter().position(|&j| j >= ta.cols()) {
            return Err(GradError::Shape {
                op: "gather_per_row",
                detail: format!("index {} out of range for {} columns at row {row}", indices[row], ta.cols()),
            });
        }
        let out = Tensor::vector(indices.iter().enumerate().map(|(i, &j)| ta.get(i, j)).collect());
        Ok(self.push(out, Op::Gather(ia, indices.to_vec())))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, GradError> {
        let (ia, ta) = self.node_value(a)?;
        let out = Tensor::scalar(ta.sum());
        Ok(self.push(out, Op::Sum(ia)))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, GradError> {
        let (ia, ta) = self.node_value(a)?;
        if ta.is_empty() {
            return Err(GradError::Shape { op: "mean", detail: "empty tensor".into() });
        }
        let out = Tensor::scalar(ta.sum() / ta.len() as f64);
        Ok(self.push(out, Op::Mean(ia)))
    }

    pub fn scalar_mul(&mut self, a: Var, k: f64) -> Result<Var, GradError> {
        let (ia, ta) = self.node_value(a)?;
        let out = ta.map(|x| k * x);
        Ok(self.push(out, Op::Scale(ia, k)))
    }

    /// `max(x, floor)` elementwise; gradient passes only where `x > floor`.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Result<Var, GradError> {
        let (ia, ta) = self.node_value(a)?;
        let out = ta.map(|x| x.max(floor));
        Ok(self.push(out, Op::ClampMin(ia, floor)))
    }

    /// Reverse pass from a scalar `loss`.
    ///
    /// Every leaf on the tape gets an entry, zero when no path reaches it.
    /// Leaves registered twice under the same id have their gradients summed.
    /// Adjoints live in a scratch buffer, so calling this twice returns the
    /// same result.
    pub fn backward(&self, loss: Var) -> Result<Gradients, GradError> {
        let root = self.index(loss)?;
        let loss_value = &self.nodes[root].value;
        if !loss_value.is_scalar() {
            return Err(GradError::NotScalar(loss_value.shape().to_vec()));
        }

        let mut adj: Vec<Option<Tensor>> = (0..=root).map(|_| None).collect();
        adj[root] = Some(Tensor::full(loss_value.shape(), 1.0));

        for i in (0..=root).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            let out = &node.value;
            match &node.op {
                Op::Leaf(_) | Op::Constant => {
                    adj[i] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let ta = &self.nodes[*a].value;
                    let tb = &self.nodes[*b].value;
                    accumulate(&mut adj, *a, matmul_nt(&g, tb));
                    accumulate(&mut adj, *b, matmul_tn(ta, &g));
                }
                Op::Add { lhs, rhs, broadcast } => {
                    if *broadcast {
                        let tb = &self.nodes[*rhs].value;
                        let n = g.cols();
                        let mut col = vec![0.0; n];
                        for row in g.data().chunks(n) {
                            for (c, x) in col.iter_mut().zip(row) {
                                *c += x;
                            }
                        }
                        accumulate(&mut adj, *rhs, Tensor::new(tb.shape().to_vec(), col));
                    } else {
                        accumulate(&mut adj, *rhs, g.clone());
                    }
                    accumulate(&mut adj, *lhs, g);
                }
                Op::Relu(a) => {
                    let ta = &self.nodes[*a].value;
                    accumulate(&mut adj, *a, g.zip_map(ta, |d, x| if x > 0.0 { d } else { 0.0 }));
                }
                Op::RowSoftmax(a) => {
                    let n = out.cols();
                    let mut grad = vec![0.0; out.len()];
                    for ((gr, yr), dst) in g.data().chunks(n).zip(out.data().chunks(n)).zip(grad.chunks_mut(n)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(d, y)| d * y).sum();
                        for ((o, d), y) in dst.iter_mut().zip(gr).zip(yr) {
                            *o = y * (d - dot);
                        }
                    }
                    accumulate(&mut adj, *a, Tensor::new(out.shape().to_vec(), grad));
                }
                Op::Log(a) => {
                    let ta = &self.nodes[*a].value;
                    accumulate(&mut adj, *a, g.zip_map(ta, |d, x| d / x));
                }
                Op::Exp(a) => {
                    accumulate(&mut adj, *a, g.zip_map(out, |d, y| d * y));
                }
                Op::Mul(a, b) => {
                    let ta = &self.nodes[*a].value;
                    let tb = &self.nodes[*b].value;
                    accumulate(&mut adj, *a, g.zip_map(tb, |d, y| d * y));
                    accumulate(&mut adj, *b, g.zip_map(ta, |d, x| d * x));
                }
                Op::Div(a, b) => {
                    let tb = &self.nodes[*b].value;
                    let ga = g.zip_map(tb, |d, y| d / y);
                    // d(x/y)/dy = -(x/y)/y, reusing the forward output.
                    let q = out.zip_map(tb, |o, y| -o / y);
                    accumulate(&mut adj, *b, g.zip_map(&q, |d, s| d * s));
                    accumulate(&mut adj, *a, ga);
                }
                Op::Gather(a, indices) => {
                    let ta = &self.nodes[*a].value;
                    let mut grad = Tensor::zeros(ta.shape());
                    for (i, (&j, &d)) in indices.iter().zip(g.data()).enumerate() {
                        grad.set(i, j, d);
                    }
                    accumulate(&mut adj, *a, grad);
                }
                Op::Sum(a) => {
                    let shape = self.nodes[*a].value.shape();
                    accumulate(&mut adj, *a, Tensor::full(shape, g.item()));
                }
                Op::Mean(a) => {
                    let ta = &self.nodes[*a].value;
                    accumulate(&mut adj, *a, Tensor::full(ta.shape(), g.item() / ta.len() as f64));
                }
                Op::Scale(a, k) => {
                    accumulate(&mut adj, *a, g.map(|d| d * k));
                }
                Op::ClampMin(a, floor) => {
                    let ta = &self.nodes[*a].value;
                    let floor = *floor;
                    accumulate(&mut adj, *a, g.zip_map(ta, |d, x| if x > floor { d } else { 0.0 }));
                }
            }
        }

        let mut grads = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf(id) = node.op {
                let g = adj
                    .get_mut(i)
                    .and_then(Option::take)
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                grads
                    .entry(id)
                    .and_modify(|acc: &mut Tensor| acc.add_assign(&g))
                    .or_insert(g);
            }
        }
        Ok(Gradients { grads })
    }
}

/// Gradients of a scalar with respect to every leaf on a tape.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    grads: BTreeMap<LeafId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: LeafId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn remove(&mut self, id: LeafId) -> Option<Tensor> {
        self.grads.remove(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&LeafId, &Tensor)> {
        self.grads.iter()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

fn accumulate(adj: &mut [Option<Tensor>], i: usize, g: Tensor) {
    match &mut adj[i] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> GradError {
    GradError::Shape { op, detail: format!("{:?} vs {:?}", a.shape(), b.shape()) }
}

pub(crate) fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; m * n];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let x = ad[i * k + p];
            if x == 0.0 {
                continue;
            }
            for (o, y) in orow.iter_mut().zip(&bd[p * n..(p + 1) * n]) {
                *o += x * y;
            }
        }
    }
    Tensor::matrix(m, n, out)
}

/// `a · bᵀ`
fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.rows(), a.cols(), b.rows());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let ar = a.row(i);
        for j in 0..n {
            out[i * n + j] = ar.iter().zip(b.row(j)).map(|(x, y)| x * y).sum();
        }
    }
    debug_assert_eq!(k, b.cols());
    Tensor::matrix(m, n, out)
}

/// `aᵀ · b`
fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.cols(), a.rows(), b.cols());
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let ar = a.row(p);
        let br = b.row(p);
        for (i, &x) in ar.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            for (o, y) in out[i * n..(i + 1) * n].iter_mut().zip(br) {
                *o += x * y;
            }
        }
    }
    Tensor::matrix(m, n, out)
}

pub(crate) fn row_softmax(t: &Tensor) -> Tensor {
    let n = t.cols();
    let mut out = t.clone();
    for row in out.data_mut().chunks_mut(n) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            total += *x;
        }
        for x in row.iter_mut() {
            *x /= total;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::from_rows(&[[0.0, 0.0]]));
        let p = tape.row_softmax(z).unwrap();
        assert_eq!(tape.value(p).unwrap().data(), &[0.5, 0.5]);
    }

    #[test]
    fn relu_clips_negatives() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[[1.0, -0.01], [0.0, 1.0]]));
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).unwrap().data(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn matmul_counts() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::full(&[2, 3], 1.0));
        let b = tape.constant(Tensor::full(&[3, 2], 1.0));
        let c = tape.matmul(a, b).unwrap();
        let v = tape.value(c).unwrap();
        assert_eq!(v.shape(), &[2, 2]);
        assert_eq!(v.data(), &[3.0; 4]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(GradError::Shape { op: "matmul", .. })));
    }

    #[test]
    fn log_rejects_nonpositive_with_index() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::vector(vec![1.0, 0.5, 0.0]));
        match tape.log(a) {
            Err(GradError::Domain { op: "log", index: 2, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn div_by_zero_is_domain_error() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::vector(vec![1.0, 1.0]));
        let b = tape.constant(Tensor::vector(vec![1.0, 0.0]));
        assert!(matches!(tape.div(a, b), Err(GradError::Domain { index: 1, .. })));
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut tape = Tape::new();
        let p = tape.leaf(LeafId(0), Tensor::vector(vec![0.3, -1.0, 2.0]));
        let s = tape.sum(p).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(LeafId(0)).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn grad_of_mean_square() {
        let mut tape = Tape::new();
        let p = tape.leaf(LeafId(0), Tensor::vector(vec![2.0, -2.0]));
        let sq = tape.mul(p, p).unwrap();
        let m = tape.mean(sq).unwrap();
        let g = tape.backward(m).unwrap();
        assert_eq!(g.get(LeafId(0)).unwrap().data(), &[2.0, -2.0]);
    }

    #[test]
    fn grad_of_softmax_cross_entropy() {
        let mut tape = Tape::new();
        let z = tape.leaf(LeafId(0), Tensor::from_rows(&[[0.0, 0.0, 0.0, 0.0]]));
        let p = tape.row_softmax(z).unwrap();
        let l = tape.log(p).unwrap();
        let picked = tape.gather_per_row(l, &[0]).unwrap();
        let s = tape.sum(picked).unwrap();
        let loss = tape.scalar_mul(s, -1.0).unwrap();
        let g = tape.backward(loss).unwrap();
        close(g.get(LeafId(0)).unwrap().data(), &[-0.75, 0.25, 0.25, 0.25], 1e-15);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let p = tape.leaf(LeafId(0), Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(p), Err(GradError::NotScalar(_))));
    }

    #[test]
    fn backward_rejects_var_from_other_tape() {
        let mut a = Tape::new();
        let mut b = Tape::new();
        let x = a.leaf(LeafId(0), Tensor::scalar(1.0));
        let _ = b.leaf(LeafId(0), Tensor::scalar(1.0));
        assert!(matches!(b.backward(x), Err(GradError::ForeignVar)));
        let mut c = Tape::new();
        let y = c.leaf(LeafId(0), Tensor::scalar(1.0));
        c.reset();
        assert!(matches!(c.backward(y), Err(GradError::ForeignVar)));
    }

    #[test]
    fn repeated_backward_is_idempotent() {
        let mut tape = Tape::new();
        let p = tape.leaf(LeafId(0), Tensor::vector(vec![0.5, 1.5]));
        let e = tape.exp(p).unwrap();
        let s = tape.sum(e).unwrap();
        let g1 = tape.backward(s).unwrap();
        let g2 = tape.backward(s).unwrap();
        assert_eq!(g1, g2);
    }

    #[test]
    fn broadcast_add_sums_bias_gradient_over_rows() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[3, 2]));
        let b = tape.leaf(LeafId(1), Tensor::vector(vec![1.0, 2.0]));
        let y = tape.add(x, b).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(LeafId(1)).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn unreached_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(LeafId(0), Tensor::vector(vec![1.0]));
        let _b = tape.leaf(LeafId(1), Tensor::vector(vec![1.0, 2.0]));
        let s = tape.sum(a).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(LeafId(1)).unwrap().data(), &[0.0, 0.0]);
    }
}
