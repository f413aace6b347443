//! Reverse-mode automatic differentiation on a tensor-valued tape.
//!
//! A [`Tape`] records coarse tensor operations (matrix products, broadcasts,
//! reductions, elementwise maps) as they execute; [`Tape::backward`] then
//! sweeps the recording once in reverse, accumulating adjoints. Values are
//! dense row-major `f64` matrices — scalars are `1x1`, vectors `n x 1` or
//! `1 x n`. The convention throughout the crate is features-by-batch:
//! network activations are `[features, batch]` and parameters multiply from
//! the left.
//!
//! Heavy kernels (matrix products, elementwise maps over large buffers) are
//! parallelized with fixed-size chunking so results are bitwise identical
//! regardless of thread count.

mod store;

pub use store::{AdamConfig, ParameterStore};

use std::cell::RefCell;
use std::rc::Rc;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: lhs {lhs:?}, rhs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("backward requires a scalar output, got {0:?}")]
    NonScalarOutput((usize, usize)),
    #[error("unknown parameter name: {0}")]
    NameMismatch(String),
}

/// Column-chunk width used when splitting large tensors across threads.
/// Fixed (rather than derived from the thread count) so that results do not
/// depend on the machine's parallelism.
const COL_CHUNK: usize = 2048;

#[derive(Clone, Debug)]
enum UnaryKind {
    Neg,
    Sin,
    Cos,
    Exp,
    Ln,
    Sqrt,
    Abs,
    Relu,
    Softplus,
    Sigmoid,
    ClampMin(f64),
    ScaleConst(f64),
    AddConst(f64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone)]
enum Op {
    /// Constant leaf: no gradient.
    Leaf,
    /// Named-parameter leaf: gradient is collected by name.
    Param,
    Unary(UnaryKind, usize),
    Binary(BinaryKind, usize, usize),
    MatMul(usize, usize),
    SumAll(usize),
    /// `[r, c] -> [r, 1]`, summing across columns.
    SumCols(usize),
    /// `[r, c] -> [1, c]`, summing across rows.
    SumRows(usize),
    ConcatRows(Vec<usize>),
    /// `(source, first_row)`; the row count is this node's own row count.
    SliceRows(usize, usize),
    GatherCols(usize, Rc<Vec<usize>>),
    /// Exclusive cumulative product down each column:
    /// `out[k, j] = prod_{i < k} a[i, j]` (so row 0 is all ones).
    CumprodExclusiveRows(usize),
    /// `(source, groups)`: folds `[r, groups * n]` to `[r, n]` by summing
    /// columns `k * n + j` over `k`.
    FoldSumCols(usize, usize),
    Reshape(usize),
    Transpose(usize),
    StopGradient,
}

struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
struct TapeInner {
    nodes: Vec<Node>,
    params: Vec<(String, usize)>,
}

/// A recording of one differentiable computation.
#[derive(Clone, Default)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

/// A handle to one tensor on the tape.
#[derive(Clone)]
pub struct Value {
    tape: Tape,
    id: usize,
}

impl std::fmt::Debug for Value {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let (r, c) = self.shape();
        write!(f, "Value(#{}, {r}x{c})", self.id)
    }
}

/// Adjoints produced by one backward sweep.
#[derive(Debug)]
pub struct Gradients {
    adjoints: Vec<Option<Vec<f64>>>,
    params: Vec<(String, usize)>,
}

impl Gradients {
    /// The adjoint of an intermediate value, if it was reached by the sweep.
    pub fn of(&self, v: &Value) -> Option<&[f64]> {
        self.adjoints[v.id].as_deref()
    }

    /// Gradients of all named parameters touched by the recording. Parameters
    /// that did not influence the output get zero-filled gradients; a
    /// parameter bound more than once on the same tape has its adjoints
    /// summed across bindings.
    pub fn by_name(&self, tape: &Tape) -> std::collections::BTreeMap<String, Vec<f64>> {
        let inner = tape.inner.borrow();
        let mut out: std::collections::BTreeMap<String, Vec<f64>> =
            std::collections::BTreeMap::new();
        for (name, id) in &self.params {
            let node = &inner.nodes[*id];
            let zero_len = node.rows * node.cols;
            let entry = out
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; zero_len]);
            if let Some(g) = &self.adjoints[*id] {
                for (e, v) in entry.iter_mut().zip(g) {
                    *e += v;
                }
            }
        }
        out
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, rows: usize, cols: usize, value: Vec<f64>, op: Op, needs_grad: bool) -> Value {
        debug_assert_eq!(value.len(), rows * cols);
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node {
            rows,
            cols,
            value,
            op,
            needs_grad,
        });
        Value {
            tape: self.clone(),
            id: inner.nodes.len() - 1,
        }
    }

    /// Records a constant (no gradient flows into it).
    pub fn constant(&self, rows: usize, cols: usize, data: Vec<f64>) -> Value {
        assert_eq!(data.len(), rows * cols, "constant data length mismatch");
        self.push(rows, cols, data, Op::Leaf, false)
    }

    pub fn scalar(&self, x: f64) -> Value {
        self.push(1, 1, vec![x], Op::Leaf, false)
    }

    /// Records a named parameter leaf whose gradient is collected by name.
    /// Normally called through [`ParameterStore::bind`].
    pub fn named_param(&self, name: &str, rows: usize, cols: usize, data: Vec<f64>) -> Value {
        assert_eq!(data.len(), rows * cols, "parameter data length mismatch");
        let v = self.push(rows, cols, data, Op::Param, true);
        self.inner
            .borrow_mut()
            .params
            .push((name.to_string(), v.id));
        v
    }

    /// Reverse sweep from a scalar output. Errors if `output` is not `1x1`.
    pub fn backward(&self, output: &Value) -> Result<Gradients, AutodiffError> {
        let inner = self.inner.borrow();
        let nodes = &inner.nodes;
        let out_node = &nodes[output.id];
        if (out_node.rows, out_node.cols) != (1, 1) {
            return Err(AutodiffError::NonScalarOutput((
                out_node.rows,
                out_node.cols,
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        adj[output.id] = Some(vec![1.0]);

        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            // Leaf adjoints stay in place for the caller to read; interior
            // adjoints are taken out (and freed) as soon as they are consumed.
            if matches!(node.op, Op::Leaf | Op::Param) {
                continue;
            }
            let Some(g) = adj[id].take() else { continue };
            match &node.op {
                Op::Leaf | Op::Param => unreachable!(),
                Op::Unary(kind, a) => {
                    if nodes[*a].needs_grad {
                        let da = unary_backward(kind, &nodes[*a].value, &node.value, &g);
                        accumulate(&mut adj, *a, nodes, da);
                    }
                }
                Op::Binary(kind, a, b) => {
                    let (ra, ca) = (nodes[*a].rows, nodes[*a].cols);
                    let (rb, cb) = (nodes[*b].rows, nodes[*b].cols);
                    let go = (node.rows, node.cols);
                    if nodes[*a].needs_grad {
                        let da = binary_backward_lhs(
                            *kind,
                            &nodes[*a].value,
                            (ra, ca),
                            &nodes[*b].value,
                            (rb, cb),
                            &g,
                            go,
                        );
                        accumulate(&mut adj, *a, nodes, da);
                    }
                    if nodes[*b].needs_grad {
                        let db = binary_backward_rhs(
                            *kind,
                            &nodes[*a].value,
                            (ra, ca),
                            &nodes[*b].value,
                            (rb, cb),
                            &g,
                            go,
                        );
                        accumulate(&mut adj, *b, nodes, db);
                    }
                }
                Op::MatMul(a, b) => {
                    let na = &nodes[*a];
                    let nb = &nodes[*b];
                    if na.needs_grad {
                        // dA = g . B^T : [m, k] = [m, n] . [n, k]
                        let da = matmul_grad_lhs(&g, na.rows, na.cols, &nb.value, nb.cols);
                        accumulate(&mut adj, *a, nodes, da);
                    }
                    if nb.needs_grad {
                        // dB = A^T . g : [k, n] = [k, m] . [m, n]
                        let db = matmul_grad_rhs(&na.value, na.rows, na.cols, &g, nb.cols);
                        accumulate(&mut adj, *b, nodes, db);
                    }
                }
                Op::SumAll(a) => {
                    if nodes[*a].needs_grad {
                        let na = &nodes[*a];
                        accumulate(&mut adj, *a, nodes, vec![g[0]; na.rows * na.cols]);
                    }
                }
                Op::SumCols(a) => {
                    if nodes[*a].needs_grad {
                        let na = &nodes[*a];
                        let mut da = vec![0.0; na.rows * na.cols];
                        for i in 0..na.rows {
                            for j in 0..na.cols {
                                da[i * na.cols + j] = g[i];
                            }
                        }
                        accumulate(&mut adj, *a, nodes, da);
                    }
                }
                Op::SumRows(a) => {
                    if nodes[*a].needs_grad {
                        let na = &nodes[*a];
                        let mut da = vec![0.0; na.rows * na.cols];
                        for i in 0..na.rows {
                            da[i * na.cols..(i + 1) * na.cols].copy_from_slice(&g);
                        }
                        accumulate(&mut adj, *a, nodes, da);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut row0 = 0;
                    for p in parts {
                        let np = &nodes[*p];
                        if np.needs_grad {
                            let da =
                                g[row0 * node.cols..(row0 + np.rows) * node.cols].to_vec();
                            accumulate(&mut adj, *p, nodes, da);
                        }
                        row0 += np.rows;
                    }
                }
                Op::SliceRows(a, start) => {
                    if nodes[*a].needs_grad {
                        let na = &nodes[*a];
                        let mut da = vec![0.0; na.rows * na.cols];
                        da[start * na.cols..(start + node.rows) * na.cols].copy_from_slice(&g);
                        accumulate(&mut adj, *a, nodes, da);
                    }
                }
                Op::GatherCols(a, idx) => {
                    if nodes[*a].needs_grad {
                        let na = &nodes[*a];
                        let mut da = vec![0.0; na.rows * na.cols];
                        for r in 0..node.rows {
                            for (jo, js) in idx.iter().enumerate() {
                                da[r * na.cols + js] += g[r * node.cols + jo];
                            }
                        }
                        accumulate(&mut adj, *a, nodes, da);
                    }
                }
                Op::CumprodExclusiveRows(a) => {
                    if nodes[*a].needs_grad {
                        let na = &nodes[*a];
                        let da = cumprod_exclusive_backward(
                            &na.value,
                            &node.value,
                            &g,
                            na.rows,
                            na.cols,
                        );
                        accumulate(&mut adj, *a, nodes, da);
                    }
                }
                Op::FoldSumCols(a, groups) => {
                    if nodes[*a].needs_grad {
                        let na = &nodes[*a];
                        let n = node.cols;
                        let mut da = vec![0.0; na.rows * na.cols];
                        for r in 0..na.rows {
                            for k in 0..*groups {
                                for j in 0..n {
                                    da[r * na.cols + k * n + j] = g[r * n + j];
                                }
                            }
                        }
                        accumulate(&mut adj, *a, nodes, da);
                    }
                }
                Op::Reshape(a) => {
                    if nodes[*a].needs_grad {
                        accumulate(&mut adj, *a, nodes, g.clone());
                    }
                }
                Op::Transpose(a) => {
                    if nodes[*a].needs_grad {
                        // node is [c, r] for an input [r, c]; the adjoint
                        // transposes back.
                        let (tr, tc) = (node.rows, node.cols);
                        let mut da = vec![0.0; tr * tc];
                        for i in 0..tr {
                            for j in 0..tc {
                                da[j * tr + i] = g[i * tc + j];
                            }
                        }
                        accumulate(&mut adj, *a, nodes, da);
                    }
                }
                Op::StopGradient => {}
            }
        }

        // Restore parameter adjoints taken out of `adj` during the sweep
        // (leaves are never propagated from, so their slots were only filled,
        // never taken). Intermediate slots were consumed; that is fine — the
        // caller only reads leaves and explicitly kept values.
        Ok(Gradients {
            adjoints: adj,
            params: inner.params.clone(),
        })
    }
}

/// Adds `delta` into the adjoint slot of node `id`.
fn accumulate(adj: &mut [Option<Vec<f64>>], id: usize, nodes: &[Node], delta: Vec<f64>) {
    debug_assert_eq!(delta.len(), nodes[id].rows * nodes[id].cols);
    match &mut adj[id] {
        Some(buf) => {
            for (o, d) in buf.iter_mut().zip(delta.iter()) {
                *o += d;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

// ---------------------------------------------------------------------------
// Kernels
// ---------------------------------------------------------------------------

fn parallel_map(input: &[f64], f: impl Fn(f64) -> f64 + Sync) -> Vec<f64> {
    use rayon::prelude::*;
    let mut out = vec![0.0; input.len()];
    if input.len() < COL_CHUNK {
        for (o, &x) in out.iter_mut().zip(input) {
            *o = f(x);
        }
    } else {
        out.par_chunks_mut(COL_CHUNK)
            .zip(input.par_chunks(COL_CHUNK))
            .for_each(|(oc, ic)| {
                for (o, &x) in oc.iter_mut().zip(ic) {
                    *o = f(x);
                }
            });
    }
    out
}

fn parallel_zip(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64 + Sync) -> Vec<f64> {
    use rayon::prelude::*;
    debug_assert_eq!(a.len(), b.len());
    let mut out = vec![0.0; a.len()];
    if a.len() < COL_CHUNK {
        for i in 0..a.len() {
            out[i] = f(a[i], b[i]);
        }
    } else {
        out.par_chunks_mut(COL_CHUNK)
            .enumerate()
            .for_each(|(ci, oc)| {
                let base = ci * COL_CHUNK;
                for (k, o) in oc.iter_mut().enumerate() {
                    *o = f(a[base + k], b[base + k]);
                }
            });
    }
    out
}

fn unary_forward(kind: &UnaryKind, a: &[f64]) -> Vec<f64> {
    match kind {
        UnaryKind::Neg => parallel_map(a, |x| -x),
        UnaryKind::Sin => parallel_map(a, f64::sin),
        UnaryKind::Cos => parallel_map(a, f64::cos),
        UnaryKind::Exp => parallel_map(a, f64::exp),
        UnaryKind::Ln => parallel_map(a, f64::ln),
        UnaryKind::Sqrt => parallel_map(a, f64::sqrt),
        UnaryKind::Abs => parallel_map(a, f64::abs),
        UnaryKind::Relu => parallel_map(a, |x| x.max(0.0)),
        // Overflow-safe: softplus(x) = max(x, 0) + ln(1 + exp(-|x|)).
        UnaryKind::Softplus => parallel_map(a, |x| x.max(0.0) + (-x.abs()).exp().ln_1p()),
        UnaryKind::Sigmoid => parallel_map(a, sigmoid),
        UnaryKind::ClampMin(c) => {
            let c = *c;
            parallel_map(a, move |x| x.max(c))
        }
        UnaryKind::ScaleConst(s) => {
            let s = *s;
            parallel_map(a, move |x| x * s)
        }
        UnaryKind::AddConst(c) => {
            let c = *c;
            parallel_map(a, move |x| x + c)
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn unary_backward(kind: &UnaryKind, a: &[f64], out: &[f64], g: &[f64]) -> Vec<f64> {
    match kind {
        UnaryKind::Neg => parallel_map(g, |x| -x),
        UnaryKind::Sin => parallel_zip(g, a, |g, a| g * a.cos()),
        UnaryKind::Cos => parallel_zip(g, a, |g, a| -g * a.sin()),
        UnaryKind::Exp => parallel_zip(g, out, |g, o| g * o),
        UnaryKind::Ln => parallel_zip(g, a, |g, a| g / a),
        UnaryKind::Sqrt => parallel_zip(g, out, |g, o| g * 0.5 / o),
        UnaryKind::Abs => parallel_zip(g, a, |g, a| {
            if a > 0.0 {
                g
            } else if a < 0.0 {
                -g
            } else {
                0.0
            }
        }),
        UnaryKind::Relu => parallel_zip(g, a, |g, a| if a > 0.0 { g } else { 0.0 }),
        UnaryKind::Softplus => parallel_zip(g, a, |g, a| g * sigmoid(a)),
        UnaryKind::Sigmoid => parallel_zip(g, out, |g, o| g * o * (1.0 - o)),
        UnaryKind::ClampMin(c) => {
            let c = *c;
            parallel_zip(g, a, move |g, a| if a > c { g } else { 0.0 })
        }
        UnaryKind::ScaleConst(s) => {
            let s = *s;
            parallel_map(g, move |g| g * s)
        }
        UnaryKind::AddConst(_) => g.to_vec(),
    }
}

/// Output shape of a (possibly broadcast) elementwise binary op.
fn broadcast_shape(
    op: &'static str,
    a: (usize, usize),
    b: (usize, usize),
) -> Result<(usize, usize), AutodiffError> {
    let dim = |x: usize, y: usize| -> Option<usize> {
        if x == y {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else if y == 1 {
            Some(x)
        } else {
            None
        }
    };
    match (dim(a.0, b.0), dim(a.1, b.1)) {
        (Some(r), Some(c)) => Ok((r, c)),
        _ => Err(AutodiffError::ShapeMismatch { op, lhs: a, rhs: b }),
    }
}

#[inline]
fn bidx(i: usize, j: usize, shape: (usize, usize)) -> usize {
    let r = if shape.0 == 1 { 0 } else { i };
    let c = if shape.1 == 1 { 0 } else { j };
    r * shape.1 + c
}

fn binary_forward(
    kind: BinaryKind,
    a: &[f64],
    sa: (usize, usize),
    b: &[f64],
    sb: (usize, usize),
    so: (usize, usize),
) -> Vec<f64> {
    let f = move |x: f64, y: f64| -> f64 {
        match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
        }
    };
    if sa == sb {
        return parallel_zip(a, b, f);
    }
    let (rows, cols) = so;
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[i * cols + j] = f(a[bidx(i, j, sa)], b[bidx(i, j, sb)]);
        }
    }
    out
}

/// Sums `g` (shaped `so`) down to `target` shape by summing over broadcast
/// dimensions; used by the backward pass of broadcast binary ops.
fn reduce_to_shape(g: &[f64], so: (usize, usize), target: (usize, usize)) -> Vec<f64> {
    if so == target {
        return g.to_vec();
    }
    let mut out = vec![0.0; target.0 * target.1];
    for i in 0..so.0 {
        for j in 0..so.1 {
            out[bidx(i, j, target)] += g[i * so.1 + j];
        }
    }
    out
}

fn binary_backward_lhs(
    kind: BinaryKind,
    a: &[f64],
    sa: (usize, usize),
    b: &[f64],
    sb: (usize, usize),
    g: &[f64],
    so: (usize, usize),
) -> Vec<f64> {
    let full: Vec<f64> = match kind {
        BinaryKind::Add | BinaryKind::Sub => g.to_vec(),
        BinaryKind::Mul => {
            if sa == sb {
                parallel_zip(g, b, |g, b| g * b)
            } else {
                let mut out = vec![0.0; so.0 * so.1];
                for i in 0..so.0 {
                    for j in 0..so.1 {
                        out[i * so.1 + j] = g[i * so.1 + j] * b[bidx(i, j, sb)];
                    }
                }
                out
            }
        }
        BinaryKind::Div => {
            if sa == sb {
                parallel_zip(g, b, |g, b| g / b)
            } else {
                let mut out = vec![0.0; so.0 * so.1];
                for i in 0..so.0 {
                    for j in 0..so.1 {
                        out[i * so.1 + j] = g[i * so.1 + j] / b[bidx(i, j, sb)];
                    }
                }
                out
            }
        }
    };
    let _ = a;
    reduce_to_shape(&full, so, sa)
}

fn binary_backward_rhs(
    kind: BinaryKind,
    a: &[f64],
    sa: (usize, usize),
    b: &[f64],
    sb: (usize, usize),
    g: &[f64],
    so: (usize, usize),
) -> Vec<f64> {
    let full: Vec<f64> = match kind {
        BinaryKind::Add => g.to_vec(),
        BinaryKind::Sub => parallel_map(g, |g| -g),
        BinaryKind::Mul => {
            if sa == sb {
                parallel_zip(g, a, |g, a| g * a)
            } else {
                let mut out = vec![0.0; so.0 * so.1];
                for i in 0..so.0 {
                    for j in 0..so.1 {
                        out[i * so.1 + j] = g[i * so.1 + j] * a[bidx(i, j, sa)];
                    }
                }
                out
            }
        }
        BinaryKind::Div => {
            let mut out = vec![0.0; so.0 * so.1];
            for i in 0..so.0 {
                for j in 0..so.1 {
                    let bv = b[bidx(i, j, sb)];
                    out[i * so.1 + j] = -g[i * so.1 + j] * a[bidx(i, j, sa)] / (bv * bv);
                }
            }
            out
        }
    };
    reduce_to_shape(&full, so, sb)
}

/// `C = A . B` with row-major dense matrices, parallelized over fixed-width
/// column blocks of `B`/`C`.
fn matmul_forward(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    matmul_into(a, m, k, (k as isize, 1), b, n, (n as isize, 1), &mut c);
    c
}

/// `dA = g . B^T` with `g` of shape `[m, n]` and `B` of shape `[k, n]`.
///
/// The contraction runs over the (large) batch dimension `n`, so a single
/// strided product would serialize a third of every layer's backward work.
/// Instead the contraction is split into fixed-width column chunks computed
/// in parallel and the partial products are summed in chunk order, which
/// keeps the result independent of the thread count.
fn matmul_grad_lhs(g: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    use rayon::prelude::*;
    let n_chunks = n.div_ceil(COL_CHUNK).max(1);
    if n_chunks <= 1 {
        let mut c = vec![0.0; m * k];
        matmul_into(g, m, n, (n as isize, 1), b, k, (1, n as isize), &mut c);
        return c;
    }
    let partials: Vec<Vec<f64>> = (0..n_chunks)
        .into_par_iter()
        .map(|chunk| {
            let j0 = chunk * COL_CHUNK;
            let w = COL_CHUNK.min(n - j0);
            let mut c = vec![0.0; m * k];
            // g columns [j0, j0+w) times B^T rows [j0, j0+w).
            unsafe {
                matrixmultiply::dgemm(
                    m,
                    w,
                    k,
                    1.0,
                    g.as_ptr().add(j0),
                    n as isize,
                    1,
                    b.as_ptr().add(j0),
                    1,
                    n as isize,
                    0.0,
                    c.as_mut_ptr(),
                    k as isize,
                    1,
                );
            }
            c
        })
        .collect();
    let mut out = vec![0.0; m * k];
    for p in partials {
        for (o, v) in out.iter_mut().zip(p) {
            *o += v;
        }
    }
    out
}

/// `dB = A^T . g` with `A` of shape `[m, k]` and `g` of shape `[m, n]`;
/// result `[k, n]`. The output's `n` columns are chunked in parallel.
fn matmul_grad_rhs(a: &[f64], m: usize, k: usize, g: &[f64], n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    matmul_into(a, k, m, (1, k as isize), g, n, (n as isize, 1), &mut c);
    c
}

/// Strided `C += A . B` kernel on raw buffers; `C` must be zeroed or hold the
/// accumulation target. Splits the `n` dimension into [`COL_CHUNK`]-wide
/// blocks processed in parallel — each block writes a disjoint part of `C`,
/// so the result is deterministic.
fn matmul_into(
    a: &[f64],
    m: usize,
    k: usize,
    stride_a: (isize, isize),
    b: &[f64],
    n: usize,
    stride_b: (isize, isize),
    c: &mut [f64],
) {
    use rayon::prelude::*;
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 || k == 0 {
        return;
    }

    struct SendPtr(*mut f64);
    unsafe impl Send for SendPtr {}
    unsafe impl Sync for SendPtr {}
    impl SendPtr {
        fn get(&self) -> *mut f64 {
            self.0
        }
    }

    let c_ptr = SendPtr(c.as_mut_ptr());
    let n_chunks = n.div_ceil(COL_CHUNK);

    let run_chunk = |chunk: usize| {
        let j0 = chunk * COL_CHUNK;
        let w = COL_CHUNK.min(n - j0);
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                w,
                1.0,
                a.as_ptr(),
                stride_a.0,
                stride_a.1,
                b.as_ptr().offset(stride_b.1 * j0 as isize),
                stride_b.0,
                stride_b.1,
                1.0,
                c_ptr.get().add(j0),
                n as isize,
                1,
            );
        }
    };

    if n_chunks <= 1 {
        run_chunk(0);
    } else {
        (0..n_chunks).into_par_iter().for_each(run_chunk);
    }
}

fn cumprod_exclusive_forward(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for j in 0..cols {
        let mut acc = 1.0;
        for i in 0..rows {
            out[i * cols + j] = acc;
            acc *= a[i * cols + j];
        }
    }
    out
}

/// Backward of the exclusive cumulative product, written division-free so it
/// stays finite when factors reach zero: for each column,
/// `da[i] = sum_{k > i} g[k] * prod_{m < k, m != i} a[m]`.
fn cumprod_exclusive_backward(
    a: &[f64],
    out: &[f64],
    g: &[f64],
    rows: usize,
    cols: usize,
) -> Vec<f64> {
    let mut da = vec![0.0; rows * cols];
    for j in 0..cols {
        for i in 0..rows {
            // prod_{m < k, m != i} a[m] for k = i+1 is exactly out[i] (the
            // exclusive product up to i); each further k multiplies a[k-1],
            // skipping nothing since m = i was already excluded.
            let mut acc = out[i * cols + j];
            let mut sum = 0.0;
            for k in (i + 1)..rows {
                sum += g[k * cols + j] * acc;
                acc *= a[k * cols + j];
            }
            da[i * cols + j] = sum;
        }
    }
    da
}

// ---------------------------------------------------------------------------
// Value API
// ---------------------------------------------------------------------------

impl Value {
    pub fn rows(&self) -> usize {
        self.tape.inner.borrow().nodes[self.id].rows
    }

    pub fn cols(&self) -> usize {
        self.tape.inner.borrow().nodes[self.id].cols
    }

    /// The tape this value is recorded on (cheap handle clone).
    pub fn tape(&self) -> Tape {
        self.tape.clone()
    }

    pub fn shape(&self) -> (usize, usize) {
        let inner = self.tape.inner.borrow();
        let n = &inner.nodes[self.id];
        (n.rows, n.cols)
    }

    /// A copy of the stored forward value.
    pub fn value(&self) -> Vec<f64> {
        self.tape.inner.borrow().nodes[self.id].value.clone()
    }

    /// The forward value of a `1x1` node.
    pub fn scalar_value(&self) -> f64 {
        let inner = self.tape.inner.borrow();
        let n = &inner.nodes[self.id];
        assert_eq!((n.rows, n.cols), (1, 1), "scalar_value on non-scalar");
        n.value[0]
    }

    fn unary(&self, kind: UnaryKind) -> Value {
        let (rows, cols, value, needs) = {
            let inner = self.tape.inner.borrow();
            let n = &inner.nodes[self.id];
            (n.rows, n.cols, unary_forward(&kind, &n.value), n.needs_grad)
        };
        self.tape
            .push(rows, cols, value, Op::Unary(kind, self.id), needs)
    }

    pub fn neg(&self) -> Value {
        self.unary(UnaryKind::Neg)
    }
    pub fn sin(&self) -> Value {
        self.unary(UnaryKind::Sin)
    }
    pub fn cos(&self) -> Value {
        self.unary(UnaryKind::Cos)
    }
    pub fn exp(&self) -> Value {
        self.unary(UnaryKind::Exp)
    }
    pub fn ln(&self) -> Value {
        self.unary(UnaryKind::Ln)
    }
    pub fn sqrt(&self) -> Value {
        self.unary(UnaryKind::Sqrt)
    }
    pub fn abs(&self) -> Value {
        self.unary(UnaryKind::Abs)
    }
    pub fn relu(&self) -> Value {
        self.unary(UnaryKind::Relu)
    }
    pub fn softplus(&self) -> Value {
        self.unary(UnaryKind::Softplus)
    }
    pub fn sigmoid(&self) -> Value {
        self.unary(UnaryKind::Sigmoid)
    }
    pub fn clamp_min(&self, c: f64) -> Value {
        self.unary(UnaryKind::ClampMin(c))
    }
    pub fn scale(&self, s: f64) -> Value {
        self.unary(UnaryKind::ScaleConst(s))
    }
    pub fn add_const(&self, c: f64) -> Value {
        self.unary(UnaryKind::AddConst(c))
    }
    pub fn square(&self) -> Value {
        self.mul(self)
    }

    fn binary(&self, kind: BinaryKind, other: &Value, op_name: &'static str) -> Value {
        assert!(
            Rc::ptr_eq(&self.tape.inner, &other.tape.inner),
            "values from different tapes"
        );
        let (so, value, needs) = {
            let inner = self.tape.inner.borrow();
            let na = &inner.nodes[self.id];
            let nb = &inner.nodes[other.id];
            let sa = (na.rows, na.cols);
            let sb = (nb.rows, nb.cols);
            let so = broadcast_shape(op_name, sa, sb).unwrap_or_else(|e| panic!("{e}"));
            (
                so,
                binary_forward(kind, &na.value, sa, &nb.value, sb, so),
                na.needs_grad || nb.needs_grad,
            )
        };
        self.tape.push(
            so.0,
            so.1,
            value,
            Op::Binary(kind, self.id, other.id),
            needs,
        )
    }

    pub fn add(&self, other: &Value) -> Value {
        self.binary(BinaryKind::Add, other, "add")
    }
    pub fn sub(&self, other: &Value) -> Value {
        self.binary(BinaryKind::Sub, other, "sub")
    }
    pub fn mul(&self, other: &Value) -> Value {
        self.binary(BinaryKind::Mul, other, "mul")
    }
    pub fn div(&self, other: &Value) -> Value {
        self.binary(BinaryKind::Div, other, "div")
    }

    /// Matrix product `self . other`; `[m, k] . [k, n] -> [m, n]`.
    pub fn matmul(&self, other: &Value) -> Value {
        self.try_matmul(other).unwrap_or_else(|e| panic!("{e}"))
    }

    pub fn try_matmul(&self, other: &Value) -> Result<Value, AutodiffError> {
        assert!(
            Rc::ptr_eq(&self.tape.inner, &other.tape.inner),
            "values from different tapes"
        );
        let (m, n, value, needs) = {
            let inner = self.tape.inner.borrow();
            let na = &inner.nodes[self.id];
            let nb = &inner.nodes[other.id];
            if na.cols != nb.rows {
                return Err(AutodiffError::ShapeMismatch {
                    op: "matmul",
                    lhs: (na.rows, na.cols),
                    rhs: (nb.rows, nb.cols),
                });
            }
            (
                na.rows,
                nb.cols,
                matmul_forward(&na.value, na.rows, na.cols, &nb.value, nb.cols),
                na.needs_grad || nb.needs_grad,
            )
        };
        Ok(self
            .tape
            .push(m, n, value, Op::MatMul(self.id, other.id), needs))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum_all(&self) -> Value {
        let (value, needs) = {
            let inner = self.tape.inner.borrow();
            let n = &inner.nodes[self.id];
            // Fixed-chunk partial sums keep the reduction order (and thus the
            // result) independent of parallelism.
            let partials: Vec<f64> = n
                .value
                .chunks(COL_CHUNK)
                .map(|c| c.iter().sum::<f64>())
                .collect();
            (vec![partials.iter().sum::<f64>()], n.needs_grad)
        };
        self.tape.push(1, 1, value, Op::SumAll(self.id), needs)
    }

    /// Mean of all entries, as a scalar.
    pub fn mean_all(&self) -> Value {
        let count = {
            let inner = self.tape.inner.borrow();
            let n = &inner.nodes[self.id];
            (n.rows * n.cols) as f64
        };
        self.sum_all().scale(1.0 / count)
    }

    /// `[r, c] -> [r, 1]`, summing across columns.
    pub fn sum_cols(&self) -> Value {
        let (rows, value, needs) = {
            let inner = self.tape.inner.borrow();
            let n = &inner.nodes[self.id];
            let mut out = vec![0.0; n.rows];
            for i in 0..n.rows {
                out[i] = n.value[i * n.cols..(i + 1) * n.cols].iter().sum();
            }
            (n.rows, out, n.needs_grad)
        };
        self.tape.push(rows, 1, value, Op::SumCols(self.id), needs)
    }

    /// `[r, c] -> [1, c]`, summing across rows.
    pub fn sum_rows(&self) -> Value {
        let (cols, value, needs) = {
            let inner = self.tape.inner.borrow();
            let n = &inner.nodes[self.id];
            let mut out = vec![0.0; n.cols];
            for i in 0..n.rows {
                for j in 0..n.cols {
                    out[j] += n.value[i * n.cols + j];
                }
            }
            (n.cols, out, n.needs_grad)
        };
        self.tape.push(1, cols, value, Op::SumRows(self.id), needs)
    }

    /// Rows `[start, start + len)` as a new value.
    pub fn slice_rows(&self, start: usize, len: usize) -> Value {
        let (cols, value, needs) = {
            let inner = self.tape.inner.borrow();
            let n = &inner.nodes[self.id];
            assert!(start + len <= n.rows, "slice_rows out of range");
            (
                n.cols,
                n.value[start * n.cols..(start + len) * n.cols].to_vec(),
                n.needs_grad,
            )
        };
        self.tape
            .push(len, cols, value, Op::SliceRows(self.id, start), needs)
    }

    /// Columns selected by `idx` (duplicates allowed), in the given order.
    pub fn gather_cols(&self, idx: &[usize]) -> Value {
        let (rows, value, needs) = {
            let inner = self.tape.inner.borrow();
            let n = &inner.nodes[self.id];
            let mut out = vec![0.0; n.rows * idx.len()];
            for r in 0..n.rows {
                for (jo, &js) in idx.iter().enumerate() {
                    assert!(js < n.cols, "gather_cols index out of range");
                    out[r * idx.len() + jo] = n.value[r * n.cols + js];
                }
            }
            (n.rows, out, n.needs_grad)
        };
        self.tape.push(
            rows,
            idx.len(),
            value,
            Op::GatherCols(self.id, Rc::new(idx.to_vec())),
            needs,
        )
    }

    /// Exclusive cumulative product down each column (row 0 is ones).
    pub fn cumprod_exclusive_rows(&self) -> Value {
        let (rows, cols, value, needs) = {
            let inner = self.tape.inner.borrow();
            let n = &inner.nodes[self.id];
            (
                n.rows,
                n.cols,
                cumprod_exclusive_forward(&n.value, n.rows, n.cols),
                n.needs_grad,
            )
        };
        self.tape
            .push(rows, cols, value, Op::CumprodExclusiveRows(self.id), needs)
    }

    /// Folds `[r, groups * n]` to `[r, n]` by summing columns `k * n + j`
    /// over `k` — the reduction over samples-per-ray in rendering, where
    /// columns are laid out sample-major.
    pub fn fold_sum_cols(&self, groups: usize) -> Value {
        let (rows, n, value, needs) = {
            let inner = self.tape.inner.borrow();
            let nd = &inner.nodes[self.id];
            assert!(
                groups > 0 && nd.cols % groups == 0,
                "fold_sum_cols: {} columns not divisible into {} groups",
                nd.cols,
                groups
            );
            let n = nd.cols / groups;
            let mut out = vec![0.0; nd.rows * n];
            for r in 0..nd.rows {
                for k in 0..groups {
                    for j in 0..n {
                        out[r * n + j] += nd.value[r * nd.cols + k * n + j];
                    }
                }
            }
            (nd.rows, n, out, nd.needs_grad)
        };
        self.tape
            .push(rows, n, value, Op::FoldSumCols(self.id, groups), needs)
    }

    /// Reinterprets the buffer with a new shape of equal element count.
    pub fn reshape(&self, rows: usize, cols: usize) -> Value {
        let (value, needs) = {
            let inner = self.tape.inner.borrow();
            let n = &inner.nodes[self.id];
            assert_eq!(n.rows * n.cols, rows * cols, "reshape element count");
            (n.value.clone(), n.needs_grad)
        };
        self.tape.push(rows, cols, value, Op::Reshape(self.id), needs)
    }

    /// Matrix transpose: `[r, c] -> [c, r]`.
    pub fn transpose(&self) -> Value {
        let (rows, cols, value, needs) = {
            let inner = self.tape.inner.borrow();
            let n = &inner.nodes[self.id];
            let mut out = vec![0.0; n.rows * n.cols];
            for i in 0..n.rows {
                for j in 0..n.cols {
                    out[j * n.rows + i] = n.value[i * n.cols + j];
                }
            }
            (n.cols, n.rows, out, n.needs_grad)
        };
        self.tape
            .push(rows, cols, value, Op::Transpose(self.id), needs)
    }

    /// Detaches the value: forward passes through, no gradient flows back.
    pub fn stop_gradient(&self) -> Value {
        let (rows, cols, value) = {
            let inner = self.tape.inner.borrow();
            let n = &inner.nodes[self.id];
            (n.rows, n.cols, n.value.clone())
        };
        self.tape
            .push(rows, cols, value, Op::StopGradient, false)
    }

    /// Concatenates values along rows (all must share the column count).
    pub fn concat_rows(parts: &[&Value]) -> Value {
        assert!(!parts.is_empty(), "concat_rows needs at least one part");
        let tape = parts[0].tape.clone();
        let (rows, cols, value, needs) = {
            let inner = tape.inner.borrow();
            let cols = inner.nodes[parts[0].id].cols;
            let mut rows = 0;
            let mut needs = false;
            for p in parts {
                let n = &inner.nodes[p.id];
                assert_eq!(n.cols, cols, "concat_rows column mismatch");
                rows += n.rows;
                needs |= n.needs_grad;
            }
            let mut value = Vec::with_capacity(rows * cols);
            for p in parts {
                value.extend_from_slice(&inner.nodes[p.id].value);
            }
            (rows, cols, value, needs)
        };
        tape.push(
            rows,
            cols,
            value,
            Op::ConcatRows(parts.iter().map(|p| p.id).collect()),
            needs,
        )
    }

    /// Column-wise Euclidean norm of a `[r, c]` value: `[1, c]`, computed as
    /// `sqrt(sum_r x^2 + eps)` with a tiny `eps` keeping the gradient finite
    /// at exactly zero columns.
    pub fn norm_cols(&self, eps: f64) -> Value {
        self.square().sum_rows().add_const(eps).sqrt()
    }
}
