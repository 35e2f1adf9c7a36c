//! Reverse-mode automatic differentiation over flat `f64` arrays.
//!
//! A [`Tensor`] is a shared handle to data, shape, and an optional gradient
//! buffer. Ops are recorded on an explicit [`Tape`]; `Tape::backward` walks
//! the recorded nodes in reverse and accumulates gradients into every tensor
//! that requires them. Parameters outlive tapes: a fresh tape is built per
//! training step while the same parameter tensors keep collecting gradients
//! until they are explicitly zeroed.
//!
//! All data is `f64` end to end so gradient checks can run at tight
//! tolerances. Kernels are plain loops; batch sizes and layer widths stay
//! small enough that cache-friendly blocking would be noise here.

pub mod adam;
pub mod nn;

use std::cell::{Ref, RefCell};
use std::fmt;
use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

struct TensorData {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    /// Id of the tape node that produced this tensor, if any. Only
    /// meaningful while the originating tape is alive.
    node_id: Option<usize>,
}

/// Shared handle to an n-dimensional `f64` array.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<RefCell<TensorData>>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let d = self.inner.borrow();
        f.debug_struct("Tensor")
            .field("shape", &d.shape)
            .field("requires_grad", &d.requires_grad)
            .field("node_id", &d.node_id)
            .finish()
    }
}

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Result<Tensor> {
        if numel_of(&shape) != data.len() {
            return Err(Error::Invalid {
                op: "Tensor::new",
                msg: format!("shape {:?} needs {} values, got {}", shape, numel_of(&shape), data.len()),
            });
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::invalid("Tensor::new", format!("non-finite value {v}")));
        }
        Ok(Tensor::raw(shape, data, requires_grad, None))
    }

    fn raw(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, node_id: Option<usize>) -> Tensor {
        Tensor {
            inner: Rc::new(RefCell::new(TensorData {
                shape,
                data,
                grad: None,
                requires_grad,
                node_id,
            })),
        }
    }

    pub fn zeros(shape: Vec<usize>, requires_grad: bool) -> Tensor {
        let n = numel_of(&shape);
        Tensor::raw(shape, vec![0.0; n], requires_grad, None)
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::raw(vec![1], vec![v], false, None)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().data.len()
    }

    pub fn data(&self) -> Ref<'_, [f64]> {
        Ref::map(self.inner.borrow(), |d| d.data.as_slice())
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.borrow().data.clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        let d = self.inner.borrow();
        debug_assert_eq!(d.data.len(), 1, "item() on non-scalar");
        d.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    pub fn node_id(&self) -> Option<usize> {
        self.inner.borrow().node_id
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    /// Overwrites the data in place. The optimizer's update path; shape is
    /// fixed at construction.
    pub fn set_data(&self, new: &[f64]) {
        let mut d = self.inner.borrow_mut();
        assert_eq!(d.data.len(), new.len(), "set_data length mismatch");
        d.data.copy_from_slice(new);
    }

    pub fn accumulate_grad(&self, g: &[f64]) {
        let mut d = self.inner.borrow_mut();
        assert_eq!(d.data.len(), g.len(), "gradient length mismatch");
        match &mut d.grad {
            Some(buf) => {
                for (b, v) in buf.iter_mut().zip(g) {
                    *b += v;
                }
            }
            None => d.grad = Some(g.to_vec()),
        }
    }

    /// Copy of the data as a fresh leaf with no gradient tracking.
    pub fn detach(&self) -> Tensor {
        let d = self.inner.borrow();
        Tensor::raw(d.shape.clone(), d.data.clone(), false, None)
    }

    fn set_node(&self, id: usize) {
        self.inner.borrow_mut().node_id = Some(id);
    }

    /// True when both handles refer to the same underlying storage.
    pub fn ptr_eq(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }
}

/// Saved state for batch-norm backward.
#[derive(Debug)]
pub struct BnSaved {
    /// Normalized activations, same layout as the input.
    x_hat: Vec<f64>,
    /// Per-column 1/sqrt(var + eps).
    inv_std: Vec<f64>,
    rows: usize,
    cols: usize,
    /// Eval mode normalizes with running stats; backward then treats
    /// mean/std as constants.
    eval_mode: bool,
}

/// Saved state for the fused conv + ReLU + max-pool backward.
#[derive(Debug)]
pub struct ConvSaved {
    /// (width, maps, weight input index, bias input index) per kernel group.
    groups: Vec<(usize, usize, usize, usize)>,
    /// Winning window position per output map, concatenated across groups.
    argmax: Vec<usize>,
    rows: usize,
    cols: usize,
}

enum Op {
    /// Inputs: [a, b] with a `[m,k]`, b `[k,n]`.
    Matmul { m: usize, k: usize, n: usize },
    /// Inputs: [a, b], same shape.
    Add,
    /// Inputs: [x, row] with x `[m,n]`, row `[n]`; row broadcasts over rows.
    AddRow,
    /// Inputs: [a, b], same shape; a - b.
    Sub,
    /// Inputs: [a, b], same shape; elementwise product.
    Mul,
    /// Inputs: [x]; x * c.
    Scale { c: f64 },
    /// Inputs: [x].
    Relu,
    /// Inputs: [x] `[m,n]`; softmax over each row.
    SoftmaxRows,
    /// Inputs: [x]; ln(max(x, floor)).
    LnFloored { floor: f64 },
    /// Inputs: [x] `[m,n]`; out[i] = x[i, idx[i]].
    PickPerRow { idx: Vec<usize> },
    /// Inputs: [x]; scalar sum of all elements.
    SumAll,
    /// Inputs: [a, b] with a `[m,p]`, b `[m,q]`; rows concatenated.
    ConcatCols { a_cols: usize, b_cols: usize },
    /// Inputs: [x]; mask entries are 0 or 1/(1-p).
    Dropout { mask: Vec<f64> },
    /// Inputs: [x, gamma, beta].
    BatchNorm { saved: BnSaved },
    /// Inputs: [table]; out row r = table[ids[r]] for r < ids.len(), else zero.
    Embedding { ids: Vec<usize> },
    /// Inputs: [x, w0, b0, w1, b1, ...]. See `ConvSaved`.
    ConvReluMaxpool { saved: ConvSaved },
    /// Inputs: the rows; output stacks n equal-length vectors into `[n, c]`.
    StackRows { cols: usize },
}

struct Node {
    op: Op,
    inputs: Vec<Tensor>,
    output: Tensor,
}

/// Ordered record of executed ops. One tape per forward/backward cycle;
/// `backward` freezes the tape.
pub struct Tape {
    nodes: Vec<Node>,
    frozen: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape { nodes: Vec::new(), frozen: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    fn record(&mut self, op: Op, inputs: Vec<Tensor>, shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        if self.frozen {
            return Err(Error::TapeState("op recorded on a frozen tape".into()));
        }
        debug_assert!(
            data.iter().all(|v| v.is_finite()),
            "non-finite value produced by forward op"
        );
        let requires = inputs.iter().any(|t| t.requires_grad());
        let out = Tensor::raw(shape, data, requires, None);
        out.set_node(self.nodes.len());
        self.nodes.push(Node { op, inputs, output: out.clone() });
        Ok(out)
    }

    // ---- ops ----

    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape { op: "matmul", lhs: sa, rhs: sb });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_2d(&a.data(), &b.data(), m, k, n);
        self.record(Op::Matmul { m, k, n }, vec![a.clone(), b.clone()], vec![m, n], out)
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (a.shape(), b.shape());
        if sa != sb {
            return Err(Error::Shape { op: "add", lhs: sa, rhs: sb });
        }
        let out: Vec<f64> = a.data().iter().zip(b.data().iter()).map(|(x, y)| x + y).collect();
        self.record(Op::Add, vec![a.clone(), b.clone()], sa, out)
    }

    pub fn add_row(&mut self, x: &Tensor, row: &Tensor) -> Result<Tensor> {
        let (sx, sr) = (x.shape(), row.shape());
        if sx.len() != 2 || sr.len() != 1 || sx[1] != sr[0] {
            return Err(Error::Shape { op: "add_row", lhs: sx, rhs: sr });
        }
        let (m, n) = (sx[0], sx[1]);
        let xd = x.data();
        let rd = row.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = xd[i * n + j] + rd[j];
            }
        }
        drop(xd);
        drop(rd);
        self.record(Op::AddRow, vec![x.clone(), row.clone()], vec![m, n], out)
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (a.shape(), b.shape());
        if sa != sb {
            return Err(Error::Shape { op: "sub", lhs: sa, rhs: sb });
        }
        let out: Vec<f64> = a.data().iter().zip(b.data().iter()).map(|(x, y)| x - y).collect();
        self.record(Op::Sub, vec![a.clone(), b.clone()], sa, out)
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (a.shape(), b.shape());
        if sa != sb {
            return Err(Error::Shape { op: "mul", lhs: sa, rhs: sb });
        }
        let out: Vec<f64> = a.data().iter().zip(b.data().iter()).map(|(x, y)| x * y).collect();
        self.record(Op::Mul, vec![a.clone(), b.clone()], sa, out)
    }

    pub fn scale(&mut self, x: &Tensor, c: f64) -> Result<Tensor> {
        if !c.is_finite() {
            return Err(Error::invalid("scale", format!("non-finite factor {c}")));
        }
        let out: Vec<f64> = x.data().iter().map(|v| v * c).collect();
        self.record(Op::Scale { c }, vec![x.clone()], x.shape(), out)
    }

    pub fn relu(&mut self, x: &Tensor) -> Result<Tensor> {
        let out: Vec<f64> = x.data().iter().map(|v| v.max(0.0)).collect();
        self.record(Op::Relu, vec![x.clone()], x.shape(), out)
    }

    /// Row-wise softmax, stabilized by max subtraction. Accepts `[n]` or
    /// `[m,n]`.
    pub fn softmax_rows(&mut self, x: &Tensor) -> Result<Tensor> {
        let s = x.shape();
        let (m, n) = match s.len() {
            1 => (1, s[0]),
            2 => (s[0], s[1]),
            _ => return Err(Error::Shape { op: "softmax_rows", lhs: s, rhs: vec![] }),
        };
        if n == 0 {
            return Err(Error::invalid("softmax_rows", "empty rows"));
        }
        let xd = x.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &xd[i * n..(i + 1) * n];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..n {
                let e = (row[j] - mx).exp();
                out[i * n + j] = e;
                z += e;
            }
            for j in 0..n {
                out[i * n + j] /= z;
            }
        }
        drop(xd);
        self.record(Op::SoftmaxRows, vec![x.clone()], s, out)
    }

    /// ln(max(x, floor)). The floor keeps log losses finite when a
    /// probability underflows; gradient is zero in the clamped region.
    pub fn ln_floored(&mut self, x: &Tensor, floor: f64) -> Result<Tensor> {
        if floor <= 0.0 {
            return Err(Error::invalid("ln_floored", "floor must be positive"));
        }
        let out: Vec<f64> = x.data().iter().map(|v| v.max(floor).ln()).collect();
        self.record(Op::LnFloored { floor }, vec![x.clone()], x.shape(), out)
    }

    pub fn pick_per_row(&mut self, x: &Tensor, idx: &[usize]) -> Result<Tensor> {
        let s = x.shape();
        if s.len() != 2 {
            return Err(Error::Shape { op: "pick_per_row", lhs: s, rhs: vec![idx.len()] });
        }
        let (m, n) = (s[0], s[1]);
        if idx.len() != m {
            return Err(Error::invalid(
                "pick_per_row",
                format!("{} indices for {} rows", idx.len(), m),
            ));
        }
        if let Some(&bad) = idx.iter().find(|&&j| j >= n) {
            return Err(Error::invalid("pick_per_row", format!("index {bad} out of range for {n} columns")));
        }
        let xd = x.data();
        let out: Vec<f64> = idx.iter().enumerate().map(|(i, &j)| xd[i * n + j]).collect();
        drop(xd);
        self.record(Op::PickPerRow { idx: idx.to_vec() }, vec![x.clone()], vec![m], out)
    }

    pub fn sum_all(&mut self, x: &Tensor) -> Result<Tensor> {
        let s: f64 = x.data().iter().sum();
        self.record(Op::SumAll, vec![x.clone()], vec![1], vec![s])
    }

    pub fn mean_all(&mut self, x: &Tensor) -> Result<Tensor> {
        let n = x.numel();
        if n == 0 {
            return Err(Error::invalid("mean_all", "empty tensor"));
        }
        let s = self.sum_all(x)?;
        self.scale(&s, 1.0 / n as f64)
    }

    pub fn concat_cols(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(Error::Shape { op: "concat_cols", lhs: sa, rhs: sb });
        }
        let (m, p, q) = (sa[0], sa[1], sb[1]);
        let ad = a.data();
        let bd = b.data();
        let mut out = vec![0.0; m * (p + q)];
        for i in 0..m {
            out[i * (p + q)..i * (p + q) + p].copy_from_slice(&ad[i * p..(i + 1) * p]);
            out[i * (p + q) + p..(i + 1) * (p + q)].copy_from_slice(&bd[i * q..(i + 1) * q]);
        }
        drop(ad);
        drop(bd);
        self.record(Op::ConcatCols { a_cols: p, b_cols: q }, vec![a.clone(), b.clone()], vec![m, p + q], out)
    }

    /// Inverted dropout: kept entries are scaled by 1/(1-p) so the
    /// expectation matches the input. `p = 1` would zero everything.
    pub fn dropout(&mut self, x: &Tensor, p: f64, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid("dropout", format!("p = {p} outside [0, 1)")));
        }
        let keep = 1.0 - p;
        let mask: Vec<f64> = (0..x.numel())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { 1.0 / keep })
            .collect();
        let out: Vec<f64> = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        self.record(Op::Dropout { mask }, vec![x.clone()], x.shape(), out)
    }

    /// Batch normalization over rows of `[m,n]`. Train mode normalizes with
    /// batch statistics (biased variance) and reports them to the caller;
    /// eval mode normalizes with supplied running statistics.
    pub fn batch_norm(
        &mut self,
        x: &Tensor,
        gamma: &Tensor,
        beta: &Tensor,
        eps: f64,
        stats: BnStats<'_>,
    ) -> Result<Tensor> {
        let s = x.shape();
        if s.len() != 2 {
            return Err(Error::Shape { op: "batch_norm", lhs: s, rhs: vec![] });
        }
        let (m, n) = (s[0], s[1]);
        if gamma.shape() != [n] || beta.shape() != [n] {
            return Err(Error::Shape { op: "batch_norm", lhs: vec![n], rhs: gamma.shape() });
        }
        let (mean, var, eval_mode) = match stats {
            BnStats::Batch { out_mean, out_var } => {
                if m < 2 {
                    return Err(Error::invalid("batch_norm", "train mode needs a batch of at least 2"));
                }
                let xd = x.data();
                let mut mean = vec![0.0; n];
                let mut var = vec![0.0; n];
                for i in 0..m {
                    for j in 0..n {
                        mean[j] += xd[i * n + j];
                    }
                }
                for mj in mean.iter_mut() {
                    *mj /= m as f64;
                }
                for i in 0..m {
                    for j in 0..n {
                        let d = xd[i * n + j] - mean[j];
                        var[j] += d * d;
                    }
                }
                for vj in var.iter_mut() {
                    *vj /= m as f64;
                }
                out_mean.copy_from_slice(&mean);
                out_var.copy_from_slice(&var);
                (mean, var, false)
            }
            BnStats::Running { mean, var } => {
                if mean.len() != n || var.len() != n {
                    return Err(Error::invalid("batch_norm", "running stats length mismatch"));
                }
                (mean.to_vec(), var.to_vec(), true)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let xd = x.data();
        let gd = gamma.data();
        let bd = beta.data();
        let mut x_hat = vec![0.0; m * n];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let xh = (xd[i * n + j] - mean[j]) * inv_std[j];
                x_hat[i * n + j] = xh;
                out[i * n + j] = gd[j] * xh + bd[j];
            }
        }
        drop(xd);
        drop(gd);
        drop(bd);
        let saved = BnSaved { x_hat, inv_std, rows: m, cols: n, eval_mode };
        self.record(
            Op::BatchNorm { saved },
            vec![x.clone(), gamma.clone(), beta.clone()],
            vec![m, n],
            out,
        )
    }

    /// Embedding lookup with zero-padding to at least `pad_rows` rows.
    /// Padding rows are exact zeros regardless of table contents.
    pub fn embedding(&mut self, table: &Tensor, ids: &[usize], pad_rows: usize) -> Result<Tensor> {
        let s = table.shape();
        if s.len() != 2 {
            return Err(Error::Shape { op: "embedding", lhs: s, rhs: vec![] });
        }
        let (vocab, dim) = (s[0], s[1]);
        if let Some(&bad) = ids.iter().find(|&&id| id >= vocab) {
            return Err(Error::invalid("embedding", format!("token id {bad} out of range for vocab {vocab}")));
        }
        let rows = ids.len().max(pad_rows);
        let td = table.data();
        let mut out = vec![0.0; rows * dim];
        for (r, &id) in ids.iter().enumerate() {
            out[r * dim..(r + 1) * dim].copy_from_slice(&td[id * dim..(id + 1) * dim]);
        }
        drop(td);
        self.record(
            Op::Embedding { ids: ids.to_vec() },
            vec![table.clone()],
            vec![rows, dim],
            out,
        )
    }

    /// Fused 1-d convolution over time, ReLU, and max-over-time pooling for
    /// one sequence `[rows, cols]`. Each kernel group supplies a weight
    /// `[width*cols, maps]` and bias `[maps]`; outputs concatenate to
    /// `[total_maps]`. Ties in the max take the first window.
    pub fn conv1d_relu_maxpool(&mut self, x: &Tensor, kernels: &[(usize, Tensor, Tensor)]) -> Result<Tensor> {
        let s = x.shape();
        if s.len() != 2 {
            return Err(Error::Shape { op: "conv1d_relu_maxpool", lhs: s, rhs: vec![] });
        }
        let (rows, cols) = (s[0], s[1]);
        if kernels.is_empty() {
            return Err(Error::invalid("conv1d_relu_maxpool", "no kernel groups"));
        }
        let mut inputs = vec![x.clone()];
        let mut groups = Vec::new();
        let mut argmax = Vec::new();
        let mut out = Vec::new();
        let xd = x.data();
        for (width, w, b) in kernels {
            let width = *width;
            let sw = w.shape();
            let sb = b.shape();
            if sw.len() != 2 || sw[0] != width * cols {
                return Err(Error::Shape { op: "conv1d_relu_maxpool", lhs: sw, rhs: vec![width * cols] });
            }
            let maps = sw[1];
            if sb != [maps] {
                return Err(Error::Shape { op: "conv1d_relu_maxpool", lhs: sb, rhs: vec![maps] });
            }
            if rows < width {
                return Err(Error::invalid(
                    "conv1d_relu_maxpool",
                    format!("sequence of {rows} rows shorter than kernel width {width}"),
                ));
            }
            let positions = rows - width + 1;
            let wd = w.data();
            let bd = b.data();
            for j in 0..maps {
                let mut best = f64::NEG_INFINITY;
                let mut best_p = 0;
                for p in 0..positions {
                    let mut z = bd[j];
                    for r in 0..width {
                        let xrow = &xd[(p + r) * cols..(p + r + 1) * cols];
                        for (c, xv) in xrow.iter().enumerate() {
                            z += xv * wd[(r * cols + c) * maps + j];
                        }
                    }
                    let a = z.max(0.0);
                    if a > best {
                        best = a;
                        best_p = p;
                    }
                }
                out.push(best);
                argmax.push(best_p);
            }
            drop(wd);
            drop(bd);
            let wi = inputs.len();
            inputs.push(w.clone());
            inputs.push(b.clone());
            groups.push((width, maps, wi, wi + 1));
        }
        drop(xd);
        let total = out.len();
        let saved = ConvSaved { groups, argmax, rows, cols };
        self.record(Op::ConvReluMaxpool { saved }, inputs, vec![total], out)
    }

    /// Stacks n equal-length vectors into `[n, c]`.
    pub fn stack_rows(&mut self, rows: &[Tensor]) -> Result<Tensor> {
        if rows.is_empty() {
            return Err(Error::invalid("stack_rows", "no rows"));
        }
        let c = rows[0].numel();
        let mut out = Vec::with_capacity(rows.len() * c);
        for r in rows {
            let s = r.shape();
            if s.len() != 1 || s[0] != c {
                return Err(Error::Shape { op: "stack_rows", lhs: s, rhs: vec![c] });
            }
            out.extend_from_slice(&r.data());
        }
        self.record(Op::StackRows { cols: c }, rows.to_vec(), vec![rows.len(), c], out)
    }

    // ---- backward ----

    /// Accumulates `d loss / d t` into `t.grad` for every tensor with
    /// `requires_grad` reachable from `loss`. Freezes the tape; each node is
    /// visited exactly once, so repeated calls error rather than
    /// double-count.
    pub fn backward(&mut self, loss: &Tensor) -> Result<()> {
        if self.frozen {
            return Err(Error::TapeState("backward on a frozen tape".into()));
        }
        if loss.numel() != 1 {
            return Err(Error::Shape { op: "backward", lhs: loss.shape(), rhs: vec![1] });
        }
        if !loss.requires_grad() {
            return Err(Error::TapeState("loss does not depend on any tracked parameter".into()));
        }
        self.frozen = true;
        loss.accumulate_grad(&[1.0]);
        for node in self.nodes.iter().rev() {
            if !node.output.requires_grad() {
                continue;
            }
            let gout = match node.output.grad() {
                Some(g) => g,
                None => continue,
            };
            backward_node(node, &gout);
        }
        // Intermediate gradients are scratch space; parameters keep theirs.
        for node in &self.nodes {
            if !node.output.ptr_eq(loss) {
                node.output.zero_grad();
            }
        }
        Ok(())
    }
}

/// Statistics source for batch norm.
pub enum BnStats<'a> {
    /// Normalize with batch statistics and write them out for the caller's
    /// running-average update.
    Batch { out_mean: &'a mut [f64], out_var: &'a mut [f64] },
    /// Normalize with fixed running statistics.
    Running { mean: &'a [f64], var: &'a [f64] },
}

fn backward_node(node: &Node, gout: &[f64]) {
    let ins = &node.inputs;
    let wants: Vec<bool> = ins.iter().map(|t| t.requires_grad()).collect();
    match &node.op {
        Op::Matmul { m, k, n } => {
            let (m, k, n) = (*m, *k, *n);
            if wants[0] {
                // dA = G B^T
                let bd = ins[1].data();
                let mut ga = vec![0.0; m * k];
                for i in 0..m {
                    for j in 0..n {
                        let g = gout[i * n + j];
                        if g == 0.0 {
                            continue;
                        }
                        for kk in 0..k {
                            ga[i * k + kk] += g * bd[kk * n + j];
                        }
                    }
                }
                drop(bd);
                ins[0].accumulate_grad(&ga);
            }
            if wants[1] {
                // dB = A^T G
                let ad = ins[0].data();
                let mut gb = vec![0.0; k * n];
                for i in 0..m {
                    for kk in 0..k {
                        let a = ad[i * k + kk];
                        if a == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            gb[kk * n + j] += a * gout[i * n + j];
                        }
                    }
                }
                drop(ad);
                ins[1].accumulate_grad(&gb);
            }
        }
        Op::Add => {
            if wants[0] {
                ins[0].accumulate_grad(gout);
            }
            if wants[1] {
                ins[1].accumulate_grad(gout);
            }
        }
        Op::AddRow => {
            if wants[0] {
                ins[0].accumulate_grad(gout);
            }
            if wants[1] {
                let n = ins[1].numel();
                let mut gr = vec![0.0; n];
                for (i, g) in gout.iter().enumerate() {
                    gr[i % n] += g;
                }
                ins[1].accumulate_grad(&gr);
            }
        }
        Op::Sub => {
            if wants[0] {
                ins[0].accumulate_grad(gout);
            }
            if wants[1] {
                let neg: Vec<f64> = gout.iter().map(|g| -g).collect();
                ins[1].accumulate_grad(&neg);
            }
        }
        Op::Mul => {
            if wants[0] {
                let bd = ins[1].data().to_vec();
                let ga: Vec<f64> = gout.iter().zip(&bd).map(|(g, b)| g * b).collect();
                ins[0].accumulate_grad(&ga);
            }
            if wants[1] {
                let ad = ins[0].data().to_vec();
                let gb: Vec<f64> = gout.iter().zip(&ad).map(|(g, a)| g * a).collect();
                ins[1].accumulate_grad(&gb);
            }
        }
        Op::Scale { c } => {
            if wants[0] {
                let g: Vec<f64> = gout.iter().map(|g| g * c).collect();
                ins[0].accumulate_grad(&g);
            }
        }
        Op::Relu => {
            if wants[0] {
                // Subgradient at 0 is 0.
                let xd = ins[0].data().to_vec();
                let g: Vec<f64> = gout.iter().zip(&xd).map(|(g, x)| if *x > 0.0 { *g } else { 0.0 }).collect();
                ins[0].accumulate_grad(&g);
            }
        }
        Op::SoftmaxRows => {
            if wants[0] {
                let s = node.output.to_vec();
                let shape = node.output.shape();
                let (m, n) = if shape.len() == 1 { (1, shape[0]) } else { (shape[0], shape[1]) };
                let mut g = vec![0.0; m * n];
                for i in 0..m {
                    let srow = &s[i * n..(i + 1) * n];
                    let grow = &gout[i * n..(i + 1) * n];
                    let dot: f64 = srow.iter().zip(grow).map(|(s, g)| s * g).sum();
                    for j in 0..n {
                        g[i * n + j] = srow[j] * (grow[j] - dot);
                    }
                }
                ins[0].accumulate_grad(&g);
            }
        }
        Op::LnFloored { floor } => {
            if wants[0] {
                let xd = ins[0].data().to_vec();
                let g: Vec<f64> = gout
                    .iter()
                    .zip(&xd)
                    .map(|(g, x)| if *x > *floor { g / x } else { 0.0 })
                    .collect();
                ins[0].accumulate_grad(&g);
            }
        }
        Op::PickPerRow { idx } => {
            if wants[0] {
                let n = ins[0].shape()[1];
                let mut g = vec![0.0; ins[0].numel()];
                for (i, &j) in idx.iter().enumerate() {
                    g[i * n + j] = gout[i];
                }
                ins[0].accumulate_grad(&g);
            }
        }
        Op::SumAll => {
            if wants[0] {
                let g = vec![gout[0]; ins[0].numel()];
                ins[0].accumulate_grad(&g);
            }
        }
        Op::ConcatCols { a_cols, b_cols } => {
            let (p, q) = (*a_cols, *b_cols);
            let m = node.output.shape()[0];
            if wants[0] {
                let mut ga = vec![0.0; m * p];
                for i in 0..m {
                    ga[i * p..(i + 1) * p].copy_from_slice(&gout[i * (p + q)..i * (p + q) + p]);
                }
                ins[0].accumulate_grad(&ga);
            }
            if wants[1] {
                let mut gb = vec![0.0; m * q];
                for i in 0..m {
                    gb[i * q..(i + 1) * q].copy_from_slice(&gout[i * (p + q) + p..(i + 1) * (p + q)]);
                }
                ins[1].accumulate_grad(&gb);
            }
        }
        Op::Dropout { mask } => {
            if wants[0] {
                let g: Vec<f64> = gout.iter().zip(mask).map(|(g, m)| g * m).collect();
                ins[0].accumulate_grad(&g);
            }
        }
        Op::BatchNorm { saved } => {
            let (m, n) = (saved.rows, saved.cols);
            let gd = ins[1].data().to_vec();
            // d x_hat
            let mut gxh = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    gxh[i * n + j] = gout[i * n + j] * gd[j];
                }
            }
            if wants[1] {
                let mut gg = vec![0.0; n];
                for i in 0..m {
                    for j in 0..n {
                        gg[j] += gout[i * n + j] * saved.x_hat[i * n + j];
                    }
                }
                ins[1].accumulate_grad(&gg);
            }
            if wants[2] {
                let mut gb = vec![0.0; n];
                for i in 0..m {
                    for j in 0..n {
                        gb[j] += gout[i * n + j];
                    }
                }
                ins[2].accumulate_grad(&gb);
            }
            if wants[0] {
                let mut gx = vec![0.0; m * n];
                if saved.eval_mode {
                    // Running stats are constants.
                    for i in 0..m {
                        for j in 0..n {
                            gx[i * n + j] = gxh[i * n + j] * saved.inv_std[j];
                        }
                    }
                } else {
                    // Batch stats depend on x.
                    let mf = m as f64;
                    for j in 0..n {
                        let mut sum_g = 0.0;
                        let mut sum_gx = 0.0;
                        for i in 0..m {
                            sum_g += gxh[i * n + j];
                            sum_gx += gxh[i * n + j] * saved.x_hat[i * n + j];
                        }
                        for i in 0..m {
                            let xh = saved.x_hat[i * n + j];
                            gx[i * n + j] =
                                saved.inv_std[j] / mf * (mf * gxh[i * n + j] - sum_g - xh * sum_gx);
                        }
                    }
                }
                ins[0].accumulate_grad(&gx);
            }
        }
        Op::Embedding { ids } => {
            if wants[0] {
                let dim = ins[0].shape()[1];
                let mut g = vec![0.0; ins[0].numel()];
                for (r, &id) in ids.iter().enumerate() {
                    for c in 0..dim {
                        g[id * dim + c] += gout[r * dim + c];
                    }
                }
                ins[0].accumulate_grad(&g);
            }
        }
        Op::ConvReluMaxpool { saved } => {
            let cols = saved.cols;
            let pooled = node.output.to_vec();
            let mut gx = if wants[0] { Some(vec![0.0; saved.rows * cols]) } else { None };
            let mut off = 0;
            for &(width, maps, wi, bi) in &saved.groups {
                let mut gw = if wants[wi] { Some(vec![0.0; width * cols * maps]) } else { None };
                let mut gb = if wants[bi] { Some(vec![0.0; maps]) } else { None };
                let wd = ins[wi].data().to_vec();
                let xd = ins[0].data().to_vec();
                for j in 0..maps {
                    let g = gout[off + j];
                    // ReLU gate: the winning activation was max(z, 0); if it
                    // is 0 the pre-activation was <= 0 and nothing flows.
                    if g == 0.0 || pooled[off + j] <= 0.0 {
                        continue;
                    }
                    let p = saved.argmax[off + j];
                    if let Some(gb) = gb.as_mut() {
                        gb[j] += g;
                    }
                    for r in 0..width {
                        for c in 0..cols {
                            let xv = xd[(p + r) * cols + c];
                            if let Some(gw) = gw.as_mut() {
                                gw[(r * cols + c) * maps + j] += g * xv;
                            }
                            if let Some(gx) = gx.as_mut() {
                                gx[(p + r) * cols + c] += g * wd[(r * cols + c) * maps + j];
                            }
                        }
                    }
                }
                if let Some(gw) = gw {
                    ins[wi].accumulate_grad(&gw);
                }
                if let Some(gb) = gb {
                    ins[bi].accumulate_grad(&gb);
                }
                off += maps;
            }
            if let Some(gx) = gx {
                ins[0].accumulate_grad(&gx);
            }
        }
        Op::StackRows { cols } => {
            for (r, t) in ins.iter().enumerate() {
                if wants[r] {
                    t.accumulate_grad(&gout[r * cols..(r + 1) * cols]);
                }
            }
        }
    }
}

/// Row-major `[m,k] x [k,n]` product.
pub fn matmul_2d(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}
