use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{self, dot};
use super::Tensor;
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    idx: usize,
}

/// Deliberately wrong backward rules, used as a negative control for gradient checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Doubles the GELU derivative.
    GeluBackward,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose {
        a: usize,
        rows: usize,
        cols: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    AddRow {
        a: usize,
        bias: usize,
        cols: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    MulConst {
        a: usize,
        factor: Vec<f64>,
    },
    Scale {
        a: usize,
        c: f64,
    },
    AddScalar {
        a: usize,
    },
    Recip {
        a: usize,
    },
    Square {
        a: usize,
    },
    Sum {
        a: usize,
    },
    Gelu {
        a: usize,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        rows: usize,
        cols: usize,
        means: Vec<f64>,
        rstds: Vec<f64>,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        t: usize,
        d: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    GatherRows {
        table: usize,
        ids: Vec<usize>,
        cols: usize,
    },
    ConcatRows {
        parts: Vec<usize>,
    },
    LogSoftmax {
        a: usize,
        rows: usize,
        cols: usize,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        mask: Vec<bool>,
        logp: Vec<f64>,
        count: usize,
        cols: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Vec<f64>,
    shape: Vec<usize>,
    op: Op,
    requires_grad: bool,
}

/// Records elementary operations during a forward pass so that
/// [`Tape::backward`] can replay them in reverse.
///
/// Nodes are appended in execution order, so inputs always precede the
/// nodes that consume them. A tape is single-writer; build one per forward
/// pass.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    fault: Option<Fault>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            fault: None,
        }
    }

    pub fn with_fault(fault: Fault) -> Self {
        Tape {
            fault: Some(fault),
            ..Tape::new()
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn index(&self, v: Var) -> Result<usize> {
        if v.tape != self.id {
            return Err(Error::Tape(format!(
                "variable belongs to tape {} but was used on tape {}",
                v.tape, self.id
            )));
        }
        Ok(v.idx)
    }

    fn push(
        &mut self,
        op_name: &'static str,
        value: Vec<f64>,
        shape: Vec<usize>,
        op: Op,
        requires_grad: bool,
    ) -> Result<Var> {
        if value.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: op_name });
        }
        let idx = self.nodes.len();
        self.nodes.push(Node {
            value,
            shape,
            op,
            requires_grad,
        });
        Ok(Var { tape: self.id, idx })
    }

    fn node(&self, v: Var) -> Result<&Node> {
        let i = self.index(v)?;
        Ok(&self.nodes[i])
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.node(v)?.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::Shape {
                op,
                lhs: s.to_vec(),
                rhs: vec![],
            }),
        }
    }

    /// Records a trainable leaf; its gradient is available after backward.
    pub fn param(&mut self, t: &Tensor) -> Result<Var> {
        self.push(
            "param",
            t.values().to_vec(),
            t.shape().to_vec(),
            Op::Leaf,
            true,
        )
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, t: &Tensor) -> Result<Var> {
        self.push(
            "constant",
            t.values().to_vec(),
            t.shape().to_vec(),
            Op::Leaf,
            false,
        )
    }

    pub fn value(&self, v: Var) -> Result<&[f64]> {
        Ok(&self.node(v)?.value)
    }

    pub fn shape(&self, v: Var) -> Result<&[usize]> {
        Ok(&self.node(v)?.shape)
    }

    pub fn tensor(&self, v: Var) -> Result<Tensor> {
        let n = self.node(v)?;
        Tensor::new(n.shape.clone(), n.value.clone())
    }

    /// Value of a single-element tensor.
    pub fn scalar(&self, v: Var) -> Result<f64> {
        let n = self.node(v)?;
        if n.value.len() != 1 {
            return Err(Error::Shape {
                op: "scalar",
                lhs: n.shape.clone(),
                rhs: vec![1],
            });
        }
        Ok(n.value[0])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let (ai, bi) = (a.idx, b.idx);
        let mut out = vec![0.0; m * n];
        kernels::matmul_into(
            &self.nodes[ai].value,
            &self.nodes[bi].value,
            &mut out,
            m,
            k,
            n,
        );
        let rg = self.nodes[ai].requires_grad || self.nodes[bi].requires_grad;
        self.push(
            "matmul",
            out,
            vec![m, n],
            Op::MatMul {
                a: ai,
                b: bi,
                m,
                k,
                n,
            },
            rg,
        )
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = self.dims2(a, "transpose")?;
        let src = &self.nodes[a.idx];
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                out[j * rows + i] = src.value[i * cols + j];
            }
        }
        let rg = src.requires_grad;
        self.push(
            "transpose",
            out,
            vec![cols, rows],
            Op::Transpose {
                a: a.idx,
                rows,
                cols,
            },
            rg,
        )
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        let (sa, sb) = (&self.node(a)?.shape, &self.node(b)?.shape);
        if sa != sb {
            return Err(Error::Shape {
                op,
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let (na, nb) = (&self.nodes[a.idx], &self.nodes[b.idx]);
        let out = na.value.iter().zip(&nb.value).map(|(x, y)| x + y).collect();
        let rg = na.requires_grad || nb.requires_grad;
        let shape = na.shape.clone();
        self.push("add", out, shape, Op::Add { a: a.idx, b: b.idx }, rg)
    }

    /// Adds a length-`cols` vector to every row of a 2-D tensor.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (rows, cols) = self.dims2(a, "add_row")?;
        let nb = self.node(bias)?;
        if nb.value.len() != cols {
            return Err(Error::Shape {
                op: "add_row",
                lhs: vec![rows, cols],
                rhs: nb.shape.clone(),
            });
        }
        let na = &self.nodes[a.idx];
        let mut out = na.value.clone();
        for r in 0..rows {
            for (o, &b) in out[r * cols..(r + 1) * cols].iter_mut().zip(&nb.value) {
                *o += b;
            }
        }
        let rg = na.requires_grad || nb.requires_grad;
        self.push(
            "add_row",
            out,
            vec![rows, cols],
            Op::AddRow {
                a: a.idx,
                bias: bias.idx,
                cols,
            },
            rg,
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let (na, nb) = (&self.nodes[a.idx], &self.nodes[b.idx]);
        let out = na.value.iter().zip(&nb.value).map(|(x, y)| x * y).collect();
        let rg = na.requires_grad || nb.requires_grad;
        let shape = na.shape.clone();
        self.push("mul", out, shape, Op::Mul { a: a.idx, b: b.idx }, rg)
    }

    /// Elementwise product with a fixed factor (dropout masks).
    pub fn mul_const(&mut self, a: Var, factor: Vec<f64>) -> Result<Var> {
        let na = self.node(a)?;
        if factor.len() != na.value.len() {
            return Err(Error::Shape {
                op: "mul_const",
                lhs: na.shape.clone(),
                rhs: vec![factor.len()],
            });
        }
        let out = na.value.iter().zip(&factor).map(|(x, f)| x * f).collect();
        let (rg, shape) = (na.requires_grad, na.shape.clone());
        self.push(
            "mul_const",
            out,
            shape,
            Op::MulConst { a: a.idx, factor },
            rg,
        )
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let na = self.node(a)?;
        let out = na.value.iter().map(|x| x * c).collect();
        let (rg, shape) = (na.requires_grad, na.shape.clone());
        self.push("scale", out, shape, Op::Scale { a: a.idx, c }, rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let na = self.node(a)?;
        let out = na.value.iter().map(|x| x + c).collect();
        let (rg, shape) = (na.requires_grad, na.shape.clone());
        self.push("add_scalar", out, shape, Op::AddScalar { a: a.idx }, rg)
    }

    pub fn recip(&mut self, a: Var) -> Result<Var> {
        let na = self.node(a)?;
        let out = na.value.iter().map(|x| 1.0 / x).collect();
        let (rg, shape) = (na.requires_grad, na.shape.clone());
        self.push("recip", out, shape, Op::Recip { a: a.idx }, rg)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let na = self.node(a)?;
        let out = na.value.iter().map(|x| x * x).collect();
        let (rg, shape) = (na.requires_grad, na.shape.clone());
        self.push("square", out, shape, Op::Square { a: a.idx }, rg)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let na = self.node(a)?;
        let s = na.value.iter().sum();
        let rg = na.requires_grad;
        self.push("sum", vec![s], vec![1], Op::Sum { a: a.idx }, rg)
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let na = self.node(a)?;
        let out = na.value.iter().map(|&x| kernels::gelu(x)).collect();
        let (rg, shape) = (na.requires_grad, na.shape.clone());
        self.push("gelu", out, shape, Op::Gelu { a: a.idx }, rg)
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (rows, cols) = self.dims2(x, "layer_norm")?;
        let (ng, nb) = (self.node(gain)?, self.node(bias)?);
        if ng.value.len() != cols || nb.value.len() != cols {
            return Err(Error::Shape {
                op: "layer_norm",
                lhs: vec![rows, cols],
                rhs: ng.shape.clone(),
            });
        }
        let nx = &self.nodes[x.idx];
        let mut out = vec![0.0; rows * cols];
        let (means, rstds) =
            kernels::layer_norm_rows(&nx.value, &ng.value, &nb.value, &mut out, rows, cols);
        let rg = nx.requires_grad || ng.requires_grad || nb.requires_grad;
        let op = Op::LayerNorm {
            x: x.idx,
            gain: gain.idx,
            bias: bias.idx,
            rows,
            cols,
            means,
            rstds,
        };
        self.push("layer_norm", out, vec![rows, cols], op, rg)
    }

    /// Multi-head scaled dot-product attention with a causal mask.
    /// `q`, `k`, `v` are `t×d`; head `h` uses columns `h·d/heads .. (h+1)·d/heads`.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (t, d) = self.dims2(q, "causal_attention")?;
        self.same_shape(q, k, "causal_attention")?;
        self.same_shape(q, v, "causal_attention")?;
        if heads == 0 || d % heads != 0 {
            return Err(Error::Validation(format!(
                "width {d} is not divisible by {heads} heads"
            )));
        }
        let (nq, nk, nv) = (&self.nodes[q.idx], &self.nodes[k.idx], &self.nodes[v.idx]);
        let (out, probs) = kernels::causal_attention(&nq.value, &nk.value, &nv.value, t, d, heads);
        let rg = nq.requires_grad || nk.requires_grad || nv.requires_grad;
        let op = Op::Attention {
            q: q.idx,
            k: k.idx,
            v: v.idx,
            t,
            d,
            heads,
            probs,
        };
        self.push("causal_attention", out, vec![t, d], op, rg)
    }

    /// Selects rows of a 2-D table (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, cols) = self.dims2(table, "gather_rows")?;
        if ids.is_empty() {
            return Err(Error::Validation(
                "gather_rows needs at least one id".into(),
            ));
        }
        let nt = &self.nodes[table.idx];
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(Error::Index {
                    what: "embedding table",
                    index: id,
                    size: rows,
                });
            }
            out.extend_from_slice(&nt.value[id * cols..(id + 1) * cols]);
        }
        let rg = nt.requires_grad;
        let op = Op::GatherRows {
            table: table.idx,
            ids: ids.to_vec(),
            cols,
        };
        self.push("gather_rows", out, vec![ids.len(), cols], op, rg)
    }

    /// Stacks 2-D tensors with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Validation("concat_rows needs at least one part".into()))?;
        let (_, cols) = self.dims2(first, "concat_rows")?;
        let mut rows = 0;
        let mut out = Vec::new();
        let mut rg = false;
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_rows")?;
            if c != cols {
                return Err(Error::Shape {
                    op: "concat_rows",
                    lhs: vec![rows, cols],
                    rhs: vec![r, c],
                });
            }
            let n = &self.nodes[p.idx];
            out.extend_from_slice(&n.value);
            rg |= n.requires_grad;
            rows += r;
        }
        let op = Op::ConcatRows {
            parts: parts.iter().map(|p| p.idx).collect(),
        };
        self.push("concat_rows", out, vec![rows, cols], op, rg)
    }

    /// Log-softmax over the last dimension.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let na = self.node(a)?;
        let cols = *na.shape.last().expect("shape is nonempty");
        let rows = na.value.len() / cols;
        let mut out = vec![0.0; na.value.len()];
        kernels::log_softmax_rows(&na.value, &mut out, rows, cols);
        let (rg, shape) = (na.requires_grad, na.shape.clone());
        self.push(
            "log_softmax",
            out,
            shape,
            Op::LogSoftmax {
                a: a.idx,
                rows,
                cols,
            },
            rg,
        )
    }

    /// Mean negative log-likelihood of `targets` over the rows where `mask` is set.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let (rows, cols) = self.dims2(logits, "cross_entropy")?;
        if targets.len() != rows || mask.len() != rows {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: vec![rows, cols],
                rhs: vec![targets.len(), mask.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= cols) {
            return Err(Error::Index {
                what: "vocabulary",
                index: bad,
                size: cols,
            });
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::DegenerateBatch(
                "loss mask selects no positions".into(),
            ));
        }
        let nl = &self.nodes[logits.idx];
        let mut logp = vec![0.0; rows * cols];
        kernels::log_softmax_rows(&nl.value, &mut logp, rows, cols);
        let mut total = 0.0;
        for r in (0..rows).filter(|&r| mask[r]) {
            total -= logp[r * cols + targets[r]];
        }
        let rg = nl.requires_grad;
        let op = Op::CrossEntropy {
            logits: logits.idx,
            targets: targets.to_vec(),
            mask: mask.to_vec(),
            logp,
            count,
            cols,
        };
        self.push("cross_entropy", vec![total / count as f64], vec![1], op, rg)
    }

    /// Propagates d(loss)/d(node) back through the tape.
    ///
    /// Every node reachable from `loss` is visited once, in reverse recording
    /// order. Gradients are retained for leaves only.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = self.index(loss)?;
        if self.nodes[root].value.len() != 1 {
            return Err(Error::Tape(format!(
                "backward needs a scalar, got shape {:?}",
                self.nodes[root].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root] = Some(vec![1.0]);

        for i in (0..=root).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.backward_node(node, &g, &mut grads);
        }

        let mut out = vec![None; self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) {
                if let Some(g) = grads[i].take() {
                    if g.iter().any(|v| !v.is_finite()) {
                        return Err(Error::NonFinite { op: "backward" });
                    }
                    out[i] = Some(g);
                }
            }
        }
        Ok(Gradients {
            tape: self.id,
            grads: out,
        })
    }

    fn wants(&self, idx: usize) -> bool {
        self.nodes[idx].requires_grad
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |idx: usize| self.nodes[idx].value.as_slice();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                if self.wants(a) {
                    let da = slot(grads, a, m * k);
                    kernels::matmul_grad_lhs(g, val(b), da, m, k, n);
                }
                if self.wants(b) {
                    let db = slot(grads, b, k * n);
                    kernels::matmul_grad_rhs(val(a), g, db, m, k, n);
                }
            }
            &Op::Transpose { a, rows, cols } => {
                if self.wants(a) {
                    let da = slot(grads, a, rows * cols);
                    for i in 0..rows {
                        for j in 0..cols {
                            da[i * cols + j] += g[j * rows + i];
                        }
                    }
                }
            }
            &Op::Add { a, b } => {
                for x in [a, b] {
                    if self.wants(x) {
                        axpy(slot(grads, x, g.len()), 1.0, g);
                    }
                }
            }
            &Op::AddRow { a, bias, cols } => {
                if self.wants(a) {
                    axpy(slot(grads, a, g.len()), 1.0, g);
                }
                if self.wants(bias) {
                    let db = slot(grads, bias, cols);
                    for row in g.chunks(cols) {
                        axpy(db, 1.0, row);
                    }
                }
            }
            &Op::Mul { a, b } => {
                if self.wants(a) {
                    let vb = val(b);
                    let da = slot(grads, a, g.len());
                    for ((d, &gi), &bi) in da.iter_mut().zip(g).zip(vb) {
                        *d += gi * bi;
                    }
                }
                if self.wants(b) {
                    let va = val(a);
                    let db = slot(grads, b, g.len());
                    for ((d, &gi), &ai) in db.iter_mut().zip(g).zip(va) {
                        *d += gi * ai;
                    }
                }
            }
            Op::MulConst { a, factor } => {
                if self.wants(*a) {
                    let da = slot(grads, *a, g.len());
                    for ((d, &gi), &f) in da.iter_mut().zip(g).zip(factor) {
                        *d += gi * f;
                    }
                }
            }
            &Op::Scale { a, c } => {
                if self.wants(a) {
                    axpy(slot(grads, a, g.len()), c, g);
                }
            }
            &Op::AddScalar { a } => {
                if self.wants(a) {
                    axpy(slot(grads, a, g.len()), 1.0, g);
                }
            }
            &Op::Recip { a } => {
                if self.wants(a) {
                    let y = &node.value;
                    let da = slot(grads, a, g.len());
                    for ((d, &gi), &yi) in da.iter_mut().zip(g).zip(y) {
                        *d -= gi * yi * yi;
                    }
                }
            }
            &Op::Square { a } => {
                if self.wants(a) {
                    let va = val(a);
                    let da = slot(grads, a, g.len());
                    for ((d, &gi), &x) in da.iter_mut().zip(g).zip(va) {
                        *d += 2.0 * x * gi;
                    }
                }
            }
            &Op::Sum { a } => {
                if self.wants(a) {
                    let n = self.nodes[a].value.len();
                    for d in slot(grads, a, n).iter_mut() {
                        *d += g[0];
                    }
                }
            }
            &Op::Gelu { a } => {
                if self.wants(a) {
                    let fudge = if self.fault == Some(Fault::GeluBackward) {
                        2.0
                    } else {
                        1.0
                    };
                    let va = val(a);
                    let da = slot(grads, a, g.len());
                    for ((d, &gi), &x) in da.iter_mut().zip(g).zip(va) {
                        *d += gi * kernels::gelu_grad(x) * fudge;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                rows,
                cols,
                means,
                rstds,
            } => {
                let (x, gain, bias, rows, cols) = (*x, *gain, *bias, *rows, *cols);
                let vx = val(x);
                let vg = val(gain);
                let mut xhat = vec![0.0; cols];
                let mut dxhat = vec![0.0; cols];
                for r in 0..rows {
                    let gr = &g[r * cols..(r + 1) * cols];
                    let xr = &vx[r * cols..(r + 1) * cols];
                    for j in 0..cols {
                        xhat[j] = (xr[j] - means[r]) * rstds[r];
                        dxhat[j] = gr[j] * vg[j];
                    }
                    if self.wants(gain) {
                        let dg = slot(grads, gain, cols);
                        for j in 0..cols {
                            dg[j] += gr[j] * xhat[j];
                        }
                    }
                    if self.wants(bias) {
                        axpy(slot(grads, bias, cols), 1.0, gr);
                    }
                    if self.wants(x) {
                        let n = cols as f64;
                        let mean_d = dxhat.iter().sum::<f64>() / n;
                        let mean_dx = dot(&dxhat, &xhat) / n;
                        let dx = &mut slot(grads, x, rows * cols)[r * cols..(r + 1) * cols];
                        for j in 0..cols {
                            dx[j] += rstds[r] * (dxhat[j] - mean_d - xhat[j] * mean_dx);
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                t,
                d,
                heads,
                probs,
            } => {
                let (q, k, v, t, d, heads) = (*q, *k, *v, *t, *d, *heads);
                let (vq, vk, vv) = (val(q), val(k), val(v));
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dq = vec![0.0; t * d];
                let mut dk = vec![0.0; t * d];
                let mut dv = vec![0.0; t * d];
                let mut dp = vec![0.0; t];
                for h in 0..heads {
                    let off = h * dh;
                    for i in 0..t {
                        let p_row = &probs[(h * t + i) * t..(h * t + i) * t + i + 1];
                        let go = &g[i * d + off..i * d + off + dh];
                        let mut weighted = 0.0;
                        for j in 0..=i {
                            dp[j] = dot(go, &vv[j * d + off..j * d + off + dh]);
                            weighted += p_row[j] * dp[j];
                            let dvj = &mut dv[j * d + off..j * d + off + dh];
                            for (x, &y) in dvj.iter_mut().zip(go) {
                                *x += p_row[j] * y;
                            }
                        }
                        for j in 0..=i {
                            let ds = p_row[j] * (dp[j] - weighted) * scale;
                            if ds == 0.0 {
                                continue;
                            }
                            for c in 0..dh {
                                dq[i * d + off + c] += ds * vk[j * d + off + c];
                                dk[j * d + off + c] += ds * vq[i * d + off + c];
                            }
                        }
                    }
                }
                for (idx, grad) in [(q, dq), (k, dk), (v, dv)] {
                    if self.wants(idx) {
                        axpy(slot(grads, idx, t * d), 1.0, &grad);
                    }
                }
            }
            Op::GatherRows { table, ids, cols } => {
                if self.wants(*table) {
                    let n = self.nodes[*table].value.len();
                    let dt = slot(grads, *table, n);
                    for (r, &id) in ids.iter().enumerate() {
                        axpy(
                            &mut dt[id * cols..(id + 1) * cols],
                            1.0,
                            &g[r * cols..(r + 1) * cols],
                        );
                    }
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.nodes[p].value.len();
                    if self.wants(p) {
                        axpy(slot(grads, p, n), 1.0, &g[offset..offset + n]);
                    }
                    offset += n;
                }
            }
            &Op::LogSoftmax { a, rows, cols } => {
                if self.wants(a) {
                    let y = &node.value;
                    let da = slot(grads, a, rows * cols);
                    for r in 0..rows {
                        let gr = &g[r * cols..(r + 1) * cols];
                        let s: f64 = gr.iter().sum();
                        for j in 0..cols {
                            da[r * cols + j] += gr[j] - y[r * cols + j].exp() * s;
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                logp,
                count,
                cols,
            } => {
                if self.wants(*logits) {
                    let cols = *cols;
                    let w = g[0] / *count as f64;
                    let dl = slot(grads, *logits, logp.len());
                    for (r, &tgt) in targets.iter().enumerate() {
                        if !mask[r] {
                            continue;
                        }
                        let row = &mut dl[r * cols..(r + 1) * cols];
                        for (j, d) in row.iter_mut().enumerate() {
                            *d += w * logp[r * cols + j].exp();
                        }
                        row[tgt] -= w;
                    }
                }
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], idx: usize, len: usize) -> &mut [f64] {
    grads[idx].get_or_insert_with(|| vec![0.0; len])
}

fn axpy(dst: &mut [f64], c: f64, src: &[f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += c * s;
    }
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of a leaf, or `None` when the leaf is a constant or unreachable.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.idx).and_then(|g| g.as_deref())
    }

    /// Like [`Gradients::get`], but a leaf that did not influence the loss gets zeros.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map_or_else(|| vec![0.0; len], |g| g.to_vec())
    }
}
