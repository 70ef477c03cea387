use super::kernels::{log_softmax_row, matmul_nn, matmul_nt, matmul_tn, sigmoid, softplus};
use super::Tensor;
use crate::error::{invalid, Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    Shift(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Relu(usize),
    Tanh(usize),
    Sigmoid(usize),
    Softplus(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Square(usize),
    Abs(usize),
    Clamp { x: usize, lo: f64, hi: f64 },
    Softmax(usize),
    LogSoftmax(usize),
    Embedding { table: usize, ids: Vec<usize> },
    Concat { parts: Vec<usize>, axis: usize },
    Slice { x: usize, axis: usize, start: usize },
    TileRows(usize),
    TileCols(usize),
    Reshape(usize),
    Sum(usize),
    Mean(usize),
    SumRows(usize),
    MeanRows(usize),
    VarRows(usize),
    Gather { x: usize, idx: Vec<usize> },
    CausalMask(usize),
    LpNorm { x: usize, p: f64 },
}

impl Op {
    fn parents(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | MatMul(a, b) => vec![*a, *b],
            Scale(a, _) | Shift(a) | Transpose(a) | Relu(a) | Tanh(a) | Sigmoid(a)
            | Softplus(a) | Exp(a) | Log(a) | Sqrt(a) | Square(a) | Abs(a) | Softmax(a)
            | LogSoftmax(a) | TileRows(a) | TileCols(a) | Reshape(a) | Sum(a) | Mean(a)
            | SumRows(a) | MeanRows(a) | VarRows(a) | CausalMask(a) => vec![*a],
            Clamp { x, .. } | Slice { x, .. } | Gather { x, .. } | LpNorm { x, .. } => vec![*x],
            Embedding { table, .. } => vec![*table],
            Concat { parts, .. } => parts.clone(),
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A define-by-run computation tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every leaf that requires them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Option<Vec<usize>>>,
}

impl Gradients {
    /// Gradient for `v`; `None` for constants and interior nodes.
    pub fn get(&self, v: Var) -> Option<Tensor> {
        let shape = self.shapes.get(v.0)?.as_ref()?;
        let n = shape.iter().product();
        let data = self.grads[v.0].clone().unwrap_or_else(|| vec![0.0; n]);
        Some(Tensor {
            shape: shape.clone(),
            data,
        })
    }

    /// Whether any storage was allocated for `v`.
    pub fn is_allocated(&self, v: Var) -> bool {
        self.grads.get(v.0).map(|g| g.is_some()).unwrap_or(false)
    }
}

fn rows_of(t: &Tensor) -> (usize, usize) {
    match t.shape.len() {
        0 => (1, 1),
        1 => (1, t.shape[0]),
        _ => {
            let c = *t.shape.last().unwrap();
            (t.data.len() / c.max(1), c)
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds a leaf. Leaves must be finite.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: &'static str, value: Tensor, kind: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op });
        }
        let requires_grad = kind.parents().iter().any(|&p| self.nodes[p].requires_grad);
        self.nodes.push(Node {
            value,
            op: kind,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Shape {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn zip(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, kind: Op) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| f(*x, *y)).collect();
        let value = Tensor {
            shape: va.shape.clone(),
            data,
        };
        self.push(op, value, kind)
    }

    fn map(&mut self, op: &'static str, a: Var, f: impl Fn(f64) -> f64, kind: Op) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        let value = Tensor {
            shape: va.shape.clone(),
            data: va.data.iter().map(|x| f(*x)).collect(),
        };
        self.push(op, value, kind)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a.0, b.0))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a.0, b.0))
    }

    /// Elementwise quotient.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("div", a, b, |x, y| x / y, Op::Div(a.0, b.0))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.map("scale", a, |x| c * x, Op::Scale(a.0, c))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    /// Adds a constant to every element.
    pub fn shift(&mut self, a: Var, c: f64) -> Result<Var> {
        self.map("shift", a, |x| x + c, Op::Shift(a.0))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (m, k, n) = match (&sa[..], &sb[..]) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            _ => {
                return Err(Error::Shape {
                    op: "matmul",
                    lhs: sa,
                    rhs: sb,
                })
            }
        };
        let mut out = vec![0.0; m * n];
        matmul_nn(&self.nodes[a.0].value.data, &self.nodes[b.0].value.data, &mut out, m, k, n);
        let value = Tensor {
            shape: vec![m, n],
            data: out,
        };
        self.push("matmul", value, Op::MatMul(a.0, b.0))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.nodes[a.0].value.dims2("transpose")?;
        let src = &self.nodes[a.0].value.data;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let value = Tensor {
            shape: vec![c, r],
            data: out,
        };
        self.push("transpose", value, Op::Transpose(a.0))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map("relu", a, |x| x.max(0.0), Op::Relu(a.0))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.map("tanh", a, f64::tanh, Op::Tanh(a.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.map("sigmoid", a, sigmoid, Op::Sigmoid(a.0))
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.map("softplus", a, softplus, Op::Softplus(a.0))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.map("exp", a, f64::exp, Op::Exp(a.0))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.map("log", a, f64::ln, Op::Log(a.0))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.map("sqrt", a, f64::sqrt, Op::Sqrt(a.0))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.map("square", a, |x| x * x, Op::Square(a.0))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.map("abs", a, f64::abs, Op::Abs(a.0))
    }

    /// Elementwise clamp to `[lo, hi]`. The gradient is the identity strictly
    /// inside the interval and zero at or beyond either bound.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi || lo.is_nan() || hi.is_nan() {
            return Err(invalid(format!("clamp: empty interval [{lo}, {hi}]")));
        }
        self.map("clamp", a, |x| x.clamp(lo, hi), Op::Clamp { x: a.0, lo, hi })
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        let (r, c) = rows_of(va);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            log_softmax_row(&va.data[i * c..(i + 1) * c], &mut out[i * c..(i + 1) * c]);
        }
        out.iter_mut().for_each(|v| *v = v.exp());
        let value = Tensor {
            shape: va.shape.clone(),
            data: out,
        };
        self.push("softmax", value, Op::Softmax(a.0))
    }

    /// Log-softmax over the last axis, in log-sum-exp form.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        let (r, c) = rows_of(va);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            log_softmax_row(&va.data[i * c..(i + 1) * c], &mut out[i * c..(i + 1) * c]);
        }
        let value = Tensor {
            shape: va.shape.clone(),
            data: out,
        };
        self.push("log_softmax", value, Op::LogSoftmax(a.0))
    }

    /// Rows `ids` of a `[vocab, dim]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.nodes[table.0].value.dims2("embedding")?;
        let src = &self.nodes[table.0].value.data;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(invalid(format!("embedding: id {id} out of range for vocabulary {v}")));
            }
            out.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let value = Tensor {
            shape: vec![ids.len(), d],
            data: out,
        };
        self.push(
            "embedding",
            value,
            Op::Embedding {
                table: table.0,
                ids: ids.to_vec(),
            },
        )
    }

    /// Concatenation of 1-D tensors, or of 2-D tensors along `axis` (0 or 1).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(invalid("concat: no inputs"));
        }
        let first = self.shape(parts[0]).to_vec();
        let value = match (first.len(), axis) {
            (1, 0) => {
                let mut data = Vec::new();
                for &p in parts {
                    let s = self.shape(p);
                    if s.len() != 1 {
                        return Err(Error::Shape {
                            op: "concat",
                            lhs: first,
                            rhs: s.to_vec(),
                        });
                    }
                    data.extend_from_slice(&self.nodes[p.0].value.data);
                }
                Tensor::vector(data)
            }
            (2, 0) => {
                let c = first[1];
                let mut data = Vec::new();
                let mut rows = 0;
                for &p in parts {
                    let s = self.shape(p);
                    if s.len() != 2 || s[1] != c {
                        return Err(Error::Shape {
                            op: "concat",
                            lhs: first,
                            rhs: s.to_vec(),
                        });
                    }
                    rows += s[0];
                    data.extend_from_slice(&self.nodes[p.0].value.data);
                }
                Tensor {
                    shape: vec![rows, c],
                    data,
                }
            }
            (2, 1) => {
                let r = first[0];
                let mut widths = Vec::with_capacity(parts.len());
                for &p in parts {
                    let s = self.shape(p);
                    if s.len() != 2 || s[0] != r {
                        return Err(Error::Shape {
                            op: "concat",
                            lhs: first,
                            rhs: s.to_vec(),
                        });
                    }
                    widths.push(s[1]);
                }
                let total: usize = widths.iter().sum();
                let mut data = Vec::with_capacity(r * total);
                for i in 0..r {
                    for (&p, &w) in parts.iter().zip(&widths) {
                        data.extend_from_slice(&self.nodes[p.0].value.data[i * w..(i + 1) * w]);
                    }
                }
                Tensor {
                    shape: vec![r, total],
                    data,
                }
            }
            _ => {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: first,
                    rhs: vec![axis],
                })
            }
        };
        self.push(
            "concat",
            value,
            Op::Concat {
                parts: parts.iter().map(|p| p.0).collect(),
                axis,
            },
        )
    }

    /// `len` rows (axis 0) or columns (axis 1) of a 2-D tensor starting at `start`.
    /// 1-D tensors are sliced along axis 0.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        let bad = || Error::Shape {
            op: "slice",
            lhs: va.shape.clone(),
            rhs: vec![axis, start, len],
        };
        let value = match (va.shape.len(), axis) {
            (1, 0) => {
                if start + len > va.shape[0] {
                    return Err(bad());
                }
                Tensor::vector(va.data[start..start + len].to_vec())
            }
            (2, 0) => {
                let (r, c) = (va.shape[0], va.shape[1]);
                if start + len > r {
                    return Err(bad());
                }
                Tensor {
                    shape: vec![len, c],
                    data: va.data[start * c..(start + len) * c].to_vec(),
                }
            }
            (2, 1) => {
                let (r, c) = (va.shape[0], va.shape[1]);
                if start + len > c {
                    return Err(bad());
                }
                let mut data = Vec::with_capacity(r * len);
                for i in 0..r {
                    data.extend_from_slice(&va.data[i * c + start..i * c + start + len]);
                }
                Tensor {
                    shape: vec![r, len],
                    data,
                }
            }
            _ => return Err(bad()),
        };
        self.push("slice", value, Op::Slice { x: a.0, axis, start })
    }

    /// Repeats a vector `[n]` (or `[1, n]`) as `rows` rows: `[rows, n]`.
    pub fn tile_rows(&mut self, a: Var, rows: usize) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        let n = match va.shape[..] {
            [n] | [1, n] => n,
            _ => {
                return Err(Error::Shape {
                    op: "tile_rows",
                    lhs: va.shape.clone(),
                    rhs: vec![rows],
                })
            }
        };
        let mut data = Vec::with_capacity(rows * n);
        for _ in 0..rows {
            data.extend_from_slice(&va.data);
        }
        let value = Tensor {
            shape: vec![rows, n],
            data,
        };
        self.push("tile_rows", value, Op::TileRows(a.0))
    }

    /// Repeats a vector `[m]` as `cols` columns: `[m, cols]`.
    pub fn tile_cols(&mut self, a: Var, cols: usize) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        let m = match va.shape[..] {
            [m] | [m, 1] => m,
            _ => {
                return Err(Error::Shape {
                    op: "tile_cols",
                    lhs: va.shape.clone(),
                    rhs: vec![cols],
                })
            }
        };
        let mut data = Vec::with_capacity(m * cols);
        for i in 0..m {
            data.extend(std::iter::repeat_n(va.data[i], cols));
        }
        let value = Tensor {
            shape: vec![m, cols],
            data,
        };
        self.push("tile_cols", value, Op::TileCols(a.0))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.nodes[a.0].value.clone().reshape(shape)?;
        self.push("reshape", value, Op::Reshape(a.0))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.nodes[a.0].value.data.iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a.0))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = &self.nodes[a.0].value;
        if v.data.is_empty() {
            return Err(invalid("mean: empty tensor"));
        }
        let s = v.data.iter().sum::<f64>() / v.data.len() as f64;
        self.push("mean", Tensor::scalar(s), Op::Mean(a.0))
    }

    /// Sum over the last axis: `[m, n] -> [m]`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        let (r, c) = rows_of(va);
        let data = (0..r).map(|i| va.data[i * c..(i + 1) * c].iter().sum()).collect();
        self.push("sum_rows", Tensor::vector(data), Op::SumRows(a.0))
    }

    /// Mean over the last axis: `[m, n] -> [m]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        let (r, c) = rows_of(va);
        let data = (0..r)
            .map(|i| va.data[i * c..(i + 1) * c].iter().sum::<f64>() / c as f64)
            .collect();
        self.push("mean_rows", Tensor::vector(data), Op::MeanRows(a.0))
    }

    /// Population variance over the last axis: `[m, n] -> [m]`.
    pub fn var_rows(&mut self, a: Var) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        let (r, c) = rows_of(va);
        let data = (0..r)
            .map(|i| {
                let row = &va.data[i * c..(i + 1) * c];
                let mu = row.iter().sum::<f64>() / c as f64;
                row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / c as f64
            })
            .collect();
        self.push("var_rows", Tensor::vector(data), Op::VarRows(a.0))
    }

    /// Flat-index gather: `out[k] = a.flat[idx[k]]`.
    pub fn gather(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        let mut data = Vec::with_capacity(idx.len());
        for &i in idx {
            if i >= va.data.len() {
                return Err(invalid(format!("gather: index {i} out of range {}", va.data.len())));
            }
            data.push(va.data[i]);
        }
        self.push(
            "gather",
            Tensor::vector(data),
            Op::Gather {
                x: a.0,
                idx: idx.to_vec(),
            },
        )
    }

    /// `out[i, j] = a[i, j]` for `j <= i`, a large negative constant above the
    /// diagonal. Used before a row softmax for causal attention.
    pub fn causal_mask(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.nodes[a.0].value.dims2("causal_mask")?;
        let mut data = self.nodes[a.0].value.data.clone();
        for i in 0..r {
            for j in (i + 1)..c {
                data[i * c + j] = -1e30;
            }
        }
        let value = Tensor {
            shape: vec![r, c],
            data,
        };
        self.push("causal_mask", value, Op::CausalMask(a.0))
    }

    /// Scalar `‖a‖_p` over all elements, `p >= 1`.
    pub fn lp_norm(&mut self, a: Var, p: f64) -> Result<Var> {
        if !(p >= 1.0) {
            return Err(invalid(format!("lp_norm: p must be >= 1, got {p}")));
        }
        let v = &self.nodes[a.0].value;
        let n = lp(&v.data, p);
        self.push("lp_norm", Tensor::scalar(n), Op::LpNorm { x: a.0, p })
    }

    pub fn l1_norm(&mut self, a: Var) -> Result<Var> {
        self.lp_norm(a, 1.0)
    }

    pub fn l2_norm(&mut self, a: Var) -> Result<Var> {
        self.lp_norm(a, 2.0)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = &self.nodes[loss.0].value;
        if lv.data.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape.clone()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            for p in node.op.parents() {
                if p >= i {
                    return Err(Error::CyclicTape { node: i, parent: p });
                }
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
        }
        let shapes = self
            .nodes
            .iter()
            .map(|nd| (matches!(nd.op, Op::Leaf) && nd.requires_grad).then(|| nd.value.shape.clone()))
            .collect::<Vec<_>>();
        for (g, s) in grads.iter_mut().zip(&shapes) {
            if s.is_none() {
                *g = None;
            }
        }
        Ok(Gradients { grads, shapes })
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |k: usize| &nodes[k].value;
        let y = &nodes[i].value;
        // Accumulates into parent `p` if it participates in differentiation.
        macro_rules! acc {
            ($p:expr, |$buf:ident| $body:expr) => {{
                let p = $p;
                if nodes[p].requires_grad {
                    let len = nodes[p].value.data.len();
                    let $buf = grads[p].get_or_insert_with(|| vec![0.0; len]);
                    $body;
                }
            }};
        }
        macro_rules! unary {
            ($a:expr, |$x:ident, $yv:ident| $d:expr) => {{
                let a = $a;
                acc!(a, |buf| {
                    for (k, gk) in g.iter().enumerate() {
                        let $x = val(a).data[k];
                        let $yv = y.data[k];
                        buf[k] += gk * $d;
                    }
                })
            }};
        }
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc!(*a, |buf| buf.iter_mut().zip(g).for_each(|(o, v)| *o += v));
                acc!(*b, |buf| buf.iter_mut().zip(g).for_each(|(o, v)| *o += v));
            }
            Op::Sub(a, b) => {
                acc!(*a, |buf| buf.iter_mut().zip(g).for_each(|(o, v)| *o += v));
                acc!(*b, |buf| buf.iter_mut().zip(g).for_each(|(o, v)| *o -= v));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc!(*a, |buf| for k in 0..g.len() {
                    buf[k] += g[k] * vb.data[k];
                });
                acc!(*b, |buf| for k in 0..g.len() {
                    buf[k] += g[k] * va.data[k];
                });
            }
            Op::Div(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc!(*a, |buf| for k in 0..g.len() {
                    buf[k] += g[k] / vb.data[k];
                });
                acc!(*b, |buf| for k in 0..g.len() {
                    buf[k] -= g[k] * va.data[k] / (vb.data[k] * vb.data[k]);
                });
            }
            Op::Scale(a, c) => acc!(*a, |buf| buf.iter_mut().zip(g).for_each(|(o, v)| *o += c * v)),
            Op::Shift(a) | Op::Reshape(a) => {
                acc!(*a, |buf| buf.iter_mut().zip(g).for_each(|(o, v)| *o += v))
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let (m, k) = (va.shape[0], va.shape[1]);
                let n = vb.shape[1];
                acc!(*a, |buf| matmul_nt(g, &vb.data, buf, m, n, k));
                acc!(*b, |buf| matmul_tn(&va.data, g, buf, m, k, n));
            }
            Op::Transpose(a) => {
                let (r, c) = (val(*a).shape[0], val(*a).shape[1]);
                acc!(*a, |buf| for ii in 0..r {
                    for jj in 0..c {
                        buf[ii * c + jj] += g[jj * r + ii];
                    }
                });
            }
            Op::Relu(a) => unary!(*a, |x, _y| if x > 0.0 { 1.0 } else { 0.0 }),
            Op::Tanh(a) => unary!(*a, |_x, yv| 1.0 - yv * yv),
            Op::Sigmoid(a) => unary!(*a, |_x, yv| yv * (1.0 - yv)),
            Op::Softplus(a) => unary!(*a, |x, _y| sigmoid(x)),
            Op::Exp(a) => unary!(*a, |_x, yv| yv),
            Op::Log(a) => unary!(*a, |x, _y| 1.0 / x),
            Op::Sqrt(a) => unary!(*a, |_x, yv| if yv > 0.0 { 0.5 / yv } else { 0.0 }),
            Op::Square(a) => unary!(*a, |x, _y| 2.0 * x),
            Op::Abs(a) => unary!(*a, |x, _y| if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }),
            Op::Clamp { x, lo, hi } => unary!(*x, |xv, _y| if xv > *lo && xv < *hi { 1.0 } else { 0.0 }),
            Op::Softmax(a) => {
                let (r, c) = rows_of(y);
                acc!(*a, |buf| for ii in 0..r {
                    let yr = &y.data[ii * c..(ii + 1) * c];
                    let gr = &g[ii * c..(ii + 1) * c];
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for jj in 0..c {
                        buf[ii * c + jj] += yr[jj] * (gr[jj] - dot);
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let (r, c) = rows_of(y);
                acc!(*a, |buf| for ii in 0..r {
                    let yr = &y.data[ii * c..(ii + 1) * c];
                    let gr = &g[ii * c..(ii + 1) * c];
                    let gs: f64 = gr.iter().sum();
                    for jj in 0..c {
                        buf[ii * c + jj] += gr[jj] - yr[jj].exp() * gs;
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let d = val(*table).shape[1];
                acc!(*table, |buf| for (r, &id) in ids.iter().enumerate() {
                    for jj in 0..d {
                        buf[id * d + jj] += g[r * d + jj];
                    }
                });
            }
            Op::Concat { parts, axis } => {
                if *axis == 0 {
                    let mut off = 0;
                    for &p in parts {
                        let len = val(p).data.len();
                        acc!(p, |buf| buf.iter_mut().zip(&g[off..off + len]).for_each(|(o, v)| *o += v));
                        off += len;
                    }
                } else {
                    let (r, total) = (y.shape[0], y.shape[1]);
                    let mut col = 0;
                    for &p in parts {
                        let w = val(p).shape[1];
                        acc!(p, |buf| for ii in 0..r {
                            for jj in 0..w {
                                buf[ii * w + jj] += g[ii * total + col + jj];
                            }
                        });
                        col += w;
                    }
                }
            }
            Op::Slice { x, axis, start } => {
                let vx = val(*x);
                if vx.shape.len() == 1 || *axis == 0 {
                    let c = if vx.shape.len() == 1 { 1 } else { vx.shape[1] };
                    let off = start * c;
                    acc!(*x, |buf| buf[off..off + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(o, v)| *o += v));
                } else {
                    let (r, c) = (vx.shape[0], vx.shape[1]);
                    let len = y.shape[1];
                    acc!(*x, |buf| for ii in 0..r {
                        for jj in 0..len {
                            buf[ii * c + start + jj] += g[ii * len + jj];
                        }
                    });
                }
            }
            Op::TileRows(a) => {
                let n = val(*a).data.len();
                acc!(*a, |buf| for (k, v) in g.iter().enumerate() {
                    buf[k % n] += v;
                });
            }
            Op::TileCols(a) => {
                let cols = y.shape[1];
                acc!(*a, |buf| for (k, v) in g.iter().enumerate() {
                    buf[k / cols] += v;
                });
            }
            Op::Sum(a) => acc!(*a, |buf| buf.iter_mut().for_each(|o| *o += g[0])),
            Op::Mean(a) => {
                let n = val(*a).data.len() as f64;
                acc!(*a, |buf| buf.iter_mut().for_each(|o| *o += g[0] / n));
            }
            Op::SumRows(a) | Op::MeanRows(a) => {
                let (_, c) = rows_of(val(*a));
                let w = if matches!(nodes[i].op, Op::MeanRows(_)) {
                    1.0 / c as f64
                } else {
                    1.0
                };
                acc!(*a, |buf| for (k, o) in buf.iter_mut().enumerate() {
                    *o += g[k / c] * w;
                });
            }
            Op::VarRows(a) => {
                let va = val(*a);
                let (r, c) = rows_of(va);
                acc!(*a, |buf| for ii in 0..r {
                    let row = &va.data[ii * c..(ii + 1) * c];
                    let mu = row.iter().sum::<f64>() / c as f64;
                    for jj in 0..c {
                        buf[ii * c + jj] += g[ii] * 2.0 * (row[jj] - mu) / c as f64;
                    }
                });
            }
            Op::Gather { x, idx } => acc!(*x, |buf| for (k, &j) in idx.iter().enumerate() {
                buf[j] += g[k];
            }),
            Op::CausalMask(a) => {
                let c = y.shape[1];
                acc!(*a, |buf| for (k, v) in g.iter().enumerate() {
                    if k % c <= k / c {
                        buf[k] += v;
                    }
                });
            }
            Op::LpNorm { x, p } => {
                let norm = y.data[0];
                let vx = val(*x);
                acc!(*x, |buf| if norm > 0.0 {
                    let denom = norm.powf(p - 1.0);
                    for (k, o) in buf.iter_mut().enumerate() {
                        let xv = vx.data[k];
                        let s = if xv > 0.0 {
                            1.0
                        } else if xv < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        *o += g[0] * s * xv.abs().powf(p - 1.0) / denom;
                    }
                });
            }
        }
    }
}

/// `‖v‖_p` for `p >= 1`.
pub(crate) fn lp(v: &[f64], p: f64) -> f64 {
    if p == 1.0 {
        v.iter().map(|x| x.abs()).sum()
    } else if p == 2.0 {
        v.iter().map(|x| x * x).sum::<f64>().sqrt()
    } else {
        v.iter().map(|x| x.abs().powf(p)).sum::<f64>().powf(1.0 / p)
    }
}
