//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records every operation of one forward pass in execution order.
//! Nodes are addressed by [`Var`] handles; [`Tape::backward`] walks the record
//! in reverse and returns a [`Gradients`] table. Trainable tensors from a
//! [`ParamStore`] are bound by reference, so a forward pass never copies
//! parameter data. The tape is meant to be dropped after backward.
//!
//! Only the operations needed by the recurrent, attention and answer layers
//! exist. There is no implicit broadcasting: row-bias addition is its own
//! operation ([`Tape::add_row`]).

use std::cell::RefCell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Data<'p> {
    Owned(Vec<f64>),
    Borrowed(&'p [f64]),
}

impl Data<'_> {
    fn as_slice(&self) -> &[f64] {
        match self {
            Data::Owned(v) => v,
            Data::Borrowed(s) => s,
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    OneMinus(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Ln(Var),
    AddRow(Var, Var),
    SoftmaxRows(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    ReverseRows(Var),
    Gather(Var, Vec<Option<usize>>),
    Sum(Var),
    Pick(Var, usize),
    SruRecurrence { xt: Var, f: Var, c0: Var },
}

struct Node<'p> {
    shape: Vec<usize>,
    data: Data<'p>,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Which elementwise function to apply; see [`Tape::unary`] and [`Tape::binary`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Elementwise {
    Sigmoid,
    Tanh,
    Relu,
    OneMinus,
    Add,
    Sub,
    Mul,
}

pub struct Tape<'p> {
    store: Option<&'p ParamStore>,
    nodes: RefCell<Vec<Node<'p>>>,
    bound: RefCell<Vec<Option<Var>>>,
    rng: RefCell<Option<ChaCha8Rng>>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Tape::new()
    }
}

impl<'p> Tape<'p> {
    /// Tape without a parameter store, in inference mode.
    pub fn new() -> Self {
        Tape {
            store: None,
            nodes: RefCell::new(Vec::new()),
            bound: RefCell::new(Vec::new()),
            rng: RefCell::new(None),
        }
    }

    pub fn with_params(store: &'p ParamStore) -> Self {
        Tape {
            store: Some(store),
            nodes: RefCell::new(Vec::with_capacity(256)),
            bound: RefCell::new(vec![None; store.len()]),
            rng: RefCell::new(None),
        }
    }

    /// Enables dropout, drawing masks from a generator seeded with `seed`.
    pub fn training(self, seed: u64) -> Self {
        *self.rng.borrow_mut() = Some(ChaCha8Rng::seed_from_u64(seed));
        self
    }

    pub fn is_training(&self) -> bool {
        self.rng.borrow().is_some()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(
        &self,
        op_name: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        op: Op,
        requires_grad: bool,
    ) -> Result<Var> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        if !data.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite(op_name));
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            data: Data::Owned(data),
            op,
            requires_grad,
            param: None,
        });
        Ok(Var(nodes.len() - 1))
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            data: Data::Owned(t.into_data()),
            op: Op::Leaf,
            requires_grad: false,
            param: None,
        });
        Var(nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn variable(&self, t: Tensor) -> Var {
        let v = self.constant(t);
        self.nodes.borrow_mut()[v.0].requires_grad = true;
        v
    }

    pub fn zeros(&self, shape: &[usize]) -> Var {
        self.constant(Tensor::zeros(shape))
    }

    /// Binds a stored tensor. Repeated calls with the same id return the same
    /// node so that gradients from every use accumulate on one leaf.
    pub fn param(&self, id: ParamId) -> Result<Var> {
        let store = self
            .store
            .ok_or_else(|| Error::Contract("tape has no parameter store".into()))?;
        if let Some(v) = self.bound.borrow().get(id.0).copied().flatten() {
            return Ok(v);
        }
        if id.0 >= store.len() {
            return Err(Error::Contract(format!("unknown parameter id {}", id.0)));
        }
        let t = store.get(id);
        let var = {
            let mut nodes = self.nodes.borrow_mut();
            nodes.push(Node {
                shape: t.shape().to_vec(),
                data: Data::Borrowed(t.data()),
                op: Op::Leaf,
                requires_grad: t.requires_grad,
                param: Some(id),
            });
            Var(nodes.len() - 1)
        };
        self.bound.borrow_mut()[id.0] = Some(var);
        Ok(var)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].shape.clone()
    }

    pub fn rows(&self, v: Var) -> usize {
        let nodes = self.nodes.borrow();
        let s = &nodes[v.0].shape;
        if s.len() >= 2 {
            s[0]
        } else {
            1
        }
    }

    pub fn cols(&self, v: Var) -> usize {
        self.nodes.borrow()[v.0].shape.last().copied().unwrap_or(1)
    }

    pub fn data(&self, v: Var) -> Vec<f64> {
        self.nodes.borrow()[v.0].data.as_slice().to_vec()
    }

    pub fn value(&self, v: Var) -> Tensor {
        let nodes = self.nodes.borrow();
        let n = &nodes[v.0];
        Tensor::new(n.shape.clone(), n.data.as_slice().to_vec()).expect("node shape invariant")
    }

    /// The single value of a one-element node.
    pub fn scalar(&self, v: Var) -> Result<f64> {
        let nodes = self.nodes.borrow();
        let d = nodes[v.0].data.as_slice();
        if d.len() != 1 {
            return Err(Error::Contract(format!(
                "expected a scalar, found shape {:?}",
                nodes[v.0].shape
            )));
        }
        Ok(d[0])
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let nodes = self.nodes.borrow();
        let s = &nodes[v.0].shape;
        match s.len() {
            2 => Ok((s[0], s[1])),
            _ => Err(Error::dim(op, s, &[0, 0])),
        }
    }

    fn rg(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(Error::dim("matmul", &[m, k], &[k2, n]));
        }
        let mut out = vec![0.0; m * n];
        {
            let nodes = self.nodes.borrow();
            gemm(
                m,
                k,
                n,
                nodes[a.0].data.as_slice(),
                false,
                nodes[b.0].data.as_slice(),
                false,
                &mut out,
            );
        }
        self.push("matmul", vec![m, n], out, Op::MatMul(a, b), self.rg(&[a, b]))
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims("transpose", a)?;
        let mut out = vec![0.0; r * c];
        {
            let nodes = self.nodes.borrow();
            let d = nodes[a.0].data.as_slice();
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = d[i * c + j];
                }
            }
        }
        self.push("transpose", vec![c, r], out, Op::Transpose(a), self.rg(&[a]))
    }

    // ---- elementwise ----------------------------------------------------

    pub fn unary(&self, kind: Elementwise, a: Var) -> Result<Var> {
        match kind {
            Elementwise::Sigmoid => self.sigmoid(a),
            Elementwise::Tanh => self.tanh(a),
            Elementwise::Relu => self.relu(a),
            Elementwise::OneMinus => self.one_minus(a),
            _ => Err(Error::Contract(format!("{kind:?} is binary"))),
        }
    }

    pub fn binary(&self, kind: Elementwise, a: Var, b: Var) -> Result<Var> {
        match kind {
            Elementwise::Add => self.add(a, b),
            Elementwise::Sub => self.sub(a, b),
            Elementwise::Mul => self.mul(a, b),
            _ => Err(Error::Contract(format!("{kind:?} is unary"))),
        }
    }

    fn map(&self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let (shape, out) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[a.0];
            (
                n.shape.clone(),
                n.data.as_slice().iter().map(|&x| f(x)).collect(),
            )
        };
        self.push(name, shape, out, op, self.rg(&[a]))
    }

    fn zip(
        &self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (shape, out) = {
            let nodes = self.nodes.borrow();
            let (na, nb) = (&nodes[a.0], &nodes[b.0]);
            if na.shape != nb.shape {
                return Err(Error::dim(name, &na.shape, &nb.shape));
            }
            (
                na.shape.clone(),
                na.data
                    .as_slice()
                    .iter()
                    .zip(nb.data.as_slice())
                    .map(|(&x, &y)| f(x, y))
                    .collect(),
            )
        };
        self.push(name, shape, out, op, self.rg(&[a, b]))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&self, a: Var, s: f64) -> Result<Var> {
        self.map("scale", a, |x| s * x, Op::Scale(a, s))
    }

    pub fn add_scalar(&self, a: Var, s: f64) -> Result<Var> {
        self.map("add_scalar", a, |x| x + s, Op::AddScalar(a))
    }

    pub fn one_minus(&self, a: Var) -> Result<Var> {
        self.map("one_minus", a, |x| 1.0 - x, Op::OneMinus(a))
    }

    pub fn sigmoid(&self, a: Var) -> Result<Var> {
        self.map("sigmoid", a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&self, a: Var) -> Result<Var> {
        self.map("tanh", a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&self, a: Var) -> Result<Var> {
        self.map("relu", a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn ln(&self, a: Var) -> Result<Var> {
        self.map("ln", a, f64::ln, Op::Ln(a))
    }

    /// `x[r, :] + bias` for every row `r`; `bias` is `1×c` or `[c]`.
    pub fn add_row(&self, x: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims("add_row", x)?;
        let (shape, out) = {
            let nodes = self.nodes.borrow();
            let b = nodes[bias.0].data.as_slice();
            if b.len() != c {
                return Err(Error::dim("add_row", &[r, c], &nodes[bias.0].shape));
            }
            let d = nodes[x.0].data.as_slice();
            let mut out = d.to_vec();
            for row in out.chunks_mut(c) {
                row.iter_mut().zip(b).for_each(|(o, bb)| *o += bb);
            }
            (vec![r, c], out)
        };
        self.push("add_row", shape, out, Op::AddRow(x, bias), self.rg(&[x, bias]))
    }

    // ---- normalization --------------------------------------------------

    /// Row-wise softmax. Entries whose mask value is `false` get exactly zero
    /// probability. `mask`, when given, is row-major with the shape of `x`.
    pub fn softmax_rows(&self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let (r, c) = self.matrix_dims("softmax_rows", x)?;
        if c == 0 {
            return Err(Error::dim("softmax_rows", &[r, c], &[r, 1]));
        }
        if let Some(m) = mask {
            if m.len() != r * c {
                return Err(Error::dim("softmax_rows mask", &[r, c], &[m.len()]));
            }
        }
        let out = {
            let nodes = self.nodes.borrow();
            let d = nodes[x.0].data.as_slice();
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                let row = &d[i * c..(i + 1) * c];
                let keep = |j: usize| mask.is_none_or(|m| m[i * c + j]);
                let max = (0..c)
                    .filter(|&j| keep(j))
                    .map(|j| row[j])
                    .fold(f64::NEG_INFINITY, f64::max);
                if max == f64::NEG_INFINITY {
                    return Err(Error::DegenerateRow { row: i });
                }
                let o = &mut out[i * c..(i + 1) * c];
                let mut total = 0.0;
                for j in 0..c {
                    if keep(j) {
                        o[j] = (row[j] - max).exp();
                        total += o[j];
                    }
                }
                o.iter_mut().for_each(|v| *v /= total);
            }
            out
        };
        self.push("softmax_rows", vec![r, c], out, Op::SoftmaxRows(x), self.rg(&[x]))
    }

    // ---- structure ------------------------------------------------------

    /// Concatenates matrices along the feature (column) axis.
    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_cols of zero parts".into()));
        }
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        let (n, widths) = {
            let mut widths = Vec::with_capacity(parts.len());
            let (n, _) = self.matrix_dims("concat_cols", parts[0])?;
            for &p in parts {
                let (r, c) = self.matrix_dims("concat_cols", p)?;
                if r != n {
                    return Err(Error::dim("concat_cols", &[n], &[r]));
                }
                widths.push(c);
            }
            (n, widths)
        };
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; n * total];
        {
            let nodes = self.nodes.borrow();
            let mut offset = 0;
            for (&p, &w) in parts.iter().zip(&widths) {
                let d = nodes[p.0].data.as_slice();
                for i in 0..n {
                    out[i * total + offset..i * total + offset + w]
                        .copy_from_slice(&d[i * w..(i + 1) * w]);
                }
                offset += w;
            }
        }
        self.push(
            "concat_cols",
            vec![n, total],
            out,
            Op::ConcatCols(parts.to_vec()),
            self.rg(parts),
        )
    }

    /// Columns `start..end`.
    pub fn slice_cols(&self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.matrix_dims("slice_cols", a)?;
        if start > end || end > c {
            return Err(Error::dim("slice_cols", &[r, c], &[start, end]));
        }
        let w = end - start;
        let out = {
            let nodes = self.nodes.borrow();
            let d = nodes[a.0].data.as_slice();
            let mut out = Vec::with_capacity(r * w);
            for i in 0..r {
                out.extend_from_slice(&d[i * c + start..i * c + end]);
            }
            out
        };
        self.push("slice_cols", vec![r, w], out, Op::SliceCols(a, start), self.rg(&[a]))
    }

    /// Stacks matrices along the row (time) axis.
    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_rows of zero parts".into()));
        }
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        let (_, c) = self.matrix_dims("concat_rows", parts[0])?;
        let mut rows = 0;
        for &p in parts {
            let (r, cc) = self.matrix_dims("concat_rows", p)?;
            if cc != c {
                return Err(Error::dim("concat_rows", &[c], &[cc]));
            }
            rows += r;
        }
        let mut out = Vec::with_capacity(rows * c);
        {
            let nodes = self.nodes.borrow();
            for &p in parts {
                out.extend_from_slice(nodes[p.0].data.as_slice());
            }
        }
        self.push(
            "concat_rows",
            vec![rows, c],
            out,
            Op::ConcatRows(parts.to_vec()),
            self.rg(parts),
        )
    }

    /// Rows `start..end`.
    pub fn slice_rows(&self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.matrix_dims("slice_rows", a)?;
        if start > end || end > r {
            return Err(Error::dim("slice_rows", &[r, c], &[start, end]));
        }
        if start == 0 && end == r {
            return Ok(a);
        }
        let out = self.nodes.borrow()[a.0].data.as_slice()[start * c..end * c].to_vec();
        self.push(
            "slice_rows",
            vec![end - start, c],
            out,
            Op::SliceRows(a, start),
            self.rg(&[a]),
        )
    }

    /// Reverses the row order (time reversal).
    pub fn reverse_rows(&self, a: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims("reverse_rows", a)?;
        let out = {
            let nodes = self.nodes.borrow();
            let d = nodes[a.0].data.as_slice();
            let mut out = Vec::with_capacity(r * c);
            for i in (0..r).rev() {
                out.extend_from_slice(&d[i * c..(i + 1) * c]);
            }
            out
        };
        self.push("reverse_rows", vec![r, c], out, Op::ReverseRows(a), self.rg(&[a]))
    }

    /// Row lookup into `table`. `None` yields a zero row.
    pub fn gather_rows(&self, table: Var, indices: &[Option<usize>]) -> Result<Var> {
        let (r, c) = self.matrix_dims("gather_rows", table)?;
        let out = {
            let nodes = self.nodes.borrow();
            let d = nodes[table.0].data.as_slice();
            let mut out = vec![0.0; indices.len() * c];
            for (i, idx) in indices.iter().enumerate() {
                if let Some(k) = *idx {
                    if k >= r {
                        return Err(Error::dim("gather_rows", &[r, c], &[k]));
                    }
                    out[i * c..(i + 1) * c].copy_from_slice(&d[k * c..(k + 1) * c]);
                }
            }
            out
        };
        self.push(
            "gather_rows",
            vec![indices.len(), c],
            out,
            Op::Gather(table, indices.to_vec()),
            self.rg(&[table]),
        )
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&self, a: Var) -> Result<Var> {
        let s = self.nodes.borrow()[a.0].data.as_slice().iter().sum();
        self.push("sum", Vec::new(), vec![s], Op::Sum(a), self.rg(&[a]))
    }

    /// Element `index` of the flattened tensor, as a scalar.
    pub fn pick(&self, a: Var, index: usize) -> Result<Var> {
        let v = {
            let nodes = self.nodes.borrow();
            let d = nodes[a.0].data.as_slice();
            *d.get(index)
                .ok_or_else(|| Error::dim("pick", &nodes[a.0].shape, &[index]))?
        };
        self.push("pick", Vec::new(), vec![v], Op::Pick(a, index), self.rg(&[a]))
    }

    // ---- recurrence -----------------------------------------------------

    /// Elementwise gated recurrence `c_t = f_t ⊙ c_{t-1} + (1 - f_t) ⊙ x̃_t`
    /// over all rows of `candidate` and `forget` (both `T×d`), starting from
    /// `c0` (`1×d`). Returns every state as a `T×d` matrix.
    pub fn sru_recurrence(&self, candidate: Var, forget: Var, c0: Var) -> Result<Var> {
        let (t, d) = self.matrix_dims("sru_recurrence", candidate)?;
        let out = {
            let nodes = self.nodes.borrow();
            if nodes[forget.0].shape != [t, d] {
                return Err(Error::dim("sru_recurrence", &[t, d], &nodes[forget.0].shape));
            }
            let init = nodes[c0.0].data.as_slice();
            if init.len() != d {
                return Err(Error::dim("sru_recurrence", &[1, d], &nodes[c0.0].shape));
            }
            let xt = nodes[candidate.0].data.as_slice();
            let f = nodes[forget.0].data.as_slice();
            let mut out = vec![0.0; t * d];
            let mut prev = init.to_vec();
            for step in 0..t {
                let row = step * d;
                for k in 0..d {
                    let ft = f[row + k];
                    let c = ft * prev[k] + (1.0 - ft) * xt[row + k];
                    out[row + k] = c;
                    prev[k] = c;
                }
            }
            out
        };
        self.push(
            "sru_recurrence",
            vec![t, d],
            out,
            Op::SruRecurrence {
                xt: candidate,
                f: forget,
                c0,
            },
            self.rg(&[candidate, forget, c0]),
        )
    }

    // ---- dropout --------------------------------------------------------

    /// Inverted dropout with keep-scale `1/(1-p)`. With `variational` set, a
    /// single column mask is drawn and reused for every row (time step).
    /// Identity outside training mode.
    pub fn dropout(&self, x: Var, p: f64, variational: bool) -> Result<Var> {
        if p <= 0.0 {
            return Ok(x);
        }
        if p >= 1.0 {
            return Err(Error::Contract(format!("dropout rate {p} must be < 1")));
        }
        let mask = {
            let mut rng = self.rng.borrow_mut();
            let Some(rng) = rng.as_mut() else {
                return Ok(x);
            };
            let (r, c) = self.matrix_dims("dropout", x)?;
            let keep = 1.0 / (1.0 - p);
            let mut draw = || if rng.gen::<f64>() < p { 0.0 } else { keep };
            let data: Vec<f64> = if variational {
                let row: Vec<f64> = (0..c).map(|_| draw()).collect();
                row.iter().copied().cycle().take(r * c).collect()
            } else {
                (0..r * c).map(|_| draw()).collect()
            };
            Tensor::new(vec![r, c], data)?
        };
        let m = self.constant(mask);
        self.mul(x, m)
    }

    // ---- backward -------------------------------------------------------

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[loss.0].data.as_slice().len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let (lo, hi) = grads.split_at_mut(i);
            let Some(g) = hi[0].take() else {
                continue;
            };
            let y = node.data.as_slice();
            backprop(&nodes, lo, &node.op, &node.shape, y, &g);
        }

        let mut params = Vec::new();
        for (i, node) in nodes.iter().enumerate() {
            if let Some(pid) = node.param {
                params.push((pid, Var(i)));
            }
        }
        Ok(Gradients { grads, params })
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

/// Gradient slot for `v`, or `None` when `v` takes no gradient.
fn slot<'g>(
    nodes: &[Node<'_>],
    lo: &'g mut [Option<Vec<f64>>],
    v: Var,
) -> Option<&'g mut Vec<f64>> {
    let n = &nodes[v.0];
    if !n.requires_grad {
        return None;
    }
    let len = n.data.as_slice().len();
    Some(lo[v.0].get_or_insert_with(|| vec![0.0; len]))
}

fn backprop(
    nodes: &[Node<'_>],
    lo: &mut [Option<Vec<f64>>],
    op: &Op,
    shape: &[usize],
    y: &[f64],
    g: &[f64],
) {
    let val = |v: Var| nodes[v.0].data.as_slice();
    match op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, n) = (shape[0], shape[1]);
            let k = nodes[a.0].shape[1];
            let (av, bv) = (val(*a), val(*b));
            if let Some(ga) = slot(nodes, lo, *a) {
                // dA = dO · Bᵀ
                gemm_acc(m, n, k, g, false, bv, true, ga);
            }
            if let Some(gb) = slot(nodes, lo, *b) {
                // dB = Aᵀ · dO
                gemm_acc(k, m, n, av, true, g, false, gb);
            }
        }
        Op::Transpose(a) => {
            let (r, c) = (shape[0], shape[1]);
            if let Some(ga) = slot(nodes, lo, *a) {
                for i in 0..r {
                    for j in 0..c {
                        ga[j * r + i] += g[i * c + j];
                    }
                }
            }
        }
        Op::Add(a, b) => {
            if let Some(ga) = slot(nodes, lo, *a) {
                axpy(ga, g, 1.0);
            }
            if let Some(gb) = slot(nodes, lo, *b) {
                axpy(gb, g, 1.0);
            }
        }
        Op::Sub(a, b) => {
            if let Some(ga) = slot(nodes, lo, *a) {
                axpy(ga, g, 1.0);
            }
            if let Some(gb) = slot(nodes, lo, *b) {
                axpy(gb, g, -1.0);
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            if let Some(ga) = slot(nodes, lo, *a) {
                ga.iter_mut()
                    .zip(g.iter().zip(bv))
                    .for_each(|(o, (gi, bi))| *o += gi * bi);
            }
            if let Some(gb) = slot(nodes, lo, *b) {
                gb.iter_mut()
                    .zip(g.iter().zip(av))
                    .for_each(|(o, (gi, ai))| *o += gi * ai);
            }
        }
        Op::Scale(a, s) => {
            if let Some(ga) = slot(nodes, lo, *a) {
                axpy(ga, g, *s);
            }
        }
        Op::AddScalar(a) => {
            if let Some(ga) = slot(nodes, lo, *a) {
                axpy(ga, g, 1.0);
            }
        }
        Op::OneMinus(a) => {
            if let Some(ga) = slot(nodes, lo, *a) {
                axpy(ga, g, -1.0);
            }
        }
        Op::Sigmoid(a) => {
            if let Some(ga) = slot(nodes, lo, *a) {
                ga.iter_mut()
                    .zip(g.iter().zip(y))
                    .for_each(|(o, (gi, yi))| *o += gi * yi * (1.0 - yi));
            }
        }
        Op::Tanh(a) => {
            if let Some(ga) = slot(nodes, lo, *a) {
                ga.iter_mut()
                    .zip(g.iter().zip(y))
                    .for_each(|(o, (gi, yi))| *o += gi * (1.0 - yi * yi));
            }
        }
        Op::Relu(a) => {
            if let Some(ga) = slot(nodes, lo, *a) {
                ga.iter_mut()
                    .zip(g.iter().zip(y))
                    .for_each(|(o, (gi, yi))| {
                        if *yi > 0.0 {
                            *o += gi
                        }
                    });
            }
        }
        Op::Ln(a) => {
            let av = val(*a);
            if let Some(ga) = slot(nodes, lo, *a) {
                ga.iter_mut()
                    .zip(g.iter().zip(av))
                    .for_each(|(o, (gi, xi))| *o += gi / xi);
            }
        }
        Op::AddRow(x, b) => {
            let c = shape[1];
            if let Some(gx) = slot(nodes, lo, *x) {
                axpy(gx, g, 1.0);
            }
            if let Some(gb) = slot(nodes, lo, *b) {
                for row in g.chunks(c) {
                    gb.iter_mut().zip(row).for_each(|(o, gi)| *o += gi);
                }
            }
        }
        Op::SoftmaxRows(x) => {
            let c = shape[1];
            if let Some(gx) = slot(nodes, lo, *x) {
                for ((gr, yr), ox) in g.chunks(c).zip(y.chunks(c)).zip(gx.chunks_mut(c)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        ox[j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
        }
        Op::ConcatCols(parts) => {
            let (n, total) = (shape[0], shape[1]);
            let mut offset = 0;
            for p in parts {
                let w = nodes[p.0].shape[1];
                if let Some(gp) = slot(nodes, lo, *p) {
                    for i in 0..n {
                        let src = &g[i * total + offset..i * total + offset + w];
                        gp[i * w..(i + 1) * w]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(o, s)| *o += s);
                    }
                }
                offset += w;
            }
        }
        Op::SliceCols(a, start) => {
            let (r, w) = (shape[0], shape[1]);
            let c = nodes[a.0].shape[1];
            if let Some(ga) = slot(nodes, lo, *a) {
                for i in 0..r {
                    ga[i * c + start..i * c + start + w]
                        .iter_mut()
                        .zip(&g[i * w..(i + 1) * w])
                        .for_each(|(o, s)| *o += s);
                }
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for p in parts {
                let len = nodes[p.0].data.as_slice().len();
                if let Some(gp) = slot(nodes, lo, *p) {
                    axpy(gp, &g[offset..offset + len], 1.0);
                }
                offset += len;
            }
        }
        Op::SliceRows(a, start) => {
            let c = shape[1];
            if let Some(ga) = slot(nodes, lo, *a) {
                let dst = &mut ga[start * c..start * c + g.len()];
                axpy(dst, g, 1.0);
            }
        }
        Op::ReverseRows(a) => {
            let (r, c) = (shape[0], shape[1]);
            if let Some(ga) = slot(nodes, lo, *a) {
                for i in 0..r {
                    let src = &g[i * c..(i + 1) * c];
                    let j = r - 1 - i;
                    axpy(&mut ga[j * c..(j + 1) * c], src, 1.0);
                }
            }
        }
        Op::Gather(table, indices) => {
            let c = shape[1];
            if let Some(gt) = slot(nodes, lo, *table) {
                for (i, idx) in indices.iter().enumerate() {
                    if let Some(k) = *idx {
                        axpy(&mut gt[k * c..(k + 1) * c], &g[i * c..(i + 1) * c], 1.0);
                    }
                }
            }
        }
        Op::Sum(a) => {
            if let Some(ga) = slot(nodes, lo, *a) {
                ga.iter_mut().for_each(|o| *o += g[0]);
            }
        }
        Op::Pick(a, index) => {
            if let Some(ga) = slot(nodes, lo, *a) {
                ga[*index] += g[0];
            }
        }
        Op::SruRecurrence { xt, f, c0 } => {
            let (t, d) = (shape[0], shape[1]);
            let (xv, fv, c0v) = (val(*xt), val(*f), val(*c0));
            // Carry runs backwards through time; c_{-1} is c0.
            let mut carry = vec![0.0; d];
            let mut dxt = vec![0.0; t * d];
            let mut df = vec![0.0; t * d];
            for step in (0..t).rev() {
                let row = step * d;
                for k in 0..d {
                    let gc = carry[k] + g[row + k];
                    let ft = fv[row + k];
                    let prev = if step == 0 { c0v[k] } else { y[row - d + k] };
                    dxt[row + k] = (1.0 - ft) * gc;
                    df[row + k] = (prev - xv[row + k]) * gc;
                    carry[k] = ft * gc;
                }
            }
            if let Some(gx) = slot(nodes, lo, *xt) {
                axpy(gx, &dxt, 1.0);
            }
            if let Some(gf) = slot(nodes, lo, *f) {
                axpy(gf, &df, 1.0);
            }
            if let Some(gc0) = slot(nodes, lo, *c0) {
                axpy(gc0, &carry, 1.0);
            }
        }
    }
}

fn axpy(dst: &mut [f64], src: &[f64], a: f64) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += a * s);
}

/// `C = op(A)·op(B)` where `op(A)` is `m×k` and `op(B)` is `k×n`.
/// With `*_t` set, the operand is stored transposed (as `k×m` / `n×k`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
) {
    gemm_impl(m, k, n, a, a_t, b, b_t, c, 0.0);
}

#[allow(clippy::too_many_arguments)]
fn gemm_acc(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
) {
    gemm_impl(m, k, n, a, a_t, b, b_t, c, 1.0);
}

#[allow(clippy::too_many_arguments)]
fn gemm_impl(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c.iter_mut().for_each(|x| *x = 0.0);
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths are checked above against the logical shapes, and
    // the strides address exactly those elements.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Gradient table produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient of a leaf. `None` if the leaf did not influence the loss or
    /// does not take gradients. Interior nodes are released during the pass.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients of every bound parameter that received one, in binding order.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.params
            .iter()
            .filter_map(|(pid, v)| self.wrt(*v).map(|g| (*pid, g)))
    }

    /// Adds `scale * grad` into each parameter's stored gradient.
    pub fn accumulate_into(&self, store: &mut ParamStore, scale: f64) {
        for (pid, g) in self.params() {
            store.accumulate_grad(pid, g, scale);
        }
    }
}
