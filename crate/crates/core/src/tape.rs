//! Reverse-mode automatic differentiation tape.
//!
//! A [`Tape`] records one forward pass as an append-only list of nodes in
//! topological order; [`Var`]s are handles into it. Each recorded node
//! carries a backward rule that maps the output gradient to per-parent
//! gradient contributions. [`Tape::backward`] runs one reverse sweep and
//! returns the gradients of every parameter leaf.
//!
//! A tape is single-use: build the graph, call `backward`, drop it.
//! Parameter tensors live outside the tape and are re-registered on the
//! next forward pass.
//!
//! This module holds the elementwise, reduction, shape, and matmul
//! operations; `nn`, `conv`, `fft`, and `ssmix` extend `Tape` with the
//! rest.

use crate::error::{Error, Result};
use crate::tensor::{strides_for, Tensor};
use std::sync::atomic::{AtomicU64, Ordering};

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    pub(crate) node: usize,
    pub(crate) tape: u64,
}

/// Per-parent gradient contributions for one node.
pub(crate) type BackwardFn = Box<dyn Fn(BackArgs) -> Vec<Tensor>>;

/// What a backward rule gets to see: the upstream gradient, the node's own
/// output value, and the parent values, in recording order.
pub(crate) struct BackArgs<'a> {
    pub grad: &'a Tensor,
    pub out: &'a Tensor,
    pub parents: Vec<&'a Tensor>,
}

pub(crate) struct Node {
    value: Tensor,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    is_param: bool,
    op: &'static str,
}

static TAPE_COUNTER: AtomicU64 = AtomicU64::new(1);

pub struct Tape {
    uid: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward sweep. Parameter leaves are always
/// materialized (zeros if the loss did not depend on them).
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn of(&self, v: Var) -> Option<&Tensor> {
        assert_eq!(v.tape, self.tape, "Var used with gradients of a different tape");
        self.grads.get(v.node).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        assert_eq!(v.tape, self.tape, "Var used with gradients of a different tape");
        self.grads.get_mut(v.node).and_then(|g| g.take())
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape { uid: TAPE_COUNTER.fetch_add(1, Ordering::Relaxed), nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) {
        assert_eq!(v.tape, self.uid, "Var belongs to a different tape");
        assert!(v.node < self.nodes.len(), "Var index out of range");
    }

    pub(crate) fn push(
        &mut self,
        value: Tensor,
        parents: Vec<Var>,
        op: &'static str,
        backward: Option<BackwardFn>,
    ) -> Var {
        for p in &parents {
            self.check(*p);
        }
        let node = Node {
            value,
            parents: parents.iter().map(|p| p.node).collect(),
            backward,
            is_param: false,
            op,
        };
        self.nodes.push(node);
        Var { node: self.nodes.len() - 1, tape: self.uid }
    }

    /// Leaf that will not receive a gradient (inputs, frozen embeddings).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, vec![], "constant", None)
    }

    /// Leaf whose gradient is materialized by `backward`.
    pub fn param(&mut self, value: Tensor) -> Var {
        let v = self.push(value, vec![], "param", None);
        self.nodes[v.node].is_param = true;
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.check(v);
        &self.nodes[v.node].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    /// Reverse sweep from a scalar loss. Visits each node at most once, in
    /// reverse topological (recording) order.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.check(loss);
        if self.nodes[loss.node].value.numel() != 1 {
            return Err(Error::contract(
                "backward",
                format!(
                    "loss must be scalar, got shape {:?}",
                    self.nodes[loss.node].value.shape()
                ),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.node] = Some(Tensor::full(self.nodes[loss.node].value.shape(), 1.0));

        for i in (0..=loss.node).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Some(back) = &node.backward {
                let args = BackArgs {
                    grad: &g,
                    out: &node.value,
                    parents: node.parents.iter().map(|&p| &self.nodes[p].value).collect(),
                };
                let parts = back(args);
                debug_assert_eq!(parts.len(), node.parents.len(), "backward arity in {}", node.op);
                for (&p, part) in node.parents.iter().zip(parts) {
                    debug_assert_eq!(
                        part.shape(),
                        self.nodes[p].value.shape(),
                        "gradient shape in {}",
                        node.op
                    );
                    match &mut grads[p] {
                        Some(acc) => {
                            for (a, b) in acc.data_mut().iter_mut().zip(part.data()) {
                                *a += b;
                            }
                        }
                        slot => *slot = Some(part),
                    }
                }
            }
            if node.is_param {
                grads[i] = Some(g);
            }
        }

        // Parameters the loss never touched still get (zero) gradients.
        for (i, node) in self.nodes.iter().enumerate() {
            if node.is_param && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { tape: self.uid, grads })
    }

    // ── Elementwise ─────────────────────────────────────────────────────

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(
            value,
            vec![a, b],
            "add",
            Some(Box::new(|args: BackArgs| vec![args.grad.clone(), args.grad.clone()])),
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(
            value,
            vec![a, b],
            "sub",
            Some(Box::new(|args: BackArgs| {
                vec![args.grad.clone(), args.grad.map(|g| -g)]
            })),
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(
            value,
            vec![a, b],
            "mul",
            Some(Box::new(|args: BackArgs| {
                let da = args.grad.zip_map(args.parents[1], |g, y| g * y).unwrap();
                let db = args.grad.zip_map(args.parents[0], |g, x| g * x).unwrap();
                vec![da, db]
            })),
        ))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x / y)?;
        Ok(self.push(
            value,
            vec![a, b],
            "div",
            Some(Box::new(|args: BackArgs| {
                let da = args.grad.zip_map(args.parents[1], |g, y| g / y).unwrap();
                let db_num = args.grad.zip_map(args.out, |g, o| g * o).unwrap();
                let db = db_num.zip_map(args.parents[1], |n, y| -n / y).unwrap();
                vec![da, db]
            })),
        ))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| -v);
        self.push(
            value,
            vec![x],
            "neg",
            Some(Box::new(|args: BackArgs| vec![args.grad.map(|g| -g)])),
        )
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v * c);
        self.push(
            value,
            vec![x],
            "scale",
            Some(Box::new(move |args: BackArgs| vec![args.grad.map(|g| g * c)])),
        )
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v + c);
        self.push(
            value,
            vec![x],
            "add_scalar",
            Some(Box::new(|args: BackArgs| vec![args.grad.clone()])),
        )
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::exp);
        self.push(
            value,
            vec![x],
            "exp",
            Some(Box::new(|args: BackArgs| {
                vec![args.grad.zip_map(args.out, |g, o| g * o).unwrap()]
            })),
        )
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::ln);
        self.push(
            value,
            vec![x],
            "ln",
            Some(Box::new(|args: BackArgs| {
                vec![args.grad.zip_map(args.parents[0], |g, x| g / x).unwrap()]
            })),
        )
    }

    /// Elementwise product with a single learnable scalar (shape `[1]`).
    pub fn gate_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.shape(s) != [1] {
            return Err(Error::shape("gate_scalar", format!("gate must be [1], got {:?}", self.shape(s))));
        }
        let sv = self.value(s).item();
        let value = self.value(x).map(|v| v * sv);
        Ok(self.push(
            value,
            vec![x, s],
            "gate_scalar",
            Some(Box::new(move |args: BackArgs| {
                let dx = args.grad.map(|g| g * sv);
                let ds = args.grad.dot(args.parents[0]).unwrap();
                vec![dx, Tensor::scalar(ds)]
            })),
        ))
    }

    // ── Reductions ──────────────────────────────────────────────────────

    pub fn sum_all(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(
            value,
            vec![x],
            "sum_all",
            Some(Box::new(|args: BackArgs| {
                vec![Tensor::full(args.parents[0].shape(), args.grad.item())]
            })),
        )
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let value = Tensor::scalar(self.value(x).sum() / n);
        self.push(
            value,
            vec![x],
            "mean_all",
            Some(Box::new(move |args: BackArgs| {
                vec![Tensor::full(args.parents[0].shape(), args.grad.item() / n)]
            })),
        )
    }

    /// Sum over one axis, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("sum_axis", format!("axis {axis} of {shape:?}")));
        }
        let (outer, n, inner) = split3(&shape, axis);
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let xv = self.value(x).data();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let base = (o * n + k) * inner;
                let obase = o * inner;
                for i in 0..inner {
                    data[obase + i] += xv[base + i];
                }
            }
        }
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(
            value,
            vec![x],
            "sum_axis",
            Some(Box::new(move |args: BackArgs| {
                let g = args.grad.data();
                let mut dx = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    for k in 0..n {
                        let base = (o * n + k) * inner;
                        let gbase = o * inner;
                        for i in 0..inner {
                            dx[base + i] = g[gbase + i];
                        }
                    }
                }
                vec![Tensor::new(args.parents[0].shape().to_vec(), dx).unwrap()]
            })),
        ))
    }

    /// Insert an axis of extent `n` at `axis`, repeating the input along it.
    pub fn expand_axis(&mut self, x: Var, axis: usize, n: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis > shape.len() || n == 0 {
            return Err(Error::shape("expand_axis", format!("axis {axis}, extent {n}, of {shape:?}")));
        }
        let mut out_shape = shape.clone();
        out_shape.insert(axis, n);
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis..].iter().product();
        let xv = self.value(x).data();
        let mut data = vec![0.0; outer * n * inner];
        for o in 0..outer {
            for k in 0..n {
                let dst = (o * n + k) * inner;
                data[dst..dst + inner].copy_from_slice(&xv[o * inner..(o + 1) * inner]);
            }
        }
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(
            value,
            vec![x],
            "expand_axis",
            Some(Box::new(move |args: BackArgs| {
                let g = args.grad.data();
                let mut dx = vec![0.0; outer * inner];
                for o in 0..outer {
                    for k in 0..n {
                        let src = (o * n + k) * inner;
                        let dst = o * inner;
                        for i in 0..inner {
                            dx[dst + i] += g[src + i];
                        }
                    }
                }
                vec![Tensor::new(args.parents[0].shape().to_vec(), dx).unwrap()]
            })),
        ))
    }

    // ── Shape ops ───────────────────────────────────────────────────────

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshaped(shape)?;
        Ok(self.push(
            value,
            vec![x],
            "reshape",
            Some(Box::new(|args: BackArgs| {
                vec![args.grad.reshaped(args.parents[0].shape()).unwrap()]
            })),
        ))
    }

    /// Axis permutation: output axis `j` is input axis `perm[j]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let rank = shape.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", format!("perm {perm:?} for shape {shape:?}")));
        }
        let value = permute_tensor(self.value(x), perm);
        let perm_owned = perm.to_vec();
        Ok(self.push(
            value,
            vec![x],
            "permute",
            Some(Box::new(move |args: BackArgs| {
                let mut inverse = vec![0usize; perm_owned.len()];
                for (j, &p) in perm_owned.iter().enumerate() {
                    inverse[p] = j;
                }
                vec![permute_tensor(args.grad, &inverse)]
            })),
        ))
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat", "no inputs".to_string()));
        }
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", format!("axis {axis} of {first:?}")));
        }
        let mut axis_total = 0;
        let mut axis_extents = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s.iter().zip(&first).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::shape("concat", format!("{s:?} vs {first:?} along axis {axis}")));
            }
            axis_extents.push(s[axis]);
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = vec![0.0; outer * axis_total * inner];
        let mut offset = 0;
        for (&p, &ext) in parts.iter().zip(&axis_extents) {
            let pv = self.value(p).data();
            for o in 0..outer {
                let src = o * ext * inner;
                let dst = (o * axis_total + offset) * inner;
                data[dst..dst + ext * inner].copy_from_slice(&pv[src..src + ext * inner]);
            }
            offset += ext;
        }
        let value = Tensor::new(out_shape, data)?;
        let extents = axis_extents.clone();
        Ok(self.push(
            value,
            parts.to_vec(),
            "concat",
            Some(Box::new(move |args: BackArgs| {
                let g = args.grad.data();
                let mut grads = Vec::with_capacity(extents.len());
                let mut offset = 0;
                for (idx, &ext) in extents.iter().enumerate() {
                    let mut dp = vec![0.0; outer * ext * inner];
                    for o in 0..outer {
                        let src = (o * axis_total + offset) * inner;
                        let dst = o * ext * inner;
                        dp[dst..dst + ext * inner].copy_from_slice(&g[src..src + ext * inner]);
                    }
                    grads.push(Tensor::new(args.parents[idx].shape().to_vec(), dp).unwrap());
                    offset += ext;
                }
                grads
            })),
        ))
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn slice_axis(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::shape(
                "slice_axis",
                format!("[{start}, {start}+{len}) along axis {axis} of {shape:?}"),
            ));
        }
        let (outer, n, inner) = split3(&shape, axis);
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let xv = self.value(x).data();
        let mut data = vec![0.0; outer * len * inner];
        for o in 0..outer {
            let src = (o * n + start) * inner;
            let dst = o * len * inner;
            data[dst..dst + len * inner].copy_from_slice(&xv[src..src + len * inner]);
        }
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(
            value,
            vec![x],
            "slice_axis",
            Some(Box::new(move |args: BackArgs| {
                let g = args.grad.data();
                let mut dx = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    let src = o * len * inner;
                    dx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                vec![Tensor::new(args.parents[0].shape().to_vec(), dx).unwrap()]
            })),
        ))
    }

    // ── Matmul and bias ─────────────────────────────────────────────────

    /// Batched matrix product `[.., M, K] × [.., K, P] -> [.., M, P]`.
    ///
    /// The right operand may also be a plain `[K, P]` matrix shared across
    /// the left operand's batch prefix.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ashape = self.shape(a).to_vec();
        let bshape = self.shape(b).to_vec();
        let err = || {
            Error::shape("matmul", format!("incompatible shapes {ashape:?} × {bshape:?}"))
        };
        if ashape.len() < 2 || bshape.len() < 2 {
            return Err(err());
        }
        let (m, k) = (ashape[ashape.len() - 2], ashape[ashape.len() - 1]);
        let (kb, p) = (bshape[bshape.len() - 2], bshape[bshape.len() - 1]);
        if k != kb {
            return Err(err());
        }
        let a_prefix = &ashape[..ashape.len() - 2];
        let b_prefix = &bshape[..bshape.len() - 2];
        let shared_b = b_prefix.is_empty() && !a_prefix.is_empty();
        if !shared_b && a_prefix != b_prefix {
            return Err(err());
        }
        let nb: usize = a_prefix.iter().product();
        let mut out_shape = a_prefix.to_vec();
        out_shape.extend_from_slice(&[m, p]);

        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut data = vec![0.0; nb * m * p];
        for batch in 0..nb {
            let abase = batch * m * k;
            let bbase = if shared_b { 0 } else { batch * k * p };
            mm_acc(&av[abase..], &bv[bbase..], &mut data[batch * m * p..], m, k, p);
        }
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(
            value,
            vec![a, b],
            "matmul",
            Some(Box::new(move |args: BackArgs| {
                let g = args.grad.data();
                let av = args.parents[0].data();
                let bv = args.parents[1].data();
                let mut da = vec![0.0; av.len()];
                let mut db = vec![0.0; bv.len()];
                for batch in 0..nb {
                    let gbase = batch * m * p;
                    let abase = batch * m * k;
                    let bbase = if shared_b { 0 } else { batch * k * p };
                    // dA = g · Bᵀ
                    mm_nt_acc(&g[gbase..], &bv[bbase..], &mut da[abase..], m, p, k);
                    // dB += Aᵀ · g
                    mm_tn_acc(&av[abase..], &g[gbase..], &mut db[bbase..], m, k, p);
                }
                vec![
                    Tensor::new(args.parents[0].shape().to_vec(), da).unwrap(),
                    Tensor::new(args.parents[1].shape().to_vec(), db).unwrap(),
                ]
            })),
        ))
    }

    /// Add a `[d]` bias over the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        if self.shape(bias) != [d] {
            return Err(Error::shape(
                "add_bias",
                format!("bias {:?} vs last extent of {:?}", self.shape(bias), shape),
            ));
        }
        let xv = self.value(x).data();
        let bv = self.value(bias).data();
        let mut data = Vec::with_capacity(xv.len());
        for (i, &v) in xv.iter().enumerate() {
            data.push(v + bv[i % d]);
        }
        let value = Tensor::new(shape, data)?;
        Ok(self.push(
            value,
            vec![x, bias],
            "add_bias",
            Some(Box::new(move |args: BackArgs| {
                let g = args.grad.data();
                let mut dbias = vec![0.0; d];
                for (i, &gv) in g.iter().enumerate() {
                    dbias[i % d] += gv;
                }
                vec![args.grad.clone(), Tensor::new(vec![d], dbias).unwrap()]
            })),
        ))
    }
}

/// Split a shape at `axis` into (product before, extent, product after).
pub(crate) fn split3(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn permute_tensor(x: &Tensor, perm: &[usize]) -> Tensor {
    let shape = x.shape();
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides_for(shape);
    let out_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let xv = x.data();
    let mut data = vec![0.0; xv.len()];
    let mut idx = vec![0usize; rank];
    for slot in data.iter_mut() {
        let mut src = 0;
        for (d, &i) in idx.iter().enumerate() {
            src += i * out_strides[d];
        }
        *slot = xv[src];
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Tensor::new(out_shape, data).unwrap()
}

/// `out += a·b` for row-major `a: [m,k]`, `b: [k,p]`.
fn mm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, p: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * p..(i + 1) * p];
        for (l, &al) in arow.iter().enumerate() {
            let brow = &b[l * p..(l + 1) * p];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += al * bv;
            }
        }
    }
}

/// `out += g·bᵀ` for `g: [m,p]`, `b: [k,p]`, out `[m,k]`.
fn mm_nt_acc(g: &[f64], b: &[f64], out: &mut [f64], m: usize, p: usize, k: usize) {
    for i in 0..m {
        let grow = &g[i * p..(i + 1) * p];
        let orow = &mut out[i * k..(i + 1) * k];
        for (l, o) in orow.iter_mut().enumerate() {
            let brow = &b[l * p..(l + 1) * p];
            let mut s = 0.0;
            for (&gv, &bv) in grow.iter().zip(brow) {
                s += gv * bv;
            }
            *o += s;
        }
    }
}

/// `out += aᵀ·g` for `a: [m,k]`, `g: [m,p]`, out `[k,p]`.
fn mm_tn_acc(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, p: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * p..(i + 1) * p];
        for (l, &al) in arow.iter().enumerate() {
            let orow = &mut out[l * p..(l + 1) * p];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += al * gv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_cases() {
        let mut tape = Tape::new();
        let id = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let v = tape.constant(t(&[2, 1], &[3.0, 4.0]));
        let out = tape.matmul(id, v).unwrap();
        assert_eq!(tape.value(out).data(), &[3.0, 4.0]);

        let a = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2, 1], &[3.0, 4.0]));
        let out = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(out).data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut r = rng::seeded(7);
        let a = Tensor::randn(&mut r, &[4, 5], 1.0);
        let b = Tensor::randn(&mut r, &[5, 3], 1.0);
        let mut oracle = vec![0.0; 4 * 3];
        for i in 0..4 {
            for j in 0..3 {
                let mut s = 0.0;
                for l in 0..5 {
                    s += a.data()[i * 5 + l] * b.data()[l * 3 + j];
                }
                oracle[i * 3 + j] = s;
            }
        }
        let mut tape = Tape::new();
        let av = tape.constant(a);
        let bv = tape.constant(b);
        let out = tape.matmul(av, bv).unwrap();
        let diff = tape
            .value(out)
            .max_abs_diff(&t(&[4, 3], &oracle))
            .unwrap();
        assert!(diff < 1e-12, "matmul vs oracle: {diff}");
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[4, 2]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "got: {err}");
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[3], &[1.0, -2.0, 0.5]));
        let loss = tape.sum_all(x);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.of(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_dot_self_is_twice_x() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[3], &[1.0, -2.0, 0.5]));
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.of(x).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[3], &[1.0, 2.0, 3.0]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn untouched_params_get_zero_gradients() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let unused = tape.param(t(&[3], &[0.0; 3]));
        let loss = tape.sum_all(x);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.of(unused).unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn permute_roundtrips_and_transposes() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let xt = tape.permute(x, &[1, 0]).unwrap();
        assert_eq!(tape.shape(xt), &[3, 2]);
        assert_eq!(tape.value(xt).data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        let back = tape.permute(xt, &[1, 0]).unwrap();
        assert_eq!(tape.value(back).data(), tape.value(x).data());
    }

    #[test]
    fn concat_slice_roundtrip() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t(&[2, 1], &[5.0, 6.0]));
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let sa = tape.slice_axis(c, 1, 0, 2).unwrap();
        let sb = tape.slice_axis(c, 1, 2, 1).unwrap();
        assert_eq!(tape.value(sa).data(), tape.value(a).data());
        assert_eq!(tape.value(sb).data(), tape.value(b).data());
    }

    #[test]
    fn sum_and_expand_axis_are_adjoint_shapes() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let s = tape.sum_axis(x, 1).unwrap();
        assert_eq!(tape.value(s).data(), &[6.0, 15.0]);
        let e = tape.expand_axis(s, 1, 4).unwrap();
        assert_eq!(tape.shape(e), &[2, 4]);
        let loss = tape.sum_all(e);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.of(x).unwrap().data(), &[4.0; 6]);
    }

    #[test]
    fn gate_scalar_routes_gradient_to_gate() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[2.0, 3.0]));
        let s = tape.param(Tensor::scalar(0.5));
        let y = tape.gate_scalar(x, s).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 1.5]);
        let loss = tape.sum_all(y);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.of(x).unwrap().data(), &[0.5, 0.5]);
        assert_eq!(grads.of(s).unwrap().data(), &[5.0]);
    }
}
