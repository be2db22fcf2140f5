use std::collections::{BTreeMap, HashMap};

use super::kernels::{gemm, gemm_nt, gemm_tn};
use super::{axis_extents, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Mul(Var, Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    LogSoftmax(Var),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Transpose(Var),
    Reshape(Var),
    Pick {
        x: Var,
        idx: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        positions: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by one backward pass.
#[derive(Debug, Default)]
pub struct Gradients {
    params: BTreeMap<ParamId, Tensor>,
    inputs: HashMap<Var, Tensor>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    /// Gradients keyed by parameter, in parameter order.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }

    /// Gradient of a tracked input leaf.
    pub fn wrt(&self, var: Var) -> Option<&Tensor> {
        self.inputs.get(&var)
    }
}

/// Records one forward graph. Nodes are appended in evaluation order, so
/// reverse index order is a reverse topological order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Constant leaf (no gradient).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, false)
    }

    /// Leaf whose gradient is reported through [`Gradients::wrt`].
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, true)
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node,
    /// so multiple uses accumulate into one gradient.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param(id), true);
        self.param_vars.insert(id, v);
        v
    }

    /// Copy of `x` that blocks gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ` for `a: [m, k]`, `b: [n, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::shape("matmul_nt", format!("{sa:?} x {sb:?}^T")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![0.0; m * n];
        gemm_nt(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulNt(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape("add", format!("{sa:?} + {sb:?}")));
        }
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let shape = sa.to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Add(a, b), rg))
    }

    /// Adds a length-`n` vector to every row of an `[m, n]` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (sx, sr) = (self.shape(x), self.shape(row));
        if sx.len() != 2 || sr.len() != 1 || sx[1] != sr[0] {
            return Err(Error::shape("add_row", format!("{sx:?} + {sr:?}")));
        }
        let n = sx[1];
        let r = self.value(row).data();
        let data: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + r[i % n])
            .collect();
        let shape = sx.to_vec();
        let rg = self.rg(&[x, row]);
        Ok(self.push(Tensor::new(shape, data)?, Op::AddRow(x, row), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x);
        let value = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|v| v * c).collect(),
        };
        let rg = self.rg(&[x]);
        self.push(value, Op::Scale(x, c), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape("mul", format!("{sa:?} * {sb:?}")));
        }
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let shape = sa.to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Mul(a, b), rg))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let value = Tensor {
            shape: t.shape.clone(),
            data: t
                .data
                .iter()
                .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()))
                .collect(),
        };
        let rg = self.rg(&[x]);
        self.push(value, Op::Gelu(x), rg)
    }

    /// Normalizes the last axis to zero mean and unit variance, then applies
    /// `gain` and `bias` (both of length = last dimension).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let n = *sx
            .last()
            .ok_or_else(|| Error::shape("layer_norm", "scalar input"))?;
        if self.shape(gain) != [n] || self.shape(bias) != [n] {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "x {sx:?}, gain {:?}, bias {:?}",
                    self.shape(gain),
                    self.shape(bias)
                ),
            ));
        }
        let xv = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = xv.len() / n;
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            Tensor::new(sx, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Softmax along `axis`, computed in max-shifted form.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() {
            return Err(Error::shape("softmax", format!("axis {axis} for {sx:?}")));
        }
        let (outer, len, inner) = axis_extents(&sx, axis);
        let xv = self.value(x).data();
        let mut out = vec![0.0; xv.len()];
        for o in 0..outer {
            for k in 0..inner {
                let idx = |i: usize| (o * len + i) * inner + k;
                let max = (0..len).map(|i| xv[idx(i)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for i in 0..len {
                    let e = (xv[idx(i)] - max).exp();
                    out[idx(i)] = e;
                    z += e;
                }
                for i in 0..len {
                    out[idx(i)] /= z;
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(sx, out)?, Op::Softmax { x, axis }, rg))
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let n = *sx
            .last()
            .ok_or_else(|| Error::shape("log_softmax", "scalar input"))?;
        let xv = self.value(x).data();
        let mut out = vec![0.0; xv.len()];
        for (row, dst) in xv.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
            let lse = log_sum_exp(row);
            for (d, v) in dst.iter_mut().zip(row) {
                *d = v - lse;
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(sx, out)?, Op::LogSoftmax(x), rg))
    }

    /// Row lookup: `out[i] = table[ids[i]]` for a `[V, d]` table.
    pub fn embedding_gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let st = self.shape(table);
        if st.len() != 2 {
            return Err(Error::shape("embedding_gather", format!("table {st:?}")));
        }
        let (rows, d) = (st[0], st[1]);
        if let Some(bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::shape(
                "embedding_gather",
                format!("id {bad} out of range for {rows} rows"),
            ));
        }
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::new(vec![ids.len(), d], out)?,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} for {base:?}")));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", format!("{base:?} with {s:?}")));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_extents(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for p in parts {
                let len = self.shape(*p)[axis];
                let block = len * inner;
                out.extend_from_slice(&self.value(*p).data()[o * block..(o + 1) * block]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// `x[.., start..end, ..]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() || start > end || end > sx[axis] {
            return Err(Error::shape(
                "slice",
                format!("{start}..{end} on axis {axis} of {sx:?}"),
            ));
        }
        let (outer, len, inner) = axis_extents(&sx, axis);
        let width = end - start;
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            let from = (o * len + start) * inner;
            out.extend_from_slice(&xv[from..from + width * inner]);
        }
        let mut shape = sx;
        shape[axis] = width;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Slice { x, axis, start }, rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x);
        if sx.len() != 2 {
            return Err(Error::shape("transpose", format!("{sx:?}")));
        }
        let (r, c) = (sx[0], sx[1]);
        let out = transpose_data(self.value(x).data(), r, c);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Flat element selection: `out[i] = x.flat[idx[i]]`, shape `[idx.len()]`.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x).data();
        if let Some(bad) = idx.iter().find(|&&i| i >= xv.len()) {
            return Err(Error::shape(
                "pick",
                format!("index {bad} out of range for {} elements", xv.len()),
            ));
        }
        let out: Vec<f64> = idx.iter().map(|&i| xv[i]).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::vector(out),
            Op::Pick {
                x,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Mean over `positions` of `-log softmax(logits[p])[targets[p]]` for a
    /// `[T, V]` logit matrix; `targets` has length `T`.
    pub fn masked_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        positions: &[usize],
    ) -> Result<Var> {
        if positions.is_empty() {
            return Err(Error::NoSupervisedPositions);
        }
        let sl = self.shape(logits);
        if sl.len() != 2 || targets.len() != sl[0] {
            return Err(Error::shape(
                "masked_cross_entropy",
                format!("logits {sl:?}, {} targets", targets.len()),
            ));
        }
        let (t, v) = (sl[0], sl[1]);
        if let Some(bad) = positions.iter().find(|&&p| p >= t) {
            return Err(Error::shape(
                "masked_cross_entropy",
                format!("position {bad} out of range for {t} rows"),
            ));
        }
        if let Some(bad) = positions.iter().map(|&p| targets[p]).find(|&y| y >= v) {
            return Err(Error::shape(
                "masked_cross_entropy",
                format!("target {bad} out of range for {v} classes"),
            ));
        }
        let lv = self.value(logits).data();
        let mut probs = Vec::with_capacity(positions.len() * v);
        let mut total = 0.0;
        for &p in positions {
            let row = &lv[p * v..(p + 1) * v];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let lse = max + z.ln();
            total += lse - row[targets[p]];
            probs.extend(row.iter().map(|x| (x - max).exp() / z));
        }
        let loss = total / positions.len() as f64;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                positions: positions.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        self.backward_with(loss, Tensor::full(&self.shape(loss).to_vec(), 1.0))
    }

    /// Reverse pass seeded with an explicit upstream gradient for `root`.
    pub fn backward_with(&mut self, root: Var, seed: Tensor) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeReused);
        }
        if seed.shape() != self.shape(root) {
            return Err(Error::shape(
                "backward",
                format!("seed {:?} for {:?}", seed.shape(), self.shape(root)),
            ));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(seed.into_data());
        let mut out = Gradients::default();

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Input => {
                    out.inputs
                        .insert(Var(i), Tensor::new(node.value.shape().to_vec(), g)?);
                }
                Op::Param(id) => {
                    out.params
                        .insert(*id, Tensor::new(node.value.shape().to_vec(), g)?);
                }
                op => self.propagate(op, &node.value, &g, &mut grads),
            }
        }
        Ok(out)
    }

    fn accum<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut [f64]> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let n = node.value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]).as_mut_slice())
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match op {
            Op::Input | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let bv = self.value(*b).data();
                if let Some(ga) = self.accum(grads, *a) {
                    gemm_nt(g, bv, ga, m, n, k);
                }
                let av = self.value(*a).data();
                if let Some(gb) = self.accum(grads, *b) {
                    gemm_tn(av, g, gb, m, k, n);
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[0];
                let bv = self.value(*b).data();
                if let Some(ga) = self.accum(grads, *a) {
                    gemm(g, bv, ga, m, n, k);
                }
                let av = self.value(*a).data();
                if let Some(gb) = self.accum(grads, *b) {
                    gemm_tn(g, av, gb, m, n, k);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = self.accum(grads, v) {
                        add_into(gv, g);
                    }
                }
            }
            Op::AddRow(x, row) => {
                if let Some(gx) = self.accum(grads, *x) {
                    add_into(gx, g);
                }
                let n = self.shape(*row)[0];
                if let Some(gr) = self.accum(grads, *row) {
                    for chunk in g.chunks_exact(n) {
                        add_into(gr, chunk);
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(gx) = self.accum(grads, *x) {
                    for (d, s) in gx.iter_mut().zip(g) {
                        *d += c * s;
                    }
                }
            }
            Op::Mul(a, b) => {
                let bv = self.value(*b).data();
                if let Some(ga) = self.accum(grads, *a) {
                    for ((d, s), y) in ga.iter_mut().zip(g).zip(bv) {
                        *d += s * y;
                    }
                }
                let av = self.value(*a).data();
                if let Some(gb) = self.accum(grads, *b) {
                    for ((d, s), x) in gb.iter_mut().zip(g).zip(av) {
                        *d += s * x;
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.accum(grads, *x) {
                    for ((d, s), &v) in gx.iter_mut().zip(g).zip(xv) {
                        let t = (GELU_C * (v + GELU_A * v * v * v)).tanh();
                        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                        *d += s * (0.5 * (1.0 + t) + 0.5 * v * dt);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let n = self.shape(*gain)[0];
                let gv = self.value(*gain).data();
                if let Some(gx) = self.accum(grads, *x) {
                    for (r, &is) in inv_std.iter().enumerate() {
                        let gr = &g[r * n..(r + 1) * n];
                        let xh = &xhat[r * n..(r + 1) * n];
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for j in 0..n {
                            let d = gr[j] * gv[j];
                            sum_d += d;
                            sum_dx += d * xh[j];
                        }
                        let nf = n as f64;
                        for j in 0..n {
                            let d = gr[j] * gv[j];
                            gx[r * n + j] += is / nf * (nf * d - sum_d - xh[j] * sum_dx);
                        }
                    }
                }
                if let Some(gg) = self.accum(grads, *gain) {
                    for (gr, xh) in g.chunks_exact(n).zip(xhat.chunks_exact(n)) {
                        for j in 0..n {
                            gg[j] += gr[j] * xh[j];
                        }
                    }
                }
                if let Some(gb) = self.accum(grads, *bias) {
                    for gr in g.chunks_exact(n) {
                        add_into(gb, gr);
                    }
                }
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_extents(out.shape(), *axis);
                let y = out.data();
                if let Some(gx) = self.accum(grads, *x) {
                    for o in 0..outer {
                        for k in 0..inner {
                            let idx = |i: usize| (o * len + i) * inner + k;
                            let dotp: f64 = (0..len).map(|i| g[idx(i)] * y[idx(i)]).sum();
                            for i in 0..len {
                                gx[idx(i)] += y[idx(i)] * (g[idx(i)] - dotp);
                            }
                        }
                    }
                }
            }
            Op::LogSoftmax(x) => {
                let n = *out.shape().last().unwrap();
                let y = out.data();
                if let Some(gx) = self.accum(grads, *x) {
                    for ((gr, yr), dst) in g
                        .chunks_exact(n)
                        .zip(y.chunks_exact(n))
                        .zip(gx.chunks_exact_mut(n))
                    {
                        let s: f64 = gr.iter().sum();
                        for j in 0..n {
                            dst[j] += gr[j] - yr[j].exp() * s;
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                let d = self.shape(*table)[1];
                if let Some(gt) = self.accum(grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = axis_extents(out.shape(), *axis);
                let mut offset = 0;
                for p in parts {
                    let len = self.shape(*p)[*axis];
                    if let Some(gp) = self.accum(grads, *p) {
                        let block = len * inner;
                        for o in 0..outer {
                            let from = (o * total + offset) * inner;
                            add_into(&mut gp[o * block..(o + 1) * block], &g[from..from + block]);
                        }
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, len, inner) = axis_extents(self.shape(*x), *axis);
                let width = out.shape()[*axis];
                if let Some(gx) = self.accum(grads, *x) {
                    let block = width * inner;
                    for o in 0..outer {
                        let to = (o * len + start) * inner;
                        add_into(&mut gx[to..to + block], &g[o * block..(o + 1) * block]);
                    }
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                if let Some(gx) = self.accum(grads, *x) {
                    // g is [c, r]
                    add_into(gx, &transpose_data(g, c, r));
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = self.accum(grads, *x) {
                    add_into(gx, g);
                }
            }
            Op::Pick { x, idx } => {
                if let Some(gx) = self.accum(grads, *x) {
                    for (s, &i) in g.iter().zip(idx) {
                        gx[i] += s;
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                positions,
                probs,
            } => {
                let v = self.shape(*logits)[1];
                let scale = g[0] / positions.len() as f64;
                if let Some(gl) = self.accum(grads, *logits) {
                    for (k, &p) in positions.iter().enumerate() {
                        let pr = &probs[k * v..(k + 1) * v];
                        let row = &mut gl[p * v..(p + 1) * v];
                        for j in 0..v {
                            row[j] += scale * pr[j];
                        }
                        row[targets[p]] -= scale;
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.accum(grads, *x) {
                    for d in gx.iter_mut() {
                        *d += g[0];
                    }
                }
            }
        }
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn transpose_data(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; x.len()];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = x[i * cols + j];
        }
    }
    t
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}
