use super::kernels::{self, gemm};
use super::{Float, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T: Float> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    Softmax {
        x: Var,
        outer: usize,
        axis_len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: Vec<T>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    MeanPool {
        x: Var,
        groups: usize,
    },
    Sum(Var),
    Reshape(Var),
}

#[derive(Debug)]
struct Node<T: Float> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Tape of recorded operations. Nodes are appended in evaluation order, so
/// the node list is always topologically sorted.
#[derive(Debug, Default)]
pub struct Graph<T: Float = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Add an input tensor; it participates in differentiation iff its
    /// `requires_grad` flag is set.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let needs_grad = tensor.requires_grad;
        self.push(tensor, Op::Leaf, needs_grad)
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    pub fn take_leaf(&mut self, v: Var) -> Tensor<T> {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::scalar(T::zero()))
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// `a[..., k] · b[k, n] -> [..., n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let k = sb[0];
        let n = sb[1];
        let m = self.value(a).numel() / k;
        let mut out = vec![T::zero(); m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            false,
        );
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        let needs = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::MatMul(a, b), needs))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Add(a, b), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Mul(a, b), needs))
    }

    /// Broadcast-add a `[d]` row vector to every row of `x[..., d]`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(row) != [d] {
            return Err(Error::Dimension {
                op: "add_row",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(row).to_vec(),
            });
        }
        let bias = self.value(row).data();
        let mut out = self.value(x).data().to_vec();
        for chunk in out.chunks_exact_mut(d) {
            for (o, &b) in chunk.iter_mut().zip(bias) {
                *o += b;
            }
        }
        let shape = self.shape(x).to_vec();
        let needs = self.needs(&[x, row]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::AddRow(x, row), needs))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let t = self.value(x);
        let out = t.data().iter().map(|&v| v * factor).collect();
        let value = Tensor::new(t.shape(), out).expect("same shape");
        let needs = self.needs(&[x]);
        self.push(value, Op::Scale(x, factor), needs)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = t.data().iter().map(|&v| kernels::gelu(v)).collect();
        let value = Tensor::new(t.shape(), out).expect("same shape");
        let needs = self.needs(&[x]);
        self.push(value, Op::Gelu(x), needs)
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Shape(format!(
                "softmax axis {axis} out of range for {shape:?}"
            )));
        }
        let t = self.value(x);
        if t.data().iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("softmax input contains NaN".into()));
        }
        let outer: usize = shape[..axis].iter().product();
        let axis_len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = vec![T::zero(); t.numel()];
        if inner == 1 {
            kernels::softmax_rows(t.data(), axis_len, &mut out);
        } else {
            let src = t.data();
            let mut buf = vec![T::zero(); axis_len];
            let mut res = vec![T::zero(); axis_len];
            for o in 0..outer {
                for i in 0..inner {
                    for a in 0..axis_len {
                        buf[a] = src[(o * axis_len + a) * inner + i];
                    }
                    kernels::softmax_rows(&buf, axis_len, &mut res);
                    for a in 0..axis_len {
                        out[(o * axis_len + a) * inner + i] = res[a];
                    }
                }
            }
        }
        let needs = self.needs(&[x]);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::Softmax {
                x,
                outer,
                axis_len,
                inner,
            },
            needs,
        ))
    }

    /// Per-row normalisation over the last dimension followed by an affine
    /// map with `gain[d]` and `bias[d]`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).last_dim();
        for p in [gain, bias] {
            if self.shape(p) != [d] {
                return Err(Error::Dimension {
                    op: "layer_norm",
                    lhs: self.shape(x).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        if eps <= 0.0 {
            return Err(Error::Contract("layer_norm eps must be positive".into()));
        }
        let eps = T::from_f64_lossy(eps);
        let dn = T::from_usize(d).unwrap();
        let src = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = src.len() / d;
        let mut xhat = vec![T::zero(); src.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = (var + eps).sqrt().recip();
            rstd[r] = rs;
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat[r * d + c] = h;
                out[r * d + c] = h * g[c] + b[c];
            }
        }
        let shape = self.shape(x).to_vec();
        let needs = self.needs(&[x, gain, bias]);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            needs,
        ))
    }

    /// Multi-head causal scaled dot-product attention.
    ///
    /// `q`, `k`, `v` are `[batch*seq, d]`, heads split `d` evenly. Position
    /// `i` attends to positions `0..=i` of its own sequence only.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
    ) -> Result<Var> {
        self.same_shape("attention", q, k)?;
        self.same_shape("attention", q, v)?;
        let d = self.value(q).last_dim();
        if heads == 0 || d % heads != 0 {
            return Err(Error::Shape(format!("{heads} heads do not divide width {d}")));
        }
        if self.value(q).rows() != batch * seq {
            return Err(Error::Shape(format!(
                "attention expects {batch}x{seq} rows, got {}",
                self.value(q).rows()
            )));
        }
        let dh = d / heads;
        let scale = T::from_f64_lossy(1.0 / (dh as f64).sqrt());
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut probs = vec![T::zero(); batch * heads * seq * seq];
        let mut out = vec![T::zero(); batch * seq * d];
        let mut scores = vec![T::zero(); seq];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                let pbase = (b * heads + h) * seq * seq;
                for i in 0..seq {
                    let qi = &qd[(b * seq + i) * d + off..][..dh];
                    let mut max = T::neg_infinity();
                    for j in 0..=i {
                        let kj = &kd[(b * seq + j) * d + off..][..dh];
                        let s = qi.iter().zip(kj).map(|(&x, &y)| x * y).sum::<T>() * scale;
                        scores[j] = s;
                        max = max.max(s);
                    }
                    let mut sum = T::zero();
                    for s in scores[..=i].iter_mut() {
                        *s = (*s - max).exp();
                        sum += *s;
                    }
                    let inv = sum.recip();
                    let prow = &mut probs[pbase + i * seq..][..seq];
                    let orow = &mut out[(b * seq + i) * d + off..][..dh];
                    for j in 0..=i {
                        let p = scores[j] * inv;
                        prow[j] = p;
                        let vj = &vd[(b * seq + j) * d + off..][..dh];
                        for (o, &vv) in orow.iter_mut().zip(vj) {
                            *o += p * vv;
                        }
                    }
                }
            }
        }
        let shape = self.shape(q).to_vec();
        let needs = self.needs(&[q, k, v]);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            },
            needs,
        ))
    }

    /// Attention probabilities recorded by a [`Graph::causal_attention`]
    /// node, laid out `[batch, heads, seq, seq]`.
    pub fn attention_probs(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Row lookup: `table[n, d]`, ids → `[ids.len(), d]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(Error::Shape(format!("gather table must be 2-D, got {shape:?}")));
        }
        let (n, d) = (shape[0], shape[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        let src = self.value(table).data();
        for &id in ids {
            if id >= n {
                return Err(Error::Index {
                    what: "embedding table",
                    index: id,
                    len: n,
                });
            }
            out.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let needs = self.needs(&[table]);
        Ok(self.push(
            Tensor::new(&[ids.len(), d], out)?,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            needs,
        ))
    }

    /// Mean negative log-likelihood of `targets` under `softmax(logits)`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let c = t.last_dim();
        let rows = t.rows();
        if targets.len() != rows {
            return Err(Error::Dimension {
                op: "cross_entropy",
                lhs: t.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&y| y >= c) {
            return Err(Error::Index {
                what: "class targets",
                index: bad,
                len: c,
            });
        }
        let mut probs = vec![T::zero(); t.numel()];
        kernels::softmax_rows(t.data(), c, &mut probs);
        let mut loss = T::zero();
        for (r, &y) in targets.iter().enumerate() {
            let row = &t.data()[r * c..(r + 1) * c];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            loss += lse - row[y];
        }
        loss = loss / T::from_usize(rows).unwrap();
        let needs = self.needs(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            needs,
        ))
    }

    /// `[groups*seq, d] -> [groups, d]` by averaging consecutive row blocks.
    pub fn mean_pool(&mut self, x: Var, groups: usize) -> Result<Var> {
        let t = self.value(x);
        let (rows, d) = (t.rows(), t.last_dim());
        if groups == 0 || rows % groups != 0 {
            return Err(Error::Shape(format!("cannot pool {rows} rows into {groups} groups")));
        }
        let seq = rows / groups;
        let inv = T::from_usize(seq).unwrap().recip();
        let mut out = vec![T::zero(); groups * d];
        for (r, row) in t.data().chunks_exact(d).enumerate() {
            let dst = &mut out[(r / seq) * d..][..d];
            for (o, &v) in dst.iter_mut().zip(row) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|v| *v *= inv);
        let needs = self.needs(&[x]);
        Ok(self.push(Tensor::new(&[groups, d], out)?, Op::MeanPool { x, groups }, needs))
    }

    /// Select rows by index: `[n, d] -> [idx.len(), d]`, differentiable.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let d = self.value(x).last_dim();
        let n = self.value(x).rows();
        let flat = self.reshape(x, &[n, d])?;
        self.gather(flat, rows)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let needs = self.needs(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), needs)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = Tensor::new(shape, self.value(x).data().to_vec()).map_err(|_| {
            Error::Dimension {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape.to_vec(),
            }
        })?;
        let needs = self.needs(&[x]);
        Ok(self.push(value, Op::Reshape(x), needs))
    }

    /// Reverse-mode sweep from a scalar `loss`. Leaf gradients are stored on
    /// the leaf tensors; a `requires_grad` leaf that is not an ancestor of
    /// `loss` receives zeros.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..n).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            if let Op::Leaf = self.nodes[idx].op {
                grads[idx] = Some(g);
                continue;
            }
            self.backprop_node(idx, &g, &mut grads);
        }

        for (idx, node) in self.nodes.iter_mut().enumerate() {
            if matches!(node.op, Op::Leaf) && node.value.requires_grad {
                let g = grads
                    .get_mut(idx)
                    .and_then(Option::take)
                    .unwrap_or_else(|| vec![T::zero(); node.value.numel()]);
                node.value.accumulate_grad(&g);
            }
        }
        Ok(())
    }

    fn backprop_node(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let mut send = |v: Var, delta: Vec<T>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.iter_mut().zip(delta).for_each(|(a, d)| *a += d),
                slot @ None => *slot = Some(delta),
            }
        };
        let wants = |v: Var| self.nodes[v.0].needs_grad;

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let bshape = self.shape(*b);
                let (k, nn) = (bshape[0], bshape[1]);
                let m = self.value(*a).numel() / k;
                if wants(*a) {
                    let mut da = vec![T::zero(); m * k];
                    gemm(m, nn, k, g, false, self.value(*b).data(), true, &mut da, false);
                    send(*a, da);
                }
                if wants(*b) {
                    let mut db = vec![T::zero(); k * nn];
                    gemm(k, m, nn, self.value(*a).data(), true, g, false, &mut db, false);
                    send(*b, db);
                }
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    send(*a, g.to_vec());
                }
                if wants(*b) {
                    send(*b, g.to_vec());
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let d = g
                        .iter()
                        .zip(self.value(*b).data())
                        .map(|(&gv, &bv)| gv * bv)
                        .collect();
                    send(*a, d);
                }
                if wants(*b) {
                    let d = g
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(&gv, &av)| gv * av)
                        .collect();
                    send(*b, d);
                }
            }
            Op::AddRow(x, row) => {
                if wants(*x) {
                    send(*x, g.to_vec());
                }
                if wants(*row) {
                    let d = self.value(*row).numel();
                    let mut dr = vec![T::zero(); d];
                    for chunk in g.chunks_exact(d) {
                        for (o, &v) in dr.iter_mut().zip(chunk) {
                            *o += v;
                        }
                    }
                    send(*row, dr);
                }
            }
            Op::Scale(x, f) => send(*x, g.iter().map(|&v| v * *f).collect()),
            Op::Gelu(x) => {
                let d = g
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(&gv, &xv)| gv * kernels::gelu_grad(xv))
                    .collect();
                send(*x, d);
            }
            Op::Softmax {
                x,
                outer,
                axis_len,
                inner,
            } => {
                let y = node.value.data();
                let mut dx = vec![T::zero(); y.len()];
                for o in 0..*outer {
                    for i in 0..*inner {
                        let at = |a: usize| (o * axis_len + a) * inner + i;
                        let dot = (0..*axis_len).map(|a| g[at(a)] * y[at(a)]).sum::<T>();
                        for a in 0..*axis_len {
                            dx[at(a)] = y[at(a)] * (g[at(a)] - dot);
                        }
                    }
                }
                send(*x, dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = self.value(*gain).numel();
                let gv = self.value(*gain).data();
                if wants(*x) {
                    let dn = T::from_usize(d).unwrap();
                    let mut dx = vec![T::zero(); g.len()];
                    for (r, rs) in rstd.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut mean_dy = T::zero();
                        let mut mean_dyh = T::zero();
                        for c in 0..d {
                            let dy = gr[c] * gv[c];
                            mean_dy += dy;
                            mean_dyh += dy * hr[c];
                        }
                        mean_dy = mean_dy / dn;
                        mean_dyh = mean_dyh / dn;
                        for c in 0..d {
                            let dy = gr[c] * gv[c];
                            dx[r * d + c] = *rs * (dy - mean_dy - hr[c] * mean_dyh);
                        }
                    }
                    send(*x, dx);
                }
                if wants(*gain) {
                    let mut dg = vec![T::zero(); d];
                    for (gr, hr) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for c in 0..d {
                            dg[c] += gr[c] * hr[c];
                        }
                    }
                    send(*gain, dg);
                }
                if wants(*bias) {
                    let mut db = vec![T::zero(); d];
                    for gr in g.chunks_exact(d) {
                        for c in 0..d {
                            db[c] += gr[c];
                        }
                    }
                    send(*bias, db);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            } => {
                let (batch, seq, heads) = (*batch, *seq, *heads);
                let d = self.value(*q).last_dim();
                let dh = d / heads;
                let scale = T::from_f64_lossy(1.0 / (dh as f64).sqrt());
                let (qd, kd, vd) = (
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                );
                let mut dq = vec![T::zero(); qd.len()];
                let mut dk = vec![T::zero(); kd.len()];
                let mut dv = vec![T::zero(); vd.len()];
                let mut dscore = vec![T::zero(); seq];
                for b in 0..batch {
                    for h in 0..heads {
                        let off = h * dh;
                        let pbase = (b * heads + h) * seq * seq;
                        for i in 0..seq {
                            let gi = &g[(b * seq + i) * d + off..][..dh];
                            let prow = &probs[pbase + i * seq..][..seq];
                            let mut dot = T::zero();
                            for j in 0..=i {
                                let vj = &vd[(b * seq + j) * d + off..][..dh];
                                let dp = gi.iter().zip(vj).map(|(&x, &y)| x * y).sum::<T>();
                                dscore[j] = dp;
                                dot += dp * prow[j];
                                let dvj = &mut dv[(b * seq + j) * d + off..][..dh];
                                for (o, &gg) in dvj.iter_mut().zip(gi) {
                                    *o += prow[j] * gg;
                                }
                            }
                            let qi_at = (b * seq + i) * d + off;
                            for j in 0..=i {
                                let ds = prow[j] * (dscore[j] - dot) * scale;
                                let kj_at = (b * seq + j) * d + off;
                                for c in 0..dh {
                                    dq[qi_at + c] += ds * kd[kj_at + c];
                                    dk[kj_at + c] += ds * qd[qi_at + c];
                                }
                            }
                        }
                    }
                }
                if wants(*q) {
                    send(*q, dq);
                }
                if wants(*k) {
                    send(*k, dk);
                }
                if wants(*v) {
                    send(*v, dv);
                }
            }
            Op::Gather { table, ids } => {
                let shape = self.shape(*table);
                let d = shape[1];
                let mut dt = vec![T::zero(); shape[0] * d];
                for (r, &id) in ids.iter().enumerate() {
                    let dst = &mut dt[id * d..(id + 1) * d];
                    for (o, &v) in dst.iter_mut().zip(&g[r * d..(r + 1) * d]) {
                        *o += v;
                    }
                }
                send(*table, dt);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let c = self.value(*logits).last_dim();
                let scale = g[0] / T::from_usize(targets.len()).unwrap();
                let mut dl: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (r, &y) in targets.iter().enumerate() {
                    dl[r * c + y] -= scale;
                }
                send(*logits, dl);
            }
            Op::MeanPool { x, groups } => {
                let t = self.value(*x);
                let (rows, d) = (t.rows(), t.last_dim());
                let seq = rows / groups;
                let inv = T::from_usize(seq).unwrap().recip();
                let mut dx = vec![T::zero(); t.numel()];
                for r in 0..rows {
                    let src = &g[(r / seq) * d..][..d];
                    for (o, &v) in dx[r * d..(r + 1) * d].iter_mut().zip(src) {
                        *o = v * inv;
                    }
                }
                send(*x, dx);
            }
            Op::Sum(x) => send(*x, vec![g[0]; self.value(*x).numel()]),
            Op::Reshape(x) => send(*x, g.to_vec()),
        }
    }
}
