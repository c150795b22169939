use rand::Rng;

use super::kernels::{self, col2im, gemm, im2col, ConvGeom};
use super::{Real, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Relu(Var),
    Gelu(Var),
    Reshape(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    Conv2d {
        input: Var,
        kernels: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        batch: usize,
        cols: Vec<T>,
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
    CrossEntropy {
        logits: Var,
        labels: Vec<Option<usize>>,
        probs: Vec<T>,
        count: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Records operations in creation order, which is always a topological
/// order of the computation graph.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, shape: &[usize], delta: &[T]) {
    match slot {
        Some(g) => g
            .data_mut()
            .iter_mut()
            .zip(delta)
            .for_each(|(a, b)| *a += *b),
        None => {
            *slot = Some(Tensor::new(shape.to_vec(), delta.to_vec()).expect("grad shape"));
        }
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, name: &'static str) -> Result<Var> {
        value.ensure_finite(name)?;
        let requires_grad = match &op {
            Op::Leaf => false,
            _ => self.inputs(&op).iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs(&self, op: &Op<T>) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::AddRow(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Transpose(x)
            | Op::Scale(x, _)
            | Op::Sum(x)
            | Op::Relu(x)
            | Op::Gelu(x)
            | Op::Reshape(x) => vec![*x],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::GatherRows { x, .. } | Op::Dropout { x, .. } => vec![*x],
            Op::ConcatRows(parts) => parts.clone(),
            Op::Conv2d {
                input,
                kernels,
                bias,
                ..
            } => {
                let mut v = vec![*input, *kernels];
                v.extend(bias.iter().copied());
                v
            }
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }

    /// Records a leaf value. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` call, if `v` was on a path to the loss.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Like [`Tape::grad`] but yields zeros for values off the loss path.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor<T> {
        self.grad(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.shape(v)).expect("valid shape"))
    }

    /// Attention weights `[batch, heads, seq, seq]` recorded by [`Tape::attention`].
    pub fn attention_weights(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let out = av.matmul(bv)?;
        self.push(out, Op::MatMul(a, b), "matmul")
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 {
            return Err(TensorError::InvalidShape {
                shape: xv.shape().to_vec(),
                reason: "transpose expects rank 2".into(),
            });
        }
        let (r, c) = (xv.shape()[0], xv.shape()[1]);
        let src = xv.data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let out = Tensor::new(vec![c, r], out)?;
        self.push(out, Op::Transpose(x), "transpose")
    }

    fn zip_same(&self, a: Var, b: Var, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(mismatch(op, av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "add", |x, y| x + y)?;
        self.push(out, Op::Add(a, b), "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "mul", |x, y| x * y)?;
        self.push(out, Op::Mul(a, b), "mul")
    }

    /// Adds a `[d]` vector to every row of a `[..., d]` tensor.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (xv, rv) = (self.value(x), self.value(row));
        let d = xv.last_dim();
        if rv.len() != d {
            return Err(mismatch("add_row", xv.shape(), rv.shape()));
        }
        let r = rv.data();
        let data = xv
            .data()
            .chunks(d)
            .flat_map(|chunk| chunk.iter().zip(r).map(|(a, b)| *a + *b))
            .collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(out, Op::AddRow(x, row), "add_row")
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        let xv = self.value(x);
        let out = Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|v| *v * s).collect())?;
        self.push(out, Op::Scale(x, s), "scale")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x), "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = T::from_usize(self.value(x).len()).expect("len fits");
        let s = self.sum(x)?;
        self.scale(s, T::one() / n)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let out = Tensor::new(
            xv.shape().to_vec(),
            xv.data().iter().map(|v| v.max(T::zero())).collect(),
        )?;
        self.push(out, Op::Relu(x), "relu")
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let out = Tensor::new(
            xv.shape().to_vec(),
            xv.data().iter().map(|v| kernels::gelu(*v)).collect(),
        )?;
        self.push(out, Op::Gelu(x), "gelu")
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        self.push(out, Op::Reshape(x), "reshape")
    }

    /// Normalizes over the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        let (gv, bv) = (self.value(gamma), self.value(beta));
        if gv.len() != d || bv.len() != d {
            return Err(mismatch("layer_norm", xv.shape(), gv.shape()));
        }
        let dn = T::from_usize(d).expect("d fits");
        let rows = xv.rows();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.len()];
        for r in 0..rows {
            let row = xv.row(r);
            let mu = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|v| (*v - mu) * (*v - mu)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mu) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            "layer_norm",
        )
    }

    /// Selects rows (over the last axis) of `x` in the given order.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (rows, d) = (xv.rows(), xv.last_dim());
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= rows {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_rows",
                    index: i,
                    extent: rows,
                });
            }
            out.extend_from_slice(xv.row(i));
        }
        let out = Tensor::new(vec![idx.len(), d], out)?;
        self.push(
            out,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            "gather_rows",
        )
    }

    /// Stacks rank-2 tensors of equal width along the row axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Invalid("concat_rows of nothing".into()))?;
        let d = self.value(*first).last_dim();
        let mut out = Vec::new();
        for p in parts {
            let pv = self.value(*p);
            if pv.last_dim() != d {
                return Err(mismatch("concat_rows", self.value(*first).shape(), pv.shape()));
            }
            out.extend_from_slice(pv.data());
        }
        let rows = out.len() / d;
        let out = Tensor::new(vec![rows, d], out)?;
        self.push(out, Op::ConcatRows(parts.to_vec()), "concat_rows")
    }

    /// Inverted dropout. Returns `x` untouched when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if p <= 0.0 {
            return Ok(x);
        }
        if p >= 1.0 {
            return Err(TensorError::Invalid(format!("dropout probability {p} must be < 1")));
        }
        let keep = T::from_f64_lossy(1.0 / (1.0 - p));
        let xv = self.value(x);
        let mask: Vec<T> = (0..xv.len())
            .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
            .collect();
        let out = Tensor::new(
            xv.shape().to_vec(),
            xv.data().iter().zip(&mask).map(|(a, m)| *a * *m).collect(),
        )?;
        self.push(out, Op::Dropout { x, mask }, "dropout")
    }

    /// 2-D convolution of `[cin,h,w]` or `[n,cin,h,w]` input with
    /// `[cout,cin,k,k]` kernels and an optional `[cout]` bias.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernels: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let iv = self.value(input);
        let kv = self.value(kernels);
        let (batch, cin, h, w, batched) = match iv.shape() {
            [c, h, w] => (1, *c, *h, *w, false),
            [n, c, h, w] => (*n, *c, *h, *w, true),
            s => {
                return Err(TensorError::InvalidShape {
                    shape: s.to_vec(),
                    reason: "conv2d input must be rank 3 or 4".into(),
                })
            }
        };
        let (cout, k) = match kv.shape() {
            [co, ci, k1, k2] if *ci == cin && k1 == k2 => (*co, *k1),
            s => return Err(mismatch("conv2d", iv.shape(), s)),
        };
        if let Some(b) = bias {
            if self.value(b).len() != cout {
                return Err(mismatch("conv2d bias", kv.shape(), self.value(b).shape()));
            }
        }
        let ho = kernels::conv_output_extent(h, k, stride, pad)?;
        let wo = kernels::conv_output_extent(w, k, stride, pad)?;
        let geom = ConvGeom {
            cin,
            h,
            w,
            k,
            stride,
            pad,
            ho,
            wo,
        };
        let (crow, ccol) = (geom.col_rows(), geom.col_cols());
        let mut cols = vec![T::zero(); batch * crow * ccol];
        let mut out = vec![T::zero(); batch * cout * ccol];
        let img_len = cin * h * w;
        for n in 0..batch {
            let c = &mut cols[n * crow * ccol..(n + 1) * crow * ccol];
            im2col(&geom, &iv.data()[n * img_len..(n + 1) * img_len], c);
            let o = &mut out[n * cout * ccol..(n + 1) * cout * ccol];
            gemm(cout, crow, ccol, kv.data(), false, c, false, o, false);
            if let Some(b) = bias {
                let bd = self.value(b).data();
                for (oc, chunk) in o.chunks_mut(ccol).enumerate() {
                    chunk.iter_mut().for_each(|v| *v += bd[oc]);
                }
            }
        }
        let shape = if batched {
            vec![batch, cout, ho, wo]
        } else {
            vec![cout, ho, wo]
        };
        let out = Tensor::new(shape, out)?;
        self.push(
            out,
            Op::Conv2d {
                input,
                kernels,
                bias,
                geom,
                batch,
                cols,
            },
            "conv2d",
        )
    }

    /// Multi-head scaled dot-product attention over `batch` sequences of
    /// length `seq`, packed as `[batch*seq, d]`. `key_mask[b*seq + j]` marks
    /// key `j` of sequence `b` as attendable; masked keys get exactly zero
    /// weight.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        heads: usize,
        key_mask: &[bool],
    ) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        if qv.shape() != kv.shape() || qv.shape() != vv.shape() || qv.rank() != 2 {
            return Err(mismatch("attention", qv.shape(), kv.shape()));
        }
        let (rows, d) = (qv.shape()[0], qv.shape()[1]);
        if heads == 0 || d % heads != 0 {
            return Err(TensorError::HeadsMismatch { width: d, heads });
        }
        if batch == 0 || rows % batch != 0 || key_mask.len() != rows {
            return Err(TensorError::Invalid(format!(
                "attention: {rows} rows do not split into {batch} sequences with a {}-entry mask",
                key_mask.len()
            )));
        }
        let seq = rows / batch;
        let dh = d / heads;
        let scale = T::one() / T::from_usize(dh).expect("dh fits").sqrt();
        let mut probs = vec![T::zero(); batch * heads * seq * seq];
        let mut out = vec![T::zero(); rows * d];
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        let mut scores = vec![T::zero(); seq];
        for b in 0..batch {
            let mask = &key_mask[b * seq..(b + 1) * seq];
            for h in 0..heads {
                let off = h * dh;
                for i in 0..seq {
                    let qrow = &qd[(b * seq + i) * d + off..(b * seq + i) * d + off + dh];
                    let mut max = T::neg_infinity();
                    for j in 0..seq {
                        if !mask[j] {
                            continue;
                        }
                        let krow = &kd[(b * seq + j) * d + off..(b * seq + j) * d + off + dh];
                        let s = qrow.iter().zip(krow).map(|(a, c)| *a * *c).sum::<T>() * scale;
                        scores[j] = s;
                        max = max.max(s);
                    }
                    if max == T::neg_infinity() {
                        continue;
                    }
                    let p = &mut probs[((b * heads + h) * seq + i) * seq..][..seq];
                    let mut z = T::zero();
                    for j in 0..seq {
                        if mask[j] {
                            let e = (scores[j] - max).exp();
                            p[j] = e;
                            z += e;
                        }
                    }
                    let orow = &mut out[(b * seq + i) * d + off..(b * seq + i) * d + off + dh];
                    for j in 0..seq {
                        if !mask[j] {
                            continue;
                        }
                        p[j] /= z;
                        let vrow = &vd[(b * seq + j) * d + off..(b * seq + j) * d + off + dh];
                        for (o, x) in orow.iter_mut().zip(vrow) {
                            *o += p[j] * *x;
                        }
                    }
                }
            }
        }
        let out = Tensor::new(vec![rows, d], out)?;
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            },
            "attention",
        )
    }

    /// Mean softmax cross-entropy over rows whose label differs from
    /// `ignore_index`. Yields 0 when every row is ignored.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[i64], ignore_index: i64) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rank() != 2 || lv.shape()[0] != labels.len() {
            return Err(mismatch("cross_entropy", lv.shape(), &[labels.len()]));
        }
        let classes = lv.shape()[1];
        let mut parsed = Vec::with_capacity(labels.len());
        for &l in labels {
            if l == ignore_index {
                parsed.push(None);
            } else if l < 0 || l as usize >= classes {
                return Err(TensorError::LabelOutOfRange {
                    label: l.max(0) as usize,
                    classes,
                });
            } else {
                parsed.push(Some(l as usize));
            }
        }
        let mut probs = vec![T::zero(); lv.len()];
        let mut total = T::zero();
        let mut count = 0usize;
        for (r, label) in parsed.iter().enumerate() {
            let row = lv.row(r);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|x| (*x - max).exp()).sum();
            let logz = z.ln() + max;
            for (j, x) in row.iter().enumerate() {
                probs[r * classes + j] = (*x - logz).exp();
            }
            if let Some(l) = label {
                total += logz - row[*l];
                count += 1;
            }
        }
        let loss = if count == 0 {
            T::zero()
        } else {
            total / T::from_usize(count).expect("count fits")
        };
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: parsed,
                probs,
                count,
            },
            "cross_entropy",
        )
    }

    /// Populates gradients of `loss` with respect to every value that
    /// requires them. Previous gradients are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lshape = self.shape(loss).to_vec();
        if lshape.iter().product::<usize>() != 1 {
            return Err(TensorError::NonScalarLoss(lshape));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(lshape, vec![T::one()])?);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                g.ensure_finite("backward")
                    .map_err(|_| TensorError::NonFinite { op: "backward", index: i })?;
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let gd = g.data();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.needs(*a) {
                    let mut da = vec![T::zero(); m * k];
                    gemm(m, n, k, gd, false, bv.data(), true, &mut da, false);
                    accumulate(&mut grads[a.0], av.shape(), &da);
                }
                if self.needs(*b) {
                    let mut db = vec![T::zero(); k * n];
                    gemm(k, m, n, av.data(), true, gd, false, &mut db, false);
                    accumulate(&mut grads[b.0], bv.shape(), &db);
                }
            }
            Op::Transpose(x) => {
                let xs = self.shape(*x);
                let (r, c) = (xs[0], xs[1]);
                let mut dx = vec![T::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] = gd[j * r + i];
                    }
                }
                accumulate(&mut grads[x.0], xs, &dx);
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.needs(*v) {
                        accumulate(&mut grads[v.0], self.shape(*v), gd);
                    }
                }
            }
            Op::AddRow(x, row) => {
                if self.needs(*x) {
                    accumulate(&mut grads[x.0], self.shape(*x), gd);
                }
                if self.needs(*row) {
                    let d = self.value(*row).len();
                    let mut dr = vec![T::zero(); d];
                    for chunk in gd.chunks(d) {
                        dr.iter_mut().zip(chunk).for_each(|(a, b)| *a += *b);
                    }
                    accumulate(&mut grads[row.0], self.shape(*row), &dr);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let da: Vec<T> = gd.iter().zip(bv.data()).map(|(g, y)| *g * *y).collect();
                    accumulate(&mut grads[a.0], av.shape(), &da);
                }
                if self.needs(*b) {
                    let db: Vec<T> = gd.iter().zip(av.data()).map(|(g, x)| *g * *x).collect();
                    accumulate(&mut grads[b.0], bv.shape(), &db);
                }
            }
            Op::Scale(x, s) => {
                let dx: Vec<T> = gd.iter().map(|g| *g * *s).collect();
                accumulate(&mut grads[x.0], self.shape(*x), &dx);
            }
            Op::Sum(x) => {
                let dx = vec![gd[0]; self.value(*x).len()];
                accumulate(&mut grads[x.0], self.shape(*x), &dx);
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let dx: Vec<T> = gd
                    .iter()
                    .zip(xv.data())
                    .map(|(g, v)| if *v > T::zero() { *g } else { T::zero() })
                    .collect();
                accumulate(&mut grads[x.0], xv.shape(), &dx);
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let dx: Vec<T> = gd
                    .iter()
                    .zip(xv.data())
                    .map(|(g, v)| *g * kernels::gelu_grad(*v))
                    .collect();
                accumulate(&mut grads[x.0], xv.shape(), &dx);
            }
            Op::Reshape(x) => accumulate(&mut grads[x.0], self.shape(*x), gd),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = self.value(*gamma).len();
                let gam = self.value(*gamma).data();
                let dn = T::from_usize(d).expect("d fits");
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); gd.len()];
                    for (r, rs) in rstd.iter().enumerate() {
                        let gr = &gd[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..d {
                            let dh = gr[j] * gam[j];
                            s1 += dh;
                            s2 += dh * hr[j];
                        }
                        for j in 0..d {
                            let dh = gr[j] * gam[j];
                            dx[r * d + j] = *rs / dn * (dn * dh - s1 - hr[j] * s2);
                        }
                    }
                    accumulate(&mut grads[x.0], self.shape(*x), &dx);
                }
                if self.needs(*gamma) || self.needs(*beta) {
                    let mut dg = vec![T::zero(); d];
                    let mut db = vec![T::zero(); d];
                    for (gr, hr) in gd.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] += gr[j] * hr[j];
                            db[j] += gr[j];
                        }
                    }
                    if self.needs(*gamma) {
                        accumulate(&mut grads[gamma.0], self.shape(*gamma), &dg);
                    }
                    if self.needs(*beta) {
                        accumulate(&mut grads[beta.0], self.shape(*beta), &db);
                    }
                }
            }
            Op::GatherRows { x, idx } => {
                let xv = self.value(*x);
                let d = xv.last_dim();
                let mut dx = vec![T::zero(); xv.len()];
                for (r, &src) in idx.iter().enumerate() {
                    dx[src * d..(src + 1) * d]
                        .iter_mut()
                        .zip(&gd[r * d..(r + 1) * d])
                        .for_each(|(a, b)| *a += *b);
                }
                accumulate(&mut grads[x.0], xv.shape(), &dx);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    if self.needs(*p) {
                        accumulate(&mut grads[p.0], self.shape(*p), &gd[off..off + n]);
                    }
                    off += n;
                }
            }
            Op::Dropout { x, mask } => {
                let dx: Vec<T> = gd.iter().zip(mask).map(|(g, m)| *g * *m).collect();
                accumulate(&mut grads[x.0], self.shape(*x), &dx);
            }
            Op::Conv2d {
                input,
                kernels,
                bias,
                geom,
                batch,
                cols,
            } => {
                let kv = self.value(*kernels);
                let cout = kv.shape()[0];
                let (crow, ccol) = (geom.col_rows(), geom.col_cols());
                let img_len = geom.cin * geom.h * geom.w;
                let mut dk = vec![T::zero(); kv.len()];
                let mut din = vec![T::zero(); batch * img_len];
                let mut dcols = vec![T::zero(); crow * ccol];
                let mut db = vec![T::zero(); cout];
                for n in 0..*batch {
                    let go = &gd[n * cout * ccol..(n + 1) * cout * ccol];
                    let c = &cols[n * crow * ccol..(n + 1) * crow * ccol];
                    if self.needs(*kernels) {
                        gemm(cout, ccol, crow, go, false, c, true, &mut dk, true);
                    }
                    if self.needs(*input) {
                        gemm(crow, cout, ccol, kv.data(), true, go, false, &mut dcols, false);
                        col2im(geom, &dcols, &mut din[n * img_len..(n + 1) * img_len]);
                    }
                    for (oc, chunk) in go.chunks(ccol).enumerate() {
                        db[oc] += chunk.iter().copied().sum::<T>();
                    }
                }
                if self.needs(*kernels) {
                    accumulate(&mut grads[kernels.0], kv.shape(), &dk);
                }
                if self.needs(*input) {
                    accumulate(&mut grads[input.0], self.shape(*input), &din);
                }
                if let Some(b) = bias {
                    if self.needs(*b) {
                        accumulate(&mut grads[b.0], self.shape(*b), &db);
                    }
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
                let (qd, kd, vd) = (
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                );
                let d = self.value(*q).last_dim();
                let (seq, heads) = (*seq, *heads);
                let dh = d / heads;
                let scale = T::one() / T::from_usize(dh).expect("dh fits").sqrt();
                let mut dq = vec![T::zero(); qd.len()];
                let mut dk = vec![T::zero(); kd.len()];
                let mut dv = vec![T::zero(); vd.len()];
                let mut dp = vec![T::zero(); seq];
                for b in 0..*batch {
                    for h in 0..heads {
                        let off = h * dh;
                        let row = |t: usize| (b * seq + t) * d + off;
                        for i in 0..seq {
                            let p = &probs[((b * heads + h) * seq + i) * seq..][..seq];
                            let go = &gd[row(i)..row(i) + dh];
                            let mut dot = T::zero();
                            for j in 0..seq {
                                if p[j] == T::zero() {
                                    dp[j] = T::zero();
                                    continue;
                                }
                                let vrow = &vd[row(j)..row(j) + dh];
                                dp[j] = go.iter().zip(vrow).map(|(a, c)| *a * *c).sum();
                                dot += dp[j] * p[j];
                                for (t, gv) in go.iter().enumerate() {
                                    dv[row(j) + t] += p[j] * *gv;
                                }
                            }
                            for j in 0..seq {
                                if p[j] == T::zero() {
                                    continue;
                                }
                                let ds = p[j] * (dp[j] - dot) * scale;
                                for t in 0..dh {
                                    dq[row(i) + t] += ds * kd[row(j) + t];
                                    dk[row(j) + t] += ds * qd[row(i) + t];
                                }
                            }
                        }
                    }
                }
                for (var, delta) in [(q, dq), (k, dk), (v, dv)] {
                    if self.needs(*var) {
                        accumulate(&mut grads[var.0], self.shape(*var), &delta);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
                count,
            } => {
                if *count == 0 {
                    return Ok(());
                }
                let classes = self.value(*logits).last_dim();
                let scale = gd[0] / T::from_usize(*count).expect("count fits");
                let mut dl = vec![T::zero(); probs.len()];
                for (r, label) in labels.iter().enumerate() {
                    let Some(l) = label else { continue };
                    for j in 0..classes {
                        let onehot = if j == *l { T::one() } else { T::zero() };
                        dl[r * classes + j] = (probs[r * classes + j] - onehot) * scale;
                    }
                }
                accumulate(&mut grads[logits.0], self.shape(*logits), &dl);
            }
        }
        Ok(())
    }
}
