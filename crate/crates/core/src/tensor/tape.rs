use super::kernels::{self, ConvGeom};
use super::{split_axis, Tensor};
use crate::error::{dim_err, Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Unary {
    Gelu,
    Relu,
    Sigmoid,
    Exp,
    Log,
    Sin,
    Square,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary(Binary, Var, Var),
    Scale(Var, f64),
    Unary(Unary, Var),
    Sum(Var),
    Mean(Var),
    Matmul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Linear { x: Var, w: Var, b: Option<Var>, rows: usize, d_in: usize, d_out: usize },
    BmmNt { a: Var, b: Var, g: usize, m: usize, k: usize, n: usize },
    Conv1d { input: Var, weight: Var, bias: Var, geom: ConvGeom },
    Reshape(Var),
    Permute { input: Var, perm: Vec<usize> },
    Narrow { input: Var, axis: usize, start: usize },
    Concat { inputs: Vec<Var>, axis: usize },
    IndexSelect { input: Var, indices: Vec<usize> },
    Repeat { input: Var, times: usize },
    MaxPool { input: Var, argmax: Vec<usize> },
    AvgPool { input: Var, axis: usize, k: usize },
    NormalizeLast(Var),
    Jsd { p: Var, q: Var, k: usize },
    MaskedNll { logits: Var, targets: Vec<usize>, allowed: Vec<bool>, n: usize },
    Time2Vec { times: Vec<f64>, omega: Var, phi: Var },
    Rbf { times: Vec<f64>, centers: Var, log_bw: Var },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Lower clamp applied inside the JSD logarithms.
pub(crate) const JSD_EPS: f64 = 1e-12;

/// Append-only record of a forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    detached: Vec<Tensor>,
    replay: Option<std::vec::IntoIter<Tensor>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Tape whose `detach` calls return `values` in order instead of the
    /// current operand values, so a stop-gradient target can be held fixed
    /// across finite-difference evaluations.
    pub fn with_detached(values: Vec<Tensor>) -> Self {
        Self { replay: Some(values.into_iter()), ..Self::default() }
    }

    /// Values produced by `detach` so far, in call order.
    pub fn detached_values(&self) -> &[Tensor] {
        &self.detached
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that takes part in differentiation when `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Copy of `v` cut from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let current = &self.nodes[v.0].value;
        let value = match self.replay.as_mut().and_then(|r| r.next()) {
            Some(t) if t.shape() == current.shape() => t,
            _ => current.clone(),
        };
        self.detached.push(value.clone());
        self.constant(value)
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

    /// Accumulated gradient of a leaf, if any was produced.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    // ---- elementwise -------------------------------------------------

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let shape = if va.shape() == vb.shape() || vb.len() == 1 {
            va.shape().to_vec()
        } else if va.len() == 1 {
            vb.shape().to_vec()
        } else {
            return Err(dim_err!(
                "{:?}: shapes {:?} and {:?} are not broadcast-compatible",
                kind,
                va.shape(),
                vb.shape()
            ));
        };
        let n: usize = shape.iter().product();
        let (da, db) = (va.data(), vb.data());
        let ai = |i: usize| if da.len() == 1 { da[0] } else { da[i] };
        let bi = |i: usize| if db.len() == 1 { db[0] } else { db[i] };
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let (x, y) = (ai(i), bi(i));
            out.push(match kind {
                Binary::Add => x + y,
                Binary::Sub => x - y,
                Binary::Mul => x * y,
                Binary::Div => x / y,
            });
        }
        if kind == Binary::Div && out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                op: "div",
                detail: format!("non-finite quotient at node {}", self.nodes.len()),
            });
        }
        Ok(self.push(Tensor::new(shape, out)?, Op::Binary(kind, a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a);
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|x| x * s).collect())
            .expect("shape preserved");
        self.push(out, Op::Scale(a, s), &[a])
    }

    fn unary(&mut self, kind: Unary, a: Var) -> Result<Var> {
        let v = self.value(a);
        if kind == Unary::Log {
            if let Some(pos) = v.data().iter().position(|&x| !(x > 0.0)) {
                return Err(Error::Numeric {
                    op: "log",
                    detail: format!(
                        "argument {} at flat index {pos} of node {}",
                        v.data()[pos],
                        a.0
                    ),
                });
            }
        }
        let f: fn(f64) -> f64 = match kind {
            Unary::Gelu => kernels::gelu,
            Unary::Relu => |x| x.max(0.0),
            Unary::Sigmoid => kernels::sigmoid,
            Unary::Exp => f64::exp,
            Unary::Log => f64::ln,
            Unary::Sin => f64::sin,
            Unary::Square => |x| x * x,
        };
        let data: Vec<f64> = v.data().iter().map(|&x| f(x)).collect();
        if kind == Unary::Exp {
            if let Some(pos) = data.iter().position(|x| !x.is_finite()) {
                return Err(Error::Numeric {
                    op: "exp",
                    detail: format!(
                        "overflow for argument {} at flat index {pos} of node {}",
                        v.data()[pos],
                        a.0
                    ),
                });
            }
        }
        let out = Tensor::new(v.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Unary(kind, a), &[a]))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(Unary::Gelu, a).expect("gelu is total")
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(Unary::Relu, a).expect("relu is total")
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Unary::Sigmoid, a).expect("sigmoid is total")
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(Unary::Sin, a).expect("sin is total")
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(Unary::Square, a).expect("square is total")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Log, a)
    }

    // ---- reductions ----------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.data().iter().sum::<f64>() / v.len().max(1) as f64;
        self.push(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    // ---- linear algebra ------------------------------------------------

    /// `a[m,k] @ b[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(dim_err!("matmul of {:?} and {:?}", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::Matmul { a, b, m, k, n }, &[a, b]))
    }

    /// Affine map `x[n,in] @ w[out,in]^T + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] {
            return Err(dim_err!("linear input {:?} with weight {:?}", sx, sw));
        }
        let (rows, d_in, d_out) = (sx[0], sx[1], sw[0]);
        let mut out = kernels::matmul_nt(self.value(x).data(), self.value(w).data(), rows, d_in, d_out);
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.len() != d_out {
                return Err(dim_err!("linear bias {:?} for {} outputs", bv.shape(), d_out));
            }
            for row in out.chunks_mut(d_out) {
                for (o, bb) in row.iter_mut().zip(bv.data()) {
                    *o += bb;
                }
            }
        }
        let t = Tensor::new(vec![rows, d_out], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(t, Op::Linear { x, w, b, rows, d_in, d_out }, &inputs))
    }

    /// Batched `a[g,m,k] @ b[g,n,k]^T`.
    pub fn bmm_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[2] {
            return Err(dim_err!("bmm_nt of {:?} and {:?}", sa, sb));
        }
        let (g, m, k, n) = (sa[0], sa[1], sa[2], sb[1]);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(g * m * n);
        for gi in 0..g {
            out.extend(kernels::matmul_nt(
                &da[gi * m * k..(gi + 1) * m * k],
                &db[gi * n * k..(gi + 1) * n * k],
                m,
                k,
                n,
            ));
        }
        let t = Tensor::new(vec![g, m, n], out)?;
        Ok(self.push(t, Op::BmmNt { a, b, g, m, k, n }, &[a, b]))
    }

    /// Dilated 1-D cross-correlation over `input[B,Cin,L]` with
    /// `weight[Cout,Cin,k]`, `bias[Cout]`, zero padding on both sides.
    pub fn conv1d(&mut self, input: Var, weight: Var, bias: Var, dilation: usize, padding: usize) -> Result<Var> {
        let (si, sw, sb) = (self.shape(input), self.shape(weight), self.shape(bias));
        if si.len() != 3 || sw.len() != 3 {
            return Err(dim_err!("conv1d input {:?} weight {:?}", si, sw));
        }
        if si[1] != sw[1] {
            return Err(dim_err!(
                "conv1d input has {} channels but weight expects {}",
                si[1],
                sw[1]
            ));
        }
        if sb != [sw[0]] {
            return Err(dim_err!("conv1d bias {:?} for {} output channels", sb, sw[0]));
        }
        if sw[2] == 0 || dilation == 0 {
            return Err(Error::Parameter("conv1d needs kernel >= 1 and dilation >= 1".into()));
        }
        let span = dilation * (sw[2] - 1);
        if si[2] + 2 * padding < span + 1 {
            return Err(dim_err!("conv1d input length {} too short for span {}", si[2], span + 1));
        }
        let geom = ConvGeom {
            batch: si[0],
            c_in: si[1],
            c_out: sw[0],
            len_in: si[2],
            len_out: si[2] + 2 * padding - span,
            kernel: sw[2],
            dilation,
            padding,
        };
        let out = kernels::conv1d_forward(
            &geom,
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
        );
        let t = Tensor::new(vec![geom.batch, geom.c_out, geom.len_out], out)?;
        Ok(self.push(t, Op::Conv1d { input, weight, bias, geom }, &[input, weight, bias]))
    }

    // ---- structural ----------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(a), &[a]))
    }

    /// Reorders axes so that output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(dim_err!("invalid permutation {:?} for {:?}", perm, shape));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let src = permute_source_index(&shape, perm);
        let data = self.value(a).data();
        let out: Vec<f64> = src.iter().map(|&i| data[i]).collect();
        let t = Tensor::new(out_shape, out)?;
        Ok(self.push(t, Op::Permute { input: a, perm: perm.to_vec() }, &[a]))
    }

    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a).narrow(axis, start, len)?;
        Ok(self.push(t, Op::Narrow { input: a, axis, start }, &[a]))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| dim_err!("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(dim_err!("concat axis {axis} for {:?}", base));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            let ok = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !ok {
                return Err(dim_err!("concat along {axis}: {:?} vs {:?}", s, base));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let t = self.value(*v);
                let d = t.shape()[axis];
                out.extend_from_slice(&t.data()[o * d * inner..(o + 1) * d * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::Concat { inputs: inputs.to_vec(), axis }, inputs))
    }

    /// Gathers entries along axis 0.
    pub fn index_select(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let v = self.value(a);
        let shape = v.shape();
        if shape.is_empty() {
            return Err(dim_err!("index_select on a scalar"));
        }
        let inner: usize = shape[1..].iter().product();
        let mut out = Vec::with_capacity(indices.len() * inner);
        for &i in indices {
            if i >= shape[0] {
                return Err(dim_err!("index {i} out of range for axis of size {}", shape[0]));
            }
            out.extend_from_slice(&v.data()[i * inner..(i + 1) * inner]);
        }
        let mut s = shape.to_vec();
        s[0] = indices.len();
        let t = Tensor::new(s, out)?;
        Ok(self.push(t, Op::IndexSelect { input: a, indices: indices.to_vec() }, &[a]))
    }

    /// Stacks `times` copies of `a` along a new leading axis.
    pub fn repeat(&mut self, a: Var, times: usize) -> Var {
        let v = self.value(a);
        let mut shape = vec![times];
        shape.extend_from_slice(v.shape());
        let mut out = Vec::with_capacity(times * v.len());
        for _ in 0..times {
            out.extend_from_slice(v.data());
        }
        let t = Tensor::new(shape, out).expect("consistent repeat");
        self.push(t, Op::Repeat { input: a, times }, &[a])
    }

    // ---- pooling -------------------------------------------------------

    /// Max pooling along `axis` with kernel = stride = `k`; the last window
    /// may be partial. Ties route to the first index.
    pub fn max_pool(&mut self, a: Var, axis: usize, k: usize) -> Result<Var> {
        if k < 1 {
            return Err(Error::Parameter("pooling kernel must be >= 1".into()));
        }
        let v = self.value(a);
        if axis >= v.ndim() {
            return Err(dim_err!("pool axis {axis} for {:?}", v.shape()));
        }
        let (outer, len, inner) = split_axis(v.shape(), axis);
        let out_len = len.div_ceil(k);
        let mut out = Vec::with_capacity(outer * out_len * inner);
        let mut argmax = Vec::with_capacity(outer * out_len * inner);
        let d = v.data();
        for o in 0..outer {
            for w in 0..out_len {
                let end = ((w + 1) * k).min(len);
                for i in 0..inner {
                    let mut best = o * len * inner + w * k * inner + i;
                    for t in w * k + 1..end {
                        let idx = o * len * inner + t * inner + i;
                        if d[idx] > d[best] {
                            best = idx;
                        }
                    }
                    out.push(d[best]);
                    argmax.push(best);
                }
            }
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = out_len;
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::MaxPool { input: a, argmax }, &[a]))
    }

    /// Average pooling along `axis`; a partial last window averages the
    /// entries it actually covers.
    pub fn avg_pool(&mut self, a: Var, axis: usize, k: usize) -> Result<Var> {
        if k < 1 {
            return Err(Error::Parameter("pooling kernel must be >= 1".into()));
        }
        let v = self.value(a);
        if axis >= v.ndim() {
            return Err(dim_err!("pool axis {axis} for {:?}", v.shape()));
        }
        let (outer, len, inner) = split_axis(v.shape(), axis);
        let out_len = len.div_ceil(k);
        let mut out = vec![0.0; outer * out_len * inner];
        let d = v.data();
        for o in 0..outer {
            for w in 0..out_len {
                let end = ((w + 1) * k).min(len);
                let cnt = (end - w * k) as f64;
                for i in 0..inner {
                    let mut s = 0.0;
                    for t in w * k..end {
                        s += d[o * len * inner + t * inner + i];
                    }
                    out[o * out_len * inner + w * inner + i] = s / cnt;
                }
            }
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = out_len;
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::AvgPool { input: a, axis, k }, &[a]))
    }

    /// Max pooling over the last axis of `[B,F,L]`.
    pub fn maxpool1d(&mut self, a: Var, k: usize) -> Result<Var> {
        let axis = self.shape(a).len().saturating_sub(1);
        self.max_pool(a, axis, k)
    }

    /// Average pooling over the last axis of `[B,F,L]`.
    pub fn avgpool1d(&mut self, a: Var, k: usize) -> Result<Var> {
        let axis = self.shape(a).len().saturating_sub(1);
        self.avg_pool(a, axis, k)
    }

    // ---- fused ops -----------------------------------------------------

    /// Divides every row (last axis) by its sum.
    pub fn normalize_last(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let k = *v.shape().last().ok_or_else(|| dim_err!("normalize on a scalar"))?;
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(k.max(1)) {
            let s: f64 = row.iter().sum();
            if !(s.abs() > 0.0) || !s.is_finite() {
                return Err(Error::Numeric {
                    op: "normalize",
                    detail: format!("row sum {s} at node {}", a.0),
                });
            }
            row.iter_mut().for_each(|x| *x /= s);
        }
        let t = Tensor::new(v.shape().to_vec(), out)?;
        Ok(self.push(t, Op::NormalizeLast(a), &[a]))
    }

    /// Row-wise Jensen-Shannon divergence of `p[M,K]` and `q[M,K]` (natural
    /// log, logarithm arguments clamped at 1e-12). Output shape `[M]`.
    pub fn jsd_rows(&mut self, p: Var, q: Var) -> Result<Var> {
        let (vp, vq) = (self.value(p), self.value(q));
        if vp.shape() != vq.shape() || vp.ndim() != 2 {
            return Err(dim_err!("jsd rows of {:?} and {:?}", vp.shape(), vq.shape()));
        }
        let (m, k) = (vp.shape()[0], vp.shape()[1]);
        let out: Vec<f64> = vp
            .data()
            .chunks(k.max(1))
            .zip(vq.data().chunks(k.max(1)))
            .take(m)
            .map(|(a, b)| jsd_clamped(a, b))
            .collect();
        let t = Tensor::new(vec![m], out)?;
        Ok(self.push(t, Op::Jsd { p, q, k }, &[p, q]))
    }

    /// Row-wise negative log-softmax at `targets[r]`, where the softmax runs
    /// over the entries of row `r` flagged in `allowed` only. Output `[R]`.
    pub fn masked_nll(&mut self, logits: Var, targets: &[usize], allowed: Vec<bool>) -> Result<Var> {
        let v = self.value(logits);
        if v.ndim() != 2 {
            return Err(dim_err!("masked_nll expects [R,N], got {:?}", v.shape()));
        }
        let (r, n) = (v.shape()[0], v.shape()[1]);
        if targets.len() != r || allowed.len() != r * n {
            return Err(dim_err!("masked_nll targets/mask do not match {:?}", v.shape()));
        }
        let d = v.data();
        let mut out = Vec::with_capacity(r);
        for row in 0..r {
            let tgt = targets[row];
            if tgt >= n || !allowed[row * n + tgt] {
                return Err(Error::Contract(format!("target {tgt} of row {row} is masked out")));
            }
            let lse = masked_lse(&d[row * n..(row + 1) * n], &allowed[row * n..(row + 1) * n]);
            out.push(lse - d[row * n + tgt]);
        }
        let t = Tensor::new(vec![r], out)?;
        Ok(self.push(
            t,
            Op::MaskedNll { logits, targets: targets.to_vec(), allowed, n },
            &[logits],
        ))
    }

    /// Time2Vec features: column 0 is `omega_0 t + phi_0`, columns `k >= 1`
    /// are `sin(omega_k t + phi_k)`. Output `[L,K]`.
    pub fn time2vec(&mut self, times: &[f64], omega: Var, phi: Var) -> Result<Var> {
        let (w, p) = (self.value(omega), self.value(phi));
        if w.ndim() != 1 || w.shape() != p.shape() {
            return Err(dim_err!("time2vec omega {:?} phi {:?}", w.shape(), p.shape()));
        }
        let k = w.len();
        let mut out = Vec::with_capacity(times.len() * k);
        for &t in times {
            for j in 0..k {
                let z = w.data()[j] * t + p.data()[j];
                out.push(if j == 0 { z } else { z.sin() });
            }
        }
        let t = Tensor::new(vec![times.len(), k], out)?;
        Ok(self.push(t, Op::Time2Vec { times: times.to_vec(), omega, phi }, &[omega, phi]))
    }

    /// Gaussian radial features `exp(-exp(log_bw_k) (t - c_k)^2)`. Output `[L,K]`.
    pub fn rbf_features(&mut self, times: &[f64], centers: Var, log_bw: Var) -> Result<Var> {
        let (c, g) = (self.value(centers), self.value(log_bw));
        if c.ndim() != 1 || c.shape() != g.shape() {
            return Err(dim_err!("rbf centers {:?} bandwidths {:?}", c.shape(), g.shape()));
        }
        let k = c.len();
        let mut out = Vec::with_capacity(times.len() * k);
        for &t in times {
            for j in 0..k {
                let d = t - c.data()[j];
                out.push((-g.data()[j].exp() * d * d).exp());
            }
        }
        let t = Tensor::new(vec![times.len(), k], out)?;
        Ok(self.push(t, Op::Rbf { times: times.to_vec(), centers, log_bw }, &[centers, log_bw]))
    }

    // ---- reverse pass --------------------------------------------------

    /// Accumulates d`loss`/d`leaf` into every leaf that requires gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::Contract("backward on an empty tape".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
        }
        for (idx, g) in grads.into_iter().enumerate() {
            let node = &mut self.nodes[idx];
            if let (Op::Leaf, true, Some(g)) = (&node.op, node.requires_grad, g) {
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(g),
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let node = &nodes[idx];
        let val = |v: Var| nodes[v.0].value.data();
        // Lazily allocated gradient slot for `v`, or None when `v` is constant.
        let slot = |v: Var, grads: &mut [Option<Vec<f64>>], f: &mut dyn FnMut(&mut [f64])| {
            if nodes[v.0].requires_grad {
                let n = nodes[v.0].value.len();
                let buf = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
                f(buf);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Binary(kind, a, b) => {
                let (da, db) = (val(*a), val(*b));
                let at = |d: &[f64], i: usize| if d.len() == 1 { d[0] } else { d[i] };
                for (v, other_is_b) in [(*a, true), (*b, false)] {
                    slot(v, grads, &mut |buf| {
                        let scalar = buf.len() == 1 && g.len() > 1;
                        for (i, gi) in g.iter().enumerate() {
                            let (x, y) = (at(da, i), at(db, i));
                            let d = match (kind, other_is_b) {
                                (Binary::Add, _) => 1.0,
                                (Binary::Sub, true) => 1.0,
                                (Binary::Sub, false) => -1.0,
                                (Binary::Mul, true) => y,
                                (Binary::Mul, false) => x,
                                (Binary::Div, true) => 1.0 / y,
                                (Binary::Div, false) => -x / (y * y),
                            };
                            let j = if scalar { 0 } else { i };
                            buf[j] += gi * d;
                        }
                    });
                }
            }
            Op::Scale(a, s) => slot(*a, grads, &mut |buf| axpy_into(buf, g, *s)),
            Op::Unary(kind, a) => {
                let x = val(*a);
                let y = node.value.data();
                slot(*a, grads, &mut |buf| {
                    for i in 0..buf.len() {
                        let d = match kind {
                            Unary::Gelu => kernels::gelu_grad(x[i]),
                            Unary::Relu => {
                                if x[i] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            Unary::Sigmoid => y[i] * (1.0 - y[i]),
                            Unary::Exp => y[i],
                            Unary::Log => 1.0 / x[i],
                            Unary::Sin => x[i].cos(),
                            Unary::Square => 2.0 * x[i],
                        };
                        buf[i] += g[i] * d;
                    }
                });
            }
            Op::Sum(a) => slot(*a, grads, &mut |buf| buf.iter_mut().for_each(|b| *b += g[0])),
            Op::Mean(a) => slot(*a, grads, &mut |buf| {
                let s = g[0] / buf.len().max(1) as f64;
                buf.iter_mut().for_each(|b| *b += s)
            }),
            Op::Matmul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                slot(*a, grads, &mut |buf| {
                    let ga = kernels::matmul_nt(g, val(*b), m, n, k);
                    axpy_into(buf, &ga, 1.0);
                });
                slot(*b, grads, &mut |buf| kernels::matmul_tn_acc(val(*a), g, m, k, n, buf));
            }
            Op::Linear { x, w, b, rows, d_in, d_out } => {
                let (rows, d_in, d_out) = (*rows, *d_in, *d_out);
                slot(*x, grads, &mut |buf| {
                    let gx = kernels::matmul(g, val(*w), rows, d_out, d_in);
                    axpy_into(buf, &gx, 1.0);
                });
                slot(*w, grads, &mut |buf| kernels::matmul_tn_acc(g, val(*x), rows, d_out, d_in, buf));
                if let Some(b) = b {
                    slot(*b, grads, &mut |buf| {
                        for row in g.chunks(d_out) {
                            axpy_into(buf, row, 1.0);
                        }
                    });
                }
            }
            Op::BmmNt { a, b, g: groups, m, k, n } => {
                let (groups, m, k, n) = (*groups, *m, *k, *n);
                slot(*a, grads, &mut |buf| {
                    let db = val(*b);
                    for gi in 0..groups {
                        let ga = kernels::matmul(&g[gi * m * n..(gi + 1) * m * n], &db[gi * n * k..(gi + 1) * n * k], m, n, k);
                        axpy_into(&mut buf[gi * m * k..(gi + 1) * m * k], &ga, 1.0);
                    }
                });
                slot(*b, grads, &mut |buf| {
                    let da = val(*a);
                    for gi in 0..groups {
                        kernels::matmul_tn_acc(
                            &g[gi * m * n..(gi + 1) * m * n],
                            &da[gi * m * k..(gi + 1) * m * k],
                            m,
                            n,
                            k,
                            &mut buf[gi * n * k..(gi + 1) * n * k],
                        );
                    }
                });
            }
            Op::Conv1d { input, weight, bias, geom } => {
                let (xi, wi) = (val(*input), val(*weight));
                slot(*input, grads, &mut |buf| {
                    kernels::conv1d_backward(geom, xi, wi, g, Some(buf), None, None)
                });
                slot(*weight, grads, &mut |buf| {
                    kernels::conv1d_backward(geom, xi, wi, g, None, Some(buf), None)
                });
                slot(*bias, grads, &mut |buf| {
                    kernels::conv1d_backward(geom, xi, wi, g, None, None, Some(buf))
                });
            }
            Op::Reshape(a) => slot(*a, grads, &mut |buf| axpy_into(buf, g, 1.0)),
            Op::Permute { input, perm } => {
                let src = permute_source_index(nodes[input.0].value.shape(), perm);
                slot(*input, grads, &mut |buf| {
                    for (o, &s) in src.iter().enumerate() {
                        buf[s] += g[o];
                    }
                });
            }
            Op::Narrow { input, axis, start } => {
                let in_shape = nodes[input.0].value.shape();
                let (outer, dim, inner) = split_axis(in_shape, *axis);
                let len = node.value.shape()[*axis];
                slot(*input, grads, &mut |buf| {
                    for o in 0..outer {
                        let base = o * dim * inner + start * inner;
                        axpy_into(&mut buf[base..base + len * inner], &g[o * len * inner..(o + 1) * len * inner], 1.0);
                    }
                });
            }
            Op::Concat { inputs, axis } => {
                let out_shape = node.value.shape();
                let (outer, total, inner) = split_axis(out_shape, *axis);
                let mut offset = 0;
                for v in inputs {
                    let d = nodes[v.0].value.shape()[*axis];
                    slot(*v, grads, &mut |buf| {
                        for o in 0..outer {
                            let src = o * total * inner + offset * inner;
                            axpy_into(&mut buf[o * d * inner..(o + 1) * d * inner], &g[src..src + d * inner], 1.0);
                        }
                    });
                    offset += d;
                }
            }
            Op::IndexSelect { input, indices } => {
                let inner: usize = nodes[input.0].value.shape()[1..].iter().product();
                slot(*input, grads, &mut |buf| {
                    for (r, &i) in indices.iter().enumerate() {
                        axpy_into(&mut buf[i * inner..(i + 1) * inner], &g[r * inner..(r + 1) * inner], 1.0);
                    }
                });
            }
            Op::Repeat { input, times } => slot(*input, grads, &mut |buf| {
                let n = buf.len();
                for t in 0..*times {
                    axpy_into(buf, &g[t * n..(t + 1) * n], 1.0);
                }
            }),
            Op::MaxPool { input, argmax } => slot(*input, grads, &mut |buf| {
                for (o, &src) in argmax.iter().enumerate() {
                    buf[src] += g[o];
                }
            }),
            Op::AvgPool { input, axis, k } => {
                let in_shape = nodes[input.0].value.shape();
                let (outer, len, inner) = split_axis(in_shape, *axis);
                let out_len = len.div_ceil(*k);
                slot(*input, grads, &mut |buf| {
                    for o in 0..outer {
                        for w in 0..out_len {
                            let end = ((w + 1) * k).min(len);
                            let cnt = (end - w * k) as f64;
                            for i in 0..inner {
                                let gv = g[o * out_len * inner + w * inner + i] / cnt;
                                for t in w * k..end {
                                    buf[o * len * inner + t * inner + i] += gv;
                                }
                            }
                        }
                    }
                });
            }
            Op::NormalizeLast(a) => {
                let x = val(*a);
                let y = node.value.data();
                let k = *node.value.shape().last().unwrap_or(&1);
                slot(*a, grads, &mut |buf| {
                    for r in 0..buf.len() / k.max(1) {
                        let rg = &g[r * k..(r + 1) * k];
                        let ry = &y[r * k..(r + 1) * k];
                        let s: f64 = x[r * k..(r + 1) * k].iter().sum();
                        let gy: f64 = rg.iter().zip(ry).map(|(a, b)| a * b).sum();
                        for j in 0..k {
                            buf[r * k + j] += (rg[j] - gy) / s;
                        }
                    }
                });
            }
            Op::Jsd { p, q, k } => {
                let (dp, dq) = (val(*p), val(*q));
                let k = *k;
                // d/dp_j = 0.5 [ln c(p_j) - ln c(m_j) + 1{p_j > eps} - 1{m_j > eps}]
                let part = |own: &[f64], other: &[f64], buf: &mut [f64]| {
                    for (r, gr) in g.iter().enumerate() {
                        for j in 0..k {
                            let i = r * k + j;
                            let x = own[i];
                            let mm = 0.5 * (own[i] + other[i]);
                            let ind = |v: f64| if v > JSD_EPS { 1.0 } else { 0.0 };
                            let d = 0.5
                                * (x.max(JSD_EPS).ln() - mm.max(JSD_EPS).ln() + ind(x) - ind(mm));
                            buf[i] += gr * d;
                        }
                    }
                };
                slot(*p, grads, &mut |buf| part(dp, dq, buf));
                slot(*q, grads, &mut |buf| part(dq, dp, buf));
            }
            Op::MaskedNll { logits, targets, allowed, n } => {
                let d = val(*logits);
                let n = *n;
                slot(*logits, grads, &mut |buf| {
                    for (r, &tgt) in targets.iter().enumerate() {
                        let row = &d[r * n..(r + 1) * n];
                        let mask = &allowed[r * n..(r + 1) * n];
                        let lse = masked_lse(row, mask);
                        for j in 0..n {
                            if mask[j] {
                                buf[r * n + j] += g[r] * (row[j] - lse).exp();
                            }
                        }
                        buf[r * n + tgt] -= g[r];
                    }
                });
            }
            Op::Time2Vec { times, omega, phi } => {
                let (w, p) = (val(*omega), val(*phi));
                let k = w.len();
                let deriv = |l: usize, j: usize| {
                    if j == 0 {
                        1.0
                    } else {
                        (w[j] * times[l] + p[j]).cos()
                    }
                };
                slot(*omega, grads, &mut |buf| {
                    for l in 0..times.len() {
                        for j in 0..k {
                            buf[j] += g[l * k + j] * deriv(l, j) * times[l];
                        }
                    }
                });
                slot(*phi, grads, &mut |buf| {
                    for l in 0..times.len() {
                        for j in 0..k {
                            buf[j] += g[l * k + j] * deriv(l, j);
                        }
                    }
                });
            }
            Op::Rbf { times, centers, log_bw } => {
                let (c, lg) = (val(*centers), val(*log_bw));
                let y = node.value.data();
                let k = c.len();
                slot(*centers, grads, &mut |buf| {
                    for l in 0..times.len() {
                        for j in 0..k {
                            let i = l * k + j;
                            buf[j] += g[i] * y[i] * 2.0 * lg[j].exp() * (times[l] - c[j]);
                        }
                    }
                });
                slot(*log_bw, grads, &mut |buf| {
                    for l in 0..times.len() {
                        for j in 0..k {
                            let i = l * k + j;
                            let d = times[l] - c[j];
                            buf[j] -= g[i] * y[i] * lg[j].exp() * d * d;
                        }
                    }
                });
            }
        }
    }
}

fn axpy_into(buf: &mut [f64], g: &[f64], s: f64) {
    kernels::axpy(s, g, buf);
}

/// Flat source index in the input for every flat output index of a permute.
fn permute_source_index(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let nd = shape.len();
    let mut in_strides = vec![1; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n: usize = shape.iter().product();
    let mut idx = vec![0usize; nd];
    let mut out = Vec::with_capacity(n);
    let mut src = 0usize;
    for _ in 0..n {
        out.push(src);
        for ax in (0..nd).rev() {
            idx[ax] += 1;
            src += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    out
}

fn masked_lse(row: &[f64], mask: &[bool]) -> f64 {
    let max = row
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .fold(f64::NEG_INFINITY, |a, (&x, _)| a.max(x));
    let s: f64 = row
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&x, _)| (x - max).exp())
        .sum();
    max + s.ln()
}

pub(crate) fn jsd_clamped(p: &[f64], q: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        let m = 0.5 * (a + b);
        let lm = m.max(JSD_EPS).ln();
        acc += a * (a.max(JSD_EPS).ln() - lm) + b * (b.max(JSD_EPS).ln() - lm);
    }
    0.5 * acc
}
