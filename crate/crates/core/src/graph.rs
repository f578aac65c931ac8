//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its nodes. Calling
//! [`Graph::backward`] on a scalar node walks the tape in reverse and returns
//! the gradient of that scalar with respect to every node that requires one.
//!
//! Shape errors inside the engine are programming errors and panic; the model
//! layers validate user-facing shapes before they reach the tape.

use crate::tensor::Tensor;
use crate::wavelet;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Sigmoid(Var),
    Silu(Var),
    Sqrt(Var),
    Square(Var),
    Abs(Var),
    MatMul(Var, Var),
    TransposeLast(Var),
    SoftmaxLast(Var),
    LogSoftmaxLast(Var),
    SumAxis(Var, usize),
    SumAll(Var),
    Reshape(Var),
    SliceLast(Var, usize),
    ConcatLast(Vec<Var>),
    StackLast(Vec<Var>),
    SelectAxis1(Var, usize),
    StackAxis1(Vec<Var>),
    CausalMa(Var, usize),
    WaveAnalysis(Var, Var),
    WaveSynthesis(Var, Var),
    Qmf(Var),
    WaveletReg(Var),
    BceLogits(Var, Tensor),
    NllRows(Var, Vec<usize>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Grads(Vec<Option<Tensor>>);

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.0[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.0[v.0].take()
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

struct Broadcast {
    out_shape: Vec<usize>,
    a_strides: Vec<usize>,
    b_strides: Vec<usize>,
}

fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

impl Broadcast {
    fn new(a: &[usize], b: &[usize]) -> Self {
        assert_eq!(a.len(), b.len(), "broadcast needs equal rank: {a:?} vs {b:?}");
        let out_shape: Vec<usize> = a
            .iter()
            .zip(b)
            .map(|(&x, &y)| {
                assert!(
                    x == y || x == 1 || y == 1,
                    "shapes {a:?} and {b:?} do not broadcast"
                );
                x.max(y)
            })
            .collect();
        let masked = |shape: &[usize]| {
            contiguous_strides(shape)
                .into_iter()
                .zip(shape)
                .map(|(s, &d)| if d == 1 { 0 } else { s })
                .collect::<Vec<_>>()
        };
        Self {
            a_strides: masked(a),
            b_strides: masked(b),
            out_shape,
        }
    }

    fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let rank = self.out_shape.len();
        let n: usize = self.out_shape.iter().product();
        if n == 0 {
            return;
        }
        let mut idx = vec![0usize; rank];
        let (mut ia, mut ib) = (0usize, 0usize);
        for o in 0..n {
            f(o, ia, ib);
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                ia += self.a_strides[ax];
                ib += self.b_strides[ax];
                if idx[ax] < self.out_shape[ax] {
                    break;
                }
                ia -= self.a_strides[ax] * idx[ax];
                ib -= self.b_strides[ax] * idx[ax];
                idx[ax] = 0;
            }
        }
    }
}

/// C (m×n) += A (m×k) · B (k×n) with arbitrary row/column strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    c: &mut [f64],
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    // SAFETY: callers pass slices whose extents cover the strided m×k, k×n and
    // m×n (row-major, contiguous) regions.
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
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A leaf that does not receive gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf that receives gradients.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            return Tensor::new(ta.shape().to_vec(), data);
        }
        let bc = Broadcast::new(ta.shape(), tb.shape());
        let mut out = vec![0.0; bc.out_shape.iter().product()];
        let (da, db) = (ta.data(), tb.data());
        bc.for_each(|o, i, j| out[o] = f(da[i], db[j]));
        Tensor::new(bc.out_shape, out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let t = self.binary(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let t = self.binary(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let t = self.binary(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Mul(a, b), rg)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let t = self.binary(a, b, |x, y| x / y);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Div(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, c), rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|x| x + c);
        let rg = self.rg(a);
        self.push(t, Op::AddScalar(a), rg)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(t, op, rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Silu(a), |x| x * sigmoid(x))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sqrt(a), f64::sqrt)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Op::Abs(a), f64::abs)
    }

    /// Batched matrix product over the last two axes. `b` is either rank 2
    /// (shared across the batch) or has the same leading axes as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        assert!(sa.len() >= 2 && sb.len() >= 2, "matmul needs rank >= 2");
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        assert_eq!(k, k2, "matmul inner dims {sa:?} x {sb:?}");
        let mut out_shape = sa[..sa.len() - 2].to_vec();
        out_shape.extend([m, n]);
        let mut out = vec![0.0; out_shape.iter().product()];
        if sb.len() == 2 {
            let rows = ta.numel() / k.max(1);
            gemm(rows, k, n, ta.data(), k as isize, 1, tb.data(), n as isize, 1, &mut out);
        } else {
            assert_eq!(sa[..sa.len() - 2], sb[..sb.len() - 2], "matmul batch dims");
            let batch: usize = sa[..sa.len() - 2].iter().product();
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &ta.data()[i * m * k..],
                    k as isize,
                    1,
                    &tb.data()[i * k * n..],
                    n as isize,
                    1,
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(out_shape, out), Op::MatMul(a, b), rg)
    }

    pub fn transpose_last(&mut self, a: Var) -> Var {
        let t = transpose_last(self.value(a));
        let rg = self.rg(a);
        self.push(t, Op::TransposeLast(a), rg)
    }

    pub fn softmax_last(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let n = *t.shape().last().unwrap();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(n) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let t = Tensor::new(t.shape().to_vec(), out);
        let rg = self.rg(a);
        self.push(t, Op::SoftmaxLast(a), rg)
    }

    pub fn log_softmax_last(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let n = *t.shape().last().unwrap();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(n) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let t = Tensor::new(t.shape().to_vec(), out);
        let rg = self.rg(a);
        self.push(t, Op::LogSoftmaxLast(a), rg)
    }

    /// Sum over one axis, keeping it with length 1.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Var {
        let t = self.value(a);
        let shape = t.shape();
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = vec![0.0; outer * inner];
        let d = t.data();
        for o in 0..outer {
            for l in 0..len {
                let src = &d[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (dst, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *dst += s;
                }
            }
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = 1;
        let rg = self.rg(a);
        self.push(Tensor::new(out_shape, out), Op::SumAxis(a, axis), rg)
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Var {
        let n = self.shape(a)[axis] as f64;
        let s = self.sum_axis(a, axis);
        self.scale(s, 1.0 / n)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let t = self.value(a).clone().reshape(shape);
        let rg = self.rg(a);
        self.push(t, Op::Reshape(a), rg)
    }

    /// Columns `start..start + len` of the last axis.
    pub fn slice_last(&mut self, a: Var, start: usize, len: usize) -> Var {
        let t = self.value(a);
        let n = *t.shape().last().unwrap();
        assert!(start + len <= n, "slice {start}+{len} beyond {n}");
        let mut out = Vec::with_capacity(t.numel() / n * len);
        for row in t.data().chunks(n) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let mut shape = t.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let rg = self.rg(a);
        self.push(Tensor::new(shape, out), Op::SliceLast(a, start), rg)
    }

    pub fn concat_last(&mut self, parts: &[Var]) -> Var {
        let first = self.shape(parts[0]).to_vec();
        let lead = &first[..first.len() - 1];
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let s = self.shape(p);
                assert_eq!(&s[..s.len() - 1], lead, "concat leading dims");
                *s.last().unwrap()
            })
            .collect();
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor::new(shape, out), Op::ConcatLast(parts.to_vec()), rg)
    }

    /// Stack equally shaped tensors along a new trailing axis.
    pub fn stack_last(&mut self, parts: &[Var]) -> Var {
        let shape = self.shape(parts[0]).to_vec();
        let n = parts.len();
        let numel: usize = shape.iter().product();
        let mut out = vec![0.0; numel * n];
        for (j, &p) in parts.iter().enumerate() {
            assert_eq!(self.shape(p), &shape[..], "stack shapes");
            for (i, v) in self.value(p).data().iter().enumerate() {
                out[i * n + j] = *v;
            }
        }
        let mut out_shape = shape;
        out_shape.push(n);
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor::new(out_shape, out), Op::StackLast(parts.to_vec()), rg)
    }

    /// `a[:, index, ...]` for a tensor of rank >= 2.
    pub fn select_axis1(&mut self, a: Var, index: usize) -> Var {
        let t = self.value(a);
        let shape = t.shape();
        let (b, len) = (shape[0], shape[1]);
        assert!(index < len);
        let inner: usize = shape[2..].iter().product();
        let mut out = Vec::with_capacity(b * inner);
        for i in 0..b {
            let off = (i * len + index) * inner;
            out.extend_from_slice(&t.data()[off..off + inner]);
        }
        let mut out_shape = vec![b];
        out_shape.extend_from_slice(&shape[2..]);
        let rg = self.rg(a);
        self.push(Tensor::new(out_shape, out), Op::SelectAxis1(a, index), rg)
    }

    /// Inverse of [`Graph::select_axis1`]: stack along a new axis 1.
    pub fn stack_axis1(&mut self, parts: &[Var]) -> Var {
        let shape = self.shape(parts[0]).to_vec();
        let b = shape[0];
        let inner: usize = shape[1..].iter().product();
        let len = parts.len();
        let mut out = vec![0.0; b * len * inner];
        for (t, &p) in parts.iter().enumerate() {
            assert_eq!(self.shape(p), &shape[..], "stack shapes");
            let d = self.value(p).data();
            for i in 0..b {
                out[(i * len + t) * inner..(i * len + t + 1) * inner]
                    .copy_from_slice(&d[i * inner..(i + 1) * inner]);
            }
        }
        let mut out_shape = vec![b, len];
        out_shape.extend_from_slice(&shape[1..]);
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor::new(out_shape, out), Op::StackAxis1(parts.to_vec()), rg)
    }

    /// Causal moving average of width `l` along axis 1 of a rank-3 tensor,
    /// left edge padded by replicating the first step.
    pub fn causal_ma(&mut self, a: Var, l: usize) -> Var {
        let t = self.value(a);
        let out = causal_ma(t, l);
        let rg = self.rg(a);
        self.push(out, Op::CausalMa(a, l), rg)
    }

    /// Periodic stride-2 correlation with `filter` along axis 1 of a rank-3
    /// tensor: `out[p] = Σ_k f[k] x[(2p + k) mod N]`.
    pub fn wave_analysis(&mut self, x: Var, filter: Var) -> Var {
        let out = map_columns(self.value(x), |col| {
            wavelet::analysis(col, self.nodes[filter.0].value.data())
        });
        let rg = self.rg(x) || self.rg(filter);
        self.push(out, Op::WaveAnalysis(x, filter), rg)
    }

    /// Upsample by two then periodic convolution with `filter` along axis 1:
    /// `out[(2n + k) mod 2M] += f[k] c[n]`. Adjoint of [`Graph::wave_analysis`].
    pub fn wave_synthesis(&mut self, c: Var, filter: Var) -> Var {
        let out = map_columns(self.value(c), |col| {
            wavelet::synthesis(col, self.nodes[filter.0].value.data())
        });
        let rg = self.rg(c) || self.rg(filter);
        self.push(out, Op::WaveSynthesis(c, filter), rg)
    }

    /// Quadrature-mirror high-pass filter of a rank-1 low-pass filter.
    pub fn qmf(&mut self, h: Var) -> Var {
        let g = wavelet::qmf_highpass(self.value(h).data()).expect("even-length filter");
        let n = g.len();
        let rg = self.rg(h);
        self.push(Tensor::new(vec![n], g), Op::Qmf(h), rg)
    }

    pub fn wavelet_reg(&mut self, h: Var) -> Var {
        let r = wavelet::regularizer(self.value(h).data());
        let rg = self.rg(h);
        self.push(Tensor::scalar(r), Op::WaveletReg(h), rg)
    }

    /// Mean binary cross-entropy between `logits` and 0/1 `targets` of the
    /// same shape.
    pub fn bce_logits(&mut self, logits: Var, targets: Tensor) -> Var {
        let z = self.value(logits);
        assert_eq!(z.shape(), targets.shape());
        let n = z.numel() as f64;
        let loss = z
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum::<f64>()
            / n;
        let rg = self.rg(logits);
        self.push(Tensor::scalar(loss), Op::BceLogits(logits, targets), rg)
    }

    /// Mean negative log-likelihood of the chosen column in each row of a
    /// rank-2 log-probability matrix.
    pub fn nll_rows(&mut self, logp: Var, targets: Vec<usize>) -> Var {
        let t = self.value(logp);
        let cols = t.dim(1);
        assert_eq!(t.dim(0), targets.len());
        let loss = -targets
            .iter()
            .enumerate()
            .map(|(r, &c)| t.data()[r * cols + c])
            .sum::<f64>()
            / targets.len() as f64;
        let rg = self.rg(logp);
        self.push(Tensor::scalar(loss), Op::NllRows(logp, targets), rg)
    }

    /// Gradients of the scalar `loss` with respect to every node that
    /// requires one.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.value(loss).numel(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::new(self.value(loss).shape().to_vec(), vec![1.0]));
        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.backprop(node, &gout, &mut grads);
            }
            grads[i] = Some(gout);
        }
        Grads(grads)
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    /// Reduce a broadcast gradient back to the shape of `target`.
    fn unbroadcast(&self, target: Var, other: Var, g: &Tensor, a_side: bool, f: impl Fn(usize, usize) -> f64) -> Tensor {
        let ts = self.shape(target).to_vec();
        let os = self.shape(other);
        let (sa, sb) = if a_side { (&ts[..], os) } else { (os, &ts[..]) };
        let mut out = vec![0.0; ts.iter().product()];
        if sa == sb {
            for (o, v) in out.iter_mut().enumerate() {
                *v = g.data()[o] * f(o, o);
            }
        } else {
            let bc = Broadcast::new(sa, sb);
            bc.for_each(|o, i, j| {
                let (ti, _) = if a_side { (i, j) } else { (j, i) };
                out[ti] += g.data()[o] * f(i, j);
            });
        }
        Tensor::new(ts, out)
    }

    fn backprop(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.rg(*a) {
                    let ga = self.unbroadcast(*a, *b, g, true, |_, _| 1.0);
                    self.acc(grads, *a, ga);
                }
                if self.rg(*b) {
                    let gb = self.unbroadcast(*b, *a, g, false, |_, _| 1.0);
                    self.acc(grads, *b, gb);
                }
            }
            Op::Sub(a, b) => {
                if self.rg(*a) {
                    let ga = self.unbroadcast(*a, *b, g, true, |_, _| 1.0);
                    self.acc(grads, *a, ga);
                }
                if self.rg(*b) {
                    let gb = self.unbroadcast(*b, *a, g, false, |_, _| -1.0);
                    self.acc(grads, *b, gb);
                }
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                if self.rg(*a) {
                    let ga = self.unbroadcast(*a, *b, g, true, |_, j| db[j]);
                    self.acc(grads, *a, ga);
                }
                if self.rg(*b) {
                    let gb = self.unbroadcast(*b, *a, g, false, |i, _| da[i]);
                    self.acc(grads, *b, gb);
                }
            }
            Op::Div(a, b) => {
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                if self.rg(*a) {
                    let ga = self.unbroadcast(*a, *b, g, true, |_, j| 1.0 / db[j]);
                    self.acc(grads, *a, ga);
                }
                if self.rg(*b) {
                    let gb = self.unbroadcast(*b, *a, g, false, |i, j| -da[i] / (db[j] * db[j]));
                    self.acc(grads, *b, gb);
                }
            }
            Op::Scale(a, c) => self.acc(grads, *a, g.map(|v| v * c)),
            Op::AddScalar(a) => self.acc(grads, *a, g.clone()),
            Op::Exp(a) => self.acc(grads, *a, zip(g, y, |g, y| g * y)),
            Op::Log(a) => self.acc(grads, *a, zip(g, self.value(*a), |g, x| g / x)),
            Op::Tanh(a) => self.acc(grads, *a, zip(g, y, |g, y| g * (1.0 - y * y))),
            Op::Sigmoid(a) => self.acc(grads, *a, zip(g, y, |g, y| g * y * (1.0 - y))),
            Op::Silu(a) => self.acc(
                grads,
                *a,
                zip(g, self.value(*a), |g, x| {
                    let s = sigmoid(x);
                    g * (s + x * s * (1.0 - s))
                }),
            ),
            Op::Sqrt(a) => self.acc(grads, *a, zip(g, y, |g, y| g * 0.5 / y)),
            Op::Square(a) => self.acc(grads, *a, zip(g, self.value(*a), |g, x| 2.0 * g * x)),
            Op::Abs(a) => self.acc(grads, *a, zip(g, self.value(*a), |g, x| g * x.signum() * (x != 0.0) as u8 as f64)),
            Op::MatMul(a, b) => self.backprop_matmul(*a, *b, g, grads),
            Op::TransposeLast(a) => self.acc(grads, *a, transpose_last(g)),
            Op::SoftmaxLast(a) => {
                let n = *y.shape().last().unwrap();
                let mut out = vec![0.0; y.numel()];
                for ((o, yr), gr) in out.chunks_mut(n).zip(y.data().chunks(n)).zip(g.data().chunks(n)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, &yv), &gv) in o.iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - dot);
                    }
                }
                self.acc(grads, *a, Tensor::new(y.shape().to_vec(), out));
            }
            Op::LogSoftmaxLast(a) => {
                let n = *y.shape().last().unwrap();
                let mut out = vec![0.0; y.numel()];
                for ((o, yr), gr) in out.chunks_mut(n).zip(y.data().chunks(n)).zip(g.data().chunks(n)) {
                    let gsum: f64 = gr.iter().sum();
                    for ((o, &yv), &gv) in o.iter_mut().zip(yr).zip(gr) {
                        *o = gv - yv.exp() * gsum;
                    }
                }
                self.acc(grads, *a, Tensor::new(y.shape().to_vec(), out));
            }
            Op::SumAxis(a, axis) => {
                let shape = self.shape(*a).to_vec();
                let outer: usize = shape[..*axis].iter().product();
                let len = shape[*axis];
                let inner: usize = shape[axis + 1..].iter().product();
                let mut out = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    let src = &g.data()[o * inner..(o + 1) * inner];
                    for l in 0..len {
                        out[(o * len + l) * inner..(o * len + l + 1) * inner].copy_from_slice(src);
                    }
                }
                self.acc(grads, *a, Tensor::new(shape, out));
            }
            Op::SumAll(a) => {
                let shape = self.shape(*a).to_vec();
                self.acc(grads, *a, Tensor::full(&shape, g.item()));
            }
            Op::Reshape(a) => {
                let shape = self.shape(*a).to_vec();
                self.acc(grads, *a, g.clone().reshape(&shape));
            }
            Op::SliceLast(a, start) => {
                let shape = self.shape(*a).to_vec();
                let n = *shape.last().unwrap();
                let w = *y.shape().last().unwrap();
                let mut out = vec![0.0; shape.iter().product()];
                for (dst, src) in out.chunks_mut(n).zip(g.data().chunks(w)) {
                    dst[*start..start + w].copy_from_slice(src);
                }
                self.acc(grads, *a, Tensor::new(shape, out));
            }
            Op::ConcatLast(parts) => {
                let total = *y.shape().last().unwrap();
                let mut off = 0;
                for &p in parts {
                    let shape = self.shape(p).to_vec();
                    let w = *shape.last().unwrap();
                    if self.rg(p) {
                        let mut out = Vec::with_capacity(shape.iter().product());
                        for row in g.data().chunks(total) {
                            out.extend_from_slice(&row[off..off + w]);
                        }
                        self.acc(grads, p, Tensor::new(shape, out));
                    }
                    off += w;
                }
            }
            Op::StackLast(parts) => {
                let n = parts.len();
                for (j, &p) in parts.iter().enumerate() {
                    if self.rg(p) {
                        let shape = self.shape(p).to_vec();
                        let out = g.data().iter().skip(j).step_by(n).copied().collect();
                        self.acc(grads, p, Tensor::new(shape, out));
                    }
                }
            }
            Op::SelectAxis1(a, index) => {
                let shape = self.shape(*a).to_vec();
                let (b, len) = (shape[0], shape[1]);
                let inner: usize = shape[2..].iter().product();
                let mut out = vec![0.0; shape.iter().product()];
                for i in 0..b {
                    let off = (i * len + index) * inner;
                    out[off..off + inner].copy_from_slice(&g.data()[i * inner..(i + 1) * inner]);
                }
                self.acc(grads, *a, Tensor::new(shape, out));
            }
            Op::StackAxis1(parts) => {
                let len = parts.len();
                for (t, &p) in parts.iter().enumerate() {
                    if !self.rg(p) {
                        continue;
                    }
                    let shape = self.shape(p).to_vec();
                    let b = shape[0];
                    let inner: usize = shape[1..].iter().product();
                    let mut out = Vec::with_capacity(b * inner);
                    for i in 0..b {
                        out.extend_from_slice(&g.data()[(i * len + t) * inner..(i * len + t + 1) * inner]);
                    }
                    self.acc(grads, p, Tensor::new(shape, out));
                }
            }
            Op::CausalMa(a, l) => {
                let shape = self.shape(*a).to_vec();
                let (b, len, c) = (shape[0], shape[1], shape[2]);
                let mut out = vec![0.0; b * len * c];
                let w = 1.0 / *l as f64;
                for i in 0..b {
                    for t in 0..len {
                        for k in 0..*l {
                            let src = t.saturating_sub(k);
                            for ch in 0..c {
                                out[(i * len + src) * c + ch] += w * g.data()[(i * len + t) * c + ch];
                            }
                        }
                    }
                }
                self.acc(grads, *a, Tensor::new(shape, out));
            }
            Op::WaveAnalysis(x, f) => {
                let filt = self.value(*f).data();
                if self.rg(*x) {
                    // The analysis adjoint is the synthesis operator.
                    let gx = map_columns(g, |col| wavelet::synthesis(col, filt));
                    self.acc(grads, *x, gx);
                }
                if self.rg(*f) {
                    let xs = self.value(*x);
                    let gf = filter_grad(xs, g, filt.len(), |p, k, n| (2 * p + k) % n, true);
                    self.acc(grads, *f, gf);
                }
            }
            Op::WaveSynthesis(c, f) => {
                let filt = self.value(*f).data();
                if self.rg(*c) {
                    let gc = map_columns(g, |col| wavelet::analysis(col, filt));
                    self.acc(grads, *c, gc);
                }
                if self.rg(*f) {
                    let cs = self.value(*c);
                    let gf = filter_grad(cs, g, filt.len(), |n, k, big| (2 * n + k) % big, false);
                    self.acc(grads, *f, gf);
                }
            }
            Op::Qmf(h) => {
                let m = g.numel();
                let mut out = vec![0.0; m];
                for n in 0..m {
                    let sign = if n % 2 == 0 { 1.0 } else { -1.0 };
                    out[m - 1 - n] += sign * g.data()[n];
                }
                self.acc(grads, *h, Tensor::new(vec![m], out));
            }
            Op::WaveletReg(h) => {
                let grad = wavelet::regularizer_grad(self.value(*h).data());
                let scale = g.item();
                self.acc(grads, *h, Tensor::new(vec![grad.len()], grad.iter().map(|v| v * scale).collect()));
            }
            Op::BceLogits(z, targets) => {
                let zt = self.value(*z);
                let n = zt.numel() as f64;
                let s = g.item();
                let out = zt
                    .data()
                    .iter()
                    .zip(targets.data())
                    .map(|(&z, &t)| s * (sigmoid(z) - t) / n)
                    .collect();
                self.acc(grads, *z, Tensor::new(zt.shape().to_vec(), out));
            }
            Op::NllRows(lp, targets) => {
                let shape = self.shape(*lp).to_vec();
                let cols = shape[1];
                let mut out = vec![0.0; shape[0] * cols];
                let s = -g.item() / targets.len() as f64;
                for (r, &c) in targets.iter().enumerate() {
                    out[r * cols + c] = s;
                }
                self.acc(grads, *lp, Tensor::new(shape, out));
            }
        }
    }

    fn backprop_matmul(&self, a: Var, b: Var, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape().to_vec(), tb.shape().to_vec());
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let n = sb[sb.len() - 1];
        if sb.len() == 2 {
            let rows = ta.numel() / k.max(1);
            if self.rg(a) {
                // dA = G · Bᵀ
                let mut out = vec![0.0; rows * k];
                gemm(rows, n, k, g.data(), n as isize, 1, tb.data(), 1, n as isize, &mut out);
                self.acc(grads, a, Tensor::new(sa.clone(), out));
            }
            if self.rg(b) {
                // dB = Aᵀ · G
                let mut out = vec![0.0; k * n];
                gemm(k, rows, n, ta.data(), 1, k as isize, g.data(), n as isize, 1, &mut out);
                self.acc(grads, b, Tensor::new(sb, out));
            }
        } else {
            let batch: usize = sa[..sa.len() - 2].iter().product();
            if self.rg(a) {
                let mut out = vec![0.0; batch * m * k];
                for i in 0..batch {
                    gemm(
                        m,
                        n,
                        k,
                        &g.data()[i * m * n..],
                        n as isize,
                        1,
                        &tb.data()[i * k * n..],
                        1,
                        n as isize,
                        &mut out[i * m * k..(i + 1) * m * k],
                    );
                }
                self.acc(grads, a, Tensor::new(sa.clone(), out));
            }
            if self.rg(b) {
                let mut out = vec![0.0; batch * k * n];
                for i in 0..batch {
                    gemm(
                        k,
                        m,
                        n,
                        &ta.data()[i * m * k..],
                        1,
                        k as isize,
                        &g.data()[i * m * n..],
                        n as isize,
                        1,
                        &mut out[i * k * n..(i + 1) * k * n],
                    );
                }
                self.acc(grads, b, Tensor::new(sb, out));
            }
        }
    }
}

fn zip(g: &Tensor, x: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::new(
        g.shape().to_vec(),
        g.data().iter().zip(x.data()).map(|(&a, &b)| f(a, b)).collect(),
    )
}

fn transpose_last(t: &Tensor) -> Tensor {
    let s = t.shape();
    let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
    let batch = t.numel() / (r * c).max(1);
    let mut out = vec![0.0; t.numel()];
    for b in 0..batch {
        let src = &t.data()[b * r * c..(b + 1) * r * c];
        let dst = &mut out[b * r * c..(b + 1) * r * c];
        for i in 0..r {
            for j in 0..c {
                dst[j * r + i] = src[i * c + j];
            }
        }
    }
    let mut shape = s.to_vec();
    let n = shape.len();
    shape.swap(n - 2, n - 1);
    Tensor::new(shape, out)
}

/// Causal moving average along axis 1 of a rank-3 tensor.
pub(crate) fn causal_ma(t: &Tensor, l: usize) -> Tensor {
    let shape = t.shape();
    let (b, len, c) = (shape[0], shape[1], shape[2]);
    let d = t.data();
    let w = 1.0 / l as f64;
    let mut out = vec![0.0; b * len * c];
    for i in 0..b {
        for tt in 0..len {
            for k in 0..l {
                let src = tt.saturating_sub(k);
                for ch in 0..c {
                    out[(i * len + tt) * c + ch] += w * d[(i * len + src) * c + ch];
                }
            }
        }
    }
    Tensor::new(shape.to_vec(), out)
}

/// Apply a 1-D transform to every axis-1 column of a rank-3 tensor.
fn map_columns(t: &Tensor, f: impl Fn(&[f64]) -> Vec<f64>) -> Tensor {
    let shape = t.shape();
    assert_eq!(shape.len(), 3, "expected (batch, length, channels)");
    let (b, n, c) = (shape[0], shape[1], shape[2]);
    let mut col = vec![0.0; n];
    let mut out: Vec<f64> = Vec::new();
    let mut out_len = 0;
    for i in 0..b {
        for ch in 0..c {
            for (p, v) in col.iter_mut().enumerate() {
                *v = t.data()[(i * n + p) * c + ch];
            }
            let res = f(&col);
            if out.is_empty() {
                out_len = res.len();
                out = vec![0.0; b * out_len * c];
            }
            for (p, v) in res.into_iter().enumerate() {
                out[(i * out_len + p) * c + ch] = v;
            }
        }
    }
    Tensor::new(vec![b, out_len, c], out)
}

/// Gradient of a filter-bank op with respect to its filter taps.
///
/// For analysis: `out[p] = Σ_k f[k] x[idx(p,k,N)]`, so `df[k] = Σ_p g[p] x[idx]`.
/// For synthesis: `out[idx(n,k,2M)] += f[k] c[n]`, so `df[k] = Σ_n g[idx] c[n]`.
fn filter_grad(
    input: &Tensor,
    g: &Tensor,
    taps: usize,
    idx: impl Fn(usize, usize, usize) -> usize,
    analysis: bool,
) -> Tensor {
    let (b, c) = (input.dim(0), input.dim(2));
    let mut out = vec![0.0; taps];
    if analysis {
        let (n, half) = (input.dim(1), g.dim(1));
        for i in 0..b {
            for p in 0..half {
                for (k, o) in out.iter_mut().enumerate() {
                    let src = idx(p, k, n);
                    for ch in 0..c {
                        *o += g.data()[(i * half + p) * c + ch] * input.data()[(i * n + src) * c + ch];
                    }
                }
            }
        }
    } else {
        let (m, big) = (input.dim(1), g.dim(1));
        for i in 0..b {
            for nn in 0..m {
                for (k, o) in out.iter_mut().enumerate() {
                    let dst = idx(nn, k, big);
                    for ch in 0..c {
                        *o += g.data()[(i * big + dst) * c + ch] * input.data()[(i * m + nn) * c + ch];
                    }
                }
            }
        }
    }
    Tensor::new(vec![taps], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Check d(sum(w ⊙ f(inputs)))/d(inputs) against central differences.
    fn check(shapes: &[&[usize]], build: impl Fn(&mut Graph, &[Var]) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let inputs: Vec<Tensor> = shapes.iter().map(|s| Tensor::randn(s, 1.0, &mut rng)).collect();
        let eval = |inputs: &[Tensor]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
            let out = build(&mut g, &vars);
            let mut wrng = ChaCha8Rng::seed_from_u64(99);
            let w = Tensor::randn(g.shape(out), 1.0, &mut wrng);
            let wv = g.constant(w);
            let prod = g.mul(out, wv);
            let loss = g.sum_all(prod);
            (g, vars, loss)
        };
        let (g, vars, loss) = eval(&inputs);
        let grads = g.backward(loss);
        let h = 1e-6;
        for (vi, v) in vars.iter().enumerate() {
            let analytic = grads.get(*v).expect("gradient present");
            for j in 0..inputs[vi].numel() {
                let mut plus = inputs.clone();
                plus[vi].data_mut()[j] += h;
                let mut minus = inputs.clone();
                minus[vi].data_mut()[j] -= h;
                let (gp, _, lp) = eval(&plus);
                let (gm, _, lm) = eval(&minus);
                let fd = (gp.value(lp).item() - gm.value(lm).item()) / (2.0 * h);
                let an = analytic.data()[j];
                assert!(
                    (fd - an).abs() <= 1e-6 * (1.0 + fd.abs()),
                    "input {vi} elem {j}: analytic {an} vs numeric {fd}"
                );
            }
        }
    }

    #[test]
    fn elementwise_and_broadcast_grads() {
        check(&[&[2, 3, 4], &[1, 3, 1]], |g, v| g.add(v[0], v[1]));
        check(&[&[2, 3, 4], &[2, 1, 4]], |g, v| g.sub(v[0], v[1]));
        check(&[&[2, 3, 4], &[1, 1, 4]], |g, v| g.mul(v[0], v[1]));
        check(&[&[2, 3], &[2, 1]], |g, v| {
            let d = g.exp(v[1]);
            g.div(v[0], d)
        });
        check(&[&[3, 4]], |g, v| g.tanh(v[0]));
        check(&[&[3, 4]], |g, v| g.sigmoid(v[0]));
        check(&[&[3, 4]], |g, v| g.silu(v[0]));
        check(&[&[3, 4]], |g, v| {
            let s = g.square(v[0]);
            let s = g.add_scalar(s, 1.0);
            let r = g.sqrt(s);
            g.log(r)
        });
    }

    #[test]
    fn matmul_grads() {
        check(&[&[2, 3, 4], &[4, 5]], |g, v| g.matmul(v[0], v[1]));
        check(&[&[2, 3, 4], &[2, 4, 2]], |g, v| g.matmul(v[0], v[1]));
        check(&[&[2, 3, 4]], |g, v| g.transpose_last(v[0]));
    }

    #[test]
    fn reduction_and_shape_grads() {
        check(&[&[2, 3, 4]], |g, v| g.softmax_last(v[0]));
        check(&[&[2, 3, 4]], |g, v| g.log_softmax_last(v[0]));
        check(&[&[2, 3, 4]], |g, v| g.sum_axis(v[0], 1));
        check(&[&[2, 3, 4]], |g, v| g.mean_axis(v[0], 0));
        check(&[&[2, 3, 4]], |g, v| g.reshape(v[0], &[6, 4]));
        check(&[&[2, 3, 4]], |g, v| g.slice_last(v[0], 1, 2));
        check(&[&[2, 3], &[2, 2]], |g, v| g.concat_last(&[v[0], v[1]]));
        check(&[&[2, 3], &[2, 3]], |g, v| g.stack_last(&[v[0], v[1]]));
        check(&[&[2, 3, 4]], |g, v| g.select_axis1(v[0], 2));
        check(&[&[2, 4], &[2, 4]], |g, v| g.stack_axis1(&[v[0], v[1]]));
    }

    #[test]
    fn signal_op_grads() {
        check(&[&[2, 6, 3]], |g, v| g.causal_ma(v[0], 4));
        check(&[&[2, 8, 3], &[6]], |g, v| g.wave_analysis(v[0], v[1]));
        check(&[&[2, 4, 3], &[6]], |g, v| g.wave_synthesis(v[0], v[1]));
        check(&[&[6]], |g, v| g.qmf(v[0]));
        check(&[&[6]], |g, v| g.wavelet_reg(v[0]));
    }

    #[test]
    fn loss_grads() {
        let targets = Tensor::new(vec![2, 3], vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
        check(&[&[2, 3]], move |g, v| g.bce_logits(v[0], targets.clone()));
        check(&[&[3, 4]], |g, v| {
            let lp = g.log_softmax_last(v[0]);
            g.nll_rows(lp, vec![0, 3, 1])
        });
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::ones(&[2]));
        let v = g.variable(Tensor::ones(&[2]));
        let p = g.mul(c, v);
        let loss = g.sum_all(p);
        let grads = g.backward(loss);
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(v).unwrap().data(), &[1.0, 1.0]);
    }
}
