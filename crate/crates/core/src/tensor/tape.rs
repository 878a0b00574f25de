use std::sync::Arc;

use super::kernels::{self, Geometry, LstmCache, LstmDims};
use super::{invalid, mismatch, numel, Float, Tensor, TensorError, EPS};
use crate::dsp::StftPlan;

type Result<T> = std::result::Result<T, TensorError>;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Forward convolution geometry. Time padding is given as (left, right) so a
/// causal layer uses `(kernel_time - 1, 0)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: (usize, usize),
    pub pad_time: (usize, usize),
    pub pad_freq: (usize, usize),
}

impl ConvSpec {
    pub fn causal(kernel_time: usize, stride_freq: usize) -> Self {
        Self {
            stride: (1, stride_freq),
            pad_time: (kernel_time - 1, 0),
            pad_freq: (0, 0),
        }
    }

    pub fn output_hw(&self, h: usize, w: usize, kh: usize, kw: usize) -> Option<(usize, usize)> {
        let hp = h + self.pad_time.0 + self.pad_time.1;
        let wp = w + self.pad_freq.0 + self.pad_freq.1;
        if hp < kh || wp < kw {
            return None;
        }
        Some(((hp - kh) / self.stride.0 + 1, (wp - kw) / self.stride.1 + 1))
    }
}

/// Transposed convolution geometry: the full output is shifted by
/// `crop_front` and cut (or zero-extended) to `out_size`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvTransposeSpec {
    pub stride: (usize, usize),
    pub crop_front: (usize, usize),
    pub out_size: (usize, usize),
}

enum Op<T: Float> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, T),
    Scale(Var, Var),
    MatMul(Var, Var, [usize; 3]),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
        rows: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geo: Geometry,
    },
    ConvT2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geo: Geometry,
    },
    Sigmoid(Var),
    Tanh(Var),
    Elu(Var, T),
    LeakyRelu(Var, T),
    Relu(Var),
    Abs(Var),
    Sqrt(Var),
    LogEps(Var),
    Clamp(Var, T, T),
    Softmax(Var),
    Concat(Vec<Var>, usize),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    GatherLast(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    L1Last(Var),
    L2Last(Var),
    CosineLast(Var, Var),
    Lstm {
        x: Var,
        w: Var,
        b: Var,
        dims: LstmDims,
        cache: LstmCache<T>,
    },
    Stft(Var, Arc<StftPlan<T>>),
    Istft(Var, Arc<StftPlan<T>>),
    UpsampleDup(Var),
}

struct Node<T: Float> {
    shape: Vec<usize>,
    value: Arc<Vec<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Reverse-mode recording of tensor operations.
///
/// Nodes are appended in evaluation order, so the tape is always
/// topologically sorted and backward is a single reverse sweep.
pub struct Tape<T: Float = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn add_into<T: Float>(dst: &mut Option<Vec<T>>, src: &[T]) {
    match dst {
        Some(d) => {
            for (a, &b) in d.iter_mut().zip(src) {
                *a += b;
            }
        }
        None => *dst = Some(src.to_vec()),
    }
}

fn add_owned<T: Float>(dst: &mut Option<Vec<T>>, src: Vec<T>) {
    match dst {
        Some(d) => {
            for (a, b) in d.iter_mut().zip(src) {
                *a += b;
            }
        }
        None => *dst = Some(src),
    }
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, inputs: &[Var], op: Op<T>) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            shape,
            value: Arc::new(value),
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds a tensor as a leaf. Its `requires_grad` flag decides whether
    /// gradients are tracked for it.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.shared(),
            requires_grad: t.requires_grad(),
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<T>) -> Result<Var> {
        if numel(shape) != data.len() {
            return Err(TensorError::DataLength {
                len: data.len(),
                shape: shape.to_vec(),
            });
        }
        Ok(self.push(shape.to_vec(), data, &[], Op::Leaf))
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::from_shared(n.shape.clone(), Arc::clone(&n.value))
    }

    /// Returns a copy of `v` that gradients do not flow through.
    pub fn detach(&mut self, v: Var) -> Var {
        let n = &self.nodes[v.0];
        let (shape, value) = (n.shape.clone(), Arc::clone(&n.value));
        self.nodes.push(Node {
            shape,
            value,
            requires_grad: false,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(mismatch(op, sa, sb));
        }
        Ok(())
    }

    fn zip_map(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, o: Op<T>) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, value, &[a, b], o))
    }

    fn map(&mut self, a: Var, f: impl Fn(T) -> T, o: Op<T>) -> Var {
        let value = self.value(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, value, &[a], o)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let c = T::of_f64(c);
        self.map(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        let c = T::of_f64(c);
        self.map(a, |x| x * c, Op::MulScalar(a, c))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.mul_scalar(a, -1.0)
    }

    /// Multiplies every element of `a` by the single-element tensor `s`.
    pub fn scale(&mut self, a: Var, s: Var) -> Result<Var> {
        if numel(self.shape(s)) != 1 {
            return Err(mismatch("scale", self.shape(a), self.shape(s)));
        }
        let sv = self.scalar(s);
        let value = self.value(a).iter().map(|&x| x * sv).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, value, &[a, s], Op::Scale(a, s)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        kernels::matmul_acc(self.value(a), self.value(b), &mut out, m, k, n);
        Ok(self.push(vec![m, n], out, &[a, b], Op::MatMul(a, b, [m, k, n])))
    }

    /// `x[..., in] * w[in, out] + b[out]` over all leading dimensions.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.is_empty() || sw.len() != 2 || sx[sx.len() - 1] != sw[0] {
            return Err(mismatch("linear", &sx, &sw));
        }
        let (k, n) = (sw[0], sw[1]);
        let m = numel(&sx) / k;
        let mut out = vec![T::zero(); m * n];
        if let Some(b) = b {
            if self.shape(b) != [n] {
                return Err(mismatch("linear bias", self.shape(b), &[n]));
            }
            let bv = self.value(b);
            for row in out.chunks_mut(n) {
                row.copy_from_slice(bv);
            }
        }
        kernels::matmul_acc(self.value(x), self.value(w), &mut out, m, k, n);
        let mut shape = sx;
        *shape.last_mut().unwrap() = n;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(shape, out, &inputs, Op::Linear { x, w, b, rows: m }))
    }

    fn shape4(&self, op: &'static str, v: Var) -> Result<[usize; 4]> {
        let s = self.shape(v);
        if s.len() != 4 {
            return Err(invalid(op, format!("expected rank 4, got shape {s:?}")));
        }
        Ok([s[0], s[1], s[2], s[3]])
    }

    /// 2D convolution, input `[batch, in, time, freq]`, weight `[out, in, kt, kf]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let xs = self.shape4("conv2d", x)?;
        let ws = self.shape4("conv2d", w)?;
        if xs[1] != ws[1] {
            return Err(mismatch("conv2d", &xs, &ws));
        }
        let (ho, wo) = spec
            .output_hw(xs[2], xs[3], ws[2], ws[3])
            .ok_or_else(|| mismatch("conv2d", &xs, &ws))?;
        let geo = Geometry {
            stride: spec.stride,
            front: (spec.pad_time.0, spec.pad_freq.0),
        };
        let mut out = kernels::conv_forward(self.value(x), xs, self.value(w), ws, geo, (ho, wo));
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(mismatch("conv2d bias", self.shape(b), &[ws[0]]));
            }
            kernels::add_channel_bias(&mut out, xs[0], ws[0], ho * wo, self.value(b));
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(vec![xs[0], ws[0], ho, wo], out, &inputs, Op::Conv2d { x, w, b, geo }))
    }

    /// Transposed 2D convolution, weight `[in, out, kt, kf]`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvTransposeSpec) -> Result<Var> {
        let xs = self.shape4("conv_transpose2d", x)?;
        let ws = self.shape4("conv_transpose2d", w)?;
        if xs[1] != ws[0] {
            return Err(mismatch("conv_transpose2d", &xs, &ws));
        }
        let geo = Geometry {
            stride: spec.stride,
            front: spec.crop_front,
        };
        let (ho, wo) = spec.out_size;
        let mut out = kernels::conv_transpose_forward(self.value(x), xs, self.value(w), ws, geo, (ho, wo));
        if let Some(b) = b {
            if self.shape(b) != [ws[1]] {
                return Err(mismatch("conv_transpose2d bias", self.shape(b), &[ws[1]]));
            }
            kernels::add_channel_bias(&mut out, xs[0], ws[1], ho * wo, self.value(b));
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(vec![xs[0], ws[1], ho, wo], out, &inputs, Op::ConvT2d { x, w, b, geo }))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, kernels::sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, |x| x.tanh(), Op::Tanh(a))
    }

    pub fn elu(&mut self, a: Var, alpha: f64) -> Var {
        let al = T::of_f64(alpha);
        self.map(
            a,
            |x| if x > T::zero() { x } else { al * (x.exp() - T::one()) },
            Op::Elu(a, al),
        )
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let s = T::of_f64(slope);
        self.map(a, |x| if x > T::zero() { x } else { s * x }, Op::LeakyRelu(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(T::zero()), Op::Relu(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.map(a, |x| x.abs(), Op::Abs(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(T::zero()).sqrt(), Op::Sqrt(a))
    }

    /// `ln(x + 1e-8)`.
    pub fn log_eps(&mut self, a: Var) -> Var {
        let e = T::of_f64(EPS);
        self.map(a, |x| (x + e).ln(), Op::LogEps(a))
    }

    /// Clamps to `[lo, hi]`; gradient is zero outside the open interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let (l, h) = (T::of_f64(lo), T::of_f64(hi));
        self.map(a, |x| x.max(l).min(h), Op::Clamp(a, l, h))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let n = *shape.last().ok_or_else(|| invalid("softmax", "scalar input"))?;
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(n) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        Ok(self.push(shape, out, &[a], Op::Softmax(a)))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| invalid("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(invalid("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let ok = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !ok {
                return Err(mismatch("concat", &base, s));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p)[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push(shape, out, parts, Op::Concat(parts.to_vec(), axis)))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(invalid("slice", format!("[{start}, {}) on axis {axis} of {s:?}", start + len)));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * len * inner);
        let v = self.value(a);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            out.extend_from_slice(&v[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        Ok(self.push(shape, out, &[a], Op::Slice { x: a, axis, start }))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != numel(self.shape(a)) {
            return Err(mismatch("reshape", self.shape(a), shape));
        }
        let value = self.value(a).to_vec();
        Ok(self.push(shape.to_vec(), value, &[a], Op::Reshape(a)))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len() || perm.iter().any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(invalid("permute", format!("{perm:?} is not a permutation of rank {}", s.len())));
        }
        let (shape, src) = kernels::permute_index(&s, perm);
        let v = self.value(a);
        let out = src.iter().map(|&i| v[i]).collect();
        Ok(self.push(shape, out, &[a], Op::Permute(a, perm.to_vec())))
    }

    /// Selects `indices` along the last axis (indices may repeat).
    pub fn gather_last(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let n = *s.last().ok_or_else(|| invalid("gather_last", "scalar input"))?;
        if indices.iter().any(|&i| i >= n) {
            return Err(invalid("gather_last", format!("index out of range for last axis {n}")));
        }
        let out = self
            .value(a)
            .chunks(n)
            .flat_map(|row| indices.iter().map(move |&i| row[i]))
            .collect();
        let mut shape = s;
        *shape.last_mut().unwrap() = indices.len();
        Ok(self.push(shape, out, &[a], Op::GatherLast(a, indices.to_vec())))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = self.value(a).iter().copied().sum();
        self.push(vec![], vec![s], &[a], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = T::of_f64(self.value(a).len().max(1) as f64);
        let s: T = self.value(a).iter().copied().sum();
        self.push(vec![], vec![s / n], &[a], Op::Mean(a))
    }

    fn last_dim(&self, op: &'static str, a: Var) -> Result<(Vec<usize>, usize)> {
        let s = self.shape(a).to_vec();
        match s.split_last() {
            Some((&n, rest)) => Ok((rest.to_vec(), n)),
            None => Err(invalid(op, "scalar input")),
        }
    }

    /// Sums over the last axis, dropping it.
    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        let (shape, n) = self.last_dim("sum_last", a)?;
        let out = self.value(a).chunks(n).map(|r| r.iter().copied().sum()).collect();
        Ok(self.push(shape, out, &[a], Op::SumLast(a)))
    }

    pub fn mean_last(&mut self, a: Var) -> Result<Var> {
        let n = *self.shape(a).last().unwrap_or(&1);
        let s = self.sum_last(a)?;
        Ok(self.mul_scalar(s, 1.0 / n as f64))
    }

    /// L1 norm over the last axis.
    pub fn l1_norm_last(&mut self, a: Var) -> Result<Var> {
        let (shape, n) = self.last_dim("l1_norm_last", a)?;
        let out = self.value(a).chunks(n).map(|r| r.iter().map(|x| x.abs()).sum()).collect();
        Ok(self.push(shape, out, &[a], Op::L1Last(a)))
    }

    /// `sqrt(sum x^2 + 1e-8)` over the last axis.
    pub fn l2_norm_last(&mut self, a: Var) -> Result<Var> {
        let (shape, n) = self.last_dim("l2_norm_last", a)?;
        let e = T::of_f64(EPS);
        let out = self
            .value(a)
            .chunks(n)
            .map(|r| (r.iter().map(|&x| x * x).sum::<T>() + e).sqrt())
            .collect();
        Ok(self.push(shape, out, &[a], Op::L2Last(a)))
    }

    /// Cosine similarity over the last axis, `<a,b> / (|a||b| + 1e-8)`.
    pub fn cosine_last(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("cosine_last", a, b)?;
        let (shape, n) = self.last_dim("cosine_last", a)?;
        let e = T::of_f64(EPS);
        let out = self
            .value(a)
            .chunks(n)
            .zip(self.value(b).chunks(n))
            .map(|(ra, rb)| {
                let (d, na, nb) = dot_norms(ra, rb);
                d / (na * nb + e)
            })
            .collect();
        Ok(self.push(shape, out, &[a, b], Op::CosineLast(a, b)))
    }

    /// Grouped uni-directional LSTM from a zero state. `x` is
    /// `[batch, time, input]`; weight `[groups, in_g + hid_g, 4*hid_g]`; bias
    /// `[groups, 4*hid_g]`. Output `[batch, time, groups*hid_g]`.
    pub fn lstm(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 3 || sw.len() != 3 || sw[2] % 4 != 0 {
            return Err(mismatch("lstm", &sx, &sw));
        }
        let groups = sw[0];
        let hid_g = sw[2] / 4;
        if sx[2] % groups != 0 || sw[1] != sx[2] / groups + hid_g {
            return Err(mismatch("lstm", &sx, &sw));
        }
        if self.shape(b) != [groups, 4 * hid_g] {
            return Err(mismatch("lstm bias", self.shape(b), &[groups, 4 * hid_g]));
        }
        let dims = LstmDims {
            batch: sx[0],
            time: sx[1],
            input: sx[2],
            hidden: groups * hid_g,
            groups,
        };
        let mut state = (vec![T::zero(); dims.batch * dims.hidden], vec![T::zero(); dims.batch * dims.hidden]);
        let (out, cache) = kernels::lstm_forward(self.value(x), self.value(w), self.value(b), dims, &mut state);
        Ok(self.push(
            vec![dims.batch, dims.time, dims.hidden],
            out,
            &[x, w, b],
            Op::Lstm { x, w, b, dims, cache },
        ))
    }

    /// Short-time Fourier transform of `[batch, samples]` into
    /// `[batch, 2, frames, bins]` (real, imaginary).
    pub fn stft(&mut self, wave: Var, plan: &Arc<StftPlan<T>>) -> Result<Var> {
        let s = self.shape(wave).to_vec();
        if s.len() != 2 {
            return Err(invalid("stft", format!("expected [batch, samples], got {s:?}")));
        }
        let frames = plan
            .frame_count(s[1])
            .ok_or_else(|| invalid("stft", format!("{} samples is shorter than one window", s[1])))?;
        let per = 2 * frames * plan.bins();
        let mut out = Vec::with_capacity(s[0] * per);
        for row in self.value(wave).chunks(s[1]) {
            out.extend(plan.analyze(row));
        }
        let shape = vec![s[0], 2, frames, plan.bins()];
        Ok(self.push(shape, out, &[wave], Op::Stft(wave, Arc::clone(plan))))
    }

    /// Least-squares overlap-add synthesis of `[batch, 2, frames, bins]`.
    pub fn istft(&mut self, spec: Var, plan: &Arc<StftPlan<T>>) -> Result<Var> {
        let s = self.shape(spec).to_vec();
        if s.len() != 4 || s[1] != 2 || s[3] != plan.bins() || s[2] == 0 {
            return Err(invalid("istft", format!("expected [batch, 2, frames, {}], got {s:?}", plan.bins())));
        }
        let per = 2 * s[2] * s[3];
        let mut out = Vec::new();
        for item in self.value(spec).chunks(per) {
            out.extend(plan.synthesize(item, s[2]));
        }
        let len = plan.synthesis_len(s[2]);
        Ok(self.push(vec![s[0], len], out, &[spec], Op::Istft(spec, Arc::clone(plan))))
    }

    /// Frequency upsampling by local duplication: output bin `f` copies input
    /// bin `min(f / 2, F - 1)`, and output channel `o` averages the
    /// `C / out_c` consecutive input channels of its group.
    pub fn upsample_dup(&mut self, x: Var, out_c: usize, out_f: usize) -> Result<Var> {
        let [nb, c, t, f] = self.shape4("upsample_dup", x)?;
        if out_c == 0 || c % out_c != 0 {
            return Err(invalid("upsample_dup", format!("{c} channels do not split into {out_c} groups")));
        }
        let r = c / out_c;
        let inv = T::of_f64(1.0 / r as f64);
        let v = self.value(x);
        let mut out = vec![T::zero(); nb * out_c * t * out_f];
        for b in 0..nb {
            for o in 0..out_c {
                for ci in o * r..(o + 1) * r {
                    for ti in 0..t {
                        let src = &v[((b * c + ci) * t + ti) * f..((b * c + ci) * t + ti + 1) * f];
                        let dst = &mut out[((b * out_c + o) * t + ti) * out_f..((b * out_c + o) * t + ti + 1) * out_f];
                        for (fi, d) in dst.iter_mut().enumerate() {
                            *d += src[(fi / 2).min(f - 1)] * inv;
                        }
                    }
                }
            }
        }
        Ok(self.push(vec![nb, out_c, t, out_f], out, &[x], Op::UpsampleDup(x)))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let n = &self.nodes[loss.0];
        if n.value.len() != 1 {
            return Err(TensorError::NonScalarLoss(n.shape.clone()));
        }
        if !n.requires_grad {
            return Err(TensorError::DetachedLoss);
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if matches!(self.nodes[id].op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            self.backprop(id, &g, &mut grads);
            // Intermediate gradients are not kept.
        }
        Ok(Gradients { grads })
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[id];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.rg(*a) {
                    add_into(&mut grads[a.0], g);
                }
                if self.rg(*b) {
                    add_into(&mut grads[b.0], g);
                }
            }
            Op::Sub(a, b) => {
                if self.rg(*a) {
                    add_into(&mut grads[a.0], g);
                }
                if self.rg(*b) {
                    add_owned(&mut grads[b.0], g.iter().map(|&v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    add_owned(&mut grads[a.0], g.iter().zip(vb).map(|(&g, &y)| g * y).collect());
                }
                if self.rg(*b) {
                    add_owned(&mut grads[b.0], g.iter().zip(va).map(|(&g, &x)| g * x).collect());
                }
            }
            Op::Div(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    add_owned(&mut grads[a.0], g.iter().zip(vb).map(|(&g, &y)| g / y).collect());
                }
                if self.rg(*b) {
                    add_owned(
                        &mut grads[b.0],
                        g.iter().zip(va).zip(vb).map(|((&g, &x), &y)| -g * x / (y * y)).collect(),
                    );
                }
            }
            Op::AddScalar(a) => add_into(&mut grads[a.0], g),
            Op::MulScalar(a, c) => add_owned(&mut grads[a.0], g.iter().map(|&v| v * *c).collect()),
            Op::Scale(a, s) => {
                let sv = self.scalar(*s);
                if self.rg(*a) {
                    add_owned(&mut grads[a.0], g.iter().map(|&v| v * sv).collect());
                }
                if self.rg(*s) {
                    let d: T = g.iter().zip(self.value(*a)).map(|(&g, &x)| g * x).sum();
                    add_owned(&mut grads[s.0], vec![d]);
                }
            }
            Op::MatMul(a, b, [m, k, n]) => {
                if self.rg(*a) {
                    let mut ga = vec![T::zero(); m * k];
                    kernels::matmul_bt_acc(g, self.value(*b), &mut ga, *m, *k, *n);
                    add_owned(&mut grads[a.0], ga);
                }
                if self.rg(*b) {
                    let mut gb = vec![T::zero(); k * n];
                    kernels::matmul_at_acc(self.value(*a), g, &mut gb, *m, *k, *n);
                    add_owned(&mut grads[b.0], gb);
                }
            }
            Op::Linear { x, w, b, rows } => {
                let sw = self.shape(*w);
                let (k, n) = (sw[0], sw[1]);
                if self.rg(*x) {
                    let mut gx = vec![T::zero(); rows * k];
                    kernels::matmul_bt_acc(g, self.value(*w), &mut gx, *rows, k, n);
                    add_owned(&mut grads[x.0], gx);
                }
                if self.rg(*w) {
                    let mut gw = vec![T::zero(); k * n];
                    kernels::matmul_at_acc(self.value(*x), g, &mut gw, *rows, k, n);
                    add_owned(&mut grads[w.0], gw);
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        let mut gb = vec![T::zero(); n];
                        for row in g.chunks(n) {
                            for (acc, &v) in gb.iter_mut().zip(row) {
                                *acc += v;
                            }
                        }
                        add_owned(&mut grads[b.0], gb);
                    }
                }
            }
            Op::Conv2d { x, w, b, geo } => {
                let xs = to4(self.shape(*x));
                let ws = to4(self.shape(*w));
                let ys = to4(&node.shape);
                if self.rg(*x) {
                    let gx = kernels::conv_transpose_forward(g, ys, self.value(*w), ws, *geo, (xs[2], xs[3]));
                    add_owned(&mut grads[x.0], gx);
                }
                if self.rg(*w) {
                    let gw = kernels::conv_weight_grad(self.value(*x), xs, g, ys, (ws[2], ws[3]), *geo);
                    add_owned(&mut grads[w.0], gw);
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        add_owned(&mut grads[b.0], kernels::channel_sum(g, ys[0], ys[1], ys[2] * ys[3]));
                    }
                }
            }
            Op::ConvT2d { x, w, b, geo } => {
                let xs = to4(self.shape(*x));
                let ws = to4(self.shape(*w));
                let ys = to4(&node.shape);
                if self.rg(*x) {
                    let gx = kernels::conv_forward(g, ys, self.value(*w), ws, *geo, (xs[2], xs[3]));
                    add_owned(&mut grads[x.0], gx);
                }
                if self.rg(*w) {
                    let gw = kernels::conv_weight_grad(g, ys, self.value(*x), xs, (ws[2], ws[3]), *geo);
                    add_owned(&mut grads[w.0], gw);
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        add_owned(&mut grads[b.0], kernels::channel_sum(g, ys[0], ys[1], ys[2] * ys[3]));
                    }
                }
            }
            Op::Sigmoid(a) => add_owned(
                &mut grads[a.0],
                g.iter().zip(y.iter()).map(|(&g, &s)| g * s * (T::one() - s)).collect(),
            ),
            Op::Tanh(a) => add_owned(
                &mut grads[a.0],
                g.iter().zip(y.iter()).map(|(&g, &t)| g * (T::one() - t * t)).collect(),
            ),
            Op::Elu(a, al) => {
                let xv = self.value(*a);
                add_owned(
                    &mut grads[a.0],
                    g.iter()
                        .zip(xv)
                        .zip(y.iter())
                        .map(|((&g, &x), &y)| if x > T::zero() { g } else { g * (y + *al) })
                        .collect(),
                )
            }
            Op::LeakyRelu(a, s) => {
                let xv = self.value(*a);
                add_owned(
                    &mut grads[a.0],
                    g.iter().zip(xv).map(|(&g, &x)| if x > T::zero() { g } else { g * *s }).collect(),
                )
            }
            Op::Relu(a) => {
                let xv = self.value(*a);
                add_owned(
                    &mut grads[a.0],
                    g.iter().zip(xv).map(|(&g, &x)| if x > T::zero() { g } else { T::zero() }).collect(),
                )
            }
            Op::Abs(a) => {
                let xv = self.value(*a);
                add_owned(
                    &mut grads[a.0],
                    g.iter()
                        .zip(xv)
                        .map(|(&g, &x)| {
                            if x > T::zero() {
                                g
                            } else if x < T::zero() {
                                -g
                            } else {
                                T::zero()
                            }
                        })
                        .collect(),
                )
            }
            Op::Sqrt(a) => {
                let e = T::of_f64(EPS);
                add_owned(
                    &mut grads[a.0],
                    g.iter()
                        .zip(y.iter())
                        .map(|(&g, &s)| g / (T::of_f64(2.0) * s.max(e)))
                        .collect(),
                )
            }
            Op::LogEps(a) => {
                let e = T::of_f64(EPS);
                let xv = self.value(*a);
                add_owned(&mut grads[a.0], g.iter().zip(xv).map(|(&g, &x)| g / (x + e)).collect())
            }
            Op::Clamp(a, lo, hi) => {
                let xv = self.value(*a);
                add_owned(
                    &mut grads[a.0],
                    g.iter()
                        .zip(xv)
                        .map(|(&g, &x)| if x > *lo && x < *hi { g } else { T::zero() })
                        .collect(),
                )
            }
            Op::Softmax(a) => {
                let n = *node.shape.last().unwrap();
                let mut ga = Vec::with_capacity(g.len());
                for (gr, yr) in g.chunks(n).zip(y.chunks(n)) {
                    let dot: T = gr.iter().zip(yr).map(|(&g, &y)| g * y).sum();
                    ga.extend(gr.iter().zip(yr).map(|(&g, &y)| y * (g - dot)));
                }
                add_owned(&mut grads[a.0], ga);
            }
            Op::Concat(parts, axis) => {
                let outer: usize = node.shape[..*axis].iter().product();
                let inner: usize = node.shape[axis + 1..].iter().product();
                let total = node.shape[*axis] * inner;
                let mut off = 0;
                for p in parts {
                    let len = self.shape(*p)[*axis] * inner;
                    if self.rg(*p) {
                        let mut gp = Vec::with_capacity(outer * len);
                        for o in 0..outer {
                            gp.extend_from_slice(&g[o * total + off..o * total + off + len]);
                        }
                        add_owned(&mut grads[p.0], gp);
                    }
                    off += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let s = self.shape(*x);
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let len = node.shape[*axis];
                let mut gx = vec![T::zero(); numel(s)];
                for o in 0..outer {
                    let dst = (o * s[*axis] + start) * inner;
                    gx[dst..dst + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                add_owned(&mut grads[x.0], gx);
            }
            Op::Reshape(a) => add_into(&mut grads[a.0], g),
            Op::Permute(a, perm) => {
                let (_, src) = kernels::permute_index(self.shape(*a), perm);
                let mut ga = vec![T::zero(); g.len()];
                for (&gv, &i) in g.iter().zip(&src) {
                    ga[i] = gv;
                }
                add_owned(&mut grads[a.0], ga);
            }
            Op::GatherLast(a, idx) => {
                let n = *self.shape(*a).last().unwrap();
                let mut ga = vec![T::zero(); numel(self.shape(*a))];
                for (row, grow) in ga.chunks_mut(n).zip(g.chunks(idx.len())) {
                    for (&i, &gv) in idx.iter().zip(grow) {
                        row[i] += gv;
                    }
                }
                add_owned(&mut grads[a.0], ga);
            }
            Op::Sum(a) => add_owned(&mut grads[a.0], vec![g[0]; numel(self.shape(*a))]),
            Op::Mean(a) => {
                let n = numel(self.shape(*a));
                add_owned(&mut grads[a.0], vec![g[0] / T::of_f64(n as f64); n]);
            }
            Op::SumLast(a) => {
                let n = *self.shape(*a).last().unwrap();
                add_owned(&mut grads[a.0], g.iter().flat_map(|&v| std::iter::repeat_n(v, n)).collect());
            }
            Op::L1Last(a) => {
                let n = *self.shape(*a).last().unwrap();
                let xv = self.value(*a);
                let mut ga = Vec::with_capacity(xv.len());
                for (row, &gv) in xv.chunks(n).zip(g) {
                    ga.extend(row.iter().map(|&x| {
                        if x > T::zero() {
                            gv
                        } else if x < T::zero() {
                            -gv
                        } else {
                            T::zero()
                        }
                    }));
                }
                add_owned(&mut grads[a.0], ga);
            }
            Op::L2Last(a) => {
                let n = *self.shape(*a).last().unwrap();
                let xv = self.value(*a);
                let mut ga = Vec::with_capacity(xv.len());
                for ((row, &gv), &nrm) in xv.chunks(n).zip(g).zip(y.iter()) {
                    ga.extend(row.iter().map(|&x| gv * x / nrm));
                }
                add_owned(&mut grads[a.0], ga);
            }
            Op::CosineLast(a, b) => {
                let n = *self.shape(*a).last().unwrap();
                let e = T::of_f64(EPS);
                let tiny = T::of_f64(1e-30);
                let (va, vb) = (self.value(*a), self.value(*b));
                let mut ga = Vec::with_capacity(va.len());
                let mut gb = Vec::with_capacity(vb.len());
                for ((ra, rb), &gv) in va.chunks(n).zip(vb.chunks(n)).zip(g) {
                    let (s, na, nb) = dot_norms(ra, rb);
                    let d = na * nb + e;
                    let (na_, nb_) = (na.max(tiny), nb.max(tiny));
                    for (&x, &z) in ra.iter().zip(rb) {
                        ga.push(gv * (z / d - s * nb * x / (na_ * d * d)));
                        gb.push(gv * (x / d - s * na * z / (nb_ * d * d)));
                    }
                }
                if self.rg(*a) {
                    add_owned(&mut grads[a.0], ga);
                }
                if self.rg(*b) {
                    add_owned(&mut grads[b.0], gb);
                }
            }
            Op::Lstm { x, w, b, dims, cache } => {
                let (gx, gw, gb) = kernels::lstm_backward(self.value(*x), self.value(*w), y, cache, g, *dims);
                if self.rg(*x) {
                    add_owned(&mut grads[x.0], gx);
                }
                if self.rg(*w) {
                    add_owned(&mut grads[w.0], gw);
                }
                if self.rg(*b) {
                    add_owned(&mut grads[b.0], gb);
                }
            }
            Op::Stft(wave, plan) => {
                let s = self.shape(*wave);
                let frames = node.shape[2];
                let per = 2 * frames * plan.bins();
                let mut gw = Vec::with_capacity(numel(s));
                for gi in g.chunks(per) {
                    gw.extend(plan.analyze_adjoint(gi, frames, s[1]));
                }
                add_owned(&mut grads[wave.0], gw);
            }
            Op::Istft(spec, plan) => {
                let frames = self.shape(*spec)[2];
                let len = node.shape[1];
                let mut gs = Vec::with_capacity(numel(self.shape(*spec)));
                for gi in g.chunks(len) {
                    gs.extend(plan.synthesize_adjoint(gi, frames));
                }
                add_owned(&mut grads[spec.0], gs);
            }
            Op::UpsampleDup(x) => {
                let [nb, c, t, f] = to4(self.shape(*x));
                let [_, out_c, _, out_f] = to4(&node.shape);
                let r = c / out_c;
                let inv = T::of_f64(1.0 / r as f64);
                let mut gx = vec![T::zero(); nb * c * t * f];
                for b in 0..nb {
                    for o in 0..out_c {
                        for ti in 0..t {
                            let grow = &g[((b * out_c + o) * t + ti) * out_f..((b * out_c + o) * t + ti + 1) * out_f];
                            for ci in o * r..(o + 1) * r {
                                let dst = &mut gx[((b * c + ci) * t + ti) * f..((b * c + ci) * t + ti + 1) * f];
                                for (fi, &gv) in grow.iter().enumerate() {
                                    dst[(fi / 2).min(f - 1)] += gv * inv;
                                }
                            }
                        }
                    }
                }
                add_owned(&mut grads[x.0], gx);
            }
        }
    }
}

fn to4(s: &[usize]) -> [usize; 4] {
    [s[0], s[1], s[2], s[3]]
}

fn dot_norms<T: Float>(a: &[T], b: &[T]) -> (T, T, T) {
    let mut d = T::zero();
    let mut na = T::zero();
    let mut nb = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        d += x * y;
        na += x * x;
        nb += y * y;
    }
    (d, na.sqrt(), nb.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn identity_matmul_returns_operand() {
        let mut tape = Tape::<f64>::new();
        let eye = tape.leaf(&t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]));
        let data: Vec<f64> = (0..9).map(|i| i as f64 * 0.7 - 2.0).collect();
        let a = tape.leaf(&t(&[3, 3], &data));
        let y = tape.matmul(eye, a).unwrap();
        assert_eq!(tape.value(y), &data[..]);
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(&[1], vec![0.0]).unwrap();
        let y = tape.sigmoid(x);
        assert_eq!(tape.value(y), &[0.5]);
    }

    #[test]
    fn square_sum_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t(&[1], &[3.0]).with_grad());
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap(), &[6.0]);
    }

    #[test]
    fn constant_loss_gives_zero_grads() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t(&[2], &[1.0, -2.0]).with_grad());
        let z = tape.mul_scalar(x, 0.0);
        let s = tape.sum(z);
        let loss = tape.add_scalar(s, 5.0);
        assert_eq!(tape.scalar(loss), 5.0);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_detached() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t(&[2], &[1.0, 2.0]).with_grad());
        assert!(matches!(tape.backward(x), Err(TensorError::NonScalarLoss(_))));
        let c = tape.constant(&[2], vec![1.0, 1.0]).unwrap();
        let s = tape.sum(c);
        assert_eq!(tape.backward(s).err(), Some(TensorError::DetachedLoss));
        let xs = tape.sum(x);
        let d = tape.detach(xs);
        assert_eq!(tape.backward(d).err(), Some(TensorError::DetachedLoss));
    }

    #[test]
    fn shape_errors_name_op_and_shapes() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(&[2, 3], vec![0.0; 6]).unwrap();
        let b = tape.constant(&[2, 2], vec![0.0; 4]).unwrap();
        let err = tape.add(a, b).unwrap_err();
        assert_eq!(err.to_string(), "add: shape mismatch [2, 3] vs [2, 2]");
        assert!(matches!(tape.matmul(a, a), Err(TensorError::ShapeMismatch { op: "matmul", .. })));
    }

    #[test]
    fn ops_without_grad_inputs_are_not_recorded() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(&[2], vec![1.0, 2.0]).unwrap();
        let b = tape.tanh(a);
        assert!(!tape.requires_grad(b));
        let p = tape.leaf(&Tensor::new(vec![2], vec![0.5, 0.5]).unwrap().with_grad());
        let c = tape.mul(b, p).unwrap();
        assert!(tape.requires_grad(c));
    }

    #[test]
    fn upsample_dup_repeats_bins() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t(&[1, 1, 1, 2], &[1.0, 2.0]));
        let y = tape.upsample_dup(x, 1, 4).unwrap();
        assert_eq!(tape.value(y), &[1.0, 1.0, 2.0, 2.0]);
        let y5 = tape.upsample_dup(x, 1, 5).unwrap();
        assert_eq!(tape.value(y5), &[1.0, 1.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn concat_and_slice_round_trip() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(&t(&[2, 2], &[1., 2., 3., 4.]));
        let b = tape.leaf(&t(&[2, 1], &[5., 6.]));
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(c), &[1., 2., 5., 3., 4., 6.]);
        let s = tape.slice(c, 1, 2, 1).unwrap();
        assert_eq!(tape.value(s), &[5., 6.]);
    }
}
