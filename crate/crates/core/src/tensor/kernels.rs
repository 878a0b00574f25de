//! Plain-slice numeric kernels shared by the tape ops and the streaming path.
//!
//! Convolution layout is `[batch, channels, time, freq]`. A forward
//! convolution reads input position `o * stride + k - front`; the transposed
//! convolution writes to the same position. With matching parameters the two
//! are exact adjoints, which is how the backward rules are built.

use super::Float;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Geometry {
    pub stride: (usize, usize),
    /// Offset subtracted from `o * stride + k` on (time, freq).
    pub front: (usize, usize),
}

/// Range of output indices `o` in `0..n_out` for which
/// `o * stride + k - front` lands in `0..n_in`.
#[inline]
fn valid_range(n_in: usize, n_out: usize, stride: usize, k: usize, front: usize) -> (usize, usize) {
    // o*stride + k >= front
    let lo = if k >= front {
        0
    } else {
        (front - k).div_ceil(stride)
    };
    // o*stride + k - front <= n_in - 1
    let limit = n_in + front;
    let hi = if limit <= k {
        0
    } else {
        ((limit - k - 1) / stride + 1).min(n_out)
    };
    (lo.min(hi), hi)
}

/// Strided matrix view over a slice.
#[derive(Clone, Copy)]
struct Mat<'a, T> {
    data: &'a [T],
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a, T> Mat<'a, T> {
    fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    fn t(self) -> Self {
        Self {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
            ..self
        }
    }

    fn fits(&self) -> bool {
        self.rows == 0 || self.cols == 0 || (self.rows - 1) * self.rs + (self.cols - 1) * self.cs < self.data.len()
    }
}

/// `c = a * b + beta * c` with `c` row-major `a.rows x b.cols`.
fn gemm<T: Float>(a: Mat<T>, b: Mat<T>, beta: T, c: &mut [T]) {
    assert_eq!(a.cols, b.rows, "gemm inner dimensions");
    assert!(a.fits() && b.fits() && c.len() >= a.rows * b.cols, "gemm operand out of bounds");
    // SAFETY: bounds checked above; `c` is a distinct mutable slice.
    unsafe {
        T::gemm(
            a.rows,
            a.cols,
            b.cols,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            b.cols as isize,
            1,
        );
    }
}

/// Unfolds one `[c, h, w]` item into `[c*kh*kw, ho*wo]` columns, with zeros
/// where the kernel reads padding.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Float>(x: &[T], ci: usize, h: usize, wd: usize, kernel: (usize, usize), geo: Geometry, out_hw: (usize, usize), cols: &mut [T]) {
    let (kh, kw) = kernel;
    let (ho, wo) = out_hw;
    let (sh, sw) = geo.stride;
    let (ft, ff) = geo.front;
    let n = ho * wo;
    cols.iter_mut().for_each(|v| *v = T::zero());
    for c in 0..ci {
        let xbase = c * h * wd;
        for ki in 0..kh {
            let (ilo, ihi) = valid_range(h, ho, sh, ki, ft);
            for kj in 0..kw {
                let (jlo, jhi) = valid_range(wd, wo, sw, kj, ff);
                let row = &mut cols[((c * kh + ki) * kw + kj) * n..][..n];
                for i in ilo..ihi {
                    let xrow = &x[xbase + (i * sh + ki - ft) * wd..][..wd];
                    let dst = &mut row[i * wo..(i + 1) * wo];
                    for j in jlo..jhi {
                        dst[j] = xrow[j * sw + kj - ff];
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into `[c, h, w]`.
#[allow(clippy::too_many_arguments)]
fn col2im<T: Float>(cols: &[T], co: usize, h: usize, wd: usize, kernel: (usize, usize), geo: Geometry, in_hw: (usize, usize), out: &mut [T]) {
    let (kh, kw) = kernel;
    let (hy, wy) = in_hw;
    let (sh, sw) = geo.stride;
    let (ft, ff) = geo.front;
    let n = hy * wy;
    for o in 0..co {
        let obase = o * h * wd;
        for ki in 0..kh {
            let (ilo, ihi) = valid_range(h, hy, sh, ki, ft);
            for kj in 0..kw {
                let (jlo, jhi) = valid_range(wd, wy, sw, kj, ff);
                let row = &cols[((o * kh + ki) * kw + kj) * n..][..n];
                for i in ilo..ihi {
                    let orow = &mut out[obase + (i * sh + ki - ft) * wd..][..wd];
                    let src = &row[i * wy..(i + 1) * wy];
                    for j in jlo..jhi {
                        orow[j * sw + kj - ff] += src[j];
                    }
                }
            }
        }
    }
}

/// `y[b,o,i,j] = sum_{c,ki,kj} w[o,c,ki,kj] * x[b,c,i*s+ki-f, j*s+kj-f]`.
#[allow(clippy::too_many_arguments)]
pub fn conv_forward<T: Float>(
    x: &[T],
    xs: [usize; 4],
    w: &[T],
    ws: [usize; 4],
    geo: Geometry,
    out_hw: (usize, usize),
) -> Vec<T> {
    let [nb, ci, h, wd] = xs;
    let [co, wci, kh, kw] = ws;
    debug_assert_eq!(ci, wci);
    let n = out_hw.0 * out_hw.1;
    let k = ci * kh * kw;
    let mut y = vec![T::zero(); nb * co * n];
    let mut cols = vec![T::zero(); k * n];
    for b in 0..nb {
        im2col(&x[b * ci * h * wd..(b + 1) * ci * h * wd], ci, h, wd, (kh, kw), geo, out_hw, &mut cols);
        gemm(Mat::new(w, co, k), Mat::new(&cols, k, n), T::zero(), &mut y[b * co * n..(b + 1) * co * n]);
    }
    y
}

/// Adjoint of [`conv_forward`]: scatters `y[b,c,i,j] * w[c,o,ki,kj]` into
/// `out[b,o,i*s+ki-f, j*s+kj-f]`. Weight layout is `[in, out, kh, kw]`.
pub fn conv_transpose_forward<T: Float>(
    y: &[T],
    ys: [usize; 4],
    w: &[T],
    ws: [usize; 4],
    geo: Geometry,
    out_hw: (usize, usize),
) -> Vec<T> {
    let [nb, ci, hy, wy] = ys;
    let [wci, co, kh, kw] = ws;
    debug_assert_eq!(ci, wci);
    let (ho, wo) = out_hw;
    let ny = hy * wy;
    let k = co * kh * kw;
    let mut out = vec![T::zero(); nb * co * ho * wo];
    let mut cols = vec![T::zero(); k * ny];
    for b in 0..nb {
        gemm(Mat::new(w, ci, k).t(), Mat::new(&y[b * ci * ny..(b + 1) * ci * ny], ci, ny), T::zero(), &mut cols);
        col2im(&cols, co, ho, wo, (kh, kw), geo, (hy, wy), &mut out[b * co * ho * wo..(b + 1) * co * ho * wo]);
    }
    out
}

/// Gradient of [`conv_forward`] with respect to its weight:
/// `gw[o,c,ki,kj] = sum_{b,i,j} gy[b,o,i,j] * x[b,c,i*s+ki-f, j*s+kj-f]`.
pub fn conv_weight_grad<T: Float>(
    x: &[T],
    xs: [usize; 4],
    gy: &[T],
    gys: [usize; 4],
    kernel: (usize, usize),
    geo: Geometry,
) -> Vec<T> {
    let [nb, ci, h, wd] = xs;
    let [_, co, ho, wo] = gys;
    let (kh, kw) = kernel;
    let n = ho * wo;
    let k = ci * kh * kw;
    let mut gw = vec![T::zero(); co * k];
    let mut cols = vec![T::zero(); k * n];
    for b in 0..nb {
        im2col(&x[b * ci * h * wd..(b + 1) * ci * h * wd], ci, h, wd, kernel, geo, (ho, wo), &mut cols);
        gemm(Mat::new(&gy[b * co * n..(b + 1) * co * n], co, n), Mat::new(&cols, k, n).t(), T::one(), &mut gw);
    }
    gw
}

/// Adds `bias[o]` to every element of channel `o`.
pub fn add_channel_bias<T: Float>(y: &mut [T], nb: usize, co: usize, plane: usize, bias: &[T]) {
    for b in 0..nb {
        for o in 0..co {
            let base = (b * co + o) * plane;
            let bv = bias[o];
            for v in &mut y[base..base + plane] {
                *v += bv;
            }
        }
    }
}

pub fn channel_sum<T: Float>(g: &[T], nb: usize, co: usize, plane: usize) -> Vec<T> {
    let mut out = vec![T::zero(); co];
    for b in 0..nb {
        for (o, acc) in out.iter_mut().enumerate() {
            let base = (b * co + o) * plane;
            *acc += g[base..base + plane].iter().copied().sum::<T>();
        }
    }
    out
}

/// `c[m,n] += a[m,k] * b[k,n]`.
pub fn matmul_acc<T: Float>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    if m > 1 {
        return gemm(Mat::new(&a[..m * k], m, k), Mat::new(&b[..k * n], k, n), T::one(), &mut c[..m * n]);
    }
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m,k] += g[m,n] * b[k,n]^T`.
pub fn matmul_bt_acc<T: Float>(g: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    if m > 1 {
        return gemm(Mat::new(&g[..m * n], m, n), Mat::new(&b[..k * n], k, n).t(), T::one(), &mut c[..m * k]);
    }
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = T::zero();
            for (&gv, &bv) in grow.iter().zip(brow) {
                acc += gv * bv;
            }
            c[i * k + p] += acc;
        }
    }
}

/// `c[k,n] += a[m,k]^T * g[m,n]`.
pub fn matmul_at_acc<T: Float>(a: &[T], g: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    if m > 1 {
        return gemm(Mat::new(&a[..m * k], m, k).t(), Mat::new(&g[..m * n], m, n), T::one(), &mut c[..k * n]);
    }
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &gv) in crow.iter_mut().zip(grow) {
                *cv += av * gv;
            }
        }
    }
}

pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Output index `k` of a permutation reads input index `src[k]`.
pub fn permute_index(shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let n: usize = shape.iter().product();
    let mut src = Vec::with_capacity(n);
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    for _ in 0..n {
        let mut off = 0;
        for d in 0..rank {
            off += idx[d] * in_strides[perm[d]];
        }
        src.push(off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    (out_shape, src)
}

#[inline]
pub fn sigmoid<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Per-step activations saved for back-propagation through time.
#[derive(Clone, Debug, Default)]
pub struct LstmCache<T> {
    /// `[batch, time, groups, 4*hidden_g]` gate activations in (i, f, g, o) order.
    pub gates: Vec<T>,
    /// `[batch, time, hidden]` cell states.
    pub cells: Vec<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LstmDims {
    pub batch: usize,
    pub time: usize,
    pub input: usize,
    pub hidden: usize,
    pub groups: usize,
}

impl LstmDims {
    pub fn in_g(&self) -> usize {
        self.input / self.groups
    }
    pub fn hid_g(&self) -> usize {
        self.hidden / self.groups
    }
}

/// Grouped LSTM forward. Weight layout `[groups, in_g + hid_g, 4*hid_g]`,
/// bias `[groups, 4*hid_g]`. `state` holds `(h, c)` of shape `[batch, hidden]`
/// and is updated in place to the final state.
pub fn lstm_forward<T: Float>(
    x: &[T],
    w: &[T],
    bias: &[T],
    d: LstmDims,
    state: &mut (Vec<T>, Vec<T>),
) -> (Vec<T>, LstmCache<T>) {
    let (ig, hg, g) = (d.in_g(), d.hid_g(), d.groups);
    let rows = ig + hg;
    let mut out = vec![T::zero(); d.batch * d.time * d.hidden];
    let mut cache = LstmCache {
        gates: vec![T::zero(); d.batch * d.time * g * 4 * hg],
        cells: vec![T::zero(); d.batch * d.time * d.hidden],
    };
    let mut z = vec![T::zero(); 4 * hg];
    let mut inp = vec![T::zero(); rows];
    for b in 0..d.batch {
        for t in 0..d.time {
            for gi in 0..g {
                let xoff = (b * d.time + t) * d.input + gi * ig;
                inp[..ig].copy_from_slice(&x[xoff..xoff + ig]);
                let hoff = b * d.hidden + gi * hg;
                inp[ig..].copy_from_slice(&state.0[hoff..hoff + hg]);
                z.copy_from_slice(&bias[gi * 4 * hg..(gi + 1) * 4 * hg]);
                let wg = &w[gi * rows * 4 * hg..(gi + 1) * rows * 4 * hg];
                matmul_acc(&inp, wg, &mut z, 1, rows, 4 * hg);
                let goff = ((b * d.time + t) * g + gi) * 4 * hg;
                let gates = &mut cache.gates[goff..goff + 4 * hg];
                for k in 0..hg {
                    let i_g = sigmoid(z[k]);
                    let f_g = sigmoid(z[hg + k]);
                    let g_g = z[2 * hg + k].tanh();
                    let o_g = sigmoid(z[3 * hg + k]);
                    gates[k] = i_g;
                    gates[hg + k] = f_g;
                    gates[2 * hg + k] = g_g;
                    gates[3 * hg + k] = o_g;
                    let c_prev = state.1[hoff + k];
                    let c = f_g * c_prev + i_g * g_g;
                    let h = o_g * c.tanh();
                    state.1[hoff + k] = c;
                    state.0[hoff + k] = h;
                    let coff = (b * d.time + t) * d.hidden + gi * hg + k;
                    cache.cells[coff] = c;
                    out[coff] = h;
                }
            }
        }
    }
    (out, cache)
}

/// Back-propagation through time for [`lstm_forward`] started from a zero
/// state. Returns `(gx, gw, gb)`.
pub fn lstm_backward<T: Float>(
    x: &[T],
    w: &[T],
    out: &[T],
    cache: &LstmCache<T>,
    gout: &[T],
    d: LstmDims,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (ig, hg, g) = (d.in_g(), d.hid_g(), d.groups);
    let rows = ig + hg;
    let mut gx = vec![T::zero(); x.len()];
    let mut gw = vec![T::zero(); w.len()];
    let mut gb = vec![T::zero(); g * 4 * hg];
    let mut dh_next = vec![T::zero(); d.hidden];
    let mut dc_next = vec![T::zero(); d.hidden];
    let mut dz = vec![T::zero(); 4 * hg];
    let mut inp = vec![T::zero(); rows];
    let mut dinp = vec![T::zero(); rows];
    let one = T::one();
    for b in 0..d.batch {
        dh_next.iter_mut().for_each(|v| *v = T::zero());
        dc_next.iter_mut().for_each(|v| *v = T::zero());
        for t in (0..d.time).rev() {
            for gi in 0..g {
                let goff = ((b * d.time + t) * g + gi) * 4 * hg;
                let gates = &cache.gates[goff..goff + 4 * hg];
                let row = (b * d.time + t) * d.hidden + gi * hg;
                for k in 0..hg {
                    let i_g = gates[k];
                    let f_g = gates[hg + k];
                    let g_g = gates[2 * hg + k];
                    let o_g = gates[3 * hg + k];
                    let c = cache.cells[row + k];
                    let c_prev = if t > 0 {
                        cache.cells[row - d.hidden + k]
                    } else {
                        T::zero()
                    };
                    let tc = c.tanh();
                    let dh = gout[row + k] + dh_next[gi * hg + k];
                    let d_o = dh * tc;
                    let dc = dh * o_g * (one - tc * tc) + dc_next[gi * hg + k];
                    let d_i = dc * g_g;
                    let d_g = dc * i_g;
                    let d_f = dc * c_prev;
                    dc_next[gi * hg + k] = dc * f_g;
                    dz[k] = d_i * i_g * (one - i_g);
                    dz[hg + k] = d_f * f_g * (one - f_g);
                    dz[2 * hg + k] = d_g * (one - g_g * g_g);
                    dz[3 * hg + k] = d_o * o_g * (one - o_g);
                }
                let xoff = (b * d.time + t) * d.input + gi * ig;
                inp[..ig].copy_from_slice(&x[xoff..xoff + ig]);
                if t > 0 {
                    let hoff = (b * d.time + t - 1) * d.hidden + gi * hg;
                    inp[ig..].copy_from_slice(&out[hoff..hoff + hg]);
                } else {
                    inp[ig..].iter_mut().for_each(|v| *v = T::zero());
                }
                let wg = &w[gi * rows * 4 * hg..(gi + 1) * rows * 4 * hg];
                let gwg = &mut gw[gi * rows * 4 * hg..(gi + 1) * rows * 4 * hg];
                matmul_at_acc(&inp, &dz, gwg, 1, rows, 4 * hg);
                for (acc, &v) in gb[gi * 4 * hg..(gi + 1) * 4 * hg].iter_mut().zip(&dz) {
                    *acc += v;
                }
                dinp.iter_mut().for_each(|v| *v = T::zero());
                matmul_bt_acc(&dz, wg, &mut dinp, 1, rows, 4 * hg);
                for (acc, &v) in gx[xoff..xoff + ig].iter_mut().zip(&dinp[..ig]) {
                    *acc += v;
                }
                dh_next[gi * hg..(gi + 1) * hg].copy_from_slice(&dinp[ig..]);
            }
        }
    }
    (gx, gw, gb)
}
