//! Dense numeric building blocks shared by the heat-map network and the
//! patch matcher: a scalar trait over `f32`/`f64`, GEMM, im2col convolution,
//! max pooling and fully connected layers, each with a hand-written backward
//! pass.
//!
//! Activations use a channel-major batch layout `[C][N][H][W]` so that one
//! GEMM covers a whole batch.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub trait Real:
    Float + FromPrimitive + ToPrimitive + NumAssign + Default + Debug + Send + Sync + Sum + 'static
{
    /// `c = alpha * a * b + beta * c` with explicit row/column strides.
    ///
    /// # Safety
    /// Same contract as `matrixmultiply::sgemm`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("representable literal")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Row-major `c (m x n) = op(a) (m x k) * op(b) (k x n)`, added to `c` when
/// `accumulate` is set. `trans_a` means `a` is stored as `k x m`.
#[allow(clippy::too_many_arguments)]
pub fn matmul<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert!(a.len() >= m * k, "lhs too short");
    assert!(b.len() >= k * n, "rhs too short");
    assert!(c.len() >= m * n, "output too short");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|v| *v = T::zero());
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
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
        )
    }
}

/// He-style normal initialisation, std = sqrt(2 / fan_in).
pub fn he_init<T: Real, R: Rng>(rng: &mut R, len: usize, fan_in: usize) -> Vec<T> {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    (0..len)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            T::lit(z * std)
        })
        .collect()
}

pub fn all_finite<T: Real>(v: &[T]) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Output extent of a convolution along one axis, `None` when the input is
/// smaller than the kernel.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T> {
    pub in_c: usize,
    pub out_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    /// `out_c x (in_c * kh * kw)`, row-major.
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

/// Geometry of one convolution call over a `[C][N][H][W]` batch.
#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub oh: usize,
    pub ow: usize,
}

impl<T: Real> Conv2d<T> {
    pub fn zeros(in_c: usize, out_c: usize, k: usize, stride: usize, pad: usize) -> Self {
        Conv2d {
            in_c,
            out_c,
            kh: k,
            kw: k,
            stride,
            pad,
            weight: vec![T::zero(); out_c * in_c * k * k],
            bias: vec![T::zero(); out_c],
        }
    }

    pub fn he<R: Rng>(rng: &mut R, in_c: usize, out_c: usize, k: usize, stride: usize, pad: usize) -> Self {
        let fan_in = in_c * k * k;
        Conv2d {
            weight: he_init(rng, out_c * fan_in, fan_in),
            ..Self::zeros(in_c, out_c, k, stride, pad)
        }
    }

    fn rows(&self) -> usize {
        self.in_c * self.kh * self.kw
    }

    pub fn geom(&self, n: usize, h: usize, w: usize) -> Option<ConvGeom> {
        Some(ConvGeom {
            n,
            h,
            w,
            oh: conv_out_dim(h, self.kh, self.stride, self.pad)?,
            ow: conv_out_dim(w, self.kw, self.stride, self.pad)?,
        })
    }

    fn im2col(&self, x: &[T], g: ConvGeom) -> Vec<T> {
        let p_out = g.oh * g.ow;
        let p_in = g.h * g.w;
        let cols_n = g.n * p_out;
        let mut cols = vec![T::zero(); self.rows() * cols_n];
        for c in 0..self.in_c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let r = (c * self.kh + ky) * self.kw + kx;
                    let row = &mut cols[r * cols_n..(r + 1) * cols_n];
                    for b in 0..g.n {
                        let src = &x[(c * g.n + b) * p_in..(c * g.n + b + 1) * p_in];
                        let dst = &mut row[b * p_out..(b + 1) * p_out];
                        for oy in 0..g.oh {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            if iy < 0 || iy >= g.h as isize {
                                continue;
                            }
                            let src_row = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                            let dst_row = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                            for (ox, d) in dst_row.iter_mut().enumerate() {
                                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                if ix >= 0 && ix < g.w as isize {
                                    *d = src_row[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[T], g: ConvGeom) -> Vec<T> {
        let p_out = g.oh * g.ow;
        let p_in = g.h * g.w;
        let cols_n = g.n * p_out;
        let mut dx = vec![T::zero(); self.in_c * g.n * p_in];
        for c in 0..self.in_c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let r = (c * self.kh + ky) * self.kw + kx;
                    let row = &cols[r * cols_n..(r + 1) * cols_n];
                    for b in 0..g.n {
                        let dst = &mut dx[(c * g.n + b) * p_in..(c * g.n + b + 1) * p_in];
                        let src = &row[b * p_out..(b + 1) * p_out];
                        for oy in 0..g.oh {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            if iy < 0 || iy >= g.h as isize {
                                continue;
                            }
                            for ox in 0..g.ow {
                                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                if ix >= 0 && ix < g.w as isize {
                                    dst[iy as usize * g.w + ix as usize] += src[oy * g.ow + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    /// Returns the pre-activation output `[out_c][N][oh][ow]` and the column
    /// buffer needed by [`Conv2d::backward`].
    pub fn forward(&self, x: &[T], g: ConvGeom) -> (Vec<T>, Vec<T>) {
        assert_eq!(x.len(), self.in_c * g.n * g.h * g.w, "conv input shape");
        let cols = self.im2col(x, g);
        let cols_n = g.n * g.oh * g.ow;
        let mut y = vec![T::zero(); self.out_c * cols_n];
        for (o, chunk) in y.chunks_exact_mut(cols_n).enumerate() {
            chunk.iter_mut().for_each(|v| *v = self.bias[o]);
        }
        matmul(self.out_c, self.rows(), cols_n, &self.weight, false, &cols, false, &mut y, true);
        (y, cols)
    }

    /// Accumulates parameter gradients into `grad` and returns the input
    /// gradient when `want_dx` is set.
    pub fn backward(
        &self,
        dy: &[T],
        cols: &[T],
        g: ConvGeom,
        grad: &mut Conv2d<T>,
        want_dx: bool,
    ) -> Option<Vec<T>> {
        let cols_n = g.n * g.oh * g.ow;
        let rows = self.rows();
        matmul(self.out_c, cols_n, rows, dy, false, cols, true, &mut grad.weight, true);
        for (o, chunk) in dy.chunks_exact(cols_n).enumerate() {
            grad.bias[o] += chunk.iter().copied().sum::<T>();
        }
        if !want_dx {
            return None;
        }
        let mut dcols = vec![T::zero(); rows * cols_n];
        matmul(rows, self.out_c, cols_n, &self.weight, true, dy, false, &mut dcols, false);
        Some(self.col2im(&dcols, g))
    }

    pub fn zeros_like(&self) -> Self {
        Conv2d {
            weight: vec![T::zero(); self.weight.len()],
            bias: vec![T::zero(); self.bias.len()],
            ..self.clone()
        }
    }

    pub fn cast<U: Real>(&self) -> Conv2d<U> {
        Conv2d {
            in_c: self.in_c,
            out_c: self.out_c,
            kh: self.kh,
            kw: self.kw,
            stride: self.stride,
            pad: self.pad,
            weight: cast_vec(&self.weight),
            bias: cast_vec(&self.bias),
        }
    }
}

pub fn cast_vec<T: Real, U: Real>(v: &[T]) -> Vec<U> {
    v.iter().map(|x| U::lit(x.as_f64())).collect()
}

pub fn relu_inplace<T: Real>(v: &mut [T]) {
    for x in v {
        if *x < T::zero() {
            *x = T::zero();
        }
    }
}

/// Zeroes `grad` wherever the forward output was clamped.
pub fn relu_backward<T: Real>(grad: &mut [T], activated: &[T]) {
    for (g, a) in grad.iter_mut().zip(activated) {
        if *a <= T::zero() {
            *g = T::zero();
        }
    }
}

/// 2x2 stride-2 max pooling (floor) over `[C][N][H][W]`. Returns the pooled
/// tensor and, per output cell, the flat input index that won.
pub fn maxpool2<T: Real>(x: &[T], c: usize, n: usize, h: usize, w: usize) -> (Vec<T>, Vec<u32>, usize, usize) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * n * oh * ow);
    let mut arg = Vec::with_capacity(c * n * oh * ow);
    for plane in 0..c * n {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best as u32);
            }
        }
    }
    (out, arg, oh, ow)
}

pub fn maxpool2_backward<T: Real>(dy: &[T], arg: &[u32], input_len: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); input_len];
    for (g, &i) in dy.iter().zip(arg) {
        dx[i as usize] += *g;
    }
    dx
}

/// Fully connected layer, `y = W x + b` with `W` stored `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    pub input: usize,
    pub output: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> Dense<T> {
    pub fn zeros(input: usize, output: usize) -> Self {
        Dense {
            input,
            output,
            weight: vec![T::zero(); input * output],
            bias: vec![T::zero(); output],
        }
    }

    pub fn he<R: Rng>(rng: &mut R, input: usize, output: usize) -> Self {
        Dense {
            weight: he_init(rng, input * output, input),
            ..Self::zeros(input, output)
        }
    }

    /// `x` is `[N][in]`, result `[N][out]`.
    pub fn forward(&self, x: &[T], n: usize) -> Vec<T> {
        assert_eq!(x.len(), n * self.input, "dense input shape");
        let mut y = Vec::with_capacity(n * self.output);
        for _ in 0..n {
            y.extend_from_slice(&self.bias);
        }
        matmul(n, self.input, self.output, x, false, &self.weight, true, &mut y, true);
        y
    }

    pub fn backward(&self, dy: &[T], x: &[T], n: usize, grad: &mut Dense<T>, want_dx: bool) -> Option<Vec<T>> {
        matmul(self.output, n, self.input, dy, true, x, false, &mut grad.weight, true);
        for row in dy.chunks_exact(self.output) {
            for (gb, d) in grad.bias.iter_mut().zip(row) {
                *gb += *d;
            }
        }
        if !want_dx {
            return None;
        }
        let mut dx = vec![T::zero(); n * self.input];
        matmul(n, self.output, self.input, dy, false, &self.weight, false, &mut dx, false);
        Some(dx)
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.input, self.output)
    }

    pub fn cast<U: Real>(&self) -> Dense<U> {
        Dense {
            input: self.input,
            output: self.output,
            weight: cast_vec(&self.weight),
            bias: cast_vec(&self.bias),
        }
    }
}

/// SGD with momentum and L2 weight decay applied to one flat parameter
/// slice: `v = m v - lr (g + wd p)`, `p += v`.
pub fn sgd_step<T: Real>(params: &mut [T], grads: &[T], velocity: &mut [T], lr: f64, momentum: f64, decay: f64) {
    let (lr, momentum, decay) = (T::lit(lr), T::lit(momentum), T::lit(decay));
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v - lr * (*g + decay * *p);
        *p += *v;
    }
}

/// Weights of a 3x3 convolution regrouped as `[(ky * 3 + kx) * in_c + c][o]`
/// for the channels-last kernel below.
pub fn hwc_weights<T: Real, const O: usize>(conv: &Conv2d<T>) -> Option<(Vec<[T; O]>, [T; O])> {
    if conv.out_c != O || conv.kh != 3 || conv.kw != 3 || conv.stride != 1 || conv.pad != 0 {
        return None;
    }
    let cin = conv.in_c;
    let mut wt = vec![[T::zero(); O]; 9 * cin];
    for (o, row) in conv.weight.chunks_exact(cin * 9).enumerate() {
        for c in 0..cin {
            for tap in 0..9 {
                wt[tap * cin + c][o] = row[c * 9 + tap];
            }
        }
    }
    let mut bias = [T::zero(); O];
    bias.copy_from_slice(&conv.bias);
    Some((wt, bias))
}

#[inline(always)]
fn conv3x3_relu_hwc_body<T: Real, const O: usize>(
    x: &[T],
    n: usize,
    h: usize,
    w: usize,
    cin: usize,
    wt: &[[T; O]],
    bias: &[T; O],
) -> Vec<[T; O]> {
    let (oh, ow) = (h - 2, w - 2);
    let mut out = vec![[T::zero(); O]; n * oh * ow];
    let span = 3 * cin;
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = *bias;
                for ky in 0..3 {
                    let start = ((b * h + oy + ky) * w + ox) * cin;
                    let taps = &wt[ky * span..(ky + 1) * span];
                    for (&v, wv) in x[start..start + span].iter().zip(taps) {
                        for o in 0..O {
                            acc[o] += v * wv[o];
                        }
                    }
                }
                for a in acc.iter_mut() {
                    if *a < T::zero() {
                        *a = T::zero();
                    }
                }
                out[(b * oh + oy) * ow + ox] = acc;
            }
        }
    }
    out
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
fn conv3x3_relu_hwc_avx2<T: Real, const O: usize>(
    x: &[T],
    n: usize,
    h: usize,
    w: usize,
    cin: usize,
    wt: &[[T; O]],
    bias: &[T; O],
) -> Vec<[T; O]> {
    conv3x3_relu_hwc_body(x, n, h, w, cin, wt, bias)
}

/// Valid 3x3 stride-1 convolution followed by ReLU on `n` channels-last
/// images of `h x w x cin`; returns `n x (h-2) x (w-2)` pixels of `O`
/// channels.
pub fn conv3x3_relu_hwc<T: Real, const O: usize>(
    x: &[T],
    n: usize,
    h: usize,
    w: usize,
    cin: usize,
    wt: &[[T; O]],
    bias: &[T; O],
) -> Vec<[T; O]> {
    assert_eq!(x.len(), n * h * w * cin, "conv input shape");
    assert_eq!(wt.len(), 9 * cin, "conv weight shape");
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma") {
        // SAFETY: the required CPU features were detected above.
        return unsafe { conv3x3_relu_hwc_avx2(x, n, h, w, cin, wt, bias) };
    }
    conv3x3_relu_hwc_body(x, n, h, w, cin, wt, bias)
}

/// 2x2 max pooling (floor) on channels-last pixels.
pub fn maxpool2_hwc<T: Real, const O: usize>(x: &[[T; O]], n: usize, h: usize, w: usize) -> Vec<[T; O]> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * oh * ow);
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let at = |dy: usize, dx: usize| &x[(b * h + 2 * oy + dy) * w + 2 * ox + dx];
                let mut m = *at(0, 0);
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    for (a, &v) in m.iter_mut().zip(at(dy, dx)) {
                        if v > *a {
                            *a = v;
                        }
                    }
                }
                out.push(m);
            }
        }
    }
    out
}
