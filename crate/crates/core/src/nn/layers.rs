//! Individual layers: convolution (im2col + GEMM), batch normalization,
//! leaky rectifier, max pooling, bilinear upsampling, logistic squash.

use ndarray::{Array1, Array2, Array4};
use rand::Rng;

use super::{Layer, ParamRef};

/// Padding convention for convolutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    /// Edge-inclusive mirror (`abc -> b a | a b c | c b`).
    Reflect,
}

fn reflect_index(i: i64, n: i64) -> usize {
    let mut i = i;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - 1 - i;
        } else {
            return i as usize;
        }
    }
}

fn pad(x: &Array4<f64>, p: usize, mode: PadMode) -> Array4<f64> {
    if p == 0 {
        return x.clone();
    }
    let (n, c, h, w) = x.dim();
    let (hp, wp) = (h + 2 * p, w + 2 * p);
    let mut out = Array4::zeros((n, c, hp, wp));
    let xs = x.as_slice().expect("standard layout");
    let os = out.as_slice_mut().expect("standard layout");
    // Column source index per padded column, or usize::MAX for zero fill.
    let col_src: Vec<usize> = (0..wp)
        .map(|j| {
            let sj = j as i64 - p as i64;
            match mode {
                PadMode::Zero => {
                    if sj < 0 || sj >= w as i64 {
                        usize::MAX
                    } else {
                        sj as usize
                    }
                }
                PadMode::Reflect => reflect_index(sj, w as i64),
            }
        })
        .collect();
    for bc in 0..n * c {
        let src_base = bc * h * w;
        let dst_base = bc * hp * wp;
        for i in 0..hp {
            let si = i as i64 - p as i64;
            let src_row = match mode {
                PadMode::Zero => {
                    if si < 0 || si >= h as i64 {
                        usize::MAX
                    } else {
                        si as usize
                    }
                }
                PadMode::Reflect => reflect_index(si, h as i64),
            };
            let drow = &mut os[dst_base + i * wp..dst_base + (i + 1) * wp];
            if src_row == usize::MAX {
                continue; // zeros already
            }
            let srow = &xs[src_base + src_row * w..src_base + src_row * w + w];
            for (j, d) in drow.iter_mut().enumerate() {
                let sj = col_src[j];
                if sj != usize::MAX {
                    *d = srow[sj];
                }
            }
        }
    }
    out
}

/// Adjoint of `pad`: folds gradients at padded positions back onto their
/// source pixels.
fn unpad_accumulate(grad_padded: &Array4<f64>, p: usize, mode: PadMode, h: usize, w: usize) -> Array4<f64> {
    if p == 0 {
        return grad_padded.clone();
    }
    let (n, c, hp, wp) = grad_padded.dim();
    let mut out = Array4::zeros((n, c, h, w));
    let gs = grad_padded.as_slice().expect("standard layout");
    let os = out.as_slice_mut().expect("standard layout");
    let col_src: Vec<usize> = (0..wp)
        .map(|j| {
            let sj = j as i64 - p as i64;
            match mode {
                PadMode::Zero => {
                    if sj < 0 || sj >= w as i64 {
                        usize::MAX
                    } else {
                        sj as usize
                    }
                }
                PadMode::Reflect => reflect_index(sj, w as i64),
            }
        })
        .collect();
    for bc in 0..n * c {
        let src_base = bc * hp * wp;
        let dst_base = bc * h * w;
        for i in 0..hp {
            let si = i as i64 - p as i64;
            let dst_row = match mode {
                PadMode::Zero => {
                    if si < 0 || si >= h as i64 {
                        usize::MAX
                    } else {
                        si as usize
                    }
                }
                PadMode::Reflect => reflect_index(si, h as i64),
            };
            if dst_row == usize::MAX {
                continue;
            }
            let grow = &gs[src_base + i * wp..src_base + (i + 1) * wp];
            let dbase = dst_base + dst_row * w;
            for (j, g) in grow.iter().enumerate() {
                let sj = col_src[j];
                if sj != usize::MAX {
                    os[dbase + sj] += *g;
                }
            }
        }
    }
    out
}


/// `a (m x k) . b (k x n)`: row-axpy kernel for thin shapes, BLAS-style
/// multiply otherwise.
fn gemm(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let (m, k) = a.dim();
    let n = b.dim().1;
    if m <= 8 || k <= 8 {
        let mut out = Array2::<f64>::zeros((m, n));
        let bs = b.as_slice().expect("contiguous");
        let os = out.as_slice_mut().expect("contiguous");
        for i in 0..m {
            let orow = &mut os[i * n..(i + 1) * n];
            for r in 0..k {
                let w = a[[i, r]];
                if w == 0.0 {
                    continue;
                }
                let brow = &bs[r * n..(r + 1) * n];
                for (o, bv) in orow.iter_mut().zip(brow.iter()) {
                    *o += w * bv;
                }
            }
        }
        out
    } else {
        a.dot(b)
    }
}

/// `a (m x n) . b^T (n x p)` where both operands are row-contiguous:
/// row-dot kernel for thin shapes.
fn gemm_abt(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let (m, n) = a.dim();
    let p = b.dim().0;
    if m <= 8 || p <= 8 {
        let mut out = Array2::<f64>::zeros((m, p));
        let asl = a.as_slice().expect("contiguous");
        let bsl = b.as_slice().expect("contiguous");
        for i in 0..m {
            let arow = &asl[i * n..(i + 1) * n];
            for j in 0..p {
                let brow = &bsl[j * n..(j + 1) * n];
                let mut acc = 0.0;
                for (x, y) in arow.iter().zip(brow.iter()) {
                    acc += x * y;
                }
                out[[i, j]] = acc;
            }
        }
        out
    } else {
        a.dot(&b.t())
    }
}

/// 2-D convolution with square kernels, stride, and padding.
pub struct Conv2d {
    pub weight: Array4<f64>, // (out, in, k, k)
    pub bias: Array1<f64>,
    pub grad_weight: Array4<f64>,
    pub grad_bias: Array1<f64>,
    kernel: usize,
    stride: usize,
    padding: usize,
    pad_mode: PadMode,
    cache: Option<ConvCache>,
}

struct ConvCache {
    col: Array2<f64>, // (in*k*k, n*oh*ow)
    input_dim: (usize, usize, usize, usize),
    out_dim: (usize, usize),
}

impl Conv2d {
    /// Kaiming-uniform weights, zero bias.
    pub fn new<R: Rng>(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        pad_mode: PadMode,
        rng: &mut R,
    ) -> Self {
        let fan_in = (in_ch * kernel * kernel) as f64;
        let limit = (6.0 / fan_in).sqrt();
        let weight = Array4::from_shape_fn((out_ch, in_ch, kernel, kernel), |_| {
            (rng.random::<f64>() * 2.0 - 1.0) * limit
        });
        Self {
            grad_weight: Array4::zeros(weight.dim()),
            weight,
            bias: Array1::zeros(out_ch),
            grad_bias: Array1::zeros(out_ch),
            kernel,
            stride,
            padding,
            pad_mode,
            cache: None,
        }
    }

    fn im2col(&self, xp: &Array4<f64>, oh: usize, ow: usize) -> Array2<f64> {
        let (n, c, hp, wp) = xp.dim();
        let k = self.kernel;
        let s = self.stride;
        let mut col = Array2::zeros((c * k * k, n * oh * ow));
        let xs = xp.as_slice().expect("standard layout");
        let cs = col.as_slice_mut().expect("standard layout");
        let ncols = n * oh * ow;
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * hp * wp;
                for ki in 0..k {
                    for kj in 0..k {
                        let row = (ch * k + ki) * k + kj;
                        let row_base = row * ncols;
                        for oi in 0..oh {
                            let src_base = base + (oi * s + ki) * wp + kj;
                            let dst_base = row_base + b * oh * ow + oi * ow;
                            if s == 1 {
                                cs[dst_base..dst_base + ow]
                                    .copy_from_slice(&xs[src_base..src_base + ow]);
                            } else {
                                for oj in 0..ow {
                                    cs[dst_base + oj] = xs[src_base + oj * s];
                                }
                            }
                        }
                    }
                }
            }
        }
        col
    }
}

impl Layer for Conv2d {
    fn forward(&mut self, x: Array4<f64>, _train: bool) -> Array4<f64> {
        let (n, c, h, w) = x.dim();
        let k = self.kernel;
        let s = self.stride;
        let xp = pad(&x, self.padding, self.pad_mode);
        let (_, _, hp, wp) = xp.dim();
        assert!(hp >= k && wp >= k, "input smaller than kernel");
        let oh = (hp - k) / s + 1;
        let ow = (wp - k) / s + 1;

        let col = self.im2col(&xp, oh, ow);
        let out_ch = self.weight.dim().0;
        let w_mat = self
            .weight
            .clone()
            .into_shape_with_order((out_ch, c * k * k))
            .expect("contiguous weights");
        let mut out_mat = gemm(&w_mat, &col); // (out, n*oh*ow)
        for (o, mut row) in out_mat.rows_mut().into_iter().enumerate() {
            row += self.bias[o];
        }
        self.cache = Some(ConvCache {
            col,
            input_dim: (n, c, h, w),
            out_dim: (oh, ow),
        });

        // (out, n*oh*ow) -> (n, out, oh, ow), copying whole rows per image.
        let mut out = Array4::zeros((n, out_ch, oh, ow));
        {
            let om = out_mat.as_slice().expect("standard layout");
            let os = out.as_slice_mut().expect("standard layout");
            let plane = oh * ow;
            for o in 0..out_ch {
                let row = &om[o * n * plane..(o + 1) * n * plane];
                for b in 0..n {
                    let dst = (b * out_ch + o) * plane;
                    os[dst..dst + plane].copy_from_slice(&row[b * plane..(b + 1) * plane]);
                }
            }
        }
        out
    }

    fn backward(&mut self, grad_out: Array4<f64>) -> Array4<f64> {
        let cache = self.cache.take().expect("backward before forward");
        let (n, c, h, w) = cache.input_dim;
        let (oh, ow) = cache.out_dim;
        let k = self.kernel;
        let s = self.stride;
        let out_ch = self.weight.dim().0;

        // (n, out, oh, ow) -> (out, n*oh*ow)
        let mut g_mat = Array2::zeros((out_ch, n * oh * ow));
        {
            let gi = grad_out.as_slice().expect("standard layout");
            let gm = g_mat.as_slice_mut().expect("standard layout");
            let plane = oh * ow;
            for b in 0..n {
                for o in 0..out_ch {
                    let src = (b * out_ch + o) * plane;
                    let dst = o * n * plane + b * plane;
                    gm[dst..dst + plane].copy_from_slice(&gi[src..src + plane]);
                }
            }
        }
        for o in 0..out_ch {
            self.grad_bias[o] += g_mat.row(o).sum();
        }
        let gw = gemm_abt(&g_mat, &cache.col); // (out, in*k*k)
        let gw4 = gw
            .into_shape_with_order((out_ch, c, k, k))
            .expect("contiguous");
        self.grad_weight += &gw4;

        let w_t = {
            let mut t = Array2::<f64>::zeros((c * k * k, out_ch));
            let w_flat = self
                .weight
                .clone()
                .into_shape_with_order((out_ch, c * k * k))
                .expect("contiguous weights");
            for o in 0..out_ch {
                for r in 0..c * k * k {
                    t[[r, o]] = w_flat[[o, r]];
                }
            }
            t
        };
        let g_col = gemm(&w_t, &g_mat); // (in*k*k, n*oh*ow)

        // col2im onto the padded gradient.
        let hp = h + 2 * self.padding;
        let wp = w + 2 * self.padding;
        let mut g_padded = Array4::zeros((n, c, hp, wp));
        {
            let gs = g_padded.as_slice_mut().expect("standard layout");
            let gc = g_col.as_slice().expect("standard layout");
            let ncols = n * oh * ow;
            for b in 0..n {
                for ch in 0..c {
                    let base = (b * c + ch) * hp * wp;
                    for ki in 0..k {
                        for kj in 0..k {
                            let row = (ch * k + ki) * k + kj;
                            let row_base = row * ncols;
                            for oi in 0..oh {
                                let dst_base = base + (oi * s + ki) * wp + kj;
                                let col_base = row_base + b * oh * ow + oi * ow;
                                for oj in 0..ow {
                                    gs[dst_base + oj * s] += gc[col_base + oj];
                                }
                            }
                        }
                    }
                }
            }
        }
        unpad_accumulate(&g_padded, self.padding, self.pad_mode, h, w)
    }

    fn visit_params(&mut self, visitor: &mut dyn FnMut(ParamRef)) {
        visitor(ParamRef {
            value: self.weight.as_slice_mut().expect("contiguous"),
            grad: self.grad_weight.as_slice_mut().expect("contiguous"),
        });
        visitor(ParamRef {
            value: self.bias.as_slice_mut().expect("contiguous"),
            grad: self.grad_bias.as_slice_mut().expect("contiguous"),
        });
    }

    fn describe(&self) -> String {
        let (o, i, k, _) = self.weight.dim();
        format!(
            "conv {i}->{o} k{k} s{} p{}{}",
            self.stride,
            self.padding,
            match self.pad_mode {
                PadMode::Zero => "z",
                PadMode::Reflect => "r",
            }
        )
    }
}

/// Per-channel batch normalization over `(N, H, W)` with running statistics
/// for inference.
pub struct BatchNorm2d {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub grad_gamma: Array1<f64>,
    pub grad_beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    momentum: f64,
    eps: f64,
    cache: Option<BnCache>,
}

struct BnCache {
    xhat: Array4<f64>,
    std: Array1<f64>,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            grad_gamma: Array1::zeros(channels),
            grad_beta: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            momentum: 0.1,
            eps: 1e-5,
            cache: None,
        }
    }
}

impl Layer for BatchNorm2d {
    fn forward(&mut self, x: Array4<f64>, train: bool) -> Array4<f64> {
        let (n, c, h, w) = x.dim();
        let plane = h * w;
        let count = (n * plane) as f64;
        let mut out = Array4::zeros((n, c, h, w));
        let xs = x.as_slice().expect("standard layout");
        if train {
            let mut xhat = Array4::zeros((n, c, h, w));
            let mut stds = Array1::zeros(c);
            {
                let xh = xhat.as_slice_mut().expect("standard layout");
                let os = out.as_slice_mut().expect("standard layout");
                for ch in 0..c {
                    let mut mean = 0.0;
                    for b in 0..n {
                        let base = (b * c + ch) * plane;
                        mean += xs[base..base + plane].iter().sum::<f64>();
                    }
                    mean /= count;
                    let mut var = 0.0;
                    for b in 0..n {
                        let base = (b * c + ch) * plane;
                        var += xs[base..base + plane].iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
                    }
                    var /= count;
                    let std = (var + self.eps).sqrt();
                    stds[ch] = std;
                    let (gamma, beta) = (self.gamma[ch], self.beta[ch]);
                    for b in 0..n {
                        let base = (b * c + ch) * plane;
                        for idx in base..base + plane {
                            let v = (xs[idx] - mean) / std;
                            xh[idx] = v;
                            os[idx] = gamma * v + beta;
                        }
                    }
                    self.running_mean[ch] = (1.0 - self.momentum) * self.running_mean[ch] + self.momentum * mean;
                    self.running_var[ch] = (1.0 - self.momentum) * self.running_var[ch] + self.momentum * var;
                }
            }
            self.cache = Some(BnCache { xhat, std: stds });
        } else {
            let os = out.as_slice_mut().expect("standard layout");
            for ch in 0..c {
                let std = (self.running_var[ch] + self.eps).sqrt();
                let (gamma, beta, mean) = (self.gamma[ch], self.beta[ch], self.running_mean[ch]);
                for b in 0..n {
                    let base = (b * c + ch) * plane;
                    for idx in base..base + plane {
                        os[idx] = gamma * (xs[idx] - mean) / std + beta;
                    }
                }
            }
        }
        out
    }

    fn backward(&mut self, grad_out: Array4<f64>) -> Array4<f64> {
        let cache = self.cache.take().expect("backward before forward(train)");
        let (n, c, h, w) = grad_out.dim();
        let plane = h * w;
        let count = (n * plane) as f64;
        let mut grad_in = Array4::zeros((n, c, h, w));
        let gs = grad_out.as_slice().expect("standard layout");
        let xh = cache.xhat.as_slice().expect("standard layout");
        let gi = grad_in.as_slice_mut().expect("standard layout");
        for ch in 0..c {
            let mut sum_g = 0.0;
            let mut sum_gx = 0.0;
            for b in 0..n {
                let base = (b * c + ch) * plane;
                for idx in base..base + plane {
                    sum_g += gs[idx];
                    sum_gx += gs[idx] * xh[idx];
                }
            }
            self.grad_beta[ch] += sum_g;
            self.grad_gamma[ch] += sum_gx;
            let scale = self.gamma[ch] / cache.std[ch];
            let mg = sum_g / count;
            let mgx = sum_gx / count;
            for b in 0..n {
                let base = (b * c + ch) * plane;
                for idx in base..base + plane {
                    gi[idx] = scale * (gs[idx] - mg - xh[idx] * mgx);
                }
            }
        }
        grad_in
    }

    fn visit_params(&mut self, visitor: &mut dyn FnMut(ParamRef)) {
        visitor(ParamRef {
            value: self.gamma.as_slice_mut().expect("contiguous"),
            grad: self.grad_gamma.as_slice_mut().expect("contiguous"),
        });
        visitor(ParamRef {
            value: self.beta.as_slice_mut().expect("contiguous"),
            grad: self.grad_beta.as_slice_mut().expect("contiguous"),
        });
    }

    fn describe(&self) -> String {
        format!("bn {}", self.gamma.len())
    }
}

/// Leaky rectifier with fixed negative slope.
pub struct LeakyRelu {
    slope: f64,
    cache: Option<Array4<f64>>,
}

impl LeakyRelu {
    pub fn new(slope: f64) -> Self {
        Self { slope, cache: None }
    }
}

impl Layer for LeakyRelu {
    fn forward(&mut self, x: Array4<f64>, _train: bool) -> Array4<f64> {
        let out = x.mapv(|v| if v >= 0.0 { v } else { self.slope * v });
        self.cache = Some(x);
        out
    }

    fn backward(&mut self, grad_out: Array4<f64>) -> Array4<f64> {
        let x = self.cache.take().expect("backward before forward");
        let slope = self.slope;
        let mut g = grad_out;
        g.zip_mut_with(&x, |gv, &xv| {
            if xv < 0.0 {
                *gv *= slope;
            }
        });
        g
    }

    fn visit_params(&mut self, _visitor: &mut dyn FnMut(ParamRef)) {}

    fn describe(&self) -> String {
        format!("lrelu {}", self.slope)
    }
}

/// 2x2 max pooling with stride 2; ties resolve to the first maximum in
/// scan order.
pub struct MaxPool2 {
    cache: Option<(Array4<usize>, (usize, usize, usize, usize))>,
}

impl MaxPool2 {
    pub fn new() -> Self {
        Self { cache: None }
    }
}

impl Default for MaxPool2 {
    fn default() -> Self {
        Self::new()
    }
}

impl Layer for MaxPool2 {
    fn forward(&mut self, x: Array4<f64>, _train: bool) -> Array4<f64> {
        let (n, c, h, w) = x.dim();
        assert!(h % 2 == 0 && w % 2 == 0, "pooling needs even spatial dims");
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Array4::zeros((n, c, oh, ow));
        let mut arg = Array4::zeros((n, c, oh, ow));
        for b in 0..n {
            for ch in 0..c {
                for i in 0..oh {
                    for j in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = 0usize;
                        for di in 0..2 {
                            for dj in 0..2 {
                                let v = x[[b, ch, 2 * i + di, 2 * j + dj]];
                                if v > best {
                                    best = v;
                                    best_idx = di * 2 + dj;
                                }
                            }
                        }
                        out[[b, ch, i, j]] = best;
                        arg[[b, ch, i, j]] = best_idx;
                    }
                }
            }
        }
        self.cache = Some((arg, (n, c, h, w)));
        out
    }

    fn backward(&mut self, grad_out: Array4<f64>) -> Array4<f64> {
        let (arg, (n, c, h, w)) = self.cache.take().expect("backward before forward");
        let (oh, ow) = (h / 2, w / 2);
        let mut grad_in = Array4::zeros((n, c, h, w));
        for b in 0..n {
            for ch in 0..c {
                for i in 0..oh {
                    for j in 0..ow {
                        let idx = arg[[b, ch, i, j]];
                        grad_in[[b, ch, 2 * i + idx / 2, 2 * j + idx % 2]] += grad_out[[b, ch, i, j]];
                    }
                }
            }
        }
        grad_in
    }

    fn visit_params(&mut self, _visitor: &mut dyn FnMut(ParamRef)) {}

    fn describe(&self) -> String {
        "maxpool2".into()
    }
}

/// Bilinear upsampling by an integer factor with half-pixel alignment.
pub struct UpsampleBilinear {
    factor: usize,
    cache: Option<(usize, usize)>,
}

impl UpsampleBilinear {
    pub fn new(factor: usize) -> Self {
        Self { factor, cache: None }
    }

    /// Source coordinate and interpolation weights for one output index.
    fn taps(dst: usize, factor: usize, src_len: usize) -> (usize, usize, f64) {
        let src = (dst as f64 + 0.5) / factor as f64 - 0.5;
        let src = src.clamp(0.0, src_len as f64 - 1.0);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(src_len - 1);
        (lo, hi, src - lo as f64)
    }
}

impl Layer for UpsampleBilinear {
    fn forward(&mut self, x: Array4<f64>, _train: bool) -> Array4<f64> {
        let (n, c, h, w) = x.dim();
        let f = self.factor;
        let (oh, ow) = (h * f, w * f);
        let mut out = Array4::zeros((n, c, oh, ow));
        let row_taps: Vec<(usize, usize, f64)> = (0..oh).map(|i| Self::taps(i, f, h)).collect();
        let col_taps: Vec<(usize, usize, f64)> = (0..ow).map(|j| Self::taps(j, f, w)).collect();
        let xs = x.as_slice().expect("standard layout");
        let os = out.as_slice_mut().expect("standard layout");
        for bc in 0..n * c {
            let src = bc * h * w;
            let dst = bc * oh * ow;
            for (i, &(i0, i1, fi)) in row_taps.iter().enumerate() {
                let r0 = &xs[src + i0 * w..src + i0 * w + w];
                let r1 = &xs[src + i1 * w..src + i1 * w + w];
                let orow = &mut os[dst + i * ow..dst + (i + 1) * ow];
                for (j, &(j0, j1, fj)) in col_taps.iter().enumerate() {
                    orow[j] = r0[j0] * (1.0 - fi) * (1.0 - fj)
                        + r1[j0] * fi * (1.0 - fj)
                        + r0[j1] * (1.0 - fi) * fj
                        + r1[j1] * fi * fj;
                }
            }
        }
        self.cache = Some((h, w));
        out
    }

    fn backward(&mut self, grad_out: Array4<f64>) -> Array4<f64> {
        let (h, w) = self.cache.take().expect("backward before forward");
        let (n, c, oh, ow) = grad_out.dim();
        let f = self.factor;
        let mut grad_in = Array4::zeros((n, c, h, w));
        let row_taps: Vec<(usize, usize, f64)> = (0..oh).map(|i| Self::taps(i, f, h)).collect();
        let col_taps: Vec<(usize, usize, f64)> = (0..ow).map(|j| Self::taps(j, f, w)).collect();
        let gs = grad_out.as_slice().expect("standard layout");
        let gi = grad_in.as_slice_mut().expect("standard layout");
        for bc in 0..n * c {
            let src = bc * oh * ow;
            let dst = bc * h * w;
            for (i, &(i0, i1, fi)) in row_taps.iter().enumerate() {
                let grow = &gs[src + i * ow..src + (i + 1) * ow];
                for (j, &(j0, j1, fj)) in col_taps.iter().enumerate() {
                    let g = grow[j];
                    gi[dst + i0 * w + j0] += g * (1.0 - fi) * (1.0 - fj);
                    gi[dst + i1 * w + j0] += g * fi * (1.0 - fj);
                    gi[dst + i0 * w + j1] += g * (1.0 - fi) * fj;
                    gi[dst + i1 * w + j1] += g * fi * fj;
                }
            }
        }
        grad_in
    }

    fn visit_params(&mut self, _visitor: &mut dyn FnMut(ParamRef)) {}

    fn describe(&self) -> String {
        format!("upsample x{}", self.factor)
    }
}

/// Elementwise logistic squash.
pub struct Sigmoid {
    cache: Option<Array4<f64>>,
}

impl Sigmoid {
    pub fn new() -> Self {
        Self { cache: None }
    }
}

impl Default for Sigmoid {
    fn default() -> Self {
        Self::new()
    }
}

impl Layer for Sigmoid {
    fn forward(&mut self, x: Array4<f64>, _train: bool) -> Array4<f64> {
        let out = x.mapv(|v| 1.0 / (1.0 + (-v).exp()));
        self.cache = Some(out.clone());
        out
    }

    fn backward(&mut self, grad_out: Array4<f64>) -> Array4<f64> {
        let y = self.cache.take().expect("backward before forward");
        let mut g = grad_out;
        g.zip_mut_with(&y, |gv, &yv| *gv *= yv * (1.0 - yv));
        g
    }

    fn visit_params(&mut self, _visitor: &mut dyn FnMut(ParamRef)) {}

    fn describe(&self) -> String {
        "sigmoid".into()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_input(rng: &mut ChaCha8Rng, dim: (usize, usize, usize, usize)) -> Array4<f64> {
        Array4::from_shape_fn(dim, |_| rng.random::<f64>() * 2.0 - 1.0)
    }

    /// Central-difference check of input gradients for any layer.
    fn check_input_gradient(layer: &mut dyn Layer, x: &Array4<f64>, tol: f64) {
        let y = layer.forward(x.clone(), true);
        // Loss = weighted sum with fixed pseudo-random weights.
        let weights = Array4::from_shape_fn(y.dim(), |(a, b, c, d)| {
            ((a * 7 + b * 5 + c * 3 + d * 2 + 1) % 11) as f64 / 11.0 - 0.4
        });
        let analytic = layer.backward(weights.clone());

        let h = 1e-6;
        let mut worst: f64 = 0.0;
        let mut max_scale: f64 = 1e-9;
        for idx in 0..x.len().min(40) {
            let flat_idx = idx * (x.len() / x.len().min(40)).max(1);
            let mut xp = x.clone();
            let mut xm = x.clone();
            {
                let s = xp.as_slice_mut().unwrap();
                s[flat_idx] += h;
            }
            {
                let s = xm.as_slice_mut().unwrap();
                s[flat_idx] -= h;
            }
            let fp = (&layer.forward(xp, true) * &weights).sum();
            let _ = layer.backward(weights.clone());
            let fm = (&layer.forward(xm, true) * &weights).sum();
            let _ = layer.backward(weights.clone());
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic.as_slice().unwrap()[flat_idx];
            worst = worst.max((a - numeric).abs());
            max_scale = max_scale.max(numeric.abs()).max(a.abs());
        }
        assert!(worst / max_scale.max(1.0) < tol, "gradient error {worst} (scale {max_scale})");
    }

    #[test]
    fn conv_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut conv = Conv2d::new(2, 3, 3, 1, 1, PadMode::Zero, &mut rng);
        let x = random_input(&mut rng, (2, 2, 5, 5));
        let y = conv.forward(x.clone(), true);
        assert_eq!(y.dim(), (2, 3, 5, 5));
        // Direct loop oracle for one output position.
        for (b, o, i, j) in [(0usize, 0usize, 2usize, 2usize), (1, 2, 0, 4)] {
            let mut acc = conv.bias[o];
            for c in 0..2 {
                for ki in 0..3 {
                    for kj in 0..3 {
                        let si = i as i64 + ki as i64 - 1;
                        let sj = j as i64 + kj as i64 - 1;
                        if si >= 0 && sj >= 0 && si < 5 && sj < 5 {
                            acc += conv.weight[[o, c, ki, kj]] * x[[b, c, si as usize, sj as usize]];
                        }
                    }
                }
            }
            assert!((y[[b, o, i, j]] - acc).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_strided_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut conv = Conv2d::new(1, 4, 3, 2, 1, PadMode::Zero, &mut rng);
        let x = random_input(&mut rng, (1, 1, 8, 8));
        let y = conv.forward(x, true);
        assert_eq!(y.dim(), (1, 4, 4, 4));
        // Downsample-by-4 conv used by the inverse network.
        let mut conv4 = Conv2d::new(1, 2, 3, 4, 1, PadMode::Reflect, &mut rng);
        let x = random_input(&mut rng, (1, 1, 32, 32));
        let y = conv4.forward(x, true);
        assert_eq!(y.dim(), (1, 2, 8, 8));
    }

    #[test]
    fn conv_input_gradient_checks() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (stride, pad, mode) in [(1usize, 1usize, PadMode::Zero), (2, 1, PadMode::Zero), (1, 1, PadMode::Reflect)] {
            let mut conv = Conv2d::new(2, 2, 3, stride, pad, mode, &mut rng);
            let x = random_input(&mut rng, (2, 2, 6, 6));
            check_input_gradient(&mut conv, &x, 1e-6);
        }
    }

    #[test]
    fn conv_weight_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut conv = Conv2d::new(2, 2, 3, 1, 1, PadMode::Zero, &mut rng);
        let x = random_input(&mut rng, (2, 2, 4, 4));
        let weights = Array4::from_shape_fn((2, 2, 4, 4), |(a, b, c, d)| {
            ((a + b * 2 + c * 3 + d) % 7) as f64 / 7.0 - 0.3
        });
        conv.zero_grad();
        let _ = conv.forward(x.clone(), true);
        let _ = conv.backward(weights.clone());
        let analytic = conv.grad_weight.clone();

        let h = 1e-6;
        for idx in [0usize, 5, 17, 35] {
            let orig = conv.weight.as_slice().unwrap()[idx];
            conv.weight.as_slice_mut().unwrap()[idx] = orig + h;
            let fp = (&conv.forward(x.clone(), true) * &weights).sum();
            conv.weight.as_slice_mut().unwrap()[idx] = orig - h;
            let fm = (&conv.forward(x.clone(), true) * &weights).sum();
            conv.weight.as_slice_mut().unwrap()[idx] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic.as_slice().unwrap()[idx];
            assert!((a - numeric).abs() < 1e-6, "{a} vs {numeric}");
        }
    }

    #[test]
    fn batchnorm_normalizes_and_checks_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut bn = BatchNorm2d::new(3);
        let x = random_input(&mut rng, (4, 3, 3, 3)).mapv(|v| 2.0 * v + 0.5);
        let y = bn.forward(x.clone(), true);
        for ch in 0..3 {
            let vals: Vec<f64> = (0..4)
                .flat_map(|b| (0..3).flat_map(move |i| (0..3).map(move |j| (b, i, j))))
                .map(|(b, i, j)| y[[b, ch, i, j]])
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-3);
        }
        let _ = bn.backward(Array4::ones((4, 3, 3, 3)));
        check_input_gradient(&mut bn, &x, 1e-5);
    }

    #[test]
    fn batchnorm_eval_uses_running_stats() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut bn = BatchNorm2d::new(1);
        let x = random_input(&mut rng, (8, 1, 4, 4));
        for _ in 0..200 {
            let _ = bn.forward(x.clone(), true);
        }
        let y_eval = bn.forward(x.clone(), false);
        let y_train = bn.forward(x, true);
        let diff = (&y_eval - &y_train).mapv(f64::abs).sum() / y_eval.len() as f64;
        assert!(diff < 1e-2, "running stats should approach batch stats, diff {diff}");
    }

    #[test]
    fn pool_routes_gradient_to_argmax() {
        let mut pool = MaxPool2::new();
        let mut x = Array4::zeros((1, 1, 2, 2));
        x[[0, 0, 1, 0]] = 5.0;
        let y = pool.forward(x, true);
        assert_eq!(y[[0, 0, 0, 0]], 5.0);
        let g = pool.backward(Array4::ones((1, 1, 1, 1)));
        assert_eq!(g[[0, 0, 1, 0]], 1.0);
        assert_eq!(g[[0, 0, 0, 0]], 0.0);
    }

    #[test]
    fn upsample_constant_and_adjoint() {
        let mut up = UpsampleBilinear::new(4);
        let x = Array4::from_elem((1, 1, 2, 2), 3.0);
        let y = up.forward(x.clone(), true);
        assert_eq!(y.dim(), (1, 1, 8, 8));
        for v in y.iter() {
            assert!((v - 3.0).abs() < 1e-12);
        }
        // Adjoint identity: <up(x), w> == <x, up^T(w)>.
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random_input(&mut rng, (1, 2, 3, 3));
        let w = random_input(&mut rng, (1, 2, 12, 12));
        let mut up = UpsampleBilinear::new(4);
        let y = up.forward(x.clone(), true);
        let xt = up.backward(w.clone());
        let lhs = (&y * &w).sum();
        let rhs = (&x * &xt).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn leaky_relu_slope() {
        let mut act = LeakyRelu::new(0.2);
        let mut x = Array4::zeros((1, 1, 1, 2));
        x[[0, 0, 0, 0]] = -1.0;
        x[[0, 0, 0, 1]] = 2.0;
        let y = act.forward(x, true);
        assert_eq!(y[[0, 0, 0, 0]], -0.2);
        assert_eq!(y[[0, 0, 0, 1]], 2.0);
        let g = act.backward(Array4::ones((1, 1, 1, 2)));
        assert_eq!(g[[0, 0, 0, 0]], 0.2);
        assert_eq!(g[[0, 0, 0, 1]], 1.0);
    }

    #[test]
    fn sigmoid_range_and_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut s = Sigmoid::new();
        let x = random_input(&mut rng, (2, 2, 2, 2)).mapv(|v| 5.0 * v);
        let y = s.forward(x.clone(), true);
        for v in y.iter() {
            assert!(*v > 0.0 && *v < 1.0);
        }
        check_input_gradient(&mut s, &x, 1e-6);
    }
}
