//! Hand-rolled layers with explicit forward/backward passes.
//!
//! Feature maps are `Array4<f32>` in `[C][T][H][W]` layout; convolution
//! kernels are `[out][in][kt][kh][kw]`. All convolutions are stride 1;
//! spatial resampling is done by the 2×2 max-pool and the 2×2
//! transposed-convolution upsampler, which never touch the time axis.

use ndarray::{Array1, Array2, Array4, Array5};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Valid output range for one kernel tap: indices `o` with
/// `0 <= o + k - pad < in_len`.
fn tap_range(out_len: usize, in_len: usize, k: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(k);
    let hi = (in_len + pad).saturating_sub(k).min(out_len);
    (lo, hi.max(lo))
}

fn he_normal(fan_in: usize) -> Normal<f64> {
    Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("he init")
}

/// Stride-1 3D convolution with zero padding.
#[derive(Debug, Clone)]
pub struct Conv3 {
    pub w: Array5<f32>,
    pub b: Array1<f32>,
    pub pad: (usize, usize, usize),
}

impl Conv3 {
    pub fn new(
        in_c: usize,
        out_c: usize,
        kernel: (usize, usize, usize),
        pad: (usize, usize, usize),
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let (kt, kh, kw) = kernel;
        let dist = he_normal(in_c * kt * kh * kw);
        let mut sample = || dist.sample(rng) as f32;
        let w = Array5::from_shape_simple_fn((out_c, in_c, kt, kh, kw), &mut sample);
        Conv3 {
            w,
            b: Array1::zeros(out_c),
            pad,
        }
    }

    pub fn out_dim(&self, x_dim: (usize, usize, usize, usize)) -> (usize, usize, usize, usize) {
        let (_, t, h, w) = x_dim;
        let (co, _, kt, kh, kw) = self.w.dim();
        let (pt, ph, pw) = self.pad;
        (
            co,
            t + 2 * pt + 1 - kt,
            h + 2 * ph + 1 - kh,
            w + 2 * pw + 1 - kw,
        )
    }

    pub fn forward(&self, x: &Array4<f32>) -> Array4<f32> {
        let (ci_n, t_in, h_in, w_in) = x.dim();
        let (co_n, ci_w, kt, kh, kw) = self.w.dim();
        debug_assert_eq!(ci_n, ci_w);
        let (co_n_, t_out, h_out, w_out) = self.out_dim(x.dim());
        debug_assert_eq!(co_n, co_n_);
        let (pt, ph, pw) = self.pad;

        let mut y = Array4::<f32>::zeros((co_n, t_out, h_out, w_out));
        let xs = x.as_slice().expect("contiguous");
        let ws = self.w.as_slice().expect("contiguous");
        let ys = y.as_slice_mut().expect("contiguous");

        let x_lo_hi: Vec<_> = (0..kw).map(|k| tap_range(w_out, w_in, k, pw)).collect();

        // One output row at a time, accumulated across channels and taps.
        let mut acc = vec![0.0f32; w_out];
        for co in 0..co_n {
            let bias = self.b[co];
            for to in 0..t_out {
                for yo in 0..h_out {
                    acc.fill(bias);
                    for ci in 0..ci_n {
                        for dt in 0..kt {
                            let ti = (to + dt).wrapping_sub(pt);
                            if ti >= t_in {
                                continue;
                            }
                            for dyk in 0..kh {
                                let yi = (yo + dyk).wrapping_sub(ph);
                                if yi >= h_in {
                                    continue;
                                }
                                let wrow_base = (((co * ci_n + ci) * kt + dt) * kh + dyk) * kw;
                                let xrow_base = ((ci * t_in + ti) * h_in + yi) * w_in;
                                if kw == 3 && pw == 1 && w_in == w_out && w_out >= 2 {
                                    // Fused 3-tap stencil over one row.
                                    let xrow = &xs[xrow_base..xrow_base + w_in];
                                    let (w0, w1, w2) =
                                        (ws[wrow_base], ws[wrow_base + 1], ws[wrow_base + 2]);
                                    let n = w_out;
                                    acc[0] += w1 * xrow[0] + w2 * xrow[1];
                                    for i in 1..n - 1 {
                                        acc[i] +=
                                            w0 * xrow[i - 1] + w1 * xrow[i] + w2 * xrow[i + 1];
                                    }
                                    acc[n - 1] += w0 * xrow[n - 2] + w1 * xrow[n - 1];
                                    continue;
                                }
                                for dxk in 0..kw {
                                    let (xo_lo, xo_hi) = x_lo_hi[dxk];
                                    if xo_hi <= xo_lo {
                                        continue;
                                    }
                                    let wv = ws[wrow_base + dxk];
                                    let run = xo_hi - xo_lo;
                                    let xrow = &xs[xrow_base + xo_lo + dxk - pw..][..run];
                                    let arow = &mut acc[xo_lo..xo_hi];
                                    for (a, xv) in arow.iter_mut().zip(xrow) {
                                        *a += wv * *xv;
                                    }
                                }
                            }
                        }
                    }
                    let ybase = ((co * t_out + to) * h_out + yo) * w_out;
                    ys[ybase..ybase + w_out].copy_from_slice(&acc);
                }
            }
        }
        y
    }

    /// Gradient with respect to the input.
    pub fn backward_data(&self, dy: &Array4<f32>, x_dim: (usize, usize, usize, usize)) -> Array4<f32> {
        let (ci_n, t_in, h_in, w_in) = x_dim;
        let (co_n, _, kt, kh, kw) = self.w.dim();
        let (_, t_out, h_out, w_out) = dy.dim();
        let (pt, ph, pw) = self.pad;

        let mut dx = Array4::<f32>::zeros(x_dim);
        let dxs = dx.as_slice_mut().expect("contiguous");
        let dys = dy.as_slice().expect("contiguous");
        let ws = self.w.as_slice().expect("contiguous");

        // Valid xi range per tap: 0 <= xi - dxk + pw < w_out.
        let xi_lo_hi: Vec<_> = (0..kw).map(|k| tap_range(w_in, w_out, pw, k)).collect();

        let mut acc = vec![0.0f32; w_in];
        for ci in 0..ci_n {
            for ti in 0..t_in {
                for yi in 0..h_in {
                    acc.fill(0.0);
                    for co in 0..co_n {
                        for dt in 0..kt {
                            let to = (ti + pt).wrapping_sub(dt);
                            if to >= t_out {
                                continue;
                            }
                            for dyk in 0..kh {
                                let yo = (yi + ph).wrapping_sub(dyk);
                                if yo >= h_out {
                                    continue;
                                }
                                let wrow_base = (((co * ci_n + ci) * kt + dt) * kh + dyk) * kw;
                                let dyrow_base = ((co * t_out + to) * h_out + yo) * w_out;
                                if kw == 3 && pw == 1 && w_in == w_out && w_in >= 2 {
                                    // Fused transpose stencil: taps read the
                                    // gradient row at offsets +1, 0, -1.
                                    let dyrow = &dys[dyrow_base..dyrow_base + w_out];
                                    let (w0, w1, w2) =
                                        (ws[wrow_base], ws[wrow_base + 1], ws[wrow_base + 2]);
                                    let n = w_in;
                                    acc[0] += w1 * dyrow[0] + w0 * dyrow[1];
                                    for i in 1..n - 1 {
                                        acc[i] +=
                                            w2 * dyrow[i - 1] + w1 * dyrow[i] + w0 * dyrow[i + 1];
                                    }
                                    acc[n - 1] += w2 * dyrow[n - 2] + w1 * dyrow[n - 1];
                                    continue;
                                }
                                for dxk in 0..kw {
                                    let (xi_lo, xi_hi) = xi_lo_hi[dxk];
                                    if xi_hi <= xi_lo {
                                        continue;
                                    }
                                    let wv = ws[wrow_base + dxk];
                                    let run = xi_hi - xi_lo;
                                    let dyrow = &dys[dyrow_base + xi_lo + pw - dxk..][..run];
                                    let arow = &mut acc[xi_lo..xi_hi];
                                    for (a, g) in arow.iter_mut().zip(dyrow) {
                                        *a += wv * *g;
                                    }
                                }
                            }
                        }
                    }
                    let dxbase = ((ci * t_in + ti) * h_in + yi) * w_in;
                    dxs[dxbase..dxbase + w_in].copy_from_slice(&acc);
                }
            }
        }
        dx
    }

    /// Gradients with respect to the kernel and bias.
    pub fn grad_params(&self, x: &Array4<f32>, dy: &Array4<f32>) -> (Array5<f32>, Array1<f32>) {
        let (ci_n, t_in, h_in, w_in) = x.dim();
        let (co_n, _, kt, kh, kw) = self.w.dim();
        let (_, t_out, h_out, w_out) = dy.dim();
        let (pt, ph, pw) = self.pad;

        let mut dw = Array5::<f32>::zeros(self.w.raw_dim());
        let mut db = Array1::<f32>::zeros(co_n);
        let xs = x.as_slice().expect("contiguous");
        let dys = dy.as_slice().expect("contiguous");
        let dws = dw.as_slice_mut().expect("contiguous");

        let x_lo_hi: Vec<_> = (0..kw).map(|k| tap_range(w_out, w_in, k, pw)).collect();
        let taps = kt * kh * kw;
        let mut acc = vec![0.0f32; taps];
        for co in 0..co_n {
            let mut bsum = 0.0f32;
            let cobase = co * t_out * h_out * w_out;
            for &g in &dys[cobase..cobase + t_out * h_out * w_out] {
                bsum += g;
            }
            db[co] = bsum;

            for ci in 0..ci_n {
                acc.fill(0.0);
                for to in 0..t_out {
                    for yo in 0..h_out {
                        let dyrow_base = ((co * t_out + to) * h_out + yo) * w_out;
                        for dt in 0..kt {
                            let ti = (to + dt).wrapping_sub(pt);
                            if ti >= t_in {
                                continue;
                            }
                            for dyk in 0..kh {
                                let yi = (yo + dyk).wrapping_sub(ph);
                                if yi >= h_in {
                                    continue;
                                }
                                let xrow_base = ((ci * t_in + ti) * h_in + yi) * w_in;
                                if kw == 3 && pw == 1 && w_in == w_out && w_out >= 2 {
                                    // Three tap dot products in one row pass.
                                    let dyrow = &dys[dyrow_base..dyrow_base + w_out];
                                    let xrow = &xs[xrow_base..xrow_base + w_in];
                                    let n = w_out;
                                    let (mut d0, mut d1, mut d2) = (0.0f32, 0.0f32, 0.0f32);
                                    for i in 1..n - 1 {
                                        let g = dyrow[i];
                                        d0 += g * xrow[i - 1];
                                        d1 += g * xrow[i];
                                        d2 += g * xrow[i + 1];
                                    }
                                    d1 += dyrow[0] * xrow[0];
                                    d2 += dyrow[0] * xrow[1];
                                    d0 += dyrow[n - 1] * xrow[n - 2];
                                    d1 += dyrow[n - 1] * xrow[n - 1];
                                    let base = (dt * kh + dyk) * kw;
                                    acc[base] += d0;
                                    acc[base + 1] += d1;
                                    acc[base + 2] += d2;
                                    continue;
                                }
                                for dxk in 0..kw {
                                    let (xo_lo, xo_hi) = x_lo_hi[dxk];
                                    if xo_hi <= xo_lo {
                                        continue;
                                    }
                                    let run = xo_hi - xo_lo;
                                    let dyrow = &dys[dyrow_base + xo_lo..][..run];
                                    let xrow = &xs[xrow_base + xo_lo + dxk - pw..][..run];
                                    let mut dot = 0.0f32;
                                    for (g, xv) in dyrow.iter().zip(xrow) {
                                        dot += *g * *xv;
                                    }
                                    acc[(dt * kh + dyk) * kw + dxk] += dot;
                                }
                            }
                        }
                    }
                }
                let wbase = (co * ci_n + ci) * taps;
                dws[wbase..wbase + taps].copy_from_slice(&acc);
            }
        }
        (dw, db)
    }
}

/// 2×2 spatial max pooling; time axis untouched. Ties resolve to the first
/// element in scan order, which keeps pooling fully deterministic.
#[derive(Debug, Clone, Copy)]
pub struct MaxPool2;

/// Pool cache: winning offset (0..4) per output element.
pub type PoolCache = Array4<u8>;

impl MaxPool2 {
    pub fn forward(x: &Array4<f32>) -> (Array4<f32>, PoolCache) {
        let (c, t, h, w) = x.dim();
        debug_assert!(h % 2 == 0 && w % 2 == 0);
        let (ho, wo) = (h / 2, w / 2);
        let mut y = Array4::<f32>::zeros((c, t, ho, wo));
        let mut arg = Array4::<u8>::zeros((c, t, ho, wo));
        for ci in 0..c {
            for ti in 0..t {
                for yo in 0..ho {
                    for xo in 0..wo {
                        let mut best = x[[ci, ti, 2 * yo, 2 * xo]];
                        let mut k = 0u8;
                        for (idx, (dy, dx)) in
                            [(0usize, 1usize), (1, 0), (1, 1)].iter().enumerate()
                        {
                            let v = x[[ci, ti, 2 * yo + dy, 2 * xo + dx]];
                            if v > best {
                                best = v;
                                k = idx as u8 + 1;
                            }
                        }
                        y[[ci, ti, yo, xo]] = best;
                        arg[[ci, ti, yo, xo]] = k;
                    }
                }
            }
        }
        (y, arg)
    }

    pub fn backward(arg: &PoolCache, dy: &Array4<f32>) -> Array4<f32> {
        let (c, t, ho, wo) = dy.dim();
        let mut dx = Array4::<f32>::zeros((c, t, ho * 2, wo * 2));
        for ci in 0..c {
            for ti in 0..t {
                for yo in 0..ho {
                    for xo in 0..wo {
                        let k = arg[[ci, ti, yo, xo]] as usize;
                        let (dyk, dxk) = [(0, 0), (0, 1), (1, 0), (1, 1)][k];
                        dx[[ci, ti, 2 * yo + dyk, 2 * xo + dxk]] += dy[[ci, ti, yo, xo]];
                    }
                }
            }
        }
        dx
    }
}

/// Transposed convolution with kernel and stride (1, 2, 2): learned
/// non-overlapping 2× spatial upsampling.
#[derive(Debug, Clone)]
pub struct UpConv2 {
    /// `[out][in][2][2]`
    pub w: Array4<f32>,
    pub b: Array1<f32>,
}

impl UpConv2 {
    pub fn new(in_c: usize, out_c: usize, rng: &mut ChaCha8Rng) -> Self {
        let dist = he_normal(in_c);
        let mut sample = || dist.sample(rng) as f32;
        UpConv2 {
            w: Array4::from_shape_simple_fn((out_c, in_c, 2, 2), &mut sample),
            b: Array1::zeros(out_c),
        }
    }

    pub fn forward(&self, x: &Array4<f32>) -> Array4<f32> {
        let (ci_n, t, h, w) = x.dim();
        let co_n = self.w.dim().0;
        let (h2, w2) = (h * 2, w * 2);
        let mut y = Array4::<f32>::zeros((co_n, t, h2, w2));
        let xs = x.as_slice().expect("contiguous");
        let ws = self.w.as_slice().expect("contiguous");
        let ys = y.as_slice_mut().expect("contiguous");

        let mut acc = vec![0.0f32; w2];
        for co in 0..co_n {
            let bias = self.b[co];
            for ti in 0..t {
                for yi in 0..h {
                    for a in 0..2 {
                        acc.fill(bias);
                        for ci in 0..ci_n {
                            let wbase = ((co * ci_n + ci) * 2 + a) * 2;
                            let (w0, w1) = (ws[wbase], ws[wbase + 1]);
                            let xrow = &xs[((ci * t + ti) * h + yi) * w..][..w];
                            for (i, &xv) in xrow.iter().enumerate() {
                                acc[2 * i] += w0 * xv;
                                acc[2 * i + 1] += w1 * xv;
                            }
                        }
                        let ybase = ((co * t + ti) * h2 + 2 * yi + a) * w2;
                        ys[ybase..ybase + w2].copy_from_slice(&acc);
                    }
                }
            }
        }
        y
    }

    pub fn backward_data(&self, dy: &Array4<f32>, x_dim: (usize, usize, usize, usize)) -> Array4<f32> {
        let (ci_n, t, h, w) = x_dim;
        let co_n = self.w.dim().0;
        let (h2, w2) = (h * 2, w * 2);
        let mut dx = Array4::<f32>::zeros(x_dim);
        let dxs = dx.as_slice_mut().expect("contiguous");
        let dys = dy.as_slice().expect("contiguous");
        let ws = self.w.as_slice().expect("contiguous");

        let mut acc = vec![0.0f32; w];
        for ci in 0..ci_n {
            for ti in 0..t {
                for yi in 0..h {
                    acc.fill(0.0);
                    for co in 0..co_n {
                        for a in 0..2 {
                            let wbase = ((co * ci_n + ci) * 2 + a) * 2;
                            let (w0, w1) = (ws[wbase], ws[wbase + 1]);
                            let dyrow = &dys[((co * t + ti) * h2 + 2 * yi + a) * w2..][..w2];
                            for (i, av) in acc.iter_mut().enumerate() {
                                *av += w0 * dyrow[2 * i] + w1 * dyrow[2 * i + 1];
                            }
                        }
                    }
                    let dxbase = ((ci * t + ti) * h + yi) * w;
                    dxs[dxbase..dxbase + w].copy_from_slice(&acc);
                }
            }
        }
        dx
    }

    pub fn grad_params(&self, x: &Array4<f32>, dy: &Array4<f32>) -> (Array4<f32>, Array1<f32>) {
        let (ci_n, t, h, w) = x.dim();
        let co_n = self.w.dim().0;
        let (h2, w2) = (h * 2, w * 2);
        let mut dw = Array4::<f32>::zeros(self.w.raw_dim());
        let mut db = Array1::<f32>::zeros(co_n);
        let xs = x.as_slice().expect("contiguous");
        let dys = dy.as_slice().expect("contiguous");

        for co in 0..co_n {
            db[co] = dy.index_axis(ndarray::Axis(0), co).sum();
            for ci in 0..ci_n {
                let mut a00 = 0.0f32;
                let mut a01 = 0.0f32;
                let mut a10 = 0.0f32;
                let mut a11 = 0.0f32;
                for ti in 0..t {
                    for yi in 0..h {
                        let xrow = &xs[((ci * t + ti) * h + yi) * w..][..w];
                        let dyrow0 = &dys[((co * t + ti) * h2 + 2 * yi) * w2..][..w2];
                        let dyrow1 = &dys[((co * t + ti) * h2 + 2 * yi + 1) * w2..][..w2];
                        for (i, &xv) in xrow.iter().enumerate() {
                            a00 += dyrow0[2 * i] * xv;
                            a01 += dyrow0[2 * i + 1] * xv;
                            a10 += dyrow1[2 * i] * xv;
                            a11 += dyrow1[2 * i + 1] * xv;
                        }
                    }
                }
                dw[[co, ci, 0, 0]] = a00;
                dw[[co, ci, 0, 1]] = a01;
                dw[[co, ci, 1, 0]] = a10;
                dw[[co, ci, 1, 1]] = a11;
            }
        }
        (dw, db)
    }
}

/// Group normalization over `[C/g × T × H × W]` statistics per group.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: Array1<f32>,
    pub beta: Array1<f32>,
    pub groups: usize,
    pub eps: f32,
}

#[derive(Debug, Clone)]
pub struct GnCache {
    pub xhat: Array4<f32>,
    pub inv_std: Vec<f32>,
}

/// Largest group count in {8, 4, 2, 1} dividing the channel count.
pub fn group_count(channels: usize) -> usize {
    [8usize, 4, 2, 1]
        .into_iter()
        .find(|g| channels % g == 0)
        .unwrap_or(1)
}

impl GroupNorm {
    pub fn new(channels: usize) -> Self {
        GroupNorm {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            groups: group_count(channels),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Array4<f32>) -> (Array4<f32>, GnCache) {
        let (c, t, h, w) = x.dim();
        let per_group = c / self.groups;
        let n = (per_group * t * h * w) as f64;
        let mut y = Array4::<f32>::zeros((c, t, h, w));
        let mut xhat = Array4::<f32>::zeros((c, t, h, w));
        let mut inv_std = vec![0.0f32; self.groups];
        for g in 0..self.groups {
            let c_lo = g * per_group;
            let c_hi = c_lo + per_group;
            let mut sum = 0.0f64;
            let mut sq = 0.0f64;
            for ci in c_lo..c_hi {
                for v in x.index_axis(ndarray::Axis(0), ci).iter() {
                    let vf = f64::from(*v);
                    sum += vf;
                    sq += vf * vf;
                }
            }
            let mean = sum / n;
            let var = (sq / n - mean * mean).max(0.0);
            let s = 1.0 / (var + f64::from(self.eps)).sqrt();
            inv_std[g] = s as f32;
            let (mean, s) = (mean as f32, s as f32);
            for ci in c_lo..c_hi {
                let (gm, bt) = (self.gamma[ci], self.beta[ci]);
                for ti in 0..t {
                    for yi in 0..h {
                        for xi in 0..w {
                            let xh = (x[[ci, ti, yi, xi]] - mean) * s;
                            xhat[[ci, ti, yi, xi]] = xh;
                            y[[ci, ti, yi, xi]] = gm * xh + bt;
                        }
                    }
                }
            }
        }
        (y, GnCache { xhat, inv_std })
    }

    /// Returns `(dx, dgamma, dbeta)`.
    pub fn backward(
        &self,
        cache: &GnCache,
        dy: &Array4<f32>,
    ) -> (Array4<f32>, Array1<f32>, Array1<f32>) {
        let (c, t, h, w) = dy.dim();
        let per_group = c / self.groups;
        let n = (per_group * t * h * w) as f32;
        let mut dx = Array4::<f32>::zeros((c, t, h, w));
        let mut dgamma = Array1::<f32>::zeros(c);
        let mut dbeta = Array1::<f32>::zeros(c);

        for g in 0..self.groups {
            let c_lo = g * per_group;
            let c_hi = c_lo + per_group;
            let s = cache.inv_std[g];
            // Per-channel parameter grads plus group-level reductions.
            let mut sum_dxhat = 0.0f32;
            let mut sum_dxhat_xhat = 0.0f32;
            for ci in c_lo..c_hi {
                let gm = self.gamma[ci];
                let mut dg = 0.0f32;
                let mut db = 0.0f32;
                for ti in 0..t {
                    for yi in 0..h {
                        for xi in 0..w {
                            let gdy = dy[[ci, ti, yi, xi]];
                            let xh = cache.xhat[[ci, ti, yi, xi]];
                            dg += gdy * xh;
                            db += gdy;
                            let dxhat = gm * gdy;
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xh;
                        }
                    }
                }
                dgamma[ci] = dg;
                dbeta[ci] = db;
            }
            let mean_dxhat = sum_dxhat / n;
            let mean_dxhat_xhat = sum_dxhat_xhat / n;
            for ci in c_lo..c_hi {
                let gm = self.gamma[ci];
                for ti in 0..t {
                    for yi in 0..h {
                        for xi in 0..w {
                            let dxhat = gm * dy[[ci, ti, yi, xi]];
                            let xh = cache.xhat[[ci, ti, yi, xi]];
                            dx[[ci, ti, yi, xi]] =
                                s * (dxhat - mean_dxhat - xh * mean_dxhat_xhat);
                        }
                    }
                }
            }
        }
        (dx, dgamma, dbeta)
    }
}

/// Fully connected layer on vectors.
#[derive(Debug, Clone)]
pub struct Linear {
    /// `[out][in]`
    pub w: Array2<f32>,
    pub b: Array1<f32>,
}

impl Linear {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let dist = he_normal(in_dim);
        let mut sample = || dist.sample(rng) as f32;
        Linear {
            w: Array2::from_shape_simple_fn((out_dim, in_dim), &mut sample),
            b: Array1::zeros(out_dim),
        }
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Linear {
            w: Array2::zeros((out_dim, in_dim)),
            b: Array1::zeros(out_dim),
        }
    }

    pub fn forward(&self, x: &Array1<f32>) -> Array1<f32> {
        self.w.dot(x) + &self.b
    }

    /// Returns `(dx, dw, db)`.
    pub fn backward(
        &self,
        x: &Array1<f32>,
        dy: &Array1<f32>,
    ) -> (Array1<f32>, Array2<f32>, Array1<f32>) {
        let dx = self.w.t().dot(dy);
        let mut dw = Array2::<f32>::zeros(self.w.raw_dim());
        for i in 0..dy.len() {
            let g = dy[i];
            if g != 0.0 {
                for j in 0..x.len() {
                    dw[[i, j]] = g * x[j];
                }
            }
        }
        (dx, dw, db_clone(dy))
    }
}

fn db_clone(dy: &Array1<f32>) -> Array1<f32> {
    dy.clone()
}

/// In-place ReLU; returns the activated tensor.
pub fn relu(mut x: Array4<f32>) -> Array4<f32> {
    x.mapv_inplace(|v| if v > 0.0 { v } else { 0.0 });
    x
}

/// ReLU backward using the activated output as the mask.
pub fn relu_backward(activated: &Array4<f32>, dy: &mut Array4<f32>) {
    for (g, &a) in dy.iter_mut().zip(activated.iter()) {
        if a <= 0.0 {
            *g = 0.0;
        }
    }
}

pub fn relu_vec(mut x: Array1<f32>) -> Array1<f32> {
    x.mapv_inplace(|v| if v > 0.0 { v } else { 0.0 });
    x
}

/// Inverted dropout; the mask holds 0 or 1/keep so backward is a product.
pub fn dropout_mask(
    dim: (usize, usize, usize, usize),
    rate: f32,
    rng: &mut ChaCha8Rng,
) -> Array4<f32> {
    debug_assert!((0.0..1.0).contains(&rate));
    let keep = 1.0 - rate;
    let scale = 1.0 / keep;
    Array4::from_shape_simple_fn(dim, || {
        if rng.random::<f32>() < keep {
            scale
        } else {
            0.0
        }
    })
}

/// Elementwise sigmoid.
pub fn sigmoid(mut z: Array4<f32>) -> Array4<f32> {
    z.mapv_inplace(|v| 1.0 / (1.0 + (-v).exp()));
    z
}

/// Residual unit: pre-activation GN→ReLU→conv twice, with a 1×1×1
/// convolution on the shortcut iff the channel count changes.
#[derive(Debug, Clone)]
pub struct ResidualUnit {
    pub gn1: GroupNorm,
    pub conv1: Conv3,
    pub gn2: GroupNorm,
    pub conv2: Conv3,
    pub shortcut: Option<Conv3>,
}

#[derive(Debug)]
pub struct UnitCache {
    pub x: Array4<f32>,
    pub gn1: GnCache,
    pub a: Array4<f32>,
    pub gn2: GnCache,
    pub b2: Array4<f32>,
}

impl ResidualUnit {
    pub fn new(in_c: usize, out_c: usize, rng: &mut ChaCha8Rng) -> Self {
        ResidualUnit {
            gn1: GroupNorm::new(in_c),
            conv1: Conv3::new(in_c, out_c, (3, 3, 3), (1, 1, 1), rng),
            gn2: GroupNorm::new(out_c),
            conv2: Conv3::new(out_c, out_c, (3, 3, 3), (1, 1, 1), rng),
            shortcut: (in_c != out_c).then(|| Conv3::new(in_c, out_c, (1, 1, 1), (0, 0, 0), rng)),
        }
    }

    pub fn forward(&self, x: &Array4<f32>) -> Array4<f32> {
        let (y, _) = self.forward_cached(x);
        y
    }

    pub fn forward_cached(&self, x: &Array4<f32>) -> (Array4<f32>, UnitCache) {
        let (g1, gn1c) = self.gn1.forward(x);
        let a = relu(g1);
        let h = self.conv1.forward(&a);
        let (g2, gn2c) = self.gn2.forward(&h);
        let b2 = relu(g2);
        let mut y = self.conv2.forward(&b2);
        match &self.shortcut {
            Some(sc) => y += &sc.forward(x),
            None => y += x,
        }
        (
            y,
            UnitCache {
                x: x.clone(),
                gn1: gn1c,
                a,
                gn2: gn2c,
                b2,
            },
        )
    }

    /// Returns the input gradient; parameter grads go through `sink` as
    /// `(suffix, flattened grad)` when parameter accumulation is wanted.
    pub fn backward(
        &self,
        cache: &UnitCache,
        dy: &Array4<f32>,
        mut sink: Option<&mut dyn FnMut(&str, ndarray::ArrayD<f32>)>,
    ) -> Array4<f32> {
        // conv2 branch
        if let Some(f) = sink.as_deref_mut() {
            let (dw2, db2) = self.conv2.grad_params(&cache.b2, dy);
            f("conv2.w", dw2.into_dyn());
            f("conv2.b", db2.into_dyn());
        }
        let mut db2 = self.conv2.backward_data(dy, cache.b2.dim());
        relu_backward(&cache.b2, &mut db2);
        let (dh, dg2, dbeta2) = self.gn2.backward(&cache.gn2, &db2);
        if let Some(f) = sink.as_deref_mut() {
            f("gn2.gamma", dg2.into_dyn());
            f("gn2.beta", dbeta2.into_dyn());
            let (dw1, db1) = self.conv1.grad_params(&cache.a, &dh);
            f("conv1.w", dw1.into_dyn());
            f("conv1.b", db1.into_dyn());
        }
        let mut da = self.conv1.backward_data(&dh, cache.a.dim());
        relu_backward(&cache.a, &mut da);
        let (mut dx, dg1, dbeta1) = self.gn1.backward(&cache.gn1, &da);
        if let Some(f) = sink.as_deref_mut() {
            f("gn1.gamma", dg1.into_dyn());
            f("gn1.beta", dbeta1.into_dyn());
        }
        // shortcut branch
        match &self.shortcut {
            Some(sc) => {
                if let Some(f) = sink.as_deref_mut() {
                    let (dwsc, dbsc) = sc.grad_params(&cache.x, dy);
                    f("shortcut.w", dwsc.into_dyn());
                    f("shortcut.b", dbsc.into_dyn());
                }
                dx += &sc.backward_data(dy, cache.x.dim());
            }
            None => dx += dy,
        }
        dx
    }

    pub fn out_channels(&self) -> usize {
        self.conv2.w.dim().0
    }
}
