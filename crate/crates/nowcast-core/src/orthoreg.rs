//! Soft orthogonality penalty over 1×1×1 convolution kernels.
//!
//! Each penalized kernel is viewed as a matrix `W` (rows = output channels)
//! and scored by the spectral norm of its shifted Gram matrix `WᵀW − Iₙ`,
//! estimated with the power method. The penalty over a kernel set `𝒲` is
//!
//! ```text
//! (λ / |𝒲|) · Σ_{W ∈ 𝒲} σ(WᵀW − Iₙ)
//! ```
//!
//! which is zero exactly when every kernel has orthonormal columns. All
//! arithmetic here is `f64`; gradients flow through the full power-method
//! computation (no stop-gradient), including the start vector draw and the
//! intermediate renormalizations, so finite-difference checks are
//! well-defined at any iteration count.

use ndarray::{Array1, Array2, ArrayView5};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::CoreError;
use crate::rng;
use crate::Result;

/// A 1×1×1 convolution kernel reshaped to its `[out × in]` weight matrix.
#[derive(Debug, Clone)]
pub struct KernelMatrixView {
    matrix: Array2<f64>,
}

impl KernelMatrixView {
    pub fn matrix(&self) -> &Array2<f64> {
        &self.matrix
    }

    pub fn out_channels(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn in_channels(&self) -> usize {
        self.matrix.ncols()
    }
}

/// Reshapes a `[out][in][1][1][1]` convolution kernel into its weight matrix.
///
/// Only 1×1×1 kernels are penalized; any other extent is rejected.
pub fn kernel_as_matrix(kernel: &ArrayView5<f32>) -> Result<KernelMatrixView> {
    let (out_c, in_c, kt, kh, kw) = kernel.dim();
    if kt != 1 || kh != 1 || kw != 1 {
        return Err(CoreError::invalid(format!(
            "kernel_as_matrix expects 1x1x1 extents, got {kt}x{kh}x{kw}"
        )));
    }
    let mut matrix = Array2::<f64>::zeros((out_c, in_c));
    for i in 0..out_c {
        for j in 0..in_c {
            matrix[[i, j]] = f64::from(kernel[[i, j, 0, 0, 0]]);
        }
    }
    Ok(KernelMatrixView { matrix })
}

/// `WᵀW − Iₙ` with `n = in_channels`; always square regardless of the
/// kernel's orientation.
pub fn shifted_gram(w: &Array2<f64>) -> Array2<f64> {
    let n = w.ncols();
    let mut m = w.t().dot(w);
    for i in 0..n {
        m[[i, i]] -= 1.0;
    }
    m
}

/// Result of a power-method spectral norm estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralEstimate {
    /// Estimated spectral norm; a lower bound on the true norm.
    pub sigma: f64,
    /// Set when the start vector was annihilated before the final pair; the
    /// estimate is then 0 by convention.
    pub degenerate: bool,
}

/// Power-method spectral norm of a symmetric matrix.
///
/// One iteration is the pair `u ← Mv, v ← Mu` with `σ = ‖v‖/‖u‖` taken
/// after the final pair; the start vector is drawn from a standard normal
/// (redrawn in the measure-zero all-zero case). `v` is renormalized between
/// pairs, which leaves the ratio unchanged but keeps the iterates bounded.
pub fn spectral_norm_power(m: &Array2<f64>, iters: usize, seed: u64) -> Result<SpectralEstimate> {
    if m.nrows() != m.ncols() {
        return Err(CoreError::invalid(format!(
            "spectral_norm_power expects a square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    if iters == 0 {
        return Err(CoreError::invalid("spectral_norm_power requires iters >= 1"));
    }
    let v0 = draw_start_vector(m.nrows(), seed);
    Ok(power_forward(m, &v0, iters).estimate())
}

fn draw_start_vector(n: usize, seed: u64) -> Array1<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    loop {
        let v = Array1::from_iter((0..n).map(|_| normal.sample(&mut rng)));
        if v.iter().any(|&x| x != 0.0) {
            return v;
        }
    }
}

fn norm(v: &Array1<f64>) -> f64 {
    v.dot(v).sqrt()
}

/// Forward trace of the power method, kept for the backward pass.
struct PowerTrace {
    /// Normalized pair inputs: `vhat[k]` feeds pair `k`. `vhat[0]` is the raw draw.
    vhats: Vec<Array1<f64>>,
    /// Per-pair `u = M vhat` vectors.
    us: Vec<Array1<f64>>,
    /// Per-pair `v = M u` vectors (pre-normalization).
    vs: Vec<Array1<f64>>,
    sigma: f64,
    degenerate: bool,
    completed_pairs: usize,
}

impl PowerTrace {
    fn estimate(&self) -> SpectralEstimate {
        SpectralEstimate {
            sigma: self.sigma,
            degenerate: self.degenerate,
        }
    }
}

fn power_forward(m: &Array2<f64>, v0: &Array1<f64>, iters: usize) -> PowerTrace {
    let mut vhats = vec![v0.clone()];
    let mut us = Vec::with_capacity(iters);
    let mut vs = Vec::with_capacity(iters);
    for k in 0..iters {
        let u = m.dot(&vhats[k]);
        if norm(&u) == 0.0 {
            return PowerTrace {
                vhats,
                us,
                vs,
                sigma: 0.0,
                degenerate: true,
                completed_pairs: k,
            };
        }
        let v = m.dot(&u);
        us.push(u);
        vs.push(v.clone());
        if k + 1 < iters {
            let nv = norm(&v);
            if nv == 0.0 {
                return PowerTrace {
                    vhats,
                    us,
                    vs,
                    sigma: 0.0,
                    degenerate: true,
                    completed_pairs: k + 1,
                };
            }
            vhats.push(&v / nv);
        }
    }
    let u_last = &us[iters - 1];
    let v_last = &vs[iters - 1];
    PowerTrace {
        sigma: norm(v_last) / norm(u_last),
        degenerate: false,
        vhats,
        us,
        vs,
        completed_pairs: iters,
    }
}

/// Backpropagates dσ/dM through the full iteration trace. Degenerate traces
/// get a zero gradient (σ is constant zero on that branch).
fn power_backward(m: &Array2<f64>, trace: &PowerTrace) -> Array2<f64> {
    let n = m.nrows();
    let mut gm = Array2::<f64>::zeros((n, n));
    if trace.degenerate || trace.completed_pairs == 0 {
        return gm;
    }
    let last = trace.completed_pairs - 1;
    let u_last = &trace.us[last];
    let v_last = &trace.vs[last];
    let nu = norm(u_last);
    let nv = norm(v_last);

    // σ = ‖v‖/‖u‖
    let mut gv = v_last * (1.0 / (nv * nu));
    let mut gu = u_last * (-nv / (nu * nu * nu));

    for k in (0..=last).rev() {
        // v = M u  ⇒  gM += gv uᵀ, gu += Mᵀ gv
        let u = &trace.us[k];
        let vhat = &trace.vhats[k];
        accumulate_outer(&mut gm, &gv, u);
        gu = gu + m.t().dot(&gv);
        // u = M vhat  ⇒  gM += gu vhatᵀ, gvhat = Mᵀ gu
        accumulate_outer(&mut gm, &gu, vhat);
        if k == 0 {
            break;
        }
        let gvhat = m.t().dot(&gu);
        // vhat = v_{k-1} / ‖v_{k-1}‖
        let v_prev = &trace.vs[k - 1];
        let nprev = norm(v_prev);
        let dot = gvhat.dot(vhat);
        gv = (gvhat - &(vhat * dot)) / nprev;
        gu = Array1::zeros(n);
    }
    gm
}

fn accumulate_outer(gm: &mut Array2<f64>, a: &Array1<f64>, b: &Array1<f64>) {
    for i in 0..a.len() {
        let ai = a[i];
        if ai == 0.0 {
            continue;
        }
        for j in 0..b.len() {
            gm[[i, j]] += ai * b[j];
        }
    }
}

/// σ(WᵀW − I) and its gradient with respect to `W`.
///
/// The backward pass uses `dM = dWᵀW + WᵀdW`, i.e. `gW = W (gM + gMᵀ)`.
pub fn sigma_with_grad(
    w: &Array2<f64>,
    iters: usize,
    seed: u64,
) -> Result<(SpectralEstimate, Array2<f64>)> {
    if iters == 0 {
        return Err(CoreError::invalid("sigma_with_grad requires iters >= 1"));
    }
    let m = shifted_gram(w);
    let v0 = draw_start_vector(m.nrows(), seed);
    let trace = power_forward(&m, &v0, iters);
    let gm = power_backward(&m, &trace);
    let gw = w.dot(&(&gm + &gm.t()));
    Ok((trace.estimate(), gw))
}

/// Kernel-set penalty `(λ/|𝒲|) Σ σ(WᵀW − Iₙ)`.
///
/// Each kernel draws its own start vector from a seed derived from `seed`
/// and the kernel's position in the set.
pub fn srip_penalty(kernels: &[Array2<f64>], lambda: f64, iters: usize, seed: u64) -> Result<f64> {
    let (loss, _) = srip_penalty_with_grads(kernels, lambda, iters, seed)?;
    Ok(loss)
}

/// Penalty plus per-kernel gradients, in the order the kernels were given.
pub fn srip_penalty_with_grads(
    kernels: &[Array2<f64>],
    lambda: f64,
    iters: usize,
    seed: u64,
) -> Result<(f64, Vec<Array2<f64>>)> {
    if kernels.is_empty() {
        return Err(CoreError::invalid("srip penalty requires a nonempty kernel set"));
    }
    if lambda < 0.0 {
        return Err(CoreError::invalid(format!("srip lambda must be >= 0, got {lambda}")));
    }
    let scale = lambda / kernels.len() as f64;
    if lambda == 0.0 {
        let grads = kernels.iter().map(|w| Array2::zeros(w.raw_dim())).collect();
        return Ok((0.0, grads));
    }
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(kernels.len());
    for (k, w) in kernels.iter().enumerate() {
        let (est, gw) = sigma_with_grad(w, iters, rng::mix(seed, &[k as u64]))?;
        total += est.sigma;
        grads.push(gw * scale);
    }
    Ok((total * scale, grads))
}
