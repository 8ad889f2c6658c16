//! Slice-level numeric kernels.
//!
//! Hot routines are compiled twice: a baseline build and an AVX2+FMA build
//! selected once at runtime. Both run the same scalar Rust; the AVX2 copy
//! just lets LLVM vectorize it wider. Row-parallel kernels split work so
//! each output row is produced by a single sequential computation, keeping
//! results bitwise identical for any thread count.

use rayon::prelude::*;

#[cfg(target_arch = "x86_64")]
fn have_avx2() -> bool {
    use std::sync::OnceLock;
    static HAVE: OnceLock<bool> = OnceLock::new();
    *HAVE.get_or_init(|| {
        std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma")
    })
}

#[cfg(target_arch = "x86_64")]
fn have_avx512() -> bool {
    use std::sync::OnceLock;
    static HAVE: OnceLock<bool> = OnceLock::new();
    *HAVE.get_or_init(|| std::arch::is_x86_feature_detected!("avx512f"))
}

macro_rules! simd_kernel {
    (
        $(#[$meta:meta])*
        $vis:vis fn $name:ident / $avx2:ident / $scalar:ident ($($arg:ident : $ty:ty),* $(,)?) $(-> $ret:ty)? $body:block
    ) => {
        #[inline(always)]
        #[allow(clippy::too_many_arguments)]
        fn $scalar($($arg: $ty),*) $(-> $ret)? $body

        #[cfg(target_arch = "x86_64")]
        #[target_feature(enable = "avx2", enable = "fma")]
        #[allow(clippy::too_many_arguments)]
        unsafe fn $avx2($($arg: $ty),*) $(-> $ret)? $body

        $(#[$meta])*
        #[allow(clippy::too_many_arguments)]
        $vis fn $name($($arg: $ty),*) $(-> $ret)? {
            #[cfg(target_arch = "x86_64")]
            if have_avx2() {
                return unsafe { $avx2($($arg),*) };
            }
            $scalar($($arg),*)
        }
    };
}

/// exp(x) via range reduction and a degree-6 polynomial. Max relative error
/// is ~2e-7 against f64 exp, and it autovectorizes, unlike libm's expf.
#[inline(always)]
#[allow(clippy::excessive_precision)]
pub fn fexp(x: f32) -> f32 {
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    const LN2_HI: f32 = 0.693_145_75;
    const LN2_LO: f32 = 1.428_606_8e-6;
    // Round-to-nearest integer via the 1.5*2^23 magic constant.
    const MAGIC: f32 = 12_582_912.0;
    // Upper clamp keeps the binade index n <= 127 so the exponent-bit
    // construction below cannot overflow to Inf.
    let xc = x.clamp(-87.3, 88.0);
    let t = xc * LOG2E + MAGIC;
    let nf = t - MAGIC;
    let r = (xc - nf * LN2_HI) - nf * LN2_LO;
    let p = 1.0
        + r * (1.0
            + r * (0.5
                + r * (0.166_666_66
                    + r * (0.041_666_668 + r * (0.008_333_452 + r * 0.001_390_884_1)))));
    let n = nf as i32;
    let scale = f32::from_bits(((n + 127) << 23) as u32);
    p * scale
}

/// tanh(x) = 1 - 2/(exp(2x) + 1), built on [`fexp`].
#[inline(always)]
pub fn ftanh(x: f32) -> f32 {
    let e = fexp((2.0 * x).clamp(-40.0, 40.0));
    1.0 - 2.0 / (e + 1.0)
}

/// sigmoid(x) = 1/(1 + exp(-x)).
#[inline(always)]
pub fn fsigmoid(x: f32) -> f32 {
    1.0 / (1.0 + fexp(-x))
}

const SQRT_2_OVER_PI: f32 = 0.797_884_6;
const GELU_C: f32 = 0.044_715;

/// GELU, tanh form.
#[inline(always)]
pub fn fgelu(x: f32) -> f32 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    0.5 * x * (1.0 + ftanh(u))
}

/// d/dx of [`fgelu`].
#[inline(always)]
pub fn fgelu_grad(x: f32) -> f32 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    let t = ftanh(u);
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// True when every element is finite. `v - v` is 0 for finite v and NaN for
/// NaN/Inf, so the accumulator trick reduces the scan to adds.
pub fn all_finite(xs: &[f32]) -> bool {
    let mut acc = 0.0f32;
    for &v in xs {
        acc += v - v;
    }
    acc == 0.0
}

simd_kernel! {
    pub fn add_slices/add_slices_avx2/add_slices_scalar(a: &[f32], b: &[f32], out: &mut [f32]) {
        for ((o, x), y) in out.iter_mut().zip(a).zip(b) {
            *o = x + y;
        }
    }
}

simd_kernel! {
    pub fn sub_slices/sub_slices_avx2/sub_slices_scalar(a: &[f32], b: &[f32], out: &mut [f32]) {
        for ((o, x), y) in out.iter_mut().zip(a).zip(b) {
            *o = x - y;
        }
    }
}

simd_kernel! {
    pub fn mul_slices/mul_slices_avx2/mul_slices_scalar(a: &[f32], b: &[f32], out: &mut [f32]) {
        for ((o, x), y) in out.iter_mut().zip(a).zip(b) {
            *o = x * y;
        }
    }
}

simd_kernel! {
    /// out = a*x + b elementwise.
    pub fn affine_slice/affine_slice_avx2/affine_slice_scalar(x: &[f32], a: f32, b: f32, out: &mut [f32]) {
        for (o, v) in out.iter_mut().zip(x) {
            *o = a * v + b;
        }
    }
}

simd_kernel! {
    /// out += scale * x.
    pub fn axpy/axpy_avx2/axpy_scalar(x: &[f32], scale: f32, out: &mut [f32]) {
        for (o, v) in out.iter_mut().zip(x) {
            *o += scale * v;
        }
    }
}

simd_kernel! {
    pub fn gelu_slice/gelu_slice_avx2/gelu_slice_scalar(x: &[f32], out: &mut [f32]) {
        for (o, v) in out.iter_mut().zip(x) {
            *o = fgelu(*v);
        }
    }
}

simd_kernel! {
    pub fn gelu_grad_slice/gelu_grad_slice_avx2/gelu_grad_slice_scalar(x: &[f32], gout: &[f32], gin: &mut [f32]) {
        for ((gi, v), go) in gin.iter_mut().zip(x).zip(gout) {
            *gi += go * fgelu_grad(*v);
        }
    }
}

simd_kernel! {
    pub fn sigmoid_slice/sigmoid_slice_avx2/sigmoid_slice_scalar(x: &[f32], out: &mut [f32]) {
        for (o, v) in out.iter_mut().zip(x) {
            *o = fsigmoid(*v);
        }
    }
}

// ---------------------------------------------------------------------------
// Matrix multiply
// ---------------------------------------------------------------------------

const MR: usize = 8;
const NR: usize = 16;
// Below this many flops the fork-join overhead outweighs the parallelism.
const PAR_MIN_FLOPS: usize = 1 << 23;

simd_kernel! {
    /// Register-tiled C = A·B for row-major slices. Handles any m.
    fn mm_block/mm_block_avx2/mm_block_scalar(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, p: usize) {
        let mut i = 0;
        while i < m {
            let mr = MR.min(m - i);
            let mut j = 0;
            while j < p {
                let nr = NR.min(p - j);
                if mr == MR && nr == NR {
                    let mut acc = [[0.0f32; NR]; MR];
                    for kk in 0..k {
                        let mut bl = [0.0f32; NR];
                        bl.copy_from_slice(&b[kk * p + j..kk * p + j + NR]);
                        for (r, accr) in acc.iter_mut().enumerate() {
                            let av = a[(i + r) * k + kk];
                            for t in 0..NR {
                                accr[t] += av * bl[t];
                            }
                        }
                    }
                    for (r, accr) in acc.iter().enumerate() {
                        c[(i + r) * p + j..(i + r) * p + j + NR].copy_from_slice(accr);
                    }
                } else {
                    // Edge tile: plain accumulation.
                    for r in 0..mr {
                        let arow = &a[(i + r) * k..(i + r + 1) * k];
                        let crow = &mut c[(i + r) * p + j..(i + r) * p + j + nr];
                        crow.fill(0.0);
                        for (kk, &av) in arow.iter().enumerate() {
                            let brow = &b[kk * p + j..kk * p + j + nr];
                            for (cv, bv) in crow.iter_mut().zip(brow) {
                                *cv += av * bv;
                            }
                        }
                    }
                }
                j += NR;
            }
            i += MR;
        }
    }
}

// A wider 4×64 tile for AVX-512: four rows of 4 zmm accumulators each.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn mm_block_512(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, p: usize) {
    const MR512: usize = 4;
    const NR512: usize = 64;
    let mut i = 0;
    while i < m {
        let mr = MR512.min(m - i);
        let mut j = 0;
        while j < p {
            let nr = NR512.min(p - j);
            if mr == MR512 && nr == NR512 {
                let mut acc = [[0.0f32; NR512]; MR512];
                for kk in 0..k {
                    let mut bl = [0.0f32; NR512];
                    bl.copy_from_slice(&b[kk * p + j..kk * p + j + NR512]);
                    for (r, accr) in acc.iter_mut().enumerate() {
                        let av = a[(i + r) * k + kk];
                        for t in 0..NR512 {
                            accr[t] += av * bl[t];
                        }
                    }
                }
                for (r, accr) in acc.iter().enumerate() {
                    c[(i + r) * p + j..(i + r) * p + j + NR512].copy_from_slice(accr);
                }
            } else {
                for r in 0..mr {
                    let arow = &a[(i + r) * k..(i + r + 1) * k];
                    let crow = &mut c[(i + r) * p + j..(i + r) * p + j + nr];
                    crow.fill(0.0);
                    for (kk, &av) in arow.iter().enumerate() {
                        let brow = &b[kk * p + j..kk * p + j + nr];
                        for (cv, bv) in crow.iter_mut().zip(brow) {
                            *cv += av * bv;
                        }
                    }
                }
            }
            j += NR512;
        }
        i += MR512;
    }
}

fn mm_dispatch(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, p: usize) {
    #[cfg(target_arch = "x86_64")]
    if have_avx512() {
        return unsafe { mm_block_512(a, b, c, m, k, p) };
    }
    mm_block(a, b, c, m, k, p)
}

/// C[m×p] = A[m×k] · B[k×p], row-parallel over row blocks.
pub fn matmul_nn(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, p: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * p);
    debug_assert_eq!(c.len(), m * p);
    let flops = 2 * m * k * p;
    if rayon::current_num_threads() > 1 && flops >= PAR_MIN_FLOPS && m >= 2 * MR {
        c.par_chunks_mut(MR * p)
            .enumerate()
            .for_each(|(bi, cchunk)| {
                let i0 = bi * MR;
                let mr = MR.min(m - i0);
                mm_dispatch(&a[i0 * k..(i0 + mr) * k], b, cchunk, mr, k, p);
            });
    } else {
        mm_dispatch(a, b, c, m, k, p);
    }
}

simd_kernel! {
    pub fn transpose_slice/transpose_avx2/transpose_scalar(src: &[f32], dst: &mut [f32], rows: usize, cols: usize) {
        // 8x8 blocking keeps both sides cache-friendly.
        const B: usize = 8;
        let mut i0 = 0;
        while i0 < rows {
            let i1 = (i0 + B).min(rows);
            let mut j0 = 0;
            while j0 < cols {
                let j1 = (j0 + B).min(cols);
                for i in i0..i1 {
                    for j in j0..j1 {
                        dst[j * rows + i] = src[i * cols + j];
                    }
                }
                j0 += B;
            }
            i0 += B;
        }
    }
}

// ---------------------------------------------------------------------------
// Softmax
// ---------------------------------------------------------------------------

simd_kernel! {
    fn softmax_row/softmax_row_avx2/softmax_row_scalar(x: &[f32], out: &mut [f32]) {
        let max = x.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f32;
        for (o, &v) in out.iter_mut().zip(x) {
            let e = fexp(v - max);
            *o = e;
            sum += e;
        }
        let inv = 1.0 / sum;
        for o in out.iter_mut() {
            *o *= inv;
        }
    }
}

/// Row-wise softmax of an r×c matrix.
pub fn softmax_rows(x: &[f32], out: &mut [f32], rows: usize, cols: usize) {
    debug_assert_eq!(x.len(), rows * cols);
    if rayon::current_num_threads() > 1 && rows * cols >= 1 << 20 {
        out.par_chunks_mut(cols)
            .zip(x.par_chunks(cols))
            .for_each(|(o, xr)| softmax_row(xr, o));
    } else {
        for (o, xr) in out.chunks_mut(cols).zip(x.chunks(cols)) {
            softmax_row(xr, o);
        }
    }
}

simd_kernel! {
    /// One row of exp-space masked softmax. The max shift is taken over
    /// unmasked entries only, so a huge masked logit cannot destabilize the
    /// row. `q` receives exp(x - max)/S for every column (the backward pass
    /// needs it for the mask gradient). Returns false when the row mask is
    /// all zeros.
    fn masked_softmax_row/masked_softmax_row_avx2/masked_softmax_row_scalar(
        x: &[f32], m: &[f32], out: &mut [f32], q: Option<&mut [f32]>
    ) -> bool {
        let mut max = f32::NEG_INFINITY;
        for (&v, &mv) in x.iter().zip(m) {
            if mv != 0.0 && v > max {
                max = v;
            }
        }
        if max == f32::NEG_INFINITY {
            return false;
        }
        let mut sum = 0.0f32;
        for ((o, &v), &mv) in out.iter_mut().zip(x).zip(m) {
            let e = fexp(v - max);
            *o = e;
            sum += e * mv;
        }
        let inv = 1.0 / sum;
        match q {
            Some(qr) => {
                for ((o, qv), &mv) in out.iter_mut().zip(qr.iter_mut()).zip(m) {
                    let u = *o * inv;
                    *qv = u;
                    *o = u * mv;
                }
            }
            None => {
                for (o, &mv) in out.iter_mut().zip(m) {
                    *o = *o * inv * mv;
                }
            }
        }
        true
    }
}

/// Row-wise masked softmax. Returns the index of the first degenerate
/// (all-masked) row on failure.
#[allow(clippy::needless_range_loop)]
pub fn masked_softmax_rows(
    x: &[f32],
    m: &[f32],
    out: &mut [f32],
    mut q: Option<&mut [f32]>,
    rows: usize,
    cols: usize,
) -> std::result::Result<(), usize> {
    debug_assert_eq!(x.len(), rows * cols);
    debug_assert_eq!(m.len(), rows * cols);
    for r in 0..rows {
        let s = r * cols..(r + 1) * cols;
        let qr = q.as_mut().map(|qb| &mut qb[s.clone()]);
        if !masked_softmax_row(&x[s.clone()], &m[s.clone()], &mut out[s], qr) {
            return Err(r);
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

simd_kernel! {
    /// LayerNorm forward for one row; returns (mean, inv_std).
    fn layer_norm_row/layer_norm_row_avx2/layer_norm_row_scalar(
        x: &[f32], gamma: &[f32], beta: &[f32], eps: f32, out: &mut [f32]
    ) -> (f32, f32) {
        let n = x.len() as f32;
        let mut sum = 0.0f32;
        let mut sq = 0.0f32;
        for &v in x {
            sum += v;
            sq += v * v;
        }
        let mean = sum / n;
        let var = (sq / n - mean * mean).max(0.0);
        let inv_std = 1.0 / (var + eps).sqrt();
        for (((o, &v), &g), &b) in out.iter_mut().zip(x).zip(gamma).zip(beta) {
            *o = (v - mean) * inv_std * g + b;
        }
        (mean, inv_std)
    }
}

#[allow(clippy::too_many_arguments)]
pub fn layer_norm_rows(
    x: &[f32],
    gamma: &[f32],
    beta: &[f32],
    eps: f32,
    out: &mut [f32],
    stats: &mut Vec<(f32, f32)>,
    rows: usize,
    cols: usize,
) {
    stats.clear();
    for r in 0..rows {
        let s = r * cols..(r + 1) * cols;
        stats.push(layer_norm_row(&x[s.clone()], gamma, beta, eps, &mut out[s]));
    }
}

simd_kernel! {
    /// RMSNorm forward for one row; returns 1/rms.
    fn rms_norm_row/rms_norm_row_avx2/rms_norm_row_scalar(
        x: &[f32], gamma: &[f32], eps: f32, out: &mut [f32]
    ) -> f32 {
        let n = x.len() as f32;
        let mut sq = 0.0f32;
        for &v in x {
            sq += v * v;
        }
        let inv_rms = 1.0 / (sq / n + eps).sqrt();
        for ((o, &v), &g) in out.iter_mut().zip(x).zip(gamma) {
            *o = v * inv_rms * g;
        }
        inv_rms
    }
}

pub fn rms_norm_rows(
    x: &[f32],
    gamma: &[f32],
    eps: f32,
    out: &mut [f32],
    inv_rms: &mut Vec<f32>,
    rows: usize,
    cols: usize,
) {
    inv_rms.clear();
    for r in 0..rows {
        let s = r * cols..(r + 1) * cols;
        inv_rms.push(rms_norm_row(&x[s.clone()], gamma, eps, &mut out[s]));
    }
}
