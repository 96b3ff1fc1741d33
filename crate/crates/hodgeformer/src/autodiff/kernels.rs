//! Dense matmul microkernels behind the tape.
//!
//! Three accumulating products cover every dense op and its backward pass:
//!
//! - `ab`:  `C += A * B` with `A (n,k)`, `B (k,m)` — forward products and
//!   `A^T`-style backward via `atb`;
//! - `abt`: `C += A * B^T` with `A (n,k)`, `B (m,k)` — row-dot products;
//! - `atb`: `C += A^T * B` with `A (n,k)`, `B (n,m)`.
//!
//! Each has a plain scalar form and an AVX2+FMA form selected once at
//! runtime. The FMA forms fix the floating-point evaluation order (per-lane
//! accumulators, summed in a fixed order), so repeated runs on the same
//! machine are bit-identical; sequential and parallel training share these
//! kernels, which keeps them bit-identical to each other too.

#[cfg(target_arch = "x86_64")]
fn simd_enabled() -> bool {
    static ENABLED: std::sync::OnceLock<bool> = std::sync::OnceLock::new();
    *ENABLED.get_or_init(|| {
        std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma")
    })
}

macro_rules! gemm_kernels {
    ($modname:ident, $t:ty, $lanes:expr) => {
        pub(crate) mod $modname {
            #[inline(always)]
            fn ab_scalar(a: &[$t], b: &[$t], c: &mut [$t], n: usize, k: usize, m: usize) {
                for i in 0..n {
                    let arow = &a[i * k..i * k + k];
                    let crow = &mut c[i * m..i * m + m];
                    for (l, &av) in arow.iter().enumerate() {
                        if av == 0.0 {
                            continue;
                        }
                        let brow = &b[l * m..l * m + m];
                        for j in 0..m {
                            crow[j] += av * brow[j];
                        }
                    }
                }
            }

            #[inline(always)]
            fn abt_scalar(a: &[$t], b: &[$t], c: &mut [$t], n: usize, k: usize, m: usize) {
                for i in 0..n {
                    let arow = &a[i * k..i * k + k];
                    for j in 0..m {
                        let brow = &b[j * k..j * k + k];
                        let mut s: $t = 0.0;
                        for l in 0..k {
                            s += arow[l] * brow[l];
                        }
                        c[i * m + j] += s;
                    }
                }
            }

            #[inline(always)]
            fn atb_scalar(a: &[$t], b: &[$t], c: &mut [$t], n: usize, k: usize, m: usize) {
                for i in 0..n {
                    let arow = &a[i * k..i * k + k];
                    let brow = &b[i * m..i * m + m];
                    for (l, &av) in arow.iter().enumerate() {
                        if av == 0.0 {
                            continue;
                        }
                        let crow = &mut c[l * m..l * m + m];
                        for j in 0..m {
                            crow[j] += av * brow[j];
                        }
                    }
                }
            }

            #[cfg(target_arch = "x86_64")]
            #[target_feature(enable = "avx2,fma")]
            unsafe fn ab_fma(a: &[$t], b: &[$t], c: &mut [$t], n: usize, k: usize, m: usize) {
                for i in 0..n {
                    let arow = &a[i * k..i * k + k];
                    let crow = &mut c[i * m..i * m + m];
                    for (l, &av) in arow.iter().enumerate() {
                        if av == 0.0 {
                            continue;
                        }
                        let brow = &b[l * m..l * m + m];
                        for j in 0..m {
                            crow[j] = av.mul_add(brow[j], crow[j]);
                        }
                    }
                }
            }

            #[cfg(target_arch = "x86_64")]
            #[target_feature(enable = "avx2,fma")]
            unsafe fn abt_fma(a: &[$t], b: &[$t], c: &mut [$t], n: usize, k: usize, m: usize) {
                const L: usize = $lanes;
                for i in 0..n {
                    let arow = &a[i * k..i * k + k];
                    for j in 0..m {
                        let brow = &b[j * k..j * k + k];
                        // Fixed-order lane accumulators so the reduction is
                        // both vectorizable and deterministic.
                        let mut acc = [0.0 as $t; L];
                        let chunks = k / L;
                        for ch in 0..chunks {
                            let base = ch * L;
                            for lane in 0..L {
                                acc[lane] =
                                    arow[base + lane].mul_add(brow[base + lane], acc[lane]);
                            }
                        }
                        let mut s: $t = 0.0;
                        for lane in 0..L {
                            s += acc[lane];
                        }
                        for l in chunks * L..k {
                            s = arow[l].mul_add(brow[l], s);
                        }
                        c[i * m + j] += s;
                    }
                }
            }

            #[cfg(target_arch = "x86_64")]
            #[target_feature(enable = "avx2,fma")]
            unsafe fn atb_fma(a: &[$t], b: &[$t], c: &mut [$t], n: usize, k: usize, m: usize) {
                for i in 0..n {
                    let arow = &a[i * k..i * k + k];
                    let brow = &b[i * m..i * m + m];
                    for (l, &av) in arow.iter().enumerate() {
                        if av == 0.0 {
                            continue;
                        }
                        let crow = &mut c[l * m..l * m + m];
                        for j in 0..m {
                            crow[j] = av.mul_add(brow[j], crow[j]);
                        }
                    }
                }
            }

            pub(crate) fn ab(a: &[$t], b: &[$t], c: &mut [$t], n: usize, k: usize, m: usize) {
                debug_assert_eq!(a.len(), n * k);
                debug_assert_eq!(b.len(), k * m);
                debug_assert_eq!(c.len(), n * m);
                #[cfg(target_arch = "x86_64")]
                if super::simd_enabled() {
                    unsafe { ab_fma(a, b, c, n, k, m) };
                    return;
                }
                ab_scalar(a, b, c, n, k, m);
            }

            pub(crate) fn abt(a: &[$t], b: &[$t], c: &mut [$t], n: usize, k: usize, m: usize) {
                debug_assert_eq!(a.len(), n * k);
                debug_assert_eq!(b.len(), m * k);
                debug_assert_eq!(c.len(), n * m);
                #[cfg(target_arch = "x86_64")]
                if super::simd_enabled() {
                    unsafe { abt_fma(a, b, c, n, k, m) };
                    return;
                }
                abt_scalar(a, b, c, n, k, m);
            }

            pub(crate) fn atb(a: &[$t], b: &[$t], c: &mut [$t], n: usize, k: usize, m: usize) {
                debug_assert_eq!(a.len(), n * k);
                debug_assert_eq!(b.len(), n * m);
                debug_assert_eq!(c.len(), k * m);
                #[cfg(target_arch = "x86_64")]
                if super::simd_enabled() {
                    unsafe { atb_fma(a, b, c, n, k, m) };
                    return;
                }
                atb_scalar(a, b, c, n, k, m);
            }
        }
    };
}

gemm_kernels!(gemm_f32, f32, 8);
gemm_kernels!(gemm_f64, f64, 4);

/// Accumulating dense products, implemented per concrete float type so the
/// SIMD path can be selected at runtime.
pub trait Gemm: Sized {
    fn gemm_ab(a: &[Self], b: &[Self], c: &mut [Self], n: usize, k: usize, m: usize);
    fn gemm_abt(a: &[Self], b: &[Self], c: &mut [Self], n: usize, k: usize, m: usize);
    fn gemm_atb(a: &[Self], b: &[Self], c: &mut [Self], n: usize, k: usize, m: usize);
}

impl Gemm for f32 {
    fn gemm_ab(a: &[f32], b: &[f32], c: &mut [f32], n: usize, k: usize, m: usize) {
        gemm_f32::ab(a, b, c, n, k, m);
    }
    fn gemm_abt(a: &[f32], b: &[f32], c: &mut [f32], n: usize, k: usize, m: usize) {
        gemm_f32::abt(a, b, c, n, k, m);
    }
    fn gemm_atb(a: &[f32], b: &[f32], c: &mut [f32], n: usize, k: usize, m: usize) {
        gemm_f32::atb(a, b, c, n, k, m);
    }
}

impl Gemm for f64 {
    fn gemm_ab(a: &[f64], b: &[f64], c: &mut [f64], n: usize, k: usize, m: usize) {
        gemm_f64::ab(a, b, c, n, k, m);
    }
    fn gemm_abt(a: &[f64], b: &[f64], c: &mut [f64], n: usize, k: usize, m: usize) {
        gemm_f64::abt(a, b, c, n, k, m);
    }
    fn gemm_atb(a: &[f64], b: &[f64], c: &mut [f64], n: usize, k: usize, m: usize) {
        gemm_f64::atb(a, b, c, n, k, m);
    }
}
