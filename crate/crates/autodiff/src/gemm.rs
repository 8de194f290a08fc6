//! Dense matrix-multiply kernels used by the tape.
//!
//! Three accumulating products cover forward and backward of `matmul`:
//!
//! * `gemm`:     C[m,n] += A[m,k] * B[k,n]
//! * `gemm_abt`: C[m,k] += A[m,n] * B[k,n]^T
//! * `gemm_atb`: C[k,n] += A[m,k]^T * B[m,n]
//!
//! The generic paths are cache-friendly scalar loops; `f32` dispatches to
//! AVX2+FMA kernels when the CPU supports them. All variants accumulate into
//! `c`, so callers zero the output when they want a plain product.

use num_traits::Float;

pub fn gemm_generic<T: Float>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    assert_eq!(a.len(), m * k, "gemm: lhs length");
    assert_eq!(b.len(), k * n, "gemm: rhs length");
    assert_eq!(c.len(), m * n, "gemm: out length");
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] = crow[j] + aip * brow[j];
            }
        }
    }
}

pub fn gemm_abt_generic<T: Float>(m: usize, n: usize, k: usize, a: &[T], b: &[T], c: &mut [T]) {
    assert_eq!(a.len(), m * n, "gemm_abt: lhs length");
    assert_eq!(b.len(), k * n, "gemm_abt: rhs length");
    assert_eq!(c.len(), m * k, "gemm_abt: out length");
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        let crow = &mut c[i * k..(i + 1) * k];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = T::zero();
            for j in 0..n {
                acc = acc + arow[j] * brow[j];
            }
            crow[p] = crow[p] + acc;
        }
    }
}

pub fn gemm_atb_generic<T: Float>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    assert_eq!(a.len(), m * k, "gemm_atb: lhs length");
    assert_eq!(b.len(), m * n, "gemm_atb: rhs length");
    assert_eq!(c.len(), k * n, "gemm_atb: out length");
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            let crow = &mut c[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] = crow[j] + aip * brow[j];
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
mod avx {
    #[target_feature(enable = "avx2,fma")]
    pub unsafe fn gemm_f32(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
        use std::arch::x86_64::*;
        let lanes = 8;
        let nv = n / lanes * lanes;
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            let crow = &mut c[i * n..(i + 1) * n];
            let mut j = 0;
            // 32-wide output tiles keep four FMA accumulators in flight.
            while j + 4 * lanes <= n {
                let mut acc0 = _mm256_loadu_ps(crow.as_ptr().add(j));
                let mut acc1 = _mm256_loadu_ps(crow.as_ptr().add(j + 8));
                let mut acc2 = _mm256_loadu_ps(crow.as_ptr().add(j + 16));
                let mut acc3 = _mm256_loadu_ps(crow.as_ptr().add(j + 24));
                for (p, &aip) in arow.iter().enumerate() {
                    let av = _mm256_set1_ps(aip);
                    let bp = b.as_ptr().add(p * n + j);
                    acc0 = _mm256_fmadd_ps(av, _mm256_loadu_ps(bp), acc0);
                    acc1 = _mm256_fmadd_ps(av, _mm256_loadu_ps(bp.add(8)), acc1);
                    acc2 = _mm256_fmadd_ps(av, _mm256_loadu_ps(bp.add(16)), acc2);
                    acc3 = _mm256_fmadd_ps(av, _mm256_loadu_ps(bp.add(24)), acc3);
                }
                _mm256_storeu_ps(crow.as_mut_ptr().add(j), acc0);
                _mm256_storeu_ps(crow.as_mut_ptr().add(j + 8), acc1);
                _mm256_storeu_ps(crow.as_mut_ptr().add(j + 16), acc2);
                _mm256_storeu_ps(crow.as_mut_ptr().add(j + 24), acc3);
                j += 4 * lanes;
            }
            while j + lanes <= nv {
                let mut acc = _mm256_loadu_ps(crow.as_ptr().add(j));
                for (p, &aip) in arow.iter().enumerate() {
                    let av = _mm256_set1_ps(aip);
                    acc = _mm256_fmadd_ps(av, _mm256_loadu_ps(b.as_ptr().add(p * n + j)), acc);
                }
                _mm256_storeu_ps(crow.as_mut_ptr().add(j), acc);
                j += lanes;
            }
            if j < n {
                for (p, &aip) in arow.iter().enumerate() {
                    let brow = &b[p * n..(p + 1) * n];
                    for jj in j..n {
                        crow[jj] += aip * brow[jj];
                    }
                }
            }
        }
    }

    #[target_feature(enable = "avx2,fma")]
    pub unsafe fn gemm_abt_f32(m: usize, n: usize, k: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
        use std::arch::x86_64::*;
        let lanes = 8;
        let nv = n / lanes * lanes;
        for i in 0..m {
            let arow = &a[i * n..(i + 1) * n];
            let crow = &mut c[i * k..(i + 1) * k];
            for p in 0..k {
                let brow = &b[p * n..(p + 1) * n];
                let mut acc = _mm256_setzero_ps();
                let mut j = 0;
                while j < nv {
                    let av = _mm256_loadu_ps(arow.as_ptr().add(j));
                    let bv = _mm256_loadu_ps(brow.as_ptr().add(j));
                    acc = _mm256_fmadd_ps(av, bv, acc);
                    j += lanes;
                }
                let mut buf = [0f32; 8];
                _mm256_storeu_ps(buf.as_mut_ptr(), acc);
                let mut dot = buf.iter().sum::<f32>();
                for jj in nv..n {
                    dot += arow[jj] * brow[jj];
                }
                crow[p] += dot;
            }
        }
    }

    #[target_feature(enable = "avx2,fma")]
    pub unsafe fn gemm_atb_f32(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
        use std::arch::x86_64::*;
        let lanes = 8;
        let nv = n / lanes * lanes;
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            let brow = &b[i * n..(i + 1) * n];
            for (p, &aip) in arow.iter().enumerate() {
                if aip == 0.0 {
                    continue;
                }
                let crow = &mut c[p * n..(p + 1) * n];
                let av = _mm256_set1_ps(aip);
                let mut j = 0;
                while j < nv {
                    let cv = _mm256_loadu_ps(crow.as_ptr().add(j));
                    let bv = _mm256_loadu_ps(brow.as_ptr().add(j));
                    _mm256_storeu_ps(crow.as_mut_ptr().add(j), _mm256_fmadd_ps(av, bv, cv));
                    j += lanes;
                }
                for jj in nv..n {
                    crow[jj] += aip * brow[jj];
                }
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
fn have_avx2_fma() -> bool {
    is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma")
}

pub fn gemm_f32(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    assert_eq!(a.len(), m * k, "gemm: lhs length");
    assert_eq!(b.len(), k * n, "gemm: rhs length");
    assert_eq!(c.len(), m * n, "gemm: out length");
    #[cfg(target_arch = "x86_64")]
    if have_avx2_fma() {
        unsafe { avx::gemm_f32(m, k, n, a, b, c) };
        return;
    }
    gemm_generic(m, k, n, a, b, c)
}

pub fn gemm_abt_f32(m: usize, n: usize, k: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    assert_eq!(a.len(), m * n, "gemm_abt: lhs length");
    assert_eq!(b.len(), k * n, "gemm_abt: rhs length");
    assert_eq!(c.len(), m * k, "gemm_abt: out length");
    #[cfg(target_arch = "x86_64")]
    if have_avx2_fma() {
        unsafe { avx::gemm_abt_f32(m, n, k, a, b, c) };
        return;
    }
    gemm_abt_generic(m, n, k, a, b, c)
}

pub fn gemm_atb_f32(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    assert_eq!(a.len(), m * k, "gemm_atb: lhs length");
    assert_eq!(b.len(), m * n, "gemm_atb: rhs length");
    assert_eq!(c.len(), k * n, "gemm_atb: out length");
    #[cfg(target_arch = "x86_64")]
    if have_avx2_fma() {
        unsafe { avx::gemm_atb_f32(m, k, n, a, b, c) };
        return;
    }
    gemm_atb_generic(m, k, n, a, b, c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dims() -> impl Strategy<Value = (usize, usize, usize)> {
        (1usize..12, 1usize..12, 1usize..40)
    }

    proptest! {
        #[test]
        fn simd_gemm_matches_generic((m, k, n) in dims(), seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let a: Vec<f32> = (0..m * k).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let b: Vec<f32> = (0..k * n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let mut c0 = vec![0f32; m * n];
            let mut c1 = vec![0f32; m * n];
            gemm_generic(m, k, n, &a, &b, &mut c0);
            gemm_f32(m, k, n, &a, &b, &mut c1);
            for (x, y) in c0.iter().zip(&c1) {
                prop_assert!((x - y).abs() <= 1e-4 * (1.0 + x.abs()));
            }

            let g: Vec<f32> = (0..m * n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let mut da0 = vec![0f32; m * k];
            let mut da1 = vec![0f32; m * k];
            gemm_abt_generic(m, n, k, &g, &b, &mut da0);
            gemm_abt_f32(m, n, k, &g, &b, &mut da1);
            for (x, y) in da0.iter().zip(&da1) {
                prop_assert!((x - y).abs() <= 1e-4 * (1.0 + x.abs()));
            }

            let mut db0 = vec![0f32; k * n];
            let mut db1 = vec![0f32; k * n];
            gemm_atb_generic(m, k, n, &a, &g, &mut db0);
            gemm_atb_f32(m, k, n, &a, &g, &mut db1);
            for (x, y) in db0.iter().zip(&db1) {
                prop_assert!((x - y).abs() <= 1e-4 * (1.0 + x.abs()));
            }
        }
    }
}
