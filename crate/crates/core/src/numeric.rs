//! Floating-point element types for model tensors, and the small-batch
//! matrix product used by the recurrent step.

use ndarray::{Array2, ArrayView2, NdFloat};

/// `f32` for training, `f64` for gradient checks and oracles.
pub trait Real: NdFloat + Default {
    const DTYPE: &'static str;
    const BYTES: usize;

    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    /// `c += a · b` on contiguous row-major `[m, k]`, `[k, n]`, `[m, n]`
    /// buffers when a specialised kernel exists; false leaves `c` untouched.
    fn gemm_acc(_m: usize, _k: usize, _n: usize, _a: &[Self], _b: &[Self], _c: &mut [Self]) -> bool {
        false
    }
}

impl Real for f32 {
    const DTYPE: &'static str = "f32";
    const BYTES: usize = 4;

    fn of(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
    fn gemm_acc(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) -> bool {
        assert!(a.len() == m * k && b.len() == k * n && c.len() == m * n, "gemm buffer sizes");
        #[cfg(target_arch = "x86_64")]
        if std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma") {
            // SAFETY: the required CPU features were just detected and the
            // buffer sizes were checked above.
            unsafe { avx::sgemm_acc(m, k, n, a, b, c) };
            return true;
        }
        false
    }
}

impl Real for f64 {
    const DTYPE: &'static str = "f64";
    const BYTES: usize = 8;

    fn of(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

/// `a · b`. Contiguous operands with few rows skip the general GEMM, whose
/// per-call packing dominates at decoder batch sizes.
pub fn matmul<F: Real>(a: &ArrayView2<F>, b: &ArrayView2<F>) -> Array2<F> {
    let (m, k) = a.dim();
    let n = b.ncols();
    assert_eq!(k, b.nrows(), "inner dimensions differ");
    if m <= 64 {
        if let (Some(sa), Some(sb)) = (a.as_slice(), b.as_slice()) {
            let mut c = Array2::zeros((m, n));
            if F::gemm_acc(m, k, n, sa, sb, c.as_slice_mut().expect("fresh array")) {
                return c;
            }
        }
    }
    a.dot(b)
}

#[cfg(target_arch = "x86_64")]
mod avx {
    use std::arch::x86_64::*;

    /// Register tile of 4 rows by 16 columns; B panels stay in L1 while
    /// every row block streams past them.
    #[target_feature(enable = "avx2,fma")]
    pub(super) unsafe fn sgemm_acc(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
        let (ap, bp, cp) = (a.as_ptr(), b.as_ptr(), c.as_mut_ptr());
        let n16 = n / 16 * 16;
        let m4 = m / 4 * 4;
        for j in (0..n16).step_by(16) {
            for i in (0..m4).step_by(4) {
                let mut acc = [_mm256_setzero_ps(); 8];
                for p in 0..k {
                    let b0 = _mm256_loadu_ps(bp.add(p * n + j));
                    let b1 = _mm256_loadu_ps(bp.add(p * n + j + 8));
                    for r in 0..4 {
                        let av = _mm256_broadcast_ss(&*ap.add((i + r) * k + p));
                        acc[2 * r] = _mm256_fmadd_ps(av, b0, acc[2 * r]);
                        acc[2 * r + 1] = _mm256_fmadd_ps(av, b1, acc[2 * r + 1]);
                    }
                }
                for r in 0..4 {
                    let out = cp.add((i + r) * n + j);
                    _mm256_storeu_ps(out, _mm256_add_ps(_mm256_loadu_ps(out), acc[2 * r]));
                    _mm256_storeu_ps(out.add(8), _mm256_add_ps(_mm256_loadu_ps(out.add(8)), acc[2 * r + 1]));
                }
            }
            for i in m4..m {
                let (mut c0, mut c1) = (_mm256_setzero_ps(), _mm256_setzero_ps());
                for p in 0..k {
                    let av = _mm256_broadcast_ss(&*ap.add(i * k + p));
                    c0 = _mm256_fmadd_ps(av, _mm256_loadu_ps(bp.add(p * n + j)), c0);
                    c1 = _mm256_fmadd_ps(av, _mm256_loadu_ps(bp.add(p * n + j + 8)), c1);
                }
                let out = cp.add(i * n + j);
                _mm256_storeu_ps(out, _mm256_add_ps(_mm256_loadu_ps(out), c0));
                _mm256_storeu_ps(out.add(8), _mm256_add_ps(_mm256_loadu_ps(out.add(8)), c1));
            }
        }
        for i in 0..m {
            for j in n16..n {
                let mut s = 0.0f32;
                for p in 0..k {
                    s = (*ap.add(i * k + p)).mul_add(*bp.add(p * n + j), s);
                }
                *cp.add(i * n + j) += s;
            }
        }
    }
}
