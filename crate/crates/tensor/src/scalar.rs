//! Floating point element types supported by the engine.

use std::fmt::Debug;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Lane width used for hand-unrolled reductions. Wide enough for AVX-512 f32.
const LANES: usize = 16;

/// Element type of a [`crate::Tensor`].
///
/// Implemented for `f32` (training) and `f64` (gradient checks and oracles).
pub trait Scalar: Float + NumAssign + FromPrimitive + ToPrimitive + Debug + Default + Send + Sync + 'static {
    /// Short dtype tag used in serialized archives.
    const DTYPE: &'static str;

    /// `c = alpha * a * b + beta * c` over strided row/column layouts.
    ///
    /// # Safety
    /// The strides must describe valid, in-bounds views of the given pointers,
    /// and `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
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

    /// In-place `x = exp(x)` over a slice.
    fn exp_slice(xs: &mut [Self]);

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite conversion")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }

    /// Sum with a fixed lane-parallel association order (deterministic and vectorisable).
    fn sum_slice(xs: &[Self]) -> Self {
        let mut acc = [Self::zero(); LANES];
        let chunks = xs.chunks_exact(LANES);
        let rest = chunks.remainder();
        for c in chunks {
            for i in 0..LANES {
                acc[i] += c[i];
            }
        }
        let mut total = Self::zero();
        for a in acc {
            total += a;
        }
        for &r in rest {
            total += r;
        }
        total
    }

    /// Maximum of a non-empty slice; NaN entries are ignored unless all are NaN.
    fn max_slice(xs: &[Self]) -> Self {
        let mut acc = [Self::neg_infinity(); LANES];
        let chunks = xs.chunks_exact(LANES);
        let rest = chunks.remainder();
        for c in chunks {
            for i in 0..LANES {
                acc[i] = if c[i] > acc[i] { c[i] } else { acc[i] };
            }
        }
        let mut m = Self::neg_infinity();
        for a in acc.iter().chain(rest) {
            if *a > m {
                m = *a;
            }
        }
        m
    }

    /// Dot product with the same fixed association order as [`Scalar::sum_slice`].
    fn dot_slice(a: &[Self], b: &[Self]) -> Self {
        debug_assert_eq!(a.len(), b.len());
        let mut acc = [Self::zero(); LANES];
        let ca = a.chunks_exact(LANES);
        let cb = b.chunks_exact(LANES);
        let (ra, rb) = (ca.remainder(), cb.remainder());
        for (x, y) in ca.zip(cb) {
            for i in 0..LANES {
                acc[i] += x[i] * y[i];
            }
        }
        let mut total = Self::zero();
        for v in acc {
            total += v;
        }
        for (x, y) in ra.iter().zip(rb) {
            total += *x * *y;
        }
        total
    }
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";

    unsafe fn gemm_raw(
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
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }

    fn exp_slice(xs: &mut [f32]) {
        // Cephes-style expf: range reduction to |r| <= ln2/2 and a degree-6
        // polynomial. Branch free so the loop vectorises; max error ~2 ulp.
        const LOG2E: f32 = std::f32::consts::LOG2_E;
        const C1: f32 = 0.693_359_4;
        const C2: f32 = -2.121_944_4e-4;
        const P0: f32 = 1.987_569_1e-4;
        const P1: f32 = 1.398_199_9e-3;
        const P2: f32 = 8.333_452e-3;
        const P3: f32 = 4.166_579_6e-2;
        const P4: f32 = 1.666_666_5e-1;
        const P5: f32 = 5e-1;
        // Adding 1.5·2²³ rounds to the nearest integer and leaves it in the
        // low mantissa bits, avoiding float→int conversions that block SIMD.
        const ROUND: f32 = 12_582_912.0;
        const ROUND_BITS: u32 = 0x4b40_0000;
        for x in xs.iter_mut() {
            let v = x.clamp(-87.0, 88.0);
            let shifted = v * LOG2E + ROUND;
            let n = shifted - ROUND;
            let r = v - n * C1 - n * C2;
            let r2 = r * r;
            let p = ((((P0 * r + P1) * r + P2) * r + P3) * r + P4) * r + P5;
            let p = p * r2 + r + 1.0;
            let e = shifted.to_bits().wrapping_sub(ROUND_BITS).wrapping_add(127);
            *x = p * f32::from_bits(e << 23);
        }
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";

    unsafe fn gemm_raw(
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
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }

    fn exp_slice(xs: &mut [f64]) {
        for x in xs.iter_mut() {
            *x = x.exp();
        }
    }
}
