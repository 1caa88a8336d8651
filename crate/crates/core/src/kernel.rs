//! Distance and inner-product kernels with a fixed summation order.
//!
//! Both kernels accumulate in 16 independent `f32` lanes over 16-wide chunks,
//! then fold the lanes and the tail in a fixed order. The AVX2 variant runs
//! the same arithmetic (no FMA contraction), so results are bitwise identical
//! whichever path is taken.

const LANES: usize = 16;

#[inline(always)]
fn fold(acc: [f32; LANES], tail: f32) -> f32 {
    let mut s = 0.0f32;
    for v in acc {
        s += v;
    }
    s + tail
}

#[inline(always)]
fn squared_distance_impl(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; LANES];
    let ca = a.chunks_exact(LANES);
    let cb = b.chunks_exact(LANES);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..LANES {
            let d = x[i] - y[i];
            acc[i] += d * d;
        }
    }
    let mut tail = 0.0f32;
    for (x, y) in ra.iter().zip(rb) {
        let d = x - y;
        tail += d * d;
    }
    fold(acc, tail)
}

#[inline(always)]
fn dot_impl(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; LANES];
    let ca = a.chunks_exact(LANES);
    let cb = b.chunks_exact(LANES);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..LANES {
            acc[i] += x[i] * y[i];
        }
    }
    let mut tail = 0.0f32;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    fold(acc, tail)
}

#[cfg(target_arch = "x86_64")]
mod avx {
    #[target_feature(enable = "avx2")]
    pub(super) unsafe fn squared_distance(a: &[f32], b: &[f32]) -> f32 {
        super::squared_distance_impl(a, b)
    }

    #[target_feature(enable = "avx2")]
    pub(super) unsafe fn dot(a: &[f32], b: &[f32]) -> f32 {
        super::dot_impl(a, b)
    }
}

#[cfg(target_arch = "x86_64")]
fn has_avx2() -> bool {
    use std::sync::OnceLock;
    static AVX2: OnceLock<bool> = OnceLock::new();
    *AVX2.get_or_init(|| is_x86_feature_detected!("avx2"))
}

/// Squared Euclidean distance between two equal-length rows.
#[inline]
pub fn squared_distance(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    #[cfg(target_arch = "x86_64")]
    if has_avx2() {
        // SAFETY: the CPU supports AVX2, checked above.
        return unsafe { avx::squared_distance(a, b) };
    }
    squared_distance_impl(a, b)
}

/// Inner product of two equal-length rows.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    #[cfg(target_arch = "x86_64")]
    if has_avx2() {
        // SAFETY: the CPU supports AVX2, checked above.
        return unsafe { avx::dot(a, b) };
    }
    dot_impl(a, b)
}
