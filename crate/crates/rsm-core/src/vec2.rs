//! Fixed-size 2D vector and matrix helpers.

pub type Vec2 = [f64; 2];
/// Row-major 2×2 matrix, `m[row][col]`.
pub type Mat2 = [[f64; 2]; 2];

#[inline]
pub fn add(a: Vec2, b: Vec2) -> Vec2 {
    [a[0] + b[0], a[1] + b[1]]
}

#[inline]
pub fn sub(a: Vec2, b: Vec2) -> Vec2 {
    [a[0] - b[0], a[1] - b[1]]
}

#[inline]
pub fn scale(a: Vec2, k: f64) -> Vec2 {
    [a[0] * k, a[1] * k]
}

/// `a + k·b`
#[inline]
pub fn axpy(a: Vec2, k: f64, b: Vec2) -> Vec2 {
    [a[0] + k * b[0], a[1] + k * b[1]]
}

#[inline]
pub fn dot(a: Vec2, b: Vec2) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

#[inline]
pub fn norm_sq(a: Vec2) -> f64 {
    dot(a, a)
}

#[inline]
pub fn norm(a: Vec2) -> f64 {
    norm_sq(a).sqrt()
}

/// `mᵀ v`
#[inline]
pub fn mat_t_vec(m: Mat2, v: Vec2) -> Vec2 {
    [m[0][0] * v[0] + m[1][0] * v[1], m[0][1] * v[0] + m[1][1] * v[1]]
}

/// `m v`
#[inline]
pub fn mat_vec(m: Mat2, v: Vec2) -> Vec2 {
    [m[0][0] * v[0] + m[0][1] * v[1], m[1][0] * v[0] + m[1][1] * v[1]]
}

/// Pairwise (cascade) summation. The split points depend only on the length,
/// so the result is independent of how the slice was produced.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    const LEAF: usize = 16;
    if xs.len() <= LEAF {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// Component-wise pairwise sum of a slice of vectors.
pub fn pairwise_sum2(xs: &[Vec2]) -> Vec2 {
    const LEAF: usize = 16;
    if xs.len() <= LEAF {
        return xs.iter().fold([0.0, 0.0], |acc, v| add(acc, *v));
    }
    let mid = xs.len() / 2;
    add(pairwise_sum2(&xs[..mid]), pairwise_sum2(&xs[mid..]))
}

/// Arithmetic mean via [`pairwise_sum2`]; `[0, 0]` for an empty slice.
pub fn mean2(xs: &[Vec2]) -> Vec2 {
    if xs.is_empty() {
        return [0.0, 0.0];
    }
    scale(pairwise_sum2(xs), 1.0 / xs.len() as f64)
}

/// Arithmetic mean via [`pairwise_sum`]; `0` for an empty slice.
pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    pairwise_sum(xs) / xs.len() as f64
}
