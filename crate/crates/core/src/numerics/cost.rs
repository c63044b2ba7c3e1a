//! Floating-point operation constants used by the tape's instrumented
//! counter and by the analytic cost model. A multiply-add counts as two
//! operations; elementwise arithmetic and activations count one per
//! element; softmax and layer normalization use fixed per-element
//! constants.

pub const ELEMENTWISE: u64 = 1;
pub const ACTIVATION: u64 = 1;
pub const SOFTMAX_PER_ELEMENT: u64 = 3;
pub const LAYER_NORM_PER_ELEMENT: u64 = 5;

#[inline]
pub fn matmul(m: usize, k: usize, n: usize) -> u64 {
    2 * (m * k * n) as u64
}

#[inline]
pub fn elementwise(n: usize) -> u64 {
    ELEMENTWISE * n as u64
}

#[inline]
pub fn activation(n: usize) -> u64 {
    ACTIVATION * n as u64
}

#[inline]
pub fn softmax(n: usize) -> u64 {
    SOFTMAX_PER_ELEMENT * n as u64
}

#[inline]
pub fn layer_norm(n: usize) -> u64 {
    LAYER_NORM_PER_ELEMENT * n as u64
}

/// Per output position: one multiply-add per filter tap plus the bias.
#[inline]
pub fn conv1d(len: usize, d: usize, filters: usize, window: usize) -> u64 {
    (len * filters) as u64 * (2 * ((2 * window + 1) * d) as u64 + 1)
}

/// Dot product and norm per row, plus the shared vector norm and the
/// final division.
#[inline]
pub fn cosine_rows(rows: usize, n: usize) -> u64 {
    (rows * (4 * n + 2) + 2 * n) as u64
}
