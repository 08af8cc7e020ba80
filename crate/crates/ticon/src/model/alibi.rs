//! 2D ALiBi: additive attention biases proportional to Manhattan grid
//! distance, with the standard geometric head slopes. Depending only on
//! coordinate differences, the bias is translation invariant, which is what
//! lets a model trained on K x K windows extrapolate to full slides.

use crate::tensor::Tensor;

/// Slope of head `h` out of `heads`: `2^(-8(h+1)/H)`.
pub fn slope(head: usize, heads: usize) -> f64 {
    debug_assert!(head < heads);
    2f64.powf(-8.0 * (head + 1) as f64 / heads as f64)
}

/// Pre-softmax bias between a query at `pa` and a key at `pb`:
/// `-slope(h) * (|dr| + |dc|)`.
pub fn alibi_bias(head: usize, pa: (i32, i32), pb: (i32, i32), heads: usize) -> f64 {
    let dist = (f64::from(pa.0) - f64::from(pb.0)).abs() + (f64::from(pa.1) - f64::from(pb.1)).abs();
    -slope(head, heads) * dist
}

/// Dense `[len(q), len(k)]` bias matrix for one head.
pub fn bias_matrix(head: usize, heads: usize, pos_q: &[(i32, i32)], pos_k: &[(i32, i32)]) -> Tensor {
    let s = slope(head, heads);
    let mut data = Vec::with_capacity(pos_q.len() * pos_k.len());
    for &(qr, qc) in pos_q {
        for &(kr, kc) in pos_k {
            let dist = (f64::from(qr) - f64::from(kr)).abs() + (f64::from(qc) - f64::from(kc)).abs();
            data.push(-s * dist);
        }
    }
    Tensor { shape: vec![pos_q.len(), pos_k.len()], data, requires_grad: false, grad: None }
}
