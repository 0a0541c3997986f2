//! Vectorized form of the sum-of-Kronecker-products layer.

use crate::diff::Tensor;

/// `(A ⊗ B)[(i, p), (j, q)] = A[i, j] * B[p, q]`, with row index
/// `i * B.rows + p` and column index `j * B.cols + q`.
pub fn kron(a: &Tensor, b: &Tensor) -> Tensor {
    let (br, bc) = (b.rows(), b.cols());
    Tensor::from_fn(a.rows() * br, a.cols() * bc, |r, c| a.get(r / br, c / bc) * b.get(r % br, c % bc))
}

/// Column-stacking vectorization, `n*d x 1`.
pub fn vec_cols(x: &Tensor) -> Tensor {
    let (n, d) = (x.rows(), x.cols());
    Tensor::from_fn(n * d, 1, |r, _| x.get(r % n, r / n))
}

/// Inverse of [`vec_cols`].
pub fn unvec_cols(v: &Tensor, rows: usize, cols: usize) -> Tensor {
    Tensor::from_fn(rows, cols, |i, j| v.get(j * rows + i, 0))
}

/// `unvec(sum_c (W_c^T ⊗ A_c) vec(X))`.
///
/// # Panics
/// If `ops` and `weights` differ in length or shapes do not chain.
pub fn skp_layer_kron(ops: &[Tensor], x: &Tensor, weights: &[Tensor]) -> Tensor {
    assert_eq!(ops.len(), weights.len(), "one weight per operator");
    let n = x.rows();
    let out_cols = weights.first().map_or(0, |w| w.cols());
    let v = vec_cols(x);
    let mut acc = Tensor::zeros(n * out_cols, 1);
    for (a, w) in ops.iter().zip(weights) {
        acc.add_assign(&kron(&w.transpose(), a).matmul(&v));
    }
    unvec_cols(&acc, n, out_cols)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vec_round_trip() {
        let x = Tensor::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let v = vec_cols(&x);
        assert_eq!(v.data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        assert_eq!(unvec_cols(&v, 2, 3), x);
    }

    #[test]
    fn identity_layer_is_identity() {
        let x = Tensor::from_vec(2, 2, vec![1.0, -2.0, 0.5, 3.0]);
        let y = skp_layer_kron(&[Tensor::identity(2)], &x, &[Tensor::identity(2)]);
        assert_eq!(y, x);
    }
}
