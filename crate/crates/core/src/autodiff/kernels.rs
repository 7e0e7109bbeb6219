//! Slice-level dense kernels. All matrices are row-major; every kernel
//! accumulates into `out` rather than overwriting it.

use crate::scalar::Scalar;

#[inline]
pub fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * *xi;
    }
}

/// `out[M,N] += a[M,K] · b[K,N]`
pub fn gemm_nn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    assert!(a.len() == m * k && b.len() == k * n && out.len() == m * n);
    T::gemm_acc(m, k, n, a, (k as isize, 1), b, (n as isize, 1), out);
}

/// `out[M,N] += a[M,K] · b[N,K]ᵀ`
pub fn gemm_nt<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    assert!(a.len() == m * k && b.len() == n * k && out.len() == m * n);
    T::gemm_acc(m, k, n, a, (k as isize, 1), b, (1, k as isize), out);
}

/// `out[K,N] += a[M,K]ᵀ · b[M,N]`
pub fn gemm_tn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    assert!(a.len() == m * k && b.len() == m * n && out.len() == k * n);
    T::gemm_acc(k, m, n, a, (1, k as isize), b, (n as isize, 1), out);
}

/// Strides of a row-major shape.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Axis permutation: output axis `i` is input axis `axes[i]`.
pub fn permute<T: Scalar>(data: &[T], shape: &[usize], axes: &[usize]) -> (Vec<T>, Vec<usize>) {
    let rank = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    // trailing axes left in place move as contiguous blocks
    let mut lead = rank;
    while lead > 0 && axes[lead - 1] == lead - 1 {
        lead -= 1;
    }
    let block: usize = shape[lead..].iter().product();
    let src_strides: Vec<usize> = axes[..lead].iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; lead];
    let mut offset = 0usize;
    for _ in 0..data.len() / block.max(1) {
        out.extend_from_slice(&data[offset..offset + block]);
        // odometer increment over the leading output index
        for ax in (0..lead).rev() {
            idx[ax] += 1;
            offset += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out, out_shape)
}

pub fn inverse_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}
