/// Strided layout of a matrix operand: (row stride, column stride).
pub type Layout = (usize, usize);

/// Row-major `[rows, cols]`.
pub const fn row_major(cols: usize) -> Layout {
    (cols, 1)
}

/// Transposed view of a row-major buffer with `stored_cols` columns.
pub const fn transposed(stored_cols: usize) -> Layout {
    (1, stored_cols)
}

fn max_offset(rows: usize, cols: usize, (rs, cs): Layout) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs + (cols - 1) * cs + 1
    }
}

/// `c = alpha * a @ b + beta * c` for an `[m,k] x [k,n]` product.
///
/// Thin safe wrapper over `matrixmultiply::dgemm`; bounds are checked up front
/// so the unsafe call only ever sees in-range strides.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    a_layout: Layout,
    b: &[f64],
    b_layout: Layout,
    beta: f64,
    c: &mut [f64],
    c_layout: Layout,
) {
    assert!(a.len() >= max_offset(m, k, a_layout), "gemm: lhs buffer too small");
    assert!(b.len() >= max_offset(k, n, b_layout), "gemm: rhs buffer too small");
    assert!(c.len() >= max_offset(m, n, c_layout), "gemm: output buffer too small");
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: every index the kernel touches is `< max_offset(..)`, which the
    // asserts above keep within each slice; `c` is uniquely borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            a_layout.0 as isize,
            a_layout.1 as isize,
            b.as_ptr(),
            b_layout.0 as isize,
            b_layout.1 as isize,
            beta,
            c.as_mut_ptr(),
            c_layout.0 as isize,
            c_layout.1 as isize,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_naive_product() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3x2
        let mut c = [0.0; 4];
        gemm(2, 3, 2, 1.0, &a, row_major(3), &b, row_major(2), 0.0, &mut c, row_major(2));
        assert_eq!(c, [58.0, 64.0, 139.0, 154.0]);

        // a^T (3x2) times a row-major 2x2 identity-ish
        let id = [1.0, 0.0, 0.0, 1.0];
        let mut d = [0.0; 6];
        gemm(3, 2, 2, 1.0, &a, transposed(3), &id, row_major(2), 0.0, &mut d, row_major(2));
        assert_eq!(d, [1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }
}
