//! Safe strided wrapper over `matrixmultiply::dgemm`.

/// A strided matrix view into a flat buffer.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Layout {
    pub offset: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl Layout {
    pub fn row_major(offset: usize, cols: usize) -> Self {
        Layout { offset, row_stride: cols, col_stride: 1 }
    }

    /// View of a row-major `rows x cols` block read as its transpose.
    pub fn transposed(offset: usize, cols: usize) -> Self {
        Layout { offset, row_stride: 1, col_stride: cols }
    }

    pub fn strided_rows(offset: usize, row_stride: usize) -> Self {
        Layout { offset, row_stride, col_stride: 1 }
    }

    fn last_index(&self, rows: usize, cols: usize) -> usize {
        self.offset + (rows - 1) * self.row_stride + (cols - 1) * self.col_stride
    }
}

/// `c = a * b + beta * c` where `a` is `m x k`, `b` is `k x n`, `c` is `m x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    la: Layout,
    b: &[f64],
    lb: Layout,
    beta: f64,
    c: &mut [f64],
    lc: Layout,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let idx = lc.offset + i * lc.row_stride + j * lc.col_stride;
                c[idx] *= beta;
            }
        }
        return;
    }
    assert!(la.last_index(m, k) < a.len(), "gemm: lhs view out of bounds");
    assert!(lb.last_index(k, n) < b.len(), "gemm: rhs view out of bounds");
    assert!(lc.last_index(m, n) < c.len(), "gemm: output view out of bounds");
    // SAFETY: every index reachable through the three views was bounds-checked
    // above, and `c` is borrowed mutably so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr().add(la.offset),
            la.row_stride as isize,
            la.col_stride as isize,
            b.as_ptr().add(lb.offset),
            lb.row_stride as isize,
            lb.col_stride as isize,
            beta,
            c.as_mut_ptr().add(lc.offset),
            lc.row_stride as isize,
            lc.col_stride as isize,
        );
    }
}
