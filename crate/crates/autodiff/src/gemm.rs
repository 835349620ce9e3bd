//! Strided `c += a * b` on top of the `matrixmultiply` kernels.

use crate::tensor::Real;

/// Row and column strides of a matrix view, in elements.
#[derive(Debug, Clone, Copy)]
pub struct Layout {
    pub rs: usize,
    pub cs: usize,
}

impl Layout {
    /// Contiguous row-major with `cols` columns.
    pub fn rows(cols: usize) -> Self {
        Self { rs: cols, cs: 1 }
    }

    /// Transposed view of a contiguous row-major matrix with `cols` columns.
    pub fn transposed(cols: usize) -> Self {
        Self { rs: 1, cs: cols }
    }

    fn extent(self, r: usize, c: usize) -> usize {
        (r - 1) * self.rs + (c - 1) * self.cs + 1
    }
}

/// `c[m, n] += a[m, k] * b[k, n]` for strided views. `c` must not alias
/// itself, i.e. distinct `(i, j)` map to distinct elements.
pub(crate) fn gemm_acc<F: Real>(
    (m, k, n): (usize, usize, usize),
    a: &[F],
    la: Layout,
    b: &[F],
    lb: Layout,
    c: &mut [F],
    lc: Layout,
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    assert!(
        la.extent(m, k) <= a.len() && lb.extent(k, n) <= b.len() && lc.extent(m, n) <= c.len(),
        "gemm operand out of bounds"
    );
    // SAFETY: the extents above keep every accessed element in bounds, and
    // `c` is a unique borrow disjoint from `a` and `b`.
    unsafe { F::gemm_raw(m, k, n, a.as_ptr(), la, b.as_ptr(), lb, c.as_mut_ptr(), lc) }
}

pub(crate) fn stride(s: usize) -> isize {
    isize::try_from(s).expect("stride fits isize")
}
