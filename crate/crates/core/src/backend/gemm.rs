use super::Float;

/// Strided view of a matrix stored inside a slice.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Strided {
    pub offset: usize,
    pub rs: usize,
    pub cs: usize,
}

impl Strided {
    pub fn row_major(cols: usize) -> Self {
        Strided {
            offset: 0,
            rs: cols,
            cs: 1,
        }
    }

    /// The transpose of a row-major matrix with `rows` rows.
    pub fn transposed(rows: usize) -> Self {
        Strided {
            offset: 0,
            rs: 1,
            cs: rows,
        }
    }

    pub fn at(self, offset: usize) -> Self {
        Strided { offset, ..self }
    }

    fn last_index(self, rows: usize, cols: usize) -> usize {
        if rows == 0 || cols == 0 {
            return self.offset;
        }
        self.offset + (rows - 1) * self.rs + (cols - 1) * self.cs
    }
}

/// `c = alpha * a * b + beta * c` where `a` is `m x k`, `b` is `k x n`, `c` is `m x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_strided<T: Float>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    av: Strided,
    b: &[T],
    bv: Strided,
    beta: T,
    c: &mut [T],
    cv: Strided,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k > 0 {
        assert!(av.last_index(m, k) < a.len(), "gemm: lhs view out of bounds");
        assert!(bv.last_index(k, n) < b.len(), "gemm: rhs view out of bounds");
    }
    assert!(cv.last_index(m, n) < c.len(), "gemm: output view out of bounds");
    // SAFETY: the asserts above bound every element the kernel touches.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr().add(av.offset),
            av.rs as isize,
            av.cs as isize,
            b.as_ptr().add(bv.offset),
            bv.rs as isize,
            bv.cs as isize,
            beta,
            c.as_mut_ptr().add(cv.offset),
            cv.rs as isize,
            cv.cs as isize,
        );
    }
}

/// Row-major matrix product `c = alpha * op(a) * op(b) + beta * c`.
///
/// `a` holds an `m x k` matrix, or `k x m` when `trans_a` is set; likewise
/// `b` holds `k x n`, or `n x k` when `trans_b` is set.
#[allow(clippy::too_many_arguments)]
pub fn matmul<T: Float>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    c: &mut [T],
    alpha: T,
    beta: T,
) {
    assert_eq!(a.len(), m * k, "matmul: lhs length");
    assert_eq!(b.len(), k * n, "matmul: rhs length");
    assert_eq!(c.len(), m * n, "matmul: output length");
    let av = if trans_a {
        Strided::transposed(m)
    } else {
        Strided::row_major(k)
    };
    let bv = if trans_b {
        Strided::transposed(k)
    } else {
        Strided::row_major(n)
    };
    gemm_strided(m, k, n, alpha, a, av, b, bv, beta, c, Strided::row_major(n));
}
