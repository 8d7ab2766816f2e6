use crate::par;

/// Rows of the output computed by one `dgemm` call. Fixed so that results do
/// not depend on the thread count.
const ROW_BLOCK: usize = 64;

/// Strided read-only view of a matrix.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub rs: usize,
    pub cs: usize,
}

impl<'a> MatRef<'a> {
    pub fn row_major(data: &'a [f64], cols: usize) -> Self {
        Self {
            data,
            rs: cols,
            cs: 1,
        }
    }

    /// Transposed view of a row-major `rows x cols` matrix.
    pub fn transposed(data: &'a [f64], cols: usize) -> Self {
        Self {
            data,
            rs: 1,
            cs: cols,
        }
    }

    fn covers(&self, rows: usize, cols: usize) -> bool {
        rows == 0 || cols == 0 || (rows - 1) * self.rs + (cols - 1) * self.cs < self.data.len()
    }
}

/// `c = a * b + beta * c` where `a` is `m x k`, `b` is `k x n` and `c` is a
/// contiguous row-major `m x n` buffer.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: MatRef, b: MatRef, beta: f64, c: &mut [f64]) {
    assert!(a.covers(m, k) && b.covers(k, n), "gemm operand out of bounds");
    assert_eq!(c.len(), m * n, "gemm output size");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    if m <= ROW_BLOCK {
        gemm_block(0, m, k, n, a, b, beta, c);
        return;
    }
    par::for_each_chunk_mut(c, ROW_BLOCK * n, |i, block| {
        gemm_block(i * ROW_BLOCK, block.len() / n, k, n, a, b, beta, block);
    });
}

#[allow(clippy::too_many_arguments)]
fn gemm_block(
    row0: usize,
    rows: usize,
    k: usize,
    n: usize,
    a: MatRef,
    b: MatRef,
    beta: f64,
    c: &mut [f64],
) {
    // SAFETY: `covers` checked that every (row, col) the kernel reads lies
    // inside the backing slices, and `c` is exactly `rows x n`.
    unsafe {
        matrixmultiply::dgemm(
            rows,
            k,
            n,
            1.0,
            a.data.as_ptr().add(row0 * a.rs),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn matches_naive_product_across_blocks() {
        let (m, k, n) = (150, 7, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i % 13) as f64 - 6.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i % 7) as f64 * 0.5).collect();
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, MatRef::row_major(&a, k), MatRef::row_major(&b, n), 0.0, &mut c);
        assert_eq!(c, naive(m, k, n, &a, &b));
    }

    #[test]
    fn transposed_views() {
        // a is stored 3x2, used as its 2x3 transpose
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let mut c = vec![0.0; 4];
        gemm(2, 3, 2, MatRef::transposed(&a, 2), MatRef::row_major(&b, 2), 0.0, &mut c);
        // a^T = [[1,3,5],[2,4,6]]
        assert_eq!(c, vec![6.0, 8.0, 8.0, 10.0]);
    }
}
