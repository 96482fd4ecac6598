//! Strided matrix-product kernel shared by the dense and attention ops.

/// Read-only strided view of an `rows × cols` matrix inside a flat slice.
#[derive(Clone, Copy)]
pub struct View<'a> {
    pub data: &'a [f64],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a> View<'a> {
    /// Contiguous row-major matrix.
    pub fn dense(data: &'a [f64], rows: usize, cols: usize) -> Self {
        View {
            data,
            offset: 0,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    /// Column block `[col0, col0 + width)` of a row-major matrix with `stride` columns.
    pub fn cols_of(data: &'a [f64], rows: usize, stride: usize, col0: usize, width: usize) -> Self {
        View {
            data,
            offset: col0,
            rows,
            cols: width,
            rs: stride,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        View {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
            ..self
        }
    }

    fn last_index(&self) -> usize {
        self.offset + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs
    }
}

/// Mutable strided view, same layout rules as [`View`].
pub struct ViewMut<'a> {
    pub data: &'a mut [f64],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a> ViewMut<'a> {
    pub fn dense(data: &'a mut [f64], rows: usize, cols: usize) -> Self {
        ViewMut {
            data,
            offset: 0,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    pub fn cols_of(data: &'a mut [f64], rows: usize, stride: usize, col0: usize, width: usize) -> Self {
        ViewMut {
            data,
            offset: col0,
            rows,
            cols: width,
            rs: stride,
            cs: 1,
        }
    }
}

/// `c = alpha · a · b + beta · c`.
///
/// Panics on inconsistent extents or out-of-range views.
pub fn gemm(alpha: f64, a: View<'_>, b: View<'_>, beta: f64, c: ViewMut<'_>) {
    assert_eq!(a.cols, b.rows, "gemm inner extent");
    assert_eq!(a.rows, c.rows, "gemm output rows");
    assert_eq!(b.cols, c.cols, "gemm output cols");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let idx = c.offset + i * c.rs + j * c.cs;
                c.data[idx] *= beta;
            }
        }
        return;
    }
    assert!(a.last_index() < a.data.len(), "gemm: lhs view out of range");
    assert!(b.last_index() < b.data.len(), "gemm: rhs view out of range");
    let c_last = c.offset + (c.rows - 1) * c.rs + (c.cols - 1) * c.cs;
    assert!(c_last < c.data.len(), "gemm: output view out of range");
    // SAFETY: every view was bounds-checked above and `c` is a unique borrow.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr().add(a.offset),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.offset),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr().add(c.offset),
            c.rs as isize,
            c.cs as isize,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
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
    fn matches_naive_product_and_transposes() {
        let (m, k, n) = (5, 7, 3);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let want = naive(&a, &b, m, k, n);
        let mut c = vec![0.0; m * n];
        gemm(1.0, View::dense(&a, m, k), View::dense(&b, k, n), 0.0, ViewMut::dense(&mut c, m, n));
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
        // (bᵀ aᵀ)ᵀ == a b
        let mut ct = vec![0.0; n * m];
        gemm(
            1.0,
            View::dense(&b, k, n).t(),
            View::dense(&a, m, k).t(),
            0.0,
            ViewMut::dense(&mut ct, n, m),
        );
        for i in 0..m {
            for j in 0..n {
                assert!((ct[j * m + i] - want[i * n + j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn column_blocks() {
        // [2 x 4] times a [4 x 2] column block of a [4 x 6] matrix.
        let a: Vec<f64> = (0..8).map(f64::from).collect();
        let b: Vec<f64> = (0..24).map(f64::from).collect();
        let mut c = vec![0.0; 4];
        gemm(
            1.0,
            View::dense(&a, 2, 4),
            View::cols_of(&b, 4, 6, 2, 2),
            0.0,
            ViewMut::dense(&mut c, 2, 2),
        );
        let bsub: Vec<f64> = (0..4).flat_map(|r| [b[r * 6 + 2], b[r * 6 + 3]]).collect();
        assert_eq!(c, naive(&a, &bsub, 2, 4, 2));
    }
}
