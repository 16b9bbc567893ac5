//! Thin safe wrappers over `matrixmultiply::dgemm` for the layouts the graph
//! needs. All matrices are row-major with explicit strides.

/// Strided view of a row-major matrix region.
#[derive(Clone, Copy, Debug)]
pub(crate) struct View {
    pub rows: usize,
    pub cols: usize,
    pub rs: isize,
    pub cs: isize,
    pub offset: usize,
}

impl View {
    pub fn dense(rows: usize, cols: usize) -> Self {
        View {
            rows,
            cols,
            rs: cols as isize,
            cs: 1,
            offset: 0,
        }
    }

    /// Column block `[col0, col0 + width)` of a dense `rows × stride` matrix.
    pub fn cols_of(rows: usize, stride: usize, col0: usize, width: usize) -> Self {
        View {
            rows,
            cols: width,
            rs: stride as isize,
            cs: 1,
            offset: col0,
        }
    }

    pub fn t(self) -> Self {
        View {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
            offset: self.offset,
        }
    }

    fn span(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            return 0;
        }
        self.offset
            + (self.rows - 1) * self.rs as usize
            + (self.cols - 1) * self.cs as usize
            + 1
    }
}

/// `c = alpha · a·b + beta · c` over strided views.
pub(crate) fn gemm(
    alpha: f64,
    a: &[f64],
    av: View,
    b: &[f64],
    bv: View,
    beta: f64,
    c: &mut [f64],
    cv: View,
) {
    assert_eq!(av.cols, bv.rows, "gemm inner dimension");
    assert_eq!(av.rows, cv.rows, "gemm output rows");
    assert_eq!(bv.cols, cv.cols, "gemm output cols");
    assert!(a.len() >= av.span() && b.len() >= bv.span() && c.len() >= cv.span());
    if cv.rows == 0 || cv.cols == 0 {
        return;
    }
    if av.cols == 0 {
        // matrixmultiply handles k = 0 but we keep beta semantics explicit.
        for i in 0..cv.rows {
            for j in 0..cv.cols {
                let idx = cv.offset + i * cv.rs as usize + j * cv.cs as usize;
                c[idx] *= beta;
            }
        }
        return;
    }
    // SAFETY: the asserts above guarantee every strided access stays inside
    // the borrowed slices, and `c` is uniquely borrowed.
    unsafe {
        matrixmultiply::dgemm(
            av.rows,
            av.cols,
            bv.cols,
            alpha,
            a.as_ptr().add(av.offset),
            av.rs,
            av.cs,
            b.as_ptr().add(bv.offset),
            bv.rs,
            bv.cs,
            beta,
            c.as_mut_ptr().add(cv.offset),
            cv.rs,
            cv.cs,
        );
    }
}

/// Dense `a[m×k] · b[k×n]`.
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm(
        1.0,
        a,
        View::dense(m, k),
        b,
        View::dense(k, n),
        0.0,
        &mut c,
        View::dense(m, n),
    );
    c
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
    fn matches_naive_loop() {
        let (m, k, n) = (5, 7, 3);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let got = matmul(&a, &b, m, k, n);
        let want = naive(&a, &b, m, k, n);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn transposed_column_block() {
        // a[2×4] · (block of b[3×4] cols 1..3)ᵀ
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
        let b: Vec<f64> = (0..12).map(|v| v as f64).collect();
        let mut c = vec![0.0; 2 * 3];
        gemm(
            1.0,
            &a,
            View::cols_of(2, 4, 1, 2),
            &b,
            View::cols_of(3, 4, 1, 2).t(),
            0.0,
            &mut c,
            View::dense(2, 3),
        );
        // row0 of a block = [2,3]; rows of b block = [1,2],[5,6],[9,10]
        assert_eq!(c, vec![8.0, 28.0, 48.0, 20.0, 72.0, 124.0]);
    }
}
