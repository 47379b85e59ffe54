//! Thin safe wrapper over `matrixmultiply::dgemm` for strided matrices.

/// A read-only strided view of an `rows × cols` matrix inside a slice.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a> MatRef<'a> {
    /// Row-major contiguous matrix.
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        MatRef {
            data,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        MatRef {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn span(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            0
        } else {
            (self.rows - 1) * self.rs + (self.cols - 1) * self.cs + 1
        }
    }
}

/// `c = alpha · a · b + beta · c` with `c` row-major contiguous `m × n`.
pub(crate) fn gemm(alpha: f64, a: MatRef<'_>, b: MatRef<'_>, beta: f64, c: &mut [f64]) {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert_eq!(b.rows, k, "gemm inner dimension mismatch");
    assert!(
        a.span() <= a.data.len() && b.span() <= b.data.len(),
        "gemm operand out of bounds"
    );
    assert!(c.len() >= m * n, "gemm output out of bounds");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for x in &mut c[..m * n] {
            *x *= beta;
        }
        return;
    }
    // SAFETY: the asserts above guarantee every index dgemm touches lies
    // inside the operand slices, and `c` is uniquely borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
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

    #[test]
    fn matches_triple_loop() {
        let a: Vec<f64> = (0..6).map(|x| x as f64 * 0.5 - 1.0).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|x| (x as f64).sin()).collect(); // 3x4
        let mut c = vec![1.0; 8];
        gemm(
            2.0,
            MatRef::new(&a, 2, 3),
            MatRef::new(&b, 3, 4),
            0.5,
            &mut c,
        );
        for i in 0..2 {
            for j in 0..4 {
                let mut s = 0.0;
                for k in 0..3 {
                    s += a[i * 3 + k] * b[k * 4 + j];
                }
                assert!((c[i * 4 + j] - (2.0 * s + 0.5)).abs() < 1e-12);
            }
        }
        // transposed operand
        let mut ct = vec![0.0; 4];
        gemm(
            1.0,
            MatRef::new(&a, 2, 3),
            MatRef::new(&a, 2, 3).t(),
            0.0,
            &mut ct,
        );
        let dot = |i: usize, j: usize| (0..3).map(|k| a[i * 3 + k] * a[j * 3 + k]).sum::<f64>();
        assert!((ct[1] - dot(0, 1)).abs() < 1e-12);
        assert!((ct[3] - dot(1, 1)).abs() < 1e-12);
    }
}
