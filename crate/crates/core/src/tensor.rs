//! Dense row-major `f64` matrices and the handful of kernels the model needs.

use alloc::vec;
use alloc::vec::Vec;

/// Row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Mat {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Mat {
        assert_eq!(rows * cols, data.len(), "matrix data length mismatch");
        Mat { rows, cols, data }
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Mat {
        Mat { rows, cols, data: vec![v; rows * cols] }
    }

    pub fn scalar(v: f64) -> Mat {
        Mat { rows: 1, cols: 1, data: vec![v] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn same_shape(&self, other: &Mat) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn add_assign(&mut self, other: &Mat) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    /// Rows `idx` in order.
    pub fn gather_rows(&self, idx: &[usize]) -> Mat {
        let mut out = Mat::zeros(idx.len(), self.cols);
        for (o, &i) in idx.iter().enumerate() {
            out.row_mut(o).copy_from_slice(self.row(i));
        }
        out
    }

    pub fn transpose(&self) -> Mat {
        let mut out = Mat::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }
}

/// A strided read-only view used to address column blocks (attention heads)
/// without copying.
#[derive(Clone, Copy)]
pub struct View<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a> View<'a> {
    pub fn of(m: &'a Mat) -> View<'a> {
        View { data: &m.data, rows: m.rows, cols: m.cols, row_stride: m.cols, col_stride: 1 }
    }

    /// Columns `[c0, c0 + n)` of `m`.
    pub fn cols(m: &'a Mat, c0: usize, n: usize) -> View<'a> {
        View { data: &m.data[c0..], rows: m.rows, cols: n, row_stride: m.cols, col_stride: 1 }
    }

    pub fn t(self) -> View<'a> {
        View {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }
}

/// Mutable counterpart of [`View`].
pub struct ViewMut<'a> {
    pub data: &'a mut [f64],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
}

impl<'a> ViewMut<'a> {
    pub fn of(m: &'a mut Mat) -> ViewMut<'a> {
        let (rows, cols) = (m.rows, m.cols);
        ViewMut { data: &mut m.data, rows, cols, row_stride: cols }
    }

    pub fn cols(m: &'a mut Mat, c0: usize, n: usize) -> ViewMut<'a> {
        let (rows, stride) = (m.rows, m.cols);
        ViewMut { data: &mut m.data[c0..], rows, cols: n, row_stride: stride }
    }
}

/// `c = alpha * a * b + beta * c`.
pub fn gemm(alpha: f64, a: View<'_>, b: View<'_>, beta: f64, c: ViewMut<'_>) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension mismatch");
    assert_eq!(a.rows, c.rows, "gemm row mismatch");
    assert_eq!(b.cols, c.cols, "gemm column mismatch");
    if a.rows == 0 || b.cols == 0 {
        return;
    }
    if a.cols == 0 {
        for r in 0..c.rows {
            for x in 0..c.cols {
                c.data[r * c.row_stride + x] *= beta;
            }
        }
        return;
    }
    let span = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs + 1;
    assert!(a.data.len() >= span(a.rows, a.cols, a.row_stride, a.col_stride));
    assert!(b.data.len() >= span(b.rows, b.cols, b.row_stride, b.col_stride));
    assert!(c.data.len() >= span(c.rows, c.cols, c.row_stride, 1));
    // SAFETY: the asserts above bound every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            a.data.as_ptr(),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr(),
            b.row_stride as isize,
            b.col_stride as isize,
            beta,
            c.data.as_mut_ptr(),
            c.row_stride as isize,
            1,
        );
    }
}

/// `a * b` for whole matrices.
pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let mut c = Mat::zeros(a.rows, b.cols);
    gemm(1.0, View::of(a), View::of(b), 0.0, ViewMut::of(&mut c));
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &Mat, b: &Mat) -> Mat {
        let mut c = Mat::zeros(a.rows, b.cols);
        for i in 0..a.rows {
            for j in 0..b.cols {
                c.data[i * b.cols + j] = (0..a.cols).map(|k| a.at(i, k) * b.at(k, j)).sum();
            }
        }
        c
    }

    #[test]
    fn gemm_matches_naive_with_transposes_and_column_views() {
        let a = Mat::from_vec(3, 4, (0..12).map(|x| x as f64 * 0.5 - 2.0).collect());
        let b = Mat::from_vec(4, 2, (0..8).map(|x| (x as f64).sin()).collect());
        let close = |x: &Mat, y: &Mat| x.same_shape(y) && x.data.iter().zip(&y.data).all(|(p, q)| (p - q).abs() < 1e-12);
        assert!(close(&matmul(&a, &b), &naive(&a, &b)));

        let at = a.transpose();
        let mut c = Mat::zeros(3, 2);
        gemm(1.0, View::of(&at).t(), View::of(&b), 0.0, ViewMut::of(&mut c));
        let n = naive(&a, &b);
        for (x, y) in c.data.iter().zip(&n.data) {
            assert!((x - y).abs() < 1e-12);
        }

        // columns 1..3 of a times rows 1..3 of b
        let sub_a = Mat::from_vec(3, 2, (0..3).flat_map(|r| [a.at(r, 1), a.at(r, 2)]).collect());
        let sub_b = b.gather_rows(&[1, 2]);
        let mut c2 = Mat::zeros(3, 2);
        let bv = View { data: &b.data[2..], rows: 2, cols: 2, row_stride: 2, col_stride: 1 };
        gemm(1.0, View::cols(&a, 1, 2), bv, 0.0, ViewMut::of(&mut c2));
        assert!(close(&c2, &naive(&sub_a, &sub_b)));
    }
}
