//! Dense row-major `f64` matrices and the numeric kernels shared by the
//! eager and recording execution engines.
//!
//! Keeping a single kernel per operation means the two engines produce
//! bit-identical forward values.

use std::fmt;

/// Dense row-major matrix of `f64`.
#[derive(Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Mat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Mat({}x{})", self.rows, self.cols)?;
        if self.rows * self.cols <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "data length must match dimensions");
        Mat { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Mat { rows, cols, data }
    }

    /// 1x1 matrix holding a single scalar.
    pub fn scalar(v: f64) -> Self {
        Mat { rows: 1, cols: 1, data: vec![v] }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Scalar value of a 1x1 matrix.
    pub fn item(&self) -> f64 {
        assert_eq!((self.rows, self.cols), (1, 1), "item() requires a 1x1 matrix");
        self.data[0]
    }

    pub fn transpose(&self) -> Mat {
        Mat::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.data.iter()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Numeric kernels. All engines funnel through these so that execution
/// mode never changes the computed bits.
pub mod kernels {
    use super::Mat;

    pub fn matmul(a: &Mat, b: &Mat) -> Mat {
        assert_eq!(a.cols, b.rows, "matmul inner dimensions: {}x{} * {}x{}", a.rows, a.cols, b.rows, b.cols);
        let (n, k, m) = (a.rows, a.cols, b.cols);
        let mut out = Mat::zeros(n, m);
        // ikj order keeps the inner loop contiguous over b and out rows.
        for i in 0..n {
            for p in 0..k {
                let av = a.data[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &b.data[p * m..(p + 1) * m];
                let orow = &mut out.data[i * m..(i + 1) * m];
                for j in 0..m {
                    orow[j] += av * brow[j];
                }
            }
        }
        out
    }

    /// `a * b^T` without materializing the transpose.
    pub fn matmul_nt(a: &Mat, b: &Mat) -> Mat {
        assert_eq!(a.cols, b.cols, "matmul_nt requires matching column counts");
        let (n, k, m) = (a.rows, a.cols, b.rows);
        let mut out = Mat::zeros(n, m);
        for i in 0..n {
            let arow = &a.data[i * k..(i + 1) * k];
            for j in 0..m {
                let brow = &b.data[j * k..(j + 1) * k];
                let mut acc = 0.0;
                for p in 0..k {
                    acc += arow[p] * brow[p];
                }
                out.data[i * m + j] = acc;
            }
        }
        out
    }

    pub fn add(a: &Mat, b: &Mat) -> Mat {
        assert_eq!(a.shape(), b.shape(), "add shape mismatch");
        let data = a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect();
        Mat { rows: a.rows, cols: a.cols, data }
    }

    pub fn sub(a: &Mat, b: &Mat) -> Mat {
        assert_eq!(a.shape(), b.shape(), "sub shape mismatch");
        let data = a.data.iter().zip(&b.data).map(|(x, y)| x - y).collect();
        Mat { rows: a.rows, cols: a.cols, data }
    }

    pub fn mul_elem(a: &Mat, b: &Mat) -> Mat {
        assert_eq!(a.shape(), b.shape(), "mul_elem shape mismatch");
        let data = a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect();
        Mat { rows: a.rows, cols: a.cols, data }
    }

    /// Matrix plus a 1xC row vector broadcast over every row.
    pub fn add_row_vec(m: &Mat, row: &Mat) -> Mat {
        assert_eq!(row.rows, 1, "row vector must be 1xC");
        assert_eq!(m.cols, row.cols, "broadcast width mismatch");
        let mut out = m.clone();
        for i in 0..m.rows {
            let orow = &mut out.data[i * m.cols..(i + 1) * m.cols];
            for j in 0..m.cols {
                orow[j] += row.data[j];
            }
        }
        out
    }

    /// Matrix plus an Rx1 column vector broadcast over every column.
    pub fn add_col_vec(m: &Mat, col: &Mat) -> Mat {
        assert_eq!(col.cols, 1, "column vector must be Rx1");
        assert_eq!(m.rows, col.rows, "broadcast height mismatch");
        let mut out = m.clone();
        for i in 0..m.rows {
            let c = col.data[i];
            let orow = &mut out.data[i * m.cols..(i + 1) * m.cols];
            for v in orow {
                *v += c;
            }
        }
        out
    }

    pub fn relu(x: &Mat) -> Mat {
        let data = x.data.iter().map(|v| v.max(0.0)).collect();
        Mat { rows: x.rows, cols: x.cols, data }
    }

    pub fn exp(x: &Mat) -> Mat {
        let data = x.data.iter().map(|v| v.exp()).collect();
        Mat { rows: x.rows, cols: x.cols, data }
    }

    pub fn neg(x: &Mat) -> Mat {
        let data = x.data.iter().map(|v| -v).collect();
        Mat { rows: x.rows, cols: x.cols, data }
    }

    pub fn scale_const(x: &Mat, c: f64) -> Mat {
        let data = x.data.iter().map(|v| v * c).collect();
        Mat { rows: x.rows, cols: x.cols, data }
    }

    pub fn add_const(x: &Mat, c: f64) -> Mat {
        let data = x.data.iter().map(|v| v + c).collect();
        Mat { rows: x.rows, cols: x.cols, data }
    }

    pub fn div_const(x: &Mat, c: f64) -> Mat {
        let data = x.data.iter().map(|v| v / c).collect();
        Mat { rows: x.rows, cols: x.cols, data }
    }

    /// Elementwise multiplication by a 1x1 scalar node value.
    pub fn scale(x: &Mat, s: f64) -> Mat {
        scale_const(x, s)
    }

    pub fn clamp_const(x: &Mat, lo: f64, hi: f64) -> Mat {
        let data = x.data.iter().map(|v| v.clamp(lo, hi)).collect();
        Mat { rows: x.rows, cols: x.cols, data }
    }

    pub fn concat_cols(a: &Mat, b: &Mat) -> Mat {
        assert_eq!(a.rows, b.rows, "concat_cols row mismatch");
        let cols = a.cols + b.cols;
        let mut data = Vec::with_capacity(a.rows * cols);
        for i in 0..a.rows {
            data.extend_from_slice(a.row(i));
            data.extend_from_slice(b.row(i));
        }
        Mat { rows: a.rows, cols, data }
    }

    /// Row-wise softmax with max-shift stabilization.
    pub fn softmax_rows(x: &Mat) -> Mat {
        let mut out = Mat::zeros(x.rows, x.cols);
        for i in 0..x.rows {
            let row = x.row(i);
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let orow = &mut out.data[i * x.cols..(i + 1) * x.cols];
            let mut sum = 0.0;
            for (o, &v) in orow.iter_mut().zip(row) {
                *o = (v - m).exp();
                sum += *o;
            }
            for o in orow {
                *o /= sum;
            }
        }
        out
    }

    /// Row-wise log-sum-exp, returning an Rx1 column vector.
    pub fn logsumexp_rows(x: &Mat) -> Mat {
        let mut out = Mat::zeros(x.rows, 1);
        for i in 0..x.rows {
            let row = x.row(i);
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let sum: f64 = row.iter().map(|&v| (v - m).exp()).sum();
            out.data[i] = m + sum.ln();
        }
        out
    }

    /// Column-wise log-sum-exp, returning a 1xC row vector.
    pub fn logsumexp_cols(x: &Mat) -> Mat {
        let mut maxs = vec![f64::NEG_INFINITY; x.cols];
        for i in 0..x.rows {
            for (j, &v) in x.row(i).iter().enumerate() {
                if v > maxs[j] {
                    maxs[j] = v;
                }
            }
        }
        let mut sums = vec![0.0; x.cols];
        for i in 0..x.rows {
            for (j, &v) in x.row(i).iter().enumerate() {
                sums[j] += (v - maxs[j]).exp();
            }
        }
        let data = maxs.iter().zip(&sums).map(|(m, s)| m + s.ln()).collect();
        Mat { rows: 1, cols: x.cols, data }
    }

    /// Append a dustbin row and column filled with the scalar `alpha`.
    pub fn pad_dustbin(s: &Mat, alpha: f64) -> Mat {
        let mut out = Mat::zeros(s.rows + 1, s.cols + 1);
        for i in 0..s.rows {
            let srow = s.row(i);
            let orow = &mut out.data[i * (s.cols + 1)..i * (s.cols + 1) + s.cols];
            orow.copy_from_slice(srow);
            out.data[i * (s.cols + 1) + s.cols] = alpha;
        }
        for j in 0..=s.cols {
            out.data[s.rows * (s.cols + 1) + j] = alpha;
        }
        out
    }

    /// Gather entries at `(i, j)` index pairs into a Kx1 column vector.
    pub fn gather(x: &Mat, idx: &[(usize, usize)]) -> Mat {
        let data = idx.iter().map(|&(i, j)| x.get(i, j)).collect();
        Mat { rows: idx.len(), cols: 1, data }
    }

    pub fn sum_all(x: &Mat) -> Mat {
        Mat::scalar(x.data.iter().sum())
    }
}
