//! Dense row-major `f64` tensors and the handful of kernels the tape needs.

use crate::error::{Error, Result};

/// A dense row-major tensor of `f64`.
///
/// Almost everything in this crate is a matrix (`rows x cols`); batches of
/// points are stored one point per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::Shape {
                context: "Tensor::new".into(),
                expected: shape,
                got: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1, 1],
            data: vec![value],
        }
    }

    /// Matrix from row-major data. Panics if `data.len() != rows * cols`.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Self {
            shape: vec![rows, cols],
            data,
        }
    }

    /// Stack equal-length rows into a matrix.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::Shape {
                    context: format!("Tensor::from_rows row {i}"),
                    expected: vec![cols],
                    got: vec![r.len()],
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self::matrix(rows.len(), cols, data))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of rows of a matrix (the leading dimension).
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Number of columns: product of all trailing dimensions.
    pub fn cols(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        let c = self.cols().max(1);
        self.data.chunks(c)
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Select rows by index into a new matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Tensor {
        let c = self.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Tensor::matrix(idx.len(), c, data)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn squared_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub(crate) fn same_shape(&self, other: &Tensor, context: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape {
                context: context.into(),
                expected: self.shape.clone(),
                got: other.shape.clone(),
            });
        }
        Ok(())
    }

    pub(crate) fn as_matrix(&self, context: &str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(Error::Shape {
                context: context.into(),
                expected: vec![0, 0],
                got: self.shape.clone(),
            });
        }
        Ok((self.shape[0], self.shape[1]))
    }
}

/// `c = a^T? * b^T?`, with the transposes expressed through strides.
pub(crate) fn gemm(a: &Tensor, trans_a: bool, b: &Tensor, trans_b: bool) -> Result<Tensor> {
    let (ar, ac) = a.as_matrix("gemm lhs")?;
    let (br, bc) = b.as_matrix("gemm rhs")?;
    let (m, k, rsa, csa) = if trans_a {
        (ac, ar, 1, ac)
    } else {
        (ar, ac, ac, 1)
    };
    let (k2, n, rsb, csb) = if trans_b {
        (bc, br, 1, bc)
    } else {
        (br, bc, bc, 1)
    };
    if k != k2 {
        return Err(Error::Shape {
            context: "gemm inner dimension".into(),
            expected: vec![m, k],
            got: vec![k2, n],
        });
    }
    let mut out = vec![0.0; m * n];
    if m > 0 && n > 0 && k > 0 {
        // SAFETY: slices are sized m*k, k*n and m*n with the strides above.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.data.as_ptr(),
                rsa as isize,
                csa as isize,
                b.data.as_ptr(),
                rsb as isize,
                csb as isize,
                0.0,
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
    Ok(Tensor::matrix(m, n, out))
}

/// Adds the `1 x n` row vector `bias` to every row of `a` in place.
pub(crate) fn add_row_inplace(a: &mut Tensor, bias: &Tensor) {
    let n = bias.len();
    for row in a.data.chunks_mut(n) {
        for (v, b) in row.iter_mut().zip(&bias.data) {
            *v += b;
        }
    }
}

pub(crate) fn relu_inplace(a: &mut Tensor) {
    for v in a.data.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

pub(crate) fn zip_with(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    }
}

pub(crate) fn axpy_inplace(y: &mut Tensor, alpha: f64, x: &Tensor) {
    for (a, b) in y.data.iter_mut().zip(&x.data) {
        *a += alpha * b;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_bad_length() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn gemm_transposes() {
        let a = Tensor::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.]);
        let b = Tensor::matrix(3, 2, vec![1., 0., 0., 1., 1., 1.]);
        let c = gemm(&a, false, &b, false).unwrap();
        assert_eq!(c.data(), &[4., 5., 10., 11.]);
        // a^T a is 3x3
        let ata = gemm(&a, true, &a, false).unwrap();
        assert_eq!(ata.shape(), &[3, 3]);
        assert_eq!(ata.data()[0], 17.0);
        let aat = gemm(&a, false, &a, true).unwrap();
        assert_eq!(aat.data(), &[14., 32., 32., 77.]);
        assert!(gemm(&a, false, &a, false).is_err());
    }

    #[test]
    fn select_rows_copies() {
        let a = Tensor::matrix(3, 1, vec![1., 2., 3.]);
        assert_eq!(a.select_rows(&[2, 0]).data(), &[3., 1.]);
    }
}
