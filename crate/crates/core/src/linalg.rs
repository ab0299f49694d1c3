//! Dense row-major matrices and the elementwise kernels the networks need.
//!
//! Every product accumulates over the shared dimension left to right, starting
//! from zero, so results are bit-reproducible and a product computed on a
//! vertically stacked operand yields exactly the same entries as the separate
//! products.

use std::fmt;
use std::ops::{Index, IndexMut};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, PartialEq)]
pub struct Matrix<T: Scalar> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

/// Elementwise operations accepted by [`Matrix::map_elementwise`].
#[derive(Clone, Copy, Debug)]
pub enum Elementwise<'a, T: Scalar> {
    Sigmoid,
    Mul(&'a Matrix<T>),
    Add(&'a Matrix<T>),
    Sub(&'a Matrix<T>),
    Scale(T),
    Log,
    Exp,
}

/// Logistic function, evaluated on the branch that cannot overflow and kept
/// strictly inside (0, 1).
#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x.is_nan() {
        return x;
    }
    let s = if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    };
    let hi = T::one() - T::epsilon() / T::lit(2.0);
    s.max(T::min_positive_value()).min(hi)
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, T::zero())
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape {
                op: "from_vec",
                left: (rows, cols),
                right: (data.len(), 1),
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds a matrix from row slices of equal length.
    pub fn from_rows<R: AsRef<[T]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Shape {
                    op: "from_rows",
                    left: (rows.len(), cols),
                    right: (1, r.len()),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[T]> {
        self.data.chunks(self.cols.max(1)).take(self.rows)
    }

    /// Copies the listed rows, in order, into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    fn same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape {
                op,
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(())
    }

    /// Standard product `self · other`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::Shape {
                op: "matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.cols {
                let mut acc = T::zero();
                for (k, &aik) in a.iter().enumerate() {
                    acc += aik * other.data[k * other.cols + j];
                }
                out.data[i * other.cols + j] = acc;
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ`, the product used for row-major minibatches against
    /// weight matrices stored output-major.
    pub fn matmul_nt(&self, other: &Self) -> Result<Self> {
        if self.cols != other.cols {
            return Err(Error::Shape {
                op: "matmul_nt",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut out = Self::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                let b = other.row(j);
                let mut acc = T::zero();
                for (&x, &y) in a.iter().zip(b) {
                    acc += x * y;
                }
                out.data[i * other.rows + j] = acc;
            }
        }
        Ok(out)
    }

    /// `selfᵀ · other`; used for weight gradients (sum over the batch rows).
    pub fn matmul_tn(&self, other: &Self) -> Result<Self> {
        if self.rows != other.rows {
            return Err(Error::Shape {
                op: "matmul_tn",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut out = Self::zeros(self.cols, other.cols);
        for i in 0..self.cols {
            for j in 0..other.cols {
                let mut acc = T::zero();
                for k in 0..self.rows {
                    acc += self.data[k * self.cols + i] * other.data[k * other.cols + j];
                }
                out.data[i * other.cols + j] = acc;
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self[(c, r)])
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.same_shape(other, "zip_map")?;
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn map_elementwise(&self, op: Elementwise<'_, T>) -> Result<Self> {
        match op {
            Elementwise::Sigmoid => Ok(self.map(sigmoid)),
            Elementwise::Mul(o) => self.zip_map(o, |a, b| a * b),
            Elementwise::Add(o) => self.zip_map(o, |a, b| a + b),
            Elementwise::Sub(o) => self.zip_map(o, |a, b| a - b),
            Elementwise::Scale(s) => Ok(self.map(|a| a * s)),
            Elementwise::Exp => Ok(self.map(T::exp)),
            Elementwise::Log => {
                if let Some(bad) = self.data.iter().find(|&&x| !(x > T::zero())) {
                    return Err(Error::Domain(format!("log of non-positive entry {bad}")));
                }
                Ok(self.map(T::ln))
            }
        }
    }

    pub fn sigmoid(&self) -> Self {
        self.map(sigmoid)
    }

    pub fn hadamard(&self, other: &Self) -> Result<Self> {
        self.map_elementwise(Elementwise::Mul(other))
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.map_elementwise(Elementwise::Add(other))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.map_elementwise(Elementwise::Sub(other))
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|a| a * s)
    }

    pub fn ln(&self) -> Result<Self> {
        self.map_elementwise(Elementwise::Log)
    }

    pub fn exp(&self) -> Self {
        self.map(T::exp)
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.same_shape(other, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// In-place `self += s · other`.
    pub fn axpy(&mut self, s: T, other: &Self) -> Result<()> {
        self.same_shape(other, "axpy")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    /// Adds `bias` to every row.
    pub fn add_row_vector(&self, bias: &[T]) -> Result<Self> {
        if bias.len() != self.cols {
            return Err(Error::Shape {
                op: "add_row_vector",
                left: self.shape(),
                right: (1, bias.len()),
            });
        }
        let mut out = self.clone();
        for r in 0..out.rows {
            for (x, &b) in out.row_mut(r).iter_mut().zip(bias) {
                *x += b;
            }
        }
        Ok(out)
    }

    /// Sum over rows, accumulated top to bottom.
    pub fn column_sums(&self) -> Vec<T> {
        let mut sums = vec![T::zero(); self.cols];
        for r in self.row_iter() {
            for (s, &x) in sums.iter_mut().zip(r) {
                *s += x;
            }
        }
        sums
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn vstack(parts: &[&Self]) -> Result<Self> {
        let cols = parts.first().map_or(0, |m| m.cols);
        let mut data = Vec::new();
        let mut rows = 0;
        for m in parts {
            if m.cols != cols {
                return Err(Error::Shape {
                    op: "vstack",
                    left: (rows, cols),
                    right: m.shape(),
                });
            }
            data.extend_from_slice(&m.data);
            rows += m.rows;
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Splits columns into consecutive blocks of the given widths.
    pub fn split_cols(&self, widths: &[usize]) -> Result<Vec<Self>> {
        if widths.iter().sum::<usize>() != self.cols {
            return Err(Error::Shape {
                op: "split_cols",
                left: self.shape(),
                right: (0, widths.iter().sum()),
            });
        }
        let mut out = Vec::with_capacity(widths.len());
        let mut start = 0;
        for &w in widths {
            out.push(Self::from_fn(self.rows, w, |r, c| self[(r, start + c)]));
            start += w;
        }
        Ok(out)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |m, &x| if x.abs() > m { x.abs() } else { m })
    }

    /// Index of the largest entry in each row; ties go to the lowest index.
    pub fn argmax_rows(&self) -> Vec<usize> {
        self.row_iter()
            .map(|r| {
                let mut best = 0;
                for (j, &x) in r.iter().enumerate() {
                    if x > r[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }

    /// Converts element type.
    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| U::lit(x.as_f64())).collect(),
        }
    }
}

impl<T: Scalar> Index<(usize, usize)> for Matrix<T> {
    type Output = T;

    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &T {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl<T: Scalar> IndexMut<(usize, usize)> for Matrix<T> {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut T {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

impl<T: Scalar> fmt::Debug for Matrix<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in self.row_iter() {
            writeln!(f, "  {r:?}")?;
        }
        write!(f, "]")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m(rows: &[&[f64]]) -> Matrix<f64> {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn identity_is_left_neutral() {
        let a = m(&[&[1.0, -2.0], &[0.5, 3.0], &[7.0, 0.25]]);
        assert_eq!(Matrix::identity(3).matmul(&a).unwrap(), a);
    }

    #[test]
    fn zero_matrix_annihilates() {
        let a = m(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]);
        let z = Matrix::zeros(2, 2);
        assert_eq!(z.matmul(&a).unwrap(), Matrix::zeros(2, 3));
    }

    #[test]
    fn hand_worked_product() {
        let a = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = m(&[&[5.0], &[6.0]]);
        assert_eq!(a.matmul(&b).unwrap(), m(&[&[17.0], &[39.0]]));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Matrix::<f64>::zeros(2, 3);
        let b = Matrix::<f64>::zeros(2, 3);
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("(2, 3)"), "{err}");
        assert!(matches!(a.matmul(&b), Err(Error::Shape { .. })));
    }

    #[test]
    fn transposed_products_agree_with_explicit_transpose() {
        let a = m(&[&[1.0, 2.0, -1.0], &[0.0, 3.0, 4.0]]);
        let b = m(&[&[2.0, 1.0, 0.5], &[-1.0, 0.0, 2.0]]);
        assert_eq!(a.matmul_nt(&b).unwrap(), a.matmul(&b.transpose()).unwrap());
        assert_eq!(a.matmul_tn(&b).unwrap(), a.transpose().matmul(&b).unwrap());
    }

    #[test]
    fn sigmoid_reference_values() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert!((sigmoid(2.0f64) - 0.880_797_077_977_882_3).abs() < 1e-15);
        for x in [-30.0, -3.0, -0.1, 0.7, 12.0] {
            assert!((sigmoid(x) + sigmoid(-x) - 1.0f64).abs() < 1e-15);
        }
    }

    #[test]
    fn sigmoid_stays_open_interval_at_extremes() {
        for x in [-1e4f64, -745.0, 40.0, 1e4] {
            let s = sigmoid(x);
            assert!(s > 0.0 && s < 1.0, "sigmoid({x}) = {s}");
        }
        let s32 = sigmoid(100.0f32);
        assert!(s32 < 1.0);
    }

    #[test]
    fn log_rejects_non_positive() {
        let a = m(&[&[1.0, 0.0]]);
        assert!(matches!(a.ln(), Err(Error::Domain(_))));
        let b = m(&[&[1.0, -2.0]]);
        assert!(b.map_elementwise(Elementwise::Log).is_err());
        assert_eq!(m(&[&[1.0]]).ln().unwrap(), m(&[&[0.0]]));
    }

    #[test]
    fn binary_ops_require_equal_shapes() {
        let a = Matrix::<f64>::zeros(2, 2);
        let b = Matrix::<f64>::zeros(2, 3);
        assert!(a.hadamard(&b).is_err());
        assert!(a.add(&b).is_err());
        assert!(a.sub(&b).is_err());
    }

    #[test]
    fn split_inverts_vstack_of_transposes() {
        let a = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = m(&[&[5.0, 6.0]]);
        let stacked = Matrix::vstack(&[&a, &b]).unwrap();
        assert_eq!(stacked.shape(), (3, 2));
        let h = m(&[&[0.5, -1.0]]);
        let parts = h.matmul_nt(&stacked).unwrap().split_cols(&[2, 1]).unwrap();
        assert_eq!(parts[0], h.matmul_nt(&a).unwrap());
        assert_eq!(parts[1], h.matmul_nt(&b).unwrap());
    }

    #[test]
    fn f32_matrices_work() {
        let a = Matrix::<f32>::from_rows(&[[1.0f32, 2.0], [3.0, 4.0]]).unwrap();
        let b = Matrix::<f32>::from_rows(&[[5.0f32], [6.0]]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().as_slice(), &[17.0, 39.0]);
    }

    fn small(rows: usize, cols: usize) -> impl Strategy<Value = Matrix<f64>> {
        proptest::collection::vec(-2.0f64..2.0, rows * cols).prop_map(move |d| Matrix::from_vec(rows, cols, d).unwrap())
    }

    proptest! {
        #[test]
        fn matmul_distributes_over_addition(a in small(3, 4), b in small(4, 2), c in small(4, 2)) {
            let lhs = a.matmul(&b.add(&c).unwrap()).unwrap();
            let rhs = a.matmul(&b).unwrap().add(&a.matmul(&c).unwrap()).unwrap();
            for (x, y) in lhs.as_slice().iter().zip(rhs.as_slice()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            let right_id = a.matmul(&Matrix::identity(4)).unwrap();
            prop_assert_eq!(right_id, a.clone());
        }

        #[test]
        fn sigmoid_output_in_open_unit_interval(a in small(4, 4)) {
            let s = a.scale(50.0).sigmoid();
            prop_assert!(s.as_slice().iter().all(|&x| x > 0.0 && x < 1.0));
        }

        #[test]
        fn products_are_deterministic(a in small(3, 5), b in small(5, 3)) {
            let x = a.matmul(&b).unwrap();
            let y = a.matmul(&b).unwrap();
            prop_assert!(x.as_slice().iter().zip(y.as_slice()).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }
}
