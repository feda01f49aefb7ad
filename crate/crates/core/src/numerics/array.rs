use rand::Rng;
use rand_distr::StandardNormal;

use super::real::{gemm, Real, View, ViewMut};
use crate::error::{shape_err, Result};

/// Dense row-major array of reals.
#[derive(Clone, Debug, PartialEq)]
pub struct Array<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Array<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if shape.is_empty() || shape.contains(&0) {
            return Err(shape_err("array", format!("extents must be positive, got {shape:?}")));
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(shape_err(
                "array",
                format!("shape {shape:?} needs {len} values, got {}", data.len()),
            ));
        }
        Ok(Array { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let len = shape.iter().product();
        Array::new(shape, vec![value; len]).expect("positive extents")
    }

    pub fn scalar(value: T) -> Self {
        Array { shape: vec![1], data: vec![value] }
    }

    pub fn from_f32(shape: impl Into<Vec<usize>>, data: &[f32]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&x| T::of(x as f64)).collect())
    }

    /// Standard-normal entries scaled by `std`.
    pub fn randn<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, std: f64, rng: &mut R) -> Self {
        let shape = shape.into();
        let len = shape.iter().product();
        let data = (0..len)
            .map(|_| T::of(rng.sample::<f64, _>(StandardNormal) * std))
            .collect();
        Array::new(shape, data).expect("positive extents")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading extents collapsed into rows; the last extent is the column count.
    pub fn rows(&self) -> usize {
        self.data.len() / self.cols()
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().expect("rank >= 1")
    }

    pub fn row(&self, r: usize) -> &[T] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let len: usize = shape.iter().product();
        if len != self.data.len() || shape.contains(&0) {
            return Err(shape_err(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Array { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(shape_err(
                "elementwise",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Array { shape: self.shape.clone(), data })
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn cast<U: Real>(&self) -> Array<U> {
        Array {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| U::of(x.as_f64())).collect(),
        }
    }

    /// Rows `[start, end)` of the matrix view.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Self> {
        let c = self.cols();
        if start >= end || end > self.rows() {
            return Err(shape_err("slice_rows", format!("{start}..{end} of {}", self.rows())));
        }
        Array::new(vec![end - start, c], self.data[start * c..end * c].to_vec())
    }

    /// Row-wise concatenation of matrices with equal column counts.
    pub fn concat_rows(parts: &[&Self]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| shape_err("concat_rows", "no inputs"))?;
        let c = first.cols();
        let mut data = Vec::new();
        for p in parts {
            if p.cols() != c {
                return Err(shape_err("concat_rows", format!("cols {} vs {c}", p.cols())));
            }
            data.extend_from_slice(&p.data);
        }
        let rows = data.len() / c;
        Array::new(vec![rows, c], data)
    }

    /// Plain matrix product of two rank-2 arrays.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.shape.len() != 2 || other.shape.len() != 2 || self.shape[1] != other.shape[0] {
            return Err(shape_err(
                "matmul",
                format!("{:?} x {:?}", self.shape, other.shape),
            ));
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(
            T::one(),
            View::dense(&self.data, 0, m, k),
            View::dense(&other.data, 0, k, n),
            T::zero(),
            ViewMut::dense(&mut out, 0, m, n),
        );
        Array::new(vec![m, n], out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_xoshiro::Xoshiro256PlusPlus;

    fn triple_loop(a: &Array<f32>, b: &Array<f32>) -> Vec<f32> {
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0f64;
                for p in 0..k {
                    acc += a.data()[i * k + p] as f64 * b.data()[p * n + j] as f64;
                }
                out[i * n + j] = acc as f32;
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_hand_cases() {
        let eye = Array::<f32>::from_f32([2, 2], &[1., 0., 0., 1.]).unwrap();
        let b = Array::from_f32([2, 2], &[5., 6., 7., 8.]).unwrap();
        assert_eq!(eye.matmul(&b).unwrap(), b);

        let row = Array::<f32>::from_f32([1, 2], &[1., 2.]).unwrap();
        let col = Array::from_f32([2, 1], &[3., 4.]).unwrap();
        assert_eq!(row.matmul(&col).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(7);
        let a = Array::<f32>::randn([4, 5], 1.0, &mut rng);
        let b = Array::<f32>::randn([5, 3], 1.0, &mut rng);
        let got = a.matmul(&b).unwrap();
        let want = triple_loop(&a, &b);
        for (g, w) in got.data().iter().zip(&want) {
            assert!((g - w).abs() < 1e-6, "{g} vs {w}");
        }
    }

    #[test]
    fn matmul_rejects_bad_inner_extent() {
        let a = Array::<f32>::zeros([2, 3]);
        let b = Array::<f32>::zeros([2, 3]);
        assert!(a.matmul(&b).is_err());
    }

    #[test]
    fn new_checks_element_count() {
        assert!(Array::<f32>::new([2, 2], vec![0.0; 3]).is_err());
        assert!(Array::<f32>::new([0, 2], vec![]).is_err());
    }
}
