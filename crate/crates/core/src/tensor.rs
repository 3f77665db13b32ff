//! Dense row-major tensors used by the network code.

use ndarray::{Array2, Array3};
use num_complex::Complex;

use crate::real::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match {} elements",
            data.len()
        );
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self::new(vec![1], vec![value])
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// `(n, c, h, w)` of a rank-4 tensor.
    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        assert_eq!(self.shape.len(), 4, "expected NCHW, got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2], self.shape[3])
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape.to_vec();
        self
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        assert_eq!(self.shape, other.shape, "elementwise shape mismatch");
        Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape, "accumulation shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: T) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max(&self) -> T {
        self.data
            .iter()
            .copied()
            .fold(T::neg_infinity(), |a, b| if b > a { b } else { a })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.to_f64().unwrap()).unwrap())
                .collect(),
        }
    }

    /// Complex `[n, H, W]` to `[n, 2, H, W]` with (re, im) channel pairs.
    pub fn from_complex(a: &Array3<Complex<T>>) -> Self {
        let (n, h, w) = a.dim();
        let hw = h * w;
        let mut data = vec![T::zero(); n * 2 * hw];
        for (k, plane) in a.outer_iter().enumerate() {
            for (p, z) in plane.iter().enumerate() {
                data[k * 2 * hw + p] = z.re;
                data[k * 2 * hw + hw + p] = z.im;
            }
        }
        Self::new(vec![n, 2, h, w], data)
    }

    /// Inverse of [`Tensor::from_complex`].
    pub fn to_complex(&self) -> Array3<Complex<T>> {
        let (n, c, h, w) = self.dims4();
        assert_eq!(c, 2, "complex tensor must have 2 channels");
        let hw = h * w;
        Array3::from_shape_fn((n, h, w), |(k, y, x)| {
            let p = k * 2 * hw + y * w + x;
            Complex::new(self.data[p], self.data[p + hw])
        })
    }

    /// A real image as `[1, 1, H, W]`.
    pub fn from_image(a: &Array2<T>) -> Self {
        let (h, w) = a.dim();
        Self::new(vec![1, 1, h, w], a.iter().copied().collect())
    }

    /// The last two axes of a single-plane tensor as an image.
    pub fn to_image(&self) -> Array2<T> {
        let n = self.shape.len();
        let (h, w) = (self.shape[n - 2], self.shape[n - 1]);
        assert_eq!(self.data.len(), h * w, "tensor holds more than one plane");
        Array2::from_shape_vec((h, w), self.data.clone()).expect("shape checked")
    }
}
