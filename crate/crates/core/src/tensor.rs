//! Dense row-major tensor storage.
//!
//! Everything in the crate runs on 64-bit floats so that finite-difference
//! verification has enough precision headroom.

use crate::error::{Error, Result};
use rand::Rng;

/// Scalar type used throughout the crate.
pub type Real = f64;

/// Dense multi-dimensional array, row-major.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<Real>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], v: Real) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    /// Wraps a data vector; the element count must match the shape product.
    pub fn from_vec(shape: &[usize], data: Vec<Real>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn scalar(v: Real) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[Real] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Real] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Real> {
        self.data
    }

    /// Single element of a scalar tensor.
    pub fn item(&self) -> Real {
        debug_assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn is_all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Reinterprets the buffer under a new shape with the same element count.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        Tensor::from_vec(shape, self.data.clone())
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b;
        }
    }

    pub fn scale_assign(&mut self, k: Real) {
        for a in self.data.iter_mut() {
            *a *= k;
        }
    }

    pub fn fill(&mut self, v: Real) {
        self.data.iter_mut().for_each(|a| *a = v);
    }

    pub fn rand_uniform<R: Rng>(shape: &[usize], lo: Real, hi: Real, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn rand_normal<R: Rng>(shape: &[usize], mean: Real, std: Real, rng: &mut R) -> Self {
        use rand_distr_normal::normal_sample;
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| mean + std * normal_sample(rng)).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    /// Row-major offset of a 3-D index (used by grid-shaped tensors).
    #[inline]
    pub fn offset3(&self, i: usize, j: usize, k: usize) -> usize {
        debug_assert_eq!(self.shape.len(), 3);
        (i * self.shape[1] + j) * self.shape[2] + k
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.numel() <= 8 {
            write!(f, "Tensor{:?}{:?}", self.shape, self.data)
        } else {
            write!(
                f,
                "Tensor{:?}[{:.4}, {:.4}, ... {} values]",
                self.shape,
                self.data[0],
                self.data[1],
                self.numel()
            )
        }
    }
}

/// Box-Muller normal sampling.
///
/// Kept local (rather than pulling in rand_distr) so the exact byte stream
/// consumed from the seeded generator is pinned by this crate alone.
mod rand_distr_normal {
    use super::Real;
    use rand::Rng;

    pub fn normal_sample<R: Rng>(rng: &mut R) -> Real {
        loop {
            let u: Real = rng.gen_range(Real::EPSILON..1.0);
            let v: Real = rng.gen_range(0.0..std::f64::consts::TAU);
            let r = (-2.0 * u.ln()).sqrt();
            let z = r * v.cos();
            if z.is_finite() {
                return z;
            }
        }
    }
}

/// Sum with four independent accumulators.
///
/// The fixed split keeps results bit-reproducible run to run while letting
/// the compiler pipeline the adds; used on hot dot-product paths where no
/// bit-for-bit external contract applies.
#[inline]
pub fn dot(a: &[Real], b: &[Real]) -> Real {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len();
    let chunks = n / 4;
    let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
    for c in 0..chunks {
        let i = c * 4;
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..n {
        tail += a[i] * b[i];
    }
    ((s0 + s1) + (s2 + s3)) + tail
}

/// y += k * x
#[inline]
pub fn axpy(k: Real, x: &[Real], y: &mut [Real]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x.iter()) {
        *yi += k * xi;
    }
}
