//! Dense row-major tensors and the reverse-mode tape.

mod gradcheck;
mod tape;

use std::fmt;
use std::sync::Arc;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::CounterRng;

pub use gradcheck::{finite_difference_check, GradCheck};
pub use tape::{OpKind, Primitive, Tape, Var};
pub(crate) use tape::Op;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    Float32,
    Float64,
}

impl DType {
    /// Code used by the checkpoint format.
    pub fn code(self) -> u8 {
        match self {
            DType::Float32 => 0,
            DType::Float64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::Float32),
            1 => Some(DType::Float64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::Float32 => 4,
            DType::Float64 => 8,
        }
    }
}

/// Element type of a [`Tensor`]: `f32` for training, `f64` for gradient checks.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + std::iter::Sum
    + 'static
{
    const DTYPE: DType;

    /// `c = alpha * a * b + beta * c` with arbitrary strides.
    ///
    /// # Safety
    /// The pointers and strides must describe valid, non-aliasing (for `c`)
    /// matrices of the given dimensions.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable")
    }
}

impl Scalar for f32 {
    const DTYPE: DType = DType::Float32;

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        // `gemm` computes dst = alpha·dst + beta·lhs·rhs, reading dst only
        // when asked, with column stride before row stride.
        gemm::gemm(
            m, n, k, c, csc, rsc, beta != 0.0, a, csa, rsa, b, csb, rsb, beta, alpha, false, false, false,
            gemm::Parallelism::None,
        );
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::Float64;

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        // `gemm` computes dst = alpha·dst + beta·lhs·rhs, reading dst only
        // when asked, with column stride before row stride.
        gemm::gemm(
            m, n, k, c, csc, rsc, beta != 0.0, a, csa, rsa, b, csb, rsb, beta, alpha, false, false, false,
            gemm::Parallelism::None,
        );
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

/// Initial contents for [`Tensor::create`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Fill {
    Zeros,
    Ones,
    Constant(f64),
    /// Normal with mean 0 and standard deviation `sqrt(2 / fan_in)`.
    HeNormal { fan_in: usize },
    Uniform { low: f64, high: f64 },
}

/// An n-dimensional array. Data is shared copy-on-write so that handing a
/// parameter to a tape does not copy it.
#[derive(Clone)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<T> = self.data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("dtype", &T::DTYPE)
            .field("data", &preview)
            .field("requires_grad", &self.requires_grad)
            .finish()
    }
}

pub(crate) fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.contains(&0) {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
        });
    }
    Ok(shape.iter().product())
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let numel = check_shape(shape)?;
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {:?} needs {} elements, got {}", shape, numel, data.len()),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: Arc::new(data),
            requires_grad: false,
            grad: None,
        })
    }

    pub fn create(shape: &[usize], fill: Fill, rng: &mut CounterRng) -> Result<Self> {
        let numel = check_shape(shape)?;
        let data: Vec<T> = match fill {
            Fill::Zeros => vec![T::zero(); numel],
            Fill::Ones => vec![T::one(); numel],
            Fill::Constant(c) => vec![T::lit(c); numel],
            Fill::HeNormal { fan_in } => {
                if fan_in == 0 {
                    return Err(Error::Config("he_normal requires fan_in >= 1".into()));
                }
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt())
                    .map_err(|e| Error::Config(e.to_string()))?;
                (0..numel).map(|_| T::lit(normal.sample(rng))).collect()
            }
            Fill::Uniform { low, high } => {
                let dist = Uniform::new(low, high).map_err(|e| Error::Config(e.to_string()))?;
                (0..numel).map(|_| T::lit(dist.sample(rng))).collect()
            }
        };
        Self::from_vec(shape, data)
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let numel = check_shape(shape)?;
        Self::from_vec(shape, vec![T::zero(); numel])
    }

    pub fn full(shape: &[usize], value: f64) -> Result<Self> {
        let numel = check_shape(shape)?;
        Self::from_vec(shape, vec![T::lit(value); numel])
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: Arc::new(vec![value]),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Mutable access; copies the buffer first if it is shared.
    pub fn data_mut(&mut self) -> &mut [T] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_vec(self) -> Vec<T> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| (*shared).clone())
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn set_requires_grad(&mut self, requires_grad: bool) {
        self.requires_grad = requires_grad;
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub(crate) fn set_grad(&mut self, grad: Option<Vec<T>>) {
        debug_assert!(grad.as_ref().is_none_or(|g| g.len() == self.numel()));
        self.grad = grad;
    }

    pub fn take_grad(&mut self) -> Option<Vec<T>> {
        self.grad.take()
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        let numel = check_shape(shape)?;
        if numel != self.numel() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {:?}", self.shape, shape),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
            requires_grad: self.requires_grad,
            grad: None,
        })
    }

    /// Whether two tensors hold the same buffer (no copy happened).
    pub fn shares_data_with(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.data, &other.data)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        let data = self
            .data
            .iter()
            .map(|v| U::from_f64(v.to_f64().unwrap_or(f64::NAN)).unwrap_or_else(U::nan))
            .collect();
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(data),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_and_constant_fills() {
        let mut rng = CounterRng::new(0);
        let z = Tensor::<f64>::create(&[2, 2], Fill::Zeros, &mut rng).unwrap();
        assert_eq!(z.data(), &[0.0; 4]);
        let c = Tensor::<f32>::create(&[4], Fill::Constant(1.5), &mut rng).unwrap();
        assert_eq!(c.data(), &[1.5; 4]);
    }

    #[test]
    fn zero_dimension_is_rejected() {
        let err = Tensor::<f32>::zeros(&[3, 0]).unwrap_err();
        assert!(matches!(err, Error::InvalidShape { .. }));
        let mut rng = CounterRng::new(0);
        assert!(Tensor::<f32>::create(&[2], Fill::HeNormal { fan_in: 0 }, &mut rng).is_err());
    }

    #[test]
    fn he_normal_variance() {
        let mut rng = CounterRng::substream(7, "weights");
        let t = Tensor::<f64>::create(&[10_000], Fill::HeNormal { fan_in: 50 }, &mut rng).unwrap();
        let var = sample_variance(t.data());
        assert!((var - 0.04).abs() < 0.004, "variance {var}");
        let again = Tensor::<f64>::create(
            &[10_000],
            Fill::HeNormal { fan_in: 50 },
            &mut CounterRng::substream(7, "weights"),
        )
        .unwrap();
        assert_eq!(t.data(), again.data());
    }

    // Two-pass estimator, kept separate from any library statistics code.
    fn sample_variance(xs: &[f64]) -> f64 {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)
    }

    #[test]
    fn uniform_fill_stays_in_bounds() {
        let mut rng = CounterRng::new(1);
        let t = Tensor::<f32>::create(&[1000], Fill::Uniform { low: -0.5, high: 2.0 }, &mut rng)
            .unwrap();
        assert!(t.data().iter().all(|&v| (-0.5..2.0).contains(&v)));
    }

    #[test]
    fn copy_on_write_data() {
        let a = Tensor::<f32>::full(&[3], 1.0).unwrap();
        let mut b = a.clone();
        assert!(a.shares_data_with(&b));
        b.data_mut()[0] = 5.0;
        assert_eq!(a.data()[0], 1.0);
        assert!(!a.shares_data_with(&b));
    }
}
