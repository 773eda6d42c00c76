use crate::error::{Error, Result};
use crate::tensor::{Op, Scalar, Tape, Tensor, Var};

/// Learnable per-channel negative slope.
#[derive(Clone, Debug)]
pub struct PReLUState<T: Scalar> {
    pub alpha: Tensor<T>,
}

impl<T: Scalar> PReLUState<T> {
    pub const DEFAULT_ALPHA: f64 = 0.25;

    pub fn new(channels: usize) -> Result<Self> {
        Self::with_alpha(channels, Self::DEFAULT_ALPHA)
    }

    pub fn with_alpha(channels: usize, alpha: f64) -> Result<Self> {
        if !alpha.is_finite() {
            return Err(Error::Config(format!("prelu alpha must be finite, got {alpha}")));
        }
        Ok(Self {
            alpha: Tensor::full(&[channels], alpha)?,
        })
    }
}

/// `(outer, channels, inner)` decomposition for ops that act along axis 1.
pub(crate) fn channel_layout(shape: &[usize]) -> (usize, usize, usize) {
    let c = shape.get(1).copied().unwrap_or(1);
    let inner: usize = shape.iter().skip(2).product();
    (shape[0], c, inner)
}

impl<T: Scalar> Tape<T> {
    pub fn relu(&mut self, x: Var) -> Var {
        let data = self
            .data(x)
            .iter()
            .map(|&v| if v > T::zero() { v } else { T::zero() })
            .collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, data, Op::Relu, vec![x])
    }

    /// `x` where positive, `alpha[c] * x` elsewhere; channels on axis 1.
    pub fn prelu(&mut self, x: Var, alpha: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || self.shape(alpha) != [shape[1]] {
            return Err(Error::shape(
                "prelu",
                format!("alpha {:?} does not match channels of {shape:?}", self.shape(alpha)),
            ));
        }
        let (outer, c, inner) = channel_layout(&shape);
        let (xd, ad) = (self.data(x), self.data(alpha));
        let mut out = Vec::with_capacity(xd.len());
        for n in 0..outer {
            for (ch, &a) in ad.iter().enumerate().take(c) {
                let base = (n * c + ch) * inner;
                out.extend(xd[base..base + inner].iter().map(|&v| if v > T::zero() { v } else { a * v }));
            }
        }
        Ok(self.push(shape, out, Op::Prelu, vec![x, alpha]))
    }
}

pub(crate) fn prelu_backward<T: Scalar>(
    inputs: &[&Tensor<T>],
    g: &[T],
    needs: &[bool],
) -> Vec<Option<Vec<T>>> {
    let (x, alpha) = (inputs[0], inputs[1]);
    let (outer, c, inner) = channel_layout(x.shape());
    let (xd, ad) = (x.data(), alpha.data());
    let mut dx = needs[0].then(|| vec![T::zero(); xd.len()]);
    let mut da = needs[1].then(|| vec![T::zero(); c]);
    for n in 0..outer {
        for ch in 0..c {
            let base = (n * c + ch) * inner;
            for i in base..base + inner {
                let positive = xd[i] > T::zero();
                if let Some(dx) = dx.as_mut() {
                    dx[i] = if positive { g[i] } else { ad[ch] * g[i] };
                }
                if let (Some(da), false) = (da.as_mut(), positive) {
                    da[ch] = da[ch] + g[i] * xd[i];
                }
            }
        }
    }
    vec![dx, da]
}
