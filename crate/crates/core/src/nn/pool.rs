use super::conv::conv_out_dim;
use crate::error::{Error, Result};
use crate::tensor::{Op, Scalar, Tape, Var};

pub(crate) struct MaxPoolContext {
    /// Flat input index of the winning element for every output element.
    pub(crate) argmax: Vec<usize>,
}

impl MaxPoolContext {
    pub(crate) fn backward<T: Scalar>(&self, input_len: usize, g: &[T]) -> Vec<T> {
        let mut dx = vec![T::zero(); input_len];
        for (&src, &gv) in self.argmax.iter().zip(g) {
            dx[src] = dx[src] + gv;
        }
        dx
    }
}

impl<T: Scalar> Tape<T> {
    /// Max pooling over `k×k` windows of an `N×C×H×W` input. Padding cells
    /// never win; ties go to the first maximum in row-major window order.
    pub fn max_pool(&mut self, x: Var, k: usize, stride: usize, pad: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(Error::shape("max_pool", format!("need N×C×H×W input, got {shape:?}")));
        }
        if pad >= k {
            return Err(Error::shape("max_pool", format!("pad {pad} must be smaller than window {k}")));
        }
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let (oh, ow) = match (conv_out_dim(h, k, stride, pad), conv_out_dim(w, k, stride, pad)) {
            (Some(oh), Some(ow)) => (oh, ow),
            _ => {
                return Err(Error::shape(
                    "max_pool",
                    format!("window {k} (stride {stride}, pad {pad}) larger than input {h}x{w}"),
                ))
            }
        };
        let xd = self.data(x);
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best: Option<(T, usize)> = None;
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let idx = base + iy as usize * w + ix as usize;
                            let v = xd[idx];
                            if best.is_none_or(|(b, _)| v > b) {
                                best = Some((v, idx));
                            }
                        }
                    }
                    let (v, idx) = best.expect("pad < k guarantees a real cell");
                    out.push(v);
                    argmax.push(idx);
                }
            }
        }
        Ok(self.push(vec![n, c, oh, ow], out, Op::MaxPool(MaxPoolContext { argmax }), vec![x]))
    }

    /// Per-channel spatial mean: `N×C×H×W -> N×C`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 3 {
            return Err(Error::shape("global_avg_pool", format!("need N×C×spatial input, got {shape:?}")));
        }
        let spatial: usize = shape[2..].iter().product();
        let inv = T::one() / T::lit(spatial as f64);
        let out = self
            .data(x)
            .chunks_exact(spatial)
            .map(|plane| plane.iter().copied().sum::<T>() * inv)
            .collect();
        Ok(self.push(vec![shape[0], shape[1]], out, Op::GlobalAvgPool, vec![x]))
    }
}
