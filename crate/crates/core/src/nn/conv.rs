use crate::error::{Error, Result};
use crate::linalg::gemm;
use crate::tensor::{Op, Scalar, Tape, Tensor, Var};

/// Output size of a strided, padded window along one axis.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || kernel == 0 || kernel > padded {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeometry {
    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Unfold one image `[C, H, W]` into columns `[C*KH*KW, OH*OW]`.
    fn im2col<T: Scalar>(&self, img: &[T], cols: &mut [T]) {
        let plane = self.out_plane();
        for c in 0..self.c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let dst = &mut cols[row * plane..(row + 1) * plane];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let line = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        if iy < 0 || iy >= self.h as isize {
                            line.fill(T::zero());
                            continue;
                        }
                        let src = &img[(c * self.h + iy as usize) * self.w..][..self.w];
                        for (ox, d) in line.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            *d = if ix < 0 || ix >= self.w as isize {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Self::im2col`]: scatter-add columns back into an image.
    fn col2im<T: Scalar>(&self, cols: &[T], img: &mut [T]) {
        let plane = self.out_plane();
        for c in 0..self.c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let src = &cols[row * plane..(row + 1) * plane];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut img[(c * self.h + iy as usize) * self.w..][..self.w];
                        for ox in 0..self.ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] = dst[ix as usize] + src[oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

impl<T: Scalar> Tape<T> {
    /// 2-D cross-correlation. `x: N×C×H×W`, `w: O×C×KH×KW`, optional `b: O`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 4 || sw.len() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("expected 4-d input and weight, got {sx:?} and {sw:?}"),
            ));
        }
        if sx[1] != sw[1] {
            return Err(Error::shape(
                "conv2d",
                format!("input has {} channels but weight expects {}", sx[1], sw[1]),
            ));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be >= 1"));
        }
        let (oh, ow) = match (
            conv_out_dim(sx[2], sw[2], stride, pad),
            conv_out_dim(sx[3], sw[3], stride, pad),
        ) {
            (Some(oh), Some(ow)) => (oh, ow),
            _ => {
                return Err(Error::shape(
                    "conv2d",
                    format!(
                        "kernel {}x{} does not fit input {}x{} with pad {pad}",
                        sw[2], sw[3], sx[2], sx[3]
                    ),
                ))
            }
        };
        let geom = ConvGeometry {
            n: sx[0],
            c: sx[1],
            h: sx[2],
            w: sx[3],
            o: sw[0],
            kh: sw[2],
            kw: sw[3],
            oh,
            ow,
            stride,
            pad,
        };
        if let Some(b) = b {
            if self.shape(b) != [geom.o] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias shape {:?} does not match {} filters", self.shape(b), geom.o),
                ));
            }
        }
        let (plane, patch) = (geom.out_plane(), geom.patch());
        let in_image = geom.c * geom.h * geom.w;
        let mut out = vec![T::zero(); geom.n * geom.o * plane];
        let mut cols = if geom.is_pointwise() { Vec::new() } else { vec![T::zero(); patch * plane] };
        let (xd, wd) = (self.data(x), self.data(w));
        for n in 0..geom.n {
            let img = &xd[n * in_image..(n + 1) * in_image];
            let src: &[T] = if geom.is_pointwise() {
                img
            } else {
                geom.im2col(img, &mut cols);
                &cols
            };
            let dst = &mut out[n * geom.o * plane..(n + 1) * geom.o * plane];
            gemm(false, false, geom.o, patch, plane, T::one(), wd, src, T::zero(), dst);
            if let Some(b) = b {
                for (row, &bias) in dst.chunks_exact_mut(plane).zip(self.data(b)) {
                    row.iter_mut().for_each(|v| *v = *v + bias);
                }
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(vec![geom.n, geom.o, oh, ow], out, Op::Conv2d(geom), inputs))
    }
}

pub(crate) fn conv2d_backward<T: Scalar>(
    geom: &ConvGeometry,
    inputs: &[&Tensor<T>],
    g: &[T],
    needs: &[bool],
) -> Vec<Option<Vec<T>>> {
    let (x, w) = (inputs[0].data(), inputs[1].data());
    let (plane, patch) = (geom.out_plane(), geom.patch());
    let in_image = geom.c * geom.h * geom.w;
    let mut dx = needs[0].then(|| vec![T::zero(); x.len()]);
    let mut dw = needs[1].then(|| vec![T::zero(); w.len()]);
    let mut db = needs.get(2).copied().unwrap_or(false).then(|| vec![T::zero(); geom.o]);
    let mut cols = vec![T::zero(); patch * plane];
    let mut dcols = vec![T::zero(); patch * plane];
    for n in 0..geom.n {
        let gn = &g[n * geom.o * plane..(n + 1) * geom.o * plane];
        let img = &x[n * in_image..(n + 1) * in_image];
        if let Some(dw) = dw.as_mut() {
            let src: &[T] = if geom.is_pointwise() {
                img
            } else {
                geom.im2col(img, &mut cols);
                &cols
            };
            gemm(false, true, geom.o, plane, patch, T::one(), gn, src, T::one(), dw);
        }
        if let Some(dx) = dx.as_mut() {
            let dimg = &mut dx[n * in_image..(n + 1) * in_image];
            if geom.is_pointwise() {
                gemm(true, false, patch, geom.o, plane, T::one(), w, gn, T::zero(), dimg);
            } else {
                gemm(true, false, patch, geom.o, plane, T::one(), w, gn, T::zero(), &mut dcols);
                geom.col2im(&dcols, dimg);
            }
        }
        if let Some(db) = db.as_mut() {
            for (d, row) in db.iter_mut().zip(gn.chunks_exact(plane)) {
                *d = *d + row.iter().copied().sum();
            }
        }
    }
    let mut grads = vec![dx, dw];
    if inputs.len() == 3 {
        grads.push(db);
    }
    grads
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::CounterRng;
    use crate::tensor::Fill;

    #[test]
    fn pointwise_identity_kernel() {
        let mut tape = Tape::<f64>::new();
        let xs: Vec<f64> = (0..18).map(|v| v as f64 - 4.0).collect();
        let x = tape.leaf(Tensor::from_vec(&[1, 2, 3, 3], xs.clone()).unwrap());
        let w = tape.leaf(Tensor::from_vec(&[2, 2, 1, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let y = tape.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), xs.as_slice());
    }

    #[test]
    fn ones_kernel_counts_overlap() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full(&[1, 1, 5, 5], 1.0).unwrap());
        let w = tape.leaf(Tensor::full(&[1, 1, 3, 3], 1.0).unwrap());
        let y = tape.conv2d(x, w, None, 1, 1).unwrap();
        let out = tape.value(y).data();
        assert_eq!(tape.shape(y), &[1, 1, 5, 5]);
        assert_eq!(out[2 * 5 + 2], 9.0);
        assert_eq!(out[0], 4.0);
        assert_eq!(out[4], 4.0);
        assert_eq!(out[24], 4.0);
        assert_eq!(out[2], 6.0);
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full(&[1, 3, 4, 4], 1.0).unwrap());
        let w = tape.leaf(Tensor::full(&[2, 2, 3, 3], 1.0).unwrap());
        assert!(matches!(tape.conv2d(x, w, None, 1, 0), Err(Error::Shape { op: "conv2d", .. })));
        let w2 = tape.leaf(Tensor::full(&[2, 3, 7, 7], 1.0).unwrap());
        assert!(tape.conv2d(x, w2, None, 1, 1).is_err());
    }

    /// Six nested loops, written without im2col.
    fn naive_conv(x: &[f64], w: &[f64], b: &[f64], dims: [usize; 6], stride: usize, pad: usize) -> Vec<f64> {
        let [n, c, h, wd, o, k] = dims;
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;
        let mut out = vec![0.0; n * o * oh * ow];
        for ni in 0..n {
            for oi in 0..o {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut acc = b[oi];
                        for ci in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (y * stride + ky) as isize - pad as isize;
                                    let ix = (xx * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        acc += x[((ni * c + ci) * h + iy as usize) * wd + ix as usize]
                                            * w[((oi * c + ci) * k + ky) * k + kx];
                                    }
                                }
                            }
                        }
                        out[((ni * o + oi) * oh + y) * ow + xx] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matches_nested_loop_reference() {
        let mut rng = CounterRng::new(42);
        let u = Fill::Uniform { low: -1.0, high: 1.0 };
        for (stride, pad) in [(1, 1), (2, 1), (1, 0), (2, 0)] {
            let x = Tensor::<f64>::create(&[2, 3, 8, 8], u, &mut rng).unwrap();
            let w = Tensor::<f64>::create(&[4, 3, 3, 3], u, &mut rng).unwrap();
            let b = Tensor::<f64>::create(&[4], u, &mut rng).unwrap();
            let want = naive_conv(x.data(), w.data(), b.data(), [2, 3, 8, 8, 4, 3], stride, pad);
            let mut tape = Tape::new();
            let (xv, wv, bv) = (tape.leaf(x), tape.leaf(w), tape.leaf(b));
            let y = tape.conv2d(xv, wv, Some(bv), stride, pad).unwrap();
            let got = tape.value(y).data();
            assert_eq!(got.len(), want.len());
            for (a, e) in got.iter().zip(&want) {
                assert!((a - e).abs() < 1e-5, "{a} vs {e}");
            }
        }
    }

    #[test]
    fn output_dim_formula() {
        assert_eq!(conv_out_dim(32, 3, 1, 1), Some(32));
        assert_eq!(conv_out_dim(32, 3, 2, 1), Some(16));
        assert_eq!(conv_out_dim(32, 1, 2, 0), Some(16));
        assert_eq!(conv_out_dim(2, 5, 1, 1), None);
    }
}
