use crate::error::{Error, Result};
use crate::linalg::gemm;
use crate::tensor::{Op, Scalar, Tape, Tensor, Var};

impl<T: Scalar> Tape<T> {
    /// `x · w + b` for `x: N×I`, `w: I×O`, `b: O`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[0] || sb != [sw[1]] {
            return Err(Error::shape(
                "linear",
                format!("x {sx:?}, w {sw:?}, b {sb:?} (expected N×I, I×O, O)"),
            ));
        }
        let (n, i, o) = (sx[0], sx[1], sw[1]);
        let bias = self.data(b);
        let mut out = Vec::with_capacity(n * o);
        for _ in 0..n {
            out.extend_from_slice(bias);
        }
        gemm(false, false, n, i, o, T::one(), self.data(x), self.data(w), T::one(), &mut out);
        Ok(self.push(vec![n, o], out, Op::Linear, vec![x, w, b]))
    }
}

pub(crate) fn linear_backward<T: Scalar>(
    inputs: &[&Tensor<T>],
    g: &[T],
    needs: &[bool],
) -> Vec<Option<Vec<T>>> {
    let (x, w) = (inputs[0], inputs[1]);
    let (n, i) = (x.shape()[0], x.shape()[1]);
    let o = w.shape()[1];
    let dx = needs[0].then(|| {
        let mut dx = vec![T::zero(); n * i];
        gemm(false, true, n, o, i, T::one(), g, w.data(), T::zero(), &mut dx);
        dx
    });
    let dw = needs[1].then(|| {
        let mut dw = vec![T::zero(); i * o];
        gemm(true, false, i, n, o, T::one(), x.data(), g, T::zero(), &mut dw);
        dw
    });
    let db = needs[2].then(|| {
        let mut db = vec![T::zero(); o];
        for row in g.chunks_exact(o) {
            db.iter_mut().zip(row).for_each(|(d, &v)| *d = *d + v);
        }
        db
    });
    vec![dx, dw, db]
}
