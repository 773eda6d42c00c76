use super::norm::Mode;
use crate::error::{Error, Result};
use crate::rng::CounterRng;
use crate::tensor::{Op, Scalar, Tape, Var};

impl<T: Scalar> Tape<T> {
    /// Inverted dropout: in train mode each element is zeroed with
    /// probability `rate` and survivors are scaled by `1 / (1 - rate)`.
    /// Eval mode (or `rate == 0`) is the identity.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut CounterRng, mode: Mode) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate must be in [0, 1), got {rate}")));
        }
        let shape = self.shape(x).to_vec();
        if mode == Mode::Eval || rate == 0.0 {
            let data = self.data(x).to_vec();
            return Ok(self.push(shape, data, Op::Dropout { mask: None }, vec![x]));
        }
        let keep = T::lit(1.0 / (1.0 - rate));
        let n = self.value(x).numel();
        // Each 64-bit draw yields two 32-bit uniforms; an element is dropped
        // when its uniform falls below rate · 2^32.
        let threshold = (rate * 4_294_967_296.0).round() as u64;
        let mut words = vec![0u64; n.div_ceil(2)];
        rng.fill_u64(&mut words);
        let options = [T::zero(), keep];
        let mut mask = vec![keep; n];
        for (pair, &w) in mask.chunks_mut(2).zip(&words) {
            for (m, u) in pair.iter_mut().zip([w & 0xFFFF_FFFF, w >> 32]) {
                *m = options[usize::from(u >= threshold)];
            }
        }
        let data = self.data(x).iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        Ok(self.push(shape, data, Op::Dropout { mask: Some(mask) }, vec![x]))
    }
}
