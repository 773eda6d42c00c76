use crate::error::{Error, Result};
use crate::tensor::{Op, Scalar, Tape, Var};

impl<T: Scalar> Tape<T> {
    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits);
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("logits {shape:?} with {} labels", labels.len()),
            ));
        }
        let c = shape[1];
        if let Some((i, &bad)) = labels.iter().enumerate().find(|(_, &l)| l >= c) {
            return Err(Error::Data(format!("label {bad} at row {i} is outside [0, {c})")));
        }
        let mut probs = Vec::with_capacity(labels.len() * c);
        let mut total = T::zero();
        for (row, &label) in self.data(logits).chunks_exact(c).zip(labels) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let denom: T = row.iter().map(|&v| (v - max).exp()).sum();
            let log_denom = denom.ln();
            total = total + (log_denom - (row[label] - max));
            probs.extend(row.iter().map(|&v| (v - max).exp() / denom));
        }
        let loss = total / T::lit(labels.len() as f64);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::SoftmaxCrossEntropy {
                probs,
                labels: labels.to_vec(),
            },
            vec![logits],
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    #[allow(clippy::approx_constant)]
    fn uniform_logits_give_log_classes() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::full(&[3, 10], 0.3).unwrap());
        let l = t.softmax_cross_entropy(x, &[0, 4, 9]).unwrap();
        assert!((t.value(l).item() - 10f64.ln()).abs() < 1e-12);
        assert!((t.value(l).item() - 2.302585).abs() < 1e-6);
    }

    #[test]
    fn saturated_true_class_gives_zero_loss() {
        let mut t = Tape::<f64>::new();
        let mut row = vec![0.0; 5];
        row[2] = 1e4;
        let x = t.leaf(Tensor::from_vec(&[1, 5], row).unwrap());
        let l = t.softmax_cross_entropy(x, &[2]).unwrap();
        assert!(t.value(l).item().abs() < 1e-12);
    }

    #[test]
    fn gradient_is_softmax_minus_onehot_over_n() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::full(&[2, 4], 0.0).unwrap().with_requires_grad(true));
        let l = t.softmax_cross_entropy(x, &[1, 3]).unwrap();
        t.backward(l).unwrap();
        let g = t.grad(x).unwrap();
        assert_eq!(g, &[0.125, -0.375, 0.125, 0.125, 0.125, 0.125, 0.125, -0.375]);
    }

    #[test]
    fn out_of_range_label() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::full(&[1, 3], 0.0).unwrap());
        assert!(matches!(t.softmax_cross_entropy(x, &[3]), Err(Error::Data(_))));
    }
}
