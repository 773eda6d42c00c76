use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use super::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::linalg::gemm;
use crate::nn;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Public identifier of a recorded primitive.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale,
    Sum,
    MatMul,
    Reshape,
    Concat,
    Linear,
    Conv2d,
    Relu,
    Prelu,
    BatchNorm,
    LayerNorm,
    MaxPool,
    GlobalAvgPool,
    Dropout,
    SoftmaxCrossEntropy,
}

/// Recorded operation together with what its backward rule needs.
pub(crate) enum Op<T> {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale(T),
    Sum,
    MatMul { m: usize, k: usize, n: usize },
    Reshape,
    Concat { axis_sizes: Vec<usize> },
    Linear,
    Conv2d(nn::conv::ConvGeometry),
    Relu,
    Prelu,
    /// Normalization over groups; train-mode batch norm and layer norm share
    /// the same backward rule with different grouping.
    Norm(nn::norm::NormContext<T>),
    /// Eval-mode batch norm: affine map with frozen statistics.
    BatchNormEval(nn::norm::FrozenNorm<T>),
    MaxPool(nn::pool::MaxPoolContext),
    GlobalAvgPool,
    Dropout { mask: Option<Vec<T>> },
    SoftmaxCrossEntropy { probs: Vec<T>, labels: Vec<usize> },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add => OpKind::Add,
            Op::Sub => OpKind::Sub,
            Op::Mul => OpKind::Mul,
            Op::Scale(_) => OpKind::Scale,
            Op::Sum => OpKind::Sum,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Reshape => OpKind::Reshape,
            Op::Concat { .. } => OpKind::Concat,
            Op::Linear => OpKind::Linear,
            Op::Conv2d(_) => OpKind::Conv2d,
            Op::Relu => OpKind::Relu,
            Op::Prelu => OpKind::Prelu,
            Op::Norm(ctx) if ctx.is_layer_norm() => OpKind::LayerNorm,
            Op::Norm(_) | Op::BatchNormEval(_) => OpKind::BatchNorm,
            Op::MaxPool(_) => OpKind::MaxPool,
            Op::GlobalAvgPool => OpKind::GlobalAvgPool,
            Op::Dropout { .. } => OpKind::Dropout,
            Op::SoftmaxCrossEntropy { .. } => OpKind::SoftmaxCrossEntropy,
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    inputs: Vec<Var>,
    retain_grad: bool,
}

/// A reverse-mode autodiff tape.
///
/// Nodes are appended in execution order, so the node list is already a
/// topological order and [`Tape::backward`] walks it once in reverse.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// The primitives reachable through [`Tape::forward`].
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    Add,
    Sub,
    Mul,
    Scale(f64),
    Sum,
    MatMul,
    /// Inputs: `x, w, b`.
    Linear,
    /// Inputs: `x, w` or `x, w, b`.
    Conv2d { stride: usize, pad: usize },
    Relu,
    /// Inputs: `x, alpha`.
    Prelu,
    /// Train-mode batch statistics. Inputs: `x, gamma, beta`.
    BatchNorm2d { eps: f64 },
    /// Inputs: `x, gamma, beta`.
    LayerNorm { eps: f64 },
    MaxPool { k: usize, stride: usize, pad: usize },
    GlobalAvgPool,
    SoftmaxCrossEntropy { labels: Vec<usize> },
    Concat,
    Reshape(Vec<usize>),
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record an input or parameter.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            inputs: Vec::new(),
            retain_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<T>> {
        self.nodes[v.0].value.take_grad()
    }

    /// Keep the gradient of an intermediate value after [`Tape::backward`].
    pub fn retain_grad(&mut self, v: Var) {
        self.nodes[v.0].retain_grad = true;
    }

    pub fn op_kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    pub fn inputs(&self, v: Var) -> &[Var] {
        &self.nodes[v.0].inputs
    }

    pub(crate) fn push(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, inputs: Vec<Var>) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].value.requires_grad());
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let value = Tensor {
            shape,
            data: std::sync::Arc::new(data),
            requires_grad,
            grad: None,
        };
        self.nodes.push(Node {
            value,
            op,
            inputs,
            retain_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    /// Generic dispatch over the registered primitives.
    pub fn forward(&mut self, prim: &Primitive, inputs: &[Var]) -> Result<Var> {
        let arity = |n: usize| -> Result<()> {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(Error::Contract(format!(
                    "{prim:?} takes {n} inputs, got {}",
                    inputs.len()
                )))
            }
        };
        match prim {
            Primitive::Add => {
                arity(2)?;
                self.add(inputs[0], inputs[1])
            }
            Primitive::Sub => {
                arity(2)?;
                self.sub(inputs[0], inputs[1])
            }
            Primitive::Mul => {
                arity(2)?;
                self.mul(inputs[0], inputs[1])
            }
            Primitive::Scale(c) => {
                arity(1)?;
                Ok(self.scale(inputs[0], T::lit(*c)))
            }
            Primitive::Sum => {
                arity(1)?;
                Ok(self.sum(inputs[0]))
            }
            Primitive::MatMul => {
                arity(2)?;
                self.matmul(inputs[0], inputs[1])
            }
            Primitive::Linear => {
                arity(3)?;
                self.linear(inputs[0], inputs[1], inputs[2])
            }
            Primitive::Conv2d { stride, pad } => match inputs.len() {
                2 => self.conv2d(inputs[0], inputs[1], None, *stride, *pad),
                _ => {
                    arity(3)?;
                    self.conv2d(inputs[0], inputs[1], Some(inputs[2]), *stride, *pad)
                }
            },
            Primitive::Relu => {
                arity(1)?;
                Ok(self.relu(inputs[0]))
            }
            Primitive::Prelu => {
                arity(2)?;
                self.prelu(inputs[0], inputs[1])
            }
            Primitive::BatchNorm2d { eps } => {
                arity(3)?;
                self.batch_norm_train(inputs[0], inputs[1], inputs[2], *eps)
                    .map(|(v, _)| v)
            }
            Primitive::LayerNorm { eps } => {
                arity(3)?;
                self.layer_norm(inputs[0], inputs[1], inputs[2], *eps)
            }
            Primitive::MaxPool { k, stride, pad } => {
                arity(1)?;
                self.max_pool(inputs[0], *k, *stride, *pad)
            }
            Primitive::GlobalAvgPool => {
                arity(1)?;
                self.global_avg_pool(inputs[0])
            }
            Primitive::SoftmaxCrossEntropy { labels } => {
                arity(1)?;
                self.softmax_cross_entropy(inputs[0], labels)
            }
            Primitive::Concat => self.concat(inputs),
            Primitive::Reshape(shape) => {
                arity(1)?;
                self.reshape(inputs[0], shape)
            }
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("operands have shapes {:?} and {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, op: Op<T>, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Var {
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, data, op, vec![a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(Op::Add, a, b, |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(Op::Sub, a, b, |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(Op::Mul, a, b, |x, y| x * y))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let data = self.data(a).iter().map(|&x| x * c).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, data, Op::Scale(c), vec![a])
    }

    /// Sum of all elements, as a tensor of shape `[1]`.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().copied().sum();
        self.push(vec![1], vec![s], Op::Sum, vec![a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(
                "matmul",
                format!("cannot multiply {sa:?} by {sb:?}"),
            ));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(false, false, m, k, n, T::one(), self.data(a), self.data(b), T::zero(), &mut out);
        Ok(self.push(vec![m, n], out, Op::MatMul { m, k, n }, vec![a, b]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let numel = super::check_shape(shape)?;
        if numel != self.value(a).numel() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {:?}", self.shape(a), shape),
            ));
        }
        let data = self.data(a).to_vec();
        Ok(self.push(shape.to_vec(), data, Op::Reshape, vec![a]))
    }

    /// Concatenate along axis 1 (channels).
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if base.len() < 2 {
            return Err(Error::shape("concat", "inputs need at least 2 dims"));
        }
        let mut axis_sizes = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len() || s[0] != base[0] || s[2..] != base[2..] {
                return Err(Error::shape(
                    "concat",
                    format!("{s:?} is incompatible with {base:?}"),
                ));
            }
            axis_sizes.push(s[1]);
        }
        let inner: usize = base[2..].iter().product();
        let total: usize = axis_sizes.iter().sum();
        let n = base[0];
        let mut out = Vec::with_capacity(n * total * inner);
        for b in 0..n {
            for (&p, &c) in parts.iter().zip(&axis_sizes) {
                let d = self.data(p);
                out.extend_from_slice(&d[b * c * inner..(b + 1) * c * inner]);
            }
        }
        let mut shape = base;
        shape[1] = total;
        Ok(self.push(shape, out, Op::Concat { axis_sizes }, parts.to_vec()))
    }

    /// Hash of every data-dependent branch taken by the recorded ops (ReLU
    /// masks, max-pool argmaxes). Two evaluations with the same signature
    /// lie on the same smooth piece of the function.
    pub fn kink_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu | Op::Prelu => {
                    let x = self.nodes[node.inputs[0].0].value.data();
                    for chunk in x.chunks(64) {
                        let mut bits = 0u64;
                        for (i, v) in chunk.iter().enumerate() {
                            if *v > T::zero() {
                                bits |= 1 << i;
                            }
                        }
                        bits.hash(&mut h);
                    }
                }
                Op::MaxPool(ctx) => ctx.argmax.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    /// Reverse-mode sweep from a scalar `loss`.
    ///
    /// Existing gradients are cleared first. Afterwards every leaf with
    /// `requires_grad` (and every node marked with [`Tape::retain_grad`])
    /// holds `d loss / d value`, summed over all uses.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let numel = self.value(loss).numel();
        if numel != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        for node in &mut self.nodes {
            node.value.set_grad(None);
        }
        let end = loss.0 + 1;
        let mut grads: Vec<Option<Vec<T>>> = (0..end).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut kept: Vec<(usize, Vec<T>)> = Vec::new();

        for i in (0..end).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.value.requires_grad() {
                continue;
            }
            let needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|v| self.nodes[v.0].value.requires_grad())
                .collect();
            if needs.iter().any(|&b| b) {
                let inputs: Vec<&Tensor<T>> =
                    node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                let input_grads = backward_op(&node.op, &inputs, &node.value, &g, &needs);
                for (v, ig) in node.inputs.iter().zip(input_grads) {
                    let Some(ig) = ig else { continue };
                    match &mut grads[v.0] {
                        Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, b)| *a = *a + *b),
                        slot @ None => *slot = Some(ig),
                    }
                }
            }
            if matches!(node.op, Op::Leaf) || node.retain_grad {
                kept.push((i, g));
            }
        }
        for (i, g) in kept {
            self.nodes[i].value.set_grad(Some(g));
        }
        for node in &mut self.nodes[..end] {
            if matches!(node.op, Op::Leaf) && node.value.requires_grad() && node.value.grad().is_none() {
                let n = node.value.numel();
                node.value.set_grad(Some(vec![T::zero(); n]));
            }
        }
        Ok(())
    }
}

fn backward_op<T: Scalar>(
    op: &Op<T>,
    inputs: &[&Tensor<T>],
    out: &Tensor<T>,
    g: &[T],
    needs: &[bool],
) -> Vec<Option<Vec<T>>> {
    let want = |i: usize| needs.get(i).copied().unwrap_or(false);
    match op {
        Op::Leaf => Vec::new(),
        Op::Add => vec![want(0).then(|| g.to_vec()), want(1).then(|| g.to_vec())],
        Op::Sub => vec![
            want(0).then(|| g.to_vec()),
            want(1).then(|| g.iter().map(|&v| -v).collect()),
        ],
        Op::Mul => {
            let (a, b) = (inputs[0].data(), inputs[1].data());
            vec![
                want(0).then(|| g.iter().zip(b).map(|(&g, &b)| g * b).collect()),
                want(1).then(|| g.iter().zip(a).map(|(&g, &a)| g * a).collect()),
            ]
        }
        Op::Scale(c) => vec![Some(g.iter().map(|&v| v * *c).collect())],
        Op::Sum => vec![Some(vec![g[0]; inputs[0].numel()])],
        Op::MatMul { m, k, n } => {
            let (m, k, n) = (*m, *k, *n);
            let da = want(0).then(|| {
                let mut da = vec![T::zero(); m * k];
                gemm(false, true, m, n, k, T::one(), g, inputs[1].data(), T::zero(), &mut da);
                da
            });
            let db = want(1).then(|| {
                let mut db = vec![T::zero(); k * n];
                gemm(true, false, k, m, n, T::one(), inputs[0].data(), g, T::zero(), &mut db);
                db
            });
            vec![da, db]
        }
        Op::Reshape => vec![Some(g.to_vec())],
        Op::Concat { axis_sizes } => {
            let shape = out.shape();
            let inner: usize = shape[2..].iter().product();
            let total: usize = axis_sizes.iter().sum();
            let mut offset = 0;
            axis_sizes
                .iter()
                .enumerate()
                .map(|(i, &c)| {
                    let r = want(i).then(|| {
                        let mut part = Vec::with_capacity(shape[0] * c * inner);
                        for b in 0..shape[0] {
                            let start = (b * total + offset) * inner;
                            part.extend_from_slice(&g[start..start + c * inner]);
                        }
                        part
                    });
                    offset += c;
                    r
                })
                .collect()
        }
        Op::Linear => nn::linear::linear_backward(inputs, g, needs),
        Op::Conv2d(geom) => nn::conv::conv2d_backward(geom, inputs, g, needs),
        Op::Relu => {
            let x = inputs[0].data();
            vec![Some(
                g.iter()
                    .zip(x)
                    .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                    .collect(),
            )]
        }
        Op::Prelu => nn::activation::prelu_backward(inputs, g, needs),
        Op::Norm(ctx) => ctx.backward(inputs, g, needs),
        Op::BatchNormEval(ctx) => ctx.backward(inputs, g, needs),
        Op::MaxPool(ctx) => vec![Some(ctx.backward(inputs[0].numel(), g))],
        Op::GlobalAvgPool => {
            let s = inputs[0].shape();
            let spatial: usize = s[2..].iter().product();
            let inv = T::one() / T::lit(spatial as f64);
            let mut dx = Vec::with_capacity(inputs[0].numel());
            for &gv in g {
                dx.extend(std::iter::repeat_n(gv * inv, spatial));
            }
            vec![Some(dx)]
        }
        Op::Dropout { mask } => vec![Some(match mask {
            Some(mask) => g.iter().zip(mask).map(|(&g, &m)| g * m).collect(),
            None => g.to_vec(),
        })],
        Op::SoftmaxCrossEntropy { probs, labels } => {
            let n = labels.len();
            let c = probs.len() / n;
            let scale = g[0] / T::lit(n as f64);
            let mut dx: Vec<T> = probs.iter().map(|&p| p * scale).collect();
            for (row, &label) in labels.iter().enumerate() {
                dx[row * c + label] = dx[row * c + label] - scale;
            }
            vec![Some(dx)]
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(tape: &mut Tape<f64>, shape: &[usize], data: &[f64]) -> Var {
        tape.leaf(
            Tensor::from_vec(shape, data.to_vec())
                .unwrap()
                .with_requires_grad(true),
        )
    }

    #[test]
    fn elementwise_add() {
        let mut t = Tape::<f64>::new();
        let a = leaf(&mut t, &[2], &[1.0, 2.0]);
        let b = leaf(&mut t, &[2], &[3.0, 4.0]);
        let c = t.forward(&Primitive::Add, &[a, b]).unwrap();
        assert_eq!(t.value(c).data(), &[4.0, 6.0]);
    }

    #[test]
    fn matmul_shape_rule_and_mismatch() {
        let mut t = Tape::<f64>::new();
        let a = leaf(&mut t, &[2, 3], &[0.0; 6]);
        let b = leaf(&mut t, &[3, 4], &[0.0; 12]);
        let c = t.forward(&Primitive::MatMul, &[a, b]).unwrap();
        assert_eq!(t.shape(c), &[2, 4]);
        let bad = leaf(&mut t, &[2, 4], &[0.0; 8]);
        let err = t.forward(&Primitive::MatMul, &[a, bad]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]") && msg.contains("[2, 4]"), "{msg}");
    }

    #[test]
    fn square_sum_gradient() {
        let mut t = Tape::<f64>::new();
        let x = leaf(&mut t, &[3], &[1.0, 2.0, 3.0]);
        let sq = t.mul(x, x).unwrap();
        let loss = t.sum(sq);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn relu_blocks_negative_side() {
        let mut t = Tape::<f64>::new();
        let x = leaf(&mut t, &[1], &[-1.0]);
        let r = t.relu(x);
        let loss = t.sum(r);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[0.0]);
    }

    #[test]
    fn fan_out_accumulates_branch_gradients() {
        // y = 3x + x*x, dy/dx = 3 + 2x
        let mut t = Tape::<f64>::new();
        let x = leaf(&mut t, &[2], &[1.0, -2.0]);
        let f = t.scale(x, 3.0);
        let g = t.mul(x, x).unwrap();
        let y = t.add(f, g).unwrap();
        let loss = t.sum(y);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[5.0, -1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::<f64>::new();
        let x = leaf(&mut t, &[2], &[1.0, 2.0]);
        let y = t.scale(x, 2.0);
        assert!(matches!(t.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_twice_does_not_double_count() {
        let mut t = Tape::<f64>::new();
        let x = leaf(&mut t, &[1], &[2.0]);
        let y = t.mul(x, x).unwrap();
        let loss = t.sum(y);
        t.backward(loss).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[4.0]);
    }

    #[test]
    fn unused_leaf_gets_zero_gradient() {
        let mut t = Tape::<f64>::new();
        let x = leaf(&mut t, &[2], &[1.0, 2.0]);
        let unused = leaf(&mut t, &[3], &[1.0, 2.0, 3.0]);
        let loss = t.sum(x);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(unused).unwrap(), &[0.0; 3]);
    }

    #[test]
    fn concat_routes_gradients_back() {
        let mut t = Tape::<f64>::new();
        let a = leaf(&mut t, &[2, 1, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = leaf(&mut t, &[2, 2, 2], &[5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = t.concat(&[a, b]).unwrap();
        assert_eq!(t.shape(c), &[2, 3, 2]);
        assert_eq!(
            t.value(c).data(),
            &[1.0, 2.0, 5.0, 6.0, 7.0, 8.0, 3.0, 4.0, 9.0, 10.0, 11.0, 12.0]
        );
        let w = leaf(&mut t, &[2, 3, 2], &(0..12).map(f64::from).collect::<Vec<_>>());
        let p = t.mul(c, w).unwrap();
        let loss = t.sum(p);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(a).unwrap(), &[0.0, 1.0, 6.0, 7.0]);
        assert_eq!(t.grad(b).unwrap(), &[2.0, 3.0, 4.0, 5.0, 8.0, 9.0, 10.0, 11.0]);
    }

    #[test]
    fn forward_is_bitwise_repeatable() {
        let run = || {
            let mut t = Tape::<f32>::new();
            let a = t.leaf(Tensor::from_vec(&[2, 3], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap());
            let b = t.leaf(Tensor::from_vec(&[3, 2], vec![1.5, -0.5, 0.25, 2.0, -1.0, 0.75]).unwrap());
            let c = t.matmul(a, b).unwrap();
            let r = t.relu(c);
            t.value(r).data().to_vec()
        };
        let (x, y) = (run(), run());
        assert_eq!(
            x.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            y.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}
