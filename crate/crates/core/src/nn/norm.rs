use serde::{Deserialize, Serialize};

use super::activation::channel_layout;
use crate::error::{Error, Result};
use crate::tensor::{Op, Scalar, Tape, Tensor, Var};

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;
pub const LN_EPSILON: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug)]
enum Grouping {
    /// Batch norm: statistics per channel over batch and spatial positions.
    Channel { outer: usize, c: usize, inner: usize },
    /// Layer norm: statistics per row over the last axis.
    Row { rows: usize, d: usize },
}

impl Grouping {
    fn groups(&self) -> usize {
        match *self {
            Grouping::Channel { c, .. } => c,
            Grouping::Row { rows, .. } => rows,
        }
    }

    fn group_size(&self) -> usize {
        match *self {
            Grouping::Channel { outer, inner, .. } => outer * inner,
            Grouping::Row { d, .. } => d,
        }
    }

    /// Calls `f(group, element_index, affine_index)` for every element.
    fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        match *self {
            Grouping::Channel { outer, c, inner } => {
                for n in 0..outer {
                    for ch in 0..c {
                        let base = (n * c + ch) * inner;
                        for i in base..base + inner {
                            f(ch, i, ch);
                        }
                    }
                }
            }
            Grouping::Row { rows, d } => {
                for r in 0..rows {
                    for j in 0..d {
                        f(r, r * d + j, j);
                    }
                }
            }
        }
    }
}

/// Saved state of a standardize-then-affine op.
pub(crate) struct NormContext<T> {
    grouping: Grouping,
    xhat: Vec<T>,
    inv_std: Vec<T>,
}

impl<T> NormContext<T> {
    pub(crate) fn is_layer_norm(&self) -> bool {
        matches!(self.grouping, Grouping::Row { .. })
    }
}

impl<T: Scalar> NormContext<T> {
    pub(crate) fn backward(&self, inputs: &[&Tensor<T>], g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let gamma = inputs[1].data();
        if let Grouping::Channel { c, inner: 1, .. } = self.grouping {
            return self.columns_backward(c, gamma, g, needs);
        }
        let groups = self.grouping.groups();
        let m = T::lit(self.grouping.group_size() as f64);
        let mut sum_dxhat = vec![T::zero(); groups];
        let mut sum_dxhat_xhat = vec![T::zero(); groups];
        let mut dgamma = needs[1].then(|| vec![T::zero(); gamma.len()]);
        let mut dbeta = needs[2].then(|| vec![T::zero(); gamma.len()]);
        self.grouping.for_each(|grp, i, p| {
            let dxhat = g[i] * gamma[p];
            sum_dxhat[grp] = sum_dxhat[grp] + dxhat;
            sum_dxhat_xhat[grp] = sum_dxhat_xhat[grp] + dxhat * self.xhat[i];
            if let Some(dg) = dgamma.as_mut() {
                dg[p] = dg[p] + g[i] * self.xhat[i];
            }
            if let Some(db) = dbeta.as_mut() {
                db[p] = db[p] + g[i];
            }
        });
        let dx = needs[0].then(|| {
            let mut dx = vec![T::zero(); g.len()];
            self.grouping.for_each(|grp, i, p| {
                let dxhat = g[i] * gamma[p];
                dx[i] = self.inv_std[grp] / m
                    * (m * dxhat - sum_dxhat[grp] - self.xhat[i] * sum_dxhat_xhat[grp]);
            });
            dx
        });
        vec![dx, dgamma, dbeta]
    }
}

impl<T: Scalar> NormContext<T> {
    /// Batch norm of an `N×C` input, where each row holds one value per
    /// channel. With `s1 = Σg` and `s2 = Σg·x̂` per channel,
    /// `dx = γ·inv_std/m · (m·g − s1 − x̂·s2)`, `dγ = s2` and `dβ = s1`.
    fn columns_backward(&self, c: usize, gamma: &[T], g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let mut s1 = vec![T::zero(); c];
        let mut s2 = vec![T::zero(); c];
        for (gr, hr) in g.chunks_exact(c).zip(self.xhat.chunks_exact(c)) {
            for (((a, b), &gv), &h) in s1.iter_mut().zip(s2.iter_mut()).zip(gr).zip(hr) {
                *a = *a + gv;
                *b = *b + gv * h;
            }
        }
        let dx = needs[0].then(|| {
            let m = T::lit((g.len() / c) as f64);
            let scale: Vec<T> = gamma.iter().zip(&self.inv_std).map(|(&ga, &is)| ga * is / m).collect();
            let mut dx = Vec::with_capacity(g.len());
            for (gr, hr) in g.chunks_exact(c).zip(self.xhat.chunks_exact(c)) {
                dx.extend(
                    gr.iter()
                        .zip(hr)
                        .zip(&scale)
                        .zip(s1.iter().zip(&s2))
                        .map(|(((&gv, &h), &k), (&a, &b))| k * (m * gv - a - h * b)),
                );
            }
            dx
        });
        vec![dx, needs[1].then(|| s2.clone()), needs[2].then(|| s1.clone())]
    }
}

type ColumnStats<T> = (Vec<T>, Vec<T>, Vec<T>, Vec<T>, Vec<T>);

/// Train-mode batch norm of an `N×C` input: mean, biased variance,
/// inverse standard deviation, x̂ and the affine output.
fn columns_forward<T: Scalar>(x: &[T], c: usize, gamma: &[T], beta: &[T], eps: T) -> ColumnStats<T> {
    let m = T::lit((x.len() / c) as f64);
    let mut mean = vec![T::zero(); c];
    for row in x.chunks_exact(c) {
        mean.iter_mut().zip(row).for_each(|(s, &v)| *s = *s + v);
    }
    mean.iter_mut().for_each(|s| *s = *s / m);
    let mut var = vec![T::zero(); c];
    for row in x.chunks_exact(c) {
        var.iter_mut().zip(row).zip(&mean).for_each(|((s, &v), &mu)| *s = *s + (v - mu) * (v - mu));
    }
    var.iter_mut().for_each(|s| *s = *s / m);
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = Vec::with_capacity(x.len());
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks_exact(c) {
        let start = xhat.len();
        xhat.extend(row.iter().zip(&mean).zip(&inv_std).map(|((&v, &mu), &is)| (v - mu) * is));
        out.extend(xhat[start..].iter().zip(gamma).zip(beta).map(|((&h, &ga), &b)| ga * h + b));
    }
    (mean, var, inv_std, xhat, out)
}

/// Eval-mode batch norm: a per-channel affine map with frozen statistics.
pub(crate) struct FrozenNorm<T> {
    mean: Vec<T>,
    inv_std: Vec<T>,
}

impl<T: Scalar> FrozenNorm<T> {
    pub(crate) fn backward(&self, inputs: &[&Tensor<T>], g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let (x, gamma) = (inputs[0], inputs[1].data());
        let (outer, c, inner) = channel_layout(x.shape());
        let grouping = Grouping::Channel { outer, c, inner };
        let mut dx = needs[0].then(|| vec![T::zero(); g.len()]);
        let mut dgamma = needs[1].then(|| vec![T::zero(); c]);
        let mut dbeta = needs[2].then(|| vec![T::zero(); c]);
        let xd = x.data();
        grouping.for_each(|ch, i, _| {
            if let Some(dx) = dx.as_mut() {
                dx[i] = g[i] * gamma[ch] * self.inv_std[ch];
            }
            if let Some(dg) = dgamma.as_mut() {
                dg[ch] = dg[ch] + g[i] * (xd[i] - self.mean[ch]) * self.inv_std[ch];
            }
            if let Some(db) = dbeta.as_mut() {
                db[ch] = db[ch] + g[i];
            }
        });
        vec![dx, dgamma, dbeta]
    }
}

/// Per-group batch statistics from a train-mode batch-norm call.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance of the batch.
    pub var: Vec<T>,
    pub count: usize,
}

impl<T: Scalar> Tape<T> {
    #[allow(clippy::too_many_arguments)]
    fn normalize(
        &mut self,
        op: &'static str,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        grouping: Grouping,
        affine_len: usize,
    ) -> Result<(Var, BatchStats<T>)> {
        if self.shape(gamma) != [affine_len] || self.shape(beta) != [affine_len] {
            return Err(Error::shape(
                op,
                format!(
                    "gamma {:?} / beta {:?} must have length {affine_len}",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        if eps <= 0.0 {
            return Err(Error::Config(format!("{op}: epsilon must be > 0")));
        }
        let xd = self.data(x);
        let (gd, bd) = (self.data(gamma), self.data(beta));
        if let Grouping::Channel { c, inner: 1, .. } = grouping {
            let (mean, var, inv_std, xhat, out) = columns_forward(xd, c, gd, bd, T::lit(eps));
            let shape = self.shape(x).to_vec();
            let ctx = NormContext {
                grouping,
                xhat,
                inv_std,
            };
            let stats = BatchStats {
                mean,
                var,
                count: grouping.group_size(),
            };
            return Ok((self.push(shape, out, Op::Norm(ctx), vec![x, gamma, beta]), stats));
        }
        let groups = grouping.groups();
        let m = T::lit(grouping.group_size() as f64);
        let mut mean = vec![T::zero(); groups];
        grouping.for_each(|grp, i, _| mean[grp] = mean[grp] + xd[i]);
        mean.iter_mut().for_each(|v| *v = *v / m);
        let mut var = vec![T::zero(); groups];
        grouping.for_each(|grp, i, _| {
            let d = xd[i] - mean[grp];
            var[grp] = var[grp] + d * d;
        });
        var.iter_mut().for_each(|v| *v = *v / m);
        let eps_t = T::lit(eps);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps_t).sqrt()).collect();
        let mut xhat = vec![T::zero(); xd.len()];
        grouping.for_each(|grp, i, _| xhat[i] = (xd[i] - mean[grp]) * inv_std[grp]);
        let mut out = vec![T::zero(); xd.len()];
        grouping.for_each(|_, i, p| out[i] = gd[p] * xhat[i] + bd[p]);
        let shape = self.shape(x).to_vec();
        let ctx = NormContext {
            grouping,
            xhat,
            inv_std,
        };
        let stats = BatchStats {
            mean,
            var,
            count: grouping.group_size(),
        };
        Ok((self.push(shape, out, Op::Norm(ctx), vec![x, gamma, beta]), stats))
    }

    /// Train-mode batch norm over axis 1 of `N×C` or `N×C×H×W` input.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats<T>)> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::shape("batchnorm", format!("need N×C[×...] input, got {shape:?}")));
        }
        let (outer, c, inner) = channel_layout(&shape);
        if outer * inner < 2 {
            return Err(Error::DegenerateBatch {
                op: "batchnorm",
                detail: format!("{} element(s) per channel in train mode", outer * inner),
            });
        }
        self.normalize("batchnorm", x, gamma, beta, eps, Grouping::Channel { outer, c, inner }, c)
    }

    /// Eval-mode batch norm with the given running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: f64,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::shape("batchnorm", format!("need N×C[×...] input, got {shape:?}")));
        }
        let (outer, c, inner) = channel_layout(&shape);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] || running_mean.len() != c || running_var.len() != c {
            return Err(Error::shape("batchnorm", format!("affine/statistics length must be {c}")));
        }
        let eps_t = T::lit(eps);
        let inv_std: Vec<T> = running_var.iter().map(|&v| T::one() / (v + eps_t).sqrt()).collect();
        let (xd, gd, bd) = (self.data(x), self.data(gamma), self.data(beta));
        let mut out = vec![T::zero(); xd.len()];
        Grouping::Channel { outer, c, inner }.for_each(|ch, i, _| {
            out[i] = gd[ch] * (xd[i] - running_mean[ch]) * inv_std[ch] + bd[ch];
        });
        let ctx = FrozenNorm {
            mean: running_mean.to_vec(),
            inv_std,
        };
        Ok(self.push(shape, out, Op::BatchNormEval(ctx), vec![x, gamma, beta]))
    }

    /// Layer norm over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap_or(&0);
        if d < 2 {
            return Err(Error::shape("layernorm", format!("need at least 2 features, got {shape:?}")));
        }
        let rows = self.value(x).numel() / d;
        self.normalize("layernorm", x, gamma, beta, eps, Grouping::Row { rows, d }, d)
            .map(|(v, _)| v)
    }
}

/// Batch norm parameters plus running statistics.
#[derive(Clone, Debug)]
pub struct BatchNormState<T: Scalar> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: f64,
    pub epsilon: f64,
    pub mode: Mode,
}

impl<T: Scalar> BatchNormState<T> {
    pub fn new(channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: Tensor::full(&[channels], 1.0)?,
            beta: Tensor::zeros(&[channels])?,
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: BN_MOMENTUM,
            epsilon: BN_EPSILON,
            mode: Mode::Train,
        })
    }

    /// Normalize `x` using `gamma`/`beta` already placed on the tape. In
    /// train mode the running statistics are updated as
    /// `running = momentum * running + (1 - momentum) * batch`, with the
    /// unbiased batch variance.
    pub fn forward(&mut self, tape: &mut Tape<T>, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        match self.mode {
            Mode::Train => {
                let (y, stats) = tape.batch_norm_train(x, gamma, beta, self.epsilon)?;
                self.update_running(&stats);
                Ok(y)
            }
            Mode::Eval => tape.batch_norm_eval(x, gamma, beta, &self.running_mean, &self.running_var, self.epsilon),
        }
    }

    pub fn update_running(&mut self, stats: &BatchStats<T>) {
        let mom = T::lit(self.momentum);
        let rest = T::one() - mom;
        let bessel = T::lit(stats.count as f64 / (stats.count as f64 - 1.0));
        for (r, &m) in self.running_mean.iter_mut().zip(&stats.mean) {
            *r = mom * *r + rest * m;
        }
        for (r, &v) in self.running_var.iter_mut().zip(&stats.var) {
            *r = mom * *r + rest * v * bessel;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::CounterRng;
    use crate::tensor::Fill;

    fn leaf(t: &mut Tape<f64>, shape: &[usize], data: Vec<f64>) -> Var {
        t.leaf(Tensor::from_vec(shape, data).unwrap())
    }

    #[test]
    fn standardized_input_passes_through() {
        // Each channel already has mean 0 and unit population variance.
        let xs = vec![1.0, 1.0, -1.0, 1.0, 1.0, -1.0, -1.0, -1.0];
        let mut t = Tape::new();
        let x = leaf(&mut t, &[4, 2], xs.clone());
        let g = leaf(&mut t, &[2], vec![1.0, 1.0]);
        let b = leaf(&mut t, &[2], vec![0.0, 0.0]);
        let (y, _) = t.batch_norm_train(x, g, b, BN_EPSILON).unwrap();
        for (a, e) in t.value(y).data().iter().zip(&xs) {
            assert!((a - e).abs() < 1e-5);
        }
    }

    #[test]
    fn constant_channel_maps_to_beta() {
        let mut t = Tape::new();
        let x = leaf(&mut t, &[2, 1, 2, 2], vec![3.0; 8]);
        let g = leaf(&mut t, &[1], vec![2.0]);
        let b = leaf(&mut t, &[1], vec![0.7]);
        let (y, _) = t.batch_norm_train(x, g, b, BN_EPSILON).unwrap();
        assert!(t.value(y).data().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn single_element_per_channel_is_degenerate() {
        let mut t = Tape::new();
        let x = leaf(&mut t, &[1, 3], vec![1.0, 2.0, 3.0]);
        let g = leaf(&mut t, &[3], vec![1.0; 3]);
        let b = leaf(&mut t, &[3], vec![0.0; 3]);
        assert!(matches!(t.batch_norm_train(x, g, b, BN_EPSILON), Err(Error::DegenerateBatch { .. })));
    }

    #[test]
    fn train_output_is_standardized_per_channel() {
        let mut rng = CounterRng::new(3);
        let xs = Tensor::<f64>::create(&[8, 3, 4, 4], Fill::Uniform { low: -3.0, high: 5.0 }, &mut rng).unwrap();
        let mut t = Tape::new();
        let x = t.leaf(xs);
        let g = leaf(&mut t, &[3], vec![1.0; 3]);
        let b = leaf(&mut t, &[3], vec![0.0; 3]);
        let (y, _) = t.batch_norm_train(x, g, b, BN_EPSILON).unwrap();
        let yd = t.value(y).data();
        for ch in 0..3 {
            let vals: Vec<f64> = (0..8).flat_map(|n| (0..16).map(move |s| (n * 3 + ch) * 16 + s)).map(|i| yd[i]).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn layer_norm_rows() {
        let mut t = Tape::new();
        let x = leaf(&mut t, &[2, 4], vec![1.0, 1.0, 1.0, 1.0, -1.0, 1.0, -1.0, 1.0]);
        let g = leaf(&mut t, &[4], vec![1.0; 4]);
        let b = leaf(&mut t, &[4], vec![0.0; 4]);
        let y = t.layer_norm(x, g, b, LN_EPSILON).unwrap();
        let yd = t.value(y).data();
        assert_eq!(&yd[..4], &[0.0; 4]);
        for (a, e) in yd[4..].iter().zip([-1.0, 1.0, -1.0, 1.0]) {
            assert!((a - e).abs() < 1e-5);
        }
        let x2 = leaf(&mut t, &[1, 2], vec![-1.0, 1.0]);
        let g2 = leaf(&mut t, &[2], vec![1.0; 2]);
        let b2 = leaf(&mut t, &[2], vec![0.0; 2]);
        let y2 = t.layer_norm(x2, g2, b2, LN_EPSILON).unwrap();
        for (a, e) in t.value(y2).data().iter().zip([-1.0, 1.0]) {
            assert!((a - e).abs() < 1e-5);
        }
    }

    #[test]
    fn layer_norm_output_is_standardized_per_row() {
        let mut rng = CounterRng::new(8);
        let xs = Tensor::<f64>::create(&[5, 17], Fill::Uniform { low: -2.0, high: 9.0 }, &mut rng).unwrap();
        let mut t = Tape::new();
        let x = t.leaf(xs);
        let g = leaf(&mut t, &[17], vec![1.0; 17]);
        let b = leaf(&mut t, &[17], vec![0.0; 17]);
        let y = t.layer_norm(x, g, b, LN_EPSILON).unwrap();
        for row in t.value(y).data().chunks(17) {
            let mean = row.iter().sum::<f64>() / 17.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 17.0;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn running_stats_update_and_eval_uses_them() {
        let mut state = BatchNormState::<f64>::new(1).unwrap();
        let mut t = Tape::new();
        let x = leaf(&mut t, &[4, 1], vec![1.0, 2.0, 3.0, 4.0]);
        let g = t.leaf(state.gamma.clone());
        let b = t.leaf(state.beta.clone());
        state.forward(&mut t, x, g, b).unwrap();
        // batch mean 2.5, unbiased var 5/3
        assert!((state.running_mean[0] - 0.25).abs() < 1e-12);
        assert!((state.running_var[0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-12);
        assert!(state.running_var.iter().all(|&v| v >= 0.0));

        state.mode = Mode::Eval;
        let before = (state.running_mean.clone(), state.running_var.clone());
        let y1 = state.forward(&mut t, x, g, b).unwrap();
        let y2 = state.forward(&mut t, x, g, b).unwrap();
        assert_eq!(t.value(y1).data(), t.value(y2).data());
        assert_eq!(before, (state.running_mean.clone(), state.running_var.clone()));
        let expect = (1.0 - state.running_mean[0]) / (state.running_var[0] + BN_EPSILON).sqrt();
        assert!((t.value(y1).data()[0] - expect).abs() < 1e-12);
    }
}
