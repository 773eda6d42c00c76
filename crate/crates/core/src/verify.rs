//! Finite-difference verification of every differentiable primitive.
//!
//! Each instance draws small random shapes and inputs, reduces the op output
//! with a fixed random projection `sum(y ∘ R)` and checks the gradient with
//! respect to every differentiable input.

use rand::RngCore;

use crate::error::Result;
use crate::nn::{Mode, BN_EPSILON, LN_EPSILON};
use crate::rng::CounterRng;
use crate::tensor::{finite_difference_check, Fill, GradCheck, Tape, Tensor, Var};

/// Relative-error bound every primitive must meet.
pub const GRADCHECK_TOLERANCE: f64 = 1e-6;
/// Central-difference step.
pub const GRADCHECK_EPS: f64 = 1e-5;

type Build = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

struct Case {
    inputs: Vec<Tensor<f64>>,
    differentiable: Vec<bool>,
    build: Build,
}

/// Worst-case result for one primitive across all instances.
#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub op: &'static str,
    pub instances: usize,
    pub result: GradCheck,
}

impl SuiteEntry {
    pub fn passes(&self) -> bool {
        self.result.passes(GRADCHECK_TOLERANCE)
    }
}

/// Names of the primitives covered by [`run_gradcheck_suite`], in report order.
pub const SUITE_OPS: &[&str] = &[
    "add",
    "mul",
    "matmul",
    "concat",
    "linear",
    "conv2d",
    "relu",
    "prelu",
    "batchnorm2d",
    "layernorm",
    "max_pool",
    "global_avg_pool",
    "dropout_eval",
    "dropout_train",
    "softmax_cross_entropy",
];

fn between(rng: &mut CounterRng, lo: usize, hi: usize) -> usize {
    lo + rng.below((hi - lo + 1) as u64) as usize
}

fn uniform(shape: &[usize], low: f64, high: f64, rng: &mut CounterRng) -> Result<Tensor<f64>> {
    Tensor::create(shape, Fill::Uniform { low, high }, rng)
}

/// Projection weights with magnitude in [0.5, 1.5] and random sign.
fn projection(shape: &[usize], rng: &mut CounterRng) -> Result<Tensor<f64>> {
    let mut r = uniform(shape, 0.5, 1.5, rng)?;
    for v in r.data_mut() {
        if rng.next_f64() < 0.5 {
            *v = -*v;
        }
    }
    Ok(r)
}

fn case(op: &str, rng: &mut CounterRng) -> Result<Case> {
    let all = |n: usize| vec![true; n];
    Ok(match op {
        "add" | "mul" => {
            let shape = [between(rng, 1, 4), between(rng, 1, 5)];
            let mul = op == "mul";
            Case {
                inputs: vec![uniform(&shape, -2.0, 2.0, rng)?, uniform(&shape, -2.0, 2.0, rng)?],
                differentiable: all(2),
                build: Box::new(move |t, v| if mul { t.mul(v[0], v[1]) } else { t.add(v[0], v[1]) }),
            }
        }
        "matmul" => {
            let (m, k, n) = (between(rng, 1, 4), between(rng, 1, 5), between(rng, 1, 4));
            Case {
                inputs: vec![uniform(&[m, k], -1.0, 1.0, rng)?, uniform(&[k, n], -1.0, 1.0, rng)?],
                differentiable: all(2),
                build: Box::new(|t, v| t.matmul(v[0], v[1])),
            }
        }
        "concat" => {
            let n = between(rng, 1, 3);
            let (a, b) = (between(rng, 1, 4), between(rng, 1, 4));
            Case {
                inputs: vec![uniform(&[n, a], -1.0, 1.0, rng)?, uniform(&[n, b], -1.0, 1.0, rng)?],
                differentiable: all(2),
                build: Box::new(|t, v| t.concat(&[v[0], v[1]])),
            }
        }
        "linear" => {
            let (n, i, o) = (between(rng, 1, 4), between(rng, 1, 6), between(rng, 1, 5));
            Case {
                inputs: vec![
                    uniform(&[n, i], -1.0, 1.0, rng)?,
                    uniform(&[i, o], -1.0, 1.0, rng)?,
                    uniform(&[o], -1.0, 1.0, rng)?,
                ],
                differentiable: all(3),
                build: Box::new(|t, v| t.linear(v[0], v[1], v[2])),
            }
        }
        "conv2d" => {
            let (n, c, o) = (between(rng, 1, 2), between(rng, 1, 3), between(rng, 1, 3));
            let k = if rng.below(2) == 0 { 1 } else { 3 };
            let stride = between(rng, 1, 2);
            let pad = if k == 1 { 0 } else { between(rng, 0, 1) };
            let (h, w) = (between(rng, 3, 6), between(rng, 3, 6));
            Case {
                inputs: vec![
                    uniform(&[n, c, h, w], -1.0, 1.0, rng)?,
                    uniform(&[o, c, k, k], -1.0, 1.0, rng)?,
                    uniform(&[o], -1.0, 1.0, rng)?,
                ],
                differentiable: all(3),
                build: Box::new(move |t, v| t.conv2d(v[0], v[1], Some(v[2]), stride, pad)),
            }
        }
        "relu" => {
            let shape = [between(rng, 1, 4), between(rng, 1, 8)];
            Case {
                inputs: vec![uniform(&shape, -1.0, 1.0, rng)?],
                differentiable: all(1),
                build: Box::new(|t, v| Ok(t.relu(v[0]))),
            }
        }
        "prelu" => {
            let (n, c, s) = (between(rng, 1, 3), between(rng, 1, 4), between(rng, 1, 3));
            Case {
                inputs: vec![uniform(&[n, c, s, s], -1.0, 1.0, rng)?, uniform(&[c], 0.05, 0.5, rng)?],
                differentiable: all(2),
                build: Box::new(|t, v| t.prelu(v[0], v[1])),
            }
        }
        "batchnorm2d" => {
            let (n, c, s) = (between(rng, 2, 3), between(rng, 1, 3), between(rng, 2, 3));
            Case {
                inputs: vec![
                    uniform(&[n, c, s, s], -2.0, 2.0, rng)?,
                    uniform(&[c], 0.5, 1.5, rng)?,
                    uniform(&[c], -0.5, 0.5, rng)?,
                ],
                differentiable: all(3),
                build: Box::new(|t, v| Ok(t.batch_norm_train(v[0], v[1], v[2], BN_EPSILON)?.0)),
            }
        }
        "layernorm" => {
            let (n, d) = (between(rng, 1, 4), between(rng, 4, 8));
            Case {
                inputs: vec![
                    uniform(&[n, d], -2.0, 2.0, rng)?,
                    uniform(&[d], 0.5, 1.5, rng)?,
                    uniform(&[d], -0.5, 0.5, rng)?,
                ],
                differentiable: all(3),
                build: Box::new(|t, v| t.layer_norm(v[0], v[1], v[2], LN_EPSILON)),
            }
        }
        "max_pool" => {
            let k = between(rng, 2, 3);
            let stride = between(rng, 1, 2);
            let pad = between(rng, 0, 1);
            let (n, c, h, w) = (between(rng, 1, 2), between(rng, 1, 2), between(rng, 3, 6), between(rng, 3, 6));
            Case {
                inputs: vec![uniform(&[n, c, h, w], -1.0, 1.0, rng)?],
                differentiable: all(1),
                build: Box::new(move |t, v| t.max_pool(v[0], k, stride, pad)),
            }
        }
        "global_avg_pool" => {
            let (n, c, h, w) = (between(rng, 1, 3), between(rng, 1, 3), between(rng, 1, 4), between(rng, 1, 4));
            Case {
                inputs: vec![uniform(&[n, c, h, w], -1.0, 1.0, rng)?],
                differentiable: all(1),
                build: Box::new(|t, v| t.global_avg_pool(v[0])),
            }
        }
        "dropout_eval" | "dropout_train" => {
            let shape = [between(rng, 1, 4), between(rng, 1, 8)];
            let mode = if op == "dropout_eval" { Mode::Eval } else { Mode::Train };
            let mask_key = rng.next_u64();
            Case {
                inputs: vec![uniform(&shape, -1.0, 1.0, rng)?],
                differentiable: all(1),
                build: Box::new(move |t, v| t.dropout(v[0], 0.3, &mut CounterRng::new(mask_key), mode)),
            }
        }
        "softmax_cross_entropy" => {
            let (n, c) = (between(rng, 1, 4), between(rng, 2, 6));
            let labels: Vec<usize> = (0..n).map(|_| rng.below(c as u64) as usize).collect();
            Case {
                inputs: vec![uniform(&[n, c], -2.0, 2.0, rng)?],
                differentiable: all(1),
                build: Box::new(move |t, v| t.softmax_cross_entropy(v[0], &labels)),
            }
        }
        other => unreachable!("no gradcheck generator for {other}"),
    })
}

fn check_case(c: &Case, rng: &mut CounterRng, eps: f64) -> Result<GradCheck> {
    let out_shape = {
        let mut t = Tape::new();
        let vars: Vec<Var> = c.inputs.iter().map(|x| t.leaf(x.clone())).collect();
        let y = (c.build)(&mut t, &vars)?;
        t.shape(y).to_vec()
    };
    let r = projection(&out_shape, rng)?;
    let mut total = GradCheck {
        max_relative_error: 0.0,
        checked: 0,
        skipped: 0,
    };
    for (j, _) in c.differentiable.iter().enumerate().filter(|(_, &d)| d) {
        let f = |t: &mut Tape<f64>, xv: Var| {
            let vars: Vec<Var> = c
                .inputs
                .iter()
                .enumerate()
                .map(|(i, x)| if i == j { xv } else { t.leaf(x.clone()) })
                .collect();
            let y = (c.build)(t, &vars)?;
            let rv = t.leaf(r.clone());
            let weighted = t.mul(y, rv)?;
            Ok(t.sum(weighted))
        };
        total = total.merge(finite_difference_check(f, &c.inputs[j], eps)?);
    }
    Ok(total)
}

/// Check one primitive over `instances` random instances.
pub fn check_primitive(op: &'static str, instances: usize, seed: u64) -> Result<SuiteEntry> {
    let mut rng = CounterRng::substream(seed, op);
    let mut result = GradCheck {
        max_relative_error: 0.0,
        checked: 0,
        skipped: 0,
    };
    for _ in 0..instances {
        let c = case(op, &mut rng)?;
        result = result.merge(check_case(&c, &mut rng, GRADCHECK_EPS)?);
    }
    Ok(SuiteEntry { op, instances, result })
}

/// Run the full suite, one entry per primitive in [`SUITE_OPS`] order.
pub fn run_gradcheck_suite(instances: usize, seed: u64) -> Result<Vec<SuiteEntry>> {
    SUITE_OPS.iter().map(|op| check_primitive(op, instances, seed)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_primitive_passes_a_short_run() {
        for entry in run_gradcheck_suite(5, 11).unwrap() {
            assert!(entry.passes(), "{entry:?}");
            assert!(entry.result.checked > 0, "{entry:?}");
        }
    }

    #[test]
    fn suite_is_reproducible() {
        let a = check_primitive("conv2d", 3, 5).unwrap();
        let b = check_primitive("conv2d", 3, 5).unwrap();
        assert_eq!(a.result, b.result);
    }
}
