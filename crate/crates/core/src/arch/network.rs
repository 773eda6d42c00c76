use std::collections::HashMap;

use super::{propagate_shapes, validate, ArchGraph, NodeKind, PoolOp};
use crate::error::{Error, Result};
use crate::nn::{BatchNormState, Mode, PReLUState, LN_EPSILON};
use crate::rng::CounterRng;
use crate::tensor::{Fill, Scalar, Tape, Tensor, Var};

enum NodeState<T: Scalar> {
    Plain,
    Conv { weight: Tensor<T> },
    Linear { weight: Tensor<T>, bias: Tensor<T> },
    Bn(BatchNormState<T>),
    Ln { gamma: Tensor<T>, beta: Tensor<T> },
    Prelu(PReLUState<T>),
}

/// A trainable parameter with its checkpoint name.
pub struct ParamRef<'a, T: Scalar> {
    pub name: String,
    pub tensor: &'a Tensor<T>,
    /// Conv and linear weights take weight decay; biases, norm affines and
    /// PReLU slopes do not.
    pub decay: bool,
}

/// Result of one forward pass.
pub struct ForwardPass {
    pub output: Var,
    /// Parameter leaves in [`Network::params`] order.
    pub params: Vec<Var>,
    vars: HashMap<usize, Var>,
}

impl ForwardPass {
    /// Tape variable holding the output of graph node `id`.
    pub fn node(&self, id: usize) -> Option<Var> {
        self.vars.get(&id).copied()
    }
}

/// An [`ArchGraph`] instantiated with parameters and normalization state.
pub struct Network<T: Scalar> {
    graph: ArchGraph,
    states: Vec<NodeState<T>>,
}

impl<T: Scalar> Network<T> {
    /// Instantiate `graph` with He-normal conv/linear weights drawn from
    /// per-node children of `weights`, zero biases, unit norm scales and
    /// PReLU slopes of 0.25.
    pub fn new(graph: ArchGraph, weights: &CounterRng) -> Result<Self> {
        if let Some(v) = validate(&graph).first() {
            return Err(Error::Contract(format!("cannot instantiate an invalid graph: {v}")));
        }
        let shapes = propagate_shapes(&graph)?;
        let mut states = Vec::with_capacity(graph.nodes.len());
        for node in &graph.nodes {
            let input: &[usize] = match node.inputs.first() {
                Some(i) => &shapes[i],
                None => &graph.input_shape,
            };
            let mut rng = weights.child(node.id as u64);
            let state = match node.kind {
                NodeKind::Conv {
                    out_channels, kernel, ..
                } => {
                    let fan_in = input[0] * kernel * kernel;
                    NodeState::Conv {
                        weight: Tensor::create(&[out_channels, input[0], kernel, kernel], Fill::HeNormal { fan_in }, &mut rng)?,
                    }
                }
                NodeKind::Linear { out_features } | NodeKind::Classifier { out_features } => NodeState::Linear {
                    weight: Tensor::create(&[input[0], out_features], Fill::HeNormal { fan_in: input[0] }, &mut rng)?,
                    bias: Tensor::zeros(&[out_features])?,
                },
                NodeKind::Bn => NodeState::Bn(BatchNormState::new(input[0])?),
                NodeKind::Ln => NodeState::Ln {
                    gamma: Tensor::full(&[input[0]], 1.0)?,
                    beta: Tensor::zeros(&[input[0]])?,
                },
                NodeKind::Prelu => NodeState::Prelu(PReLUState::new(input[0])?),
                _ => NodeState::Plain,
            };
            states.push(state);
        }
        Ok(Self { graph, states })
    }

    pub fn graph(&self) -> &ArchGraph {
        &self.graph
    }

    /// Trainable parameters in a fixed order (graph order, then field order).
    pub fn params(&self) -> Vec<ParamRef<'_, T>> {
        let mut out = Vec::new();
        for (node, state) in self.graph.nodes.iter().zip(&self.states) {
            let name = |field: &str| format!("n{}.{}.{field}", node.id, node.kind.name());
            match state {
                NodeState::Plain => {}
                NodeState::Conv { weight } => out.push(ParamRef {
                    name: name("weight"),
                    tensor: weight,
                    decay: true,
                }),
                NodeState::Linear { weight, bias } => {
                    out.push(ParamRef {
                        name: name("weight"),
                        tensor: weight,
                        decay: true,
                    });
                    out.push(ParamRef {
                        name: name("bias"),
                        tensor: bias,
                        decay: false,
                    });
                }
                NodeState::Bn(BatchNormState { gamma, beta, .. }) | NodeState::Ln { gamma, beta } => {
                    out.push(ParamRef {
                        name: name("gamma"),
                        tensor: gamma,
                        decay: false,
                    });
                    out.push(ParamRef {
                        name: name("beta"),
                        tensor: beta,
                        decay: false,
                    });
                }
                NodeState::Prelu(p) => out.push(ParamRef {
                    name: name("alpha"),
                    tensor: &p.alpha,
                    decay: false,
                }),
            }
        }
        out
    }

    /// Mutable parameters in [`Network::params`] order.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for state in &mut self.states {
            match state {
                NodeState::Plain => {}
                NodeState::Conv { weight } => out.push(weight),
                NodeState::Linear { weight, bias } => {
                    out.push(weight);
                    out.push(bias);
                }
                NodeState::Bn(BatchNormState { gamma, beta, .. }) | NodeState::Ln { gamma, beta } => {
                    out.push(gamma);
                    out.push(beta);
                }
                NodeState::Prelu(p) => out.push(&mut p.alpha),
            }
        }
        out
    }

    /// Parameters followed by BN running statistics, as named tensors.
    pub fn named_state(&self) -> Vec<(String, Tensor<T>)> {
        let mut out: Vec<(String, Tensor<T>)> = self.params().into_iter().map(|p| (p.name, p.tensor.clone())).collect();
        for (node, state) in self.graph.nodes.iter().zip(&self.states) {
            if let NodeState::Bn(bn) = state {
                let c = bn.running_mean.len();
                for (field, buf) in [("running_mean", &bn.running_mean), ("running_var", &bn.running_var)] {
                    let t = Tensor::from_vec(&[c], buf.clone()).expect("channel count is positive");
                    out.push((format!("n{}.bn.{field}", node.id), t));
                }
            }
        }
        out
    }

    /// Overwrite parameters and running statistics from named tensors. Every
    /// name of [`Network::named_state`] must be present with its shape and
    /// no extra names are allowed.
    pub fn load_named_state(&mut self, items: &[(String, Tensor<T>)]) -> Result<()> {
        let expected: Vec<(String, Vec<usize>)> =
            self.named_state().into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();
        let given: HashMap<&str, &Tensor<T>> = items.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let mut bad: Vec<String> = expected
            .iter()
            .filter(|(n, shape)| given.get(n.as_str()).is_none_or(|t| t.shape() != shape.as_slice()))
            .map(|(n, _)| n.clone())
            .collect();
        let known: std::collections::HashSet<&str> = expected.iter().map(|(n, _)| n.as_str()).collect();
        bad.extend(items.iter().filter(|(n, _)| !known.contains(n.as_str())).map(|(n, _)| n.clone()));
        if !bad.is_empty() {
            return Err(Error::Checkpoint {
                detail: format!("{} tensors are missing, unexpected or mis-shaped", bad.len()),
                tensors: bad,
            });
        }
        let names: Vec<String> = self.params().into_iter().map(|p| p.name).collect();
        for (name, slot) in names.iter().zip(self.params_mut()) {
            *slot = given[name.as_str()].clone();
        }
        let ids: Vec<usize> = self.graph.nodes.iter().map(|n| n.id).collect();
        for (id, state) in ids.into_iter().zip(&mut self.states) {
            if let NodeState::Bn(bn) = state {
                bn.running_mean = given[format!("n{id}.bn.running_mean").as_str()].data().to_vec();
                bn.running_var = given[format!("n{id}.bn.running_var").as_str()].data().to_vec();
            }
        }
        Ok(())
    }

    /// Run the network on a batch `x` of shape `[N, input_shape...]`.
    ///
    /// In train mode BN uses batch statistics and updates its running
    /// averages, and dropout draws masks from `dropout`. With
    /// `track_params` the parameter leaves require gradients.
    pub fn forward(
        &mut self,
        tape: &mut Tape<T>,
        x: Var,
        mode: Mode,
        dropout: &mut CounterRng,
        track_params: bool,
    ) -> Result<ForwardPass> {
        let batch = tape.shape(x)[0];
        let mut vars: HashMap<usize, Var> = HashMap::with_capacity(self.graph.nodes.len());
        let mut params = Vec::new();
        let leaf = |tape: &mut Tape<T>, t: &Tensor<T>, params: &mut Vec<Var>| {
            let v = tape.leaf(t.clone().with_requires_grad(track_params));
            params.push(v);
            v
        };
        for (node, state) in self.graph.nodes.iter().zip(&mut self.states) {
            let ins: Vec<Var> = if node.inputs.is_empty() {
                vec![x]
            } else {
                node.inputs.iter().map(|i| vars[i]).collect()
            };
            let a = ins[0];
            let y = match (&node.kind, state) {
                (NodeKind::Conv { stride, pad, .. }, NodeState::Conv { weight }) => {
                    let w = leaf(tape, weight, &mut params);
                    tape.conv2d(a, w, None, *stride, *pad)?
                }
                (NodeKind::Linear { .. } | NodeKind::Classifier { .. }, NodeState::Linear { weight, bias }) => {
                    let w = leaf(tape, weight, &mut params);
                    let b = leaf(tape, bias, &mut params);
                    tape.linear(a, w, b)?
                }
                (NodeKind::Bn, NodeState::Bn(bn)) => {
                    let g = leaf(tape, &bn.gamma, &mut params);
                    let b = leaf(tape, &bn.beta, &mut params);
                    bn.mode = mode;
                    bn.forward(tape, a, g, b)?
                }
                (NodeKind::Ln, NodeState::Ln { gamma, beta }) => {
                    let g = leaf(tape, gamma, &mut params);
                    let b = leaf(tape, beta, &mut params);
                    tape.layer_norm(a, g, b, LN_EPSILON)?
                }
                (NodeKind::Relu, _) => tape.relu(a),
                (NodeKind::Prelu, NodeState::Prelu(p)) => {
                    let alpha = leaf(tape, &p.alpha, &mut params);
                    tape.prelu(a, alpha)?
                }
                (NodeKind::Pool { pool }, _) => match *pool {
                    PoolOp::Max { kernel, stride, pad } => tape.max_pool(a, kernel, stride, pad)?,
                    PoolOp::GlobalAvg => tape.global_avg_pool(a)?,
                },
                (NodeKind::Dropout { rate }, _) => tape.dropout(a, *rate, dropout, mode)?,
                (NodeKind::AddShortcut, _) => tape.add(ins[0], ins[1])?,
                (NodeKind::Concat, _) => tape.concat(&ins)?,
                (NodeKind::Flatten, _) => {
                    let features = tape.value(a).numel() / batch;
                    tape.reshape(a, &[batch, features])?
                }
                (kind, _) => unreachable!("node state does not match {}", kind.name()),
            };
            vars.insert(node.id, y);
        }
        let out_id = self.graph.output_id().ok_or_else(|| Error::Contract("empty graph".into()))?;
        Ok(ForwardPass {
            output: vars[&out_id],
            params,
            vars,
        })
    }
}
