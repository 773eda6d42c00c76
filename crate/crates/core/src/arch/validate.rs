use std::collections::{HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{ArchGraph, NodeKind, PoolOp, Style};
use crate::error::{Error, Result};
use crate::nn::conv_out_dim;

/// One broken rule, located by module index when the node belongs to one.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub module: Option<usize>,
    pub rule: &'static str,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.module {
            Some(m) => write!(f, "module {m}: {}: {}", self.rule, self.detail),
            None => write!(f, "{}: {}", self.rule, self.detail),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Summary {
    pub weighted_layers: usize,
    pub relu_count: usize,
    pub param_count: usize,
    pub mult_adds: usize,
}

impl Summary {
    /// `key=value` lines in a fixed order.
    pub fn to_key_values(&self) -> String {
        format!(
            "weighted_layers={}\nrelu_count={}\nparam_count={}\nmult_adds={}\n",
            self.weighted_layers, self.relu_count, self.param_count, self.mult_adds
        )
    }
}

/// Per-sample output shape of a node from its input shapes.
fn infer(kind: &NodeKind, inputs: &[&[usize]]) -> std::result::Result<Vec<usize>, String> {
    let one = || match inputs {
        [s] => Ok(*s),
        _ => Err(format!("{} takes 1 input, got {}", kind.name(), inputs.len())),
    };
    match *kind {
        NodeKind::Conv {
            out_channels,
            kernel,
            stride,
            pad,
        } => {
            let s = one()?;
            let [_, h, w] = s else {
                return Err(format!("conv needs C×H×W input, got {s:?}"));
            };
            if stride == 0 || kernel == 0 || out_channels == 0 {
                return Err("conv kernel, stride and channels must be >= 1".into());
            }
            match (conv_out_dim(*h, kernel, stride, pad), conv_out_dim(*w, kernel, stride, pad)) {
                (Some(oh), Some(ow)) => Ok(vec![out_channels, oh, ow]),
                _ => Err(format!("kernel {kernel} does not fit input {s:?} with pad {pad}")),
            }
        }
        NodeKind::Linear { out_features } | NodeKind::Classifier { out_features } => {
            let s = one()?;
            if s.len() != 1 {
                return Err(format!("{} needs a flat input, got {s:?}", kind.name()));
            }
            if out_features == 0 {
                return Err("out_features must be >= 1".into());
            }
            Ok(vec![out_features])
        }
        NodeKind::Bn | NodeKind::Relu | NodeKind::Prelu => Ok(one()?.to_vec()),
        NodeKind::Ln => {
            let s = one()?;
            if s.len() != 1 || s[0] < 2 {
                return Err(format!("layer norm needs a flat input of width >= 2, got {s:?}"));
            }
            Ok(s.to_vec())
        }
        NodeKind::Dropout { rate } => {
            if !(0.0..1.0).contains(&rate) {
                return Err(format!("dropout rate {rate} outside [0, 1)"));
            }
            Ok(one()?.to_vec())
        }
        NodeKind::Pool { pool } => {
            let s = one()?;
            let [c, h, w] = s else {
                return Err(format!("pool needs C×H×W input, got {s:?}"));
            };
            match pool {
                PoolOp::GlobalAvg => Ok(vec![*c]),
                PoolOp::Max { kernel, stride, pad } => {
                    if pad >= kernel || stride == 0 {
                        return Err(format!("max pool with kernel {kernel}, stride {stride}, pad {pad}"));
                    }
                    match (conv_out_dim(*h, kernel, stride, pad), conv_out_dim(*w, kernel, stride, pad)) {
                        (Some(oh), Some(ow)) => Ok(vec![*c, oh, ow]),
                        _ => Err(format!("window {kernel} larger than input {s:?}")),
                    }
                }
            }
        }
        NodeKind::AddShortcut => match inputs {
            [a, b] if a == b => Ok(a.to_vec()),
            [a, b] => Err(format!("add of mismatched shapes {a:?} and {b:?}")),
            _ => Err(format!("add_shortcut takes 2 inputs, got {}", inputs.len())),
        },
        NodeKind::Concat => {
            if inputs.len() < 2 {
                return Err(format!("concat takes at least 2 inputs, got {}", inputs.len()));
            }
            let first = inputs[0];
            if first.is_empty() || inputs.iter().any(|s| s.len() != first.len() || s[1..] != first[1..]) {
                return Err(format!("concat of incompatible shapes {inputs:?}"));
            }
            let mut out = first.to_vec();
            out[0] = inputs.iter().map(|s| s[0]).sum();
            Ok(out)
        }
        NodeKind::Flatten => Ok(vec![one()?.iter().product()]),
    }
}

fn params_of(kind: &NodeKind, input: &[usize]) -> usize {
    match *kind {
        NodeKind::Conv {
            out_channels, kernel, ..
        } => out_channels * input[0] * kernel * kernel,
        NodeKind::Linear { out_features } | NodeKind::Classifier { out_features } => (input[0] + 1) * out_features,
        NodeKind::Bn | NodeKind::Ln => 2 * input[0],
        NodeKind::Prelu => input[0],
        _ => 0,
    }
}

fn mult_adds_of(kind: &NodeKind, input: &[usize], output: &[usize]) -> usize {
    match *kind {
        NodeKind::Conv { kernel, .. } => output.iter().product::<usize>() * input[0] * kernel * kernel,
        NodeKind::Linear { out_features } | NodeKind::Classifier { out_features } => input[0] * out_features,
        _ => 0,
    }
}

/// Per-sample output shape of every node, keyed by id.
pub fn propagate_shapes(g: &ArchGraph) -> Result<HashMap<usize, Vec<usize>>> {
    let mut shapes: HashMap<usize, Vec<usize>> = HashMap::new();
    for node in &g.nodes {
        let ins: Vec<&[usize]> = if node.inputs.is_empty() {
            vec![g.input_shape.as_slice()]
        } else {
            node.inputs
                .iter()
                .map(|i| {
                    shapes
                        .get(i)
                        .map(Vec::as_slice)
                        .ok_or_else(|| Error::Contract(format!("node {} reads unknown or later node {i}", node.id)))
                })
                .collect::<Result<_>>()?
        };
        let out = infer(&node.kind, &ins)
            .map_err(|detail| Error::Contract(format!("node {} ({}): {detail}", node.id, node.kind.name())))?;
        shapes.insert(node.id, out);
    }
    Ok(shapes)
}

fn weighted(g: &ArchGraph) -> usize {
    g.nodes
        .iter()
        .filter(|n| !n.shortcut)
        .filter(|n| match n.kind {
            NodeKind::Conv { .. } | NodeKind::Linear { .. } => true,
            NodeKind::Classifier { .. } => g.classifier_in_depth,
            _ => false,
        })
        .count()
}

/// Check structure, shapes, module indexing and tail activations. Returns
/// every violation found; an empty list means the graph is valid.
pub fn validate(g: &ArchGraph) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut owner: HashMap<usize, Option<usize>> = HashMap::new();
    let mut push = |module, rule, detail: String| out.push(Violation { module, rule, detail });

    let listed = g
        .stem
        .iter()
        .map(|&id| (id, None))
        .chain(g.modules.iter().flat_map(|m| m.nodes.iter().map(move |&id| (id, Some(m.index)))))
        .chain(g.head.iter().map(|&id| (id, None)));
    for (id, module) in listed {
        if owner.insert(id, module).is_some() {
            push(module, "membership", format!("node {id} is listed more than once"));
        }
    }

    let mut seen: HashSet<usize> = HashSet::new();
    let ids: HashSet<usize> = g.nodes.iter().map(|n| n.id).collect();
    let mut shapes: HashMap<usize, Vec<usize>> = HashMap::new();
    for node in &g.nodes {
        let module = owner.get(&node.id).copied().flatten();
        if !owner.contains_key(&node.id) {
            push(None, "membership", format!("node {} is not in the stem, a module or the head", node.id));
        }
        if !seen.insert(node.id) {
            push(module, "unique_ids", format!("node id {} appears twice", node.id));
            continue;
        }
        let mut ins: Vec<&[usize]> = Vec::new();
        let mut broken = false;
        for i in &node.inputs {
            match shapes.get(i) {
                Some(s) => ins.push(s),
                None if ids.contains(i) => {
                    broken = true;
                    push(module, "acyclicity", format!("node {} reads node {i} recorded after it", node.id));
                }
                None => {
                    broken = true;
                    push(module, "dangling_input", format!("node {} reads missing node {i}", node.id));
                }
            }
        }
        if node.inputs.is_empty() {
            ins.push(&g.input_shape);
        }
        let fallback = ins.first().map(|s| s.to_vec()).unwrap_or_else(|| g.input_shape.clone());
        let shape = if broken {
            fallback
        } else {
            infer(&node.kind, &ins).unwrap_or_else(|detail| {
                push(module, "shape", format!("node {} ({}): {detail}", node.id, node.kind.name()));
                fallback
            })
        };
        shapes.insert(node.id, shape);
    }
    let mut missing: Vec<(usize, Option<usize>)> =
        owner.iter().filter(|(id, _)| !ids.contains(id)).map(|(&id, &m)| (id, m)).collect();
    missing.sort_unstable();
    for (id, module) in missing {
        push(module, "membership", format!("listed node {id} does not exist"));
    }

    for (pos, m) in g.modules.iter().enumerate() {
        if m.index != pos + 1 {
            push(Some(m.index), "index_contiguity", format!("module at position {} has index {}", pos + 1, m.index));
        }
    }
    let staged: Vec<usize> = g.stages.iter().flat_map(|s| s.modules.iter().copied()).collect();
    if staged != (1..=g.modules.len()).collect::<Vec<_>>() {
        push(None, "index_contiguity", format!("stages cover modules {staged:?}, expected 1..={}", g.modules.len()));
    }

    for m in &g.modules {
        let idx = Some(m.index);
        let expect_after = g.style == Style::AfterActivation;
        if m.kind.is_after_activation() != expect_after {
            push(idx, "style", format!("{:?} module in a {:?} graph", m.kind, g.style));
        }
        let in_module: HashSet<usize> = m.nodes.iter().copied().collect();
        let adds: Vec<usize> = m
            .nodes
            .iter()
            .copied()
            .filter(|&id| g.node(id).is_some_and(|n| n.kind == NodeKind::AddShortcut))
            .collect();
        if m.kind.is_residual() && adds.len() != 1 {
            push(idx, "shortcut", format!("residual module has {} add_shortcut nodes", adds.len()));
        }
        if !m.kind.is_after_activation() {
            continue;
        }
        if m.tail_activation.is_empty() && !m.tail_erased {
            push(idx, "tail_activation", "after-activation module has no tail activation".into());
        }
        for &t in &m.tail_activation {
            match g.node(t) {
                Some(n) if n.kind.is_activation() && in_module.contains(&t) => {
                    if m.kind.is_residual() && adds.len() == 1 && n.inputs != adds {
                        push(idx, "tail_activation", format!("tail node {t} does not consume the shortcut addition"));
                    }
                }
                Some(n) => push(
                    idx,
                    "tail_activation",
                    format!("tail node {t} ({}) is not an activation of this module", n.kind.name()),
                ),
                None => push(idx, "tail_activation", format!("tail node {t} does not exist")),
            }
        }
    }

    let depth = weighted(g);
    if depth != g.declared_depth {
        push(None, "depth", format!("{depth} weighted layers, declared {}", g.declared_depth));
    }
    out
}

/// Layer, activation, parameter and multiply-add counts for one sample at
/// the graph's input size.
pub fn summarize(g: &ArchGraph) -> Result<Summary> {
    let violations = validate(g);
    if let Some(v) = violations.first() {
        return Err(Error::Contract(format!(
            "cannot summarize an invalid graph ({} violations, first: {v})",
            violations.len()
        )));
    }
    let shapes = propagate_shapes(g)?;
    let mut s = Summary {
        weighted_layers: weighted(g),
        ..Summary::default()
    };
    for node in &g.nodes {
        let input: &[usize] = match node.inputs.first() {
            Some(i) => &shapes[i],
            None => &g.input_shape,
        };
        s.param_count += params_of(&node.kind, input);
        s.mult_adds += mult_adds_of(&node.kind, input, &shapes[&node.id]);
        if node.kind == NodeKind::Relu {
            s.relu_count += 1;
        }
    }
    Ok(s)
}
