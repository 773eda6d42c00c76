//! Architecture intermediate representation.
//!
//! A network is a stem, a sequence of basic modules grouped into stages, and
//! a head. Every op is an [`OpNode`] stored once in [`ArchGraph::nodes`] in
//! topological order; stem, modules and head refer to nodes by id. A node
//! with no inputs reads the network input.

mod build;
mod convert;
mod network;
mod validate;

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use build::{build_network, build_scalar_net, Activation, BuildOptions, Family};
pub use convert::to_after_activation;
pub use network::{ForwardPass, Network, ParamRef};
pub use validate::{propagate_shapes, summarize, validate, Summary, Violation};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum PoolOp {
    Max { kernel: usize, stride: usize, pad: usize },
    GlobalAvg,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NodeKind {
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Linear {
        out_features: usize,
    },
    Bn,
    Ln,
    Relu,
    Prelu,
    Pool {
        pool: PoolOp,
    },
    Dropout {
        rate: f64,
    },
    AddShortcut,
    Concat,
    Flatten,
    Classifier {
        out_features: usize,
    },
}

impl NodeKind {
    pub fn name(&self) -> &'static str {
        match self {
            NodeKind::Conv { .. } => "conv",
            NodeKind::Linear { .. } => "linear",
            NodeKind::Bn => "bn",
            NodeKind::Ln => "ln",
            NodeKind::Relu => "relu",
            NodeKind::Prelu => "prelu",
            NodeKind::Pool { .. } => "pool",
            NodeKind::Dropout { .. } => "dropout",
            NodeKind::AddShortcut => "add_shortcut",
            NodeKind::Concat => "concat",
            NodeKind::Flatten => "flatten",
            NodeKind::Classifier { .. } => "classifier",
        }
    }

    pub fn is_activation(&self) -> bool {
        matches!(self, NodeKind::Relu | NodeKind::Prelu)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpNode {
    pub id: usize,
    #[serde(flatten)]
    pub kind: NodeKind,
    pub inputs: Vec<usize>,
    /// Part of a projection shortcut; not counted as a weighted layer.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub shortcut: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModuleKind {
    VggBlock,
    ResBasic,
    ResBottleneck,
    PreactBasic,
    InceptionV2,
    MlpBlock,
    /// Fully-connected residual module of the scalar analysis network.
    FcResidual,
}

impl ModuleKind {
    pub fn is_residual(self) -> bool {
        matches!(
            self,
            ModuleKind::ResBasic | ModuleKind::ResBottleneck | ModuleKind::PreactBasic | ModuleKind::FcResidual
        )
    }

    pub fn is_after_activation(self) -> bool {
        self != ModuleKind::PreactBasic
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModuleSpec {
    /// 1-based position in the network.
    pub index: usize,
    pub kind: ModuleKind,
    pub nodes: Vec<usize>,
    pub tail_activation: Vec<usize>,
    /// Set once the tail activation has been removed by an erase pass.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub tail_erased: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    /// 1-based module indices.
    pub modules: Vec<usize>,
    pub out_channels: usize,
    pub downsample: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Style {
    AfterActivation,
    PreActivation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchGraph {
    pub family: String,
    pub style: Style,
    /// Per-sample input shape, e.g. `[3, 32, 32]`.
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
    /// Depth the builder declares; checked against the weighted-layer count.
    pub declared_depth: usize,
    /// Whether the classifier counts toward the weighted-layer depth.
    pub classifier_in_depth: bool,
    pub stem: Vec<usize>,
    pub stages: Vec<Stage>,
    pub modules: Vec<ModuleSpec>,
    pub head: Vec<usize>,
    pub nodes: Vec<OpNode>,
}

impl ArchGraph {
    pub fn node(&self, id: usize) -> Option<&OpNode> {
        self.nodes.iter().find(|n| n.id == id)
    }

    /// Map from node id to its position in [`ArchGraph::nodes`].
    pub fn positions(&self) -> HashMap<usize, usize> {
        self.nodes.iter().enumerate().map(|(i, n)| (n.id, i)).collect()
    }

    /// Id of the node producing the network output.
    pub fn output_id(&self) -> Option<usize> {
        self.head.last().or_else(|| self.nodes.last().map(|n| &n.id)).copied()
    }

    pub fn module(&self, index: usize) -> Option<&ModuleSpec> {
        index.checked_sub(1).and_then(|i| self.modules.get(i))
    }

    /// Op-kind names of a module's nodes, in order.
    pub fn module_signature(&self, index: usize) -> Vec<&'static str> {
        self.module(index)
            .map(|m| m.nodes.iter().filter_map(|&id| self.node(id)).map(|n| n.kind.name()).collect())
            .unwrap_or_default()
    }

    /// Number of nodes of the given kind name in the whole graph.
    pub fn count_kind(&self, name: &str) -> usize {
        self.nodes.iter().filter(|n| n.kind.name() == name).count()
    }

    /// Rebuild `nodes` in stem, module and head order.
    pub(crate) fn reorder_nodes(&mut self) {
        let mut by_id: HashMap<usize, OpNode> = self.nodes.drain(..).map(|n| (n.id, n)).collect();
        let order: Vec<usize> = self
            .stem
            .iter()
            .chain(self.modules.iter().flat_map(|m| m.nodes.iter()))
            .chain(self.head.iter())
            .copied()
            .collect();
        for id in order {
            if let Some(n) = by_id.remove(&id) {
                self.nodes.push(n);
            }
        }
        let mut rest: Vec<OpNode> = by_id.into_values().collect();
        rest.sort_by_key(|n| n.id);
        self.nodes.extend(rest);
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("graph serialization cannot fail");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        parse_json(text, Path::new("<graph>"))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        parse_json(&text, path)
    }
}

/// Parse a JSON document, reporting failures with their byte offset.
pub(crate) fn parse_json<T: serde::de::DeserializeOwned>(text: &str, path: &Path) -> Result<T> {
    serde_json::from_str(text).map_err(|e| {
        let offset: usize = text
            .split_inclusive('\n')
            .take(e.line().saturating_sub(1))
            .map(str::len)
            .sum::<usize>()
            + e.column().saturating_sub(1);
        Error::Format {
            path: path.to_path_buf(),
            offset: offset as u64,
            detail: e.to_string(),
        }
    })
}
