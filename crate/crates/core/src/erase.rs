//! The EraseReLU rewrite: pick a stride-spaced subset of modules and delete
//! one ReLU from each, rewiring its consumers to its input.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::arch::{summarize, validate, ArchGraph, NodeKind, Style};
use crate::error::{Error, Result};

/// Which ReLU of a selected module is erased.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Location {
    /// The module's tail activation(s).
    Last,
    /// The first ReLU of the module in topological order.
    First,
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Location::Last => "last",
            Location::First => "first",
        })
    }
}

impl FromStr for Location {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "last" => Ok(Location::Last),
            "first" => Ok(Location::First),
            other => Err(Error::Config(format!("location must be last or first, got {other:?}"))),
        }
    }
}

/// Sorted 1-based indices of the modules to erase: `1, 1 + s, 1 + 2s, ...`
/// up to `modules`, with `s = round(1 / proportion)` rounding half to even.
pub fn select_modules(proportion: f64, modules: usize) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&proportion) {
        return Err(Error::Config(format!("proportion must be in [0, 1], got {proportion}")));
    }
    if modules == 0 {
        return Err(Error::Config("a network needs at least one module".into()));
    }
    if proportion == 0.0 {
        return Ok(Vec::new());
    }
    let stride = (1.0 / proportion).round_ties_even().max(1.0);
    let stride = if stride >= modules as f64 { modules } else { stride as usize };
    Ok((1..=modules).step_by(stride).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Erasure {
    pub module: usize,
    pub node: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErasePlan {
    pub requested_proportion: f64,
    /// Fraction of modules selected.
    pub achieved_proportion: f64,
    pub location: Location,
    pub selected_modules: Vec<usize>,
    pub erased_node_ids: Vec<usize>,
    pub erasures: Vec<Erasure>,
    /// Selected modules without a ReLU at the requested location.
    pub skipped_modules: Vec<usize>,
    /// 64-bit hash of the family, its summary, the proportion and the
    /// location, as 16 hex digits.
    pub digest: String,
}

impl ErasePlan {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("plan serialization cannot fail");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        crate::arch::parse_json(text, Path::new("<plan>"))
    }
}

fn plan_digest(g: &ArchGraph, proportion: f64, location: Location) -> Result<String> {
    let s = summarize(g)?;
    let mut h = Sha256::new();
    h.update(g.family.as_bytes());
    for v in [s.weighted_layers, s.relu_count, s.param_count, s.mult_adds] {
        h.update((v as u64).to_le_bytes());
    }
    h.update(proportion.to_bits().to_le_bytes());
    h.update(location.to_string().as_bytes());
    let bytes = h.finalize();
    Ok(bytes[..8].iter().map(|b| format!("{b:02x}")).collect())
}

/// Erase one ReLU (or, for Inception modules at `Last`, every branch-tail
/// ReLU) from each selected module of an after-activation graph.
pub fn apply_erase(g: &ArchGraph, proportion: f64, location: Location) -> Result<(ArchGraph, ErasePlan)> {
    if g.style != Style::AfterActivation {
        return Err(Error::Style(format!(
            "{} is pre-activation; convert it with to_after_activation before erasing",
            g.family
        )));
    }
    let violations = validate(g);
    if let Some(v) = violations.first() {
        return Err(Error::Contract(format!("cannot erase an invalid graph: {v}")));
    }
    let selected = select_modules(proportion, g.modules.len())?;
    let digest = plan_digest(g, proportion, location)?;
    let mut out = g.clone();
    let mut erasures = Vec::new();
    let mut skipped = Vec::new();

    for &index in &selected {
        let module = &out.modules[index - 1];
        let is_relu = |id: &usize| out.node(*id).is_some_and(|n| n.kind == NodeKind::Relu);
        let targets: Vec<usize> = match location {
            Location::Last => module.tail_activation.iter().copied().filter(is_relu).collect(),
            Location::First => module.nodes.iter().copied().find(is_relu).into_iter().collect(),
        };
        if targets.is_empty() {
            skipped.push(index);
            continue;
        }
        for target in targets {
            let source = out.node(target).expect("target exists").inputs[0];
            for n in &mut out.nodes {
                for inp in &mut n.inputs {
                    if *inp == target {
                        *inp = source;
                    }
                }
            }
            out.nodes.retain(|n| n.id != target);
            let m = &mut out.modules[index - 1];
            m.nodes.retain(|&id| id != target);
            let had_tail = !m.tail_activation.is_empty();
            m.tail_activation.retain(|&id| id != target);
            if had_tail && m.tail_activation.is_empty() {
                m.tail_erased = true;
            }
            erasures.push(Erasure { module: index, node: target });
        }
    }

    let plan = ErasePlan {
        requested_proportion: proportion,
        achieved_proportion: selected.len() as f64 / g.modules.len() as f64,
        location,
        erased_node_ids: erasures.iter().map(|e| e.node).collect(),
        selected_modules: selected,
        erasures,
        skipped_modules: skipped,
        digest,
    };
    Ok((out, plan))
}
