use std::collections::HashMap;

use super::{ArchGraph, ModuleKind, NodeKind, OpNode, Style};
use crate::error::{Error, Result};

/// Rewrite a pre-activation graph into after-activation form.
///
/// Every BN+activation pair that opens a pre-activation module moves one
/// module back: the BN closes the previous module's residual branch and the
/// activation follows its shortcut addition, becoming that module's tail.
/// The first module's pair joins the stem and the network's final pair
/// becomes the last module's tail, so conv, BN and ReLU counts are
/// unchanged.
///
/// Returns the converted graph and `true` when the input already was
/// after-activation (in which case it is returned unchanged).
pub fn to_after_activation(g: &ArchGraph) -> Result<(ArchGraph, bool)> {
    if g.style == Style::AfterActivation {
        log::warn!("{} is already after-activation; nothing to convert", g.family);
        return Ok((g.clone(), true));
    }
    let mut out = g.clone();
    let mut nodes: HashMap<usize, OpNode> = out.nodes.drain(..).map(|n| (n.id, n)).collect();
    let kind_of = |nodes: &HashMap<usize, OpNode>, id: usize| nodes.get(&id).map(|n| n.kind);

    let leading_pair = |nodes: &HashMap<usize, OpNode>, ids: &[usize], what: &str| -> Result<(usize, usize)> {
        match ids {
            [b, r, ..]
                if kind_of(nodes, *b) == Some(NodeKind::Bn)
                    && kind_of(nodes, *r).is_some_and(|k| k.is_activation())
                    && nodes[r].inputs == [*b] =>
            {
                Ok((*b, *r))
            }
            _ => Err(Error::Style(format!("{what} does not start with a BN + activation pair"))),
        }
    };

    let mut pairs = Vec::with_capacity(out.modules.len() + 1);
    for m in &out.modules {
        if m.kind != ModuleKind::PreactBasic {
            return Err(Error::Style(format!("module {} is {:?}, not a pre-activation module", m.index, m.kind)));
        }
        pairs.push(leading_pair(&nodes, &m.nodes, &format!("module {}", m.index))?);
    }
    pairs.push(leading_pair(&nodes, &out.head, "the head")?);

    let (b1, r1) = pairs[0];
    out.stem.extend([b1, r1]);

    for (i, m) in out.modules.iter_mut().enumerate() {
        let (b_in, r_in) = pairs[i];
        let (b_out, r_out) = pairs[i + 1];
        let raw_input = nodes[&b_in].inputs[0];
        m.nodes.retain(|&id| id != b_in && id != r_in);
        for id in &m.nodes {
            let n = nodes.get_mut(id).expect("module nodes exist");
            for inp in &mut n.inputs {
                if *inp == raw_input {
                    *inp = r_in;
                }
            }
        }
        let add = m
            .nodes
            .iter()
            .copied()
            .find(|id| kind_of(&nodes, *id) == Some(NodeKind::AddShortcut))
            .ok_or_else(|| Error::Style(format!("module {} has no shortcut addition", m.index)))?;
        let branch_end = nodes[&add].inputs[0];
        nodes.get_mut(&b_out).expect("pair exists").inputs = vec![branch_end];
        nodes.get_mut(&add).expect("add exists").inputs[0] = b_out;
        nodes.get_mut(&r_out).expect("pair exists").inputs = vec![add];
        let at = m.nodes.iter().position(|&id| id == branch_end).map_or(0, |p| p + 1);
        m.nodes.insert(at, b_out);
        m.nodes.push(r_out);
        m.kind = ModuleKind::ResBasic;
        m.tail_activation = vec![r_out];
    }
    let (bf, rf) = pairs[pairs.len() - 1];
    out.head.retain(|&id| id != bf && id != rf);
    out.style = Style::AfterActivation;
    out.nodes = nodes.into_values().collect();
    out.reorder_nodes();
    Ok((out, false))
}
