//! Backward-pass operator reordering.
//!
//! The baseline training order computes every gradient before any weight
//! update, so all weight gradients are live at once. Reordering schedules
//! each weight update immediately after its gradient node, shrinking
//! every weight-gradient lifetime to a single step.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};

use crate::error::{Error, Result};
use crate::ir::training::is_weight_gradient;
use crate::ir::{ComputationGraph, Mode, NodeId, OpKind};

use super::memory::tensor_lifetimes;

fn kahn_with_update_policy(graph: &ComputationGraph, updates_first: bool) -> Result<Vec<NodeId>> {
    let producers = graph.producers();
    let mut indegree: BTreeMap<&NodeId, usize> = graph.nodes.keys().map(|n| (n, 0)).collect();
    let mut succs: BTreeMap<&NodeId, Vec<&NodeId>> = BTreeMap::new();
    for node in graph.nodes.values() {
        let mut preds: std::collections::BTreeSet<&NodeId> = Default::default();
        for input in &node.inputs {
            if let Some(p) = producers.get(input) {
                preds.insert(p);
            }
        }
        for p in preds {
            *indegree.get_mut(&node.id).unwrap() += 1;
            succs.entry(p).or_default().push(&node.id);
        }
    }
    let mut updates: BinaryHeap<Reverse<&NodeId>> = BinaryHeap::new();
    let mut others: BinaryHeap<Reverse<&NodeId>> = BinaryHeap::new();
    let seed: Vec<&NodeId> = indegree
        .iter()
        .filter(|(_, &d)| d == 0)
        .map(|(n, _)| *n)
        .collect();
    for n in seed {
        if graph.nodes[n].kind == OpKind::WeightUpdate {
            updates.push(Reverse(n));
        } else {
            others.push(Reverse(n));
        }
    }
    let mut order = Vec::with_capacity(graph.nodes.len());
    loop {
        let next = if updates_first {
            updates.pop().or_else(|| others.pop())
        } else {
            others.pop().or_else(|| updates.pop())
        };
        let Some(Reverse(id)) = next else { break };
        order.push(id.clone());
        if let Some(ss) = succs.get(id) {
            for s in ss {
                let d = indegree.get_mut(s).unwrap();
                *d -= 1;
                if *d == 0 {
                    if graph.nodes[*s].kind == OpKind::WeightUpdate {
                        updates.push(Reverse(s));
                    } else {
                        others.push(Reverse(s));
                    }
                }
            }
        }
    }
    if order.len() != graph.nodes.len() {
        return Err(Error::Structural(
            "dependency violation while ordering the training graph".into(),
        ));
    }
    Ok(order)
}

/// Conventional order: forward pass, every gradient, then every update.
pub fn baseline_order(graph: &ComputationGraph) -> Result<Vec<NodeId>> {
    require_training(graph)?;
    kahn_with_update_policy(graph, false)
}

/// Reordered execution: each weight update runs as soon as its gradient
/// is available.
pub fn reorder_backprop(graph: &ComputationGraph) -> Result<Vec<NodeId>> {
    require_training(graph)?;
    kahn_with_update_policy(graph, true)
}

fn require_training(graph: &ComputationGraph) -> Result<()> {
    if graph.mode != Mode::Training {
        return Err(Error::InvalidInput(
            "backprop reordering requires a training-mode graph".into(),
        ));
    }
    Ok(())
}

/// Peak bytes of simultaneously live weight-gradient tensors under the
/// given order.
pub fn weight_gradient_peak(graph: &ComputationGraph, order: &[NodeId]) -> u64 {
    let lifetimes = tensor_lifetimes(graph, order);
    let requests: BTreeMap<_, _> = lifetimes
        .into_iter()
        .filter(|(t, _)| is_weight_gradient(t))
        .map(|(t, lt)| {
            let bytes = graph.tensors[&t].bytes();
            (t, (bytes, lt))
        })
        .collect();
    super::memory::live_set_lower_bound(&requests)
}
