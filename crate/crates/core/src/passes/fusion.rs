//! Greedy operator fusion.
//!
//! The pass scans the graph in topological order and grows
//! producer-consumer chains, trying the rules in the fixed order
//! `ConvBatchNorm, Elementwise, Linear, Channelwise, Reduction`. A node
//! may join a group only if it is the sole consumer of the chain tail's
//! single output, so merging intermediates never changes external
//! dataflow.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::ir::{ComputationGraph, NodeId, OpKind, OperatorNode, TensorId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionRule {
    Linear,
    ConvBatchNorm,
    Elementwise,
    Channelwise,
    Reduction,
}

impl FusionRule {
    /// Default attempt order.
    pub const ALL: [FusionRule; 5] = [
        FusionRule::ConvBatchNorm,
        FusionRule::Elementwise,
        FusionRule::Linear,
        FusionRule::Channelwise,
        FusionRule::Reduction,
    ];

    pub fn parse(s: &str) -> Option<FusionRule> {
        match s {
            "linear" => Some(FusionRule::Linear),
            "conv_batch_norm" | "conv_bn" => Some(FusionRule::ConvBatchNorm),
            "elementwise" => Some(FusionRule::Elementwise),
            "channelwise" => Some(FusionRule::Channelwise),
            "reduction" => Some(FusionRule::Reduction),
            _ => None,
        }
    }

    fn matches(self, tail: OpKind, consumer: OpKind) -> bool {
        match self {
            FusionRule::ConvBatchNorm => tail.is_conv_like() && consumer == OpKind::BatchNorm,
            FusionRule::Elementwise => fusable_compute(tail) && consumer.is_elementwise(),
            FusionRule::Linear => {
                tail == OpKind::FullyConnected && consumer == OpKind::FullyConnected
            }
            FusionRule::Channelwise => tail.is_conv_like() && consumer == OpKind::PointwiseConv,
            FusionRule::Reduction => {
                fusable_compute(tail) && matches!(consumer, OpKind::Pool | OpKind::Reduce)
            }
        }
    }
}

/// Kinds that may head or extend a fused chain.
fn fusable_compute(kind: OpKind) -> bool {
    !matches!(
        kind,
        OpKind::Constant
            | OpKind::ExitBranch
            | OpKind::Identity
            | OpKind::Gradient
            | OpKind::WeightUpdate
    )
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionGroup {
    pub id: String,
    /// Members in producer-to-consumer order.
    pub node_ids: Vec<NodeId>,
    /// Rule that admitted the first merge of the chain.
    pub rule: FusionRule,
}

/// Fuse eligible chains. Returns the rewritten graph (each group collapsed
/// into its head node, intermediate tensors dropped) and the groups.
pub fn fuse(
    graph: &ComputationGraph,
    enabled: &BTreeSet<FusionRule>,
) -> Result<(ComputationGraph, Vec<FusionGroup>)> {
    let order = graph.topo_sort()?;
    let consumers = graph.consumers();
    let consumer_counts: BTreeMap<&TensorId, usize> =
        consumers.iter().map(|(t, cs)| (*t, cs.len())).collect();

    let mut grouped: BTreeSet<&NodeId> = BTreeSet::new();
    let mut groups: Vec<FusionGroup> = Vec::new();

    for id in &order {
        if grouped.contains(id) {
            continue;
        }
        let head = &graph.nodes[id];
        if !fusable_compute(head.kind) || head.outputs.len() != 1 {
            continue;
        }
        let mut chain = vec![id.clone()];
        let mut first_rule: Option<FusionRule> = None;
        loop {
            let tail = &graph.nodes[chain.last().unwrap()];
            if tail.outputs.len() != 1 {
                break;
            }
            let out = &tail.outputs[0];
            if consumer_counts.get(out).copied() != Some(1) {
                break; // sole-consumer legality
            }
            let next_id = consumers[out][0];
            if grouped.contains(next_id) {
                break;
            }
            let next = &graph.nodes[next_id];
            if next.outputs.len() != 1 {
                break;
            }
            let matched = FusionRule::ALL
                .iter()
                .find(|r| enabled.contains(r) && r.matches(tail.kind, next.kind));
            match matched {
                Some(rule) => {
                    first_rule.get_or_insert(*rule);
                    chain.push(next_id.clone());
                }
                None => break,
            }
        }
        if chain.len() > 1 {
            for member in &chain {
                grouped.insert(graph.nodes.get_key_value(member).unwrap().0);
            }
            groups.push(FusionGroup {
                id: format!("fg{:03}", groups.len()),
                node_ids: chain,
                rule: first_rule.unwrap(),
            });
        }
    }

    let fused = rewrite(graph, &groups)?;
    Ok((fused, groups))
}

fn rewrite(graph: &ComputationGraph, groups: &[FusionGroup]) -> Result<ComputationGraph> {
    let mut member_of: BTreeMap<&NodeId, usize> = BTreeMap::new();
    for (gi, g) in groups.iter().enumerate() {
        for m in &g.node_ids {
            member_of.insert(m, gi);
        }
    }

    let mut nodes: Vec<OperatorNode> = Vec::new();
    let mut dropped_tensors: BTreeSet<&TensorId> = BTreeSet::new();
    for g in groups {
        // Every member's single output except the tail's is internal.
        for m in &g.node_ids[..g.node_ids.len() - 1] {
            dropped_tensors.insert(&graph.nodes[m].outputs[0]);
        }
    }

    for node in graph.nodes.values() {
        match member_of.get(&node.id) {
            None => nodes.push(node.clone()),
            Some(&gi) if groups[gi].node_ids[0] == node.id => {
                let g = &groups[gi];
                let mut inputs: Vec<TensorId> = Vec::new();
                for m in &g.node_ids {
                    for input in &graph.nodes[m].inputs {
                        if !dropped_tensors.contains(input) && !inputs.contains(input) {
                            inputs.push(input.clone());
                        }
                    }
                }
                let tail = &graph.nodes[g.node_ids.last().unwrap()];
                let head = &graph.nodes[&g.node_ids[0]];
                nodes.push(OperatorNode {
                    id: head.id.clone(),
                    kind: head.kind,
                    inputs,
                    outputs: tail.outputs.clone(),
                    macs: g.node_ids.iter().map(|m| graph.nodes[m].macs).sum(),
                    param_bytes: g.node_ids.iter().map(|m| graph.nodes[m].param_bytes).sum(),
                    attributes: head.attributes.clone(),
                    block: head.block.clone(),
                });
            }
            Some(_) => {} // non-head member, absorbed
        }
    }

    let tensors = graph
        .tensors
        .values()
        .filter(|t| !dropped_tensors.contains(&t.id))
        .cloned()
        .collect();
    ComputationGraph::new(nodes, tensors, graph.exits.clone(), graph.mode)
}

/// Total bytes of intermediate tensors a fusion removed, for footprint
/// accounting checks.
pub fn removed_intermediate_bytes(graph: &ComputationGraph, groups: &[FusionGroup]) -> u64 {
    groups
        .iter()
        .flat_map(|g| g.node_ids[..g.node_ids.len() - 1].iter())
        .map(|m| {
            let out = &graph.nodes[m].outputs[0];
            graph.tensors[out].bytes()
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{zoo, Attributes, GraphBuilder};

    fn all_rules() -> BTreeSet<FusionRule> {
        FusionRule::ALL.into_iter().collect()
    }

    fn conv_bn_graph(extra_consumer: bool) -> ComputationGraph {
        let mut b = GraphBuilder::new();
        let t0 = b.tensor("t0", vec![16, 8, 8]);
        let t1 = b.tensor("t1", vec![32, 8, 8]);
        let t2 = b.tensor("t2", vec![32, 8, 8]);
        b.node(
            "conv",
            OpKind::Conv,
            vec![t0],
            vec![t1.clone()],
            294_912,
            16 * 32 * 9 * 4,
            Attributes::conv(3, 1, 16, 32),
            None,
        );
        b.node(
            "conv_bn",
            OpKind::BatchNorm,
            vec![t1.clone()],
            vec![t2],
            0,
            2 * 32 * 4,
            Attributes::default(),
            None,
        );
        if extra_consumer {
            let t3 = b.tensor("t3", vec![32, 8, 8]);
            b.node(
                "side",
                OpKind::Relu,
                vec![t1],
                vec![t3],
                0,
                0,
                Attributes::default(),
                None,
            );
        }
        b.finish().unwrap()
    }

    #[test]
    fn conv_bn_pair_fuses_and_drops_intermediate() {
        let g = conv_bn_graph(false);
        let (fused, groups) = fuse(&g, &all_rules()).unwrap();
        assert_eq!(groups.len(), 1);
        assert_eq!(groups[0].rule, FusionRule::ConvBatchNorm);
        assert_eq!(fused.nodes.len(), 1);
        let merged = &fused.nodes[&NodeId::new("conv")];
        assert_eq!(merged.macs, 294_912);
        assert_eq!(merged.param_bytes, 16 * 32 * 9 * 4 + 2 * 32 * 4);
        assert!(!fused.tensors.contains_key(&TensorId::new("t1")));
        assert_eq!(removed_intermediate_bytes(&g, &groups), 32 * 8 * 8 * 4);
    }

    #[test]
    fn multi_consumer_blocks_fusion() {
        let g = conv_bn_graph(true);
        let (fused, groups) = fuse(&g, &all_rules()).unwrap();
        assert!(groups.is_empty());
        assert_eq!(fused, g);
    }

    #[test]
    fn disabled_rule_is_skipped() {
        let g = conv_bn_graph(false);
        let only_linear: BTreeSet<FusionRule> = [FusionRule::Linear].into_iter().collect();
        let (_, groups) = fuse(&g, &only_linear).unwrap();
        assert!(groups.is_empty());
    }

    #[test]
    fn vgg_footprint_shrinks_by_exactly_the_fused_tensors() {
        let g = zoo::build_zoo_model(zoo::ZooModel::Vgg16, &zoo::ZooConfig::default()).unwrap();
        let (fused, groups) = fuse(&g, &all_rules()).unwrap();
        assert!(!groups.is_empty());
        let before: u64 = g.tensors.values().map(|t| t.bytes()).sum();
        let after: u64 = fused.tensors.values().map(|t| t.bytes()).sum();
        assert_eq!(before - after, removed_intermediate_bytes(&g, &groups));
        // Compute and parameters are preserved.
        assert_eq!(fused.total_macs(), g.total_macs());
        assert_eq!(fused.total_param_bytes(), g.total_param_bytes());
    }

    #[test]
    fn fused_graph_is_deterministic() {
        let g = zoo::build_zoo_model(zoo::ZooModel::Resnet18, &zoo::ZooConfig::default()).unwrap();
        let (f1, g1) = fuse(&g, &all_rules()).unwrap();
        let (f2, g2) = fuse(&g, &all_rules()).unwrap();
        assert_eq!(f1, f2);
        assert_eq!(g1, g2);
    }
}
