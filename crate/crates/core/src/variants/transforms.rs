//! Per-family graph rewrites. Every rewrite preserves the original
//! node's input and output tensor ids, so external dataflow never
//! changes; only the interior structure and the analytic MAC/parameter
//! bookkeeping do.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::ir::{
    zoo, Attributes, ComputationGraph, NodeId, OpKind, OperatorNode, TensorId, TensorSpec,
};

const F32: u64 = zoo::F32_BYTES;

fn scaled_dim(c: u64, factor: f64) -> u64 {
    ((c as f64 * factor).round() as u64).max(1)
}

/// Weight element count of a kind, bias excluded.
fn weight_elems(kind: OpKind, kernel: u64, in_c: u64, out_c: u64) -> u64 {
    match kind {
        OpKind::Conv => kernel * kernel * in_c * out_c,
        OpKind::PointwiseConv => in_c * out_c,
        OpKind::DepthwiseConv => kernel * kernel * out_c,
        OpKind::FullyConnected => in_c * out_c,
        _ => 0,
    }
}

/// Infer whether the original parameter count included a bias vector.
fn has_bias(node: &OperatorNode) -> bool {
    let (Some(in_c), Some(out_c)) = (node.attributes.in_channels, node.attributes.out_channels)
    else {
        return false;
    };
    let k = node.attributes.kernel.unwrap_or(1) as u64;
    let w = weight_elems(node.kind, k, in_c as u64, out_c as u64);
    node.param_bytes == (w + out_c as u64) * F32
}

fn conv_node_params(kind: OpKind, kernel: u64, in_c: u64, out_c: u64, bias: bool) -> u64 {
    (weight_elems(kind, kernel, in_c, out_c) + if bias { out_c } else { 0 }) * F32
}

fn spatial(shape: &[u64]) -> Result<(u64, u64)> {
    match shape {
        [_, h, w] => Ok((*h, *w)),
        _ => Err(Error::InvalidInput(
            "channel transforms expect [c, h, w] tensors".into(),
        )),
    }
}

pub(crate) fn skippable_blocks_sorted(graph: &ComputationGraph) -> Vec<String> {
    zoo::skippable_blocks(graph)
}

/// Remove whole blocks from the graph, rerouting each block's boundary
/// output to its boundary input. Blocks must exist and be identity-shaped.
pub(crate) fn skip_blocks(graph: &ComputationGraph, blocks: &[String]) -> Result<ComputationGraph> {
    let mut current = graph.clone();
    for label in blocks {
        current = skip_one_block(&current, label)?;
    }
    Ok(current)
}

fn skip_one_block(graph: &ComputationGraph, label: &str) -> Result<ComputationGraph> {
    let members: Vec<&OperatorNode> = graph
        .nodes
        .values()
        .filter(|n| n.block.as_deref() == Some(label))
        .collect();
    if members.is_empty() {
        return Err(Error::InvalidInput(format!(
            "depth_skip: block '{label}' absent from the graph"
        )));
    }
    if members.iter().any(|n| n.kind == OpKind::ExitBranch) {
        return Err(Error::InvalidInput(format!(
            "depth_skip: block '{label}' contains an exit branch"
        )));
    }
    let member_ids: BTreeSet<&NodeId> = members.iter().map(|n| &n.id).collect();
    let producers = graph.producers();
    let consumers = graph.consumers();

    let mut boundary_in: Vec<&TensorId> = Vec::new();
    let mut boundary_out: Vec<&TensorId> = Vec::new();
    for node in &members {
        for input in &node.inputs {
            match producers.get(input) {
                Some(p) if member_ids.contains(*p) => {}
                _ => {
                    if !boundary_in.contains(&input) {
                        boundary_in.push(input);
                    }
                }
            }
        }
        for output in &node.outputs {
            let escapes = match consumers.get(output) {
                Some(cs) => cs.iter().any(|c| !member_ids.contains(*c)),
                None => true,
            };
            if escapes && !boundary_out.contains(&output) {
                boundary_out.push(output);
            }
        }
    }
    if boundary_in.len() != 1 || boundary_out.len() != 1 {
        return Err(Error::InvalidInput(format!(
            "depth_skip: block '{label}' is not a single-input single-output chain"
        )));
    }
    let (t_in, t_out) = (boundary_in[0].clone(), boundary_out[0].clone());
    {
        let (a, b) = (&graph.tensors[&t_in], &graph.tensors[&t_out]);
        if a.shape != b.shape || a.elem_bits != b.elem_bits {
            return Err(Error::InvalidInput(format!(
                "depth_skip: block '{label}' does not preserve its input shape"
            )));
        }
    }

    let internal_tensors: BTreeSet<&TensorId> =
        members.iter().flat_map(|n| n.outputs.iter()).collect();
    let nodes: Vec<OperatorNode> = graph
        .nodes
        .values()
        .filter(|n| !member_ids.contains(&n.id))
        .map(|n| {
            let mut n = n.clone();
            for input in n.inputs.iter_mut() {
                if *input == t_out {
                    *input = t_in.clone();
                }
            }
            n
        })
        .collect();
    let referenced: BTreeSet<&TensorId> = nodes
        .iter()
        .flat_map(|n| n.inputs.iter().chain(n.outputs.iter()))
        .collect();
    let tensors: Vec<TensorSpec> = graph
        .tensors
        .values()
        .filter(|t| !internal_tensors.contains(&t.id) && referenced.contains(&t.id))
        .cloned()
        .collect();
    ComputationGraph::new(nodes, tensors, graph.exits.clone(), graph.mode)
}

/// Scale every channel dimension by `factor`, propagating shapes in
/// topological order and recomputing MACs and parameters analytically.
/// Classifier heads feeding exit branches keep their output width.
pub(crate) fn scale_channels(graph: &ComputationGraph, factor: f64) -> Result<ComputationGraph> {
    for t in graph.tensors.values() {
        if !matches!(t.shape.len(), 1 | 3) {
            return Err(Error::InvalidInput(
                "channel scaling supports [c, h, w] and flat [n] tensors only".into(),
            ));
        }
    }
    if graph
        .nodes
        .values()
        .any(|n| matches!(n.kind, OpKind::Gradient | OpKind::WeightUpdate))
    {
        return Err(Error::InvalidInput(
            "apply variants before training-graph construction".into(),
        ));
    }

    let consumers = graph.consumers();
    // Output widths of classifier layers feeding exit branches are
    // task-defined and stay fixed.
    let protected: BTreeSet<&NodeId> = graph
        .nodes
        .values()
        .filter(|n| {
            n.outputs.len() == 1
                && consumers
                    .get(&n.outputs[0])
                    .map(|cs| {
                        !cs.is_empty()
                            && cs.iter().all(|c| graph.nodes[*c].kind == OpKind::ExitBranch)
                    })
                    .unwrap_or(false)
        })
        .map(|n| &n.id)
        .collect();

    let producers = graph.producers();
    let mut new_shapes: BTreeMap<TensorId, Vec<u64>> = BTreeMap::new();
    for t in graph.tensors.values() {
        if !producers.contains_key(&t.id) {
            let mut shape = t.shape.clone();
            shape[0] = scaled_dim(shape[0], factor);
            new_shapes.insert(t.id.clone(), shape);
        }
    }

    let order = graph.topo_sort()?;
    let mut new_nodes: BTreeMap<NodeId, OperatorNode> = BTreeMap::new();
    for id in &order {
        let node = &graph.nodes[id];
        let mut n = node.clone();
        let in_shape = node
            .inputs
            .first()
            .map(|t| new_shapes[t].clone())
            .unwrap_or_default();
        let orig_out = node.outputs.first().map(|t| graph.tensors[t].shape.clone());
        let bias = has_bias(node);
        match node.kind {
            OpKind::Conv | OpKind::PointwiseConv => {
                let in_c = in_shape[0];
                let out_c = if protected.contains(id) {
                    node.attributes.out_channels.unwrap() as u64
                } else {
                    scaled_dim(node.attributes.out_channels.unwrap() as u64, factor)
                };
                let out = orig_out.unwrap();
                let (h, w) = spatial(&out)?;
                let k = node.attributes.kernel.unwrap() as u64;
                n.macs = match node.kind {
                    OpKind::PointwiseConv => h * w * out_c * in_c,
                    _ => zoo::conv_macs(h, w, out_c, in_c, k),
                };
                n.param_bytes = conv_node_params(node.kind, k, in_c, out_c, bias);
                n.attributes.in_channels = Some(in_c as u32);
                n.attributes.out_channels = Some(out_c as u32);
                new_shapes.insert(node.outputs[0].clone(), vec![out_c, h, w]);
            }
            OpKind::DepthwiseConv => {
                let c = in_shape[0];
                let out = orig_out.unwrap();
                let (h, w) = spatial(&out)?;
                let k = node.attributes.kernel.unwrap() as u64;
                n.macs = h * w * c * k * k;
                n.param_bytes = conv_node_params(OpKind::DepthwiseConv, k, c, c, bias);
                n.attributes.in_channels = Some(c as u32);
                n.attributes.out_channels = Some(c as u32);
                new_shapes.insert(node.outputs[0].clone(), vec![c, h, w]);
            }
            OpKind::FullyConnected => {
                let in_f: u64 = in_shape.iter().product();
                let out_f_orig = node.attributes.out_channels.unwrap() as u64;
                let out_f = if protected.contains(id) {
                    out_f_orig
                } else {
                    scaled_dim(out_f_orig, factor)
                };
                let rows = orig_out.as_ref().unwrap().iter().product::<u64>() / out_f_orig;
                n.macs = rows * in_f * out_f;
                n.param_bytes = (in_f * out_f + if bias { out_f } else { 0 }) * F32;
                n.attributes.in_channels = Some(in_f as u32);
                n.attributes.out_channels = Some(out_f as u32);
                let mut out = orig_out.unwrap();
                *out.last_mut().unwrap() = out_f;
                new_shapes.insert(node.outputs[0].clone(), out);
            }
            OpKind::BatchNorm => {
                n.param_bytes = 2 * in_shape[0] * F32;
                new_shapes.insert(node.outputs[0].clone(), in_shape);
            }
            OpKind::Relu | OpKind::Sigmoid | OpKind::Tanh | OpKind::Identity => {
                new_shapes.insert(node.outputs[0].clone(), in_shape);
            }
            OpKind::Pool | OpKind::Reduce => {
                let mut out = orig_out.unwrap();
                out[0] = in_shape[0];
                new_shapes.insert(node.outputs[0].clone(), out);
            }
            OpKind::Add => {
                new_shapes.insert(node.outputs[0].clone(), in_shape);
            }
            OpKind::Concat => {
                let total: u64 = node.inputs.iter().map(|t| new_shapes[t][0]).sum();
                let mut out = orig_out.unwrap();
                out[0] = total;
                new_shapes.insert(node.outputs[0].clone(), out);
            }
            OpKind::ExitBranch | OpKind::Constant => {
                for out in &node.outputs {
                    let shape = if node.kind == OpKind::ExitBranch {
                        in_shape.clone()
                    } else {
                        // Constant data scales with the channel rule.
                        let mut s = graph.tensors[out].shape.clone();
                        s[0] = scaled_dim(s[0], factor);
                        s
                    };
                    new_shapes.insert(out.clone(), shape);
                }
            }
            OpKind::Gradient | OpKind::WeightUpdate => unreachable!(),
        }
        new_nodes.insert(n.id.clone(), n);
    }

    let tensors: Vec<TensorSpec> = graph
        .tensors
        .values()
        .map(|t| {
            let mut t = t.clone();
            if let Some(shape) = new_shapes.get(&t.id) {
                t.shape = shape.clone();
            }
            t
        })
        .collect();
    ComputationGraph::new(
        new_nodes.into_values().collect(),
        tensors,
        graph.exits.clone(),
        graph.mode,
    )
}

/// Factor each full convolution into a rank-limited convolution followed
/// by a pointwise expansion. The rank is chosen so total MACs scale by
/// roughly `rank_ratio`.
pub(crate) fn factor_low_rank(graph: &ComputationGraph, ratio: f64) -> Result<ComputationGraph> {
    rewrite_convs(graph, |node, graph| {
        let a = &node.attributes;
        let (k, in_c, out_c) = (
            a.kernel? as u64,
            a.in_channels? as u64,
            a.out_channels? as u64,
        );
        if k < 2 {
            return None;
        }
        let out_spec = &graph.tensors[&node.outputs[0]];
        let (h, w) = spatial(&out_spec.shape).ok()?;
        let stride = a.stride.unwrap_or(1);
        let rank = (((ratio * (k * k * in_c * out_c) as f64) / (k * k * in_c + out_c) as f64)
            .round() as u64)
            .clamp(1, out_c);
        let bias = has_bias(node);

        let mid = TensorSpec::new(format!("lr__{}", node.outputs[0]), vec![rank, h, w]);
        let narrow = OperatorNode {
            id: node.id.clone(),
            kind: OpKind::Conv,
            inputs: node.inputs.clone(),
            outputs: vec![mid.id.clone()],
            macs: zoo::conv_macs(h, w, rank, in_c, k),
            param_bytes: conv_node_params(OpKind::Conv, k, in_c, rank, false),
            attributes: Attributes::conv(k as u32, stride, in_c as u32, rank as u32),
            block: node.block.clone(),
        };
        let expand = OperatorNode {
            id: NodeId::new(format!("{}__expand", node.id)),
            kind: OpKind::PointwiseConv,
            inputs: vec![mid.id.clone()],
            outputs: node.outputs.clone(),
            macs: h * w * out_c * rank,
            param_bytes: conv_node_params(OpKind::PointwiseConv, 1, rank, out_c, bias),
            attributes: Attributes::conv(1, 1, rank as u32, out_c as u32),
            block: node.block.clone(),
        };
        Some((vec![narrow, expand], vec![mid]))
    })
}

/// Replace each full convolution with a squeeze layer plus 1x1 and 3x3
/// expand layers merged by concat.
pub(crate) fn fire_rewrite(graph: &ComputationGraph, squeeze_ratio: f64) -> Result<ComputationGraph> {
    rewrite_convs(graph, |node, graph| {
        let a = &node.attributes;
        let (k, in_c, out_c) = (
            a.kernel? as u64,
            a.in_channels? as u64,
            a.out_channels? as u64,
        );
        if k < 2 || out_c < 2 {
            return None;
        }
        let out_spec = &graph.tensors[&node.outputs[0]];
        let (h, w) = spatial(&out_spec.shape).ok()?;
        let stride = a.stride.unwrap_or(1);
        let s = ((squeeze_ratio * out_c as f64).round() as u64).clamp(1, out_c);
        let e1 = out_c / 2;
        let e3 = out_c - e1;
        let bias = has_bias(node);

        let t_s = TensorSpec::new(format!("fs__{}", node.outputs[0]), vec![s, h, w]);
        let t_e1 = TensorSpec::new(format!("fe1__{}", node.outputs[0]), vec![e1, h, w]);
        let t_e3 = TensorSpec::new(format!("fe3__{}", node.outputs[0]), vec![e3, h, w]);
        let squeeze = OperatorNode {
            id: node.id.clone(),
            kind: OpKind::PointwiseConv,
            inputs: node.inputs.clone(),
            outputs: vec![t_s.id.clone()],
            macs: h * w * s * in_c,
            param_bytes: conv_node_params(OpKind::PointwiseConv, 1, in_c, s, bias),
            attributes: Attributes::conv(1, stride, in_c as u32, s as u32),
            block: node.block.clone(),
        };
        let expand1 = OperatorNode {
            id: NodeId::new(format!("{}__expand1", node.id)),
            kind: OpKind::PointwiseConv,
            inputs: vec![t_s.id.clone()],
            outputs: vec![t_e1.id.clone()],
            macs: h * w * e1 * s,
            param_bytes: conv_node_params(OpKind::PointwiseConv, 1, s, e1, bias),
            attributes: Attributes::conv(1, 1, s as u32, e1 as u32),
            block: node.block.clone(),
        };
        let expand3 = OperatorNode {
            id: NodeId::new(format!("{}__expand3", node.id)),
            kind: OpKind::Conv,
            inputs: vec![t_s.id.clone()],
            outputs: vec![t_e3.id.clone()],
            macs: zoo::conv_macs(h, w, e3, s, 3),
            param_bytes: conv_node_params(OpKind::Conv, 3, s, e3, bias),
            attributes: Attributes::conv(3, 1, s as u32, e3 as u32),
            block: node.block.clone(),
        };
        let merge = OperatorNode {
            id: NodeId::new(format!("{}__merge", node.id)),
            kind: OpKind::Concat,
            inputs: vec![t_e1.id.clone(), t_e3.id.clone()],
            outputs: node.outputs.clone(),
            macs: 0,
            param_bytes: 0,
            attributes: Attributes::default(),
            block: node.block.clone(),
        };
        Some((vec![squeeze, expand1, expand3, merge], vec![t_s, t_e1, t_e3]))
    })
}

/// Generate a few intrinsic feature maps with the primary convolution and
/// synthesize the rest with cheap depthwise ops. `expand > 1` grows the
/// internal map pool (projected back to the original width), which can
/// raise MACs above the original layer.
pub(crate) fn ghost_rewrite(
    graph: &ComputationGraph,
    intrinsic_ratio: f64,
    expand: f64,
) -> Result<ComputationGraph> {
    rewrite_convs(graph, |node, graph| {
        let a = &node.attributes;
        let (k, in_c, out_c) = (
            a.kernel? as u64,
            a.in_channels? as u64,
            a.out_channels? as u64,
        );
        if k < 2 {
            return None;
        }
        let out_total = ((out_c as f64 * expand).round() as u64).max(out_c);
        let m = ((intrinsic_ratio * out_c as f64).round() as u64).clamp(1, out_total);
        let ghosts = out_total - m;
        if ghosts == 0 && out_total == out_c {
            return None; // degenerate: identical to the original conv
        }
        let out_spec = &graph.tensors[&node.outputs[0]];
        let (h, w) = spatial(&out_spec.shape).ok()?;
        let stride = a.stride.unwrap_or(1);
        let bias = has_bias(node);

        let mut nodes = Vec::new();
        let mut tensors = Vec::new();
        let t_primary = TensorSpec::new(format!("gp__{}", node.outputs[0]), vec![m, h, w]);
        nodes.push(OperatorNode {
            id: node.id.clone(),
            kind: OpKind::Conv,
            inputs: node.inputs.clone(),
            outputs: vec![t_primary.id.clone()],
            macs: zoo::conv_macs(h, w, m, in_c, k),
            param_bytes: conv_node_params(OpKind::Conv, k, in_c, m, bias),
            attributes: Attributes::conv(k as u32, stride, in_c as u32, m as u32),
            block: node.block.clone(),
        });
        let t_ghost = TensorSpec::new(format!("gg__{}", node.outputs[0]), vec![ghosts.max(1), h, w]);
        let mut concat_inputs = vec![t_primary.id.clone()];
        tensors.push(t_primary);
        if ghosts > 0 {
            nodes.push(OperatorNode {
                id: NodeId::new(format!("{}__ghost", node.id)),
                kind: OpKind::DepthwiseConv,
                inputs: vec![concat_inputs[0].clone()],
                outputs: vec![t_ghost.id.clone()],
                macs: h * w * ghosts * 9,
                param_bytes: 9 * ghosts * F32,
                attributes: Attributes::conv(3, 1, m as u32, ghosts as u32),
                block: node.block.clone(),
            });
            concat_inputs.push(t_ghost.id.clone());
            tensors.push(t_ghost);
        }
        if out_total == out_c {
            nodes.push(OperatorNode {
                id: NodeId::new(format!("{}__merge", node.id)),
                kind: OpKind::Concat,
                inputs: concat_inputs,
                outputs: node.outputs.clone(),
                macs: 0,
                param_bytes: 0,
                attributes: Attributes::default(),
                block: node.block.clone(),
            });
        } else {
            let t_pool = TensorSpec::new(
                format!("gm__{}", node.outputs[0]),
                vec![out_total, h, w],
            );
            nodes.push(OperatorNode {
                id: NodeId::new(format!("{}__merge", node.id)),
                kind: OpKind::Concat,
                inputs: concat_inputs,
                outputs: vec![t_pool.id.clone()],
                macs: 0,
                param_bytes: 0,
                attributes: Attributes::default(),
                block: node.block.clone(),
            });
            nodes.push(OperatorNode {
                id: NodeId::new(format!("{}__proj", node.id)),
                kind: OpKind::PointwiseConv,
                inputs: vec![t_pool.id.clone()],
                outputs: node.outputs.clone(),
                macs: h * w * out_c * out_total,
                param_bytes: conv_node_params(OpKind::PointwiseConv, 1, out_total, out_c, bias),
                attributes: Attributes::conv(1, 1, out_total as u32, out_c as u32),
                block: node.block.clone(),
            });
            tensors.push(t_pool);
        }
        Some((nodes, tensors))
    })
}

/// Shared conv-rewrite driver: `f` maps an eligible node to replacement
/// nodes and new intermediate tensors, or `None` to keep it.
fn rewrite_convs<F>(graph: &ComputationGraph, f: F) -> Result<ComputationGraph>
where
    F: Fn(&OperatorNode, &ComputationGraph) -> Option<(Vec<OperatorNode>, Vec<TensorSpec>)>,
{
    let mut nodes: Vec<OperatorNode> = Vec::new();
    let mut extra_tensors: Vec<TensorSpec> = Vec::new();
    for node in graph.nodes.values() {
        if node.kind == OpKind::Conv && node.outputs.len() == 1 {
            if let Some((replacement, tensors)) = f(node, graph) {
                nodes.extend(replacement);
                extra_tensors.extend(tensors);
                continue;
            }
        }
        nodes.push(node.clone());
    }
    let mut tensors: Vec<TensorSpec> = graph.tensors.values().cloned().collect();
    tensors.extend(extra_tensors);
    ComputationGraph::new(nodes, tensors, graph.exits.clone(), graph.mode)
}
