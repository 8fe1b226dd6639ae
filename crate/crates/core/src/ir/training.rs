//! Training-graph construction: mirrors every parameterized forward node
//! with a gradient node and a weight-update node.
//!
//! The gradient node consumes the forward node's saved output activation
//! plus the activation gradient flowing back from the next parameterized
//! layer, and produces two tensors: a weight gradient (consumed by the
//! update node) and an activation gradient (consumed by the previous
//! layer's gradient node). Saved activations therefore stay live until
//! their gradient consumers run.

use super::{
    Attributes, ComputationGraph, Mode, NodeId, OperatorNode, TensorId, TensorSpec,
};
use crate::error::{Error, Result};

pub fn gradient_node_id(forward: &NodeId) -> NodeId {
    NodeId::new(format!("grad__{forward}"))
}

pub fn update_node_id(forward: &NodeId) -> NodeId {
    NodeId::new(format!("upd__{forward}"))
}

/// True for tensors produced by gradient nodes that hold weight gradients.
pub fn is_weight_gradient(id: &TensorId) -> bool {
    id.as_str().starts_with("gw__")
}

pub fn make_training_graph(graph: &ComputationGraph) -> Result<ComputationGraph> {
    if graph.mode != Mode::InferenceOnly {
        return Err(Error::InvalidInput(
            "make_training_graph expects an inference-only graph".into(),
        ));
    }
    let order = graph.topo_sort()?;
    let mut nodes: Vec<OperatorNode> = graph.nodes.values().cloned().collect();
    let mut tensors: Vec<TensorSpec> = graph.tensors.values().cloned().collect();

    let mut prev_activation_grad: Option<TensorId> = None;
    for fwd_id in order.iter().rev() {
        let fwd = &graph.nodes[fwd_id];
        if fwd.param_bytes == 0 {
            continue;
        }
        let saved_activation = fwd.outputs.first().ok_or_else(|| {
            Error::Structural(format!("parameterized node {fwd_id} has no output"))
        })?;

        let weight_grad = TensorId::new(format!("gw__{fwd_id}"));
        tensors.push(TensorSpec::new(
            weight_grad.as_str(),
            vec![fwd.param_bytes / super::zoo::F32_BYTES],
        ));
        // Gradient w.r.t. the layer input, shaped like the input activation
        // (falls back to the output shape for source layers).
        let act_grad_shape = fwd
            .inputs
            .first()
            .map(|t| graph.tensors[t].shape.clone())
            .unwrap_or_else(|| graph.tensors[saved_activation].shape.clone());
        let act_grad = TensorId::new(format!("ga__{fwd_id}"));
        tensors.push(TensorSpec::new(act_grad.as_str(), act_grad_shape));

        let mut grad_inputs = vec![saved_activation.clone()];
        if let Some(prev) = prev_activation_grad.take() {
            grad_inputs.push(prev);
        }
        nodes.push(OperatorNode {
            id: gradient_node_id(fwd_id),
            kind: super::OpKind::Gradient,
            inputs: grad_inputs,
            outputs: vec![weight_grad.clone(), act_grad.clone()],
            macs: fwd.macs * 2,
            param_bytes: 0,
            attributes: Attributes::default(),
            block: None,
        });
        nodes.push(OperatorNode {
            id: update_node_id(fwd_id),
            kind: super::OpKind::WeightUpdate,
            inputs: vec![weight_grad],
            outputs: vec![],
            macs: fwd.param_bytes / super::zoo::F32_BYTES,
            param_bytes: 0,
            attributes: Attributes::default(),
            block: None,
        });
        prev_activation_grad = Some(act_grad);
    }

    ComputationGraph::new(nodes, tensors, graph.exits.clone(), Mode::Training)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{GraphBuilder, OpKind};

    fn fc_chain(layers: usize) -> ComputationGraph {
        let mut b = GraphBuilder::new();
        let mut t = b.tensor("t000", vec![64]);
        for i in 0..layers {
            let out = b.tensor(format!("t{:03}", i + 1), vec![64]);
            b.node(
                format!("fc{i}"),
                OpKind::FullyConnected,
                vec![t],
                vec![out.clone()],
                64 * 64,
                (64 * 64 + 64) * 4,
                Attributes::fc(64, 64),
                None,
            );
            t = out;
        }
        b.finish().unwrap()
    }

    #[test]
    fn single_layer_gets_gradient_and_update() {
        let g = make_training_graph(&fc_chain(1)).unwrap();
        assert_eq!(g.mode, Mode::Training);
        assert_eq!(g.nodes.len(), 3);
        assert!(g.nodes.contains_key(&NodeId::new("grad__fc0")));
        assert!(g.nodes.contains_key(&NodeId::new("upd__fc0")));
        // The saved activation is consumed by the gradient node.
        let grad = &g.nodes[&NodeId::new("grad__fc0")];
        assert!(grad.inputs.contains(&TensorId::new("t001")));
    }

    #[test]
    fn backward_order_is_reverse_of_forward() {
        let g = make_training_graph(&fc_chain(3)).unwrap();
        let order = g.topo_sort().unwrap();
        let pos = |id: &str| order.iter().position(|n| n.as_str() == id).unwrap();
        assert!(pos("grad__fc2") < pos("grad__fc1"));
        assert!(pos("grad__fc1") < pos("grad__fc0"));
        assert!(pos("fc2") < pos("grad__fc2"));
    }

    #[test]
    fn training_on_training_graph_rejected() {
        let g = make_training_graph(&fc_chain(1)).unwrap();
        assert!(make_training_graph(&g).is_err());
    }

    #[test]
    fn first_layer_activation_has_longest_lifetime() {
        // In a 3-layer chain the layer-1 activation is produced first and
        // consumed by the last gradient node, so its lifetime dominates.
        let g = make_training_graph(&fc_chain(3)).unwrap();
        let order = g.topo_sort().unwrap();
        let lifetimes = crate::passes::memory::tensor_lifetimes(&g, &order);
        let span = |id: &str| {
            let lt = &lifetimes[&TensorId::new(id)];
            lt.last_use - lt.first_use
        };
        assert!(span("t001") > span("t002"));
        assert!(span("t001") > span("t003"));
    }
}
