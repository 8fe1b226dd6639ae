//! Training-memory planning under a byte budget.
//!
//! The planner first fuses each gradient node with its weight-update node
//! (dropping the weight-gradient intermediate), orders execution with the
//! reordered backward pass, then runs a greedy priority loop: while the
//! simulated peak exceeds the budget, apply to one live-at-peak tensor
//! the action with the best bytes-saved per added-latency ratio. If every
//! action is exhausted it can optionally halve the batch (recording the
//! gradient-accumulation step count) before marking the plan infeasible.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::cost::{node_latency, DeviceProfile, EstimateContext};
use crate::error::{Error, Result};
use crate::ir::training::is_weight_gradient;
use crate::ir::{ComputationGraph, Mode, NodeId, OpKind, OperatorNode, TensorId};

use super::backprop::reorder_backprop;
use super::memory::{tensor_lifetimes, Lifetime};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "action")]
pub enum TensorAction {
    /// Drop after the forward pass, recompute from the producer before
    /// the backward consumer runs.
    Recompute,
    /// Move to slow memory between forward production and backward use.
    SwapOut,
    /// Keep resident at a reduced bit width between production and the
    /// final (decoded) use.
    Compress { bits: u32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingPlanOptions {
    pub backward_fusion: bool,
    pub enable_compress: bool,
    pub enable_swap: bool,
    pub enable_recompute: bool,
    pub compress_bits: u32,
    /// Accuracy deltas (percentage points) charged per compressed tensor.
    pub compress_delta_8bit: f64,
    pub compress_delta_4bit: f64,
    pub enable_batch_split: bool,
    pub max_batch_splits: u32,
}

impl Default for TrainingPlanOptions {
    fn default() -> Self {
        Self {
            backward_fusion: true,
            enable_compress: true,
            enable_swap: true,
            enable_recompute: true,
            compress_bits: 8,
            compress_delta_8bit: -0.5,
            compress_delta_4bit: -2.0,
            enable_batch_split: false,
            max_batch_splits: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMemoryPlan {
    pub actions: BTreeMap<TensorId, TensorAction>,
    pub added_latency_s: f64,
    pub peak_bytes: u64,
    pub budget_bytes: u64,
    pub feasible: bool,
    /// 1 when the batch was not split; doubles per split.
    pub grad_accum_steps: u32,
    pub backward_fused: bool,
    /// Accumulated accuracy delta from lossy compression.
    pub accuracy_delta: f64,
}

/// Fuse every gradient node with its weight-update node when the weight
/// gradient has no other consumer. The weight-gradient tensor leaves the
/// footprint entirely.
pub fn fuse_backward_pairs(graph: &ComputationGraph) -> Result<ComputationGraph> {
    let consumers = graph.consumers();
    let mut drop_nodes: Vec<NodeId> = Vec::new();
    let mut drop_tensors: Vec<TensorId> = Vec::new();
    let mut extra_macs: BTreeMap<NodeId, u64> = BTreeMap::new();

    for node in graph.nodes.values() {
        if node.kind != OpKind::Gradient {
            continue;
        }
        let Some(wg) = node.outputs.iter().find(|t| is_weight_gradient(t)) else {
            continue;
        };
        match consumers.get(wg).map(|v| v.as_slice()) {
            Some([upd]) if graph.nodes[*upd].kind == OpKind::WeightUpdate => {
                drop_nodes.push((*upd).clone());
                drop_tensors.push(wg.clone());
                extra_macs.insert(node.id.clone(), graph.nodes[*upd].macs);
            }
            _ => {}
        }
    }

    let nodes: Vec<OperatorNode> = graph
        .nodes
        .values()
        .filter(|n| !drop_nodes.contains(&n.id))
        .map(|n| {
            let mut n = n.clone();
            if let Some(extra) = extra_macs.get(&n.id) {
                n.macs += extra;
                n.outputs.retain(|t| !drop_tensors.contains(t));
            }
            n
        })
        .collect();
    let tensors = graph
        .tensors
        .values()
        .filter(|t| !drop_tensors.contains(&t.id))
        .cloned()
        .collect();
    ComputationGraph::new(nodes, tensors, graph.exits.clone(), graph.mode)
}

/// Activation bytes occupied by one tensor at one step, given its action
/// and batch scaling.
fn bytes_at_step(
    full_bytes: u64,
    lt: &Lifetime,
    step: usize,
    action: Option<&TensorAction>,
) -> u64 {
    if step < lt.first_use || step > lt.last_use {
        return 0;
    }
    let at_boundary = step == lt.first_use || step == lt.last_use;
    match action {
        None => full_bytes,
        Some(TensorAction::Compress { bits }) => {
            if at_boundary {
                full_bytes
            } else {
                full_bytes * *bits as u64 / 32
            }
        }
        Some(TensorAction::SwapOut) | Some(TensorAction::Recompute) => {
            if at_boundary {
                full_bytes
            } else {
                0
            }
        }
    }
}

fn scaled_bytes(graph: &ComputationGraph, id: &TensorId, batch_splits: u32) -> u64 {
    let bytes = graph.tensors[id].bytes();
    if is_weight_gradient(id) {
        bytes // weight gradients are sized by parameters, not batch
    } else {
        bytes / (1u64 << batch_splits)
    }
}

/// Step-by-step re-simulation of memory under a plan's actions. Returns
/// (peak bytes, step at which the peak occurs). Resident parameters are
/// included in every step.
pub fn simulate_peak(
    graph: &ComputationGraph,
    order: &[NodeId],
    actions: &BTreeMap<TensorId, TensorAction>,
    batch_splits: u32,
) -> (u64, usize) {
    let params: u64 = graph.nodes.values().map(|n| n.param_bytes).sum();
    let lifetimes = tensor_lifetimes(graph, order);
    let mut peak = params;
    let mut peak_step = 0usize;
    for step in 0..order.len() {
        let mut live = params;
        for (id, lt) in &lifetimes {
            live += bytes_at_step(
                scaled_bytes(graph, id, batch_splits),
                lt,
                step,
                actions.get(id),
            );
        }
        if live > peak {
            peak = live;
            peak_step = step;
        }
    }
    (peak, peak_step)
}

pub fn plan_training_memory(
    graph: &ComputationGraph,
    budget_bytes: u64,
    device: &DeviceProfile,
    opts: &TrainingPlanOptions,
) -> Result<TrainingMemoryPlan> {
    if graph.mode != Mode::Training {
        return Err(Error::InvalidInput(
            "training-memory planning requires a training-mode graph".into(),
        ));
    }
    if budget_bytes == 0 {
        return Err(Error::InvalidInput("budget must be > 0".into()));
    }

    let working = if opts.backward_fusion {
        fuse_backward_pairs(graph)?
    } else {
        graph.clone()
    };
    let order = reorder_backprop(&working)?;
    let lifetimes = tensor_lifetimes(&working, &order);
    let producers: BTreeMap<TensorId, NodeId> = working
        .producers()
        .into_iter()
        .map(|(t, n)| (t.clone(), n.clone()))
        .collect();
    let ctx = EstimateContext::default();

    let mut actions: BTreeMap<TensorId, TensorAction> = BTreeMap::new();
    let mut added_latency = 0f64;
    let mut accuracy_delta = 0f64;
    let mut batch_splits = 0u32;

    let (mut peak, mut peak_step) = simulate_peak(&working, &order, &actions, batch_splits);
    let max_iterations = working.tensors.len() * 2 + opts.max_batch_splits as usize + 4;
    for _ in 0..max_iterations {
        if peak <= budget_bytes {
            break;
        }
        // Candidate actions on tensors live (and reducible) at the peak step.
        let mut best: Option<(f64, u64, u8, &TensorId, TensorAction, f64)> = None;
        for (id, lt) in &lifetimes {
            if actions.contains_key(id) {
                continue;
            }
            if peak_step <= lt.first_use || peak_step >= lt.last_use {
                continue; // actions only shrink the interior of the interval
            }
            let Some(producer_id) = producers.get(id) else {
                continue; // graph inputs stay resident
            };
            let producer = &working.nodes[producer_id];
            if matches!(producer.kind, OpKind::Gradient | OpKind::WeightUpdate) {
                continue; // only forward activations are managed
            }
            let full = scaled_bytes(&working, id, batch_splits);
            let mut candidates: Vec<(TensorAction, u64, f64, u8)> = Vec::new();
            if opts.enable_compress
                && working.tensors[id].elem_bits == 32
                && matches!(
                    producer.kind,
                    OpKind::Pool | OpKind::Relu | OpKind::Sigmoid | OpKind::Tanh
                )
            {
                let bits = opts.compress_bits;
                let saved = full - full * bits as u64 / 32;
                let lat = device.codec_rate * full as f64;
                candidates.push((TensorAction::Compress { bits }, saved, lat, 0));
            }
            if opts.enable_swap {
                let lat = 2.0 * full as f64 / device.swap_bandwidth;
                candidates.push((TensorAction::SwapOut, full, lat, 1));
            }
            if opts.enable_recompute && producer.kind != OpKind::Constant {
                let lat = node_latency(&working, producer, device, &ctx);
                candidates.push((TensorAction::Recompute, full, lat, 2));
            }
            for (action, saved, lat, action_rank) in candidates {
                if saved == 0 {
                    continue;
                }
                let ratio = if lat > 0.0 {
                    saved as f64 / lat
                } else {
                    f64::INFINITY
                };
                let better = match &best {
                    None => true,
                    Some((br, bs, brank, bid, _, _)) => {
                        ratio > *br
                            || (ratio == *br
                                && (saved > *bs
                                    || (saved == *bs
                                        && (action_rank < *brank
                                            || (action_rank == *brank && id < *bid)))))
                    }
                };
                if better {
                    best = Some((ratio, saved, action_rank, id, action, lat));
                }
            }
        }
        match best {
            Some((_, _, _, id, action, lat)) => {
                if let TensorAction::Compress { bits } = action {
                    accuracy_delta += if bits <= 4 {
                        opts.compress_delta_4bit
                    } else {
                        opts.compress_delta_8bit
                    };
                }
                actions.insert(id.clone(), action);
                added_latency += lat;
            }
            None => {
                if opts.enable_batch_split && batch_splits < opts.max_batch_splits {
                    batch_splits += 1;
                } else {
                    break;
                }
            }
        }
        let (p, s) = simulate_peak(&working, &order, &actions, batch_splits);
        peak = p;
        peak_step = s;
    }

    Ok(TrainingMemoryPlan {
        actions,
        added_latency_s: added_latency,
        peak_bytes: peak,
        budget_bytes,
        feasible: peak <= budget_bytes,
        grad_accum_steps: 1 << batch_splits,
        backward_fused: opts.backward_fusion,
        accuracy_delta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::training::make_training_graph;
    use crate::ir::{zoo, Attributes, GraphBuilder};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Conv/relu chain: small parameters, large activations.
    fn conv_chain(layers: usize, hw: u64) -> ComputationGraph {
        let mut b = GraphBuilder::new();
        let mut t = b.tensor("t000", vec![4, hw, hw]);
        for i in 0..layers {
            let conv_out = b.tensor(format!("t{:03}", 2 * i + 1), vec![4, hw, hw]);
            b.node(
                format!("conv{i}"),
                OpKind::Conv,
                vec![t],
                vec![conv_out.clone()],
                zoo::conv_macs(hw, hw, 4, 4, 3),
                9 * 16 * 4,
                Attributes::conv(3, 1, 4, 4),
                None,
            );
            let relu_out = b.tensor(format!("t{:03}", 2 * i + 2), vec![4, hw, hw]);
            b.node(
                format!("relu{i}"),
                OpKind::Relu,
                vec![conv_out],
                vec![relu_out.clone()],
                0,
                0,
                Attributes::default(),
                None,
            );
            t = relu_out;
        }
        b.finish().unwrap()
    }

    fn device() -> DeviceProfile {
        DeviceProfile::cpu("c0", 1e9, 1 << 20, 1 << 30)
    }

    #[test]
    fn generous_budget_needs_no_actions() {
        let g = make_training_graph(&conv_chain(3, 32)).unwrap();
        let plan = plan_training_memory(&g, u64::MAX / 2, &device(), &Default::default()).unwrap();
        assert!(plan.feasible);
        assert!(plan.actions.is_empty());
        assert_eq!(plan.added_latency_s, 0.0);
        assert_eq!(plan.grad_accum_steps, 1);
    }

    #[test]
    fn half_budget_plan_resimulates_under_budget() {
        // Deep enough that the unconstrained peak is well above the
        // occupancy floor at gradient steps.
        let g = make_training_graph(&conv_chain(7, 32)).unwrap();
        let unconstrained =
            plan_training_memory(&g, u64::MAX / 2, &device(), &Default::default()).unwrap();
        let budget = unconstrained.peak_bytes / 2;
        let plan = plan_training_memory(&g, budget, &device(), &Default::default()).unwrap();
        assert!(plan.feasible, "peak {} budget {budget}", plan.peak_bytes);
        assert!(!plan.actions.is_empty());
        assert!(plan.added_latency_s > 0.0);
        // Independent re-simulation honors the budget.
        let working = fuse_backward_pairs(&g).unwrap();
        let order = reorder_backprop(&working).unwrap();
        let (peak, _) = simulate_peak(&working, &order, &plan.actions, 0);
        assert!(peak <= budget);
    }

    #[test]
    fn compression_retains_a_quarter_at_8_bits() {
        assert_eq!(
            bytes_at_step(
                1000,
                &Lifetime {
                    first_use: 0,
                    last_use: 4
                },
                2,
                Some(&TensorAction::Compress { bits: 8 })
            ),
            250
        );
    }

    #[test]
    fn zero_budget_is_an_error() {
        let g = make_training_graph(&conv_chain(2, 16)).unwrap();
        assert!(plan_training_memory(&g, 0, &device(), &Default::default()).is_err());
    }

    #[test]
    fn impossible_budget_flags_infeasible() {
        let g = make_training_graph(&conv_chain(2, 16)).unwrap();
        let plan = plan_training_memory(&g, 1, &device(), &Default::default()).unwrap();
        assert!(!plan.feasible);
        assert!(plan.peak_bytes > 1);
    }

    #[test]
    fn batch_split_records_accumulation_steps() {
        let g = make_training_graph(&conv_chain(3, 64)).unwrap();
        let unconstrained =
            plan_training_memory(&g, u64::MAX / 2, &device(), &Default::default()).unwrap();
        let params: u64 = g.nodes.values().map(|n| n.param_bytes).sum();
        // Budget below what actions alone can reach, above the parameter floor.
        let budget = params + (unconstrained.peak_bytes - params) / 16;
        let opts = TrainingPlanOptions {
            enable_batch_split: true,
            ..Default::default()
        };
        let plan = plan_training_memory(&g, budget, &device(), &opts).unwrap();
        if plan.feasible {
            assert!(plan.grad_accum_steps > 1);
        }
    }

    #[test]
    fn random_budgets_never_exceed_unless_infeasible() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..40 {
            let layers = rng.gen_range(2..5);
            let hw = [16u64, 24, 32][rng.gen_range(0..3)];
            let g = make_training_graph(&conv_chain(layers, hw)).unwrap();
            let unconstrained =
                plan_training_memory(&g, u64::MAX / 2, &device(), &Default::default()).unwrap();
            let budget =
                (unconstrained.peak_bytes as f64 * rng.gen_range(0.2..1.1)) as u64 + 1;
            let plan = plan_training_memory(&g, budget, &device(), &Default::default()).unwrap();
            if plan.feasible {
                assert!(plan.peak_bytes <= budget);
            }
        }
    }

    #[test]
    fn backward_fusion_drops_weight_gradients() {
        let g = make_training_graph(&conv_chain(2, 16)).unwrap();
        let fused = fuse_backward_pairs(&g).unwrap();
        assert!(fused.tensors.keys().all(|t| !is_weight_gradient(t)));
        assert!(fused
            .nodes
            .values()
            .all(|n| n.kind != OpKind::WeightUpdate));
        // Compute is preserved in the merged gradient nodes.
        assert_eq!(fused.total_macs(), g.total_macs());
    }
}
