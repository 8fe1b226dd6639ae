//! Tensor-lifetime analysis and static memory allocation.
//!
//! Lifetimes are expressed in execution steps of a fixed node order. The
//! allocator is first-fit: tensors sorted by (first use, size descending)
//! are placed at the lowest offset that does not overlap any live
//! conflicting placement.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::ir::{ComputationGraph, NodeId, TensorId};

/// Inclusive live interval in execution steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lifetime {
    pub first_use: usize,
    pub last_use: usize,
}

impl Lifetime {
    pub fn overlaps(&self, other: &Lifetime) -> bool {
        self.first_use <= other.last_use && other.first_use <= self.last_use
    }
}

/// Lifetimes of every tensor under the given execution order. A produced
/// tensor lives from its producer's step to its last consumer's step;
/// graph inputs live from step 0.
pub fn tensor_lifetimes(
    graph: &ComputationGraph,
    order: &[NodeId],
) -> BTreeMap<TensorId, Lifetime> {
    let step_of: BTreeMap<&NodeId, usize> = order.iter().enumerate().map(|(i, n)| (n, i)).collect();
    let mut lifetimes: BTreeMap<TensorId, Lifetime> = BTreeMap::new();
    for (id, node) in &graph.nodes {
        let step = step_of[id];
        for out in &node.outputs {
            let lt = lifetimes.entry(out.clone()).or_insert(Lifetime {
                first_use: step,
                last_use: step,
            });
            lt.first_use = lt.first_use.min(step);
            lt.last_use = lt.last_use.max(step);
        }
    }
    for (id, node) in &graph.nodes {
        let step = step_of[id];
        for input in &node.inputs {
            let lt = lifetimes.entry(input.clone()).or_insert(Lifetime {
                // No producer: a graph input, live from the start.
                first_use: 0,
                last_use: step,
            });
            lt.last_use = lt.last_use.max(step);
        }
    }
    lifetimes
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub offset: u64,
    pub size: u64,
    pub interval: Lifetime,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MemoryLayout {
    pub placements: BTreeMap<TensorId, Placement>,
    /// High-water mark of the arena.
    pub peak_bytes: u64,
}

impl MemoryLayout {
    /// Exhaustive pairwise check that no two temporally overlapping
    /// tensors share address space.
    pub fn check_no_overlap(&self) -> bool {
        let all: Vec<&Placement> = self.placements.values().collect();
        for (i, a) in all.iter().enumerate() {
            for b in &all[i + 1..] {
                if a.interval.overlaps(&b.interval)
                    && a.offset < b.offset + b.size
                    && b.offset < a.offset + a.size
                {
                    return false;
                }
            }
        }
        true
    }
}

/// First-fit offset allocation over live intervals.
pub fn allocate_memory(requests: &BTreeMap<TensorId, (u64, Lifetime)>) -> MemoryLayout {
    let mut sorted: Vec<(&TensorId, &(u64, Lifetime))> = requests.iter().collect();
    sorted.sort_by(|(ai, (asz, alt)), (bi, (bsz, blt))| {
        alt.first_use
            .cmp(&blt.first_use)
            .then(bsz.cmp(asz))
            .then(ai.cmp(bi))
    });

    let mut layout = MemoryLayout::default();
    for (id, (size, interval)) in sorted {
        let mut conflicts: Vec<(u64, u64)> = layout
            .placements
            .values()
            .filter(|p| p.interval.overlaps(interval))
            .map(|p| (p.offset, p.offset + p.size))
            .collect();
        conflicts.sort_unstable();
        let mut offset = 0u64;
        for (start, end) in conflicts {
            if offset + size <= start {
                break;
            }
            offset = offset.max(end);
        }
        layout.placements.insert(
            id.clone(),
            Placement {
                offset,
                size: *size,
                interval: *interval,
            },
        );
        layout.peak_bytes = layout.peak_bytes.max(offset + size);
    }
    layout
}

/// Max over steps of the total bytes simultaneously live: a lower bound
/// on any layout's peak.
pub fn live_set_lower_bound(requests: &BTreeMap<TensorId, (u64, Lifetime)>) -> u64 {
    let max_step = requests
        .values()
        .map(|(_, lt)| lt.last_use)
        .max()
        .unwrap_or(0);
    let mut deltas = vec![0i64; max_step + 2];
    for (size, lt) in requests.values() {
        deltas[lt.first_use] += *size as i64;
        deltas[lt.last_use + 1] -= *size as i64;
    }
    let mut live = 0i64;
    let mut peak = 0i64;
    for d in deltas {
        live += d;
        peak = peak.max(live);
    }
    peak as u64
}

/// Activation requests (size and lifetime of every tensor) for a graph
/// under the given order. Parameters are node fields, not tensors, so
/// everything in the map is activation memory.
pub fn activation_requests(
    graph: &ComputationGraph,
    order: &[NodeId],
) -> BTreeMap<TensorId, (u64, Lifetime)> {
    tensor_lifetimes(graph, order)
        .into_iter()
        .map(|(id, lt)| {
            let bytes = graph.tensors[&id].bytes();
            (id, (bytes, lt))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req(items: &[(&str, u64, usize, usize)]) -> BTreeMap<TensorId, (u64, Lifetime)> {
        items
            .iter()
            .map(|(id, sz, a, b)| {
                (
                    TensorId::new(*id),
                    (
                        *sz,
                        Lifetime {
                            first_use: *a,
                            last_use: *b,
                        },
                    ),
                )
            })
            .collect()
    }

    #[test]
    fn single_tensor_peak_is_its_size() {
        let layout = allocate_memory(&req(&[("a", 64, 0, 3)]));
        assert_eq!(layout.peak_bytes, 64);
        assert!(layout.check_no_overlap());
    }

    #[test]
    fn disjoint_lifetimes_reuse_offsets() {
        let layout = allocate_memory(&req(&[("a", 64, 0, 1), ("b", 64, 2, 3)]));
        assert_eq!(layout.peak_bytes, 64);
        assert_eq!(layout.placements[&TensorId::new("b")].offset, 0);
    }

    #[test]
    fn overlapping_lifetimes_stack() {
        let layout = allocate_memory(&req(&[("a", 64, 0, 2), ("b", 32, 1, 3)]));
        assert_eq!(layout.peak_bytes, 96);
        assert!(layout.check_no_overlap());
    }

    #[test]
    fn lower_bound_is_live_set_peak() {
        let r = req(&[("a", 64, 0, 2), ("b", 32, 1, 3), ("c", 16, 4, 5)]);
        assert_eq!(live_set_lower_bound(&r), 96);
    }

    #[test]
    fn first_fit_fills_gaps() {
        // a occupies [0,64) through step 4; b [64,96) only step 0..1;
        // c (24 bytes, steps 2..4) fits into b's vacated hole at 64.
        let layout = allocate_memory(&req(&[
            ("a", 64, 0, 4),
            ("b", 32, 0, 1),
            ("c", 24, 2, 4),
        ]));
        assert_eq!(layout.placements[&TensorId::new("c")].offset, 64);
        assert_eq!(layout.peak_bytes, 96);
    }
}
