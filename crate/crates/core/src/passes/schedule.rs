//! Cross-core list scheduling for inter-operator parallelism.
//!
//! Classic list scheduling over identical cores with critical-path
//! priority. Any such schedule obeys the Graham bounds
//! `max(critical_path, work/k) <= makespan <= critical_path + work/k`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::cost::{node_latency, DeviceProfile, EstimateContext};
use crate::error::Result;
use crate::ir::{ComputationGraph, NodeId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduledNode {
    pub node: NodeId,
    pub core: u32,
    pub start: f64,
    pub finish: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParallelSchedule {
    pub cores: u32,
    pub entries: Vec<ScheduledNode>,
    pub makespan: f64,
}

/// List-schedule arbitrary task DAGs: `durations` per node, precedence
/// `edges` as (predecessor, successor). Priority is descending
/// critical-path length with node id as tie-break.
pub fn list_schedule(
    durations: &BTreeMap<NodeId, f64>,
    edges: &[(NodeId, NodeId)],
    cores: u32,
) -> ParallelSchedule {
    assert!(cores >= 1, "need at least one core");
    let rank = critical_path_ranks(durations, edges);
    let mut indegree: BTreeMap<&NodeId, usize> = durations.keys().map(|n| (n, 0)).collect();
    let mut succs: BTreeMap<&NodeId, Vec<&NodeId>> = BTreeMap::new();
    for (p, c) in edges {
        *indegree.get_mut(c).expect("edge endpoint") += 1;
        succs.entry(p).or_default().push(c);
    }

    // Ready queue ordered by (descending rank, id).
    let mut ready: Vec<&NodeId> = indegree
        .iter()
        .filter(|(_, &d)| d == 0)
        .map(|(n, _)| *n)
        .collect();
    let sort_ready = |v: &mut Vec<&NodeId>| {
        v.sort_by(|a, b| {
            rank[*b]
                .partial_cmp(&rank[*a])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(b))
        });
    };
    sort_ready(&mut ready);

    let mut core_free = vec![0f64; cores as usize];
    let mut finish_time: BTreeMap<&NodeId, f64> = BTreeMap::new();
    let mut entries = Vec::with_capacity(durations.len());
    let mut remaining_preds = indegree;

    while !ready.is_empty() {
        let node = ready.remove(0);
        // Earliest core, lowest index on ties.
        let (core, free_at) = core_free
            .iter()
            .enumerate()
            .min_by(|(ai, a), (bi, b)| a.partial_cmp(b).unwrap().then(ai.cmp(bi)))
            .map(|(i, &t)| (i, t))
            .unwrap();
        let data_ready = preds_of(node, edges)
            .map(|p| finish_time[p])
            .fold(0f64, f64::max);
        let start = free_at.max(data_ready);
        let finish = start + durations[node];
        core_free[core] = finish;
        finish_time.insert(node, finish);
        entries.push(ScheduledNode {
            node: node.clone(),
            core: core as u32,
            start,
            finish,
        });
        if let Some(ss) = succs.get(node) {
            let mut became_ready = Vec::new();
            for s in ss {
                let d = remaining_preds.get_mut(s).unwrap();
                *d -= 1;
                if *d == 0 {
                    became_ready.push(*s);
                }
            }
            ready.extend(became_ready);
            sort_ready(&mut ready);
        }
    }

    let makespan = entries.iter().map(|e| e.finish).fold(0f64, f64::max);
    ParallelSchedule {
        cores,
        entries,
        makespan,
    }
}

fn preds_of<'a>(
    node: &NodeId,
    edges: &'a [(NodeId, NodeId)],
) -> impl Iterator<Item = &'a NodeId> {
    let node = node.clone();
    edges
        .iter()
        .filter(move |(_, c)| *c == node)
        .map(|(p, _)| p)
}

/// Longest path (in duration) starting at each node, inclusive.
pub fn critical_path_ranks(
    durations: &BTreeMap<NodeId, f64>,
    edges: &[(NodeId, NodeId)],
) -> BTreeMap<NodeId, f64> {
    let mut succs: BTreeMap<&NodeId, Vec<&NodeId>> = BTreeMap::new();
    let mut indegree: BTreeMap<&NodeId, usize> = durations.keys().map(|n| (n, 0)).collect();
    for (p, c) in edges {
        succs.entry(p).or_default().push(c);
        *indegree.get_mut(c).unwrap() += 1;
    }
    // Reverse topological accumulation.
    let mut order: Vec<&NodeId> = Vec::new();
    let mut queue: Vec<&NodeId> = indegree
        .iter()
        .filter(|(_, &d)| d == 0)
        .map(|(n, _)| *n)
        .collect();
    let mut remaining = indegree;
    while let Some(n) = queue.pop() {
        order.push(n);
        if let Some(ss) = succs.get(n) {
            for s in ss {
                let d = remaining.get_mut(s).unwrap();
                *d -= 1;
                if *d == 0 {
                    queue.push(s);
                }
            }
        }
    }
    let mut rank: BTreeMap<NodeId, f64> = BTreeMap::new();
    for n in order.into_iter().rev() {
        let best_succ = succs
            .get(n)
            .into_iter()
            .flatten()
            .map(|s| rank[*s])
            .fold(0f64, f64::max);
        rank.insert(n.clone(), durations[n] + best_succ);
    }
    rank
}

pub fn critical_path_length(
    durations: &BTreeMap<NodeId, f64>,
    edges: &[(NodeId, NodeId)],
) -> f64 {
    critical_path_ranks(durations, edges)
        .values()
        .fold(0f64, |a, &b| a.max(b))
}

/// Schedule a computation graph on `cores` identical cores of `device`,
/// with per-node durations from the latency model.
pub fn schedule_parallel(
    graph: &ComputationGraph,
    device: &DeviceProfile,
    ctx: &EstimateContext,
    cores: u32,
) -> Result<ParallelSchedule> {
    graph.topo_sort()?; // structural check
    let durations: BTreeMap<NodeId, f64> = graph
        .nodes
        .values()
        .map(|n| (n.id.clone(), node_latency(graph, n, device, ctx)))
        .collect();
    Ok(list_schedule(&durations, &graph.edges(), cores))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(names: &[&str]) -> Vec<NodeId> {
        names.iter().map(|n| NodeId::new(*n)).collect()
    }

    fn durations(items: &[(&str, f64)]) -> BTreeMap<NodeId, f64> {
        items.iter().map(|(n, d)| (NodeId::new(*n), *d)).collect()
    }

    #[test]
    fn chain_makespan_is_sum() {
        let d = durations(&[("a", 1.0), ("b", 2.0), ("c", 3.0)]);
        let e = vec![
            (NodeId::new("a"), NodeId::new("b")),
            (NodeId::new("b"), NodeId::new("c")),
        ];
        for k in [1, 2, 4] {
            let s = list_schedule(&d, &e, k);
            assert_eq!(s.makespan, 6.0);
        }
    }

    #[test]
    fn independent_pair_runs_concurrently() {
        let d = durations(&[("a", 2.0), ("b", 2.0)]);
        let s = list_schedule(&d, &[], 2);
        assert_eq!(s.makespan, 2.0);
        let _ = ids(&["a", "b"]);
    }

    #[test]
    fn schedule_respects_precedence() {
        let d = durations(&[("a", 1.0), ("b", 1.0), ("c", 2.0), ("d", 1.0)]);
        let e = vec![
            (NodeId::new("a"), NodeId::new("b")),
            (NodeId::new("a"), NodeId::new("c")),
            (NodeId::new("b"), NodeId::new("d")),
            (NodeId::new("c"), NodeId::new("d")),
        ];
        let s = list_schedule(&d, &e, 2);
        let by_id: BTreeMap<&NodeId, &ScheduledNode> =
            s.entries.iter().map(|en| (&en.node, en)).collect();
        for (p, c) in &e {
            assert!(by_id[p].finish <= by_id[c].start + 1e-12);
        }
        assert_eq!(s.makespan, 4.0); // a, then b || c, then d
    }
}
