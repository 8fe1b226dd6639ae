//! Variant design-space enumeration: the Cartesian product of per-family
//! parameter grids and exit choices, restricted to configs that apply
//! cleanly to the target graph.

use serde::{Deserialize, Serialize};

use super::{apply_variant, CompressionOp, VariantConfig};
use crate::ir::ComputationGraph;

/// Per-family parameter grids. Families with an empty grid contribute no
/// op (they are absent from every emitted config, not optional).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DesignGrid {
    pub low_rank_ratios: Vec<f64>,
    pub fire_squeeze_ratios: Vec<f64>,
    /// (width multiplier, depth multiplier) pairs.
    pub composite_scales: Vec<(f64, f64)>,
    /// (intrinsic ratio, expand) pairs.
    pub ghost_ratios: Vec<(f64, f64)>,
    /// Each entry is one set of blocks to skip together.
    pub depth_skip_sets: Vec<Vec<String>>,
    pub channel_keep_ratios: Vec<f64>,
}

impl DesignGrid {
    /// Option lists per family in canonical application order; `None`
    /// entries mean "family not present in this config".
    fn family_choices(&self) -> Vec<Vec<Option<CompressionOp>>> {
        let mut dims: Vec<Vec<Option<CompressionOp>>> = Vec::new();
        let mut push = |ops: Vec<CompressionOp>| {
            if !ops.is_empty() {
                dims.push(ops.into_iter().map(Some).collect());
            }
        };
        push(
            self.low_rank_ratios
                .iter()
                .map(|&rank_ratio| CompressionOp::LowRankFactor { rank_ratio })
                .collect(),
        );
        push(
            self.fire_squeeze_ratios
                .iter()
                .map(|&squeeze_ratio| CompressionOp::FireMerge { squeeze_ratio })
                .collect(),
        );
        push(
            self.composite_scales
                .iter()
                .map(|&(width, depth)| CompressionOp::CompositeScale { width, depth })
                .collect(),
        );
        push(
            self.ghost_ratios
                .iter()
                .map(|&(intrinsic_ratio, expand)| CompressionOp::GhostExpand {
                    intrinsic_ratio,
                    expand,
                })
                .collect(),
        );
        push(
            self.depth_skip_sets
                .iter()
                .map(|blocks| CompressionOp::DepthSkip {
                    blocks: blocks.clone(),
                })
                .collect(),
        );
        push(
            self.channel_keep_ratios
                .iter()
                .map(|&keep_ratio| CompressionOp::ChannelPrune { keep_ratio })
                .collect(),
        );
        dims
    }
}

/// Enumerate the grid's Cartesian product across exits, dropping entries
/// that fail to apply (for example depth skips referencing blocks cut off
/// by an earlier exit). Deterministic order, no structural duplicates.
pub fn enumerate_design_space(graph: &ComputationGraph, grid: &DesignGrid) -> Vec<VariantConfig> {
    let dims = grid.family_choices();
    let exit_count = graph.exits.len().max(1);

    let mut configs = Vec::new();
    let mut indices = vec![0usize; dims.len()];
    loop {
        let ops: Vec<CompressionOp> = dims
            .iter()
            .zip(&indices)
            .filter_map(|(choices, &i)| choices[i].clone())
            .collect();
        for exit_index in 0..exit_count {
            let candidate = VariantConfig {
                ops: ops.clone(),
                exit_index,
            };
            if apply_variant(graph, &candidate).is_ok() {
                configs.push(candidate);
            }
        }
        // Advance the mixed-radix counter.
        let mut pos = dims.len();
        loop {
            if pos == 0 {
                let mut seen = std::collections::BTreeSet::new();
                configs.retain(|c| seen.insert(serde_json::to_string(c).unwrap()));
                return configs;
            }
            pos -= 1;
            indices[pos] += 1;
            if indices[pos] < dims[pos].len() {
                break;
            }
            indices[pos] = 0;
        }
    }
}
