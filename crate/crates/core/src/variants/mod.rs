//! Elastic compression variants: six operator families applied as pure
//! graph-to-graph transformations, early-exit selection, the variant
//! design space, and the calibrated accuracy proxy.
//!
//! Applying a variant is retraining-free by construction: transforms
//! consume and produce structural graphs only; there are no weights and
//! no data passes anywhere in this module.
//!
//! Channel-level families (low-rank factorization, fire merging,
//! composite width scaling, ghost expansion, channel pruning) operate on
//! CNN-shaped graphs (`[c, h, w]` and flat `[n]` tensors). Depth skipping
//! works on any graph with skippable blocks.

pub mod accuracy;
pub mod space;
mod transforms;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ir::{zoo, ComputationGraph};

pub use accuracy::{predict_accuracy, AccuracyModel, AccuracyPrediction};
pub use space::{enumerate_design_space, DesignGrid};

/// The six compression-operator families.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    /// Factor a conv into a narrow conv plus a pointwise expansion.
    LowRankFactor,
    /// Replace a conv with squeeze and expand layers merged by concat.
    FireMerge,
    /// Joint width/depth multiplier scaling.
    CompositeScale,
    /// Few intrinsic feature maps expanded by cheap linear ops.
    GhostExpand,
    /// Derive a shallower variant by skipping identity-shaped blocks.
    DepthSkip,
    /// Channel-wise scaling of every layer width.
    ChannelPrune,
}

impl Family {
    pub const ALL: [Family; 6] = [
        Family::LowRankFactor,
        Family::FireMerge,
        Family::CompositeScale,
        Family::GhostExpand,
        Family::DepthSkip,
        Family::ChannelPrune,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::LowRankFactor => "low_rank_factor",
            Family::FireMerge => "fire_merge",
            Family::CompositeScale => "composite_scale",
            Family::GhostExpand => "ghost_expand",
            Family::DepthSkip => "depth_skip",
            Family::ChannelPrune => "channel_prune",
        }
    }
}

/// One compression operator with its family-specific parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum CompressionOp {
    LowRankFactor {
        rank_ratio: f64,
    },
    FireMerge {
        squeeze_ratio: f64,
    },
    CompositeScale {
        width: f64,
        depth: f64,
    },
    GhostExpand {
        intrinsic_ratio: f64,
        /// >= 1; values above 1 grow the feature-map pool and can
        /// increase MACs (the one family allowed to do so).
        #[serde(default = "one")]
        expand: f64,
    },
    DepthSkip {
        blocks: Vec<String>,
    },
    ChannelPrune {
        keep_ratio: f64,
    },
}

fn one() -> f64 {
    1.0
}

impl CompressionOp {
    pub fn family(&self) -> Family {
        match self {
            CompressionOp::LowRankFactor { .. } => Family::LowRankFactor,
            CompressionOp::FireMerge { .. } => Family::FireMerge,
            CompressionOp::CompositeScale { .. } => Family::CompositeScale,
            CompressionOp::GhostExpand { .. } => Family::GhostExpand,
            CompressionOp::DepthSkip { .. } => Family::DepthSkip,
            CompressionOp::ChannelPrune { .. } => Family::ChannelPrune,
        }
    }

    /// Structural no-ops (all ratios 1, nothing skipped) leave the graph
    /// untouched and carry no accuracy delta.
    pub fn is_noop(&self) -> bool {
        match self {
            CompressionOp::LowRankFactor { rank_ratio } => *rank_ratio >= 1.0,
            CompressionOp::FireMerge { .. } => false,
            CompressionOp::CompositeScale { width, depth } => *width >= 1.0 && *depth >= 1.0,
            CompressionOp::GhostExpand { intrinsic_ratio, expand } => {
                *intrinsic_ratio >= 1.0 && *expand == 1.0
            }
            CompressionOp::DepthSkip { blocks } => blocks.is_empty(),
            CompressionOp::ChannelPrune { keep_ratio } => *keep_ratio >= 1.0,
        }
    }

    fn validate(&self) -> Result<()> {
        let check_ratio = |name: &str, v: f64| {
            if v > 0.0 && v <= 1.0 {
                Ok(())
            } else {
                Err(Error::InvalidInput(format!(
                    "{}: {name} must be in (0, 1], got {v}",
                    self.family().name()
                )))
            }
        };
        match self {
            CompressionOp::LowRankFactor { rank_ratio } => check_ratio("rank_ratio", *rank_ratio),
            CompressionOp::FireMerge { squeeze_ratio } => {
                check_ratio("squeeze_ratio", *squeeze_ratio)
            }
            CompressionOp::CompositeScale { width, depth } => {
                check_ratio("width", *width)?;
                check_ratio("depth", *depth)
            }
            CompressionOp::GhostExpand {
                intrinsic_ratio,
                expand,
            } => {
                check_ratio("intrinsic_ratio", *intrinsic_ratio)?;
                if *expand < 1.0 {
                    return Err(Error::InvalidInput(
                        "ghost_expand: expand must be >= 1".into(),
                    ));
                }
                Ok(())
            }
            CompressionOp::DepthSkip { .. } => Ok(()),
            CompressionOp::ChannelPrune { keep_ratio } => check_ratio("keep_ratio", *keep_ratio),
        }
    }
}

/// A full variant choice: ordered compression ops plus the early exit to
/// take (0 = earliest).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariantConfig {
    pub ops: Vec<CompressionOp>,
    pub exit_index: usize,
}

impl VariantConfig {
    pub fn identity(graph: &ComputationGraph) -> Self {
        Self {
            ops: vec![],
            exit_index: graph.exits.len().saturating_sub(1),
        }
    }

    /// Sorted list of families of the non-no-op ops.
    pub fn active_families(&self) -> Vec<Family> {
        let mut fams: Vec<Family> = self
            .ops
            .iter()
            .filter(|op| !op.is_noop())
            .map(|op| op.family())
            .collect();
        fams.sort();
        fams.dedup();
        fams
    }

    pub fn validate(&self, graph: &ComputationGraph) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for op in &self.ops {
            op.validate()?;
            if !seen.insert(op.family()) {
                return Err(Error::InvalidInput(format!(
                    "at most one op per family: {} repeated",
                    op.family().name()
                )));
            }
        }
        if graph.exits.is_empty() {
            if self.exit_index != 0 {
                return Err(Error::InvalidInput(
                    "graph has no exits; exit_index must be 0".into(),
                ));
            }
        } else if self.exit_index >= graph.exits.len() {
            return Err(Error::InvalidInput(format!(
                "exit_index {} out of range ({} exits)",
                self.exit_index,
                graph.exits.len()
            )));
        }
        Ok(())
    }
}

/// Apply a variant: truncate to the chosen exit, then apply each op in
/// the listed order. Pure structural transform; MAC and parameter totals
/// change per each family's analytic effect.
pub fn apply_variant(graph: &ComputationGraph, config: &VariantConfig) -> Result<ComputationGraph> {
    config.validate(graph)?;
    let mut current = if graph.exits.is_empty() {
        graph.clone()
    } else {
        graph.truncate_to_exit(config.exit_index)?
    };
    for op in &config.ops {
        if op.is_noop() {
            continue;
        }
        current = match op {
            CompressionOp::LowRankFactor { rank_ratio } => {
                transforms::factor_low_rank(&current, *rank_ratio)?
            }
            CompressionOp::FireMerge { squeeze_ratio } => {
                transforms::fire_rewrite(&current, *squeeze_ratio)?
            }
            CompressionOp::CompositeScale { width, depth } => {
                let scaled = if *width < 1.0 {
                    transforms::scale_channels(&current, *width)?
                } else {
                    current
                };
                if *depth < 1.0 {
                    let skippable = transforms::skippable_blocks_sorted(&scaled);
                    let keep = (*depth * skippable.len() as f64).ceil() as usize;
                    let drop: Vec<String> = skippable.into_iter().skip(keep).collect();
                    transforms::skip_blocks(&scaled, &drop)?
                } else {
                    scaled
                }
            }
            CompressionOp::GhostExpand {
                intrinsic_ratio,
                expand,
            } => transforms::ghost_rewrite(&current, *intrinsic_ratio, *expand)?,
            CompressionOp::DepthSkip { blocks } => transforms::skip_blocks(&current, blocks)?,
            CompressionOp::ChannelPrune { keep_ratio } => {
                transforms::scale_channels(&current, *keep_ratio)?
            }
        };
    }
    Ok(current)
}

/// Independent analytic recomputation of a transformed graph's MACs; used
/// as the oracle that per-family effects are bookkept correctly.
pub fn recomputed_total_macs(graph: &ComputationGraph) -> Option<u64> {
    let mut total = 0u64;
    for node in graph.nodes.values() {
        total += zoo::analytic_macs(graph, node)?;
    }
    Some(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::zoo::{build_zoo_model, ZooConfig, ZooModel};
    use crate::ir::{Attributes, GraphBuilder, OpKind};

    fn lone_conv(in_c: u64, out_c: u64) -> ComputationGraph {
        let mut b = GraphBuilder::new();
        let t0 = b.tensor("t0", vec![in_c, 8, 8]);
        let t1 = b.tensor("t1", vec![out_c, 8, 8]);
        b.node(
            "conv",
            OpKind::Conv,
            vec![t0],
            vec![t1],
            zoo::conv_macs(8, 8, out_c, in_c, 3),
            (9 * in_c * out_c) * 4,
            Attributes::conv(3, 1, in_c as u32, out_c as u32),
            None,
        );
        b.finish().unwrap()
    }

    #[test]
    fn empty_ops_last_exit_is_identity() {
        let g = build_zoo_model(ZooModel::Resnet18, &ZooConfig::default()).unwrap();
        let out = apply_variant(&g, &VariantConfig::identity(&g)).unwrap();
        assert_eq!(out, g);
        assert_eq!(out.to_json(), g.to_json());
    }

    #[test]
    fn channel_prune_half_quarters_lone_conv_macs() {
        let g = lone_conv(16, 32);
        let cfg = VariantConfig {
            ops: vec![CompressionOp::ChannelPrune { keep_ratio: 0.5 }],
            exit_index: 0,
        };
        let out = apply_variant(&g, &cfg).unwrap();
        let orig = g.total_macs();
        assert_eq!(out.total_macs() * 4, orig);
        // Both channel dims halved.
        let node = out.nodes.values().next().unwrap();
        assert_eq!(node.attributes.in_channels, Some(8));
        assert_eq!(node.attributes.out_channels, Some(16));
    }

    #[test]
    fn low_rank_scales_macs_by_roughly_the_ratio() {
        let g = lone_conv(64, 64);
        for ratio in [0.25, 0.5, 0.75] {
            let cfg = VariantConfig {
                ops: vec![CompressionOp::LowRankFactor { rank_ratio: ratio }],
                exit_index: 0,
            };
            let out = apply_variant(&g, &cfg).unwrap();
            let achieved = out.total_macs() as f64 / g.total_macs() as f64;
            assert!(
                (achieved - ratio).abs() < 0.05,
                "ratio {ratio} achieved {achieved}"
            );
            assert_eq!(out.total_macs(), recomputed_total_macs(&out).unwrap());
        }
    }

    #[test]
    fn low_rank_plus_depth_skip_on_mobilenet_reduces_and_stays_consistent() {
        let mut cfg = ZooConfig::default_for(ZooModel::Mobilenetv2);
        cfg.stage_exits = true;
        let g = build_zoo_model(ZooModel::Mobilenetv2, &cfg).unwrap();
        let skippable = zoo::skippable_blocks(&g);
        assert!(!skippable.is_empty());
        let variant = VariantConfig {
            ops: vec![
                CompressionOp::LowRankFactor { rank_ratio: 0.5 },
                CompressionOp::DepthSkip {
                    blocks: skippable[..2].to_vec(),
                },
            ],
            exit_index: g.exits.len() - 1,
        };
        let out = apply_variant(&g, &variant).unwrap();
        assert!(out.total_macs() < g.total_macs());
        // Every node's stored MACs match the analytic recomputation on
        // the transformed graph.
        assert_eq!(out.total_macs(), recomputed_total_macs(&out).unwrap());
        out.validate().unwrap();
    }

    #[test]
    fn skipped_blocks_contribute_zero_macs() {
        let g = build_zoo_model(ZooModel::Resnet18, &ZooConfig::default()).unwrap();
        let variant = VariantConfig {
            ops: vec![CompressionOp::DepthSkip {
                blocks: vec!["layer3.1".into()],
            }],
            exit_index: 0,
        };
        let out = apply_variant(&g, &variant).unwrap();
        assert!(out.nodes.values().all(|n| n.block.as_deref() != Some("layer3.1")));
        let skipped_macs: u64 = g
            .nodes
            .values()
            .filter(|n| n.block.as_deref() == Some("layer3.1"))
            .map(|n| n.macs)
            .sum();
        assert_eq!(out.total_macs(), g.total_macs() - skipped_macs);
    }

    #[test]
    fn unknown_block_is_an_error() {
        let g = build_zoo_model(ZooModel::Resnet18, &ZooConfig::default()).unwrap();
        let variant = VariantConfig {
            ops: vec![CompressionOp::DepthSkip {
                blocks: vec!["layer9.9".into()],
            }],
            exit_index: 0,
        };
        assert!(apply_variant(&g, &variant).is_err());
    }

    #[test]
    fn repeated_family_rejected() {
        let g = lone_conv(8, 8);
        let variant = VariantConfig {
            ops: vec![
                CompressionOp::ChannelPrune { keep_ratio: 0.5 },
                CompressionOp::ChannelPrune { keep_ratio: 0.25 },
            ],
            exit_index: 0,
        };
        assert!(apply_variant(&g, &variant).is_err());
    }

    #[test]
    fn every_family_never_increases_macs_except_ghost_expand() {
        let g = build_zoo_model(ZooModel::Resnet18, &ZooConfig::default()).unwrap();
        let ops = [
            CompressionOp::LowRankFactor { rank_ratio: 0.5 },
            CompressionOp::FireMerge { squeeze_ratio: 0.25 },
            CompressionOp::CompositeScale {
                width: 0.75,
                depth: 0.5,
            },
            CompressionOp::GhostExpand {
                intrinsic_ratio: 0.5,
                expand: 1.0,
            },
            CompressionOp::DepthSkip {
                blocks: vec!["layer1.1".into()],
            },
            CompressionOp::ChannelPrune { keep_ratio: 0.5 },
        ];
        for op in ops {
            let out = apply_variant(
                &g,
                &VariantConfig {
                    ops: vec![op.clone()],
                    exit_index: 0,
                },
            )
            .unwrap();
            assert!(
                out.total_macs() <= g.total_macs(),
                "{:?} increased MACs",
                op.family()
            );
            assert_eq!(out.total_macs(), recomputed_total_macs(&out).unwrap());
        }
        // The documented exception: ghost expansion above 1 may grow MACs.
        let expanded = apply_variant(
            &g,
            &VariantConfig {
                ops: vec![CompressionOp::GhostExpand {
                    intrinsic_ratio: 1.0,
                    expand: 2.0,
                }],
                exit_index: 0,
            },
        )
        .unwrap();
        assert!(expanded.total_macs() > g.total_macs());
    }

    #[test]
    fn earlier_exits_use_strictly_fewer_macs() {
        let mut zc = ZooConfig::default();
        zc.stage_exits = true;
        let g = build_zoo_model(ZooModel::Resnet18, &zc).unwrap();
        let mut prev = 0;
        for k in 0..g.exits.len() {
            let out = apply_variant(
                &g,
                &VariantConfig {
                    ops: vec![],
                    exit_index: k,
                },
            )
            .unwrap();
            assert!(out.total_macs() > prev);
            prev = out.total_macs();
        }
    }
}
