//! Table-driven accuracy proxy.
//!
//! Confidence-based accuracy needs real inference, so the proxy is a
//! calibrated delta table: percentage-point deltas keyed by the sorted
//! family combination (optionally refined by exact op parameters and a
//! dataset tag), plus a per-exit penalty. Combinations missing from the
//! table fall back to the sum of single-family deltas, and the
//! prediction is flagged as extrapolated.

use serde::{Deserialize, Serialize};

use super::{CompressionOp, Family, VariantConfig};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeltaEntry {
    /// Sorted family combination this entry covers.
    pub families: Vec<Family>,
    /// Percentage-point delta relative to the base accuracy.
    pub delta: f64,
    /// Optional exact-parameter refinement.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<Vec<CompressionOp>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AccuracyModel {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    pub base_accuracy: f64,
    /// Dataset tag used to prefer dataset-specific entries.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<String>,
    /// Delta applied per exit taken earlier than the final one.
    #[serde(default)]
    pub exit_penalty: f64,
    #[serde(default)]
    pub deltas: Vec<DeltaEntry>,
}

fn schema_version() -> u32 {
    1
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AccuracyPrediction {
    pub accuracy: f64,
    /// True when the family combination was not in the table and the
    /// prediction fell back to summed single-family deltas.
    pub extrapolated: bool,
}

impl AccuracyModel {
    /// UbiSound-flavored default calibration covering the published
    /// two-family combinations plus conservative single-family deltas.
    pub fn default_table() -> Self {
        use Family::*;
        let pair = |a: Family, b: Family, delta: f64, dataset: &str| DeltaEntry {
            families: vec![a.min(b), a.max(b)],
            delta,
            params: None,
            dataset: Some(dataset.to_string()),
        };
        let single = |f: Family, delta: f64| DeltaEntry {
            families: vec![f],
            delta,
            params: None,
            dataset: None,
        };
        Self {
            schema_version: 1,
            base_accuracy: 80.0,
            dataset: None,
            exit_penalty: -1.5,
            deltas: vec![
                pair(LowRankFactor, ChannelPrune, 1.30, "ubisound"),
                pair(FireMerge, ChannelPrune, -2.10, "cifar100"),
                pair(LowRankFactor, DepthSkip, -0.90, "imagenet"),
                pair(FireMerge, DepthSkip, -0.30, "har"),
                pair(LowRankFactor, ChannelPrune, 0.20, "statefarm"),
                single(LowRankFactor, -0.40),
                single(FireMerge, -1.00),
                single(CompositeScale, -0.80),
                single(GhostExpand, -0.60),
                single(DepthSkip, -1.20),
                single(ChannelPrune, -0.70),
            ],
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("accuracy table serialization");
        s.push('\n');
        s
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let model: AccuracyModel = serde_json::from_str(s)
            .map_err(|e| Error::Schema(format!("accuracy table: {e}")))?;
        if model.schema_version != 1 {
            return Err(Error::Schema(format!(
                "unsupported accuracy table schema_version {}",
                model.schema_version
            )));
        }
        Ok(model)
    }

    /// Best-matching entry for a family combination: exact params beat
    /// generic entries, matching dataset beats dataset-agnostic.
    fn lookup(&self, families: &[Family], ops: &[&CompressionOp]) -> Option<&DeltaEntry> {
        let mut best: Option<(&DeltaEntry, u32)> = None;
        for entry in &self.deltas {
            if entry.families != families {
                continue;
            }
            let mut score = 1u32;
            if let Some(params) = &entry.params {
                let mut sorted: Vec<&CompressionOp> = params.iter().collect();
                sorted.sort_by_key(|op| op.family());
                if sorted.len() == ops.len() && sorted.iter().zip(ops).all(|(a, b)| *a == **b) {
                    score += 4;
                } else {
                    continue;
                }
            }
            match (&entry.dataset, &self.dataset) {
                (Some(a), Some(b)) if a == b => score += 2,
                (Some(_), _) => continue, // wrong dataset
                (None, _) => {}
            }
            if best.map(|(_, s)| score > s).unwrap_or(true) {
                best = Some((entry, score));
            }
        }
        best.map(|(e, _)| e)
    }
}

/// Predict accuracy for a variant. `total_exits` is the exit count of the
/// graph the config targets (0 or 1 means no early-exit penalty applies).
pub fn predict_accuracy(
    model: &AccuracyModel,
    config: &VariantConfig,
    total_exits: usize,
) -> AccuracyPrediction {
    let mut active: Vec<&CompressionOp> = config.ops.iter().filter(|op| !op.is_noop()).collect();
    active.sort_by_key(|op| op.family());
    let families = config.active_families();

    let (mut delta, mut extrapolated) = (0.0, false);
    if !families.is_empty() {
        match model.lookup(&families, &active) {
            Some(entry) => delta = entry.delta,
            None => {
                extrapolated = true;
                for family in &families {
                    if let Some(entry) = model.lookup(std::slice::from_ref(family), &[]) {
                        delta += entry.delta;
                    }
                }
            }
        }
    }
    let exits_skipped = total_exits.saturating_sub(1) - config.exit_index.min(total_exits.saturating_sub(1));
    delta += model.exit_penalty * exits_skipped as f64;

    AccuracyPrediction {
        accuracy: (model.base_accuracy + delta).clamp(0.0, 100.0),
        extrapolated,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::variants::CompressionOp;

    fn config(ops: Vec<CompressionOp>, exit: usize) -> VariantConfig {
        VariantConfig {
            ops,
            exit_index: exit,
        }
    }

    #[test]
    fn empty_config_returns_base() {
        let model = AccuracyModel::default_table();
        let p = predict_accuracy(&model, &config(vec![], 0), 1);
        assert_eq!(p.accuracy, model.base_accuracy);
        assert!(!p.extrapolated);
    }

    #[test]
    fn ubisound_low_rank_plus_prune_gains() {
        let mut model = AccuracyModel::default_table();
        model.dataset = Some("ubisound".into());
        let p = predict_accuracy(
            &model,
            &config(
                vec![
                    CompressionOp::LowRankFactor { rank_ratio: 0.5 },
                    CompressionOp::ChannelPrune { keep_ratio: 0.5 },
                ],
                0,
            ),
            1,
        );
        assert_eq!(p.accuracy, model.base_accuracy + 1.30);
        assert!(!p.extrapolated);
    }

    #[test]
    fn cifar_fire_plus_prune_drops() {
        let mut model = AccuracyModel::default_table();
        model.dataset = Some("cifar100".into());
        let p = predict_accuracy(
            &model,
            &config(
                vec![
                    CompressionOp::FireMerge { squeeze_ratio: 0.25 },
                    CompressionOp::ChannelPrune { keep_ratio: 0.5 },
                ],
                0,
            ),
            1,
        );
        assert_eq!(p.accuracy, model.base_accuracy - 2.10);
    }

    #[test]
    fn statefarm_differs_from_ubisound_for_the_same_combo() {
        let mut model = AccuracyModel::default_table();
        model.dataset = Some("statefarm".into());
        let p = predict_accuracy(
            &model,
            &config(
                vec![
                    CompressionOp::LowRankFactor { rank_ratio: 0.5 },
                    CompressionOp::ChannelPrune { keep_ratio: 0.5 },
                ],
                0,
            ),
            1,
        );
        assert_eq!(p.accuracy, model.base_accuracy + 0.20);
    }

    #[test]
    fn unknown_combo_falls_back_to_summed_singles_and_flags() {
        let model = AccuracyModel::default_table();
        let p = predict_accuracy(
            &model,
            &config(
                vec![
                    CompressionOp::GhostExpand {
                        intrinsic_ratio: 0.5,
                        expand: 1.0,
                    },
                    CompressionOp::DepthSkip {
                        blocks: vec!["b".into()],
                    },
                ],
                0,
            ),
            1,
        );
        assert!(p.extrapolated);
        assert_eq!(p.accuracy, model.base_accuracy - 0.60 - 1.20);
    }

    #[test]
    fn earlier_exits_pay_the_penalty() {
        let model = AccuracyModel::default_table();
        let last = predict_accuracy(&model, &config(vec![], 3), 4);
        let first = predict_accuracy(&model, &config(vec![], 0), 4);
        assert_eq!(last.accuracy, model.base_accuracy);
        assert_eq!(first.accuracy, model.base_accuracy + 3.0 * model.exit_penalty);
    }

    #[test]
    fn prediction_is_clamped_and_monotone_under_negative_deltas() {
        let mut model = AccuracyModel::default_table();
        model.base_accuracy = 1.0;
        let with_op = predict_accuracy(
            &model,
            &config(vec![CompressionOp::FireMerge { squeeze_ratio: 0.1 }], 0),
            1,
        );
        let without = predict_accuracy(&model, &config(vec![], 0), 1);
        assert!(with_op.accuracy <= without.accuracy);
        assert!(with_op.accuracy >= 0.0);
    }

    #[test]
    fn noop_ops_carry_no_delta() {
        let model = AccuracyModel::default_table();
        let p = predict_accuracy(
            &model,
            &config(vec![CompressionOp::ChannelPrune { keep_ratio: 1.0 }], 0),
            1,
        );
        assert_eq!(p.accuracy, model.base_accuracy);
    }

    #[test]
    fn table_round_trips_through_json() {
        let model = AccuracyModel::default_table();
        let parsed = AccuracyModel::from_json(&model.to_json()).unwrap();
        assert_eq!(model, parsed);
    }
}
