//! Layer-wise energy and latency models.
//!
//! Energy of a layer list is
//! `E = sum_l d1*C_l + eps_l*d2*M_l + (1-eps_l)*d3*M_l + M_l*d_sm`
//! with `d_sm` only present on GPU profiles. Latency is
//! `T = sum_l (l1*C_l + eps_l*l2*M_l + (1-eps_l)*l3*M_l) / freq_scale`.
//!
//! The layer's arithmetic intensity `C_l / M_l` is computed and reported
//! on every [`LayerCost`], but the compute term itself is linear in
//! `C_l`: the intensity ratio is folded into `l1`, which defaults to
//! `1 / mac_throughput` so a pure-compute layer at full cache-hit rate
//! runs at the device's MAC throughput. Calibration fits the same
//! composed form, keeping fitted and default coefficients comparable.

pub mod calibrate;
pub mod estimate;


use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ir::{ComputationGraph, OperatorNode};

/// Floor of the cache-hit-rate model.
pub const EPSILON_MIN: f64 = 0.05;

/// Default energy-coefficient ratios (unit: MAC-equivalents).
pub const DEFAULT_DELTA_MAC: f64 = 1.0;
pub const DEFAULT_DELTA_CACHE: f64 = 6.0;
pub const DEFAULT_DELTA_DRAM: f64 = 200.0;
pub const DEFAULT_DELTA_SHARED_MEM_GPU: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Processor {
    Cpu,
    Gpu,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DeviceId(pub String);

impl DeviceId {
    pub fn new(s: impl Into<String>) -> Self {
        Self(s.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl std::fmt::Display for DeviceId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

/// Per-device profile. Energy coefficients are `delta1..delta3` plus
/// `delta_sm` (MAC, cache access, DRAM access, shared-memory access);
/// latency coefficients are `lambda1..lambda3`. Unset coefficients take
/// the documented defaults: 1:6:200(:2 on GPU) for energy and
/// `(1, 6, 200) / mac_throughput` for latency.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceProfile {
    pub id: DeviceId,
    pub processor: Processor,
    /// Sustained MACs per second at full cache-hit rate.
    pub mac_throughput: f64,
    #[serde(default = "default_cores")]
    pub cores: u32,
    pub cache_bytes: u64,
    pub mem_capacity_bytes: u64,
    #[serde(default = "default_delta1")]
    pub delta1: f64,
    #[serde(default = "default_delta2")]
    pub delta2: f64,
    #[serde(default = "default_delta3")]
    pub delta3: f64,
    /// Defaults to 2 on GPU profiles and 0 on CPU profiles.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta_sm: Option<f64>,
    /// Defaults to `1 / mac_throughput`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda1: Option<f64>,
    /// Defaults to `6 / mac_throughput`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda2: Option<f64>,
    /// Defaults to `200 / mac_throughput`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda3: Option<f64>,
    /// Bytes per second moved when swapping activations out or in.
    #[serde(default = "default_swap_bandwidth")]
    pub swap_bandwidth: f64,
    /// Seconds per byte for activation compression codecs.
    #[serde(default = "default_codec_rate")]
    pub codec_rate: f64,
    #[serde(default = "default_battery")]
    pub battery_capacity: f64,
    /// DVFS multiplier; effective throughput scales with it.
    #[serde(default = "default_freq_scale")]
    pub freq_scale: f64,
}

fn default_cores() -> u32 {
    1
}
fn default_delta1() -> f64 {
    DEFAULT_DELTA_MAC
}
fn default_delta2() -> f64 {
    DEFAULT_DELTA_CACHE
}
fn default_delta3() -> f64 {
    DEFAULT_DELTA_DRAM
}
fn default_swap_bandwidth() -> f64 {
    1e9
}
fn default_codec_rate() -> f64 {
    2e-10
}
fn default_battery() -> f64 {
    1.0
}
fn default_freq_scale() -> f64 {
    1.0
}

impl DeviceProfile {
    pub fn cpu(id: impl Into<String>, mac_throughput: f64, cache_bytes: u64, mem: u64) -> Self {
        Self {
            id: DeviceId::new(id),
            processor: Processor::Cpu,
            mac_throughput,
            cores: 1,
            cache_bytes,
            mem_capacity_bytes: mem,
            delta1: default_delta1(),
            delta2: default_delta2(),
            delta3: default_delta3(),
            delta_sm: None,
            lambda1: None,
            lambda2: None,
            lambda3: None,
            swap_bandwidth: default_swap_bandwidth(),
            codec_rate: default_codec_rate(),
            battery_capacity: default_battery(),
            freq_scale: 1.0,
        }
    }

    pub fn gpu(id: impl Into<String>, mac_throughput: f64, cache_bytes: u64, mem: u64) -> Self {
        Self {
            processor: Processor::Gpu,
            ..Self::cpu(id, mac_throughput, cache_bytes, mem)
        }
    }

    pub fn delta_sm(&self) -> f64 {
        match self.processor {
            Processor::Cpu => 0.0,
            Processor::Gpu => self.delta_sm.unwrap_or(DEFAULT_DELTA_SHARED_MEM_GPU),
        }
    }

    pub fn lambda1(&self) -> f64 {
        self.lambda1.unwrap_or(1.0 / self.mac_throughput)
    }

    pub fn lambda2(&self) -> f64 {
        self.lambda2.unwrap_or(6.0 / self.mac_throughput)
    }

    pub fn lambda3(&self) -> f64 {
        self.lambda3.unwrap_or(200.0 / self.mac_throughput)
    }

    pub fn validate(&self) -> Result<()> {
        if self.mac_throughput <= 0.0 {
            return Err(Error::Schema(format!(
                "device {}: mac_throughput must be > 0",
                self.id
            )));
        }
        if self.freq_scale <= 0.0 {
            return Err(Error::Schema(format!(
                "device {}: freq_scale must be > 0",
                self.id
            )));
        }
        if self.processor == Processor::Cpu && self.delta_sm.unwrap_or(0.0) != 0.0 {
            return Err(Error::Schema(format!(
                "device {}: CPU profiles have no shared-memory space (delta_sm must be 0)",
                self.id
            )));
        }
        if self.processor == Processor::Gpu && self.delta_sm() <= 0.0 {
            return Err(Error::Schema(format!(
                "device {}: GPU profiles require delta_sm > 0",
                self.id
            )));
        }
        Ok(())
    }
}

/// A fleet of devices plus symmetric point-to-point links.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Fleet {
    #[serde(default = "fleet_schema_version")]
    pub schema_version: u32,
    pub devices: Vec<DeviceProfile>,
    #[serde(default)]
    pub links: Vec<Link>,
    /// Device the workload starts on; defaults to the first device.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub primary: Option<DeviceId>,
}

fn fleet_schema_version() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Link {
    pub a: DeviceId,
    pub b: DeviceId,
    pub bandwidth_bytes_per_s: f64,
}

impl Fleet {
    pub fn single(device: DeviceProfile) -> Self {
        Self {
            schema_version: 1,
            devices: vec![device],
            links: vec![],
            primary: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != 1 {
            return Err(Error::Schema(format!(
                "unsupported fleet schema_version {}",
                self.schema_version
            )));
        }
        if self.devices.is_empty() {
            return Err(Error::Schema("fleet has no devices".into()));
        }
        let mut ids = std::collections::BTreeSet::new();
        for d in &self.devices {
            d.validate()?;
            if !ids.insert(&d.id) {
                return Err(Error::Schema(format!("duplicate device id {}", d.id)));
            }
        }
        for l in &self.links {
            if !ids.contains(&l.a) || !ids.contains(&l.b) {
                return Err(Error::Schema(format!(
                    "link references unknown device {} or {}",
                    l.a, l.b
                )));
            }
            if l.bandwidth_bytes_per_s <= 0.0 {
                return Err(Error::Schema("link bandwidth must be > 0".into()));
            }
        }
        if let Some(p) = &self.primary {
            if !ids.contains(p) {
                return Err(Error::Schema(format!("unknown primary device {p}")));
            }
        }
        Ok(())
    }

    pub fn device(&self, id: &DeviceId) -> Result<&DeviceProfile> {
        self.devices
            .iter()
            .find(|d| &d.id == id)
            .ok_or_else(|| Error::InvalidInput(format!("unknown device {id}")))
    }

    pub fn primary_device(&self) -> &DeviceProfile {
        match &self.primary {
            Some(p) => self.devices.iter().find(|d| &d.id == p).unwrap(),
            None => &self.devices[0],
        }
    }

    /// Symmetric link bandwidth between two devices, if any.
    pub fn bandwidth(&self, a: &DeviceId, b: &DeviceId) -> Option<f64> {
        self.links
            .iter()
            .find(|l| (&l.a == a && &l.b == b) || (&l.a == b && &l.b == a))
            .map(|l| l.bandwidth_bytes_per_s)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("fleet serialization");
        s.push('\n');
        s
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let fleet: Fleet =
            serde_json::from_str(s).map_err(|e| Error::Schema(format!("fleet file: {e}")))?;
        fleet.validate()?;
        Ok(fleet)
    }
}

/// Which tensors count toward the per-layer memory term `M_l`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemoryAccounting {
    /// `M_l` = parameter bytes + output activation bytes.
    #[default]
    ParamsPlusOutputs,
    /// `M_l` additionally counts input activation bytes.
    ParamsPlusInOut,
}

/// Context-dependent evaluation knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimateContext {
    /// Fraction of the cache claimed by competing processes, in [0, 1].
    pub background_pressure: f64,
    /// Extra DVFS multiplier applied on top of each device's own
    /// `freq_scale`.
    pub freq_scale: f64,
    pub accounting: MemoryAccounting,
}

impl Default for EstimateContext {
    fn default() -> Self {
        Self {
            background_pressure: 0.0,
            freq_scale: 1.0,
            accounting: MemoryAccounting::ParamsPlusOutputs,
        }
    }
}

/// Per-layer cost: compute `C_l`, memory `M_l`, arithmetic intensity,
/// and the cache-hit rate the evaluators will use.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerCost {
    pub macs: f64,
    pub mem_bytes: f64,
    pub intensity: f64,
    pub cache_hit: f64,
}

impl LayerCost {
    pub fn new(macs: f64, mem_bytes: f64, cache_hit: f64) -> Self {
        Self {
            macs,
            mem_bytes,
            intensity: if mem_bytes > 0.0 { macs / mem_bytes } else { 0.0 },
            cache_hit,
        }
    }
}

/// Working-set cache-hit-rate model:
/// `eps = clamp(cache * (1 - pressure) / M, EPSILON_MIN, 1)`.
pub fn cache_hit_rate(mem_bytes: f64, device: &DeviceProfile, background_pressure: f64) -> f64 {
    if mem_bytes <= 0.0 {
        return 1.0;
    }
    let available = device.cache_bytes as f64 * (1.0 - background_pressure.clamp(0.0, 1.0));
    (available / mem_bytes).clamp(EPSILON_MIN, 1.0)
}

/// Memory term of a node under the chosen accounting.
pub fn node_mem_bytes(
    graph: &ComputationGraph,
    node: &OperatorNode,
    accounting: MemoryAccounting,
) -> u64 {
    let outputs: u64 = node.outputs.iter().map(|t| graph.tensors[t].bytes()).sum();
    let inputs: u64 = match accounting {
        MemoryAccounting::ParamsPlusOutputs => 0,
        MemoryAccounting::ParamsPlusInOut => {
            node.inputs.iter().map(|t| graph.tensors[t].bytes()).sum()
        }
    };
    node.param_bytes + outputs + inputs
}

/// Build the layer-cost row for one node.
pub fn layer_cost(
    graph: &ComputationGraph,
    node: &OperatorNode,
    device: &DeviceProfile,
    ctx: &EstimateContext,
) -> LayerCost {
    let mem = node_mem_bytes(graph, node, ctx.accounting) as f64;
    let eps = cache_hit_rate(mem, device, ctx.background_pressure);
    LayerCost::new(node.macs as f64, mem, eps)
}

/// Energy of a layer list on a device, in MAC-equivalent units.
pub fn energy(layers: &[LayerCost], device: &DeviceProfile) -> f64 {
    let d_sm = device.delta_sm();
    layers
        .iter()
        .map(|l| {
            device.delta1 * l.macs
                + l.cache_hit * device.delta2 * l.mem_bytes
                + (1.0 - l.cache_hit) * device.delta3 * l.mem_bytes
                + l.mem_bytes * d_sm
        })
        .sum()
}

/// Latency of a layer list on a device, in seconds, under the given
/// effective frequency scale (device scale x context scale).
pub fn latency(layers: &[LayerCost], device: &DeviceProfile, ctx: &EstimateContext) -> f64 {
    let freq = device.freq_scale * ctx.freq_scale;
    let raw: f64 = layers
        .iter()
        .map(|l| {
            device.lambda1() * l.macs
                + l.cache_hit * device.lambda2() * l.mem_bytes
                + (1.0 - l.cache_hit) * device.lambda3() * l.mem_bytes
        })
        .sum();
    raw / freq
}

/// Eq. 2 latency of a single node.
pub fn node_latency(
    graph: &ComputationGraph,
    node: &OperatorNode,
    device: &DeviceProfile,
    ctx: &EstimateContext,
) -> f64 {
    latency(&[layer_cost(graph, node, device, ctx)], device, ctx)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gpu() -> DeviceProfile {
        DeviceProfile::gpu("g0", 1e9, 1 << 20, 1 << 30)
    }

    fn cpu() -> DeviceProfile {
        DeviceProfile::cpu("c0", 1e9, 1 << 20, 1 << 30)
    }

    #[test]
    fn default_ratios_match_the_documented_values() {
        let g = gpu();
        assert_eq!(
            (g.delta1, g.delta2, g.delta3, g.delta_sm()),
            (1.0, 6.0, 200.0, 2.0)
        );
        let c = cpu();
        assert_eq!((c.delta1, c.delta2, c.delta3, c.delta_sm()), (1.0, 6.0, 200.0, 0.0));
    }

    #[test]
    fn cpu_with_nonzero_delta_sm_rejected() {
        let mut c = cpu();
        c.delta_sm = Some(2.0);
        assert!(c.validate().is_err());
    }

    #[test]
    fn cache_hit_rate_clamps() {
        let d = DeviceProfile::cpu("c", 1e9, 1 << 20, 1 << 30);
        // Working set fits: ceiling.
        assert_eq!(cache_hit_rate(1024.0, &d, 0.0), 1.0);
        // Full pressure: floor.
        assert_eq!(cache_hit_rate(1024.0, &d, 1.0), EPSILON_MIN);
    }

    #[test]
    fn cache_hit_rate_formula() {
        let d = DeviceProfile::cpu("c", 1e9, 1 << 20, 1 << 30);
        let eps = cache_hit_rate(4.0 * (1 << 20) as f64, &d, 0.0);
        assert!((eps - 0.25).abs() < 1e-12);
    }

    #[test]
    fn energy_hand_evaluated_cases() {
        let g = gpu();
        assert_eq!(energy(&[], &g), 0.0);
        // C=100, M=10, eps=1 on 1:6:200:2 -> 100 + 60 + 0 + 20 = 180.
        let l = LayerCost::new(100.0, 10.0, 1.0);
        assert_eq!(energy(&[l], &g), 180.0);
        // Same layer at eps=0 -> 100 + 0 + 2000 + 20 = 2120.
        let l0 = LayerCost::new(100.0, 10.0, 0.0);
        assert_eq!(energy(&[l0], &g), 2120.0);
        // CPU drops the shared-memory term.
        assert_eq!(energy(&[l], &cpu()), 160.0);
    }

    #[test]
    fn pure_compute_layer_runs_at_mac_throughput() {
        let d = cpu();
        let l = LayerCost::new(1e9, 1.0, 1.0);
        let t = latency(&[l], &d, &EstimateContext::default());
        assert!((t - 1.0).abs() < 1e-6);
    }

    #[test]
    fn halved_frequency_doubles_latency() {
        let d = cpu();
        let l = LayerCost::new(5e8, 1024.0, 0.7);
        let base = latency(&[l], &d, &EstimateContext::default());
        let ctx = EstimateContext {
            freq_scale: 0.5,
            ..EstimateContext::default()
        };
        let slowed = latency(&[l], &d, &ctx);
        assert!((slowed - 2.0 * base).abs() < 1e-12);
    }

    #[test]
    fn latency_and_energy_are_additive_over_layers() {
        let d = gpu();
        let ctx = EstimateContext::default();
        let a = LayerCost::new(1e6, 2048.0, 0.9);
        let b = LayerCost::new(3e6, 512.0, 0.4);
        assert!(
            (latency(&[a, b], &d, &ctx) - (latency(&[a], &d, &ctx) + latency(&[b], &d, &ctx)))
                .abs()
                < 1e-15
        );
        assert_eq!(energy(&[a, b], &d), energy(&[a], &d) + energy(&[b], &d));
    }

    #[test]
    fn monotonic_in_compute_memory_and_cache_misses() {
        let d = gpu();
        let ctx = EstimateContext::default();
        let base = LayerCost::new(1e6, 2048.0, 0.5);
        let more_c = LayerCost::new(2e6, 2048.0, 0.5);
        let more_m = LayerCost::new(1e6, 4096.0, 0.5);
        let better_eps = LayerCost::new(1e6, 2048.0, 0.9);
        assert!(latency(&[more_c], &d, &ctx) > latency(&[base], &d, &ctx));
        assert!(latency(&[more_m], &d, &ctx) > latency(&[base], &d, &ctx));
        assert!(latency(&[better_eps], &d, &ctx) < latency(&[base], &d, &ctx));
        assert!(energy(&[more_c], &d) > energy(&[base], &d));
        assert!(energy(&[more_m], &d) > energy(&[base], &d));
        assert!(energy(&[better_eps], &d) < energy(&[base], &d));
    }
}
