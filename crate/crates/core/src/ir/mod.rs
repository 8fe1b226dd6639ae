//! Computation-graph intermediate representation.
//!
//! A [`ComputationGraph`] is a DAG of [`OperatorNode`]s connected through
//! [`TensorSpec`] edges. Graphs are immutable after construction; every
//! pass produces a new graph. All containers are ordered (`BTreeMap`) so
//! iteration, serialization, and tie-breaking are deterministic.

pub mod training;
pub mod zoo;

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Schema version written to and required from graph files.
pub const IR_VERSION: u32 = 1;

macro_rules! id_newtype {
    ($name:ident) => {
        #[derive(
            Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
        )]
        #[serde(transparent)]
        pub struct $name(pub String);

        impl $name {
            pub fn new(s: impl Into<String>) -> Self {
                Self(s.into())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl std::fmt::Display for $name {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                Self(s.to_string())
            }
        }
    };
}

id_newtype!(NodeId);
id_newtype!(TensorId);

/// Tensor metadata. Bytes are always derived from shape and element width,
/// never stored.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorSpec {
    pub id: TensorId,
    pub shape: Vec<u64>,
    /// Bits per element: 32 default, 16/8/4 when compressed.
    pub elem_bits: u32,
}

impl TensorSpec {
    pub fn new(id: impl Into<String>, shape: Vec<u64>) -> Self {
        Self {
            id: TensorId::new(id),
            shape,
            elem_bits: 32,
        }
    }

    pub fn elements(&self) -> u64 {
        self.shape.iter().product()
    }

    /// Size in bytes, rounded up to whole bytes for sub-byte widths.
    pub fn bytes(&self) -> u64 {
        (self.elements() * self.elem_bits as u64).div_ceil(8)
    }

    fn validate(&self) -> Result<()> {
        if self.shape.is_empty() || self.shape.iter().any(|&d| d == 0) {
            return Err(Error::Structural(format!(
                "tensor {}: all dimensions must be >= 1",
                self.id
            )));
        }
        if ![4, 8, 16, 32].contains(&self.elem_bits) {
            return Err(Error::Structural(format!(
                "tensor {}: elem_bits {} not in {{4, 8, 16, 32}}",
                self.id, self.elem_bits
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReduceFn {
    Sum,
    Mean,
    Max,
}

/// Operator kinds. `Relu`/`Sigmoid`/`Tanh` are the elementwise family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Conv,
    DepthwiseConv,
    PointwiseConv,
    BatchNorm,
    Relu,
    Sigmoid,
    Tanh,
    FullyConnected,
    Pool,
    Reduce,
    Add,
    Concat,
    ExitBranch,
    Identity,
    Constant,
    /// Backward node computing weight and activation gradients for one
    /// forward node (training graphs only).
    Gradient,
    /// Applies a weight gradient to the corresponding layer's parameters.
    WeightUpdate,
}

impl OpKind {
    pub fn is_elementwise(self) -> bool {
        matches!(self, OpKind::Relu | OpKind::Sigmoid | OpKind::Tanh)
    }

    pub fn is_conv_like(self) -> bool {
        matches!(
            self,
            OpKind::Conv | OpKind::DepthwiseConv | OpKind::PointwiseConv
        )
    }
}

/// Kind-specific attributes. Only the fields relevant to the node's kind
/// are set; the rest stay `None` and are omitted from serialized form.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Attributes {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kernel: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stride: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub in_channels: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_channels: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reduce: Option<ReduceFn>,
}

impl Attributes {
    pub fn conv(kernel: u32, stride: u32, in_channels: u32, out_channels: u32) -> Self {
        Self {
            kernel: Some(kernel),
            stride: Some(stride),
            in_channels: Some(in_channels),
            out_channels: Some(out_channels),
            reduce: None,
        }
    }

    pub fn fc(in_features: u32, out_features: u32) -> Self {
        Self {
            in_channels: Some(in_features),
            out_channels: Some(out_features),
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OperatorNode {
    pub id: NodeId,
    pub kind: OpKind,
    pub inputs: Vec<TensorId>,
    pub outputs: Vec<TensorId>,
    /// Multiply-accumulate count of the operator.
    pub macs: u64,
    /// Weight bytes owned by the operator.
    pub param_bytes: u64,
    #[serde(default, skip_serializing_if = "attrs_is_default")]
    pub attributes: Attributes,
    /// Zoo-defined block label, used by per-block partitioning and
    /// depth-skipping transforms.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub block: Option<String>,
}

fn attrs_is_default(a: &Attributes) -> bool {
    *a == Attributes::default()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    InferenceOnly,
    Training,
}

/// The IR graph. Nodes and tensors are keyed by id; `exits` lists
/// exit-branch nodes ordered from earliest (shallowest) to last.
#[derive(Debug, Clone, PartialEq)]
pub struct ComputationGraph {
    pub nodes: BTreeMap<NodeId, OperatorNode>,
    pub tensors: BTreeMap<TensorId, TensorSpec>,
    pub exits: Vec<NodeId>,
    pub mode: Mode,
}

/// On-disk representation of a graph (`ir_version` 1). Unknown fields are
/// rejected.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphDoc {
    ir_version: u32,
    mode: Mode,
    nodes: Vec<OperatorNode>,
    tensors: Vec<TensorSpec>,
    exits: Vec<NodeId>,
}

impl ComputationGraph {
    pub fn new(
        nodes: Vec<OperatorNode>,
        tensors: Vec<TensorSpec>,
        exits: Vec<NodeId>,
        mode: Mode,
    ) -> Result<Self> {
        let mut node_map = BTreeMap::new();
        for n in nodes {
            if node_map.insert(n.id.clone(), n).is_some() {
                return Err(Error::Structural("duplicate node id".into()));
            }
        }
        let mut tensor_map = BTreeMap::new();
        for t in tensors {
            if tensor_map.insert(t.id.clone(), t).is_some() {
                return Err(Error::Structural("duplicate tensor id".into()));
            }
        }
        let g = Self {
            nodes: node_map,
            tensors: tensor_map,
            exits,
            mode,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn node(&self, id: &NodeId) -> Result<&OperatorNode> {
        self.nodes
            .get(id)
            .ok_or_else(|| Error::Structural(format!("unknown node {id}")))
    }

    pub fn tensor(&self, id: &TensorId) -> Result<&TensorSpec> {
        self.tensors
            .get(id)
            .ok_or_else(|| Error::Structural(format!("unknown tensor {id}")))
    }

    /// Map from tensor id to its producing node id.
    pub fn producers(&self) -> BTreeMap<&TensorId, &NodeId> {
        let mut map = BTreeMap::new();
        for node in self.nodes.values() {
            for out in &node.outputs {
                map.insert(out, &node.id);
            }
        }
        map
    }

    /// Map from tensor id to the ids of nodes consuming it (sorted).
    pub fn consumers(&self) -> BTreeMap<&TensorId, Vec<&NodeId>> {
        let mut map: BTreeMap<&TensorId, Vec<&NodeId>> = BTreeMap::new();
        for node in self.nodes.values() {
            for input in &node.inputs {
                map.entry(input).or_default().push(&node.id);
            }
        }
        map
    }

    /// Node-to-node edges implied by tensor dataflow, as (producer, consumer).
    pub fn edges(&self) -> Vec<(NodeId, NodeId)> {
        let producers = self.producers();
        let mut edges = Vec::new();
        for node in self.nodes.values() {
            for input in &node.inputs {
                if let Some(p) = producers.get(input) {
                    edges.push(((*p).clone(), node.id.clone()));
                }
            }
        }
        edges.sort();
        edges.dedup();
        edges
    }

    /// Tensors with no producing node (graph inputs).
    pub fn input_tensors(&self) -> Vec<&TensorId> {
        let producers = self.producers();
        self.tensors
            .keys()
            .filter(|t| !producers.contains_key(t))
            .collect()
    }

    /// Tensors produced but never consumed (graph outputs).
    pub fn output_tensors(&self) -> Vec<&TensorId> {
        let consumers = self.consumers();
        let producers = self.producers();
        self.tensors
            .keys()
            .filter(|t| producers.contains_key(t) && !consumers.contains_key(t))
            .collect()
    }

    pub fn total_macs(&self) -> u64 {
        self.nodes.values().map(|n| n.macs).sum()
    }

    pub fn total_param_bytes(&self) -> u64 {
        self.nodes.values().map(|n| n.param_bytes).sum()
    }

    /// Structural validation: resolvable tensor references, unique
    /// producers, constant purity, positive tensor sizes, acyclicity,
    /// and depth-ordered exits.
    pub fn validate(&self) -> Result<()> {
        for t in self.tensors.values() {
            t.validate()?;
        }
        let mut produced: BTreeMap<&TensorId, &NodeId> = BTreeMap::new();
        for node in self.nodes.values() {
            if node.id.as_str().is_empty() {
                return Err(Error::Structural("empty node id".into()));
            }
            if node.kind == OpKind::Constant && !node.inputs.is_empty() {
                return Err(Error::Structural(format!(
                    "constant node {} must not have tensor inputs",
                    node.id
                )));
            }
            for t in node.inputs.iter().chain(node.outputs.iter()) {
                if !self.tensors.contains_key(t) {
                    return Err(Error::Structural(format!(
                        "node {} references unknown tensor {t}",
                        node.id
                    )));
                }
            }
            for out in &node.outputs {
                if let Some(prev) = produced.insert(out, &node.id) {
                    return Err(Error::Structural(format!(
                        "tensor {out} produced by both {prev} and {}",
                        node.id
                    )));
                }
            }
        }
        let consumers = self.consumers();
        for t in self.tensors.keys() {
            if !produced.contains_key(t) && !consumers.contains_key(t) {
                return Err(Error::Structural(format!(
                    "tensor {t} is neither produced nor consumed"
                )));
            }
        }
        for exit in &self.exits {
            let node = self.node(exit)?;
            if node.kind != OpKind::ExitBranch {
                return Err(Error::Structural(format!(
                    "exit {exit} is not an exit-branch node"
                )));
            }
        }
        // Acyclicity (and with it, a well-defined topological order).
        self.topo_sort()?;
        // Exits must be depth-ordered: each later exit covers strictly
        // more compute than the previous one.
        let mut prev_macs: Option<u64> = None;
        for exit in &self.exits {
            let macs = self.exit_subgraph_macs(exit)?;
            if let Some(p) = prev_macs {
                if macs <= p {
                    return Err(Error::Structural(format!(
                        "exit {exit} is not deeper than its predecessor"
                    )));
                }
            }
            prev_macs = Some(macs);
        }
        Ok(())
    }

    /// Deterministic topological order: Kahn's algorithm with a min-heap
    /// on node id as the tie-break.
    pub fn topo_sort(&self) -> Result<Vec<NodeId>> {
        let producers = self.producers();
        let mut indegree: BTreeMap<&NodeId, usize> = self.nodes.keys().map(|n| (n, 0)).collect();
        let mut succs: BTreeMap<&NodeId, Vec<&NodeId>> = BTreeMap::new();
        for node in self.nodes.values() {
            let mut preds: BTreeSet<&NodeId> = BTreeSet::new();
            for input in &node.inputs {
                if let Some(p) = producers.get(input) {
                    preds.insert(p);
                }
            }
            for p in preds {
                *indegree.get_mut(&node.id).unwrap() += 1;
                succs.entry(p).or_default().push(&node.id);
            }
        }
        let mut heap: BinaryHeap<Reverse<&NodeId>> = indegree
            .iter()
            .filter(|(_, &d)| d == 0)
            .map(|(n, _)| Reverse(*n))
            .collect();
        let mut order = Vec::with_capacity(self.nodes.len());
        while let Some(Reverse(id)) = heap.pop() {
            order.push(id.clone());
            if let Some(ss) = succs.get(id) {
                for s in ss {
                    let d = indegree.get_mut(s).unwrap();
                    *d -= 1;
                    if *d == 0 {
                        heap.push(Reverse(s));
                    }
                }
            }
        }
        if order.len() != self.nodes.len() {
            let placed: BTreeSet<&NodeId> = order.iter().collect();
            // Name one edge inside the cycle to aid debugging.
            for (p, c) in self.edges() {
                if !placed.contains(&p) && !placed.contains(&c) {
                    return Err(Error::Structural(format!(
                        "cycle detected: back edge {p} -> {c}"
                    )));
                }
            }
            return Err(Error::Structural("cycle detected".into()));
        }
        Ok(order)
    }

    /// All ancestor node ids of `id` (excluding `id` itself).
    pub fn ancestors(&self, id: &NodeId) -> Result<BTreeSet<NodeId>> {
        let producers = self.producers();
        let mut seen = BTreeSet::new();
        let mut stack = vec![self.node(id)?];
        while let Some(node) = stack.pop() {
            for input in &node.inputs {
                if let Some(p) = producers.get(input) {
                    if seen.insert((*p).clone()) {
                        stack.push(self.node(p)?);
                    }
                }
            }
        }
        Ok(seen)
    }

    fn exit_subgraph_macs(&self, exit: &NodeId) -> Result<u64> {
        let mut macs = self.node(exit)?.macs;
        for a in self.ancestors(exit)? {
            macs += self.node(&a)?.macs;
        }
        Ok(macs)
    }

    /// Restrict the graph to the ancestors of exit `k` (plus the exit
    /// itself). The result has a single exit.
    pub fn truncate_to_exit(&self, exit_index: usize) -> Result<ComputationGraph> {
        let exit = self.exits.get(exit_index).ok_or_else(|| {
            Error::InvalidInput(format!(
                "exit index {exit_index} out of range ({} exits)",
                self.exits.len()
            ))
        })?;
        let mut keep = self.ancestors(exit)?;
        keep.insert(exit.clone());
        let nodes: Vec<OperatorNode> = self
            .nodes
            .values()
            .filter(|n| keep.contains(&n.id))
            .cloned()
            .collect();
        let referenced: BTreeSet<&TensorId> = nodes
            .iter()
            .flat_map(|n| n.inputs.iter().chain(n.outputs.iter()))
            .collect();
        let tensors: Vec<TensorSpec> = self
            .tensors
            .values()
            .filter(|t| referenced.contains(&t.id))
            .cloned()
            .collect();
        ComputationGraph::new(nodes, tensors, vec![exit.clone()], self.mode)
    }

    pub fn to_json(&self) -> String {
        let doc = GraphDoc {
            ir_version: IR_VERSION,
            mode: self.mode,
            nodes: self.nodes.values().cloned().collect(),
            tensors: self.tensors.values().cloned().collect(),
            exits: self.exits.clone(),
        };
        let mut s = serde_json::to_string_pretty(&doc).expect("graph serialization");
        s.push('\n');
        s
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: GraphDoc =
            serde_json::from_str(s).map_err(|e| Error::Schema(format!("graph file: {e}")))?;
        if doc.ir_version != IR_VERSION {
            return Err(Error::Schema(format!(
                "unsupported ir_version {} (expected {IR_VERSION})",
                doc.ir_version
            )));
        }
        ComputationGraph::new(doc.nodes, doc.tensors, doc.exits, doc.mode)
    }
}

/// Incremental graph construction helper used by the zoo builders,
/// transforms, and tests.
#[derive(Debug, Default)]
pub struct GraphBuilder {
    nodes: Vec<OperatorNode>,
    tensors: Vec<TensorSpec>,
    exits: Vec<NodeId>,
    mode: Option<Mode>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn mode(mut self, mode: Mode) -> Self {
        self.mode = Some(mode);
        self
    }

    pub fn tensor(&mut self, id: impl Into<String>, shape: Vec<u64>) -> TensorId {
        let spec = TensorSpec::new(id, shape);
        let tid = spec.id.clone();
        self.tensors.push(spec);
        tid
    }

    pub fn tensor_with_bits(
        &mut self,
        id: impl Into<String>,
        shape: Vec<u64>,
        elem_bits: u32,
    ) -> TensorId {
        let mut spec = TensorSpec::new(id, shape);
        spec.elem_bits = elem_bits;
        let tid = spec.id.clone();
        self.tensors.push(spec);
        tid
    }

    #[allow(clippy::too_many_arguments)]
    pub fn node(
        &mut self,
        id: impl Into<String>,
        kind: OpKind,
        inputs: Vec<TensorId>,
        outputs: Vec<TensorId>,
        macs: u64,
        param_bytes: u64,
        attributes: Attributes,
        block: Option<&str>,
    ) -> NodeId {
        let nid = NodeId::new(id);
        self.nodes.push(OperatorNode {
            id: nid.clone(),
            kind,
            inputs,
            outputs,
            macs,
            param_bytes,
            attributes,
            block: block.map(|s| s.to_string()),
        });
        nid
    }

    pub fn exit(&mut self, id: &NodeId) {
        self.exits.push(id.clone());
    }

    pub fn finish(self) -> Result<ComputationGraph> {
        ComputationGraph::new(
            self.nodes,
            self.tensors,
            self.exits,
            self.mode.unwrap_or(Mode::InferenceOnly),
        )
    }
}
