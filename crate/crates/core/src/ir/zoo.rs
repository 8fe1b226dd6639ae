//! Synthetic model zoo: structural analogs of common CNN backbones plus a
//! transformer-block chain, with analytically derived MAC and parameter
//! counts.
//!
//! MAC formulas per kind (`out` is the node's output tensor):
//!
//! * `Conv`          — `out_h * out_w * out_c * in_c * k^2`
//! * `DepthwiseConv` — `out_h * out_w * c * k^2`
//! * `PointwiseConv` — `out_h * out_w * out_c * in_c`
//! * `FullyConnected`— `rows * in_features * out_features`
//! * `Reduce`        — `elements(out) * contraction_len` (attention analog)
//! * everything else — 0 MACs
//!
//! Parameter bytes assume f32 weights. Convolutions followed by a
//! batch-norm carry no bias (the VGG entry keeps conv biases, it has no
//! batch-norm); batch-norm owns `2c` parameters; fully connected layers
//! carry biases.

use serde::{Deserialize, Serialize};

use super::{Attributes, ComputationGraph, GraphBuilder, Mode, NodeId, OpKind, ReduceFn, TensorId};
use crate::error::{Error, Result};

/// Total parameter count of the default-config graphs. Frozen from the
/// analytic per-layer formulas; tests recompute them independently.
pub const RESNET18_PARAMS: u64 = 11_689_512;
pub const RESNET34_PARAMS: u64 = 21_797_672;
pub const VGG16_PARAMS: u64 = 138_357_544;
pub const MOBILENETV2_PARAMS: u64 = 3_504_872;
pub const TRANSFORMER_CHAIN_PARAMS: u64 = 3_416_552;

/// Total MAC count of the default-config graphs.
pub const RESNET18_MACS: u64 = 1_814_073_344;
pub const RESNET34_MACS: u64 = 3_663_761_408;
pub const VGG16_MACS: u64 = 15_470_264_320;
pub const MOBILENETV2_MACS: u64 = 300_774_272;
pub const TRANSFORMER_CHAIN_MACS: u64 = 209_971_200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZooModel {
    Resnet18,
    Resnet34,
    Vgg16,
    Mobilenetv2,
    TransformerChain,
}

impl ZooModel {
    pub fn parse(name: &str) -> Option<ZooModel> {
        match name {
            "resnet18" => Some(ZooModel::Resnet18),
            "resnet34" => Some(ZooModel::Resnet34),
            "vgg16" => Some(ZooModel::Vgg16),
            "mobilenetv2" => Some(ZooModel::Mobilenetv2),
            "transformer" => Some(ZooModel::TransformerChain),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ZooModel::Resnet18 => "resnet18",
            ZooModel::Resnet34 => "resnet34",
            ZooModel::Vgg16 => "vgg16",
            ZooModel::Mobilenetv2 => "mobilenetv2",
            ZooModel::TransformerChain => "transformer",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ZooConfig {
    /// `[c, h, w]` for the CNN entries, `[seq, d_model]` for the
    /// transformer chain.
    pub input_shape: Vec<u64>,
    pub classes: u32,
    /// Attach an early-exit head after every stage in addition to the
    /// final classifier exit.
    pub stage_exits: bool,
}

impl Default for ZooConfig {
    fn default() -> Self {
        Self {
            input_shape: vec![3, 224, 224],
            classes: 1000,
            stage_exits: false,
        }
    }
}

impl ZooConfig {
    /// Model-appropriate default input shape.
    pub fn default_for(model: ZooModel) -> Self {
        match model {
            ZooModel::TransformerChain => Self {
                input_shape: vec![64, 256],
                ..Self::default()
            },
            _ => Self::default(),
        }
    }
}

pub fn build_zoo_model(model: ZooModel, config: &ZooConfig) -> Result<ComputationGraph> {
    match model {
        ZooModel::Resnet18 => build_resnet(config, &[2, 2, 2, 2]),
        ZooModel::Resnet34 => build_resnet(config, &[3, 4, 6, 3]),
        ZooModel::Vgg16 => build_vgg16(config),
        ZooModel::Mobilenetv2 => build_mobilenetv2(config),
        ZooModel::TransformerChain => build_transformer_chain(config),
    }
}

pub const F32_BYTES: u64 = 4;

pub fn conv_macs(out_h: u64, out_w: u64, out_c: u64, in_c: u64, k: u64) -> u64 {
    out_h * out_w * out_c * in_c * k * k
}

pub fn conv_out_dim(dim: u64, k: u64, stride: u64, pad: u64) -> u64 {
    (dim + 2 * pad - k) / stride + 1
}

/// Recompute a node's MAC count from its attributes and output shape,
/// independently of the count the builder stored. Returns `None` for
/// kinds without a MAC formula.
pub fn analytic_macs(graph: &ComputationGraph, node: &super::OperatorNode) -> Option<u64> {
    let out = node.outputs.first()?;
    let out_spec = graph.tensors.get(out)?;
    let a = &node.attributes;
    match node.kind {
        OpKind::Conv => {
            let (c, h, w) = chw(&out_spec.shape)?;
            debug_assert_eq!(c, a.out_channels? as u64);
            Some(conv_macs(
                h,
                w,
                a.out_channels? as u64,
                a.in_channels? as u64,
                a.kernel? as u64,
            ))
        }
        OpKind::DepthwiseConv => {
            let (c, h, w) = chw(&out_spec.shape)?;
            Some(h * w * c * (a.kernel? as u64).pow(2))
        }
        OpKind::PointwiseConv => {
            let (_, h, w) = chw(&out_spec.shape)?;
            Some(h * w * a.out_channels? as u64 * a.in_channels? as u64)
        }
        OpKind::FullyConnected => {
            let out_f = a.out_channels? as u64;
            let rows = out_spec.elements() / out_f;
            Some(rows * a.in_channels? as u64 * out_f)
        }
        OpKind::Reduce => match a.in_channels {
            Some(contraction) => Some(out_spec.elements() * contraction as u64),
            None => Some(0),
        },
        _ => Some(0),
    }
}

fn chw(shape: &[u64]) -> Option<(u64, u64, u64)> {
    match *shape {
        [c, h, w] => Some((c, h, w)),
        [c] => Some((c, 1, 1)),
        _ => None,
    }
}

/// Emits `conv + optional bn + optional relu` and returns the resulting
/// tensor and channel/space dims.
struct CnnCtx {
    b: GraphBuilder,
    next_tensor: u32,
}

impl CnnCtx {
    fn new() -> Self {
        Self {
            b: GraphBuilder::new().mode(Mode::InferenceOnly),
            next_tensor: 0,
        }
    }

    fn fresh_tensor(&mut self, shape: Vec<u64>) -> TensorId {
        let id = format!("t{:04}", self.next_tensor);
        self.next_tensor += 1;
        self.b.tensor(id, shape)
    }

    #[allow(clippy::too_many_arguments)]
    fn conv(
        &mut self,
        id: &str,
        block: &str,
        input: &TensorId,
        (in_c, h, w): (u64, u64, u64),
        out_c: u64,
        k: u64,
        stride: u64,
        pad: u64,
        bias: bool,
    ) -> (TensorId, (u64, u64, u64)) {
        let oh = conv_out_dim(h, k, stride, pad);
        let ow = conv_out_dim(w, k, stride, pad);
        let out = self.fresh_tensor(vec![out_c, oh, ow]);
        let weights = k * k * in_c * out_c + if bias { out_c } else { 0 };
        let kind = if k == 1 { OpKind::PointwiseConv } else { OpKind::Conv };
        let macs = match kind {
            OpKind::PointwiseConv => oh * ow * out_c * in_c,
            _ => conv_macs(oh, ow, out_c, in_c, k),
        };
        self.b.node(
            id,
            kind,
            vec![input.clone()],
            vec![out.clone()],
            macs,
            weights * F32_BYTES,
            Attributes::conv(k as u32, stride as u32, in_c as u32, out_c as u32),
            Some(block),
        );
        (out, (out_c, oh, ow))
    }

    fn depthwise(
        &mut self,
        id: &str,
        block: &str,
        input: &TensorId,
        (c, h, w): (u64, u64, u64),
        k: u64,
        stride: u64,
        pad: u64,
    ) -> (TensorId, (u64, u64, u64)) {
        let oh = conv_out_dim(h, k, stride, pad);
        let ow = conv_out_dim(w, k, stride, pad);
        let out = self.fresh_tensor(vec![c, oh, ow]);
        self.b.node(
            id,
            OpKind::DepthwiseConv,
            vec![input.clone()],
            vec![out.clone()],
            oh * ow * c * k * k,
            k * k * c * F32_BYTES,
            Attributes::conv(k as u32, stride as u32, c as u32, c as u32),
            Some(block),
        );
        (out, (c, oh, ow))
    }

    fn bn(&mut self, id: &str, block: &str, input: &TensorId, dims: (u64, u64, u64)) -> TensorId {
        let out = self.fresh_tensor(vec![dims.0, dims.1, dims.2]);
        self.b.node(
            id,
            OpKind::BatchNorm,
            vec![input.clone()],
            vec![out.clone()],
            0,
            2 * dims.0 * F32_BYTES,
            Attributes::default(),
            Some(block),
        );
        out
    }

    fn relu(&mut self, id: &str, block: &str, input: &TensorId, shape: Vec<u64>) -> TensorId {
        let out = self.fresh_tensor(shape);
        self.b.node(
            id,
            OpKind::Relu,
            vec![input.clone()],
            vec![out.clone()],
            0,
            0,
            Attributes::default(),
            Some(block),
        );
        out
    }

    fn pool(
        &mut self,
        id: &str,
        block: &str,
        input: &TensorId,
        out_shape: Vec<u64>,
        k: u64,
        stride: u64,
    ) -> TensorId {
        let out = self.fresh_tensor(out_shape);
        self.b.node(
            id,
            OpKind::Pool,
            vec![input.clone()],
            vec![out.clone()],
            0,
            0,
            Attributes {
                kernel: Some(k as u32),
                stride: Some(stride as u32),
                ..Attributes::default()
            },
            Some(block),
        );
        out
    }

    /// Global average pool to `[c]`.
    fn global_pool(&mut self, id: &str, block: &str, input: &TensorId, c: u64) -> TensorId {
        let out = self.fresh_tensor(vec![c]);
        self.b.node(
            id,
            OpKind::Pool,
            vec![input.clone()],
            vec![out.clone()],
            0,
            0,
            Attributes::default(),
            Some(block),
        );
        out
    }

    fn fc(
        &mut self,
        id: &str,
        block: &str,
        input: &TensorId,
        in_f: u64,
        out_f: u64,
        rows: u64,
        out_shape: Vec<u64>,
    ) -> TensorId {
        let out = self.fresh_tensor(out_shape);
        self.b.node(
            id,
            OpKind::FullyConnected,
            vec![input.clone()],
            vec![out.clone()],
            rows * in_f * out_f,
            (in_f * out_f + out_f) * F32_BYTES,
            Attributes::fc(in_f as u32, out_f as u32),
            Some(block),
        );
        out
    }

    fn add(&mut self, id: &str, block: &str, a: &TensorId, b: &TensorId, shape: Vec<u64>) -> TensorId {
        let out = self.fresh_tensor(shape);
        self.b.node(
            id,
            OpKind::Add,
            vec![a.clone(), b.clone()],
            vec![out.clone()],
            0,
            0,
            Attributes::default(),
            Some(block),
        );
        out
    }

    /// Global pool + classifier + exit-branch marker. Registers the exit.
    fn exit_head(&mut self, name: &str, input: &TensorId, c: u64, classes: u64) {
        let pooled = self.global_pool(&format!("{name}_pool"), name, input, c);
        let logits = self.fc(
            &format!("{name}_fc"),
            name,
            &pooled,
            c,
            classes,
            1,
            vec![classes],
        );
        let out = self.fresh_tensor(vec![classes]);
        let exit = self.b.node(
            format!("{name}_branch"),
            OpKind::ExitBranch,
            vec![logits],
            vec![out],
            0,
            0,
            Attributes::default(),
            Some(name),
        );
        self.b.exit(&exit);
    }
}

fn expect_chw(config: &ZooConfig) -> Result<(u64, u64, u64)> {
    match *config.input_shape.as_slice() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::InvalidInput(
            "CNN zoo entries expect a [c, h, w] input shape".into(),
        )),
    }
}

fn build_resnet(config: &ZooConfig, blocks_per_stage: &[usize; 4]) -> Result<ComputationGraph> {
    let (in_c, h, w) = expect_chw(config)?;
    let classes = config.classes as u64;
    let mut cx = CnnCtx::new();
    let input = cx.b.tensor("input", vec![in_c, h, w]);

    let (t, dims) = cx.conv("a_conv1", "stem", &input, (in_c, h, w), 64, 7, 2, 3, false);
    let t = cx.bn("a_conv1_bn", "stem", &t, dims);
    let t = cx.relu("a_conv1_relu", "stem", &t, vec![dims.0, dims.1, dims.2]);
    let (ph, pw) = (
        conv_out_dim(dims.1, 3, 2, 1),
        conv_out_dim(dims.2, 3, 2, 1),
    );
    let mut t = cx.pool("a_maxpool", "stem", &t, vec![64, ph, pw], 3, 2);
    let mut dims = (64u64, ph, pw);

    let stage_channels = [64u64, 128, 256, 512];
    for (stage, (&out_c, &n_blocks)) in stage_channels.iter().zip(blocks_per_stage).enumerate() {
        for blk in 0..n_blocks {
            let block = format!("layer{}.{}", stage + 1, blk);
            let stride = if stage > 0 && blk == 0 { 2 } else { 1 };
            let p = format!("b_l{}_{}", stage + 1, blk);
            let shortcut_in = t.clone();
            let shortcut_dims = dims;
            let (c1, d1) = cx.conv(
                &format!("{p}_conv1"),
                &block,
                &t,
                dims,
                out_c,
                3,
                stride,
                1,
                false,
            );
            let c1 = cx.bn(&format!("{p}_conv1_bn"), &block, &c1, d1);
            let c1 = cx.relu(&format!("{p}_conv1_relu"), &block, &c1, vec![d1.0, d1.1, d1.2]);
            let (c2, d2) = cx.conv(&format!("{p}_conv2"), &block, &c1, d1, out_c, 3, 1, 1, false);
            let c2 = cx.bn(&format!("{p}_conv2_bn"), &block, &c2, d2);
            let shortcut = if stride != 1 || shortcut_dims.0 != out_c {
                let (ds, dsd) = cx.conv(
                    &format!("{p}_down"),
                    &block,
                    &shortcut_in,
                    shortcut_dims,
                    out_c,
                    1,
                    stride,
                    0,
                    false,
                );
                cx.bn(&format!("{p}_down_bn"), &block, &ds, dsd)
            } else {
                shortcut_in
            };
            let sum = cx.add(
                &format!("{p}_add"),
                &block,
                &c2,
                &shortcut,
                vec![d2.0, d2.1, d2.2],
            );
            t = cx.relu(&format!("{p}_relu"), &block, &sum, vec![d2.0, d2.1, d2.2]);
            dims = d2;
        }
        if config.stage_exits && stage < stage_channels.len() - 1 {
            cx.exit_head(&format!("exit{stage}"), &t, dims.0, classes);
        }
    }

    cx.exit_head("exit_final", &t, dims.0, classes);
    cx.b.finish()
}

fn build_vgg16(config: &ZooConfig) -> Result<ComputationGraph> {
    let (in_c, h, w) = expect_chw(config)?;
    let classes = config.classes as u64;
    let mut cx = CnnCtx::new();
    let input = cx.b.tensor("input", vec![in_c, h, w]);

    let stages: [&[u64]; 5] = [&[64, 64], &[128, 128], &[256, 256, 256], &[512, 512, 512], &[512, 512, 512]];
    let mut t = input;
    let mut dims = (in_c, h, w);
    for (si, stage) in stages.iter().enumerate() {
        let block = format!("stage{}", si + 1);
        for (ci, &out_c) in stage.iter().enumerate() {
            let p = format!("b_s{}_{}", si + 1, ci + 1);
            let (c, d) = cx.conv(&format!("{p}_conv"), &block, &t, dims, out_c, 3, 1, 1, true);
            t = cx.relu(&format!("{p}_relu"), &block, &c, vec![d.0, d.1, d.2]);
            dims = d;
        }
        let (ph, pw) = (dims.1 / 2, dims.2 / 2);
        t = cx.pool(
            &format!("b_s{}_pool", si + 1),
            &block,
            &t,
            vec![dims.0, ph, pw],
            2,
            2,
        );
        dims = (dims.0, ph, pw);
        if config.stage_exits && si < stages.len() - 1 {
            cx.exit_head(&format!("exit{si}"), &t, dims.0, classes);
        }
    }

    let flat = dims.0 * dims.1 * dims.2;
    let f1 = cx.fc("c_fc1", "head", &t, flat, 4096, 1, vec![4096]);
    let f1 = cx.relu("c_fc1_relu", "head", &f1, vec![4096]);
    let f2 = cx.fc("c_fc2", "head", &f1, 4096, 4096, 1, vec![4096]);
    let f2 = cx.relu("c_fc2_relu", "head", &f2, vec![4096]);
    let logits = cx.fc("c_fc3", "head", &f2, 4096, classes, 1, vec![classes]);
    let out = cx.fresh_tensor(vec![classes]);
    let exit = cx.b.node(
        "exit_final_branch",
        OpKind::ExitBranch,
        vec![logits],
        vec![out],
        0,
        0,
        Attributes::default(),
        Some("exit_final"),
    );
    cx.b.exit(&exit);
    cx.b.finish()
}

fn build_mobilenetv2(config: &ZooConfig) -> Result<ComputationGraph> {
    let (in_c, h, w) = expect_chw(config)?;
    let classes = config.classes as u64;
    let mut cx = CnnCtx::new();
    let input = cx.b.tensor("input", vec![in_c, h, w]);

    let (t, dims) = cx.conv("a_stem_conv", "stem", &input, (in_c, h, w), 32, 3, 2, 1, false);
    let t = cx.bn("a_stem_bn", "stem", &t, dims);
    let mut t = cx.relu("a_stem_relu", "stem", &t, vec![dims.0, dims.1, dims.2]);
    let mut dims = dims;

    // (expansion factor, output channels, repeats, first stride)
    let settings: [(u64, u64, usize, u64); 7] = [
        (1, 16, 1, 1),
        (6, 24, 2, 2),
        (6, 32, 3, 2),
        (6, 64, 4, 2),
        (6, 96, 3, 1),
        (6, 160, 3, 2),
        (6, 320, 1, 1),
    ];
    let mut feat = 0usize;
    for (si, &(expand, out_c, repeats, first_stride)) in settings.iter().enumerate() {
        for r in 0..repeats {
            let stride = if r == 0 { first_stride } else { 1 };
            let block = format!("feat{feat}");
            let p = format!("b_f{feat:02}");
            let block_in = t.clone();
            let block_in_dims = dims;
            let hidden = block_in_dims.0 * expand;
            let mut cur = block_in.clone();
            let mut cur_dims = block_in_dims;
            if expand != 1 {
                let (e, ed) = cx.conv(
                    &format!("{p}_expand"),
                    &block,
                    &cur,
                    cur_dims,
                    hidden,
                    1,
                    1,
                    0,
                    false,
                );
                let e = cx.bn(&format!("{p}_expand_bn"), &block, &e, ed);
                cur = cx.relu(&format!("{p}_expand_relu"), &block, &e, vec![ed.0, ed.1, ed.2]);
                cur_dims = ed;
            }
            let (d, dd) = cx.depthwise(&format!("{p}_dw"), &block, &cur, cur_dims, 3, stride, 1);
            let d = cx.bn(&format!("{p}_dw_bn"), &block, &d, dd);
            let d = cx.relu(&format!("{p}_dw_relu"), &block, &d, vec![dd.0, dd.1, dd.2]);
            let (pj, pd) = cx.conv(&format!("{p}_project"), &block, &d, dd, out_c, 1, 1, 0, false);
            let pj = cx.bn(&format!("{p}_project_bn"), &block, &pj, pd);
            t = if stride == 1 && block_in_dims.0 == out_c {
                cx.add(
                    &format!("{p}_add"),
                    &block,
                    &pj,
                    &block_in,
                    vec![pd.0, pd.1, pd.2],
                )
            } else {
                pj
            };
            dims = pd;
            feat += 1;
        }
        if config.stage_exits && si < settings.len() - 1 {
            cx.exit_head(&format!("exit{si}"), &t, dims.0, classes);
        }
    }

    let (hd, hdd) = cx.conv("c_head_conv", "head", &t, dims, 1280, 1, 1, 0, false);
    let hd = cx.bn("c_head_bn", "head", &hd, hdd);
    let t = cx.relu("c_head_relu", "head", &hd, vec![hdd.0, hdd.1, hdd.2]);
    cx.exit_head("exit_final", &t, 1280, classes);
    cx.b.finish()
}

fn build_transformer_chain(config: &ZooConfig) -> Result<ComputationGraph> {
    let (seq, d) = match *config.input_shape.as_slice() {
        [seq, d] => (seq, d),
        _ => {
            return Err(Error::InvalidInput(
                "transformer zoo entry expects a [seq, d_model] input shape".into(),
            ))
        }
    };
    let classes = config.classes as u64;
    let n_blocks = 4usize;
    let mut cx = CnnCtx::new();
    let input = cx.b.tensor("input", vec![seq, d]);

    let mut t = input;
    for blk in 0..n_blocks {
        let block = format!("block{blk}");
        let p = format!("b_{blk}");
        let norm1 = {
            let out = cx.fresh_tensor(vec![seq, d]);
            cx.b.node(
                format!("{p}_ln1"),
                OpKind::BatchNorm,
                vec![t.clone()],
                vec![out.clone()],
                0,
                2 * d * F32_BYTES,
                Attributes::default(),
                Some(&block),
            );
            out
        };
        let q = cx.fc(&format!("{p}_q"), &block, &norm1, d, d, seq, vec![seq, d]);
        let k = cx.fc(&format!("{p}_k"), &block, &norm1, d, d, seq, vec![seq, d]);
        let v = cx.fc(&format!("{p}_v"), &block, &norm1, d, d, seq, vec![seq, d]);
        // Attention contraction analogs; `in_channels` records the
        // contraction length so MACs stay analytically recomputable.
        let scores = {
            let out = cx.fresh_tensor(vec![seq, seq]);
            cx.b.node(
                format!("{p}_scores"),
                OpKind::Reduce,
                vec![q, k],
                vec![out.clone()],
                seq * seq * d,
                0,
                Attributes {
                    reduce: Some(ReduceFn::Sum),
                    in_channels: Some(d as u32),
                    ..Attributes::default()
                },
                Some(&block),
            );
            out
        };
        let attended = {
            let out = cx.fresh_tensor(vec![seq, d]);
            cx.b.node(
                format!("{p}_attend"),
                OpKind::Reduce,
                vec![scores, v],
                vec![out.clone()],
                seq * seq * d,
                0,
                Attributes {
                    reduce: Some(ReduceFn::Sum),
                    in_channels: Some(seq as u32),
                    ..Attributes::default()
                },
                Some(&block),
            );
            out
        };
        let o = cx.fc(&format!("{p}_o"), &block, &attended, d, d, seq, vec![seq, d]);
        let res1 = cx.add(&format!("{p}_add1"), &block, &o, &t, vec![seq, d]);
        let norm2 = {
            let out = cx.fresh_tensor(vec![seq, d]);
            cx.b.node(
                format!("{p}_ln2"),
                OpKind::BatchNorm,
                vec![res1.clone()],
                vec![out.clone()],
                0,
                2 * d * F32_BYTES,
                Attributes::default(),
                Some(&block),
            );
            out
        };
        let f1 = cx.fc(&format!("{p}_ffn1"), &block, &norm2, d, 4 * d, seq, vec![seq, 4 * d]);
        let f1 = cx.relu(&format!("{p}_ffn_relu"), &block, &f1, vec![seq, 4 * d]);
        let f2 = cx.fc(&format!("{p}_ffn2"), &block, &f1, 4 * d, d, seq, vec![seq, d]);
        t = cx.add(&format!("{p}_add2"), &block, &f2, &res1, vec![seq, d]);
        if config.stage_exits && blk < n_blocks - 1 {
            let pooled = cx.global_pool(&format!("exit{blk}_pool"), &format!("exit{blk}"), &t, d);
            let logits = cx.fc(
                &format!("exit{blk}_fc"),
                &format!("exit{blk}"),
                &pooled,
                d,
                classes,
                1,
                vec![classes],
            );
            let out = cx.fresh_tensor(vec![classes]);
            let exit = cx.b.node(
                format!("exit{blk}_branch"),
                OpKind::ExitBranch,
                vec![logits],
                vec![out],
                0,
                0,
                Attributes::default(),
                Some(&format!("exit{blk}")),
            );
            cx.b.exit(&exit);
        }
    }

    let norm_f = {
        let out = cx.fresh_tensor(vec![seq, d]);
        cx.b.node(
            "c_ln_final",
            OpKind::BatchNorm,
            vec![t.clone()],
            vec![out.clone()],
            0,
            2 * d * F32_BYTES,
            Attributes::default(),
            Some("head"),
        );
        out
    };
    cx.exit_head("exit_final", &norm_f, d, classes);
    cx.b.finish()
}

/// Block labels that can be skipped without breaking dataflow: the block
/// has exactly one boundary input tensor and one boundary output tensor
/// with identical specs.
pub fn skippable_blocks(graph: &ComputationGraph) -> Vec<String> {
    let producers = graph.producers();
    let consumers = graph.consumers();
    let mut blocks: std::collections::BTreeMap<&str, Vec<&super::OperatorNode>> = Default::default();
    for node in graph.nodes.values() {
        if let Some(b) = &node.block {
            blocks.entry(b).or_default().push(node);
        }
    }
    let mut result = Vec::new();
    'outer: for (label, nodes) in blocks {
        let member: std::collections::BTreeSet<&NodeId> = nodes.iter().map(|n| &n.id).collect();
        let mut boundary_in: Vec<&TensorId> = Vec::new();
        let mut boundary_out: Vec<&TensorId> = Vec::new();
        for node in &nodes {
            for input in &node.inputs {
                match producers.get(input) {
                    Some(p) if member.contains(*p) => {}
                    _ => {
                        if !boundary_in.contains(&input) {
                            boundary_in.push(input);
                        }
                    }
                }
            }
            for output in &node.outputs {
                let escapes = match consumers.get(output) {
                    Some(cs) => cs.iter().any(|c| !member.contains(*c)),
                    None => true,
                };
                if escapes && !boundary_out.contains(&output) {
                    boundary_out.push(output);
                }
            }
        }
        if boundary_in.len() != 1 || boundary_out.len() != 1 {
            continue 'outer;
        }
        let (i, o) = (boundary_in[0], boundary_out[0]);
        let (ti, to) = (&graph.tensors[i], &graph.tensors[o]);
        if ti.shape == to.shape && ti.elem_bits == to.elem_bits {
            result.push(label.to_string());
        }
    }
    result
}

#[cfg(test)]
mod tests {
    use super::*;

    fn totals(model: ZooModel) -> (u64, u64) {
        let g = build_zoo_model(model, &ZooConfig::default_for(model)).unwrap();
        (g.total_param_bytes() / F32_BYTES, g.total_macs())
    }

    #[test]
    fn fc_macs_and_params_match_definition() {
        let mut cx = CnnCtx::new();
        let input = cx.b.tensor("input", vec![100]);
        cx.fc("fc", "head", &input, 100, 10, 1, vec![10]);
        let g = cx.b.finish().unwrap();
        let node = g.node(&NodeId::new("fc")).unwrap();
        assert_eq!(node.macs, 1000);
        assert_eq!(node.param_bytes, 100 * 10 * 4 + 10 * 4);
    }

    #[test]
    fn conv_macs_match_definition() {
        // 3x3 conv, in 16, out 32, on an 8x8 output map.
        assert_eq!(conv_macs(8, 8, 32, 16, 3), 294_912);
    }

    #[test]
    fn documented_totals_hold_exactly() {
        assert_eq!(totals(ZooModel::Resnet18), (RESNET18_PARAMS, RESNET18_MACS));
        assert_eq!(totals(ZooModel::Resnet34), (RESNET34_PARAMS, RESNET34_MACS));
        assert_eq!(totals(ZooModel::Vgg16), (VGG16_PARAMS, VGG16_MACS));
        assert_eq!(
            totals(ZooModel::Mobilenetv2),
            (MOBILENETV2_PARAMS, MOBILENETV2_MACS)
        );
        assert_eq!(
            totals(ZooModel::TransformerChain),
            (TRANSFORMER_CHAIN_PARAMS, TRANSFORMER_CHAIN_MACS)
        );
    }

    #[test]
    fn vgg16_close_to_reference_param_count() {
        let (params, _) = totals(ZooModel::Vgg16);
        let reference = 138_000_000f64;
        assert!((params as f64 - reference).abs() / reference < 0.05);
    }

    #[test]
    fn stored_macs_match_independent_recomputation() {
        for model in [
            ZooModel::Resnet18,
            ZooModel::Resnet34,
            ZooModel::Vgg16,
            ZooModel::Mobilenetv2,
            ZooModel::TransformerChain,
        ] {
            let mut cfg = ZooConfig::default_for(model);
            cfg.stage_exits = true;
            let g = build_zoo_model(model, &cfg).unwrap();
            for node in g.nodes.values() {
                let expected = analytic_macs(&g, node).unwrap();
                assert_eq!(node.macs, expected, "macs mismatch at {}", node.id);
            }
        }
    }

    #[test]
    fn resnet18_add_nodes_follow_branch_tails() {
        let g = build_zoo_model(ZooModel::Resnet18, &ZooConfig::default()).unwrap();
        let order = g.topo_sort().unwrap();
        let pos: std::collections::BTreeMap<&NodeId, usize> =
            order.iter().enumerate().map(|(i, n)| (n, i)).collect();
        let producers = g.producers();
        let mut add_count = 0;
        for node in g.nodes.values() {
            if node.kind == OpKind::Add {
                add_count += 1;
                for input in &node.inputs {
                    let p = producers[input];
                    assert!(pos[p] < pos[&node.id]);
                }
            }
        }
        assert_eq!(add_count, 8); // two basic blocks per stage
    }

    #[test]
    fn exit_subgraphs_strictly_grow() {
        for model in [ZooModel::Resnet18, ZooModel::Mobilenetv2] {
            let mut cfg = ZooConfig::default_for(model);
            cfg.stage_exits = true;
            let g = build_zoo_model(model, &cfg).unwrap();
            assert!(g.exits.len() > 2);
            let mut prev = 0u64;
            for k in 0..g.exits.len() {
                let sub = g.truncate_to_exit(k).unwrap();
                let macs = sub.total_macs();
                assert!(macs > prev, "exit {k} not strictly deeper");
                prev = macs;
            }
        }
    }

    #[test]
    fn skippable_blocks_are_the_identity_shaped_residuals() {
        let g = build_zoo_model(ZooModel::Resnet18, &ZooConfig::default()).unwrap();
        let skippable = skippable_blocks(&g);
        assert_eq!(
            skippable,
            vec!["layer1.0", "layer1.1", "layer2.1", "layer3.1", "layer4.1"]
        );
    }

    #[test]
    fn unsupported_name_is_none() {
        assert!(ZooModel::parse("resnet50").is_none());
    }
}
