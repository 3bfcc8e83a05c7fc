//! Declarative network description and its shape-checked instantiation.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::data::SPATIAL_MULTIPLE;
use crate::error::{Error, Result};
use crate::nn::layers::{conv_out_len, transposed_out_len, Window};
use crate::resize::ScaleFactor;

/// Channel width of the segmentation head.
pub const HEAD_CHANNELS: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    /// 1 for a single-stage network, 2 for the second cascade stage.
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    /// Width of the initial 7×7 convolution.
    #[serde(default = "default_base_channels")]
    pub base_channels: usize,
    #[serde(default = "default_encoder_channels")]
    pub encoder_channels: Vec<usize>,
    /// Downscaled copies of the input concatenated into the encoder.
    #[serde(default)]
    pub scale_inputs: BTreeSet<ScaleFactor>,
    #[serde(default = "default_input_size")]
    pub input_size: (usize, usize),
}

fn default_in_channels() -> usize {
    1
}

fn default_base_channels() -> usize {
    64
}

fn default_encoder_channels() -> Vec<usize> {
    vec![64, 128, 256, 512]
}

fn default_input_size() -> (usize, usize) {
    (256, 256)
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            in_channels: default_in_channels(),
            base_channels: default_base_channels(),
            encoder_channels: default_encoder_channels(),
            scale_inputs: BTreeSet::new(),
            input_size: default_input_size(),
        }
    }
}

impl NetworkConfig {
    /// Single-scale LinkNet.
    pub fn plain(input_size: (usize, usize)) -> Self {
        NetworkConfig {
            input_size,
            ..Default::default()
        }
    }

    /// LinkNet with the half-scale input injected.
    pub fn dual_scale(input_size: (usize, usize)) -> Self {
        Self::plain(input_size).with_scales(&[ScaleFactor::Half])
    }

    pub fn with_scales(mut self, scales: &[ScaleFactor]) -> Self {
        self.scale_inputs = scales.iter().copied().collect();
        self
    }

    pub fn with_channels(mut self, base: usize, encoder: [usize; 4]) -> Self {
        self.base_channels = base;
        self.encoder_channels = encoder.to_vec();
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.base_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.encoder_channels.len() != 4 {
            return Err(Error::Config(format!(
                "encoder_channels needs 4 entries, got {}",
                self.encoder_channels.len()
            )));
        }
        if self.encoder_channels[0] == 0
            || self.encoder_channels.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(Error::Config(format!(
                "encoder_channels must be positive and strictly increasing: {:?}",
                self.encoder_channels
            )));
        }
        if let Some(c) = self.encoder_channels.iter().find(|c| *c % 4 != 0) {
            return Err(Error::Config(format!(
                "encoder channel count {c} is not divisible by 4 (decoder bottleneck)"
            )));
        }
        let (h, w) = self.input_size;
        if h == 0 || w == 0 || h % SPATIAL_MULTIPLE != 0 || w % SPATIAL_MULTIPLE != 0 {
            return Err(Error::Config(format!(
                "input size {h}x{w} must be divisible by {SPATIAL_MULTIPLE}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LayerKind {
    Input,
    Conv {
        kernel: usize,
        stride: usize,
        pad: usize,
        out_channels: usize,
        bias: bool,
    },
    TransposedConv {
        kernel: usize,
        stride: usize,
        pad: usize,
        output_pad: usize,
        out_channels: usize,
        bias: bool,
    },
    BatchNorm,
    Relu,
    Sigmoid,
    MaxPool {
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Add,
    Concat,
    BilinearResize {
        factor: ScaleFactor,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
}

pub type NodeId = usize;

/// A layer wired to its producers, with its inferred `(c, h, w)` output.
#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub spec: LayerSpec,
    pub inputs: Vec<NodeId>,
    pub shape: [usize; 3],
}

impl Node {
    pub fn name(&self) -> &str {
        &self.spec.name
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    Weight { fan_in: usize },
    Bias,
    Gamma,
    Beta,
    RunningMean,
    RunningVar,
}

impl ParamRole {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamRole::RunningMean | ParamRole::RunningVar)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub dims: Vec<usize>,
    pub role: ParamRole,
}

/// Topologically ordered layers; node 0 is the input.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkGraph {
    pub(crate) nodes: Vec<Node>,
    pub(crate) params: Vec<ParamSpec>,
    pub(crate) output: NodeId,
}

impl NetworkGraph {
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn params(&self) -> &[ParamSpec] {
        &self.params
    }

    pub fn output(&self) -> NodeId {
        self.output
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.nodes[0].shape
    }

    pub fn output_shape(&self) -> [usize; 3] {
        self.nodes[self.output].shape
    }

    pub fn node(&self, name: &str) -> Option<&Node> {
        self.nodes.iter().find(|n| n.spec.name == name)
    }

    /// `(name, [c, h, w])` for every layer in execution order.
    pub fn shape_trace(&self) -> Vec<(String, [usize; 3])> {
        self.nodes
            .iter()
            .map(|n| (n.spec.name.clone(), n.shape))
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.role.trainable())
            .map(|p| p.dims.iter().product::<usize>())
            .sum()
    }

    /// Window geometry for conv-like nodes.
    pub(crate) fn window(&self, id: NodeId) -> Option<Window> {
        let node = &self.nodes[id];
        let [in_c, in_h, in_w] = self.nodes[node.inputs[0]].shape;
        let [out_c, out_h, out_w] = node.shape;
        match node.spec.kind {
            LayerKind::Conv {
                kernel,
                stride,
                pad,
                ..
            }
            | LayerKind::MaxPool {
                kernel,
                stride,
                pad,
            } => Some(Window {
                channels: in_c,
                in_h,
                in_w,
                kernel,
                stride,
                pad,
                out_h,
                out_w,
            }),
            // adjoint window: slides over the output, positions are input pixels
            LayerKind::TransposedConv {
                kernel,
                stride,
                pad,
                ..
            } => Some(Window {
                channels: out_c,
                in_h: out_h,
                in_w: out_w,
                kernel,
                stride,
                pad,
                out_h: in_h,
                out_w: in_w,
            }),
            _ => None,
        }
    }
}

/// Incrementally assembles a [`NetworkGraph`], inferring shapes as it goes.
pub struct GraphBuilder {
    nodes: Vec<Node>,
    params: Vec<ParamSpec>,
}

impl GraphBuilder {
    pub fn new(in_channels: usize, height: usize, width: usize) -> Self {
        GraphBuilder {
            nodes: vec![Node {
                spec: LayerSpec {
                    name: "input".into(),
                    kind: LayerKind::Input,
                },
                inputs: vec![],
                shape: [in_channels, height, width],
            }],
            params: vec![],
        }
    }

    pub fn input(&self) -> NodeId {
        0
    }

    pub fn shape(&self, id: NodeId) -> [usize; 3] {
        self.nodes[id].shape
    }

    pub fn finish(self, output: NodeId) -> NetworkGraph {
        NetworkGraph {
            nodes: self.nodes,
            params: self.params,
            output,
        }
    }

    fn push(&mut self, name: String, kind: LayerKind, inputs: Vec<NodeId>) -> Result<NodeId> {
        if self.nodes.iter().any(|n| n.spec.name == name) {
            return Err(Error::Build(format!("duplicate layer name '{name}'")));
        }
        let shapes: Vec<[usize; 3]> = inputs.iter().map(|&i| self.nodes[i].shape).collect();
        let shape = infer_shape(&name, &kind, &shapes)?;
        match kind {
            LayerKind::Conv {
                kernel,
                out_channels,
                bias,
                ..
            } => {
                let in_c = shapes[0][0];
                self.param(&name, "weight", vec![out_channels, in_c, kernel, kernel], ParamRole::Weight {
                    fan_in: in_c * kernel * kernel,
                });
                if bias {
                    self.param(&name, "bias", vec![out_channels], ParamRole::Bias);
                }
            }
            LayerKind::TransposedConv {
                kernel,
                out_channels,
                bias,
                ..
            } => {
                let in_c = shapes[0][0];
                self.param(&name, "weight", vec![in_c, out_channels, kernel, kernel], ParamRole::Weight {
                    fan_in: in_c * kernel * kernel,
                });
                if bias {
                    self.param(&name, "bias", vec![out_channels], ParamRole::Bias);
                }
            }
            LayerKind::BatchNorm => {
                let c = shapes[0][0];
                self.param(&name, "gamma", vec![c], ParamRole::Gamma);
                self.param(&name, "beta", vec![c], ParamRole::Beta);
                self.param(&name, "running_mean", vec![c], ParamRole::RunningMean);
                self.param(&name, "running_var", vec![c], ParamRole::RunningVar);
            }
            _ => {}
        }
        self.nodes.push(Node {
            spec: LayerSpec { name, kind },
            inputs,
            shape,
        });
        Ok(self.nodes.len() - 1)
    }

    fn param(&mut self, layer: &str, suffix: &str, dims: Vec<usize>, role: ParamRole) {
        self.params.push(ParamSpec {
            name: format!("{layer}.{suffix}"),
            dims,
            role,
        });
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv(
        &mut self,
        name: &str,
        x: NodeId,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Result<NodeId> {
        self.push(
            name.into(),
            LayerKind::Conv {
                kernel,
                stride,
                pad,
                out_channels,
                bias,
            },
            vec![x],
        )
    }

    #[allow(clippy::too_many_arguments)]
    pub fn transposed_conv(
        &mut self,
        name: &str,
        x: NodeId,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        output_pad: usize,
        bias: bool,
    ) -> Result<NodeId> {
        self.push(
            name.into(),
            LayerKind::TransposedConv {
                kernel,
                stride,
                pad,
                output_pad,
                out_channels,
                bias,
            },
            vec![x],
        )
    }

    pub fn batch_norm(&mut self, name: &str, x: NodeId) -> Result<NodeId> {
        self.push(name.into(), LayerKind::BatchNorm, vec![x])
    }

    pub fn relu(&mut self, name: &str, x: NodeId) -> Result<NodeId> {
        self.push(name.into(), LayerKind::Relu, vec![x])
    }

    pub fn sigmoid(&mut self, name: &str, x: NodeId) -> Result<NodeId> {
        self.push(name.into(), LayerKind::Sigmoid, vec![x])
    }

    pub fn max_pool(
        &mut self,
        name: &str,
        x: NodeId,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        self.push(
            name.into(),
            LayerKind::MaxPool {
                kernel,
                stride,
                pad,
            },
            vec![x],
        )
    }

    pub fn add(&mut self, name: &str, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(name.into(), LayerKind::Add, vec![a, b])
    }

    pub fn concat(&mut self, name: &str, parts: &[NodeId]) -> Result<NodeId> {
        self.push(name.into(), LayerKind::Concat, parts.to_vec())
    }

    pub fn resize(&mut self, name: &str, x: NodeId, factor: ScaleFactor) -> Result<NodeId> {
        self.push(name.into(), LayerKind::BilinearResize { factor }, vec![x])
    }

    /// conv → batch norm → ReLU.
    #[allow(clippy::too_many_arguments)]
    pub fn conv_bn_relu(
        &mut self,
        prefix: &str,
        x: NodeId,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let c = self.conv(&format!("{prefix}.conv"), x, out_channels, kernel, stride, pad, false)?;
        let b = self.batch_norm(&format!("{prefix}.bn"), c)?;
        self.relu(&format!("{prefix}.relu"), b)
    }

    /// Residual encoder unit:
    /// `ReLU(BN(conv3×3(ReLU(BN(conv3×3_s(x))))) + proj(x))`.
    ///
    /// `proj` is the identity when shapes already agree, else a strided 1×1
    /// conv with batch norm.
    pub fn res_block(
        &mut self,
        prefix: &str,
        x: NodeId,
        out_channels: usize,
        stride: usize,
    ) -> Result<NodeId> {
        if !(1..=2).contains(&stride) {
            return Err(Error::Build(format!("{prefix}: stride must be 1 or 2, got {stride}")));
        }
        let in_c = self.shape(x)[0];
        let a = self.conv_bn_relu(&format!("{prefix}.a"), x, out_channels, 3, stride, 1)?;
        let c = self.conv(&format!("{prefix}.b.conv"), a, out_channels, 3, 1, 1, false)?;
        let b = self.batch_norm(&format!("{prefix}.b.bn"), c)?;
        let shortcut = if stride == 1 && in_c == out_channels {
            x
        } else {
            let p = self.conv(
                &format!("{prefix}.proj.conv"),
                x,
                out_channels,
                1,
                stride,
                0,
                false,
            )?;
            self.batch_norm(&format!("{prefix}.proj.bn"), p)?
        };
        let sum = self.add(&format!("{prefix}.add"), b, shortcut)?;
        self.relu(&format!("{prefix}.out"), sum)
    }

    /// Decoder unit: 1×1 conv to `c/4`, 3×3 stride-2 transposed conv
    /// (spatial ×2), 1×1 conv to `out_channels`; BN + ReLU after each.
    pub fn decode_block(&mut self, prefix: &str, x: NodeId, out_channels: usize) -> Result<NodeId> {
        let in_c = self.shape(x)[0];
        if !in_c.is_multiple_of(4) {
            return Err(Error::Build(format!(
                "{prefix}: decoder input channels {in_c} not divisible by 4"
            )));
        }
        let mid = in_c / 4;
        let a = self.conv_bn_relu(&format!("{prefix}.reduce"), x, mid, 1, 1, 0)?;
        let t = self.transposed_conv(&format!("{prefix}.up.tconv"), a, mid, 3, 2, 1, 1, false)?;
        let t = self.batch_norm(&format!("{prefix}.up.bn"), t)?;
        let t = self.relu(&format!("{prefix}.up.relu"), t)?;
        self.conv_bn_relu(&format!("{prefix}.expand"), t, out_channels, 1, 1, 0)
    }

    /// Concatenates the input resized by `factor` onto `feature`.
    pub fn inject_scale(&mut self, feature: NodeId, factor: ScaleFactor) -> Result<NodeId> {
        let tag = match factor {
            ScaleFactor::Half => "half",
            ScaleFactor::Quarter => "quarter",
            ScaleFactor::Eighth => "eighth",
        };
        let [_, h, w] = self.shape(0);
        let [_, fh, fw] = self.shape(feature);
        if factor.target_len(h).ok() != Some(fh) || factor.target_len(w).ok() != Some(fw) {
            return Err(Error::Build(format!(
                "scale {factor} of a {h}x{w} input cannot be injected at a {fh}x{fw} feature map"
            )));
        }
        let scaled = self.resize(&format!("scale_{tag}"), 0, factor)?;
        self.concat(&format!("inject_{tag}"), &[feature, scaled])
    }
}

fn infer_shape(name: &str, kind: &LayerKind, inputs: &[[usize; 3]]) -> Result<[usize; 3]> {
    let err = |msg: String| Error::Build(format!("{name}: {msg}"));
    let one = |n: usize| -> Result<()> {
        if inputs.len() != n {
            return Err(err(format!("expected {n} inputs, got {}", inputs.len())));
        }
        Ok(())
    };
    match *kind {
        LayerKind::Input => Err(err("input nodes are created by the builder".into())),
        LayerKind::Conv {
            kernel,
            stride,
            pad,
            out_channels,
            ..
        } => {
            one(1)?;
            let [_, h, w] = inputs[0];
            let oh = conv_out_len(h, kernel, stride, pad);
            let ow = conv_out_len(w, kernel, stride, pad);
            match (oh, ow) {
                (Some(oh), Some(ow)) if out_channels > 0 => Ok([out_channels, oh, ow]),
                _ => Err(err(format!("conv k={kernel} does not fit {h}x{w}"))),
            }
        }
        LayerKind::TransposedConv {
            kernel,
            stride,
            pad,
            output_pad,
            out_channels,
            ..
        } => {
            one(1)?;
            let [_, h, w] = inputs[0];
            if output_pad >= stride.max(1) {
                return Err(err("output padding must be smaller than the stride".into()));
            }
            match (
                transposed_out_len(h, kernel, stride, pad, output_pad),
                transposed_out_len(w, kernel, stride, pad, output_pad),
            ) {
                (Some(oh), Some(ow)) if oh > 0 && ow > 0 && out_channels > 0 => {
                    Ok([out_channels, oh, ow])
                }
                _ => Err(err("transposed conv produces an empty output".into())),
            }
        }
        LayerKind::MaxPool {
            kernel,
            stride,
            pad,
        } => {
            one(1)?;
            let [c, h, w] = inputs[0];
            if pad * 2 > kernel {
                return Err(err("max-pool padding exceeds half the kernel".into()));
            }
            match (conv_out_len(h, kernel, stride, pad), conv_out_len(w, kernel, stride, pad)) {
                (Some(oh), Some(ow)) => Ok([c, oh, ow]),
                _ => Err(err(format!("pool k={kernel} does not fit {h}x{w}"))),
            }
        }
        LayerKind::BatchNorm | LayerKind::Relu | LayerKind::Sigmoid => {
            one(1)?;
            Ok(inputs[0])
        }
        LayerKind::Add => {
            one(2)?;
            if inputs[0] != inputs[1] {
                return Err(err(format!(
                    "add needs identical dims, got {:?} and {:?}",
                    inputs[0], inputs[1]
                )));
            }
            Ok(inputs[0])
        }
        LayerKind::Concat => {
            if inputs.is_empty() {
                return Err(err("concat needs at least one input".into()));
            }
            let [_, h, w] = inputs[0];
            if inputs.iter().any(|s| s[1] != h || s[2] != w) {
                return Err(err(format!("concat spatial dims differ: {inputs:?}")));
            }
            Ok([inputs.iter().map(|s| s[0]).sum(), h, w])
        }
        LayerKind::BilinearResize { factor } => {
            one(1)?;
            let [c, h, w] = inputs[0];
            Ok([
                c,
                factor.target_len(h).map_err(|e| err(e.to_string()))?,
                factor.target_len(w).map_err(|e| err(e.to_string()))?,
            ])
        }
    }
}

/// Builds the LinkNet-style encoder-decoder described by `config`.
///
/// Layout: 7×7/2 conv → 3×3/2 max-pool → four residual encoder stages (the
/// last three halve the resolution) → four decoder stages, each doubling the
/// resolution and summed with the matching encoder output → head (3×3/2
/// transposed conv to 32 channels, 3×3 conv, 3×3 conv to one channel,
/// sigmoid). Scale inputs are concatenated at the matching resolution:
/// 1/2 after the initial conv, 1/4 after the pool, 1/8 after encoder 2.
pub fn build_network(config: &NetworkConfig) -> Result<NetworkGraph> {
    config.validate()?;
    let (h, w) = config.input_size;
    let enc = &config.encoder_channels;
    let mut g = GraphBuilder::new(config.in_channels, h, w);
    let inject = |g: &mut GraphBuilder, node: NodeId, f: ScaleFactor| -> Result<NodeId> {
        if config.scale_inputs.contains(&f) {
            g.inject_scale(node, f)
        } else {
            Ok(node)
        }
    };

    let x = g.conv_bn_relu("init", g.input(), config.base_channels, 7, 2, 3)?;
    let x = inject(&mut g, x, ScaleFactor::Half)?;
    let x = g.max_pool("pool", x, 3, 2, 1)?;
    let x = inject(&mut g, x, ScaleFactor::Quarter)?;
    let e1 = g.res_block("enc1", x, enc[0], 1)?;
    let e2 = g.res_block("enc2", e1, enc[1], 2)?;
    let x = inject(&mut g, e2, ScaleFactor::Eighth)?;
    let e3 = g.res_block("enc3", x, enc[2], 2)?;
    let e4 = g.res_block("enc4", e3, enc[3], 2)?;

    let d4 = g.decode_block("dec4", e4, enc[2])?;
    let d4 = g.add("skip3", d4, e3)?;
    let d3 = g.decode_block("dec3", d4, enc[1])?;
    let d3 = g.add("skip2", d3, e2)?;
    let d2 = g.decode_block("dec2", d3, enc[0])?;
    let d2 = g.add("skip1", d2, e1)?;
    let d1 = g.decode_block("dec1", d2, enc[0])?;

    let y = g.transposed_conv("head.up.tconv", d1, HEAD_CHANNELS, 3, 2, 1, 1, false)?;
    let y = g.batch_norm("head.up.bn", y)?;
    let y = g.relu("head.up.relu", y)?;
    let y = g.conv_bn_relu("head.mid", y, HEAD_CHANNELS, 3, 1, 1)?;
    let y = g.conv("head.out", y, 1, 3, 1, 1, true)?;
    let y = g.sigmoid("head.sigmoid", y)?;

    let graph = g.finish(y);
    if graph.output_shape() != [1, h, w] {
        return Err(Error::Build(format!(
            "output shape {:?} does not match input {h}x{w}",
            graph.output_shape()
        )));
    }
    Ok(graph)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spatial(g: &NetworkGraph, name: &str) -> usize {
        g.node(name).unwrap().shape[1]
    }

    #[test]
    fn plain_linknet_shape_trace_on_64() {
        let g = build_network(&NetworkConfig::plain((64, 64))).unwrap();
        let enc: Vec<usize> = ["init.relu", "pool", "enc1.out", "enc2.out", "enc3.out", "enc4.out"]
            .iter()
            .map(|n| spatial(&g, n))
            .collect();
        assert_eq!(enc, vec![32, 16, 16, 8, 4, 2]);
        let dec: Vec<usize> = ["skip3", "skip2", "skip1", "dec1.expand.relu", "head.up.relu"]
            .iter()
            .map(|n| spatial(&g, n))
            .collect();
        assert_eq!(dec, vec![4, 8, 16, 32, 64]);
        assert_eq!(g.output_shape(), [1, 64, 64]);
        assert!(g.node("inject_half").is_none());
    }

    #[test]
    fn dual_scale_adds_one_channel_after_initial_conv() {
        let g = build_network(&NetworkConfig::dual_scale((64, 64))).unwrap();
        assert_eq!(g.node("inject_half").unwrap().shape, [65, 32, 32]);
        assert_eq!(g.node("pool").unwrap().shape, [65, 16, 16]);
        // the consuming conv absorbs the extra channel
        let w = g.params().iter().find(|p| p.name == "enc1.a.conv.weight").unwrap();
        assert_eq!(w.dims, vec![64, 65, 3, 3]);
    }

    #[test]
    fn multi_scale_builds() {
        let cfg = NetworkConfig::plain((64, 64)).with_scales(&ScaleFactor::ALL);
        let g = build_network(&cfg).unwrap();
        // half adds one channel before the pool, quarter a second after it
        assert_eq!(g.node("inject_quarter").unwrap().shape, [66, 16, 16]);
        assert_eq!(g.node("inject_eighth").unwrap().shape, [129, 8, 8]);
        assert_eq!(g.output_shape(), [1, 64, 64]);
    }

    #[test]
    fn two_channel_stage_injects_two_channels() {
        let mut cfg = NetworkConfig::dual_scale((32, 32));
        cfg.in_channels = 2;
        let g = build_network(&cfg).unwrap();
        assert_eq!(g.node("inject_half").unwrap().shape[0], 64 + 2);
        assert_eq!(g.input_shape(), [2, 32, 32]);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = NetworkConfig::plain((48, 64));
        assert!(build_network(&cfg).is_err());
        cfg.input_size = (64, 64);
        cfg.encoder_channels = vec![64, 64, 256, 512];
        assert!(matches!(build_network(&cfg), Err(Error::Config(_))));
        cfg.encoder_channels = vec![64, 128, 256];
        assert!(build_network(&cfg).is_err());
    }

    #[test]
    fn mismatched_injection_site_is_a_build_error() {
        let mut g = GraphBuilder::new(1, 64, 64);
        let x = g.conv("c", 0, 4, 3, 1, 1, false).unwrap();
        assert!(matches!(g.inject_scale(x, ScaleFactor::Half), Err(Error::Build(_))));
    }

    #[test]
    fn res_block_shape_arithmetic() {
        let mut g = GraphBuilder::new(64, 32, 32);
        let y = g.res_block("r", 0, 128, 2).unwrap();
        assert_eq!(g.shape(y), [128, 16, 16]);
        assert!(g.res_block("bad", 0, 64, 3).is_err());
    }

    #[test]
    fn decode_block_shape_arithmetic() {
        let mut g = GraphBuilder::new(128, 16, 16);
        let y = g.decode_block("d", 0, 64).unwrap();
        assert_eq!(g.shape(y), [64, 32, 32]);
        let mut g = GraphBuilder::new(6, 8, 8);
        assert!(matches!(g.decode_block("d", 0, 4), Err(Error::Build(_))));
    }

    #[test]
    fn config_json_round_trip_uses_numeric_scales() {
        let cfg = NetworkConfig::plain((64, 64)).with_scales(&[ScaleFactor::Half, ScaleFactor::Eighth]);
        let json = serde_json::to_string(&cfg).unwrap();
        assert!(json.contains("[0.5,0.125]"), "{json}");
        let back: NetworkConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, cfg);
        assert!(serde_json::from_str::<NetworkConfig>(r#"{"scale_inputs":[0.3]}"#).is_err());
    }
}
