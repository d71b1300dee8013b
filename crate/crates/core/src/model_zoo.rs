//! The four encoder-decoder architectures as declarative layer plans, and a
//! small graph executor that runs a plan forward and backward.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};
use serde::{Deserialize, Serialize};
use vocseg_nn::{
    init_uniform_fan_in, BatchNorm2d, Buffer, Conv2d, ConvTranspose2d, Layer, MaxPool2d, Mode, Param, Relu, ResNet,
    Tensor,
};

use crate::error::{Result, SegError};
use crate::train_engine::EpochRecord;
use crate::voc_data::INPUT_SIZE;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchId {
    FcnBaseline,
    AdvancedFcn,
    TransferResnet34,
    Unet,
}

impl ArchId {
    pub const ALL: [ArchId; 4] = [ArchId::FcnBaseline, ArchId::AdvancedFcn, ArchId::TransferResnet34, ArchId::Unet];

    pub fn name(self) -> &'static str {
        match self {
            ArchId::FcnBaseline => "fcn_baseline",
            ArchId::AdvancedFcn => "advanced_fcn",
            ArchId::TransferResnet34 => "transfer_resnet34",
            ArchId::Unet => "unet",
        }
    }
}

impl fmt::Display for ArchId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ArchId {
    type Err = SegError;

    fn from_str(s: &str) -> Result<Self> {
        ArchId::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| SegError::config("arch", format!("unknown architecture `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    TransposedConv,
    MaxPool,
    BatchNorm,
    Activation,
    /// Appends the output of `skip_source` to the running tensor along channels.
    ConcatSkip,
    /// Pretrained ResNet34 feature extractor (512 channels, stride 32).
    Backbone,
}

/// One row of an architecture table.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerPlan {
    pub name: String,
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub output_padding: usize,
    pub skip_source: Option<String>,
}

impl LayerPlan {
    fn new(name: &str, kind: LayerKind, in_channels: usize, out_channels: usize) -> Self {
        Self {
            name: name.to_string(),
            kind,
            in_channels,
            out_channels,
            kernel: 1,
            stride: 1,
            padding: 0,
            output_padding: 0,
            skip_source: None,
        }
    }

    pub fn conv(name: &str, in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            kernel,
            stride,
            padding,
            ..Self::new(name, LayerKind::Conv, in_channels, out_channels)
        }
    }

    pub fn deconv(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        output_padding: usize,
    ) -> Self {
        Self {
            kernel,
            stride,
            padding,
            output_padding,
            ..Self::new(name, LayerKind::TransposedConv, in_channels, out_channels)
        }
    }

    pub fn batch_norm(name: &str, channels: usize) -> Self {
        Self::new(name, LayerKind::BatchNorm, channels, channels)
    }

    pub fn relu(name: &str, channels: usize) -> Self {
        Self::new(name, LayerKind::Activation, channels, channels)
    }

    pub fn max_pool(name: &str, channels: usize, kernel: usize, stride: usize) -> Self {
        Self {
            kernel,
            stride,
            ..Self::new(name, LayerKind::MaxPool, channels, channels)
        }
    }

    pub fn concat(name: &str, in_channels: usize, source: &str, source_channels: usize) -> Self {
        Self {
            skip_source: Some(source.to_string()),
            ..Self::new(name, LayerKind::ConcatSkip, in_channels, in_channels + source_channels)
        }
    }

    pub fn backbone(name: &str) -> Self {
        Self {
            stride: ResNet::TOTAL_STRIDE,
            ..Self::new(name, LayerKind::Backbone, 3, ResNet::OUT_CHANNELS)
        }
    }

    fn output_size(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let conv = |n| vocseg_nn::conv_output_len(n, self.kernel, self.stride, self.padding);
        let deconv =
            |n| vocseg_nn::conv_transpose_output_len(n, self.kernel, self.stride, self.padding, self.output_padding);
        match self.kind {
            LayerKind::Conv | LayerKind::MaxPool => Some((conv(h)?, conv(w)?)),
            LayerKind::TransposedConv => Some((deconv(h)?, deconv(w)?)),
            LayerKind::BatchNorm | LayerKind::Activation | LayerKind::ConcatSkip => Some((h, w)),
            LayerKind::Backbone => {
                let s = ResNet::TOTAL_STRIDE;
                (h.is_multiple_of(s) && w.is_multiple_of(s) && h > 0 && w > 0).then_some((h / s, w / s))
            }
        }
    }
}

/// Architecture id plus its ordered layer plan.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub arch: ArchId,
    pub num_classes: usize,
    pub layers: Vec<LayerPlan>,
    /// Name prefix of parameters that belong to the pretrained encoder.
    pub frozen_prefix: Option<String>,
}

/// `(channels, height, width)` after one layer.
pub type FeatureShape = (usize, usize, usize);

impl ModelSpec {
    pub fn for_arch(arch: ArchId, num_classes: usize) -> Self {
        let layers = match arch {
            ArchId::FcnBaseline => fcn_baseline_plan(num_classes),
            ArchId::AdvancedFcn => advanced_fcn_plan(num_classes),
            ArchId::TransferResnet34 => transfer_plan(num_classes),
            ArchId::Unet => unet_plan(num_classes),
        };
        Self {
            arch,
            num_classes,
            layers,
            frozen_prefix: (arch == ArchId::TransferResnet34).then(|| BACKBONE.to_string()),
        }
    }

    pub fn layer(&self, name: &str) -> Option<&LayerPlan> {
        self.layers.iter().find(|l| l.name == name)
    }

    /// Propagates `(3, height, width)` through the plan, checking channel
    /// arithmetic, concat spatial agreement, and that the output is
    /// `num_classes` channels at input resolution.
    pub fn trace(&self, height: usize, width: usize) -> Result<Vec<FeatureShape>> {
        let mut shapes: Vec<FeatureShape> = Vec::with_capacity(self.layers.len());
        let mut by_name: HashMap<&str, FeatureShape> = HashMap::new();
        let mut cur = (3, height, width);
        for layer in &self.layers {
            let fail = |msg: String| SegError::Plan {
                layer: layer.name.clone(),
                msg,
            };
            if by_name.contains_key(layer.name.as_str()) {
                return Err(fail("duplicate layer name".into()));
            }
            if layer.in_channels != cur.0 {
                return Err(fail(format!(
                    "expects {} input channels but receives {}",
                    layer.in_channels, cur.0
                )));
            }
            let (h, w) = layer
                .output_size(cur.1, cur.2)
                .ok_or_else(|| fail(format!("cannot process a {}x{} feature map", cur.1, cur.2)))?;
            if layer.kind == LayerKind::ConcatSkip {
                let source = layer.skip_source.as_deref().unwrap_or_default();
                let src = *by_name
                    .get(source)
                    .ok_or_else(|| fail(format!("skip source `{source}` is not an earlier layer")))?;
                if (src.1, src.2) != (h, w) {
                    return Err(fail(format!(
                        "concatenates {}x{} with {}x{} from {source}",
                        h, w, src.1, src.2
                    )));
                }
                if layer.out_channels != layer.in_channels + src.0 {
                    return Err(fail(format!(
                        "declares {} output channels but {} + {} from {source} arrive",
                        layer.out_channels, layer.in_channels, src.0
                    )));
                }
            } else if matches!(layer.kind, LayerKind::BatchNorm | LayerKind::Activation | LayerKind::MaxPool)
                && layer.out_channels != layer.in_channels
            {
                return Err(fail("channel-preserving layer changes channel count".into()));
            }
            cur = (layer.out_channels, h, w);
            by_name.insert(&layer.name, cur);
            shapes.push(cur);
        }
        if cur != (self.num_classes, height, width) {
            return Err(SegError::Plan {
                layer: self.layers.last().map_or_else(String::new, |l| l.name.clone()),
                msg: format!(
                    "network emits {:?}, expected ({}, {height}, {width})",
                    cur, self.num_classes
                ),
            });
        }
        Ok(shapes)
    }
}

const BACKBONE: &str = "backbone";

/// conv -> BN -> ReLU
fn conv_bn_relu(out: &mut Vec<LayerPlan>, name: &str, cin: usize, cout: usize, stride: usize) {
    out.push(LayerPlan::conv(name, cin, cout, 3, stride, 1));
    out.push(LayerPlan::batch_norm(&format!("{name}.bn"), cout));
    out.push(LayerPlan::relu(&format!("{name}.relu"), cout));
}

/// deconv -> BN -> ReLU; stride-2 stages get output padding 1 to double exactly.
fn deconv_bn_relu(out: &mut Vec<LayerPlan>, name: &str, cin: usize, cout: usize, stride: usize) {
    out.push(LayerPlan::deconv(name, cin, cout, 3, stride, 1, stride - 1));
    out.push(LayerPlan::batch_norm(&format!("{name}.bn"), cout));
    out.push(LayerPlan::relu(&format!("{name}.relu"), cout));
}

fn fcn_baseline_plan(num_classes: usize) -> Vec<LayerPlan> {
    let mut p = Vec::new();
    for (i, (cin, cout)) in [(3, 32), (32, 64), (64, 128), (128, 256), (256, 512)].into_iter().enumerate() {
        conv_bn_relu(&mut p, &format!("conv{}", i + 1), cin, cout, 2);
    }
    for (i, (cin, cout)) in [(512, 512), (512, 256), (256, 128), (128, 64), (64, 32)].into_iter().enumerate() {
        deconv_bn_relu(&mut p, &format!("deconv{}", i + 1), cin, cout, 2);
    }
    p.push(LayerPlan::conv("conv6", 32, num_classes, 1, 1, 0));
    p
}

fn advanced_fcn_plan(num_classes: usize) -> Vec<LayerPlan> {
    let mut p = Vec::new();
    let encoder = [(3, 32, 2), (32, 64, 2), (64, 128, 2), (128, 256, 2), (256, 512, 2), (512, 1024, 1), (1024, 2048, 1)];
    for (i, (cin, cout, stride)) in encoder.into_iter().enumerate() {
        conv_bn_relu(&mut p, &format!("conv{}", i + 1), cin, cout, stride);
    }
    deconv_bn_relu(&mut p, "deconv1", 2048, 2048, 1);
    // deconvN takes the previous deconv output plus conv(8-N).
    let decoder = [(2048, 1024, 1024, 1), (1024, 512, 512, 2), (512, 256, 256, 2), (256, 128, 128, 2), (128, 64, 64, 2), (64, 32, 32, 2)];
    for (i, (prev, skip, cout, stride)) in decoder.into_iter().enumerate() {
        let n = i + 2;
        let source = format!("conv{}.relu", 8 - n);
        p.push(LayerPlan::concat(&format!("deconv{n}.cat"), prev, &source, skip));
        deconv_bn_relu(&mut p, &format!("deconv{n}"), prev + skip, cout, stride);
    }
    p.push(LayerPlan::conv("classifier", 32, num_classes, 1, 1, 0));
    p
}

fn transfer_plan(num_classes: usize) -> Vec<LayerPlan> {
    let mut p = vec![LayerPlan::backbone(BACKBONE)];
    for (i, (cin, cout)) in [(512, 512), (512, 256), (256, 128), (128, 64), (64, 32)].into_iter().enumerate() {
        let name = format!("deconv{}", i + 1);
        p.push(LayerPlan::deconv(&name, cin, cout, 3, 2, 1, 1));
        p.push(LayerPlan::relu(&format!("{name}.relu"), cout));
        p.push(LayerPlan::batch_norm(&format!("{name}.bn"), cout));
    }
    p.push(LayerPlan::conv("classifier", 32, num_classes, 1, 1, 0));
    p
}

/// conv -> ReLU -> BN
fn conv_relu_bn(out: &mut Vec<LayerPlan>, name: &str, cin: usize, cout: usize) {
    out.push(LayerPlan::conv(name, cin, cout, 3, 1, 1));
    out.push(LayerPlan::relu(&format!("{name}.relu"), cout));
    out.push(LayerPlan::batch_norm(&format!("{name}.bn"), cout));
}

fn unet_plan(num_classes: usize) -> Vec<LayerPlan> {
    let mut p = Vec::new();
    let mut cin = 3;
    for (level, cout) in [64, 128, 256, 512].into_iter().enumerate() {
        let first = 2 * level + 1;
        conv_relu_bn(&mut p, &format!("conv{first}"), cin, cout);
        conv_relu_bn(&mut p, &format!("conv{}", first + 1), cout, cout);
        p.push(LayerPlan::max_pool(&format!("pool{}", level + 1), cout, 2, 2));
        cin = cout;
    }
    conv_relu_bn(&mut p, "conv9", 512, 1024);
    conv_relu_bn(&mut p, "conv10", 1024, 1024);
    let mut cin = 1024;
    for (i, cout) in [512, 256, 128, 64].into_iter().enumerate() {
        let name = format!("deconv{}", i + 1);
        p.push(LayerPlan::deconv(&name, cin, cout, 2, 2, 0, 0));
        p.push(LayerPlan::relu(&format!("{name}.relu"), cout));
        p.push(LayerPlan::batch_norm(&format!("{name}.bn"), cout));
        // conv8 -> conv11, conv6 -> conv13, conv4 -> conv15, conv2 -> conv17
        let (skip, first) = (8 - 2 * i, 11 + 2 * i);
        p.push(LayerPlan::concat(&format!("conv{first}.cat"), cout, &format!("conv{skip}.bn"), cout));
        conv_relu_bn(&mut p, &format!("conv{first}"), 2 * cout, cout);
        conv_relu_bn(&mut p, &format!("conv{}", first + 1), cout, cout);
        cin = cout;
    }
    p.push(LayerPlan::conv("output", 64, num_classes, 1, 1, 0));
    p
}

#[derive(Clone, Debug)]
enum Node {
    Conv(Conv2d),
    Deconv(ConvTranspose2d),
    Bn(BatchNorm2d),
    Relu(Relu),
    Pool(MaxPool2d),
    Concat { source: usize, left_channels: usize },
    Backbone(Box<ResNet>),
}

impl Node {
    fn layer(&self) -> Option<&dyn Layer> {
        match self {
            Node::Conv(l) => Some(l),
            Node::Deconv(l) => Some(l),
            Node::Bn(l) => Some(l),
            Node::Relu(l) => Some(l),
            Node::Pool(l) => Some(l),
            Node::Backbone(l) => Some(l.as_ref()),
            Node::Concat { .. } => None,
        }
    }

    fn layer_mut(&mut self) -> Option<&mut dyn Layer> {
        match self {
            Node::Conv(l) => Some(l),
            Node::Deconv(l) => Some(l),
            Node::Bn(l) => Some(l),
            Node::Relu(l) => Some(l),
            Node::Pool(l) => Some(l),
            Node::Backbone(l) => Some(l.as_mut()),
            Node::Concat { .. } => None,
        }
    }
}

/// Named parameter and buffer values, detached from a model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub tensors: BTreeMap<String, (Vec<usize>, Vec<f32>)>,
}

/// An executable [`ModelSpec`].
#[derive(Clone, Debug)]
pub struct Model {
    spec: ModelSpec,
    nodes: Vec<Node>,
    /// Whether a node's output feeds a later concat.
    keep: Vec<bool>,
}

/// Builds the architecture with default (uninitialized) weights; call
/// [`Model::xavier_init`] before training.
pub fn build_model(arch: ArchId, num_classes: usize) -> Result<Model> {
    Model::from_spec(ModelSpec::for_arch(arch, num_classes))
}

impl Model {
    /// Validates the plan at the canonical 224x224 input and instantiates it.
    pub fn from_spec(spec: ModelSpec) -> Result<Self> {
        if spec.frozen_prefix.is_some() != (spec.arch == ArchId::TransferResnet34) {
            return Err(SegError::Invalid("only the transfer architecture has a frozen encoder".into()));
        }
        let shapes = spec.trace(INPUT_SIZE, INPUT_SIZE)?;
        let index: HashMap<&str, usize> = spec.layers.iter().enumerate().map(|(i, l)| (l.name.as_str(), i)).collect();
        let mut keep = vec![false; spec.layers.len()];
        let mut nodes = Vec::with_capacity(spec.layers.len());
        for (i, l) in spec.layers.iter().enumerate() {
            nodes.push(match l.kind {
                LayerKind::Conv => Node::Conv(Conv2d::new(&l.name, l.in_channels, l.out_channels, l.kernel, l.stride, l.padding, true)),
                LayerKind::TransposedConv => Node::Deconv(ConvTranspose2d::new(
                    &l.name,
                    l.in_channels,
                    l.out_channels,
                    l.kernel,
                    l.stride,
                    l.padding,
                    l.output_padding,
                    true,
                )),
                LayerKind::BatchNorm => Node::Bn(BatchNorm2d::new(&l.name, l.out_channels)),
                LayerKind::Activation => Node::Relu(Relu::new()),
                LayerKind::MaxPool => Node::Pool(MaxPool2d::new(l.kernel, l.stride, l.padding)),
                LayerKind::Backbone => Node::Backbone(Box::new(ResNet::resnet34(&l.name))),
                LayerKind::ConcatSkip => {
                    let source = index[l.skip_source.as_deref().expect("traced concat has a source")];
                    keep[source] = true;
                    Node::Concat {
                        source,
                        left_channels: if i == 0 { 3 } else { shapes[i - 1].0 },
                    }
                }
            });
        }
        Ok(Self { spec, nodes, keep })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn arch(&self) -> ArchId {
        self.spec.arch
    }

    fn backbone_frozen(&self) -> bool {
        self.nodes.iter().any(|n| match n {
            Node::Backbone(b) => b.params().iter().all(|p| !p.trainable),
            _ => false,
        })
    }

    /// Images `(B, 3, H, W)` in `[0, 1]` to logits `(B, num_classes, H, W)`.
    /// A frozen backbone always runs with its running statistics.
    pub fn forward(&mut self, images: &Tensor, mode: Mode) -> Result<Tensor> {
        let [b, c, h, w] = images.shape();
        if b == 0 || c != 3 {
            return Err(SegError::Shape(format!("expected (B>=1, 3, H, W) images, got {:?}", images.shape())));
        }
        self.spec.trace(h, w).map_err(|e| SegError::Shape(format!("input {:?}: {e}", images.shape())))?;
        let frozen_backbone = self.backbone_frozen();
        let mut kept: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let mut x = images.clone();
        for (i, node) in self.nodes.iter_mut().enumerate() {
            x = match node {
                Node::Concat { source, .. } => x.concat_channels(kept[*source].as_ref().expect("source precedes concat"))?,
                Node::Backbone(bb) => bb.forward(&x, if frozen_backbone { Mode::Eval } else { mode })?,
                other => other.layer_mut().expect("non-concat node").forward(&x, mode)?,
            };
            if self.keep[i] {
                kept[i] = Some(x.clone());
            }
        }
        Ok(x)
    }

    /// Backpropagates `grad_logits` from the last training forward,
    /// accumulating parameter gradients. Stops at a frozen backbone.
    pub fn backward(&mut self, grad_logits: &Tensor) -> Result<()> {
        let frozen_backbone = self.backbone_frozen();
        let mut pending: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let mut g = grad_logits.clone();
        for i in (0..self.nodes.len()).rev() {
            if let Some(extra) = pending[i].take() {
                g.add_assign(&extra);
            }
            match &mut self.nodes[i] {
                Node::Concat { source, left_channels } => {
                    let (left, right) = g.split_channels(*left_channels);
                    match pending[*source].as_mut() {
                        Some(acc) => acc.add_assign(&right),
                        None => pending[*source] = Some(right),
                    }
                    g = left;
                }
                Node::Backbone(_) if frozen_backbone => break,
                node => g = node.layer_mut().expect("non-concat node").backward(&g)?,
            }
        }
        self.clear_cache();
        Ok(())
    }

    pub fn clear_cache(&mut self) {
        self.nodes.iter_mut().filter_map(Node::layer_mut).for_each(|l| l.clear_cache());
    }

    pub fn params(&self) -> Vec<&Param> {
        self.nodes.iter().filter_map(Node::layer).flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.nodes.iter_mut().filter_map(Node::layer_mut).flat_map(|l| l.params_mut()).collect()
    }

    pub fn buffers(&self) -> Vec<&Buffer> {
        self.nodes.iter().filter_map(Node::layer).flat_map(|l| l.buffers()).collect()
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Buffer> {
        self.nodes.iter_mut().filter_map(Node::layer_mut).flat_map(|l| l.buffers_mut()).collect()
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(Param::zero_grad);
    }

    /// `(total, trainable)` parameter element counts.
    pub fn param_count(&self) -> (usize, usize) {
        self.params().iter().fold((0, 0), |(total, trainable), p| {
            (total + p.len(), trainable + if p.trainable { p.len() } else { 0 })
        })
    }

    /// Kernels ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases ~ N(0, 0.01),
    /// batch-norm scale 1 and shift 0. Frozen parameters are untouched.
    pub fn xavier_init<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        init_uniform_fan_in(self.params_mut(), rng);
    }

    /// Marks every backbone parameter non-trainable.
    pub fn freeze_encoder(&mut self) -> Result<()> {
        let prefix = match &self.spec.frozen_prefix {
            Some(p) => format!("{p}."),
            None => {
                return Err(SegError::Invalid(format!(
                    "{} has no pretrained encoder to freeze",
                    self.spec.arch
                )))
            }
        };
        for p in self.params_mut() {
            if p.name.starts_with(&prefix) {
                p.freeze();
            }
        }
        Ok(())
    }

    pub fn state(&self) -> ModelState {
        let mut tensors = BTreeMap::new();
        for p in self.params() {
            tensors.insert(p.name.clone(), (p.shape.clone(), p.value.clone()));
        }
        for b in self.buffers() {
            tensors.insert(b.name.clone(), (b.shape.clone(), b.value.clone()));
        }
        ModelState { tensors }
    }

    /// Overwrites every parameter and buffer; the state must match exactly.
    pub fn load_state(&mut self, state: &ModelState) -> Result<()> {
        let mut expected = 0;
        let mut assign = |name: &str, shape: &[usize], value: &mut Vec<f32>| -> Result<()> {
            expected += 1;
            let (s, v) = state
                .tensors
                .get(name)
                .ok_or_else(|| SegError::Invalid(format!("state lacks tensor `{name}`")))?;
            if s != shape {
                return Err(SegError::Shape(format!("tensor `{name}`: state has {s:?}, model has {shape:?}")));
            }
            value.copy_from_slice(v);
            Ok(())
        };
        for p in self.params_mut() {
            assign(&p.name, &p.shape, &mut p.value)?;
        }
        for b in self.buffers_mut() {
            assign(&b.name, &b.shape, &mut b.value)?;
        }
        if expected != state.tensors.len() {
            return Err(SegError::Invalid(format!(
                "state has {} tensors, model has {expected}",
                state.tensors.len()
            )));
        }
        Ok(())
    }

    /// Loads ResNet34 weights saved with torchvision names (`layer1.0.conv1.weight`,
    /// optionally prefixed `backbone.`). Classifier entries (`fc.*`) and
    /// `num_batches_tracked` are ignored. Returns the number of tensors loaded.
    pub fn load_backbone_weights(&mut self, path: &Path) -> Result<usize> {
        let prefix = match &self.spec.frozen_prefix {
            Some(p) => format!("{p}."),
            None => return Err(SegError::Invalid(format!("{} has no backbone", self.spec.arch))),
        };
        let bytes = std::fs::read(path).map_err(SegError::io(path))?;
        let file = SafeTensors::deserialize(&bytes).map_err(|e| SegError::Checkpoint {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        let fetch = |name: &str, shape: &[usize]| -> Result<Vec<f32>> {
            let short = &name[prefix.len()..];
            let view = file.tensor(short).or_else(|_| file.tensor(name)).map_err(|_| SegError::Checkpoint {
                path: path.to_path_buf(),
                msg: format!("missing backbone tensor `{short}`"),
            })?;
            read_f32(&view, shape).map_err(|msg| SegError::Checkpoint {
                path: path.to_path_buf(),
                msg: format!("`{short}`: {msg}"),
            })
        };
        let mut loaded = 0;
        for p in self.params_mut().into_iter().filter(|p| p.name.starts_with(&prefix)) {
            p.value = fetch(&p.name, &p.shape)?;
            loaded += 1;
        }
        for b in self.buffers_mut().into_iter().filter(|b| b.name.starts_with(&prefix)) {
            b.value = fetch(&b.name, &b.shape)?;
            loaded += 1;
        }
        Ok(loaded)
    }
}

fn read_f32(view: &TensorView<'_>, shape: &[usize]) -> std::result::Result<Vec<f32>, String> {
    if view.dtype() != Dtype::F32 {
        return Err(format!("dtype {:?}, expected F32", view.dtype()));
    }
    if view.shape() != shape {
        return Err(format!("shape {:?}, expected {shape:?}", view.shape()));
    }
    Ok(view
        .data()
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect())
}

const CHECKPOINT_FORMAT: &str = "vocseg-checkpoint/1";

/// Metadata stored next to the weights.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointMeta {
    pub arch: ArchId,
    pub num_classes: usize,
    pub record: Option<EpochRecord>,
}

/// Writes parameters and buffers as safetensors, with the architecture and
/// epoch record in the header metadata.
pub fn save_checkpoint(path: &Path, arch: ArchId, num_classes: usize, state: &ModelState, record: Option<&EpochRecord>) -> Result<()> {
    let err = |msg: String| SegError::Checkpoint {
        path: path.to_path_buf(),
        msg,
    };
    let bytes: Vec<(String, Vec<usize>, Vec<u8>)> = state
        .tensors
        .iter()
        .map(|(name, (shape, value))| (name.clone(), shape.clone(), value.iter().flat_map(|v| v.to_le_bytes()).collect()))
        .collect();
    let views = bytes
        .iter()
        .map(|(name, shape, data)| Ok((name.as_str(), TensorView::new(Dtype::F32, shape.clone(), data).map_err(|e| err(e.to_string()))?)))
        .collect::<Result<Vec<_>>>()?;
    let mut meta = HashMap::new();
    meta.insert("format".to_string(), CHECKPOINT_FORMAT.to_string());
    meta.insert("arch".to_string(), arch.name().to_string());
    meta.insert("num_classes".to_string(), num_classes.to_string());
    if let Some(record) = record {
        meta.insert("record".to_string(), serde_json::to_string(record).map_err(|e| err(e.to_string()))?);
    }
    safetensors::serialize_to_file(views, Some(meta), path).map_err(|e| err(e.to_string()))
}

/// Rebuilds the model recorded in a checkpoint and loads its weights. A
/// transfer model comes back with its encoder frozen.
pub fn load_checkpoint(path: &Path) -> Result<(Model, CheckpointMeta)> {
    let err = |msg: String| SegError::Checkpoint {
        path: path.to_path_buf(),
        msg,
    };
    let bytes = std::fs::read(path).map_err(SegError::io(path))?;
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| err(e.to_string()))?;
    let meta = header.metadata().clone().unwrap_or_default();
    let field = |key: &str| meta.get(key).ok_or_else(|| err(format!("metadata lacks `{key}`")));
    if field("format")? != CHECKPOINT_FORMAT {
        return Err(err(format!("unsupported format `{}`", field("format")?)));
    }
    let arch: ArchId = field("arch")?.parse().map_err(|e: SegError| err(e.to_string()))?;
    let num_classes: usize = field("num_classes")?.parse().map_err(|_| err("bad num_classes".into()))?;
    let record = match meta.get("record") {
        Some(json) => Some(serde_json::from_str(json).map_err(|e| err(format!("record: {e}")))?),
        None => None,
    };
    let file = SafeTensors::deserialize(&bytes).map_err(|e| err(e.to_string()))?;
    let mut tensors = BTreeMap::new();
    for (name, view) in file.tensors() {
        let shape = view.shape().to_vec();
        let value = read_f32(&view, &shape).map_err(|m| err(format!("`{name}`: {m}")))?;
        tensors.insert(name, (shape, value));
    }
    let mut model = build_model(arch, num_classes)?;
    model.load_state(&ModelState { tensors }).map_err(|e| err(e.to_string()))?;
    if arch == ArchId::TransferResnet34 {
        model.freeze_encoder()?;
    }
    Ok((
        model,
        CheckpointMeta {
            arch,
            num_classes,
            record,
        },
    ))
}
