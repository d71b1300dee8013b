//! ResNet feature extractor (basic-block variant) without pooling head or
//! classifier. Parameter names follow the torchvision state-dict layout under
//! a caller-chosen prefix, e.g. `backbone.layer2.0.downsample.1.running_var`.

use crate::activation::Relu;
use crate::conv::Conv2d;
use crate::error::{NnError, Result};
use crate::layer::{Layer, Mode};
use crate::norm::BatchNorm2d;
use crate::param::{Buffer, Param};
use crate::pool::MaxPool2d;
use crate::tensor::Tensor;

/// Published ImageNet channel statistics the pretrained weights expect.
pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

pub const RESNET34_BLOCKS: [usize; 4] = [3, 4, 6, 3];
const STAGE_CHANNELS: [usize; 4] = [64, 128, 256, 512];

#[derive(Clone, Debug)]
pub struct BasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    relu1: Relu,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    downsample: Option<(Conv2d, BatchNorm2d)>,
    relu_out: Relu,
}

impl BasicBlock {
    fn new(prefix: &str, in_channels: usize, out_channels: usize, stride: usize) -> Self {
        let downsample = (stride != 1 || in_channels != out_channels).then(|| {
            (
                Conv2d::new(&format!("{prefix}.downsample.0"), in_channels, out_channels, 1, stride, 0, false),
                BatchNorm2d::new(&format!("{prefix}.downsample.1"), out_channels),
            )
        });
        Self {
            conv1: Conv2d::new(&format!("{prefix}.conv1"), in_channels, out_channels, 3, stride, 1, false),
            bn1: BatchNorm2d::new(&format!("{prefix}.bn1"), out_channels),
            relu1: Relu::new(),
            conv2: Conv2d::new(&format!("{prefix}.conv2"), out_channels, out_channels, 3, 1, 1, false),
            bn2: BatchNorm2d::new(&format!("{prefix}.bn2"), out_channels),
            downsample,
            relu_out: Relu::new(),
        }
    }

    fn layers(&self) -> Vec<&dyn Layer> {
        let mut layers: Vec<&dyn Layer> = vec![&self.conv1, &self.bn1, &self.conv2, &self.bn2];
        if let Some((conv, bn)) = &self.downsample {
            layers.push(conv);
            layers.push(bn);
        }
        layers
    }

    fn layers_mut(&mut self) -> Vec<&mut dyn Layer> {
        let mut layers: Vec<&mut dyn Layer> = vec![
            &mut self.conv1,
            &mut self.bn1,
            &mut self.relu1,
            &mut self.conv2,
            &mut self.bn2,
            &mut self.relu_out,
        ];
        if let Some((conv, bn)) = &mut self.downsample {
            layers.push(conv);
            layers.push(bn);
        }
        layers
    }
}

impl Layer for BasicBlock {
    fn forward(&mut self, input: &Tensor, mode: Mode) -> Result<Tensor> {
        let x = self.conv1.forward(input, mode)?;
        let x = self.bn1.forward(&x, mode)?;
        let x = self.relu1.forward(&x, mode)?;
        let x = self.conv2.forward(&x, mode)?;
        let mut x = self.bn2.forward(&x, mode)?;
        match &mut self.downsample {
            Some((conv, bn)) => {
                let shortcut = conv.forward(input, mode)?;
                x.add_assign(&bn.forward(&shortcut, mode)?);
            }
            None => x.add_assign(input),
        }
        self.relu_out.forward(&x, mode)
    }

    fn backward(&mut self, grad_output: &Tensor) -> Result<Tensor> {
        let g = self.relu_out.backward(grad_output)?;
        let shortcut = match &mut self.downsample {
            Some((conv, bn)) => conv.backward(&bn.backward(&g)?)?,
            None => g.clone(),
        };
        let g = self.bn2.backward(&g)?;
        let g = self.conv2.backward(&g)?;
        let g = self.relu1.backward(&g)?;
        let g = self.bn1.backward(&g)?;
        let mut g = self.conv1.backward(&g)?;
        g.add_assign(&shortcut);
        Ok(g)
    }

    fn params(&self) -> Vec<&Param> {
        self.layers().into_iter().flat_map(|l| l.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers_mut().into_iter().flat_map(|l| l.params_mut()).collect()
    }

    fn buffers(&self) -> Vec<&Buffer> {
        self.layers().into_iter().flat_map(|l| l.buffers()).collect()
    }

    fn buffers_mut(&mut self) -> Vec<&mut Buffer> {
        self.layers_mut().into_iter().flat_map(|l| l.buffers_mut()).collect()
    }

    fn clear_cache(&mut self) {
        self.layers_mut().into_iter().for_each(|l| l.clear_cache());
    }
}

/// Stem + four residual stages; output has 512 channels at 1/32 resolution.
///
/// Inputs are images in `[0, 1]`; the ImageNet standardization is applied
/// internally.
#[derive(Clone, Debug)]
pub struct ResNet {
    pub prefix: String,
    conv1: Conv2d,
    bn1: BatchNorm2d,
    relu: Relu,
    maxpool: MaxPool2d,
    blocks: Vec<BasicBlock>,
}

impl ResNet {
    pub fn resnet34(prefix: &str) -> Self {
        Self::with_blocks(prefix, RESNET34_BLOCKS)
    }

    /// Basic-block ResNet with `blocks[i]` blocks in stage `i`.
    pub fn with_blocks(prefix: &str, blocks: [usize; 4]) -> Self {
        let mut stages = Vec::new();
        let mut in_channels = 64;
        for (stage, (&count, &channels)) in blocks.iter().zip(&STAGE_CHANNELS).enumerate() {
            for i in 0..count {
                let stride = if stage > 0 && i == 0 { 2 } else { 1 };
                let name = format!("{prefix}.layer{}.{i}", stage + 1);
                stages.push(BasicBlock::new(&name, in_channels, channels, stride));
                in_channels = channels;
            }
        }
        Self {
            prefix: prefix.to_string(),
            conv1: Conv2d::new(&format!("{prefix}.conv1"), 3, 64, 7, 2, 3, false),
            bn1: BatchNorm2d::new(&format!("{prefix}.bn1"), 64),
            relu: Relu::new(),
            maxpool: MaxPool2d::new(3, 2, 1),
            blocks: stages,
        }
    }

    pub const OUT_CHANNELS: usize = 512;
    pub const TOTAL_STRIDE: usize = 32;

    fn standardize(input: &Tensor) -> Result<Tensor> {
        if input.channels() != 3 {
            return Err(NnError::Shape {
                layer: "resnet".into(),
                expected: "(N, 3, H, W)".into(),
                got: input.shape(),
            });
        }
        let plane = input.height() * input.width();
        let mut out = input.clone();
        for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
            let (m, s) = (IMAGENET_MEAN[i % 3], IMAGENET_STD[i % 3]);
            chunk.iter_mut().for_each(|v| *v = (*v - m) / s);
        }
        Ok(out)
    }
}

impl Layer for ResNet {
    fn forward(&mut self, input: &Tensor, mode: Mode) -> Result<Tensor> {
        let x = Self::standardize(input)?;
        let x = self.conv1.forward(&x, mode)?;
        let x = self.bn1.forward(&x, mode)?;
        let x = self.relu.forward(&x, mode)?;
        let mut x = self.maxpool.forward(&x, mode)?;
        for block in &mut self.blocks {
            x = block.forward(&x, mode)?;
        }
        Ok(x)
    }

    fn backward(&mut self, grad_output: &Tensor) -> Result<Tensor> {
        let mut g = grad_output.clone();
        for block in self.blocks.iter_mut().rev() {
            g = block.backward(&g)?;
        }
        let g = self.maxpool.backward(&g)?;
        let g = self.relu.backward(&g)?;
        let g = self.bn1.backward(&g)?;
        let mut g = self.conv1.backward(&g)?;
        let plane = g.height() * g.width();
        for (i, chunk) in g.data_mut().chunks_mut(plane).enumerate() {
            let s = IMAGENET_STD[i % 3];
            chunk.iter_mut().for_each(|v| *v /= s);
        }
        Ok(g)
    }

    fn params(&self) -> Vec<&Param> {
        let mut out = self.conv1.params();
        out.extend(self.bn1.params());
        out.extend(self.blocks.iter().flat_map(|b| b.params()));
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = self.conv1.params_mut();
        out.extend(self.bn1.params_mut());
        out.extend(self.blocks.iter_mut().flat_map(|b| b.params_mut()));
        out
    }

    fn buffers(&self) -> Vec<&Buffer> {
        let mut out = self.bn1.buffers();
        out.extend(self.blocks.iter().flat_map(|b| b.buffers()));
        out
    }

    fn buffers_mut(&mut self) -> Vec<&mut Buffer> {
        let mut out = self.bn1.buffers_mut();
        out.extend(self.blocks.iter_mut().flat_map(|b| b.buffers_mut()));
        out
    }

    fn clear_cache(&mut self) {
        self.conv1.clear_cache();
        self.bn1.clear_cache();
        self.relu.clear_cache();
        self.maxpool.clear_cache();
        self.blocks.iter_mut().for_each(|b| b.clear_cache());
    }
}
