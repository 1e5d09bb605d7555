//! CIFAR-style residual networks (depth `6n + 2`, three stages of `n`
//! basic blocks at widths `w, 2w, 4w`), split into a stem and a tower.

use ndarray::{s, Array2, Array4, Axis};
use rand::Rng;

use super::{
    join, relu_backward, relu_forward, BatchNorm2d, Conv2d, Inspector, Layer, Mode, Visitor,
};

pub const STAGES: usize = 3;

/// Blocks per stage for a supported depth, `None` unless `depth = 6n + 2`, `n >= 1`.
pub fn blocks_per_stage(depth: usize) -> Option<usize> {
    if depth >= 8 && (depth - 2).is_multiple_of(6) {
        Some((depth - 2) / 6)
    } else {
        None
    }
}

pub fn stage_width(base_width: usize, stage: usize) -> usize {
    base_width << stage
}

fn stage_stride(stage: usize) -> usize {
    if stage == 0 {
        1
    } else {
        2
    }
}

/// Parameter-free shortcut: spatial subsampling plus zero channel padding.
#[derive(Debug, Clone)]
struct Shortcut {
    in_channels: usize,
    stride: usize,
    input_hw: (usize, usize),
}

impl Shortcut {
    fn forward(&mut self, x: &Array4<f64>, out_channels: usize) -> Array4<f64> {
        let (n, c, h, w) = x.dim();
        self.input_hw = (h, w);
        if self.stride == 1 && c == out_channels {
            return x.clone();
        }
        let sub = x.slice(s![.., .., ..;self.stride, ..;self.stride]);
        let (_, _, ho, wo) = sub.dim();
        let mut out = Array4::zeros((n, out_channels, ho, wo));
        out.slice_mut(s![.., ..c, .., ..]).assign(&sub);
        out
    }

    fn backward(&self, dy: &Array4<f64>) -> Array4<f64> {
        let (n, out_channels, _, _) = dy.dim();
        if self.stride == 1 && self.in_channels == out_channels {
            return dy.clone();
        }
        let (h, w) = self.input_hw;
        let mut dx = Array4::zeros((n, self.in_channels, h, w));
        dx.slice_mut(s![.., .., ..;self.stride, ..;self.stride])
            .assign(&dy.slice(s![.., ..self.in_channels, .., ..]));
        dx
    }
}

#[derive(Debug, Clone)]
pub struct BasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    shortcut: Shortcut,
    out_channels: usize,
    hidden: Option<Array4<f64>>,
    output: Option<Array4<f64>>,
}

impl BasicBlock {
    pub fn new<R: Rng>(
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        rng: &mut R,
    ) -> BasicBlock {
        BasicBlock {
            conv1: Conv2d::new(in_channels, out_channels, 3, stride, 1, rng),
            bn1: BatchNorm2d::new(out_channels),
            conv2: Conv2d::new(out_channels, out_channels, 3, 1, 1, rng),
            bn2: BatchNorm2d::new(out_channels),
            shortcut: Shortcut {
                in_channels,
                stride,
                input_hw: (0, 0),
            },
            out_channels,
            hidden: None,
            output: None,
        }
    }

    pub fn forward(&mut self, x: &Array4<f64>, mode: Mode) -> Array4<f64> {
        let mut h = self.bn1.forward(&self.conv1.forward(x, mode), mode);
        relu_forward(&mut h);
        let mut y = self.bn2.forward(&self.conv2.forward(&h, mode), mode);
        y += &self.shortcut.forward(x, self.out_channels);
        relu_forward(&mut y);
        if mode == Mode::Train {
            self.hidden = Some(h);
            self.output = Some(y.clone());
        }
        y
    }

    pub fn backward(&mut self, dy: &Array4<f64>) -> Array4<f64> {
        let out = self
            .output
            .take()
            .expect("block backward without a training forward");
        let hidden = self
            .hidden
            .take()
            .expect("block backward without a training forward");
        let mut d = dy.clone();
        relu_backward(&mut d, &out);
        let mut dh = self.conv2.backward(&self.bn2.backward(&d));
        relu_backward(&mut dh, &hidden);
        let mut dx = self.conv1.backward(&self.bn1.backward(&dh));
        dx += &self.shortcut.backward(&d);
        dx
    }
}

impl Layer for BasicBlock {
    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor) {
        self.conv1.visit(&join(prefix, "conv1"), v);
        self.bn1.visit(&join(prefix, "bn1"), v);
        self.conv2.visit(&join(prefix, "conv2"), v);
        self.bn2.visit(&join(prefix, "bn2"), v);
    }

    fn inspect(&self, prefix: &str, v: &mut dyn Inspector) {
        self.conv1.inspect(&join(prefix, "conv1"), v);
        self.bn1.inspect(&join(prefix, "bn1"), v);
        self.conv2.inspect(&join(prefix, "conv2"), v);
        self.bn2.inspect(&join(prefix, "bn2"), v);
    }
}

#[derive(Debug, Clone)]
struct Stage {
    index: usize,
    blocks: Vec<BasicBlock>,
}

impl Stage {
    fn new<R: Rng>(index: usize, base_width: usize, blocks: usize, rng: &mut R) -> Stage {
        let out = stage_width(base_width, index);
        let input = if index == 0 {
            base_width
        } else {
            stage_width(base_width, index - 1)
        };
        let blocks = (0..blocks)
            .map(|b| {
                if b == 0 {
                    BasicBlock::new(input, out, stage_stride(index), rng)
                } else {
                    BasicBlock::new(out, out, 1, rng)
                }
            })
            .collect();
        Stage { index, blocks }
    }

    fn forward(&mut self, x: &Array4<f64>, mode: Mode) -> Array4<f64> {
        let mut h = x.clone();
        for block in &mut self.blocks {
            h = block.forward(&h, mode);
        }
        h
    }

    fn backward(&mut self, dy: &Array4<f64>) -> Array4<f64> {
        let mut d = dy.clone();
        for block in self.blocks.iter_mut().rev() {
            d = block.backward(&d);
        }
        d
    }

    fn prefix(&self, prefix: &str, block: usize) -> String {
        join(prefix, &format!("stage{}.block{block}", self.index + 1))
    }
}

/// Input convolution plus the first `split` stages. Its output is the
/// low-level feature map that the branch masks act on.
#[derive(Debug, Clone)]
pub struct ResNetStem {
    conv: Conv2d,
    bn: BatchNorm2d,
    stages: Vec<Stage>,
    activation: Option<Array4<f64>>,
}

impl ResNetStem {
    pub fn new<R: Rng>(
        in_channels: usize,
        base_width: usize,
        blocks: usize,
        split: usize,
        rng: &mut R,
    ) -> ResNetStem {
        let conv = Conv2d::new(in_channels, base_width, 3, 1, 1, rng);
        let stages = (0..split)
            .map(|i| Stage::new(i, base_width, blocks, rng))
            .collect();
        ResNetStem {
            conv,
            bn: BatchNorm2d::new(base_width),
            stages,
            activation: None,
        }
    }

    pub fn forward(&mut self, x: &Array4<f64>, mode: Mode) -> Array4<f64> {
        let mut h = self.bn.forward(&self.conv.forward(x, mode), mode);
        relu_forward(&mut h);
        if mode == Mode::Train {
            self.activation = Some(h.clone());
        }
        for stage in &mut self.stages {
            h = stage.forward(&h, mode);
        }
        h
    }

    pub fn backward(&mut self, dy: &Array4<f64>) -> Array4<f64> {
        let mut d = dy.clone();
        for stage in self.stages.iter_mut().rev() {
            d = stage.backward(&d);
        }
        let act = self
            .activation
            .take()
            .expect("stem backward without a training forward");
        relu_backward(&mut d, &act);
        self.conv.backward(&self.bn.backward(&d))
    }
}

impl Layer for ResNetStem {
    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor) {
        self.conv.visit(&join(prefix, "conv"), v);
        self.bn.visit(&join(prefix, "bn"), v);
        for stage in &mut self.stages {
            for b in 0..stage.blocks.len() {
                let p = stage.prefix(prefix, b);
                stage.blocks[b].visit(&p, v);
            }
        }
    }

    fn inspect(&self, prefix: &str, v: &mut dyn Inspector) {
        self.conv.inspect(&join(prefix, "conv"), v);
        self.bn.inspect(&join(prefix, "bn"), v);
        for stage in &self.stages {
            for (b, block) in stage.blocks.iter().enumerate() {
                block.inspect(&stage.prefix(prefix, b), v);
            }
        }
    }
}

/// Stages `split..3` followed by global average pooling.
#[derive(Debug, Clone)]
pub struct ResNetTower {
    stages: Vec<Stage>,
    pooled_hw: Option<(usize, usize)>,
}

impl ResNetTower {
    pub fn new<R: Rng>(base_width: usize, blocks: usize, split: usize, rng: &mut R) -> ResNetTower {
        let stages = (split..STAGES)
            .map(|i| Stage::new(i, base_width, blocks, rng))
            .collect();
        ResNetTower {
            stages,
            pooled_hw: None,
        }
    }

    pub fn out_features(base_width: usize) -> usize {
        stage_width(base_width, STAGES - 1)
    }

    /// Returns pooled `[batch x channels]` features.
    pub fn forward(&mut self, x: &Array4<f64>, mode: Mode) -> Array2<f64> {
        let mut h = x.clone();
        for stage in &mut self.stages {
            h = stage.forward(&h, mode);
        }
        let (_, _, hh, ww) = h.dim();
        if mode == Mode::Train {
            self.pooled_hw = Some((hh, ww));
        }
        h.mean_axis(Axis(3))
            .and_then(|a| a.mean_axis(Axis(2)))
            .expect("non-empty spatial dims")
    }

    pub fn backward(&mut self, d_features: &Array2<f64>) -> Array4<f64> {
        let (h, w) = self
            .pooled_hw
            .take()
            .expect("tower backward without a training forward");
        let (n, c) = d_features.dim();
        let scale = 1.0 / (h * w) as f64;
        let mut d =
            Array4::from_shape_fn((n, c, h, w), |(b, ch, _, _)| d_features[[b, ch]] * scale);
        for stage in self.stages.iter_mut().rev() {
            d = stage.backward(&d);
        }
        d
    }
}

impl Layer for ResNetTower {
    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor) {
        for stage in &mut self.stages {
            for b in 0..stage.blocks.len() {
                let p = stage.prefix(prefix, b);
                stage.blocks[b].visit(&p, v);
            }
        }
    }

    fn inspect(&self, prefix: &str, v: &mut dyn Inspector) {
        for stage in &self.stages {
            for (b, block) in stage.blocks.iter().enumerate() {
                block.inspect(&stage.prefix(prefix, b), v);
            }
        }
    }
}
