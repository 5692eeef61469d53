//! ResNet-18 with the standard 7x7 stem, no classification head. The base
//! width is configurable so tests can train a narrow variant; at width 64
//! with 3 input channels the trainable parameter count is 11,176,512.

use super::conv::ConvSpec;
use super::graph::{Graph, NodeId};
use super::layers::{global_avg_pool, BatchNorm2d, Conv2dLayer};
use super::params::ParamStore;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

#[derive(Debug, Clone, Copy)]
pub struct ResNetConfig {
    pub in_channels: usize,
    pub base_width: usize,
}

impl Default for ResNetConfig {
    fn default() -> Self {
        Self { in_channels: 3, base_width: 64 }
    }
}

struct BasicBlock {
    conv1: Conv2dLayer,
    bn1: BatchNorm2d,
    conv2: Conv2dLayer,
    bn2: BatchNorm2d,
    down: Option<(Conv2dLayer, BatchNorm2d)>,
}

impl BasicBlock {
    fn new(
        ps: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        stride: usize,
    ) -> Self {
        let conv1 = Conv2dLayer::new(
            ps,
            rng,
            &format!("{name}.conv1"),
            in_ch,
            out_ch,
            3,
            ConvSpec { stride, pad: 1 },
            false,
        );
        let bn1 = BatchNorm2d::new(ps, &format!("{name}.bn1"), out_ch);
        let conv2 = Conv2dLayer::new(
            ps,
            rng,
            &format!("{name}.conv2"),
            out_ch,
            out_ch,
            3,
            ConvSpec { stride: 1, pad: 1 },
            false,
        );
        let bn2 = BatchNorm2d::new(ps, &format!("{name}.bn2"), out_ch);
        let down = (stride != 1 || in_ch != out_ch).then(|| {
            (
                Conv2dLayer::new(
                    ps,
                    rng,
                    &format!("{name}.down"),
                    in_ch,
                    out_ch,
                    1,
                    ConvSpec { stride, pad: 0 },
                    false,
                ),
                BatchNorm2d::new(ps, &format!("{name}.down_bn"), out_ch),
            )
        });
        Self { conv1, bn1, conv2, bn2, down }
    }

    fn forward(&self, g: &mut Graph, ps: &mut ParamStore, x: NodeId, train: bool) -> NodeId {
        let mut y = self.conv1.forward(g, ps, x);
        y = self.bn1.forward(g, ps, y, train);
        y = g.relu(y);
        y = self.conv2.forward(g, ps, y);
        y = self.bn2.forward(g, ps, y, train);
        let shortcut = match &self.down {
            Some((conv, bn)) => {
                let s = conv.forward(g, ps, x);
                bn.forward(g, ps, s, train)
            }
            None => x,
        };
        let sum = g.add(y, shortcut);
        g.relu(sum)
    }
}

pub struct ResNet18 {
    stem: Conv2dLayer,
    stem_bn: BatchNorm2d,
    blocks: Vec<BasicBlock>,
    config: ResNetConfig,
}

impl ResNet18 {
    pub fn new(ps: &mut ParamStore, seed: u64, config: ResNetConfig) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let w = config.base_width;
        let stem = Conv2dLayer::new(
            ps,
            &mut rng,
            "resnet.stem",
            config.in_channels,
            w,
            7,
            ConvSpec { stride: 2, pad: 3 },
            false,
        );
        let stem_bn = BatchNorm2d::new(ps, "resnet.stem_bn", w);
        let mut blocks = Vec::new();
        let stage_channels = [w, 2 * w, 4 * w, 8 * w];
        let mut in_ch = w;
        for (si, &out_ch) in stage_channels.iter().enumerate() {
            for bi in 0..2 {
                let stride = if si > 0 && bi == 0 { 2 } else { 1 };
                blocks.push(BasicBlock::new(
                    ps,
                    &mut rng,
                    &format!("resnet.layer{}.{}", si + 1, bi),
                    in_ch,
                    out_ch,
                    stride,
                ));
                in_ch = out_ch;
            }
        }
        Self { stem, stem_bn, blocks, config }
    }

    /// Pooled embedding dimension (8x base width).
    pub fn embed_dim(&self) -> usize {
        8 * self.config.base_width
    }

    pub fn config(&self) -> ResNetConfig {
        self.config
    }

    /// (N, C, H, W) -> (N, embed_dim).
    pub fn forward(&self, g: &mut Graph, ps: &mut ParamStore, x: NodeId, train: bool) -> NodeId {
        assert_eq!(
            g.value(x).shape()[1],
            self.config.in_channels,
            "input channel mismatch"
        );
        let mut y = self.stem.forward(g, ps, x);
        y = self.stem_bn.forward(g, ps, y, train);
        y = g.relu(y);
        y = g.maxpool2d(y, 3, 2, 1);
        for b in &self.blocks {
            y = b.forward(g, ps, y, train);
        }
        global_avg_pool(g, y)
    }
}
