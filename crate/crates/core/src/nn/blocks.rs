use alloc::vec;
use alloc::vec::Vec;

use rand_core::RngCore;
use serde::{Deserialize, Serialize};

use super::layers::{dims4, BatchNorm, BnTape, Conv2d, ConvTape, GlobalAvgPool, Linear, LinearTape, Relu};
use super::{LayerSpec, Mode, Module, Param};
use crate::tensor::Tensor;

/// Basic residual block: `relu(bn(conv(relu(bn(conv(x))))) + shortcut(x))`,
/// with a 1×1 projection shortcut whenever stride or width changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResBlock {
    pub conv1: Conv2d,
    pub bn1: BatchNorm,
    pub conv2: Conv2d,
    pub bn2: BatchNorm,
    pub shortcut: Option<(Conv2d, BatchNorm)>,
}

#[derive(Debug, Clone)]
pub struct ResBlockTape {
    c1: ConvTape,
    b1: BnTape,
    a1: Tensor,
    c2: ConvTape,
    b2: BnTape,
    short: Option<(ConvTape, BnTape)>,
    out: Tensor,
}

impl ResBlock {
    pub fn new<R: RngCore>(in_ch: usize, out_ch: usize, stride: usize, rng: &mut R) -> Self {
        let shortcut = (stride != 1 || in_ch != out_ch)
            .then(|| (Conv2d::new(in_ch, out_ch, 1, stride, 0, rng), BatchNorm::new(out_ch)));
        Self {
            conv1: Conv2d::new(in_ch, out_ch, 3, stride, 1, rng),
            bn1: BatchNorm::new(out_ch),
            conv2: Conv2d::new(out_ch, out_ch, 3, 1, 1, rng),
            bn2: BatchNorm::new(out_ch),
            shortcut,
        }
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Tensor {
        let h = Relu::forward(self.bn1.forward(&self.conv1.forward(x), mode));
        let mut h = self.bn2.forward(&self.conv2.forward(&h), mode);
        match &mut self.shortcut {
            Some((conv, bn)) => h.add_assign(&bn.forward(&conv.forward(x), mode)),
            None => h.add_assign(x),
        }
        Relu::forward(h)
    }

    pub fn forward_taped(&mut self, x: &Tensor) -> (Tensor, ResBlockTape) {
        let (h, c1) = self.conv1.forward_taped(x);
        let (h, b1) = self.bn1.forward_taped(&h);
        let a1 = Relu::forward(h);
        let (h, c2) = self.conv2.forward_taped(&a1);
        let (mut h, b2) = self.bn2.forward_taped(&h);
        let short = match &mut self.shortcut {
            Some((conv, bn)) => {
                let (s, ct) = conv.forward_taped(x);
                let (s, bt) = bn.forward_taped(&s);
                h.add_assign(&s);
                Some((ct, bt))
            }
            None => {
                h.add_assign(x);
                None
            }
        };
        let out = Relu::forward(h);
        let tape = ResBlockTape {
            c1,
            b1,
            a1,
            c2,
            b2,
            short,
            out: out.clone(),
        };
        (out, tape)
    }

    pub fn backward(&mut self, tape: &ResBlockTape, gout: Tensor) -> Tensor {
        let g = Relu::backward(&tape.out, gout);
        let mut gin = match (&mut self.shortcut, &tape.short) {
            (Some((conv, bn)), Some((ct, bt))) => {
                let gs = bn.backward(bt, &g);
                conv.backward(ct, &gs)
            }
            _ => g.clone(),
        };
        let gm = self.bn2.backward(&tape.b2, &g);
        let gm = self.conv2.backward(&tape.c2, &gm);
        let gm = Relu::backward(&tape.a1, gm);
        let gm = self.bn1.backward(&tape.b1, &gm);
        gin.add_assign(&self.conv1.backward(&tape.c1, &gm));
        gin
    }

    fn specs(&self, h: usize, w: usize, out: &mut Vec<LayerSpec>) -> (usize, usize) {
        out.push(self.conv1.spec(h, w));
        let (oh, ow) = self.conv1.out_hw(h, w);
        let feats = self.conv1.out_ch * oh * ow;
        out.push(LayerSpec::BatchNorm { features: feats });
        out.push(LayerSpec::Relu { features: feats });
        out.push(self.conv2.spec(oh, ow));
        out.push(LayerSpec::BatchNorm { features: feats });
        if let Some((conv, _)) = &self.shortcut {
            out.push(conv.spec(h, w));
            out.push(LayerSpec::BatchNorm { features: feats });
        }
        out.push(LayerSpec::Add { features: feats });
        out.push(LayerSpec::Relu { features: feats });
        (oh, ow)
    }
}

impl Module for ResBlock {
    fn params(&self) -> Vec<&Param> {
        let mut p = self.conv1.params();
        p.extend(self.bn1.params());
        p.extend(self.conv2.params());
        p.extend(self.bn2.params());
        if let Some((c, b)) = &self.shortcut {
            p.extend(c.params());
            p.extend(b.params());
        }
        p
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.conv1.params_mut();
        p.extend(self.bn1.params_mut());
        p.extend(self.conv2.params_mut());
        p.extend(self.bn2.params_mut());
        if let Some((c, b)) = &mut self.shortcut {
            p.extend(c.params_mut());
            p.extend(b.params_mut());
        }
        p
    }
    fn buffers(&self) -> Vec<&[f64]> {
        let mut b = self.bn1.buffers();
        b.extend(self.bn2.buffers());
        if let Some((_, bn)) = &self.shortcut {
            b.extend(bn.buffers());
        }
        b
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub width: usize,
    pub stride: usize,
}

/// Residual CNN layout: a 3×3 stem followed by one residual block per stage
/// and global average pooling.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub in_channels: usize,
    pub stem_width: usize,
    pub stages: Vec<StageSpec>,
}

impl EncoderSpec {
    pub fn output_dim(&self) -> usize {
        self.stages.last().map_or(self.stem_width, |s| s.width)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub spec: EncoderSpec,
    pub stem: Conv2d,
    pub stem_bn: BatchNorm,
    pub blocks: Vec<ResBlock>,
}

#[derive(Debug, Clone)]
pub struct EncoderTape {
    stem: ConvTape,
    stem_bn: BnTape,
    stem_out: Tensor,
    blocks: Vec<ResBlockTape>,
    pool_in_shape: Vec<usize>,
}

impl Encoder {
    pub fn new<R: RngCore>(spec: &EncoderSpec, rng: &mut R) -> Self {
        let stem = Conv2d::new(spec.in_channels, spec.stem_width, 3, 1, 1, rng);
        let mut blocks = Vec::with_capacity(spec.stages.len());
        let mut width = spec.stem_width;
        for st in &spec.stages {
            blocks.push(ResBlock::new(width, st.width, st.stride, rng));
            width = st.width;
        }
        Self {
            spec: spec.clone(),
            stem,
            stem_bn: BatchNorm::new(spec.stem_width),
            blocks,
        }
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim()
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Tensor {
        let mut h = Relu::forward(self.stem_bn.forward(&self.stem.forward(x), mode));
        for b in &mut self.blocks {
            h = b.forward(&h, mode);
        }
        GlobalAvgPool::forward(&h)
    }

    pub fn forward_taped(&mut self, x: &Tensor) -> (Tensor, EncoderTape) {
        let (h, stem) = self.stem.forward_taped(x);
        let (h, stem_bn) = self.stem_bn.forward_taped(&h);
        let stem_out = Relu::forward(h);
        let mut h = stem_out.clone();
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &mut self.blocks {
            let (o, t) = b.forward_taped(&h);
            blocks.push(t);
            h = o;
        }
        let pool_in_shape = h.shape().to_vec();
        let y = GlobalAvgPool::forward(&h);
        let tape = EncoderTape {
            stem,
            stem_bn,
            stem_out,
            blocks,
            pool_in_shape,
        };
        (y, tape)
    }

    pub fn backward(&mut self, tape: &EncoderTape, gout: &Tensor) -> Tensor {
        let mut g = GlobalAvgPool::backward(gout, &tape.pool_in_shape);
        for (b, t) in self.blocks.iter_mut().zip(&tape.blocks).rev() {
            g = b.backward(t, g);
        }
        let g = Relu::backward(&tape.stem_out, g);
        let g = self.stem_bn.backward(&tape.stem_bn, &g);
        self.stem.backward(&tape.stem, &g)
    }

    /// Layer-wise cost description for a `[C, H, W]` input.
    pub fn layer_specs(&self, h: usize, w: usize) -> Vec<LayerSpec> {
        let mut out = vec![self.stem.spec(h, w)];
        let (mut h, mut w) = self.stem.out_hw(h, w);
        let feats = self.stem.out_ch * h * w;
        out.push(LayerSpec::BatchNorm { features: feats });
        out.push(LayerSpec::Relu { features: feats });
        for b in &self.blocks {
            (h, w) = b.specs(h, w, &mut out);
        }
        out.push(LayerSpec::GlobalAvgPool {
            channels: self.output_dim(),
            h,
            w,
        });
        out
    }

    pub fn check_input(&self, x: &Tensor) -> crate::Result<()> {
        let s = x.shape();
        if s.len() != 4 || s[1] != self.spec.in_channels || s[2] == 0 || s[3] == 0 {
            return Err(crate::Error::Model(alloc::format!(
                "encoder expects [B, {}, H, W] input, got {s:?}",
                self.spec.in_channels
            )));
        }
        let _ = dims4(x);
        Ok(())
    }
}

impl Module for Encoder {
    fn params(&self) -> Vec<&Param> {
        let mut p = self.stem.params();
        p.extend(self.stem_bn.params());
        for b in &self.blocks {
            p.extend(b.params());
        }
        p
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.stem.params_mut();
        p.extend(self.stem_bn.params_mut());
        for b in &mut self.blocks {
            p.extend(b.params_mut());
        }
        p
    }
    fn buffers(&self) -> Vec<&[f64]> {
        let mut out = self.stem_bn.buffers();
        for b in &self.blocks {
            out.extend(b.buffers());
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub d_in: usize,
    pub hidden: usize,
    pub d_out: usize,
}

/// FC → BN → ReLU → FC, used for both projectors and predictors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub fc1: Linear,
    pub bn: BatchNorm,
    pub fc2: Linear,
}

#[derive(Debug, Clone)]
pub struct MlpTape {
    fc1: LinearTape,
    bn: BnTape,
    act: Tensor,
    fc2: LinearTape,
}

impl Mlp {
    pub fn new<R: RngCore>(spec: MlpSpec, rng: &mut R) -> Self {
        Self {
            fc1: Linear::new(spec.d_in, spec.hidden, rng),
            bn: BatchNorm::new(spec.hidden),
            fc2: Linear::new(spec.hidden, spec.d_out, rng),
        }
    }

    pub fn d_in(&self) -> usize {
        self.fc1.d_in
    }

    pub fn d_out(&self) -> usize {
        self.fc2.d_out
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Tensor {
        let h = Relu::forward(self.bn.forward(&self.fc1.forward(x), mode));
        self.fc2.forward(&h)
    }

    pub fn forward_taped(&mut self, x: &Tensor) -> (Tensor, MlpTape) {
        let (h, fc1) = self.fc1.forward_taped(x);
        let (h, bn) = self.bn.forward_taped(&h);
        let act = Relu::forward(h);
        let (out, fc2) = self.fc2.forward_taped(&act);
        (out, MlpTape { fc1, bn, act, fc2 })
    }

    pub fn backward(&mut self, tape: &MlpTape, gout: &Tensor) -> Tensor {
        let g = self.fc2.backward(&tape.fc2, gout);
        let g = Relu::backward(&tape.act, g);
        let g = self.bn.backward(&tape.bn, &g);
        self.fc1.backward(&tape.fc1, &g)
    }

    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        vec![
            self.fc1.spec(),
            LayerSpec::BatchNorm {
                features: self.fc1.d_out,
            },
            LayerSpec::Relu {
                features: self.fc1.d_out,
            },
            self.fc2.spec(),
        ]
    }
}

impl Module for Mlp {
    fn params(&self) -> Vec<&Param> {
        let mut p = self.fc1.params();
        p.extend(self.bn.params());
        p.extend(self.fc2.params());
        p
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.fc1.params_mut();
        p.extend(self.bn.params_mut());
        p.extend(self.fc2.params_mut());
        p
    }
    fn buffers(&self) -> Vec<&[f64]> {
        self.bn.buffers()
    }
}
