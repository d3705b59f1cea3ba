//! Network assembly: spatial encoder, optional second encoder branch
//! (spectral FFC blocks or plain conv blocks), fused bottleneck, and a
//! transpose-convolution decoder fed by spatial skip connections.
//!
//! Parameter names follow `branch.stage.layer.param`, for example
//! `spatial.0.conv1.weight`, `spectral.2.spectral_norm.fu_global.conv.weight`,
//! `decoder.up1.upconv.bias` or `head.weight`.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array3, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{
    count_params, scoped, BatchNorm2d, Conv2d, ConvTranspose2d, MaxPool2d, Mode, Module,
    NamedBuffers, NamedParams, Relu,
};
use crate::spectral::{FfcBlock, FfcLayout, FrequencyFilter};
use crate::tensor::{concat_channels, ensure_finite, split_channels, FeatureMap};
use crate::{Error, Result, NUM_CLASSES};

/// Encoder depth; each stage halves the spatial size.
pub const DEPTH: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Spatial encoder plus FFC spectral encoder.
    Ynet,
    /// Spatial encoder only.
    Unet,
    /// Second branch built from plain conv blocks instead of FFC blocks.
    YnetConvBranch,
}

impl Variant {
    pub fn has_second_branch(self) -> bool {
        !matches!(self, Variant::Unet)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Ynet => "ynet",
            Variant::Unet => "unet",
            Variant::YnetConvBranch => "ynet_conv_branch",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ynet" => Ok(Variant::Ynet),
            "unet" => Ok(Variant::Unet),
            "ynet_conv_branch" => Ok(Variant::YnetConvBranch),
            other => Err(Error::Config(format!(
                "unknown model variant `{other}` (expected ynet, unet or ynet_conv_branch)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub num_classes: usize,
    pub depth: usize,
    pub base_width: usize,
    /// Fraction of spectral-norm channels sent to the global Fourier unit.
    pub alpha: f64,
    /// Fraction of each FFC block's output channels carried on the global side.
    pub global_ratio: f64,
    pub filter: FrequencyFilter,
    pub input_size: (usize, usize),
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Ynet,
            num_classes: NUM_CLASSES,
            depth: DEPTH,
            base_width: 32,
            alpha: 0.5,
            global_ratio: 0.5,
            filter: FrequencyFilter::none(),
            input_size: (224, 224),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth != DEPTH {
            return Err(Error::Config(format!("depth must be {DEPTH}, got {}", self.depth)));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "num_classes must be at least 2, got {}",
                self.num_classes
            )));
        }
        if self.base_width < 1 {
            return Err(Error::Config("base_width must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if !(self.global_ratio > 0.0 && self.global_ratio < 1.0) {
            return Err(Error::Config(format!(
                "global_ratio must lie in (0, 1), got {}",
                self.global_ratio
            )));
        }
        self.filter.validate()?;
        let (h, w) = self.input_size;
        let unit = 1 << DEPTH;
        if h < unit || w < unit || h % unit != 0 || w % unit != 0 {
            return Err(Error::Config(format!(
                "input size {h}x{w} must be a positive multiple of {unit}"
            )));
        }
        Ok(())
    }

    /// Output channels of each spatial encoder stage.
    pub fn spatial_widths(&self) -> [usize; DEPTH] {
        let w = self.base_width;
        match self.variant {
            Variant::Unet => [w, 2 * w, 4 * w, 8 * w],
            // Each branch carries half of the fused 8w bottleneck input.
            Variant::Ynet | Variant::YnetConvBranch => [w, 2 * w, 4 * w, 4 * w],
        }
    }

    /// Output channels (local + global) of each second-branch stage.
    pub fn second_branch_widths(&self) -> Option<[usize; DEPTH]> {
        self.variant
            .has_second_branch()
            .then(|| self.spatial_widths())
    }

    pub fn bottleneck_width(&self) -> usize {
        16 * self.base_width
    }

    /// Output channels of the four decoder up-blocks, deepest first.
    pub fn decoder_widths(&self) -> [usize; DEPTH] {
        let w = self.base_width;
        [8 * w, 4 * w, 2 * w, w]
    }

    /// Global-side channels of a stage with `channels` outputs.
    pub fn global_channels(&self, channels: usize) -> usize {
        crate::spectral::global_channel_count(channels, self.global_ratio)
    }
}

/// conv3×3 → BN → ReLU → conv3×3 → BN → ReLU.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub conv1: Conv2d,
    pub norm1: BatchNorm2d,
    act1: Relu,
    pub conv2: Conv2d,
    pub norm2: BatchNorm2d,
    act2: Relu,
}

impl ConvBlock {
    pub fn new<R: Rng + ?Sized>(in_channels: usize, out_channels: usize, rng: &mut R) -> Self {
        Self {
            conv1: Conv2d::new(in_channels, out_channels, 3, false, rng),
            norm1: BatchNorm2d::new(out_channels),
            act1: Relu::new(),
            conv2: Conv2d::new(out_channels, out_channels, 3, false, rng),
            norm2: BatchNorm2d::new(out_channels),
            act2: Relu::new(),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.conv2.out_channels()
    }

    pub fn forward(&mut self, x: &FeatureMap, mode: Mode) -> Result<FeatureMap> {
        let y = self.conv1.forward(x, mode)?;
        let y = self.norm1.forward(&y, mode)?;
        let y = self.act1.forward(&y, mode);
        let y = self.conv2.forward(&y, mode)?;
        let y = self.norm2.forward(&y, mode)?;
        Ok(self.act2.forward(&y, mode))
    }

    pub fn backward(&mut self, g: &FeatureMap) -> FeatureMap {
        let g = self.act2.backward(g);
        let g = self.norm2.backward(&g);
        let g = self.conv2.backward(&g);
        let g = self.act1.backward(&g);
        let g = self.norm1.backward(&g);
        self.conv1.backward(&g)
    }
}

impl Module for ConvBlock {
    fn params<'a>(&'a mut self, scope: &str, out: &mut NamedParams<'a>) {
        self.conv1.params(&scoped(scope, "conv1"), out);
        self.norm1.params(&scoped(scope, "norm1"), out);
        self.conv2.params(&scoped(scope, "conv2"), out);
        self.norm2.params(&scoped(scope, "norm2"), out);
    }

    fn buffers<'a>(&'a mut self, scope: &str, out: &mut NamedBuffers<'a>) {
        self.norm1.buffers(&scoped(scope, "norm1"), out);
        self.norm2.buffers(&scoped(scope, "norm2"), out);
    }
}

/// Conv block followed by 2× max pooling; the pre-pool output is the skip tap.
#[derive(Clone, Debug)]
pub struct EncoderStage {
    pub block: ConvBlock,
    pool: MaxPool2d,
}

impl EncoderStage {
    fn new<R: Rng + ?Sized>(in_channels: usize, out_channels: usize, rng: &mut R) -> Self {
        Self {
            block: ConvBlock::new(in_channels, out_channels, rng),
            pool: MaxPool2d::new(),
        }
    }

    /// Returns `(pre_pool, pooled)`.
    fn forward(&mut self, x: &FeatureMap, mode: Mode) -> Result<(FeatureMap, FeatureMap)> {
        let y = self.block.forward(x, mode)?;
        let p = self.pool.forward(&y, mode)?;
        Ok((y, p))
    }

    fn backward(&mut self, grad_pooled: &FeatureMap, grad_skip: Option<&FeatureMap>) -> FeatureMap {
        let mut g = self.pool.backward(grad_pooled);
        if let Some(s) = grad_skip {
            g += s;
        }
        self.block.backward(&g)
    }
}

impl Module for EncoderStage {
    fn params<'a>(&'a mut self, scope: &str, out: &mut NamedParams<'a>) {
        self.block.params(scope, out);
    }

    fn buffers<'a>(&'a mut self, scope: &str, out: &mut NamedBuffers<'a>) {
        self.block.buffers(scope, out);
    }
}

#[derive(Clone, Debug)]
pub enum SecondBranch {
    Spectral(Vec<FfcBlock>),
    Conv(Vec<EncoderStage>),
}

impl SecondBranch {
    fn scope(&self) -> &'static str {
        match self {
            SecondBranch::Spectral(_) => "spectral",
            SecondBranch::Conv(_) => "conv_branch",
        }
    }
}

/// Transposed conv (2× up) → concat with skip → conv block.
#[derive(Clone, Debug)]
pub struct UpBlock {
    pub upconv: ConvTranspose2d,
    pub block: ConvBlock,
}

impl Module for UpBlock {
    fn params<'a>(&'a mut self, scope: &str, out: &mut NamedParams<'a>) {
        self.upconv.params(&scoped(scope, "upconv"), out);
        self.block.params(scope, out);
    }

    fn buffers<'a>(&'a mut self, scope: &str, out: &mut NamedBuffers<'a>) {
        self.block.buffers(scope, out);
    }
}

/// Spatial dims recorded during the last forward pass.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct StageTrace {
    /// `(channels, height, width)` after each spatial encoder stage.
    pub spatial: Vec<(usize, usize, usize)>,
    /// `(channels, height, width)` after each second-branch stage.
    pub second: Vec<(usize, usize, usize)>,
}

pub struct SegmentationModel {
    config: ModelConfig,
    pub spatial: Vec<EncoderStage>,
    pub second: Option<SecondBranch>,
    /// Zero-filled channels appended to the fused features when there is no
    /// second branch (0 for a plain U-Net).
    fusion_pad: usize,
    pub bottleneck: ConvBlock,
    pub decoder: Vec<UpBlock>,
    pub head: Conv2d,
    trace: StageTrace,
}

impl fmt::Debug for SegmentationModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SegmentationModel")
            .field("config", &self.config)
            .field("fusion_pad", &self.fusion_pad)
            .finish_non_exhaustive()
    }
}

impl SegmentationModel {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let sw = config.spatial_widths();
        let mut spatial = Vec::with_capacity(DEPTH);
        let mut cin = 1;
        for &c in &sw {
            spatial.push(EncoderStage::new(cin, c, rng));
            cin = c;
        }

        let second = match config.variant {
            Variant::Unet => None,
            Variant::Ynet => {
                let widths = config.second_branch_widths().expect("ynet has a second branch");
                let mut blocks = Vec::with_capacity(DEPTH);
                // The image enters as local features; the first block has no global input.
                let (mut in_l, mut in_g) = (1, 0);
                for &c in &widths {
                    let out_g = config.global_channels(c);
                    let layout = FfcLayout {
                        in_local: in_l,
                        in_global: in_g,
                        out_local: c - out_g,
                        out_global: out_g,
                        kernel: 3,
                        alpha: config.alpha,
                        filter: config.filter,
                    };
                    blocks.push(FfcBlock::new(layout, rng)?);
                    (in_l, in_g) = (c - out_g, out_g);
                }
                Some(SecondBranch::Spectral(blocks))
            }
            Variant::YnetConvBranch => {
                let widths = config.second_branch_widths().expect("variant has a second branch");
                let mut stages = Vec::with_capacity(DEPTH);
                let mut cin = 1;
                for &c in &widths {
                    stages.push(EncoderStage::new(cin, c, rng));
                    cin = c;
                }
                Some(SecondBranch::Conv(stages))
            }
        };

        let second_out = config.second_branch_widths().map_or(0, |w| w[DEPTH - 1]);
        let fused = sw[DEPTH - 1] + second_out;
        let bottleneck = ConvBlock::new(fused, config.bottleneck_width(), rng);

        let dw = config.decoder_widths();
        let mut decoder = Vec::with_capacity(DEPTH);
        let mut prev = config.bottleneck_width();
        for (i, &out) in dw.iter().enumerate() {
            let skip = sw[DEPTH - 1 - i];
            let up_ch = prev / 2;
            decoder.push(UpBlock {
                upconv: ConvTranspose2d::new(prev, up_ch, rng),
                block: ConvBlock::new(up_ch + skip, out, rng),
            });
            prev = out;
        }
        let head = Conv2d::new(prev, config.num_classes, 1, true, rng);

        Ok(Self {
            config,
            spatial,
            second,
            fusion_pad: 0,
            bottleneck,
            decoder,
            head,
            trace: StageTrace::default(),
        })
    }

    /// Deterministic construction from a seed.
    pub fn from_seed(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::new(config, &mut rng)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn trace(&self) -> &StageTrace {
        &self.trace
    }

    /// Channels of zero padding in the fusion slot.
    pub fn fusion_pad(&self) -> usize {
        self.fusion_pad
    }

    /// Drops the second branch and zero-fills its slot in the fused features,
    /// leaving spatial encoder, bottleneck and decoder weights untouched.
    pub fn strip_second_branch(mut self) -> Self {
        if let Some(widths) = self.config.second_branch_widths() {
            self.fusion_pad = widths[DEPTH - 1];
        }
        self.second = None;
        self
    }

    fn second_forward(&mut self, x: &FeatureMap, mode: Mode) -> Result<Option<FeatureMap>> {
        self.trace.second.clear();
        let Some(branch) = &mut self.second else {
            return Ok(None);
        };
        let out = match branch {
            SecondBranch::Spectral(blocks) => {
                let (b, _, h, w) = x.dim();
                let mut l = x.clone();
                let mut g = FeatureMap::zeros((b, 0, h, w));
                for block in blocks.iter_mut() {
                    (l, g) = block.forward(&l, &g, mode)?;
                    let (_, cl, hh, ww) = l.dim();
                    self.trace.second.push((cl + g.dim().1, hh, ww));
                }
                concat_channels(&l, &g)?
            }
            SecondBranch::Conv(stages) => {
                let mut h = x.clone();
                for stage in stages.iter_mut() {
                    h = stage.forward(&h, mode)?.1;
                    let (_, c, hh, ww) = h.dim();
                    self.trace.second.push((c, hh, ww));
                }
                h
            }
        };
        Ok(Some(out))
    }

    /// Logits `[B, num_classes, H, W]` for an input `[B, 1, H, W]`.
    pub fn forward(&mut self, x: &FeatureMap, mode: Mode) -> Result<FeatureMap> {
        let (_, c, h, w) = x.dim();
        if c != 1 || (h, w) != self.config.input_size {
            return Err(Error::Dimension(format!(
                "model expects [B, 1, {}, {}] input, got {:?}",
                self.config.input_size.0,
                self.config.input_size.1,
                x.dim()
            )));
        }
        ensure_finite(x, "model input")?;

        self.trace.spatial.clear();
        let mut skips = Vec::with_capacity(DEPTH);
        let mut h_sp = x.clone();
        for stage in self.spatial.iter_mut() {
            let (skip, pooled) = stage.forward(&h_sp, mode)?;
            skips.push(skip);
            let (_, c, hh, ww) = pooled.dim();
            self.trace.spatial.push((c, hh, ww));
            h_sp = pooled;
        }

        let second = self.second_forward(x, mode)?;
        let fused = match second {
            Some(s) => concat_channels(&h_sp, &s)?,
            None if self.fusion_pad > 0 => {
                let (b, _, hh, ww) = h_sp.dim();
                concat_channels(&h_sp, &FeatureMap::zeros((b, self.fusion_pad, hh, ww)))?
            }
            None => h_sp,
        };

        let mut d = self.bottleneck.forward(&fused, mode)?;
        for (i, up) in self.decoder.iter_mut().enumerate() {
            let u = up.upconv.forward(&d, mode)?;
            let cat = concat_channels(&u, &skips[DEPTH - 1 - i])?;
            d = up.block.forward(&cat, mode)?;
        }
        let logits = self.head.forward(&d, mode)?;
        ensure_finite(&logits, "logits")?;
        Ok(logits)
    }

    /// Backpropagates `grad_logits` from the last [`Mode::Train`] forward pass,
    /// accumulating parameter gradients. Returns the gradient w.r.t. the input.
    pub fn backward(&mut self, grad_logits: &FeatureMap) -> FeatureMap {
        let mut g = self.head.backward(grad_logits);
        let mut skip_grads: Vec<Option<FeatureMap>> = vec![None; DEPTH];
        for (i, up) in self.decoder.iter_mut().enumerate().rev() {
            let g_cat = up.block.backward(&g);
            let (g_up, g_skip) = split_channels(&g_cat, up.upconv.out_channels());
            skip_grads[DEPTH - 1 - i] = Some(g_skip);
            g = up.upconv.backward(&g_up);
        }
        let g_fused = self.bottleneck.backward(&g);
        let spatial_out = self.spatial[DEPTH - 1].block.out_channels();
        let (mut g_sp, g_second) = split_channels(&g_fused, spatial_out);

        let mut dx_second = None;
        if let Some(branch) = &mut self.second {
            match branch {
                SecondBranch::Spectral(blocks) => {
                    let out_l = blocks[DEPTH - 1].layout().out_local;
                    let (mut gl, mut gg) = split_channels(&g_second, out_l);
                    for block in blocks.iter_mut().rev() {
                        (gl, gg) = block.backward(&gl, &gg);
                    }
                    dx_second = Some(gl);
                }
                SecondBranch::Conv(stages) => {
                    let mut gh = g_second;
                    for stage in stages.iter_mut().rev() {
                        gh = stage.backward(&gh, None);
                    }
                    dx_second = Some(gh);
                }
            }
        }

        for (i, stage) in self.spatial.iter_mut().enumerate().rev() {
            g_sp = stage.backward(&g_sp, skip_grads[i].as_ref());
        }
        if let Some(d) = dx_second {
            g_sp += &d;
        }
        g_sp
    }

    /// Exact number of learnable scalars (running statistics excluded).
    pub fn count_parameters(&mut self) -> usize {
        count_params(self)
    }

    pub fn zero_grad(&mut self) {
        crate::nn::zero_grads(self);
    }

    /// Per-pixel argmax of the evaluation-mode logits.
    pub fn predict(&mut self, x: &FeatureMap) -> Result<Array3<u8>> {
        let logits = self.forward(x, Mode::Eval)?;
        Ok(argmax_classes(&logits))
    }
}

/// Per-pixel class index of the largest logit (first index wins ties).
pub fn argmax_classes(logits: &FeatureMap) -> Array3<u8> {
    let (b, k, h, w) = logits.dim();
    let mut out = Array3::<u8>::zeros((b, h, w));
    for bi in 0..b {
        let sample = logits.index_axis(Axis(0), bi);
        for i in 0..h {
            for j in 0..w {
                let mut best = 0;
                for c in 1..k {
                    if sample[[c, i, j]] > sample[[best, i, j]] {
                        best = c;
                    }
                }
                out[[bi, i, j]] = best as u8;
            }
        }
    }
    out
}

impl Module for SegmentationModel {
    fn params<'a>(&'a mut self, scope: &str, out: &mut NamedParams<'a>) {
        for (i, stage) in self.spatial.iter_mut().enumerate() {
            stage.params(&scoped(scope, &format!("spatial.{i}")), out);
        }
        if let Some(branch) = &mut self.second {
            let name = branch.scope();
            match branch {
                SecondBranch::Spectral(blocks) => {
                    for (i, b) in blocks.iter_mut().enumerate() {
                        b.params(&scoped(scope, &format!("{name}.{i}")), out);
                    }
                }
                SecondBranch::Conv(stages) => {
                    for (i, s) in stages.iter_mut().enumerate() {
                        s.params(&scoped(scope, &format!("{name}.{i}")), out);
                    }
                }
            }
        }
        self.bottleneck
            .params(&scoped(scope, "decoder.bottleneck"), out);
        for (i, up) in self.decoder.iter_mut().enumerate() {
            up.params(&scoped(scope, &format!("decoder.up{}", i + 1)), out);
        }
        self.head.params(&scoped(scope, "head"), out);
    }

    fn buffers<'a>(&'a mut self, scope: &str, out: &mut NamedBuffers<'a>) {
        for (i, stage) in self.spatial.iter_mut().enumerate() {
            stage.buffers(&scoped(scope, &format!("spatial.{i}")), out);
        }
        if let Some(branch) = &mut self.second {
            let name = branch.scope();
            match branch {
                SecondBranch::Spectral(blocks) => {
                    for (i, b) in blocks.iter_mut().enumerate() {
                        b.buffers(&scoped(scope, &format!("{name}.{i}")), out);
                    }
                }
                SecondBranch::Conv(stages) => {
                    for (i, s) in stages.iter_mut().enumerate() {
                        s.buffers(&scoped(scope, &format!("{name}.{i}")), out);
                    }
                }
            }
        }
        self.bottleneck
            .buffers(&scoped(scope, "decoder.bottleneck"), out);
        for (i, up) in self.decoder.iter_mut().enumerate() {
            up.buffers(&scoped(scope, &format!("decoder.up{}", i + 1)), out);
        }
    }
}
