//! The dual-branch segmentation network.
//!
//! ```text
//! encoder   5 × ResNet block: atrous 3×3 (rates 1, 2, 5) + residual, then a
//!           stride-2 3×3 conv. 256×768×3 → … → 8×24×512 (latent z)
//! F_D       resize ×2 + 1×1 → f_D1 16×48×512
//!           resize ×2 + 1×1 → f_D2 32×96×256
//!           1×1 → 3, resize ×8, sigmoid → reconstruction 256×768×3
//! F_S       resize z ×2 → attention(f_D1) → 3×3 conv → resize ×2   32×96×256
//!           concat encoder stage 3 → 1×1                           32×96×256
//!           attention(f_D2) → 3×3 conv → resize ×8 → softmax       256×768×4
//! ```
//!
//! Attention fusion is `f_S ⊗ (1 + softmax_c(f_D))`, followed by the block's
//! stride-1 conv and a bilinear resize to the next stage.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{
    attention_backward, attention_fuse, channel_softmax, channel_softmax_backward, concat, relu_backward,
    relu_inplace, sigmoid_inplace, split, Conv2d, Resize,
};
use super::tensor::{Real, Tensor3};
use crate::error::{Error, Result};
use crate::types::{BScan, LatentCode, SegmentationOutput, NET_COLS, NET_ROWS, NUM_CLASSES};

/// Encoder widths at full scale.
pub const FULL_ENCODER_CHANNELS: [usize; 5] = [64, 128, 256, 512, 512];
/// Dilation rates of the three atrous convolutions in each block.
pub const ATROUS_RATES: [usize; 3] = [1, 2, 5];
const INPUT_CHANNELS: usize = 3;
const RECONSTRUCTION_CHANNELS: usize = 3;
/// Spatial downsampling between the input and the latent code.
const ENCODER_STRIDE: usize = 32;

/// Network geometry. Full scale is width divisor 1 on a 256×768 input;
/// tests shrink both.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    pub width_divisor: usize,
    pub input_rows: usize,
    pub input_cols: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl NetConfig {
    pub fn full() -> Self {
        Self {
            width_divisor: 1,
            input_rows: NET_ROWS,
            input_cols: NET_COLS,
        }
    }

    pub fn with_width_divisor(width_divisor: usize) -> Self {
        Self {
            width_divisor,
            ..Self::full()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width_divisor == 0 || FULL_ENCODER_CHANNELS[0] % self.width_divisor != 0 {
            return Err(Error::Config(format!(
                "width divisor {} must divide {}",
                self.width_divisor, FULL_ENCODER_CHANNELS[0]
            )));
        }
        if self.input_rows == 0
            || self.input_cols == 0
            || self.input_rows % ENCODER_STRIDE != 0
            || self.input_cols % ENCODER_STRIDE != 0
        {
            return Err(Error::Config(format!(
                "input {}x{} must be positive multiples of {ENCODER_STRIDE}",
                self.input_rows, self.input_cols
            )));
        }
        Ok(())
    }

    pub fn encoder_channels(&self) -> [usize; 5] {
        FULL_ENCODER_CHANNELS.map(|c| c / self.width_divisor)
    }

    /// Spatial size after encoder stage `stage` (1-based).
    pub fn stage_dims(&self, stage: usize) -> (usize, usize) {
        (self.input_rows >> stage, self.input_cols >> stage)
    }

    /// Expected (height, width, channels) of every named tensor.
    pub fn expected_shapes(&self) -> Vec<(&'static str, (usize, usize, usize))> {
        let ch = self.encoder_channels();
        let s = |i: usize| self.stage_dims(i);
        let (h, w) = (self.input_rows, self.input_cols);
        vec![
            ("input", (h, w, INPUT_CHANNELS)),
            ("encoder.stage1", (s(1).0, s(1).1, ch[0])),
            ("encoder.stage2", (s(2).0, s(2).1, ch[1])),
            ("encoder.stage3", (s(3).0, s(3).1, ch[2])),
            ("encoder.stage4", (s(4).0, s(4).1, ch[3])),
            ("latent", (s(5).0, s(5).1, ch[4])),
            ("reconstruction.f_d1", (s(4).0, s(4).1, ch[3])),
            ("reconstruction.f_d2", (s(3).0, s(3).1, ch[2])),
            ("reconstruction", (h, w, RECONSTRUCTION_CHANNELS)),
            ("segmentation.resized_latent", (s(4).0, s(4).1, ch[4])),
            ("segmentation.attention1", (s(3).0, s(3).1, ch[2])),
            ("segmentation.concat", (s(3).0, s(3).1, ch[2])),
            ("segmentation", (h, w, NUM_CLASSES)),
        ]
    }
}

/// Encoder block: three atrous convs with a residual path, then a stride-2
/// conv.
#[derive(Debug, Clone, PartialEq)]
pub struct ResBlock<T> {
    pub atrous: [Conv2d<T>; 3],
    /// 1×1 projection on the residual path when channels change.
    pub projection: Option<Conv2d<T>>,
    pub down: Conv2d<T>,
}

impl<T: Real> ResBlock<T> {
    fn new(cin: usize, cout: usize) -> Self {
        Self {
            atrous: [
                Conv2d::new(cin, cout, 3, 1, ATROUS_RATES[0]),
                Conv2d::new(cout, cout, 3, 1, ATROUS_RATES[1]),
                Conv2d::new(cout, cout, 3, 1, ATROUS_RATES[2]),
            ],
            projection: (cin != cout).then(|| Conv2d::new(cin, cout, 1, 1, 1)),
            down: Conv2d::new(cout, cout, 3, 2, 1),
        }
    }
}

/// All learnable parameters. The same structure doubles as a gradient
/// accumulator and as Adam moment storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    pub config: NetConfig,
    pub encoder: Vec<ResBlock<T>>,
    pub rec_up1: Conv2d<T>,
    pub rec_up2: Conv2d<T>,
    pub rec_out: Conv2d<T>,
    pub seg_attention1: Conv2d<T>,
    pub seg_concat: Conv2d<T>,
    pub seg_attention2: Conv2d<T>,
}

/// Everything one forward pass produces.
#[derive(Debug, Clone)]
pub struct ForwardOutput<T> {
    /// Per-pixel class probabilities, `NUM_CLASSES × H × W`.
    pub segmentation: Tensor3<T>,
    /// `3 × H × W`, in `(0,1)`.
    pub reconstruction: Tensor3<T>,
    pub latent: Tensor3<T>,
    /// Encoder stage outputs 1–4.
    pub skip_features: Vec<Tensor3<T>>,
    pub f_d1: Tensor3<T>,
    pub f_d2: Tensor3<T>,
}

/// Intermediate results of the reconstruction decoder.
#[derive(Debug, Clone)]
pub struct ReconstructionOutput<T> {
    pub f_d1: Tensor3<T>,
    pub f_d2: Tensor3<T>,
    /// Pre-sigmoid reconstruction at the f_D2 resolution.
    pub logits: Tensor3<T>,
    pub reconstruction: Tensor3<T>,
}

struct BlockCache<T> {
    h1: Tensor3<T>,
    h2: Tensor3<T>,
    residual: Tensor3<T>,
    out: Tensor3<T>,
}

struct Resizes {
    latent_up: Resize,
    stage4_up: Resize,
    stage3_to_input: Resize,
}

/// Activations retained for the backward pass.
pub struct ForwardCache<T> {
    input: Tensor3<T>,
    blocks: Vec<BlockCache<T>>,
    latent_up: Tensor3<T>,
    f_d1: Tensor3<T>,
    f_d1_up: Tensor3<T>,
    f_d2: Tensor3<T>,
    reconstruction: Tensor3<T>,
    att1_fused: Tensor3<T>,
    att1_softmax: Tensor3<T>,
    att1_conv: Tensor3<T>,
    concat: Tensor3<T>,
    fused: Tensor3<T>,
    att2_fused: Tensor3<T>,
    att2_softmax: Tensor3<T>,
    segmentation: Tensor3<T>,
}

impl<T: Real> ForwardCache<T> {
    pub fn output(&self) -> ForwardOutput<T> {
        ForwardOutput {
            segmentation: self.segmentation.clone(),
            reconstruction: self.reconstruction.clone(),
            latent: self.blocks[4].out.clone(),
            skip_features: self.blocks[..4].iter().map(|b| b.out.clone()).collect(),
            f_d1: self.f_d1.clone(),
            f_d2: self.f_d2.clone(),
        }
    }

    pub fn segmentation(&self) -> &Tensor3<T> {
        &self.segmentation
    }

    pub fn reconstruction(&self) -> &Tensor3<T> {
        &self.reconstruction
    }

    pub fn input(&self) -> &Tensor3<T> {
        &self.input
    }

    pub fn latent(&self) -> &Tensor3<T> {
        &self.blocks[4].out
    }

    /// (height, width, channels) of every tensor named by
    /// [`NetConfig::expected_shapes`], in the same order.
    pub fn shapes(&self) -> Vec<(&'static str, (usize, usize, usize))> {
        let b = |i: usize| self.blocks[i].out.hwc();
        vec![
            ("input", self.input.hwc()),
            ("encoder.stage1", b(0)),
            ("encoder.stage2", b(1)),
            ("encoder.stage3", b(2)),
            ("encoder.stage4", b(3)),
            ("latent", b(4)),
            ("reconstruction.f_d1", self.f_d1.hwc()),
            ("reconstruction.f_d2", self.f_d2.hwc()),
            ("reconstruction", self.reconstruction.hwc()),
            ("segmentation.resized_latent", self.latent_up.hwc()),
            // Resized attention output; only its pre-resize map is kept.
            (
                "segmentation.attention1",
                (self.fused.rows, self.fused.cols, self.att1_conv.channels),
            ),
            ("segmentation.concat", self.fused.hwc()),
            ("segmentation", self.segmentation.hwc()),
        ]
    }
}

fn shape_of<T: Real>(t: &Tensor3<T>) -> String {
    let (h, w, c) = t.hwc();
    format!("{h}x{w}x{c}")
}

fn check_shape<T: Real>(t: &Tensor3<T>, expected: (usize, usize, usize), context: &'static str) -> Result<()> {
    if t.hwc() != expected {
        return Err(Error::shape(
            context,
            format!("{}x{}x{}", expected.0, expected.1, expected.2),
            shape_of(t),
        ));
    }
    Ok(())
}

impl<T: Real> Network<T> {
    /// Zero-filled network; use [`Network::new`] for trainable weights.
    pub fn zeros(config: NetConfig) -> Result<Self> {
        config.validate()?;
        let ch = config.encoder_channels();
        let mut cin = INPUT_CHANNELS;
        let encoder = ch
            .iter()
            .map(|&cout| {
                let block = ResBlock::new(cin, cout);
                cin = cout;
                block
            })
            .collect();
        Ok(Self {
            config,
            encoder,
            rec_up1: Conv2d::new(ch[4], ch[3], 1, 1, 1),
            rec_up2: Conv2d::new(ch[3], ch[2], 1, 1, 1),
            rec_out: Conv2d::new(ch[2], RECONSTRUCTION_CHANNELS, 1, 1, 1),
            seg_attention1: Conv2d::new(ch[4], ch[2], 3, 1, 1),
            seg_concat: Conv2d::new(2 * ch[2], ch[2], 1, 1, 1),
            seg_attention2: Conv2d::new(ch[2], NUM_CLASSES, 3, 1, 1),
        })
    }

    /// Randomly initialised network, deterministic in `seed`.
    pub fn new(config: NetConfig, seed: u64) -> Result<Self> {
        let mut net = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (_, conv) in net.layers_mut() {
            conv.init(&mut rng);
        }
        Ok(net)
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.config).expect("config already validated")
    }

    /// Every conv layer with its canonical name, in a fixed order.
    pub fn layers(&self) -> Vec<(String, &Conv2d<T>)> {
        let mut out = Vec::new();
        for (i, block) in self.encoder.iter().enumerate() {
            for (j, conv) in block.atrous.iter().enumerate() {
                out.push((format!("encoder.stage{}.atrous{}", i + 1, j + 1), conv));
            }
            if let Some(p) = &block.projection {
                out.push((format!("encoder.stage{}.projection", i + 1), p));
            }
            out.push((format!("encoder.stage{}.down", i + 1), &block.down));
        }
        out.push(("reconstruction.up1".into(), &self.rec_up1));
        out.push(("reconstruction.up2".into(), &self.rec_up2));
        out.push(("reconstruction.out".into(), &self.rec_out));
        out.push(("segmentation.attention1.conv".into(), &self.seg_attention1));
        out.push(("segmentation.concat.conv".into(), &self.seg_concat));
        out.push(("segmentation.attention2.conv".into(), &self.seg_attention2));
        out
    }

    pub fn layers_mut(&mut self) -> Vec<(String, &mut Conv2d<T>)> {
        let mut out = Vec::new();
        for (i, block) in self.encoder.iter_mut().enumerate() {
            for (j, conv) in block.atrous.iter_mut().enumerate() {
                out.push((format!("encoder.stage{}.atrous{}", i + 1, j + 1), conv));
            }
            if let Some(p) = &mut block.projection {
                out.push((format!("encoder.stage{}.projection", i + 1), p));
            }
            out.push((format!("encoder.stage{}.down", i + 1), &mut block.down));
        }
        out.push(("reconstruction.up1".into(), &mut self.rec_up1));
        out.push(("reconstruction.up2".into(), &mut self.rec_up2));
        out.push(("reconstruction.out".into(), &mut self.rec_out));
        out.push(("segmentation.attention1.conv".into(), &mut self.seg_attention1));
        out.push(("segmentation.concat.conv".into(), &mut self.seg_concat));
        out.push(("segmentation.attention2.conv".into(), &mut self.seg_attention2));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.layers().iter().map(|(_, c)| c.parameter_count()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.layers()
            .iter()
            .all(|(_, c)| c.weight.iter().chain(&c.bias).all(|v| v.is_finite()))
    }

    pub fn cast<U: Real>(&self) -> Network<U> {
        let mut out = Network::<U>::zeros(self.config).expect("validated");
        let cast = |v: &T| U::from_f64(v.to_f64().expect("finite")).expect("finite");
        for ((_, dst), (_, src)) in out.layers_mut().into_iter().zip(self.layers()) {
            dst.weight = src.weight.iter().map(cast).collect();
            dst.bias = src.bias.iter().map(cast).collect();
        }
        out
    }

    fn resizes(&self) -> Resizes {
        let c = &self.config;
        let (r5, c5) = c.stage_dims(5);
        let (r4, c4) = c.stage_dims(4);
        let (r3, c3) = c.stage_dims(3);
        Resizes {
            latent_up: Resize::new(r5, c5, r4, c4),
            stage4_up: Resize::new(r4, c4, r3, c3),
            stage3_to_input: Resize::new(r3, c3, c.input_rows, c.input_cols),
        }
    }

    fn check_input(&self, x: &Tensor3<T>) -> Result<()> {
        check_shape(
            x,
            (self.config.input_rows, self.config.input_cols, INPUT_CHANNELS),
            "network input",
        )
    }

    fn block_forward(block: &ResBlock<T>, x: &Tensor3<T>) -> BlockCache<T> {
        let mut h1 = block.atrous[0].forward(x);
        relu_inplace(&mut h1);
        let mut h2 = block.atrous[1].forward(&h1);
        relu_inplace(&mut h2);
        let mut residual = block.atrous[2].forward(&h2);
        match &block.projection {
            Some(p) => residual.add_assign(&p.forward(x)),
            None => residual.add_assign(x),
        }
        relu_inplace(&mut residual);
        let mut out = block.down.forward(&residual);
        relu_inplace(&mut out);
        BlockCache { h1, h2, residual, out }
    }

    fn block_backward(
        block: &ResBlock<T>,
        grad: &mut ResBlock<T>,
        x: &Tensor3<T>,
        cache: &BlockCache<T>,
        mut dout: Tensor3<T>,
        need_input_grad: bool,
    ) -> Option<Tensor3<T>> {
        relu_backward(&cache.out, &mut dout);
        let mut dres = block.down.backward(&cache.residual, &dout, &mut grad.down, true).expect("requested");
        relu_backward(&cache.residual, &mut dres);
        let mut dh2 = block.atrous[2].backward(&cache.h2, &dres, &mut grad.atrous[2], true).expect("requested");
        relu_backward(&cache.h2, &mut dh2);
        let mut dh1 = block.atrous[1].backward(&cache.h1, &dh2, &mut grad.atrous[1], true).expect("requested");
        relu_backward(&cache.h1, &mut dh1);
        let dx = block.atrous[0].backward(x, &dh1, &mut grad.atrous[0], need_input_grad);
        let skip = match (&block.projection, &mut grad.projection) {
            (Some(p), Some(g)) => p.backward(x, &dres, g, need_input_grad),
            _ => need_input_grad.then_some(dres),
        };
        match (dx, skip) {
            (Some(mut dx), Some(skip)) => {
                dx.add_assign(&skip);
                Some(dx)
            }
            _ => None,
        }
    }

    /// Encoder only: latent code plus stage outputs 1–4.
    pub fn encoder_forward(&self, x: &Tensor3<T>) -> Result<(Tensor3<T>, Vec<Tensor3<T>>)> {
        self.check_input(x)?;
        let mut skips = Vec::with_capacity(4);
        let mut current = x.clone();
        for block in &self.encoder {
            let cache = Self::block_forward(block, &current);
            current = cache.out;
            skips.push(current.clone());
        }
        let latent = skips.pop().expect("five stages");
        Ok((latent, skips))
    }

    /// Reconstruction branch from a latent code.
    pub fn reconstruction_decoder_forward(&self, latent: &Tensor3<T>) -> Result<ReconstructionOutput<T>> {
        let shapes = self.config.expected_shapes();
        check_shape(latent, shapes[5].1, "latent code")?;
        let rs = self.resizes();
        let up = rs.latent_up.forward(latent);
        let (f_d1, f_d1_up, f_d2, logits, reconstruction) = self.reconstruction_path(&rs, &up);
        drop(f_d1_up);
        Ok(ReconstructionOutput {
            f_d1,
            f_d2,
            logits,
            reconstruction,
        })
    }

    #[allow(clippy::type_complexity)]
    fn reconstruction_path(
        &self,
        rs: &Resizes,
        latent_up: &Tensor3<T>,
    ) -> (Tensor3<T>, Tensor3<T>, Tensor3<T>, Tensor3<T>, Tensor3<T>) {
        let mut f_d1 = self.rec_up1.forward(latent_up);
        relu_inplace(&mut f_d1);
        let f_d1_up = rs.stage4_up.forward(&f_d1);
        let mut f_d2 = self.rec_up2.forward(&f_d1_up);
        relu_inplace(&mut f_d2);
        // The 1×1 projection commutes with bilinear resizing (weights sum to
        // one), so it runs at the low resolution.
        let logits = self.rec_out.forward(&f_d2);
        let mut reconstruction = rs.stage3_to_input.forward(&logits);
        sigmoid_inplace(&mut reconstruction);
        (f_d1, f_d1_up, f_d2, logits, reconstruction)
    }

    /// Segmentation branch given the latent, both reconstruction features
    /// and the encoder skips.
    pub fn segmentation_decoder_forward(
        &self,
        latent: &Tensor3<T>,
        f_d1: &Tensor3<T>,
        f_d2: &Tensor3<T>,
        skip_features: &[Tensor3<T>],
    ) -> Result<Tensor3<T>> {
        let shapes = self.config.expected_shapes();
        check_shape(latent, shapes[5].1, "latent code")?;
        check_shape(f_d1, shapes[6].1, "f_D1")?;
        check_shape(f_d2, shapes[7].1, "f_D2")?;
        if skip_features.len() != 4 {
            return Err(Error::shape("skip features", 4, skip_features.len()));
        }
        check_shape(&skip_features[2], shapes[3].1, "encoder stage 3 skip")?;
        let rs = self.resizes();
        let up = rs.latent_up.forward(latent);
        Ok(self.segmentation_path(&rs, &up, f_d1, f_d2, &skip_features[2]).segmentation)
    }

    fn segmentation_path(
        &self,
        rs: &Resizes,
        latent_up: &Tensor3<T>,
        f_d1: &Tensor3<T>,
        f_d2: &Tensor3<T>,
        stage3: &Tensor3<T>,
    ) -> SegmentationCache<T> {
        let (att1_fused, att1_softmax) = attention_fuse(f_d1, latent_up);
        let mut att1_conv = self.seg_attention1.forward(&att1_fused);
        relu_inplace(&mut att1_conv);
        let att1_up = rs.stage4_up.forward(&att1_conv);
        let concat = concat(&att1_up, stage3);
        let mut fused = self.seg_concat.forward(&concat);
        relu_inplace(&mut fused);
        let (att2_fused, att2_softmax) = attention_fuse(f_d2, &fused);
        let logits = self.seg_attention2.forward(&att2_fused);
        let segmentation = channel_softmax(&rs.stage3_to_input.forward(&logits));
        SegmentationCache {
            att1_fused,
            att1_softmax,
            att1_conv,
            concat,
            fused,
            att2_fused,
            att2_softmax,
            segmentation,
        }
    }

    /// Full forward pass keeping the activations needed by
    /// [`Network::backward`].
    pub fn forward_cached(&self, x: &Tensor3<T>) -> Result<ForwardCache<T>> {
        self.check_input(x)?;
        let rs = self.resizes();
        let mut blocks: Vec<BlockCache<T>> = Vec::with_capacity(5);
        for block in &self.encoder {
            let input = blocks.last().map(|b| &b.out).unwrap_or(x);
            let cache = Self::block_forward(block, input);
            blocks.push(cache);
        }
        let latent_up = rs.latent_up.forward(&blocks[4].out);
        let (f_d1, f_d1_up, f_d2, _, reconstruction) = self.reconstruction_path(&rs, &latent_up);
        let seg = self.segmentation_path(&rs, &latent_up, &f_d1, &f_d2, &blocks[2].out);
        let cache = ForwardCache {
            input: x.clone(),
            blocks,
            latent_up,
            f_d1,
            f_d1_up,
            f_d2,
            reconstruction,
            att1_fused: seg.att1_fused,
            att1_softmax: seg.att1_softmax,
            att1_conv: seg.att1_conv,
            concat: seg.concat,
            fused: seg.fused,
            att2_fused: seg.att2_fused,
            att2_softmax: seg.att2_softmax,
            segmentation: seg.segmentation,
        };
        if cfg!(debug_assertions) {
            self.assert_shapes(&cache);
        }
        Ok(cache)
    }

    fn assert_shapes(&self, cache: &ForwardCache<T>) {
        for ((name, expected), (_, got)) in self.config.expected_shapes().iter().zip(cache.shapes()) {
            debug_assert_eq!(*expected, got, "shape of {name}");
        }
    }

    pub fn forward(&self, x: &Tensor3<T>) -> Result<ForwardOutput<T>> {
        Ok(self.forward_cached(x)?.output())
    }

    /// Backpropagates gradients of the loss with respect to the segmentation
    /// probabilities and the reconstruction, accumulating into `grad`.
    pub fn backward(
        &self,
        cache: &ForwardCache<T>,
        d_segmentation: &Tensor3<T>,
        d_reconstruction: &Tensor3<T>,
        grad: &mut Network<T>,
    ) {
        let rs = self.resizes();

        // Segmentation head.
        let d_logits_up = channel_softmax_backward(&cache.segmentation, d_segmentation);
        let d_logits = rs.stage3_to_input.backward(&d_logits_up);
        let d_att2 = self
            .seg_attention2
            .backward(&cache.att2_fused, &d_logits, &mut grad.seg_attention2, true)
            .expect("requested");
        let (mut d_f_d2, mut d_fused) = attention_backward(&cache.fused, &cache.att2_softmax, &d_att2);
        relu_backward(&cache.fused, &mut d_fused);
        let d_concat = self
            .seg_concat
            .backward(&cache.concat, &d_fused, &mut grad.seg_concat, true)
            .expect("requested");
        let (d_att1_up, d_stage3_skip) = split(&d_concat, cache.concat.channels / 2);
        let mut d_att1_conv = rs.stage4_up.backward(&d_att1_up);
        relu_backward(&cache.att1_conv, &mut d_att1_conv);
        let d_att1 = self
            .seg_attention1
            .backward(&cache.att1_fused, &d_att1_conv, &mut grad.seg_attention1, true)
            .expect("requested");
        let (mut d_f_d1, mut d_latent_up) = attention_backward(&cache.latent_up, &cache.att1_softmax, &d_att1);

        // Reconstruction head.
        let mut d_rec = d_reconstruction.clone();
        for (g, &y) in d_rec.data.iter_mut().zip(&cache.reconstruction.data) {
            *g *= y * (T::one() - y);
        }
        let d_rec_logits = rs.stage3_to_input.backward(&d_rec);
        d_f_d2.add_assign(
            &self
                .rec_out
                .backward(&cache.f_d2, &d_rec_logits, &mut grad.rec_out, true)
                .expect("requested"),
        );
        relu_backward(&cache.f_d2, &mut d_f_d2);
        let d_f_d1_up = self
            .rec_up2
            .backward(&cache.f_d1_up, &d_f_d2, &mut grad.rec_up2, true)
            .expect("requested");
        d_f_d1.add_assign(&rs.stage4_up.backward(&d_f_d1_up));
        relu_backward(&cache.f_d1, &mut d_f_d1);
        d_latent_up.add_assign(
            &self
                .rec_up1
                .backward(&cache.latent_up, &d_f_d1, &mut grad.rec_up1, true)
                .expect("requested"),
        );

        // Encoder, last stage first.
        let mut d_out = rs.latent_up.backward(&d_latent_up);
        for stage in (0..5).rev() {
            if stage == 2 {
                d_out.add_assign(&d_stage3_skip);
            }
            let input = if stage == 0 { &cache.input } else { &cache.blocks[stage - 1].out };
            let need = stage > 0;
            match Self::block_backward(
                &self.encoder[stage],
                &mut grad.encoder[stage],
                input,
                &cache.blocks[stage],
                d_out,
                need,
            ) {
                Some(d) => d_out = d,
                None => break,
            }
        }
    }

    /// Adds `scale * other` to every parameter.
    pub fn axpy(&mut self, scale: T, other: &Network<T>) {
        for ((_, dst), (_, src)) in self.layers_mut().into_iter().zip(other.layers()) {
            for (a, &b) in dst.weight.iter_mut().zip(&src.weight) {
                *a += scale * b;
            }
            for (a, &b) in dst.bias.iter_mut().zip(&src.bias) {
                *a += scale * b;
            }
        }
    }
}

struct SegmentationCache<T> {
    att1_fused: Tensor3<T>,
    att1_softmax: Tensor3<T>,
    att1_conv: Tensor3<T>,
    concat: Tensor3<T>,
    fused: Tensor3<T>,
    att2_fused: Tensor3<T>,
    att2_softmax: Tensor3<T>,
    segmentation: Tensor3<T>,
}

/// Replicates a gray B-scan into the three input channels.
pub fn input_from_bscan(scan: &BScan) -> Tensor3<f32> {
    let (rows, cols) = scan.dims();
    let plane = scan.pixels.as_slice();
    let mut data = Vec::with_capacity(3 * plane.len());
    for _ in 0..INPUT_CHANNELS {
        data.extend_from_slice(plane);
    }
    Tensor3::from_vec(INPUT_CHANNELS, rows, cols, data)
}

impl ForwardOutput<f32> {
    pub fn segmentation_output(&self) -> Result<SegmentationOutput> {
        SegmentationOutput::new(self.segmentation.rows, self.segmentation.cols, self.segmentation.data.clone())
    }

    pub fn latent_code(&self) -> LatentCode {
        let z = &self.latent;
        LatentCode::new(z.channels, z.rows, z.cols, z.data.clone()).expect("non-empty latent")
    }
}
