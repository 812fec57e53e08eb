//! Encoder, decoder and discriminator networks.
//!
//! * Encoder: `encoder_blocks` conv-BN-ReLU blocks on the cover image, then
//!   the message (each bit replicated over the image plane), the features and
//!   the cover are concatenated, followed by `encoder_post_blocks` more blocks
//!   and a 1×1 convolution to three channels. The output is clamped to
//!   `[0, 1]`; the clamp passes gradients straight through.
//! * Decoder: `decoder_blocks` blocks, global average pooling and a linear
//!   layer to the message length, so any input size works.
//! * Discriminator: `discriminator_blocks` blocks, global average pooling, a
//!   linear layer to one logit and a sigmoid.
//!
//! Kernels are initialised uniformly with fan-in scaling, biases at zero and
//! normalization scales/shifts at one/zero.

mod checkpoint;

pub use checkpoint::{inspect_checkpoint, load_checkpoint, save_checkpoint, CheckpointManifest, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};

use crate::config::ArchConfig;
use crate::error::{Error, Result};
use crate::nn::layers::{
    global_avg_pool, global_avg_pool_backward, sigmoid, Conv2d, ConvBlock, ConvBlockCache, Init, Linear,
};
use crate::nn::{NormMode, ParamStore};
use crate::rng::RngState;
use crate::tensor::{Real, Tensor};
use crate::types::{DecodedBatch, ImageBatch, ImageRole, MessageBatch, MIN_SPATIAL};

#[allow(clippy::too_many_arguments)]
fn make_blocks<T: Real>(
    params: &mut ParamStore<T>,
    buffers: &mut ParamStore<T>,
    prefix: &str,
    cin: usize,
    width: usize,
    count: usize,
    arch: &ArchConfig,
    rng: &mut RngState,
) -> Vec<ConvBlock> {
    (0..count)
        .map(|i| {
            ConvBlock::new(
                params,
                buffers,
                &format!("{prefix}.{i}"),
                if i == 0 { cin } else { width },
                width,
                arch.bn_eps,
                arch.bn_momentum,
                rng,
            )
        })
        .collect()
}

fn run_blocks<T: Real>(
    blocks: &[ConvBlock],
    p: &ParamStore<T>,
    b: &ParamStore<T>,
    mut x: Tensor<T>,
    mode: NormMode,
) -> Vec<ConvBlockCache<T>> {
    let mut caches = Vec::with_capacity(blocks.len());
    for block in blocks {
        let cache = block.forward(p, b, x, mode);
        x = cache.output().clone();
        caches.push(cache);
    }
    caches
}

fn backprop_blocks<T: Real>(
    blocks: &[ConvBlock],
    p: &ParamStore<T>,
    g: &mut ParamStore<T>,
    caches: &[ConvBlockCache<T>],
    mut gy: Tensor<T>,
    need_input_grad: bool,
) -> Option<Tensor<T>> {
    for (i, (block, cache)) in blocks.iter().zip(caches).enumerate().rev() {
        gy = block.backward(p, g, cache, gy, i > 0 || need_input_grad)?;
    }
    Some(gy)
}

fn update_block_stats<T: Real>(blocks: &[ConvBlock], buffers: &mut ParamStore<T>, caches: &[ConvBlockCache<T>]) {
    for (block, cache) in blocks.iter().zip(caches) {
        block.bn.update_running(buffers, cache.bn_cache());
    }
}

/// Writes `(features, message planes, cover)` along the channel axis.
fn concat_message<T: Real>(features: &Tensor<T>, m: &Tensor<T>, cover: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = features.dims4();
    let l = m.dims2().1;
    let hw = h * w;
    let total = c + l + 3;
    let mut out = Tensor::zeros(&[n, total, h, w]);
    for i in 0..n {
        let dst = &mut out.data_mut()[i * total * hw..(i + 1) * total * hw];
        dst[..c * hw].copy_from_slice(&features.data()[i * c * hw..(i + 1) * c * hw]);
        for j in 0..l {
            dst[(c + j) * hw..(c + j + 1) * hw].fill(m.data()[i * l + j]);
        }
        dst[(c + l) * hw..].copy_from_slice(&cover.data()[i * 3 * hw..(i + 1) * 3 * hw]);
    }
    out
}

fn split_feature_grad<T: Real>(g: &Tensor<T>, c: usize) -> Tensor<T> {
    let (n, total, h, w) = g.dims4();
    let hw = h * w;
    let mut out = Tensor::zeros(&[n, c, h, w]);
    for i in 0..n {
        out.data_mut()[i * c * hw..(i + 1) * c * hw]
            .copy_from_slice(&g.data()[i * total * hw..i * total * hw + c * hw]);
    }
    out
}

#[derive(Clone, Debug)]
pub struct Encoder<T = f32> {
    pub params: ParamStore<T>,
    pub buffers: ParamStore<T>,
    pre: Vec<ConvBlock>,
    post: Vec<ConvBlock>,
    out: Conv2d,
    channels: usize,
    message_length: usize,
}

#[derive(Clone, Debug)]
pub struct EncoderCache<T> {
    pre: Vec<ConvBlockCache<T>>,
    post: Vec<ConvBlockCache<T>>,
}

impl<T: Real> Encoder<T> {
    pub fn new(arch: &ArchConfig, rng: &mut RngState) -> Self {
        let mut params = ParamStore::new();
        let mut buffers = ParamStore::new();
        let c = arch.channels;
        let l = arch.message_length;
        let pre = make_blocks(&mut params, &mut buffers, "encoder.pre", 3, c, arch.encoder_blocks, arch, rng);
        let post = make_blocks(
            &mut params,
            &mut buffers,
            "encoder.post",
            c + l + 3,
            c,
            arch.encoder_post_blocks,
            arch,
            rng,
        );
        let out = Conv2d::new(&mut params, "encoder.out", c, 3, 1, 1, 0, Init::Linear, rng);
        // start at mid-gray rather than on the clamp's lower edge
        params.get_mut(out.bias).fill(T::lit(0.5));
        Encoder {
            params,
            buffers,
            pre,
            post,
            out,
            channels: c,
            message_length: l,
        }
    }

    pub fn param_count(arch: &ArchConfig) -> usize {
        let (c, l) = (arch.channels, arch.message_length);
        ConvBlock::param_count(3, c)
            + (arch.encoder_blocks - 1) * ConvBlock::param_count(c, c)
            + ConvBlock::param_count(c + l + 3, c)
            + (arch.encoder_post_blocks - 1) * ConvBlock::param_count(c, c)
            + Conv2d::param_count(c, 3, 1)
    }

    /// Watermarked images (clamped to `[0, 1]`) and the activations needed by
    /// [`Encoder::backward`].
    pub fn forward(&self, cover: &Tensor<T>, m: &Tensor<T>, mode: NormMode) -> Result<(Tensor<T>, EncoderCache<T>)> {
        let (n, c, _, _) = cover.dims4();
        let (mn, l) = m.dims2();
        if c != 3 || mn != n || l != self.message_length {
            return Err(Error::contract(format!(
                "encoder expects (b, 3, h, w) images and (b, {}) messages, got {:?} and {:?}",
                self.message_length,
                cover.shape(),
                m.shape()
            )));
        }
        let pre = run_blocks(&self.pre, &self.params, &self.buffers, cover.clone(), mode);
        let joined = concat_message(pre.last().expect("encoder has blocks").output(), m, cover);
        let post = run_blocks(&self.post, &self.params, &self.buffers, joined, mode);
        let mut y = self.out.forward(&self.params, post.last().expect("encoder has blocks").output());
        let (lo, hi) = (T::zero(), T::one());
        y.data_mut().iter_mut().for_each(|v| *v = v.max(lo).min(hi));
        Ok((y, EncoderCache { pre, post }))
    }

    /// Accumulates parameter gradients given the gradient w.r.t. the
    /// (clamped) output; the clamp is treated as identity.
    pub fn backward(&self, cache: &EncoderCache<T>, g_out: &Tensor<T>, grads: &mut ParamStore<T>) {
        let last_post = cache.post.last().expect("encoder has blocks").output();
        let g = self
            .out
            .backward(&self.params, grads, last_post, g_out, true)
            .expect("input grad requested");
        let g_joined = backprop_blocks(&self.post, &self.params, grads, &cache.post, g, true)
            .expect("input grad requested");
        let g_features = split_feature_grad(&g_joined, self.channels);
        backprop_blocks(&self.pre, &self.params, grads, &cache.pre, g_features, false);
    }

    pub fn update_running(&mut self, cache: &EncoderCache<T>) {
        update_block_stats(&self.pre, &mut self.buffers, &cache.pre);
        update_block_stats(&self.post, &mut self.buffers, &cache.post);
    }
}

#[derive(Clone, Debug)]
pub struct Decoder<T = f32> {
    pub params: ParamStore<T>,
    pub buffers: ParamStore<T>,
    blocks: Vec<ConvBlock>,
    head: Linear,
}

#[derive(Clone, Debug)]
pub struct DecoderCache<T> {
    blocks: Vec<ConvBlockCache<T>>,
    pooled: Tensor<T>,
}

impl<T: Real> Decoder<T> {
    pub fn new(arch: &ArchConfig, rng: &mut RngState) -> Self {
        let mut params = ParamStore::new();
        let mut buffers = ParamStore::new();
        let blocks = make_blocks(
            &mut params,
            &mut buffers,
            "decoder.blocks",
            3,
            arch.channels,
            arch.decoder_blocks,
            arch,
            rng,
        );
        let head = Linear::new(&mut params, "decoder.head", arch.channels, arch.message_length, rng);
        Decoder {
            params,
            buffers,
            blocks,
            head,
        }
    }

    pub fn param_count(arch: &ArchConfig) -> usize {
        let c = arch.channels;
        ConvBlock::param_count(3, c)
            + (arch.decoder_blocks - 1) * ConvBlock::param_count(c, c)
            + Linear::param_count(c, arch.message_length)
    }

    pub fn message_length(&self) -> usize {
        self.head.dout
    }

    pub fn forward(&self, x: &Tensor<T>, mode: NormMode) -> Result<(Tensor<T>, DecoderCache<T>)> {
        let (_, c, h, w) = x.dims4();
        if c != 3 || h < MIN_SPATIAL || w < MIN_SPATIAL {
            return Err(Error::contract(format!(
                "decoder needs (b, 3, h, w) with sides >= {MIN_SPATIAL}, got {:?}",
                x.shape()
            )));
        }
        let blocks = run_blocks(&self.blocks, &self.params, &self.buffers, x.clone(), mode);
        let pooled = global_avg_pool(blocks.last().expect("decoder has blocks").output());
        let y = self.head.forward(&self.params, &pooled);
        Ok((y, DecoderCache { blocks, pooled }))
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&self, cache: &DecoderCache<T>, g_out: &Tensor<T>, grads: &mut ParamStore<T>) -> Tensor<T> {
        let g_pooled = self.head.backward(&self.params, grads, &cache.pooled, g_out);
        let last = cache.blocks.last().expect("decoder has blocks").output();
        let g = global_avg_pool_backward(&g_pooled, last.shape());
        backprop_blocks(&self.blocks, &self.params, grads, &cache.blocks, g, true).expect("input grad requested")
    }

    pub fn update_running(&mut self, cache: &DecoderCache<T>) {
        update_block_stats(&self.blocks, &mut self.buffers, &cache.blocks);
    }
}

#[derive(Clone, Debug)]
pub struct Discriminator<T = f32> {
    pub params: ParamStore<T>,
    pub buffers: ParamStore<T>,
    blocks: Vec<ConvBlock>,
    head: Linear,
}

#[derive(Clone, Debug)]
pub struct DiscriminatorCache<T> {
    blocks: Vec<ConvBlockCache<T>>,
    pooled: Tensor<T>,
    probs: Tensor<T>,
}

impl<T: Real> Discriminator<T> {
    pub fn new(arch: &ArchConfig, rng: &mut RngState) -> Self {
        let mut params = ParamStore::new();
        let mut buffers = ParamStore::new();
        let c = arch.discriminator_channels;
        let blocks = make_blocks(
            &mut params,
            &mut buffers,
            "discriminator.blocks",
            3,
            c,
            arch.discriminator_blocks,
            arch,
            rng,
        );
        let head = Linear::new(&mut params, "discriminator.head", c, 1, rng);
        Discriminator {
            params,
            buffers,
            blocks,
            head,
        }
    }

    pub fn param_count(arch: &ArchConfig) -> usize {
        let c = arch.discriminator_channels;
        ConvBlock::param_count(3, c) + (arch.discriminator_blocks - 1) * ConvBlock::param_count(c, c) + Linear::param_count(c, 1)
    }

    /// Per-image probabilities in `(0, 1)`, shape `(b,)`.
    pub fn forward(&self, x: &Tensor<T>, mode: NormMode) -> Result<(Tensor<T>, DiscriminatorCache<T>)> {
        let (n, c, h, w) = x.dims4();
        if c != 3 || h < MIN_SPATIAL || w < MIN_SPATIAL {
            return Err(Error::contract(format!("discriminator got {:?}", x.shape())));
        }
        let blocks = run_blocks(&self.blocks, &self.params, &self.buffers, x.clone(), mode);
        let pooled = global_avg_pool(blocks.last().expect("discriminator has blocks").output());
        let logits = self.head.forward(&self.params, &pooled);
        let probs = Tensor::from_vec(&[n], logits.data().iter().map(|&z| sigmoid(z)).collect())?;
        Ok((probs.clone(), DiscriminatorCache { blocks, pooled, probs }))
    }

    /// Accumulates parameter gradients from `dL/dC` (shape `(b,)`) and
    /// returns the input gradient.
    pub fn backward(&self, cache: &DiscriminatorCache<T>, g_probs: &Tensor<T>, grads: &mut ParamStore<T>) -> Tensor<T> {
        let n = g_probs.len();
        let g_logits = Tensor::from_fn(&[n, 1], |i| {
            let p = cache.probs.data()[i];
            g_probs.data()[i] * p * (T::one() - p)
        });
        let g_pooled = self.head.backward(&self.params, grads, &cache.pooled, &g_logits);
        let last = cache.blocks.last().expect("discriminator has blocks").output();
        let g = global_avg_pool_backward(&g_pooled, last.shape());
        backprop_blocks(&self.blocks, &self.params, grads, &cache.blocks, g, true).expect("input grad requested")
    }

    pub fn update_running(&mut self, cache: &DiscriminatorCache<T>) {
        update_block_stats(&self.blocks, &mut self.buffers, &cache.blocks);
    }
}

/// All three networks plus the architecture they were built from.
#[derive(Clone, Debug)]
pub struct ModelBundle<T = f32> {
    pub arch: ArchConfig,
    pub encoder: Encoder<T>,
    pub decoder: Decoder<T>,
    pub discriminator: Discriminator<T>,
    pub step: u64,
}

pub fn init_models<T: Real>(arch: &ArchConfig, rng: &mut RngState) -> Result<ModelBundle<T>> {
    arch.validate()?;
    Ok(ModelBundle {
        arch: arch.clone(),
        encoder: Encoder::new(arch, rng),
        decoder: Decoder::new(arch, rng),
        discriminator: Discriminator::new(arch, rng),
        step: 0,
    })
}

impl<T: Real> ModelBundle<T> {
    pub fn param_count(&self) -> usize {
        self.encoder.params.numel() + self.decoder.params.numel() + self.discriminator.params.numel()
    }

    /// Parameter count predicted from the architecture alone.
    pub fn expected_param_count(arch: &ArchConfig) -> usize {
        Encoder::<T>::param_count(arch) + Decoder::<T>::param_count(arch) + Discriminator::<T>::param_count(arch)
    }

    /// `x_wm = E(x, m)` with running normalization statistics.
    pub fn encode(&self, cover: &ImageBatch<T>, m: &MessageBatch) -> Result<ImageBatch<T>> {
        if m.batch_size() != cover.batch_size() || m.length() != self.arch.message_length {
            return Err(Error::contract(format!(
                "message batch ({}, {}) does not fit {} images with length {}",
                m.batch_size(),
                m.length(),
                cover.batch_size(),
                self.arch.message_length
            )));
        }
        let (y, _) = self.encoder.forward(cover.tensor(), &m.to_tensor(), NormMode::Running)?;
        ImageBatch::new(y, ImageRole::Watermarked)
    }

    /// `m̂ = D(x)` with running normalization statistics.
    pub fn decode(&self, x: &ImageBatch<T>) -> Result<DecodedBatch<T>> {
        let (y, _) = self.decoder.forward(x.tensor(), NormMode::Running)?;
        DecodedBatch::new(y)
    }

    /// `C(x)` per image, with running normalization statistics.
    pub fn discriminate(&self, x: &ImageBatch<T>) -> Result<Vec<T>> {
        let (p, _) = self.discriminator.forward(x.tensor(), NormMode::Running)?;
        Ok(p.into_vec())
    }

    /// Every trainable tensor, prefixed by network.
    pub fn named_params(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.encoder
            .params
            .iter()
            .chain(self.decoder.params.iter())
            .chain(self.discriminator.params.iter())
    }

    pub fn named_buffers(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.encoder
            .buffers
            .iter()
            .chain(self.decoder.buffers.iter())
            .chain(self.discriminator.buffers.iter())
    }

    pub fn all_finite(&self) -> bool {
        [&self.encoder.params, &self.decoder.params, &self.discriminator.params]
            .iter()
            .all(|p| p.all_finite())
    }

    pub fn cast<U: Real>(&self) -> ModelBundle<U> {
        ModelBundle {
            arch: self.arch.clone(),
            encoder: Encoder {
                params: self.encoder.params.cast(),
                buffers: self.encoder.buffers.cast(),
                pre: self.encoder.pre.clone(),
                post: self.encoder.post.clone(),
                out: self.encoder.out.clone(),
                channels: self.encoder.channels,
                message_length: self.encoder.message_length,
            },
            decoder: Decoder {
                params: self.decoder.params.cast(),
                buffers: self.decoder.buffers.cast(),
                blocks: self.decoder.blocks.clone(),
                head: self.decoder.head.clone(),
            },
            discriminator: Discriminator {
                params: self.discriminator.params.cast(),
                buffers: self.discriminator.buffers.cast(),
                blocks: self.discriminator.blocks.clone(),
                head: self.discriminator.head.clone(),
            },
            step: self.step,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::make_rng;

    fn micro_arch() -> ArchConfig {
        ArchConfig {
            image_height: 16,
            image_width: 16,
            message_length: 4,
            channels: 4,
            encoder_blocks: 2,
            encoder_post_blocks: 1,
            decoder_blocks: 2,
            discriminator_blocks: 1,
            discriminator_channels: 3,
            ..ArchConfig::default()
        }
    }

    fn images(n: usize, h: usize, w: usize, seed: u64) -> ImageBatch<f32> {
        let mut rng = make_rng(seed);
        ImageBatch::new(Tensor::from_fn(&[n, 3, h, w], |_| rng.uniform() as f32), ImageRole::Cover).unwrap()
    }

    #[test]
    fn init_is_deterministic() {
        let a: ModelBundle<f32> = init_models(&micro_arch(), &mut make_rng(5)).unwrap();
        let b: ModelBundle<f32> = init_models(&micro_arch(), &mut make_rng(5)).unwrap();
        assert_eq!(a.encoder.params, b.encoder.params);
        assert_eq!(a.decoder.params, b.decoder.params);
        assert_eq!(a.discriminator.params, b.discriminator.params);
    }

    #[test]
    fn parameter_count_matches_formula() {
        for arch in [micro_arch(), ArchConfig::default()] {
            let b: ModelBundle<f32> = init_models(&arch, &mut make_rng(0)).unwrap();
            assert_eq!(b.param_count(), ModelBundle::<f32>::expected_param_count(&arch));
        }
        // default architecture by hand: a 3→64 block is 1728+64+128 = 1920,
        // 64→64 is 37056, the 97→64 joint block 56064, the 1×1 head 195.
        // encoder 1920 + 3·37056 + 56064 + 37056 + 195 = 206403
        // decoder 1920 + 6·37056 + 64·30+30           = 226206
        // critic  1920 + 2·37056 + 65                 =  76097
        let b: ModelBundle<f32> = init_models(&ArchConfig::default(), &mut make_rng(0)).unwrap();
        assert_eq!(b.param_count(), 508_706);
    }

    #[test]
    fn decoder_width_follows_message_length() {
        let arch = ArchConfig {
            message_length: 30,
            ..micro_arch()
        };
        let b: ModelBundle<f32> = init_models(&arch, &mut make_rng(1)).unwrap();
        assert_eq!(b.decoder.message_length(), 30);
        for size in [16, 32] {
            assert_eq!(b.decode(&images(2, size, size, 2)).unwrap().length(), 30);
        }
    }

    #[test]
    fn encoder_keeps_shape_and_depends_on_message() {
        let b: ModelBundle<f32> = init_models(&micro_arch(), &mut make_rng(2)).unwrap();
        let x = images(1, 16, 16, 3);
        let m0 = MessageBatch::parse_bits("0000").unwrap();
        let m1 = MessageBatch::parse_bits("1011").unwrap();
        let y0 = b.encode(&x, &m0).unwrap();
        let y1 = b.encode(&x, &m1).unwrap();
        assert_eq!(y0.tensor().shape(), x.tensor().shape());
        let l2: f32 = y0.tensor().data().iter().zip(y1.tensor().data()).map(|(a, b)| (a - b) * (a - b)).sum();
        assert!(l2 > 0.0);
        assert!(b.encode(&x, &MessageBatch::parse_bits("000").unwrap()).is_err());
    }

    #[test]
    fn decoder_on_black_image_is_finite() {
        let b: ModelBundle<f32> = init_models(&micro_arch(), &mut make_rng(3)).unwrap();
        let x = ImageBatch::new(Tensor::zeros(&[1, 3, 16, 16]), ImageRole::Cover).unwrap();
        assert!(b.decode(&x).unwrap().values().all_finite());
    }

    #[test]
    fn discriminator_outputs_probabilities_deterministically() {
        let b: ModelBundle<f32> = init_models(&micro_arch(), &mut make_rng(4)).unwrap();
        let x = images(3, 16, 16, 5);
        let p = b.discriminate(&x).unwrap();
        assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
        assert_eq!(p, b.discriminate(&x).unwrap());
    }
}
