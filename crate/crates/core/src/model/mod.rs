//! Generator and discriminator networks.
//!
//! The generator encodes the input through three convolutions and a ResNet
//! trunk, then decodes it through two parallel transposed-convolution
//! pipelines: one produces `n_content` RGB content tensors (tanh), the other
//! produces `n_content + 1` attention maps (channel softmax). The output is
//! the attention-weighted sum of the content tensors and the input image, so
//! a background-dominated attention map passes the input through untouched.
//! Gaussian noise can be injected into the last two content layers.
//!
//! The discriminator is a patch classifier: five 4x4 convolutions (three of
//! them stride 2) that map an image to a 2-D map of per-patch realness
//! scores.

pub mod archive;

use ndarray::{Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::conv::{conv_out_size, Conv2d, Conv2dCache, ConvTranspose2d, ConvTranspose2dCache};
use crate::nn::norm::{InstanceNorm, InstanceNormCache};
use crate::nn::ops;
use crate::nn::{ParamSet, ParamView, ParamViewMut};

/// Standard deviation for weight initialization.
pub const INIT_STD: f64 = 0.02;

/// Gaussian noise injection settings for the content pipeline.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct NoiseSpec {
    pub enabled: bool,
    /// Std of the noise added to the second content-generating layer output.
    pub std_mid: f64,
    /// Std of the noise added to the last content-generating layer output.
    pub std_last: f64,
    /// Base seed for noise draws.
    pub seed: u64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self { enabled: false, std_mid: 1.0, std_last: 0.2, seed: 0 }
    }
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        if self.std_mid < 0.0 || self.std_last < 0.0 {
            return Err(Error::InvalidConfig("noise stds must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct GeneratorConfig {
    pub input_size: usize,
    pub base_channels: usize,
    pub n_resnet_blocks: usize,
    /// Number of foreground content tensors; the attention pipeline produces
    /// one extra map for the input image.
    pub n_content: usize,
    pub noise: NoiseSpec,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            input_size: 256,
            base_channels: 64,
            n_resnet_blocks: 9,
            n_content: 2,
            noise: NoiseSpec::default(),
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || self.input_size % 4 != 0 {
            return Err(Error::InvalidConfig(format!(
                "input_size {} must be a positive multiple of 4",
                self.input_size
            )));
        }
        if self.n_resnet_blocks < 1 {
            return Err(Error::InvalidConfig("n_resnet_blocks must be >= 1".into()));
        }
        if self.n_content < 1 {
            return Err(Error::InvalidConfig("n_content must be >= 1".into()));
        }
        if self.base_channels < 1 {
            return Err(Error::InvalidConfig("base_channels must be >= 1".into()));
        }
        self.noise.validate()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct DiscriminatorConfig {
    pub base_channels: usize,
    /// Number of stride-2 stages. The full model uses 3; tiny inputs in
    /// reduced test harnesses need fewer.
    pub n_layers: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self { base_channels: 64, n_layers: 3 }
    }
}

struct ResnetBlock {
    conv1: Conv2d,
    in1: InstanceNorm,
    conv2: Conv2d,
    in2: InstanceNorm,
}

struct ResnetBlockCache {
    hw: (usize, usize),
    c1: Conv2dCache,
    n1: InstanceNormCache,
    r1: Array4<f64>,
    c2: Conv2dCache,
    n2: InstanceNormCache,
}

impl ResnetBlock {
    fn new(ch: usize) -> Self {
        Self {
            conv1: Conv2d::new(ch, ch, 3, 1, 0),
            in1: InstanceNorm::new(ch),
            conv2: Conv2d::new(ch, ch, 3, 1, 0),
            in2: InstanceNorm::new(ch),
        }
    }

    fn init(&mut self, rng: &mut ChaCha20Rng) {
        self.conv1.init(INIT_STD, rng);
        self.conv2.init(INIT_STD, rng);
    }

    fn forward(&self, x: &Array4<f64>) -> (Array4<f64>, ResnetBlockCache) {
        let (_, _, h, w) = x.dim();
        let p1 = ops::reflection_pad(x, 1);
        let (y1, c1) = self.conv1.forward(&p1);
        let (y2, n1) = self.in1.forward(&y1);
        let (y3, r1) = ops::relu(&y2);
        let p2 = ops::reflection_pad(&y3, 1);
        let (y4, c2) = self.conv2.forward(&p2);
        let (y5, n2) = self.in2.forward(&y4);
        let out = &y5 + x;
        (out, ResnetBlockCache { hw: (h, w), c1, n1, r1, c2, n2 })
    }

    fn backward(&mut self, cache: &ResnetBlockCache, gy: &Array4<f64>) -> Array4<f64> {
        let g = self.in2.backward(&cache.n2, gy);
        let g = self.conv2.backward(&cache.c2, &g);
        let g = ops::reflection_pad_backward(&g, 1, cache.hw);
        let g = ops::relu_backward(&cache.r1, &g);
        let g = self.in1.backward(&cache.n1, &g);
        let g = self.conv1.backward(&cache.c1, &g);
        let g = ops::reflection_pad_backward(&g, 1, cache.hw);
        g + gy
    }
}

/// Output of one generator forward pass.
pub struct GeneratorOutput {
    /// Final composed image batch, `[N, 3, H, W]`.
    pub output: Array4<f64>,
    /// Content tensors, `[N, 3 * n_content, H, W]` (tanh range).
    pub contents: Array4<f64>,
    /// Attention maps, `[N, n_content + 1, H, W]`; the last channel weights
    /// the input image (background).
    pub attentions: Array4<f64>,
}

impl GeneratorOutput {
    pub fn n_content(&self) -> usize {
        self.attentions.dim().1 - 1
    }
}

pub struct GeneratorCache {
    x: Array4<f64>,
    enc_c1: Conv2dCache,
    enc_n1: InstanceNormCache,
    enc_r1: Array4<f64>,
    enc_c2: Conv2dCache,
    enc_n2: InstanceNormCache,
    enc_r2: Array4<f64>,
    enc_c3: Conv2dCache,
    enc_n3: InstanceNormCache,
    enc_r3: Array4<f64>,
    blocks: Vec<ResnetBlockCache>,
    con_t1: ConvTranspose2dCache,
    con_n1: InstanceNormCache,
    con_r1: Array4<f64>,
    con_t2: ConvTranspose2dCache,
    con_n2: InstanceNormCache,
    con_r2: Array4<f64>,
    con_t3: ConvTranspose2dCache,
    con_tanh: Array4<f64>,
    att_t1: ConvTranspose2dCache,
    att_n1: InstanceNormCache,
    att_r1: Array4<f64>,
    att_t2: ConvTranspose2dCache,
    att_n2: InstanceNormCache,
    att_r2: Array4<f64>,
    att_t3: ConvTranspose2dCache,
    att_n3: InstanceNormCache,
    att_softmax: Array4<f64>,
    contents: Array4<f64>,
    attentions: Array4<f64>,
}

pub struct Generator {
    pub n_content: usize,
    enc_conv1: Conv2d,
    enc_in1: InstanceNorm,
    enc_conv2: Conv2d,
    enc_in2: InstanceNorm,
    enc_conv3: Conv2d,
    enc_in3: InstanceNorm,
    blocks: Vec<ResnetBlock>,
    con_tc1: ConvTranspose2d,
    con_in1: InstanceNorm,
    con_tc2: ConvTranspose2d,
    con_in2: InstanceNorm,
    con_tc3: ConvTranspose2d,
    att_tc1: ConvTranspose2d,
    att_in1: InstanceNorm,
    att_tc2: ConvTranspose2d,
    att_in2: InstanceNorm,
    att_tc3: ConvTranspose2d,
    att_in3: InstanceNorm,
}

impl Generator {
    pub fn new(cfg: &GeneratorConfig) -> Result<Self> {
        cfg.validate()?;
        let b = cfg.base_channels;
        let trunk = 4 * b;
        let blocks = (0..cfg.n_resnet_blocks).map(|_| ResnetBlock::new(trunk)).collect();
        Ok(Self {
            n_content: cfg.n_content,
            enc_conv1: Conv2d::new(3, b, 7, 1, 0),
            enc_in1: InstanceNorm::new(b),
            enc_conv2: Conv2d::new(b, 2 * b, 3, 2, 1),
            enc_in2: InstanceNorm::new(2 * b),
            enc_conv3: Conv2d::new(2 * b, trunk, 3, 2, 1),
            enc_in3: InstanceNorm::new(trunk),
            blocks,
            con_tc1: ConvTranspose2d::new(trunk, 2 * b, 3, 2, 1, 1),
            con_in1: InstanceNorm::new(2 * b),
            con_tc2: ConvTranspose2d::new(2 * b, b, 3, 2, 1, 1),
            con_in2: InstanceNorm::new(b),
            con_tc3: ConvTranspose2d::new(b, 3 * cfg.n_content, 7, 1, 3, 0),
            att_tc1: ConvTranspose2d::new(trunk, 2 * b, 3, 2, 1, 1),
            att_in1: InstanceNorm::new(2 * b),
            att_tc2: ConvTranspose2d::new(2 * b, b, 3, 2, 1, 1),
            att_in2: InstanceNorm::new(b),
            att_tc3: ConvTranspose2d::new(b, cfg.n_content + 1, 7, 1, 3, 0),
            att_in3: InstanceNorm::new_non_affine(cfg.n_content + 1),
        })
    }

    /// Draws every convolution weight from `N(0, 0.02)`; biases start at zero
    /// and norm scales at one. Draw order is declaration order, so a fixed
    /// seed reproduces the exact parameter tensors.
    pub fn init(&mut self, rng: &mut ChaCha20Rng) {
        self.enc_conv1.init(INIT_STD, rng);
        self.enc_conv2.init(INIT_STD, rng);
        self.enc_conv3.init(INIT_STD, rng);
        for blk in &mut self.blocks {
            blk.init(rng);
        }
        self.con_tc1.init(INIT_STD, rng);
        self.con_tc2.init(INIT_STD, rng);
        self.con_tc3.init(INIT_STD, rng);
        self.att_tc1.init(INIT_STD, rng);
        self.att_tc2.init(INIT_STD, rng);
        self.att_tc3.init(INIT_STD, rng);
    }

    pub fn forward(
        &self,
        x: &Array4<f64>,
        noise: &NoiseSpec,
        noise_seed: u64,
    ) -> (GeneratorOutput, GeneratorCache) {
        let (_, c, h, w) = x.dim();
        assert_eq!(c, 3, "generator expects RGB input");
        assert!(h % 4 == 0 && w % 4 == 0, "spatial size must be a multiple of 4");

        let p0 = ops::reflection_pad(x, 3);
        let (y, enc_c1) = self.enc_conv1.forward(&p0);
        let (y, enc_n1) = self.enc_in1.forward(&y);
        let (y, enc_r1) = ops::relu(&y);
        let (y, enc_c2) = self.enc_conv2.forward(&y);
        let (y, enc_n2) = self.enc_in2.forward(&y);
        let (y, enc_r2) = ops::relu(&y);
        let (y, enc_c3) = self.enc_conv3.forward(&y);
        let (y, enc_n3) = self.enc_in3.forward(&y);
        let (mut t, enc_r3) = ops::relu(&y);

        let mut blocks = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            let (out, cache) = blk.forward(&t);
            t = out;
            blocks.push(cache);
        }

        let mut noise_rng = ChaCha20Rng::seed_from_u64(noise_seed);

        // Content pipeline. Noise is added to the raw outputs of the second
        // and third transposed convolutions, before the norm / activation
        // that follows each.
        let (y, con_t1) = self.con_tc1.forward(&t);
        let (y, con_n1) = self.con_in1.forward(&y);
        let (y, con_r1) = ops::relu(&y);
        let (mut y, con_t2) = self.con_tc2.forward(&y);
        if noise.enabled {
            y = ops::add_noise(&y, &gaussian_like(&y, noise.std_mid, &mut noise_rng));
        }
        let (y, con_n2) = self.con_in2.forward(&y);
        let (y, con_r2) = ops::relu(&y);
        let (mut y, con_t3) = self.con_tc3.forward(&y);
        if noise.enabled {
            y = ops::add_noise(&y, &gaussian_like(&y, noise.std_last, &mut noise_rng));
        }
        let (contents, con_tanh) = ops::tanh(&y);

        // Attention pipeline: mirror stack ending in a channel softmax. The
        // final norm has no learnable affine so the softmax logits are only
        // standardized, never rescaled.
        let (y, att_t1) = self.att_tc1.forward(&t);
        let (y, att_n1) = self.att_in1.forward(&y);
        let (y, att_r1) = ops::relu(&y);
        let (y, att_t2) = self.att_tc2.forward(&y);
        let (y, att_n2) = self.att_in2.forward(&y);
        let (y, att_r2) = ops::relu(&y);
        let (y, att_t3) = self.att_tc3.forward(&y);
        let (y, att_n3) = self.att_in3.forward(&y);
        let (attentions, att_softmax) = ops::softmax_channels(&y);

        let output = compose(x, &contents, &attentions);

        let out = GeneratorOutput {
            output,
            contents: contents.clone(),
            attentions: attentions.clone(),
        };
        let cache = GeneratorCache {
            x: x.clone(),
            enc_c1,
            enc_n1,
            enc_r1,
            enc_c2,
            enc_n2,
            enc_r2,
            enc_c3,
            enc_n3,
            enc_r3,
            blocks,
            con_t1,
            con_n1,
            con_r1,
            con_t2,
            con_n2,
            con_r2,
            con_t3,
            con_tanh,
            att_t1,
            att_n1,
            att_r1,
            att_t2,
            att_n2,
            att_r2,
            att_t3,
            att_n3,
            att_softmax,
            contents,
            attentions,
        };
        (out, cache)
    }

    /// Backpropagates `g_out` through the whole generator, accumulating
    /// parameter gradients and returning the gradient w.r.t. the input.
    pub fn backward(&mut self, cache: &GeneratorCache, g_out: &Array4<f64>) -> Array4<f64> {
        let n_content = self.n_content;
        let (g_contents, g_attn, g_x_direct) =
            compose_backward(&cache.x, &cache.contents, &cache.attentions, g_out, n_content);

        // Content pipeline, reverse order. Noise adds pass gradients through.
        let g = ops::tanh_backward(&cache.con_tanh, &g_contents);
        let g = self.con_tc3.backward(&cache.con_t3, &g);
        let g = ops::relu_backward(&cache.con_r2, &g);
        let g = self.con_in2.backward(&cache.con_n2, &g);
        let g = self.con_tc2.backward(&cache.con_t2, &g);
        let g = ops::relu_backward(&cache.con_r1, &g);
        let g = self.con_in1.backward(&cache.con_n1, &g);
        let g_trunk_content = self.con_tc1.backward(&cache.con_t1, &g);

        // Attention pipeline.
        let g = ops::softmax_channels_backward(&cache.att_softmax, &g_attn);
        let g = self.att_in3.backward(&cache.att_n3, &g);
        let g = self.att_tc3.backward(&cache.att_t3, &g);
        let g = ops::relu_backward(&cache.att_r2, &g);
        let g = self.att_in2.backward(&cache.att_n2, &g);
        let g = self.att_tc2.backward(&cache.att_t2, &g);
        let g = ops::relu_backward(&cache.att_r1, &g);
        let g = self.att_in1.backward(&cache.att_n1, &g);
        let g_trunk_attn = self.att_tc1.backward(&cache.att_t1, &g);

        let mut g = g_trunk_content + g_trunk_attn;
        for (blk, bc) in self.blocks.iter_mut().zip(cache.blocks.iter()).rev() {
            g = blk.backward(bc, &g);
        }

        let g = ops::relu_backward(&cache.enc_r3, &g);
        let g = self.enc_in3.backward(&cache.enc_n3, &g);
        let g = self.enc_conv3.backward(&cache.enc_c3, &g);
        let g = ops::relu_backward(&cache.enc_r2, &g);
        let g = self.enc_in2.backward(&cache.enc_n2, &g);
        let g = self.enc_conv2.backward(&cache.enc_c2, &g);
        let g = ops::relu_backward(&cache.enc_r1, &g);
        let g = self.enc_in1.backward(&cache.enc_n1, &g);
        let g = self.enc_conv1.backward(&cache.enc_c1, &g);
        let (_, _, h, w) = cache.x.dim();
        let g_x_enc = ops::reflection_pad_backward(&g, 3, (h, w));

        g_x_enc + g_x_direct
    }

    /// Forward pass without keeping the backward cache.
    pub fn infer(&self, x: &Array4<f64>, noise: &NoiseSpec, noise_seed: u64) -> GeneratorOutput {
        self.forward(x, noise, noise_seed).0
    }
}

/// `output = sum_i contents_i * attn_i + x * attn_bg`, with the background
/// map in the last attention channel broadcast over RGB.
pub fn compose(x: &Array4<f64>, contents: &Array4<f64>, attentions: &Array4<f64>) -> Array4<f64> {
    let (n, c3, h, w) = contents.dim();
    let n_content = c3 / 3;
    let (_, na, _, _) = attentions.dim();
    assert_eq!(na, n_content + 1, "attention channels must be n_content + 1");
    let mut out = Array4::<f64>::zeros((n, 3, h, w));
    for ni in 0..n {
        for ch in 0..3 {
            for i in 0..h {
                for j in 0..w {
                    let mut acc = 0.0;
                    for k in 0..n_content {
                        acc += contents[[ni, 3 * k + ch, i, j]] * attentions[[ni, k, i, j]];
                    }
                    acc += x[[ni, ch, i, j]] * attentions[[ni, n_content, i, j]];
                    out[[ni, ch, i, j]] = acc;
                }
            }
        }
    }
    out
}

fn compose_backward(
    x: &Array4<f64>,
    contents: &Array4<f64>,
    attentions: &Array4<f64>,
    g_out: &Array4<f64>,
    n_content: usize,
) -> (Array4<f64>, Array4<f64>, Array4<f64>) {
    let (n, _, h, w) = g_out.dim();
    let mut g_contents = Array4::<f64>::zeros(contents.raw_dim());
    let mut g_attn = Array4::<f64>::zeros(attentions.raw_dim());
    let mut g_x = Array4::<f64>::zeros(x.raw_dim());
    for ni in 0..n {
        for ch in 0..3 {
            for i in 0..h {
                for j in 0..w {
                    let g = g_out[[ni, ch, i, j]];
                    for k in 0..n_content {
                        g_contents[[ni, 3 * k + ch, i, j]] = g * attentions[[ni, k, i, j]];
                        g_attn[[ni, k, i, j]] += g * contents[[ni, 3 * k + ch, i, j]];
                    }
                    g_attn[[ni, n_content, i, j]] += g * x[[ni, ch, i, j]];
                    g_x[[ni, ch, i, j]] = g * attentions[[ni, n_content, i, j]];
                }
            }
        }
    }
    (g_contents, g_attn, g_x)
}

fn gaussian_like(x: &Array4<f64>, std: f64, rng: &mut ChaCha20Rng) -> Array4<f64> {
    let dist = Normal::new(0.0, 1.0).unwrap();
    ndarray::Array::from_shape_simple_fn(x.raw_dim(), || dist.sample(rng) * std)
}

impl ParamSet for Generator {
    fn for_each_param(&self, f: &mut dyn FnMut(&str, ParamView<'_>)) {
        self.enc_conv1.visit("enc.conv1", f);
        self.enc_in1.visit("enc.in1", f);
        self.enc_conv2.visit("enc.conv2", f);
        self.enc_in2.visit("enc.in2", f);
        self.enc_conv3.visit("enc.conv3", f);
        self.enc_in3.visit("enc.in3", f);
        for (i, blk) in self.blocks.iter().enumerate() {
            blk.conv1.visit(&format!("trunk.block{i}.conv1"), f);
            blk.in1.visit(&format!("trunk.block{i}.in1"), f);
            blk.conv2.visit(&format!("trunk.block{i}.conv2"), f);
            blk.in2.visit(&format!("trunk.block{i}.in2"), f);
        }
        self.con_tc1.visit("content.tc1", f);
        self.con_in1.visit("content.in1", f);
        self.con_tc2.visit("content.tc2", f);
        self.con_in2.visit("content.in2", f);
        self.con_tc3.visit("content.tc3", f);
        self.att_tc1.visit("attn.tc1", f);
        self.att_in1.visit("attn.in1", f);
        self.att_tc2.visit("attn.tc2", f);
        self.att_in2.visit("attn.in2", f);
        self.att_tc3.visit("attn.tc3", f);
    }

    fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&str, ParamViewMut<'_>)) {
        self.enc_conv1.visit_mut("enc.conv1", f);
        self.enc_in1.visit_mut("enc.in1", f);
        self.enc_conv2.visit_mut("enc.conv2", f);
        self.enc_in2.visit_mut("enc.in2", f);
        self.enc_conv3.visit_mut("enc.conv3", f);
        self.enc_in3.visit_mut("enc.in3", f);
        for (i, blk) in self.blocks.iter_mut().enumerate() {
            blk.conv1.visit_mut(&format!("trunk.block{i}.conv1"), f);
            blk.in1.visit_mut(&format!("trunk.block{i}.in1"), f);
            blk.conv2.visit_mut(&format!("trunk.block{i}.conv2"), f);
            blk.in2.visit_mut(&format!("trunk.block{i}.in2"), f);
        }
        self.con_tc1.visit_mut("content.tc1", f);
        self.con_in1.visit_mut("content.in1", f);
        self.con_tc2.visit_mut("content.tc2", f);
        self.con_in2.visit_mut("content.in2", f);
        self.con_tc3.visit_mut("content.tc3", f);
        self.att_tc1.visit_mut("attn.tc1", f);
        self.att_in1.visit_mut("attn.in1", f);
        self.att_tc2.visit_mut("attn.tc2", f);
        self.att_in2.visit_mut("attn.in2", f);
        self.att_tc3.visit_mut("attn.tc3", f);
    }
}

pub struct Discriminator {
    c1: Conv2d,
    c2: Conv2d,
    in2: InstanceNorm,
    c3: Conv2d,
    in3: InstanceNorm,
    c4: Conv2d,
    in4: InstanceNorm,
    c5: Conv2d,
}

pub struct DiscriminatorCache {
    c1: Conv2dCache,
    l1: Array4<f64>,
    c2: Conv2dCache,
    n2: InstanceNormCache,
    l2: Array4<f64>,
    c3: Conv2dCache,
    n3: InstanceNormCache,
    l3: Array4<f64>,
    c4: Conv2dCache,
    n4: InstanceNormCache,
    l4: Array4<f64>,
    c5: Conv2dCache,
}

const LEAKY_SLOPE: f64 = 0.2;

impl Discriminator {
    pub fn new(cfg: &DiscriminatorConfig) -> Self {
        let b = cfg.base_channels;
        Self {
            c1: Conv2d::new(3, b, 4, 2, 1),
            c2: Conv2d::new(b, 2 * b, 4, 2, 1),
            in2: InstanceNorm::new(2 * b),
            c3: Conv2d::new(2 * b, 4 * b, 4, 2, 1),
            in3: InstanceNorm::new(4 * b),
            c4: Conv2d::new(4 * b, 8 * b, 4, 1, 1),
            in4: InstanceNorm::new(8 * b),
            c5: Conv2d::new(8 * b, 1, 4, 1, 1),
        }
    }

    pub fn init(&mut self, rng: &mut ChaCha20Rng) {
        self.c1.init(INIT_STD, rng);
        self.c2.init(INIT_STD, rng);
        self.c3.init(INIT_STD, rng);
        self.c4.init(INIT_STD, rng);
        self.c5.init(INIT_STD, rng);
    }

    /// Maps `[N, 3, H, W]` to a `[N, 1, H', W']` patch score map.
    pub fn forward(&self, x: &Array4<f64>) -> (Array4<f64>, DiscriminatorCache) {
        let (y, c1) = self.c1.forward(x);
        let (y, l1) = ops::leaky_relu(&y, LEAKY_SLOPE);
        let (y, c2) = self.c2.forward(&y);
        let (y, n2) = self.in2.forward(&y);
        let (y, l2) = ops::leaky_relu(&y, LEAKY_SLOPE);
        let (y, c3) = self.c3.forward(&y);
        let (y, n3) = self.in3.forward(&y);
        let (y, l3) = ops::leaky_relu(&y, LEAKY_SLOPE);
        let (y, c4) = self.c4.forward(&y);
        let (y, n4) = self.in4.forward(&y);
        let (y, l4) = ops::leaky_relu(&y, LEAKY_SLOPE);
        let (y, c5) = self.c5.forward(&y);
        (y, DiscriminatorCache { c1, l1, c2, n2, l2, c3, n3, l3, c4, n4, l4, c5 })
    }

    pub fn backward(&mut self, cache: &DiscriminatorCache, gy: &Array4<f64>) -> Array4<f64> {
        let g = self.c5.backward(&cache.c5, gy);
        let g = ops::leaky_relu_backward(&cache.l4, &g, LEAKY_SLOPE);
        let g = self.in4.backward(&cache.n4, &g);
        let g = self.c4.backward(&cache.c4, &g);
        let g = ops::leaky_relu_backward(&cache.l3, &g, LEAKY_SLOPE);
        let g = self.in3.backward(&cache.n3, &g);
        let g = self.c3.backward(&cache.c3, &g);
        let g = ops::leaky_relu_backward(&cache.l2, &g, LEAKY_SLOPE);
        let g = self.in2.backward(&cache.n2, &g);
        let g = self.c2.backward(&cache.c2, &g);
        let g = ops::leaky_relu_backward(&cache.l1, &g, LEAKY_SLOPE);
        self.c1.backward(&cache.c1, &g)
    }

    pub fn infer(&self, x: &Array4<f64>) -> Array4<f64> {
        self.forward(x).0
    }
}

impl ParamSet for Discriminator {
    fn for_each_param(&self, f: &mut dyn FnMut(&str, ParamView<'_>)) {
        self.c1.visit("conv1", f);
        self.c2.visit("conv2", f);
        self.in2.visit("in2", f);
        self.c3.visit("conv3", f);
        self.in3.visit("in3", f);
        self.c4.visit("conv4", f);
        self.in4.visit("in4", f);
        self.c5.visit("conv5", f);
    }

    fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&str, ParamViewMut<'_>)) {
        self.c1.visit_mut("conv1", f);
        self.c2.visit_mut("conv2", f);
        self.in2.visit_mut("in2", f);
        self.c3.visit_mut("conv3", f);
        self.in3.visit_mut("in3", f);
        self.c4.visit_mut("conv4", f);
        self.in4.visit_mut("in4", f);
        self.c5.visit_mut("conv5", f);
    }
}

/// Expected patch-score-map extent for a square input of side `n`:
/// the five discriminator convolutions composed.
pub fn patch_map_size(n: usize) -> usize {
    let mut s = n;
    for &(k, stride, p) in &[(4, 2, 1), (4, 2, 1), (4, 2, 1), (4, 1, 1), (4, 1, 1)] {
        s = conv_out_size(s, k, stride, p);
    }
    s
}

/// Builds a freshly initialized generator/discriminator pair from one seed.
pub fn init_params(
    gen_cfg: &GeneratorConfig,
    disc_cfg: &DiscriminatorConfig,
    rng_seed: u64,
) -> Result<(Generator, Discriminator)> {
    let mut rng = ChaCha20Rng::seed_from_u64(rng_seed);
    let mut gen = Generator::new(gen_cfg)?;
    gen.init(&mut rng);
    let mut disc = Discriminator::new(disc_cfg);
    disc.init(&mut rng);
    Ok((gen, disc))
}

/// Converts a slice of images (HWC, model domain) into an `[N, 3, H, W]` batch.
pub fn images_to_batch(images: &[&crate::image_core::ImageTensor]) -> Array4<f64> {
    assert!(!images.is_empty());
    let (h, w) = (images[0].height(), images[0].width());
    let mut batch = Array4::<f64>::zeros((images.len(), 3, h, w));
    for (n, img) in images.iter().enumerate() {
        assert_eq!((img.height(), img.width()), (h, w), "batch images must share size");
        let data = img.data();
        for i in 0..h {
            for j in 0..w {
                for c in 0..3 {
                    batch[[n, c, i, j]] = data[[i, j, c]];
                }
            }
        }
    }
    batch
}

/// Converts one sample of an `[N, 3, H, W]` batch back into an HWC image.
/// Values are clamped into `[-1, 1]`; noise can push raw outputs slightly out.
pub fn batch_to_image(batch: &Array4<f64>, n: usize) -> crate::image_core::ImageTensor {
    let (_, _, h, w) = batch.dim();
    let plane = batch.index_axis(Axis(0), n);
    let mut data = ndarray::Array3::<f64>::zeros((h, w, 3));
    for i in 0..h {
        for j in 0..w {
            for c in 0..3 {
                data[[i, j, c]] = plane[[c, i, j]].clamp(-1.0, 1.0);
            }
        }
    }
    crate::image_core::ImageTensor::from_raw(data)
}
