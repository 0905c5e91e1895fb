//! The generator — style extractor, AdaIN encoder, skip-connected decoder —
//! and the multi-scale critic, all as graph builders over a shared
//! [`ParamStore`].

mod discriminator;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::filter_bank::reflect_index;
use crate::image::{images_to_tensor, tensor_to_images, Image};
use crate::params::{Binding, ParamGroup, ParamId, ParamStore};
use crate::patch_sampling::SamplerHeads;
use crate::rng;
use crate::tensor::{Scalar, Tensor};

pub use discriminator::{DiscOutput, Discriminator};

pub const ADAIN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub num_levels: usize,
    /// Encoder width per level.
    pub channels: Vec<usize>,
    pub decoder_blocks: usize,
    /// Sampler embedding width K.
    pub embed_dim: usize,
    /// Number of patch-critic heads (on the deepest trunk outputs).
    pub disc_scales: usize,
    pub style_channels: Vec<usize>,
    /// Critic trunk widths; every trunk layer halves the resolution.
    pub disc_channels: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_levels: 4,
            channels: vec![16, 32, 64, 128],
            decoder_blocks: 6,
            embed_dim: 64,
            disc_scales: 2,
            style_channels: vec![8, 16, 32, 32],
            disc_channels: vec![16, 32, 64, 64],
        }
    }
}

impl ModelConfig {
    /// Tiny configuration used for finite-difference gradient checks.
    pub fn micro() -> Self {
        Self {
            num_levels: 2,
            channels: vec![4, 8],
            decoder_blocks: 6,
            embed_dim: 4,
            disc_scales: 2,
            style_channels: vec![4, 4],
            disc_channels: vec![4, 4, 8],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Err(Error::validation("model config", reason));
        if self.num_levels == 0 || self.channels.len() != self.num_levels {
            return bad(format!("need {} encoder widths, got {:?}", self.num_levels, self.channels));
        }
        if self.decoder_blocks < self.num_levels {
            return bad(format!(
                "{} decoder blocks cannot undo {} downsamplings",
                self.decoder_blocks, self.num_levels
            ));
        }
        let lists = [&self.channels, &self.style_channels, &self.disc_channels];
        if self.embed_dim == 0 || lists.iter().any(|l| l.is_empty() || l.contains(&0)) {
            return bad("all widths must be positive".into());
        }
        if self.disc_scales == 0 || self.disc_scales > self.disc_channels.len() {
            return bad(format!("disc_scales must lie in 1..={}", self.disc_channels.len()));
        }
        Ok(())
    }

    /// Input sides must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << self.num_levels.max(self.disc_channels.len()).max(self.style_channels.len())
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let m = self.size_multiple();
        if h == 0 || w == 0 || !h.is_multiple_of(m) || !w.is_multiple_of(m) {
            return Err(Error::Shape(format!("input {h}x{w} is not divisible by {m}")));
        }
        Ok(())
    }

    fn decoder_width(&self) -> usize {
        self.channels[0]
    }
}

/// Convolution with "same" padding and optional bias.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Conv {
    w: ParamId,
    b: Option<ParamId>,
    stride: usize,
    pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        group: ParamGroup,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        bias: bool,
    ) -> Self {
        let w = store.add_he(rng, format!("{name}.w"), group, vec![out_ch, in_ch, k, k], in_ch * k * k);
        let b = bias.then(|| store.add_constant(format!("{name}.b"), group, vec![out_ch], 0.0));
        Self { w, b, stride, pad: k / 2 }
    }

    pub(crate) fn forward<'t, T: Scalar>(&self, p: &Binding<'t, T>, x: Var<'t, T>) -> Var<'t, T> {
        let b = self.b.map(|b| p.var(b));
        x.conv2d(&p.var(self.w), b.as_ref(), self.stride, self.pad)
    }

    /// Input gradient given the output gradient `dy` (bias-independent).
    pub(crate) fn backward_input<'t, T: Scalar>(
        &self,
        p: &Binding<'t, T>,
        dy: Var<'t, T>,
        in_shape: (usize, usize, usize, usize),
    ) -> Var<'t, T> {
        dy.conv2d_input_grad(&p.var(self.w), in_shape, self.stride, self.pad)
    }
}

/// Fully connected layer on `[N, in]` rows.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        group: ParamGroup,
        in_dim: usize,
        out_dim: usize,
        std: f64,
        bias: f64,
    ) -> Self {
        let w = store.add_normal(rng, format!("{name}.w"), group, vec![out_dim, in_dim], std);
        let b = store.add_constant(format!("{name}.b"), group, vec![out_dim], bias);
        Self { w, b }
    }

    pub(crate) fn forward<'t, T: Scalar>(&self, p: &Binding<'t, T>, x: Var<'t, T>) -> Var<'t, T> {
        x.matmul_t(&p.var(self.w)).add_bias(&p.var(self.b))
    }
}

/// Per-level AdaIN modulation, each `[N, C_l]`.
pub struct AffineParams<'t, T: Scalar> {
    pub gamma: Vec<Var<'t, T>>,
    pub beta: Vec<Var<'t, T>>,
}

/// Encoder activations per level; level `l` has `channels[l]` channels at
/// `1/2^(l+1)` of the input resolution.
pub struct FeaturePyramid<'t, T: Scalar> {
    pub levels: Vec<Var<'t, T>>,
    /// The encoder input (rescaled to `[−1, 1]`), the decoder's
    /// full-resolution skip.
    pub input: Var<'t, T>,
}

impl<'t, T: Scalar> FeaturePyramid<'t, T> {
    pub fn latent(&self) -> Var<'t, T> {
        *self.levels.last().expect("pyramids are never empty")
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }
}

/// `γ · (x − μ)/(σ + ε) + β` per sample and channel.
pub fn adain<'t, T: Scalar>(x: Var<'t, T>, gamma: Var<'t, T>, beta: Var<'t, T>) -> Var<'t, T> {
    x.instance_norm().channel_affine(&gamma, &beta)
}

/// AdaIN on a single `C×H×W` map given as a plain tensor.
pub fn adain_map(feature: &Tensor<f64>, gamma: &[f64], beta: &[f64]) -> Result<Tensor<f64>> {
    let s = feature.shape();
    if s.len() != 3 || gamma.len() != s[0] || beta.len() != s[0] {
        return Err(Error::Shape(format!("adain expects C×H×W with C-length γ/β, got {s:?}")));
    }
    if s[1] * s[2] < 2 {
        return Err(Error::Shape("adain needs at least two spatial positions".into()));
    }
    let tape = Tape::new();
    let x = tape.constant(feature.clone().reshaped(vec![1, s[0], s[1], s[2]]));
    let g = tape.constant(Tensor::new(vec![1, s[0]], gamma.to_vec()));
    let b = tape.constant(Tensor::new(vec![1, s[0]], beta.to_vec()));
    Ok((*adain(x, g, b).value()).clone().reshaped(s.to_vec()))
}

#[derive(Clone, Debug)]
pub struct StyleExtractor {
    convs: Vec<Conv>,
    gamma_heads: Vec<Linear>,
    beta_heads: Vec<Linear>,
}

/// Weight scale of the (γ, β) heads: small, so training starts close to
/// plain instance normalization.
const HEAD_INIT_STD: f64 = 0.01;

impl StyleExtractor {
    fn new<T: Scalar>(cfg: &ModelConfig, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Self {
        let g = ParamGroup::Generator;
        let mut convs = Vec::new();
        let mut in_ch = 3;
        for (i, &c) in cfg.style_channels.iter().enumerate() {
            convs.push(Conv::new(store, rng, &format!("style.conv{i}"), g, in_ch, c, 3, 2, true));
            in_ch = c;
        }
        let feat = in_ch;
        let mut gamma_heads = Vec::new();
        let mut beta_heads = Vec::new();
        for (l, &c) in cfg.channels.iter().enumerate() {
            gamma_heads.push(Linear::new(store, rng, &format!("style.gamma{l}"), g, feat, c, HEAD_INIT_STD, 1.0));
            beta_heads.push(Linear::new(store, rng, &format!("style.beta{l}"), g, feat, c, HEAD_INIT_STD, 0.0));
        }
        Self { convs, gamma_heads, beta_heads }
    }

    fn forward<'t, T: Scalar>(&self, p: &Binding<'t, T>, x: Var<'t, T>) -> AffineParams<'t, T> {
        let mut h = x;
        for conv in &self.convs {
            h = conv.forward(p, h).relu();
        }
        let feat = h.global_avg_pool();
        AffineParams {
            gamma: self.gamma_heads.iter().map(|head| head.forward(p, feat)).collect(),
            beta: self.beta_heads.iter().map(|head| head.forward(p, feat)).collect(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    convs: Vec<Conv>,
}

impl Encoder {
    fn new<T: Scalar>(cfg: &ModelConfig, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Self {
        let mut in_ch = 3;
        let convs = cfg
            .channels
            .iter()
            .enumerate()
            .map(|(l, &c)| {
                // No bias: instance normalization removes it anyway.
                let conv = Conv::new(store, rng, &format!("enc.conv{l}"), ParamGroup::Generator, in_ch, c, 3, 2, false);
                in_ch = c;
                conv
            })
            .collect();
        Self { convs }
    }

    fn forward<'t, T: Scalar>(&self, p: &Binding<'t, T>, x: Var<'t, T>, affine: &AffineParams<'t, T>) -> FeaturePyramid<'t, T> {
        let mut levels: Vec<Var<'t, T>> = Vec::with_capacity(self.convs.len());
        for (l, conv) in self.convs.iter().enumerate() {
            let input = if l == 0 { x } else { levels[l - 1].relu() };
            levels.push(adain(conv.forward(p, input), affine.gamma[l], affine.beta[l]));
        }
        FeaturePyramid { levels, input: x }
    }
}

/// `x + conv(relu(IN(conv(x))))`.
#[derive(Clone, Copy, Debug)]
struct ResBlock {
    a: Conv,
    b: Conv,
}

impl ResBlock {
    fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut impl Rng, name: &str, ch: usize) -> Self {
        let g = ParamGroup::Generator;
        Self {
            a: Conv::new(store, rng, &format!("{name}.a"), g, ch, ch, 3, 1, true),
            b: Conv::new(store, rng, &format!("{name}.b"), g, ch, ch, 3, 1, true),
        }
    }

    fn forward<'t, T: Scalar>(&self, p: &Binding<'t, T>, x: Var<'t, T>) -> Var<'t, T> {
        let h = self.a.forward(p, x).instance_norm().relu();
        x.add(&self.b.forward(p, h))
    }
}

#[derive(Clone, Debug)]
struct UpBlock {
    conv: Conv,
    res: ResBlock,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    bottleneck: Vec<ResBlock>,
    ups: Vec<UpBlock>,
    input_skip: Conv,
    out: Conv,
}

impl Decoder {
    fn new<T: Scalar>(cfg: &ModelConfig, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Self {
        let l = cfg.num_levels;
        let latent = cfg.channels[l - 1];
        let bottleneck =
            (0..cfg.decoder_blocks - l).map(|i| ResBlock::new(store, rng, &format!("dec.res{i}"), latent)).collect();
        let mut in_ch = latent;
        let ups = (0..l)
            .map(|i| {
                // Block i lands on the resolution of encoder level l-2-i; the
                // last block is at full resolution and takes the input skip.
                let out_ch = if i + 1 < l { cfg.channels[l - 2 - i] } else { cfg.decoder_width() };
                let name = format!("dec.up{i}");
                let conv = Conv::new(store, rng, &format!("{name}.conv"), ParamGroup::Generator, in_ch, out_ch, 3, 1, true);
                let res = ResBlock::new(store, rng, &format!("{name}.res"), out_ch);
                in_ch = out_ch;
                UpBlock { conv, res }
            })
            .collect();
        let input_skip = Conv::new(store, rng, "dec.input_skip", ParamGroup::Generator, 3, in_ch, 3, 1, false);
        let fan_in = in_ch * 9;
        let w = store.add_normal(rng, "dec.out.w", ParamGroup::Generator, vec![3, in_ch, 3, 3], (1.0 / fan_in as f64).sqrt());
        let b = store.add_constant("dec.out.b", ParamGroup::Generator, vec![3], 0.0);
        Self { bottleneck, ups, input_skip, out: Conv { w, b: Some(b), stride: 1, pad: 1 } }
    }

    fn forward<'t, T: Scalar>(&self, p: &Binding<'t, T>, pyr: &FeaturePyramid<'t, T>) -> Var<'t, T> {
        let l = pyr.num_levels();
        let mut h = pyr.latent();
        for block in &self.bottleneck {
            h = block.forward(p, h);
        }
        for (i, up) in self.ups.iter().enumerate() {
            h = up.conv.forward(p, h.relu().upsample2x());
            let skip = if i + 1 < l { pyr.levels[l - 2 - i] } else { self.input_skip.forward(p, pyr.input) };
            h = h.add(&skip);
            h = up.res.forward(p, h);
        }
        // tanh output mapped from [−1, 1] to [0, 1].
        self.out.forward(p, h.relu()).tanh().add_scalar(1.0).scale(0.5)
    }
}

/// The full filter-removal network `F`.
#[derive(Clone, Debug)]
pub struct Generator {
    pub(crate) style: StyleExtractor,
    pub(crate) encoder: Encoder,
    pub(crate) decoder: Decoder,
}

/// Images enter the networks rescaled to `[−1, 1]`.
fn to_signed<'t, T: Scalar>(x: Var<'t, T>) -> Var<'t, T> {
    x.scale(2.0).add_scalar(-1.0)
}

impl Generator {
    /// `x` is an `N×3×H×W` batch in `[0, 1]`.
    pub fn style_extract<'t, T: Scalar>(&self, p: &Binding<'t, T>, x: Var<'t, T>) -> AffineParams<'t, T> {
        self.style.forward(p, to_signed(x))
    }

    pub fn encode<'t, T: Scalar>(&self, p: &Binding<'t, T>, x: Var<'t, T>, affine: &AffineParams<'t, T>) -> FeaturePyramid<'t, T> {
        self.encoder.forward(p, to_signed(x), affine)
    }

    /// Style extraction followed by encoding: the feature map `E(x)` used by
    /// the patch objectives.
    pub fn features<'t, T: Scalar>(&self, p: &Binding<'t, T>, x: Var<'t, T>) -> FeaturePyramid<'t, T> {
        let affine = self.style_extract(p, x);
        self.encode(p, x, &affine)
    }

    /// Output in `[0, 1]`.
    pub fn decode<'t, T: Scalar>(&self, p: &Binding<'t, T>, pyr: &FeaturePyramid<'t, T>) -> Var<'t, T> {
        self.decoder.forward(p, pyr)
    }

    /// Returns the restored batch and the pyramid of the input.
    pub fn forward<'t, T: Scalar>(&self, p: &Binding<'t, T>, x: Var<'t, T>) -> (Var<'t, T>, FeaturePyramid<'t, T>) {
        let pyr = self.features(p, x);
        (self.decode(p, &pyr), pyr)
    }
}

/// All trainable networks and their parameters.
#[derive(Clone, Debug)]
pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub heads: SamplerHeads,
}

impl<T: Scalar> Model<T> {
    /// Parameters are drawn from the `init` stream of `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, rng::INIT, 0);
        let mut store = ParamStore::new();
        let generator = Generator {
            style: StyleExtractor::new(&config, &mut store, &mut rng),
            encoder: Encoder::new(&config, &mut store, &mut rng),
            decoder: Decoder::new(&config, &mut store, &mut rng),
        };
        let discriminator = Discriminator::new(&config, &mut store, &mut rng);
        let heads = SamplerHeads::new(&config, &mut store, &mut rng);
        Ok(Self { config, store, generator, discriminator, heads })
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            store: self.store.cast(),
            generator: self.generator.clone(),
            discriminator: self.discriminator.clone(),
            heads: self.heads.clone(),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.store.count(None)
    }

    /// Inference: `F(x̃)` for a batch of equally sized images.
    pub fn remove_filter_batch(&self, images: &[&Image]) -> Result<Vec<Image>> {
        let first = images.first().ok_or_else(|| Error::Shape("empty batch".into()))?;
        self.config.check_input(first.height(), first.width())?;
        let tape = Tape::new();
        let p = self.store.bind_frozen(&tape);
        let x = tape.constant(images_to_tensor::<T>(images)?);
        let (out, _) = self.generator.forward(&p, x);
        Ok(tensor_to_images(&out.value()))
    }

    pub fn remove_filter(&self, image: &Image) -> Result<Image> {
        Ok(self.remove_filter_batch(&[image])?.remove(0))
    }

    /// Like [`Model::remove_filter`] for any size: the image is mirror-padded
    /// up to the next valid size and the output cropped back.
    pub fn remove_filter_padded(&self, image: &Image) -> Result<Image> {
        let (w, h) = (image.width(), image.height());
        if w == 0 || h == 0 {
            return Err(Error::Shape("empty image".into()));
        }
        let m = self.config.size_multiple();
        let (pw, ph) = (w.div_ceil(m) * m, h.div_ceil(m) * m);
        if pw == w && ph == h {
            return self.remove_filter(image);
        }
        let padded = Image::from_fn(pw, ph, |y, x| image.pixel(reflect_index(y as isize, h), reflect_index(x as isize, w)));
        let out = self.remove_filter(&padded)?;
        Ok(Image::from_fn(w, h, |y, x| out.pixel(y, x)))
    }
}

/// Parameter count of [`ModelConfig::default`].
pub const DEFAULT_PARAMETER_COUNT: usize = 1_046_598;
