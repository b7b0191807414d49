//! One-way conditional discriminators.
//!
//! Image features are computed by a stack of convolutions, the source
//! embedding is tiled over the resulting grid and concatenated, and a second
//! stack reduces to a one-channel patch score map. Every convolution is
//! spectrally normalized; all but the last are followed by leaky-ReLU.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{conv2d_output_size, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvConfig, LEAKY_SLOPE};
use crate::params::{Ctx, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscLayer {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl DiscLayer {
    /// 4x4, stride 2, padding 1: halves the resolution.
    pub const fn down(out_channels: usize) -> Self {
        DiscLayer {
            out_channels,
            kernel: 4,
            stride: 2,
            padding: 1,
        }
    }

    /// 3x3, stride 1, padding 1.
    pub const fn keep(out_channels: usize) -> Self {
        DiscLayer {
            out_channels,
            kernel: 3,
            stride: 1,
            padding: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub in_channels: usize,
    pub embed_dim: usize,
    /// Layers before the embedding is concatenated.
    pub pre: Vec<DiscLayer>,
    /// Layers after concatenation; the last must output one channel.
    pub post: Vec<DiscLayer>,
}

impl DiscriminatorConfig {
    /// Full-resolution discriminator (output at 1/64 scale).
    pub fn full_fine(embed_dim: usize) -> Self {
        use DiscLayer as L;
        DiscriminatorConfig {
            in_channels: 3,
            embed_dim,
            pre: vec![L::down(48), L::down(96), L::down(192), L::down(384)],
            post: vec![L::down(96), L::down(1)],
        }
    }

    /// Coarse-image discriminator (output at 1/16 scale).
    pub fn full_coarse(embed_dim: usize) -> Self {
        use DiscLayer as L;
        DiscriminatorConfig {
            in_channels: 3,
            embed_dim,
            pre: vec![L::down(48), L::keep(96), L::keep(192), L::down(384)],
            post: vec![L::down(96), L::down(1)],
        }
    }

    /// Fine discriminator for images whose sides are multiples of 16.
    pub fn toy_fine(embed_dim: usize) -> Self {
        use DiscLayer as L;
        DiscriminatorConfig {
            in_channels: 3,
            embed_dim,
            pre: vec![L::down(16), L::down(32), L::down(64)],
            post: vec![L::down(32), L::keep(1)],
        }
    }

    /// Coarse discriminator for images whose sides are multiples of 2.
    pub fn toy_coarse(embed_dim: usize) -> Self {
        use DiscLayer as L;
        DiscriminatorConfig {
            in_channels: 3,
            embed_dim,
            pre: vec![L::keep(16), L::down(32)],
            post: vec![L::keep(32), L::keep(1)],
        }
    }

    fn layers(&self) -> impl Iterator<Item = &DiscLayer> {
        self.pre.iter().chain(&self.post)
    }

    /// Score-map size for an `h x w` input, or an error if any layer would
    /// not divide its input evenly.
    pub fn output_shape(&self, (h, w): (usize, usize)) -> Result<(usize, usize)> {
        let (mut h, mut w) = (h, w);
        for l in self.layers() {
            if h % l.stride != 0 || w % l.stride != 0 || h == 0 || w == 0 {
                return Err(Error::invalid(format!(
                    "discriminator input {h}x{w} not divisible by stride {}",
                    l.stride
                )));
            }
            h = conv2d_output_size(h, l.kernel, l.stride, l.padding)?;
            w = conv2d_output_size(w, l.kernel, l.stride, l.padding)?;
        }
        Ok((h, w))
    }

    /// Total downsampling factor of the stack.
    pub fn reduction(&self) -> usize {
        self.layers().map(|l| l.stride).product()
    }

    fn validate(&self) -> Result<()> {
        if self.pre.is_empty() || self.post.last().map(|l| l.out_channels) != Some(1) {
            return Err(Error::invalid(
                "discriminator needs at least one pre layer and a one-channel output",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    pub config: DiscriminatorConfig,
    pub pre: Vec<Conv2d>,
    pub post: Vec<Conv2d>,
}

impl Discriminator {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        config: DiscriminatorConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let mut ci = config.in_channels;
        let mut make = |tag: &str, layers: &[DiscLayer], ci: &mut usize, rng: &mut R| -> Vec<Conv2d> {
            layers
                .iter()
                .enumerate()
                .map(|(i, l)| {
                    let cfg = ConvConfig::new(*ci, l.out_channels, l.kernel, l.stride, l.padding).spectral();
                    *ci = l.out_channels;
                    Conv2d::new(store, &format!("{prefix}.{tag}{i}"), cfg, rng)
                })
                .collect()
        };
        let pre = make("pre", &config.pre, &mut ci, rng);
        ci += config.embed_dim;
        let post = make("post", &config.post, &mut ci, rng);
        Ok(Discriminator { config, pre, post })
    }

    /// Patch score map `(n, 1, h', w')`.
    pub fn forward(&self, ctx: &Ctx<'_>, img: &Var, e: &Var) -> Result<Var> {
        let (n, c, h, w) = img.value().dims4()?;
        if c != self.config.in_channels {
            return Err(Error::shape(format!(
                "discriminator input has {c} channels, expected {}",
                self.config.in_channels
            )));
        }
        let (en, ed) = e.value().dims2()?;
        if en != n || ed != self.config.embed_dim {
            return Err(Error::shape(format!(
                "embedding {:?} does not match batch {n} and dim {}",
                e.shape(),
                self.config.embed_dim
            )));
        }
        self.config.output_shape((h, w))?;
        let mut x = img.clone();
        for conv in &self.pre {
            x = conv.forward(ctx, &x)?.leaky_relu(LEAKY_SLOPE);
        }
        let (fh, fw) = (x.shape()[2], x.shape()[3]);
        x = Var::concat(&[x, e.tile_spatial(fh, fw)?], 1)?;
        let last = self.post.len() - 1;
        for (i, conv) in self.post.iter().enumerate() {
            x = conv.forward(ctx, &x)?;
            if i < last {
                x = x.leaky_relu(LEAKY_SLOPE);
            }
        }
        Ok(x)
    }

    /// Per-sample mean patch score, shape `(n)`.
    pub fn score(&self, ctx: &Ctx<'_>, img: &Var, e: &Var) -> Result<Var> {
        let map = self.forward(ctx, img, e)?;
        let n = map.shape()[0];
        map.mean_axes(&[1, 2, 3])?.reshape([n])
    }
}

/// Pairs sample `i` with the embedding of sample `(i + 1) mod n`.
pub fn mismatched(e: &Var) -> Result<Var> {
    let (n, _) = e.value().dims2()?;
    if n < 2 {
        return Err(Error::invalid("mismatched pairs need a batch of at least 2"));
    }
    let idx: Vec<usize> = (0..n).map(|i| (i + 1) % n).collect();
    e.gather_rows(&idx)
}
