//! Parameterized layers shared by the generator, discriminators and embedder.

use rand::Rng;

use crate::autograd::{Conv2dSpec, Var};
use crate::error::Result;
use crate::params::{Ctx, Param, ParamStore};
use crate::spectral::{block_size, top_left_singular_vectors};
use crate::tensor::Tensor;

/// Negative slope used by every leaky-ReLU in the networks.
pub const LEAKY_SLOPE: f64 = 0.2;

fn uniform_fan_in<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::uniform(shape.to_vec(), -bound, bound, rng)
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Param,
    pub bias: Option<Param>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            uniform_fan_in(&[out_dim, in_dim], in_dim, rng),
        );
        let bias = Some(store.add(format!("{name}.bias"), Tensor::zeros([out_dim])));
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    /// Zero weights with a constant bias, so the output starts at `bias_value`.
    pub fn constant(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, bias_value: f64) -> Self {
        let weight = store.add(format!("{name}.weight"), Tensor::zeros([out_dim, in_dim]));
        let bias = Some(store.add(format!("{name}.bias"), Tensor::full([out_dim], bias_value)));
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, ctx: &Ctx<'_>, x: &Var) -> Result<Var> {
        let b = self.bias.map(|b| ctx.var(b));
        x.linear(&ctx.var(self.weight), b.as_ref())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConvConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub spectral: bool,
}

impl ConvConfig {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        ConvConfig {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            spectral: false,
        }
    }

    /// Shape-preserving odd kernel.
    pub fn same(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self::new(in_channels, out_channels, kernel, 1, kernel / 2)
    }

    pub fn spectral(mut self) -> Self {
        self.spectral = true;
        self
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Param,
    /// Block of left singular vector estimates when spectrally normalized.
    pub sn_u: Option<Param>,
    pub config: ConvConfig,
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, config: ConvConfig, rng: &mut R) -> Self {
        let ConvConfig {
            in_channels: ci,
            out_channels: co,
            kernel: k,
            ..
        } = config;
        let w0 = uniform_fan_in(&[co, ci, k, k], ci * k * k, rng);
        // Warm start at the exact singular vectors; power iteration then tracks them.
        let u0 = config.spectral.then(|| top_left_singular_vectors(&w0, block_size(co)));
        let weight = store.add(format!("{name}.weight"), w0);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([co]));
        let sn_u = u0.map(|u| {
            let u = store.add_buffer(format!("{name}.sn_u"), u);
            store.register_spectral(weight, u);
            u
        });
        Conv2d {
            weight,
            bias,
            sn_u,
            config,
        }
    }

    /// The weight as used in the forward pass (divided by its spectral norm if enabled).
    pub fn effective_weight(&self, ctx: &Ctx<'_>) -> Result<Var> {
        let w = ctx.var(self.weight);
        match self.sn_u {
            Some(u) => w.spectral_normalize(ctx.value(u)),
            None => Ok(w),
        }
    }

    pub fn forward(&self, ctx: &Ctx<'_>, x: &Var) -> Result<Var> {
        let w = self.effective_weight(ctx)?;
        x.conv2d(
            &w,
            Some(&ctx.var(self.bias)),
            Conv2dSpec::new(self.config.stride, self.config.padding),
        )
    }
}

/// `Linear -> leaky-ReLU -> Linear`.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl Mlp {
    pub fn forward(&self, ctx: &Ctx<'_>, x: &Var) -> Result<Var> {
        let h = self.hidden.forward(ctx, x)?.leaky_relu(LEAKY_SLOPE);
        self.out.forward(ctx, &h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn spectral_conv_registers_vector() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let conv = Conv2d::new(&mut store, "c", ConvConfig::same(3, 4, 3).spectral(), &mut rng);
        assert_eq!(store.spectral_pairs(), &[(conv.weight, conv.sn_u.unwrap())]);
        let x = Var::constant(Tensor::randn([1, 3, 5, 5], &mut rng));
        let y = conv.forward(&store.ctx(false), &x).unwrap();
        assert_eq!(y.shape(), &[1, 4, 5, 5]);
    }

    #[test]
    fn constant_linear_outputs_bias() {
        let mut store = ParamStore::new();
        let lin = Linear::constant(&mut store, "l", 3, 2, 1.0);
        let x = Var::constant(Tensor::from_vec(vec![5.0, -1.0, 2.0]).into_reshape([1, 3]).unwrap());
        let y = lin.forward(&store.ctx(false), &x).unwrap();
        assert_eq!(y.value().data(), &[1.0, 1.0]);
    }
}
