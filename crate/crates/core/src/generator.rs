//! Two-stage generator: mapping network, structure stage, coarse head,
//! local-code concatenation, facade stage and final head.
//!
//! ```text
//! e --linear--> seed (C_s, H/2^k, W/2^k)
//!   --ResBlock-S x n_s--> (C_s, H/8, W/8) --conv3+tanh--> coarse
//!   ++ tile(z_local) --ResBlock-T x 3--> (C_last, H, W) --conv3+tanh--> image
//! ```
//!
//! with `k = n_s + 3`. The full-size preset uses `n_s = 4`, so targets must be
//! multiples of 128; the toy preset uses `n_s = 2` (multiples of 32).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attn_adain::{AttnAdain, StyleAdain};
use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvConfig, Linear, LEAKY_SLOPE};
use crate::params::{Ctx, Param, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    /// Retrieval embedding dimension `E`.
    pub embed_dim: usize,
    /// Style code dimension `S`.
    pub style_dim: usize,
    /// Local code dimension `L`.
    pub local_dim: usize,
    pub structure_channels: usize,
    pub structure_blocks: usize,
    /// Output channels of each facade block; each block doubles resolution.
    pub facade_channels: Vec<usize>,
    pub mapping_layers: usize,
    pub layer_scale_init: f64,
}

impl GeneratorConfig {
    /// Channel and scale ladder of the full-size model.
    pub fn full() -> Self {
        GeneratorConfig {
            embed_dim: 384,
            style_dim: 128,
            local_dim: 128,
            structure_channels: 384,
            structure_blocks: 4,
            facade_channels: vec![256, 128, 64],
            mapping_layers: 4,
            layer_scale_init: 1e-4,
        }
    }

    /// Narrow, shallow variant for 32x128 panoramas and 64x64 aerial images.
    pub fn toy() -> Self {
        GeneratorConfig {
            embed_dim: 384,
            style_dim: 32,
            local_dim: 16,
            structure_channels: 32,
            structure_blocks: 2,
            facade_channels: vec![32, 16, 8],
            mapping_layers: 4,
            layer_scale_init: 1e-4,
        }
    }

    /// Resolution ratio between the final image and the seed map.
    pub fn total_upsampling(&self) -> usize {
        1 << (self.structure_blocks + self.facade_channels.len())
    }

    /// Resolution ratio between the final image and the coarse image.
    pub fn coarse_factor(&self) -> usize {
        1 << self.facade_channels.len()
    }

    fn check_target(&self, (h, w): (usize, usize)) -> Result<()> {
        let k = self.total_upsampling();
        if h == 0 || w == 0 || h % k != 0 || w % k != 0 {
            return Err(Error::invalid(format!(
                "target shape {h}x{w} must be a nonzero multiple of {k}"
            )));
        }
        Ok(())
    }

    pub fn seed_shape(&self, target: (usize, usize)) -> Result<(usize, usize)> {
        self.check_target(target)?;
        let k = self.total_upsampling();
        Ok((target.0 / k, target.1 / k))
    }

    pub fn coarse_shape(&self, target: (usize, usize)) -> Result<(usize, usize)> {
        self.check_target(target)?;
        let k = self.coarse_factor();
        Ok((target.0 / k, target.1 / k))
    }

    fn validate(&self) -> Result<()> {
        let dims = [
            self.embed_dim,
            self.style_dim,
            self.local_dim,
            self.structure_channels,
            self.structure_blocks,
            self.mapping_layers,
        ];
        if dims.contains(&0) || self.facade_channels.is_empty() || self.facade_channels.contains(&0) {
            return Err(Error::invalid("generator dimensions must be positive"));
        }
        Ok(())
    }
}

/// `mapping_layers` square linear layers with leaky-ReLU between them.
#[derive(Clone, Debug)]
pub struct MappingNetwork {
    pub layers: Vec<Linear>,
}

impl MappingNetwork {
    pub fn forward(&self, ctx: &Ctx<'_>, z: &Var) -> Result<Var> {
        let dim = self.layers[0].in_dim;
        let (_, d) = z.value().dims2()?;
        if d != dim {
            return Err(Error::shape(format!("style noise of dim {d}, expected {dim}")));
        }
        let mut h = z.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                h = h.leaky_relu(LEAKY_SLOPE);
            }
            h = layer.forward(ctx, &h)?;
        }
        Ok(h)
    }
}

fn sn_conv<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, ci: usize, co: usize, k: usize, rng: &mut R) -> Conv2d {
    Conv2d::new(store, name, ConvConfig::same(ci, co, k).spectral(), rng)
}

/// Structure block: every path conditioned on the retrieval embedding.
#[derive(Clone, Debug)]
pub struct ResBlockS {
    pub attn1: AttnAdain,
    pub conv1: Conv2d,
    pub attn2: AttnAdain,
    pub conv2: Conv2d,
    pub attn_res: AttnAdain,
    pub conv_res: Conv2d,
}

impl ResBlockS {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        embed_dim: usize,
        ci: usize,
        co: usize,
        rng: &mut R,
    ) -> Self {
        ResBlockS {
            attn1: AttnAdain::new(store, &format!("{name}.attn1"), embed_dim, ci, rng),
            conv1: sn_conv(store, &format!("{name}.conv1"), ci, co, 3, rng),
            attn2: AttnAdain::new(store, &format!("{name}.attn2"), embed_dim, co, rng),
            conv2: sn_conv(store, &format!("{name}.conv2"), co, co, 3, rng),
            attn_res: AttnAdain::new(store, &format!("{name}.attn_res"), embed_dim, ci, rng),
            conv_res: sn_conv(store, &format!("{name}.conv_res"), ci, co, 1, rng),
        }
    }

    pub fn forward(&self, ctx: &Ctx<'_>, x: &Var, e: &Var) -> Result<Var> {
        let up = x.upsample_nearest(2)?;
        let h = self.attn1.forward(ctx, &up, e)?.leaky_relu(LEAKY_SLOPE);
        let h = self.conv1.forward(ctx, &h)?;
        let h = self.attn2.forward(ctx, &h, e)?.leaky_relu(LEAKY_SLOPE);
        let h = self.conv2.forward(ctx, &h)?;
        let r = self.conv_res.forward(ctx, &self.attn_res.forward(ctx, &up, e)?)?;
        h.add(&r)
    }
}

/// Facade block: style drives the principal path, the embedding enters only
/// through the residual path, which is scaled per channel by `layer_scale`.
#[derive(Clone, Debug)]
pub struct ResBlockT {
    pub style1: StyleAdain,
    pub conv1: Conv2d,
    pub style2: StyleAdain,
    pub conv2: Conv2d,
    pub attn_res: AttnAdain,
    pub conv_res: Conv2d,
    pub layer_scale: Param,
}

/// Principal and scaled residual contributions of a facade block.
pub struct ResBlockTParts {
    pub principal: Var,
    pub residual: Var,
}

impl ResBlockT {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        embed_dim: usize,
        style_dim: usize,
        ci: usize,
        co: usize,
        scale_init: f64,
        rng: &mut R,
    ) -> Self {
        ResBlockT {
            style1: StyleAdain::new(store, &format!("{name}.style1"), style_dim, ci, rng),
            conv1: sn_conv(store, &format!("{name}.conv1"), ci, co, 3, rng),
            style2: StyleAdain::new(store, &format!("{name}.style2"), style_dim, co, rng),
            conv2: sn_conv(store, &format!("{name}.conv2"), co, co, 3, rng),
            attn_res: AttnAdain::new(store, &format!("{name}.attn_res"), embed_dim, ci, rng),
            conv_res: sn_conv(store, &format!("{name}.conv_res"), ci, co, 1, rng),
            layer_scale: store.add(format!("{name}.layer_scale"), Tensor::full([co], scale_init)),
        }
    }

    pub fn parts(&self, ctx: &Ctx<'_>, x: &Var, w: &Var, e: &Var) -> Result<ResBlockTParts> {
        let up = x.upsample_nearest(2)?;
        let h = self.style1.forward(ctx, &up, w)?.leaky_relu(LEAKY_SLOPE);
        let h = self.conv1.forward(ctx, &h)?;
        let h = self.style2.forward(ctx, &h, w)?.leaky_relu(LEAKY_SLOPE);
        let principal = self.conv2.forward(ctx, &h)?;
        let r = self.conv_res.forward(ctx, &self.attn_res.forward(ctx, &up, e)?)?;
        let co = self.conv_res.config.out_channels;
        let s = ctx.var(self.layer_scale).reshape([1, co, 1, 1])?;
        Ok(ResBlockTParts {
            principal,
            residual: r.mul(&s)?,
        })
    }

    pub fn forward(&self, ctx: &Ctx<'_>, x: &Var, w: &Var, e: &Var) -> Result<Var> {
        let p = self.parts(ctx, x, w, e)?;
        p.principal.add(&p.residual)
    }
}

/// Coarse and final images, both in `[-1, 1]`.
#[derive(Clone, Debug)]
pub struct GeneratorOutput {
    pub coarse: Var,
    pub image: Var,
}

#[derive(Clone, Debug)]
pub struct Generator {
    pub config: GeneratorConfig,
    pub target: (usize, usize),
    pub mapping: MappingNetwork,
    pub seed: Linear,
    pub structure: Vec<ResBlockS>,
    pub coarse_head: Conv2d,
    pub facade: Vec<ResBlockT>,
    pub final_head: Conv2d,
}

impl Generator {
    /// Registers all parameters under the `prefix` namespace of `store`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        config: GeneratorConfig,
        target: (usize, usize),
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let (sh, sw) = config.seed_shape(target)?;
        let c = &config;
        let cs = c.structure_channels;
        let mapping = MappingNetwork {
            layers: (0..c.mapping_layers)
                .map(|i| Linear::new(store, &format!("{prefix}.map{i}"), c.style_dim, c.style_dim, rng))
                .collect(),
        };
        let seed = Linear::new(store, &format!("{prefix}.seed"), c.embed_dim, cs * sh * sw, rng);
        let structure = (0..c.structure_blocks)
            .map(|i| ResBlockS::new(store, &format!("{prefix}.s{i}"), c.embed_dim, cs, cs, rng))
            .collect();
        let coarse_head = sn_conv(store, &format!("{prefix}.coarse_head"), cs, 3, 3, rng);
        let mut facade = Vec::new();
        let mut ci = cs + c.local_dim;
        for (i, &co) in c.facade_channels.iter().enumerate() {
            facade.push(ResBlockT::new(
                store,
                &format!("{prefix}.t{i}"),
                c.embed_dim,
                c.style_dim,
                ci,
                co,
                c.layer_scale_init,
                rng,
            ));
            ci = co;
        }
        let final_head = sn_conv(store, &format!("{prefix}.final_head"), ci, 3, 3, rng);
        Ok(Generator {
            config,
            target,
            mapping,
            seed,
            structure,
            coarse_head,
            facade,
            final_head,
        })
    }

    pub fn structure_block(&self, id: usize) -> Result<&ResBlockS> {
        self.structure
            .get(id)
            .ok_or_else(|| Error::UnknownLayer(format!("structure block {id}")))
    }

    pub fn facade_block(&self, id: usize) -> Result<&ResBlockT> {
        self.facade
            .get(id)
            .ok_or_else(|| Error::UnknownLayer(format!("facade block {id}")))
    }

    /// Style code `w` from style noise `(n, S)`.
    pub fn mapping_forward(&self, ctx: &Ctx<'_>, z_style: &Var) -> Result<Var> {
        self.mapping.forward(ctx, z_style)
    }

    pub fn resblock_s_forward(&self, ctx: &Ctx<'_>, id: usize, x: &Var, e: &Var) -> Result<Var> {
        self.structure_block(id)?.forward(ctx, x, e)
    }

    pub fn resblock_t_forward(&self, ctx: &Ctx<'_>, id: usize, x: &Var, w: &Var, e: &Var) -> Result<Var> {
        self.facade_block(id)?.forward(ctx, x, w, e)
    }

    /// Seed map `(n, C_s, h0, w0)` projected from the embedding.
    pub fn seed_map(&self, ctx: &Ctx<'_>, e: &Var) -> Result<Var> {
        let (n, d) = e.value().dims2()?;
        if d != self.config.embed_dim {
            return Err(Error::shape(format!(
                "embedding of dim {d}, expected {}",
                self.config.embed_dim
            )));
        }
        let (sh, sw) = self.config.seed_shape(self.target)?;
        self.seed
            .forward(ctx, e)?
            .reshape([n, self.config.structure_channels, sh, sw])
    }

    /// Runs the full stack for embeddings `e (n, E)`, style codes `w (n, S)`
    /// and local codes `z_local (n, L)`.
    pub fn generate(
        &self,
        ctx: &Ctx<'_>,
        e: &Var,
        w: &Var,
        z_local: &Var,
        target: (usize, usize),
    ) -> Result<GeneratorOutput> {
        self.config.check_target(target)?;
        if target != self.target {
            return Err(Error::invalid(format!(
                "generator built for {}x{}, asked for {}x{}",
                self.target.0, self.target.1, target.0, target.1
            )));
        }
        let n = e.value().dims2()?.0;
        let (wn, wd) = w.value().dims2()?;
        let (zn, zd) = z_local.value().dims2()?;
        if wn != n || zn != n || wd != self.config.style_dim || zd != self.config.local_dim {
            return Err(Error::shape(format!(
                "codes w {:?} and z_local {:?} do not match batch {n} with S={} L={}",
                w.shape(),
                z_local.shape(),
                self.config.style_dim,
                self.config.local_dim
            )));
        }
        let mut x = self.seed_map(ctx, e)?;
        for block in &self.structure {
            x = block.forward(ctx, &x, e)?;
        }
        let coarse = self.coarse_head.forward(ctx, &x)?.tanh();
        let (ch, cw) = (x.shape()[2], x.shape()[3]);
        x = Var::concat(&[x, z_local.tile_spatial(ch, cw)?], 1)?;
        for block in &self.facade {
            x = block.forward(ctx, &x, w, e)?;
        }
        let image = self.final_head.forward(ctx, &x)?.tanh();
        Ok(GeneratorOutput { coarse, image })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attn_adain::{instance_stats, normalize};
    use crate::gradcheck::{check_inputs, GradCheckOptions};
    use crate::spectral::{power_iterate, top_singular_value};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn tiny() -> GeneratorConfig {
        GeneratorConfig {
            embed_dim: 6,
            style_dim: 5,
            local_dim: 3,
            structure_channels: 4,
            structure_blocks: 1,
            facade_channels: vec![4, 3, 2],
            mapping_layers: 4,
            layer_scale_init: 1e-4,
        }
    }

    fn randn(shape: impl Into<Vec<usize>>, seed: u64) -> Tensor {
        Tensor::randn(shape, &mut rng(seed))
    }

    fn perturb(store: &mut ParamStore, seed: u64, scale: f64) {
        let mut r = rng(seed);
        for p in store.trainable().collect::<Vec<_>>() {
            let v = store.value(p).clone();
            let noise = Tensor::randn(v.shape().to_vec(), &mut r).scale(scale);
            store.set(p, v.zip_map(&noise, |a, b| a + b).unwrap()).unwrap();
        }
    }

    #[test]
    fn mapping_zero_weights_give_zero() {
        let mut store = ParamStore::new();
        let g = Generator::new(&mut store, "g", tiny(), (16, 16), &mut rng(0)).unwrap();
        for l in &g.mapping.layers {
            store.set(l.weight, Tensor::zeros([5, 5])).unwrap();
        }
        let w = g
            .mapping_forward(&store.ctx(false), &Var::constant(randn([2, 5], 1)))
            .unwrap();
        assert!(w.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mapping_identity_on_nonnegative_input() {
        let mut store = ParamStore::new();
        let g = Generator::new(&mut store, "g", tiny(), (16, 16), &mut rng(0)).unwrap();
        let eye = Tensor::from_fn([5, 5], |i| if i % 6 == 0 { 1.0 } else { 0.0 });
        for l in &g.mapping.layers {
            store.set(l.weight, eye.clone()).unwrap();
        }
        let z = randn([3, 5], 2).map(f64::abs);
        let w = g.mapping_forward(&store.ctx(false), &Var::constant(z.clone())).unwrap();
        assert_eq!(w.value(), &z);
    }

    #[test]
    fn mapping_matches_matrix_chain() {
        let mut store = ParamStore::new();
        let g = Generator::new(&mut store, "g", tiny(), (16, 16), &mut rng(3)).unwrap();
        perturb(&mut store, 4, 0.3);
        let z = randn([2, 5], 5);
        let w = g.mapping_forward(&store.ctx(false), &Var::constant(z.clone())).unwrap();
        for n in 0..2 {
            let mut h: Vec<f64> = z.data()[n * 5..n * 5 + 5].to_vec();
            for (i, l) in g.mapping.layers.iter().enumerate() {
                if i > 0 {
                    h.iter_mut().for_each(|v| *v = if *v > 0.0 { *v } else { 0.2 * *v });
                }
                let wt = store.value(l.weight).data();
                let b = store.value(l.bias.unwrap()).data();
                h = (0..5)
                    .map(|o| (0..5).map(|k| wt[o * 5 + k] * h[k]).sum::<f64>() + b[o])
                    .collect();
            }
            for o in 0..5 {
                assert!((w.value().data()[n * 5 + o] - h[o]).abs() < 1e-12);
            }
        }
        assert!(g.mapping_forward(&store.ctx(false), &Var::constant(randn([1, 4], 6))).is_err());
    }

    #[test]
    fn tiny_generator_shapes_and_bounds() {
        let mut store = ParamStore::new();
        let g = Generator::new(&mut store, "g", tiny(), (16, 32), &mut rng(7)).unwrap();
        perturb(&mut store, 8, 1.0);
        let ctx = store.ctx(false);
        let out = g
            .generate(
                &ctx,
                &Var::constant(randn([2, 6], 9)),
                &Var::constant(randn([2, 5], 10)),
                &Var::constant(randn([2, 3], 11)),
                (16, 32),
            )
            .unwrap();
        assert_eq!(out.coarse.shape(), &[2, 3, 2, 4]);
        assert_eq!(out.image.shape(), &[2, 3, 16, 32]);
        assert!(out.image.value().data().iter().all(|v| v.abs() <= 1.0));
        assert!(out.coarse.value().data().iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn indivisible_or_mismatched_targets_fail() {
        let mut store = ParamStore::new();
        assert!(Generator::new(&mut store, "g", tiny(), (24, 16), &mut rng(0)).is_err());
        let g = Generator::new(&mut store, "h", tiny(), (16, 16), &mut rng(0)).unwrap();
        let v = |s: [usize; 2]| Var::constant(Tensor::zeros(s));
        let ctx = store.ctx(false);
        assert!(g.generate(&ctx, &v([1, 6]), &v([1, 5]), &v([1, 3]), (32, 32)).is_err());
        assert!(g.generate(&ctx, &v([1, 6]), &v([1, 5]), &v([1, 3]), (20, 16)).is_err());
        assert!(g.generate(&ctx, &v([1, 6]), &v([2, 5]), &v([1, 3]), (16, 16)).is_err());
    }

    #[test]
    fn unknown_block_ids() {
        let mut store = ParamStore::new();
        let g = Generator::new(&mut store, "g", tiny(), (16, 16), &mut rng(0)).unwrap();
        assert!(matches!(g.structure_block(1), Err(Error::UnknownLayer(_))));
        assert!(matches!(g.facade_block(3), Err(Error::UnknownLayer(_))));
    }

    #[test]
    fn zero_principal_convs_leave_residual_projection() {
        let mut store = ParamStore::new();
        let b = ResBlockS::new(&mut store, "b", 4, 3, 5, &mut rng(12));
        for conv in [&b.conv1, &b.conv2] {
            let shape = store.value(conv.weight).shape().to_vec();
            store.set(conv.weight, Tensor::zeros(shape)).unwrap();
        }
        let x = randn([1, 3, 2, 3], 13);
        let ctx = store.ctx(false);
        let out = b
            .forward(&ctx, &Var::constant(x.clone()), &Var::constant(randn([1, 4], 14)))
            .unwrap();
        assert_eq!(out.shape(), &[1, 5, 4, 6]);
        let up = Var::constant(x).upsample_nearest(2).unwrap();
        let hat = normalize(up.value(), &instance_stats(up.value()).unwrap()).unwrap();
        let want = b.conv_res.forward(&ctx, &Var::constant(hat)).unwrap();
        assert!(out.value().max_abs_diff(want.value()) < 1e-6);
    }

    #[test]
    fn resblock_s_embedding_gradient() {
        let mut store = ParamStore::new();
        let b = ResBlockS::new(&mut store, "b", 3, 2, 2, &mut rng(15));
        perturb(&mut store, 16, 0.3);
        let x = randn([2, 2, 2, 2], 17);
        let rep = check_inputs(
            |v| Ok(b.forward(&store.ctx(false), &v[0], &v[1])?.square().sum()),
            &[x, randn([2, 3], 18)],
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(rep.max_rel_err() < 1e-4, "{rep:?}");
    }

    #[test]
    fn layer_scale_controls_residual() {
        let mut store = ParamStore::new();
        let b = ResBlockT::new(&mut store, "t", 4, 3, 5, 3, 1e-4, &mut rng(19));
        let x = Var::constant(randn([1, 5, 3, 3], 20));
        let w = Var::constant(randn([1, 3], 21));
        let e = Var::constant(randn([1, 4], 22));
        let parts = b.parts(&store.ctx(false), &x, &w, &e).unwrap();
        let out = b.forward(&store.ctx(false), &x, &w, &e).unwrap();
        let p = parts.principal.value();
        let rel = out.value().zip_map(p, |a, b| a - b).unwrap().norm() / p.norm();
        assert!(rel < 1e-2, "{rel}");
        assert!(rel > 0.0);

        store.set(b.layer_scale, Tensor::zeros([3])).unwrap();
        let out0 = b.forward(&store.ctx(false), &x, &w, &e).unwrap();
        assert_eq!(out0.value(), p);
        assert_eq!(out0.shape(), &[1, 3, 6, 6]);
    }

    #[test]
    fn output_depends_on_local_code() {
        let mut store = ParamStore::new();
        let g = Generator::new(&mut store, "g", tiny(), (16, 16), &mut rng(23)).unwrap();
        let e = Var::constant(randn([1, 6], 24));
        let w = Var::constant(randn([1, 5], 25));
        let z = Var::leaf(randn([1, 3], 26));
        let out = g.generate(&store.ctx(false), &e, &w, &z, (16, 16)).unwrap();
        let grads = out.image.sum().backward().unwrap();
        assert!(grads.wrt(&z).unwrap().max_abs() > 0.0);
    }

    #[test]
    fn generation_is_deterministic() {
        let mut store = ParamStore::new();
        let g = Generator::new(&mut store, "g", tiny(), (16, 16), &mut rng(27)).unwrap();
        let run = || {
            let out = g
                .generate(
                    &store.ctx(false),
                    &Var::constant(randn([1, 6], 1)),
                    &Var::constant(randn([1, 5], 2)),
                    &Var::constant(randn([1, 3], 3)),
                    (16, 16),
                )
                .unwrap();
            out.image.value().clone()
        };
        assert_eq!(run().data(), run().data());
    }

    #[test]
    fn spectral_bound_after_power_iteration() {
        let mut store = ParamStore::new();
        let g = Generator::new(&mut store, "g", tiny(), (16, 16), &mut rng(28)).unwrap();
        power_iterate(&mut store, 50).unwrap();
        let ctx = store.ctx(false);
        for conv in [&g.coarse_head, &g.final_head, &g.structure[0].conv1, &g.facade[0].conv_res] {
            let w = conv.effective_weight(&ctx).unwrap();
            assert!(top_singular_value(w.value()) <= 1.0 + 1e-3);
        }
    }
}
