//! Instance statistics, embedding-driven modulation and attentional AdaIN.
//!
//! A feature map `x` is normalized per `(n, c)` to `x_hat`. Two small MLPs map
//! a conditioning vector to per-channel `gamma` and `beta`. Attentional AdaIN
//! then blends the modulated map with the plain normalized one through a
//! learned single-channel sigmoid mask:
//!
//! ```text
//! x_r = gamma * x_hat + beta
//! m   = sigmoid(conv3x3(x_hat))
//! out = x_r * m + x_hat * (1 - m)
//! ```
//!
//! Style AdaIN is the same modulation with the mask fixed at one.

use rand::Rng;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvConfig, Linear, Mlp};
use crate::params::{Ctx, ParamStore};
use crate::tensor::Tensor;

/// Variance floor inside the square root of the instance deviation.
pub const EPS: f64 = 1e-5;

/// Per-`(n, c)` spatial mean and deviation, each shaped `(n, c)`.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceStats {
    pub mu: Tensor,
    pub sigma: Tensor,
}

pub fn instance_stats(x: &Tensor) -> Result<InstanceStats> {
    let (n, c, h, w) = x.dims4()?;
    x.ensure_finite("feature map")?;
    let plane = h * w;
    let mut mu = Vec::with_capacity(n * c);
    let mut sigma = Vec::with_capacity(n * c);
    for p in x.data().chunks(plane) {
        let m = p.iter().sum::<f64>() / plane as f64;
        let var = p.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / plane as f64;
        mu.push(m);
        sigma.push((var + EPS).sqrt());
    }
    Ok(InstanceStats {
        mu: Tensor::new([n, c], mu)?,
        sigma: Tensor::new([n, c], sigma)?,
    })
}

/// `(x - mu) / sigma` with statistics broadcast over space.
pub fn normalize(x: &Tensor, stats: &InstanceStats) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    stats.mu.expect_shape(&[n, c])?;
    stats.sigma.expect_shape(&[n, c])?;
    let plane = h * w;
    let mut out = x.clone();
    for (p, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        let (m, s) = (stats.mu.data()[p], stats.sigma.data()[p]);
        chunk.iter_mut().for_each(|v| *v = (*v - m) / s);
    }
    Ok(out)
}

/// Per-channel scale and shift, each `(n, c)`.
#[derive(Clone, Debug)]
pub struct ModulationParams {
    pub gamma: Tensor,
    pub beta: Tensor,
}

/// A pair of MLPs producing `gamma` and `beta` from a conditioning vector.
///
/// Both have one hidden layer as wide as the input. Final layers start at zero
/// weight with bias 1 (gamma) and 0 (beta), so modulation is the identity at
/// initialization.
#[derive(Clone, Debug)]
pub struct Modulation {
    pub gamma: Mlp,
    pub beta: Mlp,
    pub cond_dim: usize,
    pub channels: usize,
}

impl Modulation {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cond_dim: usize,
        channels: usize,
        rng: &mut R,
    ) -> Self {
        let mut mlp = |tag: &str, bias: f64, rng: &mut R| Mlp {
            hidden: Linear::new(store, &format!("{name}.{tag}.hidden"), cond_dim, cond_dim, rng),
            out: Linear::constant(store, &format!("{name}.{tag}.out"), cond_dim, channels, bias),
        };
        let gamma = mlp("gamma", 1.0, rng);
        let beta = mlp("beta", 0.0, rng);
        Modulation {
            gamma,
            beta,
            cond_dim,
            channels,
        }
    }

    /// `(gamma, beta)` as `(n, c)` graph values.
    pub fn forward(&self, ctx: &Ctx<'_>, cond: &Var) -> Result<(Var, Var)> {
        let (_, d) = cond.value().dims2()?;
        if d != self.cond_dim {
            return Err(Error::shape(format!(
                "conditioning vector of dim {d}, expected {}",
                self.cond_dim
            )));
        }
        Ok((self.gamma.forward(ctx, cond)?, self.beta.forward(ctx, cond)?))
    }

    pub fn params(&self, store: &ParamStore, cond: &Tensor) -> Result<ModulationParams> {
        let (g, b) = self.forward(&store.ctx(false), &Var::constant(cond.clone()))?;
        Ok(ModulationParams {
            gamma: g.value().clone(),
            beta: b.value().clone(),
        })
    }
}

/// `gamma * x_hat + beta` with `(n, c)` parameters broadcast over space.
fn modulate(x_hat: &Var, gamma: &Var, beta: &Var) -> Result<Var> {
    let (n, c, _, _) = x_hat.value().dims4()?;
    gamma.value().expect_shape(&[n, c])?;
    x_hat
        .mul(&gamma.reshape([n, c, 1, 1])?)?
        .add(&beta.reshape([n, c, 1, 1])?)
}

fn checked_norm(x: &Var, channels: usize) -> Result<Var> {
    let (_, c, _, _) = x.value().dims4()?;
    if c != channels {
        return Err(Error::shape(format!("feature map has {c} channels, layer expects {channels}")));
    }
    x.value().ensure_finite("feature map")?;
    x.instance_norm(EPS)
}

/// How the blend mask of [`AttnAdain`] is obtained.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MaskMode {
    Learned,
    /// Every mask entry replaced by a constant (inspection and tests).
    Fixed(f64),
}

#[derive(Clone, Debug)]
pub struct AttnAdain {
    pub modulation: Modulation,
    /// 3x3, one output channel, zero-initialized bias.
    pub mask_conv: Conv2d,
}

impl AttnAdain {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        embed_dim: usize,
        channels: usize,
        rng: &mut R,
    ) -> Self {
        let modulation = Modulation::new(store, name, embed_dim, channels, rng);
        let mask_conv = Conv2d::new(store, &format!("{name}.mask"), ConvConfig::same(channels, 1, 3), rng);
        AttnAdain {
            modulation,
            mask_conv,
        }
    }

    pub fn channels(&self) -> usize {
        self.modulation.channels
    }

    /// Sigmoid mask `(n, 1, h, w)` computed from a normalized map.
    pub fn mask(&self, ctx: &Ctx<'_>, x_hat: &Var) -> Result<Var> {
        Ok(self.mask_conv.forward(ctx, x_hat)?.sigmoid())
    }

    pub fn forward(&self, ctx: &Ctx<'_>, x: &Var, e: &Var) -> Result<Var> {
        self.forward_with_mask(ctx, x, e, MaskMode::Learned)
    }

    pub fn forward_with_mask(&self, ctx: &Ctx<'_>, x: &Var, e: &Var, mode: MaskMode) -> Result<Var> {
        let x_hat = checked_norm(x, self.channels())?;
        let (gamma, beta) = self.modulation.forward(ctx, e)?;
        let x_r = modulate(&x_hat, &gamma, &beta)?;
        let m = match mode {
            MaskMode::Learned => self.mask(ctx, &x_hat)?,
            MaskMode::Fixed(v) => {
                let (n, _, h, w) = x.value().dims4()?;
                Var::constant(Tensor::full([n, 1, h, w], v))
            }
        };
        // x_hat + m * (x_r - x_hat)
        x_hat.add(&x_r.sub(&x_hat)?.mul(&m)?)
    }
}

/// AdaIN driven by a style code, no mask.
#[derive(Clone, Debug)]
pub struct StyleAdain {
    pub modulation: Modulation,
}

impl StyleAdain {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        style_dim: usize,
        channels: usize,
        rng: &mut R,
    ) -> Self {
        StyleAdain {
            modulation: Modulation::new(store, name, style_dim, channels, rng),
        }
    }

    pub fn forward(&self, ctx: &Ctx<'_>, x: &Var, w: &Var) -> Result<Var> {
        let x_hat = checked_norm(x, self.modulation.channels)?;
        let (gamma, beta) = self.modulation.forward(ctx, w)?;
        modulate(&x_hat, &gamma, &beta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::sigmoid;
    use crate::gradcheck::{check_inputs, check_params, GradCheckOptions};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn randomize(store: &mut ParamStore, seed: u64, scale: f64) {
        let mut r = rng(seed);
        for p in store.trainable().collect::<Vec<_>>() {
            let shape = store.value(p).shape().to_vec();
            store.set(p, Tensor::randn(shape, &mut r).scale(scale)).unwrap();
        }
    }

    #[test]
    fn stats_of_constant_map() {
        let s = instance_stats(&Tensor::full([1, 2, 3, 3], 5.0)).unwrap();
        assert!(s.mu.data().iter().all(|&m| m == 5.0));
        assert!(s.sigma.data().iter().all(|&v| (v - EPS.sqrt()).abs() < 1e-15));
        assert!((EPS.sqrt() - 3.162e-3).abs() < 1e-6);
    }

    #[test]
    fn stats_of_two_values() {
        let x = Tensor::new([1, 1, 1, 2], vec![1.0, 3.0]).unwrap();
        let s = instance_stats(&x).unwrap();
        assert_eq!(s.mu.data(), &[2.0]);
        assert!((s.sigma.data()[0] - (1.0 + EPS).sqrt()).abs() < 1e-15);
        let y = normalize(&x, &s).unwrap();
        let k = 1.0 / (1.0 + EPS).sqrt();
        assert!((y.data()[0] + k).abs() < 1e-15 && (y.data()[1] - k).abs() < 1e-15);
    }

    #[test]
    fn stats_match_brute_force_loop() {
        let x = Tensor::randn([2, 4, 8, 8], &mut rng(1));
        let s = instance_stats(&x).unwrap();
        for n in 0..2 {
            for c in 0..4 {
                let mut sum = 0.0;
                for i in 0..64 {
                    sum += x.data()[(n * 4 + c) * 64 + i];
                }
                let mean = sum / 64.0;
                let mut sq = 0.0;
                for i in 0..64 {
                    let d = x.data()[(n * 4 + c) * 64 + i] - mean;
                    sq += d * d;
                }
                let std = (sq / 64.0 + EPS).sqrt();
                assert!((s.mu.data()[n * 4 + c] - mean).abs() < 1e-12);
                assert!((s.sigma.data()[n * 4 + c] - std).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn non_finite_map_is_rejected() {
        let mut x = Tensor::zeros([1, 1, 2, 2]);
        x.data_mut()[1] = f64::NAN;
        let err = instance_stats(&x).unwrap_err();
        assert_eq!(err.to_string(), "non-finite feature map");
    }

    #[test]
    fn normalize_shape_mismatch() {
        let x = Tensor::zeros([1, 2, 2, 2]);
        let s = instance_stats(&Tensor::zeros([1, 3, 2, 2])).unwrap();
        assert!(normalize(&x, &s).is_err());
    }

    #[test]
    fn normalized_constant_is_zero() {
        let x = Tensor::full([1, 2, 3, 3], -4.0);
        let y = normalize(&x, &instance_stats(&x).unwrap()).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fresh_modulation_is_identity() {
        let mut store = ParamStore::new();
        let m = Modulation::new(&mut store, "m", 6, 4, &mut rng(2));
        let e = Tensor::randn([3, 6], &mut rng(3));
        let p = m.params(&store, &e).unwrap();
        assert!(p.gamma.data().iter().all(|&v| v == 1.0));
        assert!(p.beta.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_embedding_passes_output_bias() {
        let mut store = ParamStore::new();
        let m = Modulation::new(&mut store, "m", 5, 3, &mut rng(4));
        let mut r = rng(5);
        for lin in [&m.gamma.out, &m.beta.out] {
            store.set(lin.weight, Tensor::randn([3, 5], &mut r)).unwrap();
            store.set(lin.bias.unwrap(), Tensor::randn([3], &mut r)).unwrap();
        }
        let p = m.params(&store, &Tensor::zeros([1, 5])).unwrap();
        assert_eq!(p.gamma.data(), store.value(m.gamma.out.bias.unwrap()).data());
        assert_eq!(p.beta.data(), store.value(m.beta.out.bias.unwrap()).data());
    }

    #[test]
    fn modulation_matches_matrix_oracle() {
        let mut store = ParamStore::new();
        let m = Modulation::new(&mut store, "m", 5, 3, &mut rng(6));
        randomize(&mut store, 7, 0.5);
        let e = Tensor::randn([2, 5], &mut rng(8));
        let p = m.params(&store, &e).unwrap();
        let oracle = |mlp: &Mlp| -> Vec<f64> {
            let w1 = store.value(mlp.hidden.weight).data();
            let b1 = store.value(mlp.hidden.bias.unwrap()).data();
            let w2 = store.value(mlp.out.weight).data();
            let b2 = store.value(mlp.out.bias.unwrap()).data();
            let mut out = Vec::new();
            for n in 0..2 {
                let x = &e.data()[n * 5..(n + 1) * 5];
                let h: Vec<f64> = (0..5)
                    .map(|i| {
                        let z: f64 = (0..5).map(|j| w1[i * 5 + j] * x[j]).sum::<f64>() + b1[i];
                        if z > 0.0 { z } else { 0.2 * z }
                    })
                    .collect();
                for o in 0..3 {
                    out.push((0..5).map(|j| w2[o * 5 + j] * h[j]).sum::<f64>() + b2[o]);
                }
            }
            out
        };
        for (got, want) in p.gamma.data().iter().zip(oracle(&m.gamma)) {
            assert!((got - want).abs() < 1e-12);
        }
        for (got, want) in p.beta.data().iter().zip(oracle(&m.beta)) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn wrong_conditioning_dim() {
        let mut store = ParamStore::new();
        let m = Modulation::new(&mut store, "m", 5, 3, &mut rng(9));
        assert!(m.params(&store, &Tensor::zeros([1, 4])).is_err());
    }

    fn layer(seed: u64, e_dim: usize, c: usize) -> (ParamStore, AttnAdain) {
        let mut store = ParamStore::new();
        let l = AttnAdain::new(&mut store, "a", e_dim, c, &mut rng(seed));
        (store, l)
    }

    #[test]
    fn zero_mask_conv_gives_half() {
        let (mut store, l) = layer(10, 4, 3);
        store.set(l.mask_conv.weight, Tensor::zeros([1, 3, 3, 3])).unwrap();
        let x = Var::constant(Tensor::randn([2, 3, 4, 4], &mut rng(11)));
        let m = l.mask(&store.ctx(false), &x).unwrap();
        assert_eq!(m.shape(), &[2, 1, 4, 4]);
        assert!(m.value().data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn saturated_logit_gives_one() {
        let (mut store, l) = layer(12, 4, 2);
        let mut w = Tensor::zeros([1, 2, 3, 3]);
        w.data_mut()[4] = 1.0; // centre tap of channel 0
        store.set(l.mask_conv.weight, w).unwrap();
        let mut x = Tensor::zeros([1, 2, 3, 3]);
        x.data_mut()[4] = 20.0;
        let m = l.mask(&store.ctx(false), &Var::constant(x)).unwrap();
        assert!(m.value().data()[4] >= 1.0 - 1e-8);
    }

    #[test]
    fn mask_matches_direct_convolution() {
        let (mut store, l) = layer(13, 4, 3);
        store.set(l.mask_conv.bias, Tensor::scalar(0.3).into_reshape([1]).unwrap()).unwrap();
        let x = Tensor::randn([1, 3, 5, 4], &mut rng(14));
        let m = l.mask(&store.ctx(false), &Var::constant(x.clone())).unwrap();
        let w = store.value(l.mask_conv.weight).data();
        for y in 0..5 {
            for xx in 0..4 {
                let mut acc = 0.3;
                for c in 0..3 {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let (iy, ix) = (y as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                            if (0..5).contains(&iy) && (0..4).contains(&ix) {
                                acc += w[(c * 3 + ky) * 3 + kx] * x.data()[(c * 5 + iy as usize) * 4 + ix as usize];
                            }
                        }
                    }
                }
                assert!((m.value().data()[y * 4 + xx] - sigmoid(acc)).abs() < 1e-12);
            }
        }
    }

    fn x_hat_of(x: &Tensor) -> Tensor {
        normalize(x, &instance_stats(x).unwrap()).unwrap()
    }

    #[test]
    fn forced_masks_select_branches() {
        let (mut store, l) = layer(15, 4, 3);
        randomize(&mut store, 16, 0.4);
        let x = Tensor::randn([2, 3, 4, 4], &mut rng(17));
        let e = Tensor::randn([2, 4], &mut rng(18));
        let ctx = store.ctx(false);
        let (xv, ev) = (Var::constant(x.clone()), Var::constant(e.clone()));
        let p = l.modulation.params(&store, &e).unwrap();
        let x_hat = x_hat_of(&x);
        let mut x_r = x_hat.clone();
        for (i, v) in x_r.data_mut().iter_mut().enumerate() {
            let nc = i / 16;
            *v = p.gamma.data()[nc] * *v + p.beta.data()[nc];
        }
        let ones = l.forward_with_mask(&ctx, &xv, &ev, MaskMode::Fixed(1.0)).unwrap();
        assert!(ones.value().max_abs_diff(&x_r) < 1e-12);
        let zeros = l.forward_with_mask(&ctx, &xv, &ev, MaskMode::Fixed(0.0)).unwrap();
        assert!(zeros.value().max_abs_diff(&x_hat) < 1e-12);
    }

    #[test]
    fn fresh_layer_is_identity_on_normalized_input() {
        let (store, l) = layer(19, 6, 3);
        let x = Tensor::randn([2, 3, 5, 5], &mut rng(20)).scale(3.0);
        let e = Tensor::randn([2, 6], &mut rng(21));
        let out = l
            .forward(&store.ctx(false), &Var::constant(x.clone()), &Var::constant(e))
            .unwrap();
        assert!(out.value().max_abs_diff(&x_hat_of(&x)) < 1e-6);
    }

    #[test]
    fn style_adain_affine_statistics() {
        let mut store = ParamStore::new();
        let s = StyleAdain::new(&mut store, "s", 4, 2, &mut rng(22));
        let x = Tensor::randn([1, 2, 6, 6], &mut rng(23));
        let w = Var::constant(Tensor::randn([1, 4], &mut rng(24)));
        let fresh = s.forward(&store.ctx(false), &Var::constant(x.clone()), &w).unwrap();
        assert!(fresh.value().max_abs_diff(&x_hat_of(&x)) < 1e-12);

        store.set(s.modulation.gamma.out.bias.unwrap(), Tensor::full([2], 2.0)).unwrap();
        store.set(s.modulation.beta.out.bias.unwrap(), Tensor::full([2], 3.0)).unwrap();
        let out = s.forward(&store.ctx(false), &Var::constant(x_hat_of(&x)), &w).unwrap();
        let st = instance_stats(out.value()).unwrap();
        for (m, sd) in st.mu.data().iter().zip(st.sigma.data()) {
            assert!((m - 3.0).abs() < 1e-6);
            assert!((sd - 2.0).abs() < 1e-3);
        }
    }

    #[test]
    fn style_adain_matches_affine_oracle() {
        let mut store = ParamStore::new();
        let s = StyleAdain::new(&mut store, "s", 4, 3, &mut rng(25));
        randomize(&mut store, 26, 0.5);
        let x = Tensor::randn([2, 3, 4, 5], &mut rng(27));
        let w = Tensor::randn([2, 4], &mut rng(28));
        let p = s.modulation.params(&store, &w).unwrap();
        let out = s
            .forward(&store.ctx(false), &Var::constant(x.clone()), &Var::constant(w))
            .unwrap();
        let x_hat = x_hat_of(&x);
        for (i, v) in out.value().data().iter().enumerate() {
            let nc = i / 20;
            let want = p.gamma.data()[nc] * x_hat.data()[i] + p.beta.data()[nc];
            assert!((v - want).abs() < 1e-12);
        }
    }

    #[test]
    fn attn_adain_gradients_match_finite_differences() {
        let (mut store, l) = layer(29, 3, 2);
        randomize(&mut store, 30, 0.5);
        let x = Tensor::randn([2, 2, 4, 4], &mut rng(31));
        let e = Tensor::randn([2, 3], &mut rng(32));
        let opts = GradCheckOptions::default();
        let rep = check_inputs(
            |v| Ok(l.forward(&store.ctx(false), &v[0], &v[1])?.square().sum()),
            &[x.clone(), e.clone()],
            &opts,
        )
        .unwrap();
        assert!(rep.max_rel_err() < 1e-4, "{rep:?}");
        let (xv, ev) = (Var::constant(x), Var::constant(e));
        let rep = check_params(
            &mut store,
            |s| Ok(l.forward(&s.ctx(true), &xv, &ev)?.square().sum()),
            None,
            &opts,
        )
        .unwrap();
        assert!(rep.max_rel_err() < 1e-4, "{rep:?}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn blend_lies_between_branches(seed in 0u64..10_000) {
            let (mut store, l) = layer(seed, 3, 2);
            randomize(&mut store, seed + 1, 0.8);
            let x = Tensor::randn([1, 2, 4, 4], &mut rng(seed + 2));
            let e = Tensor::randn([1, 3], &mut rng(seed + 3));
            let ctx = store.ctx(false);
            let (xv, ev) = (Var::constant(x), Var::constant(e));
            let out = l.forward(&ctx, &xv, &ev).unwrap();
            let hat = l.forward_with_mask(&ctx, &xv, &ev, MaskMode::Fixed(0.0)).unwrap();
            let mod_ = l.forward_with_mask(&ctx, &xv, &ev, MaskMode::Fixed(1.0)).unwrap();
            let m = l.mask(&ctx, &Var::constant(hat.value().clone())).unwrap();
            prop_assert!(m.value().data().iter().all(|&v| v > 0.0 && v < 1.0));
            for ((o, a), b) in out.value().data().iter().zip(hat.value().data()).zip(mod_.value().data()) {
                prop_assert!(*o >= a.min(*b) - 1e-12 && *o <= a.max(*b) + 1e-12);
            }
        }

        #[test]
        fn normalization_is_idempotent(seed in 0u64..10_000) {
            let x = Tensor::randn([1, 3, 5, 5], &mut rng(seed)).scale(2.0);
            let once = x_hat_of(&x);
            let twice = x_hat_of(&once);
            prop_assert!(once.max_abs_diff(&twice) < 1e-3);
        }
    }
}
