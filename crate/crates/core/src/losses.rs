//! Training objectives for the generator and discriminators.
//!
//! Every L1 term is a mean over elements so the weights do not depend on
//! resolution.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::data::View;
use crate::embedder::Embedder;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvConfig, LEAKY_SLOPE};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Guard added to the image distance in the diversity ratio.
pub const DIV_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_adv: f64,
    pub lambda_rec: f64,
    pub lambda_perc: f64,
    pub lambda_id: f64,
    pub lambda_div: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_adv: 1.0,
            lambda_rec: 50.0,
            lambda_perc: 50.0,
            lambda_id: 10.0,
            lambda_div: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_adv", self.lambda_adv),
            ("lambda_rec", self.lambda_rec),
            ("lambda_perc", self.lambda_perc),
            ("lambda_id", self.lambda_id),
            ("lambda_div", self.lambda_div),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a finite value ≥ 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Sign of the generator's adversarial term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvSign {
    /// `-E[D(fake)]`, the usual hinge-generator objective.
    #[default]
    Negated,
    /// `+E[D(fake)]`.
    Positive,
}

/// Discriminator hinge loss with mismatched pairs. Inputs are scores of the
/// same shape (per-sample or scalar); hinges are taken elementwise and then
/// averaged.
pub fn d_hinge_loss(d_real: &Var, d_fake: &Var, d_mis: &Var) -> Result<Var> {
    let real = d_real.neg().add_scalar(1.0).relu().mean();
    let fake = d_fake.add_scalar(1.0).relu().mean();
    let mis = d_mis.add_scalar(1.0).relu().mean();
    real.add(&fake.add(&mis)?.mul_scalar(0.5))
}

pub fn g_adv_loss(d_fake: &Var, sign: AdvSign) -> Var {
    match sign {
        AdvSign::Negated => d_fake.mean().neg(),
        AdvSign::Positive => d_fake.mean(),
    }
}

fn mean_abs_diff(a: &Var, b: &Var) -> Result<Var> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(a.sub(b)?.abs().mean())
}

/// Mean absolute difference between generated and target images.
pub fn rec_loss(x_t: &Var, x_r: &Var) -> Result<Var> {
    mean_abs_diff(x_t, x_r)
}

/// Image to list of feature maps.
pub trait FeatureExtractor {
    fn features(&self, x: &Var) -> Result<Vec<Var>>;
}

/// Returns the image itself as the single feature map.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityExtractor;

impl FeatureExtractor for IdentityExtractor {
    fn features(&self, x: &Var) -> Result<Vec<Var>> {
        Ok(vec![x.clone()])
    }
}

/// Fixed random-weight conv pyramid: each stage is a stride-2 3x3 conv with
/// leaky-ReLU. Weights are frozen at construction.
#[derive(Clone, Debug)]
pub struct RandomConvPyramid {
    store: ParamStore,
    stages: Vec<Conv2d>,
}

impl RandomConvPyramid {
    pub const DEFAULT_CHANNELS: [usize; 3] = [16, 32, 64];

    pub fn new(seed: u64, channels: &[usize]) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut ci = 3;
        let stages = channels
            .iter()
            .enumerate()
            .map(|(i, &co)| {
                let c = Conv2d::new(&mut store, &format!("phi{i}"), ConvConfig::new(ci, co, 3, 2, 1), &mut rng);
                ci = co;
                c
            })
            .collect();
        store.freeze();
        RandomConvPyramid { store, stages }
    }

    pub fn standard(seed: u64) -> Self {
        Self::new(seed, &Self::DEFAULT_CHANNELS)
    }
}

impl FeatureExtractor for RandomConvPyramid {
    fn features(&self, x: &Var) -> Result<Vec<Var>> {
        let ctx = self.store.ctx(false);
        let mut h = x.clone();
        let mut out = Vec::with_capacity(self.stages.len());
        for s in &self.stages {
            h = s.forward(&ctx, &h)?.leaky_relu(LEAKY_SLOPE);
            out.push(h.clone());
        }
        Ok(out)
    }
}

/// Sum over feature layers of the mean absolute feature difference.
pub fn perceptual_loss(x_t: &Var, x_r: &Var, phi: &dyn FeatureExtractor) -> Result<Var> {
    if x_t.shape() != x_r.shape() {
        return Err(Error::shape(format!("{:?} vs {:?}", x_t.shape(), x_r.shape())));
    }
    let (ft, fr) = (phi.features(x_t)?, phi.features(x_r)?);
    let mut total = Var::scalar(0.0);
    for (a, b) in ft.iter().zip(&fr) {
        total = total.add(&mean_abs_diff(a, b)?)?;
    }
    Ok(total)
}

/// Bilinear downsample of the full-resolution target to the coarse output size.
pub fn coarse_target(x_t: &Var, coarse: &Var) -> Result<Var> {
    let (_, _, h, w) = coarse.value().dims4()?;
    x_t.resize_bilinear(h, w)
}

/// Batch mean of `1 - cos` between unit embeddings.
fn cosine_gap(a: &Var, b: &Var) -> Result<Var> {
    Ok(a.row_dot(b)?.neg().add_scalar(1.0).mean())
}

/// `[1 - cos(R(x_r), R(x_t))] + [1 - cos(R(x_r'), R(x_t'))]`, with `x_t'` the
/// bilinear downsample of `x_t` to the coarse size. `view` is the view the
/// images depict.
pub fn identity_loss(
    embedder: &Embedder,
    view: View,
    x_r: &Var,
    x_t: &Var,
    x_r_coarse: &Var,
) -> Result<Var> {
    let x_t_coarse = coarse_target(x_t, x_r_coarse)?;
    identity_loss_pairs(embedder, view, x_r, x_t, x_r_coarse, &x_t_coarse)
}

/// [`identity_loss`] with an explicit coarse target.
pub fn identity_loss_pairs(
    embedder: &Embedder,
    view: View,
    x_r: &Var,
    x_t: &Var,
    x_r_coarse: &Var,
    x_t_coarse: &Var,
) -> Result<Var> {
    identity_from_embeddings(
        &embedder.embed_var(x_r, view)?,
        &embedder.embed_var(x_t, view)?,
        &embedder.embed_var(x_r_coarse, view)?,
        &embedder.embed_var(x_t_coarse, view)?,
    )
}

/// The identity loss on precomputed unit embeddings `(n, E)`.
pub fn identity_from_embeddings(fine_r: &Var, fine_t: &Var, coarse_r: &Var, coarse_t: &Var) -> Result<Var> {
    cosine_gap(fine_r, fine_t)?.add(&cosine_gap(coarse_r, coarse_t)?)
}

/// `mean|z1 - z2| / (mean|img1 - img2| + eps)`; minimizing it pushes images
/// generated from different local codes apart.
pub fn diversity_loss(z1: &Var, z2: &Var, img1: &Var, img2: &Var) -> Result<Var> {
    let dz = mean_abs_diff(z1, z2)?;
    let di = mean_abs_diff(img1, img2)?;
    let inv = di.add_scalar(DIV_EPS).reciprocal()?;
    dz.mul(&inv)
}

/// Components of the generator objective on one batch.
#[derive(Clone, Debug)]
pub struct GLossParts {
    pub adv: Var,
    pub rec: Var,
    pub perc: Var,
    pub id: Var,
    /// Only present on steps that evaluate the diversity term.
    pub div: Option<Var>,
}

pub fn total_g_loss(parts: &GLossParts, w: &LossWeights) -> Result<Var> {
    let mut t = parts
        .adv
        .mul_scalar(w.lambda_adv)
        .add(&parts.rec.mul_scalar(w.lambda_rec))?
        .add(&parts.perc.mul_scalar(w.lambda_perc))?
        .add(&parts.id.mul_scalar(w.lambda_id))?;
    if let Some(div) = &parts.div {
        t = t.add(&div.mul_scalar(w.lambda_div))?;
    }
    Ok(t)
}

/// Converts a scalar value to a constant for the scalar-argument forms.
pub fn scalar(v: f64) -> Var {
    Var::constant(Tensor::scalar(v))
}
