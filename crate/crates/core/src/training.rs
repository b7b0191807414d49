//! Adversarial training loop: alternating discriminator and generator
//! updates, checkpointing, resume and loss curves.
//!
//! All randomness of a step (style and local codes, augmentation draws) comes
//! from a stream derived from `(seed, step)`, and batch order from
//! `(seed, epoch)`, so a run restored from a checkpoint continues exactly as
//! an uninterrupted one would.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::Var;
use crate::checkpoint::Container;
use crate::config::KvConfig;
use crate::data::{batch_indices, write_atomic, AugParams, Batch, PairedSample, View, diffaug};
use crate::discriminator::{mismatched, Discriminator, DiscriminatorConfig};
use crate::embedder::{EmbedTrainConfig, Embedder, Mining};
use crate::error::{Error, Result};
use crate::generator::{Generator, GeneratorConfig, GeneratorOutput};
use crate::losses::{
    d_hinge_loss, diversity_loss, g_adv_loss, identity_loss, perceptual_loss, rec_loss, total_g_loss, AdvSign,
    GLossParts, LossWeights, RandomConvPyramid,
};
use crate::params::{Adam, AdamConfig, ParamStore};
use crate::seed;
use crate::spectral::power_iterate;
use crate::tensor::Tensor;

const CHECKPOINT_KIND: &str = "training";
pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const CURVE_FILE: &str = "loss_curve.tsv";

const STREAM_GENERATOR: u64 = 1;
const STREAM_DISCRIMINATOR: u64 = 2;
const STREAM_STEP: u64 = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    A2g,
    G2a,
}

impl Direction {
    pub fn source(self) -> View {
        match self {
            Direction::A2g => View::Aerial,
            Direction::G2a => View::Ground,
        }
    }

    pub fn target(self) -> View {
        self.source().other()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Direction::A2g => "a2g",
            Direction::G2a => "g2a",
        }
    }
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "a2g" => Ok(Direction::A2g),
            "g2a" => Ok(Direction::G2a),
            _ => Err(Error::Config(format!("unknown direction `{s}` (a2g, g2a)"))),
        }
    }
}

/// Network size preset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelPreset {
    Toy,
    Full,
}

impl ModelPreset {
    pub fn generator(self) -> GeneratorConfig {
        match self {
            ModelPreset::Toy => GeneratorConfig::toy(),
            ModelPreset::Full => GeneratorConfig::full(),
        }
    }

    pub fn discriminators(self, embed_dim: usize) -> (DiscriminatorConfig, DiscriminatorConfig) {
        match self {
            ModelPreset::Toy => (
                DiscriminatorConfig::toy_fine(embed_dim),
                DiscriminatorConfig::toy_coarse(embed_dim),
            ),
            ModelPreset::Full => (
                DiscriminatorConfig::full_fine(embed_dim),
                DiscriminatorConfig::full_coarse(embed_dim),
            ),
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            ModelPreset::Toy => "toy",
            ModelPreset::Full => "full",
        }
    }
}

impl FromStr for ModelPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(ModelPreset::Toy),
            "full" => Ok(ModelPreset::Full),
            _ => Err(Error::Config(format!("unknown model `{s}` (toy, full)"))),
        }
    }
}

impl FromStr for AdvSign {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "negated" => Ok(AdvSign::Negated),
            "positive" => Ok(AdvSign::Positive),
            _ => Err(Error::Config(format!("unknown adv_sign `{s}` (negated, positive)"))),
        }
    }
}

impl FromStr for Mining {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Mining::All),
            "hardest" => Ok(Mining::Hardest),
            _ => Err(Error::Config(format!("unknown mining `{s}` (all, hardest)"))),
        }
    }
}

fn adv_sign_str(s: AdvSign) -> &'static str {
    match s {
        AdvSign::Negated => "negated",
        AdvSign::Positive => "positive",
    }
}

fn mining_str(m: Mining) -> &'static str {
    match m {
        Mining::All => "all",
        Mining::Hardest => "hardest",
    }
}

/// Everything that determines a run, embedder pretraining included.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub direction: Direction,
    pub model: ModelPreset,
    pub epochs: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub weights: LossWeights,
    pub adv_sign: AdvSign,
    /// Weight of the coarse discriminator's terms relative to the fine one.
    pub coarse_d_weight: f64,
    pub div_every: u64,
    /// Power iterations per step for every spectrally normalized weight.
    pub sn_iters: usize,
    pub seed: u64,
    pub perceptual_seed: u64,
    pub checkpoint_every: usize,
    pub embed_epochs: usize,
    pub embed_margin: f64,
    pub embed_lr: f64,
    pub embed_batch_size: usize,
    pub embed_mining: Mining,
    pub embed_seed: u64,
    /// Seed of the independently trained twin used for R@1.
    pub eval_embed_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            direction: Direction::A2g,
            model: ModelPreset::Toy,
            epochs: 200,
            lr_g: 1e-4,
            lr_d: 4e-4,
            beta1: 0.5,
            beta2: 0.999,
            batch_size: 8,
            weights: LossWeights::default(),
            adv_sign: AdvSign::Negated,
            coarse_d_weight: 1.0,
            div_every: 4,
            sn_iters: 1,
            seed: 0,
            perceptual_seed: 0,
            checkpoint_every: 10,
            embed_epochs: 200,
            embed_margin: 0.3,
            embed_lr: 1e-3,
            embed_batch_size: 8,
            embed_mining: Mining::All,
            embed_seed: 0,
            eval_embed_seed: 1,
        }
    }
}

impl TrainConfig {
    pub const KEYS: [&'static str; 27] = [
        "direction",
        "model",
        "epochs",
        "lr_g",
        "lr_d",
        "beta1",
        "beta2",
        "batch_size",
        "lambda_adv",
        "lambda_rec",
        "lambda_perc",
        "lambda_id",
        "lambda_div",
        "adv_sign",
        "coarse_d_weight",
        "div_every",
        "sn_iters",
        "seed",
        "perceptual_seed",
        "checkpoint_every",
        "embed_epochs",
        "embed_margin",
        "embed_lr",
        "embed_batch_size",
        "embed_mining",
        "embed_seed",
        "eval_embed_seed",
    ];

    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        kv.check_keys(&Self::KEYS)?;
        let d = TrainConfig::default();
        let w = &d.weights;
        let cfg = TrainConfig {
            direction: kv.parse_or("direction", d.direction)?,
            model: kv.parse_or("model", d.model)?,
            epochs: kv.parse_or("epochs", d.epochs)?,
            lr_g: kv.parse_or("lr_g", d.lr_g)?,
            lr_d: kv.parse_or("lr_d", d.lr_d)?,
            beta1: kv.parse_or("beta1", d.beta1)?,
            beta2: kv.parse_or("beta2", d.beta2)?,
            batch_size: kv.parse_or("batch_size", d.batch_size)?,
            weights: LossWeights {
                lambda_adv: kv.parse_or("lambda_adv", w.lambda_adv)?,
                lambda_rec: kv.parse_or("lambda_rec", w.lambda_rec)?,
                lambda_perc: kv.parse_or("lambda_perc", w.lambda_perc)?,
                lambda_id: kv.parse_or("lambda_id", w.lambda_id)?,
                lambda_div: kv.parse_or("lambda_div", w.lambda_div)?,
            },
            adv_sign: kv.parse_or("adv_sign", d.adv_sign)?,
            coarse_d_weight: kv.parse_or("coarse_d_weight", d.coarse_d_weight)?,
            div_every: kv.parse_or("div_every", d.div_every)?,
            sn_iters: kv.parse_or("sn_iters", d.sn_iters)?,
            seed: kv.parse_or("seed", d.seed)?,
            perceptual_seed: kv.parse_or("perceptual_seed", d.perceptual_seed)?,
            checkpoint_every: kv.parse_or("checkpoint_every", d.checkpoint_every)?,
            embed_epochs: kv.parse_or("embed_epochs", d.embed_epochs)?,
            embed_margin: kv.parse_or("embed_margin", d.embed_margin)?,
            embed_lr: kv.parse_or("embed_lr", d.embed_lr)?,
            embed_batch_size: kv.parse_or("embed_batch_size", d.embed_batch_size)?,
            embed_mining: kv.parse_or("embed_mining", d.embed_mining)?,
            embed_seed: kv.parse_or("embed_seed", d.embed_seed)?,
            eval_embed_seed: kv.parse_or("eval_embed_seed", d.eval_embed_seed)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str, source: &Path) -> Result<Self> {
        Self::from_kv(&KvConfig::parse(text, source)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2 (mismatched pairs)");
        }
        if self.div_every == 0 {
            return bad("div_every must be at least 1");
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every must be at least 1");
        }
        for (name, v) in [("lr_g", self.lr_g), ("lr_d", self.lr_d), ("embed_lr", self.embed_lr)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must be in [0, 1), got {v}")));
            }
        }
        if !(self.coarse_d_weight >= 0.0 && self.coarse_d_weight.is_finite()) {
            return bad("coarse_d_weight must be ≥ 0");
        }
        if self.embed_batch_size < 2 {
            return bad("embed_batch_size must be at least 2");
        }
        if self.embed_seed == self.eval_embed_seed {
            return bad("eval_embed_seed must differ from embed_seed");
        }
        Ok(())
    }

    /// Canonical text listing every key; the input to [`TrainConfig::hash`].
    pub fn to_text(&self) -> String {
        let w = &self.weights;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("direction", self.direction.as_str().into());
        kv("model", self.model.as_str().into());
        kv("epochs", self.epochs.to_string());
        kv("lr_g", self.lr_g.to_string());
        kv("lr_d", self.lr_d.to_string());
        kv("beta1", self.beta1.to_string());
        kv("beta2", self.beta2.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("lambda_adv", w.lambda_adv.to_string());
        kv("lambda_rec", w.lambda_rec.to_string());
        kv("lambda_perc", w.lambda_perc.to_string());
        kv("lambda_id", w.lambda_id.to_string());
        kv("lambda_div", w.lambda_div.to_string());
        kv("adv_sign", adv_sign_str(self.adv_sign).into());
        kv("coarse_d_weight", self.coarse_d_weight.to_string());
        kv("div_every", self.div_every.to_string());
        kv("sn_iters", self.sn_iters.to_string());
        kv("seed", self.seed.to_string());
        kv("perceptual_seed", self.perceptual_seed.to_string());
        kv("checkpoint_every", self.checkpoint_every.to_string());
        kv("embed_epochs", self.embed_epochs.to_string());
        kv("embed_margin", self.embed_margin.to_string());
        kv("embed_lr", self.embed_lr.to_string());
        kv("embed_batch_size", self.embed_batch_size.to_string());
        kv("embed_mining", mining_str(self.embed_mining).into());
        kv("embed_seed", self.embed_seed.to_string());
        kv("eval_embed_seed", self.eval_embed_seed.to_string());
        s
    }

    /// SHA-256 of the canonical text.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }

    /// Pretraining recipe for the conditioning embedder (`eval = false`) or
    /// its evaluation twin.
    pub fn embed_train(&self, eval: bool) -> EmbedTrainConfig {
        EmbedTrainConfig {
            epochs: self.embed_epochs,
            margin: self.embed_margin,
            lr: self.embed_lr,
            batch_size: self.embed_batch_size,
            seed: if eval { self.eval_embed_seed } else { self.embed_seed },
            mining: self.embed_mining,
        }
    }
}

/// Scalar losses of one step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    /// 1-based index of the completed step.
    pub step: u64,
    pub epoch: usize,
    pub d_fine: f64,
    pub d_coarse: f64,
    pub d_total: f64,
    pub g_adv: f64,
    pub rec: f64,
    pub perc: f64,
    pub id: f64,
    pub div: Option<f64>,
    pub g_total: f64,
}

impl LossRecord {
    pub const COLUMNS: [&'static str; 11] = [
        "step", "epoch", "d_fine", "d_coarse", "d_total", "g_adv", "rec", "perc", "id", "div", "g_total",
    ];

    pub fn tsv_row(&self) -> String {
        let div = self.div.map_or_else(|| "-".to_string(), |v| v.to_string());
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.step,
            self.epoch,
            self.d_fine,
            self.d_coarse,
            self.d_total,
            self.g_adv,
            self.rec,
            self.perc,
            self.id,
            div,
            self.g_total
        )
    }
}

pub fn curve_to_tsv(curve: &[LossRecord]) -> String {
    let mut s = LossRecord::COLUMNS.join("\t");
    s.push('\n');
    for r in curve {
        s.push_str(&r.tsv_row());
        s.push('\n');
    }
    s
}

/// Discriminator substep losses.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DLosses {
    pub fine: f64,
    pub coarse: f64,
    pub total: f64,
}

/// Generator substep losses.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GLosses {
    pub adv: f64,
    pub rec: f64,
    pub perc: f64,
    pub id: f64,
    pub div: Option<f64>,
    pub total: f64,
}

/// Random draws consumed by one training step.
#[derive(Clone, Debug)]
pub struct StepDraws {
    pub z_style: Tensor,
    pub z_local: Tensor,
    /// Second local code for the diversity term, drawn on every step.
    pub z_local2: Tensor,
    pub aug_d: AugParams,
    pub aug_d_coarse: AugParams,
    pub aug_g: AugParams,
    pub aug_g_coarse: AugParams,
}

pub fn gaussian<R: Rng + ?Sized>(shape: [usize; 2], rng: &mut R) -> Tensor {
    Tensor::from_fn(shape, |_| rng.sample(StandardNormal))
}

fn finite(v: &Var, what: &str) -> Result<f64> {
    let x = v.item();
    if !x.is_finite() {
        return Err(Error::NonFinite(format!("{what} loss ({x})")));
    }
    Ok(x)
}

/// Generator, discriminators, optimizers and loop position.
pub struct Trainer {
    pub config: TrainConfig,
    pub embedder: Embedder,
    pub generator: Generator,
    pub g_store: ParamStore,
    pub fine_d: Discriminator,
    pub coarse_d: Discriminator,
    pub d_store: ParamStore,
    pub adam_g: Adam,
    pub adam_d: Adam,
    pub phi: RandomConvPyramid,
    pub aerial_size: (usize, usize),
    pub ground_size: (usize, usize),
    /// Completed steps.
    pub step: u64,
    pub epoch: usize,
    /// Batches of the current epoch already consumed.
    pub batch_in_epoch: usize,
    pub curve: Vec<LossRecord>,
}

impl Trainer {
    pub fn new(
        config: TrainConfig,
        embedder: Embedder,
        aerial_size: (usize, usize),
        ground_size: (usize, usize),
    ) -> Result<Self> {
        config.validate()?;
        if !embedder.is_frozen() {
            return Err(Error::invalid("the conditioning embedder must be frozen before GAN training"));
        }
        let target = match config.direction.target() {
            View::Aerial => aerial_size,
            View::Ground => ground_size,
        };
        let mut gcfg = config.model.generator();
        gcfg.embed_dim = embedder.config.embed_dim;
        let mut g_store = ParamStore::new();
        let generator = Generator::new(
            &mut g_store,
            "g",
            gcfg,
            target,
            &mut seed::rng(config.seed, &[STREAM_GENERATOR]),
        )?;
        let (fcfg, ccfg) = config.model.discriminators(embedder.config.embed_dim);
        let mut d_store = ParamStore::new();
        let mut drng = seed::rng(config.seed, &[STREAM_DISCRIMINATOR]);
        let fine_d = Discriminator::new(&mut d_store, "d_fine", fcfg, &mut drng)?;
        let coarse_d = Discriminator::new(&mut d_store, "d_coarse", ccfg, &mut drng)?;
        fine_d.config.output_shape(target)?;
        coarse_d.config.output_shape(generator.config.coarse_shape(target)?)?;
        let adam_g = Adam::new(AdamConfig::new(config.lr_g, config.beta1, config.beta2));
        let adam_d = Adam::new(AdamConfig::new(config.lr_d, config.beta1, config.beta2));
        let phi = RandomConvPyramid::standard(config.perceptual_seed);
        Ok(Trainer {
            config,
            embedder,
            generator,
            g_store,
            fine_d,
            coarse_d,
            d_store,
            adam_g,
            adam_d,
            phi,
            aerial_size,
            ground_size,
            step: 0,
            epoch: 0,
            batch_in_epoch: 0,
            curve: Vec::new(),
        })
    }

    pub fn source_view(&self) -> View {
        self.config.direction.source()
    }

    pub fn target_view(&self) -> View {
        self.config.direction.target()
    }

    pub fn target_size(&self) -> (usize, usize) {
        self.generator.target
    }

    pub fn coarse_size(&self) -> (usize, usize) {
        let t = self.generator.target;
        self.generator.config.coarse_shape(t).expect("validated at construction")
    }

    /// Draws for step `step` with batch size `n`.
    pub fn draws(&self, step: u64, n: usize) -> StepDraws {
        let mut rng = seed::rng(self.config.seed, &[STREAM_STEP, step]);
        let g = &self.generator.config;
        let (h, w) = self.target_size();
        let (ch, cw) = self.coarse_size();
        let z_style = gaussian([n, g.style_dim], &mut rng);
        let z_local = gaussian([n, g.local_dim], &mut rng);
        let z_local2 = gaussian([n, g.local_dim], &mut rng);
        let aug_d = AugParams::sample(n, h, w, &mut rng);
        let aug_d_coarse = AugParams::sample(n, ch, cw, &mut rng);
        let aug_g = AugParams::sample(n, h, w, &mut rng);
        let aug_g_coarse = AugParams::sample(n, ch, cw, &mut rng);
        StepDraws {
            z_style,
            z_local,
            z_local2,
            aug_d,
            aug_d_coarse,
            aug_g,
            aug_g_coarse,
        }
    }

    /// Conditioning embeddings of source images `(n, 3, h, w)` in `[-1, 1]`.
    pub fn condition(&self, source: &Tensor) -> Result<Tensor> {
        self.embedder.embed(source, self.source_view())
    }

    /// Inference pass with constant parameters.
    pub fn generate(&self, e: &Tensor, z_style: &Tensor, z_local: &Tensor) -> Result<GeneratorOutput> {
        let ctx = self.g_store.ctx(false);
        let w = self.generator.mapping_forward(&ctx, &Var::constant(z_style.clone()))?;
        self.generator.generate(
            &ctx,
            &Var::constant(e.clone()),
            &w,
            &Var::constant(z_local.clone()),
            self.target_size(),
        )
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.len() < 2 {
            return Err(Error::invalid(format!(
                "training needs a batch of at least 2, got {}",
                batch.len()
            )));
        }
        let (_, _, h, w) = batch.view(self.target_view()).dims4()?;
        if (h, w) != self.target_size() {
            return Err(Error::shape(format!(
                "target images are {h}x{w}, generator produces {}x{}",
                self.target_size().0,
                self.target_size().1
            )));
        }
        Ok(())
    }

    /// Discriminator update on a detached fake. Real, fake and mismatched
    /// inputs share one augmentation draw.
    pub fn d_step(&mut self, batch: &Batch, e: &Tensor, draws: &StepDraws) -> Result<DLosses> {
        self.check_batch(batch)?;
        let fake = self.generate(e, &draws.z_style, &draws.z_local)?;
        let real = Var::constant(batch.view(self.target_view()).clone());
        let (ch, cw) = self.coarse_size();
        let real_c = real.resize_bilinear(ch, cw)?;
        let ev = Var::constant(e.clone());
        let emis = mismatched(&ev)?;
        let ctx = self.d_store.ctx(true);
        let hinge = |d: &Discriminator, real: &Var, fake: &Var, aug: &AugParams| -> Result<Var> {
            let r = diffaug(real, aug)?;
            let f = diffaug(fake, aug)?;
            d_hinge_loss(&d.score(&ctx, &r, &ev)?, &d.score(&ctx, &f, &ev)?, &d.score(&ctx, &r, &emis)?)
        };
        let fine = hinge(&self.fine_d, &real, &fake.image, &draws.aug_d)?;
        let coarse = hinge(&self.coarse_d, &real_c, &fake.coarse, &draws.aug_d_coarse)?;
        let total = fine.add(&coarse.mul_scalar(self.config.coarse_d_weight))?;
        let out = DLosses {
            fine: finite(&fine, "discriminator fine")?,
            coarse: finite(&coarse, "discriminator coarse")?,
            total: finite(&total, "discriminator total")?,
        };
        let grads = total.backward()?;

        self.adam_d.step(&mut self.d_store, &grads)?;
        Ok(out)
    }

    /// Generator update against the current discriminators. The diversity
    /// term is evaluated only when `with_div` is set.
    pub fn g_step(&mut self, batch: &Batch, e: &Tensor, draws: &StepDraws, with_div: bool) -> Result<GLosses> {
        self.check_batch(batch)?;
        let cfg = &self.config;
        let ctx = self.g_store.ctx(true);
        let dctx = self.d_store.ctx(false);
        let ev = Var::constant(e.clone());
        let w = self.generator.mapping_forward(&ctx, &Var::constant(draws.z_style.clone()))?;
        let z1 = Var::constant(draws.z_local.clone());
        let out = self.generator.generate(&ctx, &ev, &w, &z1, self.generator.target)?;
        let target = Var::constant(batch.view(self.target_view()).clone());
        let adv_fine = g_adv_loss(
            &self.fine_d.score(&dctx, &diffaug(&out.image, &draws.aug_g)?, &ev)?,
            cfg.adv_sign,
        );
        let adv_coarse = g_adv_loss(
            &self.coarse_d.score(&dctx, &diffaug(&out.coarse, &draws.aug_g_coarse)?, &ev)?,
            cfg.adv_sign,
        );
        let adv = adv_fine.add(&adv_coarse.mul_scalar(cfg.coarse_d_weight))?;
        let rec = rec_loss(&out.image, &target)?;
        let perc = perceptual_loss(&out.image, &target, &self.phi)?;
        let id = identity_loss(&self.embedder, self.target_view(), &out.image, &target, &out.coarse)?;
        let div = if with_div {
            let z2 = Var::constant(draws.z_local2.clone());
            let out2 = self.generator.generate(&ctx, &ev, &w, &z2, self.generator.target)?;
            Some(diversity_loss(&z1, &z2, &out.image, &out2.image)?)
        } else {
            None
        };
        let parts = GLossParts {
            adv,
            rec,
            perc,
            id,
            div,
        };
        let total = total_g_loss(&parts, &cfg.weights)?;
        let losses = GLosses {
            adv: finite(&parts.adv, "generator adversarial")?,
            rec: finite(&parts.rec, "reconstruction")?,
            perc: finite(&parts.perc, "perceptual")?,
            id: finite(&parts.id, "identity")?,
            div: parts.div.as_ref().map(|d| finite(d, "diversity")).transpose()?,
            total: finite(&total, "generator total")?,
        };
        let grads = total.backward()?;


        self.adam_g.step(&mut self.g_store, &grads)?;
        Ok(losses)
    }

    /// One full step: spectral power iteration, D update, G update.
    pub fn train_step(&mut self, batch: &Batch) -> Result<LossRecord> {
        self.check_batch(batch)?;
        let draws = self.draws(self.step, batch.len());
        let e = self.condition(batch.view(self.source_view()))?;
        power_iterate(&mut self.g_store, self.config.sn_iters)?;
        power_iterate(&mut self.d_store, self.config.sn_iters)?;
        let d = self.d_step(batch, &e, &draws)?;
        let with_div = self.step.is_multiple_of(self.config.div_every);
        let g = self.g_step(batch, &e, &draws, with_div)?;
        self.step += 1;
        let rec = LossRecord {
            step: self.step,
            epoch: self.epoch,
            d_fine: d.fine,
            d_coarse: d.coarse,
            d_total: d.total,
            g_adv: g.adv,
            rec: g.rec,
            perc: g.perc,
            id: g.id,
            div: g.div,
            g_total: g.total,
        };
        self.curve.push(rec.clone());
        Ok(rec)
    }

    /// Runs until `config.epochs` epochs are complete or `opts.max_steps`
    /// total steps have been taken. With an output directory, writes a
    /// checkpoint every `checkpoint_every` epochs and when stopping, plus the
    /// loss curve.
    pub fn run(&mut self, samples: &[PairedSample], opts: &RunOptions) -> Result<()> {
        let digest = self.embedder.digest();
        let save = |t: &Trainer| -> Result<()> {
            if let Some(dir) = &opts.out_dir {
                t.save(&dir.join(CHECKPOINT_FILE))?;
                write_atomic(&dir.join(CURVE_FILE), curve_to_tsv(&t.curve).as_bytes())?;
            }
            Ok(())
        };
        if self.step == 0 {
            save(self)?;
        }
        while self.epoch < self.config.epochs {
            let batches = batch_indices(samples.len(), self.config.batch_size, self.config.seed, self.epoch as u64)?;
            while self.batch_in_epoch < batches.len() {
                if opts.max_steps.is_some_and(|m| self.step >= m) {
                    return save(self);
                }
                let batch = Batch::gather(samples, &batches[self.batch_in_epoch])?;
                let rec = self.train_step(&batch)?;
                self.batch_in_epoch += 1;
                if let Some(cb) = &opts.on_step {
                    cb(&rec);
                }
            }
            self.epoch += 1;
            self.batch_in_epoch = 0;
            if self.epoch.is_multiple_of(self.config.checkpoint_every) || self.epoch == self.config.epochs {
                save(self)?;
            }
        }
        if self.embedder.digest() != digest {
            return Err(Error::invalid("conditioning embedder changed during training"));
        }
        save(self)
    }

    pub fn to_container(&self) -> Result<Container> {
        let meta = serde_json::json!({
            "config": self.config.to_text(),
            "config_hash": self.config.hash(),
            "embedder_digest": self.embedder.digest(),
            "aerial_size": self.aerial_size,
            "ground_size": self.ground_size,
            "step": self.step,
            "epoch": self.epoch,
            "batch_in_epoch": self.batch_in_epoch,
            "adam_g_steps": self.adam_g.steps(),
            "adam_d_steps": self.adam_d.steps(),
            "curve": self.curve,
        });
        let mut c = Container::new(CHECKPOINT_KIND, meta);
        c.extend_prefixed("g", self.g_store.named_tensors());
        c.extend_prefixed("d", self.d_store.named_tensors());
        for (n, t) in self.adam_g.export(&self.g_store) {
            c.push(format!("adam_g/{n}"), t);
        }
        for (n, t) in self.adam_d.export(&self.d_store) {
            c.push(format!("adam_d/{n}"), t);
        }
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.save(path)
    }

    /// Restores a run. `config`, when given, must hash to the stored value;
    /// otherwise the stored configuration is used.
    pub fn load(path: &Path, embedder: Embedder, config: Option<&TrainConfig>) -> Result<Self> {
        let c = Container::load(path)?;
        c.expect_kind(CHECKPOINT_KIND)?;
        let meta = c.meta.clone();
        let field = |k: &str| {
            meta.get(k)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("{}: missing `{k}`", path.display())))
        };
        let parse_err = |e: serde_json::Error| Error::Checkpoint(format!("{}: {e}", path.display()));
        let stored_text: String = serde_json::from_value(field("config")?).map_err(parse_err)?;
        let stored_hash: String = serde_json::from_value(field("config_hash")?).map_err(parse_err)?;
        let stored = TrainConfig::parse(&stored_text, path)?;
        let config = match config {
            Some(cfg) => {
                if cfg.hash() != stored_hash {
                    return Err(Error::Checkpoint(format!(
                        "config hash {} does not match checkpoint config hash {stored_hash} ({})",
                        cfg.hash(),
                        path.display()
                    )));
                }
                cfg.clone()
            }
            None => stored,
        };
        let digest: String = serde_json::from_value(field("embedder_digest")?).map_err(parse_err)?;
        if embedder.digest() != digest {
            return Err(Error::Checkpoint(format!(
                "embedder digest {} does not match the one used for training ({digest})",
                embedder.digest()
            )));
        }
        let aerial: (usize, usize) = serde_json::from_value(field("aerial_size")?).map_err(parse_err)?;
        let ground: (usize, usize) = serde_json::from_value(field("ground_size")?).map_err(parse_err)?;
        let mut t = Trainer::new(config, embedder, aerial, ground)?;
        t.step = serde_json::from_value(field("step")?).map_err(parse_err)?;
        t.epoch = serde_json::from_value(field("epoch")?).map_err(parse_err)?;
        t.batch_in_epoch = serde_json::from_value(field("batch_in_epoch")?).map_err(parse_err)?;
        t.curve = serde_json::from_value(field("curve")?).map_err(parse_err)?;
        let g_steps: u64 = serde_json::from_value(field("adam_g_steps")?).map_err(parse_err)?;
        let d_steps: u64 = serde_json::from_value(field("adam_d_steps")?).map_err(parse_err)?;
        let mut map = c.into_map();
        t.g_store.load_from(|n| map.remove(&format!("g/{n}")))?;
        t.d_store.load_from(|n| map.remove(&format!("d/{n}")))?;
        t.adam_g = Adam::import(t.adam_g.config, g_steps, &t.g_store, |n| map.remove(&format!("adam_g/{n}")));
        t.adam_d = Adam::import(t.adam_d.config, d_steps, &t.d_store, |n| map.remove(&format!("adam_d/{n}")));
        Ok(t)
    }
}

/// Controls for [`Trainer::run`].
/// Callback invoked after every completed step.
pub type StepHook = Box<dyn Fn(&LossRecord)>;

#[derive(Default)]
pub struct RunOptions {
    pub out_dir: Option<PathBuf>,
    /// Stop (and checkpoint) once this many total steps are done.
    pub max_steps: Option<u64>,
    pub on_step: Option<StepHook>,
}

/// Result of [`train`].
pub struct TrainOutcome {
    pub trainer: Trainer,
    pub checkpoint: PathBuf,
    pub curve: PathBuf,
}

/// Trains from scratch (or resumes when `out_dir` already holds a
/// checkpoint) on `samples`.
pub fn train(
    config: &TrainConfig,
    samples: &[PairedSample],
    embedder: Embedder,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    let first = samples.first().ok_or_else(|| Error::invalid("empty training set"))?;
    let aerial = (first.aerial.shape()[1], first.aerial.shape()[2]);
    let ground = (first.ground.shape()[1], first.ground.shape()[2]);
    let ckpt = out_dir.join(CHECKPOINT_FILE);
    let mut trainer = if ckpt.exists() {
        Trainer::load(&ckpt, embedder, Some(config))?
    } else {
        Trainer::new(config.clone(), embedder, aerial, ground)?
    };
    trainer.run(
        samples,
        &RunOptions {
            out_dir: Some(out_dir.to_path_buf()),
            ..Default::default()
        },
    )?;
    Ok(TrainOutcome {
        trainer,
        checkpoint: ckpt,
        curve: out_dir.join(CURVE_FILE),
    })
}

/// Unit embeddings along the segment from `e1` to `e2`: the endpoints are
/// returned unchanged and interior points are renormalized.
pub fn interpolation_path(e1: &[f64], e2: &[f64], steps: usize) -> Result<Vec<Vec<f64>>> {
    if steps < 2 {
        return Err(Error::invalid("interpolation needs at least 2 steps"));
    }
    if e1.len() != e2.len() {
        return Err(Error::shape(format!("embedding dims {} vs {}", e1.len(), e2.len())));
    }
    (0..steps)
        .map(|k| {
            if k == 0 {
                return Ok(e1.to_vec());
            }
            if k == steps - 1 {
                return Ok(e2.to_vec());
            }
            let t = k as f64 / (steps - 1) as f64;
            let v: Vec<f64> = e1.iter().zip(e2).map(|(a, b)| (1.0 - t) * a + t * b).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n < 1e-12 {
                return Err(Error::NonFinite("interpolated embedding has zero norm".into()));
            }
            Ok(v.into_iter().map(|x| x / n).collect())
        })
        .collect()
}

/// Images generated along the interpolation path with fixed style code
/// `z_style (1, S)` and local code `z_local (1, L)`.
pub fn interpolate_embeddings(
    trainer: &Trainer,
    e1: &[f64],
    e2: &[f64],
    steps: usize,
    z_style: &Tensor,
    z_local: &Tensor,
) -> Result<Vec<Tensor>> {
    interpolation_path(e1, e2, steps)?
        .into_iter()
        .map(|e| {
            let d = e.len();
            let et = Tensor::new([1, d], e)?;
            Ok(trainer.generate(&et, z_style, z_local)?.image.value().clone())
        })
        .collect()
}
