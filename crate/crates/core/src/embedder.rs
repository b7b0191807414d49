//! Two-branch retrieval embedder.
//!
//! Each view has its own convolutional branch (stride-2 3x3 convs with
//! leaky-ReLU, global average pooling, linear projection) ending in an
//! L2-normalized embedding. The branches are trained jointly with a symmetric
//! hardest-negative triplet loss over cosine distance, then frozen. The frozen
//! model conditions the generator, scores identity, and a twin trained with a
//! different seed measures retrieval accuracy.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::checkpoint::Container;
use crate::data::{batch_indices, to_signed, PairedSample, View};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvConfig, Linear, LEAKY_SLOPE};
use crate::params::{Adam, AdamConfig, Ctx, ParamStore};
use crate::seed;
use crate::tensor::Tensor;

const CHECKPOINT_KIND: &str = "embedder";
/// Images per forward pass when embedding large sets.
const CHUNK: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbedderConfig {
    pub embed_dim: usize,
    /// Output channels of the stride-2 conv blocks.
    pub channels: Vec<usize>,
    pub aerial_size: (usize, usize),
    pub ground_size: (usize, usize),
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        EmbedderConfig {
            embed_dim: 384,
            channels: vec![32, 64, 128, 256],
            aerial_size: (64, 64),
            ground_size: (32, 128),
        }
    }
}

impl EmbedderConfig {
    pub fn input_size(&self, view: View) -> (usize, usize) {
        match view {
            View::Aerial => self.aerial_size,
            View::Ground => self.ground_size,
        }
    }

    /// Width of the pooled features fed to the projection.
    pub fn feature_dim(&self) -> usize {
        *self.channels.last().unwrap_or(&3)
    }
}

#[derive(Clone, Debug)]
pub struct Branch {
    pub convs: Vec<Conv2d>,
    pub proj: Linear,
}

#[derive(Clone, Debug)]
pub struct Embedder {
    pub config: EmbedderConfig,
    pub store: ParamStore,
    pub aerial: Branch,
    pub ground: Branch,
    /// Seed used for initialization and training order.
    pub seed: u64,
    pub trained_epochs: usize,
}

impl Embedder {
    pub fn new(config: EmbedderConfig, seed_value: u64) -> Result<Self> {
        if config.embed_dim == 0 || config.channels.is_empty() || config.channels.contains(&0) {
            return Err(Error::invalid("embedder dimensions must be positive"));
        }
        let mut rng = seed::rng(seed_value, &[0xe3b]);
        let mut store = ParamStore::new();
        let mut branch = |view: View| {
            let mut ci = 3;
            let convs = config
                .channels
                .iter()
                .enumerate()
                .map(|(i, &co)| {
                    let c = Conv2d::new(
                        &mut store,
                        &format!("{}.conv{i}", view.as_str()),
                        ConvConfig::new(ci, co, 3, 2, 1),
                        &mut rng,
                    );
                    // He initialization for leaky-ReLU keeps activations from
                    // shrinking through the stack.
                    let fan_in = (ci * 9) as f64;
                    let std = (2.0 / ((1.0 + LEAKY_SLOPE * LEAKY_SLOPE) * fan_in)).sqrt();
                    let w = Tensor::randn([co, ci, 3, 3], &mut rng).scale(std);
                    store.set(c.weight, w).expect("same shape");
                    ci = co;
                    c
                })
                .collect();
            let proj = Linear::new(&mut store, &format!("{}.proj", view.as_str()), ci, config.embed_dim, &mut rng);
            Branch { convs, proj }
        };
        let aerial = branch(View::Aerial);
        let ground = branch(View::Ground);
        Ok(Embedder {
            config,
            store,
            aerial,
            ground,
            seed: seed_value,
            trained_epochs: 0,
        })
    }

    pub fn branch(&self, view: View) -> &Branch {
        match view {
            View::Aerial => &self.aerial,
            View::Ground => &self.ground,
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.store.is_frozen()
    }

    pub fn freeze(&mut self) {
        self.store.freeze();
    }

    /// SHA-256 of every parameter.
    pub fn digest(&self) -> String {
        self.store.digest()
    }

    /// Pooled branch features `(n, C)` for images in `[-1, 1]`, resized to
    /// the branch's input resolution.
    pub fn features_var(&self, ctx: &Ctx<'_>, x: &Var, view: View) -> Result<Var> {
        let (n, c, _, _) = x.value().dims4()?;
        if c != 3 {
            return Err(Error::shape(format!("embedder input has {c} channels, expected 3")));
        }
        let (h, w) = self.config.input_size(view);
        let mut h_ = x.resize_bilinear(h, w)?;
        for conv in &self.branch(view).convs {
            h_ = conv.forward(ctx, &h_)?.leaky_relu(LEAKY_SLOPE);
        }
        let ch = h_.shape()[1];
        h_.mean_axes(&[2, 3])?.reshape([n, ch])
    }

    /// Unit-norm embeddings `(n, E)`. Gradients flow to `x`; they reach the
    /// parameters only while the embedder is not frozen and `ctx` tracks.
    pub fn embed_with(&self, ctx: &Ctx<'_>, x: &Var, view: View) -> Result<Var> {
        let f = self.features_var(ctx, x, view)?;
        self.branch(view).proj.forward(ctx, &f)?.l2_normalize_rows()
    }

    /// Differentiable embedding through the current parameters.
    pub fn embed_var(&self, x: &Var, view: View) -> Result<Var> {
        self.embed_with(&self.store.ctx(true), x, view)
    }

    fn chunked(&self, images: &Tensor, f: impl Fn(&Var) -> Result<Var>) -> Result<Tensor> {
        let (n, _, _, _) = images.dims4()?;
        let mut parts = Vec::new();
        let mut i = 0;
        while i < n {
            let k = CHUNK.min(n - i);
            parts.push(f(&Var::constant(images.slice_rows(i, k)?))?.value().clone());
            i += k;
        }
        Tensor::concat_rows(&parts)
    }

    /// Embeddings `(n, E)` of images `(n, 3, h, w)` in `[-1, 1]`.
    pub fn embed(&self, images: &Tensor, view: View) -> Result<Tensor> {
        let ctx = self.store.ctx(false);
        self.chunked(images, |x| self.embed_with(&ctx, x, view))
    }

    /// Pooled penultimate features `(n, C)`.
    pub fn pooled_features(&self, images: &Tensor, view: View) -> Result<Tensor> {
        let ctx = self.store.ctx(false);
        self.chunked(images, |x| self.features_var(&ctx, x, view))
    }

    pub fn to_container(&self) -> Result<Container> {
        let meta = serde_json::json!({
            "config": self.config,
            "seed": self.seed,
            "frozen": self.is_frozen(),
            "trained_epochs": self.trained_epochs,
            "digest": self.digest(),
        });
        let mut c = Container::new(CHECKPOINT_KIND, meta);
        c.extend_prefixed("param", self.store.named_tensors());
        Ok(c)
    }

    pub fn from_container(c: Container) -> Result<Self> {
        c.expect_kind(CHECKPOINT_KIND)?;
        let meta = c.meta.clone();
        let field = |k: &str| meta.get(k).cloned().ok_or_else(|| Error::Checkpoint(format!("missing `{k}`")));
        let parse = |e: serde_json::Error| Error::Checkpoint(e.to_string());
        let config: EmbedderConfig = serde_json::from_value(field("config")?).map_err(parse)?;
        let seed_value: u64 = serde_json::from_value(field("seed")?).map_err(parse)?;
        let frozen: bool = serde_json::from_value(field("frozen")?).map_err(parse)?;
        let epochs: usize = serde_json::from_value(field("trained_epochs")?).map_err(parse)?;
        let digest: String = serde_json::from_value(field("digest")?).map_err(parse)?;
        let mut e = Embedder::new(config, seed_value)?;
        let mut map = c.into_map();
        e.store.load_from(|name| map.remove(&format!("param/{name}")))?;
        if e.digest() != digest {
            return Err(Error::Checkpoint("embedder parameter digest mismatch".into()));
        }
        e.trained_epochs = epochs;
        if frozen {
            e.freeze();
        }
        Ok(e)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(Container::load(path)?)
    }
}

/// `mean(max(0, margin + d_ap - d_an))` over rows.
pub fn triplet_loss(d_ap: &Var, d_an: &Var, margin: f64) -> Result<Var> {
    Ok(d_ap.sub(d_an)?.add_scalar(margin).relu().mean())
}

/// Cosine distance `1 - <a_i, b_i>` between unit rows, shape `(n)`.
pub fn cosine_distance_rows(a: &Var, b: &Var) -> Result<Var> {
    Ok(a.row_dot(b)?.neg().add_scalar(1.0))
}

/// Symmetric hardest-negative triplet loss. Row `i` of `a` and `g` form the
/// positive pair; the negative for each anchor is the closest row of the
/// other view with a different location id.
pub fn batch_hard_triplet_loss(a: &Var, g: &Var, ids: &[String], margin: f64) -> Result<Var> {
    let (n, _) = a.value().dims2()?;
    g.value().expect_shape(a.shape())?;
    if ids.len() != n {
        return Err(Error::shape(format!("{} ids for {n} rows", ids.len())));
    }
    let sim = a.value().matmul(&g.value().transpose2()?)?;
    let hardest = |by_row: bool| -> Vec<Option<usize>> {
        (0..n)
            .map(|i| {
                (0..n)
                    .filter(|&j| ids[j] != ids[i])
                    .max_by(|&x, &y| {
                        let (sx, sy) = if by_row {
                            (sim.data()[i * n + x], sim.data()[i * n + y])
                        } else {
                            (sim.data()[x * n + i], sim.data()[y * n + i])
                        };
                        sx.total_cmp(&sy).then(y.cmp(&x))
                    })
            })
            .collect()
    };
    let mut terms = Vec::new();
    for (anchor, other, neg) in [(a, g, hardest(true)), (g, a, hardest(false))] {
        let rows: Vec<usize> = (0..n).filter(|&i| neg[i].is_some()).collect();
        if rows.is_empty() {
            return Err(Error::invalid("no negatives available"));
        }
        let negs: Vec<usize> = rows.iter().map(|&i| neg[i].expect("filtered")).collect();
        let anc = anchor.gather_rows(&rows)?;
        let d_ap = cosine_distance_rows(&anc, &other.gather_rows(&rows)?)?;
        let d_an = cosine_distance_rows(&anc, &other.gather_rows(&negs)?)?;
        terms.push(triplet_loss(&d_ap, &d_an, margin)?);
    }
    Ok(terms[0].add(&terms[1])?.mul_scalar(0.5))
}

/// Symmetric triplet loss averaged over every in-batch negative: the mean of
/// `max(0, margin + d(a_i, g_i) - d(a_i, g_j))` over pairs `i, j` with
/// different location ids, in both retrieval directions.
pub fn batch_all_triplet_loss(a: &Var, g: &Var, ids: &[String], margin: f64) -> Result<Var> {
    let (n, _) = a.value().dims2()?;
    g.value().expect_shape(a.shape())?;
    if ids.len() != n {
        return Err(Error::shape(format!("{} ids for {n} rows", ids.len())));
    }
    let mask = Tensor::from_fn([n, n], |k| f64::from(ids[k / n] != ids[k % n]));
    let valid = mask.sum();
    if valid == 0.0 {
        return Err(Error::invalid("no negatives available"));
    }
    let mask = Var::constant(mask);
    let pos = a.row_dot(g)?.reshape([n, 1])?;
    // sim[i][j] = <a_i, g_j>; d(a, p) - d(a, n) = sim_neg - sim_pos.
    let sim = a.linear(g, None)?;
    let sim_t = g.linear(a, None)?;
    let hinge = |s: &Var| -> Result<Var> { Ok(s.sub(&pos)?.add_scalar(margin).relu().mul(&mask)?.sum()) };
    Ok(hinge(&sim)?.add(&hinge(&sim_t)?)?.mul_scalar(0.5 / valid))
}

/// How negatives are chosen for each anchor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mining {
    /// Closest negative in the batch.
    Hardest,
    /// Average over all negatives in the batch.
    All,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbedTrainConfig {
    pub epochs: usize,
    pub margin: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub mining: Mining,
}

impl Default for EmbedTrainConfig {
    fn default() -> Self {
        EmbedTrainConfig {
            epochs: 200,
            margin: 0.3,
            lr: 1e-3,
            batch_size: 8,
            seed: 0,
            mining: Mining::All,
        }
    }
}

/// Trains both branches on paired samples and returns the frozen embedder.
/// `on_epoch` receives `(epoch, mean loss)`.
pub fn train_embedder(
    samples: &[PairedSample],
    config: EmbedderConfig,
    train: &EmbedTrainConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<Embedder> {
    let distinct: std::collections::HashSet<&str> = samples.iter().map(|s| s.location_id.as_str()).collect();
    if distinct.len() < 2 {
        return Err(Error::invalid("no negatives available"));
    }
    let mut emb = Embedder::new(config, train.seed)?;
    let mut opt = Adam::new(AdamConfig::new(train.lr, 0.9, 0.999));
    let aerial: Vec<Tensor> = samples.iter().map(|s| to_signed(&s.aerial)).collect();
    let ground: Vec<Tensor> = samples.iter().map(|s| to_signed(&s.ground)).collect();
    for epoch in 0..train.epochs {
        let mut total = 0.0;
        let batches = batch_indices(samples.len(), train.batch_size.max(2), train.seed, epoch as u64)?;
        for idx in &batches {
            let pick = |src: &[Tensor]| Tensor::stack(&idx.iter().map(|&i| src[i].clone()).collect::<Vec<_>>());
            let ids: Vec<String> = idx.iter().map(|&i| samples[i].location_id.clone()).collect();
            let a = emb.embed_var(&Var::constant(pick(&aerial)?), View::Aerial)?;
            let g = emb.embed_var(&Var::constant(pick(&ground)?), View::Ground)?;
            let loss = match train.mining {
                Mining::Hardest => batch_hard_triplet_loss(&a, &g, &ids, train.margin),
                Mining::All => batch_all_triplet_loss(&a, &g, &ids, train.margin),
            };
            let loss = match loss {
                Ok(l) => l,
                // Every pair in this batch shares a location.
                Err(Error::InvalidArgument(_)) => continue,
                Err(e) => return Err(e),
            };
            loss.value().ensure_finite("embedder triplet loss")?;
            total += loss.item();
            let grads = loss.backward()?;
            opt.step(&mut emb.store, &grads)?;
        }
        emb.trained_epochs = epoch + 1;
        let mean = total / batches.len() as f64;
        log::debug!("embedder epoch {epoch}: loss {mean:.5}");
        on_epoch(epoch, mean);
    }
    emb.freeze();
    Ok(emb)
}

/// Dot product of two unit vectors, clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>().clamp(-1.0, 1.0)
}

/// Indices of the `k` rows of `gallery` most similar to `query`, best first;
/// ties go to the lower index.
pub fn retrieve_top_k(query: &[f64], gallery: &Tensor, k: usize) -> Result<Vec<usize>> {
    let (m, d) = gallery.dims2()?;
    if m == 0 {
        return Err(Error::invalid("empty gallery"));
    }
    if k > m {
        return Err(Error::invalid(format!("k = {k} exceeds gallery size {m}")));
    }
    if query.len() != d {
        return Err(Error::shape(format!("query of dim {}, gallery dim {d}", query.len())));
    }
    let sims: Vec<f64> = (0..m)
        .map(|j| cosine_similarity(query, &gallery.data()[j * d..(j + 1) * d]))
        .collect();
    let mut idx: Vec<usize> = (0..m).collect();
    idx.sort_by(|&x, &y| sims[y].total_cmp(&sims[x]).then(x.cmp(&y)));
    idx.truncate(k);
    Ok(idx)
}

/// Fraction of query rows whose top-1 gallery row has the same index.
pub fn recall_at_1(queries: &Tensor, gallery: &Tensor) -> Result<f64> {
    let (n, d) = queries.dims2()?;
    if gallery.dims2()?.0 != n {
        return Err(Error::shape(format!(
            "{n} queries for a gallery of {}",
            gallery.dims2()?.0
        )));
    }
    let mut hits = 0;
    for i in 0..n {
        if retrieve_top_k(&queries.data()[i * d..(i + 1) * d], gallery, 1)?[0] == i {
            hits += 1;
        }
    }
    Ok(hits as f64 / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_inputs, GradCheckOptions};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> EmbedderConfig {
        EmbedderConfig {
            embed_dim: 8,
            channels: vec![4, 6],
            aerial_size: (8, 8),
            ground_size: (4, 16),
        }
    }

    fn rows(v: &[&[f64]]) -> Var {
        let d = v[0].len();
        Var::constant(Tensor::new([v.len(), d], v.concat()).unwrap())
    }

    #[test]
    fn embeddings_are_unit_and_deterministic() {
        let e = Embedder::new(small(), 1).unwrap();
        let x = Tensor::uniform([3, 3, 10, 12], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        let a = e.embed(&x, View::Aerial).unwrap();
        assert_eq!(a, e.embed(&x, View::Aerial).unwrap());
        for r in 0..3 {
            let n: f64 = a.data()[r * 8..(r + 1) * 8].iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-5);
        }
        assert_eq!(e.pooled_features(&x, View::Ground).unwrap().shape(), &[3, 6]);
        assert!(e.embed(&Tensor::zeros([1, 1, 8, 8]), View::Aerial).is_err());
        assert!("sky".parse::<View>().is_err());
    }

    #[test]
    fn triplet_closed_forms() {
        let a = rows(&[&[1.0, 0.0]]);
        // Margin satisfied: d_ap = 0, d_an = 1.
        let l = triplet_loss(
            &cosine_distance_rows(&a, &a).unwrap(),
            &cosine_distance_rows(&a, &rows(&[&[0.0, 1.0]])).unwrap(),
            0.3,
        )
        .unwrap();
        assert_eq!(l.item(), 0.0);
        let same = cosine_distance_rows(&a, &a).unwrap();
        assert!((triplet_loss(&same, &same, 0.3).unwrap().item() - 0.3).abs() < 1e-15);
    }

    #[test]
    fn batch_hard_picks_closest_negative() {
        let a = rows(&[&[1.0, 0.0], &[0.0, 1.0], &[-1.0, 0.0]]);
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let g = rows(&[&[1.0, 0.0], &[s, s], &[-1.0, 0.0]]);
        let ids: Vec<String> = ["a", "b", "c"].map(String::from).to_vec();
        // Anchor 0 (aerial): positive d=0, hardest negative row 1 with d = 1 - s.
        // Anchor 1: positive d = 1 - s, negatives d = 1 and 1, so loss 0.3 + (1 - s) - 1.
        // Anchor 2: positive 0, hardest negative row 1 at d = 1 + s, loss 0.
        let l0 = (0.3 - (1.0 - s)).max(0.0);
        let l1 = (0.3 + (1.0 - s) - 1.0).max(0.0);
        // Ground anchors: g0 vs a: pos 0, hardest a1 (d=1): 0. g1: pos 1-s, hardest
        // a0 at 1-s: 0.3. g2: pos 0, hardest a1 (d=1): 0.
        let want = 0.5 * ((l0 + l1) / 3.0 + 0.3 / 3.0);
        let got = batch_hard_triplet_loss(&a, &g, &ids, 0.3).unwrap().item();
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        let same: Vec<String> = vec!["x".into(); 3];
        let err = batch_hard_triplet_loss(&a, &g, &same, 0.3).unwrap_err();
        assert!(err.to_string().contains("no negatives available"));
    }

    #[test]
    fn batch_all_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = Var::constant(Tensor::randn([4, 3], &mut rng)).l2_normalize_rows().unwrap();
        let g = Var::constant(Tensor::randn([4, 3], &mut rng)).l2_normalize_rows().unwrap();
        let ids: Vec<String> = ["p", "q", "p", "r"].map(String::from).to_vec();
        let (av, gv) = (a.value().data(), g.value().data());
        let dot = |x: &[f64], i: usize, y: &[f64], j: usize| (0..3).map(|t| x[i * 3 + t] * y[j * 3 + t]).sum::<f64>();
        let (mut total, mut count) = (0.0, 0.0);
        for i in 0..4 {
            for j in 0..4 {
                if ids[i] == ids[j] {
                    continue;
                }
                let pos = dot(av, i, gv, i);
                total += (0.3 + (1.0 - pos) - (1.0 - dot(av, i, gv, j))).max(0.0);
                total += (0.3 + (1.0 - pos) - (1.0 - dot(gv, i, av, j))).max(0.0);
                count += 1.0;
            }
        }
        let got = batch_all_triplet_loss(&a, &g, &ids, 0.3).unwrap().item();
        assert!((got - 0.5 * total / count).abs() < 1e-12);
        let same: Vec<String> = vec!["x".into(); 4];
        assert!(batch_all_triplet_loss(&a, &g, &same, 0.3).is_err());
    }

    #[test]
    fn batch_all_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let ids: Vec<String> = (0..3).map(|i| i.to_string()).collect();
        let rep = check_inputs(
            |v| {
                let a = v[0].l2_normalize_rows()?;
                let g = v[1].l2_normalize_rows()?;
                batch_all_triplet_loss(&a, &g, &ids, 0.9)
            },
            &[Tensor::randn([3, 4], &mut rng), Tensor::randn([3, 4], &mut rng)],
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(rep.max_rel_err() < 1e-4, "{rep:?}");
    }

    #[test]
    fn tiny_training_reduces_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let samples: Vec<PairedSample> = (0..4)
            .map(|i| PairedSample {
                location_id: format!("l{i}"),
                aerial: Tensor::uniform([3, 8, 8], 0.0, 1.0, &mut rng),
                ground: Tensor::uniform([3, 4, 16], 0.0, 1.0, &mut rng),
            })
            .collect();
        let mut losses = Vec::new();
        let cfg = EmbedTrainConfig { epochs: 30, batch_size: 4, ..Default::default() };
        let e = train_embedder(&samples, small(), &cfg, |_, l| losses.push(l)).unwrap();
        assert!(e.is_frozen());
        assert_eq!(e.trained_epochs, 30);
        assert!(losses[29] < losses[0], "{losses:?}");
    }

    #[test]
    fn single_location_cannot_train() {
        let s = PairedSample {
            location_id: "only".into(),
            aerial: Tensor::zeros([3, 8, 8]),
            ground: Tensor::zeros([3, 4, 16]),
        };
        let err = train_embedder(&[s.clone(), s], small(), &EmbedTrainConfig::default(), |_, _| {}).unwrap_err();
        assert!(err.to_string().contains("no negatives available"));
    }

    #[test]
    fn cosine_cases() {
        assert!((cosine_similarity(&[0.6, 0.8], &[0.6, 0.8]) - 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[-1.0, 0.0]), -1.0);
    }

    #[test]
    fn retrieval_cases() {
        let q = [0.6, 0.8];
        let g = Tensor::new([2, 2], vec![-0.6, -0.8, 0.6, 0.8]).unwrap();
        assert_eq!(retrieve_top_k(&q, &g, 2).unwrap(), vec![1, 0]);
        assert!(retrieve_top_k(&q, &Tensor::zeros([0, 2]), 1).is_err());
        assert!(retrieve_top_k(&q, &g, 3).is_err());
        // Ties go to the lower index.
        let tie = Tensor::new([3, 2], vec![0.0, 1.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(retrieve_top_k(&[1.0, 0.0], &tie, 2).unwrap(), vec![1, 2]);
        assert_eq!(recall_at_1(&Tensor::new([1, 2], q.to_vec()).unwrap(), &Tensor::new([1, 2], vec![0.0, 1.0]).unwrap()).unwrap(), 1.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn top_k_matches_full_sort(seed in 0u64..10_000, k in 1usize..=16) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let raw = Tensor::randn([17, 5], &mut rng);
            let unit = Var::constant(raw).l2_normalize_rows().unwrap().value().clone();
            let q = &unit.data()[..5];
            let gallery = unit.slice_rows(1, 16).unwrap();
            let got = retrieve_top_k(q, &gallery, k).unwrap();
            let mut sims: Vec<(f64, usize)> = (0..16)
                .map(|j| ((0..5).map(|t| q[t] * gallery.data()[j * 5 + t]).sum::<f64>(), j))
                .collect();
            sims.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            prop_assert_eq!(got, sims.iter().take(k).map(|s| s.1).collect::<Vec<_>>());
        }

        #[test]
        fn triplet_loss_is_nonnegative(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Var::constant(Tensor::randn([4, 3], &mut rng)).l2_normalize_rows().unwrap();
            let g = Var::constant(Tensor::randn([4, 3], &mut rng)).l2_normalize_rows().unwrap();
            let ids: Vec<String> = (0..4).map(|i| i.to_string()).collect();
            let l = batch_hard_triplet_loss(&a, &g, &ids, 0.3).unwrap().item();
            prop_assert!(l >= 0.0);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut e = Embedder::new(small(), 5).unwrap();
        e.freeze();
        let p = dir.path().join("e.ckpt");
        e.save(&p).unwrap();
        let back = Embedder::load(&p).unwrap();
        assert_eq!(back.digest(), e.digest());
        assert!(back.is_frozen());
        assert_eq!(back.config, small());
    }

    #[test]
    fn frozen_embedder_passes_gradient_to_input_only() {
        let mut e = Embedder::new(small(), 3).unwrap();
        e.freeze();
        let x = Var::leaf(Tensor::uniform([2, 3, 8, 8], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(4)));
        let g = e.embed_var(&x, View::Aerial).unwrap().sum().backward().unwrap();
        assert!(g.wrt(&x).unwrap().max_abs() > 0.0);
        assert_eq!(g.param_count(), 0);
    }
}
