use std::collections::HashSet;
use std::path::{Path, PathBuf};

use crossview::config::KvConfig;
use crossview::data::{
    self, build_manifest as index_dataset, image_grid, load_png, load_samples, make_toy_dataset, save_png, to_signed,
    to_unit, workers_from_env, DatasetManifest, ManifestBuilder, PairedSample, ToyConfig,
};
use crossview::embedder::{recall_at_1, train_embedder as fit_embedder, Embedder, EmbedderConfig};
use crossview::losses::RandomConvPyramid;
use crossview::metrics::{evaluate, EvalSet};
use crossview::seed;
use crossview::training::{self, gaussian, interpolate_embeddings, TrainConfig, Trainer, CHECKPOINT_FILE};
use crossview::{Error, Result, Tensor};

use crate::ConfigArgs;

pub const EMBEDDER_FILE: &str = "embedder.ckpt";
pub const EVAL_EMBEDDER_FILE: &str = "eval_embedder.ckpt";
pub const METRICS_FILE: &str = "metrics.txt";
pub const GRID_FILE: &str = "eval_grid.png";
pub const STRIP_FILE: &str = "interpolation.png";

/// Images pushed through the generator at once.
const GEN_CHUNK: usize = 8;

impl ConfigArgs {
    fn is_explicit(&self) -> bool {
        self.config.is_some() || !self.overrides.is_empty()
    }

    fn load(&self) -> Result<TrainConfig> {
        let mut kv = match &self.config {
            Some(p) => KvConfig::load(p)?,
            None => KvConfig::new(),
        };
        for o in &self.overrides {
            kv.apply_override(o)?;
        }
        TrainConfig::from_kv(&kv)
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn load_dataset(manifest: &Path) -> Result<(DatasetManifest, Vec<PairedSample>)> {
    let m = DatasetManifest::load(manifest)?;
    let samples = load_samples(&m, workers_from_env())?;
    Ok((m, samples))
}

pub fn make_toy_data(
    n: usize,
    seed: u64,
    aerial_size: (usize, usize),
    pano_size: (usize, usize),
    out: &Path,
) -> Result<()> {
    let cfg = ToyConfig {
        n_locations: n,
        seed,
        aerial_size,
        pano_size,
    };
    let m = make_toy_dataset(out, &cfg)?;
    println!("{}", m.root.join(data::MANIFEST_FILE).display());
    Ok(())
}

pub struct ManifestArgs {
    pub root: PathBuf,
    pub aerial_dir: String,
    pub ground_dir: String,
    pub ext: String,
    pub split: String,
    pub aerial_size: (usize, usize),
    pub ground_size: (usize, usize),
    pub exclude: Option<PathBuf>,
    pub center_aligned: bool,
}

pub fn build_manifest(a: ManifestArgs) -> Result<()> {
    let exclude: HashSet<String> = match &a.exclude {
        Some(p) => std::fs::read_to_string(p)
            .map_err(|e| Error::Io {
                path: p.clone(),
                source: e,
            })?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(String::from)
            .collect(),
        None => HashSet::new(),
    };
    let opts = ManifestBuilder {
        aerial_dir: a.aerial_dir,
        ground_dir: a.ground_dir,
        extension: a.ext,
        split: a.split.parse()?,
        aerial_size: a.aerial_size,
        ground_size: a.ground_size,
        center_aligned: a.center_aligned,
        exclude,
    };
    let m = index_dataset(&a.root, &opts)?;
    let path = m.save()?;
    println!("{}", path.display());
    Ok(())
}

pub fn train_embedder(manifest: &Path, out: &Path, twin: bool, cfg: &ConfigArgs) -> Result<()> {
    let config = cfg.load()?;
    let (_, samples) = load_dataset(manifest)?;
    let train = config.embed_train(twin);
    let embedder = fit_embedder(&samples, EmbedderConfig::default(), &train, |epoch, loss| {
        if (epoch + 1) % 20 == 0 {
            log::info!("embedder epoch {}: loss {loss:.5}", epoch + 1);
        }
    })?;
    let aerial: Vec<Tensor> = samples.iter().map(|s| to_signed(&s.aerial)).collect();
    let ground: Vec<Tensor> = samples.iter().map(|s| to_signed(&s.ground)).collect();
    let ea = embedder.embed(&Tensor::stack(&aerial)?, data::View::Aerial)?;
    let eg = embedder.embed(&Tensor::stack(&ground)?, data::View::Ground)?;
    log::info!("aerial-to-ground recall@1 on the training pairs: {:.4}", recall_at_1(&ea, &eg)?);
    ensure_dir(out)?;
    let path = out.join(if twin { EVAL_EMBEDDER_FILE } else { EMBEDDER_FILE });
    embedder.save(&path)?;
    println!("{}", path.display());
    Ok(())
}

pub fn train(manifest: &Path, embedder: &Path, out: &Path, cfg: &ConfigArgs) -> Result<()> {
    let config = cfg.load()?;
    let embedder = Embedder::load(embedder)?;
    let (_, samples) = load_dataset(manifest)?;
    ensure_dir(out)?;
    let outcome = training::train(&config, &samples, embedder, out)?;
    if let Some(r) = outcome.trainer.curve.last() {
        log::info!(
            "step {} epoch {}: d {:.4} g {:.4} rec {:.4}",
            r.step,
            r.epoch,
            r.d_total,
            r.g_total,
            r.rec
        );
    }
    println!("{}", outcome.checkpoint.display());
    Ok(())
}

fn load_trainer(checkpoint: &Path, embedder: &Path, cfg: &ConfigArgs) -> Result<Trainer> {
    let expected = if cfg.is_explicit() { Some(cfg.load()?) } else { None };
    let embedder = Embedder::load(embedder)?;
    let path = if checkpoint.is_dir() {
        checkpoint.join(CHECKPOINT_FILE)
    } else {
        checkpoint.to_path_buf()
    };
    Trainer::load(&path, embedder, expected.as_ref())
}

fn tile_rows(row: &Tensor, n: usize) -> Result<Tensor> {
    Tensor::concat_rows(&vec![row.clone(); n])
}

/// Target-view images in `[-1, 1]` for `samples`, with one style code and one
/// local code (drawn from the two seeds) shared by every image.
fn generate_images(trainer: &Trainer, samples: &[&PairedSample], seeds: (u64, u64)) -> Result<Vec<Tensor>> {
    let g = &trainer.generator.config;
    let z_style = gaussian([1, g.style_dim], &mut seed::rng(seeds.0, &[0x5e]));
    let z_local = gaussian([1, g.local_dim], &mut seed::rng(seeds.1, &[0x10c]));
    let source = trainer.source_view();
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(GEN_CHUNK) {
        let imgs: Vec<Tensor> = chunk.iter().map(|s| to_signed(s.view(source))).collect();
        let e = trainer.condition(&Tensor::stack(&imgs)?)?;
        let n = chunk.len();
        let y = trainer.generate(&e, &tile_rows(&z_style, n)?, &tile_rows(&z_local, n)?)?;
        let (_, c, h, w) = y.image.value().dims4()?;
        for i in 0..n {
            let d = &y.image.value().data()[i * c * h * w..(i + 1) * c * h * w];
            out.push(Tensor::new([c, h, w], d.to_vec())?);
        }
    }
    Ok(out)
}

pub enum EvalSource {
    Checkpoint {
        checkpoint: PathBuf,
        embedder: PathBuf,
        seeds: (u64, u64),
    },
    Directory(PathBuf),
}

pub fn eval(manifest: &Path, eval_embedder: &Path, source: EvalSource, out: &Path, cfg: &ConfigArgs) -> Result<()> {
    let eval_embedder = Embedder::load(eval_embedder)?;
    let (_, samples) = load_dataset(manifest)?;
    let refs: Vec<&PairedSample> = samples.iter().collect();
    let (config, generated, phi) = match source {
        EvalSource::Checkpoint {
            checkpoint,
            embedder,
            seeds,
        } => {
            let trainer = load_trainer(&checkpoint, &embedder, cfg)?;
            let generated = generate_images(&trainer, &refs, seeds)?;
            (trainer.config.clone(), generated, trainer.phi)
        }
        EvalSource::Directory(dir) => {
            let config = cfg.load()?;
            let generated = samples
                .iter()
                .map(|s| Ok(to_signed(&load_png(&dir.join(format!("{}.png", s.location_id)))?)))
                .collect::<Result<Vec<_>>>()?;
            let phi = RandomConvPyramid::standard(config.perceptual_seed);
            (config, generated, phi)
        }
    };
    let (sv, tv) = (config.direction.source(), config.direction.target());
    let target: Vec<Tensor> = samples.iter().map(|s| to_signed(s.view(tv))).collect();
    let src: Vec<Tensor> = samples.iter().map(|s| to_signed(s.view(sv))).collect();
    let (gen_t, target_t, src_t) = (Tensor::stack(&generated)?, Tensor::stack(&target)?, Tensor::stack(&src)?);
    let set = EvalSet {
        generated: &gen_t,
        target: &target_t,
        source: &src_t,
        target_view: tv,
    };
    let mut report = evaluate(&set, &eval_embedder, &phi, &config.hash())?;
    report.notes.push(format!("direction {}", config.direction.as_str()));
    ensure_dir(out)?;
    let report_path = out.join(METRICS_FILE);
    report.save(&report_path)?;
    let rows: Vec<Vec<Tensor>> = samples
        .iter()
        .zip(&generated)
        .map(|(s, g)| vec![s.view(sv).clone(), to_unit(g), s.view(tv).clone()])
        .collect();
    save_png(&out.join(GRID_FILE), &image_grid(&rows, 2, 1.0)?)?;
    print!("{}", report.to_text());
    println!("{}", report_path.display());
    Ok(())
}

fn pick<'a>(samples: &'a [PairedSample], id: &str) -> Result<&'a PairedSample> {
    samples
        .iter()
        .find(|s| s.location_id == id)
        .ok_or_else(|| Error::InvalidArgument(format!("location `{id}` is not in the manifest")))
}

pub fn generate(
    checkpoint: &Path,
    embedder: &Path,
    manifest: &Path,
    locations: &[String],
    seeds: (u64, u64),
    out: &Path,
    cfg: &ConfigArgs,
) -> Result<()> {
    let trainer = load_trainer(checkpoint, embedder, cfg)?;
    let (_, samples) = load_dataset(manifest)?;
    let chosen: Vec<&PairedSample> = if locations.is_empty() {
        samples.iter().collect()
    } else {
        locations.iter().map(|id| pick(&samples, id)).collect::<Result<_>>()?
    };
    let images = generate_images(&trainer, &chosen, seeds)?;
    ensure_dir(out)?;
    for (s, img) in chosen.iter().zip(&images) {
        let path = out.join(format!("{}.png", s.location_id));
        save_png(&path, &to_unit(img))?;
        println!("{}", path.display());
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn interpolate(
    checkpoint: &Path,
    embedder: &Path,
    manifest: &Path,
    ends: (Option<String>, Option<String>),
    steps: usize,
    seeds: (u64, u64),
    out: &Path,
    cfg: &ConfigArgs,
) -> Result<()> {
    let trainer = load_trainer(checkpoint, embedder, cfg)?;
    let (_, samples) = load_dataset(manifest)?;
    let endpoint = |id: Option<String>, default: usize| -> Result<&PairedSample> {
        match id {
            Some(id) => pick(&samples, &id),
            None => samples
                .get(default)
                .ok_or_else(|| Error::InvalidArgument("manifest has fewer than two locations".into())),
        }
    };
    let (a, b) = (endpoint(ends.0, 0)?, endpoint(ends.1, 1)?);
    let view = trainer.source_view();
    let e = trainer.condition(&Tensor::stack(&[to_signed(a.view(view)), to_signed(b.view(view))])?)?;
    let d = e.shape()[1];
    let g = &trainer.generator.config;
    let z_style = gaussian([1, g.style_dim], &mut seed::rng(seeds.0, &[0x5e]));
    let z_local = gaussian([1, g.local_dim], &mut seed::rng(seeds.1, &[0x10c]));
    let frames = interpolate_embeddings(&trainer, &e.data()[..d], &e.data()[d..], steps, &z_style, &z_local)?;
    let row: Vec<Tensor> = frames
        .iter()
        .map(|f| {
            let s = f.shape();
            Ok(to_unit(&f.reshape([s[1], s[2], s[3]])?))
        })
        .collect::<Result<_>>()?;
    ensure_dir(out)?;
    let path = out.join(STRIP_FILE);
    save_png(&path, &image_grid(&[row], 0, 1.0)?)?;
    println!("{}", path.display());
    Ok(())
}
