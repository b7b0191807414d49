//! Fixtures shared by the benchmarks.

use crossview::data::{toy_samples, Batch, PairedSample, ToyConfig};
use crossview::embedder::{Embedder, EmbedderConfig};
use crossview::training::{TrainConfig, Trainer};
use crossview::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape.to_vec(), -1.0, 1.0, &mut rng(seed))
}

/// The default 8-location toy set.
pub fn toy() -> Vec<PairedSample> {
    toy_samples(&ToyConfig::default()).expect("toy config is valid")
}

/// A toy-sized trainer with an untrained frozen embedder, plus one batch of
/// all eight samples.
pub fn toy_trainer() -> (Trainer, Batch) {
    let samples = toy();
    let mut embedder = Embedder::new(EmbedderConfig::default(), 0).expect("default embedder");
    embedder.freeze();
    let trainer = Trainer::new(TrainConfig::default(), embedder, (64, 64), (32, 128)).expect("toy trainer");
    let idx: Vec<usize> = (0..samples.len()).collect();
    (trainer, Batch::gather(&samples, &idx).expect("batch"))
}
