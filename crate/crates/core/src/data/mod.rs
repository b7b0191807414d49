//! Paired-view datasets: samples, manifests, the toy generator, batching and
//! discriminator augmentation.
//!
//! Images are stored and loaded in `[0, 1]`; batches handed to the networks
//! are rescaled to `[-1, 1]`.

mod augment;
mod image_io;
mod manifest;
mod toy;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Tensor;

pub use augment::{diffaug, AugParams};
pub use image_io::{image_grid, load_png, quantize, save_png};
pub use manifest::{
    build_manifest, parse_size, write_atomic, DatasetManifest, ManifestBuilder, PairEntry, Split, MANIFEST_FILE,
};
pub use toy::{location_id, make_toy_dataset, polar_unwarp, toy_samples, ToyConfig};

/// Environment variable selecting the number of image-decoding workers.
pub const WORKERS_ENV: &str = "CROSSVIEW_NUM_WORKERS";

#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    pub location_id: String,
    /// `(3, Ha, Wa)` in `[0, 1]`.
    pub aerial: Tensor,
    /// `(3, Hg, Wg)` in `[0, 1]`.
    pub ground: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum View {
    Aerial,
    Ground,
}

impl View {
    pub fn as_str(self) -> &'static str {
        match self {
            View::Aerial => "aerial",
            View::Ground => "ground",
        }
    }

    pub fn other(self) -> View {
        match self {
            View::Aerial => View::Ground,
            View::Ground => View::Aerial,
        }
    }
}

impl std::str::FromStr for View {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "aerial" => Ok(View::Aerial),
            "ground" => Ok(View::Ground),
            _ => Err(Error::invalid(format!("unknown view `{s}` (aerial, ground)"))),
        }
    }
}

impl PairedSample {
    pub fn view(&self, v: View) -> &Tensor {
        match v {
            View::Aerial => &self.aerial,
            View::Ground => &self.ground,
        }
    }
}

/// `[0, 1] -> [-1, 1]`.
pub fn to_signed(x: &Tensor) -> Tensor {
    x.map(|v| 2.0 * v - 1.0)
}

/// `[-1, 1] -> [0, 1]`, clamped.
pub fn to_unit(x: &Tensor) -> Tensor {
    x.map(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0))
}

/// Worker count from [`WORKERS_ENV`]; unset or unparsable means 0 (inline).
pub fn workers_from_env() -> usize {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .unwrap_or(0)
}

fn load_one(manifest: &DatasetManifest, i: usize) -> Result<PairedSample> {
    let aerial = load_png(&manifest.aerial_path(i))?;
    let ground = load_png(&manifest.ground_path(i))?;
    for (img, size, what) in [
        (&aerial, manifest.aerial_size, manifest.aerial_path(i)),
        (&ground, manifest.ground_size, manifest.ground_path(i)),
    ] {
        if (img.shape()[1], img.shape()[2]) != size {
            return Err(Error::Image {
                path: what,
                message: format!(
                    "image is {}x{}, manifest declares {}x{}",
                    img.shape()[1],
                    img.shape()[2],
                    size.0,
                    size.1
                ),
            });
        }
    }
    Ok(PairedSample {
        location_id: manifest.pairs[i].location_id.clone(),
        aerial,
        ground,
    })
}

/// Decodes every pair of a manifest. With `workers > 1` files are decoded on
/// that many threads; the result order is always the manifest order.
pub fn load_samples(manifest: &DatasetManifest, workers: usize) -> Result<Vec<PairedSample>> {
    manifest.validate()?;
    let n = manifest.pairs.len();
    if workers <= 1 || n < 2 {
        return (0..n).map(|i| load_one(manifest, i)).collect();
    }
    let workers = workers.min(n);
    let mut slots: Vec<Option<Result<PairedSample>>> = (0..n).map(|_| None).collect();
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|k| {
                s.spawn(move || {
                    (k..n)
                        .step_by(workers)
                        .map(|i| (i, load_one(manifest, i)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("loader thread panicked") {
                slots[i] = Some(r);
            }
        }
    });
    slots.into_iter().map(|s| s.expect("every index loaded")).collect()
}

/// Sample indices grouped into batches for one epoch, shuffled by
/// `(seed, epoch)`. A trailing batch of one sample is merged into the previous
/// batch so every batch has at least two samples when `n >= 2`.
pub fn batch_indices(n: usize, batch_size: usize, shuffle_seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(shuffle_seed, &[0xba7c, epoch]));
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let tail = batches.pop().expect("nonempty");
        batches.last_mut().expect("nonempty").extend(tail);
    }
    Ok(batches)
}

/// A minibatch rescaled to `[-1, 1]`.
#[derive(Clone, Debug)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub location_ids: Vec<String>,
    pub aerial: Tensor,
    pub ground: Tensor,
}

impl Batch {
    pub fn gather(samples: &[PairedSample], indices: &[usize]) -> Result<Batch> {
        let pick = |v: View| -> Result<Tensor> {
            let imgs: Vec<Tensor> = indices.iter().map(|&i| to_signed(samples[i].view(v))).collect();
            Tensor::stack(&imgs)
        };
        Ok(Batch {
            indices: indices.to_vec(),
            location_ids: indices.iter().map(|&i| samples[i].location_id.clone()).collect(),
            aerial: pick(View::Aerial)?,
            ground: pick(View::Ground)?,
        })
    }

    pub fn view(&self, v: View) -> &Tensor {
        match v {
            View::Aerial => &self.aerial,
            View::Ground => &self.ground,
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// All batches of one epoch.
pub fn iterate_batches(samples: &[PairedSample], batch_size: usize, shuffle_seed: u64, epoch: u64) -> Result<Vec<Batch>> {
    batch_indices(samples.len(), batch_size, shuffle_seed, epoch)?
        .iter()
        .map(|idx| Batch::gather(samples, idx))
        .collect()
}
