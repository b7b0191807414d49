//! Image quality and retrieval metrics: SSIM, PSNR, a perceptual feature
//! distance, FID and retrieval R@1.
//!
//! Pixel metrics take images in `[0, 1]`; anything with a trailing `(h, w)`
//! works, leading dimensions are treated as independent planes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::autograd::Var;
use crate::data::{write_atomic, View};
use crate::embedder::{recall_at_1, Embedder};
use crate::error::{Error, Result};
use crate::losses::FeatureExtractor;
use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
/// Mean squared error below which PSNR reports `+inf`.
pub const PSNR_MSE_FLOOR: f64 = 1e-12;

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn planes(t: &Tensor) -> Result<(usize, usize, usize)> {
    let s = t.shape();
    if s.len() < 2 {
        return Err(Error::shape(format!("image needs at least 2 dims, got {s:?}")));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    if h == 0 || w == 0 {
        return Err(Error::shape("empty image"));
    }
    Ok((t.len() / (h * w), h, w))
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Valid separable filtering of one `h x w` plane.
fn filter_valid(p: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|t| g[t] * p[y * w + x + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|t| g[t] * rows[(y + t) * ow + x]).sum();
        }
    }
    out
}

/// Window side used for an `h x w` image: 11, or the largest odd size that
/// fits when the image is smaller.
pub fn ssim_window_size(h: usize, w: usize) -> usize {
    let m = SSIM_WINDOW.min(h).min(w);
    if m.is_multiple_of(2) {
        m - 1
    } else {
        m
    }
}

/// Mean SSIM over planes and valid window positions (Gaussian window,
/// sigma 1.5, dynamic range 1).
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape(a, b)?;
    let (np, h, w) = planes(a)?;
    let g = gaussian_window(ssim_window_size(h, w), SSIM_SIGMA);
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let (mut total, mut count) = (0.0, 0usize);
    for i in 0..np {
        let pa = &a.data()[i * h * w..(i + 1) * h * w];
        let pb = &b.data()[i * h * w..(i + 1) * h * w];
        let prod = |f: fn(f64, f64) -> f64| pa.iter().zip(pb).map(|(&x, &y)| f(x, y)).collect::<Vec<_>>();
        let mu_a = filter_valid(pa, h, w, &g);
        let mu_b = filter_valid(pb, h, w, &g);
        let e_aa = filter_valid(&prod(|x, _| x * x), h, w, &g);
        let e_bb = filter_valid(&prod(|_, y| y * y), h, w, &g);
        let e_ab = filter_valid(&prod(|x, y| x * y), h, w, &g);
        for j in 0..mu_a.len() {
            let (ma, mb) = (mu_a[j], mu_b[j]);
            let va = e_aa[j] - ma * ma;
            let vb = e_bb[j] - mb * mb;
            let cov = e_ab[j] - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// `10 log10(1 / MSE)` in dB; `+inf` for (near-)identical images.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape(a, b)?;
    if a.is_empty() {
        return Err(Error::shape("empty image"));
    }
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse < PSNR_MSE_FLOOR {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

/// Mean and covariance of a feature distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianMoments {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
}

impl GaussianMoments {
    /// Sample mean and unbiased covariance of rows of `(n, F)`; needs
    /// `n >= F + 1`.
    pub fn from_features(feats: &Tensor) -> Result<Self> {
        let (n, f) = feats.dims2()?;
        if n < f + 1 {
            return Err(Error::invalid(format!(
                "FID needs at least {} samples for {f}-dim features, got {n}",
                f + 1
            )));
        }
        let x = DMatrix::from_row_slice(n, f, feats.data());
        let mu = x.row_mean().transpose();
        let centered = DMatrix::from_fn(n, f, |i, j| x[(i, j)] - mu[j]);
        let sigma = (centered.transpose() * &centered) / (n as f64 - 1.0);
        Ok(GaussianMoments { mu, sigma })
    }
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt()));
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

/// Frechet distance between two Gaussians. The trace of `(S1 S2)^{1/2}` is
/// taken as the trace of the symmetric matrix `(S1^{1/2} S2 S1^{1/2})^{1/2}`,
/// with negative eigenvalues clamped to zero.
pub fn fid_from_moments(a: &GaussianMoments, b: &GaussianMoments) -> Result<f64> {
    if a.mu.len() != b.mu.len() {
        return Err(Error::shape(format!("feature dims {} vs {}", a.mu.len(), b.mu.len())));
    }
    let diff = (&a.mu - &b.mu).norm_squared();
    let ra = sym_sqrt(&a.sigma);
    let inner = &ra * &b.sigma * &ra;
    let inner = (&inner + inner.transpose()) * 0.5;
    let tr_sqrt: f64 = inner.symmetric_eigen().eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let v = diff + a.sigma.trace() + b.sigma.trace() - 2.0 * tr_sqrt;
    if !v.is_finite() {
        return Err(Error::NonFinite("FID".into()));
    }
    Ok(v.max(0.0))
}

/// FID between two feature sets `(n, F)`.
pub fn fid(real_feats: &Tensor, fake_feats: &Tensor) -> Result<f64> {
    fid_from_moments(
        &GaussianMoments::from_features(real_feats)?,
        &GaussianMoments::from_features(fake_feats)?,
    )
}

/// Fraction of generated images (depicting `gen_view`) whose nearest source
/// image under `eval_embedder` is their own location. Inputs are in `[-1, 1]`
/// and index-aligned.
pub fn r_at_1(gen_images: &Tensor, source_images: &Tensor, gen_view: View, eval_embedder: &Embedder) -> Result<f64> {
    let (n, ..) = gen_images.dims4()?;
    let (m, ..) = source_images.dims4()?;
    if n != m {
        return Err(Error::shape(format!("{n} generated images for {m} sources")));
    }
    let q = eval_embedder.embed(gen_images, gen_view)?;
    let g = eval_embedder.embed(source_images, gen_view.other())?;
    recall_at_1(&q, &g)
}

/// Unit-normalizes each channel vector of an `(n, c, h, w)` map.
fn unit_channels(t: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = t.dims4()?;
    let mut out = t.clone();
    let hw = h * w;
    for s in 0..n {
        for p in 0..hw {
            let norm = (0..c).map(|k| t.data()[(s * c + k) * hw + p].powi(2)).sum::<f64>().sqrt() + 1e-10;
            for k in 0..c {
                out.data_mut()[(s * c + k) * hw + p] /= norm;
            }
        }
    }
    Ok(out)
}

/// Sum over layers of the squared distance between channel-normalized
/// features, averaged over samples and positions. LPIPS without the learned
/// per-channel weights.
pub fn perceptual_distance(a: &Tensor, b: &Tensor, phi: &dyn FeatureExtractor) -> Result<f64> {
    same_shape(a, b)?;
    let fa = phi.features(&Var::constant(a.clone()))?;
    let fb = phi.features(&Var::constant(b.clone()))?;
    let mut total = 0.0;
    for (x, y) in fa.iter().zip(&fb) {
        let (ux, uy) = (unit_channels(x.value())?, unit_channels(y.value())?);
        let (n, _, h, w) = ux.dims4()?;
        let ss: f64 = ux.data().iter().zip(uy.data()).map(|(p, q)| (p - q) * (p - q)).sum();
        total += ss / (n * h * w) as f64;
    }
    Ok(total)
}

/// Named metric values with provenance, stored as `key = value` lines.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub values: BTreeMap<String, f64>,
    pub config_hash: String,
    pub samples: usize,
    /// Free-form remarks such as skipped metrics.
    pub notes: Vec<String>,
}

impl MetricsReport {
    pub fn to_text(&self) -> String {
        let mut s = String::from("# crossview metrics\n");
        let _ = writeln!(s, "config_hash = {}", self.config_hash);
        let _ = writeln!(s, "samples = {}", self.samples);
        for (k, v) in &self.values {
            let _ = writeln!(s, "{k} = {v}");
        }
        for n in &self.notes {
            let _ = writeln!(s, "# {n}");
        }
        s
    }

    pub fn parse(text: &str, source: &Path) -> Result<Self> {
        let mut r = MetricsReport::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(note) = line.strip_prefix('#') {
                let note = note.trim();
                if note != "crossview metrics" {
                    r.notes.push(note.to_string());
                }
                continue;
            }
            let err = |m: String| Error::Parse {
                path: source.to_path_buf(),
                line: i + 1,
                message: m,
            };
            let (k, v) = line.split_once('=').ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            let (k, v) = (k.trim(), v.trim());
            match k {
                "config_hash" => r.config_hash = v.to_string(),
                "samples" => r.samples = v.parse().map_err(|_| err(format!("bad sample count `{v}`")))?,
                _ => {
                    let x: f64 = v.parse().map_err(|_| err(format!("bad value `{v}` for `{k}`")))?;
                    r.values.insert(k.to_string(), x);
                }
            }
        }
        Ok(r)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_text().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }
}

/// Images used to score one evaluation run, all `(n, 3, h, w)` in `[-1, 1]`.
pub struct EvalSet<'a> {
    pub generated: &'a Tensor,
    pub target: &'a Tensor,
    pub source: &'a Tensor,
    pub target_view: View,
}

/// Computes every metric on `set`. FID uses the evaluation embedder's pooled
/// features and is left out (with a note) when there are too few samples.
pub fn evaluate(
    set: &EvalSet<'_>,
    eval_embedder: &Embedder,
    phi: &dyn FeatureExtractor,
    config_hash: &str,
) -> Result<MetricsReport> {
    same_shape(set.generated, set.target)?;
    let (n, ..) = set.generated.dims4()?;
    let unit = |t: &Tensor| t.map(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0));
    let (g01, t01) = (unit(set.generated), unit(set.target));
    let mut r = MetricsReport {
        config_hash: config_hash.to_string(),
        samples: n,
        ..Default::default()
    };
    r.values.insert("ssim".into(), ssim(&g01, &t01)?);
    r.values.insert("psnr".into(), psnr(&g01, &t01)?);
    r.values.insert("perceptual".into(), perceptual_distance(set.generated, set.target, phi)?);
    r.values.insert(
        "r_at_1".into(),
        r_at_1(set.generated, set.source, set.target_view, eval_embedder)?,
    );
    let fr = eval_embedder.pooled_features(set.target, set.target_view)?;
    let ff = eval_embedder.pooled_features(set.generated, set.target_view)?;
    match fid(&fr, &ff) {
        Ok(v) => {
            r.values.insert("fid".into(), v);
        }
        Err(Error::InvalidArgument(m)) => r.notes.push(format!("fid skipped: {m}")),
        Err(e) => return Err(e),
    }
    Ok(r)
}
