//! Procedural paired views with a known geometric correspondence.
//!
//! Each location is an overhead map with textured ground, road strips and
//! rectangular buildings. The aerial image shows building roofs. The
//! panorama's lower half is a polar unwarp of the same map around its centre
//! with walls in place of roofs; its upper half is sky, with nearby buildings
//! rising above the horizon.

use std::path::Path;

use rand::Rng;

use super::image_io::{quantize, save_png};
use super::manifest::{DatasetManifest, PairEntry, Split};
use super::PairedSample;
use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ToyConfig {
    pub n_locations: usize,
    pub seed: u64,
    pub aerial_size: (usize, usize),
    pub pano_size: (usize, usize),
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            n_locations: 8,
            seed: 0,
            aerial_size: (64, 64),
            pano_size: (32, 128),
        }
    }
}

impl ToyConfig {
    fn validate(&self) -> Result<()> {
        if self.n_locations < 2 {
            return Err(Error::invalid("need ≥ 2 locations"));
        }
        let (ah, aw) = self.aerial_size;
        let (ph, pw) = self.pano_size;
        if ah < 8 || aw < 8 || ph < 4 || pw < 4 || ph % 2 != 0 {
            return Err(Error::invalid(
                "aerial sides must be ≥ 8 and the panorama at least 4x4 with even height",
            ));
        }
        Ok(())
    }
}

pub fn location_id(i: usize) -> String {
    format!("loc{i:03}")
}

type Rgb = [f64; 3];

struct Building {
    y0: f64,
    x0: f64,
    y1: f64,
    x1: f64,
    wall: Rgb,
    roof: Rgb,
}

impl Building {
    fn contains(&self, y: f64, x: f64) -> bool {
        y >= self.y0 && y < self.y1 && x >= self.x0 && x < self.x1
    }
}

struct World {
    h: usize,
    w: usize,
    /// Ground-level colours (roads and terrain), `(3, h, w)`.
    terrain: Tensor,
    buildings: Vec<Building>,
    sky_seed: u64,
}

fn hsv(h: f64, s: f64, v: f64) -> Rgb {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let (r, g, b) = match h6 as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

fn put(img: &mut Tensor, h: usize, w: usize, y: usize, x: usize, c: Rgb) {
    let d = img.data_mut();
    for (k, v) in c.iter().enumerate() {
        d[(k * h + y) * w + x] = v.clamp(0.0, 1.0);
    }
}

impl World {
    fn generate<R: Rng>(h: usize, w: usize, rng: &mut R) -> World {
        let (hf, wf) = (h as f64, w as f64);
        let base = hsv(rng.random_range(0.12..0.36), rng.random_range(0.35..0.7), rng.random_range(0.35..0.65));
        let waves: Vec<(f64, f64, f64, f64)> = (0..3)
            .map(|_| {
                (
                    rng.random_range(0.5..3.0) * std::f64::consts::TAU / hf,
                    rng.random_range(0.5..3.0) * std::f64::consts::TAU / wf,
                    rng.random_range(0.0..std::f64::consts::TAU),
                    rng.random_range(0.03..0.08),
                )
            })
            .collect();
        let roads: Vec<(f64, f64, f64, f64, f64)> = (0..rng.random_range(1..=3))
            .map(|_| {
                let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
                (
                    rng.random_range(0.2..0.8) * hf,
                    rng.random_range(0.2..0.8) * wf,
                    angle,
                    rng.random_range(0.04..0.09) * hf.min(wf),
                    rng.random_range(0.3..0.5),
                )
            })
            .collect();
        let mut terrain = Tensor::zeros([3, h, w]);
        for y in 0..h {
            for x in 0..w {
                let (yf, xf) = (y as f64 + 0.5, x as f64 + 0.5);
                let tex: f64 = waves.iter().map(|(fy, fx, p, a)| a * (fy * yf + fx * xf + p).sin()).sum::<f64>()
                    + rng.random_range(-0.03..0.03);
                let mut c = [base[0] + tex, base[1] + tex, base[2] + tex * 0.5];
                for &(ry, rx, a, width, gray) in &roads {
                    let dist = ((yf - ry) * a.cos() - (xf - rx) * a.sin()).abs();
                    if dist < width / 2.0 {
                        let stripe = if dist < width * 0.06 { 0.35 } else { 0.0 };
                        c = [gray + stripe, gray + stripe, gray + stripe * 0.8];
                    }
                }
                put(&mut terrain, h, w, y, x, c);
            }
        }
        let (cy, cx) = (hf / 2.0, wf / 2.0);
        let clear = 0.1 * hf.min(wf);
        let mut buildings: Vec<Building> = Vec::new();
        let want = rng.random_range(3..=6);
        for _ in 0..want * 10 {
            if buildings.len() == want {
                break;
            }
            let bh = rng.random_range(0.1..0.25) * hf;
            let bw = rng.random_range(0.1..0.25) * wf;
            let y0 = rng.random_range(0.0..hf - bh);
            let x0 = rng.random_range(0.0..wf - bw);
            let b = Building {
                y0,
                x0,
                y1: y0 + bh,
                x1: x0 + bw,
                wall: hsv(rng.random_range(0.0..1.0), rng.random_range(0.4..0.9), rng.random_range(0.5..0.95)),
                roof: hsv(rng.random_range(0.0..1.0), rng.random_range(0.2..0.6), rng.random_range(0.25..0.6)),
            };
            let near_centre = cy > b.y0 - clear && cy < b.y1 + clear && cx > b.x0 - clear && cx < b.x1 + clear;
            let overlaps = buildings
                .iter()
                .any(|o| b.y0 < o.y1 + 1.0 && o.y0 < b.y1 + 1.0 && b.x0 < o.x1 + 1.0 && o.x0 < b.x1 + 1.0);
            if !near_centre && !overlaps {
                buildings.push(b);
            }
        }
        World {
            h,
            w,
            terrain,
            buildings,
            sky_seed: rng.random(),
        }
    }

    fn building_at(&self, y: f64, x: f64) -> Option<&Building> {
        self.buildings.iter().find(|b| b.contains(y, x))
    }

    /// Overhead map with either roofs (aerial) or walls (ground level) painted.
    fn render(&self, roofs: bool) -> Tensor {
        let (h, w) = (self.h, self.w);
        let mut img = self.terrain.clone();
        for y in 0..h {
            for x in 0..w {
                let (yf, xf) = (y as f64 + 0.5, x as f64 + 0.5);
                if let Some(b) = self.building_at(yf, xf) {
                    let c = if roofs {
                        let edge = (yf - b.y0).min(b.y1 - yf).min(xf - b.x0).min(b.x1 - xf) < 1.0;
                        let ridge = ((yf - (b.y0 + b.y1) / 2.0).abs() < 0.5) as u8 as f64 * 0.12;
                        let k = if edge { 0.6 } else { 1.0 };
                        [b.roof[0] * k + ridge, b.roof[1] * k + ridge, b.roof[2] * k + ridge]
                    } else {
                        b.wall
                    };
                    put(&mut img, h, w, y, x, c);
                }
            }
        }
        img
    }

    fn panorama(&self, ph: usize, pw: usize) -> Tensor {
        let half = ph / 2;
        let ground = polar_unwarp(&self.render(false), half, pw).expect("valid map");
        let mut rng = seed::rng(self.sky_seed, &[]);
        let clouds: Vec<(f64, f64, f64, f64)> = (0..rng.random_range(1..=3))
            .map(|_| {
                (
                    rng.random_range(0.1..0.7) * half as f64,
                    rng.random_range(0.0..pw as f64),
                    rng.random_range(0.1..0.25) * half as f64,
                    rng.random_range(0.04..0.12) * pw as f64,
                )
            })
            .collect();
        let mut pano = Tensor::zeros([3, ph, pw]);
        let (cy, cx) = (self.h as f64 / 2.0, self.w as f64 / 2.0);
        let r_max = cy.min(cx);
        for x in 0..pw {
            let theta = std::f64::consts::TAU * (x as f64 + 0.5) / pw as f64;
            // First building along the ray and the height it reaches above the horizon.
            let mut skyline = 0usize;
            let mut wall = [0.0; 3];
            let mut r = 1.0;
            while r < r_max {
                if let Some(b) = self.building_at(cy - r * theta.cos(), cx + r * theta.sin()) {
                    skyline = ((half as f64) * 2.5 / (r / r_max * 8.0).max(1.0)).round() as usize;
                    wall = b.wall.map(|v| v * 0.85);
                    break;
                }
                r += 0.5;
            }
            for y in 0..half {
                let t = y as f64 / half as f64;
                let mut c = [0.45 + 0.35 * t, 0.6 + 0.28 * t, 0.92 + 0.06 * t];
                for &(ky, kx, sy, sx) in &clouds {
                    let mut dx = (x as f64 - kx).abs();
                    dx = dx.min(pw as f64 - dx);
                    if ((y as f64 - ky) / sy).powi(2) + (dx / sx).powi(2) < 1.0 {
                        c = [0.95, 0.95, 0.97];
                    }
                }
                if half - y <= skyline {
                    c = wall;
                }
                put(&mut pano, ph, pw, y, x, c);
            }
            for y in 0..half {
                let c = [0, 1, 2].map(|k| ground.data()[(k * half + y) * pw + x]);
                put(&mut pano, ph, pw, half + y, x, c);
            }
        }
        pano
    }
}

/// Resamples an overhead `(3, h, w)` map into a `(3, out_h, out_w)` strip:
/// column `j` looks along azimuth `2 pi (j + 0.5) / out_w` (clockwise from
/// north), row 0 is the far edge of the map and the last row the centre.
pub fn polar_unwarp(map: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = match map.shape() {
        &[c, h, w] => (c, h, w),
        s => return Err(Error::shape(format!("polar_unwarp needs (c, h, w), got {s:?}"))),
    };
    if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
        return Err(Error::invalid("polar_unwarp on an empty image"));
    }
    let (cy, cx) = (h as f64 / 2.0, w as f64 / 2.0);
    let r_max = cy.min(cx);
    let d = map.data();
    let sample = |k: usize, y: f64, x: f64| -> f64 {
        let y = (y - 0.5).clamp(0.0, (h - 1) as f64);
        let x = (x - 0.5).clamp(0.0, (w - 1) as f64);
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (fy, fx) = (y - y0 as f64, x - x0 as f64);
        let at = |yy: usize, xx: usize| d[(k * h + yy) * w + xx];
        (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1)) + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1))
    };
    let mut out = vec![0.0; c * out_h * out_w];
    for i in 0..out_h {
        let r = r_max * (1.0 - (i as f64 + 0.5) / out_h as f64);
        for j in 0..out_w {
            let theta = std::f64::consts::TAU * (j as f64 + 0.5) / out_w as f64;
            let (y, x) = (cy - r * theta.cos(), cx + r * theta.sin());
            for k in 0..c {
                out[(k * out_h + i) * out_w + j] = sample(k, y, x);
            }
        }
    }
    Tensor::new([c, out_h, out_w], out)
}

/// Generates the samples in memory, quantized to 8 bits like their PNG files.
pub fn toy_samples(cfg: &ToyConfig) -> Result<Vec<PairedSample>> {
    cfg.validate()?;
    (0..cfg.n_locations)
        .map(|i| {
            let mut rng = seed::rng(cfg.seed, &[0x70f, i as u64]);
            let world = World::generate(cfg.aerial_size.0, cfg.aerial_size.1, &mut rng);
            Ok(PairedSample {
                location_id: location_id(i),
                aerial: quantize(&world.render(true)),
                ground: quantize(&world.panorama(cfg.pano_size.0, cfg.pano_size.1)),
            })
        })
        .collect()
}

/// Writes `out/{aerial,ground}/<id>.png` and `out/manifest.txt`.
pub fn make_toy_dataset(out: &Path, cfg: &ToyConfig) -> Result<DatasetManifest> {
    let samples = toy_samples(cfg)?;
    let mut pairs = Vec::with_capacity(samples.len());
    for s in &samples {
        let entry = PairEntry {
            location_id: s.location_id.clone(),
            aerial: Path::new("aerial").join(format!("{}.png", s.location_id)),
            ground: Path::new("ground").join(format!("{}.png", s.location_id)),
        };
        save_png(&out.join(&entry.aerial), &s.aerial)?;
        save_png(&out.join(&entry.ground), &s.ground)?;
        pairs.push(entry);
    }
    let manifest = DatasetManifest {
        root: out.to_path_buf(),
        split: Split::Train,
        aerial_size: cfg.aerial_size,
        ground_size: cfg.pano_size,
        center_aligned: true,
        pairs,
    };
    manifest.save()?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pearson(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    fn bottom_half(p: &Tensor) -> Vec<f64> {
        let (h, w) = (p.shape()[1], p.shape()[2]);
        (0..3)
            .flat_map(|c| p.data()[(c * h + h / 2) * w..(c + 1) * h * w].to_vec())
            .collect()
    }

    #[test]
    fn unwarped_aerial_correlates_with_its_own_panorama() {
        let samples = toy_samples(&ToyConfig::default()).unwrap();
        assert_eq!(samples.len(), 8);
        for (i, s) in samples.iter().enumerate() {
            assert_eq!(s.aerial.shape(), &[3, 64, 64]);
            assert_eq!(s.ground.shape(), &[3, 32, 128]);
            let un = polar_unwarp(&s.aerial, 16, 128).unwrap();
            let corr: Vec<f64> = samples.iter().map(|o| pearson(un.data(), &bottom_half(&o.ground))).collect();
            for (j, c) in corr.iter().enumerate() {
                if j != i {
                    assert!(corr[i] > *c, "location {i}: own {} vs {j} {}", corr[i], c);
                }
            }
        }
    }

    #[test]
    fn polar_unwarp_of_constant_and_centre() {
        let m = Tensor::full([3, 8, 8], 0.25);
        let u = polar_unwarp(&m, 4, 16).unwrap();
        assert!(u.data().iter().all(|&v| (v - 0.25).abs() < 1e-12));
        // A map that encodes the row: the far edge of column 0 (north) sees the top.
        let rows = Tensor::from_fn([1, 8, 8], |i| (i / 8) as f64);
        let u = polar_unwarp(&rows, 4, 8).unwrap();
        assert!(u.data()[0] < 0.5);
        assert!(u.data()[3] > 6.0);
        // The last row sits next to the centre.
        assert!((u.data()[3 * 8] - 3.5).abs() < 0.6);
    }

    #[test]
    fn generation_is_deterministic_and_seed_dependent() {
        let a = toy_samples(&ToyConfig::default()).unwrap();
        let b = toy_samples(&ToyConfig::default()).unwrap();
        assert_eq!(a[3].ground, b[3].ground);
        let c = toy_samples(&ToyConfig { seed: 1, ..ToyConfig::default() }).unwrap();
        assert_ne!(a[3].aerial, c[3].aerial);
    }

    #[test]
    fn needs_two_locations() {
        let err = toy_samples(&ToyConfig { n_locations: 1, ..ToyConfig::default() }).unwrap_err();
        assert!(err.to_string().contains("need ≥ 2 locations"));
    }

    #[test]
    fn dataset_files_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let m = make_toy_dataset(dir.path(), &ToyConfig::default()).unwrap();
        assert_eq!(m.pairs.len(), 8);
        let pngs = |sub: &str| std::fs::read_dir(dir.path().join(sub)).unwrap().count();
        assert_eq!(pngs("aerial") + pngs("ground"), 16);
        let loaded = DatasetManifest::load(&dir.path().join("manifest.txt")).unwrap();
        assert_eq!(loaded, m);
        loaded.check_files().unwrap();
    }
}
