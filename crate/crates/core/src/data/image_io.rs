//! PNG encoding of `(3, h, w)` tensors with values in `[0, 1]`.

use std::path::Path;

use image::{ImageFormat, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Rounds every value to the nearest 8-bit level, as a PNG round trip would.
pub fn quantize(img: &Tensor) -> Tensor {
    img.map(|v| to_byte(v) as f64 / 255.0)
}

pub fn to_rgb(img: &Tensor) -> Result<RgbImage> {
    let shape = img.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::shape(format!("expected a (3, h, w) image, got {shape:?}")));
    }
    let (h, w) = (shape[1], shape[2]);
    let d = img.data();
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        Rgb([to_byte(d[i]), to_byte(d[h * w + i]), to_byte(d[2 * h * w + i])])
    }))
}

pub fn from_rgb(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        let i = y as usize * w + x as usize;
        for c in 0..3 {
            data[c * h * w + i] = px[c] as f64 / 255.0;
        }
    }
    Tensor::new([3, h, w], data).expect("consistent image buffer")
}

pub fn save_png(path: &Path, img: &Tensor) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    to_rgb(img)?
        .save_with_format(path, ImageFormat::Png)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}

pub fn load_png(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory_with_format(&bytes, ImageFormat::Png).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok(from_rgb(&img.to_rgb8()))
}

/// Lays out `(3, h, w)` images in rows, top-aligned, padding with `fill`.
pub fn image_grid(rows: &[Vec<Tensor>], gap: usize, fill: f64) -> Result<Tensor> {
    let mut heights = Vec::new();
    let mut width = 0;
    for row in rows {
        let mut h = 0;
        let mut w = 0;
        for (i, img) in row.iter().enumerate() {
            let s = img.shape();
            if s.len() != 3 || s[0] != 3 {
                return Err(Error::shape(format!("grid cell {s:?} is not (3, h, w)")));
            }
            h = h.max(s[1]);
            w += s[2] + if i > 0 { gap } else { 0 };
        }
        heights.push(h);
        width = width.max(w);
    }
    let height = heights.iter().sum::<usize>() + gap * rows.len().saturating_sub(1);
    if height == 0 || width == 0 {
        return Err(Error::invalid("empty image grid"));
    }
    let mut out = Tensor::full([3, height, width], fill);
    let mut y0 = 0;
    for (row, rh) in rows.iter().zip(&heights) {
        let mut x0 = 0;
        for img in row {
            let (h, w) = (img.shape()[1], img.shape()[2]);
            for c in 0..3 {
                for y in 0..h {
                    let src = &img.data()[(c * h + y) * w..(c * h + y + 1) * w];
                    let at = (c * height + y0 + y) * width + x0;
                    out.data_mut()[at..at + w].copy_from_slice(src);
                }
            }
            x0 += w + gap;
        }
        y0 += rh + gap;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn png_round_trip_is_exact_after_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let img = quantize(&Tensor::uniform([3, 5, 7], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(1)));
        let path = dir.path().join("a/b.png");
        save_png(&path, &img).unwrap();
        assert_eq!(load_png(&path).unwrap(), img);
    }

    #[test]
    fn missing_file_names_path() {
        let err = load_png(Path::new("/nonexistent/x.png")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/x.png"));
    }

    #[test]
    fn grid_layout() {
        let a = Tensor::full([3, 2, 3], 1.0);
        let b = Tensor::full([3, 1, 2], 0.5);
        let g = image_grid(&[vec![a.clone(), b], vec![a]], 1, 0.0).unwrap();
        assert_eq!(g.shape(), &[3, 5, 6]);
        assert_eq!(g.data()[4], 0.5);
        assert_eq!(g.data()[3], 0.0);
        assert_eq!(g.data()[6 + 4], 0.0);
    }
}
