//! Differentiable colour and cutout augmentation for discriminator inputs.
//!
//! Parameters are drawn once per step with [`AugParams::sample`] and applied
//! to every batch that the discriminator compares (real, fake, mismatched), so
//! all of them see identical transforms.

use rand::Rng;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AugParams {
    /// Per-image additive shift, `U(-0.5, 0.5)`.
    pub brightness: Vec<f64>,
    /// Per-image chroma scale around the channel mean, `U(0, 2)`.
    pub saturation: Vec<f64>,
    /// Per-image scale around the image mean, `U(0.5, 1.5)`.
    pub contrast: Vec<f64>,
    /// Top-left corner of the zeroed half-size rectangle.
    pub cutout: Vec<(usize, usize)>,
    pub height: usize,
    pub width: usize,
}

impl AugParams {
    pub fn sample<R: Rng + ?Sized>(n: usize, height: usize, width: usize, rng: &mut R) -> Self {
        let mut brightness = Vec::with_capacity(n);
        let mut saturation = Vec::with_capacity(n);
        let mut contrast = Vec::with_capacity(n);
        let mut cutout = Vec::with_capacity(n);
        let (ch, cw) = (height / 2, width / 2);
        for _ in 0..n {
            brightness.push(rng.random_range(-0.5..0.5));
            saturation.push(rng.random_range(0.0..2.0));
            contrast.push(rng.random_range(0.5..1.5));
            cutout.push((rng.random_range(0..=height - ch), rng.random_range(0..=width - cw)));
        }
        AugParams {
            brightness,
            saturation,
            contrast,
            cutout,
            height,
            width,
        }
    }

    /// Parameters that leave images unchanged apart from clamping.
    pub fn identity(n: usize, height: usize, width: usize) -> Self {
        AugParams {
            brightness: vec![0.0; n],
            saturation: vec![1.0; n],
            contrast: vec![1.0; n],
            cutout: vec![(0, 0); n],
            height: 0,
            width: 0,
        }
        .with_size(height, width)
    }

    fn with_size(mut self, height: usize, width: usize) -> Self {
        self.height = height;
        self.width = width;
        self
    }

    pub fn len(&self) -> usize {
        self.brightness.len()
    }

    pub fn is_empty(&self) -> bool {
        self.brightness.is_empty()
    }

    /// `(n, 1, h, w)` mask that is zero inside each cutout rectangle. Identity
    /// parameters carry an empty rectangle.
    pub fn cutout_mask(&self, identity: bool) -> Tensor {
        let (h, w) = (self.height, self.width);
        let mut m = Tensor::ones([self.len(), 1, h, w]);
        if identity {
            return m;
        }
        let (ch, cw) = (h / 2, w / 2);
        for (i, &(y0, x0)) in self.cutout.iter().enumerate() {
            for y in y0..y0 + ch {
                let row = (i * h + y) * w;
                m.data_mut()[row + x0..row + x0 + cw].fill(0.0);
            }
        }
        m
    }

    fn is_identity(&self) -> bool {
        self.brightness.iter().all(|&b| b == 0.0)
            && self.saturation.iter().all(|&s| s == 1.0)
            && self.contrast.iter().all(|&c| c == 1.0)
            && self.cutout.iter().all(|&c| c == (0, 0))
    }
}

fn per_image(values: &[f64]) -> Var {
    Var::constant(Tensor::new([values.len(), 1, 1, 1], values.to_vec()).expect("one value per image"))
}

/// Colour (brightness, saturation, contrast) then cutout, then clamp to
/// `[-1, 1]`. Differentiable with respect to `x`.
pub fn diffaug(x: &Var, params: &AugParams) -> Result<Var> {
    let (n, c, h, w) = x.value().dims4()?;
    if n != params.len() || (h, w) != (params.height, params.width) {
        return Err(Error::shape(format!(
            "augmentation drawn for {} images of {}x{}, applied to {:?}",
            params.len(),
            params.height,
            params.width,
            x.shape()
        )));
    }
    if c != 3 {
        return Err(Error::shape(format!("augmentation needs 3 channels, got {c}")));
    }
    let x = x.add(&per_image(&params.brightness))?;
    let m = x.mean_axes(&[1])?;
    let x = x.sub(&m)?.mul(&per_image(&params.saturation))?.add(&m)?;
    // The contrast pivot is the mean of the visible pixels only, so the cut
    // region has no influence on the output.
    let mask_t = params.cutout_mask(params.is_identity());
    let kept = mask_t.data()[..h * w].iter().sum::<f64>();
    let mask = Var::constant(mask_t);
    let m = x.mul(&mask)?.mean_axes(&[1, 2, 3])?.mul_scalar((h * w) as f64 / kept);
    let x = x.sub(&m)?.mul(&per_image(&params.contrast))?.add(&m)?;
    Ok(x.mul(&mask)?.clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_inputs, GradCheckOptions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn replayed_state_gives_identical_draws() {
        let a = AugParams::sample(4, 8, 8, &mut rng(3));
        let b = AugParams::sample(4, 8, 8, &mut rng(3));
        assert_eq!(a, b);
        let x = Var::constant(Tensor::uniform([4, 3, 8, 8], -1.0, 1.0, &mut rng(4)));
        let y = Var::constant(Tensor::uniform([4, 3, 8, 8], -1.0, 1.0, &mut rng(5)));
        let (ax, ay) = (diffaug(&x, &a).unwrap(), diffaug(&y, &b).unwrap());
        assert_eq!(ax.shape(), x.shape());
        // Same zeroed rectangles in both batches.
        let zero = |t: &Tensor| t.data().iter().map(|&v| v == 0.0).collect::<Vec<_>>();
        let mask = a.cutout_mask(false);
        for (i, z) in zero(ax.value()).iter().enumerate() {
            let (n, p) = (i / 192, i % 64);
            if mask.data()[n * 64 + p] == 0.0 {
                assert!(*z);
            }
        }
        assert_eq!(zero(&a.cutout_mask(false)), zero(&b.cutout_mask(false)));
        assert!(ay.value().data().iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn identity_params_only_clamp() {
        let x = Tensor::uniform([2, 3, 4, 6], -1.0, 1.0, &mut rng(6));
        let y = diffaug(&Var::constant(x.clone()), &AugParams::identity(2, 4, 6)).unwrap();
        assert!(y.value().max_abs_diff(&x) < 1e-12);
    }

    #[test]
    fn cutout_covers_a_quarter() {
        let p = AugParams::sample(3, 8, 6, &mut rng(7));
        let m = p.cutout_mask(false);
        for i in 0..3 {
            let zeros = m.data()[i * 48..(i + 1) * 48].iter().filter(|&&v| v == 0.0).count();
            assert_eq!(zeros, 4 * 3);
        }
    }

    #[test]
    fn gradient_matches_outside_cutout_and_vanishes_inside() {
        let x = Tensor::uniform([2, 3, 8, 8], -0.3, 0.3, &mut rng(8));
        let mut p = AugParams::sample(2, 8, 8, &mut rng(9));
        p.brightness = vec![0.1, -0.1];
        p.contrast = vec![0.8, 1.1];
        let rep = check_inputs(
            |v| Ok(diffaug(&v[0], &p)?.sum()),
            std::slice::from_ref(&x),
            &GradCheckOptions { max_coords: 384, ..Default::default() },
        )
        .unwrap();
        assert!(rep.max_rel_err() < 1e-4, "{rep:?}");
        let leaf = Var::leaf(x);
        let g = diffaug(&leaf, &p).unwrap().sum().backward().unwrap();
        let g = g.wrt(&leaf).unwrap();
        let mask = p.cutout_mask(false);
        for (i, gv) in g.data().iter().enumerate() {
            if mask.data()[(i / 192) * 64 + i % 64] == 0.0 {
                assert_eq!(*gv, 0.0);
            }
        }
    }

    #[test]
    fn wrong_batch_is_rejected() {
        let p = AugParams::sample(2, 4, 4, &mut rng(1));
        assert!(diffaug(&Var::constant(Tensor::zeros([3, 3, 4, 4])), &p).is_err());
    }
}
