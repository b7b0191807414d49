use super::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Smallest divisor allowed when rescaling by a norm.
const NORM_FLOOR: f64 = 1e-12;

impl Var {
    /// Per-`(n, c)` normalization to zero spatial mean and unit deviation,
    /// `(x - mu) / sqrt(var + eps)` with population variance.
    pub fn instance_norm(&self, eps: f64) -> Result<Var> {
        let (n, c, h, w) = self.value().dims4()?;
        let plane = h * w;
        let xd = self.value().data();
        let mut out = vec![0.0; xd.len()];
        let mut inv_sigma = vec![0.0; n * c];
        for p in 0..n * c {
            let src = &xd[p * plane..(p + 1) * plane];
            let mu = src.iter().sum::<f64>() / plane as f64;
            let var = src.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / plane as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_sigma[p] = is;
            for (o, v) in out[p * plane..(p + 1) * plane].iter_mut().zip(src) {
                *o = (v - mu) * is;
            }
        }
        Ok(Var::from_op(
            Tensor::from_parts(vec![n, c, h, w], out),
            vec![self.clone()],
            Box::new(move |g, y, _, _| {
                let (gd, yd) = (g.data(), y.data());
                let mut dx = vec![0.0; gd.len()];
                for p in 0..n * c {
                    let gs = &gd[p * plane..(p + 1) * plane];
                    let ys = &yd[p * plane..(p + 1) * plane];
                    let mg = gs.iter().sum::<f64>() / plane as f64;
                    let mgy = gs.iter().zip(ys).map(|(a, b)| a * b).sum::<f64>() / plane as f64;
                    for ((d, gv), yv) in dx[p * plane..(p + 1) * plane].iter_mut().zip(gs).zip(ys) {
                        *d = inv_sigma[p] * (gv - mg - yv * mgy);
                    }
                }
                Ok(vec![Some(Tensor::from_parts(g.shape().to_vec(), dx))])
            }),
        ))
    }

    /// Scales each row of a `(n, d)` matrix to unit L2 norm.
    pub fn l2_normalize_rows(&self) -> Result<Var> {
        let (n, d) = self.value().dims2()?;
        let xd = self.value().data();
        let norms: Vec<f64> = xd
            .chunks(d)
            .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_FLOOR))
            .collect();
        let out: Vec<f64> = xd
            .chunks(d)
            .zip(&norms)
            .flat_map(|(r, nr)| r.iter().map(move |v| v / nr))
            .collect();
        Ok(Var::from_op(
            Tensor::from_parts(vec![n, d], out),
            vec![self.clone()],
            Box::new(move |g, y, _, _| {
                let mut dx = vec![0.0; n * d];
                for i in 0..n {
                    let gs = &g.data()[i * d..(i + 1) * d];
                    let ys = &y.data()[i * d..(i + 1) * d];
                    let dot: f64 = gs.iter().zip(ys).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        dx[i * d + j] = (gs[j] - ys[j] * dot) / norms[i];
                    }
                }
                Ok(vec![Some(Tensor::from_parts(vec![n, d], dx))])
            }),
        ))
    }

    /// Row-wise dot product of two `(n, d)` matrices, giving `(n,)`.
    pub fn row_dot(&self, other: &Var) -> Result<Var> {
        let (n, d) = self.value().dims2()?;
        other.value().expect_shape(&[n, d])?;
        let dots: Vec<f64> = self
            .value()
            .data()
            .chunks(d)
            .zip(other.value().data().chunks(d))
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x * y).sum())
            .collect();
        Ok(Var::from_op(
            Tensor::from_parts(vec![n], dots),
            vec![self.clone(), other.clone()],
            Box::new(move |g, _, inputs, needs| {
                let scaled = |t: &Tensor| {
                    let data = t
                        .data()
                        .chunks(d)
                        .zip(g.data())
                        .flat_map(|(r, gv)| r.iter().map(move |v| v * gv))
                        .collect();
                    Tensor::from_parts(vec![n, d], data)
                };
                Ok(vec![needs[0].then(|| scaled(inputs[1])), needs[1].then(|| scaled(inputs[0]))])
            }),
        ))
    }

    /// Divides a weight by its top singular value estimated from the left
    /// singular vector guess `u` (held constant): `sigma = |W^T u|`.
    ///
    /// The weight is viewed as a `(rows, rest)` matrix where `rows` is its
    /// leading dimension. `u` holds one or more `rows`-vectors; only the first
    /// is used.
    pub fn spectral_normalize(&self, u: &Tensor) -> Result<Var> {
        let rows = self.shape()[0];
        if u.len() < rows || !u.len().is_multiple_of(rows) {
            return Err(Error::shape(format!(
                "spectral norm vector of {} for weight {:?}",
                u.len(),
                self.shape()
            )));
        }
        let wd = self.value().data();
        let cols = wd.len() / rows;
        let (v, sigma) = right_vector(wd, rows, cols, &u.data()[..rows]);
        let clamped = sigma < NORM_FLOOR;
        let inv = 1.0 / sigma.max(NORM_FLOOR);
        let value = self.value().scale(inv);
        let u = u.data()[..rows].to_vec();
        Ok(Var::from_op(
            value,
            vec![self.clone()],
            Box::new(move |g, _, inputs, _| {
                let gd = g.data();
                let mut dw: Vec<f64> = gd.iter().map(|v| v * inv).collect();
                if !clamped {
                    let gw: f64 = gd.iter().zip(inputs[0].data()).map(|(a, b)| a * b).sum();
                    let k = gw * inv * inv;
                    for i in 0..rows {
                        for j in 0..cols {
                            dw[i * cols + j] -= k * u[i] * v[j];
                        }
                    }
                }
                Ok(vec![Some(Tensor::from_parts(g.shape().to_vec(), dw))])
            }),
        ))
    }
}

/// `v = W^T u / |W^T u|` and `|W^T u|` for a row-major `(rows, cols)` matrix.
pub(crate) fn right_vector(w: &[f64], rows: usize, cols: usize, u: &[f64]) -> (Vec<f64>, f64) {
    let mut v = vec![0.0; cols];
    for i in 0..rows {
        let ui = u[i];
        for (vj, wij) in v.iter_mut().zip(&w[i * cols..(i + 1) * cols]) {
            *vj += wij * ui;
        }
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = 1.0 / norm.max(NORM_FLOOR);
    v.iter_mut().for_each(|x| *x *= scale);
    (v, norm)
}
