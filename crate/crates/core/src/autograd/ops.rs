use super::Var;
use crate::error::{Error, Result};
use crate::tensor::{gemm, MatRef, Tensor};

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![0; shape.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        s[i] = acc;
        acc *= shape[i];
    }
    s
}

/// Same-rank broadcasting: each dimension pair must be equal or contain a 1.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("cannot broadcast {a:?} with {b:?}")));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(Error::shape(format!("cannot broadcast {a:?} with {b:?}"))),
        })
        .collect()
}

/// Strides of `shape` viewed inside `out`, with 0 on broadcast axes.
fn view_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let s = strides(shape);
    shape
        .iter()
        .zip(out)
        .zip(s)
        .map(|((&d, &o), st)| if d == o { st } else { 0 })
        .collect()
}

/// Visits every output element as `(out_index, a_index, b_index)`.
fn for_each_pair(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let rank = out.len();
    let numel: usize = out.iter().product();
    if numel == 0 {
        return;
    }
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let inner = out[rank - 1];
    let (ia, ib) = (sa[rank - 1], sb[rank - 1]);
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    let mut o = 0;
    while o < numel {
        for k in 0..inner {
            f(o + k, oa + k * ia, ob + k * ib);
        }
        o += inner;
        // odometer over the leading axes
        let mut d = rank - 1;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out[d] {
                break;
            }
            oa -= sa[d] * out[d];
            ob -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

pub(crate) fn broadcast_zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let out = broadcast_shape(a.shape(), b.shape())?;
    let sa = view_strides(a.shape(), &out);
    let sb = view_strides(b.shape(), &out);
    let mut data = vec![0.0; out.iter().product()];
    let (ad, bd) = (a.data(), b.data());
    for_each_pair(&out, &sa, &sb, |o, i, j| data[o] = f(ad[i], bd[j]));
    Ok(Tensor::from_parts(out, data))
}

/// Sums `t` down to `shape` (the inverse of broadcasting).
pub(crate) fn sum_to_shape(t: &Tensor, shape: &[usize]) -> Tensor {
    if t.shape() == shape {
        return t.clone();
    }
    let out = t.shape().to_vec();
    let st = view_strides(shape, &out);
    let mut acc = vec![0.0; shape.iter().product()];
    let td = t.data();
    for_each_pair(&out, &st, &st, |o, i, _| acc[i] += td[o]);
    Tensor::from_parts(shape.to_vec(), acc)
}

fn unary(x: &Var, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Var {
    let value = x.value().map(f);
    Var::from_op(
        value,
        vec![x.clone()],
        Box::new(move |g, out, inputs, _| {
            let xs = inputs[0].data();
            let ys = out.data();
            let data = g
                .data()
                .iter()
                .enumerate()
                .map(|(i, &gi)| gi * df(xs[i], ys[i]))
                .collect();
            Ok(vec![Some(Tensor::from_parts(g.shape().to_vec(), data))])
        }),
    )
}

impl Var {
    pub fn add(&self, other: &Var) -> Result<Var> {
        let value = broadcast_zip(self.value(), other.value(), |a, b| a + b)?;
        Ok(Var::from_op(
            value,
            vec![self.clone(), other.clone()],
            Box::new(|g, _, inputs, needs| {
                Ok(vec![
                    needs[0].then(|| sum_to_shape(g, inputs[0].shape())),
                    needs[1].then(|| sum_to_shape(g, inputs[1].shape())),
                ])
            }),
        ))
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        let value = broadcast_zip(self.value(), other.value(), |a, b| a - b)?;
        Ok(Var::from_op(
            value,
            vec![self.clone(), other.clone()],
            Box::new(|g, _, inputs, needs| {
                Ok(vec![
                    needs[0].then(|| sum_to_shape(g, inputs[0].shape())),
                    needs[1].then(|| sum_to_shape(g, inputs[1].shape()).scale(-1.0)),
                ])
            }),
        ))
    }

    pub fn mul(&self, other: &Var) -> Result<Var> {
        let value = broadcast_zip(self.value(), other.value(), |a, b| a * b)?;
        Ok(Var::from_op(
            value,
            vec![self.clone(), other.clone()],
            Box::new(|g, _, inputs, needs| {
                let ga = if needs[0] {
                    Some(sum_to_shape(
                        &broadcast_zip(g, inputs[1], |x, y| x * y)?,
                        inputs[0].shape(),
                    ))
                } else {
                    None
                };
                let gb = if needs[1] {
                    Some(sum_to_shape(
                        &broadcast_zip(g, inputs[0], |x, y| x * y)?,
                        inputs[1].shape(),
                    ))
                } else {
                    None
                };
                Ok(vec![ga, gb])
            }),
        ))
    }

    pub fn add_scalar(&self, k: f64) -> Var {
        unary(self, move |v| v + k, |_, _| 1.0)
    }

    pub fn mul_scalar(&self, k: f64) -> Var {
        unary(self, move |v| v * k, move |_, _| k)
    }

    pub fn neg(&self) -> Var {
        self.mul_scalar(-1.0)
    }

    pub fn leaky_relu(&self, slope: f64) -> Var {
        unary(
            self,
            move |v| if v > 0.0 { v } else { slope * v },
            move |x, _| if x > 0.0 { 1.0 } else { slope },
        )
    }

    pub fn relu(&self) -> Var {
        unary(self, |v| v.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(&self) -> Var {
        unary(self, sigmoid, |_, y| y * (1.0 - y))
    }

    /// Elementwise `1 / x`; errors on zero entries.
    pub fn reciprocal(&self) -> Result<Var> {
        if self.value().data().contains(&0.0) {
            return Err(Error::NonFinite("reciprocal of zero".into()));
        }
        Ok(unary(self, |v| 1.0 / v, |_, y| -y * y))
    }

    pub fn tanh(&self) -> Var {
        unary(self, f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn abs(&self) -> Var {
        unary(self, f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn square(&self) -> Var {
        unary(self, |v| v * v, |x, _| 2.0 * x)
    }

    /// Clamps to `[lo, hi]`; the gradient is zero where the input is clipped.
    pub fn clamp(&self, lo: f64, hi: f64) -> Var {
        unary(
            self,
            move |v| v.clamp(lo, hi),
            move |x, _| if x > lo && x < hi { 1.0 } else { 0.0 },
        )
    }

    pub fn sum(&self) -> Var {
        let value = Tensor::scalar(self.value().sum());
        Var::from_op(
            value,
            vec![self.clone()],
            Box::new(|g, _, inputs, _| Ok(vec![Some(Tensor::full(inputs[0].shape().to_vec(), g.item()))])),
        )
    }

    pub fn mean(&self) -> Var {
        let n = self.value().len() as f64;
        self.sum().mul_scalar(1.0 / n)
    }

    /// Mean over `axes`, keeping them as size-1 dimensions.
    pub fn mean_axes(&self, axes: &[usize]) -> Result<Var> {
        let shape = self.shape().to_vec();
        if let Some(&bad) = axes.iter().find(|&&a| a >= shape.len()) {
            return Err(Error::shape(format!("axis {bad} out of range for {shape:?}")));
        }
        let mut reduced = shape.clone();
        let mut count = 1usize;
        for &a in axes {
            count *= shape[a];
            reduced[a] = 1;
        }
        let inv = 1.0 / count as f64;
        let value = sum_to_shape(self.value(), &reduced).scale(inv);
        Ok(Var::from_op(
            value,
            vec![self.clone()],
            Box::new(move |g, _, inputs, _| {
                let zeros = Tensor::zeros(inputs[0].shape().to_vec());
                Ok(vec![Some(broadcast_zip(&zeros, g, |_, gv| gv * inv)?)])
            }),
        ))
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value().reshape(shape)?;
        Ok(Var::from_op(
            value,
            vec![self.clone()],
            Box::new(|g, _, inputs, _| Ok(vec![Some(g.reshape(inputs[0].shape().to_vec())?)])),
        ))
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(items: &[Var], axis: usize) -> Result<Var> {
        let first = items
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let rank = first.shape().len();
        if axis >= rank {
            return Err(Error::shape(format!("concat axis {axis} for rank {rank}")));
        }
        for v in items {
            let s = v.shape();
            if s.len() != rank || (0..rank).any(|d| d != axis && s[d] != first.shape()[d]) {
                return Err(Error::shape(format!(
                    "concat {:?} with {:?} on axis {axis}",
                    first.shape(),
                    s
                )));
            }
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let widths: Vec<usize> = items.iter().map(|v| v.shape()[axis] * inner).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (v, &wd) in items.iter().zip(&widths) {
                data.extend_from_slice(&v.value().data()[o * wd..(o + 1) * wd]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total / inner.max(1);
        let value = Tensor::from_parts(shape, data);
        Ok(Var::from_op(
            value,
            items.to_vec(),
            Box::new(move |g, _, inputs, needs| {
                let mut out: Vec<Option<Vec<f64>>> = needs
                    .iter()
                    .zip(&widths)
                    .map(|(&n, &wd)| n.then(|| Vec::with_capacity(outer * wd)))
                    .collect();
                let gd = g.data();
                for o in 0..outer {
                    let mut off = o * total;
                    for (buf, &wd) in out.iter_mut().zip(&widths) {
                        if let Some(b) = buf {
                            b.extend_from_slice(&gd[off..off + wd]);
                        }
                        off += wd;
                    }
                }
                Ok(out
                    .into_iter()
                    .zip(inputs)
                    .map(|(b, t)| b.map(|d| Tensor::from_parts(t.shape().to_vec(), d)))
                    .collect())
            }),
        ))
    }

    /// Selects rows of the leading axis; gradients scatter-add back.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Var> {
        let rows = self.shape()[0];
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::shape(format!("row {bad} out of range ({rows} rows)")));
        }
        let stride = self.value().len() / rows.max(1);
        let src = self.value().data();
        let mut data = Vec::with_capacity(indices.len() * stride);
        for &i in indices {
            data.extend_from_slice(&src[i * stride..(i + 1) * stride]);
        }
        let mut shape = self.shape().to_vec();
        shape[0] = indices.len();
        let indices = indices.to_vec();
        Ok(Var::from_op(
            Tensor::from_parts(shape, data),
            vec![self.clone()],
            Box::new(move |g, _, inputs, _| {
                let mut acc = Tensor::zeros(inputs[0].shape().to_vec());
                let (ad, gd) = (acc.data_mut(), g.data());
                for (k, &i) in indices.iter().enumerate() {
                    for j in 0..stride {
                        ad[i * stride + j] += gd[k * stride + j];
                    }
                }
                Ok(vec![Some(acc)])
            }),
        ))
    }

    /// Tiles a `(n, k)` matrix into a `(n, k, h, w)` map.
    pub fn tile_spatial(&self, h: usize, w: usize) -> Result<Var> {
        let (n, k) = self.value().dims2()?;
        self.reshape([n, k, 1, 1])?
            .add(&Var::constant(Tensor::zeros([n, k, h, w])))
    }

    /// Row-major matrix product of two rank-2 values.
    pub fn matmul(&self, other: &Var) -> Result<Var> {
        let value = self.value().matmul(other.value())?;
        Ok(Var::from_op(
            value,
            vec![self.clone(), other.clone()],
            Box::new(|g, _, inputs, needs| {
                let (m, k) = inputs[0].dims2()?;
                let (_, n) = inputs[1].dims2()?;
                let ga = needs[0].then(|| {
                    let mut d = vec![0.0; m * k];
                    gemm(m, n, k, 1.0, MatRef::row_major(g.data(), n), MatRef::transposed(inputs[1].data(), n), 0.0, &mut d, k);
                    Tensor::from_parts(vec![m, k], d)
                });
                let gb = needs[1].then(|| {
                    let mut d = vec![0.0; k * n];
                    gemm(k, m, n, 1.0, MatRef::transposed(inputs[0].data(), k), MatRef::row_major(g.data(), n), 0.0, &mut d, n);
                    Tensor::from_parts(vec![k, n], d)
                });
                Ok(vec![ga, gb])
            }),
        ))
    }

    /// `x W^T + b` for `x: (n, in)`, `W: (out, in)`, `b: (out,)`.
    pub fn linear(&self, weight: &Var, bias: Option<&Var>) -> Result<Var> {
        let (n, din) = self.value().dims2()?;
        let (dout, win) = weight.value().dims2()?;
        if din != win {
            return Err(Error::shape(format!(
                "linear input {:?} vs weight {:?}",
                self.shape(),
                weight.shape()
            )));
        }
        let mut out = vec![0.0; n * dout];
        gemm(
            n,
            din,
            dout,
            1.0,
            MatRef::row_major(self.value().data(), din),
            MatRef::transposed(weight.value().data(), din),
            0.0,
            &mut out,
            dout,
        );
        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            b.value().expect_shape(&[dout])?;
            let bd = b.value().data();
            for row in out.chunks_mut(dout) {
                for (o, bv) in row.iter_mut().zip(bd) {
                    *o += bv;
                }
            }
            parents.push(b.clone());
        }
        Ok(Var::from_op(
            Tensor::from_parts(vec![n, dout], out),
            parents,
            Box::new(move |g, _, inputs, needs| {
                let gd = g.data();
                let gx = needs[0].then(|| {
                    let mut d = vec![0.0; n * din];
                    gemm(n, dout, din, 1.0, MatRef::row_major(gd, dout), MatRef::row_major(inputs[1].data(), din), 0.0, &mut d, din);
                    Tensor::from_parts(vec![n, din], d)
                });
                let gw = needs[1].then(|| {
                    let mut d = vec![0.0; dout * din];
                    gemm(dout, n, din, 1.0, MatRef::transposed(gd, dout), MatRef::row_major(inputs[0].data(), din), 0.0, &mut d, din);
                    Tensor::from_parts(vec![dout, din], d)
                });
                let mut res = vec![gx, gw];
                if needs.len() == 3 {
                    res.push(needs[2].then(|| {
                        let mut d = vec![0.0; dout];
                        for row in gd.chunks(dout) {
                            for (a, v) in d.iter_mut().zip(row) {
                                *a += v;
                            }
                        }
                        Tensor::from_parts(vec![dout], d)
                    }));
                }
                Ok(res)
            }),
        ))
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
