use super::Var;
use crate::error::{Error, Result};
use crate::tensor::{gemm, MatRef, Tensor};

/// Upper bound on im2col buffer elements; larger outputs are processed in row bands.
const COLS_LIMIT: usize = 1 << 22;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dSpec {
    pub const fn new(stride: usize, padding: usize) -> Self {
        Conv2dSpec { stride, padding }
    }
}

pub fn conv2d_output_size(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if stride == 0 || input + 2 * padding < kernel {
        return Err(Error::shape(format!(
            "conv kernel {kernel} stride {stride} padding {padding} does not fit input {input}"
        )));
    }
    Ok((input + 2 * padding - kernel) / stride + 1)
}

#[derive(Clone, Copy)]
struct Geometry {
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn k(&self) -> usize {
        self.ci * self.kh * self.kw
    }

    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn band_rows(&self) -> usize {
        (COLS_LIMIT / (self.k() * self.ow).max(1)).clamp(1, self.oh)
    }

    /// Fills `cols` (`k x rows*ow`) for output rows `oy0..oy0+rows` of one sample.
    fn im2col(&self, x: &[f64], oy0: usize, rows: usize, cols: &mut [f64]) {
        let p = rows * self.ow;
        for c in 0..self.ci {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for r in 0..rows {
                        let iy = ((oy0 + r) * self.stride + ky) as isize - self.pad as isize;
                        let line = &mut dst[r * self.ow..(r + 1) * self.ow];
                        if iy < 0 || iy >= self.h as isize {
                            line.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            *v = if ix < 0 || ix >= self.w as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds `cols` back into the input-shaped buffer `dx`.
    fn col2im(&self, cols: &[f64], oy0: usize, rows: usize, dx: &mut [f64]) {
        let p = rows * self.ow;
        for c in 0..self.ci {
            let plane = &mut dx[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let src = &cols[row * p..(row + 1) * p];
                    for r in 0..rows {
                        let iy = ((oy0 + r) * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let line = &src[r * self.ow..(r + 1) * self.ow];
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, v) in line.iter().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

impl Var {
    /// 2-D cross-correlation of `(n, ci, h, w)` with weights `(co, ci, kh, kw)`.
    pub fn conv2d(&self, weight: &Var, bias: Option<&Var>, spec: Conv2dSpec) -> Result<Var> {
        let (n, ci, h, w) = self.value().dims4()?;
        let (co, wci, kh, kw) = weight.value().dims4()?;
        if ci != wci {
            return Err(Error::shape(format!(
                "conv input {:?} vs weight {:?}",
                self.shape(),
                weight.shape()
            )));
        }
        let geo = Geometry {
            ci,
            h,
            w,
            kh,
            kw,
            oh: conv2d_output_size(h, kh, spec.stride, spec.padding)?,
            ow: conv2d_output_size(w, kw, spec.stride, spec.padding)?,
            stride: spec.stride,
            pad: spec.padding,
        };
        let (oh, ow, k) = (geo.oh, geo.ow, geo.k());
        let plane = oh * ow;
        let xd = self.value().data();
        let wd = weight.value().data();
        let mut out = vec![0.0; n * co * plane];
        let band = geo.band_rows();
        let mut cols = if geo.pointwise() {
            Vec::new()
        } else {
            vec![0.0; k * band * ow]
        };
        for b in 0..n {
            let xb = &xd[b * ci * h * w..(b + 1) * ci * h * w];
            let ob = &mut out[b * co * plane..(b + 1) * co * plane];
            if geo.pointwise() {
                gemm(co, k, plane, 1.0, MatRef::row_major(wd, k), MatRef::row_major(xb, plane), 0.0, ob, plane);
                continue;
            }
            let mut oy0 = 0;
            while oy0 < oh {
                let rows = band.min(oh - oy0);
                let p = rows * ow;
                geo.im2col(xb, oy0, rows, &mut cols[..k * p]);
                gemm(co, k, p, 1.0, MatRef::row_major(wd, k), MatRef::row_major(&cols[..k * p], p), 0.0, &mut ob[oy0 * ow..], plane);
                oy0 += rows;
            }
        }
        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(bias) = bias {
            bias.value().expect_shape(&[co])?;
            let bd = bias.value().data();
            for b in 0..n {
                for c in 0..co {
                    let start = (b * co + c) * plane;
                    for v in &mut out[start..start + plane] {
                        *v += bd[c];
                    }
                }
            }
            parents.push(bias.clone());
        }
        let value = Tensor::from_parts(vec![n, co, oh, ow], out);
        Ok(Var::from_op(
            value,
            parents,
            Box::new(move |g, _, inputs, needs| conv2d_backward(&geo, n, co, g, inputs, needs)),
        ))
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nearest(&self, factor: usize) -> Result<Var> {
        let (n, c, h, w) = self.value().dims4()?;
        if factor == 0 {
            return Err(Error::invalid("upsample factor 0"));
        }
        let (oh, ow) = (h * factor, w * factor);
        let xd = self.value().data();
        let mut out = vec![0.0; n * c * oh * ow];
        for p in 0..n * c {
            let src = &xd[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
            for y in 0..oh {
                let srow = &src[(y / factor) * w..(y / factor + 1) * w];
                for (x, v) in dst[y * ow..(y + 1) * ow].iter_mut().enumerate() {
                    *v = srow[x / factor];
                }
            }
        }
        Ok(Var::from_op(
            Tensor::from_parts(vec![n, c, oh, ow], out),
            vec![self.clone()],
            Box::new(move |g, _, _, _| {
                let gd = g.data();
                let mut dx = vec![0.0; n * c * h * w];
                for p in 0..n * c {
                    let src = &gd[p * oh * ow..(p + 1) * oh * ow];
                    let dst = &mut dx[p * h * w..(p + 1) * h * w];
                    for y in 0..oh {
                        for x in 0..ow {
                            dst[(y / factor) * w + x / factor] += src[y * ow + x];
                        }
                    }
                }
                Ok(vec![Some(Tensor::from_parts(vec![n, c, h, w], dx))])
            }),
        ))
    }

    /// Bilinear resize with half-pixel centres (no corner alignment, no antialiasing).
    pub fn resize_bilinear(&self, oh: usize, ow: usize) -> Result<Var> {
        let (n, c, h, w) = self.value().dims4()?;
        if oh == 0 || ow == 0 {
            return Err(Error::invalid("resize to an empty image"));
        }
        if (oh, ow) == (h, w) {
            return Ok(self.clone());
        }
        let ys = axis_taps(h, oh);
        let xs = axis_taps(w, ow);
        let xd = self.value().data();
        let mut out = vec![0.0; n * c * oh * ow];
        for p in 0..n * c {
            let src = &xd[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
            for (y, ty) in ys.iter().enumerate() {
                for (x, tx) in xs.iter().enumerate() {
                    dst[y * ow + x] = ty.w0 * (tx.w0 * src[ty.i0 * w + tx.i0] + tx.w1 * src[ty.i0 * w + tx.i1])
                        + ty.w1 * (tx.w0 * src[ty.i1 * w + tx.i0] + tx.w1 * src[ty.i1 * w + tx.i1]);
                }
            }
        }
        Ok(Var::from_op(
            Tensor::from_parts(vec![n, c, oh, ow], out),
            vec![self.clone()],
            Box::new(move |g, _, _, _| {
                let gd = g.data();
                let mut dx = vec![0.0; n * c * h * w];
                for p in 0..n * c {
                    let src = &gd[p * oh * ow..(p + 1) * oh * ow];
                    let dst = &mut dx[p * h * w..(p + 1) * h * w];
                    for (y, ty) in ys.iter().enumerate() {
                        for (x, tx) in xs.iter().enumerate() {
                            let v = src[y * ow + x];
                            dst[ty.i0 * w + tx.i0] += ty.w0 * tx.w0 * v;
                            dst[ty.i0 * w + tx.i1] += ty.w0 * tx.w1 * v;
                            dst[ty.i1 * w + tx.i0] += ty.w1 * tx.w0 * v;
                            dst[ty.i1 * w + tx.i1] += ty.w1 * tx.w1 * v;
                        }
                    }
                }
                Ok(vec![Some(Tensor::from_parts(vec![n, c, h, w], dx))])
            }),
        ))
    }
}

#[derive(Clone, Copy, Debug)]
struct Tap {
    i0: usize,
    i1: usize,
    w0: f64,
    w1: f64,
}

fn axis_taps(input: usize, output: usize) -> Vec<Tap> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let frac = src - i0 as f64;
            Tap {
                i0,
                i1,
                w0: 1.0 - frac,
                w1: frac,
            }
        })
        .collect()
}

fn conv2d_backward(
    geo: &Geometry,
    n: usize,
    co: usize,
    g: &Tensor,
    inputs: &[&Tensor],
    needs: &[bool],
) -> Result<Vec<Option<Tensor>>> {
    let (ci, h, w, oh, ow, k) = (geo.ci, geo.h, geo.w, geo.oh, geo.ow, geo.k());
    let plane = oh * ow;
    let gd = g.data();
    let xd = inputs[0].data();
    let wd = inputs[1].data();
    let mut dx = needs[0].then(|| vec![0.0; n * ci * h * w]);
    let mut dw = needs[1].then(|| vec![0.0; co * k]);
    let band = geo.band_rows();
    let mut cols = vec![0.0; if geo.pointwise() { 0 } else { k * band * ow }];
    let mut dcols = vec![0.0; if dx.is_some() && !geo.pointwise() { k * band * ow } else { 0 }];

    for b in 0..n {
        let gb = &gd[b * co * plane..(b + 1) * co * plane];
        let xb = &xd[b * ci * h * w..(b + 1) * ci * h * w];
        if geo.pointwise() {
            if let Some(dw) = dw.as_mut() {
                gemm(co, plane, k, 1.0, MatRef::row_major(gb, plane), MatRef::transposed(xb, plane), 1.0, dw, k);
            }
            if let Some(dx) = dx.as_mut() {
                let dxb = &mut dx[b * ci * h * w..(b + 1) * ci * h * w];
                gemm(k, co, plane, 1.0, MatRef::transposed(wd, k), MatRef::row_major(gb, plane), 0.0, dxb, plane);
            }
            continue;
        }
        let mut oy0 = 0;
        while oy0 < oh {
            let rows = band.min(oh - oy0);
            let p = rows * ow;
            let gband = MatRef {
                data: &gb[oy0 * ow..],
                row_stride: plane as isize,
                col_stride: 1,
            };
            if let Some(dw) = dw.as_mut() {
                geo.im2col(xb, oy0, rows, &mut cols[..k * p]);
                gemm(co, p, k, 1.0, gband, MatRef::transposed(&cols[..k * p], p), 1.0, dw, k);
            }
            if let Some(dx) = dx.as_mut() {
                gemm(k, co, p, 1.0, MatRef::transposed(wd, k), gband, 0.0, &mut dcols[..k * p], p);
                geo.col2im(&dcols[..k * p], oy0, rows, &mut dx[b * ci * h * w..(b + 1) * ci * h * w]);
            }
            oy0 += rows;
        }
    }

    let mut res = vec![
        dx.map(|d| Tensor::from_parts(inputs[0].shape().to_vec(), d)),
        dw.map(|d| Tensor::from_parts(inputs[1].shape().to_vec(), d)),
    ];
    if needs.len() == 3 {
        res.push(needs[2].then(|| {
            let mut db = vec![0.0; co];
            for b in 0..n {
                for (c, acc) in db.iter_mut().enumerate() {
                    let start = (b * co + c) * plane;
                    *acc += gd[start..start + plane].iter().sum::<f64>();
                }
            }
            Tensor::from_parts(vec![co], db)
        }));
    }
    Ok(res)
}
