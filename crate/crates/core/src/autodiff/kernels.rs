//! Eager tensor kernels behind the tape ops. Shapes are validated by the tape
//! before these run.

use num_complex::Complex64;

use crate::spectral::dft2_in_place;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn out_len(&self, input: usize, kernel: usize) -> Option<usize> {
        let padded = input + 2 * self.padding;
        if padded < kernel || self.stride == 0 {
            return None;
        }
        Some((padded - kernel) / self.stride + 1)
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = ad[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    Tensor::new(&[m, n], out).expect("matmul shape")
}

pub fn transpose(a: &Tensor) -> Tensor {
    let (m, n) = (a.shape()[0], a.shape()[1]);
    let d = a.data();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = d[i * n + j];
        }
    }
    Tensor::new(&[n, m], out).expect("transpose shape")
}

/// Splits a shape around `axis` into (outer, len, inner) extents.
fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn sum_axis(a: &Tensor, axis: usize) -> Tensor {
    let (outer, len, inner) = axis_extents(a.shape(), axis);
    let d = a.data();
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for l in 0..len {
            let src = &d[(o * len + l) * inner..(o * len + l + 1) * inner];
            for (dst, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                *dst += s;
            }
        }
    }
    let mut shape = a.shape().to_vec();
    shape.remove(axis);
    Tensor::new(&shape, out).expect("sum_axis shape")
}

pub fn broadcast_axis(a: &Tensor, axis: usize, size: usize) -> Tensor {
    let mut shape = a.shape().to_vec();
    shape.insert(axis, size);
    let (outer, _, inner) = axis_extents(&shape, axis);
    let d = a.data();
    let mut out = Vec::with_capacity(outer * size * inner);
    for o in 0..outer {
        let src = &d[o * inner..(o + 1) * inner];
        for _ in 0..size {
            out.extend_from_slice(src);
        }
    }
    Tensor::new(&shape, out).expect("broadcast_axis shape")
}

pub fn conv2d(x: &Tensor, w: &Tensor, g: ConvGeom) -> Tensor {
    let [b, cin, h, wd] = dims4(x);
    let [cout, _, kh, kw] = dims4(w);
    let ho = g.out_len(h, kh).unwrap();
    let wo = g.out_len(wd, kw).unwrap();
    let (xd, wdat) = (x.data(), w.data());
    let mut out = vec![0.0; b * cout * ho * wo];
    for bi in 0..b {
        for co in 0..cout {
            let obase = (bi * cout + co) * ho * wo;
            for ci in 0..cin {
                let xbase = (bi * cin + ci) * h * wd;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = wdat[((co * cin + ci) * kh + ky) * kw + kx];
                        for oy in 0..ho {
                            let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let xrow = xbase + iy as usize * wd;
                            let orow = obase + oy * wo;
                            for ox in 0..wo {
                                let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                out[orow + ox] += wv * xd[xrow + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[b, cout, ho, wo], out).expect("conv2d shape")
}

/// Adjoint of `conv2d` in its input: maps an output-shaped tensor back to input space.
pub fn conv2d_input_adjoint(gy: &Tensor, w: &Tensor, g: ConvGeom, in_hw: (usize, usize)) -> Tensor {
    let [b, cout, ho, wo] = dims4(gy);
    let [_, cin, kh, kw] = dims4(w);
    let (h, wd) = in_hw;
    let (gd, wdat) = (gy.data(), w.data());
    let mut out = vec![0.0; b * cin * h * wd];
    for bi in 0..b {
        for co in 0..cout {
            let gbase = (bi * cout + co) * ho * wo;
            for ci in 0..cin {
                let xbase = (bi * cin + ci) * h * wd;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = wdat[((co * cin + ci) * kh + ky) * kw + kx];
                        for oy in 0..ho {
                            let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let xrow = xbase + iy as usize * wd;
                            let grow = gbase + oy * wo;
                            for ox in 0..wo {
                                let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                out[xrow + ix as usize] += wv * gd[grow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[b, cin, h, wd], out).expect("conv2d adjoint shape")
}

/// Adjoint of `conv2d` in its kernel: correlates input with an output-shaped tensor.
pub fn conv2d_weight_adjoint(x: &Tensor, gy: &Tensor, g: ConvGeom, k_hw: (usize, usize)) -> Tensor {
    let [b, cin, h, wd] = dims4(x);
    let [_, cout, ho, wo] = dims4(gy);
    let (kh, kw) = k_hw;
    let (xd, gd) = (x.data(), gy.data());
    let mut out = vec![0.0; cout * cin * kh * kw];
    for bi in 0..b {
        for co in 0..cout {
            let gbase = (bi * cout + co) * ho * wo;
            for ci in 0..cin {
                let xbase = (bi * cin + ci) * h * wd;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let mut acc = 0.0;
                        for oy in 0..ho {
                            let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let xrow = xbase + iy as usize * wd;
                            let grow = gbase + oy * wo;
                            for ox in 0..wo {
                                let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                acc += gd[grow + ox] * xd[xrow + ix as usize];
                            }
                        }
                        out[((co * cin + ci) * kh + ky) * kw + kx] += acc;
                    }
                }
            }
        }
    }
    Tensor::new(&[cout, cin, kh, kw], out).expect("conv2d weight adjoint shape")
}

pub fn avgpool2d(x: &Tensor, k: usize) -> Tensor {
    let [b, c, h, w] = dims4(x);
    let (ho, wo) = (h / k, w / k);
    let d = x.data();
    let scale = 1.0 / (k * k) as f64;
    let mut out = vec![0.0; b * c * ho * wo];
    for plane in 0..b * c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = 0.0;
                for dy in 0..k {
                    let row = plane * h * w + (oy * k + dy) * w + ox * k;
                    acc += d[row..row + k].iter().sum::<f64>();
                }
                out[plane * ho * wo + oy * wo + ox] = acc * scale;
            }
        }
    }
    Tensor::new(&[b, c, ho, wo], out).expect("avgpool shape")
}

/// Adjoint of `avgpool2d`: spreads each value uniformly over its window.
pub fn avgpool2d_adjoint(g: &Tensor, k: usize) -> Tensor {
    let [b, c, ho, wo] = dims4(g);
    let (h, w) = (ho * k, wo * k);
    let d = g.data();
    let scale = 1.0 / (k * k) as f64;
    let mut out = vec![0.0; b * c * h * w];
    for plane in 0..b * c {
        for y in 0..h {
            for x in 0..w {
                out[plane * h * w + y * w + x] = d[plane * ho * wo + (y / k) * wo + x / k] * scale;
            }
        }
    }
    Tensor::new(&[b, c, h, w], out).expect("avgpool adjoint shape")
}

/// Flat input index of the first (row-major) maximum in every pooling window.
pub fn maxpool2d_argmax(x: &Tensor, k: usize) -> Vec<usize> {
    let [b, c, h, w] = dims4(x);
    let (ho, wo) = (h / k, w / k);
    let d = x.data();
    let mut idx = Vec::with_capacity(b * c * ho * wo);
    for plane in 0..b * c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = plane * h * w + oy * k * w + ox * k;
                for dy in 0..k {
                    for dx in 0..k {
                        let i = plane * h * w + (oy * k + dy) * w + ox * k + dx;
                        if d[i] > d[best] {
                            best = i;
                        }
                    }
                }
                idx.push(best);
            }
        }
    }
    idx
}

pub fn gather(x: &Tensor, idx: &[usize], shape: &[usize]) -> Tensor {
    let d = x.data();
    Tensor::new(shape, idx.iter().map(|&i| d[i]).collect()).expect("gather shape")
}

pub fn scatter(g: &Tensor, idx: &[usize], shape: &[usize]) -> Tensor {
    let mut out = Tensor::zeros(shape);
    let od = out.data_mut();
    for (&i, &v) in idx.iter().zip(g.data()) {
        od[i] += v;
    }
    out
}

/// Row-wise softmax of a `(rows, cols)` tensor.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let (rows, cols) = (x.shape()[0], x.shape()[1]);
    let d = x.data();
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = &d[r * cols..(r + 1) * cols];
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (o, &v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
            *o = (v - m).exp();
            z += *o;
        }
        for o in &mut out[r * cols..(r + 1) * cols] {
            *o /= z;
        }
    }
    Tensor::new(&[rows, cols], out).expect("softmax shape")
}

/// Mean over rows of `-log softmax(x)[target]`.
pub fn softmax_cross_entropy(x: &Tensor, targets: &[usize]) -> f64 {
    let (rows, cols) = (x.shape()[0], x.shape()[1]);
    let d = x.data();
    let mut total = 0.0;
    for r in 0..rows {
        let row = &d[r * cols..(r + 1) * cols];
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[targets[r]];
    }
    total / rows as f64
}

pub fn complex_pack(re: &Tensor, im: &Tensor) -> Tensor {
    let mut shape = re.shape().to_vec();
    shape.push(2);
    let mut out = Vec::with_capacity(re.numel() * 2);
    for (&a, &b) in re.data().iter().zip(im.data()) {
        out.push(a);
        out.push(b);
    }
    Tensor::new(&shape, out).expect("complex_pack shape")
}

pub fn component(z: &Tensor, c: usize) -> Tensor {
    let shape = &z.shape()[..z.rank() - 1];
    Tensor::new(shape, z.data().iter().skip(c).step_by(2).copied().collect()).expect("component shape")
}

/// Unitary 2D DFT over the trailing `(n, n, 2)` axes of an interleaved tensor.
pub fn dft2_interleaved(z: &Tensor, inverse: bool) -> Tensor {
    let r = z.rank();
    let n = z.shape()[r - 2];
    let plane = n * n;
    let batches = z.numel() / (2 * plane);
    let d = z.data();
    let mut out = Vec::with_capacity(z.numel());
    let mut buf = vec![Complex64::default(); plane];
    for b in 0..batches {
        let src = &d[b * 2 * plane..(b + 1) * 2 * plane];
        for (i, c) in buf.iter_mut().enumerate() {
            *c = Complex64::new(src[2 * i], src[2 * i + 1]);
        }
        dft2_in_place(&mut buf, n, inverse);
        for c in &buf {
            out.push(c.re);
            out.push(c.im);
        }
    }
    Tensor::new(z.shape(), out).expect("dft2 shape")
}

fn dims4(t: &Tensor) -> [usize; 4] {
    let s = t.shape();
    [s[0], s[1], s[2], s[3]]
}
