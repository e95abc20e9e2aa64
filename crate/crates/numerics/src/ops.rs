//! Forward kernels. Each constructor validates shapes, computes the value
//! eagerly and records the node.

use crate::error::{invalid, shape_err, Result};
use crate::gemm::{gemm, Mat};
use crate::tape::{Bcast, BinKind, ConvGeom, Op, UnaryKind};
use crate::{Array, Real, Tape, Var};

pub(crate) fn bcast_mode(a: &[usize], b: &[usize]) -> Option<Bcast> {
    if a == b {
        return Some(Bcast::Same);
    }
    let nb: usize = b.iter().product();
    if nb == 1 {
        return Some(Bcast::Scalar);
    }
    let lead = b.iter().take_while(|&&d| d == 1).count();
    let tail = &b[lead..];
    if tail.len() <= a.len() && &a[a.len() - tail.len()..] == tail {
        return Some(Bcast::Row);
    }
    if b.len() == a.len() {
        let k = b.iter().rposition(|&d| d != 1).map_or(0, |p| p + 1);
        if b[..k] == a[..k] {
            return Some(Bcast::Col);
        }
    }
    None
}

#[inline]
pub(crate) fn bcast_index(mode: Bcast, i: usize, nb: usize, inner: usize) -> usize {
    match mode {
        Bcast::Same => i,
        Bcast::Scalar => 0,
        Bcast::Row => i % nb,
        Bcast::Col => i / inner,
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn last_axis(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

pub(crate) fn im2col<T: Real>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let (k, ohw) = (g.k, g.out_h * g.out_w);
    let mut cols = vec![T::zero(); g.in_c * k * k * ohw];
    for c in 0..g.in_c {
        let plane = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * ohw..(row + 1) * ohw];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            dst[oy * g.out_w + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

pub(crate) fn col2im<T: Real>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let (k, ohw) = (g.k, g.out_h * g.out_w);
    let mut x = vec![T::zero(); g.in_c * g.in_h * g.in_w];
    for c in 0..g.in_c {
        let plane = &mut x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * ohw..(row + 1) * ohw];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            dst[ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

/// Bilinear corner indices and weights for one point, in grid units.
pub(crate) struct Corners<T> {
    pub idx: [Option<usize>; 4],
    pub w: [T; 4],
    pub fu: T,
    pub fv: T,
}

pub(crate) fn corners<T: Real>(x: T, y: T, stride: f64, h: usize, w: usize) -> Corners<T> {
    let s = T::lit(stride);
    let half = T::lit(0.5);
    let u = x / s - half;
    let v = y / s - half;
    if !u.is_finite() || !v.is_finite() {
        return Corners {
            idx: [None; 4],
            w: [T::zero(); 4],
            fu: T::zero(),
            fv: T::zero(),
        };
    }
    let u0 = u.floor();
    let v0 = v.floor();
    let fu = u - u0;
    let fv = v - v0;
    let (iu, iv) = (u0.as_f64() as i64, v0.as_f64() as i64);
    let cell = |r: i64, c: i64| {
        (r >= 0 && c >= 0 && (r as usize) < h && (c as usize) < w).then(|| r as usize * w + c as usize)
    };
    let one = T::one();
    Corners {
        idx: [cell(iv, iu), cell(iv, iu + 1), cell(iv + 1, iu), cell(iv + 1, iu + 1)],
        w: [(one - fv) * (one - fu), (one - fv) * fu, fv * (one - fu), fv * fu],
        fu,
        fv,
    }
}

impl<T: Real> Tape<T> {
    fn binary(&mut self, kind: BinKind, a: Var, b: Var, name: &'static str) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let Some(mode) = bcast_mode(av.shape(), bv.shape()) else {
            return shape_err(name, av.shape(), bv.shape());
        };
        let nb = bv.len();
        let inner = av.len() / nb;
        let (ad, bd) = (av.data(), bv.data());
        let f = |x: T, y: T| match kind {
            BinKind::Add => x + y,
            BinKind::Sub => x - y,
            BinKind::Mul => x * y,
            BinKind::Div => x / y,
        };
        let out: Vec<T> = match mode {
            Bcast::Same => ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
            _ => ad
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, bd[bcast_index(mode, i, nb, inner)]))
                .collect(),
        };
        let value = Array::from_parts(av.shape().to_vec(), out);
        Ok(self.push(
            Op::Binary {
                kind,
                a: a.0,
                b: b.0,
                bcast: mode,
            },
            value,
            &[a.0, b.0],
        ))
    }

    /// Elementwise sum. `b` may be a scalar, a trailing-dims row, or a
    /// leading-dims column (trailing extents 1) of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Add, a, b, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Sub, a, b, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Mul, a, b, "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Div, a, b, "div")
    }

    /// `a * mul + add` with constant coefficients.
    pub fn affine(&mut self, a: Var, mul: f64, add: f64) -> Var {
        let (m, c) = (T::lit(mul), T::lit(add));
        let value = self.value(a).map(|x| x * m + c);
        self.push(Op::Affine { a: a.0, mul }, value, &[a.0])
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.affine(a, k, 0.0)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.affine(a, -1.0, 0.0)
    }

    fn unary(&mut self, kind: UnaryKind, a: Var) -> Var {
        let value = self.value(a).map(|x| match kind {
            UnaryKind::Exp => x.exp(),
            UnaryKind::Log => x.ln(),
            UnaryKind::Abs => x.abs(),
            UnaryKind::Tan => x.tan(),
            UnaryKind::Sigmoid => sigmoid(x),
            UnaryKind::Relu => x.max(T::zero()),
            UnaryKind::Sqrt => x.sqrt(),
            UnaryKind::Pow(p) => x.powf(T::lit(p)),
        });
        self.push(Op::Unary { kind, a: a.0 }, value, &[a.0])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Log, a)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Abs, a)
    }

    /// Tangent in radians. Callers keep inputs away from the poles.
    pub fn tan(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Tan, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Sigmoid, a)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Relu, a)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Sqrt, a)
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        self.unary(UnaryKind::Pow(p), a)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.powf(a, 2.0)
    }

    /// Clamp into `[lo, hi]`; the gradient is zero outside the open interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return invalid("clamp", format!("lower bound {lo} above upper bound {hi}"));
        }
        let (l, h) = (T::lit(lo), T::lit(hi));
        let value = self.value(a).map(|x| x.max(l).min(h));
        Ok(self.push(Op::Clamp { a: a.0, lo, hi }, value, &[a.0]))
    }

    /// `[m, k] @ [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return shape_err("matmul", sa, sb);
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(
            Mat::new(av.data(), m, k),
            Mat::new(bv.data(), k, n),
            &mut out,
            T::zero(),
        );
        self.add_macs(m * k * n);
        let value = Array::from_parts(vec![m, n], out);
        Ok(self.push(Op::MatMul { a: a.0, b: b.0 }, value, &[a.0, b.0]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let s = av.shape();
        if s.len() != 2 {
            return shape_err("transpose", s, &[]);
        }
        let (r, c) = (s[0], s[1]);
        let d = av.data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        let value = Array::from_parts(vec![c, r], out);
        Ok(self.push(Op::Transpose { a: a.0 }, value, &[a.0]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape)?;
        Ok(self.push(Op::Reshape { a: a.0 }, value, &[a.0]))
    }

    /// Softmax over the last axis.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let n = last_axis(av.shape());
        let mut out = av.data().to_vec();
        for row in out.chunks_mut(n) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v = *v / s;
            }
        }
        let value = Array::from_parts(av.shape().to_vec(), out);
        self.push(Op::SoftmaxRows { a: a.0 }, value, &[a.0])
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let n = last_axis(av.shape());
        let mut out = av.data().to_vec();
        for row in out.chunks_mut(n) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let value = Array::from_parts(av.shape().to_vec(), out);
        self.push(Op::LogSoftmaxRows { a: a.0 }, value, &[a.0])
    }

    /// Zero-mean, unit-variance normalization over the last axis (no affine).
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let av = self.value(a);
        let n = last_axis(av.shape());
        let mut out = av.data().to_vec();
        let nf = T::lit(n as f64);
        let mut inv_std = Vec::with_capacity(out.len() / n);
        for row in out.chunks_mut(n) {
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let is = T::one() / (var + T::lit(eps)).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std.push(is);
        }
        let value = Array::from_parts(av.shape().to_vec(), out);
        self.push(Op::LayerNormRows { a: a.0, inv_std }, value, &[a.0])
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Array::scalar(self.value(a).sum());
        self.push(Op::Sum { a: a.0 }, value, &[a.0])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sum over one axis; the axis is removed from the shape.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let av = self.value(a);
        let s = av.shape();
        if axis >= s.len() {
            return invalid("sum_axis", format!("axis {axis} out of range for {s:?}"));
        }
        let (outer, len, inner) = axis_split(s, axis);
        let d = av.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &d[(o * len + l) * inner..(o * len + l + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                for (x, &y) in dst.iter_mut().zip(src) {
                    *x += y;
                }
            }
        }
        let mut shape: Vec<usize> = s.to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let value = Array::from_parts(shape, out);
        Ok(self.push(
            Op::SumAxis {
                a: a.0,
                outer,
                len,
                inner,
            },
            value,
            &[a.0],
        ))
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return invalid("concat", "no inputs");
        };
        let s0 = self.value(first).shape().to_vec();
        if axis >= s0.len() {
            return invalid("concat", format!("axis {axis} out of range for {s0:?}"));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != s0.len() || s.iter().zip(&s0).enumerate().any(|(i, (x, y))| i != axis && x != y) {
                return shape_err("concat", &s0, s);
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&s0, axis);
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).shape()[axis] * inner).collect();
        let row: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(outer * row);
        for o in 0..outer {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = s0;
        shape[axis] = total;
        let value = Array::from_parts(shape, out);
        let inputs: Vec<usize> = parts.iter().map(|p| p.0).collect();
        Ok(self.push(
            Op::Concat {
                inputs: inputs.clone(),
                outer,
                widths,
            },
            value,
            &inputs,
        ))
    }

    /// `a[.., start..end, ..]` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let av = self.value(a);
        let s = av.shape();
        if axis >= s.len() || start >= end || end > s[axis] {
            return invalid("slice", format!("range {start}..{end} on axis {axis} of {s:?}"));
        }
        let (outer, len, inner) = axis_split(s, axis);
        let src_width = len * inner;
        let w = (end - start) * inner;
        let d = av.data();
        let mut out = Vec::with_capacity(outer * w);
        for o in 0..outer {
            let base = o * src_width + start * inner;
            out.extend_from_slice(&d[base..base + w]);
        }
        let mut shape = s.to_vec();
        shape[axis] = end - start;
        let value = Array::from_parts(shape, out);
        Ok(self.push(
            Op::Slice {
                a: a.0,
                outer,
                src_width,
                start: start * inner,
            },
            value,
            &[a.0],
        ))
    }

    /// Select leading-axis entries (rows) by index; repeats allowed.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let av = self.value(a);
        let (rows, cols) = (av.rows(), av.cols());
        if idx.is_empty() {
            return invalid("gather_rows", "empty index list");
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return invalid("gather_rows", format!("row {bad} out of {rows}"));
        }
        let d = av.data();
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            out.extend_from_slice(&d[i * cols..(i + 1) * cols]);
        }
        let mut shape = av.shape().to_vec();
        if shape.is_empty() {
            shape.push(1);
        }
        shape[0] = idx.len();
        let value = Array::from_parts(shape, out);
        Ok(self.push(
            Op::GatherRows {
                a: a.0,
                idx: idx.to_vec(),
            },
            value,
            &[a.0],
        ))
    }

    /// Select elements of the flattened array; result has shape `[idx.len()]`.
    pub fn gather(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let av = self.value(a);
        if idx.is_empty() {
            return invalid("gather", "empty index list");
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= av.len()) {
            return invalid("gather", format!("index {bad} out of {}", av.len()));
        }
        let out: Vec<T> = idx.iter().map(|&i| av.data()[i]).collect();
        let value = Array::from_parts(vec![idx.len()], out);
        Ok(self.push(
            Op::GatherFlat {
                a: a.0,
                idx: idx.to_vec(),
            },
            value,
            &[a.0],
        ))
    }

    /// Zero-padded 2-D convolution of `x: [C, H, W]` with `w: [O, C, k, k]`
    /// and optional bias `[O]`. Kernels are 1×1 or 3×3, stride 1 or 2.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws) = (self.value(x).shape(), self.value(w).shape());
        if xs.len() != 3 || ws.len() != 4 || ws[1] != xs[0] || ws[2] != ws[3] {
            return shape_err("conv2d", xs, ws);
        }
        let k = ws[2];
        if !(k == 1 || k == 3) || !(stride == 1 || stride == 2) {
            return invalid("conv2d", format!("unsupported kernel {k} / stride {stride}"));
        }
        if xs[1] + 2 * pad < k || xs[2] + 2 * pad < k {
            return shape_err("conv2d", xs, ws);
        }
        let geom = ConvGeom {
            in_c: xs[0],
            in_h: xs[1],
            in_w: xs[2],
            out_c: ws[0],
            k,
            stride,
            pad,
            out_h: (xs[1] + 2 * pad - k) / stride + 1,
            out_w: (xs[2] + 2 * pad - k) / stride + 1,
        };
        if let Some(b) = b {
            let bs = self.value(b).shape();
            if bs != [geom.out_c] {
                return shape_err("conv2d bias", ws, bs);
            }
        }
        let cols = im2col(self.value(x).data(), &geom);
        let ohw = geom.out_h * geom.out_w;
        let ckk = geom.in_c * k * k;
        let mut out = vec![T::zero(); geom.out_c * ohw];
        if let Some(b) = b {
            let bd = self.value(b).data();
            for (o, chunk) in out.chunks_mut(ohw).enumerate() {
                chunk.fill(bd[o]);
            }
        }
        gemm(
            Mat::new(self.value(w).data(), geom.out_c, ckk),
            Mat::new(&cols, ckk, ohw),
            &mut out,
            T::one(),
        );
        self.add_macs(geom.out_c * ckk * ohw);
        let value = Array::from_parts(vec![geom.out_c, geom.out_h, geom.out_w], out);
        let mut inputs = vec![x.0, w.0];
        inputs.extend(b.map(|b| b.0));
        Ok(self.push(
            Op::Conv2d {
                x: x.0,
                w: w.0,
                b: b.map(|b| b.0),
                geom,
                cols,
            },
            value,
            &inputs,
        ))
    }

    /// Bilinear lookup of `feat: [C, h, w]` at image-pixel points `(xs, ys)`,
    /// both `[P]`. Cell `(r, c)` is centered at `((c+0.5)·stride, (r+0.5)·stride)`;
    /// cells outside the grid read as zero. Result is `[P, C]`.
    pub fn bilinear_sample(&mut self, feat: Var, xs: Var, ys: Var, stride: f64) -> Result<Var> {
        let fs = self.value(feat).shape().to_vec();
        let (xv, yv) = (self.value(xs), self.value(ys));
        if fs.len() != 3 {
            return shape_err("bilinear_sample", &fs, xv.shape());
        }
        if xv.shape() != yv.shape() || xv.ndim() != 1 {
            return shape_err("bilinear_sample", xv.shape(), yv.shape());
        }
        if stride <= 0.0 {
            return invalid("bilinear_sample", format!("stride {stride}"));
        }
        let (c, h, w) = (fs[0], fs[1], fs[2]);
        let p = xv.len();
        let f = self.value(feat).data();
        let hw = h * w;
        let mut out = vec![T::zero(); p * c];
        for (i, (&x, &y)) in xv.data().iter().zip(yv.data()).enumerate() {
            let cr = corners(x, y, stride, h, w);
            let row = &mut out[i * c..(i + 1) * c];
            for (k, idx) in cr.idx.iter().enumerate() {
                if let Some(cell) = *idx {
                    let wk = cr.w[k];
                    for (ch, o) in row.iter_mut().enumerate() {
                        *o += wk * f[ch * hw + cell];
                    }
                }
            }
        }
        let value = Array::from_parts(vec![p, c], out);
        Ok(self.push(
            Op::Bilinear {
                feat: feat.0,
                xs: xs.0,
                ys: ys.0,
                stride,
            },
            value,
            &[feat.0, xs.0, ys.0],
        ))
    }
}

#[inline]
pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arr(shape: &[usize], v: &[f64]) -> Array<f64> {
        Array::from_f64(shape, v).unwrap()
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(arr(&[3], &[0.0, 0.0, 0.0]));
        let y = t.softmax_rows(x);
        for &v in t.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn identity_matmul_returns_operand() {
        let mut t = Tape::<f64>::new();
        let i = t.constant(Array::identity(3));
        let a = t.constant(arr(&[3, 2], &[1.0, -2.0, 3.5, 0.25, 7.0, 9.0]));
        let y = t.matmul(i, a).unwrap();
        assert_eq!(t.value(y), t.value(a));
    }

    #[test]
    fn exp_matches_analytic_values() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(arr(&[2], &[0.0, 1.0]));
        let y = t.exp(x);
        assert_eq!(t.value(y).data()[0], 1.0);
        assert!((t.value(y).data()[1] - std::f64::consts::E).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut t = Tape::<f64>::new();
        let a = t.constant(Array::zeros(&[2, 3]));
        let b = t.constant(Array::zeros(&[2, 2]));
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(
            err.contains("matmul") && err.contains("[2, 3]") && err.contains("[2, 2]"),
            "{err}"
        );
        let c = t.constant(Array::zeros(&[4]));
        let err = t.add(a, c).unwrap_err().to_string();
        assert!(err.starts_with("add"), "{err}");
    }

    #[test]
    fn broadcast_modes() {
        assert_eq!(bcast_mode(&[2, 3], &[3]), Some(Bcast::Row));
        assert_eq!(bcast_mode(&[2, 3], &[1, 3]), Some(Bcast::Row));
        assert_eq!(bcast_mode(&[2, 3], &[2, 1]), Some(Bcast::Col));
        assert_eq!(bcast_mode(&[2, 3], &[1]), Some(Bcast::Scalar));
        assert_eq!(bcast_mode(&[2, 3], &[2]), None);
        assert_eq!(bcast_mode(&[4, 2, 3], &[4, 1, 1]), Some(Bcast::Col));
    }

    #[test]
    fn conv_matches_direct_loop() {
        let mut t = Tape::<f64>::new();
        let xv: Vec<f64> = (0..2 * 5 * 4).map(|i| (i as f64 * 0.37).sin()).collect();
        let wv: Vec<f64> = (0..3 * 2 * 9).map(|i| (i as f64 * 0.91).cos()).collect();
        let x = t.constant(arr(&[2, 5, 4], &xv));
        let w = t.constant(arr(&[3, 2, 3, 3], &wv));
        let b = t.constant(arr(&[3], &[0.5, -1.0, 2.0]));
        for stride in [1, 2] {
            let y = t.conv2d(x, w, Some(b), stride, 1).unwrap();
            let ys = t.shape(y).to_vec();
            for o in 0..3 {
                for oy in 0..ys[1] {
                    for ox in 0..ys[2] {
                        let mut acc = [0.5, -1.0, 2.0][o];
                        for c in 0..2 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = (oy * stride + ky) as isize - 1;
                                    let ix = (ox * stride + kx) as isize - 1;
                                    if (0..5).contains(&iy) && (0..4).contains(&ix) {
                                        acc += wv[((o * 2 + c) * 3 + ky) * 3 + kx]
                                            * xv[(c * 5 + iy as usize) * 4 + ix as usize];
                                    }
                                }
                            }
                        }
                        assert!((t.value(y).at(&[o, oy, ox]) - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn bilinear_cell_centers_midpoints_and_padding() {
        let mut t = Tape::<f64>::new();
        // 2 channels, 2x2 grid, stride 8 -> centers at 4 and 12.
        let f = t.constant(arr(&[2, 2, 2], &[1.0, 2.0, 3.0, 4.0, 10.0, 20.0, 30.0, 40.0]));
        let xs = t.constant(arr(&[3], &[12.0, 8.0, -500.0]));
        let ys = t.constant(arr(&[3], &[4.0, 8.0, 9.0]));
        let y = t.bilinear_sample(f, xs, ys, 8.0).unwrap();
        let v = t.value(y).data();
        assert_eq!(&v[0..2], &[2.0, 20.0]);
        assert_eq!(&v[2..4], &[2.5, 25.0]);
        assert_eq!(&v[4..6], &[0.0, 0.0]);
    }
}
