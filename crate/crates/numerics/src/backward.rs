use crate::gemm::{gemm, Mat};
use crate::ops::{bcast_index, col2im, corners};
use crate::tape::{Bcast, BinKind, Op, UnaryKind};
use crate::{Array, Real, Tape};

/// Sum `g` (shaped like the lhs) back down to the rhs shape.
fn reduce_bcast<T: Real>(g: &[T], mode: Bcast, nb: usize) -> Vec<T> {
    match mode {
        Bcast::Same => g.to_vec(),
        Bcast::Scalar => vec![g.iter().copied().sum()],
        Bcast::Row => {
            let mut out = vec![T::zero(); nb];
            for chunk in g.chunks(nb) {
                for (o, &v) in out.iter_mut().zip(chunk) {
                    *o += v;
                }
            }
            out
        }
        Bcast::Col => {
            let inner = g.len() / nb;
            g.chunks(inner).map(|c| c.iter().copied().sum()).collect()
        }
    }
}

impl<T: Real> Tape<T> {
    fn needs(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    fn val(&self, i: usize) -> &Array<T> {
        &self.nodes[i].value
    }

    fn like(&self, i: usize, data: Vec<T>) -> Array<T> {
        Array::from_parts(self.val(i).shape().to_vec(), data)
    }

    pub(crate) fn backward_node(&self, idx: usize, g: &Array<T>, grads: &mut [Option<Array<T>>]) {
        let node = &self.nodes[idx];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            &Op::Binary { kind, a, b, bcast } => {
                let (av, bv) = (self.val(a).data(), self.val(b).data());
                let nb = bv.len();
                let inner = av.len() / nb;
                let bi = |i: usize| bv[bcast_index(bcast, i, nb, inner)];
                if self.needs(a) {
                    let da: Vec<T> = match kind {
                        BinKind::Add | BinKind::Sub => gd.to_vec(),
                        BinKind::Mul => gd.iter().enumerate().map(|(i, &x)| x * bi(i)).collect(),
                        BinKind::Div => gd.iter().enumerate().map(|(i, &x)| x / bi(i)).collect(),
                    };
                    self.accumulate(grads, a, self.like(a, da));
                }
                if self.needs(b) {
                    let full: Vec<T> = match kind {
                        BinKind::Add => gd.to_vec(),
                        BinKind::Sub => gd.iter().map(|&x| -x).collect(),
                        BinKind::Mul => gd.iter().zip(av).map(|(&x, &y)| x * y).collect(),
                        BinKind::Div => gd
                            .iter()
                            .zip(av)
                            .enumerate()
                            .map(|(i, (&x, &y))| {
                                let d = bi(i);
                                -x * y / (d * d)
                            })
                            .collect(),
                    };
                    let db = reduce_bcast(&full, bcast, nb);
                    self.accumulate(grads, b, self.like(b, db));
                }
            }
            &Op::Affine { a, mul } => {
                let m = T::lit(mul);
                self.accumulate(grads, a, g.map(|x| x * m));
            }
            &Op::Unary { kind, a } => {
                let (x, y) = (self.val(a).data(), node.value.data());
                let da: Vec<T> = gd
                    .iter()
                    .zip(x.iter().zip(y))
                    .map(|(&g, (&x, &y))| match kind {
                        UnaryKind::Exp => g * y,
                        UnaryKind::Log => g / x,
                        UnaryKind::Abs => {
                            if x > T::zero() {
                                g
                            } else if x < T::zero() {
                                -g
                            } else {
                                T::zero()
                            }
                        }
                        UnaryKind::Tan => g * (T::one() + y * y),
                        UnaryKind::Sigmoid => g * y * (T::one() - y),
                        UnaryKind::Relu => {
                            if x > T::zero() {
                                g
                            } else {
                                T::zero()
                            }
                        }
                        UnaryKind::Sqrt => g * T::lit(0.5) / y,
                        UnaryKind::Pow(p) => {
                            let p = T::lit(p);
                            g * p * x.powf(p - T::one())
                        }
                    })
                    .collect();
                self.accumulate(grads, a, self.like(a, da));
            }
            &Op::Clamp { a, lo, hi } => {
                let (l, h) = (T::lit(lo), T::lit(hi));
                let x = self.val(a).data();
                let da = gd
                    .iter()
                    .zip(x)
                    .map(|(&g, &x)| if x > l && x < h { g } else { T::zero() })
                    .collect();
                self.accumulate(grads, a, self.like(a, da));
            }
            &Op::MatMul { a, b } => {
                let (av, bv) = (self.val(a), self.val(b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.needs(a) {
                    let mut da = vec![T::zero(); m * k];
                    gemm(Mat::new(gd, m, n), Mat::new(bv.data(), k, n).t(), &mut da, T::zero());
                    self.accumulate(grads, a, self.like(a, da));
                }
                if self.needs(b) {
                    let mut db = vec![T::zero(); k * n];
                    gemm(Mat::new(av.data(), m, k).t(), Mat::new(gd, m, n), &mut db, T::zero());
                    self.accumulate(grads, b, self.like(b, db));
                }
            }
            &Op::Transpose { a } => {
                let s = g.shape();
                let (r, c) = (s[0], s[1]);
                let mut da = vec![T::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        da[j * r + i] = gd[i * c + j];
                    }
                }
                self.accumulate(grads, a, self.like(a, da));
            }
            &Op::Reshape { a } => {
                self.accumulate(grads, a, self.like(a, gd.to_vec()));
            }
            &Op::SoftmaxRows { a } => {
                let y = node.value.data();
                let n = node.value.shape().last().copied().unwrap_or(1);
                let mut da = vec![T::zero(); y.len()];
                for ((dr, yr), gr) in da.chunks_mut(n).zip(y.chunks(n)).zip(gd.chunks(n)) {
                    let dot: T = yr.iter().zip(gr).map(|(&y, &g)| y * g).sum();
                    for ((d, &y), &g) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = y * (g - dot);
                    }
                }
                self.accumulate(grads, a, self.like(a, da));
            }
            &Op::LogSoftmaxRows { a } => {
                let y = node.value.data();
                let n = node.value.shape().last().copied().unwrap_or(1);
                let mut da = vec![T::zero(); y.len()];
                for ((dr, yr), gr) in da.chunks_mut(n).zip(y.chunks(n)).zip(gd.chunks(n)) {
                    let gs: T = gr.iter().copied().sum();
                    for ((d, &y), &g) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = g - y.exp() * gs;
                    }
                }
                self.accumulate(grads, a, self.like(a, da));
            }
            Op::LayerNormRows { a, inv_std } => {
                let y = node.value.data();
                let n = node.value.shape().last().copied().unwrap_or(1);
                let nf = T::lit(n as f64);
                let mut da = vec![T::zero(); y.len()];
                for (((dr, yr), gr), &is) in da.chunks_mut(n).zip(y.chunks(n)).zip(gd.chunks(n)).zip(inv_std) {
                    let gm = gr.iter().copied().sum::<T>() / nf;
                    let gy = yr.iter().zip(gr).map(|(&y, &g)| y * g).sum::<T>() / nf;
                    for ((d, &y), &g) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = is * (g - gm - y * gy);
                    }
                }
                self.accumulate(grads, *a, self.like(*a, da));
            }
            &Op::Sum { a } => {
                let len = self.val(a).len();
                self.accumulate(grads, a, self.like(a, vec![gd[0]; len]));
            }
            &Op::SumAxis { a, outer, len, inner } => {
                let mut da = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    for _ in 0..len {
                        da.extend_from_slice(&gd[o * inner..(o + 1) * inner]);
                    }
                }
                self.accumulate(grads, a, self.like(a, da));
            }
            Op::Concat { inputs, outer, widths } => {
                let row: usize = widths.iter().sum();
                let mut offset = 0;
                for (&inp, &w) in inputs.iter().zip(widths) {
                    if self.needs(inp) {
                        let mut da = Vec::with_capacity(outer * w);
                        for o in 0..*outer {
                            da.extend_from_slice(&gd[o * row + offset..o * row + offset + w]);
                        }
                        self.accumulate(grads, inp, self.like(inp, da));
                    }
                    offset += w;
                }
            }
            &Op::Slice {
                a,
                outer,
                src_width,
                start,
            } => {
                let w = gd.len() / outer;
                let mut da = vec![T::zero(); outer * src_width];
                for o in 0..outer {
                    da[o * src_width + start..o * src_width + start + w].copy_from_slice(&gd[o * w..(o + 1) * w]);
                }
                self.accumulate(grads, a, self.like(a, da));
            }
            Op::GatherRows { a, idx } => {
                let av = self.val(*a);
                let cols = av.cols();
                let mut da = vec![T::zero(); av.len()];
                for (k, &i) in idx.iter().enumerate() {
                    for c in 0..cols {
                        da[i * cols + c] += gd[k * cols + c];
                    }
                }
                self.accumulate(grads, *a, self.like(*a, da));
            }
            Op::GatherFlat { a, idx } => {
                let mut da = vec![T::zero(); self.val(*a).len()];
                for (k, &i) in idx.iter().enumerate() {
                    da[i] += gd[k];
                }
                self.accumulate(grads, *a, self.like(*a, da));
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let ohw = geom.out_h * geom.out_w;
                let ckk = geom.in_c * geom.k * geom.k;
                if let Some(b) = *b {
                    if self.needs(b) {
                        let db = gd.chunks(ohw).map(|c| c.iter().copied().sum()).collect();
                        self.accumulate(grads, b, self.like(b, db));
                    }
                }
                if self.needs(*w) {
                    let mut dw = vec![T::zero(); geom.out_c * ckk];
                    gemm(
                        Mat::new(gd, geom.out_c, ohw),
                        Mat::new(cols, ckk, ohw).t(),
                        &mut dw,
                        T::zero(),
                    );
                    self.accumulate(grads, *w, self.like(*w, dw));
                }
                if self.needs(*x) {
                    let mut dcols = vec![T::zero(); ckk * ohw];
                    gemm(
                        Mat::new(self.val(*w).data(), geom.out_c, ckk).t(),
                        Mat::new(gd, geom.out_c, ohw),
                        &mut dcols,
                        T::zero(),
                    );
                    let dx = col2im(&dcols, geom);
                    self.accumulate(grads, *x, self.like(*x, dx));
                }
            }
            &Op::Bilinear { feat, xs, ys, stride } => {
                let fv = self.val(feat);
                let (c, h, w) = (fv.shape()[0], fv.shape()[1], fv.shape()[2]);
                let hw = h * w;
                let f = fv.data();
                let (xd, yd) = (self.val(xs).data(), self.val(ys).data());
                let p = xd.len();
                let want_f = self.needs(feat);
                let want_xy = self.needs(xs) || self.needs(ys);
                let mut df = if want_f { vec![T::zero(); f.len()] } else { Vec::new() };
                let mut dx = vec![T::zero(); p];
                let mut dy = vec![T::zero(); p];
                let inv_s = T::lit(1.0 / stride);
                let one = T::one();
                for i in 0..p {
                    let cr = corners(xd[i], yd[i], stride, h, w);
                    let gr = &gd[i * c..(i + 1) * c];
                    if want_f {
                        for (k, idx) in cr.idx.iter().enumerate() {
                            if let Some(cell) = *idx {
                                for (ch, &gv) in gr.iter().enumerate() {
                                    df[ch * hw + cell] += gv * cr.w[k];
                                }
                            }
                        }
                    }
                    if want_xy {
                        let read = |k: usize, ch: usize| cr.idx[k].map_or(T::zero(), |cell| f[ch * hw + cell]);
                        let (mut su, mut sv) = (T::zero(), T::zero());
                        for (ch, &gv) in gr.iter().enumerate() {
                            let (f00, f01, f10, f11) = (read(0, ch), read(1, ch), read(2, ch), read(3, ch));
                            su += gv * ((one - cr.fv) * (f01 - f00) + cr.fv * (f11 - f10));
                            sv += gv * ((one - cr.fu) * (f10 - f00) + cr.fu * (f11 - f01));
                        }
                        dx[i] = su * inv_s;
                        dy[i] = sv * inv_s;
                    }
                }
                if want_f {
                    self.accumulate(grads, feat, self.like(feat, df));
                }
                if self.needs(xs) {
                    self.accumulate(grads, xs, self.like(xs, dx));
                }
                if self.needs(ys) {
                    self.accumulate(grads, ys, self.like(ys, dy));
                }
            }
        }
    }
}
