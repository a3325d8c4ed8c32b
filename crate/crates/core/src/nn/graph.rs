//! Define-by-run autodiff over NCHW tensors.
//!
//! A [`Graph`] records every operation as it is evaluated; [`Graph::backward`]
//! walks the tape in reverse and returns gradients for the parameters that
//! were pulled in through [`Graph::param`].

use super::params::{ParamId, ParamStore};
use super::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Constant,
    Param(ParamId),
    Conv2d { x: Var, w: Var, b: Var, k: usize },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, stats: Vec<(T, T)> },
    Silu(Var),
    Add(Var, Var),
    AddChannel { x: Var, e: Var },
    Affine { x: Var, scale: Vec<T> },
    Concat(Var, Var),
    AvgPool2(Var),
    Upsample2(Var),
    Attention { qkv: Var, probs: Vec<T> },
    Linear { x: Var, w: Var, b: Var },
    SquaredError { pred: Var, target: Tensor<T>, weights: Vec<T> },
    AbsError { pred: Var, target: Tensor<T>, weights: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T = f32> {
    nodes: Vec<Node<T>>,
    track_params: bool,
}

/// Parameter gradients indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Gradients<T = f32> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn zeros_like(store: &ParamStore<T>) -> Self {
        Self { grads: store.ids().map(|id| Some(Tensor::zeros(store.get(id).shape()))).collect() }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn accumulate(&mut self, other: &Gradients<T>) {
        for (mine, theirs) in self.grads.iter_mut().zip(&other.grads) {
            match (mine.as_mut(), theirs) {
                (Some(a), Some(b)) => a.add_assign(b),
                (None, Some(b)) => *mine = Some(b.clone()),
                _ => {}
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for g in self.grads.iter_mut().flatten() {
            g.scale(s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.iter().flatten().map(Tensor::sum_sq).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(Tensor::is_finite)
    }

    /// Parameter with the largest absolute gradient entry.
    pub fn argmax_abs(&self) -> Option<(ParamId, T)> {
        let mut best: Option<(ParamId, T)> = None;
        for (i, g) in self.grads.iter().enumerate() {
            if let Some(g) = g {
                let m = g.data().iter().fold(T::zero(), |m, v| if v.is_nan() { T::infinity() } else { m.max(v.abs()) });
                if best.is_none_or(|(_, b)| m > b) {
                    best = Some((ParamId(i), m));
                }
            }
        }
        best
    }
}

/// Row-major `c = beta*c + op(a) * op(b)` with `op(a)` of shape [m, k] and `op(b)` of shape [k, n].
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    c: &mut [T],
    beta: T,
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths cover the strided extents checked above.
    unsafe {
        T::gemm_raw(m, k, n, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1);
    }
}

fn im2col3<T: Real>(x: &[T], c: usize, h: usize, w: usize, col: &mut [T]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut col[(ci * 9 + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let dst = &mut row[y * w..(y + 1) * w];
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => {
                            dst[0] = T::zero();
                            dst[1..].copy_from_slice(&src[..w - 1]);
                        }
                        1 => dst.copy_from_slice(src),
                        _ => {
                            dst[..w - 1].copy_from_slice(&src[1..]);
                            dst[w - 1] = T::zero();
                        }
                    }
                }
            }
        }
    }
}

fn col2im3<T: Real>(col: &[T], c: usize, h: usize, w: usize, dx: &mut [T]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &col[(ci * 9 + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w..(y + 1) * w];
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => {
                            for (d, s) in dst[..w - 1].iter_mut().zip(&src[1..]) {
                                *d += *s;
                            }
                        }
                        1 => {
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += *s;
                            }
                        }
                        _ => {
                            for (d, s) in dst[1..].iter_mut().zip(&src[..w - 1]) {
                                *d += *s;
                            }
                        }
                    }
                }
            }
        }
    }
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    /// Graph that records gradients for parameters.
    pub fn new() -> Self {
        Self { nodes: Vec::new(), track_params: true }
    }

    /// Graph whose parameters are treated as constants.
    pub fn inference() -> Self {
        Self { nodes: Vec::new(), track_params: false }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Constant, false)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let track = self.track_params;
        self.push(store.get(id).clone(), Op::Param(id), track)
    }

    /// 2D convolution, stride 1, zero padding `k / 2`, `k` in {1, 3}.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (bs, ci, h, wd) = self.value(x).dims4();
        let wshape = self.value(w).shape().to_vec();
        let (co, k) = (wshape[0], wshape[2]);
        assert!(k == 1 || k == 3, "unsupported kernel size {k}");
        assert_eq!(wshape[1], ci, "conv input channels");
        let hw = h * wd;
        let ckk = ci * k * k;
        let mut out = Tensor::zeros(&[bs, co, h, wd]);
        {
            let xv = &self.nodes[x.0].value;
            let wv = self.nodes[w.0].value.data();
            let bv = self.nodes[b.0].value.data();
            let mut col = if k == 3 { vec![T::zero(); ckk * hw] } else { Vec::new() };
            for bi in 0..bs {
                let xb = xv.item(bi);
                let ob = out.item_mut(bi);
                for (c, &bias) in bv.iter().enumerate() {
                    ob[c * hw..(c + 1) * hw].fill(bias);
                }
                let src: &[T] = if k == 3 {
                    im2col3(xb, ci, h, wd, &mut col);
                    &col
                } else {
                    xb
                };
                gemm(co, ckk, hw, wv, false, src, false, ob, T::one());
            }
        }
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(out, Op::Conv2d { x, w, b, k }, ng)
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        let (bs, c, h, w) = self.value(x).dims4();
        assert_eq!(c % groups, 0, "channels {c} not divisible by {groups} groups");
        let cg = c / groups;
        let hw = h * w;
        let n = (cg * hw) as f64;
        let mut out = Tensor::zeros(&[bs, c, h, w]);
        let mut stats = Vec::with_capacity(bs * groups);
        {
            let xv = &self.nodes[x.0].value;
            let gv = self.nodes[gamma.0].value.data();
            let bv = self.nodes[beta.0].value.data();
            for bi in 0..bs {
                let xb = xv.item(bi);
                let ob = out.item_mut(bi);
                for g in 0..groups {
                    let seg = &xb[g * cg * hw..(g + 1) * cg * hw];
                    let mean = seg.iter().map(|v| v.to_f64().unwrap()).sum::<f64>() / n;
                    let var = seg
                        .iter()
                        .map(|v| {
                            let d = v.to_f64().unwrap() - mean;
                            d * d
                        })
                        .sum::<f64>()
                        / n;
                    let rstd = 1.0 / (var + 1e-5).sqrt();
                    let (mean, rstd) = (T::lit(mean), T::lit(rstd));
                    stats.push((mean, rstd));
                    for cc in 0..cg {
                        let ch = g * cg + cc;
                        let (ga, be) = (gv[ch], bv[ch]);
                        let s = &xb[ch * hw..(ch + 1) * hw];
                        let d = &mut ob[ch * hw..(ch + 1) * hw];
                        for (o, &v) in d.iter_mut().zip(s) {
                            *o = (v - mean) * rstd * ga + be;
                        }
                    }
                }
            }
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(out, Op::GroupNorm { x, gamma, beta, groups, stats }, ng)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            *v *= sigmoid(*v);
        }
        let ng = self.needs(x);
        self.push(out, Op::Silu(x), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        assert_eq!(out.shape(), self.value(b).shape(), "add shapes");
        out.add_assign(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::Add(a, b), ng)
    }

    /// Adds a per-(batch, channel) vector `e` of shape [B, C] to `x` of shape [B, C, H, W].
    pub fn add_channel(&mut self, x: Var, e: Var) -> Var {
        let (bs, c, h, w) = self.value(x).dims4();
        assert_eq!(self.value(e).shape(), &[bs, c], "channel bias shape");
        let hw = h * w;
        let mut out = self.value(x).clone();
        let ev = self.nodes[e.0].value.data().to_vec();
        for bi in 0..bs {
            let ob = out.item_mut(bi);
            for ch in 0..c {
                let add = ev[bi * c + ch];
                for v in &mut ob[ch * hw..(ch + 1) * hw] {
                    *v += add;
                }
            }
        }
        let ng = self.needs(x) || self.needs(e);
        self.push(out, Op::AddChannel { x, e }, ng)
    }

    /// `scale[b] * x[b] + shift[b]` with a per-sample scalar scale and a constant shift tensor.
    pub fn affine(&mut self, x: Var, scale: &[T], shift: &Tensor<T>) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.shape(), shift.shape(), "affine shift shape");
        let bs = xv.shape()[0];
        assert_eq!(scale.len(), bs, "affine scale length");
        let mut out = shift.clone();
        for bi in 0..bs {
            let s = scale[bi];
            let xb = self.nodes[x.0].value.item(bi);
            for (o, &v) in out.item_mut(bi).iter_mut().zip(xb) {
                *o += s * v;
            }
        }
        let ng = self.needs(x);
        self.push(out, Op::Affine { x, scale: scale.to_vec() }, ng)
    }

    /// Channel concatenation of two [B, C, H, W] tensors.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let (bs, ca, h, w) = self.value(a).dims4();
        let (bb, cb, hb, wb) = self.value(b).dims4();
        assert_eq!((bs, h, w), (bb, hb, wb), "concat shapes");
        let mut data = Vec::with_capacity(bs * (ca + cb) * h * w);
        for bi in 0..bs {
            data.extend_from_slice(self.value(a).item(bi));
            data.extend_from_slice(self.value(b).item(bi));
        }
        let out = Tensor::new(&[bs, ca + cb, h, w], data).expect("concat");
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::Concat(a, b), ng)
    }

    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let (bs, c, h, w) = self.value(x).dims4();
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even dims, got {h}x{w}");
        let (ho, wo) = (h / 2, w / 2);
        let mut out = Tensor::zeros(&[bs, c, ho, wo]);
        let xv = self.value(x).data();
        let od = out.data_mut();
        for p in 0..bs * c {
            let src = &xv[p * h * w..(p + 1) * h * w];
            let dst = &mut od[p * ho * wo..(p + 1) * ho * wo];
            for y in 0..ho {
                for xx in 0..wo {
                    let i = 2 * y * w + 2 * xx;
                    dst[y * wo + xx] = T::lit(0.25) * (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]);
                }
            }
        }
        let ng = self.needs(x);
        self.push(out, Op::AvgPool2(x), ng)
    }

    pub fn upsample2(&mut self, x: Var) -> Var {
        let (bs, c, h, w) = self.value(x).dims4();
        let (ho, wo) = (2 * h, 2 * w);
        let mut out = Tensor::zeros(&[bs, c, ho, wo]);
        let xv = self.value(x).data();
        let od = out.data_mut();
        for p in 0..bs * c {
            let src = &xv[p * h * w..(p + 1) * h * w];
            let dst = &mut od[p * ho * wo..(p + 1) * ho * wo];
            for y in 0..ho {
                for xx in 0..wo {
                    dst[y * wo + xx] = src[(y / 2) * w + xx / 2];
                }
            }
        }
        let ng = self.needs(x);
        self.push(out, Op::Upsample2(x), ng)
    }

    /// Single-head self-attention over spatial positions. `qkv` holds the
    /// query, key and value projections stacked along channels: [B, 3C, H, W].
    pub fn attention(&mut self, qkv: Var) -> Var {
        let (bs, c3, h, w) = self.value(qkv).dims4();
        assert_eq!(c3 % 3, 0, "attention input channels must be 3C");
        let c = c3 / 3;
        let n = h * w;
        let scale = T::one() / T::lit(c as f64).sqrt();
        let mut out = Tensor::zeros(&[bs, c, h, w]);
        let mut probs = vec![T::zero(); bs * n * n];
        for bi in 0..bs {
            let src = self.nodes[qkv.0].value.item(bi);
            let (q, rest) = src.split_at(c * n);
            let (k, v) = rest.split_at(c * n);
            let p = &mut probs[bi * n * n..(bi + 1) * n * n];
            gemm(n, c, n, q, true, k, false, p, T::zero());
            for row in p.chunks_mut(n) {
                let mx = row.iter().fold(T::neg_infinity(), |m, &s| m.max(s * scale));
                let mut sum = T::zero();
                for s in row.iter_mut() {
                    *s = (*s * scale - mx).exp();
                    sum += *s;
                }
                let inv = T::one() / sum;
                for s in row.iter_mut() {
                    *s *= inv;
                }
            }
            gemm(c, n, n, v, false, p, true, out.item_mut(bi), T::zero());
        }
        let ng = self.needs(qkv);
        self.push(out, Op::Attention { qkv, probs }, ng)
    }

    /// `x @ w^T + b` for `x` [B, I], `w` [O, I], `b` [O].
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let (bs, i, o) = (xs[0], xs[1], ws[0]);
        assert_eq!(ws[1], i, "linear input size");
        let mut out = Tensor::zeros(&[bs, o]);
        {
            let bv = self.value(b).data();
            for row in out.data_mut().chunks_mut(o) {
                row.copy_from_slice(bv);
            }
        }
        let (xv, wv) = (self.nodes[x.0].value.data(), self.nodes[w.0].value.data());
        gemm(bs, i, o, xv, false, wv, true, out.data_mut(), T::one());
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(out, Op::Linear { x, w, b }, ng)
    }

    /// Mean over all elements of `weights[b] * (pred - target)^2`.
    pub fn squared_error(&mut self, pred: Var, target: &Tensor<T>, weights: &[T]) -> Var {
        let pv = self.value(pred);
        assert_eq!(pv.shape(), target.shape(), "loss shapes");
        let bs = pv.shape()[0];
        assert_eq!(weights.len(), bs);
        let mut acc = 0.0f64;
        for (bi, &wt) in weights.iter().enumerate() {
            let s: f64 = pv
                .item(bi)
                .iter()
                .zip(target.item(bi))
                .map(|(&p, &t)| {
                    let d = (p - t).to_f64().unwrap();
                    d * d
                })
                .sum();
            acc += wt.to_f64().unwrap() * s;
        }
        let loss = T::lit(acc / pv.numel() as f64);
        let ng = self.needs(pred);
        self.push(
            Tensor::scalar(loss),
            Op::SquaredError { pred, target: target.clone(), weights: weights.to_vec() },
            ng,
        )
    }

    /// Mean over all elements of `weights[b] * |pred - target|`.
    pub fn abs_error(&mut self, pred: Var, target: &Tensor<T>, weights: &[T]) -> Var {
        let pv = self.value(pred);
        assert_eq!(pv.shape(), target.shape(), "loss shapes");
        let mut acc = 0.0f64;
        for (bi, &wt) in weights.iter().enumerate() {
            let s: f64 = pv.item(bi).iter().zip(target.item(bi)).map(|(&p, &t)| (p - t).abs().to_f64().unwrap()).sum();
            acc += wt.to_f64().unwrap() * s;
        }
        let loss = T::lit(acc / pv.numel() as f64);
        let ng = self.needs(pred);
        self.push(Tensor::scalar(loss), Op::AbsError { pred, target: target.clone(), weights: weights.to_vec() }, ng)
    }

    /// Reverse-mode sweep from a scalar node. Returns gradients for every
    /// parameter that contributed to `root`.
    pub fn backward(&self, root: Var, n_params: usize) -> Gradients<T> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), T::one()));
        let mut out = Gradients { grads: (0..n_params).map(|_| None).collect() };

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            let acc = |v: Var, g: Tensor<T>, grads: &mut Vec<Option<Tensor<T>>>| {
                if !self.nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(t) => t.add_assign(&g),
                    slot => *slot = Some(g),
                }
            };
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => match &mut out.grads[id.0] {
                    Some(t) => t.add_assign(&dy),
                    slot => *slot = Some(dy),
                },
                Op::Conv2d { x, w, b, k } => {
                    let (dx, dw, db) = self.conv2d_backward(*x, *w, *k, &dy);
                    if let Some(dx) = dx {
                        acc(*x, dx, &mut grads);
                    }
                    acc(*w, dw, &mut grads);
                    acc(*b, db, &mut grads);
                }
                Op::GroupNorm { x, gamma, beta, groups, stats } => {
                    let (dx, dg, db) = self.group_norm_backward(*x, *gamma, *groups, stats, &dy);
                    acc(*x, dx, &mut grads);
                    acc(*gamma, dg, &mut grads);
                    acc(*beta, db, &mut grads);
                }
                Op::Silu(x) => {
                    let mut g = dy;
                    for (gv, &xv) in g.data_mut().iter_mut().zip(self.value(*x).data()) {
                        let s = sigmoid(xv);
                        *gv *= s * (T::one() + xv * (T::one() - s));
                    }
                    acc(*x, g, &mut grads);
                }
                Op::Add(a, b) => {
                    acc(*b, dy.clone(), &mut grads);
                    acc(*a, dy, &mut grads);
                }
                Op::AddChannel { x, e } => {
                    let (bs, c, h, w) = dy.dims4();
                    let hw = h * w;
                    let mut de = Tensor::zeros(&[bs, c]);
                    for bi in 0..bs {
                        let g = dy.item(bi);
                        for ch in 0..c {
                            de.data_mut()[bi * c + ch] = g[ch * hw..(ch + 1) * hw].iter().copied().sum();
                        }
                    }
                    acc(*e, de, &mut grads);
                    acc(*x, dy, &mut grads);
                }
                Op::Affine { x, scale } => {
                    let mut g = dy;
                    for (bi, &s) in scale.iter().enumerate() {
                        for v in g.item_mut(bi) {
                            *v *= s;
                        }
                    }
                    acc(*x, g, &mut grads);
                }
                Op::Concat(a, b) => {
                    let (bs, _, h, w) = dy.dims4();
                    let ca = self.value(*a).shape()[1];
                    let cb = self.value(*b).shape()[1];
                    let split = ca * h * w;
                    let mut ga = Vec::with_capacity(bs * split);
                    let mut gb = Vec::with_capacity(bs * cb * h * w);
                    for bi in 0..bs {
                        let item = dy.item(bi);
                        ga.extend_from_slice(&item[..split]);
                        gb.extend_from_slice(&item[split..]);
                    }
                    acc(*a, Tensor::new(&[bs, ca, h, w], ga).unwrap(), &mut grads);
                    acc(*b, Tensor::new(&[bs, cb, h, w], gb).unwrap(), &mut grads);
                }
                Op::AvgPool2(x) => {
                    let (bs, c, h, w) = self.value(*x).dims4();
                    let (ho, wo) = (h / 2, w / 2);
                    let mut g = Tensor::zeros(&[bs, c, h, w]);
                    let gd = g.data_mut();
                    for p in 0..bs * c {
                        let src = &dy.data()[p * ho * wo..(p + 1) * ho * wo];
                        let dst = &mut gd[p * h * w..(p + 1) * h * w];
                        for y in 0..h {
                            for xx in 0..w {
                                dst[y * w + xx] = T::lit(0.25) * src[(y / 2) * wo + xx / 2];
                            }
                        }
                    }
                    acc(*x, g, &mut grads);
                }
                Op::Upsample2(x) => {
                    let (bs, c, h, w) = self.value(*x).dims4();
                    let wo = 2 * w;
                    let mut g = Tensor::zeros(&[bs, c, h, w]);
                    let gd = g.data_mut();
                    for p in 0..bs * c {
                        let src = &dy.data()[p * 4 * h * w..(p + 1) * 4 * h * w];
                        let dst = &mut gd[p * h * w..(p + 1) * h * w];
                        for y in 0..h {
                            for xx in 0..w {
                                let i = 2 * y * wo + 2 * xx;
                                dst[y * w + xx] = src[i] + src[i + 1] + src[i + wo] + src[i + wo + 1];
                            }
                        }
                    }
                    acc(*x, g, &mut grads);
                }
                Op::Attention { qkv, probs } => {
                    let g = self.attention_backward(*qkv, probs, &dy);
                    acc(*qkv, g, &mut grads);
                }
                Op::Linear { x, w, b } => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    let (bs, i) = (xv.shape()[0], xv.shape()[1]);
                    let o = wv.shape()[0];
                    if self.needs(*x) {
                        let mut dx = Tensor::zeros(&[bs, i]);
                        gemm(bs, o, i, dy.data(), false, wv.data(), false, dx.data_mut(), T::zero());
                        acc(*x, dx, &mut grads);
                    }
                    let mut dw = Tensor::zeros(&[o, i]);
                    gemm(o, bs, i, dy.data(), true, xv.data(), false, dw.data_mut(), T::zero());
                    let mut db = Tensor::zeros(&[o]);
                    for row in dy.data().chunks(o) {
                        for (d, &g) in db.data_mut().iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                    acc(*w, dw, &mut grads);
                    acc(*b, db, &mut grads);
                }
                Op::SquaredError { pred, target, weights } => {
                    let pv = self.value(*pred);
                    let scale = dy.data()[0] * T::lit(2.0 / pv.numel() as f64);
                    let mut g = Tensor::zeros(pv.shape());
                    for (bi, &wt) in weights.iter().enumerate() {
                        let s = scale * wt;
                        for ((o, &p), &t) in g.item_mut(bi).iter_mut().zip(pv.item(bi)).zip(target.item(bi)) {
                            *o = s * (p - t);
                        }
                    }
                    acc(*pred, g, &mut grads);
                }
                Op::AbsError { pred, target, weights } => {
                    let pv = self.value(*pred);
                    let scale = dy.data()[0] / T::lit(pv.numel() as f64);
                    let mut g = Tensor::zeros(pv.shape());
                    for (bi, &wt) in weights.iter().enumerate() {
                        let s = scale * wt;
                        for ((o, &p), &t) in g.item_mut(bi).iter_mut().zip(pv.item(bi)).zip(target.item(bi)) {
                            let d = p - t;
                            *o = if d > T::zero() {
                                s
                            } else if d < T::zero() {
                                -s
                            } else {
                                T::zero()
                            };
                        }
                    }
                    acc(*pred, g, &mut grads);
                }
            }
        }
        out
    }

    fn conv2d_backward(&self, x: Var, w: Var, k: usize, dy: &Tensor<T>) -> (Option<Tensor<T>>, Tensor<T>, Tensor<T>) {
        let xv = self.value(x);
        let wv = self.value(w);
        let (bs, ci, h, wd) = xv.dims4();
        let co = wv.shape()[0];
        let hw = h * wd;
        let ckk = ci * k * k;
        let mut dw = Tensor::zeros(wv.shape());
        let mut db = Tensor::zeros(&[co]);
        let want_dx = self.needs(x);
        let mut dx = want_dx.then(|| Tensor::zeros(xv.shape()));
        let mut col = if k == 3 { vec![T::zero(); ckk * hw] } else { Vec::new() };
        let mut dcol = if k == 3 && want_dx { vec![T::zero(); ckk * hw] } else { Vec::new() };
        for bi in 0..bs {
            let g = dy.item(bi);
            let src: &[T] = if k == 3 {
                im2col3(xv.item(bi), ci, h, wd, &mut col);
                &col
            } else {
                xv.item(bi)
            };
            gemm(co, hw, ckk, g, false, src, true, dw.data_mut(), T::one());
            for (c, d) in db.data_mut().iter_mut().enumerate() {
                *d += g[c * hw..(c + 1) * hw].iter().copied().sum::<T>();
            }
            if let Some(dx) = dx.as_mut() {
                if k == 3 {
                    gemm(ckk, co, hw, wv.data(), true, g, false, &mut dcol, T::zero());
                    col2im3(&dcol, ci, h, wd, dx.item_mut(bi));
                } else {
                    gemm(ckk, co, hw, wv.data(), true, g, false, dx.item_mut(bi), T::zero());
                }
            }
        }
        (dx, dw, db)
    }

    fn group_norm_backward(
        &self,
        x: Var,
        gamma: Var,
        groups: usize,
        stats: &[(T, T)],
        dy: &Tensor<T>,
    ) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
        let xv = self.value(x);
        let gv = self.value(gamma).data();
        let (bs, c, h, w) = xv.dims4();
        let hw = h * w;
        let cg = c / groups;
        let n = (cg * hw) as f64;
        let mut dx = Tensor::zeros(xv.shape());
        let mut dgamma = vec![0.0f64; c];
        let mut dbeta = vec![0.0f64; c];
        for bi in 0..bs {
            let xb = xv.item(bi);
            let gb = dy.item(bi);
            let dxb = dx.item_mut(bi);
            for g in 0..groups {
                let (mean, rstd) = stats[bi * groups + g];
                let mut sum_dxhat = 0.0f64;
                let mut sum_dxhat_xhat = 0.0f64;
                for cc in 0..cg {
                    let ch = g * cg + cc;
                    let ga = gv[ch];
                    let mut dgs = 0.0f64;
                    let mut dbs = 0.0f64;
                    for i in ch * hw..(ch + 1) * hw {
                        let xhat = (xb[i] - mean) * rstd;
                        let d = gb[i];
                        dgs += (d * xhat).to_f64().unwrap();
                        dbs += d.to_f64().unwrap();
                        let dxhat = (d * ga).to_f64().unwrap();
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat.to_f64().unwrap();
                    }
                    dgamma[ch] += dgs;
                    dbeta[ch] += dbs;
                }
                let m1 = T::lit(sum_dxhat / n);
                let m2 = T::lit(sum_dxhat_xhat / n);
                for cc in 0..cg {
                    let ch = g * cg + cc;
                    let ga = gv[ch];
                    for i in ch * hw..(ch + 1) * hw {
                        let xhat = (xb[i] - mean) * rstd;
                        dxb[i] = rstd * (gb[i] * ga - m1 - xhat * m2);
                    }
                }
            }
        }
        let to_t = |v: Vec<f64>| Tensor::new(&[c], v.into_iter().map(T::lit).collect()).unwrap();
        (dx, to_t(dgamma), to_t(dbeta))
    }

    fn attention_backward(&self, qkv: Var, probs: &[T], dy: &Tensor<T>) -> Tensor<T> {
        let xv = self.value(qkv);
        let (bs, c3, h, w) = xv.dims4();
        let c = c3 / 3;
        let n = h * w;
        let scale = T::one() / T::lit(c as f64).sqrt();
        let mut g = Tensor::zeros(xv.shape());
        let mut dp = vec![T::zero(); n * n];
        for bi in 0..bs {
            let src = xv.item(bi);
            let (q, rest) = src.split_at(c * n);
            let (k, v) = rest.split_at(c * n);
            let p = &probs[bi * n * n..(bi + 1) * n * n];
            let dout = dy.item(bi);
            let gb = g.item_mut(bi);
            let (dq, rest) = gb.split_at_mut(c * n);
            let (dk, dv) = rest.split_at_mut(c * n);
            gemm(c, n, n, dout, false, p, false, dv, T::zero());
            gemm(n, c, n, dout, true, v, false, &mut dp, T::zero());
            for (prow, drow) in p.chunks(n).zip(dp.chunks_mut(n)) {
                let dot: T = prow.iter().zip(drow.iter()).map(|(&a, &b)| a * b).sum();
                for (d, &pp) in drow.iter_mut().zip(prow) {
                    *d = pp * (*d - dot) * scale;
                }
            }
            gemm(c, n, n, k, false, &dp, true, dq, T::zero());
            gemm(c, n, n, q, false, &dp, false, dk, T::zero());
        }
        g
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Central-difference check of d(loss)/d(param) for a small graph builder.
    fn check_grads(store: &mut ParamStore, build: impl Fn(&mut Graph, &ParamStore) -> Var) {
        let mut g = Graph::new();
        let loss = build(&mut g, store);
        let grads = g.backward(loss, store.len());
        let eval = |s: &ParamStore| -> f64 {
            let mut g = Graph::inference();
            let l = build(&mut g, s);
            g.value(l).data()[0] as f64
        };
        let h = 1e-2f32;
        for id in store.ids().collect::<Vec<_>>() {
            let n = store.get(id).numel();
            for i in (0..n).step_by((n / 5).max(1)) {
                let orig = store.get(id).data()[i];
                store.get_mut(id).data_mut()[i] = orig + h;
                let up = eval(store);
                store.get_mut(id).data_mut()[i] = orig - h;
                let dn = eval(store);
                store.get_mut(id).data_mut()[i] = orig;
                let fd = (up - dn) / (2.0 * h as f64);
                let an = grads.get(id).map(|t| t.data()[i] as f64).unwrap_or(0.0);
                let denom = fd.abs().max(an.abs()).max(1e-2);
                assert!((fd - an).abs() / denom < 2e-2, "{} [{i}]: analytic {an} vs numeric {fd}", store.name(id));
            }
        }
    }

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, false, &b, false, &mut c, 0.0);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, &a, true, &b, false, &mut c, 0.0);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, &mut c, 0.0);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn conv3x3_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&mut rng, &[2, 3, 5, 4]);
        let w = rand_tensor(&mut rng, &[2, 3, 3, 3]);
        let b = rand_tensor(&mut rng, &[2]);
        let mut g = Graph::inference();
        let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
        let y = g.conv2d(xv, wv, bv);
        let out = g.value(y);
        for bi in 0..2 {
            for co in 0..2 {
                for r in 0..5 {
                    for c in 0..4 {
                        let mut s = b.data()[co];
                        for ci in 0..3 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let (yy, xx) = (r as isize + ky - 1, c as isize + kx - 1);
                                    if yy < 0 || yy >= 5 || xx < 0 || xx >= 4 {
                                        continue;
                                    }
                                    s += w.data()[((co * 3 + ci) * 3 + ky as usize) * 3 + kx as usize]
                                        * x.data()[((bi * 3 + ci) * 5 + yy as usize) * 4 + xx as usize];
                                }
                            }
                        }
                        let got = out.data()[((bi * 2 + co) * 5 + r) * 4 + c];
                        assert!((got - s).abs() < 1e-5);
                    }
                }
            }
        }
    }

    #[test]
    fn op_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let w3 = store.add("w3", rand_tensor(&mut rng, &[6, 2, 3, 3]));
        let b3 = store.add("b3", rand_tensor(&mut rng, &[6]));
        let gam = store.add("gamma", rand_tensor(&mut rng, &[6]));
        let bet = store.add("beta", rand_tensor(&mut rng, &[6]));
        let w1 = store.add("w1", rand_tensor(&mut rng, &[6, 6, 1, 1]));
        let b1 = store.add("b1", rand_tensor(&mut rng, &[6]));
        let lw = store.add("lin.w", rand_tensor(&mut rng, &[2, 3]));
        let lb = store.add("lin.b", rand_tensor(&mut rng, &[2]));
        let x = rand_tensor(&mut rng, &[2, 2, 4, 4]);
        let emb = rand_tensor(&mut rng, &[2, 3]);
        let target = rand_tensor(&mut rng, &[2, 4, 4, 4]);
        let shift = rand_tensor(&mut rng, &[2, 4, 4, 4]);
        check_grads(&mut store, |g, s| {
            let xv = g.constant(x.clone());
            let h = {
                let (w, b) = (g.param(s, w3), g.param(s, b3));
                g.conv2d(xv, w, b)
            };
            let h = {
                let (ga, be) = (g.param(s, gam), g.param(s, bet));
                g.group_norm(h, ga, be, 3)
            };
            let h = g.silu(h);
            let h = {
                let (w, b) = (g.param(s, w1), g.param(s, b1));
                g.conv2d(h, w, b)
            };
            let a = g.attention(h);
            let pooled = g.avg_pool2(a);
            let up = g.upsample2(pooled);
            let e = g.constant(emb.clone());
            let (w, b) = (g.param(s, lw), g.param(s, lb));
            let e = g.linear(e, w, b);
            let up = g.add_channel(up, e);
            let cat = g.concat(up, xv);
            let twice = g.add(cat, cat);
            let out = g.affine(twice, &[0.5, 2.0], &shift);
            g.squared_error(out, &target, &[1.0, 0.5])
        });
    }

    #[test]
    fn abs_error_of_exact_prediction_is_zero() {
        let mut g = Graph::new();
        let t = Tensor::full(&[1, 1, 2, 2], 3.0);
        let p = g.constant(t.clone());
        let l = g.abs_error(p, &t, &[1.0]);
        assert_eq!(g.value(l).data()[0], 0.0);
        let l2 = g.squared_error(p, &t, &[1.0]);
        assert_eq!(g.value(l2).data()[0], 0.0);
    }
}
