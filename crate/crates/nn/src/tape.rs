//! Define-by-run reverse-mode differentiation.
//!
//! Every op appends a node holding its forward value. [`Tape::backward`]
//! walks the nodes in reverse and returns gradients for every parameter
//! leaf the seeds reach. Leaves created with [`Tape::input`] are constants.

use std::cell::RefCell;

use crate::conv::{col2im, im2col, ConvGeom};
use crate::float::{matmul, Layout};
use crate::param::{ParamGrads, ParamId, ParamStore};
use crate::{Float, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Input,
    Param(ParamId),
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, mean: Vec<T>, rstd: Vec<T> },
    Silu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    AddChannel { x: Var, e: Var },
    Scale(Var, T),
    Concat(Var, Var),
    SliceChannels { x: Var, start: usize },
    UpsampleNearest2(Var),
    Bilinear(Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Bmm { a: Var, b: Var, ta: bool, tb: bool },
    SoftmaxRows(Var),
    ToTokens(Var),
    FromTokens(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients of every node reached by a backward pass.
#[derive(Debug)]
pub struct Gradients<T> {
    nodes: Vec<Option<Tensor<T>>>,
    params: ParamGrads<T>,
}

impl<T: Float> Gradients<T> {
    pub fn params(&self) -> &ParamGrads<T> {
        &self.params
    }

    pub fn into_params(self) -> ParamGrads<T> {
        self.params
    }

    /// Gradient with respect to an arbitrary node, if it was reached.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].as_ref()
    }
}

pub struct Tape<'s, T: Float> {
    store: &'s ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_nodes: Vec<Option<Var>>,
    track_params: bool,
    /// Reused im2col buffer.
    scratch: RefCell<Vec<T>>,
}

impl<'s, T: Float> Tape<'s, T> {
    pub fn new(store: &'s ParamStore<T>) -> Self {
        Self { store, nodes: Vec::new(), param_nodes: vec![None; store.len()], track_params: true, scratch: RefCell::new(Vec::new()) }
    }

    /// A tape whose parameter leaves do not require gradients. Forward values
    /// are identical; nothing is prepared for a backward pass.
    pub fn inference(store: &'s ParamStore<T>) -> Self {
        Self { track_params: false, ..Self::new(store) }
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Input, false)
    }

    /// Constant leaf whose gradient is still reported by [`Gradients::wrt`].
    pub fn input_with_grad(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Input, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes[id.index()] {
            return v;
        }
        let value = self.store.get(id).clone();
        let v = self.push(value, Op::Param(id), self.track_params);
        self.param_nodes[id.index()] = Some(v);
        v
    }

    // ---------------------------------------------------------------- ops

    /// 2-d convolution, `x: [n, ci, h, w]`, `w: [co, ci, k, k]`, `b: [co]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (n, ci, h, wd) = self.value(x).dims4();
        let wshape = self.shape(w).to_vec();
        assert_eq!(wshape.len(), 4, "conv weight must be rank 4");
        let (co, k) = (wshape[0], wshape[2]);
        assert_eq!(wshape[1], ci, "conv input channels: weight {:?}, input {:?}", wshape, self.shape(x));
        assert_eq!(wshape[3], k, "square kernels only");
        let g = ConvGeom::new(ci, h, wd, k, stride, pad);
        let (kk, hw) = (g.col_rows(), g.col_cols());
        let mut out = vec![T::zero(); n * co * hw];
        let mut col = self.take_scratch(if g.is_pointwise() { 0 } else { kk * hw });
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            for bi in 0..n {
                let xb = &xv[bi * ci * h * wd..(bi + 1) * ci * h * wd];
                let src: &[T] = if g.is_pointwise() {
                    xb
                } else {
                    im2col(xb, &g, &mut col);
                    &col
                };
                matmul(co, kk, hw, wv, Layout::Normal, src, Layout::Normal, &mut out[bi * co * hw..(bi + 1) * co * hw], false);
            }
            if let Some(b) = b {
                let bv = self.value(b).data();
                assert_eq!(bv.len(), co, "conv bias length");
                for (i, chunk) in out.chunks_mut(hw).enumerate() {
                    let bias = bv[i % co];
                    chunk.iter_mut().for_each(|o| *o += bias);
                }
            }
        }
        self.scratch.replace(col);
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(Tensor::from_vec(&[n, co, g.ho, g.wo], out), Op::Conv2d { x, w, b, stride, pad }, rg)
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        assert!(groups > 0 && c % groups == 0, "group_norm: {c} channels not divisible into {groups} groups");
        let cpg = c / groups;
        let gsize = cpg * h * w;
        let hw = h * w;
        let mut out = vec![T::zero(); n * c * hw];
        let mut means = vec![T::zero(); n * groups];
        let mut rstds = vec![T::zero(); n * groups];
        {
            let xv = self.value(x).data();
            let gv = self.value(gamma).data();
            let bv = self.value(beta).data();
            assert_eq!(gv.len(), c);
            assert_eq!(bv.len(), c);
            let inv = T::cast(1.0 / gsize as f64);
            for bi in 0..n {
                for g in 0..groups {
                    let off = (bi * c + g * cpg) * hw;
                    let seg = &xv[off..off + gsize];
                    let mean = seg.iter().copied().sum::<T>() * inv;
                    let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv;
                    let rstd = T::one() / (var + T::cast(eps)).sqrt();
                    means[bi * groups + g] = mean;
                    rstds[bi * groups + g] = rstd;
                    for cc in 0..cpg {
                        let ch = g * cpg + cc;
                        let (ga, be) = (gv[ch], bv[ch]);
                        let o = off + cc * hw;
                        for i in o..o + hw {
                            out[i] = (xv[i] - mean) * rstd * ga + be;
                        }
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(Tensor::from_vec(&[n, c, h, w], out), Op::GroupNorm { x, gamma, beta, groups, mean: means, rstd: rstds }, rg)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a * a.logistic());
        let rg = self.rg(x);
        self.push(v, Op::Silu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(sigmoid);
        let rg = self.rg(x);
        self.push(v, Op::Sigmoid(x), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        let v = Tensor::from_vec(self.shape(a), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Add(a, b), rg)
    }

    /// `x: [n, c, h, w] + e: [n, c]` broadcast over the spatial axes.
    pub fn add_channel(&mut self, x: Var, e: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        assert_eq!(self.shape(e), &[n, c], "add_channel: embedding shape");
        let hw = h * w;
        let mut out = self.value(x).clone();
        {
            let ev = self.value(e).data();
            for (i, chunk) in out.data_mut().chunks_mut(hw).enumerate() {
                let add = ev[i];
                chunk.iter_mut().for_each(|o| *o += add);
            }
        }
        let rg = self.rg(x) || self.rg(e);
        self.push(out, Op::AddChannel { x, e }, rg)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let f = T::cast(factor);
        let v = self.value(x).map(|a| a * f);
        let rg = self.rg(x);
        self.push(v, Op::Scale(x, f), rg)
    }

    /// Concatenate two rank-4 tensors along the channel axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let (n, ca, h, w) = self.value(a).dims4();
        let (nb, cb, hb, wb) = self.value(b).dims4();
        assert_eq!((n, h, w), (nb, hb, wb), "concat: batch/spatial mismatch");
        let hw = h * w;
        let mut out = Vec::with_capacity(n * (ca + cb) * hw);
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            for bi in 0..n {
                out.extend_from_slice(&av[bi * ca * hw..(bi + 1) * ca * hw]);
                out.extend_from_slice(&bv[bi * cb * hw..(bi + 1) * cb * hw]);
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::from_vec(&[n, ca + cb, h, w], out), Op::Concat(a, b), rg)
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        assert!(start + len <= c, "slice_channels out of range");
        let hw = h * w;
        let mut out = Vec::with_capacity(n * len * hw);
        {
            let xv = self.value(x).data();
            for bi in 0..n {
                let o = (bi * c + start) * hw;
                out.extend_from_slice(&xv[o..o + len * hw]);
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::from_vec(&[n, len, h, w], out), Op::SliceChannels { x, start }, rg)
    }

    pub fn upsample_nearest2(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![T::zero(); n * c * h2 * w2];
        {
            let xv = self.value(x).data();
            for p in 0..n * c {
                let src = &xv[p * h * w..(p + 1) * h * w];
                let dst = &mut out[p * h2 * w2..(p + 1) * h2 * w2];
                for y in 0..h2 {
                    let srow = &src[(y / 2) * w..(y / 2 + 1) * w];
                    for (xo, d) in dst[y * w2..(y + 1) * w2].iter_mut().enumerate() {
                        *d = srow[xo / 2];
                    }
                }
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::from_vec(&[n, c, h2, w2], out), Op::UpsampleNearest2(x), rg)
    }

    /// Bilinear resize with half-pixel centres (`align_corners = false`).
    pub fn bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let ry = bilinear_taps(h, out_h);
        let rx = bilinear_taps(w, out_w);
        let mut out = vec![T::zero(); n * c * out_h * out_w];
        {
            let xv = self.value(x).data();
            for p in 0..n * c {
                let src = &xv[p * h * w..(p + 1) * h * w];
                let dst = &mut out[p * out_h * out_w..(p + 1) * out_h * out_w];
                for (oy, &(y0, y1, wy)) in ry.iter().enumerate() {
                    let (wy, wy0) = (T::cast(wy), T::cast(1.0 - wy));
                    for (ox, &(x0, x1, wx)) in rx.iter().enumerate() {
                        let (wx, wx0) = (T::cast(wx), T::cast(1.0 - wx));
                        let top = src[y0 * w + x0] * wx0 + src[y0 * w + x1] * wx;
                        let bot = src[y1 * w + x0] * wx0 + src[y1 * w + x1] * wx;
                        dst[oy * out_w + ox] = top * wy0 + bot * wy;
                    }
                }
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::from_vec(&[n, c, out_h, out_w], out), Op::Bilinear(x), rg)
    }

    /// `x: [.., in] * w: [in, out] + b: [out]`; leading axes are flattened.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(ws.len(), 2, "linear weight must be rank 2");
        let (din, dout) = (ws[0], ws[1]);
        assert_eq!(*xs.last().expect("rank >= 1"), din, "linear: input width {:?} vs weight {:?}", xs, ws);
        let rows = xs.iter().product::<usize>() / din;
        let mut out = vec![T::zero(); rows * dout];
        matmul(rows, din, dout, self.value(x).data(), Layout::Normal, self.value(w).data(), Layout::Normal, &mut out, false);
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_mut(dout) {
                row.iter_mut().zip(bv).for_each(|(o, &bb)| *o += bb);
            }
        }
        let mut shape = xs;
        *shape.last_mut().expect("rank >= 1") = dout;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(Tensor::from_vec(&shape, out), Op::Linear { x, w, b }, rg)
    }

    /// Batched `op(a) * op(b)` for rank-3 operands, `op` optionally transposing
    /// the trailing two axes.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0], "bmm: shapes {:?} {:?}", sa, sb);
        let (m, k) = if ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let (k2, nn) = if tb { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        assert_eq!(k, k2, "bmm: inner dims {:?} {:?}", sa, sb);
        let batch = sa[0];
        let mut out = vec![T::zero(); batch * m * nn];
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            for i in 0..batch {
                matmul(
                    m,
                    k,
                    nn,
                    &av[i * m * k..(i + 1) * m * k],
                    layout(ta),
                    &bv[i * k * nn..(i + 1) * k * nn],
                    layout(tb),
                    &mut out[i * m * nn..(i + 1) * m * nn],
                    false,
                );
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::from_vec(&[batch, m, nn], out), Op::Bmm { a, b, ta, tb }, rg)
    }

    /// Softmax over the last axis.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().expect("rank >= 1");
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(d) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let rg = self.rg(x);
        self.push(out, Op::SoftmaxRows(x), rg)
    }

    /// `[n, c, h, w] -> [n, h*w, c]`.
    pub fn to_tokens(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let hw = h * w;
        let mut out = vec![T::zero(); n * hw * c];
        {
            let xv = self.value(x).data();
            for bi in 0..n {
                for ch in 0..c {
                    for p in 0..hw {
                        out[(bi * hw + p) * c + ch] = xv[(bi * c + ch) * hw + p];
                    }
                }
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::from_vec(&[n, hw, c], out), Op::ToTokens(x), rg)
    }

    /// `[n, h*w, c] -> [n, c, h, w]`.
    pub fn from_tokens(&mut self, x: Var, h: usize, w: usize) -> Var {
        let s = self.shape(x).to_vec();
        assert!(s.len() == 3 && s[1] == h * w, "from_tokens: shape {:?} vs {h}x{w}", s);
        let (n, hw, c) = (s[0], s[1], s[2]);
        let mut out = vec![T::zero(); n * c * hw];
        {
            let xv = self.value(x).data();
            for bi in 0..n {
                for p in 0..hw {
                    for ch in 0..c {
                        out[(bi * c + ch) * hw + p] = xv[(bi * hw + p) * c + ch];
                    }
                }
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::from_vec(&[n, c, h, w], out), Op::FromTokens(x), rg)
    }

    // ----------------------------------------------------------- backward

    /// Back-propagate from `seeds` (node, upstream gradient) pairs.
    pub fn backward(&self, seeds: &[(Var, Tensor<T>)]) -> Gradients<T> {
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        for (v, g) in seeds {
            assert_eq!(self.shape(*v), g.shape(), "seed gradient shape mismatch");
            accumulate_shaped(&mut grads, *v, g.data(), g.shape());
        }
        let mut params = ParamGrads::new(self.store.len());
        let last = seeds.iter().map(|(v, _)| v.0).max().map_or(0, |m| m + 1);
        for i in (0..last).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gout) = grads[i].take() else { continue };
            self.backward_node(i, &gout, &mut grads, &mut params);
            grads[i] = Some(gout);
        }
        Gradients { nodes: grads, params }
    }

    fn backward_node(&self, i: usize, gout: &Tensor<T>, grads: &mut [Option<Tensor<T>>], params: &mut ParamGrads<T>) {
        let go = gout.data();
        let node = &self.nodes[i];
        match &node.op {
            Op::Input => {}
            Op::Param(id) => params.accumulate(*id, gout.clone()),
            Op::Conv2d { x, w, b, stride, pad } => self.conv_backward(*x, *w, *b, *stride, *pad, gout, grads),
            Op::GroupNorm { x, gamma, beta, groups, mean, rstd } => {
                let (n, c, h, wd) = self.value(*x).dims4();
                let (hw, cpg) = (h * wd, c / groups);
                let gsize = T::cast((cpg * hw) as f64);
                let xv = self.value(*x).data();
                let gv = self.value(*gamma).data();
                let mut dx = vec![T::zero(); xv.len()];
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for bi in 0..n {
                    for g in 0..*groups {
                        let (mu, rs) = (mean[bi * groups + g], rstd[bi * groups + g]);
                        let mut sum_dxhat = T::zero();
                        let mut sum_dxhat_xhat = T::zero();
                        for cc in 0..cpg {
                            let ch = g * cpg + cc;
                            let o = (bi * c + ch) * hw;
                            for j in o..o + hw {
                                let xhat = (xv[j] - mu) * rs;
                                dgamma[ch] += go[j] * xhat;
                                dbeta[ch] += go[j];
                                let dxh = go[j] * gv[ch];
                                sum_dxhat += dxh;
                                sum_dxhat_xhat += dxh * xhat;
                            }
                        }
                        let (m1, m2) = (sum_dxhat / gsize, sum_dxhat_xhat / gsize);
                        for cc in 0..cpg {
                            let ch = g * cpg + cc;
                            let o = (bi * c + ch) * hw;
                            for j in o..o + hw {
                                let xhat = (xv[j] - mu) * rs;
                                dx[j] = rs * (go[j] * gv[ch] - m1 - xhat * m2);
                            }
                        }
                    }
                }
                self.acc(grads, *x, &dx);
                self.acc(grads, *gamma, &dgamma);
                self.acc(grads, *beta, &dbeta);
            }
            Op::Silu(x) => {
                let xv = self.value(*x).data();
                let dx: Vec<T> = xv
                    .iter()
                    .zip(go)
                    .map(|(&a, &g)| {
                        let s = sigmoid(a);
                        g * s * (T::one() + a * (T::one() - s))
                    })
                    .collect();
                self.acc(grads, *x, &dx);
            }
            Op::Sigmoid(x) => {
                let yv = node.value.data();
                let dx: Vec<T> = yv.iter().zip(go).map(|(&y, &g)| g * y * (T::one() - y)).collect();
                self.acc(grads, *x, &dx);
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, go);
                self.acc(grads, *b, go);
            }
            Op::AddChannel { x, e } => {
                self.acc(grads, *x, go);
                if self.rg(*e) {
                    let (_, _, h, w) = node.value.dims4();
                    let de: Vec<T> = go.chunks(h * w).map(|ch| ch.iter().copied().sum()).collect();
                    self.acc(grads, *e, &de);
                }
            }
            Op::Scale(x, f) => {
                let dx: Vec<T> = go.iter().map(|&g| g * *f).collect();
                self.acc(grads, *x, &dx);
            }
            Op::Concat(a, b) => {
                let (n, ca, h, w) = self.value(*a).dims4();
                let cb = self.value(*b).dims4().1;
                let hw = h * w;
                let mut da = Vec::with_capacity(n * ca * hw);
                let mut db = Vec::with_capacity(n * cb * hw);
                for bi in 0..n {
                    let o = bi * (ca + cb) * hw;
                    da.extend_from_slice(&go[o..o + ca * hw]);
                    db.extend_from_slice(&go[o + ca * hw..o + (ca + cb) * hw]);
                }
                self.acc(grads, *a, &da);
                self.acc(grads, *b, &db);
            }
            Op::SliceChannels { x, start } => {
                if !self.rg(*x) {
                    return;
                }
                let (n, c, h, w) = self.value(*x).dims4();
                let len = node.value.dims4().1;
                let hw = h * w;
                let dst = grad_buf(grads, *x, n * c * hw, self.shape(*x));
                for bi in 0..n {
                    let o = (bi * c + start) * hw;
                    for (d, g) in dst[o..o + len * hw].iter_mut().zip(&go[bi * len * hw..(bi + 1) * len * hw]) {
                        *d += *g;
                    }
                }
            }
            Op::UpsampleNearest2(x) => {
                let (n, c, h, w) = self.value(*x).dims4();
                let w2 = 2 * w;
                let mut dx = vec![T::zero(); n * c * h * w];
                for p in 0..n * c {
                    let src = &go[p * 4 * h * w..(p + 1) * 4 * h * w];
                    let dst = &mut dx[p * h * w..(p + 1) * h * w];
                    for y in 0..2 * h {
                        for xo in 0..w2 {
                            dst[(y / 2) * w + xo / 2] += src[y * w2 + xo];
                        }
                    }
                }
                self.acc(grads, *x, &dx);
            }
            Op::Bilinear(x) => {
                let (n, c, h, w) = self.value(*x).dims4();
                let (_, _, oh, ow) = node.value.dims4();
                let ry = bilinear_taps(h, oh);
                let rx = bilinear_taps(w, ow);
                let mut dx = vec![T::zero(); n * c * h * w];
                for p in 0..n * c {
                    let src = &go[p * oh * ow..(p + 1) * oh * ow];
                    let dst = &mut dx[p * h * w..(p + 1) * h * w];
                    for (oy, &(y0, y1, wy)) in ry.iter().enumerate() {
                        let (wy, wy0) = (T::cast(wy), T::cast(1.0 - wy));
                        for (ox, &(x0, x1, wx)) in rx.iter().enumerate() {
                            let (wx, wx0) = (T::cast(wx), T::cast(1.0 - wx));
                            let g = src[oy * ow + ox];
                            dst[y0 * w + x0] += g * wy0 * wx0;
                            dst[y0 * w + x1] += g * wy0 * wx;
                            dst[y1 * w + x0] += g * wy * wx0;
                            dst[y1 * w + x1] += g * wy * wx;
                        }
                    }
                }
                self.acc(grads, *x, &dx);
            }
            Op::Linear { x, w, b } => {
                let ws = self.shape(*w);
                let (din, dout) = (ws[0], ws[1]);
                let rows = go.len() / dout;
                if self.rg(*x) {
                    let mut dx = vec![T::zero(); rows * din];
                    matmul(rows, dout, din, go, Layout::Normal, self.value(*w).data(), Layout::Transposed, &mut dx, false);
                    self.acc(grads, *x, &dx);
                }
                if self.rg(*w) {
                    let mut dw = vec![T::zero(); din * dout];
                    matmul(din, rows, dout, self.value(*x).data(), Layout::Transposed, go, Layout::Normal, &mut dw, false);
                    self.acc(grads, *w, &dw);
                }
                if let Some(b) = b {
                    let mut db = vec![T::zero(); dout];
                    for row in go.chunks(dout) {
                        db.iter_mut().zip(row).for_each(|(d, &g)| *d += g);
                    }
                    self.acc(grads, *b, &db);
                }
            }
            Op::Bmm { a, b, ta, tb } => {
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                let (m, k) = if *ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
                let nn = if *tb { sb[1] } else { sb[2] };
                let batch = sa[0];
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.rg(*a) {
                    // dA' = dC * B'^T; stored A is A' or A'^T.
                    let mut da = vec![T::zero(); av.len()];
                    for i in 0..batch {
                        let gc = &go[i * m * nn..(i + 1) * m * nn];
                        let bb = &bv[i * k * nn..(i + 1) * k * nn];
                        let dst = &mut da[i * m * k..(i + 1) * m * k];
                        if *ta {
                            // dA[k,m] = B' [k,n] * dC^T [n,m]
                            matmul(k, nn, m, bb, layout(*tb), gc, Layout::Transposed, dst, false);
                        } else {
                            matmul(m, nn, k, gc, Layout::Normal, bb, layout(!*tb), dst, false);
                        }
                    }
                    self.acc(grads, *a, &da);
                }
                if self.rg(*b) {
                    // dB' = A'^T * dC
                    let mut db = vec![T::zero(); bv.len()];
                    for i in 0..batch {
                        let gc = &go[i * m * nn..(i + 1) * m * nn];
                        let aa = &av[i * m * k..(i + 1) * m * k];
                        let dst = &mut db[i * k * nn..(i + 1) * k * nn];
                        if *tb {
                            // dB[n,k] = dC^T [n,m] * A' [m,k]
                            matmul(nn, m, k, gc, Layout::Transposed, aa, layout(*ta), dst, false);
                        } else {
                            matmul(k, m, nn, aa, layout(!*ta), gc, Layout::Normal, dst, false);
                        }
                    }
                    self.acc(grads, *b, &db);
                }
            }
            Op::SoftmaxRows(x) => {
                let d = *node.value.shape().last().expect("rank >= 1");
                let yv = node.value.data();
                let mut dx = vec![T::zero(); yv.len()];
                for ((y, g), out) in yv.chunks(d).zip(go.chunks(d)).zip(dx.chunks_mut(d)) {
                    let dot: T = y.iter().zip(g).map(|(&a, &b)| a * b).sum();
                    for j in 0..d {
                        out[j] = y[j] * (g[j] - dot);
                    }
                }
                self.acc(grads, *x, &dx);
            }
            Op::ToTokens(x) => {
                let (n, c, h, w) = self.value(*x).dims4();
                let hw = h * w;
                let mut dx = vec![T::zero(); n * c * hw];
                for bi in 0..n {
                    for ch in 0..c {
                        for p in 0..hw {
                            dx[(bi * c + ch) * hw + p] = go[(bi * hw + p) * c + ch];
                        }
                    }
                }
                self.acc(grads, *x, &dx);
            }
            Op::FromTokens(x) => {
                let (n, c, h, w) = node.value.dims4();
                let hw = h * w;
                let mut dx = vec![T::zero(); n * c * hw];
                for bi in 0..n {
                    for p in 0..hw {
                        for ch in 0..c {
                            dx[(bi * hw + p) * c + ch] = go[(bi * c + ch) * hw + p];
                        }
                    }
                }
                self.acc(grads, *x, &dx);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(&self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize, gout: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let (n, ci, h, wd) = self.value(x).dims4();
        let wv = self.value(w).data();
        let co = self.shape(w)[0];
        let k = self.shape(w)[2];
        let g = ConvGeom::new(ci, h, wd, k, stride, pad);
        let (kk, hw) = (g.col_rows(), g.col_cols());
        let go = gout.data();
        let xv = self.value(x).data();
        if let Some(b) = b.filter(|b| self.rg(*b)) {
            let mut db = vec![T::zero(); co];
            for (i, chunk) in go.chunks(hw).enumerate() {
                db[i % co] += chunk.iter().copied().sum::<T>();
            }
            self.acc(grads, b, &db);
        }
        let need_w = self.rg(w);
        let need_x = self.rg(x);
        let mut col = self.take_scratch(if g.is_pointwise() { 0 } else { kk * hw });
        if need_w {
            let mut dw = vec![T::zero(); co * kk];
            for bi in 0..n {
                let xb = &xv[bi * ci * h * wd..(bi + 1) * ci * h * wd];
                let src: &[T] = if g.is_pointwise() {
                    xb
                } else {
                    im2col(xb, &g, &mut col);
                    &col
                };
                let gb = &go[bi * co * hw..(bi + 1) * co * hw];
                matmul(co, hw, kk, gb, Layout::Normal, src, Layout::Transposed, &mut dw, true);
            }
            self.acc(grads, w, &dw);
        }
        if need_x {
            let dx = grad_buf(grads, x, n * ci * h * wd, self.shape(x));
            let dcol = &mut col;
            for bi in 0..n {
                let gb = &go[bi * co * hw..(bi + 1) * co * hw];
                let dxb = &mut dx[bi * ci * h * wd..(bi + 1) * ci * h * wd];
                if g.is_pointwise() {
                    matmul(kk, co, hw, wv, Layout::Transposed, gb, Layout::Normal, dxb, true);
                } else {
                    matmul(kk, co, hw, wv, Layout::Transposed, gb, Layout::Normal, dcol, false);
                    col2im(dcol, &g, dxb);
                }
            }
        }
        self.scratch.replace(col);
    }

    /// The scratch buffer, at least `len` long; its contents are stale.
    fn take_scratch(&self, len: usize) -> Vec<T> {
        let mut buf = self.scratch.take();
        if buf.len() < len {
            buf.resize(len, T::zero());
        }
        buf
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: &[T]) {
        if self.rg(v) {
            accumulate_shaped(grads, v, g, self.shape(v));
        }
    }
}

fn layout(t: bool) -> Layout {
    if t {
        Layout::Transposed
    } else {
        Layout::Normal
    }
}

#[inline]
fn sigmoid<T: Float>(a: T) -> T {
    a.logistic()
}

fn accumulate_shaped<T: Float>(grads: &mut [Option<Tensor<T>>], v: Var, g: &[T], shape: &[usize]) {
    match &mut grads[v.0] {
        Some(acc) => acc.data_mut().iter_mut().zip(g).for_each(|(a, &b)| *a += b),
        slot @ None => *slot = Some(Tensor::from_vec(shape, g.to_vec())),
    }
}

fn grad_buf<'g, T: Float>(grads: &'g mut [Option<Tensor<T>>], v: Var, len: usize, shape: &[usize]) -> &'g mut [T] {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(shape)).data_mut()[..len].as_mut()
}

/// Source taps `(i0, i1, weight_of_i1)` for each output index of a
/// half-pixel-centred linear resize from `n_in` to `n_out` samples.
pub fn bilinear_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            let frac = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            (i0, i1, frac)
        })
        .collect()
}
