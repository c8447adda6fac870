//! Reverse-mode differentiation over a fixed set of feature-map operators.
//!
//! A [`Tape`] records every operation applied during a forward pass.
//! [`Tape::backward`] then walks the record in reverse, accumulating gradients
//! for intermediate values and for the parameters read through
//! [`Tape::param`]. All arithmetic is `f64`.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::flops::{
    LayerKind, ATTENTION_SOFTMAX_FLOPS, AXPBY_FLOPS, NORM_FLOPS, SILU_FLOPS,
};
use crate::fourier::Field;
use crate::nn::params::{Grads, ParamId, ParamStore};

/// A `C x H x W` feature map in channel-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    pub fn new(c: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != c * h * w {
            return Err(Error::Shape(format!(
                "tensor {c}x{h}x{w} given {} values",
                data.len()
            )));
        }
        Ok(Self { c, h, w, data })
    }

    /// A `n x 1 x 1` vector.
    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            c: data.len(),
            h: 1,
            w: 1,
            data,
        }
    }

    pub fn from_field(f: &Field) -> Self {
        let (h, w, c) = f.shape();
        Self {
            c,
            h,
            w,
            data: f.as_slice().to_vec(),
        }
    }

    pub fn to_field(&self) -> Result<Field> {
        Field::from_planar(self.h, self.w, self.c, self.data.clone())
    }

    pub fn hw(&self) -> usize {
        self.h * self.w
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.c, self.h, self.w)
    }
}

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param(ParamId),
    Conv3x3 { x: Var, w: Var, b: Var },
    Pointwise { x: Var, w: Var, b: Var },
    Product {
        x: Var,
        w1: Var,
        b1: Var,
        w2: Var,
        b2: Var,
        pre: Vec<f64>,
        gate: Vec<f64>,
    },
    Add(Var, Var),
    Mul(Var, Var),
    AddChannel { x: Var, v: Var },
    Axpby { a: Var, alpha: f64, b: Var, beta: f64 },
    Silu(Var),
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    AvgPool2(Var),
    Upsample2(Var),
    Concat(Var, Var),
    Attention { q: Var, k: Var, v: Var, probs: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// FLOPs recorded per `(scope, kind)`.
pub type FlopTable = BTreeMap<(String, LayerKind), u64>;

/// Group-norm epsilon.
pub const NORM_EPS: f64 = 1e-5;

fn silu(v: f64) -> f64 {
    v / (1.0 + (-v).exp())
}

fn silu_grad(v: f64) -> f64 {
    let s = 1.0 / (1.0 + (-v).exp());
    s * (1.0 + v * (1.0 - s))
}

/// Records a forward pass for later differentiation.
pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    scope: String,
    flops: Option<FlopTable>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            scope: String::new(),
            flops: None,
        }
    }

    /// A tape that also tallies FLOPs per scope and operator kind.
    pub fn with_flop_counter(params: &'p ParamStore) -> Self {
        Self {
            flops: Some(FlopTable::new()),
            ..Self::new(params)
        }
    }

    pub fn flops(&self) -> Option<&FlopTable> {
        self.flops.as_ref()
    }

    /// Label under which subsequent FLOPs are counted.
    pub fn set_scope(&mut self, scope: impl Into<String>) {
        self.scope = scope.into();
    }

    fn count(&mut self, kind: LayerKind, n: usize) {
        if let Some(table) = &mut self.flops {
            *table.entry((self.scope.clone(), kind)).or_insert(0) += n as u64;
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// An input that gradients flow into but that is not a parameter.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Reads a parameter as a flat `n x 1 x 1` tensor.
    pub fn param(&mut self, id: ParamId) -> Var {
        let t = Tensor::vector(self.params.value(id).to_vec());
        self.push(t, Op::Param(id))
    }

    /// 3x3 cross-correlation with zero padding; `w` is `[cout, cin, 3, 3]`.
    pub fn conv3x3(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value.data;
        let bv = &self.nodes[b.0].value.data;
        let (cin, h, wd) = xv.shape();
        let cout = bv.len();
        assert_eq!(wv.len(), cout * cin * 9, "conv weight shape");
        let hw = h * wd;
        let mut out = vec![0.0; cout * hw];
        for co in 0..cout {
            let dst = &mut out[co * hw..(co + 1) * hw];
            dst.fill(bv[co]);
            for ci in 0..cin {
                let src = &xv.data[ci * hw..(ci + 1) * hw];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let k = wv[((co * cin + ci) * 3 + ky) * 3 + kx];
                        if k == 0.0 {
                            continue;
                        }
                        for_each_tap(h, wd, ky, kx, |o, i, n| {
                            for (d, s) in dst[o..o + n].iter_mut().zip(&src[i..i + n]) {
                                *d += k * s;
                            }
                        });
                    }
                }
            }
        }
        self.count(LayerKind::Conv, 2 * 9 * cin * cout * hw);
        let t = Tensor::new(cout, h, wd, out).unwrap();
        self.push(t, Op::Conv3x3 { x, w, b })
    }

    /// Per-pixel linear map; `w` is `[cout, cin]`.
    pub fn pointwise(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value.data;
        let bv = &self.nodes[b.0].value.data;
        let cout = bv.len();
        let out = matmul_channels(&xv.data, xv.c, xv.hw(), wv, cout, Some(bv));
        let (cin, h, wd, hw) = (xv.c, xv.h, xv.w, xv.hw());
        self.count(LayerKind::Pointwise, 2 * cin * cout * hw);
        let t = Tensor::new(cout, h, wd, out).unwrap();
        self.push(t, Op::Pointwise { x, w, b })
    }

    /// Full-product layer `x * (W2 silu(W1 x + b1) + b2)`.
    pub fn product(&mut self, x: Var, w1: Var, b1: Var, w2: Var, b2: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let (c, hw) = (xv.c, xv.hw());
        let b1v = &self.nodes[b1.0].value.data;
        let b2v = &self.nodes[b2.0].value.data;
        let mid = b1v.len();
        assert_eq!(b2v.len(), c, "product layer output width");
        let pre = matmul_channels(&xv.data, c, hw, &self.nodes[w1.0].value.data, mid, Some(b1v));
        let act: Vec<f64> = pre.iter().map(|&v| silu(v)).collect();
        let gate = matmul_channels(&act, mid, hw, &self.nodes[w2.0].value.data, c, Some(b2v));
        let out: Vec<f64> = xv.data.iter().zip(&gate).map(|(a, g)| a * g).collect();
        let (h, w) = (xv.h, xv.w);
        self.count(LayerKind::Product, 4 * c * mid * hw + c * hw);
        self.count(LayerKind::Activation, SILU_FLOPS * mid * hw);
        let t = Tensor::new(c, h, w, out).unwrap();
        self.push(
            t,
            Op::Product {
                x,
                w1,
                b1,
                w2,
                b2,
                pre,
                gate,
            },
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(av.shape(), bv.shape(), "add shapes");
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| x + y).collect();
        let t = Tensor { data, ..*av };
        self.count(LayerKind::Elementwise, t.len());
        self.push(t, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(av.shape(), bv.shape(), "mul shapes");
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| x * y).collect();
        let t = Tensor { data, ..*av };
        self.count(LayerKind::Elementwise, t.len());
        self.push(t, Op::Mul(a, b))
    }

    /// Adds a per-channel vector `v` (length `C`) to every pixel of `x`.
    pub fn add_channel(&mut self, x: Var, v: Var) -> Var {
        let (xv, vv) = (&self.nodes[x.0].value, &self.nodes[v.0].value);
        assert_eq!(vv.len(), xv.c, "channel vector length");
        let hw = xv.hw();
        let data = xv
            .data
            .iter()
            .enumerate()
            .map(|(i, a)| a + vv.data[i / hw])
            .collect();
        let t = Tensor { data, ..*xv };
        self.count(LayerKind::Elementwise, t.len());
        self.push(t, Op::AddChannel { x, v })
    }

    /// `alpha * a + beta * b`.
    pub fn axpby(&mut self, a: Var, alpha: f64, b: Var, beta: f64) -> Var {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(av.shape(), bv.shape(), "axpby shapes");
        let data = av
            .data
            .iter()
            .zip(&bv.data)
            .map(|(x, y)| alpha * x + beta * y)
            .collect();
        let t = Tensor { data, ..*av };
        self.count(LayerKind::Elementwise, AXPBY_FLOPS * t.len());
        self.push(t, Op::Axpby { a, alpha, b, beta })
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let data = av.data.iter().map(|&v| silu(v)).collect();
        let t = Tensor { data, ..*av };
        self.count(LayerKind::Activation, SILU_FLOPS * t.len());
        self.push(t, Op::Silu(a))
    }

    /// Group normalization with per-channel affine parameters.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        let xv = &self.nodes[x.0].value;
        let (c, hw) = (xv.c, xv.hw());
        assert!(groups > 0 && c % groups == 0, "groups must divide channels");
        let gv = &self.nodes[gamma.0].value.data;
        let bv = &self.nodes[beta.0].value.data;
        let n = c / groups * hw;
        let mut mean = Vec::with_capacity(groups);
        let mut rstd = Vec::with_capacity(groups);
        let mut out = vec![0.0; xv.len()];
        for g in 0..groups {
            let seg = &xv.data[g * n..(g + 1) * n];
            let m = seg.iter().sum::<f64>() / n as f64;
            let var = seg.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + NORM_EPS).sqrt();
            for (i, v) in seg.iter().enumerate() {
                let ch = (g * n + i) / hw;
                out[g * n + i] = gv[ch] * (v - m) * r + bv[ch];
            }
            mean.push(m);
            rstd.push(r);
        }
        let t = Tensor { data: out, ..*xv };
        self.count(LayerKind::Norm, NORM_FLOPS * t.len());
        self.push(
            t,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean,
                rstd,
            },
        )
    }

    /// 2x2 average pooling with stride 2. Height and width must be even.
    pub fn avg_pool2(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let (c, h, w) = av.shape();
        assert!(h % 2 == 0 && w % 2 == 0, "pooling needs even sizes");
        let (h2, w2) = (h / 2, w / 2);
        let mut out = vec![0.0; c * h2 * w2];
        for ch in 0..c {
            for y in 0..h2 {
                for x in 0..w2 {
                    let base = ch * h * w + 2 * y * w + 2 * x;
                    out[(ch * h2 + y) * w2 + x] = 0.25
                        * (av.data[base] + av.data[base + 1] + av.data[base + w] + av.data[base + w + 1]);
                }
            }
        }
        self.count(LayerKind::Elementwise, av.len());
        let t = Tensor::new(c, h2, w2, out).unwrap();
        self.push(t, Op::AvgPool2(a))
    }

    /// Nearest-neighbour upsampling by 2.
    pub fn upsample2(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let (c, h, w) = av.shape();
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![0.0; c * h2 * w2];
        for ch in 0..c {
            for y in 0..h2 {
                for x in 0..w2 {
                    out[(ch * h2 + y) * w2 + x] = av.data[(ch * h + y / 2) * w + x / 2];
                }
            }
        }
        let t = Tensor::new(c, h2, w2, out).unwrap();
        self.push(t, Op::Upsample2(a))
    }

    /// Channel concatenation.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!((av.h, av.w), (bv.h, bv.w), "concat spatial sizes");
        let mut data = av.data.clone();
        data.extend_from_slice(&bv.data);
        let t = Tensor::new(av.c + bv.c, av.h, av.w, data).unwrap();
        self.push(t, Op::Concat(a, b))
    }

    /// Dot-product attention. `q` supplies `N` query pixels, `k` and `v`
    /// supply `M` key/value pixels; all have the same channel count `c`.
    /// Output has the shape of `q`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Var {
        let (qv, kv, vv) = (
            &self.nodes[q.0].value,
            &self.nodes[k.0].value,
            &self.nodes[v.0].value,
        );
        let c = qv.c;
        assert!(kv.c == c && vv.c == c && kv.hw() == vv.hw(), "attention shapes");
        let (n, m) = (qv.hw(), kv.hw());
        let scale = 1.0 / (c as f64).sqrt();
        let qt = transpose(&qv.data, c, n);
        let kt = transpose(&kv.data, c, m);
        let mut probs = vec![0.0; n * m];
        for i in 0..n {
            let qi = &qt[i * c..(i + 1) * c];
            let row = &mut probs[i * m..(i + 1) * m];
            for (j, r) in row.iter_mut().enumerate() {
                *r = scale * dot(qi, &kt[j * c..(j + 1) * c]);
            }
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for r in row.iter_mut() {
                *r = (*r - mx).exp();
                sum += *r;
            }
            for r in row.iter_mut() {
                *r /= sum;
            }
        }
        // out[ch, i] = sum_j v[ch, j] P[i, j]
        let mut out = vec![0.0; c * n];
        for ch in 0..c {
            let vrow = &vv.data[ch * m..(ch + 1) * m];
            for i in 0..n {
                out[ch * n + i] = dot(vrow, &probs[i * m..(i + 1) * m]);
            }
        }
        let t = Tensor { data: out, ..*qv };
        self.count(LayerKind::Attention, 4 * c * n * m + ATTENTION_SOFTMAX_FLOPS * n * m);
        self.push(t, Op::Attention { q, k, v, probs })
    }

    /// Back-propagates `seed` (the gradient of some scalar with respect to
    /// `output`). Parameter gradients are added into `grads`; the returned
    /// vector holds gradients of every recorded value.
    pub fn backward(&self, output: Var, seed: &Tensor, grads: &mut Grads) -> Vec<Option<Vec<f64>>> {
        assert_eq!(self.nodes[output.0].value.shape(), seed.shape(), "seed shape");
        let mut g: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        g[output.0] = Some(seed.data.clone());
        for i in (0..=output.0).rev() {
            let Some(dy) = g[i].take() else { continue };
            self.backward_node(i, &dy, &mut g, grads);
            g[i] = Some(dy);
        }
        g
    }

    fn backward_node(&self, i: usize, dy: &[f64], g: &mut [Option<Vec<f64>>], grads: &mut Grads) {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => {
                for (a, b) in grads.get_mut(*id).iter_mut().zip(dy) {
                    *a += b;
                }
            }
            Op::Conv3x3 { x, w, b } => {
                let xv = val(*x);
                let wv = &val(*w).data;
                let (cin, h, wd) = xv.shape();
                let hw = h * wd;
                let cout = node.value.c;
                let mut dx = vec![0.0; xv.len()];
                let mut dw = vec![0.0; wv.len()];
                let mut db = vec![0.0; cout];
                for co in 0..cout {
                    let dyc = &dy[co * hw..(co + 1) * hw];
                    db[co] = dyc.iter().sum();
                    for ci in 0..cin {
                        let src = &xv.data[ci * hw..(ci + 1) * hw];
                        let dst = &mut dx[ci * hw..(ci + 1) * hw];
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let widx = ((co * cin + ci) * 3 + ky) * 3 + kx;
                                let k = wv[widx];
                                let mut acc = 0.0;
                                for_each_tap(h, wd, ky, kx, |o, s, n| {
                                    let d = &dyc[o..o + n];
                                    acc += dot(d, &src[s..s + n]);
                                    if k != 0.0 {
                                        for (t, dv) in dst[s..s + n].iter_mut().zip(d) {
                                            *t += k * dv;
                                        }
                                    }
                                });
                                dw[widx] = acc;
                            }
                        }
                    }
                }
                add_into(g, *x, &dx);
                add_into(g, *w, &dw);
                add_into(g, *b, &db);
            }
            Op::Pointwise { x, w, b } => {
                let xv = val(*x);
                let wv = &val(*w).data;
                let (cin, hw) = (xv.c, xv.hw());
                let cout = node.value.c;
                let (dx, dw, db) = matmul_channels_backward(&xv.data, cin, hw, wv, cout, dy);
                add_into(g, *x, &dx);
                add_into(g, *w, &dw);
                add_into(g, *b, &db);
            }
            Op::Product {
                x,
                w1,
                b1,
                w2,
                b2,
                pre,
                gate,
            } => {
                let xv = val(*x);
                let (c, hw) = (xv.c, xv.hw());
                let mid = val(*b1).len();
                let mut dx: Vec<f64> = dy.iter().zip(gate).map(|(a, b)| a * b).collect();
                let dgate: Vec<f64> = dy.iter().zip(&xv.data).map(|(a, b)| a * b).collect();
                let act: Vec<f64> = pre.iter().map(|&v| silu(v)).collect();
                let (dact, dw2, db2) =
                    matmul_channels_backward(&act, mid, hw, &val(*w2).data, c, &dgate);
                let dpre: Vec<f64> = dact.iter().zip(pre).map(|(d, p)| d * silu_grad(*p)).collect();
                let (dx1, dw1, db1) =
                    matmul_channels_backward(&xv.data, c, hw, &val(*w1).data, mid, &dpre);
                for (a, b) in dx.iter_mut().zip(&dx1) {
                    *a += b;
                }
                add_into(g, *x, &dx);
                add_into(g, *w1, &dw1);
                add_into(g, *b1, &db1);
                add_into(g, *w2, &dw2);
                add_into(g, *b2, &db2);
            }
            Op::Add(a, b) => {
                add_into(g, *a, dy);
                add_into(g, *b, dy);
            }
            Op::Mul(a, b) => {
                let da: Vec<f64> = dy.iter().zip(&val(*b).data).map(|(d, v)| d * v).collect();
                let db: Vec<f64> = dy.iter().zip(&val(*a).data).map(|(d, v)| d * v).collect();
                add_into(g, *a, &da);
                add_into(g, *b, &db);
            }
            Op::AddChannel { x, v } => {
                let hw = node.value.hw();
                let dv: Vec<f64> = dy.chunks(hw).map(|c| c.iter().sum()).collect();
                add_into(g, *x, dy);
                add_into(g, *v, &dv);
            }
            Op::Axpby { a, alpha, b, beta } => {
                let da: Vec<f64> = dy.iter().map(|d| alpha * d).collect();
                let db: Vec<f64> = dy.iter().map(|d| beta * d).collect();
                add_into(g, *a, &da);
                add_into(g, *b, &db);
            }
            Op::Silu(a) => {
                let da: Vec<f64> = dy
                    .iter()
                    .zip(&val(*a).data)
                    .map(|(d, v)| d * silu_grad(*v))
                    .collect();
                add_into(g, *a, &da);
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean,
                rstd,
            } => {
                let xv = val(*x);
                let gv = &val(*gamma).data;
                let (c, hw) = (xv.c, xv.hw());
                let n = c / groups * hw;
                let mut dx = vec![0.0; xv.len()];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for grp in 0..*groups {
                    let (m, r) = (mean[grp], rstd[grp]);
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for k in grp * n..(grp + 1) * n {
                        let ch = k / hw;
                        let xhat = (xv.data[k] - m) * r;
                        let dxhat = dy[k] * gv[ch];
                        dgamma[ch] += dy[k] * xhat;
                        dbeta[ch] += dy[k];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                    }
                    let (mean_d, mean_dx) = (sum_dxhat / n as f64, sum_dxhat_xhat / n as f64);
                    for k in grp * n..(grp + 1) * n {
                        let xhat = (xv.data[k] - m) * r;
                        let dxhat = dy[k] * gv[k / hw];
                        dx[k] = r * (dxhat - mean_d - xhat * mean_dx);
                    }
                }
                add_into(g, *x, &dx);
                add_into(g, *gamma, &dgamma);
                add_into(g, *beta, &dbeta);
            }
            Op::AvgPool2(a) => {
                let (c, h, w) = val(*a).shape();
                let (h2, w2) = (h / 2, w / 2);
                let mut da = vec![0.0; c * h * w];
                for ch in 0..c {
                    for y in 0..h {
                        for x in 0..w {
                            da[(ch * h + y) * w + x] = 0.25 * dy[(ch * h2 + y / 2) * w2 + x / 2];
                        }
                    }
                }
                add_into(g, *a, &da);
            }
            Op::Upsample2(a) => {
                let (c, h, w) = val(*a).shape();
                let (h2, w2) = (2 * h, 2 * w);
                let mut da = vec![0.0; c * h * w];
                for ch in 0..c {
                    for y in 0..h2 {
                        for x in 0..w2 {
                            da[(ch * h + y / 2) * w + x / 2] += dy[(ch * h2 + y) * w2 + x];
                        }
                    }
                }
                add_into(g, *a, &da);
            }
            Op::Concat(a, b) => {
                let na = val(*a).len();
                add_into(g, *a, &dy[..na]);
                add_into(g, *b, &dy[na..]);
            }
            Op::Attention { q, k, v, probs } => {
                let (qv, kv, vv) = (val(*q), val(*k), val(*v));
                let c = qv.c;
                let (n, m) = (qv.hw(), kv.hw());
                let scale = 1.0 / (c as f64).sqrt();
                // dv[ch, j] = sum_i dy[ch, i] P[i, j]
                let mut dv = vec![0.0; c * m];
                for ch in 0..c {
                    let dyr = &dy[ch * n..(ch + 1) * n];
                    let dvr = &mut dv[ch * m..(ch + 1) * m];
                    for (i, d) in dyr.iter().enumerate() {
                        for (t, p) in dvr.iter_mut().zip(&probs[i * m..(i + 1) * m]) {
                            *t += d * p;
                        }
                    }
                }
                // dP[i, j] = sum_ch dy[ch, i] v[ch, j]; then softmax backward.
                let dyt = transpose(dy, c, n);
                let vt = transpose(&vv.data, c, m);
                let mut ds = vec![0.0; n * m];
                for i in 0..n {
                    let di = &dyt[i * c..(i + 1) * c];
                    let pr = &probs[i * m..(i + 1) * m];
                    let row = &mut ds[i * m..(i + 1) * m];
                    for (j, r) in row.iter_mut().enumerate() {
                        *r = dot(di, &vt[j * c..(j + 1) * c]);
                    }
                    let inner = dot(row, pr);
                    for (r, p) in row.iter_mut().zip(pr) {
                        *r = p * (*r - inner) * scale;
                    }
                }
                let qt = transpose(&qv.data, c, n);
                let kt = transpose(&kv.data, c, m);
                // dq[i, :] = sum_j dS[i, j] k[j, :]; dk[j, :] = sum_i dS[i, j] q[i, :]
                let mut dqt = vec![0.0; n * c];
                let mut dkt = vec![0.0; m * c];
                for i in 0..n {
                    let qi = &qt[i * c..(i + 1) * c];
                    for j in 0..m {
                        let s = ds[i * m + j];
                        if s == 0.0 {
                            continue;
                        }
                        for ch in 0..c {
                            dqt[i * c + ch] += s * kt[j * c + ch];
                            dkt[j * c + ch] += s * qi[ch];
                        }
                    }
                }
                add_into(g, *q, &transpose(&dqt, n, c));
                add_into(g, *k, &transpose(&dkt, m, c));
                add_into(g, *v, &dv);
            }
        }
    }
}

fn add_into(g: &mut [Option<Vec<f64>>], v: Var, d: &[f64]) {
    match &mut g[v.0] {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(d) {
                *a += b;
            }
        }
        slot => *slot = Some(d.to_vec()),
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `rows x cols` to `cols x rows`.
fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Calls `f(out_offset, in_offset, run)` for each row segment where tap
/// `(ky, kx)` of a padded 3x3 window reads inside an `h x w` plane.
fn for_each_tap(h: usize, w: usize, ky: usize, kx: usize, mut f: impl FnMut(usize, usize, usize)) {
    let (y0, y1) = (usize::from(ky == 0), (h + 1).saturating_sub(ky).min(h));
    let (x0, x1) = (usize::from(kx == 0), (w + 1).saturating_sub(kx).min(w));
    if x1 <= x0 {
        return;
    }
    for y in y0..y1 {
        let sy = y + ky - 1;
        f(y * w + x0, sy * w + x0 + kx - 1, x1 - x0);
    }
}

/// `out[co, p] = sum_ci w[co, ci] x[ci, p] + b[co]`.
fn matmul_channels(
    x: &[f64],
    cin: usize,
    hw: usize,
    w: &[f64],
    cout: usize,
    b: Option<&[f64]>,
) -> Vec<f64> {
    assert_eq!(w.len(), cout * cin, "pointwise weight shape");
    let mut out = vec![0.0; cout * hw];
    for co in 0..cout {
        let dst = &mut out[co * hw..(co + 1) * hw];
        if let Some(b) = b {
            dst.fill(b[co]);
        }
        for ci in 0..cin {
            let k = w[co * cin + ci];
            for (d, s) in dst.iter_mut().zip(&x[ci * hw..(ci + 1) * hw]) {
                *d += k * s;
            }
        }
    }
    out
}

/// Gradients of [`matmul_channels`] with respect to `x`, `w` and `b`.
fn matmul_channels_backward(
    x: &[f64],
    cin: usize,
    hw: usize,
    w: &[f64],
    cout: usize,
    dy: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0; cin * hw];
    let mut dw = vec![0.0; cout * cin];
    let mut db = vec![0.0; cout];
    for co in 0..cout {
        let d = &dy[co * hw..(co + 1) * hw];
        db[co] = d.iter().sum();
        for ci in 0..cin {
            let src = &x[ci * hw..(ci + 1) * hw];
            dw[co * cin + ci] = dot(d, src);
            let k = w[co * cin + ci];
            for (t, dv) in dx[ci * hw..(ci + 1) * hw].iter_mut().zip(d) {
                *t += k * dv;
            }
        }
    }
    (dx, dw, db)
}
