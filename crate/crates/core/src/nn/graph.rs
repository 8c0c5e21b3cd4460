//! Reverse-mode automatic differentiation over coarse tensor operations.
//!
//! A [`Graph`] is built per sample: every operation appends a node holding its
//! output and whatever the backward pass needs. Nodes are topologically
//! ordered by construction, so the backward sweep is a reverse scan.

use super::params::{ParamGrads, ParamId, ParamStore};
use super::real::{gemm_into, matmul, MatRef, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

const NORM_EPS: f64 = 1e-5;

enum Op<T> {
    Input,
    Param(ParamId),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Silu(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, T),
    AddChannel {
        x: Var,
        v: Var,
    },
    Concat0(Var, Var),
    Transpose {
        x: Var,
        rows: usize,
        cols: usize,
    },
    Reshape(Var),
    Upsample2x(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<T>,
    },
    Embed {
        table: Var,
        pos: Var,
        ids: Vec<usize>,
        mask: Vec<bool>,
        pad: usize,
    },
    Mse(Var, Var),
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    c_out: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

struct Node<T> {
    value: Vec<T>,
    shape: Vec<usize>,
    op: Op<T>,
    needs_grad: bool,
}

/// Per-sample computation graph reading parameters from a shared store.
pub struct Graph<'p, T: Real> {
    store: &'p ParamStore<T>,
    param_vars: Vec<Option<Var>>,
    nodes: Vec<Node<T>>,
    record: bool,
}

impl<'p, T: Real> Graph<'p, T> {
    /// Graph that records everything needed for [`Graph::backward`].
    pub fn new(store: &'p ParamStore<T>) -> Self {
        Self {
            store,
            param_vars: vec![None; store.len()],
            nodes: Vec::new(),
            record: true,
        }
    }

    /// Forward-only graph; backward buffers are not kept.
    pub fn inference(store: &'p ParamStore<T>) -> Self {
        Self {
            record: false,
            ..Self::new(store)
        }
    }

    pub fn store(&self) -> &'p ParamStore<T> {
        self.store
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<T>, shape: Vec<usize>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        self.nodes.push(Node {
            value,
            shape,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn input(&mut self, value: Vec<T>, shape: &[usize]) -> Var {
        assert_eq!(value.len(), shape.iter().product::<usize>(), "input shape");
        self.push(value, shape.to_vec(), Op::Input, false)
    }

    /// Leaf for a parameter; repeated requests share one node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let value = self.store.value(id).to_vec();
        let shape = self.store.shape(id).to_vec();
        let v = self.push(value, shape, Op::Param(id), true);
        self.param_vars[id.0] = Some(v);
        v
    }

    /// 2-D convolution of a `[C, H, W]` map with `w: [O, C, k, k]`, `b: [O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let xs = self.shape(x);
        assert_eq!(xs.len(), 3, "conv2d expects [C, H, W]");
        let ws = self.shape(w);
        assert_eq!(ws.len(), 4, "conv2d weight expects [O, C, k, k]");
        assert_eq!(ws[1], xs[0], "conv2d channel mismatch");
        assert_eq!(ws[2], ws[3], "square kernels only");
        let (c_in, h, wd) = (xs[0], xs[1], xs[2]);
        let (c_out, k) = (ws[0], ws[2]);
        assert_eq!(self.shape(b), &[c_out], "conv2d bias");
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let geom = ConvGeom {
            c_in,
            h,
            w: wd,
            k,
            stride,
            pad,
            ho,
            wo,
            c_out,
        };
        let p = ho * wo;
        let ckk = c_in * k * k;
        let cols = if geom.is_pointwise() {
            Vec::new()
        } else {
            im2col(self.value(x), &geom)
        };
        let mut out = vec![T::zero(); c_out * p];
        {
            let wv = self.value(w);
            let src: &[T] = if geom.is_pointwise() {
                self.value(x)
            } else {
                &cols
            };
            matmul(
                MatRef::new(wv, c_out, ckk),
                MatRef::new(src, ckk, p),
                &mut out,
                false,
            );
            let bv = self.value(b);
            for (o, row) in out.chunks_mut(p).enumerate() {
                let bias = bv[o];
                row.iter_mut().for_each(|v| *v += bias);
            }
        }
        let needs = self.ng(x) || self.ng(w) || self.ng(b);
        let cols = if self.record { cols } else { Vec::new() };
        self.push(
            out,
            vec![c_out, ho, wo],
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            },
            needs,
        )
    }

    /// `x: [N, Din]`, `w: [Dout, Din]`, optional `b: [Dout]` → `[N, Dout]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.shape(x);
        assert_eq!(xs.len(), 2, "linear expects [N, D]");
        let (n, din) = (xs[0], xs[1]);
        let ws = self.shape(w);
        assert_eq!(ws.len(), 2);
        assert_eq!(ws[1], din, "linear input width");
        let dout = ws[0];
        let mut out = vec![T::zero(); n * dout];
        matmul(
            MatRef::new(self.value(x), n, din),
            MatRef::new(self.value(w), dout, din).t(),
            &mut out,
            false,
        );
        if let Some(b) = b {
            assert_eq!(self.shape(b), &[dout], "linear bias");
            let bv = self.value(b);
            for row in out.chunks_mut(dout) {
                for (o, bb) in row.iter_mut().zip(bv) {
                    *o += *bb;
                }
            }
        }
        let needs = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(out, vec![n, dout], Op::Linear { x, w, b }, needs)
    }

    /// Group normalization of a channel-first tensor `[C, ...]`.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        let shape = self.shape(x).to_vec();
        let c = shape[0];
        assert!(
            groups > 0 && c % groups == 0,
            "channels {c} not divisible by {groups} groups"
        );
        let spatial = self.value(x).len() / c;
        let cpg = c / groups;
        let n = cpg * spatial;
        let xv = self.value(x);
        let (g, bt) = (self.value(gamma), self.value(beta));
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); groups];
        let mut out = vec![T::zero(); xv.len()];
        let inv_n = T::one() / T::lit(n as f64);
        for gi in 0..groups {
            let seg = gi * n..(gi + 1) * n;
            let xs = &xv[seg.clone()];
            let mean = xs.iter().copied().sum::<T>() * inv_n;
            let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
            let r = T::one() / (var + T::lit(NORM_EPS)).sqrt();
            rstd[gi] = r;
            for ci in 0..cpg {
                let ch = gi * cpg + ci;
                let span = ch * spatial..(ch + 1) * spatial;
                let (gc, bc) = (g[ch], bt[ch]);
                for ((o, xh), &v) in out[span.clone()]
                    .iter_mut()
                    .zip(&mut xhat[span.clone()])
                    .zip(&xv[span])
                {
                    *xh = (v - mean) * r;
                    *o = *xh * gc + bc;
                }
            }
        }
        let needs = self.ng(x) || self.ng(gamma) || self.ng(beta);
        let (xhat, rstd) = if self.record {
            (xhat, rstd)
        } else {
            (Vec::new(), Vec::new())
        };
        self.push(
            out,
            shape,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            },
            needs,
        )
    }

    /// Row-wise layer normalization of `[N, D]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let shape = self.shape(x).to_vec();
        assert_eq!(shape.len(), 2, "layer_norm expects [N, D]");
        let d = shape[1];
        let xv = self.value(x);
        let (g, bt) = (self.value(gamma), self.value(beta));
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); shape[0]];
        let mut out = vec![T::zero(); xv.len()];
        let inv_d = T::one() / T::lit(d as f64);
        for (r, row) in xv.chunks(d).enumerate() {
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = T::one() / (var + T::lit(NORM_EPS)).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * g[j] + bt[j];
            }
        }
        let needs = self.ng(x) || self.ng(gamma) || self.ng(beta);
        let (xhat, rstd) = if self.record {
            (xhat, rstd)
        } else {
            (Vec::new(), Vec::new())
        };
        self.push(
            out,
            shape,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            needs,
        )
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut e: Vec<T> = xv.iter().map(|&v| -v).collect();
        T::exp_in_place(&mut e);
        let out = xv
            .iter()
            .zip(&e)
            .map(|(&v, &en)| v / (T::one() + en))
            .collect();
        let shape = self.shape(x).to_vec();
        let needs = self.ng(x);
        self.push(out, shape, Op::Silu(x), needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(
            self.value(a).len(),
            self.value(b).len(),
            "add length mismatch"
        );
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&p, &q)| p + q)
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.ng(a) || self.ng(b);
        self.push(out, shape, Op::Add(a, b), needs)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(
            self.value(a).len(),
            self.value(b).len(),
            "sub length mismatch"
        );
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&p, &q)| p - q)
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.ng(a) || self.ng(b);
        self.push(out, shape, Op::Sub(a, b), needs)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).iter().map(|&v| v * c).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.ng(x);
        self.push(out, shape, Op::Scale(x, c), needs)
    }

    /// Adds `v` (one value per channel) to every position of channel-first `x`.
    pub fn add_channel(&mut self, x: Var, v: Var) -> Var {
        let c = self.shape(x)[0];
        assert_eq!(self.value(v).len(), c, "add_channel width");
        let per = self.value(x).len() / c;
        let vv = self.value(v);
        let out = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, &a)| a + vv[i / per])
            .collect();
        let shape = self.shape(x).to_vec();
        let needs = self.ng(x) || self.ng(v);
        self.push(out, shape, Op::AddChannel { x, v }, needs)
    }

    /// Concatenation along the leading axis (channels of `[C,H,W]`, rows of `[N,D]`).
    pub fn concat0(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert_eq!(sa[1..], sb[1..], "concat0 trailing dims");
        let mut shape = sa.to_vec();
        shape[0] += sb[0];
        let mut out = self.value(a).to_vec();
        out.extend_from_slice(self.value(b));
        let needs = self.ng(a) || self.ng(b);
        self.push(out, shape, Op::Concat0(a, b), needs)
    }

    /// Views `x` as `rows x cols` and returns its transpose with `out_shape`.
    fn transpose_as(&mut self, x: Var, rows: usize, cols: usize, out_shape: Vec<usize>) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.len(), rows * cols);
        let mut out = vec![T::zero(); xv.len()];
        for i in 0..rows {
            for j in 0..cols {
                out[j * rows + i] = xv[i * cols + j];
            }
        }
        let needs = self.ng(x);
        self.push(out, out_shape, Op::Transpose { x, rows, cols }, needs)
    }

    /// `[C, H, W]` feature map → `[H*W, C]` token matrix.
    pub fn to_tokens(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let (c, hw) = (s[0], s[1] * s[2]);
        self.transpose_as(x, c, hw, vec![hw, c])
    }

    /// `[H*W, C]` token matrix → `[C, H, W]` feature map.
    pub fn from_tokens(&mut self, x: Var, h: usize, w: usize) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s[0], h * w);
        let c = s[1];
        self.transpose_as(x, h * w, c, vec![c, h, w])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        assert_eq!(
            self.value(x).len(),
            shape.iter().product::<usize>(),
            "reshape size"
        );
        let out = self.value(x).to_vec();
        let needs = self.ng(x);
        self.push(out, shape.to_vec(), Op::Reshape(x), needs)
    }

    /// Nearest-neighbour 2x upsampling of `[C, H, W]`.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let (c, h, w) = (s[0], s[1], s[2]);
        let xv = self.value(x);
        let mut out = vec![T::zero(); c * 4 * h * w];
        for ch in 0..c {
            for i in 0..2 * h {
                for j in 0..2 * w {
                    out[(ch * 2 * h + i) * 2 * w + j] = xv[(ch * h + i / 2) * w + j / 2];
                }
            }
        }
        let needs = self.ng(x);
        self.push(out, vec![c, 2 * h, 2 * w], Op::Upsample2x(x), needs)
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q: [N, D]`, `k, v: [M, D]`, `D` split evenly over `heads`. Keys whose
    /// `key_mask` entry is false receive zero weight. When every key is
    /// masked the result is exactly zero.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        key_mask: Option<&[bool]>,
    ) -> Var {
        let (qs, ks, vs) = (
            self.shape(q).to_vec(),
            self.shape(k).to_vec(),
            self.shape(v).to_vec(),
        );
        assert!(
            qs.len() == 2 && ks.len() == 2 && vs.len() == 2,
            "attention expects 2-D operands"
        );
        let (n, d) = (qs[0], qs[1]);
        let m = ks[0];
        assert_eq!(ks[1], d, "key width");
        assert_eq!(vs, ks, "value shape");
        assert!(
            heads > 0 && d % heads == 0,
            "width {d} not divisible by {heads} heads"
        );
        if let Some(mask) = key_mask {
            assert_eq!(mask.len(), m, "key mask length");
        }
        let dh = d / heads;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let mut probs = vec![T::zero(); heads * n * m];
        let mut out = vec![T::zero(); n * d];
        let any_key = key_mask.is_none_or(|mk| mk.iter().any(|&b| b));
        if any_key && m > 0 {
            let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
            for h in 0..heads {
                let p = &mut probs[h * n * m..(h + 1) * n * m];
                let qh = MatRef::strided(&qv[h * dh..], n, dh, d, 1);
                let kh = MatRef::strided(&kv[h * dh..], m, dh, d, 1);
                matmul(qh, kh.t(), p, false);
                for row in p.chunks_mut(m) {
                    softmax_row(row, scale, key_mask);
                }
                let vh = MatRef::strided(&vv[h * dh..], m, dh, d, 1);
                gemm_into(MatRef::new(p, n, m), vh, &mut out[h * dh..], d, 1, false);
            }
        }
        let needs = self.ng(q) || self.ng(k) || self.ng(v);
        let probs = if self.record { probs } else { Vec::new() };
        self.push(
            out,
            vec![n, d],
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            needs,
        )
    }

    /// Softmax weights `[heads, N, M]` of a recorded attention node.
    pub fn attention_probs(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } if self.record => Some(probs),
            _ => None,
        }
    }

    /// Token embedding lookup: unmasked rows get `table[id] + pos[i]`,
    /// masked rows get exactly `table[pad]`.
    pub fn embed(&mut self, table: Var, pos: Var, ids: &[usize], mask: &[bool], pad: usize) -> Var {
        let ts = self.shape(table).to_vec();
        let ps = self.shape(pos).to_vec();
        let d = ts[1];
        assert_eq!(ps[1], d, "positional width");
        assert_eq!(ids.len(), mask.len());
        assert!(ids.len() <= ps[0], "sequence longer than positional table");
        let (tv, pv) = (self.value(table), self.value(pos));
        let mut out = Vec::with_capacity(ids.len() * d);
        for (i, (&id, &m)) in ids.iter().zip(mask).enumerate() {
            assert!(id < ts[0], "token id {id} outside table");
            if m {
                out.extend(
                    tv[id * d..(id + 1) * d]
                        .iter()
                        .zip(&pv[i * d..(i + 1) * d])
                        .map(|(&a, &b)| a + b),
                );
            } else {
                out.extend_from_slice(&tv[pad * d..(pad + 1) * d]);
            }
        }
        let needs = self.ng(table) || self.ng(pos);
        let op = Op::Embed {
            table,
            pos,
            ids: ids.to_vec(),
            mask: mask.to_vec(),
            pad,
        };
        self.push(out, vec![ids.len(), d], op, needs)
    }

    /// Mean squared error between two equally sized tensors, as a `[1]` scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.len(), bv.len(), "mse length mismatch");
        let n = T::lit(av.len() as f64);
        let s = av
            .iter()
            .zip(bv)
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum::<T>()
            / n;
        let needs = self.ng(a) || self.ng(b);
        self.push(vec![s], vec![1], Op::Mse(a, b), needs)
    }

    /// Backpropagates from the scalar `loss` and accumulates parameter gradients.
    pub fn backward(&self, loss: Var, grads: &mut ParamGrads<T>) {
        assert!(self.record, "backward on an inference graph");
        assert_eq!(self.value(loss).len(), 1, "backward from a non-scalar");
        let mut g: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        g[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(gy) = g[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.backward_node(node, gy, &mut g, grads);
        }
    }

    fn acc<'a>(&self, g: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut Vec<T>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(g[v.0].get_or_insert_with(|| vec![T::zero(); len]))
    }

    fn backward_node(
        &self,
        node: &Node<T>,
        gy: Vec<T>,
        g: &mut [Option<Vec<T>>],
        grads: &mut ParamGrads<T>,
    ) {
        match &node.op {
            Op::Input => {}
            Op::Param(id) => {
                for (d, s) in grads.tensors[id.0].iter_mut().zip(&gy) {
                    *d += *s;
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            } => {
                let p = geom.ho * geom.wo;
                let ckk = geom.c_in * geom.k * geom.k;
                let src: &[T] = if geom.is_pointwise() {
                    self.value(*x)
                } else {
                    cols
                };
                if let Some(gw) = self.acc(g, *w) {
                    matmul(
                        MatRef::new(&gy, geom.c_out, p),
                        MatRef::new(src, ckk, p).t(),
                        gw,
                        true,
                    );
                }
                if let Some(gb) = self.acc(g, *b) {
                    for (o, row) in gy.chunks(p).enumerate() {
                        gb[o] += row.iter().copied().sum::<T>();
                    }
                }
                if self.ng(*x) {
                    let wv = self.value(*w);
                    if geom.is_pointwise() {
                        let gx = self.acc(g, *x).expect("needs grad");
                        matmul(
                            MatRef::new(wv, geom.c_out, ckk).t(),
                            MatRef::new(&gy, geom.c_out, p),
                            gx,
                            true,
                        );
                    } else {
                        let mut dcols = vec![T::zero(); ckk * p];
                        matmul(
                            MatRef::new(wv, geom.c_out, ckk).t(),
                            MatRef::new(&gy, geom.c_out, p),
                            &mut dcols,
                            false,
                        );
                        let gx = self.acc(g, *x).expect("needs grad");
                        col2im_add(&dcols, geom, gx);
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let xs = self.shape(*x);
                let (n, din) = (xs[0], xs[1]);
                let dout = node.shape[1];
                if let Some(gw) = self.acc(g, *w) {
                    matmul(
                        MatRef::new(&gy, n, dout).t(),
                        MatRef::new(self.value(*x), n, din),
                        gw,
                        true,
                    );
                }
                if let Some(b) = b {
                    if let Some(gb) = self.acc(g, *b) {
                        for row in gy.chunks(dout) {
                            for (d, s) in gb.iter_mut().zip(row) {
                                *d += *s;
                            }
                        }
                    }
                }
                if let Some(gx) = self.acc(g, *x) {
                    matmul(
                        MatRef::new(&gy, n, dout),
                        MatRef::new(self.value(*w), dout, din),
                        gx,
                        true,
                    );
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            } => {
                let c = node.shape[0];
                let spatial = gy.len() / c;
                let cpg = c / groups;
                let n = cpg * spatial;
                let gam = self.value(*gamma);
                if let Some(gg) = self.acc(g, *gamma) {
                    for (ch, (d, xh)) in gy.chunks(spatial).zip(xhat.chunks(spatial)).enumerate() {
                        gg[ch] += d.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>();
                    }
                }
                if let Some(gb) = self.acc(g, *beta) {
                    for (ch, d) in gy.chunks(spatial).enumerate() {
                        gb[ch] += d.iter().copied().sum::<T>();
                    }
                }
                if let Some(gx) = self.acc(g, *x) {
                    let inv_n = T::one() / T::lit(n as f64);
                    for gi in 0..*groups {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for ch in gi * cpg..(gi + 1) * cpg {
                            let span = ch * spatial..(ch + 1) * spatial;
                            let gc = gam[ch];
                            for (&d, &xh) in gy[span.clone()].iter().zip(&xhat[span]) {
                                s1 += d * gc;
                                s2 += d * gc * xh;
                            }
                        }
                        let (m1, m2) = (s1 * inv_n, s2 * inv_n);
                        let r = rstd[gi];
                        for ch in gi * cpg..(gi + 1) * cpg {
                            let span = ch * spatial..(ch + 1) * spatial;
                            let gc = gam[ch];
                            for ((o, &d), &xh) in gx[span.clone()]
                                .iter_mut()
                                .zip(&gy[span.clone()])
                                .zip(&xhat[span])
                            {
                                *o += r * (d * gc - m1 - xh * m2);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = node.shape[1];
                let gam = self.value(*gamma);
                if let Some(gg) = self.acc(g, *gamma) {
                    for (i, (&dy, &xh)) in gy.iter().zip(xhat).enumerate() {
                        gg[i % d] += dy * xh;
                    }
                }
                if let Some(gb) = self.acc(g, *beta) {
                    for (i, &dy) in gy.iter().enumerate() {
                        gb[i % d] += dy;
                    }
                }
                if let Some(gx) = self.acc(g, *x) {
                    let inv_d = T::one() / T::lit(d as f64);
                    for r in 0..rstd.len() {
                        let seg = r * d..(r + 1) * d;
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for idx in seg.clone() {
                            let dxh = gy[idx] * gam[idx % d];
                            s1 += dxh;
                            s2 += dxh * xhat[idx];
                        }
                        let (m1, m2) = (s1 * inv_d, s2 * inv_d);
                        for idx in seg {
                            let dxh = gy[idx] * gam[idx % d];
                            gx[idx] += rstd[r] * (dxh - m1 - xhat[idx] * m2);
                        }
                    }
                }
            }
            Op::Silu(x) => {
                let xv = self.value(*x);
                if let Some(gx) = self.acc(g, *x) {
                    let mut e: Vec<T> = xv.iter().map(|&v| -v).collect();
                    T::exp_in_place(&mut e);
                    for (((d, &dy), &v), &en) in gx.iter_mut().zip(&gy).zip(xv).zip(&e) {
                        let s = T::one() / (T::one() + en);
                        *d += dy * s * (T::one() + v * (T::one() - s));
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = self.acc(g, *a) {
                    add_into(ga, &gy);
                }
                if let Some(gb) = self.acc(g, *b) {
                    add_into(gb, &gy);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.acc(g, *a) {
                    add_into(ga, &gy);
                }
                if let Some(gb) = self.acc(g, *b) {
                    for (d, &s) in gb.iter_mut().zip(&gy) {
                        *d -= s;
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(gx) = self.acc(g, *x) {
                    for (d, &s) in gx.iter_mut().zip(&gy) {
                        *d += s * *c;
                    }
                }
            }
            Op::AddChannel { x, v } => {
                if let Some(gx) = self.acc(g, *x) {
                    add_into(gx, &gy);
                }
                let c = node.shape[0];
                let per = gy.len() / c;
                if let Some(gv) = self.acc(g, *v) {
                    for (ch, row) in gy.chunks(per).enumerate() {
                        gv[ch] += row.iter().copied().sum::<T>();
                    }
                }
            }
            Op::Concat0(a, b) => {
                let na = self.value(*a).len();
                if let Some(ga) = self.acc(g, *a) {
                    add_into(ga, &gy[..na]);
                }
                if let Some(gb) = self.acc(g, *b) {
                    add_into(gb, &gy[na..]);
                }
            }
            Op::Transpose { x, rows, cols } => {
                if let Some(gx) = self.acc(g, *x) {
                    for i in 0..*rows {
                        for j in 0..*cols {
                            gx[i * cols + j] += gy[j * rows + i];
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = self.acc(g, *x) {
                    add_into(gx, &gy);
                }
            }
            Op::Upsample2x(x) => {
                let (c, h2, w2) = (node.shape[0], node.shape[1], node.shape[2]);
                let (h, w) = (h2 / 2, w2 / 2);
                if let Some(gx) = self.acc(g, *x) {
                    for ch in 0..c {
                        for i in 0..h2 {
                            for j in 0..w2 {
                                gx[(ch * h + i / 2) * w + j / 2] += gy[(ch * h2 + i) * w2 + j];
                            }
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let (n, d) = (node.shape[0], node.shape[1]);
                let m = self.shape(*k)[0];
                let dh = d / heads;
                let scale = T::one() / T::lit(dh as f64).sqrt();
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let mut ds = vec![T::zero(); n * m];
                for h in 0..*heads {
                    let p = &probs[h * n * m..(h + 1) * n * m];
                    let goh = MatRef::strided(&gy[h * dh..], n, dh, d, 1);
                    if let Some(gv) = self.acc(g, *v) {
                        gemm_into(MatRef::new(p, n, m).t(), goh, &mut gv[h * dh..], d, 1, true);
                    }
                    if !(self.ng(*q) || self.ng(*k)) {
                        continue;
                    }
                    let vh = MatRef::strided(&vv[h * dh..], m, dh, d, 1);
                    matmul(goh, vh.t(), &mut ds, false);
                    for (drow, prow) in ds.chunks_mut(m).zip(p.chunks(m)) {
                        let dot = drow.iter().zip(prow).map(|(&a, &b)| a * b).sum::<T>();
                        for (dv, &pv) in drow.iter_mut().zip(prow) {
                            *dv = pv * (*dv - dot) * scale;
                        }
                    }
                    if let Some(gq) = self.acc(g, *q) {
                        let kh = MatRef::strided(&kv[h * dh..], m, dh, d, 1);
                        gemm_into(MatRef::new(&ds, n, m), kh, &mut gq[h * dh..], d, 1, true);
                    }
                    if let Some(gk) = self.acc(g, *k) {
                        let qh = MatRef::strided(&qv[h * dh..], n, dh, d, 1);
                        gemm_into(
                            MatRef::new(&ds, n, m).t(),
                            qh,
                            &mut gk[h * dh..],
                            d,
                            1,
                            true,
                        );
                    }
                }
            }
            Op::Embed {
                table,
                pos,
                ids,
                mask,
                pad,
            } => {
                let d = node.shape[1];
                if let Some(gt) = self.acc(g, *table) {
                    for (i, (&id, &m)) in ids.iter().zip(mask).enumerate() {
                        let row = if m { id } else { *pad };
                        add_into(&mut gt[row * d..(row + 1) * d], &gy[i * d..(i + 1) * d]);
                    }
                }
                if let Some(gp) = self.acc(g, *pos) {
                    for (i, &m) in mask.iter().enumerate() {
                        if m {
                            add_into(&mut gp[i * d..(i + 1) * d], &gy[i * d..(i + 1) * d]);
                        }
                    }
                }
            }
            Op::Mse(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let c = gy[0] * T::lit(2.0) / T::lit(av.len() as f64);
                if let Some(ga) = self.acc(g, *a) {
                    for ((d, &x), &y) in ga.iter_mut().zip(av).zip(bv) {
                        *d += c * (x - y);
                    }
                }
                if let Some(gb) = self.acc(g, *b) {
                    for ((d, &x), &y) in gb.iter_mut().zip(av).zip(bv) {
                        *d -= c * (x - y);
                    }
                }
            }
        }
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Masked, scaled softmax of one score row, in place. A fully masked row
/// becomes all zeros.
fn softmax_row<T: Real>(row: &mut [T], scale: T, mask: Option<&[bool]>) {
    let keep = |j: usize| mask.is_none_or(|m| m[j]);
    let mut max = T::neg_infinity();
    for (j, v) in row.iter_mut().enumerate() {
        *v *= scale;
        if keep(j) && *v > max {
            max = *v;
        }
    }
    if max == T::neg_infinity() {
        row.iter_mut().for_each(|v| *v = T::zero());
        return;
    }
    row.iter_mut().for_each(|v| *v -= max);
    T::exp_in_place(row);
    if let Some(m) = mask {
        for (v, &k) in row.iter_mut().zip(m) {
            if !k {
                *v = T::zero();
            }
        }
    }
    let sum: T = row.iter().copied().sum();
    let inv = T::one() / sum;
    row.iter_mut().for_each(|v| *v *= inv);
}

/// Output columns `[lo, hi)` whose input column `ox * stride + kx - pad` is in range.
fn valid_cols(g: &ConvGeom, kx: usize) -> (usize, usize) {
    let lo = g.pad.saturating_sub(kx).div_ceil(g.stride);
    let hi = if g.w + g.pad > kx {
        ((g.w + g.pad - kx - 1) / g.stride + 1).min(g.wo)
    } else {
        0
    };
    (lo, hi.max(lo))
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let p = g.ho * g.wo;
    let mut cols = vec![T::zero(); g.c_in * g.k * g.k * p];
    for c in 0..g.c_in {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                let (lo, hi) = valid_cols(g, kx);
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize || lo >= hi {
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..(c * g.h + iy as usize + 1) * g.w];
                    let d = &mut dst[oy * g.wo + lo..oy * g.wo + hi];
                    let first = lo * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        d.copy_from_slice(&src[first..first + (hi - lo)]);
                    } else {
                        for (i, v) in d.iter_mut().enumerate() {
                            *v = src[first + i * g.stride];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add<T: Real>(cols: &[T], g: &ConvGeom, gx: &mut [T]) {
    let p = g.ho * g.wo;
    for c in 0..g.c_in {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * p..(row + 1) * p];
                let (lo, hi) = valid_cols(g, kx);
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize || lo >= hi {
                        continue;
                    }
                    let base = (c * g.h + iy as usize) * g.w + lo * g.stride + kx - g.pad;
                    let s = &src[oy * g.wo + lo..oy * g.wo + hi];
                    if g.stride == 1 {
                        for (d, v) in gx[base..base + s.len()].iter_mut().zip(s) {
                            *d += *v;
                        }
                    } else {
                        for (i, v) in s.iter().enumerate() {
                            gx[base + i * g.stride] += *v;
                        }
                    }
                }
            }
        }
    }
}
