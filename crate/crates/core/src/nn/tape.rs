//! Reverse-mode autodiff over a fixed set of NCHW layer ops.
//!
//! Every op records what its backward pass needs. `Tape::backward` walks the
//! nodes in reverse and accumulates gradients into parameter-shaped buffers.

use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::scalar::Scalar;

const GN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Input,
    Param(ParamId),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        // unfolded input, kept when the tape records for training
        cols: Option<Vec<T>>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        // per (sample, group)
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    Silu(Var),
    Add(Var, Var),
    AddBroadcast {
        x: Var,
        e: Var,
    },
    Concat(Var, Var),
    AvgPool2(Var),
    Upsample2(Var),
    Attention {
        qkv: Var,
        heads: usize,
        // softmax weights, per (sample, head), L x L
        probs: Vec<T>,
    },
}

struct Node<T> {
    op: Op<T>,
    // None for parameters, which are read from the store
    value: Option<Tensor<T>>,
}

pub struct Tape<'p, T: Scalar> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    keep_cols: bool,
}

/// Result of a backward pass.
pub struct Gradients<T> {
    /// One entry per parameter in store order (zeros when unused).
    pub params: Vec<Tensor<T>>,
    /// Gradients of `Input` nodes, by variable.
    pub inputs: Vec<(Var, Tensor<T>)>,
}

fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - k) / stride + 1
}

/// Valid output range `[lo, hi)` along one axis for kernel offset `kk`.
fn valid_range(out: usize, size: usize, kk: usize, stride: usize, pad: usize) -> (usize, usize) {
    // need 0 <= o*stride + kk - pad < size
    let lo = if pad > kk { (pad - kk).div_ceil(stride) } else { 0 };
    let hi = if size + pad > kk { (size + pad - kk).div_ceil(stride).min(out) } else { 0 };
    (lo.min(hi), hi)
}

/// Unfold `x` into a `(ci*k*k) x (n*oh*ow)` matrix.
fn im2col<T: Scalar>(x: &Tensor<T>, k: usize, stride: usize, pad: usize) -> (Vec<T>, usize, usize) {
    let [n, ci, h, w] = x.shape();
    let (oh, ow) = (conv_out(h, k, stride, pad), conv_out(w, k, stride, pad));
    let cols_n = n * oh * ow;
    if k == 1 && stride == 1 && pad == 0 {
        // plain channel-major transpose of the batch
        let mut cols = Vec::with_capacity(ci * cols_n);
        for c in 0..ci {
            for b in 0..n {
                cols.extend_from_slice(&x.data()[(b * ci + c) * h * w..(b * ci + c + 1) * h * w]);
            }
        }
        return (cols, oh, ow);
    }
    let mut cols = vec![T::zero(); ci * k * k * cols_n];
    let xd = x.data();
    for c in 0..ci {
        for ky in 0..k {
            let (oy_lo, oy_hi) = valid_range(oh, h, ky, stride, pad);
            for kx in 0..k {
                let (ox_lo, ox_hi) = valid_range(ow, w, kx, stride, pad);
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * cols_n..(row + 1) * cols_n];
                for b in 0..n {
                    let plane = &xd[(b * ci + c) * h * w..(b * ci + c + 1) * h * w];
                    for oy in oy_lo..oy_hi {
                        let iy = oy * stride + ky - pad;
                        let base = (b * oh + oy) * ow;
                        let src = &plane[iy * w..(iy + 1) * w];
                        if stride == 1 {
                            let ix0 = ox_lo + kx - pad;
                            dst[base + ox_lo..base + ox_hi].copy_from_slice(&src[ix0..ix0 + ox_hi - ox_lo]);
                        } else {
                            for ox in ox_lo..ox_hi {
                                dst[base + ox] = src[ox * stride + kx - pad];
                            }
                        }
                    }
                }
            }
        }
    }
    (cols, oh, ow)
}

/// Fold a column-gradient matrix back onto an input-shaped buffer.
#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(cols: &[T], shape: [usize; 4], k: usize, stride: usize, pad: usize, oh: usize, ow: usize, dx: &mut [T]) {
    let [n, ci, h, w] = shape;
    let cols_n = n * oh * ow;
    for c in 0..ci {
        for ky in 0..k {
            let (oy_lo, oy_hi) = valid_range(oh, h, ky, stride, pad);
            for kx in 0..k {
                let (ox_lo, ox_hi) = valid_range(ow, w, kx, stride, pad);
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * cols_n..(row + 1) * cols_n];
                for b in 0..n {
                    let plane = &mut dx[(b * ci + c) * h * w..(b * ci + c + 1) * h * w];
                    for oy in oy_lo..oy_hi {
                        let iy = oy * stride + ky - pad;
                        let base = (b * oh + oy) * ow;
                        let dst = &mut plane[iy * w..(iy + 1) * w];
                        for ox in ox_lo..ox_hi {
                            dst[ox * stride + kx - pad] += src[base + ox];
                        }
                    }
                }
            }
        }
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<'p, T: Scalar> Tape<'p, T> {
    /// Tape for a forward pass that will be differentiated.
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
            keep_cols: true,
        }
    }

    /// Forward-only tape; `backward` still works but recomputes conv inputs.
    pub fn inference(params: &'p ParamStore<T>) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
            keep_cols: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>) -> Var {
        self.nodes.push(Node { op, value: Some(value) });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        let node = &self.nodes[v.0];
        match (&node.op, &node.value) {
            (Op::Param(id), _) => self.params.get(*id),
            (_, Some(t)) => t,
            (_, None) => unreachable!("non-parameter node without value"),
        }
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(Op::Input, t)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// 2-D convolution; weight `[co, ci, k, k]`, bias `[co, 1, 1, 1]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let [n, ci, _, _] = xv.shape();
        let [co, wci, k, _] = wv.shape();
        assert_eq!(ci, wci, "conv2d channel mismatch");
        let (cols, oh, ow) = im2col(xv, k, stride, pad);
        let cols_n = n * oh * ow;
        let mut out_mat = vec![T::zero(); co * cols_n];
        T::gemm(co, ci * k * k, cols_n, T::one(), wv.data(), false, &cols, false, T::zero(), &mut out_mat);
        let bias = self.value(b).data();
        let hw = oh * ow;
        let mut out = Tensor::zeros([n, co, oh, ow]);
        let od = out.data_mut();
        for o in 0..co {
            let bo = bias[o];
            for s in 0..n {
                let src = &out_mat[o * cols_n + s * hw..o * cols_n + (s + 1) * hw];
                let dst = &mut od[(s * co + o) * hw..(s * co + o + 1) * hw];
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d = v + bo;
                }
            }
        }
        let cols = self.keep_cols.then_some(cols);
        self.push(
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                cols,
            },
            out,
        )
    }

    /// Dense layer on `[n, in, 1, 1]`; weight `[out, in, 1, 1]`, bias `[out, 1, 1, 1]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let n = xv.n();
        let fin = xv.c() * xv.h() * xv.w();
        let fout = wv.n();
        assert_eq!(wv.c(), fin, "linear input mismatch");
        let mut out = vec![T::zero(); n * fout];
        T::gemm(n, fin, fout, T::one(), xv.data(), false, wv.data(), true, T::zero(), &mut out);
        let bias = self.value(b).data();
        for row in out.chunks_mut(fout) {
            for (o, &bb) in row.iter_mut().zip(bias) {
                *o += bb;
            }
        }
        self.push(Op::Linear { x, w, b }, Tensor::from_vec([n, fout, 1, 1], out))
    }

    /// Group normalisation with per-channel affine `[c, 1, 1, 1]` parameters.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        let xv = self.value(x);
        let [n, c, h, w] = xv.shape();
        assert_eq!(c % groups, 0, "channels not divisible by groups");
        let cpg = c / groups;
        let m = cpg * h * w;
        let eps = T::from_f64_lossy(GN_EPS);
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut out = Tensor::zeros([n, c, h, w]);
        let mut means = Vec::with_capacity(n * groups);
        let mut rstds = Vec::with_capacity(n * groups);
        let xd = xv.data();
        let od = out.data_mut();
        let mf = T::from_usize(m).unwrap();
        for s in 0..n {
            for gi in 0..groups {
                let start = (s * c + gi * cpg) * h * w;
                let chunk = &xd[start..start + m];
                let mean = chunk.iter().copied().sum::<T>() / mf;
                let var = chunk.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / mf;
                let rstd = T::one() / (var + eps).sqrt();
                for cc in 0..cpg {
                    let ch = gi * cpg + cc;
                    let off = start + cc * h * w;
                    for i in 0..h * w {
                        od[off + i] = (xd[off + i] - mean) * rstd * g[ch] + bt[ch];
                    }
                }
                means.push(mean);
                rstds.push(rstd);
            }
        }
        self.push(
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean: means,
                rstd: rstds,
            },
            out,
        )
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut out = xv.clone();
        for v in out.data_mut() {
            *v = *v * sigmoid(*v);
        }
        self.push(Op::Silu(x), out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(Op::Add(a, b), out)
    }

    /// `x[n, c, h, w] + e[n, c, 1, 1]`.
    pub fn add_broadcast(&mut self, x: Var, e: Var) -> Var {
        let xv = self.value(x);
        let ev = self.value(e);
        let [n, c, h, w] = xv.shape();
        assert_eq!(ev.shape(), [n, c, 1, 1], "broadcast shape mismatch");
        let mut out = xv.clone();
        let hw = h * w;
        let ed = ev.data();
        for (i, chunk) in out.data_mut().chunks_mut(hw).enumerate() {
            let add = ed[i];
            for v in chunk {
                *v += add;
            }
        }
        self.push(Op::AddBroadcast { x, e }, out)
    }

    /// Channel concatenation.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let [n, ca, h, w] = av.shape();
        let [nb, cb, hb, wb] = bv.shape();
        assert!(n == nb && h == hb && w == wb, "concat shape mismatch");
        let mut data = Vec::with_capacity(n * (ca + cb) * h * w);
        for s in 0..n {
            data.extend_from_slice(av.sample(s));
            data.extend_from_slice(bv.sample(s));
        }
        self.push(Op::Concat(a, b), Tensor::from_vec([n, ca + cb, h, w], data))
    }

    /// 2x2 average pooling.
    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let [n, c, h, w] = xv.shape();
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Tensor::zeros([n, c, oh, ow]);
        let quarter = T::from_f64_lossy(0.25);
        let xd = xv.data();
        for (p, dst) in out.data_mut().chunks_mut(oh * ow).enumerate() {
            let src = &xd[p * h * w..(p + 1) * h * w];
            for y in 0..oh {
                for xx in 0..ow {
                    let i = 2 * y * w + 2 * xx;
                    dst[y * ow + xx] = (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]) * quarter;
                }
            }
        }
        self.push(Op::AvgPool2(x), out)
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let [n, c, h, w] = xv.shape();
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = Tensor::zeros([n, c, oh, ow]);
        let xd = xv.data();
        for (p, dst) in out.data_mut().chunks_mut(oh * ow).enumerate() {
            let src = &xd[p * h * w..(p + 1) * h * w];
            for y in 0..oh {
                for xx in 0..ow {
                    dst[y * ow + xx] = src[(y / 2) * w + xx / 2];
                }
            }
        }
        self.push(Op::Upsample2(x), out)
    }

    /// Multi-head self-attention core. `qkv` is `[n, 3c, h, w]` holding the
    /// query, key and value projections; returns `[n, c, h, w]`.
    pub fn attention(&mut self, qkv: Var, heads: usize) -> Var {
        let v = self.value(qkv);
        let [n, c3, h, w] = v.shape();
        assert_eq!(c3 % 3, 0, "qkv channels must be a multiple of 3");
        let c = c3 / 3;
        assert_eq!(c % heads, 0, "channels not divisible by heads");
        let d = c / heads;
        let l = h * w;
        let scale = T::one() / T::from_usize(d).unwrap().sqrt();
        let mut out = Tensor::zeros([n, c, h, w]);
        let mut probs = vec![T::zero(); n * heads * l * l];
        let od = out.data_mut();
        for s in 0..n {
            let sample = v.sample(s);
            for hd in 0..heads {
                let q = &sample[(hd * d) * l..(hd * d + d) * l];
                let k = &sample[(c + hd * d) * l..(c + hd * d + d) * l];
                let vv = &sample[(2 * c + hd * d) * l..(2 * c + hd * d + d) * l];
                let a = &mut probs[(s * heads + hd) * l * l..(s * heads + hd + 1) * l * l];
                // scores[i, j] = scale * sum_d q[d, i] k[d, j]
                T::gemm(l, d, l, scale, q, true, k, false, T::zero(), a);
                for row in a.chunks_mut(l) {
                    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
                    let mut sum = T::zero();
                    for x in row.iter_mut() {
                        *x = (*x - mx).exp();
                        sum += *x;
                    }
                    for x in row.iter_mut() {
                        *x /= sum;
                    }
                }
                // out[d, i] = sum_j v[d, j] a[i, j]
                let dst = &mut od[(s * c + hd * d) * l..(s * c + hd * d + d) * l];
                T::gemm(d, l, l, T::one(), vv, false, a, true, T::zero(), dst);
            }
        }
        self.push(Op::Attention { qkv, heads, probs }, out)
    }

    /// Backpropagate `grad_out` from `out` through the recorded graph.
    pub fn backward(&self, out: Var, grad_out: Tensor<T>) -> Gradients<T> {
        assert_eq!(grad_out.shape(), self.value(out).shape(), "output gradient shape mismatch");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(grad_out);
        let mut param_grads = self.params.zeros_like();
        let mut input_grads = Vec::new();

        for idx in (0..=out.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            match &self.nodes[idx].op {
                Op::Input => input_grads.push((Var(idx), g)),
                Op::Param(id) => param_grads[id.0].add_assign(&g),
                Op::Conv2d {
                    x,
                    w,
                    b,
                    stride,
                    pad,
                    cols,
                } => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    let [n, ci, h, wd] = xv.shape();
                    let [co, _, k, _] = wv.shape();
                    let recomputed;
                    let (cols, oh, ow) = match cols {
                        Some(c) => (c, conv_out(h, k, *stride, *pad), conv_out(wd, k, *stride, *pad)),
                        None => {
                            recomputed = im2col(xv, k, *stride, *pad);
                            (&recomputed.0, recomputed.1, recomputed.2)
                        }
                    };
                    let hw = oh * ow;
                    let cols_n = n * hw;
                    let mut gmat = vec![T::zero(); co * cols_n];
                    let gd = g.data();
                    let mut db = Tensor::zeros([co, 1, 1, 1]);
                    for o in 0..co {
                        let mut acc = T::zero();
                        for s in 0..n {
                            let src = &gd[(s * co + o) * hw..(s * co + o + 1) * hw];
                            gmat[o * cols_n + s * hw..o * cols_n + (s + 1) * hw].copy_from_slice(src);
                            acc += src.iter().copied().sum::<T>();
                        }
                        db.data_mut()[o] = acc;
                    }
                    let kk = ci * k * k;
                    let mut dw = Tensor::zeros(wv.shape());
                    T::gemm(co, cols_n, kk, T::one(), &gmat, false, cols, true, T::zero(), dw.data_mut());
                    let mut dcols = vec![T::zero(); kk * cols_n];
                    T::gemm(kk, co, cols_n, T::one(), wv.data(), true, &gmat, false, T::zero(), &mut dcols);
                    let mut dx = Tensor::zeros(xv.shape());
                    col2im(&dcols, xv.shape(), k, *stride, *pad, oh, ow, dx.data_mut());
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *w, dw);
                    accumulate(&mut grads, *b, db);
                }
                Op::Linear { x, w, b } => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    let n = xv.n();
                    let fin = wv.c();
                    let fout = wv.n();
                    let mut dx = Tensor::zeros(xv.shape());
                    T::gemm(n, fout, fin, T::one(), g.data(), false, wv.data(), false, T::zero(), dx.data_mut());
                    let mut dw = Tensor::zeros(wv.shape());
                    T::gemm(fout, n, fin, T::one(), g.data(), true, xv.data(), false, T::zero(), dw.data_mut());
                    let mut db = Tensor::zeros([fout, 1, 1, 1]);
                    for row in g.data().chunks(fout) {
                        for (d, &v) in db.data_mut().iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *w, dw);
                    accumulate(&mut grads, *b, db);
                }
                Op::GroupNorm {
                    x,
                    gamma,
                    beta,
                    groups,
                    mean,
                    rstd,
                } => {
                    let xv = self.value(*x);
                    let [n, c, h, w] = xv.shape();
                    let cpg = c / groups;
                    let hw = h * w;
                    let m = T::from_usize(cpg * hw).unwrap();
                    let gam = self.value(*gamma).data();
                    let mut dx = Tensor::zeros(xv.shape());
                    let mut dgamma = Tensor::zeros([c, 1, 1, 1]);
                    let mut dbeta = Tensor::zeros([c, 1, 1, 1]);
                    let xd = xv.data();
                    let gd = g.data();
                    for s in 0..n {
                        for gi in 0..*groups {
                            let mu = mean[s * groups + gi];
                            let rs = rstd[s * groups + gi];
                            let start = (s * c + gi * cpg) * hw;
                            let mut sum_dxhat = T::zero();
                            let mut sum_dxhat_xhat = T::zero();
                            for cc in 0..cpg {
                                let ch = gi * cpg + cc;
                                let off = start + cc * hw;
                                for i in 0..hw {
                                    let xhat = (xd[off + i] - mu) * rs;
                                    let dy = gd[off + i];
                                    dgamma.data_mut()[ch] += dy * xhat;
                                    dbeta.data_mut()[ch] += dy;
                                    let dxhat = dy * gam[ch];
                                    sum_dxhat += dxhat;
                                    sum_dxhat_xhat += dxhat * xhat;
                                }
                            }
                            let dd = dx.data_mut();
                            for cc in 0..cpg {
                                let ch = gi * cpg + cc;
                                let off = start + cc * hw;
                                for i in 0..hw {
                                    let xhat = (xd[off + i] - mu) * rs;
                                    let dxhat = gd[off + i] * gam[ch];
                                    dd[off + i] = rs / m * (m * dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *gamma, dgamma);
                    accumulate(&mut grads, *beta, dbeta);
                }
                Op::Silu(x) => {
                    let xv = self.value(*x);
                    let mut dx = g;
                    for (d, &v) in dx.data_mut().iter_mut().zip(xv.data()) {
                        let s = sigmoid(v);
                        *d *= s * (T::one() + v * (T::one() - s));
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::AddBroadcast { x, e } => {
                    let [n, c, h, w] = g.shape();
                    let mut de = Tensor::zeros([n, c, 1, 1]);
                    for (d, chunk) in de.data_mut().iter_mut().zip(g.data().chunks(h * w)) {
                        *d = chunk.iter().copied().sum();
                    }
                    accumulate(&mut grads, *e, de);
                    accumulate(&mut grads, *x, g);
                }
                Op::Concat(a, b) => {
                    let ca = self.value(*a).c();
                    let [n, c, h, w] = g.shape();
                    let cb = c - ca;
                    let mut da = Vec::with_capacity(n * ca * h * w);
                    let mut dbv = Vec::with_capacity(n * cb * h * w);
                    for s in 0..n {
                        let sample = g.sample(s);
                        da.extend_from_slice(&sample[..ca * h * w]);
                        dbv.extend_from_slice(&sample[ca * h * w..]);
                    }
                    accumulate(&mut grads, *a, Tensor::from_vec([n, ca, h, w], da));
                    accumulate(&mut grads, *b, Tensor::from_vec([n, cb, h, w], dbv));
                }
                Op::AvgPool2(x) => {
                    let shape = self.value(*x).shape();
                    let [_, _, h, w] = shape;
                    let (oh, ow) = (h / 2, w / 2);
                    let mut dx = Tensor::zeros(shape);
                    let quarter = T::from_f64_lossy(0.25);
                    for (p, src) in g.data().chunks(oh * ow).enumerate() {
                        let dst = &mut dx.data_mut()[p * h * w..(p + 1) * h * w];
                        for y in 0..oh {
                            for xx in 0..ow {
                                let v = src[y * ow + xx] * quarter;
                                let i = 2 * y * w + 2 * xx;
                                dst[i] += v;
                                dst[i + 1] += v;
                                dst[i + w] += v;
                                dst[i + w + 1] += v;
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Upsample2(x) => {
                    let shape = self.value(*x).shape();
                    let [_, _, h, w] = shape;
                    let (oh, ow) = (2 * h, 2 * w);
                    let mut dx = Tensor::zeros(shape);
                    for (p, src) in g.data().chunks(oh * ow).enumerate() {
                        let dst = &mut dx.data_mut()[p * h * w..(p + 1) * h * w];
                        for y in 0..oh {
                            for xx in 0..ow {
                                dst[(y / 2) * w + xx / 2] += src[y * ow + xx];
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Attention { qkv, heads, probs } => {
                    let v = self.value(*qkv);
                    let [n, c3, h, w] = v.shape();
                    let c = c3 / 3;
                    let d = c / heads;
                    let l = h * w;
                    let scale = T::one() / T::from_usize(d).unwrap().sqrt();
                    let mut dqkv = Tensor::zeros(v.shape());
                    let mut da = vec![T::zero(); l * l];
                    for s in 0..n {
                        let sample = v.sample(s);
                        let gs = g.sample(s);
                        let per = c3 * l;
                        let dsample = &mut dqkv.data_mut()[s * per..(s + 1) * per];
                        for hd in 0..*heads {
                            let q = &sample[(hd * d) * l..(hd * d + d) * l];
                            let k = &sample[(c + hd * d) * l..(c + hd * d + d) * l];
                            let vv = &sample[(2 * c + hd * d) * l..(2 * c + hd * d + d) * l];
                            let a = &probs[(s * heads + hd) * l * l..(s * heads + hd + 1) * l * l];
                            let dout = &gs[(hd * d) * l..(hd * d + d) * l];
                            // dv[d, j] = sum_i dout[d, i] a[i, j]
                            {
                                let dv = &mut dsample[(2 * c + hd * d) * l..(2 * c + hd * d + d) * l];
                                T::gemm(d, l, l, T::one(), dout, false, a, false, T::one(), dv);
                            }
                            // da[i, j] = sum_d dout[d, i] v[d, j]
                            T::gemm(l, d, l, T::one(), dout, true, vv, false, T::zero(), &mut da);
                            // softmax backward in place: ds = a * (da - rowsum(a * da))
                            for (drow, arow) in da.chunks_mut(l).zip(a.chunks(l)) {
                                let dot: T = drow.iter().zip(arow).map(|(&x, &y)| x * y).sum();
                                for (x, &y) in drow.iter_mut().zip(arow) {
                                    *x = y * (*x - dot);
                                }
                            }
                            // dq[d, i] = scale * sum_j k[d, j] ds[i, j]
                            {
                                let dq = &mut dsample[(hd * d) * l..(hd * d + d) * l];
                                T::gemm(d, l, l, scale, k, false, &da, true, T::one(), dq);
                            }
                            // dk[d, j] = scale * sum_i q[d, i] ds[i, j]
                            {
                                let dk = &mut dsample[(c + hd * d) * l..(c + hd * d + d) * l];
                                T::gemm(d, l, l, scale, q, false, &da, false, T::one(), dk);
                            }
                        }
                    }
                    accumulate(&mut grads, *qkv, dqkv);
                }
            }
        }
        input_grads.reverse();
        Gradients {
            params: param_grads,
            inputs: input_grads,
        }
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
