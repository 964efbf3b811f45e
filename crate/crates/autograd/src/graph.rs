use std::collections::HashMap;

use crate::kernels::{self, ConvGeom, Layout, NormGeom};
use crate::{Real, Tensor};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddBias {
        x: Var,
        bias: Var,
    },
    AddPerBatch {
        x: Var,
        e: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Norm {
        x: Var,
        gamma: Var,
        beta: Var,
        geom: NormGeom,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Silu(Var),
    Softmax(Var),
    Concat(Vec<Var>),
    Slice {
        x: Var,
        start: usize,
    },
    Upsample2x(Var),
    CrossAttention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<T>,
    },
    Mse(Var, Var),
    Sum(Var),
    Mean(Var),
    WeightedSum {
        weights: Var,
        feats: Vec<Var>,
    },
    SpatialMean(Var),
    Tile(Var),
    Reshape(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Operation tape.
///
/// Parameters are bound with [`Graph::param`]; whether a bound parameter is
/// trainable follows the graph's current trainable flag at the time of its
/// first binding. Binding the same tensor twice returns the same [`Var`], so
/// a model evaluated several times in one graph accumulates its gradients.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    bound: HashMap<(usize, usize), Var>,
    trainable: bool,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    bound: HashMap<(usize, usize), Var>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of a parameter previously bound with [`Graph::param`].
    pub fn of(&self, param: &Tensor<T>) -> Option<&Tensor<T>> {
        self.bound.get(&key(param)).and_then(|v| self.get(*v))
    }
}

fn key<T>(t: &Tensor<T>) -> (usize, usize)
where
    T: Real,
{
    (t.data().as_ptr() as usize, t.len())
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            bound: HashMap::new(),
            trainable: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Sets whether subsequently bound parameters are trainable; returns the
    /// previous setting.
    pub fn set_trainable(&mut self, trainable: bool) -> bool {
        std::mem::replace(&mut self.trainable, trainable)
    }

    pub fn with_trainable<R>(&mut self, trainable: bool, f: impl FnOnce(&mut Self) -> R) -> R {
        let prev = self.set_trainable(trainable);
        let out = f(self);
        self.set_trainable(prev);
        out
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Binds a model parameter, reusing the node if it is already bound.
    pub fn param(&mut self, t: &Tensor<T>) -> Var {
        if let Some(&v) = self.bound.get(&key(t)) {
            return v;
        }
        let v = self.push(t.clone(), Op::Leaf, self.trainable);
        self.bound.insert(key(t), v);
        v
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A free leaf that always receives gradients.
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Stop-gradient copy of `x`.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, name: &str) -> Tensor<T> {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "{name}: shape mismatch");
        va.zip_map(vb, f)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.binary(a, b, |x, y| x + y, "add");
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.binary(a, b, |x, y| x - y, "sub");
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.binary(a, b, |x, y| x * y, "mul");
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).map(|x| x * s);
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale(a, s), rg)
    }

    /// `x + bias` with `bias` broadcast along every axis but the last.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let c = self.value(bias).len();
        assert_eq!(self.value(x).last_dim(), c, "add_bias: width mismatch");
        let b = self.value(bias).data().to_vec();
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_mut(c) {
            for (v, bv) in row.iter_mut().zip(&b) {
                *v += *bv;
            }
        }
        let rg = self.rg(&[x, bias]);
        self.push(value, Op::AddBias { x, bias }, rg)
    }

    /// `x[b, .., c] + e[b, c]`.
    pub fn add_per_batch(&mut self, x: Var, e: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let es = self.shape(e).to_vec();
        assert!(
            es.len() == 2 && es[0] == xs[0] && es[1] == *xs.last().unwrap(),
            "add_per_batch: {xs:?} vs {es:?}"
        );
        let (c, per) = (es[1], self.value(x).len() / xs[0]);
        let ev = self.value(e).data().to_vec();
        let mut value = self.value(x).clone();
        for (b, chunk) in value.data_mut().chunks_mut(per).enumerate() {
            let eb = &ev[b * c..(b + 1) * c];
            for row in chunk.chunks_mut(c) {
                for (v, bv) in row.iter_mut().zip(eb) {
                    *v += *bv;
                }
            }
        }
        let rg = self.rg(&[x, e]);
        self.push(value, Op::AddPerBatch { x, e }, rg)
    }

    /// `x @ w (+ b)` over the last axis of `x`; `w` is `[in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(ws.len(), 2, "linear: weight must be 2-d");
        assert_eq!(*xs.last().unwrap(), ws[0], "linear: {xs:?} x {ws:?}");
        let rows = self.value(x).len() / ws[0];
        let mut out = vec![T::zero(); rows * ws[1]];
        kernels::gemm(
            self.value(x).data(),
            Layout::row_major(rows, ws[0]),
            self.value(w).data(),
            Layout::row_major(ws[0], ws[1]),
            &mut out,
            Layout::row_major(rows, ws[1]),
            T::zero(),
        );
        if let Some(b) = b {
            let bv = self.value(b).data();
            assert_eq!(bv.len(), ws[1], "linear: bias width");
            for row in out.chunks_mut(ws[1]) {
                for (v, bb) in row.iter_mut().zip(bv) {
                    *v += *bb;
                }
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = ws[1];
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.rg(&inputs);
        self.push(Tensor::new(&shape, out), Op::Linear { x, w, b }, rg)
    }

    /// 2-d convolution over `[B,H,W,Cin]` with weights `[KH,KW,Cin,Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let ws = self.shape(w).to_vec();
        let geom = ConvGeom::new(self.shape(x), &ws, stride, pad);
        let cout = ws[3];
        let mut out = vec![T::zero(); geom.rows() * cout];
        let xv = self.value(x).data();
        let col;
        let colref = if geom.is_pointwise() {
            xv
        } else {
            col = kernels::im2col(xv, &geom);
            &col
        };
        kernels::gemm(
            colref,
            Layout::row_major(geom.rows(), geom.patch()),
            self.value(w).data(),
            Layout::row_major(geom.patch(), cout),
            &mut out,
            Layout::row_major(geom.rows(), cout),
            T::zero(),
        );
        if let Some(b) = b {
            let bv = self.value(b).data();
            assert_eq!(bv.len(), cout, "conv2d: bias width");
            for row in out.chunks_mut(cout) {
                for (v, bb) in row.iter_mut().zip(bv) {
                    *v += *bb;
                }
            }
        }
        let shape = [geom.batch, geom.ho, geom.wo, cout];
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.rg(&inputs);
        self.push(Tensor::new(&shape, out), Op::Conv2d { x, w, b, geom }, rg)
    }

    /// Group normalization over `[B, ..., C]`: each batch element's channel
    /// group is normalized across all middle positions.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Var {
        let xs = self.shape(x).to_vec();
        let c = *xs.last().unwrap();
        assert!(groups > 0 && c.is_multiple_of(groups), "group_norm: {c} channels, {groups} groups");
        let geom = NormGeom {
            outer: xs[0],
            inner: self.value(x).len() / (xs[0] * c),
            channels: c,
            groups,
        };
        self.norm(x, gamma, beta, geom, eps)
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let c = self.value(x).last_dim();
        let geom = NormGeom {
            outer: self.value(x).len() / c,
            inner: 1,
            channels: c,
            groups: 1,
        };
        self.norm(x, gamma, beta, geom, eps)
    }

    fn norm(&mut self, x: Var, gamma: Var, beta: Var, geom: NormGeom, eps: f64) -> Var {
        let c = geom.channels;
        assert_eq!(self.value(gamma).len(), c, "norm: gamma width");
        assert_eq!(self.value(beta).len(), c, "norm: beta width");
        let (xhat, rstd) = kernels::norm_stats(self.value(x).data(), &geom, T::lit(eps));
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = xhat.clone();
        for row in out.chunks_mut(c) {
            for ((v, g), b) in row.iter_mut().zip(gv).zip(bv) {
                *v = *v * *g + *b;
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, gamma, beta]);
        let op = Op::Norm {
            x,
            gamma,
            beta,
            geom,
            xhat,
            rstd,
        };
        self.push(Tensor::new(&shape, out), op, rg)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v / (T::one() + (-v).exp()));
        let rg = self.rg(&[x]);
        self.push(value, Op::Silu(x), rg)
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let out = kernels::softmax_rows(xv.data(), xv.last_dim());
        let value = Tensor::new(xv.shape(), out);
        let rg = self.rg(&[x]);
        self.push(value, Op::Softmax(x), rg)
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty(), "concat of nothing");
        let lead = self.shape(xs[0])[..self.shape(xs[0]).len() - 1].to_vec();
        let widths: Vec<usize> = xs
            .iter()
            .map(|&v| {
                let s = self.shape(v);
                assert_eq!(&s[..s.len() - 1], &lead[..], "concat: leading dims differ");
                *s.last().unwrap()
            })
            .collect();
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&v, &w) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(v).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let rg = self.rg(xs);
        self.push(Tensor::new(&shape, out), Op::Concat(xs.to_vec()), rg)
    }

    /// Channels `start..start + len` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let c = *xs.last().unwrap();
        assert!(start + len <= c, "slice_last out of range");
        let out: Vec<T> = self
            .value(x)
            .data()
            .chunks(c)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let mut shape = xs;
        *shape.last_mut().unwrap() = len;
        let rg = self.rg(&[x]);
        self.push(Tensor::new(&shape, out), Op::Slice { x, start }, rg)
    }

    /// Nearest-neighbour 2x upsampling of `[B,H,W,C]`.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 4, "upsample2x expects [B,H,W,C]");
        let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); b * 4 * h * w * c];
        for bi in 0..b {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    let src = ((bi * h + y / 2) * w + xx / 2) * c;
                    let dst = ((bi * 2 * h + y) * 2 * w + xx) * c;
                    out[dst..dst + c].copy_from_slice(&xv[src..src + c]);
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::new(&[b, 2 * h, 2 * w, c], out), Op::Upsample2x(x), rg)
    }

    /// Multi-head scaled dot-product attention of queries `[B,S,D]` over keys
    /// and values `[B,L,D]`.
    pub fn cross_attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Var {
        let qs = self.shape(q).to_vec();
        let ks = self.shape(k).to_vec();
        assert_eq!(qs.len(), 3, "cross_attention: q must be [B,S,D]");
        assert_eq!(ks.len(), 3, "cross_attention: k must be [B,L,D]");
        assert_eq!(ks, self.shape(v), "cross_attention: k/v shape mismatch");
        assert!(qs[0] == ks[0] && qs[2] == ks[2], "cross_attention: {qs:?} vs {ks:?}");
        let (b, s, d, l) = (qs[0], qs[1], qs[2], ks[1]);
        assert!(heads > 0 && d % heads == 0, "cross_attention: {d} not divisible by {heads}");
        let dh = d / heads;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![T::zero(); b * heads * s * l];
        let mut out = vec![T::zero(); b * s * d];
        for bi in 0..b {
            for h in 0..heads {
                let lq = Layout::row_major(s, dh).with_row_stride(d).at(bi * s * d + h * dh);
                let lk = Layout::row_major(l, dh).with_row_stride(d).at(bi * l * d + h * dh);
                let pofs = (bi * heads + h) * s * l;
                let p = &mut probs[pofs..pofs + s * l];
                kernels::gemm(qv, lq, kv, lk.t(), p, Layout::row_major(s, l), T::zero());
                for row in p.chunks_mut(l) {
                    let scaled: Vec<T> = row.iter().map(|&x| x * scale).collect();
                    kernels::softmax_into(&scaled, row);
                }
                kernels::gemm(&probs[pofs..pofs + s * l], Layout::row_major(s, l), vv, lk, &mut out, lq, T::zero());
            }
        }
        let rg = self.rg(&[q, k, v]);
        let op = Op::CrossAttention { q, k, v, heads, probs };
        self.push(Tensor::new(&qs, out), op, rg)
    }

    /// Mean squared error between equally shaped tensors, as a `[1]` scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mse: shape mismatch");
        let sum: T = va.data().iter().zip(vb.data()).map(|(&x, &y)| (x - y) * (x - y)).sum();
        let value = Tensor::scalar(sum / T::lit(va.len() as f64));
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Mse(a, b), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).data().iter().copied().sum());
        let rg = self.rg(&[x]);
        self.push(value, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).mean());
        let rg = self.rg(&[x]);
        self.push(value, Op::Mean(x), rg)
    }

    /// `sum_i weights[.., i] * feats[i][.., :]`.
    ///
    /// `weights` has shape `[R.., N]` and every feature `[R.., C]` with the same
    /// leading extent; each weight multiplies a whole trailing row of its
    /// feature (a per-location map broadcast across channels, or a per-sample
    /// selection broadcast across a whole sample). The sum starts from the
    /// first term, so a single unit weight reproduces its feature exactly.
    pub fn weighted_sum(&mut self, weights: Var, feats: &[Var]) -> Var {
        let n = feats.len();
        assert!(n > 0, "weighted_sum of nothing");
        let wv = self.value(weights);
        assert_eq!(wv.last_dim(), n, "weighted_sum: weight width != feature count");
        let rows = wv.len() / n;
        let fshape = self.shape(feats[0]).to_vec();
        let flen = self.value(feats[0]).len();
        assert_eq!(flen % rows, 0, "weighted_sum: features not divisible into rows");
        let inner = flen / rows;
        for &f in feats {
            assert_eq!(self.shape(f), &fshape[..], "weighted_sum: feature shapes differ");
        }
        let w = wv.data();
        let mut out = vec![T::zero(); flen];
        for (i, &f) in feats.iter().enumerate() {
            let fv = self.value(f).data();
            for r in 0..rows {
                let wr = w[r * n + i];
                let (o, src) = (&mut out[r * inner..(r + 1) * inner], &fv[r * inner..(r + 1) * inner]);
                if i == 0 {
                    for (d, s) in o.iter_mut().zip(src) {
                        *d = wr * *s;
                    }
                } else {
                    for (d, s) in o.iter_mut().zip(src) {
                        *d += wr * *s;
                    }
                }
            }
        }
        let mut inputs = vec![weights];
        inputs.extend_from_slice(feats);
        let rg = self.rg(&inputs);
        let op = Op::WeightedSum {
            weights,
            feats: feats.to_vec(),
        };
        self.push(Tensor::new(&fshape, out), op, rg)
    }

    /// Average over every axis between the first and the last.
    pub fn spatial_mean(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let (b, c) = (s[0], *s.last().unwrap());
        let per = self.value(x).len() / (b * c);
        let mut out = vec![T::zero(); b * c];
        for (bi, chunk) in self.value(x).data().chunks(per * c).enumerate() {
            for row in chunk.chunks(c) {
                for (o, v) in out[bi * c..(bi + 1) * c].iter_mut().zip(row) {
                    *o += *v;
                }
            }
        }
        let inv = T::one() / T::lit(per as f64);
        out.iter_mut().for_each(|v| *v *= inv);
        let rg = self.rg(&[x]);
        self.push(Tensor::new(&[b, c], out), Op::SpatialMean(x), rg)
    }

    /// Repeats `x` along a new leading axis of size `n`.
    pub fn tile(&mut self, x: Var, n: usize) -> Var {
        let xv = self.value(x);
        let mut data = Vec::with_capacity(n * xv.len());
        for _ in 0..n {
            data.extend_from_slice(xv.data());
        }
        let mut shape = vec![n];
        shape.extend_from_slice(xv.shape());
        let rg = self.rg(&[x]);
        self.push(Tensor::new(&shape, data), Op::Tile(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let value = self.value(x).clone().reshape(shape);
        let rg = self.rg(&[x]);
        self.push(value, Op::Reshape(x), rg)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(self.value(loss).shape(), vec![T::one()]));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backprop(&node.op, &node.value, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        Gradients {
            grads,
            bound: self.bound.clone(),
        }
    }

    fn backprop(&self, op: &Op<T>, y: &Tensor<T>, gy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let need = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, g: Tensor<T>| {
            debug_assert_eq!(g.shape(), self.shape(v), "gradient shape mismatch");
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                        *e += *x;
                    }
                }
                slot @ None => *slot = Some(g),
            }
        };
        let g = gy.data();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if need(*a) {
                    acc(*a, gy.clone());
                }
                if need(*b) {
                    acc(*b, gy.clone());
                }
            }
            Op::Sub(a, b) => {
                if need(*a) {
                    acc(*a, gy.clone());
                }
                if need(*b) {
                    acc(*b, gy.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if need(*a) {
                    acc(*a, gy.zip_map(self.value(*b), |x, y| x * y));
                }
                if need(*b) {
                    acc(*b, gy.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::Scale(a, s) => {
                if need(*a) {
                    acc(*a, gy.map(|v| v * *s));
                }
            }
            Op::AddBias { x, bias } => {
                if need(*x) {
                    acc(*x, gy.clone());
                }
                if need(*bias) {
                    let c = self.value(*bias).len();
                    let mut gb = vec![T::zero(); c];
                    for row in g.chunks(c) {
                        for (o, v) in gb.iter_mut().zip(row) {
                            *o += *v;
                        }
                    }
                    acc(*bias, Tensor::new(self.shape(*bias), gb));
                }
            }
            Op::AddPerBatch { x, e } => {
                if need(*x) {
                    acc(*x, gy.clone());
                }
                if need(*e) {
                    let es = self.shape(*e).to_vec();
                    let (b, c) = (es[0], es[1]);
                    let per = g.len() / b;
                    let mut ge = vec![T::zero(); b * c];
                    for (bi, chunk) in g.chunks(per).enumerate() {
                        for row in chunk.chunks(c) {
                            for (o, v) in ge[bi * c..(bi + 1) * c].iter_mut().zip(row) {
                                *o += *v;
                            }
                        }
                    }
                    acc(*e, Tensor::new(&es, ge));
                }
            }
            Op::Linear { x, w, b } => {
                let ws = self.shape(*w).to_vec();
                let (cin, cout) = (ws[0], ws[1]);
                let rows = g.len() / cout;
                if need(*x) {
                    let mut gx = vec![T::zero(); rows * cin];
                    kernels::gemm(
                        g,
                        Layout::row_major(rows, cout),
                        self.value(*w).data(),
                        Layout::row_major(cin, cout).t(),
                        &mut gx,
                        Layout::row_major(rows, cin),
                        T::zero(),
                    );
                    acc(*x, Tensor::new(self.shape(*x), gx));
                }
                if need(*w) {
                    let mut gw = vec![T::zero(); cin * cout];
                    kernels::gemm(
                        self.value(*x).data(),
                        Layout::row_major(rows, cin).t(),
                        g,
                        Layout::row_major(rows, cout),
                        &mut gw,
                        Layout::row_major(cin, cout),
                        T::zero(),
                    );
                    acc(*w, Tensor::new(&ws, gw));
                }
                if let Some(b) = b.filter(|b| need(*b)) {
                    acc(b, column_sums(g, cout));
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let ws = self.shape(*w).to_vec();
                let cout = ws[3];
                let (rows, patch) = (geom.rows(), geom.patch());
                if need(*x) {
                    let mut gcol = vec![T::zero(); rows * patch];
                    kernels::gemm(
                        g,
                        Layout::row_major(rows, cout),
                        self.value(*w).data(),
                        Layout::row_major(patch, cout).t(),
                        &mut gcol,
                        Layout::row_major(rows, patch),
                        T::zero(),
                    );
                    let gx = if geom.is_pointwise() {
                        gcol
                    } else {
                        let mut gx = vec![T::zero(); self.value(*x).len()];
                        kernels::col2im(&gcol, geom, &mut gx);
                        gx
                    };
                    acc(*x, Tensor::new(self.shape(*x), gx));
                }
                if need(*w) {
                    let xv = self.value(*x).data();
                    let col;
                    let colref = if geom.is_pointwise() {
                        xv
                    } else {
                        col = kernels::im2col(xv, geom);
                        &col
                    };
                    let mut gw = vec![T::zero(); patch * cout];
                    kernels::gemm(
                        colref,
                        Layout::row_major(rows, patch).t(),
                        g,
                        Layout::row_major(rows, cout),
                        &mut gw,
                        Layout::row_major(patch, cout),
                        T::zero(),
                    );
                    acc(*w, Tensor::new(&ws, gw));
                }
                if let Some(b) = b.filter(|b| need(*b)) {
                    acc(b, column_sums(g, cout));
                }
            }
            Op::Norm {
                x,
                gamma,
                beta,
                geom,
                xhat,
                rstd,
            } => {
                let c = geom.channels;
                if need(*gamma) {
                    let mut gg = vec![T::zero(); c];
                    for (row, xr) in g.chunks(c).zip(xhat.chunks(c)) {
                        for ((o, gv), xv) in gg.iter_mut().zip(row).zip(xr) {
                            *o += *gv * *xv;
                        }
                    }
                    acc(*gamma, Tensor::new(self.shape(*gamma), gg));
                }
                if need(*beta) {
                    let mut gb = column_sums(g, c);
                    gb = gb.reshape(self.shape(*beta));
                    acc(*beta, gb);
                }
                if need(*x) {
                    let gam = self.value(*gamma).data();
                    let mut dxhat = g.to_vec();
                    for row in dxhat.chunks_mut(c) {
                        for (d, gv) in row.iter_mut().zip(gam) {
                            *d *= *gv;
                        }
                    }
                    let dx = kernels::norm_backward(&dxhat, xhat, rstd, geom);
                    acc(*x, Tensor::new(self.shape(*x), dx));
                }
            }
            Op::Silu(x) => {
                if need(*x) {
                    let gx = self.value(*x).zip_map(gy, |v, gv| {
                        let s = T::one() / (T::one() + (-v).exp());
                        gv * s * (T::one() + v * (T::one() - s))
                    });
                    acc(*x, gx);
                }
            }
            Op::Softmax(x) => {
                if need(*x) {
                    let dx = kernels::softmax_backward_rows(y.data(), g, y.last_dim());
                    acc(*x, Tensor::new(y.shape(), dx));
                }
            }
            Op::Concat(xs) => {
                let total = y.last_dim();
                let rows = y.len() / total;
                let mut start = 0;
                for &v in xs {
                    let w = self.value(v).last_dim();
                    if need(v) {
                        let mut gv = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            gv.extend_from_slice(&g[r * total + start..r * total + start + w]);
                        }
                        acc(v, Tensor::new(self.shape(v), gv));
                    }
                    start += w;
                }
            }
            Op::Slice { x, start } => {
                if need(*x) {
                    let c = self.value(*x).last_dim();
                    let len = y.last_dim();
                    let mut gx = vec![T::zero(); self.value(*x).len()];
                    for (dst, src) in gx.chunks_mut(c).zip(g.chunks(len)) {
                        dst[*start..*start + len].copy_from_slice(src);
                    }
                    acc(*x, Tensor::new(self.shape(*x), gx));
                }
            }
            Op::Upsample2x(x) => {
                if need(*x) {
                    let s = self.shape(*x).to_vec();
                    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
                    let mut gx = vec![T::zero(); b * h * w * c];
                    for bi in 0..b {
                        for yy in 0..2 * h {
                            for xx in 0..2 * w {
                                let dst = ((bi * h + yy / 2) * w + xx / 2) * c;
                                let src = ((bi * 2 * h + yy) * 2 * w + xx) * c;
                                for k in 0..c {
                                    gx[dst + k] += g[src + k];
                                }
                            }
                        }
                    }
                    acc(*x, Tensor::new(&s, gx));
                }
            }
            Op::CrossAttention { q, k, v, heads, probs } => {
                self.attention_backward(*q, *k, *v, *heads, probs, g, &need, &mut acc);
            }
            Op::Mse(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let f = T::lit(2.0) * g[0] / T::lit(va.len() as f64);
                let diff = va.zip_map(vb, |x, y| (x - y) * f);
                if need(*b) {
                    acc(*b, diff.map(|v| -v));
                }
                if need(*a) {
                    acc(*a, diff);
                }
            }
            Op::Sum(x) => {
                if need(*x) {
                    acc(*x, Tensor::full(self.shape(*x), g[0]));
                }
            }
            Op::Mean(x) => {
                if need(*x) {
                    let n = T::lit(self.value(*x).len() as f64);
                    acc(*x, Tensor::full(self.shape(*x), g[0] / n));
                }
            }
            Op::WeightedSum { weights, feats } => {
                let n = feats.len();
                let wv = self.value(*weights).data();
                let rows = wv.len() / n;
                let inner = g.len() / rows;
                if need(*weights) {
                    let mut gw = vec![T::zero(); wv.len()];
                    for (i, &f) in feats.iter().enumerate() {
                        let fv = self.value(f).data();
                        for r in 0..rows {
                            let span = r * inner..(r + 1) * inner;
                            gw[r * n + i] = g[span.clone()].iter().zip(&fv[span]).map(|(&a, &b)| a * b).sum();
                        }
                    }
                    acc(*weights, Tensor::new(self.shape(*weights), gw));
                }
                for (i, &f) in feats.iter().enumerate() {
                    if need(f) {
                        let mut gf = vec![T::zero(); g.len()];
                        for r in 0..rows {
                            let wr = wv[r * n + i];
                            for (d, s) in gf[r * inner..(r + 1) * inner].iter_mut().zip(&g[r * inner..(r + 1) * inner]) {
                                *d = wr * *s;
                            }
                        }
                        acc(f, Tensor::new(self.shape(f), gf));
                    }
                }
            }
            Op::SpatialMean(x) => {
                if need(*x) {
                    let s = self.shape(*x).to_vec();
                    let (b, c) = (s[0], *s.last().unwrap());
                    let per = self.value(*x).len() / (b * c);
                    let inv = T::one() / T::lit(per as f64);
                    let mut gx = vec![T::zero(); b * per * c];
                    for (bi, chunk) in gx.chunks_mut(per * c).enumerate() {
                        for row in chunk.chunks_mut(c) {
                            for (d, s) in row.iter_mut().zip(&g[bi * c..(bi + 1) * c]) {
                                *d = *s * inv;
                            }
                        }
                    }
                    acc(*x, Tensor::new(&s, gx));
                }
            }
            Op::Tile(x) => {
                if need(*x) {
                    let len = self.value(*x).len();
                    let mut gx = vec![T::zero(); len];
                    for chunk in g.chunks(len) {
                        for (d, s) in gx.iter_mut().zip(chunk) {
                            *d += *s;
                        }
                    }
                    acc(*x, Tensor::new(self.shape(*x), gx));
                }
            }
            Op::Reshape(x) => {
                if need(*x) {
                    acc(*x, gy.clone().reshape(self.shape(*x)));
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[T],
        g: &[T],
        need: &impl Fn(Var) -> bool,
        acc: &mut impl FnMut(Var, Tensor<T>),
    ) {
        let qs = self.shape(q).to_vec();
        let ks = self.shape(k).to_vec();
        let (b, s, d, l) = (qs[0], qs[1], qs[2], ks[1]);
        let dh = d / heads;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut gq = vec![T::zero(); qv.len()];
        let mut gk = vec![T::zero(); kv.len()];
        let mut gv = vec![T::zero(); vv.len()];
        let mut dp = vec![T::zero(); s * l];
        for bi in 0..b {
            for h in 0..heads {
                let lq = Layout::row_major(s, dh).with_row_stride(d).at(bi * s * d + h * dh);
                let lk = Layout::row_major(l, dh).with_row_stride(d).at(bi * l * d + h * dh);
                let pofs = (bi * heads + h) * s * l;
                let p = &probs[pofs..pofs + s * l];
                let lp = Layout::row_major(s, l);
                // dV = P^T dOut
                kernels::gemm(p, lp.t(), g, lq, &mut gv, lk, T::zero());
                // dP = dOut V^T
                kernels::gemm(g, lq, vv, lk.t(), &mut dp, lp, T::zero());
                let mut ds = kernels::softmax_backward_rows(p, &dp, l);
                ds.iter_mut().for_each(|x| *x *= scale);
                kernels::gemm(&ds, lp, kv, lk, &mut gq, lq, T::zero());
                kernels::gemm(&ds, lp.t(), qv, lq, &mut gk, lk, T::zero());
            }
        }
        if need(q) {
            acc(q, Tensor::new(&qs, gq));
        }
        if need(k) {
            acc(k, Tensor::new(&ks, gk));
        }
        if need(v) {
            acc(v, Tensor::new(&ks, gv));
        }
    }
}

fn column_sums<T: Real>(g: &[T], width: usize) -> Tensor<T> {
    let mut out = vec![T::zero(); width];
    for row in g.chunks(width) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += *v;
        }
    }
    Tensor::new(&[width], out)
}
