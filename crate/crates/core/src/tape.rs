//! Reverse-mode differentiation over a linear tape of tensor ops.
//!
//! Every op records its inputs and whatever it needs for the backward pass.
//! Constants never receive gradient, so anything entered with
//! [`Tape::constant`] acts as a stop-gradient target.

use crate::error::{ensure, Result};
use crate::losses;
use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::{self, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        cols: Vec<f64>,
    },
    Relu(Var),
    Add(Var, Var),
    Concat(Vec<Var>),
    AdaptiveAvgPool(Var),
    ResizeBilinear(Var),
    PixelShuffle(Var, usize),
    GlobalAvgPool(Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        attn: Vec<f64>,
    },
    /// Scalar loss with a precomputed gradient w.r.t. its single input.
    Loss {
        input: Var,
        grad: Tensor,
    },
    WeightedSum(Vec<(Var, f64)>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant)
    }

    /// The node for a parameter; created once per tape and shared by every
    /// forward pass recorded on it.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.index()] {
            return v;
        }
        let v = self.push(self.params.get(id).clone(), Op::Param);
        self.param_vars[id.index()] = Some(v);
        v
    }

    pub fn conv2d(&mut self, x: Var, w: ParamId, b: Option<ParamId>, stride: usize, pad: usize) -> Result<Var> {
        let w = self.param(w);
        let b = b.map(|b| self.param(b));
        let (out, cols) = tensor::conv2d(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            pad,
        )?;
        Ok(self.push(
            out,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                cols,
            },
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, Op::Relu(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        ensure!(
            self.value(a).shape() == self.value(b).shape(),
            Validation,
            "add: shape {:?} vs {:?}",
            self.value(a).shape(),
            self.value(b).shape()
        );
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = tensor::concat_channels(&values)?;
        Ok(self.push(out, Op::Concat(parts.to_vec())))
    }

    pub fn adaptive_avg_pool(&mut self, x: Var, out_h: usize, out_w: usize) -> Var {
        let out = tensor::adaptive_avg_pool(self.value(x), out_h, out_w);
        self.push(out, Op::AdaptiveAvgPool(x))
    }

    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Var {
        let out = tensor::resize_bilinear(self.value(x), out_h, out_w);
        self.push(out, Op::ResizeBilinear(x))
    }

    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let out = tensor::pixel_shuffle(self.value(x), r)?;
        Ok(self.push(out, Op::PixelShuffle(x, r)))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let out = tensor::global_avg_pool(self.value(x));
        self.push(out, Op::GlobalAvgPool(x))
    }

    /// Affine map of a vector: `w` is `[out, in]`, `b` is `[out]`.
    pub fn linear(&mut self, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
        let w = self.param(w);
        let b = self.param(b);
        let (wv, xv, bv) = (self.value(w), self.value(x), self.value(b));
        ensure!(
            wv.shape().len() == 2 && wv.shape()[1] == xv.len() && bv.len() == wv.shape()[0],
            Validation,
            "linear: weight {:?} cannot map a {}-vector",
            wv.shape(),
            xv.len()
        );
        let (o, i) = (wv.shape()[0], wv.shape()[1]);
        let out: Vec<f64> = (0..o)
            .map(|r| bv.data()[r] + (0..i).map(|c| wv.data()[r * i + c] * xv.data()[c]).sum::<f64>())
            .collect();
        Ok(self.push(Tensor::from_vec(&[o], out)?, Op::Linear { x, w, b }))
    }

    /// Softmax attention over flattened positions: `q`, `k` are `[Ck, H, W]`,
    /// `v` is `[C, H, W]`; the output has `v`'s shape.
    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let (ck, h, w) = self.value(q).chw();
        let (c, vh, vw) = self.value(v).chw();
        ensure!(
            self.value(k).shape() == self.value(q).shape() && (vh, vw) == (h, w),
            Validation,
            "attention: q {:?}, k {:?}, v {:?} are inconsistent",
            self.value(q).shape(),
            self.value(k).shape(),
            self.value(v).shape()
        );
        let n = h * w;
        let (out, attn) = tensor::attention_aggregate(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            ck,
            c,
            n,
        );
        Ok(self.push(Tensor::from_vec(&[c, h, w], out)?, Op::Attention { q, k, v, attn }))
    }

    /// Attention matrix (`N × N`, row-major) recorded by an attention node.
    pub fn attention_map(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { attn, .. } => Some(attn),
            _ => None,
        }
    }

    /// Every attention node recorded so far, in order.
    pub fn attention_nodes(&self) -> Vec<Var> {
        (0..self.nodes.len())
            .filter(|&i| matches!(self.nodes[i].op, Op::Attention { .. }))
            .map(Var)
            .collect()
    }

    /// Mean pixel cross-entropy of `[C, H, W]` logits against class ids.
    /// Returns the loss node and the number of non-ignored pixels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[u8], ignore: u8) -> Result<(Var, usize)> {
        let (loss, grad, valid) = losses::cross_entropy_kernel(self.value(logits), labels, ignore)?;
        Ok((self.push(Tensor::scalar(loss), Op::Loss { input: logits, grad }), valid))
    }

    /// Squared error against a detached target, normalised by `H·W`.
    pub fn mse_to_target(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let (loss, grad) = losses::mse_kernel(target, self.value(pred))?;
        Ok(self.push(Tensor::scalar(loss), Op::Loss { input: pred, grad }))
    }

    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let (loss, grad) = losses::bce_kernel(self.value(logits).data(), targets)?;
        let grad = Tensor::from_vec(self.value(logits).shape(), grad)?;
        Ok(self.push(Tensor::scalar(loss), Op::Loss { input: logits, grad }))
    }

    /// `Σ wᵢ·xᵢ` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let total = terms.iter().map(|&(v, w)| w * self.value(v).data()[0]).sum();
        self.push(Tensor::scalar(total), Op::WeightedSum(terms.to_vec()))
    }

    /// Back-propagate from a scalar root.
    pub fn backward(&self, root: Var) -> Backward {
        assert_eq!(self.value(root).len(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::scalar(1.0));

        fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Constant | Op::Param => {}
                Op::Conv2d {
                    x,
                    w,
                    b,
                    stride,
                    pad,
                    cols,
                } => {
                    let (dx, dw, db) =
                        tensor::conv2d_backward(self.value(*x), cols, self.value(*w), *stride, *pad, &g);
                    if self.needs_grad(*x) {
                        acc(&mut grads, *x, dx);
                    }
                    acc(&mut grads, *w, dw);
                    if let Some(b) = b {
                        acc(&mut grads, *b, db);
                    }
                }
                Op::Relu(x) => {
                    let mut dx = g.clone();
                    for (d, &y) in dx.data_mut().iter_mut().zip(node.value.data()) {
                        if y <= 0.0 {
                            *d = 0.0;
                        }
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.clone());
                }
                Op::Concat(parts) => {
                    let (_, h, w) = g.chw();
                    let mut offset = 0;
                    for p in parts {
                        let n = self.value(*p).len();
                        let slice = g.data()[offset..offset + n].to_vec();
                        offset += n;
                        let (pc, _, _) = self.value(*p).chw();
                        acc(&mut grads, *p, Tensor::from_vec(&[pc, h, w], slice).unwrap());
                    }
                }
                Op::AdaptiveAvgPool(x) => {
                    let dx = tensor::adaptive_avg_pool_backward(self.value(*x).shape(), &g);
                    acc(&mut grads, *x, dx);
                }
                Op::ResizeBilinear(x) => {
                    let dx = tensor::resize_bilinear_backward(self.value(*x).shape(), &g);
                    acc(&mut grads, *x, dx);
                }
                Op::PixelShuffle(x, r) => {
                    acc(&mut grads, *x, tensor::pixel_unshuffle(&g, *r).unwrap());
                }
                Op::GlobalAvgPool(x) => {
                    let (c, h, w) = self.value(*x).chw();
                    let hw = (h * w) as f64;
                    let mut dx = Tensor::zeros(&[c, h, w]);
                    for (ch, plane) in dx.data_mut().chunks_mut(h * w).enumerate() {
                        plane.fill(g.data()[ch] / hw);
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::Linear { x, w, b } => {
                    let wv = self.value(*w);
                    let xv = self.value(*x);
                    let (o, n_in) = (wv.shape()[0], wv.shape()[1]);
                    let mut dw = Tensor::zeros(wv.shape());
                    let mut dx = Tensor::zeros(xv.shape());
                    for r in 0..o {
                        let gr = g.data()[r];
                        for c in 0..n_in {
                            dw.data_mut()[r * n_in + c] = gr * xv.data()[c];
                            dx.data_mut()[c] += gr * wv.data()[r * n_in + c];
                        }
                    }
                    acc(&mut grads, *w, dw);
                    acc(&mut grads, *b, g.clone());
                    if self.needs_grad(*x) {
                        acc(&mut grads, *x, dx);
                    }
                }
                Op::Attention { q, k, v, attn } => {
                    let (ck, h, w) = self.value(*q).chw();
                    let (c, _, _) = self.value(*v).chw();
                    let n = h * w;
                    let (dq, dk, dv) = tensor::attention_aggregate_backward(
                        self.value(*q).data(),
                        self.value(*k).data(),
                        self.value(*v).data(),
                        attn,
                        g.data(),
                        ck,
                        c,
                        n,
                    );
                    acc(&mut grads, *q, Tensor::from_vec(&[ck, h, w], dq).unwrap());
                    acc(&mut grads, *k, Tensor::from_vec(&[ck, h, w], dk).unwrap());
                    acc(&mut grads, *v, Tensor::from_vec(&[c, h, w], dv).unwrap());
                }
                Op::Loss { input, grad } => {
                    acc(&mut grads, *input, grad.scaled(g.data()[0]));
                }
                Op::WeightedSum(terms) => {
                    for &(v, w) in terms {
                        acc(&mut grads, v, Tensor::scalar(w * g.data()[0]));
                    }
                }
            }
            grads[i] = Some(g);
        }
        Backward { grads }
    }

    /// Whether any parameter can be reached from `v`.
    fn needs_grad(&self, v: Var) -> bool {
        !matches!(self.nodes[v.0].op, Op::Constant)
    }
}

/// Gradients of every node w.r.t. a scalar root.
pub struct Backward {
    grads: Vec<Option<Tensor>>,
}

impl Backward {
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gather parameter gradients into a store-aligned [`Gradients`].
    pub fn param_grads(&self, tape: &Tape) -> Gradients {
        let mut out = Gradients::zeros_like(tape.params);
        for (i, slot) in tape.param_vars.iter().enumerate() {
            if let Some(v) = slot {
                if let Some(g) = &self.grads[v.0] {
                    *out.get_mut(ParamId(i)) = g.clone();
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(shapes: &[(&str, &[usize])]) -> ParamStore {
        let mut s = ParamStore::new();
        for (k, (name, shape)) in shapes.iter().enumerate() {
            let n: usize = shape.iter().product();
            let data = (0..n).map(|i| ((i * 7 + k * 13) as f64 * 0.37).sin() * 0.5).collect();
            s.add(*name, Tensor::from_vec(shape, data).unwrap());
        }
        s
    }

    /// Central differences on every parameter scalar of `f`.
    fn numeric(store: &ParamStore, f: &dyn Fn(&ParamStore) -> f64) -> Vec<Vec<f64>> {
        let h = 1e-6;
        let mut s = store.clone();
        s.ids()
            .collect::<Vec<_>>()
            .into_iter()
            .map(|id| {
                (0..store.get(id).len())
                    .map(|j| {
                        let orig = s.get(id).data()[j];
                        s.get_mut(id).data_mut()[j] = orig + h;
                        let up = f(&s);
                        s.get_mut(id).data_mut()[j] = orig - h;
                        let down = f(&s);
                        s.get_mut(id).data_mut()[j] = orig;
                        (up - down) / (2.0 * h)
                    })
                    .collect()
            })
            .collect()
    }

    fn check(store: &ParamStore, build: &dyn Fn(&mut Tape) -> Var) {
        let f = |s: &ParamStore| {
            let mut t = Tape::new(s);
            let r = build(&mut t);
            t.value(r).data()[0]
        };
        let mut tape = Tape::new(store);
        let root = build(&mut tape);
        let grads = tape.backward(root).param_grads(&tape);
        let num = numeric(store, &f);
        for (id, g) in grads.iter() {
            for (a, n) in g.data().iter().zip(&num[id.index()]) {
                assert!(
                    (a - n).abs() <= 1e-6 * (1.0 + n.abs()),
                    "{}: analytic {a} vs numeric {n}",
                    store.name(id)
                );
            }
        }
    }

    #[test]
    fn conv_pool_resize_shuffle_gradients() {
        let store = store_with(&[
            ("x", &[2, 6, 6]),
            ("w1", &[8, 2, 3, 3]),
            ("b1", &[8]),
            ("w2", &[3, 2, 1, 1]),
        ]);
        check(&store, &|t| {
            let x = t.param(store.id("x").unwrap());
            let y = t.conv2d(x, store.id("w1").unwrap(), Some(store.id("b1").unwrap()), 2, 1).unwrap();
            let y = t.pixel_shuffle(y, 2).unwrap();
            let p = t.adaptive_avg_pool(y, 4, 5);
            let r = t.resize_bilinear(p, 7, 3);
            let z = t.conv2d(r, store.id("w2").unwrap(), None, 1, 0).unwrap();
            let labels: Vec<u8> = (0..21).map(|i| (i % 3) as u8).collect();
            t.cross_entropy(z, &labels, 255).unwrap().0
        });
    }

    #[test]
    fn attention_linear_concat_gradients() {
        let store = store_with(&[
            ("q", &[2, 3, 2]),
            ("k", &[2, 3, 2]),
            ("v", &[3, 3, 2]),
            ("lw", &[2, 6]),
            ("lb", &[2]),
        ]);
        check(&store, &|t| {
            let q = t.param(store.id("q").unwrap());
            let k = t.param(store.id("k").unwrap());
            let v = t.param(store.id("v").unwrap());
            let a = t.attention(q, k, v).unwrap();
            let s = t.add(a, v).unwrap();
            let s = t.relu(s);
            let c = t.concat(&[s, v]).unwrap();
            let pooled = t.global_avg_pool(c);
            let logits = t.linear(pooled, store.id("lw").unwrap(), store.id("lb").unwrap()).unwrap();
            let bce = t.bce_with_logits(logits, &[1.0, 0.0]).unwrap();
            let target = Tensor::full(&[3, 3, 2], 0.25);
            let mse = t.mse_to_target(a, &target).unwrap();
            t.weighted_sum(&[(bce, 1.0), (mse, 0.7)])
        });
    }

    #[test]
    fn constants_receive_no_gradient_flow() {
        let store = store_with(&[("pad", &[1]), ("w", &[1, 1, 1, 1])]);
        assert!(store.get(store.id("w").unwrap()).data()[0] != 0.0);
        let mut t = Tape::new(&store);
        let x = t.constant(Tensor::full(&[1, 2, 2], 2.0));
        let y = t.conv2d(x, store.id("w").unwrap(), None, 1, 0).unwrap();
        let target = Tensor::zeros(&[1, 2, 2]);
        let l = t.mse_to_target(y, &target).unwrap();
        let b = t.backward(l);
        assert!(b.grad(x).is_none());
        assert!(b.param_grads(&t).get(store.id("w").unwrap()).data()[0] != 0.0);
    }
}
