//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation applied to its variables. Calling
//! [`Graph::backward`] walks the tape in reverse and returns the gradient of a
//! scalar output with respect to every parameter leaf. Graphs are built per
//! sample and thrown away, so a batch is processed by building one graph per
//! item and summing the returned gradients.

use super::tensor::{gemm, MatMut, MatRef, Real, Tensor};
use crate::ctc;

type Backward<R> = Box<dyn Fn(&Tensor<R>, &Tensor<R>, &[&Tensor<R>], &[bool]) -> Vec<Option<Tensor<R>>> + Send>;

struct Node<R: Real> {
    value: Tensor<R>,
    parents: Vec<usize>,
    backward: Option<Backward<R>>,
    param: Option<usize>,
    requires_grad: bool,
}

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// 2-D convolution hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: (usize, usize),
    pub pad: (usize, usize),
}

pub struct Graph<R: Real> {
    nodes: Vec<Node<R>>,
}

impl<R: Real> Default for Graph<R> {
    fn default() -> Self {
        Self::new()
    }
}

impl<R: Real> Graph<R> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn value(&self, v: Var) -> &Tensor<R> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<R>, parents: Vec<usize>, backward: Backward<R>) -> Var {
        let requires_grad = parents.iter().any(|&p| self.nodes[p].requires_grad);
        self.nodes.push(Node {
            value,
            parents,
            backward: requires_grad.then_some(backward),
            param: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; no gradient flows into it.
    pub fn input(&mut self, value: Tensor<R>) -> Var {
        self.nodes.push(Node { value, parents: vec![], backward: None, param: None, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf identified by `index` in the caller's parameter list.
    pub fn param(&mut self, index: usize, value: &Tensor<R>) -> Var {
        self.nodes.push(Node {
            value: value.clone(),
            parents: vec![],
            backward: None,
            param: Some(index),
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Gradients of the scalar `loss` with respect to each parameter index in
    /// `0..n_params`. Parameters that did not influence the loss get `None`.
    pub fn backward(&self, loss: Var, n_params: usize) -> Vec<Option<Tensor<R>>> {
        assert_eq!(self.nodes[loss.0].value.len(), 1, "backward needs a scalar output");
        let mut out: Vec<Option<Tensor<R>>> = vec![None; n_params];
        let mut grads: Vec<Option<Tensor<R>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.nodes[loss.0].value.shape(), R::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Some(p) = node.param {
                accumulate(&mut out[p], g);
                continue;
            }
            let Some(bw) = &node.backward else { continue };
            let parents: Vec<&Tensor<R>> = node.parents.iter().map(|&p| &self.nodes[p].value).collect();
            let need: Vec<bool> = node.parents.iter().map(|&p| self.nodes[p].requires_grad).collect();
            let pg = bw(&g, &node.value, &parents, &need);
            for ((&p, pg), need) in node.parents.iter().zip(pg).zip(need) {
                if let (true, Some(pg)) = (need, pg) {
                    accumulate(&mut grads[p], pg);
                }
            }
        }
        out
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(v, vec![a.0, b.0], Box::new(|g, _, _, _| vec![Some(g.clone()), Some(g.clone())]))
    }

    /// Adds a constant tensor (no gradient to the constant).
    pub fn add_const(&mut self, a: Var, c: &Tensor<R>) -> Var {
        let v = self.value(a).zip_map(c, |x, y| x + y);
        self.push(v, vec![a.0], Box::new(|g, _, _, _| vec![Some(g.clone())]))
    }

    pub fn scale(&mut self, a: Var, s: R) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push(v, vec![a.0], Box::new(move |g, _, _, _| vec![Some(g.map(|x| x * s))]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| if x > R::zero() { x } else { R::zero() });
        self.push(
            v,
            vec![a.0],
            Box::new(|g, _, p, _| vec![Some(g.zip_map(p[0], |g, x| if x > R::zero() { g } else { R::zero() }))]),
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(gelu);
        self.push(v, vec![a.0], Box::new(|g, _, p, _| vec![Some(g.zip_map(p[0], |g, x| g * gelu_grad(x)))]))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).map(softplus);
        self.push(v, vec![a.0], Box::new(|g, _, p, _| vec![Some(g.zip_map(p[0], |g, x| g * sigmoid(x)))]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let old = self.value(a).shape().to_vec();
        let v = self.value(a).clone().reshape(shape);
        self.push(v, vec![a.0], Box::new(move |g, _, _, _| vec![Some(g.clone().reshape(&old))]))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose2();
        self.push(v, vec![a.0], Box::new(|g, _, _, _| vec![Some(g.transpose2())]))
    }

    /// `x·w + b` for `x: [N, in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (n, _) = self.value(x).dims2();
        let (_, dout) = self.value(w).dims2();
        let mut out = self.value(x).matmul(self.value(w));
        let bias = self.value(b).data().to_vec();
        for r in 0..n {
            for (o, &bb) in out.data_mut()[r * dout..(r + 1) * dout].iter_mut().zip(&bias) {
                *o += bb;
            }
        }
        self.push(
            out,
            vec![x.0, w.0, b.0],
            Box::new(move |g, _, p, need| {
                let dx = need[0].then(|| {
                    let (n, din) = p[0].dims2();
                    let mut dx = Tensor::zeros(&[n, din]);
                    gemm(R::one(), g.as_mat(), p[1].as_mat().t(), R::zero(), MatMut::new(dx.data_mut(), n, din));
                    dx
                });
                let dw = need[1].then(|| {
                    let (din, dout) = p[1].dims2();
                    let mut dw = Tensor::zeros(&[din, dout]);
                    gemm(R::one(), p[0].as_mat().t(), g.as_mat(), R::zero(), MatMut::new(dw.data_mut(), din, dout));
                    dw
                });
                let db = need[2].then(|| {
                    let (n, dout) = g.dims2();
                    let mut db = Tensor::zeros(&[dout]);
                    for r in 0..n {
                        for (d, &gv) in db.data_mut().iter_mut().zip(g.row(r)) {
                            *d += gv;
                        }
                    }
                    db
                });
                vec![dx, dw, db]
            }),
        )
    }

    /// Row-wise layer normalization of `x: [N, D]` with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (n, d) = xv.dims2();
        let gam = self.value(gamma).data().to_vec();
        let bet = self.value(beta).data().to_vec();
        let mut xhat = Tensor::zeros(&[n, d]);
        let mut inv_std = vec![R::zero(); n];
        let mut out = Tensor::zeros(&[n, d]);
        let dr = R::of(d as f64);
        for r in 0..n {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<R>() / dr;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<R>() / dr;
            let is = R::one() / (var + R::of(eps)).sqrt();
            inv_std[r] = is;
            for c in 0..d {
                let h = (row[c] - mean) * is;
                xhat.data_mut()[r * d + c] = h;
                out.data_mut()[r * d + c] = h * gam[c] + bet[c];
            }
        }
        self.push(
            out,
            vec![x.0, gamma.0, beta.0],
            Box::new(move |g, _, p, need| {
                let gam = p[1].data();
                let mut dx = need[0].then(|| Tensor::zeros(&[n, d]));
                let mut dg = Tensor::zeros(&[d]);
                let mut db = Tensor::zeros(&[d]);
                for r in 0..n {
                    let gr = g.row(r);
                    let hr = xhat.row(r);
                    let mut mean_dh = R::zero();
                    let mut mean_dh_h = R::zero();
                    for c in 0..d {
                        dg.data_mut()[c] += gr[c] * hr[c];
                        db.data_mut()[c] += gr[c];
                        let dh = gr[c] * gam[c];
                        mean_dh += dh;
                        mean_dh_h += dh * hr[c];
                    }
                    if let Some(dx) = dx.as_mut() {
                        mean_dh = mean_dh / dr;
                        mean_dh_h = mean_dh_h / dr;
                        for c in 0..d {
                            let dh = gr[c] * gam[c];
                            dx.data_mut()[r * d + c] = inv_std[r] * (dh - mean_dh - hr[c] * mean_dh_h);
                        }
                    }
                }
                vec![dx, need[1].then_some(dg), need[2].then_some(db)]
            }),
        )
    }

    /// 2-D convolution of `x: [C, H, W]` with `w: [O, C, kh, kw]` and bias `b: [O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, geom: ConvGeom) -> Var {
        let (c, h, wd) = self.value(x).dims3();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(ws.len(), 4, "conv weight must be [O, C, kh, kw]");
        assert_eq!(ws[1], c, "conv input channels");
        let (o, kh, kw) = (ws[0], ws[2], ws[3]);
        let (ho, wo) = conv_out_dims(h, wd, kh, kw, geom);
        let k = c * kh * kw;
        let cols = im2col(self.value(x).data(), c, h, wd, kh, kw, geom, ho, wo);
        let mut out = Tensor::zeros(&[o, ho, wo]);
        gemm(
            R::one(),
            MatRef::new(self.value(w).data(), o, k),
            MatRef::new(&cols, k, ho * wo),
            R::zero(),
            MatMut::new(out.data_mut(), o, ho * wo),
        );
        let bias = self.value(b).data();
        for (oc, &bv) in bias.iter().enumerate() {
            for v in &mut out.data_mut()[oc * ho * wo..(oc + 1) * ho * wo] {
                *v += bv;
            }
        }
        self.push(
            out,
            vec![x.0, w.0, b.0],
            Box::new(move |g, _, p, need| {
                let gm = MatRef::new(g.data(), o, ho * wo);
                let dx = need[0].then(|| {
                    let mut dcols = vec![R::zero(); k * ho * wo];
                    gemm(
                        R::one(),
                        MatRef::new(p[1].data(), o, k).t(),
                        gm,
                        R::zero(),
                        MatMut::new(&mut dcols, k, ho * wo),
                    );
                    Tensor::from_vec(&[c, h, wd], col2im(&dcols, c, h, wd, kh, kw, geom, ho, wo))
                });
                let dw = need[1].then(|| {
                    let mut dw = Tensor::zeros(&[o, c, kh, kw]);
                    gemm(R::one(), gm, MatRef::new(&cols, k, ho * wo).t(), R::zero(), MatMut::new(dw.data_mut(), o, k));
                    dw
                });
                let db = need[2].then(|| {
                    let sums = (0..o).map(|oc| g.data()[oc * ho * wo..(oc + 1) * ho * wo].iter().copied().sum()).collect();
                    Tensor::from_vec(&[o], sums)
                });
                vec![dx, dw, db]
            }),
        )
    }

    /// Nearest-neighbour 2× upsampling of `[C, H, W]` cropped to `[C, oh, ow]`.
    pub fn upsample2x(&mut self, x: Var, oh: usize, ow: usize) -> Var {
        let (c, h, w) = self.value(x).dims3();
        assert!(oh.div_ceil(2) <= h && ow.div_ceil(2) <= w, "upsample target too large");
        let xv = self.value(x).data();
        let mut out = vec![R::zero(); c * oh * ow];
        for ch in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    out[(ch * oh + i) * ow + j] = xv[(ch * h + i / 2) * w + j / 2];
                }
            }
        }
        self.push(
            Tensor::from_vec(&[c, oh, ow], out),
            vec![x.0],
            Box::new(move |g, _, _, _| {
                let mut dx = vec![R::zero(); c * h * w];
                for ch in 0..c {
                    for i in 0..oh {
                        for j in 0..ow {
                            dx[(ch * h + i / 2) * w + j / 2] += g.data()[(ch * oh + i) * ow + j];
                        }
                    }
                }
                vec![Some(Tensor::from_vec(&[c, h, w], dx))]
            }),
        )
    }

    /// Channels `[c0, c1)` of a `[C, H, W]` tensor.
    pub fn channels(&mut self, x: Var, c0: usize, c1: usize) -> Var {
        let (c, h, w) = self.value(x).dims3();
        assert!(c0 < c1 && c1 <= c);
        let plane = h * w;
        let v = Tensor::from_vec(&[c1 - c0, h, w], self.value(x).data()[c0 * plane..c1 * plane].to_vec());
        self.push(
            v,
            vec![x.0],
            Box::new(move |g, _, _, _| {
                let mut dx = Tensor::zeros(&[c, h, w]);
                dx.data_mut()[c0 * plane..c1 * plane].copy_from_slice(g.data());
                vec![Some(dx)]
            }),
        )
    }

    /// Top-left `[C, h, w]` window of a `[C, H, W]` tensor.
    pub fn crop(&mut self, x: Var, h: usize, w: usize) -> Var {
        let (c, hh, ww) = self.value(x).dims3();
        assert!(h <= hh && w <= ww);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            for i in 0..h {
                out.extend_from_slice(&xv[(ch * hh + i) * ww..(ch * hh + i) * ww + w]);
            }
        }
        self.push(
            Tensor::from_vec(&[c, h, w], out),
            vec![x.0],
            Box::new(move |g, _, _, _| {
                let mut dx = Tensor::zeros(&[c, hh, ww]);
                for ch in 0..c {
                    for i in 0..h {
                        dx.data_mut()[(ch * hh + i) * ww..(ch * hh + i) * ww + w]
                            .copy_from_slice(&g.data()[(ch * h + i) * w..(ch * h + i + 1) * w]);
                    }
                }
                vec![Some(dx)]
            }),
        )
    }

    /// Replaces rows of `x: [T, D]` flagged in `masked` by the vector `token: [D]`.
    pub fn mask_rows(&mut self, x: Var, token: Var, masked: &[bool]) -> Var {
        let (t, d) = self.value(x).dims2();
        assert_eq!(masked.len(), t, "mask length");
        let mut out = self.value(x).clone();
        let tok = self.value(token).data().to_vec();
        for (r, &m) in masked.iter().enumerate() {
            if m {
                out.data_mut()[r * d..(r + 1) * d].copy_from_slice(&tok);
            }
        }
        let masked = masked.to_vec();
        self.push(
            out,
            vec![x.0, token.0],
            Box::new(move |g, _, _, _| {
                let mut dx = g.clone();
                let mut dt = Tensor::zeros(&[d]);
                for (r, &m) in masked.iter().enumerate() {
                    if m {
                        for (acc, v) in dt.data_mut().iter_mut().zip(&mut dx.data_mut()[r * d..(r + 1) * d]) {
                            *acc += *v;
                            *v = R::zero();
                        }
                    }
                }
                vec![Some(dx), Some(dt)]
            }),
        )
    }

    /// Multi-head scaled dot-product self-attention over a packed `qkv: [T, 3D]`
    /// projection. Keys flagged in `hidden` receive zero weight from every query.
    pub fn attention(&mut self, qkv: Var, heads: usize, hidden: &[bool]) -> Var {
        let (t, d3) = self.value(qkv).dims2();
        let d = d3 / 3;
        assert_eq!(d * 3, d3, "qkv width must be 3·D");
        assert_eq!(d % heads, 0, "heads must divide D");
        assert_eq!(hidden.len(), t, "key mask length");
        let dh = d / heads;
        let scale = R::one() / R::of(dh as f64).sqrt();
        let probs = attention_probs(self.value(qkv), heads, hidden);
        let mut out = Tensor::zeros(&[t, d]);
        {
            let qv = self.value(qkv).as_mat();
            for (hh, p) in probs.iter().enumerate() {
                let o = MatMut { data: out.data_mut(), offset: 0, rows: t, cols: d, rs: d, cs: 1 }.cols(hh * dh, dh);
                gemm(R::one(), p.as_mat(), qv.cols(2 * d + hh * dh, dh), R::zero(), o);
            }
        }
        self.push(
            out,
            vec![qkv.0],
            Box::new(move |g, _, p, _| {
                let qkv = p[0].as_mat();
                let gm = g.as_mat();
                let mut dqkv = Tensor::zeros(&[t, d3]);
                for (hh, pr) in probs.iter().enumerate() {
                    let goh = gm.cols(hh * dh, dh);
                    // dV_h = Pᵀ dO_h
                    gemm(
                        R::one(),
                        pr.as_mat().t(),
                        goh,
                        R::zero(),
                        MatMut::new(dqkv.data_mut(), t, d3).cols(2 * d + hh * dh, dh),
                    );
                    // dP = dO_h V_hᵀ
                    let mut ds = Tensor::zeros(&[t, t]);
                    gemm(R::one(), goh, qkv.cols(2 * d + hh * dh, dh).t(), R::zero(), MatMut::new(ds.data_mut(), t, t));
                    for i in 0..t {
                        let prow = pr.row(i);
                        let srow = &mut ds.data_mut()[i * t..(i + 1) * t];
                        let dot: R = srow.iter().zip(prow).map(|(&a, &b)| a * b).sum();
                        for (s, &pv) in srow.iter_mut().zip(prow) {
                            *s = pv * (*s - dot);
                        }
                    }
                    gemm(
                        scale,
                        ds.as_mat(),
                        qkv.cols(d + hh * dh, dh),
                        R::zero(),
                        MatMut::new(dqkv.data_mut(), t, d3).cols(hh * dh, dh),
                    );
                    gemm(
                        scale,
                        ds.as_mat().t(),
                        qkv.cols(hh * dh, dh),
                        R::zero(),
                        MatMut::new(dqkv.data_mut(), t, d3).cols(d + hh * dh, dh),
                    );
                }
                vec![Some(dqkv)]
            }),
        )
    }

    /// Row-wise log-softmax of `[N, C]`.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let v = log_softmax_rows(self.value(x));
        self.push(
            v,
            vec![x.0],
            Box::new(|g, out, _, _| {
                let (n, c) = out.dims2();
                let mut dx = g.clone();
                for r in 0..n {
                    let gs: R = g.row(r).iter().copied().sum();
                    for j in 0..c {
                        dx.data_mut()[r * c + j] = g.at2(r, j) - out.at2(r, j).exp() * gs;
                    }
                }
                vec![Some(dx)]
            }),
        )
    }

    /// CTC negative log-likelihood of `target` under `logprobs: [T, C]`
    /// restricted to the first `valid_len` rows. Returns `None` when the target
    /// cannot be aligned within `valid_len` frames.
    pub fn ctc_loss(&mut self, logprobs: Var, valid_len: usize, target: &[usize]) -> Result<Option<Var>, ctc::CtcError> {
        let lp = self.value(logprobs);
        let (t, c) = lp.dims2();
        let lp64: Vec<f64> = lp.data().iter().map(|v| v.as_f64()).collect();
        let m = ctc::LogProbs::new(&lp64, t, c)?;
        let loss = ctc::ctc_loss(&m, valid_len, target)?;
        if !loss.is_finite() {
            return Ok(None);
        }
        let grad = ctc::ctc_grad(&m, valid_len, target)?;
        let grad: Vec<R> = grad.into_iter().map(R::of).collect();
        Ok(Some(self.push(
            Tensor::scalar(R::of(loss)),
            vec![logprobs.0],
            Box::new(move |g, _, _, _| {
                let s = g.data()[0];
                vec![Some(Tensor::from_vec(&[t, c], grad.iter().map(|&v| v * s).collect()))]
            }),
        )))
    }

    /// Mean binary cross-entropy between `sigmoid(logits)` and `target` (same
    /// shape), with positive examples weighted by `pos_weight`.
    pub fn bce_with_logits(&mut self, logits: Var, target: &Tensor<R>, pos_weight: R) -> Var {
        let z = self.value(logits);
        assert_eq!(z.shape(), target.shape(), "target shape");
        let n = R::of(z.len().max(1) as f64);
        let loss: R = z
            .data()
            .iter()
            .zip(target.data())
            .map(|(&z, &y)| pos_weight * y * softplus(-z) + (R::one() - y) * softplus(z))
            .sum::<R>()
            / n;
        let target = target.clone();
        self.push(
            Tensor::scalar(loss),
            vec![logits.0],
            Box::new(move |g, _, p, _| {
                let s = g.data()[0] / n;
                let dz = p[0].zip_map(&target, |z, y| {
                    let sg = sigmoid(z);
                    s * (pos_weight * y * (sg - R::one()) + (R::one() - y) * sg)
                });
                vec![Some(dz)]
            }),
        )
    }

    /// Mean absolute error over the positions where `weight` is non-zero,
    /// each weighted by `weight`.
    pub fn weighted_l1(&mut self, x: Var, target: &Tensor<R>, weight: &Tensor<R>) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.shape(), target.shape());
        assert_eq!(xv.shape(), weight.shape());
        let total = weight.sum().max(R::one());
        let loss = xv
            .data()
            .iter()
            .zip(target.data())
            .zip(weight.data())
            .map(|((&a, &b), &w)| w * (a - b).abs())
            .sum::<R>()
            / total;
        let target = target.clone();
        let weight = weight.clone();
        self.push(
            Tensor::scalar(loss),
            vec![x.0],
            Box::new(move |g, _, p, _| {
                let s = g.data()[0] / total;
                let mut dx = p[0].zip_map(&target, |a, b| {
                    if a > b {
                        s
                    } else if a < b {
                        -s
                    } else {
                        R::zero()
                    }
                });
                for (d, &w) in dx.data_mut().iter_mut().zip(weight.data()) {
                    *d *= w;
                }
                vec![Some(dx)]
            }),
        )
    }
}

fn accumulate<R: Real>(slot: &mut Option<Tensor<R>>, g: Tensor<R>) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

pub fn sigmoid<R: Real>(x: R) -> R {
    if x >= R::zero() {
        R::one() / (R::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (R::one() + e)
    }
}

pub fn softplus<R: Real>(x: R) -> R {
    x.max(R::zero()) + (-x.abs()).exp().ln_1p()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub fn gelu<R: Real>(x: R) -> R {
    let u = R::of(GELU_C) * (x + R::of(GELU_A) * x * x * x);
    R::of(0.5) * x * (R::one() + u.tanh())
}

fn gelu_grad<R: Real>(x: R) -> R {
    let u = R::of(GELU_C) * (x + R::of(GELU_A) * x * x * x);
    let th = u.tanh();
    let du = R::of(GELU_C) * (R::one() + R::of(3.0 * GELU_A) * x * x);
    R::of(0.5) * (R::one() + th) + R::of(0.5) * x * (R::one() - th * th) * du
}

pub fn log_softmax_rows<R: Real>(x: &Tensor<R>) -> Tensor<R> {
    let (n, c) = x.dims2();
    let mut out = x.clone();
    for r in 0..n {
        let row = &mut out.data_mut()[r * c..(r + 1) * c];
        let m = row.iter().copied().fold(R::neg_infinity(), R::max);
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<R>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    out
}

/// Per-head attention probability matrices `[T, T]` for a packed `qkv: [T, 3D]`.
/// Hidden keys get probability exactly zero.
pub fn attention_probs<R: Real>(qkv: &Tensor<R>, heads: usize, hidden: &[bool]) -> Vec<Tensor<R>> {
    let (t, d3) = qkv.dims2();
    let d = d3 / 3;
    let dh = d / heads;
    let scale = R::one() / R::of(dh as f64).sqrt();
    let qm = qkv.as_mat();
    (0..heads)
        .map(|h| {
            let mut s = Tensor::zeros(&[t, t]);
            gemm(scale, qm.cols(h * dh, dh), qm.cols(d + h * dh, dh).t(), R::zero(), MatMut::new(s.data_mut(), t, t));
            for i in 0..t {
                let row = &mut s.data_mut()[i * t..(i + 1) * t];
                let mut m = R::neg_infinity();
                for (v, &hid) in row.iter().zip(hidden) {
                    if !hid {
                        m = m.max(*v);
                    }
                }
                if m == R::neg_infinity() {
                    row.iter_mut().for_each(|v| *v = R::zero());
                    continue;
                }
                let mut sum = R::zero();
                for (v, &hid) in row.iter_mut().zip(hidden) {
                    *v = if hid { R::zero() } else { (*v - m).exp() };
                    sum += *v;
                }
                for v in row.iter_mut() {
                    *v = *v / sum;
                }
            }
            s
        })
        .collect()
}

pub fn conv_out_dims(h: usize, w: usize, kh: usize, kw: usize, geom: ConvGeom) -> (usize, usize) {
    let (sh, sw) = geom.stride;
    let (ph, pw) = geom.pad;
    assert!(h + 2 * ph >= kh && w + 2 * pw >= kw, "conv kernel larger than padded input");
    ((h + 2 * ph - kh) / sh + 1, (w + 2 * pw - kw) / sw + 1)
}

#[allow(clippy::too_many_arguments)]
fn im2col<R: Real>(
    x: &[R],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    geom: ConvGeom,
    ho: usize,
    wo: usize,
) -> Vec<R> {
    let (sh, sw) = geom.stride;
    let (ph, pw) = geom.pad;
    let n = ho * wo;
    let mut cols = vec![R::zero(); c * kh * kw * n];
    for ch in 0..c {
        for i in 0..kh {
            for j in 0..kw {
                let row = ((ch * kh + i) * kw + j) * n;
                for oy in 0..ho {
                    let y = (oy * sh + i) as isize - ph as isize;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    let src = (ch * h + y as usize) * w;
                    let dst = row + oy * wo;
                    for ox in 0..wo {
                        let xx = (ox * sw + j) as isize - pw as isize;
                        if xx >= 0 && xx < w as isize {
                            cols[dst + ox] = x[src + xx as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im<R: Real>(
    cols: &[R],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    geom: ConvGeom,
    ho: usize,
    wo: usize,
) -> Vec<R> {
    let (sh, sw) = geom.stride;
    let (ph, pw) = geom.pad;
    let n = ho * wo;
    let mut x = vec![R::zero(); c * h * w];
    for ch in 0..c {
        for i in 0..kh {
            for j in 0..kw {
                let row = ((ch * kh + i) * kw + j) * n;
                for oy in 0..ho {
                    let y = (oy * sh + i) as isize - ph as isize;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    let dst = (ch * h + y as usize) * w;
                    let src = row + oy * wo;
                    for ox in 0..wo {
                        let xx = (ox * sw + j) as isize - pw as isize;
                        if xx >= 0 && xx < w as isize {
                            x[dst + xx as usize] += cols[src + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    /// Central-difference check of d(sum(out ⊙ probe))/d(params).
    fn check<F>(params: Vec<Tensor<f64>>, build: F)
    where
        F: Fn(&mut Graph<f64>, &[Var]) -> Var,
    {
        let eval = |ps: &[Tensor<f64>]| -> (f64, Vec<Option<Tensor<f64>>>) {
            let mut g = Graph::new();
            let vars: Vec<Var> = ps.iter().enumerate().map(|(i, p)| g.param(i, p)).collect();
            let out = build(&mut g, &vars);
            let v = g.value(out).data()[0];
            (v, g.backward(out, ps.len()))
        };
        let (_, grads) = eval(&params);
        let eps = 1e-6;
        for (pi, p) in params.iter().enumerate() {
            let analytic = grads[pi].clone().unwrap_or_else(|| Tensor::zeros(p.shape()));
            for k in 0..p.len() {
                let mut plus = params.clone();
                plus[pi].data_mut()[k] += eps;
                let mut minus = params.clone();
                minus[pi].data_mut()[k] -= eps;
                let numeric = (eval(&plus).0 - eval(&minus).0) / (2.0 * eps);
                let a = analytic.data()[k];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                assert!(err < 1e-5, "param {pi}[{k}]: analytic {a} vs numeric {numeric}");
            }
        }
    }

    /// Reduces any tensor to a scalar with fixed random weights so every
    /// output element contributes to the check.
    fn probe(g: &mut Graph<f64>, v: Var, seed: u64) -> Var {
        let shape = g.value(v).shape().to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = rand_tensor(&mut rng, &shape);
        let n = w.len();
        let flat = g.reshape(v, &[1, n]);
        let wv = g.input(w.reshape(&[n, 1]));
        let zero = g.input(Tensor::zeros(&[1]));
        let s = g.linear(flat, wv, zero);
        g.reshape(s, &[1])
    }

    #[test]
    fn conv2d_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ps = vec![rand_tensor(&mut rng, &[2, 5, 7]), rand_tensor(&mut rng, &[3, 2, 3, 2]), rand_tensor(&mut rng, &[3])];
        check(ps, |g, v| {
            let y = g.conv2d(v[0], v[1], v[2], ConvGeom { stride: (2, 1), pad: (1, 1) });
            probe(g, y, 7)
        });
    }

    #[test]
    fn linear_layernorm_gelu_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ps = vec![
            rand_tensor(&mut rng, &[4, 6]),
            rand_tensor(&mut rng, &[6, 5]),
            rand_tensor(&mut rng, &[5]),
            rand_tensor(&mut rng, &[5]),
            rand_tensor(&mut rng, &[5]),
        ];
        check(ps, |g, v| {
            let y = g.linear(v[0], v[1], v[2]);
            let y = g.layer_norm(y, v[3], v[4], 1e-5);
            let y = g.gelu(y);
            let y = g.log_softmax(y);
            probe(g, y, 8)
        });
    }

    #[test]
    fn attention_gradients_with_hidden_keys() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ps = vec![rand_tensor(&mut rng, &[5, 12]), rand_tensor(&mut rng, &[12])];
        let hidden = [false, true, false, false, true];
        let masked = [true, false, false, true, false];
        check(ps, move |g, v| {
            let x = g.mask_rows(v[0], v[1], &masked);
            let y = g.attention(x, 2, &hidden);
            probe(g, y, 9)
        });
    }

    #[test]
    fn upsample_crop_channels_softplus_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ps = vec![rand_tensor(&mut rng, &[3, 3, 4])];
        check(ps, |g, v| {
            let u = g.upsample2x(v[0], 5, 8);
            let c = g.channels(u, 1, 3);
            let c = g.crop(c, 4, 6);
            let s = g.softplus(c);
            let r = g.relu(s);
            probe(g, r, 10)
        });
    }

    #[test]
    fn loss_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ps = vec![rand_tensor(&mut rng, &[2, 3, 3])];
        let target = Tensor::from_vec(&[2, 3, 3], (0..18).map(|i| (i % 3 == 0) as u8 as f64).collect());
        let weight = Tensor::from_vec(&[2, 3, 3], (0..18).map(|i| (i % 2) as f64).collect());
        let t2 = target.map(|v| v * 0.7 + 0.1);
        check(ps, move |g, v| {
            let a = g.bce_with_logits(v[0], &target, 3.0);
            let b = g.weighted_l1(v[0], &t2, &weight);
            let s = g.add(a, b);
            g.scale(s, 0.5)
        });
    }

    #[test]
    fn attention_rows_are_distributions_and_hidden_keys_get_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let qkv = rand_tensor(&mut rng, &[64, 48]);
        let mut hidden = vec![false; 64];
        for i in [3, 9, 17, 30, 41, 63] {
            hidden[i] = true;
        }
        for p in attention_probs(&qkv, 4, &hidden) {
            for i in 0..64 {
                let s: f64 = p.row(i).iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
                for (j, &h) in hidden.iter().enumerate() {
                    if h {
                        assert_eq!(p.at2(i, j), 0.0);
                    }
                }
            }
        }
    }
}
