//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every op records its output value and a closure mapping the output
//! gradient to parent gradients. Nodes that depend only on constants carry
//! no closure, so inference-only graphs pay nothing for backward support.

use crate::error::{shape_err, Error, Result};
use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

type BackwardFn = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Option<Tensor>>>;

struct Node {
    value: Tensor,
    parents: Vec<Var>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every node on the tape.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            parents: vec![],
            backward: None,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input whose gradient is tracked.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            parents: vec![],
            backward: None,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, parents: Vec<Var>, backward: BackwardFn) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            parents,
            backward: requires_grad.then_some(backward),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Errors with the given layer name when `v` holds NaN or infinity.
    pub fn ensure_finite(&self, v: Var, layer: &str) -> Result<()> {
        if self.value(v).all_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite {
                layer: layer.to_string(),
            })
        }
    }

    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(shape_err!(
                "backward root must be scalar, got {:?}",
                self.shape(root)
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.shape(root), 1.0));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            let Some(backward) = &node.backward else {
                continue;
            };
            let Some(g) = grads[i].take() else {
                continue;
            };
            let parent_vals: Vec<&Tensor> =
                node.parents.iter().map(|p| &self.nodes[p.0].value).collect();
            let pgrads = backward(&g, &parent_vals, &node.value);
            for (p, pg) in node.parents.iter().zip(pgrads) {
                let Some(pg) = pg else { continue };
                if !self.nodes[p.0].requires_grad {
                    continue;
                }
                match &mut grads[p.0] {
                    Some(acc) => acc.add_assign(&pg),
                    slot => *slot = Some(pg),
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(
            out,
            vec![a, b],
            Box::new(|g, _, _| vec![Some(g.clone()), Some(g.clone())]),
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(
            out,
            vec![a, b],
            Box::new(|g, _, _| vec![Some(g.clone()), Some(g.map(|v| -v))]),
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(
            out,
            vec![a, b],
            Box::new(|g, p, _| {
                vec![
                    Some(g.zip_map(p[1], |g, y| g * y).unwrap()),
                    Some(g.zip_map(p[0], |g, x| g * x).unwrap()),
                ]
            }),
        ))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|v| v * s);
        self.push(out, vec![a], Box::new(move |g, _, _| vec![Some(g.map(|v| v * s))]))
    }

    /// `x + y` where `y`'s shape equals the trailing axes of `x`.
    pub fn add_broadcast(&mut self, x: Var, y: Var) -> Result<Var> {
        let xs = self.shape(x);
        let ys = self.shape(y);
        if ys.len() > xs.len() || xs[xs.len() - ys.len()..] != *ys {
            return Err(shape_err!("cannot broadcast {:?} onto {:?}", ys, xs));
        }
        let inner = self.value(y).len();
        let mut out = self.value(x).clone();
        let yd = self.value(y).data();
        for chunk in out.data_mut().chunks_mut(inner.max(1)) {
            for (o, v) in chunk.iter_mut().zip(yd) {
                *o += v;
            }
        }
        let yshape = ys.to_vec();
        Ok(self.push(
            out,
            vec![x, y],
            Box::new(move |g, _, _| {
                let mut gy = vec![0.0; inner];
                for chunk in g.data().chunks(inner.max(1)) {
                    for (acc, v) in gy.iter_mut().zip(chunk) {
                        *acc += v;
                    }
                }
                vec![
                    Some(g.clone()),
                    Some(Tensor::from_vec(&yshape, gy).unwrap()),
                ]
            }),
        ))
    }

    /// `x[n, c, ..] + v[n, c]` for `x` of shape (N, C, ...).
    pub fn add_channel(&mut self, x: Var, v: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let vs = self.shape(v);
        if xs.len() < 2 || vs != [xs[0], xs[1]] {
            return Err(shape_err!("add_channel {:?} onto {:?}", vs, xs));
        }
        let spatial: usize = xs[2..].iter().product();
        let mut out = self.value(x).clone();
        let vd = self.value(v).data();
        for (chunk, add) in out.data_mut().chunks_mut(spatial).zip(vd) {
            chunk.iter_mut().for_each(|o| *o += add);
        }
        let vshape = vec![xs[0], xs[1]];
        Ok(self.push(
            out,
            vec![x, v],
            Box::new(move |g, _, _| {
                let gv = g.data().chunks(spatial).map(|c| c.iter().sum()).collect();
                vec![
                    Some(g.clone()),
                    Some(Tensor::from_vec(&vshape, gv).unwrap()),
                ]
            }),
        ))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v / (1.0 + (-v).exp()));
        self.push(
            out,
            vec![x],
            Box::new(|g, p, _| {
                let d = p[0].map(|v| {
                    let s = 1.0 / (1.0 + (-v).exp());
                    s * (1.0 + v * (1.0 - s))
                });
                vec![Some(g.zip_map(&d, |a, b| a * b).unwrap())]
            }),
        )
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu);
        self.push(
            out,
            vec![x],
            Box::new(|g, p, _| {
                let d = p[0].map(gelu_grad);
                vec![Some(g.zip_map(&d, |a, b| a * b).unwrap())]
            }),
        )
    }

    // ---- shape ----

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let src = self.shape(x).to_vec();
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(
            out,
            vec![x],
            Box::new(move |g, _, _| vec![Some(g.clone().reshape(&src).unwrap())]),
        ))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let out = self.value(x).permute(axes)?;
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        Ok(self.push(
            out,
            vec![x],
            Box::new(move |g, _, _| vec![Some(g.permute(&inverse).unwrap())]),
        ))
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let out = self.value(x).narrow(axis, start, len)?;
        let src = self.shape(x).to_vec();
        Ok(self.push(
            out,
            vec![x],
            Box::new(move |g, _, _| {
                let mut before = src.clone();
                before[axis] = start;
                let mut after = src.clone();
                after[axis] = src[axis] - start - len;
                let zb = Tensor::zeros(&before);
                let za = Tensor::zeros(&after);
                vec![Some(Tensor::concat(&[&zb, g, &za], axis).unwrap())]
            }),
        ))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let vals: Vec<&Tensor> = parts.iter().map(|p| self.value(*p)).collect();
        let sizes: Vec<usize> = vals.iter().map(|v| v.dim(axis)).collect();
        let out = Tensor::concat(&vals, axis)?;
        Ok(self.push(
            out,
            parts.to_vec(),
            Box::new(move |g, _, _| {
                let mut start = 0;
                sizes
                    .iter()
                    .map(|&len| {
                        let piece = g.narrow(axis, start, len).unwrap();
                        start += len;
                        Some(piece)
                    })
                    .collect()
            }),
        ))
    }

    // ---- linear algebra ----

    /// `x @ w` over the last axis of `x`: (..., k) x (k, n) -> (..., n).
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || xs.is_empty() || *xs.last().unwrap() != ws[0] {
            return Err(shape_err!("matmul {:?} x {:?}", xs, ws));
        }
        let (k, n) = (ws[0], ws[1]);
        let m = self.value(x).len() / k.max(1);
        let mut out_shape = xs.clone();
        *out_shape.last_mut().unwrap() = n;
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(x).data(),
            false,
            self.value(w).data(),
            false,
            &mut out,
            false,
        );
        Ok(self.push(
            Tensor::from_vec(&out_shape, out)?,
            vec![x, w],
            Box::new(move |g, p, _| {
                let mut gx = vec![0.0; m * k];
                gemm(m, n, k, g.data(), false, p[1].data(), true, &mut gx, false);
                let mut gw = vec![0.0; k * n];
                gemm(k, m, n, p[0].data(), true, g.data(), false, &mut gw, false);
                vec![
                    Some(Tensor::from_vec(&xs, gx).unwrap()),
                    Some(Tensor::from_vec(&ws, gw).unwrap()),
                ]
            }),
        ))
    }

    /// `x @ w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_broadcast(y, b),
            None => Ok(y),
        }
    }

    /// Batched product (B, M, K) x (B, K, N) -> (B, M, N); with `trans_b`
    /// the second operand is (B, N, K).
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let as_ = self.shape(a).to_vec();
        let bs = self.shape(b).to_vec();
        if as_.len() != 3 || bs.len() != 3 || as_[0] != bs[0] {
            return Err(shape_err!("bmm {:?} x {:?}", as_, bs));
        }
        let (batch, m, k) = (as_[0], as_[1], as_[2]);
        let (kb, n) = if trans_b { (bs[2], bs[1]) } else { (bs[1], bs[2]) };
        if kb != k {
            return Err(shape_err!("bmm inner dims {:?} x {:?}", as_, bs));
        }
        let mut out = vec![0.0; batch * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &ad[i * m * k..],
                false,
                &bd[i * k * n..],
                trans_b,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        Ok(self.push(
            Tensor::from_vec(&[batch, m, n], out)?,
            vec![a, b],
            Box::new(move |g, p, _| {
                let (ad, bd, gd) = (p[0].data(), p[1].data(), g.data());
                let mut ga = vec![0.0; batch * m * k];
                let mut gb = vec![0.0; batch * k * n];
                for i in 0..batch {
                    let gi = &gd[i * m * n..];
                    // dA = dC @ B^T  (B stored (k,n)) or dC @ B (B stored (n,k))
                    gemm(
                        m,
                        n,
                        k,
                        gi,
                        false,
                        &bd[i * k * n..],
                        !trans_b,
                        &mut ga[i * m * k..(i + 1) * m * k],
                        false,
                    );
                    if trans_b {
                        // dB (n,k) = dC^T @ A
                        gemm(
                            n,
                            m,
                            k,
                            gi,
                            true,
                            &ad[i * m * k..],
                            false,
                            &mut gb[i * k * n..(i + 1) * k * n],
                            false,
                        );
                    } else {
                        // dB (k,n) = A^T @ dC
                        gemm(
                            k,
                            m,
                            n,
                            &ad[i * m * k..],
                            true,
                            gi,
                            false,
                            &mut gb[i * k * n..(i + 1) * k * n],
                            false,
                        );
                    }
                }
                vec![
                    Some(Tensor::from_vec(&as_, ga).unwrap()),
                    Some(Tensor::from_vec(&bs, gb).unwrap()),
                ]
            }),
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape
            .last()
            .ok_or_else(|| shape_err!("softmax of a scalar"))?;
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(n) {
            softmax_in_place(row);
        }
        Ok(self.push(
            out,
            vec![x],
            Box::new(move |g, _, y| {
                let mut gx = g.clone();
                for (gr, yr) in gx.data_mut().chunks_mut(n).zip(y.data().chunks(n)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for (gv, yv) in gr.iter_mut().zip(yr) {
                        *gv = yv * (*gv - dot);
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    // ---- normalization ----

    /// Normalizes each row over the last axis, then applies `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| shape_err!("layer_norm of scalar"))?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(shape_err!(
                "layer_norm width {} vs gain {:?} bias {:?}",
                d,
                self.shape(gain),
                self.shape(bias)
            ));
        }
        let (xhat, inv_std) = normalize_rows(self.value(x).data(), d, eps);
        let (gd, bd) = (self.value(gain).data(), self.value(bias).data());
        let out: Vec<f64> = xhat
            .chunks(d)
            .flat_map(|r| r.iter().zip(gd).zip(bd).map(|((v, g), b)| v * g + b))
            .collect();
        Ok(self.push(
            Tensor::from_vec(&shape, out)?,
            vec![x, gain, bias],
            Box::new(move |g, p, _| {
                let gain = p[1].data();
                let mut ggain = vec![0.0; d];
                let mut gbias = vec![0.0; d];
                let mut dxhat = vec![0.0; xhat.len()];
                for (r, grow) in g.data().chunks(d).enumerate() {
                    for j in 0..d {
                        let i = r * d + j;
                        ggain[j] += grow[j] * xhat[i];
                        gbias[j] += grow[j];
                        dxhat[i] = grow[j] * gain[j];
                    }
                }
                let gx = normalize_backward(&dxhat, &xhat, &inv_std, d);
                vec![
                    Some(Tensor::from_vec(&shape, gx).unwrap()),
                    Some(Tensor::from_vec(&[d], ggain).unwrap()),
                    Some(Tensor::from_vec(&[d], gbias).unwrap()),
                ]
            }),
        ))
    }

    /// Group normalization over (N, C, H, W) with per-channel affine.
    pub fn group_norm(
        &mut self,
        x: Var,
        groups: usize,
        gain: Var,
        bias: Var,
        eps: f64,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 || groups == 0 || shape[1] % groups != 0 {
            return Err(shape_err!("group_norm({}) on {:?}", groups, shape));
        }
        let c = shape[1];
        if self.shape(gain) != [c] || self.shape(bias) != [c] {
            return Err(shape_err!("group_norm affine width != {}", c));
        }
        let hw = shape[2] * shape[3];
        let group_len = c / groups * hw;
        let (xhat, inv_std) = normalize_rows(self.value(x).data(), group_len, eps);
        let (gd, bd) = (self.value(gain).data(), self.value(bias).data());
        let mut out = xhat.clone();
        for (i, chunk) in out.chunks_mut(hw).enumerate() {
            let ch = i % c;
            chunk.iter_mut().for_each(|v| *v = *v * gd[ch] + bd[ch]);
        }
        Ok(self.push(
            Tensor::from_vec(&shape, out)?,
            vec![x, gain, bias],
            Box::new(move |g, p, _| {
                let gain = p[1].data();
                let mut ggain = vec![0.0; c];
                let mut gbias = vec![0.0; c];
                let mut dxhat = g.data().to_vec();
                for (i, (gchunk, xchunk)) in dxhat
                    .chunks_mut(hw)
                    .zip(xhat.chunks(hw))
                    .enumerate()
                {
                    let ch = i % c;
                    for (gv, xv) in gchunk.iter_mut().zip(xchunk) {
                        ggain[ch] += *gv * xv;
                        gbias[ch] += *gv;
                        *gv *= gain[ch];
                    }
                }
                let gx = normalize_backward(&dxhat, &xhat, &inv_std, group_len);
                vec![
                    Some(Tensor::from_vec(&shape, gx).unwrap()),
                    Some(Tensor::from_vec(&[c], ggain).unwrap()),
                    Some(Tensor::from_vec(&[c], gbias).unwrap()),
                ]
            }),
        ))
    }

    // ---- convolution ----

    /// 2-D cross-correlation: x (N, C, H, W), w (O, C, k, k), b (O).
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != ws[3] || stride == 0 {
            return Err(shape_err!("conv2d input {:?} weight {:?}", xs, ws));
        }
        let geo = ConvGeometry::new(xs[1], xs[2], xs[3], ws[2], stride, pad)?;
        let (n, o) = (xs[0], ws[0]);
        let ckk = geo.c * geo.k * geo.k;
        let (ho, wo) = (geo.out_h, geo.out_w);
        let mut out = vec![0.0; n * o * ho * wo];
        let mut cols = vec![0.0; ckk * ho * wo];
        let (xd, wd) = (self.value(x).data(), self.value(w).data());
        let in_len = geo.c * geo.h * geo.w;
        for i in 0..n {
            geo.im2col(&xd[i * in_len..(i + 1) * in_len], &mut cols);
            gemm(
                o,
                ckk,
                ho * wo,
                wd,
                false,
                &cols,
                false,
                &mut out[i * o * ho * wo..(i + 1) * o * ho * wo],
                false,
            );
        }
        let y = self.push(
            Tensor::from_vec(&[n, o, ho, wo], out)?,
            vec![x, w],
            Box::new(move |g, p, _| {
                let (xd, wd, gd) = (p[0].data(), p[1].data(), g.data());
                let mut gx = vec![0.0; n * in_len];
                let mut gw = vec![0.0; o * ckk];
                let mut cols = vec![0.0; ckk * ho * wo];
                let mut dcols = vec![0.0; ckk * ho * wo];
                for i in 0..n {
                    let gi = &gd[i * o * ho * wo..(i + 1) * o * ho * wo];
                    geo.im2col(&xd[i * in_len..(i + 1) * in_len], &mut cols);
                    gemm(o, ho * wo, ckk, gi, false, &cols, true, &mut gw, true);
                    gemm(ckk, o, ho * wo, wd, true, gi, false, &mut dcols, false);
                    geo.col2im(&dcols, &mut gx[i * in_len..(i + 1) * in_len]);
                }
                vec![
                    Some(Tensor::from_vec(&xs, gx).unwrap()),
                    Some(Tensor::from_vec(&ws, gw).unwrap()),
                ]
            }),
        );
        match b {
            Some(b) => self.add_channel_bias(y, b),
            None => Ok(y),
        }
    }

    /// Transposed convolution: x (N, Cin, H, W), w (Cin, Cout, k, k).
    /// Output side is `(H - 1) * stride - 2 * pad + k`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[0] != xs[1] || ws[2] != ws[3] || stride == 0 {
            return Err(shape_err!("conv_transpose2d input {:?} weight {:?}", xs, ws));
        }
        let (n, cin, h, wdt) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, k) = (ws[1], ws[2]);
        let oh = ((h - 1) * stride + k)
            .checked_sub(2 * pad)
            .ok_or_else(|| shape_err!("conv_transpose2d padding too large"))?;
        let ow = ((wdt - 1) * stride + k)
            .checked_sub(2 * pad)
            .ok_or_else(|| shape_err!("conv_transpose2d padding too large"))?;
        // The geometry of the adjoint forward convolution (output -> input).
        let geo = ConvGeometry::new(cout, oh, ow, k, stride, pad)?;
        if geo.out_h != h || geo.out_w != wdt {
            return Err(shape_err!("conv_transpose2d geometry mismatch for {:?}", xs));
        }
        let ckk = cout * k * k;
        let in_len = cin * h * wdt;
        let out_len = cout * oh * ow;
        let mut out = vec![0.0; n * out_len];
        let mut cols = vec![0.0; ckk * h * wdt];
        let (xd, wd) = (self.value(x).data(), self.value(w).data());
        for i in 0..n {
            gemm(
                ckk,
                cin,
                h * wdt,
                wd,
                true,
                &xd[i * in_len..(i + 1) * in_len],
                false,
                &mut cols,
                false,
            );
            geo.col2im(&cols, &mut out[i * out_len..(i + 1) * out_len]);
        }
        let y = self.push(
            Tensor::from_vec(&[n, cout, oh, ow], out)?,
            vec![x, w],
            Box::new(move |g, p, _| {
                let (xd, wd, gd) = (p[0].data(), p[1].data(), g.data());
                let mut gx = vec![0.0; n * in_len];
                let mut gw = vec![0.0; cin * ckk];
                let mut cols = vec![0.0; ckk * h * wdt];
                for i in 0..n {
                    geo.im2col(&gd[i * out_len..(i + 1) * out_len], &mut cols);
                    gemm(
                        cin,
                        ckk,
                        h * wdt,
                        wd,
                        false,
                        &cols,
                        false,
                        &mut gx[i * in_len..(i + 1) * in_len],
                        false,
                    );
                    gemm(
                        cin,
                        h * wdt,
                        ckk,
                        &xd[i * in_len..(i + 1) * in_len],
                        false,
                        &cols,
                        true,
                        &mut gw,
                        true,
                    );
                }
                vec![
                    Some(Tensor::from_vec(&xs, gx).unwrap()),
                    Some(Tensor::from_vec(&ws, gw).unwrap()),
                ]
            }),
        );
        match b {
            Some(b) => self.add_channel_bias(y, b),
            None => Ok(y),
        }
    }

    /// Adds a per-channel bias `b` (C) to x (N, C, ...).
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let c = self.value(b).len();
        if xs.len() < 2 || xs[1] != c || self.shape(b).len() != 1 {
            return Err(shape_err!("channel bias {:?} on {:?}", self.shape(b), xs));
        }
        let spatial: usize = xs[2..].iter().product();
        let mut out = self.value(x).clone();
        let bd = self.value(b).data();
        for (i, chunk) in out.data_mut().chunks_mut(spatial).enumerate() {
            let add = bd[i % c];
            chunk.iter_mut().for_each(|v| *v += add);
        }
        Ok(self.push(
            out,
            vec![x, b],
            Box::new(move |g, _, _| {
                let mut gb = vec![0.0; c];
                for (i, chunk) in g.data().chunks(spatial).enumerate() {
                    gb[i % c] += chunk.iter().sum::<f64>();
                }
                vec![Some(g.clone()), Some(Tensor::from_vec(&[c], gb).unwrap())]
            }),
        ))
    }

    /// Nearest-neighbour upsampling of (N, C, H, W) by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || factor == 0 {
            return Err(shape_err!("upsample {:?} by {}", xs, factor));
        }
        let (planes, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
        let (oh, ow) = (h * factor, w * factor);
        let xd = self.value(x).data();
        let mut out = vec![0.0; planes * oh * ow];
        for p in 0..planes {
            for y in 0..oh {
                for xx in 0..ow {
                    out[(p * oh + y) * ow + xx] = xd[(p * h + y / factor) * w + xx / factor];
                }
            }
        }
        Ok(self.push(
            Tensor::from_vec(&[xs[0], xs[1], oh, ow], out)?,
            vec![x],
            Box::new(move |g, _, _| {
                let gd = g.data();
                let mut gx = vec![0.0; planes * h * w];
                for p in 0..planes {
                    for y in 0..oh {
                        for xx in 0..ow {
                            gx[(p * h + y / factor) * w + xx / factor] +=
                                gd[(p * oh + y) * ow + xx];
                        }
                    }
                }
                vec![Some(Tensor::from_vec(&xs, gx).unwrap())]
            }),
        ))
    }

    // ---- reductions ----

    pub fn mean(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let n = self.value(x).len() as f64;
        let out = Tensor::scalar(self.value(x).mean());
        self.push(
            out,
            vec![x],
            Box::new(move |g, _, _| vec![Some(Tensor::full(&shape, g.item() / n))]),
        )
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let out = Tensor::scalar(self.value(x).sum());
        self.push(
            out,
            vec![x],
            Box::new(move |g, _, _| vec![Some(Tensor::full(&shape, g.item()))]),
        )
    }

    /// Mean squared difference, a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean(sq))
    }
}

pub(crate) fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

/// Returns per-row standardized values and the per-row `1 / sqrt(var + eps)`.
fn normalize_rows(x: &[f64], len: usize, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let mut xhat = Vec::with_capacity(x.len());
    let mut inv = Vec::with_capacity(x.len() / len.max(1));
    for row in x.chunks(len) {
        let n = row.len() as f64;
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let is = 1.0 / (var + eps).sqrt();
        inv.push(is);
        xhat.extend(row.iter().map(|v| (v - mean) * is));
    }
    (xhat, inv)
}

fn normalize_backward(dxhat: &[f64], xhat: &[f64], inv_std: &[f64], len: usize) -> Vec<f64> {
    let mut gx = Vec::with_capacity(dxhat.len());
    for ((dr, xr), is) in dxhat.chunks(len).zip(xhat.chunks(len)).zip(inv_std) {
        let n = dr.len() as f64;
        let mean_d = dr.iter().sum::<f64>() / n;
        let mean_dx = dr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / n;
        gx.extend(
            dr.iter()
                .zip(xr)
                .map(|(d, x)| is * (d - mean_d - x * mean_dx)),
        );
    }
    gx
}

#[derive(Clone, Copy)]
struct ConvGeometry {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeometry {
    fn new(c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Result<Self> {
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(shape_err!("kernel {} larger than padded {}x{}", k, h, w));
        }
        Ok(Self {
            c,
            h,
            w,
            k,
            stride,
            pad,
            out_h: (h + 2 * pad - k) / stride + 1,
            out_w: (w + 2 * pad - k) / stride + 1,
        })
    }

    fn im2col(&self, img: &[f64], cols: &mut [f64]) {
        let (oh, ow) = (self.out_h, self.out_w);
        let mut row = 0;
        for ch in 0..self.c {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                    for y in 0..oh {
                        let iy = (y * self.stride + ky) as isize - self.pad as isize;
                        for x in 0..ow {
                            let ix = (x * self.stride + kx) as isize - self.pad as isize;
                            dst[y * ow + x] = if iy >= 0
                                && (iy as usize) < self.h
                                && ix >= 0
                                && (ix as usize) < self.w
                            {
                                img[(ch * self.h + iy as usize) * self.w + ix as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    /// Accumulates column gradients back onto the image (adds, does not overwrite).
    fn col2im(&self, cols: &[f64], img: &mut [f64]) {
        let (oh, ow) = (self.out_h, self.out_w);
        let mut row = 0;
        for ch in 0..self.c {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                    for y in 0..oh {
                        let iy = (y * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy as usize >= self.h {
                            continue;
                        }
                        for x in 0..ow {
                            let ix = (x * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && (ix as usize) < self.w {
                                img[(ch * self.h + iy as usize) * self.w + ix as usize] +=
                                    src[y * ow + x];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}
