//! Wengert tape: reverse-mode AD over whole-tensor operations.
//!
//! Operations append nodes holding the forward value plus a closure that maps
//! the output cotangent to per-parent contributions. The tape is already in
//! topological order, so `backward` is a single reverse sweep.

use super::conv::{
    conv3d_backward_bias, conv3d_backward_input, conv3d_backward_weight, conv3d_forward,
    conv_out_extent, conv_transpose_out_extent, ConvDims,
};
use super::{Scalar, Tensor, TensorError};
use rayon::prelude::*;
use std::sync::Arc;

pub type NodeId = usize;

type BackFn<T> = Box<
    dyn Fn(&Tensor<T>, &Tensor<T>, &[&Tensor<T>], &[bool]) -> Vec<Option<Tensor<T>>>,
>;

struct Node<T: Scalar> {
    value: Tensor<T>,
    parents: Vec<NodeId>,
    backward: Option<BackFn<T>>,
    needs_grad: bool,
}

/// Gradients produced by a backward sweep, indexed by `NodeId`.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.grads.get_mut(id).and_then(|g| g.take())
    }
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    macs: u128,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            macs: 0,
        }
    }

    /// Differentiable input (parameter or checked variable).
    pub fn leaf(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, vec![], None, true)
    }

    /// Non-differentiable input (data, masks, lookup indices).
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, vec![], None, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulate operations recorded by forward matmul/linear/conv.
    pub fn mac_count(&self) -> u128 {
        self.macs
    }

    pub fn reset_mac_count(&mut self) {
        self.macs = 0;
    }

    fn push(
        &mut self,
        value: Tensor<T>,
        parents: Vec<NodeId>,
        backward: Option<BackFn<T>>,
        needs_grad: bool,
    ) -> NodeId {
        self.nodes.push(Node {
            value,
            parents,
            backward,
            needs_grad,
        });
        self.nodes.len() - 1
    }

    fn push_op(&mut self, value: Tensor<T>, parents: Vec<NodeId>, backward: BackFn<T>) -> NodeId {
        let needs = parents.iter().any(|&p| self.nodes[p].needs_grad);
        let backward = needs.then_some(backward);
        self.push(value, parents, backward, needs)
    }

    // ── elementwise ──────────────────────────────────────────────────────

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        same_shape("add", va, vb)?;
        let data = va
            .data()
            .iter()
            .zip(vb.data().iter())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push_op(
            value,
            vec![a, b],
            Box::new(|g, _, _, needs| {
                vec![
                    needs[0].then(|| g.clone()),
                    needs[1].then(|| g.clone()),
                ]
            }),
        ))
    }

    /// `a + b` where `b`'s shape is a suffix of `a`'s shape; `b` tiles over
    /// the leading axes.
    pub fn add_broadcast(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        let (sa, sb) = (va.shape(), vb.shape());
        if sb.len() > sa.len() || &sa[sa.len() - sb.len()..] != sb {
            return Err(TensorError::ShapeMismatch {
                context: "add_broadcast (suffix)".into(),
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let bn = vb.numel();
        let data = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + vb.data()[i % bn])
            .collect();
        let value = Tensor::new(sa.to_vec(), data)?;
        let b_shape = sb.to_vec();
        Ok(self.push_op(
            value,
            vec![a, b],
            Box::new(move |g, _, _, needs| {
                let gb = needs[1].then(|| {
                    let mut acc = Tensor::zeros(&b_shape);
                    for (i, &gv) in g.data().iter().enumerate() {
                        acc.data_mut()[i % bn] += gv;
                    }
                    acc
                });
                vec![needs[0].then(|| g.clone()), gb]
            }),
        ))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        same_shape("mul", va, vb)?;
        let data = va
            .data()
            .iter()
            .zip(vb.data().iter())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push_op(
            value,
            vec![a, b],
            Box::new(|g, _, parents, needs| {
                let prod = |u: &Tensor<T>| {
                    Tensor::new(
                        g.shape().to_vec(),
                        g.data()
                            .iter()
                            .zip(u.data().iter())
                            .map(|(&gv, &uv)| gv * uv)
                            .collect(),
                    )
                    .expect("same shape")
                };
                vec![
                    needs[0].then(|| prod(parents[1])),
                    needs[1].then(|| prod(parents[0])),
                ]
            }),
        ))
    }

    /// Elementwise quotient `a / b` (same shapes).
    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        same_shape("div", va, vb)?;
        let data = va
            .data()
            .iter()
            .zip(vb.data().iter())
            .map(|(&x, &y)| x / y)
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push_op(
            value,
            vec![a, b],
            Box::new(|g, _, parents, needs| {
                let (a, b) = (parents[0], parents[1]);
                let ga = needs[0].then(|| {
                    Tensor::new(
                        g.shape().to_vec(),
                        g.data()
                            .iter()
                            .zip(b.data().iter())
                            .map(|(&gv, &bv)| gv / bv)
                            .collect(),
                    )
                    .expect("same shape")
                });
                let gb = needs[1].then(|| {
                    Tensor::new(
                        g.shape().to_vec(),
                        g.data()
                            .iter()
                            .zip(a.data().iter().zip(b.data().iter()))
                            .map(|(&gv, (&av, &bv))| -gv * av / (bv * bv))
                            .collect(),
                    )
                    .expect("same shape")
                });
                vec![ga, gb]
            }),
        ))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: NodeId, scale: f64, shift: f64) -> NodeId {
        let (s, c) = (T::from_f64(scale), T::from_f64(shift));
        let value = self.nodes[x].value.map(|v| s * v + c);
        self.push_op(
            value,
            vec![x],
            Box::new(move |g, _, _, _| vec![Some(g.map(|gv| gv * s))]),
        )
    }

    /// Exact-erf GELU: `x * Phi(x)` with `Phi` the standard normal CDF.
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let value = self.nodes[x].value.map(gelu_scalar);
        self.push_op(
            value,
            vec![x],
            Box::new(|g, _, parents, _| {
                let x = parents[0];
                let data = g
                    .data()
                    .iter()
                    .zip(x.data().iter())
                    .map(|(&gv, &xv)| gv * gelu_grad_scalar(xv))
                    .collect();
                vec![Some(Tensor::new(x.shape().to_vec(), data).expect("same shape"))]
            }),
        )
    }

    // ── linear algebra ───────────────────────────────────────────────────

    /// `y = x · w + b` on the last axis: x `[..., in]`, w `[in, out]`, b `[out]`.
    pub fn linear(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    ) -> Result<NodeId, TensorError> {
        let (vx, vw) = (&self.nodes[x].value, &self.nodes[w].value);
        if vw.shape().len() != 2 || vx.last_dim() != vw.shape()[0] {
            return Err(TensorError::ShapeMismatch {
                context: "linear (x last dim vs w rows)".into(),
                lhs: vx.shape().to_vec(),
                rhs: vw.shape().to_vec(),
            });
        }
        let (din, dout) = (vw.shape()[0], vw.shape()[1]);
        if let Some(b) = b {
            let vb = &self.nodes[b].value;
            if vb.shape() != [dout] {
                return Err(TensorError::ShapeMismatch {
                    context: "linear (bias vs w cols)".into(),
                    lhs: vb.shape().to_vec(),
                    rhs: vec![dout],
                });
            }
        }
        let rows = vx.numel() / din;
        let mut out = vec![T::zero(); rows * dout];
        let bias = b.map(|b| self.nodes[b].value.data().to_vec());
        par_rows(&mut out, dout, |r, orow| {
            let xrow = &vx.data()[r * din..(r + 1) * din];
            if let Some(bias) = &bias {
                orow.copy_from_slice(bias);
            }
            for (i, &xv) in xrow.iter().enumerate() {
                let wrow = &vw.data()[i * dout..(i + 1) * dout];
                for (o, &wv) in wrow.iter().enumerate() {
                    orow[o] += xv * wv;
                }
            }
        });
        let mut shape = vx.shape().to_vec();
        *shape.last_mut().unwrap() = dout;
        let value = Tensor::new(shape, out)?;
        self.macs += (rows * din * dout) as u128;
        let mut parents = vec![x, w];
        if let Some(b) = b {
            parents.push(b);
        }
        Ok(self.push_op(
            value,
            parents,
            Box::new(move |g, _, parents, needs| {
                let (vx, vw) = (parents[0], parents[1]);
                let gx = needs[0].then(|| {
                    // dx = g · w^T
                    let mut gx = vec![T::zero(); rows * din];
                    par_rows(&mut gx, din, |r, gxrow| {
                        let grow = &g.data()[r * dout..(r + 1) * dout];
                        for (i, gxv) in gxrow.iter_mut().enumerate() {
                            let wrow = &vw.data()[i * dout..(i + 1) * dout];
                            let mut acc = T::zero();
                            for (o, &wv) in wrow.iter().enumerate() {
                                acc += grow[o] * wv;
                            }
                            *gxv = acc;
                        }
                    });
                    Tensor::new(vx.shape().to_vec(), gx).expect("shape")
                });
                let gw = needs[1].then(|| {
                    // dw = x^T · g, accumulated over rows
                    let mut gw = vec![T::zero(); din * dout];
                    for r in 0..rows {
                        let xrow = &vx.data()[r * din..(r + 1) * din];
                        let grow = &g.data()[r * dout..(r + 1) * dout];
                        for (i, &xv) in xrow.iter().enumerate() {
                            let gwrow = &mut gw[i * dout..(i + 1) * dout];
                            for (o, &gv) in grow.iter().enumerate() {
                                gwrow[o] += xv * gv;
                            }
                        }
                    }
                    Tensor::new(vec![din, dout], gw).expect("shape")
                });
                let mut out = vec![gx, gw];
                if needs.len() > 2 {
                    out.push(needs[2].then(|| {
                        let mut gb = vec![T::zero(); dout];
                        for r in 0..rows {
                            let grow = &g.data()[r * dout..(r + 1) * dout];
                            for (o, &gv) in grow.iter().enumerate() {
                                gb[o] += gv;
                            }
                        }
                        Tensor::new(vec![dout], gb).expect("shape")
                    }));
                }
                out
            }),
        ))
    }

    /// Batched `a · b^T`: a `[.., m, k]`, b `[.., n, k]` → `[.., m, n]`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        let (sa, sb) = (va.shape(), vb.shape());
        let ok = sa.len() >= 2
            && sb.len() == sa.len()
            && sa[..sa.len() - 2] == sb[..sb.len() - 2]
            && sa[sa.len() - 1] == sb[sb.len() - 1];
        if !ok {
            return Err(TensorError::ShapeMismatch {
                context: "matmul_nt".into(),
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let n = sb[sb.len() - 2];
        let batch = va.numel() / (m * k);
        let mut out = vec![T::zero(); batch * m * n];
        out.par_chunks_mut(m * n).enumerate().for_each(|(bi, oc)| {
            let ab = &va.data()[bi * m * k..(bi + 1) * m * k];
            let bb = &vb.data()[bi * n * k..(bi + 1) * n * k];
            for i in 0..m {
                for j in 0..n {
                    let mut acc = T::zero();
                    for p in 0..k {
                        acc += ab[i * k + p] * bb[j * k + p];
                    }
                    oc[i * n + j] = acc;
                }
            }
        });
        let mut shape = sa.to_vec();
        let l = shape.len();
        shape[l - 2] = m;
        shape[l - 1] = n;
        let value = Tensor::new(shape, out)?;
        self.macs += (batch * m * n * k) as u128;
        Ok(self.push_op(
            value,
            vec![a, b],
            Box::new(move |g, _, parents, needs| {
                let (va, vb) = (parents[0], parents[1]);
                // da = g · b ([m,n]·[n,k]); db = g^T · a ([n,m]·[m,k])
                let ga = needs[0].then(|| {
                    let mut ga = vec![T::zero(); batch * m * k];
                    ga.par_chunks_mut(m * k).enumerate().for_each(|(bi, gc)| {
                        let gb = &g.data()[bi * m * n..(bi + 1) * m * n];
                        let bb = &vb.data()[bi * n * k..(bi + 1) * n * k];
                        for i in 0..m {
                            for j in 0..n {
                                let gv = gb[i * n + j];
                                for p in 0..k {
                                    gc[i * k + p] += gv * bb[j * k + p];
                                }
                            }
                        }
                    });
                    Tensor::new(va.shape().to_vec(), ga).expect("shape")
                });
                let gbv = needs[1].then(|| {
                    let mut gbv = vec![T::zero(); batch * n * k];
                    gbv.par_chunks_mut(n * k).enumerate().for_each(|(bi, gc)| {
                        let gb = &g.data()[bi * m * n..(bi + 1) * m * n];
                        let ab = &va.data()[bi * m * k..(bi + 1) * m * k];
                        for i in 0..m {
                            for j in 0..n {
                                let gv = gb[i * n + j];
                                for p in 0..k {
                                    gc[j * k + p] += gv * ab[i * k + p];
                                }
                            }
                        }
                    });
                    Tensor::new(vb.shape().to_vec(), gbv).expect("shape")
                });
                vec![ga, gbv]
            }),
        ))
    }

    /// Batched `a · b`: a `[.., m, k]`, b `[.., k, n]` → `[.., m, n]`.
    pub fn matmul_nn(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        let (sa, sb) = (va.shape(), vb.shape());
        let ok = sa.len() >= 2
            && sb.len() == sa.len()
            && sa[..sa.len() - 2] == sb[..sb.len() - 2]
            && sa[sa.len() - 1] == sb[sb.len() - 2];
        if !ok {
            return Err(TensorError::ShapeMismatch {
                context: "matmul_nn".into(),
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let n = sb[sb.len() - 1];
        let batch = va.numel() / (m * k);
        let mut out = vec![T::zero(); batch * m * n];
        out.par_chunks_mut(m * n).enumerate().for_each(|(bi, oc)| {
            let ab = &va.data()[bi * m * k..(bi + 1) * m * k];
            let bb = &vb.data()[bi * k * n..(bi + 1) * k * n];
            for i in 0..m {
                for p in 0..k {
                    let av = ab[i * k + p];
                    let brow = &bb[p * n..(p + 1) * n];
                    let orow = &mut oc[i * n..(i + 1) * n];
                    for j in 0..n {
                        orow[j] += av * brow[j];
                    }
                }
            }
        });
        let mut shape = sa.to_vec();
        let l = shape.len();
        shape[l - 1] = n;
        let value = Tensor::new(shape, out)?;
        self.macs += (batch * m * n * k) as u128;
        Ok(self.push_op(
            value,
            vec![a, b],
            Box::new(move |g, _, parents, needs| {
                let (va, vb) = (parents[0], parents[1]);
                // da = g · b^T; db = a^T · g
                let ga = needs[0].then(|| {
                    let mut ga = vec![T::zero(); batch * m * k];
                    ga.par_chunks_mut(m * k).enumerate().for_each(|(bi, gc)| {
                        let gb = &g.data()[bi * m * n..(bi + 1) * m * n];
                        let bb = &vb.data()[bi * k * n..(bi + 1) * k * n];
                        for i in 0..m {
                            for p in 0..k {
                                let mut acc = T::zero();
                                let brow = &bb[p * n..(p + 1) * n];
                                let grow = &gb[i * n..(i + 1) * n];
                                for j in 0..n {
                                    acc += grow[j] * brow[j];
                                }
                                gc[i * k + p] = acc;
                            }
                        }
                    });
                    Tensor::new(va.shape().to_vec(), ga).expect("shape")
                });
                let gbv = needs[1].then(|| {
                    let mut gbv = vec![T::zero(); batch * k * n];
                    gbv.par_chunks_mut(k * n).enumerate().for_each(|(bi, gc)| {
                        let gb = &g.data()[bi * m * n..(bi + 1) * m * n];
                        let ab = &va.data()[bi * m * k..(bi + 1) * m * k];
                        for i in 0..m {
                            for p in 0..k {
                                let av = ab[i * k + p];
                                let grow = &gb[i * n..(i + 1) * n];
                                let gcrow = &mut gc[p * n..(p + 1) * n];
                                for j in 0..n {
                                    gcrow[j] += av * grow[j];
                                }
                            }
                        }
                    });
                    Tensor::new(vb.shape().to_vec(), gbv).expect("shape")
                });
                vec![ga, gbv]
            }),
        ))
    }

    // ── normalization and activations over the last axis ─────────────────

    /// Per-row zero-mean unit-variance over the last axis, then `gamma,beta` affine.
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<NodeId, TensorError> {
        let vx = &self.nodes[x].value;
        let c = vx.last_dim();
        for (name, p) in [("gamma", gamma), ("beta", beta)] {
            let vp = &self.nodes[p].value;
            if vp.shape() != [c] {
                return Err(TensorError::ShapeMismatch {
                    context: format!("layer_norm ({name} vs channels)"),
                    lhs: vp.shape().to_vec(),
                    rhs: vec![c],
                });
            }
        }
        let rows = vx.numel() / c;
        let epst = T::from_f64(eps);
        let vg = self.nodes[gamma].value.data().to_vec();
        let vb = self.nodes[beta].value.data().to_vec();
        let mut out = vec![T::zero(); vx.numel()];
        let mut xhat = vec![T::zero(); vx.numel()];
        let mut inv_std = vec![T::zero(); rows];
        let cn = T::from_f64(c as f64);
        for r in 0..rows {
            let xrow = &vx.data()[r * c..(r + 1) * c];
            let mut mean = T::zero();
            for &v in xrow {
                mean += v;
            }
            mean = mean / cn;
            let mut var = T::zero();
            for &v in xrow {
                let d = v - mean;
                var += d * d;
            }
            var = var / cn;
            let istd = (var + epst).sqrt().recip();
            inv_std[r] = istd;
            for i in 0..c {
                let h = (xrow[i] - mean) * istd;
                xhat[r * c + i] = h;
                out[r * c + i] = h * vg[i] + vb[i];
            }
        }
        let value = Tensor::new(vx.shape().to_vec(), out)?;
        let xhat = Arc::new(xhat);
        let inv_std = Arc::new(inv_std);
        Ok(self.push_op(
            value,
            vec![x, gamma, beta],
            Box::new(move |g, _, parents, needs| {
                let vx = parents[0];
                let vg = parents[1];
                let gx = needs[0].then(|| {
                    let mut gx = vec![T::zero(); vx.numel()];
                    for r in 0..rows {
                        let grow = &g.data()[r * c..(r + 1) * c];
                        let hrow = &xhat[r * c..(r + 1) * c];
                        // gy = dL/dxhat; dx = (gy - mean(gy) - xhat * mean(gy*xhat)) / std
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        let mut gy = vec![T::zero(); c];
                        for i in 0..c {
                            gy[i] = grow[i] * vg.data()[i];
                            m1 += gy[i];
                            m2 += gy[i] * hrow[i];
                        }
                        m1 = m1 / cn;
                        m2 = m2 / cn;
                        for i in 0..c {
                            gx[r * c + i] = (gy[i] - m1 - hrow[i] * m2) * inv_std[r];
                        }
                    }
                    Tensor::new(vx.shape().to_vec(), gx).expect("shape")
                });
                let gg = needs[1].then(|| {
                    let mut gg = vec![T::zero(); c];
                    for r in 0..rows {
                        for i in 0..c {
                            gg[i] += g.data()[r * c + i] * xhat[r * c + i];
                        }
                    }
                    Tensor::new(vec![c], gg).expect("shape")
                });
                let gb = needs[2].then(|| {
                    let mut gb = vec![T::zero(); c];
                    for r in 0..rows {
                        for i in 0..c {
                            gb[i] += g.data()[r * c + i];
                        }
                    }
                    Tensor::new(vec![c], gb).expect("shape")
                });
                vec![gx, gg, gb]
            }),
        ))
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax_lastdim(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let vx = &self.nodes[x].value;
        let c = vx.last_dim();
        if c == 0 {
            return Err(TensorError::Dimension(
                "softmax_lastdim: empty last axis".into(),
            ));
        }
        let rows = vx.numel() / c;
        let mut out = vec![T::zero(); vx.numel()];
        par_rows(&mut out, c, |r, orow| {
            let xrow = &vx.data()[r * c..(r + 1) * c];
            softmax_row(xrow, orow);
        });
        let value = Tensor::new(vx.shape().to_vec(), out)?;
        Ok(self.push_op(
            value,
            vec![x],
            Box::new(move |g, y, _, _| {
                let mut gx = vec![T::zero(); y.numel()];
                for r in 0..rows {
                    let yrow = &y.data()[r * c..(r + 1) * c];
                    let grow = &g.data()[r * c..(r + 1) * c];
                    let mut dot = T::zero();
                    for i in 0..c {
                        dot += grow[i] * yrow[i];
                    }
                    for i in 0..c {
                        gx[r * c + i] = yrow[i] * (grow[i] - dot);
                    }
                }
                vec![Some(Tensor::new(y.shape().to_vec(), gx).expect("shape"))]
            }),
        ))
    }

    // ── convolution ──────────────────────────────────────────────────────

    /// 3D cross-correlation: x `[cin,H,W,D]`, w `[cout,cin,k,k,k]`.
    pub fn conv3d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId, TensorError> {
        let dims = self.conv_dims("conv3d", x, w, stride, pad, false)?;
        let vx = &self.nodes[x].value;
        let vw = &self.nodes[w].value;
        let bias = b.map(|b| self.nodes[b].value.data().to_vec());
        let out = conv3d_forward(vx.data(), vw.data(), bias.as_deref(), dims);
        self.macs += (dims.cout * dims.cin * dims.k.pow(3)) as u128
            * (dims.out[0] * dims.out[1] * dims.out[2]) as u128;
        let value = Tensor::new(
            vec![dims.cout, dims.out[0], dims.out[1], dims.out[2]],
            out,
        )?;
        let mut parents = vec![x, w];
        if let Some(b) = b {
            parents.push(b);
        }
        Ok(self.push_op(
            value,
            parents,
            Box::new(move |g, _, parents, needs| {
                let (vx, vw) = (parents[0], parents[1]);
                let gx = needs[0].then(|| {
                    let gx = conv3d_backward_input(g.data(), vw.data(), dims);
                    Tensor::new(vx.shape().to_vec(), gx).expect("shape")
                });
                let gw = needs[1].then(|| {
                    let gw = conv3d_backward_weight(vx.data(), g.data(), dims);
                    Tensor::new(vw.shape().to_vec(), gw).expect("shape")
                });
                let mut out = vec![gx, gw];
                if needs.len() > 2 {
                    out.push(needs[2].then(|| {
                        let sp = dims.out[0] * dims.out[1] * dims.out[2];
                        Tensor::new(vec![dims.cout], conv3d_backward_bias(g.data(), dims.cout, sp))
                            .expect("shape")
                    }));
                }
                out
            }),
        ))
    }

    /// Adjoint of `conv3d` with shared parameters: x `[c1,...]`, w `[c1,c2,k,k,k]` → `[c2,...]`.
    pub fn conv_transpose3d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId, TensorError> {
        let dims = self.conv_dims("conv_transpose3d", x, w, stride, pad, true)?;
        let vx = &self.nodes[x].value;
        let vw = &self.nodes[w].value;
        // dims is phrased in forward-conv terms: inp = transposed output extents.
        let mut out = conv3d_backward_input(vx.data(), vw.data(), dims);
        let out_sp = dims.inp[0] * dims.inp[1] * dims.inp[2];
        if let Some(b) = b {
            let vb = self.nodes[b].value.data();
            for (ci, chunk) in out.chunks_mut(out_sp).enumerate() {
                for v in chunk.iter_mut() {
                    *v += vb[ci];
                }
            }
        }
        self.macs += (dims.cout * dims.cin * dims.k.pow(3)) as u128
            * (dims.out[0] * dims.out[1] * dims.out[2]) as u128;
        let value = Tensor::new(vec![dims.cin, dims.inp[0], dims.inp[1], dims.inp[2]], out)?;
        let mut parents = vec![x, w];
        if let Some(b) = b {
            parents.push(b);
        }
        Ok(self.push_op(
            value,
            parents,
            Box::new(move |g, _, parents, needs| {
                let (vx, vw) = (parents[0], parents[1]);
                let gx = needs[0].then(|| {
                    let gx = conv3d_forward(g.data(), vw.data(), None, dims);
                    Tensor::new(vx.shape().to_vec(), gx).expect("shape")
                });
                let gw = needs[1].then(|| {
                    let gw = conv3d_backward_weight(g.data(), vx.data(), dims);
                    Tensor::new(vw.shape().to_vec(), gw).expect("shape")
                });
                let mut out = vec![gx, gw];
                if needs.len() > 2 {
                    out.push(needs[2].then(|| {
                        let sp = dims.inp[0] * dims.inp[1] * dims.inp[2];
                        Tensor::new(vec![dims.cin], conv3d_backward_bias(g.data(), dims.cin, sp))
                            .expect("shape")
                    }));
                }
                out
            }),
        ))
    }

    fn conv_dims(
        &self,
        context: &str,
        x: NodeId,
        w: NodeId,
        stride: usize,
        pad: usize,
        transposed: bool,
    ) -> Result<ConvDims, TensorError> {
        let vx = &self.nodes[x].value;
        let vw = &self.nodes[w].value;
        let sx = vx.shape();
        let sw = vw.shape();
        if sx.len() != 4 || sw.len() != 5 || sw[2] != sw[3] || sw[3] != sw[4] {
            return Err(TensorError::ShapeMismatch {
                context: format!("{context} (x [C,H,W,D], w [C.,C.,k,k,k])"),
                lhs: sx.to_vec(),
                rhs: sw.to_vec(),
            });
        }
        // Forward conv reads channels from w's second axis ([cout, cin, ...]);
        // the transposed direction consumes cout ([c_in_of_transpose, c_out, ...]).
        let expect_cin = if transposed { sw[0] } else { sw[1] };
        if sx[0] != expect_cin {
            return Err(TensorError::ShapeMismatch {
                context: format!("{context} (input channels)"),
                lhs: sx.to_vec(),
                rhs: sw.to_vec(),
            });
        }
        let k = sw[2];
        if stride == 0 {
            return Err(TensorError::Dimension(format!("{context}: stride must be >= 1")));
        }
        if transposed {
            // x lives in the forward conv's output space.
            let mut inp = [0usize; 3];
            for a in 0..3 {
                inp[a] = conv_transpose_out_extent(sx[1 + a], k, stride, pad).ok_or_else(|| {
                    TensorError::Dimension(format!(
                        "{context}: invalid extent {} for k={k} stride={stride} pad={pad}",
                        sx[1 + a]
                    ))
                })?;
            }
            Ok(ConvDims {
                cin: sw[1],
                cout: sw[0],
                k,
                stride,
                pad,
                inp,
                out: [sx[1], sx[2], sx[3]],
            })
        } else {
            let mut out = [0usize; 3];
            for a in 0..3 {
                out[a] = conv_out_extent(sx[1 + a], k, stride, pad).ok_or_else(|| {
                    TensorError::Dimension(format!(
                        "{context}: kernel {k} larger than padded input {} (pad {pad})",
                        sx[1 + a]
                    ))
                })?;
            }
            Ok(ConvDims {
                cin: sw[1],
                cout: sw[0],
                k,
                stride,
                pad,
                inp: [sx[1], sx[2], sx[3]],
                out,
            })
        }
    }

    // ── data movement ────────────────────────────────────────────────────

    /// Row gather: output row `i` is input row `map[i]`, or zeros when
    /// `map[i] < 0`. Rows are `row` contiguous scalars. One op covers axis
    /// permutation, window partition/merge, cyclic shift, padding, cropping.
    pub fn gather_map(
        &mut self,
        x: NodeId,
        map: Arc<Vec<i64>>,
        row: usize,
        out_shape: Vec<usize>,
    ) -> Result<NodeId, TensorError> {
        let vx = &self.nodes[x].value;
        let out_numel: usize = out_shape.iter().product();
        if row == 0 || out_numel != map.len() * row || vx.numel() % row != 0 {
            return Err(TensorError::Dimension(format!(
                "gather_map: {} rows of {row} into shape {out_shape:?} from {:?}",
                map.len(),
                vx.shape()
            )));
        }
        let in_rows = vx.numel() / row;
        if let Some(&bad) = map.iter().find(|&&m| m >= in_rows as i64) {
            return Err(TensorError::Dimension(format!(
                "gather_map: row index {bad} out of range ({in_rows} input rows)"
            )));
        }
        let mut out = vec![T::zero(); out_numel];
        let xd = vx.data();
        let map_fwd = Arc::clone(&map);
        par_rows(&mut out, row, |r, orow| {
            let m = map_fwd[r];
            if m >= 0 {
                let s = m as usize * row;
                orow.copy_from_slice(&xd[s..s + row]);
            }
        });
        let value = Tensor::new(out_shape, out)?;
        let in_shape = vx.shape().to_vec();
        Ok(self.push_op(
            value,
            vec![x],
            Box::new(move |g, _, _, _| {
                let mut gx = vec![T::zero(); in_rows * row];
                for (r, &m) in map.iter().enumerate() {
                    if m >= 0 {
                        let dst = &mut gx[m as usize * row..(m as usize + 1) * row];
                        let src = &g.data()[r * row..(r + 1) * row];
                        for (d, s) in dst.iter_mut().zip(src.iter()) {
                            *d += *s;
                        }
                    }
                }
                vec![Some(Tensor::new(in_shape.clone(), gx).expect("shape"))]
            }),
        ))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId, TensorError> {
        let vx = &self.nodes[x].value;
        let value = vx.clone().reshaped(&shape)?;
        let in_shape = vx.shape().to_vec();
        Ok(self.push_op(
            value,
            vec![x],
            Box::new(move |g, _, _, _| {
                vec![Some(g.clone().reshaped(&in_shape).expect("numel"))]
            }),
        ))
    }

    /// Concatenate two tensors along `axis`; other extents must agree.
    pub fn concat(&mut self, a: NodeId, b: NodeId, axis: usize) -> Result<NodeId, TensorError> {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        let (sa, sb) = (va.shape(), vb.shape());
        let ok = sa.len() == sb.len()
            && axis < sa.len()
            && sa
                .iter()
                .zip(sb.iter())
                .enumerate()
                .all(|(i, (x, y))| i == axis || x == y);
        if !ok {
            return Err(TensorError::ShapeMismatch {
                context: format!("concat (axis {axis})"),
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let outer: usize = sa[..axis].iter().product();
        let inner: usize = sa[axis + 1..].iter().product();
        let (na, nb) = (sa[axis], sb[axis]);
        let mut shape = sa.to_vec();
        shape[axis] = na + nb;
        let mut out = Vec::with_capacity(va.numel() + vb.numel());
        for o in 0..outer {
            out.extend_from_slice(&va.data()[o * na * inner..(o + 1) * na * inner]);
            out.extend_from_slice(&vb.data()[o * nb * inner..(o + 1) * nb * inner]);
        }
        let value = Tensor::new(shape, out)?;
        let (sa, sb) = (sa.to_vec(), sb.to_vec());
        Ok(self.push_op(
            value,
            vec![a, b],
            Box::new(move |g, _, _, needs| {
                let stripe = (na + nb) * inner;
                let ga = needs[0].then(|| {
                    let mut ga = Vec::with_capacity(outer * na * inner);
                    for o in 0..outer {
                        ga.extend_from_slice(&g.data()[o * stripe..o * stripe + na * inner]);
                    }
                    Tensor::new(sa.clone(), ga).expect("shape")
                });
                let gb = needs[1].then(|| {
                    let mut gb = Vec::with_capacity(outer * nb * inner);
                    for o in 0..outer {
                        gb.extend_from_slice(
                            &g.data()[o * stripe + na * inner..(o + 1) * stripe],
                        );
                    }
                    Tensor::new(sb.clone(), gb).expect("shape")
                });
                vec![ga, gb]
            }),
        ))
    }

    /// Per-head bias lookup: table `[n_h, tsize]`, idx `P*P` → `[n_h, P, P]`.
    pub fn bias_gather(
        &mut self,
        table: NodeId,
        idx: Arc<Vec<usize>>,
        p: usize,
    ) -> Result<NodeId, TensorError> {
        let vt = &self.nodes[table].value;
        if vt.shape().len() != 2 || idx.len() != p * p {
            return Err(TensorError::Dimension(format!(
                "bias_gather: table {:?}, {} indices for P={p}",
                vt.shape(),
                idx.len()
            )));
        }
        let (heads, tsize) = (vt.shape()[0], vt.shape()[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= tsize) {
            return Err(TensorError::Dimension(format!(
                "bias_gather: index {bad} out of table size {tsize}"
            )));
        }
        let mut out = vec![T::zero(); heads * p * p];
        for h in 0..heads {
            let trow = &vt.data()[h * tsize..(h + 1) * tsize];
            let orow = &mut out[h * p * p..(h + 1) * p * p];
            for (o, &i) in orow.iter_mut().zip(idx.iter()) {
                *o = trow[i];
            }
        }
        let value = Tensor::new(vec![heads, p, p], out)?;
        Ok(self.push_op(
            value,
            vec![table],
            Box::new(move |g, _, _, _| {
                let mut gt = vec![T::zero(); heads * tsize];
                for h in 0..heads {
                    let grow = &g.data()[h * p * p..(h + 1) * p * p];
                    let trow = &mut gt[h * tsize..(h + 1) * tsize];
                    for (gv, &i) in grow.iter().zip(idx.iter()) {
                        trow[i] += *gv;
                    }
                }
                vec![Some(Tensor::new(vec![heads, tsize], gt).expect("shape"))]
            }),
        ))
    }

    /// Doubles each spatial axis of a channels-last token grid `[h,w,d,C]`
    /// by trilinear interpolation (endpoints pinned to endpoints).
    pub fn upsample_trilinear2x(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let vx = &self.nodes[x].value;
        let s = vx.shape();
        if s.len() != 4 {
            return Err(TensorError::Dimension(format!(
                "upsample_trilinear2x: expected [h,w,d,C], got {s:?}"
            )));
        }
        let (h, w, d, c) = (s[0], s[1], s[2], s[3]);
        let (oh, ow, od) = (2 * h, 2 * w, 2 * d);
        let ax_h = Arc::new(axis_lerp(h, oh));
        let ax_w = Arc::new(axis_lerp(w, ow));
        let ax_d = Arc::new(axis_lerp(d, od));
        let mut out = vec![T::zero(); oh * ow * od * c];
        let xd = vx.data();
        let (axh, axw, axd) = (Arc::clone(&ax_h), Arc::clone(&ax_w), Arc::clone(&ax_d));
        par_rows(&mut out, c, |r, orow| {
            let k = r % od;
            let j = (r / od) % ow;
            let i = r / (od * ow);
            let (i0, i1, fi) = axh[i];
            let (j0, j1, fj) = axw[j];
            let (k0, k1, fk) = axd[k];
            for (corner, wgt) in corner_weights::<T>(fi, fj, fk) {
                let (ci, cj, ck) = (
                    if corner.0 { i1 } else { i0 },
                    if corner.1 { j1 } else { j0 },
                    if corner.2 { k1 } else { k0 },
                );
                if wgt == T::zero() {
                    continue;
                }
                let src = ((ci * w + cj) * d + ck) * c;
                for (o, &v) in orow.iter_mut().zip(xd[src..src + c].iter()) {
                    *o += wgt * v;
                }
            }
        });
        let value = Tensor::new(vec![oh, ow, od, c], out)?;
        let in_shape = s.to_vec();
        Ok(self.push_op(
            value,
            vec![x],
            Box::new(move |g, _, _, _| {
                let mut gx = vec![T::zero(); h * w * d * c];
                for r in 0..oh * ow * od {
                    let k = r % od;
                    let j = (r / od) % ow;
                    let i = r / (od * ow);
                    let (i0, i1, fi) = ax_h[i];
                    let (j0, j1, fj) = ax_w[j];
                    let (k0, k1, fk) = ax_d[k];
                    let grow = &g.data()[r * c..(r + 1) * c];
                    for (corner, wgt) in corner_weights::<T>(fi, fj, fk) {
                        if wgt == T::zero() {
                            continue;
                        }
                        let (ci, cj, ck) = (
                            if corner.0 { i1 } else { i0 },
                            if corner.1 { j1 } else { j0 },
                            if corner.2 { k1 } else { k0 },
                        );
                        let dst = ((ci * w + cj) * d + ck) * c;
                        for (x, &gv) in gx[dst..dst + c].iter_mut().zip(grow.iter()) {
                            *x += wgt * gv;
                        }
                    }
                }
                vec![Some(Tensor::new(in_shape.clone(), gx).expect("shape"))]
            }),
        ))
    }

    // ── reductions ───────────────────────────────────────────────────────

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let vx = &self.nodes[x].value;
        let mut acc = T::zero();
        for &v in vx.data() {
            acc += v;
        }
        let shape = vx.shape().to_vec();
        self.push_op(
            Tensor::scalar(acc),
            vec![x],
            Box::new(move |g, _, _, _| {
                vec![Some(Tensor::full(&shape, g.item()))]
            }),
        )
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let vx = &self.nodes[x].value;
        let n = vx.numel();
        let mut acc = T::zero();
        for &v in vx.data() {
            acc += v;
        }
        let shape = vx.shape().to_vec();
        let inv = T::from_f64(1.0 / n as f64);
        self.push_op(
            Tensor::scalar(acc * inv),
            vec![x],
            Box::new(move |g, _, _, _| {
                vec![Some(Tensor::full(&shape, g.item() * inv))]
            }),
        )
    }

    // ── backward ─────────────────────────────────────────────────────────

    /// Reverse sweep from `root` (any shape; seeded with ones). Returns
    /// gradients for every grad-requiring leaf reachable from `root`.
    pub fn backward(&self, root: NodeId) -> Result<Gradients<T>, TensorError> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let seed_shape = self.nodes[root].value.shape().to_vec();
        grads[root] = Some(Tensor::full(&seed_shape, T::one()));
        for i in (0..=root).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(backward) = &node.backward else {
                continue; // leaf: keep its accumulated gradient
            };
            let Some(g) = grads[i].take() else {
                continue; // not on the path to root
            };
            let parent_vals: Vec<&Tensor<T>> =
                node.parents.iter().map(|&p| &self.nodes[p].value).collect();
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| self.nodes[p].needs_grad)
                .collect();
            let contribs = backward(&g, &node.value, &parent_vals, &needs);
            debug_assert_eq!(contribs.len(), node.parents.len());
            for (&p, contrib) in node.parents.iter().zip(contribs.into_iter()) {
                if let Some(c) = contrib {
                    debug_assert_eq!(c.shape(), self.nodes[p].value.shape());
                    match &mut grads[p] {
                        Some(acc) => acc.accumulate(&c),
                        slot @ None => *slot = Some(c),
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn same_shape<T: Scalar>(
    context: &str,
    a: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<(), TensorError> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            context: context.into(),
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// Run `f(row_index, row)` over disjoint output rows, in parallel when large.
/// Each row is written by exactly one closure call, so the result is bitwise
/// identical for any thread count.
fn par_rows<T: Scalar, F: Fn(usize, &mut [T]) + Send + Sync>(out: &mut [T], row: usize, f: F) {
    debug_assert_eq!(out.len() % row.max(1), 0);
    if out.len() >= 1 << 14 {
        out.par_chunks_mut(row)
            .enumerate()
            .for_each(|(r, chunk)| f(r, chunk));
    } else {
        for (r, chunk) in out.chunks_mut(row).enumerate() {
            f(r, chunk);
        }
    }
}

fn softmax_row<T: Scalar>(x: &[T], out: &mut [T]) {
    let mut mx = x[0];
    for &v in x {
        if v > mx {
            mx = v;
        }
    }
    let mut sum = T::zero();
    for (o, &v) in out.iter_mut().zip(x.iter()) {
        let e = (v - mx).exp();
        *o = e;
        sum += e;
    }
    let inv = sum.recip();
    for o in out.iter_mut() {
        *o = *o * inv;
    }
}

pub(crate) fn gelu_scalar<T: Scalar>(x: T) -> T {
    let half = T::from_f64(0.5);
    let inv_sqrt2 = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
    x * half * (T::one() + (x * inv_sqrt2).erf())
}

pub(crate) fn gelu_grad_scalar<T: Scalar>(x: T) -> T {
    let half = T::from_f64(0.5);
    let inv_sqrt2 = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
    let inv_sqrt_2pi = T::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    let phi_cdf = half * (T::one() + (x * inv_sqrt2).erf());
    let phi_pdf = inv_sqrt_2pi * (-(x * x) * half).exp();
    phi_cdf + x * phi_pdf
}

/// Per-output-axis interpolation: (lower index, upper index, fraction of upper).
/// Endpoints map to endpoints; a singleton input axis broadcasts.
fn axis_lerp(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    (0..n_out)
        .map(|i| {
            if n_in <= 1 || n_out <= 1 {
                return (0, 0, 0.0);
            }
            let pos = i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(n_in - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

type Corner = (bool, bool, bool);

fn corner_weights<T: Scalar>(fi: f64, fj: f64, fk: f64) -> [(Corner, T); 8] {
    let mut out = [((false, false, false), T::zero()); 8];
    let mut n = 0;
    for &ci in &[false, true] {
        for &cj in &[false, true] {
            for &ck in &[false, true] {
                let wi = if ci { fi } else { 1.0 - fi };
                let wj = if cj { fj } else { 1.0 - fj };
                let wk = if ck { fk } else { 1.0 - fk };
                out[n] = ((ci, cj, ck), T::from_f64(wi * wj * wk));
                n += 1;
            }
        }
    }
    out
}
