//! Inductive-biased multi-head self-attention over 3D windows, and the
//! paired (regular + shifted) transformer block built on it.

use crate::tensor::{
    Initializer, NodeId, ParamBinding, ParamId, ParamSet, Scalar, Tape, Tensor, TensorError,
};
use crate::windowing::{
    build_rel_pos_index, build_shift_mask, crop_map, pad_map, partition_map, shift_map,
    RelPosIndex, WindowConfig, WindowError,
};
use serde::{Deserialize, Serialize};
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AttentionError {
    #[error("attention configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Window(#[from] WindowError),
}

/// Position-information variants compared in the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionMode {
    /// Learned per-window absolute embedding added to tokens; no logit bias.
    AbsoluteOnly,
    /// Learned relative bias added to attention logits; no absolute term.
    RelativeOnly,
    /// Both: absolute embedding seeds the computation, relative bias learned
    /// on top.
    InductiveBiased,
}

impl PositionMode {
    pub fn uses_absolute(self) -> bool {
        matches!(self, PositionMode::AbsoluteOnly | PositionMode::InductiveBiased)
    }

    pub fn uses_relative(self) -> bool {
        matches!(self, PositionMode::RelativeOnly | PositionMode::InductiveBiased)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionConfig {
    pub dim: usize,
    pub heads: usize,
    pub window: WindowConfig,
    pub mode: PositionMode,
}

impl AttentionConfig {
    pub fn head_dim(&self) -> Result<usize, AttentionError> {
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(AttentionError::Config(format!(
                "dim {} not divisible into {} heads",
                self.dim, self.heads
            )));
        }
        Ok(self.dim / self.heads)
    }
}

/// Single-window scaled dot-product attention on plain tensors:
/// `softmax(q k^T / sqrt(d) + bias + mask) v` with q,k,v of shape `[P, d]`.
pub fn attention_single<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    bias: &Tensor<T>,
    mask: &Tensor<T>,
) -> Result<Tensor<T>, AttentionError> {
    let p = q.shape()[0];
    let d = q.shape()[1];
    if k.shape() != q.shape() || v.shape()[0] != p || bias.shape() != [p, p] || mask.shape() != [p, p]
    {
        return Err(AttentionError::Config(format!(
            "attention shapes disagree: q {:?} k {:?} v {:?} bias {:?} mask {:?}",
            q.shape(),
            k.shape(),
            v.shape(),
            bias.shape(),
            mask.shape()
        )));
    }
    let dv = v.shape()[1];
    let scale = T::from_f64(1.0 / (d as f64).sqrt());
    let mut out = Tensor::zeros(&[p, dv]);
    let mut logits = vec![T::zero(); p];
    for i in 0..p {
        for j in 0..p {
            let mut acc = T::zero();
            for a in 0..d {
                acc += q.data()[i * d + a] * k.data()[j * d + a];
            }
            logits[j] = acc * scale + bias.data()[i * p + j] + mask.data()[i * p + j];
        }
        let mut mx = logits[0];
        for &l in &logits {
            if l > mx {
                mx = l;
            }
        }
        let mut z = T::zero();
        for l in logits.iter_mut() {
            *l = (*l - mx).exp();
            z += *l;
        }
        for j in 0..p {
            let w = logits[j] / z;
            for a in 0..dv {
                out.data_mut()[i * dv + a] += w * v.data()[j * dv + a];
            }
        }
    }
    Ok(out)
}

/// Parameters of one IB-MSA layer.
#[derive(Debug, Clone)]
pub struct AttentionLayer {
    pub cfg: AttentionConfig,
    qkv_w: ParamId,
    qkv_b: ParamId,
    proj_w: ParamId,
    proj_b: ParamId,
    abs_embed: Option<ParamId>,
    rel_table: Option<ParamId>,
    rel_idx: RelPosIndex,
}

impl AttentionLayer {
    /// Register parameters: fused qkv projection, output projection, and the
    /// position terms the mode calls for. The relative table starts at zero,
    /// the absolute embedding truncated-normal.
    pub fn new<T: Scalar>(
        prefix: &str,
        cfg: AttentionConfig,
        with_absolute: bool,
        params: &mut ParamSet<T>,
        init: &mut Initializer,
    ) -> Result<Self, AttentionError> {
        let c = cfg.dim;
        let heads = cfg.heads;
        cfg.head_dim()?;
        let p = cfg.window.tokens_per_window();
        let rel_idx = build_rel_pos_index(&cfg.window);
        let qkv_w = params.add(&format!("{prefix}.qkv_w"), init.trunc_normal(&[c, 3 * c]))?;
        let qkv_b = params.add(&format!("{prefix}.qkv_b"), Tensor::zeros(&[3 * c]))?;
        let proj_w = params.add(&format!("{prefix}.proj_w"), init.trunc_normal(&[c, c]))?;
        let proj_b = params.add(&format!("{prefix}.proj_b"), Tensor::zeros(&[c]))?;
        let abs_embed = if cfg.mode.uses_absolute() && with_absolute {
            Some(params.add(&format!("{prefix}.abs_pos"), init.trunc_normal(&[p, c]))?)
        } else {
            None
        };
        let rel_table = if cfg.mode.uses_relative() {
            Some(params.add(
                &format!("{prefix}.rel_bias"),
                Tensor::zeros(&[heads, rel_idx.table_size()]),
            )?)
        } else {
            None
        };
        Ok(AttentionLayer {
            cfg,
            qkv_w,
            qkv_b,
            proj_w,
            proj_b,
            abs_embed,
            rel_table,
            rel_idx,
        })
    }

    /// Windowed multi-head attention over a `[h, w, d, C]` token grid.
    ///
    /// Non-divisible grids are zero-padded to the next window multiple and
    /// cropped after merging; padding tokens are masked out of every real
    /// token's attention.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bind: &ParamBinding,
        tokens: NodeId,
        shifted: bool,
    ) -> Result<NodeId, AttentionError> {
        let shape = tape.value(tokens).shape().to_vec();
        if shape.len() != 4 || shape[3] != self.cfg.dim {
            return Err(AttentionError::Config(format!(
                "expected [h,w,d,{}] tokens, got {:?}",
                self.cfg.dim, shape
            )));
        }
        let grid = [shape[0], shape[1], shape[2]];
        let c = self.cfg.dim;
        let heads = self.cfg.heads;
        let d = self.cfg.head_dim()?;
        let win = &self.cfg.window;
        let p = win.tokens_per_window();

        // adaptive padding to a window multiple
        let padded = win.padded_grid(grid);
        let needs_pad = padded != grid;
        let mut x = tokens;
        let valid: Option<Vec<bool>> = if needs_pad {
            let map = Arc::new(pad_map(grid, padded));
            x = tape.gather_map(x, map, c, vec![padded[0], padded[1], padded[2], c])?;
            let mut v = vec![false; padded[0] * padded[1] * padded[2]];
            for h in 0..padded[0] {
                for w in 0..padded[1] {
                    for dd in 0..padded[2] {
                        if h < grid[0] && w < grid[1] && dd < grid[2] {
                            v[(h * padded[1] + w) * padded[2] + dd] = true;
                        }
                    }
                }
            }
            Some(v)
        } else {
            None
        };
        let work_grid = padded;
        let n = win.window_count(work_grid)?;

        // cyclic shift for the second block of each pair
        let shift = win.shift();
        let do_shift = shifted && shift.iter().any(|&s| s > 0);
        if do_shift {
            let offs = [shift[0] as i64, shift[1] as i64, shift[2] as i64];
            let map = Arc::new(shift_map(work_grid, offs));
            x = tape.gather_map(x, map, c, vec![work_grid[0], work_grid[1], work_grid[2], c])?;
        }

        // partition into windows [N, P, C]
        let pmap = Arc::new(partition_map(work_grid, win)?);
        let mut ws = tape.gather_map(x, pmap, c, vec![n, p, c])?;

        // absolute position embedding, added per window before qkv
        if let Some(abs) = self.abs_embed {
            ws = tape.add_broadcast(ws, bind.node(abs))?;
        }

        // fused qkv, then head split to [N, heads, P, d]
        let qkv = tape.linear(ws, bind.node(self.qkv_w), Some(bind.node(self.qkv_b)))?;
        let mut split = |tape: &mut Tape<T>, part: usize| -> Result<NodeId, TensorError> {
            let mut map = Vec::with_capacity(n * heads * p);
            for wi in 0..n {
                for h in 0..heads {
                    for t in 0..p {
                        map.push((((wi * p + t) * 3 + part) * heads + h) as i64);
                    }
                }
            }
            tape.gather_map(qkv, Arc::new(map), d, vec![n, heads, p, d])
        };
        let q = split(tape, 0)?;
        let k = split(tape, 1)?;
        let v = split(tape, 2)?;

        // scaled scores plus position bias and region mask
        let scores = tape.matmul_nt(q, k)?;
        let mut scores = tape.affine(scores, 1.0 / (d as f64).sqrt(), 0.0);
        if let Some(rel) = self.rel_table {
            let bias = tape.bias_gather(bind.node(rel), Arc::clone(&self.rel_idx.index_map), p)?;
            scores = tape.add_broadcast(scores, bias)?;
        }
        if do_shift || valid.is_some() {
            let mask: Tensor<T> =
                build_shift_mask(work_grid, win, do_shift, valid.as_deref())?;
            // tile the [N, P, P] mask across heads
            let mut tiled = vec![T::zero(); n * heads * p * p];
            for wi in 0..n {
                let src = &mask.data()[wi * p * p..(wi + 1) * p * p];
                for h in 0..heads {
                    let dst_off = (wi * heads + h) * p * p;
                    tiled[dst_off..dst_off + p * p].copy_from_slice(src);
                }
            }
            let mask_node = tape.constant(Tensor::new(vec![n, heads, p, p], tiled)?);
            scores = tape.add(scores, mask_node)?;
        }
        let weights = tape.softmax_lastdim(scores)?;
        let ctx = tape.matmul_nn(weights, v)?;

        // merge heads back to [N, P, C]
        let mut merge_heads = Vec::with_capacity(n * p * heads);
        for wi in 0..n {
            for t in 0..p {
                for h in 0..heads {
                    merge_heads.push(((wi * heads + h) * p + t) as i64);
                }
            }
        }
        let ctx = tape.gather_map(ctx, Arc::new(merge_heads), d, vec![n, p, c])?;
        let proj = tape.linear(ctx, bind.node(self.proj_w), Some(bind.node(self.proj_b)))?;

        // merge windows, undo shift, crop padding
        let mmap = Arc::new(crate::windowing::merge_map(work_grid, win)?);
        let mut out = tape.gather_map(
            proj,
            mmap,
            c,
            vec![work_grid[0], work_grid[1], work_grid[2], c],
        )?;
        if do_shift {
            let offs = [-(shift[0] as i64), -(shift[1] as i64), -(shift[2] as i64)];
            let map = Arc::new(shift_map(work_grid, offs));
            out = tape.gather_map(out, map, c, vec![work_grid[0], work_grid[1], work_grid[2], c])?;
        }
        if needs_pad {
            let map = Arc::new(crop_map(work_grid, grid));
            out = tape.gather_map(out, map, c, vec![grid[0], grid[1], grid[2], c])?;
        }
        Ok(out)
    }
}

/// Two-layer MLP with GELU, hidden width `ratio * C`.
#[derive(Debug, Clone)]
pub struct MlpLayer {
    fc1_w: ParamId,
    fc1_b: ParamId,
    fc2_w: ParamId,
    fc2_b: ParamId,
}

impl MlpLayer {
    pub fn new<T: Scalar>(
        prefix: &str,
        dim: usize,
        ratio: usize,
        params: &mut ParamSet<T>,
        init: &mut Initializer,
    ) -> Result<Self, TensorError> {
        let hidden = dim * ratio;
        Ok(MlpLayer {
            fc1_w: params.add(&format!("{prefix}.fc1_w"), init.trunc_normal(&[dim, hidden]))?,
            fc1_b: params.add(&format!("{prefix}.fc1_b"), Tensor::zeros(&[hidden]))?,
            fc2_w: params.add(&format!("{prefix}.fc2_w"), init.trunc_normal(&[hidden, dim]))?,
            fc2_b: params.add(&format!("{prefix}.fc2_b"), Tensor::zeros(&[dim]))?,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bind: &ParamBinding,
        x: NodeId,
    ) -> Result<NodeId, TensorError> {
        let h = tape.linear(x, bind.node(self.fc1_w), Some(bind.node(self.fc1_b)))?;
        let h = tape.gelu(h);
        tape.linear(h, bind.node(self.fc2_w), Some(bind.node(self.fc2_b)))
    }
}

/// Layer-norm parameters over the channel axis.
#[derive(Debug, Clone)]
pub struct LayerNormLayer {
    gamma: ParamId,
    beta: ParamId,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl LayerNormLayer {
    pub fn new<T: Scalar>(
        prefix: &str,
        dim: usize,
        params: &mut ParamSet<T>,
    ) -> Result<Self, TensorError> {
        Ok(LayerNormLayer {
            gamma: params.add(&format!("{prefix}.ln_g"), Tensor::full(&[dim], T::one()))?,
            beta: params.add(&format!("{prefix}.ln_b"), Tensor::zeros(&[dim]))?,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bind: &ParamBinding,
        x: NodeId,
    ) -> Result<NodeId, TensorError> {
        tape.layer_norm(x, bind.node(self.gamma), bind.node(self.beta), LAYER_NORM_EPS)
    }
}

/// One pre-norm transformer block: attention sub-block then MLP sub-block,
/// both residual.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub ln1: LayerNormLayer,
    pub attn: AttentionLayer,
    pub ln2: LayerNormLayer,
    pub mlp: MlpLayer,
    pub shifted: bool,
}

impl TransformerBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        prefix: &str,
        cfg: AttentionConfig,
        shifted: bool,
        with_absolute: bool,
        mlp_ratio: usize,
        params: &mut ParamSet<T>,
        init: &mut Initializer,
    ) -> Result<Self, AttentionError> {
        Ok(TransformerBlock {
            ln1: LayerNormLayer::new(&format!("{prefix}.norm1"), cfg.dim, params)?,
            attn: AttentionLayer::new(&format!("{prefix}.attn"), cfg, with_absolute, params, init)?,
            ln2: LayerNormLayer::new(&format!("{prefix}.norm2"), cfg.dim, params)?,
            mlp: MlpLayer::new(&format!("{prefix}.mlp"), cfg.dim, mlp_ratio, params, init)?,
            shifted,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bind: &ParamBinding,
        tokens: NodeId,
    ) -> Result<NodeId, AttentionError> {
        let normed = self.ln1.forward(tape, bind, tokens)?;
        let attended = self.attn.forward(tape, bind, normed, self.shifted)?;
        let tokens = tape.add(tokens, attended)?;
        let normed = self.ln2.forward(tape, bind, tokens)?;
        let expanded = self.mlp.forward(tape, bind, normed)?;
        Ok(tape.add(tokens, expanded)?)
    }
}

/// The paired layout: a regular-window block followed by a shifted-window
/// block, so information crosses window borders every pair.
#[derive(Debug, Clone)]
pub struct BlockPair {
    pub regular: TransformerBlock,
    pub shifted: TransformerBlock,
}

impl BlockPair {
    pub fn new<T: Scalar>(
        prefix: &str,
        cfg: AttentionConfig,
        with_absolute: bool,
        mlp_ratio: usize,
        params: &mut ParamSet<T>,
        init: &mut Initializer,
    ) -> Result<Self, AttentionError> {
        Ok(BlockPair {
            regular: TransformerBlock::new(
                &format!("{prefix}.blk0"),
                cfg,
                false,
                with_absolute,
                mlp_ratio,
                params,
                init,
            )?,
            shifted: TransformerBlock::new(
                &format!("{prefix}.blk1"),
                cfg,
                true,
                with_absolute,
                mlp_ratio,
                params,
                init,
            )?,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bind: &ParamBinding,
        tokens: NodeId,
    ) -> Result<NodeId, AttentionError> {
        let t = self.regular.forward(tape, bind, tokens)?;
        self.shifted.forward(tape, bind, t)
    }
}
