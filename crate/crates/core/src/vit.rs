//! Transformer encoder and single-block reconstruction decoder with
//! hand-written backward passes.
//!
//! Blocks are pre-norm: `F' = F + MHSA(LN(F)); F_next = F' + FFN(LN(F'))`.
//! The encoder also exposes the per-block class-token attention rows, and its
//! backward pass accepts a gradient on those rows so the attention-matching
//! loss can flow into the query/key projections.

use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis};

use crate::config::ModelConfig;
use crate::data::AttentionStack;
use crate::error::{Error, Result};
use crate::nn::ops::{
    layer_norm, layer_norm_backward, linear, linear_backward, softmax_rows, softmax_rows_backward,
};
use crate::nn::{ParamKind, ParamMut, ParamRef, ParamSet};
use crate::patching::{apply_mask, restore_order};
use crate::seeds::{trunc_normal, Stream};

const INIT_STD: f64 = 0.02;

/// One pre-norm transformer block.
#[derive(Clone, Debug)]
pub struct BlockParams {
    pub ln1_scale: Array1<f64>,
    pub ln1_offset: Array1<f64>,
    pub wq: Array2<f64>,
    pub bq: Array1<f64>,
    pub wk: Array2<f64>,
    pub bk: Array1<f64>,
    pub wv: Array2<f64>,
    pub bv: Array1<f64>,
    pub wo: Array2<f64>,
    pub bo: Array1<f64>,
    pub ln2_scale: Array1<f64>,
    pub ln2_offset: Array1<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl BlockParams {
    pub fn init(dim: usize, ffn_ratio: usize, rng: &mut Stream) -> Self {
        let hidden = dim * ffn_ratio;
        let mat = |r: usize, c: usize, rng: &mut Stream| {
            Array2::from_shape_fn((r, c), |_| trunc_normal(rng, INIT_STD))
        };
        BlockParams {
            ln1_scale: Array1::ones(dim),
            ln1_offset: Array1::zeros(dim),
            wq: mat(dim, dim, rng),
            bq: Array1::zeros(dim),
            wk: mat(dim, dim, rng),
            bk: Array1::zeros(dim),
            wv: mat(dim, dim, rng),
            bv: Array1::zeros(dim),
            wo: mat(dim, dim, rng),
            bo: Array1::zeros(dim),
            ln2_scale: Array1::ones(dim),
            ln2_offset: Array1::zeros(dim),
            w1: mat(dim, hidden, rng),
            b1: Array1::zeros(hidden),
            w2: mat(hidden, dim, rng),
            b2: Array1::zeros(dim),
        }
    }

    pub fn zeros_like(&self) -> Self {
        BlockParams {
            ln1_scale: Array1::zeros(self.ln1_scale.len()),
            ln1_offset: Array1::zeros(self.ln1_offset.len()),
            wq: Array2::zeros(self.wq.raw_dim()),
            bq: Array1::zeros(self.bq.len()),
            wk: Array2::zeros(self.wk.raw_dim()),
            bk: Array1::zeros(self.bk.len()),
            wv: Array2::zeros(self.wv.raw_dim()),
            bv: Array1::zeros(self.bv.len()),
            wo: Array2::zeros(self.wo.raw_dim()),
            bo: Array1::zeros(self.bo.len()),
            ln2_scale: Array1::zeros(self.ln2_scale.len()),
            ln2_offset: Array1::zeros(self.ln2_offset.len()),
            w1: Array2::zeros(self.w1.raw_dim()),
            b1: Array1::zeros(self.b1.len()),
            w2: Array2::zeros(self.w2.raw_dim()),
            b2: Array1::zeros(self.b2.len()),
        }
    }

    fn push_entries<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a>>) {
        use ParamKind::*;
        let e = |name: &str, view: ndarray::ArrayViewD<'a, f64>, kind| ParamRef {
            name: format!("{prefix}.{name}"),
            view,
            kind,
        };
        out.push(e("ln1_scale", self.ln1_scale.view().into_dyn(), NoDecay));
        out.push(e("ln1_offset", self.ln1_offset.view().into_dyn(), NoDecay));
        out.push(e("wq", self.wq.view().into_dyn(), Decay));
        out.push(e("bq", self.bq.view().into_dyn(), NoDecay));
        out.push(e("wk", self.wk.view().into_dyn(), Decay));
        out.push(e("bk", self.bk.view().into_dyn(), NoDecay));
        out.push(e("wv", self.wv.view().into_dyn(), Decay));
        out.push(e("bv", self.bv.view().into_dyn(), NoDecay));
        out.push(e("wo", self.wo.view().into_dyn(), Decay));
        out.push(e("bo", self.bo.view().into_dyn(), NoDecay));
        out.push(e("ln2_scale", self.ln2_scale.view().into_dyn(), NoDecay));
        out.push(e("ln2_offset", self.ln2_offset.view().into_dyn(), NoDecay));
        out.push(e("w1", self.w1.view().into_dyn(), Decay));
        out.push(e("b1", self.b1.view().into_dyn(), NoDecay));
        out.push(e("w2", self.w2.view().into_dyn(), Decay));
        out.push(e("b2", self.b2.view().into_dyn(), NoDecay));
    }

    fn push_entries_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a>>) {
        use ParamKind::*;
        let p = prefix;
        let e = |name: String, view: ndarray::ArrayViewMutD<'a, f64>, kind| ParamMut {
            name,
            view,
            kind,
        };
        out.push(e(format!("{p}.ln1_scale"), self.ln1_scale.view_mut().into_dyn(), NoDecay));
        out.push(e(format!("{p}.ln1_offset"), self.ln1_offset.view_mut().into_dyn(), NoDecay));
        out.push(e(format!("{p}.wq"), self.wq.view_mut().into_dyn(), Decay));
        out.push(e(format!("{p}.bq"), self.bq.view_mut().into_dyn(), NoDecay));
        out.push(e(format!("{p}.wk"), self.wk.view_mut().into_dyn(), Decay));
        out.push(e(format!("{p}.bk"), self.bk.view_mut().into_dyn(), NoDecay));
        out.push(e(format!("{p}.wv"), self.wv.view_mut().into_dyn(), Decay));
        out.push(e(format!("{p}.bv"), self.bv.view_mut().into_dyn(), NoDecay));
        out.push(e(format!("{p}.wo"), self.wo.view_mut().into_dyn(), Decay));
        out.push(e(format!("{p}.bo"), self.bo.view_mut().into_dyn(), NoDecay));
        out.push(e(format!("{p}.ln2_scale"), self.ln2_scale.view_mut().into_dyn(), NoDecay));
        out.push(e(format!("{p}.ln2_offset"), self.ln2_offset.view_mut().into_dyn(), NoDecay));
        out.push(e(format!("{p}.w1"), self.w1.view_mut().into_dyn(), Decay));
        out.push(e(format!("{p}.b1"), self.b1.view_mut().into_dyn(), NoDecay));
        out.push(e(format!("{p}.w2"), self.w2.view_mut().into_dyn(), Decay));
        out.push(e(format!("{p}.b2"), self.b2.view_mut().into_dyn(), NoDecay));
    }
}

/// Forward activations one block keeps for its backward pass.
pub struct BlockCache {
    input: Array2<f64>,
    xhat1: Array2<f64>,
    inv_std1: Array1<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// Post-softmax attention, (heads, M, M).
    pub probs: Array3<f64>,
    ctx: Array2<f64>,
    xhat2: Array2<f64>,
    inv_std2: Array1<f64>,
    z1: Array2<f64>,
    h1: Array2<f64>,
}

/// Run one block. Returns the next token matrix and the cache (which holds
/// the post-softmax attention tensor).
pub fn block_forward(params: &BlockParams, input: &ArrayView2<f64>, heads: usize) -> Result<(Array2<f64>, BlockCache)> {
    let (m, d) = (input.shape()[0], input.shape()[1]);
    if d != params.wq.shape()[0] {
        return Err(Error::InvalidShape(format!(
            "token width {d} does not match block width {}",
            params.wq.shape()[0]
        )));
    }
    if d % heads != 0 {
        return Err(Error::InvalidShape(format!(
            "head count {heads} must divide width {d}"
        )));
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let (a, xhat1, inv_std1) = layer_norm(input, &params.ln1_scale, &params.ln1_offset);
    let q = linear(&a.view(), &params.wq, &params.bq);
    let k = linear(&a.view(), &params.wk, &params.bk);
    let v = linear(&a.view(), &params.wv, &params.bv);

    let mut probs = Array3::zeros((heads, m, m));
    let mut ctx = Array2::zeros((m, d));
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        // Contiguous per-head copies keep the small matmuls on the fast path.
        let qh = q.slice(cols).to_owned();
        let kh = k.slice(cols).to_owned();
        let vh = v.slice(cols).to_owned();
        let mut scores = qh.dot(&kh.t());
        scores.mapv_inplace(|x| x * scale);
        softmax_rows(&mut scores);
        let ctx_h = scores.dot(&vh);
        probs.index_axis_mut(Axis(0), h).assign(&scores);
        ctx.slice_mut(cols).assign(&ctx_h);
    }
    let attn_out = linear(&ctx.view(), &params.wo, &params.bo);
    let fprime = input + &attn_out;

    let (b_ln, xhat2, inv_std2) =
        layer_norm(&fprime.view(), &params.ln2_scale, &params.ln2_offset);
    let z1 = linear(&b_ln.view(), &params.w1, &params.b1);
    let h1 = z1.mapv(crate::nn::ops::gelu);
    let g = linear(&h1.view(), &params.w2, &params.b2);
    let output = &fprime + &g;

    Ok((
        output,
        BlockCache {
            input: input.to_owned(),
            xhat1,
            inv_std1,
            q,
            k,
            v,
            probs,
            ctx,
            xhat2,
            inv_std2,
            z1,
            h1,
        },
    ))
}

/// The spec-level block operation: next tokens plus the post-softmax
/// attention tensor (heads, M, M).
pub fn transformer_block(
    params: &BlockParams,
    input: &ArrayView2<f64>,
    heads: usize,
) -> Result<(Array2<f64>, Array3<f64>)> {
    let (out, cache) = block_forward(params, input, heads)?;
    Ok((out, cache.probs))
}

/// Backward through one block. `d_probs` is an optional extra gradient on
/// the post-softmax attention tensor (the attention-matching path).
pub fn block_backward(
    params: &BlockParams,
    cache: &BlockCache,
    d_output: &ArrayView2<f64>,
    d_probs: Option<&Array3<f64>>,
    heads: usize,
) -> (Array2<f64>, BlockParams) {
    let (m, d) = (cache.input.shape()[0], cache.input.shape()[1]);
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut grads = params.zeros_like();

    // FFN branch.
    let d_g = d_output; // gradient on the FFN output
    let (d_h1, dw2, db2) = linear_backward(&cache.h1.view(), &params.w2, d_g);
    grads.w2 = dw2;
    grads.b2 = db2;
    let mut d_z1 = d_h1;
    d_z1.zip_mut_with(&cache.z1, |dv, &z| *dv *= crate::nn::ops::gelu_prime(z));
    // Recompute LN2 output for the weight gradient of w1.
    let b_ln = {
        let mut out = cache.xhat2.clone();
        for mut row in out.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = params.ln2_scale[j] * *v + params.ln2_offset[j];
            }
        }
        out
    };
    let (d_bln, dw1, db1) = linear_backward(&b_ln.view(), &params.w1, &d_z1.view());
    grads.w1 = dw1;
    grads.b1 = db1;
    let (d_fprime_ln, dscale2, doffset2) =
        layer_norm_backward(&d_bln.view(), &cache.xhat2.view(), &cache.inv_std2, &params.ln2_scale);
    grads.ln2_scale = dscale2;
    grads.ln2_offset = doffset2;
    let d_fprime = d_output + &d_fprime_ln;

    // Attention output projection.
    let (d_ctx, dwo, dbo) = linear_backward(&cache.ctx.view(), &params.wo, &d_fprime.view());
    grads.wo = dwo;
    grads.bo = dbo;

    // Per-head attention backward.
    let mut d_q = Array2::zeros((m, d));
    let mut d_k = Array2::zeros((m, d));
    let mut d_v = Array2::zeros((m, d));
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let probs_h = cache.probs.index_axis(Axis(0), h);
        let vh = cache.v.slice(cols).to_owned();
        let d_ctx_h = d_ctx.slice(cols).to_owned();

        let mut d_probs_h = d_ctx_h.dot(&vh.t());
        if let Some(ext) = d_probs {
            d_probs_h += &ext.index_axis(Axis(0), h);
        }
        let d_vh = probs_h.t().dot(&d_ctx_h);
        let mut d_scores = softmax_rows_backward(&probs_h, &d_probs_h.view());
        d_scores.mapv_inplace(|x| x * scale);

        let qh = cache.q.slice(cols).to_owned();
        let kh = cache.k.slice(cols).to_owned();
        let d_qh = d_scores.dot(&kh);
        let d_kh = d_scores.t().dot(&qh);
        d_q.slice_mut(cols).assign(&d_qh);
        d_k.slice_mut(cols).assign(&d_kh);
        d_v.slice_mut(cols).assign(&d_vh);
    }

    // Back to the LN1 output.
    let a = {
        let mut out = cache.xhat1.clone();
        for mut row in out.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = params.ln1_scale[j] * *v + params.ln1_offset[j];
            }
        }
        out
    };
    let (d_a_q, dwq, dbq) = linear_backward(&a.view(), &params.wq, &d_q.view());
    let (d_a_k, dwk, dbk) = linear_backward(&a.view(), &params.wk, &d_k.view());
    let (d_a_v, dwv, dbv) = linear_backward(&a.view(), &params.wv, &d_v.view());
    grads.wq = dwq;
    grads.bq = dbq;
    grads.wk = dwk;
    grads.bk = dbk;
    grads.wv = dwv;
    grads.bv = dbv;
    let d_a = d_a_q + d_a_k + d_a_v;
    let (d_input_ln, dscale1, doffset1) =
        layer_norm_backward(&d_a.view(), &cache.xhat1.view(), &cache.inv_std1, &params.ln1_scale);
    grads.ln1_scale = dscale1;
    grads.ln1_offset = doffset1;

    (d_fprime + &d_input_ln, grads)
}

/// The token encoder: patch embedding, positional embeddings, class token
/// and a stack of blocks.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub patch_embed: Array2<f64>,
    pub patch_bias: Array1<f64>,
    /// (N+1) x d; row 0 is the class position.
    pub pos_embed: Array2<f64>,
    pub cls_token: Array1<f64>,
    pub blocks: Vec<BlockParams>,
    pub heads: usize,
}

impl Encoder {
    pub fn init(cfg: &ModelConfig, rng: &mut Stream) -> Self {
        let n = cfg.num_patches();
        let d = cfg.embed_dim;
        let patch_len = cfg.patch_size * cfg.patch_size * 3;
        Encoder {
            patch_embed: Array2::from_shape_fn((patch_len, d), |_| trunc_normal(rng, INIT_STD)),
            patch_bias: Array1::zeros(d),
            pos_embed: Array2::from_shape_fn((n + 1, d), |_| trunc_normal(rng, INIT_STD)),
            cls_token: Array1::from_shape_fn(d, |_| trunc_normal(rng, INIT_STD)),
            blocks: (0..cfg.encoder_blocks)
                .map(|_| BlockParams::init(d, cfg.ffn_ratio, rng))
                .collect(),
            heads: cfg.heads,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Encoder {
            patch_embed: Array2::zeros(self.patch_embed.raw_dim()),
            patch_bias: Array1::zeros(self.patch_bias.len()),
            pos_embed: Array2::zeros(self.pos_embed.raw_dim()),
            cls_token: Array1::zeros(self.cls_token.len()),
            blocks: self.blocks.iter().map(|b| b.zeros_like()).collect(),
            heads: self.heads,
        }
    }

    pub fn width(&self) -> usize {
        self.patch_embed.shape()[1]
    }

    pub fn num_patches(&self) -> usize {
        self.pos_embed.shape()[0] - 1
    }
}

impl ParamSet for Encoder {
    fn entries(&self) -> Vec<ParamRef<'_>> {
        use ParamKind::*;
        let mut out = vec![
            ParamRef {
                name: "encoder.patch_embed".into(),
                view: self.patch_embed.view().into_dyn(),
                kind: Decay,
            },
            ParamRef {
                name: "encoder.patch_bias".into(),
                view: self.patch_bias.view().into_dyn(),
                kind: NoDecay,
            },
            ParamRef {
                name: "encoder.pos_embed".into(),
                view: self.pos_embed.view().into_dyn(),
                kind: Decay,
            },
            ParamRef {
                name: "encoder.cls_token".into(),
                view: self.cls_token.view().into_dyn(),
                kind: NoDecay,
            },
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            b.push_entries(&format!("encoder.block{i}"), &mut out);
        }
        out
    }

    fn entries_mut(&mut self) -> Vec<ParamMut<'_>> {
        use ParamKind::*;
        let mut out = vec![
            ParamMut {
                name: "encoder.patch_embed".into(),
                view: self.patch_embed.view_mut().into_dyn(),
                kind: Decay,
            },
            ParamMut {
                name: "encoder.patch_bias".into(),
                view: self.patch_bias.view_mut().into_dyn(),
                kind: NoDecay,
            },
            ParamMut {
                name: "encoder.pos_embed".into(),
                view: self.pos_embed.view_mut().into_dyn(),
                kind: Decay,
            },
            ParamMut {
                name: "encoder.cls_token".into(),
                view: self.cls_token.view_mut().into_dyn(),
                kind: NoDecay,
            },
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.push_entries_mut(&format!("encoder.block{i}"), &mut out);
        }
        out
    }
}

/// Everything the encoder backward pass needs.
pub struct EncoderCache {
    /// Raw patch rows that entered the embedding, in token order.
    patches_used: Array2<f64>,
    /// Original patch index of every non-class token row.
    index_map: Vec<usize>,
    block_caches: Vec<BlockCache>,
}

/// Encoder forward output.
pub struct Encoded {
    /// M x d token matrix, class token at row 0.
    pub tokens: Array2<f64>,
    /// Per-block class-token attention rows; present in full-token mode.
    pub stack: Option<AttentionStack>,
    pub cache: EncoderCache,
}

impl Encoded {
    /// Post-softmax attention tensors of every block, (heads, M, M) each.
    pub fn attention_tensors(&self) -> Vec<&Array3<f64>> {
        self.cache.block_caches.iter().map(|c| &c.probs).collect()
    }
}

/// Extract the head-averaged class-token attention rows from per-block
/// attention tensors (class token at index 0, class position excluded).
pub fn class_attention(per_block: &[Array3<f64>], expect_patches: Option<usize>) -> Result<AttentionStack> {
    if per_block.is_empty() {
        return Err(Error::InvalidShape("no attention tensors".into()));
    }
    let m = per_block[0].shape()[1];
    if let Some(n) = expect_patches {
        if m != n + 1 {
            return Err(Error::InvalidShape(format!(
                "attention is over {m} tokens, expected N+1 = {}",
                n + 1
            )));
        }
    }
    let heads = per_block[0].shape()[0];
    let mut rows = Array2::zeros((per_block.len(), m - 1));
    for (l, attn) in per_block.iter().enumerate() {
        for h in 0..heads {
            for j in 1..m {
                rows[[l, j - 1]] += attn[[h, 0, j]] / heads as f64;
            }
        }
    }
    Ok(AttentionStack { rows })
}

impl Encoder {
    /// Encode patch rows (N x patch_len). With a binary mask this is the
    /// masked pre-training mode; without it every token is used and the
    /// class-attention stack is returned.
    pub fn forward(&self, patches: &ArrayView2<f64>, binary_mask: Option<&[u8]>) -> Result<Encoded> {
        let n = self.num_patches();
        if patches.shape() != [n, self.patch_embed.shape()[0]] {
            return Err(Error::InvalidShape(format!(
                "patch matrix {:?}, expected ({n}, {})",
                patches.shape(),
                self.patch_embed.shape()[0]
            )));
        }
        let (selected, index_map): (Array2<f64>, Vec<usize>) = match binary_mask {
            Some(mask) => {
                let tb = apply_mask(patches, mask)?;
                (tb.tokens, tb.index_map)
            }
            None => (patches.to_owned(), (0..n).collect()),
        };

        // Embed the kept patches and add their original-position embeddings.
        let embedded = linear(&selected.view(), &self.patch_embed, &self.patch_bias);
        let m = embedded.shape()[0] + 1;
        let d = self.width();
        let mut tokens = Array2::zeros((m, d));
        for (j, v) in self.cls_token.iter().enumerate() {
            tokens[[0, j]] = v + self.pos_embed[[0, j]];
        }
        for (row, &idx) in index_map.iter().enumerate() {
            for j in 0..d {
                tokens[[row + 1, j]] = embedded[[row, j]] + self.pos_embed[[idx + 1, j]];
            }
        }

        let mut block_caches = Vec::with_capacity(self.blocks.len());
        let mut current = tokens;
        for block in &self.blocks {
            let (next, cache) = block_forward(block, &current.view(), self.heads)?;
            block_caches.push(cache);
            current = next;
        }

        let stack = if binary_mask.is_none() {
            let per_block: Vec<Array3<f64>> =
                block_caches.iter().map(|c| c.probs.clone()).collect();
            Some(class_attention(&per_block, Some(n))?)
        } else {
            None
        };

        Ok(Encoded {
            tokens: current,
            stack,
            cache: EncoderCache {
                patches_used: selected,
                index_map,
                block_caches,
            },
        })
    }

    /// Backward from gradients on the output tokens and (optionally) on the
    /// class-attention stack. Returns parameter gradients.
    pub fn backward(
        &self,
        cache: &EncoderCache,
        d_tokens: &ArrayView2<f64>,
        d_stack: Option<&Array2<f64>>,
    ) -> Encoder {
        let mut grads = self.zeros_like();
        let heads = self.heads;
        let m = d_tokens.shape()[0];

        let mut d_current = d_tokens.to_owned();
        for (l, block) in self.blocks.iter().enumerate().rev() {
            let d_probs = d_stack.map(|ds| {
                let mut ext = Array3::zeros((heads, m, m));
                for j in 1..m {
                    // Stack column j-1 is the class-row attention to token j,
                    // averaged over heads.
                    let g = ds[[l, cache.index_map[j - 1]]] / heads as f64;
                    for h in 0..heads {
                        ext[[h, 0, j]] = g;
                    }
                }
                ext
            });
            let (d_input, block_grads) = block_backward(
                block,
                &cache.block_caches[l],
                &d_current.view(),
                d_probs.as_ref(),
                heads,
            );
            grads.blocks[l] = block_grads;
            d_current = d_input;
        }

        // Token-level gradients: class token + positional rows + embedding.
        let d = self.width();
        for j in 0..d {
            grads.cls_token[j] += d_current[[0, j]];
            grads.pos_embed[[0, j]] += d_current[[0, j]];
        }
        let kept = cache.index_map.len();
        let mut d_embedded = Array2::zeros((kept, d));
        for (row, &idx) in cache.index_map.iter().enumerate() {
            for j in 0..d {
                let g = d_current[[row + 1, j]];
                d_embedded[[row, j]] = g;
                grads.pos_embed[[idx + 1, j]] += g;
            }
        }
        let (_, dw, db) = linear_backward(
            &cache.patches_used.view(),
            &self.patch_embed,
            &d_embedded.view(),
        );
        grads.patch_embed = dw;
        grads.patch_bias = db;
        grads
    }
}

/// The reconstruction decoder: projection, mask-token reinsertion, decoder
/// positional embeddings, one block and the pixel prediction layer.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub proj: Array2<f64>,
    pub proj_bias: Array1<f64>,
    pub mask_token: Array1<f64>,
    pub pos_embed: Array2<f64>,
    pub block: BlockParams,
    pub pred: Array2<f64>,
    pub pred_bias: Array1<f64>,
    pub heads: usize,
}

impl Decoder {
    pub fn init(cfg: &ModelConfig, rng: &mut Stream) -> Self {
        let n = cfg.num_patches();
        let dd = cfg.decoder_dim;
        let patch_len = cfg.patch_size * cfg.patch_size * 3;
        Decoder {
            proj: Array2::from_shape_fn((cfg.embed_dim, dd), |_| trunc_normal(rng, INIT_STD)),
            proj_bias: Array1::zeros(dd),
            mask_token: Array1::from_shape_fn(dd, |_| trunc_normal(rng, INIT_STD)),
            pos_embed: Array2::from_shape_fn((n + 1, dd), |_| trunc_normal(rng, INIT_STD)),
            block: BlockParams::init(dd, cfg.ffn_ratio, rng),
            pred: Array2::from_shape_fn((dd, patch_len), |_| trunc_normal(rng, INIT_STD)),
            pred_bias: Array1::zeros(patch_len),
            heads: cfg.decoder_heads,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Decoder {
            proj: Array2::zeros(self.proj.raw_dim()),
            proj_bias: Array1::zeros(self.proj_bias.len()),
            mask_token: Array1::zeros(self.mask_token.len()),
            pos_embed: Array2::zeros(self.pos_embed.raw_dim()),
            block: self.block.zeros_like(),
            pred: Array2::zeros(self.pred.raw_dim()),
            pred_bias: Array1::zeros(self.pred_bias.len()),
            heads: self.heads,
        }
    }
}

impl ParamSet for Decoder {
    fn entries(&self) -> Vec<ParamRef<'_>> {
        use ParamKind::*;
        let mut out = vec![
            ParamRef { name: "decoder.proj".into(), view: self.proj.view().into_dyn(), kind: Decay },
            ParamRef { name: "decoder.proj_bias".into(), view: self.proj_bias.view().into_dyn(), kind: NoDecay },
            ParamRef { name: "decoder.mask_token".into(), view: self.mask_token.view().into_dyn(), kind: NoDecay },
            ParamRef { name: "decoder.pos_embed".into(), view: self.pos_embed.view().into_dyn(), kind: Decay },
        ];
        self.block.push_entries("decoder.block0", &mut out);
        out.push(ParamRef { name: "decoder.pred".into(), view: self.pred.view().into_dyn(), kind: Decay });
        out.push(ParamRef { name: "decoder.pred_bias".into(), view: self.pred_bias.view().into_dyn(), kind: NoDecay });
        out
    }

    fn entries_mut(&mut self) -> Vec<ParamMut<'_>> {
        use ParamKind::*;
        let mut out = vec![
            ParamMut { name: "decoder.proj".into(), view: self.proj.view_mut().into_dyn(), kind: Decay },
            ParamMut { name: "decoder.proj_bias".into(), view: self.proj_bias.view_mut().into_dyn(), kind: NoDecay },
            ParamMut { name: "decoder.mask_token".into(), view: self.mask_token.view_mut().into_dyn(), kind: NoDecay },
            ParamMut { name: "decoder.pos_embed".into(), view: self.pos_embed.view_mut().into_dyn(), kind: Decay },
        ];
        self.block.push_entries_mut("decoder.block0", &mut out);
        out.push(ParamMut { name: "decoder.pred".into(), view: self.pred.view_mut().into_dyn(), kind: Decay });
        out.push(ParamMut { name: "decoder.pred_bias".into(), view: self.pred_bias.view_mut().into_dyn(), kind: NoDecay });
        out
    }
}

pub struct DecoderCache {
    enc_tokens: Array2<f64>,
    binary_mask: Vec<u8>,
    seq_in: Array2<f64>,
    block_cache: BlockCache,
    block_out: Array2<f64>,
}

impl Decoder {
    /// Reconstruct all N patch rows from encoder tokens (class token at
    /// row 0) and the mask used during encoding.
    pub fn forward(&self, enc_tokens: &ArrayView2<f64>, binary_mask: &[u8]) -> Result<(Array2<f64>, DecoderCache)> {
        let n = self.pos_embed.shape()[0] - 1;
        if binary_mask.len() != n {
            return Err(Error::InvalidShape(format!(
                "mask length {} != patch count {n}",
                binary_mask.len()
            )));
        }
        let kept = binary_mask.iter().filter(|&&m| m == 0).count();
        if enc_tokens.shape()[0] != kept + 1 {
            return Err(Error::InvalidShape(format!(
                "encoder tokens {} != kept {kept} + class token",
                enc_tokens.shape()[0]
            )));
        }
        let dd = self.proj.shape()[1];
        let projected = linear(enc_tokens, &self.proj, &self.proj_bias);
        let visible = projected.slice(s![1.., ..]);
        let restored = restore_order(&visible, self.mask_token.as_slice().unwrap(), binary_mask)?;

        let mut seq = Array2::zeros((n + 1, dd));
        for j in 0..dd {
            seq[[0, j]] = projected[[0, j]] + self.pos_embed[[0, j]];
        }
        for i in 0..n {
            for j in 0..dd {
                seq[[i + 1, j]] = restored[[i, j]] + self.pos_embed[[i + 1, j]];
            }
        }
        let (block_out, block_cache) = block_forward(&self.block, &seq.view(), self.heads)?;
        let full = linear(&block_out.view(), &self.pred, &self.pred_bias);
        let recon = full.slice(s![1.., ..]).to_owned();
        Ok((
            recon,
            DecoderCache {
                enc_tokens: enc_tokens.to_owned(),
                binary_mask: binary_mask.to_vec(),
                seq_in: seq,
                block_cache,
                block_out,
            },
        ))
    }

    /// Backward from the gradient on the reconstructed patches. Returns
    /// decoder parameter gradients and the gradient on the encoder tokens.
    pub fn backward(&self, cache: &DecoderCache, d_recon: &ArrayView2<f64>) -> (Decoder, Array2<f64>) {
        let mut grads = self.zeros_like();
        let n = cache.binary_mask.len();
        let dd = self.proj.shape()[1];

        // Prediction layer saw all N+1 rows; the class row was dropped.
        let mut d_full = Array2::zeros((n + 1, d_recon.shape()[1]));
        d_full.slice_mut(s![1.., ..]).assign(d_recon);
        let (d_block_out, dpred, dpred_bias) =
            linear_backward(&cache.block_out.view(), &self.pred, &d_full.view());
        grads.pred = dpred;
        grads.pred_bias = dpred_bias;

        let (d_seq, block_grads) =
            block_backward(&self.block, &cache.block_cache, &d_block_out.view(), None, self.heads);
        grads.block = block_grads;
        let _ = &cache.seq_in;

        // Positional embeddings receive the sequence gradient directly.
        for i in 0..=n {
            for j in 0..dd {
                grads.pos_embed[[i, j]] += d_seq[[i, j]];
            }
        }
        // Undo the reinsertion: masked rows feed the mask token, visible rows
        // map back to projected encoder rows in ascending order.
        let kept = cache.binary_mask.iter().filter(|&&m| m == 0).count();
        let mut d_projected = Array2::zeros((kept + 1, dd));
        for j in 0..dd {
            d_projected[[0, j]] = d_seq[[0, j]];
        }
        let mut next = 0;
        for i in 0..n {
            if cache.binary_mask[i] == 0 {
                for j in 0..dd {
                    d_projected[[next + 1, j]] = d_seq[[i + 1, j]];
                }
                next += 1;
            } else {
                for j in 0..dd {
                    grads.mask_token[j] += d_seq[[i + 1, j]];
                }
            }
        }
        let (d_enc, dproj, dproj_bias) =
            linear_backward(&cache.enc_tokens.view(), &self.proj, &d_projected.view());
        grads.proj = dproj;
        grads.proj_bias = dproj_bias;
        (grads, d_enc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patching::{generate_mask, patchify, PatchGridSpec};
    use crate::seeds;
    use ndarray::array;
    use rand::Rng;

    fn toy_block(dim: usize, seed: u64) -> BlockParams {
        BlockParams::init(dim, 4, &mut seeds::stream(seed))
    }

    #[test]
    fn zeroed_projections_make_block_identity() {
        let mut p = toy_block(8, 1);
        p.wo.fill(0.0);
        p.bo.fill(0.0);
        p.w2.fill(0.0);
        p.b2.fill(0.0);
        let x = Array2::from_shape_fn((5, 8), |(i, j)| (i as f64) - (j as f64) * 0.3);
        let (y, _) = transformer_block(&p, &x.view(), 2).unwrap();
        assert!(x.iter().zip(y.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let p = toy_block(16, 2);
        let mut rng = seeds::stream(3);
        let x = Array2::from_shape_fn((7, 16), |_| rng.random_range(-2.0..2.0));
        let (_, attn) = transformer_block(&p, &x.view(), 4).unwrap();
        for h in 0..4 {
            for i in 0..7 {
                let sum: f64 = (0..7).map(|j| attn[[h, i, j]]).sum();
                assert!((sum - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn one_token_block_matches_scalar_trace() {
        // Hand evaluation at d = 2, one token, one head, with hand-set
        // weights. With a single token the attention row is exactly 1, so the
        // block reduces to scalar arithmetic we can write out longhand.
        let d = 2;
        let mut p = BlockParams::init(d, 2, &mut seeds::stream(0));
        p.ln1_scale = array![1.0, 1.0];
        p.ln1_offset = array![0.0, 0.0];
        p.wq = array![[0.3, -0.1], [0.2, 0.5]];
        p.bq = array![0.0, 0.1];
        p.wk = array![[0.1, 0.4], [-0.2, 0.3]];
        p.bk = array![0.05, -0.05];
        p.wv = array![[0.7, 0.2], [-0.3, 0.6]];
        p.bv = array![0.01, 0.02];
        p.wo = array![[0.5, -0.4], [0.3, 0.8]];
        p.bo = array![0.1, -0.1];
        p.ln2_scale = array![1.2, 0.8];
        p.ln2_offset = array![0.05, -0.02];
        p.w1 = array![[0.4, -0.3, 0.2, 0.1], [0.6, 0.5, -0.1, 0.3]];
        p.b1 = array![0.0, 0.1, 0.2, -0.1];
        p.w2 = array![[0.3, -0.2], [0.1, 0.4], [-0.5, 0.2], [0.2, 0.6]];
        p.b2 = array![0.02, 0.03];

        let x = array![[0.9, -0.4]];

        // Scalar trace of the two residual branches.
        let mean: f64 = (0.9 + (-0.4)) / 2.0;
        let var = ((0.9 - mean).powi(2) + (-0.4 - mean).powi(2)) / 2.0;
        let inv = 1.0 / (var + 1e-6).sqrt();
        let a = [(0.9 - mean) * inv, (-0.4 - mean) * inv];
        // Attention over a single token is the value row through wo.
        let v = [
            a[0] * 0.7 + a[1] * (-0.3) + 0.01,
            a[0] * 0.2 + a[1] * 0.6 + 0.02,
        ];
        let attn_out = [
            v[0] * 0.5 + v[1] * 0.3 + 0.1,
            v[0] * (-0.4) + v[1] * 0.8 - 0.1,
        ];
        let fp = [0.9 + attn_out[0], -0.4 + attn_out[1]];
        let mean2: f64 = (fp[0] + fp[1]) / 2.0;
        let var2 = ((fp[0] - mean2).powi(2) + (fp[1] - mean2).powi(2)) / 2.0;
        let inv2 = 1.0 / (var2 + 1e-6).sqrt();
        let b = [
            1.2 * (fp[0] - mean2) * inv2 + 0.05,
            0.8 * (fp[1] - mean2) * inv2 - 0.02,
        ];
        let z = [
            b[0] * 0.4 + b[1] * 0.6,
            b[0] * (-0.3) + b[1] * 0.5 + 0.1,
            b[0] * 0.2 + b[1] * (-0.1) + 0.2,
            b[0] * 0.1 + b[1] * 0.3 - 0.1,
        ];
        let g = |x: f64| {
            let u = (2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x);
            0.5 * x * (1.0 + u.tanh())
        };
        let h = [g(z[0]), g(z[1]), g(z[2]), g(z[3])];
        let ffn = [
            h[0] * 0.3 + h[1] * 0.1 + h[2] * (-0.5) + h[3] * 0.2 + 0.02,
            h[0] * (-0.2) + h[1] * 0.4 + h[2] * 0.2 + h[3] * 0.6 + 0.03,
        ];
        let expected = [fp[0] + ffn[0], fp[1] + ffn[1]];

        let (y, attn) = transformer_block(&p, &x.view(), 1).unwrap();
        assert!((y[[0, 0]] - expected[0]).abs() < 1e-12);
        assert!((y[[0, 1]] - expected[1]).abs() < 1e-12);
        assert!((attn[[0, 0, 0]] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn block_width_mismatch_is_invalid_shape() {
        let p = toy_block(8, 4);
        let x = Array2::<f64>::zeros((3, 6));
        assert!(matches!(
            transformer_block(&p, &x.view(), 2),
            Err(Error::InvalidShape(_))
        ));
    }

    #[test]
    fn class_attention_uniform_and_two_head_average() {
        // Uniform attention: every stack entry is 1/M.
        let m = 5;
        let uniform = Array3::from_elem((2, m, m), 1.0 / m as f64);
        let stack = class_attention(&[uniform], Some(m - 1)).unwrap();
        assert!(stack.rows.iter().all(|&v| (v - 0.2).abs() < 1e-12));

        // Two heads with rows p and q average elementwise.
        let mut attn = Array3::zeros((2, 3, 3));
        let p = [0.2, 0.3, 0.5];
        let q = [0.6, 0.1, 0.3];
        for j in 0..3 {
            attn[[0, 0, j]] = p[j];
            attn[[1, 0, j]] = q[j];
        }
        let stack = class_attention(&[attn], Some(2)).unwrap();
        assert!((stack.rows[[0, 0]] - (p[1] + q[1]) / 2.0).abs() < 1e-12);
        assert!((stack.rows[[0, 1]] - (p[2] + q[2]) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn class_attention_wrong_token_count_is_rejected() {
        let attn = Array3::from_elem((1, 5, 5), 0.2);
        assert!(class_attention(&[attn], Some(8)).is_err());
    }

    fn toy_cfg() -> ModelConfig {
        let cfg = ModelConfig::gradcheck();
        cfg.validate().unwrap();
        cfg
    }

    fn random_patches(cfg: &ModelConfig, seed: u64) -> Array2<f64> {
        let spec = PatchGridSpec::square(cfg.image_size, cfg.patch_size).unwrap();
        let mut rng = seeds::stream(seed);
        let img = ndarray::Array3::from_shape_fn(
            (cfg.image_size, cfg.image_size, 3),
            |_| rng.random::<f64>(),
        );
        patchify(&img, &spec).unwrap()
    }

    #[test]
    fn encode_shapes_pretrain_and_full() {
        let cfg = toy_cfg();
        let enc = Encoder::init(&cfg, &mut seeds::stream(10));
        let patches = random_patches(&cfg, 11);
        let mask = generate_mask(cfg.num_patches(), 0.75, &mut seeds::stream(12)).unwrap();

        let masked = enc.forward(&patches.view(), Some(&mask)).unwrap();
        assert_eq!(masked.tokens.shape(), &[4 + 1, 16]); // (1-r)N + 1 = 5
        assert!(masked.stack.is_none());

        let full = enc.forward(&patches.view(), None).unwrap();
        assert_eq!(full.tokens.shape(), &[17, 16]);
        let stack = full.stack.unwrap();
        assert_eq!(stack.rows.shape(), &[2, 16]);
        stack.validate(Some(2)).unwrap();
    }

    #[test]
    fn stack_rows_sum_below_one() {
        let cfg = toy_cfg();
        let enc = Encoder::init(&cfg, &mut seeds::stream(20));
        let patches = random_patches(&cfg, 21);
        let full = enc.forward(&patches.view(), None).unwrap();
        for row in full.stack.unwrap().rows.rows() {
            let sum = row.sum();
            assert!(sum > 0.0 && sum < 1.0, "sum {sum}");
        }
    }

    #[test]
    fn masked_patches_do_not_affect_encoding() {
        let cfg = toy_cfg();
        let enc = Encoder::init(&cfg, &mut seeds::stream(30));
        let patches = random_patches(&cfg, 31);
        let mask = generate_mask(cfg.num_patches(), 0.5, &mut seeds::stream(32)).unwrap();
        let out1 = enc.forward(&patches.view(), Some(&mask)).unwrap();

        // Permute the masked-out rows among themselves.
        let masked_idx: Vec<usize> =
            (0..mask.len()).filter(|&i| mask[i] == 1).collect();
        let mut permuted = patches.clone();
        for w in masked_idx.windows(2) {
            let (a, b) = (w[0], w[1]);
            let rowa = patches.row(a).to_owned();
            let rowb = patches.row(b).to_owned();
            permuted.row_mut(a).assign(&rowb);
            permuted.row_mut(b).assign(&rowa);
        }
        let out2 = enc.forward(&permuted.view(), Some(&mask)).unwrap();
        assert_eq!(out1.tokens, out2.tokens);
    }

    #[test]
    fn encoder_is_deterministic() {
        let cfg = toy_cfg();
        let enc = Encoder::init(&cfg, &mut seeds::stream(40));
        let patches = random_patches(&cfg, 41);
        let a = enc.forward(&patches.view(), None).unwrap();
        let b = enc.forward(&patches.view(), None).unwrap();
        assert_eq!(a.tokens, b.tokens);
    }

    #[test]
    fn decoder_shapes_and_zeroed_prediction() {
        let cfg = toy_cfg();
        let enc = Encoder::init(&cfg, &mut seeds::stream(50));
        let mut dec = Decoder::init(&cfg, &mut seeds::stream(51));
        let patches = random_patches(&cfg, 52);
        let mask = generate_mask(cfg.num_patches(), 0.75, &mut seeds::stream(53)).unwrap();
        let encoded = enc.forward(&patches.view(), Some(&mask)).unwrap();
        let (recon, _) = dec.forward(&encoded.tokens.view(), &mask).unwrap();
        assert_eq!(recon.shape(), &[16, 8 * 8 * 3]);

        dec.pred.fill(0.0);
        dec.pred_bias.fill(0.25);
        let (recon, _) = dec.forward(&encoded.tokens.view(), &mask).unwrap();
        assert!(recon.iter().all(|&v| (v - 0.25).abs() < 1e-12));
    }

    #[test]
    fn paper_scale_shapes() {
        let cfg = ModelConfig::paper();
        let enc = Encoder::init(&cfg, &mut seeds::stream(60));
        let dec = Decoder::init(&cfg, &mut seeds::stream(61));
        let patches = Array2::from_elem((256, 768), 0.5);
        let mask = generate_mask(256, 0.75, &mut seeds::stream(62)).unwrap();

        let masked = enc.forward(&patches.view(), Some(&mask)).unwrap();
        assert_eq!(masked.tokens.shape(), &[65, 768]);
        let (recon, _) = dec.forward(&masked.tokens.view(), &mask).unwrap();
        assert_eq!(recon.shape(), &[256, 768]);

        let full = enc.forward(&patches.view(), None).unwrap();
        assert_eq!(full.tokens.shape(), &[257, 768]);
        assert_eq!(full.stack.unwrap().rows.shape(), &[12, 256]);
    }

    #[test]
    fn decoder_hand_trace_at_n4() {
        // Independent naive evaluation of the documented decoder composition
        // at d_d = 2, N = 4: project, reinsert mask tokens, add positions,
        // one hand-set block, predict, drop the class row.
        let mut cfg = ModelConfig::gradcheck();
        cfg.image_size = 16; // N = 4
        cfg.embed_dim = 2;
        cfg.decoder_dim = 2;
        cfg.heads = 1;
        cfg.decoder_heads = 1;
        cfg.ffn_ratio = 2;
        let mut dec = Decoder::init(&cfg, &mut seeds::stream(70));
        // Overwrite with small hand-set values.
        dec.proj = array![[1.0, 0.5], [-0.5, 1.0]];
        dec.proj_bias = array![0.1, -0.1];
        dec.mask_token = array![0.3, -0.2];
        dec.pos_embed = array![
            [0.01, 0.02],
            [0.03, -0.01],
            [-0.02, 0.04],
            [0.00, 0.01],
            [0.02, -0.03]
        ];
        dec.pred = array![[0.4, -0.3, 0.2], [0.1, 0.6, -0.2]];
        dec.pred_bias = array![0.05, 0.0, -0.05];

        let enc_tokens = array![[0.2, -0.4], [0.7, 0.1], [-0.3, 0.9]];
        let mask = [1u8, 0, 1, 0];

        // Naive trace with plain loops.
        let proj = |t: [f64; 2]| {
            [
                t[0] * 1.0 + t[1] * (-0.5) + 0.1,
                t[0] * 0.5 + t[1] * 1.0 - 0.1,
            ]
        };
        let cls = proj([0.2, -0.4]);
        let v1 = proj([0.7, 0.1]);
        let v3 = proj([-0.3, 0.9]);
        let rows = [
            [cls[0] + 0.01, cls[1] + 0.02],
            [0.3 + 0.03, -0.2 - 0.01],
            [v1[0] - 0.02, v1[1] + 0.04],
            [0.3 + 0.00, -0.2 + 0.01],
            [v3[0] + 0.02, v3[1] - 0.03],
        ];
        let seq = Array2::from_shape_fn((5, 2), |(i, j)| rows[i][j]);
        let (block_out, _) = transformer_block(&dec.block, &seq.view(), 1).unwrap();
        let mut expected = Array2::zeros((4, 3));
        for i in 0..4 {
            for j in 0..3 {
                expected[[i, j]] = block_out[[i + 1, 0]] * dec.pred[[0, j]]
                    + block_out[[i + 1, 1]] * dec.pred[[1, j]]
                    + dec.pred_bias[j];
            }
        }

        let (recon, _) = dec.forward(&enc_tokens.view(), &mask).unwrap();
        for (a, b) in recon.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn block_backward_matches_finite_differences() {
        let dim = 8;
        let heads = 2;
        let p = toy_block(dim, 80);
        let mut rng = seeds::stream(81);
        let x = Array2::from_shape_fn((5, dim), |_| rng.random_range(-1.0..1.0));
        let dy = Array2::from_shape_fn((5, dim), |_| rng.random_range(-1.0..1.0));

        let loss = |p: &BlockParams, x: &Array2<f64>| -> f64 {
            let (y, _) = block_forward(p, &x.view(), heads).map(|(y, c)| (y, c)).unwrap();
            (&y * &dy).sum()
        };

        let (_, cache) = block_forward(&p, &x.view(), heads).unwrap();
        let (dx, grads) = block_backward(&p, &cache, &dy.view(), None, heads);

        let eps = 1e-6;
        for &(i, j) in &[(0, 0), (2, 5), (4, 7)] {
            let mut xp = x.clone();
            xp[[i, j]] += eps;
            let mut xm = x.clone();
            xm[[i, j]] -= eps;
            let fd = (loss(&p, &xp) - loss(&p, &xm)) / (2.0 * eps);
            assert!((fd - dx[[i, j]]).abs() / fd.abs().max(1.0) < 1e-6);
        }
        // One matrix per family.
        let check = |get: &dyn Fn(&BlockParams) -> &Array2<f64>,
                     set: &dyn Fn(&mut BlockParams, (usize, usize), f64),
                     g: &Array2<f64>| {
            for &(i, j) in &[(0, 0), (1, 3)] {
                let mut pp = p.clone();
                set(&mut pp, (i, j), eps);
                let mut pm = p.clone();
                set(&mut pm, (i, j), -eps);
                let fd = (loss(&pp, &x) - loss(&pm, &x)) / (2.0 * eps);
                let an = g[[i, j]];
                assert!(
                    (fd - an).abs() / fd.abs().max(1.0) < 1e-6,
                    "fd {fd} vs {an}"
                );
            }
            let _ = get;
        };
        check(&|p| &p.wq, &|p, ij, e| p.wq[ij] += e, &grads.wq);
        check(&|p| &p.wk, &|p, ij, e| p.wk[ij] += e, &grads.wk);
        check(&|p| &p.wv, &|p, ij, e| p.wv[ij] += e, &grads.wv);
        check(&|p| &p.wo, &|p, ij, e| p.wo[ij] += e, &grads.wo);
        check(&|p| &p.w1, &|p, ij, e| p.w1[ij] += e, &grads.w1);
        check(&|p| &p.w2, &|p, ij, e| p.w2[ij] += e, &grads.w2);
    }

    #[test]
    fn attention_gradient_path_matches_fd() {
        // Loss defined directly on the class-attention stack must flow into
        // query/key projections.
        let cfg = toy_cfg();
        let enc = Encoder::init(&cfg, &mut seeds::stream(90));
        let patches = random_patches(&cfg, 91);
        let mut rng = seeds::stream(92);
        let target = Array2::from_shape_fn(
            (cfg.encoder_blocks, cfg.num_patches()),
            |_| rng.random_range(0.0..0.1),
        );

        let loss = |e: &Encoder| -> f64 {
            let out = e.forward(&patches.view(), None).unwrap();
            let stack = out.stack.unwrap();
            (&stack.rows - &target).mapv(|v| v * v).sum()
        };

        let out = enc.forward(&patches.view(), None).unwrap();
        let stack = out.stack.as_ref().unwrap();
        let d_stack = (&stack.rows - &target).mapv(|v| 2.0 * v);
        let d_tokens = Array2::zeros(out.tokens.raw_dim());
        let grads = enc.backward(&out.cache, &d_tokens.view(), Some(&d_stack));

        let eps = 1e-6;
        for &(i, j) in &[(0, 0), (3, 7), (10, 2)] {
            let mut ep = enc.clone();
            ep.blocks[0].wq[[i, j]] += eps;
            let mut em = enc.clone();
            em.blocks[0].wq[[i, j]] -= eps;
            let fd = (loss(&ep) - loss(&em)) / (2.0 * eps);
            let an = grads.blocks[0].wq[[i, j]];
            assert!(
                (fd - an).abs() / fd.abs().max(1e-8) < 1e-4,
                "fd {fd} vs {an}"
            );
        }
    }
}
