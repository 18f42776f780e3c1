//! Image-side encoders: the per-stream ViT and cross-resolution fusion.

use super::{Block, EncoderConfig, LayerNorm, Linear, MultiHeadAttention, NamedParams, ParamInit};
use crate::error::{Error, Result};
use crate::patchify::{DynRslInput, StreamKind};
use crate::tensor::{add, concat, embedding, narrow, Tensor};

/// ViT-style encoder applied independently to every patch stream: linear
/// patch projection, learned positional embedding per grid slot, then
/// pre-norm attention blocks. Frozen by default during alignment training.
pub struct ImageEncoder {
    patch_proj: Linear,
    pos: Tensor,
    blocks: Vec<Block>,
    ln_out: LayerNorm,
    patch_dim: usize,
    max_tokens: usize,
}

impl ImageEncoder {
    pub fn new(init: &mut ParamInit, cfg: &EncoderConfig, patch_dim: usize) -> ImageEncoder {
        let enc = ImageEncoder {
            patch_proj: Linear::new(init, patch_dim, cfg.d_model),
            pos: init.embedding(vec![cfg.max_stream_tokens, cfg.d_model]),
            blocks: (0..cfg.n_layers).map(|_| Block::new(init, cfg)).collect(),
            ln_out: LayerNorm::new(init, cfg.d_model),
            patch_dim,
            max_tokens: cfg.max_stream_tokens,
        };
        enc.set_frozen(cfg.frozen_vit);
        enc
    }

    /// Toggle gradient flow into every ViT parameter.
    pub fn set_frozen(&self, frozen: bool) {
        let mut params = Vec::new();
        self.collect(&mut params, "vit");
        for (_, p) in params {
            p.set_requires_grad(!frozen);
        }
    }

    /// Encode one stream's raw patch tokens into `[tokens, d_model]`.
    pub fn encode_stream(&self, tokens: &Tensor) -> Result<Tensor> {
        let (t, dim) = tokens.dims2("encode_stream")?;
        if dim != self.patch_dim {
            return Err(Error::Shape {
                op: "encode_stream",
                detail: format!(
                    "token vectors are {dim}-wide but the patch projection expects {}",
                    self.patch_dim
                ),
            });
        }
        if t > self.max_tokens {
            return Err(Error::Shape {
                op: "encode_stream",
                detail: format!("stream has {t} tokens, positional table holds {}", self.max_tokens),
            });
        }
        let mut x = add(&self.patch_proj.forward(tokens)?, &narrow(&self.pos, 0, 0, t)?)?;
        for b in &self.blocks {
            x = b.forward(&x, None)?;
        }
        self.ln_out.forward(&x)
    }

    /// Encode every stream of a dynamic-resolution bundle independently.
    pub fn encode(&self, input: &DynRslInput) -> Result<Vec<(StreamKind, Tensor)>> {
        input
            .streams()
            .map(|s| Ok((s.stream_kind, self.encode_stream(&s.tokens)?)))
            .collect()
    }

    pub fn collect(&self, out: &mut NamedParams, prefix: &str) {
        self.patch_proj.collect(out, &format!("{prefix}.patch_proj"));
        super::push_param(out, prefix, "pos", &self.pos);
        for (i, b) in self.blocks.iter().enumerate() {
            b.collect(out, &format!("{prefix}.blocks.{i}"));
        }
        self.ln_out.collect(out, &format!("{prefix}.ln_out"));
    }
}

/// One trainable attention layer over the concatenated token set of all
/// streams, with a learned stream-kind embedding added per token. No
/// positional information is introduced here, so reordering streams of
/// equal kind permutes the output rows correspondingly.
pub struct StreamFusion {
    kind_emb: Tensor,
    ln: LayerNorm,
    attn: MultiHeadAttention,
    ln_out: LayerNorm,
}

impl StreamFusion {
    pub fn new(init: &mut ParamInit, cfg: &EncoderConfig) -> StreamFusion {
        StreamFusion {
            kind_emb: init.embedding(vec![3, cfg.d_model]),
            ln: LayerNorm::new(init, cfg.d_model),
            attn: MultiHeadAttention::new(init, cfg.d_model, cfg.n_heads),
            ln_out: LayerNorm::new(init, cfg.d_model),
        }
    }

    /// Fuse per-stream features into one `[total_tokens, d_model]` matrix.
    pub fn fuse(&self, features: &[(StreamKind, Tensor)]) -> Result<Tensor> {
        if features.is_empty() {
            return Err(Error::Contract {
                what: "fuse_streams needs at least one stream".into(),
            });
        }
        let parts: Vec<&Tensor> = features.iter().map(|(_, t)| t).collect();
        let x = if parts.len() == 1 {
            parts[0].clone()
        } else {
            concat(0, &parts)?
        };
        let mut kind_ids = Vec::with_capacity(x.shape()[0]);
        for (kind, t) in features {
            kind_ids.extend(std::iter::repeat_n(kind.index(), t.shape()[0]));
        }
        let ke = embedding(&self.kind_emb, &kind_ids)?;
        let x = add(&x, &ke)?;
        let a = self.attn.forward(&self.ln.forward(&x)?, None)?;
        self.ln_out.forward(&add(&x, &a)?)
    }

    pub fn collect(&self, out: &mut NamedParams, prefix: &str) {
        super::push_param(out, prefix, "kind_emb", &self.kind_emb);
        self.ln.collect(out, &format!("{prefix}.ln"));
        self.attn.collect(out, &format!("{prefix}.attn"));
        self.ln_out.collect(out, &format!("{prefix}.ln_out"));
    }
}
