//! Tiny from-scratch transformer encoders: a freezable ViT-style image
//! encoder per patch stream, cross-resolution stream fusion, a bidirectional
//! text encoder, and a causal decoder with an attendable image prefix.

mod decoder;
mod image_enc;
mod text_enc;
mod vocab;

pub use decoder::TextDecoder;
pub use image_enc::{ImageEncoder, StreamFusion};
pub use text_enc::TextEncoder;
pub use vocab::{
    mask_text, tokenize, TokenKind, TokenSequence, Vocab, CLS_ID, DEC_ID, MASK_ID, PAD_ID,
    SPECIAL_TOKENS,
};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::tensor::{add, add_row, gelu, layer_norm, matmul, narrow, softmax_rows, transpose, Tensor};

/// Additive attention-mask value for disallowed key positions. Large enough
/// that the masked weight underflows to exactly zero after softmax.
pub(crate) const MASK_NEG: f64 = -1e9;

/// Dimensions and freezing flags shared by the encoders.
#[derive(Debug, Clone)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_text_len: usize,
    /// Largest per-stream token count the image encoder can position-embed.
    pub max_stream_tokens: usize,
    pub vocab: Vocab,
    pub frozen_vit: bool,
}

impl EncoderConfig {
    pub fn new(vocab: Vocab) -> EncoderConfig {
        EncoderConfig {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 128,
            max_text_len: 32,
            max_stream_tokens: 196,
            vocab,
            frozen_vit: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config {
                what: format!(
                    "d_model {} must be a positive multiple of n_heads {}",
                    self.d_model, self.n_heads
                ),
            });
        }
        if self.n_layers == 0 || self.d_ff == 0 || self.max_text_len < 2 {
            return Err(Error::Config {
                what: "n_layers and d_ff must be positive; max_text_len must be >= 2".into(),
            });
        }
        Ok(())
    }
}

/// Seeded parameter factory. Linear weights draw from a fan-scaled uniform
/// range (`sqrt(6 / (fan_in + fan_out))`); embedding tables draw from
/// uniform(-0.02, 0.02); biases start at zero and layer-norm affines at
/// identity. Creation order fixes the random stream, so builds are
/// deterministic for a given seed.
pub struct ParamInit {
    rng: ChaCha20Rng,
}

impl ParamInit {
    pub fn new(seed: u64) -> ParamInit {
        ParamInit {
            rng: ChaCha20Rng::seed_from_u64(seed),
        }
    }

    /// Fan-scaled uniform weight matrix `[fan_in, fan_out]`.
    pub fn weight(&mut self, shape: Vec<usize>) -> Tensor {
        let bound = match shape.as_slice() {
            [fan_in, fan_out] => (6.0 / (fan_in + fan_out) as f64).sqrt(),
            _ => 0.02,
        };
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| self.rng.gen_range(-bound..bound)).collect();
        Tensor::param(shape, data).expect("finite init")
    }

    /// Embedding table at the conventional 0.02 uniform scale.
    pub fn embedding(&mut self, shape: Vec<usize>) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| self.rng.gen_range(-0.02..0.02)).collect();
        Tensor::param(shape, data).expect("finite init")
    }

    pub fn zeros(&mut self, shape: Vec<usize>) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::param(shape, vec![0.0; n]).expect("finite init")
    }

    pub fn ones(&mut self, shape: Vec<usize>) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::param(shape, vec![1.0; n]).expect("finite init")
    }
}

/// Named parameters in deterministic traversal order.
pub type NamedParams = Vec<(String, Tensor)>;

pub(crate) fn push_param(out: &mut NamedParams, prefix: &str, name: &str, t: &Tensor) {
    out.push((format!("{prefix}.{name}"), t.clone()));
}

/// Affine map `x W + b` applied row-wise; the bias is optional.
pub(crate) struct Linear {
    pub w: Tensor,
    pub b: Option<Tensor>,
}

impl Linear {
    pub fn new(init: &mut ParamInit, d_in: usize, d_out: usize) -> Linear {
        Linear {
            w: init.weight(vec![d_in, d_out]),
            b: Some(init.zeros(vec![d_out])),
        }
    }

    /// Pure linear map. Used for the attention key projection, where a bias
    /// would cancel out of the row-wise softmax and never receive gradient.
    pub fn new_unbiased(init: &mut ParamInit, d_in: usize, d_out: usize) -> Linear {
        Linear {
            w: init.weight(vec![d_in, d_out]),
            b: None,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = matmul(x, &self.w)?;
        match &self.b {
            Some(b) => add_row(&y, b),
            None => Ok(y),
        }
    }

    pub fn collect(&self, out: &mut NamedParams, prefix: &str) {
        push_param(out, prefix, "w", &self.w);
        if let Some(b) = &self.b {
            push_param(out, prefix, "b", b);
        }
    }
}

pub(crate) struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(init: &mut ParamInit, d: usize) -> LayerNorm {
        LayerNorm {
            gamma: init.ones(vec![d]),
            beta: init.zeros(vec![d]),
            eps: 1e-6,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        layer_norm(x, &self.gamma, &self.beta, self.eps)
    }

    pub fn collect(&self, out: &mut NamedParams, prefix: &str) {
        push_param(out, prefix, "gamma", &self.gamma);
        push_param(out, prefix, "beta", &self.beta);
    }
}

/// Multi-head self-attention over column-sliced heads. `mask`, when
/// present, is an additive `[T, T]` matrix applied to every head's scores.
pub(crate) struct MultiHeadAttention {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    n_heads: usize,
}

impl MultiHeadAttention {
    pub fn new(init: &mut ParamInit, d_model: usize, n_heads: usize) -> MultiHeadAttention {
        MultiHeadAttention {
            wq: Linear::new(init, d_model, d_model),
            wk: Linear::new_unbiased(init, d_model, d_model),
            wv: Linear::new(init, d_model, d_model),
            wo: Linear::new(init, d_model, d_model),
            n_heads,
        }
    }

    pub fn forward(&self, x: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let (_t, d) = x.dims2("attention")?;
        let dh = d / self.n_heads;
        let q = self.wq.forward(x)?;
        let k = self.wk.forward(x)?;
        let v = self.wv.forward(x)?;
        let scale_factor = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let qh = narrow(&q, 1, h * dh, dh)?;
            let kh = narrow(&k, 1, h * dh, dh)?;
            let vh = narrow(&v, 1, h * dh, dh)?;
            let mut scores = crate::tensor::scale(&matmul(&qh, &transpose(&kh)?)?, scale_factor)?;
            if let Some(m) = mask {
                scores = add(&scores, m)?;
            }
            let attn = softmax_rows(&scores, 1.0)?;
            heads.push(matmul(&attn, &vh)?);
        }
        let refs: Vec<&Tensor> = heads.iter().collect();
        let ctx = crate::tensor::concat(1, &refs)?;
        self.wo.forward(&ctx)
    }

    pub fn collect(&self, out: &mut NamedParams, prefix: &str) {
        self.wq.collect(out, &format!("{prefix}.wq"));
        self.wk.collect(out, &format!("{prefix}.wk"));
        self.wv.collect(out, &format!("{prefix}.wv"));
        self.wo.collect(out, &format!("{prefix}.wo"));
    }
}

pub(crate) struct FeedForward {
    l1: Linear,
    l2: Linear,
}

impl FeedForward {
    pub fn new(init: &mut ParamInit, d_model: usize, d_ff: usize) -> FeedForward {
        FeedForward {
            l1: Linear::new(init, d_model, d_ff),
            l2: Linear::new(init, d_ff, d_model),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.l2.forward(&gelu(&self.l1.forward(x)?)?)
    }

    pub fn collect(&self, out: &mut NamedParams, prefix: &str) {
        self.l1.collect(out, &format!("{prefix}.l1"));
        self.l2.collect(out, &format!("{prefix}.l2"));
    }
}

/// Pre-norm transformer block: `x + attn(ln1(x))`, then `x + ff(ln2(x))`.
pub(crate) struct Block {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    ff: FeedForward,
}

impl Block {
    pub fn new(init: &mut ParamInit, cfg: &EncoderConfig) -> Block {
        Block {
            ln1: LayerNorm::new(init, cfg.d_model),
            attn: MultiHeadAttention::new(init, cfg.d_model, cfg.n_heads),
            ln2: LayerNorm::new(init, cfg.d_model),
            ff: FeedForward::new(init, cfg.d_model, cfg.d_ff),
        }
    }

    pub fn forward(&self, x: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let x = add(x, &self.attn.forward(&self.ln1.forward(x)?, mask)?)?;
        add(&x, &self.ff.forward(&self.ln2.forward(&x)?)?)
    }

    pub fn collect(&self, out: &mut NamedParams, prefix: &str) {
        self.ln1.collect(out, &format!("{prefix}.ln1"));
        self.attn.collect(out, &format!("{prefix}.attn"));
        self.ln2.collect(out, &format!("{prefix}.ln2"));
        self.ff.collect(out, &format!("{prefix}.ff"));
    }
}
