//! Bidirectional text encoder with PAD positions masked out of attention.

use super::vocab::{TokenKind, TokenSequence};
use super::{Block, EncoderConfig, LayerNorm, NamedParams, ParamInit, MASK_NEG};
use crate::error::{Error, Result};
use crate::tensor::{add, embedding, narrow, row, Tensor};

pub struct TextEncoder {
    tok_emb: Tensor,
    pos: Tensor,
    blocks: Vec<Block>,
    ln_out: LayerNorm,
    vocab_size: usize,
    max_len: usize,
}

impl TextEncoder {
    pub fn new(init: &mut ParamInit, cfg: &EncoderConfig) -> TextEncoder {
        TextEncoder {
            tok_emb: init.embedding(vec![cfg.vocab.len(), cfg.d_model]),
            pos: init.embedding(vec![cfg.max_text_len, cfg.d_model]),
            blocks: (0..cfg.n_layers).map(|_| Block::new(init, cfg)).collect(),
            ln_out: LayerNorm::new(init, cfg.d_model),
            vocab_size: cfg.vocab.len(),
            max_len: cfg.max_text_len,
        }
    }

    fn check(&self, seq: &TokenSequence) -> Result<()> {
        if seq.is_empty() || seq.len() > self.max_len {
            return Err(Error::Contract {
                what: format!("sequence length {} outside 1..={}", seq.len(), self.max_len),
            });
        }
        if let Some(&bad) = seq.ids.iter().find(|&&i| i >= self.vocab_size) {
            return Err(Error::Tokenize {
                what: format!("unknown vocab id {bad} (vocabulary holds {})", self.vocab_size),
            });
        }
        Ok(())
    }

    /// Additive key mask that removes PAD positions from every query's view.
    fn pad_mask(seq: &TokenSequence) -> Option<Tensor> {
        let l = seq.len();
        if seq.kinds.iter().all(|&k| k != TokenKind::Pad) {
            return None;
        }
        let mut m = vec![0.0; l * l];
        for (j, &k) in seq.kinds.iter().enumerate() {
            if k == TokenKind::Pad {
                for i in 0..l {
                    m[i * l + j] = MASK_NEG;
                }
            }
        }
        Some(Tensor::new(vec![l, l], m).expect("finite mask"))
    }

    /// Contextual features `[len, d_model]` for every position.
    pub fn encode(&self, seq: &TokenSequence) -> Result<Tensor> {
        self.check(seq)?;
        let l = seq.len();
        let mut x = add(&embedding(&self.tok_emb, &seq.ids)?, &narrow(&self.pos, 0, 0, l)?)?;
        let mask = Self::pad_mask(seq);
        for b in &self.blocks {
            x = b.forward(&x, mask.as_ref())?;
        }
        self.ln_out.forward(&x)
    }

    /// Full features plus the position-0 vector (the sequence summary used
    /// for projection into the shared space).
    pub fn encode_with_head(&self, seq: &TokenSequence) -> Result<(Tensor, Tensor)> {
        let z = self.encode(seq)?;
        let head = row(&z, 0)?;
        Ok((z, head))
    }

    pub fn collect(&self, out: &mut NamedParams, prefix: &str) {
        super::push_param(out, prefix, "tok_emb", &self.tok_emb);
        super::push_param(out, prefix, "pos", &self.pos);
        for (i, b) in self.blocks.iter().enumerate() {
            b.collect(out, &format!("{prefix}.blocks.{i}"));
        }
        self.ln_out.collect(out, &format!("{prefix}.ln_out"));
    }
}
