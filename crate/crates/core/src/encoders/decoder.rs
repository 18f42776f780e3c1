//! Causal text decoder with projected image features as an attendable
//! prefix. Prefix positions attend among themselves; text position `t`
//! attends to the whole prefix and to text positions `<= t`.

use super::vocab::TokenSequence;
use super::{Block, EncoderConfig, LayerNorm, Linear, NamedParams, ParamInit, MASK_NEG};
use crate::error::{Error, Result};
use crate::tensor::{add, concat, narrow, Tensor};

pub struct TextDecoder {
    in_proj: Linear,
    pos: Tensor,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    out: Linear,
    max_len: usize,
}

impl TextDecoder {
    /// `d_in` is the width of the projected features fed to the decoder.
    pub fn new(init: &mut ParamInit, cfg: &EncoderConfig, d_in: usize) -> TextDecoder {
        TextDecoder {
            in_proj: Linear::new(init, d_in, cfg.d_model),
            pos: init.embedding(vec![cfg.max_text_len, cfg.d_model]),
            blocks: (0..cfg.n_layers).map(|_| Block::new(init, cfg)).collect(),
            ln_f: LayerNorm::new(init, cfg.d_model),
            out: Linear::new(init, cfg.d_model, cfg.vocab.len()),
            max_len: cfg.max_text_len,
        }
    }

    fn prefix_causal_mask(k: usize, l: usize) -> Tensor {
        let n = k + l;
        let mut m = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let allowed = if i < k {
                    j < k // prefix sees only the prefix
                } else {
                    j < k || j <= i // text sees the prefix and its own past
                };
                if !allowed {
                    m[i * n + j] = MASK_NEG;
                }
            }
        }
        Tensor::new(vec![n, n], m).expect("finite mask")
    }

    /// Next-token logits `[text_len, vocab]` for a DEC-led sequence whose
    /// per-position features are `text_feats`. `prefix`, when present, holds
    /// projected image tokens of the same width.
    pub fn decode(
        &self,
        prefix: Option<&Tensor>,
        text_feats: &Tensor,
        seq: &TokenSequence,
    ) -> Result<Tensor> {
        if !seq.starts_with_dec() {
            return Err(Error::Contract {
                what: "decoder target must start with the [DEC] token".into(),
            });
        }
        let (l, _) = text_feats.dims2("decode")?;
        if l != seq.len() || l > self.max_len {
            return Err(Error::Shape {
                op: "decode",
                detail: format!(
                    "text features have {l} rows for a {}-token sequence (max {})",
                    seq.len(),
                    self.max_len
                ),
            });
        }
        let k = match prefix {
            Some(p) => p.dims2("decode")?.0,
            None => 0,
        };
        let joint = match prefix {
            Some(p) if k > 0 => concat(0, &[p, text_feats])?,
            _ => text_feats.clone(),
        };
        let mut x = self.in_proj.forward(&joint)?;
        // positional embedding on text rows only
        let zeros_prefix = if k > 0 {
            let d = x.shape()[1];
            Some(Tensor::zeros(vec![k, d]))
        } else {
            None
        };
        let pos_text = narrow(&self.pos, 0, 0, l)?;
        let pos_full = match &zeros_prefix {
            Some(z) => concat(0, &[z, &pos_text])?,
            None => pos_text,
        };
        x = add(&x, &pos_full)?;
        let mask = Self::prefix_causal_mask(k, l);
        for b in &self.blocks {
            x = b.forward(&x, Some(&mask))?;
        }
        let text_rows = narrow(&x, 0, k, l)?;
        self.out.forward(&self.ln_f.forward(&text_rows)?)
    }

    pub fn collect(&self, out: &mut NamedParams, prefix: &str) {
        self.in_proj.collect(out, &format!("{prefix}.in_proj"));
        super::push_param(out, prefix, "pos", &self.pos);
        for (i, b) in self.blocks.iter().enumerate() {
            b.collect(out, &format!("{prefix}.blocks.{i}"));
        }
        self.ln_f.collect(out, &format!("{prefix}.ln_f"));
        self.out.collect(out, &format!("{prefix}.out"));
    }
}
