//! Projection heads into the shared space and the three alignment
//! objectives: symmetric contrastive loss over patch-max similarities,
//! matching with hard negatives from averaged per-patch logits, and
//! decoder cross-entropy for image-guided generation.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::encoders::{mask_text, NamedParams, ParamInit, TextDecoder, TextEncoder, TokenKind, TokenSequence};
use crate::error::{Error, Result};
use crate::tensor::{
    add, bce_with_logits, concat, cosine_rows, cross_entropy_rows, embedding, matmul, mean,
    relu, repeat_rows, reshape, row_max, scale, transpose, Tensor,
};

/// Two affine layers with a ReLU between, mapping encoder features into the
/// shared alignment space. Image and text heads are separate instances and
/// share no parameters.
pub struct ProjectionHead {
    l1_w: Tensor,
    l1_b: Tensor,
    l2_w: Tensor,
    l2_b: Tensor,
}

impl ProjectionHead {
    pub fn new(init: &mut ParamInit, d_model: usize, d_proj: usize) -> ProjectionHead {
        ProjectionHead {
            l1_w: init.weight(vec![d_model, d_proj]),
            l1_b: init.zeros(vec![d_proj]),
            l2_w: init.weight(vec![d_proj, d_proj]),
            l2_b: init.zeros(vec![d_proj]),
        }
    }

    /// Apply the head to every row of `[tokens, d_model]`.
    pub fn project(&self, z: &Tensor) -> Result<Tensor> {
        let h = relu(&crate::tensor::add_row(&matmul(z, &self.l1_w)?, &self.l1_b)?)?;
        crate::tensor::add_row(&matmul(&h, &self.l2_w)?, &self.l2_b)
    }

    pub fn collect(&self, out: &mut NamedParams, prefix: &str) {
        out.push((format!("{prefix}.l1.w"), self.l1_w.clone()));
        out.push((format!("{prefix}.l1.b"), self.l1_b.clone()));
        out.push((format!("{prefix}.l2.w"), self.l2_w.clone()));
        out.push((format!("{prefix}.l2.b"), self.l2_b.clone()));
    }
}

/// Patch-max similarity: the highest cosine between any projected image
/// token and the projected text vector. Zero-norm tokens are skipped; if
/// every token has zero norm the pair is degenerate.
pub fn image_text_similarity(h_i: &Tensor, h_t: &Tensor) -> Result<Tensor> {
    let (t, d) = h_i.dims2("image_text_similarity")?;
    if t == 0 {
        return Err(Error::Contract {
            what: "image_text_similarity needs at least one token".into(),
        });
    }
    let valid: Vec<usize> = {
        let data = h_i.data();
        (0..t)
            .filter(|&r| {
                let norm2: f64 = data[r * d..(r + 1) * d].iter().map(|v| v * v).sum();
                norm2.sqrt() >= 1e-12
            })
            .collect()
    };
    if valid.is_empty() {
        return Err(Error::Degenerate {
            what: "all image tokens have zero norm".into(),
        });
    }
    let tokens = if valid.len() == t {
        h_i.clone()
    } else {
        embedding(h_i, &valid)?
    };
    let sims = cosine_rows(&tokens, h_t)?;
    let (m, _arg) = row_max(&reshape(&sims, vec![1, valid.len()])?)?;
    reshape(&m, vec![1])
}

/// The `[N, N]` patch-max similarity matrix: row i is image i against every
/// text. Entry `(i, j)` stays a graph node so gradients reach both heads.
pub fn similarity_matrix(image_tokens: &[Tensor], text_vecs: &[Tensor]) -> Result<Tensor> {
    let n = image_tokens.len();
    if n != text_vecs.len() || n == 0 {
        return Err(Error::Contract {
            what: format!("{n} images vs {} texts", text_vecs.len()),
        });
    }
    let mut rows = Vec::with_capacity(n);
    for hi in image_tokens {
        let mut entries = Vec::with_capacity(n);
        for ht in text_vecs {
            entries.push(image_text_similarity(hi, ht)?);
        }
        let refs: Vec<&Tensor> = entries.iter().collect();
        rows.push(reshape(&concat(0, &refs)?, vec![1, n])?);
    }
    let refs: Vec<&Tensor> = rows.iter().collect();
    concat(0, &refs)
}

/// Symmetric contrastive loss over a similarity matrix: the average of the
/// image-to-text and text-to-image directions, each a mean cross-entropy of
/// the temperature-scaled rows against the diagonal.
pub fn itc_loss(similarities: &Tensor, temperature: f64) -> Result<Tensor> {
    let (n, m) = similarities.dims2("itc_loss")?;
    if n != m || n < 2 {
        return Err(Error::Contract {
            what: format!("itc_loss needs a square matrix with N >= 2, got {n}x{m}"),
        });
    }
    if !(temperature > 0.0) {
        return Err(Error::Parameter {
            what: format!("temperature must be > 0, got {temperature}"),
        });
    }
    let targets: Vec<usize> = (0..n).collect();
    let weights = vec![1.0; n];
    let logits_i2t = scale(similarities, 1.0 / temperature)?;
    let i2t = cross_entropy_rows(&logits_i2t, &targets, &weights)?;
    let logits_t2i = scale(&transpose(similarities)?, 1.0 / temperature)?;
    let t2i = cross_entropy_rows(&logits_t2i, &targets, &weights)?;
    scale(&add(&i2t, &t2i)?, 0.5)
}

/// Hard negatives sampled per item: for each image a mismatched text, for
/// each text a mismatched image, drawn with probability proportional to the
/// temperature-scaled softmax over off-diagonal similarities. Deterministic
/// under the seed.
pub fn sample_hard_negatives(
    similarities: &[Vec<f64>],
    temperature: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let n = similarities.len();
    if n < 2 || similarities.iter().any(|r| r.len() != n) {
        return Err(Error::Contract {
            what: format!("hard-negative sampling needs a square matrix with N >= 2, got {n} rows"),
        });
    }
    if !(temperature > 0.0) {
        return Err(Error::Parameter {
            what: format!("temperature must be > 0, got {temperature}"),
        });
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut draw = |scores: Vec<(usize, f64)>| -> usize {
        let max = scores.iter().map(|(_, s)| *s).fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = scores.iter().map(|(_, s)| ((s - max) / temperature).exp()).collect();
        let total: f64 = weights.iter().sum();
        let mut u: f64 = rng.gen::<f64>() * total;
        for (k, w) in weights.iter().enumerate() {
            u -= w;
            if u <= 0.0 {
                return scores[k].0;
            }
        }
        scores.last().expect("non-empty").0
    };
    let mut text_neg = Vec::with_capacity(n);
    let mut image_neg = Vec::with_capacity(n);
    for i in 0..n {
        // text negative for image i: over row i
        let row: Vec<(usize, f64)> = (0..n).filter(|&j| j != i).map(|j| (j, similarities[i][j])).collect();
        text_neg.push(draw(row));
        // image negative for text i: over column i
        let col: Vec<(usize, f64)> = (0..n).filter(|&j| j != i).map(|j| (j, similarities[j][i])).collect();
        image_neg.push(draw(col));
    }
    Ok((text_neg, image_neg))
}

/// Trainable affine classifier over (image token ⊕ text vector)
/// concatenations; per-pair logits are averaged over tokens into one
/// matching score.
pub struct MatchingHead {
    w: Tensor,
    b: Tensor,
}

impl MatchingHead {
    pub fn new(init: &mut ParamInit, d_proj: usize) -> MatchingHead {
        MatchingHead {
            w: init.weight(vec![2 * d_proj, 1]),
            b: init.zeros(vec![1]),
        }
    }

    /// Averaged matching logit for one (image tokens, text vector) pair.
    pub fn score(&self, h_i: &Tensor, h_t: &Tensor) -> Result<Tensor> {
        let (t, _d) = h_i.dims2("matching_score")?;
        let text_rows = repeat_rows(h_t, t)?;
        let joined = concat(1, &[h_i, &text_rows])?;
        let logits = crate::tensor::add_row(&matmul(&joined, &self.w)?, &self.b)?;
        mean(&logits)
    }

    pub fn collect(&self, out: &mut NamedParams, prefix: &str) {
        out.push((format!("{prefix}.w"), self.w.clone()));
        out.push((format!("{prefix}.b"), self.b.clone()));
    }
}

/// Matched/mismatched classification loss. Each entry pairs projected image
/// tokens with a projected text vector and a binary label; the loss is the
/// mean binary cross-entropy over all pairs.
pub fn itm_loss(head: &MatchingHead, pairs: &[(&Tensor, &Tensor, f64)]) -> Result<Tensor> {
    if pairs.is_empty() {
        return Err(Error::Contract {
            what: "itm_loss needs at least one pair".into(),
        });
    }
    let mut scores = Vec::with_capacity(pairs.len());
    let mut labels = Vec::with_capacity(pairs.len());
    for (h_i, h_t, label) in pairs {
        scores.push(head.score(h_i, h_t)?);
        labels.push(*label);
    }
    let refs: Vec<&Tensor> = scores.iter().collect();
    bce_with_logits(&concat(0, &refs)?, &labels)
}

/// Image-guided generation loss: the caption is rewritten to start with
/// [DEC], masked, encoded, projected through the text head, and decoded
/// with the projected image tokens as prefix. Cross-entropy of next-token
/// prediction, mean-reduced over non-PAD targets.
#[allow(clippy::too_many_arguments)]
pub fn itg_loss(
    h_i: &Tensor,
    caption: &TokenSequence,
    text_encoder: &TextEncoder,
    proj_text: &ProjectionHead,
    decoder: &TextDecoder,
    mask_ratio: f64,
    seed: u64,
) -> Result<Tensor> {
    let dec_seq = caption.with_leading_dec()?;
    if dec_seq.len() < 2 {
        return Err(Error::Contract {
            what: "itg_loss needs a caption of at least 2 tokens".into(),
        });
    }
    let (masked, _positions) = mask_text(&dec_seq, mask_ratio, seed)?;
    let z_t = text_encoder.encode(&masked)?;
    let h_t = proj_text.project(&z_t)?;
    let logits = decoder.decode(Some(h_i), &h_t, &masked)?;
    let l = dec_seq.len();
    // position t predicts the original token at t+1; PAD targets are masked out
    let pred_rows = crate::tensor::narrow(&logits, 0, 0, l - 1)?;
    let targets: Vec<usize> = dec_seq.ids[1..].to_vec();
    let weights: Vec<f64> = dec_seq.kinds[1..]
        .iter()
        .map(|&k| if k == TokenKind::Pad { 0.0 } else { 1.0 })
        .collect();
    cross_entropy_rows(&pred_rows, &targets, &weights)
}

/// Per-objective scalars and their weighted combination.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub itc: f64,
    pub itm: f64,
    pub itg: f64,
    pub total: f64,
    pub weights: LossWeights,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub itc: f64,
    pub itm: f64,
    pub itg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            itc: 1.0,
            itm: 1.0,
            itg: 1.0,
        }
    }
}

impl LossReport {
    pub fn new(itc: f64, itm: f64, itg: f64, weights: LossWeights) -> LossReport {
        LossReport {
            itc,
            itm,
            itg,
            total: weights.itc * itc + weights.itm * itm + weights.itg * itg,
            weights,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.itc.is_finite() && self.itm.is_finite() && self.itg.is_finite() && self.total.is_finite()
    }
}
