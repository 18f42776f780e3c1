//! Cross-modal retrieval metrics over image-text pairs.

use super::model::{DynRslModel, TrainSample};
use crate::alignment::image_text_similarity;
use crate::error::{Error, Result};

/// Recall and rank statistics averaged over the image-to-text and
/// text-to-image directions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetrievalMetrics {
    pub recall_at_1: f64,
    pub recall_at_5: f64,
    pub mean_rank: f64,
    pub pairs: usize,
}

/// Rank (1-based) of the true index when scores sort descending; ties break
/// toward lower indices for determinism.
fn rank_of(scores: &[f64], truth: usize) -> usize {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    order.iter().position(|&i| i == truth).expect("truth index present") + 1
}

fn direction_stats(ranks: &[usize]) -> (f64, f64, f64) {
    let m = ranks.len() as f64;
    let r1 = ranks.iter().filter(|&&r| r <= 1).count() as f64 / m;
    let r5 = ranks.iter().filter(|&&r| r <= 5).count() as f64 / m;
    let mean = ranks.iter().sum::<usize>() as f64 / m;
    (r1, r5, mean)
}

/// Rank every image against all captions (and vice versa) by patch-max
/// similarity; diagonal pairs are the ground truth.
pub fn evaluate_retrieval(model: &DynRslModel, pairs: &[TrainSample]) -> Result<RetrievalMetrics> {
    let m = pairs.len();
    if m < 2 {
        return Err(Error::Contract {
            what: format!("retrieval evaluation needs at least 2 pairs, got {m}"),
        });
    }
    let mut image_tokens = Vec::with_capacity(m);
    let mut text_vecs = Vec::with_capacity(m);
    for p in pairs {
        image_tokens.push(model.image_embedding(&p.views)?);
        text_vecs.push(model.text_embedding(&p.caption)?);
    }
    let mut scores = vec![vec![0.0f64; m]; m];
    for i in 0..m {
        for j in 0..m {
            scores[i][j] = image_text_similarity(&image_tokens[i], &text_vecs[j])?.item()?;
        }
    }
    let i2t: Vec<usize> = (0..m).map(|i| rank_of(&scores[i], i)).collect();
    let t2i: Vec<usize> = (0..m)
        .map(|j| {
            let col: Vec<f64> = (0..m).map(|i| scores[i][j]).collect();
            rank_of(&col, j)
        })
        .collect();
    let (a1, a5, am) = direction_stats(&i2t);
    let (b1, b5, bm) = direction_stats(&t2i);
    Ok(RetrievalMetrics {
        recall_at_1: 0.5 * (a1 + b1),
        recall_at_5: 0.5 * (a5 + b5),
        mean_rank: 0.5 * (am + bm),
        pairs: m,
    })
}

/// Metrics from a precomputed score matrix; used by tests that need a
/// similarity oracle independent of the model.
pub fn retrieval_from_scores(scores: &[Vec<f64>]) -> Result<RetrievalMetrics> {
    let m = scores.len();
    if m < 2 || scores.iter().any(|r| r.len() != m) {
        return Err(Error::Contract {
            what: "score matrix must be square with M >= 2".into(),
        });
    }
    let i2t: Vec<usize> = (0..m).map(|i| rank_of(&scores[i], i)).collect();
    let t2i: Vec<usize> = (0..m)
        .map(|j| {
            let col: Vec<f64> = (0..m).map(|i| scores[i][j]).collect();
            rank_of(&col, j)
        })
        .collect();
    let (a1, a5, am) = direction_stats(&i2t);
    let (b1, b5, bm) = direction_stats(&t2i);
    Ok(RetrievalMetrics {
        recall_at_1: 0.5 * (a1 + b1),
        recall_at_5: 0.5 * (a5 + b5),
        mean_rank: 0.5 * (am + bm),
        pairs: m,
    })
}
