//! The assembled model: encoders, fusion, projection heads, matching head,
//! and decoder, plus the joint objective over an aligned batch.

use serde::{Deserialize, Serialize};

use crate::alignment::{
    itc_loss, itg_loss, itm_loss, sample_hard_negatives, similarity_matrix, LossReport,
    LossWeights, MatchingHead, ProjectionHead,
};
use crate::encoders::{
    EncoderConfig, ImageEncoder, NamedParams, ParamInit, StreamFusion, TextDecoder, TextEncoder,
    TokenSequence,
};
use crate::error::{Error, Result};
use crate::patchify::{DynRslInput, PatchifyConfig, StreamKind};
use crate::tensor::{add, scale, Tensor};

/// Everything needed to rebuild a model with identical shapes.
#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub patchify: PatchifyConfig,
    pub d_proj: usize,
    pub tau: f64,
    pub loss_weights: LossWeights,
    pub mask_ratio: f64,
    pub init_seed: u64,
}

impl ModelConfig {
    pub fn new(encoder: EncoderConfig, patchify: PatchifyConfig) -> ModelConfig {
        ModelConfig {
            encoder,
            patchify,
            d_proj: 32,
            tau: 0.07,
            loss_weights: LossWeights::default(),
            mask_ratio: 0.3,
            init_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.patchify.validate()?;
        if self.d_proj == 0 {
            return Err(Error::Config {
                what: "d_proj must be positive".into(),
            });
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config {
                what: format!("temperature must be > 0, got {}", self.tau),
            });
        }
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return Err(Error::Config {
                what: format!("mask_ratio must lie in [0, 1], got {}", self.mask_ratio),
            });
        }
        Ok(())
    }

    /// Shape-determining fields, serialized into checkpoints.
    pub fn snapshot(&self) -> ConfigSnapshot {
        ConfigSnapshot {
            d_model: self.encoder.d_model,
            n_layers: self.encoder.n_layers,
            n_heads: self.encoder.n_heads,
            d_ff: self.encoder.d_ff,
            max_text_len: self.encoder.max_text_len,
            max_stream_tokens: self.encoder.max_stream_tokens,
            vocab_size: self.encoder.vocab.len(),
            d_proj: self.d_proj,
            global_side: self.patchify.global_side,
            region_side: self.patchify.region_side,
            patch_px: self.patchify.patch_px,
            token_budget: self.patchify.token_budget,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfigSnapshot {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_text_len: usize,
    pub max_stream_tokens: usize,
    pub vocab_size: usize,
    pub d_proj: usize,
    pub global_side: usize,
    pub region_side: usize,
    pub patch_px: usize,
    pub token_budget: usize,
}

/// One aligned training sample: the image's view bundles (one-to-many
/// streams) and its caption.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub views: Vec<DynRslInput>,
    pub caption: TokenSequence,
}

pub struct DynRslModel {
    pub cfg: ModelConfig,
    pub image_encoder: ImageEncoder,
    pub fusion: StreamFusion,
    pub text_encoder: TextEncoder,
    pub decoder: TextDecoder,
    pub proj_image: ProjectionHead,
    pub proj_text: ProjectionHead,
    pub matching: MatchingHead,
}

impl DynRslModel {
    pub fn new(cfg: ModelConfig) -> Result<DynRslModel> {
        cfg.validate()?;
        let mut init = ParamInit::new(cfg.init_seed);
        let image_encoder = ImageEncoder::new(&mut init, &cfg.encoder, cfg.patchify.patch_dim());
        let fusion = StreamFusion::new(&mut init, &cfg.encoder);
        let text_encoder = TextEncoder::new(&mut init, &cfg.encoder);
        let decoder = TextDecoder::new(&mut init, &cfg.encoder, cfg.d_proj);
        let proj_image = ProjectionHead::new(&mut init, cfg.encoder.d_model, cfg.d_proj);
        let proj_text = ProjectionHead::new(&mut init, cfg.encoder.d_model, cfg.d_proj);
        let matching = MatchingHead::new(&mut init, cfg.d_proj);
        Ok(DynRslModel {
            cfg,
            image_encoder,
            fusion,
            text_encoder,
            decoder,
            proj_image,
            proj_text,
            matching,
        })
    }

    /// Every parameter in deterministic order, named for checkpoints.
    pub fn named_params(&self) -> NamedParams {
        let mut out = Vec::new();
        self.image_encoder.collect(&mut out, "vit");
        self.fusion.collect(&mut out, "fusion");
        self.text_encoder.collect(&mut out, "text");
        self.decoder.collect(&mut out, "decoder");
        self.proj_image.collect(&mut out, "proj_image");
        self.proj_text.collect(&mut out, "proj_text");
        self.matching.collect(&mut out, "itm");
        out
    }

    /// Fused features over every stream of every view of one sample.
    pub fn encode_views(&self, views: &[DynRslInput]) -> Result<Tensor> {
        if views.is_empty() {
            return Err(Error::Contract {
                what: "a sample needs at least one view".into(),
            });
        }
        let mut streams: Vec<(StreamKind, Tensor)> = Vec::new();
        for v in views {
            streams.extend(self.image_encoder.encode(v)?);
        }
        self.fusion.fuse(&streams)
    }

    /// Projected image tokens `h_I` for one sample.
    pub fn image_embedding(&self, views: &[DynRslInput]) -> Result<Tensor> {
        let fused = self.encode_views(views)?;
        self.proj_image.project(&fused)
    }

    /// Projected text vector `h_Tcls` (`[1, d_proj]`) for one caption.
    pub fn text_embedding(&self, caption: &TokenSequence) -> Result<Tensor> {
        let (_z, head) = self.text_encoder.encode_with_head(caption)?;
        self.proj_text.project(&head)
    }

    /// Patch-max similarity between one image and one caption.
    pub fn pair_similarity(&self, views: &[DynRslInput], caption: &TokenSequence) -> Result<f64> {
        let h_i = self.image_embedding(views)?;
        let h_t = self.text_embedding(caption)?;
        crate::alignment::image_text_similarity(&h_i, &h_t)?.item()
    }

    /// Joint objective over a batch: contrastive + matching (with hard
    /// negatives) + generation, combined under the configured weights.
    /// Components with zero weight are skipped entirely so no gradient
    /// reaches their parameters.
    pub fn total_loss(&self, batch: &[TrainSample], step_seed: u64) -> Result<(Tensor, LossReport)> {
        let n = batch.len();
        if n < 2 {
            return Err(Error::Contract {
                what: format!("contrastive objectives need a batch of >= 2, got {n}"),
            });
        }
        let w = self.cfg.loss_weights;
        let mut image_tokens = Vec::with_capacity(n);
        let mut text_vecs = Vec::with_capacity(n);
        for item in batch {
            image_tokens.push(self.image_embedding(&item.views)?);
            text_vecs.push(self.text_embedding(&item.caption)?);
        }
        let sims = similarity_matrix(&image_tokens, &text_vecs)?;

        let mut total: Option<Tensor> = None;
        let accumulate = |loss: &Tensor, weight: f64, total: &mut Option<Tensor>| -> Result<()> {
            let scaled = scale(loss, weight)?;
            *total = Some(match total.take() {
                Some(t) => add(&t, &scaled)?,
                None => scaled,
            });
            Ok(())
        };

        let itc_val = if w.itc != 0.0 {
            let itc = itc_loss(&sims, self.cfg.tau)?;
            accumulate(&itc, w.itc, &mut total)?;
            itc.item()?
        } else {
            0.0
        };

        let itm_val = if w.itm != 0.0 {
            let sim_rows: Vec<Vec<f64>> = {
                let data = sims.data();
                (0..n).map(|i| data[i * n..(i + 1) * n].to_vec()).collect()
            };
            let (text_neg, image_neg) = sample_hard_negatives(&sim_rows, self.cfg.tau, step_seed)?;
            let mut pairs = Vec::with_capacity(3 * n);
            for i in 0..n {
                pairs.push((&image_tokens[i], &text_vecs[i], 1.0));
                pairs.push((&image_tokens[i], &text_vecs[text_neg[i]], 0.0));
                pairs.push((&image_tokens[image_neg[i]], &text_vecs[i], 0.0));
            }
            let itm = itm_loss(&self.matching, &pairs)?;
            accumulate(&itm, w.itm, &mut total)?;
            itm.item()?
        } else {
            0.0
        };

        let itg_val = if w.itg != 0.0 {
            let mut acc: Option<Tensor> = None;
            for (i, item) in batch.iter().enumerate() {
                let item_seed = step_seed
                    .wrapping_mul(0x9e3779b97f4a7c15)
                    .wrapping_add(i as u64);
                let l = itg_loss(
                    &image_tokens[i],
                    &item.caption,
                    &self.text_encoder,
                    &self.proj_text,
                    &self.decoder,
                    self.cfg.mask_ratio,
                    item_seed,
                )?;
                acc = Some(match acc.take() {
                    Some(t) => add(&t, &l)?,
                    None => l,
                });
            }
            let itg = scale(&acc.expect("n >= 2"), 1.0 / n as f64)?;
            accumulate(&itg, w.itg, &mut total)?;
            itg.item()?
        } else {
            0.0
        };

        let total = match total {
            Some(t) => t,
            None => Tensor::scalar(0.0)?,
        };
        let report = LossReport::new(itc_val, itm_val, itg_val, w);
        Ok((total, report))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{tokenize, Vocab};
    use crate::geometry::RegionPlan;
    use crate::harness::scene::{caption_vocab, generate_scene, SceneConfig};
    use crate::image::ImageBuffer;
    use crate::patchify::build_dynrsl_input;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    pub(crate) fn tiny_model(vocab: Vocab, seed: u64) -> DynRslModel {
        let mut enc = EncoderConfig::new(vocab);
        enc.d_model = 16;
        enc.n_layers = 1;
        enc.n_heads = 4;
        enc.d_ff = 32;
        enc.max_text_len = 16;
        enc.max_stream_tokens = 32;
        let patchify = PatchifyConfig {
            global_side: 16,
            region_side: 8,
            patch_px: 8,
            token_budget: 64,
        };
        let mut cfg = ModelConfig::new(enc, patchify);
        cfg.d_proj = 8;
        cfg.init_seed = seed;
        DynRslModel::new(cfg).unwrap()
    }

    fn sample_from_seed(model: &DynRslModel, seed: u64) -> TrainSample {
        let scfg = SceneConfig {
            canvas: 32,
            radius_min: 4.0,
            radius_max: 10.0,
            ..SceneConfig::default()
        };
        let scene = generate_scene(seed, &scfg).unwrap();
        let input = build_dynrsl_input(&scene.image, &RegionPlan::empty(), &model.cfg.patchify).unwrap();
        let caption = tokenize(&model.cfg.encoder.vocab, &scene.caption, 16).unwrap();
        TrainSample {
            views: vec![input],
            caption,
        }
    }

    #[test]
    fn loss_report_combines_components() {
        let model = tiny_model(caption_vocab(), 1);
        let batch: Vec<TrainSample> = (0..3).map(|s| sample_from_seed(&model, s)).collect();
        let (total, report) = model.total_loss(&batch, 7).unwrap();
        assert!(report.is_finite());
        assert!(report.itc >= 0.0 && report.itm >= 0.0 && report.itg >= 0.0);
        let expect = report.weights.itc * report.itc
            + report.weights.itm * report.itm
            + report.weights.itg * report.itg;
        assert!((report.total - expect).abs() < 1e-12);
        assert!((total.item().unwrap() - report.total).abs() < 1e-12);
    }

    #[test]
    fn zero_weight_components_are_skipped() {
        let mut model = tiny_model(caption_vocab(), 2);
        model.cfg.loss_weights = LossWeights {
            itc: 1.0,
            itm: 0.0,
            itg: 0.0,
        };
        let batch: Vec<TrainSample> = (0..2).map(|s| sample_from_seed(&model, 10 + s)).collect();
        let (total, report) = model.total_loss(&batch, 3).unwrap();
        assert_eq!(report.itm, 0.0);
        assert_eq!(report.itg, 0.0);
        assert!((total.item().unwrap() - report.itc).abs() < 1e-12);
        total.backward().unwrap();
        // matching head must receive no gradient at weight 0
        let mut itm_params = Vec::new();
        model.matching.collect(&mut itm_params, "itm");
        for (name, p) in itm_params {
            assert!(p.grad().is_none(), "{name} touched by a zero-weight loss");
        }
    }

    #[test]
    fn batches_of_one_are_rejected() {
        let model = tiny_model(caption_vocab(), 3);
        let batch = vec![sample_from_seed(&model, 5)];
        assert!(matches!(model.total_loss(&batch, 0), Err(Error::Contract { .. })));
    }

    #[test]
    fn multi_view_streams_are_all_fused() {
        let model = tiny_model(caption_vocab(), 4);
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let data: Vec<f64> = (0..32 * 32 * 3).map(|_| rng.gen_range(0.0..1.0)).collect();
        let img = ImageBuffer::new(32, 32, data).unwrap();
        let one = build_dynrsl_input(&img, &RegionPlan::empty(), &model.cfg.patchify).unwrap();
        let two_views = vec![one.clone(), one.clone()];
        let fused_one = model.encode_views(&[one]).unwrap();
        let fused_two = model.encode_views(&two_views).unwrap();
        assert_eq!(fused_two.shape()[0], 2 * fused_one.shape()[0]);
    }

    #[test]
    fn total_gradient_is_sum_of_component_gradients() {
        let model = tiny_model(caption_vocab(), 5);
        let batch: Vec<TrainSample> = (0..2).map(|s| sample_from_seed(&model, 20 + s)).collect();
        let params = model.named_params();
        let probe: Vec<(String, Tensor)> = params
            .iter()
            .filter(|(name, p)| p.requires_grad() && (name.starts_with("proj_") || name.starts_with("fusion")))
            .cloned()
            .collect();
        assert!(!probe.is_empty());

        // gradient of the weighted total
        for (_, p) in &probe {
            p.zero_grad();
        }
        let (total, _) = model.total_loss(&batch, 11).unwrap();
        total.backward().unwrap();
        let total_grads: Vec<Vec<f64>> = probe
            .iter()
            .map(|(_, p)| p.grad().unwrap_or_else(|| vec![0.0; p.len()]))
            .collect();

        // component gradients accumulated one objective at a time
        let saved = model.cfg.loss_weights;
        let mut split_model = model;
        let mut acc: Vec<Vec<f64>> = probe.iter().map(|(_, p)| vec![0.0; p.len()]).collect();
        for weights in [
            LossWeights { itc: saved.itc, itm: 0.0, itg: 0.0 },
            LossWeights { itc: 0.0, itm: saved.itm, itg: 0.0 },
            LossWeights { itc: 0.0, itm: 0.0, itg: saved.itg },
        ] {
            split_model.cfg.loss_weights = weights;
            for (_, p) in &probe {
                p.zero_grad();
            }
            let (l, _) = split_model.total_loss(&batch, 11).unwrap();
            l.backward().unwrap();
            for ((_, p), a) in probe.iter().zip(acc.iter_mut()) {
                if let Some(g) = p.grad() {
                    for (x, y) in a.iter_mut().zip(g) {
                        *x += y;
                    }
                }
            }
        }
        for ((name, _), (t, s)) in probe.iter().zip(total_grads.iter().zip(&acc)) {
            for (a, b) in t.iter().zip(s) {
                assert!(
                    (a - b).abs() < 1e-9,
                    "{name}: total gradient {a} vs component sum {b}"
                );
            }
        }
    }
}
