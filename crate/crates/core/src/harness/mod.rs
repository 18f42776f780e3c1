//! Synthetic data, model assembly, training, evaluation, checkpointing,
//! and the run configuration.

pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod model;
pub mod scene;
pub mod train;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint};
pub use config::RunConfig;
pub use eval::{evaluate_retrieval, RetrievalMetrics};
pub use model::{ConfigSnapshot, DynRslModel, ModelConfig, TrainSample};
pub use scene::{caption_vocab, generate_distinct_corpus, generate_scene, Scene, SceneConfig, SceneSpec};
pub use train::{cosine_lr, train, AdamW, TrainConfig};

use crate::encoders::tokenize;
use crate::error::Result;
use crate::geometry::{clamp_to_image, enumerate_combinations, BBox, Detection, RegionPlan};
use crate::image::ImageBuffer;
use crate::patchify::build_dynrsl_input;

/// Region plan for one image's detections under the run configuration's
/// caps and class filter.
pub fn plan_for_detections(
    detections: &[Detection],
    width: usize,
    height: usize,
    cfg: &RunConfig,
) -> Result<RegionPlan> {
    if !cfg.use_regions {
        return Ok(RegionPlan::empty());
    }
    let mut rois = Vec::new();
    for d in detections {
        if !cfg.class_filter.is_empty() && !cfg.class_filter.iter().any(|c| c == &d.class_label) {
            continue;
        }
        rois.push(clamp_to_image(&d.bbox, width, height)?);
    }
    enumerate_combinations(&rois, cfg.max_subset_size, cfg.max_regions)
}

/// Deterministic per-view transform. View 0 is the original image; further
/// views cycle through the mirror symmetries.
pub fn view_transform(img: &ImageBuffer, boxes: &[BBox], view: usize) -> (ImageBuffer, Vec<BBox>) {
    let (w, h) = (img.width as f64, img.height as f64);
    match view % 4 {
        1 => (
            img.mirror_horizontal(),
            boxes
                .iter()
                .map(|b| BBox::new(w - b.x2, b.y1, w - b.x1, b.y2).expect("mirrored box"))
                .collect(),
        ),
        2 => (
            img.mirror_vertical(),
            boxes
                .iter()
                .map(|b| BBox::new(b.x1, h - b.y2, b.x2, h - b.y1).expect("mirrored box"))
                .collect(),
        ),
        3 => {
            let (img2, boxes2) = view_transform(img, boxes, 1);
            view_transform(&img2, &boxes2, 2)
        }
        _ => (img.clone(), boxes.to_vec()),
    }
}

/// Build one training sample from a generated scene: plan regions, build
/// the per-view token bundles, and tokenize the caption.
pub fn sample_from_scene(scene: &Scene, cfg: &RunConfig, vocab: &crate::encoders::Vocab) -> Result<TrainSample> {
    let pcfg = cfg.patchify_config();
    let (w, h) = (scene.image.width, scene.image.height);
    let roi_boxes: Vec<BBox> = scene.detections.iter().map(|d| d.bbox).collect();
    let mut views = Vec::with_capacity(cfg.n_view.max(1));
    for v in 0..cfg.n_view.max(1) {
        let (img, boxes) = view_transform(&scene.image, &roi_boxes, v);
        let dets: Vec<Detection> = scene
            .detections
            .iter()
            .zip(&boxes)
            .map(|(d, b)| Detection {
                bbox: *b,
                ..d.clone()
            })
            .collect();
        let plan = plan_for_detections(&dets, w, h, cfg)?;
        views.push(build_dynrsl_input(&img, &plan, &pcfg)?);
    }
    let caption = tokenize(vocab, &scene.caption, cfg.max_text_len)?;
    Ok(TrainSample {
        views,
        caption,
    })
}

/// Generate a corpus of scenes with distinct captions and assemble the
/// training samples.
pub fn build_dataset(cfg: &RunConfig) -> Result<(Vec<Scene>, Vec<TrainSample>)> {
    let vocab = caption_vocab();
    let scenes = generate_distinct_corpus(cfg.seed, cfg.count, &cfg.scene_config())?;
    let samples = scenes
        .iter()
        .map(|s| sample_from_scene(s, cfg, &vocab))
        .collect::<Result<Vec<_>>>()?;
    Ok((scenes, samples))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> RunConfig {
        RunConfig {
            canvas: 64,
            global_side: 32,
            region_side: 16,
            patch_px: 8,
            token_budget: 128,
            radius_min: 6.0,
            radius_max: 14.0,
            count: 4,
            ..RunConfig::default()
        }
    }

    #[test]
    fn dataset_building_is_deterministic() {
        let cfg = small_cfg();
        let (_, a) = build_dataset(&cfg).unwrap();
        let (_, b) = build_dataset(&cfg).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.caption, y.caption);
            assert_eq!(
                x.views[0].global_stream.tokens.to_vec(),
                y.views[0].global_stream.tokens.to_vec()
            );
        }
    }

    #[test]
    fn region_streams_disappear_when_disabled() {
        let mut cfg = small_cfg();
        let (_, with_regions) = build_dataset(&cfg).unwrap();
        cfg.use_regions = false;
        let (_, without) = build_dataset(&cfg).unwrap();
        assert!(with_regions.iter().any(|s| !s.views[0].region_streams.is_empty()));
        assert!(without.iter().all(|s| s.views[0].region_streams.is_empty()));
    }

    #[test]
    fn extra_views_are_mirrors_with_matching_token_counts() {
        let mut cfg = small_cfg();
        cfg.n_view = 2;
        let (_, samples) = build_dataset(&cfg).unwrap();
        for s in &samples {
            assert_eq!(s.views.len(), 2);
            assert_eq!(s.views[0].total_tokens, s.views[1].total_tokens);
        }
    }

    #[test]
    fn class_filter_drops_unlisted_detections() {
        let cfg = small_cfg();
        let scene = generate_scene(11, &cfg.scene_config()).unwrap();
        let mut filtered = cfg.clone();
        filtered.class_filter = vec!["nothing".into()];
        let plan = plan_for_detections(&scene.detections, scene.image.width, scene.image.height, &filtered).unwrap();
        assert!(plan.rois.is_empty());
    }
}
