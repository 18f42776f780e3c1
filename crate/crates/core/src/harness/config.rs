//! Run configuration: one flat set of typed keys, loadable from a
//! line-oriented `key = value` file and overridable by CLI flags.

use std::path::Path;

use crate::alignment::LossWeights;
use crate::encoders::{EncoderConfig, Vocab};
use crate::error::{Error, Result};
use crate::harness::model::ModelConfig;
use crate::harness::scene::SceneConfig;
use crate::harness::train::TrainConfig;
use crate::patchify::PatchifyConfig;

/// Every tunable of the pipeline. The documented key list mirrors the field
/// names one-to-one.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // model
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub d_proj: usize,
    pub max_text_len: usize,
    pub frozen_vit: bool,
    // patchification
    pub global_side: usize,
    pub region_side: usize,
    pub patch_px: usize,
    pub token_budget: usize,
    // region planning
    pub max_subset_size: usize,
    pub max_regions: usize,
    pub class_filter: Vec<String>,
    pub use_regions: bool,
    // objectives
    pub tau: f64,
    pub w_itc: f64,
    pub w_itm: f64,
    pub w_itg: f64,
    pub mask_ratio: f64,
    // optimization
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub n_view: usize,
    // scene generation
    pub canvas: usize,
    pub min_entities: usize,
    pub max_entities: usize,
    pub radius_min: f64,
    pub radius_max: f64,
    pub small_entity_prob: f64,
    pub clutter: usize,
    pub count: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 128,
            d_proj: 32,
            max_text_len: 32,
            frozen_vit: true,
            global_side: 224,
            region_side: 96,
            patch_px: 16,
            token_budget: 1024,
            max_subset_size: 3,
            max_regions: 32,
            class_filter: vec!["vehicle".into(), "pedestrian".into()],
            use_regions: true,
            tau: 0.07,
            w_itc: 1.0,
            w_itm: 1.0,
            w_itg: 1.0,
            mask_ratio: 0.3,
            learning_rate: 1e-4,
            weight_decay: 0.0,
            steps: 200,
            batch_size: 8,
            seed: 0,
            n_view: 1,
            canvas: 256,
            min_entities: 1,
            max_entities: 2,
            radius_min: 10.0,
            radius_max: 28.0,
            small_entity_prob: 0.5,
            clutter: 0,
            count: 16,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse::<T>().map_err(|_| Error::Config {
        what: format!("cannot parse {key} = {value:?}"),
    })
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(Error::Config {
            what: format!("cannot parse {key} = {other:?} as a boolean"),
        }),
    }
}

impl RunConfig {
    /// Assign one key. Unknown keys are configuration errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "d_model" => self.d_model = parse(key, value)?,
            "n_layers" => self.n_layers = parse(key, value)?,
            "n_heads" => self.n_heads = parse(key, value)?,
            "d_ff" => self.d_ff = parse(key, value)?,
            "d_proj" => self.d_proj = parse(key, value)?,
            "max_text_len" => self.max_text_len = parse(key, value)?,
            "frozen_vit" => self.frozen_vit = parse_bool(key, value)?,
            "global_side" => self.global_side = parse(key, value)?,
            "region_side" => self.region_side = parse(key, value)?,
            "patch_px" => self.patch_px = parse(key, value)?,
            "token_budget" => self.token_budget = parse(key, value)?,
            "max_subset_size" => self.max_subset_size = parse(key, value)?,
            "max_regions" => self.max_regions = parse(key, value)?,
            "class_filter" => {
                self.class_filter = value
                    .split(',')
                    .map(|s| s.trim().to_string())
                    .filter(|s| !s.is_empty())
                    .collect();
            }
            "use_regions" => self.use_regions = parse_bool(key, value)?,
            "tau" => self.tau = parse(key, value)?,
            "w_itc" => self.w_itc = parse(key, value)?,
            "w_itm" => self.w_itm = parse(key, value)?,
            "w_itg" => self.w_itg = parse(key, value)?,
            "mask_ratio" => self.mask_ratio = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "steps" => self.steps = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "n_view" => self.n_view = parse(key, value)?,
            "canvas" => self.canvas = parse(key, value)?,
            "min_entities" => self.min_entities = parse(key, value)?,
            "max_entities" => self.max_entities = parse(key, value)?,
            "radius_min" => self.radius_min = parse(key, value)?,
            "radius_max" => self.radius_max = parse(key, value)?,
            "small_entity_prob" => self.small_entity_prob = parse(key, value)?,
            "clutter" => self.clutter = parse(key, value)?,
            "count" => self.count = parse(key, value)?,
            other => {
                return Err(Error::Config {
                    what: format!("unknown configuration key {other:?}"),
                })
            }
        }
        Ok(())
    }

    /// Load `key = value` lines; `#` starts a comment, blank lines are
    /// skipped.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Parse {
                    line: idx + 1,
                    detail: format!("expected key = value, got {line:?}"),
                });
            };
            self.set(key.trim(), value.trim()).map_err(|e| Error::Parse {
                line: idx + 1,
                detail: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn model_config(&self, vocab: Vocab) -> ModelConfig {
        let mut enc = EncoderConfig::new(vocab);
        enc.d_model = self.d_model;
        enc.n_layers = self.n_layers;
        enc.n_heads = self.n_heads;
        enc.d_ff = self.d_ff;
        enc.max_text_len = self.max_text_len;
        enc.frozen_vit = self.frozen_vit;
        let g = self.global_side / self.patch_px.max(1);
        enc.max_stream_tokens = (g * g).max(1);
        let mut cfg = ModelConfig::new(enc, self.patchify_config());
        cfg.d_proj = self.d_proj;
        cfg.tau = self.tau;
        cfg.loss_weights = LossWeights {
            itc: self.w_itc,
            itm: self.w_itm,
            itg: self.w_itg,
        };
        cfg.mask_ratio = self.mask_ratio;
        cfg.init_seed = self.seed;
        cfg
    }

    pub fn patchify_config(&self) -> PatchifyConfig {
        PatchifyConfig {
            global_side: self.global_side,
            region_side: self.region_side,
            patch_px: self.patch_px,
            token_budget: self.token_budget,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            steps: self.steps,
            batch_size: self.batch_size,
            seed: self.seed,
        }
    }

    pub fn scene_config(&self) -> SceneConfig {
        SceneConfig {
            canvas: self.canvas,
            min_entities: self.min_entities,
            max_entities: self.max_entities,
            radius_min: self.radius_min,
            radius_max: self.radius_max,
            small_entity_prob: self.small_entity_prob,
            clutter: self.clutter,
        }
    }
}
