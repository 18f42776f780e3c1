//! Acceptance suite: every criterion below prints one PASS/FAIL line
//! (visible with `--nocapture`) and asserts its stated tolerance.

use std::time::Instant;

use dynrsl_core::alignment::itc_loss;
use dynrsl_core::encoders::EncoderConfig;
use dynrsl_core::geometry::{enumerate_combinations, merge_boxes, BBox};
use dynrsl_core::harness::scene::regenerate_scene;
use dynrsl_core::harness::{
    build_dataset, caption_vocab, evaluate_retrieval, sample_from_scene, train, DynRslModel,
    ModelConfig, RunConfig, TrainConfig, TrainSample,
};
use dynrsl_core::image::ImageBuffer;
use dynrsl_core::patchify::{build_dynrsl_input, PatchifyConfig};
use dynrsl_core::tensor::{
    cosine_rows, finite_diff_check, softmax_rows, FiniteDiffConfig, Tensor,
};
use dynrsl_core::Error;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

fn report(criterion: &str, pass: bool, detail: &str) {
    println!(
        "criterion {criterion}: {} - {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {criterion} failed: {detail}");
}

#[test]
fn criterion_01_geometry_oracle() {
    let start = Instant::now();
    let mut rng = ChaCha20Rng::seed_from_u64(0xacc1);
    for _ in 0..10_000 {
        let n = rng.gen_range(1..=10);
        let boxes: Vec<BBox> = (0..n)
            .map(|_| {
                let x1: f64 = rng.gen_range(-100.0..100.0);
                let y1: f64 = rng.gen_range(-100.0..100.0);
                BBox::new(x1, y1, x1 + rng.gen_range(0.0..40.0), y1 + rng.gen_range(0.0..40.0))
                    .unwrap()
            })
            .collect();
        let merged = merge_boxes(&boxes).unwrap();
        let x1 = boxes.iter().map(|b| b.x1).fold(f64::INFINITY, f64::min);
        let y1 = boxes.iter().map(|b| b.y1).fold(f64::INFINITY, f64::min);
        let x2 = boxes.iter().map(|b| b.x2).fold(f64::NEG_INFINITY, f64::max);
        let y2 = boxes.iter().map(|b| b.y2).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!((merged.x1, merged.y1, merged.x2, merged.y2), (x1, y1, x2, y2));
    }
    let mut counts_ok = true;
    for n in 2..=12usize {
        let rois: Vec<BBox> = (0..n)
            .map(|i| {
                let o = i as f64 * 7.0;
                BBox::new(o, o, o + rng.gen_range(1.0..5.0), o + rng.gen_range(1.0..5.0)).unwrap()
            })
            .collect();
        let plan = enumerate_combinations(&rois, n, usize::MAX).unwrap();
        counts_ok &= plan.caps_applied.subsets_enumerated == 2usize.pow(n as u32) - n - 1;
    }
    let secs = start.elapsed().as_secs_f64();
    report(
        "1",
        counts_ok && secs < 5.0,
        &format!("10,000 merge sets exact, counts 2^n-n-1 for n=2..12, {secs:.2}s"),
    );
}

#[test]
fn criterion_02_infonce_oracle() {
    let brute = |s: &[Vec<f64>], tau: f64| -> f64 {
        let n = s.len();
        let mut i2t = 0.0;
        let mut t2i = 0.0;
        for i in 0..n {
            let num = (s[i][i] / tau).exp();
            let drow: f64 = (0..n).map(|j| (s[i][j] / tau).exp()).sum();
            let dcol: f64 = (0..n).map(|j| (s[j][i] / tau).exp()).sum();
            i2t += -(num / drow).ln();
            t2i += -(num / dcol).ln();
        }
        0.5 * (i2t + t2i) / n as f64
    };
    let mut rng = ChaCha20Rng::seed_from_u64(0xacc2);
    let mut max_gap: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.gen_range(2..=8);
        let tau = rng.gen_range(0.05..1.5);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let s = Tensor::new(vec![n, n], rows.iter().flatten().copied().collect()).unwrap();
        let got = itc_loss(&s, tau).unwrap().item().unwrap();
        max_gap = max_gap.max((got - brute(&rows, tau)).abs());
    }
    let identity = {
        let s = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        itc_loss(&s, 1.0).unwrap().item().unwrap()
    };
    let identity_gap = (identity - (1.0 + (-1.0f64).exp()).ln()).abs();
    let mut const_gap: f64 = 0.0;
    for n in 2..=8usize {
        let s = Tensor::new(vec![n, n], vec![0.37; n * n]).unwrap();
        let got = itc_loss(&s, 0.07).unwrap().item().unwrap();
        const_gap = const_gap.max((got - (n as f64).ln()).abs());
    }
    report(
        "2",
        max_gap <= 1e-10 && identity_gap <= 1e-9 && const_gap <= 1e-9,
        &format!(
            "oracle gap {max_gap:.2e}, identity case gap {identity_gap:.2e}, constant case gap {const_gap:.2e}"
        ),
    );
}

fn tiny_model_cfg(seed: u64, frozen: bool) -> ModelConfig {
    let mut enc = EncoderConfig::new(caption_vocab());
    enc.d_model = 16;
    enc.n_layers = 2;
    enc.n_heads = 4;
    enc.d_ff = 32;
    enc.max_text_len = 16;
    enc.max_stream_tokens = 16;
    enc.frozen_vit = frozen;
    let patchify = PatchifyConfig {
        global_side: 16,
        region_side: 8,
        patch_px: 8,
        token_budget: 64,
    };
    let mut cfg = ModelConfig::new(enc, patchify);
    cfg.d_proj = 8;
    cfg.init_seed = seed;
    cfg
}

fn tiny_run_cfg() -> RunConfig {
    RunConfig {
        canvas: 32,
        global_side: 16,
        region_side: 8,
        patch_px: 8,
        token_budget: 64,
        max_text_len: 16,
        radius_min: 4.0,
        radius_max: 9.0,
        min_entities: 1,
        max_entities: 2,
        small_entity_prob: 0.0,
        count: 4,
        batch_size: 4,
        seed: 100,
        ..RunConfig::default()
    }
}

#[test]
fn criterion_03_gradient_suite() {
    let start = Instant::now();
    let mut cfg = tiny_model_cfg(13, false);
    // moderate temperature keeps the central-difference oracle inside its
    // truncation budget; the check targets backward-rule correctness
    cfg.tau = 0.5;
    let model = DynRslModel::new(cfg).unwrap();
    let run = tiny_run_cfg();
    let vocab = caption_vocab();
    let batch: Vec<TrainSample> = (0..2u64)
        .map(|s| {
            let scene =
                dynrsl_core::harness::generate_scene(100 + s, &run.scene_config()).unwrap();
            sample_from_scene(&scene, &run, &vocab).unwrap()
        })
        .collect();
    let params: Vec<Tensor> = model.named_params().into_iter().map(|(_, p)| p).collect();
    let groups = params.len();
    let err = finite_diff_check(
        &params,
        || model.total_loss(&batch, 21).map(|(l, _)| l),
        &FiniteDiffConfig {
            step: 1e-5,
            samples_per_param: 3,
            seed: 0xfeed,
        },
    )
    .unwrap();
    let secs = start.elapsed().as_secs_f64();
    report(
        "3",
        err <= 1e-4 && secs < 60.0,
        &format!("{groups} parameter groups, max relative error {err:.2e}, {secs:.1}s"),
    );
}

#[test]
fn criterion_04_frozen_contract() {
    let model = DynRslModel::new(tiny_model_cfg(5, true)).unwrap();
    let run = tiny_run_cfg();
    let (_, samples) = {
        let mut r = run.clone();
        r.count = 4;
        build_dataset(&r).unwrap()
    };
    let before: Vec<(String, Vec<u64>)> = model
        .named_params()
        .into_iter()
        .filter(|(name, _)| name.starts_with("vit."))
        .map(|(name, p)| (name, p.data().iter().map(|v| v.to_bits()).collect()))
        .collect();
    train(
        &model,
        &samples,
        &TrainConfig {
            steps: 100,
            batch_size: 4,
            learning_rate: 1e-3,
            weight_decay: 0.01,
            seed: 9,
        },
    )
    .unwrap();
    let mut unchanged = true;
    for (name, bits) in &before {
        let p = model
            .named_params()
            .into_iter()
            .find(|(n, _)| n == name)
            .unwrap()
            .1;
        let now: Vec<u64> = p.data().iter().map(|v| v.to_bits()).collect();
        unchanged &= &now == bits;
    }
    report(
        "4",
        unchanged,
        &format!("{} frozen ViT tensors bitwise unchanged after 100 steps", before.len()),
    );
}

#[test]
fn criterion_05_softmax_normalization() {
    let mut rng = ChaCha20Rng::seed_from_u64(0xacc5);
    let entropy = |p: &[f64]| -> f64 { p.iter().filter(|&&v| v > 0.0).map(|&v| -v * v.ln()).sum() };
    let mut rows_ok = true;
    let mut entropy_ok = true;
    for _ in 0..200 {
        let n = rng.gen_range(2..10);
        let mut data: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        // ensure the row is non-constant
        data[0] += 1.0;
        let x = Tensor::new(vec![1, n], data).unwrap();
        let warm = softmax_rows(&x, 1.0).unwrap().to_vec();
        let cold = softmax_rows(&x, 0.1).unwrap().to_vec();
        // at tau=0.1 a dominant entry can round to exactly 1.0 in f64, so
        // the checks here are the criterion's: row sums and the entropy drop
        rows_ok &= (warm.iter().sum::<f64>() - 1.0).abs() < 1e-12
            && (cold.iter().sum::<f64>() - 1.0).abs() < 1e-12
            && warm.iter().chain(&cold).all(|&v| v > 0.0);
        entropy_ok &= entropy(&cold) < entropy(&warm);
    }
    report(
        "5",
        rows_ok && entropy_ok,
        "rows sum to 1 within 1e-12; entropy strictly drops from tau=1.0 to tau=0.1",
    );
}

#[test]
fn criterion_06_patch_accounting() {
    let defaults = PatchifyConfig::default();
    let base_ok = defaults.global_tokens() == 196 && defaults.region_tokens() == 36;
    let mut rng = ChaCha20Rng::seed_from_u64(0xacc6);
    let img26 = {
        let data: Vec<f64> = (0..256 * 256 * 3).map(|_| rng.gen_range(0.0..1.0)).collect();
        ImageBuffer::new(256, 256, data).unwrap()
    };
    let mut budget_ok = true;
    let mut additivity_ok = true;
    for _ in 0..1000 {
        let n = rng.gen_range(0..6);
        let rois: Vec<BBox> = (0..n)
            .map(|_| {
                let x1 = rng.gen_range(0.0..200.0);
                let y1 = rng.gen_range(0.0..200.0);
                BBox::new(x1, y1, x1 + rng.gen_range(4.0..50.0), y1 + rng.gen_range(4.0..50.0))
                    .unwrap()
            })
            .collect();
        let plan = enumerate_combinations(&rois, 3, 8).unwrap();
        let budget = rng.gen_range(196..600);
        let cfg = PatchifyConfig {
            token_budget: budget,
            ..PatchifyConfig::default()
        };
        let input = build_dynrsl_input(&img26, &plan, &cfg).unwrap();
        budget_ok &= input.total_tokens <= budget;
        additivity_ok &= input.total_tokens == 196 + 36 * input.region_streams.len();
    }
    report(
        "6",
        base_ok && budget_ok && additivity_ok,
        "196 global tokens, +36 per admitted region, budget respected over 1,000 plans",
    );
}

fn smoke_run_cfg() -> RunConfig {
    RunConfig {
        d_model: 32,
        n_layers: 1,
        n_heads: 4,
        d_ff: 64,
        d_proj: 16,
        max_text_len: 16,
        canvas: 64,
        global_side: 32,
        region_side: 16,
        patch_px: 8,
        token_budget: 64,
        radius_min: 8.0,
        radius_max: 14.0,
        min_entities: 1,
        max_entities: 2,
        small_entity_prob: 0.0,
        count: 16,
        batch_size: 16,
        learning_rate: 1e-3,
        steps: 600,
        seed: 42,
        ..RunConfig::default()
    }
}

#[test]
fn criterion_07_retrieval_smoke_and_09_anti_collapse() {
    let cfg = smoke_run_cfg();
    let vocab = caption_vocab();
    let (_, samples) = build_dataset(&cfg).unwrap();

    // untrained baseline over 50 seeds
    let mut baseline_sum = 0.0;
    for s in 0..50u64 {
        let mut mcfg = cfg.model_config(vocab.clone());
        mcfg.init_seed = 1000 + s;
        let untrained = DynRslModel::new(mcfg).unwrap();
        baseline_sum += evaluate_retrieval(&untrained, &samples).unwrap().recall_at_1;
    }
    let baseline = baseline_sum / 50.0;

    let start = Instant::now();
    let model = DynRslModel::new(cfg.model_config(vocab)).unwrap();
    train(&model, &samples, &cfg.train_config()).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let metrics = evaluate_retrieval(&model, &samples).unwrap();
    report(
        "7",
        metrics.recall_at_1 >= 0.9 && cfg.steps <= 2000 && secs < 300.0 && baseline <= 0.2,
        &format!(
            "recall@1 {:.3} after {} steps in {secs:.0}s; untrained baseline {:.3} over 50 seeds",
            metrics.recall_at_1, cfg.steps, baseline
        ),
    );

    // criterion 9 inspects the same trained model
    let mut pooled: Vec<Vec<f64>> = Vec::new();
    for s in &samples {
        let h = model.image_embedding(&s.views).unwrap();
        let (t, d) = (h.shape()[0], h.shape()[1]);
        let hd = h.data();
        let mut mean = vec![0.0; d];
        for r in 0..t {
            for c in 0..d {
                mean[c] += hd[r * d + c] / t as f64;
            }
        }
        pooled.push(mean);
    }
    let m = pooled.len();
    let d = pooled[0].len();
    let mut cos_sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..m {
        for j in i + 1..m {
            let a = Tensor::new(vec![1, d], pooled[i].clone()).unwrap();
            let b = Tensor::new(vec![d], pooled[j].clone()).unwrap();
            cos_sum += cosine_rows(&a, &b).unwrap().item().unwrap();
            pairs += 1;
        }
    }
    let mean_cos = cos_sum / pairs as f64;
    let mut min_var = f64::INFINITY;
    for c in 0..d {
        let mu: f64 = pooled.iter().map(|p| p[c]).sum::<f64>() / m as f64;
        let var: f64 = pooled.iter().map(|p| (p[c] - mu) * (p[c] - mu)).sum::<f64>() / m as f64;
        min_var = min_var.min(var);
    }
    report(
        "9",
        mean_cos < 0.99 && min_var > 0.0,
        &format!("mean pairwise cosine {mean_cos:.4}, min per-dimension variance {min_var:.2e}"),
    );
}

#[test]
fn criterion_08_ablation_analogue() {
    // Small planted entities under clutter; retrieval measured on a
    // held-out rendition pool (same captions, fresh positions and clutter)
    // because both variants memorize the 24-pair training pool outright.
    let base = RunConfig {
        d_model: 32,
        n_layers: 1,
        n_heads: 4,
        d_ff: 64,
        d_proj: 16,
        max_text_len: 16,
        canvas: 128,
        global_side: 16,
        region_side: 16,
        patch_px: 8,
        token_budget: 64,
        radius_min: 3.0,
        radius_max: 5.0,
        min_entities: 1,
        max_entities: 1,
        small_entity_prob: 1.0,
        clutter: 40,
        count: 24,
        batch_size: 24,
        learning_rate: 1e-3,
        steps: 800,
        seed: 7,
        ..RunConfig::default()
    };
    let vocab = caption_vocab();
    let area_budget = 0.02 * (base.canvas * base.canvas) as f64;
    let mut recalls = [0.0f64; 2];
    for (slot, use_regions) in [(0usize, true), (1usize, false)] {
        let mut cfg = base.clone();
        cfg.use_regions = use_regions;
        let (scenes, train_samples) = build_dataset(&cfg).unwrap();
        for s in &scenes {
            let e = &s.spec.entities[0];
            assert!(e.shape.area(e.radius) < area_budget, "entity must stay under 2% area");
        }
        let scfg = cfg.scene_config();
        let eval_samples: Vec<TrainSample> = scenes
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let fresh = regenerate_scene(s, 0xe0_0000 + i as u64, &scfg).unwrap();
                sample_from_scene(&fresh, &cfg, &vocab).unwrap()
            })
            .collect();
        let model = DynRslModel::new(cfg.model_config(vocab.clone())).unwrap();
        train(&model, &train_samples, &cfg.train_config()).unwrap();
        recalls[slot] = evaluate_retrieval(&model, &eval_samples).unwrap().recall_at_1;
    }
    let margin = recalls[0] - recalls[1];
    report(
        "8",
        margin >= 0.1,
        &format!(
            "held-out recall@1: full {:.3} vs no-region-streams {:.3} (margin {margin:.3})",
            recalls[0], recalls[1]
        ),
    );
}

#[test]
fn criterion_10_persistence() {
    use dynrsl_core::harness::checkpoint::{
        apply_checkpoint, read_checkpoint, write_checkpoint,
    };
    let model = DynRslModel::new(tiny_model_cfg(31, true)).unwrap();
    let mut first = Vec::new();
    write_checkpoint(&mut first, &model.cfg.snapshot(), &model.named_params()).unwrap();
    let data = read_checkpoint(first.as_slice()).unwrap();
    for (_, p) in model.named_params() {
        let bumped: Vec<f64> = p.to_vec().iter().map(|v| v + 0.125).collect();
        p.set_data(&bumped).unwrap();
    }
    apply_checkpoint(&data, &model).unwrap();
    let mut second = Vec::new();
    write_checkpoint(&mut second, &model.cfg.snapshot(), &model.named_params()).unwrap();
    let round_trip_ok = first == second;

    let mut wide_cfg = tiny_model_cfg(32, true);
    wide_cfg.encoder.d_model = 32;
    wide_cfg.encoder.d_ff = 64;
    let wide = DynRslModel::new(wide_cfg).unwrap();
    let mismatch = apply_checkpoint(&data, &wide);
    let shape_error = matches!(mismatch, Err(Error::Shape { .. }));
    report(
        "10",
        round_trip_ok && shape_error,
        &format!(
            "save/load/save byte-identical ({} bytes); d_model mismatch raises a shape error",
            first.len()
        ),
    );
}
