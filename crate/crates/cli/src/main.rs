//! Command-line interface: dataset generation, region planning, token
//! accounting, training, retrieval evaluation, gradient checking, and
//! one-shot image/caption similarity.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};

use dynrsl_core::encoders::{tokenize, EncoderConfig, Vocab};
use dynrsl_core::geometry::{enumerate_combinations, ingest_detections, write_detections, BBox, Detection};
use dynrsl_core::harness::checkpoint::{read_checkpoint, save_checkpoint};
use dynrsl_core::harness::scene::generate_distinct_corpus;
use dynrsl_core::harness::{
    caption_vocab, evaluate_retrieval, load_checkpoint, plan_for_detections, sample_from_scene,
    train, ConfigSnapshot, DynRslModel, ModelConfig, RunConfig, TrainSample,
};
use dynrsl_core::image::{load_ppm, save_ppm};
use dynrsl_core::patchify::{build_dynrsl_input, PatchifyConfig};
use dynrsl_core::tensor::{finite_diff_check, FiniteDiffConfig, Tensor};

#[derive(Parser)]
#[command(
    name = "dynrsl",
    version,
    about = "Dynamic-resolution vision-language toolkit",
    arg_required_else_help = true
)]
struct Cli {
    /// Emit machine-readable JSON on standard output
    #[arg(long, global = true)]
    json: bool,
    /// Line-oriented `key = value` configuration file; flags override it
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. --set steps=500 (repeatable)
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset: images, detections, captions, manifest
    Gen(GenArgs),
    /// Report the region plan for a detections file
    Plan(PlanArgs),
    /// Report the token budget for one image and its detections
    Patchify(PatchifyArgs),
    /// Train on a dataset manifest and write a checkpoint
    Train(TrainArgs),
    /// Evaluate retrieval metrics for a checkpoint over a dataset
    Eval(EvalArgs),
    /// Run the finite-difference gradient suite on a tiny model
    Gradcheck(GradcheckArgs),
    /// Patch-max similarity between one image and one caption
    Sim(SimArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Output directory
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Number of image-caption pairs (overrides `count`)
    #[arg(long)]
    count: Option<usize>,
    /// Base seed (overrides `seed`)
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct PlanArgs {
    /// JSON-lines detection file
    #[arg(long, value_name = "FILE")]
    detections: PathBuf,
    /// Largest ROI subset size to merge
    #[arg(long)]
    max_subset_size: Option<usize>,
    /// Cap on combined regions kept per image
    #[arg(long)]
    max_regions: Option<usize>,
    /// Comma-separated class filter; empty keeps everything
    #[arg(long)]
    classes: Option<String>,
}

#[derive(Args)]
struct PatchifyArgs {
    /// PPM (P6) image
    #[arg(long, value_name = "FILE")]
    image: PathBuf,
    /// JSON-lines detection file (optional; global stream only if absent)
    #[arg(long, value_name = "FILE")]
    detections: Option<PathBuf>,
    /// Image id to select from the detection file (default: first group)
    #[arg(long)]
    image_id: Option<String>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset manifest written by `gen`
    #[arg(long, value_name = "FILE")]
    data: PathBuf,
    /// Checkpoint output path
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Optimization steps (overrides `steps`)
    #[arg(long)]
    steps: Option<usize>,
    /// Initial learning rate (overrides `learning_rate`)
    #[arg(long)]
    lr: Option<f64>,
    /// Drop all region streams (ablation variant)
    #[arg(long)]
    no_regions: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Dataset manifest written by `gen`
    #[arg(long, value_name = "FILE")]
    data: PathBuf,
    /// Checkpoint produced by `train`
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Largest acceptable relative error
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

#[derive(Args)]
struct SimArgs {
    /// PPM (P6) image
    #[arg(long, value_name = "FILE")]
    image: PathBuf,
    /// Caption text (grammar words only)
    #[arg(long)]
    caption: String,
    /// Checkpoint to load (fresh seeded weights if absent)
    #[arg(long, value_name = "FILE")]
    checkpoint: Option<PathBuf>,
    /// JSON-lines detection file for region streams
    #[arg(long, value_name = "FILE")]
    detections: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        cfg.apply_file(path).with_context(|| format!("reading {}", path.display()))?;
    }
    for kv in &cli.sets {
        let (key, value) = kv
            .split_once('=')
            .ok_or_else(|| anyhow!("--set expects KEY=VALUE, got {kv:?}"))?;
        cfg.set(key.trim(), value.trim())?;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = run_config(&cli)?;
    match &cli.command {
        Command::Gen(args) => cmd_gen(&cli, cfg, args),
        Command::Plan(args) => cmd_plan(&cli, cfg, args),
        Command::Patchify(args) => cmd_patchify(&cli, cfg, args),
        Command::Train(args) => cmd_train(&cli, cfg, args),
        Command::Eval(args) => cmd_eval(&cli, cfg, args),
        Command::Gradcheck(args) => cmd_gradcheck(&cli, args),
        Command::Sim(args) => cmd_sim(&cli, cfg, args),
    }
}

fn cmd_gen(cli: &Cli, mut cfg: RunConfig, args: &GenArgs) -> anyhow::Result<()> {
    if let Some(c) = args.count {
        cfg.count = c;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    std::fs::create_dir_all(&args.out)?;
    let scenes = generate_distinct_corpus(cfg.seed, cfg.count, &cfg.scene_config())?;
    let mut items = Vec::with_capacity(scenes.len());
    for (i, scene) in scenes.iter().enumerate() {
        let image_name = format!("img_{i:05}.ppm");
        let det_name = format!("det_{i:05}.jsonl");
        save_ppm(&args.out.join(&image_name), &scene.image)?;
        let mut det_file = std::io::BufWriter::new(std::fs::File::create(args.out.join(&det_name))?);
        write_detections(&mut det_file, &scene.detections)?;
        det_file.flush()?;
        items.push(serde_json::json!({
            "image": image_name,
            "detections": det_name,
            "caption": scene.caption,
        }));
    }
    caption_vocab().save(&args.out.join("vocab.txt"))?;
    let manifest = serde_json::json!({ "version": 1, "items": items });
    std::fs::write(args.out.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    if cli.json {
        println!(
            "{}",
            serde_json::json!({
                "out": args.out.display().to_string(),
                "count": scenes.len(),
                "seed": cfg.seed,
            })
        );
    } else {
        println!("wrote {} pairs under {}", scenes.len(), args.out.display());
    }
    Ok(())
}

fn cmd_plan(cli: &Cli, mut cfg: RunConfig, args: &PlanArgs) -> anyhow::Result<()> {
    if let Some(m) = args.max_subset_size {
        cfg.max_subset_size = m;
    }
    if let Some(m) = args.max_regions {
        cfg.max_regions = m;
    }
    if let Some(classes) = &args.classes {
        cfg.class_filter = classes
            .split(',')
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect();
    }
    let file = std::fs::File::open(&args.detections)
        .with_context(|| format!("opening {}", args.detections.display()))?;
    let groups = ingest_detections(std::io::BufReader::new(file))?;
    let mut reports = Vec::new();
    for (image_id, dets) in &groups {
        let rois: Vec<BBox> = dets
            .iter()
            .filter(|d| cfg.class_filter.is_empty() || cfg.class_filter.contains(&d.class_label))
            .map(|d| d.bbox)
            .collect();
        let plan = enumerate_combinations(&rois, cfg.max_subset_size, cfg.max_regions)?;
        reports.push(serde_json::json!({
            "image_id": image_id,
            "rois": plan.rois.len(),
            "combined_regions": plan.combined.len(),
            "subsets_enumerated": plan.caps_applied.subsets_enumerated,
            "caps": plan.caps_applied,
        }));
        if !cli.json {
            println!(
                "{image_id}: {} rois, {} combined regions ({} subsets enumerated)",
                plan.rois.len(),
                plan.combined.len(),
                plan.caps_applied.subsets_enumerated
            );
        }
    }
    if cli.json {
        println!("{}", serde_json::json!({ "images": reports }));
    }
    Ok(())
}

fn cmd_patchify(cli: &Cli, cfg: RunConfig, args: &PatchifyArgs) -> anyhow::Result<()> {
    let image = load_ppm(&args.image).with_context(|| format!("reading {}", args.image.display()))?;
    let dets: Vec<Detection> = match &args.detections {
        Some(path) => {
            let file = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
            let groups = ingest_detections(std::io::BufReader::new(file))?;
            let group = match &args.image_id {
                Some(id) => groups
                    .into_iter()
                    .find(|(gid, _)| gid == id)
                    .ok_or_else(|| anyhow!("image id {id:?} not present in the detection file"))?,
                None => groups
                    .into_iter()
                    .next()
                    .ok_or_else(|| anyhow!("detection file holds no records"))?,
            };
            group.1
        }
        None => Vec::new(),
    };
    let plan = plan_for_detections(&dets, image.width, image.height, &cfg)?;
    let input = build_dynrsl_input(&image, &plan, &cfg.patchify_config())?;
    let streams: Vec<serde_json::Value> = input
        .streams()
        .map(|s| {
            serde_json::json!({
                "kind": s.stream_kind.label(),
                "grid": [s.grid_w, s.grid_h],
                "tokens": s.token_count(),
                "source_box": [s.source_box.x1, s.source_box.y1, s.source_box.x2, s.source_box.y2],
            })
        })
        .collect();
    let summary = serde_json::json!({
        "image": args.image.display().to_string(),
        "rois": plan.rois.len(),
        "combined_regions": plan.combined.len(),
        "streams": streams,
        "total_tokens": input.total_tokens,
        "token_budget": cfg.token_budget,
        "regions_dropped": input.regions_dropped,
    });
    if cli.json {
        println!("{summary}");
    } else {
        println!(
            "{} streams, {} tokens of {} budget ({} regions dropped)",
            1 + input.region_streams.len(),
            input.total_tokens,
            cfg.token_budget,
            input.regions_dropped
        );
    }
    Ok(())
}

/// Vocabulary for a dataset directory: `vocab.txt` next to the manifest
/// when present, the built-in caption grammar otherwise.
fn dataset_vocab(manifest: &Path) -> anyhow::Result<Vocab> {
    let candidate = manifest.parent().unwrap_or(Path::new(".")).join("vocab.txt");
    if candidate.exists() {
        Ok(Vocab::load(&candidate)?)
    } else {
        Ok(caption_vocab())
    }
}

/// Resolve a dataset manifest into training samples.
fn load_manifest(path: &Path, cfg: &RunConfig, vocab: &Vocab) -> anyhow::Result<Vec<TrainSample>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let manifest: serde_json::Value = serde_json::from_str(&text)?;
    if manifest["version"] != 1 {
        bail!("unsupported manifest version {}", manifest["version"]);
    }
    let dir = path.parent().unwrap_or(Path::new("."));
    let items = manifest["items"]
        .as_array()
        .ok_or_else(|| anyhow!("manifest has no items array"))?;
    let mut samples = Vec::with_capacity(items.len());
    for (i, item) in items.iter().enumerate() {
        let field = |name: &str| -> anyhow::Result<&str> {
            item[name]
                .as_str()
                .ok_or_else(|| anyhow!("item {i}: missing field {name:?}"))
        };
        let image = load_ppm(&dir.join(field("image")?))?;
        let det_file = std::fs::File::open(dir.join(field("detections")?))?;
        let groups = ingest_detections(std::io::BufReader::new(det_file))?;
        let dets: Vec<Detection> = groups.into_iter().flat_map(|(_, d)| d).collect();
        let caption = field("caption")?;
        let scene_like = dynrsl_core::harness::Scene {
            spec: dynrsl_core::harness::SceneSpec {
                canvas: image.width,
                entities: vec![],
                clutter: vec![],
                seed: i as u64,
            },
            image,
            detections: dets,
            caption: caption.to_string(),
        };
        samples.push(sample_from_scene(&scene_like, cfg, vocab)?);
    }
    Ok(samples)
}

/// Rebuild a model whose shapes follow a checkpoint snapshot; runtime
/// settings (temperature, weights, mask ratio) still come from the run
/// configuration.
fn model_from_snapshot(cfg: &RunConfig, snap: &ConfigSnapshot, vocab: Vocab) -> anyhow::Result<DynRslModel> {
    let mut enc = EncoderConfig::new(vocab);
    enc.d_model = snap.d_model;
    enc.n_layers = snap.n_layers;
    enc.n_heads = snap.n_heads;
    enc.d_ff = snap.d_ff;
    enc.max_text_len = snap.max_text_len;
    enc.max_stream_tokens = snap.max_stream_tokens;
    enc.frozen_vit = cfg.frozen_vit;
    let patchify = PatchifyConfig {
        global_side: snap.global_side,
        region_side: snap.region_side,
        patch_px: snap.patch_px,
        token_budget: snap.token_budget,
    };
    let mut mcfg = ModelConfig::new(enc, patchify);
    mcfg.d_proj = snap.d_proj;
    mcfg.tau = cfg.tau;
    mcfg.loss_weights = dynrsl_core::alignment::LossWeights {
        itc: cfg.w_itc,
        itm: cfg.w_itm,
        itg: cfg.w_itg,
    };
    mcfg.mask_ratio = cfg.mask_ratio;
    mcfg.init_seed = cfg.seed;
    Ok(DynRslModel::new(mcfg)?)
}

fn cmd_train(cli: &Cli, mut cfg: RunConfig, args: &TrainArgs) -> anyhow::Result<()> {
    if let Some(s) = args.steps {
        cfg.steps = s;
    }
    if let Some(lr) = args.lr {
        cfg.learning_rate = lr;
    }
    if args.no_regions {
        cfg.use_regions = false;
    }
    let vocab = dataset_vocab(&args.data)?;
    let samples = load_manifest(&args.data, &cfg, &vocab)?;
    let model = DynRslModel::new(cfg.model_config(vocab))?;
    let reports = train(&model, &samples, &cfg.train_config())?;
    save_checkpoint(&args.out, &model)?;
    let last = reports.last().expect("at least one step");
    if cli.json {
        println!(
            "{}",
            serde_json::json!({
                "steps": reports.len(),
                "samples": samples.len(),
                "final": { "itc": last.itc, "itm": last.itm, "itg": last.itg, "total": last.total },
                "checkpoint": args.out.display().to_string(),
            })
        );
    } else {
        for (i, r) in reports.iter().enumerate() {
            if i % 50 == 0 || i + 1 == reports.len() {
                println!(
                    "step {i:>5}: total {:.4} (itc {:.4}, itm {:.4}, itg {:.4})",
                    r.total, r.itc, r.itm, r.itg
                );
            }
        }
        println!("checkpoint written to {}", args.out.display());
    }
    Ok(())
}

fn cmd_eval(cli: &Cli, cfg: RunConfig, args: &EvalArgs) -> anyhow::Result<()> {
    let vocab = dataset_vocab(&args.data)?;
    let file = std::fs::File::open(&args.checkpoint)
        .with_context(|| format!("opening {}", args.checkpoint.display()))?;
    let data = read_checkpoint(std::io::BufReader::new(file))?;
    let mut run = cfg;
    // token geometry must match the checkpoint before samples are built
    run.global_side = data.snapshot.global_side;
    run.region_side = data.snapshot.region_side;
    run.patch_px = data.snapshot.patch_px;
    run.token_budget = data.snapshot.token_budget;
    run.max_text_len = data.snapshot.max_text_len;
    let samples = load_manifest(&args.data, &run, &vocab)?;
    let model = model_from_snapshot(&run, &data.snapshot, vocab)?;
    load_checkpoint(&args.checkpoint, &model)?;
    let metrics = evaluate_retrieval(&model, &samples)?;
    if cli.json {
        println!(
            "{}",
            serde_json::json!({
                "pairs": metrics.pairs,
                "recall_at_1": metrics.recall_at_1,
                "recall_at_5": metrics.recall_at_5,
                "mean_rank": metrics.mean_rank,
            })
        );
    } else {
        println!(
            "{} pairs: recall@1 {:.3}, recall@5 {:.3}, mean rank {:.2}",
            metrics.pairs, metrics.recall_at_1, metrics.recall_at_5, metrics.mean_rank
        );
    }
    Ok(())
}

fn cmd_gradcheck(cli: &Cli, args: &GradcheckArgs) -> anyhow::Result<()> {
    let vocab = caption_vocab();
    let mut enc = EncoderConfig::new(vocab.clone());
    enc.d_model = 16;
    enc.n_layers = 2;
    enc.n_heads = 4;
    enc.d_ff = 32;
    enc.max_text_len = 16;
    enc.max_stream_tokens = 16;
    enc.frozen_vit = false;
    let patchify = PatchifyConfig {
        global_side: 16,
        region_side: 8,
        patch_px: 8,
        token_budget: 64,
    };
    let mut mcfg = ModelConfig::new(enc, patchify);
    mcfg.d_proj = 8;
    mcfg.init_seed = 13;
    mcfg.tau = 0.5;
    let model = DynRslModel::new(mcfg)?;
    let run = RunConfig {
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
        ..RunConfig::default()
    };
    let batch: Vec<TrainSample> = (0..2u64)
        .map(|s| {
            let scene = dynrsl_core::harness::generate_scene(100 + s, &run.scene_config())?;
            sample_from_scene(&scene, &run, &vocab)
        })
        .collect::<dynrsl_core::Result<_>>()?;
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
    )?;
    let pass = err <= args.tolerance;
    if cli.json {
        println!(
            "{}",
            serde_json::json!({
                "parameter_groups": groups,
                "max_relative_error": err,
                "tolerance": args.tolerance,
                "pass": pass,
            })
        );
    } else {
        println!(
            "{groups} parameter groups, max relative error {err:.3e} (tolerance {:.0e})",
            args.tolerance
        );
    }
    if pass {
        Ok(())
    } else {
        Err(anyhow!("gradient check failed: {err:.3e} exceeds {:.0e}", args.tolerance))
    }
}

fn cmd_sim(cli: &Cli, cfg: RunConfig, args: &SimArgs) -> anyhow::Result<()> {
    let vocab = caption_vocab();
    let image = load_ppm(&args.image)?;
    let dets: Vec<Detection> = match &args.detections {
        Some(path) => {
            let file = std::fs::File::open(path)?;
            ingest_detections(std::io::BufReader::new(file))?
                .into_iter()
                .flat_map(|(_, d)| d)
                .collect()
        }
        None => Vec::new(),
    };
    let (model, run) = match &args.checkpoint {
        Some(path) => {
            let file = std::fs::File::open(path)?;
            let data = read_checkpoint(std::io::BufReader::new(file))?;
            let mut run = cfg;
            run.global_side = data.snapshot.global_side;
            run.region_side = data.snapshot.region_side;
            run.patch_px = data.snapshot.patch_px;
            run.token_budget = data.snapshot.token_budget;
            run.max_text_len = data.snapshot.max_text_len;
            let model = model_from_snapshot(&run, &data.snapshot, vocab.clone())?;
            load_checkpoint(path, &model)?;
            (model, run)
        }
        None => {
            let run = cfg;
            let model = DynRslModel::new(run.model_config(vocab.clone()))?;
            (model, run)
        }
    };
    let plan = plan_for_detections(&dets, image.width, image.height, &run)?;
    let input = build_dynrsl_input(&image, &plan, &run.patchify_config())?;
    let caption = tokenize(&vocab, &args.caption, run.max_text_len)?;
    let similarity = model.pair_similarity(&[input], &caption)?;
    if cli.json {
        println!(
            "{}",
            serde_json::json!({
                "image": args.image.display().to_string(),
                "caption": args.caption,
                "similarity": similarity,
            })
        );
    } else {
        println!("similarity: {similarity:.6}");
    }
    Ok(())
}
