//! Batch command-line surface: warp templates onto faces, extract mask
//! regions, train/resume the translation model, generate outputs, compose
//! multi-face scenes, tile sample grids and evaluate metrics.
//!
//! Exit codes: 0 success, 1 operational failure, 2 usage error.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use remask_core::datasets::{
    read_jsonl, scene_compose, write_jsonl, SceneLabels, ScenePipeline, SceneRecord,
};
use remask_core::image_core::{
    load_image, load_region_mask, region_mask_path, save_region_mask, ImageTensor,
};
use remask_core::mask_warp::{landmarks_path, load_landmarks, warp_and_extract, MaskTemplate};
use remask_core::metrics::{emit_grid, mask_color_diversity, non_mask_change};
use remask_core::model::{DiscriminatorConfig, GeneratorConfig};
use remask_core::region_extract::{batch_extract, ExtractConfig};
use remask_core::trainer::checkpoint::load_checkpoint;
use remask_core::trainer::{generate_dir, load_schedule, resume, train, TrainConfig};

/// Environment variable overriding the data root when `--data` is omitted.
const DATA_ROOT_ENV: &str = "REMASK_DATA_ROOT";

#[derive(Parser)]
#[command(
    name = "remask",
    about = "Masked-face dataset synthesis: rule-based warping plus attention-guided translation",
    version
)]
struct Cli {
    /// Master seed for all random decisions.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// JSON config file; CLI flags take precedence over its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

/// On-disk config schema. All sections optional; omitted fields keep their
/// built-in defaults.
#[derive(Debug, Default, Deserialize)]
#[serde(default)]
struct FileConfig {
    train: Option<TrainConfig>,
    generator: Option<GeneratorConfig>,
    discriminator: Option<DiscriminatorConfig>,
    extract: Option<ExtractConfig>,
}

#[derive(Subcommand)]
enum Command {
    /// Warp a mask template onto every face image in a directory.
    ///
    /// For each `<stem>.png` with a `<stem>.landmarks.json` sidecar, writes
    /// `<stem>.png` (rule-based mask image), `<stem>.full.png` (resized
    /// original) and `<stem>.regionmask.png` into the output directory.
    Warp(WarpArgs),
    /// Compute region-mask sidecars for warped/full image pairs.
    ExtractRegion(ExtractArgs),
    /// Train the translation model over a staged schedule.
    Train(TrainArgs),
    /// Continue training from a checkpoint through the end of the schedule.
    Resume(ResumeArgs),
    /// Run a frozen checkpoint over a directory of images.
    Generate(GenerateArgs),
    /// Mask a fraction of the faces in annotated multi-face scenes.
    ComposeScene(ComposeArgs),
    /// Tile input/output pairs side by side into one PNG.
    Grid(GridArgs),
    /// Evaluate non-mask preservation and mask color diversity.
    Eval(EvalArgs),
}

#[derive(Args)]
struct WarpArgs {
    /// Directory of face images with landmark sidecars.
    #[arg(long, name = "dir")]
    input: PathBuf,
    /// Template raster; its `.json` anchor file sits beside it.
    #[arg(long)]
    template: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Square working size for the warped outputs.
    #[arg(long, default_value_t = 256)]
    size: usize,
    /// Region threshold in storage units (0-255).
    #[arg(long)]
    threshold: Option<f64>,
    /// Region dilation radius in pixels.
    #[arg(long)]
    dilate: Option<usize>,
}

#[derive(Args)]
struct ExtractArgs {
    #[arg(long)]
    dir: PathBuf,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    dilate: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    /// Schedule file: a JSON array of epoch-span entries.
    #[arg(long)]
    schedule: PathBuf,
    /// Data root holding trainA/ and trainB/ (possibly per dataset id).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint output directory.
    #[arg(long, default_value = "ckpt")]
    out: PathBuf,
    /// Checkpoint directory to copy starting weights from.
    #[arg(long)]
    warm_start: Option<PathBuf>,
}

#[derive(Args)]
struct ResumeArgs {
    /// Checkpoint directory (e.g. ckpt/epoch_3) to continue from.
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    schedule: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory for new checkpoints (defaults to the parent of --ckpt).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, name = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Seed for noise draws (enables seeded reproduction).
    #[arg(long)]
    noise_seed: Option<u64>,
    /// Force noise injection on or off regardless of the checkpoint config.
    #[arg(long)]
    noise: Option<bool>,
}

#[derive(Args)]
struct ComposeArgs {
    /// JSON-lines scene annotations.
    #[arg(long)]
    scenes: PathBuf,
    /// Fraction of faces per scene to mask.
    #[arg(long)]
    fraction: f64,
    #[arg(long)]
    template: PathBuf,
    /// Optional checkpoint: run the generator after warping.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Working size for per-face processing.
    #[arg(long, default_value_t = 256)]
    size: usize,
}

#[derive(Args)]
struct GridArgs {
    /// Directory of input images.
    #[arg(long)]
    inputs: PathBuf,
    /// Directory of output images with matching file names.
    #[arg(long)]
    outputs: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Pairs per row.
    #[arg(long, default_value_t = 3)]
    cols: usize,
    /// Resize images to this square size before tiling.
    #[arg(long, default_value_t = 256)]
    size: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    inputs: PathBuf,
    #[arg(long)]
    outputs: PathBuf,
    /// Directory holding region-mask sidecars for the inputs (defaults to
    /// the inputs directory).
    #[arg(long)]
    masks: Option<PathBuf>,
    /// Where to write the JSON summary.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 256)]
    size: usize,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::exit(1);
        }
    }
}

fn load_file_config(path: Option<&Path>) -> anyhow::Result<FileConfig> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading config {}", p.display()))?;
            Ok(serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?)
        }
    }
}

fn resolve_data_root(flag: Option<PathBuf>) -> anyhow::Result<PathBuf> {
    if let Some(p) = flag {
        return Ok(p);
    }
    if let Ok(env) = std::env::var(DATA_ROOT_ENV) {
        return Ok(PathBuf::from(env));
    }
    bail!("no data root: pass --data or set {DATA_ROOT_ENV}")
}

fn extract_config(file: &FileConfig, threshold: Option<f64>, dilate: Option<usize>) -> ExtractConfig {
    let mut cfg = file.extract.clone().unwrap_or_default();
    if let Some(t) = threshold {
        cfg.threshold = t;
    }
    if let Some(d) = dilate {
        cfg.dilation_radius = d;
    }
    cfg
}

fn train_config(file: &FileConfig) -> TrainConfig {
    let mut cfg = file.train.clone().unwrap_or_default();
    if let Some(g) = &file.generator {
        cfg.generator = g.clone();
    }
    if let Some(d) = &file.discriminator {
        cfg.discriminator = d.clone();
    }
    cfg
}

fn announce_config<T: serde::Serialize>(label: &str, cfg: &T) {
    // Resolved configuration goes to stderr so stdout stays machine-usable.
    eprintln!("{label}: {}", serde_json::to_string(cfg).unwrap_or_else(|_| "<?>".into()));
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let file_cfg = load_file_config(cli.config.as_deref())?;
    match cli.command {
        Command::Warp(args) => {
            let cfg = extract_config(&file_cfg, args.threshold, args.dilate);
            announce_config("extract-config", &cfg);
            let template = MaskTemplate::load(&args.template)?;
            std::fs::create_dir_all(&args.out)?;
            let images = remask_core::datasets::list_images(&args.input)?;
            let mut done = 0usize;
            for path in &images {
                let lm_path = landmarks_path(path);
                if !lm_path.exists() {
                    log::warn!("no landmarks for {}; skipped", path.display());
                    continue;
                }
                let face = load_image(path, args.size)?;
                let lms = load_landmarks(&lm_path, args.size, args.size)?;
                let (warped, region) = warp_and_extract(&face, &lms, &template, &cfg)?;
                let stem = path.file_stem().unwrap().to_string_lossy();
                let warped_path = args.out.join(format!("{stem}.png"));
                warped.to_rgb8().save(&warped_path)?;
                face.to_rgb8().save(args.out.join(format!("{stem}.full.png")))?;
                save_region_mask(&region, &warped_path)?;
                done += 1;
            }
            println!("{done}");
        }
        Command::ExtractRegion(args) => {
            let cfg = extract_config(&file_cfg, args.threshold, args.dilate);
            announce_config("extract-config", &cfg);
            let report = batch_extract(&args.dir, &cfg)?;
            for orphan in &report.orphans {
                log::warn!("unpaired: {}", orphan.display());
            }
            println!("{}", report.written);
        }
        Command::Train(args) => {
            let cfg = train_config(&file_cfg);
            announce_config("train-config", &cfg);
            let schedule = load_schedule(&args.schedule)?;
            let data_root = resolve_data_root(args.data)?;
            let outcome = train(
                cfg,
                &schedule,
                &data_root,
                &args.out,
                cli.seed,
                args.warm_start.as_deref(),
            )?;
            println!("trained through epoch {}", outcome.last_epoch);
        }
        Command::Resume(args) => {
            let schedule = load_schedule(&args.schedule)?;
            let data_root = resolve_data_root(args.data)?;
            let out = match args.out {
                Some(o) => o,
                None => args
                    .ckpt
                    .parent()
                    .map(Path::to_path_buf)
                    .unwrap_or_else(|| PathBuf::from(".")),
            };
            let outcome = resume(&args.ckpt, &schedule, &data_root, &out)?;
            println!("resumed through epoch {}", outcome.last_epoch);
        }
        Command::Generate(args) => {
            let written = generate_dir(
                &args.ckpt,
                &args.input,
                &args.out,
                args.noise,
                args.noise_seed,
            )?;
            println!("{}", written.len());
        }
        Command::ComposeScene(args) => {
            if !(0.0..=1.0).contains(&args.fraction) {
                bail!("--fraction must be within [0, 1]");
            }
            let template = MaskTemplate::load(&args.template)?;
            let scenes: Vec<SceneRecord> = read_jsonl(&args.scenes)?;
            std::fs::create_dir_all(&args.out)?;
            let bundle = match &args.ckpt {
                Some(dir) => Some(load_checkpoint(dir)?),
                None => None,
            };
            let mut all_labels: Vec<SceneLabels> = Vec::new();
            for (k, scene) in scenes.iter().enumerate() {
                let img = image::open(&scene.image)
                    .with_context(|| format!("opening scene {}", scene.image.display()))?
                    .to_rgb8();
                let pipeline = match &bundle {
                    None => ScenePipeline::WarpOnly { template: &template, work_size: args.size },
                    Some(b) => ScenePipeline::WarpGenerate {
                        template: &template,
                        generator: &b.g_ab,
                        noise: b.manifest.train.generator.noise.clone(),
                        noise_seed: cli.seed.wrapping_add(k as u64),
                        work_size: b.manifest.train.generator.input_size,
                    },
                };
                let (composed, labels) =
                    scene_compose(&img, scene, args.fraction, &pipeline, cli.seed.wrapping_add(k as u64))?;
                let name = scene
                    .image
                    .file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_else(|| format!("scene_{k}.png"));
                let out_path = args.out.join(name);
                composed.save(&out_path)?;
                all_labels.push(SceneLabels { image: out_path, boxes: labels });
            }
            write_jsonl(&args.out.join("annotations.jsonl"), &all_labels)?;
            println!("{}", all_labels.len());
        }
        Command::Grid(args) => {
            let inputs = remask_core::datasets::list_images(&args.inputs)?;
            let mut pairs: Vec<(ImageTensor, ImageTensor)> = Vec::new();
            for input in &inputs {
                let name = input.file_name().unwrap();
                let output = args.outputs.join(name);
                if !output.exists() {
                    log::warn!("no output for {}; skipped", input.display());
                    continue;
                }
                pairs.push((load_image(input, args.size)?, load_image(&output, args.size)?));
            }
            if pairs.is_empty() {
                bail!("no matching input/output pairs");
            }
            emit_grid(&pairs, &args.out, args.cols)?;
            println!("{}", pairs.len());
        }
        Command::Eval(args) => {
            let inputs = remask_core::datasets::list_images(&args.inputs)?;
            let masks_dir = args.masks.as_deref().unwrap_or(&args.inputs);
            let mut nmc_values = Vec::new();
            let mut outputs = Vec::new();
            let mut regions = Vec::new();
            for input in &inputs {
                let name = input.file_name().unwrap();
                let out_path = args.outputs.join(name);
                if !out_path.exists() {
                    log::warn!("no output for {}; skipped", input.display());
                    continue;
                }
                let mask_path = region_mask_path(&masks_dir.join(name));
                if !mask_path.exists() {
                    log::warn!("no region mask for {}; skipped", input.display());
                    continue;
                }
                let inp = load_image(input, args.size)?;
                let outp = load_image(&out_path, args.size)?;
                let mask = load_region_mask(&mask_path)?;
                if (mask.height(), mask.width()) != (args.size, args.size) {
                    bail!(
                        "region mask {} is {}x{}, expected {}x{}",
                        mask_path.display(),
                        mask.height(),
                        mask.width(),
                        args.size,
                        args.size
                    );
                }
                nmc_values.push(non_mask_change(&inp, &outp, &mask)?);
                outputs.push(outp);
                regions.push(mask);
            }
            if outputs.is_empty() {
                bail!("no (input, output, mask) triples found");
            }
            let diversity = mask_color_diversity(&outputs, &regions)?;
            let mean_nmc = nmc_values.iter().sum::<f64>() / nmc_values.len() as f64;
            let summary = serde_json::json!({
                "images": outputs.len(),
                "mean_non_mask_change": mean_nmc,
                "per_image_non_mask_change": nmc_values,
                "mask_color_diversity": diversity,
            });
            std::fs::write(&args.out, serde_json::to_string_pretty(&summary)?)?;
            println!("{}", serde_json::to_string(&summary)?);
        }
    }
    Ok(())
}
